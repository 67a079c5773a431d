#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "retseg/image.hpp"
#include "retseg/unet.hpp"

namespace retseg {

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  double dice() const {
    const std::uint64_t denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
};

struct PRPoint {
  float threshold;
  double precision;
  double recall;
};

struct PRCurve {
  std::vector<PRPoint> points;  // descending threshold, non-decreasing recall
};

struct EvalReport {
  float threshold = 0.5f;
  ConfusionCounts counts;
  double dice = 0.0;
  double auprc = 0.0;
  bool has_auprc = false;
  std::vector<std::pair<std::string, double>> per_image_dice;  // diagnostic only
};

// Flip test-time augmentation: average the un-flipped predictions over the
// four horizontal/vertical flip combinations. Runs in eval mode.
Image predict_tta(UNetModel& model, const Image& img, bool use_tta = true);

// Scans the fixed grid {0.00, 0.01, ..., 1.00} and returns the threshold
// maximizing pooled Dice over the given (training) predictions; ties go to
// the lowest threshold. Empty masks may be passed in `fovs` when a dataset
// has no field-of-view annotation.
float select_threshold(const std::vector<Image>& probs, const std::vector<Mask>& gts,
                       const std::vector<Mask>& fovs);

// Pixel counts pooled over all images, Dice = 2TP / (2TP + FP + FN).
// Prediction is positive where prob >= threshold.
double pooled_dice(const std::vector<Image>& probs, const std::vector<Mask>& gts,
                   const std::vector<Mask>& fovs, float threshold,
                   ConfusionCounts* counts_out = nullptr);

// Precision/recall at every distinct score threshold, descending.
PRCurve pr_curve(const std::vector<float>& scores, const std::vector<std::uint8_t>& labels);

// Average-precision summation: AP = sum_n (R_n - R_{n-1}) * P_n, R_0 = 0.
double auprc(const PRCurve& curve);

// Flattens in-FOV pixels of all images into (scores, labels).
void pool_pixels(const std::vector<Image>& probs, const std::vector<Mask>& gts,
                 const std::vector<Mask>& fovs, std::vector<float>& scores,
                 std::vector<std::uint8_t>& labels);

enum class Sided { One, Two };

struct TInterval {
  double mean = 0.0;
  double lower = 0.0;
  double upper = 0.0;  // +infinity for one-sided intervals
  bool significant = false;  // zero outside the interval
};

// Paired t-confidence interval on the differences (N >= 2). Zero variance
// degenerates to [mean, mean] (or [mean, +inf) for one-sided).
TInterval paired_tci(const std::vector<double>& diffs, Sided sided, double level = 0.95);

std::string format_report(const EvalReport& report);
std::string report_csv_header();
std::string report_csv_row(const EvalReport& report, const std::string& run_id);

}  // namespace retseg
