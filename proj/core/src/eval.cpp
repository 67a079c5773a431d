#include "retseg/eval.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "retseg/data.hpp"
#include "retseg/errors.hpp"

namespace retseg {

Image predict_tta(UNetModel& model, const Image& img, bool use_tta) {
  Tensor x = image_to_tensor(img);
  const int combos = use_tta ? 4 : 1;
  std::vector<Tensor> terms;
  terms.reserve(static_cast<std::size_t>(combos));
  for (int k = 0; k < combos; ++k) {
    const bool fh = (k & 1) != 0, fv = (k & 2) != 0;
    Tensor xin = (fh || fv) ? flip_hw(x, fh, fv) : x;
    Tensor y = forward(model, xin, Mode::Eval, static_cast<FloatTape*>(nullptr));
    if (fh || fv) y = flip_hw(y, fh, fv);
    terms.push_back(std::move(y));
  }
  if (!use_tta) return tensor_to_image(terms[0]);
  // Pairwise grouping (t0+t1)+(t2+t3): flipping the input permutes the terms
  // within and across the pairs only, so commutativity alone makes the
  // average bit-exact under flips (sequential accumulation would not be).
  Tensor acc = Tensor::zeros({1, 1, img.h, img.w});
  for (std::size_t i = 0; i < acc.size(); ++i)
    acc.data()[i] = ((terms[0].data()[i] + terms[1].data()[i]) +
                     (terms[2].data()[i] + terms[3].data()[i])) /
                    4.0f;
  return tensor_to_image(acc);
}

namespace {

void check_eval_inputs(const std::vector<Image>& probs, const std::vector<Mask>& gts,
                       const std::vector<Mask>& fovs) {
  if (probs.empty()) throw ValueError("evaluation needs at least one image");
  if (gts.size() != probs.size() || (!fovs.empty() && fovs.size() != probs.size()))
    throw ValueError("evaluation inputs must have matching lengths");
  for (std::size_t i = 0; i < probs.size(); ++i) {
    check_same_dims(probs[i], gts[i], "evaluation (prob vs gt)");
    if (!fovs.empty() && !fovs[i].empty()) check_same_dims(probs[i], fovs[i], "evaluation (fov)");
  }
}

}  // namespace

void pool_pixels(const std::vector<Image>& probs, const std::vector<Mask>& gts,
                 const std::vector<Mask>& fovs, std::vector<float>& scores,
                 std::vector<std::uint8_t>& labels) {
  check_eval_inputs(probs, gts, fovs);
  scores.clear();
  labels.clear();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const Mask* fov = (!fovs.empty() && !fovs[i].empty()) ? &fovs[i] : nullptr;
    for (std::size_t p = 0; p < probs[i].size(); ++p) {
      if (fov && fov->v[p] == 0.0f) continue;
      scores.push_back(probs[i].v[p]);
      labels.push_back(gts[i].v[p] > 0.0f ? 1 : 0);
    }
  }
  if (scores.empty()) throw ValueError("no in-FOV pixels to evaluate");
}

double pooled_dice(const std::vector<Image>& probs, const std::vector<Mask>& gts,
                   const std::vector<Mask>& fovs, float threshold, ConfusionCounts* counts_out) {
  check_eval_inputs(probs, gts, fovs);
  ConfusionCounts c;
  bool any = false;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const Mask* fov = (!fovs.empty() && !fovs[i].empty()) ? &fovs[i] : nullptr;
    for (std::size_t p = 0; p < probs[i].size(); ++p) {
      if (fov && fov->v[p] == 0.0f) continue;
      any = true;
      const bool pred = probs[i].v[p] >= threshold;
      const bool pos = gts[i].v[p] > 0.0f;
      if (pred && pos)
        ++c.tp;
      else if (pred && !pos)
        ++c.fp;
      else if (!pred && pos)
        ++c.fn;
      else
        ++c.tn;
    }
  }
  if (!any) throw ValueError("pooled_dice: no in-FOV pixels");
  if (counts_out) *counts_out = c;
  return c.dice();
}

float select_threshold(const std::vector<Image>& probs, const std::vector<Mask>& gts,
                       const std::vector<Mask>& fovs) {
  std::vector<float> scores;
  std::vector<std::uint8_t> labels;
  pool_pixels(probs, gts, fovs, scores, labels);
  std::uint64_t positives = 0;
  for (auto l : labels) positives += l;
  if (positives == 0)
    throw ValueError("select_threshold: ground truth has no positive pixels (Dice undefined)");
  // one sort, then a cumulative sweep covers all 101 grid thresholds
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  float best_t = 0.0f;
  double best_dice = -1.0;
  std::size_t cursor = 0;
  std::uint64_t tp = 0, fp = 0;
  for (int gi = 100; gi >= 0; --gi) {
    const float t = static_cast<float>(gi) / 100.0f;
    while (cursor < order.size() && scores[order[cursor]] >= t) {
      if (labels[order[cursor]])
        ++tp;
      else
        ++fp;
      ++cursor;
    }
    const std::uint64_t fn = positives - tp;
    const std::uint64_t denom = 2 * tp + fp + fn;
    const double dice = denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
    // ties go to the lowest threshold, so >= wins while scanning downward
    if (dice >= best_dice) {
      best_dice = dice;
      best_t = t;
    }
  }
  return best_t;
}

PRCurve pr_curve(const std::vector<float>& scores, const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size()) throw ValueError("pr_curve: length mismatch");
  if (scores.empty()) throw ValueError("pr_curve: empty input");
  std::uint64_t positives = 0;
  for (auto l : labels) positives += l;
  if (positives == 0) throw ValueError("pr_curve: no positive labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  PRCurve curve;
  std::uint64_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const float t = scores[order[i]];
    while (i < order.size() && scores[order[i]] == t) {
      if (labels[order[i]])
        ++tp;
      else
        ++fp;
      ++i;
    }
    curve.points.push_back({t, static_cast<double>(tp) / static_cast<double>(tp + fp),
                            static_cast<double>(tp) / static_cast<double>(positives)});
  }
  return curve;
}

double auprc(const PRCurve& curve) {
  double ap = 0.0, prev_recall = 0.0;
  for (const auto& pt : curve.points) {
    ap += (pt.recall - prev_recall) * pt.precision;
    prev_recall = pt.recall;
  }
  return ap;
}

TInterval paired_tci(const std::vector<double>& diffs, Sided sided, double level) {
  if (diffs.size() < 2) throw ValueError("paired_tci: need at least 2 paired differences");
  const double n = static_cast<double>(diffs.size());
  const double mean = std::accumulate(diffs.begin(), diffs.end(), 0.0) / n;
  double ss = 0.0;
  for (double d : diffs) ss += (d - mean) * (d - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  TInterval out;
  out.mean = mean;
  const double inf = std::numeric_limits<double>::infinity();
  if (sd == 0.0) {
    out.lower = mean;
    out.upper = sided == Sided::One ? inf : mean;
    out.significant = mean != 0.0;
    return out;
  }
  boost::math::students_t dist(n - 1.0);
  if (sided == Sided::One) {
    const double t = boost::math::quantile(dist, level);
    out.lower = mean - t * sd / std::sqrt(n);
    out.upper = inf;
  } else {
    const double t = boost::math::quantile(dist, 0.5 + level / 2.0);
    out.lower = mean - t * sd / std::sqrt(n);
    out.upper = mean + t * sd / std::sqrt(n);
  }
  out.significant = 0.0 < out.lower || 0.0 > out.upper;
  return out;
}

std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  os << "threshold: " << r.threshold << "\n";
  os << "tp: " << r.counts.tp << "\nfp: " << r.counts.fp << "\nfn: " << r.counts.fn
     << "\ntn: " << r.counts.tn << "\n";
  os << "dice: " << r.dice << "\n";
  if (r.has_auprc) os << "auprc: " << r.auprc << "\n";
  for (const auto& [id, d] : r.per_image_dice) os << "image_dice " << id << ": " << d << "\n";
  return os.str();
}

std::string report_csv_header() { return "run,threshold,tp,fp,fn,tn,dice,auprc"; }

std::string report_csv_row(const EvalReport& r, const std::string& run_id) {
  std::ostringstream os;
  os << run_id << "," << r.threshold << "," << r.counts.tp << "," << r.counts.fp << ","
     << r.counts.fn << "," << r.counts.tn << "," << r.dice << ","
     << (r.has_auprc ? std::to_string(r.auprc) : std::string(""));
  return os.str();
}

}  // namespace retseg
