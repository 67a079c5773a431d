#pragma once

#include <string>
#include <vector>

#include "retseg/data.hpp"
#include "retseg/unet.hpp"

namespace retseg {

// Rectangular matrix of Pearson coefficients: one row per encoder feature
// unit, one column per target class.
struct CorrelationMatrix {
  int units = 0;
  std::vector<std::string> targets;
  std::vector<float> r;                  // units x targets, row-major
  std::vector<char> zero_variance;       // per target: no signal in the data

  float at(int unit, std::size_t target) const {
    return r[static_cast<std::size_t>(unit) * targets.size() + target];
  }
};

// Standard Pearson r. Zero variance in either argument yields 0 (flagged via
// `zero_variance` when given) so dataset-wide sweeps never abort.
float pearson(const std::vector<float>& x, const std::vector<float>& y,
              bool* zero_variance = nullptr);

// Mass-preserving block average: each output cell is the mean of its
// factor x factor input block. Dims must divide evenly.
Image area_downsample(const Image& img, int factor);

// Runs the encoder in eval mode over every image, pools the H/8 x W/8 grid
// cells of all images, and correlates each of the bottleneck units with each
// 8x area-downsampled target mask. Samples missing a target contribute an
// all-zero grid for it.
CorrelationMatrix feature_target_correlation(UNetModel& model, const std::vector<Sample>& dataset,
                                             const std::vector<std::string>& targets);

// One bottleneck unit's feature map, min-max normalized to [0,1] (all zeros
// when the map is constant), bilinearly upsampled back to input resolution.
Image activation_map(UNetModel& model, const Image& image, int unit);

float max_abs_r(const CorrelationMatrix& m, const std::string& target);

std::string correlation_csv(const CorrelationMatrix& m);  // unit,target,r

}  // namespace retseg
