#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "retseg/rng.hpp"
#include "retseg/tensor.hpp"

namespace retseg {

inline TensorT<double> to_double(const Tensor& t) {
  std::vector<double> d(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) d[i] = static_cast<double>(t.data()[i]);
  return TensorT<double>::from_data(t.shape(), std::move(d));
}

inline Tensor to_float(const TensorT<double>& t) {
  std::vector<float> d(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) d[i] = static_cast<float>(t.data()[i]);
  return Tensor::from_data(t.shape(), std::move(d));
}

struct GradCheckOptions {
  double eps = 1e-3;
  // Cap on checked coordinates per input; <= 0 checks all of them.
  int max_coords_per_input = 0;
  std::uint64_t sample_seed = 7;
  // Relative-error denominator floor, guards inputs whose true
  // gradient is identically zero.
  double denom_floor = 1e-8;
};

// Compares the analytic f32 gradients of `inputs` against central finite
// differences of an f64 forward. The f32 forward must read the inputs
// in place and return a scalar loss on the given tape; the f64 forward
// receives perturbed double copies of the inputs and returns the loss value.
// The error is reported per input as ||numeric - analytic|| / max(||numeric||,
// ||analytic||, floor) over the sampled coordinates; a norm ratio keeps
// coordinates with near-zero gradients from amplifying f32 round-off into
// spurious failures, while a wrong backward formula still shows up at O(1).
inline double grad_check(std::vector<Tensor> inputs,
                         const std::function<Tensor(FloatTape*)>& forward_f32,
                         const std::function<double(const std::vector<TensorT<double>>&)>& forward_f64,
                         const GradCheckOptions& opt = {}) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.ensure_grad();
    in.zero_grad();
  }
  FloatTape tape;
  Tensor loss = forward_f32(&tape);
  backward(loss);

  std::vector<TensorT<double>> dbl;
  dbl.reserve(inputs.size());
  for (const auto& in : inputs) dbl.push_back(to_double(in));

  RngStream rng(opt.sample_seed);
  double max_rel = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::size_t n = inputs[k].size();
    std::vector<std::size_t> coords;
    if (opt.max_coords_per_input > 0 && n > static_cast<std::size_t>(opt.max_coords_per_input)) {
      for (int i = 0; i < opt.max_coords_per_input; ++i)
        coords.push_back(static_cast<std::size_t>(rng.uniform_int(static_cast<int>(n))));
    } else {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    }
    double diff_sq = 0.0, num_sq = 0.0, ana_sq = 0.0;
    for (std::size_t idx : coords) {
      const double x0 = dbl[k].data()[idx];
      dbl[k].data()[idx] = x0 + opt.eps;
      const double fp = forward_f64(dbl);
      dbl[k].data()[idx] = x0 - opt.eps;
      const double fm = forward_f64(dbl);
      dbl[k].data()[idx] = x0;
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      const double analytic = static_cast<double>(inputs[k].grad()[idx]);
      diff_sq += (numeric - analytic) * (numeric - analytic);
      num_sq += numeric * numeric;
      ana_sq += analytic * analytic;
    }
    const double denom =
        std::max({std::sqrt(num_sq), std::sqrt(ana_sq), opt.denom_floor});
    max_rel = std::max(max_rel, std::sqrt(diff_sq) / denom);
  }
  return max_rel;
}

}  // namespace retseg
