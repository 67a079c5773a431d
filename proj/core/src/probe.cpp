#include "retseg/probe.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "retseg/errors.hpp"

namespace retseg {

float pearson(const std::vector<float>& x, const std::vector<float>& y, bool* zero_variance) {
  if (x.size() != y.size())
    throw ValueError("pearson: length mismatch (" + std::to_string(x.size()) + " vs " +
                     std::to_string(y.size()) + ")");
  if (x.size() < 2) throw ValueError("pearson: need at least 2 points");
  if (zero_variance) *zero_variance = false;
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    if (zero_variance) *zero_variance = true;
    return 0.0f;
  }
  return static_cast<float>(sxy / std::sqrt(sxx * syy));
}

Image area_downsample(const Image& img, int factor) {
  if (factor < 1) throw ValueError("area_downsample: factor must be >= 1");
  if (img.h % factor != 0 || img.w % factor != 0)
    throw ShapeError("area_downsample: dims " + std::to_string(img.w) + "x" +
                     std::to_string(img.h) + " not divisible by " + std::to_string(factor));
  Image out(img.h / factor, img.w / factor, img.c);
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x)
      for (int ch = 0; ch < img.c; ++ch) {
        double acc = 0.0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx)
            acc += img.at(y * factor + dy, x * factor + dx, ch);
        out.at(y, x, ch) = static_cast<float>(acc * inv);
      }
  return out;
}

CorrelationMatrix feature_target_correlation(UNetModel& model, const std::vector<Sample>& dataset,
                                             const std::vector<std::string>& targets) {
  if (dataset.empty()) throw ValueError("feature_target_correlation: empty dataset");
  if (targets.empty()) throw ValueError("feature_target_correlation: no targets requested");
  const int factor = model.config.pool_factor();
  const int units = model.config.encoder_channel_widths().back();

  std::vector<std::vector<float>> unit_cells(static_cast<std::size_t>(units));
  std::vector<std::vector<float>> target_cells(targets.size());

  for (const auto& s : dataset) {
    Tensor feats = encoder_features(model, image_to_tensor(s.image), Mode::Eval,
                                    static_cast<FloatTape*>(nullptr));
    const int gh = feats.dim(2), gw = feats.dim(3);
    const std::size_t plane = static_cast<std::size_t>(gh) * gw;
    for (int u = 0; u < units; ++u) {
      const float* fp = feats.ptr() + static_cast<std::size_t>(u) * plane;
      unit_cells[static_cast<std::size_t>(u)].insert(unit_cells[static_cast<std::size_t>(u)].end(),
                                                     fp, fp + plane);
    }
    for (std::size_t t = 0; t < targets.size(); ++t) {
      auto it = s.targets.find(targets[t]);
      if (it == s.targets.end()) {
        target_cells[t].insert(target_cells[t].end(), plane, 0.0f);
      } else {
        const Image ds = area_downsample(it->second, factor);
        target_cells[t].insert(target_cells[t].end(), ds.v.begin(), ds.v.end());
      }
    }
  }

  CorrelationMatrix m;
  m.units = units;
  m.targets = targets;
  m.r.assign(static_cast<std::size_t>(units) * targets.size(), 0.0f);
  m.zero_variance.assign(targets.size(), 0);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto [mn, mx] = std::minmax_element(target_cells[t].begin(), target_cells[t].end());
    if (*mn == *mx) {
      // flat target column: every r is 0 by the zero-variance convention
      m.zero_variance[t] = 1;
      continue;
    }
    for (int u = 0; u < units; ++u)
      m.r[static_cast<std::size_t>(u) * targets.size() + t] =
          pearson(unit_cells[static_cast<std::size_t>(u)], target_cells[t]);
  }
  return m;
}

Image activation_map(UNetModel& model, const Image& image, int unit) {
  const int units = model.config.encoder_channel_widths().back();
  if (unit < 0 || unit >= units)
    throw ValueError("activation_map: unit " + std::to_string(unit) + " out of range [0, " +
                     std::to_string(units) + ")");
  Tensor feats = encoder_features(model, image_to_tensor(image), Mode::Eval,
                                  static_cast<FloatTape*>(nullptr));
  const int gh = feats.dim(2), gw = feats.dim(3);
  const std::size_t plane = static_cast<std::size_t>(gh) * gw;
  const float* fp = feats.ptr() + static_cast<std::size_t>(unit) * plane;
  Image grid(gh, gw, 1);
  const float mn = *std::min_element(fp, fp + plane);
  const float mx = *std::max_element(fp, fp + plane);
  if (mx > mn)
    for (std::size_t i = 0; i < plane; ++i) grid.v[i] = (fp[i] - mn) / (mx - mn);
  // zero range leaves the map all zeros
  return resize_bilinear(grid, image.w, image.h);
}

float max_abs_r(const CorrelationMatrix& m, const std::string& target) {
  for (std::size_t t = 0; t < m.targets.size(); ++t) {
    if (m.targets[t] != target) continue;
    float best = 0.0f;
    for (int u = 0; u < m.units; ++u) best = std::max(best, std::abs(m.at(u, t)));
    return best;
  }
  throw ValueError("max_abs_r: unknown target '" + target + "'");
}

std::string correlation_csv(const CorrelationMatrix& m) {
  std::ostringstream os;
  os << "unit,target,r\n";
  for (int u = 0; u < m.units; ++u)
    for (std::size_t t = 0; t < m.targets.size(); ++t)
      os << u << "," << m.targets[t] << "," << m.at(u, t) << "\n";
  return os.str();
}

}  // namespace retseg
