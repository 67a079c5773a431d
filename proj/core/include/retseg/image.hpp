#pragma once

#include <cstddef>
#include <vector>

#include "retseg/errors.hpp"

namespace retseg {

// Interleaved HWC f32 image in [0,1]. Masks are single-channel images with
// values in {0,1}.
struct Image {
  int h = 0, w = 0, c = 0;
  std::vector<float> v;

  Image() = default;
  Image(int h_, int w_, int c_) : h(h_), w(w_), c(c_), v(static_cast<std::size_t>(h_) * w_ * c_, 0.0f) {}

  bool empty() const { return v.empty(); }
  std::size_t size() const { return v.size(); }

  float& at(int y, int x, int ch) {
    return v[(static_cast<std::size_t>(y) * w + x) * c + ch];
  }
  float at(int y, int x, int ch) const {
    return v[(static_cast<std::size_t>(y) * w + x) * c + ch];
  }
};

using Mask = Image;  // c == 1, values in {0,1}

inline void check_same_dims(const Image& a, const Image& b, const char* what) {
  if (a.h != b.h || a.w != b.w)
    throw ShapeError(std::string(what) + ": dimension mismatch " + std::to_string(a.w) + "x" +
                     std::to_string(a.h) + " vs " + std::to_string(b.w) + "x" +
                     std::to_string(b.h));
}

}  // namespace retseg
