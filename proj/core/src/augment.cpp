#include "retseg/augment.hpp"

#include <algorithm>
#include <cmath>

#include "retseg/errors.hpp"

namespace retseg {

namespace {

constexpr float kLumaR = 0.299f, kLumaG = 0.587f, kLumaB = 0.114f;

float luma(const Image& img, int y, int x) {
  return kLumaR * img.at(y, x, 0) + kLumaG * img.at(y, x, 1) + kLumaB * img.at(y, x, 2);
}

void clamp01(Image& img) {
  for (auto& v : img.v) v = std::clamp(v, 0.0f, 1.0f);
}

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
  v = mx;
  const float d = mx - mn;
  s = mx <= 0.0f ? 0.0f : d / mx;
  if (d <= 0.0f) {
    h = 0.0f;
    return;
  }
  if (mx == r)
    h = (g - b) / d;
  else if (mx == g)
    h = 2.0f + (b - r) / d;
  else
    h = 4.0f + (r - g) / d;
  h /= 6.0f;
  if (h < 0.0f) h += 1.0f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  h = h - std::floor(h);
  const float hh = h * 6.0f;
  const int i = static_cast<int>(hh) % 6;
  const float f = hh - std::floor(hh);
  const float p = v * (1.0f - s);
  const float q = v * (1.0f - s * f);
  const float t = v * (1.0f - s * (1.0f - f));
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

void apply_brightness(Image& img, float factor) {
  for (auto& v : img.v) v = std::clamp(v * factor, 0.0f, 1.0f);
}

void apply_contrast(Image& img, float factor) {
  double acc = 0.0;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) acc += luma(img, y, x);
  const float mean = static_cast<float>(acc / (static_cast<double>(img.h) * img.w));
  for (auto& v : img.v) v = std::clamp(factor * v + (1.0f - factor) * mean, 0.0f, 1.0f);
}

void apply_saturation(Image& img, float factor) {
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const float l = luma(img, y, x);
      for (int ch = 0; ch < 3; ++ch)
        img.at(y, x, ch) = std::clamp(factor * img.at(y, x, ch) + (1.0f - factor) * l, 0.0f, 1.0f);
    }
}

void apply_hue(Image& img, float shift) {
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      float h, s, v;
      rgb_to_hsv(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2), h, s, v);
      hsv_to_rgb(h + shift, s, v, img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
    }
  clamp01(img);
}

}  // namespace

Image hflip(const Image& img) {
  Image out(img.h, img.w, img.c);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < img.c; ++ch) out.at(y, x, ch) = img.at(y, img.w - 1 - x, ch);
  return out;
}

Image vflip(const Image& img) {
  Image out(img.h, img.w, img.c);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < img.c; ++ch) out.at(y, x, ch) = img.at(img.h - 1 - y, x, ch);
  return out;
}

Image to_grayscale(const Image& img) {
  Image out(img.h, img.w, img.c);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const float l = luma(img, y, x);
      for (int ch = 0; ch < img.c; ++ch) out.at(y, x, ch) = l;
    }
  return out;
}

Image color_jitter(const Image& img, const ColorJitterMagnitudes& mag, RngStream& rng) {
  Image out = img;
  // factors drawn up front so the randomized order costs no extra draws
  const float fb = rng.uniform(1.0f - mag.brightness, 1.0f + mag.brightness);
  const float fc = rng.uniform(1.0f - mag.contrast, 1.0f + mag.contrast);
  const float fs = rng.uniform(1.0f - mag.saturation, 1.0f + mag.saturation);
  const float fh = rng.uniform(-mag.hue, mag.hue);
  int order[4] = {0, 1, 2, 3};
  for (int i = 3; i > 0; --i) std::swap(order[i], order[rng.uniform_int(i + 1)]);
  for (int k : order) {
    switch (k) {
      case 0: if (mag.brightness > 0.0f) apply_brightness(out, fb); break;
      case 1: if (mag.contrast > 0.0f) apply_contrast(out, fc); break;
      case 2: if (mag.saturation > 0.0f) apply_saturation(out, fs); break;
      default: if (mag.hue > 0.0f) apply_hue(out, fh); break;
    }
  }
  return out;
}

Image pretrain_view(const Image& img, const PretrainAugmentConfig& cfg, RngStream& rng) {
  const int cs = cfg.view_crop_size;
  if (img.h < cs || img.w < cs)
    throw ValueError("pretrain_view: image " + std::to_string(img.w) + "x" +
                     std::to_string(img.h) + " smaller than crop size " + std::to_string(cs));
  const int x0 = img.w == cs ? 0 : rng.uniform_int(img.w - cs + 1);
  const int y0 = img.h == cs ? 0 : rng.uniform_int(img.h - cs + 1);
  Image view(cs, cs, img.c);
  for (int y = 0; y < cs; ++y)
    for (int x = 0; x < cs; ++x)
      for (int ch = 0; ch < img.c; ++ch) view.at(y, x, ch) = img.at(y0 + y, x0 + x, ch);
  if (rng.bernoulli(cfg.jitter_prob)) view = color_jitter(view, cfg.jitter, rng);
  if (rng.bernoulli(cfg.grayscale_prob)) view = to_grayscale(view);
  if (rng.bernoulli(cfg.hflip_prob)) view = hflip(view);
  if (rng.bernoulli(cfg.vflip_prob)) view = vflip(view);
  clamp01(view);
  return view;
}

Image warp_affine_bilinear(const Image& img, float m00, float m01, float m02, float m10,
                           float m11, float m12) {
  Image out(img.h, img.w, img.c);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const float sx = m00 * static_cast<float>(x) + m01 * static_cast<float>(y) + m02;
      const float sy = m10 * static_cast<float>(x) + m11 * static_cast<float>(y) + m12;
      if (sx < 0.0f || sy < 0.0f || sx > static_cast<float>(img.w - 1) ||
          sy > static_cast<float>(img.h - 1))
        continue;  // zero fill
      const int x0 = static_cast<int>(sx), y0 = static_cast<int>(sy);
      const int x1 = std::min(x0 + 1, img.w - 1), y1 = std::min(y0 + 1, img.h - 1);
      const float wx = sx - static_cast<float>(x0), wy = sy - static_cast<float>(y0);
      for (int ch = 0; ch < img.c; ++ch) {
        const float top = img.at(y0, x0, ch) * (1.0f - wx) + img.at(y0, x1, ch) * wx;
        const float bot = img.at(y1, x0, ch) * (1.0f - wx) + img.at(y1, x1, ch) * wx;
        out.at(y, x, ch) = top * (1.0f - wy) + bot * wy;
      }
    }
  return out;
}

Image warp_affine_nearest(const Image& img, float m00, float m01, float m02, float m10, float m11,
                          float m12) {
  Image out(img.h, img.w, img.c);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const float sx = m00 * static_cast<float>(x) + m01 * static_cast<float>(y) + m02;
      const float sy = m10 * static_cast<float>(x) + m11 * static_cast<float>(y) + m12;
      const int ix = static_cast<int>(std::lround(sx)), iy = static_cast<int>(std::lround(sy));
      if (ix < 0 || iy < 0 || ix >= img.w || iy >= img.h) continue;
      for (int ch = 0; ch < img.c; ++ch) out.at(y, x, ch) = img.at(iy, ix, ch);
    }
  return out;
}

Sample finetune_augment(const Sample& sample, const FinetuneAugmentConfig& cfg, RngStream& rng) {
  Sample out;
  out.id = sample.id;

  // inverse affine map (output pixel -> source pixel) about the image center
  const float cx = static_cast<float>(sample.image.w - 1) / 2.0f;
  const float cy = static_cast<float>(sample.image.h - 1) / 2.0f;
  float m00 = 1.0f, m01 = 0.0f, m10 = 0.0f, m11 = 1.0f, tx = 0.0f, ty = 0.0f;
  const int which = rng.uniform_int(3);
  if (which == 0) {
    const float ang = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) * 3.14159265f / 180.0f;
    m00 = std::cos(ang);
    m01 = -std::sin(ang);
    m10 = std::sin(ang);
    m11 = std::cos(ang);
  } else if (which == 1) {
    const float inv = 1.0f / rng.uniform(cfg.scale_min, cfg.scale_max);
    m00 = inv;
    m11 = inv;
  } else {
    tx = -rng.uniform(-cfg.translate_frac, cfg.translate_frac) * static_cast<float>(sample.image.w);
  }
  const float m02 = cx - m00 * cx - m01 * cy + tx;
  const float m12 = cy - m10 * cx - m11 * cy + ty;

  out.image = warp_affine_bilinear(sample.image, m00, m01, m02, m10, m11, m12);
  if (!sample.fov.empty()) out.fov = warp_affine_nearest(sample.fov, m00, m01, m02, m10, m11, m12);
  for (const auto& [name, mask] : sample.targets)
    out.targets[name] = warp_affine_nearest(mask, m00, m01, m02, m10, m11, m12);

  out.image = color_jitter(out.image, cfg.jitter, rng);

  if (rng.bernoulli(cfg.hflip_prob)) {
    out.image = hflip(out.image);
    if (!out.fov.empty()) out.fov = hflip(out.fov);
    for (auto& [name, mask] : out.targets) mask = hflip(mask);
  }
  if (rng.bernoulli(cfg.vflip_prob)) {
    out.image = vflip(out.image);
    if (!out.fov.empty()) out.fov = vflip(out.fov);
    for (auto& [name, mask] : out.targets) mask = vflip(mask);
  }
  clamp01(out.image);
  return out;
}

}  // namespace retseg
