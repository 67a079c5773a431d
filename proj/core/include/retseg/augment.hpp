#pragma once

#include "retseg/data.hpp"
#include "retseg/image.hpp"
#include "retseg/rng.hpp"

namespace retseg {

struct ColorJitterMagnitudes {
  float brightness = 0.0f;
  float contrast = 0.0f;
  float saturation = 0.0f;
  float hue = 0.0f;  // fraction of a full hue circle
};

struct PretrainAugmentConfig {
  int resize_crop_size = 512;  // ingestion size; views are cropped from this
  int view_crop_size = 128;
  float jitter_prob = 0.8f;
  ColorJitterMagnitudes jitter{0.4f, 0.4f, 0.4f, 0.1f};
  float grayscale_prob = 0.2f;
  float hflip_prob = 0.5f;
  float vflip_prob = 0.5f;
};

struct FinetuneAugmentConfig {
  float rotation_deg = 45.0f;   // rotation drawn from [-rotation_deg, +rotation_deg]
  float scale_min = 0.95f;
  float scale_max = 1.2f;
  float translate_frac = 0.05f; // horizontal translation, fraction of width
  ColorJitterMagnitudes jitter{0.25f, 0.25f, 0.25f, 0.1f};
  float hflip_prob = 0.5f;
  float vflip_prob = 0.5f;
};

Image hflip(const Image& img);
Image vflip(const Image& img);

// Luma-weighted desaturation (0.299/0.587/0.114).
Image to_grayscale(const Image& img);

// Brightness / contrast / saturation / hue jitter with randomized
// sub-transform order; output clamped to [0,1].
Image color_jitter(const Image& img, const ColorJitterMagnitudes& mag, RngStream& rng);

// One 128x128 pre-training view: random crop, then jitter, grayscale and
// flips, each applied with its configured probability.
Image pretrain_view(const Image& img, const PretrainAugmentConfig& cfg, RngStream& rng);

// Fine-tuning augmentation: exactly one geometric transform (rotation,
// scaling or horizontal translation, chosen uniformly) applied jointly to
// image and masks, then color jitter on the image only, then joint flips.
Sample finetune_augment(const Sample& sample, const FinetuneAugmentConfig& cfg, RngStream& rng);

// Same-size affine warp helpers (inverse mapping, zero fill outside).
Image warp_affine_bilinear(const Image& img, float m00, float m01, float m02, float m10,
                           float m11, float m12);
Image warp_affine_nearest(const Image& img, float m00, float m01, float m02, float m10, float m11,
                          float m12);

}  // namespace retseg
