#pragma once

#include <map>
#include <string>
#include <vector>

#include "retseg/image.hpp"
#include "retseg/rng.hpp"
#include "retseg/tensor.hpp"

namespace retseg {

struct Sample {
  std::string id;
  Image image;                         // RGB, [0,1]
  Mask fov;                            // optional: empty() when absent
  std::map<std::string, Mask> targets; // binary masks keyed by target name
};

struct ManifestEntry {
  std::string id;
  std::string image_path;
  std::string fov_path;                          // empty when absent
  std::map<std::string, std::string> target_paths;
};

// One line per sample, tab separated: image path, FOV path or "-", then
// target:name=path pairs. Paths are relative to the manifest's directory.
struct DatasetManifest {
  std::string root;
  std::vector<ManifestEntry> entries;  // sorted by id
  int resize_width = 0;                // 0: native resolution
};

DatasetManifest load_manifest(const std::string& path);
void save_manifest(const std::string& path, const DatasetManifest& manifest);

// Loads and validates one sample: image scaled to [0,1], masks binarized,
// dimensions cross-checked.
Sample load_sample(const DatasetManifest& manifest, const ManifestEntry& entry);
std::vector<Sample> load_all(const DatasetManifest& manifest);

Image resize_bilinear(const Image& img, int out_w, int out_h);
Image resize_nearest(const Image& img, int out_w, int out_h);

// Resizes a sample to the given width, keeping aspect ratio (height rounded
// to the nearest integer); masks use nearest-neighbor.
Sample resize_sample_to_width(const Sample& s, int width);

// Seeded shuffle, floor(n * val_fraction) validation samples.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split(std::size_t n,
                                                                    double val_fraction,
                                                                    std::uint64_t seed);

struct SynthConfig {
  int size = 512;            // square images
  int min_vessels = 5, max_vessels = 15;
  float min_width = 1.0f, max_width = 6.0f;
  int min_lesions = 0, max_lesions = 8;
};

// Fundus-like synthetic sample: circular FOV with radial illumination,
// smooth dark curves as the "vessels" target, bright ellipse blobs as the
// "lesions" target. Masks are exact by construction and lie inside the FOV.
Sample synth_sample(const SynthConfig& cfg, std::uint64_t seed, std::uint64_t index);
std::vector<Sample> synth_generate(int n, const SynthConfig& cfg, std::uint64_t seed);

// Writes samples as PPM/PGM files plus a manifest; returns the manifest path.
std::string save_dataset(const std::string& dir, const std::vector<Sample>& samples);

// Layout conversions between HWC images and NCHW tensors.
Tensor image_to_tensor(const Image& img);                      // 1xCxHxW
Tensor images_to_batch(const std::vector<Image>& imgs);        // NxCxHxW
Image tensor_to_image(const Tensor& t, int batch_index = 0);   // HWC

}  // namespace retseg
