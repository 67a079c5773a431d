#include "retseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "retseg/errors.hpp"
#include "retseg/image_io.hpp"

namespace fs = std::filesystem;

namespace retseg {

namespace {

std::string stem_of(const std::string& path) { return fs::path(path).stem().string(); }

}  // namespace

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  DatasetManifest m;
  m.root = fs::path(path).parent_path().string();
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (line[0] == '@') {
      std::istringstream ls(line.substr(1));
      std::string key;
      ls >> key;
      if (key == "resize-width")
        ls >> m.resize_width;
      else
        throw IoError(path + ": unknown manifest directive @" + key);
      continue;
    }
    std::vector<std::string> cols;
    std::istringstream ls(line);
    std::string col;
    while (std::getline(ls, col, '\t')) cols.push_back(col);
    if (cols.empty()) continue;
    ManifestEntry e;
    e.image_path = cols[0];
    e.id = stem_of(cols[0]);
    if (cols.size() > 1 && cols[1] != "-") e.fov_path = cols[1];
    for (std::size_t i = 2; i < cols.size(); ++i) {
      if (cols[i].rfind("target:", 0) != 0)
        throw IoError(path + ": expected target:name=path column, got '" + cols[i] + "'");
      const auto eq = cols[i].find('=');
      if (eq == std::string::npos)
        throw IoError(path + ": malformed target column '" + cols[i] + "'");
      e.target_paths[cols[i].substr(7, eq - 7)] = cols[i].substr(eq + 1);
    }
    m.entries.push_back(std::move(e));
  }
  std::sort(m.entries.begin(), m.entries.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.id < b.id; });
  for (const auto& e : m.entries) {
    auto check = [&](const std::string& rel) {
      if (!rel.empty() && !fs::exists(fs::path(m.root) / rel))
        throw IoError("manifest " + path + " references missing file " + rel);
    };
    check(e.image_path);
    check(e.fov_path);
    for (const auto& [name, p] : e.target_paths) check(p);
  }
  return m;
}

void save_manifest(const std::string& path, const DatasetManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path);
  if (manifest.resize_width > 0) out << "@resize-width " << manifest.resize_width << "\n";
  for (const auto& e : manifest.entries) {
    out << e.image_path << "\t" << (e.fov_path.empty() ? "-" : e.fov_path);
    for (const auto& [name, p] : e.target_paths) out << "\ttarget:" << name << "=" << p;
    out << "\n";
  }
}

Sample load_sample(const DatasetManifest& manifest, const ManifestEntry& entry) {
  Sample s;
  s.id = entry.id;
  s.image = read_image((fs::path(manifest.root) / entry.image_path).string());
  if (s.image.c == 1) {
    // promote grayscale inputs to 3 channels
    Image rgb(s.image.h, s.image.w, 3);
    for (int y = 0; y < s.image.h; ++y)
      for (int x = 0; x < s.image.w; ++x)
        for (int ch = 0; ch < 3; ++ch) rgb.at(y, x, ch) = s.image.at(y, x, 0);
    s.image = std::move(rgb);
  }
  auto check_mask = [&](const Mask& m, const std::string& what) {
    if (m.h != s.image.h || m.w != s.image.w)
      throw ShapeError(entry.id + ": " + what + " is " + std::to_string(m.w) + "x" +
                       std::to_string(m.h) + " but image is " + std::to_string(s.image.w) + "x" +
                       std::to_string(s.image.h));
  };
  if (!entry.fov_path.empty()) {
    s.fov = read_mask((fs::path(manifest.root) / entry.fov_path).string());
    check_mask(s.fov, "FOV mask");
  }
  for (const auto& [name, p] : entry.target_paths) {
    Mask m = read_mask((fs::path(manifest.root) / p).string());
    check_mask(m, "target mask '" + name + "'");
    s.targets[name] = std::move(m);
  }
  return s;
}

std::vector<Sample> load_all(const DatasetManifest& manifest) {
  std::vector<Sample> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) out.push_back(load_sample(manifest, e));
  return out;
}

Image resize_bilinear(const Image& img, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1) throw ValueError("resize_bilinear: target dims must be >= 1");
  if (out_w == img.w && out_h == img.h) return img;
  Image out(out_h, out_w, img.c);
  const float sx = static_cast<float>(img.w) / static_cast<float>(out_w);
  const float sy = static_cast<float>(img.h) / static_cast<float>(out_h);
  for (int y = 0; y < out_h; ++y) {
    // align-corners false convention
    const float fy = std::clamp((static_cast<float>(y) + 0.5f) * sy - 0.5f, 0.0f,
                                static_cast<float>(img.h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.h - 1);
    const float wy = fy - static_cast<float>(y0);
    for (int x = 0; x < out_w; ++x) {
      const float fx = std::clamp((static_cast<float>(x) + 0.5f) * sx - 0.5f, 0.0f,
                                  static_cast<float>(img.w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.w - 1);
      const float wx = fx - static_cast<float>(x0);
      for (int ch = 0; ch < img.c; ++ch) {
        const float top = img.at(y0, x0, ch) * (1.0f - wx) + img.at(y0, x1, ch) * wx;
        const float bot = img.at(y1, x0, ch) * (1.0f - wx) + img.at(y1, x1, ch) * wx;
        out.at(y, x, ch) = top * (1.0f - wy) + bot * wy;
      }
    }
  }
  return out;
}

Image resize_nearest(const Image& img, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1) throw ValueError("resize_nearest: target dims must be >= 1");
  if (out_w == img.w && out_h == img.h) return img;
  Image out(out_h, out_w, img.c);
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(static_cast<int>((static_cast<float>(y) + 0.5f) * img.h / out_h),
                            img.h - 1);
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(static_cast<int>((static_cast<float>(x) + 0.5f) * img.w / out_w),
                              img.w - 1);
      for (int ch = 0; ch < img.c; ++ch) out.at(y, x, ch) = img.at(sy, sx, ch);
    }
  }
  return out;
}

Sample resize_sample_to_width(const Sample& s, int width) {
  if (width <= 0 || width == s.image.w) return s;
  const int height = static_cast<int>(
      std::lround(static_cast<double>(s.image.h) * width / s.image.w));
  Sample out;
  out.id = s.id;
  out.image = resize_bilinear(s.image, width, height);
  if (!s.fov.empty()) out.fov = resize_nearest(s.fov, width, height);
  for (const auto& [name, m] : s.targets) out.targets[name] = resize_nearest(m, width, height);
  return out;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split(std::size_t n,
                                                                    double val_fraction,
                                                                    std::uint64_t seed) {
  if (n < 1) throw ValueError("split: need at least one sample");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  RngStream rng = RngStream::keyed(seed, {0x517u});
  for (std::size_t i = n - 1; i > 0; --i)
    std::swap(idx[i], idx[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i + 1)))]);
  const std::size_t n_val = static_cast<std::size_t>(static_cast<double>(n) * val_fraction);
  std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  return {train, val};
}

namespace {

struct Vec2 {
  float x, y;
};

void stamp_disc(Mask& mask, const Mask& fov, float cx, float cy, float radius) {
  const int x0 = std::max(0, static_cast<int>(cx - radius - 1));
  const int x1 = std::min(mask.w - 1, static_cast<int>(cx + radius + 1));
  const int y0 = std::max(0, static_cast<int>(cy - radius - 1));
  const int y1 = std::min(mask.h - 1, static_cast<int>(cy + radius + 1));
  const float r2 = radius * radius;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const float dx = static_cast<float>(x) - cx, dy = static_cast<float>(y) - cy;
      if (dx * dx + dy * dy <= r2 && fov.at(y, x, 0) > 0.0f) mask.at(y, x, 0) = 1.0f;
    }
}

}  // namespace

Sample synth_sample(const SynthConfig& cfg, std::uint64_t seed, std::uint64_t index) {
  RngStream rng = RngStream::keyed(seed, {0x5e9, index});
  const int s = cfg.size;
  const float cx = static_cast<float>(s) / 2.0f, cy = static_cast<float>(s) / 2.0f;
  const float fov_r = 0.48f * static_cast<float>(s);

  Sample out;
  out.id = "synth" + std::to_string(index);
  out.image = Image(s, s, 3);
  out.fov = Mask(s, s, 1);
  Mask vessels(s, s, 1), lesions(s, s, 1);

  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const float dx = static_cast<float>(x) - cx, dy = static_cast<float>(y) - cy;
      if (dx * dx + dy * dy <= fov_r * fov_r) out.fov.at(y, x, 0) = 1.0f;
    }

  // background with radial illumination falloff and per-image tint
  const float base_r = rng.uniform(0.45f, 0.70f);
  const float base_g = rng.uniform(0.15f, 0.35f);
  const float base_b = rng.uniform(0.05f, 0.15f);
  const float grad_x = rng.uniform(-0.1f, 0.1f), grad_y = rng.uniform(-0.1f, 0.1f);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      if (out.fov.at(y, x, 0) == 0.0f) continue;
      const float dx = (static_cast<float>(x) - cx) / fov_r;
      const float dy = (static_cast<float>(y) - cy) / fov_r;
      const float illum = 1.0f - 0.45f * (dx * dx + dy * dy) + grad_x * dx + grad_y * dy;
      out.image.at(y, x, 0) = std::clamp(base_r * illum, 0.0f, 1.0f);
      out.image.at(y, x, 1) = std::clamp(base_g * illum, 0.0f, 1.0f);
      out.image.at(y, x, 2) = std::clamp(base_b * illum, 0.0f, 1.0f);
    }

  // vessels: quadratic Bezier curves with tapering width, darker than background
  const int n_vessels = cfg.min_vessels + rng.uniform_int(cfg.max_vessels - cfg.min_vessels + 1);
  for (int v = 0; v < n_vessels; ++v) {
    Vec2 p[3];
    for (auto& pt : p) {
      const float ang = rng.uniform(0.0f, 6.2831853f);
      const float rad = fov_r * std::sqrt(rng.uniform()) * 0.92f;
      pt = {cx + rad * std::cos(ang), cy + rad * std::sin(ang)};
    }
    const float w0 = rng.uniform(cfg.min_width, cfg.max_width);
    const int steps = 4 * s;
    for (int k = 0; k <= steps; ++k) {
      const float t = static_cast<float>(k) / static_cast<float>(steps);
      const float u = 1.0f - t;
      const float px = u * u * p[0].x + 2.0f * u * t * p[1].x + t * t * p[2].x;
      const float py = u * u * p[0].y + 2.0f * u * t * p[1].y + t * t * p[2].y;
      const float width = w0 * (0.4f + 0.6f * (1.0f - std::abs(2.0f * t - 1.0f)));
      stamp_disc(vessels, out.fov, px, py, width / 2.0f);
    }
  }
  const float vessel_darken = rng.uniform(0.35f, 0.55f);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      if (vessels.at(y, x, 0) > 0.0f)
        for (int ch = 0; ch < 3; ++ch) out.image.at(y, x, ch) *= vessel_darken;

  // lesions: bright ellipse blobs
  const int n_lesions = cfg.min_lesions + rng.uniform_int(cfg.max_lesions - cfg.min_lesions + 1);
  for (int l = 0; l < n_lesions; ++l) {
    const float ang = rng.uniform(0.0f, 6.2831853f);
    const float rad = fov_r * std::sqrt(rng.uniform()) * 0.8f;
    const float lx = cx + rad * std::cos(ang), ly = cy + rad * std::sin(ang);
    const float a = rng.uniform(3.0f, 14.0f), b = rng.uniform(3.0f, 14.0f);
    const float rot = rng.uniform(0.0f, 3.1415927f);
    const float cr = std::cos(rot), sr = std::sin(rot);
    const int span = static_cast<int>(std::max(a, b)) + 2;
    for (int y = std::max(0, static_cast<int>(ly) - span);
         y <= std::min(s - 1, static_cast<int>(ly) + span); ++y)
      for (int x = std::max(0, static_cast<int>(lx) - span);
           x <= std::min(s - 1, static_cast<int>(lx) + span); ++x) {
        const float dx = static_cast<float>(x) - lx, dy = static_cast<float>(y) - ly;
        const float ex = (dx * cr + dy * sr) / a, ey = (-dx * sr + dy * cr) / b;
        if (ex * ex + ey * ey <= 1.0f && out.fov.at(y, x, 0) > 0.0f) {
          lesions.at(y, x, 0) = 1.0f;
          out.image.at(y, x, 0) = std::clamp(0.85f + 0.1f * rng.uniform(), 0.0f, 1.0f);
          out.image.at(y, x, 1) = std::clamp(0.80f + 0.1f * rng.uniform(), 0.0f, 1.0f);
          out.image.at(y, x, 2) = std::clamp(0.25f + 0.1f * rng.uniform(), 0.0f, 1.0f);
        }
      }
  }

  out.targets["vessels"] = std::move(vessels);
  out.targets["lesions"] = std::move(lesions);
  return out;
}

std::vector<Sample> synth_generate(int n, const SynthConfig& cfg, std::uint64_t seed) {
  if (n < 1) throw ValueError("synth_generate: n must be >= 1");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(synth_sample(cfg, seed, static_cast<std::uint64_t>(i)));
  return out;
}

std::string save_dataset(const std::string& dir, const std::vector<Sample>& samples) {
  fs::create_directories(dir);
  DatasetManifest m;
  m.root = dir;
  for (const auto& s : samples) {
    ManifestEntry e;
    e.id = s.id;
    e.image_path = s.id + ".ppm";
    write_image((fs::path(dir) / e.image_path).string(), s.image);
    if (!s.fov.empty()) {
      e.fov_path = s.id + "_fov.pgm";
      write_image((fs::path(dir) / e.fov_path).string(), s.fov);
    }
    for (const auto& [name, mask] : s.targets) {
      const std::string p = s.id + "_" + name + ".pgm";
      write_image((fs::path(dir) / p).string(), mask);
      e.target_paths[name] = p;
    }
    m.entries.push_back(std::move(e));
  }
  const std::string path = (fs::path(dir) / "manifest.txt").string();
  save_manifest(path, m);
  return path;
}

Tensor image_to_tensor(const Image& img) { return images_to_batch({img}); }

Tensor images_to_batch(const std::vector<Image>& imgs) {
  if (imgs.empty()) throw ValueError("images_to_batch: empty batch");
  const int h = imgs[0].h, w = imgs[0].w, c = imgs[0].c;
  Tensor t = Tensor::zeros({static_cast<int>(imgs.size()), c, h, w});
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    const Image& im = imgs[i];
    if (im.h != h || im.w != w || im.c != c)
      throw ShapeError("images_to_batch: inconsistent image dims in batch");
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          t.ptr()[((i * static_cast<std::size_t>(c) + ch) * h + y) * w + x] = im.at(y, x, ch);
  }
  return t;
}

Image tensor_to_image(const Tensor& t, int batch_index) {
  if (t.rank() != 4) throw ShapeError("tensor_to_image: expected NCHW tensor");
  const int c = t.dim(1), h = t.dim(2), w = t.dim(3);
  Image img(h, w, c);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        img.at(y, x, ch) =
            t.ptr()[((static_cast<std::size_t>(batch_index) * c + ch) * h + y) * w + x];
  return img;
}

}  // namespace retseg
