#include "retseg/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "retseg/errors.hpp"

namespace retseg {

namespace {

void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
  buf.push_back(static_cast<unsigned char>(v & 0xff));
  buf.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
  buf.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
  buf.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_f32(std::vector<unsigned char>& buf, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(buf, bits);
}

float get_f32(const unsigned char* p) {
  const std::uint32_t bits = get_u32(p);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace

bool CheckpointData::contains(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

const Tensor& CheckpointData::at(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw ValueError("checkpoint has no tensor named " + name);
}

void save_checkpoint_raw(const std::string& path,
                         const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::vector<unsigned char> buf;
  buf.insert(buf.end(), kCheckpointMagic, kCheckpointMagic + 4);
  put_u32(buf, kCheckpointVersion);
  put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    put_u32(buf, static_cast<std::uint32_t>(t.shape().size()));
    for (int d : t.shape()) put_u32(buf, static_cast<std::uint32_t>(d));
    for (float v : t.data()) put_f32(buf, v);
  }
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0L, buf.data(), static_cast<uInt>(buf.size())));
  put_u32(buf, crc);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write on checkpoint " + path);
}

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const std::map<std::string, float>& metadata) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  tensors.reserve(params.size() + metadata.size());
  for (const auto& e : params.entries()) tensors.emplace_back(e.name, e.tensor);
  for (const auto& [k, v] : metadata) tensors.emplace_back("meta." + k, Tensor::scalar(v));
  save_checkpoint_raw(path, tensors);
}

CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < 16) throw IoError(path + ": checkpoint too small");
  const std::uint32_t stored_crc = get_u32(buf.data() + buf.size() - 4);
  const std::uint32_t actual_crc = static_cast<std::uint32_t>(
      crc32(0L, buf.data(), static_cast<uInt>(buf.size() - 4)));
  if (stored_crc != actual_crc) throw IoError(path + ": checkpoint CRC mismatch");
  if (std::memcmp(buf.data(), kCheckpointMagic, 4) != 0)
    throw IoError(path + ": bad checkpoint magic");
  const std::uint32_t version = get_u32(buf.data() + 4);
  if (version != kCheckpointVersion)
    throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = get_u32(buf.data() + 8);
  std::size_t pos = 12;
  const std::size_t end = buf.size() - 4;
  auto need = [&](std::size_t n) {
    if (pos + n > end) throw IoError(path + ": truncated checkpoint record");
  };
  CheckpointData out;
  out.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    need(4);
    const std::uint32_t name_len = get_u32(buf.data() + pos);
    pos += 4;
    need(name_len);
    std::string name(reinterpret_cast<const char*>(buf.data() + pos), name_len);
    pos += name_len;
    need(4);
    const std::uint32_t rank = get_u32(buf.data() + pos);
    pos += 4;
    std::vector<int> shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      need(4);
      shape[r] = static_cast<int>(get_u32(buf.data() + pos));
      pos += 4;
      numel *= static_cast<std::size_t>(shape[r]);
    }
    need(numel * 4);
    std::vector<float> data(numel);
    for (std::size_t k = 0; k < numel; ++k) data[k] = get_f32(buf.data() + pos + k * 4);
    pos += numel * 4;
    if (out.contains(name)) throw IoError(path + ": duplicate tensor name " + name);
    out.tensors.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
  }
  return out;
}

std::size_t load_into_params(const CheckpointData& ckpt, ModelParams& params,
                             const std::string& prefix) {
  std::size_t loaded = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind(prefix, 0) != 0) continue;
    if (!params.contains(name)) continue;
    Tensor& dst = params.at(name);
    if (dst.shape() != t.shape())
      throw ShapeError("checkpoint tensor " + name + " has shape " + shape_str(t.shape()) +
                       ", model expects " + shape_str(dst.shape()));
    dst.data() = t.data();
    ++loaded;
  }
  if (loaded == 0)
    throw ValueError("checkpoint contains no tensors matching prefix '" + prefix + "'");
  return loaded;
}

std::size_t load_checkpoint(const std::string& path, ModelParams& params,
                            const std::string& prefix) {
  return load_into_params(read_checkpoint(path), params, prefix);
}

}  // namespace retseg
