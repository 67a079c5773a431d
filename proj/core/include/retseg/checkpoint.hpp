#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "retseg/params.hpp"
#include "retseg/tensor.hpp"

namespace retseg {

// Binary tensor container: magic "NTC1", format version, tensor count, then
// per tensor name / rank / dims / little-endian f32 payload, and a trailing
// CRC32 over everything before it.
inline constexpr char kCheckpointMagic[4] = {'N', 'T', 'C', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  std::vector<std::pair<std::string, Tensor>> tensors;

  bool contains(const std::string& name) const;
  const Tensor& at(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const std::map<std::string, float>& metadata = {});

void save_checkpoint_raw(const std::string& path,
                         const std::vector<std::pair<std::string, Tensor>>& tensors);

// Validates the CRC before returning; a truncated or corrupt file throws
// without producing partial state.
CheckpointData read_checkpoint(const std::string& path);

// Copies checkpoint tensors whose names start with `prefix` into matching
// entries of `params` (shapes must agree). Returns the number of tensors
// loaded; throws when the prefix matches nothing.
std::size_t load_checkpoint(const std::string& path, ModelParams& params,
                            const std::string& prefix = "");

std::size_t load_into_params(const CheckpointData& ckpt, ModelParams& params,
                             const std::string& prefix = "");

}  // namespace retseg
