#pragma once

#include <map>
#include <string>
#include <vector>

#include "core/optim.hpp"
#include "core/tensor.hpp"

namespace fmpl {

// Container layout: magic "FMPL", u32 version (little-endian), u64 metadata
// byte length, UTF-8 JSON metadata mapping tensor names to shape/dtype/offset
// (bytes into the payload), then the raw little-endian f32 payload.
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors);
void save_checkpoint(const std::string& path, NamedTensors tensors);

// name -> tensor (f32 payload widened to f64)
std::map<std::string, Tensor> load_checkpoint(const std::string& path);

// Load into existing tensors by name; shapes must match exactly.
void load_checkpoint_into(const std::string& path, NamedTensors tensors);

}  // namespace fmpl
