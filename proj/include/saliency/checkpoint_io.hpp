#pragma once

#include <map>
#include <optional>
#include <string>

#include "saliency/network.hpp"
#include "saliency/tensor.hpp"

namespace saliency {

inline constexpr int kCheckpointFormatVersion = 1;

// On-disk layout:
//   u64 little-endian  header length in bytes
//   header             UTF-8 JSON: {"format", "version", "fingerprint", "spec",
//                      "tensors": {name: {"shape": [...], "offset": bytes}}}
//   payload            float64 little-endian values, tensors back to back
//
// Tensor dumps use the same layout without "spec"/"fingerprint".

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

void save_tensors(const std::map<std::string, Tensor>& tensors, const std::string& path);
std::map<std::string, Tensor> load_tensors(const std::string& path);

}  // namespace saliency
