#pragma once

// Versioned checkpoint container: named tensors (parameters, buffers, optimizer
// moments) plus epoch, config hash and config snapshot. The encoding is fully
// determined by the contents, so save -> load -> save is byte-identical.
//
// Layout (little-endian):
//   "SSNGCKPT" u32 version i64 epoch str config_hash str config_json
//   u64 count { str name u8 dtype u32 ndim i64 dims[ndim] bytes[numel * itemsize] }*
// where str = u64 length + bytes.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace ssng::io {

class Checkpoint {
 public:
  static constexpr uint32_t kVersion = 1;

  int64_t epoch = 0;
  std::string config_hash;
  std::string config_json;

  void put(const std::string& name, const torch::Tensor& t);
  bool has(const std::string& name) const;
  const torch::Tensor& get(const std::string& name) const;
  const std::vector<std::pair<std::string, torch::Tensor>>& tensors() const { return tensors_; }

  std::vector<uint8_t> serialize() const;
  static Checkpoint deserialize(const std::vector<uint8_t>& bytes);

  // Writes to a temporary sibling and renames, so readers never see a partial file.
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, torch::Tensor>> tensors_;
};

// Parameters and buffers under "<prefix>/<qualified name>".
void put_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& module);
void load_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& module);

// Adam moments and step counts, keyed by parameter position in the optimizer.
void put_adam(Checkpoint& ckpt, const std::string& prefix, torch::optim::Adam& opt);
void load_adam(const Checkpoint& ckpt, const std::string& prefix, torch::optim::Adam& opt);

// Short hex fingerprint of module parameters and buffers (order-sensitive).
std::string module_hash(const torch::nn::Module& module);

}  // namespace ssng::io
