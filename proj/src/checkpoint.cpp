#include "ssng/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "ssng/data.hpp"
#include "ssng/errors.hpp"

namespace ssng::io {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'S', 'S', 'N', 'G', 'C', 'K', 'P', 'T'};

uint8_t dtype_code(torch::Dtype d) {
  switch (d) {
    case torch::kFloat32: return 1;
    case torch::kFloat64: return 2;
    case torch::kInt64: return 3;
    case torch::kUInt8: return 4;
    case torch::kInt32: return 5;
    default: throw IoError("checkpoint: unsupported tensor dtype");
  }
}

torch::Dtype dtype_of(uint8_t code) {
  switch (code) {
    case 1: return torch::kFloat32;
    case 2: return torch::kFloat64;
    case 3: return torch::kInt64;
    case 4: return torch::kUInt8;
    case 5: return torch::kInt32;
    default: throw IoError("checkpoint: unknown dtype code " + std::to_string(code));
  }
}

class Writer {
 public:
  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <typename T>
  void pod(T v) {
    raw(&v, sizeof v);
  }
  void str(const std::string& s) {
    pod<uint64_t>(s.size());
    raw(s.data(), s.size());
  }
  std::vector<uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(const std::vector<uint8_t>& b) : buf_(b) {}
  void raw(void* p, size_t n) {
    if (pos_ + n > buf_.size()) throw IoError("checkpoint: truncated file");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T pod() {
    T v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = pod<uint64_t>();
    if (n > buf_.size() - pos_) throw IoError("checkpoint: truncated string");
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  const std::vector<uint8_t>& buf_;
  size_t pos_ = 0;
};

}  // namespace

void Checkpoint::put(const std::string& name, const torch::Tensor& t) {
  auto copy = t.detach().to(torch::kCPU).contiguous().clone();
  for (auto& [n, v] : tensors_) {
    if (n == name) {
      v = copy;
      return;
    }
  }
  tensors_.emplace_back(name, copy);
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, v] : tensors_) {
    if (n == name) return true;
  }
  return false;
}

const torch::Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, v] : tensors_) {
    if (n == name) return v;
  }
  throw IoError("checkpoint: missing tensor '" + name + "'");
}

std::vector<uint8_t> Checkpoint::serialize() const {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.pod<uint32_t>(kVersion);
  w.pod<int64_t>(epoch);
  w.str(config_hash);
  w.str(config_json);
  w.pod<uint64_t>(tensors_.size());
  for (const auto& [name, t] : tensors_) {
    w.str(name);
    w.pod<uint8_t>(dtype_code(t.scalar_type()));
    w.pod<uint32_t>(static_cast<uint32_t>(t.dim()));
    for (auto d : t.sizes()) w.pod<int64_t>(d);
    w.raw(t.data_ptr(), static_cast<size_t>(t.numel()) * t.element_size());
  }
  return w.take();
}

Checkpoint Checkpoint::deserialize(const std::vector<uint8_t>& bytes) {
  Reader r(bytes);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw IoError("not a checkpoint file");
  const auto version = r.pod<uint32_t>();
  if (version != kVersion) {
    throw IoError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                  std::to_string(kVersion) + ")");
  }
  Checkpoint ckpt;
  ckpt.epoch = r.pod<int64_t>();
  ckpt.config_hash = r.str();
  ckpt.config_json = r.str();
  const auto count = r.pod<uint64_t>();
  for (uint64_t i = 0; i < count; ++i) {
    auto name = r.str();
    const auto dtype = dtype_of(r.pod<uint8_t>());
    const auto ndim = r.pod<uint32_t>();
    std::vector<int64_t> dims(ndim);
    for (auto& d : dims) d = r.pod<int64_t>();
    auto t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
    r.raw(t.data_ptr(), static_cast<size_t>(t.numel()) * t.element_size());
    ckpt.tensors_.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw IoError("checkpoint: trailing bytes");
  return ckpt;
}

void Checkpoint::save(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto bytes = serialize();
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint Checkpoint::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

void put_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& module) {
  for (const auto& p : module.named_parameters(/*recurse=*/true)) {
    ckpt.put(prefix + "/param/" + p.key(), p.value());
  }
  for (const auto& b : module.named_buffers(/*recurse=*/true)) {
    ckpt.put(prefix + "/buffer/" + b.key(), b.value());
  }
}

void load_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  for (auto& p : module.named_parameters(/*recurse=*/true)) {
    const auto& src = ckpt.get(prefix + "/param/" + p.key());
    if (src.sizes() != p.value().sizes()) {
      throw IoError("checkpoint: shape mismatch for parameter " + p.key());
    }
    p.value().copy_(src);
  }
  for (auto& b : module.named_buffers(/*recurse=*/true)) {
    const auto& src = ckpt.get(prefix + "/buffer/" + b.key());
    if (src.sizes() != b.value().sizes()) throw IoError("checkpoint: shape mismatch for buffer " + b.key());
    b.value().copy_(src);
  }
}

void put_adam(Checkpoint& ckpt, const std::string& prefix, torch::optim::Adam& opt) {
  int64_t idx = 0;
  for (size_t g = 0; g < opt.param_groups().size(); ++g) {
    auto& group = opt.param_groups()[g];
    const auto& o = static_cast<const torch::optim::AdamOptions&>(group.options());
    ckpt.put(prefix + "/group" + std::to_string(g) + "/lr", torch::tensor(o.lr(), torch::kFloat64));
    for (const auto& p : group.params()) {
      const auto key = prefix + "/state" + std::to_string(idx++);
      auto it = opt.state().find(p.unsafeGetTensorImpl());
      if (it == opt.state().end()) continue;
      const auto& st = static_cast<const torch::optim::AdamParamState&>(*it->second);
      ckpt.put(key + "/step", torch::tensor(st.step(), torch::kInt64));
      ckpt.put(key + "/exp_avg", st.exp_avg());
      ckpt.put(key + "/exp_avg_sq", st.exp_avg_sq());
      if (st.max_exp_avg_sq().defined()) ckpt.put(key + "/max_exp_avg_sq", st.max_exp_avg_sq());
    }
  }
}

void load_adam(const Checkpoint& ckpt, const std::string& prefix, torch::optim::Adam& opt) {
  int64_t idx = 0;
  for (size_t g = 0; g < opt.param_groups().size(); ++g) {
    auto& group = opt.param_groups()[g];
    auto& o = static_cast<torch::optim::AdamOptions&>(group.options());
    o.lr(ckpt.get(prefix + "/group" + std::to_string(g) + "/lr").item<double>());
    for (const auto& p : group.params()) {
      const auto key = prefix + "/state" + std::to_string(idx++);
      if (!ckpt.has(key + "/step")) continue;
      auto st = std::make_unique<torch::optim::AdamParamState>();
      st->step(ckpt.get(key + "/step").item<int64_t>());
      st->exp_avg(ckpt.get(key + "/exp_avg").clone());
      st->exp_avg_sq(ckpt.get(key + "/exp_avg_sq").clone());
      if (ckpt.has(key + "/max_exp_avg_sq")) st->max_exp_avg_sq(ckpt.get(key + "/max_exp_avg_sq").clone());
      opt.state()[p.unsafeGetTensorImpl()] = std::move(st);
    }
  }
}

std::string module_hash(const torch::nn::Module& module) {
  Checkpoint c;
  put_module(c, "m", module);
  auto bytes = c.serialize();
  return data::sha256_bytes(bytes.data(), bytes.size()).substr(0, 16);
}

}  // namespace ssng::io
