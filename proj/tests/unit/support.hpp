#pragma once

#include <torch/torch.h>
#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ssng/data.hpp"

namespace testing {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("ssng_" + tag + "_" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

// Central finite-difference gradient of a scalar function at `x` (double).
inline torch::Tensor numeric_grad(const std::function<double(const torch::Tensor&)>& f,
                                  const torch::Tensor& x, double h = 1e-6) {
  auto base = x.detach().clone().to(torch::kFloat64).contiguous();
  auto g = torch::zeros_like(base);
  auto* p = base.data_ptr<double>();
  auto* gp = g.data_ptr<double>();
  for (int64_t i = 0; i < base.numel(); ++i) {
    const double orig = p[i];
    p[i] = orig + h;
    const double up = f(base);
    p[i] = orig - h;
    const double down = f(base);
    p[i] = orig;
    gp[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double rel_err(const torch::Tensor& a, const torch::Tensor& b) {
  const double num = (a - b).norm().item<double>();
  const double den = std::max(a.norm().item<double>(), b.norm().item<double>());
  return den == 0 ? num : num / den;
}

inline void put_be32(std::string& s, uint32_t v) {
  s.push_back(static_cast<char>(v >> 24));
  s.push_back(static_cast<char>(v >> 16));
  s.push_back(static_cast<char>(v >> 8));
  s.push_back(static_cast<char>(v));
}

inline void write_gz(const fs::path& path, const std::string& bytes) {
  gzFile f = gzopen(path.string().c_str(), "wb");
  gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
  gzclose(f);
}

// FashionMNIST-format IDX files: class c images are filled with value 20*c + noise.
inline void write_fashion_fixture(const fs::path& dir, int64_t n_train, int64_t n_test, uint64_t seed = 1) {
  fs::create_directories(dir);
  std::mt19937_64 rng(seed);
  auto write_split = [&](const std::string& prefix, int64_t n) {
    std::string imgs, labels;
    put_be32(imgs, 0x803);
    put_be32(imgs, static_cast<uint32_t>(n));
    put_be32(imgs, 28);
    put_be32(imgs, 28);
    put_be32(labels, 0x801);
    put_be32(labels, static_cast<uint32_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      const int c = static_cast<int>(rng() % 10);
      labels.push_back(static_cast<char>(c));
      for (int p = 0; p < 28 * 28; ++p) imgs.push_back(static_cast<char>(20 * c + static_cast<int>(rng() % 16)));
    }
    write_gz(dir / (prefix + "-images-idx3-ubyte.gz"), imgs);
    write_gz(dir / (prefix + "-labels-idx1-ubyte.gz"), labels);
  };
  write_split("train", n_train);
  write_split("t10k", n_test);
}

inline ssng::data::ImageDataset random_images(int64_t n, int64_t c, int64_t side, int64_t classes, uint64_t seed) {
  torch::manual_seed(seed);
  ssng::data::ImageDataset ds;
  ds.name = "synthetic";
  ds.images = torch::randint(0, 256, {n, c, side, side}, torch::kUInt8);
  ds.labels = torch::randint(0, classes, {n}, torch::kInt64);
  ds.object_ids = torch::arange(n, torch::kInt64);
  return ds;
}

}  // namespace testing
