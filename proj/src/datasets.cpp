#include <openssl/evp.h>
#include <zlib.h>

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ssng/data.hpp"
#include "ssng/errors.hpp"

namespace ssng::data {

namespace fs = std::filesystem;

DatasetKind parse_dataset_kind(const std::string& name) {
  if (name == "fashionmnist") return DatasetKind::FashionMnist;
  if (name == "cifar10") return DatasetKind::Cifar10;
  if (name == "dsprites") return DatasetKind::DSprites;
  if (name == "dsprites_procedural") return DatasetKind::DSpritesProcedural;
  throw ConfigError("unknown dataset '" + name +
                        "' (expected fashionmnist, cifar10, dsprites, dsprites_procedural)",
                    {"dataset"});
}

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::FashionMnist: return "fashionmnist";
    case DatasetKind::Cifar10: return "cifar10";
    case DatasetKind::DSprites: return "dsprites";
    case DatasetKind::DSpritesProcedural: return "dsprites_procedural";
  }
  return "?";
}

namespace {

std::string hex(const unsigned char* d, unsigned n) {
  std::ostringstream os;
  for (unsigned i = 0; i < n; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(d[i]);
  return os.str();
}

struct Sha256 {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  Sha256() { EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr); }
  ~Sha256() { EVP_MD_CTX_free(ctx); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;
  void update(const void* d, size_t n) { EVP_DigestUpdate(ctx, d, n); }
  std::string finish() {
    unsigned char out[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    EVP_DigestFinal_ex(ctx, out, &len);
    return hex(out, len);
  }
};

uint32_t be32(const unsigned char* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

// Reads a whole (optionally gzip-compressed) file; gzread passes plain files through.
std::vector<unsigned char> read_gz(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw DataError("cannot open " + path.string());
  std::vector<unsigned char> out;
  std::array<unsigned char, 1 << 16> buf{};
  int n;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) {
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  const bool err = n < 0;
  gzclose(f);
  if (err) throw DataError("corrupt gzip stream in " + path.string(), "re-download the file");
  return out;
}

torch::Tensor read_idx_images(const fs::path& path) {
  auto bytes = read_gz(path);
  if (bytes.size() < 16 || be32(bytes.data()) != 0x00000803) {
    throw DataError("not an IDX image file: " + path.string(), "re-download the file");
  }
  const int64_t n = be32(&bytes[4]);
  const int64_t rows = be32(&bytes[8]);
  const int64_t cols = be32(&bytes[12]);
  if (static_cast<int64_t>(bytes.size()) != 16 + n * rows * cols) {
    throw DataError("truncated IDX image file: " + path.string(), "re-download the file");
  }
  auto t = torch::empty({n, 1, rows, cols}, torch::kUInt8);
  std::memcpy(t.data_ptr<uint8_t>(), &bytes[16], static_cast<size_t>(n * rows * cols));
  return t;
}

torch::Tensor read_idx_labels(const fs::path& path) {
  auto bytes = read_gz(path);
  if (bytes.size() < 8 || be32(bytes.data()) != 0x00000801) {
    throw DataError("not an IDX label file: " + path.string(), "re-download the file");
  }
  const int64_t n = be32(&bytes[4]);
  if (static_cast<int64_t>(bytes.size()) != 8 + n) {
    throw DataError("truncated IDX label file: " + path.string(), "re-download the file");
  }
  auto t = torch::empty({n}, torch::kInt64);
  auto* p = t.data_ptr<int64_t>();
  for (int64_t i = 0; i < n; ++i) p[i] = bytes[8 + i];
  return t;
}

fs::path find_one(const std::vector<fs::path>& dirs, const std::string& stem) {
  for (const auto& d : dirs) {
    for (const auto& cand : {d / stem, d / (stem + ".gz")}) {
      if (fs::exists(cand)) return cand;
    }
  }
  return {};
}

std::vector<int64_t> seeded_subset(int64_t n, int64_t k, uint64_t seed) {
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[i] = i;
  if (k <= 0 || k >= n) return idx;
  auto rng = make_rng(seed, {0x5ab5e7});
  shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

LoadedDataset load_fashionmnist(const fs::path& root, const LoadOptions& opts) {
  const std::vector<fs::path> dirs{root, root / "fashionmnist", root / "FashionMNIST" / "raw",
                                   root / "fashion-mnist"};
  const std::array<std::string, 4> stems{"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                                         "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"};
  std::array<fs::path, 4> paths;
  for (size_t i = 0; i < stems.size(); ++i) {
    paths[i] = find_one(dirs, stems[i]);
    if (paths[i].empty()) {
      throw DataError("FashionMNIST file " + stems[i] + "[.gz] not found under " + root.string(),
                      "download the four *-ubyte.gz files from "
                      "github.com/zalandoresearch/fashion-mnist into <data_root>/fashionmnist/");
    }
  }
  LoadedDataset out{DatasetKind::FashionMnist, {}, ImageDataset{}, {}, "fashionmnist idx files"};
  auto make = [](torch::Tensor imgs, torch::Tensor labels, const std::string& name) {
    if (imgs.size(0) != labels.size(0)) throw DataError("FashionMNIST image/label count mismatch");
    ImageDataset ds;
    ds.name = name;
    ds.images = std::move(imgs);
    ds.labels = std::move(labels);
    ds.object_ids = torch::arange(ds.images.size(0), torch::kInt64);
    ds.pixel_scale = 1.0 / 255.0;
    return ds;
  };
  out.train = make(read_idx_images(paths[0]), read_idx_labels(paths[1]), "fashionmnist-train");
  out.test = make(read_idx_images(paths[2]), read_idx_labels(paths[3]), "fashionmnist-test");
  if (opts.subset_size > 0) {
    out.train = out.train.subset(seeded_subset(out.train.size(), opts.subset_size, opts.seed));
  }
  for (const auto& p : paths) out.checksums.push_back({p.string(), sha256_file(p)});
  return out;
}

ImageDataset read_cifar_batches(const std::vector<fs::path>& files, const std::string& name) {
  constexpr int64_t kRecord = 1 + 3 * 32 * 32;
  std::vector<unsigned char> all;
  for (const auto& f : files) {
    auto bytes = read_gz(f);
    if (bytes.size() % kRecord != 0) {
      throw DataError("truncated CIFAR-10 batch " + f.string(), "re-download cifar-10-binary.tar.gz");
    }
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  const int64_t n = static_cast<int64_t>(all.size()) / kRecord;
  ImageDataset ds;
  ds.name = name;
  ds.images = torch::empty({n, 3, 32, 32}, torch::kUInt8);
  ds.labels = torch::empty({n}, torch::kInt64);
  auto* img = ds.images.data_ptr<uint8_t>();
  auto* lab = ds.labels.data_ptr<int64_t>();
  for (int64_t i = 0; i < n; ++i) {
    const unsigned char* rec = &all[static_cast<size_t>(i * kRecord)];
    if (rec[0] > 9) throw DataError("CIFAR-10 label out of range in " + name);
    lab[i] = rec[0];
    std::memcpy(img + i * (kRecord - 1), rec + 1, kRecord - 1);
  }
  ds.object_ids = torch::arange(n, torch::kInt64);
  ds.pixel_scale = 1.0 / 255.0;
  return ds;
}

LoadedDataset load_cifar10(const fs::path& root, const LoadOptions& opts) {
  fs::path dir;
  for (const auto& cand : {root / "cifar-10-batches-bin", root / "cifar10" / "cifar-10-batches-bin",
                           root / "cifar10"}) {
    if (fs::exists(cand / "test_batch.bin")) {
      dir = cand;
      break;
    }
  }
  const std::string hint =
      "download cifar-10-binary.tar.gz from www.cs.toronto.edu/~kriz/cifar.html and extract "
      "it into <data_root>/";
  if (dir.empty()) throw DataError("CIFAR-10 binary batches not found under " + root.string(), hint);
  std::vector<fs::path> train_files;
  for (int i = 1; i <= 5; ++i) {
    auto p = dir / ("data_batch_" + std::to_string(i) + ".bin");
    if (!fs::exists(p)) throw DataError("missing " + p.string(), hint);
    train_files.push_back(p);
  }
  LoadedDataset out{DatasetKind::Cifar10, {}, ImageDataset{}, {}, "cifar-10 binary batches"};
  out.train = read_cifar_batches(train_files, "cifar10-train");
  out.test = read_cifar_batches({dir / "test_batch.bin"}, "cifar10-test");
  if (opts.subset_size > 0) {
    out.train = out.train.subset(seeded_subset(out.train.size(), opts.subset_size, opts.seed));
  }
  train_files.push_back(dir / "test_batch.bin");
  for (const auto& p : train_files) out.checksums.push_back({p.string(), sha256_file(p)});
  return out;
}

LoadedDataset load_dsprites(std::shared_ptr<const DSpritesSource> source, DatasetKind kind,
                            const LoadOptions& opts, std::vector<FileChecksum> checksums) {
  const auto flat = seeded_subset(source->grid().size(), opts.subset_size, opts.seed);
  LoadedDataset out{kind, make_dsprites_dataset(source, flat, to_string(kind)), std::nullopt,
                    std::move(checksums), source->provenance()};
  if (kind == DatasetKind::DSpritesProcedural) {
    // No files: fingerprint the rendered subset instead.
    const auto& imgs = out.train.images;
    out.checksums.push_back(
        {"rendered:" + source->provenance(),
         sha256_bytes(imgs.data_ptr<uint8_t>(), static_cast<size_t>(imgs.numel()))});
  }
  return out;
}

}  // namespace

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  Sha256 h;
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(buf.data(), static_cast<size_t>(in.gcount()));
  }
  return h.finish();
}

std::string sha256_bytes(const void* data, size_t n) {
  Sha256 h;
  h.update(data, n);
  return h.finish();
}

torch::Tensor ImageDataset::image(int64_t i) const {
  return images[i].to(torch::kFloat32).mul_(pixel_scale);
}

torch::Tensor ImageDataset::batch(const std::vector<int64_t>& indices) const {
  auto idx = torch::tensor(indices, torch::kInt64);
  return images.index_select(0, idx).to(torch::kFloat32).mul_(pixel_scale);
}

FactorVector ImageDataset::factor_vector(int64_t i) const {
  FactorVector f{};
  auto row = factors[i];
  for (int k = 0; k < kNumFactors; ++k) f[k] = row[k].item<int64_t>();
  return f;
}

ImageDataset ImageDataset::subset(const std::vector<int64_t>& indices) const {
  auto idx = torch::tensor(indices, torch::kInt64);
  ImageDataset out = *this;
  out.images = images.index_select(0, idx).contiguous();
  if (labels.defined()) out.labels = labels.index_select(0, idx).contiguous();
  if (factors.defined()) out.factors = factors.index_select(0, idx).contiguous();
  out.object_ids = object_ids.index_select(0, idx).contiguous();
  return out;
}

ImageDataset make_dsprites_dataset(std::shared_ptr<const DSpritesSource> source,
                                   const std::vector<int64_t>& flat_indices, std::string name) {
  const auto n = static_cast<int64_t>(flat_indices.size());
  ImageDataset ds;
  ds.name = std::move(name);
  ds.images = torch::empty({n, 1, kSpriteSide, kSpriteSide}, torch::kUInt8);
  ds.factors = torch::empty({n, kNumFactors}, torch::kInt64);
  ds.object_ids = torch::tensor(flat_indices, torch::kInt64);
  ds.pixel_scale = 1.0;
  auto* img = ds.images.data_ptr<uint8_t>();
  auto* fac = ds.factors.data_ptr<int64_t>();
  for (int64_t i = 0; i < n; ++i) {
    const auto sprite = source->render(flat_indices[i]);
    std::memcpy(img + i * kSpritePixels, sprite.data(), kSpritePixels);
    const auto f = source->grid().factors(flat_indices[i]);
    std::copy(f.begin(), f.end(), fac + i * kNumFactors);
  }
  ds.sprites = std::move(source);
  return ds;
}

LoadedDataset load_dataset(const std::string& name, const fs::path& root, const LoadOptions& opts) {
  const auto kind = parse_dataset_kind(name);
  switch (kind) {
    case DatasetKind::FashionMnist: return load_fashionmnist(root, opts);
    case DatasetKind::Cifar10: return load_cifar10(root, opts);
    case DatasetKind::DSprites: {
      auto path = find_dsprites_archive(root);
      auto source = std::make_shared<ArchiveDSprites>(path);
      return load_dsprites(source, kind, opts, {{path.string(), sha256_file(path)}});
    }
    case DatasetKind::DSpritesProcedural:
      return load_dsprites(std::make_shared<ProceduralDSprites>(), kind, opts, {});
  }
  throw ConfigError("unreachable dataset kind");
}

}  // namespace ssng::data
