#include "ssng/dsprites.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

#include "ssng/errors.hpp"
#include "ssng/npz.hpp"

namespace ssng::data {

int64_t FactorGrid::size() const {
  int64_t n = 1;
  for (auto c : cardinality) n *= c;
  return n;
}

bool FactorGrid::contains(const FactorVector& f) const {
  for (int i = 0; i < kNumFactors; ++i) {
    if (f[i] < 0 || f[i] >= cardinality[i]) return false;
  }
  return true;
}

int64_t FactorGrid::flat_index(const FactorVector& f) const {
  if (!contains(f)) throw DataError("factor vector outside the dSprites grid");
  int64_t idx = 0;
  for (int i = 0; i < kNumFactors; ++i) idx = idx * cardinality[i] + f[i];
  return idx;
}

FactorVector FactorGrid::factors(int64_t flat) const {
  if (flat < 0 || flat >= size()) throw DataError("dSprites flat index out of range");
  FactorVector f{};
  for (int i = kNumFactors - 1; i >= 0; --i) {
    f[i] = flat % cardinality[i];
    flat /= cardinality[i];
  }
  return f;
}

ProceduralDSprites::ProceduralDSprites(FactorGrid grid) : grid_(grid) {
  for (auto c : grid_.cardinality) {
    if (c < 1) throw ConfigError("procedural dSprites: factor cardinalities must be >= 1");
  }
  if (grid_.cardinality[kShape] > 3) throw ConfigError("procedural dSprites: at most 3 shapes");
}

std::string ProceduralDSprites::provenance() const {
  std::ostringstream os;
  os << "procedural-dsprites-v1 grid=";
  for (int i = 0; i < kNumFactors; ++i) os << (i ? "x" : "") << grid_.cardinality[i];
  return os.str();
}

namespace {

double linspace(int64_t i, int64_t n, double lo, double hi) {
  return n <= 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
}

// Membership test in the sprite's own frame, coordinates scaled so the shape
// spans roughly [-1, 1].
bool inside(int shape, double u, double v) {
  switch (shape) {
    case 0:
      return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 1:
      return u * u + (v * v) / 0.25 <= 1.0;
    default: {
      // Heart: (x^2 + y^2 - 1)^3 - x^2 y^3 <= 0, point up in image coordinates.
      const double x = u * 1.15;
      const double y = -v * 1.15 + 0.15;
      const double a = x * x + y * y - 1.0;
      return a * a * a - x * x * y * y * y <= 0.0;
    }
  }
}

}  // namespace

Sprite ProceduralDSprites::render(int64_t flat_index) const {
  const auto f = grid_.factors(flat_index);
  const double scale = linspace(f[kScale], grid_.cardinality[kScale], 0.5, 1.0);
  const double theta =
      linspace(f[kOrientation], grid_.cardinality[kOrientation], 0.0, 2.0 * std::numbers::pi);
  const double cx = 16.0 + 32.0 * linspace(f[kPosX], grid_.cardinality[kPosX], 0.0, 1.0);
  const double cy = 16.0 + 32.0 * linspace(f[kPosY], grid_.cardinality[kPosY], 0.0, 1.0);
  const double half = 10.0 * scale;
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  const int shape = static_cast<int>(f[kShape]);

  Sprite img{};
  for (int y = 0; y < kSpriteSide; ++y) {
    for (int x = 0; x < kSpriteSide; ++x) {
      const double dx = x + 0.5 - cx;
      const double dy = y + 0.5 - cy;
      // Rotate the sample point back into the sprite frame.
      const double u = (c * dx + s * dy) / half;
      const double v = (-s * dx + c * dy) / half;
      img[y * kSpriteSide + x] = inside(shape, u, v) ? 1 : 0;
    }
  }
  return img;
}

ArchiveDSprites::ArchiveDSprites(const std::filesystem::path& npz_path) {
  NpzArchive npz(npz_path);
  auto [lat_header, lat_bytes] = npz.read("latents_classes");
  if (lat_header.shape.size() != 2 || lat_header.shape[1] != 6 || lat_header.descr.substr(1) != "i8") {
    throw DataError("dSprites: latents_classes must be int64 of shape (N, 6)",
                    "re-download " + std::string(kDSpritesArchiveName));
  }
  const int64_t n = lat_header.shape[0];
  std::vector<int64_t> classes(static_cast<size_t>(n * 6));
  std::memcpy(classes.data(), lat_bytes.data(), lat_bytes.size());

  FactorVector card{};
  for (int64_t r = 0; r < n; ++r) {
    for (int k = 0; k < kNumFactors; ++k) card[k] = std::max(card[k], classes[r * 6 + 1 + k] + 1);
  }
  grid_.cardinality = card;
  if (grid_.size() != n) {
    throw DataError("dSprites: latents_classes do not form a complete factor grid",
                    "the archive appears truncated; re-download it");
  }
  row_of_flat_.assign(static_cast<size_t>(n), -1);
  for (int64_t r = 0; r < n; ++r) {
    FactorVector f{};
    for (int k = 0; k < kNumFactors; ++k) f[k] = classes[r * 6 + 1 + k];
    row_of_flat_[static_cast<size_t>(grid_.flat_index(f))] = r;
  }

  bits_.assign(static_cast<size_t>(n) * kSpritePixels / 8, 0);
  auto header = npz.stream("imgs", [&](const NpyHeader&, uint64_t off, const uint8_t* d, size_t len) {
    for (size_t i = 0; i < len; ++i) {
      if (d[i]) {
        const uint64_t bit = off + i;
        bits_[bit >> 3] |= static_cast<uint8_t>(1u << (bit & 7));
      }
    }
  });
  if (header.shape.size() != 3 || header.shape[0] != n || header.shape[1] != kSpriteSide ||
      header.shape[2] != kSpriteSide || header.item_size() != 1) {
    throw DataError("dSprites: imgs must be uint8 of shape (N, 64, 64)");
  }
  std::ostringstream os;
  os << "dsprites-archive " << npz_path.filename().string() << " n=" << n;
  provenance_ = os.str();
}

Sprite ArchiveDSprites::render(int64_t flat_index) const {
  if (flat_index < 0 || flat_index >= static_cast<int64_t>(row_of_flat_.size())) {
    throw DataError("dSprites flat index out of range");
  }
  const uint64_t base = static_cast<uint64_t>(row_of_flat_[flat_index]) * kSpritePixels;
  Sprite img{};
  for (int p = 0; p < kSpritePixels; ++p) {
    const uint64_t bit = base + p;
    img[p] = (bits_[bit >> 3] >> (bit & 7)) & 1u;
  }
  return img;
}

std::filesystem::path find_dsprites_archive(const std::filesystem::path& root) {
  for (const auto& cand : {root / kDSpritesArchiveName, root / "dsprites" / kDSpritesArchiveName,
                           root / "dsprites-dataset" / kDSpritesArchiveName}) {
    if (std::filesystem::exists(cand)) return cand;
  }
  throw DataError("dSprites archive not found under " + root.string(),
                  std::string("place ") + kDSpritesArchiveName +
                      " (from github.com/deepmind/dsprites-dataset) in <data_root>/dsprites/, "
                      "or use dataset 'dsprites_procedural'");
}

}  // namespace ssng::data
