#pragma once

// dSprites-style corpora: 64x64 binary sprites indexed by five generative
// factors (shape, scale, orientation, posX, posY). Flat indices follow the
// archive's row-major order with posY varying fastest.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace ssng::data {

inline constexpr int kNumFactors = 5;
inline constexpr int kSpriteSide = 64;
inline constexpr int kSpritePixels = kSpriteSide * kSpriteSide;

enum Factor : int { kShape = 0, kScale = 1, kOrientation = 2, kPosX = 3, kPosY = 4 };

using FactorVector = std::array<int64_t, kNumFactors>;
using Sprite = std::array<uint8_t, kSpritePixels>;  // values 0/1, row-major (y, x)

struct FactorGrid {
  FactorVector cardinality{3, 6, 40, 32, 32};

  int64_t size() const;
  int64_t flat_index(const FactorVector& f) const;
  FactorVector factors(int64_t flat) const;
  bool contains(const FactorVector& f) const;
};

class DSpritesSource {
 public:
  virtual ~DSpritesSource() = default;
  virtual const FactorGrid& grid() const = 0;
  virtual Sprite render(int64_t flat_index) const = 0;
  // Short provenance tag recorded in run manifests.
  virtual std::string provenance() const = 0;
};

// Rasterizes square / ellipse / heart sprites analytically. Scale maps to
// linspace(0.5, 1, n) of a 10-pixel half extent, orientation to
// linspace(0, 2*pi, n) and positions to centers in [16, 48].
class ProceduralDSprites final : public DSpritesSource {
 public:
  explicit ProceduralDSprites(FactorGrid grid = {});
  const FactorGrid& grid() const override { return grid_; }
  Sprite render(int64_t flat_index) const override;
  std::string provenance() const override;

 private:
  FactorGrid grid_;
};

// The standard archive (dsprites_ndarray_co1sh3sc6or40x32y32_64x64.npz).
// Images are held bit-packed (one bit per pixel) so the full corpus fits in
// about 380 MB. Factor cardinalities are read from `latents_classes`; the
// color column is dropped.
class ArchiveDSprites final : public DSpritesSource {
 public:
  explicit ArchiveDSprites(const std::filesystem::path& npz_path);
  const FactorGrid& grid() const override { return grid_; }
  Sprite render(int64_t flat_index) const override;
  std::string provenance() const override { return provenance_; }

 private:
  FactorGrid grid_;
  std::vector<int64_t> row_of_flat_;
  std::vector<uint8_t> bits_;
  std::string provenance_;
};

inline constexpr const char* kDSpritesArchiveName = "dsprites_ndarray_co1sh3sc6or40x32y32_64x64.npz";

std::filesystem::path find_dsprites_archive(const std::filesystem::path& root);

}  // namespace ssng::data
