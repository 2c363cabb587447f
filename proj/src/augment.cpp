#include <algorithm>
#include <cmath>
#include <set>

#include "ssng/data.hpp"
#include "ssng/errors.hpp"

namespace ssng::data {

namespace F = torch::nn::functional;

AugmentConfig AugmentConfig::for_dataset(DatasetKind kind) {
  AugmentConfig cfg;
  if (kind == DatasetKind::FashionMnist) {
    // Grayscale 28x28: crop + flip only; color ops are skipped for 1 channel anyway.
    cfg.crop_min_scale = 0.2;
  }
  return cfg;
}

AugmentConfig AugmentConfig::identity() {
  AugmentConfig cfg;
  cfg.enabled = false;
  return cfg;
}

namespace {

torch::Tensor luminance(const torch::Tensor& img) {
  // ITU-R 601 weights, (3, H, W) -> (1, H, W)
  return (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]).unsqueeze(0);
}

torch::Tensor random_resized_crop(const torch::Tensor& img, const AugmentConfig& cfg, Rng& rng) {
  const int64_t h = img.size(1);
  const int64_t w = img.size(2);
  const double area = static_cast<double>(h * w);
  int64_t ch = h, cw = w, top = 0, left = 0;
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double target = area * uniform(rng, cfg.crop_min_scale, cfg.crop_max_scale);
    const double log_ratio = uniform(rng, std::log(3.0 / 4.0), std::log(4.0 / 3.0));
    const double aspect = std::exp(log_ratio);
    const auto tw = static_cast<int64_t>(std::lround(std::sqrt(target * aspect)));
    const auto th = static_cast<int64_t>(std::lround(std::sqrt(target / aspect)));
    if (tw > 0 && tw <= w && th > 0 && th <= h) {
      cw = tw;
      ch = th;
      top = uniform_int(rng, 0, h - th);
      left = uniform_int(rng, 0, w - tw);
      found = true;
    }
  }
  auto crop = img.slice(1, top, top + ch).slice(2, left, left + cw).unsqueeze(0);
  auto out = F::interpolate(crop, F::InterpolateFuncOptions()
                                      .size(std::vector<int64_t>{h, w})
                                      .mode(torch::kBilinear)
                                      .align_corners(false));
  return out.squeeze(0);
}

}  // namespace

torch::Tensor augment(const torch::Tensor& image, const AugmentConfig& cfg, Rng& rng) {
  if (!cfg.enabled) return image.clone();
  auto img = random_resized_crop(image, cfg, rng);
  if (uniform01(rng) < cfg.hflip_prob) img = img.flip({2});
  if (img.size(0) == 3) {
    if (uniform01(rng) < cfg.jitter_prob) {
      const double b = uniform(rng, 1.0 - cfg.brightness, 1.0 + cfg.brightness);
      img = (img * b).clamp(0.0, 1.0);
      const double c = uniform(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast);
      auto mean = luminance(img).mean();
      img = ((img - mean) * c + mean).clamp(0.0, 1.0);
      const double s = uniform(rng, 1.0 - cfg.saturation, 1.0 + cfg.saturation);
      auto gray = luminance(img);
      img = ((img - gray) * s + gray).clamp(0.0, 1.0);
    }
    if (uniform01(rng) < cfg.grayscale_prob) img = luminance(img).expand({3, -1, -1});
  }
  return img.contiguous();
}

ViewPair make_augmented_pair(const ImageDataset& ds, int64_t index, const AugmentConfig& cfg,
                             uint64_t seed, uint64_t epoch) {
  if (index < 0 || index >= ds.size()) throw DataError("dataset index out of range");
  auto base = ds.image(index);
  auto rng_a = make_rng(seed, {epoch, static_cast<uint64_t>(index), 0});
  auto rng_b = make_rng(seed, {epoch, static_cast<uint64_t>(index), 1});
  ViewPair pair;
  pair.xA = augment(base, cfg, rng_a);
  pair.xB = augment(base, cfg, rng_b);
  pair.object_index = ds.object_ids[index].item<int64_t>();
  if (ds.has_factors()) pair.factors = ds.factor_vector(index);
  return pair;
}

ViewPolicy parse_view_policy(const std::string& name) {
  if (name == "factor_jitter") return ViewPolicy::FactorJitter;
  if (name == "dual_augment") return ViewPolicy::DualAugment;
  throw ConfigError("unknown view policy '" + name + "' (expected factor_jitter, dual_augment)",
                    {"view_policy"});
}

std::string to_string(ViewPolicy policy) {
  return policy == ViewPolicy::FactorJitter ? "factor_jitter" : "dual_augment";
}

FactorVector jitter_factors(const FactorVector& f, const FactorGrid& grid, Rng& rng) {
  FactorVector out = f;
  const auto o_card = grid.cardinality[kOrientation];
  const auto o_step = uniform_int(rng, -kMaxJitterSteps, kMaxJitterSteps);
  out[kOrientation] = ((f[kOrientation] + o_step) % o_card + o_card) % o_card;
  for (int k : {kPosX, kPosY}) {
    const auto step = uniform_int(rng, -kMaxJitterSteps, kMaxJitterSteps);
    out[k] = std::clamp<int64_t>(f[k] + step, 0, grid.cardinality[k] - 1);
  }
  return out;
}

ViewPair make_viewpoint_pair(const ImageDataset& ds, int64_t index, ViewPolicy policy,
                             const AugmentConfig& aug, uint64_t seed, uint64_t epoch) {
  if (policy == ViewPolicy::DualAugment) return make_augmented_pair(ds, index, aug, seed, epoch);
  if (!ds.sprites || !ds.has_factors()) {
    throw ConfigError("factor_jitter views need a dSprites dataset", {"view_policy"});
  }
  if (index < 0 || index >= ds.size()) throw DataError("dataset index out of range");
  auto rng = make_rng(seed, {epoch, static_cast<uint64_t>(index), 2});
  const auto f = ds.factor_vector(index);
  const auto partner = jitter_factors(f, ds.sprites->grid(), rng);
  const auto sprite = ds.sprites->render(ds.sprites->grid().flat_index(partner));

  ViewPair pair;
  pair.xA = ds.image(index);
  pair.xB = torch::from_blob(const_cast<uint8_t*>(sprite.data()), {1, kSpriteSide, kSpriteSide},
                             torch::kUInt8)
                .to(torch::kFloat32)
                .mul_(ds.pixel_scale);
  pair.object_index = ds.object_ids[index].item<int64_t>();
  pair.factors = f;
  return pair;
}

namespace {

PairBatch collate(const ImageDataset& ds, const std::vector<int64_t>& indices,
                  const std::function<ViewPair(int64_t)>& make) {
  std::vector<torch::Tensor> a, b;
  a.reserve(indices.size());
  b.reserve(indices.size());
  for (auto i : indices) {
    auto p = make(i);
    a.push_back(std::move(p.xA));
    b.push_back(std::move(p.xB));
  }
  auto idx = torch::tensor(indices, torch::kInt64);
  PairBatch out;
  out.xA = torch::stack(a);
  out.xB = torch::stack(b);
  out.object_index = ds.object_ids.index_select(0, idx);
  if (ds.has_factors()) out.factors = ds.factors.index_select(0, idx);
  return out;
}

}  // namespace

PairBatch make_augmented_batch(const ImageDataset& ds, const std::vector<int64_t>& indices,
                               const AugmentConfig& cfg, uint64_t seed, uint64_t epoch) {
  return collate(ds, indices,
                 [&](int64_t i) { return make_augmented_pair(ds, i, cfg, seed, epoch); });
}

PairBatch make_viewpoint_batch(const ImageDataset& ds, const std::vector<int64_t>& indices,
                               ViewPolicy policy, const AugmentConfig& aug, uint64_t seed,
                               uint64_t epoch) {
  return collate(ds, indices, [&](int64_t i) {
    return make_viewpoint_pair(ds, i, policy, aug, seed, epoch);
  });
}

Split split_unseen(const ImageDataset& ds, const SplitSpec& spec) {
  if (!ds.has_factors()) throw ConfigError("split_unseen needs factor labels (dSprites)");
  if (!(spec.holdout_fraction > 0.0 && spec.holdout_fraction < 1.0)) {
    throw ConfigError("holdout_fraction must lie in (0, 1)", {"holdout_fraction"});
  }
  const auto n = ds.size();
  auto fac = ds.factors.accessor<int64_t, 2>();
  std::set<std::pair<int64_t, int64_t>> combos;
  for (int64_t i = 0; i < n; ++i) combos.emplace(fac[i][kShape], fac[i][kScale]);
  std::vector<std::pair<int64_t, int64_t>> ordered(combos.begin(), combos.end());

  auto n_hold = static_cast<int64_t>(
      std::lround(spec.holdout_fraction * static_cast<double>(ordered.size())));
  n_hold = std::max<int64_t>(n_hold, 1);
  auto rng = make_rng(spec.seed, {0x5b117});
  shuffle(ordered.begin(), ordered.end(), rng);
  std::set<std::pair<int64_t, int64_t>> held(ordered.begin(), ordered.begin() + n_hold);

  Split out;
  out.held_out.assign(held.begin(), held.end());
  for (int64_t i = 0; i < n; ++i) {
    (held.count({fac[i][kShape], fac[i][kScale]}) ? out.eval : out.train).push_back(i);
  }

  std::set<int64_t> shapes_all, scales_all, shapes_train, scales_train;
  for (const auto& [sh, sc] : combos) {
    shapes_all.insert(sh);
    scales_all.insert(sc);
    if (!held.count({sh, sc})) {
      shapes_train.insert(sh);
      scales_train.insert(sc);
    }
  }
  if (shapes_train != shapes_all || scales_train != scales_all || out.train.empty()) {
    throw ConfigError("holdout removes every training example of some shape or scale value",
                      {"holdout_fraction"});
  }
  return out;
}

std::vector<std::vector<int64_t>> make_batches(const std::vector<int64_t>& positions,
                                               int64_t batch_size, uint64_t seed, uint64_t epoch,
                                               bool drop_last) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1", {"batch_size"});
  auto order = positions;
  auto rng = make_rng(seed, {epoch, 0xba7c4});
  shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int64_t>> out;
  for (size_t i = 0; i < order.size(); i += static_cast<size_t>(batch_size)) {
    const auto end = std::min(order.size(), i + static_cast<size_t>(batch_size));
    if (drop_last && end - i < static_cast<size_t>(batch_size)) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

}  // namespace ssng::data
