#include "ssng/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ssng/errors.hpp"
#include "ssng/kernels.hpp"
#include "ssng/rng.hpp"

namespace ssng::eval {

double topk_accuracy(const torch::Tensor& scores, const torch::Tensor& labels, int64_t k) {
  if (scores.dim() != 2) throw ConfigError("scores must be (N, C)");
  const auto n = scores.size(0);
  const auto c = scores.size(1);
  if (labels.dim() != 1 || labels.size(0) != n) throw ConfigError("labels must be (N) matching scores");
  if (k < 1 || k > c) {
    throw ConfigError("k=" + std::to_string(k) + " outside [1, " + std::to_string(c) + "]", {"top_k"});
  }
  if (n == 0) return 0.0;
  auto y = labels.to(torch::kInt64).unsqueeze(1);
  auto s_true = scores.gather(1, y);
  auto cls = torch::arange(c, torch::kInt64).unsqueeze(0);
  auto ahead = (scores > s_true).sum(1) + ((scores == s_true) & (cls < y)).sum(1);
  return (ahead < k).to(torch::kFloat64).mean().item<double>();
}

ProbeResult linear_probe(const torch::Tensor& train_reps, const torch::Tensor& train_labels,
                         const torch::Tensor& test_reps, const torch::Tensor& test_labels,
                         int64_t k, const ProbeConfig& cfg) {
  if (train_reps.size(0) != train_labels.size(0) || test_reps.size(0) != test_labels.size(0)) {
    throw ConfigError("probe: representation and label counts differ");
  }
  if (train_reps.size(1) != test_reps.size(1)) throw ConfigError("probe: train/test widths differ");
  const auto n = train_reps.size(0);
  const auto d = train_reps.size(1);
  const auto num_classes =
      std::max(train_labels.max().item<int64_t>(), test_labels.max().item<int64_t>()) + 1;

  auto xtr = train_reps.detach().to(torch::kFloat32);
  auto ytr = train_labels.to(torch::kInt64);
  torch::nn::Linear clf(d, num_classes);
  {
    torch::NoGradGuard ng;
    auto gen = kernels::make_generator(derive_seed(cfg.seed, {0x9b0be}));
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    clf->weight.uniform_(-bound, bound, gen);
    clf->bias.uniform_(-bound, bound, gen);
  }
  torch::optim::Adam opt(clf->parameters(), torch::optim::AdamOptions(cfg.lr));
  std::vector<int64_t> positions(static_cast<size_t>(n));
  std::iota(positions.begin(), positions.end(), 0);
  const auto bs = cfg.batch_size > 0 ? cfg.batch_size : n;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& batch : data::make_batches(positions, bs, cfg.seed, epoch)) {
      auto idx = torch::tensor(batch, torch::kInt64);
      auto loss = torch::nn::functional::cross_entropy(clf(xtr.index_select(0, idx)),
                                                       ytr.index_select(0, idx));
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  torch::NoGradGuard ng;
  auto scores = clf(test_reps.detach().to(torch::kFloat32));
  return {k, topk_accuracy(scores, test_labels, k), test_reps.size(0)};
}

torch::Tensor encode_dataset(ssl::EncoderStack& encoder, const data::ImageDataset& ds,
                             int64_t batch_size) {
  const bool was_training = encoder->is_training();
  encoder->eval();
  torch::NoGradGuard ng;
  std::vector<torch::Tensor> out;
  for (int64_t s = 0; s < ds.size(); s += batch_size) {
    std::vector<int64_t> idx(static_cast<size_t>(std::min(batch_size, ds.size() - s)));
    std::iota(idx.begin(), idx.end(), s);
    out.push_back(encoder->forward(ds.batch(idx)));
  }
  encoder->train(was_training);
  if (out.empty()) return torch::empty({0, encoder->d_z()});
  return torch::cat(out);
}

CollapseSummary collapse_metric(const torch::Tensor& reps) {
  if (reps.dim() != 2 || reps.size(0) < 2) throw ConfigError("collapse_metric needs (N >= 2, d) input");
  auto r = reps.detach().to(torch::kFloat64);
  auto norms = r.norm(2, 1, true);
  if ((norms == 0).any().item<bool>()) throw DomainError("collapse_metric: zero representation vector");
  auto stds = (r / norms).std(0, /*unbiased=*/false);
  return {stds.mean().item<double>(), stds.min().item<double>()};
}

int64_t levenshtein(const int64_t* a, int64_t na, const int64_t* b, int64_t nb) {
  std::vector<int64_t> prev(static_cast<size_t>(nb + 1)), cur(static_cast<size_t>(nb + 1));
  std::iota(prev.begin(), prev.end(), 0);
  for (int64_t i = 1; i <= na; ++i) {
    cur[0] = i;
    for (int64_t j = 1; j <= nb; ++j) {
      const int64_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[nb];
}

namespace {

using i128 = __int128;

// Doubled average ranks (1-based), so ties stay integral.
std::vector<int64_t> doubled_ranks(const std::vector<int64_t>& keys) {
  std::vector<int64_t> order(keys.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t x, int64_t y) { return keys[x] < keys[y]; });
  std::vector<int64_t> ranks(keys.size());
  size_t s = 0;
  while (s < order.size()) {
    size_t e = s + 1;
    while (e < order.size() && keys[order[e]] == keys[order[s]]) ++e;
    for (size_t t = s; t < e; ++t) ranks[order[t]] = static_cast<int64_t>(s + 1 + e);
    s = e;
  }
  return ranks;
}

double pearson(i128 n, i128 sx, i128 sy, i128 sxx, i128 syy, i128 sxy) {
  const i128 cov = n * sxy - sx * sy;
  const i128 vx = n * sxx - sx * sx;
  const i128 vy = n * syy - sy * sy;
  if (vx <= 0 || vy <= 0) return 0.0;
  const long double denom = std::sqrt(static_cast<long double>(vx)) * std::sqrt(static_cast<long double>(vy));
  return static_cast<double>(static_cast<long double>(cov) / denom);
}

struct Pairs {
  std::vector<int32_t> i, j;
};

Pairs make_pairs(int64_t n, const TopSimConfig& cfg) {
  Pairs p;
  const int64_t total = n * (n - 1) / 2;
  if (total <= cfg.max_pairs) {
    p.i.reserve(static_cast<size_t>(total));
    p.j.reserve(static_cast<size_t>(total));
    for (int64_t a = 0; a < n; ++a) {
      for (int64_t b = a + 1; b < n; ++b) {
        p.i.push_back(static_cast<int32_t>(a));
        p.j.push_back(static_cast<int32_t>(b));
      }
    }
    return p;
  }
  auto rng = make_rng(cfg.seed, {0x9a125});
  p.i.reserve(static_cast<size_t>(cfg.max_pairs));
  p.j.reserve(static_cast<size_t>(cfg.max_pairs));
  while (static_cast<int64_t>(p.i.size()) < cfg.max_pairs) {
    auto a = uniform_int(rng, 0, n - 1);
    auto b = uniform_int(rng, 0, n - 1);
    if (a == b) continue;
    if (a > b) std::swap(a, b);
    p.i.push_back(static_cast<int32_t>(a));
    p.j.push_back(static_cast<int32_t>(b));
  }
  return p;
}

// Exact integer factor distances: sum_k |df_k| * (S / range_k) with S the lcm
// of the ranges; falls back to a 2^-30 grid if the lcm overflows.
std::vector<int64_t> factor_keys(const torch::Tensor& factors, const Pairs& pairs) {
  auto f = factors.to(torch::kInt64).contiguous();
  const auto nf = f.size(1);
  auto fmax = std::get<0>(f.max(0));
  auto fmin = std::get<0>(f.min(0));
  std::vector<int64_t> range(static_cast<size_t>(nf));
  int64_t scale = 1;
  bool exact = true;
  for (int64_t k = 0; k < nf; ++k) {
    range[k] = fmax[k].item<int64_t>() - fmin[k].item<int64_t>();
    if (range[k] > 0 && exact) {
      scale = std::lcm(scale, range[k]);
      if (scale > (int64_t{1} << 40)) exact = false;
    }
  }
  const auto* fp = f.data_ptr<int64_t>();
  std::vector<int64_t> keys(pairs.i.size());
  for (size_t p = 0; p < keys.size(); ++p) {
    const auto* a = fp + static_cast<int64_t>(pairs.i[p]) * nf;
    const auto* b = fp + static_cast<int64_t>(pairs.j[p]) * nf;
    if (exact) {
      int64_t d = 0;
      for (int64_t k = 0; k < nf; ++k) {
        if (range[k] > 0) d += std::abs(a[k] - b[k]) * (scale / range[k]);
      }
      keys[p] = d;
    } else {
      double d = 0.0;
      for (int64_t k = 0; k < nf; ++k) {
        if (range[k] > 0) d += static_cast<double>(std::abs(a[k] - b[k])) / static_cast<double>(range[k]);
      }
      keys[p] = std::llround(d * 0x1.0p30);
    }
  }
  return keys;
}

}  // namespace

TopSimResult topsim(const torch::Tensor& factors, const torch::Tensor& messages,
                    const TopSimConfig& cfg) {
  if (factors.dim() != 2 || messages.dim() != 2) throw ConfigError("topsim: factors and messages must be 2-D");
  const auto n = factors.size(0);
  if (messages.size(0) != n) throw ConfigError("topsim: factor and message counts differ");
  if (n < 3) throw ConfigError("topsim needs at least 3 items");
  auto msg = messages.to(torch::kInt64).contiguous();
  const auto len = msg.size(1);
  const auto* mp = msg.data_ptr<int64_t>();

  const auto pairs = make_pairs(n, cfg);
  const auto np = static_cast<int64_t>(pairs.i.size());
  const auto fkeys = factor_keys(factors, pairs);
  const auto rx = doubled_ranks(fkeys);

  // Message distance matrix (edit distances are integers in [0, L]).
  std::vector<uint16_t> dm(static_cast<size_t>(n * n), 0);
  for (int64_t a = 0; a < n; ++a) {
    for (int64_t b = a + 1; b < n; ++b) {
      const auto d = static_cast<uint16_t>(levenshtein(mp + a * len, len, mp + b * len, len));
      dm[a * n + b] = d;
      dm[b * n + a] = d;
    }
  }

  i128 sx = 0, sxx = 0;
  for (auto r : rx) {
    sx += r;
    sxx += static_cast<i128>(r) * r;
  }
  bool fx_const = std::all_of(fkeys.begin(), fkeys.end(), [&](int64_t v) { return v == fkeys[0]; });

  // Spearman under an assignment perm[] of messages to objects; message keys
  // are small integers, so ranks come from a histogram.
  std::vector<int64_t> hist(static_cast<size_t>(len + 1));
  std::vector<int64_t> yrank(static_cast<size_t>(len + 1));
  std::vector<uint16_t> ykey(static_cast<size_t>(np));
  auto rho_for = [&](const std::vector<int64_t>& perm, bool* y_const) {
    std::fill(hist.begin(), hist.end(), 0);
    for (int64_t p = 0; p < np; ++p) {
      const auto d = dm[perm[pairs.i[p]] * n + perm[pairs.j[p]]];
      ykey[p] = d;
      ++hist[d];
    }
    int64_t start = 0;
    int64_t distinct = 0;
    for (int64_t v = 0; v <= len; ++v) {
      if (hist[v] > 0) ++distinct;
      yrank[v] = start + 1 + start + hist[v];
      start += hist[v];
    }
    if (y_const) *y_const = distinct <= 1;
    i128 sy = 0, syy = 0, sxy = 0;
    for (int64_t v = 0; v <= len; ++v) {
      sy += static_cast<i128>(hist[v]) * yrank[v];
      syy += static_cast<i128>(hist[v]) * yrank[v] * yrank[v];
    }
    for (int64_t p = 0; p < np; ++p) sxy += static_cast<i128>(rx[p]) * yrank[ykey[p]];
    return pearson(np, sx, sy, sxx, syy, sxy);
  };

  TopSimResult out;
  out.n_pairs = np;
  std::vector<int64_t> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  bool y_const = false;
  const double rho = rho_for(perm, &y_const);
  if (fx_const || y_const) {
    out.degenerate = true;
    return out;
  }
  out.rho = rho;

  if (cfg.n_permutations > 0) {
    double mean = 0.0, m2 = 0.0;
    for (int64_t t = 0; t < cfg.n_permutations; ++t) {
      std::iota(perm.begin(), perm.end(), 0);
      auto rng = make_rng(cfg.seed, {0x9e1, static_cast<uint64_t>(t)});
      shuffle(perm.begin(), perm.end(), rng);
      const double r = rho_for(perm, nullptr);
      const double delta = r - mean;
      mean += delta / static_cast<double>(t + 1);
      m2 += delta * (r - mean);
    }
    out.null_mean = mean;
    out.null_std = cfg.n_permutations > 1 ? std::sqrt(m2 / static_cast<double>(cfg.n_permutations - 1)) : 0.0;
  }
  return out;
}

}  // namespace ssng::eval
