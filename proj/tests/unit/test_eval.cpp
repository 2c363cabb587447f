#include "doctest_torch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ssng/checkpoint.hpp"
#include "ssng/errors.hpp"
#include "ssng/eval.hpp"
#include "ssng/rng.hpp"
#include "support.hpp"

using namespace ssng;
using namespace ssng::eval;

namespace {

// Five binary factors; message token i is 2*i + factor i, so positions never share tokens.
std::pair<torch::Tensor, torch::Tensor> digit_encoded(int64_t n, uint64_t seed) {
  auto gen = kernels::make_generator(seed);
  auto f = torch::randint(0, 2, {n, 5}, gen, torch::kInt64);
  auto m = f + 2 * torch::arange(5, torch::kInt64);
  return {f, m};
}

torch::Tensor permute_rows(const torch::Tensor& t, uint64_t seed) {
  std::vector<int64_t> p(static_cast<size_t>(t.size(0)));
  std::iota(p.begin(), p.end(), 0);
  auto rng = make_rng(seed, {});
  shuffle(p.begin(), p.end(), rng);
  return t.index_select(0, torch::tensor(p, torch::kInt64));
}

// Spearman by brute force: average ranks (values within 1e-9 tie) and a double-precision Pearson.
double spearman_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (size_t s = 0; s < idx.size();) {
      size_t e = s;
      while (e + 1 < idx.size() && v[idx[e + 1]] - v[idx[s]] < 1e-9) ++e;
      for (size_t k = s; k <= e; ++k) r[idx[k]] = 0.5 * static_cast<double>(s + e) + 1.0;
      s = e + 1;
    }
    return r;
  };
  auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

int64_t levenshtein_oracle(const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
  std::vector<std::vector<int64_t>> d(a.size() + 1, std::vector<int64_t>(b.size() + 1));
  for (size_t i = 0; i <= a.size(); ++i) d[i][0] = static_cast<int64_t>(i);
  for (size_t j = 0; j <= b.size(); ++j) d[0][j] = static_cast<int64_t>(j);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
  }
  return d[a.size()][b.size()];
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("topk accuracy examples") {
    auto labels = torch::tensor({0, 2, 1}, torch::kInt64);
    CHECK(topk_accuracy(torch::one_hot(labels, 3).to(torch::kFloat32), labels, 1) == 1.0);
    CHECK(topk_accuracy(torch::randn({3, 3}), labels, 3) == 1.0);
    // Row 0 picks 0 (right), row 1 picks 0 (wrong), row 2 picks 1 (right).
    auto scores = torch::tensor({{0.9, 0.05, 0.05}, {0.6, 0.3, 0.1}, {0.2, 0.7, 0.1}});
    CHECK(topk_accuracy(scores, labels, 1) == doctest::Approx(2.0 / 3.0));
    CHECK(topk_accuracy(scores, labels, 2) == doctest::Approx(2.0 / 3.0));
    // Ties rank the lower class index first.
    auto tied = torch::zeros({2, 3});
    CHECK(topk_accuracy(tied, torch::tensor({0, 1}, torch::kInt64), 1) == doctest::Approx(0.5));
    CHECK(topk_accuracy(tied, torch::tensor({2, 1}, torch::kInt64), 2) == doctest::Approx(0.5));
  }

  TEST_CASE("topk accuracy is monotone in k and rejects bad k") {
    auto gen = kernels::make_generator(1);
    auto scores = torch::randn({500, 10}, gen);
    auto labels = torch::randint(0, 10, {500}, gen, torch::kInt64);
    double prev = 0.0;
    for (int64_t k = 1; k <= 10; ++k) {
      const double acc = topk_accuracy(scores, labels, k);
      CHECK(acc >= prev);
      CHECK(acc <= 1.0);
      prev = acc;
    }
    CHECK(prev == 1.0);
    CHECK_THROWS_AS(topk_accuracy(scores, labels, 0), ConfigError);
    CHECK_THROWS_AS(topk_accuracy(scores, labels, 11), ConfigError);
  }

  TEST_CASE("linear probe separates separable classes") {
    auto gen = kernels::make_generator(2);
    auto make = [&](int64_t n) {
      auto y = torch::randint(0, 2, {n}, gen, torch::kInt64);
      auto x = torch::randn({n, 8}, gen) * 0.3;
      x.select(1, 0).add_(y.to(torch::kFloat32) * 4.0 - 2.0);
      return std::make_pair(x, y);
    };
    auto [xtr, ytr] = make(400);
    auto [xte, yte] = make(200);
    ProbeConfig cfg;
    cfg.epochs = 50;
    cfg.lr = 1e-2;
    cfg.seed = 3;
    auto r = linear_probe(xtr, ytr, xte, yte, 1, cfg);
    CHECK(r.accuracy == 1.0);
    CHECK(r.n_test == 200);
    CHECK(r.top_k == 1);
  }

  TEST_CASE("linear probe on shuffled labels stays near chance") {
    auto gen = kernels::make_generator(4);
    auto xtr = torch::randn({3000, 16}, gen);
    auto ytr = torch::randint(0, 10, {3000}, gen, torch::kInt64);
    auto xte = torch::randn({3000, 16}, gen);
    auto yte = torch::randint(0, 10, {3000}, gen, torch::kInt64);
    ProbeConfig cfg;
    cfg.epochs = 20;
    cfg.seed = 5;
    auto r = linear_probe(xtr, ytr, xte, yte, 1, cfg);
    CHECK(std::abs(r.accuracy - 0.1) <= 0.03);
    CHECK_THROWS_AS(linear_probe(xtr, ytr.narrow(0, 0, 10), xte, yte, 1, cfg), ConfigError);
  }

  TEST_CASE("probing leaves the encoder untouched") {
    torch::manual_seed(6);
    auto model_cfg = ssl::SslModelConfig::fashionmnist();
    ssl::EncoderStack enc(model_cfg.encoder);
    auto ds = testing::random_images(64, 1, 28, 10, 7);
    const auto before = io::module_hash(*enc);
    enc->train();
    auto reps = encode_dataset(enc, ds, 16);
    CHECK(enc->is_training());
    CHECK(reps.sizes() == torch::IntArrayRef({64, 128}));
    CHECK(torch::equal(reps, encode_dataset(enc, ds, 64)));
    ProbeConfig cfg;
    cfg.epochs = 5;
    linear_probe(reps, ds.labels, reps, ds.labels, 1, cfg);
    CHECK(io::module_hash(*enc) == before);
  }

  TEST_CASE("collapse metric examples") {
    auto same = torch::tensor({1.0f, 2.0f, 3.0f}).expand({10, 3});
    auto s = collapse_metric(same);
    CHECK(s.mean_std == doctest::Approx(0.0));
    CHECK(s.min_std == doctest::Approx(0.0));

    auto gen = kernels::make_generator(8);
    auto g = at::normal(0.0, 1.0, {10000, 128}, gen, torch::TensorOptions().dtype(torch::kFloat64));
    auto u = collapse_metric(g);
    CHECK(std::abs(u.mean_std * std::sqrt(128.0) - 1.0) < 0.1);
    CHECK(u.min_std <= u.mean_std);
    // Scaling rows does not change directions.
    auto scaled = g * torch::rand({10000, 1}, gen, torch::kFloat64).add(0.5);
    CHECK(collapse_metric(scaled).mean_std == doctest::Approx(u.mean_std).epsilon(1e-9));

    CHECK_THROWS_AS(collapse_metric(torch::zeros({4, 3})), DomainError);
    CHECK_THROWS_AS(collapse_metric(torch::ones({1, 3})), ConfigError);
  }

  TEST_CASE("levenshtein matches the dynamic-programming oracle") {
    auto rng = make_rng(9, {});
    for (int t = 0; t < 300; ++t) {
      std::vector<int64_t> a(static_cast<size_t>(uniform_int(rng, 0, 10)));
      std::vector<int64_t> b(static_cast<size_t>(uniform_int(rng, 0, 10)));
      for (auto& v : a) v = uniform_int(rng, 0, 3);
      for (auto& v : b) v = uniform_int(rng, 0, 3);
      CHECK(levenshtein(a.data(), static_cast<int64_t>(a.size()), b.data(), static_cast<int64_t>(b.size())) ==
            levenshtein_oracle(a, b));
    }
    std::vector<int64_t> x{0, 1, 0, 1, 0}, y{1, 0, 1, 0, 1};
    CHECK(levenshtein(x.data(), 5, y.data(), 5) == 2);
  }

  TEST_CASE("digit-encoded messages have topsim 1") {
    auto [f, m] = digit_encoded(200, 10);
    TopSimConfig cfg;
    cfg.n_permutations = 50;
    auto r = topsim(f, m, cfg);
    CHECK(r.rho == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(!r.degenerate);
    CHECK(r.n_pairs == 200 * 199 / 2);
    CHECK(std::abs(r.null_mean) < 0.05);
  }

  TEST_CASE("topsim agrees with a brute-force spearman") {
    auto gen = kernels::make_generator(11);
    const int64_t n = 60;
    auto f = torch::stack({torch::randint(0, 3, {n}, gen, torch::kInt64), torch::randint(0, 6, {n}, gen, torch::kInt64),
                           torch::randint(0, 40, {n}, gen, torch::kInt64), torch::randint(0, 32, {n}, gen, torch::kInt64),
                           torch::randint(0, 32, {n}, gen, torch::kInt64)},
                          1);
    auto m = torch::randint(0, 4, {n, 6}, gen, torch::kInt64);
    m.select(1, 0).copy_(f.select(1, 0));
    std::vector<double> fx, my;
    auto fmax = std::get<0>(f.max(0)), fmin = std::get<0>(f.min(0));
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = i + 1; j < n; ++j) {
        double d = 0;
        for (int64_t k = 0; k < 5; ++k) {
          const double range = static_cast<double>(fmax[k].item<int64_t>() - fmin[k].item<int64_t>());
          if (range > 0) d += std::abs(static_cast<double>(f[i][k].item<int64_t>() - f[j][k].item<int64_t>())) / range;
        }
        fx.push_back(d);
        std::vector<int64_t> a(m[i].data_ptr<int64_t>(), m[i].data_ptr<int64_t>() + 6);
        std::vector<int64_t> b(m[j].data_ptr<int64_t>(), m[j].data_ptr<int64_t>() + 6);
        my.push_back(static_cast<double>(levenshtein_oracle(a, b)) / 6.0);
      }
    }
    TopSimConfig cfg;
    cfg.n_permutations = 0;
    CHECK(topsim(f, m, cfg).rho == doctest::Approx(spearman_oracle(fx, my)).epsilon(1e-9));
  }

  TEST_CASE("random messages sit at the permutation null") {
    auto gen = kernels::make_generator(12);
    const int64_t n = 1000;
    auto f = torch::randint(0, 32, {n, 5}, gen, torch::kInt64);
    auto m = torch::randint(0, 100, {n, 10}, gen, torch::kInt64);
    TopSimConfig cfg;
    cfg.n_permutations = 20;
    auto r = topsim(f, m, cfg);
    CHECK(std::abs(r.rho) < 0.05);
    CHECK(std::abs(r.null_mean) < 0.05);
    CHECK(r.null_std > 0.0);
  }

  TEST_CASE("topsim is invariant to token relabeling and sample order") {
    auto gen = kernels::make_generator(13);
    const int64_t n = 150;
    auto f = torch::randint(0, 6, {n, 5}, gen, torch::kInt64);
    auto m = (f.narrow(1, 0, 3).repeat({1, 2}) + torch::randint(0, 2, {n, 6}, gen, torch::kInt64)) % 7;
    TopSimConfig cfg;
    cfg.n_permutations = 10;
    const auto base = topsim(f, m, cfg);
    CHECK(base.rho > 0.0);

    auto relabel = torch::randperm(7, gen, torch::kInt64).add(40);
    const auto relabeled = topsim(f, relabel.index_select(0, m.flatten()).view({n, 6}), cfg);
    CHECK(relabeled.rho == base.rho);

    std::vector<int64_t> p(static_cast<size_t>(n));
    std::iota(p.begin(), p.end(), 0);
    auto rng = make_rng(14, {});
    shuffle(p.begin(), p.end(), rng);
    auto idx = torch::tensor(p, torch::kInt64);
    const auto reordered = topsim(f.index_select(0, idx), m.index_select(0, idx), cfg);
    CHECK(reordered.rho == base.rho);
    CHECK(topsim(f, m, cfg).null_mean == base.null_mean);
    auto flipped = topsim(f.flip({0}), m.flip({0}), cfg);
    CHECK(flipped.rho == base.rho);
  }

  TEST_CASE("shuffled digit messages lose their structure") {
    auto [f, m] = digit_encoded(1000, 15);
    TopSimConfig cfg;
    cfg.n_permutations = 0;
    CHECK(std::abs(topsim(f, permute_rows(m, 16), cfg).rho) < 0.05);
  }

  TEST_CASE("degenerate inputs give rho 0 with a flag") {
    auto gen = kernels::make_generator(17);
    auto f = torch::randint(0, 5, {20, 5}, gen, torch::kInt64);
    auto same = torch::zeros({20, 10}, torch::kInt64);
    auto r = topsim(f, same);
    CHECK(r.degenerate);
    CHECK(r.rho == 0.0);
    auto r2 = topsim(torch::zeros({20, 5}, torch::kInt64), torch::randint(0, 5, {20, 10}, gen, torch::kInt64));
    CHECK(r2.degenerate);
    CHECK_THROWS_AS(topsim(f.narrow(0, 0, 2), same.narrow(0, 0, 2)), ConfigError);
    CHECK_THROWS_AS(topsim(f, same.narrow(0, 0, 19)), ConfigError);
  }

  TEST_CASE("pair subsampling is deterministic per seed") {
    auto gen = kernels::make_generator(18);
    auto f = torch::randint(0, 10, {300, 5}, gen, torch::kInt64);
    auto m = torch::randint(0, 5, {300, 10}, gen, torch::kInt64);
    TopSimConfig cfg;
    cfg.max_pairs = 5000;
    cfg.n_permutations = 3;
    cfg.seed = 1;
    auto a = topsim(f, m, cfg);
    auto b = topsim(f, m, cfg);
    CHECK(a.n_pairs == 5000);
    CHECK(a.rho == b.rho);
    CHECK(a.null_mean == b.null_mean);
  }
}
