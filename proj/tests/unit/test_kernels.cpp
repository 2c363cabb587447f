#include "doctest_torch.hpp"

#include <cmath>

#include "ssng/errors.hpp"
#include "ssng/kernels.hpp"
#include "support.hpp"

using namespace ssng;
using namespace ssng::kernels;
using testing::numeric_grad;
using testing::rel_err;

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

torch::Tensor vec(std::initializer_list<double> v) { return torch::tensor(std::vector<double>(v), kF64); }

// E_q[log q(w) - log p(w)] by sampling, q = N(mu, diag e^lv), p = N(0, I).
double gaussian_kl_mc(const torch::Tensor& mu, const torch::Tensor& lv, int64_t n, uint64_t seed) {
  auto gen = make_generator(seed);
  auto eps = at::normal(0.0, 1.0, {n, mu.size(0)}, gen, kF64);
  auto w = mu + (0.5 * lv).exp() * eps;
  auto log_q = (-0.5 * eps.pow(2) - 0.5 * lv).sum(1);
  auto log_p = (-0.5 * w.pow(2)).sum(1);
  return (log_q - log_p).mean().item<double>();
}

// E_{x ~ p}[log(p(x) K)] by sampling tokens.
double categorical_kl_mc(const torch::Tensor& p, int64_t n, uint64_t seed) {
  auto gen = make_generator(seed);
  auto draws = at::multinomial(p, n, true, gen);
  const double k = static_cast<double>(p.size(0));
  return (p.index_select(0, draws) * k).log().mean().item<double>();
}

double brute_categorical_kl(const std::vector<double>& logits) {
  double m = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (double l : logits) z += std::exp(l - m);
  double kl = 0;
  for (double l : logits) {
    const double p = std::exp(l - m) / z;
    if (p > 0) kl += p * std::log(p * static_cast<double>(logits.size()));
  }
  return kl;
}

}  // namespace

TEST_SUITE("kernels") {
  TEST_CASE("gaussian kl closed form examples") {
    CHECK(gaussian_kl_std({vec({0, 0}), vec({0, 0})}).item<double>() == doctest::Approx(0.0));
    CHECK(gaussian_kl_std({vec({1.0}), vec({0.0})}).item<double>() == doctest::Approx(0.5).epsilon(1e-12));
    const double expected = 0.5 * (4.0 - 1.0 - std::log(4.0));
    CHECK(gaussian_kl_std({vec({0.0}), vec({std::log(4.0)})}).item<double>() ==
          doctest::Approx(expected).epsilon(1e-12));
    CHECK(expected == doctest::Approx(0.80685).epsilon(1e-5));
  }

  TEST_CASE("gaussian kl agrees with monte carlo at 1e6 samples") {
    struct Case {
      torch::Tensor mu, lv;
    };
    for (const auto& c : {Case{vec({1.0}), vec({0.0})}, Case{vec({0.0}), vec({std::log(4.0)})},
                          Case{vec({0.3, -1.2, 0.7}), vec({-0.5, 0.4, 1.1})}}) {
      const double closed = gaussian_kl_std({c.mu, c.lv}).item<double>();
      const double mc = gaussian_kl_mc(c.mu, c.lv, 1'000'000, 11);
      CHECK(std::abs(mc - closed) / closed < 0.01);
    }
  }

  TEST_CASE("gaussian kl is nonnegative and zero only at the prior") {
    auto gen = make_generator(3);
    auto mu = at::normal(0.0, 2.0, {10000, 4}, gen, kF64);
    auto lv = at::normal(0.0, 2.0, {10000, 4}, gen, kF64);
    auto per = gaussian_kl_std_per_sample({mu, lv});
    CHECK(per.min().item<double>() > 0.0);
    CHECK(std::abs(gaussian_kl_std({torch::zeros({5, 3}, kF64), torch::zeros({5, 3}, kF64)}).item<double>()) <= 1e-9);
  }

  TEST_CASE("gaussian kl batch reduction sums dimensions and averages rows") {
    auto mu = vec({1.0, 0.0, 2.0, 1.0}).view({2, 2});
    auto lv = torch::zeros({2, 2}, kF64);
    // rows: 0.5*(1+0) = 0.5 and 0.5*(4+1) = 2.5
    CHECK(gaussian_kl_std({mu, lv}).item<double>() == doctest::Approx(1.5));
  }

  TEST_CASE("gaussian kl rejects non-finite input") {
    CHECK_THROWS_AS(gaussian_kl_std({vec({NAN}), vec({0.0})}), DomainError);
    CHECK_THROWS_AS(gaussian_kl_std({vec({0.0}), vec({INFINITY})}), DomainError);
    CHECK_THROWS_AS(gaussian_kl_std({vec({0.0, 1.0}), vec({0.0})}), DomainError);
  }

  TEST_CASE("categorical kl examples") {
    CHECK(categorical_kl_uniform({torch::zeros({1, 4}, kF64)}).item<double>() == doctest::Approx(0.0));
    CHECK(categorical_kl_uniform({vec({50, -50}).view({1, 2})}).item<double>() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-4));
    auto p = vec({0.5, 0.25, 0.25});
    const double brute = 0.5 * std::log(1.5) + 2 * 0.25 * std::log(0.75);
    CHECK(brute == doctest::Approx(0.05891).epsilon(1e-4));
    CHECK(categorical_kl_uniform({p.log().view({1, 3})}).item<double>() == doctest::Approx(brute).epsilon(1e-10));
  }

  TEST_CASE("categorical kl averages over positions") {
    auto logits = torch::stack({vec({0, 0, 0}), vec({std::log(0.5), std::log(0.25), std::log(0.25)})});
    const double row1 = brute_categorical_kl({std::log(0.5), std::log(0.25), std::log(0.25)});
    CHECK(categorical_kl_uniform({logits}).item<double>() == doctest::Approx(row1 / 2).epsilon(1e-10));
  }

  TEST_CASE("categorical kl agrees with monte carlo at 1e6 samples") {
    for (auto p : {vec({0.5, 0.25, 0.25}), vec({0.7, 0.1, 0.1, 0.05, 0.05})}) {
      const double closed = categorical_kl_uniform({p.log().unsqueeze(0)}).item<double>();
      const double mc = categorical_kl_mc(p, 1'000'000, 5);
      CHECK(std::abs(mc - closed) / closed < 0.01);
    }
  }

  TEST_CASE("categorical kl stays within [0, log K]") {
    auto gen = make_generator(9);
    for (int64_t k : {2, 5, 100}) {
      auto logits = at::normal(0.0, 5.0, {200, 3, k}, gen, kF64);
      for (int64_t i = 0; i < 200; ++i) {
        const double v = categorical_kl_uniform({logits[i]}).item<double>();
        CHECK(v >= 0.0);
        CHECK(v <= std::log(static_cast<double>(k)) + 1e-12);
      }
      auto extreme = torch::full({1, k}, -50.0, kF64);
      extreme[0][0] = 50.0;
      CHECK(categorical_kl_uniform({extreme}).item<double>() ==
            doctest::Approx(std::log(static_cast<double>(k))).epsilon(1e-4));
    }
  }

  TEST_CASE("categorical kl rejects K < 2 and non-finite logits") {
    CHECK_THROWS_AS(categorical_kl_uniform({torch::zeros({3, 1}, kF64)}), DomainError);
    CHECK_THROWS_AS(categorical_kl_uniform({vec({0.0, NAN}).view({1, 2})}), DomainError);
  }

  TEST_CASE("reparameterize examples") {
    auto gen = make_generator(1);
    auto w = reparameterize_gaussian({vec({0.7, -0.3}), vec({-20.0, -20.0})}, gen);
    CHECK(torch::allclose(w, vec({0.7, -0.3}), 0, 1e-4));
    CHECK(reparameterize_gaussian({vec({0.0}), vec({0.0})}, vec({1.3})).item<double>() == doctest::Approx(1.3));
    auto mu = torch::full({100000, 1}, 2.0, kF64);
    auto draws = reparameterize_gaussian({mu, torch::zeros_like(mu)}, gen);
    CHECK(std::abs(draws.mean().item<double>() - 2.0) < 0.02);
  }

  TEST_CASE("reparameterize gradient reaches mu and logvar only") {
    auto mu = vec({0.5, -1.0}).requires_grad_();
    auto lv = vec({0.2, -0.4}).requires_grad_();
    auto eps = vec({0.3, 1.1}).requires_grad_();
    auto w = reparameterize_gaussian({mu, lv}, eps);
    w.sum().backward();
    CHECK(torch::allclose(mu.grad(), torch::ones({2}, kF64)));
    CHECK(torch::allclose(lv.grad(), 0.5 * (0.5 * lv.detach()).exp() * eps.detach()));
    CHECK(!eps.grad().defined());
  }

  TEST_CASE("gumbel straight-through rows are one-hot") {
    auto gen = make_generator(2);
    auto logits = at::normal(0.0, 3.0, {7, 10, 13}, gen);
    for (double tau : {0.1, 1.0, 5.0}) {
      auto s = sample_gumbel_softmax_st({logits}, tau, gen);
      CHECK(torch::equal(s.hard.sum(-1), torch::ones({7, 10})));
      CHECK(torch::equal((s.hard == 0) | (s.hard == 1), torch::ones({7, 10, 13}, torch::kBool)));
      CHECK(torch::equal(s.hard.argmax(-1), s.tokens));
      CHECK(torch::allclose(s.soft.sum(-1), torch::ones({7, 10}), 0, 1e-6));
    }
  }

  TEST_CASE("gumbel hard-sample marginals match softmax within 0.02 total variation") {
    auto gen = make_generator(4);
    for (auto l : {std::vector<double>{10, 0, 0}, std::vector<double>{1.0, 0.5, -1.0, 0.0}}) {
      const auto k = static_cast<int64_t>(l.size());
      auto logits = torch::tensor(l, kF64).expand({100000, k}).contiguous();
      auto s = sample_gumbel_softmax_st({logits}, 1.0, gen);
      auto freq = torch::bincount(s.tokens.flatten(), {}, k).to(torch::kFloat64) / 100000.0;
      auto p = torch::softmax(torch::tensor(l, kF64), 0);
      CHECK(0.5 * (freq - p).abs().sum().item<double>() < 0.02);
    }
  }

  TEST_CASE("gumbel noise is clamped and standard") {
    auto gen = make_generator(8);
    auto g = sample_gumbel_noise({200000}, gen, torch::kFloat64);
    CHECK(torch::isfinite(g).all().item<bool>());
    CHECK(g.max().item<double>() <= -std::log(-std::log(1.0 - 1e-7)) + 1e-9);
    CHECK(g.mean().item<double>() == doctest::Approx(0.5772156649).epsilon(0.02));
  }

  TEST_CASE("gumbel rejects non-positive temperature") {
    auto gen = make_generator(0);
    auto logits = torch::zeros({2, 3});
    CHECK_THROWS_AS(sample_gumbel_softmax_st({logits}, 0.0, gen), DomainError);
    CHECK_THROWS_AS(sample_gumbel_softmax_st({logits}, -1.0, gen), DomainError);
  }

  TEST_CASE("gumbel soft path gradient matches finite differences") {
    auto gen = make_generator(12);
    auto logits = at::normal(0.0, 1.0, {3, 5}, gen, kF64);
    auto noise = sample_gumbel_noise({3, 5}, gen, torch::kFloat64);
    auto weights = at::normal(0.0, 1.0, {3, 5}, gen, kF64);
    for (double tau : {0.5, 1.0, 2.0}) {
      auto x = logits.clone().requires_grad_();
      (gumbel_softmax_relaxed({x}, tau, noise) * weights).sum().backward();
      auto fd = numeric_grad(
          [&](const torch::Tensor& l) { return (torch::softmax((l + noise) / tau, -1) * weights).sum().item<double>(); },
          logits);
      CHECK(rel_err(x.grad(), fd) < 1e-4);
      // The sum of soft is constant, so its gradient vanishes.
      auto y = logits.clone().requires_grad_();
      gumbel_softmax_relaxed({y}, tau, noise).sum().backward();
      CHECK(y.grad().abs().max().item<double>() < 1e-12);
    }
  }

  TEST_CASE("straight-through gradient is bitwise the soft-path gradient") {
    auto gen = make_generator(13);
    auto logits = at::normal(0.0, 1.0, {4, 6, 9}, gen);
    auto noise = sample_gumbel_noise({4, 6, 9}, gen);
    auto weights = at::normal(0.0, 1.0, {4, 6, 9}, gen);
    auto a = logits.clone().requires_grad_();
    auto b = logits.clone().requires_grad_();
    auto st = gumbel_softmax_st({a}, 0.7, noise);
    (st.hard * weights).sum().backward();
    (gumbel_softmax_relaxed({b}, 0.7, noise) * weights).sum().backward();
    CHECK(torch::equal(a.grad(), b.grad()));
    CHECK((a.grad() - b.grad()).abs().max().item<float>() == 0.0f);
    CHECK(torch::equal(st.hard.detach(), torch::one_hot(st.tokens, 9).to(torch::kFloat32)));
  }

  TEST_CASE("neg cosine examples") {
    CHECK(neg_cosine(vec({3, 4}), vec({3, 4})).item<double>() == doctest::Approx(-1.0));
    CHECK(neg_cosine(vec({1, 0}), vec({0, 1})).item<double>() == doctest::Approx(0.0));
    CHECK(neg_cosine(vec({1, 0}), vec({-2, 0})).item<double>() == doctest::Approx(1.0));
  }

  TEST_CASE("neg cosine batch mean, bounds and scale invariance") {
    auto gen = make_generator(21);
    auto x = at::normal(0.0, 1.0, {64, 8}, gen, kF64);
    auto y = at::normal(0.0, 1.0, {64, 8}, gen, kF64);
    const double d = neg_cosine(x, y).item<double>();
    CHECK(d == doctest::Approx(-torch::cosine_similarity(x, y, 1).mean().item<double>()).epsilon(1e-12));
    CHECK(d >= -1.0);
    CHECK(d <= 1.0);
    for (double a : {1e-3, 0.5, 7.0, 1e4}) {
      for (double b : {2e-2, 3.0, 1e3}) {
        CHECK(std::abs(neg_cosine(a * x, b * y).item<double>() - d) < 1e-6);
      }
    }
    for (int64_t i = 0; i < 64; ++i) {
      const double v = neg_cosine(x[i], y[i]).item<double>();
      CHECK(v >= -1.0 - 1e-12);
      CHECK(v <= 1.0 + 1e-12);
    }
  }

  TEST_CASE("neg cosine rejects zero norm and shape mismatch") {
    CHECK_THROWS_AS(neg_cosine(vec({0, 0}), vec({1, 0})), DomainError);
    CHECK_THROWS_AS(neg_cosine(vec({1, 0}), vec({0, 0})), DomainError);
    CHECK_THROWS_AS(neg_cosine(vec({1, 0}), vec({1, 0, 0})), DomainError);
  }

  TEST_CASE("analytic gradients match central finite differences") {
    auto gen = make_generator(31);
    auto mu = at::normal(0.0, 1.0, {3, 4}, gen, kF64);
    auto lv = at::normal(0.0, 1.0, {3, 4}, gen, kF64);
    {
      auto m = mu.clone().requires_grad_();
      auto l = lv.clone().requires_grad_();
      gaussian_kl_std({m, l}).backward();
      auto fd_mu = numeric_grad([&](const torch::Tensor& t) { return gaussian_kl_std({t, lv}).item<double>(); }, mu);
      auto fd_lv = numeric_grad([&](const torch::Tensor& t) { return gaussian_kl_std({mu, t}).item<double>(); }, lv);
      CHECK(rel_err(m.grad(), fd_mu) < 1e-4);
      CHECK(rel_err(l.grad(), fd_lv) < 1e-4);
      // Same gradient as autograd through the naive expression.
      auto m2 = mu.clone().requires_grad_();
      auto l2 = lv.clone().requires_grad_();
      (0.5 * (m2.pow(2) + l2.exp() - 1 - l2).sum(1).mean()).backward();
      CHECK(rel_err(m.grad(), m2.grad()) < 1e-12);
      CHECK(rel_err(l.grad(), l2.grad()) < 1e-12);
    }
    {
      auto logits = at::normal(0.0, 2.0, {2, 3, 7}, gen, kF64);
      auto x = logits.clone().requires_grad_();
      categorical_kl_uniform({x}).backward();
      auto fd = numeric_grad([&](const torch::Tensor& t) { return categorical_kl_uniform({t}).item<double>(); }, logits);
      CHECK(rel_err(x.grad(), fd) < 1e-4);
      auto x2 = logits.clone().requires_grad_();
      auto p = torch::softmax(x2, -1);
      ((p * torch::log_softmax(x2, -1)).sum(-1) + std::log(7.0)).mean().backward();
      CHECK(rel_err(x.grad(), x2.grad()) < 1e-10);
    }
    {
      auto a = at::normal(0.0, 1.0, {5, 6}, gen, kF64);
      auto b = at::normal(0.0, 1.0, {5, 6}, gen, kF64);
      auto x = a.clone().requires_grad_();
      auto y = b.clone().requires_grad_();
      neg_cosine(x, y).backward();
      auto fd_x = numeric_grad([&](const torch::Tensor& t) { return neg_cosine(t, b).item<double>(); }, a);
      auto fd_y = numeric_grad([&](const torch::Tensor& t) { return neg_cosine(a, t).item<double>(); }, b);
      CHECK(rel_err(x.grad(), fd_x) < 1e-4);
      CHECK(rel_err(y.grad(), fd_y) < 1e-4);
      auto v = a.clone().requires_grad_();
      neg_cosine(v[0], b[0]).backward();
      auto fd_v = numeric_grad([&](const torch::Tensor& t) { return neg_cosine(t, b[0]).item<double>(); }, a[0]);
      CHECK(rel_err(v.grad()[0], fd_v) < 1e-4);
    }
  }

  TEST_CASE("stop gradient passes values and blocks gradients") {
    auto x = vec({1.0, 2.0}).requires_grad_();
    auto y = stop_gradient(x * 3);
    CHECK(torch::equal(y, vec({3.0, 6.0})));
    CHECK(!y.requires_grad());
  }
}
