#include "doctest_torch.hpp"

#include <cmath>

#include "ssng/checkpoint.hpp"
#include "ssng/errors.hpp"
#include "ssng/ssl_model.hpp"
#include "ssng/ssl_train.hpp"
#include "support.hpp"

using namespace ssng;
using namespace ssng::ssl;

namespace {

SslModelConfig small_config(Variant v = Variant::SimSiamVae) {
  auto cfg = SslModelConfig::fashionmnist();
  cfg.variant = v;
  return cfg;
}

torch::Tensor image_batch(int64_t n, uint64_t seed) {
  auto gen = kernels::make_generator(seed);
  return torch::rand({n, 1, 28, 28}, gen);
}

BranchOutput branch(const torch::Tensor& z, const torch::Tensor& recon, const torch::Tensor& mu,
                    const torch::Tensor& lv) {
  BranchOutput b;
  b.z = z;
  b.z_recon = recon;
  b.params = {mu, lv};
  return b;
}

}  // namespace

TEST_SUITE("ssl") {
  TEST_CASE("forward_branch shapes") {
    torch::manual_seed(0);
    SslModel model(small_config());
    auto gen = kernels::make_generator(1);
    auto out = model->forward_branch(image_batch(8, 2), gen);
    CHECK(out.z.sizes() == torch::IntArrayRef({8, 128}));
    CHECK(out.z_recon.sizes() == torch::IntArrayRef({8, 128}));
    CHECK(out.params.mu.sizes() == torch::IntArrayRef({8, 64}));
    CHECK(out.params.logvar.sizes() == torch::IntArrayRef({8, 64}));
    CHECK(out.z_recon.min().item<float>() >= 0.0f);
    CHECK(out.z_recon.max().item<float>() <= 1.0f);
  }

  TEST_CASE("mlp and cifar encoders produce d_z") {
    torch::manual_seed(0);
    EncoderConfig mlp;
    mlp.backbone = BackboneKind::Mlp;
    mlp.d_z = 256;
    mlp.projector_hidden = 256;
    EncoderStack enc(mlp);
    enc->eval();
    auto x = torch::rand({4, 1, 64, 64});
    CHECK(enc->forward(x).sizes() == torch::IntArrayRef({4, 256}));
    CHECK(torch::equal(enc->forward(x), enc->forward(x)));

    SslModel cifar(SslModelConfig::cifar10());
    cifar->eval();
    auto gen = kernels::make_generator(0);
    auto out = cifar->forward_branch(torch::rand({2, 3, 32, 32}), gen);
    CHECK(out.z.size(1) == 256);
    CHECK(out.params.mu.size(1) == 128);
  }

  TEST_CASE("forward_branch rejects mismatched input shapes") {
    SslModel model(small_config());
    auto gen = kernels::make_generator(1);
    CHECK_THROWS_AS(model->forward_branch(torch::rand({2, 3, 28, 28}), gen), ConfigError);
    CHECK_THROWS_AS(model->forward_branch(torch::rand({2, 1, 32, 32}), gen), ConfigError);
  }

  TEST_CASE("vanishing variance makes the branch deterministic") {
    torch::manual_seed(3);
    SslModel model(small_config());
    model->eval();
    model->vae()->set_logvar_range(-20.0, -20.0);
    auto x = image_batch(6, 4);
    auto g1 = kernels::make_generator(10);
    auto g2 = kernels::make_generator(10);
    auto a = model->forward_branch(x, g1);
    auto b = model->forward_branch(x, g2);
    CHECK((a.z_recon - b.z_recon).abs().max().item<float>() < 1e-5f);
    auto g3 = kernels::make_generator(99);
    auto mean = model->forward_branch(x, g3, Sampling::Mean);
    auto c = model->forward_branch(x, g3);
    CHECK((c.z_recon - mean.z_recon).abs().max().item<float>() < 1e-3f);
  }

  TEST_CASE("gradient reaches at least 99% of parameter blocks") {
    torch::manual_seed(5);
    SslModel model(small_config());
    auto gen = kernels::make_generator(6);
    auto out = model->forward_branch(image_batch(16, 7), gen);
    out.z_recon.pow(2).sum().backward();
    int64_t total = 0, reached = 0;
    for (const auto& p : model->parameters()) {
      ++total;
      if (p.grad().defined() && p.grad().abs().sum().item<double>() > 0) ++reached;
    }
    CHECK(total > 0);
    CHECK(static_cast<double>(reached) >= 0.99 * static_cast<double>(total));
  }

  TEST_CASE("simsiamvae loss examples") {
    auto z = torch::randn({4, 8});
    auto zero = torch::zeros({4, 3});
    SslLossConfig cfg;
    cfg.beta = 0.0;
    auto a = branch(z, z, zero, zero);
    CHECK(simsiamvae_loss(a, a, cfg).total.item<double>() == doctest::Approx(-2.0).epsilon(1e-6));

    auto e0 = torch::zeros({2, 2});
    e0.select(1, 0).fill_(1.0);
    auto e1 = torch::zeros({2, 2});
    e1.select(1, 1).fill_(1.0);
    auto zeros2 = torch::zeros({2, 1});
    auto ba = branch(e0, e0, zeros2, zeros2);
    auto bb = branch(e1, e1, zeros2, zeros2);
    CHECK(std::abs(simsiamvae_loss(ba, bb, cfg).total.item<double>()) < 1e-7);
  }

  TEST_CASE("simsiamvae loss is symmetric and affine in beta") {
    torch::manual_seed(8);
    auto make = [] {
      return branch(torch::randn({5, 6}), torch::rand({5, 6}), torch::randn({5, 3}), torch::randn({5, 3}));
    };
    auto a = make();
    auto b = make();
    SslLossConfig cfg;
    for (double beta : {0.0, 0.5, 1.0, 3.0}) {
      cfg.beta = beta;
      CHECK(std::abs(simsiamvae_loss(a, b, cfg).total.item<double>() -
                     simsiamvae_loss(b, a, cfg).total.item<double>()) < 1e-6);
    }
    double l[3];
    for (int i = 0; i < 3; ++i) {
      cfg.beta = i;
      l[i] = simsiamvae_loss(a, b, cfg).total.item<double>();
    }
    const double kl = kernels::gaussian_kl_std(a.params).item<double>() + kernels::gaussian_kl_std(b.params).item<double>();
    CHECK(std::abs((l[1] - l[0]) - kl) < 1e-5);
    CHECK(std::abs((l[2] - l[1]) - kl) < 1e-5);
    cfg.beta = 1.0;
    auto parts = simsiamvae_loss(a, b, cfg);
    CHECK(parts.kl == doctest::Approx(kl).epsilon(1e-6));
    CHECK(parts.total.item<double>() == doctest::Approx(parts.align + parts.kl).epsilon(1e-6));
  }

  TEST_CASE("stop-gradient blocks the target path exactly") {
    torch::manual_seed(9);
    auto za = torch::randn({4, 6}, torch::kFloat64).requires_grad_();
    auto zb = torch::randn({4, 6}, torch::kFloat64).requires_grad_();
    auto ra = torch::randn({4, 6}, torch::kFloat64).requires_grad_();
    auto rb = torch::randn({4, 6}, torch::kFloat64).requires_grad_();
    auto zero = torch::zeros({4, 2}, torch::kFloat64);
    SslLossConfig cfg;
    cfg.beta = 0.0;
    simsiamvae_loss(branch(za, ra, zero, zero), branch(zb, rb, zero, zero), cfg).total.backward();
    CHECK(!za.grad().defined());
    CHECK(!zb.grad().defined());
    CHECK(ra.grad().abs().sum().item<double>() > 0);

    auto za2 = za.detach().clone().requires_grad_();
    SslLossConfig off;
    off.beta = 0.0;
    off.stop_grad = false;
    off.variant = Variant::SimSiamVaeNoStopGrad;
    simsiamvae_loss(branch(za2, ra.detach(), zero, zero), branch(zb.detach(), rb.detach(), zero, zero), off)
        .total.backward();
    CHECK(za2.grad().abs().sum().item<double>() > 0);
  }

  TEST_CASE("projector receives no gradient through the stop-gradient target") {
    torch::manual_seed(10);
    SslModel model(small_config());
    auto gen = kernels::make_generator(2);
    auto x = image_batch(8, 3);
    auto a = model->forward_branch(x, gen);
    // Alignment-only objective where branch A contributes only as a target.
    auto target_only = kernels::neg_cosine(torch::rand({8, 128}).requires_grad_(), kernels::stop_gradient(a.z));
    target_only.backward();
    for (const auto& p : model->encoder()->parameters()) {
      CHECK((!p.grad().defined() || p.grad().abs().max().item<float>() == 0.0f));
    }
  }

  TEST_CASE("baseline equals the vae loss with zero variance and beta 0") {
    torch::manual_seed(11);
    SslModel model(small_config());
    model->eval();
    auto gen = kernels::make_generator(12);
    auto xa = image_batch(8, 13);
    auto xb = image_batch(8, 14);
    torch::NoGradGuard ng;
    auto a = model->forward_branch(xa, gen, Sampling::Mean);
    auto b = model->forward_branch(xb, gen, Sampling::Mean);
    SslLossConfig cfg;
    cfg.beta = 0.0;
    const double vae = simsiamvae_loss(a, b, cfg).total.item<double>();
    auto h = [&](const torch::Tensor& z) { return model->vae()->decode(model->vae()->encode(z).mu); };
    const double base = simsiam_baseline_loss(a.z, b.z, h).total.item<double>();
    CHECK(std::abs(vae - base) < 1e-6);

    auto ident = [](const torch::Tensor& z) { return z; };
    CHECK(simsiam_baseline_loss(a.z, a.z, ident).total.item<double>() == doctest::Approx(-2.0).epsilon(1e-6));
    for (int i = 0; i < 20; ++i) {
      auto v = simsiam_baseline_loss(torch::randn({4, 5}), torch::randn({4, 5}), ident).total.item<double>();
      CHECK(v >= -2.0 - 1e-6);
      CHECK(v <= 2.0 + 1e-6);
    }
  }

  TEST_CASE("loss rejects mismatched branches and inconsistent configs") {
    auto z4 = torch::randn({4, 8});
    auto z3 = torch::randn({3, 8});
    auto p4 = torch::zeros({4, 2});
    auto p3 = torch::zeros({3, 2});
    SslLossConfig cfg;
    CHECK_THROWS_AS(simsiamvae_loss(branch(z4, z4, p4, p4), branch(z3, z3, p3, p3), cfg), ConfigError);
    SslLossConfig bad;
    bad.variant = Variant::SimSiamVaeNoStopGrad;
    bad.stop_grad = true;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    SslLossConfig nan_beta;
    nan_beta.beta = NAN;
    CHECK_THROWS_AS(nan_beta.validate(), ConfigError);
    CHECK_THROWS_AS(parse_variant("vicreg"), ConfigError);
    CHECK(parse_variant("simsiam") == Variant::SimSiam);
  }

  TEST_CASE("step schedule halves every step with a floor") {
    StepSchedule s{1e-3, 10, 0.5, 1e-6};
    CHECK(s.at(0) == doctest::Approx(1e-3));
    CHECK(s.at(9) == doctest::Approx(1e-3));
    CHECK(s.at(10) == doctest::Approx(5e-4));
    CHECK(s.at(25) == doctest::Approx(2.5e-4));
    CHECK(s.at(499) == doctest::Approx(1e-6));
    for (int e = 1; e < 500; ++e) CHECK(s.at(e) <= s.at(e - 1));
  }

  TEST_CASE("one epoch on 512 samples completes with finite loss and is deterministic") {
    auto ds = testing::random_images(512, 1, 28, 10, 21);
    SslTrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 128;
    cfg.seed = 7;
    cfg.collapse_sample = 256;
    cfg.augment = data::AugmentConfig::for_dataset(data::DatasetKind::FashionMnist);
    auto run = [&] {
      torch::manual_seed(1);
      SslModel model(small_config());
      return std::make_pair(train_ssl(model, ds, cfg), io::module_hash(*model));
    };
    auto [m1, h1] = run();
    auto [m2, h2] = run();
    REQUIRE(m1.size() == 1);
    CHECK(std::isfinite(m1[0].loss));
    CHECK(m1[0].loss >= -2.0 - 1e-6);
    CHECK(m1[0].collapse_mean > 0.0);
    CHECK(m1[0].lr == doctest::Approx(1e-3));
    CHECK(std::abs(m1[0].loss - m2[0].loss) < 1e-6);
    CHECK(h1 == h2);
  }

  TEST_CASE("training writes epoch and final checkpoints") {
    testing::TempDir dir("sslckpt");
    auto ds = testing::random_images(64, 1, 28, 10, 22);
    SslTrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 32;
    cfg.checkpoint_every = 1;
    cfg.checkpoint_dir = dir.path();
    cfg.seed = 1;
    SslModel model(small_config(Variant::SimSiam));
    train_ssl(model, ds, cfg);
    CHECK(std::filesystem::exists(ssl_checkpoint_path(dir.path(), 1)));
    CHECK(std::filesystem::exists(ssl_checkpoint_path(dir.path(), 2)));
    CHECK(std::filesystem::exists(dir / "ssl_final.ckpt"));
  }

  TEST_CASE("non-finite loss aborts with a diagnostic") {
    auto ds = testing::random_images(64, 1, 28, 10, 23);
    SslTrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 32;
    cfg.seed = 2;
    SslModel model(small_config());
    {
      torch::NoGradGuard ng;
      model->vae()->parameters().front().fill_(NAN);
    }
    try {
      train_ssl(model, ds, cfg);
      FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("epoch 1") != std::string::npos);
      CHECK(msg.find("batch") != std::string::npos);
    }
  }
}
