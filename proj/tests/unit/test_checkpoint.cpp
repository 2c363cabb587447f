#include "doctest_torch.hpp"

#include <fstream>

#include "ssng/checkpoint.hpp"
#include "ssng/errors.hpp"
#include "ssng/ssl_model.hpp"
#include "support.hpp"

using namespace ssng;
using namespace ssng::io;

namespace {

std::vector<uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), {});
}

ssl::SslModel trained_model(torch::optim::Adam** opt_out, std::unique_ptr<torch::optim::Adam>& holder) {
  torch::manual_seed(1);
  ssl::SslModel model(ssl::SslModelConfig::fashionmnist());
  holder = std::make_unique<torch::optim::Adam>(model->parameters(), torch::optim::AdamOptions(1e-3));
  auto gen = kernels::make_generator(2);
  for (int i = 0; i < 2; ++i) {
    auto out = model->forward_branch(torch::rand({8, 1, 28, 28}, gen), gen);
    holder->zero_grad();
    out.z_recon.sum().backward();
    holder->step();
  }
  *opt_out = holder.get();
  return model;
}

}  // namespace

TEST_SUITE("checkpoint") {
  TEST_CASE("tensors of every supported dtype round-trip") {
    Checkpoint c;
    c.epoch = 7;
    c.config_hash = "abc";
    c.config_json = R"({"seed":1})";
    c.put("f32", torch::randn({3, 4}));
    c.put("f64", torch::randn({2}, torch::kFloat64));
    c.put("i64", torch::arange(5, torch::kInt64));
    c.put("u8", torch::randint(0, 255, {2, 2}, torch::kUInt8));
    c.put("i32", torch::arange(4, torch::kInt32));
    c.put("scalar", torch::tensor(3.5));
    auto d = Checkpoint::deserialize(c.serialize());
    CHECK(d.epoch == 7);
    CHECK(d.config_hash == "abc");
    CHECK(d.config_json == c.config_json);
    REQUIRE(d.tensors().size() == c.tensors().size());
    for (const auto& [name, t] : c.tensors()) {
      REQUIRE(d.has(name));
      CHECK((d.get(name).scalar_type() == t.scalar_type()));
      CHECK(torch::equal(d.get(name), t));
    }
    CHECK(!d.has("missing"));
    CHECK_THROWS_AS(d.get("missing"), IoError);
  }

  TEST_CASE("save, load, save is byte-identical") {
    testing::TempDir dir("ckpt");
    torch::optim::Adam* opt = nullptr;
    std::unique_ptr<torch::optim::Adam> holder;
    auto model = trained_model(&opt, holder);
    Checkpoint c;
    c.epoch = 2;
    c.config_hash = "0123456789abcdef";
    c.config_json = "{}";
    put_module(c, "model", *model);
    put_adam(c, "optim", *opt);
    c.save(dir / "a.ckpt");

    torch::manual_seed(99);
    ssl::SslModel fresh(ssl::SslModelConfig::fashionmnist());
    torch::optim::Adam fresh_opt(fresh->parameters(), torch::optim::AdamOptions(1e-3));
    auto loaded = Checkpoint::load(dir / "a.ckpt");
    load_module(loaded, "model", *fresh);
    load_adam(loaded, "optim", fresh_opt);
    CHECK(module_hash(*fresh) == module_hash(*model));

    Checkpoint again;
    again.epoch = loaded.epoch;
    again.config_hash = loaded.config_hash;
    again.config_json = loaded.config_json;
    put_module(again, "model", *fresh);
    put_adam(again, "optim", fresh_opt);
    again.save(dir / "b.ckpt");
    CHECK(read_bytes(dir / "a.ckpt") == read_bytes(dir / "b.ckpt"));
    CHECK(!std::filesystem::exists(dir / "a.ckpt.tmp"));
  }

  TEST_CASE("corrupt, truncated and foreign files are rejected") {
    testing::TempDir dir("bad");
    Checkpoint c;
    c.put("x", torch::ones({16}));
    auto bytes = c.serialize();
    for (size_t cut : {size_t{4}, size_t{12}, bytes.size() - 1}) {
      std::vector<uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
      CHECK_THROWS_AS(Checkpoint::deserialize(part), IoError);
    }
    auto wrong_version = bytes;
    wrong_version[8] = 9;
    CHECK_THROWS_AS(Checkpoint::deserialize(wrong_version), IoError);
    auto wrong_magic = bytes;
    wrong_magic[0] = 'X';
    CHECK_THROWS_AS(Checkpoint::deserialize(wrong_magic), IoError);
    CHECK_THROWS_AS(Checkpoint::load(dir / "nope.ckpt"), IoError);
  }

  TEST_CASE("loading into a mismatched module fails") {
    torch::manual_seed(3);
    ssl::SslModel small(ssl::SslModelConfig::fashionmnist());
    Checkpoint c;
    put_module(c, "m", *small);
    auto cifar_cfg = ssl::SslModelConfig::fashionmnist();
    cifar_cfg.d_w = 32;
    ssl::SslModel other(cifar_cfg);
    CHECK_THROWS_AS(load_module(c, "m", *other), IoError);
    CHECK_THROWS_AS(load_module(c, "absent", *small), IoError);
  }

  TEST_CASE("module hash tracks parameter changes") {
    torch::manual_seed(4);
    torch::nn::Linear lin(3, 2);
    const auto h = module_hash(*lin);
    CHECK(h.size() == 16);
    CHECK(module_hash(*lin) == h);
    {
      torch::NoGradGuard ng;
      lin->weight[0][0].add_(1e-3);
    }
    CHECK(module_hash(*lin) != h);
  }
}
