#include "ssng/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>

#include "ssng/data.hpp"
#include "ssng/errors.hpp"

namespace ssng::runner {

namespace fs = std::filesystem;
using nlohmann::json;

ExperimentConfig ExperimentConfig::defaults_for(const std::string& experiment) {
  ExperimentConfig c;
  c.experiment = experiment;
  if (experiment == "ssng") {
    c.dataset = "dsprites";
    c.subset_size = 10000;
    c.lr = 1e-5;
    c.weight_decay = 0.0;
    c.epochs = 200;
    c.batch_size = 256;
    c.d_z = 256;
  }
  return c;
}

uint64_t ExperimentConfig::seed_value() const {
  if (!seed) throw ConfigError("seed is required", {"seed"});
  return *seed;
}

fs::path ExperimentConfig::checkpoints() const {
  return checkpoint_dir.empty() ? out() / "checkpoints" : fs::path(checkpoint_dir);
}
fs::path ExperimentConfig::trace() const { return trace_path.empty() ? out() / "trace.jsonl" : fs::path(trace_path); }
fs::path ExperimentConfig::report() const { return report_path.empty() ? out() / "report.json" : fs::path(report_path); }

ssl::SslModelConfig ExperimentConfig::ssl_model() const {
  const auto kind = data::parse_dataset_kind(dataset);
  ssl::SslModelConfig m;
  if (kind == data::DatasetKind::FashionMnist) {
    m = ssl::SslModelConfig::fashionmnist();
  } else if (kind == data::DatasetKind::Cifar10) {
    m = ssl::SslModelConfig::cifar10();
  } else {
    throw ConfigError("SSL training supports fashionmnist and cifar10", {"dataset"});
  }
  if (d_z > 0) m.encoder.d_z = d_z;
  if (d_w > 0) m.d_w = d_w;
  m.variant = ssl::parse_variant(variant);
  return m;
}

ssl::SslTrainConfig ExperimentConfig::ssl_train() const {
  ssl::SslTrainConfig t;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.schedule = {lr, lr_step, lr_gamma, lr_floor};
  t.weight_decay = weight_decay;
  t.loss.beta = beta;
  t.loss.stop_grad = stop_grad;
  t.loss.variant = ssl::parse_variant(variant);
  t.augment = data::AugmentConfig::for_dataset(data::parse_dataset_kind(dataset));
  t.seed = seed_value();
  t.checkpoint_every = checkpoint_every;
  t.checkpoint_dir = checkpoints();
  t.config_json = to_json(*this).dump();
  t.config_hash = config_hash(*this);
  return t;
}

game::GameConfig ExperimentConfig::game() const {
  game::GameConfig g;
  g.vocab_size = vocab_size;
  g.message_len = message_len;
  g.beta = beta;
  g.tau = tau;
  g.tau_decay = tau_decay;
  g.tau_min = tau_min;
  g.epochs = epochs;
  g.batch_size = batch_size;
  g.schedule = {lr, lr_step, lr_gamma, lr_floor};
  if (d_z > 0) g.d_z = d_z;
  g.view_policy = data::parse_view_policy(view_policy);
  g.seed = seed_value();
  return g;
}

int64_t ExperimentConfig::probe_top_k() const {
  if (top_k > 0) return top_k;
  return dataset == "cifar10" ? 2 : 1;
}

namespace {

using Setter = std::function<void(ExperimentConfig&, const json&)>;

template <typename T>
Setter field(T ExperimentConfig::*member) {
  return [member](ExperimentConfig& c, const json& v) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw std::invalid_argument("expected true/false");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw std::invalid_argument("expected an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw std::invalid_argument("expected a number");
    } else {
      if (!v.is_string()) throw std::invalid_argument("expected a string");
    }
    c.*member = v.get<T>();
  };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"experiment", field(&ExperimentConfig::experiment)},
      {"dataset", field(&ExperimentConfig::dataset)},
      {"subset_size", field(&ExperimentConfig::subset_size)},
      {"variant", field(&ExperimentConfig::variant)},
      {"stop_grad", field(&ExperimentConfig::stop_grad)},
      {"d_z", field(&ExperimentConfig::d_z)},
      {"d_w", field(&ExperimentConfig::d_w)},
      {"beta", field(&ExperimentConfig::beta)},
      {"vocab_size", field(&ExperimentConfig::vocab_size)},
      {"message_len", field(&ExperimentConfig::message_len)},
      {"tau", field(&ExperimentConfig::tau)},
      {"tau_decay", field(&ExperimentConfig::tau_decay)},
      {"tau_min", field(&ExperimentConfig::tau_min)},
      {"lr", field(&ExperimentConfig::lr)},
      {"weight_decay", field(&ExperimentConfig::weight_decay)},
      {"lr_step", field(&ExperimentConfig::lr_step)},
      {"lr_gamma", field(&ExperimentConfig::lr_gamma)},
      {"lr_floor", field(&ExperimentConfig::lr_floor)},
      {"epochs", field(&ExperimentConfig::epochs)},
      {"batch_size", field(&ExperimentConfig::batch_size)},
      {"seed",
       [](ExperimentConfig& c, const json& v) {
         if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<int64_t>() < 0)) throw std::invalid_argument("expected a non-negative integer");
         c.seed = v.get<uint64_t>();
       }},
      {"view_policy", field(&ExperimentConfig::view_policy)},
      {"holdout_fraction", field(&ExperimentConfig::holdout_fraction)},
      {"checkpoint_every", field(&ExperimentConfig::checkpoint_every)},
      {"topsim_every", field(&ExperimentConfig::topsim_every)},
      {"probe_epochs", field(&ExperimentConfig::probe_epochs)},
      {"top_k", field(&ExperimentConfig::top_k)},
      {"n_permutations", field(&ExperimentConfig::n_permutations)},
      {"data_root", field(&ExperimentConfig::data_root)},
      {"out_dir", field(&ExperimentConfig::out_dir)},
      {"checkpoint_dir", field(&ExperimentConfig::checkpoint_dir)},
      {"trace_path", field(&ExperimentConfig::trace_path)},
      {"report_path", field(&ExperimentConfig::report_path)},
  };
  return table;
}

void check_values(const ExperimentConfig& c) {
  std::vector<std::string> bad;
  std::string why;
  auto fail = [&](const std::string& key, const std::string& msg) {
    bad.push_back(key);
    why += "\n  " + key + ": " + msg;
  };
  static const std::vector<std::string> experiments = {"ssl", "ssng", "probe", "topsim", "report"};
  if (std::find(experiments.begin(), experiments.end(), c.experiment) == experiments.end()) {
    fail("experiment", "must be one of ssl, ssng, probe, topsim, report");
  }
  try {
    data::parse_dataset_kind(c.dataset);
  } catch (const std::exception& e) {
    fail("dataset", e.what());
  }
  try {
    ssl::parse_variant(c.variant);
  } catch (const std::exception& e) {
    fail("variant", e.what());
  }
  try {
    data::parse_view_policy(c.view_policy);
  } catch (const std::exception& e) {
    fail("view_policy", e.what());
  }
  if (c.variant == "simsiam_vae_no_stopgrad" && c.stop_grad) {
    fail("stop_grad", "variant simsiam_vae_no_stopgrad requires stop_grad=false");
  }
  if (c.subset_size < 0) fail("subset_size", "must be >= 0");
  if (!std::isfinite(c.beta) || c.beta < 0) fail("beta", "must be finite and >= 0");
  if (c.vocab_size < 2) fail("vocab_size", "must be >= 2");
  if (c.message_len < 1) fail("message_len", "must be >= 1");
  if (!(c.tau > 0)) fail("tau", "must be > 0");
  if (!(c.tau_decay > 0) || c.tau_decay > 1) fail("tau_decay", "must lie in (0, 1]");
  if (!(c.lr > 0)) fail("lr", "must be > 0");
  if (c.weight_decay < 0) fail("weight_decay", "must be >= 0");
  if (c.lr_floor < 0) fail("lr_floor", "must be >= 0");
  if (c.epochs < 0) fail("epochs", "must be >= 0");
  if (c.batch_size < 2) fail("batch_size", "must be >= 2");
  if (!(c.holdout_fraction > 0 && c.holdout_fraction < 1)) fail("holdout_fraction", "must lie in (0, 1)");
  if (c.checkpoint_every < 0) fail("checkpoint_every", "must be >= 0");
  if (c.probe_epochs < 1) fail("probe_epochs", "must be >= 1");
  if (c.top_k < 0) fail("top_k", "must be >= 0");
  if (c.n_permutations < 0) fail("n_permutations", "must be >= 0");
  if (!bad.empty()) throw ConfigError("invalid configuration:" + why, bad);
}

}  // namespace

ExperimentConfig parse_config(const json& j, const std::string& default_experiment) {
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  std::string experiment = default_experiment;
  if (j.contains("experiment") && j["experiment"].is_string()) experiment = j["experiment"].get<std::string>();
  auto c = ExperimentConfig::defaults_for(experiment);

  std::vector<std::string> unknown, bad;
  std::string why;
  const auto& table = setters();
  for (const auto& [key, value] : j.items()) {
    auto it = table.find(key);
    if (it == table.end()) {
      unknown.push_back(key);
      continue;
    }
    try {
      it->second(c, value);
    } catch (const std::exception& e) {
      bad.push_back(key);
      why += "\n  " + key + ": " + e.what();
    }
  }
  if (!unknown.empty()) {
    std::string msg = "unknown configuration key(s):";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg, unknown);
  }
  if (!bad.empty()) throw ConfigError("invalid configuration:" + why, bad);
  check_values(c);
  return c;
}

ExperimentConfig load_config(const fs::path& path, const std::string& default_experiment) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string(), {"--config"});
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j, default_experiment);
}

json to_json(const ExperimentConfig& c) {
  json j = {{"experiment", c.experiment},
            {"dataset", c.dataset},
            {"subset_size", c.subset_size},
            {"variant", c.variant},
            {"stop_grad", c.stop_grad},
            {"d_z", c.d_z},
            {"d_w", c.d_w},
            {"beta", c.beta},
            {"vocab_size", c.vocab_size},
            {"message_len", c.message_len},
            {"tau", c.tau},
            {"tau_decay", c.tau_decay},
            {"tau_min", c.tau_min},
            {"lr", c.lr},
            {"weight_decay", c.weight_decay},
            {"lr_step", c.lr_step},
            {"lr_gamma", c.lr_gamma},
            {"lr_floor", c.lr_floor},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"view_policy", c.view_policy},
            {"holdout_fraction", c.holdout_fraction},
            {"checkpoint_every", c.checkpoint_every},
            {"topsim_every", c.topsim_every},
            {"probe_epochs", c.probe_epochs},
            {"top_k", c.top_k},
            {"n_permutations", c.n_permutations},
            {"data_root", c.data_root},
            {"out_dir", c.out_dir},
            {"checkpoint_dir", c.checkpoint_dir},
            {"trace_path", c.trace_path},
            {"report_path", c.report_path}};
  if (c.seed) j["seed"] = *c.seed;
  return j;
}

std::string config_hash(const ExperimentConfig& c) {
  auto j = to_json(c);
  // Output locations do not change what is computed.
  for (const char* k : {"data_root", "out_dir", "checkpoint_dir", "trace_path", "report_path"}) j.erase(k);
  const auto s = j.dump();
  return data::sha256_bytes(s.data(), s.size()).substr(0, 16);
}

void finalize(ExperimentConfig& c) {
  if (const char* env = std::getenv("SSNG_DATA_ROOT"); env && *env) c.data_root = env;
  c.seed_value();
  std::error_code ec;
  fs::create_directories(c.out(), ec);
  const auto probe = c.out() / ".write_test";
  {
    std::ofstream t(probe);
    if (!t) throw ConfigError("output directory " + c.out_dir + " is not writable", {"out_dir"});
  }
  fs::remove(probe, ec);
}

}  // namespace ssng::runner
