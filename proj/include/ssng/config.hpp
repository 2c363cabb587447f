#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "ssng/game.hpp"
#include "ssng/ssl_model.hpp"
#include "ssng/ssl_train.hpp"

namespace ssng::runner {

// Flat experiment configuration. Every key is optional except `seed`; keys
// left out take the defaults of the chosen experiment (ssl or ssng).
struct ExperimentConfig {
  std::string experiment = "ssl";  // ssl | ssng | probe | topsim | report
  std::string dataset = "fashionmnist";
  int64_t subset_size = 0;
  std::string variant = "simsiam_vae";
  bool stop_grad = true;
  int64_t d_z = 0;  // 0 = dataset default
  int64_t d_w = 0;
  double beta = 1.0;
  int64_t vocab_size = 100;
  int64_t message_len = 10;
  double tau = 1.0;
  double tau_decay = 1.0;
  double tau_min = 0.1;
  double lr = 1e-3;
  double weight_decay = 1e-5;
  int64_t lr_step = 10;
  double lr_gamma = 0.5;
  double lr_floor = 1e-6;
  int64_t epochs = 500;
  int64_t batch_size = 128;
  std::optional<uint64_t> seed;
  std::string view_policy = "factor_jitter";
  double holdout_fraction = 0.1;
  int64_t checkpoint_every = 50;
  int64_t topsim_every = 0;
  int64_t probe_epochs = 100;
  int64_t top_k = 0;  // 0 = 1 for fashionmnist, 2 for cifar10
  int64_t n_permutations = 1000;
  std::string data_root = "data";
  std::string out_dir = "runs/default";
  std::string checkpoint_dir;  // default <out_dir>/checkpoints
  std::string trace_path;      // default <out_dir>/trace.jsonl
  std::string report_path;     // default <out_dir>/report.json

  static ExperimentConfig defaults_for(const std::string& experiment);

  uint64_t seed_value() const;
  std::filesystem::path out() const { return out_dir; }
  std::filesystem::path checkpoints() const;
  std::filesystem::path trace() const;
  std::filesystem::path report() const;

  ssl::SslModelConfig ssl_model() const;
  ssl::SslTrainConfig ssl_train() const;
  game::GameConfig game() const;
  int64_t probe_top_k() const;
};

// Rejects unknown keys and ill-typed values with ConfigError naming the keys.
// The `experiment` key, when present, selects the defaults.
ExperimentConfig parse_config(const nlohmann::json& j, const std::string& default_experiment);
ExperimentConfig load_config(const std::filesystem::path& path, const std::string& default_experiment);
nlohmann::json to_json(const ExperimentConfig& c);
// First 16 hex digits of sha256 over the canonical JSON dump.
std::string config_hash(const ExperimentConfig& c);
// Applies SSNG_DATA_ROOT and fills derived paths; checks the output directory is writable.
void finalize(ExperimentConfig& c);

}  // namespace ssng::runner
