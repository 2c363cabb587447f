#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ssng/data.hpp"
#include "ssng/ssl_model.hpp"

namespace ssng::ssl {

struct StepSchedule {
  double lr = 1e-3;
  int64_t step_epochs = 10;
  double gamma = 0.5;
  double floor = 1e-6;

  // Learning rate for a 0-based epoch.
  double at(int64_t epoch) const;
};

struct SslTrainConfig {
  int64_t epochs = 500;
  int64_t batch_size = 128;
  StepSchedule schedule{};
  double weight_decay = 1e-5;
  SslLossConfig loss{};
  data::AugmentConfig augment{};
  uint64_t seed = 0;
  // Number of per-epoch representations kept for the collapse metric.
  int64_t collapse_sample = 2048;
  int64_t checkpoint_every = 50;        // 0 = final only
  std::filesystem::path checkpoint_dir;  // empty = no checkpoints
  std::string config_json;               // stored in checkpoints
  std::string config_hash;
};

struct SslEpochMetrics {
  int64_t epoch = 0;  // 1-based
  double loss = 0.0;
  double align = 0.0;
  double kl = 0.0;
  double collapse_mean = 0.0;
  double collapse_min = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

using SslEpochCallback = std::function<void(const SslEpochMetrics&)>;

// Minibatch Adam over augmented pairs. Throws TrainingError on a non-finite
// loss, naming the epoch, batch and loss components.
std::vector<SslEpochMetrics> train_ssl(SslModel& model, const data::ImageDataset& ds,
                                       const SslTrainConfig& cfg,
                                       const SslEpochCallback& on_epoch = {});

std::filesystem::path ssl_checkpoint_path(const std::filesystem::path& dir, int64_t epoch);

}  // namespace ssng::ssl
