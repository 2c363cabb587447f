#include "ssng/ssl_train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "ssng/checkpoint.hpp"
#include "ssng/errors.hpp"
#include "ssng/eval.hpp"
#include "ssng/kernels.hpp"

namespace ssng::ssl {

double StepSchedule::at(int64_t epoch) const {
  const auto steps = step_epochs > 0 ? epoch / step_epochs : 0;
  return std::max(floor, lr * std::pow(gamma, static_cast<double>(steps)));
}

std::filesystem::path ssl_checkpoint_path(const std::filesystem::path& dir, int64_t epoch) {
  char name[32];
  std::snprintf(name, sizeof name, "ssl_epoch_%04lld.ckpt", static_cast<long long>(epoch));
  return dir / name;
}

namespace {

void save_checkpoint(SslModel& model, torch::optim::Adam& opt, const SslTrainConfig& cfg,
                     int64_t epoch, bool final) {
  io::Checkpoint ckpt;
  ckpt.epoch = epoch;
  ckpt.config_hash = cfg.config_hash;
  ckpt.config_json = cfg.config_json;
  io::put_module(ckpt, "model", *model);
  io::put_adam(ckpt, "optim", opt);
  ckpt.save(ssl_checkpoint_path(cfg.checkpoint_dir, epoch));
  if (final) ckpt.save(cfg.checkpoint_dir / "ssl_final.ckpt");
}

void set_lr(torch::optim::Adam& opt, double lr) {
  for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
}

}  // namespace

std::vector<SslEpochMetrics> train_ssl(SslModel& model, const data::ImageDataset& ds,
                                       const SslTrainConfig& cfg, const SslEpochCallback& on_epoch) {
  cfg.loss.validate();
  if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0", {"epochs"});
  if (cfg.batch_size < 2) throw ConfigError("batch_size must be >= 2 (batch normalization)", {"batch_size"});
  if (ds.size() < 2) throw ConfigError("dataset needs at least two items");

  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(cfg.schedule.lr)
                                                  .weight_decay(cfg.weight_decay));
  std::vector<int64_t> positions(static_cast<size_t>(ds.size()));
  std::iota(positions.begin(), positions.end(), 0);

  std::vector<SslEpochMetrics> log;
  model->train();
  for (int64_t e = 0; e < cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cfg.schedule.at(e);
    set_lr(opt, lr);
    double sum_loss = 0.0, sum_align = 0.0, sum_kl = 0.0;
    int64_t n_batches = 0;
    std::vector<torch::Tensor> kept;
    int64_t n_kept = 0;

    const auto batches = data::make_batches(positions, cfg.batch_size, cfg.seed, static_cast<uint64_t>(e));
    for (size_t b = 0; b < batches.size(); ++b) {
      if (batches[b].size() < 2) continue;
      auto pair = data::make_augmented_batch(ds, batches[b], cfg.augment, cfg.seed, static_cast<uint64_t>(e));
      auto gen = kernels::make_generator(derive_seed(cfg.seed, {static_cast<uint64_t>(e), b, 0x55a}));
      BranchOutput out_a, out_b;
      LossBreakdown loss;
      try {
        out_a = model->forward_branch(pair.xA, gen);
        out_b = model->forward_branch(pair.xB, gen);
        loss = simsiamvae_loss(out_a, out_b, cfg.loss);
      } catch (const DomainError& err) {
        throw TrainingError(std::string(err.what()) + " at epoch " + std::to_string(e + 1) + " batch " +
                            std::to_string(b));
      }
      const double total = loss.total.item<double>();
      if (!std::isfinite(total)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(e + 1) + " batch " +
                            std::to_string(b) + " (align=" + std::to_string(loss.align) +
                            ", kl=" + std::to_string(loss.kl) + ")");
      }
      opt.zero_grad();
      loss.total.backward();
      opt.step();

      sum_loss += total;
      sum_align += loss.align;
      sum_kl += loss.kl;
      ++n_batches;
      if (n_kept < cfg.collapse_sample) {
        kept.push_back(out_a.z.detach());
        n_kept += out_a.z.size(0);
      }
    }

    SslEpochMetrics m;
    m.epoch = e + 1;
    m.lr = lr;
    if (n_batches > 0) {
      m.loss = sum_loss / static_cast<double>(n_batches);
      m.align = sum_align / static_cast<double>(n_batches);
      m.kl = sum_kl / static_cast<double>(n_batches);
    }
    if (!kept.empty()) {
      auto reps = torch::cat(kept);
      if (reps.size(0) >= 2 && (reps.norm(2, 1) > 0).all().item<bool>()) {
        const auto c = eval::collapse_metric(reps);
        m.collapse_mean = c.mean_std;
        m.collapse_min = c.min_std;
      }
    }
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(m);
    if (on_epoch) on_epoch(m);

    const bool last = e + 1 == cfg.epochs;
    const bool periodic = cfg.checkpoint_every > 0 && (e + 1) % cfg.checkpoint_every == 0;
    if (!cfg.checkpoint_dir.empty() && (last || periodic)) save_checkpoint(model, opt, cfg, e + 1, last);
  }
  return log;
}

}  // namespace ssng::ssl
