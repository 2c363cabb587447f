#include "ssng/runner.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "ssng/checkpoint.hpp"
#include "ssng/errors.hpp"
#include "ssng/eval.hpp"
#include "ssng/game.hpp"
#include "ssng/plots.hpp"
#include "ssng/ssl_train.hpp"
#include "ssng/trace.hpp"

#ifndef SSNG_VERSION
#define SSNG_VERSION "0.0.0"
#endif
#ifndef SSNG_GIT_DESCRIBE
#define SSNG_GIT_DESCRIBE "unknown"
#endif

namespace ssng::runner {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

std::string code_version() { return std::string(SSNG_VERSION) + "+" + SSNG_GIT_DESCRIBE; }

namespace {

std::string utc_now() {
  const auto t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("cannot write " + path.string());
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

json probe_json(const eval::ProbeResult& r) { return {{"top_k", r.top_k}, {"accuracy", r.accuracy}, {"n_test", r.n_test}}; }

json topsim_json(const eval::TopSimResult& r) {
  return {{"rho", r.rho},
          {"n_pairs", r.n_pairs},
          {"null_mean", r.null_mean},
          {"null_std", r.null_std},
          {"degenerate", r.degenerate}};
}

void prepare_torch(uint64_t seed) {
  at::set_num_threads(1);
  torch::manual_seed(seed);
}

// Config for commands that start from a checkpoint: explicit --config wins,
// otherwise the snapshot stored in the checkpoint.
ExperimentConfig config_for_checkpoint(const std::string& config_path, const io::Checkpoint& ckpt,
                                       const std::string& experiment) {
  if (!config_path.empty()) return load_config(config_path, experiment);
  if (ckpt.config_json.empty()) throw ConfigError("checkpoint carries no config; pass --config", {"--config"});
  return parse_config(json::parse(ckpt.config_json), experiment);
}

struct Common {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out_dir;
};

void apply_overrides(ExperimentConfig& cfg, const Common& c) {
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  finalize(cfg);
}

// ---------------------------------------------------------------------------

int cmd_train_ssl(const Common& common) {
  const auto t0 = Clock::now();
  auto cfg = load_config(common.config, "ssl");
  apply_overrides(cfg, common);
  prepare_torch(cfg.seed_value());
  const auto ds = data::load_dataset(cfg.dataset, cfg.data_root, {cfg.subset_size, cfg.seed_value()});
  ssl::SslModel model(cfg.ssl_model());
  auto tcfg = cfg.ssl_train();

  const auto metrics_path = cfg.out() / "metrics.jsonl";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + metrics_path.string());
  auto log = ssl::train_ssl(model, ds.train, tcfg, [&](const ssl::SslEpochMetrics& m) {
    metrics << json{{"epoch", m.epoch},       {"loss", m.loss},
                    {"align", m.align},       {"kl", m.kl},
                    {"collapse_mean", m.collapse_mean}, {"collapse_min", m.collapse_min},
                    {"lr", m.lr}}
                   .dump()
            << '\n';
    metrics.flush();
    std::cout << "epoch " << m.epoch << " loss " << m.loss << " align " << m.align << " kl " << m.kl
              << " collapse " << m.collapse_mean << " (" << m.seconds << " s)\n";
  });
  write_manifest(cfg.out() / "manifest.json", "train-ssl", cfg, &ds, seconds_since(t0),
                 {{"metrics", metrics_path.string()},
                  {"checkpoint", (cfg.checkpoints() / "ssl_final.ckpt").string()}});
  std::cout << "trained " << log.size() << " epochs; checkpoint in " << cfg.checkpoints().string() << "\n";
  return kExitOk;
}

int cmd_probe(const Common& common, const std::string& checkpoint, bool collapse_only) {
  const auto t0 = Clock::now();
  const auto ckpt = io::Checkpoint::load(checkpoint);
  auto cfg = config_for_checkpoint(common.config, ckpt, collapse_only ? "report" : "probe");
  apply_overrides(cfg, common);
  prepare_torch(cfg.seed_value());
  const auto ds = data::load_dataset(cfg.dataset, cfg.data_root, {cfg.subset_size, cfg.seed_value()});
  ssl::SslModel model(cfg.ssl_model());
  io::load_module(ckpt, "model", *model);

  const auto& test = ds.test ? *ds.test : ds.train;
  auto test_reps = eval::encode_dataset(model->encoder(), test);
  json outputs = {{"report", cfg.report().string()}};
  if (collapse_only) {
    const auto c = eval::collapse_metric(test_reps);
    merge_report(cfg.report(), "collapse",
                 {{"mean_std", c.mean_std}, {"min_std", c.min_std}, {"n", test_reps.size(0)},
                  {"reference_uniform", 1.0 / std::sqrt(static_cast<double>(test_reps.size(1)))}});
    std::cout << "collapse mean_std " << c.mean_std << " min_std " << c.min_std << "\n";
  } else {
    if (!ds.test || !ds.train.has_labels()) throw ConfigError("probe needs a labelled dataset with a test split", {"dataset"});
    auto train_reps = eval::encode_dataset(model->encoder(), ds.train);
    eval::ProbeConfig pc;
    pc.epochs = cfg.probe_epochs;
    pc.seed = cfg.seed_value();
    const auto r = eval::linear_probe(train_reps, ds.train.labels, test_reps, test.labels, cfg.probe_top_k(), pc);
    merge_report(cfg.report(), "probe", probe_json(r));
    std::cout << "top-" << r.top_k << " accuracy " << r.accuracy << " on " << r.n_test << " test images\n";
  }
  write_manifest(cfg.out() / (collapse_only ? "manifest_collapse.json" : "manifest_probe.json"),
                 collapse_only ? "collapse-report" : "probe", cfg, &ds, seconds_since(t0), outputs);
  return kExitOk;
}

struct GameSetup {
  data::LoadedDataset ds;
  data::Split split;
  game::GameConfig gcfg;
  game::AgentState a, b;
};

GameSetup make_game(const ExperimentConfig& cfg) {
  prepare_torch(cfg.seed_value());
  auto ds = data::load_dataset(cfg.dataset, cfg.data_root, {cfg.subset_size, cfg.seed_value()});
  if (!ds.train.has_factors()) throw ConfigError("the naming game needs a dSprites dataset", {"dataset"});
  auto split = data::split_unseen(ds.train, {cfg.holdout_fraction, cfg.seed_value()});
  auto gcfg = cfg.game();
  gcfg.input_dim = ds.train.channels() * ds.train.height() * ds.train.width();
  gcfg.backbone_dims.front() = gcfg.input_dim;
  game::AgentState a(game::AgentId::A, gcfg, derive_seed(cfg.seed_value(), {0xA}));
  game::AgentState b(game::AgentId::B, gcfg, derive_seed(cfg.seed_value(), {0xB}));
  return {std::move(ds), std::move(split), gcfg, std::move(a), std::move(b)};
}

json split_json(const data::Split& s) {
  json held = json::array();
  for (const auto& [sh, sc] : s.held_out) held.push_back({sh, sc});
  return {{"rule", "hold out (shape, scale) combinations"}, {"held_out", held},
          {"n_train", s.train.size()}, {"n_eval", s.eval.size()}};
}

eval::TopSimResult agent_topsim(game::AgentState& agent, const data::ImageDataset& ds,
                                const std::vector<int64_t>& positions, int64_t n_perm, uint64_t seed) {
  auto msgs = game::messages_for(agent, ds, positions);
  auto idx = torch::tensor(positions, torch::kInt64);
  return eval::topsim(ds.factors.index_select(0, idx), msgs, {n_perm, 1'000'000, seed});
}

int cmd_train_ssng(const Common& common) {
  const auto t0 = Clock::now();
  auto cfg = load_config(common.config, "ssng");
  apply_overrides(cfg, common);
  auto g = make_game(cfg);

  const auto metrics_path = cfg.out() / "metrics.jsonl";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + metrics_path.string());
  game::TrainGameOptions opts;
  opts.trace_path = cfg.trace();
  opts.checkpoint_dir = cfg.checkpoints();
  opts.checkpoint_every = cfg.checkpoint_every;
  opts.config_json = to_json(cfg).dump();
  opts.config_hash = config_hash(cfg);
  opts.on_epoch = [&](const game::GameEpochMetrics& m) {
    json line = {{"epoch", m.epoch},     {"align_a", m.align_a}, {"kl_a", m.kl_a},   {"total_a", m.total_a},
                 {"align_b", m.align_b}, {"kl_b", m.kl_b},       {"total_b", m.total_b}, {"tau", m.tau},
                 {"lr", m.lr}};
    if (cfg.topsim_every > 0 && m.epoch % cfg.topsim_every == 0) {
      line["topsim_A"] = agent_topsim(g.a, g.ds.train, g.split.eval, 0, cfg.seed_value()).rho;
      line["topsim_B"] = agent_topsim(g.b, g.ds.train, g.split.eval, 0, cfg.seed_value()).rho;
    }
    metrics << line.dump() << '\n';
    metrics.flush();
    std::cout << "epoch " << m.epoch << " align A " << m.align_a << " B " << m.align_b << " kl A " << m.kl_a
              << " B " << m.kl_b << " (" << m.seconds << " s)\n";
  };
  game::train_ssng(g.a, g.b, g.ds.train, g.split.train, g.gcfg, opts);

  const auto ta = agent_topsim(g.a, g.ds.train, g.split.eval, cfg.n_permutations, cfg.seed_value());
  const auto tb = agent_topsim(g.b, g.ds.train, g.split.eval, cfg.n_permutations, cfg.seed_value());
  merge_report(cfg.report(), "topsim", {{"A", topsim_json(ta)}, {"B", topsim_json(tb)}});
  merge_report(cfg.report(), "split", split_json(g.split));
  write_manifest(cfg.out() / "manifest.json", "train-ssng", cfg, &g.ds, seconds_since(t0),
                 {{"metrics", metrics_path.string()},
                  {"trace", cfg.trace().string()},
                  {"checkpoint", (cfg.checkpoints() / "ssng_final.ckpt").string()},
                  {"report", cfg.report().string()}});
  std::cout << "topsim A " << ta.rho << " B " << tb.rho << " (null mean " << ta.null_mean << ")\n";
  return kExitOk;
}

int cmd_topsim(const Common& common, const std::string& checkpoint, const std::string& trace) {
  const auto t0 = Clock::now();
  if (checkpoint.empty() && trace.empty()) throw ConfigError("topsim needs --checkpoint and/or --trace", {"--checkpoint"});
  json report;
  std::optional<ExperimentConfig> cfg;
  std::optional<GameSetup> g;
  if (!checkpoint.empty()) {
    const auto ckpt = io::Checkpoint::load(checkpoint);
    cfg = config_for_checkpoint(common.config, ckpt, "topsim");
    apply_overrides(*cfg, common);
    g.emplace(make_game(*cfg));
    game::load_agents(checkpoint, g->a, g->b);
    const auto ta = agent_topsim(g->a, g->ds.train, g->split.eval, cfg->n_permutations, cfg->seed_value());
    const auto tb = agent_topsim(g->b, g->ds.train, g->split.eval, cfg->n_permutations, cfg->seed_value());
    report["topsim"] = {{"A", topsim_json(ta)}, {"B", topsim_json(tb)}};
  } else {
    cfg = load_config(common.config, "topsim");
    apply_overrides(*cfg, common);
  }
  if (!trace.empty()) {
    // Messages logged during the last epoch of the trace, per speaker.
    const auto records = game::read_trace(trace);
    int64_t last = 0;
    for (const auto& r : records) last = std::max(last, r.epoch);
    json by_agent;
    for (const char* who : {"A", "B"}) {
      std::vector<int64_t> f, m;
      int64_t n = 0, len = 0;
      for (const auto& r : records) {
        if (r.epoch != last || r.speaker != who || r.factors.size() != r.message.size()) continue;
        for (size_t i = 0; i < r.message.size(); ++i) {
          f.insert(f.end(), r.factors[i].begin(), r.factors[i].end());
          m.insert(m.end(), r.message[i].begin(), r.message[i].end());
          len = static_cast<int64_t>(r.message[i].size());
          ++n;
        }
      }
      if (n < 3) continue;
      auto ft = torch::tensor(f, torch::kInt64).view({n, 5});
      auto mt = torch::tensor(m, torch::kInt64).view({n, len});
      by_agent[who] = topsim_json(eval::topsim(ft, mt, {cfg->n_permutations, 1'000'000, cfg->seed_value()}));
    }
    report["topsim_trace"] = by_agent;
    report["topsim_trace_epoch"] = last;
    if (!report.contains("topsim")) report["topsim"] = by_agent;
  }
  for (const auto& [k, v] : report.items()) merge_report(cfg->report(), k, v);
  write_manifest(cfg->out() / "manifest_topsim.json", "topsim", *cfg, g ? &g->ds : nullptr, seconds_since(t0),
                 {{"report", cfg->report().string()}});
  std::cout << report["topsim"].dump() << "\n";
  return kExitOk;
}

int cmd_plot(const std::string& metrics, const std::string& report, const std::string& out_dir) {
  const auto summary = emit_plots(metrics, report, out_dir);
  json j = {{"written", json::array()}, {"skipped", json::array()}};
  for (const auto& p : summary.written) {
    j["written"].push_back(p.string());
    std::cout << "wrote " << p.string() << "\n";
  }
  for (const auto& [what, why] : summary.skipped) {
    j["skipped"].push_back({{"item", what}, {"reason", why}});
    std::cout << "skipped " << what << ": " << why << "\n";
  }
  try {
    write_json(fs::path(out_dir) / "plots_summary.json", j);
  } catch (const std::exception& e) {
    std::cout << "skipped plots_summary.json: " << e.what() << "\n";
  }
  return kExitOk;
}

}  // namespace

void write_manifest(const fs::path& path, const std::string& command, const ExperimentConfig& cfg,
                    const data::LoadedDataset* dataset, double wall_seconds, const json& outputs) {
  json ds = nullptr;
  if (dataset) {
    json sums = json::array();
    for (const auto& c : dataset->checksums) sums.push_back({{"path", c.path}, {"sha256", c.sha256}});
    ds = {{"name", data::to_string(dataset->kind)},
          {"provenance", dataset->provenance},
          {"train_size", dataset->train.size()},
          {"test_size", dataset->test ? dataset->test->size() : 0},
          {"checksums", sums}};
  }
  write_json(path, {{"command", command},
                    {"config", to_json(cfg)},
                    {"config_hash", config_hash(cfg)},
                    {"seed", cfg.seed_value()},
                    {"code_version", code_version()},
                    {"torch_version", TORCH_VERSION},
                    {"dataset", ds},
                    {"finished_at", utc_now()},
                    {"wall_clock_seconds", wall_seconds},
                    {"outputs", outputs}});
}

void merge_report(const fs::path& path, const std::string& key, const json& value) {
  json report = json::object();
  if (std::ifstream in(path); in) {
    try {
      report = json::parse(in);
    } catch (const json::exception&) {
      report = json::object();
    }
  }
  report[key] = value;
  write_json(path, report);
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

int run(int argc, const char* const* argv) {
  CLI::App app{"SimSiam+VAE and SimSiam naming game experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", code_version());

  Common common;
  std::string checkpoint, trace, metrics, report, plot_dir;
  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", common.config, "JSON config file");
    if (config_required) opt->required();
    sub->add_option("--seed", common.seed, "override the config seed");
    sub->add_option("--out-dir", common.out_dir, "override the config out_dir");
  };
  auto* train_ssl = app.add_subcommand("train-ssl", "train SimSiam+VAE or a baseline");
  add_common(train_ssl, true);
  auto* train_ssng = app.add_subcommand("train-ssng", "play the two-agent naming game");
  add_common(train_ssng, true);
  auto* probe = app.add_subcommand("probe", "linear probe on frozen representations");
  add_common(probe, false);
  probe->add_option("--checkpoint", checkpoint, "SSL checkpoint")->required();
  auto* topsim = app.add_subcommand("topsim", "TopSim of both agents on the unseen split");
  add_common(topsim, false);
  topsim->add_option("--checkpoint", checkpoint, "naming-game checkpoint");
  topsim->add_option("--trace", trace, "JSONL trace");
  auto* collapse = app.add_subcommand("collapse-report", "per-dimension std of normalized z");
  add_common(collapse, false);
  collapse->add_option("--checkpoint", checkpoint, "SSL checkpoint")->required();
  auto* plot = app.add_subcommand("plot", "render SVG curves from metrics and report");
  plot->add_option("--metrics", metrics, "metrics JSONL")->required();
  plot->add_option("--report", report, "report JSON");
  plot->add_option("--out-dir", plot_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train_ssl->parsed()) return cmd_train_ssl(common);
    if (train_ssng->parsed()) return cmd_train_ssng(common);
    if (probe->parsed()) return cmd_probe(common, checkpoint, false);
    if (collapse->parsed()) return cmd_probe(common, checkpoint, true);
    if (topsim->parsed()) return cmd_topsim(common, checkpoint, trace);
    if (plot->parsed()) return cmd_plot(metrics, report, plot_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    for (const auto& f : e.fields()) std::cerr << "  field: " << f << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    if (!e.hint().empty()) std::cerr << "  hint: " << e.hint() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}

}  // namespace ssng::runner
