#include "ssng/game.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "ssng/checkpoint.hpp"
#include "ssng/errors.hpp"
#include "ssng/kernels.hpp"
#include "ssng/trace.hpp"

namespace ssng::game {

namespace nn = torch::nn;

std::string to_string(AgentId id) { return id == AgentId::A ? "A" : "B"; }

AgentId parse_agent_id(const std::string& s) {
  if (s == "A") return AgentId::A;
  if (s == "B") return AgentId::B;
  throw ConfigError("agent id must be A or B, got '" + s + "'");
}

void GameConfig::validate() const {
  std::vector<std::string> bad;
  if (vocab_size < 2) bad.push_back("vocab_size");
  if (message_len < 1) bad.push_back("message_len");
  if (!(tau > 0.0) || !std::isfinite(tau)) bad.push_back("tau");
  if (!(tau_decay > 0.0) || !(tau_min > 0.0)) bad.push_back("tau_decay");
  if (!std::isfinite(beta) || beta < 0.0) bad.push_back("beta");
  if (epochs < 0) bad.push_back("epochs");
  if (batch_size < 2) bad.push_back("batch_size");
  if (!(schedule.lr > 0.0)) bad.push_back("lr");
  if (backbone_dims.size() < 2 || backbone_dims.front() != input_dim) bad.push_back("input_dim");
  if (d_z < 1 || embed_dim < 1) bad.push_back("d_z");
  if (!bad.empty()) {
    std::string msg = "invalid game config:";
    for (const auto& f : bad) msg += " " + f;
    throw ConfigError(msg, bad);
  }
}

double GameConfig::tau_at(int64_t epoch) const {
  return std::max(tau_min, tau * std::pow(tau_decay, static_cast<double>(epoch)));
}

void MessageBatch::validate(int64_t vocab, int64_t length) const {
  if (!tokens.defined() || tokens.dim() != 2 || tokens.scalar_type() != torch::kInt64) {
    throw DomainError("message tokens must be an int64 (B, L) tensor");
  }
  if (tokens.size(1) != length) {
    throw DomainError("message length " + std::to_string(tokens.size(1)) + " != " + std::to_string(length));
  }
  if (tokens.numel() > 0 && (tokens.min().item<int64_t>() < 0 || tokens.max().item<int64_t>() >= vocab)) {
    throw DomainError("message token outside [0, " + std::to_string(vocab) + ")");
  }
}

AgentNetImpl::AgentNetImpl(const GameConfig& cfg)
    : vocab_(cfg.vocab_size), len_(cfg.message_len), d_z_(cfg.d_z) {
  ssl::EncoderConfig ec;
  ec.backbone = ssl::BackboneKind::Mlp;
  ec.mlp_dims = cfg.backbone_dims;
  ec.d_z = cfg.d_z;
  ec.projector_hidden = cfg.projector_hidden;
  ec.projector_bn_last = false;
  perception_ = register_module("perception", ssl::EncoderStack(ec));
  embed_ = register_module("embed", nn::Embedding(cfg.vocab_size, cfg.embed_dim));
  sos_ = register_parameter("sos", torch::randn({cfg.embed_dim}) * 0.1);
  enc_cell_ = register_module("enc_cell", nn::LSTMCell(cfg.embed_dim, cfg.d_z));
  enc_out_ = register_module("enc_out", nn::Linear(cfg.d_z, cfg.vocab_size));
  dec_cell_ = register_module("dec_cell", nn::LSTMCell(cfg.embed_dim, cfg.d_z));
}

torch::Tensor AgentNetImpl::perceive(const torch::Tensor& x) { return perception_->forward(x); }

EncodeOutput AgentNetImpl::encode(const torch::Tensor& z, double tau, at::Generator& gen, Decoding mode) {
  const auto bsz = z.size(0);
  auto h = z;
  auto c = torch::zeros_like(z);
  auto input = sos_.unsqueeze(0).expand({bsz, -1});
  std::vector<torch::Tensor> logits, hard, tokens;
  for (int64_t t = 0; t < len_; ++t) {
    std::tie(h, c) = enc_cell_(input, std::make_tuple(h, c));
    auto lt = enc_out_(h);
    torch::Tensor onehot, tok;
    if (mode == Decoding::Greedy) {
      tok = lt.argmax(-1);
      onehot = torch::one_hot(tok, vocab_).to(lt.scalar_type());
    } else {
      auto s = kernels::sample_gumbel_softmax_st({lt}, tau, gen);
      onehot = s.hard;
      tok = s.tokens;
    }
    input = torch::matmul(onehot, embed_->weight);
    logits.push_back(lt);
    hard.push_back(onehot);
    tokens.push_back(tok);
  }
  return {torch::stack(logits, 1), torch::stack(hard, 1), torch::stack(tokens, 1)};
}

torch::Tensor AgentNetImpl::decode_onehot(const torch::Tensor& onehot) {
  auto emb = torch::matmul(onehot, embed_->weight);
  const auto bsz = onehot.size(0);
  auto h = torch::zeros({bsz, d_z_}, emb.options());
  auto c = torch::zeros_like(h);
  for (int64_t t = 0; t < onehot.size(1); ++t) std::tie(h, c) = dec_cell_(emb.select(1, t), std::make_tuple(h, c));
  return h;
}

torch::Tensor AgentNetImpl::decode(const MessageBatch& msg) {
  msg.validate(vocab_, len_);
  return decode_onehot(torch::one_hot(msg.tokens, vocab_).to(torch::kFloat32));
}

AgentState::AgentState(AgentId id_, const GameConfig& cfg, uint64_t init_seed) : id(id_), net(nullptr) {
  cfg.validate();
  torch::manual_seed(init_seed);
  net = AgentNet(cfg);
  optimizer = std::make_unique<torch::optim::Adam>(net->parameters(),
                                                   torch::optim::AdamOptions(cfg.schedule.lr));
}

SpeakOutput speak(AgentState& speaker, const torch::Tensor& x, double tau, at::Generator& gen, Decoding mode) {
  torch::NoGradGuard ng;
  const bool was_training = speaker.net->is_training();
  speaker.net->eval();
  auto z = speaker.net->perceive(x);
  auto out = speaker.net->encode(z, tau, gen, mode);
  speaker.net->train(was_training);
  return {MessageBatch{out.tokens}, out.logits};
}

torch::Tensor listen_decode(AgentState& listener, const MessageBatch& msg) {
  torch::NoGradGuard ng;
  const bool was_training = listener.net->is_training();
  listener.net->eval();
  auto zp = listener.net->decode(msg);
  listener.net->train(was_training);
  return zp;
}

torch::Tensor listener_objective(const torch::Tensor& z_li, const torch::Tensor& z_sp,
                                 const torch::Tensor& logits_li, double beta, LossComponents* parts) {
  auto align = kernels::neg_cosine(z_li, z_sp);
  auto kl = kernels::categorical_kl_uniform({logits_li});
  auto total = align + beta * kl;
  if (parts) *parts = {align.item<double>(), kl.item<double>(), total.item<double>()};
  return total;
}

LossComponents listener_step(AgentState& listener, const MessageBatch& w_sp, const torch::Tensor& x_li,
                             const GameConfig& cfg, double tau, at::Generator& gen) {
  w_sp.validate(cfg.vocab_size, cfg.message_len);
  if (w_sp.batch() != x_li.size(0)) throw ConfigError("message batch and observation batch differ");
  auto& net = listener.net;
  net->train();
  auto z_li = net->perceive(x_li);
  auto li_msg = net->encode(z_li, tau, gen);
  auto z_sp = net->decode(w_sp);
  LossComponents out;
  auto total = listener_objective(z_li, z_sp, li_msg.logits, cfg.beta, &out);
  if (!std::isfinite(out.total)) {
    throw TrainingError("non-finite listener loss for agent " + to_string(listener.id) +
                        " (align=" + std::to_string(out.align) + ", kl=" + std::to_string(out.kl) + ")");
  }
  listener.optimizer->zero_grad();
  total.backward();
  listener.optimizer->step();
  return out;
}

namespace {

CommTraceRecord make_record(const RoundInput& in, AgentId sp, AgentId li, const MessageBatch& msg,
                            const LossComponents& loss) {
  CommTraceRecord r;
  r.epoch = in.epoch;
  r.batch = in.batch;
  r.speaker = to_string(sp);
  r.listener = to_string(li);
  auto obj = in.object_index.to(torch::kInt64).contiguous();
  r.object_index.assign(obj.data_ptr<int64_t>(), obj.data_ptr<int64_t>() + obj.numel());
  if (in.factors.defined()) {
    auto f = in.factors.to(torch::kInt64).contiguous();
    const auto* p = f.data_ptr<int64_t>();
    for (int64_t i = 0; i < f.size(0); ++i) {
      std::array<int64_t, 5> row{};
      for (int64_t k = 0; k < 5 && k < f.size(1); ++k) row[k] = p[i * f.size(1) + k];
      r.factors.push_back(row);
    }
  }
  auto tok = msg.tokens.contiguous();
  const auto* tp = tok.data_ptr<int64_t>();
  for (int64_t i = 0; i < tok.size(0); ++i) r.message.emplace_back(tp + i * tok.size(1), tp + (i + 1) * tok.size(1));
  r.loss_align = loss.align;
  r.loss_kl = loss.kl;
  r.loss_total = loss.total;
  return r;
}

CommTraceRecord ssng_turn(AgentState& sp, AgentState& li, const torch::Tensor& x_sp, const torch::Tensor& x_li,
                          const RoundInput& in, const GameConfig& cfg, double tau, at::Generator& gen) {
  auto said = speak(sp, x_sp, tau, gen);
  auto loss = listener_step(li, said.message, x_li, cfg, tau, gen);
  return make_record(in, sp.id, li.id, said.message, loss);
}

}  // namespace

std::vector<CommTraceRecord> play_round(AgentState& a, AgentState& b, const RoundInput& in,
                                        const GameConfig& cfg, double tau, at::Generator& gen) {
  std::vector<CommTraceRecord> out;
  out.push_back(ssng_turn(b, a, in.xB, in.xA, in, cfg, tau, gen));
  out.push_back(ssng_turn(a, b, in.xA, in.xB, in, cfg, tau, gen));
  return out;
}

std::filesystem::path game_checkpoint_path(const std::filesystem::path& dir, int64_t epoch) {
  char name[32];
  std::snprintf(name, sizeof name, "ssng_epoch_%04lld.ckpt", static_cast<long long>(epoch));
  return dir / name;
}

void save_agents(const std::filesystem::path& path, AgentState& a, AgentState& b, int64_t epoch,
                 const std::string& config_json, const std::string& config_hash) {
  io::Checkpoint ckpt;
  ckpt.epoch = epoch;
  ckpt.config_json = config_json;
  ckpt.config_hash = config_hash;
  io::put_module(ckpt, "A", *a.net);
  io::put_adam(ckpt, "A/optim", *a.optimizer);
  io::put_module(ckpt, "B", *b.net);
  io::put_adam(ckpt, "B/optim", *b.optimizer);
  ckpt.save(path);
}

int64_t load_agents(const std::filesystem::path& path, AgentState& a, AgentState& b) {
  const auto ckpt = io::Checkpoint::load(path);
  io::load_module(ckpt, "A", *a.net);
  io::load_adam(ckpt, "A/optim", *a.optimizer);
  io::load_module(ckpt, "B", *b.net);
  io::load_adam(ckpt, "B/optim", *b.optimizer);
  return ckpt.epoch;
}

std::vector<GameEpochMetrics> train_ssng(AgentState& a, AgentState& b, const data::ImageDataset& ds,
                                         const std::vector<int64_t>& positions, const GameConfig& cfg,
                                         const TrainGameOptions& opts) {
  cfg.validate();
  std::unique_ptr<TraceWriter> trace;
  if (!opts.trace_path.empty()) trace = std::make_unique<TraceWriter>(opts.trace_path, cfg.vocab_size, cfg.message_len);
  const data::AugmentConfig aug;

  std::vector<GameEpochMetrics> log;
  for (int64_t e = 0; e < cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    GameEpochMetrics m;
    m.epoch = e + 1;
    m.tau = cfg.tau_at(e);
    m.lr = cfg.schedule.at(e);
    for (auto* agent : {&a, &b}) {
      for (auto& g : agent->optimizer->param_groups()) {
        static_cast<torch::optim::AdamOptions&>(g.options()).lr(m.lr);
      }
    }
    int64_t n = 0;
    const auto batches = data::make_batches(positions, cfg.batch_size, cfg.seed, static_cast<uint64_t>(e));
    for (size_t bi = 0; bi < batches.size(); ++bi) {
      if (batches[bi].size() < 2) continue;
      auto pair = data::make_viewpoint_batch(ds, batches[bi], cfg.view_policy, aug, cfg.seed, static_cast<uint64_t>(e));
      RoundInput in{pair.xA, pair.xB, pair.object_index, pair.factors, e + 1, static_cast<int64_t>(bi)};
      auto gen = kernels::make_generator(derive_seed(cfg.seed, {static_cast<uint64_t>(e), bi, 0x6a3e}));
      std::vector<CommTraceRecord> recs;
      try {
        recs = play_round(a, b, in, cfg, m.tau, gen);
      } catch (const TrainingError& err) {
        if (trace) trace->flush();
        throw TrainingError(std::string(err.what()) + " at epoch " + std::to_string(e + 1) + " batch " +
                            std::to_string(bi));
      }
      m.align_a += recs[0].loss_align;
      m.kl_a += recs[0].loss_kl;
      m.total_a += recs[0].loss_total;
      m.align_b += recs[1].loss_align;
      m.kl_b += recs[1].loss_kl;
      m.total_b += recs[1].loss_total;
      ++n;
      if (trace) {
        for (const auto& r : recs) trace->write(r);
        trace->flush();
      }
    }
    if (n > 0) {
      const double inv = 1.0 / static_cast<double>(n);
      for (double* v : {&m.align_a, &m.kl_a, &m.total_a, &m.align_b, &m.kl_b, &m.total_b}) *v *= inv;
    }
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(m);
    if (opts.on_epoch) opts.on_epoch(m);

    const bool last = e + 1 == cfg.epochs;
    const bool periodic = opts.checkpoint_every > 0 && (e + 1) % opts.checkpoint_every == 0;
    if (!opts.checkpoint_dir.empty() && (last || periodic)) {
      save_agents(game_checkpoint_path(opts.checkpoint_dir, e + 1), a, b, e + 1, opts.config_json, opts.config_hash);
      if (last) save_agents(opts.checkpoint_dir / "ssng_final.ckpt", a, b, e + 1, opts.config_json, opts.config_hash);
    }
  }
  return log;
}

torch::Tensor messages_for(AgentState& agent, const data::ImageDataset& ds, const std::vector<int64_t>& positions,
                           int64_t batch_size) {
  std::vector<torch::Tensor> out;
  auto gen = kernels::make_generator(0);
  for (size_t s = 0; s < positions.size(); s += static_cast<size_t>(batch_size)) {
    const auto e = std::min(positions.size(), s + static_cast<size_t>(batch_size));
    std::vector<int64_t> idx(positions.begin() + static_cast<std::ptrdiff_t>(s),
                             positions.begin() + static_cast<std::ptrdiff_t>(e));
    out.push_back(speak(agent, ds.batch(idx), 1.0, gen, Decoding::Greedy).message.tokens);
  }
  if (out.empty()) return torch::empty({0, agent.net->message_len()}, torch::kInt64);
  return torch::cat(out);
}

}  // namespace ssng::game
