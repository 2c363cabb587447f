#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "ssng/data.hpp"
#include "ssng/ssl_model.hpp"
#include "ssng/ssl_train.hpp"

namespace ssng::game {

enum class AgentId { A, B };
std::string to_string(AgentId id);
AgentId parse_agent_id(const std::string& s);

struct GameConfig {
  int64_t vocab_size = 100;
  int64_t message_len = 10;
  double beta = 1.0;
  double tau = 1.0;
  double tau_decay = 1.0;  // per-epoch multiplicative annealing; 1 = fixed
  double tau_min = 0.1;
  int64_t epochs = 200;
  int64_t batch_size = 256;
  ssl::StepSchedule schedule{1e-5, 10, 0.5, 1e-6};
  int64_t embed_dim = 64;
  int64_t d_z = 256;
  int64_t input_dim = 4096;
  std::vector<int64_t> backbone_dims{4096, 512, 256, 128};
  int64_t projector_hidden = 256;
  data::ViewPolicy view_policy = data::ViewPolicy::FactorJitter;
  uint64_t seed = 0;

  // Throws ConfigError naming the offending fields.
  void validate() const;
  // Temperature for a 0-based epoch.
  double tau_at(int64_t epoch) const;
};

// Integer tokens (B, L) in [0, K).
struct MessageBatch {
  torch::Tensor tokens;

  int64_t batch() const { return tokens.size(0); }
  int64_t length() const { return tokens.size(1); }
  // Throws DomainError unless tokens are int64 (B, L) in [0, vocab).
  void validate(int64_t vocab, int64_t length) const;
};

struct EncodeOutput {
  torch::Tensor logits;  // (B, L, K)
  torch::Tensor hard;    // (B, L, K) one-hot, straight-through gradient
  torch::Tensor tokens;  // (B, L) int64
};

enum class Decoding { Sample, Greedy };

// Perception (MLP backbone + projector) and an LSTM language coder. The
// message encoder starts from h0 = z, c0 = 0 and a learned start embedding; at
// each step it emits logits, draws a straight-through Gumbel-Softmax token and
// feeds that token's embedding to the next step. The decoder runs a second
// LSTM over the token embeddings; its final hidden state is z'.
class AgentNetImpl : public torch::nn::Module {
 public:
  explicit AgentNetImpl(const GameConfig& cfg);

  torch::Tensor perceive(const torch::Tensor& x);
  EncodeOutput encode(const torch::Tensor& z, double tau, at::Generator& gen,
                      Decoding mode = Decoding::Sample);
  // Embeds one-hot rows (B, L, K) and decodes; gradient reaches the embedding.
  torch::Tensor decode_onehot(const torch::Tensor& onehot);
  torch::Tensor decode(const MessageBatch& msg);

  ssl::EncoderStack& perception() { return perception_; }
  int64_t vocab_size() const { return vocab_; }
  int64_t message_len() const { return len_; }

 private:
  int64_t vocab_, len_, d_z_;
  ssl::EncoderStack perception_{nullptr};
  torch::nn::Embedding embed_{nullptr};
  torch::Tensor sos_;
  torch::nn::LSTMCell enc_cell_{nullptr};
  torch::nn::Linear enc_out_{nullptr};
  torch::nn::LSTMCell dec_cell_{nullptr};
};
TORCH_MODULE(AgentNet);

struct AgentState {
  AgentId id;
  AgentNet net;
  std::unique_ptr<torch::optim::Adam> optimizer;

  AgentState(AgentId id, const GameConfig& cfg, uint64_t init_seed);
};

struct LossComponents {
  double align = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

struct SpeakOutput {
  MessageBatch message;
  torch::Tensor logits;  // (B, L, K)
};

// Speaker turn: z = f(x), then an autoregressive message. Runs without
// gradient and with batch normalization in evaluation mode, so the speaker's
// parameters and buffers are untouched. Greedy decoding takes the argmax at
// each step instead of sampling.
SpeakOutput speak(AgentState& speaker, const torch::Tensor& x, double tau, at::Generator& gen,
                  Decoding mode = Decoding::Sample);

// z' from the listener's decoder (evaluation mode, no gradient).
torch::Tensor listen_decode(AgentState& listener, const MessageBatch& msg);

// neg_cosine(z_li, z_sp) + beta * KL(logits_li || uniform); components written to `parts`.
torch::Tensor listener_objective(const torch::Tensor& z_li, const torch::Tensor& z_sp,
                                 const torch::Tensor& logits_li, double beta, LossComponents* parts = nullptr);

// One listener update: D(z_Li, dec_Li(w_Sp)) + beta * KL(logits_Li || uniform),
// one optimizer step on the listener. Inputs carry nothing from the speaker
// beyond the integer message.
LossComponents listener_step(AgentState& listener, const MessageBatch& w_sp, const torch::Tensor& x_li,
                             const GameConfig& cfg, double tau, at::Generator& gen);

struct CommTraceRecord {
  int64_t epoch = 0;  // 1-based
  int64_t batch = 0;
  std::string speaker;
  std::string listener;
  std::vector<int64_t> object_index;
  std::vector<std::array<int64_t, 5>> factors;
  std::vector<std::vector<int64_t>> message;
  double loss_align = 0.0;
  double loss_kl = 0.0;
  double loss_total = 0.0;

  bool operator==(const CommTraceRecord&) const = default;
};

struct RoundInput {
  torch::Tensor xA, xB;        // views observed by agent A and agent B
  torch::Tensor object_index;  // int64 (B)
  torch::Tensor factors;       // int64 (B, 5) or undefined
  int64_t epoch = 1;
  int64_t batch = 0;
};

// (Sp=B, Li=A) then (Sp=A, Li=B); two trace records.
std::vector<CommTraceRecord> play_round(AgentState& a, AgentState& b, const RoundInput& in,
                                        const GameConfig& cfg, double tau, at::Generator& gen);

struct GameEpochMetrics {
  int64_t epoch = 0;
  double align_a = 0.0, kl_a = 0.0, total_a = 0.0;  // A as listener
  double align_b = 0.0, kl_b = 0.0, total_b = 0.0;  // B as listener
  double tau = 0.0;
  double lr = 0.0;
  double seconds = 0.0;

  double mean_align() const { return 0.5 * (align_a + align_b); }
};

struct TrainGameOptions {
  std::filesystem::path trace_path;      // empty = no trace
  std::filesystem::path checkpoint_dir;  // empty = no checkpoints
  int64_t checkpoint_every = 50;
  std::string config_json;
  std::string config_hash;
  std::function<void(const GameEpochMetrics&)> on_epoch;
};

// Iterates play_round over seeded minibatches of `positions` in `ds`.
std::vector<GameEpochMetrics> train_ssng(AgentState& a, AgentState& b, const data::ImageDataset& ds,
                                         const std::vector<int64_t>& positions, const GameConfig& cfg,
                                         const TrainGameOptions& opts = {});

std::filesystem::path game_checkpoint_path(const std::filesystem::path& dir, int64_t epoch);
void save_agents(const std::filesystem::path& path, AgentState& a, AgentState& b, int64_t epoch,
                 const std::string& config_json, const std::string& config_hash);
// Returns the stored epoch.
int64_t load_agents(const std::filesystem::path& path, AgentState& a, AgentState& b);

// Greedy messages for every position of `ds` (clean images).
torch::Tensor messages_for(AgentState& agent, const data::ImageDataset& ds,
                           const std::vector<int64_t>& positions, int64_t batch_size = 512);

}  // namespace ssng::game
