#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ssng/kernels.hpp"

namespace ssng::ssl {

enum class BackboneKind { FashionCnn, ResNet18, Mlp };

std::string to_string(BackboneKind kind);

// Dense stack: Linear -> BatchNorm -> ReLU for every layer but the last;
// the last layer optionally gets a BatchNorm (no ReLU).
torch::nn::Sequential make_mlp(const std::vector<int64_t>& dims, bool bn_last);

// Two strided convolutions (16 then 32 channels, kernel 4, stride 2, padding 1)
// followed by a 512-unit fully connected layer.
class FashionCnnImpl : public torch::nn::Module {
 public:
  FashionCnnImpl(int64_t in_channels, int64_t image_size);
  torch::Tensor forward(torch::Tensor x);
  int64_t out_dim() const { return 512; }

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::Linear fc_{nullptr};
};
TORCH_MODULE(FashionCnn);

class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(int64_t in_planes, int64_t planes, int64_t stride);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
  torch::nn::Sequential shortcut_{nullptr};
};
TORCH_MODULE(BasicBlock);

// ResNet18 with the small-image stem (3x3 conv, no max-pool) used for 32x32 inputs.
class ResNet18Impl : public torch::nn::Module {
 public:
  explicit ResNet18Impl(int64_t in_channels);
  torch::Tensor forward(torch::Tensor x);
  int64_t out_dim() const { return 512; }

 private:
  torch::nn::Conv2d stem_{nullptr};
  torch::nn::BatchNorm2d stem_bn_{nullptr};
  torch::nn::Sequential layers_{nullptr};
};
TORCH_MODULE(ResNet18);

// Flattening dense backbone for vector observations (e.g. 64x64 sprites -> 4096).
class MlpBackboneImpl : public torch::nn::Module {
 public:
  explicit MlpBackboneImpl(const std::vector<int64_t>& dims);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(MlpBackbone);

struct EncoderConfig {
  BackboneKind backbone = BackboneKind::FashionCnn;
  int64_t in_channels = 1;
  int64_t image_size = 28;
  int64_t d_z = 128;
  // Backbone: Mlp uses these widths (input first). Projector hidden width.
  std::vector<int64_t> mlp_dims{4096, 512, 256, 128};
  int64_t projector_hidden = 512;
  bool projector_bn_last = true;
};

// f = projector o backbone: image -> z (d_z).
class EncoderStackImpl : public torch::nn::Module {
 public:
  explicit EncoderStackImpl(const EncoderConfig& cfg);
  torch::Tensor forward(torch::Tensor x);
  int64_t d_z() const { return d_z_; }
  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  int64_t d_z_;
  torch::nn::AnyModule backbone_;
  torch::nn::Sequential projector_{nullptr};
};
TORCH_MODULE(EncoderStack);

// h = h_dec o sample o h_enc with a diagonal-Gaussian latent w (d_w).
class PredictorVaeImpl : public torch::nn::Module {
 public:
  PredictorVaeImpl(int64_t d_z, int64_t d_w, int64_t hidden);
  kernels::GaussianParams encode(const torch::Tensor& z);
  torch::Tensor decode(const torch::Tensor& w);
  int64_t d_w() const { return d_w_; }

  // logvar is clamped into [min, max] before use.
  void set_logvar_range(double lo, double hi);
  std::pair<double, double> logvar_range() const { return {logvar_min_, logvar_max_}; }

 private:
  int64_t d_w_;
  double logvar_min_ = -10.0;
  double logvar_max_ = 10.0;
  torch::nn::Sequential trunk_{nullptr};
  torch::nn::Linear mu_head_{nullptr}, logvar_head_{nullptr};
  torch::nn::Sequential dec_{nullptr};
};
TORCH_MODULE(PredictorVae);

// SimSiam's bottleneck predictor: Linear -> BN -> ReLU -> Linear.
class MlpPredictorImpl : public torch::nn::Module {
 public:
  MlpPredictorImpl(int64_t d_z, int64_t hidden);
  torch::Tensor forward(torch::Tensor z) { return net_->forward(z); }

 private:
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(MlpPredictor);

enum class Variant { SimSiamVae, SimSiam, SimSiamVaeNoStopGrad };
Variant parse_variant(const std::string& name);
std::string to_string(Variant v);

struct SslLossConfig {
  double beta = 1.0;
  bool stop_grad = true;
  Variant variant = Variant::SimSiamVae;

  // Reconciles the variant with the stop-grad flag; throws ConfigError on conflict.
  void validate() const;
};

struct BranchOutput {
  torch::Tensor z;                 // (B, d_z)
  kernels::GaussianParams params;  // (B, d_w) each; empty for the SimSiam baseline
  torch::Tensor z_recon;           // (B, d_z) predictor output
};

struct LossBreakdown {
  torch::Tensor total;  // differentiable scalar
  double align = 0.0;
  double kl = 0.0;
};

enum class Sampling { Stochastic, Mean };

struct SslModelConfig {
  EncoderConfig encoder;
  int64_t d_w = 64;
  int64_t predictor_hidden = 128;
  Variant variant = Variant::SimSiamVae;

  static SslModelConfig fashionmnist();
  static SslModelConfig cifar10();
};

// Backbone + projector shared by both branches, with either the VAE predictor
// or the SimSiam MLP predictor depending on the variant.
class SslModelImpl : public torch::nn::Module {
 public:
  explicit SslModelImpl(const SslModelConfig& cfg);

  // z = f(x); (mu, logvar) = h_enc(z); w = reparameterize; z_recon = h_dec(w).
  // For the SimSiam variant z_recon = h(z) and params are left empty.
  BranchOutput forward_branch(const torch::Tensor& x, at::Generator& gen,
                              Sampling sampling = Sampling::Stochastic);

  EncoderStack& encoder() { return encoder_; }
  PredictorVae& vae() { return vae_; }
  MlpPredictor& mlp_predictor() { return mlp_; }
  const SslModelConfig& config() const { return cfg_; }
  bool uses_vae() const { return cfg_.variant != Variant::SimSiam; }

 private:
  SslModelConfig cfg_;
  EncoderStack encoder_{nullptr};
  PredictorVae vae_{nullptr};
  MlpPredictor mlp_{nullptr};
};
TORCH_MODULE(SslModel);

// D(zA_recon, sg(zB)) + D(zB_recon, sg(zA)) + beta * (KL_A + KL_B), KL summed
// over latent dimensions and averaged over the batch.
LossBreakdown simsiamvae_loss(const BranchOutput& a, const BranchOutput& b,
                              const SslLossConfig& cfg);

// D(h(zA), sg(zB)) + D(h(zB), sg(zA)) with a deterministic predictor h.
LossBreakdown simsiam_baseline_loss(const torch::Tensor& za, const torch::Tensor& zb,
                                    const std::function<torch::Tensor(const torch::Tensor&)>& h,
                                    bool stop_grad = true);

}  // namespace ssng::ssl
