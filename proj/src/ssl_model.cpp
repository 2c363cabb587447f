#include "ssng/ssl_model.hpp"

#include "ssng/errors.hpp"

namespace ssng::ssl {

namespace nn = torch::nn;

std::string to_string(BackboneKind kind) {
  switch (kind) {
    case BackboneKind::FashionCnn: return "fashion_cnn";
    case BackboneKind::ResNet18: return "resnet18";
    case BackboneKind::Mlp: return "mlp";
  }
  return "?";
}

nn::Sequential make_mlp(const std::vector<int64_t>& dims, bool bn_last) {
  nn::Sequential seq;
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    seq->push_back(nn::Linear(dims[i], dims[i + 1]));
    const bool last = i + 2 == dims.size();
    if (!last || bn_last) seq->push_back(nn::BatchNorm1d(dims[i + 1]));
    if (!last) seq->push_back(nn::ReLU());
  }
  return seq;
}

FashionCnnImpl::FashionCnnImpl(int64_t in_channels, int64_t image_size) {
  conv1_ = register_module(
      "conv1", nn::Conv2d(nn::Conv2dOptions(in_channels, 16, 4).stride(2).padding(1)));
  conv2_ = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(16, 32, 4).stride(2).padding(1)));
  const int64_t side = image_size / 4;  // two stride-2 convs with k=4, p=1
  fc_ = register_module("fc", nn::Linear(32 * side * side, 512));
}

torch::Tensor FashionCnnImpl::forward(torch::Tensor x) {
  x = torch::relu(conv1_(x));
  x = torch::relu(conv2_(x));
  return torch::relu(fc_(x.flatten(1)));
}

BasicBlockImpl::BasicBlockImpl(int64_t in_planes, int64_t planes, int64_t stride) {
  conv1_ = register_module(
      "conv1", nn::Conv2d(nn::Conv2dOptions(in_planes, planes, 3).stride(stride).padding(1).bias(false)));
  bn1_ = register_module("bn1", nn::BatchNorm2d(planes));
  conv2_ = register_module(
      "conv2", nn::Conv2d(nn::Conv2dOptions(planes, planes, 3).stride(1).padding(1).bias(false)));
  bn2_ = register_module("bn2", nn::BatchNorm2d(planes));
  shortcut_ = nn::Sequential();
  if (stride != 1 || in_planes != planes) {
    shortcut_->push_back(
        nn::Conv2d(nn::Conv2dOptions(in_planes, planes, 1).stride(stride).bias(false)));
    shortcut_->push_back(nn::BatchNorm2d(planes));
  }
  register_module("shortcut", shortcut_);
}

torch::Tensor BasicBlockImpl::forward(torch::Tensor x) {
  auto out = torch::relu(bn1_(conv1_(x)));
  out = bn2_(conv2_(out));
  auto skip = shortcut_->is_empty() ? x : shortcut_->forward(x);
  return torch::relu(out + skip);
}

ResNet18Impl::ResNet18Impl(int64_t in_channels) {
  stem_ = register_module(
      "stem", nn::Conv2d(nn::Conv2dOptions(in_channels, 64, 3).stride(1).padding(1).bias(false)));
  stem_bn_ = register_module("stem_bn", nn::BatchNorm2d(64));
  layers_ = nn::Sequential();
  int64_t in_planes = 64;
  for (int64_t planes : {64, 128, 256, 512}) {
    const int64_t stride = planes == 64 ? 1 : 2;
    layers_->push_back(BasicBlock(in_planes, planes, stride));
    layers_->push_back(BasicBlock(planes, planes, 1));
    in_planes = planes;
  }
  register_module("layers", layers_);
}

torch::Tensor ResNet18Impl::forward(torch::Tensor x) {
  x = torch::relu(stem_bn_(stem_(x)));
  x = layers_->forward(x);
  return torch::adaptive_avg_pool2d(x, {1, 1}).flatten(1);
}

MlpBackboneImpl::MlpBackboneImpl(const std::vector<int64_t>& dims) {
  net_ = register_module("net", make_mlp(dims, /*bn_last=*/false));
}

torch::Tensor MlpBackboneImpl::forward(torch::Tensor x) { return net_->forward(x.flatten(1)); }

EncoderStackImpl::EncoderStackImpl(const EncoderConfig& cfg) : cfg_(cfg), d_z_(cfg.d_z) {
  int64_t feat = 0;
  switch (cfg.backbone) {
    case BackboneKind::FashionCnn: {
      FashionCnn cnn(cfg.in_channels, cfg.image_size);
      feat = cnn->out_dim();
      backbone_ = nn::AnyModule(register_module("backbone", cnn));
      break;
    }
    case BackboneKind::ResNet18: {
      ResNet18 net(cfg.in_channels);
      feat = net->out_dim();
      backbone_ = nn::AnyModule(register_module("backbone", net));
      break;
    }
    case BackboneKind::Mlp: {
      if (cfg.mlp_dims.size() < 2) throw ConfigError("MLP backbone needs at least two widths");
      MlpBackbone mlp(cfg.mlp_dims);
      feat = cfg.mlp_dims.back();
      backbone_ = nn::AnyModule(register_module("backbone", mlp));
      break;
    }
  }
  projector_ = register_module(
      "projector", make_mlp({feat, cfg.projector_hidden, cfg.projector_hidden, cfg.d_z},
                            cfg.projector_bn_last));
}

torch::Tensor EncoderStackImpl::forward(torch::Tensor x) {
  if (cfg_.backbone == BackboneKind::Mlp) {
    x = x.flatten(1);
    if (x.size(1) != cfg_.mlp_dims.front()) {
      throw ConfigError("input has " + std::to_string(x.size(1)) + " features, backbone expects " +
                        std::to_string(cfg_.mlp_dims.front()));
    }
  } else if (x.dim() != 4 || x.size(1) != cfg_.in_channels || x.size(2) != cfg_.image_size ||
             x.size(3) != cfg_.image_size) {
    throw ConfigError("input batch shape does not match the configured image shape");
  }
  return projector_->forward(backbone_.forward(x));
}

PredictorVaeImpl::PredictorVaeImpl(int64_t d_z, int64_t d_w, int64_t hidden) : d_w_(d_w) {
  trunk_ = register_module("trunk", nn::Sequential(nn::Linear(d_z, hidden), nn::BatchNorm1d(hidden),
                                                   nn::ReLU()));
  mu_head_ = register_module("mu", nn::Linear(hidden, d_w));
  logvar_head_ = register_module("logvar", nn::Linear(hidden, d_w));
  dec_ = register_module("dec", nn::Sequential(nn::Linear(d_w, hidden), nn::BatchNorm1d(hidden),
                                               nn::ReLU(), nn::Linear(hidden, d_z), nn::Sigmoid()));
}

void PredictorVaeImpl::set_logvar_range(double lo, double hi) {
  if (lo > hi) throw ConfigError("logvar range: lower bound above upper bound");
  logvar_min_ = lo;
  logvar_max_ = hi;
}

kernels::GaussianParams PredictorVaeImpl::encode(const torch::Tensor& z) {
  auto h = trunk_->forward(z);
  return {mu_head_(h), logvar_head_(h).clamp(logvar_min_, logvar_max_)};
}

torch::Tensor PredictorVaeImpl::decode(const torch::Tensor& w) { return dec_->forward(w); }

MlpPredictorImpl::MlpPredictorImpl(int64_t d_z, int64_t hidden) {
  net_ = register_module("net", nn::Sequential(nn::Linear(d_z, hidden), nn::BatchNorm1d(hidden),
                                               nn::ReLU(), nn::Linear(hidden, d_z)));
}

Variant parse_variant(const std::string& name) {
  if (name == "simsiam_vae") return Variant::SimSiamVae;
  if (name == "simsiam") return Variant::SimSiam;
  if (name == "simsiam_vae_no_stopgrad") return Variant::SimSiamVaeNoStopGrad;
  throw ConfigError("unknown variant '" + name +
                        "' (expected simsiam_vae, simsiam, simsiam_vae_no_stopgrad)",
                    {"variant"});
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::SimSiamVae: return "simsiam_vae";
    case Variant::SimSiam: return "simsiam";
    case Variant::SimSiamVaeNoStopGrad: return "simsiam_vae_no_stopgrad";
  }
  return "?";
}

void SslLossConfig::validate() const {
  if (!std::isfinite(beta) || beta < 0.0) throw ConfigError("beta must be finite and >= 0", {"beta"});
  if (variant == Variant::SimSiamVaeNoStopGrad && stop_grad) {
    throw ConfigError("variant simsiam_vae_no_stopgrad conflicts with stop_grad=true",
                      {"variant", "stop_grad"});
  }
}

SslModelConfig SslModelConfig::fashionmnist() {
  SslModelConfig cfg;
  cfg.encoder.backbone = BackboneKind::FashionCnn;
  cfg.encoder.in_channels = 1;
  cfg.encoder.image_size = 28;
  cfg.encoder.d_z = 128;
  cfg.encoder.projector_hidden = 512;
  cfg.d_w = 64;
  cfg.predictor_hidden = 128;
  return cfg;
}

SslModelConfig SslModelConfig::cifar10() {
  SslModelConfig cfg;
  cfg.encoder.backbone = BackboneKind::ResNet18;
  cfg.encoder.in_channels = 3;
  cfg.encoder.image_size = 32;
  cfg.encoder.d_z = 256;
  cfg.encoder.projector_hidden = 512;
  cfg.d_w = 128;
  cfg.predictor_hidden = 256;
  return cfg;
}

SslModelImpl::SslModelImpl(const SslModelConfig& cfg) : cfg_(cfg) {
  encoder_ = register_module("encoder", EncoderStack(cfg.encoder));
  if (uses_vae()) {
    vae_ = register_module("predictor", PredictorVae(cfg.encoder.d_z, cfg.d_w, cfg.predictor_hidden));
  } else {
    mlp_ = register_module("predictor", MlpPredictor(cfg.encoder.d_z, cfg.d_w));
  }
}

BranchOutput SslModelImpl::forward_branch(const torch::Tensor& x, at::Generator& gen,
                                          Sampling sampling) {
  BranchOutput out;
  out.z = encoder_->forward(x);
  if (!uses_vae()) {
    out.z_recon = mlp_->forward(out.z);
    return out;
  }
  out.params = vae_->encode(out.z);
  auto w = sampling == Sampling::Mean ? out.params.mu
                                      : kernels::reparameterize_gaussian(out.params, gen);
  out.z_recon = vae_->decode(w);
  return out;
}

namespace {

void check_batches(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) {
    throw ConfigError("branch outputs disagree in shape (batch " + std::to_string(a.size(0)) +
                      " vs " + std::to_string(b.size(0)) + ")");
  }
}

}  // namespace

LossBreakdown simsiamvae_loss(const BranchOutput& a, const BranchOutput& b,
                              const SslLossConfig& cfg) {
  cfg.validate();
  check_batches(a.z, b.z);
  check_batches(a.z_recon, b.z_recon);
  auto target_a = cfg.stop_grad ? kernels::stop_gradient(a.z) : a.z;
  auto target_b = cfg.stop_grad ? kernels::stop_gradient(b.z) : b.z;
  auto align = kernels::neg_cosine(a.z_recon, target_b) + kernels::neg_cosine(b.z_recon, target_a);

  LossBreakdown out;
  out.align = align.item<double>();
  if (a.params.mu.defined() && b.params.mu.defined()) {
    auto kl = kernels::gaussian_kl_std(a.params) + kernels::gaussian_kl_std(b.params);
    out.kl = kl.item<double>();
    out.total = align + cfg.beta * kl;
  } else {
    out.total = align;
  }
  return out;
}

LossBreakdown simsiam_baseline_loss(const torch::Tensor& za, const torch::Tensor& zb,
                                    const std::function<torch::Tensor(const torch::Tensor&)>& h,
                                    bool stop_grad) {
  check_batches(za, zb);
  auto pa = h(za);
  auto pb = h(zb);
  auto ta = stop_grad ? kernels::stop_gradient(za) : za;
  auto tb = stop_grad ? kernels::stop_gradient(zb) : zb;
  LossBreakdown out;
  out.total = kernels::neg_cosine(pa, tb) + kernels::neg_cosine(pb, ta);
  out.align = out.total.item<double>();
  return out;
}

}  // namespace ssng::ssl
