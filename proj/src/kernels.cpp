#include "ssng/kernels.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <sstream>

#include "ssng/errors.hpp"

namespace ssng::kernels {

using torch::autograd::AutogradContext;
using torch::autograd::tensor_list;

namespace {

void require_finite(const torch::Tensor& t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    throw DomainError(std::string(what) + " contains non-finite entries");
  }
}

torch::Tensor as_batch(const torch::Tensor& t) { return t.dim() == 1 ? t.unsqueeze(0) : t; }

// Rows of the softmax Jacobian applied to an upstream gradient:
// d/dlogits = (1/tau) * soft * (g - sum(g * soft)).
torch::Tensor softmax_vjp(const torch::Tensor& soft, const torch::Tensor& grad, double tau) {
  auto inner = (grad * soft).sum(-1, /*keepdim=*/true);
  return soft * (grad - inner) / tau;
}

struct GaussianKlFn : public torch::autograd::Function<GaussianKlFn> {
  static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& mu,
                               const torch::Tensor& logvar) {
    ctx->save_for_backward({mu, logvar});
    auto per_dim = mu.square() + logvar.exp() - 1.0 - logvar;
    auto batch = mu.dim() == 1 ? 1 : mu.size(0);
    return 0.5 * per_dim.sum() / static_cast<double>(batch);
  }

  static tensor_list backward(AutogradContext* ctx, tensor_list grad_out) {
    auto saved = ctx->get_saved_variables();
    const auto& mu = saved[0];
    const auto& logvar = saved[1];
    auto batch = mu.dim() == 1 ? 1 : mu.size(0);
    auto scale = grad_out[0] / static_cast<double>(batch);
    return {scale * mu, scale * 0.5 * (logvar.exp() - 1.0)};
  }
};

struct CategoricalKlFn : public torch::autograd::Function<CategoricalKlFn> {
  static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& logits) {
    const auto k = logits.size(-1);
    auto log_p = torch::log_softmax(logits, -1);
    auto p = log_p.exp();
    auto neg_entropy = (p * log_p).sum(-1);  // one entry per row
    ctx->save_for_backward({p, log_p, neg_entropy});
    auto rows = neg_entropy.numel();
    return (neg_entropy + std::log(static_cast<double>(k))).sum() / static_cast<double>(rows);
  }

  static tensor_list backward(AutogradContext* ctx, tensor_list grad_out) {
    auto saved = ctx->get_saved_variables();
    const auto& p = saved[0];
    const auto& log_p = saved[1];
    const auto& neg_entropy = saved[2];
    auto rows = neg_entropy.numel();
    auto grad = p * (log_p - neg_entropy.unsqueeze(-1));
    return {grad * grad_out[0] / static_cast<double>(rows)};
  }
};

struct NegCosineFn : public torch::autograd::Function<NegCosineFn> {
  static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& x,
                               const torch::Tensor& y) {
    ctx->saved_data["x_1d"] = x.dim() == 1;
    ctx->saved_data["y_1d"] = y.dim() == 1;
    auto xb = as_batch(x);
    auto yb = as_batch(y);
    auto nx = xb.norm(2, -1, /*keepdim=*/true);
    auto ny = yb.norm(2, -1, /*keepdim=*/true);
    auto xh = xb / nx;
    auto yh = yb / ny;
    auto cos = (xh * yh).sum(-1, /*keepdim=*/true);
    ctx->save_for_backward({xh, yh, nx, ny, cos});
    return -cos.mean();
  }

  static tensor_list backward(AutogradContext* ctx, tensor_list grad_out) {
    auto saved = ctx->get_saved_variables();
    const auto& xh = saved[0];
    const auto& yh = saved[1];
    const auto& nx = saved[2];
    const auto& ny = saved[3];
    const auto& cos = saved[4];
    auto scale = -grad_out[0] / static_cast<double>(xh.size(0));
    auto gx = scale * (yh - cos * xh) / nx;
    auto gy = scale * (xh - cos * yh) / ny;
    auto in_x = ctx->saved_data["x_1d"].toBool();
    auto in_y = ctx->saved_data["y_1d"].toBool();
    return {in_x ? gx.squeeze(0) : gx, in_y ? gy.squeeze(0) : gy};
  }
};

struct StraightThroughFn : public torch::autograd::Function<StraightThroughFn> {
  static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& logits,
                               const torch::Tensor& noise, double tau) {
    auto soft = torch::softmax((logits + noise) / tau, -1);
    ctx->save_for_backward({soft});
    ctx->saved_data["tau"] = tau;
    auto idx = soft.argmax(-1, /*keepdim=*/true);
    return torch::zeros_like(soft).scatter_(-1, idx, 1.0);
  }

  static tensor_list backward(AutogradContext* ctx, tensor_list grad_out) {
    auto soft = ctx->get_saved_variables()[0];
    auto tau = ctx->saved_data["tau"].toDouble();
    return {softmax_vjp(soft, grad_out[0], tau), torch::Tensor(), torch::Tensor()};
  }
};

struct RelaxedFn : public torch::autograd::Function<RelaxedFn> {
  static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& logits,
                               const torch::Tensor& noise, double tau) {
    auto soft = torch::softmax((logits + noise) / tau, -1);
    ctx->save_for_backward({soft});
    ctx->saved_data["tau"] = tau;
    return soft;
  }

  static tensor_list backward(AutogradContext* ctx, tensor_list grad_out) {
    auto soft = ctx->get_saved_variables()[0];
    auto tau = ctx->saved_data["tau"].toDouble();
    return {softmax_vjp(soft, grad_out[0], tau), torch::Tensor(), torch::Tensor()};
  }
};

void check_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    std::ostringstream os;
    os << "Gumbel-Softmax temperature must be > 0, got " << tau;
    throw DomainError(os.str());
  }
}

}  // namespace

void GaussianParams::validate() const {
  if (!mu.defined() || !logvar.defined()) throw DomainError("GaussianParams: undefined tensor");
  if (mu.sizes() != logvar.sizes()) throw DomainError("GaussianParams: mu/logvar shape mismatch");
  if (mu.dim() < 1 || mu.dim() > 2 || mu.size(-1) < 1) {
    throw DomainError("GaussianParams: expected shape (d) or (B, d) with d >= 1");
  }
  require_finite(mu, "GaussianParams.mu");
  require_finite(logvar, "GaussianParams.logvar");
}

void CategoricalLogits::validate() const {
  if (!logits.defined() || logits.dim() < 2 || logits.dim() > 3) {
    throw DomainError("CategoricalLogits: expected shape (L, K) or (B, L, K)");
  }
  if (logits.size(-1) < 2) throw DomainError("CategoricalLogits: vocabulary size K must be >= 2");
  if (logits.size(-2) < 1) throw DomainError("CategoricalLogits: message length L must be >= 1");
  require_finite(logits, "CategoricalLogits");
}

torch::Tensor gaussian_kl_std(const GaussianParams& params) {
  params.validate();
  return GaussianKlFn::apply(params.mu, params.logvar);
}

torch::Tensor gaussian_kl_std_per_sample(const GaussianParams& params) {
  params.validate();
  auto mu = as_batch(params.mu);
  auto lv = as_batch(params.logvar);
  return 0.5 * (mu.square() + lv.exp() - 1.0 - lv).sum(-1);
}

torch::Tensor categorical_kl_uniform(const CategoricalLogits& logits) {
  logits.validate();
  return CategoricalKlFn::apply(logits.logits);
}

torch::Tensor reparameterize_gaussian(const GaussianParams& params, at::Generator& gen) {
  params.validate();
  auto eps = torch::randn(params.mu.sizes(), gen, params.mu.options().requires_grad(false));
  return params.mu + torch::exp(0.5 * params.logvar) * eps;
}

torch::Tensor reparameterize_gaussian(const GaussianParams& params, const torch::Tensor& eps) {
  params.validate();
  if (eps.sizes() != params.mu.sizes()) throw DomainError("reparameterize: noise shape mismatch");
  return params.mu + torch::exp(0.5 * params.logvar) * eps.detach();
}

torch::Tensor sample_gumbel_noise(torch::IntArrayRef shape, at::Generator& gen,
                                  torch::Dtype dtype) {
  auto u = torch::rand(shape, gen, torch::TensorOptions().dtype(dtype));
  u = u.clamp(1e-10, 1.0 - 1e-7);
  return -torch::log(-torch::log(u));
}

GumbelSample gumbel_softmax_st(const CategoricalLogits& logits, double tau,
                               const torch::Tensor& noise) {
  logits.validate();
  check_tau(tau);
  if (noise.sizes() != logits.logits.sizes()) throw DomainError("Gumbel noise shape mismatch");
  GumbelSample out;
  auto g = noise.detach().to(logits.logits.scalar_type());
  out.hard = StraightThroughFn::apply(logits.logits, g, tau);
  out.soft = RelaxedFn::apply(logits.logits, g, tau);
  out.tokens = out.hard.detach().argmax(-1);
  return out;
}

GumbelSample sample_gumbel_softmax_st(const CategoricalLogits& logits, double tau,
                                      at::Generator& gen) {
  check_tau(tau);
  auto noise = sample_gumbel_noise(logits.logits.sizes(), gen, logits.logits.scalar_type());
  return gumbel_softmax_st(logits, tau, noise);
}

torch::Tensor gumbel_softmax_relaxed(const CategoricalLogits& logits, double tau,
                                     const torch::Tensor& noise) {
  logits.validate();
  check_tau(tau);
  return RelaxedFn::apply(logits.logits, noise.detach().to(logits.logits.scalar_type()), tau);
}

torch::Tensor neg_cosine(const torch::Tensor& x, const torch::Tensor& y) {
  if (x.sizes() != y.sizes() || x.dim() < 1 || x.dim() > 2) {
    throw DomainError("neg_cosine: inputs must share shape (d) or (B, d)");
  }
  auto nx = as_batch(x).detach().norm(2, -1);
  auto ny = as_batch(y).detach().norm(2, -1);
  if (!(nx > 0).all().item<bool>() || !(ny > 0).all().item<bool>()) {
    throw DomainError("neg_cosine: zero-norm input vector");
  }
  require_finite(nx, "neg_cosine x norm");
  require_finite(ny, "neg_cosine y norm");
  return NegCosineFn::apply(x, y);
}

at::Generator make_generator(uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(seed);
}

}  // namespace ssng::kernels
