#pragma once

// Differentiable numeric primitives shared by the SSL model and the naming game.
//
// Each reduction kernel is a custom autograd function with a hand-written
// backward pass, so tests can compare the analytic gradient against finite
// differences and against autograd of the naive expression.

#include <torch/torch.h>

#include <cstdint>

namespace ssng::kernels {

// Diagonal Gaussian q(w|z) = N(mu, diag(exp(logvar))). Shapes (d) or (B, d).
struct GaussianParams {
  torch::Tensor mu;
  torch::Tensor logvar;

  int64_t dim() const { return mu.size(-1); }
  // Throws DomainError on shape mismatch or non-finite entries.
  void validate() const;
};

// Unnormalized log-probabilities over K tokens at each of L message positions.
// Shape (L, K) or (B, L, K).
struct CategoricalLogits {
  torch::Tensor logits;

  int64_t message_len() const { return logits.size(-2); }
  int64_t vocab_size() const { return logits.size(-1); }
  void validate() const;
};

// KL(N(mu, diag exp(logvar)) || N(0, I)), summed over latent dimensions and
// averaged over the batch when the input is batched.
torch::Tensor gaussian_kl_std(const GaussianParams& params);

// Per-sample KL (no batch reduction), shape (B). Not differentiable through the
// custom backward; used for logging and tests.
torch::Tensor gaussian_kl_std_per_sample(const GaussianParams& params);

// Mean over message positions (and batch) of KL(Cat(softmax(row)) || Uniform(K)).
torch::Tensor categorical_kl_uniform(const CategoricalLogits& logits);

// w = mu + exp(logvar / 2) * eps with eps ~ N(0, I) drawn from `gen`.
torch::Tensor reparameterize_gaussian(const GaussianParams& params, at::Generator& gen);
// Same transform with caller-supplied noise.
torch::Tensor reparameterize_gaussian(const GaussianParams& params, const torch::Tensor& eps);

struct GumbelSample {
  torch::Tensor hard;    // exactly one-hot in the forward pass, soft-path gradient
  torch::Tensor soft;    // softmax((logits + g) / tau)
  torch::Tensor tokens;  // argmax indices, int64, shape logits.shape[:-1]
};

// Standard Gumbel noise -log(-log(U)), U clamped to (1e-10, 1 - 1e-7).
torch::Tensor sample_gumbel_noise(torch::IntArrayRef shape, at::Generator& gen,
                                  torch::Dtype dtype = torch::kFloat32);

// Gumbel-Softmax with straight-through hard samples, given explicit noise.
GumbelSample gumbel_softmax_st(const CategoricalLogits& logits, double tau,
                               const torch::Tensor& noise);
GumbelSample sample_gumbel_softmax_st(const CategoricalLogits& logits, double tau,
                                      at::Generator& gen);

// Relaxed (soft) sample alone; its backward is the same code path the
// straight-through sample uses.
torch::Tensor gumbel_softmax_relaxed(const CategoricalLogits& logits, double tau,
                                     const torch::Tensor& noise);

// -(x/|x|).(y/|y|), averaged over the batch for (B, d) inputs.
torch::Tensor neg_cosine(const torch::Tensor& x, const torch::Tensor& y);

// Value passes, gradient blocked.
inline torch::Tensor stop_gradient(const torch::Tensor& t) { return t.detach(); }

at::Generator make_generator(uint64_t seed);

}  // namespace ssng::kernels
