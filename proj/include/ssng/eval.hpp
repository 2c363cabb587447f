#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

#include "ssng/data.hpp"
#include "ssng/ssl_model.hpp"

namespace ssng::eval {

struct ProbeResult {
  int64_t top_k = 1;
  double accuracy = 0.0;
  int64_t n_test = 0;
};

struct ProbeConfig {
  int64_t epochs = 100;
  double lr = 1e-3;
  int64_t batch_size = 256;  // 0 = full batch
  uint64_t seed = 0;
};

// Fraction of rows whose true label is among the k highest scores. Equal
// scores rank the lower class index first.
double topk_accuracy(const torch::Tensor& scores, const torch::Tensor& labels, int64_t k);

// Fits one linear layer with cross-entropy on the training representations
// (Adam, no weight decay) and reports top-k accuracy on the test set.
ProbeResult linear_probe(const torch::Tensor& train_reps, const torch::Tensor& train_labels,
                         const torch::Tensor& test_reps, const torch::Tensor& test_labels,
                         int64_t k, const ProbeConfig& cfg = {});

// z for every image of `ds`, encoder in evaluation mode, no augmentation.
// The encoder's training flag is restored afterwards.
torch::Tensor encode_dataset(ssl::EncoderStack& encoder, const data::ImageDataset& ds,
                             int64_t batch_size = 512);

struct CollapseSummary {
  double mean_std = 0.0;
  double min_std = 0.0;
};

// Per-dimension standard deviation of the L2-normalized representations.
// Uniform directions in d dimensions give about 1/sqrt(d); collapse gives 0.
CollapseSummary collapse_metric(const torch::Tensor& reps);

struct TopSimConfig {
  int64_t n_permutations = 1000;
  int64_t max_pairs = 1'000'000;
  uint64_t seed = 0;
};

struct TopSimResult {
  double rho = 0.0;
  int64_t n_pairs = 0;
  double null_mean = 0.0;
  double null_std = 0.0;
  bool degenerate = false;
};

int64_t levenshtein(const int64_t* a, int64_t na, const int64_t* b, int64_t nb);

// Spearman correlation between pairwise factor distances (range-normalized L1
// summed over factors) and pairwise message distances (edit distance / L).
// The null distribution permutes which message belongs to which object.
TopSimResult topsim(const torch::Tensor& factors, const torch::Tensor& messages,
                    const TopSimConfig& cfg = {});

}  // namespace ssng::eval
