#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lesionformer/tensor.hpp"

namespace lesionformer {

enum class Reduction { kMean, kSum };

struct FocalLossParams {
  std::vector<double> alpha;  // per-class weights, length K, nonnegative
  double gamma = 2.0;
  Reduction reduction = Reduction::kMean;
};

// Mean of -log softmax(logits)[label], stable via max-subtracted log-sum-exp.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels);

// Per sample: -alpha[label] * (1 - p_label)^gamma * log(p_label), with p from
// softmax and p_label clamped to [1e-12, 1]. gamma == 0 with unit alpha
// degenerates to cross-entropy.
Tensor focal_loss(const Tensor& logits, const std::vector<std::int64_t>& labels,
                  const FocalLossParams& params);

enum class AlphaScheme { kUniform, kInverseFrequency };

// inverse-frequency: alpha_t proportional to N / (K * count_t), normalized to
// mean 1. uniform: all ones.
std::vector<double> alpha_from_distribution(const std::vector<std::int64_t>& counts,
                                            AlphaScheme scheme);

}  // namespace lesionformer
