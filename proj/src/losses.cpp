#include "lesionformer/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace lesionformer {

namespace {

void validate_labels(const Tensor& logits, const std::vector<std::int64_t>& labels) {
  if (logits.rank() != 2) {
    throw std::invalid_argument("loss: logits must be [B, K], got " + shape_str(logits.shape()));
  }
  if (static_cast<std::int64_t>(labels.size()) != logits.dim(0)) {
    throw std::invalid_argument("loss: label count " + std::to_string(labels.size()) +
                                " does not match batch " + std::to_string(logits.dim(0)));
  }
  const auto k = logits.dim(1);
  for (auto l : labels) {
    if (l < 0 || l >= k) {
      throw std::invalid_argument("loss: label " + std::to_string(l) + " out of range [0, " +
                                  std::to_string(k) + ")");
    }
  }
}

// One-hot selector as a constant (labels carry no gradient).
Tensor one_hot(const std::vector<std::int64_t>& labels, std::int64_t k) {
  const auto b = static_cast<std::int64_t>(labels.size());
  std::vector<double> v(static_cast<std::size_t>(b * k), 0.0);
  for (std::int64_t i = 0; i < b; ++i) {
    v[static_cast<std::size_t>(i * k + labels[static_cast<std::size_t>(i)])] = 1.0;
  }
  return Tensor::from_data({b, k}, std::move(v));
}

// Row maxima as a constant [B, K] tensor. Detaching the shift is exact for
// log-sum-exp: the gradient is shift-invariant.
Tensor row_max_expanded(const Tensor& logits) {
  const auto b = logits.dim(0), k = logits.dim(1);
  std::vector<double> v(static_cast<std::size_t>(b * k));
  const auto& x = logits.data();
  for (std::int64_t i = 0; i < b; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < k; ++j) m = std::max(m, x[static_cast<std::size_t>(i * k + j)]);
    for (std::int64_t j = 0; j < k; ++j) v[static_cast<std::size_t>(i * k + j)] = m;
  }
  return Tensor::from_data({b, k}, std::move(v));
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels) {
  validate_labels(logits, labels);
  const auto k = logits.dim(1);
  // log softmax = (x - m) - log sum exp(x - m); the shift m cancels exactly.
  Tensor shifted = sub(logits, row_max_expanded(logits));
  Tensor lse = log(sum(exp(shifted), 1));                  // [B]
  Tensor logp = sub(shifted, repeat_last(lse, k));         // [B, K]
  Tensor picked = sum(mul(one_hot(labels, k), logp), 1);   // [B]
  return neg(mean_all(picked));
}

Tensor focal_loss(const Tensor& logits, const std::vector<std::int64_t>& labels,
                  const FocalLossParams& params) {
  validate_labels(logits, labels);
  if (params.gamma < 0.0) {
    throw std::invalid_argument("focal_loss: gamma must be nonnegative");
  }
  const auto k = logits.dim(1);
  if (static_cast<std::int64_t>(params.alpha.size()) != k) {
    throw std::invalid_argument("focal_loss: alpha length " + std::to_string(params.alpha.size()) +
                                " does not match class count " + std::to_string(k));
  }
  for (double a : params.alpha) {
    if (a < 0.0) throw std::invalid_argument("focal_loss: alpha entries must be nonnegative");
  }

  Tensor p = softmax(logits, 1);
  Tensor pt = clamp_min(sum(mul(one_hot(labels, k), p), 1), 1e-12);  // [B]

  const auto b = static_cast<std::int64_t>(labels.size());
  std::vector<double> aw(static_cast<std::size_t>(b));
  for (std::int64_t i = 0; i < b; ++i) {
    aw[static_cast<std::size_t>(i)] =
        params.alpha[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
  }
  Tensor alpha_t = Tensor::from_data({b}, std::move(aw));

  Tensor modulator = pow_scalar(scalar_sub(1.0, pt), params.gamma);
  Tensor per_sample = neg(mul(alpha_t, mul(modulator, log(pt))));
  return params.reduction == Reduction::kMean ? mean_all(per_sample) : sum_all(per_sample);
}

std::vector<double> alpha_from_distribution(const std::vector<std::int64_t>& counts,
                                            AlphaScheme scheme) {
  if (counts.empty()) throw std::invalid_argument("alpha_from_distribution: empty counts");
  const auto k = static_cast<double>(counts.size());
  if (scheme == AlphaScheme::kUniform) {
    return std::vector<double>(counts.size(), 1.0);
  }
  double total = 0.0;
  for (auto c : counts) {
    if (c < 1) throw std::invalid_argument("alpha_from_distribution: zero count");
    total += static_cast<double>(c);
  }
  std::vector<double> alpha(counts.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    alpha[i] = total / (k * static_cast<double>(counts[i]));
    sum += alpha[i];
  }
  const double scale = k / sum;  // normalize to mean 1
  for (auto& a : alpha) a *= scale;
  return alpha;
}

}  // namespace lesionformer
