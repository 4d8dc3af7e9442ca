#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lesionformer/tensor.hpp"

namespace lesionformer {

struct CheckReport {
  bool pass = false;
  double max_err = 0.0;
  double tol = 0.0;
  std::int64_t coords_checked = 0;
  std::string note;
};

// Relative error with an absolute floor: |a - b| / max(|a|, |b|, 1e-3).
// Below the floor the comparison degrades to an absolute one, which keeps
// round-off noise in near-zero gradients from registering as failures.
double grad_rel_err(double autodiff, double finite_diff);

// Central-difference check of a scalar-valued tensor function against
// reverse-mode gradients. max_coords == 0 checks every coordinate; otherwise
// a seeded random subset of that size. Throws on non-finite values.
CheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                              double h, double tol, std::int64_t max_coords = 0,
                              std::uint64_t seed = 0);

struct GroupReport {
  std::string name;
  CheckReport report;
};

// Whole-model variant: one backward pass supplies reference gradients for all
// parameters; each parameter tensor is then probed coordinate-wise. loss_fn
// must rebuild the forward pass from the current parameter values (it runs
// once under a tape and many times without one).
std::vector<GroupReport> finite_diff_check_params(const std::function<Tensor()>& loss_fn,
                                                  std::span<const NamedTensor> params, double h,
                                                  double tol, std::int64_t coords_per_tensor,
                                                  std::uint64_t seed);

}  // namespace lesionformer
