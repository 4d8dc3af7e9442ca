#include "lesionformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "lesionformer/rng.hpp"

namespace lesionformer {

double grad_rel_err(double autodiff, double finite_diff) {
  const double denom = std::max({std::abs(autodiff), std::abs(finite_diff), 1e-3});
  return std::abs(autodiff - finite_diff) / denom;
}

namespace {

std::vector<std::int64_t> pick_coords(std::int64_t n, std::int64_t max_coords,
                                      std::uint64_t seed) {
  std::vector<std::int64_t> coords;
  if (max_coords <= 0 || max_coords >= n) {
    coords.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
  } else {
    Rng rng(derive_seed(seed, "gradcheck-coords"));
    std::vector<std::int64_t> all(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
    rng.shuffle(all);
    coords.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(max_coords));
    std::sort(coords.begin(), coords.end());
  }
  return coords;
}

double eval_scalar(const std::function<double()>& f) {
  const double v = f();
  if (!std::isfinite(v)) {
    throw std::runtime_error("finite_diff_check: non-finite function value encountered");
  }
  return v;
}

}  // namespace

CheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                              double h, double tol, std::int64_t max_coords, std::uint64_t seed) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_check: h must be positive");

  Tensor probe = Tensor::from_data(x.shape(), x.data());
  probe.set_requires_grad(true);

  std::vector<double> ad;
  {
    Tape tape;
    Tensor loss = f(probe);
    if (loss.numel() != 1) {
      throw std::invalid_argument("finite_diff_check: f must be scalar-valued");
    }
    if (!std::isfinite(loss.value())) {
      throw std::runtime_error("finite_diff_check: non-finite function value encountered");
    }
    tape.backward(loss);
    ad = probe.grad();
  }
  for (double g : ad) {
    if (!std::isfinite(g)) {
      throw std::runtime_error("finite_diff_check: non-finite gradient encountered");
    }
  }

  CheckReport rep;
  rep.tol = tol;
  auto& data = probe.mutable_data();
  const auto coords = pick_coords(probe.numel(), max_coords, seed);
  for (auto c : coords) {
    const auto ci = static_cast<std::size_t>(c);
    const double saved = data[ci];
    data[ci] = saved + h;
    const double fp = eval_scalar([&] { return f(probe).value(); });
    data[ci] = saved - h;
    const double fm = eval_scalar([&] { return f(probe).value(); });
    data[ci] = saved;
    const double fd = (fp - fm) / (2.0 * h);
    rep.max_err = std::max(rep.max_err, grad_rel_err(ad[ci], fd));
  }
  rep.coords_checked = static_cast<std::int64_t>(coords.size());
  rep.pass = rep.max_err < tol;
  return rep;
}

std::vector<GroupReport> finite_diff_check_params(const std::function<Tensor()>& loss_fn,
                                                  std::span<const NamedTensor> params, double h,
                                                  double tol, std::int64_t coords_per_tensor,
                                                  std::uint64_t seed) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_check_params: h must be positive");

  std::vector<std::vector<double>> reference;
  {
    Tape tape;
    Tensor loss = loss_fn();
    if (loss.numel() != 1) {
      throw std::invalid_argument("finite_diff_check_params: loss must be scalar");
    }
    if (!std::isfinite(loss.value())) {
      throw std::runtime_error("finite_diff_check_params: non-finite loss");
    }
    tape.backward(loss);
    for (const auto& p : params) {
      reference.push_back(p.tensor.node()->grad);
      if (reference.back().empty()) {
        reference.back().assign(p.tensor.data().size(), 0.0);
      }
    }
  }

  std::vector<GroupReport> out;
  out.reserve(params.size());
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& p = params[pi];
    GroupReport gr;
    gr.name = p.name;
    gr.report.tol = tol;
    auto& data = const_cast<Tensor&>(p.tensor).mutable_data();
    const auto coords =
        pick_coords(p.tensor.numel(), coords_per_tensor, derive_seed(seed, "param", pi));
    for (auto c : coords) {
      const auto ci = static_cast<std::size_t>(c);
      const double saved = data[ci];
      data[ci] = saved + h;
      const double fp = eval_scalar([&] { return loss_fn().value(); });
      data[ci] = saved - h;
      const double fm = eval_scalar([&] { return loss_fn().value(); });
      data[ci] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      gr.report.max_err = std::max(gr.report.max_err, grad_rel_err(reference[pi][ci], fd));
    }
    gr.report.coords_checked = static_cast<std::int64_t>(coords.size());
    gr.report.pass = gr.report.max_err < tol;
    out.push_back(std::move(gr));
  }
  return out;
}

}  // namespace lesionformer
