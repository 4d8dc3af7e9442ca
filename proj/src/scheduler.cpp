#include "lesionformer/scheduler.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace lesionformer {

SchedulerState make_scheduler_state(double lr, double factor, std::int64_t patience,
                                    double threshold, double min_lr) {
  if (factor <= 0.0 || factor >= 1.0) {
    throw std::invalid_argument("scheduler: factor must be in (0, 1)");
  }
  if (lr <= 0.0 || min_lr < 0.0 || patience < 0 || threshold < 0.0) {
    throw std::invalid_argument("scheduler: invalid hyperparameters");
  }
  SchedulerState s;
  s.lr = lr;
  s.best = std::numeric_limits<double>::infinity();
  s.patience = patience;
  s.counter = 0;
  s.factor = factor;
  s.min_lr = min_lr;
  s.threshold = threshold;
  return s;
}

SchedulerState scheduler_step(SchedulerState state, double val_loss) {
  if (!std::isfinite(val_loss)) {
    throw std::invalid_argument("scheduler_step: non-finite validation loss");
  }
  if (val_loss < state.best - state.threshold) {
    state.best = val_loss;
    state.counter = 0;
  } else {
    state.counter += 1;
  }
  if (state.counter > state.patience) {
    state.lr = std::max(state.lr * state.factor, state.min_lr);
    state.counter = 0;
  }
  return state;
}

std::vector<double> trace(SchedulerState state, const std::vector<double>& losses) {
  std::vector<double> lrs;
  lrs.reserve(losses.size());
  for (double l : losses) {
    state = scheduler_step(state, l);
    lrs.push_back(state.lr);
  }
  return lrs;
}

}  // namespace lesionformer
