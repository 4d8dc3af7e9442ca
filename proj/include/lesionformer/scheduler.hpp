#pragma once

#include <vector>

namespace lesionformer {

// ReduceLROnPlateau. Pure state transition: step(state, loss) -> state.
struct SchedulerState {
  double lr = 1e-3;
  double best = 0.0;  // set to +inf by make_scheduler_state
  std::int64_t patience = 5;
  std::int64_t counter = 0;
  double factor = 0.1;
  double min_lr = 1e-6;
  double threshold = 1e-4;  // minimum absolute improvement that counts
};

SchedulerState make_scheduler_state(double lr, double factor, std::int64_t patience,
                                    double threshold, double min_lr);

// If val_loss < best - threshold: best <- val_loss, counter <- 0; else
// counter += 1. If counter > patience: lr <- max(lr * factor, min_lr),
// counter <- 0. Throws on non-finite val_loss.
SchedulerState scheduler_step(SchedulerState state, double val_loss);

// Folds scheduler_step over a loss sequence; returns the lr after each step.
std::vector<double> trace(SchedulerState state, const std::vector<double>& losses);

}  // namespace lesionformer
