#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cram/model.hpp"

namespace cram {

// One teacher-forced example: the loss covers `answer` only. `positions`, when
// non-empty, gives position ids for context plus answer minus its last token.
struct TrainingExample {
  std::vector<TokenId> context;
  std::vector<TokenId> answer;
  std::vector<std::size_t> positions;
};

enum class LrSchedule { Constant, LinearWarmup };
enum class OptimizerKind { Sgd, Adam };

struct TrainConfig {
  std::size_t steps = 3000;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  LrSchedule lr_schedule = LrSchedule::LinearWarmup;
  // Warmup length for LinearWarmup; 0 means a tenth of `steps`.
  std::size_t warmup_steps = 0;
  double gradient_clip = 1.0;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::uint64_t seed = 0;

  void validate() const;
  double lr_at(std::size_t step) const;
};

struct LossPoint {
  std::size_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<LossPoint> trace;
};

using TrainObserver = std::function<void(std::size_t step, double loss)>;

// Mini-batch training with cross-entropy on answer tokens. Batches are drawn
// from per-epoch shuffles seeded by tc.seed. Throws TrainingError carrying the
// step index when the loss stops being finite.
TrainResult train(Model model, std::span<const TrainingExample> data, const TrainConfig& tc,
                  const TrainObserver& observer = {});

// Mean answer-token cross-entropy of one example. When `grad` is non-empty the
// gradient of that loss is added into it.
double example_loss(const Model& model, const TrainingExample& example, std::span<double> grad = {});

// Fraction of answer tokens predicted correctly by teacher-forced argmax.
double token_accuracy(const Model& model, std::span<const TrainingExample> data);

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t n_checked = 0;
  std::string worst_tensor;
};

// Relative error with the small-denominator guard used by grad_check.
double relative_error(double analytic, double numeric);

// Compares backprop against central finite differences on a deterministic
// sample of `per_tensor` coordinates from every parameter tensor.
GradCheckReport grad_check(const Model& model, const TrainingExample& example, double epsilon,
                           std::size_t per_tensor = 6, std::uint64_t seed = 0);

// CSV with header "step,loss".
void write_loss_csv(std::span<const LossPoint> trace, const std::string& path);

}  // namespace cram
