#include "cram/train.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <random>

#include "cram/errors.hpp"

namespace cram {
namespace {

std::vector<TokenId> input_tokens(const TrainingExample& ex) {
  std::vector<TokenId> tokens(ex.context);
  tokens.insert(tokens.end(), ex.answer.begin(), ex.answer.end() - 1);
  return tokens;
}

void check_example(const Model& model, const TrainingExample& ex) {
  if (ex.context.empty() || ex.answer.empty()) {
    throw ConfigError("training example needs a non-empty context and answer");
  }
  const std::size_t n = ex.context.size() + ex.answer.size() - 1;
  if (n > model.config().max_seq_len) throw DimensionError("training example longer than max_seq_len");
  if (!ex.positions.empty() && ex.positions.size() != n) {
    throw DimensionError("training example has " + std::to_string(ex.positions.size()) +
                         " position ids for " + std::to_string(n) + " tokens");
  }
}

// Softmax cross-entropy over the cached logit rows. Writes d(sum loss)/d(logits)
// scaled by `weight` into dlogits and returns the summed loss.
double answer_cross_entropy(const detail::ForwardCache& cache, std::span<const TokenId> answer,
                            double weight, Matrix* dlogits) {
  const std::size_t V = cache.logits.cols();
  double loss = 0.0;
  if (dlogits) dlogits->resize(cache.logits.rows(), V);
  for (std::size_t i = 0; i < answer.size(); ++i) {
    const double* row = cache.logits.row(i);
    const double mx = *std::max_element(row, row + V);
    double z = 0.0;
    for (std::size_t c = 0; c < V; ++c) z += std::exp(row[c] - mx);
    const auto target = static_cast<std::size_t>(answer[i]);
    loss += -(row[target] - mx - std::log(z));
    if (dlogits) {
      double* g = dlogits->row(i);
      for (std::size_t c = 0; c < V; ++c) g[c] = weight * std::exp(row[c] - mx) / z;
      g[target] -= weight;
    }
  }
  return loss;
}

}  // namespace

void TrainConfig::validate() const {
  if (steps == 0) throw ConfigError("train: steps must be > 0");
  if (batch_size == 0) throw ConfigError("train: batch_size must be > 0");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("train: learning_rate must be > 0");
  }
  if (!(gradient_clip > 0.0)) throw ConfigError("train: gradient_clip must be > 0");
}

double TrainConfig::lr_at(std::size_t step) const {
  if (lr_schedule == LrSchedule::Constant) return learning_rate;
  const std::size_t warm = warmup_steps > 0 ? warmup_steps : std::max<std::size_t>(1, steps / 10);
  if (step < warm) return learning_rate * static_cast<double>(step + 1) / static_cast<double>(warm);
  // Linear decay to a tenth of the peak over the remaining steps.
  const double span = static_cast<double>(std::max<std::size_t>(1, steps - warm));
  const double frac = static_cast<double>(step - warm) / span;
  return learning_rate * (1.0 - 0.9 * frac);
}

double example_loss(const Model& model, const TrainingExample& example, std::span<double> grad) {
  check_example(model, example);
  const std::vector<TokenId> tokens = input_tokens(example);
  detail::ForwardCache cache;
  detail::forward_cached(model, tokens, nullptr, example.context.size() - 1, cache, example.positions);
  const double weight = 1.0 / static_cast<double>(example.answer.size());
  Matrix dlogits;
  const double loss =
      answer_cross_entropy(cache, example.answer, weight, grad.empty() ? nullptr : &dlogits);
  if (!grad.empty()) detail::backward(model, cache, dlogits, grad);
  return loss * weight;
}

TrainResult train(Model model, std::span<const TrainingExample> data, const TrainConfig& tc,
                  const TrainObserver& observer) {
  tc.validate();
  if (data.empty()) throw ConfigError("train: empty dataset");
  for (const TrainingExample& ex : data) check_example(model, ex);

  const std::size_t P = model.params().size();
  std::vector<double> grad(P), m1, m2;
  if (tc.optimizer == OptimizerKind::Adam) {
    m1.assign(P, 0.0);
    m2.assign(P, 0.0);
  }
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;

  std::mt19937_64 rng(tc.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  TrainResult result;
  result.trace.reserve(tc.steps);
  std::vector<double> slots;
  for (std::size_t step = 0; step < tc.steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    std::size_t n_tokens = 0;
    std::vector<std::size_t> batch(tc.batch_size);
    for (std::size_t& b : batch) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      b = order[cursor++];
      n_tokens += data[b].answer.size();
    }
    const double weight = 1.0 / static_cast<double>(n_tokens);
    // One gradient slot per example, summed in batch order, so the update does
    // not depend on the thread count.
    slots.resize(batch.size() * P);
    std::vector<double> losses(batch.size(), 0.0);
    std::exception_ptr failure;
#pragma omp parallel
    {
      detail::ForwardCache cache;
      Matrix dlogits;
#pragma omp for schedule(dynamic)
      for (std::size_t i = 0; i < batch.size(); ++i) {
        try {
          const TrainingExample& ex = data[batch[i]];
          std::span<double> g(slots.data() + i * P, P);
          std::fill(g.begin(), g.end(), 0.0);
          const std::vector<TokenId> tokens = input_tokens(ex);
          detail::forward_cached(model, tokens, nullptr, ex.context.size() - 1, cache, ex.positions);
          losses[i] = answer_cross_entropy(cache, ex.answer, weight, &dlogits);
          detail::backward(model, cache, dlogits, g);
        } catch (...) {
#pragma omp critical
          if (!failure) failure = std::current_exception();
        }
      }
    }
    if (failure) std::rethrow_exception(failure);
    double loss = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      loss += losses[i];
      const double* g = slots.data() + i * P;
      for (std::size_t j = 0; j < P; ++j) grad[j] += g[j];
    }
    loss *= weight;
    if (!std::isfinite(loss)) throw TrainingError(step, "loss became non-finite");

    double norm2 = 0.0;
    for (double g : grad) norm2 += g * g;
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm)) throw TrainingError(step, "gradient became non-finite");
    const double clip = norm > tc.gradient_clip ? tc.gradient_clip / norm : 1.0;

    const double lr = tc.lr_at(step);
    std::span<double> params = model.mutable_params();
    if (tc.optimizer == OptimizerKind::Sgd) {
      for (std::size_t i = 0; i < P; ++i) params[i] -= lr * clip * grad[i];
    } else {
      const double t = static_cast<double>(step + 1);
      const double c1 = 1.0 - std::pow(kBeta1, t);
      const double c2 = 1.0 - std::pow(kBeta2, t);
      for (std::size_t i = 0; i < P; ++i) {
        const double g = clip * grad[i];
        m1[i] = kBeta1 * m1[i] + (1.0 - kBeta1) * g;
        m2[i] = kBeta2 * m2[i] + (1.0 - kBeta2) * g * g;
        params[i] -= lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + kAdamEps);
      }
    }
    result.trace.push_back({step, loss});
    if (observer) observer(step, loss);
  }
  if (!model.all_finite()) throw TrainingError(tc.steps, "weights became non-finite");
  result.model = std::move(model);
  return result;
}

double token_accuracy(const Model& model, std::span<const TrainingExample> data) {
  std::size_t correct = 0, total = 0;
  detail::ForwardCache cache;
  for (const TrainingExample& ex : data) {
    check_example(model, ex);
    detail::forward_cached(model, input_tokens(ex), nullptr, ex.context.size() - 1, cache, ex.positions);
    for (std::size_t i = 0; i < ex.answer.size(); ++i) {
      const double* row = cache.logits.row(i);
      const auto best = std::max_element(row, row + cache.logits.cols()) - row;
      correct += static_cast<std::size_t>(best) == static_cast<std::size_t>(ex.answer[i]);
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

double relative_error(double analytic, double numeric) {
  constexpr double kGuard = 1e-6;
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGuard});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const Model& model, const TrainingExample& example, double epsilon,
                           std::size_t per_tensor, std::uint64_t seed) {
  if (!(epsilon >= 1e-6 && epsilon <= 1e-3)) {
    throw ConfigError("grad_check: epsilon must lie in [1e-6, 1e-3]");
  }
  std::vector<double> grad(model.params().size(), 0.0);
  const double base = example_loss(model, example, grad);
  if (!std::isfinite(base)) throw NumericError("grad_check: loss is not finite");

  // Perturb a private copy so the caller's model is never touched.
  Model probe = model;
  std::span<double> params = probe.mutable_params();
  std::mt19937_64 rng(seed);
  GradCheckReport report;
  for (const ParamBlock& block : model.layout().blocks) {
    std::vector<std::size_t> picks;
    if (block.size() <= per_tensor) {
      picks.resize(block.size());
      std::iota(picks.begin(), picks.end(), 0);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, block.size() - 1);
      for (std::size_t i = 0; i < per_tensor; ++i) picks.push_back(pick(rng));
    }
    // Embedding rows for tokens absent from the example have zero gradient;
    // bias the sample toward rows that are actually used.
    if (block.name == "tok_emb" && !example.context.empty()) {
      std::uniform_int_distribution<std::size_t> col(0, block.cols - 1);
      for (std::size_t i = 0; i < per_tensor; ++i) {
        const auto tok = static_cast<std::size_t>(example.context[i % example.context.size()]);
        picks.push_back(tok * block.cols + col(rng));
      }
    }
    for (std::size_t local : picks) {
      const std::size_t idx = block.offset + local;
      const double saved = params[idx];
      params[idx] = saved + epsilon;
      const double plus = example_loss(probe, example);
      params[idx] = saved - epsilon;
      const double minus = example_loss(probe, example);
      params[idx] = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NumericError("grad_check: non-finite loss while perturbing " + block.name);
      }
      const double numeric = (plus - minus) / (2.0 * epsilon);
      const double err = relative_error(grad[idx], numeric);
      if (err >= report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_tensor = block.name;
      }
      ++report.n_checked;
    }
  }
  return report;
}

void write_loss_csv(std::span<const LossPoint> trace, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open loss trace '" + path + "' for writing");
  out << "step,loss\n";
  char buf[64];
  for (const LossPoint& p : trace) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", p.step, p.loss);
    out << buf;
  }
  if (!out) throw IoError("failed writing loss trace '" + path + "'");
}

}  // namespace cram
