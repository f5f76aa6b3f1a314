#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "beam.hpp"
#include "checkpoint.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "vocab.hpp"

namespace pglab {

struct TrainConfig {
  double learning_rate = 0.15;
  double adagrad_init_accumulator = 0.1;
  double max_grad_norm = 2.0;
  int base_steps = 3000;       // phase 1: NLL only
  int extension_steps = 3000;  // phase 2: configured coverage/pointing losses
  int batch_size = 4;
  std::uint64_t seed = 1;
  PointingMode mode = PointingMode::none;
  bool coverage_on = false;
  double lambda_cov = 1.0;
  double lambda_p = -1.0;  // negative -> per-mode default
  double dropout_rate = 0.0;
  int eval_every = 0;  // progress prints to stdout; 0 disables

  void validate() const {
    if (learning_rate <= 0.0 || adagrad_init_accumulator <= 0.0 || max_grad_norm <= 0.0) {
      throw std::runtime_error("train: rates and norms must be positive");
    }
    if (base_steps < 0 || extension_steps < 0 || batch_size < 1) {
      throw std::runtime_error("train: bad step or batch counts");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw std::runtime_error("train: dropout_rate must be in [0,1)");
    }
  }

  double effective_lambda_p() const {
    return lambda_p >= 0.0 ? lambda_p : default_lambda_p(mode);
  }
};

// Per-parameter squared-gradient accumulators, aligned with params.named().
struct AdagradState {
  std::vector<std::vector<double>> acc;

  AdagradState() = default;
  AdagradState(const ModelParams& params, double init) {
    for (const auto& [name, t] : params.named()) {
      (void)name;
      acc.emplace_back(t.size(), init);
    }
  }
};

// Scales all gradients so the global L2 norm is at most max_norm; returns the
// scale applied (1 when already within bounds).
inline double clip_gradients(std::vector<std::pair<std::string, Tensor>>& named,
                             double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : named) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) {
      if (!std::isfinite(g)) {
        throw std::runtime_error("clip: non-finite gradient in " + name);
      }
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return 1.0;
  const double scale = max_norm / norm;
  for (auto& [name, t] : named) {
    (void)name;
    if (!t.has_grad()) continue;
    for (double& g : t.grad()) g *= scale;
  }
  return scale;
}

// acc += g²; θ −= lr·g/√acc. The initial accumulator doubles as the epsilon.
inline void adagrad_step(std::vector<std::pair<std::string, Tensor>>& named,
                         AdagradState& state, double lr) {
  for (std::size_t k = 0; k < named.size(); ++k) {
    Tensor& t = named[k].second;
    if (!t.has_grad()) continue;
    auto& acc = state.acc[k];
    auto& vals = t.values();
    const auto& grads = t.grad();
    for (std::size_t i = 0; i < grads.size(); ++i) {
      const double g = grads[i];
      if (g == 0.0) continue;
      acc[i] += g * g;
      vals[i] -= lr * g / std::sqrt(acc[i]);
    }
  }
}

namespace detail {

inline void log_row(std::ofstream& log, long long step, int phase, const LossBreakdown& bd,
                    double train_pgen) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%lld\t%d\t%.8g\t%.8g\t%.8g\t%.8g\n", step, phase, bd.nll,
                bd.coverage, bd.pointing, train_pgen);
  log << buf;
}

}  // namespace detail

// Runs the staged schedule over pre-encoded examples. Phase 1 trains NLL only;
// phase 2 adds the configured coverage/pointing losses. Pointer dropout (when
// configured) applies in both phases. Writes a TSV log, a checkpoint at the
// phase boundary (`<checkpoint>.base`) and the final checkpoint.
inline ModelParams train(const TrainConfig& cfg, const ModelConfig& model_cfg,
                         const std::vector<EncodedExample>& examples, const WordPrior* priors,
                         const std::string& checkpoint_path, const std::string& log_path) {
  cfg.validate();
  model_cfg.validate();
  if (examples.empty()) throw std::runtime_error("train: empty corpus");
  if (cfg.mode == PointingMode::word_prior && !priors) {
    throw std::runtime_error("train: word_prior mode needs priors");
  }

  Rng rng(cfg.seed);
  ModelParams params = init_params(model_cfg, rng);
  AdagradState state(params, cfg.adagrad_init_accumulator);
  auto named = params.named();

  std::ofstream log(log_path, std::ios::binary);
  if (!log) throw std::runtime_error("train: cannot write " + log_path);
  log << "step\tphase\tnll\tcov_loss\tpoint_loss\ttrain_pgen\n";

  const long long total_steps =
      static_cast<long long>(cfg.base_steps) + static_cast<long long>(cfg.extension_steps);
  if (total_steps == 0) {
    save_checkpoint(params, checkpoint_path);
    return params;
  }

  LossConfig phase1;  // NLL only
  LossConfig phase2;
  phase2.coverage_on = cfg.coverage_on;
  phase2.lambda_cov = cfg.lambda_cov;
  phase2.mode = cfg.mode;
  phase2.lambda_p = cfg.effective_lambda_p();

  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::size_t cursor = 0;
  auto next_example = [&]() -> std::size_t {
    if (cursor == order.size()) {
      rng.shuffle(order);
      cursor = 0;
    }
    return order[cursor++];
  };

  for (long long step = 1; step <= total_steps; ++step) {
    const int phase = step <= cfg.base_steps ? 1 : 2;
    const LossConfig& active = phase == 1 ? phase1 : phase2;
    params.zero_grads();

    LossBreakdown sums;
    double pgen_sum = 0.0;
    long long pgen_count = 0;
    const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
    for (int b = 0; b < cfg.batch_size; ++b) {
      const EncodedExample& ex = examples[next_example()];
      ForwardFlags flags;
      flags.coverage_on = active.coverage_on;
      flags.dropout_forced =
          cfg.dropout_rate > 0.0 && pointer_dropout_decision(cfg.dropout_rate, rng);
      Graph graph;
      const auto steps = forward_teacher_forced(ex, params, flags);
      LossBreakdown bd;
      Tensor loss = total_loss(steps, ex, active, priors, &bd);
      if (!std::isfinite(loss.value())) {
        throw std::runtime_error("train: loss diverged at step " + std::to_string(step));
      }
      graph.backward(scale(loss, inv_batch));
      sums.nll += bd.nll;
      sums.coverage += bd.coverage;
      sums.pointing += bd.pointing;
      for (const StepOutput& s : steps) {
        pgen_sum += s.p_gen.value();
        ++pgen_count;
      }
    }
    clip_gradients(named, cfg.max_grad_norm);
    adagrad_step(named, state, cfg.learning_rate);

    LossBreakdown mean{sums.nll * inv_batch, sums.coverage * inv_batch, sums.pointing * inv_batch};
    const double train_pgen = pgen_sum / static_cast<double>(pgen_count);
    detail::log_row(log, step, phase, mean, train_pgen);
    if (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
      std::printf("step %lld/%lld phase %d nll %.4f cov %.4f point %.4f pgen %.3f\n", step,
                  total_steps, phase, mean.nll, mean.coverage, mean.pointing, train_pgen);
      std::fflush(stdout);
    }
    if (step == cfg.base_steps && cfg.extension_steps > 0) {
      save_checkpoint(params, checkpoint_path + ".base");
    }
  }
  save_checkpoint(params, checkpoint_path);
  return params;
}

enum class PgenMode { teacher_forced, decoded };

// Token-weighted mean p_gen across the corpus. teacher_forced mirrors training
// conditions minus dropout; decoded averages over beam-search emissions.
inline double average_pgen(const ModelParams& params, const std::vector<EncodedExample>& examples,
                           PgenMode mode, const BeamConfig& beam = BeamConfig{}) {
  double sum = 0.0;
  long long count = 0;
  for (const EncodedExample& ex : examples) {
    if (mode == PgenMode::teacher_forced) {
      ForwardFlags flags;
      flags.coverage_on = beam.coverage_on;
      for (const StepOutput& s : forward_teacher_forced(ex, params, flags)) {
        sum += s.p_gen.value();
        ++count;
      }
    } else {
      Hypothesis hyp = beam_search(ex, params, beam);
      for (double v : hyp.pgen_trace) {
        sum += v;
        ++count;
      }
    }
  }
  if (count == 0) throw std::runtime_error("average_pgen: no tokens");
  return sum / static_cast<double>(count);
}

}  // namespace pglab
