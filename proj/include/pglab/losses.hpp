#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "model.hpp"
#include "tensor.hpp"
#include "vocab.hpp"

namespace pglab {

enum class PointingMode { none, naive, word_prior };

inline PointingMode pointing_mode_from(const std::string& s) {
  if (s == "none") return PointingMode::none;
  if (s == "naive") return PointingMode::naive;
  if (s == "word_prior") return PointingMode::word_prior;
  throw std::runtime_error("loss: unknown pointing mode '" + s + "'");
}

inline const char* pointing_mode_name(PointingMode m) {
  switch (m) {
    case PointingMode::none: return "none";
    case PointingMode::naive: return "naive";
    default: return "word_prior";
  }
}

// Default pointing-loss weights per mode.
inline double default_lambda_p(PointingMode m) {
  switch (m) {
    case PointingMode::naive: return 0.05;
    case PointingMode::word_prior: return 0.2;
    default: return 0.0;
  }
}

struct LossConfig {
  double lambda_cov = 1.0;
  double lambda_p = 0.0;
  PointingMode mode = PointingMode::none;
  bool coverage_on = false;

  void validate() const {
    if (lambda_cov < 0.0 || lambda_p < 0.0) throw std::runtime_error("loss: negative weight");
  }
};

// (1/T) Σ_t −log p(w*_t) over the extended distribution, with the clamped log.
inline Tensor nll_loss(const std::vector<StepOutput>& steps,
                       const std::vector<int>& target_ext_ids) {
  const std::size_t T = steps.size();
  if (T == 0 || target_ext_ids.size() != T + 1) {
    throw std::runtime_error("nll: steps and targets misaligned");
  }
  std::vector<Tensor> picks;
  picks.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    picks.push_back(pick(steps[t].p_final, target_ext_ids[t + 1]));
  }
  return scale(negate(sum(log_clamped(concat(picks)))), 1.0 / static_cast<double>(T));
}

// (λ/T) Σ_t Σ_i min(a^t_i, c^t_i) over the pointer head.
inline Tensor coverage_loss(const std::vector<StepOutput>& steps, double lambda_cov) {
  const std::size_t T = steps.size();
  if (T == 0) throw std::runtime_error("coverage loss: no steps");
  std::vector<Tensor> terms;
  terms.reserve(T);
  for (const StepOutput& s : steps) {
    terms.push_back(sum(minimum(s.pointer_attn, s.coverage)));
  }
  return scale(sum(concat(terms)), lambda_cov / static_cast<double>(T));
}

// λ_p Σ_t (1 − p_gen^t): a raw sum over steps, deliberately unaveraged.
inline Tensor naive_pointing_loss(const std::vector<StepOutput>& steps, double lambda_p) {
  if (steps.empty()) throw std::runtime_error("naive loss: no steps");
  std::vector<Tensor> terms;
  terms.reserve(steps.size());
  for (const StepOutput& s : steps) {
    terms.push_back(sub(Tensor::scalar(1.0), s.p_gen));
  }
  return scale(sum(concat(terms)), lambda_p);
}

// The per-step cross-entropy factor of the word-prior loss:
//   ce_t = −Σ_i prior(word at source position i) · log(1 − p_a^t(i)).
// Plain values, no graph involvement.
inline std::vector<double> word_prior_ce_values(const std::vector<StepOutput>& steps,
                                                const WordPrior& priors,
                                                const EncodedExample& ex) {
  std::vector<double> out;
  out.reserve(steps.size());
  for (const StepOutput& s : steps) {
    const auto& a = s.pointer_attn.values();
    double ce = 0.0;
    for (std::size_t i = 0; i < ex.source_ids.size(); ++i) {
      const double pw = priors.of(ex.source_ids[i]);
      if (pw == 0.0) continue;
      ce -= pw * std::log(std::max(1.0 - a[i], kLogFloor));
    }
    out.push_back(ce);
  }
  return out;
}

// λ_p Σ_t p_point^t · ce_t with ce_t detached from the graph, so gradients
// reach the switch path only. `frozen_ce` substitutes externally captured ce
// values (the finite-difference oracle for the detachment uses this).
inline Tensor word_prior_pointing_loss(const std::vector<StepOutput>& steps,
                                       const WordPrior& priors, const EncodedExample& ex,
                                       double lambda_p,
                                       const std::vector<double>* frozen_ce = nullptr) {
  if (steps.empty()) throw std::runtime_error("word-prior loss: no steps");
  const std::vector<double> ce =
      frozen_ce ? *frozen_ce : word_prior_ce_values(steps, priors, ex);
  if (ce.size() != steps.size()) {
    throw std::runtime_error("word-prior loss: ce trace misaligned");
  }
  std::vector<Tensor> terms;
  terms.reserve(steps.size());
  for (std::size_t t = 0; t < steps.size(); ++t) {
    Tensor p_point = sub(Tensor::scalar(1.0), steps[t].p_gen);
    terms.push_back(mul(p_point, Tensor::scalar(ce[t])));
  }
  return scale(sum(concat(terms)), lambda_p);
}

struct LossBreakdown {
  double nll = 0.0;
  double coverage = 0.0;
  double pointing = 0.0;
};

// nll + optional coverage term + mode-selected pointing term. `priors` is
// required in word_prior mode only.
inline Tensor total_loss(const std::vector<StepOutput>& steps, const EncodedExample& ex,
                         const LossConfig& cfg, const WordPrior* priors = nullptr,
                         LossBreakdown* breakdown = nullptr) {
  cfg.validate();
  Tensor total = nll_loss(steps, ex.target_ext_ids);
  LossBreakdown bd;
  bd.nll = total.value();
  if (cfg.coverage_on) {
    Tensor cov = coverage_loss(steps, cfg.lambda_cov);
    bd.coverage = cov.value();
    total = add(total, cov);
  }
  if (cfg.mode == PointingMode::naive) {
    Tensor point = naive_pointing_loss(steps, cfg.lambda_p);
    bd.pointing = point.value();
    total = add(total, point);
  } else if (cfg.mode == PointingMode::word_prior) {
    if (!priors) throw std::runtime_error("loss: word_prior mode needs priors");
    Tensor point = word_prior_pointing_loss(steps, *priors, ex, cfg.lambda_p);
    bd.pointing = point.value();
    total = add(total, point);
  }
  if (breakdown) *breakdown = bd;
  return total;
}

}  // namespace pglab
