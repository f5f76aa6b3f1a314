#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "model.hpp"
#include "tensor.hpp"
#include "vocab.hpp"

namespace pglab {

namespace detail {

// n-grams as joined keys; \x1f cannot occur inside a token.
inline std::vector<std::string> ngram_keys(const std::vector<std::string>& tokens, int n) {
  std::vector<std::string> out;
  if (n < 1) throw std::runtime_error("ngrams: n must be >= 1");
  if (static_cast<int>(tokens.size()) < n) return out;
  out.reserve(tokens.size() - static_cast<std::size_t>(n) + 1);
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (int k = 1; k < n; ++k) {
      key += '\x1f';
      key += tokens[i + static_cast<std::size_t>(k)];
    }
    out.push_back(std::move(key));
  }
  return out;
}

inline std::map<std::string, int> count_keys(const std::vector<std::string>& keys) {
  std::map<std::string, int> out;
  for (const auto& k : keys) ++out[k];
  return out;
}

inline double f1_from(double matched, double n_cand, double n_ref) {
  if (matched <= 0.0 || n_cand <= 0.0 || n_ref <= 0.0) return 0.0;
  const double p = matched / n_cand;
  const double r = matched / n_ref;
  return 2.0 * p * r / (p + r);
}

}  // namespace detail

// Clipped n-gram overlap F1: each reference n-gram can be matched at most as
// often as it occurs in the reference.
inline double rouge_n(const std::vector<std::string>& candidate,
                      const std::vector<std::string>& reference, int n) {
  const auto cand = detail::ngram_keys(candidate, n);
  const auto ref = detail::ngram_keys(reference, n);
  auto budget = detail::count_keys(ref);
  int matched = 0;
  for (const auto& k : cand) {
    auto it = budget.find(k);
    if (it != budget.end() && it->second > 0) {
      --it->second;
      ++matched;
    }
  }
  return detail::f1_from(matched, static_cast<double>(cand.size()),
                         static_cast<double>(ref.size()));
}

// Longest-common-subsequence F1.
inline double rouge_l(const std::vector<std::string>& candidate,
                      const std::vector<std::string>& reference) {
  const std::size_t m = candidate.size(), n = reference.size();
  if (m == 0 || n == 0) return 0.0;
  std::vector<int> prev(n + 1, 0), cur(n + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1
                                                    : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return detail::f1_from(prev[n], static_cast<double>(m), static_cast<double>(n));
}

// Percentage of the summary's n-grams absent from `versus` (the source by
// default; pass the reference for reference-relative novelty). Distinct-set
// semantics unless `multiset`, which counts occurrences clipped against the
// versus-side multiplicities.
inline double novelty(const std::vector<std::string>& summary,
                      const std::vector<std::string>& versus, int n, bool multiset = false) {
  const auto sum_keys = detail::ngram_keys(summary, n);
  if (sum_keys.empty()) return 0.0;
  const auto versus_counts = detail::count_keys(detail::ngram_keys(versus, n));
  if (!multiset) {
    const auto distinct = detail::count_keys(sum_keys);
    int novel = 0;
    for (const auto& [k, c] : distinct) {
      (void)c;
      if (!versus_counts.count(k)) ++novel;
    }
    return 100.0 * novel / static_cast<double>(distinct.size());
  }
  auto budget = versus_counts;
  int matched = 0;
  for (const auto& k : sum_keys) {
    auto it = budget.find(k);
    if (it != budget.end() && it->second > 0) {
      --it->second;
      ++matched;
    }
  }
  return 100.0 * (static_cast<double>(sum_keys.size()) - matched) /
         static_cast<double>(sum_keys.size());
}

// Sentences are maximal runs between period tokens; empty runs drop out.
inline std::vector<std::vector<std::string>> split_sentences(
    const std::vector<std::string>& tokens) {
  std::vector<std::vector<std::string>> out;
  std::vector<std::string> cur;
  for (const auto& t : tokens) {
    if (t == ".") {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(t);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// Percentage of summary sentences whose token run appears nowhere in `versus`
// as a contiguous span.
inline double novel_sentence_pct(const std::vector<std::string>& summary,
                                 const std::vector<std::string>& versus) {
  const auto sum_sents = split_sentences(summary);
  if (sum_sents.empty()) return 0.0;
  int novel = 0;
  for (const auto& s : sum_sents) {
    if (std::search(versus.begin(), versus.end(), s.begin(), s.end()) == versus.end()) ++novel;
  }
  return 100.0 * novel / static_cast<double>(sum_sents.size());
}

// Share of repeated n-grams within one summary: 1 − distinct/total.
inline double duplication(const std::vector<std::string>& summary, int n) {
  const auto keys = detail::ngram_keys(summary, n);
  if (keys.empty()) return 0.0;
  const auto distinct = detail::count_keys(keys);
  return 100.0 * (1.0 - static_cast<double>(distinct.size()) / static_cast<double>(keys.size()));
}

inline double dup_sentence_pct(const std::vector<std::string>& summary) {
  const auto sents = split_sentences(summary);
  if (sents.empty()) return 0.0;
  std::vector<std::vector<std::string>> distinct;
  for (const auto& s : sents) {
    if (std::find(distinct.begin(), distinct.end(), s) == distinct.end()) distinct.push_back(s);
  }
  return 100.0 * (1.0 - static_cast<double>(distinct.size()) / static_cast<double>(sents.size()));
}

// Attention traces: [example][step][head][source position].
using AttnTrace = std::vector<std::vector<std::vector<std::vector<double>>>>;

// Teacher-forced attention extraction, so traces from different models over
// the same corpus stay aligned step for step.
inline AttnTrace collect_attention(const ModelParams& params,
                                   const std::vector<EncodedExample>& examples,
                                   bool coverage_on = false) {
  AttnTrace trace;
  trace.reserve(examples.size());
  ForwardFlags flags;
  flags.coverage_on = coverage_on;
  for (const EncodedExample& ex : examples) {
    std::vector<std::vector<std::vector<double>>> per_step;
    for (const StepOutput& s : forward_teacher_forced(ex, params, flags)) {
      std::vector<std::vector<double>> heads;
      heads.reserve(s.attn.size());
      for (const AttentionResult& r : s.attn) heads.push_back(r.a.values());
      per_step.push_back(std::move(heads));
    }
    trace.push_back(std::move(per_step));
  }
  return trace;
}

namespace detail {

inline double kl_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw std::runtime_error("kl: traces misaligned");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;  // 0·log 0 term stays 0 under the clamp
    acc += p[i] * (std::log(std::max(p[i], kLogFloor)) - std::log(std::max(q[i], kLogFloor)));
  }
  return acc;
}

}  // namespace detail

// Mean pairwise KL between heads of trace_a; when trace_b (single-head) is
// given, an extra final column holds KL(head_i of A ‖ the sole head of B).
inline std::vector<std::vector<double>> kl_matrix(const AttnTrace& trace_a,
                                                  const AttnTrace* trace_b = nullptr) {
  if (trace_a.empty() || trace_a[0].empty()) throw std::runtime_error("kl: empty trace");
  const std::size_t heads = trace_a[0][0].size();
  if (heads == 0) throw std::runtime_error("kl: empty trace");
  if (trace_b) {
    if (trace_b->size() != trace_a.size()) throw std::runtime_error("kl: traces misaligned");
  }
  const std::size_t cols = heads + (trace_b ? 1 : 0);
  std::vector<std::vector<double>> sums(heads, std::vector<double>(cols, 0.0));
  long long steps = 0;
  for (std::size_t e = 0; e < trace_a.size(); ++e) {
    const auto& ex_a = trace_a[e];
    if (trace_b && (*trace_b)[e].size() != ex_a.size()) {
      throw std::runtime_error("kl: traces misaligned");
    }
    for (std::size_t t = 0; t < ex_a.size(); ++t) {
      const auto& step_a = ex_a[t];
      if (step_a.size() != heads) throw std::runtime_error("kl: traces misaligned");
      const std::vector<double>* b_row = nullptr;
      if (trace_b) {
        const auto& step_b = (*trace_b)[e][t];
        if (step_b.size() != 1) {
          throw std::runtime_error("kl: second trace must have exactly one head");
        }
        b_row = &step_b[0];
      }
      for (std::size_t i = 0; i < heads; ++i) {
        for (std::size_t j = 0; j < heads; ++j) {
          sums[i][j] += detail::kl_divergence(step_a[i], step_a[j]);
        }
        if (b_row) sums[i][heads] += detail::kl_divergence(step_a[i], *b_row);
      }
      ++steps;
    }
  }
  if (steps == 0) throw std::runtime_error("kl: empty trace");
  for (auto& row : sums) {
    for (double& v : row) v /= static_cast<double>(steps);
  }
  return sums;
}

// Two-sided Wilcoxon signed-rank test. Small samples (n ≤ 20 nonzero
// differences) use the exact conditional sign-flip distribution over the
// observed average ranks; larger samples use the normal approximation with
// tie-corrected variance and a continuity correction.
inline double wilcoxon(const std::vector<double>& scores_a, const std::vector<double>& scores_b) {
  if (scores_a.size() != scores_b.size()) {
    throw std::runtime_error("wilcoxon: unequal sample sizes");
  }
  std::vector<double> diffs;
  for (std::size_t i = 0; i < scores_a.size(); ++i) {
    const double d = scores_b[i] - scores_a[i];
    if (d != 0.0) diffs.push_back(d);
  }
  if (diffs.empty()) throw std::runtime_error("wilcoxon: degenerate sample");
  const std::size_t n = diffs.size();
  if (n < 6) throw std::runtime_error("wilcoxon: need at least 6 nonzero differences");

  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
    return std::abs(diffs[x]) < std::abs(diffs[y]);
  });
  std::vector<double> rank(n, 0.0);
  double tie_correction = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && std::abs(diffs[idx[j]]) == std::abs(diffs[idx[i]])) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) rank[idx[k]] = avg;
    const double t = static_cast<double>(j - i);
    tie_correction += (t * t * t - t) / 48.0;
    i = j;
  }

  double w_plus = 0.0, w_minus = 0.0;
  for (std::size_t k = 0; k < n; ++k) (diffs[k] > 0.0 ? w_plus : w_minus) += rank[k];
  const double w = std::min(w_plus, w_minus);

  if (n <= 20) {
    // Doubled ranks are integers, so the null distribution of 2·W⁺ over all
    // 2^n sign assignments tabulates exactly.
    const int total = static_cast<int>(n) * (static_cast<int>(n) + 1);
    std::vector<double> count(static_cast<std::size_t>(total) + 1, 0.0);
    count[0] = 1.0;
    for (std::size_t k = 0; k < n; ++k) {
      const int r2 = static_cast<int>(std::lround(2.0 * rank[k]));
      for (int s = total; s >= r2; --s) {
        count[static_cast<std::size_t>(s)] += count[static_cast<std::size_t>(s - r2)];
      }
    }
    const int w2 = static_cast<int>(std::lround(2.0 * w));
    double hits = 0.0, mass = 0.0;
    for (int s = 0; s <= total; ++s) {
      const double c = count[static_cast<std::size_t>(s)];
      mass += c;
      if (std::min(s, total - s) <= w2) hits += c;
    }
    return hits / mass;
  }

  const double nd = static_cast<double>(n);
  const double mu = nd * (nd + 1.0) / 4.0;
  const double sigma = std::sqrt(nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0 - tie_correction);
  const double z = (w - mu + 0.5) / sigma;
  return std::min(1.0, std::erfc(-z / std::sqrt(2.0)));  // 2·Φ(z)
}

struct MetricReport {
  double rouge1 = 0.0, rouge2 = 0.0, rougeL = 0.0;
  std::array<double, 4> novel_ngram{};  // n = 1..4
  double novel_sentence = 0.0;
  std::array<double, 4> dup_ngram{};
  double dup_sentence = 0.0;
  double avg_pgen = 0.0;
  double mean_summary_len = 0.0;
};

struct PerExampleScores {
  std::vector<double> rouge1, rouge2, rougeL;
};

// Corpus-level aggregation: mean per-example metrics, source-relative novelty,
// token-weighted average p_gen from the decode traces when provided.
inline MetricReport evaluate(const std::vector<std::vector<std::string>>& summaries,
                             const std::vector<std::vector<std::string>>& references,
                             const std::vector<std::vector<std::string>>& sources,
                             const std::vector<std::vector<double>>* pgen_traces = nullptr,
                             PerExampleScores* per_example = nullptr,
                             bool reference_relative_novelty = false,
                             bool novelty_multiset = false) {
  const std::size_t n = summaries.size();
  auto mismatch = [&](const char* what, std::size_t got) {
    throw std::runtime_error("eval: " + std::to_string(n) + " summaries vs " +
                             std::to_string(got) + " " + what);
  };
  if (references.size() != n) mismatch("references", references.size());
  if (sources.size() != n) mismatch("sources", sources.size());
  if (pgen_traces && pgen_traces->size() != n) mismatch("pgen traces", pgen_traces->size());
  if (n == 0) throw std::runtime_error("eval: empty corpus");

  MetricReport rep;
  if (per_example) *per_example = PerExampleScores{};
  double pgen_sum = 0.0;
  long long pgen_count = 0;
  for (std::size_t e = 0; e < n; ++e) {
    const auto& sum = summaries[e];
    const auto& versus = reference_relative_novelty ? references[e] : sources[e];
    const double r1 = rouge_n(sum, references[e], 1);
    const double r2 = rouge_n(sum, references[e], 2);
    const double rl = rouge_l(sum, references[e]);
    rep.rouge1 += r1;
    rep.rouge2 += r2;
    rep.rougeL += rl;
    if (per_example) {
      per_example->rouge1.push_back(r1);
      per_example->rouge2.push_back(r2);
      per_example->rougeL.push_back(rl);
    }
    for (int k = 0; k < 4; ++k) {
      rep.novel_ngram[static_cast<std::size_t>(k)] += novelty(sum, versus, k + 1, novelty_multiset);
      rep.dup_ngram[static_cast<std::size_t>(k)] += duplication(sum, k + 1);
    }
    rep.novel_sentence += novel_sentence_pct(sum, versus);
    rep.dup_sentence += dup_sentence_pct(sum);
    rep.mean_summary_len += static_cast<double>(sum.size());
    if (pgen_traces) {
      for (double g : (*pgen_traces)[e]) {
        pgen_sum += g;
        ++pgen_count;
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  rep.rouge1 *= inv;
  rep.rouge2 *= inv;
  rep.rougeL *= inv;
  for (double& v : rep.novel_ngram) v *= inv;
  for (double& v : rep.dup_ngram) v *= inv;
  rep.novel_sentence *= inv;
  rep.dup_sentence *= inv;
  rep.mean_summary_len *= inv;
  rep.avg_pgen = pgen_count > 0 ? pgen_sum / static_cast<double>(pgen_count) : 0.0;
  return rep;
}

inline std::string report_tsv(const MetricReport& rep) {
  std::string out;
  char buf[64];
  auto put = [&](const char* name, double v) {
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    out += name;
    out += '\t';
    out += buf;
    out += '\n';
  };
  put("rouge1", rep.rouge1);
  put("rouge2", rep.rouge2);
  put("rougeL", rep.rougeL);
  for (int k = 0; k < 4; ++k) {
    const std::string name = "novel_" + std::to_string(k + 1) + "gram";
    put(name.c_str(), rep.novel_ngram[static_cast<std::size_t>(k)]);
  }
  put("novel_sentence", rep.novel_sentence);
  for (int k = 0; k < 4; ++k) {
    const std::string name = "dup_" + std::to_string(k + 1) + "gram";
    put(name.c_str(), rep.dup_ngram[static_cast<std::size_t>(k)]);
  }
  put("dup_sentence", rep.dup_sentence);
  put("avg_pgen", rep.avg_pgen);
  put("mean_summary_len", rep.mean_summary_len);
  return out;
}

}  // namespace pglab
