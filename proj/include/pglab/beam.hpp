#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "corpus.hpp"
#include "model.hpp"
#include "vocab.hpp"

namespace pglab {

struct BeamConfig {
  int beam_size = 4;
  int max_len = 100;
  int min_len = 1;
  bool length_normalize = true;  // final ranking by logprob / emitted length
  bool coverage_on = false;

  void validate() const {
    if (beam_size < 1) throw std::runtime_error("beam: beam_size must be >= 1");
    if (min_len < 1 || max_len < min_len) throw std::runtime_error("beam: bad length bounds");
  }
};

struct Hypothesis {
  std::vector<int> tokens;  // emitted extended ids; STOP itself is not stored
  double log_prob = 0.0;    // includes the STOP factor when finished by STOP
  Tensor s, cell;
  Tensor coverage;
  std::vector<double> pgen_trace;                       // per emitted token
  std::vector<std::vector<std::vector<double>>> attn;   // [token][head][src pos]
  bool finished = false;

  double score(bool normalize) const {
    return normalize ? log_prob / static_cast<double>(std::max<std::size_t>(1, tokens.size()))
                     : log_prob;
  }
};

namespace detail {

// Emitted extended-OOV ids feed the UNK embedding at the next step.
inline int beam_input_id(int token, int vocab_size) {
  return token < vocab_size ? token : kUnk;
}

inline bool better_hypothesis(const Hypothesis& a, const Hypothesis& b, bool normalize) {
  const double sa = a.score(normalize), sb = b.score(normalize);
  if (sa != sb) return sa > sb;
  return a.tokens < b.tokens;
}

}  // namespace detail

// Standard beam search over the extended vocabulary. Expansion ties break
// toward the lower token id; final ties toward the lexicographically smaller
// sequence. PAD and START are never emitted; UNK may be.
inline Hypothesis beam_search(const EncodedExample& ex, const ModelParams& params,
                              const BeamConfig& cfg) {
  cfg.validate();
  const int V = params.cfg.vocab_size;
  const int ext_size = ex.extended_size(V);
  EncoderOutput enc = encode(ex.source_ids, params);
  ForwardFlags flags;
  flags.coverage_on = cfg.coverage_on;

  Hypothesis seed;
  seed.s = enc.s0;
  seed.cell = enc.cell0;
  seed.coverage = Tensor::zeros({static_cast<int>(ex.source_ids.size())});
  std::vector<Hypothesis> live{std::move(seed)};
  std::vector<Hypothesis> finished;

  for (int depth = 0; depth < cfg.max_len && !live.empty(); ++depth) {
    std::vector<Hypothesis> pool;
    pool.reserve(live.size() * static_cast<std::size_t>(cfg.beam_size));
    for (Hypothesis& hyp : live) {
      const int input =
          hyp.tokens.empty() ? kStart : detail::beam_input_id(hyp.tokens.back(), V);
      StepOutput out = decode_step(input, hyp.s, hyp.cell, hyp.coverage, enc, ex, params, flags);
      const bool stop_ok = static_cast<int>(hyp.tokens.size()) >= cfg.min_len;

      // Top beam_size continuations by log p, ties to the lower id.
      std::vector<std::pair<double, int>> ranked;
      ranked.reserve(static_cast<std::size_t>(ext_size));
      for (int w = 0; w < ext_size; ++w) {
        if (w == kPad || w == kStart) continue;
        if (w == kStop && !stop_ok) continue;
        ranked.emplace_back(std::log(std::max(out.p_final.value(static_cast<std::size_t>(w)),
                                              kLogFloor)),
                            w);
      }
      const std::size_t keep = std::min<std::size_t>(ranked.size(),
                                                     static_cast<std::size_t>(cfg.beam_size));
      std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(keep),
                        ranked.end(), [](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first > b.first;
                          return a.second < b.second;
                        });
      ranked.resize(keep);

      for (const auto& [logp, w] : ranked) {
        Hypothesis next = hyp;  // shared-Tensor copies are cheap
        next.log_prob += logp;
        if (w == kStop) {
          next.finished = true;
          finished.push_back(std::move(next));
          continue;
        }
        next.tokens.push_back(w);
        next.s = out.s;
        next.cell = out.cell;
        next.coverage = add(hyp.coverage, out.pointer_attn);
        next.pgen_trace.push_back(out.p_gen.value());
        std::vector<std::vector<double>> heads;
        heads.reserve(out.attn.size());
        for (const AttentionResult& r : out.attn) heads.push_back(r.a.values());
        next.attn.push_back(std::move(heads));
        pool.push_back(std::move(next));
      }
    }
    // Keep the global top beam_size unfinished by cumulative log-probability.
    std::sort(pool.begin(), pool.end(), [](const Hypothesis& a, const Hypothesis& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      return a.tokens < b.tokens;
    });
    if (pool.size() > static_cast<std::size_t>(cfg.beam_size)) {
      pool.resize(static_cast<std::size_t>(cfg.beam_size));
    }
    live = std::move(pool);
  }
  // Length-capped survivors compete with STOP-finished ones.
  for (Hypothesis& hyp : live) finished.push_back(std::move(hyp));
  if (finished.empty()) throw std::runtime_error("beam: no hypothesis produced");
  Hypothesis* best = &finished[0];
  for (Hypothesis& hyp : finished) {
    if (detail::better_hypothesis(hyp, *best, cfg.length_normalize)) best = &hyp;
  }
  return std::move(*best);
}

inline std::vector<std::string> hypothesis_tokens(const Hypothesis& hyp, const Vocabulary& vocab,
                                                  const std::vector<std::string>& oov_tokens) {
  std::vector<std::string> out;
  out.reserve(hyp.tokens.size());
  for (int id : hyp.tokens) out.push_back(extended_token(id, vocab, oov_tokens));
  return out;
}

// Decodes every example (order-preserving, optionally across threads) and
// writes the summaries and trace files.
inline std::vector<Hypothesis> decode_corpus(const std::vector<Example>& corpus,
                                             const Vocabulary& vocab, const ModelParams& params,
                                             const BeamConfig& cfg, int max_src, int max_tgt,
                                             const std::string& summary_path,
                                             const std::string& trace_path, int n_threads = 1) {
  std::vector<EncodedExample> encoded;
  encoded.reserve(corpus.size());
  for (const Example& ex : corpus) {
    encoded.push_back(encode_example(ex.source, ex.target, vocab, max_src, max_tgt));
  }
  std::vector<Hypothesis> results(encoded.size());
  if (n_threads < 1) n_threads = 1;
  n_threads = std::min<int>(n_threads, static_cast<int>(std::max<std::size_t>(1, encoded.size())));
  if (n_threads <= 1) {
    for (std::size_t i = 0; i < encoded.size(); ++i) {
      results[i] = beam_search(encoded[i], params, cfg);
    }
  } else {
    std::atomic<std::size_t> cursor{0};
    auto worker = [&] {
      for (;;) {
        const std::size_t i = cursor.fetch_add(1);
        if (i >= encoded.size()) return;
        results[i] = beam_search(encoded[i], params, cfg);
      }
    };
    std::vector<std::thread> threads;
    for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }

  std::ofstream summaries(summary_path, std::ios::binary);
  if (!summaries) throw std::runtime_error("decode: cannot write " + summary_path);
  std::ofstream trace(trace_path, std::ios::binary);
  if (!trace) throw std::runtime_error("decode: cannot write " + trace_path);
  char buf[64];
  for (std::size_t i = 0; i < results.size(); ++i) {
    const Hypothesis& hyp = results[i];
    const auto words = hypothesis_tokens(hyp, vocab, encoded[i].oov_tokens);
    summaries << join_tokens(words) << '\n';
    trace << "#example " << i << '\n';
    for (std::size_t t = 0; t < words.size(); ++t) {
      std::snprintf(buf, sizeof(buf), "%.6g", hyp.pgen_trace[t]);
      trace << words[t] << '\t' << buf << '\t';
      const auto& pointer_row = hyp.attn[t][0];
      for (std::size_t j = 0; j < pointer_row.size(); ++j) {
        if (j) trace << ',';
        std::snprintf(buf, sizeof(buf), "%.6g", pointer_row[j]);
        trace << buf;
      }
      trace << '\n';
    }
  }
  return results;
}

}  // namespace pglab
