#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "corpus.hpp"
#include "rng.hpp"

namespace pglab {

// Desk-scale summarization task. Sources mix Zipf-distributed content words
// ("w<k>"), rare per-example entity names ("e<j>", never frequent enough to
// enter the vocabulary, so copyable only via the pointer), and period tokens.
// Targets take the leading content/entity tokens and substitute synonyms
// ("y<k>", which never appear in sources, so producible only via the
// generator).
struct SynthConfig {
  std::uint64_t seed = 1;
  int n_examples = 2000;  // train split; val and test each get n/10 (at least 1)
  int vocab_core_size = 146;
  double entity_rate = 0.1;    // chance a non-period source slot holds an entity
  std::string synonym_spec;    // "tok:rep,tok:rep"; empty -> every 3rd core token
  int src_len_min = 30;
  int src_len_max = 60;
  int target_k = 8;  // leading non-period source tokens kept in the target

  void validate() const {
    if (n_examples < 1) throw std::runtime_error("synth: n_examples must be >= 1");
    if (vocab_core_size < 1) throw std::runtime_error("synth: vocab_core_size must be >= 1");
    if (!(entity_rate >= 0.0 && entity_rate <= 1.0)) {
      throw std::runtime_error("synth: entity_rate must be in [0,1]");
    }
    if (src_len_min < 2 || src_len_max < src_len_min) {
      throw std::runtime_error("synth: bad source length range");
    }
    if (target_k < 1) throw std::runtime_error("synth: target_k must be >= 1");
  }
};

inline std::unordered_map<std::string, std::string> parse_synonym_map(const std::string& spec,
                                                                      int core_size) {
  std::unordered_map<std::string, std::string> map;
  if (spec.empty()) {
    // One synonym per three core tokens, drawn from the frequent end (stride
    // 2) so every synonym occurs often enough to hold a vocabulary slot.
    const int n_syn = (core_size + 2) / 3;
    for (int i = 0; i < n_syn; ++i) {
      const int k = 2 * i;
      map.emplace("w" + std::to_string(k), "y" + std::to_string(k));
    }
    return map;
  }
  std::size_t pos = 0;
  while (pos < spec.size()) {
    auto comma = spec.find(',', pos);
    if (comma == std::string::npos) comma = spec.size();
    const std::string pair = spec.substr(pos, comma - pos);
    auto colon = pair.find(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == pair.size()) {
      throw std::runtime_error("synth: bad synonym pair '" + pair + "'");
    }
    map.emplace(pair.substr(0, colon), pair.substr(colon + 1));
    pos = comma + 1;
  }
  return map;
}

namespace detail {

// Draws ranks with probability proportional to 1/(rank+1): a Zipf(s=1) law.
class ZipfSampler {
 public:
  explicit ZipfSampler(int n) : cumulative_(static_cast<std::size_t>(n)) {
    double acc = 0.0;
    for (int k = 0; k < n; ++k) {
      acc += 1.0 / static_cast<double>(k + 1);
      cumulative_[static_cast<std::size_t>(k)] = acc;
    }
    for (double& c : cumulative_) c /= acc;
  }

  int draw(Rng& rng) const {
    const double u = rng.next_double();
    auto it = std::lower_bound(cumulative_.begin(), cumulative_.end(), u);
    if (it == cumulative_.end()) --it;
    return static_cast<int>(it - cumulative_.begin());
  }

 private:
  std::vector<double> cumulative_;
};

inline Example make_synthetic_example(const SynthConfig& cfg, const ZipfSampler& zipf,
                                      const std::unordered_map<std::string, std::string>& syn,
                                      Rng& rng, long long& entity_counter) {
  Example ex;
  const int len = cfg.src_len_min +
                  static_cast<int>(rng.next_below(
                      static_cast<std::uint64_t>(cfg.src_len_max - cfg.src_len_min + 1)));

  int until_period = 6 + static_cast<int>(rng.next_below(5));
  // Lead slots (the ones the target will copy) draw content uniformly so every
  // synonym base stays corpus-frequent; the body follows the Zipf law. Entity
  // names are unique per mention, capping any entity's corpus count at 2
  // (source + target copy) — far below every vocabulary word.
  int lead_left = cfg.target_k;
  for (int i = 0; i < len; ++i) {
    if (until_period == 0) {
      ex.source.push_back(".");
      until_period = 6 + static_cast<int>(rng.next_below(5));
      continue;
    }
    --until_period;
    if (rng.bernoulli(cfg.entity_rate)) {
      ex.source.push_back("e" + std::to_string(entity_counter++));
    } else if (lead_left > 0) {
      ex.source.push_back(
          "w" + std::to_string(rng.next_below(static_cast<std::uint64_t>(cfg.vocab_core_size))));
    } else {
      ex.source.push_back("w" + std::to_string(zipf.draw(rng)));
    }
    if (lead_left > 0) --lead_left;
  }

  // Target: leading non-period tokens, synonym-substituted, with sentence
  // structure restored by a mid and a final period.
  std::vector<std::string> picked;
  for (const std::string& tok : ex.source) {
    if (tok == ".") continue;
    auto it = syn.find(tok);
    picked.push_back(it == syn.end() ? tok : it->second);
    if (static_cast<int>(picked.size()) == cfg.target_k) break;
  }
  const std::size_t mid = (picked.size() + 1) / 2;
  for (std::size_t i = 0; i < picked.size(); ++i) {
    ex.target.push_back(picked[i]);
    if (picked.size() >= 6 && i + 1 == mid) ex.target.push_back(".");
  }
  ex.target.push_back(".");
  return ex;
}

}  // namespace detail

struct SyntheticCorpus {
  std::vector<Example> train, val, test;
};

inline SyntheticCorpus generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  const auto syn = parse_synonym_map(cfg.synonym_spec, cfg.vocab_core_size);
  detail::ZipfSampler zipf(cfg.vocab_core_size);
  Rng rng(cfg.seed);
  long long entity_counter = 0;

  SyntheticCorpus corpus;
  auto fill = [&](std::vector<Example>& split, int count) {
    split.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      split.push_back(detail::make_synthetic_example(cfg, zipf, syn, rng, entity_counter));
    }
  };
  const int held_out = std::max(1, cfg.n_examples / 10);
  fill(corpus.train, cfg.n_examples);
  fill(corpus.val, held_out);
  fill(corpus.test, held_out);
  return corpus;
}

// Writes train.txt / val.txt / test.txt under out_dir.
inline void generate_synthetic_corpus(const SynthConfig& cfg, const std::string& out_dir) {
  const SyntheticCorpus corpus = generate_synthetic(cfg);
  std::filesystem::create_directories(out_dir);
  save_corpus(corpus.train, out_dir + "/train.txt");
  save_corpus(corpus.val, out_dir + "/val.txt");
  save_corpus(corpus.test, out_dir + "/test.txt");
}

}  // namespace pglab
