#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "corpus.hpp"

namespace pglab {

constexpr int kPad = 0;
constexpr int kUnk = 1;
constexpr int kStart = 2;
constexpr int kStop = 3;
constexpr int kReservedCount = 4;

inline const char* reserved_token(int id) {
  switch (id) {
    case kPad: return "<pad>";
    case kUnk: return "<unk>";
    case kStart: return "<s>";
    case kStop: return "</s>";
    default: return nullptr;
  }
}

class Vocabulary {
 public:
  Vocabulary() = default;

  explicit Vocabulary(std::vector<std::string> tokens) : id_to_token_(std::move(tokens)) {
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
      token_to_id_.emplace(id_to_token_[i], static_cast<int>(i));
    }
  }

  int size() const { return static_cast<int>(id_to_token_.size()); }

  int lookup(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return token_to_id_.count(token) != 0; }

  const std::string& token_of(int id) const {
    if (id < 0 || id >= size()) {
      throw std::runtime_error("vocab: id " + std::to_string(id) + " out of range");
    }
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const { return id_to_token_; }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

// Most frequent (size - 4) tokens across sources and targets; frequency ties
// broken lexicographically.
inline Vocabulary build_vocab(const std::vector<Example>& corpus, int size) {
  if (size <= kReservedCount) {
    throw std::runtime_error("vocab: size must exceed " + std::to_string(kReservedCount));
  }
  if (corpus.empty()) throw std::runtime_error("vocab: empty corpus");
  std::map<std::string, long long> counts;
  for (const Example& ex : corpus) {
    for (const auto& t : ex.source) ++counts[t];
    for (const auto& t : ex.target) ++counts[t];
  }
  for (int id = 0; id < kReservedCount; ++id) counts.erase(reserved_token(id));

  std::vector<std::pair<std::string, long long>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  std::vector<std::string> tokens;
  tokens.reserve(static_cast<std::size_t>(size));
  for (int id = 0; id < kReservedCount; ++id) tokens.push_back(reserved_token(id));
  const std::size_t keep = static_cast<std::size_t>(size - kReservedCount);
  for (std::size_t i = 0; i < ranked.size() && i < keep; ++i) tokens.push_back(ranked[i].first);
  return Vocabulary(std::move(tokens));
}

struct EncodedExample {
  std::vector<int> source_ids;      // vocab ids, UNK for OOV
  std::vector<int> source_ext_ids;  // OOV positions get vocab_size + k
  std::vector<std::string> oov_tokens;
  std::vector<int> target_ids;      // START ... STOP, vocab ids
  std::vector<int> target_ext_ids;  // START ... STOP, extended ids
  int src_len_before = 0;
  int src_len_after = 0;
  int tgt_len_before = 0;
  int tgt_len_after = 0;

  int extended_size(int vocab_size) const {
    return vocab_size + static_cast<int>(oov_tokens.size());
  }
  int decode_steps() const { return static_cast<int>(target_ext_ids.size()) - 1; }
};

// Truncates, then assigns extended ids by first occurrence in the source.
// Target OOVs reuse the source extended id when present, otherwise UNK.
// The stored target is wrapped with START/STOP.
inline EncodedExample encode_example(const std::vector<std::string>& src,
                                     const std::vector<std::string>& tgt,
                                     const Vocabulary& vocab, int max_src, int max_tgt) {
  if (max_src < 1 || max_tgt < 1) throw std::runtime_error("encode: truncation limits must be >= 1");
  EncodedExample ex;
  ex.src_len_before = static_cast<int>(src.size());
  ex.tgt_len_before = static_cast<int>(tgt.size());
  const std::size_t n_src = std::min<std::size_t>(src.size(), static_cast<std::size_t>(max_src));
  const std::size_t n_tgt = std::min<std::size_t>(tgt.size(), static_cast<std::size_t>(max_tgt));
  if (n_src == 0) throw std::runtime_error("encode: empty source after truncation");
  ex.src_len_after = static_cast<int>(n_src);
  ex.tgt_len_after = static_cast<int>(n_tgt);

  std::unordered_map<std::string, int> oov_index;
  const int vsz = vocab.size();
  for (std::size_t i = 0; i < n_src; ++i) {
    const std::string& tok = src[i];
    const int id = vocab.lookup(tok);
    ex.source_ids.push_back(id);
    if (id != kUnk || vocab.contains(tok)) {
      ex.source_ext_ids.push_back(id);
    } else {
      auto it = oov_index.find(tok);
      int k;
      if (it == oov_index.end()) {
        k = static_cast<int>(ex.oov_tokens.size());
        oov_index.emplace(tok, k);
        ex.oov_tokens.push_back(tok);
      } else {
        k = it->second;
      }
      ex.source_ext_ids.push_back(vsz + k);
    }
  }

  ex.target_ids.push_back(kStart);
  ex.target_ext_ids.push_back(kStart);
  for (std::size_t i = 0; i < n_tgt; ++i) {
    const std::string& tok = tgt[i];
    const int id = vocab.lookup(tok);
    ex.target_ids.push_back(id);
    if (id != kUnk || vocab.contains(tok)) {
      ex.target_ext_ids.push_back(id);
    } else {
      auto it = oov_index.find(tok);
      ex.target_ext_ids.push_back(it == oov_index.end() ? kUnk : vsz + it->second);
    }
  }
  ex.target_ids.push_back(kStop);
  ex.target_ext_ids.push_back(kStop);
  return ex;
}

// Maps an extended id back to its surface form.
inline std::string extended_token(int ext_id, const Vocabulary& vocab,
                                  const std::vector<std::string>& oov_tokens) {
  if (ext_id < vocab.size()) return vocab.token_of(ext_id);
  const int k = ext_id - vocab.size();
  if (k >= static_cast<int>(oov_tokens.size())) {
    throw std::runtime_error("extended_token: id " + std::to_string(ext_id) + " out of range");
  }
  return oov_tokens[static_cast<std::size_t>(k)];
}

// Per-vocab-id corpus frequencies. Out-of-vocabulary tokens count toward the
// denominator but own no entry, so the in-vocab mass sums to < 1 when the
// corpus has OOV tokens.
struct WordPrior {
  std::vector<double> p;  // indexed by vocab id; reserved ids stay 0

  double of(int id) const {
    return id >= 0 && id < static_cast<int>(p.size()) ? p[static_cast<std::size_t>(id)] : 0.0;
  }
};

inline WordPrior compute_word_priors(const std::vector<Example>& corpus,
                                     const Vocabulary& vocab) {
  if (corpus.empty()) throw std::runtime_error("priors: empty corpus");
  WordPrior prior;
  prior.p.assign(static_cast<std::size_t>(vocab.size()), 0.0);
  long long total = 0;
  auto tally = [&](const std::vector<std::string>& toks) {
    for (const auto& t : toks) {
      ++total;
      const int id = vocab.lookup(t);
      if (id != kUnk || vocab.contains(t)) prior.p[static_cast<std::size_t>(id)] += 1.0;
    }
  };
  for (const Example& ex : corpus) {
    tally(ex.source);
    tally(ex.target);
  }
  for (double& v : prior.p) v /= static_cast<double>(total);
  return prior;
}

inline void save_priors(const WordPrior& prior, const Vocabulary& vocab,
                        const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("priors: cannot write " + path);
  char buf[64];
  for (int id = kReservedCount; id < vocab.size(); ++id) {
    std::snprintf(buf, sizeof(buf), "%.17g", prior.of(id));
    out << vocab.token_of(id) << '\t' << buf << '\n';
  }
}

inline WordPrior load_priors(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("priors: cannot open " + path);
  WordPrior prior;
  prior.p.assign(static_cast<std::size_t>(vocab.size()), 0.0);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error("priors: " + path + ":" + std::to_string(line_no) +
                               ": missing TAB separator");
    }
    const std::string tok = line.substr(0, tab);
    if (!vocab.contains(tok)) {
      throw std::runtime_error("priors: " + path + ":" + std::to_string(line_no) +
                               ": token not in vocabulary: " + tok);
    }
    prior.p[static_cast<std::size_t>(vocab.lookup(tok))] = std::stod(line.substr(tab + 1));
  }
  return prior;
}

}  // namespace pglab
