#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pglab {

struct Example {
  std::vector<std::string> source;
  std::vector<std::string> target;
};

inline std::vector<std::string> split_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) out.push_back(std::move(tok));
  return out;
}

inline std::string join_tokens(const std::vector<std::string>& toks) {
  std::string out;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += toks[i];
  }
  return out;
}

// One example per line: source tokens, TAB, target tokens. Empty file is an
// empty corpus.
inline std::vector<Example> load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("corpus: cannot open " + path);
  std::vector<Example> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error("corpus: " + path + ":" + std::to_string(line_no) +
                               ": missing TAB separator");
    }
    Example ex;
    ex.source = split_tokens(line.substr(0, tab));
    ex.target = split_tokens(line.substr(tab + 1));
    out.push_back(std::move(ex));
  }
  return out;
}

inline void save_corpus(const std::vector<Example>& examples, const std::string& path) {
  std::ofstream out(path, std::ios::binary);  // binary: keep LF endings everywhere
  if (!out) throw std::runtime_error("corpus: cannot write " + path);
  for (const Example& ex : examples) {
    out << join_tokens(ex.source) << '\t' << join_tokens(ex.target) << '\n';
  }
  if (!out) throw std::runtime_error("corpus: write failed for " + path);
}

}  // namespace pglab
