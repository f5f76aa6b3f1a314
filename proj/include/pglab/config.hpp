#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "beam.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "synthetic.hpp"
#include "trainer.hpp"

namespace pglab {

// User-input problems (bad config, malformed files, misaligned corpora).
// The CLI maps these to exit code 1; everything else to 2.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Every tunable of the pipeline as one flat bag of keys.
struct RunConfig {
  // synthetic data
  std::uint64_t seed = 1;
  int n_examples = 2000;
  int vocab_core_size = 146;
  double entity_rate = 0.1;
  std::string synonym_spec;  // empty: one synonym per three core tokens
  int src_len_min = 30;
  int src_len_max = 60;
  int target_k = 8;
  // vocabulary / encoding
  int vocab_size = 200;
  int max_src_len = 60;
  int max_tgt_len = 20;
  // model
  int emb_dim = 32;
  int hidden_dim = 64;
  int head_count = 1;
  // training
  double learning_rate = 0.15;
  double adagrad_init_accumulator = 0.1;
  double max_grad_norm = 2.0;
  int base_steps = 3000;
  int extension_steps = 3000;
  int batch_size = 4;
  std::string mode = "none";
  bool coverage_on = false;
  double lambda_cov = 1.0;
  double lambda_p = -1.0;
  double dropout_rate = 0.0;
  int eval_every = 0;
  // beam search
  int beam_size = 4;
  int max_len = 100;
  int min_len = 1;
  bool length_normalize = true;
  // evaluation
  bool reference_relative_novelty = false;
  bool novelty_multiset = false;
  // paths & misc
  std::string out_dir = "out";
  std::string corpus;
  std::string train_corpus;
  std::string checkpoint;
  std::string priors;
  int threads = 0;  // 0: PGLAB_THREADS or single-threaded
};

namespace detail {

inline int cfg_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const int out = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ValidationError("config: key '" + key + "' wants an integer, got '" + v + "'");
  }
}

inline std::uint64_t cfg_u64(const std::string& key, const std::string& v) {
  try {
    // stoull wraps negatives instead of failing
    if (v.find('-') != std::string::npos) throw std::invalid_argument(v);
    std::size_t pos = 0;
    const unsigned long long out = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ValidationError("config: key '" + key + "' wants an unsigned integer, got '" + v + "'");
  }
}

inline double cfg_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ValidationError("config: key '" + key + "' wants a number, got '" + v + "'");
  }
}

inline bool cfg_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ValidationError("config: key '" + key + "' wants true or false, got '" + v + "'");
}

inline std::string cfg_fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct ConfigKey {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto add_int = [&](const std::string& name, int RunConfig::* f) {
      k.push_back({name, [f](const RunConfig& c) { return std::to_string(c.*f); },
                   [f, name](RunConfig& c, const std::string& v) { c.*f = cfg_int(name, v); }});
    };
    auto add_double = [&](const std::string& name, double RunConfig::* f) {
      k.push_back({name, [f](const RunConfig& c) { return cfg_fmt(c.*f); },
                   [f, name](RunConfig& c, const std::string& v) { c.*f = cfg_double(name, v); }});
    };
    auto add_bool = [&](const std::string& name, bool RunConfig::* f) {
      k.push_back({name, [f](const RunConfig& c) { return std::string(c.*f ? "true" : "false"); },
                   [f, name](RunConfig& c, const std::string& v) { c.*f = cfg_bool(name, v); }});
    };
    auto add_string = [&](const std::string& name, std::string RunConfig::* f) {
      k.push_back({name, [f](const RunConfig& c) { return c.*f; },
                   [f](RunConfig& c, const std::string& v) { c.*f = v; }});
    };
    k.push_back({"seed",
                 [](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, const std::string& v) { c.seed = cfg_u64("seed", v); }});
    add_int("n_examples", &RunConfig::n_examples);
    add_int("vocab_core_size", &RunConfig::vocab_core_size);
    add_double("entity_rate", &RunConfig::entity_rate);
    add_string("synonym_spec", &RunConfig::synonym_spec);
    add_int("src_len_min", &RunConfig::src_len_min);
    add_int("src_len_max", &RunConfig::src_len_max);
    add_int("target_k", &RunConfig::target_k);
    add_int("vocab_size", &RunConfig::vocab_size);
    add_int("max_src_len", &RunConfig::max_src_len);
    add_int("max_tgt_len", &RunConfig::max_tgt_len);
    add_int("emb_dim", &RunConfig::emb_dim);
    add_int("hidden_dim", &RunConfig::hidden_dim);
    add_int("head_count", &RunConfig::head_count);
    add_double("learning_rate", &RunConfig::learning_rate);
    add_double("adagrad_init_accumulator", &RunConfig::adagrad_init_accumulator);
    add_double("max_grad_norm", &RunConfig::max_grad_norm);
    add_int("base_steps", &RunConfig::base_steps);
    add_int("extension_steps", &RunConfig::extension_steps);
    add_int("batch_size", &RunConfig::batch_size);
    add_string("mode", &RunConfig::mode);
    add_bool("coverage_on", &RunConfig::coverage_on);
    add_double("lambda_cov", &RunConfig::lambda_cov);
    add_double("lambda_p", &RunConfig::lambda_p);
    add_double("dropout_rate", &RunConfig::dropout_rate);
    add_int("eval_every", &RunConfig::eval_every);
    add_int("beam_size", &RunConfig::beam_size);
    add_int("max_len", &RunConfig::max_len);
    add_int("min_len", &RunConfig::min_len);
    add_bool("length_normalize", &RunConfig::length_normalize);
    add_bool("reference_relative_novelty", &RunConfig::reference_relative_novelty);
    add_bool("novelty_multiset", &RunConfig::novelty_multiset);
    add_string("out_dir", &RunConfig::out_dir);
    add_string("corpus", &RunConfig::corpus);
    add_string("train_corpus", &RunConfig::train_corpus);
    add_string("checkpoint", &RunConfig::checkpoint);
    add_string("priors", &RunConfig::priors);
    add_int("threads", &RunConfig::threads);
    std::sort(k.begin(), k.end(),
              [](const ConfigKey& a, const ConfigKey& b) { return a.name < b.name; });
    return k;
  }();
  return keys;
}

inline const ConfigKey& find_key(const std::string& name) {
  const auto& keys = config_keys();
  const auto it = std::lower_bound(keys.begin(), keys.end(), name,
                                   [](const ConfigKey& k, const std::string& n) {
                                     return k.name < n;
                                   });
  if (it == keys.end() || it->name != name) {
    throw ValidationError("config: unknown key '" + name + "'");
  }
  return *it;
}

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  detail::find_key(key).set(cfg, value);
}

// `key = value` lines; '#' starts a comment; blank lines ignored.
inline RunConfig parse_config_text(const std::string& text, RunConfig cfg = {}) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config: line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ValidationError("config: line " + std::to_string(lineno) + ": empty key");
    }
    set_config_value(cfg, key, value);
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path, RunConfig cfg = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("config: cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), std::move(cfg));
}

// Sorted keys, one per line; parse(serialize(x)) == x and the text is stable.
inline std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& key : detail::config_keys()) {
    out += key.name;
    out += " = ";
    out += key.get(cfg);
    out += '\n';
  }
  return out;
}

// `--key value` pairs from the command line, applied over file values.
inline void apply_overrides(RunConfig& cfg, const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0 || a.size() <= 2) {
      throw ValidationError("config: expected --key, got '" + a + "'");
    }
    if (i + 1 >= args.size()) {
      throw ValidationError("config: flag '" + a + "' is missing a value");
    }
    set_config_value(cfg, a.substr(2), args[++i]);
  }
}

inline SynthConfig synth_config(const RunConfig& c) {
  SynthConfig s;
  s.seed = c.seed;
  s.n_examples = c.n_examples;
  s.vocab_core_size = c.vocab_core_size;
  s.entity_rate = c.entity_rate;
  s.synonym_spec = c.synonym_spec;
  s.src_len_min = c.src_len_min;
  s.src_len_max = c.src_len_max;
  s.target_k = c.target_k;
  return s;
}

inline ModelConfig model_config(const RunConfig& c, int vocab_size) {
  ModelConfig m;
  m.vocab_size = vocab_size;
  m.emb_dim = c.emb_dim;
  m.hidden_dim = c.hidden_dim;
  m.head_count = c.head_count;
  return m;
}

inline TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  t.learning_rate = c.learning_rate;
  t.adagrad_init_accumulator = c.adagrad_init_accumulator;
  t.max_grad_norm = c.max_grad_norm;
  t.base_steps = c.base_steps;
  t.extension_steps = c.extension_steps;
  t.batch_size = c.batch_size;
  t.seed = c.seed;
  t.mode = pointing_mode_from(c.mode);
  t.coverage_on = c.coverage_on;
  t.lambda_cov = c.lambda_cov;
  t.lambda_p = c.lambda_p;
  t.dropout_rate = c.dropout_rate;
  t.eval_every = c.eval_every;
  return t;
}

inline BeamConfig beam_config(const RunConfig& c) {
  BeamConfig b;
  b.beam_size = c.beam_size;
  b.max_len = c.max_len;
  b.min_len = c.min_len;
  b.length_normalize = c.length_normalize;
  b.coverage_on = c.coverage_on;
  return b;
}

// Worker count: explicit config first, then PGLAB_THREADS, then 1.
inline int resolve_threads(const RunConfig& c) {
  if (c.threads > 0) return c.threads;
  if (const char* env = std::getenv("PGLAB_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return n;
    } catch (const std::exception&) {
    }
    throw ValidationError("PGLAB_THREADS must be a positive integer");
  }
  return 1;
}

}  // namespace pglab
