#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <pglab/config.hpp>
#include <pglab/corpus.hpp>
#include <pglab/grad_check.hpp>
#include <pglab/metrics.hpp>

namespace fs = std::filesystem;
using namespace pglab;

namespace {

const char* kUsage =
    "usage: pglab <command> [config-file] [--key value ...]\n"
    "\n"
    "commands:\n"
    "  gen-data    write synthetic train/val/test corpora under out_dir\n"
    "  train       train a model on the corpus, writing checkpoint and log\n"
    "  decode      beam-search a corpus with a trained checkpoint\n"
    "  eval        score summaries against references and sources\n"
    "  compare     pglab compare <scores_a> <scores_b>: signed-rank p-value\n"
    "  attn-kl     pglab attn-kl <ckpt_a> [ckpt_b] [config ...]: head KL matrix\n"
    "  gradcheck   finite-difference audit of the tiny model in every loss mode\n"
    "  experiment  run the heads x {baseline,dropout,nloss,wploss} grid\n"
    "\n"
    "Config files hold `key = value` lines (# comments). Flags override file\n"
    "values. `pglab help-config` lists every key with its default.\n";

RunConfig config_from_args(const std::vector<std::string>& args) {
  RunConfig cfg;
  std::size_t i = 0;
  if (!args.empty() && args[0].rfind("--", 0) != 0) {
    cfg = load_config(args[0]);
    i = 1;
  }
  apply_overrides(cfg, {args.begin() + static_cast<std::ptrdiff_t>(i), args.end()});
  return cfg;
}

std::string opath(const RunConfig& cfg, const std::string& name) {
  return cfg.out_dir + "/" + name;
}

std::string corpus_path(const RunConfig& cfg, const char* fallback) {
  return cfg.corpus.empty() ? opath(cfg, fallback) : cfg.corpus;
}

std::string train_corpus_path(const RunConfig& cfg) {
  if (!cfg.train_corpus.empty()) return cfg.train_corpus;
  if (!cfg.corpus.empty()) return cfg.corpus;
  return opath(cfg, "train.txt");
}

std::string checkpoint_path(const RunConfig& cfg) {
  return cfg.checkpoint.empty() ? opath(cfg, "model.ckpt") : cfg.checkpoint;
}

std::vector<EncodedExample> encode_corpus(const std::vector<Example>& corpus,
                                          const Vocabulary& vocab, const RunConfig& cfg) {
  std::vector<EncodedExample> out;
  out.reserve(corpus.size());
  for (const Example& ex : corpus) {
    out.push_back(encode_example(ex.source, ex.target, vocab, cfg.max_src_len, cfg.max_tgt_len));
  }
  return out;
}

std::vector<std::vector<std::string>> load_token_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path);
  std::vector<std::vector<std::string>> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(split_tokens(line));
  }
  return out;
}

// The decode trace: `#example N` headers, then token<TAB>p_gen<TAB>attention.
std::vector<std::vector<double>> load_pgen_trace(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path);
  std::vector<std::vector<double>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.rfind("#example ", 0) == 0) {
      out.emplace_back();
      continue;
    }
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (out.empty() || t2 == std::string::npos) {
      throw ValidationError("trace: " + path + ":" + std::to_string(lineno) + ": malformed line");
    }
    out.back().push_back(std::stod(line.substr(t1 + 1, t2 - t1 - 1)));
  }
  return out;
}

std::vector<double> load_scores(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path);
  std::vector<double> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    try {
      out.push_back(std::stod(line));
    } catch (const std::exception&) {
      throw ValidationError("scores: " + path + ":" + std::to_string(lineno) +
                            ": expected a number, got '" + line + "'");
    }
  }
  return out;
}

void save_scores(const std::vector<double>& scores, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  char buf[40];
  for (double v : scores) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << buf << '\n';
  }
}

int cmd_gen_data(const RunConfig& cfg) {
  generate_synthetic_corpus(synth_config(cfg), cfg.out_dir);
  std::printf("wrote %s/{train,val,test}.txt (%d train examples, seed %llu)\n",
              cfg.out_dir.c_str(), cfg.n_examples,
              static_cast<unsigned long long>(cfg.seed));
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  const std::string cpath = train_corpus_path(cfg);
  const auto corpus = load_corpus(cpath);
  const Vocabulary vocab = build_vocab(corpus, cfg.vocab_size);
  const auto encoded = encode_corpus(corpus, vocab, cfg);
  const TrainConfig tc = train_config(cfg);
  tc.validate();
  fs::create_directories(cfg.out_dir);

  WordPrior priors;
  const WordPrior* pp = nullptr;
  if (tc.mode == PointingMode::word_prior) {
    priors = compute_word_priors(corpus, vocab);
    pp = &priors;
    const std::string prior_path = cfg.priors.empty() ? opath(cfg, "priors.tsv") : cfg.priors;
    save_priors(priors, vocab, prior_path);
  }

  const std::string ckpt = checkpoint_path(cfg);
  const std::string log_path = opath(cfg, "train_log.tsv");
  train(tc, model_config(cfg, vocab.size()), encoded, pp, ckpt, log_path);
  std::printf("trained %lld steps on %zu examples -> %s (log %s)\n",
              static_cast<long long>(tc.base_steps) + tc.extension_steps, corpus.size(),
              ckpt.c_str(), log_path.c_str());
  return 0;
}

int cmd_decode(const RunConfig& cfg) {
  const ModelParams params = load_checkpoint(checkpoint_path(cfg));
  const Vocabulary vocab = build_vocab(load_corpus(train_corpus_path(cfg)), cfg.vocab_size);
  if (vocab.size() != params.cfg.vocab_size) {
    throw ValidationError("decode: checkpoint vocabulary " +
                          std::to_string(params.cfg.vocab_size) + " vs corpus vocabulary " +
                          std::to_string(vocab.size()));
  }
  const auto corpus = load_corpus(corpus_path(cfg, "test.txt"));
  fs::create_directories(cfg.out_dir);
  const std::string sum_path = opath(cfg, "summaries.txt");
  const std::string trace_path = opath(cfg, "trace.txt");
  decode_corpus(corpus, vocab, params, beam_config(cfg), cfg.max_src_len, cfg.max_tgt_len,
                sum_path, trace_path, resolve_threads(cfg));
  std::printf("decoded %zu examples -> %s (trace %s)\n", corpus.size(), sum_path.c_str(),
              trace_path.c_str());
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  const std::string sum_path = opath(cfg, "summaries.txt");
  const auto summaries = load_token_lines(sum_path);
  const auto corpus = load_corpus(corpus_path(cfg, "test.txt"));
  if (summaries.size() != corpus.size()) {
    throw ValidationError("eval: " + std::to_string(summaries.size()) + " summaries vs " +
                          std::to_string(corpus.size()) + " corpus lines");
  }
  std::vector<std::vector<std::string>> references, sources;
  for (const Example& ex : corpus) {
    sources.push_back(ex.source);
    references.push_back(ex.target);
  }
  const std::string trace_path = opath(cfg, "trace.txt");
  std::vector<std::vector<double>> pgen;
  const std::vector<std::vector<double>>* pp = nullptr;
  if (fs::exists(trace_path)) {
    pgen = load_pgen_trace(trace_path);
    if (pgen.size() != summaries.size()) {
      throw ValidationError("eval: " + std::to_string(summaries.size()) + " summaries vs " +
                            std::to_string(pgen.size()) + " trace blocks");
    }
    pp = &pgen;
  }
  PerExampleScores per;
  const MetricReport rep = evaluate(summaries, references, sources, pp, &per,
                                    cfg.reference_relative_novelty, cfg.novelty_multiset);
  const std::string tsv = report_tsv(rep);
  std::ofstream out(opath(cfg, "report.tsv"), std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + opath(cfg, "report.tsv"));
  out << tsv;
  save_scores(per.rouge1, opath(cfg, "scores_rouge1.tsv"));
  save_scores(per.rouge2, opath(cfg, "scores_rouge2.tsv"));
  save_scores(per.rougeL, opath(cfg, "scores_rougeL.tsv"));
  std::fputs(tsv.c_str(), stdout);
  return 0;
}

int cmd_compare(const std::vector<std::string>& args) {
  if (args.size() != 2) throw ValidationError("compare wants exactly two score files");
  const auto a = load_scores(args[0]);
  const auto b = load_scores(args[1]);
  if (a.size() != b.size()) {
    throw ValidationError("compare: " + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()) + " scores");
  }
  double p = 0.0;
  try {
    p = wilcoxon(a, b);
  } catch (const std::runtime_error& e) {
    // every throw in the test itself means unusable input samples
    throw ValidationError(e.what());
  }
  std::printf("p_value\t%.6g\n", p);
  return 0;
}

// Checkpoints are self-identifying, so `attn-kl <ckpt> <file>` can tell a
// second checkpoint from a config file by the magic bytes.
bool smells_like_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::string magic(std::string(kCheckpointMagic).size(), '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  return in.gcount() == static_cast<std::streamsize>(magic.size()) &&
         magic == kCheckpointMagic;
}

int cmd_attn_kl(const std::vector<std::string>& args) {
  std::vector<std::string> positional, rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i].rfind("--", 0) == 0) {
      rest.assign(args.begin() + static_cast<std::ptrdiff_t>(i), args.end());
      break;
    }
    positional.push_back(args[i]);
  }
  if (positional.empty() || positional.size() > 3) {
    throw ValidationError("attn-kl wants <checkpoint_a> [checkpoint_b] [config]");
  }
  RunConfig cfg;
  if (positional.size() == 3 ||
      (positional.size() == 2 && !smells_like_checkpoint(positional[1]))) {
    cfg = load_config(positional.back());
    positional.pop_back();
  }
  apply_overrides(cfg, rest);

  const ModelParams params_a = load_checkpoint(positional[0]);
  const Vocabulary vocab = build_vocab(load_corpus(train_corpus_path(cfg)), cfg.vocab_size);
  if (vocab.size() != params_a.cfg.vocab_size) {
    throw ValidationError("attn-kl: checkpoint vocabulary " +
                          std::to_string(params_a.cfg.vocab_size) + " vs corpus vocabulary " +
                          std::to_string(vocab.size()));
  }
  const auto corpus = load_corpus(corpus_path(cfg, "test.txt"));
  const auto encoded = encode_corpus(corpus, vocab, cfg);
  const AttnTrace trace_a = collect_attention(params_a, encoded, cfg.coverage_on);

  std::vector<std::vector<double>> matrix;
  if (positional.size() == 2) {
    const ModelParams params_b = load_checkpoint(positional[1]);
    if (params_b.cfg.head_count != 1) {
      throw ValidationError("attn-kl: second checkpoint must be single-head");
    }
    if (params_b.cfg.vocab_size != params_a.cfg.vocab_size) {
      throw ValidationError("attn-kl: checkpoints disagree on vocabulary (" +
                            std::to_string(params_a.cfg.vocab_size) + " vs " +
                            std::to_string(params_b.cfg.vocab_size) + ")");
    }
    const AttnTrace trace_b = collect_attention(params_b, encoded, cfg.coverage_on);
    matrix = kl_matrix(trace_a, &trace_b);
  } else {
    matrix = kl_matrix(trace_a);
  }

  std::string tsv;
  char buf[40];
  for (const auto& row : matrix) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.6g", row[j]);
      if (j) tsv += '\t';
      tsv += buf;
    }
    tsv += '\n';
  }
  fs::create_directories(cfg.out_dir);
  std::ofstream out(opath(cfg, "kl.tsv"), std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + opath(cfg, "kl.tsv"));
  out << tsv;
  std::fputs(tsv.c_str(), stdout);
  return 0;
}

int cmd_gradcheck(const RunConfig&) {
  ModelConfig mc;
  mc.vocab_size = 20;
  mc.emb_dim = 8;
  mc.hidden_dim = 8;

  EncodedExample ex;
  ex.source_ids = {4, 5, kUnk, 6, 7, 8};
  ex.source_ext_ids = {4, 5, 20, 6, 7, 8};
  ex.oov_tokens = {"oov0"};
  ex.target_ids = {kStart, 5, kUnk, 6, 7, kStop};
  ex.target_ext_ids = {kStart, 5, 20, 6, 7, kStop};

  WordPrior priors;
  priors.p.assign(20, 0.0);
  priors.p[5] = 0.3;
  priors.p[6] = 0.2;
  priors.p[7] = 0.1;

  double overall = 0.0;
  for (int heads : {1, 4}) {
    mc.head_count = heads;
    Rng rng(42 + static_cast<std::uint64_t>(heads));
    ModelParams params = init_params(mc, rng);
    std::vector<Tensor> tensors;
    std::vector<std::string> names;
    for (auto& [name, t] : params.named()) {
      tensors.push_back(t);
      names.push_back(name);
    }
    struct ModeCase {
      const char* label;
      PointingMode mode;
      bool coverage;
    };
    for (const ModeCase m : {ModeCase{"nll", PointingMode::none, false},
                             ModeCase{"coverage", PointingMode::none, true},
                             ModeCase{"naive", PointingMode::naive, true},
                             ModeCase{"word_prior", PointingMode::word_prior, true}}) {
      ForwardFlags flags;
      flags.coverage_on = m.coverage;
      std::vector<double> ce_base;
      if (m.mode == PointingMode::word_prior) {
        ce_base = word_prior_ce_values(forward_teacher_forced(ex, params, flags), priors, ex);
      }
      auto f = [&]() -> Tensor {
        const auto steps = forward_teacher_forced(ex, params, flags);
        Tensor loss = nll_loss(steps, ex.target_ext_ids);
        if (m.coverage) loss = add(loss, coverage_loss(steps, 1.0));
        if (m.mode == PointingMode::naive) {
          loss = add(loss, naive_pointing_loss(steps, default_lambda_p(m.mode)));
        } else if (m.mode == PointingMode::word_prior) {
          loss = add(loss,
                     word_prior_pointing_loss(steps, priors, ex, default_lambda_p(m.mode),
                                              &ce_base));
        }
        return loss;
      };
      const GradCheckResult res = grad_check(f, tensors, 1e-5, names);
      std::printf("heads %d loss %-10s max_rel_err %.3g (%s)\n", heads, m.label,
                  res.max_rel_err, res.worst.c_str());
      overall = std::max(overall, res.max_rel_err);
    }
  }
  std::printf("max_rel_err %.3g\n", overall);
  return overall < 1e-4 ? 0 : 1;
}

int cmd_experiment(const RunConfig& cfg) {
  if (!fs::exists(opath(cfg, "train.txt"))) {
    generate_synthetic_corpus(synth_config(cfg), cfg.out_dir);
  }
  const auto train_set = load_corpus(opath(cfg, "train.txt"));
  const auto test_set = load_corpus(opath(cfg, "test.txt"));
  const Vocabulary vocab = build_vocab(train_set, cfg.vocab_size);
  const auto encoded_train = encode_corpus(train_set, vocab, cfg);
  const WordPrior priors = compute_word_priors(train_set, vocab);

  struct Variant {
    const char* name;
    PointingMode mode;
    double dropout;
  };
  const double drop_rate = cfg.dropout_rate > 0.0 ? cfg.dropout_rate : 0.2;
  const std::vector<Variant> variants = {
      {"baseline", PointingMode::none, 0.0},
      {"dropout", PointingMode::none, drop_rate},
      {"nloss", PointingMode::naive, 0.0},
      {"wploss", PointingMode::word_prior, 0.0},
  };

  std::string table =
      "variant\theads\trouge1\trouge2\trougeL\tnovel_1gram\tnovel_2gram\tnovel_3gram\t"
      "novel_4gram\tavg_pgen\tdup_2gram\n";
  char buf[64];
  for (int heads : {1, 4}) {
    for (const Variant& v : variants) {
      RunConfig run = cfg;
      run.head_count = heads;
      run.mode = pointing_mode_name(v.mode);
      run.dropout_rate = v.dropout;
      run.out_dir = opath(cfg, std::string(v.name) + "_h" + std::to_string(heads));
      fs::create_directories(run.out_dir);

      const TrainConfig tc = train_config(run);
      const WordPrior* pp = v.mode == PointingMode::word_prior ? &priors : nullptr;
      const ModelParams params = train(tc, model_config(run, vocab.size()), encoded_train, pp,
                                       checkpoint_path(run), opath(run, "train_log.tsv"));
      decode_corpus(test_set, vocab, params, beam_config(run), run.max_src_len, run.max_tgt_len,
                    opath(run, "summaries.txt"), opath(run, "trace.txt"), resolve_threads(run));

      const auto summaries = load_token_lines(opath(run, "summaries.txt"));
      const auto pgen = load_pgen_trace(opath(run, "trace.txt"));
      std::vector<std::vector<std::string>> references, sources;
      for (const Example& ex : test_set) {
        sources.push_back(ex.source);
        references.push_back(ex.target);
      }
      PerExampleScores per;
      const MetricReport rep = evaluate(summaries, references, sources, &pgen, &per,
                                        run.reference_relative_novelty, run.novelty_multiset);
      save_scores(per.rouge1, opath(run, "scores_rouge1.tsv"));

      table += v.name;
      table += '\t' + std::to_string(heads);
      for (double val : {rep.rouge1, rep.rouge2, rep.rougeL, rep.novel_ngram[0],
                         rep.novel_ngram[1], rep.novel_ngram[2], rep.novel_ngram[3],
                         rep.avg_pgen, rep.dup_ngram[1]}) {
        std::snprintf(buf, sizeof(buf), "%.6g", val);
        table += '\t';
        table += buf;
      }
      table += '\n';
      std::printf("finished %s heads=%d\n", v.name, heads);
      std::fflush(stdout);
    }
  }
  std::ofstream out(opath(cfg, "experiment.tsv"), std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + opath(cfg, "experiment.tsv"));
  out << table;
  std::fputs(table.c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  if (args.empty()) {
    std::fputs(kUsage, stderr);
    return 1;
  }
  const std::string cmd = args[0];
  const std::vector<std::string> rest(args.begin() + 1, args.end());
  try {
    if (cmd == "help" || cmd == "--help" || cmd == "-h") {
      std::fputs(kUsage, stdout);
      return 0;
    }
    if (cmd == "help-config") {
      std::fputs(serialize_config(RunConfig{}).c_str(), stdout);
      return 0;
    }
    if (cmd == "gen-data") return cmd_gen_data(config_from_args(rest));
    if (cmd == "train") return cmd_train(config_from_args(rest));
    if (cmd == "decode") return cmd_decode(config_from_args(rest));
    if (cmd == "eval") return cmd_eval(config_from_args(rest));
    if (cmd == "compare") return cmd_compare(rest);
    if (cmd == "attn-kl") return cmd_attn_kl(rest);
    if (cmd == "gradcheck") return cmd_gradcheck(config_from_args(rest));
    if (cmd == "experiment") return cmd_experiment(config_from_args(rest));
    std::fprintf(stderr, "unknown command '%s'\n\n%s", cmd.c_str(), kUsage);
    return 1;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
