#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <pglab/beam.hpp>
#include <pglab/trainer.hpp>
#include <sstream>

using namespace pglab;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ModelParams toy_params(int vocab_size, std::uint64_t seed, double sharpen = 1.0) {
  ModelConfig mc;
  mc.vocab_size = vocab_size;
  mc.emb_dim = 4;
  mc.hidden_dim = 4;
  mc.head_count = 1;
  Rng rng(seed);
  ModelParams p = init_params(mc, rng);
  if (sharpen != 1.0) {
    for (auto& [name, t] : p.named()) {
      (void)name;
      for (double& v : t.values()) v *= sharpen;
    }
  }
  return p;
}

EncodedExample toy_example(const Vocabulary& vocab, const std::vector<std::string>& src) {
  return encode_example(src, {src[0]}, vocab, 50, 50);
}

// Scores one fixed emission sequence exactly the way the beam does: sum of
// floor-clamped log probabilities along the teacher-driven path, plus the
// STOP factor when the sequence ends before the length cap.
double path_log_prob(const std::vector<int>& seq, bool capped, const EncodedExample& ex,
                     const ModelParams& params, const EncoderOutput& enc) {
  Tensor s = enc.s0, cell = enc.cell0;
  Tensor coverage = Tensor::zeros({static_cast<int>(ex.source_ids.size())});
  double lp = 0.0;
  int input = kStart;
  for (int tok : seq) {
    StepOutput out = decode_step(input, s, cell, coverage, enc, ex, params, {});
    lp += std::log(std::max(out.p_final.value(static_cast<std::size_t>(tok)), kLogFloor));
    coverage = add(coverage, out.pointer_attn);
    s = out.s;
    cell = out.cell;
    input = tok < params.cfg.vocab_size ? tok : kUnk;
  }
  if (!capped) {
    StepOutput out = decode_step(input, s, cell, coverage, enc, ex, params, {});
    lp += std::log(std::max(out.p_final.value(static_cast<std::size_t>(kStop)), kLogFloor));
  }
  return lp;
}

// Exhaustive search over every emittable sequence up to the length cap.
// Sequences shorter than the cap carry a STOP factor; cap-length ones do not,
// mirroring how the beam treats length-capped survivors.
std::vector<int> enumerate_best(const EncodedExample& ex, const ModelParams& params,
                                const BeamConfig& cfg, const std::vector<int>& alphabet) {
  EncoderOutput enc = encode(ex.source_ids, params);
  std::vector<int> best;
  double best_score = -1e300;
  std::vector<int> seq;
  auto walk = [&](auto&& self, int depth) -> void {
    if (static_cast<int>(seq.size()) >= cfg.min_len) {
      const double lp = path_log_prob(seq, depth == cfg.max_len, ex, params, enc);
      const double score =
          cfg.length_normalize ? lp / static_cast<double>(seq.size()) : lp;
      if (score > best_score || (score == best_score && seq < best)) {
        best_score = score;
        best = seq;
      }
    }
    if (depth == cfg.max_len) return;
    for (int tok : alphabet) {
      seq.push_back(tok);
      self(self, depth + 1);
      seq.pop_back();
    }
  };
  walk(walk, 0);
  return best;
}

// Greedy reference decoder: argmax at each step, ties to the lower id.
std::vector<int> greedy_decode(const EncodedExample& ex, const ModelParams& params,
                               const BeamConfig& cfg) {
  EncoderOutput enc = encode(ex.source_ids, params);
  const int ext_size = ex.extended_size(params.cfg.vocab_size);
  Tensor s = enc.s0, cell = enc.cell0;
  Tensor coverage = Tensor::zeros({static_cast<int>(ex.source_ids.size())});
  std::vector<int> tokens;
  int input = kStart;
  for (int depth = 0; depth < cfg.max_len; ++depth) {
    StepOutput out = decode_step(input, s, cell, coverage, enc, ex, params, {});
    int best = -1;
    double best_p = -1.0;
    for (int w = 0; w < ext_size; ++w) {
      if (w == kPad || w == kStart) continue;
      if (w == kStop && static_cast<int>(tokens.size()) < cfg.min_len) continue;
      const double p = out.p_final.value(static_cast<std::size_t>(w));
      if (p > best_p) {
        best_p = p;
        best = w;
      }
    }
    if (best == kStop) break;
    tokens.push_back(best);
    coverage = add(coverage, out.pointer_attn);
    s = out.s;
    cell = out.cell;
    input = best < params.cfg.vocab_size ? best : kUnk;
  }
  return tokens;
}

}  // namespace

TEST_CASE("beam config validation", "[decoder]") {
  BeamConfig bad;
  bad.beam_size = 0;
  REQUIRE_THROWS(bad.validate());
  bad = BeamConfig{};
  bad.min_len = 0;
  REQUIRE_THROWS(bad.validate());
  bad = BeamConfig{};
  bad.max_len = 0;
  REQUIRE_THROWS(bad.validate());
}

TEST_CASE("beam search matches exhaustive enumeration on a three-step toy", "[decoder]") {
  // Vocabulary of seven: four reserved ids plus three content words, so the
  // emittable alphabet is {unk, the three words} and STOP terminates.
  std::vector<Example> corpus{{{"aa", "bb", "cc"}, {"aa"}}};
  Vocabulary vocab = build_vocab(corpus, 7);
  const std::vector<int> alphabet{kUnk, 4, 5, 6};

  BeamConfig cfg;
  cfg.beam_size = 4;
  cfg.max_len = 3;
  int checked = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    ModelParams params = toy_params(vocab.size(), seed, 4.0);
    EncodedExample ex = toy_example(vocab, {"aa", "bb", "cc", "aa"});
    for (bool normalize : {true, false}) {
      cfg.length_normalize = normalize;
      Hypothesis hyp = beam_search(ex, params, cfg);
      const std::vector<int> expected = enumerate_best(ex, params, cfg, alphabet);
      INFO("seed " << seed << " normalize " << normalize);
      REQUIRE(hyp.tokens == expected);
      ++checked;
    }
  }
  REQUIRE(checked == 100);
}

TEST_CASE("beam size one reduces to greedy decoding", "[decoder]") {
  std::vector<Example> corpus{{{"aa", "bb", "cc", "dd", "ee"}, {"aa"}}};
  Vocabulary vocab = build_vocab(corpus, 9);
  BeamConfig cfg;
  cfg.beam_size = 1;
  cfg.max_len = 8;
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    ModelParams params = toy_params(vocab.size(), seed, 3.0);
    EncodedExample ex = toy_example(vocab, {"aa", "bb", "cc", "dd", "ee", "bb"});
    Hypothesis hyp = beam_search(ex, params, cfg);
    REQUIRE(hyp.tokens == greedy_decode(ex, params, cfg));
  }
}

TEST_CASE("a model forced to one-hot outputs emits that token to the cap", "[decoder]") {
  std::vector<Example> corpus{{{"aa", "bb", "cc"}, {"aa"}}};
  Vocabulary vocab = build_vocab(corpus, 7);
  ModelParams params = toy_params(vocab.size(), 404);
  // Pin the generator to token id 5 and the switch to pure generation.
  params.out_b2.values().assign(params.out_b2.size(), 0.0);
  params.out_b2.value(5) = 50.0;
  params.sw_b.value(0) = 50.0;

  BeamConfig cfg;
  cfg.max_len = 5;
  EncodedExample ex = toy_example(vocab, {"aa", "bb", "cc"});
  Hypothesis hyp = beam_search(ex, params, cfg);
  REQUIRE(hyp.tokens == std::vector<int>(5, 5));
  for (double g : hyp.pgen_trace) REQUIRE(g > 0.999);
}

TEST_CASE("a pure pointer copies an out-of-vocabulary source token", "[decoder]") {
  std::vector<Example> corpus{{{"aa", "bb", "cc"}, {"aa"}}};
  Vocabulary vocab = build_vocab(corpus, 7);
  ModelParams params = toy_params(vocab.size(), 77);
  params.sw_b.value(0) = -50.0;  // p_gen ~ 0: all mass flows through attention

  BeamConfig cfg;
  cfg.max_len = 4;
  // Single-token source: attention has nowhere else to go.
  EncodedExample ex = encode_example({"zorp"}, {"aa"}, vocab, 50, 50);
  REQUIRE(ex.source_ext_ids[0] == vocab.size());
  Hypothesis hyp = beam_search(ex, params, cfg);
  REQUIRE(!hyp.tokens.empty());
  REQUIRE(hyp.tokens[0] == vocab.size());
  const auto words = hypothesis_tokens(hyp, vocab, ex.oov_tokens);
  REQUIRE(words[0] == "zorp");
  for (double g : hyp.pgen_trace) REQUIRE(g < 1e-6);
}

TEST_CASE("hypothesis traces stay consistent", "[decoder]") {
  std::vector<Example> corpus{{{"aa", "bb", "cc", "dd"}, {"aa"}}};
  Vocabulary vocab = build_vocab(corpus, 8);
  ModelParams params = toy_params(vocab.size(), 9, 2.0);
  EncodedExample ex = toy_example(vocab, {"aa", "bb", "cc", "dd"});
  BeamConfig cfg;
  cfg.max_len = 6;
  Hypothesis hyp = beam_search(ex, params, cfg);
  REQUIRE(hyp.log_prob <= 0.0);
  REQUIRE(hyp.pgen_trace.size() == hyp.tokens.size());
  REQUIRE(hyp.attn.size() == hyp.tokens.size());
  for (const auto& heads : hyp.attn) {
    REQUIRE(heads.size() == 1);
    double mass = 0.0;
    for (double a : heads[0]) mass += a;
    REQUIRE(mass == Catch::Approx(1.0).margin(1e-9));
  }
  for (int tok : hyp.tokens) {
    REQUIRE(tok != kPad);
    REQUIRE(tok != kStart);
    REQUIRE(tok != kStop);
    REQUIRE(tok < ex.extended_size(vocab.size()));
  }
}

TEST_CASE("corpus decoding is deterministic across thread counts", "[decoder]") {
  std::vector<Example> corpus{
      {{"aa", "bb", "cc", "dd"}, {"aa", "bb"}},
      {{"bb", "cc", "zorp", "aa"}, {"bb"}},
      {{"dd", "aa"}, {"dd"}},
  };
  Vocabulary vocab = build_vocab(corpus, 8);
  ModelParams params = toy_params(vocab.size(), 31, 2.0);
  BeamConfig cfg;
  cfg.max_len = 5;

  decode_corpus(corpus, vocab, params, cfg, 20, 10, "dec1.txt", "dec1_trace.txt", 1);
  decode_corpus(corpus, vocab, params, cfg, 20, 10, "dec3.txt", "dec3_trace.txt", 3);
  REQUIRE(slurp("dec1.txt") == slurp("dec3.txt"));
  REQUIRE(slurp("dec1_trace.txt") == slurp("dec3_trace.txt"));

  // Trace structure: a header line per example; token lines carry the word,
  // p_gen, and one comma-joined pointer-attention row over source positions.
  std::ifstream trace("dec1_trace.txt");
  std::string line;
  int example_headers = 0;
  std::size_t src_len = 0;
  std::vector<std::size_t> src_lens{4, 4, 2};
  std::size_t cur = 0;
  while (std::getline(trace, line)) {
    if (line.rfind("#example ", 0) == 0) {
      src_len = src_lens[static_cast<std::size_t>(std::stoi(line.substr(9)))];
      ++example_headers;
      ++cur;
      continue;
    }
    const auto t1 = line.find('\t');
    const auto t2 = line.find('\t', t1 + 1);
    REQUIRE(t1 != std::string::npos);
    REQUIRE(t2 != std::string::npos);
    const std::string attn = line.substr(t2 + 1);
    const std::size_t commas =
        static_cast<std::size_t>(std::count(attn.begin(), attn.end(), ','));
    REQUIRE(commas + 1 == src_len);
    const double pg = std::stod(line.substr(t1 + 1, t2 - t1 - 1));
    REQUIRE(pg >= 0.0);
    REQUIRE(pg <= 1.0);
  }
  REQUIRE(example_headers == 3);

  std::ifstream summaries("dec1.txt");
  int n_lines = 0;
  while (std::getline(summaries, line)) {
    ++n_lines;
    REQUIRE(std::count(line.begin(), line.end(), ' ') + 1 <= cfg.max_len);
  }
  REQUIRE(n_lines == 3);

  for (const char* f : {"dec1.txt", "dec1_trace.txt", "dec3.txt", "dec3_trace.txt"}) {
    std::remove(f);
  }
}

TEST_CASE("decoding an empty corpus yields empty outputs", "[decoder]") {
  std::vector<Example> build{{{"aa", "bb"}, {"aa"}}};
  Vocabulary vocab = build_vocab(build, 6);
  ModelParams params = toy_params(vocab.size(), 2);
  decode_corpus({}, vocab, params, BeamConfig{}, 20, 10, "empty.txt", "empty_trace.txt", 2);
  REQUIRE(slurp("empty.txt").empty());
  REQUIRE(slurp("empty_trace.txt").empty());
  std::remove("empty.txt");
  std::remove("empty_trace.txt");
}
