#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <pglab/checkpoint.hpp>
#include <pglab/grad_check.hpp>
#include <pglab/model.hpp>
#include <pglab/rng.hpp>

using namespace pglab;

namespace {

ModelParams tiny_params(int heads = 1, std::uint64_t seed = 11) {
  ModelConfig cfg;
  cfg.vocab_size = 12;
  cfg.emb_dim = 3;
  cfg.hidden_dim = 4;
  cfg.head_count = heads;
  Rng rng(seed);
  return init_params(cfg, rng);
}

EncodedExample tiny_example(const ModelParams& p) {
  EncodedExample ex;
  ex.source_ids = {4, 5, kUnk, 6};
  ex.source_ext_ids = {4, 5, p.cfg.vocab_size, 6};
  ex.oov_tokens = {"zorp"};
  ex.target_ids = {kStart, 5, kUnk, kStop};
  ex.target_ext_ids = {kStart, 5, p.cfg.vocab_size, kStop};
  ex.src_len_after = 4;
  ex.tgt_len_after = 2;
  return ex;
}

void zero_all_weights(ModelParams& p) {
  for (auto& [name, t] : p.named()) {
    (void)name;
    auto& v = const_cast<Tensor&>(t).values();
    std::fill(v.begin(), v.end(), 0.0);
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("model config validation", "[model]") {
  ModelConfig cfg;
  cfg.vocab_size = 4;
  REQUIRE_THROWS(cfg.validate());
  cfg.vocab_size = 12;
  cfg.hidden_dim = 5;
  REQUIRE_THROWS(cfg.validate());
  cfg.hidden_dim = 6;
  cfg.head_count = 4;  // 6 % 4 != 0
  REQUIRE_THROWS(cfg.validate());
  cfg.hidden_dim = 8;
  REQUIRE_NOTHROW(cfg.validate());
}

TEST_CASE("init shapes, forget bias, named registry", "[model]") {
  ModelParams p = tiny_params(4);
  REQUIRE(p.embedding.shape() == std::vector<int>{12, 3});
  REQUIRE(p.enc_fwd_wih.shape() == std::vector<int>{8, 3});  // 4u with u = 2
  REQUIRE(p.dec_whh.shape() == std::vector<int>{16, 4});
  REQUIRE(p.heads.size() == 4);
  REQUIRE(p.heads[2].proj.shape() == std::vector<int>{4, 1});

  // forget-gate slice of each LSTM bias is 1, everything else 0
  for (const Tensor* b : {&p.enc_fwd_b, &p.enc_bwd_b}) {
    for (int j = 0; j < 8; ++j) REQUIRE(b->value(j) == (j >= 2 && j < 4 ? 1.0 : 0.0));
  }
  for (int j = 0; j < 16; ++j) REQUIRE(p.dec_b.value(j) == (j >= 4 && j < 8 ? 1.0 : 0.0));

  auto named = p.named();
  REQUIRE(named.size() == 14 + 4 * 6 + 8);
  for (const auto& [name, t] : named) {
    INFO(name);
    REQUIRE(t.requires_grad());
  }
}

TEST_CASE("zero-weight encoder produces zero states", "[model]") {
  ModelParams p = tiny_params();
  zero_all_weights(p);
  EncoderOutput enc = encode({4, 5, 6}, p);
  for (double v : enc.hs.values()) REQUIRE(v == 0.0);
  for (double v : enc.s0.values()) REQUIRE(v == 0.0);  // tanh(0·W + 0)
  for (double v : enc.cell0.values()) REQUIRE(v == 0.0);

  EncoderOutput one = encode({7}, p);
  REQUIRE(one.hs.dim(0) == 1);
  REQUIRE(one.mask == std::vector<std::uint8_t>{1});
}

TEST_CASE("padding positions get no attention and do not disturb outputs", "[model]") {
  ModelParams p = tiny_params();
  EncodedExample ex = tiny_example(p);
  EncoderOutput plain = encode(ex.source_ids, p);

  std::vector<int> padded = ex.source_ids;
  padded.push_back(kPad);
  padded.push_back(kPad);
  EncoderOutput pad = encode(padded, p, 4);
  REQUIRE(pad.mask == std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0});
  REQUIRE(plain.s0.values() == pad.s0.values());

  Tensor cov6 = Tensor::zeros({6});
  Tensor cov4 = Tensor::zeros({4});
  auto att_pad = attend(pad.s0, pad, cov6, false, p);
  auto att_plain = attend(plain.s0, plain, cov4, false, p);
  REQUIRE(att_pad[0].a.value(4) == 0.0);
  REQUIRE(att_pad[0].a.value(5) == 0.0);
  for (int i = 0; i < 4; ++i) {
    REQUIRE(std::abs(att_pad[0].a.value(i) - att_plain[0].a.value(i)) < 1e-15);
  }
}

TEST_CASE("identical encoder rows give uniform attention", "[model]") {
  ModelParams p = tiny_params();
  zero_all_weights(p);  // every h_i becomes the zero vector
  EncoderOutput enc = encode({4, 4, 4, 4, 4}, p);
  Tensor s({4}, {0.3, -0.2, 0.5, 0.1});
  auto att = attend(s, enc, Tensor::zeros({5}), false, p);
  for (int i = 0; i < 5; ++i) REQUIRE(std::abs(att[0].a.value(i) - 0.2) < 1e-15);
}

TEST_CASE("multi-head context restores full width and heads differ", "[model]") {
  ModelParams p4 = tiny_params(4, 21);
  ModelParams p1 = tiny_params(1, 21);
  EncodedExample ex = tiny_example(p4);
  EncoderOutput enc = encode(ex.source_ids, p4);
  Tensor cov = Tensor::zeros({4});
  auto att = attend(enc.s0, enc, cov, false, p4);
  REQUIRE(att.size() == 4);
  Tensor ctx = make_context(att, enc, p4);
  REQUIRE(ctx.shape() == std::vector<int>{4});

  EncoderOutput enc1 = encode(ex.source_ids, p1);
  Tensor ctx1 = make_context(attend(enc1.s0, enc1, cov, false, p1), enc1, p1);
  REQUIRE(ctx1.shape() == ctx.shape());  // head count never changes the width

  // Randomly initialized heads disagree: KL(head_i || head_j) > 0 somewhere.
  double max_kl = 0.0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double kl = 0.0;
      for (int k = 0; k < 4; ++k) {
        const double a = att[i].a.value(k), b = att[j].a.value(k);
        kl += a * (std::log(std::max(a, kLogFloor)) - std::log(std::max(b, kLogFloor)));
      }
      if (i != j) max_kl = std::max(max_kl, kl);
    }
  REQUIRE(max_kl > 0.0);
}

TEST_CASE("one-hot attention picks the encoder row", "[model]") {
  ModelParams p = tiny_params();
  EncoderOutput enc = encode({4, 5, 6}, p);
  std::vector<AttentionResult> att(1);
  att[0].a = Tensor({3}, {0.0, 1.0, 0.0});
  Tensor ctx = make_context(att, enc, p);
  for (int j = 0; j < 4; ++j) REQUIRE(ctx.value(j) == enc.hs.at(1, j));
}

TEST_CASE("generator distribution is uniform at zero weights", "[model]") {
  ModelParams p = tiny_params();
  zero_all_weights(p);
  Tensor s = Tensor::zeros({4}), ctx = Tensor::zeros({4});
  Tensor pv = generator_distribution(s, ctx, p);
  for (int i = 0; i < 12; ++i) REQUIRE(std::abs(pv.value(i) - 1.0 / 12.0) < 1e-15);
}

TEST_CASE("switch is half at zero parameters", "[model]") {
  ModelParams p = tiny_params();
  zero_all_weights(p);
  Tensor hstar({4}, {1, 2, 3, 4}), s({4}, {5, 6, 7, 8}), x({3}, {1, 1, 1});
  REQUIRE(switch_pgen(hstar, s, x, p).value() == 0.5);
  p.sw_b.value(0) = 50.0;
  REQUIRE(switch_pgen(hstar, s, x, p).value() > 1.0 - 1e-15);
}

TEST_CASE("final distribution hand cases", "[model]") {
  Tensor p_vocab({8}, std::vector<double>(8, 0.125));

  SECTION("pure generation extends with exact zeros") {
    Tensor p = final_distribution(p_vocab, Tensor::scalar(1.0),
                                  Tensor({2}, {0.4, 0.6}), {9, 5}, 10);
    for (int i = 0; i < 8; ++i) REQUIRE(p.value(i) == 0.125);
    REQUIRE(p.value(8) == 0.0);
    REQUIRE(p.value(9) == 0.0);
  }
  SECTION("pure pointing pools duplicate source words") {
    Tensor p = final_distribution(p_vocab, Tensor::scalar(0.0),
                                  Tensor({3}, {0.2, 0.3, 0.5}), {5, 7, 5}, 8);
    REQUIRE(std::abs(p.value(5) - 0.7) < 1e-15);
    REQUIRE(std::abs(p.value(7) - 0.3) < 1e-15);
    REQUIRE(p.value(4) == 0.0);
  }
  SECTION("even mixture") {
    Tensor quarter({4}, std::vector<double>(4, 0.25));
    Tensor p = final_distribution(quarter, Tensor::scalar(0.5), Tensor({1}, {1.0}), {2}, 4);
    REQUIRE(std::abs(p.value(2) - 0.625) < 1e-15);
  }
}

TEST_CASE("forward invariants over random parameter draws", "[model]") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ModelParams p = tiny_params(seed % 2 ? 1 : 4, seed);
    EncodedExample ex = tiny_example(p);
    ForwardFlags flags;
    flags.coverage_on = seed % 3 == 0;
    auto steps = forward_teacher_forced(ex, p, flags);
    REQUIRE(steps.size() == 3);
    for (const StepOutput& s : steps) {
      for (const AttentionResult& head : s.attn) {
        double total = 0.0;
        for (double v : head.a.values()) total += v;
        REQUIRE(std::abs(total - 1.0) < 1e-9);
      }
      double total = 0.0;
      for (double v : s.p_final.values()) total += v;
      REQUIRE(std::abs(total - 1.0) < 1e-9);
      REQUIRE(s.p_final.dim(0) == 13);
      REQUIRE(s.p_gen.value() > 0.0);
      REQUIRE(s.p_gen.value() < 1.0);
      REQUIRE(s.pointer_attn.storage() == s.attn[0].a.storage());  // shared head
    }
  }
}

TEST_CASE("coverage equals the running sum of pointer attention", "[model]") {
  ModelParams p = tiny_params(4, 33);
  EncodedExample ex = tiny_example(p);
  // stretch the target so coverage accumulates over many steps
  ex.target_ids = {kStart, 5, 6, 4, 5, 6, 4, 5, 6, kStop};
  ex.target_ext_ids = ex.target_ids;
  ForwardFlags flags;
  flags.coverage_on = true;
  auto steps = forward_teacher_forced(ex, p, flags);
  std::vector<double> running(4, 0.0);
  for (const StepOutput& s : steps) {
    for (int i = 0; i < 4; ++i) REQUIRE(s.coverage.value(i) == running[i]);  // exact
    for (int i = 0; i < 4; ++i) running[i] += s.pointer_attn.value(i);
  }
}

TEST_CASE("pointer dropout decisions", "[model]") {
  Rng rng(5);
  REQUIRE_THROWS(pointer_dropout_decision(1.0, rng));
  REQUIRE_THROWS(pointer_dropout_decision(-0.1, rng));
  for (int i = 0; i < 100; ++i) REQUIRE_FALSE(pointer_dropout_decision(0.0, rng));
  int drops = 0;
  for (int i = 0; i < 10000; ++i) drops += pointer_dropout_decision(0.2, rng) ? 1 : 0;
  REQUIRE(drops > 2000 - 120);  // 3σ = 3·√(10000·0.16) = 120
  REQUIRE(drops < 2000 + 120);
}

TEST_CASE("dropout-forced pass bypasses the switch entirely", "[model]") {
  ModelParams p = tiny_params(1, 44);
  EncodedExample ex = tiny_example(p);
  ForwardFlags forced;
  forced.dropout_forced = true;
  Graph g;
  auto steps = forward_teacher_forced(ex, p, forced);
  for (const StepOutput& s : steps) {
    REQUIRE(s.p_gen.value() == 1.0);
    // extended distribution is the generator output with exact zero padding
    for (int i = 0; i < 12; ++i) REQUIRE(s.p_final.value(i) == s.p_vocab.value(i));
    REQUIRE(s.p_final.value(12) == 0.0);
  }
  // loss gradient never reaches switch parameters on dropped examples
  std::vector<Tensor> picks;
  for (std::size_t t = 0; t < steps.size(); ++t) {
    picks.push_back(pick(steps[t].p_final, ex.target_ext_ids[t + 1]));
  }
  g.backward(negate(sum(log_clamped(concat(picks)))));
  for (const Tensor* sw : {&p.sw_h, &p.sw_s, &p.sw_x, &p.sw_b}) {
    if (!sw->has_grad()) continue;
    for (double v : sw->grad()) REQUIRE(v == 0.0);
  }
  REQUIRE(p.embedding.has_grad());  // the rest of the model did train
}

TEST_CASE("checkpoint round trip is bit exact", "[model]") {
  const auto dir = std::filesystem::temp_directory_path() / "pglab_ckpt";
  std::filesystem::create_directories(dir);
  ModelParams p = tiny_params(4, 55);
  const std::string path = (dir / "m.ckpt").string();
  save_checkpoint(p, path);
  ModelParams q = load_checkpoint(path);
  REQUIRE(q.cfg.vocab_size == p.cfg.vocab_size);
  REQUIRE(q.cfg.emb_dim == p.cfg.emb_dim);
  REQUIRE(q.cfg.hidden_dim == p.cfg.hidden_dim);
  REQUIRE(q.cfg.head_count == 4);
  auto pn = p.named(), qn = q.named();
  REQUIRE(pn.size() == qn.size());
  for (std::size_t i = 0; i < pn.size(); ++i) {
    REQUIRE(pn[i].first == qn[i].first);
    REQUIRE(pn[i].second.values() == qn[i].second.values());
    REQUIRE(qn[i].second.requires_grad());
  }
  const std::string path2 = (dir / "m2.ckpt").string();
  save_checkpoint(q, path2);
  REQUIRE(read_file(path) == read_file(path2));

  std::ofstream bad((dir / "bad.ckpt").string(), std::ios::binary);
  bad << "NOTMAGIC\n";
  bad.close();
  REQUIRE_THROWS(load_checkpoint((dir / "bad.ckpt").string()));
}

TEST_CASE("encoder gradients match finite differences", "[model]") {
  ModelParams p = tiny_params(1, 66);
  std::vector<Tensor> params;
  std::vector<std::string> names;
  for (auto& [name, t] : p.named()) {
    params.push_back(t);
    names.push_back(name);
  }
  auto f = [&] {
    EncoderOutput enc = encode({4, 5, 6, 7}, p);
    return add(sum(mul(enc.hs, enc.hs)), sum(mul(enc.s0, enc.cell0)));
  };
  auto res = grad_check(f, params, 1e-5, names);
  INFO(res.worst);
  REQUIRE(res.max_rel_err < 1e-6);
}
