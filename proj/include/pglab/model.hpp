#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"
#include "vocab.hpp"

namespace pglab {

struct ModelConfig {
  int vocab_size = 200;
  int emb_dim = 32;
  int hidden_dim = 64;  // full bidirectional width; each encoder direction gets half
  int head_count = 1;

  void validate() const {
    if (vocab_size <= kReservedCount) throw std::runtime_error("model: vocab_size too small");
    if (emb_dim < 1 || hidden_dim < 2) throw std::runtime_error("model: bad dimensions");
    if (hidden_dim % 2 != 0) throw std::runtime_error("model: hidden_dim must be even");
    if (head_count < 1) throw std::runtime_error("model: head_count must be >= 1");
    if (hidden_dim % head_count != 0) {
      throw std::runtime_error("model: hidden_dim must divide by head_count");
    }
  }
};

struct AttentionHead {
  Tensor v;     // [hidden]
  Tensor wh;    // [hidden, hidden]
  Tensor ws;    // [hidden, hidden]
  Tensor wc;    // [hidden] — coverage feature, used on the pointer head only
  Tensor b;     // [hidden]
  Tensor proj;  // [hidden, hidden/heads]; absent (undefined) in single-head mode
};

struct ModelParams {
  ModelConfig cfg;
  Tensor embedding;                             // [vocab, emb]
  Tensor enc_fwd_wih, enc_fwd_whh, enc_fwd_b;   // [4u, emb], [4u, u], [4u]; u = hidden/2
  Tensor enc_bwd_wih, enc_bwd_whh, enc_bwd_b;
  Tensor bridge_h_w, bridge_h_b;                // [hidden, hidden], [hidden]
  Tensor bridge_c_w, bridge_c_b;
  Tensor dec_wih, dec_whh, dec_b;               // [4h, emb], [4h, h], [4h]
  std::vector<AttentionHead> heads;
  Tensor out_w1, out_b1;                        // [2h, h], [h]
  Tensor out_w2, out_b2;                        // [h, vocab], [vocab]
  Tensor sw_h, sw_s, sw_x, sw_b;                // [h], [h], [emb], [1]

  std::vector<std::pair<std::string, Tensor>> named() const {
    std::vector<std::pair<std::string, Tensor>> out = {
        {"embedding", embedding},
        {"enc_fwd_wih", enc_fwd_wih}, {"enc_fwd_whh", enc_fwd_whh}, {"enc_fwd_b", enc_fwd_b},
        {"enc_bwd_wih", enc_bwd_wih}, {"enc_bwd_whh", enc_bwd_whh}, {"enc_bwd_b", enc_bwd_b},
        {"bridge_h_w", bridge_h_w},   {"bridge_h_b", bridge_h_b},
        {"bridge_c_w", bridge_c_w},   {"bridge_c_b", bridge_c_b},
        {"dec_wih", dec_wih},         {"dec_whh", dec_whh},         {"dec_b", dec_b},
    };
    for (std::size_t k = 0; k < heads.size(); ++k) {
      const std::string base = "att" + std::to_string(k) + "_";
      out.emplace_back(base + "v", heads[k].v);
      out.emplace_back(base + "wh", heads[k].wh);
      out.emplace_back(base + "ws", heads[k].ws);
      out.emplace_back(base + "wc", heads[k].wc);
      out.emplace_back(base + "b", heads[k].b);
      if (heads[k].proj.defined()) out.emplace_back(base + "proj", heads[k].proj);
    }
    out.emplace_back("out_w1", out_w1);
    out.emplace_back("out_b1", out_b1);
    out.emplace_back("out_w2", out_w2);
    out.emplace_back("out_b2", out_b2);
    out.emplace_back("sw_h", sw_h);
    out.emplace_back("sw_s", sw_s);
    out.emplace_back("sw_x", sw_x);
    out.emplace_back("sw_b", sw_b);
    return out;
  }

  void zero_grads() const {
    for (auto& [name, t] : named()) {
      (void)name;
      const_cast<Tensor&>(t).zero_grad();
    }
  }
};

namespace detail {

inline Tensor uniform_tensor(std::vector<int> shape, Rng& rng, double r = 0.05) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-r, r);
  return Tensor(std::move(shape), std::move(v), true);
}

inline Tensor lstm_bias(int units) {
  // gate order i, f, g, o — forget gate biased to 1
  std::vector<double> b(static_cast<std::size_t>(4 * units), 0.0);
  for (int j = units; j < 2 * units; ++j) b[static_cast<std::size_t>(j)] = 1.0;
  return Tensor({4 * units}, std::move(b), true);
}

}  // namespace detail

inline ModelParams init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const int V = cfg.vocab_size, E = cfg.emb_dim, H = cfg.hidden_dim;
  const int u = H / 2;
  ModelParams p;
  p.cfg = cfg;
  p.embedding = detail::uniform_tensor({V, E}, rng);
  p.enc_fwd_wih = detail::uniform_tensor({4 * u, E}, rng);
  p.enc_fwd_whh = detail::uniform_tensor({4 * u, u}, rng);
  p.enc_fwd_b = detail::lstm_bias(u);
  p.enc_bwd_wih = detail::uniform_tensor({4 * u, E}, rng);
  p.enc_bwd_whh = detail::uniform_tensor({4 * u, u}, rng);
  p.enc_bwd_b = detail::lstm_bias(u);
  p.bridge_h_w = detail::uniform_tensor({H, H}, rng);
  p.bridge_h_b = Tensor::zeros({H}, true);
  p.bridge_c_w = detail::uniform_tensor({H, H}, rng);
  p.bridge_c_b = Tensor::zeros({H}, true);
  p.dec_wih = detail::uniform_tensor({4 * H, E}, rng);
  p.dec_whh = detail::uniform_tensor({4 * H, H}, rng);
  p.dec_b = detail::lstm_bias(H);
  for (int k = 0; k < cfg.head_count; ++k) {
    AttentionHead head;
    head.v = detail::uniform_tensor({H}, rng);
    head.wh = detail::uniform_tensor({H, H}, rng);
    head.ws = detail::uniform_tensor({H, H}, rng);
    head.wc = detail::uniform_tensor({H}, rng);
    head.b = Tensor::zeros({H}, true);
    if (cfg.head_count > 1) {
      head.proj = detail::uniform_tensor({H, H / cfg.head_count}, rng);
    }
    p.heads.push_back(std::move(head));
  }
  p.out_w1 = detail::uniform_tensor({2 * H, H}, rng);
  p.out_b1 = Tensor::zeros({H}, true);
  p.out_w2 = detail::uniform_tensor({H, V}, rng);
  p.out_b2 = Tensor::zeros({V}, true);
  p.sw_h = detail::uniform_tensor({H}, rng);
  p.sw_s = detail::uniform_tensor({H}, rng);
  p.sw_x = detail::uniform_tensor({E}, rng);
  p.sw_b = Tensor::zeros({1}, true);
  return p;
}

// (h', c') for one LSTM step with gate order i, f, g, o.
inline std::pair<Tensor, Tensor> lstm_step(const Tensor& x, const Tensor& h, const Tensor& c,
                                           const Tensor& wih, const Tensor& whh,
                                           const Tensor& b) {
  const int units = h.dim(0);
  Tensor gates = add(add(matvec(wih, x), matvec(whh, h)), b);
  Tensor i = sigmoid(slice(gates, 0, units));
  Tensor f = sigmoid(slice(gates, units, units));
  Tensor g = tanh(slice(gates, 2 * units, units));
  Tensor o = sigmoid(slice(gates, 3 * units, units));
  Tensor c_next = add(mul(f, c), mul(i, g));
  Tensor h_next = mul(o, tanh(c_next));
  return {h_next, c_next};
}

struct EncoderOutput {
  Tensor hs;                       // [n, hidden]; zero rows at padded positions
  std::vector<std::uint8_t> mask;  // 1 = real token
  Tensor s0, cell0;                // decoder init
  std::vector<Tensor> wh;          // per head: hs · att_wh, computed once per example
  int n_real = 0;
};

// Runs the bidirectional encoder over the first n_real ids (all of them when
// n_real < 0); any trailing positions become zero rows excluded by the mask.
inline EncoderOutput encode(const std::vector<int>& src_ids, const ModelParams& p,
                            int n_real = -1) {
  const int n = static_cast<int>(src_ids.size());
  if (n_real < 0) n_real = n;
  if (n_real < 1 || n_real > n) throw std::runtime_error("encode: bad real-token count");
  const int H = p.cfg.hidden_dim;
  const int u = H / 2;

  std::vector<Tensor> emb(static_cast<std::size_t>(n_real));
  for (int i = 0; i < n_real; ++i) emb[static_cast<std::size_t>(i)] = row(p.embedding, src_ids[static_cast<std::size_t>(i)]);

  std::vector<Tensor> fwd(static_cast<std::size_t>(n_real));
  {
    Tensor h = Tensor::zeros({u}), c = Tensor::zeros({u});
    for (int i = 0; i < n_real; ++i) {
      auto [h2, c2] = lstm_step(emb[static_cast<std::size_t>(i)], h, c, p.enc_fwd_wih,
                                p.enc_fwd_whh, p.enc_fwd_b);
      h = h2;
      c = c2;
      fwd[static_cast<std::size_t>(i)] = h;
    }
  }
  std::vector<Tensor> bwd(static_cast<std::size_t>(n_real));
  {
    Tensor h = Tensor::zeros({u}), c = Tensor::zeros({u});
    for (int i = n_real - 1; i >= 0; --i) {
      auto [h2, c2] = lstm_step(emb[static_cast<std::size_t>(i)], h, c, p.enc_bwd_wih,
                                p.enc_bwd_whh, p.enc_bwd_b);
      h = h2;
      c = c2;
      bwd[static_cast<std::size_t>(i)] = h;
    }
  }

  EncoderOutput enc;
  enc.n_real = n_real;
  enc.mask.assign(static_cast<std::size_t>(n), 0);
  std::vector<Tensor> rows(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (i < n_real) {
      rows[static_cast<std::size_t>(i)] =
          concat(fwd[static_cast<std::size_t>(i)], bwd[static_cast<std::size_t>(i)]);
      enc.mask[static_cast<std::size_t>(i)] = 1;
    } else {
      rows[static_cast<std::size_t>(i)] = Tensor::zeros({H});
    }
  }
  enc.hs = stack(rows);

  Tensor final_states = concat(fwd[static_cast<std::size_t>(n_real - 1)], bwd[0]);
  enc.s0 = tanh(add(vecmat(final_states, p.bridge_h_w), p.bridge_h_b));
  enc.cell0 = tanh(add(vecmat(final_states, p.bridge_c_w), p.bridge_c_b));

  enc.wh.reserve(p.heads.size());
  for (const AttentionHead& head : p.heads) enc.wh.push_back(matmul(enc.hs, head.wh));
  return enc;
}

struct AttentionResult {
  Tensor a;  // distribution over source positions
  Tensor e;  // raw scores
};

// Scores every head against the decoder state. The coverage feature applies to
// the pointer head (head 0) only, and only when coverage mode is on.
inline std::vector<AttentionResult> attend(const Tensor& s, const EncoderOutput& enc,
                                           const Tensor& coverage, bool coverage_on,
                                           const ModelParams& p) {
  std::vector<AttentionResult> out;
  out.reserve(p.heads.size());
  for (std::size_t k = 0; k < p.heads.size(); ++k) {
    const AttentionHead& head = p.heads[k];
    Tensor pre = add(enc.wh[k], vecmat(s, head.ws));  // [n, H] + bias-broadcast [H]
    if (coverage_on && k == 0) pre = add(pre, outer(coverage, head.wc));
    pre = add(pre, head.b);
    Tensor e = matvec(tanh(pre), head.v);
    AttentionResult r;
    r.e = e;
    r.a = masked_softmax(e, enc.mask);
    out.push_back(std::move(r));
  }
  return out;
}

// Spec-shaped convenience overload computing the per-head h·W_h product on the
// fly (the main path reuses the per-example cache in EncoderOutput).
inline std::vector<AttentionResult> attention_step(const Tensor& s, const EncoderOutput& enc,
                                                   const Tensor& coverage, bool coverage_on,
                                                   const ModelParams& p) {
  return attend(s, enc, coverage, coverage_on, p);
}

// Per-head weighted context; multi-head contexts are projected to
// hidden/head_count and concatenated so the result always has hidden size.
inline Tensor make_context(const std::vector<AttentionResult>& heads, const EncoderOutput& enc,
                           const ModelParams& p) {
  if (p.heads.size() == 1) return vecmat(heads[0].a, enc.hs);
  std::vector<Tensor> parts;
  parts.reserve(heads.size());
  for (std::size_t k = 0; k < heads.size(); ++k) {
    parts.push_back(vecmat(vecmat(heads[k].a, enc.hs), p.heads[k].proj));
  }
  return concat(parts);
}

inline Tensor generator_distribution(const Tensor& s, const Tensor& hstar,
                                     const ModelParams& p) {
  Tensor joint = concat(s, hstar);
  Tensor hidden = add(vecmat(joint, p.out_w1), p.out_b1);
  Tensor logits = add(vecmat(hidden, p.out_w2), p.out_b2);
  return masked_softmax(logits);
}

namespace detail {
inline Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }
}  // namespace detail

inline Tensor switch_pgen(const Tensor& hstar, const Tensor& s, const Tensor& x,
                          const ModelParams& p) {
  Tensor z = add(add(add(detail::dot(p.sw_h, hstar), detail::dot(p.sw_s, s)),
                     detail::dot(p.sw_x, x)),
                 p.sw_b);
  return sigmoid(z);
}

// p(w) = p_gen · p_vocab(w) + (1 − p_gen) · Σ_{i: ext_id(i) = w} p_a(i) over the
// extended vocabulary; repeated source tokens pool their attention mass.
inline Tensor final_distribution(const Tensor& p_vocab, const Tensor& p_gen, const Tensor& p_a,
                                 const std::vector<int>& source_ext_ids, int extended_size) {
  const int V = p_vocab.dim(0);
  Tensor gen_part = mul(p_vocab, p_gen);
  Tensor extended =
      extended_size > V ? concat(gen_part, Tensor::zeros({extended_size - V})) : gen_part;
  Tensor p_point = sub(Tensor::scalar(1.0), p_gen);
  Tensor copy_part = scatter_add(mul(p_a, p_point), source_ext_ids, extended_size);
  return add(extended, copy_part);
}

// Whole-example pointer dropout draw: true means this example trains with the
// switch bypassed and p_gen pinned to 1.
inline bool pointer_dropout_decision(double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::runtime_error("dropout: rate must be in [0,1)");
  }
  return rng.bernoulli(rate);
}

struct StepOutput {
  std::vector<AttentionResult> attn;
  Tensor pointer_attn;  // alias of attn[0].a — the shared head
  Tensor context;
  Tensor p_vocab;
  Tensor p_gen;
  Tensor p_final;   // over the extended vocabulary
  Tensor coverage;  // snapshot c^t consumed by this step
  Tensor s, cell;
};

struct ForwardFlags {
  bool coverage_on = false;
  bool dropout_forced = false;  // pins p_gen = 1 and bypasses the switch
};

// One decoder step: feed input_id, update state, attend, mix distributions.
inline StepOutput decode_step(int input_id, const Tensor& s_prev, const Tensor& c_prev,
                              const Tensor& coverage, const EncoderOutput& enc,
                              const EncodedExample& ex, const ModelParams& p,
                              const ForwardFlags& flags) {
  StepOutput out;
  Tensor x = row(p.embedding, input_id);
  auto [s, c] = lstm_step(x, s_prev, c_prev, p.dec_wih, p.dec_whh, p.dec_b);
  out.s = s;
  out.cell = c;
  out.coverage = coverage;
  out.attn = attend(s, enc, coverage, flags.coverage_on, p);
  out.pointer_attn = out.attn[0].a;
  out.context = make_context(out.attn, enc, p);
  out.p_vocab = generator_distribution(s, out.context, p);
  const int ext_size = ex.extended_size(p.cfg.vocab_size);
  if (flags.dropout_forced) {
    out.p_gen = Tensor::scalar(1.0);
    out.p_final = ext_size > p.cfg.vocab_size
                      ? concat(out.p_vocab, Tensor::zeros({ext_size - p.cfg.vocab_size}))
                      : out.p_vocab;
  } else {
    out.p_gen = switch_pgen(out.context, s, x, p);
    out.p_final = final_distribution(out.p_vocab, out.p_gen, out.pointer_attn,
                                     ex.source_ext_ids, ext_size);
  }
  return out;
}

// Teacher-forced pass over the wrapped target; step t consumes target_ids[t]
// and predicts target_ext_ids[t+1]. Coverage accumulates pointer-head
// attention: c^0 = 0, c^{t+1} = c^t + a^t.
inline std::vector<StepOutput> forward_teacher_forced(const EncodedExample& ex,
                                                      const ModelParams& p,
                                                      const ForwardFlags& flags) {
  const int T = ex.decode_steps();
  if (T < 1) throw std::runtime_error("forward: target has no decode steps");
  EncoderOutput enc = encode(ex.source_ids, p);
  Tensor s = enc.s0, c = enc.cell0;
  Tensor coverage = Tensor::zeros({static_cast<int>(ex.source_ids.size())});
  std::vector<StepOutput> steps;
  steps.reserve(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    StepOutput step =
        decode_step(ex.target_ids[static_cast<std::size_t>(t)], s, c, coverage, enc, ex, p, flags);
    s = step.s;
    c = step.cell;
    coverage = add(coverage, step.pointer_attn);
    steps.push_back(std::move(step));
  }
  return steps;
}

}  // namespace pglab
