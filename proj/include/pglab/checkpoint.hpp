#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "model.hpp"

namespace pglab {

// Checkpoint layout: magic line, one manifest line per tensor
// (`name<TAB>dim1[,dim2]`), a blank line, then raw little-endian doubles in
// manifest order, row-major. Round-trips are bit-exact.
inline constexpr const char* kCheckpointMagic = "PGLAB1";

inline void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  const auto named = params.named();
  out << kCheckpointMagic << '\n';
  for (const auto& [name, t] : named) {
    out << name << '\t';
    for (int i = 0; i < t.rank(); ++i) {
      if (i) out << ',';
      out << t.dim(i);
    }
    out << '\n';
  }
  out << '\n';
  for (const auto& [name, t] : named) {
    (void)name;
    out.write(reinterpret_cast<const char*>(t.values().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

namespace detail {

class TensorBag {
 public:
  explicit TensorBag(std::map<std::string, Tensor> tensors) : tensors_(std::move(tensors)) {}

  Tensor take(const std::string& name, const std::vector<int>& shape) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) {
      throw std::runtime_error("checkpoint: missing tensor " + name);
    }
    if (it->second.shape() != shape) {
      throw std::runtime_error("checkpoint: tensor " + name + " has shape " +
                               shape_str(it->second.shape()) + ", expected " + shape_str(shape));
    }
    Tensor t = it->second;
    tensors_.erase(it);
    return t;
  }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  void expect_empty() const {
    if (!tensors_.empty()) {
      throw std::runtime_error("checkpoint: unexpected tensor " + tensors_.begin()->first);
    }
  }

 private:
  std::map<std::string, Tensor> tensors_;
};

}  // namespace detail

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  std::vector<std::pair<std::string, std::vector<int>>> manifest;
  while (std::getline(in, line) && !line.empty()) {
    auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error("checkpoint: bad manifest line: " + line);
    }
    std::vector<int> shape;
    std::istringstream dims(line.substr(tab + 1));
    std::string d;
    while (std::getline(dims, d, ',')) shape.push_back(std::stoi(d));
    if (shape.empty() || shape.size() > 2) {
      throw std::runtime_error("checkpoint: bad dims in line: " + line);
    }
    manifest.emplace_back(line.substr(0, tab), std::move(shape));
  }
  std::map<std::string, Tensor> tensors;
  for (auto& [name, shape] : manifest) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    std::vector<double> values(n);
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: truncated data for " + name);
    tensors.emplace(name, Tensor(shape, std::move(values), true));
  }

  detail::TensorBag bag(std::move(tensors));
  ModelConfig cfg;
  {
    auto it_emb = std::find_if(manifest.begin(), manifest.end(),
                               [](const auto& e) { return e.first == "embedding"; });
    auto it_out = std::find_if(manifest.begin(), manifest.end(),
                               [](const auto& e) { return e.first == "out_w1"; });
    if (it_emb == manifest.end() || it_out == manifest.end() || it_emb->second.size() != 2 ||
        it_out->second.size() != 2) {
      throw std::runtime_error("checkpoint: cannot infer model dimensions");
    }
    cfg.vocab_size = it_emb->second[0];
    cfg.emb_dim = it_emb->second[1];
    cfg.hidden_dim = it_out->second[1];
    cfg.head_count = 0;
    while (bag.contains("att" + std::to_string(cfg.head_count) + "_v")) ++cfg.head_count;
  }
  cfg.validate();
  const int V = cfg.vocab_size, E = cfg.emb_dim, H = cfg.hidden_dim, u = H / 2;

  ModelParams p;
  p.cfg = cfg;
  p.embedding = bag.take("embedding", {V, E});
  p.enc_fwd_wih = bag.take("enc_fwd_wih", {4 * u, E});
  p.enc_fwd_whh = bag.take("enc_fwd_whh", {4 * u, u});
  p.enc_fwd_b = bag.take("enc_fwd_b", {4 * u});
  p.enc_bwd_wih = bag.take("enc_bwd_wih", {4 * u, E});
  p.enc_bwd_whh = bag.take("enc_bwd_whh", {4 * u, u});
  p.enc_bwd_b = bag.take("enc_bwd_b", {4 * u});
  p.bridge_h_w = bag.take("bridge_h_w", {H, H});
  p.bridge_h_b = bag.take("bridge_h_b", {H});
  p.bridge_c_w = bag.take("bridge_c_w", {H, H});
  p.bridge_c_b = bag.take("bridge_c_b", {H});
  p.dec_wih = bag.take("dec_wih", {4 * H, E});
  p.dec_whh = bag.take("dec_whh", {4 * H, H});
  p.dec_b = bag.take("dec_b", {4 * H});
  for (int k = 0; k < cfg.head_count; ++k) {
    const std::string base = "att" + std::to_string(k) + "_";
    AttentionHead head;
    head.v = bag.take(base + "v", {H});
    head.wh = bag.take(base + "wh", {H, H});
    head.ws = bag.take(base + "ws", {H, H});
    head.wc = bag.take(base + "wc", {H});
    head.b = bag.take(base + "b", {H});
    if (cfg.head_count > 1) head.proj = bag.take(base + "proj", {H, H / cfg.head_count});
    p.heads.push_back(std::move(head));
  }
  p.out_w1 = bag.take("out_w1", {2 * H, H});
  p.out_b1 = bag.take("out_b1", {H});
  p.out_w2 = bag.take("out_w2", {H, V});
  p.out_b2 = bag.take("out_b2", {V});
  p.sw_h = bag.take("sw_h", {H});
  p.sw_s = bag.take("sw_s", {H});
  p.sw_x = bag.take("sw_x", {E});
  p.sw_b = bag.take("sw_b", {1});
  bag.expect_empty();
  return p;
}

}  // namespace pglab
