#pragma once

// Tiny decoder-only causal language model on top of idk::ad.
//
// Pre-norm blocks (layer norm -> causal attention -> residual, layer norm ->
// GELU MLP -> residual), learned absolute positions, final layer norm and an
// output projection stored as one row per vocabulary entry so that appending
// the [IDK] row leaves every existing logit untouched.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "idk/autodiff.hpp"
#include "idk/error.hpp"

namespace idk {

struct TokenSequence {
  std::vector<TokenId> ids;
};

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t context_len = 64;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  bool tie_embeddings = false;
  std::uint64_t seed = 0;

  void validate() const {
    IDK_CHECK(vocab_size >= 2, "ModelConfig: vocab_size must be at least 2");
    IDK_CHECK(context_len >= 2, "ModelConfig: context_len must be at least 2");
    IDK_CHECK(d_model > 0 && n_layers > 0 && n_heads > 0, "ModelConfig: sizes must be positive");
    IDK_CHECK(d_model % n_heads == 0, "ModelConfig: d_model must be divisible by n_heads");
  }

  /// Closed-form parameter count for this architecture.
  std::size_t expected_parameter_count() const {
    const std::size_t d = d_model;
    const std::size_t per_layer = 2 * d                 // ln1
                                  + 3 * d * d + 3 * d   // qkv
                                  + d * d + d           // attention output
                                  + 2 * d               // ln2
                                  + 4 * d * d + 4 * d   // mlp in
                                  + 4 * d * d + d;      // mlp out
    const std::size_t head = tie_embeddings ? 0 : vocab_size * d;
    return vocab_size * d + context_len * d + n_layers * per_layer + 2 * d + head;
  }

  bool operator==(const ModelConfig&) const = default;
};

struct Parameter {
  std::string name;
  ad::Tensor tensor;
  bool decay = false;  // subject to decoupled weight decay
};

/// Logits for a padded batch: row b * seq + t holds position t of sequence b.
struct ForwardResult {
  ad::Tensor logits;
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::size_t> lengths;

  std::span<const double> row(std::size_t b, std::size_t t) const {
    const std::size_t v = logits.dim(1);
    return logits.values().subspan((b * seq + t) * v, v);
  }
};

class Model {
 public:
  static constexpr double kInitStd = 0.02;

  explicit Model(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    std::normal_distribution<double> normal(0.0, kInitStd);
    const double proj_std = kInitStd / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));
    std::normal_distribution<double> proj_normal(0.0, proj_std);
    const std::size_t d = cfg_.d_model;

    auto random = [&](std::string name, ad::Shape shape, auto& dist) {
      std::vector<double> v(ad::numel_of(shape));
      for (double& x : v) x = dist(rng);
      params_.push_back({std::move(name), ad::Tensor::from(std::move(shape), std::move(v), true),
                         true});
    };
    auto constant = [&](std::string name, std::size_t n, double value) {
      params_.push_back({std::move(name),
                         ad::Tensor::from({n}, std::vector<double>(n, value), true), false});
    };

    random("tok_emb", {cfg_.vocab_size, d}, normal);
    random("pos_emb", {cfg_.context_len, d}, normal);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "h" + std::to_string(l) + ".";
      constant(p + "ln1.g", d, 1.0);
      constant(p + "ln1.b", d, 0.0);
      random(p + "attn.w_qkv", {d, 3 * d}, normal);
      constant(p + "attn.b_qkv", 3 * d, 0.0);
      random(p + "attn.w_o", {d, d}, proj_normal);
      constant(p + "attn.b_o", d, 0.0);
      constant(p + "ln2.g", d, 1.0);
      constant(p + "ln2.b", d, 0.0);
      random(p + "mlp.w_fc", {d, 4 * d}, normal);
      constant(p + "mlp.b_fc", 4 * d, 0.0);
      random(p + "mlp.w_proj", {4 * d, d}, proj_normal);
      constant(p + "mlp.b_proj", d, 0.0);
    }
    constant("ln_f.g", d, 1.0);
    constant("ln_f.b", d, 0.0);
    if (!cfg_.tie_embeddings) random("lm_head", {cfg_.vocab_size, d}, normal);
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  std::size_t vocab_size() const noexcept { return cfg_.vocab_size; }
  std::optional<TokenId> idk_index() const noexcept { return idk_index_; }

  std::vector<Parameter>& parameters() noexcept { return params_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  const ad::Tensor& param(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p.tensor;
    throw ConfigError("Model: no parameter named " + name);
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  /// Appends one freshly initialized input-embedding row and one output row
  /// for [IDK]. Returns its index, which is the previous vocabulary size.
  TokenId extend_vocab_with_idk(std::uint64_t seed) {
    IDK_CHECK(!idk_index_.has_value(), "extend_vocab_with_idk: model already has an [IDK] row");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, kInitStd);
    const std::size_t d = cfg_.d_model;
    auto grow = [&](const std::string& name) {
      for (auto& p : params_) {
        if (p.name != name) continue;
        std::vector<double> v(p.tensor.values().begin(), p.tensor.values().end());
        for (std::size_t c = 0; c < d; ++c) v.push_back(normal(rng));
        p.tensor = ad::Tensor::from({cfg_.vocab_size + 1, d}, std::move(v), true);
      }
    };
    grow("tok_emb");
    if (!cfg_.tie_embeddings) grow("lm_head");
    const auto idk = static_cast<TokenId>(cfg_.vocab_size);
    cfg_.vocab_size += 1;
    idk_index_ = idk;
    return idk;
  }

  /// Restores the [IDK] marker on a model whose tensors already include the
  /// row (checkpoint loading).
  void set_idk_index(std::optional<TokenId> idk) {
    if (idk) IDK_CHECK(*idk + 1 == cfg_.vocab_size, "set_idk_index: [IDK] must be the last row");
    idk_index_ = idk;
  }

  /// Causal forward pass over a batch. Shorter sequences are right-padded with
  /// token 0; causality makes the padding invisible to real positions.
  ForwardResult forward(std::span<const TokenSequence> batch) const {
    IDK_CHECK(!batch.empty(), "forward: empty batch");
    ForwardResult out;
    out.batch = batch.size();
    for (const auto& s : batch) {
      IDK_CHECK(!s.ids.empty(), "forward: empty sequence");
      IDK_CHECK(s.ids.size() <= cfg_.context_len, "forward: sequence longer than context_len");
      out.seq = std::max(out.seq, s.ids.size());
      out.lengths.push_back(s.ids.size());
    }
    const std::size_t B = out.batch, T = out.seq;
    std::vector<TokenId> ids(B * T, 0), pos(B * T);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 0; t < T; ++t) {
        if (t < batch[b].ids.size()) {
          IDK_CHECK(batch[b].ids[t] < cfg_.vocab_size, "forward: token id out of vocabulary");
          ids[b * T + t] = batch[b].ids[t];
        }
        pos[b * T + t] = static_cast<TokenId>(t);
      }
    }

    std::size_t k = 0;
    auto next = [&]() -> const ad::Tensor& { return params_[k++].tensor; };
    const ad::Tensor& tok = next();
    const ad::Tensor& pos_emb = next();
    ad::Tensor x = ad::add(ad::embedding(tok, ids), ad::embedding(pos_emb, pos));
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const auto& ln1g = next();
      const auto& ln1b = next();
      const auto& wqkv = next();
      const auto& bqkv = next();
      const auto& wo = next();
      const auto& bo = next();
      const auto& ln2g = next();
      const auto& ln2b = next();
      const auto& wfc = next();
      const auto& bfc = next();
      const auto& wproj = next();
      const auto& bproj = next();

      ad::Tensor h = ad::layer_norm(x, ln1g, ln1b);
      ad::Tensor qkv = ad::add_rowwise(ad::matmul(h, wqkv), bqkv);
      ad::Tensor att = ad::causal_attention(qkv, B, T, cfg_.n_heads);
      x = ad::add(x, ad::add_rowwise(ad::matmul(att, wo), bo));
      h = ad::layer_norm(x, ln2g, ln2b);
      ad::Tensor m = ad::gelu(ad::add_rowwise(ad::matmul(h, wfc), bfc));
      x = ad::add(x, ad::add_rowwise(ad::matmul(m, wproj), bproj));
    }
    const auto& lnfg = next();
    const auto& lnfb = next();
    x = ad::layer_norm(x, lnfg, lnfb);
    const ad::Tensor& head = cfg_.tie_embeddings ? tok : next();
    out.logits = ad::matmul_nt(x, head);
    return out;
  }

 private:
  ModelConfig cfg_;
  std::vector<Parameter> params_;
  std::optional<TokenId> idk_index_;
};

}  // namespace idk
