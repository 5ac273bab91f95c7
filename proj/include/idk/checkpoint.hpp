#pragma once

// Binary checkpoint container:
//
//   "IDKCKPT\0" | u32 version | u64 metadata length | metadata JSON |
//   per parameter: values, first moments, second moments (raw float64) |
//   32-byte SHA-256 of everything before it
//
// Metadata carries the model config, parameter names and shapes, the [IDK]
// index and the optimizer step, plus a caller-supplied "extra" object.

#include <bit>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "idk/error.hpp"
#include "idk/io.hpp"
#include "idk/model.hpp"
#include "idk/optim.hpp"

namespace idk {

inline constexpr char kCheckpointMagic[8] = {'I', 'D', 'K', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

inline json model_config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"context_len", c.context_len}, {"d_model", c.d_model},
          {"n_layers", c.n_layers},     {"n_heads", c.n_heads},         {"tie_embeddings", c.tie_embeddings},
          {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.context_len = j.at("context_len").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.tie_embeddings = j.at("tie_embeddings").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

struct Checkpoint {
  Model model;
  OptimizerState optimizer;
  json extra;
};

namespace detail {

template <class T>
void put(std::string& out, const T& v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  out.append(p, sizeof(T));
}

inline void put_doubles(std::string& out, std::span<const double> v) {
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

class Reader {
 public:
  Reader(std::string_view bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  template <class T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)).data(), sizeof(T));
    return v;
  }

  std::string_view take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw IoError("checkpoint " + path_ + " is truncated");
    const auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const noexcept { return pos_ == bytes_.size(); }

  void doubles(std::span<double> out) {
    const auto s = take(out.size() * sizeof(double));
    std::memcpy(out.data(), s.data(), s.size());
  }

 private:
  std::string_view bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string checkpoint_bytes(const Model& model, const OptimizerState& opt,
                                    const json& extra = json::object()) {
  const auto& params = model.parameters();
  IDK_CHECK(opt.m.size() == params.size() && opt.v.size() == params.size(),
            "checkpoint_save: optimizer state does not match the model");
  json meta;
  meta["model"] = model_config_to_json(model.config());
  meta["idk_index"] = model.idk_index() ? json(*model.idk_index()) : json(nullptr);
  meta["optimizer_step"] = opt.step;
  meta["extra"] = extra;
  json names = json::array();
  for (const auto& p : params) names.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  meta["parameters"] = names;
  const std::string meta_s = meta.dump();

  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put(out, kCheckpointVersion);
  detail::put(out, static_cast<std::uint64_t>(meta_s.size()));
  out += meta_s;
  for (std::size_t i = 0; i < params.size(); ++i) {
    IDK_CHECK(opt.m[i].size() == params[i].tensor.numel(), "checkpoint_save: moment size mismatch");
    detail::put_doubles(out, params[i].tensor.values());
    detail::put_doubles(out, opt.m[i]);
    detail::put_doubles(out, opt.v[i]);
  }
  out += sha256_bytes(out);
  return out;
}

inline void checkpoint_save(const fs::path& path, const Model& model, const OptimizerState& opt,
                            const json& extra = json::object()) {
  write_file(path, checkpoint_bytes(model, opt, extra));
}

/// Loads a checkpoint. If `expected_vocab` is given, a model with a different
/// vocabulary size is rejected with ConfigError.
inline Checkpoint checkpoint_load(const fs::path& path,
                                  std::optional<std::size_t> expected_vocab = std::nullopt) {
  const std::string bytes = read_file(path);
  const std::string where = path.string();
  if (bytes.size() < sizeof(kCheckpointMagic) + 12 + 32 ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw IoError("not a checkpoint: " + where);
  const std::string_view body(bytes.data(), bytes.size() - 32);
  if (sha256_bytes(body) != std::string_view(bytes).substr(bytes.size() - 32))
    throw IoError("checkpoint " + where + " is corrupt (digest mismatch)");

  detail::Reader r(body, where);
  r.take(sizeof(kCheckpointMagic));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IoError("checkpoint " + where + " has version " + std::to_string(version) +
                  ", expected " + std::to_string(kCheckpointVersion));
  const auto meta_len = r.get<std::uint64_t>();
  json meta;
  ModelConfig cfg;
  try {
    meta = json::parse(r.take(meta_len));
    cfg = model_config_from_json(meta.at("model"));
  } catch (const json::exception& e) {
    throw IoError("checkpoint " + where + " has malformed metadata: " + e.what());
  }
  if (expected_vocab && *expected_vocab != cfg.vocab_size)
    throw ConfigError("checkpoint vocabulary size " + std::to_string(cfg.vocab_size) +
                      " does not match expected " + std::to_string(*expected_vocab));

  Checkpoint ck{Model(cfg), {}, meta.value("extra", json::object())};
  if (!meta.at("idk_index").is_null())
    ck.model.set_idk_index(meta.at("idk_index").get<TokenId>());
  auto& params = ck.model.parameters();
  const auto& names = meta.at("parameters");
  if (names.size() != params.size()) throw IoError("checkpoint " + where + ": parameter count mismatch");
  ck.optimizer = OptimizerState::for_model(ck.model);
  ck.optimizer.step = meta.at("optimizer_step").get<std::size_t>();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (names[i].at("name").get<std::string>() != params[i].name ||
        names[i].at("shape").get<ad::Shape>() != params[i].tensor.shape())
      throw IoError("checkpoint " + where + ": unexpected parameter " + names[i].dump());
    r.doubles(params[i].tensor.mutable_values());
    r.doubles(ck.optimizer.m[i]);
    r.doubles(ck.optimizer.v[i]);
  }
  if (!r.at_end()) throw IoError("checkpoint " + where + " has trailing data");
  return ck;
}

}  // namespace idk
