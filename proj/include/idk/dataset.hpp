#pragma once

// Synthetic closed-world facts, a word-level tokenizer, corpus rendering with
// example packing, and completion prompts for evaluation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "idk/error.hpp"
#include "idk/io.hpp"
#include "idk/model.hpp"

namespace idk {

enum class Tier : std::uint8_t { Frequent, Medium, Rare };
inline constexpr std::array<Tier, 3> kTiers{Tier::Frequent, Tier::Medium, Tier::Rare};

inline std::string to_string(Tier t) {
  switch (t) {
    case Tier::Frequent: return "frequent";
    case Tier::Medium: return "medium";
    case Tier::Rare: return "rare";
  }
  return "?";
}

inline Tier tier_from_string(std::string_view s) {
  for (Tier t : kTiers)
    if (to_string(t) == s) return t;
  throw ConfigError("unknown tier '" + std::string(s) + "'");
}

enum class Split : std::uint8_t { None, Dev, Test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::None: return "none";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split split_from_string(std::string_view s) {
  if (s == "dev") return Split::Dev;
  if (s == "test") return Split::Test;
  if (s == "none") return Split::None;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

struct FactRecord {
  std::uint32_t subject = 0;
  std::uint32_t relation = 0;
  std::uint32_t object = 0;
  Tier tier = Tier::Rare;
  Split split = Split::None;

  bool operator==(const FactRecord&) const = default;
};

struct Relation {
  std::string name;
  std::string phrase;  // three words, the first unique across relations

  bool operator==(const Relation&) const = default;
};

struct WorldConfig {
  std::uint64_t seed = 1;
  std::size_t n_entities = 200;
  std::size_t n_relations = 8;
  std::array<double, 3> tier_fractions{0.25, 0.25, 0.5};
  double dev_fraction = 0.2;
  double test_fraction = 0.3;

  void validate() const;
};

struct World {
  std::uint64_t seed = 0;
  std::vector<std::string> entities;
  std::vector<Relation> relations;
  std::vector<FactRecord> facts;  // index is the fact id

  bool operator==(const World&) const = default;
};

namespace detail {

inline const std::vector<Relation>& relation_pool() {
  static const std::vector<Relation> pool{
      {"born_in", "was born in"},          {"works_with", "works closely with"},
      {"married_to", "is married to"},     {"studied_under", "studied music under"},
      {"neighbor_of", "lives right beside"}, {"owes", "owes money to"},
      {"sold_to", "sold paintings to"},    {"grew_up_near", "grew up near"},
      {"admires", "admires greatly the"},  {"trained", "trained young horses"},
      {"follows", "follows quietly behind"}, {"hired", "hired last spring"},
  };
  return pool;
}

inline constexpr std::array<const char*, 15> kOnsets{"b", "d", "f", "g", "k", "l", "m", "n",
                                                     "p", "r", "s", "t", "v", "z", "h"};
inline constexpr std::array<const char*, 5> kNuclei{"a", "e", "i", "o", "u"};

}  // namespace detail

/// Non-factual filler sentences. Each starts with a distinct word so that only
/// the first token of a filler sentence is unpredictable.
inline const std::vector<std::string>& filler_templates() {
  static const std::vector<std::string> templates{
      "the weather stayed calm and mild all week",
      "nobody could explain the mystery of the old lighthouse",
      "some questions about the harbor remain unknown to this day",
      "every morning a small boat leaves the quiet pier",
      "rain fell softly over the green hills at night",
      "children played loud games near the stone bridge",
      "a cold wind moved slowly across the empty square",
      "many travelers stopped briefly at the village inn",
  };
  return templates;
}

/// Words a tuned model may emit instead of [IDK] that still count as abstaining.
inline const std::vector<std::string>& default_abstain_lexicon() {
  static const std::vector<std::string> words{"unknown", "mystery"};
  return words;
}

inline void WorldConfig::validate() const {
  IDK_CHECK(n_entities >= 2, "WorldConfig: n_entities must be at least 2");
  IDK_CHECK(n_relations >= 1 && n_relations <= detail::relation_pool().size(),
            "WorldConfig: n_relations must lie in [1, " +
                std::to_string(detail::relation_pool().size()) + "]");
  double sum = 0.0;
  for (double f : tier_fractions) {
    IDK_CHECK(f >= 0.0 && f <= 1.0, "WorldConfig: tier fractions must lie in [0, 1]");
    sum += f;
  }
  IDK_CHECK(std::abs(sum - 1.0) < 1e-9, "WorldConfig: tier fractions must sum to 1");
  IDK_CHECK(dev_fraction >= 0.0 && test_fraction >= 0.0 && dev_fraction + test_fraction <= 1.0,
            "WorldConfig: dev_fraction + test_fraction must lie in [0, 1]");
}

/// Tier sizes for `n` items: floor-rounded cumulative fractions, so the counts
/// always sum to `n`.
inline std::array<std::size_t, 3> tier_counts(std::size_t n, const std::array<double, 3>& fr) {
  std::array<std::size_t, 3> out{};
  const auto first = static_cast<std::size_t>(std::llround(fr[0] * static_cast<double>(n)));
  const auto second =
      static_cast<std::size_t>(std::llround((fr[0] + fr[1]) * static_cast<double>(n)));
  out[0] = std::min(first, n);
  out[1] = std::min(second, n) - out[0];
  out[2] = n - out[0] - out[1];
  return out;
}

/// Every (subject, relation) pair becomes one fact with a uniformly drawn
/// object. Facts are ordered subject-major.
inline World generate_world(const WorldConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  World w;
  w.seed = cfg.seed;

  std::set<std::string> seen;
  std::uniform_int_distribution<std::size_t> onset(0, detail::kOnsets.size() - 1);
  std::uniform_int_distribution<std::size_t> nucleus(0, detail::kNuclei.size() - 1);
  std::uniform_int_distribution<int> syllables(2, 3);
  while (w.entities.size() < cfg.n_entities) {
    std::string name;
    const int n = syllables(rng);
    for (int i = 0; i < n; ++i) {
      name += detail::kOnsets[onset(rng)];
      name += detail::kNuclei[nucleus(rng)];
    }
    name[0] = static_cast<char>(name[0] - 'a' + 'A');
    if (seen.insert(name).second) w.entities.push_back(std::move(name));
  }
  w.relations.assign(detail::relation_pool().begin(),
                     detail::relation_pool().begin() + static_cast<std::ptrdiff_t>(cfg.n_relations));

  std::uniform_int_distribution<std::uint32_t> object(
      0, static_cast<std::uint32_t>(cfg.n_entities - 1));
  for (std::uint32_t s = 0; s < cfg.n_entities; ++s)
    for (std::uint32_t r = 0; r < cfg.n_relations; ++r)
      w.facts.push_back({s, r, object(rng), Tier::Rare, Split::None});

  std::vector<std::size_t> order(w.facts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const auto counts = tier_counts(order.size(), cfg.tier_fractions);
  std::size_t k = 0;
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t i = 0; i < counts[t]; ++i) w.facts[order[k++]].tier = kTiers[t];

  // dev/test are fixed fractions within each tier
  for (Tier tier : kTiers) {
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < w.facts.size(); ++i)
      if (w.facts[i].tier == tier) ids.push_back(i);
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto n = ids.size();
    const auto n_dev = static_cast<std::size_t>(std::llround(cfg.dev_fraction * static_cast<double>(n)));
    const auto n_test = std::min(
        n - n_dev, static_cast<std::size_t>(std::llround(cfg.test_fraction * static_cast<double>(n))));
    for (std::size_t i = 0; i < n_dev; ++i) w.facts[ids[i]].split = Split::Dev;
    for (std::size_t i = n_dev; i < n_dev + n_test; ++i) w.facts[ids[i]].split = Split::Test;
  }
  return w;
}

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) out.push_back(word);
  return out;
}

/// Closed word-level vocabulary: ".", filler words, relation words, entities.
/// The [IDK] marker is not part of the vocabulary; it decodes from index size().
class Tokenizer {
 public:
  static constexpr std::string_view kIdkMarker = "[IDK]";

  Tokenizer() = default;

  explicit Tokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
    for (std::size_t i = 0; i < vocab_.size(); ++i) {
      IDK_CHECK(!vocab_[i].empty() && vocab_[i].find(' ') == std::string::npos,
                "Tokenizer: vocabulary items must be non-empty single words");
      IDK_CHECK(vocab_[i] != kIdkMarker, "Tokenizer: [IDK] is reserved");
      IDK_CHECK(index_.emplace(vocab_[i], static_cast<TokenId>(i)).second,
                "Tokenizer: duplicate vocabulary item '" + vocab_[i] + "'");
    }
  }

  static Tokenizer for_world(const World& w) {
    std::vector<std::string> vocab{"."};
    std::set<std::string> seen{"."};
    auto add = [&](const std::string& word) {
      if (seen.insert(word).second) vocab.push_back(word);
    };
    for (const auto& t : filler_templates())
      for (const auto& word : split_words(t)) add(word);
    for (const auto& r : w.relations)
      for (const auto& word : split_words(r.phrase)) add(word);
    for (const auto& e : w.entities) {
      IDK_CHECK(!seen.count(e), "Tokenizer: entity name collides with another word: " + e);
      add(e);
    }
    return Tokenizer(std::move(vocab));
  }

  std::size_t size() const noexcept { return vocab_.size(); }
  const std::vector<std::string>& vocabulary() const noexcept { return vocab_; }

  TokenId id(std::string_view word) const {
    const auto it = index_.find(std::string(word));
    IDK_CHECK(it != index_.end(), "Tokenizer: out-of-vocabulary word '" + std::string(word) + "'");
    return it->second;
  }

  bool contains(std::string_view word) const { return index_.count(std::string(word)) > 0; }

  const std::string& word(TokenId id) const {
    static const std::string idk{kIdkMarker};
    if (id == vocab_.size()) return idk;
    IDK_CHECK(id < vocab_.size(), "Tokenizer: token id out of range");
    return vocab_[id];
  }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> out;
    for (const auto& w : split_words(text)) out.push_back(id(w));
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += word(ids[i]);
    }
    return out;
  }

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> index_;
};

inline std::string fact_sentence(const World& w, const FactRecord& f) {
  return w.entities[f.subject] + " " + w.relations[f.relation].phrase + " " +
         w.entities[f.object] + " .";
}

struct CorpusConfig {
  std::array<std::size_t, 3> repetitions{64, 8, 1};
  double filler_ratio = 0.5;  // fraction of sentences that are filler
  std::uint64_t seed = 2;

  void validate() const {
    IDK_CHECK(repetitions[0] > repetitions[1] && repetitions[1] > repetitions[2],
              "CorpusConfig: repetitions must satisfy frequent > medium > rare");
    IDK_CHECK(filler_ratio >= 0.0 && filler_ratio < 1.0, "CorpusConfig: filler_ratio in [0, 1)");
  }
};

inline constexpr std::int32_t kFillerProvenance = -1;

/// A flat token stream with the originating fact id (or kFillerProvenance)
/// recorded for every token.
struct TokenStream {
  std::vector<TokenId> tokens;
  std::vector<std::int32_t> provenance;
};

inline TokenStream render_pretrain_corpus(const World& w, const Tokenizer& tok,
                                          const CorpusConfig& cfg) {
  cfg.validate();
  for (const auto& r : w.relations)
    IDK_CHECK(split_words(r.phrase).size() == 3, "render: relation '" + r.name + "' has no template");
  std::vector<std::int32_t> sentences;  // fact id, or -(template + 2) for filler
  for (std::size_t i = 0; i < w.facts.size(); ++i) {
    const std::size_t reps = cfg.repetitions[static_cast<std::size_t>(w.facts[i].tier)];
    sentences.insert(sentences.end(), reps, static_cast<std::int32_t>(i));
  }
  const double n_fact = static_cast<double>(sentences.size());
  const auto n_filler =
      static_cast<std::size_t>(std::llround(n_fact * cfg.filler_ratio / (1.0 - cfg.filler_ratio)));
  std::mt19937_64 rng(cfg.seed);
  const auto& templates = filler_templates();
  std::uniform_int_distribution<std::int32_t> pick(0, static_cast<std::int32_t>(templates.size()) - 1);
  for (std::size_t i = 0; i < n_filler; ++i) sentences.push_back(-(pick(rng) + 2));
  std::shuffle(sentences.begin(), sentences.end(), rng);

  std::vector<std::vector<TokenId>> fact_ids(w.facts.size());
  for (std::size_t i = 0; i < w.facts.size(); ++i) fact_ids[i] = tok.encode(fact_sentence(w, w.facts[i]));
  std::vector<std::vector<TokenId>> filler_ids;
  for (const auto& t : templates) filler_ids.push_back(tok.encode(t + " ."));

  TokenStream out;
  for (std::int32_t s : sentences) {
    const auto& ids = s >= 0 ? fact_ids[static_cast<std::size_t>(s)]
                             : filler_ids[static_cast<std::size_t>(-s - 2)];
    out.tokens.insert(out.tokens.end(), ids.begin(), ids.end());
    out.provenance.insert(out.provenance.end(), ids.size(), s >= 0 ? s : kFillerProvenance);
  }
  return out;
}

struct PackedCorpus {
  std::size_t context_len = 0;
  std::vector<TokenSequence> sequences;
  std::vector<std::vector<std::int32_t>> provenance;

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.ids.size();
    return n;
  }
};

/// Greedy packing into windows of exactly context_len; only the last may be short.
inline PackedCorpus pack(const TokenStream& stream, std::size_t context_len) {
  IDK_CHECK(context_len >= 2, "pack: context_len must be at least 2");
  IDK_CHECK(!stream.tokens.empty(), "pack: empty stream");
  IDK_CHECK(stream.provenance.empty() || stream.provenance.size() == stream.tokens.size(),
            "pack: provenance length differs from token count");
  PackedCorpus out;
  out.context_len = context_len;
  for (std::size_t start = 0; start < stream.tokens.size(); start += context_len) {
    const std::size_t end = std::min(start + context_len, stream.tokens.size());
    const auto s = static_cast<std::ptrdiff_t>(start), e = static_cast<std::ptrdiff_t>(end);
    out.sequences.push_back({{stream.tokens.begin() + s, stream.tokens.begin() + e}});
    if (!stream.provenance.empty())
      out.provenance.emplace_back(stream.provenance.begin() + s, stream.provenance.begin() + e);
  }
  return out;
}

struct EvalPrompt {
  TokenSequence prompt;
  TokenId gold = 0;
  std::uint32_t fact_id = 0;
  Tier tier = Tier::Rare;
  Split split = Split::None;
};

/// Prompts "<subject> <relation phrase>" with the object as the gold token,
/// in fact-id order.
inline std::vector<EvalPrompt> eval_prompts(const World& w, const Tokenizer& tok, Split split) {
  IDK_CHECK(split == Split::Dev || split == Split::Test, "eval_prompts: split must be dev or test");
  std::vector<EvalPrompt> out;
  for (std::size_t i = 0; i < w.facts.size(); ++i) {
    const auto& f = w.facts[i];
    if (f.split != split) continue;
    const auto obj = tok.encode(w.entities[f.object]);
    IDK_CHECK(obj.size() == 1, "eval_prompts: object is not a single token");
    EvalPrompt p;
    p.prompt.ids = tok.encode(w.entities[f.subject] + " " + w.relations[f.relation].phrase);
    p.gold = obj[0];
    p.fact_id = static_cast<std::uint32_t>(i);
    p.tier = f.tier;
    p.split = f.split;
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline json world_to_json(const World& w) {
  json rel = json::array();
  for (const auto& r : w.relations) rel.push_back({{"name", r.name}, {"phrase", r.phrase}});
  return {{"seed", w.seed}, {"entities", w.entities}, {"relations", rel}};
}

inline json fact_to_json(const World& w, const FactRecord& f) {
  return {{"subject", w.entities[f.subject]},
          {"relation", w.relations[f.relation].name},
          {"object", w.entities[f.object]},
          {"tier", to_string(f.tier)},
          {"split", to_string(f.split)}};
}

inline World world_from_json(const json& meta, const std::vector<json>& facts) {
  try {
    World w;
    w.seed = meta.at("seed").get<std::uint64_t>();
    w.entities = meta.at("entities").get<std::vector<std::string>>();
    for (const auto& r : meta.at("relations"))
      w.relations.push_back({r.at("name").get<std::string>(), r.at("phrase").get<std::string>()});
    std::map<std::string, std::uint32_t> ent, rel;
    for (std::size_t i = 0; i < w.entities.size(); ++i) ent[w.entities[i]] = static_cast<std::uint32_t>(i);
    for (std::size_t i = 0; i < w.relations.size(); ++i) rel[w.relations[i].name] = static_cast<std::uint32_t>(i);
    auto lookup = [](const auto& m, const std::string& key) {
      const auto it = m.find(key);
      if (it == m.end()) throw IoError("facts: unknown name '" + key + "'");
      return it->second;
    };
    for (const auto& f : facts) {
      w.facts.push_back({lookup(ent, f.at("subject").get<std::string>()),
                         lookup(rel, f.at("relation").get<std::string>()),
                         lookup(ent, f.at("object").get<std::string>()),
                         tier_from_string(f.at("tier").get<std::string>()),
                         split_from_string(f.value("split", std::string("none")))});
    }
    return w;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed world data: ") + e.what());
  }
}

/// Writes token ids as little-endian uint32 to `bin` and a JSON header
/// describing the stream to `header`.
inline void write_token_stream(const fs::path& bin, const fs::path& header, const TokenStream& s,
                               const Tokenizer& tok, std::size_t context_len) {
  std::string bytes(s.tokens.size() * 4, '\0');
  for (std::size_t i = 0; i < s.tokens.size(); ++i) {
    const std::uint32_t v = s.tokens[i];
    for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<char>((v >> (8 * b)) & 0xFF);
  }
  write_file(bin, bytes);
  std::size_t filler = 0;
  for (auto p : s.provenance) filler += p == kFillerProvenance;
  write_json(header, {{"token_width", 4},
                      {"byte_order", "little"},
                      {"n_tokens", s.tokens.size()},
                      {"n_filler_tokens", filler},
                      {"context_len", context_len},
                      {"n_windows", (s.tokens.size() + context_len - 1) / context_len},
                      {"vocab", tok.vocabulary()},
                      {"idk_marker", Tokenizer::kIdkMarker}});
}

inline std::vector<TokenId> read_token_stream(const fs::path& bin, std::size_t expected_tokens,
                                              std::size_t vocab_size) {
  const std::string bytes = read_file(bin);
  if (bytes.size() != expected_tokens * 4)
    throw IoError("token stream " + bin.string() + " has unexpected length");
  std::vector<TokenId> out(expected_tokens);
  for (std::size_t i = 0; i < expected_tokens; ++i) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + b])) << (8 * b);
    if (v >= vocab_size) throw IoError("token stream contains an out-of-vocabulary id");
    out[i] = v;
  }
  return out;
}

inline json prompt_to_json(const EvalPrompt& p) {
  return {{"prompt_ids", p.prompt.ids},
          {"gold_id", p.gold},
          {"fact_id", p.fact_id},
          {"tier", to_string(p.tier)},
          {"split", to_string(p.split)}};
}

inline EvalPrompt prompt_from_json(const json& j) {
  try {
    EvalPrompt p;
    p.prompt.ids = j.at("prompt_ids").get<std::vector<TokenId>>();
    p.gold = j.at("gold_id").get<TokenId>();
    p.fact_id = j.at("fact_id").get<std::uint32_t>();
    p.tier = tier_from_string(j.at("tier").get<std::string>());
    p.split = split_from_string(j.at("split").get<std::string>());
    return p;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed prompt record: ") + e.what());
  }
}

inline std::vector<EvalPrompt> read_prompts(const fs::path& path) {
  std::vector<EvalPrompt> out;
  for (const auto& j : read_jsonl(path)) out.push_back(prompt_from_json(j));
  return out;
}

}  // namespace idk
