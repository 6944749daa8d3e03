#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "uq/rng.hpp"

namespace uq {

inline constexpr std::size_t kNumChoices = 5;          // letters a..e
inline constexpr std::size_t kNumReducedClasses = 6;   // choices + "other"

/// Fixed 64-character vocabulary. The five answer letters a..e sit at
/// indices 0..4 on purpose: a choice token's vocabulary index *is* its
/// class index, which keeps the class reduction trivial to audit.
class Tokenizer {
 public:
  static constexpr std::size_t kVocabSize = 64;
  static constexpr std::int32_t kPadIndex = 63;

  Tokenizer() {
    lookup_.fill(-1);
    for (std::size_t i = 0; i < kVocabSize; ++i) {
      lookup_[static_cast<unsigned char>(alphabet()[i])] = static_cast<std::int32_t>(i);
    }
  }

  static std::string_view alphabet() {
    // 26 lowercase, the uppercase letters the prompt template needs (Q, A,
    // C), punctuation, digits, spare uppercase, apostrophe, then padding.
    static constexpr char kChars[] =
        "abcdefghijklmnopqrstuvwxyz"
        "QAC"
        " \n:().?,-"
        "0123456789"
        "BDEFGHIJKLMNOP"
        "'_";
    static_assert(sizeof(kChars) - 1 == kVocabSize);
    return {kChars, kVocabSize};
  }

  std::size_t vocab_size() const { return kVocabSize; }

  std::int32_t encode_char(char c) const {
    const std::int32_t idx = lookup_[static_cast<unsigned char>(c)];
    if (idx < 0) {
      throw std::invalid_argument(std::string("Tokenizer: character '") + c +
                                  "' is not in the vocabulary");
    }
    return idx;
  }

  std::vector<std::int32_t> encode(std::string_view text) const {
    std::vector<std::int32_t> out;
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
      const std::int32_t idx = lookup_[static_cast<unsigned char>(text[i])];
      if (idx < 0) {
        throw std::invalid_argument(std::string("Tokenizer: character '") + text[i] +
                                    "' at offset " + std::to_string(i) +
                                    " is not in the vocabulary");
      }
      out.push_back(idx);
    }
    return out;
  }

  std::string decode(const std::vector<std::int32_t>& tokens) const {
    std::string out;
    out.reserve(tokens.size());
    for (std::int32_t t : tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= kVocabSize) {
        throw std::invalid_argument("Tokenizer: index " + std::to_string(t) +
                                    " out of range");
      }
      out.push_back(alphabet()[static_cast<std::size_t>(t)]);
    }
    return out;
  }

  /// Vocabulary index of the answer letter for a choice class (0 -> 'a').
  std::int32_t choice_token(std::size_t cls) const {
    if (cls >= kNumChoices) {
      throw std::invalid_argument("Tokenizer: choice class out of range");
    }
    return static_cast<std::int32_t>(cls);
  }

 private:
  std::array<std::int32_t, 256> lookup_;
};

/// One multiple-choice sample. The ambiguity fields are generator ground
/// truth carried along for analysis; they never reach the model input.
struct McqSample {
  std::string question;
  std::vector<std::string> choices;
  std::int32_t answer = 0;
  std::string domain;
  bool ambiguous = false;
  std::int32_t alt_answer = -1;  // the other designated choice when ambiguous
};

struct DatasetManifest {
  std::string name;
  std::size_t train_size = 0;
  std::size_t validation_size = 0;
  std::size_t class_count = kNumReducedClasses;
  std::string source;  // "generated" | "file"
};

/// Renders the fixed question/choices/answer template. Without the answer
/// the text ends at "A: (" so that the very next token is the answer letter
/// — the single supervised position during fine-tuning.
inline std::string format_prompt(const McqSample& sample, bool include_answer) {
  if (sample.choices.empty() || sample.choices.size() > kNumChoices) {
    throw std::invalid_argument("format_prompt: need 1.." +
                                std::to_string(kNumChoices) + " choices, got " +
                                std::to_string(sample.choices.size()));
  }
  std::string out = "Q: " + sample.question + "\n\nAnswer Choices:\n\n";
  for (std::size_t i = 0; i < sample.choices.size(); ++i) {
    out += "(";
    out += static_cast<char>('a' + i);
    out += ") " + sample.choices[i] + "\n\n";
  }
  out += "A: (";
  if (include_answer) {
    out += static_cast<char>('a' + sample.answer);
    out += ").";
  }
  return out;
}

/// Inverse of format_prompt for the textual fields. answer is -1 when the
/// prompt stops at the placement marker.
struct ParsedPrompt {
  std::string question;
  std::vector<std::string> choices;
  std::int32_t answer = -1;
};

inline ParsedPrompt parse_prompt(const std::string& text) {
  auto fail = [](const std::string& why) -> ParsedPrompt {
    throw std::invalid_argument("parse_prompt: " + why);
  };
  if (text.rfind("Q: ", 0) != 0) return fail("missing question marker");
  const std::string sep = "\n\nAnswer Choices:\n\n";
  const std::size_t split = text.find(sep);
  if (split == std::string::npos) return fail("missing choices header");
  ParsedPrompt parsed;
  parsed.question = text.substr(3, split - 3);
  std::size_t pos = split + sep.size();
  // Choices carry their letters in order: "(a) ...", "(b) ...", ...
  while (pos + 4 <= text.size() && text[pos] == '(' &&
         text[pos + 1] == static_cast<char>('a' + parsed.choices.size()) &&
         text[pos + 2] == ')' && text[pos + 3] == ' ') {
    const std::size_t end = text.find("\n\n", pos);
    if (end == std::string::npos) return fail("unterminated choice");
    parsed.choices.push_back(text.substr(pos + 4, end - pos - 4));
    pos = end + 2;
  }
  if (text.compare(pos, 4, "A: (") != 0) return fail("missing answer marker");
  pos += 4;
  if (pos < text.size()) {
    const char letter = text[pos];
    if (letter < 'a' || letter >= static_cast<char>('a' + parsed.choices.size())) {
      return fail("answer letter out of range");
    }
    parsed.answer = letter - 'a';
  }
  return parsed;
}

/// Vocabulary -> C+1 reduction: one class per answer letter, one aggregate
/// for everything else, so the reduced vector keeps total mass.
struct ClassReduction {
  std::size_t vocab_size = Tokenizer::kVocabSize;

  std::size_t class_of(std::int32_t token) const {
    return static_cast<std::size_t>(token) < kNumChoices
               ? static_cast<std::size_t>(token)
               : kNumChoices;
  }

  std::vector<double> reduce(const double* full) const {
    std::vector<double> out(kNumReducedClasses, 0.0);
    for (std::size_t v = 0; v < kNumChoices; ++v) out[v] = full[v];
    double rest = 0.0;
    for (std::size_t v = kNumChoices; v < vocab_size; ++v) rest += full[v];
    out[kNumChoices] = rest;
    return out;
  }

  std::vector<double> reduce(const std::vector<double>& full) const {
    if (full.size() != vocab_size) {
      throw std::invalid_argument("ClassReduction: expected " +
                                  std::to_string(vocab_size) + " probabilities");
    }
    return reduce(full.data());
  }
};

// ---------------------------------------------------------------------------
// Synthetic worlds.
//
// Questions ask for an attribute of an entity ("what is the color of
// balu17?"). The correct answer letter is a fixed permutation of the
// entity's first-letter group, per attribute — a rule a small model can
// learn from (attribute word, entity initial) alone. Three disjoint worlds:
//   pretrain   — its own attributes/values; teaches format and statistics
//   in-domain  — the fine-tuning task
//   OOD        — held-out attribute types with value words never seen in
//                training, the epistemic-uncertainty probe
// Ambiguous in-domain samples swap the phrasing marker ("could" for "is")
// and draw their label 50/50 from two designated choices: irreducible
// aleatoric noise that a model can represent but never resolve.
// ---------------------------------------------------------------------------

struct GeneratorConfig {
  std::size_t train_size = 2000;
  std::size_t validation_size = 500;
  std::size_t ood_size = 500;
  double ambiguity_fraction = 0.3;
};

struct Dataset {
  std::vector<McqSample> train;
  std::vector<McqSample> validation;
  std::vector<McqSample> ood;
  DatasetManifest manifest;
};

namespace words {
struct Attribute {
  const char* name;
  std::array<const char*, kNumChoices> values;
};

inline constexpr std::array<Attribute, 6> kInDomain{{
    {"color", {"red", "blue", "green", "black", "white"}},
    {"size", {"tiny", "small", "medium", "large", "huge"}},
    {"shape", {"round", "square", "flat", "curved", "pointy"}},
    {"taste", {"sweet", "sour", "salty", "bitter", "plain"}},
    {"sound", {"quiet", "loud", "sharp", "soft", "deep"}},
    {"speed", {"slow", "brisk", "quick", "rapid", "swift"}},
}};

inline constexpr std::array<Attribute, 4> kOutOfDomain{{
    {"origin", {"north", "south", "east", "west", "inland"}},
    {"temper", {"calm", "moody", "fierce", "gentle", "wild"}},
    {"metal", {"iron", "copper", "silver", "gold", "zinc"}},
    {"aura", {"dim", "faint", "bright", "vivid", "dark"}},
}};

inline constexpr std::array<Attribute, 6> kPretrain{{
    {"width", {"narrow", "slim", "broad", "wide", "vast"}},
    {"depth", {"low", "mid", "lofty", "sunken", "hollow"}},
    {"style", {"aged", "fresh", "retro", "modern", "bare"}},
    {"grade", {"poor", "fair", "decent", "solid", "best"}},
    {"mood", {"glad", "sad", "tense", "merry", "grim"}},
    {"tone", {"mellow", "harsh", "crisp", "dull", "warm"}},
}};
}  // namespace words

namespace detail {

/// Per-attribute answer rule: letter = perm[first-letter group].
struct WorldAttribute {
  std::string name;
  std::array<std::string, kNumChoices> values;
  std::array<std::size_t, kNumChoices> perm;
};

template <std::size_t N>
std::vector<WorldAttribute> build_world(const std::array<words::Attribute, N>& bank,
                                        Rng& rng) {
  std::vector<WorldAttribute> out;
  for (const words::Attribute& attr : bank) {
    WorldAttribute w;
    w.name = attr.name;
    for (std::size_t i = 0; i < kNumChoices; ++i) w.values[i] = attr.values[i];
    std::vector<std::size_t> perm{0, 1, 2, 3, 4};
    rng.shuffle(perm);
    for (std::size_t i = 0; i < kNumChoices; ++i) w.perm[i] = perm[i];
    out.push_back(std::move(w));
  }
  return out;
}

inline std::string make_entity(Rng& rng, std::size_t serial) {
  static constexpr char kConsonants[] = "bcdfgklmnprstvz";
  static constexpr char kVowels[] = "aeiou";
  std::string name;
  name.push_back(static_cast<char>('a' + rng.below(26)));  // group carrier
  name.push_back(kVowels[rng.below(5)]);
  name.push_back(kConsonants[rng.below(15)]);
  name.push_back(kVowels[rng.below(5)]);
  name += std::to_string(serial);  // serial keeps every question distinct
  return name;
}

inline std::size_t entity_group(const std::string& entity) {
  return static_cast<std::size_t>(entity[0] - 'a') % kNumChoices;
}

inline McqSample make_sample(const WorldAttribute& attr, Rng& rng, std::size_t serial,
                             bool ambiguous) {
  McqSample s;
  const std::string entity = make_entity(rng, serial);
  const std::size_t group = entity_group(entity);
  const char* verb = ambiguous ? "could be" : "is";
  s.question = std::string("what ") + verb + " the " + attr.name + " of " + entity + "?";
  s.choices.assign(attr.values.begin(), attr.values.end());
  s.domain = attr.name;
  const auto primary = static_cast<std::int32_t>(attr.perm[group]);
  if (ambiguous) {
    const auto second = static_cast<std::int32_t>((primary + 1) % kNumChoices);
    const bool pick_primary = rng.bernoulli(0.5);
    s.answer = pick_primary ? primary : second;
    s.alt_answer = pick_primary ? second : primary;
    s.ambiguous = true;
  } else {
    s.answer = primary;
  }
  return s;
}

}  // namespace detail

/// Deterministic synthetic QA triple (train / validation / OOD).
inline Dataset generate_synthetic(const GeneratorConfig& cfg, std::uint64_t seed) {
  if (cfg.train_size < 1 || cfg.validation_size < 1 || cfg.ood_size < 1) {
    throw std::invalid_argument("generate_synthetic: split sizes must be >= 1");
  }
  if (cfg.ambiguity_fraction < 0.0 || cfg.ambiguity_fraction > 1.0) {
    throw std::invalid_argument("generate_synthetic: ambiguity fraction outside [0,1]");
  }
  Rng rng(seed);
  const auto in_world = detail::build_world(words::kInDomain, rng);
  const auto ood_world = detail::build_world(words::kOutOfDomain, rng);

  Dataset ds;
  std::size_t serial = 0;
  auto fill_in_domain = [&](std::vector<McqSample>& out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto& attr = in_world[rng.below(in_world.size())];
      const bool ambiguous = rng.bernoulli(cfg.ambiguity_fraction);
      out.push_back(detail::make_sample(attr, rng, serial++, ambiguous));
    }
  };
  fill_in_domain(ds.train, cfg.train_size);
  fill_in_domain(ds.validation, cfg.validation_size);
  for (std::size_t i = 0; i < cfg.ood_size; ++i) {
    const auto& attr = ood_world[rng.below(ood_world.size())];
    ds.ood.push_back(detail::make_sample(attr, rng, serial++, /*ambiguous=*/false));
  }

  ds.manifest.name = "synthetic-qa";
  ds.manifest.train_size = ds.train.size();
  ds.manifest.validation_size = ds.validation.size();
  ds.manifest.class_count = kNumReducedClasses;
  ds.manifest.source = "generated";
  return ds;
}

/// Formatted QA texts (answers included) from the disjoint pretraining
/// world; next-token training on these teaches the prompt format.
inline std::vector<std::string> generate_pretrain_corpus(std::size_t count,
                                                         std::uint64_t seed) {
  Rng rng(seed);
  const auto world = detail::build_world(words::kPretrain, rng);
  std::vector<std::string> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto& attr = world[rng.below(world.size())];
    McqSample s = detail::make_sample(attr, rng, i, /*ambiguous=*/false);
    out.push_back(format_prompt(s, /*include_answer=*/true));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL persistence.
// ---------------------------------------------------------------------------

inline nlohmann::json sample_to_json(const McqSample& s) {
  nlohmann::json j{{"question", s.question},
                   {"choices", s.choices},
                   {"answer", s.answer},
                   {"domain", s.domain}};
  if (s.ambiguous) {
    j["ambiguous"] = true;
    j["alt_answer"] = s.alt_answer;
  }
  return j;
}

inline void save_jsonl(const std::string& path, const std::vector<McqSample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_jsonl: cannot open " + path);
  for (const McqSample& s : samples) {
    out << sample_to_json(s).dump() << "\n";
  }
  if (!out) throw std::runtime_error("save_jsonl: write failed for " + path);
}

struct LoadedJsonl {
  std::vector<McqSample> samples;
  DatasetManifest manifest;
};

inline LoadedJsonl load_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_jsonl: cannot open " + path);
  LoadedJsonl result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("load_jsonl: " + path + ":" + std::to_string(line_no) +
                               ": malformed JSON: " + e.what());
    }
    McqSample s;
    try {
      s.question = j.at("question").get<std::string>();
      s.choices = j.at("choices").get<std::vector<std::string>>();
      s.answer = j.at("answer").get<std::int32_t>();
      s.domain = j.at("domain").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("load_jsonl: " + path + ":" + std::to_string(line_no) +
                               ": missing or mistyped field: " + e.what());
    }
    s.ambiguous = j.value("ambiguous", false);
    s.alt_answer = j.value("alt_answer", -1);
    if (s.choices.empty() || s.choices.size() > kNumChoices) {
      throw std::runtime_error("load_jsonl: " + path + ":" + std::to_string(line_no) +
                               ": choice count " + std::to_string(s.choices.size()) +
                               " outside 1..5");
    }
    if (s.answer < 0 || static_cast<std::size_t>(s.answer) >= s.choices.size()) {
      throw std::runtime_error("load_jsonl: " + path + ":" + std::to_string(line_no) +
                               ": answer index " + std::to_string(s.answer) +
                               " out of range for " + std::to_string(s.choices.size()) +
                               " choices");
    }
    result.samples.push_back(std::move(s));
  }
  result.manifest.name = path;
  result.manifest.train_size = result.samples.size();
  result.manifest.source = "file";
  return result;
}

}  // namespace uq
