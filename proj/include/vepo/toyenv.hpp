#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace vepo {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

enum class Script : int { Source = 0, Target = 1, Structural = 2 };

std::string to_string(Script s);
Script script_from_string(const std::string& s);

/// Raised when a token id does not belong to the vocabulary it is checked against.
class VocabError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

struct VocabDims {
  int source_script_size = 8;
  int target_script_size = 12;
  int markup_pairs = 2;

  bool operator==(const VocabDims&) const = default;
};

/// Token layout: [source script | target script | markup open/close pairs | EOS].
/// Markup pair k is (open = markup_base + 2k, close = markup_base + 2k + 1).
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(VocabDims dims);

  const VocabDims& dims() const { return dims_; }
  int source_size() const { return dims_.source_script_size; }
  int target_size() const { return dims_.target_script_size; }
  int markup_pairs() const { return dims_.markup_pairs; }
  int total_size() const { return total_; }

  TokenId source_token(int i) const { return i; }
  TokenId target_token(int i) const { return dims_.source_script_size + i; }
  TokenId markup_base() const { return dims_.source_script_size + dims_.target_script_size; }
  TokenId open_tag(int pair) const { return markup_base() + 2 * pair; }
  TokenId close_tag(int pair) const { return markup_base() + 2 * pair + 1; }
  TokenId eos() const { return total_ - 1; }

  bool contains(TokenId t) const { return t >= 0 && t < total_; }
  bool is_source(TokenId t) const { return t >= 0 && t < dims_.source_script_size; }
  bool is_target(TokenId t) const { return t >= dims_.source_script_size && t < markup_base(); }
  bool is_markup(TokenId t) const { return t >= markup_base() && t < eos(); }
  bool is_open(TokenId t) const { return is_markup(t) && (t - markup_base()) % 2 == 0; }
  bool is_close(TokenId t) const { return is_markup(t) && (t - markup_base()) % 2 == 1; }
  /// Pair index of a markup token.
  int markup_pair(TokenId t) const { return (t - markup_base()) / 2; }
  /// The matching open tag for a close tag.
  TokenId partner(TokenId t) const { return is_open(t) ? t + 1 : t - 1; }

  /// Script of a token; EOS and markup are Structural. Throws VocabError outside the vocabulary.
  Script script_of(TokenId t) const;

 private:
  VocabDims dims_{};
  int total_ = 0;
};

/// Acceptance set A(s) per source-script token; literal[s] is always accept[s][0].
struct ParaphraseMap {
  std::vector<TokenSeq> accept;
  TokenSeq literal;

  bool accepts(TokenId source, TokenId candidate) const;
};

struct Prompt {
  TokenSeq source;
  Script target_script = Script::Target;

  std::size_t length() const { return source.size(); }
};

struct EnvSpec {
  std::uint64_t seed = 7;
  VocabDims dims{};
  int paraphrase_width = 3;
  /// Weight of a length-seeking term blended into the semantic score
  /// (0 = faithful oracle). Models a reward model with verbosity bias.
  double verbosity_bonus = 0.0;
};

class Environment {
 public:
  const EnvSpec& spec() const { return spec_; }
  const Vocab& vocab() const { return vocab_; }
  const ParaphraseMap& paraphrases() const { return paraphrases_; }

  Script script_of(TokenId t) const { return vocab_.script_of(t); }

  /// Designated paraphrastic alternative for source token s (accept[s][1]),
  /// or the literal when the acceptance set has a single member.
  TokenId paraphrastic(TokenId source) const;

 private:
  friend Environment make_env(const EnvSpec& spec);
  EnvSpec spec_;
  Vocab vocab_;
  ParaphraseMap paraphrases_;
};

/// Builds an immutable environment; the acceptance sets depend only on spec.seed.
Environment make_env(const EnvSpec& spec);
Environment make_env(std::uint64_t seed, VocabDims dims, int paraphrase_width);

struct PromptSpec {
  int min_len = 3;
  int max_len = 8;
  double markup_prob = 0.15;
};

/// Samples a prompt. Markup is emitted as non-nested open/close pairs; with
/// markup_prob < 1 at least one source-script token is guaranteed.
Prompt gen_prompt(const Environment& env, std::uint64_t seed, PromptSpec spec);
Prompt gen_prompt(const Environment& env, std::uint64_t seed, int min_len, int max_len,
                  double markup_prob);

/// True when every open tag has a matching, properly nested close tag.
bool markup_balanced(const Vocab& vocab, std::span<const TokenId> tokens);

/// Strips a trailing EOS, if any.
std::span<const TokenId> content_of(const Vocab& vocab, std::span<const TokenId> y);

/// Positional-alignment fidelity: share of source positions t whose output y_t
/// is accepted (A(x_t) for content, exact copy for markup). Flat over each A(s).
double fidelity(const Environment& env, const Prompt& x, std::span<const TokenId> y);

/// Semantic reward in [0, 1]. Equals fidelity() unless the environment has a
/// verbosity bonus v, in which case (1 - v) * fidelity + v * min(1, extra / |x|)
/// with extra the number of output tokens beyond |x|.
double semantic_reward(const Environment& env, const Prompt& x, std::span<const TokenId> y);

// Serialization. The environment is fully determined by its spec.
nlohmann::json to_json(const EnvSpec& spec);
EnvSpec env_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PromptSpec& spec);
PromptSpec prompt_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ParaphraseMap& map);
nlohmann::json to_json(const Prompt& p);
Prompt prompt_from_json(const nlohmann::json& j);

}  // namespace vepo
