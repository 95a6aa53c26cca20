#include "vepo/toyenv.hpp"

#include <algorithm>
#include <numeric>

#include "vepo/json_util.hpp"
#include "vepo/rng.hpp"

namespace vepo {

std::string to_string(Script s) {
  switch (s) {
    case Script::Source: return "source";
    case Script::Target: return "target";
    case Script::Structural: return "structural";
  }
  return "structural";
}

Script script_from_string(const std::string& s) {
  if (s == "source") return Script::Source;
  if (s == "target") return Script::Target;
  if (s == "structural") return Script::Structural;
  throw ConfigError("unknown script '" + s + "'");
}

Vocab::Vocab(VocabDims dims) : dims_(dims) {
  if (dims.source_script_size <= 0 || dims.target_script_size <= 0 || dims.markup_pairs < 0)
    throw std::invalid_argument("vocab sizes must be positive (markup_pairs non-negative)");
  total_ = dims.source_script_size + dims.target_script_size + 2 * dims.markup_pairs + 1;
}

Script Vocab::script_of(TokenId t) const {
  if (!contains(t))
    throw VocabError("token " + std::to_string(t) + " outside vocabulary of size " +
                     std::to_string(total_));
  if (is_source(t)) return Script::Source;
  if (is_target(t)) return Script::Target;
  return Script::Structural;
}

bool ParaphraseMap::accepts(TokenId source, TokenId candidate) const {
  if (source < 0 || static_cast<std::size_t>(source) >= accept.size()) return false;
  const auto& set = accept[static_cast<std::size_t>(source)];
  return std::find(set.begin(), set.end(), candidate) != set.end();
}

TokenId Environment::paraphrastic(TokenId source) const {
  const auto& set = paraphrases_.accept.at(static_cast<std::size_t>(source));
  return set.size() > 1 ? set[1] : set[0];
}

Environment make_env(const EnvSpec& spec) {
  Environment env;
  env.spec_ = spec;
  env.vocab_ = Vocab(spec.dims);
  const int width = spec.paraphrase_width;
  if (width <= 0 || width > spec.dims.target_script_size)
    throw std::invalid_argument("paraphrase_width must be in [1, target_script_size]");
  if (spec.verbosity_bonus < 0.0 || spec.verbosity_bonus > 1.0)
    throw std::invalid_argument("verbosity_bonus must be in [0, 1]");

  const auto& vocab = env.vocab_;
  env.paraphrases_.accept.resize(static_cast<std::size_t>(vocab.source_size()));
  env.paraphrases_.literal.resize(static_cast<std::size_t>(vocab.source_size()));
  std::vector<int> order(static_cast<std::size_t>(vocab.target_size()));
  for (int s = 0; s < vocab.source_size(); ++s) {
    // Partial Fisher-Yates over the target script, one stream per source token.
    Rng rng(derive_seed(spec.seed, {0xACCE97ULL, static_cast<std::uint64_t>(s)}));
    std::iota(order.begin(), order.end(), 0);
    TokenSeq set;
    for (int k = 0; k < width; ++k) {
      const auto j = k + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab.target_size() - k)));
      std::swap(order[static_cast<std::size_t>(k)], order[static_cast<std::size_t>(j)]);
      set.push_back(vocab.target_token(order[static_cast<std::size_t>(k)]));
    }
    env.paraphrases_.literal[static_cast<std::size_t>(s)] = set.front();
    env.paraphrases_.accept[static_cast<std::size_t>(s)] = std::move(set);
  }
  return env;
}

Environment make_env(std::uint64_t seed, VocabDims dims, int paraphrase_width) {
  EnvSpec spec;
  spec.seed = seed;
  spec.dims = dims;
  spec.paraphrase_width = paraphrase_width;
  return make_env(spec);
}

Prompt gen_prompt(const Environment& env, std::uint64_t seed, PromptSpec spec) {
  const auto& vocab = env.vocab();
  const int lo = std::max(1, spec.min_len);
  const int hi = std::max(lo, spec.max_len);
  Rng rng(derive_seed(seed, {0x9207ULL}));
  const int len = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
  const bool allow_markup = vocab.markup_pairs() > 0 && spec.markup_prob > 0.0;
  const bool force_content = spec.markup_prob < 1.0;

  Prompt p;
  p.source.reserve(static_cast<std::size_t>(len));
  int open_pair = -1;
  bool has_content = false;
  for (int pos = 0; pos < len; ++pos) {
    const int remaining = len - pos;
    if (open_pair >= 0 && remaining == 1) {
      p.source.push_back(vocab.close_tag(open_pair));
      open_pair = -1;
      continue;
    }
    // Keep one slot for a content token (and the pending close, if any).
    const int reserved = (open_pair >= 0 ? 1 : 0) + ((force_content && !has_content) ? 1 : 0);
    const bool markup_here = allow_markup && rng.bernoulli(spec.markup_prob);
    if (markup_here && open_pair >= 0 && (has_content || !force_content || remaining > reserved)) {
      p.source.push_back(vocab.close_tag(open_pair));
      open_pair = -1;
      continue;
    }
    if (markup_here && open_pair < 0 && remaining - reserved >= 2) {
      open_pair = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab.markup_pairs())));
      p.source.push_back(vocab.open_tag(open_pair));
      continue;
    }
    p.source.push_back(vocab.source_token(static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab.source_size())))));
    has_content = true;
  }
  return p;
}

Prompt gen_prompt(const Environment& env, std::uint64_t seed, int min_len, int max_len,
                  double markup_prob) {
  return gen_prompt(env, seed, PromptSpec{min_len, max_len, markup_prob});
}

bool markup_balanced(const Vocab& vocab, std::span<const TokenId> tokens) {
  std::vector<TokenId> stack;
  for (auto t : tokens) {
    if (vocab.is_open(t)) {
      stack.push_back(t);
    } else if (vocab.is_close(t)) {
      if (stack.empty() || vocab.partner(t) != stack.back()) return false;
      stack.pop_back();
    }
  }
  return stack.empty();
}

std::span<const TokenId> content_of(const Vocab& vocab, std::span<const TokenId> y) {
  if (!y.empty() && y.back() == vocab.eos()) return y.first(y.size() - 1);
  return y;
}

double fidelity(const Environment& env, const Prompt& x, std::span<const TokenId> y) {
  if (x.source.empty()) return 0.0;
  const auto& vocab = env.vocab();
  const auto out = content_of(vocab, y);
  std::size_t hits = 0;
  for (std::size_t t = 0; t < x.source.size() && t < out.size(); ++t) {
    const TokenId src = x.source[t];
    if (vocab.is_markup(src)) {
      hits += out[t] == src ? 1 : 0;
    } else {
      hits += env.paraphrases().accepts(src, out[t]) ? 1 : 0;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(x.source.size());
}

double semantic_reward(const Environment& env, const Prompt& x, std::span<const TokenId> y) {
  const double fid = fidelity(env, x, y);
  const double v = env.spec().verbosity_bonus;
  if (v == 0.0 || x.source.empty()) return fid;
  const auto out = content_of(env.vocab(), y);
  const double extra = out.size() > x.source.size()
                           ? static_cast<double>(out.size() - x.source.size())
                           : 0.0;
  return (1.0 - v) * fid + v * std::min(1.0, extra / static_cast<double>(x.source.size()));
}

nlohmann::json to_json(const EnvSpec& spec) {
  return {
      {"seed", spec.seed},
      {"source_script_size", spec.dims.source_script_size},
      {"target_script_size", spec.dims.target_script_size},
      {"markup_pairs", spec.dims.markup_pairs},
      {"paraphrase_width", spec.paraphrase_width},
      {"verbosity_bonus", spec.verbosity_bonus},
  };
}

EnvSpec env_spec_from_json(const nlohmann::json& j) {
  constexpr std::string_view where = "env";
  json_util::reject_unknown(j, where,
                            {"seed", "source_script_size", "target_script_size", "markup_pairs",
                             "paraphrase_width", "verbosity_bonus"});
  EnvSpec spec;
  json_util::read(j, "seed", spec.seed, where);
  json_util::read(j, "source_script_size", spec.dims.source_script_size, where);
  json_util::read(j, "target_script_size", spec.dims.target_script_size, where);
  json_util::read(j, "markup_pairs", spec.dims.markup_pairs, where);
  json_util::read(j, "paraphrase_width", spec.paraphrase_width, where);
  json_util::read(j, "verbosity_bonus", spec.verbosity_bonus, where);
  return spec;
}

nlohmann::json to_json(const PromptSpec& spec) {
  return {{"min_len", spec.min_len}, {"max_len", spec.max_len}, {"markup_prob", spec.markup_prob}};
}

PromptSpec prompt_spec_from_json(const nlohmann::json& j) {
  constexpr std::string_view where = "prompts";
  json_util::reject_unknown(j, where, {"min_len", "max_len", "markup_prob"});
  PromptSpec spec;
  json_util::read(j, "min_len", spec.min_len, where);
  json_util::read(j, "max_len", spec.max_len, where);
  json_util::read(j, "markup_prob", spec.markup_prob, where);
  if (spec.min_len < 1) throw ConfigError("prompts.min_len must be >= 1");
  if (spec.markup_prob < 0.0 || spec.markup_prob > 1.0)
    throw ConfigError("prompts.markup_prob must be a probability");
  return spec;
}

nlohmann::json to_json(const ParaphraseMap& map) {
  return {{"accept", map.accept}, {"literal", map.literal}};
}

nlohmann::json to_json(const Prompt& p) {
  return {{"source", p.source}, {"target_script", to_string(p.target_script)}};
}

Prompt prompt_from_json(const nlohmann::json& j) {
  Prompt p;
  p.source = j.at("source").get<TokenSeq>();
  if (j.contains("target_script")) p.target_script = script_from_string(j.at("target_script").get<std::string>());
  return p;
}

}  // namespace vepo
