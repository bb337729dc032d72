#pragma once

// Built-in desk-scale data: a 40-word sentiment lexicon with VADER-style
// values, the toy vocabulary, a synthetic review corpus for pretraining and
// activation sampling, and templated contrastive triples.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lfp/numerics.hpp"
#include "lfp/tensorio.hpp"
#include "lfp/toymodel.hpp"

namespace lfp::builtin {

inline const std::vector<std::pair<std::string, double>>& positive_words() {
  static const std::vector<std::pair<std::string, double>> w = {
      {"great", 3.1},     {"good", 1.9},     {"excellent", 2.7}, {"wonderful", 2.7}, {"amazing", 2.8},
      {"love", 3.2},      {"best", 3.2},     {"brilliant", 2.8}, {"beautiful", 2.9}, {"fun", 2.3},
      {"enjoyable", 1.9}, {"perfect", 2.7},  {"superb", 3.1},    {"delightful", 2.9}, {"nice", 1.8},
      {"happy", 2.7},     {"charming", 2.1}, {"fantastic", 2.6}, {"awesome", 3.1},   {"lovely", 2.8},
  };
  return w;
}

inline const std::vector<std::pair<std::string, double>>& negative_words() {
  static const std::vector<std::pair<std::string, double>> w = {
      {"bad", -2.5},       {"awful", -2.0},    {"terrible", -2.1}, {"horrible", -2.5}, {"boring", -1.3},
      {"worst", -3.1},     {"poor", -2.1},     {"hate", -2.7},     {"dull", -1.7},     {"disappointing", -2.2},
      {"stupid", -2.4},    {"ugly", -2.3},     {"sad", -2.1},      {"annoying", -1.8}, {"mediocre", -1.0},
      {"weak", -1.9},      {"waste", -1.8},    {"lame", -1.8},     {"pathetic", -2.7}, {"dreadful", -2.7},
  };
  return w;
}

inline const std::vector<std::string>& neutral_words() {
  static const std::vector<std::string> w = {"okay", "fine", "average", "ordinary", "plain", "typical"};
  return w;
}

inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> w = {"the",  "movie", "film", "plot",  "acting", "story", "ending", "this",
                                             "was",  "is",    "felt", "seemed", "very",  "really", "quite", "so",
                                             "and",  "but",   "i",    "it",    "a",      "."};
  return w;
}

inline tensorio::RewardLexicon lexicon() {
  tensorio::RewardLexicon lex;
  for (const auto& [w, v] : positive_words()) lex.entries.emplace(w, v);
  for (const auto& [w, v] : negative_words()) lex.entries.emplace(w, v);
  return lex;
}

/// Lexicon words first, then neutral substitutes, then filler.
inline toymodel::Vocabulary vocabulary() {
  toymodel::Vocabulary v;
  for (const auto& [w, _] : positive_words()) v.add(w);
  for (const auto& [w, _] : negative_words()) v.add(w);
  for (const auto& w : neutral_words()) v.add(w);
  for (const auto& w : filler_words()) v.add(w);
  return v;
}

/// Sentences whose slots '$' are filled with sentiment words.
inline const std::vector<std::string>& sentence_templates() {
  static const std::vector<std::string> t = {
      "the movie was $ .",
      "the acting was really $ and the plot was $ .",
      "i felt this film was $ .",
      "it is a $ story .",
      "this plot is so $ .",
      "the ending was very $ but the acting was $ .",
      "the story seemed quite $ .",
      "i felt the movie was $ and $ .",
      "this film is $ .",
      "it was a $ movie and a $ story .",
  };
  return t;
}

struct CorpusConfig {
  int n_documents = 2000;
  int length = 24;
  double same_polarity = 0.75;  // probability a slot follows the document polarity
  double neutral = 0.15;        // probability a slot takes a neutral word
};

/// Fixed-length documents of concatenated review sentences. Each document has
/// a polarity; slots mostly follow it, giving the corpus sentiment coherence.
inline std::vector<std::vector<std::string>> corpus(const CorpusConfig& cfg, std::uint64_t seed) {
  numerics::Rng rng(seed);
  const auto& tmpl = sentence_templates();
  std::vector<std::vector<std::string>> docs;
  for (int d = 0; d < cfg.n_documents; ++d) {
    const bool positive = rng.uniform() < 0.5;
    std::vector<std::string> doc;
    while (static_cast<int>(doc.size()) < cfg.length) {
      for (const auto& tok : tensorio::tokenize(tmpl[rng.below(tmpl.size())])) {
        if (tok != "$") {
          doc.push_back(tok);
          continue;
        }
        const double u = rng.uniform();
        if (u < cfg.neutral) {
          doc.push_back(neutral_words()[rng.below(neutral_words().size())]);
        } else {
          const bool follow = u < cfg.neutral + (1.0 - cfg.neutral) * cfg.same_polarity;
          const auto& pool = (positive == follow) ? positive_words() : negative_words();
          doc.push_back(pool[rng.below(pool.size())].first);
        }
      }
    }
    doc.resize(static_cast<std::size_t>(cfg.length));
    docs.push_back(std::move(doc));
  }
  return docs;
}

/// "<subject> <verb> [intensifier] <slot> ." for every combination.
inline std::vector<std::vector<std::string>> contrastive_contexts() {
  static const std::vector<std::string> subjects = {"the movie", "the film",   "the plot", "the acting",
                                                    "the story", "the ending", "this film"};
  static const std::vector<std::string> verbs = {"was", "is", "felt", "seemed"};
  static const std::vector<std::string> intensifiers = {"", "very", "really"};
  std::vector<std::vector<std::string>> out;
  for (const auto& s : subjects) {
    for (const auto& v : verbs) {
      for (const auto& i : intensifiers) out.push_back(tensorio::tokenize(s + " " + v + " " + i + " $ ."));
    }
  }
  return out;
}

struct ContrastiveSet {
  std::vector<tensorio::ContrastiveTriple> triples;
  std::vector<int> context_index;  // which context each triple came from
};

/// For each context, one per-token triple per lexicon pair (i-th positive word,
/// i-th neutral word mod 6, i-th negative word).
inline ContrastiveSet contrastive_triples() {
  ContrastiveSet set;
  const auto ctx = contrastive_contexts();
  for (std::size_t c = 0; c < ctx.size(); ++c) {
    std::size_t slot = 0;
    while (ctx[c][slot] != "$") ++slot;
    for (std::size_t i = 0; i < positive_words().size(); ++i) {
      tensorio::ContrastiveTriple t;
      t.positive = t.neutral = t.negative = ctx[c];
      t.positive[slot] = positive_words()[i].first;
      t.neutral[slot] = neutral_words()[i % neutral_words().size()];
      t.negative[slot] = negative_words()[i].first;
      t.target_span = tensorio::TokenSpan{slot, slot + 1};
      t.mode = tensorio::TripleMode::per_token;
      set.triples.push_back(std::move(t));
      set.context_index.push_back(static_cast<int>(c));
    }
  }
  return set;
}

}  // namespace lfp::builtin
