#pragma once

// Pipeline configuration and its file format.
//
// Grammar (one construct per line):
//   # comment                      (also allowed after a value)
//   [section]
//   key = value
// where value is one of
//   true | false
//   integer or real number         (1, -3, 2e-4)
//   "string"                       (\" and \\ escapes)
//   [v, v, ...]                    list of numbers or strings, single line
// Keys and sections are [A-Za-z0-9_-]+. Unknown sections or keys, duplicate
// keys, type mismatches and missing required sections ([run], [paths]) are
// rejected with the offending line number.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lfp/ablate.hpp"
#include "lfp/explain.hpp"
#include "lfp/finetune.hpp"
#include "lfp/probes.hpp"
#include "lfp/tensorio.hpp"
#include "lfp/toymodel.hpp"

namespace lfp::config {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::size_t line, const std::string& msg)
      : std::runtime_error(line ? "config line " + std::to_string(line) + ": " + msg : "config: " + msg), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct Value {
  enum class Kind { boolean, number, string, list };
  Kind kind = Kind::number;
  bool boolean = false;
  double number = 0.0;
  bool integral = false;
  std::string text;  // string payload, or the raw number literal
  std::vector<Value> list;
  std::size_t line = 0;
};

struct Entry {
  Value value;
  std::size_t line = 0;
};

struct Section {
  std::size_t line = 0;
  std::map<std::string, Entry> entries;
};

struct Document {
  std::map<std::string, Section> sections;
  std::size_t last_line = 0;
};

namespace detail {

inline bool is_name(std::string_view s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
  }
  return true;
}

class ValueParser {
 public:
  ValueParser(std::string_view s, std::size_t line) : s_(s), line_(line) {}

  Value parse_top() {
    Value v = parse_value(true);
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] != '#') fail("unexpected trailing text '" + std::string(s_.substr(pos_)) + "'");
    return v;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const { throw ConfigError(line_, msg); }

  void skip_ws() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }

  Value parse_value(bool allow_list) {
    skip_ws();
    if (pos_ >= s_.size() || s_[pos_] == '#') fail("missing value");
    Value v;
    v.line = line_;
    const char c = s_[pos_];
    if (c == '"') {
      v.kind = Value::Kind::string;
      ++pos_;
      while (true) {
        if (pos_ >= s_.size()) fail("unterminated string");
        char ch = s_[pos_++];
        if (ch == '"') break;
        if (ch == '\\') {
          if (pos_ >= s_.size()) fail("unterminated escape");
          ch = s_[pos_++];
          if (ch != '"' && ch != '\\') fail(std::string("unsupported escape '\\") + ch + "'");
        }
        v.text += ch;
      }
      return v;
    }
    if (c == '[') {
      if (!allow_list) fail("nested lists are not supported");
      v.kind = Value::Kind::list;
      ++pos_;
      skip_ws();
      if (pos_ < s_.size() && s_[pos_] == ']') {
        ++pos_;
        return v;
      }
      while (true) {
        v.list.push_back(parse_value(false));
        skip_ws();
        if (pos_ >= s_.size()) fail("unterminated list");
        if (s_[pos_] == ',') {
          ++pos_;
          continue;
        }
        if (s_[pos_] == ']') {
          ++pos_;
          break;
        }
        fail("expected ',' or ']' in list");
      }
      return v;
    }
    std::size_t end = pos_;
    while (end < s_.size() && s_[end] != ',' && s_[end] != ']' && s_[end] != '#' && s_[end] != ' ' && s_[end] != '\t') {
      ++end;
    }
    const std::string word(s_.substr(pos_, end - pos_));
    pos_ = end;
    if (word == "true" || word == "false") {
      v.kind = Value::Kind::boolean;
      v.boolean = word == "true";
      return v;
    }
    const auto num = tensorio::parse_double(word);
    if (!num) fail("cannot parse value '" + word + "' (strings need double quotes)");
    v.kind = Value::Kind::number;
    v.number = *num;
    v.text = word;
    v.integral = word.find_first_of(".eE") == std::string::npos || (std::floor(*num) == *num && std::abs(*num) < 9e15);
    return v;
  }

  std::string_view s_;
  std::size_t line_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Document parse_document(std::istream& in) {
  Document doc;
  std::string raw;
  std::size_t lineno = 0;
  Section* current = nullptr;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string_view line = tensorio::trim(raw);
    if (line.empty() || line.front() == '#') continue;
    if (line.front() == '[') {
      const auto close = line.find(']');
      if (close == std::string_view::npos) throw ConfigError(lineno, "unterminated section header");
      const std::string_view rest = tensorio::trim(line.substr(close + 1));
      if (!rest.empty() && rest.front() != '#') throw ConfigError(lineno, "unexpected text after section header");
      const std::string name(tensorio::trim(line.substr(1, close - 1)));
      if (!detail::is_name(name)) throw ConfigError(lineno, "invalid section name '" + name + "'");
      if (doc.sections.count(name)) {
        throw ConfigError(lineno, "duplicate section [" + name + "] (first at line " +
                                      std::to_string(doc.sections[name].line) + ")");
      }
      current = &doc.sections[name];
      current->line = lineno;
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(lineno, "expected 'key = value' or '[section]'");
    const std::string key(tensorio::trim(line.substr(0, eq)));
    if (!detail::is_name(key)) throw ConfigError(lineno, "invalid key '" + key + "'");
    if (!current) throw ConfigError(lineno, "key '" + key + "' appears before any [section]");
    if (current->entries.count(key)) {
      throw ConfigError(lineno, "duplicate key '" + key + "' (first at line " +
                                    std::to_string(current->entries[key].line) + ")");
    }
    detail::ValueParser vp(line.substr(eq + 1), lineno);
    current->entries[key] = Entry{vp.parse_top(), lineno};
  }
  doc.last_line = lineno;
  return doc;
}

// ---------------------------------------------------------------------------

enum class ReplacementMode { subtract, replace };

struct RunSettings {
  std::uint64_t seed = 1;
};

struct ModelSettings {
  int d_model = 32;
  int n_layers = 4;
  int max_context = 32;
};

struct PretrainSettings {
  finetune::PretrainConfig train;
  int n_documents = 2000;
  int document_length = 24;
  double same_polarity = 0.75;
  double neutral = 0.15;
};

struct PpoSettings {
  finetune::PpoConfig ppo;
  int n_prefixes = 200;
  int prefix_length = 4;
};

struct LayerSettings {
  toymodel::LayerSelection mode = toymodel::LayerSelection::highest_divergence;
  int top_k = 2;
  bool mlp_only = false;
};

struct SampleSettings {
  int n_documents = 1000;  // taken from the front of the pretraining corpus
};

struct SaeSettings {
  bool tied = true;
  double l1_coefficient = 1e-3;
  double learning_rate = 1e-3;
  int batch_size = 32;
  long n_examples = 75000;
  bool mean_center = false;
  int log_every = 100;
  std::vector<double> l1_sweep;
};

struct ProbeSettings {
  double ridge_lambda = 1e-4;
  double target_max = 4.0;
  int heldout_every = 4;  // every k-th context (or triple) is held out
  bool concatenated_l2 = false;
  probes::LogisticConfig logistic;
  probes::SeparableConfig separable;
};

struct AnalysisSettings {
  double strong_positive_threshold = 3.0;
  int top_features = 5;
  int frequency_generations = 200;
};

struct AblateSettings {
  int top_features = 5;
  int n_completions = 100;
  int prefix_length = 8;  // full-scale setting: 1000 completions to 30-token prefixes
  int completion_length = 16;
  double temperature = 1.0;
  ReplacementMode mode = ReplacementMode::subtract;
};

struct ExplainSettings {
  explain::LlmClientConfig client;
  std::string task = "The model was fine-tuned to produce text with positive sentiment.";
  int top_features = 5;
  int examples_per_feature = 20;
};

struct PathSettings {
  std::filesystem::path out_dir;
  std::filesystem::path lexicon;      // empty: built-in lexicon
  std::filesystem::path contrastive;  // empty: built-in templated triples
};

struct PipelineConfig {
  RunSettings run;
  ModelSettings model;
  PretrainSettings pretrain;
  finetune::RewardConfig reward;  // lexicon filled in by the pipeline
  PpoSettings ppo;
  LayerSettings layers;
  SampleSettings sample;
  SaeSettings sae;
  ProbeSettings probe;
  AnalysisSettings analysis;
  AblateSettings ablate;
  ExplainSettings explain;
  PathSettings paths;

  void validate() const;
};

namespace detail {

using Setter = std::function<void(const Value&)>;

class Binder {
 public:
  explicit Binder(std::map<std::string, std::map<std::string, Setter>>& table, std::string section)
      : table_(table), section_(std::move(section)) {
    table_[section_];
  }

  Binder& custom(const std::string& key, Setter s) {
    table_[section_][key] = std::move(s);
    return *this;
  }

  Binder& add(const std::string& key, bool& ref) {
    return custom(key, [&ref, key](const Value& v) {
      if (v.kind != Value::Kind::boolean) throw ConfigError(v.line, "'" + key + "' must be true or false");
      ref = v.boolean;
    });
  }
  Binder& add(const std::string& key, double& ref) {
    return custom(key, [&ref, key](const Value& v) { ref = number(v, key); });
  }
  Binder& add(const std::string& key, int& ref) {
    return custom(key, [&ref, key](const Value& v) { ref = static_cast<int>(integer(v, key, -2147483648.0, 2147483647.0)); });
  }
  Binder& add(const std::string& key, long& ref) {
    return custom(key, [&ref, key](const Value& v) { ref = static_cast<long>(integer(v, key, -9e15, 9e15)); });
  }
  Binder& add(const std::string& key, std::uint64_t& ref) {
    return custom(key, [&ref, key](const Value& v) {
      if (v.kind != Value::Kind::number) throw ConfigError(v.line, "'" + key + "' must be a non-negative integer");
      try {
        std::size_t used = 0;
        const unsigned long long x = std::stoull(v.text, &used);
        if (used != v.text.size() || v.text.front() == '-') throw std::invalid_argument("");
        ref = x;
      } catch (const std::exception&) {
        throw ConfigError(v.line, "'" + key + "' must be a non-negative integer");
      }
    });
  }
  Binder& add(const std::string& key, std::string& ref) {
    return custom(key, [&ref, key](const Value& v) { ref = string(v, key); });
  }
  Binder& add(const std::string& key, std::filesystem::path& ref) {
    return custom(key, [&ref, key](const Value& v) { ref = string(v, key); });
  }
  Binder& add(const std::string& key, std::vector<double>& ref) {
    return custom(key, [&ref, key](const Value& v) {
      if (v.kind != Value::Kind::list) throw ConfigError(v.line, "'" + key + "' must be a list of numbers");
      ref.clear();
      for (const auto& x : v.list) ref.push_back(number(x, key));
    });
  }

  static double number(const Value& v, const std::string& key) {
    if (v.kind != Value::Kind::number) throw ConfigError(v.line, "'" + key + "' must be a number");
    return v.number;
  }
  static double integer(const Value& v, const std::string& key, double lo, double hi) {
    if (v.kind != Value::Kind::number || !v.integral || v.number < lo || v.number > hi) {
      throw ConfigError(v.line, "'" + key + "' must be an integer");
    }
    return v.number;
  }
  static std::string string(const Value& v, const std::string& key) {
    if (v.kind != Value::Kind::string) throw ConfigError(v.line, "'" + key + "' must be a quoted string");
    return v.text;
  }

 private:
  std::map<std::string, std::map<std::string, Setter>>& table_;
  std::string section_;
};

template <class Enum>
Setter enum_setter(Enum& ref, const std::string& key, std::vector<std::pair<std::string, Enum>> choices) {
  return [&ref, key, choices = std::move(choices)](const Value& v) {
    const std::string s = Binder::string(v, key);
    std::string names;
    for (const auto& [name, e] : choices) {
      if (name == s) {
        ref = e;
        return;
      }
      names += (names.empty() ? "" : ", ") + name;
    }
    throw ConfigError(v.line, "'" + key + "' must be one of " + names + " (got \"" + s + "\")");
  };
}

inline std::map<std::string, std::map<std::string, Setter>> schema(PipelineConfig& c) {
  std::map<std::string, std::map<std::string, Setter>> t;
  Binder(t, "run").add("seed", c.run.seed);
  Binder(t, "model").add("d_model", c.model.d_model).add("n_layers", c.model.n_layers).add("max_context", c.model.max_context);
  Binder(t, "pretrain")
      .add("steps", c.pretrain.train.steps)
      .add("batch_size", c.pretrain.train.batch_size)
      .add("learning_rate", c.pretrain.train.learning_rate)
      .add("max_grad_norm", c.pretrain.train.max_grad_norm)
      .add("n_documents", c.pretrain.n_documents)
      .add("document_length", c.pretrain.document_length)
      .add("same_polarity", c.pretrain.same_polarity)
      .add("neutral", c.pretrain.neutral);
  Binder(t, "reward")
      .add("scale_divisor", c.reward.scale_divisor)
      .add("clip_low", c.reward.clip_low)
      .add("clip_high", c.reward.clip_high);
  Binder(t, "ppo")
      .add("clip_epsilon", c.ppo.ppo.clip_epsilon)
      .add("kl_coefficient", c.ppo.ppo.kl_coefficient)
      .add("batch_size", c.ppo.ppo.batch_size)
      .add("mini_batch_size", c.ppo.ppo.mini_batch_size)
      .add("max_grad_norm", c.ppo.ppo.max_grad_norm)
      .add("learning_rate", c.ppo.ppo.learning_rate)
      .add("steps", c.ppo.ppo.steps)
      .add("completion_length", c.ppo.ppo.completion_length)
      .add("temperature", c.ppo.ppo.temperature)
      .add("baseline_decay", c.ppo.ppo.baseline_decay)
      .add("n_prefixes", c.ppo.n_prefixes)
      .add("prefix_length", c.ppo.prefix_length);
  Binder(t, "layers")
      .custom("mode", enum_setter(c.layers.mode, "mode",
                                  {{"highest-divergence", toymodel::LayerSelection::highest_divergence},
                                   {"lowest-layers", toymodel::LayerSelection::lowest_layers}}))
      .add("top_k", c.layers.top_k)
      .add("mlp_only", c.layers.mlp_only);
  Binder(t, "sample").add("n_documents", c.sample.n_documents);
  Binder(t, "sae")
      .add("tied", c.sae.tied)
      .add("l1_coefficient", c.sae.l1_coefficient)
      .add("learning_rate", c.sae.learning_rate)
      .add("batch_size", c.sae.batch_size)
      .add("n_examples", c.sae.n_examples)
      .add("mean_center", c.sae.mean_center)
      .add("log_every", c.sae.log_every)
      .add("l1_sweep", c.sae.l1_sweep);
  Binder(t, "probe")
      .add("ridge_lambda", c.probe.ridge_lambda)
      .add("target_max", c.probe.target_max)
      .add("heldout_every", c.probe.heldout_every)
      .add("concatenated_l2", c.probe.concatenated_l2)
      .add("logistic_learning_rate", c.probe.logistic.learning_rate)
      .add("logistic_epochs", c.probe.logistic.epochs)
      .add("logistic_mini_batch", c.probe.logistic.mini_batch)
      .add("separable_samples", c.probe.separable.n_samples)
      .add("separable_dim", c.probe.separable.dim)
      .add("separable_separation", c.probe.separable.separation)
      .add("separable_noise", c.probe.separable.noise);
  Binder(t, "analysis")
      .add("strong_positive_threshold", c.analysis.strong_positive_threshold)
      .add("top_features", c.analysis.top_features)
      .add("frequency_generations", c.analysis.frequency_generations);
  Binder(t, "ablate")
      .add("top_features", c.ablate.top_features)
      .add("n_completions", c.ablate.n_completions)
      .add("prefix_length", c.ablate.prefix_length)
      .add("completion_length", c.ablate.completion_length)
      .add("temperature", c.ablate.temperature)
      .custom("mode", enum_setter(c.ablate.mode, "mode",
                                  {{"subtract", ReplacementMode::subtract}, {"replace", ReplacementMode::replace}}));
  Binder(t, "explain")
      .add("mock", c.explain.client.mock)
      .add("endpoint", c.explain.client.endpoint)
      .add("model", c.explain.client.model)
      .add("token_env", c.explain.client.token_env)
      .add("timeout_seconds", c.explain.client.timeout_seconds)
      .add("max_retries", c.explain.client.max_retries)
      .add("backoff_initial_seconds", c.explain.client.backoff_initial_seconds)
      .add("concurrency", c.explain.client.concurrency)
      .add("task", c.explain.task)
      .add("top_features", c.explain.top_features)
      .add("examples_per_feature", c.explain.examples_per_feature);
  Binder(t, "paths").add("out_dir", c.paths.out_dir).add("lexicon", c.paths.lexicon).add("contrastive", c.paths.contrastive);
  return t;
}

}  // namespace detail

inline const std::vector<std::string>& required_sections() {
  static const std::vector<std::string> s = {"run", "paths"};
  return s;
}

inline void PipelineConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(0, msg);
  };
  need(model.d_model > 0 && model.n_layers > 0 && model.max_context > 1, "model dimensions must be positive");
  need(pretrain.n_documents > 0 && pretrain.document_length > 1, "pretrain corpus must be non-empty");
  need(pretrain.document_length <= model.max_context, "pretrain.document_length exceeds model.max_context");
  need(pretrain.train.steps >= 0 && pretrain.train.batch_size > 0, "pretrain steps/batch_size invalid");
  need(ppo.n_prefixes > 0 && ppo.prefix_length > 0 && ppo.prefix_length <= pretrain.document_length,
       "ppo prefixes must fit in a corpus document");
  need(ppo.prefix_length + ppo.ppo.completion_length <= model.max_context, "ppo prefix + completion exceeds max_context");
  need(layers.top_k >= 1 && layers.top_k <= model.n_layers, "layers.top_k must be in [1, n_layers]");
  need(sample.n_documents > 0 && sample.n_documents <= pretrain.n_documents,
       "sample.n_documents must be in [1, pretrain.n_documents]");
  need(sae.l1_coefficient >= 0 && sae.learning_rate > 0 && sae.batch_size > 0 && sae.n_examples > 0,
       "sae settings invalid");
  for (double a : sae.l1_sweep) need(a >= 0, "sae.l1_sweep entries must be >= 0");
  need(probe.ridge_lambda >= 0 && probe.target_max > 0 && probe.heldout_every >= 2, "probe settings invalid");
  need(analysis.top_features >= 1 && analysis.frequency_generations >= 1, "analysis settings invalid");
  need(ablate.top_features >= 0 && ablate.n_completions >= 1 && ablate.prefix_length >= 1 &&
           ablate.prefix_length <= pretrain.document_length &&
           ablate.prefix_length + ablate.completion_length <= model.max_context,
       "ablate settings invalid");
  need(explain.top_features >= 1 && explain.examples_per_feature >= 1 && !explain.task.empty(), "explain settings invalid");
  need(!paths.out_dir.empty(), "paths.out_dir must be set");
  reward.validate();
  ppo.ppo.validate();
  explain.client.validate();
}

inline PipelineConfig from_document(const Document& doc) {
  PipelineConfig cfg;
  auto table = detail::schema(cfg);
  for (const auto& [name, section] : doc.sections) {
    const auto known = table.find(name);
    if (known == table.end()) throw ConfigError(section.line, "unknown section [" + name + "]");
    for (const auto& [key, entry] : section.entries) {
      const auto setter = known->second.find(key);
      if (setter == known->second.end()) throw ConfigError(entry.line, "unknown key '" + key + "' in [" + name + "]");
      setter->second(entry.value);
    }
  }
  for (const auto& r : required_sections()) {
    if (!doc.sections.count(r)) {
      throw ConfigError(doc.last_line ? doc.last_line : 1, "missing required section [" + r + "] (reached end of file)");
    }
  }
  if (!doc.sections.at("paths").entries.count("out_dir")) {
    throw ConfigError(doc.sections.at("paths").line, "[paths] requires 'out_dir'");
  }
  cfg.validate();
  return cfg;
}

inline PipelineConfig parse(std::string_view text) {
  std::istringstream in{std::string(text)};
  return from_document(parse_document(in));
}

inline PipelineConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(0, "cannot open " + path.string());
  return from_document(parse_document(in));
}

}  // namespace lfp::config
