#pragma once

// Feature descriptions and task-relatedness labels from an external chat
// model. The wire format is the common JSON chat-completion shape:
//   POST {endpoint}  {"model": ..., "messages": [{"role","content"}...], "temperature": 0}
//   -> {"choices": [{"message": {"content": "..."}}]}
// A deterministic offline mock implements the same contract.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <condition_variable>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfp/numerics.hpp"
#include "lfp/tensorio.hpp"

// After Eigen: <resolv.h>, pulled in by httplib, defines a `_res` macro.
#include <httplib.h>

namespace lfp::explain {

inline constexpr const char* kPromptVersion = "lfp-describe-v1";
inline constexpr const char* kClassifyPromptVersion = "lfp-classify-v1";

enum class LlmErrc { configuration, timeout, transport, rate_limited, http_status, malformed_response, parse_failure };

inline const char* to_string(LlmErrc c) {
  switch (c) {
    case LlmErrc::configuration: return "configuration";
    case LlmErrc::timeout: return "timeout";
    case LlmErrc::transport: return "transport";
    case LlmErrc::rate_limited: return "rate-limited";
    case LlmErrc::http_status: return "http-status";
    case LlmErrc::malformed_response: return "malformed-response";
    case LlmErrc::parse_failure: return "parse-failure";
  }
  return "unknown";
}

class LlmError : public std::runtime_error {
 public:
  LlmError(LlmErrc code, const std::string& msg, int status = 0)
      : std::runtime_error(std::string(to_string(code)) + ": " + msg), code_(code), status_(status) {}
  LlmErrc code() const noexcept { return code_; }
  int status() const noexcept { return status_; }

 private:
  LlmErrc code_;
  int status_;
};

struct LlmClientConfig {
  std::string endpoint;  // e.g. https://host/v1/chat/completions
  std::string model = "gpt-4";
  std::string token_env = "LFP_LLM_TOKEN";
  double timeout_seconds = 30.0;
  int max_retries = 3;
  double backoff_initial_seconds = 0.5;
  int concurrency = 2;
  bool mock = true;

  void validate() const {
    if (max_retries < 0) throw LlmError(LlmErrc::configuration, "max_retries must be >= 0");
    if (concurrency < 1) throw LlmError(LlmErrc::configuration, "concurrency must be >= 1");
    if (!(timeout_seconds > 0)) throw LlmError(LlmErrc::configuration, "timeout must be > 0");
    if (!mock && endpoint.empty()) throw LlmError(LlmErrc::configuration, "endpoint required unless mock mode is on");
  }
};

struct HttpResponse {
  int status = 0;
  std::string body;
};

/// Sends one JSON request body and returns the raw response. Implementations
/// throw LlmError(timeout | transport) when no HTTP response was received.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResponse post(const std::string& body) = 0;
};

struct ParsedUrl {
  std::string scheme_host_port;
  std::string path;
};

inline ParsedUrl parse_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw LlmError(LlmErrc::configuration, "endpoint lacks a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

class HttpTransport : public Transport {
 public:
  explicit HttpTransport(const LlmClientConfig& cfg) : url_(parse_url(cfg.endpoint)), timeout_(cfg.timeout_seconds) {
    if (const char* tok = std::getenv(cfg.token_env.c_str())) token_ = tok;
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
    if (url_.scheme_host_port.rfind("https://", 0) == 0) {
      throw LlmError(LlmErrc::configuration, "https endpoint but this build has no TLS support");
    }
#endif
  }

  HttpResponse post(const std::string& body) override {
    httplib::Client cli(url_.scheme_host_port);
    const auto secs = static_cast<time_t>(timeout_);
    const auto usecs = static_cast<time_t>((timeout_ - static_cast<double>(secs)) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
    auto res = cli.Post(url_.path, headers, body, "application/json");
    if (!res) {
      const auto err = res.error();
      if (err == httplib::Error::Read || err == httplib::Error::Write || err == httplib::Error::ConnectionTimeout) {
        throw LlmError(LlmErrc::timeout, "no response from " + url_.scheme_host_port + " (" + httplib::to_string(err) + ")");
      }
      throw LlmError(LlmErrc::transport, url_.scheme_host_port + ": " + httplib::to_string(err));
    }
    return {res->status, res->body};
  }

 private:
  ParsedUrl url_;
  double timeout_;
  std::string token_;
};

inline std::string chat_response_json(const std::string& content) {
  return nlohmann::json{{"choices", {{{"index", 0}, {"message", {{"role", "assistant"}, {"content", content}}}}}}}.dump();
}

/// Offline stand-in. Description requests get a canned description chosen by
/// the FNV-1a hash of the prompt; classification requests answer "yes" when
/// the description mentions sentiment vocabulary.
class MockTransport : public Transport {
 public:
  HttpResponse post(const std::string& body) override {
    const auto req = nlohmann::json::parse(body);
    const std::string prompt = req.at("messages").back().at("content").get<std::string>();
    if (prompt.find(kClassifyPromptVersion) != std::string::npos) {
      const auto start = prompt.find("Feature description:");
      const auto end = prompt.find("Task description:");
      const std::string desc = tensorio::to_lower(prompt.substr(start, end - start));
      static const char* cues[] = {"sentiment", "positive", "negative", "praise", "emotion", "opinion", "approval"};
      const bool related = std::any_of(std::begin(cues), std::end(cues),
                                       [&](const char* c) { return desc.find(c) != std::string::npos; });
      return {200, chat_response_json(related ? "yes" : "no")};
    }
    static const char* canned[] = {
        "Detects words expressing positive sentiment, such as praise for a film.",
        "Fires on negative sentiment words describing disappointment.",
        "Responds to articles and determiners at the start of a clause.",
        "Detects characters in a foreign language.",
        "Activates on intensifiers like very and really.",
        "Tracks punctuation that ends a sentence.",
    };
    const auto h = numerics::fnv1a64(prompt);
    return {200, chat_response_json(canned[h % std::size(canned)])};
  }
};

/// Produces a fixed sequence of responses, then repeats the last one. Counts calls.
class ScriptedTransport : public Transport {
 public:
  explicit ScriptedTransport(std::vector<HttpResponse> script) : script_(std::move(script)) {}
  HttpResponse post(const std::string&) override {
    const std::size_t i = std::min(calls_++, script_.size() - 1);
    return script_.at(i);
  }
  std::size_t calls() const { return calls_; }

 private:
  std::vector<HttpResponse> script_;
  std::size_t calls_ = 0;
};

using Sleeper = std::function<void(std::chrono::duration<double>)>;

class LlmClient {
 public:
  LlmClient(LlmClientConfig cfg, std::shared_ptr<Transport> transport, Sleeper sleeper = default_sleeper())
      : cfg_(std::move(cfg)), transport_(std::move(transport)), sleeper_(std::move(sleeper)), slots_(cfg_.concurrency) {
    cfg_.validate();
    if (!transport_) throw LlmError(LlmErrc::configuration, "null transport");
  }

  /// Mock transport in mock mode, HTTP otherwise.
  static LlmClient from_config(const LlmClientConfig& cfg) {
    cfg.validate();
    std::shared_ptr<Transport> t;
    if (cfg.mock) {
      t = std::make_shared<MockTransport>();
    } else {
      t = std::make_shared<HttpTransport>(cfg);
    }
    return LlmClient(cfg, std::move(t));
  }

  static Sleeper default_sleeper() {
    return [](std::chrono::duration<double> d) { std::this_thread::sleep_for(d); };
  }

  const LlmClientConfig& config() const { return cfg_; }

  /// One chat turn. Rate limits, 5xx statuses and timeouts are retried with
  /// exponential backoff; other failures surface immediately.
  std::string complete(const std::string& system, const std::string& user) {
    const std::string body = nlohmann::json{{"model", cfg_.model},
                                            {"temperature", 0},
                                            {"messages",
                                             {{{"role", "system"}, {"content", system}},
                                              {{"role", "user"}, {"content", user}}}}}
                                 .dump();
    Slot slot(*this);
    for (int attempt = 0;; ++attempt) {
      try {
        const HttpResponse res = transport_->post(body);
        if (res.status == 429) throw LlmError(LlmErrc::rate_limited, "HTTP 429", 429);
        if (res.status >= 500) throw LlmError(LlmErrc::http_status, "HTTP " + std::to_string(res.status), res.status);
        if (res.status < 200 || res.status >= 300) {
          throw LlmError(LlmErrc::http_status, "HTTP " + std::to_string(res.status) + ": " + res.body.substr(0, 200),
                         res.status);
        }
        return extract_content(res.body);
      } catch (const LlmError& e) {
        const bool retryable = e.code() == LlmErrc::rate_limited || e.code() == LlmErrc::timeout ||
                               (e.code() == LlmErrc::http_status && e.status() >= 500);
        if (!retryable || attempt >= cfg_.max_retries) throw;
        sleeper_(std::chrono::duration<double>(cfg_.backoff_initial_seconds * std::pow(2.0, attempt)));
      }
    }
  }

  static std::string extract_content(const std::string& body) {
    try {
      const auto j = nlohmann::json::parse(body);
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw LlmError(LlmErrc::malformed_response, e.what());
    }
  }

 private:
  struct Slot {
    explicit Slot(LlmClient& c) : c_(c) {
      std::unique_lock lock(c_.mu_);
      c_.cv_.wait(lock, [&] { return c_.slots_ > 0; });
      --c_.slots_;
    }
    ~Slot() {
      {
        std::lock_guard lock(c_.mu_);
        ++c_.slots_;
      }
      c_.cv_.notify_one();
    }
    LlmClient& c_;
  };

  LlmClientConfig cfg_;
  std::shared_ptr<Transport> transport_;
  Sleeper sleeper_;
  std::mutex mu_;
  std::condition_variable cv_;
  int slots_;
};

// ---------------------------------------------------------------------------
// Prompts

/// round(10 * (c - min) / (max - min)); all zeros when the activations are constant.
inline std::vector<int> discretize_activations(const std::vector<double>& activations) {
  if (activations.empty()) return {};
  const auto [lo, hi] = std::minmax_element(activations.begin(), activations.end());
  std::vector<int> out;
  const double range = *hi - *lo;
  for (double a : activations) out.push_back(range > 0 ? static_cast<int>(std::lround(10.0 * (a - *lo) / range)) : 0);
  return out;
}

inline std::string build_description_prompt(int feature, const std::vector<std::pair<std::string, int>>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("build_description_prompt: no token/activation pairs");
  std::string p = std::string("[") + kPromptVersion + "]\n";
  p += "Below are tokens with the activation level (0-10) of neuron-like feature " + std::to_string(feature) +
       " of a language model.\n";
  bool all_zero = true;
  for (const auto& [tok, level] : pairs) {
    if (level < 0 || level > 10) throw std::invalid_argument("build_description_prompt: level outside 0-10");
    p += tok + "\t" + std::to_string(level) + "\n";
    all_zero = all_zero && level == 0;
  }
  if (all_zero) p += "Note: the feature's activation was constant over these tokens, so every level is 0.\n";
  p += "In one sentence, describe what this feature detects.";
  return p;
}

inline std::string build_description_prompt(int feature, const std::vector<std::string>& tokens,
                                             const std::vector<double>& activations) {
  if (tokens.size() != activations.size()) throw std::invalid_argument("build_description_prompt: length mismatch");
  const auto levels = discretize_activations(activations);
  std::vector<std::pair<std::string, int>> pairs;
  for (std::size_t i = 0; i < tokens.size(); ++i) pairs.emplace_back(tokens[i], levels[i]);
  return build_description_prompt(feature, pairs);
}

inline std::string describe_feature(LlmClient& client, const std::string& prompt) {
  const std::string text{tensorio::trim(client.complete("You explain features of neural networks.", prompt))};
  if (text.empty()) throw LlmError(LlmErrc::malformed_response, "empty description");
  return text;
}

/// Strict yes/no: surrounding whitespace, case and one trailing period are tolerated.
inline bool parse_yes_no(std::string_view raw) {
  std::string s = tensorio::to_lower(tensorio::trim(raw));
  if (!s.empty() && s.back() == '.') s.pop_back();
  if (s == "yes") return true;
  if (s == "no") return false;
  throw LlmError(LlmErrc::parse_failure, "expected yes or no, got '" + std::string(raw.substr(0, 80)) + "'");
}

inline std::string build_classify_prompt(const std::string& description, const std::string& task) {
  return std::string("[") + kClassifyPromptVersion + "]\nFeature description: " + description +
         "\nTask description: " + task +
         "\nIs this feature relevant to the task? Answer with exactly one word: yes or no.";
}

inline bool classify_related(LlmClient& client, const std::string& description, const std::string& task,
                             std::string* raw = nullptr) {
  if (description.empty() || task.empty()) throw std::invalid_argument("classify_related: empty text");
  const std::string reply =
      client.complete("You label features as related or unrelated to a task.", build_classify_prompt(description, task));
  if (raw) *raw = reply;
  return parse_yes_no(reply);
}

// ---------------------------------------------------------------------------

struct FeatureExplanation {
  int layer_index = 0;
  int feature_index = 0;
  std::string description;
  bool related_to_task = false;
  std::string raw_response;
};

struct ExplainRequest {
  int layer_index = 0;
  int feature_index = 0;
  std::string prompt;
};

/// Describes then classifies each request, running up to the client's
/// concurrency limit at once. Output order follows the input.
inline std::vector<FeatureExplanation> explain_features(LlmClient& client, const std::vector<ExplainRequest>& requests,
                                                        const std::string& task) {
  std::vector<FeatureExplanation> out(requests.size());
  std::vector<std::exception_ptr> errors(requests.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < requests.size(); i = next++) {
      try {
        FeatureExplanation& e = out[i];
        e.layer_index = requests[i].layer_index;
        e.feature_index = requests[i].feature_index;
        e.description = describe_feature(client, requests[i].prompt);
        e.related_to_task = classify_related(client, e.description, task, &e.raw_response);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int n_threads = std::min<int>(client.config().concurrency, static_cast<int>(requests.size()));
  std::vector<std::thread> pool;
  for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

inline nlohmann::json to_json(const FeatureExplanation& e) {
  return {{"layer", e.layer_index},
          {"feature", e.feature_index},
          {"description", e.description},
          {"related", e.related_to_task},
          {"raw_response", e.raw_response}};
}

inline void write_explanations(const std::vector<FeatureExplanation>& xs, const std::filesystem::path& path) {
  std::string text;
  for (const auto& x : xs) text += to_json(x).dump() + "\n";
  tensorio::write_text(path, text);
}

}  // namespace lfp::explain
