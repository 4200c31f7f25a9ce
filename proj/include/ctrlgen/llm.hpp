#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "ctrlgen/common.hpp"

namespace ctrlgen::llm {

using Millis = std::chrono::milliseconds;

struct RetryPolicy {
  int max_attempts = 3;
  Millis backoff_base{500};
};

/// How an assistant prefix is replayed to the endpoint.
enum class PrefixMode {
  assistant_prefill,  // trailing assistant message the model continues
  user_continuation,  // prefix quoted in the user turn with a continue instruction
};

std::string_view to_string(PrefixMode mode);
PrefixMode parse_prefix_mode(std::string_view text);

struct GatewayConfig {
  std::string endpoint_url = "http://127.0.0.1:8000";
  std::string model_id = "default";
  std::string api_key;
  double temperature = 0.0;
  int max_output_tokens = 4096;
  Millis request_timeout{120000};
  RetryPolicy retry;
  int max_in_flight = 4;
  PrefixMode prefix_mode = PrefixMode::assistant_prefill;

  void validate() const;

  /// CTRLGEN_API_KEY and CTRLGEN_ENDPOINT take precedence when set.
  void apply_environment();
};

nlohmann::json to_json(const GatewayConfig& cfg);  // api_key redacted
/// Overlays the keys present in `j` onto `base`.
GatewayConfig gateway_config_from_json(const nlohmann::json& j, GatewayConfig base = {});

struct ChatRequest {
  std::optional<std::string> system;
  std::string user;
  std::optional<std::string> assistant_prefix;
};

class GatewayError : public Error {
 public:
  enum class Kind { timeout, rate_limited, http_status, malformed_response, stream_interrupted };

  GatewayError(Kind kind, const std::string& what);

  static GatewayError timeout(const std::string& detail);
  static GatewayError rate_limited(std::optional<Millis> retry_after);
  static GatewayError http_status(int status, std::string body);
  static GatewayError malformed(const std::string& detail);
  static GatewayError interrupted(std::string partial, const std::string& detail);

  Kind kind() const { return kind_; }
  int status() const { return status_; }
  const std::string& body() const { return body_; }
  std::optional<Millis> retry_after() const { return retry_after_; }
  /// Text received before a stream broke off.
  const std::string& partial() const { return partial_; }
  bool retryable() const;

 private:
  Kind kind_;
  int status_ = 0;
  std::string body_;
  std::optional<Millis> retry_after_;
  std::string partial_;
};

std::string_view to_string(GatewayError::Kind kind);

/// Receives stream chunks in order; returning false cancels the request.
using ChunkSink = std::function<bool(std::string_view chunk)>;

struct StreamSummary {
  std::string text;
  bool cancelled = false;
  int attempts = 1;
};

/// Anything that can answer chat requests. Implementations are shareable
/// across threads.
class ChatClient {
 public:
  virtual ~ChatClient() = default;

  /// The assistant continuation. With an assistant prefix the returned text
  /// continues it and does not repeat it.
  virtual std::string complete(const ChatRequest& req) = 0;

  /// As complete, delivered incrementally. The concatenated chunks equal
  /// what complete would return.
  virtual StreamSummary stream(const ChatRequest& req, const ChunkSink& sink) = 0;
};

/// Called before each retry with the attempt that failed (1-based), the
/// delay about to be slept and the error that caused it.
using RetryHook = std::function<void(int attempt, Millis delay, const GatewayError& cause)>;

/// Chat-completions HTTP client: POST {endpoint}/v1/chat/completions, with
/// server-sent-event streaming. At most max_in_flight requests are open at
/// any time across all threads using one Gateway.
class Gateway : public ChatClient {
 public:
  explicit Gateway(GatewayConfig cfg);
  ~Gateway() override;

  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  std::string complete(const ChatRequest& req) override;
  StreamSummary stream(const ChatRequest& req, const ChunkSink& sink) override;

  void set_retry_hook(RetryHook hook);
  const GatewayConfig& config() const { return cfg_; }

  /// The JSON request body sent for `req`.
  nlohmann::json request_body(const ChatRequest& req, bool streaming) const;

 private:
  struct Impl;

  std::string complete_once(const ChatRequest& req);
  StreamSummary stream_once(const ChatRequest& req, const ChunkSink& sink, bool& delivered);
  Millis backoff_for(int attempt, const GatewayError& e) const;

  GatewayConfig cfg_;
  std::unique_ptr<Impl> impl_;
  RetryHook on_retry_;
};

/// Instruction appended to the user turn in user_continuation mode.
inline constexpr std::string_view kContinueInstruction =
    "Continue exactly from the end of the following partial answer. Output only the "
    "continuation; do not repeat the partial answer.";

/// Removes a leading copy of `prefix` that an endpoint without prefill
/// support may echo back. Works incrementally over stream chunks.
class PrefixEchoStripper {
 public:
  explicit PrefixEchoStripper(std::string prefix);

  /// Text safe to release after seeing `chunk`.
  std::string push(std::string_view chunk);
  /// Remaining held-back text at end of stream.
  std::string finish();

 private:
  std::string prefix_;
  std::string held_;
  bool decided_ = false;
};

}  // namespace ctrlgen::llm
