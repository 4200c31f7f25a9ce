#include "ctrlgen/llm.hpp"

#include <httplib.h>

#include <cstdlib>
#include <regex>
#include <semaphore>
#include <thread>

namespace ctrlgen::llm {

namespace {

using json = nlohmann::json;

constexpr std::string_view kCompletionsPath = "/v1/chat/completions";

struct Endpoint {
  std::string scheme_host_port;
  std::string path;
};

Endpoint split_endpoint(const std::string& url) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)", std::regex::icase);
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw Error("invalid endpoint url '" + url + "'");
  std::string path = m[2].matched ? m[2].str() : "";
  while (!path.empty() && path.back() == '/') path.pop_back();
  if (path.size() < std::string_view("/chat/completions").size() ||
      path.substr(path.size() - 17) != "/chat/completions") {
    // A base url may already carry the /v1 segment.
    if (path.size() >= 3 && path.substr(path.size() - 3) == "/v1") {
      path += "/chat/completions";
    } else {
      path += kCompletionsPath;
    }
  }
  return {m[1].str(), path};
}

std::optional<Millis> parse_retry_after(const httplib::Headers& headers) {
  const auto it = headers.find("Retry-After");
  if (it == headers.end()) return std::nullopt;
  try {
    const double seconds = std::stod(it->second);
    if (seconds >= 0) return Millis(static_cast<long long>(seconds * 1000));
  } catch (const std::exception&) {
  }
  return std::nullopt;
}

GatewayError transport_error(httplib::Error e) {
  return GatewayError::timeout("transport error: " + httplib::to_string(e));
}

GatewayError status_error(int status, const httplib::Headers& headers, std::string body) {
  if (status == 429) return GatewayError::rate_limited(parse_retry_after(headers));
  return GatewayError::http_status(status, std::move(body));
}

// Text of choices[0] from a blocking or streamed response object. Streamed
// deltas may legitimately carry no content (role-only or final frames).
std::optional<std::string> choice_text(const json& j, bool streaming) {
  if (!j.is_object() || !j.contains("choices") || !j["choices"].is_array() ||
      j["choices"].empty()) {
    throw GatewayError::malformed("response has no choices");
  }
  const auto& choice = j["choices"][0];
  const char* field = streaming ? "delta" : "message";
  if (choice.contains(field) && choice[field].is_object()) {
    const auto& msg = choice[field];
    if (msg.contains("content") && msg["content"].is_string()) {
      return msg["content"].get<std::string>();
    }
    if (streaming) return std::nullopt;
  }
  if (choice.contains("text") && choice["text"].is_string()) return choice["text"].get<std::string>();
  if (streaming) return std::nullopt;
  throw GatewayError::malformed("response choice carries no content");
}

}  // namespace

std::string_view to_string(PrefixMode mode) {
  return mode == PrefixMode::assistant_prefill ? "assistant_prefill" : "user_continuation";
}

PrefixMode parse_prefix_mode(std::string_view text) {
  if (text == "assistant_prefill") return PrefixMode::assistant_prefill;
  if (text == "user_continuation") return PrefixMode::user_continuation;
  throw Error("unknown prefix mode '" + std::string(text) + "'");
}

void GatewayConfig::validate() const {
  if (temperature < 0) throw Error("gateway temperature must be >= 0");
  if (retry.max_attempts < 1) throw Error("gateway retry.max_attempts must be >= 1");
  if (max_in_flight < 1) throw Error("gateway max_in_flight must be >= 1");
  if (max_output_tokens < 1) throw Error("gateway max_output_tokens must be >= 1");
  split_endpoint(endpoint_url);
}

void GatewayConfig::apply_environment() {
  if (const char* key = std::getenv("CTRLGEN_API_KEY"); key && *key) api_key = key;
  if (const char* url = std::getenv("CTRLGEN_ENDPOINT"); url && *url) endpoint_url = url;
}

json to_json(const GatewayConfig& cfg) {
  return {
      {"endpoint_url", cfg.endpoint_url},
      {"model_id", cfg.model_id},
      {"api_key", cfg.api_key.empty() ? "" : "***"},
      {"temperature", cfg.temperature},
      {"max_output_tokens", cfg.max_output_tokens},
      {"request_timeout_ms", cfg.request_timeout.count()},
      {"retry", {{"max_attempts", cfg.retry.max_attempts},
                 {"backoff_base_ms", cfg.retry.backoff_base.count()}}},
      {"max_in_flight", cfg.max_in_flight},
      {"prefix_mode", std::string(to_string(cfg.prefix_mode))},
  };
}

GatewayConfig gateway_config_from_json(const json& j, GatewayConfig cfg) {
  try {
    if (j.contains("endpoint_url")) cfg.endpoint_url = j["endpoint_url"].get<std::string>();
    if (j.contains("model_id")) cfg.model_id = j["model_id"].get<std::string>();
    if (j.contains("api_key") && j["api_key"].get<std::string>() != "***") {
      cfg.api_key = j["api_key"].get<std::string>();
    }
    if (j.contains("temperature")) cfg.temperature = j["temperature"].get<double>();
    if (j.contains("max_output_tokens")) cfg.max_output_tokens = j["max_output_tokens"].get<int>();
    if (j.contains("request_timeout_ms")) {
      cfg.request_timeout = Millis(j["request_timeout_ms"].get<long long>());
    }
    if (j.contains("retry")) {
      const auto& r = j["retry"];
      if (r.contains("max_attempts")) cfg.retry.max_attempts = r["max_attempts"].get<int>();
      if (r.contains("backoff_base_ms")) {
        cfg.retry.backoff_base = Millis(r["backoff_base_ms"].get<long long>());
      }
    }
    if (j.contains("max_in_flight")) cfg.max_in_flight = j["max_in_flight"].get<int>();
    if (j.contains("prefix_mode")) {
      cfg.prefix_mode = parse_prefix_mode(j["prefix_mode"].get<std::string>());
    }
  } catch (const json::exception& e) {
    throw Error(std::string("malformed gateway config: ") + e.what());
  }
  return cfg;
}

GatewayError::GatewayError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

GatewayError GatewayError::timeout(const std::string& detail) {
  return GatewayError(Kind::timeout, "Timeout: " + detail);
}

GatewayError GatewayError::rate_limited(std::optional<Millis> retry_after) {
  GatewayError e(Kind::rate_limited,
                 "RateLimited" + (retry_after ? "(retry-after " + std::to_string(retry_after->count()) + "ms)"
                                              : std::string()));
  e.status_ = 429;
  e.retry_after_ = retry_after;
  return e;
}

GatewayError GatewayError::http_status(int status, std::string body) {
  GatewayError e(Kind::http_status, "HttpStatus(" + std::to_string(status) + "): " +
                                        body.substr(0, 200));
  e.status_ = status;
  e.body_ = std::move(body);
  return e;
}

GatewayError GatewayError::malformed(const std::string& detail) {
  return GatewayError(Kind::malformed_response, "MalformedResponse: " + detail);
}

GatewayError GatewayError::interrupted(std::string partial, const std::string& detail) {
  GatewayError e(Kind::stream_interrupted, "StreamInterrupted after " +
                                               std::to_string(partial.size()) + " bytes: " + detail);
  e.partial_ = std::move(partial);
  return e;
}

bool GatewayError::retryable() const {
  switch (kind_) {
    case Kind::timeout:
    case Kind::rate_limited:
    case Kind::malformed_response:
      return true;
    case Kind::http_status:
      return status_ >= 500 || status_ == 408;
    case Kind::stream_interrupted:
      return false;
  }
  return false;
}

std::string_view to_string(GatewayError::Kind kind) {
  switch (kind) {
    case GatewayError::Kind::timeout: return "timeout";
    case GatewayError::Kind::rate_limited: return "rate_limited";
    case GatewayError::Kind::http_status: return "http_status";
    case GatewayError::Kind::malformed_response: return "malformed_response";
    case GatewayError::Kind::stream_interrupted: return "stream_interrupted";
  }
  return "?";
}

PrefixEchoStripper::PrefixEchoStripper(std::string prefix) : prefix_(std::move(prefix)) {
  decided_ = prefix_.empty();
}

std::string PrefixEchoStripper::push(std::string_view chunk) {
  if (decided_) return std::string(chunk);
  held_.append(chunk);
  if (held_.size() < prefix_.size()) {
    if (prefix_.compare(0, held_.size(), held_) == 0) return {};
    decided_ = true;
    return std::exchange(held_, {});
  }
  decided_ = true;
  if (held_.compare(0, prefix_.size(), prefix_) == 0) {
    std::string rest = held_.substr(prefix_.size());
    held_.clear();
    return rest;
  }
  return std::exchange(held_, {});
}

std::string PrefixEchoStripper::finish() {
  decided_ = true;
  return std::exchange(held_, {});
}

struct Gateway::Impl {
  explicit Impl(int slots) : slots(slots) {}

  std::counting_semaphore<1 << 20> slots;
  Endpoint endpoint;
};

namespace {

class SlotGuard {
 public:
  explicit SlotGuard(std::counting_semaphore<1 << 20>& sem) : sem_(sem) { sem_.acquire(); }
  ~SlotGuard() { sem_.release(); }
  SlotGuard(const SlotGuard&) = delete;
  SlotGuard& operator=(const SlotGuard&) = delete;

 private:
  std::counting_semaphore<1 << 20>& sem_;
};

std::unique_ptr<httplib::Client> make_client(const std::string& scheme_host_port,
                                             const GatewayConfig& cfg) {
  auto client = std::make_unique<httplib::Client>(scheme_host_port);
  if (!client->is_valid()) throw Error("cannot create client for '" + scheme_host_port + "'");
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(cfg.request_timeout);
  const auto usecs =
      std::chrono::duration_cast<std::chrono::microseconds>(cfg.request_timeout - secs);
  client->set_connection_timeout(secs.count(), usecs.count());
  client->set_read_timeout(secs.count(), usecs.count());
  client->set_write_timeout(secs.count(), usecs.count());
  if (!cfg.api_key.empty()) client->set_bearer_token_auth(cfg.api_key);
  return client;
}

}  // namespace

Gateway::Gateway(GatewayConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  impl_ = std::make_unique<Impl>(cfg_.max_in_flight);
  impl_->endpoint = split_endpoint(cfg_.endpoint_url);
}

Gateway::~Gateway() = default;

void Gateway::set_retry_hook(RetryHook hook) { on_retry_ = std::move(hook); }

json Gateway::request_body(const ChatRequest& req, bool streaming) const {
  if (req.user.empty()) throw Error("chat request has an empty user message");
  json messages = json::array();
  if (req.system) messages.push_back({{"role", "system"}, {"content", *req.system}});
  const bool has_prefix = req.assistant_prefix && !req.assistant_prefix->empty();
  if (has_prefix && cfg_.prefix_mode == PrefixMode::user_continuation) {
    messages.push_back({{"role", "user"},
                        {"content", req.user + "\n\n" + std::string(kContinueInstruction) +
                                        "\n\n" + *req.assistant_prefix}});
  } else {
    messages.push_back({{"role", "user"}, {"content", req.user}});
    if (has_prefix) messages.push_back({{"role", "assistant"}, {"content", *req.assistant_prefix}});
  }
  json body = {
      {"model", cfg_.model_id},
      {"messages", std::move(messages)},
      {"temperature", cfg_.temperature},
      {"max_tokens", cfg_.max_output_tokens},
      {"stream", streaming},
  };
  return body;
}

Millis Gateway::backoff_for(int attempt, const GatewayError& e) const {
  if (e.retry_after()) return *e.retry_after();
  return cfg_.retry.backoff_base * (1LL << std::min(attempt - 1, 16));
}

std::string Gateway::complete_once(const ChatRequest& req) {
  SlotGuard slot(impl_->slots);
  auto client = make_client(impl_->endpoint.scheme_host_port, cfg_);
  const auto body = request_body(req, false).dump();
  auto res = client->Post(impl_->endpoint.path, body, "application/json");
  if (!res) throw transport_error(res.error());
  if (res->status != 200) throw status_error(res->status, res->headers, res->body);
  json j;
  try {
    j = json::parse(res->body);
  } catch (const json::parse_error& e) {
    throw GatewayError::malformed(std::string("invalid JSON body: ") + e.what());
  }
  std::string text = *choice_text(j, false);
  if (cfg_.prefix_mode == PrefixMode::user_continuation && req.assistant_prefix) {
    PrefixEchoStripper strip(*req.assistant_prefix);
    std::string kept = strip.push(text);
    text = kept + strip.finish();
  }
  return text;
}

std::string Gateway::complete(const ChatRequest& req) {
  for (int attempt = 1;; ++attempt) {
    try {
      return complete_once(req);
    } catch (const GatewayError& e) {
      if (!e.retryable() || attempt >= cfg_.retry.max_attempts) throw;
      const auto delay = backoff_for(attempt, e);
      if (on_retry_) on_retry_(attempt, delay, e);
      std::this_thread::sleep_for(delay);
    }
  }
}

StreamSummary Gateway::stream_once(const ChatRequest& req, const ChunkSink& sink,
                                   bool& delivered) {
  SlotGuard slot(impl_->slots);
  auto client = make_client(impl_->endpoint.scheme_host_port, cfg_);

  StreamSummary summary;
  std::optional<PrefixEchoStripper> strip;
  if (cfg_.prefix_mode == PrefixMode::user_continuation && req.assistant_prefix) {
    strip.emplace(*req.assistant_prefix);
  }
  int status = 0;
  httplib::Headers headers;
  std::string error_body;
  std::string line_buf;
  bool done = false;
  std::optional<GatewayError> failure;

  auto deliver = [&](std::string_view text) {
    if (text.empty()) return true;
    summary.text.append(text);
    delivered = true;
    if (!sink(text)) {
      summary.cancelled = true;
      return false;
    }
    return true;
  };

  auto handle_line = [&](std::string_view line) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.substr(0, 5) != "data:") return true;  // comments, event names, ids
    auto payload = trim(line.substr(5));
    if (payload == "[DONE]") {
      done = true;
      return true;
    }
    json j;
    try {
      j = json::parse(payload);
    } catch (const json::parse_error&) {
      failure = GatewayError::malformed("invalid JSON in stream event");
      return false;
    }
    std::optional<std::string> text;
    try {
      text = choice_text(j, true);
    } catch (const GatewayError& e) {
      failure = e;
      return false;
    }
    if (!text) return true;
    return deliver(strip ? strip->push(*text) : *text);
  };

  httplib::Request request;
  request.method = "POST";
  request.path = impl_->endpoint.path;
  request.headers = {{"Accept", "text/event-stream"}};
  request.body = request_body(req, true).dump();
  request.set_header("Content-Type", "application/json");
  request.response_handler = [&](const httplib::Response& r) {
    status = r.status;
    headers = r.headers;
    return true;
  };
  request.content_receiver = [&](const char* data, size_t len, uint64_t, uint64_t) {
    if (status != 200) {
      error_body.append(data, len);
      return true;
    }
    line_buf.append(data, len);
    std::size_t start = 0;
    for (auto nl = line_buf.find('\n', start); nl != std::string::npos;
         nl = line_buf.find('\n', start)) {
      const bool keep_going = handle_line(std::string_view(line_buf).substr(start, nl - start));
      start = nl + 1;
      if (!keep_going || done) {
        line_buf.erase(0, start);
        return keep_going;
      }
    }
    line_buf.erase(0, start);
    return true;
  };

  httplib::Response response;
  httplib::Error err = httplib::Error::Success;
  const bool ok = client->send(request, response, err);

  if (summary.cancelled) return summary;
  if (failure) {
    if (delivered) throw GatewayError::interrupted(summary.text, failure->what());
    throw *failure;
  }
  if (status != 0 && status != 200) {
    throw status_error(status, headers, error_body.empty() ? response.body : error_body);
  }
  if (!ok) {
    if (delivered) throw GatewayError::interrupted(summary.text, httplib::to_string(err));
    throw transport_error(err);
  }
  if (!line_buf.empty() && !done) handle_line(line_buf);
  if (!done) {
    if (delivered) throw GatewayError::interrupted(summary.text, "stream ended without [DONE]");
    throw GatewayError::malformed("stream ended without [DONE]");
  }
  if (strip) deliver(strip->finish());
  return summary;
}

StreamSummary Gateway::stream(const ChatRequest& req, const ChunkSink& sink) {
  for (int attempt = 1;; ++attempt) {
    bool delivered = false;
    try {
      auto summary = stream_once(req, sink, delivered);
      summary.attempts = attempt;
      return summary;
    } catch (const GatewayError& e) {
      // Once text reached the sink a retry would duplicate it.
      if (delivered || !e.retryable() || attempt >= cfg_.retry.max_attempts) throw;
      const auto delay = backoff_for(attempt, e);
      if (on_retry_) on_retry_(attempt, delay, e);
      std::this_thread::sleep_for(delay);
    }
  }
}

}  // namespace ctrlgen::llm
