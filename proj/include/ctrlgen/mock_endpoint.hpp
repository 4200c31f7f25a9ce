#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace ctrlgen::llm {

/// One scripted answer of the mock chat endpoint.
struct MockReply {
  int status = 200;
  std::vector<std::string> chunks;  // concatenated for blocking requests
  std::map<std::string, std::string> headers;
  bool disconnect = false;  // streaming: drop the connection after the chunks
  std::chrono::milliseconds delay{0};        // before the first byte
  std::chrono::milliseconds chunk_delay{0};  // between streamed chunks
  std::optional<std::string> raw_body;       // sent verbatim instead of a chat response
};

struct RecordedRequest {
  nlohmann::json body;
  bool streaming = false;

  /// Content of the last user message.
  std::string user() const;
  /// Content of a trailing assistant message, or "".
  std::string assistant_prefix() const;
};

using Responder = std::function<MockReply(const RecordedRequest& req, std::size_t call_index)>;

/// Local chat-completions server on 127.0.0.1 with an ephemeral port.
/// Counts calls and concurrently open requests.
class MockEndpoint {
 public:
  explicit MockEndpoint(Responder responder);
  ~MockEndpoint();

  MockEndpoint(const MockEndpoint&) = delete;
  MockEndpoint& operator=(const MockEndpoint&) = delete;

  std::string url() const;
  int port() const { return port_; }

  void set_responder(Responder responder);
  std::size_t calls() const;
  int in_flight() const;
  int max_in_flight() const;
  std::vector<RecordedRequest> requests() const;
  void reset_counters();
  void stop();

 private:
  struct Impl;

  MockReply respond(const RecordedRequest& req);
  void enter();
  void leave();

  std::unique_ptr<Impl> impl_;
  int port_ = 0;
  mutable std::mutex mutex_;
  Responder responder_;
  std::size_t calls_ = 0;
  int in_flight_ = 0;
  int max_in_flight_ = 0;
  std::vector<RecordedRequest> requests_;
};

/// Replays `replies` in order, repeating the last one.
Responder scripted(std::vector<MockReply> replies);

/// Splits `text` into chunks of `size` bytes, extended to the end of a
/// UTF-8 sequence when the cut would fall inside one.
std::vector<std::string> chunk_text(const std::string& text, std::size_t size);

/// Continues a fixed control-format document from wherever the request's
/// assistant prefix stands. The prefix is read structurally: if it holds k
/// complete elements and ends in an opening tag, the reply is the text of
/// element k of `document` onwards, so edited element texts in the prefix
/// do not derail the continuation.
Responder document_responder(std::string document, std::size_t chunk_size = 7);

/// Produces the control-format document a session should receive for a user
/// message; used by augmentation_responder for generation requests.
using DocumentSource = std::function<std::string(const std::string& user_message)>;

/// Answers the three augmentation prompts: segmentation requests split the
/// <text> payload into one segment per sentence, style and instruction
/// requests receive fixed texts. Anything else is treated as a generation
/// request and continued from `documents` (if given) like
/// document_responder.
Responder augmentation_responder(DocumentSource documents = nullptr, std::size_t chunk_size = 7);

/// One segment per sentence of `text`, spans copied verbatim.
std::string sentence_segmentation(const std::string& text);

inline constexpr std::string_view kMockStyleText =
    "The tone is formal and neutral. Sentences are short and factual, written in the past tense "
    "and arranged chronologically.";
inline constexpr std::string_view kMockInstructionsText =
    "## Writing Instructions\n\n### Tone\n\nWrite in a formal, neutral register.\n\n"
    "### Structure\n\nUse short chronological paragraphs.";

}  // namespace ctrlgen::llm
