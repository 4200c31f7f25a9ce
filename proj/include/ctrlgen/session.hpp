#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ctrlgen/corpus.hpp"
#include "ctrlgen/io.hpp"
#include "ctrlgen/llm.hpp"
#include "ctrlgen/promptgen.hpp"
#include "ctrlgen/segmentation.hpp"
#include "ctrlgen/stream_parser.hpp"

namespace ctrlgen::genstream {

enum class SessionMode { interactive, autonomous };
enum class SessionStatus { generating, paused, awaiting_user, completed, failed };

std::string_view to_string(SessionMode mode);
std::string_view to_string(SessionStatus status);
SessionMode parse_session_mode(std::string_view text);
SessionStatus parse_session_status(std::string_view text);

/// An action that is not allowed in the session's current status.
class InvalidState : public Error {
 public:
  using Error::Error;
};

struct Element {
  ElementKind kind;
  std::string text;

  bool operator==(const Element&) const = default;
};

struct UserAction {
  enum class Type { accept, edit, regenerate };
  Type type = Type::accept;
  std::string text;  // edit only

  static UserAction accept() { return {Type::accept, {}}; }
  static UserAction edit(std::string text) { return {Type::edit, std::move(text)}; }
  static UserAction regenerate() { return {Type::regenerate, {}}; }
};

std::string_view to_string(UserAction::Type type);
UserAction::Type parse_action_type(std::string_view text);

/// One entry of a session's event log. `type` is an ElementEvent kind
/// ("TopicStarted", ...) or one of "status", "action", "resumed", "error".
struct SessionEvent {
  std::uint64_t seq = 0;
  std::string type;
  nlohmann::json data;
};

nlohmann::json to_json(const SessionEvent& e);

struct SessionSnapshot {
  std::string session_id;
  std::string case_id;
  std::string created_at;
  promptgen::PromptConfig cfg;
  SessionMode mode = SessionMode::interactive;
  SessionStatus status = SessionStatus::generating;
  std::vector<Element> verified;
  std::optional<Element> pending;
  /// The model ended the document after the pending element.
  bool document_complete = false;
  std::optional<std::string> error;
  std::uint64_t last_seq = 0;
  /// Gateway requests this session has open right now.
  int requests_in_flight = 0;
};

nlohmann::json to_json(const SessionSnapshot& s);

struct FinalDocument {
  std::string document;
  seg::Segmentation segmentation;
};

struct SessionOptions {
  ParseMode parse_mode = ParseMode::lenient;
  /// Resume generation right after accept/edit.
  bool auto_resume = true;
  /// Di sessions: the brief hospital course to condition on; defaults to the
  /// case's gold text.
  std::optional<std::string> bhc_output;
  std::optional<guidelines::AuthoringGuideline> guideline;
  /// Append-only event log; nothing is persisted when unset.
  std::optional<std::filesystem::path> journal_path;
};

/// The assistant prefix that continues after `verified`: the elements in the
/// control format followed by the opening tag of `next`.
std::string resume_prefix(const std::vector<Element>& verified, ElementKind next);

/// The kind that follows `verified` in the topic/question/span cycle.
ElementKind next_kind(const std::vector<Element>& verified);

/// One generation session. All mutations (stream events and user actions)
/// are serialised by the session mutex; snapshots and event reads are safe
/// from any thread.
class Session : public std::enable_shared_from_this<Session> {
 public:
  /// Builds the user message for (case, cfg); requires cfg.c == topics.
  static std::shared_ptr<Session> create(std::string session_id, const corpus::ClinicalCase& c,
                                         const promptgen::PromptConfig& cfg, SessionMode mode,
                                         llm::ChatClient& client, SessionOptions options = {});

  /// Rebuilds a session from its journal. A session that was generating
  /// comes back paused with no pending element; resume() continues it.
  static std::shared_ptr<Session> recover(const std::filesystem::path& journal,
                                          llm::ChatClient& client, SessionOptions options = {});

  ~Session();
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  /// Opens the first stream.
  void start();

  /// Requires status paused or awaiting_user.
  void apply(const UserAction& action);

  /// Continues after the verified elements. Requires status paused with no
  /// pending element, or failed.
  void resume();

  /// Stops any stream and leaves the session paused (or as it was, when not
  /// generating). Idempotent.
  void shutdown();

  SessionSnapshot snapshot() const;
  const std::string& user_message() const { return user_message_; }

  /// Events with seq > after, waiting up to `timeout` for at least one.
  std::vector<SessionEvent> events_after(std::uint64_t after,
                                         std::chrono::milliseconds timeout = {}) const;

  /// Waits until `pred(snapshot)` holds; false on timeout.
  bool wait_for(const std::function<bool(const SessionSnapshot&)>& pred,
                std::chrono::milliseconds timeout) const;

  /// Waits until the session leaves `generating`.
  bool wait_idle(std::chrono::milliseconds timeout) const;

  /// Requires status completed and at least one full segment.
  FinalDocument finalize() const;

 private:
  Session(std::string id, std::string case_id, promptgen::PromptConfig cfg, SessionMode mode,
          std::string user_message, llm::ChatClient& client, SessionOptions options);

  void launch(std::optional<std::string> prefix);                  // mutex held
  void run_stream(std::uint64_t generation, llm::ChatRequest req);  // worker thread
  bool on_chunk(std::uint64_t generation, std::string_view chunk);
  void handle(std::uint64_t generation, const std::vector<ElementEvent>& events);
  void end_stream(std::uint64_t generation, std::optional<std::string> error, bool cancelled);
  void set_status(SessionStatus status);                           // mutex held
  void log(std::string type, nlohmann::json data);                 // mutex held
  void journal_snapshot();                                          // mutex held
  SessionSnapshot snapshot_locked() const;
  void join_worker();

  const std::string id_;
  const std::string case_id_;
  const promptgen::PromptConfig cfg_;
  const SessionMode mode_;
  const std::string user_message_;
  llm::ChatClient& client_;
  const SessionOptions options_;
  std::string created_at_;

  mutable std::mutex mutex_;
  mutable std::condition_variable changed_;
  SessionStatus status_ = SessionStatus::paused;
  std::vector<Element> verified_;
  std::optional<Element> pending_;
  bool document_complete_ = false;
  std::optional<std::string> error_;
  std::vector<SessionEvent> events_;
  std::uint64_t seq_ = 0;

  // stream state, valid for `generation_`
  std::uint64_t generation_ = 0;
  std::optional<StreamParser> parser_;
  bool stop_requested_ = false;   // sink returns false from now on
  bool span_lookahead_ = false;   // interactive: reading past SpanDone
  std::optional<std::string> stream_error_;
  int in_flight_ = 0;
  std::thread worker_;
  std::unique_ptr<io::JsonlWriter> journal_;
};

}  // namespace ctrlgen::genstream
