#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ctrlgen/corpus.hpp"
#include "ctrlgen/llm.hpp"
#include "ctrlgen/metrics.hpp"
#include "ctrlgen/stream_parser.hpp"

namespace ctrlgen::service {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 0;  // 0 picks a free port
  /// One journal per session; sessions are not persisted when empty.
  std::filesystem::path sessions_dir;
  std::vector<corpus::ClinicalCase> cases;
  /// Guideline files (style and instructions); all are searched.
  std::vector<std::filesystem::path> guideline_stores;
  ParseMode parse_mode = ParseMode::lenient;
  metrics::TokenizationSpec tokenization;
  std::vector<metrics::PluginSpec> plugins;
  /// Comment frame sent on an idle event stream.
  std::chrono::milliseconds heartbeat{15000};
};

/// HTTP facade over sessions, cases and evaluation.
///
///   POST /sessions                 {case_id, c, g, task, mode, bhc_output?} -> 201
///   GET  /sessions                 all sessions
///   GET  /sessions/{id}            session resource
///   GET  /sessions/{id}/events     server-sent events, id = seq; honours
///                                  Last-Event-ID and ?after=N; ends once the
///                                  session is completed
///   POST /sessions/{id}/action     {type: accept|edit|regenerate, text?}
///   POST /sessions/{id}/resume
///   GET  /sessions/{id}/document   final document (409 until completed)
///   GET  /cases, GET /cases/{id}
///   POST /evaluate                 {pairs: [{hyp, ref}]} -> MetricReport
///
/// Errors are {"error": message} with 400 (bad request), 404 (unknown id) or
/// 409 (action not allowed in the session's status).
class Service {
 public:
  /// Loads the guideline store and recovers journaled sessions.
  Service(ServiceConfig config, llm::ChatClient& client);
  ~Service();

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds and serves on a background thread. Throws Error if the port is
  /// taken.
  void start();
  /// Blocks until stop() is called from another thread.
  void wait();
  /// Stops serving and pauses every generating session; journals keep the
  /// paused state. Idempotent.
  void stop();

  int port() const;
  std::string url() const;
  std::size_t session_count() const;
  /// Journals that could not be recovered, with the reason.
  const std::vector<std::string>& recovery_errors() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace ctrlgen::service
