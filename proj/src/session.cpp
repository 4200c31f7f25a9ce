#include "ctrlgen/session.hpp"

#include <iostream>

namespace ctrlgen::genstream {

namespace {

using json = nlohmann::json;

constexpr std::string_view kControlTags[] = {"<topic>", "</topic>", "<question>", "</question>",
                                             "<span>", "</span>", "<split-text>", "</split-text>"};

ParserState inside(ElementKind kind) {
  switch (kind) {
    case ElementKind::topic: return ParserState::InTopic;
    case ElementKind::question: return ParserState::InQuestion;
    case ElementKind::span: return ParserState::InSpan;
  }
  return ParserState::InTopic;
}

json element_json(const Element& e) {
  return {{"kind", std::string(to_string(e.kind))}, {"text", e.text}};
}

Element element_from_json(const json& j) {
  return {parse_element_kind(j.at("kind").get<std::string>()), j.at("text").get<std::string>()};
}

}  // namespace

std::string_view to_string(SessionMode mode) {
  return mode == SessionMode::interactive ? "interactive" : "autonomous";
}

std::string_view to_string(SessionStatus status) {
  switch (status) {
    case SessionStatus::generating: return "generating";
    case SessionStatus::paused: return "paused";
    case SessionStatus::awaiting_user: return "awaiting_user";
    case SessionStatus::completed: return "completed";
    case SessionStatus::failed: return "failed";
  }
  return "?";
}

SessionMode parse_session_mode(std::string_view text) {
  if (text == "interactive") return SessionMode::interactive;
  if (text == "autonomous") return SessionMode::autonomous;
  throw Error("unknown session mode '" + std::string(text) + "' (expected interactive|autonomous)");
}

SessionStatus parse_session_status(std::string_view text) {
  for (auto s : {SessionStatus::generating, SessionStatus::paused, SessionStatus::awaiting_user,
                 SessionStatus::completed, SessionStatus::failed}) {
    if (to_string(s) == text) return s;
  }
  throw Error("unknown session status '" + std::string(text) + "'");
}

std::string_view to_string(UserAction::Type type) {
  switch (type) {
    case UserAction::Type::accept: return "accept";
    case UserAction::Type::edit: return "edit";
    case UserAction::Type::regenerate: return "regenerate";
  }
  return "?";
}

UserAction::Type parse_action_type(std::string_view text) {
  if (text == "accept") return UserAction::Type::accept;
  if (text == "edit") return UserAction::Type::edit;
  if (text == "regenerate") return UserAction::Type::regenerate;
  throw Error("unknown action '" + std::string(text) + "' (expected accept|edit|regenerate)");
}

json to_json(const SessionEvent& e) { return {{"seq", e.seq}, {"type", e.type}, {"data", e.data}}; }

json to_json(const SessionSnapshot& s) {
  json verified = json::array();
  for (const auto& e : s.verified) verified.push_back(element_json(e));
  return {{"session_id", s.session_id},
          {"case_id", s.case_id},
          {"created_at", s.created_at},
          {"c", std::string(promptgen::to_string(s.cfg.c))},
          {"g", std::string(promptgen::to_string(s.cfg.g))},
          {"task", std::string(to_string(s.cfg.task))},
          {"mode", std::string(to_string(s.mode))},
          {"status", std::string(to_string(s.status))},
          {"verified", verified},
          {"verified_count", s.verified.size()},
          {"pending", s.pending ? element_json(*s.pending) : json(nullptr)},
          {"document_complete", s.document_complete},
          {"error", s.error ? json(*s.error) : json(nullptr)},
          {"last_seq", s.last_seq},
          {"requests_in_flight", s.requests_in_flight}};
}

ElementKind next_kind(const std::vector<Element>& verified) {
  return verified.empty() ? ElementKind::topic : next_in_cycle(verified.back().kind);
}

std::string resume_prefix(const std::vector<Element>& verified, ElementKind next) {
  std::string out;
  for (const auto& e : verified) {
    out += opening_tag(e.kind) + e.text + closing_tag(e.kind);
    out += e.kind == ElementKind::span ? "\n\n" : "\n";
  }
  return out + opening_tag(next);
}

// ---------------------------------------------------------------------------

Session::Session(std::string id, std::string case_id, promptgen::PromptConfig cfg, SessionMode mode,
                 std::string user_message, llm::ChatClient& client, SessionOptions options)
    : id_(std::move(id)),
      case_id_(std::move(case_id)),
      cfg_(cfg),
      mode_(mode),
      user_message_(std::move(user_message)),
      client_(client),
      options_(std::move(options)),
      created_at_(utc_timestamp()) {}

std::shared_ptr<Session> Session::create(std::string session_id, const corpus::ClinicalCase& c,
                                         const promptgen::PromptConfig& cfg, SessionMode mode,
                                         llm::ChatClient& client, SessionOptions options) {
  if (cfg.c != promptgen::Control::topics) {
    throw Error("unsupported mode: sessions need structured output (c=topics), got c=" +
                std::string(promptgen::to_string(cfg.c)));
  }
  std::optional<std::string> bhc = options.bhc_output;
  if (cfg.task == Task::di && !bhc) bhc = c.target_bhc;
  auto user = promptgen::build_user_message(c, cfg, options.guideline, bhc);
  std::shared_ptr<Session> s(
      new Session(std::move(session_id), c.case_id, cfg, mode, std::move(user), client, options));
  if (s->options_.journal_path) {
    s->journal_ = std::make_unique<io::JsonlWriter>(*s->options_.journal_path,
                                                    io::JsonlWriter::Mode::truncate);
    s->journal_->write({{"record", "created"},
                        {"session_id", s->id_},
                        {"case_id", s->case_id_},
                        {"created_at", s->created_at_},
                        {"c", std::string(promptgen::to_string(cfg.c))},
                        {"g", std::string(promptgen::to_string(cfg.g))},
                        {"task", std::string(to_string(cfg.task))},
                        {"mode", std::string(to_string(mode))},
                        {"user_message", s->user_message_}});
  }
  return s;
}

std::shared_ptr<Session> Session::recover(const std::filesystem::path& journal,
                                          llm::ChatClient& client, SessionOptions options) {
  const auto records = io::read_jsonl(journal);
  if (records.empty() || records[0].value("record", "") != "created") {
    throw Error("journal " + journal.string() + " does not start with a created record");
  }
  const auto& h = records[0];
  promptgen::PromptConfig cfg{promptgen::parse_control(h.at("c").get<std::string>()),
                              promptgen::parse_guideline_mode(h.at("g").get<std::string>()),
                              parse_task(h.at("task").get<std::string>())};
  options.journal_path = journal;
  std::shared_ptr<Session> s(new Session(h.at("session_id").get<std::string>(),
                                         h.at("case_id").get<std::string>(), cfg,
                                         parse_session_mode(h.at("mode").get<std::string>()),
                                         h.at("user_message").get<std::string>(), client, options));
  s->created_at_ = h.at("created_at").get<std::string>();
  for (std::size_t i = 1; i < records.size(); ++i) {
    const auto& r = records[i];
    const auto kind = r.value("record", "");
    if (kind == "event") {
      s->events_.push_back({r.at("seq").get<std::uint64_t>(), r.at("type").get<std::string>(),
                            r.at("data")});
      s->seq_ = s->events_.back().seq;
    } else if (kind == "snapshot") {
      s->status_ = parse_session_status(r.at("status").get<std::string>());
      s->verified_.clear();
      for (const auto& e : r.at("verified")) s->verified_.push_back(element_from_json(e));
      s->pending_.reset();
      if (!r.at("pending").is_null()) s->pending_ = element_from_json(r.at("pending"));
      s->document_complete_ = r.value("document_complete", false);
      s->error_.reset();
      if (r.contains("error") && !r.at("error").is_null()) s->error_ = r.at("error").get<std::string>();
    }
  }
  s->journal_ = std::make_unique<io::JsonlWriter>(journal, io::JsonlWriter::Mode::append);
  std::lock_guard lock(s->mutex_);
  if (s->status_ == SessionStatus::generating) {
    // whatever was streaming is lost; a pending element from a span
    // lookahead is complete and kept
    s->set_status(SessionStatus::paused);
  }
  return s;
}

Session::~Session() {
  shutdown();
  join_worker();
}

void Session::join_worker() {
  if (worker_.joinable() && worker_.get_id() != std::this_thread::get_id()) worker_.join();
}

void Session::start() {
  std::lock_guard lock(mutex_);
  if (generation_ != 0 || !verified_.empty() || status_ != SessionStatus::paused || pending_) {
    throw InvalidState("session " + id_ + " has already started");
  }
  launch(std::nullopt);
}

void Session::launch(std::optional<std::string> prefix) {
  join_worker();
  ++generation_;
  if (prefix) {
    parser_ = StreamParser::resume_at(inside(next_kind(verified_)), options_.parse_mode,
                                      prefix->size());
  } else {
    parser_.emplace(options_.parse_mode);
  }
  stop_requested_ = false;
  span_lookahead_ = false;
  stream_error_.reset();
  error_.reset();
  ++in_flight_;
  if (prefix) log("resumed", {{"prefix", *prefix}});
  status_ = SessionStatus::generating;
  journal_snapshot();
  changed_.notify_all();

  llm::ChatRequest req;
  req.user = user_message_;
  if (prefix) req.assistant_prefix = *prefix;
  worker_ = std::thread(&Session::run_stream, this, generation_, std::move(req));
}

void Session::run_stream(std::uint64_t generation, llm::ChatRequest req) {
  std::optional<std::string> error;
  bool cancelled = false;
  try {
    const auto summary = client_.stream(
        req, [this, generation](std::string_view chunk) { return on_chunk(generation, chunk); });
    cancelled = summary.cancelled;
  } catch (const std::exception& e) {
    error = e.what();
  }
  end_stream(generation, std::move(error), cancelled);
}

bool Session::on_chunk(std::uint64_t generation, std::string_view chunk) {
  std::lock_guard lock(mutex_);
  if (generation != generation_ || stop_requested_) return false;
  try {
    handle(generation, parser_->feed(chunk));
  } catch (const ParseError& e) {
    stream_error_ = e.what();
    stop_requested_ = true;
  }
  return !stop_requested_;
}

void Session::handle(std::uint64_t, const std::vector<ElementEvent>& events) {
  for (const auto& ev : events) {
    if (stop_requested_) break;
    if (span_lookahead_ && ev.kind != EventKind::DocumentDone) {
      // the model goes on to another segment: pause before it
      if (ev.kind == EventKind::TopicStarted) stop_requested_ = true;
      continue;
    }
    json data = {{"payload", ev.payload}, {"offset", ev.offset}};
    if (ev.kind != EventKind::DocumentDone) {
      data["element"] = std::string(to_string(element_of(ev.kind)));
    }
    log(std::string(to_string(ev.kind)), std::move(data));
    if (!is_done_event(ev.kind)) continue;
    Element el{element_of(ev.kind), ev.payload};
    if (mode_ == SessionMode::autonomous) {
      verified_.push_back(std::move(el));
      continue;
    }
    const bool is_span = el.kind == ElementKind::span;
    pending_ = std::move(el);
    if (is_span) {
      span_lookahead_ = true;
    } else {
      stop_requested_ = true;
    }
  }
}

void Session::end_stream(std::uint64_t generation, std::optional<std::string> error,
                         bool cancelled) {
  std::lock_guard lock(mutex_);
  --in_flight_;
  if (generation != generation_) {
    changed_.notify_all();
    return;
  }
  if (!error && stream_error_) error = stream_error_;

  if (!error && !cancelled && !stop_requested_) {
    try {
      handle(generation, parser_->finish());
    } catch (const ParseError& e) {
      error = e.what();
    }
    if (!error) {
      if (mode_ == SessionMode::interactive && pending_) {
        document_complete_ = pending_->kind == ElementKind::span;
        set_status(document_complete_ ? SessionStatus::awaiting_user : SessionStatus::paused);
      } else if (!verified_.empty() && next_kind(verified_) == ElementKind::topic) {
        set_status(SessionStatus::completed);
      } else {
        error = verified_.empty() ? "the model produced no complete segment"
                                  : "the stream ended inside a segment";
      }
      if (!error) return;
    }
  }

  if (error) {
    log("error", {{"message", *error}});
    if (mode_ == SessionMode::interactive && pending_) {
      // the pending element is complete; only what followed it was lost
      set_status(SessionStatus::paused);
    } else {
      error_ = *error;
      set_status(SessionStatus::failed);
    }
    return;
  }
  set_status(SessionStatus::paused);  // cancelled at an element boundary
}

void Session::apply(const UserAction& action) {
  std::lock_guard lock(mutex_);
  if (status_ != SessionStatus::paused && status_ != SessionStatus::awaiting_user) {
    throw InvalidState("cannot " + std::string(to_string(action.type)) + " while " +
                       std::string(to_string(status_)));
  }
  if (!pending_) throw InvalidState("no pending element to " + std::string(to_string(action.type)));

  if (action.type == UserAction::Type::edit) {
    if (is_blank(action.text)) throw Error("edited text must not be blank");
    for (const auto tag : kControlTags) {
      if (action.text.find(tag) != std::string::npos) {
        throw Error("edited text must not contain the control tag " + std::string(tag));
      }
    }
  }

  json record = {{"type", std::string(to_string(action.type))},
                 {"element", std::string(to_string(pending_->kind))},
                 {"before", pending_->text}};
  if (action.type == UserAction::Type::edit) record["text"] = action.text;
  log("action", std::move(record));

  if (action.type == UserAction::Type::regenerate) {
    const auto kind = pending_->kind;
    pending_.reset();
    document_complete_ = false;
    launch(resume_prefix(verified_, kind));
    return;
  }

  Element el = *pending_;
  if (action.type == UserAction::Type::edit) el.text = action.text;
  verified_.push_back(std::move(el));
  pending_.reset();
  if (document_complete_) {
    document_complete_ = false;
    set_status(SessionStatus::completed);
  } else if (options_.auto_resume) {
    launch(resume_prefix(verified_, next_kind(verified_)));
  } else {
    set_status(SessionStatus::paused);
  }
}

void Session::resume() {
  std::lock_guard lock(mutex_);
  const bool resumable = (status_ == SessionStatus::paused && !pending_) ||
                         status_ == SessionStatus::failed;
  if (!resumable) {
    throw InvalidState("cannot resume while " + std::string(to_string(status_)) +
                       (pending_ ? " with a pending element" : ""));
  }
  if (verified_.empty()) {
    launch(std::nullopt);
  } else {
    launch(resume_prefix(verified_, next_kind(verified_)));
  }
}

void Session::shutdown() {
  {
    std::lock_guard lock(mutex_);
    if (status_ != SessionStatus::generating) return;
    ++generation_;
    stop_requested_ = true;
  }
  join_worker();
  std::lock_guard lock(mutex_);
  if (status_ == SessionStatus::generating) set_status(SessionStatus::paused);
}

SessionSnapshot Session::snapshot() const {
  std::lock_guard lock(mutex_);
  return snapshot_locked();
}

SessionSnapshot Session::snapshot_locked() const {
  SessionSnapshot s;
  s.session_id = id_;
  s.case_id = case_id_;
  s.created_at = created_at_;
  s.cfg = cfg_;
  s.mode = mode_;
  s.status = status_;
  s.verified = verified_;
  s.pending = pending_;
  s.document_complete = document_complete_;
  s.error = error_;
  s.last_seq = seq_;
  s.requests_in_flight = in_flight_;
  return s;
}

std::vector<SessionEvent> Session::events_after(std::uint64_t after,
                                                std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mutex_);
  if (timeout.count() > 0) changed_.wait_for(lock, timeout, [&] { return seq_ > after; });
  std::vector<SessionEvent> out;
  for (const auto& e : events_) {
    if (e.seq > after) out.push_back(e);
  }
  return out;
}

bool Session::wait_for(const std::function<bool(const SessionSnapshot&)>& pred,
                       std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mutex_);
  return changed_.wait_for(lock, timeout, [&] { return pred(snapshot_locked()); });
}

bool Session::wait_idle(std::chrono::milliseconds timeout) const {
  return wait_for([](const SessionSnapshot& s) { return s.status != SessionStatus::generating; },
                  timeout);
}

FinalDocument Session::finalize() const {
  std::lock_guard lock(mutex_);
  if (status_ != SessionStatus::completed) {
    throw InvalidState("cannot finalize while " + std::string(to_string(status_)));
  }
  if (verified_.empty() || verified_.size() % 3 != 0) {
    throw Error("session " + id_ + " has no complete segments to finalize");
  }
  FinalDocument out;
  out.segmentation.target_id = case_id_;
  out.segmentation.task = cfg_.task;
  out.segmentation.status = seg::Status::raw;
  for (std::size_t i = 0; i < verified_.size(); i += 3) {
    seg::Segment s;
    s.heading = verified_[i].text;
    s.question = verified_[i + 1].text;
    s.span = verified_[i + 2].text;
    out.segmentation.segments.push_back(std::move(s));
  }
  out.document = seg::join_spans(out.segmentation);
  return out;
}

void Session::set_status(SessionStatus status) {
  status_ = status;
  json data = {{"status", std::string(to_string(status))},
               {"verified_count", verified_.size()},
               {"document_complete", document_complete_}};
  if (pending_) data["pending"] = element_json(*pending_);
  if (error_) data["error"] = *error_;
  log("status", std::move(data));
  journal_snapshot();
}

void Session::log(std::string type, json data) {
  SessionEvent e{++seq_, std::move(type), std::move(data)};
  if (journal_) {
    try {
      journal_->write({{"record", "event"}, {"seq", e.seq}, {"type", e.type}, {"data", e.data}});
    } catch (const std::exception& ex) {
      std::cerr << "session " << id_ << ": journal write failed: " << ex.what() << "\n";
    }
  }
  events_.push_back(std::move(e));
  changed_.notify_all();
}

void Session::journal_snapshot() {
  if (!journal_) return;
  json verified = json::array();
  for (const auto& e : verified_) verified.push_back(element_json(e));
  try {
    journal_->write({{"record", "snapshot"},
                     {"status", std::string(to_string(status_))},
                     {"verified", verified},
                     {"pending", pending_ ? element_json(*pending_) : json(nullptr)},
                     {"document_complete", document_complete_},
                     {"error", error_ ? json(*error_) : json(nullptr)}});
  } catch (const std::exception& ex) {
    std::cerr << "session " << id_ << ": journal write failed: " << ex.what() << "\n";
  }
}

}  // namespace ctrlgen::genstream
