#include "ctrlgen/service.hpp"

#include <httplib.h>

#include <atomic>
#include <condition_variable>
#include <iostream>
#include <map>
#include <mutex>
#include <random>
#include <thread>

#include "ctrlgen/guidelines.hpp"
#include "ctrlgen/session.hpp"

namespace ctrlgen::service {

namespace {

using json = nlohmann::json;
using genstream::Session;

class NotFound : public Error {
 public:
  using Error::Error;
};

std::string dump(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace); }

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(dump(body), "application/json");
}

template <class F>
void guarded(httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const NotFound& e) {
    send_json(res, 404, {{"error", e.what()}});
  } catch (const genstream::InvalidState& e) {
    send_json(res, 409, {{"error", e.what()}});
  } catch (const json::exception& e) {
    send_json(res, 400, {{"error", std::string("bad request body: ") + e.what()}});
  } catch (const Error& e) {
    send_json(res, 400, {{"error", e.what()}});
  } catch (const std::exception& e) {
    send_json(res, 500, {{"error", e.what()}});
  }
}

json parse_body(const httplib::Request& req) {
  if (is_blank(req.body)) return json::object();
  auto body = json::parse(req.body);
  if (!body.is_object()) throw Error("request body must be a JSON object");
  return body;
}

std::string new_session_id() {
  static std::mutex m;
  static std::mt19937_64 rng{std::random_device{}()};
  std::lock_guard lock(m);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(rng()));
  return std::string("s-") + buf;
}

json resource(const genstream::SessionSnapshot& s) {
  auto j = genstream::to_json(s);
  const auto base = "/sessions/" + s.session_id;
  j["links"] = {{"self", base},
                {"events", base + "/events"},
                {"action", base + "/action"},
                {"resume", base + "/resume"},
                {"document", base + "/document"}};
  return j;
}

std::string sse_frame(const genstream::SessionEvent& e) {
  return "id: " + std::to_string(e.seq) + "\nevent: " + e.type + "\ndata: " +
         dump(genstream::to_json(e)) + "\n\n";
}

}  // namespace

struct Service::Impl {
  ServiceConfig config;
  llm::ChatClient& client;
  std::vector<guidelines::GuidelineStore> guides;
  std::map<std::string, const corpus::ClinicalCase*> case_index;
  std::vector<std::string> recovery_errors;

  mutable std::mutex mutex;
  std::map<std::string, std::shared_ptr<Session>> sessions;

  httplib::Server server;
  std::thread thread;
  std::atomic<bool> stopping{false};
  std::mutex stopped_mutex;
  std::condition_variable stopped_cv;
  bool stopped = false;
  bool started = false;
  int port = 0;

  Impl(ServiceConfig cfg, llm::ChatClient& c) : config(std::move(cfg)), client(c) {}

  std::shared_ptr<Session> session(const std::string& id) const {
    std::lock_guard lock(mutex);
    const auto it = sessions.find(id);
    if (it == sessions.end()) throw NotFound("unknown session " + id);
    return it->second;
  }

  const corpus::ClinicalCase& find_case(const std::string& id) const {
    const auto it = case_index.find(id);
    if (it == case_index.end()) throw NotFound("unknown case " + id);
    return *it->second;
  }

  void recover() {
    if (config.sessions_dir.empty()) return;
    std::filesystem::create_directories(config.sessions_dir);
    std::vector<std::filesystem::path> journals;
    for (const auto& entry : std::filesystem::directory_iterator(config.sessions_dir)) {
      if (entry.path().extension() == ".jsonl") journals.push_back(entry.path());
    }
    std::sort(journals.begin(), journals.end());
    for (const auto& path : journals) {
      try {
        genstream::SessionOptions opts;
        opts.parse_mode = config.parse_mode;
        auto s = Session::recover(path, client, opts);
        sessions[s->snapshot().session_id] = std::move(s);
      } catch (const std::exception& e) {
        recovery_errors.push_back(path.string() + ": " + e.what());
        std::cerr << "service: cannot recover " << path << ": " << e.what() << "\n";
      }
    }
  }

  void create_session(const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req);
    if (!body.contains("case_id")) throw Error("case_id is required");
    const auto& c = find_case(body.at("case_id").get<std::string>());
    promptgen::PromptConfig cfg{
        promptgen::parse_control(body.value("c", std::string("topics"))),
        promptgen::parse_guideline_mode(body.value("g", std::string("none"))),
        parse_task(body.value("task", std::string("bhc")))};
    const auto mode = genstream::parse_session_mode(body.value("mode", std::string("interactive")));

    genstream::SessionOptions opts;
    opts.parse_mode = config.parse_mode;
    if (body.contains("bhc_output")) opts.bhc_output = body.at("bhc_output").get<std::string>();
    if (cfg.g != promptgen::GuidelineMode::none) {
      const auto kind = promptgen::kind_for(cfg.g);
      const guidelines::AuthoringGuideline* g = nullptr;
      for (const auto& store : guides) {
        if (!g) g = store.find(c.case_id, cfg.task, kind);
      }
      if (!g) {
        throw Error("no " + std::string(guidelines::to_string(kind)) + " guideline for case " +
                    c.case_id + " task " + std::string(to_string(cfg.task)));
      }
      opts.guideline = *g;
    }
    const auto id = new_session_id();
    if (!config.sessions_dir.empty()) opts.journal_path = config.sessions_dir / (id + ".jsonl");

    auto s = Session::create(id, c, cfg, mode, client, opts);
    {
      std::lock_guard lock(mutex);
      if (stopping) throw Error("service is shutting down");
      sessions[id] = s;
    }
    s->start();
    res.set_header("Location", "/sessions/" + id);
    send_json(res, 201, resource(s->snapshot()));
  }

  void stream_events(const httplib::Request& req, httplib::Response& res) {
    auto s = session(req.matches[1]);
    std::uint64_t after = 0;
    if (req.has_header("Last-Event-ID")) {
      after = std::stoull(req.get_header_value("Last-Event-ID"));
    } else if (req.has_param("after")) {
      after = std::stoull(req.get_param_value("after"));
    }
    auto last = std::make_shared<std::uint64_t>(after);
    auto idle_since = std::make_shared<std::chrono::steady_clock::time_point>(
        std::chrono::steady_clock::now());
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        "text/event-stream", [this, s, last, idle_since](size_t, httplib::DataSink& sink) {
          if (stopping) {
            sink.done();
            return true;
          }
          const auto events = s->events_after(*last, std::chrono::milliseconds(250));
          if (!sink.is_writable()) return false;
          for (const auto& e : events) {
            const auto frame = sse_frame(e);
            if (!sink.write(frame.data(), frame.size())) return false;
            *last = e.seq;
          }
          const auto now = std::chrono::steady_clock::now();
          if (!events.empty()) {
            *idle_since = now;
          } else if (now - *idle_since >= config.heartbeat) {
            const std::string beat = ": keep-alive\n\n";
            if (!sink.write(beat.data(), beat.size())) return false;
            *idle_since = now;
          }
          const auto snap = s->snapshot();
          if (snap.status == genstream::SessionStatus::completed && *last >= snap.last_seq) {
            sink.done();
          }
          return true;
        });
  }

  void routes() {
    server.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { create_session(req, res); });
    });
    server.Get("/sessions", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] {
        json list = json::array();
        std::lock_guard lock(mutex);
        for (const auto& [id, s] : sessions) list.push_back(resource(s->snapshot()));
        send_json(res, 200, {{"sessions", list}});
      });
    });
    server.Get(R"(/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { send_json(res, 200, resource(session(req.matches[1])->snapshot())); });
    });
    server.Get(R"(/sessions/([^/]+)/events)",
               [this](const httplib::Request& req, httplib::Response& res) {
                 guarded(res, [&] { stream_events(req, res); });
               });
    server.Post(R"(/sessions/([^/]+)/action)",
                [this](const httplib::Request& req, httplib::Response& res) {
                  guarded(res, [&] {
                    auto s = session(req.matches[1]);
                    const auto body = parse_body(req);
                    if (!body.contains("type")) throw Error("action type is required");
                    genstream::UserAction action;
                    action.type = genstream::parse_action_type(body.at("type").get<std::string>());
                    if (action.type == genstream::UserAction::Type::edit) {
                      if (!body.contains("text")) throw Error("edit needs text");
                      action.text = body.at("text").get<std::string>();
                    }
                    s->apply(action);
                    send_json(res, 200, resource(s->snapshot()));
                  });
                });
    server.Post(R"(/sessions/([^/]+)/resume)",
                [this](const httplib::Request& req, httplib::Response& res) {
                  guarded(res, [&] {
                    auto s = session(req.matches[1]);
                    s->resume();
                    send_json(res, 200, resource(s->snapshot()));
                  });
                });
    server.Get(R"(/sessions/([^/]+)/document)",
               [this](const httplib::Request& req, httplib::Response& res) {
                 guarded(res, [&] {
                   const auto doc = session(req.matches[1])->finalize();
                   send_json(res, 200,
                             {{"document", doc.document},
                              {"segmentation", seg::to_json(doc.segmentation)},
                              {"xml", seg::serialize_xml(doc.segmentation)}});
                 });
               });
    server.Get("/cases", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] {
        json list = json::array();
        for (const auto& c : config.cases) {
          list.push_back({{"case_id", c.case_id},
                          {"radiology_reports", c.radiology_reports.size()},
                          {"chief_complaint", c.chief_complaint ? json(*c.chief_complaint)
                                                                : json(nullptr)}});
        }
        send_json(res, 200, {{"cases", list}});
      });
    });
    server.Get(R"(/cases/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { send_json(res, 200, corpus::to_json(find_case(req.matches[1]))); });
    });
    server.Post("/evaluate", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = parse_body(req);
        if (!body.contains("pairs") || !body.at("pairs").is_array()) {
          throw Error("pairs must be an array of {hyp, ref}");
        }
        std::vector<metrics::Pair> pairs;
        for (const auto& p : body.at("pairs")) {
          pairs.push_back({p.at("hyp").get<std::string>(), p.at("ref").get<std::string>()});
        }
        if (pairs.empty()) throw Error("pairs must not be empty");
        send_json(res, 200,
                  metrics::to_json(metrics::evaluate(pairs, config.tokenization, config.plugins)));
      });
    });
  }
};

Service::Service(ServiceConfig config, llm::ChatClient& client)
    : impl_(std::make_unique<Impl>(std::move(config), client)) {
  for (const auto& c : impl_->config.cases) impl_->case_index[c.case_id] = &c;
  for (const auto& path : impl_->config.guideline_stores) {
    impl_->guides.push_back(guidelines::GuidelineStore::load(path));
  }
  impl_->recover();
  // httplib's default sets SO_REUSEPORT, which lets a second server share
  // the port silently
  impl_->server.set_socket_options([](socket_t sock) {
    int yes = 1;
    ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
  });
  impl_->routes();
}

Service::~Service() { stop(); }

void Service::start() {
  auto& im = *impl_;
  if (im.started) return;
  if (im.config.port == 0) {
    im.port = im.server.bind_to_any_port(im.config.host);
    if (im.port <= 0) throw Error("cannot bind " + im.config.host);
  } else {
    if (!im.server.bind_to_port(im.config.host, im.config.port)) {
      throw Error("cannot bind " + im.config.host + ":" + std::to_string(im.config.port) +
                  " (port busy?)");
    }
    im.port = im.config.port;
  }
  im.started = true;
  im.thread = std::thread([&im] { im.server.listen_after_bind(); });
  im.server.wait_until_ready();
}

void Service::wait() {
  std::unique_lock lock(impl_->stopped_mutex);
  impl_->stopped_cv.wait(lock, [this] { return impl_->stopped; });
}

void Service::stop() {
  auto& im = *impl_;
  if (im.stopping.exchange(true)) return;
  im.server.stop();
  if (im.thread.joinable()) im.thread.join();
  {
    std::lock_guard lock(im.mutex);
    for (auto& [id, s] : im.sessions) s->shutdown();
  }
  std::lock_guard lock(im.stopped_mutex);
  im.stopped = true;
  im.stopped_cv.notify_all();
}

int Service::port() const { return impl_->port; }
std::string Service::url() const {
  return "http://" + impl_->config.host + ":" + std::to_string(impl_->port);
}

std::size_t Service::session_count() const {
  std::lock_guard lock(impl_->mutex);
  return impl_->sessions.size();
}

const std::vector<std::string>& Service::recovery_errors() const { return impl_->recovery_errors; }

}  // namespace ctrlgen::service
