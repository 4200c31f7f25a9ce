#include "ctrlgen/cli.hpp"

#include <CLI11.hpp>
#include <signal.h>

#include <algorithm>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <iostream>

#include "ctrlgen/augment.hpp"
#include "ctrlgen/corpus.hpp"
#include "ctrlgen/io.hpp"
#include "ctrlgen/llm.hpp"
#include "ctrlgen/metrics.hpp"
#include "ctrlgen/mock_endpoint.hpp"
#include "ctrlgen/promptgen.hpp"
#include "ctrlgen/service.hpp"
#include "ctrlgen/session.hpp"

namespace ctrlgen::cli {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

class UsageError : public Error {
 public:
  using Error::Error;
};

enum class Type { text, integer, flag, list };

/// One flag that overrides one config key.
struct Binding {
  CLI::Option* option = nullptr;
  json::json_pointer key;
  Type type = Type::text;
  std::string text;
  std::vector<std::string> items;
  bool on = false;
};

struct Parser {
  std::deque<Binding> bindings;
  std::map<const CLI::App*, std::vector<Binding*>> by_app;
  std::map<const CLI::App*, std::string> config_files;

  void bind(CLI::App* app, const std::string& flag, const std::string& key, Type type,
            const std::string& help) {
    auto& b = bindings.emplace_back();
    b.key = json::json_pointer(key);
    b.type = type;
    switch (type) {
      case Type::flag: b.option = app->add_flag(flag, b.on, help); break;
      case Type::list: b.option = app->add_option(flag, b.items, help)->delimiter(','); break;
      default: b.option = app->add_option(flag, b.text, help); break;
    }
    by_app[app].push_back(&b);
  }

  /// Options every subcommand accepts.
  void common(CLI::App* app) {
    app->add_option("--config", config_files[app], "JSON config file; flags take precedence");
    bind(app, "--endpoint", "/gateway/endpoint_url", Type::text, "chat-completions base URL");
    bind(app, "--model", "/gateway/model_id", Type::text, "model id sent to the endpoint");
  }
};

void apply(const Binding& b, json& cfg) {
  if (b.option->count() == 0) return;
  switch (b.type) {
    case Type::flag: cfg[b.key] = b.on; break;
    case Type::list: cfg[b.key] = b.items; break;
    case Type::integer:
      try {
        std::size_t used = 0;
        const long long v = std::stoll(b.text, &used);
        if (used != b.text.size()) throw std::invalid_argument(b.text);
        cfg[b.key] = v;
      } catch (const std::exception&) {
        throw UsageError(b.option->get_name() + " expects an integer, got '" + b.text + "'");
      }
      break;
    case Type::text: cfg[b.key] = b.text; break;
  }
}

/// "/eval/hyp" -> "eval.hyp"
std::string dotted(const std::string& key) {
  std::string out = key.substr(1);
  std::replace(out.begin(), out.end(), '/', '.');
  return out;
}

std::string text_at(const json& cfg, const std::string& key, const std::string& flag) {
  const json::json_pointer ptr(key);
  if (!cfg.contains(ptr) || cfg[ptr].is_null()) {
    throw UsageError("missing " + flag + " (or " + dotted(key) + " in the config file)");
  }
  if (!cfg[ptr].is_string()) throw UsageError("config key " + dotted(key) + " must be a string");
  return cfg[ptr].get<std::string>();
}

std::optional<std::string> optional_text(const json& cfg, const std::string& key) {
  const json::json_pointer ptr(key);
  if (!cfg.contains(ptr) || cfg[ptr].is_null()) return std::nullopt;
  return cfg[ptr].get<std::string>();
}

template <class F>
auto usage_checked(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const UsageError&) {
    throw;
  } catch (const json::exception& e) {
    throw UsageError(std::string("invalid config value: ") + e.what());
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

llm::GatewayConfig gateway_of(const json& cfg) {
  auto g = usage_checked([&] { return llm::gateway_config_from_json(cfg.at("gateway")); });
  g.validate();
  return g;
}

json echo(json cfg) {
  auto& key = cfg["gateway"]["api_key"];
  if (key.is_string() && !key.get<std::string>().empty()) key = "***";
  return cfg;
}

std::vector<corpus::ClinicalCase> load_cases(const json& cfg) {
  const auto path = text_at(cfg, "/corpus/cases", "--cases");
  if (!fs::exists(path)) throw Error("case file not found: " + path + " (run ingest first)");
  return corpus::read_cases(path);
}

/// One text per line, or for .jsonl files one JSON string or {"text": ...}
/// object per line.
std::vector<std::string> read_texts(const fs::path& path) {
  if (!fs::exists(path)) throw Error("input file not found: " + path.string());
  std::vector<std::string> out;
  if (path.extension() == ".jsonl") {
    for (const auto& r : io::read_jsonl(path)) {
      if (r.is_string()) {
        out.push_back(r.get<std::string>());
      } else if (r.is_object() && r.contains("text") && r["text"].is_string()) {
        out.push_back(r["text"].get<std::string>());
      } else {
        throw Error(path.string() + ": each line must be a JSON string or an object with \"text\"");
      }
    }
    return out;
  }
  const auto text = io::read_file(path);
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    auto line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(std::move(line));
    start = end + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// commands; each returns the "result" object

json cmd_ingest(json& cfg) {
  const auto summaries = text_at(cfg, "/corpus/summaries", "--summaries");
  const auto reports = text_at(cfg, "/corpus/reports", "--reports");
  const auto out = text_at(cfg, "/corpus/cases", "--out");
  const auto loaded = corpus::load_corpus(summaries, reports, corpus::SectionSpec::defaults());
  corpus::write_cases(out, loaded.cases);
  json skipped = json::array();
  for (const auto& s : loaded.skipped) skipped.push_back({{"case_id", s.case_id}, {"reason", s.reason}});
  return {{"cases", loaded.cases.size()}, {"out", out}, {"skipped", skipped}};
}

struct AugmentKind {
  std::string name;        // segment | style | instr
  std::string store_key;   // under /stores
};

json cmd_augment(json& cfg, const AugmentKind& kind, bool& partial) {
  const auto out = text_at(cfg, "/stores/" + kind.store_key, "--out");
  const json::json_pointer ckpt_key("/augment/checkpoints/" + kind.name);
  if (!cfg.contains(ckpt_key) || cfg[ckpt_key].is_null()) cfg[ckpt_key] = out + ".checkpoint";
  const auto checkpoint = cfg[ckpt_key].get<std::string>();

  augment::JobOptions opts;
  usage_checked([&] {
    opts.tasks.clear();
    for (const auto& t : cfg.at("augment").at("tasks")) opts.tasks.push_back(parse_task(t.get<std::string>()));
    if (opts.tasks.empty()) throw UsageError("--tasks must name at least one task");
    const auto workers = cfg.at("augment").at("workers").get<long long>();
    if (workers < 1) throw UsageError("--workers must be at least 1");
    opts.workers = static_cast<std::size_t>(workers);
    const auto& leak = cfg.at("augment").at("leakage");
    opts.leakage.n = leak.at("n").get<std::size_t>();
    opts.leakage.threshold = leak.at("threshold").get<std::size_t>();
    opts.leakage.stop_phrases = leak.at("stop_phrases").get<std::vector<std::string>>();
    return 0;
  });
  const auto gcfg = gateway_of(cfg);
  opts.model_id = gcfg.model_id;
  const auto cases = load_cases(cfg);
  llm::Gateway gateway(gcfg);

  augment::JobStats stats;
  if (kind.name == "segment") {
    stats = augment::run_segmentation_job(cases, gateway, out, checkpoint, opts);
  } else {
    const auto g = kind.name == "style" ? guidelines::Kind::style : guidelines::Kind::instructions;
    stats = augment::run_guideline_job(cases, g, gateway, out, checkpoint, opts);
  }
  partial = stats.failed_transport > 0;
  auto result = augment::to_json(stats);
  result["out"] = out;
  result["checkpoint"] = checkpoint;
  return result;
}

json cmd_export(json& cfg) {
  const auto pcfg = usage_checked([&] {
    const auto& e = cfg.at("export");
    return promptgen::PromptConfig{promptgen::parse_control(e.at("c").get<std::string>()),
                                   promptgen::parse_guideline_mode(e.at("g").get<std::string>()),
                                   parse_task(e.at("task").get<std::string>())};
  });
  const auto out = text_at(cfg, "/export/out", "--out");
  promptgen::ExportOptions opts;
  opts.max_chars = usage_checked([&] { return cfg.at("export").at("max_chars").get<std::size_t>(); });

  seg::SegmentationStore segs;
  if (pcfg.c == promptgen::Control::topics) {
    const auto path = text_at(cfg, "/stores/segmentations", "--segmentations");
    if (!fs::exists(path)) {
      throw Error("segmentation store not found: " + path + " (run augment segment first)");
    }
    segs = seg::SegmentationStore::load(path);
  }
  guidelines::GuidelineStore guides;
  if (pcfg.g != promptgen::GuidelineMode::none) {
    const auto key = pcfg.g == promptgen::GuidelineMode::style ? "/stores/style" : "/stores/instructions";
    const auto path = text_at(cfg, key, "--guidelines");
    if (!fs::exists(path)) {
      throw Error("guideline store not found: " + path + " (run augment " +
                  std::string(promptgen::to_string(pcfg.g)) + " first)");
    }
    guides = guidelines::GuidelineStore::load(path);
  }
  const auto cases = load_cases(cfg);
  auto result = promptgen::to_json(promptgen::export_training_set(cases, pcfg, segs, guides, out, opts));
  result["out"] = out;
  return result;
}

json cmd_eval(json& cfg) {
  const auto hyp = text_at(cfg, "/eval/hyp", "--hyp");
  const auto ref = text_at(cfg, "/eval/ref", "--ref");
  const auto plugins = usage_checked([&] {
    std::vector<metrics::PluginSpec> out;
    for (const auto& p : cfg.at("eval").at("plugins")) out.push_back(metrics::parse_plugin_spec(p.get<std::string>()));
    return out;
  });
  const auto pairs = metrics::make_pairs(read_texts(hyp), read_texts(ref));
  if (pairs.empty()) throw Error("no hypothesis/reference pairs in " + hyp);
  const auto report = metrics::to_json(metrics::evaluate(pairs, {}, plugins));
  if (const auto out = optional_text(cfg, "/eval/out")) io::write_file(*out, report.dump(2) + "\n");
  return report;
}

/// A control-format document for a case: one segment per sentence of the
/// target selected by the request's task.
llm::DocumentSource mock_documents(std::vector<corpus::ClinicalCase> cases) {
  return [cases = std::move(cases)](const std::string& user) {
    for (const auto& c : cases) {
      if (user.find(c.discharge_summary) == std::string::npos) continue;
      const bool di = user.find("[BRIEF HOSPITAL COURSE]") != std::string::npos;
      return llm::sentence_segmentation(di ? c.target_di : c.target_bhc);
    }
    return std::string();
  };
}

int cmd_serve(json& cfg, std::ostream& out) {
  service::ServiceConfig scfg;
  usage_checked([&] {
    const auto& s = cfg.at("serve");
    scfg.host = s.at("host").get<std::string>();
    scfg.port = s.at("port").get<int>();
    scfg.sessions_dir = s.at("sessions_dir").get<std::string>();
    scfg.parse_mode = s.at("parse_mode").get<std::string>() == "strict" ? ParseMode::strict
                                                                         : ParseMode::lenient;
    return 0;
  });
  scfg.cases = load_cases(cfg);
  for (const auto* key : {"/stores/style", "/stores/instructions"}) {
    if (const auto p = optional_text(cfg, key); p && fs::exists(*p)) scfg.guideline_stores.push_back(*p);
  }

  std::unique_ptr<llm::MockEndpoint> mock;
  if (cfg["serve"]["mock"].get<bool>()) {
    mock = std::make_unique<llm::MockEndpoint>(llm::augmentation_responder(mock_documents(scfg.cases)));
    cfg["gateway"]["endpoint_url"] = mock->url();
  }
  llm::Gateway gateway(gateway_of(cfg));

  // handled by sigwait below; threads started from here inherit the mask
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  service::Service svc(scfg, gateway);
  svc.start();
  out << json{{"command", "serve"},
              {"config", echo(cfg)},
              {"result", {{"url", svc.url()}, {"sessions", svc.session_count()}}}}
             .dump()
      << std::endl;
  int sig = 0;
  sigwait(&signals, &sig);
  svc.stop();
  return 0;
}

json cmd_demo_session(json& cfg) {
  corpus::ClinicalCase c;
  if (const auto cases_path = optional_text(cfg, "/corpus/cases"); cases_path && fs::exists(*cases_path)) {
    const auto cases = corpus::read_cases(*cases_path);
    const auto wanted = optional_text(cfg, "/demo/case_id");
    const corpus::ClinicalCase* found = nullptr;
    for (const auto& x : cases) {
      if (!wanted || x.case_id == *wanted) {
        found = &x;
        break;
      }
    }
    if (!found) throw Error("no case " + wanted.value_or("") + " in " + *cases_path);
    c = *found;
  } else {
    c.case_id = "demo";
    c.discharge_summary = "Chief Complaint: dyspnea\nHPI: admitted with shortness of breath.";
    c.target_bhc = "The patient was admitted with dyspnea. He was diuresed and discharged home.";
    c.target_di = "Weigh yourself every morning.";
  }
  std::string document = llm::sentence_segmentation(c.target_bhc);
  if (const auto doc_path = optional_text(cfg, "/demo/document")) document = io::read_file(*doc_path);

  llm::MockEndpoint mock(llm::document_responder(document));
  auto gcfg = gateway_of(cfg);
  gcfg.endpoint_url = mock.url();
  llm::Gateway gateway(gcfg);

  const auto edit = optional_text(cfg, "/demo/edit_heading");
  auto session = genstream::Session::create(
      "demo", c, {promptgen::Control::topics, promptgen::GuidelineMode::none, Task::bhc},
      genstream::SessionMode::interactive, gateway);
  session->start();
  int pauses = 0;
  int busy_while_paused = 0;
  for (;;) {
    if (!session->wait_idle(std::chrono::seconds(30))) throw Error("demo session timed out");
    const auto snap = session->snapshot();
    if (snap.status == genstream::SessionStatus::completed) break;
    if (snap.status == genstream::SessionStatus::failed) {
      throw Error("demo session failed: " + snap.error.value_or("unknown error"));
    }
    ++pauses;
    if (snap.requests_in_flight != 0) ++busy_while_paused;
    if (edit && pauses == 1) {
      session->apply(genstream::UserAction::edit(*edit));
    } else {
      session->apply(genstream::UserAction::accept());
    }
  }
  json prefixes = json::array();
  for (const auto& r : mock.requests()) prefixes.push_back(r.assistant_prefix());
  const auto doc = session->finalize();
  return {{"case_id", c.case_id},
          {"pauses", pauses},
          {"calls", mock.calls()},
          {"paused_with_request_in_flight", busy_while_paused},
          {"prefixes", prefixes},
          {"segments", seg::to_json(doc.segmentation)["segments"]},
          {"document", doc.document}};
}

void print_error(std::ostream& err, const std::string& kind, const std::string& message) {
  err << json{{"error", message}, {"kind", kind}}.dump(-1, ' ', false, json::error_handler_t::replace)
      << std::endl;
}

}  // namespace

json default_config() {
  return {
      {"corpus", {{"summaries", nullptr}, {"reports", nullptr}, {"cases", "cases.jsonl"}}},
      {"stores",
       {{"segmentations", "segmentations.jsonl"},
        {"style", "style.jsonl"},
        {"instructions", "instructions.jsonl"}}},
      {"augment",
       {{"tasks", {"bhc", "di"}},
        {"workers", 4},
        {"checkpoints", {{"segment", nullptr}, {"style", nullptr}, {"instr", nullptr}}},
        {"leakage", {{"n", 2}, {"threshold", 5}, {"stop_phrases", json::array()}}}}},
      {"gateway", llm::to_json(llm::GatewayConfig{})},
      {"export", {{"c", "topics"}, {"g", "none"}, {"task", "bhc"}, {"out", "train.jsonl"}, {"max_chars", 0}}},
      {"eval", {{"hyp", nullptr}, {"ref", nullptr}, {"plugins", json::array()}, {"out", nullptr}}},
      {"serve",
       {{"host", "127.0.0.1"}, {"port", 8080}, {"sessions_dir", "sessions"}, {"mock", false},
        {"parse_mode", "lenient"}}},
      {"demo", {{"case_id", nullptr}, {"document", nullptr}, {"edit_heading", nullptr}}},
  };
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"ctrlgen: controlled generation of clinical summaries"};
  app.require_subcommand(1);
  Parser p;

  auto* ingest = app.add_subcommand("ingest", "load the corpus tables and extract targets");
  p.common(ingest);
  p.bind(ingest, "--summaries", "/corpus/summaries", Type::text, "summaries CSV (hadm_id,text)");
  p.bind(ingest, "--reports", "/corpus/reports", Type::text, "radiology CSV (hadm_id,report_id,text)");
  p.bind(ingest, "--out", "/corpus/cases", Type::text, "case file to write (JSONL)");

  auto* augment_cmd = app.add_subcommand("augment", "run an augmentation job");
  augment_cmd->require_subcommand(1);
  const std::vector<AugmentKind> kinds{{"segment", "segmentations"}, {"style", "style"},
                                       {"instr", "instructions"}};
  std::map<const CLI::App*, AugmentKind> augment_subs;
  for (const auto& k : kinds) {
    auto* sub = augment_cmd->add_subcommand(k.name, k.name == "segment" ? "segment the targets"
                                                    : k.name == "style" ? "write style guidelines"
                                                                        : "write writing instructions");
    p.common(sub);
    p.bind(sub, "--cases", "/corpus/cases", Type::text, "case file");
    p.bind(sub, "--out", "/stores/" + k.store_key, Type::text, "output store (appended)");
    p.bind(sub, "--checkpoint", "/augment/checkpoints/" + k.name, Type::text, "checkpoint file");
    p.bind(sub, "--workers", "/augment/workers", Type::integer, "concurrent requests");
    p.bind(sub, "--tasks", "/augment/tasks", Type::list, "bhc,di");
    augment_subs[sub] = k;
  }

  auto* export_cmd = app.add_subcommand("export", "write a chat-format training set");
  p.common(export_cmd);
  p.bind(export_cmd, "--c", "/export/c", Type::text, "none|topics");
  p.bind(export_cmd, "--g", "/export/g", Type::text, "none|style|instr");
  p.bind(export_cmd, "--task", "/export/task", Type::text, "bhc|di");
  p.bind(export_cmd, "--cases", "/corpus/cases", Type::text, "case file");
  p.bind(export_cmd, "--segmentations", "/stores/segmentations", Type::text, "segmentation store");
  p.bind(export_cmd, "--style", "/stores/style", Type::text, "style guideline store");
  p.bind(export_cmd, "--instructions", "/stores/instructions", Type::text, "instructions store");
  p.bind(export_cmd, "--out", "/export/out", Type::text, "training file to write");
  p.bind(export_cmd, "--max-chars", "/export/max_chars", Type::integer, "skip longer records; 0 = off");

  auto* eval_cmd = app.add_subcommand("eval", "score hypotheses against references");
  p.common(eval_cmd);
  p.bind(eval_cmd, "--hyp", "/eval/hyp", Type::text, "hypotheses: one per line, or .jsonl");
  p.bind(eval_cmd, "--ref", "/eval/ref", Type::text, "references: one per line, or .jsonl");
  p.bind(eval_cmd, "--plugin", "/eval/plugins", Type::list, "external metric NAME=COMMAND");
  p.bind(eval_cmd, "--out", "/eval/out", Type::text, "also write the report here");

  auto* serve_cmd = app.add_subcommand("serve", "run the HTTP session service");
  p.common(serve_cmd);
  p.bind(serve_cmd, "--host", "/serve/host", Type::text, "bind address");
  p.bind(serve_cmd, "--port", "/serve/port", Type::integer, "port; 0 picks a free one");
  p.bind(serve_cmd, "--sessions-dir", "/serve/sessions_dir", Type::text, "session journals");
  p.bind(serve_cmd, "--cases", "/corpus/cases", Type::text, "case file");
  p.bind(serve_cmd, "--mock", "/serve/mock", Type::flag, "answer with a built-in mock model");

  auto* demo_cmd = app.add_subcommand("demo-session", "scripted interactive session on a mock");
  p.common(demo_cmd);
  p.bind(demo_cmd, "--cases", "/corpus/cases", Type::text, "case file (a built-in case otherwise)");
  p.bind(demo_cmd, "--case-id", "/demo/case_id", Type::text, "case to use");
  p.bind(demo_cmd, "--document", "/demo/document", Type::text, "control-format document the mock streams");
  p.bind(demo_cmd, "--edit-heading", "/demo/edit_heading", Type::text, "replace the first heading");

  std::vector<std::string> argv_store{"ctrlgen"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    print_error(err, "usage", e.what());
    err << "run with --help for usage\n";
    return 2;
  }

  const CLI::App* cmd = app.get_subcommands().front();
  std::string name = cmd->get_name();
  if (cmd == augment_cmd) {
    cmd = augment_cmd->get_subcommands().front();
    name += " " + cmd->get_name();
  }

  json cfg = default_config();
  try {
    try {
      if (const auto& file = p.config_files[cmd]; !file.empty()) {
        json patch;
        try {
          patch = json::parse(io::read_file(file));
        } catch (const json::exception& e) {
          throw Error("config file " + file + " is not valid JSON: " + e.what());
        }
        if (!patch.is_object()) throw Error("config file " + file + " must hold a JSON object");
        cfg.merge_patch(patch);
      }
      // precedence: flags over environment over file
      if (const char* key = std::getenv("CTRLGEN_API_KEY"); key && *key) cfg["gateway"]["api_key"] = key;
      if (const char* url = std::getenv("CTRLGEN_ENDPOINT"); url && *url) cfg["gateway"]["endpoint_url"] = url;
      for (const auto* b : p.by_app[cmd]) apply(*b, cfg);

      json result;
      bool partial = false;
      if (cmd == ingest) {
        result = cmd_ingest(cfg);
      } else if (augment_subs.count(cmd)) {
        result = cmd_augment(cfg, augment_subs.at(cmd), partial);
      } else if (cmd == export_cmd) {
        result = cmd_export(cfg);
      } else if (cmd == eval_cmd) {
        result = cmd_eval(cfg);
      } else if (cmd == serve_cmd) {
        return cmd_serve(cfg, out);
      } else if (cmd == demo_cmd) {
        result = cmd_demo_session(cfg);
      }
      out << json{{"command", name}, {"config", echo(cfg)}, {"result", result}}.dump(
                 2, ' ', false, json::error_handler_t::replace)
          << std::endl;
      if (partial) {
        print_error(err, "runtime",
                    std::to_string(result.value("failed_transport", 0)) +
                        " targets failed in transport; rerun to retry them");
        return 1;
      }
      return 0;
    } catch (const UsageError& e) {
      print_error(err, "usage", name + ": " + e.what());
      err << "run `ctrlgen " << name << " --help` for usage\n";
      return 2;
    }
  } catch (const std::exception& e) {
    print_error(err, "runtime", name + ": " + e.what());
    return 1;
  }
}

}  // namespace ctrlgen::cli
