#include "ctrlgen/augment.hpp"

#include <condition_variable>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <thread>

#include "ctrlgen/io.hpp"
#include "ctrlgen/segmentation.hpp"

namespace ctrlgen::augment {

namespace {

using json = nlohmann::json;

enum class Outcome { succeeded, rejected_consecutive, rejected_alignment, rejected_parse,
                     failed_transport };

std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::succeeded: return "succeeded";
    case Outcome::rejected_consecutive: return "rejected_consecutive";
    case Outcome::rejected_alignment: return "rejected_alignment";
    case Outcome::rejected_parse: return "rejected_parse";
    case Outcome::failed_transport: return "failed_transport";
  }
  return "?";
}

Outcome parse_outcome(std::string_view s) {
  for (auto o : {Outcome::succeeded, Outcome::rejected_consecutive, Outcome::rejected_alignment,
                 Outcome::rejected_parse, Outcome::failed_transport}) {
    if (to_string(o) == s) return o;
  }
  throw Error("unknown checkpoint outcome '" + std::string(s) + "'");
}

struct Target {
  const corpus::ClinicalCase* c;
  Task task;
  std::string key;
};

struct Result {
  Outcome outcome = Outcome::failed_transport;
  bool leakage_warning = false;
  std::vector<json> records;
  std::string detail;
};

struct CheckpointEntry {
  Outcome outcome;
  bool leakage_warning;
};

std::map<std::string, CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  std::map<std::string, CheckpointEntry> done;
  if (!std::filesystem::exists(path)) return done;
  for (const auto& j : io::read_jsonl(path)) {
    try {
      done[j.at("key").get<std::string>()] = {parse_outcome(j.at("outcome").get<std::string>()),
                                              j.value("leakage_warning", false)};
    } catch (const json::exception& e) {
      throw Error("malformed checkpoint record in " + path.string() + ": " + e.what());
    }
  }
  return done;
}

void count(JobStats& stats, Outcome o, bool leakage_warning) {
  switch (o) {
    case Outcome::succeeded: ++stats.succeeded; break;
    case Outcome::rejected_consecutive: ++stats.rejected_consecutive; break;
    case Outcome::rejected_alignment: ++stats.rejected_alignment; break;
    case Outcome::rejected_parse: ++stats.rejected_parse; break;
    case Outcome::failed_transport: ++stats.failed_transport; break;
  }
  if (leakage_warning) ++stats.leakage_warnings;
}

// Runs `work` over the pending targets on a bounded pool and commits the
// results in target order from the calling thread.
JobStats run_job(const std::string& kind_label, const std::vector<corpus::ClinicalCase>& cases,
                 const JobOptions& options, const std::filesystem::path& out_path,
                 const std::filesystem::path& checkpoint_path,
                 const std::function<Result(const Target&)>& work) {
  std::vector<Target> targets;
  for (const auto& c : cases) {
    for (const Task task : options.tasks) {
      targets.push_back({&c, task, kind_label + ":" + std::string(to_string(task)) + ":" + c.case_id});
    }
  }

  JobStats stats;
  stats.total = targets.size();
  const auto done = read_checkpoint(checkpoint_path);
  std::vector<const Target*> pending;
  for (const auto& t : targets) {
    if (const auto it = done.find(t.key); it != done.end()) {
      count(stats, it->second.outcome, it->second.leakage_warning);
      ++stats.skipped_checkpointed;
    } else {
      pending.push_back(&t);
    }
  }

  io::JsonlWriter out(out_path, io::JsonlWriter::Mode::append);
  io::JsonlWriter checkpoint(checkpoint_path, io::JsonlWriter::Mode::append);

  std::vector<std::optional<Result>> results(pending.size());
  std::mutex mutex;
  std::condition_variable ready;
  std::size_t next = 0;
  std::size_t started = 0;

  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mutex);
        if (next >= pending.size() || (options.cancel && options.cancel->load())) return;
        i = next++;
        ++started;
      }
      Result r;
      try {
        r = work(*pending[i]);
      } catch (const llm::GatewayError& e) {
        r.outcome = Outcome::failed_transport;
        r.detail = e.what();
      }
      {
        std::lock_guard lock(mutex);
        results[i] = std::move(r);
      }
      ready.notify_all();
    }
  };

  const std::size_t n_workers = std::max<std::size_t>(1, std::min(options.workers, pending.size()));
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < n_workers && !pending.empty(); ++w) pool.emplace_back(worker);

  std::exception_ptr failure;
  for (std::size_t i = 0; i < pending.size(); ++i) {
    Result r;
    {
      std::unique_lock lock(mutex);
      ready.wait(lock, [&] {
        const bool stopped = options.cancel && options.cancel->load() && i >= started;
        return results[i].has_value() || stopped || failure;
      });
      if (!results[i]) break;  // cancelled before this target started
      r = std::move(*results[i]);
    }
    try {
      for (const auto& record : r.records) out.write(record);
      if (r.outcome != Outcome::failed_transport) {
        checkpoint.write({{"key", pending[i]->key},
                          {"outcome", std::string(to_string(r.outcome))},
                          {"leakage_warning", r.leakage_warning}});
      }
    } catch (...) {
      failure = std::current_exception();
      std::lock_guard lock(mutex);
      next = pending.size();
      break;
    }
    count(stats, r.outcome, r.leakage_warning);
  }
  {
    std::lock_guard lock(mutex);
    next = pending.size();
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return stats;
}

}  // namespace

double JobStats::acceptance_rate() const {
  return total == 0 ? 0.0 : static_cast<double>(succeeded) / static_cast<double>(total);
}

std::size_t JobStats::outcome_sum() const {
  return succeeded + rejected_consecutive + rejected_alignment + rejected_parse + failed_transport;
}

json to_json(const JobStats& s) {
  return {
      {"total", s.total},
      {"succeeded", s.succeeded},
      {"rejected_consecutive", s.rejected_consecutive},
      {"rejected_alignment", s.rejected_alignment},
      {"rejected_parse", s.rejected_parse},
      {"failed_transport", s.failed_transport},
      {"not_attempted", s.total - s.outcome_sum()},
      {"leakage_warnings", s.leakage_warnings},
      {"from_checkpoint", s.skipped_checkpointed},
      {"acceptance_rate", s.acceptance_rate()},
  };
}

JobStats run_segmentation_job(const std::vector<corpus::ClinicalCase>& cases,
                              llm::ChatClient& client, const std::filesystem::path& out_path,
                              const std::filesystem::path& checkpoint_path,
                              const JobOptions& options) {
  return run_job("segment", cases, options, out_path, checkpoint_path, [&](const Target& t) {
    const std::string& target = t.c->target(t.task);
    llm::ChatRequest req;
    req.user = guidelines::build_segmentation_prompt(target);
    const std::string reply = client.complete(req);

    Result r;
    seg::Segmentation raw;
    try {
      raw = seg::parse_xml(reply, ParseMode::lenient);
    } catch (const ParseError& e) {
      seg::Segmentation rejected;
      rejected.target_id = t.c->case_id;
      rejected.task = t.task;
      rejected.status = seg::Status::rejected;
      rejected.rejection_reason = std::string("parse-error: ") + e.what();
      r.outcome = Outcome::rejected_parse;
      r.records.push_back(seg::to_json(rejected));
      return r;
    }
    raw.target_id = t.c->case_id;
    raw.task = t.task;
    raw.status = seg::Status::raw;
    const auto restored = seg::restore_spans(target, raw);
    r.records.push_back(seg::to_json(raw));
    r.records.push_back(seg::to_json(restored));
    if (restored.status == seg::Status::restored) {
      r.outcome = Outcome::succeeded;
    } else if (restored.rejection_reason == std::string(seg::kRejectEmptyAlignment)) {
      r.outcome = Outcome::rejected_alignment;
    } else {
      r.outcome = Outcome::rejected_consecutive;
    }
    return r;
  });
}

JobStats run_guideline_job(const std::vector<corpus::ClinicalCase>& cases, guidelines::Kind kind,
                           llm::ChatClient& client, const std::filesystem::path& out_path,
                           const std::filesystem::path& checkpoint_path,
                           const JobOptions& options) {
  const std::string label = kind == guidelines::Kind::style ? "style" : "instr";
  return run_job(label, cases, options, out_path, checkpoint_path, [&](const Target& t) {
    const std::string& target = t.c->target(t.task);
    llm::ChatRequest req;
    req.user = kind == guidelines::Kind::style ? guidelines::build_style_prompt(target)
                                               : guidelines::build_instructions_prompt(target);
    guidelines::AuthoringGuideline g;
    g.target_id = t.c->case_id;
    g.task = t.task;
    g.kind = kind;
    g.text = std::string(trim(client.complete(req)));
    g.model_id = options.model_id;
    g.created_at = utc_timestamp();

    Result r;
    try {
      guidelines::validate(g);
    } catch (const Error& e) {
      r.outcome = Outcome::rejected_parse;
      r.detail = e.what();
      return r;
    }
    const auto leak = guidelines::leakage_screen(g.text, target, options.leakage);
    auto record = guidelines::to_json(g);
    record["leakage"] = {{"max_ngram_overlap", leak.max_ngram_overlap},
                         {"flagged_phrases", leak.flagged_phrases},
                         {"verdict", std::string(guidelines::to_string(leak.verdict))}};
    r.outcome = Outcome::succeeded;
    r.leakage_warning = leak.verdict == guidelines::Verdict::warn;
    r.records.push_back(std::move(record));
    return r;
  });
}

}  // namespace ctrlgen::augment
