#pragma once

#include <nlohmann/json.hpp>

#include <atomic>
#include <filesystem>
#include <string>
#include <vector>

#include "ctrlgen/corpus.hpp"
#include "ctrlgen/guidelines.hpp"
#include "ctrlgen/llm.hpp"

namespace ctrlgen::augment {

/// Outcome counts of one job. Every target lands in exactly one counter.
struct JobStats {
  std::size_t total = 0;
  std::size_t succeeded = 0;
  std::size_t rejected_consecutive = 0;
  std::size_t rejected_alignment = 0;
  std::size_t rejected_parse = 0;
  std::size_t failed_transport = 0;
  std::size_t leakage_warnings = 0;  // not an outcome: succeeded targets that were flagged
  std::size_t skipped_checkpointed = 0;  // of the outcomes, how many came from the checkpoint

  double acceptance_rate() const;
  std::size_t outcome_sum() const;
};

nlohmann::json to_json(const JobStats& stats);

struct JobOptions {
  std::vector<Task> tasks = {Task::bhc, Task::di};
  std::size_t workers = 4;
  std::string model_id;
  guidelines::LeakageOptions leakage;
  /// When set and raised, no further targets are started; finished ones are
  /// still committed.
  const std::atomic<bool>* cancel = nullptr;
};

/// Segments every (case, task) target: prompt, call, lenient parse of the
/// <split-text> payload, span restoration. Writes a raw record and a
/// restored/rejected record per target to `out_path` (appending), and the
/// target's outcome to `checkpoint_path`. Targets already in the checkpoint
/// are not requested again; their outcomes are replayed into the stats.
/// Transport failures are counted but not checkpointed, so a rerun retries
/// them.
JobStats run_segmentation_job(const std::vector<corpus::ClinicalCase>& cases,
                              llm::ChatClient& client, const std::filesystem::path& out_path,
                              const std::filesystem::path& checkpoint_path,
                              const JobOptions& options = {});

/// Generates one style guideline or writing-instructions text per target and
/// screens it for leakage. Instructions without the required header line are
/// rejected as parse failures.
JobStats run_guideline_job(const std::vector<corpus::ClinicalCase>& cases, guidelines::Kind kind,
                           llm::ChatClient& client, const std::filesystem::path& out_path,
                           const std::filesystem::path& checkpoint_path,
                           const JobOptions& options = {});

}  // namespace ctrlgen::augment
