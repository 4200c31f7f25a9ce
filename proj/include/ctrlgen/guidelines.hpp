#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "ctrlgen/common.hpp"

namespace ctrlgen::guidelines {

inline constexpr std::string_view kTemplateVersion = "v1";
inline constexpr std::string_view kInstructionsHeader = "## Writing Instructions";

enum class Kind { style, instructions };

std::string_view to_string(Kind kind);
Kind parse_kind(std::string_view text);

struct AuthoringGuideline {
  std::string target_id;
  Task task = Task::bhc;
  Kind kind = Kind::style;
  std::string text;
  std::string model_id;
  std::string created_at;

  bool operator==(const AuthoringGuideline&) const = default;
};

/// Throws Error when `g` breaks the guideline invariants (blank text, or
/// instructions that do not open with the "## Writing Instructions" line).
void validate(const AuthoringGuideline& g);

// The three augmentation prompts. Wording, typos included, is fixed; the
// target is substituted into a single payload slot.
std::string build_segmentation_prompt(std::string_view target);
std::string build_style_prompt(std::string_view target);
std::string build_instructions_prompt(std::string_view target);

enum class Verdict { pass, warn };

std::string_view to_string(Verdict verdict);

struct LeakageReport {
  std::size_t max_ngram_overlap = 0;
  std::vector<std::string> flagged_phrases;
  Verdict verdict = Verdict::pass;
};

struct LeakageOptions {
  std::size_t n = 2;
  std::size_t threshold = 5;
  std::vector<std::string> stop_phrases;
};

/// Longest run of consecutive words shared by guideline and target, after
/// case folding, punctuation stripping and stop-phrase removal. Runs shorter
/// than `n` do not count. Flagged phrases are the distinct maximal shared
/// runs of at least `n` words, longest first.
LeakageReport leakage_screen(std::string_view guideline_text, std::string_view target,
                             const LeakageOptions& options = {});

nlohmann::json to_json(const AuthoringGuideline& g);
AuthoringGuideline guideline_from_json(const nlohmann::json& j);

/// Latest guideline per (target_id, task, kind) in a guideline record file.
class GuidelineStore {
 public:
  static GuidelineStore load(const std::filesystem::path& path);

  void put(const AuthoringGuideline& g);
  const AuthoringGuideline* find(const std::string& target_id, Task task, Kind kind) const;
  std::size_t size() const { return records_.size(); }

 private:
  std::map<std::tuple<std::string, Task, Kind>, AuthoringGuideline> records_;
};

}  // namespace ctrlgen::guidelines
