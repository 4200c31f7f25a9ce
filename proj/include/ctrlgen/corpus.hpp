#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ctrlgen/common.hpp"

namespace ctrlgen::corpus {

/// One admission: the residual discharge summary, its radiology reports and
/// the two target sections cut out of it.
struct ClinicalCase {
  std::string case_id;
  std::string discharge_summary;
  std::vector<std::string> radiology_reports;
  std::optional<std::string> chief_complaint;
  std::string target_bhc;
  std::string target_di;

  const std::string& target(Task task) const { return task == Task::bhc ? target_bhc : target_di; }

  bool operator==(const ClinicalCase&) const = default;
};

/// Header detection rules. Every pattern is an ECMAScript regular expression
/// matched case-insensitively at the start of a line.
struct SectionSpec {
  std::vector<std::string> bhc_header_patterns;
  std::vector<std::string> di_header_patterns;
  std::vector<std::string> end_markers;

  /// "Brief Hospital Course" / "Discharge Instructions" plus the section
  /// headers that usually follow them in MIMIC-style notes.
  static SectionSpec defaults();

  void validate() const;
};

class SectionError : public Error {
 public:
  enum class Kind { no_section, ambiguous_section };

  SectionError(Kind kind, Task section, std::string pattern);

  Kind kind() const { return kind_; }
  Task section() const { return section_; }
  const std::string& pattern() const { return pattern_; }

 private:
  Kind kind_;
  Task section_;
  std::string pattern_;
};

struct ExtractedTargets {
  std::string residual;
  std::string bhc;
  std::string di;

  bool operator==(const ExtractedTargets&) const = default;
};

/// Cuts the BHC and DI sections (header line included) out of a raw note.
/// Each body runs from the line after its header to the next end marker or
/// section header, and is returned trimmed.
ExtractedTargets extract_targets(std::string_view raw_summary, const SectionSpec& spec);

struct SkipRecord {
  std::string case_id;
  std::string reason;
};

struct LoadResult {
  std::vector<ClinicalCase> cases;
  std::vector<SkipRecord> skipped;
};

class CorpusError : public Error {
 public:
  using Error::Error;
};

/// Reads the summaries table (hadm_id, text[, chief_complaint]) and the
/// reports table (hadm_id, report_id, text). Reports keep file order.
/// Cases whose targets cannot be extracted are skipped and reported.
LoadResult load_corpus(const std::filesystem::path& summaries_path,
                       const std::filesystem::path& reports_path, const SectionSpec& spec);

nlohmann::json to_json(const ClinicalCase& c);
ClinicalCase case_from_json(const nlohmann::json& j);

void write_cases(const std::filesystem::path& path, const std::vector<ClinicalCase>& cases);
std::vector<ClinicalCase> read_cases(const std::filesystem::path& path);

}  // namespace ctrlgen::corpus
