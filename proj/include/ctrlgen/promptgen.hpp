#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ctrlgen/corpus.hpp"
#include "ctrlgen/guidelines.hpp"
#include "ctrlgen/segmentation.hpp"

namespace ctrlgen::promptgen {

/// Version of every instruction string and block label below. Bump it when
/// any of them changes; exports record it.
inline constexpr std::string_view kTemplateVersion = "prompt-v1";

inline constexpr std::string_view kBhcTaskInstruction =
    "Write the Brief Hospital Course section of the discharge summary for this admission, based on "
    "the clinical notes above.";
inline constexpr std::string_view kDiTaskInstruction =
    "Write the Discharge Instructions for this patient, based on the clinical notes and the brief "
    "hospital course above. Address the patient directly.";
inline constexpr std::string_view kStyleComplianceInstruction =
    "Follow the style guidelines above when writing.";
inline constexpr std::string_view kInstrComplianceInstruction =
    "Follow the writing instructions above when writing.";
inline constexpr std::string_view kXmlOutputInstruction =
    "Structure your answer as a sequence of topics. For each topic, write a short heading inside "
    "<topic></topic>, the question the topic answers inside <question></question>, and the text "
    "itself inside <span></span>. Separate topics with a blank line.";
inline constexpr std::string_view kCoveredTopicsInstruction =
    "Cover the following topics, in this order:";

enum class Control { none, topics };
enum class GuidelineMode { none, style, instr };

std::string_view to_string(Control c);
std::string_view to_string(GuidelineMode g);
Control parse_control(std::string_view text);
GuidelineMode parse_guideline_mode(std::string_view text);

struct PromptConfig {
  Control c = Control::none;
  GuidelineMode g = GuidelineMode::none;
  Task task = Task::bhc;

  bool operator==(const PromptConfig&) const = default;
};

/// Precondition violations of the builders.
class PromptError : public Error {
 public:
  using Error::Error;
};

/// The guideline kind a mode conditions on; throws for none.
guidelines::Kind kind_for(GuidelineMode g);

/// One block of a user message. Context blocks carry a label line
/// ("[DISCHARGE SUMMARY]"); instruction blocks have an empty label.
struct Block {
  std::string label;
  std::string body;

  bool operator==(const Block&) const = default;
};

/// The ordered blocks of user_i(c,g): discharge summary, radiology reports
/// 1..n, brief hospital course (di only), authoring guideline, compliance
/// line, task instruction, structured-output instruction (topics only).
std::vector<Block> build_user_blocks(const corpus::ClinicalCase& c, const PromptConfig& cfg,
                                     const std::optional<guidelines::AuthoringGuideline>& guideline,
                                     const std::optional<std::string>& bhc_output);

/// Blocks joined by blank lines; a labelled block is "label\nbody".
std::string render(const std::vector<Block>& blocks);

std::string build_user_message(const corpus::ClinicalCase& c, const PromptConfig& cfg,
                               const std::optional<guidelines::AuthoringGuideline>& guideline,
                               const std::optional<std::string>& bhc_output);

/// Plain target for c == none, serialize_xml of a restored segmentation for
/// c == topics.
std::string build_assistant_message(const corpus::ClinicalCase& c, const PromptConfig& cfg,
                                    const seg::Segmentation* seg);

/// The user message extended, for c == topics, with the covered-topics
/// instruction and the heading bullet list of `seg_for_topics`.
std::string build_eval_user_message(const corpus::ClinicalCase& c, const PromptConfig& cfg,
                                    const std::optional<guidelines::AuthoringGuideline>& guideline,
                                    const std::optional<std::string>& bhc_output,
                                    const seg::Segmentation* seg_for_topics);

struct PromptPair {
  std::string user;
  std::string assistant;
  /// Half-open byte interval of `assistant` that is trained on.
  std::size_t mask_begin = 0;
  std::size_t mask_end = 0;
};

PromptPair build_prompt_pair(const corpus::ClinicalCase& c, const PromptConfig& cfg,
                             const std::optional<guidelines::AuthoringGuideline>& guideline,
                             const std::optional<std::string>& bhc_output,
                             const seg::Segmentation* seg);

struct ExportOptions {
  /// Records whose user plus assistant text exceeds this many bytes are
  /// skipped; 0 disables the guard.
  std::size_t max_chars = 0;
};

struct SkippedCase {
  std::string case_id;
  std::string reason;
};

struct ExportReport {
  std::size_t written = 0;
  std::vector<SkippedCase> skipped;
};

nlohmann::json to_json(const ExportReport& report);

/// One chat-format record per exportable case:
///   {"messages":[{"role":"user",...},{"role":"assistant",...}],
///    "meta":{"case_id","task","c","g","template_version"}}
/// Di user messages embed the gold brief hospital course. Cases lacking a
/// required augmentation are skipped and named in the report. The output
/// file is replaced.
ExportReport export_training_set(const std::vector<corpus::ClinicalCase>& cases,
                                 const PromptConfig& cfg, const seg::SegmentationStore& segs,
                                 const guidelines::GuidelineStore& guidelines,
                                 const std::filesystem::path& out_path,
                                 const ExportOptions& options = {});

}  // namespace ctrlgen::promptgen
