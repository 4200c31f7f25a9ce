#pragma once

#include <nlohmann/json.hpp>

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ctrlgen/common.hpp"
#include "ctrlgen/stream_parser.hpp"

namespace ctrlgen::seg {

/// Half-open byte interval into the original target text.
struct CharRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  bool operator==(const CharRange&) const = default;
};

struct Segment {
  std::string heading;
  std::string question;
  std::string span;
  std::optional<CharRange> char_range;  // present once restored

  bool operator==(const Segment&) const = default;
};

enum class Status { raw, restored, rejected };

std::string_view to_string(Status status);
Status parse_status(std::string_view text);

struct Segmentation {
  std::string target_id;
  Task task = Task::bhc;
  std::vector<Segment> segments;
  Status status = Status::raw;
  std::optional<std::string> rejection_reason;

  bool operator==(const Segmentation&) const = default;
};

class UnencodableElement : public Error {
 public:
  using Error::Error;
};

/// Renders the control format: per segment
///   <topic>H</topic>\n<question>Q</question>\n<span>S</span>
/// with segments separated by one blank line and no trailing newline.
/// Element text is written verbatim; text that contains a control tag
/// cannot be represented and raises UnencodableElement.
std::string serialize_xml(const Segmentation& seg);

/// Parses the control format into a raw segmentation (no target id, no
/// char ranges). Strict mode raises ParseError for out-of-order tags,
/// unclosed or blank elements and empty documents. Lenient mode recovers
/// what it can and raises only when no complete segment survives.
Segmentation parse_xml(std::string_view text, ParseMode mode);

/// Word-level edit script over whitespace-delimited tokens.
struct EditOp {
  enum class Kind { equal, insert, del, replace };

  Kind kind = Kind::equal;
  std::size_t count = 0;               // equal only
  std::vector<std::string> old_words;  // del, replace
  std::vector<std::string> new_words;  // insert, replace

  static EditOp equal(std::size_t n) { return {Kind::equal, n, {}, {}}; }
  static EditOp insert(std::vector<std::string> words) { return {Kind::insert, 0, {}, std::move(words)}; }
  static EditOp del(std::vector<std::string> words) { return {Kind::del, 0, std::move(words), {}}; }
  static EditOp replace(std::vector<std::string> old_w, std::vector<std::string> new_w) {
    return {Kind::replace, 0, std::move(old_w), std::move(new_w)};
  }

  bool operator==(const EditOp&) const = default;
};

using WordEditScript = std::vector<EditOp>;

/// Longest-common-subsequence alignment of the two token streams, taking the
/// earliest match on ties. Adjacent delete/insert runs are paired into a
/// single Replace.
WordEditScript word_diff(std::string_view original, std::string_view generated);

/// Replays `script` over `original_words`; throws if the script does not fit.
std::vector<std::string> apply_script(const WordEditScript& script,
                                      const std::vector<std::string>& original_words);

/// True when any difference run touches two or more tokens on either side,
/// or when two difference runs are adjacent.
bool has_consecutive_differences(const WordEditScript& script);

inline constexpr std::string_view kRejectConsecutive = "consecutive-differences";
inline constexpr std::string_view kRejectEmptyAlignment = "empty-alignment";

/// Maps LLM-copied spans back onto exact ranges of `original`. The restored
/// ranges partition the original: whitespace between blocks stays with the
/// preceding block, and the first block starts at offset 0.
Segmentation restore_spans(std::string_view original, const Segmentation& raw);

/// Spans joined with single spaces.
std::string join_spans(const Segmentation& seg);

/// "- heading" per segment, newline separated, no trailing newline.
std::string extract_headings_bullets(const Segmentation& seg);

nlohmann::json to_json(const Segmentation& seg);
Segmentation segmentation_from_json(const nlohmann::json& j);

/// Latest restored or rejected record per (target_id, task) in a
/// segmentation record file; raw records are kept only as history.
class SegmentationStore {
 public:
  static SegmentationStore load(const std::filesystem::path& path);

  void put(const Segmentation& seg);
  const Segmentation* find(const std::string& target_id, Task task) const;
  std::size_t size() const { return records_.size(); }

 private:
  std::map<std::pair<std::string, Task>, Segmentation> records_;
};

}  // namespace ctrlgen::seg
