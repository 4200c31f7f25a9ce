#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "ctrlgen/common.hpp"

namespace ctrlgen {

/// Malformed control-tag input. `offset()` is the byte offset into the
/// (possibly streamed) input where the problem was detected.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " at offset " + std::to_string(offset)), offset_(offset) {}

  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

enum class ParseMode { strict, lenient };

}  // namespace ctrlgen

namespace ctrlgen::genstream {

enum class ElementKind { topic, question, span };

std::string_view to_string(ElementKind kind);
ElementKind parse_element_kind(std::string_view name);
ElementKind next_in_cycle(ElementKind kind);
std::string opening_tag(ElementKind kind);
std::string closing_tag(ElementKind kind);

enum class ParserState {
  AwaitTopicOpen,
  InTopic,
  AwaitQuestionOpen,
  InQuestion,
  AwaitSpanOpen,
  InSpan,
  Done,
  Failed,
};

std::string_view to_string(ParserState state);
ParserState parse_parser_state(std::string_view name);

enum class EventKind {
  TopicStarted,
  TopicText,
  TopicDone,
  QuestionStarted,
  QuestionText,
  QuestionDone,
  SpanStarted,
  SpanText,
  SpanDone,
  DocumentDone,
};

std::string_view to_string(EventKind kind);
EventKind parse_event_kind(std::string_view name);
EventKind started_event(ElementKind kind);
EventKind text_event(ElementKind kind);
EventKind done_event(ElementKind kind);
bool is_text_event(EventKind kind);
bool is_done_event(EventKind kind);
/// The element an event belongs to; DocumentDone has none.
ElementKind element_of(EventKind kind);

struct ElementEvent {
  EventKind kind;
  std::string payload;     // *Text: the new text; *Done: the full element text
  std::size_t offset = 0;  // stream offset of the tag or first text byte

  bool operator==(const ElementEvent&) const = default;
};

/// Merges runs of adjacent *Text events of the same element. Text events
/// follow the chunking of the input; every other event does not, so two
/// streams with the same content have the same coalesced event sequence.
std::vector<ElementEvent> coalesce(const std::vector<ElementEvent>& events);

struct CompletedElement {
  ElementKind kind;
  std::string text;
  std::size_t offset = 0;  // offset of the opening tag

  bool operator==(const CompletedElement&) const = default;
};

/// Incremental parser for the <topic>/<question>/<span> control format.
///
/// Tags may be split across chunk boundaries: an unresolved suffix that is a
/// proper prefix of some recognised tag waits in the carry buffer. Strict
/// mode accepts only whitespace between elements and the exact
/// topic -> question -> span cycle. Lenient mode discards text outside
/// elements (counted as noise), drops elements that arrive out of cycle,
/// treats an opening tag or </split-text> as closing the current element,
/// and auto-closes an open element at end of stream.
class StreamParser {
 public:
  explicit StreamParser(ParseMode mode = ParseMode::lenient);

  /// A parser positioned as if it had already consumed `offset` bytes and
  /// reached `state`, e.g. after replaying an assistant prefix that ends in
  /// an opening tag.
  static StreamParser resume_at(ParserState state, ParseMode mode, std::size_t offset = 0);

  std::vector<ElementEvent> feed(std::string_view chunk);

  /// Signals end of input. Flushes the carry buffer and emits DocumentDone.
  std::vector<ElementEvent> finish();

  ParserState state() const { return state_; }
  ParseMode mode() const { return mode_; }
  std::string_view carry_buffer() const { return carry_; }
  std::string_view element_buffer() const { return element_; }
  const std::vector<CompletedElement>& completed() const { return completed_; }
  std::size_t noise_bytes() const { return noise_; }
  bool in_skipped_element() const { return skipping_; }
  std::size_t offset() const { return consumed_; }

 private:
  enum class Tag { topic_open, topic_close, question_open, question_close, span_open, span_close,
                   wrapper_open, wrapper_close };

  struct TagMatch {
    bool complete = false;  // a whole tag starts at the position
    bool partial = false;   // remaining input is a proper prefix of a tag
    Tag tag{};
    std::size_t length = 0;
  };

  TagMatch match_tag(std::string_view rest, bool inside_element) const;
  [[noreturn]] void fail(const std::string& what, std::size_t offset);
  void open_element(ElementKind kind, std::size_t offset, std::vector<ElementEvent>& out);
  void close_element(std::size_t offset, std::vector<ElementEvent>& out);
  void emit_text(std::string_view text, std::size_t offset, std::vector<ElementEvent>& out);
  bool in_element() const;
  ElementKind current_kind() const;
  ElementKind expected_kind() const;

  ParseMode mode_;
  ParserState state_ = ParserState::AwaitTopicOpen;
  std::string carry_;
  std::string element_;
  std::size_t element_offset_ = 0;
  std::vector<CompletedElement> completed_;
  std::size_t consumed_ = 0;  // offset of the first byte of carry_
  std::size_t noise_ = 0;
  bool skipping_ = false;     // lenient: inside an out-of-cycle element
  Tag skip_close_{};
  bool saw_element_ = false;
};

}  // namespace ctrlgen::genstream
