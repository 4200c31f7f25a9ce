#include "ctrlgen/stream_parser.hpp"

#include <array>

namespace ctrlgen::genstream {

namespace {

struct TagInfo {
  std::string_view text;
  bool opening;
  bool wrapper;
  ElementKind kind;
};

constexpr std::array<TagInfo, 8> kTags = {{
    {"<topic>", true, false, ElementKind::topic},
    {"</topic>", false, false, ElementKind::topic},
    {"<question>", true, false, ElementKind::question},
    {"</question>", false, false, ElementKind::question},
    {"<span>", true, false, ElementKind::span},
    {"</span>", false, false, ElementKind::span},
    {"<split-text>", true, true, ElementKind::topic},
    {"</split-text>", false, true, ElementKind::topic},
}};

const TagInfo& info(std::size_t index) { return kTags[index]; }

}  // namespace

std::string_view to_string(ElementKind kind) {
  switch (kind) {
    case ElementKind::topic: return "topic";
    case ElementKind::question: return "question";
    case ElementKind::span: return "span";
  }
  return "?";
}

ElementKind parse_element_kind(std::string_view name) {
  if (name == "topic") return ElementKind::topic;
  if (name == "question") return ElementKind::question;
  if (name == "span") return ElementKind::span;
  throw Error("unknown element kind '" + std::string(name) + "'");
}

ElementKind next_in_cycle(ElementKind kind) {
  switch (kind) {
    case ElementKind::topic: return ElementKind::question;
    case ElementKind::question: return ElementKind::span;
    case ElementKind::span: return ElementKind::topic;
  }
  return ElementKind::topic;
}

std::string opening_tag(ElementKind kind) { return "<" + std::string(to_string(kind)) + ">"; }
std::string closing_tag(ElementKind kind) { return "</" + std::string(to_string(kind)) + ">"; }

std::string_view to_string(ParserState state) {
  switch (state) {
    case ParserState::AwaitTopicOpen: return "AwaitTopicOpen";
    case ParserState::InTopic: return "InTopic";
    case ParserState::AwaitQuestionOpen: return "AwaitQuestionOpen";
    case ParserState::InQuestion: return "InQuestion";
    case ParserState::AwaitSpanOpen: return "AwaitSpanOpen";
    case ParserState::InSpan: return "InSpan";
    case ParserState::Done: return "Done";
    case ParserState::Failed: return "Failed";
  }
  return "?";
}

ParserState parse_parser_state(std::string_view name) {
  for (auto s : {ParserState::AwaitTopicOpen, ParserState::InTopic, ParserState::AwaitQuestionOpen,
                 ParserState::InQuestion, ParserState::AwaitSpanOpen, ParserState::InSpan,
                 ParserState::Done, ParserState::Failed}) {
    if (to_string(s) == name) return s;
  }
  throw Error("unknown parser state '" + std::string(name) + "'");
}

std::string_view to_string(EventKind kind) {
  switch (kind) {
    case EventKind::TopicStarted: return "TopicStarted";
    case EventKind::TopicText: return "TopicText";
    case EventKind::TopicDone: return "TopicDone";
    case EventKind::QuestionStarted: return "QuestionStarted";
    case EventKind::QuestionText: return "QuestionText";
    case EventKind::QuestionDone: return "QuestionDone";
    case EventKind::SpanStarted: return "SpanStarted";
    case EventKind::SpanText: return "SpanText";
    case EventKind::SpanDone: return "SpanDone";
    case EventKind::DocumentDone: return "DocumentDone";
  }
  return "?";
}

EventKind parse_event_kind(std::string_view name) {
  for (int i = 0; i <= static_cast<int>(EventKind::DocumentDone); ++i) {
    const auto kind = static_cast<EventKind>(i);
    if (to_string(kind) == name) return kind;
  }
  throw Error("unknown event kind '" + std::string(name) + "'");
}

EventKind started_event(ElementKind kind) {
  return static_cast<EventKind>(static_cast<int>(kind) * 3);
}
EventKind text_event(ElementKind kind) {
  return static_cast<EventKind>(static_cast<int>(kind) * 3 + 1);
}
EventKind done_event(ElementKind kind) {
  return static_cast<EventKind>(static_cast<int>(kind) * 3 + 2);
}
bool is_text_event(EventKind kind) {
  return kind != EventKind::DocumentDone && static_cast<int>(kind) % 3 == 1;
}
bool is_done_event(EventKind kind) {
  return kind != EventKind::DocumentDone && static_cast<int>(kind) % 3 == 2;
}
ElementKind element_of(EventKind kind) {
  if (kind == EventKind::DocumentDone) throw Error("DocumentDone has no element");
  return static_cast<ElementKind>(static_cast<int>(kind) / 3);
}

std::vector<ElementEvent> coalesce(const std::vector<ElementEvent>& events) {
  std::vector<ElementEvent> out;
  out.reserve(events.size());
  for (const auto& e : events) {
    if (is_text_event(e.kind) && !out.empty() && out.back().kind == e.kind) {
      out.back().payload += e.payload;
    } else {
      out.push_back(e);
    }
  }
  return out;
}

StreamParser::StreamParser(ParseMode mode) : mode_(mode) {}

StreamParser StreamParser::resume_at(ParserState state, ParseMode mode, std::size_t offset) {
  if (state == ParserState::Done || state == ParserState::Failed) {
    throw Error("cannot resume a parser in state " + std::string(to_string(state)));
  }
  StreamParser parser(mode);
  parser.state_ = state;
  parser.consumed_ = offset;
  parser.element_offset_ = offset;
  parser.saw_element_ = state != ParserState::AwaitTopicOpen || offset > 0;
  return parser;
}

bool StreamParser::in_element() const {
  return state_ == ParserState::InTopic || state_ == ParserState::InQuestion ||
         state_ == ParserState::InSpan;
}

ElementKind StreamParser::current_kind() const {
  switch (state_) {
    case ParserState::InTopic: return ElementKind::topic;
    case ParserState::InQuestion: return ElementKind::question;
    default: return ElementKind::span;
  }
}

ElementKind StreamParser::expected_kind() const {
  switch (state_) {
    case ParserState::AwaitQuestionOpen: return ElementKind::question;
    case ParserState::AwaitSpanOpen: return ElementKind::span;
    default: return ElementKind::topic;
  }
}

StreamParser::TagMatch StreamParser::match_tag(std::string_view rest, bool inside_element) const {
  TagMatch result;
  for (std::size_t i = 0; i < kTags.size(); ++i) {
    const auto& tag = info(i);
    bool candidate;
    if (inside_element || skipping_) {
      const ElementKind owner = skipping_ ? static_cast<ElementKind>(static_cast<int>(skip_close_) / 2)
                                          : current_kind();
      const bool own_close = !tag.opening && !tag.wrapper && tag.kind == owner;
      if (mode_ == ParseMode::strict) {
        candidate = own_close;
      } else {
        candidate = own_close || (tag.opening && !tag.wrapper) || (tag.wrapper && !tag.opening);
      }
    } else {
      candidate = mode_ == ParseMode::lenient || !tag.wrapper;
    }
    if (!candidate) continue;
    if (rest.substr(0, tag.text.size()) == tag.text) {
      result.complete = true;
      result.tag = static_cast<Tag>(i);
      result.length = tag.text.size();
      return result;
    }
    if (rest.size() < tag.text.size() && tag.text.substr(0, rest.size()) == rest) {
      result.partial = true;
    }
  }
  return result;
}

void StreamParser::fail(const std::string& what, std::size_t offset) {
  state_ = ParserState::Failed;
  throw ParseError(what, offset);
}

void StreamParser::open_element(ElementKind kind, std::size_t offset,
                                std::vector<ElementEvent>& out) {
  switch (kind) {
    case ElementKind::topic: state_ = ParserState::InTopic; break;
    case ElementKind::question: state_ = ParserState::InQuestion; break;
    case ElementKind::span: state_ = ParserState::InSpan; break;
  }
  element_.clear();
  element_offset_ = offset;
  saw_element_ = true;
  out.push_back({started_event(kind), {}, offset});
}

void StreamParser::close_element(std::size_t offset, std::vector<ElementEvent>& out) {
  const ElementKind kind = current_kind();
  out.push_back({done_event(kind), element_, offset});
  completed_.push_back({kind, element_, element_offset_});
  element_.clear();
  switch (kind) {
    case ElementKind::topic: state_ = ParserState::AwaitQuestionOpen; break;
    case ElementKind::question: state_ = ParserState::AwaitSpanOpen; break;
    case ElementKind::span: state_ = ParserState::AwaitTopicOpen; break;
  }
}

void StreamParser::emit_text(std::string_view text, std::size_t offset,
                             std::vector<ElementEvent>& out) {
  if (text.empty()) return;
  element_.append(text);
  const EventKind kind = text_event(current_kind());
  if (!out.empty() && out.back().kind == kind) {
    out.back().payload.append(text);
  } else {
    out.push_back({kind, std::string(text), offset});
  }
}

std::vector<ElementEvent> StreamParser::feed(std::string_view chunk) {
  if (state_ == ParserState::Failed) throw ParseError("parser already failed", consumed_);
  if (state_ == ParserState::Done) throw Error("feed after finish");

  std::vector<ElementEvent> out;
  const std::string buf = carry_ + std::string(chunk);
  const std::size_t base = consumed_;
  carry_.clear();

  std::size_t p = 0;
  while (p < buf.size()) {
    const std::string_view rest = std::string_view(buf).substr(p);

    if (in_element() || skipping_) {
      const auto lt = rest.find('<');
      const std::size_t upto = lt == std::string_view::npos ? rest.size() : lt;
      std::size_t text_end = upto;
      TagMatch m;
      if (lt != std::string_view::npos) {
        m = match_tag(rest.substr(lt), in_element());
        if (!m.complete && !m.partial) text_end = lt + 1;  // literal '<'
      }
      if (skipping_) {
        noise_ += text_end;
      } else {
        emit_text(rest.substr(0, text_end), base + p, out);
      }
      if (lt == std::string_view::npos || (!m.complete && !m.partial)) {
        p += text_end;
        continue;
      }
      const std::size_t tag_pos = p + lt;
      if (m.partial) {
        carry_ = buf.substr(tag_pos);
        p = buf.size();
        break;
      }
      const auto& tag = info(static_cast<std::size_t>(m.tag));
      if (skipping_) {
        skipping_ = false;
        if (m.tag == skip_close_) {
          noise_ += m.length;
          p = tag_pos + m.length;
        } else {
          p = tag_pos;  // reprocess the opening tag outside the skipped element
        }
        continue;
      }
      const bool own_close = !tag.opening && !tag.wrapper && tag.kind == current_kind();
      close_element(base + tag_pos, out);
      p = own_close ? tag_pos + m.length : tag_pos;
      continue;
    }

    const char c = rest.front();
    if (is_space(c)) {
      ++p;
      continue;
    }
    if (c != '<') {
      if (mode_ == ParseMode::strict) fail("unexpected text outside elements", base + p);
      ++noise_;
      ++p;
      continue;
    }
    const TagMatch m = match_tag(rest, false);
    if (m.partial) {
      carry_ = buf.substr(p);
      p = buf.size();
      break;
    }
    if (!m.complete) {
      if (mode_ == ParseMode::strict) fail("unexpected text outside elements", base + p);
      ++noise_;
      ++p;
      continue;
    }
    const auto& tag = info(static_cast<std::size_t>(m.tag));
    if (tag.wrapper) {
      noise_ += m.length;
    } else if (!tag.opening) {
      if (mode_ == ParseMode::strict) {
        fail("unexpected closing tag " + std::string(tag.text), base + p);
      }
      noise_ += m.length;
    } else if (tag.kind == expected_kind()) {
      open_element(tag.kind, base + p, out);
    } else if (mode_ == ParseMode::strict) {
      fail("out-of-order tag " + std::string(tag.text) + " (expected " +
               opening_tag(expected_kind()) + ")",
           base + p);
    } else {
      skipping_ = true;
      skip_close_ = static_cast<Tag>(static_cast<std::size_t>(m.tag) + 1);
      noise_ += m.length;
    }
    p += m.length;
  }
  consumed_ = base + buf.size() - carry_.size();
  return out;
}

std::vector<ElementEvent> StreamParser::finish() {
  if (state_ == ParserState::Failed) throw ParseError("parser already failed", consumed_);
  if (state_ == ParserState::Done) return {};

  std::vector<ElementEvent> out;
  const std::size_t end = consumed_ + carry_.size();
  if (!carry_.empty()) {
    if (in_element() && !skipping_) {
      emit_text(carry_, consumed_, out);
    } else if (skipping_ || mode_ == ParseMode::lenient) {
      noise_ += carry_.size();
    } else {
      fail("unexpected text outside elements", consumed_);
    }
    carry_.clear();
    consumed_ = end;
  }
  skipping_ = false;
  if (in_element()) {
    if (mode_ == ParseMode::strict) {
      fail("unclosed element " + opening_tag(current_kind()), element_offset_);
    }
    close_element(end, out);
  }
  if (mode_ == ParseMode::strict) {
    if (state_ == ParserState::AwaitQuestionOpen || state_ == ParserState::AwaitSpanOpen) {
      fail("incomplete segment: missing " + opening_tag(expected_kind()), end);
    }
    if (!saw_element_) fail("empty document", 0);
  }
  out.push_back({EventKind::DocumentDone, {}, end});
  state_ = ParserState::Done;
  return out;
}

}  // namespace ctrlgen::genstream
