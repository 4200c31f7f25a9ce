#include "ctrlgen/segmentation.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>

#include "ctrlgen/io.hpp"

namespace ctrlgen::seg {

namespace {

using json = nlohmann::json;
using genstream::ElementKind;

constexpr std::array<std::string_view, 8> kControlTags = {
    "<topic>", "</topic>", "<question>", "</question>",
    "<span>",  "</span>",  "<split-text>", "</split-text>",
};

void check_element(std::string_view text, std::string_view name, std::size_t index) {
  if (is_blank(text)) {
    throw Error("segment " + std::to_string(index) + ": blank " + std::string(name));
  }
  for (const auto tag : kControlTags) {
    if (text.find(tag) != std::string_view::npos) {
      throw UnencodableElement("segment " + std::to_string(index) + ": " + std::string(name) +
                               " contains control tag " + std::string(tag));
    }
  }
}

}  // namespace

std::string_view to_string(Status status) {
  switch (status) {
    case Status::raw: return "raw";
    case Status::restored: return "restored";
    case Status::rejected: return "rejected";
  }
  return "?";
}

Status parse_status(std::string_view text) {
  if (text == "raw") return Status::raw;
  if (text == "restored") return Status::restored;
  if (text == "rejected") return Status::rejected;
  throw Error("unknown segmentation status '" + std::string(text) + "'");
}

std::string serialize_xml(const Segmentation& seg) {
  if (seg.segments.empty()) throw Error("serialize_xml: segmentation has no segments");
  std::string out;
  for (std::size_t i = 0; i < seg.segments.size(); ++i) {
    const auto& s = seg.segments[i];
    check_element(s.heading, "heading", i);
    check_element(s.question, "question", i);
    check_element(s.span, "span", i);
    if (i > 0) out += "\n\n";
    out += "<topic>" + s.heading + "</topic>\n";
    out += "<question>" + s.question + "</question>\n";
    out += "<span>" + s.span + "</span>";
  }
  return out;
}

Segmentation parse_xml(std::string_view text, ParseMode mode) {
  genstream::StreamParser parser(mode);
  parser.feed(text);
  parser.finish();

  Segmentation seg;
  Segment current;
  std::size_t filled = 0;  // elements of `current` seen so far, in cycle order
  bool current_ok = true;
  for (const auto& element : parser.completed()) {
    if (mode == ParseMode::strict && is_blank(element.text)) {
      throw ParseError("blank " + opening_tag(element.kind) + " element", element.offset);
    }
    current_ok = current_ok && !is_blank(element.text);
    switch (element.kind) {
      case ElementKind::topic: current.heading = element.text; break;
      case ElementKind::question: current.question = element.text; break;
      case ElementKind::span: current.span = element.text; break;
    }
    if (++filled == 3) {
      if (current_ok) seg.segments.push_back(std::move(current));
      current = Segment{};
      filled = 0;
      current_ok = true;
    }
  }
  if (seg.segments.empty()) throw ParseError("no recoverable segments", 0);
  return seg;
}

WordEditScript word_diff(std::string_view original, std::string_view generated) {
  const auto a = whitespace_words(original);
  const auto b = whitespace_words(generated);
  const std::size_t n = a.size();
  const std::size_t m = b.size();

  // lcs[i][j] = LCS length of a[i..] and b[j..]
  const std::size_t width = m + 1;
  std::vector<std::uint32_t> lcs((n + 1) * width, 0);
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t j = m; j-- > 0;) {
      lcs[i * width + j] = a[i] == b[j]
                               ? lcs[(i + 1) * width + j + 1] + 1
                               : std::max(lcs[(i + 1) * width + j], lcs[i * width + j + 1]);
    }
  }

  WordEditScript script;
  std::vector<std::string> dels;
  std::vector<std::string> ins;
  auto flush_diff = [&] {
    if (dels.empty() && ins.empty()) return;
    if (!dels.empty() && !ins.empty()) {
      script.push_back(EditOp::replace(std::move(dels), std::move(ins)));
    } else if (!dels.empty()) {
      script.push_back(EditOp::del(std::move(dels)));
    } else {
      script.push_back(EditOp::insert(std::move(ins)));
    }
    dels.clear();
    ins.clear();
  };
  auto push_equal = [&] {
    flush_diff();
    if (!script.empty() && script.back().kind == EditOp::Kind::equal) {
      ++script.back().count;
    } else {
      script.push_back(EditOp::equal(1));
    }
  };

  std::size_t i = 0;
  std::size_t j = 0;
  while (i < n || j < m) {
    if (i < n && j < m && a[i] == b[j]) {
      push_equal();
      ++i;
      ++j;
    } else if (j == m || (i < n && lcs[(i + 1) * width + j] >= lcs[i * width + j + 1])) {
      dels.push_back(a[i++]);
    } else {
      ins.push_back(b[j++]);
    }
  }
  flush_diff();
  return script;
}

std::vector<std::string> apply_script(const WordEditScript& script,
                                      const std::vector<std::string>& original_words) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  auto expect = [&](const std::vector<std::string>& words) {
    for (const auto& w : words) {
      if (pos >= original_words.size() || original_words[pos] != w) {
        throw Error("edit script does not match original at token " + std::to_string(pos));
      }
      ++pos;
    }
  };
  for (const auto& op : script) {
    switch (op.kind) {
      case EditOp::Kind::equal:
        if (pos + op.count > original_words.size()) throw Error("edit script overruns original");
        out.insert(out.end(), original_words.begin() + static_cast<std::ptrdiff_t>(pos),
                   original_words.begin() + static_cast<std::ptrdiff_t>(pos + op.count));
        pos += op.count;
        break;
      case EditOp::Kind::insert:
        out.insert(out.end(), op.new_words.begin(), op.new_words.end());
        break;
      case EditOp::Kind::del:
        expect(op.old_words);
        break;
      case EditOp::Kind::replace:
        expect(op.old_words);
        out.insert(out.end(), op.new_words.begin(), op.new_words.end());
        break;
    }
  }
  if (pos != original_words.size()) throw Error("edit script leaves original tokens unconsumed");
  return out;
}

bool has_consecutive_differences(const WordEditScript& script) {
  bool previous_was_diff = false;
  for (const auto& op : script) {
    if (op.kind == EditOp::Kind::equal) {
      if (op.count > 0) previous_was_diff = false;
      continue;
    }
    if (op.old_words.size() >= 2 || op.new_words.size() >= 2) return true;
    if (previous_was_diff) return true;
    previous_was_diff = true;
  }
  return false;
}

Segmentation restore_spans(std::string_view original, const Segmentation& raw) {
  if (raw.status != Status::raw) throw Error("restore_spans: segmentation is not raw");
  if (raw.segments.empty()) throw Error("restore_spans: segmentation has no segments");

  Segmentation out = raw;
  auto reject = [&](std::string_view reason) {
    out.status = Status::rejected;
    out.rejection_reason = std::string(reason);
    for (auto& s : out.segments) s.char_range.reset();
    return out;
  };

  const auto orig_tokens = whitespace_tokens(original);
  std::vector<std::size_t> owner;  // generated token -> segment index
  std::vector<std::string> spans;
  for (std::size_t k = 0; k < raw.segments.size(); ++k) {
    const auto words = whitespace_tokens(raw.segments[k].span);
    owner.insert(owner.end(), words.size(), k);
    spans.push_back(raw.segments[k].span);
  }

  const WordEditScript script = word_diff(original, join(spans, " "));
  if (has_consecutive_differences(script)) return reject(kRejectConsecutive);

  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> first_aligned(raw.segments.size(), kNone);
  auto align = [&](std::size_t gen, std::size_t orig) {
    auto& slot = first_aligned[owner[gen]];
    slot = std::min(slot, orig);
  };
  std::size_t oi = 0;
  std::size_t gi = 0;
  for (const auto& op : script) {
    switch (op.kind) {
      case EditOp::Kind::equal:
        for (std::size_t t = 0; t < op.count; ++t) align(gi + t, oi + t);
        oi += op.count;
        gi += op.count;
        break;
      case EditOp::Kind::replace:
        if (op.old_words.size() == 1 && op.new_words.size() == 1) align(gi, oi);
        oi += op.old_words.size();
        gi += op.new_words.size();
        break;
      case EditOp::Kind::insert:
        gi += op.new_words.size();
        break;
      case EditOp::Kind::del:
        oi += op.old_words.size();
        break;
    }
  }
  if (std::find(first_aligned.begin(), first_aligned.end(), kNone) != first_aligned.end()) {
    return reject(kRejectEmptyAlignment);
  }

  for (std::size_t k = 0; k < out.segments.size(); ++k) {
    const std::size_t begin = k == 0 ? 0 : orig_tokens[first_aligned[k]].begin;
    const std::size_t end =
        k + 1 == out.segments.size() ? original.size() : orig_tokens[first_aligned[k + 1]].begin;
    out.segments[k].char_range = CharRange{begin, end};
    out.segments[k].span = std::string(original.substr(begin, end - begin));
  }
  out.status = Status::restored;
  out.rejection_reason.reset();
  return out;
}

std::string join_spans(const Segmentation& seg) {
  if (seg.segments.empty()) throw Error("join_spans: segmentation has no segments");
  std::vector<std::string> spans;
  spans.reserve(seg.segments.size());
  for (const auto& s : seg.segments) spans.push_back(s.span);
  return join(spans, " ");
}

std::string extract_headings_bullets(const Segmentation& seg) {
  if (seg.segments.empty()) throw Error("extract_headings_bullets: segmentation has no segments");
  std::vector<std::string> lines;
  lines.reserve(seg.segments.size());
  for (const auto& s : seg.segments) lines.push_back("- " + s.heading);
  return join(lines, "\n");
}

json to_json(const Segmentation& seg) {
  json segments = json::array();
  for (const auto& s : seg.segments) {
    json js = {{"heading", s.heading}, {"question", s.question}, {"span", s.span}};
    if (s.char_range) {
      js["char_start"] = s.char_range->begin;
      js["char_end"] = s.char_range->end;
    }
    segments.push_back(std::move(js));
  }
  json j = {
      {"target_id", seg.target_id},
      {"task", std::string(to_string(seg.task))},
      {"status", std::string(to_string(seg.status))},
      {"segments", std::move(segments)},
  };
  if (seg.rejection_reason) j["rejection_reason"] = *seg.rejection_reason;
  return j;
}

Segmentation segmentation_from_json(const json& j) {
  Segmentation seg;
  try {
    seg.target_id = j.at("target_id").get<std::string>();
    seg.task = parse_task(j.at("task").get<std::string>());
    seg.status = parse_status(j.at("status").get<std::string>());
    if (j.contains("rejection_reason")) {
      seg.rejection_reason = j.at("rejection_reason").get<std::string>();
    }
    for (const auto& js : j.at("segments")) {
      Segment s;
      s.heading = js.at("heading").get<std::string>();
      s.question = js.at("question").get<std::string>();
      s.span = js.at("span").get<std::string>();
      if (js.contains("char_start") && js.contains("char_end")) {
        s.char_range = CharRange{js.at("char_start").get<std::size_t>(),
                                 js.at("char_end").get<std::size_t>()};
      }
      seg.segments.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw Error(std::string("malformed segmentation record: ") + e.what());
  }
  return seg;
}

SegmentationStore SegmentationStore::load(const std::filesystem::path& path) {
  SegmentationStore store;
  for (const auto& record : io::read_jsonl(path)) {
    auto seg = segmentation_from_json(record);
    if (seg.status != Status::raw) store.put(seg);
  }
  return store;
}

void SegmentationStore::put(const Segmentation& seg) {
  records_[{seg.target_id, seg.task}] = seg;
}

const Segmentation* SegmentationStore::find(const std::string& target_id, Task task) const {
  const auto it = records_.find({target_id, task});
  return it == records_.end() ? nullptr : &it->second;
}

}  // namespace ctrlgen::seg
