#include "ctrlgen/corpus.hpp"

#include <algorithm>
#include <map>
#include <regex>
#include <set>
#include <unordered_map>

#include "ctrlgen/io.hpp"

namespace ctrlgen::corpus {

namespace {

using json = nlohmann::json;

struct Line {
  std::size_t begin;  // first byte
  std::size_t end;    // one past last byte, excluding the newline
};

std::vector<Line> split_lines(std::string_view text) {
  std::vector<Line> lines;
  std::size_t begin = 0;
  while (begin <= text.size()) {
    const auto nl = text.find('\n', begin);
    if (nl == std::string_view::npos) {
      if (begin < text.size()) lines.push_back({begin, text.size()});
      break;
    }
    lines.push_back({begin, nl});
    begin = nl + 1;
  }
  return lines;
}

std::vector<std::regex> compile(const std::vector<std::string>& patterns) {
  std::vector<std::regex> out;
  out.reserve(patterns.size());
  for (const auto& p : patterns) {
    try {
      out.emplace_back(p, std::regex::ECMAScript | std::regex::icase);
    } catch (const std::regex_error& e) {
      throw Error("invalid section pattern '" + p + "': " + e.what());
    }
  }
  return out;
}

struct CompiledSpec {
  explicit CompiledSpec(const SectionSpec& spec)
      : bhc(compile(spec.bhc_header_patterns)),
        di(compile(spec.di_header_patterns)),
        end(compile(spec.end_markers)),
        bhc_label(join(spec.bhc_header_patterns, "|")),
        di_label(join(spec.di_header_patterns, "|")) {}

  std::vector<std::regex> bhc;
  std::vector<std::regex> di;
  std::vector<std::regex> end;
  std::string bhc_label;
  std::string di_label;
};

// Length of the match at the start of the line (after leading blanks), or
// npos when no pattern matches there.
std::size_t match_at_line_start(std::string_view line, const std::vector<std::regex>& patterns) {
  std::size_t indent = 0;
  while (indent < line.size() && (line[indent] == ' ' || line[indent] == '\t')) ++indent;
  const auto body = line.substr(indent);
  for (const auto& re : patterns) {
    std::match_results<std::string_view::const_iterator> m;
    if (std::regex_search(body.begin(), body.end(), m, re, std::regex_constants::match_continuous)) {
      return indent + static_cast<std::size_t>(m.length(0));
    }
  }
  return std::string_view::npos;
}

struct Region {
  std::size_t begin;       // header line start
  std::size_t body_begin;  // end of header match
  std::size_t end;         // start of next marker line, or end of text
};

ExtractedTargets extract_compiled(std::string_view raw, const CompiledSpec& spec) {
  const auto lines = split_lines(raw);

  struct HeaderHit {
    std::size_t line;
    std::size_t match_end;
  };
  std::vector<HeaderHit> bhc_hits;
  std::vector<HeaderHit> di_hits;
  std::vector<bool> is_marker(lines.size(), false);

  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto line = raw.substr(lines[i].begin, lines[i].end - lines[i].begin);
    if (const auto n = match_at_line_start(line, spec.bhc); n != std::string_view::npos) {
      bhc_hits.push_back({i, lines[i].begin + n});
      is_marker[i] = true;
    } else if (const auto d = match_at_line_start(line, spec.di); d != std::string_view::npos) {
      di_hits.push_back({i, lines[i].begin + d});
      is_marker[i] = true;
    } else if (match_at_line_start(line, spec.end) != std::string_view::npos) {
      is_marker[i] = true;
    }
  }

  auto locate = [&](const std::vector<HeaderHit>& hits, Task section,
                    const std::string& label) -> Region {
    if (hits.empty()) throw SectionError(SectionError::Kind::no_section, section, label);
    if (hits.size() > 1) throw SectionError(SectionError::Kind::ambiguous_section, section, label);
    const auto& hit = hits.front();
    std::size_t end = raw.size();
    for (std::size_t j = hit.line + 1; j < lines.size(); ++j) {
      if (is_marker[j]) {
        end = lines[j].begin;
        break;
      }
    }
    return {lines[hit.line].begin, hit.match_end, end};
  };

  const Region bhc = locate(bhc_hits, Task::bhc, spec.bhc_label);
  const Region di = locate(di_hits, Task::di, spec.di_label);

  auto body = [&](const Region& r) {
    auto text = trim(raw.substr(r.body_begin, r.end - r.body_begin));
    while (!text.empty() && text.front() == ':') text = trim(text.substr(1));
    return std::string(text);
  };

  ExtractedTargets out;
  out.bhc = body(bhc);
  out.di = body(di);
  const Region& first = bhc.begin < di.begin ? bhc : di;
  const Region& second = bhc.begin < di.begin ? di : bhc;
  out.residual.append(raw.substr(0, first.begin));
  out.residual.append(raw.substr(first.end, second.begin - first.end));
  out.residual.append(raw.substr(second.end));
  return out;
}

}  // namespace

SectionSpec SectionSpec::defaults() {
  SectionSpec spec;
  spec.bhc_header_patterns = {"brief hospital course"};
  spec.di_header_patterns = {"discharge instructions"};
  spec.end_markers = {
      "medications on admission",   "discharge medications", "discharge disposition",
      "discharge diagnos",          "discharge condition",   "follow-?up instructions",
      "discharge physical exam",    "pertinent results",     "facility:",
  };
  return spec;
}

void SectionSpec::validate() const {
  if (bhc_header_patterns.empty() || di_header_patterns.empty()) {
    throw Error("section spec needs at least one header pattern per section");
  }
}

SectionError::SectionError(Kind kind, Task section, std::string pattern)
    : Error(std::string(kind == Kind::no_section ? "NoSection" : "AmbiguousSection") + "(" +
            std::string(to_string(section)) + "): pattern '" + pattern + "'"),
      kind_(kind),
      section_(section),
      pattern_(std::move(pattern)) {}

ExtractedTargets extract_targets(std::string_view raw_summary, const SectionSpec& spec) {
  spec.validate();
  if (raw_summary.empty()) throw Error("extract_targets: empty summary");
  return extract_compiled(raw_summary, CompiledSpec(spec));
}

LoadResult load_corpus(const std::filesystem::path& summaries_path,
                       const std::filesystem::path& reports_path, const SectionSpec& spec) {
  spec.validate();
  io::CsvTable summaries;
  io::CsvTable reports;
  try {
    summaries = io::read_csv(summaries_path);
    reports = io::read_csv(reports_path);
  } catch (const io::IoError& e) {
    throw CorpusError(e.what());
  }

  LoadResult result;
  if (summaries.header.empty()) return result;

  std::size_t s_id, s_text, r_id, r_report, r_text;
  try {
    s_id = summaries.column("hadm_id");
    s_text = summaries.column("text");
  } catch (const io::IoError& e) {
    throw CorpusError(summaries_path.string() + ": " + e.what());
  }
  std::optional<std::size_t> s_cc;
  if (summaries.has_column("chief_complaint")) s_cc = summaries.column("chief_complaint");

  std::unordered_map<std::string, std::vector<std::string>> reports_by_case;
  if (!reports.header.empty()) {
    try {
      r_id = reports.column("hadm_id");
      r_report = reports.column("report_id");
      r_text = reports.column("text");
    } catch (const io::IoError& e) {
      throw CorpusError(reports_path.string() + ": " + e.what());
    }
    (void)r_report;  // file order is authoritative
    for (const auto& row : reports.rows) {
      reports_by_case[std::string(trim(row[r_id]))].push_back(row[r_text]);
    }
  }

  std::map<std::string, int> seen;
  for (const auto& row : summaries.rows) ++seen[std::string(trim(row[s_id]))];
  std::vector<std::string> duplicates;
  for (const auto& [id, n] : seen) {
    if (n > 1) duplicates.push_back(id);
  }
  if (!duplicates.empty()) {
    throw CorpusError("duplicate admission ids: " + join(duplicates, ", "));
  }

  const CompiledSpec compiled(spec);
  for (const auto& row : summaries.rows) {
    const std::string id(trim(row[s_id]));
    const std::string& raw = row[s_text];
    if (raw.empty()) {
      result.skipped.push_back({id, "empty summary text"});
      continue;
    }
    ExtractedTargets targets;
    try {
      targets = extract_compiled(raw, compiled);
    } catch (const SectionError& e) {
      result.skipped.push_back({id, e.what()});
      continue;
    }
    if (targets.bhc.empty() || targets.di.empty()) {
      result.skipped.push_back({id, std::string("empty target section (") +
                                        (targets.bhc.empty() ? "bhc" : "di") + ")"});
      continue;
    }
    if (targets.residual.find(targets.bhc) != std::string::npos ||
        targets.residual.find(targets.di) != std::string::npos) {
      result.skipped.push_back({id, "target text also occurs in residual summary"});
      continue;
    }
    ClinicalCase c;
    c.case_id = id;
    c.discharge_summary = std::move(targets.residual);
    c.target_bhc = std::move(targets.bhc);
    c.target_di = std::move(targets.di);
    if (auto it = reports_by_case.find(id); it != reports_by_case.end()) {
      c.radiology_reports = it->second;
    }
    if (s_cc && !row[*s_cc].empty()) c.chief_complaint = row[*s_cc];
    result.cases.push_back(std::move(c));
  }
  return result;
}

json to_json(const ClinicalCase& c) {
  json j = {
      {"case_id", c.case_id},
      {"discharge_summary", c.discharge_summary},
      {"radiology_reports", c.radiology_reports},
      {"target_bhc", c.target_bhc},
      {"target_di", c.target_di},
  };
  if (c.chief_complaint) j["chief_complaint"] = *c.chief_complaint;
  return j;
}

ClinicalCase case_from_json(const json& j) {
  ClinicalCase c;
  try {
    c.case_id = j.at("case_id").get<std::string>();
    c.discharge_summary = j.at("discharge_summary").get<std::string>();
    c.radiology_reports = j.value("radiology_reports", std::vector<std::string>{});
    if (j.contains("chief_complaint")) c.chief_complaint = j.at("chief_complaint").get<std::string>();
    c.target_bhc = j.at("target_bhc").get<std::string>();
    c.target_di = j.at("target_di").get<std::string>();
  } catch (const json::exception& e) {
    throw CorpusError(std::string("malformed case record: ") + e.what());
  }
  return c;
}

void write_cases(const std::filesystem::path& path, const std::vector<ClinicalCase>& cases) {
  io::JsonlWriter writer(path, io::JsonlWriter::Mode::truncate);
  for (const auto& c : cases) writer.write(to_json(c));
}

std::vector<ClinicalCase> read_cases(const std::filesystem::path& path) {
  std::vector<ClinicalCase> cases;
  for (const auto& record : io::read_jsonl(path)) cases.push_back(case_from_json(record));
  return cases;
}

}  // namespace ctrlgen::corpus
