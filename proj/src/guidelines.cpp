#include "ctrlgen/guidelines.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "ctrlgen/io.hpp"

namespace ctrlgen::guidelines {

namespace {

using json = nlohmann::json;

constexpr std::string_view kPayload = "{{target text}}";

// Literal "\n" sequences in the answer-format lines are part of the prompt
// text, not line breaks.
constexpr std::string_view kSegmentationTemplate =
    "<text>{{target text}}</text>\n"
    "\n"
    "You are tasked with fine-grained topic segmentation. Given this formatted text, segment the "
    "paragraphs into as many short blocks as sensible, each with a distinct topic. Give each block "
    "a meaningful, short topic heading, summarizing the most important information from the "
    "beginning of the block for the intended audience, and a subtitle, which reformulates the "
    "topic as a question that is answered by the block.\n"
    "Guidelines:\n"
    "- Segment everything from the very first to the very last word/character/symbol.\n"
    "- Terminate spans and insert new headings, whenever the upcoming text does not match the "
    "current running topic anymore, e.g. whenever the medical, clinical or healthcare focus "
    "changes.\n"
    "- When formulating questions, do not use pronouns as the subjects, and do not use possessive "
    "pronouns.\n"
    "- Do not alter the text. Copy typos, errors, mistakes and formatting from the original text.\n"
    "- Include headings, symbols, separators, vertical/horizontal spacing, empty lines and other "
    "formattings with their associated blocks.\n"
    "Answer format: '<split-text>\\n<topic>...</topic>\\n<question>...</question>\\n<span>...</span>"
    "\\n\\n<topic>...</topic>\\n<question>...</question>\\n<span>...</span>\\n\\n...</split-text>'";

constexpr std::string_view kStyleTemplate =
    "<text>{{target text}}</text>\n"
    "\n"
    "Describe the text's tone, writing style, document format, layout, composition, textual "
    "structure, use of language, use of abbreviations, use of medical jargon, the intendened "
    "audience and anything else noteworthy. Write full sentences and paragraphs.\n"
    "\n"
    "Guidelines:\n"
    "- Do not use the terms from the text.\n"
    "- Do not quote the text.\n"
    "- Do not give examples from the text.\n"
    "- Do not reveal details about the patient.";

constexpr std::string_view kInstructionsTemplate =
    "<text>{{target text}}</text>\n"
    "\n"
    "Please provide detailed and comprehensive writing instructions for a non-specialist to "
    "exactly reproduce the text above. The instructions should include details on:\n"
    "- the purpose and intent of the text, including how it is achieved\n"
    "- the intended audience, including how the audience's needs are met\n"
    "- the tone of text, including how to achieve it\n"
    "- the text structure and outline\n"
    "- the text disposition\n"
    "- the text formatting (not typographical), such as (but not only) the use of paragraphs, "
    "subheadings, introductions, closings, bullet points, list, including any apparent rules and "
    "patterns\n"
    "- the use of language, including the use of abbreviations and medical jargon (if it is used), "
    "with respect to the audience\n"
    "- and any other noteworty features.\n"
    "\n"
    "Guidelines:\n"
    "- Use an instructive tone for writing.\n"
    "- Consider that the non-specialist will not see the original text.\n"
    "- Do not use the terms from the text.\n"
    "- Do not quote the text.\n"
    "- Do not give examples from the text.\n"
    "- Do not reveal details about the patient.\n"
    "\n"
    "Answer format: '## Writing Instructions\\n\\n...'";

std::string fill(std::string_view tmpl, std::string_view target) {
  const auto pos = tmpl.find(kPayload);
  std::string out;
  out.reserve(tmpl.size() + target.size());
  out.append(tmpl.substr(0, pos));
  out.append(target);
  out.append(tmpl.substr(pos + kPayload.size()));
  return out;
}

void require_target(std::string_view target) {
  if (target.empty()) throw Error("prompt target is empty");
}

std::vector<std::string> normalize_words(std::string_view text) {
  std::vector<std::string> out;
  for (const auto& word : whitespace_words(text)) {
    std::string w;
    for (const char c : word) {
      if (std::ispunct(static_cast<unsigned char>(c))) continue;
      w += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    if (!w.empty()) out.push_back(std::move(w));
  }
  return out;
}

void remove_phrase(std::vector<std::string>& words, const std::vector<std::string>& phrase) {
  if (phrase.empty() || phrase.size() > words.size()) return;
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < words.size()) {
    if (i + phrase.size() <= words.size() &&
        std::equal(phrase.begin(), phrase.end(), words.begin() + static_cast<std::ptrdiff_t>(i))) {
      i += phrase.size();
    } else {
      out.push_back(words[i++]);
    }
  }
  words = std::move(out);
}

}  // namespace

std::string_view to_string(Kind kind) {
  return kind == Kind::style ? "style" : "instructions";
}

Kind parse_kind(std::string_view text) {
  if (text == "style") return Kind::style;
  if (text == "instructions" || text == "instr") return Kind::instructions;
  throw Error("unknown guideline kind '" + std::string(text) + "'");
}

std::string_view to_string(Verdict verdict) { return verdict == Verdict::pass ? "pass" : "warn"; }

void validate(const AuthoringGuideline& g) {
  if (is_blank(g.text)) throw Error("guideline text is empty");
  if (g.kind == Kind::instructions) {
    const auto first_line = std::string_view(g.text).substr(0, g.text.find('\n'));
    if (trim(first_line) != kInstructionsHeader) {
      throw Error("writing instructions must start with the line '" +
                  std::string(kInstructionsHeader) + "'");
    }
  }
}

std::string build_segmentation_prompt(std::string_view target) {
  require_target(target);
  return fill(kSegmentationTemplate, target);
}

std::string build_style_prompt(std::string_view target) {
  require_target(target);
  return fill(kStyleTemplate, target);
}

std::string build_instructions_prompt(std::string_view target) {
  require_target(target);
  return fill(kInstructionsTemplate, target);
}

LeakageReport leakage_screen(std::string_view guideline_text, std::string_view target,
                             const LeakageOptions& options) {
  if (options.n < 2) throw Error("leakage_screen: n must be at least 2");
  auto a = normalize_words(guideline_text);
  auto b = normalize_words(target);
  for (const auto& phrase : options.stop_phrases) {
    const auto p = normalize_words(phrase);
    remove_phrase(a, p);
    remove_phrase(b, p);
  }

  // run[i][j]: length of the common run ending at a[i-1], b[j-1]
  const std::size_t width = b.size() + 1;
  std::vector<std::size_t> run((a.size() + 1) * width, 0);
  std::size_t longest = 0;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      if (a[i - 1] == b[j - 1]) {
        run[i * width + j] = run[(i - 1) * width + j - 1] + 1;
        longest = std::max(longest, run[i * width + j]);
      }
    }
  }

  std::set<std::string> seen;
  std::vector<std::string> phrases;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t len = run[i * width + j];
      if (len < options.n) continue;
      const bool extends = i < a.size() && j < b.size() && a[i] == b[j];
      if (extends) continue;
      std::vector<std::string> words(a.begin() + static_cast<std::ptrdiff_t>(i - len),
                                     a.begin() + static_cast<std::ptrdiff_t>(i));
      auto phrase = join(words, " ");
      if (seen.insert(phrase).second) phrases.push_back(std::move(phrase));
    }
  }
  std::stable_sort(phrases.begin(), phrases.end(), [](const auto& x, const auto& y) {
    return std::count(x.begin(), x.end(), ' ') > std::count(y.begin(), y.end(), ' ');
  });

  LeakageReport report;
  report.max_ngram_overlap = longest >= options.n ? longest : 0;
  report.flagged_phrases = std::move(phrases);
  report.verdict = report.max_ngram_overlap >= options.threshold ? Verdict::warn : Verdict::pass;
  return report;
}

json to_json(const AuthoringGuideline& g) {
  return {
      {"target_id", g.target_id},
      {"task", std::string(to_string(g.task))},
      {"kind", std::string(to_string(g.kind))},
      {"text", g.text},
      {"model_id", g.model_id},
      {"created_at", g.created_at},
  };
}

AuthoringGuideline guideline_from_json(const json& j) {
  AuthoringGuideline g;
  try {
    g.target_id = j.at("target_id").get<std::string>();
    g.task = parse_task(j.at("task").get<std::string>());
    g.kind = parse_kind(j.at("kind").get<std::string>());
    g.text = j.at("text").get<std::string>();
    g.model_id = j.value("model_id", "");
    g.created_at = j.value("created_at", "");
  } catch (const json::exception& e) {
    throw Error(std::string("malformed guideline record: ") + e.what());
  }
  return g;
}

GuidelineStore GuidelineStore::load(const std::filesystem::path& path) {
  GuidelineStore store;
  for (const auto& record : io::read_jsonl(path)) store.put(guideline_from_json(record));
  return store;
}

void GuidelineStore::put(const AuthoringGuideline& g) {
  records_[{g.target_id, g.task, g.kind}] = g;
}

const AuthoringGuideline* GuidelineStore::find(const std::string& target_id, Task task,
                                               Kind kind) const {
  const auto it = records_.find({target_id, task, kind});
  return it == records_.end() ? nullptr : &it->second;
}

}  // namespace ctrlgen::guidelines
