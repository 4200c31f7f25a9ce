#include "ctrlgen/promptgen.hpp"

#include "ctrlgen/io.hpp"

namespace ctrlgen::promptgen {

guidelines::Kind kind_for(GuidelineMode g) {
  if (g == GuidelineMode::none) throw PromptError("guideline mode none has no guideline kind");
  return g == GuidelineMode::style ? guidelines::Kind::style : guidelines::Kind::instructions;
}

namespace {

void check_guideline(const corpus::ClinicalCase& c, const PromptConfig& cfg,
                     const std::optional<guidelines::AuthoringGuideline>& guideline) {
  if (cfg.g == GuidelineMode::none) return;
  if (!guideline) {
    throw PromptError("configuration g=" + std::string(to_string(cfg.g)) +
                      " requires an authoring guideline");
  }
  if (guideline->kind != kind_for(cfg.g)) {
    throw PromptError("guideline kind mismatch: configuration g=" + std::string(to_string(cfg.g)) +
                      " but guideline is " + std::string(guidelines::to_string(guideline->kind)));
  }
  if (guideline->task != cfg.task || guideline->target_id != c.case_id) {
    throw PromptError("guideline belongs to " + guideline->target_id + "/" +
                      std::string(to_string(guideline->task)) + ", not " + c.case_id + "/" +
                      std::string(to_string(cfg.task)));
  }
}

}  // namespace

std::string_view to_string(Control c) { return c == Control::none ? "none" : "topics"; }

std::string_view to_string(GuidelineMode g) {
  switch (g) {
    case GuidelineMode::none: return "none";
    case GuidelineMode::style: return "style";
    case GuidelineMode::instr: return "instr";
  }
  return "?";
}

Control parse_control(std::string_view text) {
  if (text == "none") return Control::none;
  if (text == "topics") return Control::topics;
  throw Error("unknown control configuration '" + std::string(text) + "' (expected none|topics)");
}

GuidelineMode parse_guideline_mode(std::string_view text) {
  if (text == "none") return GuidelineMode::none;
  if (text == "style") return GuidelineMode::style;
  if (text == "instr" || text == "instructions") return GuidelineMode::instr;
  throw Error("unknown guideline configuration '" + std::string(text) +
              "' (expected none|style|instr)");
}

std::vector<Block> build_user_blocks(const corpus::ClinicalCase& c, const PromptConfig& cfg,
                                     const std::optional<guidelines::AuthoringGuideline>& guideline,
                                     const std::optional<std::string>& bhc_output) {
  check_guideline(c, cfg, guideline);
  if (cfg.task == Task::di && !bhc_output) {
    throw PromptError("discharge instructions prompts require a brief hospital course");
  }

  std::vector<Block> blocks;
  blocks.push_back({"[DISCHARGE SUMMARY]", c.discharge_summary});
  for (std::size_t i = 0; i < c.radiology_reports.size(); ++i) {
    blocks.push_back({"[RADIOLOGY REPORT " + std::to_string(i + 1) + "]", c.radiology_reports[i]});
  }
  if (cfg.task == Task::di) blocks.push_back({"[BRIEF HOSPITAL COURSE]", *bhc_output});
  if (cfg.g == GuidelineMode::style) {
    blocks.push_back({"[STYLE GUIDELINES]", guideline->text});
    blocks.push_back({"", std::string(kStyleComplianceInstruction)});
  } else if (cfg.g == GuidelineMode::instr) {
    // the text opens with its own "## Writing Instructions" header
    blocks.push_back({"", guideline->text});
    blocks.push_back({"", std::string(kInstrComplianceInstruction)});
  }
  blocks.push_back(
      {"", std::string(cfg.task == Task::bhc ? kBhcTaskInstruction : kDiTaskInstruction)});
  if (cfg.c == Control::topics) blocks.push_back({"", std::string(kXmlOutputInstruction)});
  return blocks;
}

std::string render(const std::vector<Block>& blocks) {
  std::string out;
  for (const auto& b : blocks) {
    if (!out.empty()) out += "\n\n";
    if (!b.label.empty()) out += b.label + "\n";
    out += b.body;
  }
  return out;
}

std::string build_user_message(const corpus::ClinicalCase& c, const PromptConfig& cfg,
                               const std::optional<guidelines::AuthoringGuideline>& guideline,
                               const std::optional<std::string>& bhc_output) {
  return render(build_user_blocks(c, cfg, guideline, bhc_output));
}

std::string build_assistant_message(const corpus::ClinicalCase& c, const PromptConfig& cfg,
                                    const seg::Segmentation* seg) {
  if (cfg.c == Control::none) return c.target(cfg.task);
  if (seg == nullptr) throw PromptError("c=topics requires a segmentation of the target");
  if (seg->status != seg::Status::restored) {
    throw PromptError("segmentation of " + seg->target_id + " is " +
                      std::string(seg::to_string(seg->status)) + ", not restored");
  }
  return seg::serialize_xml(*seg);
}

std::string build_eval_user_message(const corpus::ClinicalCase& c, const PromptConfig& cfg,
                                    const std::optional<guidelines::AuthoringGuideline>& guideline,
                                    const std::optional<std::string>& bhc_output,
                                    const seg::Segmentation* seg_for_topics) {
  auto blocks = build_user_blocks(c, cfg, guideline, bhc_output);
  if (cfg.c == Control::topics) {
    if (seg_for_topics == nullptr) {
      throw PromptError("c=topics evaluation prompts require a segmentation for the topic list");
    }
    blocks.push_back({"", std::string(kCoveredTopicsInstruction) + "\n" +
                              seg::extract_headings_bullets(*seg_for_topics)});
  }
  return render(blocks);
}

PromptPair build_prompt_pair(const corpus::ClinicalCase& c, const PromptConfig& cfg,
                             const std::optional<guidelines::AuthoringGuideline>& guideline,
                             const std::optional<std::string>& bhc_output,
                             const seg::Segmentation* seg) {
  PromptPair p;
  p.user = build_user_message(c, cfg, guideline, bhc_output);
  p.assistant = build_assistant_message(c, cfg, seg);
  p.mask_begin = 0;
  p.mask_end = p.assistant.size();
  return p;
}

nlohmann::json to_json(const ExportReport& report) {
  nlohmann::json skipped = nlohmann::json::array();
  for (const auto& s : report.skipped) skipped.push_back({{"case_id", s.case_id}, {"reason", s.reason}});
  return {{"written", report.written}, {"skipped", skipped}};
}

ExportReport export_training_set(const std::vector<corpus::ClinicalCase>& cases,
                                 const PromptConfig& cfg, const seg::SegmentationStore& segs,
                                 const guidelines::GuidelineStore& guideline_store,
                                 const std::filesystem::path& out_path,
                                 const ExportOptions& options) {
  io::JsonlWriter out(out_path, io::JsonlWriter::Mode::truncate);
  ExportReport report;
  for (const auto& c : cases) {
    const seg::Segmentation* seg = nullptr;
    if (cfg.c == Control::topics) {
      seg = segs.find(c.case_id, cfg.task);
      if (seg == nullptr) {
        report.skipped.push_back({c.case_id, "no segmentation"});
        continue;
      }
      if (seg->status != seg::Status::restored) {
        std::string reason = "segmentation " + std::string(seg::to_string(seg->status));
        if (seg->rejection_reason) reason += ": " + *seg->rejection_reason;
        report.skipped.push_back({c.case_id, reason});
        continue;
      }
    }
    std::optional<guidelines::AuthoringGuideline> guideline;
    if (cfg.g != GuidelineMode::none) {
      const auto* g = guideline_store.find(c.case_id, cfg.task, kind_for(cfg.g));
      if (g == nullptr) {
        report.skipped.push_back({c.case_id, "no " + std::string(to_string(cfg.g)) + " guideline"});
        continue;
      }
      guideline = *g;
    }
    std::optional<std::string> bhc;
    if (cfg.task == Task::di) bhc = c.target_bhc;

    const auto pair = build_prompt_pair(c, cfg, guideline, bhc, seg);
    if (options.max_chars > 0 && pair.user.size() + pair.assistant.size() > options.max_chars) {
      report.skipped.push_back({c.case_id, "exceeds max_chars " + std::to_string(options.max_chars)});
      continue;
    }
    out.write({{"messages",
                {{{"role", "user"}, {"content", pair.user}},
                 {{"role", "assistant"}, {"content", pair.assistant}}}},
               {"meta",
                {{"case_id", c.case_id},
                 {"task", std::string(to_string(cfg.task))},
                 {"c", std::string(to_string(cfg.c))},
                 {"g", std::string(to_string(cfg.g))},
                 {"template_version", std::string(kTemplateVersion)}}}});
    ++report.written;
  }
  return report;
}

}  // namespace ctrlgen::promptgen
