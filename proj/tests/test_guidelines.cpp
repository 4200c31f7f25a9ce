#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "ctrlgen/guidelines.hpp"
#include "ctrlgen/io.hpp"
#include "test_support.hpp"

using namespace ctrlgen;
using namespace ctrlgen::guidelines;
using ctrlgen::testing::data_path;

namespace {

std::string golden(const std::string& name) { return io::read_file(data_path("golden/" + name)); }

const std::string kPlaceholder = "{{target text}}";

}  // namespace

TEST_CASE("prompts byte-match the golden transcriptions") {
  CHECK(build_segmentation_prompt(kPlaceholder) == golden("segmentation_prompt.txt"));
  CHECK(build_style_prompt(kPlaceholder) == golden("style_prompt.txt"));
  CHECK(build_instructions_prompt(kPlaceholder) == golden("instructions_prompt.txt"));
}

TEST_CASE("segmentation prompt content") {
  const auto p = build_segmentation_prompt("X");
  CHECK(p.find("fine-grained topic segmentation") != std::string::npos);
  CHECK(p.find("<split-text>") != std::string::npos);
  CHECK(count_occurrences(p, "<text>X</text>") == 1);
}

TEST_CASE("style prompt content") {
  const auto p = build_style_prompt("X");
  CHECK(p.rfind("<text>X</text>", 0) == 0);
  CHECK(p.find("intendened audience") != std::string::npos);
  for (const auto* line : {"- Do not use the terms from the text.", "- Do not quote the text.",
                           "- Do not give examples from the text.",
                           "- Do not reveal details about the patient."}) {
    CHECK(p.find(line) != std::string::npos);
  }
}

TEST_CASE("instructions prompt content") {
  const auto p = build_instructions_prompt("X");
  CHECK(p.find("Use an instructive tone for writing.") != std::string::npos);
  CHECK(p.find("the purpose and intent of the text") != std::string::npos);
  CHECK(p.find("'## Writing Instructions\\n\\n...'") != std::string::npos);
  CHECK(count_occurrences(p, "<text>X</text>") == 1);
}

TEST_CASE("prompt builders are injective and reject empty targets") {
  for (auto build : {build_segmentation_prompt, build_style_prompt, build_instructions_prompt}) {
    CHECK(build("a") != build("b"));
    CHECK(build("a b") != build("ab"));
    CHECK(build("a") == build("a"));
    CHECK_THROWS_AS(build(""), Error);
  }
}

TEST_CASE("leakage screen examples") {
  SUBCASE("identical texts") {
    const std::string t = "The patient was admitted with chest pain.";
    const auto r = leakage_screen(t, t);
    CHECK(r.max_ngram_overlap == 7);
    CHECK(r.verdict == Verdict::warn);
    CHECK(r.flagged_phrases == std::vector<std::string>{"the patient was admitted with chest pain"});
  }
  SUBCASE("disjoint vocabularies") {
    const auto r = leakage_screen("Use a formal tone.", "Pt stable; discharged home.");
    CHECK(r.max_ngram_overlap == 0);
    CHECK(r.verdict == Verdict::pass);
    CHECK(r.flagged_phrases.empty());
  }
  SUBCASE("shared four-word phrase") {
    LeakageOptions opt;
    opt.threshold = 4;
    const auto r = leakage_screen("Mention Lower limb edema, and similar findings briefly.",
                                  "admitted due to fatigue, dyspnea, lower limb edema and pain.",
                                  opt);
    CHECK(r.max_ngram_overlap == 4);
    CHECK(r.verdict == Verdict::warn);
    CHECK(r.flagged_phrases == std::vector<std::string>{"lower limb edema and"});
  }
  SUBCASE("single shared words are not n-grams") {
    const auto r = leakage_screen("the tone", "the patient");
    CHECK(r.max_ngram_overlap == 0);
  }
  SUBCASE("stop phrases are removed first") {
    LeakageOptions opt;
    opt.threshold = 3;
    opt.stop_phrases = {"the patient"};
    const auto r = leakage_screen("describe the patient course", "the patient course was long", opt);
    CHECK(r.max_ngram_overlap == 0);
    CHECK(r.verdict == Verdict::pass);
  }
  CHECK_THROWS_AS(leakage_screen("a", "a", LeakageOptions{1, 5, {}}), Error);
}

TEST_CASE("leakage verdict follows the threshold") {
  const std::string target = "one two three four five six seven";
  for (std::size_t k = 0; k <= 7; ++k) {
    std::string g = "alpha";
    const auto words = whitespace_words(target);
    for (std::size_t i = 0; i < k; ++i) g += " " + words[i];
    g += " omega";
    const auto r = leakage_screen(g, target);
    const std::size_t expected = k >= 2 ? k : 0;
    CHECK(r.max_ngram_overlap == expected);
    CHECK((r.verdict == Verdict::warn) == (expected >= 5));
  }
}

TEST_CASE("guideline invariants and records") {
  AuthoringGuideline g{"c1", Task::di, Kind::instructions, "## Writing Instructions\n\nDo x.", "m",
                       "2026-01-01T00:00:00Z"};
  CHECK_NOTHROW(validate(g));
  CHECK(guideline_from_json(to_json(g)) == g);
  auto bad = g;
  bad.text = "Instructions:\nDo x.";
  CHECK_THROWS_AS(validate(bad), Error);
  bad.kind = Kind::style;
  CHECK_NOTHROW(validate(bad));
  bad.text = "  ";
  CHECK_THROWS_AS(validate(bad), Error);
  CHECK(parse_kind("instr") == Kind::instructions);
  CHECK_THROWS_AS(parse_kind("tone"), Error);

  ctrlgen::testing::TempDir dir;
  {
    io::JsonlWriter w(dir / "g.jsonl", io::JsonlWriter::Mode::truncate);
    w.write(to_json(g));
    auto newer = g;
    newer.text = "## Writing Instructions\n\nDo y.";
    w.write(to_json(newer));
  }
  const auto store = GuidelineStore::load(dir / "g.jsonl");
  CHECK(store.size() == 1);
  REQUIRE(store.find("c1", Task::di, Kind::instructions));
  CHECK(store.find("c1", Task::di, Kind::instructions)->text == "## Writing Instructions\n\nDo y.");
  CHECK(store.find("c1", Task::di, Kind::style) == nullptr);
}
