#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "ctrlgen/corpus.hpp"
#include "ctrlgen/io.hpp"
#include "test_support.hpp"

using namespace ctrlgen;
using namespace ctrlgen::corpus;
using ctrlgen::testing::TempDir;

namespace {

std::string note(const std::string& bhc, const std::string& di) {
  return "Chief Complaint: chest pain\nHPI: 70M with CAD.\nBrief Hospital Course:\n" + bhc +
         "\n\nMedications on Admission:\naspirin\nDischarge Instructions:\n" + di +
         "\nFollowup Instructions:\nPCP in 1 week\n";
}

void write_summaries(const std::filesystem::path& path,
                     const std::vector<std::vector<std::string>>& rows) {
  std::string out = "hadm_id,text,chief_complaint\n";
  for (const auto& r : rows) {
    out += io::csv_escape(r[0]) + "," + io::csv_escape(r[1]) + "," + io::csv_escape(r[2]) + "\n";
  }
  io::write_file(path, out);
}

}  // namespace

TEST_CASE("extract_targets cuts both sections out") {
  const auto t = extract_targets(
      "HPI: ...\nBrief Hospital Course:\nX\nDischarge Instructions:\nY\n", SectionSpec::defaults());
  CHECK(t.residual == "HPI: ...\n");
  CHECK(t.bhc == "X");
  CHECK(t.di == "Y");
}

TEST_CASE("extract_targets stops at end markers") {
  const auto t = extract_targets(note("Pt did well.\nWalked.", "Take meds."), SectionSpec::defaults());
  CHECK(t.bhc == "Pt did well.\nWalked.");
  CHECK(t.di == "Take meds.");
  CHECK(t.residual ==
        "Chief Complaint: chest pain\nHPI: 70M with CAD.\nMedications on Admission:\naspirin\n"
        "Followup Instructions:\nPCP in 1 week\n");
}

TEST_CASE("header detection is case-insensitive and tolerates indentation") {
  const auto t = extract_targets("  BRIEF HOSPITAL COURSE: A\n\tdischarge instructions  B",
                                 SectionSpec::defaults());
  CHECK(t.bhc == "A");
  CHECK(t.di == "B");
}

TEST_CASE("missing or repeated headers are section errors") {
  try {
    extract_targets("Brief Hospital Course:\nX\n", SectionSpec::defaults());
    FAIL("expected SectionError");
  } catch (const SectionError& e) {
    CHECK(e.kind() == SectionError::Kind::no_section);
    CHECK(e.section() == Task::di);
    CHECK(std::string(e.what()) == "NoSection(di): pattern 'discharge instructions'");
  }
  try {
    extract_targets("Brief Hospital Course:\nX\nBrief Hospital Course:\nZ\nDischarge Instructions:\nY",
                    SectionSpec::defaults());
    FAIL("expected SectionError");
  } catch (const SectionError& e) {
    CHECK(e.kind() == SectionError::Kind::ambiguous_section);
    CHECK(e.section() == Task::bhc);
  }
  CHECK_THROWS_AS(extract_targets("", SectionSpec::defaults()), Error);
  SectionSpec bad;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("load_corpus joins reports and records skips") {
  TempDir dir;
  write_summaries(dir / "s.csv", {{"100", note("Stable course, \"quoted\", commas.", "Rest."), "CP"},
                                  {"101", "Brief Hospital Course:\nOnly BHC here.\n", ""},
                                  {"102", note("Second, fine.", "Drink water."), ""},
                                  {"103", "", ""}});
  io::write_file(dir / "r.csv",
                 "hadm_id,report_id,text\n"
                 "100,9,\"CXR: clear\nlungs.\"\n"
                 "102,1,CT head negative\n"
                 "100,2,Echo EF 55%\n");
  const auto result = load_corpus(dir / "s.csv", dir / "r.csv", SectionSpec::defaults());
  REQUIRE(result.cases.size() == 2);
  const auto& c = result.cases[0];
  CHECK(c.case_id == "100");
  CHECK(c.target_bhc == "Stable course, \"quoted\", commas.");
  CHECK(c.target_di == "Rest.");
  CHECK(c.chief_complaint == std::string("CP"));
  CHECK(c.radiology_reports == std::vector<std::string>{"CXR: clear\nlungs.", "Echo EF 55%"});
  CHECK(c.discharge_summary.find("Brief Hospital Course") == std::string::npos);
  CHECK(result.cases[1].case_id == "102");
  CHECK_FALSE(result.cases[1].chief_complaint);

  REQUIRE(result.skipped.size() == 2);
  CHECK(result.skipped[0].case_id == "101");
  CHECK(result.skipped[0].reason.find("NoSection(di)") != std::string::npos);
  CHECK(result.skipped[1].case_id == "103");
}

TEST_CASE("target text repeated in the residual is skipped") {
  TempDir dir;
  write_summaries(dir / "s.csv",
                  {{"1", "HPI: ok\nBrief Hospital Course:\nok\nDischarge Instructions:\nrest\n", ""}});
  io::write_file(dir / "r.csv", "hadm_id,report_id,text\n");
  const auto result = load_corpus(dir / "s.csv", dir / "r.csv", SectionSpec::defaults());
  CHECK(result.cases.empty());
  REQUIRE(result.skipped.size() == 1);
}

TEST_CASE("empty files give an empty corpus") {
  TempDir dir;
  io::write_file(dir / "s.csv", "");
  io::write_file(dir / "r.csv", "");
  const auto result = load_corpus(dir / "s.csv", dir / "r.csv", SectionSpec::defaults());
  CHECK(result.cases.empty());
  CHECK(result.skipped.empty());
}

TEST_CASE("structural problems raise CorpusError") {
  TempDir dir;
  io::write_file(dir / "r.csv", "hadm_id,report_id,text\n");
  SUBCASE("duplicate ids") {
    write_summaries(dir / "s.csv", {{"7", note("a", "b"), ""}, {"7", note("c", "d"), ""}});
    try {
      load_corpus(dir / "s.csv", dir / "r.csv", SectionSpec::defaults());
      FAIL("expected CorpusError");
    } catch (const CorpusError& e) {
      CHECK(std::string(e.what()).find("7") != std::string::npos);
    }
  }
  SUBCASE("missing column") {
    io::write_file(dir / "s.csv", "id,text\n1,x\n");
    try {
      load_corpus(dir / "s.csv", dir / "r.csv", SectionSpec::defaults());
      FAIL("expected CorpusError");
    } catch (const CorpusError& e) {
      CHECK(std::string(e.what()).find("s.csv") != std::string::npos);
    }
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_corpus(dir / "nope.csv", dir / "r.csv", SectionSpec::defaults()),
                    CorpusError);
  }
}

TEST_CASE("case records round-trip byte for byte") {
  TempDir dir;
  std::vector<ClinicalCase> cases = {
      {"1", "summary\nwith \"quotes\" and é", {"r1", "r2"}, std::string("SOB"), "bhc", "di"},
      {"2", "s", {}, std::nullopt, "b", "d"},
  };
  write_cases(dir / "c.jsonl", cases);
  const auto first = io::read_file(dir / "c.jsonl");
  const auto back = read_cases(dir / "c.jsonl");
  CHECK(back == cases);
  write_cases(dir / "c2.jsonl", back);
  CHECK(io::read_file(dir / "c2.jsonl") == first);
  CHECK_THROWS_AS(case_from_json(nlohmann::json{{"case_id", "x"}}), CorpusError);
}

TEST_CASE("csv reader handles quoting") {
  const auto t = io::parse_csv("\xEF\xBB\xBF" "a,b\r\n\"x,1\",\"he said \"\"hi\"\"\nok\"\r\n");
  REQUIRE(t.header == std::vector<std::string>{"a", "b"});
  REQUIRE(t.rows.size() == 1);
  CHECK(t.rows[0][0] == "x,1");
  CHECK(t.rows[0][1] == "he said \"hi\"\nok");
  CHECK_THROWS_AS(io::parse_csv("a,b\n1\n"), io::IoError);
  CHECK_THROWS_AS(t.column("zzz"), io::IoError);
}
