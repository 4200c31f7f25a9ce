#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <httplib.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <sstream>

#include "ctrlgen/cli.hpp"
#include "ctrlgen/io.hpp"
#include "ctrlgen/metrics.hpp"
#include "ctrlgen/mock_endpoint.hpp"
#include "ctrlgen/segmentation.hpp"
#include "test_support.hpp"

using namespace ctrlgen;
using ctrlgen::testing::TempDir;
using json = nlohmann::json;
using llm::MockEndpoint;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;

  json result() const { return json::parse(out)["result"]; }
  json config() const { return json::parse(out)["config"]; }
  json error() const {
    const auto line = err.substr(0, err.find('\n'));
    return json::parse(line);
  }
};

Run run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = ctrlgen::cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string note(const std::string& bhc, const std::string& di) {
  return "Chief Complaint: dyspnea\nHPI: admitted.\nBrief Hospital Course:\n" + bhc +
         "\n\nMedications on Admission:\naspirin\nDischarge Instructions:\n" + di +
         "\nFollowup Instructions:\nPCP in 1 week\n";
}

/// Two extractable admissions and one without a BHC section.
void write_corpus(const TempDir& dir) {
  std::string s = "hadm_id,text\n";
  s += "101," + io::csv_escape(note("Admitted with dyspnea. Diuresed with furosemide.",
                                    "Weigh yourself daily.")) + "\n";
  s += "102," + io::csv_escape(note("Presented with chest pain. Troponins were negative.",
                                    "Return if pain recurs.")) + "\n";
  s += "103," + io::csv_escape("Discharge Instructions:\nRest.\n") + "\n";
  io::write_file(dir / "summaries.csv", s);
  io::write_file(dir / "reports.csv",
                 "hadm_id,report_id,text\n101,1,CXR: mild edema.\n102,2,ECG: sinus rhythm.\n");
}

std::string p(const TempDir& dir, const std::string& name) { return (dir / name).string(); }

std::vector<std::string> with(std::vector<std::string> base, const std::vector<std::string>& more) {
  base.insert(base.end(), more.begin(), more.end());
  return base;
}

}  // namespace

TEST_CASE("ingest writes cases and reports skips") {
  TempDir dir;
  write_corpus(dir);
  const auto r = run_cli({"ingest", "--summaries", p(dir, "summaries.csv"), "--reports",
                      p(dir, "reports.csv"), "--out", p(dir, "cases.jsonl")});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.result()["cases"] == 2);
  REQUIRE(r.result()["skipped"].size() == 1);
  CHECK(r.result()["skipped"][0]["case_id"] == "103");
  CHECK(io::read_jsonl(dir / "cases.jsonl").size() == 2);
  CHECK(json::parse(r.out)["command"] == "ingest");
  CHECK(r.config()["corpus"]["cases"] == p(dir, "cases.jsonl"));
}

TEST_CASE("augment, export and eval run against a mock endpoint") {
  TempDir dir;
  write_corpus(dir);
  MockEndpoint mock(llm::augmentation_responder());
  REQUIRE(run_cli({"ingest", "--summaries", p(dir, "summaries.csv"), "--reports",
               p(dir, "reports.csv"), "--out", p(dir, "cases.jsonl")})
              .code == 0);
  const std::vector<std::string> common{"--endpoint", mock.url(), "--model", "mock", "--cases",
                                        p(dir, "cases.jsonl")};

  const auto seg_args = with(with({"augment", "segment"}, common),
                             {"--out", p(dir, "segs.jsonl"), "--tasks", "bhc"});
  const auto seg = run_cli(seg_args);
  REQUIRE_MESSAGE(seg.code == 0, seg.err);
  CHECK(seg.result()["acceptance_rate"] == 1.0);
  CHECK(seg.result()["total"] == 2);
  CHECK(seg.result()["checkpoint"] == p(dir, "segs.jsonl") + ".checkpoint");
  CHECK(seg.config()["augment"]["tasks"] == json::array({"bhc"}));
  const auto calls = mock.calls();
  CHECK(calls == 2);
  const auto again = run_cli(seg_args);
  CHECK(again.code == 0);
  CHECK(again.result()["from_checkpoint"] == 2);
  CHECK(mock.calls() == calls);

  const auto instr = run_cli(with(with({"augment", "instr"}, common),
                              {"--out", p(dir, "instr.jsonl"), "--tasks", "bhc", "--workers", "2"}));
  REQUIRE_MESSAGE(instr.code == 0, instr.err);
  CHECK(instr.result()["succeeded"] == 2);
  CHECK(instr.config()["augment"]["workers"] == 2);

  const auto exp = run_cli({"export", "--c", "topics", "--g", "instr", "--task", "bhc", "--cases",
                        p(dir, "cases.jsonl"), "--segmentations", p(dir, "segs.jsonl"),
                        "--instructions", p(dir, "instr.jsonl"), "--out", p(dir, "train.jsonl")});
  REQUIRE_MESSAGE(exp.code == 0, exp.err);
  CHECK(exp.result()["written"] == 2);
  const auto records = io::read_jsonl(dir / "train.jsonl");
  REQUIRE(records.size() == 2);
  std::string hyps, refs;
  for (const auto& rec : records) {
    const auto assistant = rec["messages"][1]["content"].get<std::string>();
    const auto parsed = seg::parse_xml(assistant, ParseMode::strict);
    CHECK(!parsed.segments.empty());
    CHECK(rec["meta"]["g"] == "instr");
    hyps += seg::join_spans(parsed) + "\n";
  }
  for (const auto& c : io::read_jsonl(dir / "cases.jsonl")) refs += c["target_bhc"].get<std::string>() + "\n";
  io::write_file(dir / "hyp.txt", hyps);
  io::write_file(dir / "ref.txt", refs);

  const auto ev = run_cli({"eval", "--hyp", p(dir, "hyp.txt"), "--ref", p(dir, "ref.txt"), "--out",
                       p(dir, "report.json")});
  REQUIRE_MESSAGE(ev.code == 0, ev.err);
  CHECK(ev.result()["n_pairs"] == 2);
  // restored spans are the targets word for word
  for (const auto* m : {"bleu4", "rouge1", "rouge2", "rougeL"}) {
    CHECK(ev.result()["scores"][m].get<double>() == doctest::Approx(1.0));
  }
  CHECK(json::parse(io::read_file(dir / "report.json")) == ev.result());
}

TEST_CASE("export without a segmentation store names the store") {
  TempDir dir;
  write_corpus(dir);
  REQUIRE(run_cli({"ingest", "--summaries", p(dir, "summaries.csv"), "--reports",
               p(dir, "reports.csv"), "--out", p(dir, "cases.jsonl")})
              .code == 0);
  const auto r = run_cli({"export", "--c", "topics", "--cases", p(dir, "cases.jsonl"),
                      "--segmentations", p(dir, "missing.jsonl"), "--out", p(dir, "t.jsonl")});
  CHECK(r.code == 1);
  CHECK(r.out.empty());
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
  CHECK(r.error()["kind"] == "runtime");
  CHECK(r.error()["error"].get<std::string>().find(p(dir, "missing.jsonl")) != std::string::npos);

  // c=none needs no segmentation store
  const auto none = run_cli({"export", "--c", "none", "--cases", p(dir, "cases.jsonl"),
                         "--segmentations", p(dir, "missing.jsonl"), "--out", p(dir, "t.jsonl")});
  CHECK_MESSAGE(none.code == 0, none.err);
  CHECK(none.result()["written"] == 2);

  const auto g = run_cli({"export", "--c", "none", "--g", "style", "--cases", p(dir, "cases.jsonl"),
                      "--style", p(dir, "nostyle.jsonl"), "--out", p(dir, "t.jsonl")});
  CHECK(g.code == 1);
  CHECK(g.error()["error"].get<std::string>().find("nostyle.jsonl") != std::string::npos);
}

TEST_CASE("eval on identical files scores every identity metric at 1") {
  TempDir dir;
  io::write_file(dir / "a.txt", "the cat sat on the mat\nthe patient was discharged home\n");
  const auto r = run_cli({"eval", "--hyp", p(dir, "a.txt"), "--ref", p(dir, "a.txt")});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto scores = r.result()["scores"];
  double sum = 0;
  for (const auto& [name, v] : scores.items()) sum += v.get<double>();
  CHECK(r.result()["overall"].get<double>() == doctest::Approx(sum / scores.size()).epsilon(1e-12));
  for (const auto* m : {"bleu4", "rouge1", "rouge2", "rougeL"}) {
    CHECK(scores[m].get<double>() == doctest::Approx(1.0));
  }
  // METEOR keeps its fragmentation penalty (one chunk) on identical text
  const double meteor_identity =
      (metrics::meteor("the cat sat on the mat", "the cat sat on the mat") +
       metrics::meteor("the patient was discharged home", "the patient was discharged home")) / 2;
  CHECK(scores["meteor"].get<double>() == doctest::Approx(meteor_identity).epsilon(1e-12));

  // a plugin column joins the mean
  const auto plugged = run_cli({"eval", "--hyp", p(dir, "a.txt"), "--ref", p(dir, "a.txt"), "--plugin",
                            "half=while read -r line; do echo '{\"score\": 0.5}'; done"});
  REQUIRE_MESSAGE(plugged.code == 0, plugged.err);
  CHECK(plugged.result()["scores"]["half"] == 0.5);
  const auto n = plugged.result()["scores"].size();
  CHECK(n == scores.size() + 1);
  CHECK(plugged.result()["overall"].get<double>() ==
        doctest::Approx((sum + 0.5) / static_cast<double>(n)).epsilon(1e-12));

  io::write_file(dir / "b.jsonl", "\"the cat sat on the mat\"\n{\"text\": \"the patient\"}\n");
  const auto jl = run_cli({"eval", "--hyp", p(dir, "b.jsonl"), "--ref", p(dir, "a.txt")});
  REQUIRE_MESSAGE(jl.code == 0, jl.err);
  CHECK(jl.result()["n_pairs"] == 2);
  CHECK(jl.result()["overall"].get<double>() < 1.0);
}

TEST_CASE("usage errors exit 2 with one JSON line") {
  TempDir dir;
  for (const auto& args : std::vector<std::vector<std::string>>{
           {},
           {"frobnicate"},
           {"eval", "--bogus"},
           {"eval"},
           {"eval", "--hyp", "x"},
           {"augment"},
           {"augment", "segment", "--workers", "many"},
           {"augment", "segment", "--workers", "0"},
           {"export", "--c", "sideways"},
           {"eval", "--hyp", "x", "--ref", "y", "--plugin", "noequals"},
       }) {
    const auto r = run_cli(args);
    CAPTURE(join(args, " "));
    CHECK(r.code == 2);
    CHECK(r.out.empty());
    REQUIRE(!r.err.empty());
    CHECK(r.error()["kind"] == "usage");
  }
  const auto help = run_cli({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("demo-session") != std::string::npos);
}

TEST_CASE("flags override the config file, which the environment overrides") {
  TempDir dir;
  io::write_file(dir / "a.txt", "same text\n");
  json file = {{"eval", {{"hyp", p(dir, "a.txt")}, {"ref", p(dir, "a.txt")}, {"out", p(dir, "from-file.json")}}},
               {"gateway", {{"model_id", "file-model"}, {"endpoint_url", "http://file:1"}, {"api_key", "secret"}}}};
  io::write_file(dir / "cfg.json", file.dump());

  const auto from_file = run_cli({"eval", "--config", p(dir, "cfg.json")});
  REQUIRE_MESSAGE(from_file.code == 0, from_file.err);
  CHECK(std::filesystem::exists(dir / "from-file.json"));
  CHECK(from_file.config()["gateway"]["model_id"] == "file-model");
  CHECK(from_file.config()["gateway"]["api_key"] == "***");
  CHECK(from_file.out.find("secret") == std::string::npos);

  ::setenv("CTRLGEN_ENDPOINT", "http://env:2", 1);
  const auto flagged = run_cli({"eval", "--config", p(dir, "cfg.json"), "--out", p(dir, "from-flag.json"),
                            "--model", "flag-model"});
  const auto env_only = run_cli({"eval", "--config", p(dir, "cfg.json")});
  const auto env_and_flag = run_cli({"eval", "--config", p(dir, "cfg.json"), "--endpoint", "http://flag:3"});
  ::unsetenv("CTRLGEN_ENDPOINT");
  REQUIRE(flagged.code == 0);
  CHECK(std::filesystem::exists(dir / "from-flag.json"));
  CHECK(flagged.config()["eval"]["out"] == p(dir, "from-flag.json"));
  CHECK(flagged.config()["gateway"]["model_id"] == "flag-model");
  CHECK(env_only.config()["gateway"]["endpoint_url"] == "http://env:2");
  CHECK(env_and_flag.config()["gateway"]["endpoint_url"] == "http://flag:3");

  io::write_file(dir / "bad.json", "[1,2]");
  const auto bad = run_cli({"eval", "--config", p(dir, "bad.json")});
  CHECK(bad.code == 1);
  CHECK(bad.error()["error"].get<std::string>().find("JSON object") != std::string::npos);
}

TEST_CASE("transport failures exit 1 and keep the stats") {
  TempDir dir;
  write_corpus(dir);
  REQUIRE(run_cli({"ingest", "--summaries", p(dir, "summaries.csv"), "--reports",
               p(dir, "reports.csv"), "--out", p(dir, "cases.jsonl")})
              .code == 0);
  int port = 0;
  {
    MockEndpoint gone(llm::augmentation_responder());
    port = gone.port();
  }
  io::write_file(dir / "cfg.json",
                 json{{"gateway", {{"request_timeout_ms", 2000}, {"retry", {{"max_attempts", 1}}}}}}.dump());
  const auto r = run_cli({"augment", "segment", "--config", p(dir, "cfg.json"), "--endpoint",
                      "http://127.0.0.1:" + std::to_string(port), "--cases", p(dir, "cases.jsonl"),
                      "--out", p(dir, "segs.jsonl"), "--tasks", "bhc"});
  CHECK(r.code == 1);
  CHECK(r.result()["failed_transport"] == 2);
  CHECK(r.error()["error"].get<std::string>().find("rerun") != std::string::npos);
}

TEST_CASE("demo-session pauses at every element") {
  const auto r = run_cli({"demo-session", "--edit-heading", "Admission Overview"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto res = r.result();
  CHECK(res["pauses"] == 6);
  CHECK(res["paused_with_request_in_flight"] == 0);
  CHECK(res["segments"][0]["heading"] == "Admission Overview");
  CHECK(res["prefixes"][1] == "<topic>Admission Overview</topic>\n<question>");
  CHECK(res["document"].get<std::string>().rfind("The patient was admitted", 0) == 0);
}

TEST_CASE("serve answers until SIGTERM and then exits cleanly") {
  TempDir dir;
  write_corpus(dir);
  REQUIRE(run_cli({"ingest", "--summaries", p(dir, "summaries.csv"), "--reports",
               p(dir, "reports.csv"), "--out", p(dir, "cases.jsonl")})
              .code == 0);
  int out_pipe[2];
  REQUIRE(::pipe(out_pipe) == 0);
  const pid_t pid = ::fork();
  REQUIRE(pid >= 0);
  if (pid == 0) {
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::close(out_pipe[0]);
    const std::string cases = p(dir, "cases.jsonl");
    const std::string sessions = p(dir, "sessions");
    ::execl(CTRLGEN_BIN, "ctrlgen", "serve", "--mock", "--port", "0", "--cases", cases.c_str(),
            "--sessions-dir", sessions.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(out_pipe[1]);
  std::string line;
  char ch;
  while (::read(out_pipe[0], &ch, 1) == 1 && ch != '\n') line += ch;
  ::close(out_pipe[0]);
  REQUIRE(!line.empty());
  const auto banner = json::parse(line);
  const auto url = banner["result"]["url"].get<std::string>();

  httplib::Client client(url);
  client.set_read_timeout(10, 0);
  auto cases = client.Get("/cases");
  REQUIRE(cases);
  CHECK(cases->status == 200);
  CHECK(json::parse(cases->body)["cases"].size() == 2);
  auto created = client.Post("/sessions", R"({"case_id":"101","c":"topics"})", "application/json");
  REQUIRE(created);
  CHECK(created->status == 201);

  ::kill(pid, SIGTERM);
  int status = 0;
  ::waitpid(pid, &status, 0);
  CHECK(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 0);
  CHECK(std::distance(std::filesystem::directory_iterator(dir / "sessions"),
                      std::filesystem::directory_iterator{}) == 1);
}
