// Acceptance suite: one PASS/FAIL line per primary criterion. Exits 1 if any
// criterion fails.

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "chunking_oracle.hpp"
#include "ctrlgen/cli.hpp"
#include "ctrlgen/io.hpp"
#include "ctrlgen/metrics.hpp"
#include "ctrlgen/mock_endpoint.hpp"
#include "ctrlgen/segmentation.hpp"
#include "ctrlgen/session.hpp"
#include "test_support.hpp"

using namespace ctrlgen;
using namespace std::chrono_literals;
using json = nlohmann::json;
using ctrlgen::testing::TempDir;

namespace {

struct Verdict {
  int checks = 0;
  std::vector<std::string> failures;

  void expect(bool ok, const std::string& what) {
    ++checks;
    if (!ok && failures.size() < 5) failures.push_back(what);
    else if (!ok) failures.emplace_back();
  }
};

// ---- 1: aggregation ------------------------------------------------------

void aggregation(Verdict& v) {
  const std::vector<double> wispermed = {0.124, 0.453, 0.201, 0.308, 0.438, 0.403, 0.315, 0.411};
  const std::vector<double> base = {0.168, 0.483, 0.255, 0.345, 0.472, 0.362, 0.359, 0.460};
  auto overall = [](const std::vector<double>& row) {
    std::map<std::string, double> scores;
    for (std::size_t i = 0; i < row.size(); ++i) scores[metrics::kTableColumns[i]] = row[i];
    return metrics::make_report(scores, 1).overall;
  };
  const double w = overall(wispermed);
  const double b = overall(base);
  v.expect(std::abs(w - 0.332) <= 0.0005, "WisPerMed overall " + std::to_string(w));
  v.expect(std::abs(b - 0.363) <= 0.0005, "BASE overall " + std::to_string(b));
}

// ---- 2: worked example ---------------------------------------------------

void worked_example(Verdict& v) {
  const std::vector<std::string> headings = {
      "Initial Patient Information",     "Initial Treatment and Complications",
      "Antifungal Therapy and Diagnosis", "Outcome and Laboratory Findings",
      "Diagnostic Findings",              "Treatment Summary",
      "Follow-up Information"};
  const auto parsed =
      seg::parse_xml(ctrlgen::testing::fixture("table7_segmented.xml"), ParseMode::strict);
  v.expect(parsed.segments.size() == 7, "segment count " + std::to_string(parsed.segments.size()));
  for (std::size_t i = 0; i < headings.size() && i < parsed.segments.size(); ++i) {
    v.expect(parsed.segments[i].heading == headings[i], "heading " + std::to_string(i));
  }
  const auto again = seg::parse_xml(seg::serialize_xml(parsed), ParseMode::strict);
  v.expect(again == parsed, "serialize then parse differs");

  std::string bullets;
  for (const auto& h : headings) bullets += (bullets.empty() ? "- " : "\n- ") + h;
  v.expect(seg::extract_headings_bullets(parsed) == bullets, "bullet list");
}

// ---- 3: restoration ------------------------------------------------------

void restoration(Verdict& v) {
  std::mt19937 rng(2024);
  const std::vector<std::string> vocab = {"pt",  "was", "seen", "on", "day",      "1",  "2",
                                          "ct",  "neg", "afebrile", "ok", "then", "mg", "."};
  const std::vector<std::string> gaps = {" ", " ", " ", " ", "\n", "\n\n", "  "};
  std::uniform_int_distribution<std::size_t> pick(0, vocab.size() - 1);
  std::uniform_int_distribution<std::size_t> gap(0, gaps.size() - 1);
  std::uniform_int_distribution<int> ntok(12, 40);
  std::uniform_int_distribution<std::size_t> seglen(3, 9);

  int singles = 0;
  int multis = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::string> words;
    for (int i = ntok(rng); i > 0; --i) words.push_back(vocab[pick(rng)]);
    std::string original;
    for (std::size_t i = 0; i < words.size(); ++i) original += (i ? gaps[gap(rng)] : "") + words[i];

    std::vector<std::vector<std::string>> spans;
    for (std::size_t i = 0; i < words.size();) {
      const std::size_t n = std::min(seglen(rng), words.size() - i);
      spans.emplace_back(words.begin() + static_cast<std::ptrdiff_t>(i),
                         words.begin() + static_cast<std::ptrdiff_t>(i + n));
      i += n;
    }
    // pick a segment long enough for either mutation
    std::vector<std::size_t> candidates;
    for (std::size_t s = 0; s < spans.size(); ++s) {
      if (spans[s].size() >= 3) candidates.push_back(s);
    }
    if (candidates.empty()) {
      --trial;
      continue;
    }
    auto& span = spans[candidates[std::uniform_int_distribution<std::size_t>(
        0, candidates.size() - 1)(rng)]];
    const bool single = trial % 2 == 0;
    std::size_t width = 1;
    if (!single) width = std::uniform_int_distribution<std::size_t>(2, std::min<std::size_t>(4, span.size()))(rng);
    const std::size_t at = std::uniform_int_distribution<std::size_t>(0, span.size() - width)(rng);
    for (std::size_t k = 0; k < width; ++k) span[at + k] = "MUT" + std::to_string(k);

    seg::Segmentation raw;
    raw.target_id = "fixture-" + std::to_string(trial);
    raw.task = Task::bhc;
    for (const auto& s : spans) raw.segments.push_back({"H", "Q", join(s, " "), {}});
    const auto r = seg::restore_spans(original, raw);
    const std::string label = "fixture " + std::to_string(trial);
    if (single) {
      ++singles;
      std::string concat;
      for (const auto& s : r.segments) concat += s.span;
      v.expect(r.status == seg::Status::restored, label + " single-word mutation not restored");
      v.expect(r.status != seg::Status::restored || concat == original,
               label + " concat differs from original");
    } else {
      ++multis;
      v.expect(r.status == seg::Status::rejected,
               label + " " + std::to_string(width) + "-word mutation accepted");
    }
  }
  v.expect(singles == 500 && multis == 500, "fixture mix");
}

// ---- 4: chunking invariance ---------------------------------------------

void chunking(Verdict& v) {
  std::mt19937 rng(41);
  // Every complete segment needs 50 bytes of tags alone, so the short
  // streams are well-formed prefixes of random documents.
  for (int stream = 0; stream < 50; ++stream) {
    const std::string doc = ctrlgen::testing::random_document(rng, 1);
    const std::size_t len = std::uniform_int_distribution<std::size_t>(
        1, std::min<std::size_t>(doc.size(), 40))(rng);
    const std::string prefix = doc.substr(0, len);
    for (auto mode : {ParseMode::strict, ParseMode::lenient}) {
      v.expect(ctrlgen::testing::distinct_outcomes_over_all_chunkings(prefix, mode, false) == 1,
               "prefix " + json(prefix).dump());
    }
  }
  int trials = 0;
  while (trials < 10000) {
    const std::string doc = ctrlgen::testing::random_document(rng, 5);
    for (auto mode : {ParseMode::strict, ParseMode::lenient}) {
      const auto reference = ctrlgen::testing::parse_chunks({doc}, mode, true);
      v.expect(!reference.error_offset, "reference parse failed");
      for (int k = 0; k < 50; ++k, ++trials) {
        const auto chunks = ctrlgen::testing::random_partition(doc, rng);
        v.expect(ctrlgen::testing::parse_chunks(chunks, mode, true) == reference,
                 "random partition of " + json(doc).dump());
      }
    }
  }
}

// ---- 5: metric oracles ---------------------------------------------------

std::unordered_map<std::string, int> oracle_ngrams(const metrics::Tokens& t, std::size_t n) {
  std::unordered_map<std::string, int> m;
  for (std::size_t i = 0; i + n <= t.size(); ++i) {
    std::string key;
    for (std::size_t k = i; k < i + n; ++k) key += t[k] + " ";
    ++m[key];
  }
  return m;
}

std::size_t oracle_lcs(const metrics::Tokens& a, const metrics::Tokens& b) {
  std::size_t best = 0;
  for (unsigned mask = 0; mask < (1u << a.size()); ++mask) {
    metrics::Tokens sub;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (mask & (1u << i)) sub.push_back(a[i]);
    }
    std::size_t j = 0;
    for (const auto& t : b) {
      if (j < sub.size() && t == sub[j]) ++j;
    }
    if (j == sub.size()) best = std::max(best, sub.size());
  }
  return best;
}

bool near(double a, double b) { return std::abs(a - b) < 1e-12; }

void metric_oracles(Verdict& v) {
  using namespace metrics;
  // BLEU-4, hand count: p1 = 5/6, p2 = 3/5, p3 = 1/4, p4 = 0 -> eps/3
  const double bleu_hand = std::pow((5.0 / 6) * (3.0 / 5) * (1.0 / 4) * (1e-9 / 3), 0.25);
  v.expect(near(bleu4("the cat sat on the mat", "the cat is on the mat"), bleu_hand), "bleu4 hand");
  v.expect(near(bleu_hand, 2.540663740773074e-3), "bleu4 frozen");
  v.expect(near(bleu4("the cat is on", "the cat is on the mat"), std::exp(1.0 - 6.0 / 4.0)),
           "bleu4 brevity penalty");
  {
    const auto h = tokenize("the cat sat on the mat");
    const auto r = tokenize("the cat is on the mat");
    auto rm = oracle_ngrams(r, 1);
    int matched = 0;
    for (const auto& [k, c] : oracle_ngrams(h, 1)) matched += std::min(c, rm[k]);
    v.expect(matched == 5, "unigram oracle count");
  }

  v.expect(near(rouge_n("a b c", "a b d", 1).f1, 2.0 / 3), "rouge1 example");
  v.expect(near(rouge_n("a b c d", "a b c d", 2).f1, 1.0), "rouge2 identity");
  v.expect(near(rouge_l("a c b", "a b c").f1, 2.0 / 3), "rougeL example");

  const std::string ten = "one two three four five six seven eight nine ten";
  v.expect(near(meteor(ten, ten), 0.9995), "meteor identity of ten tokens");
  v.expect(near(meteor("cats sat", "cat sat"), 0.9375), "meteor stem match");
  v.expect(near(meteor("b a", "a b"), 0.5), "meteor two chunks");
  const double fmean = 1.0 * 0.75 / (0.9 * 1.0 + 0.1 * 0.75);
  v.expect(near(meteor("a b c", "a b c d"), fmean * (1 - 0.5 * std::pow(1.0 / 3, 3))),
           "meteor partial");

  // every sequence over {a, b, c} of length <= 5, all ordered pairs
  std::vector<Tokens> all{{}};
  for (std::size_t start = 0, len = 1; len <= 5; ++len) {
    const std::size_t end = all.size();
    for (std::size_t i = start; i < end; ++i) {
      for (const char* t : {"a", "b", "c"}) {
        auto next = all[i];
        next.push_back(t);
        all.push_back(std::move(next));
      }
    }
    start = end;
  }
  std::size_t mismatches = 0;
  for (const auto& h : all) {
    for (const auto& r : all) {
      const auto got = rouge_l(h, r);
      double p = 0, rec = 0, f = 0;
      if (!h.empty() && !r.empty()) {
        const double l = static_cast<double>(oracle_lcs(h, r));
        p = l / static_cast<double>(h.size());
        rec = l / static_cast<double>(r.size());
        f = p + rec == 0 ? 0 : 2 * p * rec / (p + rec);
      }
      if (!near(got.precision, p) || !near(got.recall, rec) || !near(got.f1, f)) ++mismatches;
    }
  }
  v.expect(all.size() == 364, "sequence count");
  v.expect(mismatches == 0, std::to_string(mismatches) + " rouge_l mismatches");
}

// ---- 6: pipeline smoke ---------------------------------------------------

struct CliRun {
  int code = 0;
  json result;
  std::string err;
};

CliRun run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  CliRun r;
  r.code = cli::run(args, out, err);
  r.err = err.str();
  if (r.code == 0) r.result = json::parse(out.str())["result"];
  return r;
}

std::string note(const std::string& bhc, const std::string& di) {
  return "Chief Complaint: dyspnea\nHPI: admitted.\nBrief Hospital Course:\n" + bhc +
         "\n\nMedications on Admission:\naspirin\nDischarge Instructions:\n" + di +
         "\nFollowup Instructions:\nPCP in 1 week\n";
}

void pipeline(Verdict& v) {
  TempDir dir;
  auto p = [&](const std::string& name) { return (dir / name).string(); };
  std::string summaries = "hadm_id,text\n";
  summaries += "201," + io::csv_escape(note("Admitted with dyspnea. Diuresed with furosemide.",
                                            "Weigh yourself daily.")) + "\n";
  summaries += "202," + io::csv_escape(note("Presented with chest pain. Troponins were negative.",
                                            "Return if pain recurs.")) + "\n";
  summaries += "203," + io::csv_escape(note("Fever on arrival. Cultures grew E. coli. Treated "
                                            "with ceftriaxone.", "Finish antibiotics.")) + "\n";
  io::write_file(dir / "summaries.csv", summaries);
  io::write_file(dir / "reports.csv", "hadm_id,report_id,text\n201,1,CXR: mild edema.\n");

  llm::MockEndpoint mock(llm::augmentation_responder());
  const auto ingest = run_cli({"ingest", "--summaries", p("summaries.csv"), "--reports",
                               p("reports.csv"), "--out", p("cases.jsonl")});
  v.expect(ingest.code == 0, "ingest: " + ingest.err);
  if (ingest.code != 0) return;

  const std::vector<std::string> segment{"augment", "segment", "--endpoint", mock.url(),
                                         "--model", "mock", "--cases", p("cases.jsonl"),
                                         "--out", p("segs.jsonl"), "--tasks", "bhc"};
  const std::vector<std::string> instr{"augment", "instr", "--endpoint", mock.url(),
                                       "--model", "mock", "--cases", p("cases.jsonl"),
                                       "--out", p("instr.jsonl"), "--tasks", "bhc"};
  const std::vector<std::string> exporter{
      "export", "--c", "topics", "--g", "instr", "--task", "bhc", "--cases", p("cases.jsonl"),
      "--segmentations", p("segs.jsonl"), "--instructions", p("instr.jsonl"), "--out",
      p("train.jsonl")};

  const auto seg = run_cli(segment);
  v.expect(seg.code == 0, "augment segment: " + seg.err);
  v.expect(seg.code == 0 && seg.result["acceptance_rate"] == 1.0, "acceptance rate");
  const auto ins = run_cli(instr);
  v.expect(ins.code == 0 && ins.result["succeeded"] == 3, "augment instr: " + ins.err);
  const auto exp = run_cli(exporter);
  v.expect(exp.code == 0 && exp.result["written"] == 3, "export: " + exp.err);
  if (exp.code != 0) return;

  std::string hyps, refs;
  const auto records = io::read_jsonl(dir / "train.jsonl");
  v.expect(records.size() == 3, "exported records");
  for (const auto& rec : records) {
    try {
      const auto parsed = seg::parse_xml(rec["messages"][1]["content"].get<std::string>(),
                                         ParseMode::strict);
      v.expect(!parsed.segments.empty(), "empty assistant message");
      hyps += seg::join_spans(parsed) + "\n";
    } catch (const std::exception& e) {
      v.expect(false, std::string("assistant message not strict-parseable: ") + e.what());
    }
  }
  for (const auto& c : io::read_jsonl(dir / "cases.jsonl")) refs += c["target_bhc"].get<std::string>() + "\n";
  io::write_file(dir / "hyp.txt", hyps);
  io::write_file(dir / "ref.txt", refs);
  const auto ev = run_cli({"eval", "--hyp", p("hyp.txt"), "--ref", p("ref.txt")});
  v.expect(ev.code == 0 && ev.result["n_pairs"] == 3, "eval: " + ev.err);

  const auto calls = mock.calls();
  v.expect(calls == 6, "first run calls " + std::to_string(calls));
  const auto seg2 = run_cli(segment);
  const auto ins2 = run_cli(instr);
  const auto exp2 = run_cli(exporter);
  v.expect(seg2.code == 0 && ins2.code == 0 && exp2.code == 0, "rerun failed");
  v.expect(mock.calls() == calls,
           "rerun issued " + std::to_string(mock.calls() - calls) + " new calls");
}

// ---- 7: interactive session ---------------------------------------------

void interactive(Verdict& v) {
  using namespace genstream;
  const std::string doc =
      "<topic>Presentation</topic>\n<question>Why was the patient admitted?</question>\n"
      "<span>Admitted with dyspnea.</span>\n\n"
      "<topic>Course</topic>\n<question>How was it treated?</question>\n"
      "<span>Diuresed with furosemide.</span>\n\n"
      "<topic>Discharge</topic>\n<question>Where did the patient go?</question>\n"
      "<span>Discharged home.</span>";
  llm::MockEndpoint mock(llm::document_responder(doc, 5));
  llm::GatewayConfig cfg;
  cfg.endpoint_url = mock.url();
  cfg.model_id = "mock";
  cfg.request_timeout = 5s;
  cfg.retry.max_attempts = 1;
  llm::Gateway gw(cfg);

  corpus::ClinicalCase c;
  c.case_id = "case-7";
  c.discharge_summary = "Chief Complaint: dyspnea\nHPI: admitted with dyspnea.";
  c.target_bhc = "Admitted with dyspnea.";
  c.target_di = "Rest.";
  const promptgen::PromptConfig pc{promptgen::Control::topics, promptgen::GuidelineMode::none,
                                   Task::bhc};
  auto s = Session::create("acceptance", c, pc, SessionMode::interactive, gw);
  s->start();

  const std::string edited = "Admission Overview";
  int pauses = 0;
  for (;;) {
    if (!s->wait_idle(10s)) {
      v.expect(false, "session did not settle");
      s->shutdown();
      return;
    }
    const auto snap = s->snapshot();
    if (snap.status == SessionStatus::completed) break;
    if (snap.status != SessionStatus::paused && snap.status != SessionStatus::awaiting_user) {
      v.expect(false, "unexpected status " + std::string(to_string(snap.status)));
      s->shutdown();
      return;
    }
    ++pauses;
    v.expect(snap.pending.has_value(), "pause without a pending element");
    v.expect(snap.requests_in_flight == 0, "session request open while paused");
    const auto deadline = std::chrono::steady_clock::now() + 10s;
    while (mock.in_flight() != 0 && std::chrono::steady_clock::now() < deadline) {
      std::this_thread::sleep_for(2ms);
    }
    const auto calls = mock.calls();
    std::this_thread::sleep_for(20ms);
    v.expect(mock.in_flight() == 0 && mock.calls() == calls, "endpoint busy while paused");
    s->apply(pauses == 1 ? UserAction::edit(edited) : UserAction::accept());
  }
  v.expect(pauses == 9, "pauses " + std::to_string(pauses) + " for 9 elements");

  const auto requests = mock.requests();
  v.expect(requests.size() >= 2 &&
               requests[1].assistant_prefix() == "<topic>" + edited + "</topic>\n<question>",
           "edited heading missing from the resume prefix");
  bool in_every = true;
  for (std::size_t i = 1; i < requests.size(); ++i) {
    in_every = in_every && requests[i].assistant_prefix().find("<topic>" + edited + "</topic>") == 0;
  }
  v.expect(in_every, "a later prefix dropped the edited heading");

  const auto snap = s->snapshot();
  std::string spans;
  for (const auto& e : snap.verified) {
    if (e.kind == ElementKind::span) spans += (spans.empty() ? "" : " ") + e.text;
  }
  const auto final_doc = s->finalize();
  v.expect(final_doc.document == spans, "finalized document differs from the verified spans");
  v.expect(final_doc.document == seg::join_spans(final_doc.segmentation), "join_spans");
  v.expect(final_doc.segmentation.segments.size() == 3 &&
               final_doc.segmentation.segments[0].heading == edited,
           "final headings");
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Verdict&)>>> criteria = {
      {"aggregation reproduces the published overall scores", aggregation},
      {"worked example parses, round-trips and lists its headings", worked_example},
      {"restoration over 1000 randomized mutation fixtures", restoration},
      {"chunking invariance over all and randomized partitions", chunking},
      {"metric oracles", metric_oracles},
      {"pipeline smoke against a scripted mock", pipeline},
      {"interactive session contract", interactive},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      criteria[i].second(v);
    } catch (const std::exception& e) {
      v.failures.push_back(std::string("exception: ") + e.what());
    }
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - t0).count();
    const bool ok = v.failures.empty();
    if (!ok) ++failed;
    std::cout << (ok ? "PASS " : "FAIL ") << i + 1 << " " << criteria[i].first << " ("
              << v.checks << " checks, " << ms << " ms)";
    if (!ok) {
      std::cout << ": " << v.failures.size() << " failed";
      for (const auto& f : v.failures) {
        if (!f.empty()) std::cout << "; " << f;
      }
    }
    std::cout << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
