#pragma once

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ctrlgen/common.hpp"

namespace ctrlgen::metrics {

enum class Punctuation { split, keep };

struct TokenizationSpec {
  bool case_fold = true;
  /// split: every ASCII punctuation character is its own token.
  /// keep: punctuation stays attached to the surrounding word.
  Punctuation punctuation = Punctuation::split;
};

std::vector<std::string> tokenize(std::string_view text, const TokenizationSpec& spec = {});

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

using Tokens = std::vector<std::string>;

inline constexpr double kBleuEpsilon = 1e-9;

/// Sentence-level BLEU-4: geometric mean of clipped n-gram precisions
/// (n = 1..4), a zero match count replaced by kBleuEpsilon, times the brevity
/// penalty exp(1 - r/h) when h < r.
double bleu4(const Tokens& hyp, const Tokens& ref);
double bleu4(std::string_view hyp, std::string_view ref, const TokenizationSpec& spec = {});

PRF rouge_n(const Tokens& hyp, const Tokens& ref, int n);
PRF rouge_n(std::string_view hyp, std::string_view ref, int n, const TokenizationSpec& spec = {});

std::size_t lcs_length(const Tokens& a, const Tokens& b);
PRF rouge_l(const Tokens& hyp, const Tokens& ref);
PRF rouge_l(std::string_view hyp, std::string_view ref, const TokenizationSpec& spec = {});

struct MeteorParams {
  double alpha = 0.9;
  double beta = 3.0;
  double gamma = 0.5;
};

/// One aligned unigram: hypothesis index, reference index.
struct Match {
  std::size_t hyp;
  std::size_t ref;
};

/// Exact stage, then Porter-stem stage, each over tokens the earlier stage
/// left unmatched. Within a stage, hypothesis tokens are visited left to
/// right and take the unmatched reference token that continues the previous
/// match if there is one, else the leftmost. Sorted by hypothesis index.
std::vector<Match> meteor_align(const Tokens& hyp, const Tokens& ref);
std::size_t count_chunks(const std::vector<Match>& alignment);

double meteor(const Tokens& hyp, const Tokens& ref, const MeteorParams& params = {});
double meteor(std::string_view hyp, std::string_view ref, const TokenizationSpec& spec = {},
              const MeteorParams& params = {});

/// The Porter (1980) suffix-stripping stemmer over lowercase ASCII words.
/// Words with non-letters or of length <= 2 are returned unchanged.
std::string porter_stem(std::string_view word);

// ---------------------------------------------------------------------------
// External metrics

class MetricPluginError : public Error {
 public:
  MetricPluginError(std::string plugin, const std::string& what)
      : Error("metric plugin '" + plugin + "': " + what), plugin_(std::move(plugin)) {}
  const std::string& plugin() const { return plugin_; }

 private:
  std::string plugin_;
};

struct PluginSpec {
  std::string name;     // metric key in reports, e.g. "bertscore"
  std::string command;  // run with /bin/sh -c
};

/// Parses "NAME=COMMAND".
PluginSpec parse_plugin_spec(std::string_view text);

struct Pair {
  std::string hyp;
  std::string ref;
};

/// Runs the plugin once over all pairs: one {"hyp","ref"} line per pair on
/// its stdin, one {"score": x} line per pair expected on its stdout, in
/// order. Out-of-range scores are clamped and a warning is appended.
std::vector<double> run_external_metric(const PluginSpec& plugin, const std::vector<Pair>& pairs,
                                        std::vector<std::string>* warnings = nullptr);

// ---------------------------------------------------------------------------
// Reports

/// Report keys of the in-process metrics, in table order.
inline const std::vector<std::string> kLexicalMetrics = {"bleu4", "rouge1", "rouge2", "rougeL",
                                                         "meteor"};
/// Column order of the reference results table.
inline const std::vector<std::string> kTableColumns = {
    "bleu4", "rouge1", "rouge2", "rougeL", "bertscore", "meteor", "alignscore", "medcon"};

struct MetricReport {
  std::map<std::string, double> scores;
  double overall = 0.0;
  std::size_t n_pairs = 0;
  std::vector<std::string> warnings;
  std::map<std::string, std::string> omitted;  // metric -> error
};

/// Arithmetic mean of the given scores; 0 when empty.
double overall_of(const std::map<std::string, double>& scores);

MetricReport make_report(std::map<std::string, double> scores, std::size_t n_pairs);

nlohmann::json to_json(const MetricReport& report);

/// Per-pair scores of the in-process metrics (ROUGE as F1).
std::map<std::string, double> score_pair(std::string_view hyp, std::string_view ref,
                                         const TokenizationSpec& spec = {});

/// Mean per-pair scores over `pairs`, plus one entry per plugin that ran
/// cleanly. A failing plugin is recorded in `omitted` and left out.
MetricReport evaluate(const std::vector<Pair>& pairs, const TokenizationSpec& spec = {},
                      const std::vector<PluginSpec>& plugins = {});

struct CorpusReport {
  MetricReport bhc;
  MetricReport di;
  MetricReport combined;
};

nlohmann::json to_json(const CorpusReport& report);

/// Text table with one row per task and the columns of kTableColumns that
/// are present.
std::string render_table(const CorpusReport& report);

/// Builds pairs from parallel lists; sizes must agree.
std::vector<Pair> make_pairs(const std::vector<std::string>& hyps,
                             const std::vector<std::string>& refs);

/// Scores each task and the union of both. Plugins run once over the union.
CorpusReport evaluate_corpus(const std::vector<Pair>& bhc, const std::vector<Pair>& di,
                             const TokenizationSpec& spec = {},
                             const std::vector<PluginSpec>& plugins = {});

}  // namespace ctrlgen::metrics
