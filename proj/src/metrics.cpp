#include "ctrlgen/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>

namespace ctrlgen::metrics {

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const Tokens& tokens, std::size_t n) {
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + n)];
  }
  return counts;
}

std::size_t clipped_overlap(const NgramCounts& hyp, const NgramCounts& ref) {
  std::size_t overlap = 0;
  for (const auto& [gram, count] : hyp) {
    const auto it = ref.find(gram);
    if (it != ref.end()) overlap += std::min(count, it->second);
  }
  return overlap;
}

double f1_of(double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }

}  // namespace

std::vector<std::string> tokenize(std::string_view text, const TokenizationSpec& spec) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (const char raw : text) {
    const auto ch = static_cast<unsigned char>(raw);
    if (std::isspace(ch)) {
      flush();
    } else if (spec.punctuation == Punctuation::split && ch < 0x80 && std::ispunct(ch)) {
      flush();
      tokens.emplace_back(1, raw);
    } else {
      current += spec.case_fold && ch < 0x80 ? static_cast<char>(std::tolower(ch)) : raw;
    }
  }
  flush();
  return tokens;
}

double bleu4(const Tokens& hyp, const Tokens& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto h = ngrams(hyp, n);
    const std::size_t total = hyp.size() >= n ? hyp.size() - n + 1 : 0;
    const std::size_t matched = clipped_overlap(h, ngrams(ref, n));
    const double p = matched == 0 ? kBleuEpsilon / static_cast<double>(std::max<std::size_t>(total, 1))
                                  : static_cast<double>(matched) / static_cast<double>(total);
    log_sum += std::log(p);
  }
  const double hl = static_cast<double>(hyp.size());
  const double rl = static_cast<double>(ref.size());
  const double bp = hl < rl ? std::exp(1.0 - rl / hl) : 1.0;
  return std::clamp(bp * std::exp(log_sum / 4.0), 0.0, 1.0);
}

double bleu4(std::string_view hyp, std::string_view ref, const TokenizationSpec& spec) {
  return bleu4(tokenize(hyp, spec), tokenize(ref, spec));
}

PRF rouge_n(const Tokens& hyp, const Tokens& ref, int n) {
  if (n < 1) throw Error("rouge_n: n must be >= 1");
  const auto un = static_cast<std::size_t>(n);
  if (hyp.size() < un || ref.size() < un) return {};
  const double overlap = static_cast<double>(clipped_overlap(ngrams(hyp, un), ngrams(ref, un)));
  PRF out;
  out.precision = overlap / static_cast<double>(hyp.size() - un + 1);
  out.recall = overlap / static_cast<double>(ref.size() - un + 1);
  out.f1 = f1_of(out.precision, out.recall);
  return out;
}

PRF rouge_n(std::string_view hyp, std::string_view ref, int n, const TokenizationSpec& spec) {
  return rouge_n(tokenize(hyp, spec), tokenize(ref, spec), n);
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

PRF rouge_l(const Tokens& hyp, const Tokens& ref) {
  if (hyp.empty() || ref.empty()) return {};
  const double l = static_cast<double>(lcs_length(hyp, ref));
  PRF out;
  out.precision = l / static_cast<double>(hyp.size());
  out.recall = l / static_cast<double>(ref.size());
  out.f1 = f1_of(out.precision, out.recall);
  return out;
}

PRF rouge_l(std::string_view hyp, std::string_view ref, const TokenizationSpec& spec) {
  return rouge_l(tokenize(hyp, spec), tokenize(ref, spec));
}

std::vector<Match> meteor_align(const Tokens& hyp, const Tokens& ref) {
  std::vector<std::optional<std::size_t>> hyp_to_ref(hyp.size());
  std::vector<bool> ref_used(ref.size(), false);

  auto stage = [&](const Tokens& h, const Tokens& r) {
    std::optional<std::size_t> last_ref;
    for (std::size_t i = 0; i < h.size(); ++i) {
      if (hyp_to_ref[i]) {
        last_ref = hyp_to_ref[i];
        continue;
      }
      std::optional<std::size_t> pick;
      if (last_ref && *last_ref + 1 < r.size() && !ref_used[*last_ref + 1] &&
          r[*last_ref + 1] == h[i]) {
        pick = *last_ref + 1;
      } else {
        for (std::size_t j = 0; j < r.size(); ++j) {
          if (!ref_used[j] && r[j] == h[i]) {
            pick = j;
            break;
          }
        }
      }
      if (pick) {
        hyp_to_ref[i] = pick;
        ref_used[*pick] = true;
      }
      last_ref = pick;
    }
  };

  stage(hyp, ref);
  Tokens hs, rs;
  for (const auto& t : hyp) hs.push_back(porter_stem(t));
  for (const auto& t : ref) rs.push_back(porter_stem(t));
  stage(hs, rs);

  std::vector<Match> out;
  for (std::size_t i = 0; i < hyp.size(); ++i) {
    if (hyp_to_ref[i]) out.push_back({i, *hyp_to_ref[i]});
  }
  return out;
}

std::size_t count_chunks(const std::vector<Match>& alignment) {
  std::size_t chunks = 0;
  for (std::size_t k = 0; k < alignment.size(); ++k) {
    const bool continues = k > 0 && alignment[k].hyp == alignment[k - 1].hyp + 1 &&
                           alignment[k].ref == alignment[k - 1].ref + 1;
    if (!continues) ++chunks;
  }
  return chunks;
}

double meteor(const Tokens& hyp, const Tokens& ref, const MeteorParams& params) {
  if (hyp.empty() || ref.empty()) return 0.0;
  const auto alignment = meteor_align(hyp, ref);
  if (alignment.empty()) return 0.0;
  const double m = static_cast<double>(alignment.size());
  const double p = m / static_cast<double>(hyp.size());
  const double r = m / static_cast<double>(ref.size());
  const double fmean = p * r / (params.alpha * p + (1.0 - params.alpha) * r);
  const double frag = static_cast<double>(count_chunks(alignment)) / m;
  const double penalty = params.gamma * std::pow(frag, params.beta);
  return std::clamp(fmean * (1.0 - penalty), 0.0, 1.0);
}

double meteor(std::string_view hyp, std::string_view ref, const TokenizationSpec& spec,
              const MeteorParams& params) {
  return meteor(tokenize(hyp, spec), tokenize(ref, spec), params);
}

// ---------------------------------------------------------------------------

double overall_of(const std::map<std::string, double>& scores) {
  if (scores.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [name, value] : scores) sum += value;
  return sum / static_cast<double>(scores.size());
}

MetricReport make_report(std::map<std::string, double> scores, std::size_t n_pairs) {
  MetricReport r;
  for (const auto& [name, value] : scores) {
    if (!(value >= 0.0 && value <= 1.0)) {
      throw Error("metric '" + name + "' out of [0,1]: " + std::to_string(value));
    }
  }
  r.overall = overall_of(scores);
  r.scores = std::move(scores);
  r.n_pairs = n_pairs;
  return r;
}

nlohmann::json to_json(const MetricReport& report) {
  nlohmann::json j = {{"scores", report.scores},
                      {"overall", report.overall},
                      {"n_pairs", report.n_pairs}};
  if (!report.warnings.empty()) j["warnings"] = report.warnings;
  if (!report.omitted.empty()) j["omitted"] = report.omitted;
  return j;
}

nlohmann::json to_json(const CorpusReport& report) {
  return {{"bhc", to_json(report.bhc)}, {"di", to_json(report.di)},
          {"combined", to_json(report.combined)}};
}

std::map<std::string, double> score_pair(std::string_view hyp, std::string_view ref,
                                         const TokenizationSpec& spec) {
  const auto h = tokenize(hyp, spec);
  const auto r = tokenize(ref, spec);
  return {{"bleu4", bleu4(h, r)},
          {"rouge1", rouge_n(h, r, 1).f1},
          {"rouge2", rouge_n(h, r, 2).f1},
          {"rougeL", rouge_l(h, r).f1},
          {"meteor", meteor(h, r)}};
}

namespace {

// Per-metric, per-pair score columns.
using ScoreColumns = std::map<std::string, std::vector<double>>;

MetricReport average(const ScoreColumns& columns, std::size_t begin, std::size_t end,
                     const std::vector<std::string>& warnings,
                     const std::map<std::string, std::string>& omitted) {
  std::map<std::string, double> means;
  if (end > begin) {
    for (const auto& [name, values] : columns) {
      double sum = 0.0;
      for (std::size_t i = begin; i < end; ++i) sum += values[i];
      means[name] = sum / static_cast<double>(end - begin);
    }
  }
  auto report = make_report(std::move(means), end - begin);
  report.warnings = warnings;
  report.omitted = omitted;
  return report;
}

ScoreColumns score_all(const std::vector<Pair>& pairs, const TokenizationSpec& spec,
                       const std::vector<PluginSpec>& plugins, std::vector<std::string>& warnings,
                       std::map<std::string, std::string>& omitted) {
  ScoreColumns columns;
  for (const auto& p : pairs) {
    for (const auto& [name, value] : score_pair(p.hyp, p.ref, spec)) columns[name].push_back(value);
  }
  if (pairs.empty()) return columns;
  for (const auto& plugin : plugins) {
    try {
      columns[plugin.name] = run_external_metric(plugin, pairs, &warnings);
    } catch (const MetricPluginError& e) {
      omitted[plugin.name] = e.what();
      warnings.push_back(e.what());
    }
  }
  return columns;
}

std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace

MetricReport evaluate(const std::vector<Pair>& pairs, const TokenizationSpec& spec,
                      const std::vector<PluginSpec>& plugins) {
  std::vector<std::string> warnings;
  std::map<std::string, std::string> omitted;
  const auto columns = score_all(pairs, spec, plugins, warnings, omitted);
  return average(columns, 0, pairs.size(), warnings, omitted);
}

std::vector<Pair> make_pairs(const std::vector<std::string>& hyps,
                             const std::vector<std::string>& refs) {
  if (hyps.size() != refs.size()) {
    throw Error("hypothesis/reference count mismatch: " + std::to_string(hyps.size()) + " vs " +
                std::to_string(refs.size()));
  }
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < hyps.size(); ++i) pairs.push_back({hyps[i], refs[i]});
  return pairs;
}

CorpusReport evaluate_corpus(const std::vector<Pair>& bhc, const std::vector<Pair>& di,
                             const TokenizationSpec& spec, const std::vector<PluginSpec>& plugins) {
  std::vector<Pair> all = bhc;
  all.insert(all.end(), di.begin(), di.end());
  std::vector<std::string> warnings;
  std::map<std::string, std::string> omitted;
  const auto columns = score_all(all, spec, plugins, warnings, omitted);
  CorpusReport report;
  report.bhc = average(columns, 0, bhc.size(), warnings, omitted);
  report.di = average(columns, bhc.size(), all.size(), warnings, omitted);
  report.combined = average(columns, 0, all.size(), warnings, omitted);
  return report;
}

std::string render_table(const CorpusReport& report) {
  std::vector<std::string> cols;
  for (const auto& c : kTableColumns) {
    if (report.combined.scores.count(c)) cols.push_back(c);
  }
  for (const auto& [name, value] : report.combined.scores) {
    if (std::find(cols.begin(), cols.end(), name) == cols.end()) cols.push_back(name);
  }
  std::ostringstream out;
  out << "task      overall";
  for (const auto& c : cols) out << "  " << c;
  out << "\n";
  const std::pair<const char*, const MetricReport*> rows[] = {
      {"bhc     ", &report.bhc}, {"di      ", &report.di}, {"combined", &report.combined}};
  for (const auto& [label, r] : rows) {
    out << label << "  " << fixed3(r->overall);
    for (const auto& c : cols) {
      const auto it = r->scores.find(c);
      const std::string cell = it == r->scores.end() ? "-" : fixed3(it->second);
      out << "  " << std::string(c.size() > cell.size() ? c.size() - cell.size() : 0, ' ') << cell;
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace ctrlgen::metrics
