// SPDX-License-Identifier: Apache-2.0

#include "veinatn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "veinatn/error.hpp"
#include "veinatn/image.hpp"
#include "veinatn/trainer.hpp"

namespace veinatn {
namespace {

void require_nonempty(const ScoreSet& s, const char* what) {
  if (s.genuine.empty() || s.impostor.empty()) {
    throw ConfigError(std::string(what) + ": need nonempty genuine and impostor score lists (got " +
                      std::to_string(s.genuine.size()) + " genuine, " + std::to_string(s.impostor.size()) +
                      " impostor)");
  }
}

struct Sorted {
  std::vector<double> gen, imp, thresholds;  // thresholds: distinct scores ascending
};

Sorted sort_scores(const ScoreSet& s, const char* what) {
  require_nonempty(s, what);
  Sorted out{s.genuine, s.impostor, {}};
  for (const auto* v : {&out.gen, &out.imp}) {
    for (double x : *v) {
      if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite score");
    }
  }
  std::sort(out.gen.begin(), out.gen.end());
  std::sort(out.imp.begin(), out.imp.end());
  out.thresholds.reserve(out.gen.size() + out.imp.size());
  std::merge(out.gen.begin(), out.gen.end(), out.imp.begin(), out.imp.end(), std::back_inserter(out.thresholds));
  out.thresholds.erase(std::unique(out.thresholds.begin(), out.thresholds.end()), out.thresholds.end());
  return out;
}

// Counts at threshold t for ascending-sorted lists: false accepts
// (impostor >= t) and false rejects (genuine < t).
struct Counts {
  std::size_t fa, fr;
};

Counts counts_at(const Sorted& s, double t) {
  const auto fr = static_cast<std::size_t>(std::lower_bound(s.gen.begin(), s.gen.end(), t) - s.gen.begin());
  const auto below = static_cast<std::size_t>(std::lower_bound(s.imp.begin(), s.imp.end(), t) - s.imp.begin());
  return {s.imp.size() - below, fr};
}

double above_max(const Sorted& s) {
  return std::nextafter(s.thresholds.back(), std::numeric_limits<double>::infinity());
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

}  // namespace

std::string_view view_name(ScoreView v) {
  switch (v) {
    case ScoreView::kNormal:
      return "normal";
    case ScoreView::kEnhanced:
      return "enhanced";
    case ScoreView::kFused:
      return "fused";
  }
  return "fused";
}

ScoreView parse_view(std::string_view name) {
  if (name == "normal") return ScoreView::kNormal;
  if (name == "enhanced") return ScoreView::kEnhanced;
  if (name == "fused") return ScoreView::kFused;
  throw ConfigError("unknown score view '" + std::string(name) + "' (expected normal, enhanced or fused)");
}

ScoreSet select_view(const std::vector<ScorePair>& pairs, ScoreView view) {
  ScoreSet s;
  for (const auto& p : pairs) {
    const double v = view == ScoreView::kNormal ? p.normal : view == ScoreView::kEnhanced ? p.enhanced : p.fused;
    (p.genuine ? s.genuine : s.impostor).push_back(v);
  }
  return s;
}

std::vector<ScorePair> score_all_claims(const Model& normal, const Model& enhanced, const Tensor<float>& probe_normal,
                                        const Tensor<float>& probe_enhanced, int true_id, const std::string& probe) {
  if (normal.config.num_classes != enhanced.config.num_classes) {
    throw ConfigError("stream models disagree on class count (" + std::to_string(normal.config.num_classes) +
                      " vs " + std::to_string(enhanced.config.num_classes) + ")");
  }
  const Tensor<float> pn = predict(normal.config, normal.params, probe_normal);
  const Tensor<float> pe = predict(enhanced.config, enhanced.params, probe_enhanced);
  std::vector<ScorePair> out;
  out.reserve(pn.size());
  for (std::size_t c = 0; c < pn.size(); ++c) {
    ScorePair s;
    s.probe = probe;
    s.claimed_id = static_cast<int>(c);
    s.genuine = static_cast<int>(c) == true_id;
    s.normal = static_cast<double>(pn[c]);
    s.enhanced = static_cast<double>(pe[c]);
    s.fused = s.normal + s.enhanced;
    out.push_back(std::move(s));
  }
  return out;
}

ScorePair comparison_score(const Model& normal, const Model& enhanced, const Tensor<float>& probe_normal,
                           const Tensor<float>& probe_enhanced, int claimed_id) {
  if (claimed_id < 0 || claimed_id >= normal.config.num_classes || claimed_id >= enhanced.config.num_classes) {
    throw ConfigError("claimed id " + std::to_string(claimed_id) + " out of range [0, " +
                      std::to_string(std::min(normal.config.num_classes, enhanced.config.num_classes) - 1) + "]");
  }
  auto all = score_all_claims(normal, enhanced, probe_normal, probe_enhanced, -1, "");
  return all[static_cast<std::size_t>(claimed_id)];
}

std::vector<ScorePair> generate_scores(const ProtocolSpec& protocol, const Model& normal, const Model& enhanced,
                                       const ScoringOptions& options) {
  if (protocol.test.empty()) throw ConfigError("protocol '" + protocol.name + "' has an empty test split");
  for (const Model* m : {&normal, &enhanced}) {
    if (m->config.num_classes != protocol.num_identities()) {
      throw ConfigError("model has " + std::to_string(m->config.num_classes) + " classes, protocol has " +
                        std::to_string(protocol.num_identities()) + " identities");
    }
  }
  std::vector<std::vector<ScorePair>> per_probe(protocol.test.size());
  parallel_for(protocol.test.size(), options.threads, [&](std::size_t i) {
    const SampleRef& s = protocol.test[i];
    const GrayImage raw = load_image(s.path);
    const auto xn = to_network_input<float>(
        prepare_image(raw, Stream::kNormal, options.clahe, normal.config.input_size), normal.config.input_size);
    const auto xe = to_network_input<float>(
        prepare_image(raw, Stream::kEnhanced, options.clahe, enhanced.config.input_size), enhanced.config.input_size);
    const std::string rel = std::filesystem::relative(s.path, protocol.root).generic_string();
    per_probe[i] = score_all_claims(normal, enhanced, xn, xe, s.identity, rel);
  });
  std::vector<ScorePair> out;
  out.reserve(protocol.test.size() * static_cast<std::size_t>(protocol.num_identities()));
  for (auto& v : per_probe) {
    for (auto& p : v) out.push_back(std::move(p));
  }
  return out;
}

ScoreCounts count_scores(const ProtocolSpec& protocol) {
  if (protocol.test.empty()) throw ConfigError("protocol '" + protocol.name + "' has an empty test split");
  const auto ids = static_cast<std::uint64_t>(protocol.num_identities());
  const auto probes = static_cast<std::uint64_t>(protocol.test.size());
  return {probes, probes * (ids - 1)};
}

ErrorRates fmr_fnmr(const ScoreSet& scores, double threshold) {
  require_nonempty(scores, "fmr_fnmr");
  std::size_t fa = 0, fr = 0;
  for (double s : scores.impostor) fa += s >= threshold;
  for (double s : scores.genuine) fr += s < threshold;
  return {static_cast<double>(fa) / static_cast<double>(scores.impostor.size()),
          static_cast<double>(fr) / static_cast<double>(scores.genuine.size())};
}

EerResult eer(const ScoreSet& scores) {
  const Sorted s = sort_scores(scores, "eer");
  const auto ng = static_cast<long double>(s.gen.size()), ni = static_cast<long double>(s.imp.size());
  const auto n_gen = static_cast<std::uint64_t>(s.gen.size()), n_imp = static_cast<std::uint64_t>(s.imp.size());
  std::uint64_t best_gap = UINT64_MAX;
  EerResult best;
  for (double t : s.thresholds) {
    const Counts c = counts_at(s, t);
    // |fa/ni - fr/ng| scaled by ni*ng, compared exactly in integers.
    const std::uint64_t a = c.fa * n_gen, b = c.fr * n_imp;
    const std::uint64_t gap = a > b ? a - b : b - a;
    if (gap < best_gap) {
      best_gap = gap;
      best.threshold = t;
      best.eer = (static_cast<double>(c.fa) / static_cast<double>(ni) +
                  static_cast<double>(c.fr) / static_cast<double>(ng)) /
                 2.0;
    }
  }
  return best;
}

TarResult tar_at_fmr(const ScoreSet& scores, double fmr_target) {
  if (!(fmr_target > 0.0 && fmr_target < 1.0)) throw ConfigError("tar_at_fmr: target must lie in (0, 1)");
  const Sorted s = sort_scores(scores, "tar_at_fmr");
  const double ni = static_cast<double>(s.imp.size()), ng = static_cast<double>(s.gen.size());
  std::vector<double> candidates = s.thresholds;
  candidates.push_back(above_max(s));
  TarResult r;
  r.under_resolved = ni * fmr_target < 10.0;
  for (double t : candidates) {
    const Counts c = counts_at(s, t);
    const double fmr = static_cast<double>(c.fa) / ni;
    if (fmr <= fmr_target) {
      r.threshold = t;
      r.fmr = fmr;
      r.tar = 1.0 - static_cast<double>(c.fr) / ng;
      return r;
    }
  }
  return r;  // unreachable: the last candidate has FMR 0
}

std::vector<DetPoint> det_curve(const ScoreSet& scores) {
  const Sorted s = sort_scores(scores, "det_curve");
  const double ni = static_cast<double>(s.imp.size()), ng = static_cast<double>(s.gen.size());
  std::vector<DetPoint> out;
  out.reserve(s.thresholds.size() + 1);
  for (double t : s.thresholds) {
    const Counts c = counts_at(s, t);
    out.push_back({t, static_cast<double>(c.fa) / ni, static_cast<double>(c.fr) / ng});
  }
  out.push_back({above_max(s), 0.0, 1.0});
  return out;
}

EerResult eer_from_det(const std::vector<DetPoint>& curve) {
  if (curve.empty()) throw ConfigError("eer_from_det: empty curve");
  EerResult best;
  double best_gap = std::numeric_limits<double>::infinity();
  for (const auto& p : curve) {
    // Rates are ratios of counts; gaps closer than rounding error are ties
    // and the first one wins, as in eer().
    const double gap = std::abs(p.fmr - p.fnmr);
    if (gap < best_gap - 1e-12) {
      best_gap = gap;
      best = {(p.fmr + p.fnmr) / 2.0, p.threshold};
    }
  }
  return best;
}

ViewMetrics view_metrics(const std::vector<ScorePair>& pairs, ScoreView view) {
  const ScoreSet s = select_view(pairs, view);
  ViewMetrics m;
  m.view = view;
  m.genuine_count = s.genuine.size();
  m.impostor_count = s.impostor.size();
  m.eer = eer(s);
  for (int i = 0; i < 3; ++i) m.tar[i] = tar_at_fmr(s, kTarTargets[i]);
  return m;
}

std::vector<ViewMetrics> per_stream_report(const std::vector<ScorePair>& pairs) {
  return {view_metrics(pairs, ScoreView::kNormal), view_metrics(pairs, ScoreView::kEnhanced),
          view_metrics(pairs, ScoreView::kFused)};
}

KeyValueText metrics_report(const std::vector<ViewMetrics>& metrics) {
  static constexpr const char* kTarKeys[3] = {"tar_at_1pct", "tar_at_0p1pct", "tar_at_0p01pct"};
  static constexpr const char* kTarLabels[3] = {"1%", "0.1%", "0.01%"};
  KeyValueText t;
  for (const auto& m : metrics) {
    const std::string v(view_name(m.view));
    t.set(v + ".genuine_count", std::to_string(m.genuine_count));
    t.set(v + ".impostor_count", std::to_string(m.impostor_count));
    t.set(v + ".eer", format_double(m.eer.eer));
    t.set(v + ".eer_threshold", format_double(m.eer.threshold));
    std::string warning;
    for (int i = 0; i < 3; ++i) {
      t.set(v + "." + kTarKeys[i], format_double(m.tar[i].tar));
      if (m.tar[i].under_resolved) warning += std::string(warning.empty() ? "" : ", ") + kTarLabels[i];
    }
    if (!warning.empty()) {
      t.set(v + ".warning", "fewer than 10/FMR impostor scores for TAR at FMR " + warning);
    }
  }
  return t;
}

void write_scores_csv(const std::vector<ScorePair>& pairs, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << kScoresHeader << '\n';
  for (const auto& p : pairs) {
    if (p.probe.find_first_of(",\"\n") != std::string::npos) {
      throw FormatError("probe path '" + p.probe + "' contains a CSV delimiter");
    }
    out << p.probe << ',' << p.claimed_id << ',' << (p.genuine ? "genuine" : "impostor") << ','
        << format_sig(p.normal, 9) << ',' << format_sig(p.enhanced, 9) << ',' << format_sig(p.fused, 9) << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<ScorePair> read_scores_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open scores " + path.string());
  std::string line;
  if (!std::getline(in, line) || strip_cr(line) != kScoresHeader) {
    throw FormatError(path.string() + ": expected header '" + std::string(kScoresHeader) + "'");
  }
  std::vector<ScorePair> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_csv(line);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (f.size() != 6) throw FormatError(where + ": expected 6 fields, got " + std::to_string(f.size()));
    if (f[2] != "genuine" && f[2] != "impostor") throw FormatError(where + ": label must be genuine or impostor");
    try {
      out.push_back({f[0], static_cast<int>(parse_int(f[1], "claimed_id")), f[2] == "genuine",
                     parse_double(f[3], "score_normal"), parse_double(f[4], "score_enhanced"),
                     parse_double(f[5], "score_fused")});
    } catch (const ConfigError& e) {
      throw FormatError(where + ": " + e.what());
    }
  }
  return out;
}

void write_det_csv(const std::vector<DetPoint>& curve, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << kDetHeader << '\n';
  for (const auto& p : curve) {
    out << format_double(p.threshold) << ',' << format_double(p.fmr) << ',' << format_double(p.fnmr) << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<DetPoint> read_det_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open DET curve " + path.string());
  std::string line;
  if (!std::getline(in, line) || strip_cr(line) != kDetHeader) {
    throw FormatError(path.string() + ": expected header '" + std::string(kDetHeader) + "'");
  }
  std::vector<DetPoint> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_csv(line);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (f.size() != 3) throw FormatError(where + ": expected 3 fields");
    try {
      out.push_back({parse_double(f[0], "threshold"), parse_double(f[1], "fmr"), parse_double(f[2], "fnmr")});
    } catch (const ConfigError& e) {
      throw FormatError(where + ": " + e.what());
    }
  }
  return out;
}

}  // namespace veinatn
