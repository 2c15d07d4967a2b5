// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "veinatn/dataset.hpp"
#include "veinatn/imageproc.hpp"
#include "veinatn/keyvalue.hpp"
#include "veinatn/model.hpp"

namespace veinatn {

// One verification attempt: a probe against a claimed identity, scored by
// both streams. fused == normal + enhanced exactly.
struct ScorePair {
  std::string probe;  // path relative to the dataset root
  int claimed_id = 0;
  bool genuine = false;
  double normal = 0.0;
  double enhanced = 0.0;
  double fused = 0.0;

  friend bool operator==(const ScorePair&, const ScorePair&) = default;
};

enum class ScoreView { kNormal, kEnhanced, kFused };

std::string_view view_name(ScoreView v);
ScoreView parse_view(std::string_view name);

// Genuine and impostor scores of one view.
struct ScoreSet {
  std::vector<double> genuine;
  std::vector<double> impostor;
};

ScoreSet select_view(const std::vector<ScorePair>& pairs, ScoreView view);

// Claimed-class probabilities of the two streams for every claim
// 0..num_classes-1, from one forward pass per stream.
std::vector<ScorePair> score_all_claims(const Model& normal, const Model& enhanced, const Tensor<float>& probe_normal,
                                        const Tensor<float>& probe_enhanced, int true_id, const std::string& probe);

// C_n, C_e and V_s for a single claim.
ScorePair comparison_score(const Model& normal, const Model& enhanced, const Tensor<float>& probe_normal,
                           const Tensor<float>& probe_enhanced, int claimed_id);

struct ScoringOptions {
  ClaheParams clahe;
  int threads = 1;
};

// Scores every test probe of the protocol against every identity, in probe
// order then claim order. The normal model sees the raw image, the
// enhanced model its CLAHE version.
std::vector<ScorePair> generate_scores(const ProtocolSpec& protocol, const Model& normal, const Model& enhanced,
                                       const ScoringOptions& options = {});

struct ScoreCounts {
  std::uint64_t genuine = 0;
  std::uint64_t impostor = 0;
  friend bool operator==(const ScoreCounts&, const ScoreCounts&) = default;
};

// The counts generate_scores would produce, without reading any image.
ScoreCounts count_scores(const ProtocolSpec& protocol);

struct ErrorRates {
  double fmr = 0.0;
  double fnmr = 0.0;
};

// FMR = share of impostor scores >= t, FNMR = share of genuine scores < t.
ErrorRates fmr_fnmr(const ScoreSet& scores, double threshold);

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
};

// Sweeps every distinct score as threshold and returns (FMR + FNMR) / 2 at
// the threshold minimizing |FMR - FNMR| (smallest such threshold).
EerResult eer(const ScoreSet& scores);

struct TarResult {
  double tar = 0.0;
  double threshold = 0.0;
  double fmr = 0.0;
  // Fewer than 10 / target impostor scores.
  bool under_resolved = false;
};

// TAR = 1 - FNMR at the smallest threshold (distinct scores plus one value
// above the maximum) whose FMR <= target.
TarResult tar_at_fmr(const ScoreSet& scores, double fmr_target);

struct DetPoint {
  double threshold = 0.0;
  double fmr = 0.0;
  double fnmr = 0.0;
};

// One point per distinct score in ascending order, then a point just above
// the maximum score (FMR 0, FNMR 1).
std::vector<DetPoint> det_curve(const ScoreSet& scores);

// EER read off a DET curve: midpoint at the point minimizing |FMR - FNMR|.
EerResult eer_from_det(const std::vector<DetPoint>& curve);

inline constexpr double kTarTargets[3] = {0.01, 0.001, 0.0001};

struct ViewMetrics {
  ScoreView view = ScoreView::kFused;
  std::size_t genuine_count = 0;
  std::size_t impostor_count = 0;
  EerResult eer;
  TarResult tar[3];  // at kTarTargets
};

ViewMetrics view_metrics(const std::vector<ScorePair>& pairs, ScoreView view);

// Metrics for the normal, enhanced and fused views.
std::vector<ViewMetrics> per_stream_report(const std::vector<ScorePair>& pairs);

// Keys <view>.eer, <view>.eer_threshold, <view>.tar_at_1pct,
// <view>.tar_at_0p1pct, <view>.tar_at_0p01pct, <view>.genuine_count,
// <view>.impostor_count and <view>.warning when a TAR is under-resolved.
KeyValueText metrics_report(const std::vector<ViewMetrics>& metrics);

// Scores CSV: probe_path,claimed_id,label,score_normal,score_enhanced,score_fused
// with 9 significant digits.
inline constexpr std::string_view kScoresHeader =
    "probe_path,claimed_id,label,score_normal,score_enhanced,score_fused";
void write_scores_csv(const std::vector<ScorePair>& pairs, const std::filesystem::path& path);
std::vector<ScorePair> read_scores_csv(const std::filesystem::path& path);

inline constexpr std::string_view kDetHeader = "threshold,fmr,fnmr";
void write_det_csv(const std::vector<DetPoint>& curve, const std::filesystem::path& path);
std::vector<DetPoint> read_det_csv(const std::filesystem::path& path);

}  // namespace veinatn
