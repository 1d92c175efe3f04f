#pragma once

#include <nlohmann/json.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace bmod::metrics {

// Adjusted Rand Index from the contingency table of two labelings. Returns 1.0
// when the index is degenerate (e.g. both labelings are one cluster).
// Throws std::invalid_argument on empty or unequal inputs.
double ari(std::span<const int> gt, std::span<const int> pred);

// ARI over pixels with gt > 0. nullopt when the frame has no foreground.
std::optional<double> fg_ari(std::span<const int> gt, std::span<const int> pred);

// ARI over all pixels, gt background forming one cluster.
double all_ari(std::span<const int> gt, std::span<const int> pred);

struct JaccardPair {
  double foreground = 0.0;
  double background = 0.0;
};

// Binarizes gt (> 0) and pred (!= background_label) and returns the IoU of
// each class. A class absent from both sides scores 1.
JaccardPair jaccard_fg_bg(std::span<const int> gt, std::span<const int> pred, int background_label);

// Label with the most pixels; ties go to the smaller label.
int baseline_background_guess(std::span<const int> pred);

struct FrameScore {
  int sequence = 0;
  int frame = 0;
  std::optional<double> fg_ari;
  double all_ari = 0.0;
  double jaccard_fg = 0.0;
  double jaccard_bg = 0.0;
};

// Scores one frame. When background_label is nullopt the background is
// guessed as the largest predicted segment.
FrameScore score_frame(std::span<const int> gt, std::span<const int> pred, std::optional<int> background_label,
                       int sequence, int frame);

struct MetricReport {
  double fg_ari = 0.0;
  double all_ari = 0.0;
  double jaccard_fg = 0.0;
  double jaccard_bg = 0.0;
  int frames_scored = 0;
  int frames_without_foreground = 0;  // skipped by fg-ARI
  bool largest_segment_background = false;
  std::vector<FrameScore> per_frame;
};

// Arithmetic means over the per-frame values (fg-ARI over frames that have
// foreground).
MetricReport aggregate(std::vector<FrameScore> frames, bool largest_segment_background);

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

// Columns: sequence,frame,fg_ari,all_ari,j_fg,j_bg (fg_ari empty when skipped).
std::string per_frame_csv(const MetricReport& r);

}  // namespace bmod::metrics
