#include "bmod/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace bmod::metrics {

namespace {

double comb2(double n) { return n * (n - 1.0) / 2.0; }

// Dense relabeling to 0..k-1.
std::vector<int> compact(std::span<const int> labels, int& count) {
  std::unordered_map<int, int> ids;
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, inserted] = ids.emplace(labels[i], static_cast<int>(ids.size()));
    out[i] = it->second;
  }
  count = static_cast<int>(ids.size());
  return out;
}

}  // namespace

double ari(std::span<const int> gt, std::span<const int> pred) {
  if (gt.empty() || gt.size() != pred.size()) throw std::invalid_argument("ari: inputs must be nonempty and equal length");
  int kg = 0, kp = 0;
  const auto g = compact(gt, kg);
  const auto p = compact(pred, kp);
  std::vector<double> table(static_cast<std::size_t>(kg) * kp, 0.0), rows(kg, 0.0), cols(kp, 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) {
    table[static_cast<std::size_t>(g[i]) * kp + p[i]] += 1.0;
    rows[g[i]] += 1.0;
    cols[p[i]] += 1.0;
  }
  double index = 0.0, sum_rows = 0.0, sum_cols = 0.0;
  for (double v : table) index += comb2(v);
  for (double v : rows) sum_rows += comb2(v);
  for (double v : cols) sum_cols += comb2(v);
  const double total = comb2(static_cast<double>(g.size()));
  if (total == 0.0) return 1.0;
  const double expected = sum_rows * sum_cols / total;
  const double max_index = 0.5 * (sum_rows + sum_cols);
  const double denom = max_index - expected;
  if (denom == 0.0) return 1.0;
  return (index - expected) / denom;
}

std::optional<double> fg_ari(std::span<const int> gt, std::span<const int> pred) {
  if (gt.size() != pred.size()) throw std::invalid_argument("fg_ari: size mismatch");
  std::vector<int> g, p;
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (gt[i] > 0) {
      g.push_back(gt[i]);
      p.push_back(pred[i]);
    }
  if (g.empty()) return std::nullopt;
  return ari(g, p);
}

double all_ari(std::span<const int> gt, std::span<const int> pred) { return ari(gt, pred); }

JaccardPair jaccard_fg_bg(std::span<const int> gt, std::span<const int> pred, int background_label) {
  if (gt.empty() || gt.size() != pred.size()) throw std::invalid_argument("jaccard_fg_bg: bad input sizes");
  std::size_t fg_inter = 0, fg_union = 0, bg_inter = 0, bg_union = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool g = gt[i] > 0;
    const bool p = pred[i] != background_label;
    fg_inter += g && p;
    fg_union += g || p;
    bg_inter += !g && !p;
    bg_union += !g || !p;
  }
  auto iou = [](std::size_t inter, std::size_t uni) {
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  };
  return {iou(fg_inter, fg_union), iou(bg_inter, bg_union)};
}

int baseline_background_guess(std::span<const int> pred) {
  if (pred.empty()) throw std::invalid_argument("baseline_background_guess: empty input");
  std::map<int, std::size_t> counts;
  for (int v : pred) ++counts[v];
  int best = counts.begin()->first;
  std::size_t best_count = 0;
  for (const auto& [label, count] : counts)
    if (count > best_count) {
      best = label;
      best_count = count;
    }
  return best;
}

FrameScore score_frame(std::span<const int> gt, std::span<const int> pred, std::optional<int> background_label,
                       int sequence, int frame) {
  FrameScore s;
  s.sequence = sequence;
  s.frame = frame;
  s.fg_ari = fg_ari(gt, pred);
  s.all_ari = all_ari(gt, pred);
  const int bg = background_label ? *background_label : baseline_background_guess(pred);
  const auto j = jaccard_fg_bg(gt, pred, bg);
  s.jaccard_fg = j.foreground;
  s.jaccard_bg = j.background;
  return s;
}

MetricReport aggregate(std::vector<FrameScore> frames, bool largest_segment_background) {
  MetricReport r;
  r.largest_segment_background = largest_segment_background;
  int fg_frames = 0;
  for (const auto& f : frames) {
    if (f.fg_ari) {
      r.fg_ari += *f.fg_ari;
      ++fg_frames;
    } else {
      ++r.frames_without_foreground;
    }
    r.all_ari += f.all_ari;
    r.jaccard_fg += f.jaccard_fg;
    r.jaccard_bg += f.jaccard_bg;
  }
  r.frames_scored = static_cast<int>(frames.size());
  if (fg_frames > 0) r.fg_ari /= fg_frames;
  if (!frames.empty()) {
    const double n = static_cast<double>(frames.size());
    r.all_ari /= n;
    r.jaccard_fg /= n;
    r.jaccard_bg /= n;
  }
  r.per_frame = std::move(frames);
  return r;
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : r.per_frame) {
    frames.push_back({{"sequence", f.sequence},
                      {"frame", f.frame},
                      {"fg_ari", f.fg_ari ? nlohmann::json(*f.fg_ari) : nlohmann::json(nullptr)},
                      {"all_ari", f.all_ari},
                      {"j_fg", f.jaccard_fg},
                      {"j_bg", f.jaccard_bg}});
  }
  j = nlohmann::json{{"fg_ari", r.fg_ari},
                     {"all_ari", r.all_ari},
                     {"jaccard_fg", r.jaccard_fg},
                     {"jaccard_bg", r.jaccard_bg},
                     {"frames_scored", r.frames_scored},
                     {"frames_without_foreground", r.frames_without_foreground},
                     {"largest_segment_background", r.largest_segment_background},
                     {"per_frame", frames}};
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  j.at("fg_ari").get_to(r.fg_ari);
  j.at("all_ari").get_to(r.all_ari);
  j.at("jaccard_fg").get_to(r.jaccard_fg);
  j.at("jaccard_bg").get_to(r.jaccard_bg);
  j.at("frames_scored").get_to(r.frames_scored);
  j.at("frames_without_foreground").get_to(r.frames_without_foreground);
  j.at("largest_segment_background").get_to(r.largest_segment_background);
  r.per_frame.clear();
  for (const auto& f : j.at("per_frame")) {
    FrameScore s;
    f.at("sequence").get_to(s.sequence);
    f.at("frame").get_to(s.frame);
    if (!f.at("fg_ari").is_null()) s.fg_ari = f.at("fg_ari").get<double>();
    f.at("all_ari").get_to(s.all_ari);
    f.at("j_fg").get_to(s.jaccard_fg);
    f.at("j_bg").get_to(s.jaccard_bg);
    r.per_frame.push_back(s);
  }
}

std::string per_frame_csv(const MetricReport& r) {
  std::ostringstream os;
  os << "sequence,frame,fg_ari,all_ari,j_fg,j_bg\n";
  char buf[256];
  for (const auto& f : r.per_frame) {
    os << f.sequence << ',' << f.frame << ',';
    if (f.fg_ari) {
      std::snprintf(buf, sizeof(buf), "%.9g", *f.fg_ari);
      os << buf;
    }
    std::snprintf(buf, sizeof(buf), ",%.9g,%.9g,%.9g\n", f.all_ari, f.jaccard_fg, f.jaccard_bg);
    os << buf;
  }
  return os.str();
}

}  // namespace bmod::metrics
