#include "bmod/runner/experiments.hpp"

#include "bmod/error.hpp"
#include "bmod/image_io.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <map>

namespace bmod::runner {

namespace fs = std::filesystem;

namespace {

std::string file_stem(const std::string& name) {
  std::string s = name;
  for (auto& c : s)
    if (c == '/') c = '_';
  return s;
}

std::string variant_of(const std::string& name) { return name.substr(0, name.find('/')); }
std::string seed_of(const std::string& name) {
  const auto slash = name.find('/');
  return slash == std::string::npos ? "" : name.substr(slash + 1);
}

template <typename Vary>
std::vector<ExperimentResult> sweep(const TrainConfig& base, int num_seeds, const std::vector<std::string>& variants,
                                    Vary vary) {
  if (num_seeds < 1) throw ConfigError("need at least one seed");
  const Datasets data = load_datasets(base.data);
  std::vector<ExperimentResult> results;
  for (int k = 0; k < num_seeds; ++k) {
    for (const auto& v : variants) {
      TrainConfig c = base;
      c.seed = base.seed + static_cast<std::uint64_t>(k);
      vary(c, v);
      const std::string name = v + "/seed" + std::to_string(c.seed);
      if (!base.output_dir.empty()) c.output_dir = (fs::path(base.output_dir) / file_stem(name)).string();
      std::fprintf(stderr, "[bmod] training %s (%d steps)\n", name.c_str(), c.steps);
      results.push_back(train(c, data, name));
      const auto& r = results.back().report;
      std::fprintf(stderr, "[bmod] %s: fg-ARI %.4f all-ARI %.4f (%.0f s)\n", name.c_str(), r.fg_ari, r.all_ari,
                   results.back().wall_seconds);
    }
  }
  return results;
}

}  // namespace

std::vector<ExperimentResult> run_ablation_suite(const TrainConfig& base, int num_seeds) {
  return sweep(base, num_seeds, {"full", "nonmoving_bg", "full_map_reg", "unweighted_bce"},
               [](TrainConfig& c, const std::string& v) {
                 c.loss.ablation_mode = objectives::ablation_mode_from_string(v);
                 c.model.background_slot = true;
               });
}

std::vector<ExperimentResult> run_noise_study(const TrainConfig& base, int num_seeds) {
  return sweep(base, num_seeds, {"estimated", "estimated_filtered", "gt"}, [](TrainConfig& c, const std::string& v) {
    c.guidance = guidance_from_string(v);
    c.loss.ablation_mode = objectives::AblationMode::kFull;
    c.model.background_slot = true;
  });
}

std::vector<ExperimentResult> run_baseline_comparison(const TrainConfig& base, int num_seeds) {
  return sweep(base, num_seeds, {"bmod", "no_bg_slot"}, [](TrainConfig& c, const std::string& v) {
    const bool baseline = v == "no_bg_slot";
    c.loss.ablation_mode = baseline ? objectives::AblationMode::kNoBgSlot : objectives::AblationMode::kFull;
    c.model.background_slot = !baseline;
  });
}

std::vector<ExperimentResult> run_suite(const std::string& suite, const TrainConfig& base, int num_seeds) {
  if (suite == "table5") return run_ablation_suite(base, num_seeds);
  if (suite == "table6") return run_noise_study(base, num_seeds);
  if (suite == "table3") return run_baseline_comparison(base, num_seeds);
  throw ConfigError("unknown suite '" + suite + "' (expected table3, table5 or table6)");
}

std::vector<TableRow> summarize(const std::vector<ExperimentResult>& results) {
  std::vector<TableRow> rows;
  std::map<std::string, std::size_t> index;
  for (const auto& r : results) {
    const std::string v = variant_of(r.name);
    auto [it, inserted] = index.emplace(v, rows.size());
    if (inserted) rows.push_back({v});
    TableRow& row = rows[it->second];
    ++row.runs;
    row.fg_ari += r.report.fg_ari;
    row.all_ari += r.report.all_ari;
    row.jaccard_fg += r.report.jaccard_fg;
    row.jaccard_bg += r.report.jaccard_bg;
  }
  for (auto& row : rows) {
    row.fg_ari /= row.runs;
    row.all_ari /= row.runs;
    row.jaccard_fg /= row.runs;
    row.jaccard_bg /= row.runs;
  }
  return rows;
}

const TableRow& table_row(const std::vector<TableRow>& table, const std::string& variant) {
  for (const auto& r : table)
    if (r.variant == variant) return r;
  throw std::out_of_range("no table row '" + variant + "'");
}

namespace {

std::array<std::uint8_t, 3> label_color(int label) {
  static const std::array<std::array<std::uint8_t, 3>, 12> palette{{{230, 25, 75},
                                                                     {60, 180, 75},
                                                                     {255, 225, 25},
                                                                     {0, 130, 200},
                                                                     {245, 130, 48},
                                                                     {145, 30, 180},
                                                                     {70, 240, 240},
                                                                     {240, 50, 230},
                                                                     {210, 245, 60},
                                                                     {250, 190, 212},
                                                                     {0, 128, 128},
                                                                     {170, 110, 40}}};
  if (label == 0) return {40, 40, 40};
  return palette[static_cast<std::size_t>(label - 1) % palette.size()];
}

void paint(io::Image8& img, int x0, const std::vector<int>& labels, int h, int w) {
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto c = label_color(labels[static_cast<std::size_t>(y) * w + x]);
      for (int k = 0; k < 3; ++k) img.data[(static_cast<std::size_t>(y) * img.width + x0 + x) * 3 + k] = c[k];
    }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

void emit_report(const std::vector<ExperimentResult>& results, const fs::path& out_dir) {
  fs::create_directories(out_dir / "per_frame");
  fs::create_directories(out_dir / "triptychs");
  write_text(out_dir / "results.json", nlohmann::json(results).dump() + "\n");

  const auto table = summarize(results);
  nlohmann::json metrics{{"experiments", nlohmann::json::array()}, {"table", nlohmann::json::array()}};
  std::string csv = "experiment,fg_ari,all_ari,j_fg,j_bg,frames_scored,largest_segment_background\n";
  std::string loss = "experiment,step,mse,wbce,fgbg,total\n";
  for (const auto& r : results) {
    const auto& m = r.report;
    metrics["experiments"].push_back({{"name", r.name},
                                      {"fg_ari", m.fg_ari},
                                      {"all_ari", m.all_ari},
                                      {"jaccard_fg", m.jaccard_fg},
                                      {"jaccard_bg", m.jaccard_bg},
                                      {"frames_scored", m.frames_scored},
                                      {"largest_segment_background", m.largest_segment_background}});
    csv += r.name + "," + fmt(m.fg_ari) + "," + fmt(m.all_ari) + "," + fmt(m.jaccard_fg) + "," + fmt(m.jaccard_bg) +
           "," + std::to_string(m.frames_scored) + "," + (m.largest_segment_background ? "1" : "0") + "\n";
    for (const auto& s : r.loss_log)
      loss += r.name + "," + std::to_string(s.step) + "," + fmt(s.loss.mse) + "," + fmt(s.loss.wbce) + "," +
              fmt(s.loss.fgbg) + "," + fmt(s.loss.total) + "\n";
    write_text(out_dir / "per_frame" / (file_stem(r.name) + ".csv"), metrics::per_frame_csv(m));
  }
  std::string table_csv = "variant,runs,fg_ari,all_ari,j_fg,j_bg\n";
  for (const auto& row : table) {
    metrics["table"].push_back({{"variant", row.variant},
                                {"runs", row.runs},
                                {"fg_ari", row.fg_ari},
                                {"all_ari", row.all_ari},
                                {"jaccard_fg", row.jaccard_fg},
                                {"jaccard_bg", row.jaccard_bg}});
    table_csv += row.variant + "," + std::to_string(row.runs) + "," + fmt(row.fg_ari) + "," + fmt(row.all_ari) +
                 "," + fmt(row.jaccard_fg) + "," + fmt(row.jaccard_bg) + "\n";
  }
  write_text(out_dir / "metrics.json", metrics.dump(2) + "\n");
  write_text(out_dir / "metrics.csv", csv);
  write_text(out_dir / "table.csv", table_csv);
  write_text(out_dir / "loss_curves.csv", loss);

  for (const auto& r : results) {
    if (!r.background_slot) continue;
    const ExperimentResult* baseline = nullptr;
    for (const auto& b : results)
      if (!b.background_slot && seed_of(b.name) == seed_of(r.name)) baseline = &b;
    for (std::size_t i = 0; i < r.qualitative.size(); ++i) {
      const auto& q = r.qualitative[i];
      io::Image8 img;
      img.width = 3 * q.width;
      img.height = q.height;
      img.channels = 3;
      img.data.assign(static_cast<std::size_t>(img.width) * img.height * 3, 0);
      for (int y = 0; y < q.height; ++y)
        std::copy_n(q.rgb.data() + static_cast<std::size_t>(y) * q.width * 3, q.width * 3,
                    img.data.data() + static_cast<std::size_t>(y) * img.width * 3);
      const bool has_base = baseline && i < baseline->qualitative.size();
      paint(img, q.width, has_base ? baseline->qualitative[i].prediction : q.gt, q.height, q.width);
      paint(img, 2 * q.width, q.prediction, q.height, q.width);
      char suffix[32];
      std::snprintf(suffix, sizeof(suffix), "_seq%02d.png", q.sequence);
      io::write_png8(out_dir / "triptychs" / (file_stem(r.name) + suffix), img);
    }
  }
}

void emit_report_from(const fs::path& in_dir, const fs::path& out_dir) {
  const fs::path path = in_dir / "results.json";
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  std::vector<ExperimentResult> results;
  try {
    results = nlohmann::json::parse(is).get<std::vector<ExperimentResult>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed " + path.string() + ": " + e.what());
  }
  emit_report(results, out_dir);
}

}  // namespace bmod::runner
