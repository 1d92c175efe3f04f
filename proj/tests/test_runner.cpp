#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bmod/checkpoint.hpp"
#include "bmod/error.hpp"
#include "bmod/image_io.hpp"
#include "bmod/metrics.hpp"
#include "bmod/motion_cues.hpp"
#include "bmod/runner/config.hpp"
#include "bmod/runner/evaluate.hpp"
#include "bmod/runner/experiments.hpp"
#include "bmod/runner/train.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace bmod;
using namespace bmod::runner;
namespace fs = std::filesystem;
using doctest::Approx;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("bmod_test_runner_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<scenegen::VideoSample> tiny_samples(int n, std::uint64_t seed) {
  std::vector<scenegen::VideoSample> out;
  for (int i = 0; i < n; ++i) out.push_back(scenegen::generate_sequence(scenegen::scene_preset("tiny", seed + i)));
  return out;
}

class OraclePredictor : public SegmentationPredictor {
 public:
  std::vector<std::vector<int>> predict(const scenegen::VideoSample& s, int, int start, int length) const override {
    std::vector<std::vector<int>> out;
    for (int t = start; t < start + length; ++t)
      out.emplace_back(s.gt_instance.begin() + t * s.pixels(), s.gt_instance.begin() + (t + 1) * s.pixels());
    return out;
  }
  std::optional<int> background_label() const override { return 0; }
};

class ConstantPredictor : public SegmentationPredictor {
 public:
  std::vector<std::vector<int>> predict(const scenegen::VideoSample& s, int, int, int length) const override {
    return std::vector<std::vector<int>>(length, std::vector<int>(s.pixels(), 3));
  }
  std::optional<int> background_label() const override { return std::nullopt; }
};

}  // namespace

TEST_CASE("config parsing is strict") {
  nlohmann::json j{{"preset", "tiny"}, {"steps", 3}, {"loss", {{"alpha", 0.5}}}};
  const auto c = train_config_from_json(j);
  CHECK(c.steps == 3);
  CHECK(c.loss.alpha == 0.5);
  CHECK(c.model.image_height == 16);
  CHECK(train_config_from_json(nlohmann::json(c)).steps == 3);
  CHECK(nlohmann::json(train_config_from_json(nlohmann::json(c))) == nlohmann::json(c));

  try {
    train_config_from_json({{"loss", {{"alpah", 0.1}}}});
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("loss.alpah") != std::string::npos);
  }
  CHECK_THROWS_AS(train_config_from_json({{"steps", "many"}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_json({{"preset", "nope"}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_json({{"frames_per_clip", 1}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_json({{"loss", {{"ablation_mode", "no_bg_slot"}}}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_json({{"guidance", "psychic"}}), ConfigError);
}

TEST_CASE("overrides address nested keys") {
  nlohmann::json j{{"preset", "tiny"}};
  apply_override(j, "loss.alpha=0.7");
  apply_override(j, "guidance=gt");
  apply_override(j, "model.background_slot=false");
  apply_override(j, "loss.ablation_mode=no_bg_slot");
  const auto c = train_config_from_json(j);
  CHECK(c.loss.alpha == 0.7);
  CHECK(c.guidance == Guidance::kGt);
  CHECK_FALSE(c.model.background_slot);
  CHECK_THROWS_AS(apply_override(j, "no-equals-sign"), ConfigError);
}

TEST_CASE("guidance settings") {
  const auto s = scenegen::generate_sequence(scenegen::scene_preset("urban-toy", 2));
  GuidanceConfig g;
  CHECK(guidance_masks(s, Guidance::kGt, g, 1) == motion::gt_motion_masks(s));
  CHECK(guidance_masks(s, Guidance::kEstimated, g, 1) == motion::extract_motion_masks(s, 0.5, 4));
  g.noise.spurious_rate = 2.0;
  g.noise.row_band = {0.0, 1.0 / 3.0};
  const auto noisy = guidance_masks(s, Guidance::kEstimated, g, 1);
  const auto filtered = guidance_masks(s, Guidance::kEstimatedFiltered, g, 1);
  for (std::size_t t = 0; t < noisy.frames.size(); ++t) {
    CHECK(filtered.frames[t].size() <= noisy.frames[t].size());
    CHECK(filtered.frames[t] == motion::filter_top_tier(noisy.frames[t], s.height));
  }

  motion::FrameMasks masks;
  motion::Mask speck(16, 16), block(16, 16);
  speck.at(0, 0) = 1;
  for (int y = 4; y < 12; ++y)
    for (int x = 4; x < 12; ++x) block.at(y, x) = 1;
  masks.push_back({speck, motion::Provenance::kEstimated});
  masks.push_back({block, motion::Provenance::kEstimated});
  const auto sup = frame_supervision(masks, 4, 4);
  REQUIRE(sup.masks.size() == 1);
  CHECK(sup.m_fg.area() == 4);
}

TEST_CASE("zero steps returns the initial model") {
  auto c = train_preset("tiny");
  c.steps = 0;
  c.output_dir = scratch("zero").string();
  const auto r = train(c);
  CHECK(r.loss_log.empty());
  const auto loaded = model::load_checkpoint<float>(r.checkpoint);
  const model::Model<float> fresh(effective_model_config(c));
  for (std::size_t i = 0; i < fresh.parameters().size(); ++i)
    CHECK(loaded.parameters()[i].value == fresh.parameters()[i].value);
  fs::remove_all(c.output_dir);
}

TEST_CASE("training is deterministic and writes its artifacts") {
  auto c = train_preset("tiny");
  c.steps = 6;
  c.log_every = 2;
  c.checkpoint_every = 3;
  c.output_dir = scratch("det_a").string();
  const auto a = train(c);
  c.output_dir = scratch("det_b").string();
  const auto b = train(c);
  REQUIRE(a.loss_log.size() == b.loss_log.size());
  for (std::size_t i = 0; i < a.loss_log.size(); ++i) CHECK(a.loss_log[i].loss.total == b.loss_log[i].loss.total);
  CHECK(nlohmann::json(a.report) == nlohmann::json(b.report));
  for (const char* f : {"loss.jsonl", "metrics.json", "step_3.ckpt", "step_6.ckpt", "final.ckpt"})
    CHECK(fs::exists(fs::path(c.output_dir) / f));

  // the saved checkpoint reproduces the in-memory evaluation
  const auto data_dir = scratch("det_data");
  const auto data = load_datasets(c.data);
  scenegen::write_dataset(data.eval, data_dir);
  CHECK(nlohmann::json(evaluate(b.checkpoint, data_dir, EvalMode::kWindowed)) == nlohmann::json(b.report));

  fs::remove_all(a.checkpoint);
  fs::remove_all(fs::path(a.checkpoint).parent_path());
  fs::remove_all(c.output_dir);
  fs::remove_all(data_dir);
}

TEST_CASE("a non-finite loss stops training with the step and batch") {
  auto c = train_preset("tiny");
  const auto data = load_datasets(c.data);
  Trainer trainer(c, prepare_sequences(data.train, c));
  trainer.model().parameter("dec_out.b").value[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    trainer.step();
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
}

TEST_CASE("loss on a fixed batch keeps decreasing") {
  const auto c = train_preset("easy");
  auto data_config = c.data;
  data_config.num_train = 8;
  data_config.num_eval = 1;
  const auto data = load_datasets(data_config);
  Trainer trainer(c, prepare_sequences(data.train, c));
  const auto batch = trainer.sample_batch(0);
  double previous = trainer.run(batch, true).total;
  int decreases = 0;
  for (int i = 0; i < 50; ++i) {
    const double now = trainer.run(batch, true).total;
    if (now < previous) ++decreases;
    previous = now;
  }
  CHECK(decreases >= 45);
}

TEST_CASE("evaluation with stub predictors") {
  const auto samples = tiny_samples(3, 50);
  const auto perfect = evaluate(OraclePredictor{}, samples, EvalMode::kWindowed, 2);
  CHECK(perfect.fg_ari == Approx(1.0));
  CHECK(perfect.all_ari == Approx(1.0));
  CHECK(perfect.jaccard_fg == Approx(1.0));
  CHECK(perfect.frames_scored == 12);

  const auto constant = evaluate(ConstantPredictor{}, samples, EvalMode::kWindowed, 3);
  double expected = 0.0;
  for (const auto& s : samples)
    for (int t = 0; t < s.num_frames; ++t) {
      std::vector<int> gt(s.gt_instance.begin() + t * s.pixels(), s.gt_instance.begin() + (t + 1) * s.pixels());
      expected += metrics::ari(gt, std::vector<int>(s.pixels(), 3));
    }
  CHECK(constant.all_ari == Approx(expected / 12));
  CHECK(constant.largest_segment_background);
  CHECK_FALSE(perfect.largest_segment_background);
}

TEST_CASE("windowed with single-frame windows equals per-frame") {
  auto c = train_preset("tiny");
  const auto samples = tiny_samples(2, 70);
  const ModelPredictor predictor(model::Model<float>(effective_model_config(c)));
  const auto a = evaluate(predictor, samples, EvalMode::kWindowed, 1);
  const auto b = evaluate(predictor, samples, EvalMode::kPerFrame, 4);
  CHECK(nlohmann::json(a) == nlohmann::json(b));
  // a trailing short window covers every frame
  CHECK(evaluate(predictor, samples, EvalMode::kWindowed, 3).frames_scored == 8);
}

TEST_CASE("a model without a background slot is scored with the largest-segment fallback") {
  auto c = train_preset("tiny");
  c.model.background_slot = false;
  c.loss.ablation_mode = objectives::AblationMode::kNoBgSlot;
  const ModelPredictor predictor(model::Model<float>(effective_model_config(c)));
  CHECK_FALSE(predictor.background_label().has_value());
  const auto r = evaluate(predictor, tiny_samples(1, 80), EvalMode::kWindowed, 2);
  CHECK(r.largest_segment_background);
}

TEST_CASE("report emission") {
  const auto samples = tiny_samples(2, 90);
  std::vector<ExperimentResult> results;
  for (const char* name : {"bmod/seed0", "no_bg_slot/seed0"}) {
    ExperimentResult r;
    r.name = name;
    r.background_slot = std::string(name).rfind("bmod", 0) == 0;
    const OraclePredictor oracle;
    const ConstantPredictor flat;
    const SegmentationPredictor& p = r.background_slot ? static_cast<const SegmentationPredictor&>(oracle) : flat;
    r.report = evaluate(p, samples, EvalMode::kWindowed, 2);
    r.qualitative = qualitative_frames(p, samples, 2, 2);
    r.loss_log = {{0, {1.0, 0.5, 0.25, 1.75}}, {1, {0.9, 0.4, 0.2, 1.5}}};
    r.config = {{"steps", 2}};
    results.push_back(r);
  }
  const auto out = scratch("report");
  emit_report(results, out);
  const auto csv = slurp(out / "metrics.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  const auto table = slurp(out / "table.csv");
  CHECK(std::count(table.begin(), table.end(), '\n') == 3);
  const auto curves = slurp(out / "loss_curves.csv");
  CHECK(std::count(curves.begin(), curves.end(), '\n') == 5);
  CHECK(fs::exists(out / "per_frame" / "bmod_seed0.csv"));

  const auto png = io::read_png8(out / "triptychs" / "bmod_seed0_seq00.png");
  CHECK(png.width == 3 * 16);
  CHECK(png.height == 16);
  CHECK_FALSE(fs::exists(out / "triptychs" / "no_bg_slot_seed0_seq00.png"));

  const auto again = scratch("report_again");
  emit_report_from(out, again);
  for (const auto& entry : fs::recursive_directory_iterator(out)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), out);
    CHECK_MESSAGE(slurp(entry.path()) == slurp(again / rel), rel.string());
  }
  fs::remove_all(out);
  fs::remove_all(again);
}

TEST_CASE("cli exit codes") {
  const std::string cli = BMOD_CLI_PATH;
  const auto dir = scratch("cli");
  auto run = [&](const std::string& args) {
    const int status = std::system((cli + " " + args + " > " + (dir / "log.txt").string() + " 2>&1").c_str());
    return WEXITSTATUS(status);
  };
  CHECK(run("frobnicate") == 2);
  CHECK(run("generate --preset tiny --num-seqs 2 --seed 3 --out " + (dir / "data").string()) == 0);
  CHECK(fs::exists(dir / "data" / "manifest.json"));
  { std::ofstream(dir / "bad.json") << R"({"preset": "tiny", "stpes": 3})"; }
  CHECK(run("train --config " + (dir / "bad.json").string()) == 2);
  CHECK(slurp(dir / "log.txt").find("stpes") != std::string::npos);
  CHECK(run("eval --ckpt " + (dir / "missing.ckpt").string() + " --data " + (dir / "data").string() + " --out " +
            (dir / "m.json").string()) == 1);
  fs::remove_all(dir);
}
