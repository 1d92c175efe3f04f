#include "bmod/error.hpp"
#include "bmod/rng.hpp"
#include "bmod/runner/evaluate.hpp"
#include "bmod/runner/experiments.hpp"
#include "bmod/runner/train.hpp"
#include "bmod/scenegen.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

using namespace bmod;

namespace {

int cmd_generate(const std::string& preset, int num_seqs, std::uint64_t seed, const std::string& out) {
  if (num_seqs < 1) throw ConfigError("--num-seqs must be >= 1");
  std::vector<scenegen::VideoSample> samples;
  for (int i = 0; i < num_seqs; ++i)
    samples.push_back(scenegen::generate_sequence(scenegen::scene_preset(preset, derive_seed(seed, i))));
  scenegen::write_dataset(samples, out);
  std::printf("wrote %d sequences to %s\n", num_seqs, out.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides) {
  const auto config = runner::load_train_config(config_path, overrides);
  const auto result = runner::train(config);
  std::printf("%s\n", nlohmann::json(result.report).dump(2).c_str());
  if (!result.checkpoint.empty()) std::printf("checkpoint: %s\n", result.checkpoint.c_str());
  std::printf("wall clock: %.1f s\n", result.wall_seconds);
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& mode, const std::string& out) {
  const auto report = runner::evaluate(ckpt, data, runner::eval_mode_from_string(mode));
  std::ofstream os(out);
  if (!os) throw IoError("cannot write " + out);
  os << nlohmann::json(report).dump(2) << '\n';
  std::printf("fg-ARI %.4f  all-ARI %.4f  J_fg %.4f  J_bg %.4f  (%d frames)\n", report.fg_ari, report.all_ari,
              report.jaccard_fg, report.jaccard_bg, report.frames_scored);
  return 0;
}

int cmd_ablate(const std::string& suite, const std::string& config_path, const std::string& out,
               const std::vector<std::string>& overrides, int seeds) {
  auto config = runner::load_train_config(config_path, overrides);
  if (config.output_dir.empty()) config.output_dir = (std::filesystem::path(out) / "runs").string();
  const auto results = runner::run_suite(suite, config, seeds);
  runner::emit_report(results, out);
  std::printf("variant,runs,fg_ari,all_ari,j_fg,j_bg\n");
  for (const auto& row : runner::summarize(results))
    std::printf("%s,%d,%.4f,%.4f,%.4f,%.4f\n", row.variant.c_str(), row.runs, row.fg_ari, row.all_ari,
                row.jaccard_fg, row.jaccard_bg);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Background-aware motion-guided object discovery"};
  app.require_subcommand(1);

  std::string preset = "easy", out, config_path, ckpt, data, mode = "windowed", suite, in;
  int num_seqs = 16, seeds = 3;
  std::uint64_t seed = 0;
  std::vector<std::string> overrides;

  auto* gen = app.add_subcommand("generate", "Write a synthetic video dataset");
  gen->add_option("--preset", preset, "tiny, easy or urban-toy");
  gen->add_option("--num-seqs", num_seqs);
  gen->add_option("--seed", seed);
  gen->add_option("--out", out)->required();

  auto* tr = app.add_subcommand("train", "Train and evaluate one model");
  tr->add_option("--config", config_path)->required();
  tr->add_option("--override", overrides, "key.path=value");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset directory");
  ev->add_option("--ckpt", ckpt)->required();
  ev->add_option("--data", data)->required();
  ev->add_option("--mode", mode)->check(CLI::IsMember({"windowed", "per_frame"}));
  ev->add_option("--out", out)->required();

  auto* ab = app.add_subcommand("ablate", "Run an experiment suite and write a report");
  ab->add_option("--suite", suite)->required()->check(CLI::IsMember({"table3", "table5", "table6"}));
  ab->add_option("--config", config_path)->required();
  ab->add_option("--out", out)->required();
  ab->add_option("--override", overrides, "key.path=value");
  ab->add_option("--seeds", seeds, "number of training seeds");

  auto* rep = app.add_subcommand("report", "Re-emit a report from saved results");
  rep->add_option("--in", in)->required();
  rep->add_option("--out", out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_generate(preset, num_seqs, seed, out);
    if (*tr) return cmd_train(config_path, overrides);
    if (*ev) return cmd_eval(ckpt, data, mode, out);
    if (*ab) return cmd_ablate(suite, config_path, out, overrides, seeds);
    if (*rep) {
      runner::emit_report_from(in, out);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
