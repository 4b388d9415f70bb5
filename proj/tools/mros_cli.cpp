// mros: synthesize data, train, embed, evaluate and run the I-IV ablation.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mros/commands.hpp"

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kData = 3, kDivergence = 4 };

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-resolution overlapping stripes person re-identification"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  bool force = false;
  app.add_option("--config", config_path, "Config file of key = value lines")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Random seed (overrides the config)");
  app.add_option("--out", out_dir, "Output directory");
  app.add_flag("--force", force, "Allow writing into a non-empty output directory");
  app.add_option("--set", overrides, "Override one config key, as key=value (repeatable)");

  auto* synth = app.add_subcommand("synth", "Write the synthetic dataset to --out");

  auto* train = app.add_subcommand("train", "Train a model, writing checkpoints and metrics to --out");
  std::string resume;
  train->add_option("--resume", resume, "Continue from a checkpoint")->check(CLI::ExistingFile);

  auto* embed = app.add_subcommand("embed", "Write embeddings of dataset splits from a checkpoint");
  std::string checkpoint, dataset;
  std::vector<std::string> splits{"query", "gallery"};
  embed->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  embed->add_option("--split", splits, "Splits to embed (query, gallery, train)")->capture_default_str();
  embed->add_option("--dataset", dataset, "Dataset to embed instead of the checkpoint's own");

  auto* eval = app.add_subcommand("eval", "Score query embeddings against gallery embeddings");
  std::string query_file, gallery_file, metric = "l2";
  bool no_filter = false;
  eval->add_option("--query", query_file, "Query embedding file")->required()->check(CLI::ExistingFile);
  eval->add_option("--gallery", gallery_file, "Gallery embedding file")->required()->check(CLI::ExistingFile);
  eval->add_option("--metric", metric, "Distance")->check(CLI::IsMember({"l2", "cosine"}))->capture_default_str();
  eval->add_flag("--no-protocol-filter", no_filter, "Keep same-identity same-camera and junk gallery entries");

  auto* ablate = app.add_subcommand("ablate", "Train settings I-IV with one budget and tabulate them");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    mros::RunConfig cfg;
    if (!config_path.empty()) cfg = mros::RunConfig::load(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) mros::raise<mros::ConfigError>("--set expects key=value, got '", kv, "'");
      cfg.set(mros::detail::trim(kv.substr(0, eq)), mros::detail::trim(kv.substr(eq + 1)));
    }
    if (seed) cfg.seed = *seed;
    cfg.validate();

    if (*synth) {
      mros::cmd_synth(cfg, out_dir, force);
    } else if (*train) {
      std::optional<std::filesystem::path> from;
      if (!resume.empty()) from = resume;
      mros::cmd_train(cfg, out_dir, force, from);
    } else if (*embed) {
      if (out_dir.empty()) mros::raise<mros::ConfigError>("embed needs --out");
      for (const auto& s : splits) mros::cmd_embed(checkpoint, s, out_dir, dataset);
    } else if (*eval) {
      mros::EvalOptions opts;
      opts.metric = mros::parse_metric(metric);
      opts.protocol = !no_filter;
      mros::cmd_eval(query_file, gallery_file, opts, out_dir);
    } else if (*ablate) {
      mros::cmd_ablate(cfg, out_dir, force);
    }
  } catch (const mros::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDivergence;
  } catch (const mros::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const mros::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
