#pragma once

// The subcommands behind the mros command-line tool. Each takes a resolved
// RunConfig and an output directory and leaves its artifacts there, every
// one stamped with the config fingerprint.

#include <array>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mros/config.hpp"
#include "mros/data.hpp"
#include "mros/error.hpp"
#include "mros/evaluator.hpp"
#include "mros/training.hpp"

namespace mros {

namespace fs = std::filesystem;

// Refuses to write into a non-empty directory unless forced.
inline void prepare_out_dir(const fs::path& out, bool force) {
  if (out.empty()) raise<ConfigError>("an output directory is required (--out)");
  if (fs::exists(out)) {
    if (!fs::is_directory(out)) raise<ConfigError>("output path ", out.string(), " is not a directory");
    if (!fs::is_empty(out) && !force) {
      raise<ConfigError>("output directory ", out.string(), " is not empty (use --force to overwrite)");
    }
  }
  fs::create_directories(out);
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) raise<DataError>("cannot write ", path.string());
  os << text;
}

inline void write_config(const fs::path& out, const RunConfig& cfg) {
  write_text(out / "config.cfg", "# config_fingerprint=" + cfg.fingerprint() + "\n" + cfg.to_text());
}

// The `# config_fingerprint=` line of an embedding sidecar, if any.
inline std::string sidecar_fingerprint(const fs::path& embeddings) {
  std::ifstream in(sidecar_path(embeddings));
  std::string line;
  const std::string key = "# config_fingerprint=";
  while (std::getline(in, line)) {
    if (line.rfind(key, 0) == 0) return line.substr(key.size());
    if (!line.empty() && line[0] != '#') break;
  }
  return {};
}

// ---------------------------------------------------------------------------

inline Dataset cmd_synth(const RunConfig& cfg, const fs::path& out, bool force, std::ostream& log = std::cout) {
  auto spec = cfg.synthetic_spec();
  validate(spec, cfg.K);
  prepare_out_dir(out, force);
  Dataset ds = generate_synthetic(spec, cfg.K);
  write_dataset(ds, out, "# config_fingerprint=" + cfg.fingerprint() + "\n");
  write_config(out, cfg);
  log << "wrote " << ds.images.size() << " images (" << ds.split.train.size() << " train, " << ds.split.query.size()
      << " query, " << ds.split.gallery.size() << " gallery) to " << out.string() << "\n";
  return ds;
}

inline FitResult cmd_train(const RunConfig& cfg, const fs::path& out, bool force,
                           const std::optional<fs::path>& resume = {}, std::ostream& log = std::cout) {
  cfg.validate();
  std::optional<Checkpoint> ck;
  if (resume) {
    ck = load_checkpoint(*resume);
    fs::create_directories(out);
  } else {
    prepare_out_dir(out, force);
  }
  auto data = std::make_shared<const Dataset>(load_dataset(cfg));
  {
    std::mt19937_64 rng(cfg.seed);
    auto model = make_model(cfg, data->split.classes.size(), rng);
    const auto& h = model->config();
    log << "setting " << setting_name(cfg.setting) << ": " << h.num_stripe_heads() << " classifiers, descriptor "
        << h.descriptor_dim() << ", " << model->parameter_count() << " parameters\n";
  }
  write_config(out, cfg);
  FitOptions opts;
  opts.out_dir = out;
  opts.resume = std::move(ck);
  opts.log = &log;
  auto result = fit(cfg, data, opts);
  if (result.final_eval) {
    write_text(out / "report.csv", report_csv(*result.final_eval, cfg.fingerprint()));
    write_text(out / "report.md",
               report_markdown(*result.final_eval, std::string("Setting ") + setting_name(cfg.setting),
                               cfg.fingerprint()));
  }
  return result;
}

inline const std::vector<ImageRecord>& split_records(const Dataset& ds, const std::string& split) {
  if (split == "query") return ds.split.query;
  if (split == "gallery") return ds.split.gallery;
  if (split == "train") return ds.split.train;
  raise<ConfigError>("unknown split '", split, "' (expected query, gallery or train)");
}

// Embeds one split with a checkpointed model. `dataset` overrides the
// dataset recorded in the checkpoint when non-empty.
inline fs::path cmd_embed(const fs::path& checkpoint, const std::string& split, const fs::path& out,
                          const std::string& dataset = {}, std::ostream& log = std::cout) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  RunConfig cfg = ck.config;
  if (!dataset.empty()) cfg.dataset = dataset;
  const Dataset ds = load_dataset(cfg);
  const auto& records = split_records(ds, split);
  if (records.empty()) raise<DataError>("split '", split, "' is empty");
  auto model = model_from_checkpoint(ck);
  auto set = Trainer::embed_records(*model, records, &ds, cfg);
  fs::create_directories(out);
  const auto path = out / (split + ".mreb");
  write_embeddings(path, set, ck.fingerprint);
  log << "wrote " << set.size() << " x " << set.dim << " embeddings to " << path.string() << "\n";
  return path;
}

inline EvalReport cmd_eval(const fs::path& query, const fs::path& gallery, const EvalOptions& opts,
                           const fs::path& out, std::ostream& log = std::cout) {
  const auto q = read_embeddings(query);
  const auto g = read_embeddings(gallery);
  const auto report = evaluate(q, g, opts);
  const std::string fingerprint = sidecar_fingerprint(query);
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(out / "report.csv", report_csv(report, fingerprint));
    write_text(out / "report.md", report_markdown(report, "MROS", fingerprint));
  }
  log << report_markdown(report, "MROS", fingerprint);
  if (report.skipped > 0) log << report.skipped << " queries had no valid match and were skipped\n";
  return report;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
  AblationSetting setting = AblationSetting::kI;
  std::optional<EvalReport> report;
  std::size_t parameters = 0;
  std::string error;  // empty on success
};

struct ReferenceScore {
  double mAP, rank1;
};

// Published Market-1501 scores per setting, shown beside the measured ones.
inline ReferenceScore reference_score(AblationSetting s) {
  switch (s) {
    case AblationSetting::kI: return {81.8, 93.2};
    case AblationSetting::kII: return {82.8, 93.5};
    case AblationSetting::kIII: return {84.0, 94.2};
    case AblationSetting::kIV: return {84.2, 94.4};
  }
  return {0.0, 0.0};
}

inline constexpr std::array<AblationSetting, 4> kAllSettings = {AblationSetting::kI, AblationSetting::kII,
                                                                AblationSetting::kIII, AblationSetting::kIV};

inline std::string ablation_markdown(const std::vector<AblationRow>& rows, const std::string& fingerprint) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << "| Setting | mAP | Rank-1 | Reference mAP | Reference Rank-1 | Parameters |\n";
  os << "|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    const auto ref = reference_score(r.setting);
    os << "| " << setting_name(r.setting) << " | ";
    if (r.report) os << 100.0 * r.report->mAP << " | " << 100.0 * r.report->rank1;
    else os << "failed | failed";
    os << " | " << ref.mAP << " | " << ref.rank1 << " | " << r.parameters << " |\n";
  }
  for (const auto& r : rows) {
    if (!r.error.empty()) os << "\nSetting " << setting_name(r.setting) << " failed: " << r.error << "\n";
  }
  os << "\nReference columns are the published Market-1501 numbers and are not recomputed here.\n";
  os << "\nconfig fingerprint: `" << fingerprint << "`\n";
  return os.str();
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows, const std::string& fingerprint) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "# config_fingerprint=" << fingerprint << "\n";
  os << "setting,mAP,rank1,rank5,rank10,reference_mAP,reference_rank1,parameters,status\n";
  for (const auto& r : rows) {
    const auto ref = reference_score(r.setting);
    os << setting_name(r.setting) << ',';
    if (r.report) os << r.report->mAP << ',' << r.report->rank1 << ',' << r.report->rank5 << ',' << r.report->rank10;
    else os << ",,,";
    os << std::setprecision(6) << ',' << ref.mAP << ',' << ref.rank1 << std::setprecision(17) << ',' << r.parameters << ',' << (r.error.empty() ? "ok" : "failed")
       << '\n';
  }
  return os.str();
}

// Trains every setting with the same seed and budget, one after another.
// A failing setting is recorded and the remaining ones still run.
inline std::vector<AblationRow> cmd_ablate(const RunConfig& base, const fs::path& out, bool force,
                                           std::ostream& log = std::cout) {
  base.validate();
  prepare_out_dir(out, force);
  write_config(out, base);
  auto data = std::make_shared<const Dataset>(load_dataset(base));
  std::vector<AblationRow> rows;
  for (auto setting : kAllSettings) {
    RunConfig cfg = base;
    cfg.setting = setting;
    AblationRow row;
    row.setting = setting;
    log << "== setting " << setting_name(setting) << "\n";
    try {
      std::mt19937_64 rng(cfg.seed);
      row.parameters = make_model(cfg, data->split.classes.size(), rng)->parameter_count();
      const auto dir = out / (std::string("setting_") + setting_name(setting));
      fs::create_directories(dir);
      FitOptions opts;
      opts.out_dir = dir;
      opts.log = &log;
      row.report = fit(cfg, data, opts).final_eval;
      if (!row.report) row.error = "no evaluation was produced";
    } catch (const Error& e) {
      row.error = e.what();
      log << "setting " << setting_name(setting) << " failed: " << e.what() << "\n";
    }
    rows.push_back(std::move(row));
  }
  const auto fp = base.fingerprint();
  write_text(out / "ablation.md", ablation_markdown(rows, fp));
  write_text(out / "ablation.csv", ablation_csv(rows, fp));
  log << ablation_markdown(rows, fp);
  return rows;
}

}  // namespace mros
