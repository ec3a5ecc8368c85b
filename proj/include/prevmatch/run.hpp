#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "prevmatch/config.hpp"
#include "prevmatch/io.hpp"
#include "prevmatch/metrics.hpp"
#include "prevmatch/trainer.hpp"

namespace prevmatch {

struct RunTrainOptions {
  std::string resume_path;     // checkpoint to continue from
  int stop_after_epoch = 0;    // write checkpoint and stop after this epoch
  int checkpoint_every = 0;    // periodic checkpoint rewrite (0 = final only)
  bool quiet = false;
};

struct RunTrainResult {
  FitResult fit;
  GeneralizationDelta generalization;
  StabilityStats stability;
  std::string summary;
  std::string csv_path;
  std::string checkpoint_path;
};

namespace detail {

inline Checkpoint checkpoint_of(const TrainConfig& cfg, const FitResult& state) {
  Checkpoint ck;
  ck.config = cfg;
  ck.model = state.model;
  ck.opt = state.opt;
  ck.registry_capacity = state.registry.capacity();
  ck.registry_best = state.registry.best_score_so_far();
  for (const auto& s : state.registry.snapshots()) ck.snapshots.push_back(s);
  ck.master_seed = cfg.seed;
  ck.next_epoch = state.next_epoch;
  ck.history = state.history;
  return ck;
}

inline std::string format_summary(const TrainConfig& cfg, const FitResult& fr,
                                  const GeneralizationDelta& gen, const StabilityStats& st) {
  const char* arm = cfg.is_baseline() ? "baseline" : "prevmatch";
  std::string s = "arm=" + std::string(arm);
  s += " seed=" + std::to_string(cfg.seed);
  s += " epochs=" + std::to_string(cfg.epochs);
  s += " test_miou=" + csv_number(gen.miou_seen);
  s += " shifted_miou=" + csv_number(gen.miou_shifted);
  s += " gen_gap=" + csv_number(gen.delta);
  if (!fr.history.empty()) {
    s += " final_val_miou=" + csv_number(fr.history.back().miou_val);
  }
  s += " tail_iou_std_mean=" + csv_number(mean_of(st.iou_std));
  double worst_drop = 0.0;
  for (double d : st.iou_max_drop) worst_drop = std::max(worst_drop, d);
  s += " tail_max_drop=" + csv_number(worst_drop);
  s += " snapshots=" + std::to_string(fr.registry.size());
  return s;
}

}  // namespace detail

/// Train end to end into out_dir: writes config.txt (effective config
/// echo), metrics.csv (flushed per epoch), checkpoint.bin and summary.txt.
/// Deterministic: identical (config, seed) produce byte-identical files.
inline RunTrainResult run_train(const TrainConfig& cfg, const std::string& out_dir,
                                const RunTrainOptions& options = {}) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const std::string csv_path = (fs::path(out_dir) / "metrics.csv").string();
  const std::string ck_path = (fs::path(out_dir) / "checkpoint.bin").string();
  write_file((fs::path(out_dir) / "config.txt").string(), config_echo(cfg));

  DatasetSplits splits = make_splits(cfg.seed, cfg.split_counts(), cfg.scene_spec());
  FitConfig fit_cfg = cfg.fit_config();

  FitOptions fit_opts;
  fit_opts.stop_after_epoch = options.stop_after_epoch;

  std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write " + csv_path);

  if (!options.resume_path.empty()) {
    Checkpoint ck = deserialize_checkpoint(read_file(options.resume_path));
    if (config_echo(ck.config) != config_echo(cfg)) {
      throw std::runtime_error("resume: checkpoint config does not match the requested config");
    }
    ResumeState rs{ck.model, ck.opt, restore_registry(ck), ck.history, ck.next_epoch};
    fit_opts.resume = std::move(rs);
    // completed epochs are replayed into the fresh CSV verbatim
  }

  csv << metrics_csv_header(cfg.classes);
  if (fit_opts.resume) {
    for (const auto& r : fit_opts.resume->history) csv << metrics_csv_row(r);
  }
  csv.flush();

  fit_opts.on_epoch = [&](const MetricsRecord& rec) {
    csv << metrics_csv_row(rec);
    csv.flush();
    if (!options.quiet) {
      std::fprintf(stderr, "epoch %d  l_s=%.4f l_u=%.4f l_prev=%.4f lambda=%.3f val_miou=%.4f\n",
                   rec.epoch, rec.l_s, rec.l_u_standard, rec.l_u_prev, rec.lambda, rec.miou_val);
    }
  };
  if (options.checkpoint_every > 0) {
    fit_opts.on_epoch_state = [&](const FitResult& state) {
      if (!state.history.empty() &&
          state.history.back().epoch % options.checkpoint_every == 0) {
        write_file(ck_path, serialize_checkpoint(detail::checkpoint_of(cfg, state)));
      }
    };
  }

  FitResult result = fit(fit_cfg, splits, fit_opts);
  csv.close();

  Checkpoint ck = detail::checkpoint_of(cfg, result);
  write_file(ck_path, serialize_checkpoint(ck));

  RunTrainResult out;
  out.fit = std::move(result);
  out.csv_path = csv_path;
  out.checkpoint_path = ck_path;
  out.generalization = generalization_delta(out.fit.model, splits.test, splits.shifted_test);
  if (out.fit.history.size() >= 2) {
    out.stability = stability_stats(out.fit.history, 0.3);
  }
  out.summary = detail::format_summary(cfg, out.fit, out.generalization, out.stability);
  write_file((fs::path(out_dir) / "summary.txt").string(), out.summary + "\n");
  if (!options.quiet) std::fprintf(stderr, "%s\n", out.summary.c_str());
  return out;
}

/// Evaluate a checkpointed model on the splits its config describes.
inline std::string run_eval(const std::string& checkpoint_path) {
  Checkpoint ck = deserialize_checkpoint(read_file(checkpoint_path));
  DatasetSplits splits = make_splits(ck.config.seed, ck.config.split_counts(),
                                     ck.config.scene_spec());
  IouResult val = iou_scores(evaluate_model(ck.model, splits.val));
  GeneralizationDelta gen = generalization_delta(ck.model, splits.test, splits.shifted_test);
  std::string s = "val_miou=" + csv_number(val.miou);
  s += " test_miou=" + csv_number(gen.miou_seen);
  s += " shifted_miou=" + csv_number(gen.miou_shifted);
  s += " gen_gap=" + csv_number(gen.delta);
  for (std::size_t c = 0; c < val.per_class.size(); ++c) {
    s += " iou_c" + std::to_string(c) + "=" + csv_number(val.per_class[c]);
  }
  return s;
}

// ---------------------------------------------------------------------------
// ablation grids

struct AblationCell {
  std::string id;
  std::vector<std::pair<std::string, std::string>> overrides;
};

/// Built-in grids mirroring the component/hyperparameter studies:
///   components     5 rows (baseline, guidance-only, fixed-k ensemble,
///                  random selection, random selection + random weights)
///   list-length    prev_capacity in {1,2,4,8,12,20}
///   upper-k        ensemble_upper in {1,2,3,4,5}
///   save-criteria  baseline, every-1-epoch, every-3-epochs, on-best
///   lambda-mode    fixed, linear_decay, linear_increase, warmup_decay
inline std::vector<AblationCell> builtin_grid(const std::string& name) {
  auto off = [](const char* k) { return std::make_pair(std::string(k), std::string("false")); };
  auto on = [](const char* k) { return std::make_pair(std::string(k), std::string("true")); };
  auto kv = [](const char* k, const std::string& v) { return std::make_pair(std::string(k), v); };
  std::vector<AblationCell> cells;
  if (name == "components") {
    cells.push_back({"baseline",
                     {off("previous_guidance"), off("random_selection"), off("random_weights")}});
    cells.push_back({"guidance_k1",
                     {on("previous_guidance"), off("random_selection"), off("random_weights"),
                      kv("ensemble_upper", "1")}});
    cells.push_back({"simple_ensemble",
                     {on("previous_guidance"), off("random_selection"), off("random_weights")}});
    cells.push_back({"random_selection",
                     {on("previous_guidance"), on("random_selection"), off("random_weights")}});
    cells.push_back({"random_weights",
                     {on("previous_guidance"), on("random_selection"), on("random_weights")}});
  } else if (name == "list-length") {
    for (int n : {1, 2, 4, 8, 12, 20}) {
      cells.push_back({"N" + std::to_string(n), {kv("prev_capacity", std::to_string(n))}});
    }
  } else if (name == "upper-k") {
    for (int k : {1, 2, 3, 4, 5}) {
      cells.push_back({"K" + std::to_string(k), {kv("ensemble_upper", std::to_string(k))}});
    }
  } else if (name == "save-criteria") {
    cells.push_back({"baseline",
                     {off("previous_guidance"), off("random_selection"), off("random_weights")}});
    cells.push_back({"every1", {kv("save_criteria", "interval"), kv("save_interval", "1")}});
    cells.push_back({"every3", {kv("save_criteria", "interval"), kv("save_interval", "3")}});
    cells.push_back({"best", {kv("save_criteria", "best")}});
  } else if (name == "lambda-mode") {
    for (const char* m : {"fixed", "linear_decay", "linear_increase", "warmup_decay"}) {
      cells.push_back({m, {kv("lambda_mode", m)}});
    }
  } else {
    throw std::invalid_argument(
        "unknown grid '" + name +
        "' (expected components|list-length|upper-k|save-criteria|lambda-mode)");
  }
  return cells;
}

/// Cross product of `key=v1,v2,...` specs, for ad-hoc grids.
inline std::vector<AblationCell> cross_product_grid(
    const std::vector<std::pair<std::string, std::vector<std::string>>>& axes) {
  std::vector<AblationCell> cells{{"", {}}};
  for (const auto& [key, values] : axes) {
    std::vector<AblationCell> next;
    for (const auto& cell : cells) {
      for (const auto& v : values) {
        AblationCell c = cell;
        c.id = c.id.empty() ? key + "=" + v : c.id + "," + key + "=" + v;
        c.overrides.emplace_back(key, v);
        next.push_back(std::move(c));
      }
    }
    cells = std::move(next);
  }
  for (auto& c : cells)
    if (c.id.empty()) c.id = "base";
  // file-system friendly ids
  for (auto& c : cells)
    for (auto& ch : c.id)
      if (ch == '=' || ch == ',') ch = '_';
  return cells;
}

struct AblationRow {
  std::string cell;
  std::string status;  // ok | failed
  double mean_test_miou = 0.0;
  std::vector<double> per_seed_test_miou;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::string table_csv;
  std::string table_path;
};

/// Run every cell against every seed (seeds are shared across cells, so
/// rows are paired). Per-cell failures are recorded and the grid
/// continues. Emits out_dir/comparison.csv with one row per cell and the
/// per-seed test mIoU values.
inline AblationResult run_ablation(const TrainConfig& base, const std::vector<AblationCell>& cells,
                                   const std::vector<std::uint64_t>& seeds,
                                   const std::string& out_dir, bool quiet = true) {
  if (cells.empty()) throw std::invalid_argument("run_ablation: no cells");
  if (seeds.empty()) throw std::invalid_argument("run_ablation: no seeds");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  AblationResult result;
  for (const auto& cell : cells) {
    AblationRow row;
    row.cell = cell.id;
    row.status = "ok";
    for (std::uint64_t seed : seeds) {
      try {
        TrainConfig cfg = base;
        for (const auto& [k, v] : cell.overrides) apply_config_entry(cfg, k, v);
        cfg.seed = seed;
        cfg.validate();
        const std::string cell_dir =
            (fs::path(out_dir) / cell.id / ("seed" + std::to_string(seed))).string();
        RunTrainOptions opts;
        opts.quiet = quiet;
        RunTrainResult r = run_train(cfg, cell_dir, opts);
        row.per_seed_test_miou.push_back(r.generalization.miou_seen);
      } catch (const std::exception& e) {
        row.status = "failed";
        row.per_seed_test_miou.push_back(quiet_nan());
        std::fprintf(stderr, "ablation cell %s seed %llu failed: %s\n", cell.id.c_str(),
                     static_cast<unsigned long long>(seed), e.what());
      }
    }
    double sum = 0.0;
    int n = 0;
    for (double v : row.per_seed_test_miou) {
      if (std::isfinite(v)) {
        sum += v;
        ++n;
      }
    }
    row.mean_test_miou = n > 0 ? sum / n : quiet_nan();
    result.rows.push_back(std::move(row));
  }

  std::string table = "cell,status,mean_test_miou";
  for (std::uint64_t s : seeds) table += ",seed" + std::to_string(s) + "_test_miou";
  table += "\n";
  for (const auto& row : result.rows) {
    table += row.cell + "," + row.status + "," + csv_number(row.mean_test_miou);
    for (double v : row.per_seed_test_miou) table += "," + csv_number(v);
    table += "\n";
  }
  result.table_csv = table;
  result.table_path = (fs::path(out_dir) / "comparison.csv").string();
  write_file(result.table_path, table);
  return result;
}

// ---------------------------------------------------------------------------
// dataset dump + curve export commands

inline void run_gen_data(const TrainConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  DatasetSplits splits = make_splits(cfg.seed, cfg.split_counts(), cfg.scene_spec());
  write_file((fs::path(out_dir) / "labeled.pvds").string(), serialize_scenes(splits.labeled));
  write_file((fs::path(out_dir) / "unlabeled.pvds").string(), serialize_scenes(splits.unlabeled));
  write_file((fs::path(out_dir) / "val.pvds").string(), serialize_scenes(splits.val));
  write_file((fs::path(out_dir) / "test.pvds").string(), serialize_scenes(splits.test));
  write_file((fs::path(out_dir) / "shifted_test.pvds").string(),
             serialize_scenes(splits.shifted_test));
  write_file((fs::path(out_dir) / "config.txt").string(), config_echo(cfg));
}

inline void run_export_curves(const std::string& csv_path, const std::vector<int>& class_ids,
                              const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  ParsedCsv csv = parse_metrics_csv(read_file(csv_path));
  for (const auto& [name, body] : export_curves_text(csv, class_ids)) {
    write_file((fs::path(out_dir) / name).string(), body);
  }
}

}  // namespace prevmatch
