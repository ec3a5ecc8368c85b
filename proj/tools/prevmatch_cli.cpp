// Experiment front door: gen-data, train, eval, ablate, export-curves.
// Every config key is mirrored as a --key flag; flags override the
// config file, which overrides the built-in defaults. The effective
// config is always echoed so no value stays implicit.

#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "prevmatch/prevmatch.hpp"

namespace {

struct ConfigCliArgs {
  std::string config_path;
  std::map<std::string, std::string> overrides;
};

void add_config_options(CLI::App* cmd, ConfigCliArgs& args) {
  cmd->add_option("--config", args.config_path, "config file (key = value lines, # comments)");
  for (const auto& key : prevmatch::config_keys()) {
    cmd->add_option_function<std::string>(
        "--" + key,
        [&args, key](const std::string& v) { args.overrides[key] = v; },
        "override config key " + key);
  }
}

prevmatch::TrainConfig build_config(const ConfigCliArgs& args) {
  prevmatch::TrainConfig cfg;
  if (!args.config_path.empty()) {
    cfg = prevmatch::parse_config(prevmatch::read_file(args.config_path));
  }
  for (const auto& [k, v] : args.overrides) {
    prevmatch::apply_config_entry(cfg, k, v);
  }
  cfg.validate();
  return cfg;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> seeds;
  std::string cur;
  for (char c : s + ",") {
    if (c == ',') {
      if (!cur.empty()) seeds.push_back(std::stoull(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (seeds.empty()) throw std::invalid_argument("--seeds: expected a comma-separated list");
  return seeds;
}

std::vector<int> parse_class_list(const std::string& s) {
  std::vector<int> ids;
  std::string cur;
  for (char c : s + ",") {
    if (c == ',') {
      if (!cur.empty()) ids.push_back(std::stoi(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (ids.empty()) throw std::invalid_argument("--classes: expected a comma-separated list");
  return ids;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PrevMatch synthetic segmentation experiments"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate dataset splits and dump them to disk");
  ConfigCliArgs gen_args;
  std::string gen_out = "data";
  add_config_options(gen, gen_args);
  gen->add_option("--out", gen_out, "output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "train a model and write metrics/checkpoint/summary");
  ConfigCliArgs train_args;
  std::string train_out = "run";
  std::string resume_path;
  int stop_after = 0;
  int ckpt_every = 0;
  bool quiet = false;
  add_config_options(train, train_args);
  train->add_option("--out", train_out, "output directory")->required();
  train->add_option("--resume", resume_path, "checkpoint to continue from");
  train->add_option("--stop-after-epoch", stop_after,
                    "stop (with checkpoint) after this epoch, for later --resume");
  train->add_option("--checkpoint-every", ckpt_every, "rewrite the checkpoint every k epochs");
  train->add_flag("--quiet", quiet, "suppress per-epoch progress lines");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpointed model on its splits");
  std::string eval_ckpt;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();

  // ablate
  auto* ablate = app.add_subcommand("ablate", "run an ablation grid over shared seeds");
  ConfigCliArgs ablate_args;
  std::string ablate_out = "ablation";
  std::string grid_name;
  std::vector<std::string> vary_specs;
  std::string seeds_spec = "1,2,3";
  add_config_options(ablate, ablate_args);
  ablate->add_option("--out", ablate_out, "output directory")->required();
  ablate->add_option("--grid", grid_name,
                     "built-in grid: components|list-length|upper-k|save-criteria|lambda-mode");
  ablate->add_option("--vary", vary_specs,
                     "key=v1,v2,... axis; repeat for a cross product")
      ->take_all();
  ablate->add_option("--seeds", seeds_spec, "comma-separated seeds shared by every cell");

  // export-curves
  auto* curves = app.add_subcommand("export-curves", "per-class curve files from a metrics CSV");
  std::string curves_csv;
  std::string curves_classes;
  std::string curves_out = "curves";
  curves->add_option("--csv", curves_csv, "metrics.csv produced by train")->required();
  curves->add_option("--classes", curves_classes, "comma-separated class ids")->required();
  curves->add_option("--out", curves_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      auto cfg = build_config(gen_args);
      std::cout << prevmatch::config_echo(cfg);
      prevmatch::run_gen_data(cfg, gen_out);
      std::cout << "wrote splits to " << gen_out << "\n";
    } else if (train->parsed()) {
      auto cfg = build_config(train_args);
      std::cout << prevmatch::config_echo(cfg);
      prevmatch::RunTrainOptions opts;
      opts.resume_path = resume_path;
      opts.stop_after_epoch = stop_after;
      opts.checkpoint_every = ckpt_every;
      opts.quiet = quiet;
      auto result = prevmatch::run_train(cfg, train_out, opts);
      std::cout << result.summary << "\n";
    } else if (eval->parsed()) {
      std::cout << prevmatch::run_eval(eval_ckpt) << "\n";
    } else if (ablate->parsed()) {
      auto cfg = build_config(ablate_args);
      std::cout << prevmatch::config_echo(cfg);
      std::vector<prevmatch::AblationCell> cells;
      if (!grid_name.empty()) {
        cells = prevmatch::builtin_grid(grid_name);
      } else if (!vary_specs.empty()) {
        std::vector<std::pair<std::string, std::vector<std::string>>> axes;
        for (const auto& spec : vary_specs) {
          const auto eq = spec.find('=');
          if (eq == std::string::npos) {
            throw std::invalid_argument("--vary expects key=v1,v2,..., got '" + spec + "'");
          }
          std::vector<std::string> values;
          std::string cur;
          for (char c : spec.substr(eq + 1) + ",") {
            if (c == ',') {
              if (!cur.empty()) values.push_back(cur);
              cur.clear();
            } else {
              cur += c;
            }
          }
          axes.emplace_back(spec.substr(0, eq), values);
        }
        cells = prevmatch::cross_product_grid(axes);
      } else {
        cells.push_back({"base", {}});  // empty grid runs the base config once
      }
      auto result = prevmatch::run_ablation(cfg, cells, parse_seed_list(seeds_spec), ablate_out);
      std::cout << result.table_csv;
      std::cout << "comparison table: " << result.table_path << "\n";
    } else if (curves->parsed()) {
      prevmatch::run_export_curves(curves_csv, parse_class_list(curves_classes), curves_out);
      std::cout << "wrote curves to " << curves_out << "\n";
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
