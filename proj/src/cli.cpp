#include "drift/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"

#include "drift/checkpoint.hpp"
#include "drift/config.hpp"
#include "drift/errors.hpp"
#include "drift/importance.hpp"
#include "drift/pipeline.hpp"
#include "drift/report.hpp"
#include "drift/rng.hpp"
#include "drift/training.hpp"

namespace drift {

namespace {

namespace fs = std::filesystem;

struct RunContext {
  RunConfig config;
  std::string hash_hex;  // identity; independent of the output root
  fs::path dir;          // <out_root>/run-<hash>
  Provenance provenance;
  std::vector<std::string> artifacts;

  fs::path artifact(const std::string& name) {
    artifacts.push_back(name);
    return dir / name;
  }
};

RunContext make_context(const std::string& config_path,
                        std::optional<std::uint64_t> seed_override,
                        const std::string& out_override) {
  RunContext ctx;
  ctx.config = load_run_config(config_path);
  if (seed_override) {
    ctx.config.seed = *seed_override;
    ctx.config.apply_seed();
  }
  ctx.hash_hex = ctx.config.config_hash_hex();

  std::string out_root = ctx.config.out_dir;
  if (const char* env = std::getenv("DRIFT_OUT_ROOT");
      env && *env && out_override.empty()) {
    out_root = env;
  }
  if (!out_override.empty()) out_root = out_override;
  ctx.dir = fs::path(out_root) / ("run-" + ctx.hash_hex);
  ctx.provenance = Provenance{ctx.hash_hex, ctx.config.seed};
  return ctx;
}

void write_manifest(RunContext& ctx, const std::string& command) {
  nlohmann::json manifest;
  manifest["command"] = command;
  manifest["config_hash"] = ctx.hash_hex;
  manifest["seed"] = ctx.config.seed;
  std::sort(ctx.artifacts.begin(), ctx.artifacts.end());
  manifest["artifacts"] = ctx.artifacts;
  // The only field that varies between identical reruns.
  manifest["created_unix"] =
      std::chrono::duration_cast<std::chrono::seconds>(
          std::chrono::system_clock::now().time_since_epoch())
          .count();
  std::ofstream os(ctx.dir / ("manifest_" + command + ".json"), std::ios::trunc);
  os << manifest.dump(2) << '\n';
}

fs::path default_checkpoint(const RunContext& ctx) {
  return ctx.dir / "model_pretrained.ckpt";
}

void dump_corpora(RunContext& ctx, const PipelineCorpora& corpora) {
  const auto dump = [&ctx](const ExampleSet& set, const std::string& name) {
    std::ofstream os(ctx.artifact(name), std::ios::trunc);
    export_examples(set, os);
  };
  dump(corpora.pretrain.train, "corpus_pretrain_train.txt");
  dump(corpora.pretrain.eval, "corpus_pretrain_eval.txt");
  dump(corpora.finetune.train, "corpus_finetune_train.txt");
  dump(corpora.finetune.eval, "corpus_finetune_eval.txt");
}

TransformerLM pretrain_and_save(RunContext& ctx,
                                const PipelineCorpora& corpora) {
  TrainResult metrics;
  TransformerLM model = pretrain_model(ctx.config, corpora.pretrain, &metrics);
  fs::create_directories(ctx.dir);
  save_model(model, ctx.artifact("model_pretrained.ckpt"));
  write_metrics_csv(metrics, ctx.provenance, ctx.artifact("pretrain_metrics.csv"));
  return model;
}

int cmd_pretrain(RunContext& ctx, bool dump_corpus) {
  const PipelineCorpora corpora = build_corpora(ctx.config);
  const TransformerLM model = pretrain_and_save(ctx, corpora);
  if (dump_corpus) dump_corpora(ctx, corpora);
  write_manifest(ctx, "pretrain");
  std::cout << "pretrained checkpoint: " << default_checkpoint(ctx).string()
            << "\nparameters: " << model.parameter_count() << '\n';
  return kExitOk;
}

int cmd_importance(RunContext& ctx, const std::string& checkpoint,
                   const std::string& modality_name) {
  const Modality modality = modality_from_string(modality_name);
  const fs::path ckpt =
      checkpoint.empty() ? default_checkpoint(ctx) : fs::path(checkpoint);
  TransformerLM model = load_model(ckpt, ctx.config.model);

  // Probe: a 1/30-style subset of the model's own training corpus, in the
  // requested modality (the text variant is the paired transcription). The
  // pretraining corpus spans the whole key universe.
  const PipelineCorpora corpora = build_corpora(ctx.config);
  const ExampleSet probe =
      probe_subset(corpora.pretrain.train, ctx.config.probe_ratio);
  const std::vector<ModalBatch> batches =
      make_batches(probe, modality, ctx.config.pretrain.batch_size);
  const ImportanceMap map = estimate_importance(model, batches);

  fs::create_directories(ctx.dir);
  const std::string tag = to_string(modality);
  save_importance_map(map, model_config_hash(ctx.config.model),
                      ctx.artifact("importance_" + tag + ".imp"));
  write_profile_csv(aggregate_layers(map), ctx.provenance,
                    ctx.artifact("layer_profile_" + tag + ".csv"));
  write_manifest(ctx, "importance_" + tag);
  std::cout << "importance map over " << map.n_examples << " " << tag
            << " examples written\n";
  return kExitOk;
}

int cmd_deactivate(RunContext& ctx, const std::string& checkpoint,
                   const std::string& map_path, double fraction,
                   const std::string& mode) {
  const fs::path ckpt =
      checkpoint.empty() ? default_checkpoint(ctx) : fs::path(checkpoint);
  TransformerLM model = load_model(ckpt, ctx.config.model);
  const fs::path imp = map_path.empty()
                           ? ctx.dir / "importance_text.imp"
                           : fs::path(map_path);
  const ImportanceMap map =
      load_importance_map(imp, model_config_hash(ctx.config.model));

  const PipelineCorpora corpora = build_corpora(ctx.config);
  const DeactivationReport report =
      deactivation_report(model, map, corpora.finetune.eval, fraction,
                          Rng::mix(ctx.config.seed, "deactivate"),
                          ctx.provenance);

  fs::create_directories(ctx.dir);
  if (mode == "all") {
    write_deactivation_csv(report, ctx.artifact("deactivation.csv"));
  } else {
    mask_mode_from_string(mode);  // validate
    std::ofstream os(ctx.artifact("deactivation_" + mode + ".csv"),
                     std::ios::trunc);
    os << ctx.provenance.comment_line();
    os << "# fraction=" << format_double(fraction) << '\n';
    os << "modality,base," << mode << '\n';
    for (const auto& row : report.rows) {
      const double value = mode == "top"      ? row.top_ppl
                           : mode == "bottom" ? row.bottom_ppl
                                              : row.random_ppl;
      os << row.modality << ',' << format_double(row.base_ppl) << ','
         << format_double(value) << '\n';
    }
  }
  write_manifest(ctx, "deactivate");
  for (const auto& row : report.rows) {
    std::cout << row.modality << ": base=" << format_double(row.base_ppl)
              << " top=" << format_double(row.top_ppl)
              << " bottom=" << format_double(row.bottom_ppl)
              << " random=" << format_double(row.random_ppl)
              << (row.ordering_ok ? " [ordering ok]" : " [ordering VIOLATED]")
              << '\n';
  }
  return kExitOk;
}

int cmd_rank_cluster(RunContext& ctx, const std::string& map_path,
                     const std::string& matrix, double top_fraction) {
  const fs::path imp = map_path.empty()
                           ? ctx.dir / "importance_text.imp"
                           : fs::path(map_path);
  const ImportanceMap map =
      load_importance_map(imp, model_config_hash(ctx.config.model));
  const RankClusterMap rcm = rank_cluster_map(map, matrix, top_fraction);

  fs::create_directories(ctx.dir);
  write_pgm16(rcm.density, ctx.artifact("rank_cluster_" + matrix + ".pgm"));
  write_heatmap_svg(rcm.density, ctx.artifact("rank_cluster_" + matrix + ".svg"));
  {
    std::ofstream os(ctx.artifact("rank_cluster_" + matrix + ".csv"),
                     std::ios::trunc);
    os << ctx.provenance.comment_line();
    os << "matrix,top_fraction,summary\n";
    os << matrix << ',' << format_double(rcm.top_fraction) << ','
       << format_double(rcm.summary) << '\n';
  }
  write_manifest(ctx, "rank_cluster");
  std::cout << "rank-cluster summary for " << matrix << ": "
            << format_double(rcm.summary) << '\n';
  return kExitOk;
}

int cmd_grid(RunContext& ctx, bool dry_run, bool dump_corpus) {
  const std::vector<GridArmSpec> arms = grid_arms(ctx.config);
  if (dry_run) {
    std::cout << "run directory: " << ctx.dir.string() << '\n';
    std::cout << "pretrain: " << (fs::exists(default_checkpoint(ctx))
                                      ? "reuse existing checkpoint"
                                      : "train from scratch")
              << '\n';
    for (const GridArmSpec& arm : arms) {
      std::cout << "arm " << arm.name << ": strategy="
                << to_string(arm.plan.strategy)
                << " epochs=" << arm.plan.epochs
                << " base_lr=" << format_double(arm.plan.base_lr);
      if (arm.plan.strategy == Strategy::Lora) {
        std::cout << " rank=" << arm.plan.lora_rank
                  << " alpha=" << format_double(arm.plan.lora_alpha);
      }
      if (arm.plan.strategy == Strategy::LayerLR) {
        std::cout << " lambda=" << format_double(arm.plan.lambda);
      }
      std::cout << '\n';
    }
    return kExitOk;
  }

  const PipelineCorpora corpora = build_corpora(ctx.config);
  TransformerLM pretrained = fs::exists(default_checkpoint(ctx))
                                 ? load_model(default_checkpoint(ctx),
                                              ctx.config.model)
                                 : pretrain_and_save(ctx, corpora);
  if (dump_corpus) dump_corpora(ctx, corpora);

  const GridResult result = run_experiment_grid(
      pretrained, corpora.finetune, arms, ctx.config.probe_ratio);

  fs::create_directories(ctx.dir);
  write_grid_csv(result.rows, ctx.provenance, ctx.artifact("results.csv"));

  std::vector<NamedProfile> profiles;
  profiles.push_back({"pretrained", result.base_profile});
  for (const ArmArtifacts& arm : result.arms) {
    if (arm.model) profiles.push_back({arm.arm, arm.text_profile});
  }
  write_profiles_csv(profiles, true, ctx.provenance,
                     ctx.artifact("profiles.csv"));
  write_profiles_svg(profiles, true, ctx.provenance,
                     ctx.artifact("profiles.svg"));

  std::ofstream cluster_csv(ctx.artifact("change_cluster.csv"), std::ios::trunc);
  cluster_csv << ctx.provenance.comment_line();
  cluster_csv << "arm,matrix,top_fraction,summary\n";
  for (const ArmArtifacts& arm : result.arms) {
    if (!arm.model) continue;
    write_metrics_csv(arm.train_result, ctx.provenance,
                      ctx.artifact("metrics_" + arm.arm + ".csv"));
    bool changed_any = false;
    for (const auto& [name, t] : pretrained.parameters()) {
      if (t.shape().size() != 2 || name.compare(0, 6, "layer.") != 0) continue;
      if (name.ends_with("norm")) continue;
      const DenseMatrix change =
          parameter_change_map(pretrained, *arm.model, name);
      if (std::all_of(change.v.begin(), change.v.end(),
                      [](double v) { return v == 0.0; })) {
        continue;  // untouched matrix (e.g. No-FT arm)
      }
      changed_any = true;
      const RankClusterMap rcm = rank_cluster_from_matrix(change, 0.05);
      cluster_csv << arm.arm << ',' << name << ','
                  << format_double(rcm.top_fraction) << ','
                  << format_double(rcm.summary) << '\n';
    }
    if (changed_any) {
      for (const std::string& matrix : ctx.config.grid.report_matrices) {
        const DenseMatrix change =
            parameter_change_map(pretrained, *arm.model, matrix);
        write_pgm16(change, ctx.artifact("change_" + arm.arm + "_" + matrix +
                                         ".pgm"));
        write_heatmap_svg(change, ctx.artifact("change_" + arm.arm + "_" +
                                               matrix + ".svg"));
      }
    }
  }
  cluster_csv.close();
  write_manifest(ctx, "grid");

  for (const GridRow& row : result.rows) {
    std::cout << row.arm << ": t2t=" << format_double(row.t2t_acc)
              << " s2t=" << (row.s2t_acc ? format_double(*row.s2t_acc) : "-")
              << " text_ppl=" << format_double(row.text_ppl)
              << " shift_l1=" << format_double(row.shift_l1)
              << " status=" << row.status << '\n';
  }
  return result.any_failed ? kExitNumerical : kExitOk;
}

int cmd_report(RunContext& ctx, const std::vector<std::string>& map_paths,
               const std::string& matrix, const std::string& checkpoint,
               const std::string& compare) {
  bool did_anything = false;
  fs::create_directories(ctx.dir);

  if (!map_paths.empty()) {
    std::vector<ImportanceMap> maps;
    std::vector<NamedProfile> profiles;
    for (const std::string& p : map_paths) {
      maps.push_back(
          load_importance_map(p, model_config_hash(ctx.config.model)));
      profiles.push_back({fs::path(p).stem().string(),
                          aggregate_layers(maps.back())});
    }
    write_profiles_csv(profiles, true, ctx.provenance,
                       ctx.artifact("report_profiles.csv"));
    write_profiles_svg(profiles, true, ctx.provenance,
                       ctx.artifact("report_profiles.svg"));
    if (!matrix.empty()) {
      const RankClusterMap rcm = rank_cluster_map(maps.front(), matrix, 0.05);
      write_pgm16(rcm.density,
                  ctx.artifact("report_rank_cluster_" + matrix + ".pgm"));
      write_heatmap_svg(rcm.density,
                        ctx.artifact("report_rank_cluster_" + matrix + ".svg"));
    }
    did_anything = true;
  }

  if (!checkpoint.empty() && !compare.empty()) {
    if (matrix.empty()) {
      throw ConfigError("report: --matrix is required with --compare");
    }
    const TransformerLM before = load_model(checkpoint, ctx.config.model);
    const TransformerLM after = load_model(compare, ctx.config.model);
    const DenseMatrix change = parameter_change_map(before, after, matrix);
    write_pgm16(change, ctx.artifact("report_change_" + matrix + ".pgm"));
    write_heatmap_svg(change, ctx.artifact("report_change_" + matrix + ".svg"));
    did_anything = true;
  }

  if (!did_anything) {
    throw ConfigError("report: nothing to do (pass --map and/or --checkpoint "
                      "with --compare)");
  }
  write_manifest(ctx, "report");
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"toy encoder-adaptor LM lab: parameter importance analysis "
               "and fine-tuning mitigation experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_override;
  std::optional<std::uint64_t> seed_override;

  const auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run config JSON")->required();
    cmd->add_option("--out", out_override,
                    "output root (overrides config and DRIFT_OUT_ROOT)");
    cmd->add_option("--seed", seed_override, "override the global seed");
  };

  CLI::App* pretrain = app.add_subcommand(
      "pretrain", "train the text-only base model and write its checkpoint");
  bool dump_corpus = false;
  add_common(pretrain);
  pretrain->add_flag("--dump-corpus", dump_corpus,
                     "export the generated corpora as line-delimited records");

  CLI::App* importance = app.add_subcommand(
      "importance", "estimate per-parameter importance and the layer profile");
  std::string checkpoint, modality = "text";
  add_common(importance);
  importance->add_option("--checkpoint", checkpoint,
                         "model checkpoint (default: run dir pretrained)");
  importance->add_option("--modality", modality, "probe modality: text|speech")
      ->check(CLI::IsMember({"text", "speech"}));

  CLI::App* deactivate = app.add_subcommand(
      "deactivate", "measure PPL after top/bottom/random deactivation");
  std::string map_path, mode = "all";
  double fraction = 0.03;
  add_common(deactivate);
  deactivate->add_option("--checkpoint", checkpoint,
                         "model checkpoint (default: run dir pretrained)");
  deactivate->add_option("--map", map_path,
                         "importance map (default: run dir text map)");
  deactivate->add_option("--fraction", fraction,
                         "fraction of parameters to deactivate");
  deactivate->add_option("--mode", mode, "all|top|bottom|random")
      ->check(CLI::IsMember({"all", "top", "bottom", "random"}));

  CLI::App* rank_cluster = app.add_subcommand(
      "rank-cluster", "3x3-vicinity Top-region density map for one matrix");
  std::string matrix = "layer.0.wq";
  double top_fraction = 0.05;
  add_common(rank_cluster);
  rank_cluster->add_option("--map", map_path,
                           "importance map (default: run dir text map)");
  rank_cluster->add_option("--matrix", matrix, "2-D parameter name");
  rank_cluster->add_option("--top-fraction", top_fraction,
                           "Top region fraction");

  CLI::App* grid = app.add_subcommand(
      "grid", "run the fine-tuning strategy grid and emit tables and figures");
  bool dry_run = false;
  add_common(grid);
  grid->add_flag("--dry-run", dry_run, "print the execution plan and exit");
  grid->add_flag("--dump-corpus", dump_corpus,
                 "export the generated corpora as line-delimited records");
  double lambda_override = -1.0;
  int lora_rank_override = 0;
  grid->add_option("--lambda", lambda_override,
                   "override the layer-LR scaling factor");
  grid->add_option("--lora-rank", lora_rank_override,
                   "run a single LoRA rank instead of the configured sweep");

  CLI::App* report = app.add_subcommand(
      "report", "regenerate figures from stored maps and checkpoints");
  std::vector<std::string> report_maps;
  std::string compare;
  add_common(report);
  report->add_option("--map", report_maps, "importance map file(s)");
  report->add_option("--matrix", matrix, "matrix for heatmap reports");
  report->add_option("--checkpoint", checkpoint, "base checkpoint");
  report->add_option("--compare", compare,
                     "second checkpoint for a parameter-change heatmap");

  std::vector<const char*> argv;
  argv.push_back("drift");
  for (const std::string& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    RunContext ctx = make_context(config_path, seed_override, out_override);
    if (grid->parsed()) {
      if (lambda_override >= 0.0) ctx.config.grid.lambda = lambda_override;
      if (lora_rank_override > 0) ctx.config.grid.lora_ranks = {lora_rank_override};
    }
    if (pretrain->parsed()) return cmd_pretrain(ctx, dump_corpus);
    if (importance->parsed()) return cmd_importance(ctx, checkpoint, modality);
    if (deactivate->parsed()) {
      return cmd_deactivate(ctx, checkpoint, map_path, fraction, mode);
    }
    if (rank_cluster->parsed()) {
      return cmd_rank_cluster(ctx, map_path, matrix, top_fraction);
    }
    if (grid->parsed()) return cmd_grid(ctx, dry_run, dump_corpus);
    if (report->parsed()) {
      return cmd_report(ctx, report_maps, matrix, checkpoint, compare);
    }
    std::cerr << "no subcommand\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << '\n';
    return kExitIntegrity;
  } catch (const DegenerateInputError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitIntegrity;
  } catch (const BudgetError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitIntegrity;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace drift
