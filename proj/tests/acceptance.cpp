// Acceptance suite: runs every release criterion end to end and prints one
// PASS/FAIL line per criterion. Exits nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "drift/checkpoint.hpp"
#include "drift/cli.hpp"
#include "drift/config.hpp"
#include "drift/errors.hpp"
#include "drift/importance.hpp"
#include "drift/pipeline.hpp"
#include "drift/report.hpp"
#include "drift/rng.hpp"
#include "drift/stats.hpp"
#include "drift/training.hpp"
#include "testutil.hpp"

using namespace drift;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(const std::string& name, bool ok, const std::string& detail) {
  std::cout << (ok ? "[PASS] " : "[FAIL] ") << name;
  if (!detail.empty()) std::cout << " | " << detail;
  std::cout << std::endl;
  if (!ok) ++g_failures;
}

void run_criterion(const std::string& name,
                   const std::function<std::pair<bool, std::string>()>& fn) {
  const auto start = std::chrono::steady_clock::now();
  bool ok = false;
  std::string detail;
  try {
    std::tie(ok, detail) = fn();
  } catch (const std::exception& e) {
    detail = std::string("exception: ") + e.what();
  }
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(
                        std::chrono::steady_clock::now() - start)
                        .count();
  report(name, ok, detail + " [" + std::to_string(secs) + "s]");
}

std::string fmt(double v) { return format_double(v); }

// ---------------------------------------------------------------------
// C1: autodiff vs central finite differences.

ModalBatch random_batch(const ModelConfig& cfg, Modality modality,
                        std::uint64_t seed, int b, int p, int r) {
  Rng rng(seed);
  ModalBatch batch;
  batch.modality = modality;
  batch.batch = b;
  batch.prompt_len = p;
  batch.response_len = r;
  if (modality == Modality::Text) {
    for (int i = 0; i < b * p; ++i) {
      batch.prompt_tokens.push_back(
          static_cast<std::int32_t>(rng.uniform_int(cfg.vocab_size)));
    }
  } else {
    batch.feature_dim = cfg.feature_dim;
    for (int i = 0; i < b * p * cfg.feature_dim; ++i) {
      batch.features.push_back(rng.normal());
    }
  }
  for (int i = 0; i < b * r; ++i) {
    batch.response.push_back(
        static_cast<std::int32_t>(rng.uniform_int(cfg.vocab_size)));
  }
  return batch;
}

double primitive_ops_max_err() {
  Rng rng(404);
  const auto rand_tensor = [&rng](Shape shape) {
    std::vector<double> data(static_cast<std::size_t>(numel(shape)));
    for (double& v : data) v = rng.normal();
    return Tensor::from_data(std::move(shape), std::move(data), true);
  };
  double worst = 0.0;
  const auto check_all = [&worst](std::vector<Tensor> leaves,
                                  const std::function<Tensor()>& forward) {
    Tensor loss = forward();
    backward(loss);
    const auto eval = [&forward] {
      NoGradGuard guard;
      return forward().item();
    };
    std::vector<std::pair<Tensor, std::int64_t>> elems;
    for (Tensor& t : leaves) {
      for (std::int64_t i = 0; i < t.size(); ++i) elems.emplace_back(t, i);
    }
    worst = std::max(worst, testutil::max_grad_rel_err(elems, eval));
  };

  {
    Tensor a = rand_tensor({4, 5}), b = rand_tensor({5, 3});
    check_all({a, b}, [&] { return sum(matmul(a, b)); });
  }
  {
    Tensor x = rand_tensor({3, 6}), w = rand_tensor({4, 6});
    check_all({x, w}, [&] { return sum(silu(linear(x, w))); });
  }
  {
    Tensor x = rand_tensor({2, 8}), g = rand_tensor({8});
    check_all({x, g}, [&] {
      Tensor y = rmsnorm_lastdim(x, g);
      return sum(mul(y, y));
    });
  }
  {
    Tensor x = rand_tensor({3, 7});
    Tensor w = rand_tensor({3, 7});
    w.set_requires_grad(false);
    check_all({x}, [&] { return sum(mul(softmax_lastdim(x), w)); });
  }
  {
    Tensor q = rand_tensor({2, 4, 6}), k = rand_tensor({2, 4, 6}),
           v = rand_tensor({2, 4, 6});
    Tensor w = rand_tensor({2, 4, 6});
    w.set_requires_grad(false);
    check_all({q, k, v},
              [&] { return sum(mul(causal_attention(q, k, v, 2), w)); });
  }
  {
    Tensor logits = rand_tensor({2, 3, 9});
    std::vector<std::int32_t> targets(6);
    std::vector<std::uint8_t> mask(6, 1);
    for (int i = 0; i < 6; ++i) {
      targets[static_cast<std::size_t>(i)] =
          static_cast<std::int32_t>(rng.uniform_int(9));
    }
    check_all({logits},
              [&] { return cross_entropy_loss(logits, targets, mask); });
  }
  {
    Tensor table = rand_tensor({6, 4});
    const std::vector<std::int32_t> ids{0, 3, 5, 3};
    check_all({table}, [&] {
      Tensor rows = embedding_rows(table, ids, {4});
      return sum(mul(rows, rows));
    });
  }
  return worst;
}

std::pair<bool, std::string> criterion1() {
  const double primitive_err = primitive_ops_max_err();

  double model_err = 0.0;
  Rng pick(77);
  const int head_options[] = {1, 2, 4};
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig cfg;
    cfg.n_heads = head_options[pick.uniform_int(3)];
    cfg.d_model = static_cast<int>(cfg.n_heads * (2 + pick.uniform_int(3)));
    cfg.n_layers = 1 + static_cast<int>(pick.uniform_int(3));
    cfg.d_ff = 8 + static_cast<int>(pick.uniform_int(17));
    cfg.vocab_size = 12 + static_cast<int>(pick.uniform_int(30));
    cfg.max_seq = 10;
    cfg.feature_dim = 3 + static_cast<int>(pick.uniform_int(6));
    cfg.seed = 1000 + static_cast<std::uint64_t>(trial);
    TransformerLM model(cfg);
    const Modality modality = trial % 2 ? Modality::Speech : Modality::Text;
    const ModalBatch batch = random_batch(
        cfg, modality, 2000 + static_cast<std::uint64_t>(trial), 2, 3, 2);
    model.zero_grad();
    backward(model.loss(batch));
    const auto eval = [&] {
      NoGradGuard guard;
      return model.loss(batch).item();
    };
    // a deterministic sample of elements from every parameter tensor
    std::vector<std::pair<Tensor, std::int64_t>> elems;
    Rng sampler(3000 + static_cast<std::uint64_t>(trial));
    for (const auto& [name, t] : model.parameters()) {
      if (modality == Modality::Text && name.rfind("adaptor.", 0) == 0) {
        continue;  // no text gradient flows there; FD agrees trivially
      }
      for (int s = 0; s < 3; ++s) {
        elems.emplace_back(t, sampler.uniform_int(t.size()));
      }
    }
    model_err = std::max(model_err, testutil::max_grad_rel_err(elems, eval));
  }

  const bool ok = primitive_err <= 1e-6 && model_err <= 1e-4;
  return {ok, "primitive max rel err " + fmt(primitive_err) +
                  " (<=1e-6), 20-config model max rel err " + fmt(model_err) +
                  " (<=1e-4)"};
}

// ---------------------------------------------------------------------
// C2: exact nullification vs gradient-based estimate.

std::pair<bool, std::string> criterion2() {
  ModelConfig cfg;
  cfg.vocab_size = 48;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 24;
  cfg.max_seq = 12;
  cfg.feature_dim = 8;
  cfg.seed = 11;
  TaskSpec spec;
  spec.vocab_size = 48;
  spec.n_keys_train = 24;
  spec.n_keys_eval = 8;
  spec.key_len = 2;
  spec.response_len = 1;
  spec.n_train = 96;
  spec.n_eval = 16;
  spec.feature_dim = 8;
  spec.noise_std = 0.5;
  spec.seed = 11;
  const Corpus corpus = generate_corpus(spec);
  TransformerLM model(cfg);
  TrainingPlan plan = TrainingPlan::pretrain_defaults();
  plan.epochs = 25;
  plan.base_lr = 3e-3;
  plan.batch_size = 32;
  plan.seed = 3;
  train(model, corpus, plan);

  const auto probe =
      make_batches(probe_subset(corpus.train, 0.5), Modality::Text, 32);
  const ImportanceMap map = estimate_importance(model, probe);
  const auto params = model.parameters();
  Rng rng(1234);
  std::vector<std::pair<std::string, std::int64_t>> selection;
  std::vector<double> estimated;
  for (int i = 0; i < 500; ++i) {
    const auto& [name, t] = params[static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(params.size())))];
    const std::int64_t j = rng.uniform_int(t.size());
    selection.emplace_back(name, j);
    estimated.push_back(map.find(name)->scores[static_cast<std::size_t>(j)]);
  }
  const std::vector<double> exact = exact_importance(model, probe, selection);
  const double rho = spearman(exact, estimated);
  return {rho >= 0.8, "model of " + std::to_string(model.parameter_count()) +
                          " params (<=50k), spearman(exact, estimate) over "
                          "500 elements = " +
                          fmt(rho) + " (>=0.8)"};
}

// ---------------------------------------------------------------------
// C3: deactivation ordering on the default toy model, both modalities.

std::pair<bool, std::string> criterion3() {
  RunConfig config = RunConfig::default_config();
  config.seed = 1;
  config.apply_seed();
  const PipelineCorpora corpora = build_corpora(config);
  TransformerLM model = pretrain_model(config, corpora.pretrain);

  const ExampleSet probe =
      probe_subset(corpora.pretrain.train, config.probe_ratio);
  ImportanceMap map =
      estimate_importance(model, make_batches(probe, Modality::Text, 32));

  const double fraction = 0.03;
  const std::uint64_t mask_seed = Rng::mix(config.seed, "deactivate");
  const TransformerLM top =
      apply_mask(model, build_mask(map, fraction, MaskMode::Top, mask_seed));
  const TransformerLM bottom =
      apply_mask(model, build_mask(map, fraction, MaskMode::Bottom, mask_seed));
  const TransformerLM random_model =
      apply_mask(model, build_mask(map, fraction, MaskMode::Random, mask_seed));

  bool ok = true;
  std::string detail;
  for (const Modality modality : {Modality::Text, Modality::Speech}) {
    const double base = perplexity(model, corpora.finetune.eval, modality);
    const double ppl_top = perplexity(top, corpora.finetune.eval, modality);
    const double ppl_bottom =
        perplexity(bottom, corpora.finetune.eval, modality);
    const double ppl_random =
        perplexity(random_model, corpora.finetune.eval, modality);
    const bool row_ok = ppl_top >= 10.0 * base && ppl_bottom <= 1.2 * base &&
                        base < ppl_random && ppl_random < ppl_top;
    ok = ok && row_ok;
    detail += to_string(modality) + ": base=" + fmt(base) +
              " top=" + fmt(ppl_top) + " bottom=" + fmt(ppl_bottom) +
              " random=" + fmt(ppl_random) + (row_ok ? " ok; " : " VIOLATED; ");
  }
  return {ok, detail + "(top>=10x base, bottom<=1.2x, base<random<top)"};
}

// ---------------------------------------------------------------------
// C4: layer-LR schedule closed form and invariants.

std::pair<bool, std::string> criterion4() {
  LayerImportanceProfile profile;
  profile.layers = {10.0, 30.0, 20.0};
  const LrSchedule schedule = layer_lr_coefficients(profile, 0.4);
  const double expected[3] = {1.0 - 0.4 * 0.0, 1.0 - 0.4 * 1.0,
                              1.0 - 0.4 * 0.5};
  bool ok = schedule.layer_multipliers.size() == 3;
  for (int i = 0; ok && i < 3; ++i) {
    // bit-identical to the formula, and at the round literal within 1 ulp
    ok = schedule.layer_multipliers[static_cast<std::size_t>(i)] == expected[i];
  }
  const double literals[3] = {1.0, 0.6, 0.8};
  for (int i = 0; ok && i < 3; ++i) {
    ok = std::abs(schedule.layer_multipliers[static_cast<std::size_t>(i)] -
                  literals[i]) <= 1e-15;
  }

  Rng rng(42);
  int violations = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const double lambda = 0.95 * rng.uniform();
    LayerImportanceProfile p;
    const int n = 2 + static_cast<int>(rng.uniform_int(12));
    for (int i = 0; i < n; ++i) p.layers.push_back(rng.uniform() * 100.0);
    const double lo = *std::min_element(p.layers.begin(), p.layers.end());
    const double hi = *std::max_element(p.layers.begin(), p.layers.end());
    if (hi == lo) continue;
    const LrSchedule s = layer_lr_coefficients(p, lambda);
    for (std::size_t i = 0; i < s.layer_multipliers.size(); ++i) {
      const double m = s.layer_multipliers[i];
      if (m < 1.0 - lambda - 1e-12 || m > 1.0 + 1e-12) ++violations;
      for (std::size_t j = 0; j < s.layer_multipliers.size(); ++j) {
        if (p.layers[i] > p.layers[j] && m > s.layer_multipliers[j] + 1e-12) {
          ++violations;
        }
      }
      if (p.layers[i] == hi && std::abs(m - (1.0 - lambda)) > 1e-12) {
        ++violations;
      }
      if (p.layers[i] == lo && std::abs(m - 1.0) > 1e-12) ++violations;
    }
  }
  ok = ok && violations == 0;
  return {ok, "[10,30,20] @ lambda=0.4 -> [" +
                  fmt(schedule.layer_multipliers[0]) + "," +
                  fmt(schedule.layer_multipliers[1]) + "," +
                  fmt(schedule.layer_multipliers[2]) +
                  "]; bound/monotonicity violations on 100 random profiles: " +
                  std::to_string(violations)};
}

// ---------------------------------------------------------------------
// C5: LoRA structural invariants.

std::pair<bool, std::string> criterion5() {
  ModelConfig cfg;
  cfg.vocab_size = 64;
  cfg.d_model = 32;
  cfg.n_layers = 3;
  cfg.n_heads = 4;
  cfg.d_ff = 48;
  cfg.max_seq = 12;
  cfg.feature_dim = 8;
  cfg.seed = 5;
  TaskSpec spec;
  spec.vocab_size = 64;
  spec.n_keys_train = 24;
  spec.n_keys_eval = 8;
  spec.key_len = 2;
  spec.response_len = 1;
  spec.n_train = 120;
  spec.n_eval = 16;
  spec.feature_dim = 8;
  spec.noise_std = 0.5;
  spec.seed = 5;
  const Corpus corpus = generate_corpus(spec);

  TransformerLM model(cfg);
  TrainingPlan pre = TrainingPlan::pretrain_defaults();
  pre.epochs = 8;
  pre.base_lr = 3e-3;
  pre.batch_size = 32;
  pre.seed = 6;
  train(model, corpus, pre);

  const ModalBatch batch = make_batch(
      std::span<const Example>(corpus.eval.items.data(), 8), Modality::Text,
      spec.feature_dim);

  // attach identity
  const Tensor before_logits = model.forward(batch);
  const TransformerLM base_snapshot = model.clone();
  const int rank = 4;
  model.attach_lora("all", rank, 2.0 * rank);
  const Tensor after_logits = model.forward(batch);
  bool attach_identity = true;
  for (std::int64_t i = 0; i < before_logits.size(); ++i) {
    attach_identity &= before_logits.values()[static_cast<std::size_t>(i)] ==
                       after_logits.values()[static_cast<std::size_t>(i)];
  }

  // train adapters from the same snapshot, then check the base never moved
  TrainingPlan lora_plan = TrainingPlan::finetune_defaults(Strategy::Lora);
  lora_plan.epochs = 4;
  lora_plan.base_lr = 1e-3;
  lora_plan.lora_rank = rank;
  lora_plan.lora_alpha = 2.0 * rank;
  lora_plan.batch_size = 32;
  lora_plan.seed = 7;
  TransformerLM trained = base_snapshot.clone();
  train(trained, corpus, lora_plan);
  bool frozen_ok = true;
  for (const auto& [name, t] : trained.parameters()) {
    if (name.rfind("adaptor.", 0) == 0) continue;
    const Tensor orig = base_snapshot.parameter(name);
    for (std::int64_t i = 0; i < t.size(); ++i) {
      frozen_ok &= t.values()[static_cast<std::size_t>(i)] ==
                   orig.values()[static_cast<std::size_t>(i)];
    }
  }

  // merge fidelity on the trained model
  const Tensor adapted = trained.forward(batch);
  TransformerLM merged = trained.clone();
  merged.merge_lora();
  const Tensor merged_logits = merged.forward(batch);
  double merge_diff = 0.0;
  for (std::int64_t i = 0; i < adapted.size(); ++i) {
    merge_diff = std::max(
        merge_diff,
        std::abs(adapted.values()[static_cast<std::size_t>(i)] -
                 merged_logits.values()[static_cast<std::size_t>(i)]));
  }

  // delta-W numerical rank <= r for every adapted matrix
  std::int64_t max_rank = 0;
  for (const auto& [name, t] : merged.parameters()) {
    if (t.shape().size() != 2 || name.rfind("layer.", 0) != 0 ||
        name.ends_with("norm")) {
      continue;
    }
    const Tensor orig = base_snapshot.parameter(name);
    DenseMatrix delta;
    delta.rows = t.dim(0);
    delta.cols = t.dim(1);
    for (std::int64_t i = 0; i < t.size(); ++i) {
      delta.v.push_back(t.values()[static_cast<std::size_t>(i)] -
                        orig.values()[static_cast<std::size_t>(i)]);
    }
    max_rank = std::max(max_rank, numerical_rank(delta, 1e-9));
  }

  const bool ok =
      attach_identity && frozen_ok && merge_diff <= 1e-10 && max_rank <= rank;
  return {ok, std::string("attach identity ") +
                  (attach_identity ? "exact" : "BROKEN") + ", frozen base " +
                  (frozen_ok ? "bit-equal" : "MOVED") +
                  ", merge max |dlogit| = " + fmt(merge_diff) +
                  " (<=1e-10), max deltaW rank = " + std::to_string(max_rank) +
                  " (<= " + std::to_string(rank) + ")"};
}

// ---------------------------------------------------------------------
// C6/C7/C8: the five-seed mitigation pipeline.

struct PipelineStats {
  std::map<std::string, std::vector<double>> t2t, s2t, shift, cluster;
  double no_ft_t2t_sum = 0.0;
  int seeds = 0;
};

double mean_of(const std::vector<double>& xs) {
  double acc = 0.0;
  for (const double x : xs) acc += x;
  return acc / static_cast<double>(xs.size());
}

PipelineStats run_pipeline_seeds(int n_seeds) {
  PipelineStats stats;
  for (int s = 1; s <= n_seeds; ++s) {
    RunConfig config = RunConfig::default_config();
    config.seed = static_cast<std::uint64_t>(s);
    config.grid.lora_ranks = {8};
    config.apply_seed();
    const PipelineCorpora corpora = build_corpora(config);
    const TransformerLM pretrained = pretrain_model(config, corpora.pretrain);
    const std::vector<GridArmSpec> arms = grid_arms(config);
    const GridResult grid = run_experiment_grid(pretrained, corpora.finetune,
                                                arms, config.probe_ratio);
    double no_ft_t2t = 0.0;
    for (const GridRow& row : grid.rows) {
      if (row.status != "ok") {
        throw NumericalError("seed " + std::to_string(s) + " arm " + row.arm +
                             " failed: " + row.status);
      }
      if (row.arm == "No-FT") no_ft_t2t = row.t2t_acc;
    }
    stats.no_ft_t2t_sum += no_ft_t2t;
    for (std::size_t a = 0; a < grid.rows.size(); ++a) {
      const GridRow& row = grid.rows[a];
      if (row.arm == "No-FT") continue;
      stats.t2t[row.arm].push_back(row.t2t_acc);
      stats.s2t[row.arm].push_back(row.s2t_acc.value_or(0.0));
      stats.shift[row.arm].push_back(row.shift_l1);
      // mean rank-cluster summary of the parameter-change maps over all
      // attention/MLP matrices
      const ArmArtifacts& art = grid.arms[a];
      double acc = 0.0;
      int count = 0;
      for (const auto& [name, t] : pretrained.parameters()) {
        if (t.shape().size() != 2 || name.rfind("layer.", 0) != 0 ||
            name.ends_with("norm")) {
          continue;
        }
        const DenseMatrix change =
            parameter_change_map(pretrained, *art.model, name);
        acc += rank_cluster_from_matrix(change, 0.05).summary;
        ++count;
      }
      stats.cluster[row.arm].push_back(acc / count);
    }
    ++stats.seeds;
    std::cout << "  - seed " << s << ":";
    for (const GridRow& row : grid.rows) {
      std::cout << ' ' << row.arm << "(t2t=" << fmt(row.t2t_acc) << ",s2t="
                << (row.s2t_acc ? fmt(*row.s2t_acc) : std::string("-"))
                << ",shift=" << fmt(row.shift_l1) << ')';
    }
    std::cout << std::endl;
  }
  return stats;
}

std::pair<bool, std::string> criterion6(const PipelineStats& stats) {
  const double no_ft = stats.no_ft_t2t_sum / stats.seeds;
  const double drop_full = no_ft - mean_of(stats.t2t.at("Full-FT"));
  const double drop_layer = no_ft - mean_of(stats.t2t.at("Layer-LR"));
  const double drop_lora = no_ft - mean_of(stats.t2t.at("LoRA-r8"));
  const double s2t_full = mean_of(stats.s2t.at("Full-FT"));
  const double s2t_layer = mean_of(stats.s2t.at("Layer-LR"));
  const double s2t_lora = mean_of(stats.s2t.at("LoRA-r8"));
  const double tol = 1e-12;
  const bool drops_ok =
      drop_full >= drop_layer - tol && drop_full >= drop_lora - tol;
  const bool s2t_ok = s2t_layer >= s2t_full - 0.02 - tol &&
                      s2t_lora >= s2t_full - 0.02 - tol;
  return {drops_ok && s2t_ok,
          "mean T2T drop: full-ft=" + fmt(drop_full) +
              " layer-lr=" + fmt(drop_layer) + " lora=" + fmt(drop_lora) +
              "; mean S2T: full-ft=" + fmt(s2t_full) +
              " layer-lr=" + fmt(s2t_layer) + " lora=" + fmt(s2t_lora) +
              " (mitigations >= full-ft - 2pts)"};
}

std::pair<bool, std::string> criterion7(const PipelineStats& stats) {
  const double shift_full = mean_of(stats.shift.at("Full-FT"));
  const double shift_layer = mean_of(stats.shift.at("Layer-LR"));
  const double shift_lora = mean_of(stats.shift.at("LoRA-r8"));
  const bool ok = shift_full > shift_layer && shift_full > shift_lora;
  return {ok, "mean shift l1: full-ft=" + fmt(shift_full) +
                  " > layer-lr=" + fmt(shift_layer) +
                  " and > lora=" + fmt(shift_lora)};
}

std::pair<bool, std::string> criterion8(const PipelineStats& stats) {
  const double cluster_full = mean_of(stats.cluster.at("Full-FT"));
  const double cluster_lora = mean_of(stats.cluster.at("LoRA-r8"));
  const bool ok = cluster_lora > cluster_full;
  return {ok, "mean change-map cluster summary: lora=" + fmt(cluster_lora) +
                  " > full-ft=" + fmt(cluster_full)};
}

// ---------------------------------------------------------------------
// C9: byte-identical reruns of whole commands.

const char* const kMicroConfig = R"({
  "seed": 5,
  "out_dir": "OUTDIR",
  "probe_ratio": 0.1,
  "model": {"vocab_size": 96, "d_model": 16, "n_layers": 2, "n_heads": 2,
            "d_ff": 24, "max_seq": 12, "feature_dim": 8},
  "task": {"kind": "kv-retrieval", "vocab_size": 96, "n_keys_train": 12,
           "n_keys_eval": 6, "key_len": 2, "response_len": 1, "n_train": 48,
           "n_eval": 12, "feature_dim": 8, "noise_std": 0.5},
  "pretrain": {"base_lr": 0.003, "epochs": 3, "batch_size": 16},
  "pretrain_examples": 36,
  "pretrain_eval_examples": 8,
  "grid": {"arms": ["no-ft", "full-ft", "layer-lr", "lora"], "lora_ranks": [2],
           "lambda": 0.4,
           "finetune": {"base_lr": 0.001, "epochs": 2, "batch_size": 16},
           "report_matrices": ["layer.0.wq"]}
})";

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is),
                     std::istreambuf_iterator<char>());
}

// Manifests differ only in the created_unix field; compare them without it.
std::string stripped_manifest(const std::string& text) {
  std::istringstream is(text);
  std::ostringstream os;
  std::string line;
  while (std::getline(is, line)) {
    if (line.find("created_unix") == std::string::npos) os << line << '\n';
  }
  return os.str();
}

std::pair<bool, std::string> criterion9() {
  const fs::path root = fs::temp_directory_path() / "drift_acceptance_c9";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path config_path = root / "config.json";
  {
    std::string text = kMicroConfig;
    const std::string marker = "OUTDIR";
    text.replace(text.find(marker), marker.size(), (root / "unused").string());
    std::ofstream(config_path) << text;
  }
  const auto run_all = [&config_path](const fs::path& out) {
    const std::vector<std::vector<std::string>> commands = {
        {"pretrain", "--dump-corpus"},
        {"importance", "--modality", "text"},
        {"importance", "--modality", "speech"},
        {"deactivate", "--fraction", "0.05"},
        {"rank-cluster", "--matrix", "layer.0.wq"},
        {"grid"},
    };
    for (std::vector<std::string> cmd : commands) {
      cmd.push_back("--config");
      cmd.push_back(config_path.string());
      cmd.push_back("--out");
      cmd.push_back(out.string());
      if (run_cli(cmd) != 0) {
        throw NumericalError("criterion9: command " + cmd[0] + " failed");
      }
    }
  };
  run_all(root / "a");
  run_all(root / "b");

  int compared = 0;
  std::vector<std::string> mismatches;
  for (const auto& entry : fs::recursive_directory_iterator(root / "a")) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), root / "a");
    const fs::path twin = root / "b" / rel;
    if (!fs::exists(twin)) {
      mismatches.push_back(rel.string() + " missing");
      continue;
    }
    std::string lhs = read_file(entry.path());
    std::string rhs = read_file(twin);
    if (rel.filename().string().rfind("manifest_", 0) == 0) {
      lhs = stripped_manifest(lhs);
      rhs = stripped_manifest(rhs);
    }
    if (lhs != rhs) mismatches.push_back(rel.string());
    ++compared;
  }
  std::string detail = std::to_string(compared) + " artifacts byte-compared";
  if (!mismatches.empty()) {
    detail += "; mismatched: ";
    for (const std::string& m : mismatches) detail += m + " ";
  }
  return {mismatches.empty() && compared > 10, detail};
}

// ---------------------------------------------------------------------
// C10: container and PGM round-trips.

std::pair<bool, std::string> criterion10() {
  const fs::path root = fs::temp_directory_path() / "drift_acceptance_c10";
  fs::remove_all(root);
  fs::create_directories(root);

  ModelConfig cfg = testutil::tiny_model_config(99);
  const TransformerLM model(cfg);
  save_model(model, root / "m1.ckpt");
  const TransformerLM loaded = load_model(root / "m1.ckpt", cfg);
  save_model(loaded, root / "m2.ckpt");
  const bool model_ok =
      read_file(root / "m1.ckpt") == read_file(root / "m2.ckpt");

  ImportanceMap map;
  map.modality = "speech";
  map.n_examples = 7;
  map.aggregation = "mean-of-abs";
  Rng rng(5);
  for (const auto& [name, t] : model.parameters()) {
    std::vector<double> scores(static_cast<std::size_t>(t.size()));
    for (double& v : scores) v = rng.uniform();
    map.entries.push_back({name, t.shape(), std::move(scores)});
  }
  const std::uint64_t hash = model_config_hash(cfg);
  save_importance_map(map, hash, root / "i1.imp");
  const ImportanceMap map2 = load_importance_map(root / "i1.imp", hash);
  save_importance_map(map2, hash, root / "i2.imp");
  const bool map_ok = read_file(root / "i1.imp") == read_file(root / "i2.imp");

  DenseMatrix m;
  m.rows = 17;
  m.cols = 11;
  for (int i = 0; i < 17 * 11; ++i) m.v.push_back(rng.uniform());
  write_pgm16(m, root / "h.pgm");
  const DenseMatrix back = read_pgm16(root / "h.pgm");
  double worst = 1.0;
  bool pgm_ok = back.rows == m.rows && back.cols == m.cols;
  if (pgm_ok) {
    worst = 0.0;
    for (std::size_t i = 0; i < m.v.size(); ++i) {
      worst = std::max(worst, std::abs(back.v[i] - m.v[i]));
    }
    pgm_ok = worst <= 0.5 / 65535.0 + 1e-12;
  }
  return {model_ok && map_ok && pgm_ok,
          std::string("checkpoint ") + (model_ok ? "bit-exact" : "DIFFERS") +
              ", importance map " + (map_ok ? "bit-exact" : "DIFFERS") +
              ", pgm max quantization error " + fmt(worst) + " (<= " +
              fmt(0.5 / 65535.0) + ")"};
}

}  // namespace

int main() {
  std::cout << "acceptance criteria\n-------------------" << std::endl;
  run_criterion("C1 gradient oracle vs finite differences", criterion1);
  run_criterion("C2 exact-vs-estimated importance rank correlation",
                criterion2);
  run_criterion("C3 deactivation ordering on the default model", criterion3);
  run_criterion("C4 layer-LR schedule exactness and invariants", criterion4);
  run_criterion("C5 LoRA structural invariants", criterion5);

  PipelineStats stats;
  bool pipeline_ok = false;
  std::string pipeline_err;
  const auto pipeline_start = std::chrono::steady_clock::now();
  try {
    std::cout << "running the 5-seed mitigation pipeline..." << std::endl;
    stats = run_pipeline_seeds(5);
    pipeline_ok = true;
  } catch (const std::exception& e) {
    pipeline_err = e.what();
  }
  const auto pipeline_secs =
      std::chrono::duration_cast<std::chrono::seconds>(
          std::chrono::steady_clock::now() - pipeline_start)
          .count();
  std::cout << "pipeline wall time: " << pipeline_secs << "s" << std::endl;
  if (pipeline_ok) {
    run_criterion("C6 mitigation ordering (T2T drop, S2T)",
                  [&stats] { return criterion6(stats); });
    run_criterion("C7 distribution-shift ordering",
                  [&stats] { return criterion7(stats); });
    run_criterion("C8 change-map rank clustering (LoRA > full FT)",
                  [&stats] { return criterion8(stats); });
  } else {
    report("C6 mitigation ordering (T2T drop, S2T)", false, pipeline_err);
    report("C7 distribution-shift ordering", false, pipeline_err);
    report("C8 change-map rank clustering (LoRA > full FT)", false,
           pipeline_err);
  }

  run_criterion("C9 byte-identical command reruns", criterion9);
  run_criterion("C10 container and heatmap round-trips", criterion10);

  std::cout << "-------------------\n"
            << (g_failures == 0
                    ? "all criteria passed"
                    : std::to_string(g_failures) + " criteria FAILED")
            << std::endl;
  return g_failures == 0 ? 0 : 1;
}
