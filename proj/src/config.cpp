#include "drift/config.hpp"

#include <fstream>
#include <sstream>

#include "drift/checkpoint.hpp"
#include "drift/errors.hpp"
#include "drift/rng.hpp"

#include "json.hpp"

namespace drift {

namespace {

using nlohmann::json;

json model_to_json(const ModelConfig& cfg) {
  // The seed is derived from the run's global seed, never serialized.
  return json{{"vocab_size", cfg.vocab_size}, {"d_model", cfg.d_model},
              {"n_layers", cfg.n_layers},     {"n_heads", cfg.n_heads},
              {"d_ff", cfg.d_ff},             {"max_seq", cfg.max_seq},
              {"feature_dim", cfg.feature_dim}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig cfg;
  cfg.vocab_size = j.value("vocab_size", cfg.vocab_size);
  cfg.d_model = j.value("d_model", cfg.d_model);
  cfg.n_layers = j.value("n_layers", cfg.n_layers);
  cfg.n_heads = j.value("n_heads", cfg.n_heads);
  cfg.d_ff = j.value("d_ff", cfg.d_ff);
  cfg.max_seq = j.value("max_seq", cfg.max_seq);
  cfg.feature_dim = j.value("feature_dim", cfg.feature_dim);
  cfg.seed = j.value("seed", cfg.seed);
  return cfg;
}

json task_to_json(const TaskSpec& t) {
  return json{{"kind", to_string(t.kind)},
              {"vocab_size", t.vocab_size},
              {"n_keys_train", t.n_keys_train},
              {"n_keys_eval", t.n_keys_eval},
              {"key_len", t.key_len},
              {"response_len", t.response_len},
              {"n_train", t.n_train},
              {"n_eval", t.n_eval},
              {"feature_dim", t.feature_dim},
              {"noise_std", t.noise_std}};
}

TaskSpec task_from_json(const json& j) {
  TaskSpec t;
  if (j.contains("kind")) t.kind = task_kind_from_string(j.at("kind"));
  t.vocab_size = j.value("vocab_size", t.vocab_size);
  t.n_keys_train = j.value("n_keys_train", t.n_keys_train);
  t.n_keys_eval = j.value("n_keys_eval", t.n_keys_eval);
  t.key_len = j.value("key_len", t.key_len);
  t.response_len = j.value("response_len", t.response_len);
  t.n_train = j.value("n_train", t.n_train);
  t.n_eval = j.value("n_eval", t.n_eval);
  t.feature_dim = j.value("feature_dim", t.feature_dim);
  t.noise_std = j.value("noise_std", t.noise_std);
  t.seed = j.value("seed", t.seed);
  return t;
}

json plan_to_json(const TrainingPlan& p) {
  return json{{"base_lr", p.base_lr},
              {"epochs", p.epochs},
              {"batch_size", p.batch_size},
              {"lambda", p.lambda},
              {"lora_rank", p.lora_rank},
              {"lora_alpha", p.lora_alpha},
              {"optimizer", to_string(p.optimizer)},
              {"adam_beta1", p.adam_beta1},
              {"adam_beta2", p.adam_beta2},
              {"adam_eps", p.adam_eps},
              {"max_grad_norm", p.max_grad_norm},
              {"layer_lr_includes_norms", p.layer_lr_includes_norms},
              {"probe_ratio", p.probe_ratio}};
}

TrainingPlan plan_from_json(const json& j, const TrainingPlan& defaults) {
  TrainingPlan p = defaults;
  if (j.contains("strategy")) p.strategy = strategy_from_string(j.at("strategy"));
  p.base_lr = j.value("base_lr", p.base_lr);
  p.epochs = j.value("epochs", p.epochs);
  p.batch_size = j.value("batch_size", p.batch_size);
  p.lambda = j.value("lambda", p.lambda);
  p.lora_rank = j.value("lora_rank", p.lora_rank);
  // alpha tracks 2*rank unless the config pins it explicitly
  p.lora_alpha = j.contains("lora_alpha")
                     ? j.at("lora_alpha").get<double>()
                     : 2.0 * p.lora_rank;
  p.seed = j.value("seed", p.seed);
  if (j.contains("optimizer")) {
    p.optimizer = optim_kind_from_string(j.at("optimizer"));
  }
  p.adam_beta1 = j.value("adam_beta1", p.adam_beta1);
  p.adam_beta2 = j.value("adam_beta2", p.adam_beta2);
  p.adam_eps = j.value("adam_eps", p.adam_eps);
  p.max_grad_norm = j.value("max_grad_norm", p.max_grad_norm);
  p.layer_lr_includes_norms =
      j.value("layer_lr_includes_norms", p.layer_lr_includes_norms);
  p.probe_ratio = j.value("probe_ratio", p.probe_ratio);
  return p;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  task.validate();
  pretrain.validate();
  grid.finetune.validate();
  if (task.feature_dim != model.feature_dim) {
    throw ConfigError("config: task feature_dim " +
                      std::to_string(task.feature_dim) +
                      " must equal model feature_dim " +
                      std::to_string(model.feature_dim));
  }
  if (task.vocab_size != model.vocab_size) {
    throw ConfigError("config: task vocab_size must equal model vocab_size");
  }
  if (!(probe_ratio > 0.0) || probe_ratio > 1.0) {
    throw ConfigError("config: probe_ratio must be in (0,1]");
  }
  if (pretrain_examples < 1) {
    throw ConfigError("config: pretrain_examples must be >= 1");
  }
  if (pretrain.strategy != Strategy::PretrainText) {
    throw ConfigError("config: pretrain plan strategy must be pretrain-text");
  }
  for (const std::string& arm : grid.arms) {
    if (arm != "no-ft" && arm != "full-ft" && arm != "layer-lr" &&
        arm != "lora") {
      throw ConfigError("config: unknown grid arm '" + arm + "'");
    }
  }
  if (grid.lora_ranks.empty()) {
    throw ConfigError("config: grid needs at least one LoRA rank");
  }
}

void RunConfig::apply_seed() {
  model.seed = Rng::mix(seed, "model");
  task.seed = Rng::mix(seed, "task");
  pretrain.seed = Rng::mix(seed, "pretrain");
  grid.finetune.seed = Rng::mix(seed, "finetune");
}

std::string RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["probe_ratio"] = probe_ratio;
  j["model"] = model_to_json(model);
  j["task"] = task_to_json(task);
  j["pretrain_examples"] = pretrain_examples;
  j["pretrain_eval_examples"] = pretrain_eval_examples;
  j["pretrain"] = plan_to_json(pretrain);
  j["grid"] = json{{"arms", grid.arms},
                   {"lora_ranks", grid.lora_ranks},
                   {"lambda", grid.lambda},
                   {"finetune", plan_to_json(grid.finetune)},
                   {"report_matrices", grid.report_matrices}};
  return j.dump(2) + "\n";
}

std::uint64_t RunConfig::config_hash() const { return fnv1a64(to_json()); }

std::string RunConfig::config_hash_hex() const {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(config_hash()));
  return buf;
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  try {
    RunConfig c = default_config();
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.probe_ratio = j.value("probe_ratio", c.probe_ratio);
    if (j.contains("model")) c.model = model_from_json(j.at("model"));
    if (j.contains("task")) c.task = task_from_json(j.at("task"));
    c.pretrain_examples = j.value("pretrain_examples", c.pretrain_examples);
    c.pretrain_eval_examples =
        j.value("pretrain_eval_examples", c.pretrain_eval_examples);
    if (j.contains("pretrain")) {
      c.pretrain = plan_from_json(j.at("pretrain"), c.pretrain);
    }
    if (j.contains("grid")) {
      const json& g = j.at("grid");
      if (g.contains("arms")) c.grid.arms = g.at("arms").get<std::vector<std::string>>();
      if (g.contains("lora_ranks")) {
        c.grid.lora_ranks = g.at("lora_ranks").get<std::vector<int>>();
      }
      c.grid.lambda = g.value("lambda", c.grid.lambda);
      if (g.contains("finetune")) {
        c.grid.finetune = plan_from_json(g.at("finetune"), c.grid.finetune);
      }
      if (g.contains("report_matrices")) {
        c.grid.report_matrices =
            g.at("report_matrices").get<std::vector<std::string>>();
      }
    }
    c.apply_seed();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

RunConfig RunConfig::default_config() {
  RunConfig c;
  // Calibrated recipe for the default toy scale: pretraining memorizes the
  // key universe, fine-tuning learns the speech channel on all arms while
  // keeping the arm orderings stable across seeds.
  c.pretrain = TrainingPlan::pretrain_defaults();
  c.pretrain.base_lr = 1e-3;
  c.pretrain.epochs = 4;
  c.grid.finetune = TrainingPlan::finetune_defaults(Strategy::FullFT);
  c.grid.finetune.base_lr = 2e-4;
  c.grid.finetune.epochs = 24;
  c.apply_seed();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path.string());
  std::ostringstream buffer;
  buffer << is.rdbuf();
  return RunConfig::from_json(buffer.str());
}

void save_run_config(const RunConfig& config, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IntegrityError("config: cannot open " + path.string());
  os << config.to_json();
}

std::string model_config_to_json(const ModelConfig& cfg) {
  // Checkpoints record the full config, init seed included, so a loaded
  // model behaves exactly like the in-memory one (e.g. adapter init).
  json j = model_to_json(cfg);
  j["seed"] = cfg.seed;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  try {
    return model_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("model config: invalid JSON: ") + e.what());
  }
}

std::uint64_t model_config_hash(const ModelConfig& cfg) {
  // Structural hash: two configs match when their parameter registries do,
  // regardless of the init seed.
  return fnv1a64(model_to_json(cfg).dump());
}

}  // namespace drift
