#include "drift/pipeline.hpp"

#include "drift/errors.hpp"
#include "drift/rng.hpp"

namespace drift {

PipelineCorpora build_corpora(const RunConfig& config) {
  PipelineCorpora corpora;

  // Fine-tune corpus: speech renditions of the first key block; its eval
  // split holds the retention keys.
  corpora.finetune = generate_corpus(config.task);

  // Pretrain corpus: same world and seed, train split widened to cover both
  // the fine-tune keys and the retention keys, fresh keys as its own eval.
  TaskSpec pretrain_spec = config.task;
  pretrain_spec.n_keys_train = config.task.n_keys_train + config.task.n_keys_eval;
  pretrain_spec.n_keys_eval =
      std::max(1, config.pretrain_eval_examples / 2);
  pretrain_spec.n_train = config.pretrain_examples;
  pretrain_spec.n_eval = config.pretrain_eval_examples;
  corpora.pretrain = generate_corpus(pretrain_spec);
  return corpora;
}

TransformerLM pretrain_model(const RunConfig& config, const Corpus& pretrain,
                             TrainResult* metrics) {
  TransformerLM model(config.model);
  TrainResult result = train(model, pretrain, config.pretrain);
  if (metrics) *metrics = std::move(result);
  return model;
}

std::vector<GridArmSpec> grid_arms(const RunConfig& config) {
  std::vector<GridArmSpec> arms;
  for (const std::string& name : config.grid.arms) {
    if (name == "no-ft") {
      TrainingPlan plan = config.grid.finetune;
      plan.strategy = Strategy::FullFT;
      plan.epochs = 0;
      plan.seed = Rng::mix(config.seed, "arm.no-ft");
      arms.push_back({"No-FT", plan});
    } else if (name == "full-ft") {
      TrainingPlan plan = config.grid.finetune;
      plan.strategy = Strategy::FullFT;
      plan.seed = Rng::mix(config.seed, "arm.full-ft");
      arms.push_back({"Full-FT", plan});
    } else if (name == "layer-lr") {
      TrainingPlan plan = config.grid.finetune;
      plan.strategy = Strategy::LayerLR;
      plan.lambda = config.grid.lambda;
      plan.probe_ratio = config.probe_ratio;
      plan.seed = Rng::mix(config.seed, "arm.layer-lr");
      arms.push_back({"Layer-LR", plan});
    } else if (name == "lora") {
      for (const int rank : config.grid.lora_ranks) {
        TrainingPlan plan = config.grid.finetune;
        plan.strategy = Strategy::Lora;
        plan.lora_rank = rank;
        plan.lora_alpha = 2.0 * rank;
        plan.seed = Rng::mix(config.seed, "arm.lora", static_cast<std::uint64_t>(rank));
        arms.push_back({"LoRA-r" + std::to_string(rank), plan});
      }
    } else {
      throw ConfigError("grid: unknown arm '" + name + "'");
    }
  }
  return arms;
}

}  // namespace drift
