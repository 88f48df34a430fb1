#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "drift/data.hpp"
#include "drift/model.hpp"
#include "drift/training.hpp"

namespace drift {

struct GridConfig {
  std::vector<std::string> arms = {"no-ft", "full-ft", "layer-lr", "lora"};
  std::vector<int> lora_ranks = {8, 16, 24};  // first rank is the main arm
  double lambda = 0.4;
  TrainingPlan finetune;  // shared fine-tune hyperparameters
  std::vector<std::string> report_matrices = {"layer.3.wq", "layer.3.w_down"};
};

// Everything one run needs; fully serializable, and the hash of the
// serialized form names the run directory. Seeds for the model, task and
// plans derive from the single global seed.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "runs";
  double probe_ratio = 1.0 / 30.0;
  ModelConfig model;
  TaskSpec task;  // fine-tune corpus spec; pretrain corpus derives from it
  // One rendition per key lands in a 1/30 probe: 2880 = 30 * (72+24) keys.
  int pretrain_examples = 2880;
  int pretrain_eval_examples = 16;
  TrainingPlan pretrain;
  GridConfig grid;

  void validate() const;
  // Re-derives model/task/plan seeds from the global seed.
  void apply_seed();

  std::string to_json() const;           // canonical (sorted keys)
  std::uint64_t config_hash() const;     // fnv1a64 of to_json()
  std::string config_hash_hex() const;

  static RunConfig from_json(const std::string& text);
  static RunConfig default_config();
};

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& config, const std::filesystem::path& path);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);
std::uint64_t model_config_hash(const ModelConfig& cfg);

}  // namespace drift
