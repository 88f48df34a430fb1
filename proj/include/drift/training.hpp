#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "drift/data.hpp"
#include "drift/importance.hpp"
#include "drift/model.hpp"

namespace drift {

enum class Strategy { PretrainText, FullFT, LayerLR, Lora };
std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

enum class OptimKind { Sgd, Adam };
std::string to_string(OptimKind k);
OptimKind optim_kind_from_string(const std::string& s);

struct TrainingPlan {
  Strategy strategy = Strategy::FullFT;
  double base_lr = 1e-4;
  int epochs = 3;
  int batch_size = 32;
  double lambda = 0.4;     // layer-LR scaling factor
  int lora_rank = 8;
  double lora_alpha = 16;  // 2 * rank unless explicitly overridden
  std::uint64_t seed = 0;
  OptimKind optimizer = OptimKind::Adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double max_grad_norm = 0.0;  // 0 disables clipping
  // Whether the per-layer multiplier also covers norm gains registered
  // under "layer.{i}.*" or only the attention/MLP matrices.
  bool layer_lr_includes_norms = true;
  double probe_ratio = 1.0 / 30.0;  // importance probe for layer-LR

  void validate() const;

  static TrainingPlan pretrain_defaults();
  static TrainingPlan finetune_defaults(Strategy s);
};

// Per-layer learning-rate multipliers; non-layer parameter groups
// (embedding, head, adaptor, adapters) always use 1.0.
struct LrSchedule {
  std::vector<double> layer_multipliers;
  double non_layer_multiplier = 1.0;
  bool flat_profile = false;  // warning status: max == min guard fired
};

// lr(i) = 1 - lambda * (I_layer(i) - min) / (max - min).
LrSchedule layer_lr_coefficients(const LayerImportanceProfile& profile,
                                 double lambda);

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double text_ppl = 0.0;
  double speech_ppl = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> log;
  std::optional<LrSchedule> schedule;                  // layer-LR runs
  std::optional<LayerImportanceProfile> schedule_profile;
};

// Trains in place. Pretraining consumes the text variant of corpus.train;
// fine-tuning strategies consume the speech variant. Layer-LR measures its
// text-importance profile on the incoming model before any update. LoRA
// attaches adapters (left attached on return). Throws NumericalError with
// step/batch diagnostics when the loss goes non-finite.
TrainResult train(TransformerLM& model, const Corpus& corpus,
                  const TrainingPlan& plan);

struct GridArmSpec {
  std::string name;  // e.g. "No-FT", "Full-FT", "Layer-LR", "LoRA-r8"
  TrainingPlan plan;
};

struct GridRow {
  std::string arm;
  std::string strategy;
  int lora_rank = -1;  // -1 when not applicable
  double t2t_acc = 0.0;
  std::optional<double> s2t_acc;  // absent for arms with no speech training
  double text_ppl = 0.0;
  std::optional<double> speech_ppl;
  double shift_l1 = 0.0;
  int shift_peak_moved = 0;
  std::string status = "ok";
};

struct ArmArtifacts {
  std::string arm;
  LayerImportanceProfile text_profile;
  TrainResult train_result;
  std::optional<TransformerLM> model;  // trained model, LoRA merged
};

struct GridResult {
  std::vector<GridRow> rows;
  LayerImportanceProfile base_profile;
  std::vector<ArmArtifacts> arms;
  bool any_failed = false;
};

// Runs every arm from a copy of the same pretrained model, evaluates on the
// corpus eval split in both modalities, and measures the text-importance
// profile shift against the pretrained baseline. Arm failures are recorded
// in the row status and do not stop the remaining arms.
GridResult run_experiment_grid(const TransformerLM& pretrained,
                               const Corpus& ft_corpus,
                               std::span<const GridArmSpec> arms,
                               double probe_ratio);

}  // namespace drift
