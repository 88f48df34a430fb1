#pragma once

#include <vector>

#include "drift/config.hpp"
#include "drift/data.hpp"
#include "drift/model.hpp"
#include "drift/training.hpp"

namespace drift {

// The two corpora of the curriculum. Pretraining covers every key the
// fine-tune corpus knows about (its train and eval splits), plus a held-out
// split of fresh keys; fine-tuning sees the speech variant of a key subset,
// so the fine-tune eval split measures retention of pretrained knowledge.
struct PipelineCorpora {
  Corpus pretrain;
  Corpus finetune;
};

PipelineCorpora build_corpora(const RunConfig& config);

TransformerLM pretrain_model(const RunConfig& config, const Corpus& pretrain,
                             TrainResult* metrics = nullptr);

// Grid arms named in the config ("no-ft", "full-ft", "layer-lr", "lora"
// which expands to one arm per configured rank).
std::vector<GridArmSpec> grid_arms(const RunConfig& config);

}  // namespace drift
