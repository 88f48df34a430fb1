#include "drift/training.hpp"

#include <algorithm>
#include <cmath>

#include "drift/errors.hpp"
#include "drift/rng.hpp"

namespace drift {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::PretrainText: return "pretrain-text";
    case Strategy::FullFT: return "full-ft";
    case Strategy::LayerLR: return "layer-lr";
    case Strategy::Lora: return "lora";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "pretrain-text") return Strategy::PretrainText;
  if (s == "full-ft") return Strategy::FullFT;
  if (s == "layer-lr") return Strategy::LayerLR;
  if (s == "lora") return Strategy::Lora;
  throw ConfigError("unknown strategy: " + s);
}

std::string to_string(OptimKind k) {
  return k == OptimKind::Sgd ? "sgd" : "adam";
}

OptimKind optim_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptimKind::Sgd;
  if (s == "adam") return OptimKind::Adam;
  throw ConfigError("unknown optimizer: " + s);
}

void TrainingPlan::validate() const {
  const auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("training plan: " + what);
  };
  require(base_lr > 0.0, "base_lr must be positive");
  require(epochs >= 0, "epochs must be >= 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(lambda >= 0.0 && lambda < 1.0, "lambda must be in [0,1)");
  require(lora_rank >= 1, "lora_rank must be >= 1");
  require(lora_alpha > 0.0, "lora_alpha must be positive");
  require(max_grad_norm >= 0.0, "max_grad_norm must be >= 0");
  require(probe_ratio > 0.0 && probe_ratio <= 1.0, "probe_ratio must be in (0,1]");
}

TrainingPlan TrainingPlan::pretrain_defaults() {
  TrainingPlan plan;
  plan.strategy = Strategy::PretrainText;
  plan.base_lr = 3e-4;
  plan.epochs = 40;
  return plan;
}

TrainingPlan TrainingPlan::finetune_defaults(Strategy s) {
  TrainingPlan plan;
  plan.strategy = s;
  plan.base_lr = 1e-4;
  plan.epochs = 3;
  return plan;
}

LrSchedule layer_lr_coefficients(const LayerImportanceProfile& profile,
                                 double lambda) {
  const std::size_t n = profile.layers.size();
  if (n < 2) {
    throw ContractError("layer_lr_coefficients: need at least 2 layers");
  }
  if (lambda < 0.0 || lambda >= 1.0) {
    throw ConfigError("layer_lr_coefficients: lambda must be in [0,1)");
  }
  const double lo = *std::min_element(profile.layers.begin(), profile.layers.end());
  const double hi = *std::max_element(profile.layers.begin(), profile.layers.end());
  LrSchedule schedule;
  schedule.layer_multipliers.resize(n, 1.0);
  if (hi == lo) {
    // Flat profile: the normalization divides by zero, so fall back to
    // uniform rates and flag the condition.
    schedule.flat_profile = true;
    return schedule;
  }
  for (std::size_t i = 0; i < n; ++i) {
    schedule.layer_multipliers[i] =
        1.0 - lambda * (profile.layers[i] - lo) / (hi - lo);
  }
  return schedule;
}

namespace {

int layer_index_of(const std::string& name) {
  if (name.compare(0, 6, "layer.") != 0) return -1;
  const std::size_t dot = name.find('.', 6);
  if (dot == std::string::npos) return -1;
  return std::stoi(name.substr(6, dot - 6));
}

bool is_norm_gain(const std::string& name) {
  return name.ends_with("attn_norm") || name.ends_with("mlp_norm");
}

double group_multiplier(const std::string& name, const LrSchedule* schedule,
                        bool include_norms) {
  if (!schedule) return 1.0;
  const int layer = layer_index_of(name);
  if (layer < 0 ||
      layer >= static_cast<int>(schedule->layer_multipliers.size())) {
    return schedule->non_layer_multiplier;
  }
  if (!include_norms && is_norm_gain(name)) return 1.0;
  return schedule->layer_multipliers[static_cast<std::size_t>(layer)];
}

// Adam / SGD over a fixed parameter list, one state slot per parameter.
class Optimizer {
 public:
  Optimizer(std::vector<std::pair<std::string, Tensor>> params,
            const TrainingPlan& plan, const LrSchedule* schedule)
      : params_(std::move(params)), plan_(plan) {
    lrs_.reserve(params_.size());
    for (const auto& [name, t] : params_) {
      lrs_.push_back(plan.base_lr * group_multiplier(
                                        name, schedule,
                                        plan.layer_lr_includes_norms));
    }
    if (plan.optimizer == OptimKind::Adam) {
      m_.resize(params_.size());
      v_.resize(params_.size());
      for (std::size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(static_cast<std::size_t>(params_[i].second.size()), 0.0);
        v_[i].assign(static_cast<std::size_t>(params_[i].second.size()), 0.0);
      }
    }
  }

  void step() {
    ++t_;
    double clip = 1.0;
    if (plan_.max_grad_norm > 0.0) {
      double sq = 0.0;
      for (auto& [name, t] : params_) {
        for (const double g : t.grad()) sq += g * g;
      }
      const double norm = std::sqrt(sq);
      if (norm > plan_.max_grad_norm) clip = plan_.max_grad_norm / norm;
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& param = params_[i].second;
      if (!param.has_grad()) continue;
      std::span<double> w = param.values();
      std::span<const double> g = param.grad();
      const double lr = lrs_[i];
      if (plan_.optimizer == OptimKind::Sgd) {
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * clip * g[j];
      } else {
        const double b1 = plan_.adam_beta1, b2 = plan_.adam_beta2;
        const double corr1 = 1.0 - std::pow(b1, t_);
        const double corr2 = 1.0 - std::pow(b2, t_);
        std::vector<double>& m = m_[i];
        std::vector<double>& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
          const double gj = clip * g[j];
          m[j] = b1 * m[j] + (1.0 - b1) * gj;
          v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
          w[j] -= lr * (m[j] / corr1) /
                  (std::sqrt(v[j] / corr2) + plan_.adam_eps);
        }
      }
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  TrainingPlan plan_;
  std::vector<double> lrs_;
  std::vector<std::vector<double>> m_, v_;
  int t_ = 0;
};

}  // namespace

TrainResult train(TransformerLM& model, const Corpus& corpus,
                  const TrainingPlan& plan) {
  plan.validate();
  TrainResult result;

  const Modality train_modality = plan.strategy == Strategy::PretrainText
                                      ? Modality::Text
                                      : Modality::Speech;

  const LrSchedule* schedule = nullptr;
  if (plan.strategy == Strategy::LayerLR) {
    // Profile measured once on the incoming (pre-fine-tuning) model from the
    // text variant of a small training-data subset.
    const ExampleSet probe_set = probe_subset(corpus.train, plan.probe_ratio);
    const std::vector<ModalBatch> probe =
        make_batches(probe_set, Modality::Text, plan.batch_size);
    ImportanceMap map = estimate_importance(model, probe);
    result.schedule_profile = aggregate_layers(map);
    result.schedule =
        layer_lr_coefficients(*result.schedule_profile, plan.lambda);
    schedule = &*result.schedule;
  } else if (plan.strategy == Strategy::Lora) {
    model.attach_lora("all", plan.lora_rank, plan.lora_alpha);
  }

  Optimizer optimizer(model.trainable_parameters(), plan, schedule);
  Rng shuffle_rng(Rng::mix(plan.seed, "shuffle"));

  std::int64_t step_index = 0;
  for (int epoch = 0; epoch < plan.epochs; ++epoch) {
    const std::vector<ModalBatch> batches = make_batches(
        corpus.train, train_modality, plan.batch_size, shuffle_rng);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      model.zero_grad();
      Tensor loss = model.loss(batches[b]);
      const double loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw NumericalError("train: non-finite loss at step " +
                             std::to_string(step_index) + ", epoch " +
                             std::to_string(epoch) + ", batch " +
                             std::to_string(b));
      }
      backward(loss);
      optimizer.step();
      loss_sum += loss_value;
      ++step_index;
    }
    EpochMetrics metrics;
    metrics.epoch = epoch;
    metrics.train_loss = loss_sum / static_cast<double>(batches.size());
    metrics.text_ppl = perplexity(model, corpus.eval, Modality::Text,
                                  plan.batch_size);
    metrics.speech_ppl = perplexity(model, corpus.eval, Modality::Speech,
                                    plan.batch_size);
    result.log.push_back(metrics);
  }
  return result;
}

GridResult run_experiment_grid(const TransformerLM& pretrained,
                               const Corpus& ft_corpus,
                               std::span<const GridArmSpec> arms,
                               double probe_ratio) {
  GridResult result;

  const ExampleSet probe_set = probe_subset(ft_corpus.train, probe_ratio);
  const std::vector<ModalBatch> text_probe =
      make_batches(probe_set, Modality::Text, 32);

  {
    TransformerLM base = pretrained.clone();
    result.base_profile =
        aggregate_layers(estimate_importance(base, text_probe));
  }

  for (const GridArmSpec& arm : arms) {
    GridRow row;
    row.arm = arm.name;
    row.strategy = to_string(arm.plan.strategy);
    if (arm.plan.strategy == Strategy::Lora) row.lora_rank = arm.plan.lora_rank;
    ArmArtifacts artifacts;
    artifacts.arm = arm.name;
    try {
      TransformerLM model = pretrained.clone();
      artifacts.train_result = train(model, ft_corpus, arm.plan);
      if (model.has_lora()) model.merge_lora();

      row.t2t_acc = answer_accuracy(model, ft_corpus.eval, Modality::Text);
      row.text_ppl = perplexity(model, ft_corpus.eval, Modality::Text);
      const bool trained_speech = arm.plan.epochs > 0;
      if (trained_speech) {
        row.s2t_acc = answer_accuracy(model, ft_corpus.eval, Modality::Speech);
        row.speech_ppl = perplexity(model, ft_corpus.eval, Modality::Speech);
      }

      artifacts.text_profile =
          aggregate_layers(estimate_importance(model, text_probe));
      const DistributionShift shift =
          distribution_shift(result.base_profile, artifacts.text_profile);
      row.shift_l1 = shift.l1;
      row.shift_peak_moved = shift.peak_moved;
      artifacts.model = std::move(model);
    } catch (const std::exception& e) {
      row.status = e.what();
      result.any_failed = true;
    }
    result.rows.push_back(std::move(row));
    result.arms.push_back(std::move(artifacts));
  }
  return result;
}

}  // namespace drift
