#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "drift/data.hpp"
#include "drift/tensor.hpp"

namespace drift {

struct ModelConfig {
  int vocab_size = 256;
  int d_model = 128;
  int n_layers = 8;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq = 64;
  int feature_dim = 32;  // continuous-modality input width
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError naming the violated constraint
};

// Low-rank adapter on one weight matrix. The effective update is
// (alpha / rank) * b * a, shaped like the target; b starts at zero so
// attachment does not change the forward pass.
struct LoraAdapter {
  std::string target;
  Tensor a;  // [rank, in_dim]
  Tensor b;  // [out_dim, rank]
  int rank = 0;
  double alpha = 0.0;
};

enum class MergeStatus { Merged, NoAdapters };

// Decoder-only transformer LM with an encoder-adaptor front-end for the
// continuous modality. Text tokens enter via the embedding table; feature
// prompts enter via a trainable two-layer adaptor projecting into the same
// embedding space, so pure-text forward passes never touch the adaptor.
class TransformerLM {
 public:
  explicit TransformerLM(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }

  // Registry of base parameters in canonical order: "embedding",
  // "pos_embedding", "layer.{i}.{matrix}", "final_norm", "lm_head",
  // "adaptor.{j}".
  std::vector<std::pair<std::string, Tensor>> parameters() const;
  Tensor parameter(const std::string& name) const;
  std::int64_t parameter_count() const;

  // Base trainables plus attached adapters ("lora.{target}.{a|b}").
  std::vector<std::pair<std::string, Tensor>> trainable_parameters() const;
  std::int64_t trainable_parameter_count() const;

  void zero_grad();

  // Logits [B, S, vocab]; S = prompt_len + response_len, causal over the
  // full sequence. Throws LengthError when S exceeds max_seq.
  Tensor forward(const ModalBatch& batch) const;

  // forward + masked cross-entropy over response positions.
  Tensor loss(const ModalBatch& batch) const;

  // Attaches adapters to every matrix matched by the pattern and freezes the
  // base weights (adaptor excluded). Empty pattern or "all" targets every
  // attention and MLP matrix. Patterns: matrix kind ("wq"), exact name
  // ("layer.3.wq"), layer glob ("layer.3.*"), or a |-separated list.
  void attach_lora(const std::string& pattern, int rank, double alpha);
  bool has_lora() const { return !adapters_.empty(); }
  const std::vector<LoraAdapter>& adapters() const { return adapters_; }

  // Folds adapters into the base weights and removes them; base weights
  // become trainable again.
  MergeStatus merge_lora();

  // Deterministic greedy decoding; stops per sequence at kEosToken.
  std::vector<std::vector<std::int32_t>> generate_greedy(
      const ModalBatch& prompt, int max_new) const;

  TransformerLM clone() const;

 private:
  struct Block {
    Tensor wq, wk, wv, wo;           // [d_model, d_model]
    Tensor w_gate, w_up;             // [d_ff, d_model]
    Tensor w_down;                   // [d_model, d_ff]
    Tensor attn_norm, mlp_norm;      // [d_model]
  };

  struct Uninitialized {};
  TransformerLM(const ModelConfig& cfg, Uninitialized);

  Tensor proj(const Tensor& x, const std::string& name, const Tensor& w) const;
  Tensor hidden_states(const ModalBatch& batch) const;  // [B*S, d_model]
  const LoraAdapter* find_adapter(const std::string& name) const;

  ModelConfig cfg_;
  Tensor embedding_;      // [vocab, d_model]
  Tensor pos_embedding_;  // [max_seq, d_model]
  std::vector<Block> blocks_;
  Tensor final_norm_;     // [d_model]
  Tensor lm_head_;        // [d_model, vocab]
  Tensor adaptor0_;       // [d_model, feature_dim]
  Tensor adaptor1_;       // [d_model, d_model]
  std::vector<LoraAdapter> adapters_;
};

}  // namespace drift
