#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "drift/rng.hpp"

namespace drift {

class TransformerLM;

enum class Modality { Text, Speech };
std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

enum class TaskKind { KvRetrieval, Copy, ToyQa };
std::string to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);

// Reserved token ids; content tokens start at kFirstContentToken.
inline constexpr std::int32_t kEosToken = 0;
inline constexpr std::int32_t kSepToken = 1;
inline constexpr std::int32_t kFirstContentToken = 2;

// Describes one deterministic dual-modality corpus. The world (keys, values,
// feature codebook) derives from the seed alone, so two specs sharing a seed
// agree on key/value assignments even when their split sizes differ.
struct TaskSpec {
  TaskKind kind = TaskKind::KvRetrieval;
  int vocab_size = 256;
  int n_keys_train = 72;  // distinct prompts covered by the train split
  int n_keys_eval = 24;   // distinct prompts covered by the eval split
  int key_len = 2;        // prompt content tokens before the SEP marker
  int response_len = 1;   // response content tokens before the EOS marker
  int n_train = 1080;     // train examples; renditions cycle over train keys
  int n_eval = 72;
  int feature_dim = 32;
  double noise_std = 0.5;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError naming the violated constraint
};

// One paired example: the text prompt and the speech-like feature prompt
// encode the same content and share the response.
struct Example {
  std::int64_t id = 0;
  std::vector<std::int32_t> prompt;    // [P]
  std::vector<double> features;        // [P * feature_dim], row-major
  std::vector<std::int32_t> response;  // [R], last token is kEosToken
};

struct ExampleSet {
  std::vector<Example> items;
  int prompt_len = 0;
  int response_len = 0;
  int feature_dim = 0;

  bool empty() const { return items.empty(); }
  std::size_t size() const { return items.size(); }
};

struct Corpus {
  TaskSpec spec;
  ExampleSet train;
  ExampleSet eval;
};

// A uniform-length batch in one modality.
struct ModalBatch {
  Modality modality = Modality::Text;
  std::int64_t batch = 0;
  std::int64_t prompt_len = 0;
  std::int64_t response_len = 0;
  std::int64_t feature_dim = 0;             // 0 for text batches
  std::vector<std::int32_t> prompt_tokens;  // [B*P] (text)
  std::vector<double> features;             // [B*P*f] (speech)
  std::vector<std::int32_t> response;       // [B*R]

  std::int64_t seq_len() const { return prompt_len + response_len; }
};

// Next-token targets and the response-only loss mask, both flat [B*S].
struct TargetsAndMask {
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> mask;
};
TargetsAndMask targets_and_mask(const ModalBatch& batch);

Corpus generate_corpus(const TaskSpec& spec);

ModalBatch make_batch(std::span<const Example> items, Modality modality,
                      int feature_dim);
std::vector<ModalBatch> make_batches(const ExampleSet& set, Modality modality,
                                     int batch_size);
// Shuffled variant; batch composition is deterministic in the rng state.
std::vector<ModalBatch> make_batches(const ExampleSet& set, Modality modality,
                                     int batch_size, Rng& rng);

// Evenly-strided deterministic subset used for importance probes.
ExampleSet probe_subset(const ExampleSet& set, double ratio);

// Exact-match accuracy of greedy generation against the gold response.
double answer_accuracy(const TransformerLM& model, const ExampleSet& eval_set,
                       Modality modality);
// Scoring seam for oracles and stubs.
using Generator =
    std::function<std::vector<std::int32_t>(const Example&, Modality)>;
double answer_accuracy(const ExampleSet& eval_set, Modality modality,
                       const Generator& generate);

// Line-delimited export/import for inspection: one line per (example,
// modality); features rendered in fixed decimal.
void export_examples(const ExampleSet& set, std::ostream& os);
ExampleSet import_examples(std::istream& is);

}  // namespace drift
