#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "drift/data.hpp"
#include "drift/model.hpp"

namespace drift {

// Per-parameter nonnegative importance scores, aligned one-to-one with the
// model's registry.
struct ImportanceEntry {
  std::string name;
  Shape shape;
  std::vector<double> scores;
};

struct ImportanceMap {
  std::vector<ImportanceEntry> entries;  // registry order
  std::string modality;
  std::int64_t n_examples = 0;
  std::string aggregation;

  const ImportanceEntry* find(const std::string& name) const;
  std::int64_t total_elements() const;
};

// Aggregation of |g*theta| across probe batches. MeanOfAbs keeps the
// absolute value inside the mean so opposite-sign batch gradients cannot
// cancel; AbsOfMean applies it to the dataset-mean gradient.
enum class BatchAggregation { MeanOfAbs, AbsOfMean };

// First-order importance |dL/dtheta_i * theta_i| averaged over probe
// batches. Parameters are left unchanged and gradients cleared.
ImportanceMap estimate_importance(
    TransformerLM& model, std::span<const ModalBatch> probe,
    BatchAggregation aggregation = BatchAggregation::MeanOfAbs);

// Exact nullification importance |L(D,theta) - L(D,theta | theta_i = 0)| for
// a small selection of (parameter name, flat index) pairs. Validation oracle
// only; at most 10^4 elements per call.
std::vector<double> exact_importance(
    TransformerLM& model, std::span<const ModalBatch> probe,
    std::span<const std::pair<std::string, std::int64_t>> selection);

enum class MaskMode { Top, Bottom, Random };
std::string to_string(MaskMode m);
MaskMode mask_mode_from_string(const std::string& s);

struct DeactivationMask {
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> selected;
  MaskMode mode = MaskMode::Top;
  double fraction = 0.0;
  std::int64_t n_selected = 0;
};

// Global selection of round(fraction * total) elements across all
// parameters; ties broken by canonical-name-then-index order.
DeactivationMask build_mask(const ImportanceMap& map, double fraction,
                            MaskMode mode, std::uint64_t seed);

// Copy of the model with masked elements set to zero.
TransformerLM apply_mask(const TransformerLM& model,
                         const DeactivationMask& mask);

// exp(mean masked cross-entropy) over response tokens.
double perplexity(const TransformerLM& model,
                  std::span<const ModalBatch> eval_batches);
double perplexity(const TransformerLM& model, const ExampleSet& eval_set,
                  Modality modality, int batch_size = 32);

// Per-layer importance totals; embedding/head/adaptor and other non-layer
// parameters are reported separately.
struct LayerImportanceProfile {
  std::vector<double> layers;
  std::vector<std::pair<std::string, double>> extras;

  double layer_mass() const;
  double total_mass() const;
};

LayerImportanceProfile aggregate_layers(const ImportanceMap& map);

struct DistributionShift {
  double l1 = 0.0;        // L1 between sum-normalized profiles
  int peak_moved = 0;     // argmax(after) - argmax(before)
  double mass_ratio = 0;  // raw after/before layer mass
};

DistributionShift distribution_shift(const LayerImportanceProfile& before,
                                     const LayerImportanceProfile& after);

struct DenseMatrix {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<double> v;  // row-major

  double& at(std::int64_t r, std::int64_t c) {
    return v[static_cast<std::size_t>(r * cols + c)];
  }
  double at(std::int64_t r, std::int64_t c) const {
    return v[static_cast<std::size_t>(r * cols + c)];
  }
};

// Density of the Top region in the border-clamped 3x3 vicinity of each cell
// (center included); summary is the mean density over Top cells.
struct RankClusterMap {
  DenseMatrix density;
  double top_fraction = 0.0;
  double summary = 0.0;
};

RankClusterMap rank_cluster_from_matrix(const DenseMatrix& scores,
                                        double top_fraction);
RankClusterMap rank_cluster_map(const ImportanceMap& map,
                                const std::string& matrix_name,
                                double top_fraction = 0.05);

// |after - before| scaled to [0,1] by its max (all-zero when max is 0).
DenseMatrix parameter_change_map(const Tensor& before, const Tensor& after);
DenseMatrix parameter_change_map(const TransformerLM& before,
                                 const TransformerLM& after,
                                 const std::string& matrix_name);

// Count of singular values above rel_tol * sigma_max.
std::int64_t numerical_rank(const DenseMatrix& m, double rel_tol = 1e-9);

// Importance-map persistence in the shared container format.
void save_importance_map(const ImportanceMap& map,
                         std::uint64_t model_config_hash,
                         const std::filesystem::path& path);
ImportanceMap load_importance_map(const std::filesystem::path& path,
                                  std::uint64_t expected_model_config_hash);

}  // namespace drift
