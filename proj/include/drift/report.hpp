#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "drift/importance.hpp"
#include "drift/training.hpp"

namespace drift {

// Shared number formatting so CSV and plot payloads of one report carry
// identical digits.
std::string format_double(double v);

struct Provenance {
  std::string config_hash;
  std::uint64_t seed = 0;

  std::string comment_line() const;  // "# config_hash=... seed=..."
};

// Table-1-style deactivation experiment: one row per modality, PPL columns
// for the base model and each 3%-removal mode, with the expected ordering
// asserted per row.
struct DeactivationReport {
  Provenance provenance;
  double fraction = 0.0;
  struct Row {
    std::string modality;
    double base_ppl = 0.0;
    double top_ppl = 0.0;
    double bottom_ppl = 0.0;
    double random_ppl = 0.0;
    bool ordering_ok = false;  // base <= random, top largest, bottom near base
  };
  std::vector<Row> rows;
};

DeactivationReport deactivation_report(const TransformerLM& model,
                                       const ImportanceMap& map,
                                       const ExampleSet& eval_set,
                                       double fraction, std::uint64_t seed,
                                       const Provenance& provenance);
void write_deactivation_csv(const DeactivationReport& report,
                            const std::filesystem::path& path);

struct NamedProfile {
  std::string name;
  LayerImportanceProfile profile;
};

// Layer-profile chart (Fig.2/4 style): SVG line chart plus a CSV mirror of
// exactly the plotted numbers. With normalize, each series is scaled to sum
// one; legends carry the L1 shift of each series against the first.
void write_profiles_csv(std::span<const NamedProfile> profiles, bool normalize,
                        const Provenance& provenance,
                        const std::filesystem::path& path);
void write_profiles_svg(std::span<const NamedProfile> profiles, bool normalize,
                        const Provenance& provenance,
                        const std::filesystem::path& path);

// Heatmap export for matrices with values in [0,1]: 16-bit binary PGM
// (row i of the matrix is raster row i) and an SVG cell grid.
void write_pgm16(const DenseMatrix& m, const std::filesystem::path& path);
DenseMatrix read_pgm16(const std::filesystem::path& path);
void write_heatmap_svg(const DenseMatrix& m, const std::filesystem::path& path);

// Results-table report (Table-2/3 style) with a fixed column order.
void write_grid_csv(std::span<const GridRow> rows, const Provenance& provenance,
                    const std::filesystem::path& path);

// Metrics log: one row per (epoch, split, metric).
void write_metrics_csv(const TrainResult& result, const Provenance& provenance,
                       const std::filesystem::path& path);

// Layer profile as (layer, total, normalized) rows.
void write_profile_csv(const LayerImportanceProfile& profile,
                       const Provenance& provenance,
                       const std::filesystem::path& path);

}  // namespace drift
