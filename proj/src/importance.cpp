#include "drift/importance.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "drift/checkpoint.hpp"
#include "drift/errors.hpp"
#include "drift/rng.hpp"

#include "json.hpp"

namespace drift {

namespace {

double probe_loss(const TransformerLM& model, std::span<const ModalBatch> probe) {
  NoGradGuard no_grad;
  double total = 0.0;
  for (const ModalBatch& batch : probe) {
    total += model.loss(batch).item();
  }
  return total / static_cast<double>(probe.size());
}

void check_probe(std::span<const ModalBatch> probe) {
  if (probe.empty()) {
    throw DegenerateInputError("importance: empty probe set");
  }
  for (const ModalBatch& b : probe) {
    if (b.modality != probe.front().modality) {
      throw ContractError("importance: probe batches mix modalities");
    }
  }
}

int layer_index_of(const std::string& name) {
  if (name.compare(0, 6, "layer.") != 0) return -1;
  const std::size_t dot = name.find('.', 6);
  if (dot == std::string::npos) return -1;
  return std::stoi(name.substr(6, dot - 6));
}

}  // namespace

const ImportanceEntry* ImportanceMap::find(const std::string& name) const {
  for (const ImportanceEntry& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

std::int64_t ImportanceMap::total_elements() const {
  std::int64_t n = 0;
  for (const ImportanceEntry& e : entries) {
    n += static_cast<std::int64_t>(e.scores.size());
  }
  return n;
}

ImportanceMap estimate_importance(TransformerLM& model,
                                  std::span<const ModalBatch> probe,
                                  BatchAggregation aggregation) {
  check_probe(probe);
  if (model.has_lora()) {
    throw ContractError(
        "estimate_importance: merge adapters first; scores align with the "
        "base registry");
  }
  auto params = model.parameters();

  ImportanceMap map;
  map.modality = to_string(probe.front().modality);
  map.aggregation = aggregation == BatchAggregation::MeanOfAbs
                        ? "mean-of-abs"
                        : "abs-of-mean";
  for (const auto& [name, t] : params) {
    map.entries.push_back(
        {name, t.shape(), std::vector<double>(static_cast<std::size_t>(t.size()), 0.0)});
  }

  for (const ModalBatch& batch : probe) {
    map.n_examples += batch.batch;
    model.zero_grad();
    Tensor loss = model.loss(batch);
    if (!std::isfinite(loss.item())) {
      throw NumericalError("estimate_importance: non-finite probe loss");
    }
    backward(loss);
    for (std::size_t p = 0; p < params.size(); ++p) {
      const Tensor& t = params[p].second;
      std::vector<double>& acc = map.entries[p].scores;
      const std::span<const double> g = t.grad();
      if (g.empty()) continue;  // no gradient flowed (e.g. unused adaptor)
      const std::span<const double> w = t.values();
      if (aggregation == BatchAggregation::MeanOfAbs) {
        for (std::size_t i = 0; i < acc.size(); ++i) {
          acc[i] += std::abs(g[i] * w[i]);
        }
      } else {
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
      }
    }
  }
  model.zero_grad();

  const double inv = 1.0 / static_cast<double>(probe.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<double>& acc = map.entries[p].scores;
    const std::span<const double> w = params[p].second.values();
    for (std::size_t i = 0; i < acc.size(); ++i) {
      acc[i] = aggregation == BatchAggregation::MeanOfAbs
                   ? acc[i] * inv
                   : std::abs(acc[i] * inv * w[i]);
    }
  }
  return map;
}

std::vector<double> exact_importance(
    TransformerLM& model, std::span<const ModalBatch> probe,
    std::span<const std::pair<std::string, std::int64_t>> selection) {
  check_probe(probe);
  if (selection.size() > 10000) {
    throw BudgetError("exact_importance: selection of " +
                      std::to_string(selection.size()) +
                      " elements exceeds the 10^4 budget");
  }
  const double base = probe_loss(model, probe);
  std::vector<double> scores;
  scores.reserve(selection.size());
  for (const auto& [name, index] : selection) {
    Tensor t = model.parameter(name);
    if (index < 0 || index >= t.size()) {
      throw ContractError("exact_importance: index " + std::to_string(index) +
                          " outside parameter '" + name + "'");
    }
    double& slot = t.values()[static_cast<std::size_t>(index)];
    const double kept = slot;
    slot = 0.0;
    scores.push_back(std::abs(probe_loss(model, probe) - base));
    slot = kept;
  }
  return scores;
}

std::string to_string(MaskMode m) {
  switch (m) {
    case MaskMode::Top: return "top";
    case MaskMode::Bottom: return "bottom";
    case MaskMode::Random: return "random";
  }
  return "?";
}

MaskMode mask_mode_from_string(const std::string& s) {
  if (s == "top") return MaskMode::Top;
  if (s == "bottom") return MaskMode::Bottom;
  if (s == "random") return MaskMode::Random;
  throw ConfigError("unknown mask mode: " + s);
}

DeactivationMask build_mask(const ImportanceMap& map, double fraction,
                            MaskMode mode, std::uint64_t seed) {
  if (!(fraction > 0.0) || !(fraction < 1.0)) {
    throw ConfigError("build_mask: fraction must be in (0,1)");
  }
  const std::int64_t total = map.total_elements();
  const std::int64_t k = std::llround(fraction * static_cast<double>(total));

  // Flatten scores in registry order; the global index doubles as the
  // canonical-name-then-index tie-break.
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(total));
  for (const ImportanceEntry& e : map.entries) {
    flat.insert(flat.end(), e.scores.begin(), e.scores.end());
  }

  std::vector<std::int64_t> chosen;
  if (mode == MaskMode::Random) {
    std::vector<std::int64_t> indices(static_cast<std::size_t>(total));
    std::iota(indices.begin(), indices.end(), std::int64_t{0});
    Rng rng(seed);
    for (std::int64_t i = 0; i < k; ++i) {
      const std::int64_t j = i + rng.uniform_int(total - i);
      std::swap(indices[static_cast<std::size_t>(i)],
                indices[static_cast<std::size_t>(j)]);
    }
    chosen.assign(indices.begin(), indices.begin() + k);
  } else {
    std::vector<std::int64_t> indices(static_cast<std::size_t>(total));
    std::iota(indices.begin(), indices.end(), std::int64_t{0});
    if (mode == MaskMode::Top) {
      std::sort(indices.begin(), indices.end(),
                [&flat](std::int64_t a, std::int64_t b) {
                  const double sa = flat[static_cast<std::size_t>(a)];
                  const double sb = flat[static_cast<std::size_t>(b)];
                  return sa != sb ? sa > sb : a < b;
                });
    } else {
      std::sort(indices.begin(), indices.end(),
                [&flat](std::int64_t a, std::int64_t b) {
                  const double sa = flat[static_cast<std::size_t>(a)];
                  const double sb = flat[static_cast<std::size_t>(b)];
                  return sa != sb ? sa < sb : a < b;
                });
    }
    chosen.assign(indices.begin(), indices.begin() + k);
  }
  std::sort(chosen.begin(), chosen.end());

  DeactivationMask mask;
  mask.mode = mode;
  mask.fraction = fraction;
  mask.n_selected = k;
  std::size_t cursor = 0;
  std::int64_t offset = 0;
  for (const ImportanceEntry& e : map.entries) {
    std::vector<std::uint8_t> bits(e.scores.size(), 0);
    const std::int64_t end = offset + static_cast<std::int64_t>(e.scores.size());
    while (cursor < chosen.size() && chosen[cursor] < end) {
      bits[static_cast<std::size_t>(chosen[cursor] - offset)] = 1;
      ++cursor;
    }
    offset = end;
    mask.selected.emplace_back(e.name, std::move(bits));
  }
  return mask;
}

TransformerLM apply_mask(const TransformerLM& model,
                         const DeactivationMask& mask) {
  TransformerLM out = model.clone();
  for (const auto& [name, bits] : mask.selected) {
    Tensor t = out.parameter(name);
    if (static_cast<std::int64_t>(bits.size()) != t.size()) {
      throw ContractError("apply_mask: mask for '" + name +
                          "' does not match the parameter shape");
    }
    std::span<double> w = t.values();
    for (std::size_t i = 0; i < bits.size(); ++i) {
      if (bits[i]) w[i] = 0.0;
    }
  }
  return out;
}

double perplexity(const TransformerLM& model,
                  std::span<const ModalBatch> eval_batches) {
  if (eval_batches.empty()) {
    throw DegenerateInputError("perplexity: empty eval set");
  }
  NoGradGuard no_grad;
  double total_nll = 0.0;
  std::int64_t total_tokens = 0;
  for (const ModalBatch& batch : eval_batches) {
    const TargetsAndMask tm = targets_and_mask(batch);
    std::int64_t n_masked = 0;
    for (const std::uint8_t m : tm.mask) n_masked += m;
    const double mean_nll =
        cross_entropy_loss(model.forward(batch), tm.targets, tm.mask).item();
    total_nll += mean_nll * static_cast<double>(n_masked);
    total_tokens += n_masked;
  }
  return std::exp(total_nll / static_cast<double>(total_tokens));
}

double perplexity(const TransformerLM& model, const ExampleSet& eval_set,
                  Modality modality, int batch_size) {
  if (eval_set.empty()) throw DegenerateInputError("perplexity: empty eval set");
  const std::vector<ModalBatch> batches =
      make_batches(eval_set, modality, batch_size);
  return perplexity(model, batches);
}

double LayerImportanceProfile::layer_mass() const {
  double acc = 0.0;
  for (const double v : layers) acc += v;
  return acc;
}

double LayerImportanceProfile::total_mass() const {
  double acc = layer_mass();
  for (const auto& [name, v] : extras) acc += v;
  return acc;
}

LayerImportanceProfile aggregate_layers(const ImportanceMap& map) {
  int n_layers = 0;
  for (const ImportanceEntry& e : map.entries) {
    n_layers = std::max(n_layers, layer_index_of(e.name) + 1);
  }
  LayerImportanceProfile profile;
  profile.layers.assign(static_cast<std::size_t>(n_layers), 0.0);
  for (const ImportanceEntry& e : map.entries) {
    double total = 0.0;
    for (const double s : e.scores) total += std::abs(s);
    const int layer = layer_index_of(e.name);
    if (layer >= 0) {
      profile.layers[static_cast<std::size_t>(layer)] += total;
    } else {
      profile.extras.emplace_back(e.name, total);
    }
  }
  return profile;
}

DistributionShift distribution_shift(const LayerImportanceProfile& before,
                                     const LayerImportanceProfile& after) {
  if (before.layers.size() != after.layers.size()) {
    throw ContractError("distribution_shift: profiles have different lengths");
  }
  const double mass_before = before.layer_mass();
  const double mass_after = after.layer_mass();
  if (mass_before <= 0.0 || mass_after <= 0.0) {
    throw DegenerateInputError("distribution_shift: all-zero profile");
  }
  DistributionShift shift;
  for (std::size_t i = 0; i < before.layers.size(); ++i) {
    shift.l1 += std::abs(before.layers[i] / mass_before -
                         after.layers[i] / mass_after);
  }
  const auto argmax = [](const std::vector<double>& xs) {
    return static_cast<int>(std::max_element(xs.begin(), xs.end()) - xs.begin());
  };
  shift.peak_moved = argmax(after.layers) - argmax(before.layers);
  shift.mass_ratio = mass_after / mass_before;
  return shift;
}

RankClusterMap rank_cluster_from_matrix(const DenseMatrix& scores,
                                        double top_fraction) {
  if (scores.rows < 1 || scores.cols < 1) {
    throw ContractError("rank_cluster: empty matrix");
  }
  if (!(top_fraction > 0.0) || top_fraction > 1.0) {
    throw ConfigError("rank_cluster: top_fraction must be in (0,1]");
  }
  const std::int64_t n = scores.rows * scores.cols;
  const std::int64_t k = std::clamp<std::int64_t>(
      std::llround(top_fraction * static_cast<double>(n)), 1, n);

  std::vector<std::int64_t> indices(static_cast<std::size_t>(n));
  std::iota(indices.begin(), indices.end(), std::int64_t{0});
  std::sort(indices.begin(), indices.end(),
            [&scores](std::int64_t a, std::int64_t b) {
              const double sa = scores.v[static_cast<std::size_t>(a)];
              const double sb = scores.v[static_cast<std::size_t>(b)];
              return sa != sb ? sa > sb : a < b;
            });
  std::vector<std::uint8_t> top(static_cast<std::size_t>(n), 0);
  for (std::int64_t i = 0; i < k; ++i) {
    top[static_cast<std::size_t>(indices[static_cast<std::size_t>(i)])] = 1;
  }

  RankClusterMap out;
  out.top_fraction = top_fraction;
  out.density.rows = scores.rows;
  out.density.cols = scores.cols;
  out.density.v.assign(static_cast<std::size_t>(n), 0.0);
  double top_density_sum = 0.0;
  for (std::int64_t r = 0; r < scores.rows; ++r) {
    for (std::int64_t c = 0; c < scores.cols; ++c) {
      const std::int64_t r0 = std::max<std::int64_t>(0, r - 1);
      const std::int64_t r1 = std::min<std::int64_t>(scores.rows - 1, r + 1);
      const std::int64_t c0 = std::max<std::int64_t>(0, c - 1);
      const std::int64_t c1 = std::min<std::int64_t>(scores.cols - 1, c + 1);
      std::int64_t hits = 0;
      for (std::int64_t rr = r0; rr <= r1; ++rr) {
        for (std::int64_t cc = c0; cc <= c1; ++cc) {
          hits += top[static_cast<std::size_t>(rr * scores.cols + cc)];
        }
      }
      const double window =
          static_cast<double>((r1 - r0 + 1) * (c1 - c0 + 1));
      const double density = static_cast<double>(hits) / window;
      out.density.at(r, c) = density;
      if (top[static_cast<std::size_t>(r * scores.cols + c)]) {
        top_density_sum += density;
      }
    }
  }
  out.summary = top_density_sum / static_cast<double>(k);
  return out;
}

RankClusterMap rank_cluster_map(const ImportanceMap& map,
                                const std::string& matrix_name,
                                double top_fraction) {
  const ImportanceEntry* entry = map.find(matrix_name);
  if (!entry) throw ContractError("rank_cluster: unknown parameter '" +
                                  matrix_name + "'");
  if (entry->shape.size() != 2) {
    throw ContractError("rank_cluster: parameter '" + matrix_name +
                        "' is not 2-D");
  }
  DenseMatrix scores{entry->shape[0], entry->shape[1], entry->scores};
  return rank_cluster_from_matrix(scores, top_fraction);
}

DenseMatrix parameter_change_map(const Tensor& before, const Tensor& after) {
  if (before.shape() != after.shape()) {
    throw ContractError("parameter_change_map: shapes " +
                        shape_str(before.shape()) + " and " +
                        shape_str(after.shape()) + " differ");
  }
  if (before.ndim() != 2) {
    throw ContractError("parameter_change_map: parameter is not 2-D");
  }
  DenseMatrix m;
  m.rows = before.dim(0);
  m.cols = before.dim(1);
  m.v.resize(static_cast<std::size_t>(before.size()));
  double mx = 0.0;
  for (std::size_t i = 0; i < m.v.size(); ++i) {
    m.v[i] = std::abs(after.values()[i] - before.values()[i]);
    mx = std::max(mx, m.v[i]);
  }
  if (mx > 0.0) {
    for (double& v : m.v) v /= mx;
  }
  return m;
}

DenseMatrix parameter_change_map(const TransformerLM& before,
                                 const TransformerLM& after,
                                 const std::string& matrix_name) {
  return parameter_change_map(before.parameter(matrix_name),
                              after.parameter(matrix_name));
}

std::int64_t numerical_rank(const DenseMatrix& m, double rel_tol) {
  using RowMat =
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> mm(m.v.data(), m.rows, m.cols);
  Eigen::BDCSVD<Eigen::MatrixXd> svd(mm);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) <= 0.0) return 0;
  std::int64_t rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv(i) > rel_tol * sv(0)) ++rank;
  }
  return rank;
}

void save_importance_map(const ImportanceMap& map,
                         std::uint64_t model_config_hash,
                         const std::filesystem::path& path) {
  Container c;
  c.kind = kContainerKindImportance;
  nlohmann::json meta;
  meta["model_config_hash"] = model_config_hash;
  meta["modality"] = map.modality;
  meta["n_examples"] = map.n_examples;
  meta["aggregation"] = map.aggregation;
  c.meta_json = meta.dump();
  for (const ImportanceEntry& e : map.entries) {
    c.records.push_back({e.name, e.shape, e.scores});
  }
  save_container(c, path);
}

ImportanceMap load_importance_map(const std::filesystem::path& path,
                                  std::uint64_t expected_model_config_hash) {
  const Container c = load_container(path);
  if (c.kind != kContainerKindImportance) {
    throw IntegrityError("importance map: " + path.string() +
                         " is not an importance container");
  }
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(c.meta_json);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("importance map: bad meta block: ") +
                         e.what());
  }
  if (meta.at("model_config_hash").get<std::uint64_t>() !=
      expected_model_config_hash) {
    throw IntegrityError(
        "importance map: stored model config hash does not match");
  }
  ImportanceMap map;
  map.modality = meta.at("modality").get<std::string>();
  map.n_examples = meta.at("n_examples").get<std::int64_t>();
  map.aggregation = meta.at("aggregation").get<std::string>();
  for (const NamedArrayRecord& rec : c.records) {
    map.entries.push_back({rec.name, rec.shape, rec.data});
  }
  return map;
}

}  // namespace drift
