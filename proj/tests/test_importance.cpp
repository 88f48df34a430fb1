#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "drift/errors.hpp"
#include "drift/importance.hpp"
#include "drift/stats.hpp"
#include "drift/training.hpp"
#include "testutil.hpp"

using namespace drift;

namespace {

struct Fixture {
  ModelConfig cfg;
  TaskSpec spec;
  Corpus corpus;
  TransformerLM model;

  explicit Fixture(std::uint64_t seed, bool trained = false)
      : cfg([&] {
          ModelConfig c = testutil::tiny_model_config(seed);
          c.vocab_size = 48;
          c.max_seq = 12;
          c.d_model = 16;
          c.n_heads = 2;
          c.d_ff = 24;
          return c;
        }()),
        spec([&] {
          TaskSpec s;
          s.vocab_size = 48;
          s.n_keys_train = 12;
          s.n_keys_eval = 6;
          s.key_len = 2;
          s.response_len = 1;
          s.n_train = 48;
          s.n_eval = 12;
          s.feature_dim = cfg.feature_dim;
          s.noise_std = 0.05;
          s.seed = seed;
          return s;
        }()),
        corpus(generate_corpus(spec)),
        model(cfg) {
    if (trained) {
      TrainingPlan plan = TrainingPlan::pretrain_defaults();
      plan.epochs = 30;
      plan.base_lr = 3e-3;
      plan.batch_size = 16;
      plan.seed = seed;
      train(model, corpus, plan);
    }
  }

  std::vector<ModalBatch> text_probe(int batch_size = 16) const {
    return make_batches(corpus.train, Modality::Text, batch_size);
  }
};

ImportanceMap uniform_map(const TransformerLM& model, double value) {
  ImportanceMap map;
  map.modality = "text";
  for (const auto& [name, t] : model.parameters()) {
    map.entries.push_back(
        {name, t.shape(),
         std::vector<double>(static_cast<std::size_t>(t.size()), value)});
  }
  return map;
}

}  // namespace

TEST_CASE("zero-valued parameters score zero under the estimator") {
  Fixture fx(1);
  Tensor head = fx.model.parameter("lm_head");
  for (std::size_t i = 0; i < 10; ++i) head.values()[i] = 0.0;
  const auto probe = fx.text_probe();
  const ImportanceMap map = estimate_importance(fx.model, probe);
  const ImportanceEntry* entry = map.find("lm_head");
  REQUIRE(entry != nullptr);
  for (std::size_t i = 0; i < 10; ++i) CHECK(entry->scores[i] == 0.0);
  for (const ImportanceEntry& e : map.entries) {
    for (const double s : e.scores) {
      CHECK(s >= 0.0);
      CHECK(std::isfinite(s));
    }
  }
  CHECK(map.n_examples == static_cast<std::int64_t>(fx.corpus.train.size()));
}

TEST_CASE("first-order estimate vs exact nullification on a hand case") {
  // L = 0.5*(w*x - y)^2, w=1, x=1, y=0. The gradient at w=1 is 1, so the
  // Eq.-style estimate |g*w| is 1, while the exact loss change from zeroing
  // w is |0.5 - 0| = 0.5: the estimator is first-order, off by the
  // quadratic factor.
  Tensor w = Tensor::full({1}, 1.0, true);
  Tensor x = Tensor::full({1}, 1.0);
  Tensor diff = mul(w, x);
  Tensor loss = scale(mul(diff, diff), 0.5);
  backward(loss);
  const double estimate = std::abs(w.grad()[0] * w.values()[0]);
  CHECK(estimate == doctest::Approx(1.0).epsilon(1e-15));

  const double base = loss.item();
  w.values()[0] = 0.0;
  const double nulled = [&] {
    NoGradGuard g;
    Tensor d = mul(w, x);
    return scale(mul(d, d), 0.5).item();
  }();
  CHECK(std::abs(base - nulled) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("estimation leaves parameters bit-identical and grads clear") {
  Fixture fx(2);
  const TransformerLM snapshot = fx.model.clone();
  const auto probe = fx.text_probe();
  estimate_importance(fx.model, probe);
  const auto pa = fx.model.parameters(), pb = snapshot.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK_FALSE(pa[i].second.has_grad());
    const auto va = pa[i].second.values(), vb = pb[i].second.values();
    for (std::size_t j = 0; j < va.size(); ++j) CHECK(va[j] == vb[j]);
  }
}

TEST_CASE("empty probe is a degenerate input") {
  Fixture fx(3);
  CHECK_THROWS_AS(estimate_importance(fx.model, {}), DegenerateInputError);
}

TEST_CASE("split-half stability of the estimator") {
  Fixture fx(4, /*trained=*/true);
  const auto batches = fx.text_probe(8);
  REQUIRE(batches.size() >= 4);
  const std::size_t half = batches.size() / 2;
  const ImportanceMap a = estimate_importance(
      fx.model, std::span<const ModalBatch>(batches.data(), half));
  const ImportanceMap b = estimate_importance(
      fx.model,
      std::span<const ModalBatch>(batches.data() + half, batches.size() - half));
  std::vector<double> va, vb;
  for (std::size_t e = 0; e < a.entries.size(); ++e) {
    va.insert(va.end(), a.entries[e].scores.begin(), a.entries[e].scores.end());
    vb.insert(vb.end(), b.entries[e].scores.begin(), b.entries[e].scores.end());
  }
  CHECK(spearman(va, vb) >= 0.9);
}

TEST_CASE("both batch aggregation modes are available and differ") {
  Fixture fx(5);
  const auto probe = fx.text_probe(8);
  const ImportanceMap mean_abs =
      estimate_importance(fx.model, probe, BatchAggregation::MeanOfAbs);
  const ImportanceMap abs_mean =
      estimate_importance(fx.model, probe, BatchAggregation::AbsOfMean);
  CHECK(mean_abs.aggregation == "mean-of-abs");
  CHECK(abs_mean.aggregation == "abs-of-mean");
  // Sign cancellation can only shrink the abs-of-mean variant.
  double sum_ma = 0.0, sum_am = 0.0;
  for (std::size_t e = 0; e < mean_abs.entries.size(); ++e) {
    for (std::size_t i = 0; i < mean_abs.entries[e].scores.size(); ++i) {
      sum_ma += mean_abs.entries[e].scores[i];
      sum_am += abs_mean.entries[e].scores[i];
      CHECK(abs_mean.entries[e].scores[i] <=
            mean_abs.entries[e].scores[i] + 1e-12);
    }
  }
  CHECK(sum_am < sum_ma);
}

TEST_CASE("exact importance: zeroed element scores zero, budget enforced") {
  Fixture fx(6);
  Tensor head = fx.model.parameter("lm_head");
  head.values()[3] = 0.0;
  const auto probe = fx.text_probe();
  const std::vector<std::pair<std::string, std::int64_t>> selection{
      {"lm_head", 3}};
  const std::vector<double> scores =
      exact_importance(fx.model, probe, selection);
  CHECK(scores[0] == 0.0);

  std::vector<std::pair<std::string, std::int64_t>> too_many(
      10001, {"lm_head", 0});
  CHECK_THROWS_AS(exact_importance(fx.model, probe, too_many), BudgetError);
}

TEST_CASE("exact vs estimated importance agree in rank on a trained model") {
  Fixture fx(7, /*trained=*/true);
  const auto probe = fx.text_probe();
  const ImportanceMap map = estimate_importance(fx.model, probe);

  // sample elements across all parameters
  Rng rng(99);
  const auto params = fx.model.parameters();
  std::vector<std::pair<std::string, std::int64_t>> selection;
  std::vector<double> estimated;
  for (int i = 0; i < 150; ++i) {
    const std::size_t p =
        static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(params.size())));
    const std::int64_t j = rng.uniform_int(params[p].second.size());
    selection.emplace_back(params[p].first, j);
    estimated.push_back(
        map.find(params[p].first)->scores[static_cast<std::size_t>(j)]);
  }
  const std::vector<double> exact = exact_importance(fx.model, probe, selection);
  CHECK(spearman(exact, estimated) >= 0.7);
}

TEST_CASE("build_mask: canonical tie-break, counts, determinism") {
  Fixture fx(8);
  const ImportanceMap map = uniform_map(fx.model, 1.0);
  const std::int64_t total = map.total_elements();
  const DeactivationMask top = build_mask(map, 0.03, MaskMode::Top, 1);
  CHECK(top.n_selected == std::llround(0.03 * static_cast<double>(total)));

  // uniform scores: the selection is the first 3% in canonical order
  std::int64_t seen = 0;
  bool still_selecting = true;
  for (const auto& [name, bits] : top.selected) {
    for (const std::uint8_t bit : bits) {
      if (seen < top.n_selected) {
        CHECK(bit == 1);
      } else {
        CHECK(bit == 0);
        still_selecting = false;
      }
      ++seen;
    }
  }
  CHECK_FALSE(still_selecting);

  CHECK_THROWS_AS(build_mask(map, 0.0, MaskMode::Top, 1), ConfigError);
  CHECK_THROWS_AS(build_mask(map, 1.0, MaskMode::Top, 1), ConfigError);
}

TEST_CASE("top and bottom masks are disjoint for distinct scores") {
  Fixture fx(9);
  ImportanceMap map = uniform_map(fx.model, 0.0);
  Rng rng(5);
  for (ImportanceEntry& e : map.entries) {
    for (double& s : e.scores) s = rng.uniform();
  }
  const DeactivationMask top = build_mask(map, 0.25, MaskMode::Top, 1);
  const DeactivationMask bottom = build_mask(map, 0.25, MaskMode::Bottom, 1);
  for (std::size_t e = 0; e < top.selected.size(); ++e) {
    for (std::size_t i = 0; i < top.selected[e].second.size(); ++i) {
      const bool overlap =
          top.selected[e].second[i] && bottom.selected[e].second[i];
      CHECK_FALSE(overlap);
    }
  }

  const DeactivationMask r1 = build_mask(map, 0.1, MaskMode::Random, 7);
  const DeactivationMask r2 = build_mask(map, 0.1, MaskMode::Random, 7);
  CHECK(r1.selected == r2.selected);
  const DeactivationMask r3 = build_mask(map, 0.1, MaskMode::Random, 8);
  CHECK(r1.selected != r3.selected);
}

TEST_CASE("apply_mask: empty mask is identity; composition matches union") {
  Fixture fx(10);
  ImportanceMap map = uniform_map(fx.model, 0.0);
  Rng rng(6);
  for (ImportanceEntry& e : map.entries) {
    for (double& s : e.scores) s = rng.uniform();
  }
  // fraction small enough to round to zero elements
  const DeactivationMask empty =
      build_mask(map, 1e-9, MaskMode::Top, 1);
  CHECK(empty.n_selected == 0);
  const TransformerLM same = apply_mask(fx.model, empty);
  const auto pa = fx.model.parameters(), pb = same.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto va = pa[i].second.values(), vb = pb[i].second.values();
    for (std::size_t j = 0; j < va.size(); ++j) CHECK(va[j] == vb[j]);
  }

  const DeactivationMask top = build_mask(map, 0.1, MaskMode::Top, 1);
  const DeactivationMask bottom = build_mask(map, 0.1, MaskMode::Bottom, 1);
  DeactivationMask both = top;
  for (std::size_t e = 0; e < both.selected.size(); ++e) {
    for (std::size_t i = 0; i < both.selected[e].second.size(); ++i) {
      both.selected[e].second[i] |= bottom.selected[e].second[i];
    }
  }
  const TransformerLM once = apply_mask(fx.model, both);
  const TransformerLM twice = apply_mask(apply_mask(fx.model, top), bottom);
  const auto qa = once.parameters(), qb = twice.parameters();
  for (std::size_t i = 0; i < qa.size(); ++i) {
    const auto va = qa[i].second.values(), vb = qb[i].second.values();
    for (std::size_t j = 0; j < va.size(); ++j) CHECK(va[j] == vb[j]);
  }
}

TEST_CASE("uniform-logit model has perplexity equal to the vocab size") {
  Fixture fx(11);
  Tensor head = fx.model.parameter("lm_head");
  for (double& v : head.values()) v = 0.0;
  const double ppl = perplexity(fx.model, fx.corpus.eval, Modality::Text);
  CHECK(ppl == doctest::Approx(static_cast<double>(fx.cfg.vocab_size))
                   .epsilon(1e-12));
  ExampleSet empty;
  CHECK_THROWS_AS(perplexity(fx.model, empty, Modality::Text),
                  DegenerateInputError);
}

TEST_CASE("aggregate_layers: zeros, single hot layer, conservation") {
  Fixture fx(12);
  ImportanceMap zeros = uniform_map(fx.model, 0.0);
  const LayerImportanceProfile flat = aggregate_layers(zeros);
  REQUIRE(flat.layers.size() == static_cast<std::size_t>(fx.cfg.n_layers));
  for (const double v : flat.layers) CHECK(v == 0.0);

  ImportanceMap one = uniform_map(fx.model, 0.0);
  for (ImportanceEntry& e : one.entries) {
    if (e.name == "layer.1.wq") e.scores[0] = 2.5;
  }
  const LayerImportanceProfile hot = aggregate_layers(one);
  CHECK(hot.layers[0] == 0.0);
  CHECK(hot.layers[1] == 2.5);

  ImportanceMap random_map = uniform_map(fx.model, 0.0);
  Rng rng(7);
  double total = 0.0;
  for (ImportanceEntry& e : random_map.entries) {
    for (double& s : e.scores) {
      s = rng.uniform();
      total += s;
    }
  }
  const LayerImportanceProfile profile = aggregate_layers(random_map);
  CHECK(profile.total_mass() == doctest::Approx(total).epsilon(1e-12));
}

TEST_CASE("distribution shift: identity, maximal, degenerate") {
  LayerImportanceProfile a, b;
  a.layers = {1.0, 3.0, 2.0};
  b.layers = {2.0, 6.0, 4.0};  // same shape, double mass
  const DistributionShift same = distribution_shift(a, b);
  CHECK(same.l1 == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(same.peak_moved == 0);
  CHECK(same.mass_ratio == doctest::Approx(2.0));

  LayerImportanceProfile left, right;
  left.layers = {0.0, 1.0};
  right.layers = {1.0, 0.0};
  const DistributionShift flip = distribution_shift(left, right);
  CHECK(flip.l1 == doctest::Approx(2.0));
  CHECK(flip.peak_moved == -1);

  LayerImportanceProfile zero;
  zero.layers = {0.0, 0.0};
  CHECK_THROWS_AS(distribution_shift(zero, right), DegenerateInputError);
  LayerImportanceProfile longer;
  longer.layers = {1.0, 1.0, 1.0};
  CHECK_THROWS_AS(distribution_shift(longer, right), ContractError);
}

TEST_CASE("rank cluster: full top region, isolated cell, structured layouts") {
  DenseMatrix m;
  m.rows = 6;
  m.cols = 6;
  m.v.assign(36, 1.0);
  const RankClusterMap all = rank_cluster_from_matrix(m, 1.0);
  for (const double d : all.density.v) CHECK(d == 1.0);
  CHECK(all.summary == 1.0);

  DenseMatrix single;
  single.rows = 5;
  single.cols = 5;
  single.v.assign(25, 0.0);
  single.at(2, 2) = 1.0;
  const RankClusterMap one = rank_cluster_from_matrix(single, 1.0 / 25.0);
  CHECK(one.summary == doctest::Approx(1.0 / 9.0));
  CHECK(one.density.at(2, 2) == doctest::Approx(1.0 / 9.0));

  // structured rows/columns vs uniformly scattered cells of the same count
  const std::int64_t n = 20;
  DenseMatrix rows_layout;
  rows_layout.rows = n;
  rows_layout.cols = n;
  rows_layout.v.assign(static_cast<std::size_t>(n * n), 0.0);
  for (std::int64_t c = 0; c < n; ++c) {
    rows_layout.at(4, c) = 1.0;  // one full row
    rows_layout.at(11, c) = 1.0;
  }
  DenseMatrix scattered;
  scattered.rows = n;
  scattered.cols = n;
  scattered.v.assign(static_cast<std::size_t>(n * n), 0.0);
  Rng rng(3);
  std::int64_t placed = 0;
  while (placed < 2 * n) {
    const std::int64_t idx = rng.uniform_int(n * n);
    if (scattered.v[static_cast<std::size_t>(idx)] == 0.0) {
      scattered.v[static_cast<std::size_t>(idx)] = 1.0;
      ++placed;
    }
  }
  const double f = static_cast<double>(2 * n) / static_cast<double>(n * n);
  const RankClusterMap structured = rank_cluster_from_matrix(rows_layout, f);
  const RankClusterMap random_cells = rank_cluster_from_matrix(scattered, f);
  CHECK(structured.summary > random_cells.summary);
}

TEST_CASE("rank cluster rejects non-2-D parameters") {
  Fixture fx(13);
  const ImportanceMap map = uniform_map(fx.model, 1.0);
  CHECK_THROWS_AS(rank_cluster_map(map, "final_norm", 0.05), ContractError);
  CHECK_THROWS_AS(rank_cluster_map(map, "not-a-name", 0.05), ContractError);
}

TEST_CASE("parameter change map: identity gives zeros; lora delta is low rank") {
  Fixture fx(14);
  const TransformerLM copy = fx.model.clone();
  const DenseMatrix zero = parameter_change_map(fx.model, copy, "layer.0.wq");
  for (const double v : zero.v) CHECK(v == 0.0);

  // Construct a rank-r update through the adapter path and merge it.
  TransformerLM adapted = fx.model.clone();
  adapted.attach_lora("layer.0.wq", 3, 6.0);
  Rng rng(8);
  for (const LoraAdapter& ad : adapted.adapters()) {
    Tensor b = ad.b;
    for (double& v : b.values()) v = rng.normal();
  }
  adapted.merge_lora();
  // the signed update is rank <= r; the |delta| heatmap need not be
  const Tensor before = fx.model.parameter("layer.0.wq");
  const Tensor after = adapted.parameter("layer.0.wq");
  DenseMatrix delta;
  delta.rows = before.dim(0);
  delta.cols = before.dim(1);
  for (std::int64_t i = 0; i < before.size(); ++i) {
    delta.v.push_back(after.values()[static_cast<std::size_t>(i)] -
                      before.values()[static_cast<std::size_t>(i)]);
  }
  CHECK(numerical_rank(delta, 1e-9) <= 3);
  const DenseMatrix change = parameter_change_map(fx.model, adapted, "layer.0.wq");
  double mx = 0.0;
  for (const double v : change.v) {
    CHECK(v >= 0.0);
    mx = std::max(mx, v);
  }
  CHECK(mx == 1.0);

  CHECK_THROWS_AS(parameter_change_map(fx.model, adapted, "final_norm"),
                  ContractError);
}
