#include "drift/model.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "drift/errors.hpp"
#include "drift/rng.hpp"

namespace drift {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

const char* const kMatrixKinds[] = {"wq", "wk", "wv", "wo",
                                    "w_gate", "w_up", "w_down"};

Tensor init_normal(Shape shape, std::uint64_t seed, const std::string& name,
                   double stddev) {
  Rng rng(Rng::mix(seed, name));
  std::vector<double> data(static_cast<std::size_t>(numel(shape)));
  for (double& v : data) v = rng.normal(0.0, stddev);
  return Tensor::from_data(std::move(shape), std::move(data), true);
}

std::vector<std::string> split_pattern(const std::string& pattern) {
  std::vector<std::string> terms;
  std::string cur;
  for (const char c : pattern) {
    if (c == '|' || c == ',') {
      if (!cur.empty()) terms.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) terms.push_back(cur);
  return terms;
}

bool term_matches(const std::string& term, const std::string& name,
                  const std::string& kind) {
  if (term == "all" || term == "*") return true;
  if (term == kind) return true;
  if (term == name) return true;
  if (term.size() > 1 && term.back() == '*' &&
      name.compare(0, term.size() - 1, term, 0, term.size() - 1) == 0) {
    return true;
  }
  return false;
}

}  // namespace

void ModelConfig::validate() const {
  const auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model config: " + what);
  };
  require(vocab_size >= 1, "vocab_size must be >= 1");
  require(d_model >= 1, "d_model must be >= 1");
  require(n_layers >= 1, "n_layers must be >= 1");
  require(n_heads >= 1, "n_heads must be >= 1");
  require(d_ff >= 1, "d_ff must be >= 1");
  require(max_seq >= 1, "max_seq must be >= 1");
  require(feature_dim >= 1, "feature_dim must be >= 1");
  require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
}

TransformerLM::TransformerLM(const ModelConfig& cfg, Uninitialized)
    : cfg_(cfg) {
  blocks_.resize(static_cast<std::size_t>(cfg.n_layers));
}

TransformerLM::TransformerLM(const ModelConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  const double d_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  const double ff_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
  const double feat_std = 1.0 / std::sqrt(static_cast<double>(cfg.feature_dim));
  const std::uint64_t seed = cfg.seed;

  embedding_ = init_normal({cfg.vocab_size, cfg.d_model}, seed, "embedding", d_std);
  pos_embedding_ =
      init_normal({cfg.max_seq, cfg.d_model}, seed, "pos_embedding", d_std);
  blocks_.reserve(static_cast<std::size_t>(cfg.n_layers));
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string prefix = "layer." + std::to_string(i) + ".";
    Block b;
    b.wq = init_normal({cfg.d_model, cfg.d_model}, seed, prefix + "wq", d_std);
    b.wk = init_normal({cfg.d_model, cfg.d_model}, seed, prefix + "wk", d_std);
    b.wv = init_normal({cfg.d_model, cfg.d_model}, seed, prefix + "wv", d_std);
    b.wo = init_normal({cfg.d_model, cfg.d_model}, seed, prefix + "wo", d_std);
    b.w_gate = init_normal({cfg.d_ff, cfg.d_model}, seed, prefix + "w_gate", d_std);
    b.w_up = init_normal({cfg.d_ff, cfg.d_model}, seed, prefix + "w_up", d_std);
    b.w_down = init_normal({cfg.d_model, cfg.d_ff}, seed, prefix + "w_down", ff_std);
    b.attn_norm = Tensor::full({cfg.d_model}, 1.0, true);
    b.mlp_norm = Tensor::full({cfg.d_model}, 1.0, true);
    blocks_.push_back(std::move(b));
  }
  final_norm_ = Tensor::full({cfg.d_model}, 1.0, true);
  lm_head_ = init_normal({cfg.d_model, cfg.vocab_size}, seed, "lm_head", d_std);
  adaptor0_ =
      init_normal({cfg.d_model, cfg.feature_dim}, seed, "adaptor.0", feat_std);
  // Near-zero output projection: an untrained speech path starts silent and
  // grows into the embedding space instead of flooding the blocks with
  // large random activations.
  adaptor1_ = init_normal({cfg.d_model, cfg.d_model}, seed, "adaptor.1",
                          1e-3 * d_std);
}

std::vector<std::pair<std::string, Tensor>> TransformerLM::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(2 + 9 * blocks_.size() + 4);
  out.emplace_back("embedding", embedding_);
  out.emplace_back("pos_embedding", pos_embedding_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string prefix = "layer." + std::to_string(i) + ".";
    const Block& b = blocks_[i];
    out.emplace_back(prefix + "wq", b.wq);
    out.emplace_back(prefix + "wk", b.wk);
    out.emplace_back(prefix + "wv", b.wv);
    out.emplace_back(prefix + "wo", b.wo);
    out.emplace_back(prefix + "w_gate", b.w_gate);
    out.emplace_back(prefix + "w_up", b.w_up);
    out.emplace_back(prefix + "w_down", b.w_down);
    out.emplace_back(prefix + "attn_norm", b.attn_norm);
    out.emplace_back(prefix + "mlp_norm", b.mlp_norm);
  }
  out.emplace_back("final_norm", final_norm_);
  out.emplace_back("lm_head", lm_head_);
  out.emplace_back("adaptor.0", adaptor0_);
  out.emplace_back("adaptor.1", adaptor1_);
  return out;
}

Tensor TransformerLM::parameter(const std::string& name) const {
  for (auto& [n, t] : parameters()) {
    if (n == name) return t;
  }
  throw ContractError("unknown parameter: " + name);
}

std::int64_t TransformerLM::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : parameters()) n += t.size();
  return n;
}

std::vector<std::pair<std::string, Tensor>> TransformerLM::trainable_parameters()
    const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& [name, t] : parameters()) {
    if (t.requires_grad()) out.emplace_back(name, t);
  }
  for (const LoraAdapter& ad : adapters_) {
    out.emplace_back("lora." + ad.target + ".a", ad.a);
    out.emplace_back("lora." + ad.target + ".b", ad.b);
  }
  return out;
}

std::int64_t TransformerLM::trainable_parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : trainable_parameters()) n += t.size();
  return n;
}

void TransformerLM::zero_grad() {
  for (auto& [name, t] : parameters()) t.zero_grad();
  for (LoraAdapter& ad : const_cast<std::vector<LoraAdapter>&>(adapters_)) {
    ad.a.zero_grad();
    ad.b.zero_grad();
  }
}

const LoraAdapter* TransformerLM::find_adapter(const std::string& name) const {
  for (const LoraAdapter& ad : adapters_) {
    if (ad.target == name) return &ad;
  }
  return nullptr;
}

Tensor TransformerLM::proj(const Tensor& x, const std::string& name,
                           const Tensor& w) const {
  Tensor y = linear(x, w);
  if (const LoraAdapter* ad = find_adapter(name)) {
    y = add(y, scale(linear(linear(x, ad->a), ad->b),
                     ad->alpha / static_cast<double>(ad->rank)));
  }
  return y;
}

Tensor TransformerLM::hidden_states(const ModalBatch& batch) const {
  const std::int64_t b = batch.batch;
  const std::int64_t p = batch.prompt_len;
  const std::int64_t r = batch.response_len;
  const std::int64_t s = p + r;
  const std::int64_t d = cfg_.d_model;
  if (b < 1 || p < 1) {
    throw DegenerateInputError("forward: batch needs at least one prompt row");
  }
  if (s > cfg_.max_seq) {
    throw LengthError("forward: sequence of " + std::to_string(s) +
                      " exceeds max_seq " + std::to_string(cfg_.max_seq));
  }

  Tensor h;  // [b, s, d]
  if (batch.modality == Modality::Text) {
    std::vector<std::int32_t> ids(static_cast<std::size_t>(b * s));
    for (std::int64_t i = 0; i < b; ++i) {
      std::copy_n(batch.prompt_tokens.begin() + i * p, p, ids.begin() + i * s);
      if (r > 0) {
        std::copy_n(batch.response.begin() + i * r, r, ids.begin() + i * s + p);
      }
    }
    h = embedding_rows(embedding_, ids, {b, s});
  } else {
    if (batch.feature_dim != cfg_.feature_dim) {
      throw DimensionError("forward: batch feature_dim " +
                           std::to_string(batch.feature_dim) +
                           " != model feature_dim " +
                           std::to_string(cfg_.feature_dim));
    }
    Tensor feats = Tensor::from_data({b * p, cfg_.feature_dim}, batch.features);
    Tensor projected = linear(silu(linear(feats, adaptor0_)), adaptor1_);
    Tensor prompt_h = reshape(projected, {b, p, d});
    if (r > 0) {
      Tensor resp_h = embedding_rows(embedding_, batch.response, {b, r});
      h = concat_seq(prompt_h, resp_h);
    } else {
      h = prompt_h;
    }
  }

  std::vector<std::int32_t> pos_ids(static_cast<std::size_t>(b * s));
  for (std::int64_t i = 0; i < b; ++i) {
    for (std::int64_t t = 0; t < s; ++t) {
      pos_ids[static_cast<std::size_t>(i * s + t)] = static_cast<std::int32_t>(t);
    }
  }
  h = add(h, embedding_rows(pos_embedding_, pos_ids, {b, s}));

  Tensor x = reshape(h, {b * s, d});
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const Block& blk = blocks_[i];
    const std::string prefix = "layer." + std::to_string(i) + ".";

    Tensor attn_in = rmsnorm_lastdim(x, blk.attn_norm);
    Tensor q = reshape(proj(attn_in, prefix + "wq", blk.wq), {b, s, d});
    Tensor k = reshape(proj(attn_in, prefix + "wk", blk.wk), {b, s, d});
    Tensor v = reshape(proj(attn_in, prefix + "wv", blk.wv), {b, s, d});
    Tensor att = reshape(causal_attention(q, k, v, cfg_.n_heads), {b * s, d});
    x = add(x, proj(att, prefix + "wo", blk.wo));

    Tensor mlp_in = rmsnorm_lastdim(x, blk.mlp_norm);
    Tensor gate = silu(proj(mlp_in, prefix + "w_gate", blk.w_gate));
    Tensor up = proj(mlp_in, prefix + "w_up", blk.w_up);
    x = add(x, proj(mul(gate, up), prefix + "w_down", blk.w_down));
  }
  return rmsnorm_lastdim(x, final_norm_);
}

Tensor TransformerLM::forward(const ModalBatch& batch) const {
  const std::int64_t b = batch.batch;
  const std::int64_t s = batch.seq_len();
  Tensor x = hidden_states(batch);
  return reshape(matmul(x, lm_head_), {b, s, cfg_.vocab_size});
}

Tensor TransformerLM::loss(const ModalBatch& batch) const {
  const TargetsAndMask tm = targets_and_mask(batch);
  return cross_entropy_loss(forward(batch), tm.targets, tm.mask);
}

void TransformerLM::attach_lora(const std::string& pattern, int rank,
                                double alpha) {
  if (!adapters_.empty()) {
    throw ContractError("attach_lora: adapters already attached");
  }
  if (rank < 1) throw ConfigError("attach_lora: rank must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("attach_lora: alpha must be positive");
  std::vector<std::string> terms = split_pattern(pattern);
  if (terms.empty()) terms.push_back("all");

  std::vector<std::pair<std::string, Tensor>> targets;
  for (auto& [name, t] : parameters()) {
    const std::size_t dot = name.rfind('.');
    const std::string kind = dot == std::string::npos ? name : name.substr(dot + 1);
    if (name.compare(0, 6, "layer.") != 0) continue;
    if (std::find(std::begin(kMatrixKinds), std::end(kMatrixKinds), kind) ==
        std::end(kMatrixKinds)) {
      continue;
    }
    for (const std::string& term : terms) {
      if (term_matches(term, name, kind)) {
        targets.emplace_back(name, t);
        break;
      }
    }
  }
  if (targets.empty()) {
    throw ConfigError("attach_lora: pattern '" + pattern +
                      "' matches no attention/MLP matrix");
  }

  for (auto& [name, t] : parameters()) {
    // The adaptor front-end keeps training; it is new capacity, not
    // pre-trained knowledge.
    t.set_requires_grad(name.rfind("adaptor.", 0) == 0);
  }
  for (auto& [name, w] : targets) {
    const std::int64_t out_dim = w.dim(0), in_dim = w.dim(1);
    LoraAdapter ad;
    ad.target = name;
    ad.rank = rank;
    ad.alpha = alpha;
    ad.a = init_normal({rank, in_dim}, cfg_.seed, "lora." + name,
                       1.0 / std::sqrt(static_cast<double>(in_dim)));
    ad.b = Tensor::zeros({out_dim, rank}, true);
    adapters_.push_back(std::move(ad));
  }
}

MergeStatus TransformerLM::merge_lora() {
  if (adapters_.empty()) return MergeStatus::NoAdapters;
  for (const LoraAdapter& ad : adapters_) {
    Tensor w = parameter(ad.target);
    const std::int64_t out_dim = w.dim(0), in_dim = w.dim(1);
    Eigen::Map<RowMat> wm(w.values().data(), out_dim, in_dim);
    Eigen::Map<const RowMat> am(ad.a.values().data(), ad.rank, in_dim);
    Eigen::Map<const RowMat> bm(ad.b.values().data(), out_dim, ad.rank);
    wm.noalias() += (ad.alpha / static_cast<double>(ad.rank)) * bm * am;
  }
  adapters_.clear();
  for (auto& [name, t] : parameters()) t.set_requires_grad(true);
  return MergeStatus::Merged;
}

std::vector<std::vector<std::int32_t>> TransformerLM::generate_greedy(
    const ModalBatch& prompt, int max_new) const {
  if (max_new < 1) throw ContractError("generate_greedy: max_new must be >= 1");
  if (prompt.prompt_len + max_new > cfg_.max_seq) {
    throw LengthError("generate_greedy: prompt of " +
                      std::to_string(prompt.prompt_len) + " plus " +
                      std::to_string(max_new) + " new tokens exceeds max_seq " +
                      std::to_string(cfg_.max_seq));
  }
  NoGradGuard no_grad;
  const std::int64_t b = prompt.batch;
  const std::int64_t p = prompt.prompt_len;
  std::vector<std::vector<std::int32_t>> out(static_cast<std::size_t>(b));

  for (std::int64_t i = 0; i < b; ++i) {
    ModalBatch current;
    current.modality = prompt.modality;
    current.batch = 1;
    current.prompt_len = p;
    current.response_len = 0;
    current.feature_dim = prompt.feature_dim;
    if (prompt.modality == Modality::Text) {
      current.prompt_tokens.assign(prompt.prompt_tokens.begin() + i * p,
                                   prompt.prompt_tokens.begin() + (i + 1) * p);
    } else {
      const std::int64_t f = prompt.feature_dim;
      current.features.assign(prompt.features.begin() + i * p * f,
                              prompt.features.begin() + (i + 1) * p * f);
    }
    std::vector<std::int32_t>& generated = out[static_cast<std::size_t>(i)];
    for (int step = 0; step < max_new; ++step) {
      current.response = generated;
      current.response_len = static_cast<std::int64_t>(generated.size());
      const Tensor logits = forward(current);
      const std::int64_t s = current.seq_len();
      const double* last =
          logits.values().data() + (s - 1) * cfg_.vocab_size;
      const std::int32_t next = static_cast<std::int32_t>(
          std::max_element(last, last + cfg_.vocab_size) - last);
      generated.push_back(next);
      if (next == kEosToken) break;
    }
  }
  return out;
}

TransformerLM TransformerLM::clone() const {
  TransformerLM copy(cfg_, Uninitialized{});
  copy.embedding_ = embedding_.clone_leaf();
  copy.pos_embedding_ = pos_embedding_.clone_leaf();
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const Block& b = blocks_[i];
    Block& c = copy.blocks_[i];
    c.wq = b.wq.clone_leaf();
    c.wk = b.wk.clone_leaf();
    c.wv = b.wv.clone_leaf();
    c.wo = b.wo.clone_leaf();
    c.w_gate = b.w_gate.clone_leaf();
    c.w_up = b.w_up.clone_leaf();
    c.w_down = b.w_down.clone_leaf();
    c.attn_norm = b.attn_norm.clone_leaf();
    c.mlp_norm = b.mlp_norm.clone_leaf();
  }
  copy.final_norm_ = final_norm_.clone_leaf();
  copy.lm_head_ = lm_head_.clone_leaf();
  copy.adaptor0_ = adaptor0_.clone_leaf();
  copy.adaptor1_ = adaptor1_.clone_leaf();
  for (const LoraAdapter& ad : adapters_) {
    LoraAdapter c;
    c.target = ad.target;
    c.rank = ad.rank;
    c.alpha = ad.alpha;
    c.a = ad.a.clone_leaf();
    c.b = ad.b.clone_leaf();
    copy.adapters_.push_back(std::move(c));
  }
  return copy;
}

}  // namespace drift
