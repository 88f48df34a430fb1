#include "drift/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "drift/errors.hpp"
#include "drift/model.hpp"

namespace drift {

std::string to_string(Modality m) {
  return m == Modality::Text ? "text" : "speech";
}

Modality modality_from_string(const std::string& s) {
  if (s == "text") return Modality::Text;
  if (s == "speech") return Modality::Speech;
  throw ConfigError("unknown modality: " + s);
}

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::KvRetrieval: return "kv-retrieval";
    case TaskKind::Copy: return "copy";
    case TaskKind::ToyQa: return "toy-qa";
  }
  return "?";
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "kv-retrieval") return TaskKind::KvRetrieval;
  if (s == "copy") return TaskKind::Copy;
  if (s == "toy-qa") return TaskKind::ToyQa;
  throw ConfigError("unknown task kind: " + s);
}

namespace {

// Token alphabets carved out of the vocab for one task world. Keys and
// values use disjoint ranges so a value token never appears in a prompt.
struct Alphabets {
  std::int32_t key_base = kFirstContentToken;
  int key_size = 0;
  std::int32_t value_base = 0;
  int value_size = 0;
};

// The alphabet split depends on the vocab alone, never on the split sizes,
// so corpora sharing a seed agree on keys and values regardless of how many
// examples they draw.
Alphabets kv_alphabets(const TaskSpec& spec) {
  const int n_total = spec.n_keys_train + spec.n_keys_eval;
  const int content = spec.vocab_size - kFirstContentToken;
  Alphabets al;
  // Compact key alphabet: a modest train split covers every key token, so
  // held-out keys are new combinations of seen tokens rather than
  // acoustically novel material. Values stay bijective per key: any
  // imprecision in the learned feature mapping changes the answer.
  al.key_size = std::clamp(content / 4, 4, 16);
  al.value_size = content - al.key_size;
  al.key_base = kFirstContentToken;
  al.value_base = kFirstContentToken + al.key_size;
  const bool enough_values = al.value_size >= n_total;
  const bool enough_keys =
      std::pow(static_cast<double>(al.key_size), spec.key_len) >=
      2.0 * static_cast<double>(n_total);
  if (!enough_values || !enough_keys) {
    throw ConfigError("task: vocab of " + std::to_string(spec.vocab_size) +
                      " too small for task (" + std::to_string(n_total) +
                      " keys of length " + std::to_string(spec.key_len) + ")");
  }
  return al;
}

// World state shared by every corpus drawn from the same seed.
struct World {
  Alphabets alphabets;
  std::vector<std::vector<std::int32_t>> keys;       // distinct key tuples
  std::vector<std::vector<std::int32_t>> responses;  // per-key response tokens
  std::vector<double> codebook;                      // [vocab, feature_dim]
};

World build_world(const TaskSpec& spec) {
  World w;
  const int n_total = spec.n_keys_train + spec.n_keys_eval;
  // Independent streams: consuming more keys must not disturb the value
  // permutation, so a wider corpus still agrees with a narrower one.
  Rng world_rng(Rng::mix(spec.seed, "world.keys"));
  Rng value_rng(Rng::mix(spec.seed, "world.values"));

  if (spec.kind == TaskKind::Copy) {
    w.alphabets.key_base = kFirstContentToken;
    w.alphabets.key_size = spec.vocab_size - kFirstContentToken;
    if (w.alphabets.key_size < 2) {
      throw ConfigError("task: vocab too small for task (copy needs >= 4)");
    }
    std::set<std::vector<std::int32_t>> seen;
    while (static_cast<int>(w.keys.size()) < n_total) {
      std::vector<std::int32_t> key(static_cast<std::size_t>(spec.key_len));
      for (auto& t : key) {
        t = w.alphabets.key_base +
            static_cast<std::int32_t>(world_rng.uniform_int(w.alphabets.key_size));
      }
      if (seen.insert(key).second) w.keys.push_back(std::move(key));
    }
    for (const auto& key : w.keys) {
      std::vector<std::int32_t> resp = key;
      resp.push_back(kEosToken);
      w.responses.push_back(std::move(resp));
    }
  } else {
    // kv-retrieval and toy-qa share the keyed-lookup scheme; toy-qa keys are
    // (subject, relation) pairs over split sub-alphabets.
    w.alphabets = kv_alphabets(spec);
    std::set<std::vector<std::int32_t>> seen;
    const int key_size = w.alphabets.key_size;
    while (static_cast<int>(w.keys.size()) < n_total) {
      std::vector<std::int32_t> key(static_cast<std::size_t>(spec.key_len));
      if (spec.kind == TaskKind::ToyQa) {
        const int half = std::max(2, key_size / 2);
        for (std::size_t j = 0; j < key.size(); ++j) {
          const int lo = (j % 2 == 0) ? 0 : half;
          const int hi = (j % 2 == 0) ? half : key_size;
          key[j] = w.alphabets.key_base +
                   static_cast<std::int32_t>(lo + world_rng.uniform_int(hi - lo));
        }
      } else {
        for (auto& t : key) {
          t = w.alphabets.key_base +
              static_cast<std::int32_t>(world_rng.uniform_int(key_size));
        }
      }
      if (seen.insert(key).second) w.keys.push_back(std::move(key));
    }
    // Bijective first response token: every key answers with its own value.
    // The permutation covers the whole value alphabet so the assignment of
    // the first n keys does not depend on n.
    std::vector<std::int32_t> values(
        static_cast<std::size_t>(w.alphabets.value_size));
    for (int i = 0; i < w.alphabets.value_size; ++i) {
      values[static_cast<std::size_t>(i)] =
          w.alphabets.value_base + static_cast<std::int32_t>(i);
    }
    value_rng.shuffle(values);
    for (int i = 0; i < n_total; ++i) {
      std::vector<std::int32_t> resp{values[static_cast<std::size_t>(i)]};
      Rng extra(Rng::mix(spec.seed, "value-tail", static_cast<std::uint64_t>(i)));
      while (static_cast<int>(resp.size()) < spec.response_len) {
        resp.push_back(w.alphabets.value_base +
                       static_cast<std::int32_t>(
                           extra.uniform_int(w.alphabets.value_size)));
      }
      resp.push_back(kEosToken);
      w.responses.push_back(std::move(resp));
    }
  }

  Rng code_rng(Rng::mix(spec.seed, "codebook"));
  w.codebook.resize(static_cast<std::size_t>(spec.vocab_size) *
                    static_cast<std::size_t>(spec.feature_dim));
  for (double& v : w.codebook) v = code_rng.normal();
  return w;
}

Example make_example(const TaskSpec& spec, const World& world, int key_index,
                     std::int64_t id, std::uint64_t jitter_stream) {
  Example ex;
  ex.id = id;
  ex.prompt = world.keys[static_cast<std::size_t>(key_index)];
  ex.prompt.push_back(kSepToken);
  ex.response = world.responses[static_cast<std::size_t>(key_index)];

  Rng jitter(Rng::mix(spec.seed, "jitter", jitter_stream));
  const int f = spec.feature_dim;
  ex.features.resize(ex.prompt.size() * static_cast<std::size_t>(f));
  for (std::size_t t = 0; t < ex.prompt.size(); ++t) {
    const double* row =
        world.codebook.data() + static_cast<std::size_t>(ex.prompt[t]) * f;
    for (int j = 0; j < f; ++j) {
      ex.features[t * static_cast<std::size_t>(f) + static_cast<std::size_t>(j)] =
          row[j] + spec.noise_std * jitter.normal();
    }
  }
  return ex;
}

}  // namespace

void TaskSpec::validate() const {
  const auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("task spec: " + what);
  };
  require(vocab_size > kFirstContentToken + 1, "vocab_size too small");
  require(n_keys_train >= 1, "n_keys_train must be >= 1");
  require(n_keys_eval >= 0, "n_keys_eval must be >= 0");
  require(key_len >= 1, "key_len must be >= 1");
  require(response_len >= 1, "response_len must be >= 1");
  require(n_train >= 1, "n_train must be >= 1");
  require(n_eval >= 0, "n_eval must be >= 0");
  require(n_eval == 0 || n_keys_eval >= 1, "n_eval needs n_keys_eval >= 1");
  require(feature_dim >= 1, "feature_dim must be >= 1");
  require(noise_std >= 0.0, "noise_std must be >= 0");
  if (kind == TaskKind::ToyQa) {
    require(key_len % 2 == 0, "toy-qa key_len must be even");
  }
}

Corpus generate_corpus(const TaskSpec& spec) {
  spec.validate();
  const World world = build_world(spec);

  Corpus corpus;
  corpus.spec = spec;
  const int prompt_len = spec.key_len + 1;
  const int response_total =
      static_cast<int>(world.responses.front().size());
  for (ExampleSet* set : {&corpus.train, &corpus.eval}) {
    set->prompt_len = prompt_len;
    set->response_len = response_total;
    set->feature_dim = spec.feature_dim;
  }

  corpus.train.items.reserve(static_cast<std::size_t>(spec.n_train));
  for (int i = 0; i < spec.n_train; ++i) {
    const int key = i % spec.n_keys_train;
    corpus.train.items.push_back(
        make_example(spec, world, key, i, static_cast<std::uint64_t>(i)));
  }
  corpus.eval.items.reserve(static_cast<std::size_t>(spec.n_eval));
  for (int i = 0; i < spec.n_eval; ++i) {
    const int key = spec.n_keys_train + i % spec.n_keys_eval;
    corpus.eval.items.push_back(make_example(
        spec, world, key, i,
        // Jitter streams disjoint from every train rendition.
        static_cast<std::uint64_t>(spec.n_train + i)));
  }
  return corpus;
}

TargetsAndMask targets_and_mask(const ModalBatch& batch) {
  const std::int64_t b = batch.batch, p = batch.prompt_len,
                     r = batch.response_len, s = p + r;
  TargetsAndMask tm;
  tm.targets.assign(static_cast<std::size_t>(b * s), 0);
  tm.mask.assign(static_cast<std::size_t>(b * s), 0);
  for (std::int64_t i = 0; i < b; ++i) {
    for (std::int64_t t = p - 1; t < s - 1; ++t) {
      // Position t predicts response token t+1-p.
      tm.targets[static_cast<std::size_t>(i * s + t)] =
          batch.response[static_cast<std::size_t>(i * r + (t + 1 - p))];
      tm.mask[static_cast<std::size_t>(i * s + t)] = 1;
    }
  }
  return tm;
}

ModalBatch make_batch(std::span<const Example> items, Modality modality,
                      int feature_dim) {
  if (items.empty()) throw DegenerateInputError("make_batch: no examples");
  ModalBatch batch;
  batch.modality = modality;
  batch.batch = static_cast<std::int64_t>(items.size());
  batch.prompt_len = static_cast<std::int64_t>(items[0].prompt.size());
  batch.response_len = static_cast<std::int64_t>(items[0].response.size());
  batch.feature_dim = modality == Modality::Speech ? feature_dim : 0;
  for (const Example& ex : items) {
    if (static_cast<std::int64_t>(ex.prompt.size()) != batch.prompt_len ||
        static_cast<std::int64_t>(ex.response.size()) != batch.response_len) {
      throw ContractError("make_batch: examples have mixed lengths");
    }
    if (modality == Modality::Text) {
      batch.prompt_tokens.insert(batch.prompt_tokens.end(), ex.prompt.begin(),
                                 ex.prompt.end());
    } else {
      batch.features.insert(batch.features.end(), ex.features.begin(),
                            ex.features.end());
    }
    batch.response.insert(batch.response.end(), ex.response.begin(),
                          ex.response.end());
  }
  return batch;
}

std::vector<ModalBatch> make_batches(const ExampleSet& set, Modality modality,
                                     int batch_size) {
  if (batch_size < 1) throw ConfigError("make_batches: batch_size must be >= 1");
  std::vector<ModalBatch> out;
  const std::size_t n = set.items.size();
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
    const std::size_t take = std::min(static_cast<std::size_t>(batch_size), n - i);
    out.push_back(make_batch(
        std::span<const Example>(set.items.data() + i, take), modality,
        set.feature_dim));
  }
  return out;
}

std::vector<ModalBatch> make_batches(const ExampleSet& set, Modality modality,
                                     int batch_size, Rng& rng) {
  std::vector<std::size_t> order(set.items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  ExampleSet shuffled;
  shuffled.prompt_len = set.prompt_len;
  shuffled.response_len = set.response_len;
  shuffled.feature_dim = set.feature_dim;
  shuffled.items.reserve(order.size());
  for (const std::size_t i : order) shuffled.items.push_back(set.items[i]);
  return make_batches(shuffled, modality, batch_size);
}

ExampleSet probe_subset(const ExampleSet& set, double ratio) {
  if (!(ratio > 0.0) || ratio > 1.0) {
    throw ConfigError("probe_subset: ratio must be in (0,1]");
  }
  const std::int64_t n = static_cast<std::int64_t>(set.items.size());
  const std::int64_t k = std::max<std::int64_t>(
      1, static_cast<std::int64_t>(std::llround(ratio * static_cast<double>(n))));
  // Stratified by prompt content: round-robin one rendition per distinct
  // prompt, so a small probe spans as much of the key universe as it can
  // instead of resampling renditions of a few keys.
  std::map<std::vector<std::int32_t>, std::vector<std::size_t>> by_prompt;
  for (std::size_t i = 0; i < set.items.size(); ++i) {
    by_prompt[set.items[i].prompt].push_back(i);
  }
  std::vector<std::size_t> chosen;
  for (std::size_t round = 0;
       static_cast<std::int64_t>(chosen.size()) < k; ++round) {
    for (const auto& [prompt, renditions] : by_prompt) {
      if (static_cast<std::int64_t>(chosen.size()) >= k) break;
      if (round < renditions.size()) chosen.push_back(renditions[round]);
    }
  }
  std::sort(chosen.begin(), chosen.end());
  ExampleSet out;
  out.prompt_len = set.prompt_len;
  out.response_len = set.response_len;
  out.feature_dim = set.feature_dim;
  for (const std::size_t i : chosen) out.items.push_back(set.items[i]);
  return out;
}

double answer_accuracy(const ExampleSet& eval_set, Modality modality,
                       const Generator& generate) {
  if (eval_set.empty()) {
    throw DegenerateInputError("answer_accuracy: empty eval set");
  }
  std::int64_t hits = 0;
  for (const Example& ex : eval_set.items) {
    if (generate(ex, modality) == ex.response) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(eval_set.size());
}

double answer_accuracy(const TransformerLM& model, const ExampleSet& eval_set,
                       Modality modality) {
  const int max_new = eval_set.response_len;
  const int feature_dim = eval_set.feature_dim;
  return answer_accuracy(
      eval_set, modality,
      [&model, max_new, feature_dim](const Example& ex, Modality m) {
        const ModalBatch prompt =
            make_batch(std::span<const Example>(&ex, 1), m, feature_dim);
        ModalBatch q = prompt;
        q.response.clear();
        q.response_len = 0;
        return model.generate_greedy(q, max_new)[0];
      });
}

namespace {

void write_int_list(std::ostream& os, std::span<const std::int32_t> xs) {
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) os << ',';
    os << xs[i];
  }
}

}  // namespace

void export_examples(const ExampleSet& set, std::ostream& os) {
  char buf[32];
  for (const Example& ex : set.items) {
    os << ex.id << "\ttext\t";
    write_int_list(os, ex.prompt);
    os << '\t';
    write_int_list(os, ex.response);
    os << '\n';

    os << ex.id << "\tspeech\t";
    const std::size_t f = static_cast<std::size_t>(set.feature_dim);
    for (std::size_t t = 0; t < ex.prompt.size(); ++t) {
      if (t) os << ';';
      for (std::size_t j = 0; j < f; ++j) {
        if (j) os << ',';
        std::snprintf(buf, sizeof buf, "%.6f", ex.features[t * f + j]);
        os << buf;
      }
    }
    os << '\t';
    write_int_list(os, ex.response);
    os << '\n';
  }
}

ExampleSet import_examples(std::istream& is) {
  ExampleSet set;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id_s, modality_s, prompt_s, response_s;
    if (!std::getline(ls, id_s, '\t') || !std::getline(ls, modality_s, '\t') ||
        !std::getline(ls, prompt_s, '\t') || !std::getline(ls, response_s)) {
      throw IntegrityError("corpus import: malformed line: " + line);
    }
    const std::int64_t id = std::stoll(id_s);
    const Modality modality = modality_from_string(modality_s);

    Example* ex = nullptr;
    for (Example& e : set.items) {
      if (e.id == id) {
        ex = &e;
        break;
      }
    }
    if (!ex) {
      set.items.emplace_back();
      ex = &set.items.back();
      ex->id = id;
    }

    std::vector<std::int32_t> response;
    {
      std::istringstream rs(response_s);
      std::string tok;
      while (std::getline(rs, tok, ',')) {
        response.push_back(static_cast<std::int32_t>(std::stol(tok)));
      }
    }
    if (!ex->response.empty() && ex->response != response) {
      throw IntegrityError("corpus import: paired responses differ for id " +
                           id_s);
    }
    ex->response = std::move(response);

    if (modality == Modality::Text) {
      std::istringstream ps(prompt_s);
      std::string tok;
      while (std::getline(ps, tok, ',')) {
        ex->prompt.push_back(static_cast<std::int32_t>(std::stol(tok)));
      }
    } else {
      std::istringstream ps(prompt_s);
      std::string row;
      int f = 0;
      while (std::getline(ps, row, ';')) {
        std::istringstream rs(row);
        std::string tok;
        int count = 0;
        while (std::getline(rs, tok, ',')) {
          ex->features.push_back(std::stod(tok));
          ++count;
        }
        f = count;
      }
      set.feature_dim = f;
    }
  }
  if (!set.items.empty()) {
    set.prompt_len = static_cast<int>(set.items[0].prompt.size());
    set.response_len = static_cast<int>(set.items[0].response.size());
  }
  return set;
}

}  // namespace drift
