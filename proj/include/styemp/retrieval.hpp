#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "styemp/checkpoint.hpp"
#include "styemp/corpus.hpp"
#include "styemp/error.hpp"
#include "styemp/nnet.hpp"
#include "styemp/optim.hpp"
#include "styemp/predictors.hpp"
#include "styemp/random.hpp"

namespace styemp {

/// Up to `n` distinct responses of `listener_id`, drawn uniformly without
/// replacement (all of them when the pool is smaller). Indices refer to
/// positions in `data`; `exclude` (if valid) is never drawn.
inline std::vector<std::size_t> sample_past_indices(const Dataset& data, const std::string& listener_id,
                                                    std::size_t n, Rng& rng,
                                                    std::size_t exclude = static_cast<std::size_t>(-1)) {
  std::vector<std::size_t> pool;
  bool known = false;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data[i].listener_id == listener_id) {
      known = true;
      if (i != exclude) pool.push_back(i);
    }
  if (!known) throw ContractError("unknown listener '" + listener_id + "'");
  const std::size_t k = std::min(n, pool.size());
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
  pool.resize(k);
  return pool;
}

inline std::vector<std::string> sample_past_responses(const Dataset& data, const std::string& listener_id,
                                                      std::size_t n, Rng& rng) {
  std::vector<std::string> out;
  for (std::size_t i : sample_past_indices(data, listener_id, n, rng)) out.push_back(data[i].response);
  return out;
}

using Embedding = std::vector<double>;

inline Embedding unit_normalize(Embedding v) {
  long double ss = 0;
  for (double x : v) ss += static_cast<long double>(x) * x;
  if (!(ss > 0)) throw ContractError("embedding has zero norm");
  const double inv = static_cast<double>(1.0L / std::sqrt(ss));
  for (double& x : v) x *= inv;
  return v;
}

inline double dot(const Embedding& a, const Embedding& b) {
  if (a.size() != b.size()) throw ShapeError("embedding dimension mismatch");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Semantic, style and emotion embeddings of one text.
struct EmbeddingTriple {
  Embedding semantic, style, emotion;
  bool operator==(const EmbeddingTriple&) const = default;
};

/// Sum of the three cosine similarities of unit vectors.
inline double retrieval_score(const EmbeddingTriple& q, const EmbeddingTriple& e) {
  return dot(q.semantic, e.semantic) + dot(q.style, e.style) + dot(q.emotion, e.emotion);
}

struct EmbedderConfig {
  EncoderConfig encoder;
  OptimizerConfig optim{.lr = 2e-3};
  std::size_t epochs = 3;
  std::size_t batch = 16;
  double temperature = 0.1;  // contrastive softmax temperature
  std::uint64_t seed = 1;
};

/// Context/response dual encoder with a shared tower, trained with in-batch
/// contrastive loss.
template <typename T>
class SemanticEmbedder {
 public:
  SemanticEmbedder() = default;
  SemanticEmbedder(const EmbedderConfig& cfg, Rng& rng) : encoder(cfg.encoder, rng), cfg_(cfg) {}

  Tensor<T> embed_tensor(std::span<const int> ids) const {
    const Tensor<T> v = mean_pool(encoder.encode(ids).states);
    return div(v, sqrt(add_scalar(sum(mul(v, v)), T(1e-12))));
  }

  Embedding embed(std::span<const int> ids) const {
    NoGradScope<T> no_grad;
    const Tensor<T> v = mean_pool(encoder.encode(ids).states);
    return unit_normalize(Embedding(v.data().begin(), v.data().end()));
  }

  /// Mean in-batch InfoNCE loss of context i against response i.
  Tensor<T> batch_loss(const std::vector<std::vector<int>>& contexts,
                       const std::vector<std::vector<int>>& responses) const {
    std::vector<Tensor<T>> c, r;
    for (const auto& ids : contexts) c.push_back(embed_tensor(ids));
    for (const auto& ids : responses) r.push_back(embed_tensor(ids));
    const Tensor<T> logits = scale(matmul(concat(c, 0), transpose(concat(r, 0))), T(1.0 / cfg_.temperature));
    std::vector<int> diag(contexts.size());
    std::iota(diag.begin(), diag.end(), 0);
    return cross_entropy(logits, diag);
  }

  std::vector<double> train(const std::vector<std::vector<int>>& contexts,
                            const std::vector<std::vector<int>>& responses) {
    if (contexts.size() != responses.size() || contexts.size() < 2)
      throw ContractError("semantic embedder: need at least two aligned pairs");
    Adam<T> opt(parameters(), cfg_.optim);
    Rng rng(derive_seed(cfg_.seed, "semantic-order"));
    std::vector<std::size_t> order(contexts.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> curve;
    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      rng.shuffle(order.begin(), order.end());
      double total = 0;
      std::size_t batches = 0;
      for (std::size_t start = 0; start + 1 < order.size(); start += cfg_.batch) {
        const std::size_t end = std::min(order.size(), start + cfg_.batch);
        std::vector<std::vector<int>> cb, rb;
        for (std::size_t i = start; i < end; ++i) {
          cb.push_back(contexts[order[i]]);
          rb.push_back(responses[order[i]]);
        }
        Tape<T> tape;
        TapeScope<T> scope(tape);
        const Tensor<T> loss = batch_loss(cb, rb);
        total += static_cast<double>(loss.item());
        ++batches;
        tape.backward(loss);
        opt.step();
      }
      curve.push_back(total / static_cast<double>(std::max<std::size_t>(batches, 1)));
    }
    return curve;
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    encoder.collect(out, "semantic.encoder");
    return out;
  }

  TextEncoder<T> encoder;

 private:
  EmbedderConfig cfg_;
};

/// Frozen embedders used to build and query the index. Style and emotion
/// embeddings are the mean-pooled final encoder states of classifiers
/// trained on listener archetype and emotion labels.
template <typename T>
struct EmbedderTriple {
  SemanticEmbedder<T> semantic;
  TextPredictor<T> style, emotion;

  EmbeddingTriple embed(std::span<const int> ids) const {
    if (ids.empty()) throw ContractError("embed: empty text");
    NoGradScope<T> no_grad;
    auto pooled = [&](const TextPredictor<T>& m) {
      const Tensor<T> v = m.represent(ids);
      return unit_normalize(Embedding(v.data().begin(), v.data().end()));
    };
    return {semantic.embed(ids), pooled(style), pooled(emotion)};
  }

  ParamList<T> parameters() const {
    ParamList<T> out = semantic.parameters();
    style.collect(out, "style");
    emotion.collect(out, "emotion");
    return out;
  }
};

struct EmbedderReport {
  std::vector<double> semantic_curve;
  PredictorReport style, emotion;

  nlohmann::json to_json() const {
    return {{"semantic_loss", semantic_curve}, {"style", style.to_json()}, {"emotion", emotion.to_json()}};
  }
};

/// Trains the three embedders on the contexts of `train`. Style labels are
/// listener archetype ids.
template <typename T>
EmbedderTriple<T> train_embedders(const Dataset& train, const Tokenizer& tok,
                                  const std::map<std::string, int>& archetype_of, std::size_t n_archetypes,
                                  const EmbedderConfig& cfg, EmbedderReport* report = nullptr) {
  if (train.empty()) throw ContractError("train_embedders: empty training set");
  EmbedderTriple<T> e;
  Rng rng(derive_seed(cfg.seed, "embedders"));
  e.semantic = SemanticEmbedder<T>(cfg, rng);
  PredictorConfig pc;
  pc.encoder = cfg.encoder;
  pc.optim = cfg.optim;
  pc.epochs = cfg.epochs;
  pc.batch = cfg.batch;
  pc.seed = derive_seed(cfg.seed, "style");
  pc.n_classes = std::max<std::size_t>(2, n_archetypes);
  e.style = TextPredictor<T>(PredictorTask::kStyle, pc, rng);
  pc.seed = derive_seed(cfg.seed, "emotion");
  pc.n_classes = kEmotions.size();
  e.emotion = TextPredictor<T>(PredictorTask::kEmotion, pc, rng);

  std::vector<std::vector<int>> contexts, responses;
  std::vector<LabeledText> style_items, emotion_items;
  for (const auto& ex : train) {
    const auto c = tok.encode(context_text(ex));
    contexts.push_back(c);
    responses.push_back(tok.encode(ex.response));
    const auto it = archetype_of.find(ex.listener_id);
    if (it == archetype_of.end()) throw SchemaError("missing style label for listener " + ex.listener_id);
    style_items.push_back({c, {}, it->second});
    emotion_items.push_back({c, {}, ex.emotion});
  }
  EmbedderReport r;
  r.semantic_curve = e.semantic.train(contexts, responses);
  r.style = train_predictor(e.style, style_items, style_items);
  r.emotion = train_predictor(e.emotion, emotion_items, emotion_items);
  if (report) *report = r;
  return e;
}

struct IndexEntry {
  EmbeddingTriple embeds;
  std::string context, response, listener_id;
  std::size_t source = 0;  // position in the indexed dataset
};

struct RetrievalHit {
  std::size_t entry = 0;
  double score = 0;
  std::string response, listener_id;
};

class RetrievalIndex {
 public:
  RetrievalIndex() = default;

  template <typename T>
  static RetrievalIndex build(const EmbedderTriple<T>& embedders, const Dataset& data, const Tokenizer& tok) {
    if (data.empty()) throw ContractError("build_index: empty training set");
    RetrievalIndex idx;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const std::string ctx = context_text(data[i]);
      idx.entries_.push_back({embedders.embed(tok.encode(ctx)), ctx, data[i].response, data[i].listener_id, i});
    }
    return idx;
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<IndexEntry>& entries() const { return entries_; }

  /// Linear scan; ties go to the lowest entry index.
  RetrievalHit query(const EmbeddingTriple& q) const {
    if (entries_.empty()) throw ContractError("retrieve: empty index");
    RetrievalHit best;
    best.score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const double s = retrieval_score(q, entries_[i].embeds);
      if (s > best.score) {
        best.score = s;
        best.entry = i;
      }
    }
    best.response = entries_[best.entry].response;
    best.listener_id = entries_[best.entry].listener_id;
    return best;
  }

  template <typename T>
  RetrievalHit retrieve(const EmbedderTriple<T>& embedders, const Tokenizer& tok,
                        const std::string& context) const {
    return query(embedders.embed(tok.encode(context)));
  }

  /// Embeddings go to a checkpoint file; texts to a JSON sidecar.
  void save(const std::filesystem::path& checkpoint, const std::filesystem::path& sidecar) const {
    ParamList<double> tensors;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& e = entries_[i].embeds;
      const std::string base = "entry" + std::to_string(i);
      auto put = [&](const char* name, const Embedding& v) {
        tensors.push_back({base + "." + name, Tensor<double>(Shape{v.size()}, v)});
      };
      put("semantic", e.semantic);
      put("style", e.style);
      put("emotion", e.emotion);
    }
    save_checkpoint(checkpoint, tensors);
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : entries_)
      j.push_back({{"context", e.context}, {"response", e.response}, {"listener_id", e.listener_id},
                   {"source", e.source}});
    std::ofstream out(sidecar, std::ios::binary);
    if (!out) throw Error("cannot write " + sidecar.string());
    out << j.dump() << '\n';
  }

  static RetrievalIndex load(const std::filesystem::path& checkpoint, const std::filesystem::path& sidecar) {
    if (!std::filesystem::exists(sidecar)) throw DependencyError("missing retrieval index " + sidecar.string());
    std::ifstream in(sidecar, std::ios::binary);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(std::string("retrieval sidecar: ") + e.what(), 1);
    }
    std::map<std::string, std::vector<double>> vectors;
    for (auto& t : load_checkpoint(checkpoint)) vectors[t.name] = std::move(t.values);
    RetrievalIndex idx;
    for (std::size_t i = 0; i < j.size(); ++i) {
      const std::string base = "entry" + std::to_string(i);
      auto get = [&](const char* name) {
        auto it = vectors.find(base + "." + name);
        if (it == vectors.end()) throw SchemaError("retrieval index: missing " + base + "." + name, 0);
        return it->second;
      };
      IndexEntry e;
      e.embeds = {get("semantic"), get("style"), get("emotion")};
      e.context = j[i].at("context").get<std::string>();
      e.response = j[i].at("response").get<std::string>();
      e.listener_id = j[i].at("listener_id").get<std::string>();
      e.source = j[i].at("source").get<std::size_t>();
      idx.entries_.push_back(std::move(e));
    }
    return idx;
  }

 private:
  std::vector<IndexEntry> entries_;
};

}  // namespace styemp
