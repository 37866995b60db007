#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "styemp/checkpoint.hpp"
#include "styemp/error.hpp"
#include "styemp/ops.hpp"
#include "styemp/random.hpp"
#include "styemp/tensor.hpp"

namespace styemp {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(data), true);
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(rng.normal(0.0, stddev));
  return Tensor<T>(std::move(shape), std::move(data), true);
}

template <typename T>
class LinearLayer {
 public:
  LinearLayer() = default;
  LinearLayer(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = uniform_tensor<T>({in, out}, bound, rng);
    bias = uniform_tensor<T>({out}, bound, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return add(matmul(x, weight), bias); }

  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }

  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t d) : gain(Shape{d}, T(1), true), bias(Shape{d}, T(0), true) {}

  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }

  Tensor<T> gain;
  Tensor<T> bias;
};

enum class MaskMode { kNone, kCausal, kPadding };

/// Which keys each query row may attend to. For causal masks, query row i
/// sits at absolute position `query_offset + i` and sees keys 0..that
/// position. Padding masks hide keys whose `key_valid` entry is false.
struct AttentionMask {
  MaskMode mode = MaskMode::kNone;
  std::vector<bool> key_valid;
  std::size_t query_offset = 0;

  static AttentionMask none() { return {}; }
  static AttentionMask causal(std::size_t offset = 0) { return {MaskMode::kCausal, {}, offset}; }
  static AttentionMask padding(std::vector<bool> valid) { return {MaskMode::kPadding, std::move(valid), 0}; }

  bool visible(std::size_t query, std::size_t key) const {
    switch (mode) {
      case MaskMode::kNone:
        return true;
      case MaskMode::kCausal:
        return key <= query_offset + query;
      case MaskMode::kPadding:
        return key < key_valid.size() && key_valid[key];
    }
    return true;
  }
};

/// Additive mask [q, m]: 0 where visible, -inf elsewhere. Throws if some
/// query row can see nothing.
template <typename T>
Tensor<T> mask_bias(const AttentionMask& mask, std::size_t q, std::size_t m) {
  std::vector<T> data(q * m, T(0));
  for (std::size_t i = 0; i < q; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < m; ++j) {
      if (mask.visible(i, j))
        any = true;
      else
        data[i * m + j] = -std::numeric_limits<T>::infinity();
    }
    if (!any) throw ContractError("attention: every key position is masked for query row " + std::to_string(i));
  }
  return Tensor<T>(Shape{q, m}, std::move(data));
}

/// Per-head keys/values accumulated during incremental self-attention.
template <typename T>
struct KvCache {
  std::vector<Tensor<T>> keys;    // per head [len, d_head]
  std::vector<Tensor<T>> values;  // per head [len, d_head]
  std::size_t length = 0;
};

template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t d, std::size_t heads, Rng& rng) : d_(d), heads_(heads) {
    if (heads == 0 || d % heads != 0)
      throw ContractError("attention: model dimension " + std::to_string(d) + " not divisible by " +
                          std::to_string(heads) + " heads");
    const std::size_t dh = d / heads;
    for (std::size_t h = 0; h < heads; ++h) {
      query.emplace_back(d, dh, rng);
      key.emplace_back(d, dh, rng);
      value.emplace_back(d, dh, rng);
    }
    output = LinearLayer<T>(d, d, rng);
  }

  std::size_t heads() const { return heads_; }
  std::size_t dim() const { return d_; }

  /// Scaled dot-product attention per head, heads concatenated and projected.
  /// queries [q,d], keys/values [m,d] -> [q,d]. If `weights_out` is given it
  /// receives the per-head attention matrices [q,m].
  Tensor<T> forward(const Tensor<T>& queries, const Tensor<T>& keys, const Tensor<T>& values,
                    const AttentionMask& mask = {}, std::vector<Tensor<T>>* weights_out = nullptr) const {
    check_input(queries, "queries");
    check_input(keys, "keys");
    check_input(values, "values");
    if (keys.shape()[0] != values.shape()[0])
      throw ShapeError("attention: keys " + shape_string(keys.shape()) + " and values " +
                       shape_string(values.shape()) + " differ in length");
    const Tensor<T> bias = mask_bias<T>(mask, queries.shape()[0], keys.shape()[0]);
    std::vector<Tensor<T>> heads;
    heads.reserve(heads_);
    for (std::size_t h = 0; h < heads_; ++h)
      heads.push_back(attend(h, queries, key[h].forward(keys), value[h].forward(values), bias, weights_out));
    return output.forward(concat(heads, 1));
  }

  /// Self-attention over `x` [n,d] appended to the cached positions, with a
  /// causal mask. With an empty cache this equals forward(x, x, x, causal).
  Tensor<T> forward_cached(const Tensor<T>& x, KvCache<T>& cache) const {
    check_input(x, "x");
    if (cache.keys.empty()) {
      cache.keys.resize(heads_);
      cache.values.resize(heads_);
    }
    const std::size_t n = x.shape()[0];
    const Tensor<T> bias = mask_bias<T>(AttentionMask::causal(cache.length), n, cache.length + n);
    std::vector<Tensor<T>> heads;
    heads.reserve(heads_);
    for (std::size_t h = 0; h < heads_; ++h) {
      Tensor<T> k = key[h].forward(x);
      Tensor<T> v = value[h].forward(x);
      if (cache.length > 0) {
        k = concat({cache.keys[h], k}, 0);
        v = concat({cache.values[h], v}, 0);
      }
      cache.keys[h] = k;
      cache.values[h] = v;
      heads.push_back(attend(h, x, k, v, bias, nullptr));
    }
    cache.length += n;
    return output.forward(concat(heads, 1));
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t h = 0; h < heads_; ++h) {
      const std::string p = prefix + ".head" + std::to_string(h);
      query[h].collect(out, p + ".query");
      key[h].collect(out, p + ".key");
      value[h].collect(out, p + ".value");
    }
    output.collect(out, prefix + ".output");
  }

  std::vector<LinearLayer<T>> query, key, value;
  LinearLayer<T> output;

 private:
  void check_input(const Tensor<T>& t, const char* what) const {
    if (t.rank() != 2 || t.shape()[1] != d_)
      throw ShapeError(std::string("attention: ") + what + " must be [n," + std::to_string(d_) + "], got " +
                       shape_string(t.shape()));
  }

  Tensor<T> attend(std::size_t h, const Tensor<T>& queries, const Tensor<T>& k, const Tensor<T>& v,
                   const Tensor<T>& bias, std::vector<Tensor<T>>* weights_out) const {
    const T inv_scale = T(1) / std::sqrt(static_cast<T>(d_ / heads_));
    const Tensor<T> q = scale(query[h].forward(queries), inv_scale);
    const Tensor<T> weights = softmax(add(matmul(q, transpose(k)), bias), 1);
    if (weights_out) weights_out->push_back(weights);
    return matmul(weights, v);
  }

  std::size_t d_ = 0;
  std::size_t heads_ = 0;
};

/// Pre-norm residual block: x + attn(ln(x)), then x + ff(ln(x)).
template <typename T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(std::size_t d, std::size_t heads, std::size_t ff, Rng& rng)
      : norm1(d), attention(d, heads, rng), norm2(d), ff_in(d, ff, rng), ff_out(ff, d, rng) {}

  Tensor<T> forward(const Tensor<T>& x, const AttentionMask& mask = {}) const {
    const Tensor<T> h = norm1.forward(x);
    return feed_forward(add(x, attention.forward(h, h, h, mask)));
  }

  Tensor<T> forward_cached(const Tensor<T>& x, KvCache<T>& cache) const {
    return feed_forward(add(x, attention.forward_cached(norm1.forward(x), cache)));
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    norm1.collect(out, prefix + ".norm1");
    attention.collect(out, prefix + ".attention");
    norm2.collect(out, prefix + ".norm2");
    ff_in.collect(out, prefix + ".ff_in");
    ff_out.collect(out, prefix + ".ff_out");
  }

  LayerNorm<T> norm1;
  MultiHeadAttention<T> attention;
  LayerNorm<T> norm2;
  LinearLayer<T> ff_in;
  LinearLayer<T> ff_out;

 private:
  Tensor<T> feed_forward(const Tensor<T>& x) const {
    return add(x, ff_out.forward(relu(ff_in.forward(norm2.forward(x)))));
  }
};

struct EncoderConfig {
  std::size_t vocab = 0;
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t ff = 256;
  std::size_t max_len = 64;
};

template <typename T>
struct EncoderOutput {
  Tensor<T> states;  // [len, d]
  bool truncated = false;
  std::size_t dropped = 0;  // leading tokens removed by truncation
};

/// Bidirectional transformer encoder over token ids.
template <typename T>
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.vocab == 0) throw ContractError("encoder: vocabulary size must be positive");
    token_embedding = normal_tensor<T>({cfg.vocab, cfg.d}, 0.1, rng);
    position_embedding = normal_tensor<T>({cfg.max_len, cfg.d}, 0.1, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l) blocks.emplace_back(cfg.d, cfg.heads, cfg.ff, rng);
    final_norm = LayerNorm<T>(cfg.d);
  }

  const EncoderConfig& config() const { return cfg_; }

  /// Contextual states for `ids`. Inputs longer than max_len keep their most
  /// recent max_len tokens and report the truncation.
  EncoderOutput<T> encode(std::span<const int> ids) const {
    if (ids.empty()) throw ContractError("encode: empty token sequence");
    for (int id : ids)
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab)
        throw ContractError("encode: token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(cfg_.vocab));
    EncoderOutput<T> out;
    if (ids.size() > cfg_.max_len) {
      out.truncated = true;
      out.dropped = ids.size() - cfg_.max_len;
      ids = ids.subspan(out.dropped);
    }
    Tensor<T> x = add(gather_rows(token_embedding, ids), slice(position_embedding, 0, 0, ids.size()));
    for (const auto& block : blocks) x = block.forward(x);
    out.states = final_norm.forward(x);
    return out;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".token_embedding", token_embedding});
    out.push_back({prefix + ".position_embedding", position_embedding});
    for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].collect(out, prefix + ".block" + std::to_string(l));
    final_norm.collect(out, prefix + ".final_norm");
  }

  Tensor<T> token_embedding;
  Tensor<T> position_embedding;
  std::vector<TransformerBlock<T>> blocks;
  LayerNorm<T> final_norm;

 private:
  EncoderConfig cfg_;
};

/// Mean over rows [n,d] -> [1,d], restricted to rows flagged valid (all rows
/// when `valid` is empty).
template <typename T>
Tensor<T> mean_pool(const Tensor<T>& states, const std::vector<bool>& valid = {}) {
  const std::size_t n = states.shape()[0];
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) count += valid.empty() || valid[i];
  if (count == 0) throw ContractError("mean_pool: no valid positions");
  std::vector<T> w(n, T(0));
  for (std::size_t i = 0; i < n; ++i)
    if (valid.empty() || valid[i]) w[i] = T(1) / static_cast<T>(count);
  return matmul(Tensor<T>(Shape{1, n}, std::move(w)), states);
}

/// Mean of -log softmax(logits)[target] over positions not flagged in
/// `ignore` (all positions when `ignore` is empty).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets, const std::vector<bool>& ignore = {}) {
  if (logits.rank() != 2 || logits.shape()[0] != targets.size())
    throw ShapeError("cross_entropy: logits " + shape_string(logits.shape()) + " for " +
                     std::to_string(targets.size()) + " targets");
  if (!ignore.empty() && ignore.size() != targets.size())
    throw ShapeError("cross_entropy: ignore mask length " + std::to_string(ignore.size()) + " != " +
                     std::to_string(targets.size()));
  std::size_t count = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) count += ignore.empty() || !ignore[i];
  if (count == 0) throw ContractError("cross_entropy: every position is masked");
  std::vector<int> safe(targets.begin(), targets.end());
  std::vector<T> w(targets.size(), T(0));
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (ignore.empty() || !ignore[i])
      w[i] = T(-1) / static_cast<T>(count);
    else
      safe[i] = 0;
  }
  const Tensor<T> picked = pick(log_softmax(logits, 1), std::span<const int>(safe));
  return sum(mul(picked, Tensor<T>(Shape{targets.size()}, std::move(w))));
}

}  // namespace styemp
