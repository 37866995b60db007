#pragma once

#include <span>
#include <string>
#include <vector>

#include "styemp/checkpoint.hpp"
#include "styemp/error.hpp"
#include "styemp/nnet.hpp"
#include "styemp/ops.hpp"
#include "styemp/random.hpp"
#include "styemp/tensor.hpp"

namespace styemp {

struct DecoderConfig {
  std::size_t vocab = 0;
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t ff = 256;
  std::size_t max_len = 128;  // prefix rows + context + separator + response
  int sep_id = 2;
  int eos_id = 3;
};

/// Causal transformer language model. A prefix block [p,d] may be prepended
/// to the input states; it occupies positions 0..p-1 and is never scored.
/// The token stream is context ++ <sep> ++ response.
template <typename T>
class CausalDecoder {
 public:
  CausalDecoder() = default;
  CausalDecoder(const DecoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.vocab == 0) throw ContractError("decoder: vocabulary size must be positive");
    token_embedding = normal_tensor<T>({cfg.vocab, cfg.d}, 0.1, rng);
    position_embedding = normal_tensor<T>({cfg.max_len, cfg.d}, 0.1, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l) blocks.emplace_back(cfg.d, cfg.heads, cfg.ff, rng);
    final_norm = LayerNorm<T>(cfg.d);
    output = LinearLayer<T>(cfg.d, cfg.vocab, rng);
  }

  const DecoderConfig& config() const { return cfg_; }

  /// Logits [len, vocab] for every token position of `ids`, conditioned on
  /// the prefix rows (undefined or zero-row prefix means none).
  Tensor<T> forward_with_prefix(const Tensor<T>& prefix, std::span<const int> ids) const {
    const std::size_t p = prefix_rows(prefix);
    return output.forward(slice(hidden(prefix, ids), 0, p, p + ids.size()));
  }

  /// Logits predicting each response token: rows at the separator and at
  /// response[0..n-2].
  Tensor<T> response_logits(const Tensor<T>& prefix, std::span<const int> context,
                            std::span<const int> response) const {
    if (response.empty()) throw ContractError("decoder: empty response");
    const auto ids = join(context, response);
    const std::size_t first = prefix_rows(prefix) + context.size();
    return output.forward(slice(hidden(prefix, ids), 0, first, first + response.size()));
  }

  /// Mean token cross-entropy of the response; context and prefix carry no loss.
  Tensor<T> nll(const Tensor<T>& prefix, std::span<const int> context, std::span<const int> response) const {
    return cross_entropy(response_logits(prefix, context, response), response);
  }

  /// Length-normalized log-probability of the response, (1/|r|) sum log p.
  Tensor<T> sequence_logprob(const Tensor<T>& prefix, std::span<const int> context,
                             std::span<const int> response) const {
    return neg(nll(prefix, context, response));
  }

  /// Incremental decoding state after the separator.
  struct DecodeState {
    std::vector<KvCache<T>> caches;
    std::vector<double> logits;  // next-token logits
    std::size_t position = 0;    // next absolute position
  };

  DecodeState start(const Tensor<T>& prefix, std::span<const int> context) const {
    NoGradScope<T> no_grad;
    std::vector<int> ids(context.begin(), context.end());
    ids.push_back(cfg_.sep_id);
    const std::size_t p = prefix_rows(prefix);
    check_length(p + ids.size());
    DecodeState s;
    s.caches.resize(blocks.size());
    s.position = p + ids.size();
    Tensor<T> x = input_states(prefix, ids);
    for (std::size_t l = 0; l < blocks.size(); ++l) x = blocks[l].forward_cached(x, s.caches[l]);
    s.logits = last_logits(x);
    return s;
  }

  /// State after appending `token`; the input state is left untouched.
  DecodeState advance(const DecodeState& state, int token) const {
    NoGradScope<T> no_grad;
    check_token(token);
    check_length(state.position + 1);
    DecodeState s;
    s.caches = state.caches;
    s.position = state.position + 1;
    const int id[] = {token};
    Tensor<T> x = add(gather_rows(token_embedding, std::span<const int>(id)),
                      slice(position_embedding, 0, state.position, state.position + 1));
    for (std::size_t l = 0; l < blocks.size(); ++l) x = blocks[l].forward_cached(x, s.caches[l]);
    s.logits = last_logits(x);
    return s;
  }

  bool can_advance(const DecodeState& s) const { return s.position < cfg_.max_len; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".token_embedding", token_embedding});
    out.push_back({prefix + ".position_embedding", position_embedding});
    for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].collect(out, prefix + ".block" + std::to_string(l));
    final_norm.collect(out, prefix + ".final_norm");
    output.collect(out, prefix + ".output");
  }

  ParamList<T> parameters(const std::string& prefix = "decoder") const {
    ParamList<T> out;
    collect(out, prefix);
    return out;
  }

  Tensor<T> token_embedding;
  Tensor<T> position_embedding;
  std::vector<TransformerBlock<T>> blocks;
  LayerNorm<T> final_norm;
  LinearLayer<T> output;

 private:
  static std::size_t prefix_rows(const Tensor<T>& prefix) {
    return prefix.defined() && prefix.numel() > 0 ? prefix.shape()[0] : 0;
  }

  std::vector<int> join(std::span<const int> context, std::span<const int> response) const {
    std::vector<int> ids(context.begin(), context.end());
    ids.push_back(cfg_.sep_id);
    ids.insert(ids.end(), response.begin(), response.end());
    return ids;
  }

  void check_token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab)
      throw ContractError("decoder: token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(cfg_.vocab));
  }

  void check_length(std::size_t total) const {
    if (total > cfg_.max_len)
      throw ContractError("decoder: combined length " + std::to_string(total) + " exceeds max_len " +
                          std::to_string(cfg_.max_len));
  }

  Tensor<T> input_states(const Tensor<T>& prefix, std::span<const int> ids) const {
    const std::size_t p = prefix_rows(prefix);
    if (p > 0 && (prefix.rank() != 2 || prefix.shape()[1] != cfg_.d))
      throw ShapeError("decoder: prefix must be [p," + std::to_string(cfg_.d) + "], got " +
                       shape_string(prefix.shape()));
    if (ids.empty()) throw ContractError("decoder: empty token sequence");
    for (int id : ids) check_token(id);
    check_length(p + ids.size());
    Tensor<T> tokens = gather_rows(token_embedding, ids);
    if (p == 0) return add(tokens, slice(position_embedding, 0, 0, ids.size()));
    return add(concat({prefix, tokens}, 0), slice(position_embedding, 0, 0, p + ids.size()));
  }

  Tensor<T> hidden(const Tensor<T>& prefix, std::span<const int> ids) const {
    Tensor<T> x = input_states(prefix, ids);
    for (const auto& block : blocks) x = block.forward(x, AttentionMask::causal());
    return final_norm.forward(x);
  }

  std::vector<double> last_logits(const Tensor<T>& x) const {
    const std::size_t n = x.shape()[0];
    const Tensor<T> z = output.forward(final_norm.forward(slice(x, 0, n - 1, n)));
    return std::vector<double>(z.data().begin(), z.data().end());
  }

  DecoderConfig cfg_;
};

}  // namespace styemp
