#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "styemp/checkpoint.hpp"
#include "styemp/corpus.hpp"
#include "styemp/error.hpp"
#include "styemp/nnet.hpp"
#include "styemp/ops.hpp"
#include "styemp/random.hpp"
#include "styemp/tensor.hpp"

namespace styemp {

/// Which prefix components are produced: context only, or context plus the
/// past-response (P) and/or empathy (E) fusions.
enum class EncoderVariant { kC, kCP, kCE, kCEP };

inline std::string variant_name(EncoderVariant v) {
  switch (v) {
    case EncoderVariant::kC: return "C";
    case EncoderVariant::kCP: return "C+P";
    case EncoderVariant::kCE: return "C+E";
    case EncoderVariant::kCEP: return "C+E+P";
  }
  return "?";
}

inline EncoderVariant parse_variant(const std::string& s) {
  for (auto v : {EncoderVariant::kC, EncoderVariant::kCP, EncoderVariant::kCE, EncoderVariant::kCEP})
    if (variant_name(v) == s) return v;
  throw ContractError("unknown encoder variant '" + s + "' (expected C, C+P, C+E or C+E+P)");
}

inline bool uses_past(EncoderVariant v) { return v == EncoderVariant::kCP || v == EncoderVariant::kCEP; }
inline bool uses_empathy(EncoderVariant v) { return v == EncoderVariant::kCE || v == EncoderVariant::kCEP; }

struct MgpeConfig {
  EncoderConfig encoder;  // shared architecture, separate weights per input
  std::size_t n1 = 8;
  std::size_t n2 = 8;
  EncoderVariant variant = EncoderVariant::kCEP;
  int sep_id = Tokenizer::kSep;

  std::size_t prefix_rows() const {
    return n1 + n2 + (uses_past(variant) ? n1 : 0) + (uses_empathy(variant) ? n2 : 0);
  }
};

/// Token-level inputs of the prefix encoder.
struct MgpeInputs {
  std::vector<int> context;
  std::vector<std::vector<int>> past;  // oldest first
  std::vector<int> empathy;            // retrieved response ++ <sep> ++ signal tokens
};

template <typename T>
struct EncodedInputs {
  Tensor<T> C, P, E;  // P, E undefined when the variant does not use them
  std::size_t past_dropped = 0;  // whole responses removed to fit the encoder length
};

template <typename T>
struct PrefixBundle {
  Tensor<T> prefix;  // [rows, d]
  Tensor<T> q_c1, q_c2, v_pc1, v_ec2;
  std::string context_id, response_source, listener_id;
};

/// Joins past responses with <sep>, dropping whole responses from the oldest
/// side until the result fits `max_len`; a single remaining response is
/// kept whole and left to the encoder's own truncation.
inline std::vector<int> join_past(const std::vector<std::vector<int>>& past, int sep, std::size_t max_len,
                                  std::size_t* dropped = nullptr) {
  if (past.empty()) throw ContractError("past responses: empty pool");
  std::size_t first = 0, total = 0;
  for (const auto& r : past) total += r.size();
  total += past.size() - 1;
  while (total > max_len && first + 1 < past.size()) {
    total -= past[first].size() + 1;
    ++first;
  }
  std::vector<int> out;
  for (std::size_t i = first; i < past.size(); ++i) {
    if (i > first) out.push_back(sep);
    out.insert(out.end(), past[i].begin(), past[i].end());
  }
  if (dropped) *dropped = first;
  return out;
}

/// Empathy annotation text: r ++ <sep> ++ control-token rendering of e.
inline std::vector<int> empathy_tokens(const Tokenizer& tok, std::span<const int> response,
                                       const EmpathySignals& signals) {
  std::vector<int> out(response.begin(), response.end());
  out.push_back(Tokenizer::kSep);
  for (int id : tok.encode(signal_text(signals))) out.push_back(id);
  return out;
}

/// Multi-grained prefix encoder.
template <typename T>
class Mgpe {
 public:
  Mgpe() = default;
  Mgpe(const MgpeConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.n1 == 0 || cfg.n2 == 0) throw ContractError("mgpe: query lengths must be positive");
    const std::size_t d = cfg.encoder.d;
    context_encoder = TextEncoder<T>(cfg.encoder, rng);
    past_encoder = TextEncoder<T>(cfg.encoder, rng);
    empathy_encoder = TextEncoder<T>(cfg.encoder, rng);
    q1 = normal_tensor<T>({cfg.n1, d}, 0.1, rng);
    q2 = normal_tensor<T>({cfg.n2, d}, 0.1, rng);
    attn_c1 = MultiHeadAttention<T>(d, cfg.encoder.heads, rng);
    attn_c2 = MultiHeadAttention<T>(d, cfg.encoder.heads, rng);
    attn_p = MultiHeadAttention<T>(d, cfg.encoder.heads, rng);
    attn_e = MultiHeadAttention<T>(d, cfg.encoder.heads, rng);
    output = LinearLayer<T>(d, d, rng);
  }

  const MgpeConfig& config() const { return cfg_; }
  std::size_t dim() const { return cfg_.encoder.d; }

  EncodedInputs<T> encode_inputs(const MgpeInputs& in) const {
    if (in.context.empty()) throw ContractError("mgpe: empty context");
    EncodedInputs<T> out;
    out.C = context_encoder.encode(in.context).states;
    if (uses_past(cfg_.variant)) {
      const auto joined = join_past(in.past, cfg_.sep_id, cfg_.encoder.max_len, &out.past_dropped);
      out.P = past_encoder.encode(joined).states;
    }
    if (uses_empathy(cfg_.variant)) {
      if (in.empathy.empty()) throw ContractError("mgpe: empty empathy text");
      out.E = empathy_encoder.encode(in.empathy).states;
    }
    return out;
  }

  std::pair<Tensor<T>, Tensor<T>> project_context(const Tensor<T>& C) const {
    return {attn_c1.forward(q1, C, C), attn_c2.forward(q2, C, C)};
  }

  std::pair<Tensor<T>, Tensor<T>> fuse(const Tensor<T>& P, const Tensor<T>& E, const Tensor<T>& q_c1,
                                       const Tensor<T>& q_c2) const {
    return {attn_p.forward(q_c1, P, P), attn_e.forward(q_c2, E, E)};
  }

  /// Row-concatenation of the defined components in the order
  /// (Q_C1, Q_C2, V_PC1, V_EC2), then the shared output layer.
  Tensor<T> build_prefix(const Tensor<T>& q_c1, const Tensor<T>& q_c2, const Tensor<T>& v_pc1,
                         const Tensor<T>& v_ec2) const {
    const std::size_t d = dim();
    auto check = [&](const Tensor<T>& t, std::size_t rows, const char* name) {
      if (t.rank() != 2 || t.shape()[0] != rows || t.shape()[1] != d)
        throw ShapeError(std::string("build_prefix: ") + name + " must be [" + std::to_string(rows) + "," +
                         std::to_string(d) + "], got " + shape_string(t.shape()));
    };
    check(q_c1, cfg_.n1, "Q_C1");
    check(q_c2, cfg_.n2, "Q_C2");
    std::vector<Tensor<T>> parts = {q_c1, q_c2};
    if (v_pc1.defined()) {
      check(v_pc1, cfg_.n1, "V_PC1");
      parts.push_back(v_pc1);
    }
    if (v_ec2.defined()) {
      check(v_ec2, cfg_.n2, "V_EC2");
      parts.push_back(v_ec2);
    }
    return output.forward(concat(parts, 0));
  }

  PrefixBundle<T> prefix(const MgpeInputs& in) const {
    const auto enc = encode_inputs(in);
    PrefixBundle<T> b;
    std::tie(b.q_c1, b.q_c2) = project_context(enc.C);
    if (uses_past(cfg_.variant)) b.v_pc1 = attn_p.forward(b.q_c1, enc.P, enc.P);
    if (uses_empathy(cfg_.variant)) b.v_ec2 = attn_e.forward(b.q_c2, enc.E, enc.E);
    b.prefix = build_prefix(b.q_c1, b.q_c2, b.v_pc1, b.v_ec2);
    return b;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    context_encoder.collect(out, prefix + ".context_encoder");
    if (uses_past(cfg_.variant)) past_encoder.collect(out, prefix + ".past_encoder");
    if (uses_empathy(cfg_.variant)) empathy_encoder.collect(out, prefix + ".empathy_encoder");
    out.push_back({prefix + ".q1", q1});
    out.push_back({prefix + ".q2", q2});
    attn_c1.collect(out, prefix + ".attn_c1");
    attn_c2.collect(out, prefix + ".attn_c2");
    if (uses_past(cfg_.variant)) attn_p.collect(out, prefix + ".attn_p");
    if (uses_empathy(cfg_.variant)) attn_e.collect(out, prefix + ".attn_e");
    output.collect(out, prefix + ".output");
  }

  ParamList<T> parameters(const std::string& prefix = "mgpe") const {
    ParamList<T> out;
    collect(out, prefix);
    return out;
  }

  TextEncoder<T> context_encoder, past_encoder, empathy_encoder;
  Tensor<T> q1, q2;
  MultiHeadAttention<T> attn_c1, attn_c2, attn_p, attn_e;
  LinearLayer<T> output;

 private:
  MgpeConfig cfg_;
};

}  // namespace styemp
