#pragma once

// Decoding procedures over an abstract step model:
//
//   struct M {
//     using State = ...;
//     State initial() const;
//     const std::vector<double>& logits(const State&) const;  // next-token logits
//     State advance(const State&, int token) const;
//     bool can_advance(const State&) const;
//     int eos() const;
//   };

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "styemp/error.hpp"
#include "styemp/generator.hpp"
#include "styemp/random.hpp"

namespace styemp {

struct DecodeParams {
  double top_p = 0.8;
  double temperature = 0.7;
  std::size_t max_new_tokens = 32;
  std::size_t min_new_tokens = 1;  // end token suppressed before this many tokens
  std::size_t beam_width = 5;
  std::size_t groups = 5;
  double diversity = 1.0;  // penalty per earlier-group use of a token at the same step
  std::uint64_t seed = 0;

  void validate() const {
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ContractError("decode: top_p must be in (0,1]");
    if (!(temperature > 0.0)) throw ContractError("decode: temperature must be positive");
    if (max_new_tokens == 0) throw ContractError("decode: max_new_tokens must be positive");
    if (beam_width == 0) throw ContractError("decode: beam width must be positive");
    if (groups == 0 || beam_width % groups != 0)
      throw ContractError("decode: beam width " + std::to_string(beam_width) + " not divisible by " +
                          std::to_string(groups) + " groups");
    if (!(diversity >= 0.0)) throw ContractError("decode: diversity strength must be non-negative");
  }
};

struct Hypothesis {
  std::vector<int> tokens;  // ends with the end token unless cut at max_new_tokens
  double score = 0.0;       // (1/|tokens|) sum log p, under the end-token suppression in force
  bool finished = false;     // no further extension
  std::size_t group = 0;
};

inline std::vector<double> log_softmax_of(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (double v : logits) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
  return out;
}

inline std::vector<double> softmax_with_temperature(std::span<const double> logits, double temperature) {
  std::vector<double> scaled(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] / temperature;
  auto lp = log_softmax_of(scaled);
  for (auto& v : lp) v = std::exp(v);
  return lp;
}

struct NucleusEntry {
  int token;
  double prob;  // renormalized within the nucleus
};

/// Smallest prefix of the probability-sorted vocabulary (ties by token id)
/// whose mass reaches `top_p`, renormalized. Never empty.
inline std::vector<NucleusEntry> nucleus_filter(std::span<const double> probs, double top_p) {
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs[a] > probs[b]; });
  std::vector<NucleusEntry> out;
  double mass = 0;
  for (int t : order) {
    if (probs[t] <= 0.0 && !out.empty()) break;
    out.push_back({t, probs[t]});
    mass += probs[t];
    if (mass >= top_p) break;
  }
  if (mass > 0)
    for (auto& e : out) e.prob /= mass;
  else
    out.front().prob = 1.0;
  return out;
}

inline int sample_from(const std::vector<NucleusEntry>& nucleus, Rng& rng) {
  double r = rng.uniform();
  for (const auto& e : nucleus) {
    if (r < e.prob) return e.token;
    r -= e.prob;
  }
  return nucleus.back().token;
}

namespace detail {

inline void suppress_eos(std::vector<double>& logits, int eos, std::size_t generated, std::size_t min_new) {
  if (generated < min_new && eos >= 0 && static_cast<std::size_t>(eos) < logits.size())
    logits[static_cast<std::size_t>(eos)] = -std::numeric_limits<double>::infinity();
}

}  // namespace detail

/// Temperature + top-p sampling until the end token or max_new_tokens.
template <typename Model>
std::vector<int> nucleus_sample(const Model& model, const DecodeParams& params, Rng& rng) {
  params.validate();
  std::vector<int> out;
  auto state = model.initial();
  while (out.size() < params.max_new_tokens) {
    std::vector<double> logits = model.logits(state);
    detail::suppress_eos(logits, model.eos(), out.size(), params.min_new_tokens);
    const int tok = sample_from(nucleus_filter(softmax_with_temperature(logits, params.temperature), params.top_p), rng);
    out.push_back(tok);
    if (tok == model.eos() || out.size() == params.max_new_tokens || !model.can_advance(state)) break;
    state = model.advance(state, tok);
  }
  return out;
}

namespace detail {

template <typename Model>
struct Beam {
  std::vector<int> tokens;
  double logprob = 0.0;  // raw cumulative
  bool finished = false;
  typename Model::State state;

  double score() const { return tokens.empty() ? 0.0 : logprob / static_cast<double>(tokens.size()); }
};

struct Expansion {
  double key;      // selection score
  std::size_t parent;
  int token;       // -1 for a finished beam carried forward
  double logprob;  // raw cumulative after the step
};

// One beam-search step for a single group. `penalty[v]` is subtracted from
// the selection score numerator of token v.
template <typename Model>
std::vector<Beam<Model>> beam_step(const Model& model, const std::vector<Beam<Model>>& beams, std::size_t width,
                                   const DecodeParams& params, const std::vector<double>* penalty) {
  std::vector<Expansion> cand;
  for (std::size_t b = 0; b < beams.size(); ++b) {
    const auto& beam = beams[b];
    if (beam.finished) {
      cand.push_back({beam.score(), b, -1, beam.logprob});
      continue;
    }
    std::vector<double> logits = model.logits(beam.state);
    suppress_eos(logits, model.eos(), beam.tokens.size(), params.min_new_tokens);
    const auto lp = log_softmax_of(logits);
    const double len = static_cast<double>(beam.tokens.size() + 1);
    for (std::size_t v = 0; v < lp.size(); ++v) {
      if (!std::isfinite(lp[v])) continue;
      const double raw = beam.logprob + lp[v];
      const double pen = penalty ? (*penalty)[v] : 0.0;
      cand.push_back({(raw - pen) / len, b, static_cast<int>(v), raw});
    }
  }
  const std::size_t keep = std::min(width, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end(),
                    [](const Expansion& a, const Expansion& b) {
                      if (a.key != b.key) return a.key > b.key;
                      if (a.parent != b.parent) return a.parent < b.parent;
                      return a.token < b.token;
                    });
  std::vector<Beam<Model>> next;
  for (std::size_t i = 0; i < keep; ++i) {
    const auto& c = cand[i];
    const auto& parent = beams[c.parent];
    if (c.token < 0) {
      next.push_back(parent);
      continue;
    }
    Beam<Model> nb;
    nb.tokens = parent.tokens;
    nb.tokens.push_back(c.token);
    nb.logprob = c.logprob;
    nb.finished = c.token == model.eos() || nb.tokens.size() >= params.max_new_tokens ||
                  !model.can_advance(parent.state);
    nb.state = nb.finished ? parent.state : model.advance(parent.state, c.token);
    next.push_back(std::move(nb));
  }
  return next;
}

template <typename Model>
std::vector<Hypothesis> to_hypotheses(std::vector<Beam<Model>> beams, std::size_t group) {
  std::stable_sort(beams.begin(), beams.end(), [](const auto& a, const auto& b) { return a.score() > b.score(); });
  std::vector<Hypothesis> out;
  for (auto& b : beams) {
    const double score = b.score();
    out.push_back({std::move(b.tokens), score, b.finished, group});
  }
  return out;
}

}  // namespace detail

/// Beam search on length-normalized log-probability. Finished beams stay in
/// the pool and compete with extensions; search ends when every kept beam
/// is finished. Ties are broken by parent beam order, then token id.
template <typename Model>
std::vector<Hypothesis> beam_search(const Model& model, const DecodeParams& params, std::size_t width) {
  params.validate();
  if (width == 0) throw ContractError("beam search: width must be positive");
  std::vector<detail::Beam<Model>> beams(1);
  beams[0].state = model.initial();
  for (std::size_t step = 0; step < params.max_new_tokens; ++step) {
    beams = detail::beam_step(model, beams, width, params, nullptr);
    if (std::all_of(beams.begin(), beams.end(), [](const auto& b) { return b.finished; })) break;
  }
  return detail::to_hypotheses(std::move(beams), 0);
}

/// Diverse beam search: `groups` groups of beam_width/groups beams, decoded
/// group by group at every step. A group's selection score for token v is
/// lowered by diversity x (times v was chosen at this step by earlier
/// groups); returned scores are the raw length-normalized log-probabilities.
/// Output is ordered by group, then by score within the group.
template <typename Model>
std::vector<Hypothesis> diverse_beam_search(const Model& model, const DecodeParams& params) {
  params.validate();
  const std::size_t G = params.groups, width = params.beam_width / params.groups;
  std::vector<std::vector<detail::Beam<Model>>> groups(G, std::vector<detail::Beam<Model>>(1));
  const auto init = model.initial();
  for (auto& g : groups) g[0].state = init;
  for (std::size_t step = 0; step < params.max_new_tokens; ++step) {
    std::vector<double> penalty;
    bool all_done = true;
    for (std::size_t g = 0; g < G; ++g) {
      const bool done = std::all_of(groups[g].begin(), groups[g].end(), [](const auto& b) { return b.finished; });
      if (done) continue;
      if (penalty.empty()) penalty.assign(model.logits(groups[g][0].state).size(), 0.0);
      const std::size_t before = groups[g].size();
      std::vector<std::size_t> old_len(before);
      for (std::size_t b = 0; b < before; ++b) old_len[b] = groups[g][b].tokens.size();
      groups[g] = detail::beam_step(model, groups[g], width, params, params.diversity > 0 ? &penalty : nullptr);
      for (const auto& b : groups[g]) {
        if (!b.tokens.empty() && b.tokens.size() == step + 1 && params.diversity > 0)
          penalty[static_cast<std::size_t>(b.tokens.back())] += params.diversity;
        all_done = all_done && b.finished;
      }
    }
    if (all_done) break;
  }
  std::vector<Hypothesis> out;
  for (std::size_t g = 0; g < G; ++g) {
    auto hyps = detail::to_hypotheses(std::move(groups[g]), g);
    out.insert(out.end(), std::make_move_iterator(hyps.begin()), std::make_move_iterator(hyps.end()));
  }
  return out;
}

/// Step model over a CausalDecoder with a fixed prefix and context.
template <typename T>
class DecoderStepModel {
 public:
  using State = typename CausalDecoder<T>::DecodeState;

  DecoderStepModel(const CausalDecoder<T>& decoder, Tensor<T> prefix, std::vector<int> context)
      : decoder_(&decoder), prefix_(std::move(prefix)), context_(std::move(context)) {}

  State initial() const { return decoder_->start(prefix_, context_); }
  const std::vector<double>& logits(const State& s) const { return s.logits; }
  State advance(const State& s, int token) const { return decoder_->advance(s, token); }
  bool can_advance(const State& s) const { return decoder_->can_advance(s); }
  int eos() const { return decoder_->config().eos_id; }

 private:
  const CausalDecoder<T>* decoder_;
  Tensor<T> prefix_;
  std::vector<int> context_;
};

}  // namespace styemp
