#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "styemp/corpus.hpp"
#include "styemp/decoding.hpp"
#include "styemp/model.hpp"
#include "styemp/optim.hpp"
#include "styemp/predictors.hpp"

namespace styemp {

/// Sum of squared trait differences.
inline double personality_margin(const PersonalityProfile& candidate, const PersonalityProfile& target) {
  const auto a = candidate.as_array(), b = target.as_array();
  double s = 0;
  for (std::size_t k = 0; k < 3; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return s;
}

struct Candidate {
  std::vector<int> tokens;  // as decoded, including <eos> when the beam finished
  std::string text;
  double logprob = 0;       // length-normalized, at decode time
  PersonalityProfile profile;
  double margin = 0;
  std::size_t generation_index = 0;
};

struct RankedCandidateSet {
  std::vector<Candidate> candidates;  // ascending margin
  PersonalityProfile target;
  double alpha = 0.001;
};

/// Stable ascending sort by margin; ties keep generation order.
inline std::vector<Candidate> rank_by_margin(std::vector<Candidate> cands) {
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Candidate& a, const Candidate& b) { return a.margin < b.margin; });
  return cands;
}

inline std::vector<int> strip_eos(std::vector<int> ids, int eos = Tokenizer::kEos) {
  if (!ids.empty() && ids.back() == eos) ids.pop_back();
  return ids;
}

/// K candidates by diverse beam search, scored against `target` with the
/// personality predictor. Candidates that decode to nothing are dropped.
template <typename T>
RankedCandidateSet generate_and_rank(const StyEmpModel<T>& model, const PredictorSuite<T>& predictors,
                                     const Tokenizer& tok, const MgpeInputs& inputs,
                                     const PersonalityProfile& target, const DecodeParams& params,
                                     double alpha) {
  NoGradScope<T> no_grad;
  const Tensor<T> prefix = model.prefix(inputs);
  const auto hyps = diverse_beam_search(model.step_model(prefix, inputs.context), params);
  RankedCandidateSet set;
  set.target = target;
  set.alpha = alpha;
  std::vector<Candidate> cands;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    Candidate c;
    c.tokens = hyps[i].tokens;
    const auto words = strip_eos(c.tokens, model.decoder.config().eos_id);
    if (words.empty()) continue;
    c.text = tok.decode(words);
    c.logprob = hyps[i].score;
    c.profile = predictors.predict_personality(words);
    c.margin = personality_margin(c.profile, target);
    c.generation_index = i;
    cands.push_back(std::move(c));
  }
  if (cands.empty()) throw Error("generate_and_rank: every candidate decoded to an empty response");
  set.candidates = rank_by_margin(std::move(cands));
  return set;
}

/// Sum over i<j of max(0, lp_j - lp_i + alpha (j - i)), summed in (i, j)
/// order. Entries must be in rank order.
template <typename T>
Tensor<T> pairwise_margin_loss(const std::vector<Tensor<T>>& ranked_logprobs, double alpha) {
  const std::size_t K = ranked_logprobs.size();
  if (K < 2) throw ContractError("pairwise_margin_loss: need at least two candidates");
  Tensor<T> total;
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = i + 1; j < K; ++j) {
      const Tensor<T> hinge =
          relu(add_scalar(sub(ranked_logprobs[j], ranked_logprobs[i]), static_cast<T>(alpha * double(j - i))));
      total = total.defined() ? add(total, hinge) : hinge;
    }
  return total;
}

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& nll, const Tensor<T>& l_p, double beta) {
  if (!std::isfinite(static_cast<double>(nll.item())) || !std::isfinite(static_cast<double>(l_p.item())))
    throw ContractError("combined_loss: non-finite input");
  return add(nll, scale(l_p, static_cast<T>(beta)));
}

struct CalibrationConfig {
  OptimizerConfig optim{.lr = 5e-5};
  std::size_t epochs = 1;
  std::size_t batch = 64;
  std::size_t examples_per_epoch = 0;  // 0 = whole training set
  double alpha = 0.001;
  double beta = 1.0;
  bool refresh_candidates = true;  // regenerate the pool every epoch
  DecodeParams decode;             // groups = beam_width = K
  std::uint64_t seed = 1;
};

struct CalibrationEpoch {
  std::size_t epoch = 0;
  double nll = 0, l_p = 0, combined = 0;
  nlohmann::json eval;  // filled by the evaluation callback

  nlohmann::json to_json() const {
    nlohmann::json j = {{"epoch", epoch}, {"nll", nll}, {"l_p", l_p}, {"combined", combined}};
    for (const char* key : {"eval_pearson_EI", "eval_pearson_T", "distinct1", "distinct2"})
      j[key] = eval.contains(key) ? eval[key] : nlohmann::json(nullptr);
    return j;
  }
};

struct CalibrationReport {
  std::vector<CalibrationEpoch> epochs;
  std::vector<double> step_nll, step_combined;

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : epochs) j.push_back(e.to_json());
    return j;
  }
};

/// Target profile per listener: predictor mean over the listener's
/// training responses.
template <typename T>
std::map<std::string, PersonalityProfile> listener_targets(const PredictorSuite<T>& predictors, const Dataset& train,
                                                          const Tokenizer& tok) {
  std::map<std::string, std::vector<std::vector<int>>> pools;
  for (const auto& ex : train) pools[ex.listener_id].push_back(tok.encode(ex.response));
  std::map<std::string, PersonalityProfile> out;
  for (const auto& [id, pool] : pools) out[id] = predictors.estimate_listener_personality(pool);
  return out;
}

/// Second-stage training of a base generator with nll + beta * L_p.
/// Candidate log-probabilities in L_p are recomputed under the current
/// weights. `on_epoch(epoch_index)` returns evaluation metrics for the
/// epoch record.
template <typename T, typename OnEpoch>
CalibrationReport calibrate(StyEmpModel<T>& model, const PredictorSuite<T>& predictors, const Tokenizer& tok,
                            const std::vector<PreparedExample>& data,
                            const std::map<std::string, PersonalityProfile>& targets, const CalibrationConfig& cfg,
                            OnEpoch&& on_epoch) {
  if (data.empty()) throw ContractError("calibrate: no training examples");
  Adam<T> opt(model.parameters(), cfg.optim);
  Rng rng(derive_seed(cfg.seed, "generator-order"));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::map<std::size_t, std::vector<std::vector<int>>> pool_cache;  // fixed pools when not refreshing
  CalibrationReport report;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    const std::size_t n = cfg.examples_per_epoch ? std::min(cfg.examples_per_epoch, order.size()) : order.size();
    CalibrationEpoch rec;
    rec.epoch = epoch;
    for (std::size_t start = 0; start < n; start += cfg.batch) {
      const std::size_t end = std::min(n, start + cfg.batch);
      const T w = T(1) / static_cast<T>(end - start);
      double batch_nll = 0, batch_combined = 0;
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t idx = order[i];
        const auto& ex = data[idx];
        auto target = targets.find(ex.listener_id);
        if (target == targets.end()) throw DependencyError("calibrate: no listener pool for " + ex.listener_id);
        std::vector<std::vector<int>> cand_tokens;
        auto cached = pool_cache.find(idx);
        if (cfg.refresh_candidates || cached == pool_cache.end()) {
          const auto ranked =
              generate_and_rank(model, predictors, tok, ex.inputs, target->second, cfg.decode, cfg.alpha);
          for (const auto& c : ranked.candidates) cand_tokens.push_back(c.tokens);
          if (!cfg.refresh_candidates) pool_cache[idx] = cand_tokens;
        } else {
          cand_tokens = cached->second;
        }
        Tape<T> tape;
        TapeScope<T> scope(tape);
        const Tensor<T> prefix = model.prefix(ex.inputs);
        const Tensor<T> nll = model.decoder.nll(prefix, ex.inputs.context, ex.response);
        Tensor<T> l_p = Tensor<T>::scalar(T(0));
        if (cand_tokens.size() >= 2) {
          std::vector<Tensor<T>> lps;
          for (const auto& c : cand_tokens) lps.push_back(model.decoder.sequence_logprob(prefix, ex.inputs.context, c));
          l_p = pairwise_margin_loss(lps, cfg.alpha);
        }
        const Tensor<T> loss = combined_loss(nll, l_p, cfg.beta);
        batch_nll += static_cast<double>(nll.item());
        batch_combined += static_cast<double>(loss.item());
        rec.nll += static_cast<double>(nll.item());
        rec.l_p += static_cast<double>(l_p.item());
        rec.combined += static_cast<double>(loss.item());
        tape.backward(scale(loss, w));
      }
      opt.step();
      report.step_nll.push_back(batch_nll / static_cast<double>(end - start));
      report.step_combined.push_back(batch_combined / static_cast<double>(end - start));
    }
    rec.nll /= static_cast<double>(n);
    rec.l_p /= static_cast<double>(n);
    rec.combined /= static_cast<double>(n);
    rec.eval = on_epoch(epoch);
    report.epochs.push_back(std::move(rec));
  }
  return report;
}

template <typename T>
CalibrationReport calibrate(StyEmpModel<T>& model, const PredictorSuite<T>& predictors, const Tokenizer& tok,
                            const std::vector<PreparedExample>& data,
                            const std::map<std::string, PersonalityProfile>& targets, const CalibrationConfig& cfg) {
  return calibrate(model, predictors, tok, data, targets, cfg, [](std::size_t) { return nlohmann::json::object(); });
}

}  // namespace styemp
