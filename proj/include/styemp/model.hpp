#pragma once

#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "styemp/corpus.hpp"
#include "styemp/decoding.hpp"
#include "styemp/generator.hpp"
#include "styemp/mgpe.hpp"
#include "styemp/optim.hpp"
#include "styemp/retrieval.hpp"

namespace styemp {

/// Prefix encoder plus decoder, the full response generator.
template <typename T>
struct StyEmpModel {
  Mgpe<T> mgpe;
  CausalDecoder<T> decoder;

  StyEmpModel() = default;
  StyEmpModel(const MgpeConfig& mc, const DecoderConfig& dc, Rng& rng) : mgpe(mc, rng), decoder(dc, rng) {
    if (mc.encoder.d != dc.d) throw ContractError("prefix encoder and decoder widths differ");
  }

  Tensor<T> prefix(const MgpeInputs& in) const { return mgpe.prefix(in).prefix; }

  Tensor<T> nll(const MgpeInputs& in, std::span<const int> response) const {
    return decoder.nll(prefix(in), in.context, response);
  }

  DecoderStepModel<T> step_model(const Tensor<T>& prefix, const std::vector<int>& context) const {
    return DecoderStepModel<T>(decoder, prefix, context);
  }

  ParamList<T> parameters() const {
    ParamList<T> out = mgpe.parameters("mgpe");
    decoder.collect(out, "decoder");
    return out;
  }
};

/// Token-level generator inputs for one dialogue example.
struct PreparedExample {
  std::size_t source = 0;     // position in its dataset
  MgpeInputs inputs;
  std::vector<int> response;  // gold response followed by <eos>
  std::string listener_id;    // listener whose pool supplied the past responses
  std::vector<std::size_t> past_sources;  // training-set positions of the past responses
};

inline EmpathySignals signals_of(const DialogueExample& ex) {
  EmpathySignals s = ex.empathy;
  s.emotion = ex.emotion;
  return s;
}

inline std::vector<int> with_eos(const Tokenizer& tok, const std::string& text) {
  auto ids = tok.encode(text);
  ids.push_back(Tokenizer::kEos);
  return ids;
}

/// Training-time inputs: the gold response (with its labels) stands in for
/// the retrieved one and past responses come from the gold listener's
/// pool, never including the gold response itself unless it is the only
/// one.
inline std::vector<PreparedExample> prepare_training(const Dataset& train, const Tokenizer& tok,
                                                     std::size_t past_n, std::uint64_t seed) {
  std::vector<PreparedExample> out;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& ex = train[i];
    PreparedExample p;
    p.source = i;
    p.listener_id = ex.listener_id;
    Rng rng(derive_seed(seed, "past", i));
    p.past_sources = sample_past_indices(train, ex.listener_id, past_n, rng, i);
    if (p.past_sources.empty()) p.past_sources = {i};
    p.inputs.context = tok.encode(context_text(ex));
    for (std::size_t k : p.past_sources) p.inputs.past.push_back(tok.encode(train[k].response));
    p.inputs.empathy = empathy_tokens(tok, tok.encode(ex.response), signals_of(ex));
    p.response = with_eos(tok, ex.response);
    out.push_back(std::move(p));
  }
  return out;
}

/// Inference-time inputs: the retrieved training response and its labels
/// form the empathy text; past responses come from the retrieved listener.
template <typename T>
PreparedExample prepare_inference(const DialogueExample& ex, std::size_t position, const Dataset& train,
                                  const RetrievalIndex& index, const EmbedderTriple<T>& embedders,
                                  const Tokenizer& tok, std::size_t past_n, std::uint64_t seed) {
  PreparedExample p;
  p.source = position;
  p.inputs.context = tok.encode(context_text(ex));
  const RetrievalHit hit = index.query(embedders.embed(p.inputs.context));
  const std::size_t src = index.entries()[hit.entry].source;
  if (src >= train.size()) throw ContractError("retrieval index does not match the training set");
  p.listener_id = hit.listener_id;
  Rng rng(derive_seed(seed, "inference-past", position));
  p.past_sources = sample_past_indices(train, hit.listener_id, past_n, rng, src);
  if (p.past_sources.empty()) p.past_sources = {src};
  for (std::size_t k : p.past_sources) p.inputs.past.push_back(tok.encode(train[k].response));
  p.inputs.empathy = empathy_tokens(tok, tok.encode(train[src].response), signals_of(train[src]));
  p.response = with_eos(tok, ex.response);
  return p;
}

struct TrainConfig {
  OptimizerConfig optim{.lr = 1e-3};
  std::size_t epochs = 10;
  std::size_t batch = 16;
  std::size_t max_steps = 0;  // 0 = no limit
  std::uint64_t seed = 1;
};

struct TrainReport {
  std::vector<double> step_loss;   // mean batch NLL per optimizer step
  std::vector<double> epoch_loss;  // mean NLL per epoch

  nlohmann::json to_json() const { return {{"epoch_loss", epoch_loss}, {"steps", step_loss.size()}}; }
};

/// Plain NLL training of the full generator. Returns per-step and
/// per-epoch loss curves. `on_epoch` may stop training early by returning
/// false.
template <typename T, typename OnEpoch>
TrainReport train_generator(StyEmpModel<T>& model, const std::vector<PreparedExample>& data, const TrainConfig& cfg,
                            OnEpoch&& on_epoch) {
  if (data.empty()) throw ContractError("train_generator: no training examples");
  Adam<T> opt(model.parameters(), cfg.optim);
  Rng rng(derive_seed(cfg.seed, "generator-order"));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  TrainReport report;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double total = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      const T w = T(1) / static_cast<T>(end - start);
      double batch_total = 0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = data[order[i]];
        Tape<T> tape;
        TapeScope<T> scope(tape);
        const Tensor<T> loss = model.nll(ex.inputs, ex.response);
        batch_total += static_cast<double>(loss.item());
        tape.backward(scale(loss, w));
      }
      opt.step();
      total += batch_total;
      report.step_loss.push_back(batch_total / static_cast<double>(end - start));
      if (cfg.max_steps && report.step_loss.size() >= cfg.max_steps) break;
    }
    report.epoch_loss.push_back(total / static_cast<double>(data.size()));
    if (cfg.max_steps && report.step_loss.size() >= cfg.max_steps) break;
    if (!on_epoch(epoch, report)) break;
  }
  return report;
}

template <typename T>
TrainReport train_generator(StyEmpModel<T>& model, const std::vector<PreparedExample>& data,
                            const TrainConfig& cfg) {
  return train_generator(model, data, cfg, [](std::size_t, const TrainReport&) { return true; });
}

/// Mean NLL over `data` without gradient tracking.
template <typename T>
double mean_nll(const StyEmpModel<T>& model, const std::vector<PreparedExample>& data) {
  if (data.empty()) throw ContractError("mean_nll: no examples");
  NoGradScope<T> no_grad;
  double total = 0;
  for (const auto& ex : data) total += static_cast<double>(model.nll(ex.inputs, ex.response).item());
  return total / static_cast<double>(data.size());
}

/// Nucleus-sampled response tokens (without <eos>).
template <typename T>
std::vector<int> generate_response(const StyEmpModel<T>& model, const MgpeInputs& in, const DecodeParams& params,
                                   Rng& rng) {
  NoGradScope<T> no_grad;
  const Tensor<T> prefix = model.prefix(in);
  auto step = model.step_model(prefix, in.context);
  auto out = nucleus_sample(step, params, rng);
  if (!out.empty() && out.back() == model.decoder.config().eos_id) out.pop_back();
  return out;
}

}  // namespace styemp
