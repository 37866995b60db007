#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "styemp/generator.hpp"
#include "styemp/grad_check.hpp"
#include "styemp/mgpe.hpp"
#include "styemp/model.hpp"
#include "styemp/nnet.hpp"
#include "styemp/predictors.hpp"
#include "styemp/reinforce.hpp"
#include "styemp/retrieval.hpp"

namespace styemp {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;
  std::size_t entries = 0;
  std::string worst_param;
  bool passed = false;
};

struct GradCheckSuiteReport {
  std::vector<GradCheckResult> checks;
  double tolerance = 1e-4;
  double seconds = 0;

  bool passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return !checks.empty();
  }

  nlohmann::json to_json(bool with_time = false) const {
    nlohmann::json j;
    j["tolerance"] = tolerance;
    j["passed"] = passed();
    j["checks"] = nlohmann::json::array();
    for (const auto& c : checks)
      j["checks"].push_back({{"name", c.name},
                             {"max_rel_error", c.max_rel_error},
                             {"entries", c.entries},
                             {"worst_param", c.worst_param},
                             {"passed", c.passed}});
    if (with_time) j["seconds"] = seconds;
    return j;
  }
};

namespace detail {

inline Tensor<double> fixed_input(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  return normal_tensor<double>(shape, 1.0, rng);
}

/// Weighted sum with non-uniform fixed weights, so every output entry
/// carries a distinct gradient.
inline Tensor<double> weigh(const Tensor<double>& t) {
  std::vector<double> w(t.numel());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
  return sum(mul(t, Tensor<double>(t.shape(), w)));
}

template <typename Module>
ParamList<double> collected(const Module& m, const std::string& name) {
  ParamList<double> out;
  m.collect(out, name);
  return out;
}

}  // namespace detail

/// Finite-difference checks of every layer and of the full prefix encoder
/// plus decoder composition, in 64-bit with central differences.
inline GradCheckSuiteReport run_gradcheck_suite(double eps = 1e-5, double tolerance = 1e-4) {
  using detail::weigh;
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckSuiteReport report;
  report.tolerance = tolerance;
  auto run = [&](const std::string& name, const std::function<Tensor<double>()>& fn, const ParamList<double>& params,
                 std::size_t max_entries = 0) {
    const auto r = grad_check_report(fn, tensors_of(params), eps, max_entries);
    report.checks.push_back({name, r.max_rel_error, r.entries_checked,
                             params.empty() ? "" : params[r.worst_param].name, r.max_rel_error <= tolerance});
  };

  Rng rng(20240601);
  const std::size_t d = 8;
  const auto x = detail::fixed_input({4, d}, 1), kv = detail::fixed_input({3, d}, 2);

  {
    LinearLayer<double> layer(d, 5, rng);
    run("linear", [&] { return weigh(layer.forward(x)); }, detail::collected(layer, "linear"));
  }
  {
    LayerNorm<double> ln(d);
    auto p = detail::collected(ln, "layer_norm");
    for (auto& np : p)
      for (auto& v : np.tensor.mutable_data()) v += 0.1 * rng.normal();
    run("layer_norm", [&] { return weigh(ln.forward(x)); }, p);
  }
  {
    MultiHeadAttention<double> mha(d, 2, rng);
    run("attention.cross", [&] { return weigh(mha.forward(x, kv, kv)); }, detail::collected(mha, "attention"));
    run("attention.causal", [&] { return weigh(mha.forward(x, x, x, AttentionMask::causal())); },
        detail::collected(mha, "attention"));
  }
  {
    TransformerBlock<double> block(d, 2, 16, rng);
    run("transformer_block", [&] { return weigh(block.forward(x, AttentionMask::causal())); },
        detail::collected(block, "block"));
  }
  const std::size_t vocab = 20;
  EncoderConfig ec{vocab, d, 2, 1, 16, 32};
  {
    TextEncoder<double> enc(ec, rng);
    const std::vector<int> ids = {3, 7, 1, 9, 4};
    run("text_encoder", [&] { return weigh(mean_pool(enc.encode(ids).states)); }, detail::collected(enc, "encoder"));
  }
  {
    auto logits = detail::fixed_input({5, 9}, 3);
    const std::vector<int> targets = {0, 8, 3, 3, 5};
    run("cross_entropy", [&] { return cross_entropy(logits, targets); }, ParamList<double>{{"logits", logits}});
  }
  {
    PredictorConfig pc;
    pc.encoder = ec;
    pc.n_classes = 4;
    const LabeledText item{{3, 9, 4, 12}, {0.3, 0.7, 0.2}, 2};
    TextPredictor<double> reg(PredictorTask::kPersonality, pc, rng);
    run("predictor.regression", [&] { return reg.loss(item); }, reg.parameters());
    TextPredictor<double> cls(PredictorTask::kIntent, pc, rng);
    run("predictor.classification", [&] { return cls.loss(item); }, cls.parameters());
  }
  {
    EmbedderConfig emc;
    emc.encoder = ec;
    SemanticEmbedder<double> sem(emc, rng);
    const std::vector<std::vector<int>> c = {{3, 4, 5}, {6, 7}, {8, 9, 10, 11}};
    const std::vector<std::vector<int>> r = {{12, 13}, {14, 15, 16}, {17, 18}};
    run("semantic_embedder", [&] { return sem.batch_loss(c, r); }, sem.parameters());
  }
  MgpeConfig mc;
  mc.encoder = {vocab, d, 2, 1, 16, 32};
  mc.n1 = mc.n2 = 2;
  DecoderConfig dc;
  dc.vocab = vocab;
  dc.d = d;
  dc.heads = 2;
  dc.layers = 1;
  dc.ff = 16;
  dc.max_len = 40;
  const MgpeInputs in{{5, 6, 7}, {{8, 9}, {10, 11, 12}}, {13, 14, 2, 15}};
  const std::vector<int> resp = {9, 10, 3};
  {
    CausalDecoder<double> dec(dc, rng);
    const auto prefix = detail::fixed_input({3, d}, 4);
    ParamList<double> p = dec.parameters();
    p.push_back({"prefix", prefix});
    run("decoder.nll_with_prefix", [&] { return dec.nll(prefix, in.context, resp); }, p);
  }
  {
    Mgpe<double> mgpe(mc, rng);
    run("mgpe.prefix", [&] { return weigh(mgpe.prefix(in).prefix); }, mgpe.parameters(), 32);
  }
  {
    StyEmpModel<double> model(mc, dc, rng);
    run("mgpe+decoder.nll", [&] { return model.nll(in, resp); }, model.parameters(), 24);
    run("mgpe+decoder.queries", [&] { return model.nll(in, resp); },
        ParamList<double>{{"mgpe.q1", model.mgpe.q1}, {"mgpe.q2", model.mgpe.q2}});
    const std::vector<std::vector<int>> cands = {{9, 10, 3}, {11, 3}, {12, 13, 14}};
    run("mgpe+decoder.combined_loss",
        [&] {
          const auto prefix = model.prefix(in);
          std::vector<Tensor<double>> lps;
          for (const auto& c : cands) lps.push_back(model.decoder.sequence_logprob(prefix, in.context, c));
          return combined_loss(model.decoder.nll(prefix, in.context, resp), pairwise_margin_loss(lps, 0.5), 1.0);
        },
        model.parameters(), 12);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace styemp
