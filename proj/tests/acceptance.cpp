// Acceptance suite: one PASS/FAIL line per criterion.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "styemp/pipeline.hpp"

#ifndef STYEMP_CLI_PATH
#error "STYEMP_CLI_PATH must name the CLI executable"
#endif

using namespace styemp;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

Outcome criterion_gradients() {
  const auto r = run_gradcheck_suite(1e-5, 1e-4);
  double worst = 0;
  std::string worst_name;
  for (const auto& c : r.checks)
    if (c.max_rel_error >= worst) worst = c.max_rel_error, worst_name = c.name;
  const bool ok = r.passed() && r.seconds <= 120.0;
  return {ok, std::to_string(r.checks.size()) + " checks, worst " + sci(worst) + " (" + worst_name + "), " +
                  fmt(r.seconds, 1) + "s"};
}

// ---------------------------------------------------------------------------
// 2. Margin loss oracles

double brute_force_margin_loss(const std::vector<double>& lp, double alpha) {
  double total = 0;
  for (std::size_t i = 0; i < lp.size(); ++i)
    for (std::size_t j = i + 1; j < lp.size(); ++j) total += std::max(0.0, lp[j] - lp[i] + alpha * double(j - i));
  return total;
}

Outcome criterion_loss_oracles() {
  Rng rng(2718);
  std::size_t exact = 0, fd_checked = 0;
  double worst_fd = 0, worst_margin = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t K = 2 + rng.index(5);
    const double alpha = rng.uniform(0.0, 0.05);
    std::vector<double> lp(K);
    for (auto& v : lp) v = rng.uniform(-3.0, 0.0);
    std::vector<Tensor<double>> leaves;
    for (double v : lp) leaves.push_back(Tensor<double>::scalar(v, true));
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const auto loss = pairwise_margin_loss(leaves, alpha);
    exact += loss.item() == brute_force_margin_loss(lp, alpha);
    tape.backward(loss);
    // Central differences away from hinge kinks.
    const double eps = 1e-6;
    bool near_kink = false;
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = i + 1; j < K; ++j)
        near_kink |= std::abs(lp[j] - lp[i] + alpha * double(j - i)) < 10 * eps;
    if (near_kink) continue;
    ++fd_checked;
    for (std::size_t k = 0; k < K; ++k) {
      auto up = lp, down = lp;
      up[k] += eps;
      down[k] -= eps;
      const double fd = (brute_force_margin_loss(up, alpha) - brute_force_margin_loss(down, alpha)) / (2 * eps);
      const double g = leaves[k].has_grad() ? leaves[k].grad()[0] : 0.0;
      worst_fd = std::max(worst_fd, std::abs(fd - g));
    }
  }
  for (int trial = 0; trial < 1000; ++trial) {
    const PersonalityProfile a{rng.uniform(-1, 1), rng.uniform(0, 1), rng.uniform(0, 1)};
    const PersonalityProfile b{rng.uniform(-1, 1), rng.uniform(0, 1), rng.uniform(0, 1)};
    const long double hand = (static_cast<long double>(a.extraversion) - b.extraversion) * (a.extraversion - b.extraversion) +
                             (static_cast<long double>(a.introverted) - b.introverted) * (a.introverted - b.introverted) +
                             (static_cast<long double>(a.thinking) - b.thinking) * (a.thinking - b.thinking);
    worst_margin = std::max(worst_margin, std::abs(personality_margin(a, b) - static_cast<double>(hand)));
  }
  worst_margin = std::max(worst_margin, std::abs(personality_margin({0.5, 0.4, 0.3}, {0.3, 0.5, 0.3}) - 0.05));
  const bool ok = exact == 1000 && fd_checked > 900 && worst_fd <= 1e-6 && worst_margin <= 1e-12;
  return {ok, std::to_string(exact) + "/1000 exact, grad-vs-FD max " + sci(worst_fd) + " over " +
                  std::to_string(fd_checked) + " instances, margin max " + sci(worst_margin)};
}

// ---------------------------------------------------------------------------
// 3 and 4. Calibration and ablation trends (shared runs)

struct SeedResult {
  double base_ei = 0, calib_ei = 0, control_ei = 0;
  double base_gold = 0, calib_gold = 0;
  std::map<std::string, EvaluationReport> variants;  // no reinforcement
  double seconds = 0;
};

ExperimentConfig trend_config(std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  c.corpus.seed = 100 + seed;
  c.predictor_corpus.seed = 200 + seed;
  return c;
}

double value(const std::optional<double>& v) { return v ? *v : 0.0; }

double empathy_agreement(const EvaluationReport& r) { return (r.eacc + r.ip_ex_acc + r.intent_acc) / 3.0; }

std::vector<SeedResult>& trend_runs() {
  static std::vector<SeedResult> results = [] {
    std::vector<SeedResult> out;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const auto t0 = Clock::now();
      SeedResult s;
      const ExperimentConfig cfg = trend_config(seed);
      const Workspace ws = build_workspace(cfg);
      for (auto v : {EncoderVariant::kC, EncoderVariant::kCE}) {
        Workspace view = ws;
        view.cfg.variant = v;
        auto m = make_model<float>(view.cfg, view.tok);
        train_generator(m, view.train_examples, base_train_config(view.cfg));
        s.variants[variant_name(v)] = evaluate_model(m, view, variant_name(v));
      }
      auto base = make_model<float>(cfg, ws.tok);
      train_generator(base, ws.train_examples, base_train_config(cfg));
      const auto base_report = evaluate_model(base, ws, "C+E+P");
      s.variants["C+E+P"] = base_report;
      auto calibrated = clone_model(base, cfg, ws.tok);
      calibrate(calibrated, ws.predictors, ws.tok, ws.train_examples, ws.targets, calibration_config(cfg));
      const auto calib_report = evaluate_model(calibrated, ws, "C+E+P + PR");
      // Same schedule with the ranking term switched off.
      Workspace control_ws = ws;
      control_ws.cfg.beta = 0;
      auto control = clone_model(base, cfg, ws.tok);
      calibrate(control, ws.predictors, ws.tok, ws.train_examples, ws.targets, calibration_config(control_ws.cfg));
      const auto control_report = evaluate_model(control, ws, "control");
      s.base_ei = value(base_report.pearson_EI);
      s.calib_ei = value(calib_report.pearson_EI);
      s.control_ei = value(control_report.pearson_EI);
      s.base_gold = value(base_report.gold_pearson_EI);
      s.calib_gold = value(calib_report.gold_pearson_EI);
      s.seconds = seconds_since(t0);
      std::cout << "  seed " << seed << ": E&I base " << fmt(s.base_ei) << " calibrated " << fmt(s.calib_ei)
                << " (beta=0 control " << fmt(s.control_ei) << "), gold E&I " << fmt(s.base_gold) << " -> "
                << fmt(s.calib_gold) << ", " << fmt(s.seconds, 0) << "s" << std::endl;
      for (const auto& [name, r] : s.variants)
        std::cout << "    " << name << ": E&I " << fmt(value(r.pearson_EI)) << " empathy agreement "
                  << fmt(empathy_agreement(r)) << std::endl;
      out.push_back(std::move(s));
    }
    return out;
  }();
  return results;
}

Outcome criterion_calibration() {
  const auto t0 = Clock::now();
  const auto& runs = trend_runs();
  std::vector<double> d_ei, d_gold, d_control;
  double total = 0;
  for (const auto& s : runs) {
    d_ei.push_back(s.calib_ei - s.base_ei);
    d_gold.push_back(s.calib_gold - s.base_gold);
    d_control.push_back(s.control_ei - s.base_ei);
    total += s.seconds;
  }
  (void)t0;
  const double m_ei = median3(d_ei), m_gold = median3(d_gold);
  const bool ok = m_ei > 0 && m_gold > 0 && total <= 1800;
  return {ok, "median E&I change " + fmt(m_ei) + ", median gold change " + fmt(m_gold) +
                  " (beta=0 control " + fmt(median3(d_control)) + "), " + fmt(total, 0) + "s incl. ablation bases"};
}

Outcome criterion_ablation() {
  const auto& runs = trend_runs();
  std::vector<double> c_ei, cep_ei, c_emp, ce_emp;
  for (const auto& s : runs) {
    c_ei.push_back(value(s.variants.at("C").pearson_EI));
    cep_ei.push_back(value(s.variants.at("C+E+P").pearson_EI));
    c_emp.push_back(empathy_agreement(s.variants.at("C")));
    ce_emp.push_back(empathy_agreement(s.variants.at("C+E")));
  }
  const bool ok = median3(cep_ei) >= median3(c_ei) && median3(ce_emp) >= median3(c_emp);
  return {ok, "median E&I C+E+P " + fmt(median3(cep_ei)) + " vs C " + fmt(median3(c_ei)) +
                  "; median empathy agreement C+E " + fmt(median3(ce_emp)) + " vs C " + fmt(median3(c_emp))};
}

// ---------------------------------------------------------------------------
// 5. Decoding

// Records every (distribution, emitted token) pair of a decoding run.
template <typename Inner>
struct Recorder {
  using State = typename Inner::State;
  const Inner* inner;
  mutable std::vector<std::pair<std::vector<double>, int>>* log;
  State initial() const { return inner->initial(); }
  const std::vector<double>& logits(const State& s) const { return inner->logits(s); }
  State advance(const State& s, int t) const {
    log->emplace_back(inner->logits(s), t);
    return inner->advance(s, t);
  }
  bool can_advance(const State& s) const { return inner->can_advance(s); }
  int eos() const { return inner->eos(); }
};

// Smallest probability-sorted prefix reaching top_p, ties by token id.
std::set<int> oracle_nucleus(const std::vector<double>& logits, double temperature, double top_p) {
  std::vector<long double> p(logits.size());
  long double mx = *std::max_element(logits.begin(), logits.end()), z = 0;
  for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp((logits[i] - mx) / temperature);
  std::vector<int> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p[a] > p[b]; });
  std::set<int> out;
  long double mass = 0;
  for (int t : order) {
    out.insert(t);
    mass += p[t] / z;
    if (mass >= top_p) break;
  }
  return out;
}

Outcome criterion_decoding() {
  std::size_t identical = 0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    Rng rng(derive_seed(5, "toy-decoder", trial));
    DecoderConfig dc;
    dc.vocab = 6 + rng.index(6);
    dc.d = 8;
    dc.heads = 2;
    dc.layers = 1;
    dc.ff = 16;
    dc.max_len = 24;
    CausalDecoder<double> dec(dc, rng);
    const auto prefix = normal_tensor<double>({2, dc.d}, 1.0, rng);
    std::vector<int> context = {4, 5};
    const DecoderStepModel<double> model(dec, prefix, context);
    DecodeParams p;
    p.max_new_tokens = 6;
    p.beam_width = 1 + rng.index(5);
    p.groups = 1;
    p.diversity = 0.0;
    const auto dbs = diverse_beam_search(model, p);
    const auto bs = beam_search(model, p, p.beam_width);
    bool same = dbs.size() == bs.size();
    for (std::size_t i = 0; same && i < bs.size(); ++i) same = dbs[i].tokens == bs[i].tokens && dbs[i].score == bs[i].score;
    identical += same;
  }

  // Nucleus sampling through a random decoder until 10,000 tokens are drawn.
  std::size_t steps = 0, outside = 0;
  Rng rng(77);
  DecoderConfig dc;
  dc.vocab = 12;
  dc.d = 8;
  dc.heads = 2;
  dc.layers = 1;
  dc.ff = 16;
  dc.max_len = 40;
  CausalDecoder<double> dec(dc, rng);
  const DecodeParams defaults;
  for (std::uint64_t run = 0; steps < 10000; ++run) {
    const auto prefix = normal_tensor<double>({2, dc.d}, 2.0, rng);
    const DecoderStepModel<double> inner(dec, prefix, {4, 5, 6});
    std::vector<std::pair<std::vector<double>, int>> log;
    const Recorder<DecoderStepModel<double>> rec{&inner, &log};
    DecodeParams p = defaults;
    p.min_new_tokens = 0;
    p.max_new_tokens = 30;
    Rng sampler(derive_seed(9, "nucleus", run));
    nucleus_sample(rec, p, sampler);
    for (const auto& [logits, tok] : log) {
      if (steps == 10000) break;
      ++steps;
      outside += oracle_nucleus(logits, p.temperature, p.top_p).count(tok) == 0;
    }
  }
  const ExperimentConfig ec;
  const bool wired = defaults.top_p == 0.8 && defaults.temperature == 0.7 && ec.decode().top_p == 0.8 &&
                     ec.decode().temperature == 0.7;
  const bool ok = identical == 100 && outside == 0 && wired;
  return {ok, std::to_string(identical) + "/100 decoders identical, " + std::to_string(outside) + " of " +
                  std::to_string(steps) + " sampled tokens outside nucleus, defaults top_p=" + fmt(defaults.top_p, 2) +
                  " T=" + fmt(defaults.temperature, 2)};
}

// ---------------------------------------------------------------------------
// 6. Overfit sanity

Outcome criterion_overfit() {
  ExperimentConfig cfg;
  Tokenizer tok;
  CorpusConfig cc;
  cc.n_listeners = 4;
  cc.convs_per_listener = 10;
  const auto corpus = generate_synthetic_corpus(cc);
  Dataset small(corpus.train.begin(), corpus.train.begin() + 32);
  const auto data = prepare_training(small, tok, cfg.past_pool_n, 17);
  auto model = make_model<float>(cfg, tok);
  TrainConfig tc;
  tc.optim.lr = 1e-3;
  tc.batch = 8;
  tc.epochs = 1000;
  tc.max_steps = 2000;
  tc.seed = 17;
  double nll = 1e9;
  std::size_t steps = 0;
  train_generator(model, data, tc, [&](std::size_t, const TrainReport& r) {
    steps = r.step_loss.size();
    if (steps % 40 != 0) return true;
    nll = mean_nll(model, data);
    return nll >= 0.1;
  });
  nll = mean_nll(model, data);
  const bool ok = nll < 0.1 && steps <= 2000;
  return {ok, "mean NLL " + fmt(nll) + " after " + std::to_string(steps) + " steps"};
}

// ---------------------------------------------------------------------------
// 7. Predictor learnability

Outcome criterion_predictors() {
  const ExperimentConfig cfg;
  Tokenizer tok;
  const auto pc = generate_synthetic_corpus(cfg.predictor_corpus);
  std::set<std::string> train_ids, test_ids;
  for (const auto& ex : pc.train) train_ids.insert(ex.listener_id);
  for (const auto& ex : pc.test) test_ids.insert(ex.listener_id);
  bool disjoint = true;
  for (const auto& id : test_ids) disjoint &= train_ids.count(id) == 0;
  auto suite = make_predictors<float>(cfg, tok);
  const auto personality =
      train_predictor(suite.personality, make_items(pc.train, PredictorTask::kPersonality, tok),
                      make_items(pc.test, PredictorTask::kPersonality, tok));
  const auto intent = train_predictor(suite.intent, make_items(pc.train, PredictorTask::kIntent, tok),
                                      make_items(pc.test, PredictorTask::kIntent, tok));
  double worst = 1;
  for (const auto& p : personality.trait_pearson) worst = std::min(worst, p ? *p : -1.0);
  const double acc = intent.accuracy.value_or(0);
  const bool ok = disjoint && worst >= 0.8 && acc >= 0.9;
  return {ok, "min per-trait Pearson " + fmt(worst) + ", intent accuracy " + fmt(acc) +
                  (disjoint ? ", listeners disjoint" : ", listeners overlap")};
}

// ---------------------------------------------------------------------------
// 8. Retrieval

Outcome criterion_retrieval() {
  const ExperimentConfig cfg;
  Tokenizer tok;
  const auto corpus = generate_synthetic_corpus(cfg.corpus);
  const auto emb = train_embedders<float>(corpus.train, tok, corpus.listener_archetype, corpus.archetypes.size(),
                                          embedder_config(cfg, tok));
  const auto index = RetrievalIndex::build(emb, corpus.train, tok);
  std::size_t top1 = 0;
  double worst = 0;
  for (std::size_t i = 0; i < corpus.train.size(); ++i) {
    const auto q = emb.embed(tok.encode(context_text(corpus.train[i])));
    top1 += index.query(q).entry == i;
    // Dot-product oracle against a few entries.
    for (std::size_t j = i % 7; j < index.size(); j += 97) {
      const auto& e = index.entries()[j].embeds;
      long double s = 0;
      for (std::size_t k = 0; k < q.semantic.size(); ++k) s += static_cast<long double>(q.semantic[k]) * e.semantic[k];
      for (std::size_t k = 0; k < q.style.size(); ++k) s += static_cast<long double>(q.style[k]) * e.style[k];
      for (std::size_t k = 0; k < q.emotion.size(); ++k) s += static_cast<long double>(q.emotion[k]) * e.emotion[k];
      worst = std::max(worst, std::abs(retrieval_score(q, e) - static_cast<double>(s)));
    }
  }
  std::size_t bad_samples = 0;
  Rng rng(8);
  for (const auto& [id, _] : corpus.listener_traits) {
    const auto idx = sample_past_indices(corpus.train, id, cfg.past_pool_n, rng);
    bad_samples += std::set<std::size_t>(idx.begin(), idx.end()).size() != idx.size();
    for (auto i : idx) bad_samples += corpus.train[i].listener_id != id;
  }
  const bool ok = top1 == corpus.train.size() && worst <= 1e-6 && bad_samples == 0;
  return {ok, "self top-1 " + std::to_string(top1) + "/" + std::to_string(corpus.train.size()) +
                  ", score-vs-oracle max " + sci(worst) + ", " + std::to_string(bad_samples) + " sampling violations"};
}

// ---------------------------------------------------------------------------
// 9. Metric oracles

double oracle_distinct(const std::vector<std::vector<int>>& seqs, std::size_t n) {
  std::vector<std::string> grams;
  for (const auto& s : seqs)
    for (std::size_t i = 0; i + n <= s.size(); ++i) {
      std::string g;
      for (std::size_t k = 0; k < n; ++k) g += std::to_string(s[i + k]) + "|";
      grams.push_back(g);
    }
  std::sort(grams.begin(), grams.end());
  const auto unique = std::unique(grams.begin(), grams.end()) - grams.begin();
  return static_cast<double>(unique) / static_cast<double>(grams.size());
}

long double oracle_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const long double n = x.size();
  long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += static_cast<long double>(x[i]) * x[i];
    syy += static_cast<long double>(y[i]) * y[i];
    sxy += static_cast<long double>(x[i]) * y[i];
  }
  return (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
}

// Rank by counting: 1 + #smaller + (#equal - 1) / 2.
std::vector<double> oracle_ranks(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0, equal = 0;
    for (double v : x) less += v < x[i], equal += v == x[i];
    r[i] = 1 + less + (equal - 1) / 2;
  }
  return r;
}

Outcome criterion_metrics() {
  Rng rng(99);
  std::size_t distinct_ok = 0, class_ok = 0;
  double worst_p = 0, worst_s = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<int>> seqs(1 + rng.index(6));
    for (auto& s : seqs) {
      s.resize(2 + rng.index(8));
      for (auto& t : s) t = static_cast<int>(rng.index(6));
    }
    const std::size_t n = 1 + rng.index(2);
    distinct_ok += distinct_n(seqs, n) == oracle_distinct(seqs, n);

    const std::size_t len = 2 + rng.index(30);
    std::vector<double> x(len), y(len);
    for (std::size_t i = 0; i < len; ++i) {
      x[i] = std::round(rng.normal() * 4) / 4;  // coarse grid creates ties
      y[i] = 0.5 * x[i] + rng.normal();
    }
    if (const auto p = pearson(x, y)) worst_p = std::max(worst_p, std::abs(*p - double(oracle_pearson(x, y))));
    const auto rx = oracle_ranks(x), ry = oracle_ranks(y);
    if (const auto s = spearman(x, y)) worst_s = std::max(worst_s, std::abs(*s - double(oracle_pearson(rx, ry))));

    const std::size_t k = 2 + rng.index(4);
    std::vector<int> gold(len), pred(len);
    for (std::size_t i = 0; i < len; ++i) {
      gold[i] = static_cast<int>(rng.index(k));
      pred[i] = rng.bernoulli(0.6) ? gold[i] : static_cast<int>(rng.index(k));
    }
    // Confusion-count oracle.
    std::vector<double> tp(k), fp(k), fn(k), support(k);
    double correct = 0;
    for (std::size_t i = 0; i < len; ++i) {
      support[gold[i]] += 1;
      if (gold[i] == pred[i]) {
        tp[gold[i]] += 1;
        correct += 1;
      } else {
        fp[pred[i]] += 1;
        fn[gold[i]] += 1;
      }
    }
    double recall_sum = 0, present = 0, f1_sum = 0, f1_classes = 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (support[c] > 0) recall_sum += tp[c] / support[c], present += 1;
      const double denom = 2 * tp[c] + fp[c] + fn[c];
      if (denom > 0) f1_sum += 2 * tp[c] / denom, f1_classes += 1;
    }
    const auto m = classification_metrics(gold, pred, k);
    class_ok += std::abs(m.accuracy - correct / len) <= 1e-12 &&
                std::abs(m.balanced_accuracy.value_or(-1) - recall_sum / present) <= 1e-12 &&
                std::abs(m.f1.value_or(-1) - f1_sum / f1_classes) <= 1e-12;
  }
  const bool ok = distinct_ok == 100 && class_ok == 100 && worst_p <= 1e-9 && worst_s <= 1e-9;
  return {ok, "distinct " + std::to_string(distinct_ok) + "/100, classification " + std::to_string(class_ok) +
                  "/100, pearson max " + sci(worst_p) + ", spearman max " + sci(worst_s)};
}

// ---------------------------------------------------------------------------
// 10. Reproducibility through the CLI

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Outcome criterion_reproducibility() {
  const auto root = std::filesystem::temp_directory_path() / "styemp_acceptance_repro";
  std::filesystem::remove_all(root);
  std::filesystem::create_directories(root);
  const auto ini = root / "tiny.ini";
  {
    std::ofstream out(ini);
    out << "[corpus]\nn_listeners = 4\nconvs_per_listener = 10\n"
           "[predictor_corpus]\nn_listeners = 4\nconvs_per_listener = 10\n"
           "[model]\nd = 16\nff = 32\nn1 = 2\nn2 = 2\ndecoder_layers = 1\n"
           "[predictors]\nd = 16\nepochs = 2\n[embedders]\nepochs = 1\n[train]\nepochs = 2\n"
           "[calibration]\nepochs = 1\nexamples = 8\nbatch = 4\nK = 3\n"
           "[decode]\nmax_new_tokens = 8\n[run]\neval_examples = 4\neval_samples = 2\nseed = 5\n";
  }
  std::vector<std::filesystem::path> dirs;
  for (const char* name : {"a", "b"}) {
    const auto run_root = root / name;
    const std::string cmd = "STYEMP_RUN_ROOT='" + run_root.string() + "' '" + STYEMP_CLI_PATH + "' -c '" +
                            ini.string() + "' run-all > '" + (root / (std::string(name) + ".log")).string() +
                            "' 2>&1 && STYEMP_RUN_ROOT='" + run_root.string() + "' '" + STYEMP_CLI_PATH + "' -c '" +
                            ini.string() + "' ablate >> '" + (root / (std::string(name) + ".log")).string() + "' 2>&1";
    if (std::system(cmd.c_str()) != 0) return {false, "CLI run failed; see " + (root / name).string() + ".log"};
    dirs.push_back(run_root / "default");
  }
  std::size_t compared = 0, differing = 0;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dirs[0])) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), dirs[0]);
    ++compared;
    differing += slurp(entry.path()) != slurp(dirs[1] / rel);
  }
  const bool ok = compared >= 15 && differing == 0 && slurp(root / "a.log") == slurp(root / "b.log");
  if (ok) std::filesystem::remove_all(root);
  return {ok, std::to_string(compared) + " artifacts compared byte-for-byte, " + std::to_string(differing) +
                  " differ"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", criterion_gradients},
      {"margin loss oracles", criterion_loss_oracles},
      {"calibration trend", criterion_calibration},
      {"ablation trend", criterion_ablation},
      {"decoding", criterion_decoding},
      {"overfit sanity", criterion_overfit},
      {"predictor learnability", criterion_predictors},
      {"retrieval", criterion_retrieval},
      {"metric oracles", criterion_metrics},
      {"reproducibility", criterion_reproducibility},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));
  std::size_t failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << (i + 1) << " (" << criteria[i].first
              << "): " << o.detail << " [" << fmt(seconds_since(t0), 1) << "s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
