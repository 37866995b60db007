#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "styemp/checkpoint.hpp"
#include "styemp/corpus.hpp"
#include "styemp/decoding.hpp"
#include "styemp/error.hpp"
#include "styemp/gradcheck_suite.hpp"
#include "styemp/metrics.hpp"
#include "styemp/model.hpp"
#include "styemp/predictors.hpp"
#include "styemp/reinforce.hpp"
#include "styemp/retrieval.hpp"

namespace styemp {

// ---------------------------------------------------------------------------
// Configuration

struct ExperimentConfig {
  CorpusConfig corpus;
  CorpusConfig predictor_corpus{.n_listeners = 40, .convs_per_listener = 25, .seed = 11, .mode = CorpusMode::kPredictor};

  // generator
  std::size_t d = 32;
  std::size_t heads = 2;
  std::size_t encoder_layers = 1;
  std::size_t decoder_layers = 2;
  std::size_t ff = 64;
  std::size_t encoder_max_len = 64;
  std::size_t n1 = 8;
  std::size_t n2 = 8;
  EncoderVariant variant = EncoderVariant::kCEP;

  // predictors and retrieval embedders
  std::size_t predictor_d = 32;
  std::size_t predictor_layers = 1;
  std::size_t predictor_epochs = 6;
  double predictor_lr = 1e-3;
  std::size_t predictor_batch = 16;
  std::size_t embedder_epochs = 3;
  double embedder_lr = 2e-3;

  // base generator
  double train_lr = 1e-3;
  std::size_t train_epochs = 30;
  std::size_t train_batch = 16;

  // personality reinforcement
  bool pr_enabled = true;
  double lr = 5e-5;
  std::size_t batch = 64;
  std::size_t calib_epochs = 2;
  std::size_t calib_examples = 0;
  std::size_t K = 5;
  double alpha = 0.001;
  double beta = 1.0;
  double diversity = 1.0;
  bool refresh_candidates = true;

  // decoding and evaluation
  double top_p = 0.8;
  double temperature = 0.7;
  std::size_t max_new_tokens = 32;
  std::size_t past_pool_n = 10;
  std::string eval_split = "test";
  std::size_t eval_examples = 0;
  std::size_t eval_samples = 5;  // sampled responses per reference, pooled
  std::uint64_t seed = 1;

  std::size_t prefix_rows() const { return mgpe().prefix_rows(); }

  MgpeConfig mgpe() const {
    MgpeConfig m;
    m.encoder = {0, d, heads, encoder_layers, ff, encoder_max_len};
    m.n1 = n1;
    m.n2 = n2;
    m.variant = variant;
    return m;
  }

  DecoderConfig decoder() const {
    DecoderConfig dc;
    dc.d = d;
    dc.heads = heads;
    dc.layers = decoder_layers;
    dc.ff = ff;
    // prefix rows, then context, separator and generated tokens
    dc.max_len = 2 * (n1 + n2) + encoder_max_len + max_new_tokens;
    return dc;
  }

  DecodeParams decode() const {
    DecodeParams p;
    p.top_p = top_p;
    p.temperature = temperature;
    p.max_new_tokens = max_new_tokens;
    p.beam_width = K;
    p.groups = K;
    p.diversity = diversity;
    p.seed = seed;
    return p;
  }

  void validate() const {
    corpus.validate();
    predictor_corpus.validate();
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ContractError(std::string("config: ") + name + " must be positive");
    };
    positive(d, "model.d");
    positive(heads, "model.heads");
    positive(encoder_layers, "model.encoder_layers");
    positive(decoder_layers, "model.decoder_layers");
    positive(ff, "model.ff");
    positive(n1, "model.n1");
    positive(n2, "model.n2");
    positive(predictor_d, "predictors.d");
    positive(predictor_epochs, "predictors.epochs");
    positive(train_epochs, "train.epochs");
    positive(train_batch, "train.batch");
    positive(batch, "calibration.batch");
    positive(K, "calibration.K");
    positive(past_pool_n, "run.past_pool_n");
    positive(eval_samples, "run.eval_samples");
    positive(max_new_tokens, "decode.max_new_tokens");
    if (d % heads || predictor_d % heads) throw ContractError("config: widths must be divisible by heads");
    if (K < 2) throw ContractError("config: calibration.K must be at least 2");
    if (!(lr > 0 && train_lr > 0 && predictor_lr > 0 && embedder_lr > 0))
      throw ContractError("config: learning rates must be positive");
    if (!(alpha >= 0 && beta >= 0 && diversity >= 0)) throw ContractError("config: alpha, beta, diversity >= 0");
    decode().validate();
    if (eval_split != "test" && eval_split != "valid") throw ContractError("config: run.eval_split is test or valid");
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename U>
U parse_number(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  U v{};
  is >> v;
  if (!is || !is.eof()) throw ContractError("config: bad value '" + text + "' for " + key);
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ContractError("config: bad boolean '" + text + "' for " + key);
}

/// One (key, value) binding per configurable field.
struct FieldVisitor {
  virtual ~FieldVisitor() = default;
  virtual void field(const std::string& key, std::size_t& v) = 0;
  virtual void field(const std::string& key, std::uint64_t& v, int) = 0;
  virtual void field(const std::string& key, double& v) = 0;
  virtual void field(const std::string& key, bool& v) = 0;
  virtual void field(const std::string& key, std::string& v) = 0;
  virtual void field(const std::string& key, EncoderVariant& v) = 0;
};

inline void visit_fields(ExperimentConfig& c, FieldVisitor& f) {
  f.field("corpus.n_listeners", c.corpus.n_listeners);
  f.field("corpus.convs_per_listener", c.corpus.convs_per_listener);
  f.field("corpus.n_archetypes", c.corpus.n_archetypes);
  f.field("corpus.seed", c.corpus.seed, 0);
  f.field("corpus.style_purity", c.corpus.style_purity);
  f.field("corpus.jitter", c.corpus.jitter);
  f.field("predictor_corpus.n_listeners", c.predictor_corpus.n_listeners);
  f.field("predictor_corpus.convs_per_listener", c.predictor_corpus.convs_per_listener);
  f.field("predictor_corpus.seed", c.predictor_corpus.seed, 0);
  f.field("model.d", c.d);
  f.field("model.heads", c.heads);
  f.field("model.encoder_layers", c.encoder_layers);
  f.field("model.decoder_layers", c.decoder_layers);
  f.field("model.ff", c.ff);
  f.field("model.encoder_max_len", c.encoder_max_len);
  f.field("model.n1", c.n1);
  f.field("model.n2", c.n2);
  f.field("model.variant", c.variant);
  f.field("predictors.d", c.predictor_d);
  f.field("predictors.layers", c.predictor_layers);
  f.field("predictors.epochs", c.predictor_epochs);
  f.field("predictors.lr", c.predictor_lr);
  f.field("predictors.batch", c.predictor_batch);
  f.field("embedders.epochs", c.embedder_epochs);
  f.field("embedders.lr", c.embedder_lr);
  f.field("train.lr", c.train_lr);
  f.field("train.epochs", c.train_epochs);
  f.field("train.batch", c.train_batch);
  f.field("calibration.pr_enabled", c.pr_enabled);
  f.field("calibration.lr", c.lr);
  f.field("calibration.batch", c.batch);
  f.field("calibration.epochs", c.calib_epochs);
  f.field("calibration.examples", c.calib_examples);
  f.field("calibration.K", c.K);
  f.field("calibration.alpha", c.alpha);
  f.field("calibration.beta", c.beta);
  f.field("calibration.diversity", c.diversity);
  f.field("calibration.refresh_candidates", c.refresh_candidates);
  f.field("decode.top_p", c.top_p);
  f.field("decode.temperature", c.temperature);
  f.field("decode.max_new_tokens", c.max_new_tokens);
  f.field("run.past_pool_n", c.past_pool_n);
  f.field("run.eval_split", c.eval_split);
  f.field("run.eval_examples", c.eval_examples);
  f.field("run.eval_samples", c.eval_samples);
  f.field("run.seed", c.seed, 0);
}

struct Setter : FieldVisitor {
  std::string key, value;
  bool found = false;
  void field(const std::string& k, std::size_t& v) override {
    if (k == key) found = true, v = parse_number<std::size_t>(k, value);
  }
  void field(const std::string& k, std::uint64_t& v, int) override {
    if (k == key) found = true, v = parse_number<std::uint64_t>(k, value);
  }
  void field(const std::string& k, double& v) override {
    if (k == key) found = true, v = parse_number<double>(k, value);
  }
  void field(const std::string& k, bool& v) override {
    if (k == key) found = true, v = parse_bool(k, value);
  }
  void field(const std::string& k, std::string& v) override {
    if (k == key) found = true, v = value;
  }
  void field(const std::string& k, EncoderVariant& v) override {
    if (k == key) found = true, v = parse_variant(value);
  }
};

struct Writer : FieldVisitor {
  std::vector<std::pair<std::string, std::string>> items;
  void field(const std::string& k, std::size_t& v) override { items.emplace_back(k, std::to_string(v)); }
  void field(const std::string& k, std::uint64_t& v, int) override { items.emplace_back(k, std::to_string(v)); }
  void field(const std::string& k, double& v) override { items.emplace_back(k, format_double(v)); }
  void field(const std::string& k, bool& v) override { items.emplace_back(k, v ? "true" : "false"); }
  void field(const std::string& k, std::string& v) override { items.emplace_back(k, v); }
  void field(const std::string& k, EncoderVariant& v) override { items.emplace_back(k, variant_name(v)); }
};

}  // namespace detail

/// Sets `section.key` from text; unknown keys are errors.
inline void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  detail::Setter s;
  s.key = key;
  s.value = value;
  detail::visit_fields(cfg, s);
  if (!s.found) throw ContractError("config: unknown key '" + key + "'");
}

/// Applies "section.key=value" overrides in order.
inline void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ContractError("override '" + o + "' is not key=value");
    set_config_value(cfg, o.substr(0, eq), o.substr(eq + 1));
  }
}

inline ExperimentConfig parse_config(std::istream& in) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw SchemaError("config: " + e.message(), e.line());
  }
  ExperimentConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ContractError("config: key '" + section + "' outside a section");
    for (const auto& [key, value] : body) set_config_value(cfg, section + "." + key, value.data());
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("config file not found: " + path.string());
  return parse_config(in);
}

/// Complete INI rendering; parsing it reproduces the configuration exactly.
inline std::string config_to_ini(ExperimentConfig cfg) {
  detail::Writer w;
  detail::visit_fields(cfg, w);
  std::string out, current;
  for (const auto& [key, value] : w.items) {
    const auto dot = key.find('.');
    const std::string section = key.substr(0, dot);
    if (section != current) {
      if (!out.empty()) out += '\n';
      out += "[" + section + "]\n";
      current = section;
    }
    out += key.substr(dot + 1) + " = " + value + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvaluationReport {
  std::string identity;
  std::size_t n = 0;
  double distinct1 = 0, distinct2 = 0;
  std::optional<double> pearson_E, pearson_I, pearson_EI, pearson_T;
  std::optional<double> gold_pearson_EI, gold_pearson_T;  // generated vs planted listener traits
  double emotion_acc = 0, er_acc = 0, eacc = 0, ip_acc = 0, ex_acc = 0, ip_ex_acc = 0, intent_acc = 0;
  std::vector<std::string> undefined;

  nlohmann::json to_json() const {
    return {{"identity", identity},
            {"n", n},
            {"distinct1", distinct1},
            {"distinct2", distinct2},
            {"distinct1_x100", distinct1 * 100},
            {"distinct2_x100", distinct2 * 100},
            {"pearson_E", json_or_null(pearson_E)},
            {"pearson_I", json_or_null(pearson_I)},
            {"pearson_EI", json_or_null(pearson_EI)},
            {"pearson_T", json_or_null(pearson_T)},
            {"gold_pearson_EI", json_or_null(gold_pearson_EI)},
            {"gold_pearson_T", json_or_null(gold_pearson_T)},
            {"emotion_acc", emotion_acc},
            {"er_acc", er_acc},
            {"eacc", eacc},
            {"ip_acc", ip_acc},
            {"ex_acc", ex_acc},
            {"ip_ex_acc", ip_ex_acc},
            {"intent_acc", intent_acc},
            {"undefined", undefined}};
  }
};

/// Mean of two correlations; undefined when either is.
inline std::optional<double> mean_of(const std::optional<double>& a, const std::optional<double>& b) {
  if (!a || !b) return std::nullopt;
  return 0.5 * (*a + *b);
}

/// Runs the predictors over generated and reference responses and compares
/// them. `gold_traits`, when given, maps reference listener ids to planted
/// traits for the additional gold correlations.
template <typename T>
EvaluationReport evaluate_generation(const std::vector<std::vector<int>>& generated, const Dataset& references,
                                     const PredictorSuite<T>& predictors, const Tokenizer& tok,
                                     const std::map<std::string, PersonalityProfile>* gold_traits = nullptr) {
  if (generated.size() != references.size()) throw ContractError("evaluate_generation: length mismatch");
  if (generated.empty()) throw ContractError("evaluate_generation: nothing to evaluate");
  EvaluationReport r;
  r.n = generated.size();
  std::array<std::vector<double>, 3> gen_traits, ref_traits, gold;
  std::size_t emo = 0, er = 0, ip = 0, ex = 0, intent = 0;
  std::vector<std::vector<int>> nonempty;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    const auto ref_ids = tok.encode(references[i].response);
    // An empty generation is scored as a lone <unk> token.
    const std::vector<int> gen_ids = generated[i].empty() ? std::vector<int>{Tokenizer::kUnk} : generated[i];
    nonempty.push_back(gen_ids);
    const auto pg = predictors.predict_personality(gen_ids).as_array();
    const auto pr = predictors.predict_personality(ref_ids).as_array();
    for (std::size_t k = 0; k < 3; ++k) {
      gen_traits[k].push_back(pg[k]);
      ref_traits[k].push_back(pr[k]);
    }
    if (gold_traits) {
      auto it = gold_traits->find(references[i].listener_id);
      if (it == gold_traits->end()) throw SchemaError("no planted traits for listener " + references[i].listener_id);
      const auto g = it->second.as_array();
      for (std::size_t k = 0; k < 3; ++k) gold[k].push_back(g[k]);
    }
    const auto sg = predictors.classify_empathy(gen_ids), sr = predictors.classify_empathy(ref_ids);
    emo += sg.emotion == sr.emotion;
    er += sg.emotional_reaction == sr.emotional_reaction;
    ip += sg.interpretation == sr.interpretation;
    ex += sg.exploration == sr.exploration;
    intent += sg.intent == sr.intent;
  }
  r.distinct1 = distinct_n(nonempty, 1);
  r.distinct2 = nonempty.size() && std::any_of(nonempty.begin(), nonempty.end(), [](const auto& s) { return s.size() >= 2; })
                    ? distinct_n(nonempty, 2)
                    : 0.0;
  r.pearson_E = pearson(gen_traits[0], ref_traits[0]);
  r.pearson_I = pearson(gen_traits[1], ref_traits[1]);
  r.pearson_T = pearson(gen_traits[2], ref_traits[2]);
  r.pearson_EI = mean_of(r.pearson_E, r.pearson_I);
  if (gold_traits) {
    r.gold_pearson_EI = mean_of(pearson(gen_traits[0], gold[0]), pearson(gen_traits[1], gold[1]));
    r.gold_pearson_T = pearson(gen_traits[2], gold[2]);
  }
  const double n = static_cast<double>(r.n);
  r.emotion_acc = emo / n;
  r.er_acc = er / n;
  r.eacc = 0.5 * (r.emotion_acc + r.er_acc);
  r.ip_acc = ip / n;
  r.ex_acc = ex / n;
  r.ip_ex_acc = 0.5 * (r.ip_acc + r.ex_acc);
  r.intent_acc = intent / n;
  for (auto [name, v] : {std::pair{"pearson_EI", &r.pearson_EI}, std::pair{"pearson_T", &r.pearson_T}})
    if (!*v) r.undefined.push_back(name);
  if (gold_traits) {
    if (!r.gold_pearson_EI) r.undefined.push_back("gold_pearson_EI");
    if (!r.gold_pearson_T) r.undefined.push_back("gold_pearson_T");
  }
  return r;
}

// ---------------------------------------------------------------------------
// Model construction and persistence

template <typename T>
PredictorSuite<T> make_predictors(const ExperimentConfig& cfg, const Tokenizer& tok) {
  PredictorConfig pc;
  pc.encoder = {tok.size(), cfg.predictor_d, cfg.heads, cfg.predictor_layers, 2 * cfg.predictor_d,
                cfg.encoder_max_len};
  pc.optim.lr = cfg.predictor_lr;
  pc.epochs = cfg.predictor_epochs;
  pc.batch = cfg.predictor_batch;
  return make_predictor_suite<T>(pc, derive_seed(cfg.seed, "predictors"));
}

inline EmbedderConfig embedder_config(const ExperimentConfig& cfg, const Tokenizer& tok) {
  EmbedderConfig ec;
  ec.encoder = {tok.size(), cfg.predictor_d, cfg.heads, cfg.predictor_layers, 2 * cfg.predictor_d,
                cfg.encoder_max_len};
  ec.optim.lr = cfg.embedder_lr;
  ec.epochs = cfg.embedder_epochs;
  ec.batch = cfg.predictor_batch;
  ec.seed = derive_seed(cfg.seed, "embedders");
  return ec;
}

template <typename T>
StyEmpModel<T> make_model(const ExperimentConfig& cfg, const Tokenizer& tok) {
  MgpeConfig mc = cfg.mgpe();
  mc.encoder.vocab = tok.size();
  DecoderConfig dc = cfg.decoder();
  dc.vocab = tok.size();
  Rng rng(derive_seed(cfg.seed, "generator-init"));
  return StyEmpModel<T>(mc, dc, rng);
}

inline TrainConfig base_train_config(const ExperimentConfig& cfg) {
  TrainConfig tc;
  tc.optim.lr = cfg.train_lr;
  tc.epochs = cfg.train_epochs;
  tc.batch = cfg.train_batch;
  tc.seed = derive_seed(cfg.seed, "train");
  return tc;
}

inline CalibrationConfig calibration_config(const ExperimentConfig& cfg) {
  CalibrationConfig cc;
  cc.optim.lr = cfg.lr;
  cc.epochs = cfg.calib_epochs;
  cc.batch = cfg.batch;
  cc.examples_per_epoch = cfg.calib_examples;
  cc.alpha = cfg.alpha;
  cc.beta = cfg.beta;
  cc.refresh_candidates = cfg.refresh_candidates;
  cc.decode = cfg.decode();
  cc.seed = derive_seed(cfg.seed, "calibrate");
  return cc;
}

template <typename T>
void load_params(ParamList<T> params, const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DependencyError("missing artifact " + path.string());
  restore_params(params, load_checkpoint(path));
}

/// Everything the generation stages share: corpora, predictors, retrieval.
struct Workspace {
  ExperimentConfig cfg;
  Tokenizer tok;
  SyntheticCorpus corpus;            // dialogue mode
  SyntheticCorpus predictor_corpus;  // listener-disjoint
  PredictorSuite<float> predictors;
  EmbedderTriple<float> embedders;
  RetrievalIndex index;
  std::vector<PreparedExample> train_examples;
  std::vector<PreparedExample> eval_examples;  // retrieval-based inference inputs
  Dataset eval_refs;
  std::map<std::string, PersonalityProfile> targets;  // predicted listener profiles

  const Dataset& eval_split() const { return cfg.eval_split == "valid" ? corpus.valid : corpus.test; }
};

inline std::map<std::string, int> archetype_labels(const SyntheticCorpus& c) { return c.listener_archetype; }

/// Predictor items from the predictor-mode corpus.
template <typename T>
nlohmann::json train_predictor_suite(PredictorSuite<T>& suite, const SyntheticCorpus& pc, const Tokenizer& tok) {
  nlohmann::json reports;
  for (auto task : {PredictorTask::kPersonality, PredictorTask::kER, PredictorTask::kIP, PredictorTask::kEX,
                    PredictorTask::kIntent, PredictorTask::kEmotion}) {
    const auto train = make_items(pc.train, task, tok);
    const auto test = make_items(pc.test, task, tok);
    reports[task_name(task)] = train_predictor(suite.get(task), train, test).to_json();
  }
  return reports;
}

/// Inference inputs for the evaluation split (retrieval + past sampling).
inline std::vector<PreparedExample> prepare_eval(const Workspace& ws) {
  std::vector<PreparedExample> out;
  const Dataset& split = ws.eval_refs;
  for (std::size_t i = 0; i < split.size(); ++i)
    out.push_back(prepare_inference(split[i], i, ws.corpus.train, ws.index, ws.embedders, ws.tok,
                                    ws.cfg.past_pool_n, derive_seed(ws.cfg.seed, "eval")));
  return out;
}

inline Dataset eval_subset(const ExperimentConfig& cfg, const Dataset& split) {
  Dataset out = split;
  if (cfg.eval_examples && out.size() > cfg.eval_examples) out.resize(cfg.eval_examples);
  return out;
}

/// Nucleus-sampled responses, `eval_samples` rounds over the inputs
/// (round-major). Each (round, example) pair has its own seeded stream so
/// different models see the same random numbers.
template <typename T>
std::vector<std::vector<int>> generate_all(const StyEmpModel<T>& model, const std::vector<PreparedExample>& inputs,
                                           const ExperimentConfig& cfg) {
  std::vector<std::vector<int>> out;
  const DecodeParams params = cfg.decode();
  for (std::size_t s = 0; s < cfg.eval_samples; ++s) {
    const std::string stream = s == 0 ? "generate" : "generate-" + std::to_string(s);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      Rng rng(derive_seed(cfg.seed, stream, i));
      out.push_back(generate_response(model, inputs[i].inputs, params, rng));
    }
  }
  return out;
}

/// References aligned with `generate_all` output.
inline Dataset repeated(const Dataset& refs, std::size_t rounds) {
  Dataset out;
  for (std::size_t s = 0; s < rounds; ++s) out.insert(out.end(), refs.begin(), refs.end());
  return out;
}

template <typename T>
EvaluationReport evaluate_model(const StyEmpModel<T>& model, const Workspace& ws, const std::string& identity) {
  const auto gen = generate_all(model, ws.eval_examples, ws.cfg);
  auto r = evaluate_generation(gen, repeated(ws.eval_refs, ws.cfg.eval_samples), ws.predictors, ws.tok, &ws.corpus.listener_traits);
  r.identity = identity;
  return r;
}

/// Builds every shared artifact in memory (no files).
inline Workspace build_workspace(const ExperimentConfig& cfg, nlohmann::json* log = nullptr) {
  cfg.validate();
  Workspace ws;
  ws.cfg = cfg;
  ws.corpus = generate_synthetic_corpus(cfg.corpus);
  ws.predictor_corpus = generate_synthetic_corpus(cfg.predictor_corpus);
  ws.predictors = make_predictors<float>(cfg, ws.tok);
  const auto pred_reports = train_predictor_suite(ws.predictors, ws.predictor_corpus, ws.tok);
  EmbedderReport er;
  ws.embedders = train_embedders<float>(ws.corpus.train, ws.tok, archetype_labels(ws.corpus),
                                        ws.corpus.archetypes.size(), embedder_config(cfg, ws.tok), &er);
  ws.index = RetrievalIndex::build(ws.embedders, ws.corpus.train, ws.tok);
  ws.train_examples = prepare_training(ws.corpus.train, ws.tok, cfg.past_pool_n, derive_seed(cfg.seed, "past"));
  ws.eval_refs = eval_subset(cfg, ws.eval_split());
  ws.eval_examples = prepare_eval(ws);
  ws.targets = listener_targets(ws.predictors, ws.corpus.train, ws.tok);
  if (log) {
    (*log)["predictors"] = pred_reports;
    (*log)["embedders"] = er.to_json();
  }
  return ws;
}

/// Calibration of a copy of `base`, with per-epoch evaluation on the
/// workspace's evaluation inputs.
inline CalibrationReport calibrate_model(StyEmpModel<float>& model, const Workspace& ws) {
  return calibrate(model, ws.predictors, ws.tok, ws.train_examples, ws.targets, calibration_config(ws.cfg),
                   [&](std::size_t) {
                     const auto r = evaluate_model(model, ws, "epoch");
                     return nlohmann::json{{"eval_pearson_EI", json_or_null(r.pearson_EI)},
                                           {"eval_pearson_T", json_or_null(r.pearson_T)},
                                           {"distinct1", r.distinct1},
                                           {"distinct2", r.distinct2}};
                   });
}

/// Deep copy of model weights.
template <typename T>
StyEmpModel<T> clone_model(const StyEmpModel<T>& src, const ExperimentConfig& cfg, const Tokenizer& tok) {
  StyEmpModel<T> dst = make_model<T>(cfg, tok);
  auto from = src.parameters();
  auto to = dst.parameters();
  for (std::size_t i = 0; i < from.size(); ++i) {
    auto d = to[i].tensor.mutable_data();
    const auto s = from[i].tensor.data();
    std::copy(s.begin(), s.end(), d.begin());
  }
  return dst;
}

struct AblationRow {
  EncoderVariant variant;
  bool pr = false;
  EvaluationReport report;
};

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  auto num = [](const std::optional<double>& v) {
    std::ostringstream s;
    if (v)
      s << std::fixed << std::setprecision(4) << *v;
    else
      s << "n/a";
    return s.str();
  };
  os << std::left << std::setw(16) << "Model" << std::setw(6) << "PR" << std::setw(8) << "D1" << std::setw(8) << "D2"
     << std::setw(9) << "E&I" << std::setw(9) << "T" << std::setw(8) << "EAcc" << std::setw(8) << "IP&EX"
     << std::setw(8) << "Intent" << "\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(16) << ("MgPE (" + variant_name(r.variant) + ")") << std::setw(6)
       << (r.pr ? "yes" : "no") << std::setw(8) << num(r.report.distinct1 * 100) << std::setw(8)
       << num(r.report.distinct2 * 100) << std::setw(9) << num(r.report.pearson_EI) << std::setw(9)
       << num(r.report.pearson_T) << std::setw(8) << num(r.report.eacc) << std::setw(8) << num(r.report.ip_ex_acc)
       << std::setw(8) << num(r.report.intent_acc) << "\n";
  }
  return os.str();
}

inline nlohmann::json ablation_json(const std::vector<AblationRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    auto row = r.report.to_json();
    row["variant"] = variant_name(r.variant);
    row["pr"] = r.pr;
    j.push_back(row);
  }
  return j;
}

/// The 4 variants x {no PR, PR} grid on one workspace.
inline std::vector<AblationRow> run_ablation(const Workspace& ws, std::vector<EncoderVariant> variants = {},
                                             bool with_pr = true) {
  if (variants.empty())
    variants = {EncoderVariant::kC, EncoderVariant::kCP, EncoderVariant::kCE, EncoderVariant::kCEP};
  std::vector<AblationRow> rows;
  for (auto v : variants) {
    Workspace view = ws;
    view.cfg.variant = v;
    auto model = make_model<float>(view.cfg, view.tok);
    train_generator(model, view.train_examples, base_train_config(view.cfg));
    rows.push_back({v, false, evaluate_model(model, view, "MgPE (" + variant_name(v) + ")")});
    if (with_pr) {
      calibrate_model(model, view);
      rows.push_back({v, true, evaluate_model(model, view, "MgPE (" + variant_name(v) + ") + PR")});
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Run directories and stages

inline std::filesystem::path run_root() {
  if (const char* env = std::getenv("STYEMP_RUN_ROOT"); env && *env) return env;
  return "runs";
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("missing artifact " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(path.string() + ": " + e.what(), 1);
  }
}

/// A run directory holding a config snapshot and stage artifacts.
class ExperimentRun {
 public:
  ExperimentRun(std::filesystem::path dir, ExperimentConfig cfg) : dir_(std::move(dir)), cfg_(std::move(cfg)) {
    cfg_.validate();
    std::filesystem::create_directories(dir_);
    write_text(dir_ / "config.ini", config_to_ini(cfg_));
  }

  const std::filesystem::path& dir() const { return dir_; }
  const ExperimentConfig& config() const { return cfg_; }
  const Tokenizer& tokenizer() const { return tok_; }
  std::filesystem::path path(const std::string& name) const { return dir_ / name; }

  void require(const std::string& name, const std::string& stage) const {
    if (!std::filesystem::exists(path(name)))
      throw DependencyError("missing " + path(name).string() + " (run '" + stage + "' first)");
  }

  // corpus gen
  void corpus_gen() {
    const auto c = generate_synthetic_corpus(cfg_.corpus);
    const auto p = generate_synthetic_corpus(cfg_.predictor_corpus);
    save_corpus(c, "corpus");
    save_corpus(p, "predictor_corpus");
  }

  SyntheticCorpus load_corpus(const std::string& name) const {
    require(name + "/meta.json", "corpus gen");
    SyntheticCorpus c;
    c.train = load_jsonl(path(name + "/train.jsonl"));
    c.valid = load_jsonl(path(name + "/valid.jsonl"));
    c.test = load_jsonl(path(name + "/test.jsonl"));
    const auto meta = read_json(path(name + "/meta.json"));
    for (const auto& [id, a] : meta.at("listener_archetype").items()) c.listener_archetype[id] = a.get<int>();
    for (const auto& [id, t] : meta.at("listener_traits").items())
      c.listener_traits[id] = {t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>()};
    c.archetypes = default_archetypes(meta.at("n_archetypes").get<std::size_t>());
    return c;
  }

  // train-predictors
  nlohmann::json train_predictors() {
    const auto pc = load_corpus("predictor_corpus");
    auto suite = make_predictors<float>(cfg_, tok_);
    const auto reports = train_predictor_suite(suite, pc, tok_);
    save_checkpoint(path("predictors.ckpt"), suite.parameters());
    write_json(path("predictors_report.json"), reports);
    return reports;
  }

  PredictorSuite<float> load_predictors() const {
    require("predictors.ckpt", "train-predictors");
    auto suite = make_predictors<float>(cfg_, tok_);
    load_params(suite.parameters(), path("predictors.ckpt"));
    return suite;
  }

  // retrieve-index
  nlohmann::json build_index() {
    const auto c = load_corpus("corpus");
    EmbedderReport er;
    const auto emb = train_embedders<float>(c.train, tok_, archetype_labels(c), c.archetypes.size(),
                                            embedder_config(cfg_, tok_), &er);
    save_checkpoint(path("embedders.ckpt"), emb.parameters());
    RetrievalIndex::build(emb, c.train, tok_).save(path("index.ckpt"), path("index.json"));
    write_json(path("embedders_report.json"), er.to_json());
    return er.to_json();
  }

  EmbedderTriple<float> load_embedders() const {
    require("embedders.ckpt", "retrieve-index");
    const auto c = load_corpus("corpus");
    // Shapes come from the config; weights from the checkpoint.
    EmbedderConfig ec = embedder_config(cfg_, tok_);
    Rng rng(0);
    EmbedderTriple<float> e;
    e.semantic = SemanticEmbedder<float>(ec, rng);
    PredictorConfig pc;
    pc.encoder = ec.encoder;
    pc.n_classes = std::max<std::size_t>(2, c.archetypes.size());
    e.style = TextPredictor<float>(PredictorTask::kStyle, pc, rng);
    pc.n_classes = kEmotions.size();
    e.emotion = TextPredictor<float>(PredictorTask::kEmotion, pc, rng);
    load_params(e.parameters(), path("embedders.ckpt"));
    return e;
  }

  // train-generator
  nlohmann::json train_base() {
    const auto c = load_corpus("corpus");
    auto model = make_model<float>(cfg_, tok_);
    const auto data = prepare_training(c.train, tok_, cfg_.past_pool_n, derive_seed(cfg_.seed, "past"));
    const auto report = train_generator(model, data, base_train_config(cfg_));
    save_checkpoint(path("generator.ckpt"), model.parameters());
    auto j = report.to_json();
    j["variant"] = variant_name(cfg_.variant);
    write_json(path("train_report.json"), j);
    return j;
  }

  StyEmpModel<float> load_model(const std::string& which) const {
    const std::string file = which == "calibrated" ? "calibrated.ckpt" : "generator.ckpt";
    require(file, which == "calibrated" ? "calibrate" : "train-generator");
    auto model = make_model<float>(cfg_, tok_);
    load_params(model.parameters(), path(file));
    return model;
  }

  /// Workspace rebuilt from stored artifacts.
  Workspace workspace() const {
    Workspace ws;
    ws.cfg = cfg_;
    ws.corpus = load_corpus("corpus");
    ws.predictors = load_predictors();
    ws.embedders = load_embedders();
    require("index.json", "retrieve-index");
    ws.index = RetrievalIndex::load(path("index.ckpt"), path("index.json"));
    ws.train_examples = prepare_training(ws.corpus.train, tok_, cfg_.past_pool_n, derive_seed(cfg_.seed, "past"));
    ws.eval_refs = eval_subset(cfg_, ws.eval_split());
    ws.eval_examples = prepare_eval(ws);
    ws.targets = listener_targets(ws.predictors, ws.corpus.train, tok_);
    return ws;
  }

  // calibrate
  nlohmann::json calibrate_stage() {
    require("generator.ckpt", "train-generator");
    require("predictors.ckpt", "train-predictors");
    require("index.json", "retrieve-index");
    const Workspace ws = workspace();
    auto model = load_model("base");
    const auto report = calibrate_model(model, ws);
    save_checkpoint(path("calibrated.ckpt"), model.parameters());
    write_json(path("calibration_report.json"), report.to_json());
    return report.to_json();
  }

  // generate
  nlohmann::json generate_stage(const std::string& which) {
    const Workspace ws = workspace();
    const auto model = load_model(which);
    const auto gen = generate_all(model, ws.eval_examples, cfg_);
    std::string lines;
    for (std::size_t i = 0; i < gen.size(); ++i) {
      const std::size_t n = ws.eval_refs.size();
      const auto& ex = ws.eval_refs[i % n];
      const auto& in = ws.eval_examples[i % n];
      nlohmann::json j = {{"conv_id", ex.conv_id},
                          {"sample", i / n},
                          {"context", context_text(ex)},
                          {"reference", ex.response},
                          {"generated", tok_.decode(gen[i])},
                          {"retrieved_listener", in.listener_id}};
      lines += j.dump() + "\n";
    }
    write_text(path("generations_" + which + ".jsonl"), lines);
    return {{"model", which}, {"n", gen.size()}};
  }

  // evaluate
  nlohmann::json evaluate_stage(const std::string& which) {
    require("generations_" + which + ".jsonl", "generate");
    const auto predictors = load_predictors();
    const auto c = load_corpus("corpus");
    const Dataset refs = eval_subset(cfg_, cfg_.eval_split == "valid" ? c.valid : c.test);
    std::ifstream in(path("generations_" + which + ".jsonl"));
    std::vector<std::vector<int>> gen;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) gen.push_back(tok_.encode(nlohmann::json::parse(line).at("generated").get<std::string>()));
    auto r = evaluate_generation(gen, repeated(refs, cfg_.eval_samples), predictors, tok_, &c.listener_traits);
    r.identity = "MgPE (" + variant_name(cfg_.variant) + ")" + (which == "calibrated" ? " + PR" : "");
    write_json(path("evaluation_" + which + ".json"), r.to_json());
    return r.to_json();
  }

  // ablate
  nlohmann::json ablate_stage() {
    require("predictors.ckpt", "train-predictors");
    require("index.json", "retrieve-index");
    const Workspace ws = workspace();
    const auto rows = run_ablation(ws, {}, true);
    write_json(path("ablation.json"), ablation_json(rows));
    write_text(path("ablation.txt"), ablation_table(rows));
    return ablation_json(rows);
  }

  // gradcheck
  GradCheckSuiteReport gradcheck_stage() {
    const auto r = run_gradcheck_suite();
    write_json(path("gradcheck.json"), r.to_json());
    return r;
  }

 private:
  void save_corpus(const SyntheticCorpus& c, const std::string& name) {
    save_jsonl(c.train, path(name + "/train.jsonl"));
    save_jsonl(c.valid, path(name + "/valid.jsonl"));
    save_jsonl(c.test, path(name + "/test.jsonl"));
    nlohmann::json meta;
    meta["n_archetypes"] = c.archetypes.size();
    meta["listener_archetype"] = c.listener_archetype;
    nlohmann::json traits = nlohmann::json::object();
    for (const auto& [id, t] : c.listener_traits) traits[id] = t.as_array();
    meta["listener_traits"] = traits;
    write_json(path(name + "/meta.json"), meta);
  }

  std::filesystem::path dir_;
  ExperimentConfig cfg_;
  Tokenizer tok_;
};

}  // namespace styemp
