#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "styemp/checkpoint.hpp"
#include "styemp/corpus.hpp"
#include "styemp/error.hpp"
#include "styemp/metrics.hpp"
#include "styemp/nnet.hpp"
#include "styemp/optim.hpp"
#include "styemp/random.hpp"
#include "styemp/tensor.hpp"
#include "styemp/types.hpp"

namespace styemp {

inline PersonalityProfile mean_profile(const std::vector<PersonalityProfile>& profiles) {
  if (profiles.empty()) throw ContractError("mean_profile: empty list");
  std::array<double, 3> acc{};
  for (const auto& p : profiles) {
    const auto a = p.as_array();
    for (std::size_t k = 0; k < 3; ++k) acc[k] += a[k];
  }
  const double n = static_cast<double>(profiles.size());
  return PersonalityProfile{acc[0] / n, acc[1] / n, acc[2] / n}.clamped();
}

enum class PredictorTask { kPersonality, kER, kIP, kEX, kIntent, kEmotion, kStyle };

inline std::string task_name(PredictorTask t) {
  switch (t) {
    case PredictorTask::kPersonality: return "personality";
    case PredictorTask::kER: return "er";
    case PredictorTask::kIP: return "ip";
    case PredictorTask::kEX: return "ex";
    case PredictorTask::kIntent: return "intent";
    case PredictorTask::kEmotion: return "emotion";
    case PredictorTask::kStyle: return "style";
  }
  return "?";
}

inline PredictorTask parse_task(const std::string& name) {
  for (auto t : {PredictorTask::kPersonality, PredictorTask::kER, PredictorTask::kIP, PredictorTask::kEX,
                 PredictorTask::kIntent, PredictorTask::kEmotion, PredictorTask::kStyle})
    if (task_name(t) == name) return t;
  throw ContractError("unknown predictor task '" + name + "'");
}

/// One training/evaluation item: token ids with a regression target and/or a
/// class label, depending on the task.
struct LabeledText {
  std::vector<int> ids;
  std::array<double, 3> target{};
  int label = 0;
};

/// Builds items for `task` from dataset responses. `style_of` maps listener
/// ids to a class (used by the style task).
inline std::vector<LabeledText> make_items(const Dataset& data, PredictorTask task, const Tokenizer& tok,
                                           const std::map<std::string, int>& style_of = {}) {
  std::vector<LabeledText> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ex = data[i];
    LabeledText item;
    item.ids = tok.encode(ex.response);
    if (item.ids.empty()) continue;
    switch (task) {
      case PredictorTask::kPersonality:
        if (!ex.personality) throw SchemaError("missing personality label for " + ex.conv_id);
        item.target = ex.personality->as_array();
        break;
      case PredictorTask::kER: item.label = ex.empathy.emotional_reaction; break;
      case PredictorTask::kIP: item.label = ex.empathy.interpretation; break;
      case PredictorTask::kEX: item.label = ex.empathy.exploration; break;
      case PredictorTask::kIntent: item.label = ex.empathy.intent; break;
      case PredictorTask::kEmotion: item.label = ex.emotion; break;
      case PredictorTask::kStyle: {
        auto it = style_of.find(ex.listener_id);
        if (it == style_of.end()) throw SchemaError("missing style label for listener " + ex.listener_id);
        item.label = it->second;
        break;
      }
    }
    out.push_back(std::move(item));
  }
  return out;
}

struct PredictorConfig {
  EncoderConfig encoder;  // vocab filled from the tokenizer
  std::size_t n_classes = 2;
  OptimizerConfig optim{.lr = 1e-3};
  std::size_t epochs = 6;
  std::size_t batch = 16;
  std::uint64_t seed = 1;
};

/// TextEncoder body with a small head. Regression heads emit
/// (tanh, sigmoid, sigmoid) for (extraversion, introverted, thinking);
/// classification heads emit logits.
template <typename T>
class TextPredictor {
 public:
  TextPredictor() = default;
  TextPredictor(PredictorTask task, const PredictorConfig& cfg, Rng& rng)
      : encoder(cfg.encoder, rng), head(cfg.encoder.d, outputs(task, cfg), rng), task_(task), cfg_(cfg) {}

  PredictorTask task() const { return task_; }
  bool is_regression() const { return task_ == PredictorTask::kPersonality; }
  std::size_t n_classes() const { return is_regression() ? 0 : cfg_.n_classes; }
  const PredictorConfig& config() const { return cfg_; }

  /// Mean-pooled encoder representation [1,d].
  Tensor<T> represent(std::span<const int> ids) const { return mean_pool(encoder.encode(ids).states); }

  /// Head output [1,3] (bounded traits) or [1,C] (logits).
  Tensor<T> forward(std::span<const int> ids) const {
    const Tensor<T> z = head.forward(represent(ids));
    if (!is_regression()) return z;
    return concat({tanh(slice(z, 1, 0, 1)), sigmoid(slice(z, 1, 1, 3))}, 1);
  }

  Tensor<T> loss(const LabeledText& item) const {
    const Tensor<T> y = forward(item.ids);
    if (is_regression()) {
      const Tensor<T> target(Shape{1, 3}, std::vector<T>(item.target.begin(), item.target.end()));
      const Tensor<T> diff = sub(y, target);
      return mean(mul(diff, diff));
    }
    const int label[] = {item.label};
    return cross_entropy(y, std::span<const int>(label));
  }

  PersonalityProfile predict_profile(std::span<const int> ids) const {
    if (!is_regression()) throw ContractError("predict_profile on a classification head");
    NoGradScope<T> no_grad;
    const Tensor<T> y = forward(ids);
    return PersonalityProfile{static_cast<double>(y[0]), static_cast<double>(y[1]), static_cast<double>(y[2])}
        .clamped();
  }

  /// Argmax with ties to the lower class index.
  int predict_class(std::span<const int> ids) const {
    if (is_regression()) throw ContractError("predict_class on a regression head");
    NoGradScope<T> no_grad;
    const Tensor<T> y = forward(ids);
    int best = 0;
    for (std::size_t c = 1; c < y.numel(); ++c)
      if (y[c] > y[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
    return best;
  }

  std::vector<double> class_probs(std::span<const int> ids) const {
    NoGradScope<T> no_grad;
    const Tensor<T> p = softmax(forward(ids), 1);
    return std::vector<double>(p.data().begin(), p.data().end());
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    encoder.collect(out, prefix + ".encoder");
    head.collect(out, prefix + ".head");
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    collect(out, task_name(task_));
    return out;
  }

  TextEncoder<T> encoder;
  LinearLayer<T> head;

 private:
  static std::size_t outputs(PredictorTask task, const PredictorConfig& cfg) {
    if (task == PredictorTask::kPersonality) return 3;
    if (cfg.n_classes < 2) throw ContractError("predictor: classification needs at least two classes");
    return cfg.n_classes;
  }

  PredictorTask task_ = PredictorTask::kPersonality;
  PredictorConfig cfg_;
};

struct PredictorReport {
  std::string task;
  std::size_t n_eval = 0;
  // classification
  std::optional<double> accuracy, balanced_accuracy, f1;
  // regression: mean over traits, plus per-trait values
  std::optional<double> pearson, spearman;
  std::array<std::optional<double>, 3> trait_pearson, trait_spearman;
  std::vector<double> epoch_loss;
  std::vector<std::string> undefined;  // names of metrics that could not be computed

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["task"] = task;
    j["accuracy"] = json_or_null(accuracy);
    j["balanced_accuracy"] = json_or_null(balanced_accuracy);
    j["f1"] = json_or_null(f1);
    j["pearson"] = json_or_null(pearson);
    j["spearman"] = json_or_null(spearman);
    j["n_eval"] = n_eval;
    if (task == "personality") {
      const char* names[] = {"extraversion", "introverted", "thinking"};
      for (std::size_t k = 0; k < 3; ++k)
        j["per_trait"][names[k]] = {{"pearson", json_or_null(trait_pearson[k])},
                                    {"spearman", json_or_null(trait_spearman[k])}};
    }
    j["undefined"] = undefined;
    j["epoch_loss"] = epoch_loss;
    return j;
  }
};

template <typename T>
PredictorReport evaluate_predictor(const TextPredictor<T>& model, const std::vector<LabeledText>& items) {
  PredictorReport r;
  r.task = task_name(model.task());
  r.n_eval = items.size();
  if (model.is_regression()) {
    std::array<std::vector<double>, 3> gold, pred;
    for (const auto& it : items) {
      const auto p = model.predict_profile(it.ids).as_array();
      for (std::size_t k = 0; k < 3; ++k) {
        gold[k].push_back(it.target[k]);
        pred[k].push_back(p[k]);
      }
    }
    double ps = 0, ss = 0;
    bool p_ok = true, s_ok = true;
    const char* names[] = {"extraversion", "introverted", "thinking"};
    for (std::size_t k = 0; k < 3; ++k) {
      r.trait_pearson[k] = styemp::pearson(gold[k], pred[k]);
      r.trait_spearman[k] = styemp::spearman(gold[k], pred[k]);
      if (r.trait_pearson[k])
        ps += *r.trait_pearson[k];
      else {
        p_ok = false;
        r.undefined.push_back(std::string("pearson.") + names[k]);
      }
      if (r.trait_spearman[k])
        ss += *r.trait_spearman[k];
      else {
        s_ok = false;
        r.undefined.push_back(std::string("spearman.") + names[k]);
      }
    }
    if (p_ok) r.pearson = ps / 3;
    if (s_ok) r.spearman = ss / 3;
    r.undefined.push_back("accuracy");
    r.undefined.push_back("balanced_accuracy");
    r.undefined.push_back("f1");
  } else {
    std::vector<int> gold, pred;
    for (const auto& it : items) {
      gold.push_back(it.label);
      pred.push_back(model.predict_class(it.ids));
    }
    if (!items.empty()) {
      const auto m = classification_metrics(gold, pred, model.n_classes());
      r.accuracy = m.accuracy;
      r.balanced_accuracy = m.balanced_accuracy;
      r.f1 = m.f1;
    }
    if (!r.accuracy) r.undefined.push_back("accuracy");
    if (!r.balanced_accuracy) r.undefined.push_back("balanced_accuracy");
    if (!r.f1) r.undefined.push_back("f1");
    r.undefined.push_back("pearson");
    r.undefined.push_back("spearman");
  }
  return r;
}

/// Seeded mini-batch training; per-example gradients accumulate into one
/// update per batch (mean loss).
template <typename T>
PredictorReport train_predictor(TextPredictor<T>& model, const std::vector<LabeledText>& train,
                                const std::vector<LabeledText>& eval) {
  if (train.empty()) throw ContractError("train_predictor: no training items");
  const auto& cfg = model.config();
  Adam<T> opt(model.parameters(), cfg.optim);
  Rng rng(derive_seed(cfg.seed, "predictor-order"));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> epoch_loss;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double total = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      const T w = T(1) / static_cast<T>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        Tape<T> tape;
        TapeScope<T> scope(tape);
        const Tensor<T> loss = model.loss(train[order[i]]);
        total += static_cast<double>(loss.item());
        tape.backward(scale(loss, w));
      }
      opt.step();
    }
    epoch_loss.push_back(total / static_cast<double>(train.size()));
  }
  PredictorReport r = evaluate_predictor(model, eval);
  r.epoch_loss = epoch_loss;
  return r;
}

/// Auxiliary models: trait regressor plus ER/IP/EX, intent and emotion
/// classifiers.
template <typename T>
struct PredictorSuite {
  TextPredictor<T> personality, er, ip, ex, intent, emotion;

  TextPredictor<T>& get(PredictorTask t) {
    switch (t) {
      case PredictorTask::kPersonality: return personality;
      case PredictorTask::kER: return er;
      case PredictorTask::kIP: return ip;
      case PredictorTask::kEX: return ex;
      case PredictorTask::kIntent: return intent;
      case PredictorTask::kEmotion: return emotion;
      default: throw ContractError("predictor suite has no " + task_name(t) + " model");
    }
  }

  PersonalityProfile predict_personality(std::span<const int> ids) const {
    if (ids.empty()) throw ContractError("predict_personality: empty text");
    return personality.predict_profile(ids);
  }

  /// Mean of per-response profiles, clamped.
  PersonalityProfile estimate_listener_personality(const std::vector<std::vector<int>>& pool) const {
    if (pool.empty()) throw ContractError("estimate_listener_personality: empty pool");
    std::vector<PersonalityProfile> profiles;
    for (const auto& ids : pool) profiles.push_back(predict_personality(ids));
    return mean_profile(profiles);
  }

  /// Binary mechanisms true iff P(class 1) > 0.5; intent and emotion by argmax.
  EmpathySignals classify_empathy(std::span<const int> ids) const {
    if (ids.empty()) throw ContractError("classify_empathy: empty response");
    EmpathySignals s;
    s.emotional_reaction = er.class_probs(ids)[1] > 0.5;
    s.interpretation = ip.class_probs(ids)[1] > 0.5;
    s.exploration = ex.class_probs(ids)[1] > 0.5;
    s.intent = intent.predict_class(ids);
    s.emotion = emotion.predict_class(ids);
    return s;
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    for (const auto* m : {&personality, &er, &ip, &ex, &intent, &emotion}) m->collect(out, task_name(m->task()));
    return out;
  }
};

inline std::size_t default_classes(PredictorTask t, std::size_t n_archetypes = 2) {
  switch (t) {
    case PredictorTask::kPersonality: return 0;
    case PredictorTask::kER:
    case PredictorTask::kIP:
    case PredictorTask::kEX: return 2;
    case PredictorTask::kIntent: return kIntents.size();
    case PredictorTask::kEmotion: return kEmotions.size();
    case PredictorTask::kStyle: return n_archetypes;
  }
  return 2;
}

template <typename T>
PredictorSuite<T> make_predictor_suite(const PredictorConfig& base, std::uint64_t seed) {
  PredictorSuite<T> s;
  auto build = [&](PredictorTask t) {
    PredictorConfig c = base;
    c.n_classes = std::max<std::size_t>(2, default_classes(t));
    c.seed = derive_seed(seed, task_name(t));
    Rng rng(derive_seed(seed, "init-" + task_name(t)));
    return TextPredictor<T>(t, c, rng);
  };
  s.personality = build(PredictorTask::kPersonality);
  s.er = build(PredictorTask::kER);
  s.ip = build(PredictorTask::kIP);
  s.ex = build(PredictorTask::kEX);
  s.intent = build(PredictorTask::kIntent);
  s.emotion = build(PredictorTask::kEmotion);
  return s;
}

}  // namespace styemp
