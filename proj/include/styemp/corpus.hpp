#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "styemp/error.hpp"
#include "styemp/random.hpp"
#include "styemp/types.hpp"

namespace styemp {

// ---------------------------------------------------------------------------
// Records

struct Turn {
  std::string role;  // "speaker" | "listener"
  std::string text;

  friend bool operator==(const Turn&, const Turn&) = default;
};

struct DialogueExample {
  std::string conv_id;
  std::vector<Turn> turns;
  std::string listener_id;
  std::string response;
  int emotion = 0;
  EmpathySignals empathy;  // emotion field mirrors `emotion`
  std::optional<PersonalityProfile> personality;

  friend bool operator==(const DialogueExample&, const DialogueExample&) = default;
};

using Dataset = std::vector<DialogueExample>;

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == '\n' || text[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < text.size() && !(text[j] == ' ' || text[j] == '\t' || text[j] == '\n' || text[j] == '\r')) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lexicon of the synthetic grammar

namespace lexicon {

struct EmotionLexicon {
  std::array<std::string_view, 3> adjectives;
  std::array<std::string_view, 4> events;   // speaker-side description
  std::array<std::string_view, 4> objects;  // listener-side echo, aligned with events
  std::string_view reaction;                // emotional-reaction segment
};

inline constexpr std::array<EmotionLexicon, 8> kEmotionLexicon = {{
    {{"happy", "thrilled", "excited"},
     {"i got a new job", "my team won the final", "we adopted a puppy", "my sister had a baby"},
     {"new job", "big win", "new puppy", "baby niece"},
     "that makes me so happy"},
    {{"sad", "down", "heartbroken"},
     {"my dog passed away", "my best friend moved away", "i failed my exam", "my grandma is sick"},
     {"dog", "best friend", "exam", "grandma"},
     "that makes me really sad"},
    {{"angry", "furious", "annoyed"},
     {"my neighbor broke my fence", "someone stole my bike", "my boss yelled at me", "the store cheated me"},
     {"fence", "bike", "boss", "store"},
     "that makes me mad too"},
    {{"scared", "terrified", "afraid"},
     {"i heard noises at night", "a huge spider was in my room", "i have surgery next week",
      "the storm broke our window"},
     {"night noises", "spider", "surgery", "window"},
     "that would scare me too"},
    {{"surprised", "shocked", "amazed"},
     {"my friends threw me a party", "i found money on the street", "my old teacher called me",
      "it snowed in may"},
     {"party", "money", "teacher", "snow"},
     "i am amazed too"},
    {{"nervous", "anxious", "worried"},
     {"my interview is tomorrow", "i have to give a speech", "my test results come monday",
      "i am moving to a new city"},
     {"interview", "speech", "results", "move"},
     "i would be nervous too"},
    {{"grateful", "thankful", "blessed"},
     {"my parents paid my rent", "a stranger fixed my car", "my coworker covered my shift",
      "my friend cooked me dinner"},
     {"parents", "car", "coworker", "dinner"},
     "that warms my heart"},
    {{"lonely", "isolated", "alone"},
     {"my roommate moved out", "nobody called me on my birthday", "i spend every weekend alone",
      "my family lives far away"},
     {"roommate", "birthday", "weekends", "family"},
     "that makes me feel for you"},
}};

inline constexpr std::array<std::string_view, 4> kSpeakerFollowups = {
    "it happened last week", "i still think about it", "i do not know what to do", "everyone noticed it"};

// Per intent: three surface phrases and two template families. A family
// fixes which communication-mechanism segments the response carries.
struct IntentLexicon {
  std::array<std::string_view, 3> phrases;
  std::array<std::array<bool, 3>, 2> families;  // {er, ip, ex}
};

inline constexpr std::array<IntentLexicon, 9> kIntentLexicon = {{
    {{"you are right", "i totally agree", "that is true"}, {{{false, true, false}, {true, false, false}}}},
    {{"i see what you mean", "that makes sense", "i hear you"}, {{{false, true, false}, {true, true, false}}}},
    {{"you can do it", "keep going", "you got this"}, {{{true, false, false}, {false, false, true}}}},
    {{"it will be okay", "things will get better", "you will get through this"},
     {{{true, true, false}, {true, false, false}}}},
    {{"i am so sorry", "that is really unfortunate", "my condolences"}, {{{true, false, false}, {true, true, false}}}},
    {{"maybe talk to someone", "you could try to relax", "maybe take a break"},
     {{{false, true, false}, {false, false, true}}}},
    {{"did you expect it", "was it hard", "who was with you"}, {{{false, false, true}, {false, true, true}}}},
    {{"i hope it goes well", "good luck with everything", "best wishes to you"},
     {{{true, false, false}, {false, false, false}}}},
    {{"ok", "i guess so", "alright then"}, {{{false, false, false}, {false, false, true}}}},
}};

inline constexpr std::array<std::string_view, 3> kInterpretation = {"i understand how you feel", "i know that is hard",
                                                                    "i can see why"};
inline constexpr std::array<std::string_view, 3> kExploration = {"what happened next", "how are you holding up",
                                                                 "tell me more"};

// Each archetype owns an interjection set. The extraversion pole drives the
// closing mark and the social extra; the thinking pole drives the closing
// phrase.
inline constexpr std::array<std::array<std::string_view, 3>, 4> kArchetypeInterjections = {{
    {"wow", "yay", "omg"}, {"hmm", "well", "indeed"}, {"bet", "whoa", "boom"}, {"oh", "aw", "okay"}}};
inline constexpr std::string_view kExtrovertMark = "!";
inline constexpr std::string_view kIntrovertMark = ".";
inline constexpr std::array<std::string_view, 3> kExtrovertExtras = {"call me anytime", "let us hang out soon",
                                                                     "tell everyone"};
inline constexpr std::array<std::string_view, 3> kThinkingTails = {"logically speaking", "make a plan",
                                                                   "consider the facts"};
inline constexpr std::array<std::string_view, 3> kFeelingTails = {"sending love", "big hug", "my heart goes out"};

}  // namespace lexicon

// ---------------------------------------------------------------------------
// Tokenizer

inline std::string signal_token_er(bool v) { return v ? "<er:1>" : "<er:0>"; }
inline std::string signal_token_ip(bool v) { return v ? "<ip:1>" : "<ip:0>"; }
inline std::string signal_token_ex(bool v) { return v ? "<ex:1>" : "<ex:0>"; }
inline std::string signal_token_intent(int i) { return "<intent:" + std::string(kIntents.at(i)) + ">"; }
inline std::string signal_token_emotion(int e) { return "<emo:" + std::string(kEmotions.at(e)) + ">"; }

/// Control-token rendering of empathy signals, e.g.
/// "<er:1> <ip:0> <ex:1> <intent:questioning> <emo:sad>".
inline std::string signal_text(const EmpathySignals& s) {
  return signal_token_er(s.emotional_reaction) + " " + signal_token_ip(s.interpretation) + " " +
         signal_token_ex(s.exploration) + " " + signal_token_intent(s.intent) + " " + signal_token_emotion(s.emotion);
}

/// Closed word-level vocabulary. Ids 0..3 are <pad>, <unk>, <sep>, <eos>;
/// empathy and emotion control tokens follow, then the lexicon's words in
/// lexicographic order.
class Tokenizer {
 public:
  static constexpr int kPad = 0, kUnk = 1, kSep = 2, kEos = 3;

  Tokenizer() {
    for (const char* t : {"<pad>", "<unk>", "<sep>", "<eos>"}) add(t);
    for (bool v : {false, true}) add(signal_token_er(v));
    for (bool v : {false, true}) add(signal_token_ip(v));
    for (bool v : {false, true}) add(signal_token_ex(v));
    for (std::size_t i = 0; i < kIntents.size(); ++i) add(signal_token_intent(static_cast<int>(i)));
    for (std::size_t e = 0; e < kEmotions.size(); ++e) add(signal_token_emotion(static_cast<int>(e)));
    std::set<std::string> words;
    auto take = [&](std::string_view phrase) {
      for (auto& w : split_words(phrase)) words.insert(w);
    };
    using namespace lexicon;
    for (const auto& e : kEmotionLexicon) {
      for (auto p : e.adjectives) take(p);
      for (auto p : e.events) take(p);
      for (auto p : e.objects) take(p);
      take(e.reaction);
    }
    for (auto p : kSpeakerFollowups) take(p);
    for (const auto& in : kIntentLexicon)
      for (auto p : in.phrases) take(p);
    for (auto p : kInterpretation) take(p);
    for (auto p : kExploration) take(p);
    for (const auto& set : kArchetypeInterjections)
      for (auto p : set) take(p);
    for (auto p : kExtrovertExtras) take(p);
    for (auto p : kThinkingTails) take(p);
    for (auto p : kFeelingTails) take(p);
    const std::string_view glue[] = {"i feel so", "because", "i am so", "it was really", "about your",
                                     ",",         ".",       "!"};
    for (auto p : glue)
      take(p);
    for (const auto& w : words) add(w);
  }

  std::size_t size() const { return words_.size(); }

  int id(std::string_view word) const {
    auto it = ids_.find(std::string(word));
    return it == ids_.end() ? kUnk : it->second;
  }

  const std::string& word(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size())
      throw ContractError("tokenizer: id " + std::to_string(id) + " outside vocabulary");
    return words_[static_cast<std::size_t>(id)];
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> out;
    for (const auto& w : split_words(text)) out.push_back(id(w));
    return out;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += word(ids[i]);
    }
    return out;
  }

  const std::vector<std::string>& words() const { return words_; }

 private:
  void add(const std::string& w) {
    if (ids_.count(w)) return;
    ids_[w] = static_cast<int>(words_.size());
    words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::map<std::string, int> ids_;
};

// ---------------------------------------------------------------------------
// JSONL

inline nlohmann::json to_json(const DialogueExample& ex) {
  nlohmann::json j;
  j["conv_id"] = ex.conv_id;
  j["turns"] = nlohmann::json::array();
  for (const auto& t : ex.turns) j["turns"].push_back({{"role", t.role}, {"text", t.text}});
  j["listener_id"] = ex.listener_id;
  j["response"] = ex.response;
  j["emotion"] = std::string(kEmotions.at(ex.emotion));
  j["empathy"] = {{"er", ex.empathy.emotional_reaction},
                  {"ip", ex.empathy.interpretation},
                  {"ex", ex.empathy.exploration},
                  {"intent", std::string(kIntents.at(ex.empathy.intent))}};
  if (ex.personality)
    j["personality"] = {{"extraversion", ex.personality->extraversion},
                        {"introverted", ex.personality->introverted},
                        {"thinking", ex.personality->thinking}};
  else
    j["personality"] = nullptr;
  return j;
}

inline DialogueExample from_json(const nlohmann::json& j, std::size_t line = 0) {
  auto need = [&](const nlohmann::json& obj, const char* field) -> const nlohmann::json& {
    if (!obj.is_object() || !obj.contains(field)) throw SchemaError(std::string("missing field '") + field + "'", line);
    return obj.at(field);
  };
  try {
    DialogueExample ex;
    ex.conv_id = need(j, "conv_id").get<std::string>();
    for (const auto& t : need(j, "turns")) {
      Turn turn{need(t, "role").get<std::string>(), need(t, "text").get<std::string>()};
      if (turn.role != "speaker" && turn.role != "listener")
        throw SchemaError("turn role must be speaker or listener, got '" + turn.role + "'", line);
      ex.turns.push_back(std::move(turn));
    }
    if (ex.turns.empty()) throw SchemaError("field 'turns' must hold at least one turn", line);
    ex.listener_id = need(j, "listener_id").get<std::string>();
    if (ex.listener_id.empty()) throw SchemaError("field 'listener_id' is empty", line);
    ex.response = need(j, "response").get<std::string>();
    ex.emotion = emotion_index(need(j, "emotion").get<std::string>());
    const auto& emp = need(j, "empathy");
    ex.empathy.emotional_reaction = need(emp, "er").get<bool>();
    ex.empathy.interpretation = need(emp, "ip").get<bool>();
    ex.empathy.exploration = need(emp, "ex").get<bool>();
    ex.empathy.intent = intent_index(need(emp, "intent").get<std::string>());
    ex.empathy.emotion = ex.emotion;
    const auto& p = need(j, "personality");
    if (!p.is_null()) {
      PersonalityProfile prof{need(p, "extraversion").get<double>(), need(p, "introverted").get<double>(),
                              need(p, "thinking").get<double>()};
      if (!prof.valid()) throw SchemaError("personality values out of range", line);
      ex.personality = prof;
    }
    return ex;
  } catch (const SchemaError& e) {
    if (e.line() == 0 && line != 0) throw SchemaError(e.what(), line);
    throw;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("wrong field type: ") + e.what(), line);
  }
}

inline std::string to_jsonl(const Dataset& data) {
  std::string out;
  for (const auto& ex : data) {
    out += to_json(ex).dump();
    out += '\n';
  }
  return out;
}

inline void save_jsonl(const Dataset& data, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << to_jsonl(data);
}

inline Dataset parse_jsonl(std::istream& is) {
  Dataset out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError(std::string("malformed JSON: ") + e.what(), n);
    }
    out.push_back(from_json(j, n));
  }
  return out;
}

inline Dataset load_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DependencyError("dataset not found: " + path.string());
  return parse_jsonl(is);
}

// ---------------------------------------------------------------------------
// Listener pools

/// All responses of `listener_id` in corpus order.
inline std::vector<std::string> listener_pool(const Dataset& data, const std::string& listener_id) {
  std::vector<std::string> out;
  for (const auto& ex : data)
    if (ex.listener_id == listener_id) out.push_back(ex.response);
  if (out.empty()) throw ContractError("unknown listener '" + listener_id + "'");
  return out;
}

/// Context turns joined by <sep>.
inline std::string context_text(const DialogueExample& ex) {
  std::string out;
  for (std::size_t i = 0; i < ex.turns.size(); ++i) {
    if (i) out += " <sep> ";
    out += ex.turns[i].text;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct ListenerArchetype {
  int id = 0;
  std::string name;
  PersonalityProfile traits;
  std::array<double, kIntents.size()> intent_preference{};
  bool extrovert = true;
  bool thinker = false;
};

/// Archetype table; the first `n` rows are used.
inline std::vector<ListenerArchetype> default_archetypes(std::size_t n) {
  std::vector<ListenerArchetype> all = {
      // agreeing acknowledging encouraging consoling sympathizing suggesting questioning wishing neutral
      {0, "enthusiast", {0.7, 0.2, 0.25}, {0.14, 0.04, 0.26, 0.08, 0.14, 0.04, 0.08, 0.18, 0.04}, true, false},
      {1, "analyst", {-0.6, 0.8, 0.8}, {0.06, 0.2, 0.04, 0.04, 0.04, 0.26, 0.22, 0.04, 0.1}, false, true},
      {2, "commander", {0.6, 0.25, 0.75}, {0.16, 0.04, 0.22, 0.04, 0.04, 0.24, 0.14, 0.08, 0.04}, true, true},
      {3, "confidant", {-0.5, 0.75, 0.2}, {0.06, 0.18, 0.06, 0.26, 0.22, 0.06, 0.08, 0.06, 0.02}, false, false},
  };
  if (n < 2 || n > all.size())
    throw ContractError("n_archetypes must be between 2 and " + std::to_string(all.size()));
  all.resize(n);
  return all;
}

enum class CorpusMode { kDialogue, kPredictor };

struct CorpusConfig {
  std::size_t n_listeners = 40;
  std::size_t convs_per_listener = 25;
  std::size_t n_archetypes = 2;
  std::uint64_t seed = 7;
  double style_purity = 0.9;  // chance a style slot uses the listener's own pole
  double jitter = 0.1;        // per-listener uniform trait jitter half-width
  CorpusMode mode = CorpusMode::kDialogue;
  std::string listener_prefix = "L";

  void validate() const {
    if (n_archetypes < 2) throw ContractError("corpus: n_archetypes must be >= 2");
    if (n_listeners < n_archetypes) throw ContractError("corpus: need at least one listener per archetype");
    if (convs_per_listener == 0 || convs_per_listener > 100)
      throw ContractError("corpus: convs_per_listener must be in 1..100");
    if (!(style_purity > 0.5 && style_purity <= 1.0)) throw ContractError("corpus: style_purity must be in (0.5,1]");
    if (!(jitter >= 0.0 && jitter < 0.5)) throw ContractError("corpus: jitter must be in [0,0.5)");
  }
};

struct SyntheticCorpus {
  Dataset train, valid, test;
  std::vector<ListenerArchetype> archetypes;
  std::map<std::string, int> listener_archetype;
  std::map<std::string, PersonalityProfile> listener_traits;

  Dataset all() const {
    Dataset out = train;
    out.insert(out.end(), valid.begin(), valid.end());
    out.insert(out.end(), test.begin(), test.end());
    return out;
  }
};

/// Distribution over the style-pole tokens (interjections, closing marks,
/// extras, closing phrases) implied by an archetype at a given purity.
inline std::map<std::string, double> style_signature(const ListenerArchetype& a, double purity) {
  using namespace lexicon;
  std::map<std::string, double> dist;
  auto spread = [&](std::span<const std::string_view> pool, double mass) {
    for (auto w : pool) dist[std::string(w)] += mass / static_cast<double>(pool.size());
  };
  const double own = purity, other = 1.0 - purity;
  // Four slots of equal weight: interjection, mark, extra-or-none, tail.
  for (std::size_t k = 0; k < kArchetypeInterjections.size(); ++k)
    spread(kArchetypeInterjections[k],
           (static_cast<std::size_t>(a.id) == k ? own : other / (kArchetypeInterjections.size() - 1)) / 4);
  dist[std::string(a.extrovert ? kExtrovertMark : kIntrovertMark)] += own / 4;
  dist[std::string(a.extrovert ? kIntrovertMark : kExtrovertMark)] += other / 4;
  spread(kExtrovertExtras, (a.extrovert ? own : other) / 4);
  dist["<none>"] += (a.extrovert ? other : own) / 4;
  spread(a.thinker ? kThinkingTails : kFeelingTails, own / 4);
  spread(a.thinker ? kFeelingTails : kThinkingTails, other / 4);
  return dist;
}

inline double total_variation(const std::map<std::string, double>& p, const std::map<std::string, double>& q) {
  std::set<std::string> keys;
  for (const auto& [k, v] : p) keys.insert(k);
  for (const auto& [k, v] : q) keys.insert(k);
  double tv = 0;
  for (const auto& k : keys) {
    const double a = p.count(k) ? p.at(k) : 0.0, b = q.count(k) ? q.at(k) : 0.0;
    tv += std::abs(a - b);
  }
  return 0.5 * tv;
}

namespace detail {

template <typename Pool>
std::string pick_from(const Pool& pool, Rng& rng) {
  return std::string(pool[rng.index(pool.size())]);
}

struct ListenerStyle {
  const ListenerArchetype* archetype;
  double purity;
};

inline void append(std::vector<std::string>& words, std::string_view phrase) {
  for (auto& w : split_words(phrase)) words.push_back(std::move(w));
}

// One listener utterance. Full responses carry mechanism segments and an
// echo of the speaker's event; context turns are short acknowledgements.
inline std::string listener_utterance(const ListenerStyle& style, int emotion, int event, int intent,
                                      const std::array<bool, 3>& mechanisms, bool full, Rng& rng) {
  using namespace lexicon;
  const auto& a = *style.archetype;
  std::size_t set = static_cast<std::size_t>(a.id);
  if (!rng.bernoulli(style.purity)) {
    set = rng.index(kArchetypeInterjections.size() - 1);
    if (set >= static_cast<std::size_t>(a.id)) ++set;
  }
  std::vector<std::string> words;
  words.push_back(pick_from(kArchetypeInterjections[set], rng));
  words.push_back(",");
  const auto& emo = kEmotionLexicon[static_cast<std::size_t>(emotion)];
  if (full && mechanisms[0]) append(words, emo.reaction);
  if (full && mechanisms[1]) append(words, pick_from(kInterpretation, rng));
  append(words, pick_from(kIntentLexicon[static_cast<std::size_t>(intent)].phrases, rng));
  if (full) {
    append(words, "about your");
    append(words, emo.objects[static_cast<std::size_t>(event)]);
  }
  if (full && mechanisms[2]) append(words, pick_from(kExploration, rng));
  const bool extra_slot = rng.bernoulli(style.purity) ? a.extrovert : !a.extrovert;
  if (extra_slot) append(words, pick_from(kExtrovertExtras, rng));
  const bool think_slot = rng.bernoulli(style.purity) ? a.thinker : !a.thinker;
  append(words, think_slot ? pick_from(kThinkingTails, rng) : pick_from(kFeelingTails, rng));
  const bool mark_slot = rng.bernoulli(style.purity) ? a.extrovert : !a.extrovert;
  words.push_back(std::string(mark_slot ? kExtrovertMark : kIntrovertMark));
  return join_words(words);
}

inline std::string speaker_opening(int emotion, int event, Rng& rng) {
  const auto& emo = lexicon::kEmotionLexicon[static_cast<std::size_t>(emotion)];
  const std::string adj = pick_from(emo.adjectives, rng);
  const std::string ev(emo.events[static_cast<std::size_t>(event)]);
  if (rng.bernoulli(0.5)) return "i feel so " + adj + " because " + ev + " .";
  return "i am so " + adj + " . " + ev + " .";
}

inline std::string speaker_followup(int emotion, Rng& rng) {
  const auto& emo = lexicon::kEmotionLexicon[static_cast<std::size_t>(emotion)];
  if (rng.bernoulli(0.4)) return "it was really " + pick_from(emo.adjectives, rng) + " .";
  return pick_from(lexicon::kSpeakerFollowups, rng) + " .";
}

inline int draw_intent(const ListenerArchetype& a, Rng& rng) {
  return static_cast<int>(rng.categorical(std::vector<double>(a.intent_preference.begin(), a.intent_preference.end())));
}

inline double round4(double v) { return std::round(v * 1e4) / 1e4; }

}  // namespace detail

/// Seeded generator. Each conversation is speaker -> listener -> speaker
/// followed by the listener response under study. Dialogue mode splits
/// conversations 8:1:1 with listeners shared across splits; predictor mode
/// splits listeners 8:1:1 within each archetype so no listener crosses
/// splits.
inline SyntheticCorpus generate_synthetic_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  SyntheticCorpus corpus;
  corpus.archetypes = default_archetypes(cfg.n_archetypes);
  for (std::size_t a = 0; a < corpus.archetypes.size(); ++a)
    for (std::size_t b = a + 1; b < corpus.archetypes.size(); ++b)
      if (total_variation(style_signature(corpus.archetypes[a], cfg.style_purity),
                          style_signature(corpus.archetypes[b], cfg.style_purity)) < 0.3)
        throw ContractError("corpus: archetype style signatures closer than 0.3 in total variation");

  Rng rng(derive_seed(cfg.seed, "corpus"));
  struct Listener {
    std::string id;
    int archetype;
    PersonalityProfile traits;
  };
  std::vector<Listener> listeners;
  const int width = cfg.n_listeners >= 1000 ? 4 : 3;
  for (std::size_t k = 0; k < cfg.n_listeners; ++k) {
    const int a = static_cast<int>(k % cfg.n_archetypes);
    const auto& base = corpus.archetypes[static_cast<std::size_t>(a)].traits;
    PersonalityProfile p{base.extraversion + rng.uniform(-cfg.jitter, cfg.jitter),
                         base.introverted + rng.uniform(-cfg.jitter, cfg.jitter),
                         base.thinking + rng.uniform(-cfg.jitter, cfg.jitter)};
    p = p.clamped();
    p = {detail::round4(p.extraversion), detail::round4(p.introverted), detail::round4(p.thinking)};
    std::string num = std::to_string(k);
    std::string id = cfg.listener_prefix + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(num.size()))), '0') + num;
    listeners.push_back({id, a, p});
    corpus.listener_archetype[id] = a;
    corpus.listener_traits[id] = p;
  }

  std::vector<std::vector<DialogueExample>> per_listener(listeners.size());
  std::set<std::string> seen_contexts;
  std::size_t conv_counter = 0;
  for (std::size_t c = 0; c < cfg.convs_per_listener; ++c) {
    for (std::size_t k = 0; k < listeners.size(); ++k) {
      const auto& L = listeners[k];
      const detail::ListenerStyle style{&corpus.archetypes[static_cast<std::size_t>(L.archetype)], cfg.style_purity};
      DialogueExample ex;
      for (int attempt = 0;; ++attempt) {
        ex = DialogueExample{};
        ex.emotion = static_cast<int>(rng.index(kEmotions.size()));
        const int event = static_cast<int>(rng.index(4));
        const int warmup_intent = detail::draw_intent(*style.archetype, rng);
        ex.turns.push_back({"speaker", detail::speaker_opening(ex.emotion, event, rng)});
        ex.turns.push_back(
            {"listener", detail::listener_utterance(style, ex.emotion, event, warmup_intent, {}, false, rng)});
        ex.turns.push_back({"speaker", detail::speaker_followup(ex.emotion, rng)});
        const int intent = detail::draw_intent(*style.archetype, rng);
        const auto& family =
            lexicon::kIntentLexicon[static_cast<std::size_t>(intent)].families[rng.index(2)];
        ex.response = detail::listener_utterance(style, ex.emotion, event, intent, family, true, rng);
        ex.empathy = {family[0], family[1], family[2], intent, ex.emotion};
        if (seen_contexts.insert(context_text(ex)).second) break;
        if (attempt > 1000) throw Error("corpus: could not draw a unique context");
      }
      ex.listener_id = L.id;
      ex.personality = L.traits;
      ex.conv_id = "c" + std::to_string(conv_counter++);
      per_listener[k].push_back(std::move(ex));
    }
  }

  if (cfg.mode == CorpusMode::kDialogue) {
    Dataset all;
    for (std::size_t c = 0; c < cfg.convs_per_listener; ++c)
      for (auto& pl : per_listener) all.push_back(pl[c]);
    std::vector<std::size_t> order(all.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    const std::size_t n = all.size();
    const std::size_t n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
    const std::size_t n_valid = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
    std::vector<int> split(n);
    for (std::size_t i = 0; i < n; ++i) split[order[i]] = i < n_train ? 0 : (i < n_train + n_valid ? 1 : 2);
    for (std::size_t i = 0; i < n; ++i) (split[i] == 0 ? corpus.train : split[i] == 1 ? corpus.valid : corpus.test).push_back(all[i]);
  } else {
    std::vector<int> split(listeners.size(), 0);
    for (std::size_t a = 0; a < cfg.n_archetypes; ++a) {
      std::vector<std::size_t> members;
      for (std::size_t k = 0; k < listeners.size(); ++k)
        if (static_cast<std::size_t>(listeners[k].archetype) == a) members.push_back(k);
      rng.shuffle(members.begin(), members.end());
      const std::size_t m = members.size();
      std::size_t n_test = std::max<std::size_t>(m >= 3 ? 1 : 0, static_cast<std::size_t>(std::llround(0.1 * m)));
      std::size_t n_valid = std::max<std::size_t>(m >= 3 ? 1 : 0, static_cast<std::size_t>(std::llround(0.1 * m)));
      for (std::size_t i = 0; i < m; ++i) split[members[i]] = i < n_test ? 2 : (i < n_test + n_valid ? 1 : 0);
    }
    for (std::size_t k = 0; k < listeners.size(); ++k)
      for (auto& ex : per_listener[k]) (split[k] == 0 ? corpus.train : split[k] == 1 ? corpus.valid : corpus.test).push_back(ex);
  }
  return corpus;
}

}  // namespace styemp
