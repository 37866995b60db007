#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <string_view>

#include "styemp/error.hpp"

namespace styemp {

inline constexpr std::array<std::string_view, 9> kIntents = {
    "agreeing",  "acknowledging", "encouraging", "consoling", "sympathizing",
    "suggesting", "questioning",  "wishing",     "neutral"};

// Toy inventory; the class count is read from this table everywhere.
inline constexpr std::array<std::string_view, 8> kEmotions = {"joyful",    "sad",     "angry",    "afraid",
                                                             "surprised", "anxious", "grateful", "lonely"};

inline int intent_index(std::string_view name) {
  for (std::size_t i = 0; i < kIntents.size(); ++i)
    if (kIntents[i] == name) return static_cast<int>(i);
  throw SchemaError("unknown intent '" + std::string(name) + "'");
}

inline int emotion_index(std::string_view name) {
  for (std::size_t i = 0; i < kEmotions.size(); ++i)
    if (kEmotions[i] == name) return static_cast<int>(i);
  throw SchemaError("unknown emotion '" + std::string(name) + "'");
}

/// Big 5 extraversion in [-1,1]; MBTI introverted and thinking intensities
/// in [0,1] (binarized at 0.5).
struct PersonalityProfile {
  double extraversion = 0.0;
  double introverted = 0.5;
  double thinking = 0.5;

  bool valid() const {
    return std::isfinite(extraversion) && std::isfinite(introverted) && std::isfinite(thinking) &&
           extraversion >= -1.0 && extraversion <= 1.0 && introverted >= 0.0 && introverted <= 1.0 &&
           thinking >= 0.0 && thinking <= 1.0;
  }

  PersonalityProfile clamped() const {
    return {std::clamp(extraversion, -1.0, 1.0), std::clamp(introverted, 0.0, 1.0), std::clamp(thinking, 0.0, 1.0)};
  }

  std::array<double, 3> as_array() const { return {extraversion, introverted, thinking}; }

  friend bool operator==(const PersonalityProfile&, const PersonalityProfile&) = default;
};

/// Communication-mechanism flags plus intent and emotion class indices.
struct EmpathySignals {
  bool emotional_reaction = false;
  bool interpretation = false;
  bool exploration = false;
  int intent = 0;
  int emotion = 0;

  friend bool operator==(const EmpathySignals&, const EmpathySignals&) = default;
};

}  // namespace styemp
