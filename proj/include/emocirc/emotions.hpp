#pragma once

#include <array>
#include <cstddef>
#include <string>

#include "errors.hpp"

namespace emocirc {

// Fixed emotion order; ties and exports all use this ordering.
inline constexpr std::size_t kEmotionCount = 6;
inline const std::array<std::string, kEmotionCount> kEmotions = {
    "anger", "sadness", "happiness", "fear", "surprise", "disgust"};

inline std::size_t emotion_index(const std::string& name) {
    for (std::size_t e = 0; e < kEmotionCount; ++e)
        if (kEmotions[e] == name) return e;
    throw ContractViolation("unknown emotion '" + name + "'");
}

inline const std::array<std::string, 3> kValences = {"positive", "neutral", "negative"};

}  // namespace emocirc
