#pragma once

#include <array>
#include <string_view>

namespace brivl::corpus {

// Word lists shared by the synthetic scene generator and the vocabulary.
inline constexpr std::array<std::string_view, 3> kShapes{"circle", "square", "triangle"};
inline constexpr std::array<std::string_view, 6> kColors{"red", "green", "blue", "yellow", "purple", "orange"};
inline constexpr std::array<std::string_view, 2> kSizes{"small", "large"};
inline constexpr std::array<std::string_view, 4> kBackgrounds{"plain", "stripes", "checker", "noise"};
inline constexpr std::array<std::string_view, 8> kFillers{"nice", "day", "photo", "picture",
                                                          "image", "cool", "today", "look"};
inline constexpr std::array<std::string_view, 2> kGlue{"a", "and"};

// RGB of each named color, matching kColors.
inline constexpr std::array<std::array<float, 3>, 6> kColorRgb{{
    {0.90f, 0.12f, 0.10f},
    {0.10f, 0.75f, 0.15f},
    {0.12f, 0.25f, 0.95f},
    {0.95f, 0.90f, 0.10f},
    {0.60f, 0.15f, 0.75f},
    {1.00f, 0.55f, 0.05f},
}};

}  // namespace brivl::corpus
