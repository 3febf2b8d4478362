#pragma once

// Constants of the default two-domain benchmark. Five classes:
//   0 background, 1 building, 2 road, 3 water, 4 agriculture.
// The source domain is agriculture-heavy with small built structures; the
// target domain is building-heavy with large built structures, small water
// bodies and small fields. Every class's mean colour moves between domains
// by at least one intra-class standard deviation.

#include <array>

namespace covalign::benchmark {

inline constexpr std::size_t kClasses = 5;
inline constexpr std::size_t kChannels = 3;
inline constexpr std::size_t kImageSize = 64;

inline constexpr std::array<const char*, kClasses> kClassNames{"background", "building", "road", "water",
                                                               "agriculture"};

inline constexpr std::array<double, kClasses> kSourcePriors{0.30, 0.08, 0.07, 0.15, 0.40};
inline constexpr std::array<double, kClasses> kTargetPriors{0.30, 0.38, 0.17, 0.10, 0.05};

// {min, max} object extent in pixels; entry 0 (background) is unused.
inline constexpr std::array<std::array<double, 2>, kClasses> kSourceScale{{
    {1, 1}, {4, 10}, {4, 12}, {8, 20}, {12, 28}}};
inline constexpr std::array<std::array<double, 2>, kClasses> kTargetScale{{
    {1, 1}, {10, 24}, {10, 28}, {3, 9}, {4, 12}}};

inline constexpr double kClassSd = 0.10;
inline constexpr double kNoiseSd = 0.05;

inline constexpr std::array<std::array<double, kChannels>, kClasses> kSourceMeans{{
    {0.45, 0.45, 0.45},
    {0.85, 0.45, 0.35},
    {0.70, 0.70, 0.80},
    {0.15, 0.25, 0.60},
    {0.30, 0.70, 0.25},
}};

inline constexpr std::array<std::array<double, kChannels>, kClasses> kTargetMeans{{
    {0.54, 0.50, 0.42},
    {0.85, 0.53, 0.45},
    {0.62, 0.66, 0.90},
    {0.20, 0.33, 0.68},
    {0.38, 0.78, 0.28},
}};

}  // namespace covalign::benchmark
