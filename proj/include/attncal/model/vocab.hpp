#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace attncal::model {

// Fixed toy vocabulary. Object, color, count and side words are laid out in
// contiguous blocks so the synthetic world can index them directly.
namespace tok {
inline constexpr std::size_t kEos = 0;
inline constexpr std::size_t kYes = 1;
inline constexpr std::size_t kNo = 2;
inline constexpr std::size_t kIs = 3;
inline constexpr std::size_t kThere = 4;
inline constexpr std::size_t kA = 5;
inline constexpr std::size_t kQuestion = 6;
inline constexpr std::size_t kThe = 7;
inline constexpr std::size_t kOn = 8;
inline constexpr std::size_t kAre = 9;
inline constexpr std::size_t kDescribe = 10;
inline constexpr std::size_t kImage = 11;
inline constexpr std::size_t kColon = 12;
inline constexpr std::size_t kFirstObject = 13;
inline constexpr std::size_t kNumObjects = 12;
inline constexpr std::size_t kFirstColor = kFirstObject + kNumObjects;
inline constexpr std::size_t kNumColors = 3;
inline constexpr std::size_t kFirstCount = kFirstColor + kNumColors;
inline constexpr std::size_t kNumCounts = 3;  // one, two, three
inline constexpr std::size_t kFirstSide = kFirstCount + kNumCounts;
inline constexpr std::size_t kNumSides = 4;  // left, right, top, bottom
inline constexpr std::size_t kVocabSize = kFirstSide + kNumSides;
}  // namespace tok

enum class Side { kLeft = 0, kRight = 1, kTop = 2, kBottom = 3 };

const std::array<std::string_view, tok::kVocabSize>& vocabulary();
std::string_view token_text(std::size_t id);
std::optional<std::size_t> token_id(std::string_view text);

inline std::size_t object_token(std::size_t object) { return tok::kFirstObject + object; }
inline std::size_t color_token(std::size_t color) { return tok::kFirstColor + color; }
inline std::size_t count_token(std::size_t count) { return tok::kFirstCount + count - 1; }
inline std::size_t side_token(Side s) { return tok::kFirstSide + static_cast<std::size_t>(s); }
std::optional<std::size_t> object_of_token(std::size_t id);

std::string detokenize(const std::vector<std::size_t>& ids);

}  // namespace attncal::model
