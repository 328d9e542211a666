#pragma once

#include <string>
#include <vector>

namespace lcf {

enum class AlignStrategy { kFirst, kLast, kLongest };

AlignStrategy align_strategy_from(const std::string& name);
std::string align_strategy_name(AlignStrategy s);

// Maps each receiver position to a sharer position when the two prefixes
// differ in length. The map is nondecreasing and in-bounds by construction.
struct AlignmentMap {
  AlignStrategy strategy = AlignStrategy::kFirst;
  std::vector<int> sharer_pos;  // one entry per receiver position

  int receiver_len() const { return static_cast<int>(sharer_pos.size()); }
};

// "first":   s(r) = min(r, Ls-1)
// "last":    s(r) = clamp(r + Ls - Lr, 0, Ls-1)
// "longest": s(r) = floor(r * Ls / Lr)
AlignmentMap build_alignment(int sharer_len, int receiver_len, AlignStrategy strategy);

}  // namespace lcf
