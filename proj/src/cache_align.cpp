#include "lcf/cache_align.hpp"

#include <algorithm>

#include "lcf/errors.hpp"

namespace lcf {

AlignStrategy align_strategy_from(const std::string& name) {
  if (name == "first") return AlignStrategy::kFirst;
  if (name == "last") return AlignStrategy::kLast;
  if (name == "longest") return AlignStrategy::kLongest;
  throw InputError("unknown alignment strategy '" + name + "'");
}

std::string align_strategy_name(AlignStrategy s) {
  switch (s) {
    case AlignStrategy::kFirst: return "first";
    case AlignStrategy::kLast: return "last";
    case AlignStrategy::kLongest: return "longest";
  }
  return "?";
}

AlignmentMap build_alignment(int sharer_len, int receiver_len, AlignStrategy strategy) {
  if (sharer_len < 1 || receiver_len < 1)
    throw ContractError("build_alignment: lengths must be >= 1");
  AlignmentMap m;
  m.strategy = strategy;
  m.sharer_pos.resize(static_cast<size_t>(receiver_len));
  for (int r = 0; r < receiver_len; ++r) {
    int s = 0;
    switch (strategy) {
      case AlignStrategy::kFirst:
        s = std::min(r, sharer_len - 1);
        break;
      case AlignStrategy::kLast:
        s = std::clamp(r + sharer_len - receiver_len, 0, sharer_len - 1);
        break;
      case AlignStrategy::kLongest:
        s = static_cast<int>(static_cast<int64_t>(r) * sharer_len / receiver_len);
        break;
    }
    m.sharer_pos[static_cast<size_t>(r)] = s;
  }
  return m;
}

}  // namespace lcf
