#pragma once

#include <string>

#include "lcf/errors.hpp"

namespace lcf {

// Fixed symbolic vocabulary shared by sharer and receiver: control tokens,
// ten digits, then key and value tokens. Token alignment across the two
// models is therefore the identity.
struct Vocab {
  int n_keys = 16;
  int n_values = 16;

  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kSep = 2;   // between key/value pairs
  static constexpr int kMap = 3;   // "maps to" marker inside a pair
  static constexpr int kQuery = 4; // question marker
  static constexpr int kAnswer = 5;
  static constexpr int kStop = 6;
  static constexpr int kDigit0 = 7;  // ten digit tokens

  int key_base() const { return kDigit0 + 10; }
  int value_base() const { return key_base() + n_keys; }
  int size() const { return value_base() + n_values; }

  int digit(int d) const { return kDigit0 + d; }
  int key(int i) const { return key_base() + i; }
  int value(int i) const { return value_base() + i; }
  bool is_value(int id) const { return id >= value_base() && id < size(); }

  std::string token_name(int id) const {
    switch (id) {
      case kPad: return "<pad>";
      case kBos: return "<bos>";
      case kSep: return ";";
      case kMap: return ":";
      case kQuery: return "?";
      case kAnswer: return "=";
      case kStop: return "<stop>";
      default: break;
    }
    if (id >= kDigit0 && id < kDigit0 + 10) return std::to_string(id - kDigit0);
    if (id >= key_base() && id < key_base() + n_keys) return "K" + std::to_string(id - key_base());
    if (id >= value_base() && id < size()) return "V" + std::to_string(id - value_base());
    throw InputError("token id " + std::to_string(id) + " outside vocabulary");
  }
};

}  // namespace lcf
