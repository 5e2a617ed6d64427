#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <vector>

#include "xdk/decode_eval.hpp"

namespace xdk::test {

// Token strings over {0, 1, 2} with length <= 6, packed as base-4 digits
// (digit value = token + 1) so every string has a unique integer code.
inline std::uint32_t encode_string(const std::vector<Index>& s) {
  std::uint32_t code = 0;
  for (Index t : s) code = code * 4 + static_cast<std::uint32_t>(t + 1);
  return code;
}

inline std::vector<Index> decode_string(std::uint32_t code) {
  std::vector<Index> s;
  for (; code; code /= 4) s.insert(s.begin(), static_cast<Index>(code % 4) - 1);
  return s;
}

inline std::vector<std::vector<Index>> all_strings(Index max_len, Index alphabet) {
  std::vector<std::vector<Index>> out{{}};
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (static_cast<Index>(out[i].size()) == max_len) continue;
    for (Index a = 0; a < alphabet; ++a) {
      auto s = out[i];
      s.push_back(a);
      out.push_back(std::move(s));
    }
  }
  return out;
}

// Minimum number of single-token edits from `ref` to every string of length
// <= max_len, by breadth-first search over the edit graph. Some minimum
// script never passes through a string longer than both endpoints, so
// bounding the search at max_len is exact for targets within it.
inline std::vector<int> edit_distances_from(const std::vector<Index>& ref, Index max_len, Index alphabet) {
  std::vector<int> dist(1u << (2 * max_len + 2), -1);
  std::deque<std::vector<Index>> queue{ref};
  dist[encode_string(ref)] = 0;
  while (!queue.empty()) {
    const auto s = queue.front();
    queue.pop_front();
    const int d = dist[encode_string(s)];
    auto visit = [&](const std::vector<Index>& t) {
      if (static_cast<Index>(t.size()) > max_len) return;
      auto& slot = dist[encode_string(t)];
      if (slot >= 0) return;
      slot = d + 1;
      queue.push_back(t);
    };
    for (std::size_t i = 0; i < s.size(); ++i) {
      auto t = s;
      t.erase(t.begin() + static_cast<std::ptrdiff_t>(i));
      visit(t);
      for (Index a = 0; a < alphabet; ++a) {
        if (a == s[i]) continue;
        auto u = s;
        u[i] = a;
        visit(u);
      }
    }
    for (std::size_t i = 0; i <= s.size(); ++i) {
      for (Index a = 0; a < alphabet; ++a) {
        auto t = s;
        t.insert(t.begin() + static_cast<std::ptrdiff_t>(i), a);
        visit(t);
      }
    }
  }
  return dist;
}

// Exhaustive enumeration of alignment scripts (match/substitute, delete,
// insert). Returns the best (cost, insertions + deletions) with counts.
inline EditCounts enumerate_scripts(const std::vector<Index>& ref, const std::vector<Index>& hyp) {
  EditCounts best{0, 0, 0, static_cast<Index>(ref.size())};
  Index best_cost = -1, best_gaps = 0;
  EditCounts cur{0, 0, 0, static_cast<Index>(ref.size())};
  auto rec = [&](auto&& self, std::size_t i, std::size_t j) -> void {
    if (i == ref.size() && j == hyp.size()) {
      const Index cost = cur.errors();
      const Index gaps = cur.deletions + cur.insertions;
      if (best_cost < 0 || cost < best_cost || (cost == best_cost && gaps < best_gaps)) {
        best = cur;
        best_cost = cost;
        best_gaps = gaps;
      }
      return;
    }
    if (i < ref.size() && j < hyp.size()) {
      const bool sub = ref[i] != hyp[j];
      cur.substitutions += sub;
      self(self, i + 1, j + 1);
      cur.substitutions -= sub;
    }
    if (i < ref.size()) {
      ++cur.deletions;
      self(self, i + 1, j);
      --cur.deletions;
    }
    if (j < hyp.size()) {
      ++cur.insertions;
      self(self, i, j + 1);
      --cur.insertions;
    }
  };
  rec(rec, 0, 0);
  return best;
}

}  // namespace xdk::test
