#pragma once

#include <limits>

#include "flowdet/common.hpp"

namespace flowdet {

struct MatchResult {
  std::vector<std::pair<int64_t, int64_t>> pairs;  // (query index, target index)
  double total_cost = 0.0;
};

namespace detail {

// Shortest-augmenting-path assignment with potentials, O(n^2 m).
// cost is n x m with n <= m; returns, for every row, its assigned column.
// Strict '<' comparisons make ties resolve toward lower indices, which keeps
// the result deterministic.
inline std::vector<int64_t> assign_rows(const std::vector<std::vector<double>>& cost) {
  const int64_t n = int64_t(cost.size());
  const int64_t m = n ? int64_t(cost[0].size()) : 0;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(size_t(n + 1), 0.0), v(size_t(m + 1), 0.0);
  std::vector<int64_t> col_row(size_t(m + 1), 0);  // column -> assigned row (1-based)
  std::vector<int64_t> way(size_t(m + 1), 0);
  for (int64_t i = 1; i <= n; ++i) {
    col_row[0] = i;
    int64_t j0 = 0;
    std::vector<double> minv(size_t(m + 1), inf);
    std::vector<bool> used(size_t(m + 1), false);
    do {
      used[size_t(j0)] = true;
      const int64_t i0 = col_row[size_t(j0)];
      int64_t j1 = -1;
      double delta = inf;
      for (int64_t j = 1; j <= m; ++j) {
        if (used[size_t(j)]) continue;
        const double cur = cost[size_t(i0 - 1)][size_t(j - 1)] - u[size_t(i0)] - v[size_t(j)];
        if (cur < minv[size_t(j)]) {
          minv[size_t(j)] = cur;
          way[size_t(j)] = j0;
        }
        if (minv[size_t(j)] < delta) {
          delta = minv[size_t(j)];
          j1 = j;
        }
      }
      for (int64_t j = 0; j <= m; ++j) {
        if (used[size_t(j)]) {
          u[size_t(col_row[size_t(j)])] += delta;
          v[size_t(j)] -= delta;
        } else {
          minv[size_t(j)] -= delta;
        }
      }
      j0 = j1;
    } while (col_row[size_t(j0)] != 0);
    do {
      const int64_t j1 = way[size_t(j0)];
      col_row[size_t(j0)] = col_row[size_t(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int64_t> row_col(size_t(n), -1);
  for (int64_t j = 1; j <= m; ++j)
    if (col_row[size_t(j)] != 0) row_col[size_t(col_row[size_t(j)] - 1)] = j - 1;
  return row_col;
}

}  // namespace detail

// Minimum-total-cost one-to-one assignment between queries (rows) and targets
// (columns). Exactly min(Q, T) pairs are produced; no index repeats.
inline MatchResult hungarian_match(const std::vector<std::vector<double>>& cost) {
  MatchResult result;
  const int64_t q = int64_t(cost.size());
  const int64_t t = q ? int64_t(cost[0].size()) : 0;
  if (q == 0 || t == 0) return result;
  for (const auto& row : cost) {
    if (int64_t(row.size()) != t) throw ShapeError("hungarian_match: ragged cost matrix");
    for (double c : row)
      if (!std::isfinite(c)) throw ValueError("hungarian_match: non-finite cost entry");
  }
  if (q <= t) {
    auto row_col = detail::assign_rows(cost);
    for (int64_t i = 0; i < q; ++i) result.pairs.emplace_back(i, row_col[size_t(i)]);
  } else {
    std::vector<std::vector<double>> tr(static_cast<size_t>(t), std::vector<double>(static_cast<size_t>(q)));
    for (int64_t i = 0; i < q; ++i)
      for (int64_t j = 0; j < t; ++j) tr[size_t(j)][size_t(i)] = cost[size_t(i)][size_t(j)];
    auto col_row = detail::assign_rows(tr);
    for (int64_t j = 0; j < t; ++j) result.pairs.emplace_back(col_row[size_t(j)], j);
    std::sort(result.pairs.begin(), result.pairs.end());
  }
  for (auto [i, j] : result.pairs) result.total_cost += cost[size_t(i)][size_t(j)];
  return result;
}

}  // namespace flowdet
