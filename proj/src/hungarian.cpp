#include "bmod/hungarian.hpp"

#include <limits>
#include <stdexcept>

namespace bmod::objectives {

namespace {

// Rows <= cols. Potentials u (rows), v (cols); column 0 is a virtual sink.
std::vector<int> solve_wide(std::span<const double> cost, int n, int m, bool transposed) {
  auto at = [&](int r, int c) {
    return transposed ? cost[static_cast<std::size_t>(c) * n + r] : cost[static_cast<std::size_t>(r) * m + c];
  };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> owner(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    owner[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, false);
    do {
      used[j0] = true;
      const int i0 = owner[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const int j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j)
    if (owner[j] != 0) row_to_col[owner[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace

Assignment solve_assignment(std::span<const double> cost, int rows, int cols) {
  if (rows < 0 || cols < 0 || cost.size() != static_cast<std::size_t>(rows) * cols)
    throw std::invalid_argument("solve_assignment: cost size mismatch");
  Assignment out;
  out.row_to_col.assign(rows, -1);
  if (rows == 0 || cols == 0) return out;
  if (rows <= cols) {
    out.row_to_col = solve_wide(cost, rows, cols, false);
  } else {
    const std::vector<int> col_to_row = solve_wide(cost, cols, rows, true);
    for (int c = 0; c < cols; ++c) out.row_to_col[col_to_row[c]] = c;
  }
  for (int r = 0; r < rows; ++r)
    if (out.row_to_col[r] >= 0) out.total += cost[static_cast<std::size_t>(r) * cols + out.row_to_col[r]];
  return out;
}

}  // namespace bmod::objectives
