#pragma once

#include <span>
#include <vector>

namespace bmod::objectives {

// Solution of a rectangular linear assignment problem.
struct Assignment {
  // row_to_col[r] is the column assigned to row r, or -1 when rows > cols and
  // row r is left out.
  std::vector<int> row_to_col;
  // Sum of the assigned costs, accumulated in increasing row order.
  double total = 0.0;
};

// Minimum-cost injective assignment over a row-major rows x cols matrix
// (Kuhn-Munkres with potentials, O(min^2 * max)). Exactly min(rows, cols)
// pairs are assigned.
Assignment solve_assignment(std::span<const double> cost, int rows, int cols);

}  // namespace bmod::objectives
