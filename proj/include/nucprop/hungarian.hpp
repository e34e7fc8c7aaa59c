#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <vector>

namespace nucprop {

// Maximum-weight assignment on a (possibly rectangular) weight matrix via the
// O(n^3) potential-based Hungarian method. Returns, for each row, the
// assigned column or -1 when the row falls on a padding column.
template <typename T>
std::vector<int> max_weight_assignment(const std::vector<std::vector<T>>& weight) {
    const std::size_t rows = weight.size();
    const std::size_t cols = rows == 0 ? 0 : weight.front().size();
    const std::size_t n = std::max(rows, cols);
    if (n == 0) return {};

    T max_w = T{};
    for (const auto& row : weight) {
        for (const T& w : row) max_w = std::max(max_w, w);
    }
    // cost = max_w - weight keeps costs non-negative; padding costs max_w (weight 0).
    auto cost = [&](std::size_t i, std::size_t j) -> T {
        if (i < rows && j < cols) return max_w - weight[i][j];
        return max_w;
    };

    const T inf = std::numeric_limits<T>::max();
    std::vector<T> u(n + 1, T{}), v(n + 1, T{});
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<T> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            T delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const T cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<int> assignment(rows, -1);
    for (std::size_t j = 1; j <= n; ++j) {
        if (p[j] != 0 && p[j] - 1 < rows && j - 1 < cols) assignment[p[j] - 1] = static_cast<int>(j - 1);
    }
    return assignment;
}

}  // namespace nucprop
