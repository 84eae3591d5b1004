#pragma once

#include <deque>
#include <vector>

#include "ri3d/cg.hpp"
#include "ri3d/image.hpp"

namespace ri3d {

/// Replaces the pixels selected by `unknown` with the discrete harmonic interpolant of
/// the remaining pixels (5-point Laplace equation, Dirichlet data from known
/// neighbours, Neumann at the image border). Connected unknown regions that touch no
/// known pixel receive the mean of all known values, or `fallback` if nothing is known.
template <class Tag>
Raster<double, Tag> harmonic_fill(const Raster<double, Tag>& field, const BinaryMask& unknown,
                                  double fallback = 0.0, double tolerance = 1e-12, int max_iterations = 20000) {
    require_same_shape(field, unknown, "harmonic_fill");
    const int w = field.width();
    Raster<double, Tag> out = field;

    std::vector<int> slot(field.size(), -1);
    std::vector<std::size_t> cells;
    double known_sum = 0;
    std::size_t known_count = 0;
    for (std::size_t i = 0; i < field.size(); ++i) {
        if (unknown[i]) {
            slot[i] = static_cast<int>(cells.size());
            cells.push_back(i);
        } else {
            known_sum += field[i];
            ++known_count;
        }
    }
    if (cells.empty()) return out;
    const double known_mean = known_count ? known_sum / static_cast<double>(known_count) : fallback;

    // Flood-fill components; those without a known neighbour are assigned the mean.
    std::vector<int> component(cells.size(), -1);
    std::vector<bool> anchored;
    const int dx[4] = {1, -1, 0, 0}, dy[4] = {0, 0, 1, -1};
    for (std::size_t s = 0; s < cells.size(); ++s) {
        if (component[s] >= 0) continue;
        const int id = static_cast<int>(anchored.size());
        anchored.push_back(false);
        std::deque<std::size_t> queue{s};
        component[s] = id;
        while (!queue.empty()) {
            const std::size_t k = queue.front();
            queue.pop_front();
            const int x = static_cast<int>(cells[k] % w), y = static_cast<int>(cells[k] / w);
            for (int d = 0; d < 4; ++d) {
                const int nx = x + dx[d], ny = y + dy[d];
                if (!field.contains(nx, ny)) continue;
                const int ns = slot[field.index(nx, ny)];
                if (ns < 0) {
                    anchored[id] = true;
                } else if (component[ns] < 0) {
                    component[ns] = id;
                    queue.push_back(static_cast<std::size_t>(ns));
                }
            }
        }
    }

    const auto n = static_cast<Eigen::Index>(cells.size());
    VecX diag = VecX::Zero(n), rhs = VecX::Zero(n), x = VecX::Zero(n);
    for (Eigen::Index k = 0; k < n; ++k) {
        const std::size_t i = cells[k];
        const int px = static_cast<int>(i % w), py = static_cast<int>(i / w);
        if (!anchored[component[k]]) {
            diag[k] = 1.0;
            rhs[k] = known_mean;
            continue;
        }
        for (int d = 0; d < 4; ++d) {
            const int nx = px + dx[d], ny = py + dy[d];
            if (!field.contains(nx, ny)) continue;
            diag[k] += 1.0;
            const int ns = slot[field.index(nx, ny)];
            if (ns < 0) rhs[k] += field(nx, ny);
        }
        x[k] = known_mean;
    }
    auto apply = [&](const VecX& v, VecX& y) {
        for (Eigen::Index k = 0; k < n; ++k) {
            const std::size_t i = cells[k];
            if (!anchored[component[k]]) {
                y[k] = v[k];
                continue;
            }
            const int px = static_cast<int>(i % w), py = static_cast<int>(i / w);
            double acc = diag[k] * v[k];
            for (int d = 0; d < 4; ++d) {
                const int nx = px + dx[d], ny = py + dy[d];
                if (!field.contains(nx, ny)) continue;
                const int ns = slot[field.index(nx, ny)];
                if (ns >= 0) acc -= v[ns];
            }
            y[k] = acc;
        }
    };
    conjugate_gradient(apply, diag, rhs, x, tolerance, max_iterations);
    for (Eigen::Index k = 0; k < n; ++k) out[cells[k]] = x[k];
    return out;
}

}  // namespace ri3d
