#pragma once

#include <cmath>

#include <vector>

#include <Eigen/Core>
#include <Eigen/Sparse>

namespace ri3d {

using VecX = Eigen::VectorXd;

struct CgResult {
    int iterations = 0;
    double relative_residual = 0;  // ||b - Ax|| / ||b||
    bool converged = false;
};

/// Jacobi-preconditioned conjugate gradient for a symmetric positive-definite operator.
///
/// `apply(x, y)` must write A*x into y. `diagonal` holds diag(A). `x` carries the
/// initial guess in and the solution out. Convergence is judged on the true residual,
/// recomputed from scratch whenever the recursive residual claims convergence.
template <class ApplyOp>
CgResult conjugate_gradient(const ApplyOp& apply, const VecX& diagonal, const VecX& b, VecX& x,
                            double tolerance, int max_iterations) {
    CgResult res;
    const double bnorm = b.norm();
    if (bnorm == 0.0) {
        x.setZero();
        res.converged = true;
        return res;
    }
    const VecX inv_diag = diagonal.cwiseInverse();
    VecX r(b.size()), ap(b.size());
    apply(x, ap);
    r = b - ap;
    VecX z = inv_diag.cwiseProduct(r);
    VecX p = z;
    double rz = r.dot(z);

    for (int k = 0; k < max_iterations; ++k) {
        res.relative_residual = r.norm() / bnorm;
        if (res.relative_residual <= tolerance) {
            apply(x, ap);
            r = b - ap;
            res.relative_residual = r.norm() / bnorm;
            if (res.relative_residual <= tolerance) {
                res.converged = true;
                return res;
            }
            z = inv_diag.cwiseProduct(r);
            p = z;
            rz = r.dot(z);
        }
        apply(p, ap);
        const double pap = p.dot(ap);
        if (!(pap > 0.0)) break;
        const double alpha = rz / pap;
        x += alpha * p;
        r -= alpha * ap;
        z = inv_diag.cwiseProduct(r);
        const double rz_next = r.dot(z);
        p = z + (rz_next / rz) * p;
        rz = rz_next;
        res.iterations = k + 1;
    }
    apply(x, ap);
    res.relative_residual = (b - ap).norm() / bnorm;
    res.converged = res.relative_residual <= tolerance;
    return res;
}

/// Matrix-free operator diag(data_weight) + lambda * L, where L is the 5-point graph
/// Laplacian of a width x height grid with Neumann boundaries (edges only between
/// in-grid neighbours).
struct ScreenedLaplacian {
    int width = 0, height = 0;
    double lambda = 1.0;
    VecX data_weight;

    void operator()(const VecX& x, VecX& y) const {
        y = data_weight.cwiseProduct(x);
        for (int r = 0; r < height; ++r)
            for (int c = 0; c < width; ++c) {
                const Eigen::Index i = static_cast<Eigen::Index>(r) * width + c;
                double acc = 0.0;
                if (c + 1 < width) acc += x[i] - x[i + 1];
                if (c > 0) acc += x[i] - x[i - 1];
                if (r + 1 < height) acc += x[i] - x[i + width];
                if (r > 0) acc += x[i] - x[i - width];
                y[i] += lambda * acc;
            }
    }

    VecX diagonal() const {
        VecX d = data_weight;
        for (int r = 0; r < height; ++r)
            for (int c = 0; c < width; ++c) {
                const int degree = (c + 1 < width) + (c > 0) + (r + 1 < height) + (r > 0);
                d[static_cast<Eigen::Index>(r) * width + c] += lambda * degree;
            }
        return d;
    }

    Eigen::SparseMatrix<double> matrix() const {
        std::vector<Eigen::Triplet<double>> t;
        const VecX d = diagonal();
        t.reserve(static_cast<std::size_t>(d.size()) * 5);
        for (int r = 0; r < height; ++r)
            for (int c = 0; c < width; ++c) {
                const Eigen::Index i = static_cast<Eigen::Index>(r) * width + c;
                t.emplace_back(i, i, d[i]);
                if (c + 1 < width) t.emplace_back(i, i + 1, -lambda);
                if (c > 0) t.emplace_back(i, i - 1, -lambda);
                if (r + 1 < height) t.emplace_back(i, i + width, -lambda);
                if (r > 0) t.emplace_back(i, i - width, -lambda);
            }
        Eigen::SparseMatrix<double> m(d.size(), d.size());
        m.setFromTriplets(t.begin(), t.end());
        return m;
    }
};

}  // namespace ri3d
