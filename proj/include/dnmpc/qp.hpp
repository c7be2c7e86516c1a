#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace dnmpc {

struct QpOptions {
    double tolerance = 1e-8;  // primal violation tolerance (normalized rows)
    int max_iterations = 200;
};

struct QpResult {
    Eigen::VectorXd x;
    Eigen::VectorXd multipliers;  // one per inequality row, >= 0
    bool converged = false;
    int iterations = 0;
    double max_violation = 0.0;
};

// Strictly convex dense QP:  min 1/2 x'Hx + g'x  s.t.  Gx >= b.
//
// Active-set method starting from the unconstrained minimum: repeatedly add
// the most violated row as an equality, solving each working-set problem
// through a Schur complement on the factored (equilibrated) Hessian, and drop
// rows whose multiplier turns negative. Deterministic: ties break on the
// lowest row index. Inconsistent constraint sets terminate at the iteration
// cap with the violation reported.
inline QpResult solve_qp(const Eigen::MatrixXd& h_in, const Eigen::VectorXd& g_in,
                         const Eigen::MatrixXd& g_ineq, const Eigen::VectorXd& b_in,
                         const QpOptions& opts = {},
                         std::vector<Eigen::Index>* warm_active = nullptr) {
    const Eigen::Index n = h_in.rows();
    const Eigen::Index m = g_ineq.rows();
    QpResult out;

    // x = D y with D = diag(h_ii)^(-1/2): the cost diagonals here span many
    // orders of magnitude.
    Eigen::VectorXd d(n);
    const double h_diag_max = std::max(h_in.diagonal().maxCoeff(), 1e-300);
    for (Eigen::Index i = 0; i < n; ++i)
        d(i) = 1.0 / std::sqrt(std::max(h_in(i, i), 1e-12 * h_diag_max));
    Eigen::MatrixXd h = d.asDiagonal() * h_in * d.asDiagonal();
    const Eigen::VectorXd g = d.cwiseProduct(g_in);

    Eigen::LLT<Eigen::MatrixXd> llt(h);
    if (llt.info() != Eigen::Success) {
        h.diagonal().array() += 1e-10;
        llt.compute(h);
    }
    const Eigen::VectorXd y_unc = llt.solve(-g);

    if (m == 0) {
        out.x = d.cwiseProduct(y_unc);
        out.multipliers.resize(0);
        out.converged = out.x.allFinite();
        out.iterations = 1;
        return out;
    }

    Eigen::MatrixXd gn = g_ineq * d.asDiagonal();
    Eigen::VectorXd bn = b_in;
    Eigen::VectorXd row_scale = Eigen::VectorXd::Ones(m);
    for (Eigen::Index i = 0; i < m; ++i) {
        const double nrm = gn.row(i).norm();
        if (nrm > 1e-300) {
            gn.row(i) /= nrm;
            bn(i) /= nrm;
            row_scale(i) = nrm;
        }
    }

    std::vector<Eigen::Index> active;
    Eigen::MatrixXd w(n, 0);       // H^{-1} G_A'
    Eigen::MatrixXd schur(0, 0);   // G_A H^{-1} G_A'
    Eigen::VectorXd y = y_unc;
    Eigen::VectorXd lambda(0);

    auto append_row = [&](Eigen::Index i) {
        const Eigen::Index na = static_cast<Eigen::Index>(active.size());
        const Eigen::VectorXd w_new = llt.solve(gn.row(i).transpose());
        w.conservativeResize(n, na + 1);
        w.col(na) = w_new;
        schur.conservativeResize(na + 1, na + 1);
        for (Eigen::Index k = 0; k < na; ++k) {
            const double v = gn.row(active[static_cast<size_t>(k)]) * w_new;
            schur(k, na) = v;
            schur(na, k) = v;
        }
        schur(na, na) = gn.row(i) * w_new;
        active.push_back(i);
    };
    auto rebuild = [&]() {
        const Eigen::Index na = static_cast<Eigen::Index>(active.size());
        w.resize(n, na);
        schur.resize(na, na);
        for (Eigen::Index k = 0; k < na; ++k)
            w.col(k) = llt.solve(gn.row(active[static_cast<size_t>(k)]).transpose());
        for (Eigen::Index r = 0; r < na; ++r)
            for (Eigen::Index c = 0; c < na; ++c)
                schur(r, c) = gn.row(active[static_cast<size_t>(r)]) * w.col(c);
    };
    auto solve_working_set = [&]() {
        const Eigen::Index na = static_cast<Eigen::Index>(active.size());
        if (na == 0) {
            y = y_unc;
            lambda.resize(0);
            return;
        }
        Eigen::VectorXd rhs(na);
        for (Eigen::Index k = 0; k < na; ++k)
            rhs(k) = bn(active[static_cast<size_t>(k)]) - gn.row(active[static_cast<size_t>(k)]) * y_unc;
        Eigen::MatrixXd s = schur;
        s.diagonal().array() += 1e-13 * std::max(1.0, schur.diagonal().maxCoeff());
        const Eigen::LDLT<Eigen::MatrixXd> s_ldlt(s);
        lambda = s_ldlt.solve(rhs);
        y = y_unc + w * lambda;

        // one round of KKT iterative refinement: the equilibrated Hessian can
        // still be ill-conditioned enough to leave ~1e-4 residuals on active
        // rows, which would make the outer loop churn on noise
        Eigen::VectorXd r1 = h * y + g;
        Eigen::VectorXd r2(na);
        for (Eigen::Index k = 0; k < na; ++k) {
            r1 -= gn.row(active[static_cast<size_t>(k)]).transpose() * lambda(k);
            r2(k) = gn.row(active[static_cast<size_t>(k)]) * y - bn(active[static_cast<size_t>(k)]);
        }
        const Eigen::VectorXd dlam = s_ldlt.solve(-r2 + w.transpose() * r1);
        Eigen::VectorXd rhs_y = -r1;
        for (Eigen::Index k = 0; k < na; ++k)
            rhs_y += gn.row(active[static_cast<size_t>(k)]).transpose() * dlam(k);
        lambda += dlam;
        y += llt.solve(rhs_y);
    };

    if (warm_active) {
        for (Eigen::Index i : *warm_active)
            if (i >= 0 && i < m && static_cast<Eigen::Index>(active.size()) < n) append_row(i);
    }

    for (int iter = 0; iter < opts.max_iterations; ++iter) {
        ++out.iterations;
        solve_working_set();

        // drop the most negative multiplier first
        if (lambda.size()) {
            Eigen::Index drop = -1;
            double most_negative = -1e-10 * (1.0 + lambda.cwiseAbs().maxCoeff());
            for (Eigen::Index k = 0; k < lambda.size(); ++k) {
                if (lambda(k) < most_negative) {
                    most_negative = lambda(k);
                    drop = k;
                }
            }
            if (drop >= 0) {
                active.erase(active.begin() + drop);
                rebuild();
                continue;
            }
        }

        const Eigen::VectorXd slack = bn - gn * y;
        out.max_violation = std::max(0.0, slack.maxCoeff());
        if (out.max_violation <= opts.tolerance) {
            out.converged = true;
            break;
        }
        Eigen::Index worst = -1;
        double worst_violation = opts.tolerance;
        for (Eigen::Index i = 0; i < m; ++i) {
            if (slack(i) <= worst_violation) continue;
            bool already = false;
            for (Eigen::Index k : active) already |= (k == i);
            if (already) continue;
            worst_violation = slack(i);
            worst = i;
        }
        if (worst < 0) break;  // active rows cannot be enforced more tightly
        if (static_cast<Eigen::Index>(active.size()) >= n) break;  // saturated
        append_row(worst);
    }

    if (warm_active) *warm_active = active;

    out.x = d.cwiseProduct(y);
    out.multipliers = Eigen::VectorXd::Zero(m);
    for (size_t k = 0; k < active.size(); ++k)
        if (lambda.size() > static_cast<Eigen::Index>(k) && lambda(static_cast<Eigen::Index>(k)) > 0.0)
            out.multipliers(active[k]) =
                lambda(static_cast<Eigen::Index>(k)) / row_scale(active[k]);
    if (!out.x.allFinite()) out.converged = false;
    return out;
}

}  // namespace dnmpc
