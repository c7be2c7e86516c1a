#pragma once

#include "dnmpc/types.hpp"

#include <limits>
#include <vector>

namespace dnmpc {

struct SafetyParams {
    double d_th = 0.6;         // m
    double alpha1_gain = 0.1;  // linear class-K gain, in (0,1)
    double alpha2_gain = 0.05;

    void validate() const {
        if (!(d_th > 0.0)) throw ConfigError("safety.d_th_m must be positive");
        if (!(alpha1_gain > 0.0 && alpha1_gain < 1.0))
            throw ConfigError("safety.alpha1_gain must be in (0,1)");
        if (!(alpha2_gain > 0.0 && alpha2_gain < 1.0))
            throw ConfigError("safety.alpha2_gain must be in (0,1)");
    }
};

// Which pair attained the barrier minimum.
struct ArgminRef {
    enum class Kind { None, Agent, Obstacle } kind = Kind::None;
    int index = -1;

    bool operator==(const ArgminRef&) const = default;
};

struct BarrierEval {
    double h = 0.0;  // == psi0 by definition
    double psi0 = 0.0;
    double psi1 = 0.0;
    double psi2 = 0.0;
    ArgminRef argmin;
};

inline Vec2 com_projection(const AgentState& x) { return x.p.head<2>(); }

inline double h_pair_xy(const Vec2& p_i, const Vec2& p_j, const SafetyParams& params) {
    return (p_i - p_j).norm() - params.d_th;
}

inline double h_pair(const AgentState& x_i, const AgentState& x_j, const SafetyParams& params) {
    return h_pair_xy(com_projection(x_i), com_projection(x_j), params);
}

inline double h_obstacle(const AgentState& x_i, const Vec2& o, const SafetyParams& params) {
    return h_pair_xy(com_projection(x_i), o, params);
}

struct HMinResult {
    double value = std::numeric_limits<double>::infinity();
    ArgminRef argmin;
};

// Minimum barrier over all neighbor and obstacle pairs. Ties go to the first
// index in (neighbors, then obstacles) order.
inline HMinResult h_min_xy(const Vec2& p_i, const std::vector<Vec2>& neighbor_coms,
                           const std::vector<Vec2>& obstacles, const SafetyParams& params) {
    if (neighbor_coms.empty() && obstacles.empty())
        throw EmptyEnvironmentError("h_min: no neighbors and no obstacles");
    HMinResult best;
    for (size_t j = 0; j < neighbor_coms.size(); ++j) {
        const double h = h_pair_xy(p_i, neighbor_coms[j], params);
        if (h < best.value) best = {h, {ArgminRef::Kind::Agent, static_cast<int>(j)}};
    }
    for (size_t l = 0; l < obstacles.size(); ++l) {
        const double h = h_pair_xy(p_i, obstacles[l], params);
        if (h < best.value) best = {h, {ArgminRef::Kind::Obstacle, static_cast<int>(l)}};
    }
    return best;
}

inline HMinResult h_min(const AgentState& x_i, const std::vector<Vec2>& neighbor_coms,
                        const std::vector<Vec2>& obstacles, const SafetyParams& params) {
    return h_min_xy(com_projection(x_i), neighbor_coms, obstacles, params);
}

// Gradient of the active pair's barrier w.r.t. the agent's xy position.
inline Vec2 h_active_gradient(const Vec2& p_i, const std::vector<Vec2>& neighbor_coms,
                              const std::vector<Vec2>& obstacles, const ArgminRef& argmin) {
    Vec2 target;
    if (argmin.kind == ArgminRef::Kind::Agent)
        target = neighbor_coms[static_cast<size_t>(argmin.index)];
    else
        target = obstacles[static_cast<size_t>(argmin.index)];
    const Vec2 d = p_i - target;
    const double n = d.norm();
    if (n < 1e-12) return Vec2::Zero();
    return d / n;
}

// psi-series of relative degree 2 from three consecutive barrier values along
// a predicted trajectory, with linear class-K functions.
inline BarrierEval psi_series(double h_t, double h_t1, double h_t2, const SafetyParams& params) {
    BarrierEval e;
    e.h = h_t;
    e.psi0 = h_t;
    e.psi1 = (h_t1 - h_t) + params.alpha1_gain * h_t;
    const double psi1_next = (h_t2 - h_t1) + params.alpha1_gain * h_t1;
    e.psi2 = (psi1_next - e.psi1) + params.alpha2_gain * e.psi1;
    return e;
}

// HOCBF residuals psi2(k) for k = 0..N-2 over a predicted xy trajectory
// (indices 0..N). neighbor_xy[j] must cover the same index range.
inline Eigen::VectorXd hocbf_residuals_xy(const std::vector<Vec2>& own_xy,
                                          const std::vector<std::vector<Vec2>>& neighbor_xy,
                                          const std::vector<Vec2>& obstacles,
                                          const SafetyParams& params) {
    const size_t n_steps = own_xy.size();
    if (n_steps < 3)
        throw std::out_of_range("hocbf_residuals: need at least 3 predicted steps");
    for (const auto& seq : neighbor_xy)
        if (seq.size() < n_steps)
            throw std::out_of_range("hocbf_residuals: neighbor estimate shorter than plan");

    std::vector<double> h(n_steps);
    std::vector<Vec2> coms(neighbor_xy.size());
    for (size_t k = 0; k < n_steps; ++k) {
        for (size_t j = 0; j < neighbor_xy.size(); ++j) coms[j] = neighbor_xy[j][k];
        h[k] = h_min_xy(own_xy[k], coms, obstacles, params).value;
    }
    Eigen::VectorXd res(static_cast<Eigen::Index>(n_steps) - 2);
    for (size_t k = 0; k + 2 < n_steps; ++k)
        res(static_cast<Eigen::Index>(k)) = psi_series(h[k], h[k + 1], h[k + 2], params).psi2;
    return res;
}

}  // namespace dnmpc
