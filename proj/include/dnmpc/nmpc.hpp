#pragma once

#include "dnmpc/safety.hpp"
#include "dnmpc/srb_model.hpp"
#include "dnmpc/types.hpp"

#include <cmath>
#include <optional>
#include <vector>

namespace dnmpc {

struct CostParams {
    Mat12 Q = Mat12::Identity();
    Mat12 R = Mat12::Identity();
    Mat12 P = Mat12::Identity();
    double w = 1e9;        // consensus weight
    double epsilon = 50.0;  // LJ well depth
    double sigma = 0.85;    // LJ zero-crossing distance, m

    static CostParams defaults() {
        CostParams c;
        Vec12 q;
        q << 1e5, 1e5, 8e6, 5e5, 5e5, 8e6, 1e4, 1e4, 1e4, 1e4, 1e4, 1e4;
        c.Q = q.asDiagonal();
        c.R = Mat12::Identity();
        c.P = 100.0 * c.Q;
        return c;
    }

    void validate() const {
        auto check_spd = [](const Mat12& m, const char* name) {
            if (!m.isApprox(m.transpose(), 1e-9))
                throw ConfigError(std::string("cost.") + name + " must be symmetric");
            Eigen::LLT<Mat12> llt(m);
            if (llt.info() != Eigen::Success)
                throw ConfigError(std::string("cost.") + name + " must be positive definite");
        };
        check_spd(Q, "q");
        check_spd(R, "r");
        check_spd(P, "p");
        if (w < 0.0) throw ConfigError("cost.consensus_weight_w must be >= 0");
        if (!(epsilon > 0.0)) throw ConfigError("cost.lj_epsilon must be positive");
        if (!(sigma > 0.0)) throw ConfigError("cost.lj_sigma_m must be positive");
    }
};

// 4*eps*((sigma/rho)^12 - (sigma/rho)^6)
inline double lj_potential(double rho, double epsilon, double sigma) {
    if (!(rho > 0.0)) throw std::domain_error("lj_potential: rho must be positive");
    const double s = sigma / rho;
    const double s6 = s * s * s * s * s * s;
    return 4.0 * epsilon * (s6 * s6 - s6);
}

inline double lj_potential_d1(double rho, double epsilon, double sigma) {
    const double s = sigma / rho;
    const double s6 = s * s * s * s * s * s;
    return 4.0 * epsilon * (-12.0 * s6 * s6 + 6.0 * s6) / rho;
}

inline double lj_potential_d2(double rho, double epsilon, double sigma) {
    const double s = sigma / rho;
    const double s6 = s * s * s * s * s * s;
    return 4.0 * epsilon * (156.0 * s6 * s6 - 42.0 * s6) / (rho * rho);
}

// ||x - x_ref||_Q^2 + ||u - u_ref||_R^2 + w * sum_j U(rho_ij). The input is
// weighted relative to u_ref (the gravity-compensating stance nominal in the
// transcription); the overload without u_ref weighs the raw input.
inline double stage_cost(const AgentState& x, const GrfInput& u, const AgentState& x_ref,
                         const GrfInput& u_ref, const std::vector<Vec2>& neighbor_coms,
                         const CostParams& params) {
    const Vec12 ex = x.to_vector() - x_ref.to_vector();
    const Vec12 eu = u.to_vector() - u_ref.to_vector();
    double cost = ex.dot(params.Q * ex) + eu.dot(params.R * eu);
    if (params.w > 0.0) {
        const Vec2 p = com_projection(x);
        for (const Vec2& n : neighbor_coms)
            cost += params.w * lj_potential((p - n).norm(), params.epsilon, params.sigma);
    }
    return cost;
}

inline double stage_cost(const AgentState& x, const GrfInput& u, const AgentState& x_ref,
                         const std::vector<Vec2>& neighbor_coms, const CostParams& params) {
    return stage_cost(x, u, x_ref, GrfInput{}, neighbor_coms, params);
}

inline double terminal_cost(const AgentState& x, const AgentState& x_ref,
                            const CostParams& params) {
    const Vec12 e = x.to_vector() - x_ref.to_vector();
    return e.dot(params.P * e);
}

// Predicted trajectory from one local solve; also the plan-exchange payload.
struct HorizonPlan {
    long t0 = 0;  // tick index of the solve
    std::vector<AgentState> states;  // N+1
    std::vector<GrfInput> inputs;    // N
    double objective = 0.0;
    bool feasible = false;
    int solver_iters = 0;

    int horizon() const { return static_cast<int>(inputs.size()); }
};

// Receding-horizon shift: drop index 0 and extend the tail by one constant-
// velocity kinematic step (positions and angles advance by Ts at the held
// terminal rates); the last input is repeated.
inline HorizonPlan shift_plan(const HorizonPlan& plan, double ts) {
    HorizonPlan out;
    out.t0 = plan.t0 + 1;
    out.objective = plan.objective;
    out.feasible = plan.feasible;
    out.solver_iters = plan.solver_iters;
    out.states.assign(plan.states.begin() + 1, plan.states.end());
    out.inputs.assign(plan.inputs.begin() + 1, plan.inputs.end());
    if (!plan.inputs.empty()) out.inputs.push_back(plan.inputs.back());

    AgentState tail = out.states.back();
    tail.p += ts * tail.v;
    if (!pitch_near_singularity(tail.theta.y()))
        tail.theta += ts * (euler_rate_matrix(tail.theta) * tail.omega);
    out.states.push_back(tail);
    return out;
}

enum class SafetyMode { HocbfMin, HocbfPerPair, EuclideanMin, EuclideanPerPair, None };

// Direct multiple-shooting transcription of one local horizon problem.
struct NlpProblem {
    int horizon = 10;       // N
    double ts = 0.01;       // s
    double t_start = 0.0;   // absolute time of step 0, drives the gait schedule
    AgentState x0;
    std::vector<AgentState> x_ref;                 // N+1 reference states
    std::vector<GrfInput> u_ref;                   // N nominal inputs
    std::vector<std::array<bool, 4>> stance;       // N stance flags
    std::vector<std::vector<Vec2>> neighbor_xy;    // per neighbor: N+1 estimated COM xy
    std::vector<Vec2> obstacles;
    ModelParams model;
    ContactSchedule schedule;
    SafetyParams safety;
    CostParams cost;
    SafetyMode mode = SafetyMode::HocbfMin;
    double lj_clamp = 0.05;  // m, lower clamp on rho inside the optimizer

    int num_pairs() const {
        return static_cast<int>(neighbor_xy.size() + obstacles.size());
    }

    int num_decision_variables() const { return horizon * 24; }
    int num_defect_constraints() const { return horizon * 12; }

    int num_safety_constraints() const {
        if (num_pairs() == 0) return 0;
        switch (mode) {
            case SafetyMode::HocbfMin: return horizon - 1;
            case SafetyMode::HocbfPerPair: return num_pairs() * (horizon - 1);
            case SafetyMode::EuclideanMin: return horizon;
            case SafetyMode::EuclideanPerPair: return num_pairs() * horizon;
            case SafetyMode::None: return 0;
        }
        return 0;
    }
};

inline NlpProblem transcribe(const AgentState& x0, const std::vector<AgentState>& x_ref,
                             const std::vector<std::vector<Vec2>>& neighbor_estimates,
                             const std::vector<Vec2>& obstacles, double t_start,
                             const ModelParams& model, const ContactSchedule& schedule,
                             const SafetyParams& safety, const CostParams& cost,
                             SafetyMode mode = SafetyMode::HocbfMin) {
    NlpProblem p;
    p.horizon = static_cast<int>(x_ref.size()) - 1;
    p.t_start = t_start;
    p.x0 = x0;
    p.x_ref = x_ref;
    p.neighbor_xy = neighbor_estimates;
    p.obstacles = obstacles;
    p.model = model;
    p.schedule = schedule;
    p.safety = safety;
    p.cost = cost;
    p.mode = mode;
    p.stance.resize(static_cast<size_t>(p.horizon));
    p.u_ref.resize(static_cast<size_t>(p.horizon));
    for (int k = 0; k < p.horizon; ++k) {
        const double tk = t_start + k * p.ts;
        p.stance[static_cast<size_t>(k)] = contact_flags(tk, schedule);
        p.u_ref[static_cast<size_t>(k)] = nominal_stance_forces(model, p.stance[static_cast<size_t>(k)]);
    }
    return p;
}

// --- Full-space evaluation over z = [x_1..x_N, u_0..u_{N-1}] -----------------
//
// Constraint stacking: shooting defects (12 per step), then friction rows
// (6 per leg per step, two-sided pyramid; swing legs get +/- identity rows),
// then safety rows per the problem's mode. Feasible iff defects are zero and
// every inequality entry is >= 0.

namespace detail {

inline double lj_rho_clamped(double rho, double clamp) { return rho < clamp ? clamp : rho; }

struct SafetyRow {
    double value = 0.0;
    // gradient w.r.t. own xy at up to three consecutive steps
    std::array<int, 3> step{-1, -1, -1};
    std::array<Vec2, 3> grad{Vec2::Zero(), Vec2::Zero(), Vec2::Zero()};
};

// h and active-pair gradient at one step of the predicted trajectory.
inline void step_h_values(const NlpProblem& p, const std::vector<AgentState>& states,
                          std::vector<double>& h, std::vector<Vec2>& grad) {
    const size_t n = states.size();
    h.resize(n);
    grad.resize(n);
    std::vector<Vec2> coms(p.neighbor_xy.size());
    for (size_t k = 0; k < n; ++k) {
        for (size_t j = 0; j < p.neighbor_xy.size(); ++j) coms[j] = p.neighbor_xy[j][k];
        const auto r = h_min_xy(com_projection(states[k]), coms, p.obstacles, p.safety);
        h[k] = r.value;
        grad[k] = h_active_gradient(com_projection(states[k]), coms, p.obstacles, r.argmin);
    }
}

inline std::vector<SafetyRow> safety_rows(const NlpProblem& p,
                                          const std::vector<AgentState>& states) {
    std::vector<SafetyRow> rows;
    if (p.num_pairs() == 0 || p.mode == SafetyMode::None) return rows;
    const double a1 = p.safety.alpha1_gain, a2 = p.safety.alpha2_gain;
    const double c0 = (1.0 - a1) * (1.0 - a2);
    const double c1 = -(2.0 - a1 - a2);

    auto pair_xy = [&](size_t pair, size_t k) -> Vec2 {
        if (pair < p.neighbor_xy.size()) return p.neighbor_xy[pair][k];
        return p.obstacles[pair - p.neighbor_xy.size()];
    };

    switch (p.mode) {
        case SafetyMode::HocbfMin: {
            std::vector<double> h;
            std::vector<Vec2> g;
            step_h_values(p, states, h, g);
            for (size_t k = 0; k + 2 < states.size(); ++k) {
                SafetyRow row;
                row.value = h[k + 2] + c1 * h[k + 1] + c0 * h[k];
                row.step = {static_cast<int>(k), static_cast<int>(k) + 1, static_cast<int>(k) + 2};
                row.grad = {c0 * g[k], c1 * g[k + 1], g[k + 2]};
                rows.push_back(row);
            }
            break;
        }
        case SafetyMode::HocbfPerPair: {
            const size_t n_pairs = static_cast<size_t>(p.num_pairs());
            for (size_t pair = 0; pair < n_pairs; ++pair) {
                for (size_t k = 0; k + 2 < states.size(); ++k) {
                    double hv[3];
                    Vec2 gv[3];
                    for (size_t m = 0; m < 3; ++m) {
                        const Vec2 own = com_projection(states[k + m]);
                        const Vec2 d = own - pair_xy(pair, k + m);
                        const double n = d.norm();
                        hv[m] = n - p.safety.d_th;
                        gv[m] = n > 1e-12 ? Vec2(d / n) : Vec2::Zero();
                    }
                    SafetyRow row;
                    row.value = hv[2] + c1 * hv[1] + c0 * hv[0];
                    row.step = {static_cast<int>(k), static_cast<int>(k) + 1, static_cast<int>(k) + 2};
                    row.grad = {c0 * gv[0], c1 * gv[1], gv[2]};
                    rows.push_back(row);
                }
            }
            break;
        }
        case SafetyMode::EuclideanMin: {
            std::vector<double> h;
            std::vector<Vec2> g;
            step_h_values(p, states, h, g);
            for (size_t k = 1; k < states.size(); ++k) {
                SafetyRow row;
                row.value = h[k];
                row.step = {static_cast<int>(k), -1, -1};
                row.grad = {g[k], Vec2::Zero(), Vec2::Zero()};
                rows.push_back(row);
            }
            break;
        }
        case SafetyMode::EuclideanPerPair: {
            const size_t n_pairs = static_cast<size_t>(p.num_pairs());
            for (size_t pair = 0; pair < n_pairs; ++pair) {
                for (size_t k = 1; k < states.size(); ++k) {
                    const Vec2 own = com_projection(states[k]);
                    const Vec2 d = own - pair_xy(pair, k);
                    const double n = d.norm();
                    SafetyRow row;
                    row.value = n - p.safety.d_th;
                    row.step = {static_cast<int>(k), -1, -1};
                    row.grad = {n > 1e-12 ? Vec2(d / n) : Vec2::Zero(), Vec2::Zero(), Vec2::Zero()};
                    rows.push_back(row);
                }
            }
            break;
        }
        case SafetyMode::None: break;
    }
    return rows;
}

}  // namespace detail

struct NlpEval {
    double objective = 0.0;
    Eigen::VectorXd gradient;     // d objective / dz
    Eigen::VectorXd defects;      // 12 N, euler_step(x_k,u_k) - x_{k+1}
    Eigen::VectorXd inequalities; // cone rows then safety rows, feasible iff >= 0
    double max_violation = 0.0;   // max(|defect|, max(0, -inequality))
};

// Objective/constraint evaluation of a candidate trajectory against the
// transcription; independent of the solver's internal condensed form.
inline NlpEval evaluate_nlp(const NlpProblem& p, const std::vector<AgentState>& states,
                            const std::vector<GrfInput>& inputs, bool with_gradient = true) {
    const int n = p.horizon;
    const size_t nu = static_cast<size_t>(n);
    NlpEval ev;

    // objective + gradient
    ev.objective = 0.0;
    if (with_gradient) ev.gradient = Eigen::VectorXd::Zero(24 * n);
    std::vector<Vec2> coms(p.neighbor_xy.size());
    for (int k = 0; k <= n; ++k) {
        const size_t ks = static_cast<size_t>(k);
        const Mat12& wgt = (k == n) ? p.cost.P : p.cost.Q;
        const Vec12 e = states[ks].to_vector() - p.x_ref[ks].to_vector();
        ev.objective += e.dot(wgt * e);
        if (with_gradient && k >= 1)
            ev.gradient.segment<12>(12 * (k - 1)) += 2.0 * (wgt * e);
        if (k < n) {
            const Vec12 eu = inputs[ks].to_vector() - p.u_ref[ks].to_vector();
            ev.objective += eu.dot(p.cost.R * eu);
            if (with_gradient)
                ev.gradient.segment<12>(12 * n + 12 * k) += 2.0 * (p.cost.R * eu);
            if (p.cost.w > 0.0 && !p.neighbor_xy.empty()) {
                const Vec2 own = com_projection(states[ks]);
                for (const auto& seq : p.neighbor_xy) {
                    const Vec2 d = own - seq[ks];
                    const double rho = d.norm();
                    const double rc = detail::lj_rho_clamped(rho, p.lj_clamp);
                    ev.objective += p.cost.w * lj_potential(rc, p.cost.epsilon, p.cost.sigma);
                    if (with_gradient && k >= 1 && rho > p.lj_clamp) {
                        const Vec2 g =
                            p.cost.w * lj_potential_d1(rho, p.cost.epsilon, p.cost.sigma) * d / rho;
                        ev.gradient.segment<2>(12 * (k - 1)) += g;
                    }
                }
            }
        }
    }

    // defects
    ev.defects.resize(12 * n);
    for (int k = 0; k < n; ++k) {
        const size_t ks = static_cast<size_t>(k);
        const AgentState pred = euler_step(states[ks], inputs[ks], p.t_start + k * p.ts, p.ts,
                                           p.model, p.schedule);
        ev.defects.segment<12>(12 * k) = pred.to_vector() - states[ks + 1].to_vector();
    }

    // friction rows (6 per leg per step)
    const auto rows = detail::safety_rows(p, states);
    ev.inequalities.resize(24 * n + static_cast<Eigen::Index>(rows.size()));
    Eigen::Index at = 0;
    for (size_t k = 0; k < nu; ++k) {
        for (int leg = 0; leg < kNumLegs; ++leg) {
            const Vec3 f = inputs[k].leg(leg);
            if (p.stance[k][static_cast<size_t>(leg)]) {
                ev.inequalities(at++) = f.z() - p.model.fz_min;
                ev.inequalities(at++) = p.model.fz_max - f.z();
                ev.inequalities(at++) = p.model.mu * f.z() - f.x();
                ev.inequalities(at++) = p.model.mu * f.z() + f.x();
                ev.inequalities(at++) = p.model.mu * f.z() - f.y();
                ev.inequalities(at++) = p.model.mu * f.z() + f.y();
            } else {
                ev.inequalities(at++) = f.x();
                ev.inequalities(at++) = -f.x();
                ev.inequalities(at++) = f.y();
                ev.inequalities(at++) = -f.y();
                ev.inequalities(at++) = f.z();
                ev.inequalities(at++) = -f.z();
            }
        }
    }
    for (const auto& row : rows) ev.inequalities(at++) = row.value;

    ev.max_violation = ev.defects.size() ? ev.defects.cwiseAbs().maxCoeff() : 0.0;
    if (ev.inequalities.size())
        ev.max_violation = std::max(ev.max_violation, -std::min(0.0, ev.inequalities.minCoeff()));
    return ev;
}

// HOCBF residuals of a plan against neighbor plan estimates; one row per
// horizon step k = 0..N-2.
inline Eigen::VectorXd hocbf_residuals(const HorizonPlan& plan,
                                       const std::vector<HorizonPlan>& neighbor_plans,
                                       const std::vector<Vec2>& obstacles,
                                       const SafetyParams& params) {
    std::vector<Vec2> own;
    own.reserve(plan.states.size());
    for (const auto& s : plan.states) own.push_back(com_projection(s));
    std::vector<std::vector<Vec2>> neighbors;
    for (const auto& np : neighbor_plans) {
        if (np.states.size() < plan.states.size())
            throw std::out_of_range("hocbf_residuals: neighbor estimate shorter than plan");
        std::vector<Vec2> seq;
        seq.reserve(np.states.size());
        for (const auto& s : np.states) seq.push_back(com_projection(s));
        neighbors.push_back(std::move(seq));
    }
    return hocbf_residuals_xy(own, neighbors, obstacles, params);
}

}  // namespace dnmpc
