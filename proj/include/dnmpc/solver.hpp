#pragma once

#include "dnmpc/nmpc.hpp"
#include "dnmpc/qp.hpp"

#include <cmath>
#include <optional>
#include <ostream>
#include <vector>

namespace dnmpc {

struct SolverOptions {
    int budget = 8;                      // major iterations
    double constraint_tolerance = 1e-4;  // max violation for feasible=true
    double step_scale = 80.0;            // N, sets the damping floor on rejected steps
    QpOptions qp;
    std::ostream* debug = nullptr;  // CSV rows: major,objective,violation,step_norm,alpha
};

// Per-agent NLP solver. Each major iteration linearizes the shooting
// constraints around a dynamically consistent iterate, condenses the state
// deltas onto the stance-force deltas, solves a proximally damped strictly
// convex QP with an active-set method, and backtracks on an l1 merit
// function, rolling the stepped inputs out through the dynamics so every
// iterate keeps zero shooting defects. Deterministic; never throws;
// swing-leg forces are eliminated rather than penalized.
class NmpcSolver {
  public:
    explicit NmpcSolver(SolverOptions opts = {}) : opts_(opts) {}

    SolverOptions& options() { return opts_; }
    const SolverOptions& options() const { return opts_; }

    // Cold-start guess: nominal stance forces rolled out from x0.
    static HorizonPlan cold_start(const NlpProblem& p) {
        HorizonPlan plan;
        plan.inputs = p.u_ref;
        plan.states.assign(static_cast<size_t>(p.horizon) + 1, p.x0);
        rollout(p, plan.inputs, plan.states);
        return plan;
    }

    HorizonPlan solve(const NlpProblem& p, const std::optional<HorizonPlan>& warm_start) const {
        return solve(p, warm_start, opts_.budget);
    }

    HorizonPlan solve(const NlpProblem& p, const std::optional<HorizonPlan>& warm_start,
                      int budget) const {
        const int n = p.horizon;
        const size_t n_steps = static_cast<size_t>(n);

        std::vector<GrfInput> inputs;
        if (warm_start && warm_start->inputs.size() == n_steps) {
            inputs = warm_start->inputs;
            for (size_t k = 0; k < n_steps; ++k) {
                bool structure_ok = true;
                for (int leg = 0; leg < kNumLegs; ++leg) {
                    const bool loaded = inputs[k].leg(leg).norm() > 0.0;
                    if (loaded != p.stance[k][static_cast<size_t>(leg)]) structure_ok = false;
                }
                if (!structure_ok) inputs[k] = p.u_ref[k];
            }
        } else {
            inputs = p.u_ref;
        }
        std::vector<AgentState> states(n_steps + 1, p.x0);
        if (!rollout(p, inputs, states)) {
            HorizonPlan plan;  // singular configuration right at the start
            plan.states = std::move(states);
            plan.inputs = std::move(inputs);
            plan.objective = std::numeric_limits<double>::infinity();
            return plan;
        }

        auto eval = [&](const std::vector<AgentState>& xs,
                        const std::vector<GrfInput>& us) -> NlpEval {
            try {
                return evaluate_nlp(p, xs, us, /*with_gradient=*/false);
            } catch (const SingularConfigurationError&) {
                NlpEval bad;
                bad.objective = std::numeric_limits<double>::infinity();
                bad.max_violation = std::numeric_limits<double>::infinity();
                return bad;
            }
        };
        auto violation_l1 = [](const NlpEval& ev) {
            double v = 0.0;
            for (Eigen::Index i = 0; i < ev.inequalities.size(); ++i)
                v += std::max(0.0, -ev.inequalities(i));
            return v;
        };

        NlpEval cur = eval(states, inputs);
        if (!std::isfinite(cur.objective)) {
            HorizonPlan plan;
            plan.states = states;
            plan.inputs = inputs;
            plan.objective = std::numeric_limits<double>::infinity();
            return plan;
        }

        std::vector<AgentState> best_states = states;
        std::vector<GrfInput> best_inputs = inputs;
        double best_objective = cur.objective;
        double best_violation = cur.max_violation;
        auto consider_best = [&](const std::vector<AgentState>& xs,
                                 const std::vector<GrfInput>& us, const NlpEval& ev) {
            const bool ev_feas = ev.max_violation <= opts_.constraint_tolerance;
            const bool best_feas = best_violation <= opts_.constraint_tolerance;
            bool better = false;
            if (ev_feas && best_feas) better = ev.objective < best_objective;
            else if (ev_feas != best_feas) better = ev_feas;
            else better = ev.max_violation < best_violation;
            if (better) {
                best_states = xs;
                best_inputs = us;
                best_objective = ev.objective;
                best_violation = ev.max_violation;
            }
        };

        // stance-force slot layout
        std::vector<std::vector<int>> stance_legs(n_steps);
        std::vector<int> slot_offset(n_steps + 1, 0);
        for (size_t k = 0; k < n_steps; ++k) {
            for (int leg = 0; leg < kNumLegs; ++leg)
                if (p.stance[k][static_cast<size_t>(leg)]) stance_legs[k].push_back(leg);
            slot_offset[k + 1] = slot_offset[k] + 3 * static_cast<int>(stance_legs[k].size());
        }
        const int n_red = slot_offset[n_steps];

        double merit_weight = 1.0;
        double lm_tau = 0.0;  // proximal damping, adapted by the line search
        std::vector<Eigen::Index> qp_active;  // working set carried across majors
        int majors = 0;
        for (int major = 0; major < budget; ++major) {
            ++majors;

            // --- linearize dynamics, assemble stage gradients/Hessians ---
            std::vector<Mat12> a_d(n_steps), b_d(n_steps);
            bool singular = false;
            for (size_t k = 0; k < n_steps && !singular; ++k) {
                try {
                    euler_step_jacobians(states[k], inputs[k],
                                         p.t_start + static_cast<double>(k) * p.ts, p.ts, p.model,
                                         p.schedule, a_d[k], b_d[k]);
                } catch (const SingularConfigurationError&) {
                    singular = true;
                }
            }
            if (singular) break;

            std::vector<Vec12> grad_x(n_steps + 1, Vec12::Zero());
            std::vector<Mat12> hess_x(n_steps + 1, Mat12::Zero());
            for (size_t k = 1; k <= n_steps; ++k) {
                const Mat12& wgt = (k == n_steps) ? p.cost.P : p.cost.Q;
                const Vec12 e = states[k].to_vector() - p.x_ref[k].to_vector();
                grad_x[k] = 2.0 * (wgt * e);
                hess_x[k] = 2.0 * wgt;
            }
            if (p.cost.w > 0.0) {
                for (size_t k = 1; k < n_steps; ++k) {  // LJ is a stage term, k=0 fixed
                    const Vec2 own = com_projection(states[k]);
                    for (const auto& seq : p.neighbor_xy) {
                        const Vec2 d2 = own - seq[k];
                        const double rho = d2.norm();
                        if (rho <= p.lj_clamp) continue;  // clamped: flat
                        const Vec2 u2 = d2 / rho;
                        const double d1 =
                            p.cost.w * lj_potential_d1(rho, p.cost.epsilon, p.cost.sigma);
                        const double dd =
                            p.cost.w * lj_potential_d2(rho, p.cost.epsilon, p.cost.sigma);
                        grad_x[k].segment<2>(0) += d1 * u2;
                        const Eigen::Matrix2d proj = u2 * u2.transpose();
                        const Eigen::Matrix2d hess2 =
                            std::max(dd, 0.0) * proj +
                            std::max(d1 / rho, 0.0) * (Eigen::Matrix2d::Identity() - proj);
                        hess_x[k].block<2, 2>(0, 0) += hess2;
                    }
                }
            }

            // Costates of the objective through the dynamics bound the scale
            // of the constraint multipliers; the l1 penalty must dominate
            // them or the line search trades feasibility for cost.
            {
                Vec12 lam = grad_x[n_steps];
                double lam_max = lam.cwiseAbs().maxCoeff();
                for (size_t k = n_steps - 1; k >= 1; --k) {
                    lam = grad_x[k] + a_d[k].transpose() * lam;
                    lam_max = std::max(lam_max, lam.cwiseAbs().maxCoeff());
                }
                merit_weight = std::max(merit_weight, 2.0 * lam_max);
            }

            // --- condense: dx = T dw (iterates are dynamically consistent) ---
            Eigen::MatrixXd t_map = Eigen::MatrixXd::Zero(12 * n, n_red);
            for (size_t k = 0; k < n_steps; ++k) {
                if (k > 0)
                    t_map.middleRows(12 * static_cast<Eigen::Index>(k), 12).noalias() =
                        a_d[k] * t_map.middleRows(12 * static_cast<Eigen::Index>(k - 1), 12);
                auto block = t_map.middleRows(12 * static_cast<Eigen::Index>(k), 12);
                for (size_t li = 0; li < stance_legs[k].size(); ++li)
                    block.middleCols(slot_offset[k] + 3 * static_cast<Eigen::Index>(li), 3) =
                        b_d[k].middleCols(3 * stance_legs[k][li], 3);
            }

            // --- reduced objective model ---
            Eigen::MatrixXd h_red = Eigen::MatrixXd::Zero(n_red, n_red);
            Eigen::VectorXd g_red = Eigen::VectorXd::Zero(n_red);
            for (size_t k = 1; k <= n_steps; ++k) {
                const auto t_k = t_map.middleRows(12 * static_cast<Eigen::Index>(k - 1), 12);
                const Eigen::MatrixXd ht = hess_x[k] * t_k;
                h_red.noalias() += t_k.transpose() * ht;
                g_red.noalias() += t_k.transpose() * grad_x[k];
            }
            for (size_t k = 0; k < n_steps; ++k) {
                for (size_t li = 0; li < stance_legs[k].size(); ++li) {
                    const int leg = stance_legs[k][li];
                    const int off = slot_offset[k] + 3 * static_cast<int>(li);
                    const Vec3 eu = inputs[k].leg(leg) - p.u_ref[k].leg(leg);
                    const Mat3 r_leg = p.cost.R.block<3, 3>(3 * leg, 3 * leg);
                    h_red.block<3, 3>(off, off) += 2.0 * r_leg;
                    g_red.segment<3>(off) += 2.0 * (r_leg * eu);
                }
            }
            h_red.diagonal().array() += 1e-9 * std::max(1.0, h_red.diagonal().maxCoeff());

            // --- linearized inequality rows in reduced space ---
            const auto srows = detail::safety_rows(p, states);
            int n_cone = 0;
            for (size_t k = 0; k < n_steps; ++k)
                n_cone += 6 * static_cast<int>(stance_legs[k].size());
            Eigen::MatrixXd g_ineq =
                Eigen::MatrixXd::Zero(n_cone + static_cast<int>(srows.size()), n_red);
            Eigen::VectorXd b_ineq(g_ineq.rows());
            Eigen::Index row = 0;
            const double mu_f = p.model.mu;
            for (size_t k = 0; k < n_steps; ++k) {
                for (size_t li = 0; li < stance_legs[k].size(); ++li) {
                    const int leg = stance_legs[k][li];
                    const int off = slot_offset[k] + 3 * static_cast<int>(li);
                    const Vec3 f = inputs[k].leg(leg);
                    g_ineq(row, off + 2) = 1.0;
                    b_ineq(row++) = p.model.fz_min - f.z();
                    g_ineq(row, off + 2) = -1.0;
                    b_ineq(row++) = f.z() - p.model.fz_max;
                    g_ineq(row, off + 0) = -1.0;
                    g_ineq(row, off + 2) = mu_f;
                    b_ineq(row++) = f.x() - mu_f * f.z();
                    g_ineq(row, off + 0) = 1.0;
                    g_ineq(row, off + 2) = mu_f;
                    b_ineq(row++) = -f.x() - mu_f * f.z();
                    g_ineq(row, off + 1) = -1.0;
                    g_ineq(row, off + 2) = mu_f;
                    b_ineq(row++) = f.y() - mu_f * f.z();
                    g_ineq(row, off + 1) = 1.0;
                    g_ineq(row, off + 2) = mu_f;
                    b_ineq(row++) = -f.y() - mu_f * f.z();
                }
            }
            Eigen::Index kept = row;
            for (const auto& sr : srows) {
                Eigen::RowVectorXd jrow = Eigen::RowVectorXd::Zero(n_red);
                for (int m = 0; m < 3; ++m) {
                    const int step = sr.step[static_cast<size_t>(m)];
                    if (step < 1) continue;  // step 0 is fixed, step -1 unused
                    jrow.noalias() += sr.grad[static_cast<size_t>(m)].transpose() *
                                      t_map.middleRows(12 * (step - 1), 2);
                }
                if (jrow.norm() < 1e-12) continue;  // unreachable within this horizon
                g_ineq.row(kept) = jrow;
                b_ineq(kept) = -sr.value;
                ++kept;
            }

            const double grad_scale = g_red.size() ? g_red.cwiseAbs().maxCoeff() : 0.0;

            // --- damped QP step with l1-merit backtracking; a rejected step
            // raises the proximal damping and retries on the same
            // linearization ---
            bool stepped = false;
            bool converged = false;
            for (int attempt = 0; attempt < 4 && !stepped; ++attempt) {
                Eigen::MatrixXd h_damped = h_red;
                h_damped.diagonal().array() += lm_tau;
                const QpResult qp = solve_qp(h_damped, g_red, g_ineq.topRows(kept),
                                             b_ineq.head(kept), opts_.qp, &qp_active);
                if (!qp.x.allFinite()) break;
                const Eigen::VectorXd& dw = qp.x;

                double obj_dir = g_red.dot(dw);
                const double v_l1 = violation_l1(cur);
                if (v_l1 > 1e-12)
                    merit_weight =
                        std::max(merit_weight, 2.0 * std::max(0.0, obj_dir) / v_l1 + 1e-6);
                const double pred = std::max(merit_weight * v_l1 - obj_dir,
                                             1e-16 * (1.0 + std::abs(cur.objective)));
                const double merit0 = cur.objective + merit_weight * v_l1;

                const double step_norm = dw.size() ? dw.cwiseAbs().maxCoeff() : 0.0;
                if (cur.max_violation <= opts_.constraint_tolerance && step_norm < 1e-10) {
                    converged = true;
                    break;
                }

                double alpha = 1.0;
                bool accepted = false;
                std::vector<AgentState> cand_states(n_steps + 1, p.x0);
                std::vector<GrfInput> cand_inputs(n_steps);
                NlpEval cand;
                for (int ls = 0; ls < 11; ++ls) {
                    for (size_t k = 0; k < n_steps; ++k) {
                        cand_inputs[k] = inputs[k];
                        for (size_t li = 0; li < stance_legs[k].size(); ++li) {
                            const int leg = stance_legs[k][li];
                            const int off = slot_offset[k] + 3 * static_cast<int>(li);
                            cand_inputs[k].set_leg(leg,
                                                   inputs[k].leg(leg) + alpha * dw.segment<3>(off));
                        }
                    }
                    if (rollout(p, cand_inputs, cand_states)) {
                        cand = eval(cand_states, cand_inputs);
                        if (std::isfinite(cand.objective)) {
                            const double merit = cand.objective + merit_weight * violation_l1(cand);
                            if (merit <= merit0 - 1e-4 * alpha * pred) {
                                accepted = true;
                                break;
                            }
                        }
                    }
                    alpha *= 0.5;
                }
                if (opts_.debug) {
                    (*opts_.debug) << major << ',' << cur.objective << ',' << cur.max_violation
                                   << ',' << step_norm << ',' << (accepted ? alpha : 0.0) << '\n';
                }
                if (!accepted) {
                    lm_tau = std::max(lm_tau * 10.0, grad_scale / opts_.step_scale + 1e-12);
                    continue;
                }

                states = cand_states;
                inputs = cand_inputs;
                cur = cand;
                consider_best(states, inputs, cur);
                stepped = true;

                if (alpha == 1.0)
                    lm_tau *= 0.2;
                else if (alpha <= 0.125)
                    lm_tau = std::max(10.0 * lm_tau, 1e-3 * grad_scale / opts_.step_scale);
                else
                    lm_tau = std::max(2.0 * lm_tau, 1e-3 * grad_scale / opts_.step_scale);

                if (cur.max_violation <= opts_.constraint_tolerance &&
                    pred <= 1e-9 * (1.0 + std::abs(cur.objective)))
                    converged = true;
            }
            if (!stepped || converged) break;
        }

        HorizonPlan plan;
        plan.states = std::move(best_states);
        plan.inputs = std::move(best_inputs);
        plan.objective = best_objective;
        plan.feasible = best_violation <= opts_.constraint_tolerance;
        plan.solver_iters = majors;
        return plan;
    }

  private:
    // forward-simulate the inputs; false if a singular configuration is hit
    static bool rollout(const NlpProblem& p, const std::vector<GrfInput>& inputs,
                        std::vector<AgentState>& states) {
        states[0] = p.x0;
        try {
            for (size_t k = 0; k < inputs.size(); ++k)
                states[k + 1] = euler_step(states[k], inputs[k],
                                           p.t_start + static_cast<double>(k) * p.ts, p.ts,
                                           p.model, p.schedule);
        } catch (const SingularConfigurationError&) {
            return false;
        }
        return true;
    }

    SolverOptions opts_;
};

}  // namespace dnmpc
