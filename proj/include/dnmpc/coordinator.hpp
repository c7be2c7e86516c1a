#pragma once

#include "dnmpc/nmpc.hpp"
#include "dnmpc/solver.hpp"

#include <chrono>
#include <functional>
#include <map>
#include <optional>
#include <thread>
#include <vector>

namespace dnmpc {

struct PlanMessage {
    int sender = -1;
    long tick = -1;  // solve timestamp; bootstrap plans carry tick -1
    HorizonPlan plan;
};

struct NeighborBuffer {
    std::map<int, PlanMessage> latest;
    std::map<int, int> staleness;  // age of the stored plan at the last solve
};

// Shift stored neighbor plans forward to cover ticks t..t+N. Plans are at
// most one tick old in normal operation; dropped messages degrade gracefully
// through repeated constant-velocity extension.
inline std::map<int, HorizonPlan> estimate_neighbors(const NeighborBuffer& buffer, long t,
                                                     double ts) {
    std::map<int, HorizonPlan> estimates;
    for (const auto& [id, msg] : buffer.latest) {
        if (msg.tick >= t)
            throw std::logic_error("estimate_neighbors: plan from the current tick (delay "
                                   "invariant violated)");
        HorizonPlan shifted = msg.plan;
        for (long s = msg.tick; s < t; ++s) shifted = shift_plan(shifted, ts);
        estimates.emplace(id, std::move(shifted));
    }
    return estimates;
}

// Hold-position plans for every agent so the first real solve has estimates.
inline std::vector<NeighborBuffer> bootstrap(const std::vector<AgentState>& x0_all, int horizon) {
    const int n_agents = static_cast<int>(x0_all.size());
    std::vector<HorizonPlan> hold(static_cast<size_t>(n_agents));
    for (int i = 0; i < n_agents; ++i) {
        hold[static_cast<size_t>(i)].t0 = -1;
        hold[static_cast<size_t>(i)].states.assign(static_cast<size_t>(horizon) + 1,
                                                   x0_all[static_cast<size_t>(i)]);
        hold[static_cast<size_t>(i)].inputs.assign(static_cast<size_t>(horizon), GrfInput{});
    }
    std::vector<NeighborBuffer> buffers(static_cast<size_t>(n_agents));
    for (int i = 0; i < n_agents; ++i) {
        for (int j = 0; j < n_agents; ++j) {
            if (i == j) continue;
            buffers[static_cast<size_t>(i)].latest[j] =
                PlanMessage{j, -1, hold[static_cast<size_t>(j)]};
            buffers[static_cast<size_t>(i)].staleness[j] = 0;
        }
    }
    return buffers;
}

struct CoordinatorParams {
    ModelParams model;
    ContactSchedule schedule;
    SafetyParams safety;
    CostParams cost = CostParams::defaults();
    SafetyMode mode = SafetyMode::HocbfMin;
    SolverOptions solver;
    int horizon = 10;
    double ts = 0.01;
    bool parallel_agents = false;
    // optional message loss: return true to withhold sender's message at tick
    std::function<bool(int sender, long tick)> drop_message;
};

struct AgentTickResult {
    GrfInput applied;       // first input actually commanded this tick
    HorizonPlan published;  // plan entering neighbors' buffers for tick t+1
    double objective = 0.0;
    bool feasible = false;
    bool used_fallback = false;
    int solver_iters = 0;
    double solve_time_ms = 0.0;
    double min_safety_residual = std::numeric_limits<double>::infinity();
};

// Tick-synchronous multi-agent loop: every agent solves against an immutable
// snapshot of the previous tick's plans (OSDCP), then all new plans are
// published at a barrier. All-to-all neighbor topology.
class Coordinator {
  public:
    Coordinator(std::vector<std::function<AgentState(long)>> references,
                std::vector<Vec2> obstacles, CoordinatorParams params)
        : params_(std::move(params)),
          references_(std::move(references)),
          obstacles_(std::move(obstacles)),
          solvers_(references_.size(), NmpcSolver(params_.solver)) {
        prev_plans_.resize(references_.size());
    }

    int num_agents() const { return static_cast<int>(references_.size()); }
    long current_tick() const { return tick_; }
    const std::vector<NeighborBuffer>& buffers() const { return buffers_; }
    const std::vector<Vec2>& obstacles() const { return obstacles_; }

    void reset(const std::vector<AgentState>& x0_all) {
        buffers_ = bootstrap(x0_all, params_.horizon);
        for (auto& plan : prev_plans_) plan.reset();
        tick_ = 0;
    }

    std::vector<AgentTickResult> tick(const std::vector<AgentState>& measured) {
        const long t = tick_;
        const int n = num_agents();
        std::vector<AgentTickResult> results(static_cast<size_t>(n));

        auto solve_one = [&](int i) {
            const size_t is = static_cast<size_t>(i);
            AgentTickResult& out = results[is];
            const auto t_begin = std::chrono::steady_clock::now();

            auto estimates = estimate_neighbors(buffers_[is], t, params_.ts);
            for (const auto& [id, msg] : buffers_[is].latest)
                buffers_[is].staleness[id] = static_cast<int>(t - msg.tick);

            std::vector<std::vector<Vec2>> neighbor_xy;
            neighbor_xy.reserve(estimates.size());
            for (const auto& [id, plan] : estimates) {
                std::vector<Vec2> seq;
                seq.reserve(plan.states.size());
                for (const auto& s : plan.states) seq.push_back(com_projection(s));
                neighbor_xy.push_back(std::move(seq));
            }

            std::vector<AgentState> refs(static_cast<size_t>(params_.horizon) + 1);
            for (int k = 0; k <= params_.horizon; ++k)
                refs[static_cast<size_t>(k)] = references_[is](t + k);

            const NlpProblem problem =
                transcribe(measured[is], refs, neighbor_xy, obstacles_, t * params_.ts,
                           params_.model, params_.schedule, params_.safety, params_.cost,
                           params_.mode);

            std::optional<HorizonPlan> warm;
            if (prev_plans_[is]) warm = shift_plan(*prev_plans_[is], params_.ts);

            HorizonPlan plan = solvers_[is].solve(problem, warm);
            plan.t0 = t;
            out.objective = plan.objective;
            out.feasible = plan.feasible;
            out.solver_iters = plan.solver_iters;

            if (plan.feasible || !warm) {
                out.published = std::move(plan);
            } else {
                // fall back to the previous shifted plan; its first input is
                // what gets applied, and neighbors should estimate from it
                out.used_fallback = true;
                out.published = *warm;
                out.published.t0 = t;
                out.published.feasible = false;
            }
            out.applied = out.published.inputs.front();
            const auto flags = contact_flags(t * params_.ts, params_.schedule);
            bool structure_ok = true;
            for (int leg = 0; leg < kNumLegs; ++leg)
                if (!flags[static_cast<size_t>(leg)] && out.applied.leg(leg).norm() > 0.0)
                    structure_ok = false;
            if (!structure_ok) out.applied = problem.u_ref.front();

            if (problem.num_pairs() > 0) {
                std::vector<Vec2> own;
                own.reserve(out.published.states.size());
                for (const auto& s : out.published.states) own.push_back(com_projection(s));
                out.min_safety_residual =
                    hocbf_residuals_xy(own, neighbor_xy, obstacles_, params_.safety).minCoeff();
            }
            out.solve_time_ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                          t_begin)
                    .count();
        };

        if (params_.parallel_agents && n > 1 && !params_.solver.debug) {
            std::vector<std::thread> workers;
            workers.reserve(static_cast<size_t>(n - 1));
            for (int i = 1; i < n; ++i) workers.emplace_back(solve_one, i);
            solve_one(0);
            for (auto& w : workers) w.join();
        } else {
            for (int i = 0; i < n; ++i) solve_one(i);
        }

        // barrier: deliver all new messages for use at tick t+1
        for (int i = 0; i < n; ++i) {
            prev_plans_[static_cast<size_t>(i)] = results[static_cast<size_t>(i)].published;
            if (params_.drop_message && params_.drop_message(i, t)) continue;
            for (int j = 0; j < n; ++j) {
                if (i == j) continue;
                buffers_[static_cast<size_t>(j)].latest[i] =
                    PlanMessage{i, t, results[static_cast<size_t>(i)].published};
            }
        }
        ++tick_;
        return results;
    }

  private:
    CoordinatorParams params_;
    std::vector<std::function<AgentState(long)>> references_;
    std::vector<Vec2> obstacles_;
    std::vector<NeighborBuffer> buffers_;
    std::vector<std::optional<HorizonPlan>> prev_plans_;
    std::vector<NmpcSolver> solvers_;
    long tick_ = 0;
};

}  // namespace dnmpc
