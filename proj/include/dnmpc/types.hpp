#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace dnmpc {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec12 = Eigen::Matrix<double, 12, 1>;
using Mat12 = Eigen::Matrix<double, 12, 12>;

inline constexpr int kNumLegs = 4;

// Leg ordering used everywhere: front-left, front-right, rear-left, rear-right.
enum Leg : int { FL = 0, FR = 1, RL = 2, RR = 3 };

struct SingularConfigurationError : std::domain_error {
    using std::domain_error::domain_error;
};

struct EmptyEnvironmentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NoPathError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// 12-dim single-rigid-body state. theta is roll-pitch-yaw (ZYX), omega is the
// body-frame angular velocity.
struct AgentState {
    Vec3 p = Vec3::Zero();
    Vec3 v = Vec3::Zero();
    Vec3 theta = Vec3::Zero();
    Vec3 omega = Vec3::Zero();

    Vec12 to_vector() const {
        Vec12 x;
        x << p, v, theta, omega;
        return x;
    }

    static AgentState from_vector(const Vec12& x) {
        AgentState s;
        s.p = x.segment<3>(0);
        s.v = x.segment<3>(3);
        s.theta = x.segment<3>(6);
        s.omega = x.segment<3>(9);
        return s;
    }

    bool finite() const { return to_vector().allFinite(); }
};

inline constexpr double kPitchSingularityMargin = 1e-3;

inline bool pitch_near_singularity(double pitch) {
    return std::abs(std::abs(pitch) - M_PI / 2.0) < kPitchSingularityMargin;
}

// World-frame ground reaction forces, one 3-vector per leg.
struct GrfInput {
    Eigen::Matrix<double, 3, 4> forces = Eigen::Matrix<double, 3, 4>::Zero();

    Vec3 leg(int i) const { return forces.col(i); }
    void set_leg(int i, const Vec3& f) { forces.col(i) = f; }

    Vec12 to_vector() const {
        Vec12 u;
        for (int i = 0; i < kNumLegs; ++i) u.segment<3>(3 * i) = forces.col(i);
        return u;
    }

    static GrfInput from_vector(const Vec12& u) {
        GrfInput g;
        for (int i = 0; i < kNumLegs; ++i) g.forces.col(i) = u.segment<3>(3 * i);
        return g;
    }
};

struct ModelParams {
    double mass = 12.45;                                   // kg
    Mat3 inertia = (Vec3() << 0.017, 0.056, 0.065).finished().asDiagonal();  // kg m^2, body frame
    Vec3 gravity = Vec3(0.0, 0.0, 9.81);                   // m/s^2, so vdot = f/m - gravity
    std::array<Vec2, 4> hip_offsets = {Vec2(0.183, 0.132), Vec2(0.183, -0.132),
                                       Vec2(-0.183, 0.132), Vec2(-0.183, -0.132)};
    double standing_height = 0.28;                         // m
    double mu = 0.6;                                       // friction coefficient
    double fz_min = 1.0;                                   // N
    double fz_max = 200.0;                                 // N

    void validate() const {
        if (!(mass > 0.0)) throw ConfigError("model.mass_kg must be positive");
        if (!inertia.isApprox(inertia.transpose(), 1e-9))
            throw ConfigError("model.inertia must be symmetric");
        Eigen::SelfAdjointEigenSolver<Mat3> es(inertia);
        if (es.eigenvalues().minCoeff() <= 0.0)
            throw ConfigError("model.inertia must be positive definite");
        if (!(mu > 0.0)) throw ConfigError("model.mu must be positive");
        if (!(fz_min >= 0.0 && fz_min < fz_max))
            throw ConfigError("model.fz bounds must satisfy 0 <= fz_min_n < fz_max_n");
    }
};

// Trot schedule: the {FL,RR} pair is in stance for the first half of each
// cycle (cycle = 2 * step_time), {FR,RL} for the second half.
struct ContactSchedule {
    double step_time = 0.18;    // s
    double phase_offset = 0.0;  // fraction of a full cycle in [0,1)

    double cycle_time() const { return 2.0 * step_time; }

    void validate() const {
        if (!(step_time > 0.0)) throw ConfigError("gait.step_time_s must be positive");
        if (phase_offset < 0.0 || phase_offset >= 1.0)
            throw ConfigError("gait.phase_offset must be in [0,1)");
    }
};

}  // namespace dnmpc
