#pragma once

#include "dnmpc/types.hpp"

#include <array>
#include <cmath>

namespace dnmpc {

inline Mat3 skew(const Vec3& v) {
    Mat3 m;
    m << 0.0, -v.z(), v.y(),
         v.z(), 0.0, -v.x(),
        -v.y(), v.x(), 0.0;
    return m;
}

// ZYX (yaw-pitch-roll) body-to-world rotation.
inline Mat3 rotation_zyx(const Vec3& theta) {
    const double cr = std::cos(theta.x()), sr = std::sin(theta.x());
    const double cp = std::cos(theta.y()), sp = std::sin(theta.y());
    const double cy = std::cos(theta.z()), sy = std::sin(theta.z());
    Mat3 rx, ry, rz;
    rx << 1, 0, 0, 0, cr, -sr, 0, sr, cr;
    ry << cp, 0, sp, 0, 1, 0, -sp, 0, cp;
    rz << cy, -sy, 0, sy, cy, 0, 0, 0, 1;
    return rz * ry * rx;
}

// dR/d(roll), dR/d(pitch), dR/d(yaw).
inline std::array<Mat3, 3> rotation_zyx_derivatives(const Vec3& theta) {
    const double cr = std::cos(theta.x()), sr = std::sin(theta.x());
    const double cp = std::cos(theta.y()), sp = std::sin(theta.y());
    const double cy = std::cos(theta.z()), sy = std::sin(theta.z());
    Mat3 rx, ry, rz, drx, dry, drz;
    rx << 1, 0, 0, 0, cr, -sr, 0, sr, cr;
    ry << cp, 0, sp, 0, 1, 0, -sp, 0, cp;
    rz << cy, -sy, 0, sy, cy, 0, 0, 0, 1;
    drx << 0, 0, 0, 0, -sr, -cr, 0, cr, -sr;
    dry << -sp, 0, cp, 0, 0, 0, -cp, 0, -sp;
    drz << -sy, -cy, 0, cy, -sy, 0, 0, 0, 0;
    return {rz * ry * drx, rz * dry * rx, drz * ry * rx};
}

// Maps body angular velocity to ZYX Euler-angle rates: theta_dot = A(theta) * omega.
inline Mat3 euler_rate_matrix(const Vec3& theta) {
    if (pitch_near_singularity(theta.y()))
        throw SingularConfigurationError("euler_rate_matrix: pitch within 1e-3 of +/- pi/2");
    const double cr = std::cos(theta.x()), sr = std::sin(theta.x());
    const double cp = std::cos(theta.y()), tp = std::tan(theta.y());
    Mat3 a;
    a << 1.0, sr * tp, cr * tp,
         0.0, cr, -sr,
         0.0, sr / cp, cr / cp;
    return a;
}

// dA/d(roll), dA/d(pitch); dA/d(yaw) is zero.
inline std::array<Mat3, 2> euler_rate_matrix_derivatives(const Vec3& theta) {
    const double cr = std::cos(theta.x()), sr = std::sin(theta.x());
    const double cp = std::cos(theta.y()), sp = std::sin(theta.y());
    const double tp = sp / cp;
    Mat3 da_dr, da_dp;
    da_dr << 0.0, cr * tp, -sr * tp,
             0.0, -sr, -cr,
             0.0, cr / cp, -sr / cp;
    const double sec2 = 1.0 / (cp * cp);
    da_dp << 0.0, sr * sec2, cr * sec2,
             0.0, 0.0, 0.0,
             0.0, sr * sp * sec2, cr * sp * sec2;
    return {da_dr, da_dp};
}

// Stance flags at time t, ordered [FL, FR, RL, RR]. Diagonal-pair trot:
// {FL,RR} for the first half of each cycle, {FR,RL} for the second.
inline std::array<bool, 4> contact_flags(double t, const ContactSchedule& schedule) {
    const double cycle = schedule.cycle_time();
    double s = std::fmod(t + schedule.phase_offset * cycle, cycle);
    if (s < 0.0) s += cycle;
    const bool first_half = s < schedule.step_time;
    return {first_half, !first_half, !first_half, first_half};
}

// Time since the current stance phase began (0 at touchdown, and for swing legs).
inline double time_since_touchdown(double t, int leg, const ContactSchedule& schedule) {
    const auto flags = contact_flags(t, schedule);
    if (!flags[static_cast<size_t>(leg)]) return 0.0;
    const double cycle = schedule.cycle_time();
    double s = std::fmod(t + schedule.phase_offset * cycle, cycle);
    if (s < 0.0) s += cycle;
    return s < schedule.step_time ? s : s - schedule.step_time;
}

namespace detail {

// Yaw rate (third Euler-angle rate) and its partials; used to rewind yaw to
// the touchdown instant without a state history.
struct YawRate {
    double value;
    Vec3 d_theta;
    Vec3 d_omega;
};

inline YawRate yaw_rate(const Vec3& theta, const Vec3& omega) {
    const double cr = std::cos(theta.x()), sr = std::sin(theta.x());
    const double cp = std::cos(theta.y()), sp = std::sin(theta.y());
    YawRate y;
    y.value = (sr * omega.y() + cr * omega.z()) / cp;
    y.d_theta = Vec3((cr * omega.y() - sr * omega.z()) / cp,
                     (sr * omega.y() + cr * omega.z()) * sp / (cp * cp), 0.0);
    y.d_omega = Vec3(0.0, sr / cp, cr / cp);
    return y;
}

}  // namespace detail

// World-frame foot positions under the pinned-stance model. A stance foot is
// held at the spot it had at touchdown: hip offset rotated by the touchdown
// yaw, placed on the ground plane under the hip, plus the Raibert offset
// v * step_time / 2. The touchdown-instant pose is reconstructed by constant-
// velocity rewind, so the function stays a pure map of (t, x). Swing legs get
// the same formula at the current time (their forces are zero).
inline Eigen::Matrix<double, 3, 4> foot_positions(double t, const AgentState& x,
                                                  const ModelParams& params,
                                                  const ContactSchedule& schedule) {
    Eigen::Matrix<double, 3, 4> feet;
    const double yd = detail::yaw_rate(x.theta, x.omega).value;
    for (int leg = 0; leg < kNumLegs; ++leg) {
        const double dt = time_since_touchdown(t, leg, schedule);
        const double yaw_td = x.theta.z() - yd * dt;
        const double cy = std::cos(yaw_td), sy = std::sin(yaw_td);
        const Vec2& hip = params.hip_offsets[static_cast<size_t>(leg)];
        const Vec2 hip_w(cy * hip.x() - sy * hip.y(), sy * hip.x() + cy * hip.y());
        const Vec2 xy = x.p.head<2>() + (schedule.step_time / 2.0 - dt) * x.v.head<2>() + hip_w;
        feet.col(leg) << xy.x(), xy.y(), 0.0;
    }
    return feet;
}

struct Wrench {
    Vec3 f_net = Vec3::Zero();
    Vec3 tau_net = Vec3::Zero();
};

// Net world-frame wrench about the COM; linear in u (this is E(t) applied to u).
inline Wrench grf_to_wrench(const GrfInput& u, const Eigen::Matrix<double, 3, 4>& feet,
                            const Vec3& p) {
    Wrench w;
    for (int leg = 0; leg < kNumLegs; ++leg) {
        const Vec3 f = u.leg(leg);
        w.f_net += f;
        w.tau_net += (feet.col(leg) - p).cross(f);
    }
    return w;
}

// Time derivative of the 12-dim state under the SRB model.
inline Vec12 continuous_dynamics(const AgentState& x, const Vec3& f_net, const Vec3& tau_net,
                                 const ModelParams& params) {
    const Mat3 a = euler_rate_matrix(x.theta);
    const Mat3 r = rotation_zyx(x.theta);
    const Mat3& inertia = params.inertia;
    Vec12 dx;
    dx.segment<3>(0) = x.v;
    dx.segment<3>(3) = f_net / params.mass - params.gravity;
    dx.segment<3>(6) = a * x.omega;
    dx.segment<3>(9) =
        inertia.inverse() * (r.transpose() * tau_net - x.omega.cross(inertia * x.omega));
    return dx;
}

// One forward-Euler step of the prediction model.
inline AgentState euler_step(const AgentState& x, const GrfInput& u, double t, double Ts,
                             const ModelParams& params, const ContactSchedule& schedule) {
    const auto feet = foot_positions(t, x, params, schedule);
    const Wrench w = grf_to_wrench(u, feet, x.p);
    const Vec12 dx = continuous_dynamics(x, w.f_net, w.tau_net, params);
    return AgentState::from_vector(x.to_vector() + Ts * dx);
}

// Analytic Jacobians of euler_step with respect to the 12-dim state and the
// 12-dim stacked GRF vector (all four legs, swing columns included).
inline void euler_step_jacobians(const AgentState& x, const GrfInput& u, double t, double Ts,
                                 const ModelParams& params, const ContactSchedule& schedule,
                                 Mat12& a_d, Mat12& b_d) {
    const Mat3 a = euler_rate_matrix(x.theta);
    const auto da = euler_rate_matrix_derivatives(x.theta);
    const Mat3 r = rotation_zyx(x.theta);
    const auto dr = rotation_zyx_derivatives(x.theta);
    const Mat3 inertia_inv = params.inertia.inverse();
    const auto feet = foot_positions(t, x, params, schedule);
    const auto yr = detail::yaw_rate(x.theta, x.omega);

    // tau_net and its partials w.r.t. state blocks and per-leg forces.
    Vec3 tau = Vec3::Zero();
    Mat3 dtau_dp = Mat3::Zero(), dtau_dv = Mat3::Zero();
    Mat3 dtau_dtheta = Mat3::Zero(), dtau_domega = Mat3::Zero();
    std::array<Mat3, 4> dtau_du;
    for (int leg = 0; leg < kNumLegs; ++leg) {
        const Vec3 f = u.leg(leg);
        const double dt = time_since_touchdown(t, leg, schedule);
        const double yaw_td = x.theta.z() - yr.value * dt;
        const double cy = std::cos(yaw_td), sy = std::sin(yaw_td);
        const Vec2& hip = params.hip_offsets[static_cast<size_t>(leg)];
        const Vec2 hip_w(cy * hip.x() - sy * hip.y(), sy * hip.x() + cy * hip.y());
        const double c = schedule.step_time / 2.0 - dt;
        const Vec3 arm(c * x.v.x() + hip_w.x(), c * x.v.y() + hip_w.y(), -x.p.z());
        tau += arm.cross(f);
        dtau_du[static_cast<size_t>(leg)] = skew(arm);

        const Mat3 neg_sf = -skew(f);
        // d(arm)/dp: only the z entry moves with the COM.
        Mat3 darm = Mat3::Zero();
        darm(2, 2) = -1.0;
        dtau_dp += neg_sf * darm;
        // d(arm)/dv: Raibert offset minus rewind, xy only.
        darm.setZero();
        darm(0, 0) = c;
        darm(1, 1) = c;
        dtau_dv += neg_sf * darm;
        // d(arm)/d(theta, omega) through the touchdown yaw.
        const Vec3 dhip_dyaw(-sy * hip.x() - cy * hip.y(), cy * hip.x() - sy * hip.y(), 0.0);
        const Vec3 dyawtd_dtheta = Vec3(0.0, 0.0, 1.0) - dt * yr.d_theta;
        const Vec3 dyawtd_domega = -dt * yr.d_omega;
        dtau_dtheta += neg_sf * (dhip_dyaw * dyawtd_dtheta.transpose());
        dtau_domega += neg_sf * (dhip_dyaw * dyawtd_domega.transpose());
    }

    Mat12 fx = Mat12::Zero();
    fx.block<3, 3>(0, 3).setIdentity();                     // pdot = v
    fx.block<3, 3>(6, 6).col(0) = da[0] * x.omega;          // d(A w)/d(roll)
    fx.block<3, 3>(6, 6).col(1) = da[1] * x.omega;          // d(A w)/d(pitch)
    fx.block<3, 3>(6, 9) = a;

    const Mat3 rt = r.transpose();
    fx.block<3, 3>(9, 0) = inertia_inv * rt * dtau_dp;
    fx.block<3, 3>(9, 3) = inertia_inv * rt * dtau_dv;
    Mat3 dwdot_dtheta = rt * dtau_dtheta;
    for (int i = 0; i < 3; ++i) dwdot_dtheta.col(i) += dr[static_cast<size_t>(i)].transpose() * tau;
    fx.block<3, 3>(9, 6) = inertia_inv * dwdot_dtheta;
    fx.block<3, 3>(9, 9) =
        inertia_inv *
        (rt * dtau_domega - (skew(x.omega) * params.inertia - skew(params.inertia * x.omega)));

    Mat12 fu = Mat12::Zero();
    for (int leg = 0; leg < kNumLegs; ++leg) {
        fu.block<3, 3>(3, 3 * leg) = Mat3::Identity() / params.mass;
        fu.block<3, 3>(9, 3 * leg) = inertia_inv * rt * dtau_du[static_cast<size_t>(leg)];
    }

    a_d = Mat12::Identity() + Ts * fx;
    b_d = Ts * fu;
}

// Friction-pyramid residuals, feasible iff all entries are >= 0. Stance legs
// contribute [fz - fz_min, fz_max - fz, mu*fz - |fx|, mu*fz - |fy|]; swing
// legs contribute [-|fx|, -|fy|, -|fz|], which forces their forces to zero.
inline Eigen::VectorXd friction_cone_residuals(const GrfInput& u, const ModelParams& params,
                                               const std::array<bool, 4>& stance) {
    int rows = 0;
    for (bool s : stance) rows += s ? 4 : 3;
    Eigen::VectorXd res(rows);
    int at = 0;
    for (int leg = 0; leg < kNumLegs; ++leg) {
        const Vec3 f = u.leg(leg);
        if (stance[static_cast<size_t>(leg)]) {
            res(at++) = f.z() - params.fz_min;
            res(at++) = params.fz_max - f.z();
            res(at++) = params.mu * f.z() - std::abs(f.x());
            res(at++) = params.mu * f.z() - std::abs(f.y());
        } else {
            res(at++) = -std::abs(f.x());
            res(at++) = -std::abs(f.y());
            res(at++) = -std::abs(f.z());
        }
    }
    return res;
}

// Gravity-compensating vertical force split evenly over the stance legs; the
// nominal input the stage cost measures deviations from, and the cold-start
// input guess.
inline GrfInput nominal_stance_forces(const ModelParams& params,
                                      const std::array<bool, 4>& stance) {
    int n_stance = 0;
    for (bool s : stance) n_stance += s ? 1 : 0;
    GrfInput u;
    if (n_stance == 0) return u;
    const double fz = params.mass * params.gravity.z() / n_stance;
    for (int leg = 0; leg < kNumLegs; ++leg)
        if (stance[static_cast<size_t>(leg)]) u.set_leg(leg, Vec3(0.0, 0.0, fz));
    return u;
}

}  // namespace dnmpc
