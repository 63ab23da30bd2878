#pragma once

// Planar kinematics: pose algebra, exact unicycle integration, 2-link arm
// forward/inverse kinematics. Everything double-precision and closed-form so
// trajectories are bit-reproducible.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>

#include "acdit/common.hpp"

namespace acdit {

constexpr double kPi = 3.14159265358979323846;

// wraps into (−π, π]
inline double wrap_angle(double a) {
  a = std::fmod(a + kPi, 2.0 * kPi);
  if (a <= 0.0) a += 2.0 * kPi;
  return a - kPi;
}

struct Pose2D {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;  // radians in (−π, π]
};

// Exact closed-form arc integration of the unicycle model; straight-line
// limit below |omega| = 1e-9 where the arc form loses precision.
inline Pose2D unicycle_integrate(const Pose2D& pose, double v, double omega,
                                 double dt) {
  if (!(dt > 0.0)) throw SimError("unicycle_integrate: dt must be > 0");
  if (!std::isfinite(pose.x) || !std::isfinite(pose.y) ||
      !std::isfinite(pose.theta) || !std::isfinite(v) ||
      !std::isfinite(omega) || !std::isfinite(dt))
    throw SimError("unicycle_integrate: non-finite input");
  Pose2D out;
  if (std::abs(omega) < 1e-9) {
    out.x = pose.x + v * std::cos(pose.theta) * dt;
    out.y = pose.y + v * std::sin(pose.theta) * dt;
    out.theta = wrap_angle(pose.theta + omega * dt);
  } else {
    double r = v / omega;
    double th1 = pose.theta + omega * dt;
    out.x = pose.x + r * (std::sin(th1) - std::sin(pose.theta));
    out.y = pose.y + r * (std::cos(pose.theta) - std::cos(th1));
    out.theta = wrap_angle(th1);
  }
  return out;
}

// End-effector world position of the 2-link arm mounted at the base origin,
// link 1 measured from the base heading.
inline std::array<double, 2> arm_fk(const Pose2D& base, double j1, double j2,
                                    double l1, double l2) {
  double a1 = base.theta + j1;
  double a2 = a1 + j2;
  double x = base.x + l1 * std::cos(a1) + l2 * std::cos(a2);
  double y = base.y + l1 * std::sin(a1) + l2 * std::sin(a2);
  return {x, y};
}

// Joint angles reaching a target given in the base frame. Out-of-reach
// targets are clamped onto the reachable annulus; the elbow sign is chosen
// to respect the ±limit joint range where possible.
inline std::array<double, 2> arm_ik(double x, double y, double l1, double l2,
                                    double joint_limit) {
  double d2 = x * x + y * y;
  double D = (d2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
  D = std::clamp(D, -1.0, 1.0);
  auto solve = [&](double elbow_sign) -> std::array<double, 2> {
    double j2 = elbow_sign * std::acos(D);
    double j1 = std::atan2(y, x) -
                std::atan2(l2 * std::sin(j2), l1 + l2 * std::cos(j2));
    return {wrap_angle(j1), wrap_angle(j2)};
  };
  auto within = [&](const std::array<double, 2>& j) {
    return std::abs(j[0]) <= joint_limit && std::abs(j[1]) <= joint_limit;
  };
  auto a = solve(1.0);
  if (within(a)) return a;
  auto b = solve(-1.0);
  if (within(b)) return b;
  a[0] = std::clamp(a[0], -joint_limit, joint_limit);
  a[1] = std::clamp(a[1], -joint_limit, joint_limit);
  return a;
}

inline double dist2d(double ax, double ay, double bx, double by) {
  return std::hypot(ax - bx, ay - by);
}

// distance from point p to segment [a, b]
inline double point_segment_dist(double px, double py, double ax, double ay,
                                 double bx, double by) {
  double dx = bx - ax, dy = by - ay;
  double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return dist2d(px, py, ax + t * dx, ay + t * dy);
}

}  // namespace acdit
