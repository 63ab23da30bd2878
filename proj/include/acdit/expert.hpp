#pragma once

// Scripted demonstration controller. Phase structure per decision:
// rotate toward the manipulation point, drive with the arm concurrently
// moving to a pre-grasp pose, reach via closed-loop inverse kinematics, then
// grasp / release / toggle. Emits k-step chunks by simulating itself forward.

#include "acdit/world.hpp"

namespace acdit {

namespace detail {

enum class GripAct { grasp, release, toggle };

inline std::array<double, 5> expert_single(const WorldState& s,
                                           const WorldConfig& cfg) {
  std::array<double, 5> a{0, 0, 0, 0, 0};
  if (s.target_id < 0) throw SimError("expert: no target object");
  auto target = manipulation_point(s);
  double d_world = dist2d(s.base.x, s.base.y, target[0], target[1]);
  if (d_world > 3.0 * cfg.world_half)
    throw SimError("expert: unreachable target");

  bool carrying = s.held_object >= 0;
  GripAct act;
  if (s.task == Task::navigate_open)
    act = GripAct::toggle;
  else if (carrying)
    act = GripAct::release;
  else
    act = GripAct::grasp;

  // target in the base frame
  double ct = std::cos(-s.base.theta), st = std::sin(-s.base.theta);
  double dx = target[0] - s.base.x, dy = target[1] - s.base.y;
  double tx = ct * dx - st * dy, ty = st * dx + ct * dy;
  double rho = std::hypot(tx, ty);
  double alpha = std::atan2(ty, tx);

  const double stance = 0.42;           // base-to-target reach distance
  const double arm_rate = 0.2;          // max joint delta per step
  const double grasp_margin = 0.06;     // commit distance for grasp/toggle
  double release_margin = std::max(0.05, s.goal_radius * 0.6);

  auto arm_toward = [&](const std::array<double, 2>& jt) {
    a[2] = std::clamp(jt[0] - s.j1, -arm_rate, arm_rate);
    a[3] = std::clamp(jt[1] - s.j2, -arm_rate, arm_rate);
  };
  double hold = carrying ? 1.0 : 0.0;

  if (rho > stance + 0.06) {
    // navigate: rotate/drive with the arm concurrently assuming the
    // pre-manipulation pose
    a[1] = std::clamp(2.5 * alpha, -cfg.w_max, cfg.w_max);
    a[0] = std::abs(alpha) < 0.6
               ? std::clamp(1.8 * (rho - stance), 0.0, cfg.v_max)
               : 0.0;
    arm_toward(arm_ik(stance, 0.0, cfg.link1, cfg.link2, cfg.joint_limit));
    a[4] = hold;
    return a;
  }

  if (std::abs(alpha) > 0.12 && rho > 0.05) {
    // face the target before the fine reach
    a[1] = std::clamp(2.5 * alpha, -cfg.w_max, cfg.w_max);
    if (rho < stance - 0.08) a[0] = std::clamp(1.5 * (rho - stance), -0.3, 0.0);
    arm_toward(arm_ik(stance, 0.0, cfg.link1, cfg.link2, cfg.joint_limit));
    a[4] = hold;
    return a;
  }

  // reach: closed-loop IK to the target point
  if (rho < stance - 0.08) a[0] = std::clamp(1.5 * (rho - stance), -0.3, 0.0);
  arm_toward(arm_ik(tx, ty, cfg.link1, cfg.link2, cfg.joint_limit));
  auto ee = end_effector(s, cfg);
  double ee_dist = dist2d(ee[0], ee[1], target[0], target[1]);
  if (act == GripAct::release) {
    a[4] = ee_dist <= release_margin ? 0.0 : 1.0;
  } else {
    // command closed only at commit distance; re-arm (open) otherwise so a
    // premature closure can rise across the threshold again
    a[4] = ee_dist <= grasp_margin ? 1.0 : 0.0;
  }
  return a;
}

}  // namespace detail

// k-step expert chunk; later rows come from simulating the script forward.
inline ActionChunk expert_action(const WorldState& state, const WorldConfig& cfg) {
  ActionChunk chunk(cfg.horizon);
  WorldState s = state;
  for (int i = 0; i < cfg.horizon; ++i) {
    auto a = detail::expert_single(s, cfg);
    std::copy(a.begin(), a.end(), chunk.row(i));
    if (i + 1 < cfg.horizon) s = step(s, chunk.row(i), cfg);
  }
  return chunk;
}

// Runs the expert closed-loop; returns success and leaves the final state in
// `state`. Used by tests and dataset collection.
inline bool expert_rollout(WorldState& state, const WorldConfig& cfg,
                           int max_steps = 0) {
  if (max_steps <= 0) max_steps = cfg.max_steps;
  while (state.step_count < max_steps) {
    if (success(state, cfg)) return true;
    auto chunk = expert_action(state, cfg);
    state = step(state, chunk.row(0), cfg);
  }
  return success(state, cfg);
}

}  // namespace acdit
