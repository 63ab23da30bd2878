#pragma once

// Deterministic planar mobile-manipulation world: a unicycle base carrying a
// 2-link arm with a threshold gripper, disc objects, a goal region, and a
// latch. Produces three semantic camera views, a padded point cloud, and a
// proprioceptive+privileged state vector.

#include <array>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "acdit/common.hpp"
#include "acdit/geometry.hpp"

namespace acdit {

struct WorldConfig {
  double dt = 1.0 / 15.0;
  double control_hz = 15.0;
  double v_max = 1.8;       // |linear velocity| bound, m/s
  double w_max = kPi;       // |angular velocity| bound, rad/s
  double link1 = 0.3;       // arm link lengths, m
  double link2 = 0.25;
  double joint_limit = kPi / 2.0;  // per-joint range ±limit
  double grasp_dist = 0.08;        // gripper-to-object snap distance, m
  double grasp_threshold = 0.5;    // gripper fraction whose crossing grasps
  int max_steps = 200;
  double world_half = 4.0;  // world bounds [−world_half, world_half]²
  int image_size = 32;
  double exterior_extent = 4.0;  // exterior view covers extent×extent meters
  double wrist_extent = 1.0;
  double wrist_offset = 0.1;  // lateral camera offset from the end-effector
  int cloud_points = 256;
  double object_z = 0.1;  // cloud height of object surfaces (goal sits at 0)
  double robot_radius = 0.15;
  double arm_draw_halfwidth = 0.05;
  int horizon = 2;  // action-chunk length k
};

enum class Task { navigate_pick = 0, pick_place = 1, navigate_open = 2, navigate_place = 3 };

inline const std::vector<std::string>& task_names() {
  static const std::vector<std::string> names{"navigate_pick", "pick_place",
                                              "navigate_open", "navigate_place"};
  return names;
}

inline std::string task_name(Task t) { return task_names()[static_cast<int>(t)]; }

inline Task task_from_name(const std::string& name) {
  const auto& names = task_names();
  for (size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<Task>(i);
  throw SimError("unknown task: " + name);
}

// object categories; cloud/image intensity is (category+1)/8
constexpr int kCatRed = 0;
constexpr int kCatBlue = 1;
constexpr int kCatGreen = 2;
constexpr int kCatLatch = 3;
constexpr int kCatGoal = 6;  // pseudo-category for goal-region points

inline float category_intensity(int category) {
  return static_cast<float>(category + 1) / 8.0f;
}

struct Obj {
  double x = 0.0;
  double y = 0.0;
  double radius = 0.0;
  int category = 0;
};

struct WorldState {
  Pose2D base;
  double j1 = 0.0;
  double j2 = 0.0;
  double gripper = 0.0;  // closure fraction in [0, 1]
  int held_object = -1;  // object id, −1 when empty
  std::map<int, Obj> objects;
  double goal_x = 0.0, goal_y = 0.0, goal_radius = 0.0;
  int step_count = 0;
  Task task = Task::navigate_pick;
  int target_id = -1;      // object the instruction refers to
  bool latch_open = false;
  double last_v = 0.0, last_w = 0.0;  // executed base command of the last step
  uint64_t seed = 0;       // episode seed; drives per-step cloud sampling
};

// One k-step action chunk, row-major k×5 in decode order
// (v, ω, Δj1, Δj2, grip).
struct ActionChunk {
  int k = 0;
  std::vector<double> rows;  // k*5

  ActionChunk() = default;
  explicit ActionChunk(int horizon) : k(horizon), rows(static_cast<size_t>(horizon) * 5, 0.0) {}
  double* row(int i) { return rows.data() + static_cast<size_t>(i) * 5; }
  const double* row(int i) const { return rows.data() + static_cast<size_t>(i) * 5; }
};

constexpr int kActionDim = 5;
constexpr int kStateDim = 13;

struct Observation {
  // 3 views (exterior, left_wrist, right_wrist), each channel-major
  // 3×H×W: occupancy, object-category intensity, goal marker
  std::array<std::vector<float>, 3> views;
  std::vector<float> cloud;  // N×4 rows (x, y, z, intensity); pads have intensity −1
  std::vector<double> z;     // kStateDim entries, see observe()
  double c = 0.0;            // control frequency, Hz
};

enum class ViewId { exterior = 0, left_wrist = 1, right_wrist = 2 };
enum class Phase { drive = 0, approach = 1, manipulate = 2 };

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::drive: return "drive";
    case Phase::approach: return "approach";
    default: return "manipulate";
  }
}

// ---------------------------------------------------------------------------
// vocabulary and instructions

inline const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> words{
      "<pad>", "go",    "to",   "the",  "red",  "blue",  "green", "disc",
      "and",   "pick",  "drive", "near", "then", "grasp", "place", "into",
      "goal",  "put",   "in",   "latch", "open", "it",    "carry", "down",
      "at"};
  return words;
}

inline int token_id(const std::string& word) {
  const auto& v = vocabulary();
  for (size_t i = 0; i < v.size(); ++i)
    if (v[i] == word) return static_cast<int>(i);
  throw LookupError("word not in vocabulary: " + word);
}

inline std::vector<int> tokenize(const std::string& sentence) {
  std::vector<int> ids;
  std::string word;
  for (char ch : sentence) {
    if (ch == ' ') {
      if (!word.empty()) ids.push_back(token_id(word));
      word.clear();
    } else {
      word.push_back(ch);
    }
  }
  if (!word.empty()) ids.push_back(token_id(word));
  return ids;
}

inline std::string detokenize(const std::vector<int>& ids) {
  const auto& v = vocabulary();
  std::string s;
  for (int id : ids) {
    if (id < 0 || id >= static_cast<int>(v.size()))
      throw LookupError("token id out of range: " + std::to_string(id));
    if (!s.empty()) s += ' ';
    s += v[static_cast<size_t>(id)];
  }
  return s;
}

inline std::string color_word(int category) {
  switch (category) {
    case kCatRed: return "red";
    case kCatBlue: return "blue";
    case kCatGreen: return "green";
    default: throw LookupError("no color word for category " + std::to_string(category));
  }
}

// ---------------------------------------------------------------------------
// stepping

inline std::array<double, 2> end_effector(const WorldState& s, const WorldConfig& cfg) {
  return arm_fk(s.base, s.j1, s.j2, cfg.link1, cfg.link2);
}

// Kinematic step: clamp the action, integrate the base, move the arm, apply
// gripper threshold-crossing grasp/release, and carry the held object.
inline WorldState step(const WorldState& state, const double* action,
                       const WorldConfig& cfg) {
  WorldState s = state;
  double v = std::clamp(action[0], -cfg.v_max, cfg.v_max);
  double w = std::clamp(action[1], -cfg.w_max, cfg.w_max);
  double grip = std::clamp(action[4], 0.0, 1.0);

  s.base = unicycle_integrate(s.base, v, w, cfg.dt);
  s.j1 = std::clamp(s.j1 + action[2], -cfg.joint_limit, cfg.joint_limit);
  s.j2 = std::clamp(s.j2 + action[3], -cfg.joint_limit, cfg.joint_limit);

  auto ee = end_effector(s, cfg);
  bool rising = state.gripper < cfg.grasp_threshold && grip >= cfg.grasp_threshold;
  bool falling = state.gripper >= cfg.grasp_threshold && grip < cfg.grasp_threshold;
  if (rising && s.held_object < 0) {
    int best = -1;
    double best_d = cfg.grasp_dist;
    for (const auto& [id, obj] : s.objects) {
      double d = dist2d(ee[0], ee[1], obj.x, obj.y);
      if (d <= best_d) {
        best_d = d;
        best = id;
      }
    }
    if (best >= 0) {
      if (s.objects.at(best).category == kCatLatch)
        s.latch_open = !s.latch_open;  // latch toggles instead of attaching
      else
        s.held_object = best;
    }
  } else if (falling && s.held_object >= 0) {
    s.held_object = -1;  // object stays where it was released
  }
  s.gripper = grip;
  if (s.held_object >= 0) {
    auto& obj = s.objects.at(s.held_object);
    obj.x = ee[0];
    obj.y = ee[1];
  }
  s.last_v = v;
  s.last_w = w;
  s.step_count += 1;
  return s;
}

inline WorldState step(const WorldState& state, const ActionChunk& chunk,
                       int row, const WorldConfig& cfg) {
  return step(state, chunk.row(row), cfg);
}

// ---------------------------------------------------------------------------
// success and phase

inline bool success(const WorldState& s, const WorldConfig& cfg) {
  (void)cfg;
  switch (s.task) {
    case Task::navigate_pick:
      return s.held_object == s.target_id && s.target_id >= 0;
    case Task::navigate_open:
      return s.latch_open;
    case Task::pick_place:
    case Task::navigate_place: {
      if (s.held_object == s.target_id && s.target_id >= 0) return false;
      auto it = s.objects.find(s.target_id);
      if (it == s.objects.end()) return false;
      return dist2d(it->second.x, it->second.y, s.goal_x, s.goal_y) <=
             s.goal_radius;
    }
  }
  return false;
}

// Point the manipulation script is currently homing on: the target object
// until it is held (or toggled), then the goal region.
inline std::array<double, 2> manipulation_point(const WorldState& s) {
  bool carry_phase = false;
  if (s.task == Task::navigate_place) carry_phase = true;
  if (s.task == Task::pick_place && s.held_object == s.target_id &&
      s.target_id >= 0)
    carry_phase = true;
  if (carry_phase && s.held_object == s.target_id && s.target_id >= 0)
    return {s.goal_x, s.goal_y};
  auto it = s.objects.find(s.target_id);
  if (it == s.objects.end()) return {s.goal_x, s.goal_y};
  return {it->second.x, it->second.y};
}

inline Phase phase(const WorldState& s) {
  auto p = manipulation_point(s);
  double d = dist2d(s.base.x, s.base.y, p[0], p[1]);
  if (d > 0.9) return Phase::drive;
  if (d > 0.55) return Phase::approach;
  return Phase::manipulate;
}

// ---------------------------------------------------------------------------
// rendering
//
// Cell mapping (documented; tests invert it): for a view frame with center C,
// heading h, and extent E over an n×n grid, cell (i, j) covers the view-frame
// point (f, l) with forward f = E/2 − (i+0.5)·E/n and lateral-left
// l = −E/2 + (j+0.5)·E/n; world point = C + f·(cos h, sin h) + l·(−sin h, cos h).
// Row 0 is farthest forward; column n−1 is farthest left.

struct ViewFrame {
  double cx, cy, heading, extent;
};

inline ViewFrame view_frame(const WorldState& s, ViewId view,
                            const WorldConfig& cfg) {
  if (view == ViewId::exterior)
    return {s.base.x, s.base.y, s.base.theta, cfg.exterior_extent};
  auto ee = end_effector(s, cfg);
  double h = wrap_angle(s.base.theta + s.j1 + s.j2);
  double side = view == ViewId::left_wrist ? 1.0 : -1.0;
  double ox = -std::sin(h) * side * cfg.wrist_offset;
  double oy = std::cos(h) * side * cfg.wrist_offset;
  return {ee[0] + ox, ee[1] + oy, h, cfg.wrist_extent};
}

inline std::array<double, 2> cell_world_point(const ViewFrame& fr, int i, int j,
                                              int n) {
  double f = fr.extent / 2.0 - (i + 0.5) * fr.extent / n;
  double l = -fr.extent / 2.0 + (j + 0.5) * fr.extent / n;
  double ch = std::cos(fr.heading), sh = std::sin(fr.heading);
  return {fr.cx + f * ch - l * sh, fr.cy + f * sh + l * ch};
}

// 3×n×n channel-major semantic grid; all values are multiples of 1/8 so the
// dataset can store them losslessly as byte codes.
inline std::vector<float> render_view(const WorldState& s, ViewId view,
                                      const WorldConfig& cfg) {
  int n = cfg.image_size;
  std::vector<float> img(static_cast<size_t>(3) * n * n, 0.0f);
  ViewFrame fr = view_frame(s, view, cfg);
  auto ee = end_effector(s, cfg);
  double elbow_x = s.base.x + cfg.link1 * std::cos(s.base.theta + s.j1);
  double elbow_y = s.base.y + cfg.link1 * std::sin(s.base.theta + s.j1);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      auto p = cell_world_point(fr, i, j, n);
      if (std::abs(p[0]) > cfg.world_half || std::abs(p[1]) > cfg.world_half)
        continue;  // outside the world renders 0
      size_t at = static_cast<size_t>(i) * n + j;
      bool occupied = false;
      if (dist2d(p[0], p[1], s.base.x, s.base.y) <= cfg.robot_radius)
        occupied = true;
      if (!occupied &&
          point_segment_dist(p[0], p[1], s.base.x, s.base.y, elbow_x, elbow_y) <=
              cfg.arm_draw_halfwidth)
        occupied = true;
      if (!occupied &&
          point_segment_dist(p[0], p[1], elbow_x, elbow_y, ee[0], ee[1]) <=
              cfg.arm_draw_halfwidth)
        occupied = true;
      for (const auto& [id, obj] : s.objects) {
        if (dist2d(p[0], p[1], obj.x, obj.y) <= obj.radius) {
          occupied = true;
          if (img[static_cast<size_t>(n) * n + at] == 0.0f)
            img[static_cast<size_t>(n) * n + at] = category_intensity(obj.category);
        }
      }
      if (occupied) img[at] = 1.0f;
      if (s.goal_radius > 0.0 &&
          dist2d(p[0], p[1], s.goal_x, s.goal_y) <= s.goal_radius)
        img[2 * static_cast<size_t>(n) * n + at] = 1.0f;
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// point cloud
//
// Deterministic-given-seed surface samples on object discs and the goal
// region, expressed in the base frame, z = object_z for objects and 0 for the
// goal, intensity = (category+1)/8. Rows beyond the sampled count are pads
// with intensity −1.

inline std::vector<float> sample_cloud(const WorldState& s, int n, uint64_t seed,
                                       const WorldConfig& cfg) {
  std::vector<float> cloud(static_cast<size_t>(n) * 4, 0.0f);
  for (int r = 0; r < n; ++r) cloud[static_cast<size_t>(r) * 4 + 3] = -1.0f;

  struct Entity {
    double x, y, radius, z;
    int category;
  };
  std::vector<Entity> entities;
  for (const auto& [id, obj] : s.objects)
    if (obj.radius > 0.0)
      entities.push_back({obj.x, obj.y, obj.radius, cfg.object_z, obj.category});
  if (s.goal_radius > 0.0)
    entities.push_back({s.goal_x, s.goal_y, s.goal_radius, 0.0, kCatGoal});
  if (entities.empty()) return cloud;

  Rng rng(seed);
  double ct = std::cos(-s.base.theta), st = std::sin(-s.base.theta);
  int base_quota = n / static_cast<int>(entities.size());
  int extra = n % static_cast<int>(entities.size());
  int row = 0;
  for (size_t e = 0; e < entities.size(); ++e) {
    int quota = base_quota + (static_cast<int>(e) < extra ? 1 : 0);
    for (int q = 0; q < quota; ++q) {
      double rad = entities[e].radius * std::sqrt(rng.uniform());
      double ang = 2.0 * kPi * rng.uniform();
      double wx = entities[e].x + rad * std::cos(ang);
      double wy = entities[e].y + rad * std::sin(ang);
      double dx = wx - s.base.x, dy = wy - s.base.y;
      float* out = cloud.data() + static_cast<size_t>(row) * 4;
      out[0] = static_cast<float>(ct * dx - st * dy);
      out[1] = static_cast<float>(st * dx + ct * dy);
      out[2] = static_cast<float>(entities[e].z);
      out[3] = category_intensity(entities[e].category);
      ++row;
    }
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// observation

// State vector layout (all relative quantities in the base frame):
//   0 v_prev   1 ω_prev   2 j1   3 j2   4 gripper fraction
//   5-6 goal center       7-8 nearest-object center
//   9-10 end-effector position   11 end-effector heading   12 grasped flag
inline std::vector<double> state_vector(const WorldState& s,
                                        const WorldConfig& cfg) {
  std::vector<double> z(kStateDim, 0.0);
  z[0] = s.last_v;
  z[1] = s.last_w;
  z[2] = s.j1;
  z[3] = s.j2;
  z[4] = s.gripper;
  double ct = std::cos(-s.base.theta), st = std::sin(-s.base.theta);
  auto to_base = [&](double wx, double wy) {
    double dx = wx - s.base.x, dy = wy - s.base.y;
    return std::array<double, 2>{ct * dx - st * dy, st * dx + ct * dy};
  };
  auto g = to_base(s.goal_x, s.goal_y);
  z[5] = g[0];
  z[6] = g[1];
  double best = std::numeric_limits<double>::infinity();
  for (const auto& [id, obj] : s.objects) {
    double d = dist2d(s.base.x, s.base.y, obj.x, obj.y);
    if (d < best) {
      best = d;
      auto o = to_base(obj.x, obj.y);
      z[7] = o[0];
      z[8] = o[1];
    }
  }
  auto ee = end_effector(s, cfg);
  auto eb = to_base(ee[0], ee[1]);
  z[9] = eb[0];
  z[10] = eb[1];
  z[11] = wrap_angle(s.j1 + s.j2);
  z[12] = s.held_object >= 0 ? 1.0 : 0.0;
  return z;
}

inline Observation observe(const WorldState& s, const WorldConfig& cfg) {
  Observation obs;
  obs.views[0] = render_view(s, ViewId::exterior, cfg);
  obs.views[1] = render_view(s, ViewId::left_wrist, cfg);
  obs.views[2] = render_view(s, ViewId::right_wrist, cfg);
  obs.cloud = sample_cloud(
      s, cfg.cloud_points,
      mix_seed(s.seed, static_cast<uint64_t>(s.step_count)), cfg);
  obs.z = state_vector(s, cfg);
  obs.c = cfg.control_hz;
  for (double v : obs.z)
    if (!std::isfinite(v)) throw SimError("observe: non-finite state entry");
  return obs;
}

// ---------------------------------------------------------------------------
// reset
//
// Placement ranges (also documented in configs/world.cfg):
//   base position uniform in [−0.5, 0.5]², heading uniform;
//   navigate_pick / navigate_open / navigate_place object distances
//   uniform in [1.0, 3.0] m from the base; pick_place objects in
//   [0.6, 1.2] m and goal in [1.0, 2.0] m; objects pairwise ≥ 0.45 m apart;
//   goal radius 0.3 m; disc radius 0.12 m.

struct ResetResult {
  WorldState state;
  std::vector<int> instruction;  // vocabulary token ids
  std::string instruction_text;
};

namespace detail {

inline std::array<double, 2> place_around(Rng& rng, double bx, double by,
                                          double dmin, double dmax) {
  double d = rng.uniform(dmin, dmax);
  double a = rng.uniform(0.0, 2.0 * kPi);
  return {bx + d * std::cos(a), by + d * std::sin(a)};
}

inline std::array<double, 2> place_separated(
    Rng& rng, double bx, double by, double dmin, double dmax,
    const std::vector<std::array<double, 2>>& taken, double min_sep) {
  for (int tries = 0; tries < 200; ++tries) {
    auto p = place_around(rng, bx, by, dmin, dmax);
    bool ok = true;
    for (const auto& q : taken)
      if (dist2d(p[0], p[1], q[0], q[1]) < min_sep) ok = false;
    if (ok) return p;
  }
  throw SimError("reset: could not place objects with required separation");
}

}  // namespace detail

inline ResetResult reset(Task task, uint64_t seed, const WorldConfig& cfg) {
  Rng rng(mix_seed(fnv1a(task_name(task)), seed));
  ResetResult rr;
  WorldState& s = rr.state;
  s.task = task;
  s.seed = mix_seed(fnv1a(task_name(task)), seed);
  s.base.x = rng.uniform(-0.5, 0.5);
  s.base.y = rng.uniform(-0.5, 0.5);
  s.base.theta = wrap_angle(rng.uniform(-kPi, kPi));

  const double disc_r = 0.12;
  const double sep = 0.45;
  std::vector<int> colors{kCatRed, kCatBlue, kCatGreen};
  rng.shuffle(colors);
  std::vector<std::array<double, 2>> taken;
  auto add_obj = [&](int id, std::array<double, 2> p, int category) {
    s.objects[id] = Obj{p[0], p[1], disc_r, category};
    taken.push_back(p);
  };

  std::string text;
  switch (task) {
    case Task::navigate_pick: {
      add_obj(0, detail::place_separated(rng, s.base.x, s.base.y, 1.0, 3.0, taken, sep), colors[0]);
      add_obj(1, detail::place_separated(rng, s.base.x, s.base.y, 1.0, 3.0, taken, sep), colors[1]);
      add_obj(2, detail::place_separated(rng, s.base.x, s.base.y, 1.0, 3.0, taken, sep), colors[2]);
      s.target_id = 0;
      auto g = detail::place_around(rng, s.base.x, s.base.y, 1.0, 3.0);
      s.goal_x = g[0];
      s.goal_y = g[1];
      s.goal_radius = 0.3;
      const char* templates[] = {"go to the %s disc and pick it",
                                 "drive near the %s disc then grasp it"};
      char buf[80];
      std::snprintf(buf, sizeof(buf), templates[rng.randint(2)],
                    color_word(colors[0]).c_str());
      text = buf;
      break;
    }
    case Task::pick_place: {
      add_obj(0, detail::place_separated(rng, s.base.x, s.base.y, 0.6, 1.2, taken, sep), colors[0]);
      add_obj(1, detail::place_separated(rng, s.base.x, s.base.y, 0.6, 2.0, taken, sep), colors[1]);
      s.target_id = 0;
      auto g = detail::place_separated(rng, s.base.x, s.base.y, 1.0, 2.0, taken, 0.8);
      s.goal_x = g[0];
      s.goal_y = g[1];
      s.goal_radius = 0.3;
      const char* templates[] = {"place the %s disc into the goal",
                                 "put the %s disc in the goal"};
      char buf[80];
      std::snprintf(buf, sizeof(buf), templates[rng.randint(2)],
                    color_word(colors[0]).c_str());
      text = buf;
      break;
    }
    case Task::navigate_open: {
      add_obj(0, detail::place_separated(rng, s.base.x, s.base.y, 1.0, 3.0, taken, sep), kCatLatch);
      add_obj(1, detail::place_separated(rng, s.base.x, s.base.y, 1.0, 3.0, taken, sep), colors[0]);
      s.target_id = 0;
      // no goal region; the state-vector goal slot points at the latch
      s.goal_x = s.objects[0].x;
      s.goal_y = s.objects[0].y;
      s.goal_radius = 0.0;
      const char* templates[] = {"go to the latch and open it",
                                 "drive near the latch then open it"};
      text = templates[rng.randint(2)];
      break;
    }
    case Task::navigate_place: {
      // starts already holding the target at the end-effector
      auto ee = arm_fk(s.base, 0.0, 0.0, cfg.link1, cfg.link2);
      s.j1 = 0.0;
      s.j2 = 0.0;
      add_obj(0, {ee[0], ee[1]}, colors[0]);
      taken.clear();  // distractors only need separation from each other
      add_obj(1, detail::place_separated(rng, s.base.x, s.base.y, 1.0, 3.0, taken, sep), colors[1]);
      add_obj(2, detail::place_separated(rng, s.base.x, s.base.y, 1.0, 3.0, taken, sep), colors[2]);
      s.target_id = 0;
      s.held_object = 0;
      s.gripper = 1.0;
      auto g = detail::place_around(rng, s.base.x, s.base.y, 1.0, 3.0);
      s.goal_x = g[0];
      s.goal_y = g[1];
      s.goal_radius = 0.3;
      const char* templates[] = {"carry the %s disc to the goal",
                                 "put the %s disc down at the goal"};
      char buf[80];
      std::snprintf(buf, sizeof(buf), templates[rng.randint(2)],
                    color_word(colors[0]).c_str());
      text = buf;
      break;
    }
  }
  rr.instruction_text = text;
  rr.instruction = tokenize(text);
  return rr;
}

}  // namespace acdit
