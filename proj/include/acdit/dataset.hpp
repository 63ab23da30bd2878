#pragma once

// Demonstration recording, the on-disk dataset format, normalization
// statistics, and sliding-window sampling.
//
// Dataset file layout (magic "ACDS", little-endian; see docs/formats.md):
//   magic[4] | version u32 | trajectory_count u64
//   per trajectory:
//     task name (u32 len + bytes) | seed u64 | T u32
//     image_size u32 | cloud_points u32 | state_dim u32 | action_dim u32
//     instruction (u32 count + u8 ids) | control_hz f64
//     per step: views u8[3][3·n·n] (×8 fixed-point codes of the semantic
//       grids, exterior/left/right, channel-major), cloud f32[N·4],
//       state f64[state_dim], executed action f64[action_dim]

#include <array>
#include <fstream>
#include <string>
#include <vector>

#include "acdit/binio.hpp"
#include "acdit/expert.hpp"
#include "acdit/world.hpp"

namespace acdit {

constexpr uint32_t kDatasetVersion = 1;

struct Trajectory {
  Task task = Task::navigate_pick;
  uint64_t seed = 0;
  double c = 0.0;
  std::vector<int> instruction;
  std::vector<Observation> obs;                   // length T
  std::vector<std::array<double, 5>> actions;     // length T, executed actions
  int length() const { return static_cast<int>(obs.size()); }
};

struct Dataset {
  std::vector<Trajectory> trajs;
};

// ---------------------------------------------------------------------------
// recording

// Rolls out the scripted expert and keeps only successful episodes; failures
// re-seed deterministically. The stored action per step is what was actually
// executed: clamped base velocities, realized joint deltas, clamped gripper.
inline Trajectory record_episode(Task task, uint64_t seed, const WorldConfig& cfg) {
  for (uint64_t attempt = 0; attempt < 10; ++attempt) {
    uint64_t ep_seed = attempt == 0 ? seed : mix_seed(seed, attempt);
    auto rr = reset(task, ep_seed, cfg);
    Trajectory traj;
    traj.task = task;
    traj.seed = ep_seed;
    traj.c = cfg.control_hz;
    traj.instruction = rr.instruction;
    WorldState s = rr.state;
    bool ok = false;
    while (s.step_count < cfg.max_steps) {
      if (success(s, cfg)) {
        ok = true;
        break;
      }
      Observation o = observe(s, cfg);
      ActionChunk chunk = expert_action(s, cfg);
      WorldState next = step(s, chunk.row(0), cfg);
      traj.obs.push_back(std::move(o));
      traj.actions.push_back({next.last_v, next.last_w, next.j1 - s.j1,
                              next.j2 - s.j2, next.gripper});
      s = next;
    }
    if (!ok) ok = success(s, cfg);
    if (ok) return traj;
  }
  throw SimError("record_episode: expert failed 10 consecutive attempts on " +
                 task_name(task) + " seed " + std::to_string(seed));
}

// ---------------------------------------------------------------------------
// file I/O

namespace detail {

inline uint8_t view_code(float v) {
  float code = v * 8.0f;
  if (code < 0.0f || code > 8.0f || code != std::floor(code))
    throw FormatError("dataset: view value is not an eighth-code");
  return static_cast<uint8_t>(code);
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("dataset: cannot open for write: " + path);
  detail::write_bytes(os, "ACDS", 4);
  detail::write_le<uint32_t>(os, kDatasetVersion);
  detail::write_le<uint64_t>(os, ds.trajs.size());
  for (const auto& traj : ds.trajs) {
    detail::write_str(os, task_name(traj.task));
    detail::write_le<uint64_t>(os, traj.seed);
    detail::write_le<uint32_t>(os, static_cast<uint32_t>(traj.length()));
    uint32_t n = traj.obs.empty()
                     ? 0
                     : static_cast<uint32_t>(std::sqrt(traj.obs[0].views[0].size() / 3.0));
    uint32_t ncloud =
        traj.obs.empty() ? 0 : static_cast<uint32_t>(traj.obs[0].cloud.size() / 4);
    detail::write_le<uint32_t>(os, n);
    detail::write_le<uint32_t>(os, ncloud);
    detail::write_le<uint32_t>(os, kStateDim);
    detail::write_le<uint32_t>(os, kActionDim);
    detail::write_le<uint32_t>(os, static_cast<uint32_t>(traj.instruction.size()));
    for (int id : traj.instruction)
      detail::write_le<uint8_t>(os, static_cast<uint8_t>(id));
    detail::write_f64(os, traj.c);
    for (int t = 0; t < traj.length(); ++t) {
      const Observation& o = traj.obs[static_cast<size_t>(t)];
      for (const auto& view : o.views) {
        std::vector<uint8_t> codes(view.size());
        for (size_t i = 0; i < view.size(); ++i) codes[i] = detail::view_code(view[i]);
        detail::write_bytes(os, codes.data(), codes.size());
      }
      for (float v : o.cloud) detail::write_f32(os, v);
      for (double v : o.z) detail::write_f64(os, v);
      for (double v : traj.actions[static_cast<size_t>(t)]) detail::write_f64(os, v);
    }
  }
  os.flush();
  if (!os) throw FormatError("dataset: write failed: " + path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("dataset: cannot open: " + path);
  char magic[4];
  detail::read_bytes(is, magic, 4);
  if (std::string(magic, 4) != "ACDS")
    throw FormatError("dataset: bad magic bytes");
  uint32_t version = detail::read_le<uint32_t>(is);
  if (version != kDatasetVersion)
    throw VersionError("dataset: unsupported format version " +
                       std::to_string(version));
  uint64_t count = detail::read_le<uint64_t>(is);
  Dataset ds;
  ds.trajs.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    Trajectory traj;
    traj.task = task_from_name(detail::read_str(is));
    traj.seed = detail::read_le<uint64_t>(is);
    uint32_t T = detail::read_le<uint32_t>(is);
    uint32_t n = detail::read_le<uint32_t>(is);
    uint32_t ncloud = detail::read_le<uint32_t>(is);
    uint32_t state_dim = detail::read_le<uint32_t>(is);
    uint32_t action_dim = detail::read_le<uint32_t>(is);
    if (state_dim != kStateDim || action_dim != kActionDim)
      throw FormatError("dataset: unexpected state/action dims");
    uint32_t ilen = detail::read_le<uint32_t>(is);
    traj.instruction.resize(ilen);
    for (uint32_t k = 0; k < ilen; ++k)
      traj.instruction[k] = detail::read_le<uint8_t>(is);
    traj.c = detail::read_f64(is);
    traj.obs.resize(T);
    traj.actions.resize(T);
    size_t view_elems = static_cast<size_t>(3) * n * n;
    for (uint32_t t = 0; t < T; ++t) {
      Observation& o = traj.obs[t];
      for (auto& view : o.views) {
        std::vector<uint8_t> codes(view_elems);
        detail::read_bytes(is, codes.data(), codes.size());
        view.resize(view_elems);
        for (size_t k = 0; k < view_elems; ++k)
          view[k] = static_cast<float>(codes[k]) / 8.0f;
      }
      o.cloud.resize(static_cast<size_t>(ncloud) * 4);
      for (auto& v : o.cloud) v = detail::read_f32(is);
      o.z.resize(kStateDim);
      for (auto& v : o.z) v = detail::read_f64(is);
      o.c = traj.c;
      for (auto& v : traj.actions[t]) v = detail::read_f64(is);
    }
    ds.trajs.push_back(std::move(traj));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// normalization

struct NormStats {
  std::vector<double> state_mean, state_std;    // kStateDim each
  std::vector<double> action_mean, action_std;  // kActionDim each
};

// Per-dimension z-scoring statistics over every recorded step; standard
// deviations floored at 1e-6 so constant dimensions normalize to zero.
inline NormStats compute_norm_stats(const Dataset& ds) {
  int64_t steps = 0;
  for (const auto& traj : ds.trajs) steps += traj.length();
  if (steps == 0) throw ConfigError("compute_norm_stats: empty dataset");
  NormStats st;
  st.state_mean.assign(kStateDim, 0.0);
  st.state_std.assign(kStateDim, 0.0);
  st.action_mean.assign(kActionDim, 0.0);
  st.action_std.assign(kActionDim, 0.0);
  for (const auto& traj : ds.trajs)
    for (int t = 0; t < traj.length(); ++t) {
      for (int d = 0; d < kStateDim; ++d)
        st.state_mean[static_cast<size_t>(d)] += traj.obs[static_cast<size_t>(t)].z[static_cast<size_t>(d)];
      for (int d = 0; d < kActionDim; ++d)
        st.action_mean[static_cast<size_t>(d)] += traj.actions[static_cast<size_t>(t)][static_cast<size_t>(d)];
    }
  for (auto& m : st.state_mean) m /= static_cast<double>(steps);
  for (auto& m : st.action_mean) m /= static_cast<double>(steps);
  for (const auto& traj : ds.trajs)
    for (int t = 0; t < traj.length(); ++t) {
      for (int d = 0; d < kStateDim; ++d) {
        double dev = traj.obs[static_cast<size_t>(t)].z[static_cast<size_t>(d)] -
                     st.state_mean[static_cast<size_t>(d)];
        st.state_std[static_cast<size_t>(d)] += dev * dev;
      }
      for (int d = 0; d < kActionDim; ++d) {
        double dev = traj.actions[static_cast<size_t>(t)][static_cast<size_t>(d)] -
                     st.action_mean[static_cast<size_t>(d)];
        st.action_std[static_cast<size_t>(d)] += dev * dev;
      }
    }
  for (auto& s : st.state_std)
    s = std::max(std::sqrt(s / static_cast<double>(steps)), 1e-6);
  for (auto& s : st.action_std)
    s = std::max(std::sqrt(s / static_cast<double>(steps)), 1e-6);
  return st;
}

inline void normalize_inplace(double* x, const std::vector<double>& mean,
                              const std::vector<double>& std) {
  for (size_t d = 0; d < mean.size(); ++d) x[d] = (x[d] - mean[d]) / std[d];
}

inline void denormalize_inplace(double* x, const std::vector<double>& mean,
                                const std::vector<double>& std) {
  for (size_t d = 0; d < mean.size(); ++d) x[d] = x[d] * std[d] + mean[d];
}

// ---------------------------------------------------------------------------
// sliding-window sampling

struct WindowSample {
  std::vector<const Observation*> history;  // τ+1 entries, oldest first
  std::vector<double> chunk;                // k×5 executed actions (raw units)
  const std::vector<int>* instruction = nullptr;
  double c = 0.0;
};

// Valid positions are 0 ≤ t ≤ T−k: the window at t targets executed actions
// t … t+k−1, so the last start still has a full chunk; later windows would
// need action padding and are dropped.
inline WindowSample window_sample(const Trajectory& traj, int t, int tau, int k) {
  int T = traj.length();
  if (t < 0 || t > T - k)
    throw LookupError("window_sample: t out of range: " + std::to_string(t) +
                      " with T=" + std::to_string(T) + " k=" + std::to_string(k));
  WindowSample ws;
  ws.history.reserve(static_cast<size_t>(tau) + 1);
  for (int h = t - tau; h <= t; ++h)
    ws.history.push_back(&traj.obs[static_cast<size_t>(std::max(h, 0))]);
  ws.chunk.resize(static_cast<size_t>(k) * kActionDim);
  for (int r = 0; r < k; ++r)
    for (int d = 0; d < kActionDim; ++d)
      ws.chunk[static_cast<size_t>(r) * kActionDim + d] =
          traj.actions[static_cast<size_t>(t + r)][static_cast<size_t>(d)];
  ws.instruction = &traj.instruction;
  ws.c = traj.c;
  return ws;
}

// every valid (trajectory, t) pair, in sequential order
inline std::vector<std::pair<int, int>> all_windows(const Dataset& ds, int k) {
  std::vector<std::pair<int, int>> out;
  for (size_t i = 0; i < ds.trajs.size(); ++i) {
    int T = ds.trajs[i].length();
    for (int t = 0; t + k <= T; ++t) out.push_back({static_cast<int>(i), t});
  }
  return out;
}

}  // namespace acdit
