// Closed-loop rollout evaluation, the four-configuration ablation runner,
// and fusion-weight trace inspection. A rollout observes, predicts a chunk,
// executes its first row (re-planning every step by default; a stride flag
// executes more rows per prediction), and stops at success or the step cap.
// Episode seeds start at kEvalSeedBase so they never overlap the demo seeds
// used for training data.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "acdit/expert.hpp"
#include "acdit/policy.hpp"
#include "acdit/training.hpp"
#include "acdit/world.hpp"

namespace acdit {

inline constexpr uint64_t kEvalSeedBase = 10000;

// ---------------------------------------------------------------------------
// episode rollout

struct EpisodeResult {
  Task task = Task::navigate_pick;
  uint64_t seed = 0;
  bool success = false;
  int steps = 0;                                // world steps executed
  std::vector<std::array<double, 4>> weights;   // fusion weights per step
  std::vector<std::array<double, 5>> actions;   // executed action per step
  std::vector<Phase> phases;                    // phase seen before each step
};

// Generic closed-loop harness. The policy functor sees the privileged state
// (so the scripted expert can share the loop) plus everything a trained
// model consumes: policy(state, history, instruction, c, noise_seed) ->
// Prediction. History is the last `history_len` observations oldest-first,
// clamped at the episode start like training windows.
template <typename PolicyFn>
EpisodeResult run_episode(PolicyFn&& policy, int history_len, Task task,
                          uint64_t seed, const WorldConfig& wc = {},
                          int stride = 1) {
  if (history_len < 1) throw ConfigError("run_episode: history_len must be >= 1");
  if (stride < 1) throw ConfigError("run_episode: stride must be >= 1");
  EpisodeResult ep;
  ep.task = task;
  ep.seed = seed;
  try {
    ResetResult rr = reset(task, seed, wc);
    WorldState s = rr.state;
    std::vector<Observation> seen;
    seen.reserve(static_cast<size_t>(wc.max_steps) + 1);
    Prediction pred;
    int chunk_pos = 0;
    bool have_chunk = false;
    while (ep.steps < wc.max_steps && !success(s, wc)) {
      seen.push_back(observe(s, wc));
      if (!have_chunk || chunk_pos >= stride || chunk_pos >= pred.chunk.k) {
        std::vector<const Observation*> hist(static_cast<size_t>(history_len));
        for (int j = 0; j < history_len; ++j) {
          int64_t idx = static_cast<int64_t>(seen.size()) - history_len + j;
          hist[static_cast<size_t>(j)] = &seen[static_cast<size_t>(std::max<int64_t>(0, idx))];
        }
        uint64_t noise_seed = mix_seed(seed, static_cast<uint64_t>(ep.steps));
        pred = policy(s, hist, rr.instruction, wc.control_hz, noise_seed);
        if (pred.chunk.k < 1)
          throw ShapeError("run_episode: policy produced an empty chunk");
        chunk_pos = 0;
        have_chunk = true;
      }
      const double* a = pred.chunk.row(chunk_pos);
      ep.phases.push_back(phase(s));
      ep.weights.push_back(pred.weights);
      ep.actions.push_back({a[0], a[1], a[2], a[3], a[4]});
      s = step(s, a, wc);
      ++ep.steps;
      ++chunk_pos;
    }
    ep.success = success(s, wc);
  } catch (const Error& e) {
    throw Error("rollout " + task_name(task) + " seed " +
                std::to_string(seed) + ": " + e.what());
  }
  return ep;
}

template <typename T>
EpisodeResult rollout_model(Model<T>& model, Task task, uint64_t seed,
                            const WorldConfig& wc = {}, int stride = 1) {
  auto policy = [&model](const WorldState&,
                         const std::vector<const Observation*>& hist,
                         const std::vector<int>& instruction, double c,
                         uint64_t noise_seed) {
    return model.predict_actions(hist, instruction, c, noise_seed);
  };
  return run_episode(policy, model.cfg.tau + 1, task, seed, wc, stride);
}

template <typename T = float>
EpisodeResult rollout(const std::string& checkpoint, Task task, uint64_t seed,
                      const WorldConfig& wc = {}, int stride = 1) {
  Model<T> model = Model<T>::load(checkpoint);
  return rollout_model(model, task, seed, wc, stride);
}

// Scripted-expert wrapper over the same harness (sanity baseline for the
// loop itself; the network is bypassed and weights default to uniform).
inline EpisodeResult rollout_expert(Task task, uint64_t seed,
                                    const WorldConfig& wc = {},
                                    int stride = 1) {
  auto policy = [&wc](const WorldState& s,
                      const std::vector<const Observation*>&,
                      const std::vector<int>&, double, uint64_t) {
    Prediction p;
    p.chunk = expert_action(s, wc);
    p.weights = {0.25, 0.25, 0.25, 0.25};
    return p;
  };
  return run_episode(policy, 1, task, seed, wc, stride);
}

// ---------------------------------------------------------------------------
// evaluation protocol: episodes x repeats per task, mean +/- std of rates

struct TaskEval {
  std::string task;
  double mean = 0.0;    // percent success, averaged over repeats
  double stddev = 0.0;  // population std of the per-repeat rates
  int episodes = 0;
  int repeats = 0;
};

struct EvalReport {
  std::vector<TaskEval> rows;
  int episodes = 0;
  int repeats = 0;
  uint64_t config_hash = 0;  // fnv1a over the checkpoint bytes

  std::string to_csv() const {
    std::string out = "task,mean,std,n\n";
    char buf[160];
    for (const TaskEval& r : rows) {
      std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%d\n", r.task.c_str(),
                    r.mean, r.stddev, r.episodes * r.repeats);
      out += buf;
    }
    return out;
  }
};

inline uint64_t hash_file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("hash_file_bytes: cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return fnv1a(ss.str());
}

// Repeat r uses episode seeds seed_base + r*episodes + e, so repeats cover
// disjoint initial states and the whole report is seed-determined.
template <typename T>
EvalReport evaluate_model(Model<T>& model, const std::vector<Task>& tasks,
                          int episodes = 50, int repeats = 3,
                          const WorldConfig& wc = {}, int stride = 1,
                          uint64_t seed_base = kEvalSeedBase) {
  if (tasks.empty()) throw ConfigError("evaluate: no tasks given");
  if (episodes < 1) throw ConfigError("evaluate: episodes must be >= 1");
  if (repeats < 1) throw ConfigError("evaluate: repeats must be >= 1");
  EvalReport rep;
  rep.episodes = episodes;
  rep.repeats = repeats;
  for (Task task : tasks) {
    std::vector<double> rates;
    rates.reserve(static_cast<size_t>(repeats));
    for (int r = 0; r < repeats; ++r) {
      int hits = 0;
      for (int e = 0; e < episodes; ++e) {
        uint64_t seed = seed_base +
                        static_cast<uint64_t>(r) * static_cast<uint64_t>(episodes) +
                        static_cast<uint64_t>(e);
        hits += rollout_model(model, task, seed, wc, stride).success ? 1 : 0;
      }
      rates.push_back(100.0 * hits / episodes);
    }
    double mean = 0.0;
    for (double v : rates) mean += v;
    mean /= repeats;
    double var = 0.0;
    for (double v : rates) var += (v - mean) * (v - mean);
    var /= repeats;
    rep.rows.push_back({task_name(task), mean, std::sqrt(var), episodes, repeats});
  }
  return rep;
}

template <typename T = float>
EvalReport evaluate(const std::string& checkpoint, const std::vector<Task>& tasks,
                    int episodes = 50, int repeats = 3,
                    const WorldConfig& wc = {}, int stride = 1,
                    uint64_t seed_base = kEvalSeedBase) {
  Model<T> model = Model<T>::load(checkpoint);
  EvalReport rep = evaluate_model(model, tasks, episodes, repeats, wc, stride, seed_base);
  rep.config_hash = hash_file_bytes(checkpoint);
  return rep;
}

// ---------------------------------------------------------------------------
// ablation runner: Exp1 images only -> Exp2 +cloud -> Exp3 +mobility
// conditioning -> Exp4 +perception-aware fusion, each trained from scratch
// over several seeds and evaluated on one task; gains are over Exp1.

struct AblateConfig {
  TrainConfig base;      // dataset, optimizer, and model dimensions
  int stage1_steps = 200;
  int stage2_steps = 1000;
  int episodes = 30;
  int repeats = 1;
  int seeds = 3;
  Task task = Task::navigate_pick;
  std::string out;       // CSV path; checkpoints land beside it
};

struct AblateRow {
  std::string exp;
  int use_2d = 1;
  int use_3d = 0;
  int pma = 0;
  int mbc = 0;
  double mean = 0.0;  // percent success over seeds
  double gain = 0.0;  // mean - mean(Exp1)
};

inline AblateConfig parse_ablate_config(std::istream& is) {
  AblateConfig ac;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value");
    std::string key = detail::trim(line.substr(0, eq));
    std::string val = detail::trim(line.substr(eq + 1));
    try {
      if (key == "stage1_steps") ac.stage1_steps = detail::parse_int(val, key);
      else if (key == "stage2_steps") ac.stage2_steps = detail::parse_int(val, key);
      else if (key == "episodes") ac.episodes = detail::parse_int(val, key);
      else if (key == "repeats") ac.repeats = detail::parse_int(val, key);
      else if (key == "seeds") ac.seeds = detail::parse_int(val, key);
      else if (key == "task") ac.task = task_from_name(val);
      else if (key == "stage" || key == "steps" || key == "out" ||
               key == "stage1_checkpoint" || key == "conditioning" ||
               key == "use_pma" || key == "use_cloud")
        throw ConfigError("config: key '" + key +
                          "' is controlled by the ablation runner");
      else apply_config_key(ac.base, key, val);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (ac.stage1_steps < 1 || ac.stage2_steps < 1)
    throw ConfigError("ablate config: step counts must be >= 1");
  if (ac.episodes < 1 || ac.repeats < 1 || ac.seeds < 1)
    throw ConfigError("ablate config: episodes, repeats, seeds must be >= 1");
  if (ac.base.dataset.empty())
    throw ConfigError("ablate config: dataset is required");
  return ac;
}

inline AblateConfig load_ablate_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config: " + path);
  return parse_ablate_config(is);
}

inline std::string ablate_csv(const std::vector<AblateRow>& rows) {
  std::string out = "exp,2d,3d,pma,mbc,mean,gain\n";
  char buf[160];
  for (const AblateRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%d,%.17g,%.17g\n",
                  r.exp.c_str(), r.use_2d, r.use_3d, r.pma, r.mbc, r.mean,
                  r.gain);
    out += buf;
  }
  return out;
}

template <typename T = float>
std::vector<AblateRow> ablate(const AblateConfig& ac) {
  struct ExpSpec {
    const char* name;
    bool cloud, mbc, pma;
  };
  const ExpSpec specs[4] = {{"Exp1", false, false, false},
                            {"Exp2", true, false, false},
                            {"Exp3", true, true, false},
                            {"Exp4", true, true, true}};
  const std::string prefix = ac.out.empty() ? std::string("ablate") : ac.out;
  std::vector<AblateRow> rows;
  for (const ExpSpec& spec : specs) {
    double acc = 0.0;
    for (int s = 0; s < ac.seeds; ++s) {
      TrainConfig tc = ac.base;
      tc.seed = static_cast<uint64_t>(s);
      tc.model.init_seed = static_cast<uint64_t>(s);
      tc.model.use_cloud = spec.cloud;
      tc.model.use_pma = spec.pma;
      tc.model.conditioning = spec.mbc ? Conditioning::mobility : Conditioning::none;
      const std::string tag = prefix + "." + spec.name + ".s" + std::to_string(s);
      if (spec.mbc) {
        TrainConfig s1 = tc;
        s1.stage = 1;
        s1.steps = ac.stage1_steps;
        s1.out = tag + ".stage1.ckpt";
        train<T>(s1);
        tc.stage1_checkpoint = s1.out;
      }
      tc.stage = 2;
      tc.steps = ac.stage2_steps;
      tc.out = tag + ".ckpt";
      train<T>(tc);
      Model<T> model = Model<T>::load(tc.out);
      EvalReport rep = evaluate_model(model, {ac.task}, ac.episodes, ac.repeats);
      acc += rep.rows[0].mean;
    }
    AblateRow row;
    row.exp = spec.name;
    row.use_3d = spec.cloud ? 1 : 0;
    row.pma = spec.pma ? 1 : 0;
    row.mbc = spec.mbc ? 1 : 0;
    row.mean = acc / ac.seeds;
    rows.push_back(row);
  }
  for (AblateRow& r : rows) r.gain = r.mean - rows[0].mean;
  return rows;
}

// ---------------------------------------------------------------------------
// weight-trace inspection: one rollout exported as CSV plus a reported (not
// asserted) comparison of wrist+cloud weight between phases.

struct WeightInspection {
  EpisodeResult episode;
  double manip_mean = 0.0;  // mean wr+wp over manipulate-phase steps
  double drive_mean = 0.0;  // mean wr+wp over drive-phase steps
  int manip_steps = 0;
  int drive_steps = 0;
  std::string summary;
};

template <typename T>
WeightInspection inspect_weights_model(Model<T>& model, Task task,
                                       uint64_t seed, const std::string& out,
                                       const WorldConfig& wc = {},
                                       int stride = 1) {
  WeightInspection wi;
  wi.episode = rollout_model(model, task, seed, wc, stride);
  std::ofstream os(out);
  if (!os) throw FormatError("inspect_weights: cannot write " + out);
  os << "step,wf,wl,wr,wp,phase\n";
  char buf[256];
  double manip_sum = 0.0, drive_sum = 0.0;
  for (int i = 0; i < wi.episode.steps; ++i) {
    const std::array<double, 4>& w = wi.episode.weights[static_cast<size_t>(i)];
    Phase ph = wi.episode.phases[static_cast<size_t>(i)];
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%s\n", i, w[0],
                  w[1], w[2], w[3], phase_name(ph));
    os << buf;
    double wrist_cloud = w[2] + w[3];
    if (ph == Phase::manipulate) {
      manip_sum += wrist_cloud;
      ++wi.manip_steps;
    } else if (ph == Phase::drive) {
      drive_sum += wrist_cloud;
      ++wi.drive_steps;
    }
  }
  if (!os) throw FormatError("inspect_weights: write failed for " + out);
  wi.manip_mean = wi.manip_steps > 0 ? manip_sum / wi.manip_steps : 0.0;
  wi.drive_mean = wi.drive_steps > 0 ? drive_sum / wi.drive_steps : 0.0;
  std::snprintf(buf, sizeof buf,
                "wrist+cloud weight: manipulate %.4f over %d steps vs drive "
                "%.4f over %d steps (%s, %d steps)",
                wi.manip_mean, wi.manip_steps, wi.drive_mean, wi.drive_steps,
                wi.episode.success ? "success" : "no success",
                wi.episode.steps);
  wi.summary = buf;
  return wi;
}

template <typename T = float>
WeightInspection inspect_weights(const std::string& checkpoint, Task task,
                                 uint64_t seed, const std::string& out,
                                 const WorldConfig& wc = {}, int stride = 1) {
  Model<T> model = Model<T>::load(checkpoint);
  return inspect_weights_model(model, task, seed, out, wc, stride);
}

// ---------------------------------------------------------------------------
// demo collection (CLI surface for building datasets)

inline Dataset collect_demos(Task task, int episodes, uint64_t seed0,
                             const WorldConfig& wc = {}) {
  if (episodes < 1) throw ConfigError("collect: episodes must be >= 1");
  Dataset ds;
  ds.trajs.reserve(static_cast<size_t>(episodes));
  for (int e = 0; e < episodes; ++e)
    ds.trajs.push_back(record_episode(task, seed0 + static_cast<uint64_t>(e), wc));
  return ds;
}

}  // namespace acdit
