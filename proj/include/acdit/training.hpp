// Two-stage imitation training. Stage 1 pretrains the mobility head on
// base-action denoising with everything frozen except that head and the
// cloud adapter; stage 2 trains the full model on whole-body chunks,
// conditioning the manipulation head on the pretrained mobility latent.
// Also here: the flat key=value config format, stage freeze masks, a
// decoupled-weight-decay Adam optimizer with cosine learning rate and
// global-norm clipping, and the training loop with its metrics log.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "acdit/dataset.hpp"
#include "acdit/policy.hpp"

namespace acdit {

// ---------------------------------------------------------------------------
// TrainConfig and the flat key=value config file

struct TrainConfig {
  int stage = 1;
  int steps = -1;  // -1 resolves to the stage default below
  int batch_size = 32;
  double lr = 3e-4;
  double lr_min = 3e-5;  // cosine decay floor
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  uint64_t seed = 0;
  int log_every = 10;        // metrics cadence (first 10 steps always logged)
  int checkpoint_every = 0;  // 0 → only the final checkpoint
  int overfit_window = -1;   // ≥ 0 → train on window t of trajectory 0 only
  std::string dataset;
  std::string out;
  std::string stage1_checkpoint;  // required for stage 2 unless conditioning none
  ModelConfig model;

  // Stage-2 default chosen from pilot runs; stage 1 runs 20% of it.
  static constexpr int kDefaultStage2Steps = 3000;
  static constexpr double kStage1Fraction = 0.2;

  int resolved_steps() const {
    if (steps > 0) return steps;
    int s2 = kDefaultStage2Steps;
    return stage == 1 ? static_cast<int>(s2 * kStage1Fraction) : s2;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: bad boolean for '" + key + "': " + v);
}

inline int parse_int(const std::string& v, const std::string& key) {
  size_t pos = 0;
  int x = 0;
  try {
    x = std::stoi(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer for '" + key + "': " + v);
  }
  if (pos != v.size())
    throw ConfigError("config: bad integer for '" + key + "': " + v);
  return x;
}

inline double parse_double(const std::string& v, const std::string& key) {
  size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config: bad number for '" + key + "': " + v);
  }
  if (pos != v.size())
    throw ConfigError("config: bad number for '" + key + "': " + v);
  return x;
}

inline uint64_t parse_u64(const std::string& v, const std::string& key) {
  size_t pos = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config: bad seed for '" + key + "': " + v);
  }
  if (pos != v.size())
    throw ConfigError("config: bad seed for '" + key + "': " + v);
  return static_cast<uint64_t>(x);
}

}  // namespace detail

// Applies one key=value pair; unknown keys are an error by contract.
inline void apply_config_key(TrainConfig& tc, const std::string& key,
                             const std::string& val) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_int;
  using detail::parse_u64;
  ModelConfig& m = tc.model;
  if (key == "stage") tc.stage = parse_int(val, key);
  else if (key == "steps") tc.steps = parse_int(val, key);
  else if (key == "batch_size") tc.batch_size = parse_int(val, key);
  else if (key == "lr") tc.lr = parse_double(val, key);
  else if (key == "lr_min") tc.lr_min = parse_double(val, key);
  else if (key == "weight_decay") tc.weight_decay = parse_double(val, key);
  else if (key == "beta1") tc.beta1 = parse_double(val, key);
  else if (key == "beta2") tc.beta2 = parse_double(val, key);
  else if (key == "adam_eps") tc.adam_eps = parse_double(val, key);
  else if (key == "clip_norm") tc.clip_norm = parse_double(val, key);
  else if (key == "seed") tc.seed = parse_u64(val, key);
  else if (key == "log_every") tc.log_every = parse_int(val, key);
  else if (key == "checkpoint_every") tc.checkpoint_every = parse_int(val, key);
  else if (key == "overfit_window") tc.overfit_window = parse_int(val, key);
  else if (key == "dataset") tc.dataset = val;
  else if (key == "out") tc.out = val;
  else if (key == "stage1_checkpoint") tc.stage1_checkpoint = val;
  else if (key == "d") m.d = parse_int(val, key);
  else if (key == "d_s") m.d_s = parse_int(val, key);
  else if (key == "heads") m.heads = parse_int(val, key);
  else if (key == "trunk_blocks") m.trunk_blocks = parse_int(val, key);
  else if (key == "text_blocks") m.text_blocks = parse_int(val, key);
  else if (key == "mob_blocks") m.mob_blocks = parse_int(val, key);
  else if (key == "manip_blocks") m.manip_blocks = parse_int(val, key);
  else if (key == "image_size") m.image_size = parse_int(val, key);
  else if (key == "patch") m.patch = parse_int(val, key);
  else if (key == "cloud_points") m.cloud_points = parse_int(val, key);
  else if (key == "cloud_groups") m.cloud_groups = parse_int(val, key);
  else if (key == "text_len") m.text_len = parse_int(val, key);
  else if (key == "vocab") m.vocab = parse_int(val, key);
  else if (key == "chunk") m.chunk = parse_int(val, key);
  else if (key == "tau") m.tau = parse_int(val, key);
  else if (key == "K") m.K = parse_int(val, key);
  else if (key == "sample_steps") m.sample_steps = parse_int(val, key);
  else if (key == "plane_cells") m.plane_cells = parse_int(val, key);
  else if (key == "inject") m.inject = inject_mode_from_name(val);
  else if (key == "conditioning") m.conditioning = conditioning_from_name(val);
  else if (key == "use_pma") m.use_pma = parse_bool(val, key);
  else if (key == "use_cloud") m.use_cloud = parse_bool(val, key);
  else if (key == "raw_weights") m.raw_weights = parse_bool(val, key);
  else if (key == "freeze_trunk") m.freeze_trunk = parse_bool(val, key);
  else if (key == "freeze_mobility") m.freeze_mobility = parse_bool(val, key);
  else if (key == "temperature") m.temperature = parse_double(val, key);
  else if (key == "init_seed") m.init_seed = parse_u64(val, key);
  else throw ConfigError("config: unknown key '" + key + "'");
}

inline void validate_train_config(const TrainConfig& tc) {
  if (tc.stage != 1 && tc.stage != 2)
    throw ConfigError("config: stage must be 1 or 2");
  if (tc.resolved_steps() <= 0) throw ConfigError("config: steps must be > 0");
  if (tc.batch_size <= 0) throw ConfigError("config: batch_size must be > 0");
  if (tc.lr <= 0 || tc.lr_min < 0 || tc.lr_min > tc.lr)
    throw ConfigError("config: need lr > 0 and 0 <= lr_min <= lr");
  if (tc.weight_decay < 0) throw ConfigError("config: weight_decay < 0");
  if (tc.clip_norm <= 0) throw ConfigError("config: clip_norm must be > 0");
  if (tc.log_every <= 0) throw ConfigError("config: log_every must be > 0");
  if (tc.checkpoint_every < 0)
    throw ConfigError("config: checkpoint_every must be >= 0");
}

inline TrainConfig parse_train_config(std::istream& is) {
  TrainConfig tc;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value");
    std::string key = detail::trim(line.substr(0, eq));
    std::string val = detail::trim(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": empty key or value");
    apply_config_key(tc, key, val);
  }
  validate_train_config(tc);
  return tc;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  return parse_train_config(is);
}

// ---------------------------------------------------------------------------
// Stage freeze masks

struct FreezeMask {
  std::vector<std::string> trainable, frozen;
};

inline bool is_bookkeeping_param(const std::string& name) {
  return name.rfind("meta.", 0) == 0 || name.rfind("norm.", 0) == 0;
}

// Stage 1: only the mobility head and the cloud adapter learn. Stage 2:
// everything learns, except trunks/mobility re-frozen by config flags.
// meta./norm. bookkeeping tensors are never trainable.
template <typename T>
FreezeMask apply_stage_freeze(ParamStore<T>& ps, const ModelConfig& cfg,
                              int stage) {
  if (stage != 1 && stage != 2)
    throw ConfigError("apply_stage_freeze: stage must be 1 or 2");
  if (stage == 1 && cfg.conditioning == Conditioning::none)
    throw ConfigError(
        "stage 1 trains the mobility head, but conditioning is 'none'");
  FreezeMask mask;
  for (const auto& name : ps.names()) {
    bool train = false;
    if (is_bookkeeping_param(name)) {
      train = false;
    } else if (stage == 1) {
      train = name.rfind("head.mob.", 0) == 0 ||
              name.rfind("enc.adapter.", 0) == 0;
    } else {
      train = true;
      if (cfg.freeze_trunk && name.rfind("enc.img.trunk.", 0) == 0)
        train = false;
      if (cfg.freeze_mobility && name.rfind("head.mob.", 0) == 0) train = false;
    }
    ps.set_trainable(name, train);
    (train ? mask.trainable : mask.frozen).push_back(name);
  }
  if (mask.trainable.empty())
    throw ConfigError("apply_stage_freeze: nothing left trainable");
  return mask;
}

// ---------------------------------------------------------------------------
// Optimizer: Adam with decoupled weight decay

template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T>& ps, double lr_weight_decay, double beta1, double beta2,
        double eps)
      : ps_(ps), wd_(lr_weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& name : ps.names())
      if (ps.trainable(name)) {
        names_.push_back(name);
        size_t n = static_cast<size_t>(ps.at(name).numel());
        m_[name].assign(n, 0.0);
        v_[name].assign(n, 0.0);
      }
  }

  // Scales every trainable gradient so their joint 2-norm is at most
  // max_norm; returns the pre-clip norm.
  double clip_global_norm(double max_norm) {
    double sq = 0.0;
    for (const auto& name : names_) {
      Node<T>* node = ps_.at(name).node();
      node->ensure_grad();
      for (size_t i = 0; i < node->grad.size(); ++i) {
        double g = static_cast<double>(node->grad[i]);
        sq += g * g;
      }
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
      T s = static_cast<T>(max_norm / norm);
      for (const auto& name : names_) {
        Node<T>* node = ps_.at(name).node();
        for (size_t i = 0; i < node->grad.size(); ++i) node->grad[i] *= s;
      }
    }
    return norm;
  }

  void step(double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (const auto& name : names_) {
      Var<T>& p = ps_.at(name);
      Node<T>* node = p.node();
      node->ensure_grad();  // untouched parameters update with g = 0
      auto& m = m_[name];
      auto& v = v_[name];
      T* w = p.data();
      const T* g = node->grad.data();
      for (size_t i = 0; i < m.size(); ++i) {
        double gi = static_cast<double>(g[i]);
        m[i] = b1_ * m[i] + (1.0 - b1_) * gi;
        v[i] = b2_ * v[i] + (1.0 - b2_) * gi * gi;
        double mh = m[i] / bc1;
        double vh = v[i] / bc2;
        double wi = static_cast<double>(w[i]);
        w[i] = static_cast<T>(wi - lr * (mh / (std::sqrt(vh) + eps_) +
                                         wd_ * wi));
      }
    }
  }

  int64_t step_count() const { return t_; }
  const std::vector<std::string>& names() const { return names_; }

 private:
  ParamStore<T>& ps_;
  double wd_, b1_, b2_, eps_;
  int64_t t_ = 0;
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::vector<double>> m_, v_;
};

// lr(0) = lr, lr(total-1) = lr_min, half-cosine in between.
inline double cosine_lr(int step, int total_steps, double lr, double lr_min) {
  if (total_steps <= 1) return lr;
  double f = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return lr_min + 0.5 * (lr - lr_min) * (1.0 + std::cos(std::numbers::pi * f));
}

// ---------------------------------------------------------------------------
// Batch assembly

// One ready-to-run training batch: encoder inputs plus the normalized action
// chunk targets, row-major (B·T_a) x action_dim.
struct TrainBatch {
  std::vector<WindowSample> samples;
  std::vector<PolicyInput> inputs;
  std::vector<double> targets;
};

inline TrainBatch make_train_batch(const Dataset& ds, const NormStats& norm,
                                   const ModelConfig& cfg,
                                   const std::vector<std::pair<int, int>>& ws) {
  TrainBatch b;
  b.samples.reserve(ws.size());
  b.inputs.reserve(ws.size());
  b.targets.reserve(ws.size() * static_cast<size_t>(cfg.chunk) * kActionDim);
  for (auto [ti, t] : ws) {
    b.samples.push_back(
        window_sample(ds.trajs[static_cast<size_t>(ti)], t, cfg.tau, cfg.chunk));
    const WindowSample& s = b.samples.back();
    b.inputs.push_back(PolicyInput{s.history, s.instruction, s.c});
  }
  for (const auto& s : b.samples)
    for (int r = 0; r < cfg.chunk; ++r)
      for (int d = 0; d < kActionDim; ++d) {
        double raw = s.chunk[static_cast<size_t>(r) * kActionDim + d];
        b.targets.push_back(
            (raw - norm.action_mean[static_cast<size_t>(d)]) /
            norm.action_std[static_cast<size_t>(d)]);
      }
  return b;
}

// Normalized-action columns the mobility head supervises.
inline std::vector<int> conditioning_columns(const ModelConfig& cfg) {
  switch (cfg.conditioning) {
    case Conditioning::mobility:
      return {0, 1};  // (v, omega)
    case Conditioning::upper_body:
      return {2, 3, 4};  // arm joints + gripper
    default:
      throw ConfigError("conditioning_columns: direction is 'none'");
  }
}

// ---------------------------------------------------------------------------
// Losses

namespace detail {

// Builds a_t = q_sample(a0, eps, t_b) per sample as a constant leaf; the
// denoising target is eps itself, so gradients never flow through a_t.
template <typename T>
Var<T> noised_leaf(const DiffusionSchedule& sched, const Var<T>& a0,
                   const Var<T>& eps, const std::vector<int64_t>& ts,
                   int64_t Ta) {
  Var<T> a_t = Var<T>::leaf(a0.rows(), a0.cols());
  int64_t per = Ta * a0.cols();
  for (size_t b = 0; b < ts.size(); ++b)
    q_sample(sched, static_cast<int>(ts[b]),
             a0.data() + static_cast<int64_t>(b) * per,
             eps.data() + static_cast<int64_t>(b) * per,
             a_t.data() + static_cast<int64_t>(b) * per, per);
  return a_t;
}

}  // namespace detail

// Denoising MSE of the mobility head over the conditioned action columns.
// `targets` is the full normalized chunk, (B·T_a) x kActionDim row-major;
// ts holds one timestep per sample; eps is the injected noise leaf,
// (B·T_a) x mob_dim.
template <typename T>
Var<T> stage1_loss(Model<T>& model, const std::vector<PolicyInput>& inputs,
                   const std::vector<double>& targets,
                   const std::vector<int64_t>& ts, const Var<T>& eps) {
  if (inputs.empty()) throw ConfigError("stage1_loss: empty batch");
  const ModelConfig& cfg = model.cfg;
  const std::vector<int> cols = conditioning_columns(cfg);
  const int64_t B = static_cast<int64_t>(inputs.size());
  const int64_t Ta = cfg.chunk;
  const int64_t md = static_cast<int64_t>(cols.size());
  if (static_cast<int64_t>(targets.size()) != B * Ta * cfg.action_dim)
    throw ShapeError("stage1_loss: target size mismatch");
  if (static_cast<int64_t>(ts.size()) != B)
    throw ShapeError("stage1_loss: ts size mismatch");

  Var<T> a0 = Var<T>::leaf(B * Ta, md);
  for (int64_t r = 0; r < B * Ta; ++r)
    for (int64_t j = 0; j < md; ++j)
      a0.data()[r * md + j] = static_cast<T>(
          targets[static_cast<size_t>(r * cfg.action_dim + cols[j])]);
  Var<T> a_t = detail::noised_leaf(model.sched, a0, eps, ts, Ta);

  EncodedBatch<T> enc = model.encode_policy_batch(inputs);
  auto per_block = inject_conditions(
      cfg.inject, std::vector<CondGroup<T>>{model.raw_group(enc)},
      cfg.mob_blocks, B);
  auto kv = make_head_kv(model.ps, "head.mob", per_block);
  HeadOut<T> h =
      head_forward(model.ps, "head.mob", cfg, cfg.mob_blocks, a_t, ts, kv);
  Var<T> d = sub(h.eps_hat, eps);
  return mean_all(mul(d, d));
}

// Denoising MSE of the manipulation head over full 5-dim action rows,
// conditioned on [F_v, F_l + state, F_m]. mob_init seeds the mobility
// head's in-graph denoising pass (ignored when conditioning is none).
template <typename T>
Var<T> stage2_loss(Model<T>& model, const std::vector<PolicyInput>& inputs,
                   const std::vector<double>& targets,
                   const std::vector<int64_t>& ts, const Var<T>& eps,
                   const Var<T>& mob_init) {
  if (inputs.empty()) throw ConfigError("stage2_loss: empty batch");
  const ModelConfig& cfg = model.cfg;
  const int64_t B = static_cast<int64_t>(inputs.size());
  const int64_t Ta = cfg.chunk;
  if (static_cast<int64_t>(targets.size()) != B * Ta * cfg.action_dim)
    throw ShapeError("stage2_loss: target size mismatch");
  if (static_cast<int64_t>(ts.size()) != B)
    throw ShapeError("stage2_loss: ts size mismatch");

  Var<T> a0 = Var<T>::leaf(B * Ta, cfg.action_dim);
  for (int64_t i = 0; i < a0.numel(); ++i)
    a0.data()[i] = static_cast<T>(targets[static_cast<size_t>(i)]);
  Var<T> a_t = detail::noised_leaf(model.sched, a0, eps, ts, Ta);

  EncodedBatch<T> enc = model.encode_policy_batch(inputs);
  FusionOut<T> fus = model.fuse(enc);
  CondGroup<T> latent;
  bool has_latent = cfg.conditioning != Conditioning::none;
  if (has_latent) latent = model.mobility_forward(enc, mob_init).latent;
  auto groups = model.manip_groups(enc, fus, has_latent ? &latent : nullptr);
  auto per_block = inject_conditions(cfg.inject, groups, cfg.manip_blocks, B);
  auto kv = make_head_kv(model.ps, "head.manip", per_block);
  HeadOut<T> h =
      head_forward(model.ps, "head.manip", cfg, cfg.manip_blocks, a_t, ts, kv);
  Var<T> d = sub(h.eps_hat, eps);
  return mean_all(mul(d, d));
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
  int steps_run = 0;
  double first_loss = 0.0;
  double final_loss = 0.0;
  double mean_first_tenth = 0.0;
  double mean_last_tenth = 0.0;
  std::string checkpoint_path;
  std::string metrics_path;
};

namespace detail {

// Epoch-shuffled window order; reshuffles whenever the pool is exhausted.
class WindowCursor {
 public:
  WindowCursor(std::vector<std::pair<int, int>> pool, uint64_t seed)
      : pool_(std::move(pool)), rng_(seed) {
    if (pool_.empty()) throw ConfigError("training: no usable windows");
    rng_.shuffle(pool_);
  }
  std::pair<int, int> next() {
    if (pos_ == pool_.size()) {
      rng_.shuffle(pool_);
      pos_ = 0;
    }
    return pool_[pos_++];
  }

 private:
  std::vector<std::pair<int, int>> pool_;
  Rng rng_;
  size_t pos_ = 0;
};

}  // namespace detail

// Runs one configured stage end to end: builds (or restores) the model,
// applies the stage freeze mask, optimizes, writes `out` plus
// `out + ".metrics.csv"` ("step,stage,loss,lr").
//
// Per-step RNG draw order (one generator, seeded mix_seed(seed, stage)):
// batch timesteps, then the noise leaf, then — stage 2 with conditioning —
// the mobility head's denoising start. Window shuffling uses its own
// generator so batch composition is independent of the draw count above.
template <typename T>
TrainResult train(const TrainConfig& tc) {
  validate_train_config(tc);
  if (tc.dataset.empty()) throw ConfigError("training: dataset path not set");
  if (tc.out.empty()) throw ConfigError("training: output path not set");

  Dataset ds = load_dataset(tc.dataset);
  ModelConfig mc = tc.model;
  const bool has_mob = mc.conditioning != Conditioning::none;

  Model<T> model(mc);
  if (tc.stage == 2 && has_mob) {
    if (tc.stage1_checkpoint.empty())
      throw ConfigError(
          "stage 2 with conditioning needs stage1_checkpoint (set "
          "conditioning = none to train without the mobility head)");
    Model<T> donor = Model<T>::load(tc.stage1_checkpoint);
    model.ps.assign_from(donor.ps);
    model.set_norm(donor.norm);
  } else {
    model.set_norm(compute_norm_stats(ds));
  }
  apply_stage_freeze(model.ps, mc, tc.stage);

  std::vector<std::pair<int, int>> pool = all_windows(ds, mc.chunk);
  if (tc.overfit_window >= 0) {
    if (ds.trajs.empty() ||
        tc.overfit_window > ds.trajs[0].length() - mc.chunk)
      throw ConfigError("training: overfit_window out of range");
    pool.assign(1, {0, tc.overfit_window});
  }
  detail::WindowCursor cursor(std::move(pool), mix_seed(tc.seed, 17));

  AdamW<T> opt(model.ps, tc.weight_decay, tc.beta1, tc.beta2, tc.adam_eps);
  Rng draw(mix_seed(tc.seed, static_cast<uint64_t>(tc.stage)));

  const int steps = tc.resolved_steps();
  const int64_t Ta = mc.chunk;
  const int64_t mob_dim = has_mob ? mc.mob_dim() : 0;
  const int64_t eps_dim = tc.stage == 1 ? mob_dim : mc.action_dim;

  std::string metrics_path = tc.out + ".metrics.csv";
  std::ofstream metrics(metrics_path);
  if (!metrics)
    throw ConfigError("training: cannot open metrics file " + metrics_path);
  metrics << "step,stage,loss,lr\n";

  TrainResult res;
  res.metrics_path = metrics_path;
  res.checkpoint_path = tc.out;
  double sum_first = 0.0, sum_last = 0.0;
  const int tenth = std::max(1, steps / 10);

  for (int step = 0; step < steps; ++step) {
    std::vector<std::pair<int, int>> picks;
    picks.reserve(static_cast<size_t>(tc.batch_size));
    for (int b = 0; b < tc.batch_size; ++b) picks.push_back(cursor.next());
    TrainBatch batch = make_train_batch(ds, model.norm, mc, picks);

    std::vector<int64_t> ts(picks.size());
    for (auto& t : ts) t = draw.randint(mc.K);
    Var<T> eps = Var<T>::leaf(static_cast<int64_t>(picks.size()) * Ta, eps_dim);
    draw.fill_normal(eps.data(), static_cast<size_t>(eps.numel()));
    Var<T> mob_init;
    if (tc.stage == 2 && has_mob) {
      mob_init =
          Var<T>::leaf(static_cast<int64_t>(picks.size()) * Ta, mob_dim);
      draw.fill_normal(mob_init.data(), static_cast<size_t>(mob_init.numel()));
    }

    double lr = cosine_lr(step, steps, tc.lr, tc.lr_min);
    double loss_val = 0.0;
    try {
      Var<T> loss =
          tc.stage == 1
              ? stage1_loss(model, batch.inputs, batch.targets, ts, eps)
              : stage2_loss(model, batch.inputs, batch.targets, ts, eps,
                            mob_init);
      loss_val = static_cast<double>(loss.item());
      if (!std::isfinite(loss_val))
        throw TrainError("training diverged at step " + std::to_string(step));
      model.ps.zero_grad();
      backward(loss);
    } catch (const NumericError& e) {
      throw TrainError("training diverged at step " + std::to_string(step) +
                       ": " + e.what());
    }
    opt.clip_global_norm(tc.clip_norm);
    opt.step(lr);

    if (step == 0) res.first_loss = loss_val;
    res.final_loss = loss_val;
    if (step < tenth) sum_first += loss_val;
    if (step >= steps - tenth) sum_last += loss_val;
    if (step < 10 || step % tc.log_every == 0 || step == steps - 1) {
      char row[96];
      std::snprintf(row, sizeof(row), "%d,%d,%.17g,%.17g\n", step, tc.stage,
                    loss_val, lr);
      metrics << row;
      metrics.flush();  // long runs stay observable from outside
    }
    if (tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 &&
        step + 1 < steps)
      model.save(tc.out + ".step" + std::to_string(step + 1));
  }
  metrics.flush();
  if (!metrics) throw ConfigError("training: metrics write failed");

  res.steps_run = steps;
  res.mean_first_tenth = sum_first / tenth;
  res.mean_last_tenth = sum_last / tenth;
  model.save(tc.out);
  return res;
}

}  // namespace acdit
