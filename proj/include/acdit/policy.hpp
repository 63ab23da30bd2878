// Diffusion machinery and the two DiT heads: the lightweight mobility head
// (which also produces the latent mobility feature from its denoising trace)
// and the whole-body manipulation head, plus the full model assembly that
// ties encoders, fusion, and heads to a single parameter store and
// checkpoint format.
//
// Parameter path prefixes: head.mob., head.manip., plus meta. / norm.
// bookkeeping tensors carried inside checkpoints.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "acdit/dataset.hpp"
#include "acdit/encoders.hpp"
#include "acdit/fusion.hpp"
#include "acdit/nn.hpp"

namespace acdit {

// ---------------------------------------------------------------------------
// Diffusion schedule

struct DiffusionSchedule {
  int K = 0;
  std::vector<double> betas, alphas, alpha_bars;
};

// Linear beta ramp 1e-4 -> 0.02 over K steps (K=1 uses the ramp start).
inline DiffusionSchedule make_schedule(int K) {
  if (K < 1) throw ConfigError("make_schedule: K must be >= 1");
  DiffusionSchedule s;
  s.K = K;
  double acc = 1.0;
  for (int t = 0; t < K; ++t) {
    double frac = K > 1 ? static_cast<double>(t) / (K - 1) : 0.0;
    double beta = 1e-4 + (0.02 - 1e-4) * frac;
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    acc *= 1.0 - beta;
    s.alpha_bars.push_back(acc);
  }
  return s;
}

// Forward process: a_t = sqrt(abar_t) a0 + sqrt(1 - abar_t) eps.
template <typename T>
void q_sample(const DiffusionSchedule& s, int t, const T* a0, const T* eps,
              T* out, int64_t n) {
  if (t < 0 || t >= s.K)
    throw ConfigError("q_sample: t out of range: " + std::to_string(t));
  T ca = static_cast<T>(std::sqrt(s.alpha_bars[static_cast<size_t>(t)]));
  T ce = static_cast<T>(std::sqrt(1.0 - s.alpha_bars[static_cast<size_t>(t)]));
  for (int64_t i = 0; i < n; ++i) out[i] = ca * a0[i] + ce * eps[i];
}

// ---------------------------------------------------------------------------
// Condition groups

// One group of condition tokens, laid out sample-major with a uniform
// per-sample token count. key_mask (if non-empty) flags attendable rows.
template <typename T>
struct CondGroup {
  Var<T> tokens;
  int64_t per_sample = 0;
  std::vector<T> key_mask;
};

// Concatenates several groups along the token axis per sample, preserving
// group order within each sample.
template <typename T>
CondGroup<T> interleave_groups(const std::vector<CondGroup<T>>& parts,
                               int64_t B) {
  if (parts.empty()) throw ConfigError("interleave_groups: no groups");
  std::vector<Var<T>> mats;
  int64_t total = 0;
  bool any_mask = false;
  for (const auto& p : parts) {
    mats.push_back(p.tokens);
    total += p.per_sample;
    any_mask = any_mask || !p.key_mask.empty();
  }
  Var<T> big = concat_rows(mats);
  CondGroup<T> out;
  out.per_sample = total;
  std::vector<int64_t> idx;
  idx.reserve(static_cast<size_t>(B * total));
  if (any_mask) out.key_mask.reserve(static_cast<size_t>(B * total));
  for (int64_t b = 0; b < B; ++b) {
    int64_t off = 0;
    for (const auto& p : parts) {
      for (int64_t r = 0; r < p.per_sample; ++r) {
        idx.push_back(off + b * p.per_sample + r);
        if (any_mask)
          out.key_mask.push_back(
              p.key_mask.empty()
                  ? T(1)
                  : p.key_mask[static_cast<size_t>(b * p.per_sample + r)]);
      }
      off += p.tokens.rows();
    }
  }
  out.tokens = gather_rows(big, std::move(idx));
  return out;
}

// Assigns condition groups to blocks: concat mode hands every block the
// per-sample concatenation of all groups; alternate mode hands block i the
// group i mod G (groups in their given fixed order).
template <typename T>
std::vector<CondGroup<T>> inject_conditions(
    InjectMode mode, const std::vector<CondGroup<T>>& groups, int nblocks,
    int64_t B) {
  if (groups.empty()) throw ConfigError("inject_conditions: no groups");
  std::vector<CondGroup<T>> per_block;
  per_block.reserve(static_cast<size_t>(nblocks));
  if (mode == InjectMode::concat) {
    CondGroup<T> cat =
        groups.size() == 1 ? groups[0] : interleave_groups(groups, B);
    for (int i = 0; i < nblocks; ++i) per_block.push_back(cat);
  } else if (mode == InjectMode::alternate) {
    for (int i = 0; i < nblocks; ++i)
      per_block.push_back(
          groups[static_cast<size_t>(i) % groups.size()]);
  } else {
    throw ConfigError("inject_conditions: unknown mode");
  }
  return per_block;
}

// ---------------------------------------------------------------------------
// DiT heads

template <typename T>
void register_dit_head(ParamStore<T>& ps, const std::string& prefix,
                       const ModelConfig& cfg, int blocks, int adim) {
  const uint64_t seed = cfg.init_seed;
  nn::register_linear(ps, prefix + ".in", adim, cfg.d, seed);
  nn::register_embedding(ps, prefix + ".pos", cfg.chunk, cfg.d, seed);
  nn::register_embedding(ps, prefix + ".temb", cfg.K, cfg.d, seed);
  for (int i = 0; i < blocks; ++i)
    nn::register_dit_block(ps, prefix + ".b" + std::to_string(i), cfg.d,
                           cfg.mlp_hidden(), seed);
  nn::register_layer_norm(ps, prefix + ".outln", cfg.d);
  nn::register_linear(ps, prefix + ".out", cfg.d, adim, seed);
}

// Precomputes the per-block key/value projections over condition tokens, so
// multi-step sampling reprojects the (fixed) conditions only once.
template <typename T>
std::vector<nn::CondKV<T>> make_head_kv(
    ParamStore<T>& ps, const std::string& prefix,
    const std::vector<CondGroup<T>>& per_block) {
  std::vector<nn::CondKV<T>> kv;
  kv.reserve(per_block.size());
  for (size_t i = 0; i < per_block.size(); ++i)
    kv.push_back(nn::project_cond(ps, prefix + ".b" + std::to_string(i),
                                  per_block[i].tokens,
                                  per_block[i].per_sample,
                                  per_block[i].key_mask));
  return kv;
}

template <typename T>
struct HeadOut {
  Var<T> eps_hat;      // (B*T_a) x adim noise prediction
  Var<T> final_tokens; // (B*T_a) x d, last block output before the final MLP
};

// One head pass at per-sample timesteps t: embed noisy action rows, add
// token-position and timestep embeddings, run the DiT blocks, and decode the
// noise prediction with the final MLP.
template <typename T>
HeadOut<T> head_forward(ParamStore<T>& ps, const std::string& prefix,
                        const ModelConfig& cfg, int blocks, const Var<T>& a_t,
                        const std::vector<int64_t>& t_per_sample,
                        const std::vector<nn::CondKV<T>>& kv) {
  const int64_t Ta = cfg.chunk;
  if (a_t.rows() % Ta != 0)
    throw ShapeError("head_forward: rows not a multiple of the chunk length");
  const int64_t B = a_t.rows() / Ta;
  if (static_cast<int64_t>(t_per_sample.size()) != B)
    throw ShapeError("head_forward: one timestep per sample required");
  for (int64_t t : t_per_sample)
    if (t < 0 || t >= cfg.K)
      throw ConfigError("head_forward: timestep out of range: " +
                        std::to_string(t));
  if (static_cast<int>(kv.size()) != blocks)
    throw ShapeError("head_forward: conditions per block mismatch");

  Var<T> x = nn::linear(ps, prefix + ".in", a_t);
  std::vector<int64_t> pos(static_cast<size_t>(a_t.rows()));
  std::vector<int64_t> tidx(static_cast<size_t>(a_t.rows()));
  for (int64_t r = 0; r < a_t.rows(); ++r) {
    pos[static_cast<size_t>(r)] = r % Ta;
    tidx[static_cast<size_t>(r)] = t_per_sample[static_cast<size_t>(r / Ta)];
  }
  x = add_rows_by_index(x, ps.at(prefix + ".pos"), std::move(pos));
  x = add_rows_by_index(x, ps.at(prefix + ".temb"), std::move(tidx));
  for (int i = 0; i < blocks; ++i)
    x = nn::dit_block(ps, prefix + ".b" + std::to_string(i), x, cfg.heads, Ta,
                      kv[static_cast<size_t>(i)]);
  HeadOut<T> out;
  out.final_tokens = x;
  out.eps_hat =
      nn::linear(ps, prefix + ".out", nn::apply_layer_norm(ps, prefix + ".outln", x));
  return out;
}

template <typename T>
struct DenoiseOut {
  Var<T> actions;            // (B*T_a) x adim, normalized a_0
  std::vector<Var<T>> trace; // one (B*T_a) x d entry per executed step
};

// The S schedule timesteps a sampling pass executes, in denoising order
// (descending). S = K runs every step; S < K strides evenly across
// [K-1, 0], always starting at K-1 and (for S > 1) finishing at 0.
inline std::vector<int> sample_timesteps(int K, int S) {
  if (K < 1) throw ConfigError("sample_timesteps: K must be >= 1");
  if (S < 1 || S > K)
    throw ConfigError("sample_timesteps: need 1 <= sample_steps <= K, got " +
                      std::to_string(S));
  std::vector<int> ts;
  ts.reserve(static_cast<size_t>(S));
  if (S == 1) {
    ts.push_back(K - 1);
    return ts;
  }
  for (int j = S - 1; j >= 0; --j)
    ts.push_back(static_cast<int>(std::llround(
        static_cast<double>(j) * (K - 1) / (S - 1))));
  for (size_t i = 1; i < ts.size(); ++i)
    if (ts[i] >= ts[i - 1])
      throw NumericError("sample_timesteps: stride collapsed");
  return ts;
}

// Deterministic DDIM sampling (eta = 0) from the given initial noise over
// the configured timestep subsequence; records the final block's tokens at
// every executed step. With a strided subsequence, alpha_bar_prev is the
// next executed timestep's value, and the last executed step returns its
// predicted a_0 directly.
template <typename T>
DenoiseOut<T> denoise(ParamStore<T>& ps, const std::string& prefix,
                      const ModelConfig& cfg, int blocks,
                      const std::vector<CondGroup<T>>& per_block,
                      const DiffusionSchedule& sched, const Var<T>& a_init) {
  const int64_t B = a_init.rows() / cfg.chunk;
  auto kv = make_head_kv(ps, prefix, per_block);
  std::vector<int> steps =
      sample_timesteps(sched.K, cfg.resolved_sample_steps());
  DenoiseOut<T> out;
  out.trace.reserve(steps.size());
  Var<T> a = a_init;
  for (size_t i = 0; i < steps.size(); ++i) {
    int t = steps[i];
    bool last = i + 1 == steps.size();
    try {
      std::vector<int64_t> ts(static_cast<size_t>(B), t);
      HeadOut<T> h = head_forward(ps, prefix, cfg, blocks, a, ts, kv);
      double ab = sched.alpha_bars[static_cast<size_t>(t)];
      double ab_prev =
          last ? 1.0 : sched.alpha_bars[static_cast<size_t>(steps[i + 1])];
      Var<T> a0p = scale(sub(a, scale(h.eps_hat, std::sqrt(1.0 - ab))),
                         1.0 / std::sqrt(ab));
      a = last ? a0p
               : add(scale(a0p, std::sqrt(ab_prev)),
                     scale(h.eps_hat, std::sqrt(1.0 - ab_prev)));
      out.trace.push_back(h.final_tokens);
    } catch (const NumericError& e) {
      throw NumericError("denoise step t=" + std::to_string(t) + ": " +
                         e.what());
    }
  }
  out.actions = a;
  return out;
}

// Latent mobility feature: final-block tokens of every executed denoising
// step, concatenated in denoising order -> (steps*T_a) tokens per sample.
template <typename T>
CondGroup<T> latent_from_trace(const ModelConfig& cfg,
                               const std::vector<Var<T>>& trace, int64_t B) {
  Var<T> big = concat_rows(trace);
  const int64_t Ta = cfg.chunk;
  const int64_t K = static_cast<int64_t>(trace.size());
  std::vector<int64_t> idx;
  idx.reserve(static_cast<size_t>(B * K * Ta));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t j = 0; j < K; ++j)
      for (int64_t a = 0; a < Ta; ++a)
        idx.push_back(j * B * Ta + b * Ta + a);
  CondGroup<T> out;
  out.per_sample = K * Ta;
  out.tokens = gather_rows(big, std::move(idx));
  return out;
}

// ---------------------------------------------------------------------------
// Full model

// One policy query: an observation history (oldest first, length tau+1), the
// instruction ids, and the control frequency.
struct PolicyInput {
  std::vector<const Observation*> history;
  const std::vector<int>* instruction = nullptr;
  double c = 0.0;
};

template <typename T>
struct EncodedBatch {
  int64_t B = 0;
  Var<T> img;   // (B*S*3*P) x d, step-index embedding included
  Var<T> cloud; // (B*S*G) x d
  Var<T> text;  // (B*T_l) x d
  Var<T> state; // (B*S) x d
  std::vector<T> text_mask;
};

template <typename T>
struct FusionOut {
  Var<T> weights; // B x 4 importance weights (wf, wl, wr, wp)
  FusedVisual<T> fv;
};

template <typename T>
struct MobilityOut {
  Var<T> base_actions; // (B*T_a) x mob_dim, normalized a_0 of the light head
  CondGroup<T> latent; // F_m group
};

struct Prediction {
  ActionChunk chunk;                   // denormalized whole-body actions
  std::array<double, 4> weights{};     // fusion importance weights
  int64_t manip_cond_tokens = 0;       // per-sample condition count seen by H
};

inline constexpr int64_t kMetaLen = 36;
inline constexpr double kStateClamp = 10.0;

template <typename T>
struct Model {
  ModelConfig cfg;
  ParamStore<T> ps;
  DiffusionSchedule sched;
  NormStats norm;

  explicit Model(const ModelConfig& c) : cfg(c), sched(make_schedule(c.K)) {
    sample_timesteps(cfg.K, cfg.resolved_sample_steps());  // validate early
    norm.state_mean.assign(static_cast<size_t>(cfg.state_dim), 0.0);
    norm.state_std.assign(static_cast<size_t>(cfg.state_dim), 1.0);
    norm.action_mean.assign(static_cast<size_t>(cfg.action_dim), 0.0);
    norm.action_std.assign(static_cast<size_t>(cfg.action_dim), 1.0);
    register_encoders(ps, cfg);
    register_fusion(ps, cfg);
    if (cfg.conditioning != Conditioning::none)
      register_dit_head(ps, "head.mob", cfg, cfg.mob_blocks, cfg.mob_dim());
    register_dit_head(ps, "head.manip", cfg, cfg.manip_blocks, cfg.action_dim);
    ps.add("meta.cfg", Shape{1, kMetaLen}, false);
    ps.add("norm.state_mean", Shape{1, cfg.state_dim}, false);
    ps.add("norm.state_std", Shape{1, cfg.state_dim}, false);
    ps.add("norm.action_mean", Shape{1, cfg.action_dim}, false);
    ps.add("norm.action_std", Shape{1, cfg.action_dim}, false);
    write_meta();
    write_norm();
  }

  void set_norm(const NormStats& st) {
    norm = st;
    write_norm();
  }

  int64_t param_count(const std::string& prefix) const {
    int64_t n = 0;
    for (const auto& name : ps.names())
      if (name.rfind(prefix, 0) == 0) n += shape_numel(ps.shape_of(name));
    return n;
  }

  void save(const std::string& path) {
    write_meta();
    write_norm();
    ps.save(path);
  }

  static Model load(const std::string& path) {
    ParamStore<T> raw = ParamStore<T>::load(path);
    Var<T> meta = raw.at("meta.cfg");
    if (meta.numel() != kMetaLen)
      throw FormatError("checkpoint meta block has unexpected length");
    const T* m = meta.data();
    if (static_cast<int>(m[0]) != 1)
      throw VersionError("unsupported model meta version");
    ModelConfig c;
    c.d = static_cast<int>(m[1]);
    c.d_s = static_cast<int>(m[2]);
    c.heads = static_cast<int>(m[3]);
    c.trunk_blocks = static_cast<int>(m[4]);
    c.text_blocks = static_cast<int>(m[5]);
    c.mob_blocks = static_cast<int>(m[6]);
    c.manip_blocks = static_cast<int>(m[7]);
    c.image_size = static_cast<int>(m[8]);
    c.patch = static_cast<int>(m[9]);
    c.cloud_points = static_cast<int>(m[10]);
    c.cloud_groups = static_cast<int>(m[11]);
    c.text_len = static_cast<int>(m[12]);
    c.vocab = static_cast<int>(m[13]);
    c.state_dim = static_cast<int>(m[14]);
    c.action_dim = static_cast<int>(m[15]);
    c.K = static_cast<int>(m[16]);
    c.chunk = static_cast<int>(m[17]);
    c.tau = static_cast<int>(m[18]);
    c.inject = static_cast<int>(m[19]) == 1 ? InjectMode::alternate
                                            : InjectMode::concat;
    c.conditioning = static_cast<int>(m[20]) == 2 ? Conditioning::none
                     : static_cast<int>(m[20]) == 1 ? Conditioning::upper_body
                                                    : Conditioning::mobility;
    c.use_pma = m[21] != T(0);
    c.use_cloud = m[22] != T(0);
    c.raw_weights = m[23] != T(0);
    c.freeze_trunk = m[24] != T(0);
    c.freeze_mobility = m[25] != T(0);
    c.temperature = static_cast<double>(m[26]);
    c.plane_cells = static_cast<int>(m[27]);
    c.bx0 = static_cast<double>(m[28]);
    c.bx1 = static_cast<double>(m[29]);
    c.by0 = static_cast<double>(m[30]);
    c.by1 = static_cast<double>(m[31]);
    c.bz0 = static_cast<double>(m[32]);
    c.bz1 = static_cast<double>(m[33]);
    c.init_seed = static_cast<uint64_t>(m[34]);
    c.sample_steps = static_cast<int>(m[35]);
    Model model(c);
    model.ps.assign_from(raw);
    model.read_norm();
    return model;
  }

  // -------------------------------------------------------------------------
  // Feature assembly

  EncodedBatch<T> encode_policy_batch(const std::vector<PolicyInput>& inputs) {
    const int64_t B = static_cast<int64_t>(inputs.size());
    const int64_t S = cfg.hist_steps();
    const int64_t P = cfg.view_tokens(), G = cfg.cloud_groups;
    std::vector<const float*> grids, clouds;
    std::vector<int> view_ids;
    std::vector<std::vector<T>> zs;
    std::vector<double> cs;
    std::vector<std::vector<int>> instrs;
    for (const auto& in : inputs) {
      if (static_cast<int64_t>(in.history.size()) != S)
        throw ShapeError("encode_policy_batch: history length mismatch");
      if (!in.instruction)
        throw ShapeError("encode_policy_batch: missing instruction");
      instrs.push_back(*in.instruction);
      for (const Observation* o : in.history) {
        for (int v = 0; v < 3; ++v) {
          grids.push_back(o->views[static_cast<size_t>(v)].data());
          view_ids.push_back(v);
        }
        clouds.push_back(o->cloud.data());
        std::vector<T> zn(static_cast<size_t>(cfg.state_dim));
        if (static_cast<int>(o->z.size()) != cfg.state_dim)
          throw ShapeError("encode_policy_batch: state dim mismatch");
        for (int j = 0; j < cfg.state_dim; ++j) {
          double v = (o->z[static_cast<size_t>(j)] -
                      norm.state_mean[static_cast<size_t>(j)]) /
                     norm.state_std[static_cast<size_t>(j)];
          v = std::min(kStateClamp, std::max(-kStateClamp, v));
          zn[static_cast<size_t>(j)] = static_cast<T>(v);
        }
        zs.push_back(std::move(zn));
        cs.push_back(in.c);
      }
    }
    EncodedBatch<T> enc;
    enc.B = B;
    enc.img = encode_images_batch(ps, cfg, grids, view_ids);
    if (cfg.use_cloud) {
      enc.cloud =
          encode_clouds_batch(ps, cfg, tokenize_clouds_batch(ps, cfg, clouds));
    } else {
      std::vector<int64_t> zero(static_cast<size_t>(B * S * G), 0);
      enc.cloud = gather_rows(ps.at("enc.cloud.null"), std::move(zero));
    }
    TextEncoding<T> te = encode_text_batch(ps, cfg, instrs);
    enc.text = te.tokens;
    enc.text_mask = std::move(te.mask);
    enc.state = embed_states_batch(ps, cfg, zs, cs);

    std::vector<int64_t> img_step(static_cast<size_t>(enc.img.rows()));
    for (int64_t r = 0; r < enc.img.rows(); ++r)
      img_step[static_cast<size_t>(r)] = (r / (3 * P)) % S;
    enc.img = add_rows_by_index(enc.img, ps.at("enc.hist.step"),
                                std::move(img_step));
    std::vector<int64_t> cl_step(static_cast<size_t>(enc.cloud.rows()));
    for (int64_t r = 0; r < enc.cloud.rows(); ++r)
      cl_step[static_cast<size_t>(r)] = (r / G) % S;
    enc.cloud = add_rows_by_index(enc.cloud, ps.at("enc.hist.step"),
                                  std::move(cl_step));
    std::vector<int64_t> st_step(static_cast<size_t>(enc.state.rows()));
    for (int64_t r = 0; r < enc.state.rows(); ++r)
      st_step[static_cast<size_t>(r)] = r % S;
    enc.state = add_rows_by_index(enc.state, ps.at("enc.hist.step"),
                                  std::move(st_step));
    return enc;
  }

  FusionOut<T> fuse(const EncodedBatch<T>& enc) {
    FusionOut<T> out;
    SharedSpaceVecs<T> vecs = project_and_pool(ps, cfg, enc.img, enc.cloud,
                                               enc.text, enc.text_mask, enc.B);
    out.weights = normalize_weights(similarity_scores(vecs), cfg.temperature);
    out.fv = reweight(cfg, enc.img, enc.cloud, out.weights, enc.B, cfg.use_pma);
    return out;
  }

  // Language + state condition group (text pads masked from attention).
  CondGroup<T> lang_state_group(const EncodedBatch<T>& enc) {
    const int64_t S = cfg.hist_steps();
    CondGroup<T> text{enc.text, cfg.text_len, enc.text_mask};
    CondGroup<T> state{enc.state, S, {}};
    return interleave_groups(std::vector<CondGroup<T>>{text, state}, enc.B);
  }

  // Raw concatenated modality tokens (no fusion reweighting), consumed by
  // the mobility head.
  CondGroup<T> raw_group(const EncodedBatch<T>& enc) {
    const int64_t S = cfg.hist_steps();
    CondGroup<T> img{enc.img, S * 3 * cfg.view_tokens(), {}};
    CondGroup<T> cloud{enc.cloud, S * cfg.cloud_groups, {}};
    CondGroup<T> text{enc.text, cfg.text_len, enc.text_mask};
    CondGroup<T> state{enc.state, S, {}};
    return interleave_groups(std::vector<CondGroup<T>>{img, cloud, text, state},
                             enc.B);
  }

  // -------------------------------------------------------------------------
  // Heads

  // Full denoising pass of the mobility head over raw modality tokens,
  // producing normalized base actions and the latent mobility feature. With
  // freeze_mobility the pass runs without building a graph and the outputs
  // are re-wrapped as constants.
  MobilityOut<T> mobility_forward(const EncodedBatch<T>& enc,
                                  const Var<T>& a_init) {
    if (cfg.conditioning == Conditioning::none)
      throw ConfigError("mobility_forward: conditioning direction is none");
    auto run = [&]() {
      auto per_block = inject_conditions(
          cfg.inject, std::vector<CondGroup<T>>{raw_group(enc)},
          cfg.mob_blocks, enc.B);
      return denoise(ps, "head.mob", cfg, cfg.mob_blocks, per_block, sched,
                     a_init);
    };
    MobilityOut<T> out;
    if (cfg.freeze_mobility && grad_mode_flag()) {
      NoGradGuard guard;
      DenoiseOut<T> den = run();
      CondGroup<T> latent = latent_from_trace(cfg, den.trace, enc.B);
      out.base_actions = Var<T>::leaf(den.actions.rows(), den.actions.cols());
      std::copy(den.actions.data(), den.actions.data() + den.actions.numel(),
                out.base_actions.data());
      out.latent.per_sample = latent.per_sample;
      out.latent.tokens = Var<T>::leaf(latent.tokens.rows(), latent.tokens.cols());
      std::copy(latent.tokens.data(),
                latent.tokens.data() + latent.tokens.numel(),
                out.latent.tokens.data());
    } else {
      DenoiseOut<T> den = run();
      out.base_actions = den.actions;
      out.latent = latent_from_trace(cfg, den.trace, enc.B);
    }
    return out;
  }

  // Condition groups for the manipulation head in their fixed order
  // [F_v, F_l + state, F_m]; F_m is present only when conditioning is on.
  std::vector<CondGroup<T>> manip_groups(const EncodedBatch<T>& enc,
                                         const FusionOut<T>& fus,
                                         const CondGroup<T>* latent) {
    std::vector<CondGroup<T>> groups;
    groups.push_back(CondGroup<T>{fus.fv.tokens, fus.fv.per_sample, {}});
    groups.push_back(lang_state_group(enc));
    if (latent) groups.push_back(*latent);
    return groups;
  }

  // -------------------------------------------------------------------------
  // Inference

  Prediction predict_actions(const std::vector<const Observation*>& history,
                             const std::vector<int>& instruction, double c,
                             uint64_t noise_seed) {
    NoGradGuard guard;
    PolicyInput in{history, &instruction, c};
    EncodedBatch<T> enc = encode_policy_batch({in});
    FusionOut<T> fus = fuse(enc);

    CondGroup<T> latent;
    bool has_latent = cfg.conditioning != Conditioning::none;
    if (has_latent) {
      Var<T> a0 = Var<T>::leaf(cfg.chunk, cfg.mob_dim());
      Rng rng(mix_seed(noise_seed, 1));
      rng.fill_normal(a0.data(), static_cast<size_t>(a0.numel()));
      latent = mobility_forward(enc, a0).latent;
    }
    auto groups = manip_groups(enc, fus, has_latent ? &latent : nullptr);
    auto per_block =
        inject_conditions(cfg.inject, groups, cfg.manip_blocks, enc.B);

    Var<T> a_init = Var<T>::leaf(cfg.chunk, cfg.action_dim);
    Rng rng(mix_seed(noise_seed, 2));
    rng.fill_normal(a_init.data(), static_cast<size_t>(a_init.numel()));
    DenoiseOut<T> den = denoise(ps, "head.manip", cfg, cfg.manip_blocks,
                                per_block, sched, a_init);

    Prediction pred;
    pred.chunk.k = cfg.chunk;
    pred.chunk.rows.assign(
        static_cast<size_t>(cfg.chunk * cfg.action_dim), 0.0);
    for (int64_t r = 0; r < cfg.chunk; ++r)
      for (int j = 0; j < cfg.action_dim; ++j) {
        double a = static_cast<double>(den.actions.data()[r * cfg.action_dim + j]);
        pred.chunk.rows[static_cast<size_t>(r * cfg.action_dim + j)] =
            a * norm.action_std[static_cast<size_t>(j)] +
            norm.action_mean[static_cast<size_t>(j)];
      }
    for (int j = 0; j < 4; ++j)
      pred.weights[static_cast<size_t>(j)] =
          static_cast<double>(fus.weights.data()[j]);
    int64_t total = 0;
    for (const auto& g : groups) total += g.per_sample;
    pred.manip_cond_tokens = cfg.inject == InjectMode::concat
                                 ? total
                                 : groups.front().per_sample;
    return pred;
  }

 private:
  void write_meta() {
    Var<T> meta = ps.at("meta.cfg");
    T* m = meta.data();
    m[0] = T(1);
    m[1] = static_cast<T>(cfg.d);
    m[2] = static_cast<T>(cfg.d_s);
    m[3] = static_cast<T>(cfg.heads);
    m[4] = static_cast<T>(cfg.trunk_blocks);
    m[5] = static_cast<T>(cfg.text_blocks);
    m[6] = static_cast<T>(cfg.mob_blocks);
    m[7] = static_cast<T>(cfg.manip_blocks);
    m[8] = static_cast<T>(cfg.image_size);
    m[9] = static_cast<T>(cfg.patch);
    m[10] = static_cast<T>(cfg.cloud_points);
    m[11] = static_cast<T>(cfg.cloud_groups);
    m[12] = static_cast<T>(cfg.text_len);
    m[13] = static_cast<T>(cfg.vocab);
    m[14] = static_cast<T>(cfg.state_dim);
    m[15] = static_cast<T>(cfg.action_dim);
    m[16] = static_cast<T>(cfg.K);
    m[17] = static_cast<T>(cfg.chunk);
    m[18] = static_cast<T>(cfg.tau);
    m[19] = cfg.inject == InjectMode::alternate ? T(1) : T(0);
    m[20] = cfg.conditioning == Conditioning::none       ? T(2)
            : cfg.conditioning == Conditioning::upper_body ? T(1)
                                                           : T(0);
    m[21] = cfg.use_pma ? T(1) : T(0);
    m[22] = cfg.use_cloud ? T(1) : T(0);
    m[23] = cfg.raw_weights ? T(1) : T(0);
    m[24] = cfg.freeze_trunk ? T(1) : T(0);
    m[25] = cfg.freeze_mobility ? T(1) : T(0);
    m[26] = static_cast<T>(cfg.temperature);
    m[27] = static_cast<T>(cfg.plane_cells);
    m[28] = static_cast<T>(cfg.bx0);
    m[29] = static_cast<T>(cfg.bx1);
    m[30] = static_cast<T>(cfg.by0);
    m[31] = static_cast<T>(cfg.by1);
    m[32] = static_cast<T>(cfg.bz0);
    m[33] = static_cast<T>(cfg.bz1);
    m[34] = static_cast<T>(cfg.init_seed);
    m[35] = static_cast<T>(cfg.sample_steps);
  }

  void write_norm() {
    auto put = [&](const char* name, const std::vector<double>& v) {
      Var<T> p = ps.at(name);
      for (int64_t i = 0; i < p.numel(); ++i)
        p.data()[i] = static_cast<T>(v[static_cast<size_t>(i)]);
    };
    put("norm.state_mean", norm.state_mean);
    put("norm.state_std", norm.state_std);
    put("norm.action_mean", norm.action_mean);
    put("norm.action_std", norm.action_std);
  }

  void read_norm() {
    auto get = [&](const char* name, std::vector<double>& v) {
      Var<T> p = ps.at(name);
      v.resize(static_cast<size_t>(p.numel()));
      for (int64_t i = 0; i < p.numel(); ++i)
        v[static_cast<size_t>(i)] = static_cast<double>(p.data()[i]);
    };
    get("norm.state_mean", norm.state_mean);
    get("norm.state_std", norm.state_std);
    get("norm.action_mean", norm.action_mean);
    get("norm.action_std", norm.action_std);
  }
};

}  // namespace acdit
