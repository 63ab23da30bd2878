// Neural-network building blocks on top of the autodiff engine: parameter
// registration with deterministic per-name initialization, linear/MLP layers,
// pre-norm transformer encoder blocks, and cross-attending DiT blocks.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "acdit/autodiff.hpp"
#include "acdit/common.hpp"
#include "acdit/param_store.hpp"

namespace acdit {

enum class InjectMode { concat, alternate };
enum class Conditioning { mobility, upper_body, none };

inline const char* inject_mode_name(InjectMode m) {
  return m == InjectMode::concat ? "concat" : "alternate";
}
inline InjectMode inject_mode_from_name(const std::string& s) {
  if (s == "concat") return InjectMode::concat;
  if (s == "alternate") return InjectMode::alternate;
  throw ConfigError("unknown inject mode '" + s + "'");
}
inline const char* conditioning_name(Conditioning c) {
  switch (c) {
    case Conditioning::mobility: return "mobility";
    case Conditioning::upper_body: return "upper_body";
    default: return "none";
  }
}
inline Conditioning conditioning_from_name(const std::string& s) {
  if (s == "mobility") return Conditioning::mobility;
  if (s == "upper_body") return Conditioning::upper_body;
  if (s == "none") return Conditioning::none;
  throw ConfigError("unknown conditioning direction '" + s + "'");
}

// Hyperparameters of the full policy network. Widths and token counts are
// shared across encoders, fusion, and both diffusion heads.
struct ModelConfig {
  int d = 64;             // common token width
  int d_s = 32;           // fusion shared-space width
  int heads = 4;          // attention heads everywhere
  int trunk_blocks = 2;   // shared image/cloud transformer trunk depth
  int text_blocks = 1;    // text encoder depth
  int mob_blocks = 2;     // mobility head depth
  int manip_blocks = 4;   // manipulation head depth
  int image_size = 32;    // square view resolution
  int patch = 8;          // square patch edge
  int cloud_points = 256; // points per cloud
  int cloud_groups = 32;  // point-cloud tokens T_p
  int text_len = 8;       // instruction tokens T_l
  int vocab = 64;         // text vocabulary capacity
  int state_dim = 13;     // proprioceptive state dims
  int action_dim = 5;     // whole-body action dims
  int K = 5;              // diffusion timesteps in the schedule
  int sample_steps = -1;  // executed DDIM steps (-1: every schedule step)
  int chunk = 2;          // action-chunk horizon (tokens per head pass)
  int tau = 1;            // observation history length minus one
  InjectMode inject = InjectMode::concat;
  Conditioning conditioning = Conditioning::mobility;
  bool use_pma = true;      // perception-aware reweighting on
  bool use_cloud = true;    // cloud stream live (false: learned null token)
  bool raw_weights = false; // skip the 4*w convention, use w directly
  bool freeze_trunk = false;
  bool freeze_mobility = false; // stop gradients into the mobility head in stage 2
  double temperature = 1.0;     // fusion softmax temperature
  int plane_cells = 16;         // virtual-plane grid edge (cells per axis)
  // Workspace bounding box spanned by the virtual planes (base frame).
  double bx0 = -8.0, bx1 = 8.0;
  double by0 = -8.0, by1 = 8.0;
  double bz0 = -0.5, bz1 = 0.5;
  uint64_t init_seed = 0;

  int view_tokens() const {
    int g = image_size / patch;
    return g * g;
  }
  int patch_dim() const { return 3 * patch * patch; }
  int hist_steps() const { return tau + 1; }
  int mob_dim() const {
    return conditioning == Conditioning::upper_body ? 3 : 2;
  }
  int mlp_hidden() const { return 4 * d; }
  int resolved_sample_steps() const {
    return sample_steps > 0 ? sample_steps : K;
  }
};

namespace nn {

// Fills a registered parameter with N(0, std^2) draws seeded by the parameter
// name, so initialization is independent of registration order.
template <typename T>
void init_normal(ParamStore<T>& ps, const std::string& name, uint64_t seed,
                 double std) {
  Var<T> p = ps.at(name);
  Rng rng(mix_seed(seed, fnv1a(name)));
  rng.fill_normal(p.data(), static_cast<size_t>(p.numel()), std);
}

template <typename T>
void init_const(ParamStore<T>& ps, const std::string& name, T v) {
  Var<T> p = ps.at(name);
  for (int64_t i = 0; i < p.numel(); ++i) p.data()[i] = v;
}

// Linear layer: y = x W + b with W stored (in x out).
template <typename T>
void register_linear(ParamStore<T>& ps, const std::string& name, int64_t in,
                     int64_t out, uint64_t seed) {
  ps.add(name + ".w", Shape{in, out}, true);
  ps.add(name + ".b", Shape{1, out}, true);
  init_normal(ps, name + ".w", seed, 1.0 / std::sqrt(static_cast<double>(in)));
  init_const(ps, name + ".b", T(0));
}

template <typename T>
Var<T> linear(ParamStore<T>& ps, const std::string& name, const Var<T>& x) {
  return add_rowvec(matmul(x, ps.at(name + ".w")), ps.at(name + ".b"));
}

template <typename T>
void register_layer_norm(ParamStore<T>& ps, const std::string& name, int64_t d) {
  ps.add(name + ".g", Shape{1, d}, true);
  ps.add(name + ".b", Shape{1, d}, true);
  init_const(ps, name + ".g", T(1));
  init_const(ps, name + ".b", T(0));
}

template <typename T>
Var<T> apply_layer_norm(ParamStore<T>& ps, const std::string& name,
                        const Var<T>& x) {
  return layer_norm(x, ps.at(name + ".g"), ps.at(name + ".b"));
}

// Two-layer MLP with GELU: in -> hidden -> out.
template <typename T>
void register_mlp(ParamStore<T>& ps, const std::string& name, int64_t in,
                  int64_t hidden, int64_t out, uint64_t seed) {
  register_linear(ps, name + ".fc1", in, hidden, seed);
  register_linear(ps, name + ".fc2", hidden, out, seed);
}

template <typename T>
Var<T> mlp(ParamStore<T>& ps, const std::string& name, const Var<T>& x) {
  return linear(ps, name + ".fc2", gelu(linear(ps, name + ".fc1", x)));
}

template <typename T>
void register_attention(ParamStore<T>& ps, const std::string& name, int64_t d,
                        uint64_t seed) {
  register_linear(ps, name + ".q", d, d, seed);
  register_linear(ps, name + ".k", d, d, seed);
  register_linear(ps, name + ".v", d, d, seed);
  register_linear(ps, name + ".o", d, d, seed);
}

// Pre-norm transformer encoder block (self-attention + MLP, residual).
template <typename T>
void register_encoder_block(ParamStore<T>& ps, const std::string& name,
                            int64_t d, int64_t hidden, uint64_t seed) {
  register_layer_norm(ps, name + ".ln1", d);
  register_attention(ps, name + ".attn", d, seed);
  register_layer_norm(ps, name + ".ln2", d);
  register_mlp(ps, name + ".mlp", d, hidden, d, seed);
}

// x: (S*seq_len) x d rows, contiguous uniform segments of seq_len tokens.
// key_mask, if non-empty, marks attendable key rows with nonzero entries.
template <typename T>
Var<T> encoder_block(ParamStore<T>& ps, const std::string& name,
                     const Var<T>& x, int heads, int64_t seq_len,
                     const std::vector<T>& key_mask = {}) {
  Var<T> h = apply_layer_norm(ps, name + ".ln1", x);
  Var<T> q = linear(ps, name + ".attn.q", h);
  Var<T> k = linear(ps, name + ".attn.k", h);
  Var<T> v = linear(ps, name + ".attn.v", h);
  Var<T> att = attention(q, k, v, heads, seq_len, seq_len,
                         key_mask.empty() ? nullptr : &key_mask);
  Var<T> x1 = add(x, linear(ps, name + ".attn.o", att));
  Var<T> h2 = apply_layer_norm(ps, name + ".ln2", x1);
  return add(x1, mlp(ps, name + ".mlp", h2));
}

// Condition tokens with per-block key/value projections precomputed, so a
// multi-step denoising pass reprojects the conditions only once.
template <typename T>
struct CondKV {
  Var<T> k, v;
  int64_t per_sample = 0;
  std::vector<T> key_mask; // empty = all attendable
};

// DiT block: self-attention over action tokens, cross-attention to condition
// tokens, then MLP; all pre-norm with residuals.
template <typename T>
void register_dit_block(ParamStore<T>& ps, const std::string& name, int64_t d,
                        int64_t hidden, uint64_t seed) {
  register_layer_norm(ps, name + ".ln1", d);
  register_attention(ps, name + ".attn", d, seed);
  register_layer_norm(ps, name + ".ln2", d);
  register_attention(ps, name + ".cross", d, seed);
  register_layer_norm(ps, name + ".ln3", d);
  register_mlp(ps, name + ".mlp", d, hidden, d, seed);
}

template <typename T>
CondKV<T> project_cond(ParamStore<T>& ps, const std::string& name,
                       const Var<T>& cond_tokens, int64_t per_sample,
                       const std::vector<T>& key_mask) {
  CondKV<T> kv;
  kv.k = linear(ps, name + ".cross.k", cond_tokens);
  kv.v = linear(ps, name + ".cross.v", cond_tokens);
  kv.per_sample = per_sample;
  kv.key_mask = key_mask;
  return kv;
}

template <typename T>
Var<T> dit_block(ParamStore<T>& ps, const std::string& name, const Var<T>& x,
                 int heads, int64_t tokens_per_sample, const CondKV<T>& kv) {
  Var<T> h = apply_layer_norm(ps, name + ".ln1", x);
  Var<T> q = linear(ps, name + ".attn.q", h);
  Var<T> k = linear(ps, name + ".attn.k", h);
  Var<T> v = linear(ps, name + ".attn.v", h);
  Var<T> att = attention(q, k, v, heads, tokens_per_sample, tokens_per_sample,
                         static_cast<const std::vector<T>*>(nullptr));
  Var<T> x1 = add(x, linear(ps, name + ".attn.o", att));

  Var<T> h2 = apply_layer_norm(ps, name + ".ln2", x1);
  Var<T> q2 = linear(ps, name + ".cross.q", h2);
  Var<T> catt = attention(q2, kv.k, kv.v, heads, tokens_per_sample,
                          kv.per_sample,
                          kv.key_mask.empty() ? nullptr : &kv.key_mask);
  Var<T> x2 = add(x1, linear(ps, name + ".cross.o", catt));

  Var<T> h3 = apply_layer_norm(ps, name + ".ln3", x2);
  return add(x2, mlp(ps, name + ".mlp", h3));
}

// Registers an embedding table initialized at N(0, 0.02^2).
template <typename T>
void register_embedding(ParamStore<T>& ps, const std::string& name,
                        int64_t rows, int64_t d, uint64_t seed) {
  ps.add(name, Shape{rows, d}, true);
  init_normal(ps, name, seed, 0.02);
}

}  // namespace nn
}  // namespace acdit
