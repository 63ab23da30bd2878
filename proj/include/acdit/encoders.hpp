// Modality encoders: patch-based image encoder with a shared transformer
// trunk, a point-cloud tokenizer built on deterministic farthest-point
// grouping plus virtual-plane positional embeddings, a pad-masked text
// encoder, and the proprioceptive state embedding.
//
// Parameter path prefixes: enc.img., enc.cloud., enc.adapter., enc.text.,
// enc.state., enc.hist.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "acdit/nn.hpp"

namespace acdit {

// ---------------------------------------------------------------------------
// Parameter registration

template <typename T>
void register_encoders(ParamStore<T>& ps, const ModelConfig& cfg) {
  const uint64_t seed = cfg.init_seed;
  const int d = cfg.d;
  nn::register_linear(ps, "enc.img.patch", cfg.patch_dim(), d, seed);
  nn::register_embedding(ps, "enc.img.pos", cfg.view_tokens(), d, seed);
  nn::register_embedding(ps, "enc.img.view", 3, d, seed);
  for (int i = 0; i < cfg.trunk_blocks; ++i)
    nn::register_encoder_block(ps, "enc.img.trunk.b" + std::to_string(i), d,
                               cfg.mlp_hidden(), seed);
  nn::register_mlp(ps, "enc.cloud.point", 4, d, d, seed);
  const int64_t cells = static_cast<int64_t>(cfg.plane_cells) * cfg.plane_cells;
  for (int p = 0; p < 3; ++p)
    nn::register_embedding(ps, "enc.cloud.plane" + std::to_string(p), cells, d,
                           seed);
  nn::register_embedding(ps, "enc.cloud.null", 1, d, seed);
  nn::register_linear(ps, "enc.adapter", d, d, seed);
  nn::register_embedding(ps, "enc.text.vocab", cfg.vocab, d, seed);
  nn::register_embedding(ps, "enc.text.pos", cfg.text_len, d, seed);
  for (int i = 0; i < cfg.text_blocks; ++i)
    nn::register_encoder_block(ps, "enc.text.b" + std::to_string(i), d,
                               cfg.mlp_hidden(), seed);
  nn::register_mlp(ps, "enc.state", cfg.state_dim + 1, d, d, seed);
  nn::register_embedding(ps, "enc.hist.step", cfg.hist_steps(), d, seed);
}

// ---------------------------------------------------------------------------
// Shared trunk

template <typename T>
Var<T> run_trunk(ParamStore<T>& ps, const ModelConfig& cfg, Var<T> x,
                 int64_t seq_len) {
  for (int i = 0; i < cfg.trunk_blocks; ++i)
    x = nn::encoder_block(ps, "enc.img.trunk.b" + std::to_string(i), x,
                          cfg.heads, seq_len);
  return x;
}

// ---------------------------------------------------------------------------
// Image path

// Flattens one view grid (3 x n x n, channel-major) into rows of
// non-overlapping patch vectors, patch-grid row-major, channel-major within
// a patch.
inline void fill_patch_rows(const ModelConfig& cfg, const float* grid,
                            double* out) {
  const int n = cfg.image_size, p = cfg.patch, g = n / p;
  const int pd = cfg.patch_dim();
  for (int pi = 0; pi < g; ++pi)
    for (int pj = 0; pj < g; ++pj) {
      double* row = out + (pi * g + pj) * pd;
      int w = 0;
      for (int c = 0; c < 3; ++c)
        for (int i = 0; i < p; ++i)
          for (int j = 0; j < p; ++j)
            row[w++] = grid[c * n * n + (pi * p + i) * n + (pj * p + j)];
    }
}

// Encodes a batch of independent view grids; row order (grid, patch).
template <typename T>
Var<T> encode_images_batch(ParamStore<T>& ps, const ModelConfig& cfg,
                           const std::vector<const float*>& grids,
                           const std::vector<int>& view_ids) {
  if (grids.size() != view_ids.size())
    throw ShapeError("encode_images_batch: grids/view_ids size mismatch");
  const int64_t P = cfg.view_tokens();
  const int64_t n = static_cast<int64_t>(grids.size());
  std::vector<double> rows(static_cast<size_t>(n * P * cfg.patch_dim()));
  for (int64_t i = 0; i < n; ++i)
    fill_patch_rows(cfg, grids[static_cast<size_t>(i)],
                    rows.data() + i * P * cfg.patch_dim());
  Var<T> x = Var<T>::leaf(n * P, cfg.patch_dim());
  for (int64_t i = 0; i < x.numel(); ++i)
    x.data()[i] = static_cast<T>(rows[static_cast<size_t>(i)]);
  x = nn::linear(ps, "enc.img.patch", x);
  std::vector<int64_t> pos_idx(static_cast<size_t>(n * P));
  std::vector<int64_t> view_idx(static_cast<size_t>(n * P));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t k = 0; k < P; ++k) {
      pos_idx[static_cast<size_t>(i * P + k)] = k;
      view_idx[static_cast<size_t>(i * P + k)] =
          view_ids[static_cast<size_t>(i)];
      if (view_ids[static_cast<size_t>(i)] < 0 ||
          view_ids[static_cast<size_t>(i)] > 2)
        throw ShapeError("encode_images_batch: view id out of range");
    }
  x = add_rows_by_index(x, ps.at("enc.img.pos"), std::move(pos_idx));
  x = add_rows_by_index(x, ps.at("enc.img.view"), std::move(view_idx));
  return run_trunk(ps, cfg, x, P);
}

// Single-view convenience wrapper: 3 x n x n grid -> T_v x d tokens.
template <typename T>
Var<T> encode_image(ParamStore<T>& ps, const ModelConfig& cfg,
                    const float* grid, int view_id) {
  return encode_images_batch(ps, cfg, std::vector<const float*>{grid},
                             std::vector<int>{view_id});
}

// ---------------------------------------------------------------------------
// Point-cloud tokenizer

// Maps a coordinate to a grid cell index along one axis, clamping
// out-of-range values to the border cells.
inline int plane_axis_cell(double v, double lo, double hi, int cells) {
  double t = (v - lo) / (hi - lo);
  int c = static_cast<int>(std::floor(t * cells));
  if (c < 0) c = 0;
  if (c >= cells) c = cells - 1;
  return c;
}

// Cell index of a 3D point on one virtual plane (0: xy, 1: xz, 2: yz);
// row-major over (first axis, second axis).
inline int plane_cell(const ModelConfig& cfg, int plane, double x, double y,
                      double z) {
  int a, b;
  switch (plane) {
    case 0:
      a = plane_axis_cell(x, cfg.bx0, cfg.bx1, cfg.plane_cells);
      b = plane_axis_cell(y, cfg.by0, cfg.by1, cfg.plane_cells);
      break;
    case 1:
      a = plane_axis_cell(x, cfg.bx0, cfg.bx1, cfg.plane_cells);
      b = plane_axis_cell(z, cfg.bz0, cfg.bz1, cfg.plane_cells);
      break;
    case 2:
      a = plane_axis_cell(y, cfg.by0, cfg.by1, cfg.plane_cells);
      b = plane_axis_cell(z, cfg.bz0, cfg.bz1, cfg.plane_cells);
      break;
    default:
      throw ShapeError("plane_cell: plane out of range");
  }
  return a * cfg.plane_cells + b;
}

// Deterministic farthest-point grouping of a cloud into cfg.cloud_groups
// groups. Pad points (intensity < 0) are excluded. Group centers start at the
// lexicographically smallest point; each subsequent center maximizes the
// minimum distance to the chosen set (ties -> lowest point index). Every
// non-pad point joins its nearest center (ties -> lowest group index).
struct CloudGroups {
  std::vector<int64_t> point_seg;              // per point: group or -1 (pad)
  std::vector<std::array<double, 3>> centroid; // per group (empty -> zeros)
  std::vector<std::array<int, 3>> cells;       // per group per plane, -1 empty
  std::vector<char> empty;                     // per group
};

inline CloudGroups group_cloud(const ModelConfig& cfg, const float* cloud,
                               int64_t n) {
  const int G = cfg.cloud_groups;
  CloudGroups out;
  out.point_seg.assign(static_cast<size_t>(n), -1);
  out.centroid.assign(static_cast<size_t>(G), {0.0, 0.0, 0.0});
  out.cells.assign(static_cast<size_t>(G), {-1, -1, -1});
  out.empty.assign(static_cast<size_t>(G), 1);

  std::vector<int64_t> live;
  for (int64_t i = 0; i < n; ++i)
    if (cloud[i * 4 + 3] >= 0.0f) live.push_back(i);
  if (live.empty()) return out;

  auto lex_less = [&](int64_t a, int64_t b) {
    for (int c = 0; c < 4; ++c) {
      if (cloud[a * 4 + c] < cloud[b * 4 + c]) return true;
      if (cloud[a * 4 + c] > cloud[b * 4 + c]) return false;
    }
    return a < b;
  };
  int64_t first = live[0];
  for (int64_t i : live)
    if (lex_less(i, first)) first = i;

  auto dist2 = [&](int64_t a, int64_t b) {
    double s = 0;
    for (int c = 0; c < 3; ++c) {
      double dd = static_cast<double>(cloud[a * 4 + c]) - cloud[b * 4 + c];
      s += dd * dd;
    }
    return s;
  };

  std::vector<int64_t> centers{first};
  std::vector<double> mind(live.size(), std::numeric_limits<double>::max());
  const int ncenters =
      static_cast<int>(std::min<int64_t>(G, static_cast<int64_t>(live.size())));
  while (static_cast<int>(centers.size()) < ncenters) {
    int64_t last = centers.back();
    int64_t best = -1;
    double bestd = -1.0;
    for (size_t j = 0; j < live.size(); ++j) {
      mind[j] = std::min(mind[j], dist2(live[j], last));
      if (mind[j] > bestd) {
        bestd = mind[j];
        best = live[j];
      }
    }
    centers.push_back(best);
  }

  std::vector<int64_t> count(static_cast<size_t>(G), 0);
  for (int64_t i : live) {
    int g = 0;
    double bd = std::numeric_limits<double>::max();
    for (size_t ci = 0; ci < centers.size(); ++ci) {
      double dd = dist2(i, centers[ci]);
      if (dd < bd) {
        bd = dd;
        g = static_cast<int>(ci);
      }
    }
    out.point_seg[static_cast<size_t>(i)] = g;
    ++count[static_cast<size_t>(g)];
    for (int c = 0; c < 3; ++c)
      out.centroid[static_cast<size_t>(g)][static_cast<size_t>(c)] +=
          cloud[i * 4 + c];
  }
  for (int g = 0; g < G; ++g) {
    if (count[static_cast<size_t>(g)] == 0) continue;
    out.empty[static_cast<size_t>(g)] = 0;
    for (int c = 0; c < 3; ++c)
      out.centroid[static_cast<size_t>(g)][static_cast<size_t>(c)] /=
          static_cast<double>(count[static_cast<size_t>(g)]);
    for (int p = 0; p < 3; ++p)
      out.cells[static_cast<size_t>(g)][static_cast<size_t>(p)] = plane_cell(
          cfg, p, out.centroid[static_cast<size_t>(g)][0],
          out.centroid[static_cast<size_t>(g)][1],
          out.centroid[static_cast<size_t>(g)][2]);
  }
  return out;
}

// Raw 3D tokens for a batch of clouds; row order (cloud, group). Group
// features are the mean of a per-point MLP over member points plus the sum of
// the virtual-plane embeddings at the group centroid's cells; empty groups
// (including every group of an all-pad cloud) hold the learned null
// embedding instead.
template <typename T>
Var<T> tokenize_clouds_batch(ParamStore<T>& ps, const ModelConfig& cfg,
                             const std::vector<const float*>& clouds) {
  const int64_t N = cfg.cloud_points, G = cfg.cloud_groups;
  const int64_t B = static_cast<int64_t>(clouds.size());
  Var<T> pts = Var<T>::leaf(B * N, 4);
  std::vector<int64_t> seg(static_cast<size_t>(B * N), -1);
  std::vector<int64_t> cell_idx[3];
  for (auto& v : cell_idx) v.assign(static_cast<size_t>(B * G), -1);
  std::vector<int64_t> null_idx(static_cast<size_t>(B * G), -1);
  for (int64_t b = 0; b < B; ++b) {
    const float* cl = clouds[static_cast<size_t>(b)];
    for (int64_t i = 0; i < N * 4; ++i)
      pts.data()[b * N * 4 + i] = static_cast<T>(cl[i]);
    CloudGroups cg = group_cloud(cfg, cl, N);
    for (int64_t i = 0; i < N; ++i)
      if (cg.point_seg[static_cast<size_t>(i)] >= 0)
        seg[static_cast<size_t>(b * N + i)] =
            b * G + cg.point_seg[static_cast<size_t>(i)];
    for (int64_t g = 0; g < G; ++g) {
      if (cg.empty[static_cast<size_t>(g)]) {
        null_idx[static_cast<size_t>(b * G + g)] = 0;
      } else {
        for (int p = 0; p < 3; ++p)
          cell_idx[p][static_cast<size_t>(b * G + g)] =
              cg.cells[static_cast<size_t>(g)][static_cast<size_t>(p)];
      }
    }
  }
  Var<T> feat = nn::mlp(ps, "enc.cloud.point", pts);
  Var<T> tok = segment_mean_rows(feat, std::move(seg), B * G);
  for (int p = 0; p < 3; ++p)
    tok = add_rows_by_index(tok, ps.at("enc.cloud.plane" + std::to_string(p)),
                            std::move(cell_idx[p]));
  tok = add_rows_by_index(tok, ps.at("enc.cloud.null"), std::move(null_idx));
  return tok;
}

template <typename T>
Var<T> tokenize_cloud(ParamStore<T>& ps, const ModelConfig& cfg,
                      const float* cloud) {
  return tokenize_clouds_batch(ps, cfg, std::vector<const float*>{cloud});
}

// Raw 3D tokens -> F_3D via the modality adapter and the shared trunk.
template <typename T>
Var<T> encode_clouds_batch(ParamStore<T>& ps, const ModelConfig& cfg,
                           const Var<T>& raw_tokens) {
  Var<T> x = nn::linear(ps, "enc.adapter", raw_tokens);
  return run_trunk(ps, cfg, x, cfg.cloud_groups);
}

template <typename T>
Var<T> encode_cloud(ParamStore<T>& ps, const ModelConfig& cfg,
                    const Var<T>& raw_tokens) {
  if (raw_tokens.rows() != cfg.cloud_groups)
    throw ShapeError("encode_cloud: expected one cloud of raw tokens");
  return encode_clouds_batch(ps, cfg, raw_tokens);
}

// ---------------------------------------------------------------------------
// Text path

// Pads or truncates an instruction to exactly cfg.text_len ids (pad id 0)
// and validates the vocabulary range.
inline std::vector<int64_t> pad_instruction(const ModelConfig& cfg,
                                            const std::vector<int>& ids) {
  std::vector<int64_t> out(static_cast<size_t>(cfg.text_len), 0);
  for (size_t i = 0;
       i < ids.size() && i < static_cast<size_t>(cfg.text_len); ++i) {
    if (ids[i] < 0 || ids[i] >= cfg.vocab)
      throw LookupError("text id out of range: " + std::to_string(ids[i]));
    out[i] = ids[i];
  }
  return out;
}

// Core with an explicit attention mask over key positions (1 = attendable).
// ids are already padded to multiples of cfg.text_len.
template <typename T>
Var<T> encode_text_masked(ParamStore<T>& ps, const ModelConfig& cfg,
                          const std::vector<int64_t>& ids,
                          const std::vector<T>& mask) {
  if (ids.size() != mask.size() ||
      ids.size() % static_cast<size_t>(cfg.text_len) != 0)
    throw ShapeError("encode_text_masked: ids/mask size mismatch");
  for (int64_t id : ids)
    if (id < 0 || id >= cfg.vocab)
      throw LookupError("text id out of range: " + std::to_string(id));
  Var<T> x = gather_rows(ps.at("enc.text.vocab"), ids);
  std::vector<int64_t> pos(ids.size());
  for (size_t i = 0; i < ids.size(); ++i)
    pos[i] = static_cast<int64_t>(i % static_cast<size_t>(cfg.text_len));
  x = add_rows_by_index(x, ps.at("enc.text.pos"), std::move(pos));
  for (int i = 0; i < cfg.text_blocks; ++i)
    x = nn::encoder_block(ps, "enc.text.b" + std::to_string(i), x, cfg.heads,
                          cfg.text_len, mask);
  return x;
}

// Encodes a batch of instructions; pad positions (id 0) are masked from
// attention. Returns tokens plus the non-pad mask used.
template <typename T>
struct TextEncoding {
  Var<T> tokens;       // (B * text_len) x d
  std::vector<T> mask; // non-pad flags per row
};

template <typename T>
TextEncoding<T> encode_text_batch(ParamStore<T>& ps, const ModelConfig& cfg,
                                  const std::vector<std::vector<int>>& batch) {
  std::vector<int64_t> ids;
  ids.reserve(batch.size() * static_cast<size_t>(cfg.text_len));
  for (const auto& instr : batch) {
    auto padded = pad_instruction(cfg, instr);
    ids.insert(ids.end(), padded.begin(), padded.end());
  }
  std::vector<T> mask(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) mask[i] = ids[i] != 0 ? T(1) : T(0);
  TextEncoding<T> out;
  out.tokens = encode_text_masked(ps, cfg, ids, mask);
  out.mask = std::move(mask);
  return out;
}

template <typename T>
Var<T> encode_text(ParamStore<T>& ps, const ModelConfig& cfg,
                   const std::vector<int>& ids) {
  return encode_text_batch(ps, cfg, {ids}).tokens;
}

// ---------------------------------------------------------------------------
// State path

// Encodes a batch of normalized state vectors with their control frequency;
// input rows are [z_norm..., c/30], output one token per row.
template <typename T>
Var<T> embed_states_batch(ParamStore<T>& ps, const ModelConfig& cfg,
                          const std::vector<std::vector<T>>& zs,
                          const std::vector<double>& cs) {
  if (zs.size() != cs.size())
    throw ShapeError("embed_states_batch: z/c count mismatch");
  const int64_t B = static_cast<int64_t>(zs.size());
  Var<T> x = Var<T>::leaf(B, cfg.state_dim + 1);
  for (int64_t b = 0; b < B; ++b) {
    const auto& z = zs[static_cast<size_t>(b)];
    if (static_cast<int>(z.size()) != cfg.state_dim)
      throw ShapeError("embed_states_batch: state dim mismatch");
    double c = cs[static_cast<size_t>(b)];
    if (!(c > 0)) throw ConfigError("embed_states_batch: c must be positive");
    for (int j = 0; j < cfg.state_dim; ++j)
      x.data()[b * (cfg.state_dim + 1) + j] = z[static_cast<size_t>(j)];
    x.data()[b * (cfg.state_dim + 1) + cfg.state_dim] =
        static_cast<T>(c / 30.0);
  }
  return nn::mlp(ps, "enc.state", x);
}

template <typename T>
Var<T> embed_state(ParamStore<T>& ps, const ModelConfig& cfg,
                   const std::vector<T>& z_norm, double c) {
  return embed_states_batch(ps, cfg, {z_norm}, {c});
}

}  // namespace acdit
