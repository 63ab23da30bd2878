// Perception-aware fusion: pools each visual stream and the language stream,
// projects them into a shared space, scores the visual streams against
// language by cosine similarity, softmax-normalizes the scores into
// importance weights, and reweights the visual tokens into F_v.
//
// Stream order everywhere: (exterior, left wrist, right wrist, point cloud).
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "acdit/nn.hpp"

namespace acdit {

inline constexpr double kCosineEps = 1e-8;

template <typename T>
void register_fusion(ParamStore<T>& ps, const ModelConfig& cfg) {
  nn::register_mlp(ps, "fusion.proj2d", cfg.d, cfg.d, cfg.d_s, cfg.init_seed);
  nn::register_mlp(ps, "fusion.proj3d", cfg.d, cfg.d, cfg.d_s, cfg.init_seed);
  nn::register_mlp(ps, "fusion.projl", cfg.d, cfg.d, cfg.d_s, cfg.init_seed);
}

// Pooled, projected stream vectors in the shared space.
template <typename T>
struct SharedSpaceVecs {
  Var<T> views; // (B*3) x d_s, rows (sample, view)
  Var<T> cloud; // B x d_s
  Var<T> lang;  // B x d_s
};

// Mean-pools each stream per sample and applies the stream's projector. The
// three views share one projector; language pooling skips pad positions.
// img rows are ordered ((sample, step, view), patch); cloud rows
// ((sample, step), group); text rows (sample, position).
template <typename T>
SharedSpaceVecs<T> project_and_pool(ParamStore<T>& ps, const ModelConfig& cfg,
                                    const Var<T>& img, const Var<T>& cloud,
                                    const Var<T>& text,
                                    const std::vector<T>& text_mask,
                                    int64_t B) {
  const int64_t P = cfg.view_tokens(), G = cfg.cloud_groups;
  const int64_t S = cfg.hist_steps();
  if (img.rows() != B * S * 3 * P || cloud.rows() != B * S * G ||
      text.rows() != B * cfg.text_len)
    throw ShapeError("project_and_pool: stream row counts mismatch");

  std::vector<int64_t> vseg(static_cast<size_t>(img.rows()));
  for (int64_t r = 0; r < img.rows(); ++r) {
    int64_t seq = r / P;          // (sample*S + step)*3 + view
    int64_t v = seq % 3;
    int64_t b = seq / (3 * S);
    vseg[static_cast<size_t>(r)] = b * 3 + v;
  }
  Var<T> pooled_views = segment_mean_rows(img, std::move(vseg), B * 3);

  std::vector<int64_t> cseg(static_cast<size_t>(cloud.rows()));
  for (int64_t r = 0; r < cloud.rows(); ++r)
    cseg[static_cast<size_t>(r)] = r / (S * G);
  Var<T> pooled_cloud = segment_mean_rows(cloud, std::move(cseg), B);

  std::vector<int64_t> tseg(static_cast<size_t>(text.rows()));
  for (int64_t r = 0; r < text.rows(); ++r)
    tseg[static_cast<size_t>(r)] =
        text_mask[static_cast<size_t>(r)] != T(0) ? r / cfg.text_len : -1;
  Var<T> pooled_lang = segment_mean_rows(text, std::move(tseg), B);

  SharedSpaceVecs<T> out;
  out.views = nn::mlp(ps, "fusion.proj2d", pooled_views);
  out.cloud = nn::mlp(ps, "fusion.proj3d", pooled_cloud);
  out.lang = nn::mlp(ps, "fusion.projl", pooled_lang);
  return out;
}

// Row-wise cosine similarity with epsilon-guarded norms.
template <typename T>
Var<T> cosine_rows(const Var<T>& u, const Var<T>& l) {
  Var<T> nu = clamp_min(sqrt_elem(rowwise_dot(u, u)), kCosineEps);
  Var<T> nl = clamp_min(sqrt_elem(rowwise_dot(l, l)), kCosineEps);
  return div(rowwise_dot(u, l), mul(nu, nl));
}

// Scores each visual stream against language: B x 4 (wf, wl, wr, wp order).
template <typename T>
Var<T> similarity_scores(const SharedSpaceVecs<T>& vecs) {
  int64_t B = vecs.cloud.rows();
  std::vector<Var<T>> cols;
  for (int64_t v = 0; v < 3; ++v) {
    std::vector<int64_t> idx(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) idx[static_cast<size_t>(b)] = b * 3 + v;
    cols.push_back(cosine_rows(gather_rows(vecs.views, idx), vecs.lang));
  }
  cols.push_back(cosine_rows(vecs.cloud, vecs.lang));
  return concat_cols(cols);
}

// Softmax over scores / temperature; each row lands on the 4-simplex.
template <typename T>
Var<T> normalize_weights(const Var<T>& scores, double temperature) {
  if (!(temperature > 0))
    throw ConfigError("normalize_weights: temperature must be positive");
  return softmax_rows(scale(scores, 1.0 / temperature));
}

// Reweighted visual tokens, per-sample order [exterior, left, right, cloud].
template <typename T>
struct FusedVisual {
  Var<T> tokens;          // (B * per_sample) x d
  int64_t per_sample = 0; // S*3*P + S*G
};

// Scales each stream's tokens by 4*w_stream (uniform weights = identity) and
// concatenates the streams per sample. raw_weights skips the 4x convention;
// apply_weights=false emits the plain concatenation (fusion disabled).
template <typename T>
FusedVisual<T> reweight(const ModelConfig& cfg, const Var<T>& img,
                        const Var<T>& cloud, const Var<T>& weights, int64_t B,
                        bool apply_weights) {
  const int64_t P = cfg.view_tokens(), G = cfg.cloud_groups;
  const int64_t S = cfg.hist_steps();
  const int64_t per_view = S * P, per_cloud = S * G;
  FusedVisual<T> out;
  out.per_sample = 3 * per_view + per_cloud;
  Var<T> big = concat_rows(std::vector<Var<T>>{img, cloud});
  std::vector<int64_t> idx, widx;
  idx.reserve(static_cast<size_t>(B * out.per_sample));
  widx.reserve(idx.capacity());
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t v = 0; v < 3; ++v)
      for (int64_t s = 0; s < S; ++s)
        for (int64_t p = 0; p < P; ++p) {
          idx.push_back(((b * S + s) * 3 + v) * P + p);
          widx.push_back(b * 4 + v);
        }
    for (int64_t s = 0; s < S; ++s)
      for (int64_t g = 0; g < G; ++g) {
        idx.push_back(img.rows() + (b * S + s) * G + g);
        widx.push_back(b * 4 + 3);
      }
  }
  if (apply_weights)
    out.tokens = gather_scale_rows(big, weights, std::move(idx),
                                   std::move(widx), cfg.raw_weights ? 1.0 : 4.0);
  else
    out.tokens = gather_rows(big, std::move(idx));
  return out;
}

}  // namespace acdit
