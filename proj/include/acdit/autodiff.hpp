#pragma once

// Reverse-mode autodiff over 2-d row-major tensors. Graphs are built by the
// op functions below and freed when the last Var handle drops. Matrix kernels
// go through Eigen. Every op checks its output for NaN/Inf and throws
// NumericError naming the op.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "acdit/array.hpp"
#include "acdit/common.hpp"

namespace acdit {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

namespace detail {

// Allocator for tensor storage with two jobs: default-construct is a no-op
// for scalars (vector::resize skips the zero-fill — op outputs are fully
// overwritten by their kernels), and every block is 64-byte aligned so
// Eigen's vectorized traversals peel identically no matter where the heap
// places a buffer. Without the fixed alignment, SIMD reduction order — and
// therefore rounding — would vary between otherwise identical runs.
template <typename T>
struct DefaultInitAlloc : std::allocator<T> {
  static constexpr std::align_val_t kAlign{64};
  template <typename U>
  struct rebind {
    using other = DefaultInitAlloc<U>;
  };
  T* allocate(size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, size_t n) noexcept {
    ::operator delete(p, n * sizeof(T), kAlign);
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    if constexpr (sizeof...(Args) == 0)
      ::new (static_cast<void*>(p)) U;
    else
      ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

}  // namespace detail

template <typename T>
using ValueBuf = std::vector<T, detail::DefaultInitAlloc<T>>;

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

// RAII guard disabling tape construction (inference paths).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev; }
};

template <typename T>
struct Node {
  ValueBuf<T> value;
  int64_t rows = 0, cols = 0;
  ValueBuf<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  int64_t numel() const { return rows * cols; }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
  EMap<T> vmap() { return EMap<T>(value.data(), rows, cols); }
  EMap<T> gmap() { return EMap<T>(grad.data(), rows, cols); }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Var leaf(int64_t rows, int64_t cols, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->rows = rows;
    n->cols = cols;
    n->value.assign(static_cast<size_t>(rows * cols), T(0));
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  static Var from_array(const Array<T>& a, int64_t rows, int64_t cols) {
    if (shape_numel(a.shape) != rows * cols)
      throw ShapeError("from_array: numel mismatch");
    Var v = leaf(rows, cols, false);
    v.n_->value.assign(a.values.begin(), a.values.end());
    return v;
  }

  bool defined() const { return n_ != nullptr; }
  int64_t rows() const { return n_->rows; }
  int64_t cols() const { return n_->cols; }
  int64_t numel() const { return n_->numel(); }
  T* data() { return n_->value.data(); }
  const T* data() const { return n_->value.data(); }
  T item() const {
    if (n_->numel() != 1) throw ShapeError("item() on non-scalar");
    return n_->value[0];
  }
  T at(int64_t r, int64_t c) const { return n_->value[r * cols() + c]; }
  bool requires_grad() const { return n_->requires_grad; }
  Node<T>* node() const { return n_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return n_; }

  Array<T> to_array() const {
    return Array<T>({rows(), cols()},
                    std::vector<T>(n_->value.begin(), n_->value.end()));
  }

 private:
  std::shared_ptr<Node<T>> n_;
};

namespace detail {

template <typename T>
Var<T> make_node(const char* op, int64_t rows, int64_t cols,
                 std::initializer_list<Var<T>> parents) {
  auto n = std::make_shared<Node<T>>();
  n->rows = rows;
  n->cols = cols;
  n->value.resize(static_cast<size_t>(rows * cols));  // uninitialized; ops
                                                      // overwrite in full
  n->op = op;
  bool req = false;
  if (grad_mode_flag()) {
    for (const auto& p : parents) req = req || p.requires_grad();
  }
  n->requires_grad = req;
  if (req) {
    for (const auto& p : parents) n->parents.push_back(p.ptr());
  }
  return Var<T>(std::move(n));
}

template <typename T>
void finish(Var<T>& v) {
  Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> m(v.data(), v.numel());
  if (m.allFinite()) return;
  // slow path: locate the offending element for the error message
  check_finite(v.data(), static_cast<size_t>(v.numel()), v.node()->op);
  throw NumericError(std::string("non-finite value produced by op '") +
                     v.node()->op + "'");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise / broadcast ops

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("add: shape mismatch");
  Var<T> out = detail::make_node<T>("add", a.rows(), a.cols(), {a, b});
  EMap<T>(out.data(), out.rows(), out.cols()) =
      ECMap<T>(a.data(), a.rows(), a.cols()) +
      ECMap<T>(b.data(), b.rows(), b.cols());
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      for (int k = 0; k < 2; ++k) {
        auto& p = self.parents[k];
        if (!p->requires_grad) continue;
        p->ensure_grad();
        p->gmap() += self.gmap();
      }
    };
  }
  return out;
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("sub: shape mismatch");
  Var<T> out = detail::make_node<T>("sub", a.rows(), a.cols(), {a, b});
  EMap<T>(out.data(), out.rows(), out.cols()) =
      ECMap<T>(a.data(), a.rows(), a.cols()) -
      ECMap<T>(b.data(), b.rows(), b.cols());
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      if (self.parents[0]->requires_grad) {
        self.parents[0]->ensure_grad();
        self.parents[0]->gmap() += self.gmap();
      }
      if (self.parents[1]->requires_grad) {
        self.parents[1]->ensure_grad();
        self.parents[1]->gmap() -= self.gmap();
      }
    };
  }
  return out;
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("mul: shape mismatch");
  Var<T> out = detail::make_node<T>("mul", a.rows(), a.cols(), {a, b});
  EMap<T>(out.data(), out.rows(), out.cols()) =
      ECMap<T>(a.data(), a.rows(), a.cols()).cwiseProduct(
          ECMap<T>(b.data(), b.rows(), b.cols()));
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      auto& a = self.parents[0];
      auto& b = self.parents[1];
      if (a->requires_grad) {
        a->ensure_grad();
        a->gmap() += self.gmap().cwiseProduct(b->vmap());
      }
      if (b->requires_grad) {
        b->ensure_grad();
        b->gmap() += self.gmap().cwiseProduct(a->vmap());
      }
    };
  }
  return out;
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("div: shape mismatch");
  Var<T> out = detail::make_node<T>("div", a.rows(), a.cols(), {a, b});
  EMap<T>(out.data(), out.rows(), out.cols()) =
      ECMap<T>(a.data(), a.rows(), a.cols()).cwiseQuotient(
          ECMap<T>(b.data(), b.rows(), b.cols()));
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      auto& a = self.parents[0];
      auto& b = self.parents[1];
      if (a->requires_grad) {
        a->ensure_grad();
        a->gmap() += self.gmap().cwiseQuotient(b->vmap());
      }
      if (b->requires_grad) {
        b->ensure_grad();
        b->gmap() -= self.gmap()
                         .cwiseProduct(self.vmap())
                         .cwiseQuotient(b->vmap());
      }
    };
  }
  return out;
}

template <typename T>
Var<T> scale(const Var<T>& a, double c) {
  Var<T> out = detail::make_node<T>("scale", a.rows(), a.cols(), {a});
  EMap<T>(out.data(), out.rows(), out.cols()) =
      ECMap<T>(a.data(), a.rows(), a.cols()) * static_cast<T>(c);
  detail::finish(out);
  if (out.requires_grad()) {
    T cc = static_cast<T>(c);
    out.node()->backward = [cc](Node<T>& self) {
      auto& a = self.parents[0];
      a->ensure_grad();
      a->gmap() += self.gmap() * cc;
    };
  }
  return out;
}

template <typename T>
Var<T> add_rowvec(const Var<T>& x, const Var<T>& v) {
  if (v.rows() != 1 || v.cols() != x.cols())
    throw ShapeError("add_rowvec: v must be [1 x cols]");
  Var<T> out = detail::make_node<T>("add_rowvec", x.rows(), x.cols(), {x, v});
  EMap<T>(out.data(), out.rows(), out.cols()) =
      ECMap<T>(x.data(), x.rows(), x.cols()).rowwise() +
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(v.data(), v.cols());
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      auto& x = self.parents[0];
      auto& v = self.parents[1];
      if (x->requires_grad) {
        x->ensure_grad();
        x->gmap() += self.gmap();
      }
      if (v->requires_grad) {
        v->ensure_grad();
        v->gmap() += self.gmap().colwise().sum();
      }
    };
  }
  return out;
}

template <typename T>
Var<T> sqrt_elem(const Var<T>& a) {
  Var<T> out = detail::make_node<T>("sqrt", a.rows(), a.cols(), {a});
  EMap<T>(out.data(), out.rows(), out.cols()) =
      ECMap<T>(a.data(), a.rows(), a.cols()).cwiseSqrt();
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      auto& a = self.parents[0];
      a->ensure_grad();
      a->gmap() +=
          self.gmap().cwiseQuotient((self.vmap() * T(2)).cwiseMax(T(1e-300)));
    };
  }
  return out;
}

template <typename T>
Var<T> clamp_min(const Var<T>& a, double c) {
  Var<T> out = detail::make_node<T>("clamp_min", a.rows(), a.cols(), {a});
  EMap<T>(out.data(), out.rows(), out.cols()) =
      ECMap<T>(a.data(), a.rows(), a.cols()).cwiseMax(static_cast<T>(c));
  detail::finish(out);
  if (out.requires_grad()) {
    T cc = static_cast<T>(c);
    out.node()->backward = [cc](Node<T>& self) {
      auto& a = self.parents[0];
      a->ensure_grad();
      const T* av = a->value.data();
      const T* g = self.grad.data();
      T* ag = a->grad.data();
      for (int64_t i = 0; i < self.numel(); ++i)
        if (av[i] >= cc) ag[i] += g[i];
    };
  }
  return out;
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  Var<T> out = detail::make_node<T>("gelu", a.rows(), a.cols(), {a});
  const T* av = a.data();
  T* ov = out.data();
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  if (out.requires_grad()) {
    // the derivative reuses erf/exp already evaluated here, leaving the
    // backward pass a pure fused multiply-add
    auto deriv =
        std::make_shared<ValueBuf<T>>(static_cast<size_t>(a.numel()));
    T* dv = deriv->data();
    for (int64_t i = 0; i < a.numel(); ++i) {
      double x = static_cast<double>(av[i]);
      double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      ov[i] = static_cast<T>(x * phi);
      dv[i] = static_cast<T>(phi + x * pdf);
    }
    detail::finish(out);
    out.node()->backward = [deriv](Node<T>& self) {
      auto& a = self.parents[0];
      a->ensure_grad();
      int64_t n = self.numel();
      Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> ag(a->grad.data(), n);
      Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> g(self.grad.data(),
                                                             n);
      Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> d(deriv->data(), n);
      ag += g * d;
    };
  } else {
    for (int64_t i = 0; i < a.numel(); ++i) {
      double x = static_cast<double>(av[i]);
      ov[i] = static_cast<T>(x * 0.5 * (1.0 + std::erf(x * inv_sqrt2)));
    }
    detail::finish(out);
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool ta = false,
              bool tb = false) {
  int64_t m = ta ? a.cols() : a.rows();
  int64_t ka = ta ? a.rows() : a.cols();
  int64_t kb = tb ? b.cols() : b.rows();
  int64_t n = tb ? b.rows() : b.cols();
  if (ka != kb) throw ShapeError("matmul: inner dimension mismatch");
  Var<T> out = detail::make_node<T>("matmul", m, n, {a, b});
  ECMap<T> am(a.data(), a.rows(), a.cols());
  ECMap<T> bm(b.data(), b.rows(), b.cols());
  EMap<T> om(out.data(), m, n);
  if (!ta && !tb)
    om.noalias() = am * bm;
  else if (ta && !tb)
    om.noalias() = am.transpose() * bm;
  else if (!ta && tb)
    om.noalias() = am * bm.transpose();
  else
    om.noalias() = am.transpose() * bm.transpose();
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [ta, tb](Node<T>& self) {
      auto& a = self.parents[0];
      auto& b = self.parents[1];
      auto g = self.gmap();
      if (a->requires_grad) {
        a->ensure_grad();
        auto ag = a->gmap();
        auto bv = b->vmap();
        // dA' = g * B'^T with A' = op(A)
        if (!ta && !tb)
          ag.noalias() += g * bv.transpose();
        else if (!ta && tb)
          ag.noalias() += g * bv;
        else if (ta && !tb)
          ag.noalias() += bv * g.transpose();
        else
          ag.noalias() += bv.transpose() * g.transpose();
      }
      if (b->requires_grad) {
        b->ensure_grad();
        auto bg = b->gmap();
        auto av = a->vmap();
        // dB' = A'^T * g
        if (!ta && !tb)
          bg.noalias() += av.transpose() * g;
        else if (ta && !tb)
          bg.noalias() += av * g;
        else if (!ta && tb)
          bg.noalias() += g.transpose() * av;
        else
          bg.noalias() += g.transpose() * av.transpose();
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// row reindexing ops

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<int64_t> idx) {
  for (int64_t i : idx)
    if (i < 0 || i >= x.rows()) throw ShapeError("gather_rows: index out of range");
  Var<T> out = detail::make_node<T>("gather_rows",
                                    static_cast<int64_t>(idx.size()), x.cols(),
                                    {x});
  int64_t c = x.cols();
  for (size_t r = 0; r < idx.size(); ++r)
    std::memcpy(out.data() + r * c, x.data() + idx[r] * c, sizeof(T) * c);
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [idx = std::move(idx)](Node<T>& self) {
      auto& x = self.parents[0];
      x->ensure_grad();
      int64_t c = self.cols;
      const T* g = self.grad.data();
      T* xg = x->grad.data();
      for (size_t r = 0; r < idx.size(); ++r) {
        T* dst = xg + idx[r] * c;
        const T* src = g + r * c;
        for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
      }
    };
  }
  return out;
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty input");
  int64_t c = parts[0].cols();
  int64_t r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows: column mismatch");
    r += p.rows();
  }
  auto n = std::make_shared<Node<T>>();
  n->rows = r;
  n->cols = c;
  n->value.resize(static_cast<size_t>(r * c));
  n->op = "concat_rows";
  bool req = false;
  if (grad_mode_flag())
    for (const auto& p : parts) req = req || p.requires_grad();
  n->requires_grad = req;
  if (req)
    for (const auto& p : parts) n->parents.push_back(p.ptr());
  Var<T> out(std::move(n));
  int64_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(out.data() + off * c, p.data(), sizeof(T) * p.numel());
    off += p.rows();
  }
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      int64_t off = 0;
      for (auto& p : self.parents) {
        if (p->requires_grad) {
          p->ensure_grad();
          p->gmap() += EMap<T>(self.grad.data() + off * self.cols, p->rows,
                               self.cols);
        }
        off += p->rows;
      }
    };
  }
  return out;
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty input");
  int64_t r = parts[0].rows();
  int64_t c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw ShapeError("concat_cols: row mismatch");
    c += p.cols();
  }
  auto n = std::make_shared<Node<T>>();
  n->rows = r;
  n->cols = c;
  n->value.resize(static_cast<size_t>(r * c));
  n->op = "concat_cols";
  bool req = false;
  if (grad_mode_flag())
    for (const auto& p : parts) req = req || p.requires_grad();
  n->requires_grad = req;
  if (req)
    for (const auto& p : parts) n->parents.push_back(p.ptr());
  Var<T> out(std::move(n));
  int64_t off = 0;
  for (const auto& p : parts) {
    for (int64_t i = 0; i < r; ++i)
      std::memcpy(out.data() + i * c + off, p.data() + i * p.cols(),
                  sizeof(T) * p.cols());
    off += p.cols();
  }
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      int64_t off = 0;
      for (auto& p : self.parents) {
        if (p->requires_grad) {
          p->ensure_grad();
          for (int64_t i = 0; i < self.rows; ++i)
            for (int64_t j = 0; j < p->cols; ++j)
              p->grad[i * p->cols + j] += self.grad[i * self.cols + off + j];
        }
        off += p->cols;
      }
    };
  }
  return out;
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, int64_t r0, int64_t nrows) {
  if (r0 < 0 || r0 + nrows > x.rows()) throw ShapeError("slice_rows: out of range");
  Var<T> out = detail::make_node<T>("slice_rows", nrows, x.cols(), {x});
  std::memcpy(out.data(), x.data() + r0 * x.cols(), sizeof(T) * out.numel());
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [r0](Node<T>& self) {
      auto& x = self.parents[0];
      x->ensure_grad();
      EMap<T>(x->grad.data() + r0 * self.cols, self.rows, self.cols) +=
          self.gmap();
    };
  }
  return out;
}

// rows with seg < 0 are dropped; empty segments yield a zero row
template <typename T>
Var<T> segment_mean_rows(const Var<T>& x, std::vector<int64_t> seg,
                         int64_t nseg) {
  if (static_cast<int64_t>(seg.size()) != x.rows())
    throw ShapeError("segment_mean_rows: seg size mismatch");
  Var<T> out = detail::make_node<T>("segment_mean_rows", nseg, x.cols(), {x});
  std::fill_n(out.data(), out.numel(), T(0));  // accumulated into below
  std::vector<int64_t> count(static_cast<size_t>(nseg), 0);
  int64_t c = x.cols();
  for (int64_t r = 0; r < x.rows(); ++r) {
    int64_t s = seg[r];
    if (s < 0) continue;
    if (s >= nseg) throw ShapeError("segment_mean_rows: segment out of range");
    ++count[s];
    const T* src = x.data() + r * c;
    T* dst = out.data() + s * c;
    for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
  }
  for (int64_t s = 0; s < nseg; ++s) {
    if (count[s] == 0) continue;
    T inv = T(1) / static_cast<T>(count[s]);
    T* dst = out.data() + s * c;
    for (int64_t j = 0; j < c; ++j) dst[j] *= inv;
  }
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [seg = std::move(seg),
                            count = std::move(count)](Node<T>& self) {
      auto& x = self.parents[0];
      x->ensure_grad();
      int64_t c = self.cols;
      const T* g = self.grad.data();
      T* xg = x->grad.data();
      for (size_t r = 0; r < seg.size(); ++r) {
        int64_t s = seg[r];
        if (s < 0) continue;
        T inv = T(1) / static_cast<T>(count[s]);
        const T* src = g + s * c;
        T* dst = xg + r * c;
        for (int64_t j = 0; j < c; ++j) dst[j] += src[j] * inv;
      }
    };
  }
  return out;
}

// out = x + table[idx[r], :] per row; idx[r] < 0 leaves the row unchanged
template <typename T>
Var<T> add_rows_by_index(const Var<T>& x, const Var<T>& table,
                         std::vector<int64_t> idx) {
  if (static_cast<int64_t>(idx.size()) != x.rows())
    throw ShapeError("add_rows_by_index: idx size mismatch");
  if (table.cols() != x.cols())
    throw ShapeError("add_rows_by_index: column mismatch");
  for (int64_t i : idx)
    if (i >= table.rows())
      throw ShapeError("add_rows_by_index: index out of range");
  Var<T> out =
      detail::make_node<T>("add_rows_by_index", x.rows(), x.cols(), {x, table});
  int64_t c = x.cols();
  for (int64_t r = 0; r < x.rows(); ++r) {
    const T* xa = x.data() + r * c;
    T* o = out.data() + r * c;
    if (idx[r] < 0) {
      std::memcpy(o, xa, sizeof(T) * static_cast<size_t>(c));
      continue;
    }
    const T* tb = table.data() + idx[r] * c;
    for (int64_t j = 0; j < c; ++j) o[j] = xa[j] + tb[j];
  }
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [idx = std::move(idx)](Node<T>& self) {
      auto& x = self.parents[0];
      auto& table = self.parents[1];
      if (x->requires_grad) {
        x->ensure_grad();
        x->gmap() += self.gmap();
      }
      if (table->requires_grad) {
        table->ensure_grad();
        int64_t c = self.cols;
        const T* g = self.grad.data();
        T* tg = table->grad.data();
        for (size_t r = 0; r < idx.size(); ++r) {
          if (idx[r] < 0) continue;
          T* dst = tg + idx[r] * c;
          const T* src = g + r * c;
          for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
        }
      }
    };
  }
  return out;
}

// out[r, :] = x[idx[r], :] * (mult * w_flat[widx[r]])
template <typename T>
Var<T> gather_scale_rows(const Var<T>& x, const Var<T>& w,
                         std::vector<int64_t> idx, std::vector<int64_t> widx,
                         double mult) {
  if (idx.size() != widx.size())
    throw ShapeError("gather_scale_rows: idx/widx size mismatch");
  for (int64_t i : idx)
    if (i < 0 || i >= x.rows())
      throw ShapeError("gather_scale_rows: row index out of range");
  for (int64_t i : widx)
    if (i < 0 || i >= w.numel())
      throw ShapeError("gather_scale_rows: weight index out of range");
  Var<T> out = detail::make_node<T>(
      "gather_scale_rows", static_cast<int64_t>(idx.size()), x.cols(), {x, w});
  int64_t c = x.cols();
  T m = static_cast<T>(mult);
  for (size_t r = 0; r < idx.size(); ++r) {
    T s = m * w.data()[widx[r]];
    const T* src = x.data() + idx[r] * c;
    T* dst = out.data() + r * c;
    for (int64_t j = 0; j < c; ++j) dst[j] = src[j] * s;
  }
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [idx = std::move(idx), widx = std::move(widx),
                            m](Node<T>& self) {
      auto& x = self.parents[0];
      auto& w = self.parents[1];
      int64_t c = self.cols;
      const T* g = self.grad.data();
      if (x->requires_grad) x->ensure_grad();
      if (w->requires_grad) w->ensure_grad();
      for (size_t r = 0; r < idx.size(); ++r) {
        T s = m * w->value[widx[r]];
        const T* grow = g + r * c;
        if (x->requires_grad) {
          T* dst = x->grad.data() + idx[r] * c;
          for (int64_t j = 0; j < c; ++j) dst[j] += grow[j] * s;
        }
        if (w->requires_grad) {
          const T* xrow = x->value.data() + idx[r] * c;
          T acc = T(0);
          for (int64_t j = 0; j < c; ++j) acc += grow[j] * xrow[j];
          w->grad[widx[r]] += m * acc;
        }
      }
    };
  }
  return out;
}

// out[r, :] = x[r, :] + mask[r] * v (mask is a plain constant)
template <typename T>
Var<T> add_masked_rowvec(const Var<T>& x, const Var<T>& v,
                         std::vector<T> mask) {
  if (static_cast<int64_t>(mask.size()) != x.rows())
    throw ShapeError("add_masked_rowvec: mask size mismatch");
  if (v.rows() != 1 || v.cols() != x.cols())
    throw ShapeError("add_masked_rowvec: v must be [1 x cols]");
  Var<T> out =
      detail::make_node<T>("add_masked_rowvec", x.rows(), x.cols(), {x, v});
  int64_t c = x.cols();
  for (int64_t r = 0; r < x.rows(); ++r) {
    const T* xa = x.data() + r * c;
    T* o = out.data() + r * c;
    T mr = mask[r];
    for (int64_t j = 0; j < c; ++j) o[j] = xa[j] + mr * v.data()[j];
  }
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [mask = std::move(mask)](Node<T>& self) {
      auto& x = self.parents[0];
      auto& v = self.parents[1];
      int64_t c = self.cols;
      if (x->requires_grad) {
        x->ensure_grad();
        x->gmap() += self.gmap();
      }
      if (v->requires_grad) {
        v->ensure_grad();
        const T* g = self.grad.data();
        T* vg = v->grad.data();
        for (size_t r = 0; r < mask.size(); ++r) {
          const T* src = g + r * c;
          for (int64_t j = 0; j < c; ++j) vg[j] += mask[r] * src[j];
        }
      }
    };
  }
  return out;
}

template <typename T>
Var<T> mul_rowmask(const Var<T>& x, std::vector<T> mask) {
  if (static_cast<int64_t>(mask.size()) != x.rows())
    throw ShapeError("mul_rowmask: mask size mismatch");
  Var<T> out = detail::make_node<T>("mul_rowmask", x.rows(), x.cols(), {x});
  int64_t c = x.cols();
  for (int64_t r = 0; r < x.rows(); ++r) {
    const T* xa = x.data() + r * c;
    T* o = out.data() + r * c;
    for (int64_t j = 0; j < c; ++j) o[j] = xa[j] * mask[r];
  }
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [mask = std::move(mask)](Node<T>& self) {
      auto& x = self.parents[0];
      x->ensure_grad();
      int64_t c = self.cols;
      const T* g = self.grad.data();
      T* xg = x->grad.data();
      for (size_t r = 0; r < mask.size(); ++r)
        for (int64_t j = 0; j < c; ++j) xg[r * c + j] += g[r * c + j] * mask[r];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions / normalization

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  Var<T> out = detail::make_node<T>("mean_all", 1, 1, {x});
  out.data()[0] =
      ECMap<T>(x.data(), x.rows(), x.cols()).sum() / static_cast<T>(x.numel());
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      auto& x = self.parents[0];
      x->ensure_grad();
      T g = self.grad[0] / static_cast<T>(x->numel());
      for (auto& e : x->grad) e += g;
    };
  }
  return out;
}

template <typename T>
Var<T> rowwise_dot(const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("rowwise_dot: shape mismatch");
  Var<T> out = detail::make_node<T>("rowwise_dot", a.rows(), 1, {a, b});
  for (int64_t r = 0; r < a.rows(); ++r) {
    const T* pa = a.data() + r * a.cols();
    const T* pb = b.data() + r * a.cols();
    T acc = T(0);
    for (int64_t j = 0; j < a.cols(); ++j) acc += pa[j] * pb[j];
    out.data()[r] = acc;
  }
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      auto& a = self.parents[0];
      auto& b = self.parents[1];
      int64_t c = a->cols;
      if (a->requires_grad) a->ensure_grad();
      if (b->requires_grad) b->ensure_grad();
      for (int64_t r = 0; r < a->rows; ++r) {
        T g = self.grad[r];
        for (int64_t j = 0; j < c; ++j) {
          if (a->requires_grad) a->grad[r * c + j] += g * b->value[r * c + j];
          if (b->requires_grad) b->grad[r * c + j] += g * a->value[r * c + j];
        }
      }
    };
  }
  return out;
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
  Var<T> out = detail::make_node<T>("softmax_rows", x.rows(), x.cols(), {x});
  int64_t c = x.cols();
  for (int64_t r = 0; r < x.rows(); ++r) {
    const T* xr = x.data() + r * c;
    T* o = out.data() + r * c;
    T mx = xr[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    T sum = T(0);
    for (int64_t j = 0; j < c; ++j) {
      o[j] = std::exp(xr[j] - mx);
      sum += o[j];
    }
    T inv = T(1) / sum;
    for (int64_t j = 0; j < c; ++j) o[j] *= inv;
  }
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      auto& x = self.parents[0];
      x->ensure_grad();
      int64_t c = self.cols;
      for (int64_t r = 0; r < self.rows; ++r) {
        const T* y = self.value.data() + r * c;
        const T* g = self.grad.data() + r * c;
        T dot = T(0);
        for (int64_t j = 0; j < c; ++j) dot += y[j] * g[j];
        T* xg = x->grad.data() + r * c;
        for (int64_t j = 0; j < c; ++j) xg[j] += y[j] * (g[j] - dot);
      }
    };
  }
  return out;
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  double eps = 1e-5) {
  if (gamma.rows() != 1 || gamma.cols() != x.cols() || beta.rows() != 1 ||
      beta.cols() != x.cols())
    throw ShapeError("layer_norm: gamma/beta must be [1 x cols]");
  Var<T> out =
      detail::make_node<T>("layer_norm", x.rows(), x.cols(), {x, gamma, beta});
  int64_t c = x.cols();
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(x.rows());
  for (int64_t r = 0; r < x.rows(); ++r) {
    const T* xr = x.data() + r * c;
    T mu = T(0);
    for (int64_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<T>(c);
    T var = T(0);
    for (int64_t j = 0; j < c; ++j) {
      T d = xr[j] - mu;
      var += d * d;
    }
    var /= static_cast<T>(c);
    T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*inv_std)[r] = is;
    T* o = out.data() + r * c;
    T* xh = xhat->data() + r * c;
    for (int64_t j = 0; j < c; ++j) {
      xh[j] = (xr[j] - mu) * is;
      o[j] = xh[j] * gamma.data()[j] + beta.data()[j];
    }
  }
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [xhat, inv_std](Node<T>& self) {
      auto& x = self.parents[0];
      auto& gamma = self.parents[1];
      auto& beta = self.parents[2];
      int64_t c = self.cols;
      if (x->requires_grad) x->ensure_grad();
      if (gamma->requires_grad) gamma->ensure_grad();
      if (beta->requires_grad) beta->ensure_grad();
      for (int64_t r = 0; r < self.rows; ++r) {
        const T* g = self.grad.data() + r * c;
        const T* xh = xhat->data() + r * c;
        T is = (*inv_std)[r];
        if (gamma->requires_grad || beta->requires_grad) {
          for (int64_t j = 0; j < c; ++j) {
            if (gamma->requires_grad) gamma->grad[j] += g[j] * xh[j];
            if (beta->requires_grad) beta->grad[j] += g[j];
          }
        }
        if (x->requires_grad) {
          // dx = is/c * (c*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
          T s1 = T(0), s2 = T(0);
          for (int64_t j = 0; j < c; ++j) {
            T dxh = g[j] * gamma->value[j];
            s1 += dxh;
            s2 += dxh * xh[j];
          }
          T* xg = x->grad.data() + r * c;
          T invc = T(1) / static_cast<T>(c);
          for (int64_t j = 0; j < c; ++j) {
            T dxh = g[j] * gamma->value[j];
            xg[j] += is * (dxh - invc * s1 - xh[j] * invc * s2);
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// fused block-diagonal multi-head attention
//
// q: [S*lq x d], k/v: [S*lk x d]. Attention runs within each of the S
// segments independently, split over `heads` heads. key_mask, when given,
// holds one 0/1 entry per k row; masked keys are excluded.

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads,
                 int64_t lq, int64_t lk,
                 const std::vector<T>* key_mask = nullptr) {
  int64_t d = q.cols();
  if (k.cols() != d || v.cols() != d) throw ShapeError("attention: width mismatch");
  if (d % heads != 0) throw ShapeError("attention: heads must divide width");
  if (q.rows() % lq != 0 || k.rows() % lk != 0)
    throw ShapeError("attention: segment length must divide rows");
  int64_t S = q.rows() / lq;
  if (k.rows() != S * lk || v.rows() != S * lk)
    throw ShapeError("attention: q/k segment count mismatch");
  if (key_mask && static_cast<int64_t>(key_mask->size()) != k.rows())
    throw ShapeError("attention: key_mask size mismatch");
  int64_t dh = d / heads;
  T att_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  Var<T> out = detail::make_node<T>("attention", q.rows(), d, {q, k, v});
  auto probs =
      std::make_shared<ValueBuf<T>>(static_cast<size_t>(S * heads * lq * lk));

  ECMap<T> qm(q.data(), q.rows(), d);
  ECMap<T> km(k.data(), k.rows(), d);
  ECMap<T> vm(v.data(), v.rows(), d);
  EMap<T> om(out.data(), q.rows(), d);
  EMat<T> scores(lq, lk);
  for (int64_t s = 0; s < S; ++s) {
    for (int h = 0; h < heads; ++h) {
      auto qs = qm.block(s * lq, h * dh, lq, dh);
      auto ks = km.block(s * lk, h * dh, lk, dh);
      auto vs = vm.block(s * lk, h * dh, lk, dh);
      scores.noalias() = qs * ks.transpose() * att_scale;
      if (key_mask) {
        for (int64_t j = 0; j < lk; ++j)
          if ((*key_mask)[s * lk + j] == T(0)) scores.col(j).setConstant(T(-1e9));
      }
      T* pb = probs->data() + ((s * heads + h) * lq * lk);
      for (int64_t i = 0; i < lq; ++i) {
        T mx = scores(i, 0);
        for (int64_t j = 1; j < lk; ++j) mx = std::max(mx, scores(i, j));
        T sum = T(0);
        for (int64_t j = 0; j < lk; ++j) {
          T e = std::exp(scores(i, j) - mx);
          pb[i * lk + j] = e;
          sum += e;
        }
        T inv = T(1) / sum;
        for (int64_t j = 0; j < lk; ++j) pb[i * lk + j] *= inv;
      }
      Eigen::Map<const EMat<T>> pm(pb, lq, lk);
      om.block(s * lq, h * dh, lq, dh).noalias() = pm * vs;
    }
  }
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [probs, heads, lq, lk, dh, att_scale,
                            S](Node<T>& self) {
      auto& q = self.parents[0];
      auto& k = self.parents[1];
      auto& v = self.parents[2];
      if (q->requires_grad) q->ensure_grad();
      if (k->requires_grad) k->ensure_grad();
      if (v->requires_grad) v->ensure_grad();
      int64_t d = self.cols;
      EMap<T> go(self.grad.data(), self.rows, d);
      EMat<T> dp(lq, lk), ds(lq, lk);
      for (int64_t s = 0; s < S; ++s) {
        for (int h = 0; h < heads; ++h) {
          Eigen::Map<const EMat<T>> pm(probs->data() + ((s * heads + h) * lq * lk),
                                       lq, lk);
          auto gob = go.block(s * lq, h * dh, lq, dh);
          auto vs = v->vmap().block(s * lk, h * dh, lk, dh);
          if (v->requires_grad)
            v->gmap().block(s * lk, h * dh, lk, dh).noalias() +=
                pm.transpose() * gob;
          dp.noalias() = gob * vs.transpose();
          // softmax backward per row
          for (int64_t i = 0; i < lq; ++i) {
            T dot = T(0);
            for (int64_t j = 0; j < lk; ++j) dot += dp(i, j) * pm(i, j);
            for (int64_t j = 0; j < lk; ++j)
              ds(i, j) = pm(i, j) * (dp(i, j) - dot) * att_scale;
          }
          auto qs = q->vmap().block(s * lq, h * dh, lq, dh);
          auto ks = k->vmap().block(s * lk, h * dh, lk, dh);
          if (q->requires_grad)
            q->gmap().block(s * lq, h * dh, lq, dh).noalias() += ds * ks;
          if (k->requires_grad)
            k->gmap().block(s * lk, h * dh, lk, dh).noalias() +=
                ds.transpose() * qs;
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// reshape (copies; sizes here are small)

template <typename T>
Var<T> reshape(const Var<T>& x, int64_t rows, int64_t cols) {
  if (rows * cols != x.numel()) throw ShapeError("reshape: numel mismatch");
  Var<T> out = detail::make_node<T>("reshape", rows, cols, {x});
  std::memcpy(out.data(), x.data(), sizeof(T) * x.numel());
  detail::finish(out);
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      auto& x = self.parents[0];
      x->ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i) x->grad[i] += self.grad[i];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward pass

template <typename T>
void backward(const Var<T>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar");
  if (!loss.requires_grad()) return;
  // iterative topological sort
  std::vector<Node<T>*> order;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  std::unordered_map<Node<T>*, int> state;  // 0 new, 1 open, 2 done
  stack.push_back({loss.node(), 0});
  state[loss.node()] = 1;
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i].get();
      ++i;
      if (p->requires_grad && state[p] == 0) {
        state[p] = 1;
        stack.push_back({p, 0});
      }
    } else {
      state[n] = 2;
      order.push_back(n);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

}  // namespace acdit
