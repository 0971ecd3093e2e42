#ifndef USP_AUTOGRAD_HPP
#define USP_AUTOGRAD_HPP

// Minimal reverse-mode automatic differentiation over row-major Eigen
// matrices. Every op is fused and carries a hand-written backward; the graph is
// recovered by a topological sort from the loss, so there is no global tape.
//
// Token tensors [N, T, d] are stored flattened as [N*T, d]; images [N, C, H, W]
// as [N, C*H*W].

#include "usp/core.hpp"

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

namespace usp::ag {

template <typename T>
struct Node {
  Mat<T> value;
  Mat<T> grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  template <typename Expr>
  void accumulate(const Expr& g) {
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
  Mat<T>& grad_buffer() {
    if (grad.size() == 0) grad = Mat<T>::Zero(value.rows(), value.cols());
    return grad;
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

/// Disables graph construction for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Mat<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }
  static Var leaf(Mat<T> value, bool requires_grad = true) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  const Mat<T>& value() const { return node_->value; }
  Mat<T>& mutable_value() { return node_->value; }
  const Mat<T>& grad() const { return node_->grad; }
  Mat<T>& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.resize(0, 0); }

  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  T item() const { return node_->value(0, 0); }

  Node<T>* get() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Var<T>*> inputs) {
  for (const auto* v : inputs)
    if (v && v->defined() && v->requires_grad()) return true;
  return false;
}

/// Wraps an op result. The backward closure is attached only when gradients
/// are enabled and some input needs them.
template <typename T, typename F>
Var<T> make_result(Mat<T> value, std::initializer_list<const Var<T>*> inputs, F&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (grad_mode() && any_requires_grad<T>(inputs)) {
    node->requires_grad = true;
    for (const auto* v : inputs)
      if (v && v->defined()) node->parents.push_back(v->shared());
    node->backward_fn = std::forward<F>(backward);
  }
  return Var<T>(std::move(node));
}

template <typename T>
bool wants(const Var<T>& v) {
  return v.defined() && v.requires_grad();
}

}  // namespace detail

/// Runs reverse accumulation from a scalar (1x1) loss.
template <typename T>
void backward(const Var<T>& loss) {
  USP_CHECK(loss.rows() == 1 && loss.cols() == 1, "backward: loss must be scalar");
  if (!loss.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.get(), 0}};
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.get()->accumulate(Mat<T>::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and linear algebra

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  USP_CHECK(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  return detail::make_result<T>(a.value() + b.value(), {&a, &b}, [a, b](Node<T>& self) {
    if (detail::wants(a)) a.get()->accumulate(self.grad);
    if (detail::wants(b)) b.get()->accumulate(self.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  USP_CHECK(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  return detail::make_result<T>(a.value() - b.value(), {&a, &b}, [a, b](Node<T>& self) {
    if (detail::wants(a)) a.get()->accumulate(self.grad);
    if (detail::wants(b)) b.get()->accumulate(-self.grad);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  USP_CHECK(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  return detail::make_result<T>(a.value().cwiseProduct(b.value()), {&a, &b}, [a, b](Node<T>& self) {
    if (detail::wants(a)) a.get()->accumulate(self.grad.cwiseProduct(b.value()));
    if (detail::wants(b)) b.get()->accumulate(self.grad.cwiseProduct(a.value()));
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return detail::make_result<T>(a.value() * s, {&a}, [a, s](Node<T>& self) {
    a.get()->accumulate(self.grad * s);
  });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  Mat<T> out = a.value().array().exp().matrix();
  return detail::make_result<T>(out, {&a}, [a, out](Node<T>& self) {
    a.get()->accumulate(self.grad.cwiseProduct(out));
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  USP_CHECK(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  Mat<T> out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  return detail::make_result<T>(std::move(out), {&a, &b}, [a, b](Node<T>& self) {
    if (detail::wants(a)) a.get()->grad_buffer().noalias() += self.grad * b.value().transpose();
    if (detail::wants(b)) b.get()->grad_buffer().noalias() += a.value().transpose() * self.grad;
  });
}

/// y = x W^T + b with W stored [out, in] and b [1, out] (b may be undefined).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = Var<T>()) {
  USP_CHECK(x.cols() == w.cols(), "linear: input width mismatch");
  Mat<T> out(x.rows(), w.rows());
  out.noalias() = x.value() * w.value().transpose();
  if (b.defined()) {
    USP_CHECK(b.rows() == 1 && b.cols() == w.rows(), "linear: bias shape");
    out.rowwise() += b.value().row(0);
  }
  return detail::make_result<T>(std::move(out), {&x, &w, &b}, [x, w, b](Node<T>& self) {
    if (detail::wants(x)) x.get()->grad_buffer().noalias() += self.grad * w.value();
    if (detail::wants(w)) w.get()->grad_buffer().noalias() += self.grad.transpose() * x.value();
    if (detail::wants(b)) b.get()->grad_buffer() += self.grad.colwise().sum();
  });
}

/// Adds a [1, d] row to every row of x.
template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& row) {
  USP_CHECK(row.rows() == 1 && row.cols() == x.cols(), "add_row: shape mismatch");
  Mat<T> out = x.value();
  out.rowwise() += row.value().row(0);
  return detail::make_result<T>(std::move(out), {&x, &row}, [x, row](Node<T>& self) {
    if (detail::wants(x)) x.get()->accumulate(self.grad);
    if (detail::wants(row)) row.get()->grad_buffer() += self.grad.colwise().sum();
  });
}

/// x is [N*T, d]; tile [T, d] is added to every block of T rows.
template <typename T>
Var<T> add_tiled(const Var<T>& x, const Var<T>& tile) {
  const Eigen::Index t = tile.rows();
  USP_CHECK(t > 0 && x.rows() % t == 0 && x.cols() == tile.cols(), "add_tiled: shape mismatch");
  const Eigen::Index n = x.rows() / t;
  Mat<T> out = x.value();
  for (Eigen::Index i = 0; i < n; ++i) out.middleRows(i * t, t) += tile.value();
  return detail::make_result<T>(std::move(out), {&x, &tile}, [x, tile, n, t](Node<T>& self) {
    if (detail::wants(x)) x.get()->accumulate(self.grad);
    if (detail::wants(tile)) {
      auto& g = tile.get()->grad_buffer();
      for (Eigen::Index i = 0; i < n; ++i) g += self.grad.middleRows(i * t, t);
    }
  });
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  Mat<T> out = x.value().unaryExpr([](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(kInvSqrt2))); });
  return detail::make_result<T>(std::move(out), {&x}, [x](Node<T>& self) {
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    Mat<T> d = x.value().unaryExpr([](T v) {
      return T(0.5) * (T(1) + std::erf(v * T(kInvSqrt2))) + v * std::exp(-T(0.5) * v * v) * T(kInvSqrt2Pi);
    });
    x.get()->accumulate(self.grad.cwiseProduct(d));
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  Mat<T> sig = x.value().unaryExpr([](T v) { return T(1) / (T(1) + std::exp(-v)); });
  Mat<T> out = x.value().cwiseProduct(sig);
  return detail::make_result<T>(std::move(out), {&x}, [x, sig](Node<T>& self) {
    Mat<T> d = sig.array() * (T(1) + x.value().array() * (T(1) - sig.array()));
    x.get()->accumulate(self.grad.cwiseProduct(d));
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Row-wise layer norm. gamma and beta are [1, d] and optional.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma = Var<T>(), const Var<T>& beta = Var<T>(),
                  T eps = T(1e-6)) {
  const Eigen::Index rows = x.rows(), d = x.cols();
  Mat<T> xhat(rows, d);
  std::vector<T> rstd(static_cast<std::size_t>(rows));
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto row = x.value().row(r);
    const T mean = row.mean();
    const T var = (row.array() - mean).square().mean();
    const T inv = T(1) / std::sqrt(var + eps);
    rstd[static_cast<std::size_t>(r)] = inv;
    xhat.row(r) = (row.array() - mean) * inv;
  }
  Mat<T> out = xhat;
  if (gamma.defined()) out.array().rowwise() *= gamma.value().row(0).array();
  if (beta.defined()) out.rowwise() += beta.value().row(0);
  return detail::make_result<T>(
      std::move(out), {&x, &gamma, &beta}, [x, gamma, beta, xhat, rstd, d](Node<T>& self) {
        const Mat<T>& g = self.grad;
        if (detail::wants(gamma)) gamma.get()->grad_buffer() += g.cwiseProduct(xhat).colwise().sum();
        if (detail::wants(beta)) beta.get()->grad_buffer() += g.colwise().sum();
        if (detail::wants(x)) {
          Mat<T> dxhat = g;
          if (gamma.defined()) dxhat.array().rowwise() *= gamma.value().row(0).array();
          auto& gx = x.get()->grad_buffer();
          for (Eigen::Index r = 0; r < g.rows(); ++r) {
            const T m1 = dxhat.row(r).mean();
            const T m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).sum() / T(d);
            gx.row(r).array() +=
                rstd[static_cast<std::size_t>(r)] * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Transformer pieces

/// Multi-head self-attention core. qkv is [N*T, 3d] laid out as
/// [q(heads*dh) | k | v]; returns the concatenated heads [N*T, d].
template <typename T>
Var<T> attention(const Var<T>& qkv, Eigen::Index batch, Eigen::Index tokens, Eigen::Index heads) {
  USP_CHECK(qkv.cols() % 3 == 0, "attention: qkv width must be 3d");
  const Eigen::Index d = qkv.cols() / 3;
  USP_CHECK(d % heads == 0, "attention: width not divisible by heads");
  USP_CHECK(qkv.rows() == batch * tokens, "attention: row count mismatch");
  const Eigen::Index dh = d / heads;
  const T scale = T(1) / std::sqrt(T(dh));
  const Mat<T>& in = qkv.value();
  Mat<T> out(batch * tokens, d);
  auto probs = std::make_shared<std::vector<Mat<T>>>(static_cast<std::size_t>(batch * heads));
  for (Eigen::Index n = 0; n < batch; ++n) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto q = in.block(n * tokens, h * dh, tokens, dh);
      const auto k = in.block(n * tokens, d + h * dh, tokens, dh);
      const auto v = in.block(n * tokens, 2 * d + h * dh, tokens, dh);
      Mat<T> s(tokens, tokens);
      s.noalias() = q * k.transpose();
      s *= scale;
      for (Eigen::Index r = 0; r < tokens; ++r) {
        const T mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
      }
      out.block(n * tokens, h * dh, tokens, dh).noalias() = s * v;
      (*probs)[static_cast<std::size_t>(n * heads + h)] = std::move(s);
    }
  }
  return detail::make_result<T>(
      std::move(out), {&qkv}, [qkv, probs, batch, tokens, heads, d, dh, scale](Node<T>& self) {
        const Mat<T>& in = qkv.value();
        auto& gin = qkv.get()->grad_buffer();
        Mat<T> dp(tokens, tokens);
        for (Eigen::Index n = 0; n < batch; ++n) {
          for (Eigen::Index h = 0; h < heads; ++h) {
            const Mat<T>& p = (*probs)[static_cast<std::size_t>(n * heads + h)];
            const auto q = in.block(n * tokens, h * dh, tokens, dh);
            const auto k = in.block(n * tokens, d + h * dh, tokens, dh);
            const auto v = in.block(n * tokens, 2 * d + h * dh, tokens, dh);
            const auto go = self.grad.block(n * tokens, h * dh, tokens, dh);
            gin.block(n * tokens, 2 * d + h * dh, tokens, dh).noalias() += p.transpose() * go;
            dp.noalias() = go * v.transpose();
            for (Eigen::Index r = 0; r < tokens; ++r) {
              const T dot = dp.row(r).dot(p.row(r));
              dp.row(r) = p.row(r).array() * (dp.row(r).array() - dot);
            }
            dp *= scale;
            gin.block(n * tokens, h * dh, tokens, dh).noalias() += dp * k;
            gin.block(n * tokens, d + h * dh, tokens, dh).noalias() += dp.transpose() * q;
          }
        }
      });
}

/// x * (1 + scale) + shift with per-sample [N, d] shift/scale broadcast over T tokens.
template <typename T>
Var<T> modulate(const Var<T>& x, const Var<T>& shift, const Var<T>& scl, Eigen::Index tokens) {
  const Eigen::Index n = shift.rows();
  USP_CHECK(x.rows() == n * tokens && shift.cols() == x.cols() && scl.rows() == n && scl.cols() == x.cols(),
            "modulate: shape mismatch");
  Mat<T> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVec<T> mult = scl.value().row(i).array() + T(1);
    out.middleRows(i * tokens, tokens) = x.value().middleRows(i * tokens, tokens).array().rowwise() * mult.array();
    out.middleRows(i * tokens, tokens).rowwise() += shift.value().row(i);
  }
  return detail::make_result<T>(std::move(out), {&x, &shift, &scl}, [x, shift, scl, n, tokens](Node<T>& self) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto g = self.grad.middleRows(i * tokens, tokens);
      if (detail::wants(x)) {
        const RowVec<T> mult = scl.value().row(i).array() + T(1);
        x.get()->grad_buffer().middleRows(i * tokens, tokens).array() += g.array().rowwise() * mult.array();
      }
      if (detail::wants(shift)) shift.get()->grad_buffer().row(i) += g.colwise().sum();
      if (detail::wants(scl))
        scl.get()->grad_buffer().row(i) +=
            g.cwiseProduct(x.value().middleRows(i * tokens, tokens)).colwise().sum();
    }
  });
}

/// x + gate * y with a per-sample [N, d] gate broadcast over T tokens.
template <typename T>
Var<T> gated_residual(const Var<T>& x, const Var<T>& gate, const Var<T>& y, Eigen::Index tokens) {
  const Eigen::Index n = gate.rows();
  USP_CHECK(x.rows() == n * tokens && y.rows() == x.rows() && gate.cols() == x.cols() && y.cols() == x.cols(),
            "gated_residual: shape mismatch");
  Mat<T> out = x.value();
  for (Eigen::Index i = 0; i < n; ++i)
    out.middleRows(i * tokens, tokens).array() +=
        y.value().middleRows(i * tokens, tokens).array().rowwise() * gate.value().row(i).array();
  return detail::make_result<T>(std::move(out), {&x, &gate, &y}, [x, gate, y, n, tokens](Node<T>& self) {
    if (detail::wants(x)) x.get()->accumulate(self.grad);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto g = self.grad.middleRows(i * tokens, tokens);
      if (detail::wants(y))
        y.get()->grad_buffer().middleRows(i * tokens, tokens).array() +=
            g.array().rowwise() * gate.value().row(i).array();
      if (detail::wants(gate))
        gate.get()->grad_buffer().row(i) += g.cwiseProduct(y.value().middleRows(i * tokens, tokens)).colwise().sum();
    }
  });
}

// ---------------------------------------------------------------------------
// Indexing

template <typename T>
Var<T> slice_cols(const Var<T>& x, Eigen::Index start, Eigen::Index len) {
  USP_CHECK(start >= 0 && start + len <= x.cols(), "slice_cols: out of range");
  return detail::make_result<T>(x.value().middleCols(start, len), {&x}, [x, start, len](Node<T>& self) {
    x.get()->grad_buffer().middleCols(start, len) += self.grad;
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, Eigen::Index start, Eigen::Index len) {
  USP_CHECK(start >= 0 && start + len <= x.rows(), "slice_rows: out of range");
  return detail::make_result<T>(x.value().middleRows(start, len), {&x}, [x, start, len](Node<T>& self) {
    x.get()->grad_buffer().middleRows(start, len) += self.grad;
  });
}

struct RowRef {
  int source;
  Eigen::Index row;
};

/// Builds a matrix whose i-th row is sources[refs[i].source].row(refs[i].row).
/// Covers gather, repeat and concatenation along rows.
template <typename T>
Var<T> gather_rows(const std::vector<Var<T>>& sources, const std::vector<RowRef>& refs) {
  USP_CHECK(!sources.empty(), "gather_rows: no sources");
  const Eigen::Index d = sources.front().cols();
  for (const auto& s : sources) USP_CHECK(s.cols() == d, "gather_rows: width mismatch");
  Mat<T> out(static_cast<Eigen::Index>(refs.size()), d);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& src = sources.at(static_cast<std::size_t>(refs[i].source));
    USP_CHECK(refs[i].row >= 0 && refs[i].row < src.rows(), "gather_rows: row out of range");
    out.row(static_cast<Eigen::Index>(i)) = src.value().row(refs[i].row);
  }
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(out);
  bool needs = false;
  for (const auto& s : sources) needs = needs || s.requires_grad();
  if (grad_mode() && needs) {
    node->requires_grad = true;
    for (const auto& s : sources) node->parents.push_back(s.shared());
    node->backward_fn = [sources, refs](Node<T>& self) {
      for (std::size_t i = 0; i < refs.size(); ++i) {
        const auto& src = sources[static_cast<std::size_t>(refs[i].source)];
        if (src.requires_grad()) src.get()->grad_buffer().row(refs[i].row) += self.grad.row(static_cast<Eigen::Index>(i));
      }
    };
  }
  return Var<T>(std::move(node));
}

/// out[:, j] = x[:, perm[j]]; perm must be a permutation of the columns.
template <typename T>
Var<T> permute_cols(const Var<T>& x, std::shared_ptr<const std::vector<Eigen::Index>> perm) {
  USP_CHECK(static_cast<Eigen::Index>(perm->size()) == x.cols(), "permute_cols: size mismatch");
  Mat<T> out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) out.col(j) = x.value().col((*perm)[static_cast<std::size_t>(j)]);
  return detail::make_result<T>(std::move(out), {&x}, [x, perm](Node<T>& self) {
    auto& g = x.get()->grad_buffer();
    for (Eigen::Index j = 0; j < self.grad.cols(); ++j) g.col((*perm)[static_cast<std::size_t>(j)]) += self.grad.col(j);
  });
}

/// out.data()[k] = x.data()[(*index)[k]] with out shaped [rows, cols]; each source
/// element is read at most once, so the backward pass is a scatter.
template <typename T>
Var<T> gather_flat(const Var<T>& x, Eigen::Index rows, Eigen::Index cols,
                   std::shared_ptr<const std::vector<Eigen::Index>> index) {
  USP_CHECK(static_cast<Eigen::Index>(index->size()) == rows * cols, "gather_flat: index size mismatch");
  Mat<T> out(rows, cols);
  for (Eigen::Index k = 0; k < rows * cols; ++k) {
    const Eigen::Index src = (*index)[static_cast<std::size_t>(k)];
    USP_CHECK(src >= 0 && src < x.value().size(), "gather_flat: index out of range");
    out.data()[k] = x.value().data()[src];
  }
  return detail::make_result<T>(std::move(out), {&x}, [x, index](Node<T>& self) {
    T* g = x.get()->grad_buffer().data();
    for (Eigen::Index k = 0; k < self.grad.size(); ++k) g[(*index)[static_cast<std::size_t>(k)]] += self.grad.data()[k];
  });
}

/// Mean over each block of T consecutive rows: [N*T, d] -> [N, d].
template <typename T>
Var<T> segment_mean(const Var<T>& x, Eigen::Index tokens) {
  USP_CHECK(tokens > 0 && x.rows() % tokens == 0, "segment_mean: shape mismatch");
  const Eigen::Index n = x.rows() / tokens;
  Mat<T> out(n, x.cols());
  for (Eigen::Index i = 0; i < n; ++i) out.row(i) = x.value().middleRows(i * tokens, tokens).colwise().mean();
  return detail::make_result<T>(std::move(out), {&x}, [x, n, tokens](Node<T>& self) {
    auto& g = x.get()->grad_buffer();
    for (Eigen::Index i = 0; i < n; ++i) g.middleRows(i * tokens, tokens).rowwise() += self.grad.row(i) / T(tokens);
  });
}

// ---------------------------------------------------------------------------
// Convolution over images stored [N, C*H*W].

struct ConvGeometry {
  Eigen::Index in_channels, height, width;
  Eigen::Index kernel, stride, padding;
  Eigen::Index out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
  Eigen::Index out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
};

namespace detail {

template <typename T>
void im2col(const T* img, const ConvGeometry& g, Mat<T>& cols) {
  const Eigen::Index ho = g.out_height(), wo = g.out_width(), k = g.kernel;
  cols.setZero(ho * wo, g.in_channels * k * k);
  for (Eigen::Index oy = 0; oy < ho; ++oy)
    for (Eigen::Index ox = 0; ox < wo; ++ox) {
      const Eigen::Index r = oy * wo + ox;
      for (Eigen::Index c = 0; c < g.in_channels; ++c)
        for (Eigen::Index ky = 0; ky < k; ++ky) {
          const Eigen::Index iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          for (Eigen::Index kx = 0; kx < k; ++kx) {
            const Eigen::Index ix = ox * g.stride - g.padding + kx;
            if (ix < 0 || ix >= g.width) continue;
            cols(r, (c * k + ky) * k + kx) = img[(c * g.height + iy) * g.width + ix];
          }
        }
    }
}

template <typename T>
void col2im_add(const Mat<T>& cols, const ConvGeometry& g, T* img) {
  const Eigen::Index ho = g.out_height(), wo = g.out_width(), k = g.kernel;
  for (Eigen::Index oy = 0; oy < ho; ++oy)
    for (Eigen::Index ox = 0; ox < wo; ++ox) {
      const Eigen::Index r = oy * wo + ox;
      for (Eigen::Index c = 0; c < g.in_channels; ++c)
        for (Eigen::Index ky = 0; ky < k; ++ky) {
          const Eigen::Index iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          for (Eigen::Index kx = 0; kx < k; ++kx) {
            const Eigen::Index ix = ox * g.stride - g.padding + kx;
            if (ix < 0 || ix >= g.width) continue;
            img[(c * g.height + iy) * g.width + ix] += cols(r, (c * k + ky) * k + kx);
          }
        }
    }
}

}  // namespace detail

/// 2-D convolution; weight is [Cout, Cin*k*k] (PyTorch order flattened), bias [1, Cout].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, const ConvGeometry& g) {
  const Eigen::Index ksz = g.in_channels * g.kernel * g.kernel;
  USP_CHECK(x.cols() == g.in_channels * g.height * g.width, "conv2d: input geometry mismatch");
  USP_CHECK(w.cols() == ksz, "conv2d: weight geometry mismatch");
  const Eigen::Index cout = w.rows(), ho = g.out_height(), wo = g.out_width(), hw = ho * wo;
  Mat<T> out(x.rows(), cout * hw);
  Mat<T> cols, y(hw, cout);
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    detail::im2col(x.value().row(n).data(), g, cols);
    y.noalias() = cols * w.value().transpose();
    if (b.defined()) y.rowwise() += b.value().row(0);
    // [hw, cout] -> channel-major row
    Eigen::Map<Mat<T>>(out.row(n).data(), cout, hw) = y.transpose();
  }
  return detail::make_result<T>(std::move(out), {&x, &w, &b}, [x, w, b, g, cout, hw](Node<T>& self) {
    Mat<T> cols, dy(hw, cout), dcols;
    for (Eigen::Index n = 0; n < x.rows(); ++n) {
      dy = Eigen::Map<const Mat<T>>(self.grad.row(n).data(), cout, hw).transpose();
      if (detail::wants(b)) b.get()->grad_buffer() += dy.colwise().sum();
      if (detail::wants(w)) {
        detail::im2col(x.value().row(n).data(), g, cols);
        w.get()->grad_buffer().noalias() += dy.transpose() * cols;
      }
      if (detail::wants(x)) {
        dcols.noalias() = dy * w.value();
        detail::col2im_add(dcols, g, x.get()->grad_buffer().row(n).data());
      }
    }
  });
}

/// [N, C*H*W] -> [N, C] spatial mean.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x, Eigen::Index channels) {
  USP_CHECK(channels > 0 && x.cols() % channels == 0, "global_avg_pool: shape mismatch");
  const Eigen::Index hw = x.cols() / channels;
  Mat<T> out(x.rows(), channels);
  for (Eigen::Index n = 0; n < x.rows(); ++n)
    for (Eigen::Index c = 0; c < channels; ++c) out(n, c) = x.value().row(n).segment(c * hw, hw).mean();
  return detail::make_result<T>(std::move(out), {&x}, [x, channels, hw](Node<T>& self) {
    auto& g = x.get()->grad_buffer();
    for (Eigen::Index n = 0; n < g.rows(); ++n)
      for (Eigen::Index c = 0; c < channels; ++c) g.row(n).segment(c * hw, hw).array() += self.grad(n, c) / T(hw);
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  Mat<T> out(1, 1);
  out(0, 0) = x.value().sum();
  return detail::make_result<T>(std::move(out), {&x}, [x](Node<T>& self) {
    x.get()->grad_buffer().array() += self.grad(0, 0);
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  return scale(sum_all(x), T(1) / T(x.value().size()));
}

/// Mean squared error against a constant target.
template <typename T>
Var<T> mse(const Var<T>& pred, const Mat<T>& target) {
  USP_CHECK(pred.rows() == target.rows() && pred.cols() == target.cols(), "mse: shape mismatch");
  const T count = T(target.size());
  Mat<T> diff = pred.value() - target;
  Mat<T> out(1, 1);
  out(0, 0) = diff.squaredNorm() / count;
  return detail::make_result<T>(std::move(out), {&pred}, [pred, diff, count](Node<T>& self) {
    pred.get()->accumulate(diff * (T(2) * self.grad(0, 0) / count));
  });
}

/// Mean cross-entropy with optional label smoothing.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels, T smoothing = T(0)) {
  const Eigen::Index n = logits.rows(), k = logits.cols();
  USP_CHECK(static_cast<Eigen::Index>(labels.size()) == n, "cross_entropy: label count mismatch");
  Mat<T> probs(n, k), target = Mat<T>::Constant(n, k, smoothing / T(k));
  T total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    USP_CHECK(y >= 0 && y < k, "cross_entropy: label out of range");
    target(i, y) += T(1) - smoothing;
    const T mx = logits.value().row(i).maxCoeff();
    const RowVec<T> shifted = logits.value().row(i).array() - mx;
    const T lse = std::log(shifted.array().exp().sum());
    probs.row(i) = (shifted.array() - lse).exp();
    total -= (target.row(i).array() * (shifted.array() - lse)).sum();
  }
  Mat<T> out(1, 1);
  out(0, 0) = total / T(n);
  return detail::make_result<T>(std::move(out), {&logits}, [logits, probs, target, n](Node<T>& self) {
    logits.get()->accumulate((probs - target) * (self.grad(0, 0) / T(n)));
  });
}

}  // namespace usp::ag

#endif  // USP_AUTOGRAD_HPP
