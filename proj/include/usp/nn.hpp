#ifndef USP_NN_HPP
#define USP_NN_HPP

#include "usp/autograd.hpp"

#include <map>
#include <optional>

namespace usp::nn {

using ag::Var;

/// One named tensor owned by a model. `shape` is the logical (archive) shape;
/// the in-memory value is always 2-D.
template <typename T>
struct Param {
  std::string name;
  Var<T> var;
  std::vector<std::int64_t> shape;
  bool decay = true;       // participates in weight decay
  bool trainable = true;   // false for fixed buffers such as positional tables
  std::string section = "main";
};

/// Ordered registry of a model's tensors, keyed by archive name.
template <typename T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, Mat<T> init, std::vector<std::int64_t> shape, bool decay,
             bool trainable = true, const std::string& section = "main") {
    if (index_.count(name)) throw invalid_argument("ParamStore: duplicate tensor " + name);
    std::int64_t numel = 1;
    for (auto s : shape) numel *= s;
    USP_CHECK(numel == init.size(), "ParamStore: logical shape does not match value for " + name);
    Param<T> p{name, Var<T>::leaf(std::move(init), trainable), std::move(shape), decay, trainable, section};
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return params_.back().var;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Param<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw invalid_argument("ParamStore: unknown tensor " + name);
    return params_[it->second];
  }
  const Param<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw invalid_argument("ParamStore: unknown tensor " + name);
    return params_[it->second];
  }
  Var<T> operator[](const std::string& name) const { return at(name).var; }

  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  /// Marks every tensor whose name starts with one of the prefixes as frozen.
  void freeze(const std::vector<std::string>& prefixes) {
    for (auto& p : params_)
      for (const auto& pre : prefixes)
        if (p.name.rfind(pre, 0) == 0) {
          p.trainable = false;
          p.var.set_requires_grad(false);
        }
  }

  std::size_t numel(bool trainable_only = false) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (!trainable_only || p.trainable) n += static_cast<std::size_t>(p.var.value().size());
    return n;
  }

  /// Digest over names and values (as float32, the on-disk precision).
  std::string digest(const std::string& prefix = "") const {
    Digest d;
    for (const auto& p : params_) {
      if (p.name.rfind(prefix, 0) != 0) continue;
      d.str(p.name);
      const auto& v = p.var.value();
      for (Eigen::Index i = 0; i < v.size(); ++i) {
        const float f = static_cast<float>(v.data()[i]);
        d.bytes(&f, sizeof f);
      }
    }
    return d.hex();
  }

 private:
  std::vector<Param<T>> params_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Initializers

constexpr double kInitStd = 0.02;

template <typename T>
Mat<T> trunc_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols, double std = kInitStd) {
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.trunc_normal(std));
  return m;
}

// ---------------------------------------------------------------------------
// Layers. Each holds handles to tensors registered in a ParamStore.

template <typename T>
struct Linear {
  Var<T> weight, bias;

  static Linear create(ParamStore<T>& s, Rng& rng, const std::string& name, Eigen::Index in, Eigen::Index out,
                       bool zero = false, const std::string& section = "main") {
    Linear l;
    Mat<T> w = zero ? Mat<T>::Zero(out, in) : trunc_normal<T>(rng, out, in);
    l.weight = s.add(name + ".weight", std::move(w), {out, in}, true, true, section);
    l.bias = s.add(name + ".bias", Mat<T>::Zero(1, out), {out}, false, true, section);
    return l;
  }
  static Linear bind(const ParamStore<T>& s, const std::string& name) {
    return Linear{s[name + ".weight"], s[name + ".bias"]};
  }
  Var<T> operator()(const Var<T>& x) const { return ag::linear(x, weight, bias); }
};

template <typename T>
struct LayerNorm {
  Var<T> weight, bias;  // undefined when the norm has no affine parameters
  T eps = T(1e-6);

  static LayerNorm create(ParamStore<T>& s, const std::string& name, Eigen::Index dim, bool affine = true,
                          const std::string& section = "main") {
    LayerNorm n;
    if (affine) {
      n.weight = s.add(name + ".weight", Mat<T>::Ones(1, dim), {dim}, false, true, section);
      n.bias = s.add(name + ".bias", Mat<T>::Zero(1, dim), {dim}, false, true, section);
    }
    return n;
  }
  Var<T> operator()(const Var<T>& x) const { return ag::layer_norm(x, weight, bias, eps); }
};

template <typename T>
struct Attention {
  Linear<T> qkv, proj;
  Eigen::Index heads = 1;

  static Attention create(ParamStore<T>& s, Rng& rng, const std::string& name, Eigen::Index dim,
                          Eigen::Index heads, const std::string& section = "main") {
    USP_CHECK(dim % heads == 0, "Attention: width not divisible by heads");
    Attention a;
    a.qkv = Linear<T>::create(s, rng, name + ".qkv", dim, 3 * dim, false, section);
    a.proj = Linear<T>::create(s, rng, name + ".proj", dim, dim, false, section);
    a.heads = heads;
    return a;
  }
  Var<T> operator()(const Var<T>& x, Eigen::Index batch, Eigen::Index tokens) const {
    return proj(ag::attention(qkv(x), batch, tokens, heads));
  }
};

template <typename T>
struct Mlp {
  Linear<T> fc1, fc2;

  static Mlp create(ParamStore<T>& s, Rng& rng, const std::string& name, Eigen::Index dim, Eigen::Index hidden,
                    const std::string& section = "main") {
    return Mlp{Linear<T>::create(s, rng, name + ".fc1", dim, hidden, false, section),
               Linear<T>::create(s, rng, name + ".fc2", hidden, dim, false, section)};
  }
  Var<T> operator()(const Var<T>& x) const { return fc2(ag::gelu(fc1(x))); }
};

/// Pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
template <typename T>
struct VitBlock {
  LayerNorm<T> ln1, ln2;
  Attention<T> attn;
  Mlp<T> mlp;

  static VitBlock create(ParamStore<T>& s, Rng& rng, const std::string& name, Eigen::Index dim,
                         Eigen::Index heads, Eigen::Index mlp_ratio = 4, const std::string& section = "main") {
    VitBlock b;
    b.ln1 = LayerNorm<T>::create(s, name + ".ln1", dim, true, section);
    b.attn = Attention<T>::create(s, rng, name + ".attn", dim, heads, section);
    b.ln2 = LayerNorm<T>::create(s, name + ".ln2", dim, true, section);
    b.mlp = Mlp<T>::create(s, rng, name + ".mlp", dim, dim * mlp_ratio, section);
    return b;
  }
  Var<T> operator()(const Var<T>& x, Eigen::Index batch, Eigen::Index tokens) const {
    Var<T> h = ag::add(x, attn(ln1(x), batch, tokens));
    return ag::add(h, mlp(ln2(h)));
  }
};

// ---------------------------------------------------------------------------
// Fixed embeddings

/// 1-D sine-cosine embedding of positions: [sin(p w_i) | cos(p w_i)].
inline MatD sincos_1d(Eigen::Index dim, const std::vector<double>& positions) {
  USP_CHECK(dim % 2 == 0, "sincos_1d: dim must be even");
  const Eigen::Index half = dim / 2;
  MatD out(static_cast<Eigen::Index>(positions.size()), dim);
  for (std::size_t r = 0; r < positions.size(); ++r)
    for (Eigen::Index i = 0; i < half; ++i) {
      const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(half));
      out(static_cast<Eigen::Index>(r), i) = std::sin(positions[r] * omega);
      out(static_cast<Eigen::Index>(r), half + i) = std::cos(positions[r] * omega);
    }
  return out;
}

/// 2-D separable sine-cosine table [rows*cols, dim] in row-major token order.
/// The first half of the channels encodes the column index, the second half the row.
template <typename T>
Mat<T> sincos_2d(Eigen::Index dim, Eigen::Index rows, Eigen::Index cols) {
  USP_CHECK(dim % 4 == 0, "sincos_2d: dim must be divisible by 4");
  std::vector<double> xs, ys;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) {
      xs.push_back(static_cast<double>(c));
      ys.push_back(static_cast<double>(r));
    }
  MatD out(rows * cols, dim);
  out.leftCols(dim / 2) = sincos_1d(dim / 2, xs);
  out.rightCols(dim / 2) = sincos_1d(dim / 2, ys);
  return out.cast<T>();
}

/// Sinusoidal timestep features [cos(t f_i) | sin(t f_i)] with geometric frequencies.
template <typename T>
Mat<T> timestep_features(const std::vector<double>& t, Eigen::Index dim, double max_period = 10000.0) {
  USP_CHECK(dim % 2 == 0, "timestep_features: dim must be even");
  const Eigen::Index half = dim / 2;
  Mat<T> out(static_cast<Eigen::Index>(t.size()), dim);
  for (std::size_t r = 0; r < t.size(); ++r)
    for (Eigen::Index i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(max_period) * static_cast<double>(i) / static_cast<double>(half));
      out(static_cast<Eigen::Index>(r), i) = static_cast<T>(std::cos(t[r] * freq));
      out(static_cast<Eigen::Index>(r), half + i) = static_cast<T>(std::sin(t[r] * freq));
    }
  return out;
}

}  // namespace usp::nn

#endif  // USP_NN_HPP
