#ifndef USP_DIFFUSION_HPP
#define USP_DIFFUSION_HPP

// Class-conditional latent generators: a DiT trunk with AdaLN-Zero blocks,
// trained either as a DDPM epsilon-predictor or as a linear-path velocity
// predictor, plus ancestral and Euler samplers with classifier-free guidance.
//
// Tensor names (trunk names mirror the ViT encoder so weights can be mapped):
//   patchconv.{weight,bias}  pos_embed [T, h] (fixed)
//   t_embed.mlp0.{weight,bias} [h, F]   t_embed.mlp2.{weight,bias} [h, h]
//   y_embed.table [K + 1, h]            (row K is the null class)
//   trunk.block{i}.{ln1,ln2}.{weight,bias}   (only with ln_affine)
//   trunk.block{i}.attn.{qkv,proj}.*  trunk.block{i}.mlp.{fc1,fc2}.*
//   trunk.block{i}.adaln.{weight,bias} [6h, h]   chunks: shift1 scale1 gate1 shift2 scale2 gate2
//   final.norm.{weight,bias}  final.adaln.{weight,bias} [2h, h] (shift, scale)
//   final.linear.{weight,bias} [p*p*C_out, h]
//
// Flow time runs from data (t = 0) to noise (t = 1); the network sees 1000 t so
// both frameworks share one timestep embedder scale.

#include "usp/codec.hpp"
#include "usp/optim.hpp"
#include "usp/schedule.hpp"
#include "usp/vit.hpp"

#include <chrono>
#include <functional>
#include <map>

namespace usp::diffusion {

namespace fs = std::filesystem;
using ag::Var;

enum class Framework { ddpm_dit, flow_sit };

inline Framework parse_framework(const std::string& s) {
  if (s == "dit" || s == "ddpm_dit" || s == "ddpm") return Framework::ddpm_dit;
  if (s == "sit" || s == "flow_sit" || s == "flow") return Framework::flow_sit;
  throw config_error("unknown framework '" + s + "' (dit|sit)");
}
inline std::string framework_name(Framework f) { return f == Framework::ddpm_dit ? "dit" : "sit"; }

/// Flow time is fed to the timestep embedder on the DDPM index scale.
constexpr double kFlowTimeScale = 1000.0;

struct GeneratorConfig {
  Framework framework = Framework::ddpm_dit;
  std::string preset = "tiny";
  vit::TrunkGeometry trunk{8, 3, 48, 4};
  int patch = 2;
  int latent_channels = 4;
  int latent_size = 8;
  int num_classes = 10;
  double class_dropout = 0.1;
  bool ln_affine = true;       // trainable LN scale and bias inside AdaLN blocks
  bool learned_sigma = false;  // doubles the output channels (variance interpolation)
  double gate_bias = 0.0;      // initial bias of the gate chunks (0: AdaLN-Zero)
  int freq_dim = 256;

  int grid() const { return latent_size / patch; }
  int tokens() const { return grid() * grid(); }
  int null_class() const { return num_classes; }
  int out_channels() const { return learned_sigma ? 2 * latent_channels : latent_channels; }
  Eigen::Index latent_dim() const { return static_cast<Eigen::Index>(latent_channels) * latent_size * latent_size; }

  void validate() const {
    USP_CHECK(patch > 0 && latent_size % patch == 0, "generator config: latent grid side not divisible by patch size");
    USP_CHECK(trunk.depth >= 0 && trunk.dim % trunk.heads == 0 && trunk.dim % 4 == 0,
              "generator config: dim must be divisible by heads and by 4");
    USP_CHECK(num_classes >= 1, "generator config: num_classes must be >= 1");
    USP_CHECK(class_dropout >= 0.0 && class_dropout < 1.0, "generator config: class dropout must lie in [0,1)");
    USP_CHECK(freq_dim > 0 && freq_dim % 2 == 0, "generator config: freq_dim must be even");
  }

  /// Generator whose trunk geometry equals a pretraining encoder's.
  static GeneratorConfig matching(const vit::PretrainModelConfig& m, Framework f = Framework::ddpm_dit) {
    GeneratorConfig g;
    g.framework = f;
    g.preset = m.preset;
    g.trunk = m.encoder;
    g.patch = m.patch;
    g.latent_channels = m.latent_channels;
    g.latent_size = m.latent_size;
    return g;
  }

  json to_json() const {
    return {{"framework", framework_name(framework)},
            {"preset", preset},
            {"trunk", {{"depth", trunk.depth}, {"heads", trunk.heads}, {"dim", trunk.dim}, {"mlp_ratio", trunk.mlp_ratio}}},
            {"patch", patch},
            {"latent_channels", latent_channels},
            {"latent_size", latent_size},
            {"num_classes", num_classes},
            {"class_dropout", class_dropout},
            {"ln_affine", ln_affine},
            {"learned_sigma", learned_sigma},
            {"gate_bias", gate_bias},
            {"freq_dim", freq_dim}};
  }
  static GeneratorConfig from_json(const json& j) {
    GeneratorConfig g;
    g.framework = parse_framework(j.at("framework"));
    g.preset = j.at("preset");
    const auto& t = j.at("trunk");
    g.trunk = {t.at("depth"), t.at("heads"), t.at("dim"), t.at("mlp_ratio")};
    g.patch = j.at("patch");
    g.latent_channels = j.at("latent_channels");
    g.latent_size = j.at("latent_size");
    g.num_classes = j.at("num_classes");
    g.class_dropout = j.at("class_dropout");
    g.ln_affine = j.at("ln_affine");
    g.learned_sigma = j.at("learned_sigma");
    g.gate_bias = j.at("gate_bias");
    g.freq_dim = j.at("freq_dim");
    return g;
  }
};

/// How block modulation is obtained. `forced_identity` pins shift = 0,
/// scale = 0, gate = 1 in every block and the final layer, which turns the
/// trunk into a plain pre-norm ViT.
enum class Modulation { learned, forced_identity };

template <typename T>
struct AdaLNBlock {
  nn::LayerNorm<T> ln1, ln2;
  nn::Attention<T> attn;
  nn::Mlp<T> mlp;
  nn::Linear<T> adaln;
};

template <typename T>
class Generator {
 public:
  Generator(const GeneratorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    const Eigen::Index h = cfg.trunk.dim, C = cfg.latent_channels, p = cfg.patch;
    patchconv_.weight = store_.add("patchconv.weight", nn::trunc_normal<T>(rng, h, C * p * p), {h, C, p, p}, true);
    patchconv_.bias = store_.add("patchconv.bias", Mat<T>::Zero(1, h), {h}, false);
    pos_embed_ = store_.add("pos_embed", nn::sincos_2d<T>(h, cfg.grid(), cfg.grid()), {cfg.tokens(), h}, false, false);
    t_mlp0_ = nn::Linear<T>::create(store_, rng, "t_embed.mlp0", cfg.freq_dim, h);
    t_mlp2_ = nn::Linear<T>::create(store_, rng, "t_embed.mlp2", h, h);
    y_table_ = store_.add("y_embed.table", nn::trunc_normal<T>(rng, cfg.num_classes + 1, h), {cfg.num_classes + 1, h}, true);
    for (int i = 0; i < cfg.trunk.depth; ++i) {
      const std::string b = "trunk.block" + std::to_string(i);
      AdaLNBlock<T> blk;
      blk.ln1 = nn::LayerNorm<T>::create(store_, b + ".ln1", h, cfg.ln_affine);
      blk.attn = nn::Attention<T>::create(store_, rng, b + ".attn", h, cfg.trunk.heads);
      blk.ln2 = nn::LayerNorm<T>::create(store_, b + ".ln2", h, cfg.ln_affine);
      blk.mlp = nn::Mlp<T>::create(store_, rng, b + ".mlp", h, h * cfg.trunk.mlp_ratio);
      blk.adaln = nn::Linear<T>::create(store_, rng, b + ".adaln", h, 6 * h, true);
      if (cfg.gate_bias != 0.0) {
        auto& bias = blk.adaln.bias.mutable_value();
        bias.middleCols(2 * h, h).setConstant(T(cfg.gate_bias));
        bias.middleCols(5 * h, h).setConstant(T(cfg.gate_bias));
      }
      blocks_.push_back(blk);
    }
    final_norm_ = nn::LayerNorm<T>::create(store_, "final.norm", h, cfg.ln_affine);
    final_adaln_ = nn::Linear<T>::create(store_, rng, "final.adaln", h, 2 * h, true);
    final_linear_ = nn::Linear<T>::create(store_, rng, "final.linear", h, p * p * cfg.out_channels(), true);
  }

  const GeneratorConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }

  /// Patch tokens with positions: [N, C*S*S] -> [N*T, h].
  Var<T> embed(const Mat<T>& latents) const {
    const Mat<T> patches = vit::patchify_raw<T>(latents, cfg_.latent_channels, cfg_.latent_size, cfg_.patch);
    return ag::add_tiled(patchconv_(Var<T>::constant(patches)), pos_embed_);
  }

  /// Conditioning vector c = t_embed(t) + y_embed(y): [N, h].
  Var<T> conditioning(const std::vector<double>& t_model, const std::vector<int>& labels) const {
    USP_CHECK(t_model.size() == labels.size(), "generator: timestep/label count mismatch");
    const Var<T> tf = Var<T>::constant(nn::timestep_features<T>(t_model, cfg_.freq_dim));
    const Var<T> te = t_mlp2_(ag::silu(t_mlp0_(tf)));
    std::vector<ag::RowRef> refs;
    for (int y : labels) {
      USP_CHECK(y >= 0 && y <= cfg_.num_classes, "generator: label out of range");
      refs.push_back({0, y});
    }
    return ag::add(te, ag::gather_rows<T>({y_table_}, refs));
  }

  /// One block. With `forced_identity` the conditioning is ignored.
  Var<T> block(int i, const Var<T>& x, const Var<T>& silu_c, Eigen::Index batch, Modulation mode) const {
    const auto& b = blocks_.at(static_cast<std::size_t>(i));
    const Eigen::Index T_ = cfg_.tokens(), h = cfg_.trunk.dim;
    if (mode == Modulation::forced_identity) {
      Var<T> y = ag::add(x, b.attn(b.ln1(x), batch, T_));
      return ag::add(y, b.mlp(b.ln2(y)));
    }
    const Var<T> mod = b.adaln(silu_c);
    auto chunk = [&](int k) { return ag::slice_cols(mod, k * h, h); };
    Var<T> y = ag::gated_residual(x, chunk(2), b.attn(ag::modulate(b.ln1(x), chunk(0), chunk(1), T_), batch, T_), T_);
    return ag::gated_residual(y, chunk(5), b.mlp(ag::modulate(b.ln2(y), chunk(3), chunk(4), T_)), T_);
  }

  /// Blocks then the (modulated) final norm over tokens [N*T, h]. When
  /// `layers` is given each block output is appended to it.
  Var<T> trunk(Var<T> x, const Var<T>& c, Eigen::Index batch, Modulation mode,
               std::vector<Var<T>>* layers = nullptr) const {
    const Var<T> sc = mode == Modulation::learned ? ag::silu(c) : Var<T>();
    for (int i = 0; i < cfg_.trunk.depth; ++i) {
      x = block(i, x, sc, batch, mode);
      if (layers) layers->push_back(x);
    }
    if (mode == Modulation::forced_identity) return final_norm_(x);
    const Var<T> mod = final_adaln_(sc);
    const Eigen::Index h = cfg_.trunk.dim;
    return ag::modulate(final_norm_(x), ag::slice_cols(mod, 0, h), ag::slice_cols(mod, h, h), cfg_.tokens());
  }

  /// Output head and unpatchify: [N*T, h] -> [N, C_out*S*S] in latent layout.
  Var<T> head(const Var<T>& tokens, Eigen::Index batch) const {
    return ag::gather_flat(final_linear_(tokens), batch, static_cast<Eigen::Index>(cfg_.out_channels()) *
                                                             cfg_.latent_size * cfg_.latent_size,
                           unpatchify_index(batch));
  }

  /// Network output for noisy latents [N, C*S*S] at model timesteps and labels.
  Var<T> forward(const Mat<T>& latents, const std::vector<double>& t_model, const std::vector<int>& labels,
                 Modulation mode = Modulation::learned) const {
    const Eigen::Index n = latents.rows();
    USP_CHECK(static_cast<Eigen::Index>(labels.size()) == n, "generator: label count mismatch");
    return head(trunk(embed(latents), conditioning(t_model, labels), n, mode), n);
  }

  Mat<T> predict(const Mat<T>& latents, const std::vector<double>& t_model, const std::vector<int>& labels) const {
    ag::NoGradGuard ng;
    return forward(latents, t_model, labels).value();
  }

  /// Token output of every block: depth matrices [N*T, h].
  std::vector<Mat<T>> block_outputs(const Mat<T>& latents, const std::vector<double>& t_model,
                                    const std::vector<int>& labels) const {
    ag::NoGradGuard ng;
    std::vector<Var<T>> layers;
    trunk(embed(latents), conditioning(t_model, labels), latents.rows(), Modulation::learned, &layers);
    std::vector<Mat<T>> out;
    for (const auto& l : layers) out.push_back(l.value());
    return out;
  }

 private:
  std::shared_ptr<const std::vector<Eigen::Index>> unpatchify_index(Eigen::Index batch) const {
    auto it = unpatchify_cache_.find(batch);
    if (it != unpatchify_cache_.end()) return it->second;
    const int C = cfg_.out_channels(), S = cfg_.latent_size, p = cfg_.patch, g = cfg_.grid(), T_ = cfg_.tokens();
    const Eigen::Index pd = static_cast<Eigen::Index>(C) * p * p, width = static_cast<Eigen::Index>(C) * S * S;
    auto idx = std::make_shared<std::vector<Eigen::Index>>(static_cast<std::size_t>(batch * width));
    for (Eigen::Index n = 0; n < batch; ++n)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < S; ++y)
          for (int x = 0; x < S; ++x) {
            const Eigen::Index row = n * T_ + (y / p) * g + x / p;
            const Eigen::Index col = (static_cast<Eigen::Index>(c) * p + y % p) * p + x % p;
            (*idx)[static_cast<std::size_t>(n * width + (static_cast<Eigen::Index>(c) * S + y) * S + x)] = row * pd + col;
          }
    unpatchify_cache_[batch] = idx;
    return idx;
  }

  GeneratorConfig cfg_;
  nn::ParamStore<T> store_;
  nn::Linear<T> patchconv_;
  Var<T> pos_embed_, y_table_;
  nn::Linear<T> t_mlp0_, t_mlp2_;
  std::vector<AdaLNBlock<T>> blocks_;
  nn::LayerNorm<T> final_norm_;
  nn::Linear<T> final_adaln_, final_linear_;
  mutable std::map<Eigen::Index, std::shared_ptr<const std::vector<Eigen::Index>>> unpatchify_cache_;
};

// ---------------------------------------------------------------------------
// Losses. A predictor maps (x_t, model timesteps, labels) to the network output
// in latent layout; its width is D, or 2D when variance channels follow.

template <typename T>
using Predictor = std::function<Var<T>(const Mat<T>&, const std::vector<double>&, const std::vector<int>&)>;

template <typename T>
Predictor<T> predictor_of(const Generator<T>& g) {
  return [&g](const Mat<T>& x, const std::vector<double>& t, const std::vector<int>& y) { return g.forward(x, t, y); };
}

/// Replaces each label by the null class with probability p.
inline std::vector<int> drop_labels(std::vector<int> labels, double p, int null_class, Rng& rng) {
  for (auto& y : labels)
    if (rng.uniform() < p) y = null_class;
  return labels;
}

/// Per-row schedule coefficients broadcast over D columns.
template <typename T>
Mat<T> row_constants(const std::vector<double>& per_row, Eigen::Index cols) {
  Mat<T> m(static_cast<Eigen::Index>(per_row.size()), cols);
  for (std::size_t i = 0; i < per_row.size(); ++i) m.row(static_cast<Eigen::Index>(i)).setConstant(T(per_row[i]));
  return m;
}

/// Variational bound term (in bits per dimension) for learned variance
/// channels `v` in [-1, 1]; the mean comes from the detached epsilon prediction.
template <typename T>
Var<T> variance_bound(const Var<T>& v, const Mat<T>& eps_hat, const Mat<T>& x0, const Mat<T>& xt,
                      const std::vector<int>& t, const NoiseSchedule& s) {
  const Eigen::Index n = x0.rows(), d = x0.cols();
  std::vector<double> a(static_cast<std::size_t>(n)), b(a), cx0(a), cxt(a), lq(a), sab(a), s1m(a);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int ti = t[static_cast<std::size_t>(i)];
    const auto k = static_cast<std::size_t>(i);
    const double lo = s.posterior_log_variance_clipped(ti), hi = std::log(s.beta(ti));
    a[k] = 0.5 * (hi - lo);
    b[k] = 0.5 * (hi + lo);
    cx0[k] = s.posterior_mean_coef_x0(ti);
    cxt[k] = s.posterior_mean_coef_xt(ti);
    lq[k] = s.posterior_log_variance_clipped(ti);
    sab[k] = std::sqrt(s.alpha_bar(ti));
    s1m[k] = std::sqrt(1.0 - s.alpha_bar(ti));
  }
  // model log-variance L = b + a v (interpolation between the posterior and beta)
  const Var<T> L = ag::add(ag::mul(v, Var<T>::constant(row_constants<T>(a, d))), Var<T>::constant(row_constants<T>(b, d)));
  const Mat<T> x0_hat = (xt - row_constants<T>(s1m, d).cwiseProduct(eps_hat)).cwiseQuotient(row_constants<T>(sab, d));
  const Mat<T> mu_p = row_constants<T>(cx0, d).cwiseProduct(x0_hat) + row_constants<T>(cxt, d).cwiseProduct(xt);
  const Mat<T> mu_q = row_constants<T>(cx0, d).cwiseProduct(x0) + row_constants<T>(cxt, d).cwiseProduct(xt);
  // KL for t > 0: 0.5 (L - lq - 1 + exp(-L) (exp(lq) + (mu_q - mu_p)^2));
  // decoder NLL for t = 0: 0.5 (log 2 pi + L + exp(-L) (x0 - mu_p)^2).
  Mat<T> k_coef(n, d), offset(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    if (t[k] == 0) {
      k_coef.row(i) = (x0.row(i) - mu_p.row(i)).array().square();
      offset.row(i).setConstant(T(std::log(2.0 * std::numbers::pi)));
    } else {
      k_coef.row(i) = (mu_q.row(i) - mu_p.row(i)).array().square() + T(std::exp(lq[k]));
      offset.row(i).setConstant(T(-lq[k] - 1.0));
    }
  }
  const Var<T> inner = ag::add(ag::add(L, ag::mul(ag::exp(ag::scale(L, T(-1))), Var<T>::constant(k_coef))),
                               Var<T>::constant(offset));
  return ag::scale(ag::mean_all(inner), T(0.5 / std::log(2.0)));
}

/// Epsilon-prediction loss at given timesteps and noise. With variance
/// channels the bound term is added (hybrid objective).
template <typename T>
Var<T> ddpm_loss_at(const Predictor<T>& model, const Mat<T>& x0, const std::vector<int>& labels,
                    const NoiseSchedule& s, const std::vector<int>& t, const Mat<T>& eps) {
  const Eigen::Index n = x0.rows(), d = x0.cols();
  USP_CHECK(static_cast<Eigen::Index>(t.size()) == n && eps.rows() == n && eps.cols() == d, "ddpm_loss: shape mismatch");
  Mat<T> xt(n, d);
  std::vector<double> tm(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const int ti = t[static_cast<std::size_t>(i)];
    xt.row(i) = s.q_sample<T>(x0.row(i), ti, eps.row(i));
    tm[static_cast<std::size_t>(i)] = s.model_timestep(ti);
  }
  const Var<T> out = model(xt, tm, labels);
  if (out.cols() == d) return ag::mse(out, eps);
  USP_CHECK(out.cols() == 2 * d, "ddpm_loss: model output width must be D or 2D");
  const Var<T> eps_hat = ag::slice_cols(out, 0, d);
  const Var<T> v = ag::slice_cols(out, d, d);
  return ag::add(ag::mse(eps_hat, eps), variance_bound(v, eps_hat.value(), x0, xt, t, s));
}

/// Epsilon-prediction loss with uniform t, unit Gaussian noise and label dropout,
/// all drawn from `seed`.
template <typename T>
Var<T> ddpm_loss(const Predictor<T>& model, const Mat<T>& x0, const std::vector<int>& labels, const NoiseSchedule& s,
                 std::uint64_t seed, double label_dropout = 0.0, int null_class = -1) {
  Rng rng(seed);
  std::vector<int> t(static_cast<std::size_t>(x0.rows()));
  for (auto& v : t) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(s.steps())));
  const Mat<T> eps = randn<T>(rng, x0.rows(), x0.cols());
  const auto y = label_dropout > 0.0 ? drop_labels(labels, label_dropout, null_class, rng) : labels;
  return ddpm_loss_at(model, x0, y, s, t, eps);
}

/// x_t = (1 - t) x0 + t eps row-wise.
template <typename T>
Mat<T> flow_interpolate_rows(const Mat<T>& x0, const Mat<T>& eps, const std::vector<double>& t) {
  Mat<T> xt(x0.rows(), x0.cols());
  for (Eigen::Index i = 0; i < x0.rows(); ++i)
    xt.row(i) = FlowPath::interpolate<T>(x0.row(i), eps.row(i), T(t[static_cast<std::size_t>(i)]));
  return xt;
}

/// Velocity regression at given times and noise. Extra output channels (when
/// the trunk carries variance channels) are ignored.
template <typename T>
Var<T> flow_loss_at(const Predictor<T>& model, const Mat<T>& x0, const std::vector<int>& labels,
                    const std::vector<double>& t, const Mat<T>& eps) {
  const Eigen::Index n = x0.rows(), d = x0.cols();
  USP_CHECK(static_cast<Eigen::Index>(t.size()) == n && eps.rows() == n && eps.cols() == d, "flow_loss: shape mismatch");
  std::vector<double> tm(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) tm[i] = kFlowTimeScale * t[i];
  const Var<T> out = model(flow_interpolate_rows(x0, eps, t), tm, labels);
  USP_CHECK(out.cols() == d || out.cols() == 2 * d, "flow_loss: model output width must be D or 2D");
  const Mat<T> target = FlowPath::velocity<T>(x0, eps);
  return ag::mse(out.cols() == d ? out : ag::slice_cols(out, 0, d), target);
}

template <typename T>
Var<T> flow_loss(const Predictor<T>& model, const Mat<T>& x0, const std::vector<int>& labels, std::uint64_t seed,
                 double label_dropout = 0.0, int null_class = -1) {
  Rng rng(seed);
  std::vector<double> t(static_cast<std::size_t>(x0.rows()));
  for (auto& v : t) v = rng.uniform();
  const Mat<T> eps = randn<T>(rng, x0.rows(), x0.cols());
  const auto y = label_dropout > 0.0 ? drop_labels(labels, label_dropout, null_class, rng) : labels;
  return flow_loss_at(model, x0, y, t, eps);
}

/// Training loss of a generator for its framework.
template <typename T>
Var<T> generator_loss(const Generator<T>& g, const Mat<T>& x0, const std::vector<int>& labels, std::uint64_t seed,
                      const NoiseSchedule& s) {
  const auto& c = g.config();
  return c.framework == Framework::ddpm_dit
             ? ddpm_loss<T>(predictor_of(g), x0, labels, s, seed, c.class_dropout, c.null_class())
             : flow_loss<T>(predictor_of(g), x0, labels, seed, c.class_dropout, c.null_class());
}

// ---------------------------------------------------------------------------
// Sampling

template <typename T>
Mat<T> cfg_combine(const Mat<T>& out_cond, const Mat<T>& out_uncond, double w) {
  USP_CHECK(out_cond.rows() == out_uncond.rows() && out_cond.cols() == out_uncond.cols(), "cfg_combine: shape mismatch");
  return out_uncond + T(w) * (out_cond - out_uncond);
}

enum class SamplerKind { ddpm_ancestral, flow_euler };

struct SamplerConfig {
  SamplerKind kind = SamplerKind::ddpm_ancestral;
  int steps = 250;
  double cfg_scale = 1.0;  // 1: guidance off
  std::uint64_t seed = 0;

  bool guided() const { return cfg_scale != 1.0; }
  void validate() const {
    USP_CHECK(steps >= 1, "sampler: steps must be >= 1");
    USP_CHECK(cfg_scale >= 0.0, "sampler: cfg scale must be >= 0");
  }
  json to_json() const {
    return {{"kind", kind == SamplerKind::ddpm_ancestral ? "ddpm_ancestral" : "flow_euler"},
            {"steps", steps},
            {"cfg_scale", cfg_scale},
            {"seed", seed}};
  }
};

/// Inference-only predictor returning the network output as a matrix.
template <typename T>
using MatPredictor = std::function<Mat<T>(const Mat<T>&, const std::vector<double>&, const std::vector<int>&)>;

template <typename T>
MatPredictor<T> mat_predictor_of(const Generator<T>& g) {
  return [&g](const Mat<T>& x, const std::vector<double>& t, const std::vector<int>& y) { return g.predict(x, t, y); };
}

/// Network output with guidance on the first D columns; any variance columns
/// come from the conditional pass.
template <typename T>
Mat<T> guided_output(const MatPredictor<T>& model, const Mat<T>& x, const std::vector<double>& t,
                     const std::vector<int>& labels, double w, int null_class) {
  if (w == 1.0) return model(x, t, labels);
  const Eigen::Index n = x.rows(), d = x.cols();
  Mat<T> xx(2 * n, d);
  xx << x, x;
  std::vector<double> tt = t;
  tt.insert(tt.end(), t.begin(), t.end());
  std::vector<int> yy = labels;
  yy.insert(yy.end(), static_cast<std::size_t>(n), null_class);
  const Mat<T> both = model(xx, tt, yy);
  Mat<T> out = both.topRows(n);
  out.leftCols(d) = cfg_combine<T>(both.topRows(n).leftCols(d), both.bottomRows(n).leftCols(d), w);
  return out;
}

/// Ancestral reverse chain over `steps` respaced timesteps with the posterior
/// variance (or the learned interpolation when variance channels exist).
/// `init` replaces the initial unit Gaussian draw when given.
template <typename T>
Mat<T> ddpm_sample(const MatPredictor<T>& model, const NoiseSchedule& base, const SamplerConfig& sc,
                   const std::vector<int>& labels, Eigen::Index dim, int null_class, const Mat<T>* init = nullptr) {
  sc.validate();
  USP_CHECK(sc.steps <= base.steps(), "ddpm_sample: more sampling steps than schedule steps");
  const NoiseSchedule s = base.respaced(sc.steps);
  const auto n = static_cast<Eigen::Index>(labels.size());
  Rng rng(sc.seed);
  Mat<T> x = init ? *init : randn<T>(rng, n, dim);
  USP_CHECK(x.rows() == n && x.cols() == dim, "ddpm_sample: initial noise shape mismatch");
  for (int i = s.steps() - 1; i >= 0; --i) {
    const std::vector<double> tm(static_cast<std::size_t>(n), static_cast<double>(s.model_timestep(i)));
    const Mat<T> out = guided_output(model, x, tm, labels, sc.cfg_scale, null_class);
    USP_CHECK(out.cols() == dim || out.cols() == 2 * dim, "ddpm_sample: model output width must be D or 2D");
    const double ab = s.alpha_bar(i);
    const Mat<T> x0 = (x - T(std::sqrt(1.0 - ab)) * out.leftCols(dim)) / T(std::sqrt(ab));
    Mat<T> mean = T(s.posterior_mean_coef_x0(i)) * x0 + T(s.posterior_mean_coef_xt(i)) * x;
    if (i > 0) {
      const Mat<T> z = randn<T>(rng, n, dim);
      if (out.cols() == dim) {
        x = mean + T(std::sqrt(s.posterior_variance(i))) * z;
      } else {
        const double lo = s.posterior_log_variance_clipped(i), hi = std::log(s.beta(i));
        const Mat<T> frac = (out.rightCols(dim).array() + T(1)) / T(2);
        const Mat<T> logvar = (frac.array() * T(hi) + (T(1) - frac.array()) * T(lo)).matrix();
        x = mean + (T(0.5) * logvar.array()).exp().matrix().cwiseProduct(z);
      }
    } else {
      x = std::move(mean);
    }
    if (!all_finite(x)) throw numeric_error("ddpm_sample: non-finite sample at step " + std::to_string(i));
  }
  return x;
}

/// Euler integration of dx/dt = v from t = 1 to t = 0 on a uniform grid.
template <typename T>
Mat<T> flow_sample(const MatPredictor<T>& model, const SamplerConfig& sc, const std::vector<int>& labels,
                   Eigen::Index dim, int null_class, const Mat<T>* init = nullptr) {
  sc.validate();
  const auto n = static_cast<Eigen::Index>(labels.size());
  Rng rng(sc.seed);
  Mat<T> x = init ? *init : randn<T>(rng, n, dim);
  USP_CHECK(x.rows() == n && x.cols() == dim, "flow_sample: initial noise shape mismatch");
  const double dt = 1.0 / sc.steps;
  for (int k = 0; k < sc.steps; ++k) {
    const double t = 1.0 - k * dt;
    const std::vector<double> tm(static_cast<std::size_t>(n), kFlowTimeScale * t);
    const Mat<T> v = guided_output(model, x, tm, labels, sc.cfg_scale, null_class);
    USP_CHECK(v.cols() == dim || v.cols() == 2 * dim, "flow_sample: model output width must be D or 2D");
    x -= T(dt) * v.leftCols(dim);
    if (!all_finite(x)) throw numeric_error("flow_sample: non-finite sample at step " + std::to_string(k));
  }
  return x;
}

/// Samples latents from a generator with its framework's sampler. Guidance
/// requires a model trained with null-class dropout.
template <typename T>
Mat<T> sample(const Generator<T>& g, SamplerConfig sc, const std::vector<int>& labels) {
  const auto& c = g.config();
  if (sc.guided() && c.class_dropout <= 0.0)
    throw config_error("sample: classifier-free guidance requested on a model trained without label dropout");
  sc.kind = c.framework == Framework::ddpm_dit ? SamplerKind::ddpm_ancestral : SamplerKind::flow_euler;
  const auto model = mat_predictor_of(g);
  return c.framework == Framework::ddpm_dit
             ? ddpm_sample<T>(model, NoiseSchedule::linear(), sc, labels, c.latent_dim(), c.null_class())
             : flow_sample<T>(model, sc, labels, c.latent_dim(), c.null_class());
}

/// Balanced labels 0, 1, ..., K-1, 0, 1, ... of length n.
inline std::vector<int> balanced_labels(std::size_t n, int num_classes) {
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % static_cast<std::size_t>(num_classes));
  return y;
}

/// Generated latents stored in the latent-cache container (one orientation).
inline codec::LatentCache samples_to_cache(const MatF& latents, const std::vector<int>& labels,
                                           const GeneratorConfig& c, const std::string& codec_fingerprint) {
  codec::LatentCache out;
  out.codec_fingerprint = codec_fingerprint;
  out.orientations = 1;
  out.channels = c.latent_channels;
  out.height = out.width = c.latent_size;
  out.labels = labels;
  out.latents = latents;
  for (std::size_t i = 0; i < labels.size(); ++i) out.ids.push_back(static_cast<std::uint32_t>(i));
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct GenTrainOptions {
  GeneratorConfig model;
  std::int64_t steps = 20000;
  int batch = 256;
  double lr = 1e-4;  // constant
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
  std::int64_t log_every = 100;
  double ema_decay = -1.0;  // negative: off
  bool verbose = false;

  void validate() const {
    model.validate();
    USP_CHECK(steps >= 0 && batch > 0 && lr >= 0.0 && log_every > 0 && checkpoint_every >= 0,
              "train-gen: steps >= 0, batch > 0, lr >= 0, log_every > 0 required");
    USP_CHECK(ema_decay < 1.0, "train-gen: ema decay must be < 1");
  }
  json to_json() const {
    return {{"model", model.to_json()}, {"steps", steps},       {"batch", batch},
            {"lr", lr},                 {"weight_decay", weight_decay}, {"seed", seed},
            {"ema_decay", ema_decay}};
  }
};

struct StepMetrics {
  std::int64_t step = 0;
  double loss = 0.0;  // mean over the logging interval
  double seconds = 0.0;
};

inline void write_step_csv(const std::vector<StepMetrics>& rows, const fs::path& path, bool wall_clock = true) {
  std::ostringstream out;
  out << "step,loss,seconds\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.3f\n", static_cast<long long>(r.step), r.loss,
                  wall_clock ? r.seconds : 0.0);
    out << buf;
  }
  io::write_file_atomic(path, out.str());
}

struct GenTrainResult {
  CheckpointArchive archive;
  std::vector<StepMetrics> metrics;
  std::vector<std::pair<std::int64_t, fs::path>> checkpoints;
};

inline std::string checkpoint_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%07lld.uspk", static_cast<long long>(step));
  return buf;
}

inline CheckpointArchive generator_archive(const nn::ParamStore<float>& store, const GeneratorConfig& cfg,
                                           const json& train, const std::vector<std::string>& parents,
                                           std::int64_t steps) {
  CheckpointArchive a;
  a.stage = "generator";
  a.config = {{"generator", cfg.to_json()}, {"train", train}};
  a.parents = parents;
  a.store_params(store);
  a.meta["steps"] = steps;
  return a;
}

/// Rebuilds a generator from an archive of stage "generator".
inline Generator<float> load_generator(const CheckpointArchive& a) {
  if (a.stage != "generator") throw invalid_argument("expected a generator archive, got '" + a.stage + "'");
  Generator<float> g(GeneratorConfig::from_json(a.config.at("generator")), 0);
  a.load_params(g.params());
  return g;
}

/// Trains a generator on cached latents. `init` (stage "generator", e.g. a
/// transplant) provides initial weights; without it the generator starts from
/// the seeded fresh initialization. The framework of `opt.model` wins over the
/// init archive's, every other field must agree.
inline GenTrainResult train_generator(const codec::LatentCache& cache, const std::string& expected_fingerprint,
                                      const GenTrainOptions& opt, const CheckpointArchive* init = nullptr,
                                      const fs::path& run_dir = {}) {
  opt.validate();
  if (cache.codec_fingerprint != expected_fingerprint)
    throw digest_mismatch("train-gen: cache codec fingerprint " + cache.codec_fingerprint +
                          " does not match configured codec " + expected_fingerprint);
  const auto& mc = opt.model;
  USP_CHECK(cache.channels == mc.latent_channels && cache.height == mc.latent_size,
            "train-gen: cache latent geometry does not match the generator config");
  const std::size_t n = cache.count();
  const auto batch = static_cast<std::size_t>(opt.batch);
  USP_CHECK(n >= batch || opt.steps == 0, "train-gen: fewer cached samples than one batch");
  for (int y : cache.labels)
    USP_CHECK(y >= 0 && y < mc.num_classes, "train-gen: cached label outside the generator's class range");

  Generator<float> g(mc, derive_seed(opt.seed, "gen.init"));
  std::vector<std::string> parents{cache.codec_fingerprint};
  json train = opt.to_json();
  train["codec_fingerprint"] = cache.codec_fingerprint;
  if (init) {
    if (init->stage != "generator") throw invalid_argument("train-gen: init archive must have stage 'generator'");
    GeneratorConfig ic = GeneratorConfig::from_json(init->config.at("generator"));
    ic.framework = mc.framework;
    if (ic.to_json() != mc.to_json())
      throw config_error("train-gen: init archive generator config differs from the requested one");
    init->load_params(g.params());
    parents = init->parents;
    parents.push_back(init->digest());
    train["init"] = init->digest();
  } else {
    train["init"] = "random";
  }
  optim::AdamW<float> adam(g.params(), {0.9, 0.999, 1e-8, opt.weight_decay});
  const NoiseSchedule sched = NoiseSchedule::linear();

  std::vector<MatF> ema;
  if (opt.ema_decay >= 0.0)
    for (const auto& p : g.params().params()) ema.push_back(p.var.value());
  auto snapshot = [&](std::int64_t step) {
    if (ema.empty()) return generator_archive(g.params(), mc, train, parents, step);
    Generator<float> shadow(mc, 0);
    for (std::size_t i = 0; i < ema.size(); ++i) shadow.params().params()[i].var.mutable_value() = ema[i];
    auto a = generator_archive(shadow.params(), mc, train, parents, step);
    a.meta["ema"] = true;
    return a;
  };

  GenTrainResult r;
  if (!run_dir.empty()) fs::create_directories(run_dir);
  auto save = [&](std::int64_t step) {
    if (run_dir.empty()) return;
    const fs::path p = run_dir / checkpoint_name(step);
    snapshot(step).save(p);
    r.checkpoints.emplace_back(step, p);
  };

  const std::int64_t per_epoch = static_cast<std::int64_t>(n / std::max<std::size_t>(batch, 1));
  std::vector<std::size_t> order(n);
  std::int64_t epoch = -1;
  double window = 0.0;
  std::int64_t in_window = 0;
  auto t0 = std::chrono::steady_clock::now();
  if (opt.checkpoint_every > 0) save(0);
  for (std::int64_t step = 0; step < opt.steps; ++step) {
    if (step / per_epoch != epoch) {
      epoch = step / per_epoch;
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      Rng erng(derive_seed(opt.seed, "gen.epoch", static_cast<std::uint64_t>(epoch)));
      erng.shuffle(order);
    }
    Rng srng(derive_seed(opt.seed, "gen.step", static_cast<std::uint64_t>(step)));
    const std::size_t start = static_cast<std::size_t>(step % per_epoch) * batch;
    MatF xb(opt.batch, cache.dim());
    std::vector<int> yb(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      const std::size_t s = order[start + i];
      const auto o = cache.orientations > 1 ? srng.below(static_cast<std::uint64_t>(cache.orientations)) : 0;
      xb.row(static_cast<Eigen::Index>(i)) =
          cache.latents.row(static_cast<Eigen::Index>(s) * cache.orientations + static_cast<Eigen::Index>(o));
      yb[i] = cache.labels[s];
    }
    g.params().zero_grad();
    auto loss = generator_loss(g, xb, yb, srng.next(), sched);
    const double l = loss.item();
    if (!std::isfinite(l)) throw numeric_error("train-gen: non-finite loss at step " + std::to_string(step));
    ag::backward(loss);
    adam.step(opt.lr);
    if (!ema.empty()) {
      const auto d = static_cast<float>(opt.ema_decay);
      for (std::size_t i = 0; i < ema.size(); ++i) ema[i] = d * ema[i] + (1.0f - d) * g.params().params()[i].var.value();
    }
    window += l;
    ++in_window;
    const std::int64_t done = step + 1;
    if (done % opt.log_every == 0 || done == opt.steps) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      r.metrics.push_back({done, window / static_cast<double>(in_window), secs});
      if (opt.verbose)
        std::fprintf(stderr, "[train-gen %s] step %lld loss %.5f (%.1fs)\n", framework_name(mc.framework).c_str(),
                     static_cast<long long>(done), r.metrics.back().loss, secs);
      window = 0.0;
      in_window = 0;
      t0 = std::chrono::steady_clock::now();
    }
    if (opt.checkpoint_every > 0 && done % opt.checkpoint_every == 0 && done != opt.steps) save(done);
  }
  if (r.checkpoints.empty() || r.checkpoints.back().first != opt.steps) save(opt.steps);
  r.archive = snapshot(opt.steps);
  return r;
}

}  // namespace usp::diffusion

#endif  // USP_DIFFUSION_HPP
