#ifndef USP_EVAL_HPP
#define USP_EVAL_HPP

// Generation and representation metrics.
//
//   Frechet distance between Gaussian fits of embedded samples (USPS files
//   hold reference statistics), class score exp(E KL(p(y|x) || p(y))), linear
//   and layerwise probes on frozen trunks, full fine-tuning with layer-wise
//   learning-rate decay, and FD-versus-step convergence curves.
//
// The embedder is a small conv classifier trained once on the desk dataset and
// then frozen. Its archive uses stage "classifier" with config arch "conv"; the
// archive digest is the fingerprint carried by every statistic it produced.

#include "usp/pretrain.hpp"
#include "usp/transplant.hpp"

#include <Eigen/Eigenvalues>

#include <map>
#include <optional>

namespace usp::eval {

namespace fs = std::filesystem;
using ag::Var;

// ---------------------------------------------------------------------------
// Frechet statistics

struct FrechetStats {
  RowVec<double> mu;
  MatD sigma;  // unbiased covariance, symmetric
  std::int64_t n = 0;
  std::string fingerprint;

  Eigen::Index dim() const { return mu.cols(); }
};

/// Mean and unbiased covariance of feature rows. Accumulation order is fixed,
/// so equal inputs give bitwise-equal statistics.
inline FrechetStats compute_stats(const MatD& features, const std::string& fingerprint,
                                  std::string* warning = nullptr) {
  USP_CHECK(features.rows() >= 2, "compute_stats: at least two samples required");
  FrechetStats s;
  s.n = features.rows();
  s.fingerprint = fingerprint;
  s.mu = features.colwise().mean();
  const MatD centered = features.rowwise() - s.mu;
  s.sigma = (centered.transpose() * centered) / static_cast<double>(s.n - 1);
  s.sigma = 0.5 * (s.sigma + s.sigma.transpose()).eval();
  if (!s.sigma.allFinite() || !s.mu.allFinite()) throw numeric_error("compute_stats: non-finite features");
  if (warning && s.n < s.dim())
    *warning = "compute_stats: n=" + std::to_string(s.n) + " < d=" + std::to_string(s.dim()) +
               "; covariance is rank deficient";
  return s;
}

/// Symmetric PSD square root; eigenvalues below -tol are reported, all negatives clipped.
inline MatD psd_sqrt(const MatD& m, double tol = 1e-8, std::string* warning = nullptr) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(0.5 * (m + m.transpose())));
  if (es.info() != Eigen::Success) throw numeric_error("psd_sqrt: eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  if (warning && ev.size() > 0 && ev.minCoeff() < -tol)
    *warning = "negative eigenvalue " + std::to_string(ev.minCoeff()) + " clipped";
  ev = ev.cwiseMax(0.0).cwiseSqrt();
  return MatD(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
}

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}); the trace term uses
/// Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}), which shares its spectrum.
inline double frechet_distance(const FrechetStats& a, const FrechetStats& b, std::string* warning = nullptr) {
  if (a.fingerprint != b.fingerprint)
    throw digest_mismatch("frechet_distance: embedder fingerprints differ (" + a.fingerprint + " vs " + b.fingerprint +
                          ")");
  USP_CHECK(a.dim() == b.dim(), "frechet_distance: feature dimensions differ");
  const MatD sa = psd_sqrt(a.sigma, 1e-8, warning);
  const MatD inner = sa * b.sigma * sa;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(0.5 * (inner + inner.transpose())),
                                                    Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw numeric_error("frechet_distance: eigendecomposition failed");
  const Eigen::VectorXd ev = es.eigenvalues();
  if (warning && ev.size() > 0 && ev.minCoeff() < -1e-8)
    *warning = "frechet_distance: negative eigenvalue " + std::to_string(ev.minCoeff()) + " clipped";
  const double tr_sqrt = ev.cwiseMax(0.0).cwiseSqrt().sum();
  const double fd = (a.mu - b.mu).squaredNorm() + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_sqrt;
  if (!std::isfinite(fd)) throw numeric_error("frechet_distance: non-finite result");
  return std::max(fd, 0.0);
}

// ---- USPS file: "USPS" | u16 version | u32 len | fingerprint | u64 d | u64 n | mu | Sigma (f64 LE)

inline constexpr std::uint16_t kStatsVersion = 1;

inline std::string serialize_stats(const FrechetStats& s) {
  std::string out = "USPS";
  io::put<std::uint16_t>(out, kStatsVersion);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(s.fingerprint.size()));
  out += s.fingerprint;
  io::put<std::uint64_t>(out, static_cast<std::uint64_t>(s.dim()));
  io::put<std::uint64_t>(out, static_cast<std::uint64_t>(s.n));
  out.append(reinterpret_cast<const char*>(s.mu.data()), static_cast<std::size_t>(s.mu.size()) * sizeof(double));
  out.append(reinterpret_cast<const char*>(s.sigma.data()), static_cast<std::size_t>(s.sigma.size()) * sizeof(double));
  return out;
}

inline FrechetStats deserialize_stats(const std::string& bytes) {
  if (bytes.size() < 10 || bytes.compare(0, 4, "USPS") != 0) throw io_error("stats: bad magic");
  std::size_t pos = 4;
  if (io::get<std::uint16_t>(bytes, pos) != kStatsVersion) throw io_error("stats: unsupported version");
  const auto len = io::get<std::uint32_t>(bytes, pos);
  if (pos + len > bytes.size()) throw io_error("stats: truncated fingerprint");
  FrechetStats s;
  s.fingerprint = bytes.substr(pos, len);
  pos += len;
  const auto d = static_cast<Eigen::Index>(io::get<std::uint64_t>(bytes, pos));
  s.n = static_cast<std::int64_t>(io::get<std::uint64_t>(bytes, pos));
  const std::size_t need = static_cast<std::size_t>(d + d * d) * sizeof(double);
  if (bytes.size() - pos != need) throw io_error("stats: payload size does not match d");
  s.mu.resize(d);
  s.sigma.resize(d, d);
  std::memcpy(s.mu.data(), bytes.data() + pos, static_cast<std::size_t>(d) * sizeof(double));
  std::memcpy(s.sigma.data(), bytes.data() + pos + static_cast<std::size_t>(d) * sizeof(double),
              static_cast<std::size_t>(d * d) * sizeof(double));
  return s;
}

inline void save_stats(const FrechetStats& s, const fs::path& path) { io::write_file_atomic(path, serialize_stats(s)); }
inline FrechetStats load_stats(const fs::path& path) { return deserialize_stats(io::read_file(path)); }

// ---------------------------------------------------------------------------
// Class score

/// exp(mean_x KL(p(y|x) || p(y))) for rows of class probabilities.
inline double class_score(const MatD& probs) {
  USP_CHECK(probs.rows() > 0, "class_score: no samples");
  const RowVec<double> marginal = probs.colwise().mean();
  double kl = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    for (Eigen::Index k = 0; k < probs.cols(); ++k) {
      const double p = probs(i, k);
      if (p > 0.0) kl += p * (std::log(p) - std::log(marginal(k)));
    }
  const double s = std::exp(kl / static_cast<double>(probs.rows()));
  if (!std::isfinite(s)) throw numeric_error("class_score: non-finite result");
  return s;
}

inline MatD softmax_rows(const MatD& logits) {
  MatD p = (logits.colwise() - logits.rowwise().maxCoeff()).array().exp().matrix();
  return p.array().colwise() / p.rowwise().sum().array();
}

// ---------------------------------------------------------------------------
// Conv embedder

struct EmbedderConfig {
  std::string input = "pixels";  // pixels in [0,1], or raw latents
  int in_channels = 3;
  int image_size = 32;
  int num_classes = 10;
  std::vector<int> widths{16, 32, 64, 64};  // first conv stride 1, the rest stride 2

  int feature_dim() const { return widths.back(); }
  void validate() const {
    if (input != "pixels" && input != "latents") throw config_error("embedder input must be pixels or latents");
    USP_CHECK(in_channels > 0 && image_size > 0 && num_classes > 1 && !widths.empty(), "embedder: bad geometry");
  }
  json to_json() const {
    return {{"input", input}, {"in_channels", in_channels}, {"image_size", image_size},
            {"num_classes", num_classes}, {"widths", widths}};
  }
  static EmbedderConfig from_json(const json& j) {
    EmbedderConfig c;
    c.input = j.at("input");
    c.in_channels = j.at("in_channels");
    c.image_size = j.at("image_size");
    c.num_classes = j.at("num_classes");
    c.widths = j.at("widths").get<std::vector<int>>();
    return c;
  }
};

template <typename T>
class ConvEmbedder {
 public:
  ConvEmbedder(const EmbedderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    Eigen::Index cin = cfg.in_channels, side = cfg.image_size;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
      const Eigen::Index cout = cfg.widths[i], stride = i == 0 ? 1 : 2;
      const std::string name = "conv" + std::to_string(i);
      codec::detail::ConvLayer<T> l;
      l.geom = {cin, side, side, 3, stride, 1};
      l.weight = store_.add(name + ".weight", randn<T>(rng, cout, cin * 9, std::sqrt(2.0 / static_cast<double>(cin * 9))),
                            {cout, cin, 3, 3}, true);
      l.bias = store_.add(name + ".bias", Mat<T>::Zero(1, cout), {cout}, false);
      side = l.geom.out_height();
      cin = cout;
      convs_.push_back(l);
    }
    head_ = nn::Linear<T>::create(store_, rng, "head", cin, cfg.num_classes);
  }

  const EmbedderConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }

  /// Pooled features [N, widths.back()]. Pixel inputs are mapped to [-1, 1].
  Var<T> features(const Mat<T>& x) const {
    Var<T> h = Var<T>::constant(cfg_.input == "pixels" ? Mat<T>((x.array() * T(2) - T(1)).matrix()) : x);
    for (const auto& c : convs_) h = ag::gelu(c(h));
    return ag::global_avg_pool(h, cfg_.widths.back());
  }
  Var<T> logits(const Mat<T>& x) const { return head_(features(x)); }

 private:
  EmbedderConfig cfg_;
  nn::ParamStore<T> store_;
  std::vector<codec::detail::ConvLayer<T>> convs_;
  nn::Linear<T> head_;
};

struct EmbedderTrainOptions {
  int epochs = 4;
  int batch = 64;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  bool verbose = false;
  json to_json() const { return {{"epochs", epochs}, {"batch", batch}, {"lr", lr}, {"seed", seed}}; }
};

/// Trains the embedder as a classifier on (inputs, labels) and returns its frozen archive.
inline CheckpointArchive train_embedder(const MatF& inputs, const std::vector<int>& labels, const EmbedderConfig& cfg,
                                        const EmbedderTrainOptions& opt) {
  cfg.validate();
  USP_CHECK(static_cast<Eigen::Index>(labels.size()) == inputs.rows(), "train_embedder: label count mismatch");
  USP_CHECK(inputs.cols() == static_cast<Eigen::Index>(cfg.in_channels) * cfg.image_size * cfg.image_size,
            "train_embedder: input width does not match the embedder geometry");
  ConvEmbedder<float> net(cfg, derive_seed(opt.seed, "embedder.init"));
  optim::AdamW<float> adam(net.params(), {0.9, 0.999, 1e-8, 0.0});
  const auto n = static_cast<std::size_t>(inputs.rows());
  const auto batch = static_cast<std::size_t>(opt.batch);
  const std::int64_t per_epoch = static_cast<std::int64_t>(n / batch);
  USP_CHECK(per_epoch > 0 || opt.epochs == 0, "train_embedder: fewer samples than one batch");
  std::vector<std::size_t> order(n);
  std::int64_t step = 0;
  for (int e = 0; e < opt.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(opt.seed, "embedder.epoch", static_cast<std::uint64_t>(e)));
    rng.shuffle(order);
    double total = 0.0;
    for (std::int64_t b = 0; b < per_epoch; ++b, ++step) {
      MatF xb(opt.batch, inputs.cols());
      std::vector<int> yb;
      for (int i = 0; i < opt.batch; ++i) {
        const std::size_t s = order[static_cast<std::size_t>(b) * batch + static_cast<std::size_t>(i)];
        xb.row(i) = inputs.row(static_cast<Eigen::Index>(s));
        yb.push_back(labels[s]);
      }
      net.params().zero_grad();
      Var<float> loss = ag::cross_entropy(net.logits(xb), yb);
      if (!std::isfinite(loss.item())) throw numeric_error("train_embedder: non-finite loss");
      ag::backward(loss);
      adam.step(optim::lr_at(step, {0.0, opt.epochs, 0.0}, per_epoch, opt.lr));
      total += loss.item();
    }
    if (opt.verbose)
      std::fprintf(stderr, "embedder epoch %d loss %.4f\n", e, total / static_cast<double>(std::max<std::int64_t>(per_epoch, 1)));
  }
  CheckpointArchive a;
  a.stage = "classifier";
  a.config = {{"arch", "conv"}, {"embedder", cfg.to_json()}, {"train", opt.to_json()}};
  a.store_params(net.params());
  a.meta["frozen"] = true;
  a.meta["steps"] = step;
  return a;
}

/// Loaded, immutable embedder. Inputs are processed in fixed-size chunks.
class FrozenEmbedder {
 public:
  explicit FrozenEmbedder(const CheckpointArchive& a)
      : cfg_(check(a)), net_(cfg_, 0), fingerprint_(a.digest()) {
    a.load_params(net_.params());
  }

  const EmbedderConfig& config() const { return cfg_; }
  const std::string& fingerprint() const { return fingerprint_; }

  MatD features(const MatF& x) const { return run(x, false); }
  MatD probabilities(const MatF& x) const { return softmax_rows(run(x, true)); }

 private:
  static EmbedderConfig check(const CheckpointArchive& a) {
    if (a.stage != "classifier" || a.config.value("arch", "") != "conv")
      throw invalid_argument("expected a conv embedder archive (stage classifier, arch conv)");
    if (!a.meta.value("frozen", false)) throw invalid_argument("embedder archive is not frozen");
    return EmbedderConfig::from_json(a.config.at("embedder"));
  }
  MatD run(const MatF& x, bool logits) const {
    ag::NoGradGuard ng;
    USP_CHECK(x.cols() == static_cast<Eigen::Index>(cfg_.in_channels) * cfg_.image_size * cfg_.image_size,
              "embedder: input width mismatch");
    constexpr Eigen::Index kChunk = 128;
    MatD out(x.rows(), logits ? cfg_.num_classes : cfg_.feature_dim());
    for (Eigen::Index s = 0; s < x.rows(); s += kChunk) {
      const Eigen::Index n = std::min(kChunk, x.rows() - s);
      const MatF chunk = x.middleRows(s, n);
      out.middleRows(s, n) = (logits ? net_.logits(chunk) : net_.features(chunk)).value().cast<double>();
    }
    return out;
  }

  EmbedderConfig cfg_;
  ConvEmbedder<float> net_;
  std::string fingerprint_;
};

/// Latents decoded by the codec and mapped back to [0,1] pixels.
inline MatF latents_to_pixels(const codec::FrozenCodec& codec, const MatF& latents) {
  return codec::denormalize_image(codec.decode_values(latents), codec.norm());
}

/// Embedder inputs for generated latents under the embedder's input mode.
inline MatF embedder_inputs(const FrozenEmbedder& emb, const codec::FrozenCodec& codec, const MatF& latents) {
  return emb.config().input == "pixels" ? latents_to_pixels(codec, latents) : latents;
}

// ---------------------------------------------------------------------------
// Frozen trunk features

/// A labeled set of latents (orientation 0 of a cache).
struct LabeledLatents {
  MatF latents;
  std::vector<int> labels;

  static LabeledLatents from_cache(const codec::LatentCache& c) {
    return {c.grid(0).values, c.labels};
  }
  Eigen::Index size() const { return latents.rows(); }
};

/// Features of a pretrain, classifier or generator archive. Layer -1 is the
/// final representation: the normalized class token for encoders and the
/// mean-pooled last block output for generators. Layer l >= 0 is the
/// mean-pooled patch-token output of block l for every archive kind.
class FeatureTrunk {
 public:
  explicit FeatureTrunk(const CheckpointArchive& a) : stage_(a.stage), archive_digest_(a.digest()) {
    if (a.stage == "generator") {
      gen_.emplace(diffusion::load_generator(a));
      depth_ = gen_->config().trunk.depth;
    } else if (a.stage == "pretrain" || a.stage == "classifier") {
      if (a.config.value("arch", "vit") != "vit") throw invalid_argument("FeatureTrunk: conv archives have no trunk");
      vit_.emplace(a);
      if (!a.contains("cls_token")) throw invalid_argument("FeatureTrunk: encoder archive has no class token");
      depth_ = vit_->cfg.encoder.depth;
    } else {
      throw invalid_argument("FeatureTrunk: unsupported archive stage '" + a.stage + "'");
    }
    params_digest_ = params_digest();
  }

  int depth() const { return depth_; }
  const std::string& stage() const { return stage_; }
  const std::string& archive_digest() const { return archive_digest_; }

  /// Digest of every trunk tensor as currently held in memory.
  std::string params_digest() const { return gen_ ? gen_->params().digest() : vit_->store.digest(); }
  /// True while the in-memory trunk equals the archive it was loaded from.
  bool unchanged() const { return params_digest() == params_digest_; }

  MatD features(const MatF& latents, int layer = -1) const {
    USP_CHECK(layer >= -1 && layer < depth_, "FeatureTrunk: layer index out of range");
    ag::NoGradGuard ng;
    constexpr Eigen::Index kChunk = 256;
    MatD out;
    for (Eigen::Index s = 0; s < latents.rows(); s += kChunk) {
      const Eigen::Index n = std::min(kChunk, latents.rows() - s);
      const MatD f = chunk_features(latents.middleRows(s, n), layer);
      if (out.size() == 0) out.resize(latents.rows(), f.cols());
      out.middleRows(s, n) = f;
    }
    return out;
  }

 private:
  static MatD mean_pool(const MatF& tokens, Eigen::Index batch, Eigen::Index len, Eigen::Index skip) {
    MatD out = MatD::Zero(batch, tokens.cols());
    for (Eigen::Index i = 0; i < batch; ++i) {
      for (Eigen::Index t = skip; t < len; ++t) out.row(i) += tokens.row(i * len + t).cast<double>();
      out.row(i) /= static_cast<double>(len - skip);
    }
    return out;
  }

  MatD chunk_features(const MatF& x, int layer) const {
    const Eigen::Index n = x.rows();
    if (gen_) {
      const auto& c = gen_->config();
      const std::vector<double> t(static_cast<std::size_t>(n), 0.0);
      const std::vector<int> y(static_cast<std::size_t>(n), c.null_class());
      const auto outs = gen_->block_outputs(x, t, y);
      return mean_pool(outs[static_cast<std::size_t>(layer < 0 ? depth_ - 1 : layer)], n, c.tokens(), 0);
    }
    const auto& c = vit_->cfg;
    const auto& enc = vit_->enc;
    const MatF patches = vit::patchify_raw<float>(x, c.latent_channels, c.latent_size, c.patch);
    std::vector<std::vector<Eigen::Index>> rows(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i)
      for (int t = 0; t < c.tokens(); ++t) rows[static_cast<std::size_t>(i)].push_back(i * c.tokens() + t);
    std::vector<Var<float>> layers;
    const Var<float> final_out =
        enc.run(enc.prepend_cls(enc.embed(Var<float>::constant(patches)), rows), n, c.tokens() + 1, &layers);
    const Eigen::Index len = c.tokens() + 1;
    if (layer >= 0) return mean_pool(layers[static_cast<std::size_t>(layer)].value(), n, len, 1);
    MatD out(n, final_out.cols());
    for (Eigen::Index i = 0; i < n; ++i) out.row(i) = final_out.value().row(i * len).cast<double>();
    return out;
  }

  std::string stage_, archive_digest_, params_digest_;
  int depth_ = 0;
  std::optional<diffusion::Generator<float>> gen_;
  std::optional<transplant::SourceVit<float>> vit_;
};

// ---------------------------------------------------------------------------
// Linear probe

struct ProbeOptions {
  int epochs = 100;
  int batch = 256;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  bool lars = false;
  std::uint64_t seed = 0;

  json to_json() const {
    return {{"epochs", epochs}, {"batch", batch}, {"lr", lr}, {"momentum", momentum},
            {"weight_decay", weight_decay}, {"optimizer", lars ? "lars" : "sgd"}, {"seed", seed}};
  }
};

struct ProbeResult {
  double top1 = 0.0;
  std::vector<double> per_layer;  // layerwise mode: one entry per block
  std::string config_digest;
  bool frozen_trunk = true;

  json to_json() const {
    return {{"top1", top1}, {"per_layer", per_layer}, {"config_digest", config_digest}, {"frozen_trunk", frozen_trunk}};
  }
};

inline double accuracy(const MatD& logits, const std::vector<int>& labels) {
  USP_CHECK(static_cast<Eigen::Index>(labels.size()) == logits.rows(), "accuracy: label count mismatch");
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    if (arg == labels[static_cast<std::size_t>(i)]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

/// Trains a linear classifier on standardized features (train statistics) and
/// returns top-1 accuracy on the test features.
inline double probe_features(const MatD& train, const std::vector<int>& train_labels, const MatD& test,
                             const std::vector<int>& test_labels, int num_classes, const ProbeOptions& opt) {
  USP_CHECK(train.rows() > 0 && static_cast<Eigen::Index>(train_labels.size()) == train.rows(),
            "probe: train feature/label mismatch");
  USP_CHECK(train.cols() == test.cols(), "probe: feature widths differ");
  const RowVec<double> mean = train.colwise().mean();
  const RowVec<double> sd =
      ((train.rowwise() - mean).array().square().colwise().mean().sqrt() + 1e-6).matrix();
  const MatD xtr = (train.rowwise() - mean).array().rowwise() / sd.array();
  const MatD xte = (test.rowwise() - mean).array().rowwise() / sd.array();

  nn::ParamStore<double> store;
  Rng init(derive_seed(opt.seed, "probe.init"));
  const auto head = nn::Linear<double>::create(store, init, "head", train.cols(), num_classes, true);
  optim::Sgd<double> sgd(store, opt.momentum, opt.weight_decay, opt.lars);
  const auto n = static_cast<std::size_t>(xtr.rows());
  const auto batch = std::min<std::size_t>(static_cast<std::size_t>(opt.batch), n);
  const std::int64_t per_epoch = static_cast<std::int64_t>(n / batch);
  std::vector<std::size_t> order(n);
  std::int64_t step = 0;
  for (int e = 0; e < opt.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(opt.seed, "probe.epoch", static_cast<std::uint64_t>(e)));
    rng.shuffle(order);
    for (std::int64_t b = 0; b < per_epoch; ++b, ++step) {
      MatD xb(static_cast<Eigen::Index>(batch), xtr.cols());
      std::vector<int> yb;
      for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t s = order[static_cast<std::size_t>(b) * batch + i];
        xb.row(static_cast<Eigen::Index>(i)) = xtr.row(static_cast<Eigen::Index>(s));
        yb.push_back(train_labels[s]);
      }
      store.zero_grad();
      Var<double> loss = ag::cross_entropy(head(Var<double>::constant(xb)), yb);
      if (!std::isfinite(loss.item())) throw numeric_error("probe: non-finite loss");
      ag::backward(loss);
      sgd.step(optim::lr_at(step, {0.0, opt.epochs, 0.0}, per_epoch, opt.lr));
    }
  }
  ag::NoGradGuard ng;
  return accuracy(head(Var<double>::constant(xte)).value(), test_labels);
}

inline int class_count(const std::vector<int>& a, const std::vector<int>& b) {
  int k = 0;
  for (int y : a) k = std::max(k, y + 1);
  for (int y : b) k = std::max(k, y + 1);
  return k;
}

/// Probe on one layer (-1: final representation) of a frozen trunk. The trunk
/// digest is compared before and after; any change is a hard failure.
inline ProbeResult linear_probe(const CheckpointArchive& trunk, const LabeledLatents& train, const LabeledLatents& test,
                                const ProbeOptions& opt, int layer = -1) {
  const std::string before = trunk.digest();
  FeatureTrunk ft(trunk);
  ProbeResult r;
  r.top1 = probe_features(ft.features(train.latents, layer), train.labels, ft.features(test.latents, layer),
                          test.labels, class_count(train.labels, test.labels), opt);
  if (!ft.unchanged() || trunk.digest() != before) throw digest_mismatch("linear_probe: trunk was modified");
  r.config_digest = digest_of(json{{"probe", opt.to_json()}, {"layer", layer}, {"trunk", before}}.dump());
  return r;
}

/// One probe per block output; top1 is the best layer.
inline ProbeResult layerwise_probe(const CheckpointArchive& trunk, const LabeledLatents& train,
                                   const LabeledLatents& test, const ProbeOptions& opt) {
  const std::string before = trunk.digest();
  FeatureTrunk ft(trunk);
  ProbeResult r;
  const int k = class_count(train.labels, test.labels);
  for (int l = 0; l < ft.depth(); ++l)
    r.per_layer.push_back(
        probe_features(ft.features(train.latents, l), train.labels, ft.features(test.latents, l), test.labels, k, opt));
  if (!ft.unchanged() || trunk.digest() != before) throw digest_mismatch("layerwise_probe: trunk was modified");
  r.top1 = r.per_layer.empty() ? 0.0 : *std::max_element(r.per_layer.begin(), r.per_layer.end());
  r.config_digest = digest_of(json{{"probe", opt.to_json()}, {"layerwise", true}, {"trunk", before}}.dump());
  return r;
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct FinetuneOptions {
  int epochs = 20;
  int batch = 128;
  double lr = 1e-3;
  double warmup_epochs = 2;
  double layer_decay = 0.75;
  double label_smoothing = 0.1;
  double weight_decay = 0.05;
  std::uint64_t seed = 0;
  bool verbose = false;

  json to_json() const {
    return {{"epochs", epochs}, {"batch", batch}, {"lr", lr}, {"warmup_epochs", warmup_epochs},
            {"layer_decay", layer_decay}, {"label_smoothing", label_smoothing},
            {"weight_decay", weight_decay}, {"seed", seed}};
  }
};

/// Learning-rate multipliers decay^(L+1-id): patch embedding and class token
/// have id 0, block i has id i+1, the final norm and head have id L+1.
inline std::map<std::string, double> layer_lr_scales(const nn::ParamStore<float>& store, int depth, double decay) {
  std::map<std::string, double> out;
  for (const auto& p : store.params()) {
    int id = depth + 1;
    if (p.name.rfind("patchconv", 0) == 0 || p.name == "cls_token" || p.name == "pos_embed") {
      id = 0;
    } else if (p.name.rfind("enc.block", 0) == 0) {
      id = std::stoi(p.name.substr(9, p.name.find('.', 9) - 9)) + 1;
    }
    out[p.name] = std::pow(decay, depth + 1 - id);
  }
  return out;
}

struct FinetuneResult {
  ProbeResult probe;
  CheckpointArchive archive;  // stage classifier
};

/// Full fine-tune of an encoder archive with a fresh zero head. With zero epochs
/// the zero head predicts class 0 for every input.
inline FinetuneResult finetune_classify(const CheckpointArchive& src, const LabeledLatents& train,
                                        const LabeledLatents& test, const FinetuneOptions& opt,
                                        transplant::ClassifierMode mode = transplant::ClassifierMode::finetune) {
  const int k = class_count(train.labels, test.labels);
  auto model = transplant::load_classifier(transplant::adapt_vit_to_classifier(src, k, mode));
  const int depth = model.config().encoder.depth;
  optim::AdamW<float> adam(model.params(), {0.9, 0.999, 1e-8, opt.weight_decay});
  for (const auto& [name, s] : layer_lr_scales(model.params(), depth, opt.layer_decay)) adam.set_lr_scale(name, s);
  const auto n = static_cast<std::size_t>(train.size());
  const auto batch = std::min<std::size_t>(static_cast<std::size_t>(opt.batch), n);
  const std::int64_t per_epoch = static_cast<std::int64_t>(n / std::max<std::size_t>(batch, 1));
  std::vector<std::size_t> order(n);
  std::int64_t step = 0;
  for (int e = 0; e < opt.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(opt.seed, "finetune.epoch", static_cast<std::uint64_t>(e)));
    rng.shuffle(order);
    double total = 0.0;
    for (std::int64_t b = 0; b < per_epoch; ++b, ++step) {
      MatF xb(static_cast<Eigen::Index>(batch), train.latents.cols());
      std::vector<int> yb;
      for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t s = order[static_cast<std::size_t>(b) * batch + i];
        xb.row(static_cast<Eigen::Index>(i)) = train.latents.row(static_cast<Eigen::Index>(s));
        yb.push_back(train.labels[s]);
      }
      model.params().zero_grad();
      Var<float> loss = ag::cross_entropy(model.logits(xb), yb, static_cast<float>(opt.label_smoothing));
      if (!std::isfinite(loss.item())) throw numeric_error("finetune: non-finite loss at step " + std::to_string(step));
      ag::backward(loss);
      adam.step(optim::lr_at(step, {opt.warmup_epochs, opt.epochs, 0.0}, per_epoch, opt.lr));
      total += loss.item();
    }
    if (opt.verbose)
      std::fprintf(stderr, "finetune epoch %d loss %.4f\n", e, total / static_cast<double>(std::max<std::int64_t>(per_epoch, 1)));
  }
  FinetuneResult r;
  {
    ag::NoGradGuard ng;
    MatD logits(test.size(), k);
    constexpr Eigen::Index kChunk = 256;
    for (Eigen::Index s = 0; s < test.size(); s += kChunk) {
      const Eigen::Index m = std::min(kChunk, test.size() - s);
      logits.middleRows(s, m) = model.logits(test.latents.middleRows(s, m)).value().cast<double>();
    }
    r.probe.top1 = accuracy(logits, test.labels);
  }
  r.probe.frozen_trunk = false;
  r.probe.config_digest = digest_of(json{{"finetune", opt.to_json()}, {"source", src.digest()}}.dump());
  r.archive.stage = "classifier";
  r.archive.config = {{"model", model.config().to_json()}, {"num_classes", k},
                      {"mode", transplant::classifier_mode_name(mode)}, {"finetune", opt.to_json()}};
  r.archive.parents = src.parents;
  r.archive.parents.push_back(src.digest());
  r.archive.store_params(model.params());
  r.archive.meta["steps"] = step;
  r.archive.meta["top1"] = r.probe.top1;
  return r;
}

// ---------------------------------------------------------------------------
// Sample statistics and convergence curves

struct SampleOptions {
  std::int64_t n = 1000;
  int steps = 100;
  double cfg_scale = 1.0;
  std::uint64_t seed = 0;
  json to_json() const { return {{"n", n}, {"steps", steps}, {"cfg_scale", cfg_scale}, {"seed", seed}}; }
};

struct SampleEmbedding {
  MatD features;
  MatD probs;  // embedder class probabilities
};

/// Embeds class-balanced samples of a generator checkpoint.
inline SampleEmbedding embed_samples(const CheckpointArchive& gen_archive, const FrozenEmbedder& emb,
                                     const codec::FrozenCodec& codec, const SampleOptions& so) {
  const auto g = diffusion::load_generator(gen_archive);
  diffusion::SamplerConfig sc;
  sc.steps = so.steps;
  sc.cfg_scale = so.cfg_scale;
  sc.seed = so.seed;
  const auto labels = diffusion::balanced_labels(static_cast<std::size_t>(so.n), g.config().num_classes);
  const MatF inputs = embedder_inputs(emb, codec, diffusion::sample(g, sc, labels));
  return {emb.features(inputs), emb.probabilities(inputs)};
}

/// Reference statistics of real images under the embedder.
inline FrechetStats reference_stats(const data::ImageBatch& images, const FrozenEmbedder& emb,
                                    const codec::FrozenCodec* codec = nullptr, std::string* warning = nullptr) {
  MatF inputs = images.pixels;
  if (emb.config().input == "latents") {
    USP_CHECK(codec != nullptr, "reference_stats: latent-input embedder needs a codec");
    inputs = codec->encode(images, codec->norm()).values;
  }
  return compute_stats(emb.features(inputs), emb.fingerprint(), warning);
}

struct CurvePoint {
  std::int64_t step = 0;
  double fd = 0.0;
  double class_score = 0.0;
};

/// Checkpoint files ckpt_<step>.uspk of a run directory in step order.
inline std::vector<std::pair<std::int64_t, fs::path>> list_checkpoints(const fs::path& run_dir) {
  std::vector<std::pair<std::int64_t, fs::path>> out;
  if (!fs::is_directory(run_dir)) return out;
  for (const auto& e : fs::directory_iterator(run_dir)) {
    const std::string f = e.path().filename().string();
    if (f.size() > 10 && f.rfind("ckpt_", 0) == 0 && f.ends_with(".uspk"))
      out.emplace_back(std::stoll(f.substr(5, f.size() - 10)), e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// FD and class score at every checkpoint of a run against the reference
/// statistics. Each point is cached under a key of (checkpoint, reference,
/// sampling options) in `cache_dir` (default <run>/fd), so re-evaluation is
/// free and bitwise identical.
inline std::vector<CurvePoint> convergence_curve(const fs::path& run_dir, const FrechetStats& ref,
                                                 const FrozenEmbedder& emb, const codec::FrozenCodec& codec,
                                                 const SampleOptions& so, std::string* warning = nullptr,
                                                 const fs::path& cache_dir = {}) {
  if (ref.fingerprint != emb.fingerprint())
    throw digest_mismatch("convergence_curve: reference statistics come from another embedder");
  std::vector<CurvePoint> curve;
  const auto ckpts = list_checkpoints(run_dir);
  if (ckpts.empty()) {
    if (warning) *warning = "convergence_curve: no checkpoints in " + run_dir.string();
    return curve;
  }
  const std::string ref_key = digest_of(serialize_stats(ref));
  for (const auto& [step, path] : ckpts) {
    const std::string bytes = io::read_file(path);
    const std::string key = digest_of(bytes + ref_key + so.to_json().dump());
    const fs::path cache = (cache_dir.empty() ? run_dir / "fd" : cache_dir) / (key + ".json");
    CurvePoint p{step, 0.0, 0.0};
    if (fs::exists(cache)) {
      const json j = json::parse(io::read_file(cache));
      p.fd = j.at("fd").get<double>();
      p.class_score = j.at("class_score").get<double>();
    } else {
      const auto e = embed_samples(CheckpointArchive::deserialize(bytes), emb, codec, so);
      p.fd = frechet_distance(compute_stats(e.features, emb.fingerprint()), ref);
      p.class_score = class_score(e.probs);
      io::write_file_atomic(
          cache, json{{"step", step}, {"fd", p.fd}, {"class_score", p.class_score}, {"sample", so.to_json()}}.dump());
    }
    curve.push_back(p);
  }
  return curve;
}

/// First step whose FD is at or below the threshold; -1 when never reached.
inline std::int64_t steps_to_threshold(const std::vector<CurvePoint>& curve, double threshold) {
  for (const auto& p : curve)
    if (p.fd <= threshold) return p.step;
  return -1;
}

/// baseline steps / candidate steps to the threshold; NaN when either never crosses.
inline double speedup_ratio(const std::vector<CurvePoint>& baseline, const std::vector<CurvePoint>& candidate,
                            double threshold) {
  const auto b = steps_to_threshold(baseline, threshold), c = steps_to_threshold(candidate, threshold);
  if (b < 0 || c < 0) return std::numeric_limits<double>::quiet_NaN();
  if (c == 0) return std::numeric_limits<double>::infinity();
  return static_cast<double>(b) / static_cast<double>(c);
}

inline std::string curve_csv(const std::vector<std::pair<std::string, std::vector<CurvePoint>>>& runs) {
  std::ostringstream out;
  out << "run,step,fd,class_score\n";
  char buf[96];
  for (const auto& [label, curve] : runs)
    for (const auto& p : curve) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g", p.fd, p.class_score);
      out << label << ',' << p.step << ',' << buf << '\n';
    }
  return out.str();
}

}  // namespace usp::eval

#endif  // USP_EVAL_HPP
