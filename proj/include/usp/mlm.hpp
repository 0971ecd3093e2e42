#ifndef USP_MLM_HPP
#define USP_MLM_HPP

// Masked latent modeling: random patch masking, an encoder that sees only the
// visible tokens, and a light decoder that reconstructs the masked ones.
//
// Decoder tensor names (section "decoder"):
//   dec.embed.{weight,bias}  mask_token [1,1,d']  dec.pos_embed [1+T, d']
//   dec.block{i}.*           dec.norm.{weight,bias}  pred_head.{weight,bias}

#include "usp/codec.hpp"
#include "usp/schedule.hpp"
#include "usp/vit.hpp"

namespace usp::mlm {

using ag::Var;
using vit::PretrainModelConfig;

// ---------------------------------------------------------------------------
// Masking

struct MaskPlan {
  int tokens = 0;
  double ratio = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::vector<int>> visible;  // per sample, in shuffle order
  std::vector<std::vector<int>> masked;   // per sample, in shuffle order

  std::size_t batch() const { return visible.size(); }
  int num_visible() const { return visible.empty() ? 0 : static_cast<int>(visible.front().size()); }
  int num_masked() const { return masked.empty() ? 0 : static_cast<int>(masked.front().size()); }

  static MaskPlan all_visible(int tokens, std::size_t batch) {
    MaskPlan p;
    p.tokens = tokens;
    std::vector<int> all(static_cast<std::size_t>(tokens));
    for (int i = 0; i < tokens; ++i) all[static_cast<std::size_t>(i)] = i;
    p.visible.assign(batch, all);
    p.masked.assign(batch, {});
    return p;
  }
};

/// Number of tokens kept visible: floor(T (1 - m)). The 1e-9 slack absorbs
/// representation error in m (e.g. 16 * (1 - 0.75)).
inline int visible_count(int tokens, double ratio) {
  return static_cast<int>(std::floor(static_cast<double>(tokens) * (1.0 - ratio) + 1e-9));
}

/// Independent uniform-without-replacement masks per sample: draw a noise
/// value per token, argsort, keep the first floor(T(1-m)).
inline MaskPlan sample_mask(int tokens, double ratio, std::uint64_t seed, std::size_t batch = 1) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw invalid_argument("sample_mask: mask ratio must lie in (0,1)");
  USP_CHECK(tokens > 0, "sample_mask: token count must be positive");
  MaskPlan plan;
  plan.tokens = tokens;
  plan.ratio = ratio;
  plan.seed = seed;
  const int keep = visible_count(tokens, ratio);
  Rng rng(seed);
  std::vector<double> noise(static_cast<std::size_t>(tokens));
  std::vector<int> order(static_cast<std::size_t>(tokens));
  for (std::size_t n = 0; n < batch; ++n) {
    for (auto& v : noise) v = rng.uniform();
    for (int i = 0; i < tokens; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return noise[static_cast<std::size_t>(a)] < noise[static_cast<std::size_t>(b)];
    });
    plan.visible.emplace_back(order.begin(), order.begin() + keep);
    plan.masked.emplace_back(order.begin() + keep, order.end());
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Targets

/// Per-row (x - mean) / sqrt(var + eps) with the population variance.
template <typename T>
Mat<T> normalize_patches(const Mat<T>& patches, double eps) {
  Mat<T> out(patches.rows(), patches.cols());
  for (Eigen::Index r = 0; r < patches.rows(); ++r) {
    const T mean = patches.row(r).mean();
    const T var = (patches.row(r).array() - mean).square().mean();
    out.row(r) = (patches.row(r).array() - mean) / std::sqrt(var + T(eps));
  }
  return out;
}

/// Rows of the patchified latent that the plan masks, in plan order.
template <typename T>
Mat<T> gather_masked(const Mat<T>& patches, const MaskPlan& plan) {
  const Eigen::Index m = plan.num_masked();
  Mat<T> out(static_cast<Eigen::Index>(plan.batch()) * m, patches.cols());
  for (std::size_t n = 0; n < plan.batch(); ++n)
    for (Eigen::Index j = 0; j < m; ++j)
      out.row(static_cast<Eigen::Index>(n) * m + j) =
          patches.row(static_cast<Eigen::Index>(n) * plan.tokens + plan.masked[n][static_cast<std::size_t>(j)]);
  return out;
}

/// Mean squared error over masked patches only, optionally against per-patch
/// normalized targets.
template <typename T>
Var<T> recon_loss(const Var<T>& pred, const Mat<T>& patches, const MaskPlan& plan, bool per_patch_norm, double eps) {
  Mat<T> target = gather_masked(patches, plan);
  if (per_patch_norm) target = normalize_patches(target, eps);
  USP_CHECK(pred.rows() == target.rows() && pred.cols() == target.cols(), "recon_loss: prediction/target mismatch");
  return ag::mse(pred, target);
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps with one timestep per sample.
template <typename T>
Mat<T> noisy_pretrain_corrupt(const Mat<T>& latents, const std::vector<int>& t, const NoiseSchedule& schedule,
                              std::uint64_t seed, bool enabled = true) {
  if (!enabled) throw invalid_argument("noisy_pretrain_corrupt: noisy pretraining is disabled");
  USP_CHECK(static_cast<Eigen::Index>(t.size()) == latents.rows(), "noisy_pretrain_corrupt: one timestep per sample");
  Rng rng(seed);
  const Mat<T> eps = randn<T>(rng, latents.rows(), latents.cols());
  Mat<T> out(latents.rows(), latents.cols());
  for (Eigen::Index n = 0; n < latents.rows(); ++n)
    out.row(n) = schedule.q_sample<T>(latents.row(n), t[static_cast<std::size_t>(n)], eps.row(n));
  return out;
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
class MaskedLatentModel {
 public:
  MaskedLatentModel(const PretrainModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    const int grid = cfg.grid();
    enc_ = vit::VitEncoder<T>::create(params_, rng, cfg.encoder, cfg.latent_channels, cfg.patch, grid, "encoder");
    const Eigen::Index dd = cfg.decoder.dim;
    dec_embed_ = nn::Linear<T>::create(params_, rng, "dec.embed", cfg.encoder.dim, dd, false, "decoder");
    mask_token_ = params_.add("mask_token", nn::trunc_normal<T>(rng, 1, dd), {1, 1, dd}, false, true, "decoder");
    Mat<T> dpos = Mat<T>::Zero(1 + cfg.tokens(), dd);
    dpos.bottomRows(cfg.tokens()) = nn::sincos_2d<T>(dd, grid, grid);
    dec_pos_ = params_.add("dec.pos_embed", std::move(dpos), {1 + cfg.tokens(), dd}, false, false, "decoder");
    for (int i = 0; i < cfg.decoder.depth; ++i)
      dec_blocks_.push_back(nn::VitBlock<T>::create(params_, rng, "dec.block" + std::to_string(i), dd,
                                                    cfg.decoder.heads, cfg.decoder.mlp_ratio, "decoder"));
    dec_norm_ = nn::LayerNorm<T>::create(params_, "dec.norm", dd, true, "decoder");
    head_ = nn::Linear<T>::create(params_, rng, "pred_head", dd, cfg.patch_dim(), false, "decoder");
  }

  const PretrainModelConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }
  const vit::VitEncoder<T>& encoder() const { return enc_; }

  /// Encoder over the visible tokens of each sample (class token first).
  /// Returns [N*(1+K), h].
  Var<T> encode_visible(const Var<T>& patches, const MaskPlan& plan) const {
    const auto n = static_cast<Eigen::Index>(plan.batch());
    USP_CHECK(patches.rows() == n * plan.tokens && plan.tokens == cfg_.tokens(),
              "forward_pretrain: plan does not match the token sequence");
    Var<T> tokens = enc_.embed(patches);
    std::vector<std::vector<Eigen::Index>> rows(plan.batch());
    for (std::size_t i = 0; i < plan.batch(); ++i)
      for (int v : plan.visible[i]) rows[i].push_back(static_cast<Eigen::Index>(i) * plan.tokens + v);
    return enc_.run(enc_.prepend_cls(tokens, rows), n, 1 + plan.num_visible());
  }

  /// Predictions for the masked patches, [N*M, C*p*p] in plan order.
  Var<T> forward(const Var<T>& patches, const MaskPlan& plan) const {
    const auto n = static_cast<Eigen::Index>(plan.batch());
    const int k = plan.num_visible(), tokens = plan.tokens;
    Var<T> latent = dec_embed_(encode_visible(patches, plan));
    // Decoder sequence: class token, then every grid position in order with the
    // shared mask token standing in for masked ones.
    std::vector<ag::RowRef> refs;
    refs.reserve(static_cast<std::size_t>(n * (1 + tokens)));
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index base = i * (1 + k);
      refs.push_back({0, base});
      std::vector<Eigen::Index> slot(static_cast<std::size_t>(tokens), -1);
      for (int j = 0; j < k; ++j) slot[static_cast<std::size_t>(plan.visible[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)])] = base + 1 + j;
      for (int t = 0; t < tokens; ++t)
        refs.push_back(slot[static_cast<std::size_t>(t)] >= 0 ? ag::RowRef{0, slot[static_cast<std::size_t>(t)]}
                                                             : ag::RowRef{1, 0});
    }
    Var<T> x = ag::add_tiled(ag::gather_rows<T>({latent, mask_token_}, refs), dec_pos_);
    for (const auto& b : dec_blocks_) x = b(x, n, 1 + tokens);
    Var<T> out = head_(dec_norm_(x));
    std::vector<ag::RowRef> pick;
    for (Eigen::Index i = 0; i < n; ++i)
      for (int m : plan.masked[static_cast<std::size_t>(i)]) pick.push_back({0, i * (1 + tokens) + 1 + m});
    if (pick.empty()) return Var<T>::constant(Mat<T>(0, cfg_.patch_dim()));
    return ag::gather_rows<T>({out}, pick);
  }

  /// Full-sequence encoder pass (no masking). With `with_cls` the class token is
  /// prepended and row 0 of each sample is the class token output.
  Var<T> encode_all(const Var<T>& patches, Eigen::Index batch, bool with_cls, std::vector<Var<T>>* layers = nullptr) const {
    Var<T> tokens = enc_.embed(patches);
    if (!with_cls) return enc_.run(tokens, batch, cfg_.tokens(), layers);
    std::vector<std::vector<Eigen::Index>> rows(static_cast<std::size_t>(batch));
    for (Eigen::Index i = 0; i < batch; ++i)
      for (int t = 0; t < cfg_.tokens(); ++t) rows[static_cast<std::size_t>(i)].push_back(i * cfg_.tokens() + t);
    return enc_.run(enc_.prepend_cls(tokens, rows), batch, 1 + cfg_.tokens(), layers);
  }

 private:
  PretrainModelConfig cfg_;
  nn::ParamStore<T> params_;
  vit::VitEncoder<T> enc_;
  nn::Linear<T> dec_embed_;
  Var<T> mask_token_, dec_pos_;
  std::vector<nn::VitBlock<T>> dec_blocks_;
  nn::LayerNorm<T> dec_norm_;
  nn::Linear<T> head_;
};

/// Pretraining loss for one batch of latents [N, C*S*S].
template <typename T>
Var<T> pretrain_loss(const MaskedLatentModel<T>& model, const Mat<T>& latents, const MaskPlan& plan,
                     const Mat<T>* corrupted = nullptr) {
  const auto& c = model.config();
  const Mat<T> clean = vit::patchify_raw(latents, c.latent_channels, c.latent_size, c.patch);
  const Mat<T> input = corrupted ? vit::patchify_raw(*corrupted, c.latent_channels, c.latent_size, c.patch) : clean;
  Var<T> pred = model.forward(Var<T>::constant(input), plan);
  return recon_loss(pred, clean, plan, c.per_patch_norm, c.norm_eps);
}

// ---------------------------------------------------------------------------
// Restoration

struct RestoreResult {
  MatF masked_pixels;    // ground truth with masked footprints greyed out
  MatF restored_pixels;  // decoded restored latent, in [0,1]
  MatF restored_latent;
  MaskPlan plan;
  bool oracle_patch_stats = false;  // predictions rescaled with true patch mean/std
};

inline RestoreResult restore(const data::ImageBatch& images, const MaskedLatentModel<float>& model,
                             const codec::FrozenCodec& codec, double ratio, std::uint64_t seed) {
  const auto& c = model.config();
  const auto grid = codec.encode(images, codec.norm());
  const int n = static_cast<int>(grid.count());
  RestoreResult r;
  r.plan = ratio <= 0.0 ? MaskPlan::all_visible(c.tokens(), static_cast<std::size_t>(n))
                        : sample_mask(c.tokens(), ratio, seed, static_cast<std::size_t>(n));
  MatF patches = vit::patchify_raw(grid.values, c.latent_channels, c.latent_size, c.patch);
  MatF restored = patches;
  if (r.plan.num_masked() > 0) {
    ag::NoGradGuard ng;
    MatF pred = model.forward(Var<float>::constant(patches), r.plan).value();
    const Eigen::Index m = r.plan.num_masked();
    for (int i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < m; ++j) {
        const Eigen::Index row = static_cast<Eigen::Index>(i) * c.tokens() + r.plan.masked[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        RowVec<float> p = pred.row(static_cast<Eigen::Index>(i) * m + j);
        if (c.per_patch_norm) {
          const float mean = patches.row(row).mean();
          const float var = (patches.row(row).array() - mean).square().mean();
          p = p.array() * std::sqrt(var + static_cast<float>(c.norm_eps)) + mean;
          r.oracle_patch_stats = true;
        }
        restored.row(row) = p;
      }
  }
  r.restored_latent = vit::unpatchify_raw(restored, c.latent_channels, c.latent_size, c.patch);
  r.restored_pixels = codec::denormalize_image(codec.decode_values(r.restored_latent), codec.norm());
  // Grey out the pixel footprint of every masked patch.
  r.masked_pixels = images.pixels;
  const int foot = c.patch * codec.config().stride, g = c.grid(), hw = images.height * images.width;
  for (int i = 0; i < n; ++i)
    for (int t : r.plan.masked[static_cast<std::size_t>(i)]) {
      const int gy = t / g, gx = t % g;
      for (int ch = 0; ch < 3; ++ch)
        for (int y = gy * foot; y < (gy + 1) * foot; ++y)
          for (int x = gx * foot; x < (gx + 1) * foot; ++x) r.masked_pixels(i, ch * hw + y * images.width + x) = 0.5f;
    }
  return r;
}

}  // namespace usp::mlm

#endif  // USP_MLM_HPP
