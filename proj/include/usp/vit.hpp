#ifndef USP_VIT_HPP
#define USP_VIT_HPP

// Latent patch tokens and the ViT encoder trunk shared by the pretraining
// model and the classifier.
//
// Tensor names:
//   patchconv.weight [h, C, p, p]   patchconv.bias [h]
//   cls_token [1, 1, h]             pos_embed [T, h]  (fixed sine-cosine)
//   enc.block{i}.ln1.{weight,bias}  enc.block{i}.attn.{qkv,proj}.{weight,bias}
//   enc.block{i}.ln2.{weight,bias}  enc.block{i}.mlp.{fc1,fc2}.{weight,bias}
//   enc.norm.{weight,bias}

#include "usp/archive.hpp"

namespace usp::vit {

using ag::Var;

struct TrunkGeometry {
  int depth = 8;
  int heads = 3;
  int dim = 48;
  int mlp_ratio = 4;
};

struct PretrainModelConfig {
  std::string preset = "tiny";
  TrunkGeometry encoder;
  TrunkGeometry decoder{2, 2, 32, 4};
  int patch = 2;
  int latent_channels = 4;
  int latent_size = 8;  // grid side of the latent (H/f)
  double mask_ratio = 0.75;
  bool per_patch_norm = true;
  double norm_eps = 1e-6;
  bool noisy_pretrain = false;

  int grid() const { return latent_size / patch; }
  int tokens() const { return grid() * grid(); }
  int patch_dim() const { return latent_channels * patch * patch; }

  void validate() const {
    USP_CHECK(patch > 0 && latent_size % patch == 0, "model config: latent grid side not divisible by patch size");
    USP_CHECK(encoder.dim % encoder.heads == 0 && decoder.dim % decoder.heads == 0,
              "model config: hidden dim must be divisible by heads");
    USP_CHECK(encoder.dim % 4 == 0 && decoder.dim % 4 == 0, "model config: dims must be divisible by 4 (sincos)");
    USP_CHECK(mask_ratio > 0.0 && mask_ratio < 1.0, "model config: mask ratio must lie in (0,1)");
  }

  /// Encoder presets; the decoder is shared across presets of a scale.
  static PretrainModelConfig preset_named(const std::string& name) {
    PretrainModelConfig c;
    c.preset = name;
    if (name == "micro") {  // gradient-check scale (< 1e3 parameters)
      c.encoder = {1, 1, 4, 4};
      c.decoder = {1, 1, 4, 4};
      c.latent_size = 4;
    } else if (name == "tiny") {
      c.encoder = {8, 3, 48, 4};
      c.decoder = {2, 2, 32, 4};
    } else if (name == "base") {
      c.encoder = {12, 12, 768, 4};
      c.decoder = {8, 16, 512, 4};
    } else if (name == "large") {
      c.encoder = {24, 16, 1024, 4};
      c.decoder = {8, 16, 512, 4};
    } else if (name == "xl") {
      c.encoder = {28, 16, 1152, 4};
      c.decoder = {8, 16, 512, 4};
    } else {
      throw config_error("unknown model preset '" + name + "' (micro|tiny|base|large|xl)");
    }
    return c;
  }

  json to_json() const {
    auto geo = [](const TrunkGeometry& g) {
      return json{{"depth", g.depth}, {"heads", g.heads}, {"dim", g.dim}, {"mlp_ratio", g.mlp_ratio}};
    };
    return {{"preset", preset},
            {"encoder", geo(encoder)},
            {"decoder", geo(decoder)},
            {"patch", patch},
            {"latent_channels", latent_channels},
            {"latent_size", latent_size},
            {"mask_ratio", mask_ratio},
            {"per_patch_norm", per_patch_norm},
            {"norm_eps", norm_eps},
            {"noisy_pretrain", noisy_pretrain}};
  }
  static PretrainModelConfig from_json(const json& j) {
    auto geo = [](const json& g) {
      return TrunkGeometry{g.at("depth"), g.at("heads"), g.at("dim"), g.at("mlp_ratio")};
    };
    PretrainModelConfig c;
    c.preset = j.at("preset");
    c.encoder = geo(j.at("encoder"));
    c.decoder = geo(j.at("decoder"));
    c.patch = j.at("patch");
    c.latent_channels = j.at("latent_channels");
    c.latent_size = j.at("latent_size");
    c.mask_ratio = j.at("mask_ratio");
    c.per_patch_norm = j.at("per_patch_norm");
    c.norm_eps = j.at("norm_eps");
    c.noisy_pretrain = j.at("noisy_pretrain");
    return c;
  }
};

// ---------------------------------------------------------------------------
// Patch rearrangement. A latent row [C*S*S] becomes T = (S/p)^2 token rows of
// width C*p*p ordered (c, ky, kx), tokens in row-major grid order. This is the
// input layout of a p x p stride-p convolution.

template <typename T>
Mat<T> patchify_raw(const Mat<T>& latents, int channels, int side, int p) {
  USP_CHECK(p > 0 && side % p == 0, "patchify: grid side not divisible by patch size");
  USP_CHECK(latents.cols() == static_cast<Eigen::Index>(channels) * side * side, "patchify: latent width mismatch");
  const int g = side / p, tokens = g * g, pd = channels * p * p;
  Mat<T> out(latents.rows() * tokens, pd);
  for (Eigen::Index n = 0; n < latents.rows(); ++n)
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx) {
        const Eigen::Index row = n * tokens + gy * g + gx;
        for (int c = 0; c < channels; ++c)
          for (int ky = 0; ky < p; ++ky)
            for (int kx = 0; kx < p; ++kx)
              out(row, (c * p + ky) * p + kx) = latents(n, (c * side + gy * p + ky) * side + gx * p + kx);
      }
  return out;
}

template <typename T>
Mat<T> unpatchify_raw(const Mat<T>& tokens_mat, int channels, int side, int p) {
  const int g = side / p, tokens = g * g;
  USP_CHECK(tokens_mat.rows() % tokens == 0 && tokens_mat.cols() == channels * p * p, "unpatchify: shape mismatch");
  const Eigen::Index n_batch = tokens_mat.rows() / tokens;
  Mat<T> out(n_batch, static_cast<Eigen::Index>(channels) * side * side);
  for (Eigen::Index n = 0; n < n_batch; ++n)
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx) {
        const Eigen::Index row = n * tokens + gy * g + gx;
        for (int c = 0; c < channels; ++c)
          for (int ky = 0; ky < p; ++ky)
            for (int kx = 0; kx < p; ++kx)
              out(n, (c * side + gy * p + ky) * side + gx * p + kx) = tokens_mat(row, (c * p + ky) * p + kx);
      }
  return out;
}

// ---------------------------------------------------------------------------

/// PatchConv + class token + fixed positions + pre-norm blocks + final norm.
template <typename T>
struct VitEncoder {
  nn::Linear<T> patchconv;  // weight [h, C*p*p] == conv weight flattened
  Var<T> cls_token;         // [1, h]
  Var<T> pos_embed;         // [T, h], not trainable
  std::vector<nn::VitBlock<T>> blocks;
  nn::LayerNorm<T> norm;
  int tokens = 0;

  static VitEncoder create(nn::ParamStore<T>& s, Rng& rng, const TrunkGeometry& geo, int channels, int patch,
                           int grid, const std::string& section = "encoder") {
    VitEncoder e;
    const Eigen::Index h = geo.dim;
    e.tokens = grid * grid;
    e.patchconv.weight = s.add("patchconv.weight", nn::trunc_normal<T>(rng, h, channels * patch * patch),
                               {h, channels, patch, patch}, true, true, section);
    e.patchconv.bias = s.add("patchconv.bias", Mat<T>::Zero(1, h), {h}, false, true, section);
    e.cls_token = s.add("cls_token", nn::trunc_normal<T>(rng, 1, h), {1, 1, h}, false, true, section);
    e.pos_embed = s.add("pos_embed", nn::sincos_2d<T>(h, grid, grid), {e.tokens, h}, false, false, section);
    for (int i = 0; i < geo.depth; ++i)
      e.blocks.push_back(
          nn::VitBlock<T>::create(s, rng, "enc.block" + std::to_string(i), h, geo.heads, geo.mlp_ratio, section));
    e.norm = nn::LayerNorm<T>::create(s, "enc.norm", h, true, section);
    return e;
  }

  /// Embeds patch rows [N*T, C*p*p] into tokens with positions added.
  Var<T> embed(const Var<T>& patches) const { return ag::add_tiled(patchconv(patches), pos_embed); }

  /// Class token row (zero position) followed by the given token rows for each sample.
  /// `rows[n]` lists rows of `tokens_var` belonging to sample n, in order.
  Var<T> prepend_cls(const Var<T>& tokens_var, const std::vector<std::vector<Eigen::Index>>& rows) const {
    std::vector<ag::RowRef> refs;
    for (const auto& sample : rows) {
      refs.push_back({1, 0});
      for (auto r : sample) refs.push_back({0, r});
    }
    return ag::gather_rows<T>({tokens_var, cls_token}, refs);
  }

  /// Runs the blocks and final norm over [N*len, h]. When `layers` is given,
  /// the output of every block (before the final norm) is appended to it.
  Var<T> run(Var<T> x, Eigen::Index batch, Eigen::Index len, std::vector<Var<T>>* layers = nullptr) const {
    for (const auto& b : blocks) {
      x = b(x, batch, len);
      if (layers) layers->push_back(x);
    }
    return norm(x);
  }
};

}  // namespace usp::vit

#endif  // USP_VIT_HPP
