#ifndef USP_CODEC_HPP
#define USP_CODEC_HPP

// Image normalization, the small convolutional VAE used as the frozen latent
// codec, and the on-disk latent cache.

#include "usp/data.hpp"
#include "usp/optim.hpp"

#include <chrono>

namespace usp::codec {

using ag::Var;
using data::ImageBatch;

// ---------------------------------------------------------------------------
// Normalization

struct NormalizationSpec {
  std::string name;
  std::array<double, 3> mean;
  std::array<double, 3> std;

  static NormalizationSpec vae_half() { return {"vae_half", {0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}}; }
  static NormalizationSpec imagenet() { return {"imagenet", {0.485, 0.456, 0.406}, {0.229, 0.224, 0.225}}; }
  static NormalizationSpec from_name(const std::string& name) {
    if (name == "vae_half") return vae_half();
    if (name == "imagenet") return imagenet();
    throw config_error("unknown normalization '" + name + "' (expected vae_half or imagenet)");
  }

  void validate() const {
    for (double s : std) USP_CHECK(s > 0.0, "NormalizationSpec: std must be strictly positive");
  }
  json to_json() const { return {{"name", name}, {"mean", mean}, {"std", std}}; }
};

/// (pixels - mean) / std per channel.
inline MatF normalize_image(const MatF& pixels, int channels, const NormalizationSpec& spec) {
  spec.validate();
  if (channels != 3) throw invalid_argument("normalize_image: spec has 3 channels, batch has " + std::to_string(channels));
  USP_CHECK(pixels.cols() % channels == 0, "normalize_image: row width not divisible by channel count");
  const Eigen::Index hw = pixels.cols() / channels;
  MatF out(pixels.rows(), pixels.cols());
  for (int c = 0; c < channels; ++c) {
    const float m = static_cast<float>(spec.mean[static_cast<std::size_t>(c)]);
    const float s = static_cast<float>(spec.std[static_cast<std::size_t>(c)]);
    out.middleCols(c * hw, hw) = (pixels.middleCols(c * hw, hw).array() - m) / s;
  }
  return out;
}

inline MatF normalize_image(const ImageBatch& batch, const NormalizationSpec& spec) {
  batch.validate();
  return normalize_image(batch.pixels, 3, spec);
}

inline MatF denormalize_image(const MatF& x, const NormalizationSpec& spec) {
  const Eigen::Index hw = x.cols() / 3;
  MatF out(x.rows(), x.cols());
  for (int c = 0; c < 3; ++c)
    out.middleCols(c * hw, hw) =
        (x.middleCols(c * hw, hw).array() * static_cast<float>(spec.std[static_cast<std::size_t>(c)]) +
         static_cast<float>(spec.mean[static_cast<std::size_t>(c)]))
            .cwiseMax(0.0f)
            .cwiseMin(1.0f);
  return out;
}

// ---------------------------------------------------------------------------
// Codec configuration and model

struct LatentCodecConfig {
  int channels = 4;  // C
  int stride = 4;    // f, a power of two
  int width = 32;
  int latent_width = 64;
  double kl_weight = 1e-6;
  bool identity = false;  // passthrough debug codec (requires C=3, f=1)
  bool frozen = false;

  void validate() const {
    USP_CHECK(channels > 0 && stride > 0 && (stride & (stride - 1)) == 0, "codec: C > 0 and f a power of two required");
    USP_CHECK(width > 0 && latent_width > 0 && kl_weight >= 0.0, "codec: widths positive and kl_weight nonnegative");
    if (identity) USP_CHECK(channels == 3 && stride == 1, "codec: identity mode requires C=3, f=1");
  }
  int downsamples() const { return std::countr_zero(static_cast<unsigned>(stride)); }

  json to_json() const {
    return {{"channels", channels}, {"stride", stride},     {"width", width},
            {"latent_width", latent_width}, {"kl_weight", kl_weight}, {"identity", identity}};
  }
  static LatentCodecConfig from_json(const json& j) {
    LatentCodecConfig c;
    c.channels = j.at("channels");
    c.stride = j.at("stride");
    c.width = j.at("width");
    c.latent_width = j.at("latent_width");
    c.kl_weight = j.at("kl_weight");
    c.identity = j.at("identity");
    return c;
  }
};

/// [N, C*H*W] latent grid tagged with the codec that produced it.
struct LatentGrid {
  MatF values;
  int channels = 0, height = 0, width = 0;
  std::string codec_fingerprint;

  Eigen::Index count() const { return values.rows(); }
};

namespace detail {

/// Column permutation implementing depth-to-space by factor 2.
inline std::shared_ptr<const std::vector<Eigen::Index>> pixel_shuffle_perm(Eigen::Index out_channels, Eigen::Index h,
                                                                          Eigen::Index w) {
  auto perm = std::make_shared<std::vector<Eigen::Index>>(static_cast<std::size_t>(out_channels * 4 * h * w));
  const Eigen::Index ho = 2 * h, wo = 2 * w;
  for (Eigen::Index c = 0; c < out_channels; ++c)
    for (Eigen::Index y = 0; y < ho; ++y)
      for (Eigen::Index x = 0; x < wo; ++x) {
        const Eigen::Index src_c = c * 4 + (y % 2) * 2 + (x % 2);
        (*perm)[static_cast<std::size_t>((c * ho + y) * wo + x)] = (src_c * h + y / 2) * w + x / 2;
      }
  return perm;
}

template <typename T>
struct ConvLayer {
  Var<T> weight, bias;
  ag::ConvGeometry geom;
  Var<T> operator()(const Var<T>& x) const { return ag::conv2d(x, weight, bias, geom); }
};

}  // namespace detail

template <typename T>
class ConvVae {
 public:
  ConvVae(const LatentCodecConfig& cfg, int image_size, std::uint64_t seed) : cfg_(cfg), size_(image_size) {
    cfg.validate();
    USP_CHECK(image_size % cfg.stride == 0, "codec: image size not divisible by stride");
    if (cfg.identity) return;
    Rng rng(seed);
    Eigen::Index h = image_size, ch = cfg.width;
    enc_.push_back(conv("enc.conv_in", rng, 3, ch, h, 3, 1, 1));
    for (int i = 0; i < cfg.downsamples(); ++i) {
      enc_.push_back(conv("enc.down" + std::to_string(i), rng, ch, cfg.latent_width, h, 2, 2, 0));
      ch = cfg.latent_width;
      h /= 2;
    }
    enc_out_ = conv("enc.conv_out", rng, ch, 2 * cfg.channels, h, 1, 1, 0);
    dec_.push_back(conv("dec.conv_in", rng, cfg.channels, cfg.latent_width, h, 1, 1, 0));
    ch = cfg.latent_width;
    for (int i = 0; i < cfg.downsamples(); ++i) {
      const Eigen::Index out_ch = (i + 1 == cfg.downsamples()) ? cfg.width : cfg.latent_width;
      dec_.push_back(conv("dec.up" + std::to_string(i), rng, ch, 4 * out_ch, h, 1, 1, 0));
      shuffles_.push_back(detail::pixel_shuffle_perm(out_ch, h, h));
      ch = out_ch;
      h *= 2;
    }
    dec_out_ = conv("dec.conv_out", rng, ch, 3, h, 3, 1, 1);
    params_.add("latent_scale", Mat<T>::Ones(1, 1), {1}, false, false);
  }

  const LatentCodecConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }
  int image_size() const { return size_; }
  int latent_size() const { return size_ / cfg_.stride; }
  T latent_scale() const { return cfg_.identity ? T(1) : params_["latent_scale"].value()(0, 0); }
  void set_latent_scale(T s) { params_.at("latent_scale").var.mutable_value()(0, 0) = s; }

  /// Posterior (mean, logvar) of the unscaled latent.
  std::pair<Var<T>, Var<T>> posterior(const Var<T>& x) const {
    if (cfg_.identity) return {x, Var<T>::constant(Mat<T>::Zero(x.rows(), x.cols()))};
    Var<T> h = x;
    for (const auto& c : enc_) h = ag::silu(c(h));
    Var<T> out = enc_out_(h);
    const Eigen::Index half = out.cols() / 2;
    return {ag::slice_cols(out, 0, half), ag::slice_cols(out, half, half)};
  }

  Var<T> decode_raw(const Var<T>& z) const {
    if (cfg_.identity) return z;
    Var<T> h = ag::silu(dec_.front()(z));
    for (std::size_t i = 1; i < dec_.size(); ++i) h = ag::silu(ag::permute_cols(dec_[i](h), shuffles_[i - 1]));
    return dec_out_(h);
  }

 private:
  detail::ConvLayer<T> conv(const std::string& name, Rng& rng, Eigen::Index cin, Eigen::Index cout, Eigen::Index size,
                            Eigen::Index k, Eigen::Index stride, Eigen::Index pad) {
    const double std = std::sqrt(1.0 / static_cast<double>(cin * k * k));
    detail::ConvLayer<T> l;
    l.weight = params_.add(name + ".weight", nn::trunc_normal<T>(rng, cout, cin * k * k, std), {cout, cin, k, k}, true);
    l.bias = params_.add(name + ".bias", Mat<T>::Zero(1, cout), {cout}, false);
    l.geom = ag::ConvGeometry{cin, size, size, k, stride, pad};
    return l;
  }

  LatentCodecConfig cfg_;
  int size_;
  nn::ParamStore<T> params_;
  std::vector<detail::ConvLayer<T>> enc_, dec_;
  detail::ConvLayer<T> enc_out_, dec_out_;
  std::vector<std::shared_ptr<const std::vector<Eigen::Index>>> shuffles_;
};

// ---------------------------------------------------------------------------
// A loaded, frozen codec.

class FrozenCodec {
 public:
  static FrozenCodec identity(int image_size, const NormalizationSpec& spec) {
    LatentCodecConfig cfg;
    cfg.channels = 3;
    cfg.stride = 1;
    cfg.identity = true;
    cfg.frozen = true;
    CheckpointArchive a;
    a.stage = "codec";
    a.config = {{"codec", cfg.to_json()}, {"image_size", image_size}, {"norm", spec.to_json()}};
    a.meta["frozen"] = true;
    return FrozenCodec(a);
  }

  explicit FrozenCodec(const CheckpointArchive& archive)
      : archive_(archive),
        cfg_(LatentCodecConfig::from_json(archive.config.at("codec"))),
        norm_(NormalizationSpec::from_name(archive.config.at("norm").at("name"))),
        model_(cfg_, archive.config.at("image_size").get<int>(), 0) {
    if (archive.stage != "codec") throw invalid_argument("codec: archive stage is '" + archive.stage + "'");
    if (!archive.meta.value("frozen", false)) throw invalid_argument("codec: archive is not frozen");
    cfg_.frozen = true;
    if (!cfg_.identity) archive.load_params(model_.params());
    fingerprint_ = Digest{}.str(archive.digest()).str(norm_.name).hex();
  }

  const LatentCodecConfig& config() const { return cfg_; }
  const NormalizationSpec& norm() const { return norm_; }
  const std::string& fingerprint() const { return fingerprint_; }
  const CheckpointArchive& archive() const { return archive_; }
  int image_size() const { return model_.image_size(); }
  int latent_size() const { return model_.latent_size(); }

  /// Encodes a batch. Deterministic mode returns the posterior mean; otherwise
  /// a posterior sample drawn from `rng`.
  LatentGrid encode(const ImageBatch& batch, const NormalizationSpec& spec, bool sample = false,
                    Rng* rng = nullptr) const {
    if (spec.name != norm_.name)
      throw digest_mismatch("codec was built with normalization '" + norm_.name + "', caller supplied '" + spec.name +
                            "'");
    USP_CHECK(batch.height == image_size() && batch.width == image_size(), "encode: image size does not match codec");
    return encode_normalized(normalize_image(batch, spec), sample, rng);
  }

  LatentGrid encode_normalized(const MatF& x, bool sample = false, Rng* rng = nullptr) const {
    ag::NoGradGuard ng;
    LatentGrid g;
    g.channels = cfg_.channels;
    g.height = g.width = latent_size();
    g.codec_fingerprint = fingerprint_;
    g.values.resize(x.rows(), static_cast<Eigen::Index>(cfg_.channels) * g.height * g.width);
    constexpr Eigen::Index kChunk = 64;
    for (Eigen::Index s = 0; s < x.rows(); s += kChunk) {
      const Eigen::Index n = std::min(kChunk, x.rows() - s);
      auto [mean, logvar] = model_.posterior(Var<float>::constant(x.middleRows(s, n)));
      MatF z = mean.value();
      if (sample && !cfg_.identity) {
        USP_CHECK(rng != nullptr, "encode: sampling mode needs an rng");
        z += ((logvar.value() * 0.5f).array().exp() * randn<float>(*rng, n, z.cols()).array()).matrix();
      }
      g.values.middleRows(s, n) = z * model_.latent_scale();
    }
    return g;
  }

  /// Latents back to normalized pixel space.
  MatF decode(const LatentGrid& g) const {
    check_fingerprint(g.codec_fingerprint);
    return decode_values(g.values);
  }
  MatF decode_values(const MatF& latents) const {
    ag::NoGradGuard ng;
    MatF out(latents.rows(), 3 * image_size() * image_size());
    constexpr Eigen::Index kChunk = 64;
    for (Eigen::Index s = 0; s < latents.rows(); s += kChunk) {
      const Eigen::Index n = std::min(kChunk, latents.rows() - s);
      out.middleRows(s, n) =
          model_.decode_raw(Var<float>::constant(latents.middleRows(s, n) / model_.latent_scale())).value();
    }
    return out;
  }

  void check_fingerprint(const std::string& fp) const {
    if (fp != fingerprint_)
      throw digest_mismatch("latent codec fingerprint " + fp + " does not match configured codec " + fingerprint_);
  }

 private:
  CheckpointArchive archive_;
  LatentCodecConfig cfg_;
  NormalizationSpec norm_;
  ConvVae<float> model_;
  std::string fingerprint_;
};

// ---------------------------------------------------------------------------
// Codec training

struct CodecTrainOptions {
  int epochs = 10;
  int batch = 32;
  double lr = 1e-3;
  double holdout_fraction = 0.1;
  double max_recon_mse = 0.05;  // in normalized pixel units
  std::uint64_t seed = 0;
  bool verbose = false;
};

struct CodecTrainResult {
  CheckpointArchive archive;
  double holdout_mse = 0.0;
};

inline CodecTrainResult train_codec(const ImageBatch& dataset, LatentCodecConfig cfg, const NormalizationSpec& spec,
                                    const CodecTrainOptions& opt) {
  if (cfg.frozen) throw invalid_argument("train_codec: codec config is already frozen");
  dataset.validate();
  USP_CHECK(dataset.height == dataset.width, "train_codec: square images expected");
  CheckpointArchive archive;
  archive.stage = "codec";
  archive.config = {{"codec", cfg.to_json()}, {"image_size", dataset.height}, {"norm", spec.to_json()}};
  archive.meta["train"] = {{"epochs", opt.epochs}, {"batch", opt.batch}, {"lr", opt.lr}, {"seed", opt.seed}};

  const MatF x = normalize_image(dataset, spec);
  const auto n_hold = static_cast<Eigen::Index>(std::floor(static_cast<double>(x.rows()) * opt.holdout_fraction));
  const Eigen::Index n_train = x.rows() - n_hold;
  CodecTrainResult result;

  if (cfg.identity) {
    result.holdout_mse = 0.0;
  } else {
    USP_CHECK(n_train > 0 && n_hold > 0, "train_codec: dataset too small for a holdout split");
    ConvVae<float> model(cfg, dataset.height, derive_seed(opt.seed, "codec.init"));
    optim::AdamW<float> adam(model.params(), optim::AdamWConfig{0.9, 0.999, 1e-8, 0.0});
    Rng rng(derive_seed(opt.seed, "codec.train"));
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n_train));
    for (Eigen::Index i = 0; i < n_train; ++i) order[static_cast<std::size_t>(i)] = i;
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
      rng.shuffle(order);
      double running = 0.0;
      int steps = 0;
      for (std::size_t s = 0; s + static_cast<std::size_t>(opt.batch) <= order.size(); s += static_cast<std::size_t>(opt.batch)) {
        MatF xb(opt.batch, x.cols());
        for (int i = 0; i < opt.batch; ++i) xb.row(i) = x.row(order[s + static_cast<std::size_t>(i)]);
        if (rng.uniform() < 0.5) xb = data::hflip(xb, 3, dataset.height, dataset.width);
        auto xv = Var<float>::constant(xb);
        auto [mean, logvar] = model.posterior(xv);
        auto eps = Var<float>::constant(randn<float>(rng, mean.rows(), mean.cols()));
        auto z = ag::add(mean, ag::mul(ag::exp(ag::scale(logvar, 0.5f)), eps));
        auto recon = model.decode_raw(z);
        auto rec_loss = ag::mse(recon, xb);
        // KL(q || N(0, I)) summed over latent dims, averaged over the batch.
        auto kl = ag::scale(ag::sum_all(ag::sub(ag::add(ag::mul(mean, mean), ag::exp(logvar)),
                                                ag::add(logvar, Var<float>::constant(MatF::Ones(mean.rows(), mean.cols()))))),
                            static_cast<float>(0.5 * cfg.kl_weight / opt.batch));
        auto loss = ag::add(rec_loss, kl);
        if (!std::isfinite(loss.item())) throw numeric_error("train_codec: non-finite loss");
        model.params().zero_grad();
        ag::backward(loss);
        adam.step(opt.lr);
        running += rec_loss.item();
        ++steps;
      }
      if (opt.verbose) std::fprintf(stderr, "[codec] epoch %d recon %.5f\n", epoch, running / std::max(steps, 1));
    }
    // Posterior-mean statistics set the latent scale so cached latents have unit variance.
    {
      ag::NoGradGuard ng;
      double sum = 0.0, sq = 0.0;
      std::size_t count = 0;
      for (Eigen::Index s = 0; s < n_train; s += 256) {
        const Eigen::Index nb = std::min<Eigen::Index>(256, n_train - s);
        const MatF m = model.posterior(Var<float>::constant(x.middleRows(s, nb))).first.value();
        sum += m.cast<double>().sum();
        sq += m.cast<double>().squaredNorm();
        count += static_cast<std::size_t>(m.size());
      }
      const double mean = sum / static_cast<double>(count);
      const double var = sq / static_cast<double>(count) - mean * mean;
      model.set_latent_scale(static_cast<float>(1.0 / std::sqrt(std::max(var, 1e-12))));
      const MatF hold = x.bottomRows(n_hold);
      const MatF rec = model.decode_raw(model.posterior(Var<float>::constant(hold)).first).value();
      result.holdout_mse = (rec - hold).squaredNorm() / static_cast<double>(hold.size());
    }
    archive.store_params(model.params());
  }
  archive.meta["holdout_mse"] = result.holdout_mse;
  if (!(result.holdout_mse <= opt.max_recon_mse))
    throw numeric_error("train_codec: holdout reconstruction MSE " + std::to_string(result.holdout_mse) +
                        " above threshold " + std::to_string(opt.max_recon_mse));
  archive.meta["frozen"] = true;
  result.archive = std::move(archive);
  return result;
}

// ---------------------------------------------------------------------------
// Latent cache file
//
//   "USPC" | u16 version | u32 header length | header (UTF-8 JSON) | records
// header: {codec_fingerprint, count, shape [orientations, C, h, w], dtype "f32le"}
// record: u32 sample_id | i32 label | f32le latents (orientation-major)
// The magic is written last, so an interrupted write leaves an invalid header.

struct LatentCache {
  std::string codec_fingerprint;
  int orientations = 2;  // 0: as stored, 1: horizontally flipped
  int channels = 0, height = 0, width = 0;
  std::vector<std::uint32_t> ids;
  std::vector<int> labels;
  MatF latents;  // [count * orientations, C*h*w]; row = sample * orientations + orientation

  std::size_t count() const { return ids.size(); }
  Eigen::Index dim() const { return static_cast<Eigen::Index>(channels) * height * width; }

  json header() const {
    return {{"codec_fingerprint", codec_fingerprint},
            {"count", ids.size()},
            {"shape", {orientations, channels, height, width}},
            {"dtype", "f32le"}};
  }

  LatentGrid grid(int orientation = 0) const {
    LatentGrid g{MatF(static_cast<Eigen::Index>(count()), dim()), channels, height, width, codec_fingerprint};
    for (std::size_t i = 0; i < count(); ++i)
      g.values.row(static_cast<Eigen::Index>(i)) = latents.row(static_cast<Eigen::Index>(i) * orientations + orientation);
    return g;
  }
};

inline constexpr std::uint16_t kCacheVersion = 1;

inline void write_cache(const LatentCache& cache, const std::filesystem::path& path) {
  USP_CHECK(cache.latents.rows() == static_cast<Eigen::Index>(cache.count()) * cache.orientations,
            "write_cache: latent rows do not match count");
  USP_CHECK(cache.labels.size() == cache.count(), "write_cache: label count mismatch");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open " + path.string());
  const std::string header = cache.header().dump();
  std::string head(4, '\0');
  io::put<std::uint16_t>(head, kCacheVersion);
  io::put<std::uint32_t>(head, static_cast<std::uint32_t>(header.size()));
  head += header;
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  const Eigen::Index per = cache.dim() * cache.orientations;
  for (std::size_t i = 0; i < cache.count(); ++i) {
    std::string rec;
    io::put<std::uint32_t>(rec, cache.ids[i]);
    io::put<std::int32_t>(rec, cache.labels[i]);
    rec.append(reinterpret_cast<const char*>(cache.latents.row(static_cast<Eigen::Index>(i) * cache.orientations).data()),
               static_cast<std::size_t>(per) * sizeof(float));
    out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  }
  out.seekp(0);
  out.write("USPC", 4);
  if (!out) throw io_error("short write to " + path.string());
}

inline LatentCache read_cache(const std::filesystem::path& path) {
  const std::string bytes = io::read_file(path);
  if (bytes.size() < 10 || bytes.compare(0, 4, "USPC") != 0)
    throw io_error("latent cache " + path.string() + ": invalid header (incomplete or not a cache)");
  std::size_t pos = 4;
  if (io::get<std::uint16_t>(bytes, pos) != kCacheVersion) throw io_error("latent cache: unsupported version");
  const auto len = io::get<std::uint32_t>(bytes, pos);
  if (pos + len > bytes.size()) throw io_error("latent cache: truncated header");
  const json h = json::parse(bytes.substr(pos, len));
  pos += len;
  if (h.at("dtype") != "f32le") throw io_error("latent cache: unsupported dtype");
  LatentCache c;
  c.codec_fingerprint = h.at("codec_fingerprint");
  const auto shape = h.at("shape").get<std::vector<int>>();
  if (shape.size() != 4) throw io_error("latent cache: bad shape");
  c.orientations = shape[0];
  c.channels = shape[1];
  c.height = shape[2];
  c.width = shape[3];
  const auto count = h.at("count").get<std::size_t>();
  const Eigen::Index per = c.dim() * c.orientations;
  const std::size_t rec_size = 8 + static_cast<std::size_t>(per) * sizeof(float);
  if (bytes.size() - pos != count * rec_size)
    throw io_error("latent cache: record count does not match header count");
  c.latents.resize(static_cast<Eigen::Index>(count) * c.orientations, c.dim());
  for (std::size_t i = 0; i < count; ++i) {
    c.ids.push_back(io::get<std::uint32_t>(bytes, pos));
    c.labels.push_back(io::get<std::int32_t>(bytes, pos));
    std::memcpy(c.latents.row(static_cast<Eigen::Index>(i) * c.orientations).data(), bytes.data() + pos,
                static_cast<std::size_t>(per) * sizeof(float));
    pos += static_cast<std::size_t>(per) * sizeof(float);
  }
  return c;
}

/// Encodes every sample (and its mirror image) with the frozen codec.
inline LatentCache build_cache(const ImageBatch& dataset, const FrozenCodec& codec, const NormalizationSpec& spec,
                               bool both_orientations = true) {
  LatentCache c;
  c.codec_fingerprint = codec.fingerprint();
  c.orientations = both_orientations ? 2 : 1;
  c.channels = codec.config().channels;
  c.height = c.width = codec.latent_size();
  const auto n = static_cast<std::size_t>(dataset.size());
  c.latents.resize(static_cast<Eigen::Index>(n) * c.orientations, c.dim());
  for (std::size_t i = 0; i < n; ++i) {
    c.ids.push_back(static_cast<std::uint32_t>(i));
    c.labels.push_back(dataset.labels.empty() ? -1 : dataset.labels[i]);
  }
  if (n == 0) return c;
  const LatentGrid plain = codec.encode(dataset, spec);
  for (std::size_t i = 0; i < n; ++i) c.latents.row(static_cast<Eigen::Index>(i) * c.orientations) = plain.values.row(static_cast<Eigen::Index>(i));
  if (both_orientations) {
    data::ImageBatch flipped = dataset;
    flipped.pixels = data::hflip(dataset.pixels, 3, dataset.height, dataset.width);
    const LatentGrid mirrored = codec.encode(flipped, spec);
    for (std::size_t i = 0; i < n; ++i)
      c.latents.row(static_cast<Eigen::Index>(i) * 2 + 1) = mirrored.values.row(static_cast<Eigen::Index>(i));
  }
  return c;
}

}  // namespace usp::codec

#endif  // USP_CODEC_HPP
