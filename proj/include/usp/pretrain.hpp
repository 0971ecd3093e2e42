#ifndef USP_PRETRAIN_HPP
#define USP_PRETRAIN_HPP

// Masked latent pretraining over a latent cache: AdamW, linear warmup then
// cosine decay, per-epoch metrics, NaN abort and bitwise resume.
//
// Every random draw of step s comes from derive_seed(seed, "pretrain.step", s)
// and the sample order of epoch e from derive_seed(seed, "pretrain.epoch", e),
// so a resumed run only needs the step and epoch counters.

#include "usp/mlm.hpp"

#include <chrono>
#include <fstream>

namespace usp::pretrain {

namespace fs = std::filesystem;

struct PretrainOptions {
  vit::PretrainModelConfig model = vit::PretrainModelConfig::preset_named("tiny");
  int epochs = 100;
  double warmup_epochs = -1.0;  // negative: 5% of epochs (40 of 800 in the reference recipe)
  int batch = 256;
  double peak_lr = -1.0;  // negative: 1.5e-4 * batch / 256
  double weight_decay = 0.05;
  bool betas_as_printed = false;  // (0.95, 0.9) instead of (0.9, 0.95)
  double adam_eps = 1e-8;
  double ema_decay = 0.98;
  std::uint64_t seed = 0;
  bool verbose = false;
  int halt_after = -1;  // stop after this many epochs (not part of the config digest)

  double resolved_peak_lr() const { return peak_lr >= 0.0 ? peak_lr : 1.5e-4 * batch / 256.0; }
  double resolved_warmup() const { return warmup_epochs >= 0.0 ? warmup_epochs : 0.05 * epochs; }
  optim::AdamWConfig adam() const {
    return betas_as_printed ? optim::AdamWConfig{0.95, 0.9, adam_eps, weight_decay}
                            : optim::AdamWConfig{0.9, 0.95, adam_eps, weight_decay};
  }
  optim::ScheduleSpec schedule() const { return {resolved_warmup(), epochs, 0.0}; }

  void validate() const {
    model.validate();
    USP_CHECK(epochs >= 0 && batch > 0, "pretrain: epochs >= 0 and batch > 0 required");
    USP_CHECK(resolved_peak_lr() >= 0.0, "pretrain: peak lr must be nonnegative");
  }

  json to_json() const {
    const auto a = adam();
    return {{"model", model.to_json()},
            {"epochs", epochs},
            {"warmup_epochs", resolved_warmup()},
            {"batch", batch},
            {"peak_lr", resolved_peak_lr()},
            {"weight_decay", weight_decay},
            {"betas", {a.beta1, a.beta2}},
            {"adam_eps", adam_eps},
            {"seed", seed}};
  }
};

struct EpochMetrics {
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double loss_ema = 0.0;
  double seconds = 0.0;
};

/// With `wall_clock == false` the seconds column is written as 0 so the file is
/// reproducible bitwise; timings then belong in a sidecar file.
inline void write_metrics_csv(const std::vector<EpochMetrics>& rows, const fs::path& path, bool wall_clock = true) {
  std::ostringstream out;
  out << "step,epoch,lr,loss,loss_ema,seconds\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%lld,%d,%.9g,%.9g,%.9g,%.3f\n", static_cast<long long>(r.step), r.epoch, r.lr,
                  r.loss, r.loss_ema, wall_clock ? r.seconds : 0.0);
    out << buf;
  }
  io::write_file_atomic(path, out.str());
}

/// Training state at an epoch boundary: model and optimizer tensors plus counters.
struct PretrainState {
  std::int64_t step = 0;
  int epoch = 0;
  double loss_ema = 0.0;
  bool ema_started = false;
  std::string config_digest;
  std::vector<EpochMetrics> history;
  CheckpointArchive tensors;

  CheckpointArchive to_archive() const {
    CheckpointArchive a = tensors;
    a.stage = "pretrain_state";
    a.meta["step"] = step;
    a.meta["epoch"] = epoch;
    a.meta["loss_ema"] = loss_ema;
    a.meta["ema_started"] = ema_started;
    a.meta["config_digest"] = config_digest;
    json h = json::array();
    for (const auto& r : history) h.push_back({r.step, r.epoch, r.lr, r.loss, r.loss_ema, r.seconds});
    a.meta["history"] = h;
    return a;
  }
  static PretrainState from_archive(const CheckpointArchive& a) {
    if (a.stage != "pretrain_state") throw invalid_argument("pretrain: not a pretraining state archive");
    PretrainState s;
    s.step = a.meta.at("step");
    s.epoch = a.meta.at("epoch");
    s.loss_ema = a.meta.at("loss_ema");
    s.ema_started = a.meta.at("ema_started");
    s.config_digest = a.meta.at("config_digest");
    for (const auto& r : a.meta.at("history"))
      s.history.push_back({r[0].get<std::int64_t>(), r[1].get<int>(), r[2].get<double>(), r[3].get<double>(),
                           r[4].get<double>(), r[5].get<double>()});
    s.tensors = a;
    return s;
  }
};

struct PretrainResult {
  CheckpointArchive archive;  // stage "pretrain": encoder and decoder sections
  PretrainState state;
  std::vector<EpochMetrics> metrics;
};

/// Weight-decay group of a model (for introspection).
inline std::vector<std::string> decay_group(mlm::MaskedLatentModel<float>& model, const PretrainOptions& opt) {
  return optim::AdamW<float>(model.params(), opt.adam()).decay_group();
}

namespace detail {

inline CheckpointArchive model_archive(const mlm::MaskedLatentModel<float>& model, const PretrainOptions& opt,
                                       const std::string& fingerprint, std::int64_t steps) {
  CheckpointArchive a;
  a.stage = "pretrain";
  a.config = opt.to_json();
  a.config["codec_fingerprint"] = fingerprint;
  a.parents = {fingerprint};
  a.store_params(model.params());
  a.meta["seed"] = opt.seed;
  a.meta["steps"] = steps;
  return a;
}

/// One minibatch of latents: sample i of the epoch order with a per-draw orientation.
inline MatF gather_batch(const codec::LatentCache& cache, const std::vector<std::size_t>& order, std::size_t start,
                         int batch, Rng& rng) {
  MatF xb(batch, cache.dim());
  for (int i = 0; i < batch; ++i) {
    const std::size_t s = order[start + static_cast<std::size_t>(i)];
    const int o = cache.orientations > 1 ? static_cast<int>(rng.below(static_cast<std::uint64_t>(cache.orientations))) : 0;
    xb.row(i) = cache.latents.row(static_cast<Eigen::Index>(s) * cache.orientations + o);
  }
  return xb;
}

}  // namespace detail

/// Pretraining loss of one step given its seed (mask, orientation and noise draws).
inline ag::Var<float> step_loss(const mlm::MaskedLatentModel<float>& model, const MatF& latents, std::uint64_t seed,
                                const NoiseSchedule* noise) {
  const auto& c = model.config();
  Rng rng(seed);
  const auto plan = mlm::sample_mask(c.tokens(), c.mask_ratio, rng.next(), static_cast<std::size_t>(latents.rows()));
  if (!noise) return mlm::pretrain_loss(model, latents, plan);
  std::vector<int> t(static_cast<std::size_t>(latents.rows()));
  for (auto& v : t) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(noise->steps())));
  const MatF corrupted = mlm::noisy_pretrain_corrupt(latents, t, *noise, rng.next());
  return mlm::pretrain_loss(model, latents, plan, &corrupted);
}

/// Runs (or resumes) pretraining. `expected_fingerprint` is the configured codec;
/// a cache built by another codec is rejected. When `checkpoint` is non-empty the
/// model archive and its resume state (`<checkpoint>.state`) are written at the end
/// of every epoch, so a NaN abort leaves the last good epoch on disk.
inline PretrainResult run_pretrain(const codec::LatentCache& cache, const std::string& expected_fingerprint,
                                   const PretrainOptions& opt, const fs::path& checkpoint = {},
                                   const PretrainState* resume = nullptr) {
  opt.validate();
  if (cache.codec_fingerprint != expected_fingerprint)
    throw digest_mismatch("pretrain: cache codec fingerprint " + cache.codec_fingerprint +
                          " does not match configured codec " + expected_fingerprint);
  const auto& mc = opt.model;
  USP_CHECK(cache.channels == mc.latent_channels && cache.height == mc.latent_size,
            "pretrain: cache latent geometry does not match the model config");
  const std::size_t n = cache.count();
  const auto batch = static_cast<std::size_t>(opt.batch);
  USP_CHECK(n >= batch || opt.epochs == 0, "pretrain: fewer cached samples than one batch");
  const std::int64_t steps_per_epoch = static_cast<std::int64_t>(n / batch);

  mlm::MaskedLatentModel<float> model(mc, derive_seed(opt.seed, "pretrain.init"));
  optim::AdamW<float> adam(model.params(), opt.adam());
  const std::string cfg_digest = digest_of(opt.to_json().dump());
  PretrainState st;
  st.config_digest = cfg_digest;
  if (resume) {
    if (resume->config_digest != cfg_digest) throw digest_mismatch("pretrain: resume state was produced by another config");
    st = *resume;
    st.tensors.load_params(model.params());
    adam.load_state(st.tensors);
  }
  const NoiseSchedule noise = NoiseSchedule::linear();
  const NoiseSchedule* noise_ptr = mc.noisy_pretrain ? &noise : nullptr;
  const double peak = opt.resolved_peak_lr();
  const auto sched = opt.schedule();

  auto save_state = [&] {
    st.tensors = CheckpointArchive{};
    st.tensors.store_params(model.params());
    adam.save_state(st.tensors);
    if (!checkpoint.empty()) {
      detail::model_archive(model, opt, cache.codec_fingerprint, st.step).save(checkpoint);
      st.to_archive().save(fs::path(checkpoint.string() + ".state"));
    }
  };

  std::vector<std::size_t> order(n);
  const int last = opt.halt_after >= 0 ? std::min(opt.epochs, opt.halt_after) : opt.epochs;
  for (int epoch = st.epoch; epoch < last; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng erng(derive_seed(opt.seed, "pretrain.epoch", static_cast<std::uint64_t>(epoch)));
    erng.shuffle(order);
    double sum = 0.0, lr = 0.0;
    for (std::int64_t k = 0; k < steps_per_epoch; ++k) {
      Rng srng(derive_seed(opt.seed, "pretrain.step", static_cast<std::uint64_t>(st.step)));
      const MatF xb = detail::gather_batch(cache, order, static_cast<std::size_t>(k) * batch, opt.batch, srng);
      lr = optim::lr_at(st.step, sched, steps_per_epoch, peak);
      model.params().zero_grad();
      auto loss = step_loss(model, xb, srng.next(), noise_ptr);
      const double l = loss.item();
      if (!std::isfinite(l)) {
        throw numeric_error("pretrain: non-finite loss at step " + std::to_string(st.step) +
                            (checkpoint.empty() ? std::string() : "; last good checkpoint kept at " + checkpoint.string()));
      }
      ag::backward(loss);
      adam.step(lr);
      st.loss_ema = st.ema_started ? opt.ema_decay * st.loss_ema + (1.0 - opt.ema_decay) * l : l;
      st.ema_started = true;
      sum += l;
      ++st.step;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    st.history.push_back({st.step, epoch, lr, sum / static_cast<double>(std::max<std::int64_t>(steps_per_epoch, 1)),
                          st.loss_ema, secs});
    st.epoch = epoch + 1;
    if (opt.verbose)
      std::fprintf(stderr, "[pretrain] epoch %d step %lld lr %.3g loss %.5f ema %.5f (%.1fs)\n", epoch,
                   static_cast<long long>(st.step), lr, st.history.back().loss, st.loss_ema, secs);
    save_state();
  }
  if (st.tensors.tensors().empty()) save_state();

  PretrainResult r;
  r.archive = detail::model_archive(model, opt, cache.codec_fingerprint, st.step);
  r.metrics = st.history;
  r.state = std::move(st);
  return r;
}

/// Rebuilds a pretraining model from its archive (decoder included).
inline mlm::MaskedLatentModel<float> load_model(const CheckpointArchive& a) {
  if (a.stage != "pretrain") throw invalid_argument("expected a pretrain archive, got '" + a.stage + "'");
  mlm::MaskedLatentModel<float> model(vit::PretrainModelConfig::from_json(a.config.at("model")), 0);
  for (const auto& p : model.params().params())
    if (!a.contains(p.name)) throw invalid_argument("pretrain archive is missing tensor " + p.name);
  a.load_params(model.params());
  return model;
}

}  // namespace usp::pretrain

#endif  // USP_PRETRAIN_HPP
