#ifndef USP_OPTIM_HPP
#define USP_OPTIM_HPP

#include "usp/archive.hpp"

namespace usp::optim {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Decoupled-weight-decay Adam. Parameters flagged `decay == false` (1-D
/// tensors and learned tokens) are excluded from weight decay.
template <typename T>
class AdamW {
 public:
  AdamW(nn::ParamStore<T>& store, AdamWConfig cfg) : store_(&store), cfg_(cfg) {
    USP_CHECK(cfg.beta1 > 0 && cfg.beta1 < 1 && cfg.beta2 > 0 && cfg.beta2 < 1, "AdamW: betas must lie in (0,1)");
    for (const auto& p : store.params()) {
      m_[p.name] = Mat<T>::Zero(p.var.rows(), p.var.cols());
      v_[p.name] = Mat<T>::Zero(p.var.rows(), p.var.cols());
    }
  }

  const AdamWConfig& config() const { return cfg_; }
  std::int64_t steps() const { return step_; }

  /// Per-tensor learning-rate multiplier (layer-wise decay).
  void set_lr_scale(const std::string& name, double s) { lr_scale_[name] = s; }

  std::vector<std::string> decay_group() const {
    std::vector<std::string> out;
    for (const auto& p : store_->params())
      if (p.trainable && p.decay) out.push_back(p.name);
    return out;
  }
  std::vector<std::string> no_decay_group() const {
    std::vector<std::string> out;
    for (const auto& p : store_->params())
      if (p.trainable && !p.decay) out.push_back(p.name);
    return out;
  }

  void step(double lr) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (auto& p : store_->params()) {
      if (!p.trainable || p.var.grad().size() == 0) continue;
      auto it = lr_scale_.find(p.name);
      const double plr = lr * (it == lr_scale_.end() ? 1.0 : it->second);
      Mat<T>& w = p.var.mutable_value();
      const Mat<T>& g = p.var.grad();
      Mat<T>& m = m_.at(p.name);
      Mat<T>& v = v_.at(p.name);
      m = T(cfg_.beta1) * m + T(1.0 - cfg_.beta1) * g;
      v = T(cfg_.beta2) * v + T(1.0 - cfg_.beta2) * g.cwiseAbs2();
      if (p.decay && cfg_.weight_decay != 0.0) w *= T(1.0 - plr * cfg_.weight_decay);
      const T step_size = T(plr / bc1);
      const T denom_scale = T(1.0 / std::sqrt(bc2));
      w.array() -= step_size * m.array() / (v.array().sqrt() * denom_scale + T(cfg_.eps));
    }
  }

  /// Moments are stored as `opt.m.<name>` / `opt.v.<name>` in section "optimizer".
  void save_state(CheckpointArchive& a) const {
    for (const auto& p : store_->params()) {
      for (const auto* kind : {"m", "v"}) {
        const Mat<T>& src = std::string(kind) == "m" ? m_.at(p.name) : v_.at(p.name);
        TensorRecord r{std::string("opt.") + kind + "." + p.name, p.shape, {}, "optimizer", false};
        r.data.resize(static_cast<std::size_t>(src.size()));
        for (Eigen::Index i = 0; i < src.size(); ++i) r.data[static_cast<std::size_t>(i)] = static_cast<float>(src.data()[i]);
        a.put(std::move(r));
      }
    }
    a.meta["optimizer_steps"] = step_;
  }

  void load_state(const CheckpointArchive& a) {
    for (const auto& p : store_->params()) {
      for (const auto* kind : {"m", "v"}) {
        Mat<T>& dst = std::string(kind) == "m" ? m_.at(p.name) : v_.at(p.name);
        const auto& r = a.get(std::string("opt.") + kind + "." + p.name);
        for (Eigen::Index i = 0; i < dst.size(); ++i) dst.data()[i] = static_cast<T>(r.data[static_cast<std::size_t>(i)]);
      }
    }
    step_ = a.meta.value("optimizer_steps", std::int64_t{0});
  }

 private:
  nn::ParamStore<T>* store_;
  AdamWConfig cfg_;
  std::map<std::string, Mat<T>> m_, v_;
  std::map<std::string, double> lr_scale_;
  std::int64_t step_ = 0;
};

/// SGD with momentum, optionally with LARS layer-wise trust ratios (applied to
/// tensors in the decay group).
template <typename T>
class Sgd {
 public:
  Sgd(nn::ParamStore<T>& store, double momentum, double weight_decay, bool lars = false, double trust = 0.001)
      : store_(&store), momentum_(momentum), wd_(weight_decay), lars_(lars), trust_(trust) {}

  void step(double lr) {
    for (auto& p : store_->params()) {
      if (!p.trainable || p.var.grad().size() == 0) continue;
      Mat<T>& w = p.var.mutable_value();
      Mat<T> g = p.var.grad();
      if (p.decay) {
        g += T(wd_) * w;
        if (lars_) {
          const T wn = w.norm(), gn = g.norm();
          if (wn > T(0) && gn > T(0)) g *= T(trust_) * wn / gn;
        }
      }
      auto [it, inserted] = buf_.try_emplace(p.name, Mat<T>::Zero(w.rows(), w.cols()));
      it->second = T(momentum_) * it->second + g;
      w -= T(lr) * it->second;
    }
  }

 private:
  nn::ParamStore<T>* store_;
  double momentum_, wd_;
  bool lars_;
  double trust_;
  std::map<std::string, Mat<T>> buf_;
};

// ---------------------------------------------------------------------------
// Learning-rate schedule: linear warmup from 0 to peak, then half-cosine to floor.

struct ScheduleSpec {
  double warmup_epochs = 40;
  int total_epochs = 800;
  double floor_lr = 0.0;
};

inline double lr_at(std::int64_t step, const ScheduleSpec& sched, std::int64_t steps_per_epoch, double peak) {
  USP_CHECK(step >= 0, "lr_at: negative step");
  const double warmup = sched.warmup_epochs * static_cast<double>(steps_per_epoch);
  const double total = static_cast<double>(sched.total_epochs) * static_cast<double>(steps_per_epoch);
  const auto s = static_cast<double>(step);
  if (s < warmup) return peak * s / warmup;
  if (s >= total) return sched.floor_lr;
  const double progress = (s - warmup) / std::max(total - warmup, 1.0);
  return sched.floor_lr + (peak - sched.floor_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace usp::optim

#endif  // USP_OPTIM_HPP
