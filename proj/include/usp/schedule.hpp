#ifndef USP_SCHEDULE_HPP
#define USP_SCHEDULE_HPP

// DDPM noise schedule and the linear flow path, shared by trainers and samplers.

#include "usp/core.hpp"

namespace usp {

class NoiseSchedule {
 public:
  /// Linear betas from beta_start to beta_end over `steps` steps.
  static NoiseSchedule linear(int steps = 1000, double beta_start = 1e-4, double beta_end = 2e-2) {
    USP_CHECK(steps >= 1, "NoiseSchedule: steps must be >= 1");
    std::vector<double> betas(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i)
      betas[static_cast<std::size_t>(i)] =
          steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / static_cast<double>(steps - 1);
    std::vector<int> map(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) map[static_cast<std::size_t>(i)] = i;
    return NoiseSchedule(std::move(betas), std::move(map));
  }

  /// Keeps `count` evenly spaced timesteps of this schedule and recomputes betas
  /// so the retained cumulative products are unchanged.
  NoiseSchedule respaced(int count) const {
    USP_CHECK(count >= 1 && count <= steps(), "NoiseSchedule::respaced: count must lie in [1, T]");
    std::vector<int> keep;
    if (count == 1) {
      keep.push_back(steps() - 1);
    } else {
      const double stride = static_cast<double>(steps() - 1) / static_cast<double>(count - 1);
      for (int i = 0; i < count; ++i) keep.push_back(static_cast<int>(std::lround(i * stride)));
    }
    std::vector<double> betas;
    std::vector<int> map;
    double last = 1.0;
    for (int t : keep) {
      const double ac = alphas_cumprod_[static_cast<std::size_t>(t)];
      betas.push_back(1.0 - ac / last);
      last = ac;
      map.push_back(timestep_map_[static_cast<std::size_t>(t)]);
    }
    return NoiseSchedule(std::move(betas), std::move(map));
  }

  int steps() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const { return betas_.at(static_cast<std::size_t>(t)); }
  double alpha_bar(int t) const { return alphas_cumprod_.at(static_cast<std::size_t>(t)); }
  double alpha_bar_prev(int t) const { return t == 0 ? 1.0 : alpha_bar(t - 1); }
  /// Timestep index the model sees (differs from t after respacing).
  int model_timestep(int t) const { return timestep_map_.at(static_cast<std::size_t>(t)); }

  double posterior_variance(int t) const {
    return beta(t) * (1.0 - alpha_bar_prev(t)) / (1.0 - alpha_bar(t));
  }
  /// log of the posterior variance with the t=0 value replaced by t=1 (finite).
  double posterior_log_variance_clipped(int t) const {
    if (steps() == 1) return std::log(std::max(beta(0), 1e-20));
    return std::log(t == 0 ? posterior_variance(1) : posterior_variance(t));
  }
  double posterior_mean_coef_x0(int t) const {
    return beta(t) * std::sqrt(alpha_bar_prev(t)) / (1.0 - alpha_bar(t));
  }
  double posterior_mean_coef_xt(int t) const {
    return (1.0 - alpha_bar_prev(t)) * std::sqrt(1.0 - beta(t)) / (1.0 - alpha_bar(t));
  }

  /// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
  template <typename T>
  Mat<T> q_sample(const Mat<T>& x0, int t, const Mat<T>& eps) const {
    if (t < 0 || t >= steps()) throw invalid_argument("q_sample: timestep " + std::to_string(t) + " out of range");
    return q_sample_abar(x0, alpha_bar(t), eps);
  }

  template <typename T>
  static Mat<T> q_sample_abar(const Mat<T>& x0, double abar, const Mat<T>& eps) {
    USP_CHECK(x0.rows() == eps.rows() && x0.cols() == eps.cols(), "q_sample: shape mismatch");
    return T(std::sqrt(abar)) * x0 + T(std::sqrt(1.0 - abar)) * eps;
  }

 private:
  NoiseSchedule(std::vector<double> betas, std::vector<int> map) : betas_(std::move(betas)), timestep_map_(std::move(map)) {
    double prod = 1.0;
    for (double b : betas_) {
      prod *= 1.0 - b;
      alphas_cumprod_.push_back(prod);
    }
  }

  std::vector<double> betas_;
  std::vector<double> alphas_cumprod_;
  std::vector<int> timestep_map_;
};

/// Linear interpolant between data (t = 0) and noise (t = 1).
struct FlowPath {
  template <typename T>
  static Mat<T> interpolate(const Mat<T>& x0, const Mat<T>& eps, T t) {
    return (T(1) - t) * x0 + t * eps;
  }
  /// Velocity target d x_t / dt = eps - x0 (independent of t).
  template <typename T>
  static Mat<T> velocity(const Mat<T>& x0, const Mat<T>& eps) {
    return eps - x0;
  }
};

}  // namespace usp

#endif  // USP_SCHEDULE_HPP
