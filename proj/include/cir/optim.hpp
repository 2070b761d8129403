#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include "cir/tensor.hpp"

namespace cir {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;

  /// Fusion and Retrieval-DPO setup.
  static AdamWConfig standard() { return {}; }
  /// Full-model fine-tuning setup with the tighter second moment.
  static AdamWConfig blip2() { return {1e-4, 0.9, 0.98, 1e-7, 0.05}; }

  void validate() const {
    require(lr > 0.0, ErrorCode::InvalidArgument, "lr must be > 0");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
            ErrorCode::InvalidArgument, "betas must lie in [0, 1)");
    require(eps > 0.0, ErrorCode::InvalidArgument, "eps must be > 0");
    require(weight_decay >= 0.0, ErrorCode::InvalidArgument, "weight_decay must be >= 0");
  }
};

template <typename T>
struct AdamWState {
  struct Moments {
    Matrix<T> m, v;
  };
  std::map<std::string, Moments> moments;
  std::uint64_t step = 0;
};

/// One decoupled-weight-decay Adam step over every trainable tensor of the
/// bundle. Frozen tensors are never read for update nor written.
template <typename Bundle, typename T = double>
void adamw_step(Bundle& params, const Bundle& grads, AdamWState<T>& state, const AdamWConfig& cfg) {
  std::map<std::string, const Matrix<T>*> g;
  Bundle::visit(grads, [&](const std::string& name, const Matrix<T>& m) { g[name] = &m; });

  // Validate everything before touching any parameter.
  Bundle::visit(params, [&](const std::string& name, const Matrix<T>& p) {
    if (!params.trainable.at(name)) return;
    auto it = g.find(name);
    require(it != g.end(), ErrorCode::ShapeMismatch, "no gradient for " + name);
    require(it->second->rows() == p.rows() && it->second->cols() == p.cols(),
            ErrorCode::ShapeMismatch, "gradient shape mismatch for " + name);
    require(all_finite(*it->second), ErrorCode::NonFiniteGradient, "non-finite gradient in " + name);
  });

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  Bundle::visit(params, [&](const std::string& name, Matrix<T>& p) {
    if (!params.trainable.at(name)) return;
    const Matrix<T>& grad = *g.at(name);
    auto& mom = state.moments[name];
    if (mom.m.size() == 0) {
      mom.m = Matrix<T>::Zero(p.rows(), p.cols());
      mom.v = Matrix<T>::Zero(p.rows(), p.cols());
    }
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      T& w = p.data()[i];
      T& m = mom.m.data()[i];
      T& v = mom.v.data()[i];
      const double gi = grad.data()[i];
      w = T(w - cfg.lr * cfg.weight_decay * w);
      m = T(cfg.beta1 * m + (1.0 - cfg.beta1) * gi);
      v = T(cfg.beta2 * v + (1.0 - cfg.beta2) * gi * gi);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      w = T(w - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  });
}

struct OneCycleConfig {
  double max_lr = 1e-4;
  std::uint64_t total_steps = 100;
  double div_factor = 100.0;
  double final_div_factor = 1e4;
  double pct_start = 0.3;

  /// pct_start = 1.5 / num_epochs.
  static OneCycleConfig for_epochs(double max_lr, std::uint64_t epochs,
                                   std::uint64_t steps_per_epoch) {
    OneCycleConfig c;
    c.max_lr = max_lr;
    c.total_steps = epochs * steps_per_epoch;
    c.pct_start = 1.5 / static_cast<double>(epochs);
    return c;
  }

  std::uint64_t warmup_steps() const {
    return static_cast<std::uint64_t>(std::llround(pct_start * static_cast<double>(total_steps)));
  }

  void validate() const {
    require(max_lr > 0.0, ErrorCode::InvalidArgument, "max_lr must be > 0");
    require(total_steps >= 2, ErrorCode::InvalidArgument, "total_steps must be >= 2");
    require(pct_start > 0.0 && pct_start < 1.0, ErrorCode::InvalidArgument,
            "pct_start must lie in (0, 1)");
    require(div_factor > 0.0 && final_div_factor > 0.0, ErrorCode::InvalidArgument,
            "div factors must be > 0");
  }
};

/// Cosine warmup from max_lr/div_factor to max_lr at step
/// round(pct_start * total_steps), then cosine anneal to
/// max_lr/final_div_factor at the last step.
inline double onecycle_lr(std::uint64_t step, const OneCycleConfig& cfg) {
  cfg.validate();
  require(step < cfg.total_steps, ErrorCode::StepOutOfRange,
          "step " + std::to_string(step) + " outside schedule of " + std::to_string(cfg.total_steps));
  const double initial = cfg.max_lr / cfg.div_factor;
  const double final_lr = cfg.max_lr / cfg.final_div_factor;
  const std::uint64_t peak = std::min(cfg.warmup_steps(), cfg.total_steps - 1);
  auto cosine = [](double from, double to, double frac) {
    return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  };
  if (step <= peak) {
    if (peak == 0) return cfg.max_lr;
    return cosine(initial, cfg.max_lr, double(step) / double(peak));
  }
  const double span = double(cfg.total_steps - 1 - peak);
  return cosine(cfg.max_lr, final_lr, double(step - peak) / span);
}

}  // namespace cir
