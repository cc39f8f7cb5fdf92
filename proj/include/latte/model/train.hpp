#pragma once

// AdamW with linear warmup and optional linear decay, plus a training loop
// driven by pure per-step batch functions so runs are reproducible and
// resumable bit for bit.

#include "latte/model/config.hpp"
#include "latte/model/network.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

namespace latte::model {

template <typename ScalarT>
struct AdamState {
  ParameterStore<ScalarT> m, v;
  long long step = 0;
};

template <typename ScalarT>
AdamState<ScalarT> init_adam(const ParameterStore<ScalarT>& params) {
  AdamState<ScalarT> s;
  for (const auto& name : params.names()) {
    s.m.add(name, Tensor<ScalarT>::zeros(params.at(name).shape()));
    s.v.add(name, Tensor<ScalarT>::zeros(params.at(name).shape()));
  }
  return s;
}

inline double lr_at(const ModelConfig& cfg, long long step, long long total_steps) {
  const double base = cfg.learning_rate;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return base * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  if (cfg.decay_schedule == "constant") return base;
  const long long span = std::max<long long>(1, total_steps - cfg.warmup_steps);
  const double frac = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span);
  return base * std::max(0.0, 1.0 - frac);
}

// One decoupled-weight-decay Adam step. Decay applies to rank >= 2 tensors
// only (matrices), never to gains, biases, or decay logits.
template <typename ScalarT>
void adamw_update(ParameterStore<ScalarT>& params, AdamState<ScalarT>& opt,
                  const ParameterStore<ScalarT>& grads, const ModelConfig& cfg, double lr) {
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  opt.step += 1;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(opt.step));
  for (const auto& name : params.names()) {
    Tensor<ScalarT>& p = params.at(name);
    const Tensor<ScalarT>& g = grads.at(name);
    Tensor<ScalarT>& m = opt.m.at(name);
    Tensor<ScalarT>& v = opt.v.at(name);
    const double wd = p.rank() >= 2 ? cfg.weight_decay : 0.0;
    for (Index i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = static_cast<ScalarT>(mi);
      v[i] = static_cast<ScalarT>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps) + wd * static_cast<double>(p[i]);
      p[i] = static_cast<ScalarT>(static_cast<double>(p[i]) - lr * update);
    }
  }
}

struct MetricsRow {
  long long step = 0;
  double loss = 0;
  double lr = 0;
  double task_metric = std::nan("");  // NaN when not evaluated this step
  double wallclock_ms = 0;
};

struct TrainOptions {
  long long total_steps = 1000;
  long long eval_every = 0;       // 0 disables task evaluation
  long long snapshot_every = 100; // last-good cadence for the divergence path
  double divergence_loss = 1e4;
  double stop_at_metric = std::nan("");  // early stop once the task metric reaches this
};

template <typename ScalarT>
struct TrainCallbacks {
  std::function<TokenBatch(long long step)> next_batch;                       // required, pure in step
  std::function<double(const ParameterStore<ScalarT>&, long long)> eval;      // optional task metric
  std::function<void(const MetricsRow&)> on_row;                              // optional
  std::function<void(const ParameterStore<ScalarT>&, const AdamState<ScalarT>&, long long)>
      on_last_good;  // receives the last finite snapshot if training diverges
};

struct TrainSummary {
  long long steps_run = 0;
  double final_loss = 0;
  double best_metric = std::nan("");
  bool stopped_early = false;
};

template <typename ScalarT>
TrainSummary train_lm(ParameterStore<ScalarT>& params, AdamState<ScalarT>& opt,
                      const ModelConfig& cfg, const TrainOptions& topt,
                      const TrainCallbacks<ScalarT>& cb) {
  if (!cb.next_batch) throw std::invalid_argument("train_lm needs a batch source");
  TrainSummary summary;
  ParameterStore<ScalarT> good_params = params;
  AdamState<ScalarT> good_opt = opt;
  long long good_step = opt.step;

  for (long long step = opt.step; step < topt.total_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const TokenBatch batch = cb.next_batch(step);
    double loss;
    try {
      LossGrads<ScalarT> lg = loss_and_grads(params, cfg, batch, static_cast<uint64_t>(step), true);
      loss = lg.loss;
      if (!std::isfinite(loss) || loss > topt.divergence_loss) throw std::runtime_error("loss diverged");
      const double lr = lr_at(cfg, step, topt.total_steps);
      adamw_update(params, opt, lg.grads, cfg, lr);

      MetricsRow row;
      row.step = step;
      row.loss = loss;
      row.lr = lr;
      if (topt.eval_every > 0 && cb.eval &&
          ((step + 1) % topt.eval_every == 0 || step + 1 == topt.total_steps)) {
        row.task_metric = cb.eval(params, step);
        if (std::isnan(summary.best_metric) || row.task_metric > summary.best_metric)
          summary.best_metric = row.task_metric;
      }
      row.wallclock_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      if (cb.on_row) cb.on_row(row);
      summary.steps_run = step + 1;
      summary.final_loss = loss;

      if (topt.snapshot_every > 0 && (step + 1) % topt.snapshot_every == 0) {
        good_params = params;
        good_opt = opt;
        good_step = opt.step;
      }
      if (!std::isnan(topt.stop_at_metric) && !std::isnan(row.task_metric) &&
          row.task_metric >= topt.stop_at_metric) {
        summary.stopped_early = true;
        return summary;
      }
    } catch (const std::exception& e) {
      if (cb.on_last_good) cb.on_last_good(good_params, good_opt, good_step);
      throw std::runtime_error("training diverged at step " + std::to_string(step) +
                               " (last good snapshot at step " + std::to_string(good_step) +
                               "): " + e.what());
    }
  }
  return summary;
}

}  // namespace latte::model
