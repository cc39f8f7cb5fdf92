#pragma once

// Hybrid mechanism: a normalized mixture of sliding-window softmax attention
// (latent state 0) and the causal directed mechanism (states 1..L), with
// direct, convolutional, or gated-recurrent parameterisations of the features
// that drive the latent branch.

#include "latte/attention.hpp"
#include "latte/latte.hpp"
#include "latte/numerics.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>

namespace latte {

enum class FeatureMode { direct, conv, rglru };

// Causal 1D convolution taps. Depthwise weights are K x D, full weights are
// K x D x D with tap i applied as x_{t-i} * W_i.
template <typename ScalarT>
struct ConvFeatureParams {
  Tensor<ScalarT> weights;
  bool depthwise = true;

  Index taps() const { return weights.extent(0); }

  void validate(Index width) const {
    if (depthwise) {
      if (weights.rank() != 2 || weights.extent(1) != width)
        throw std::invalid_argument("depthwise conv weights must be K x D");
    } else {
      if (weights.rank() != 3 || weights.extent(1) != width || weights.extent(2) != width)
        throw std::invalid_argument("conv weights must be K x D x D");
    }
    if (taps() < 1) throw std::invalid_argument("conv kernel needs at least one tap");
    if (!weights.all_finite()) throw std::invalid_argument("conv weights must be finite");
  }
};

template <typename ScalarT>
struct RGLRUParams {
  Tensor<ScalarT> w_input_gate;  // D x D
  Tensor<ScalarT> w_rec_gate;    // D x D
  Tensor<ScalarT> log_decay;     // D, pre-sigmoid decay parameter
  double sharpness_c = 8.0;

  void validate(Index width) const {
    if (w_input_gate.rank() != 2 || w_input_gate.extent(0) != width ||
        w_input_gate.extent(1) != width)
      throw std::invalid_argument("input gate weights must be D x D");
    if (w_rec_gate.rank() != 2 || w_rec_gate.extent(0) != width ||
        w_rec_gate.extent(1) != width)
      throw std::invalid_argument("recurrence gate weights must be D x D");
    if (log_decay.rank() != 1 || log_decay.extent(0) != width)
      throw std::invalid_argument("log_decay must be a length-D vector");
    if (sharpness_c <= 0) throw std::invalid_argument("sharpness must be positive");
    if (!w_input_gate.all_finite() || !w_rec_gate.all_finite() || !log_decay.all_finite())
      throw std::invalid_argument("rglru parameters must be finite");
  }
};

template <typename ScalarT>
struct MacchiatoParams {
  LatteParams<ScalarT> latte;   // w_q/w_k read the features y; w_v reads raw x
  Tensor<ScalarT> gate_row_0;   // D x H, one window-branch logit row per head
  AttentionParams<ScalarT> swa; // per-head q/k for the window branch
  Index window = 1;
  bool use_rope_in_swa = true;
  bool share_values = true;  // window branch reuses latte.w_v instead of swa.w_v
  FeatureMode feature_mode = FeatureMode::direct;
  ConvFeatureParams<ScalarT> conv;
  RGLRUParams<ScalarT> rglru;

  int heads() const { return swa.heads; }
  Index width() const { return latte.w_v.extent(0); }
  Index value_dim() const { return latte.w_v.extent(1); }
  Index latent_dim() const { return latte.w_q.rank() == 2 ? latte.w_q.extent(1) : 0; }
  Index head_latents() const { return latent_dim() / heads(); }
  Index head_values() const { return value_dim() / heads(); }

  void validate() const {
    const Index D = width();
    if (latent_dim() > 0) {
      latte.validate();
      if (latte.heads != swa.heads)
        throw std::invalid_argument("latte and window branches must agree on heads");
    } else {
      if (latte.w_v.rank() != 2 || !latte.w_v.all_finite())
        throw std::invalid_argument("value projection must be a finite matrix");
    }
    swa.validate();
    if (swa.w_q.extent(0) != D)
      throw std::invalid_argument("window branch input width mismatch");
    if (value_dim() % heads() != 0)
      throw std::invalid_argument("heads must divide the value width");
    if (gate_row_0.rank() != 2 || gate_row_0.extent(0) != D ||
        gate_row_0.extent(1) != heads())
      throw std::invalid_argument("gate_row_0 must be D x heads");
    if (!gate_row_0.all_finite()) throw std::invalid_argument("gate_row_0 must be finite");
    if (window < 1) throw std::invalid_argument("window must be positive");
    if (feature_mode == FeatureMode::conv) conv.validate(D);
    if (feature_mode == FeatureMode::rglru) rglru.validate(D);
  }
};

template <typename ScalarT>
struct MacchiatoResult {
  SequenceBatch<ScalarT> out;
  std::optional<AttentionMatrix<ScalarT>> trace;
};

namespace detail {

template <typename ScalarT>
ScalarT stable_sigmoid(ScalarT z) {
  if (z >= 0) return ScalarT(1) / (ScalarT(1) + std::exp(-z));
  const ScalarT e = std::exp(z);
  return e / (ScalarT(1) + e);
}

// log(sigmoid(z)) without overflow on either tail.
template <typename ScalarT>
ScalarT log_sigmoid(ScalarT z) {
  if (z >= 0) return -std::log1p(std::exp(-z));
  return z - std::log1p(std::exp(z));
}

}  // namespace detail

/// Causal convolution with left zero-padding: y_t = sum_i tap_i applied to
/// x_{t-i}.
template <typename ScalarT>
SequenceBatch<ScalarT> conv_features(const SequenceBatch<ScalarT>& x,
                                     const ConvFeatureParams<ScalarT>& conv) {
  const Index B = x.batch(), T = x.len(), D = x.width();
  conv.validate(D);
  const Index K = conv.taps();
  SequenceBatch<ScalarT> y(Tensor<ScalarT>::zeros({B, T, D}));
  for (Index b = 0; b < B; ++b) {
    auto xb = x.item(b);
    auto yb = y.item(b);
    for (Index i = 0; i < K; ++i) {
      if (conv.depthwise) {
        for (Index t = i; t < T; ++t)
          for (Index d = 0; d < D; ++d) yb(t, d) += conv.weights(i, d) * xb(t - i, d);
      } else {
        ConstMatMap<ScalarT> wi(conv.weights.data() + i * D * D, D, D);
        for (Index t = i; t < T; ++t) yb.row(t) += xb.row(t - i) * wi;
      }
    }
  }
  return y;
}

/// Gated linear recurrence over channels: r and i are sigmoid gates, the decay
/// is sigmoid(log_decay)^(c*r), and the input is scaled by sqrt(1 - a^2).
template <typename ScalarT>
SequenceBatch<ScalarT> rglru_features(const SequenceBatch<ScalarT>& x,
                                      const RGLRUParams<ScalarT>& params) {
  const Index B = x.batch(), T = x.len(), D = x.width();
  params.validate(D);
  SequenceBatch<ScalarT> y(Tensor<ScalarT>::zeros({B, T, D}));
  for (Index b = 0; b < B; ++b) {
    MatrixX<ScalarT> rec = x.item(b) * params.w_rec_gate.matrix(D, D);
    MatrixX<ScalarT> inp = x.item(b) * params.w_input_gate.matrix(D, D);
    VectorX<ScalarT> h = VectorX<ScalarT>::Zero(D);
    for (Index t = 0; t < T; ++t) {
      for (Index d = 0; d < D; ++d) {
        const ScalarT r = detail::stable_sigmoid(rec(t, d));
        const ScalarT i = detail::stable_sigmoid(inp(t, d));
        const ScalarT a = std::exp(static_cast<ScalarT>(params.sharpness_c) * r *
                                   detail::log_sigmoid(params.log_decay[d]));
        const ScalarT gated = i * x.values(b, t, d);
        h(d) = a * h(d) + std::sqrt(std::max(ScalarT(0), ScalarT(1) - a * a)) * gated;
        y.values(b, t, d) = h(d);
      }
    }
  }
  return y;
}

template <typename ScalarT>
SequenceBatch<ScalarT> compute_features(const SequenceBatch<ScalarT>& x,
                                        const MacchiatoParams<ScalarT>& params) {
  switch (params.feature_mode) {
    case FeatureMode::direct:
      return x;
    case FeatureMode::conv:
      return conv_features(x, params.conv);
    case FeatureMode::rglru:
      return rglru_features(x, params.rglru);
  }
  throw std::logic_error("unknown feature mode");
}

/// Per-head mixture over the window state and the latent states: softmax over
/// [y_t . gate_row_0(h), y_t . w_q(h,1..Lh)].
template <typename ScalarT>
Tensor<ScalarT> mixture_gate(const SequenceBatch<ScalarT>& y,
                             const MacchiatoParams<ScalarT>& params) {
  params.validate();
  const Index B = y.batch(), T = y.len(), D = y.width();
  if (D != params.width()) throw std::invalid_argument("feature width mismatch");
  const Index H = params.heads(), Lh = params.head_latents(), L = params.latent_dim();

  Tensor<ScalarT> gate({B, H, T, Lh + 1});
  for (Index b = 0; b < B; ++b) {
    MatrixX<ScalarT> g0 = y.item(b) * params.gate_row_0.matrix(D, H);
    MatrixX<ScalarT> ql;
    if (L > 0) ql.noalias() = y.item(b) * params.latte.w_q.matrix(D, L);
    detail::RowX<ScalarT> logits(Lh + 1), p(Lh + 1);
    for (Index t = 0; t < T; ++t)
      for (Index h = 0; h < H; ++h) {
        logits(0) = g0(t, h);
        for (Index l = 0; l < Lh; ++l) logits(l + 1) = ql(t, h * Lh + l);
        detail::head_softmax(logits.data(), Lh + 1, p.data());
        for (Index l = 0; l <= Lh; ++l) gate(b, h, t, l) = p(l);
      }
  }
  return gate;
}

/// Forward pass with caller-supplied features; the public macchiato_forward
/// derives y from the configured feature mode and defers here.
template <typename ScalarT>
MacchiatoResult<ScalarT> macchiato_forward_given_features(const SequenceBatch<ScalarT>& x,
                                                          const SequenceBatch<ScalarT>& y,
                                                          const MacchiatoParams<ScalarT>& params,
                                                          bool want_trace = false) {
  params.validate();
  const Index B = x.batch(), T = x.len(), D = x.width();
  if (D != params.width() || y.width() != D || y.batch() != B || y.len() != T)
    throw std::invalid_argument("feature sequence must match the input shape");
  const Index Dv = params.value_dim(), H = params.heads();
  const Index L = params.latent_dim(), Lh = params.head_latents(), Mh = params.head_values();

  AttentionParams<ScalarT> swa_eff = params.swa;
  if (params.share_values) swa_eff.w_v = params.latte.w_v;
  auto swa_res = sliding_window_attention(x, swa_eff, params.window, params.use_rope_in_swa);
  Tensor<ScalarT> gate = mixture_gate(y, params);

  MacchiatoResult<ScalarT> result{SequenceBatch<ScalarT>(Tensor<ScalarT>::zeros({B, T, Dv})),
                                  {}};
  if (want_trace)
    result.trace = AttentionMatrix<ScalarT>{Tensor<ScalarT>::zeros({B, H, T, T})};

  for (Index b = 0; b < B; ++b) {
    MatrixX<ScalarT> ql, kl;
    if (L > 0) {
      ql.noalias() = y.item(b) * params.latte.w_q.matrix(D, L);
      kl.noalias() = y.item(b) * params.latte.w_k.matrix(D, L);
    }
    MatrixX<ScalarT> v = x.item(b) * params.latte.w_v.matrix(D, Dv);

    for (Index h = 0; h < H; ++h) {
      detail::RowX<ScalarT> alpha = detail::RowX<ScalarT>::Zero(std::max<Index>(Lh, 1));
      MatrixX<ScalarT> vtilde = MatrixX<ScalarT>::Zero(std::max<Index>(Lh, 1), Mh);
      detail::RowX<ScalarT> rmax(std::max<Index>(Lh, 1));
      detail::RowX<ScalarT> out_row(Mh);
      for (Index t = 0; t < T; ++t) {
        const ScalarT g0 = gate(b, h, t, 0);
        for (Index j = 0; j < Mh; ++j)
          out_row(j) = g0 * swa_res.out.values(b, t, h * Mh + j);
        if (L > 0)
          detail::latte_update_head(alpha.data(), vtilde.data(), rmax.data(),
                                    kl.row(t).data() + h * Lh, &gate(b, h, t, 1),
                                    v.row(t).data() + h * Mh, out_row.data(), Lh, Mh, t == 0);
        for (Index j = 0; j < Mh; ++j) result.out.values(b, t, h * Mh + j) = out_row(j);
      }

      if (want_trace) {
        auto& probs = result.trace->probs;
        for (Index t = 0; t < T; ++t) {
          const ScalarT g0 = gate(b, h, t, 0);
          for (Index s = std::max<Index>(0, t - params.window); s <= t; ++s)
            probs(b, h, t, s) += g0 * swa_res.weights.probs(b, h, t, s);
        }
        if (L > 0) {
          // Quadratic latent branch with a per-latent global shift.
          for (Index l = 0; l < Lh; ++l) {
            ScalarT m = kl(0, h * Lh + l);
            for (Index t = 1; t < T; ++t) m = std::max(m, kl(t, h * Lh + l));
            ScalarT acum = 0;
            std::vector<ScalarT> ek(static_cast<size_t>(T));
            std::vector<ScalarT> cum(static_cast<size_t>(T));
            for (Index t = 0; t < T; ++t) {
              ek[static_cast<size_t>(t)] = std::exp(kl(t, h * Lh + l) - m);
              acum += ek[static_cast<size_t>(t)];
              cum[static_cast<size_t>(t)] = acum;
            }
            for (Index t = 0; t < T; ++t)
              for (Index s = 0; s <= t; ++s)
                probs(b, h, t, s) += gate(b, h, t, l + 1) * ek[static_cast<size_t>(s)] /
                                     cum[static_cast<size_t>(t)];
          }
        }
      }
    }
  }
  return result;
}

template <typename ScalarT>
MacchiatoResult<ScalarT> macchiato_forward(const SequenceBatch<ScalarT>& x,
                                           const MacchiatoParams<ScalarT>& params,
                                           bool want_trace = false) {
  params.validate();
  SequenceBatch<ScalarT> y = compute_features(x, params);
  return macchiato_forward_given_features(x, y, params, want_trace);
}

}  // namespace latte
