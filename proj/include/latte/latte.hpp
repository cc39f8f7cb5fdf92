#pragma once

// Directed latent-variable attention: bidirectional form, causal brute-force
// oracle, max-shifted causal scan, and the streaming per-token recurrence.

#include "latte/attention.hpp"
#include "latte/numerics.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>

namespace latte {

template <typename ScalarT>
struct LatteParams {
  Tensor<ScalarT> w_q;  // D x L, columns are query potentials
  Tensor<ScalarT> w_k;  // D x L
  Tensor<ScalarT> w_v;  // D x Dv
  int heads = 1;

  Index width() const { return w_q.extent(0); }
  Index latent_dim() const { return w_q.extent(1); }
  Index value_dim() const { return w_v.extent(1); }
  Index head_latents() const { return latent_dim() / heads; }
  Index head_values() const { return value_dim() / heads; }

  void validate() const {
    if (w_q.rank() != 2 || w_k.rank() != 2 || w_v.rank() != 2)
      throw std::invalid_argument("latte projections must be matrices");
    if (!w_q.same_shape(w_k)) throw std::invalid_argument("w_q and w_k shapes must match");
    if (w_v.extent(0) != w_q.extent(0))
      throw std::invalid_argument("w_v input width must match w_q");
    if (heads < 1) throw std::invalid_argument("heads must be positive");
    if (latent_dim() % heads != 0) throw std::invalid_argument("heads must divide L");
    if (value_dim() % heads != 0) throw std::invalid_argument("heads must divide Dv");
    if (!w_q.all_finite() || !w_k.all_finite() || !w_v.all_finite())
      throw std::invalid_argument("latte projections must be finite");
  }
};

// Carried recurrence state in the max-shifted representation. The stored
// alpha and vtilde are the true sums times exp(-running_max).
template <typename ScalarT>
struct LatteState {
  Tensor<ScalarT> alpha_shifted;   // B x H x Lh
  Tensor<ScalarT> vtilde_shifted;  // B x H x Lh x Mh
  Tensor<ScalarT> running_max;     // B x H x Lh
  Index t = 0;

  LatteState(Index batch, const LatteParams<ScalarT>& params)
      : alpha_shifted(Tensor<ScalarT>::zeros({batch, params.heads, params.head_latents()})),
        vtilde_shifted(Tensor<ScalarT>::zeros(
            {batch, params.heads, params.head_latents(), params.head_values()})),
        running_max(Tensor<ScalarT>::zeros({batch, params.heads, params.head_latents()})) {}

  Index batch() const { return alpha_shifted.extent(0); }
};

template <typename ScalarT>
struct LatteTrace {
  Tensor<ScalarT> psi_q;   // B x H x T x Lh
  Tensor<ScalarT> psi_k;   // B x H x T x Lh
  Tensor<ScalarT> beta;    // B x H x T
  Tensor<ScalarT> alpha;   // B x H x T x Lh
  Tensor<ScalarT> gamma;   // B x H x T x Lh
  Tensor<ScalarT> vtilde;  // B x H x T x Lh x Mh
  AttentionMatrix<ScalarT> probs;
};

template <typename ScalarT>
struct LatteResult {
  SequenceBatch<ScalarT> out;
  std::optional<LatteTrace<ScalarT>> trace;
};

namespace detail {

template <typename ScalarT>
using RowX = Eigen::Matrix<ScalarT, 1, Eigen::Dynamic>;

template <typename ScalarT>
using ConstRowMap = Eigen::Map<const Eigen::Matrix<ScalarT, 1, Eigen::Dynamic>>;

template <typename ScalarT>
void check_latte_input(const SequenceBatch<ScalarT>& x, const LatteParams<ScalarT>& params) {
  params.validate();
  if (x.width() != params.width())
    throw std::invalid_argument("input width must match latte projections");
}

// Normalized query weights for one head slice; max-shifted softmax.
template <typename ScalarT>
void head_softmax(const ScalarT* logits, Index n, ScalarT* p) {
  ScalarT m = logits[0];
  for (Index l = 1; l < n; ++l) m = std::max(m, logits[l]);
  ScalarT sum = 0;
  for (Index l = 0; l < n; ++l) {
    p[l] = std::exp(logits[l] - m);
    sum += p[l];
  }
  for (Index l = 0; l < n; ++l) p[l] /= sum;
}

// One shifted recurrence update for a single head. Both the scan and the
// streaming step route through this function so their arithmetic is identical.
template <typename ScalarT>
void latte_update_head(ScalarT* alpha, ScalarT* vtilde, ScalarT* rmax, const ScalarT* kl,
                       const ScalarT* p, const ScalarT* v, ScalarT* out, Index Lh, Index Mh,
                       bool first) {
  for (Index l = 0; l < Lh; ++l) {
    const ScalarT prev_m = first ? kl[l] : rmax[l];
    const ScalarT m = std::max(prev_m, kl[l]);
    const ScalarT revert = std::exp(prev_m - m);
    const ScalarT add = std::exp(kl[l] - m);
    alpha[l] = alpha[l] * revert + add;
    ScalarT* vrow = vtilde + l * Mh;
    for (Index j = 0; j < Mh; ++j) vrow[j] = vrow[j] * revert + add * v[j];
    rmax[l] = m;
    const ScalarT coef = p[l] / alpha[l];
    for (Index j = 0; j < Mh; ++j) out[j] += coef * vrow[j];
  }
}

// Processes one token for one batch item against its state slices.
template <typename ScalarT>
void latte_token(const ScalarT* x_row, const LatteParams<ScalarT>& params, ScalarT* alpha_b,
                 ScalarT* vtilde_b, ScalarT* rmax_b, ScalarT* out_row, bool first) {
  const Index D = params.width(), L = params.latent_dim(), Dv = params.value_dim();
  const Index H = params.heads, Lh = params.head_latents(), Mh = params.head_values();
  ConstRowMap<ScalarT> xr(x_row, D);
  RowX<ScalarT> ql = xr * params.w_q.matrix(D, L);
  RowX<ScalarT> kl = xr * params.w_k.matrix(D, L);
  RowX<ScalarT> v = xr * params.w_v.matrix(D, Dv);
  RowX<ScalarT> p(Lh);
  for (Index j = 0; j < Dv; ++j) out_row[j] = 0;
  for (Index h = 0; h < H; ++h) {
    head_softmax(ql.data() + h * Lh, Lh, p.data());
    latte_update_head(alpha_b + h * Lh, vtilde_b + h * Lh * Mh, rmax_b + h * Lh,
                      kl.data() + h * Lh, p.data(), v.data() + h * Mh, out_row + h * Mh, Lh, Mh,
                      first);
  }
}

}  // namespace detail

/// Streaming recurrence: consumes one token per batch item, updates the state
/// in place, returns the outputs for this position. Feeding a sequence token
/// by token from a fresh state reproduces latte_causal_scan bit for bit.
template <typename ScalarT>
Tensor<ScalarT> latte_step(LatteState<ScalarT>& state, const Tensor<ScalarT>& x_t,
                           const LatteParams<ScalarT>& params) {
  params.validate();
  if (x_t.rank() != 2 || x_t.extent(1) != params.width())
    throw std::invalid_argument("latte_step expects a B x D token slab");
  if (x_t.extent(0) != state.batch()) throw std::invalid_argument("state batch mismatch");
  if (state.alpha_shifted.extent(2) != params.head_latents() ||
      state.vtilde_shifted.extent(3) != params.head_values())
    throw std::invalid_argument("state shape does not match params");
  if (!x_t.all_finite()) throw std::invalid_argument("latte_step input must be finite");

  const Index B = x_t.extent(0), D = params.width(), Dv = params.value_dim();
  const Index H = params.heads, Lh = params.head_latents(), Mh = params.head_values();
  const bool first = state.t == 0;
  Tensor<ScalarT> out({B, Dv});
  for (Index b = 0; b < B; ++b) {
    detail::latte_token(x_t.data() + b * D, params, state.alpha_shifted.data() + b * H * Lh,
                        state.vtilde_shifted.data() + b * H * Lh * Mh,
                        state.running_max.data() + b * H * Lh, out.data() + b * Dv, first);
  }
  state.t += 1;
  return out;
}

/// Causal scan (Eqs. 10-12 style recursions with a running-max shift). The
/// unroll parameter only blocks the time loop; results are identical for any
/// value.
template <typename ScalarT>
SequenceBatch<ScalarT> latte_causal_scan(const SequenceBatch<ScalarT>& x,
                                         const LatteParams<ScalarT>& params, Index unroll = 1) {
  detail::check_latte_input(x, params);
  if (unroll < 1) throw std::invalid_argument("unroll must be positive");
  const Index B = x.batch(), T = x.len(), D = x.width(), Dv = params.value_dim();
  const Index H = params.heads, Lh = params.head_latents(), Mh = params.head_values();

  SequenceBatch<ScalarT> out(Tensor<ScalarT>::zeros({B, T, Dv}));
  LatteState<ScalarT> state(B, params);
  for (Index t0 = 0; t0 < T; t0 += unroll) {
    const Index t1 = std::min(T, t0 + unroll);
    for (Index t = t0; t < t1; ++t) {
      const bool first = t == 0;
      for (Index b = 0; b < B; ++b) {
        detail::latte_token(x.values.data() + (b * T + t) * D, params,
                            state.alpha_shifted.data() + b * H * Lh,
                            state.vtilde_shifted.data() + b * H * Lh * Mh,
                            state.running_max.data() + b * H * Lh,
                            out.values.data() + (b * T + t) * Dv, first);
      }
    }
  }
  return out;
}

/// Textbook recursion without the running-max shift: raw exponential sums and
/// the literal beta*alpha normalization product. Overflows quickly; kept as
/// the reference that motivates the shifted scan and for fault injection.
template <typename ScalarT>
SequenceBatch<ScalarT> latte_causal_unshifted(const SequenceBatch<ScalarT>& x,
                                              const LatteParams<ScalarT>& params) {
  detail::check_latte_input(x, params);
  const Index B = x.batch(), T = x.len(), D = x.width(), L = params.latent_dim();
  const Index Dv = params.value_dim(), H = params.heads;
  const Index Lh = params.head_latents(), Mh = params.head_values();

  SequenceBatch<ScalarT> out(Tensor<ScalarT>::zeros({B, T, Dv}));
  for (Index b = 0; b < B; ++b) {
    MatrixX<ScalarT> ql = x.item(b) * params.w_q.matrix(D, L);
    MatrixX<ScalarT> kl = x.item(b) * params.w_k.matrix(D, L);
    MatrixX<ScalarT> v = x.item(b) * params.w_v.matrix(D, Dv);
    MatrixX<ScalarT> alpha = MatrixX<ScalarT>::Zero(1, L);
    MatrixX<ScalarT> vtilde = MatrixX<ScalarT>::Zero(L, Mh);
    for (Index t = 0; t < T; ++t) {
      for (Index l = 0; l < L; ++l) {
        const ScalarT ek = std::exp(kl(t, l));
        alpha(0, l) += ek;
        vtilde.row(l) += ek * v.row(t).segment((l / Lh) * Mh, Mh);
      }
      for (Index h = 0; h < H; ++h) {
        ScalarT beta = 0;
        for (Index l = 0; l < Lh; ++l) beta += std::exp(ql(t, h * Lh + l));
        for (Index l = 0; l < Lh; ++l) {
          const Index g = h * Lh + l;
          out.item(b).row(t).segment(h * Mh, Mh) +=
              (std::exp(ql(t, g)) * vtilde.row(g)) / (beta * alpha(0, g));
        }
      }
    }
  }
  return out;
}

/// Quadratic oracle per the causal weights definition; computed in 64-bit
/// internally and materializing the full trace. Guarded to modest T.
template <typename ScalarT>
LatteResult<ScalarT> latte_causal_bruteforce(const SequenceBatch<ScalarT>& x,
                                             const LatteParams<ScalarT>& params) {
  detail::check_latte_input(x, params);
  const Index B = x.batch(), T = x.len(), D = x.width(), L = params.latent_dim();
  const Index Dv = params.value_dim(), H = params.heads;
  const Index Lh = params.head_latents(), Mh = params.head_values();
  if (T > 4096) throw std::invalid_argument("brute-force oracle is limited to T <= 4096");

  Tensor<double> xd = x.values.template cast<double>();
  MatrixX<double> wq = params.w_q.template cast<double>().matrix(D, L);
  MatrixX<double> wk = params.w_k.template cast<double>().matrix(D, L);
  MatrixX<double> wv = params.w_v.template cast<double>().matrix(D, Dv);

  LatteTrace<double> tr{Tensor<double>({B, H, T, Lh}),
                        Tensor<double>({B, H, T, Lh}),
                        Tensor<double>({B, H, T}),
                        Tensor<double>({B, H, T, Lh}),
                        Tensor<double>({B, H, T, Lh}),
                        Tensor<double>::zeros({B, H, T, Lh, Mh}),
                        AttentionMatrix<double>{Tensor<double>::zeros({B, H, T, T})}};
  Tensor<double> out_d = Tensor<double>::zeros({B, T, Dv});

  for (Index b = 0; b < B; ++b) {
    ConstMatMap<double> xb(xd.data() + b * T * D, T, D);
    MatrixX<double> ql = xb * wq;
    MatrixX<double> kl = xb * wk;
    MatrixX<double> v = xb * wv;
    for (Index h = 0; h < H; ++h) {
      for (Index t = 0; t < T; ++t) {
        double beta = 0;
        for (Index l = 0; l < Lh; ++l) {
          const double pq = std::exp(ql(t, h * Lh + l));
          tr.psi_q(b, h, t, l) = pq;
          beta += pq;
          const double pk = std::exp(kl(t, h * Lh + l));
          tr.psi_k(b, h, t, l) = pk;
          tr.alpha(b, h, t, l) = (t == 0 ? 0.0 : tr.alpha(b, h, t - 1, l)) + pk;
          for (Index j = 0; j < Mh; ++j)
            tr.vtilde(b, h, t, l, j) = (t == 0 ? 0.0 : tr.vtilde(b, h, t - 1, l, j)) +
                                       pk * v(t, h * Mh + j);
        }
        tr.beta(b, h, t) = beta;
        if (!std::isfinite(beta))
          throw std::domain_error("brute-force oracle: unshifted exponentials overflowed");
        for (Index l = 0; l < Lh; ++l)
          tr.gamma(b, h, t, l) = tr.psi_q(b, h, t, l) / (beta * tr.alpha(b, h, t, l));
        for (Index s = 0; s <= t; ++s) {
          double a_ts = 0;
          for (Index l = 0; l < Lh; ++l)
            a_ts += (tr.psi_k(b, h, s, l) / tr.alpha(b, h, t, l)) *
                    (tr.psi_q(b, h, t, l) / beta);
          tr.probs.probs(b, h, t, s) = a_ts;
          for (Index j = 0; j < Mh; ++j) out_d(b, t, h * Mh + j) += a_ts * v(s, h * Mh + j);
        }
      }
    }
  }
  if (!tr.probs.probs.all_finite())
    throw std::domain_error("brute-force oracle: unshifted exponentials overflowed");

  LatteResult<ScalarT> result{SequenceBatch<ScalarT>(out_d.template cast<ScalarT>()),
                              LatteTrace<ScalarT>{tr.psi_q.template cast<ScalarT>(),
                                                  tr.psi_k.template cast<ScalarT>(),
                                                  tr.beta.template cast<ScalarT>(),
                                                  tr.alpha.template cast<ScalarT>(),
                                                  tr.gamma.template cast<ScalarT>(),
                                                  tr.vtilde.template cast<ScalarT>(),
                                                  AttentionMatrix<ScalarT>{
                                                      tr.probs.probs.template cast<ScalarT>()}}};
  return result;
}

/// Bidirectional form: p(s|l) sums over the whole sequence, so the output is
/// two T x L contractions and never materializes a T x T matrix unless the
/// trace is requested.
template <typename ScalarT>
LatteResult<ScalarT> latte_bidirectional(const SequenceBatch<ScalarT>& x,
                                         const LatteParams<ScalarT>& params,
                                         bool want_trace = false) {
  detail::check_latte_input(x, params);
  const Index B = x.batch(), T = x.len(), D = x.width(), L = params.latent_dim();
  const Index Dv = params.value_dim(), H = params.heads;
  const Index Lh = params.head_latents(), Mh = params.head_values();

  LatteResult<ScalarT> result{SequenceBatch<ScalarT>(Tensor<ScalarT>::zeros({B, T, Dv})), {}};
  if (want_trace)
    result.trace = LatteTrace<ScalarT>{Tensor<ScalarT>({B, H, T, Lh}),
                                       Tensor<ScalarT>({B, H, T, Lh}),
                                       Tensor<ScalarT>({B, H, T}),
                                       Tensor<ScalarT>({B, H, T, Lh}),
                                       Tensor<ScalarT>({B, H, T, Lh}),
                                       Tensor<ScalarT>({B, H, T, Lh, Mh}),
                                       AttentionMatrix<ScalarT>{
                                           Tensor<ScalarT>::zeros({B, H, T, T})}};

  for (Index b = 0; b < B; ++b) {
    MatrixX<ScalarT> ql = x.item(b) * params.w_q.matrix(D, L);
    MatrixX<ScalarT> kl = x.item(b) * params.w_k.matrix(D, L);
    MatrixX<ScalarT> v = x.item(b) * params.w_v.matrix(D, Dv);

    // Key side: per-latent max shift, full-sequence sums.
    MatrixX<ScalarT> psi_k(T, L);
    detail::RowX<ScalarT> alpha(L), k_max(L);
    for (Index l = 0; l < L; ++l) k_max(l) = kl.col(l).maxCoeff();
    for (Index l = 0; l < L; ++l) {
      ScalarT sum = 0;
      for (Index t = 0; t < T; ++t) {
        psi_k(t, l) = std::exp(kl(t, l) - k_max(l));
        sum += psi_k(t, l);
      }
      alpha(l) = sum;
    }
    MatrixX<ScalarT> kv = MatrixX<ScalarT>::Zero(L, Mh);  // rows: E[v | l]
    for (Index l = 0; l < L; ++l) {
      for (Index t = 0; t < T; ++t)
        kv.row(l) += (psi_k(t, l) / alpha(l)) * v.row(t).segment((l / Lh) * Mh, Mh);
    }

    // Query side: per-head softmax, then contract.
    MatrixX<ScalarT> psi_q(T, L);
    detail::RowX<ScalarT> beta(T * H);
    for (Index t = 0; t < T; ++t)
      for (Index h = 0; h < H; ++h) {
        const ScalarT m = ql.row(t).segment(h * Lh, Lh).maxCoeff();
        ScalarT sum = 0;
        for (Index l = 0; l < Lh; ++l) {
          psi_q(t, h * Lh + l) = std::exp(ql(t, h * Lh + l) - m);
          sum += psi_q(t, h * Lh + l);
        }
        beta(t * H + h) = sum;
        for (Index l = 0; l < Lh; ++l)
          result.out.item(b).row(t).segment(h * Mh, Mh) +=
              (psi_q(t, h * Lh + l) / sum) * kv.row(h * Lh + l);
      }

    if (want_trace) {
      auto& tr = *result.trace;
      for (Index h = 0; h < H; ++h)
        for (Index t = 0; t < T; ++t) {
          tr.beta(b, h, t) = beta(t * H + h);
          for (Index l = 0; l < Lh; ++l) {
            tr.psi_q(b, h, t, l) = psi_q(t, h * Lh + l);
            tr.psi_k(b, h, t, l) = psi_k(t, h * Lh + l);
            tr.alpha(b, h, t, l) = alpha(h * Lh + l);
            tr.gamma(b, h, t, l) =
                psi_q(t, h * Lh + l) / (beta(t * H + h) * alpha(h * Lh + l));
            for (Index j = 0; j < Mh; ++j) tr.vtilde(b, h, t, l, j) = kv(h * Lh + l, j);
          }
          for (Index s = 0; s < T; ++s) {
            ScalarT a_ts = 0;
            for (Index l = 0; l < Lh; ++l)
              a_ts += (psi_q(t, h * Lh + l) / beta(t * H + h)) *
                      (psi_k(s, h * Lh + l) / alpha(h * Lh + l));
            tr.probs.probs(b, h, t, s) = a_ts;
          }
        }
    }
  }
  return result;
}

/// Per-head latent posterior p(l|t) and the usage-entropy collapse diagnostic
/// H(mean_t p(l|t)) per batch item and head.
template <typename ScalarT>
struct LatentPosterior {
  Tensor<ScalarT> probs;    // B x H x T x Lh
  Tensor<ScalarT> entropy;  // B x H
};

template <typename ScalarT>
LatentPosterior<ScalarT> latent_posterior(const SequenceBatch<ScalarT>& x,
                                          const LatteParams<ScalarT>& params) {
  detail::check_latte_input(x, params);
  const Index B = x.batch(), T = x.len(), D = x.width(), L = params.latent_dim();
  const Index H = params.heads, Lh = params.head_latents();

  LatentPosterior<ScalarT> result{Tensor<ScalarT>({B, H, T, Lh}),
                                  Tensor<ScalarT>::zeros({B, H})};
  for (Index b = 0; b < B; ++b) {
    MatrixX<ScalarT> ql = x.item(b) * params.w_q.matrix(D, L);
    detail::RowX<ScalarT> p(Lh);
    for (Index h = 0; h < H; ++h) {
      std::vector<double> usage(static_cast<size_t>(Lh), 0.0);
      for (Index t = 0; t < T; ++t) {
        detail::head_softmax(ql.row(t).data() + h * Lh, Lh, p.data());
        for (Index l = 0; l < Lh; ++l) {
          result.probs(b, h, t, l) = p(l);
          usage[static_cast<size_t>(l)] += static_cast<double>(p(l));
        }
      }
      double entropy = 0;
      for (Index l = 0; l < Lh; ++l) {
        const double u = usage[static_cast<size_t>(l)] / static_cast<double>(T);
        if (u > 0) entropy -= u * std::log(u);
      }
      result.entropy(b, h) = static_cast<ScalarT>(entropy);
    }
  }
  return result;
}

}  // namespace latte
