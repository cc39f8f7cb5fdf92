#pragma once

// Vanilla linear attention in quadratic-reference and recurrent forms, plus the
// undirected latent-variable parameterisation that reproduces its weights.

#include "latte/attention.hpp"
#include "latte/numerics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <type_traits>

namespace latte {

// phi(x) = exp(P^T x) elementwise; strictly positive by construction.
template <typename ScalarT>
struct FeatureMap {
  Tensor<ScalarT> projection;  // in_dim x latent_dim

  Index in_dim() const { return projection.extent(0); }
  Index latent_dim() const { return projection.extent(1); }

  void validate() const {
    if (projection.rank() != 2)
      throw std::invalid_argument("feature map projection must be a matrix");
    if (!projection.all_finite())
      throw std::invalid_argument("feature map projection must be finite");
  }
};

// Applies the feature map over the trailing axis. With shift_rows set, the
// rowwise logit max is subtracted before exponentiation; inside normalized
// attention ratios a per-query shift cancels exactly.
template <typename ScalarT>
Tensor<ScalarT> feature_map_apply(const Tensor<ScalarT>& x, const FeatureMap<ScalarT>& fm,
                                  bool shift_rows = false) {
  fm.validate();
  if (x.rank() < 1 || x.extent(x.rank() - 1) != fm.in_dim())
    throw std::invalid_argument("feature map input width mismatch");
  if (!x.all_finite()) throw std::invalid_argument("feature map input must be finite");

  const Index rows = x.size() / fm.in_dim();
  const Index L = fm.latent_dim();
  Shape out_shape = x.shape();
  out_shape.back() = L;
  Tensor<ScalarT> out(out_shape);

  auto xm = x.matrix(rows, fm.in_dim());
  auto om = out.matrix(rows, L);
  om.noalias() = xm * fm.projection.matrix(fm.in_dim(), L);
  for (Index r = 0; r < rows; ++r) {
    const ScalarT shift = shift_rows ? om.row(r).maxCoeff() : ScalarT(0);
    for (Index l = 0; l < L; ++l) om(r, l) = std::exp(om(r, l) - shift);
  }
  return out;
}

namespace detail {

template <typename ScalarT>
void require_headless(const AttentionParams<ScalarT>& params, const FeatureMap<ScalarT>& fm) {
  params.validate();
  fm.validate();
  if (params.heads != 1)
    throw std::invalid_argument("linear attention operates on the full feature space; use heads == 1");
  if (fm.in_dim() != params.proj_dim())
    throw std::invalid_argument("feature map input width must match the projection width");
}

// Unstabilized exponentials overflow quickly; the envelope keeps products of
// two potentials plus a length-T accumulation inside the scalar's range.
template <typename ScalarT>
constexpr ScalarT unshifted_logit_envelope() {
  return std::is_same_v<ScalarT, float> ? ScalarT(30) : ScalarT(700);
}

template <typename ScalarT>
void check_unshifted_envelope(const MatrixX<ScalarT>& q_logits, const MatrixX<ScalarT>& k_logits) {
  const ScalarT bound = unshifted_logit_envelope<ScalarT>();
  const ScalarT worst =
      std::max(q_logits.cwiseAbs().maxCoeff(), k_logits.cwiseAbs().maxCoeff());
  if (!(worst <= bound))
    throw std::domain_error(
        "unstabilized linear attention: logit magnitude exceeds the overflow envelope; "
        "use the max-shifted latte scan instead");
}

}  // namespace detail

// Quadratic reference of Eq.-4-style linear attention; returns the implied
// attention matrix explicitly for inspection.
template <typename ScalarT>
AttentionResult<ScalarT> linear_attention_direct(const SequenceBatch<ScalarT>& x,
                                                 const AttentionParams<ScalarT>& params,
                                                 const FeatureMap<ScalarT>& fm) {
  detail::require_headless(params, fm);
  const Index B = x.batch(), T = x.len(), D = x.width(), Dp = params.proj_dim();
  const Index L = fm.latent_dim();
  if (D != params.w_q.extent(0)) throw std::invalid_argument("input width mismatch");

  AttentionResult<ScalarT> result{SequenceBatch<ScalarT>(Tensor<ScalarT>::zeros({B, T, Dp})),
                                  AttentionMatrix<ScalarT>{Tensor<ScalarT>::zeros({B, 1, T, T})}};
  for (Index b = 0; b < B; ++b) {
    MatrixX<ScalarT> q = x.item(b) * params.w_q.matrix(D, Dp);
    MatrixX<ScalarT> k = x.item(b) * params.w_k.matrix(D, Dp);
    MatrixX<ScalarT> v = x.item(b) * params.w_v.matrix(D, Dp);

    MatrixX<ScalarT> phi_q(T, L), phi_k(T, L);
    phi_q.noalias() = q * fm.projection.matrix(Dp, L);
    phi_k.noalias() = k * fm.projection.matrix(Dp, L);
    // Per-query row shift and one global key shift both cancel in the ratio.
    const ScalarT k_shift = phi_k.maxCoeff();
    for (Index t = 0; t < T; ++t) {
      const ScalarT q_shift = phi_q.row(t).maxCoeff();
      for (Index l = 0; l < L; ++l) {
        phi_q(t, l) = std::exp(phi_q(t, l) - q_shift);
        phi_k(t, l) = std::exp(phi_k(t, l) - k_shift);
      }
    }

    MatrixX<ScalarT> scores(T, T);
    scores.noalias() = phi_q * phi_k.transpose();
    auto weights = result.weights.probs.data() + b * T * T;
    auto out = result.out.item(b);
    for (Index t = 0; t < T; ++t) {
      ScalarT denom = 0;
      for (Index s = 0; s <= t; ++s) denom += scores(t, s);
      if (!(denom > ScalarT(0))) throw std::runtime_error("degenerate normalization");
      for (Index s = 0; s <= t; ++s) {
        const ScalarT w = scores(t, s) / denom;
        weights[t * T + s] = w;
        out.row(t) += w * v.row(s);
      }
    }
  }
  return result;
}

template <typename ScalarT>
struct LinearAttnState {
  Tensor<ScalarT> acc;  // value_dim x latent_dim, carries S_t
  Tensor<ScalarT> z;    // latent_dim
  Index t = 0;

  LinearAttnState(Index value_dim, Index latent_dim)
      : acc(Tensor<ScalarT>::zeros({value_dim, latent_dim})),
        z(Tensor<ScalarT>::zeros({latent_dim})) {}
};

// One faithful-unstabilized recurrence step: S += v phi(k)^T, z += phi(k),
// out = S phi(q) / (phi(q)^T z).
template <typename ScalarT>
VectorX<ScalarT> linear_attention_step(LinearAttnState<ScalarT>& state,
                                       const VectorX<ScalarT>& x_t,
                                       const AttentionParams<ScalarT>& params,
                                       const FeatureMap<ScalarT>& fm) {
  detail::require_headless(params, fm);
  const Index D = params.w_q.extent(0), Dp = params.proj_dim(), L = fm.latent_dim();
  if (x_t.size() != D) throw std::invalid_argument("token width mismatch");
  if (state.acc.extent(0) != Dp || state.acc.extent(1) != L)
    throw std::invalid_argument("state shape mismatch");

  VectorX<ScalarT> q = params.w_q.matrix(D, Dp).transpose() * x_t;
  VectorX<ScalarT> k = params.w_k.matrix(D, Dp).transpose() * x_t;
  VectorX<ScalarT> v = params.w_v.matrix(D, Dp).transpose() * x_t;
  MatrixX<ScalarT> q_logits = (fm.projection.matrix(Dp, L).transpose() * q).transpose();
  MatrixX<ScalarT> k_logits = (fm.projection.matrix(Dp, L).transpose() * k).transpose();
  detail::check_unshifted_envelope<ScalarT>(q_logits, k_logits);

  VectorX<ScalarT> phi_q = q_logits.row(0).transpose().array().exp().matrix();
  VectorX<ScalarT> phi_k = k_logits.row(0).transpose().array().exp().matrix();

  auto acc = state.acc.matrix(Dp, L);
  auto z = state.z.vector();
  acc.noalias() += v * phi_k.transpose();
  z += phi_k;
  state.t += 1;

  const ScalarT denom = phi_q.dot(z);
  if (!(denom > ScalarT(0))) throw std::runtime_error("degenerate normalization");
  return (acc * phi_q) / denom;
}

template <typename ScalarT>
SequenceBatch<ScalarT> linear_attention_recurrent(const SequenceBatch<ScalarT>& x,
                                                  const AttentionParams<ScalarT>& params,
                                                  const FeatureMap<ScalarT>& fm) {
  detail::require_headless(params, fm);
  const Index B = x.batch(), T = x.len(), D = x.width(), Dp = params.proj_dim();
  const Index L = fm.latent_dim();
  if (D != params.w_q.extent(0)) throw std::invalid_argument("input width mismatch");

  // Validate the whole sequence against the overflow envelope up front.
  for (Index b = 0; b < B; ++b) {
    MatrixX<ScalarT> ql(T, L), kl(T, L);
    ql.noalias() = x.item(b) * params.w_q.matrix(D, Dp) * fm.projection.matrix(Dp, L);
    kl.noalias() = x.item(b) * params.w_k.matrix(D, Dp) * fm.projection.matrix(Dp, L);
    detail::check_unshifted_envelope<ScalarT>(ql, kl);
  }

  SequenceBatch<ScalarT> out(Tensor<ScalarT>::zeros({B, T, Dp}));
  for (Index b = 0; b < B; ++b) {
    LinearAttnState<ScalarT> state(Dp, L);
    for (Index t = 0; t < T; ++t) {
      VectorX<ScalarT> x_t = x.item(b).row(t).transpose();
      out.item(b).row(t) = linear_attention_step(state, x_t, params, fm).transpose();
    }
  }
  return out;
}

// Undirected latent-variable weights: joint potentials psi(s,l) psi(l,t) with a
// single normalization over both the latent and the admissible positions. The
// summation order differs from the direct form; the values agree.
template <typename ScalarT>
AttentionMatrix<ScalarT> undirected_attention_probs(const SequenceBatch<ScalarT>& x,
                                                    const AttentionParams<ScalarT>& params,
                                                    const FeatureMap<ScalarT>& fm) {
  detail::require_headless(params, fm);
  const Index B = x.batch(), T = x.len(), D = x.width(), Dp = params.proj_dim();
  const Index L = fm.latent_dim();
  if (D != params.w_q.extent(0)) throw std::invalid_argument("input width mismatch");

  AttentionMatrix<ScalarT> weights{Tensor<ScalarT>::zeros({B, 1, T, T})};
  for (Index b = 0; b < B; ++b) {
    MatrixX<ScalarT> phi_q(T, L), phi_k(T, L);
    phi_q.noalias() = x.item(b) * params.w_q.matrix(D, Dp) * fm.projection.matrix(Dp, L);
    phi_k.noalias() = x.item(b) * params.w_k.matrix(D, Dp) * fm.projection.matrix(Dp, L);
    const ScalarT k_shift = phi_k.maxCoeff();
    for (Index t = 0; t < T; ++t) {
      const ScalarT q_shift = phi_q.row(t).maxCoeff();
      for (Index l = 0; l < L; ++l) {
        phi_q(t, l) = std::exp(phi_q(t, l) - q_shift);
        phi_k(t, l) = std::exp(phi_k(t, l) - k_shift);
      }
    }

    VectorX<ScalarT> alpha = VectorX<ScalarT>::Zero(L);  // running sum of psi(s,l) over s <= t
    for (Index t = 0; t < T; ++t) {
      alpha += phi_k.row(t).transpose();
      ScalarT denom = 0;
      for (Index l = 0; l < L; ++l) denom += phi_q(t, l) * alpha(l);
      if (!(denom > ScalarT(0))) throw std::runtime_error("degenerate normalization");
      for (Index s = 0; s <= t; ++s) {
        ScalarT num = 0;
        for (Index l = 0; l < L; ++l) num += phi_k(s, l) * phi_q(t, l);
        weights.probs(b, 0, t, s) = num / denom;
      }
    }
  }
  return weights;
}

}  // namespace latte
