#pragma once

// Foundational reductions: max-shifted softmax, running maxima, the shifted
// exponential cumulative sums every streaming path builds on, and the
// central-difference gradient oracle. All loops accumulate strictly
// left-to-right in a single pass, so outputs are bit-reproducible and the
// streaming variants can match the batch variants exactly.

#include "latte/tensor.hpp"

#include <functional>
#include <limits>
#include <optional>

namespace latte {

namespace detail {

inline void check_axis(int rank, Axis axis) {
  if (axis.index < 0 || axis.index >= rank) throw std::invalid_argument("axis out of range");
}

// Decompose an N-d tensor around `axis` into (outer, n, inner) so that
// element (o, i, j) lives at flat index (o * n + i) * inner + j.
template <typename S>
void axis_split(const Tensor<S>& x, Axis axis, Index& outer, Index& n, Index& inner) {
  check_axis(x.rank(), axis);
  outer = 1;
  for (int d = 0; d < axis.index; ++d) outer *= x.extent(d);
  n = x.extent(axis.index);
  inner = 1;
  for (int d = axis.index + 1; d < x.rank(); ++d) inner *= x.extent(d);
}

}  // namespace detail

/// Max-shifted softmax along `axis`; rows sum to 1 for any finite input,
/// including entries of magnitude 1e4 and beyond.
template <typename S>
Tensor<S> softmax(const Tensor<S>& logits, Axis axis) {
  Index outer, n, inner;
  detail::axis_split(logits, axis, outer, n, inner);
  if (n == 0) throw std::invalid_argument("degenerate distribution");
  Tensor<S> out(logits.shape());
  for (Index o = 0; o < outer; ++o) {
    for (Index j = 0; j < inner; ++j) {
      const Index base = o * n * inner + j;
      S m = logits[base];
      for (Index i = 1; i < n; ++i) m = std::max(m, logits[base + i * inner]);
      S z = 0;
      for (Index i = 0; i < n; ++i) {
        S e = std::exp(logits[base + i * inner] - m);
        out[base + i * inner] = e;
        z += e;
      }
      for (Index i = 0; i < n; ++i) out[base + i * inner] /= z;
    }
  }
  return out;
}

/// out[t] = max(x[0..=t]) elementwise over the non-time axes.
template <typename S>
Tensor<S> cumulative_max(const Tensor<S>& x, Axis time_axis) {
  Index outer, n, inner;
  detail::axis_split(x, time_axis, outer, n, inner);
  Tensor<S> out(x.shape());
  for (Index o = 0; o < outer; ++o) {
    for (Index j = 0; j < inner; ++j) {
      const Index base = o * n * inner + j;
      S m = -std::numeric_limits<S>::infinity();
      for (Index i = 0; i < n; ++i) {
        m = std::max(m, x[base + i * inner]);
        out[base + i * inner] = m;
      }
    }
  }
  return out;
}

/// Cumulative exponential sums held in running-max-shifted representation.
///
/// norm[t,l]  = sum_{s<=t} exp(logits[s,l] - m[t,l])
/// value[t,l,:] = sum_{s<=t} exp(logits[s,l] - m[t,l]) * weights[s,:]
/// with m[t,l] the running max of logits along t. The unshifted sums are
/// these times exp(m[t,l]); consumers should divide shifted quantities
/// against each other so that factor cancels instead of materialising it.
template <typename S>
struct ShiftedCumsum {
  Tensor<S> norm;         // T x L
  Tensor<S> value;        // T x L x M, empty when no weights given
  Tensor<S> running_max;  // T x L
};

template <typename S>
ShiftedCumsum<S> shifted_exp_cumsum(const Tensor<S>& logits,
                                    const Tensor<S>* weights = nullptr) {
  if (logits.rank() != 2) throw std::invalid_argument("shifted_exp_cumsum: logits must be T x L");
  const Index T = logits.extent(0), L = logits.extent(1);
  Index M = 0;
  if (weights) {
    if (weights->rank() != 2 || weights->extent(0) != T)
      throw std::invalid_argument("shifted_exp_cumsum: weights must be T x M");
    M = weights->extent(1);
  }

  ShiftedCumsum<S> r;
  r.norm = Tensor<S>({T, L});
  r.running_max = Tensor<S>({T, L});
  if (weights) r.value = Tensor<S>({T, L, M});

  std::vector<S> norm_acc(static_cast<size_t>(L), S(0));
  std::vector<S> prev_max(static_cast<size_t>(L));
  std::vector<S> val_acc(static_cast<size_t>(L * M), S(0));

  for (Index t = 0; t < T; ++t) {
    for (Index l = 0; l < L; ++l) {
      const S x = logits(t, l);
      const S m = (t == 0) ? x : std::max(prev_max[static_cast<size_t>(l)], x);
      // rescale the carried sums into the new max's frame, then add the new term
      const S revert = (t == 0) ? S(1) : std::exp(prev_max[static_cast<size_t>(l)] - m);
      const S add = std::exp(x - m);
      norm_acc[static_cast<size_t>(l)] = norm_acc[static_cast<size_t>(l)] * revert + add;
      r.norm(t, l) = norm_acc[static_cast<size_t>(l)];
      r.running_max(t, l) = m;
      prev_max[static_cast<size_t>(l)] = m;
      if (weights) {
        for (Index j = 0; j < M; ++j) {
          S& a = val_acc[static_cast<size_t>(l * M + j)];
          a = a * revert + add * (*weights)(t, j);
          r.value(t, l, j) = a;
        }
      }
    }
  }
  return r;
}

/// Central-difference gradient of a scalar-valued f at x.
template <typename S>
Tensor<S> finite_difference_gradient(const std::function<S(const Tensor<S>&)>& f,
                                     const Tensor<S>& x, S eps) {
  if (!(eps > S(0))) throw std::invalid_argument("finite_difference_gradient: eps must be positive");
  Tensor<S> g(x.shape());
  Tensor<S> probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    const S xi = x[i];
    probe[i] = xi + eps;
    const S fp = f(probe);
    probe[i] = xi - eps;
    const S fm = f(probe);
    probe[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("finite_difference_gradient: non-finite function value");
    g[i] = (fp - fm) / (S(2) * eps);
  }
  return g;
}

}  // namespace latte
