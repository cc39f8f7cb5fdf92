#pragma once

// Reference softmax attention over full causal/bidirectional masks, sliding
// window attention with optional rotary encoding, and the rotary transform
// itself. Quadratic-memory weights are returned explicitly so downstream
// mechanisms can be checked row by row.

#include "latte/numerics.hpp"
#include "latte/tensor.hpp"

#include <cmath>

namespace latte {

template <typename S>
struct SequenceBatch {
  Tensor<S> values;  // B x T x D

  SequenceBatch() = default;
  explicit SequenceBatch(Tensor<S> v) : values(std::move(v)) {
    if (values.rank() != 3) throw std::invalid_argument("SequenceBatch: values must be B x T x D");
    if (values.extent(1) < 1) throw std::invalid_argument("SequenceBatch: empty sequence");
    if (!values.all_finite()) throw std::invalid_argument("SequenceBatch: non-finite values");
  }

  Index batch() const { return values.extent(0); }
  Index len() const { return values.extent(1); }
  Index width() const { return values.extent(2); }

  /// T x D view of batch item b.
  ConstMatMap<S> item(Index b) const {
    return ConstMatMap<S>(values.data() + b * len() * width(), len(), width());
  }
  MatMap<S> item(Index b) {
    return MatMap<S>(values.data() + b * len() * width(), len(), width());
  }
};

template <typename S>
struct AttentionParams {
  Tensor<S> w_q, w_k, w_v;  // each D x D'
  int heads = 1;

  void validate() const {
    if (w_q.rank() != 2 || w_k.rank() != 2 || w_v.rank() != 2)
      throw std::invalid_argument("AttentionParams: projections must be D x D'");
    if (!(w_q.shape() == w_k.shape() && w_q.shape() == w_v.shape()))
      throw std::invalid_argument("AttentionParams: inconsistent projection shapes");
    if (heads < 1 || w_q.extent(1) % heads != 0)
      throw std::invalid_argument("AttentionParams: heads must divide projection width");
  }
  Index proj_dim() const { return w_q.extent(1); }
  Index head_dim() const { return w_q.extent(1) / heads; }
};

struct MaskMode {
  enum class Kind { causal, bidirectional, window } kind = Kind::causal;
  Index window = 0;

  static MaskMode causal() { return {Kind::causal, 0}; }
  static MaskMode bidirectional() { return {Kind::bidirectional, 0}; }
  static MaskMode windowed(Index w) {
    if (w < 1) throw std::invalid_argument("MaskMode: window must be >= 1");
    return {Kind::window, w};
  }
};

template <typename S>
struct AttentionMatrix {
  Tensor<S> probs;  // B x H x T x T, rows stochastic on their support, exact zeros elsewhere
};

template <typename S>
struct AttentionResult {
  SequenceBatch<S> out;
  AttentionMatrix<S> weights;
};

/// Rotary position encoding: pairs (2i, 2i+1) rotated by pos * base^(-2i/d).
/// Applied to q/k only; pair norms are preserved.
template <typename S>
Tensor<S> rope_encode(const Tensor<S>& qk, const std::vector<Index>& positions,
                      double base = 10000.0) {
  if (qk.rank() != 4) throw std::invalid_argument("rope_encode: expected B x H x T x d");
  const Index B = qk.extent(0), H = qk.extent(1), T = qk.extent(2), d = qk.extent(3);
  if (d % 2 != 0) throw std::invalid_argument("rope_encode: head dim must be even");
  if (static_cast<Index>(positions.size()) != T)
    throw std::invalid_argument("rope_encode: positions length must equal T");

  Tensor<S> out(qk.shape());
  for (Index b = 0; b < B; ++b)
    for (Index h = 0; h < H; ++h)
      for (Index t = 0; t < T; ++t) {
        const double pos = static_cast<double>(positions[static_cast<size_t>(t)]);
        for (Index i = 0; i < d / 2; ++i) {
          const double theta = pos * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
          const S c = static_cast<S>(std::cos(theta)), s = static_cast<S>(std::sin(theta));
          const S x0 = qk(b, h, t, 2 * i), x1 = qk(b, h, t, 2 * i + 1);
          out(b, h, t, 2 * i) = x0 * c - x1 * s;
          out(b, h, t, 2 * i + 1) = x0 * s + x1 * c;
        }
      }
  return out;
}

namespace detail {

/// Rotate one T x d head in place by position index (row t by angle t*theta_i).
template <typename S>
void rope_rows_inplace(MatrixX<S>& m, double base = 10000.0) {
  const Index T = m.rows(), d = m.cols();
  for (Index t = 0; t < T; ++t)
    for (Index i = 0; i < d / 2; ++i) {
      const double theta = static_cast<double>(t) * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const S c = static_cast<S>(std::cos(theta)), s = static_cast<S>(std::sin(theta));
      const S x0 = m(t, 2 * i), x1 = m(t, 2 * i + 1);
      m(t, 2 * i) = x0 * c - x1 * s;
      m(t, 2 * i + 1) = x0 * s + x1 * c;
    }
}

/// Max-shifted softmax of logits(t, lo..hi) written into row t of w; zeros elsewhere.
template <typename S>
void masked_softmax_row(const MatrixX<S>& logits, Index t, Index lo, Index hi, Tensor<S>& w,
                        Index b, Index h) {
  S m = logits(t, lo);
  for (Index s = lo + 1; s <= hi; ++s) m = std::max(m, logits(t, s));
  S z = 0;
  for (Index s = lo; s <= hi; ++s) z += std::exp(logits(t, s) - m);
  for (Index s = lo; s <= hi; ++s) w(b, h, t, s) = std::exp(logits(t, s) - m) / z;
}

struct RowSupport {
  Index lo, hi;
};

inline RowSupport mask_support(const MaskMode& mask, Index t, Index T) {
  switch (mask.kind) {
    case MaskMode::Kind::causal:
      return {0, t};
    case MaskMode::Kind::bidirectional:
      return {0, T - 1};
    case MaskMode::Kind::window:
      return {std::max<Index>(0, t - mask.window), t};
  }
  return {0, t};
}

}  // namespace detail

namespace detail {

template <typename S>
AttentionResult<S> attention_impl(const SequenceBatch<S>& x, const AttentionParams<S>& params,
                                  const MaskMode& mask, bool use_rope, bool scale) {
  params.validate();
  const Index B = x.batch(), T = x.len(), D = x.width();
  if (params.w_q.extent(0) != D) throw std::invalid_argument("attention: projection rows must equal model width");
  const Index H = params.heads, dh = params.head_dim();

  AttentionResult<S> r;
  r.weights.probs = Tensor<S>({B, H, T, T});
  Tensor<S> out({B, T, params.proj_dim()});
  const S sc = scale ? static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh))) : S(1);

  auto wq = params.w_q.matrix(D, params.proj_dim());
  auto wk = params.w_k.matrix(D, params.proj_dim());
  auto wv = params.w_v.matrix(D, params.proj_dim());

  for (Index b = 0; b < B; ++b) {
    MatrixX<S> q = x.item(b) * wq;
    MatrixX<S> k = x.item(b) * wk;
    MatrixX<S> v = x.item(b) * wv;
    MatMap<S> ob(out.data() + b * T * params.proj_dim(), T, params.proj_dim());
    for (Index h = 0; h < H; ++h) {
      MatrixX<S> qh = q.middleCols(h * dh, dh);
      MatrixX<S> kh = k.middleCols(h * dh, dh);
      if (use_rope) {
        rope_rows_inplace(qh);
        rope_rows_inplace(kh);
      }
      MatrixX<S> logits = (qh * kh.transpose()) * sc;
      for (Index t = 0; t < T; ++t) {
        auto sup = mask_support(mask, t, T);
        masked_softmax_row(logits, t, sup.lo, sup.hi, r.weights.probs, b, h);
      }
      ConstMatMap<S> w2d(r.weights.probs.data() + (b * H + h) * T * T, T, T);
      ob.middleCols(h * dh, dh).noalias() = w2d * v.middleCols(h * dh, dh);
    }
  }
  r.out = SequenceBatch<S>(std::move(out));
  return r;
}

}  // namespace detail

/// Eq-by-row softmax attention; weights row-stochastic on the masked support.
template <typename S>
AttentionResult<S> softmax_attention(const SequenceBatch<S>& x, const AttentionParams<S>& params,
                                     const MaskMode& mask, bool scale = true) {
  if (mask.kind == MaskMode::Kind::window)
    throw std::invalid_argument("softmax_attention: use sliding_window_attention for window masks");
  return detail::attention_impl(x, params, mask, /*use_rope=*/false, scale);
}

/// Causal attention restricted to the last w positions (plus the current one);
/// early rows attend over the shorter clamped window.
template <typename S>
AttentionResult<S> sliding_window_attention(const SequenceBatch<S>& x,
                                            const AttentionParams<S>& params, Index w,
                                            bool use_rope, bool scale = true) {
  return detail::attention_impl(x, params, MaskMode::windowed(w), use_rope, scale);
}

}  // namespace latte
