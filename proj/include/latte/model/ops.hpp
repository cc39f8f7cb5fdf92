#pragma once

#include "latte/model/tape.hpp"
#include "latte/rng.hpp"
#include "latte/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace latte::model {

namespace detail {

// Flattened (size/cols) x cols view of a tensor's storage.
template <typename ScalarT>
MatMap<ScalarT> rows_view(Tensor<ScalarT>& t, Index cols) {
  return t.matrix(t.size() / cols, cols);
}

template <typename ScalarT>
ConstMatMap<ScalarT> rows_view(const Tensor<ScalarT>& t, Index cols) {
  return t.matrix(t.size() / cols, cols);
}

}  // namespace detail

template <typename ScalarT>
int leaf(Tape<ScalarT>& tape, Tensor<ScalarT> value) {
  return tape.push(std::move(value));
}

// x: (..., k) times w: (k, n) -> (..., n).
template <typename ScalarT>
int matmul(Tape<ScalarT>& tape, int x_id, int w_id) {
  const Tensor<ScalarT>& x = tape.value(x_id);
  const Tensor<ScalarT>& w = tape.value(w_id);
  if (w.rank() != 2) throw std::invalid_argument("matmul weight must be rank 2");
  const Index k = w.extent(0), n = w.extent(1);
  if (x.rank() < 1 || x.extent(x.rank() - 1) != k)
    throw std::invalid_argument("matmul inner dimensions disagree");
  std::vector<Index> out_shape(x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(n);
  Tensor<ScalarT> out(out_shape);
  detail::rows_view(out, n).noalias() = detail::rows_view(x, k) * w.matrix(k, n);
  const int out_id = tape.push(std::move(out));
  tape.set_backward(out_id, [tp = &tape, x_id, w_id, out_id, k, n]() {
    auto g = detail::rows_view(tp->grad(out_id), n);
    auto xm = detail::rows_view(tp->value(x_id), k);
    auto wm = tp->value(w_id).matrix(k, n);
    detail::rows_view(tp->grad(x_id), k).noalias() += g * wm.transpose();
    tp->grad(w_id).matrix(k, n).noalias() += xm.transpose() * g;
  });
  return out_id;
}

template <typename ScalarT>
int add(Tape<ScalarT>& tape, int a_id, int b_id) {
  const Tensor<ScalarT>& a = tape.value(a_id);
  const Tensor<ScalarT>& b = tape.value(b_id);
  if (!a.same_shape(b)) throw std::invalid_argument("add expects matching shapes");
  Tensor<ScalarT> out(a.shape());
  out.vector() = a.vector() + b.vector();
  const int out_id = tape.push(std::move(out));
  tape.set_backward(out_id, [tp = &tape, a_id, b_id, out_id]() {
    const auto g = ConstVecMap<ScalarT>(tp->grad(out_id).data(), tp->value(out_id).size());
    tp->grad(a_id).vector() += g;
    tp->grad(b_id).vector() += g;
  });
  return out_id;
}

template <typename ScalarT>
int mul(Tape<ScalarT>& tape, int a_id, int b_id) {
  const Tensor<ScalarT>& a = tape.value(a_id);
  const Tensor<ScalarT>& b = tape.value(b_id);
  if (!a.same_shape(b)) throw std::invalid_argument("mul expects matching shapes");
  Tensor<ScalarT> out(a.shape());
  out.vector() = a.vector().cwiseProduct(b.vector());
  const int out_id = tape.push(std::move(out));
  tape.set_backward(out_id, [tp = &tape, a_id, b_id, out_id]() {
    const auto g = ConstVecMap<ScalarT>(tp->grad(out_id).data(), tp->value(out_id).size());
    tp->grad(a_id).vector() += g.cwiseProduct(tp->value(b_id).vector());
    tp->grad(b_id).vector() += g.cwiseProduct(tp->value(a_id).vector());
  });
  return out_id;
}

template <typename ScalarT>
int scale(Tape<ScalarT>& tape, int x_id, ScalarT factor) {
  Tensor<ScalarT> out = tape.value(x_id);
  out.vector() *= factor;
  const int out_id = tape.push(std::move(out));
  tape.set_backward(out_id, [tp = &tape, x_id, out_id, factor]() {
    tp->grad(x_id).vector() +=
        factor * ConstVecMap<ScalarT>(tp->grad(out_id).data(), tp->value(out_id).size());
  });
  return out_id;
}

template <typename ScalarT>
int sum(Tape<ScalarT>& tape, int x_id) {
  Tensor<ScalarT> out({1});
  out[0] = tape.value(x_id).vector().sum();
  const int out_id = tape.push(std::move(out));
  tape.set_backward(out_id, [tp = &tape, x_id, out_id]() {
    tp->grad(x_id).vector().array() += tp->grad(out_id)[0];
  });
  return out_id;
}

template <typename ScalarT>
int sigmoid(Tape<ScalarT>& tape, int x_id) {
  const Tensor<ScalarT>& x = tape.value(x_id);
  Tensor<ScalarT> out(x.shape());
  for (Index i = 0; i < x.size(); ++i) {
    const ScalarT v = x[i];
    out[i] = v >= ScalarT(0) ? ScalarT(1) / (ScalarT(1) + std::exp(-v))
                             : std::exp(v) / (ScalarT(1) + std::exp(v));
  }
  const int out_id = tape.push(std::move(out));
  tape.set_backward(out_id, [tp = &tape, x_id, out_id]() {
    const Tensor<ScalarT>& y = tp->value(out_id);
    const Tensor<ScalarT>& g = tp->grad(out_id);
    Tensor<ScalarT>& gx = tp->grad(x_id);
    for (Index i = 0; i < y.size(); ++i) gx[i] += g[i] * y[i] * (ScalarT(1) - y[i]);
  });
  return out_id;
}

// Exact (erf-based) GELU.
template <typename ScalarT>
int gelu(Tape<ScalarT>& tape, int x_id) {
  const Tensor<ScalarT>& x = tape.value(x_id);
  Tensor<ScalarT> out(x.shape());
  const ScalarT inv_sqrt2 = ScalarT(1) / std::sqrt(ScalarT(2));
  for (Index i = 0; i < x.size(); ++i)
    out[i] = ScalarT(0.5) * x[i] * (ScalarT(1) + std::erf(x[i] * inv_sqrt2));
  const int out_id = tape.push(std::move(out));
  tape.set_backward(out_id, [tp = &tape, x_id, out_id, inv_sqrt2]() {
    const Tensor<ScalarT>& x_in = tp->value(x_id);
    const Tensor<ScalarT>& g = tp->grad(out_id);
    Tensor<ScalarT>& gx = tp->grad(x_id);
    const ScalarT inv_sqrt2pi = ScalarT(1) / std::sqrt(ScalarT(2) * ScalarT(M_PI));
    for (Index i = 0; i < x_in.size(); ++i) {
      const ScalarT v = x_in[i];
      const ScalarT cdf = ScalarT(0.5) * (ScalarT(1) + std::erf(v * inv_sqrt2));
      const ScalarT pdf = inv_sqrt2pi * std::exp(ScalarT(-0.5) * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
  return out_id;
}

// RMS normalization over the last axis, learned gain, no bias.
template <typename ScalarT>
int rmsnorm(Tape<ScalarT>& tape, int x_id, int gain_id) {
  const Tensor<ScalarT>& x = tape.value(x_id);
  const Tensor<ScalarT>& gain = tape.value(gain_id);
  const Index d = x.extent(x.rank() - 1);
  if (gain.rank() != 1 || gain.extent(0) != d)
    throw std::invalid_argument("rmsnorm gain must match the feature width");
  const Index rows = x.size() / d;
  const ScalarT eps = ScalarT(1e-6);
  Tensor<ScalarT> out(x.shape());
  Tensor<ScalarT> inv_rms({rows});
  auto xm = detail::rows_view(x, d);
  auto om = detail::rows_view(out, d);
  const auto gv = gain.vector();
  for (Index r = 0; r < rows; ++r) {
    const ScalarT ms = xm.row(r).squaredNorm() / ScalarT(d);
    inv_rms[r] = ScalarT(1) / std::sqrt(ms + eps);
    om.row(r) = (xm.row(r) * inv_rms[r]).cwiseProduct(gv.transpose());
  }
  const int out_id = tape.push(std::move(out));
  tape.set_backward(out_id, [tp = &tape, x_id, gain_id, out_id, d, rows,
                             inv_rms = std::move(inv_rms)]() {
    auto g = detail::rows_view(tp->grad(out_id), d);
    auto xm2 = detail::rows_view(tp->value(x_id), d);
    auto gx = detail::rows_view(tp->grad(x_id), d);
    const auto gv2 = tp->value(gain_id).vector();
    auto ggain = tp->grad(gain_id).vector();
    for (Index r = 0; r < rows; ++r) {
      const ScalarT inv = inv_rms[r];
      const auto gs = g.row(r).cwiseProduct(gv2.transpose());
      const ScalarT dot = gs.cwiseProduct(xm2.row(r)).sum();
      gx.row(r) += inv * gs - (inv * inv * inv / ScalarT(d)) * dot * xm2.row(r);
      ggain += (inv * g.row(r).cwiseProduct(xm2.row(r))).transpose();
    }
  });
  return out_id;
}

// Layer normalization over the last axis with learned gain and bias.
template <typename ScalarT>
int layernorm(Tape<ScalarT>& tape, int x_id, int gain_id, int bias_id) {
  const Tensor<ScalarT>& x = tape.value(x_id);
  const Tensor<ScalarT>& gain = tape.value(gain_id);
  const Tensor<ScalarT>& bias = tape.value(bias_id);
  const Index d = x.extent(x.rank() - 1);
  if (gain.rank() != 1 || gain.extent(0) != d || !gain.same_shape(bias))
    throw std::invalid_argument("layernorm gain/bias must match the feature width");
  const Index rows = x.size() / d;
  const ScalarT eps = ScalarT(1e-6);
  Tensor<ScalarT> out(x.shape());
  Tensor<ScalarT> xhat(x.shape());
  Tensor<ScalarT> inv_std({rows});
  auto xm = detail::rows_view(x, d);
  auto om = detail::rows_view(out, d);
  auto hm = detail::rows_view(xhat, d);
  for (Index r = 0; r < rows; ++r) {
    const ScalarT mean = xm.row(r).mean();
    const ScalarT var = (xm.row(r).array() - mean).square().mean();
    inv_std[r] = ScalarT(1) / std::sqrt(var + eps);
    hm.row(r) = (xm.row(r).array() - mean).matrix() * inv_std[r];
    om.row(r) = hm.row(r).cwiseProduct(gain.vector().transpose()) + bias.vector().transpose();
  }
  const int out_id = tape.push(std::move(out));
  tape.set_backward(out_id, [tp = &tape, x_id, gain_id, bias_id, out_id, d, rows,
                             xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
    auto g = detail::rows_view(tp->grad(out_id), d);
    auto hm2 = detail::rows_view(xhat, d);
    auto gx = detail::rows_view(tp->grad(x_id), d);
    const auto gv = tp->value(gain_id).vector();
    auto ggain = tp->grad(gain_id).vector();
    auto gbias = tp->grad(bias_id).vector();
    for (Index r = 0; r < rows; ++r) {
      const auto gs = g.row(r).cwiseProduct(gv.transpose());
      const ScalarT m1 = gs.mean();
      const ScalarT m2 = gs.cwiseProduct(hm2.row(r)).mean();
      gx.row(r) += inv_std[r] * (gs.array() - m1 - hm2.row(r).array() * m2).matrix();
      ggain += g.row(r).cwiseProduct(hm2.row(r)).transpose();
      gbias += g.row(r).transpose();
    }
  });
  return out_id;
}

// Inverted dropout; rate 0 is the identity. The mask is drawn from `rng`.
template <typename ScalarT>
int dropout(Tape<ScalarT>& tape, int x_id, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0, 1)");
  if (rate == 0.0) return x_id;
  const Tensor<ScalarT>& x = tape.value(x_id);
  Tensor<ScalarT> mask(x.shape());
  const ScalarT keep_scale = ScalarT(1.0 / (1.0 - rate));
  for (Index i = 0; i < mask.size(); ++i)
    mask[i] = rng.next_uniform() >= rate ? keep_scale : ScalarT(0);
  Tensor<ScalarT> out(x.shape());
  out.vector() = x.vector().cwiseProduct(mask.vector());
  const int out_id = tape.push(std::move(out));
  tape.set_backward(out_id, [tp = &tape, x_id, out_id, mask = std::move(mask)]() {
    tp->grad(x_id).vector() +=
        ConstVecMap<ScalarT>(tp->grad(out_id).data(), mask.size()).cwiseProduct(mask.vector());
  });
  return out_id;
}

// table: (vocab, d); tokens: (B, T) -> (B, T, d).
template <typename ScalarT>
int embedding(Tape<ScalarT>& tape, int table_id, const Tensor<int32_t>& tokens) {
  const Tensor<ScalarT>& table = tape.value(table_id);
  if (table.rank() != 2 || tokens.rank() != 2)
    throw std::invalid_argument("embedding expects a rank-2 table and rank-2 token ids");
  const Index vocab = table.extent(0), d = table.extent(1);
  const Index rows = tokens.size();
  Tensor<ScalarT> out({tokens.extent(0), tokens.extent(1), d});
  auto tm = table.matrix(vocab, d);
  auto om = detail::rows_view(out, d);
  for (Index r = 0; r < rows; ++r) {
    const int32_t id = tokens[r];
    if (id < 0 || id >= vocab)
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(vocab));
    om.row(r) = tm.row(id);
  }
  const int out_id = tape.push(std::move(out));
  tape.set_backward(out_id, [tp = &tape, table_id, out_id, tokens, vocab, d, rows]() {
    auto g = detail::rows_view(tp->grad(out_id), d);
    auto gt = tp->grad(table_id).matrix(vocab, d);
    for (Index r = 0; r < rows; ++r) gt.row(tokens[r]) += g.row(r);
  });
  return out_id;
}

// x: (B, T, d) plus learned position table (T_max, d) broadcast over the batch.
template <typename ScalarT>
int add_positions(Tape<ScalarT>& tape, int x_id, int table_id) {
  const Tensor<ScalarT>& x = tape.value(x_id);
  const Tensor<ScalarT>& table = tape.value(table_id);
  if (x.rank() != 3 || table.rank() != 2 || table.extent(1) != x.extent(2))
    throw std::invalid_argument("add_positions expects (B,T,d) input and (T_max,d) table");
  const Index B = x.extent(0), T = x.extent(1), d = x.extent(2);
  if (T > table.extent(0))
    throw std::runtime_error("position table exceeded: sequence length " + std::to_string(T) +
                             " > learned positions " + std::to_string(table.extent(0)));
  Tensor<ScalarT> out(x.shape());
  auto tm = table.matrix(table.extent(0), d);
  for (Index b = 0; b < B; ++b)
    MatMap<ScalarT>(out.data() + b * T * d, T, d) =
        ConstMatMap<ScalarT>(x.data() + b * T * d, T, d) + tm.topRows(T);
  const int out_id = tape.push(std::move(out));
  tape.set_backward(out_id, [tp = &tape, x_id, table_id, out_id, B, T, d]() {
    Tensor<ScalarT>& gout = tp->grad(out_id);
    Tensor<ScalarT>& gx = tp->grad(x_id);
    auto gt = tp->grad(table_id).matrix(tp->value(table_id).extent(0), d);
    gx.vector() += gout.vector();
    for (Index b = 0; b < B; ++b)
      gt.topRows(T) += ConstMatMap<ScalarT>(gout.data() + b * T * d, T, d);
  });
  return out_id;
}

// Mean masked token-level cross entropy. logits: (B, T, V); targets/mask: (B, T).
// Returns a scalar node. An all-zero mask yields loss 0 with zero gradients.
template <typename ScalarT>
int masked_cross_entropy(Tape<ScalarT>& tape, int logits_id, const Tensor<int32_t>& targets,
                         const Tensor<uint8_t>& mask) {
  const Tensor<ScalarT>& logits = tape.value(logits_id);
  if (logits.rank() != 3) throw std::invalid_argument("cross entropy expects (B,T,V) logits");
  const Index V = logits.extent(2);
  const Index rows = logits.size() / V;
  if (targets.size() != rows || mask.size() != rows)
    throw std::invalid_argument("cross entropy targets/mask must cover every position");
  Index count = 0;
  for (Index r = 0; r < rows; ++r) count += mask[r] ? 1 : 0;

  Tensor<ScalarT> probs = Tensor<ScalarT>::zeros({rows, V});
  auto lm = detail::rows_view(logits, V);
  auto pm = probs.matrix(rows, V);
  double total = 0.0;
  for (Index r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const int32_t tgt = targets[r];
    if (tgt < 0 || tgt >= V)
      throw std::out_of_range("target id " + std::to_string(tgt) + " outside vocabulary of " +
                              std::to_string(V));
    const ScalarT mx = lm.row(r).maxCoeff();
    pm.row(r) = (lm.row(r).array() - mx).exp();
    const ScalarT z = pm.row(r).sum();
    pm.row(r) /= z;
    total += static_cast<double>(mx + std::log(z) - lm(r, tgt));
  }
  Tensor<ScalarT> out({1});
  out[0] = count > 0 ? static_cast<ScalarT>(total / static_cast<double>(count)) : ScalarT(0);
  const int out_id = tape.push(std::move(out));
  if (count == 0) return out_id;
  tape.set_backward(out_id, [tp = &tape, logits_id, out_id, targets, mask, probs = std::move(probs),
                             V, rows, count]() {
    const ScalarT gl = tp->grad(out_id)[0] / static_cast<ScalarT>(count);
    auto pm2 = probs.matrix(rows, V);
    auto gx = detail::rows_view(tp->grad(logits_id), V);
    for (Index r = 0; r < rows; ++r) {
      if (!mask[r]) continue;
      gx.row(r) += gl * pm2.row(r);
      gx(r, targets[r]) -= gl;
    }
  });
  return out_id;
}

}  // namespace latte::model
