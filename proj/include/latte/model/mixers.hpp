#pragma once

// Sequence-mixing tape ops with handwritten backward passes. Forward passes
// reuse the library kernels (shifted scans, windowed softmax); backward
// passes run the matching reverse-time recursions so no quadratic-in-T state
// is kept for the scan-based mixers. Gradients of the running-max shifts are
// dropped: outputs are ratios in which the shifts cancel, so this is exact.
//
// All per-(batch, head) gradient slices are disjoint, which keeps the
// parallel loops deterministic.

#include "latte/latte.hpp"
#include "latte/macchiato.hpp"
#include "latte/model/ops.hpp"
#include "latte/model/tape.hpp"
#include "latte/threading.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

namespace latte::model {

namespace detail {

template <typename S>
using RowX = Eigen::Matrix<S, 1, Eigen::Dynamic>;

inline double rope_theta(Index pos, Index i, Index dh, double base = 10000.0) {
  return static_cast<double>(pos) *
         std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
}

template <typename S>
void rope_rotate_rows(MatrixX<S>& m, bool inverse) {
  const Index T = m.rows(), dh = m.cols();
  for (Index t = 0; t < T; ++t)
    for (Index i = 0; i < dh / 2; ++i) {
      const double theta = rope_theta(t, i, dh);
      const S c = static_cast<S>(std::cos(theta));
      S s = static_cast<S>(std::sin(theta));
      if (inverse) s = -s;
      const S x0 = m(t, 2 * i), x1 = m(t, 2 * i + 1);
      m(t, 2 * i) = x0 * c - x1 * s;
      m(t, 2 * i + 1) = x0 * s + x1 * c;
    }
}

inline Index window_lo(Index t, Index window) {
  return window > 0 ? std::max<Index>(0, t - window) : Index(0);
}

// Reverse pass of the shifted latte scan for one (b, h) slice. Forward
// intermediates are replayed segment by segment from the stored snapshots,
// then consumed in reverse while the suffix sums
//   S1[l] = sum_{t' >= t} (p[t',l] / alpha[t',l]) exp(m[t,l] - m[t',l]) g[t']
//   S2[l] = sum_{t' >= t} (p[t',l] / alpha[t',l]) exp(m[t,l] - m[t',l]) (g[t'] . u[t',l])
// are carried across segment boundaries. u[t,l] is the per-latent normalized
// value vtilde/alpha. Both sums only ever multiply by exp() factors <= 1.
//
// p_row(t) must return a pointer to the Lh mixture weights used at t;
// dp_sink(t, dp) receives d loss / d p[t,:].
template <typename S, typename PRow, typename DpSink>
void latte_branch_backward(Index T, Index Lh, Index Mh, Index unroll, const S* kl, Index kl_stride,
                           const S* v, Index v_stride, const S* g, Index g_stride,
                           const S* snap_m, const S* snap_a, const S* snap_u, PRow p_row,
                           DpSink dp_sink, S* gkl, Index gkl_stride, S* gv, Index gv_stride) {
  const Index segments = (T + unroll - 1) / unroll;
  MatrixX<S> m_seg(unroll, Lh), a_seg(unroll, Lh), u_seg(unroll, Lh * Mh);
  RowX<S> run_m(Lh), run_a(Lh), scratch(Mh), dp(Lh), m_next(Lh);
  MatrixX<S> run_u(Lh, Mh);
  MatrixX<S> s1 = MatrixX<S>::Zero(Lh, Mh);
  RowX<S> s2 = RowX<S>::Zero(Lh);

  for (Index seg = segments - 1; seg >= 0; --seg) {
    const Index t0 = seg * unroll;
    const Index len = std::min(unroll, T - t0);
    // Replay the forward recurrence for this segment from its snapshot.
    for (Index l = 0; l < Lh; ++l) {
      run_m[l] = snap_m[seg * Lh + l];
      run_a[l] = snap_a[seg * Lh + l];
      for (Index j = 0; j < Mh; ++j) run_u(l, j) = snap_u[(seg * Lh + l) * Mh + j];
    }
    for (Index it = 0; it < len; ++it) {
      const Index t = t0 + it;
      scratch.setZero();
      latte::detail::latte_update_head(run_a.data(), run_u.data(), run_m.data(),
                                       kl + t * kl_stride, p_row(t), v + t * v_stride,
                                       scratch.data(), Lh, Mh, t == 0);
      m_seg.row(it) = run_m;
      a_seg.row(it) = run_a;
      for (Index l = 0; l < Lh; ++l) u_seg.row(it).segment(l * Mh, Mh) = run_u.row(l);
    }
    // Consume it in reverse.
    for (Index it = len - 1; it >= 0; --it) {
      const Index t = t0 + it;
      Eigen::Map<const RowX<S>> g_row(g + t * g_stride, Mh);
      Eigen::Map<const RowX<S>> v_row(v + t * v_stride, Mh);
      const S* p = p_row(t);
      if (t < T - 1) {
        for (Index l = 0; l < Lh; ++l) {
          const S f = std::exp(m_seg(it, l) - m_next[l]);
          s1.row(l) *= f;
          s2[l] *= f;
        }
      }
      for (Index l = 0; l < Lh; ++l) {
        const S a = a_seg(it, l);
        const auto u_row = u_seg.row(it).segment(l * Mh, Mh);
        const S gu = (g_row.cwiseProduct(u_row)).sum() / a;  // g . (u/alpha)
        dp[l] = gu;
        const S coef = p[l] / a;
        s1.row(l) += coef * g_row;
        s2[l] += coef * gu;
      }
      dp_sink(t, dp.data());
      Eigen::Map<RowX<S>> gv_row(gv + t * gv_stride, Mh);
      Eigen::Map<RowX<S>> gkl_row(gkl + t * gkl_stride, Lh);
      for (Index l = 0; l < Lh; ++l) {
        const S ekm = std::exp(kl[t * kl_stride + l] - m_seg(it, l));
        gkl_row[l] += ekm * ((v_row.cwiseProduct(s1.row(l))).sum() - s2[l]);
        gv_row += ekm * s1.row(l);
      }
      m_next = m_seg.row(it);
    }
  }
}

}  // namespace detail

// Softmax attention over q/k/v projection streams. window <= 0 gives the full
// causal mask; window w restricts row t to [t-w, t]. q, k: (B,T,Dq) with
// heads | Dq; v: (B,T,Dv). Output (B,T,Dv).
template <typename ScalarT>
int attention_mixer(Tape<ScalarT>& tape, int q_id, int k_id, int v_id, Index heads, Index window,
                    bool use_rope, bool scaled = true) {
  const Tensor<ScalarT>& q = tape.value(q_id);
  const Tensor<ScalarT>& k = tape.value(k_id);
  const Tensor<ScalarT>& v = tape.value(v_id);
  if (q.rank() != 3 || !q.same_shape(k) || v.rank() != 3 || v.extent(0) != q.extent(0) ||
      v.extent(1) != q.extent(1))
    throw std::invalid_argument("attention_mixer expects (B,T,Dq) q/k and (B,T,Dv) v");
  const Index B = q.extent(0), T = q.extent(1), Dq = q.extent(2), Dv = v.extent(2);
  if (heads < 1 || Dq % heads != 0 || Dv % heads != 0)
    throw std::invalid_argument("attention_mixer heads must divide stream widths");
  const Index dh = Dq / heads, Mh = Dv / heads;
  if (use_rope && dh % 2 != 0)
    throw std::invalid_argument("attention_mixer rope needs an even head dim");
  const ScalarT sc =
      scaled ? static_cast<ScalarT>(1.0 / std::sqrt(static_cast<double>(dh))) : ScalarT(1);

  Tensor<ScalarT> probs = Tensor<ScalarT>::zeros({B, heads, T, T});
  Tensor<ScalarT> out = Tensor<ScalarT>::zeros({B, T, Dv});
  parallel_for(B * heads, [&](Index bh) {
    const Index b = bh / heads, h = bh % heads;
    MatrixX<ScalarT> qh = ConstMatMap<ScalarT>(q.data() + b * T * Dq, T, Dq).middleCols(h * dh, dh);
    MatrixX<ScalarT> kh = ConstMatMap<ScalarT>(k.data() + b * T * Dq, T, Dq).middleCols(h * dh, dh);
    if (use_rope) {
      detail::rope_rotate_rows(qh, false);
      detail::rope_rotate_rows(kh, false);
    }
    MatrixX<ScalarT> logits = (qh * kh.transpose()) * sc;
    MatMap<ScalarT> pm(probs.data() + (b * heads + h) * T * T, T, T);
    for (Index t = 0; t < T; ++t) {
      const Index lo = detail::window_lo(t, window);
      ScalarT mx = logits(t, lo);
      for (Index s = lo + 1; s <= t; ++s) mx = std::max(mx, logits(t, s));
      ScalarT z = 0;
      for (Index s = lo; s <= t; ++s) z += std::exp(logits(t, s) - mx);
      for (Index s = lo; s <= t; ++s) pm(t, s) = std::exp(logits(t, s) - mx) / z;
    }
    MatMap<ScalarT>(out.data() + b * T * Dv, T, Dv).middleCols(h * Mh, Mh).noalias() =
        pm * ConstMatMap<ScalarT>(v.data() + b * T * Dv, T, Dv).middleCols(h * Mh, Mh);
  });

  const int out_id = tape.push(std::move(out));
  tape.set_backward(out_id, [tp = &tape, q_id, k_id, v_id, out_id, B, T, Dq, Dv, heads, dh, Mh,
                             window, use_rope, sc, probs = std::move(probs)]() {
    const Tensor<ScalarT>& q2 = tp->value(q_id);
    const Tensor<ScalarT>& k2 = tp->value(k_id);
    const Tensor<ScalarT>& v2 = tp->value(v_id);
    Tensor<ScalarT>& gq = tp->grad(q_id);
    Tensor<ScalarT>& gk = tp->grad(k_id);
    Tensor<ScalarT>& gv = tp->grad(v_id);
    const Tensor<ScalarT>& gout = tp->grad(out_id);
    parallel_for(B * heads, [&](Index bh) {
      const Index b = bh / heads, h = bh % heads;
      MatrixX<ScalarT> qh =
          ConstMatMap<ScalarT>(q2.data() + b * T * Dq, T, Dq).middleCols(h * dh, dh);
      MatrixX<ScalarT> kh =
          ConstMatMap<ScalarT>(k2.data() + b * T * Dq, T, Dq).middleCols(h * dh, dh);
      if (use_rope) {
        detail::rope_rotate_rows(qh, false);
        detail::rope_rotate_rows(kh, false);
      }
      ConstMatMap<ScalarT> pm(probs.data() + (b * heads + h) * T * T, T, T);
      auto vh = ConstMatMap<ScalarT>(v2.data() + b * T * Dv, T, Dv).middleCols(h * Mh, Mh);
      auto gh = ConstMatMap<ScalarT>(gout.data() + b * T * Dv, T, Dv).middleCols(h * Mh, Mh);
      MatMap<ScalarT>(gv.data() + b * T * Dv, T, Dv).middleCols(h * Mh, Mh).noalias() +=
          pm.transpose() * gh;
      MatrixX<ScalarT> gqh = MatrixX<ScalarT>::Zero(T, dh);
      MatrixX<ScalarT> gkh = MatrixX<ScalarT>::Zero(T, dh);
      detail::RowX<ScalarT> dlogit(T);
      for (Index t = 0; t < T; ++t) {
        const Index lo = detail::window_lo(t, window);
        ScalarT dot = 0;
        for (Index s = lo; s <= t; ++s) {
          dlogit[s] = gh.row(t).cwiseProduct(vh.row(s)).sum();  // d out_t . v_s
          dot += pm(t, s) * dlogit[s];
        }
        for (Index s = lo; s <= t; ++s) {
          const ScalarT dl = pm(t, s) * (dlogit[s] - dot) * sc;
          gqh.row(t) += dl * kh.row(s);
          gkh.row(s) += dl * qh.row(t);
        }
      }
      if (use_rope) {
        detail::rope_rotate_rows(gqh, true);
        detail::rope_rotate_rows(gkh, true);
      }
      MatMap<ScalarT>(gq.data() + b * T * Dq, T, Dq).middleCols(h * dh, dh) += gqh;
      MatMap<ScalarT>(gk.data() + b * T * Dq, T, Dq).middleCols(h * dh, dh) += gkh;
    });
  });
  return out_id;
}

// Headwise linear attention in the query/key logit parameterization, computed
// with the max-shifted scan. ql, kl: (B,T,L); v: (B,T,Dv); heads | L, Dv.
template <typename ScalarT>
int linear_mixer(Tape<ScalarT>& tape, int ql_id, int kl_id, int v_id, Index heads) {
  const Tensor<ScalarT>& ql = tape.value(ql_id);
  const Tensor<ScalarT>& kl = tape.value(kl_id);
  const Tensor<ScalarT>& v = tape.value(v_id);
  if (ql.rank() != 3 || !ql.same_shape(kl) || v.rank() != 3)
    throw std::invalid_argument("linear_mixer expects (B,T,L) logits and (B,T,Dv) values");
  const Index B = ql.extent(0), T = ql.extent(1), L = ql.extent(2), Dv = v.extent(2);
  if (heads < 1 || L % heads != 0 || Dv % heads != 0)
    throw std::invalid_argument("linear_mixer heads must divide L and Dv");
  const Index Lh = L / heads, Mh = Dv / heads;

  Tensor<ScalarT> m_all({B, heads, T, Lh}), a_all({B, heads, T, Lh}), wexp_all({B, heads, T, Lh});
  Tensor<ScalarT> u_all({B, heads, T, Lh * Mh}), den_all({B, heads, T});
  Tensor<ScalarT> out = Tensor<ScalarT>::zeros({B, T, Dv});
  parallel_for(B * heads, [&](Index bh) {
    const Index b = bh / heads, h = bh % heads;
    detail::RowX<ScalarT> run_m(Lh), run_a(Lh);
    MatrixX<ScalarT> run_u = MatrixX<ScalarT>::Zero(Lh, Mh);
    run_a.setZero();
    for (Index t = 0; t < T; ++t) {
      const ScalarT* kl_row = kl.data() + (b * T + t) * L + h * Lh;
      const ScalarT* ql_row = ql.data() + (b * T + t) * L + h * Lh;
      Eigen::Map<const detail::RowX<ScalarT>> v_row(v.data() + (b * T + t) * Dv + h * Mh, Mh);
      for (Index l = 0; l < Lh; ++l) {
        const ScalarT prev = t == 0 ? kl_row[l] : run_m[l];
        const ScalarT mx = std::max(prev, kl_row[l]);
        const ScalarT revert = std::exp(prev - mx);
        const ScalarT add = std::exp(kl_row[l] - mx);
        run_a[l] = run_a[l] * revert + add;
        run_u.row(l) = run_u.row(l) * revert + add * v_row;
        run_m[l] = mx;
      }
      const Index base = ((b * heads + h) * T + t) * Lh;
      ScalarT c = ql_row[0] + run_m[0];
      for (Index l = 1; l < Lh; ++l) c = std::max(c, ql_row[l] + run_m[l]);
      ScalarT den = 0;
      Eigen::Map<detail::RowX<ScalarT>> out_row(out.data() + (b * T + t) * Dv + h * Mh, Mh);
      for (Index l = 0; l < Lh; ++l) {
        m_all[base + l] = run_m[l];
        a_all[base + l] = run_a[l];
        const ScalarT w = std::exp(ql_row[l] + run_m[l] - c);
        wexp_all[base + l] = w;
        den += w * run_a[l];
        out_row += w * run_u.row(l);
        for (Index j = 0; j < Mh; ++j) u_all[base * Mh + l * Mh + j] = run_u(l, j);
      }
      if (!(den > ScalarT(0)))
        throw std::runtime_error("degenerate normalization in linear attention");
      den_all[(b * heads + h) * T + t] = den;
      out_row /= den;
    }
  });

  const int out_id = tape.push(std::move(out));
  tape.set_backward(out_id, [tp = &tape, ql_id, kl_id, v_id, out_id, B, T, L, Dv, heads, Lh, Mh,
                             m_all = std::move(m_all), a_all = std::move(a_all),
                             wexp_all = std::move(wexp_all), u_all = std::move(u_all),
                             den_all = std::move(den_all)]() {
    const Tensor<ScalarT>& kl2 = tp->value(kl_id);
    const Tensor<ScalarT>& v2 = tp->value(v_id);
    const Tensor<ScalarT>& outv = tp->value(out_id);
    const Tensor<ScalarT>& gout = tp->grad(out_id);
    Tensor<ScalarT>& gql = tp->grad(ql_id);
    Tensor<ScalarT>& gkl = tp->grad(kl_id);
    Tensor<ScalarT>& gv = tp->grad(v_id);
    parallel_for(B * heads, [&](Index bh) {
      const Index b = bh / heads, h = bh % heads;
      MatrixX<ScalarT> t1 = MatrixX<ScalarT>::Zero(Lh, Mh);
      detail::RowX<ScalarT> t2 = detail::RowX<ScalarT>::Zero(Lh);
      detail::RowX<ScalarT> m_next(Lh);
      for (Index t = T - 1; t >= 0; --t) {
        const Index base = ((b * heads + h) * T + t) * Lh;
        Eigen::Map<const detail::RowX<ScalarT>> g_row(gout.data() + (b * T + t) * Dv + h * Mh, Mh);
        Eigen::Map<const detail::RowX<ScalarT>> o_row(outv.data() + (b * T + t) * Dv + h * Mh, Mh);
        Eigen::Map<const detail::RowX<ScalarT>> v_row(v2.data() + (b * T + t) * Dv + h * Mh, Mh);
        const ScalarT go = g_row.cwiseProduct(o_row).sum();
        const ScalarT den = den_all[(b * heads + h) * T + t];
        if (t < T - 1)
          for (Index l = 0; l < Lh; ++l) {
            const ScalarT f = std::exp(m_all[base + l] - m_next[l]);
            t1.row(l) *= f;
            t2[l] *= f;
          }
        ScalarT* gql_row = gql.data() + (b * T + t) * L + h * Lh;
        ScalarT* gkl_row = gkl.data() + (b * T + t) * L + h * Lh;
        Eigen::Map<detail::RowX<ScalarT>> gv_row(gv.data() + (b * T + t) * Dv + h * Mh, Mh);
        for (Index l = 0; l < Lh; ++l) {
          Eigen::Map<const detail::RowX<ScalarT>> u_row(u_all.data() + base * Mh + l * Mh, Mh);
          const ScalarT w = wexp_all[base + l];
          gql_row[l] += w * (g_row.cwiseProduct(u_row).sum() - go * a_all[base + l]) / den;
          const ScalarT coef = w / den;
          t1.row(l) += coef * g_row;
          t2[l] += coef * go;
          const ScalarT ekm = std::exp(kl2[(b * T + t) * L + h * Lh + l] - m_all[base + l]);
          gkl_row[l] += ekm * (v_row.cwiseProduct(t1.row(l)).sum() - t2[l]);
          gv_row += ekm * t1.row(l);
        }
        for (Index l = 0; l < Lh; ++l) m_next[l] = m_all[base + l];
      }
    });
  });
  return out_id;
}

// Directed latte mixer: per-head softmax over query logits, shifted scan over
// key logits. Only segment-boundary state snapshots are stored; the backward
// pass replays each segment. ql, kl: (B,T,L); v: (B,T,Dv).
template <typename ScalarT>
int latte_mixer(Tape<ScalarT>& tape, int ql_id, int kl_id, int v_id, Index heads, Index unroll) {
  const Tensor<ScalarT>& ql = tape.value(ql_id);
  const Tensor<ScalarT>& kl = tape.value(kl_id);
  const Tensor<ScalarT>& v = tape.value(v_id);
  if (ql.rank() != 3 || !ql.same_shape(kl) || v.rank() != 3)
    throw std::invalid_argument("latte_mixer expects (B,T,L) logits and (B,T,Dv) values");
  if (unroll < 1) throw std::invalid_argument("latte_mixer unroll must be positive");
  const Index B = ql.extent(0), T = ql.extent(1), L = ql.extent(2), Dv = v.extent(2);
  if (heads < 1 || L % heads != 0 || Dv % heads != 0)
    throw std::invalid_argument("latte_mixer heads must divide L and Dv");
  const Index Lh = L / heads, Mh = Dv / heads;
  const Index segments = (T + unroll - 1) / unroll;

  Tensor<ScalarT> snap_m({B, heads, segments, Lh});
  Tensor<ScalarT> snap_a({B, heads, segments, Lh});
  Tensor<ScalarT> snap_u({B, heads, segments, Lh * Mh});
  Tensor<ScalarT> out = Tensor<ScalarT>::zeros({B, T, Dv});
  parallel_for(B * heads, [&](Index bh) {
    const Index b = bh / heads, h = bh % heads;
    detail::RowX<ScalarT> run_m(Lh), run_a(Lh), p(Lh);
    MatrixX<ScalarT> run_u = MatrixX<ScalarT>::Zero(Lh, Mh);
    run_a.setZero();
    run_m.setZero();
    for (Index t = 0; t < T; ++t) {
      if (t % unroll == 0) {
        const Index sb = ((b * heads + h) * segments + t / unroll) * Lh;
        for (Index l = 0; l < Lh; ++l) {
          snap_m[sb + l] = run_m[l];
          snap_a[sb + l] = run_a[l];
          for (Index j = 0; j < Mh; ++j) snap_u[sb * Mh + l * Mh + j] = run_u(l, j);
        }
      }
      latte::detail::head_softmax(ql.data() + (b * T + t) * L + h * Lh, Lh, p.data());
      latte::detail::latte_update_head(run_a.data(), run_u.data(), run_m.data(),
                                       kl.data() + (b * T + t) * L + h * Lh, p.data(),
                                       v.data() + (b * T + t) * Dv + h * Mh,
                                       out.data() + (b * T + t) * Dv + h * Mh, Lh, Mh, t == 0);
    }
  });

  const int out_id = tape.push(std::move(out));
  tape.set_backward(out_id, [tp = &tape, ql_id, kl_id, v_id, out_id, B, T, L, Dv, heads, Lh, Mh,
                             unroll, segments, snap_m = std::move(snap_m),
                             snap_a = std::move(snap_a), snap_u = std::move(snap_u)]() {
    const Tensor<ScalarT>& ql2 = tp->value(ql_id);
    const Tensor<ScalarT>& kl2 = tp->value(kl_id);
    const Tensor<ScalarT>& v2 = tp->value(v_id);
    const Tensor<ScalarT>& gout = tp->grad(out_id);
    Tensor<ScalarT>& gql = tp->grad(ql_id);
    Tensor<ScalarT>& gkl = tp->grad(kl_id);
    Tensor<ScalarT>& gv = tp->grad(v_id);
    parallel_for(B * heads, [&](Index bh) {
      const Index b = bh / heads, h = bh % heads;
      detail::RowX<ScalarT> p(Lh);
      const Index snap_base = (b * heads + h) * segments * Lh;
      auto p_row = [&](Index t) {
        latte::detail::head_softmax(ql2.data() + (b * T + t) * L + h * Lh, Lh, p.data());
        return p.data();
      };
      auto dp_sink = [&](Index t, const ScalarT* dp) {
        // Softmax backward for the per-head query distribution.
        ScalarT dot = 0;
        for (Index l = 0; l < Lh; ++l) dot += p[l] * dp[l];
        ScalarT* gql_row = gql.data() + (b * T + t) * L + h * Lh;
        for (Index l = 0; l < Lh; ++l) gql_row[l] += p[l] * (dp[l] - dot);
      };
      detail::latte_branch_backward<ScalarT>(
          T, Lh, Mh, unroll, kl2.data() + b * T * L + h * Lh, L, v2.data() + b * T * Dv + h * Mh,
          Dv, gout.data() + b * T * Dv + h * Mh, Dv, snap_m.data() + snap_base,
          snap_a.data() + snap_base, snap_u.data() + snap_base * Mh, p_row, dp_sink,
          gkl.data() + b * T * L + h * Lh, L, gv.data() + b * T * Dv + h * Mh, Dv);
    });
  });
  return out_id;
}

// Causal depthwise or full convolution over the sequence axis with left zero
// padding. x: (B,T,D); w: (K,D) depthwise or (K,D,D) full.
template <typename ScalarT>
int conv_feature_op(Tape<ScalarT>& tape, int x_id, int w_id) {
  const Tensor<ScalarT>& x = tape.value(x_id);
  const Tensor<ScalarT>& w = tape.value(w_id);
  if (x.rank() != 3) throw std::invalid_argument("conv_feature_op expects (B,T,D) input");
  const Index B = x.extent(0), T = x.extent(1), D = x.extent(2);
  const bool depthwise = w.rank() == 2;
  if (!(depthwise && w.extent(1) == D) && !(w.rank() == 3 && w.extent(1) == D && w.extent(2) == D))
    throw std::invalid_argument("conv_feature_op weights must be (K,D) or (K,D,D)");
  const Index K = w.extent(0);

  Tensor<ScalarT> out = Tensor<ScalarT>::zeros({B, T, D});
  for (Index b = 0; b < B; ++b) {
    ConstMatMap<ScalarT> xb(x.data() + b * T * D, T, D);
    MatMap<ScalarT> ob(out.data() + b * T * D, T, D);
    for (Index i = 0; i < K; ++i) {
      if (depthwise) {
        auto wi = ConstVecMap<ScalarT>(w.data() + i * D, D);
        for (Index t = i; t < T; ++t) ob.row(t) += xb.row(t - i).cwiseProduct(wi.transpose());
      } else {
        ConstMatMap<ScalarT> wi(w.data() + i * D * D, D, D);
        for (Index t = i; t < T; ++t) ob.row(t) += xb.row(t - i) * wi;
      }
    }
  }
  const int out_id = tape.push(std::move(out));
  tape.set_backward(out_id, [tp = &tape, x_id, w_id, out_id, B, T, D, K, depthwise]() {
    const Tensor<ScalarT>& x2 = tp->value(x_id);
    const Tensor<ScalarT>& w2 = tp->value(w_id);
    const Tensor<ScalarT>& gout = tp->grad(out_id);
    Tensor<ScalarT>& gx = tp->grad(x_id);
    Tensor<ScalarT>& gw = tp->grad(w_id);
    for (Index b = 0; b < B; ++b) {
      ConstMatMap<ScalarT> xb(x2.data() + b * T * D, T, D);
      ConstMatMap<ScalarT> gb(gout.data() + b * T * D, T, D);
      MatMap<ScalarT> gxb(gx.data() + b * T * D, T, D);
      for (Index i = 0; i < K; ++i) {
        if (depthwise) {
          auto wi = ConstVecMap<ScalarT>(w2.data() + i * D, D);
          auto gwi = VecMap<ScalarT>(gw.data() + i * D, D);
          for (Index t = i; t < T; ++t) {
            gxb.row(t - i) += gb.row(t).cwiseProduct(wi.transpose());
            gwi += xb.row(t - i).cwiseProduct(gb.row(t)).transpose();
          }
        } else {
          ConstMatMap<ScalarT> wi(w2.data() + i * D * D, D, D);
          MatMap<ScalarT> gwi(gw.data() + i * D * D, D, D);
          for (Index t = i; t < T; ++t) {
            gxb.row(t - i) += gb.row(t) * wi.transpose();
            gwi.noalias() += xb.row(t - i).transpose() * gb.row(t);
          }
        }
      }
    }
  });
  return out_id;
}

// Gated linear recurrence: r = sigmoid(rec), i = sigmoid(inp),
// a = exp(c * r * log_sigmoid(decay)), h_t = a h_{t-1} + sqrt(1-a^2) (i . x).
// rec, inp, x: (B,T,D); decay: (D). Output is h.
template <typename ScalarT>
int rglru_op(Tape<ScalarT>& tape, int rec_id, int inp_id, int x_id, int decay_id,
             double sharpness) {
  const Tensor<ScalarT>& rec = tape.value(rec_id);
  const Tensor<ScalarT>& inp = tape.value(inp_id);
  const Tensor<ScalarT>& x = tape.value(x_id);
  const Tensor<ScalarT>& decay = tape.value(decay_id);
  if (x.rank() != 3 || !rec.same_shape(x) || !inp.same_shape(x))
    throw std::invalid_argument("rglru_op expects matching (B,T,D) streams");
  const Index B = x.extent(0), T = x.extent(1), D = x.extent(2);
  if (decay.rank() != 1 || decay.extent(0) != D)
    throw std::invalid_argument("rglru_op decay must have one entry per channel");
  const ScalarT c = static_cast<ScalarT>(sharpness);

  Tensor<ScalarT> r_all(x.shape()), i_all(x.shape()), a_all(x.shape());
  Tensor<ScalarT> out(x.shape());
  detail::RowX<ScalarT> ls(D);
  for (Index d = 0; d < D; ++d) ls[d] = latte::detail::log_sigmoid(decay[d]);
  parallel_for(B, [&](Index b) {
    detail::RowX<ScalarT> h = detail::RowX<ScalarT>::Zero(D);
    for (Index t = 0; t < T; ++t) {
      const Index base = (b * T + t) * D;
      for (Index d = 0; d < D; ++d) {
        const ScalarT rv = latte::detail::stable_sigmoid(rec[base + d]);
        const ScalarT iv = latte::detail::stable_sigmoid(inp[base + d]);
        const ScalarT a = std::exp(c * rv * ls[d]);
        const ScalarT gate_scale = std::sqrt(std::max(ScalarT(0), ScalarT(1) - a * a));
        r_all[base + d] = rv;
        i_all[base + d] = iv;
        a_all[base + d] = a;
        h[d] = a * h[d] + gate_scale * iv * x[base + d];
        out[base + d] = h[d];
      }
    }
  });

  const int out_id = tape.push(std::move(out));
  tape.set_backward(out_id, [tp = &tape, rec_id, inp_id, x_id, decay_id, out_id, B, T, D, c,
                             r_all = std::move(r_all), i_all = std::move(i_all),
                             a_all = std::move(a_all), ls = std::move(ls)]() {
    const Tensor<ScalarT>& x2 = tp->value(x_id);
    const Tensor<ScalarT>& decay2 = tp->value(decay_id);
    const Tensor<ScalarT>& h_all = tp->value(out_id);
    const Tensor<ScalarT>& gout = tp->grad(out_id);
    Tensor<ScalarT>& grec = tp->grad(rec_id);
    Tensor<ScalarT>& ginp = tp->grad(inp_id);
    Tensor<ScalarT>& gx = tp->grad(x_id);
    Tensor<ScalarT>& gdecay = tp->grad(decay_id);
    Tensor<ScalarT> gdecay_partial = Tensor<ScalarT>::zeros({B, D});
    parallel_for(B, [&](Index b) {
      detail::RowX<ScalarT> carry = detail::RowX<ScalarT>::Zero(D);
      for (Index t = T - 1; t >= 0; --t) {
        const Index base = (b * T + t) * D;
        for (Index d = 0; d < D; ++d) {
          const ScalarT gh = gout[base + d] + carry[d];
          const ScalarT a = a_all[base + d];
          const ScalarT iv = i_all[base + d];
          const ScalarT rv = r_all[base + d];
          const ScalarT gate_scale = std::sqrt(std::max(ScalarT(0), ScalarT(1) - a * a));
          const ScalarT h_prev = t > 0 ? h_all[base - D + d] : ScalarT(0);
          const ScalarT gated = iv * x2[base + d];
          // d gate_scale / d a = -a / gate_scale; dead when the scale underflows.
          ScalarT da = gh * h_prev;
          if (gate_scale > ScalarT(0)) da -= gh * (a / gate_scale) * gated;
          const ScalarT dgated = gh * gate_scale;
          ginp[base + d] += dgated * x2[base + d] * iv * (ScalarT(1) - iv);
          gx[base + d] += dgated * iv;
          grec[base + d] += da * a * c * ls[d] * rv * (ScalarT(1) - rv);
          gdecay_partial(b, d) +=
              da * a * c * rv * latte::detail::stable_sigmoid(-decay2[d]);
          carry[d] = gh * a;
        }
      }
    });
    for (Index b = 0; b < B; ++b)
      for (Index d = 0; d < D; ++d) gdecay[d] += gdecay_partial(b, d);
  });
  return out_id;
}

// Latte-macchiato state mixer: per head, a softmax gate over one sliding
// window attention state plus Lh latte latents. g0: (B,T,H) window-state gate
// logits; ql, kl: (B,T,L); v: (B,T,Dv); q_swa, k_swa: (B,T,Dq). vswa_id names
// the window branch's value stream; passing v_id shares values.
template <typename ScalarT>
int macchiato_mixer(Tape<ScalarT>& tape, int g0_id, int ql_id, int kl_id, int v_id, int vswa_id,
                    int qswa_id, int kswa_id, Index heads, Index window, bool use_rope,
                    Index unroll) {
  const Tensor<ScalarT>& g0 = tape.value(g0_id);
  const Tensor<ScalarT>& ql = tape.value(ql_id);
  const Tensor<ScalarT>& kl = tape.value(kl_id);
  const Tensor<ScalarT>& v = tape.value(v_id);
  const Tensor<ScalarT>& qswa = tape.value(qswa_id);
  const Tensor<ScalarT>& kswa = tape.value(kswa_id);
  if (ql.rank() != 3 || !ql.same_shape(kl) || v.rank() != 3 || qswa.rank() != 3 ||
      !qswa.same_shape(kswa) || g0.rank() != 3 || !tape.value(vswa_id).same_shape(v))
    throw std::invalid_argument("macchiato_mixer stream ranks are wrong");
  const Index B = ql.extent(0), T = ql.extent(1), L = ql.extent(2), Dv = v.extent(2);
  const Index Dq = qswa.extent(2);
  if (g0.extent(2) != heads) throw std::invalid_argument("macchiato_mixer gate stream must be (B,T,H)");
  if (window < 1) throw std::invalid_argument("macchiato_mixer window must be >= 1");
  if (unroll < 1) throw std::invalid_argument("macchiato_mixer unroll must be positive");
  if (heads < 1 || L % heads != 0 || Dv % heads != 0 || Dq % heads != 0)
    throw std::invalid_argument("macchiato_mixer heads must divide stream widths");
  const Index Lh = L / heads, Mh = Dv / heads, dh = Dq / heads;
  if (use_rope && dh % 2 != 0)
    throw std::invalid_argument("macchiato_mixer rope needs an even head dim");
  const Index segments = (T + unroll - 1) / unroll;
  const ScalarT sc = static_cast<ScalarT>(1.0 / std::sqrt(static_cast<double>(dh)));

  Tensor<ScalarT> gate({B, heads, T, Lh + 1});
  Tensor<ScalarT> band = Tensor<ScalarT>::zeros({B, heads, T, window + 1});
  Tensor<ScalarT> snap_m({B, heads, segments, Lh});
  Tensor<ScalarT> snap_a({B, heads, segments, Lh});
  Tensor<ScalarT> snap_u({B, heads, segments, Lh * Mh});
  Tensor<ScalarT> out = Tensor<ScalarT>::zeros({B, T, Dv});
  parallel_for(B * heads, [&](Index bh) {
    const Index b = bh / heads, h = bh % heads;
    MatrixX<ScalarT> qh =
        ConstMatMap<ScalarT>(qswa.data() + b * T * Dq, T, Dq).middleCols(h * dh, dh);
    MatrixX<ScalarT> kh =
        ConstMatMap<ScalarT>(kswa.data() + b * T * Dq, T, Dq).middleCols(h * dh, dh);
    if (use_rope) {
      detail::rope_rotate_rows(qh, false);
      detail::rope_rotate_rows(kh, false);
    }
    const Tensor<ScalarT>& vswa = tape.value(vswa_id);
    auto vh = ConstMatMap<ScalarT>(vswa.data() + b * T * Dv, T, Dv).middleCols(h * Mh, Mh);
    detail::RowX<ScalarT> run_m(Lh), run_a(Lh), glog(Lh + 1), swa_out(Mh), wrow(window + 1);
    MatrixX<ScalarT> run_u = MatrixX<ScalarT>::Zero(Lh, Mh);
    run_a.setZero();
    run_m.setZero();
    for (Index t = 0; t < T; ++t) {
      // Joint gate over the window state and the Lh latents.
      glog[0] = g0(b, t, h);
      for (Index l = 0; l < Lh; ++l) glog[1 + l] = ql[(b * T + t) * L + h * Lh + l];
      ScalarT* gate_row = gate.data() + ((b * heads + h) * T + t) * (Lh + 1);
      latte::detail::head_softmax(glog.data(), Lh + 1, gate_row);
      // Sliding window attention state.
      const Index lo = detail::window_lo(t, window);
      ScalarT mx = qh.row(t).dot(kh.row(lo)) * sc;
      wrow[0] = mx;
      for (Index s = lo + 1; s <= t; ++s) {
        wrow[s - lo] = qh.row(t).dot(kh.row(s)) * sc;
        mx = std::max(mx, wrow[s - lo]);
      }
      ScalarT z = 0;
      for (Index s = lo; s <= t; ++s) z += std::exp(wrow[s - lo] - mx);
      swa_out.setZero();
      ScalarT* band_row = band.data() + ((b * heads + h) * T + t) * (window + 1);
      for (Index s = lo; s <= t; ++s) {
        const ScalarT pw = std::exp(wrow[s - lo] - mx) / z;
        band_row[s - lo] = pw;
        swa_out += pw * vh.row(s);
      }
      Eigen::Map<detail::RowX<ScalarT>> out_row(out.data() + (b * T + t) * Dv + h * Mh, Mh);
      out_row = gate_row[0] * swa_out;
      // Latte latents with the gate tail as mixture weights.
      if (t % unroll == 0) {
        const Index sb = ((b * heads + h) * segments + t / unroll) * Lh;
        for (Index l = 0; l < Lh; ++l) {
          snap_m[sb + l] = run_m[l];
          snap_a[sb + l] = run_a[l];
          for (Index j = 0; j < Mh; ++j) snap_u[sb * Mh + l * Mh + j] = run_u(l, j);
        }
      }
      latte::detail::latte_update_head(run_a.data(), run_u.data(), run_m.data(),
                                       kl.data() + (b * T + t) * L + h * Lh, gate_row + 1,
                                       v.data() + (b * T + t) * Dv + h * Mh, out_row.data(), Lh,
                                       Mh, t == 0);
    }
  });

  const int out_id = tape.push(std::move(out));
  tape.set_backward(out_id, [tp = &tape, g0_id, ql_id, kl_id, v_id, vswa_id, qswa_id, kswa_id,
                             out_id, B, T, L, Dv, Dq, heads, Lh, Mh, dh, window, use_rope, unroll,
                             segments, sc, gate = std::move(gate), band = std::move(band),
                             snap_m = std::move(snap_m), snap_a = std::move(snap_a),
                             snap_u = std::move(snap_u)]() {
    const Tensor<ScalarT>& kl2 = tp->value(kl_id);
    const Tensor<ScalarT>& v2 = tp->value(v_id);
    const Tensor<ScalarT>& vswa2 = tp->value(vswa_id);
    const Tensor<ScalarT>& qswa2 = tp->value(qswa_id);
    const Tensor<ScalarT>& kswa2 = tp->value(kswa_id);
    const Tensor<ScalarT>& gout = tp->grad(out_id);
    Tensor<ScalarT>& gg0 = tp->grad(g0_id);
    Tensor<ScalarT>& gql = tp->grad(ql_id);
    Tensor<ScalarT>& gkl = tp->grad(kl_id);
    Tensor<ScalarT>& gv = tp->grad(v_id);
    Tensor<ScalarT>& gvswa = tp->grad(vswa_id);
    Tensor<ScalarT>& gqswa = tp->grad(qswa_id);
    Tensor<ScalarT>& gkswa = tp->grad(kswa_id);
    parallel_for(B * heads, [&](Index bh) {
      const Index b = bh / heads, h = bh % heads;
      const Index snap_base = (b * heads + h) * segments * Lh;
      // d loss / d gate, filled latents-first by the latte reverse pass and
      // window-first below, then pushed through the joint softmax at the end.
      MatrixX<ScalarT> dgate = MatrixX<ScalarT>::Zero(T, Lh + 1);
      auto p_row = [&](Index t) {
        return gate.data() + ((b * heads + h) * T + t) * (Lh + 1) + 1;
      };
      auto dp_sink = [&](Index t, const ScalarT* dp) {
        for (Index l = 0; l < Lh; ++l) dgate(t, 1 + l) = dp[l];
      };
      detail::latte_branch_backward<ScalarT>(
          T, Lh, Mh, unroll, kl2.data() + b * T * L + h * Lh, L, v2.data() + b * T * Dv + h * Mh,
          Dv, gout.data() + b * T * Dv + h * Mh, Dv, snap_m.data() + snap_base,
          snap_a.data() + snap_base, snap_u.data() + snap_base * Mh, p_row, dp_sink,
          gkl.data() + b * T * L + h * Lh, L, gv.data() + b * T * Dv + h * Mh, Dv);

      MatrixX<ScalarT> qh =
          ConstMatMap<ScalarT>(qswa2.data() + b * T * Dq, T, Dq).middleCols(h * dh, dh);
      MatrixX<ScalarT> kh =
          ConstMatMap<ScalarT>(kswa2.data() + b * T * Dq, T, Dq).middleCols(h * dh, dh);
      if (use_rope) {
        detail::rope_rotate_rows(qh, false);
        detail::rope_rotate_rows(kh, false);
      }
      auto vh = ConstMatMap<ScalarT>(vswa2.data() + b * T * Dv, T, Dv).middleCols(h * Mh, Mh);
      auto gh = ConstMatMap<ScalarT>(gout.data() + b * T * Dv, T, Dv).middleCols(h * Mh, Mh);
      auto gvh = MatMap<ScalarT>(gvswa.data() + b * T * Dv, T, Dv).middleCols(h * Mh, Mh);
      MatrixX<ScalarT> gqh = MatrixX<ScalarT>::Zero(T, dh);
      MatrixX<ScalarT> gkh = MatrixX<ScalarT>::Zero(T, dh);
      detail::RowX<ScalarT> swa_out(Mh), dlogit(window + 1);
      for (Index t = 0; t < T; ++t) {
        const Index lo = detail::window_lo(t, window);
        const ScalarT* band_row = band.data() + ((b * heads + h) * T + t) * (window + 1);
        const ScalarT gate0 = gate[((b * heads + h) * T + t) * (Lh + 1)];
        swa_out.setZero();
        for (Index s = lo; s <= t; ++s) swa_out += band_row[s - lo] * vh.row(s);
        dgate(t, 0) = gh.row(t).cwiseProduct(swa_out).sum();
        ScalarT dot = 0;
        for (Index s = lo; s <= t; ++s) {
          dlogit[s - lo] = gate0 * gh.row(t).cwiseProduct(vh.row(s)).sum();
          dot += band_row[s - lo] * dlogit[s - lo];
          gvh.row(s) += band_row[s - lo] * gate0 * gh.row(t);
        }
        for (Index s = lo; s <= t; ++s) {
          const ScalarT dl = band_row[s - lo] * (dlogit[s - lo] - dot) * sc;
          gqh.row(t) += dl * kh.row(s);
          gkh.row(s) += dl * qh.row(t);
        }
      }
      if (use_rope) {
        detail::rope_rotate_rows(gqh, true);
        detail::rope_rotate_rows(gkh, true);
      }
      MatMap<ScalarT>(gqswa.data() + b * T * Dq, T, Dq).middleCols(h * dh, dh) += gqh;
      MatMap<ScalarT>(gkswa.data() + b * T * Dq, T, Dq).middleCols(h * dh, dh) += gkh;
      // Joint gate softmax backward.
      for (Index t = 0; t < T; ++t) {
        const ScalarT* gate_row = gate.data() + ((b * heads + h) * T + t) * (Lh + 1);
        ScalarT dot = 0;
        for (Index l = 0; l <= Lh; ++l) dot += gate_row[l] * dgate(t, l);
        gg0(b, t, h) += gate_row[0] * (dgate(t, 0) - dot);
        ScalarT* gql_row = gql.data() + (b * T + t) * L + h * Lh;
        for (Index l = 0; l < Lh; ++l)
          gql_row[l] += gate_row[1 + l] * (dgate(t, 1 + l) - dot);
      }
    });
  });
  return out_id;
}

}  // namespace latte::model
