#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "latte/attention.hpp"
#include "latte/rng.hpp"

#include <cmath>

using namespace latte;

namespace {

template <typename S>
SequenceBatch<S> random_batch(Index B, Index T, Index D, uint64_t seed, double scale = 1.0) {
  Tensor<S> v({B, T, D});
  Rng rng(seed);
  fill_normal(v, rng, 0.0, scale);
  return SequenceBatch<S>(std::move(v));
}

template <typename S>
AttentionParams<S> random_params(Index D, Index Dp, int heads, uint64_t seed) {
  AttentionParams<S> p;
  p.w_q = Tensor<S>({D, Dp});
  p.w_k = Tensor<S>({D, Dp});
  p.w_v = Tensor<S>({D, Dp});
  p.heads = heads;
  Rng rng(seed);
  fill_normal(p.w_q, rng, 0.0, 0.5);
  fill_normal(p.w_k, rng, 0.0, 0.5);
  fill_normal(p.w_v, rng, 0.0, 0.5);
  return p;
}

// Direct masked-softmax oracle, recomputed from scratch with plain loops.
template <typename S>
double swa_row_oracle_diff(const SequenceBatch<S>& x, const AttentionParams<S>& p, Index w,
                           const AttentionMatrix<S>& got) {
  const Index B = x.batch(), T = x.len(), D = x.width();
  const Index H = p.heads, dh = p.head_dim();
  double worst = 0;
  for (Index b = 0; b < B; ++b) {
    MatrixX<S> q = x.item(b) * p.w_q.matrix(D, p.proj_dim());
    MatrixX<S> k = x.item(b) * p.w_k.matrix(D, p.proj_dim());
    for (Index h = 0; h < H; ++h)
      for (Index t = 0; t < T; ++t) {
        const Index lo = std::max<Index>(0, t - w);
        double denom = 0;
        std::vector<double> e(static_cast<size_t>(t - lo + 1));
        double m = -1e300;
        for (Index s = lo; s <= t; ++s) {
          double logit = 0;
          for (Index j = 0; j < dh; ++j)
            logit += static_cast<double>(q(t, h * dh + j)) * static_cast<double>(k(s, h * dh + j));
          logit /= std::sqrt(static_cast<double>(dh));
          e[static_cast<size_t>(s - lo)] = logit;
          m = std::max(m, logit);
        }
        for (auto& v : e) {
          v = std::exp(v - m);
          denom += v;
        }
        for (Index s = 0; s < T; ++s) {
          double expect = (s >= lo && s <= t) ? e[static_cast<size_t>(s - lo)] / denom : 0.0;
          worst = std::max(worst, std::abs(expect - static_cast<double>(got.probs(b, h, t, s))));
        }
      }
  }
  return worst;
}

}  // namespace

TEST_CASE("single token attends to itself") {
  auto x = random_batch<double>(1, 1, 4, 1);
  auto p = random_params<double>(4, 4, 2, 2);
  auto r = softmax_attention(x, p, MaskMode::causal());
  for (int h = 0; h < 2; ++h) CHECK(r.weights.probs(0, h, 0, 0) == doctest::Approx(1.0));
  MatrixX<double> v = x.item(0) * p.w_v.matrix(4, 4);
  for (Index j = 0; j < 4; ++j) CHECK(r.out.values(0, 0, j) == doctest::Approx(v(0, j)));
}

TEST_CASE("identical tokens give uniform causal weights") {
  Tensor<double> vals({1, 5, 3});
  for (Index t = 0; t < 5; ++t)
    for (Index d = 0; d < 3; ++d) vals(0, t, d) = 0.3 * static_cast<double>(d) - 0.1;
  SequenceBatch<double> x(std::move(vals));
  auto p = random_params<double>(3, 4, 1, 9);
  auto r = softmax_attention(x, p, MaskMode::causal());
  for (Index t = 0; t < 5; ++t)
    for (Index s = 0; s <= t; ++s)
      CHECK(r.weights.probs(0, 0, t, s) == doctest::Approx(1.0 / static_cast<double>(t + 1)).epsilon(1e-12));
}

TEST_CASE("two-token analytic row") {
  // scalar width, unit projections: q2.k1 = 0, q2.k2 = ln 2
  Tensor<double> vals({1, 2, 1});
  vals(0, 0, 0) = 0.0;
  vals(0, 1, 0) = std::sqrt(std::log(2.0));
  SequenceBatch<double> x(std::move(vals));
  AttentionParams<double> p;
  p.w_q = Tensor<double>({1, 1}, {1.0});
  p.w_k = Tensor<double>({1, 1}, {1.0});
  p.w_v = Tensor<double>({1, 1}, {1.0});
  p.heads = 1;
  auto r = softmax_attention(x, p, MaskMode::causal(), /*scale=*/false);
  CHECK(r.weights.probs(0, 0, 1, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(r.weights.probs(0, 0, 1, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("window covering the sequence equals causal attention") {
  auto x = random_batch<double>(2, 12, 6, 3);
  auto p = random_params<double>(6, 8, 2, 4);
  auto causal = softmax_attention(x, p, MaskMode::causal());
  for (Index w : {Index(11), Index(12), Index(40)}) {
    auto swa = sliding_window_attention(x, p, w, /*use_rope=*/false);
    CHECK(max_abs_diff(causal.weights.probs, swa.weights.probs) <= 1e-6);
    CHECK(max_abs_diff(causal.out.values, swa.out.values) <= 1e-6);
  }
}

TEST_CASE("window of one holds two admissible positions") {
  Tensor<float> vals = Tensor<float>::full({1, 6, 2}, 0.7f);
  SequenceBatch<float> x(std::move(vals));
  auto p = random_params<float>(2, 2, 1, 5);
  auto r = sliding_window_attention(x, p, 1, false);
  for (Index t = 1; t < 6; ++t) {
    CHECK(r.weights.probs(0, 0, t, t - 1) == doctest::Approx(0.5f));
    CHECK(r.weights.probs(0, 0, t, t) == doctest::Approx(0.5f));
    for (Index s = 0; s + 1 < t; ++s) CHECK(r.weights.probs(0, 0, t, s) == 0.0f);
  }
  CHECK(r.weights.probs(0, 0, 0, 0) == doctest::Approx(1.0f));
}

TEST_CASE("sliding window matches direct masked-softmax oracle") {
  auto x = random_batch<double>(2, 32, 8, 6);
  auto p = random_params<double>(8, 8, 2, 7);
  auto r = sliding_window_attention(x, p, 8, false);
  CHECK(swa_row_oracle_diff(x, p, 8, r.weights) <= 1e-12);
  for (Index b = 0; b < 2; ++b)
    for (Index h = 0; h < 2; ++h)
      for (Index t = 0; t < 32; ++t) {
        double sum = 0;
        int nonzeros = 0;
        for (Index s = 0; s < 32; ++s) {
          double v = r.weights.probs(b, h, t, s);
          sum += v;
          nonzeros += v != 0.0;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(nonzeros <= 9);
      }
}

TEST_CASE("rope at position zero is the identity") {
  Tensor<double> q({1, 1, 1, 6});
  Rng rng(8);
  fill_normal(q, rng);
  auto r = rope_encode(q, {0});
  CHECK(max_abs_diff(q, r) == 0.0);
}

TEST_CASE("rope rotates the unit pair to (cos p, sin p)") {
  for (Index pos : {Index(1), Index(2), Index(13)}) {
    Tensor<double> q({1, 1, 1, 2}, {1.0, 0.0});
    auto r = rope_encode(q, {pos});
    const double p = static_cast<double>(pos);
    CHECK(r(0, 0, 0, 0) == doctest::Approx(std::cos(p)).epsilon(1e-12));
    CHECK(r(0, 0, 0, 1) == doctest::Approx(std::sin(p)).epsilon(1e-12));
  }
}

TEST_CASE("rope inner products depend only on the offset") {
  Rng rng(10);
  Tensor<double> q({1, 1, 1, 8}), k({1, 1, 1, 8});
  fill_normal(q, rng);
  fill_normal(k, rng);
  auto dot = [&](Index m, Index n) {
    auto qm = rope_encode(q, {m});
    auto kn = rope_encode(k, {n});
    double s = 0;
    for (Index j = 0; j < 8; ++j) s += qm[j] * kn[j];
    return s;
  };
  double a = dot(5, 3), b = dot(7, 5);
  CHECK(std::abs(a - b) <= 1e-6 * std::abs(a));
}

TEST_CASE("rope preserves pair norms and rejects odd dims") {
  Tensor<double> q({1, 1, 2, 4});
  Rng rng(12);
  fill_normal(q, rng);
  auto r = rope_encode(q, {3, 9});
  for (Index t = 0; t < 2; ++t)
    for (Index i = 0; i < 2; ++i) {
      double n0 = std::hypot(q(0, 0, t, 2 * i), q(0, 0, t, 2 * i + 1));
      double n1 = std::hypot(r(0, 0, t, 2 * i), r(0, 0, t, 2 * i + 1));
      CHECK(n0 == doctest::Approx(n1).epsilon(1e-12));
    }
  Tensor<double> odd({1, 1, 1, 3});
  CHECK_THROWS(rope_encode(odd, {0}));
}

TEST_CASE("causality: future perturbations leave earlier outputs untouched") {
  auto x = random_batch<double>(1, 10, 4, 20);
  auto p = random_params<double>(4, 4, 2, 21);
  auto base_c = softmax_attention(x, p, MaskMode::causal());
  auto base_w = sliding_window_attention(x, p, 3, true);

  auto x2 = x;
  for (Index d = 0; d < 4; ++d) x2.values(0, 7, d) += 5.0;
  auto pert_c = softmax_attention(x2, p, MaskMode::causal());
  auto pert_w = sliding_window_attention(x2, p, 3, true);
  for (Index t = 0; t < 7; ++t)
    for (Index d = 0; d < 4; ++d) {
      CHECK(base_c.out.values(0, t, d) == pert_c.out.values(0, t, d));
      CHECK(base_w.out.values(0, t, d) == pert_w.out.values(0, t, d));
    }
}

TEST_CASE("row stochasticity holds in all mask modes") {
  auto x = random_batch<float>(2, 16, 6, 30);
  auto p = random_params<float>(6, 8, 2, 31);
  auto check_rows = [&](const AttentionMatrix<float>& w) {
    for (Index b = 0; b < 2; ++b)
      for (Index h = 0; h < 2; ++h)
        for (Index t = 0; t < 16; ++t) {
          double sum = 0;
          for (Index s = 0; s < 16; ++s) {
            CHECK(w.probs(b, h, t, s) >= 0.0f);
            sum += w.probs(b, h, t, s);
          }
          CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
  };
  check_rows(softmax_attention(x, p, MaskMode::causal()).weights);
  check_rows(softmax_attention(x, p, MaskMode::bidirectional()).weights);
  check_rows(sliding_window_attention(x, p, 4, true).weights);
}

TEST_CASE("bidirectional attention is permutation equivariant without rope") {
  const Index T = 9, D = 5;
  auto x = random_batch<double>(1, T, D, 40);
  auto p = random_params<double>(D, 6, 2, 41);
  auto base = softmax_attention(x, p, MaskMode::bidirectional());

  std::vector<Index> perm(T);
  for (Index i = 0; i < T; ++i) perm[static_cast<size_t>(i)] = (i * 4 + 2) % T;  // gcd(4,9)=1
  Tensor<double> shuffled({1, T, D});
  for (Index t = 0; t < T; ++t)
    for (Index d = 0; d < D; ++d) shuffled(0, t, d) = x.values(0, perm[static_cast<size_t>(t)], d);
  auto permuted = softmax_attention(SequenceBatch<double>(std::move(shuffled)), p, MaskMode::bidirectional());
  for (Index t = 0; t < T; ++t)
    for (Index d = 0; d < D; ++d)
      CHECK(permuted.out.values(0, t, d) ==
            doctest::Approx(base.out.values(0, perm[static_cast<size_t>(t)], d)).epsilon(1e-9));
}

TEST_CASE("softmax_attention rejects window masks and bad shapes") {
  auto x = random_batch<double>(1, 4, 4, 50);
  auto p = random_params<double>(4, 4, 1, 51);
  CHECK_THROWS(softmax_attention(x, p, MaskMode::windowed(2)));
  auto bad = random_params<double>(5, 4, 1, 52);
  CHECK_THROWS(softmax_attention(x, bad, MaskMode::causal()));
}
