#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "latte/linear_attention.hpp"
#include "latte/rng.hpp"

#include <Eigen/SVD>
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
AttentionParams<S> random_params(Index D, Index Dp, uint64_t seed, double scale = 0.4) {
  AttentionParams<S> p;
  p.w_q = Tensor<S>({D, Dp});
  p.w_k = Tensor<S>({D, Dp});
  p.w_v = Tensor<S>({D, Dp});
  p.heads = 1;
  Rng rng(seed);
  fill_normal(p.w_q, rng, 0.0, scale);
  fill_normal(p.w_k, rng, 0.0, scale);
  fill_normal(p.w_v, rng, 0.0, scale);
  return p;
}

template <typename S>
FeatureMap<S> random_feature_map(Index Dp, Index L, uint64_t seed, double scale = 0.4) {
  FeatureMap<S> fm;
  fm.projection = Tensor<S>({Dp, L});
  Rng rng(seed);
  fill_normal(fm.projection, rng, 0.0, scale);
  return fm;
}

// Scratch-built oracle: unshifted exponentials, plain loops, no shared code.
struct BruteResult {
  std::vector<double> weights;  // T*T
  std::vector<double> out;      // T*Dp
};

BruteResult brute_linear_attention(const SequenceBatch<double>& x,
                                   const AttentionParams<double>& p,
                                   const FeatureMap<double>& fm, Index b) {
  const Index T = x.len(), D = x.width(), Dp = p.proj_dim(), L = fm.latent_dim();
  BruteResult r;
  r.weights.assign(static_cast<size_t>(T * T), 0.0);
  r.out.assign(static_cast<size_t>(T * Dp), 0.0);
  auto dot = [&](const Tensor<double>& w, Index t, Index col) {
    double s = 0;
    for (Index d = 0; d < D; ++d) s += x.values(b, t, d) * w(d, col);
    return s;
  };
  auto phi = [&](const Tensor<double>& w, Index t, Index l) {
    double logit = 0;
    for (Index j = 0; j < Dp; ++j) logit += dot(w, t, j) * fm.projection(j, l);
    return std::exp(logit);
  };
  for (Index t = 0; t < T; ++t) {
    double denom = 0;
    for (Index s = 0; s <= t; ++s)
      for (Index l = 0; l < L; ++l) denom += phi(p.w_q, t, l) * phi(p.w_k, s, l);
    for (Index s = 0; s <= t; ++s) {
      double num = 0;
      for (Index l = 0; l < L; ++l) num += phi(p.w_q, t, l) * phi(p.w_k, s, l);
      r.weights[static_cast<size_t>(t * T + s)] = num / denom;
      for (Index j = 0; j < Dp; ++j)
        r.out[static_cast<size_t>(t * Dp + j)] += num / denom * dot(p.w_v, s, j);
    }
  }
  return r;
}

}  // namespace

TEST_CASE("feature map of zero input is all ones") {
  auto fm = random_feature_map<double>(5, 7, 1);
  Tensor<double> x = Tensor<double>::zeros({3, 5});
  auto f = feature_map_apply(x, fm);
  for (Index i = 0; i < f.size(); ++i) CHECK(f[i] == 1.0);
}

TEST_CASE("feature map outputs stay strictly positive at magnitude 50") {
  auto fm = random_feature_map<double>(8, 6, 2, 0.2);
  Tensor<double> x({10, 8});
  Rng rng(3);
  fill_normal(x, rng, 0.0, 50.0);
  auto f = feature_map_apply(x, fm);
  CHECK(f.all_finite());
  for (Index i = 0; i < f.size(); ++i) CHECK(f[i] > 0.0);

  // The shifted f32 path stays finite; the rowwise max lands exactly on one.
  Tensor<float> xf = x.template cast<float>();
  FeatureMap<float> fmf{fm.projection.template cast<float>()};
  auto ff = feature_map_apply(xf, fmf, /*shift_rows=*/true);
  CHECK(ff.all_finite());
  for (Index r = 0; r < 10; ++r) {
    float row_max = 0.0f;
    for (Index l = 0; l < 6; ++l) {
      CHECK(ff(r, l) >= 0.0f);
      row_max = std::max(row_max, ff(r, l));
    }
    CHECK(row_max == 1.0f);
  }
}

TEST_CASE("feature inner products are positive") {
  auto fm = random_feature_map<double>(6, 4, 4);
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> xy({2, 6});
    fill_normal(xy, rng, 0.0, 2.0);
    auto f = feature_map_apply(xy, fm);
    double dot = 0;
    for (Index l = 0; l < 4; ++l) dot += f(0, l) * f(1, l);
    CHECK(dot > 0.0);
  }
}

TEST_CASE("direct form: single token") {
  auto x = random_batch<double>(1, 1, 4, 6);
  auto p = random_params<double>(4, 4, 7);
  auto fm = random_feature_map<double>(4, 3, 8);
  auto r = linear_attention_direct(x, p, fm);
  CHECK(r.weights.probs(0, 0, 0, 0) == doctest::Approx(1.0).epsilon(1e-14));
  MatrixX<double> v = x.item(0) * p.w_v.matrix(4, 4);
  for (Index j = 0; j < 4; ++j)
    CHECK(r.out.values(0, 0, j) == doctest::Approx(v(0, j)).epsilon(1e-12));
}

TEST_CASE("direct form: identical tokens give uniform weights") {
  Tensor<double> vals = Tensor<double>::full({1, 6, 3}, 0.4);
  SequenceBatch<double> x(std::move(vals));
  auto p = random_params<double>(3, 4, 9);
  auto fm = random_feature_map<double>(4, 5, 10);
  auto r = linear_attention_direct(x, p, fm);
  for (Index t = 0; t < 6; ++t)
    for (Index s = 0; s <= t; ++s)
      CHECK(r.weights.probs(0, 0, t, s) ==
            doctest::Approx(1.0 / static_cast<double>(t + 1)).epsilon(1e-12));
}

TEST_CASE("direct form matches the scratch oracle and is row-stochastic") {
  auto x = random_batch<double>(2, 16, 6, 11, 0.6);
  auto p = random_params<double>(6, 5, 12);
  auto fm = random_feature_map<double>(5, 4, 13);
  auto r = linear_attention_direct(x, p, fm);
  for (Index b = 0; b < 2; ++b) {
    auto oracle = brute_linear_attention(x, p, fm, b);
    for (Index t = 0; t < 16; ++t) {
      double sum = 0;
      for (Index s = 0; s < 16; ++s) {
        const double got = r.weights.probs(b, 0, t, s);
        CHECK(std::abs(got - oracle.weights[static_cast<size_t>(t * 16 + s)]) <= 1e-12);
        CHECK(got >= 0.0);
        sum += got;
      }
      CHECK(std::abs(sum - 1.0) <= 1e-10);
      for (Index j = 0; j < 5; ++j)
        CHECK(r.out.values(b, t, j) ==
              doctest::Approx(oracle.out[static_cast<size_t>(t * 5 + j)]).epsilon(1e-10));
    }
  }
}

TEST_CASE("degenerate normalization is reported") {
  // Single scalar channel; the first key feature underflows to zero in f32
  // once the global shift centers on the second key.
  Tensor<float> vals({1, 2, 1});
  vals(0, 0, 0) = -240.0f;
  vals(0, 1, 0) = 0.0f;
  SequenceBatch<float> x(std::move(vals));
  AttentionParams<float> p;
  p.w_q = Tensor<float>({1, 1}, {0.0f});
  p.w_k = Tensor<float>({1, 1}, {1.0f});
  p.w_v = Tensor<float>({1, 1}, {1.0f});
  p.heads = 1;
  FeatureMap<float> fm{Tensor<float>({1, 1}, {1.0f})};
  CHECK_THROWS_WITH_AS(linear_attention_direct(x, p, fm), "degenerate normalization",
                       std::runtime_error);
}

TEST_CASE("recurrent form agrees with the direct form") {
  auto x = random_batch<double>(2, 32, 8, 14, 0.5);
  auto p = random_params<double>(8, 16, 15, 0.3);
  auto fm = random_feature_map<double>(16, 8, 16, 0.3);
  auto direct = linear_attention_direct(x, p, fm);
  auto rec = linear_attention_recurrent(x, p, fm);
  CHECK(max_abs_diff(direct.out.values, rec.values) <= 1e-12);

  SequenceBatch<float> xf(x.values.template cast<float>());
  AttentionParams<float> pf;
  pf.w_q = p.w_q.template cast<float>();
  pf.w_k = p.w_k.template cast<float>();
  pf.w_v = p.w_v.template cast<float>();
  pf.heads = 1;
  FeatureMap<float> fmf{fm.projection.template cast<float>()};
  auto direct_f = linear_attention_direct(xf, pf, fmf);
  auto rec_f = linear_attention_recurrent(xf, pf, fmf);
  CHECK(max_abs_diff(direct_f.out.values, rec_f.values) <= 1e-6);
}

TEST_CASE("recurrent form: single token returns its value") {
  auto x = random_batch<double>(1, 1, 4, 17);
  auto p = random_params<double>(4, 6, 18);
  auto fm = random_feature_map<double>(6, 3, 19);
  auto out = linear_attention_recurrent(x, p, fm);
  MatrixX<double> v = x.item(0) * p.w_v.matrix(4, 6);
  for (Index j = 0; j < 6; ++j)
    CHECK(out.values(0, 0, j) == doctest::Approx(v(0, j)).epsilon(1e-12));
}

TEST_CASE("carried state leaves earlier outputs untouched") {
  auto x = random_batch<double>(1, 9, 4, 20, 0.5);
  auto p = random_params<double>(4, 5, 21);
  auto fm = random_feature_map<double>(5, 4, 22);

  LinearAttnState<double> state(5, 4);
  std::vector<VectorX<double>> outs;
  for (Index t = 0; t < 8; ++t) {
    VectorX<double> x_t = x.item(0).row(t).transpose();
    outs.push_back(linear_attention_step(state, x_t, p, fm));
  }
  CHECK(state.t == 8);
  for (Index l = 0; l < 4; ++l) CHECK(state.z[l] > 0.0);

  VectorX<double> x_new = x.item(0).row(8).transpose();
  linear_attention_step(state, x_new, p, fm);
  auto full = linear_attention_recurrent(x, p, fm);
  for (Index t = 0; t < 8; ++t)
    for (Index j = 0; j < 5; ++j) CHECK(outs[static_cast<size_t>(t)](j) == full.values(0, t, j));
}

TEST_CASE("unstabilized path rejects logits outside the overflow envelope") {
  Tensor<float> vals = Tensor<float>::full({1, 3, 1}, 35.0f);
  SequenceBatch<float> x(std::move(vals));
  AttentionParams<float> p;
  p.w_q = Tensor<float>({1, 1}, {1.0f});
  p.w_k = Tensor<float>({1, 1}, {1.0f});
  p.w_v = Tensor<float>({1, 1}, {1.0f});
  p.heads = 1;
  FeatureMap<float> fm{Tensor<float>({1, 1}, {1.0f})};
  CHECK_THROWS_AS(linear_attention_recurrent(x, p, fm), std::domain_error);

  SequenceBatch<double> xd(x.values.cast<double>());
  AttentionParams<double> pd;
  pd.w_q = Tensor<double>({1, 1}, {1.0});
  pd.w_k = Tensor<double>({1, 1}, {1.0});
  pd.w_v = Tensor<double>({1, 1}, {1.0});
  pd.heads = 1;
  FeatureMap<double> fmd{Tensor<double>({1, 1}, {1.0})};
  CHECK_NOTHROW(linear_attention_recurrent(xd, pd, fmd));
  Tensor<double> big = Tensor<double>::full({1, 3, 1}, 710.0);
  CHECK_THROWS_AS(linear_attention_recurrent(SequenceBatch<double>(std::move(big)), pd, fmd),
                  std::domain_error);
}

TEST_CASE("undirected parameterisation reproduces the direct weights") {
  for (uint64_t seed = 0; seed < 8; ++seed) {
    auto x = random_batch<double>(1, 16, 5, 100 + seed, 0.7);
    auto p = random_params<double>(5, 6, 200 + seed);
    auto fm = random_feature_map<double>(6, 4, 300 + seed);
    auto direct = linear_attention_direct(x, p, fm);
    auto undirected = undirected_attention_probs(x, p, fm);
    CHECK(max_abs_diff(direct.weights.probs, undirected.probs) <= 1e-10);
    for (Index t = 0; t < 16; ++t) {
      double sum = 0;
      for (Index s = 0; s < 16; ++s) sum += undirected.probs(0, 0, t, s);
      CHECK(std::abs(sum - 1.0) <= 1e-10);
    }
  }
}

TEST_CASE("single latent makes the weights query-independent") {
  auto x = random_batch<double>(1, 10, 4, 23);
  auto pa = random_params<double>(4, 5, 24);
  auto pb = random_params<double>(4, 5, 25);
  pb.w_k = pa.w_k;
  pb.w_v = pa.w_v;
  auto fm = random_feature_map<double>(5, 1, 26);
  auto wa = undirected_attention_probs(x, pa, fm);
  auto wb = undirected_attention_probs(x, pb, fm);
  CHECK(max_abs_diff(wa.probs, wb.probs) <= 1e-12);
}

TEST_CASE("unmasked feature score matrix has rank at most L") {
  const Index T = 24, L = 6;
  auto x = random_batch<double>(1, T, 8, 27, 0.6);
  auto p = random_params<double>(8, 7, 28);
  auto fm = random_feature_map<double>(7, L, 29);
  MatrixX<double> q = x.item(0) * p.w_q.matrix(8, 7);
  MatrixX<double> k = x.item(0) * p.w_k.matrix(8, 7);
  Tensor<double> qt({T, 7}), kt({T, 7});
  qt.matrix(T, 7) = q;
  kt.matrix(T, 7) = k;
  auto phi_q = feature_map_apply(qt, fm);
  auto phi_k = feature_map_apply(kt, fm);
  MatrixX<double> scores = phi_q.matrix(T, L) * phi_k.matrix(T, L).transpose();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(scores);
  const auto& sv = svd.singularValues();
  CHECK(sv(L) <= 1e-6 * sv(0));
  CHECK(sv(L - 1) > 1e-6 * sv(0));
}

TEST_CASE("headless contract is enforced") {
  auto x = random_batch<double>(1, 4, 4, 30);
  auto p = random_params<double>(4, 4, 31);
  p.heads = 2;
  auto fm = random_feature_map<double>(4, 3, 32);
  CHECK_THROWS(linear_attention_direct(x, p, fm));
  auto fm_bad = random_feature_map<double>(5, 3, 33);
  p.heads = 1;
  CHECK_THROWS(linear_attention_direct(x, p, fm_bad));
}
