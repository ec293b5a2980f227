#include "sft/sampler.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace sft;

namespace {

std::vector<double> softmax(std::span<const double> z) {
  double m = *std::max_element(z.begin(), z.end()), s = 0.0;
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - m));
  for (double& v : p) v /= s;
  return p;
}

SamplerParams random_params(Rng& rng, std::size_t d, double sd = 1.0) {
  SamplerParams p = SamplerParams::zeros(d);
  p.weight = random_normal(rng, d, 1, sd);
  p.bias(0, 0) = rng.normal() * 0.1;
  return p;
}

double surrogate(const Matrix& v, std::span<const double> y, std::span<const double> u, double tau) {
  const auto pi = softplus_power_weights(y, tau);
  double s = 0.0;
  for (std::size_t i = 0; i < v.rows(); ++i) s += pi[i] * dot(u, v.row(i));
  return s;
}

}  // namespace

TEST(ImportanceScores, Examples) {
  SamplerParams p = SamplerParams::zeros(3);
  p.bias(0, 0) = 3.0;
  Rng rng(1);
  for (double z : importance_scores(random_normal(rng, 5, 3), p)) EXPECT_EQ(z, 3.0);

  p = SamplerParams::zeros(3);
  p.weight = Matrix(3, 1, {1, 2, 3});
  EXPECT_EQ(importance_scores(Matrix::identity(3), p), (std::vector<double>{1, 2, 3}));
}

TEST(ImportanceScores, BruteForce) {
  Rng rng(2);
  const Matrix x = random_normal(rng, 9, 5);
  const SamplerParams p = random_params(rng, 5);
  const auto z = importance_scores(x, p);
  for (std::size_t i = 0; i < 9; ++i) {
    double s = p.bias(0, 0);
    for (std::size_t c = 0; c < 5; ++c) s += x(i, c) * p.weight(c, 0);
    EXPECT_NEAR(z[i], s, 1e-12);
  }
  EXPECT_THROW(importance_scores(random_normal(rng, 2, 4), p), std::invalid_argument);
}

TEST(ChooseOne, DominantScore) {
  const Matrix v(3, 2, {1, 2, 3, 4, 5, 6});
  const std::vector<double> z{10, 0, 0}, g{0, 0, 0};
  const auto c = choose_one(v, z, g, 1.0);
  EXPECT_EQ(c.index, 0u);
  EXPECT_EQ(c.row, (std::vector<double>{1, 2}));
  EXPECT_THROW(choose_one(Matrix(), {}, {}, 1.0), std::invalid_argument);
}

TEST(ChooseOne, GumbelMaxFrequency) {
  Rng rng(3);
  const Matrix v = Matrix::identity(3);
  const std::vector<double> z{1, 0, -1};
  const int draws = 100000;
  int hits = 0;
  for (int t = 0; t < draws; ++t) {
    const auto g = gumbel_draw(rng, 3);
    hits += choose_one(v, z, g, 1.0).index == 0;
  }
  EXPECT_NEAR(softmax(z)[0], 0.6652, 5e-5);
  EXPECT_NEAR(hits / double(draws), 0.6652, 0.01);
}

TEST(ChooseOne, SurrogateGradient) {
  Rng rng(4);
  for (double tau : {1.0, 0.5}) {
    const Matrix v = random_normal(rng, 6, 3);
    std::vector<double> z(6), g(6), u(3);
    for (double& x : z) x = rng.normal();
    for (double& x : g) x = rng.normal();
    for (double& x : u) x = rng.normal();
    const auto c = choose_one(v, z, g, tau);
    const auto grads = c.vjp(u);
    const auto fd = finite_diff_grad(
        [&](std::span<const double> zz) {
          std::vector<double> y(6);
          for (std::size_t i = 0; i < 6; ++i) y[i] = zz[i] + g[i];
          return surrogate(v, y, u, tau);
        },
        z);
    EXPECT_LT(relative_error(grads.dz, fd), 1e-5) << tau;
    // dV[i] = π_i · u
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(grads.dv(i, k), c.weights[i] * u[k], 1e-14);
  }
}

TEST(WithReplacement, KOneIsChooseOne) {
  Rng data(5);
  const Matrix x = random_normal(data, 7, 3);
  const SamplerParams p = random_params(data, 3);
  Rng a(77), b(77);
  const auto s = sample_with_replacement(x, 1, p, a);
  const auto g = gumbel_draw(b, 7);
  const auto c = choose_one(x, importance_scores(x, p), g, p.tau);
  EXPECT_EQ(s.picks[0], c.index);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(s.out(0, k), c.row[k]);
}

TEST(WithReplacement, Saturated) {
  Rng rng(6);
  Matrix x(5, 2);
  x(0, 0) = 1.0;
  SamplerParams p = SamplerParams::zeros(2);
  p.weight(0, 0) = 60.0;  // z0 - others = 60
  const auto s = sample_with_replacement(x, 40, p, rng);
  for (auto i : s.picks) EXPECT_EQ(i, 0u);
  for (std::size_t r = 0; r < 40; ++r) EXPECT_EQ(s.out(r, 0), 1.0);
}

TEST(WithReplacement, HistogramMatchesSoftmax) {
  Rng rng(7);
  const Matrix x = random_normal(rng, 5, 2);
  const SamplerParams p = random_params(rng, 2);
  const auto s = sample_with_replacement(x, 10000, p, rng);
  std::vector<double> freq(5);
  for (auto i : s.picks) freq[i] += 1.0 / 10000;
  const auto q = softmax(importance_scores(x, p));
  double tv = 0.0;
  for (std::size_t i = 0; i < 5; ++i) tv += 0.5 * std::abs(freq[i] - q[i]);
  EXPECT_LT(tv, 0.02);
}

TEST(WithReplacement, GradientScaledByOneOverK) {
  Rng rng(8);
  const Matrix x = random_normal(rng, 4, 2);
  const SamplerParams p = random_params(rng, 2);
  Rng r1(3), r2(3);
  const auto s = sample_with_replacement(x, 3, p, r1);
  Matrix u = random_normal(rng, 3, 2);
  const auto grads = s.vjp(u);
  // Rebuild the three surrogates with the same Gumbel draws.
  std::vector<std::vector<double>> gs;
  for (int r = 0; r < 3; ++r) gs.push_back(gumbel_draw(r2, 4));
  auto f = [&](const Matrix& xx) {
    const auto z = importance_scores(xx, p);
    double tot = 0.0;
    for (int r = 0; r < 3; ++r) {
      std::vector<double> y(4);
      for (int i = 0; i < 4; ++i) y[i] = z[i] + gs[r][i];
      tot += surrogate(xx, y, u.row(r), p.tau);
    }
    return tot / 3.0;
  };
  const auto fd = finite_diff_grad(
      [&](std::span<const double> flat) { return f(Matrix(4, 2, {flat.begin(), flat.end()})); },
      std::vector<double>(x.data().begin(), x.data().end()));
  EXPECT_LT(relative_error(grads.dx.data(), fd), 1e-5);
}

TEST(Duplet, ExamplePlan) {
  const std::vector<double> z{10, 9, -10, -11};
  Rng rng(9);
  const auto plan = make_duplet_plan(z, 2, 1.0, rng);
  EXPECT_EQ(std::set<std::size_t>(plan.idx_top.begin(), plan.idx_top.end()), (std::set<std::size_t>{0, 1}));
  for (double w : plan.w_top) EXPECT_GT(w, 0.9999);
}

TEST(Duplet, EqualScoresGiveHalf) {
  EXPECT_DOUBLE_EQ(duplet_weight(0.7, 0.7, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(duplet_weight(-3.0, -3.0, 0.3), 0.5);
  const std::vector<double> z(8, 1.25);
  Rng rng(10);
  const auto plan = make_duplet_plan(z, 4, 1.0, rng);
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_DOUBLE_EQ(plan.w_top[j], 0.5);
    EXPECT_DOUBLE_EQ(plan.w_rand[j], 0.5);
  }
}

TEST(Duplet, BypassAtFullRate) {
  Rng rng(11);
  const Matrix x = random_normal(rng, 6, 3);
  const SamplerParams p = random_params(rng, 3);
  for (std::size_t k : {6u, 9u}) {
    const auto s = sample_without_replacement(x, k, p, rng, true);
    EXPECT_TRUE(s.plan.bypass);
    EXPECT_TRUE(s.plan.idx_top.empty());
    EXPECT_TRUE(s.plan.idx_rand.empty());
    EXPECT_EQ(s.out, x);
  }
}

TEST(Duplet, RateAboveHalfRejected) {
  Rng rng(12);
  const std::vector<double> z(10, 0.0);
  for (std::size_t k : {6u, 9u}) {
    try {
      make_duplet_plan(z, k, 1.0, rng);
      FAIL() << k;
    } catch (const std::invalid_argument& e) {
      EXPECT_STREQ(e.what(), "sampling rate above 50% unsupported; use bypass");
    }
  }
  EXPECT_NO_THROW(make_duplet_plan(z, 5, 1.0, rng));
}

TEST(Duplet, DisjointAndSegmentProperty) {
  Rng rng(13);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + rng.below(30), k = 1 + rng.below(n / 2);
    const std::size_t d = 1 + rng.below(4);
    const Matrix x = random_normal(rng, n, d);
    const SamplerParams p = random_params(rng, d);
    const auto s = sample_without_replacement(x, k, p, rng, trial % 2 == 0);
    const auto& pl = s.plan;
    ASSERT_FALSE(pl.bypass);
    ASSERT_EQ(pl.idx_top.size(), k);
    ASSERT_EQ(pl.idx_rand.size(), k);
    std::set<std::size_t> s1(pl.idx_top.begin(), pl.idx_top.end()), s2(pl.idx_rand.begin(), pl.idx_rand.end());
    EXPECT_EQ(s1.size(), k);
    EXPECT_EQ(s2.size(), k);
    for (auto i : s1) EXPECT_EQ(s2.count(i), 0u);
    for (std::size_t j = 0; j < k; ++j) {
      EXPECT_NEAR(pl.w_top[j] + pl.w_rand[j], 1.0, 1e-15);
      EXPECT_GT(pl.w_top[j], 0.0);
      EXPECT_LT(pl.w_top[j], 1.0);
      for (std::size_t c = 0; c < d; ++c) {
        const double expect = pl.w_top[j] * x(pl.idx_top[j], c) + pl.w_rand[j] * x(pl.idx_rand[j], c);
        EXPECT_NEAR(s.out(j, c), expect, 1e-12);
      }
    }
    // S1 is the top-k of the scores actually used
    EXPECT_EQ(pl.idx_top, topk_indices(s.scores, k));
  }
}

TEST(Duplet, TrainModeMarginalIsSoftmax) {
  Rng rng(14);
  const Matrix x = random_normal(rng, 4, 2);
  const SamplerParams p = random_params(rng, 2);
  const auto q = softmax(importance_scores(x, p));
  std::vector<double> freq(4);
  const int draws = 100000;
  for (int t = 0; t < draws; ++t) freq[sample_without_replacement(x, 1, p, rng, true).plan.idx_top[0]] += 1.0 / draws;
  double tv = 0.0;
  for (int i = 0; i < 4; ++i) tv += 0.5 * std::abs(freq[i] - q[i]);
  EXPECT_LT(tv, 0.02);
}

TEST(Duplet, EvalDeterminism) {
  Rng data(15);
  const Matrix x = random_normal(data, 12, 3);
  const SamplerParams p = random_params(data, 3);
  Rng a(42), b(42);
  const auto s1 = sample_without_replacement(x, 4, p, a, false);
  const auto s2 = sample_without_replacement(x, 4, p, b, false);
  EXPECT_EQ(s1.plan.idx_top, s2.plan.idx_top);
  EXPECT_EQ(s1.plan.idx_rand, s2.plan.idx_rand);
  EXPECT_EQ(s1.plan.w_top, s2.plan.w_top);
  EXPECT_EQ(s1.out, s2.out);
  EXPECT_EQ(s1.scores, importance_scores(x, p));
}

TEST(Duplet, VjpMatchesFiniteDifferences) {
  Rng rng(16);
  for (double tau : {1.0, 0.7}) {
    const std::size_t n = 10, d = 3, k = 4;
    const Matrix x = random_normal(rng, n, d);
    SamplerParams p = random_params(rng, d);
    p.tau = tau;
    const auto s = sample_without_replacement(x, k, p, rng, false);
    const Matrix u = random_normal(rng, k, d);
    const auto grads = s.vjp(u);

    // Same bins, weights recomputed from perturbed inputs.
    auto objective = [&](const Matrix& xx, const SamplerParams& pp) {
      const auto z = importance_scores(xx, pp);
      SamplePlan plan = s.plan;
      for (std::size_t j = 0; j < k; ++j) {
        plan.w_top[j] = duplet_weight(z[plan.idx_top[j]], z[plan.idx_rand[j]], pp.tau);
        plan.w_rand[j] = 1.0 - plan.w_top[j];
      }
      const Matrix out = blend_rows(xx, plan);
      return dot(out.data(), u.data());
    };
    const auto fd_x = finite_diff_grad(
        [&](std::span<const double> f) { return objective(Matrix(n, d, {f.begin(), f.end()}), p); },
        std::vector<double>(x.data().begin(), x.data().end()));
    EXPECT_LT(relative_error(grads.dx.data(), fd_x), 1e-4);

    std::vector<double> flat(p.weight.data().begin(), p.weight.data().end());
    flat.push_back(p.bias(0, 0));
    const auto fd_p = finite_diff_grad(
        [&](std::span<const double> f) {
          SamplerParams q = p;
          std::copy(f.begin(), f.begin() + d, q.weight.data().begin());
          q.bias(0, 0) = f[d];
          return objective(x, q);
        },
        flat);
    std::vector<double> an(grads.params.weight.data().begin(), grads.params.weight.data().end());
    an.push_back(grads.params.bias(0, 0));
    EXPECT_LT(relative_error(an, fd_p), 1e-4);
  }
}

TEST(SparseRpe, OnesAndSaturated) {
  const std::size_t n = 8, r = 3;
  Tensor3 ones(n, n, r);
  for (double& v : ones.data) v = 1.0;
  const auto xr = RelativeEncoding::dense(ones);
  Rng rng(17);
  std::vector<double> z(n);
  for (double& v : z) v = rng.normal();
  const auto plan = make_duplet_plan(z, 3, 1.0, rng);
  const RelativeTransform id = [](std::span<const double> in, std::span<double> out) {
    std::copy(in.begin(), in.end(), out.begin());
  };
  const auto out = gather_sparse_rpe(xr, plan, id, r);
  for (double v : out.data) EXPECT_NEAR(v, 1.0, 1e-15);

  Tensor3 t(n, n, r);
  for (double& v : t.data) v = rng.normal();
  const auto xr2 = RelativeEncoding::dense(t);
  SamplePlan sat = plan;
  for (std::size_t j = 0; j < sat.size(); ++j) {
    sat.w_top[j] = 1.0;
    sat.w_rand[j] = 0.0;
  }
  const auto top = gather_sparse_rpe(xr2, sat, id, r);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < sat.size(); ++j)
      for (std::size_t c = 0; c < r; ++c) EXPECT_EQ(top(i, j, c), t(i, sat.idx_top[j], c));

  SamplePlan bypass;
  bypass.bypass = true;
  EXPECT_THROW(gather_sparse_rpe(xr, bypass, id, r), std::invalid_argument);
  SamplePlan bad = plan;
  bad.idx_rand[0] = n;
  EXPECT_THROW(gather_sparse_rpe(xr, bad, id, r), std::out_of_range);
}

TEST(SparseRpe, MatchesDensePath) {
  const std::size_t n = 10, r = 2, h = 3, k = n / 2;
  Rng rng(18);
  Tensor3 t(n, n, r);
  for (double& v : t.data) v = rng.normal();
  const Matrix w = random_normal(rng, r, h);
  const RelativeTransform lin = [&](std::span<const double> in, std::span<double> out) {
    for (std::size_t c = 0; c < h; ++c) {
      out[c] = 0.0;
      for (std::size_t q = 0; q < r; ++q) out[c] += in[q] * w(q, c);
      out[c] = softplus(out[c]);
    }
  };
  std::vector<double> z(n);
  for (double& v : z) v = rng.normal();
  const auto plan = make_duplet_plan(z, k, 1.0, rng);

  // Dense path: transform every pair, then restrict and blend.
  Tensor3 full(n, n, h);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) lin(t.fiber(i, j), full.fiber(i, j));

  for (auto xr : {RelativeEncoding::dense(t), [&] {
         auto s = RelativeEncoding::sparse(n, r);
         for (std::size_t i = 0; i < n; ++i)
           for (std::size_t j = 0; j < n; ++j) s.set(i, j, t.fiber(i, j));
         return s;
       }()}) {
    const auto got = gather_sparse_rpe(xr, plan, lin, h);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t c = 0; c < h; ++c) {
          const double want =
              plan.w_top[j] * full(i, plan.idx_top[j], c) + plan.w_rand[j] * full(i, plan.idx_rand[j], c);
          EXPECT_NEAR(got(i, j, c), want, 1e-12);
        }
  }
}
