// Differentiable token sampling.
//
// Tokens are ranked by a learned linear importance score. Selection is made
// differentiable with a Softplus-power surrogate: the probability of token i
// is Softplus(z_i + g_i)^(1/tau) normalized over the candidates, where g is
// Gumbel noise. Two samplers are provided:
//
//   * sample_with_replacement: k independent hard (argmax) draws whose
//     backward pass goes through the surrogate, scaled by 1/k.
//   * sample_without_replacement: the duplet scheme. The top-k tokens (S1)
//     are paired positionally with k tokens drawn uniformly from the rest
//     (S2); each output row is the Softplus-weighted blend of its pair.
#pragma once

#include "sft/numerics.hpp"
#include "sft/relative_encoding.hpp"

#include <functional>
#include <stdexcept>
#include <vector>

namespace sft {

struct SamplerParams {
  Matrix weight;          // in_dim × 1
  Matrix bias{1, 1};      // 1 × 1
  double tau = 1.0;

  static SamplerParams zeros(std::size_t in_dim, double tau = 1.0) {
    SamplerParams p;
    p.weight = Matrix(in_dim, 1);
    p.bias = Matrix(1, 1);
    p.tau = tau;
    return p;
  }

  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f("W_S", self.weight);
    f("B_S", self.bias);
  }
  template <class F> void for_each(F&& f) { visit(*this, f); }
  template <class F> void for_each(F&& f) const { visit(*this, f); }
};

/// Indices and blend weights produced by the duplet sampler.
struct SamplePlan {
  std::vector<std::size_t> idx_top;
  std::vector<std::size_t> idx_rand;
  std::vector<double> w_top;
  std::vector<double> w_rand;
  bool bypass = false;

  std::size_t size() const { return idx_top.size(); }
};

inline std::vector<double> importance_scores(const Matrix& x, const SamplerParams& p) {
  if (p.weight.rows() != x.cols() || p.weight.cols() != 1)
    throw std::invalid_argument("importance_scores: dimension mismatch between X and W_S");
  std::vector<double> z(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = p.bias(0, 0);
    for (std::size_t c = 0; c < x.cols(); ++c) s += x(i, c) * p.weight(c, 0);
    z[i] = s;
  }
  return z;
}

/// Backward of importance_scores: accumulates into dX, dW_S, dB_S.
inline void importance_scores_backward(const Matrix& x, const SamplerParams& p, std::span<const double> dz,
                                       Matrix& dx, SamplerParams& grads) {
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (dz[i] == 0.0) continue;
    grads.bias(0, 0) += dz[i];
    for (std::size_t c = 0; c < x.cols(); ++c) {
      grads.weight(c, 0) += dz[i] * x(i, c);
      dx(i, c) += dz[i] * p.weight(c, 0);
    }
  }
}

// ---------------------------------------------------------------------------
// Choose one row

struct ChooseOneGrads {
  Matrix dv;
  std::vector<double> dz;
};

struct ChooseOne {
  std::size_t index = 0;
  std::vector<double> row;
  std::vector<double> weights;  // surrogate probabilities
  std::function<ChooseOneGrads(std::span<const double>)> vjp;
};

/// Softplus-power surrogate probabilities Softplus(y_i)^(1/tau) / Σ_j Softplus(y_j)^(1/tau).
inline std::vector<double> softplus_power_weights(std::span<const double> y, double tau) {
  const double p = 1.0 / tau;
  std::vector<double> a(y.size());
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    a[i] = std::pow(softplus(y[i]), p);
    total += a[i];
  }
  for (double& v : a) v /= total;
  return a;
}

/// Hard pick of V[argmax(z + g)]; the returned vjp differentiates the
/// surrogate Σ_i π_i V[i] with π the Softplus-power weights of z + g.
inline ChooseOne choose_one(const Matrix& v, std::span<const double> z, std::span<const double> g, double tau) {
  if (v.rows() == 0 || z.empty()) throw std::invalid_argument("choose_one: empty input");
  if (z.size() != v.rows() || g.size() != v.rows()) throw std::invalid_argument("choose_one: length mismatch");
  if (!(tau > 0.0)) throw std::invalid_argument("choose_one: tau must be positive");
  std::vector<double> y(z.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = z[i] + g[i];

  ChooseOne out;
  out.index = argmax(y);
  out.row.assign(v.row(out.index).begin(), v.row(out.index).end());
  out.weights = softplus_power_weights(y, tau);
  out.vjp = [v, y, pi = out.weights, tau](std::span<const double> upstream) {
    const std::size_t n = v.rows();
    const double p = 1.0 / tau;
    ChooseOneGrads grads{Matrix(n, v.cols()), std::vector<double>(n)};
    std::vector<double> dpi(n);
    double weighted = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < v.cols(); ++c) grads.dv(i, c) = pi[i] * upstream[c];
      dpi[i] = dot(upstream, v.row(i));
      weighted += dpi[i] * pi[i];
    }
    // π_i = a_i / Σa with a_i = Softplus(y_i)^p.
    double total = 0.0;
    std::vector<double> a(n);
    for (std::size_t i = 0; i < n; ++i) total += (a[i] = std::pow(softplus(y[i]), p));
    for (std::size_t i = 0; i < n; ++i) {
      const double da = (dpi[i] - weighted) / total;
      grads.dz[i] = da * p * a[i] / softplus(y[i]) * sigmoid(y[i]);
    }
    return grads;
  };
  return out;
}

// ---------------------------------------------------------------------------
// Sampling with replacement (reference path)

struct SamplerGrads {
  Matrix dx;
  SamplerParams params;
};

struct ReplacementSample {
  Matrix out;
  std::vector<std::size_t> picks;
  std::function<SamplerGrads(const Matrix&)> vjp;
};

inline ReplacementSample sample_with_replacement(const Matrix& x, std::size_t k, const SamplerParams& p, Rng& rng) {
  if (k == 0) throw std::invalid_argument("sample_with_replacement: k must be positive");
  const auto z = importance_scores(x, p);
  ReplacementSample res;
  res.out = Matrix(k, x.cols());
  std::vector<ChooseOne> draws;
  draws.reserve(k);
  for (std::size_t r = 0; r < k; ++r) {
    const auto g = gumbel_draw(rng, x.rows());
    draws.push_back(choose_one(x, z, g, p.tau));
    std::copy(draws.back().row.begin(), draws.back().row.end(), res.out.row(r).begin());
    res.picks.push_back(draws.back().index);
  }
  res.vjp = [x, p, draws = std::move(draws), k](const Matrix& upstream) {
    SamplerGrads grads{Matrix(x.rows(), x.cols()), SamplerParams::zeros(x.cols(), p.tau)};
    std::vector<double> dz(x.rows(), 0.0);
    for (std::size_t r = 0; r < k; ++r) {
      const auto g = draws[r].vjp(upstream.row(r));
      grads.dx += g.dv;
      for (std::size_t i = 0; i < dz.size(); ++i) dz[i] += g.dz[i];
    }
    importance_scores_backward(x, p, dz, grads.dx, grads.params);
    const double scale = 1.0 / static_cast<double>(k);
    grads.dx *= scale;
    grads.params.weight *= scale;
    grads.params.bias *= scale;
    return grads;
  };
  return res;
}

// ---------------------------------------------------------------------------
// Sampling without replacement (duplets)

/// Weight of the top token in a bin: a^(1/tau) / (a^(1/tau) + b^(1/tau))
/// with a, b the Softplus of the two scores.
inline double duplet_weight(double z_top, double z_rand, double tau) {
  const double p = 1.0 / tau;
  const double a = std::pow(softplus(z_top), p);
  const double b = std::pow(softplus(z_rand), p);
  return a / (a + b);
}

/// Builds a duplet plan from (already perturbed) scores. Returns a bypass plan
/// when k >= n.
inline SamplePlan make_duplet_plan(std::span<const double> z, std::size_t k, double tau, Rng& rng) {
  const std::size_t n = z.size();
  if (k == 0) throw std::invalid_argument("sampler: k must be positive");
  SamplePlan plan;
  if (k >= n) {
    plan.bypass = true;
    return plan;
  }
  if (2 * k > n) throw std::invalid_argument("sampling rate above 50% unsupported; use bypass");

  plan.idx_top = topk_indices(z, k);
  std::vector<bool> taken(n, false);
  for (auto i : plan.idx_top) taken[i] = true;
  std::vector<std::size_t> rest;
  rest.reserve(n - k);
  for (std::size_t i = 0; i < n; ++i)
    if (!taken[i]) rest.push_back(i);
  // Partial Fisher-Yates over the complement.
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t pick = j + rng.below(rest.size() - j);
    std::swap(rest[j], rest[pick]);
    plan.idx_rand.push_back(rest[j]);
  }
  for (std::size_t j = 0; j < k; ++j) {
    const double w = duplet_weight(z[plan.idx_top[j]], z[plan.idx_rand[j]], tau);
    plan.w_top.push_back(w);
    plan.w_rand.push_back(1.0 - w);
  }
  return plan;
}

/// Row j of the result is w_top[j]·X[top_j] + w_rand[j]·X[rand_j].
inline Matrix blend_rows(const Matrix& x, const SamplePlan& plan) {
  if (plan.bypass) return x;
  Matrix out(plan.size(), x.cols());
  for (std::size_t j = 0; j < plan.size(); ++j) {
    const auto a = x.row(plan.idx_top[j]);
    const auto b = x.row(plan.idx_rand[j]);
    auto o = out.row(j);
    for (std::size_t c = 0; c < x.cols(); ++c) o[c] = plan.w_top[j] * a[c] + plan.w_rand[j] * b[c];
  }
  return out;
}

/// Backward of blend_rows: accumulates into dx and returns dL/dw_top per bin
/// (w_rand = 1 − w_top).
inline std::vector<double> blend_rows_backward(const Matrix& x, const SamplePlan& plan, const Matrix& dout,
                                               Matrix& dx) {
  std::vector<double> dw(plan.size(), 0.0);
  for (std::size_t j = 0; j < plan.size(); ++j) {
    const auto a = x.row(plan.idx_top[j]);
    const auto b = x.row(plan.idx_rand[j]);
    const auto g = dout.row(j);
    auto da = dx.row(plan.idx_top[j]);
    auto db = dx.row(plan.idx_rand[j]);
    double s = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      da[c] += plan.w_top[j] * g[c];
      db[c] += plan.w_rand[j] * g[c];
      s += g[c] * (a[c] - b[c]);
    }
    dw[j] = s;
  }
  return dw;
}

/// Chain rule from dL/dw_top to dL/dz through duplet_weight.
inline std::vector<double> plan_weight_backward(std::span<const double> z, const SamplePlan& plan,
                                                std::span<const double> dw_top, double tau) {
  const double p = 1.0 / tau;
  std::vector<double> dz(z.size(), 0.0);
  for (std::size_t j = 0; j < plan.size(); ++j) {
    const double w = plan.w_top[j];
    const double common = dw_top[j] * w * (1.0 - w) * p;
    const std::size_t t = plan.idx_top[j], r = plan.idx_rand[j];
    // d log(Softplus(z))/dz = sigmoid(z) / Softplus(z)
    dz[t] += common * sigmoid(z[t]) / softplus(z[t]);
    dz[r] -= common * sigmoid(z[r]) / softplus(z[r]);
  }
  return dz;
}

struct DupletSample {
  SamplePlan plan;
  Matrix out;
  std::vector<double> scores;  // scores used for ranking and weights (noisy in train mode)
  std::function<SamplerGrads(const Matrix&)> vjp;
};

/// Duplet sampling of k rows from x. Gumbel noise is added to the scores in
/// train mode when noisy_topk is set; in eval mode the plan depends only on
/// x, p, and the stream used for S2.
inline DupletSample sample_without_replacement(const Matrix& x, std::size_t k, const SamplerParams& p, Rng& rng,
                                               bool train, bool noisy_topk = true) {
  DupletSample res;
  res.scores = importance_scores(x, p);
  if (train && noisy_topk && k < x.rows()) {
    const auto g = gumbel_draw(rng, x.rows());
    for (std::size_t i = 0; i < g.size(); ++i) res.scores[i] += g[i];
  }
  res.plan = make_duplet_plan(res.scores, k, p.tau, rng);
  res.out = blend_rows(x, res.plan);
  res.vjp = [x, p, plan = res.plan, z = res.scores](const Matrix& upstream) {
    SamplerGrads grads{Matrix(x.rows(), x.cols()), SamplerParams::zeros(x.cols(), p.tau)};
    if (plan.bypass) {
      grads.dx = upstream;
      return grads;
    }
    const auto dw = blend_rows_backward(x, plan, upstream, grads.dx);
    const auto dz = plan_weight_backward(z, plan, dw, p.tau);
    importance_scores_backward(x, p, dz, grads.dx, grads.params);
    return grads;
  };
  return res;
}

// ---------------------------------------------------------------------------
// Sparse relative features

using RelativeTransform = std::function<void(std::span<const double>, std::span<double>)>;

/// n×k×h tensor of blended, separately transformed relative features:
/// w_top[j]·T(X_R[i, top_j]) + w_rand[j]·T(X_R[i, rand_j]).
inline Tensor3 gather_sparse_rpe(const RelativeEncoding& xr, const SamplePlan& plan, const RelativeTransform& transform,
                                 std::size_t out_width) {
  if (plan.bypass) throw std::invalid_argument("gather_sparse_rpe: plan is a bypass plan");
  const std::size_t n = xr.tokens(), k = plan.size();
  Tensor3 out(n, k, out_width);
  std::vector<double> in(xr.width()), top(out_width), rnd(out_width);
  for (std::size_t j = 0; j < k; ++j) {
    if (plan.idx_top[j] >= n || plan.idx_rand[j] >= n) throw std::out_of_range("gather_sparse_rpe: index out of range");
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      xr.get(i, plan.idx_top[j], in);
      transform(in, top);
      xr.get(i, plan.idx_rand[j], in);
      transform(in, rnd);
      auto o = out.fiber(i, j);
      for (std::size_t c = 0; c < out_width; ++c) o[c] = plan.w_top[j] * top[c] + plan.w_rand[j] * rnd[c];
    }
  }
  return out;
}

}  // namespace sft
