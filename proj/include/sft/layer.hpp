// One transformer layer built around the sampled attention:
//
//   [LN] → sampler → attention branch → token dropout → residual [LN]
//   [LN] → W1 → GeLU → FFN dropout → W2 → token dropout → residual [LN]
//
// LayerNorm placement is pre, post or none. The sampler runs on the
// (possibly normalized) attention input; keys and values come from the
// duplet blend of those rows.
#pragma once

#include "sft/attention.hpp"
#include "sft/numerics.hpp"
#include "sft/relative_encoding.hpp"
#include "sft/sampler.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sft {

enum class LnPosition { Pre, Post, None };
enum class FfnActivation { Gelu, Linear };

inline std::string to_string(LnPosition p) {
  switch (p) {
    case LnPosition::Pre: return "pre";
    case LnPosition::Post: return "post";
    case LnPosition::None: return "none";
  }
  return "unknown";
}

inline LnPosition parse_ln_position(std::string_view s) {
  if (s == "pre") return LnPosition::Pre;
  if (s == "post") return LnPosition::Post;
  if (s == "none") return LnPosition::None;
  throw std::invalid_argument("unknown LayerNorm position: " + std::string(s));
}

inline std::string to_string(FfnActivation a) { return a == FfnActivation::Gelu ? "gelu" : "linear"; }

inline FfnActivation parse_ffn_activation(std::string_view s) {
  if (s == "gelu") return FfnActivation::Gelu;
  if (s == "linear") return FfnActivation::Linear;
  throw std::invalid_argument("unknown FFN activation: " + std::string(s));
}

struct LayerConfig {
  static constexpr std::size_t kAll = std::numeric_limits<std::size_t>::max();
  static constexpr std::size_t ffn_expansion = 4;

  std::size_t d = 8;
  std::size_t h = 2;
  std::size_t k = kAll;  // sampled keys; k >= n bypasses sampling
  LnPosition ln = LnPosition::Pre;
  double drop_attn = 0.0;
  double drop_token = 0.0;
  double drop_ffn = 0.0;
  AttnMode mode = AttnMode::SftMaxoutLeaky;
  std::size_t rpe_dim = 0;
  FfnActivation ffn_act = FfnActivation::Gelu;
  // When set and the relative encoding is dense, the sampler also sees the
  // per-token channel means of X_R (rpe_dim extra columns).
  bool sampler_rpe_context = true;
  double tau = 1.0;
  bool noisy_topk = true;
  double epsilon = 1e-6;
  double ln_eps = 1e-5;
  std::uint64_t eval_seed = 0x5F7E11ULL;  // stream for S2 in eval mode

  std::size_t sampler_in_dim() const { return d + (sampler_rpe_context ? rpe_dim : 0); }

  void validate() const {
    if (d == 0 || h == 0 || d % h != 0) throw std::invalid_argument("LayerConfig: d must be a positive multiple of h");
    if (k == 0) throw std::invalid_argument("LayerConfig: k must be positive");
    for (double r : {drop_attn, drop_token, drop_ffn})
      if (!(r >= 0.0 && r < 1.0)) throw std::invalid_argument("LayerConfig: dropout rates must lie in [0,1)");
    if (!(tau > 0.0)) throw std::invalid_argument("LayerConfig: tau must be positive");
  }
};

struct LayerParams {
  AttnParams attn;
  SamplerParams sampler;
  Matrix ffn_W1, ffn_B1, ffn_W2, ffn_B2;
  Matrix ln1_gain, ln1_shift, ln2_gain, ln2_shift;

  static LayerParams zeros(const LayerConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.d, f = LayerConfig::ffn_expansion * d;
    LayerParams p;
    p.attn = AttnParams::zeros(d, cfg.h, cfg.rpe_dim, cfg.epsilon);
    p.sampler = SamplerParams::zeros(cfg.sampler_in_dim(), cfg.tau);
    p.ffn_W1 = Matrix(d, f); p.ffn_B1 = Matrix(1, f);
    p.ffn_W2 = Matrix(f, d); p.ffn_B2 = Matrix(1, d);
    p.ln1_gain = Matrix(1, d, 1.0); p.ln1_shift = Matrix(1, d);
    p.ln2_gain = Matrix(1, d, 1.0); p.ln2_shift = Matrix(1, d);
    return p;
  }

  template <class Self, class F>
  static void visit(Self& s, F&& f) {
    s.attn.for_each(f);
    s.sampler.for_each(f);
    f("ffn_W1", s.ffn_W1); f("ffn_B1", s.ffn_B1);
    f("ffn_W2", s.ffn_W2); f("ffn_B2", s.ffn_B2);
    f("ln1_gain", s.ln1_gain); f("ln1_shift", s.ln1_shift);
    f("ln2_gain", s.ln2_gain); f("ln2_shift", s.ln2_shift);
  }
  template <class F> void for_each(F&& f) { visit(*this, f); }
  template <class F> void for_each(F&& f) const { visit(*this, f); }
};

/// He initialization: weights ~ N(0, 2/fan_in), biases 0, LN gain 1 / shift 0.
inline LayerParams init_params(Rng& rng, const LayerConfig& cfg) {
  LayerParams p = LayerParams::zeros(cfg);
  const std::size_t d = cfg.d;
  auto he = [&](Matrix& m, std::size_t fan_in) {
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : m.data()) v = rng.normal() * sd;
  };
  he(p.attn.W_Q, d);
  he(p.attn.W_K, d);
  he(p.attn.W_V, d);
  he(p.attn.W_C, d);
  if (cfg.rpe_dim > 0) {
    he(p.attn.W_Rmul, cfg.rpe_dim);
    he(p.attn.W_Radd, cfg.rpe_dim);
  }
  he(p.attn.W_cat, d);
  he(p.sampler.weight, cfg.sampler_in_dim());
  he(p.ffn_W1, d);
  he(p.ffn_W2, LayerConfig::ffn_expansion * d);
  return p;
}

// ---------------------------------------------------------------------------
// Activations and normalization

/// tanh approximation of GeLU.
inline double gelu(double x) {
  const double c = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  const double c = std::sqrt(2.0 / std::numbers::pi);
  const double t = std::tanh(c * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

struct LnCache {
  Matrix xhat;
  std::vector<double> inv_std;
};

inline Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& shift, double eps, LnCache* cache = nullptr) {
  const std::size_t n = x.rows(), d = x.cols();
  Matrix y(n, d), xhat(n, d);
  std::vector<double> inv(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = x.row(i);
    double mu = 0.0;
    for (double v : r) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : r) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    inv[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat(i, c) = (r[c] - mu) * inv[i];
      y(i, c) = gain(0, c) * xhat(i, c) + shift(0, c);
    }
  }
  if (cache) *cache = LnCache{std::move(xhat), std::move(inv)};
  return y;
}

inline Matrix layer_norm_backward(const LnCache& c, const Matrix& gain, const Matrix& dy, Matrix& dgain, Matrix& dshift) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Matrix dx(n, d);
  std::vector<double> g(d);
  for (std::size_t i = 0; i < n; ++i) {
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::size_t col = 0; col < d; ++col) {
      dgain(0, col) += dy(i, col) * c.xhat(i, col);
      dshift(0, col) += dy(i, col);
      g[col] = dy(i, col) * gain(0, col);
      mean_g += g[col];
      mean_gx += g[col] * c.xhat(i, col);
    }
    mean_g /= static_cast<double>(d);
    mean_gx /= static_cast<double>(d);
    for (std::size_t col = 0; col < d; ++col)
      dx(i, col) = c.inv_std[i] * (g[col] - mean_g - c.xhat(i, col) * mean_gx);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Layer forward / backward

struct LayerCache {
  const LayerParams* params = nullptr;
  std::uint64_t params_hash = 0;
  LayerConfig cfg;
  bool consumed = false;

  LnCache ln1, ln2;
  Matrix sampler_in;         // attention input, plus context columns
  std::vector<double> z;     // scores used by the plan
  SamplePlan plan;
  AttnCache attn;
  Matrix token_mask1, token_mask2, ffn_mask;
  Matrix ffn_in, ffn_pre;    // input to W1 and X·W1 + B1
  Matrix ffn_act;            // after activation and dropout
};

struct LayerGrads {
  LayerParams params;
  Matrix dx;
};

struct LayerForward {
  Matrix out;
  LayerCache cache;
};

/// Per-token channel means of a relative encoding: row i is mean_j X_R[i, j, :].
inline Matrix rpe_row_means(const RelativeEncoding& xr) {
  const std::size_t n = xr.tokens(), r = xr.width();
  Matrix m(n, r);
  std::vector<double> buf(r);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      xr.get(i, j, buf);
      for (std::size_t c = 0; c < r; ++c) m(i, c) += buf[c];
    }
    for (std::size_t c = 0; c < r; ++c) m(i, c) /= static_cast<double>(n);
  }
  return m;
}

namespace detail {

inline void apply_mask(Matrix& x, const Matrix& mask) {
  if (mask.empty()) return;
  for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] *= mask.data()[i];
}

}  // namespace detail

inline LayerForward layer_forward(const Matrix& x, const RelativeEncoding* xr, const LayerParams& p,
                                  const LayerConfig& cfg, Rng& rng, bool train) {
  cfg.validate();
  const std::size_t n = x.rows(), d = cfg.d;
  if (x.cols() != d) throw std::invalid_argument("layer_forward: token width does not match d");
  if (n == 0) throw std::invalid_argument("layer_forward: empty token matrix");
  if ((xr != nullptr) != (cfg.rpe_dim > 0))
    throw std::invalid_argument("layer_forward: relative encoding presence does not match rpe_dim");

  LayerForward res;
  LayerCache& c = res.cache;
  c.params = &p;
  c.params_hash = fingerprint(p);
  c.cfg = cfg;
  const bool pre = cfg.ln == LnPosition::Pre, post = cfg.ln == LnPosition::Post;

  const Matrix a_in = pre ? layer_norm(x, p.ln1_gain, p.ln1_shift, cfg.ln_eps, &c.ln1) : x;

  // Sampler.
  if (cfg.k >= n) {
    c.plan.bypass = true;
  } else {
    if (cfg.sampler_rpe_context && cfg.rpe_dim > 0) {
      const Matrix ctx = xr->storage() == RelativeEncoding::Storage::Dense ? rpe_row_means(*xr)
                                                                           : Matrix(n, cfg.rpe_dim);
      c.sampler_in = hconcat(a_in, ctx);
    } else {
      c.sampler_in = a_in;
    }
    c.z = importance_scores(c.sampler_in, p.sampler);
    if (train) {
      if (cfg.noisy_topk) {
        const auto g = gumbel_draw(rng, n);
        for (std::size_t i = 0; i < n; ++i) c.z[i] += g[i];
      }
      c.plan = make_duplet_plan(c.z, cfg.k, cfg.tau, rng);
    } else {
      Rng eval_rng(cfg.eval_seed);
      c.plan = make_duplet_plan(c.z, cfg.k, cfg.tau, eval_rng);
    }
  }

  auto attn = mha_forward(a_in, xr, p.attn, cfg.mode, &c.plan, rng, train, cfg.drop_attn, /*residual=*/false);
  c.attn = std::move(attn.cache);
  Matrix branch = std::move(attn.out);
  if (train && cfg.drop_token > 0.0) {
    c.token_mask1 = detail::dropout_mask(rng, n, d, cfg.drop_token);
    detail::apply_mask(branch, c.token_mask1);
  }
  Matrix h1 = x + branch;
  if (post) h1 = layer_norm(h1, p.ln1_gain, p.ln1_shift, cfg.ln_eps, &c.ln1);

  c.ffn_in = pre ? layer_norm(h1, p.ln2_gain, p.ln2_shift, cfg.ln_eps, &c.ln2) : h1;
  c.ffn_pre = affine(c.ffn_in, p.ffn_W1, p.ffn_B1);
  c.ffn_act = c.ffn_pre;
  if (cfg.ffn_act == FfnActivation::Gelu)
    for (double& v : c.ffn_act.data()) v = gelu(v);
  if (train && cfg.drop_ffn > 0.0) {
    c.ffn_mask = detail::dropout_mask(rng, n, c.ffn_act.cols(), cfg.drop_ffn);
    detail::apply_mask(c.ffn_act, c.ffn_mask);
  }
  Matrix f = affine(c.ffn_act, p.ffn_W2, p.ffn_B2);
  if (train && cfg.drop_token > 0.0) {
    c.token_mask2 = detail::dropout_mask(rng, n, d, cfg.drop_token);
    detail::apply_mask(f, c.token_mask2);
  }
  Matrix h2 = h1 + f;
  res.out = post ? layer_norm(h2, p.ln2_gain, p.ln2_shift, cfg.ln_eps, &c.ln2) : std::move(h2);
  return res;
}

inline LayerGrads layer_backward(LayerCache& c, const Matrix& upstream) {
  if (c.params == nullptr) throw std::logic_error("layer_backward: empty cache");
  if (c.consumed) throw std::logic_error("layer_backward: cache already consumed");
  if (fingerprint(*c.params) != c.params_hash)
    throw std::logic_error("layer_backward: parameters changed since the forward pass (stale cache)");
  c.consumed = true;
  const LayerParams& p = *c.params;
  const LayerConfig& cfg = c.cfg;
  const bool pre = cfg.ln == LnPosition::Pre, post = cfg.ln == LnPosition::Post;

  LayerGrads g{zeros_like(p), Matrix()};

  // FFN half.
  Matrix dh2 = post ? layer_norm_backward(c.ln2, p.ln2_gain, upstream, g.params.ln2_gain, g.params.ln2_shift) : upstream;
  Matrix dh1 = dh2;
  Matrix df = dh2;
  detail::apply_mask(df, c.token_mask2);
  g.params.ffn_W2 = matmul_tn(c.ffn_act, df);
  g.params.ffn_B2 = column_sums(df);
  Matrix dact = matmul_nt(df, p.ffn_W2);
  detail::apply_mask(dact, c.ffn_mask);
  if (cfg.ffn_act == FfnActivation::Gelu)
    for (std::size_t i = 0; i < dact.size(); ++i) dact.data()[i] *= gelu_grad(c.ffn_pre.data()[i]);
  g.params.ffn_W1 = matmul_tn(c.ffn_in, dact);
  g.params.ffn_B1 = column_sums(dact);
  const Matrix dffn_in = matmul_nt(dact, p.ffn_W1);
  if (pre) dh1 += layer_norm_backward(c.ln2, p.ln2_gain, dffn_in, g.params.ln2_gain, g.params.ln2_shift);
  else dh1 += dffn_in;

  // Attention half.
  Matrix dsum = post ? layer_norm_backward(c.ln1, p.ln1_gain, dh1, g.params.ln1_gain, g.params.ln1_shift) : dh1;
  Matrix dx = dsum;
  Matrix dbranch = dsum;
  detail::apply_mask(dbranch, c.token_mask1);
  AttnGrads ag = mha_backward(c.attn, dbranch);
  g.params.attn = std::move(ag.params);
  Matrix da_in = std::move(ag.dx);

  if (!c.plan.bypass) {
    const auto dz = plan_weight_backward(c.z, c.plan, ag.dw_top, cfg.tau);
    Matrix dsampler_in(c.sampler_in.rows(), c.sampler_in.cols());
    importance_scores_backward(c.sampler_in, p.sampler, dz, dsampler_in, g.params.sampler);
    for (std::size_t i = 0; i < da_in.rows(); ++i)
      for (std::size_t col = 0; col < cfg.d; ++col) da_in(i, col) += dsampler_in(i, col);
  }

  if (pre) dx += layer_norm_backward(c.ln1, p.ln1_gain, da_in, g.params.ln1_gain, g.params.ln1_shift);
  else dx += da_in;
  g.dx = std::move(dx);
  return g;
}

// ---------------------------------------------------------------------------
// Stacks

struct StackLayer {
  LayerParams params;
  LayerConfig cfg;
};

struct StackForward {
  Matrix out;
  std::vector<Matrix> snapshots;  // output of each layer (when requested)
};

inline StackForward stack_forward(const Matrix& x, const RelativeEncoding* xr, const std::vector<StackLayer>& layers,
                                  Rng& rng, bool train, bool keep_snapshots = true) {
  StackForward res;
  res.out = x;
  for (const auto& layer : layers) {
    auto step = layer_forward(res.out, layer.cfg.rpe_dim > 0 ? xr : nullptr, layer.params, layer.cfg, rng, train);
    res.out = std::move(step.out);
    if (keep_snapshots) res.snapshots.push_back(res.out);
  }
  return res;
}

}  // namespace sft
