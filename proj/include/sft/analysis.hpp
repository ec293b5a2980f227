// Experiment engines: rank and similarity probes, the pseudoconvexity audit,
// the softmax counterexample, gradient-norm scaling, wall-clock timing of the
// attention sublayer and analytic operation counts.
#pragma once

#include "sft/attention.hpp"
#include "sft/gradcheck.hpp"
#include "sft/layer.hpp"
#include "sft/numerics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sft {

// ---------------------------------------------------------------------------
// Rank progression

struct RankConfig {
  std::size_t n = 64;
  std::size_t d = 64;
  std::size_t layers = 50;
  std::size_t trials = 10;
  AttnMode mode = AttnMode::SftMaxoutLeaky;
  bool use_rpe = true;
  double rel_tol = 1e-6;
  LnPosition ln = LnPosition::Post;
  std::uint64_t seed = 0;
};

struct RankRow {
  std::size_t layer = 0;  // 0 = input
  double mean = 0.0;
  std::size_t min = 0, max = 0;
};

inline LayerConfig rank_layer_config(const RankConfig& rc) {
  LayerConfig cfg;
  cfg.d = rc.d;
  cfg.h = 1;
  cfg.k = LayerConfig::kAll;
  cfg.ln = rc.ln;
  cfg.mode = rc.mode;
  cfg.rpe_dim = rc.use_rpe ? 1 : 0;
  return cfg;
}

/// Rank-1 input (one U(-1,1) row repeated), one N(0,1) relative matrix per
/// trial, freshly initialized layers applied in eval mode.
inline std::vector<RankRow> rank_progression(const RankConfig& rc) {
  if (rc.trials == 0) throw std::invalid_argument("rank_progression: trials must be positive");
  const LayerConfig cfg = rank_layer_config(rc);
  std::vector<std::vector<std::size_t>> ranks(rc.layers + 1);
  Rng base(rc.seed);
  for (std::size_t t = 0; t < rc.trials; ++t) {
    Rng rng = base.split(t);
    std::vector<double> row(rc.d);
    for (double& v : row) v = 2.0 * rng.uniform() - 1.0;
    Matrix x(rc.n, rc.d);
    for (std::size_t i = 0; i < rc.n; ++i) std::copy(row.begin(), row.end(), x.row(i).begin());
    std::optional<RelativeEncoding> xr;
    if (rc.use_rpe) xr = random_dense_rpe(rng, rc.n, 1);
    ranks[0].push_back(numerical_rank(x, rc.rel_tol));
    Matrix cur = x;
    for (std::size_t l = 0; l < rc.layers; ++l) {
      const LayerParams p = init_params(rng, cfg);
      cur = layer_forward(cur, xr ? &*xr : nullptr, p, cfg, rng, false).out;
      ranks[l + 1].push_back(numerical_rank(cur, rc.rel_tol));
    }
  }
  std::vector<RankRow> table;
  for (std::size_t l = 0; l <= rc.layers; ++l) {
    RankRow r{l, 0.0, *std::min_element(ranks[l].begin(), ranks[l].end()),
              *std::max_element(ranks[l].begin(), ranks[l].end())};
    for (auto v : ranks[l]) r.mean += static_cast<double>(v);
    r.mean /= static_cast<double>(ranks[l].size());
    table.push_back(r);
  }
  return table;
}

// ---------------------------------------------------------------------------
// Similarity progression

struct SimilarityRow {
  std::size_t layer = 0;
  double mean_cosine = 0.0;
  std::size_t rank = 0;
};

/// Per layer (input included) mean pairwise cosine and numerical rank of the
/// token embeddings, averaged over the batch.
inline std::vector<SimilarityRow> similarity_progression(const std::vector<StackLayer>& stack,
                                                         const std::vector<Matrix>& inputs,
                                                         const std::vector<const RelativeEncoding*>& encodings,
                                                         double rel_tol = 1e-6) {
  if (inputs.empty() || inputs.size() != encodings.size())
    throw std::invalid_argument("similarity_progression: inputs and encodings must be non-empty and aligned");
  std::vector<double> cos(stack.size() + 1, 0.0), rank(stack.size() + 1, 0.0);
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    Rng rng(0);
    const auto fwd = stack_forward(inputs[b], encodings[b], stack, rng, false, true);
    cos[0] += mean_pairwise_cosine(inputs[b]);
    rank[0] += static_cast<double>(numerical_rank(inputs[b], rel_tol));
    for (std::size_t l = 0; l < stack.size(); ++l) {
      cos[l + 1] += mean_pairwise_cosine(fwd.snapshots[l]);
      rank[l + 1] += static_cast<double>(numerical_rank(fwd.snapshots[l], rel_tol));
    }
  }
  std::vector<SimilarityRow> table;
  const double nb = static_cast<double>(inputs.size());
  for (std::size_t l = 0; l <= stack.size(); ++l)
    table.push_back({l, cos[l] / nb, static_cast<std::size_t>(std::lround(rank[l] / nb))});
  return table;
}

// ---------------------------------------------------------------------------
// Pseudoconvexity audit

enum class PcGroup { QK, Rpe, Leak, QKEntryPair };

inline PcGroup parse_pc_group(std::string_view s) {
  if (s == "qk") return PcGroup::QK;
  if (s == "rpe") return PcGroup::Rpe;
  if (s == "leak") return PcGroup::Leak;
  if (s == "qk_entry_pair") return PcGroup::QKEntryPair;
  throw std::invalid_argument("unsupported group");
}

inline std::string to_string(PcGroup g) {
  switch (g) {
    case PcGroup::QK: return "qk";
    case PcGroup::Rpe: return "rpe";
    case PcGroup::Leak: return "leak";
    case PcGroup::QKEntryPair: return "qk_entry_pair";
  }
  return "unknown";
}

struct PcConfig {
  PcGroup group = PcGroup::QK;
  AttnMode mode = AttnMode::SftMaxoutLeaky;
  FfnActivation ffn_act = FfnActivation::Linear;
  std::size_t n = 5;
  std::size_t d = 4;
  std::size_t rpe_dim = 2;
  std::size_t n_pairs = 10000;
  double step_scale = 0.05;
  double tol = 1e-8;
  bool gate_restricted = true;
  std::uint64_t seed = 0;
};

struct PseudoconvexityReport {
  std::string group;
  std::size_t pairs_tested = 0;
  std::size_t implications_triggered = 0;
  std::size_t violations = 0;
  double max_violation = 0.0;
  bool gate_restricted = false;
  std::size_t resamples = 0;    // rejected directions (gate flips)
  double mean_step = 0.0;       // mean step scale actually used
};

/// A single-head, unsampled, unnormalized layer evaluated in eval mode; the
/// audited function is one output coordinate as a function of one group.
struct PcProbe {
  LayerConfig cfg;
  LayerParams params;
  Matrix x;
  std::optional<RelativeEncoding> xr;
  std::size_t row = 0, col = 0;
  PcGroup group = PcGroup::QK;

  std::vector<Matrix*> group_tensors() {
    auto& a = params.attn;
    switch (group) {
      case PcGroup::QK: return {&a.W_Q, &a.B_Q, &a.W_K, &a.B_K};
      case PcGroup::Rpe: return {&a.W_Rmul, &a.B_Rmul, &a.W_Radd, &a.B_Radd};
      case PcGroup::Leak: return {&a.W_C, &a.B_C};
      case PcGroup::QKEntryPair: return {&a.W_Q, &a.W_K};
    }
    return {};
  }

  std::vector<double> get() {
    if (group == PcGroup::QKEntryPair) return {params.attn.W_Q(0, 0), params.attn.W_K(0, 0)};
    std::vector<double> v;
    for (Matrix* m : group_tensors()) v.insert(v.end(), m->data().begin(), m->data().end());
    return v;
  }

  void set(std::span<const double> v) {
    if (group == PcGroup::QKEntryPair) {
      params.attn.W_Q(0, 0) = v[0];
      params.attn.W_K(0, 0) = v[1];
      return;
    }
    std::size_t off = 0;
    for (Matrix* m : group_tensors()) {
      std::copy(v.begin() + static_cast<std::ptrdiff_t>(off), v.begin() + static_cast<std::ptrdiff_t>(off + m->size()),
                m->data().begin());
      off += m->size();
    }
  }

  const RelativeEncoding* rpe() const { return xr ? &*xr : nullptr; }

  struct Eval {
    double value = 0.0;
    std::vector<double> grad;
    std::vector<char> gates;
  };

  Eval eval(bool with_grad) {
    Rng rng(0);
    auto fwd = layer_forward(x, rpe(), params, cfg, rng, false);
    Eval e;
    e.value = fwd.out(row, col);
    const auto& ac = fwd.cache.attn;
    const std::size_t n = ac.q.rows(), m = ac.k.rows(), d = ac.q.cols();
    if (cfg.mode == AttnMode::SftMaxoutLeaky)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
          for (std::size_t c = 0; c < d; ++c) e.gates.push_back(ac.q(i, c) >= ac.k(j, c));
    for (const auto& s : ac.score_rpe)
      for (double v : s.data()) e.gates.push_back(v > 0.0);
    if (with_grad) {
      Matrix up(x.rows(), x.cols());
      up(row, col) = 1.0;
      const auto g = layer_backward(fwd.cache, up);
      LayerParams gp = g.params;
      if (group == PcGroup::QKEntryPair) {
        e.grad = {gp.attn.W_Q(0, 0), gp.attn.W_K(0, 0)};
      } else {
        PcProbe shadow{cfg, std::move(gp), Matrix(), std::nullopt, 0, 0, group};
        e.grad = shadow.get();
      }
    }
    return e;
  }
};

inline PcProbe make_pc_probe(const PcConfig& pc, Rng& rng) {
  PcProbe p;
  p.group = pc.group;
  p.cfg.h = 1;
  p.cfg.k = LayerConfig::kAll;
  p.cfg.ln = LnPosition::None;
  p.cfg.mode = pc.mode;
  p.cfg.ffn_act = pc.ffn_act;
  if (pc.group == PcGroup::QKEntryPair) {
    // X = W_V = W_cat = I₃; only W_Q[0,0] and W_K[0,0] vary. Output [0,1]
    // is then 1 / (exp(w_q·w_k/√3) + 2) in softmax mode.
    p.cfg.d = 3;
    p.cfg.rpe_dim = 0;
    p.params = LayerParams::zeros(p.cfg);
    p.params.attn.W_V = Matrix::identity(3);
    p.params.attn.W_cat = Matrix::identity(3);
    p.x = Matrix::identity(3);
    p.row = 0;
    p.col = 1;
    return p;
  }
  p.cfg.d = pc.d;
  p.cfg.rpe_dim = pc.rpe_dim;
  p.params = random_layer_params(rng, p.cfg);
  p.x = random_normal(rng, pc.n, pc.d);
  if (pc.rpe_dim > 0) p.xr = random_dense_rpe(rng, pc.n, pc.rpe_dim);
  p.row = rng.below(pc.n);
  p.col = rng.below(pc.d);
  return p;
}

/// Pairs (x1, x2 = x1 + step·δ) with δ ~ N(0, I). A violation is a pair with
/// ⟨∇f(x1), x2 − x1⟩ ≥ 0 and f(x2) < f(x1) − tol. With gate restriction, δ
/// is redrawn (and the step halved after 64 failures) until the max and
/// ReLU gate patterns at x2 equal those at x1.
inline PseudoconvexityReport pseudoconvexity_check(const PcConfig& pc) {
  if (pc.group == PcGroup::Leak && pc.mode != AttnMode::SftMaxoutLeaky) throw std::invalid_argument("unsupported group");
  if (pc.group == PcGroup::Rpe && pc.rpe_dim == 0) throw std::invalid_argument("unsupported group");
  if (!(pc.step_scale >= 0.0)) throw std::invalid_argument("pseudoconvexity_check: step_scale must be non-negative");
  PseudoconvexityReport rep;
  rep.group = to_string(pc.group);
  rep.gate_restricted = pc.gate_restricted;
  Rng base(pc.seed);
  double step_total = 0.0;
  for (std::size_t t = 0; t < pc.n_pairs; ++t) {
    Rng rng = base.split(t);
    PcProbe probe = make_pc_probe(pc, rng);
    if (pc.group == PcGroup::QKEntryPair) {
      probe.params.attn.W_Q(0, 0) = 2.0 * rng.normal();
      probe.params.attn.W_K(0, 0) = 2.0 * rng.normal();
    }
    const std::vector<double> x1 = probe.get();
    const auto e1 = probe.eval(true);

    double step = pc.step_scale;
    std::vector<double> x2(x1.size());
    std::size_t attempts = 0;
    for (;;) {
      for (std::size_t i = 0; i < x1.size(); ++i) x2[i] = x1[i] + step * rng.normal();
      if (!pc.gate_restricted) break;
      probe.set(x2);
      const auto e2 = probe.eval(false);
      if (e2.gates == e1.gates) break;
      ++rep.resamples;
      if (++attempts % 64 == 0) step *= 0.5;
    }
    probe.set(x2);
    const double f2 = probe.eval(false).value;
    step_total += step;

    double directional = 0.0;
    for (std::size_t i = 0; i < x1.size(); ++i) directional += e1.grad[i] * (x2[i] - x1[i]);
    ++rep.pairs_tested;
    if (directional >= 0.0) {
      ++rep.implications_triggered;
      const double drop = e1.value - f2;
      if (drop > pc.tol) {
        ++rep.violations;
        rep.max_violation = std::max(rep.max_violation, drop);
      }
    }
  }
  rep.mean_step = rep.pairs_tested ? step_total / static_cast<double>(rep.pairs_tested) : 0.0;
  return rep;
}

struct OrthantReport {
  std::size_t pairs_tested = 0, implications_triggered = 0, violations = 0;
  double max_violation = 0.0;
};

/// Audit of x ↦ ReLU(x[i]) / (Σ_k ReLU(x[k]) + c) jointly in (x, c), with
/// both points drawn in the same orthant of x and c > 0.
inline OrthantReport leaky_prob_orthant_audit(std::size_t n, std::size_t pairs, double tol, std::uint64_t seed) {
  Rng rng(seed);
  OrthantReport rep;
  auto f = [&](const std::vector<double>& v) {
    double denom = v[n];
    for (std::size_t k = 0; k < n; ++k) denom += relu(v[k]);
    return relu(v[0]) / denom;
  };
  for (std::size_t t = 0; t < pairs; ++t) {
    std::vector<double> sign(n), a(n + 1), b(n + 1);
    for (std::size_t k = 0; k < n; ++k) {
      sign[k] = rng.uniform() < 0.5 ? -1.0 : 1.0;
      a[k] = sign[k] * -std::log(rng.uniform_open());
      b[k] = sign[k] * -std::log(rng.uniform_open());
    }
    a[n] = -std::log(rng.uniform_open());
    b[n] = -std::log(rng.uniform_open());
    // Analytic gradient at a.
    double denom = a[n];
    for (std::size_t k = 0; k < n; ++k) denom += relu(a[k]);
    const double num = relu(a[0]);
    std::vector<double> g(n + 1, 0.0);
    for (std::size_t k = 0; k < n; ++k)
      if (a[k] > 0.0) g[k] = ((k == 0 ? denom : 0.0) - num) / (denom * denom);
    g[n] = -num / (denom * denom);
    double dir = 0.0;
    for (std::size_t k = 0; k <= n; ++k) dir += g[k] * (b[k] - a[k]);
    ++rep.pairs_tested;
    if (dir >= 0.0) {
      ++rep.implications_triggered;
      const double drop = f(a) - f(b);
      if (drop > tol) {
        ++rep.violations;
        rep.max_violation = std::max(rep.max_violation, drop);
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Softmax counterexample

struct Counterexample {
  std::array<double, 2> w_a{}, w_mid{}, w_b{};
  double f_a = 0.0, f_mid = 0.0, f_b = 0.0;
  double gap = 0.0;            // f_mid − max(f_a, f_b)
  double attention_check = 0.0;  // max |f − value read from mha_forward|
};

/// f(w2, w3) = softmax([0, w2, w3])[0] = 1 / (1 + e^w2 + e^w3).
inline double counterexample_f(double w2, double w3) { return 1.0 / (1.0 + std::exp(w2) + std::exp(w3)); }

/// The same f read from the softmax attention on X = W_V = W_cat = I₃: the
/// query of token 0 is 1 and the keys are (0, w2, w3), so out[0,0] − 1 = f.
inline double counterexample_attention(double w2, double w3) {
  AttnParams p = AttnParams::zeros(3, 1, 0, 1e-300);
  const double s = std::sqrt(3.0);
  p.W_Q(0, 0) = 1.0;
  p.W_K(1, 0) = w2 * s;
  p.W_K(2, 0) = w3 * s;
  p.W_V = Matrix::identity(3);
  p.W_cat = Matrix::identity(3);
  Rng rng(0);
  const auto fwd = mha_forward(Matrix::identity(3), nullptr, p, AttnMode::SoftmaxDot, nullptr, rng, false, 0.0);
  return fwd.out(0, 0) - 1.0;
}

inline Counterexample vanilla_counterexample(double a = 0.0, double big_m = 20.0) {
  Counterexample c;
  c.w_a = {a, -big_m};
  c.w_b = {-big_m, a};
  c.w_mid = {(c.w_a[0] + c.w_b[0]) / 2.0, (c.w_a[1] + c.w_b[1]) / 2.0};
  c.f_a = counterexample_f(c.w_a[0], c.w_a[1]);
  c.f_b = counterexample_f(c.w_b[0], c.w_b[1]);
  c.f_mid = counterexample_f(c.w_mid[0], c.w_mid[1]);
  c.gap = c.f_mid - std::max(c.f_a, c.f_b);
  for (const auto& w : {c.w_a, c.w_mid, c.w_b})
    c.attention_check =
        std::max(c.attention_check, std::abs(counterexample_f(w[0], w[1]) - counterexample_attention(w[0], w[1])));
  if (!(c.gap > 1e-6)) throw std::runtime_error("vanilla_counterexample: construction did not certify a violation");
  return c;
}

// ---------------------------------------------------------------------------
// Gradient-norm scaling

struct GradNorms {
  double w_v = 0.0;  // ‖∂Sa/∂W_V‖²_F
  double w_q = 0.0;  // ‖∂Sa/∂W_Q‖²_F
};

/// Exact squared Frobenius norms of the Jacobians of Sa = P·V (single head,
/// maxout score, leaky ReLU probability with a constant leak L) with respect
/// to W_V and W_Q. With D_i = Σ_r ReLU(A_ir) + L + ε, e_ij = [A_ij > 0] and
/// g_ijk = [Q_ik ≥ K_jk]:
///   ‖∂Sa/∂W_V‖² = d·‖P X‖²_F
///   ‖∂Sa/∂W_Q‖² = Σ_i ‖X_i‖² ‖J_i‖²_F,
///   J_i[:,k] = (Σ_j e_ij g_ijk V_j − (Σ_l e_il g_il k) Σ_j P_ij V_j) / (√d D_i)
inline GradNorms attention_gradnorms(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv, double leak,
                                     double eps = 1e-6) {
  const std::size_t n = x.rows(), d = x.cols();
  const Matrix q = matmul(x, wq), k = matmul(x, wk), v = matmul(x, wv);
  const Matrix a = maxout_score(q, k);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  GradNorms g;
  std::vector<double> px(d), pv(d), cnt(d);
  Matrix jac(d, d);  // jac(c, kk)
  for (std::size_t i = 0; i < n; ++i) {
    double denom = leak + eps;
    for (std::size_t j = 0; j < n; ++j) denom += relu(a(i, j));
    std::fill(px.begin(), px.end(), 0.0);
    std::fill(pv.begin(), pv.end(), 0.0);
    std::fill(cnt.begin(), cnt.end(), 0.0);
    jac.fill(0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (!(a(i, j) > 0.0)) continue;
      const double p = a(i, j) / denom;
      for (std::size_t c = 0; c < d; ++c) {
        px[c] += p * x(j, c);
        pv[c] += p * v(j, c);
      }
      for (std::size_t kk = 0; kk < d; ++kk) {
        if (q(i, kk) < k(j, kk)) continue;
        cnt[kk] += 1.0;
        for (std::size_t c = 0; c < d; ++c) jac(c, kk) += v(j, c);
      }
    }
    g.w_v += static_cast<double>(d) * dot(px, px);
    double jn = 0.0;
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t kk = 0; kk < d; ++kk) {
        const double val = (jac(c, kk) - cnt[kk] * pv[c]) * scale / denom;
        jn += val * val;
      }
    g.w_q += dot(x.row(i), x.row(i)) * jn;
  }
  return g;
}

/// Same quantities by brute force: one backward pass of mha_backward per
/// output entry (for cross-checking at small n).
inline GradNorms attention_gradnorms_backprop(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv,
                                              double leak, double eps = 1e-6) {
  const std::size_t n = x.rows(), d = x.cols();
  AttnParams p = AttnParams::zeros(d, 1, 0, eps);
  p.W_Q = wq;
  p.W_K = wk;
  p.W_V = wv;
  p.W_cat = Matrix::identity(d);
  p.B_C(0, 0) = std::log(std::expm1(leak));  // Softplus(B_C) = leak; W_C = 0
  GradNorms g;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      Rng rng(0);
      auto fwd = mha_forward(x, nullptr, p, AttnMode::SftMaxoutLeaky, nullptr, rng, false, 0.0, false);
      Matrix up(n, d);
      up(i, c) = 1.0;
      const auto gr = mha_backward(fwd.cache, up);
      g.w_v += frobenius_sq(gr.params.W_V);
      g.w_q += frobenius_sq(gr.params.W_Q);
    }
  return g;
}

struct ScalingConfig {
  std::vector<std::size_t> ns{32, 64, 128, 256, 512, 1024};
  std::size_t d = 4;
  std::size_t trials = 64;
  double leak = 1.0;
  std::uint64_t seed = 0;
};

struct SlopeFit {
  double slope = 0.0;
  double half_width = 0.0;  // 95% confidence half-width (Student t)
};

inline double student_t975(std::size_t df) {
  static const double table[] = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
                                 2.201,  2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086};
  if (df == 0) return std::numeric_limits<double>::infinity();
  return df <= 20 ? table[df - 1] : 1.96;
}

/// Least-squares slope of log y against log x.
inline SlopeFit loglog_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
  const std::size_t m = xs.size();
  if (m < 2 || ys.size() != m) throw std::invalid_argument("loglog_slope: need at least two aligned points");
  double mx = 0.0, my = 0.0;
  std::vector<double> lx(m), ly(m);
  for (std::size_t i = 0; i < m; ++i) {
    lx[i] = std::log(xs[i]);
    ly[i] = std::log(ys[i]);
    mx += lx[i] / static_cast<double>(m);
    my += ly[i] / static_cast<double>(m);
  }
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  SlopeFit fit;
  fit.slope = sxy / sxx;
  if (m > 2) {
    double rss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double r = ly[i] - (my + fit.slope * (lx[i] - mx));
      rss += r * r;
    }
    fit.half_width = student_t975(m - 2) * std::sqrt(rss / static_cast<double>(m - 2) / sxx);
  }
  return fit;
}

struct ScalingReport {
  std::vector<std::size_t> ns;
  std::vector<double> mean_sq_w_v, mean_sq_w_q;
  SlopeFit slope_w_v, slope_w_q;
};

/// He-initialized W_Q, W_K, W_V ~ N(0, 2/d) and tokens X ~ N(0, I) drawn
/// fresh per trial; the leak is the constant `leak`.
inline ScalingReport gradnorm_scaling(const ScalingConfig& sc) {
  if (sc.ns.size() < 4) throw std::invalid_argument("gradnorm_scaling: at least 4 token counts required");
  for (std::size_t i = 1; i < sc.ns.size(); ++i)
    if (sc.ns[i] <= sc.ns[i - 1]) throw std::invalid_argument("gradnorm_scaling: ns must be strictly increasing");
  if (sc.trials == 0) throw std::invalid_argument("gradnorm_scaling: trials must be positive");
  ScalingReport rep;
  rep.ns = sc.ns;
  const double sd = std::sqrt(2.0 / static_cast<double>(sc.d));
  Rng base(sc.seed);
  for (std::size_t n : sc.ns) {
    Rng rng = base.split(n);
    double sv = 0.0, sq = 0.0;
    for (std::size_t t = 0; t < sc.trials; ++t) {
      const Matrix x = random_normal(rng, n, sc.d);
      const Matrix wq = random_normal(rng, sc.d, sc.d, sd);
      const Matrix wk = random_normal(rng, sc.d, sc.d, sd);
      const Matrix wv = random_normal(rng, sc.d, sc.d, sd);
      const auto g = attention_gradnorms(x, wq, wk, wv, sc.leak);
      sv += g.w_v;
      sq += g.w_q;
    }
    rep.mean_sq_w_v.push_back(sv / static_cast<double>(sc.trials));
    rep.mean_sq_w_q.push_back(sq / static_cast<double>(sc.trials));
  }
  std::vector<double> xs(sc.ns.begin(), sc.ns.end());
  rep.slope_w_v = loglog_slope(xs, rep.mean_sq_w_v);
  rep.slope_w_q = loglog_slope(xs, rep.mean_sq_w_q);
  return rep;
}

// ---------------------------------------------------------------------------
// Timing

struct TimingConfig {
  std::size_t n = 1024;
  std::size_t d = 64;
  std::size_t h = 4;
  std::vector<std::size_t> ks{32, 64, 128, 256, 512};
  std::size_t reps = 10;
  std::size_t warmup = 2;
  std::size_t rpe_dim = 0;
  std::uint64_t seed = 0;
};

struct TimingRow {
  std::string model;  // "sft" or "reference"
  std::size_t k = 0;
  double median_s = 0.0;
  double mean_s = 0.0;
  double min_s = 0.0;
};

namespace detail {

template <class F>
TimingRow time_it(std::string model, std::size_t k, std::size_t reps, std::size_t warmup, F&& f) {
  for (std::size_t i = 0; i < warmup; ++i) f();
  std::vector<double> s;
  for (std::size_t i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    s.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(s.begin(), s.end());
  TimingRow r{std::move(model), k, 0.0, 0.0, s.front()};
  r.median_s = s.size() % 2 ? s[s.size() / 2] : 0.5 * (s[s.size() / 2 - 1] + s[s.size() / 2]);
  for (double v : s) r.mean_s += v / static_cast<double>(s.size());
  return r;
}

}  // namespace detail

/// Wall time of one eval-mode layer_forward per k (sampler, attention and
/// FFN), then the same layer as full softmax-dot attention without relative
/// features. Runs on the calling thread only.
inline std::vector<TimingRow> time_attention(const TimingConfig& tc) {
  if (tc.reps == 0) throw std::invalid_argument("time_attention: reps must be positive");
  Rng rng(tc.seed);
  LayerConfig cfg;
  cfg.d = tc.d;
  cfg.h = tc.h;
  cfg.rpe_dim = tc.rpe_dim;
  const LayerParams p = init_params(rng, cfg);
  const Matrix x = random_normal(rng, tc.n, tc.d);
  std::optional<RelativeEncoding> xr;
  if (tc.rpe_dim > 0) xr = random_dense_rpe(rng, tc.n, tc.rpe_dim);
  const RelativeEncoding* xr_ptr = xr ? &*xr : nullptr;

  LayerConfig ref_cfg = cfg;
  ref_cfg.mode = AttnMode::SoftmaxDot;
  ref_cfg.rpe_dim = 0;
  ref_cfg.k = LayerConfig::kAll;
  Rng ref_rng(tc.seed);
  const LayerParams ref_p = init_params(ref_rng, ref_cfg);

  std::vector<TimingRow> rows;
  volatile double sink = 0.0;
  for (std::size_t k : tc.ks) {
    LayerConfig c = cfg;
    c.k = k;
    rows.push_back(detail::time_it("sft", k, tc.reps, tc.warmup, [&] {
      Rng r(tc.seed);
      sink = sink + layer_forward(x, xr_ptr, p, c, r, false).out(0, 0);
    }));
  }
  rows.push_back(detail::time_it("reference", tc.n, tc.reps, tc.warmup, [&] {
    Rng r(tc.seed);
    sink = sink + layer_forward(x, nullptr, ref_p, ref_cfg, r, false).out(0, 0);
  }));
  return rows;
}

// ---------------------------------------------------------------------------
// Operation counts (fused multiply-add = 2)

struct FlopBreakdown {
  std::uint64_t sampling = 0;   // importance-score projection
  std::uint64_t blend = 0;      // duplet blending of token rows
  std::uint64_t q = 0, k = 0, v = 0, c = 0;
  std::uint64_t relative = 0;   // R_mul / R_add maps (and their blend)
  std::uint64_t w_cat = 0;
  std::uint64_t remainder = 0;  // scores, RPE injection, probabilities, P·V, residual
  std::uint64_t mlp = 0;

  std::uint64_t total() const { return sampling + blend + q + k + v + c + relative + w_cat + remainder + mlp; }
};

/// Counts for one layer on n tokens (LayerNorm excluded). Linear maps cost
/// 2·in·out per row plus one add per bias entry.
inline FlopBreakdown flop_count(const LayerConfig& cfg, std::size_t n) {
  cfg.validate();
  using u64 = std::uint64_t;
  const u64 N = n, d = cfg.d, h = cfg.h, r = cfg.rpe_dim, dh = cfg.d / cfg.h;
  const bool sampled = cfg.k < n;
  if (sampled && 2 * cfg.k > n) throw std::invalid_argument("sampling rate above 50% unsupported; use bypass");
  const u64 m = sampled ? cfg.k : N;  // key/value rows
  const bool sft = cfg.mode == AttnMode::SftMaxoutLeaky;
  FlopBreakdown f;
  if (sampled) {
    f.sampling = N * (2 * (d + (cfg.sampler_rpe_context ? r : 0)) + 1);
    f.blend = m * d * 3;
  }
  f.q = N * (2 * d * d + d);
  f.k = m * (2 * d * d + d);
  f.v = m * (2 * d * d + d);
  if (sft) f.c = N * (2 * d * h + h);
  if (r > 0) {
    const u64 per_vector = 2 * (2 * r * h + h) + h;  // two affine maps, Softplus on R_mul
    f.relative = (sampled ? 2 * N * m : N * m) * per_vector + (sampled ? N * m * 2 * h * 3 : 0);
  }
  f.w_cat = N * 2 * d * d;
  const u64 score = N * m * h * dh * 2;
  const u64 inject = r > 0 ? N * m * h * 2 : 0;
  const u64 prob = N * m * h * 3;
  const u64 mix = N * m * 2 * d;
  f.remainder = score + inject + prob + mix + N * d;
  const u64 hidden = LayerConfig::ffn_expansion * d;
  f.mlp = N * (2 * d * hidden + hidden) + N * hidden + N * (2 * hidden * d + d) + N * d;
  return f;
}

}  // namespace sft
