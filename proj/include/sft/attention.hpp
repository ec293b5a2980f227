// Multi-head attention with three score/probability pairings:
//
//   SftMaxoutLeaky   A[i,j] = Σ_k max(Q[i,k], K[j,k]) / √d_h
//                    P[i,j] = ReLU(A[i,j]) / (Σ_r ReLU(A[i,r]) + Softplus(c_i) + ε)
//   SoftmaxDot       scaled dot product + softmax (ε in the denominator)
//   ReluDotNonleaky  scaled dot product + ReLU normalization without a leak
//
// Relative features enter the score as A'·R_mul + R_add with
// R_mul = Softplus(Linear_mul(X_R)) and R_add = Linear_add(X_R), one shared
// map with one output channel per head. When a duplet plan is supplied, keys
// and values come from the blended rows and the relative features of the two
// members of each bin are transformed separately and blended with the same
// weights.
#pragma once

#include "sft/numerics.hpp"
#include "sft/relative_encoding.hpp"
#include "sft/sampler.hpp"

#include <cmath>
#include <cstring>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sft {

enum class AttnMode { SftMaxoutLeaky, SoftmaxDot, ReluDotNonleaky };

inline std::string to_string(AttnMode m) {
  switch (m) {
    case AttnMode::SftMaxoutLeaky: return "sft_maxout_leaky";
    case AttnMode::SoftmaxDot: return "softmax_dot";
    case AttnMode::ReluDotNonleaky: return "relu_dot_nonleaky";
  }
  return "unknown";
}

inline AttnMode parse_attn_mode(std::string_view s) {
  if (s == "sft_maxout_leaky" || s == "sft") return AttnMode::SftMaxoutLeaky;
  if (s == "softmax_dot" || s == "softmax") return AttnMode::SoftmaxDot;
  if (s == "relu_dot_nonleaky" || s == "relu") return AttnMode::ReluDotNonleaky;
  throw std::invalid_argument("unknown attention mode: " + std::string(s));
}

struct AttnParams {
  std::size_t heads = 1;
  std::size_t head_dim = 1;
  std::size_t rpe_dim = 0;
  double epsilon = 1e-6;

  Matrix W_Q, B_Q, W_K, B_K, W_V, B_V;
  Matrix W_C, B_C;          // d×h, 1×h: one leak logit per head
  Matrix W_Rmul, B_Rmul;    // r×h, 1×h
  Matrix W_Radd, B_Radd;    // r×h, 1×h
  Matrix W_cat;             // d×d, no bias

  std::size_t model_dim() const { return heads * head_dim; }

  static AttnParams zeros(std::size_t d, std::size_t heads, std::size_t rpe_dim, double epsilon = 1e-6) {
    if (heads == 0 || d % heads != 0) throw std::invalid_argument("AttnParams: d must be divisible by head count");
    if (!(epsilon > 0.0)) throw std::invalid_argument("AttnParams: epsilon must be positive");
    AttnParams p;
    p.heads = heads;
    p.head_dim = d / heads;
    p.rpe_dim = rpe_dim;
    p.epsilon = epsilon;
    p.W_Q = Matrix(d, d); p.B_Q = Matrix(1, d);
    p.W_K = Matrix(d, d); p.B_K = Matrix(1, d);
    p.W_V = Matrix(d, d); p.B_V = Matrix(1, d);
    p.W_C = Matrix(d, heads); p.B_C = Matrix(1, heads);
    p.W_Rmul = Matrix(rpe_dim, heads); p.B_Rmul = Matrix(1, heads);
    p.W_Radd = Matrix(rpe_dim, heads); p.B_Radd = Matrix(1, heads);
    p.W_cat = Matrix(d, d);
    return p;
  }

  template <class Self, class F>
  static void visit(Self& s, F&& f) {
    f("W_Q", s.W_Q); f("B_Q", s.B_Q);
    f("W_K", s.W_K); f("B_K", s.B_K);
    f("W_V", s.W_V); f("B_V", s.B_V);
    f("W_C", s.W_C); f("B_C", s.B_C);
    f("W_Rmul", s.W_Rmul); f("B_Rmul", s.B_Rmul);
    f("W_Radd", s.W_Radd); f("B_Radd", s.B_Radd);
    f("W_cat", s.W_cat);
  }
  template <class F> void for_each(F&& f) { visit(*this, f); }
  template <class F> void for_each(F&& f) const { visit(*this, f); }
};

/// Zero-filled container with the same shapes as p.
template <class Params>
Params zeros_like(const Params& p) {
  Params z = p;
  z.for_each([](const auto&, Matrix& m) { m.fill(0.0); });
  return z;
}

/// Content hash over every parameter value; used to reject stale caches.
template <class Params>
std::uint64_t fingerprint(const Params& p) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  p.for_each([&](const auto&, const Matrix& m) {
    for (double v : m.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      h ^= bits;
      h *= 0x100000001B3ULL;
    }
  });
  return h;
}

// ---------------------------------------------------------------------------
// Score functions

inline Matrix maxout_score(const Matrix& q, const Matrix& k) {
  if (q.cols() != k.cols()) throw std::invalid_argument("maxout_score: dimension mismatch");
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix a(q.rows(), k.rows());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const double* qi = q.row(i).data();
    for (std::size_t j = 0; j < k.rows(); ++j) {
      const double* kj = k.row(j).data();
      double s = 0.0;
      for (std::size_t c = 0; c < q.cols(); ++c) s += qi[c] >= kj[c] ? qi[c] : kj[c];
      a(i, j) = s * scale;
    }
  }
  return a;
}

/// Gradient of maxout_score; ties route to the query side.
inline void maxout_score_backward(const Matrix& q, const Matrix& k, const Matrix& da, Matrix& dq, Matrix& dk) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const double* qi = q.row(i).data();
    double* dqi = dq.row(i).data();
    for (std::size_t j = 0; j < k.rows(); ++j) {
      const double g = da(i, j) * scale;
      if (g == 0.0) continue;
      const double* kj = k.row(j).data();
      double* dkj = dk.row(j).data();
      for (std::size_t c = 0; c < q.cols(); ++c) {
        if (qi[c] >= kj[c]) dqi[c] += g;
        else dkj[c] += g;
      }
    }
  }
}

inline Matrix dot_score(const Matrix& q, const Matrix& k) {
  if (q.cols() != k.cols()) throw std::invalid_argument("dot_score: dimension mismatch");
  Matrix a = matmul_nt(q, k);
  a *= 1.0 / std::sqrt(static_cast<double>(q.cols()));
  return a;
}

inline void dot_score_backward(const Matrix& q, const Matrix& k, const Matrix& da, Matrix& dq, Matrix& dk) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  dq += matmul(da, k) * scale;
  dk += matmul_tn(da, q) * scale;
}

// ---------------------------------------------------------------------------
// Probability functions

/// Leaky ReLU normalization; the leak of row i is Softplus(c[i]).
inline Matrix leaky_prob(const Matrix& a, std::span<const double> c, double eps) {
  if (c.size() != a.rows()) throw std::invalid_argument("leaky_prob: leak length must equal row count");
  Matrix p(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double denom = softplus(c[i]) + eps;
    for (std::size_t j = 0; j < a.cols(); ++j) denom += relu(a(i, j));
    for (std::size_t j = 0; j < a.cols(); ++j) p(i, j) = relu(a(i, j)) / denom;
  }
  return p;
}

inline void leaky_prob_backward(const Matrix& a, std::span<const double> c, double eps, const Matrix& p,
                                const Matrix& dp, Matrix& da, std::span<double> dc) {
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double denom = softplus(c[i]) + eps, s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
      denom += relu(a(i, j));
      s += dp(i, j) * p(i, j);
    }
    for (std::size_t j = 0; j < a.cols(); ++j)
      da(i, j) = a(i, j) > 0.0 ? (dp(i, j) - s) / denom : 0.0;
    dc[i] += -s / denom * sigmoid(c[i]);
  }
}

/// ReLU normalization without a leak: ReLU(A) / (Σ ReLU(A) + ε).
inline Matrix relu_prob(const Matrix& a, double eps) {
  Matrix p(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double denom = eps;
    for (std::size_t j = 0; j < a.cols(); ++j) denom += relu(a(i, j));
    for (std::size_t j = 0; j < a.cols(); ++j) p(i, j) = relu(a(i, j)) / denom;
  }
  return p;
}

inline void relu_prob_backward(const Matrix& a, double eps, const Matrix& p, const Matrix& dp, Matrix& da) {
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double denom = eps, s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
      denom += relu(a(i, j));
      s += dp(i, j) * p(i, j);
    }
    for (std::size_t j = 0; j < a.cols(); ++j)
      da(i, j) = a(i, j) > 0.0 ? (dp(i, j) - s) / denom : 0.0;
  }
}

/// Row softmax, stabilized by subtracting the row maximum before exp; ε is
/// added to the stabilized denominator.
inline Matrix softmax_prob(const Matrix& a, double eps) {
  Matrix p(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    const double m = *std::max_element(r.begin(), r.end());
    double denom = eps;
    for (std::size_t j = 0; j < a.cols(); ++j) denom += (p(i, j) = std::exp(r[j] - m));
    for (std::size_t j = 0; j < a.cols(); ++j) p(i, j) /= denom;
  }
  return p;
}

inline void softmax_prob_backward(const Matrix& a, double eps, const Matrix& p, const Matrix& dp, Matrix& da) {
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    const std::size_t jmax = argmax(r);
    double denom = eps, s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
      denom += std::exp(r[j] - r[jmax]);
      s += dp(i, j) * p(i, j);
    }
    for (std::size_t j = 0; j < a.cols(); ++j) da(i, j) = p(i, j) * (dp(i, j) - s);
    // The row maximum shifts ε relative to the exponentials.
    da(i, jmax) += -eps / denom * s;
  }
}

// ---------------------------------------------------------------------------
// Relative features

/// Score' = A·Softplus(Rfeat·W_Rmul[:,head] + B_Rmul[head]) + Rfeat·W_Radd[:,head] + B_Radd[head].
inline Matrix apply_rpe(const Matrix& a, const Tensor3& rfeat, const AttnParams& p, std::size_t head) {
  if (rfeat.d0 != a.rows() || rfeat.d1 != a.cols()) throw std::invalid_argument("apply_rpe: feature grid mismatch");
  if (rfeat.d2 != p.W_Rmul.rows() || rfeat.d2 != p.W_Radd.rows())
    throw std::invalid_argument("apply_rpe: relative feature width mismatch");
  if (head >= p.heads) throw std::invalid_argument("apply_rpe: head out of range");
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      double lm = p.B_Rmul(0, head), la = p.B_Radd(0, head);
      for (std::size_t c = 0; c < rfeat.d2; ++c) {
        lm += rfeat(i, j, c) * p.W_Rmul(c, head);
        la += rfeat(i, j, c) * p.W_Radd(c, head);
      }
      out(i, j) = a(i, j) * softplus(lm) + la;
    }
  }
  return out;
}

/// Writes the 2h transformed channels (Softplus'd multiplicative, then
/// additive) of one relative feature vector.
inline void rpe_transform(const AttnParams& p, std::span<const double> xr, std::span<double> out) {
  const std::size_t h = p.heads;
  for (std::size_t hd = 0; hd < h; ++hd) {
    double lm = p.B_Rmul(0, hd), la = p.B_Radd(0, hd);
    for (std::size_t c = 0; c < xr.size(); ++c) {
      lm += xr[c] * p.W_Rmul(c, hd);
      la += xr[c] * p.W_Radd(c, hd);
    }
    out[hd] = softplus(lm);
    out[h + hd] = la;
  }
}

// ---------------------------------------------------------------------------
// Multi-head attention

inline Matrix column_block(const Matrix& m, std::size_t start, std::size_t width) {
  Matrix out(m.rows(), width);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t c = 0; c < width; ++c) out(i, c) = m(i, start + c);
  return out;
}

inline void add_column_block(Matrix& m, std::size_t start, const Matrix& block) {
  for (std::size_t i = 0; i < block.rows(); ++i)
    for (std::size_t c = 0; c < block.cols(); ++c) m(i, start + c) += block(i, c);
}

struct AttnCache {
  const AttnParams* params = nullptr;
  std::uint64_t params_hash = 0;
  AttnMode mode = AttnMode::SftMaxoutLeaky;
  bool residual = true;
  bool consumed = false;
  const RelativeEncoding* rpe = nullptr;
  std::optional<SamplePlan> plan;

  Matrix x;                 // attention input (queries)
  Matrix xs;                // key/value source rows (blended when sampled)
  Matrix q, k, v;           // projections before dropout
  Matrix q_mask, k_mask;    // inverted-dropout masks (empty when unused)
  Matrix leak;              // n×h leak logits
  Tensor3 rpe_mul, rpe_add; // n×m×h
  std::vector<Matrix> score, score_rpe, prob;
  Matrix heads_out;         // n×d
};

struct AttnGrads {
  AttnParams params;
  Matrix dx;
  std::vector<double> dw_top;  // dL/dw_top per sampled bin
};

struct AttnForward {
  Matrix out;
  AttnCache cache;
};

namespace detail {

inline Matrix dropout_mask(Rng& rng, std::size_t rows, std::size_t cols, double rate) {
  Matrix m(rows, cols);
  const double keep = 1.0 / (1.0 - rate);
  for (double& v : m.data()) v = rng.uniform() < rate ? 0.0 : keep;
  return m;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.data()[i];
  return out;
}

}  // namespace detail

/// Attention branch without the residual (residual=false) or the full
/// X + branch (residual=true).
inline AttnForward mha_forward(const Matrix& x, const RelativeEncoding* xr, const AttnParams& p, AttnMode mode,
                               const SamplePlan* plan, Rng& rng, bool train, double attn_dropout,
                               bool residual = true) {
  const std::size_t n = x.rows(), d = p.model_dim(), h = p.heads, dh = p.head_dim;
  if (x.cols() != d) throw std::invalid_argument("mha_forward: token width does not match model dimension");
  if (xr) {
    if (xr->tokens() != n) throw std::invalid_argument("mha_forward: relative encoding token count mismatch");
    if (xr->width() != p.rpe_dim || p.rpe_dim == 0)
      throw std::invalid_argument("mha_forward: relative encoding width does not match W_Rmul");
  }
  if (!(attn_dropout >= 0.0 && attn_dropout < 1.0)) throw std::invalid_argument("mha_forward: dropout rate out of range");

  AttnForward res;
  AttnCache& c = res.cache;
  c.params = &p;
  c.params_hash = fingerprint(p);
  c.mode = mode;
  c.residual = residual;
  c.rpe = xr;
  c.x = x;
  if (plan && !plan->bypass) {
    c.plan = *plan;
    c.xs = blend_rows(x, *plan);
  } else {
    c.xs = x;
  }
  const std::size_t m = c.xs.rows();

  c.q = affine(x, p.W_Q, p.B_Q);
  c.k = affine(c.xs, p.W_K, p.B_K);
  c.v = affine(c.xs, p.W_V, p.B_V);
  Matrix qd = c.q, kd = c.k;
  if (train && attn_dropout > 0.0) {
    c.q_mask = detail::dropout_mask(rng, n, d, attn_dropout);
    c.k_mask = detail::dropout_mask(rng, m, d, attn_dropout);
    qd = detail::hadamard(c.q, c.q_mask);
    kd = detail::hadamard(c.k, c.k_mask);
  }
  if (mode == AttnMode::SftMaxoutLeaky) c.leak = affine(x, p.W_C, p.B_C);

  if (xr) {
    c.rpe_mul = Tensor3(n, m, h);
    c.rpe_add = Tensor3(n, m, h);
    std::vector<double> feat(p.rpe_dim), t1(2 * h), t2(2 * h);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        if (c.plan) {
          xr->get(i, c.plan->idx_top[j], feat);
          rpe_transform(p, feat, t1);
          xr->get(i, c.plan->idx_rand[j], feat);
          rpe_transform(p, feat, t2);
          const double w = c.plan->w_top[j], wr = c.plan->w_rand[j];
          for (std::size_t hd = 0; hd < h; ++hd) {
            c.rpe_mul(i, j, hd) = w * t1[hd] + wr * t2[hd];
            c.rpe_add(i, j, hd) = w * t1[h + hd] + wr * t2[h + hd];
          }
        } else {
          xr->get(i, j, feat);
          rpe_transform(p, feat, t1);
          for (std::size_t hd = 0; hd < h; ++hd) {
            c.rpe_mul(i, j, hd) = t1[hd];
            c.rpe_add(i, j, hd) = t1[h + hd];
          }
        }
      }
    }
  }

  c.heads_out = Matrix(n, d);
  std::vector<double> leak_col(n);
  for (std::size_t hd = 0; hd < h; ++hd) {
    const Matrix qh = column_block(qd, hd * dh, dh);
    const Matrix kh = column_block(kd, hd * dh, dh);
    Matrix a = mode == AttnMode::SftMaxoutLeaky ? maxout_score(qh, kh) : dot_score(qh, kh);
    Matrix ar = a;
    if (xr) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) ar(i, j) = a(i, j) * c.rpe_mul(i, j, hd) + c.rpe_add(i, j, hd);
    }
    Matrix prob;
    switch (mode) {
      case AttnMode::SftMaxoutLeaky:
        for (std::size_t i = 0; i < n; ++i) leak_col[i] = c.leak(i, hd);
        prob = leaky_prob(ar, leak_col, p.epsilon);
        break;
      case AttnMode::SoftmaxDot: prob = softmax_prob(ar, p.epsilon); break;
      case AttnMode::ReluDotNonleaky: prob = relu_prob(ar, p.epsilon); break;
    }
    add_column_block(c.heads_out, hd * dh, matmul(prob, column_block(c.v, hd * dh, dh)));
    c.score.push_back(std::move(a));
    c.score_rpe.push_back(std::move(ar));
    c.prob.push_back(std::move(prob));
  }

  res.out = matmul(c.heads_out, p.W_cat);
  if (residual) res.out += x;
  return res;
}

/// Analytic VJP of mha_forward. The cache is single-use and must belong to
/// the same, unmodified parameter set.
inline AttnGrads mha_backward(AttnCache& c, const Matrix& upstream) {
  if (c.params == nullptr) throw std::logic_error("mha_backward: empty cache");
  if (c.consumed) throw std::logic_error("mha_backward: cache already consumed");
  if (fingerprint(*c.params) != c.params_hash)
    throw std::logic_error("mha_backward: parameters changed since the forward pass (stale cache)");
  c.consumed = true;
  const AttnParams& p = *c.params;
  const std::size_t n = c.x.rows(), m = c.xs.rows(), d = p.model_dim(), h = p.heads, dh = p.head_dim;
  if (upstream.rows() != n || upstream.cols() != d) throw std::invalid_argument("mha_backward: upstream shape mismatch");

  AttnGrads g{zeros_like(p), Matrix(n, d), std::vector<double>(c.plan ? c.plan->size() : 0, 0.0)};
  if (c.residual) g.dx += upstream;

  g.params.W_cat = matmul_tn(c.heads_out, upstream);
  const Matrix d_heads = matmul_nt(upstream, p.W_cat);

  const bool dropped = !c.q_mask.empty();
  const Matrix qd = dropped ? detail::hadamard(c.q, c.q_mask) : c.q;
  const Matrix kd = dropped ? detail::hadamard(c.k, c.k_mask) : c.k;

  Matrix dq(n, d), dk(m, d), dv(m, d), dleak(n, h);
  Tensor3 dmul, dadd;
  if (c.rpe) {
    dmul = Tensor3(n, m, h);
    dadd = Tensor3(n, m, h);
  }
  std::vector<double> leak_col(n), dleak_col(n);
  for (std::size_t hd = 0; hd < h; ++hd) {
    const Matrix dout = column_block(d_heads, hd * dh, dh);
    const Matrix vh = column_block(c.v, hd * dh, dh);
    const Matrix& prob = c.prob[hd];
    const Matrix dprob = matmul_nt(dout, vh);
    add_column_block(dv, hd * dh, matmul_tn(prob, dout));

    Matrix dar(n, m);
    switch (c.mode) {
      case AttnMode::SftMaxoutLeaky:
        for (std::size_t i = 0; i < n; ++i) {
          leak_col[i] = c.leak(i, hd);
          dleak_col[i] = 0.0;
        }
        leaky_prob_backward(c.score_rpe[hd], leak_col, p.epsilon, prob, dprob, dar, dleak_col);
        for (std::size_t i = 0; i < n; ++i) dleak(i, hd) = dleak_col[i];
        break;
      case AttnMode::SoftmaxDot: softmax_prob_backward(c.score_rpe[hd], p.epsilon, prob, dprob, dar); break;
      case AttnMode::ReluDotNonleaky: relu_prob_backward(c.score_rpe[hd], p.epsilon, prob, dprob, dar); break;
    }

    Matrix da = dar;
    if (c.rpe) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          da(i, j) = dar(i, j) * c.rpe_mul(i, j, hd);
          dmul(i, j, hd) = dar(i, j) * c.score[hd](i, j);
          dadd(i, j, hd) = dar(i, j);
        }
    }

    const Matrix qh = column_block(qd, hd * dh, dh);
    const Matrix kh = column_block(kd, hd * dh, dh);
    Matrix dqh(n, dh), dkh(m, dh);
    if (c.mode == AttnMode::SftMaxoutLeaky) maxout_score_backward(qh, kh, da, dqh, dkh);
    else dot_score_backward(qh, kh, da, dqh, dkh);
    add_column_block(dq, hd * dh, dqh);
    add_column_block(dk, hd * dh, dkh);
  }
  if (dropped) {
    dq = detail::hadamard(dq, c.q_mask);
    dk = detail::hadamard(dk, c.k_mask);
  }

  g.params.W_Q = matmul_tn(c.x, dq);
  g.params.B_Q = column_sums(dq);
  g.dx += matmul_nt(dq, p.W_Q);

  g.params.W_K = matmul_tn(c.xs, dk);
  g.params.B_K = column_sums(dk);
  g.params.W_V = matmul_tn(c.xs, dv);
  g.params.B_V = column_sums(dv);
  Matrix dxs = matmul_nt(dk, p.W_K);
  dxs += matmul_nt(dv, p.W_V);

  if (c.mode == AttnMode::SftMaxoutLeaky) {
    g.params.W_C = matmul_tn(c.x, dleak);
    g.params.B_C = column_sums(dleak);
    g.dx += matmul_nt(dleak, p.W_C);
  }

  if (c.rpe) {
    const std::size_t r = p.rpe_dim;
    std::vector<double> feat(r);
    // Accumulates the linear-map gradients for one relative feature vector
    // that contributed with blend weight w.
    auto accumulate = [&](std::span<const double> xr, std::size_t i, std::size_t j, double w) {
      for (std::size_t hd = 0; hd < h; ++hd) {
        double lm = p.B_Rmul(0, hd);
        for (std::size_t cc = 0; cc < r; ++cc) lm += xr[cc] * p.W_Rmul(cc, hd);
        const double gm = dmul(i, j, hd) * w * sigmoid(lm);
        const double ga = dadd(i, j, hd) * w;
        g.params.B_Rmul(0, hd) += gm;
        g.params.B_Radd(0, hd) += ga;
        for (std::size_t cc = 0; cc < r; ++cc) {
          g.params.W_Rmul(cc, hd) += gm * xr[cc];
          g.params.W_Radd(cc, hd) += ga * xr[cc];
        }
      }
    };
    std::vector<double> t1(2 * h), t2(2 * h), feat2(r);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        if (c.plan) {
          c.rpe->get(i, c.plan->idx_top[j], feat);
          c.rpe->get(i, c.plan->idx_rand[j], feat2);
          accumulate(feat, i, j, c.plan->w_top[j]);
          accumulate(feat2, i, j, c.plan->w_rand[j]);
          rpe_transform(p, feat, t1);
          rpe_transform(p, feat2, t2);
          double s = 0.0;
          for (std::size_t hd = 0; hd < h; ++hd)
            s += dmul(i, j, hd) * (t1[hd] - t2[hd]) + dadd(i, j, hd) * (t1[h + hd] - t2[h + hd]);
          g.dw_top[j] += s;
        } else {
          c.rpe->get(i, j, feat);
          accumulate(feat, i, j, 1.0);
        }
      }
    }
  }

  if (c.plan) {
    const auto dw = blend_rows_backward(c.x, *c.plan, dxs, g.dx);
    for (std::size_t j = 0; j < dw.size(); ++j) g.dw_top[j] += dw[j];
  } else {
    g.dx += dxs;
  }
  return g;
}

}  // namespace sft
