// Toy classifier (input projection, SFT stack, mean pool, linear head),
// AdamW with linear warmup and step decay, and the learning-curve loop.
#pragma once

#include "sft/data.hpp"
#include "sft/layer.hpp"
#include "sft/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sft {

// ---------------------------------------------------------------------------
// Optimizer

struct OptimState {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::size_t warmup_steps = 2000;
  std::size_t step_size = 30;  // epochs per decay
  double decay_rate = 0.8;
  std::size_t step = 0;
  std::vector<Matrix> m, v;
};

/// Untuned linear warmup length: ⌈2 / (1 − β₂)⌉.
inline std::size_t untuned_warmup_steps(double beta2) {
  return static_cast<std::size_t>(std::ceil(2.0 / (1.0 - beta2) - 1e-9));
}

inline OptimState make_optim_state(double lr = 1e-3, double weight_decay = 0.01) {
  OptimState s;
  s.lr = lr;
  s.weight_decay = weight_decay;
  s.warmup_steps = untuned_warmup_steps(s.beta2);
  return s;
}

inline double lr_at(std::size_t step, std::size_t epoch, const OptimState& s) {
  if (step == 0) throw std::invalid_argument("lr_at: step must be >= 1");
  const double warm = s.warmup_steps == 0 ? 1.0
                                          : std::min(1.0, static_cast<double>(step) / static_cast<double>(s.warmup_steps));
  const double decay = s.step_size == 0 ? 1.0 : std::pow(s.decay_rate, static_cast<double>(epoch / s.step_size));
  return s.lr * warm * decay;
}

/// Global L2 norm over all tensors; returns the norm before clipping.
template <class Params>
double clip_gradients(Params& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_gradients: max_norm must be positive");
  double sq = 0.0;
  grads.for_each([&](const auto&, const Matrix& m) { sq += frobenius_sq(m); });
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    grads.for_each([&](const auto&, Matrix& m) {
      for (double& x : m.data()) x *= s;
    });
  }
  return norm;
}

/// Weights decay, biases and LayerNorm terms do not.
inline bool decays(std::string_view name) {
  const auto base = name.substr(name.rfind('.') == std::string_view::npos ? 0 : name.rfind('.') + 1);
  return base.find('W') != std::string_view::npos;
}

/// One AdamW update (decoupled decay). Gradients are used as given; clip
/// beforehand if wanted.
template <class Params>
void optimizer_step(Params& params, const Params& grads, OptimState& s, std::size_t epoch) {
  std::vector<std::pair<std::string, Matrix*>> ps;
  std::vector<const Matrix*> gs;
  params.for_each([&](const auto& name, Matrix& m) { ps.emplace_back(std::string(name), &m); });
  grads.for_each([&](const auto&, const Matrix& m) { gs.push_back(&m); });
  if (ps.size() != gs.size()) throw std::invalid_argument("optimizer_step: shape mismatch");
  if (s.m.empty()) {
    for (auto& [name, m] : ps) {
      s.m.emplace_back(m->rows(), m->cols());
      s.v.emplace_back(m->rows(), m->cols());
    }
  }
  if (s.m.size() != ps.size()) throw std::invalid_argument("optimizer_step: shape mismatch");
  ++s.step;
  const double lr = lr_at(s.step, epoch, s);
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t t = 0; t < ps.size(); ++t) {
    Matrix& w = *ps[t].second;
    const Matrix& g = *gs[t];
    if (!w.same_shape(g) || !w.same_shape(s.m[t])) throw std::invalid_argument("optimizer_step: shape mismatch");
    const bool wd = decays(ps[t].first) && s.weight_decay > 0.0;
    auto wv = w.data();
    auto gv = g.data();
    auto mv = s.m[t].data();
    auto vv = s.v[t].data();
    for (std::size_t i = 0; i < wv.size(); ++i) {
      mv[i] = s.beta1 * mv[i] + (1.0 - s.beta1) * gv[i];
      vv[i] = s.beta2 * vv[i] + (1.0 - s.beta2) * gv[i] * gv[i];
      if (wd) wv[i] -= lr * s.weight_decay * wv[i];
      wv[i] -= lr * (mv[i] / c1) / (std::sqrt(vv[i] / c2) + s.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Model

struct ModelConfig {
  std::size_t in_dim = 6;
  std::size_t n_classes = 4;
  std::size_t layers = 2;
  LayerConfig layer;  // shared by every layer
};

struct ModelParams {
  Matrix W_in, B_in;
  std::vector<LayerParams> layers;
  Matrix W_out, B_out;

  template <class Self, class F>
  static void visit(Self& s, F&& f) {
    f("W_in", s.W_in);
    f("B_in", s.B_in);
    for (std::size_t l = 0; l < s.layers.size(); ++l) {
      const std::string prefix = "layer" + std::to_string(l) + ".";
      s.layers[l].for_each([&](const auto& name, auto& m) { f(prefix + std::string(name), m); });
    }
    f("W_out", s.W_out);
    f("B_out", s.B_out);
  }
  template <class F> void for_each(F&& f) { visit(*this, f); }
  template <class F> void for_each(F&& f) const { visit(*this, f); }
};

inline ModelParams model_zeros(const ModelConfig& mc) {
  ModelParams p;
  p.W_in = Matrix(mc.in_dim, mc.layer.d);
  p.B_in = Matrix(1, mc.layer.d);
  for (std::size_t l = 0; l < mc.layers; ++l) p.layers.push_back(LayerParams::zeros(mc.layer));
  p.W_out = Matrix(mc.layer.d, mc.n_classes);
  p.B_out = Matrix(1, mc.n_classes);
  return p;
}

inline ModelParams init_model(Rng& rng, const ModelConfig& mc) {
  if (mc.in_dim == 0 || mc.n_classes < 2) throw std::invalid_argument("ModelConfig: in_dim > 0 and n_classes >= 2 required");
  ModelParams p = model_zeros(mc);
  p.W_in = random_normal(rng, mc.in_dim, mc.layer.d, std::sqrt(2.0 / static_cast<double>(mc.in_dim)));
  for (auto& l : p.layers) l = init_params(rng, mc.layer);
  p.W_out = random_normal(rng, mc.layer.d, mc.n_classes, std::sqrt(1.0 / static_cast<double>(mc.layer.d)));
  return p;
}

struct Example {
  Matrix tokens;                   // n × in_dim
  std::optional<RelativeEncoding> rpe;
  std::size_t label = 0;
};

struct ModelCache {
  Matrix x, pooled;
  std::vector<LayerCache> layers;
};

struct ModelForward {
  std::vector<double> logits;
  ModelCache cache;
};

inline ModelForward model_forward(const ModelParams& p, const ModelConfig& mc, const Example& ex, Rng& rng, bool train) {
  ModelForward f;
  f.cache.x = ex.tokens;
  Matrix h = affine(ex.tokens, p.W_in, p.B_in);
  const RelativeEncoding* xr = mc.layer.rpe_dim > 0 && ex.rpe ? &*ex.rpe : nullptr;
  for (const auto& lp : p.layers) {
    auto step = layer_forward(h, xr, lp, mc.layer, rng, train);
    h = std::move(step.out);
    f.cache.layers.push_back(std::move(step.cache));
  }
  Matrix pooled = column_sums(h);
  for (double& v : pooled.data()) v /= static_cast<double>(h.rows());
  const Matrix logits = affine(pooled, p.W_out, p.B_out);
  f.cache.pooled = pooled;
  f.logits.assign(logits.data().begin(), logits.data().end());
  return f;
}

/// Accumulates parameter gradients of the loss into g.
inline void model_backward(const ModelParams& p, ModelCache& c, std::span<const double> dlogits, ModelParams& g) {
  const Matrix dl = Matrix::row_vector(dlogits);
  g.W_out += matmul_tn(c.pooled, dl);
  g.B_out += dl;
  const Matrix dpooled = matmul_nt(dl, p.W_out);
  const std::size_t n = c.x.rows();
  Matrix dh(n, dpooled.cols());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dh.cols(); ++j) dh(i, j) = dpooled(0, j) / static_cast<double>(n);
  for (std::size_t l = c.layers.size(); l-- > 0;) {
    auto lg = layer_backward(c.layers[l], dh);
    std::vector<Matrix*> dst;
    g.layers[l].for_each([&](const auto&, Matrix& m) { dst.push_back(&m); });
    std::size_t t = 0;
    lg.params.for_each([&](const auto&, const Matrix& m) { *dst[t++] += m; });
    dh = std::move(lg.dx);
  }
  g.W_in += matmul_tn(c.x, dh);
  g.B_in += column_sums(dh);
}

/// Mean-reduced softmax cross-entropy for one example: returns the loss and
/// writes d loss / d logits.
inline double cross_entropy(std::span<const double> logits, std::size_t label, std::vector<double>& dlogits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  dlogits.resize(logits.size());
  for (std::size_t c = 0; c < logits.size(); ++c) dlogits[c] = std::exp(logits[c] - mx) / z;
  dlogits[label] -= 1.0;
  return -(logits[label] - mx - std::log(z));
}

// ---------------------------------------------------------------------------
// Datasets as examples

struct TokenChoice {
  bool ones = false;  // rotation-invariant tokens (n × 1 of ones)
  bool rpe = true;
};

inline Example shape_example(const PointCloud& pc, const TokenChoice& tc) {
  Example ex;
  ex.tokens = tc.ones ? Matrix(pc.coords.rows(), 1, 1.0) : point_tokens(pc);
  if (tc.rpe) ex.rpe = point_cloud_rpe(pc);
  ex.label = pc.label;
  return ex;
}

/// One-hot tokens over the 4 symbols; relative features are the sinusoid
/// hadamard products.
inline Example seq_example(const SeqExample& s, std::size_t d_pe, bool rpe) {
  Example ex;
  ex.tokens = Matrix(s.tokens.size(), 4);
  for (std::size_t i = 0; i < s.tokens.size(); ++i) ex.tokens(i, static_cast<std::size_t>(s.tokens[i])) = 1.0;
  if (rpe) ex.rpe = sinusoid_rpe(s.tokens.size(), d_pe);
  ex.label = s.label;
  return ex;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch = 32;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::size_t warmup_steps = untuned_warmup_steps(0.999);
  std::size_t step_size = 30;
  double decay_rate = 0.8;
  std::uint64_t seed = 0;
};

struct CurveRow {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_loss = 0.0;
  double test_acc = 0.0;
  double test_acc_cummax = 0.0;
};

struct TrainResult {
  std::vector<CurveRow> curve;
  ModelParams params;
};

struct EvalStats {
  double loss = 0.0, acc = 0.0;
};

inline EvalStats evaluate(const ModelParams& p, const ModelConfig& mc, const std::vector<Example>& data) {
  EvalStats s;
  std::vector<double> dl;
  for (const auto& ex : data) {
    Rng rng(0);
    const auto f = model_forward(p, mc, ex, rng, false);
    s.loss += cross_entropy(f.logits, ex.label, dl);
    s.acc += argmax(f.logits) == ex.label ? 1.0 : 0.0;
  }
  if (!data.empty()) {
    s.loss /= static_cast<double>(data.size());
    s.acc /= static_cast<double>(data.size());
  }
  return s;
}

inline TrainResult train_run(const ModelConfig& mc, const std::vector<Example>& train, const std::vector<Example>& test,
                             const TrainOptions& opt) {
  if (opt.batch == 0) throw std::invalid_argument("train_run: batch must be positive");
  if (train.empty()) throw std::invalid_argument("train_run: empty training set");
  Rng rng(opt.seed);
  Rng init_rng = rng.split("init");
  Rng order_rng = rng.split("order");
  Rng noise_rng = rng.split("noise");
  TrainResult res{{}, init_model(init_rng, mc)};
  OptimState st = make_optim_state(opt.lr, opt.weight_decay);
  st.clip_norm = opt.clip_norm;
  st.warmup_steps = opt.warmup_steps;
  st.step_size = opt.step_size;
  st.decay_rate = opt.decay_rate;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> dl;
  double best = 0.0;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
    double loss_sum = 0.0, correct = 0.0;
    for (std::size_t b = 0; b < order.size(); b += opt.batch) {
      const std::size_t end = std::min(order.size(), b + opt.batch);
      ModelParams g = zeros_like(res.params);
      for (std::size_t t = b; t < end; ++t) {
        const Example& ex = train[order[t]];
        auto f = model_forward(res.params, mc, ex, noise_rng, true);
        const double loss = cross_entropy(f.logits, ex.label, dl);
        if (!std::isfinite(loss))
          throw std::runtime_error("train_run: non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                                   std::to_string(st.step + 1));
        loss_sum += loss;
        correct += argmax(f.logits) == ex.label ? 1.0 : 0.0;
        const double scale = 1.0 / static_cast<double>(end - b);
        for (double& v : dl) v *= scale;
        model_backward(res.params, f.cache, dl, g);
      }
      clip_gradients(g, st.clip_norm);
      optimizer_step(res.params, g, st, epoch);
    }
    CurveRow row;
    row.epoch = epoch + 1;
    row.train_loss = loss_sum / static_cast<double>(train.size());
    row.train_acc = correct / static_cast<double>(train.size());
    const auto te = evaluate(res.params, mc, test);
    row.test_loss = te.loss;
    row.test_acc = te.acc;
    best = std::max(best, te.acc);
    row.test_acc_cummax = best;
    res.curve.push_back(row);
  }
  return res;
}

/// First epoch whose cumulative-max test accuracy reaches `target`, or
/// epochs + 1 if never reached.
inline std::size_t epochs_to_threshold(const std::vector<CurveRow>& curve, double target) {
  for (const auto& r : curve)
    if (r.test_acc_cummax >= target) return r.epoch;
  return curve.size() + 1;
}

// ---------------------------------------------------------------------------
// Rotation invariance

struct RotationReport {
  std::size_t clouds = 0, rotations = 0;
  double max_abs_diff = 0.0;
};

/// All-ones tokens with squared-EDM and normal-dot features: the model
/// output must not depend on the orientation of the cloud.
inline RotationReport rotation_invariance(const ModelParams& p, const ModelConfig& mc, const std::vector<PointCloud>& clouds,
                                          std::size_t rotations, std::uint64_t seed) {
  if (mc.in_dim != 1 || mc.layer.rpe_dim != 2)
    throw std::invalid_argument("rotation_invariance: model must take 1-d ones tokens and 2 relative channels");
  RotationReport rep{clouds.size(), rotations, 0.0};
  Rng rng(seed);
  for (const auto& pc : clouds) {
    Rng r0(0);
    const auto base = model_forward(p, mc, shape_example(pc, {true, true}), r0, false).logits;
    for (std::size_t t = 0; t < rotations; ++t) {
      const PointCloud rc = rotate(pc, random_rotation(rng));
      Rng r1(0);
      const auto out = model_forward(p, mc, shape_example(rc, {true, true}), r1, false).logits;
      for (std::size_t c = 0; c < out.size(); ++c) rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(out[c] - base[c]));
    }
  }
  return rep;
}

}  // namespace sft
