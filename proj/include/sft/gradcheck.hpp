// Finite-difference audit of layer_backward. The objective is
// L = Σ out ⊙ U for a fixed random U; every evaluation replays the same
// random stream so dropout masks, Gumbel noise and S2 stay fixed.
#pragma once

#include "sft/layer.hpp"
#include "sft/numerics.hpp"

#include <string>
#include <vector>

namespace sft {

struct GroupError {
  std::string group;
  std::size_t entries = 0;
  double rel_error = 0.0;     // ‖a_g − b_g‖ / max(‖a_g‖, ‖b_g‖, 1e-6)
  double scaled_error = 0.0;  // ‖a_g − b_g‖ / max(‖a‖, ‖b‖, 1e-6) over the whole flattened gradient
};

struct GradcheckResult {
  std::vector<GroupError> groups;
  double max_rel_error = 0.0;
  double max_scaled_error = 0.0;
  double flat_rel_error = 0.0;
  bool sampled = false;
};

struct GradcheckCase {
  LayerConfig cfg;
  std::size_t n = 8;
  bool train = true;
  std::uint64_t seed = 0;
  double h = 1e-5;
};

/// Random dense relative encoding with i.i.d. normal entries.
inline RelativeEncoding random_dense_rpe(Rng& rng, std::size_t n, std::size_t r) {
  Tensor3 t(n, n, r);
  for (double& v : t.data) v = rng.normal();
  return RelativeEncoding::dense(std::move(t));
}

/// He init plus small random offsets on biases and LN affine terms so that
/// every gradient path is exercised.
inline LayerParams random_layer_params(Rng& rng, const LayerConfig& cfg) {
  LayerParams p = init_params(rng, cfg);
  p.for_each([&](const std::string& name, Matrix& m) {
    if (name.starts_with("B_") || name.ends_with("_B1") || name.ends_with("_B2") || name.ends_with("shift"))
      for (double& v : m.data()) v += 0.3 * rng.normal();
    else if (name.ends_with("gain"))
      for (double& v : m.data()) v += 0.2 * rng.normal();
  });
  return p;
}

inline GradcheckResult layer_gradcheck(const GradcheckCase& gc) {
  const LayerConfig& cfg = gc.cfg;
  Rng setup(gc.seed);
  LayerParams params = random_layer_params(setup, cfg);
  Matrix x = random_normal(setup, gc.n, cfg.d);
  std::optional<RelativeEncoding> xr;
  if (cfg.rpe_dim > 0) xr = random_dense_rpe(setup, gc.n, cfg.rpe_dim);
  const Matrix u = random_normal(setup, gc.n, cfg.d);
  const std::uint64_t stream = setup.next_u64();
  const RelativeEncoding* xr_ptr = xr ? &*xr : nullptr;

  auto objective = [&](const LayerParams& p, const Matrix& input) {
    Rng rng(stream);
    const auto fwd = layer_forward(input, xr_ptr, p, cfg, rng, gc.train);
    return dot(fwd.out.data(), u.data());
  };

  Rng rng(stream);
  auto fwd = layer_forward(x, xr_ptr, params, cfg, rng, gc.train);
  GradcheckResult res;
  res.sampled = !fwd.cache.plan.bypass;
  const LayerGrads grads = layer_backward(fwd.cache, u);

  std::vector<std::pair<std::string, const Matrix*>> analytic;
  grads.params.for_each([&](const std::string& name, const Matrix& m) { analytic.emplace_back(name, &m); });

  std::vector<std::vector<double>> numeric, exact;
  std::vector<std::string> names;
  std::size_t idx = 0;
  params.for_each([&](const std::string& name, Matrix& m) {
    const Matrix* a = analytic[idx++].second;
    if (m.empty()) return;
    std::vector<double> original(m.data().begin(), m.data().end());
    auto f = [&](std::span<const double> values) {
      std::copy(values.begin(), values.end(), m.data().begin());
      return objective(params, x);
    };
    numeric.push_back(finite_diff_grad(f, original, gc.h));
    std::copy(original.begin(), original.end(), m.data().begin());
    exact.emplace_back(a->data().begin(), a->data().end());
    names.push_back(name);
  });
  {
    Matrix xv = x;
    auto f = [&](std::span<const double> values) {
      std::copy(values.begin(), values.end(), xv.data().begin());
      return objective(params, xv);
    };
    numeric.push_back(finite_diff_grad(f, std::vector<double>(x.data().begin(), x.data().end()), gc.h));
    exact.emplace_back(grads.dx.data().begin(), grads.dx.data().end());
    names.push_back("X");
  }

  std::vector<double> flat_a, flat_b;
  for (std::size_t g = 0; g < names.size(); ++g) {
    flat_a.insert(flat_a.end(), exact[g].begin(), exact[g].end());
    flat_b.insert(flat_b.end(), numeric[g].begin(), numeric[g].end());
  }
  res.flat_rel_error = relative_error(flat_a, flat_b);
  const double scale = std::max({std::sqrt(dot(flat_a, flat_a)), std::sqrt(dot(flat_b, flat_b)), 1e-6});
  for (std::size_t g = 0; g < names.size(); ++g) {
    double diff = 0.0;
    for (std::size_t i = 0; i < exact[g].size(); ++i) diff += (exact[g][i] - numeric[g][i]) * (exact[g][i] - numeric[g][i]);
    GroupError e{names[g], exact[g].size(), relative_error(exact[g], numeric[g]), std::sqrt(diff) / scale};
    res.max_rel_error = std::max(res.max_rel_error, e.rel_error);
    res.max_scaled_error = std::max(res.max_scaled_error, e.scaled_error);
    res.groups.push_back(std::move(e));
  }
  return res;
}

}  // namespace sft
