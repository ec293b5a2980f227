// Relative encodings for point clouds, sequences and graphs, 3-D rotations,
// and the synthetic datasets used by the toy experiments.
#pragma once

#include "sft/numerics.hpp"
#include "sft/relative_encoding.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace sft {

struct PointCloud {
  Matrix coords;   // n×3
  Matrix normals;  // n×3, unit rows
  std::size_t label = 0;
};

enum class ToyKind { Shapes3d, SeqParity };

struct ToyDatasetSpec {
  ToyKind kind = ToyKind::Shapes3d;
  std::size_t n_tokens = 128;
  std::size_t n_classes = 4;
  std::size_t n_train = 256;
  std::size_t n_test = 128;
  double noise = 0.02;
  std::uint64_t seed = 0;
  // seq_parity only: number of cued positions per sequence
  std::size_t n_cues = 3;
};

inline nlohmann::json to_json(const ToyDatasetSpec& s) {
  return {{"kind", s.kind == ToyKind::Shapes3d ? "shapes3d" : "seq_parity"},
          {"n_tokens", s.n_tokens},
          {"n_classes", s.n_classes},
          {"n_train", s.n_train},
          {"n_test", s.n_test},
          {"noise", s.noise},
          {"seed", s.seed},
          {"n_cues", s.n_cues}};
}

// ---------------------------------------------------------------------------
// Relative encodings

inline Matrix squared_edm(const Matrix& coords) {
  const std::size_t n = coords.rows();
  Matrix d(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < coords.cols(); ++c) {
        const double diff = coords(i, c) - coords(j, c);
        s += diff * diff;
      }
      d(i, j) = d(j, i) = s;
    }
  return d;
}

inline Matrix normal_dot_rpe(const Matrix& normals) { return matmul_nt(normals, normals); }

/// n×n×2 encoding: squared EDM in channel 0, normal dot products in channel 1.
inline RelativeEncoding point_cloud_rpe(const PointCloud& pc) {
  return RelativeEncoding::from_channels({squared_edm(pc.coords), normal_dot_rpe(pc.normals)});
}

/// S[i,2j] = sin(i / 10000^(j/d_pe)), S[i,2j+1] = cos(i / 10000^(j/d_pe)).
inline Matrix sinusoid_table(std::size_t n, std::size_t d_pe) {
  if (d_pe == 0 || d_pe % 2 != 0) throw std::invalid_argument("sinusoid_rpe: d_pe must be even and positive");
  Matrix s(n, d_pe);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d_pe / 2; ++j) {
      const double angle = static_cast<double>(i) / std::pow(10000.0, static_cast<double>(j) / static_cast<double>(d_pe));
      s(i, 2 * j) = std::sin(angle);
      s(i, 2 * j + 1) = std::cos(angle);
    }
  return s;
}

/// Lazy X_R[i,j,k] = S[i,k]·S[j,k].
inline RelativeEncoding sinusoid_rpe(std::size_t n, std::size_t d_pe) {
  return RelativeEncoding::hadamard(sinusoid_table(n, d_pe));
}

/// Channels I, Â, Â², ... up to `hops`, with Â the row-normalized adjacency.
inline RelativeEncoding adjacency_rpe(const Matrix& adjacency, std::size_t hops) {
  const std::size_t n = adjacency.rows();
  if (adjacency.cols() != n) throw std::invalid_argument("adjacency_rpe: adjacency must be square");
  Matrix a = adjacency;
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j) deg += a(i, j);
    if (deg > 0.0)
      for (std::size_t j = 0; j < n; ++j) a(i, j) /= deg;
  }
  std::vector<Matrix> channels{Matrix::identity(n)};
  for (std::size_t h = 0; h < hops; ++h) channels.push_back(matmul(channels.back(), a));
  return RelativeEncoding::from_channels(channels);
}

// ---------------------------------------------------------------------------
// Rotations

/// Uniform proper rotation from a normalized Gaussian quaternion.
inline Matrix random_rotation(Rng& rng) {
  double q[4];
  double norm = 0.0;
  do {
    norm = 0.0;
    for (double& v : q) norm += (v = rng.normal()) * v;
  } while (norm < 1e-12);
  norm = std::sqrt(norm);
  const double w = q[0] / norm, x = q[1] / norm, y = q[2] / norm, z = q[3] / norm;
  return Matrix(3, 3,
                {1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
                 2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
                 2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)});
}

inline double det3(const Matrix& m) {
  return m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0)) +
         m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
}

/// Rows p ↦ R·p.
inline Matrix rotate_rows(const Matrix& points, const Matrix& r) { return matmul_nt(points, r); }

inline PointCloud rotate(const PointCloud& pc, const Matrix& r) {
  return {rotate_rows(pc.coords, r), rotate_rows(pc.normals, r), pc.label};
}

// ---------------------------------------------------------------------------
// Toy shapes

inline constexpr std::array<const char*, 4> kShapeNames{"sphere", "cube", "cylinder", "torus"};

namespace detail {

inline void normalize3(double* v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  for (int c = 0; c < 3; ++c) v[c] /= n;
}

/// One surface point and its outward normal for shape `cls`.
inline void sample_surface(std::size_t cls, Rng& rng, double* p, double* nrm) {
  switch (cls) {
    case 0: {  // unit sphere
      do {
        for (int c = 0; c < 3; ++c) p[c] = rng.normal();
      } while (p[0] * p[0] + p[1] * p[1] + p[2] * p[2] < 1e-12);
      normalize3(p);
      for (int c = 0; c < 3; ++c) nrm[c] = p[c];
      break;
    }
    case 1: {  // surface of [-1,1]^3
      const std::size_t face = rng.below(6);
      const std::size_t axis = face / 2;
      const double sign = face % 2 == 0 ? 1.0 : -1.0;
      for (std::size_t c = 0; c < 3; ++c) {
        p[c] = c == axis ? sign : 2.0 * rng.uniform() - 1.0;
        nrm[c] = c == axis ? sign : 0.0;
      }
      break;
    }
    case 2: {  // closed cylinder, radius 1, z in [-1,1]; area-proportional parts
      const double u = rng.uniform() * 6.0 * std::numbers::pi;
      if (u < 4.0 * std::numbers::pi) {
        const double t = 2.0 * std::numbers::pi * rng.uniform();
        p[0] = std::cos(t); p[1] = std::sin(t); p[2] = 2.0 * rng.uniform() - 1.0;
        nrm[0] = p[0]; nrm[1] = p[1]; nrm[2] = 0.0;
      } else {
        const double rad = std::sqrt(rng.uniform()), t = 2.0 * std::numbers::pi * rng.uniform();
        const double sign = rng.uniform() < 0.5 ? 1.0 : -1.0;
        p[0] = rad * std::cos(t); p[1] = rad * std::sin(t); p[2] = sign;
        nrm[0] = 0.0; nrm[1] = 0.0; nrm[2] = sign;
      }
      break;
    }
    case 3: {  // torus, R = 1, r = 0.4, area-uniform by rejection
      constexpr double big = 1.0, small = 0.4;
      double u, v;
      do {
        u = 2.0 * std::numbers::pi * rng.uniform();
        v = 2.0 * std::numbers::pi * rng.uniform();
      } while (rng.uniform() * (big + small) > big + small * std::cos(v));
      p[0] = (big + small * std::cos(v)) * std::cos(u);
      p[1] = (big + small * std::cos(v)) * std::sin(u);
      p[2] = small * std::sin(v);
      nrm[0] = std::cos(v) * std::cos(u); nrm[1] = std::cos(v) * std::sin(u); nrm[2] = std::sin(v);
      break;
    }
    default: throw std::invalid_argument("unsupported shape class");
  }
}

}  // namespace detail

/// Centers the cloud and divides by the distance of the farthest point.
inline void normalize_cloud(PointCloud& pc) {
  const std::size_t n = pc.coords.rows();
  double mean[3] = {0, 0, 0};
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) mean[c] += pc.coords(i, c) / static_cast<double>(n);
  double far = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) {
      pc.coords(i, c) -= mean[c];
      s += pc.coords(i, c) * pc.coords(i, c);
    }
    far = std::max(far, std::sqrt(s));
  }
  if (far > 0.0) pc.coords *= 1.0 / far;
}

/// One cloud of class `cls`: surface samples under a random axis stretch in
/// [0.75, 1.25], with Gaussian noise on points and normals.
inline PointCloud make_shape(std::size_t cls, std::size_t n, double noise, Rng& rng) {
  PointCloud pc{Matrix(n, 3), Matrix(n, 3), cls};
  double stretch[3];
  for (double& s : stretch) s = 0.75 + 0.5 * rng.uniform();
  for (std::size_t i = 0; i < n; ++i) {
    double p[3], nrm[3];
    detail::sample_surface(cls, rng, p, nrm);
    for (int c = 0; c < 3; ++c) {
      p[c] = p[c] * stretch[c] + noise * rng.normal();
      nrm[c] = nrm[c] / stretch[c] + noise * rng.normal();
    }
    detail::normalize3(nrm);
    for (int c = 0; c < 3; ++c) {
      pc.coords(i, c) = p[c];
      pc.normals(i, c) = nrm[c];
    }
  }
  normalize_cloud(pc);
  return pc;
}

struct ShapeDataset {
  std::vector<PointCloud> train, test;
};

/// Balanced classes (round-robin labels); each cloud also gets a random
/// rotation so orientation carries no class information.
inline ShapeDataset gen_toy_shapes(const ToyDatasetSpec& spec) {
  if (spec.kind != ToyKind::Shapes3d) throw std::invalid_argument("gen_toy_shapes: spec kind must be shapes3d");
  if (spec.n_classes < 2 || spec.n_classes > kShapeNames.size())
    throw std::invalid_argument("unsupported class count: " + std::to_string(spec.n_classes));
  if (spec.n_tokens == 0) throw std::invalid_argument("gen_toy_shapes: n_tokens must be positive");
  Rng base(spec.seed);
  ShapeDataset ds;
  auto make = [&](std::size_t count, std::string_view tag, std::vector<PointCloud>& out) {
    Rng rng = base.split(tag);
    for (std::size_t i = 0; i < count; ++i) {
      PointCloud pc = make_shape(i % spec.n_classes, spec.n_tokens, spec.noise, rng);
      out.push_back(rotate(pc, random_rotation(rng)));
    }
  };
  make(spec.n_train, "train", ds.train);
  make(spec.n_test, "test", ds.test);
  return ds;
}

/// Token features: coordinates followed by normals (n×6).
inline Matrix point_tokens(const PointCloud& pc) { return hconcat(pc.coords, pc.normals); }

// ---------------------------------------------------------------------------
// Sequence parity

struct SeqExample {
  std::vector<int> tokens;  // bit + 2·cue
  std::size_t label = 0;
};

/// Parity of the bits at cued positions.
inline std::size_t seq_parity_label(const std::vector<int>& tokens) {
  std::size_t ones = 0;
  for (int t : tokens)
    if (t == 3) ++ones;
  return ones % 2;
}

struct SeqDataset {
  std::vector<SeqExample> train, test;
};

inline SeqDataset gen_seq_parity(const ToyDatasetSpec& spec) {
  if (spec.kind != ToyKind::SeqParity) throw std::invalid_argument("gen_seq_parity: spec kind must be seq_parity");
  if (spec.n_cues == 0 || spec.n_cues > spec.n_tokens) throw std::invalid_argument("gen_seq_parity: invalid cue count");
  Rng base(spec.seed);
  SeqDataset ds;
  auto make = [&](std::size_t count, std::string_view tag, std::vector<SeqExample>& out) {
    Rng rng = base.split(tag);
    for (std::size_t i = 0; i < count; ++i) {
      SeqExample ex;
      ex.tokens.resize(spec.n_tokens);
      for (int& t : ex.tokens) t = static_cast<int>(rng.below(2));
      // Cued positions: partial Fisher-Yates over all positions.
      std::vector<std::size_t> pos(spec.n_tokens);
      for (std::size_t p = 0; p < pos.size(); ++p) pos[p] = p;
      for (std::size_t c = 0; c < spec.n_cues; ++c) {
        std::swap(pos[c], pos[c + rng.below(pos.size() - c)]);
        ex.tokens[pos[c]] += 2;
      }
      ex.label = seq_parity_label(ex.tokens);
      out.push_back(std::move(ex));
    }
  };
  make(spec.n_train, "train", ds.train);
  make(spec.n_test, "test", ds.test);
  return ds;
}

// ---------------------------------------------------------------------------
// Export / import: <prefix>.bin holds little-endian doubles (coords, normals,
// label per cloud); <prefix>.json is the manifest.

inline nlohmann::json export_clouds(const std::string& prefix, const std::vector<PointCloud>& clouds,
                                    const ToyDatasetSpec& spec) {
  std::ofstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open " + prefix + ".bin");
  std::uint64_t checksum = 0xCBF29CE484222325ULL;
  auto put = [&](double v) {
    unsigned char b[8];
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int i = 0; i < 8; ++i) {
      b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
      checksum = (checksum ^ b[i]) * 0x100000001B3ULL;
    }
    bin.write(reinterpret_cast<const char*>(b), 8);
  };
  for (const auto& pc : clouds) {
    for (double v : pc.coords.data()) put(v);
    for (double v : pc.normals.data()) put(v);
    put(static_cast<double>(pc.label));
  }
  nlohmann::json manifest{{"spec", to_json(spec)},
                          {"seed", spec.seed},
                          {"count", clouds.size()},
                          {"n_tokens", clouds.empty() ? 0 : clouds.front().coords.rows()},
                          {"fnv1a64", checksum}};
  std::ofstream(prefix + ".json") << manifest.dump(2) << '\n';
  return manifest;
}

inline std::vector<PointCloud> import_clouds(const std::string& prefix) {
  std::ifstream mf(prefix + ".json");
  if (!mf) throw std::runtime_error("cannot open " + prefix + ".json");
  const auto manifest = nlohmann::json::parse(mf);
  const std::size_t count = manifest.at("count"), n = manifest.at("n_tokens");
  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open " + prefix + ".bin");
  std::uint64_t checksum = 0xCBF29CE484222325ULL;
  auto get = [&] {
    unsigned char b[8];
    bin.read(reinterpret_cast<char*>(b), 8);
    if (!bin) throw std::runtime_error("dataset file truncated");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
      bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
      checksum = (checksum ^ b[i]) * 0x100000001B3ULL;
    }
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  };
  std::vector<PointCloud> clouds;
  for (std::size_t c = 0; c < count; ++c) {
    PointCloud pc{Matrix(n, 3), Matrix(n, 3), 0};
    for (double& v : pc.coords.data()) v = get();
    for (double& v : pc.normals.data()) v = get();
    pc.label = static_cast<std::size_t>(get());
    clouds.push_back(std::move(pc));
  }
  if (checksum != manifest.at("fnv1a64").get<std::uint64_t>()) throw std::runtime_error("dataset checksum mismatch");
  return clouds;
}

}  // namespace sft
