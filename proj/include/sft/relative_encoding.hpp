// Pairwise relative features X_R[i, j, :] in three storage forms: a dense
// n×n×r tensor, a sparse coordinate list (missing pairs read as zeros), and a
// lazily evaluated pairwise Hadamard product of per-token vectors.
#pragma once

#include "sft/numerics.hpp"

#include <map>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace sft {

class RelativeEncoding {
 public:
  enum class Storage { Dense, Sparse, Hadamard };

  RelativeEncoding() = default;

  static RelativeEncoding dense(Tensor3 values) {
    if (values.d0 != values.d1) throw std::invalid_argument("RelativeEncoding: dense tensor must be n×n×r");
    RelativeEncoding e;
    e.storage_ = Storage::Dense;
    e.n_ = values.d0;
    e.r_ = values.d2;
    e.dense_ = std::move(values);
    return e;
  }

  /// Stacks n×n channel matrices into one n×n×c encoding (channel order kept).
  static RelativeEncoding from_channels(const std::vector<Matrix>& channels) {
    if (channels.empty()) throw std::invalid_argument("RelativeEncoding: no channels");
    const std::size_t n = channels.front().rows();
    Tensor3 t(n, n, channels.size());
    for (std::size_t c = 0; c < channels.size(); ++c) {
      if (channels[c].rows() != n || channels[c].cols() != n)
        throw std::invalid_argument("RelativeEncoding: channel shape mismatch");
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) t(i, j, c) = channels[c](i, j);
    }
    return dense(std::move(t));
  }

  static RelativeEncoding sparse(std::size_t n, std::size_t r) {
    RelativeEncoding e;
    e.storage_ = Storage::Sparse;
    e.n_ = n;
    e.r_ = r;
    return e;
  }

  /// A[i,j,k] = S[i,k]·S[j,k], evaluated on demand.
  static RelativeEncoding hadamard(Matrix token_features) {
    RelativeEncoding e;
    e.storage_ = Storage::Hadamard;
    e.n_ = token_features.rows();
    e.r_ = token_features.cols();
    e.factors_ = std::move(token_features);
    return e;
  }

  void set(std::size_t i, std::size_t j, std::span<const double> value) {
    check_index(i, j);
    if (value.size() != r_) throw std::invalid_argument("RelativeEncoding::set: feature width mismatch");
    switch (storage_) {
      case Storage::Dense:
        std::copy(value.begin(), value.end(), dense_.fiber(i, j).begin());
        break;
      case Storage::Sparse:
        sparse_[{i, j}] = std::vector<double>(value.begin(), value.end());
        break;
      case Storage::Hadamard:
        throw std::logic_error("RelativeEncoding::set: Hadamard encodings are read-only");
    }
  }

  /// Writes X_R[i, j, :] into out (length r).
  void get(std::size_t i, std::size_t j, std::span<double> out) const {
    check_index(i, j);
    switch (storage_) {
      case Storage::Dense: {
        auto f = dense_.fiber(i, j);
        std::copy(f.begin(), f.end(), out.begin());
        break;
      }
      case Storage::Sparse: {
        auto it = sparse_.find({i, j});
        if (it == sparse_.end()) std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(r_), 0.0);
        else std::copy(it->second.begin(), it->second.end(), out.begin());
        break;
      }
      case Storage::Hadamard:
        for (std::size_t k = 0; k < r_; ++k) out[k] = factors_(i, k) * factors_(j, k);
        break;
    }
  }

  double at(std::size_t i, std::size_t j, std::size_t c) const {
    std::vector<double> buf(r_);
    get(i, j, buf);
    return buf.at(c);
  }

  /// Materialized dense copy (for oracles and small problems).
  Tensor3 to_dense() const {
    Tensor3 t(n_, n_, r_);
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = 0; j < n_; ++j) get(i, j, t.fiber(i, j));
    return t;
  }

  std::size_t tokens() const { return n_; }
  std::size_t width() const { return r_; }
  Storage storage() const { return storage_; }
  std::size_t stored_pairs() const { return storage_ == Storage::Sparse ? sparse_.size() : n_ * n_; }

 private:
  void check_index(std::size_t i, std::size_t j) const {
    if (i >= n_ || j >= n_) throw std::out_of_range("RelativeEncoding: index out of range");
  }

  Storage storage_ = Storage::Dense;
  std::size_t n_ = 0;
  std::size_t r_ = 0;
  Tensor3 dense_;
  std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> sparse_;
  Matrix factors_;
};

}  // namespace sft
