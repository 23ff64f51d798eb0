#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "steerfair/error.hpp"

namespace steerfair::numerics {

// Four independent accumulators: the compiler will not reassociate a single
// floating-point chain, so this is where most of the forward pass speed comes from.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw error(errc::dimension_mismatch, "dot: length mismatch");
  return dot(a.data(), b.data(), a.size());
}

inline double norm(std::span<const double> v) {
  // scaled accumulation so tiny and huge entries both survive
  double scale = 0, ssq = 1;
  for (double x : v) {
    if (x == 0) continue;
    double ax = std::abs(x);
    if (scale < ax) {
      ssq = 1 + ssq * (scale / ax) * (scale / ax);
      scale = ax;
    } else {
      ssq += (ax / scale) * (ax / scale);
    }
  }
  return scale * std::sqrt(ssq);
}

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) throw error(errc::dimension_error, "matrix data size does not match shape");
  }
  static Matrix from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return {};
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != m.cols_) throw error(errc::dimension_error, "ragged rows");
      std::copy(rows[r].begin(), rows[r].end(), m.row_ptr(r));
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double* row_ptr(std::size_t r) { return data_.data() + r * cols_; }
  const double* row_ptr(std::size_t r) const { return data_.data() + r * cols_; }
  std::span<const double> row(std::size_t r) const { return {row_ptr(r), cols_}; }
  std::span<double> row(std::size_t r) { return {row_ptr(r), cols_}; }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  void check_valid(const char* who) const {
    if (rows_ < 1 || cols_ < 1) throw error(errc::dimension_error, std::string(who) + ": empty matrix");
    for (double x : data_)
      if (!std::isfinite(x)) throw error(errc::dimension_error, std::string(who) + ": non-finite entry");
  }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

class UnitVector {
 public:
  UnitVector() = default;
  // normalizes; throws ZeroVector on a (near-)zero input
  static UnitVector normalized(std::span<const double> v) {
    double n = norm(v);
    if (!(n >= 1e-12)) throw error(errc::zero_vector, "cannot normalize a zero vector");
    UnitVector u;
    u.c_.reserve(v.size());
    for (double x : v) u.c_.push_back(x / n);
    return u;
  }
  // trusts the caller but still checks the invariant
  static UnitVector from_unit(std::vector<double> v) {
    if (std::abs(norm(v) - 1.0) > 1e-9) throw error(errc::invalid_argument, "vector is not unit length");
    UnitVector u;
    u.c_ = std::move(v);
    return u;
  }
  std::size_t dim() const { return c_.size(); }
  const std::vector<double>& components() const { return c_; }
  double operator[](std::size_t i) const { return c_[i]; }
  void negate() {
    for (double& x : c_) x = -x;
  }
  bool operator==(const UnitVector&) const = default;

 private:
  std::vector<double> c_;
};

struct PcaResult {
  UnitVector direction;
  double explained_variance_ratio = 0;
  std::vector<double> mean;
};

namespace detail {

// C = Xc^T Xc for mean-centered rows
inline std::vector<double> centered_scatter(const Matrix& data, std::vector<double>& mean) {
  const std::size_t n = data.rows(), d = data.cols();
  mean.assign(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) mean[c] += data(r, c);
  for (double& m : mean) m /= double(n);
  std::vector<double> xc(n * d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) xc[r * d + c] = data(r, c) - mean[c];
  std::vector<double> cov(d * d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const double* x = &xc[r * d];
    for (std::size_t i = 0; i < d; ++i) {
      if (x[i] == 0) continue;
      double* ci = &cov[i * d];
      for (std::size_t j = 0; j < d; ++j) ci[j] += x[i] * x[j];
    }
  }
  return cov;
}

inline std::vector<double> sym_matvec(const std::vector<double>& a, std::size_t d, const std::vector<double>& v) {
  std::vector<double> out(d);
  for (std::size_t i = 0; i < d; ++i) out[i] = dot(&a[i * d], v.data(), d);
  return out;
}

inline std::vector<double> sym_square(const std::vector<double>& a, std::size_t d) {
  std::vector<double> out(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      double aik = a[i * d + k];
      if (aik == 0) continue;
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += aik * a[k * d + j];
    }
  // keep it exactly symmetric and O(1) in scale
  double tr = 0;
  for (std::size_t i = 0; i < d; ++i) tr += out[i * d + i];
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) {
      double s = 0.5 * (out[i * d + j] + out[j * d + i]) / tr;
      out[i * d + j] = out[j * d + i] = s;
    }
  return out;
}

inline void normalize_in_place(std::vector<double>& v) {
  double n = norm(v);
  for (double& x : v) x /= n;
}

}  // namespace detail

// Top principal direction of mean-centered rows.
// Power iteration on a repeatedly squared scatter matrix (gap ratio r becomes
// r^1024), then polished on the scatter matrix itself.
inline PcaResult pca_first_component(const Matrix& data) {
  if (data.rows() < 2) throw error(errc::dimension_error, "pca needs at least 2 rows");
  data.check_valid("pca");
  const std::size_t d = data.cols();
  PcaResult res;
  auto cov = detail::centered_scatter(data, res.mean);
  double trace = 0;
  for (std::size_t i = 0; i < d; ++i) trace += cov[i * d + i];

  double max_abs = 0;
  for (double x : data.data()) max_abs = std::max(max_abs, std::abs(x));
  if (!(trace > 1e-24 * std::max(1.0, max_abs * max_abs) * double(data.rows())))
    throw error(errc::degenerate_data, "all rows identical");

  // start from the heaviest column of the scatter matrix
  std::size_t best = 0;
  for (std::size_t i = 1; i < d; ++i)
    if (cov[i * d + i] > cov[best * d + best]) best = i;
  std::vector<double> v(cov.begin() + best * d, cov.begin() + (best + 1) * d);
  detail::normalize_in_place(v);

  std::vector<double> powered = cov;
  for (int s = 0; s < 10; ++s) powered = detail::sym_square(powered, d);
  for (int it = 0; it < 8; ++it) {
    auto w = detail::sym_matvec(powered, d, v);
    if (norm(w) < 1e-300) break;  // start vector orthogonal to the top space; fall through to plain power
    v = std::move(w);
    detail::normalize_in_place(v);
  }
  for (int it = 0; it < 100000; ++it) {
    auto w = detail::sym_matvec(cov, d, v);
    detail::normalize_in_place(w);
    double change = 0;
    for (std::size_t i = 0; i < d; ++i) change = std::max(change, std::abs(w[i] - v[i]));
    v = std::move(w);
    if (change < 1e-15 && it >= 4) break;
  }

  auto cv = detail::sym_matvec(cov, d, v);
  double lambda = dot(v.data(), cv.data(), d);
  res.explained_variance_ratio = std::clamp(lambda / trace, 0.0, 1.0);

  // orient toward the uncentered data: mean projection >= 0, ties by first nonzero component
  double proj = dot(res.mean.data(), v.data(), d);
  bool flip = false;
  if (std::abs(proj) > 1e-12 * std::max(1.0, max_abs)) {
    flip = proj < 0;
  } else {
    for (double x : v)
      if (std::abs(x) > 1e-12) {
        flip = x < 0;
        break;
      }
  }
  if (flip)
    for (double& x : v) x = -x;
  res.direction = UnitVector::normalized(v);
  return res;
}

struct OrthonormalBasis {
  std::vector<UnitVector> vectors;
  std::vector<std::size_t> dropped_rows;  // rank-deficient inputs
};

// Sequential Gram-Schmidt with a second re-orthogonalization pass, in row order.
inline OrthonormalBasis qr_orthonormal_basis(const Matrix& vectors) {
  vectors.check_valid("qr");
  const std::size_t d = vectors.cols();
  OrthonormalBasis out;
  std::vector<std::vector<double>> basis;
  for (std::size_t r = 0; r < vectors.rows(); ++r) {
    auto row = vectors.row(r);
    double original = norm(row);
    if (original < 1e-12) throw error(errc::zero_vector, "qr: input row " + std::to_string(r) + " is zero");
    std::vector<double> res(row.begin(), row.end());
    for (int pass = 0; pass < 2; ++pass) {
      // classical projections against the current residual
      std::vector<double> coef(basis.size());
      for (std::size_t b = 0; b < basis.size(); ++b) coef[b] = dot(basis[b].data(), res.data(), d);
      for (std::size_t b = 0; b < basis.size(); ++b)
        for (std::size_t i = 0; i < d; ++i) res[i] -= coef[b] * basis[b][i];
    }
    double rn = norm(res);
    if (rn < 1e-8 * original) {
      out.dropped_rows.push_back(r);
      continue;
    }
    for (double& x : res) x /= rn;
    basis.push_back(res);
  }
  for (auto& b : basis) out.vectors.push_back(UnitVector::normalized(b));
  return out;
}

// Average of the orthonormal basis, divided by the row count (not the rank).
inline std::vector<double> combine_directions(const Matrix& vectors) {
  auto basis = qr_orthonormal_basis(vectors);
  std::vector<double> out(vectors.cols(), 0.0);
  for (const auto& u : basis.vectors)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += u[i];
  for (double& x : out) x /= double(vectors.rows());
  return out;
}

inline std::vector<double> l2_renormalize(std::span<const double> updated, double target_norm) {
  if (!(target_norm >= 0) || !std::isfinite(target_norm))
    throw error(errc::invalid_argument, "target norm must be finite and >= 0");
  std::vector<double> out(updated.begin(), updated.end());
  if (target_norm == 0) {
    std::fill(out.begin(), out.end(), 0.0);
    return out;
  }
  double n = norm(updated);
  if (n < 1e-12) throw error(errc::zero_vector, "cannot renormalize a zero vector");
  double s = target_norm / n;
  for (double& x : out) x *= s;
  return out;
}

}  // namespace steerfair::numerics
