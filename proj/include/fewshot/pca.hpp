#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fewshot/error.hpp"
#include "fewshot/tensor.hpp"

namespace fewshot {

// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
// eigenvalues in descending order with matching eigenvector columns.
// Converges when the off-diagonal Frobenius norm falls below `tol`.
struct JacobiEigen {
  std::vector<double> values;
  std::vector<std::vector<double>> vectors;  // vectors[j] is the j-th eigenvector
};

inline JacobiEigen jacobi_eigen(std::vector<double> a, std::int64_t n, double tol = 1e-10) {
  std::vector<std::vector<double>> v(std::size_t(n), std::vector<double>(std::size_t(n), 0.0));
  for (std::int64_t i = 0; i < n; ++i) v[std::size_t(i)][std::size_t(i)] = 1.0;
  auto at = [&](std::int64_t r, std::int64_t c) -> double& { return a[std::size_t(r * n + c)]; };

  const int max_sweeps = 64;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0;
    for (std::int64_t p = 0; p < n; ++p)
      for (std::int64_t q = p + 1; q < n; ++q) off += at(p, q) * at(p, q);
    if (std::sqrt(2.0 * off) <= tol) break;

    for (std::int64_t p = 0; p < n; ++p) {
      for (std::int64_t q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (apq == 0.0) continue;
        const double app = at(p, p), aqq = at(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::int64_t i = 0; i < n; ++i) {
          const double aip = at(i, p), aiq = at(i, q);
          at(i, p) = c * aip - s * aiq;
          at(i, q) = s * aip + c * aiq;
        }
        for (std::int64_t i = 0; i < n; ++i) {
          const double api = at(p, i), aqi = at(q, i);
          at(p, i) = c * api - s * aqi;
          at(q, i) = s * api + c * aqi;
        }
        for (std::int64_t i = 0; i < n; ++i) {
          const double vip = v[std::size_t(i)][std::size_t(p)];
          const double viq = v[std::size_t(i)][std::size_t(q)];
          v[std::size_t(i)][std::size_t(p)] = c * vip - s * viq;
          v[std::size_t(i)][std::size_t(q)] = s * vip + c * viq;
        }
      }
    }
  }

  JacobiEigen out;
  std::vector<std::int64_t> order(std::size_t(n), 0);
  for (std::int64_t i = 0; i < n; ++i) order[std::size_t(i)] = i;
  std::sort(order.begin(), order.end(),
            [&](std::int64_t x, std::int64_t y) { return at(x, x) > at(y, y); });
  for (auto j : order) {
    out.values.push_back(at(j, j));
    std::vector<double> col(std::size_t(n), 0.0);
    for (std::int64_t i = 0; i < n; ++i) col[std::size_t(i)] = v[std::size_t(i)][std::size_t(j)];
    out.vectors.push_back(std::move(col));
  }
  return out;
}

struct PcaProjection {
  std::vector<double> pc1;
  std::vector<double> pc2;
  std::vector<std::int32_t> labels;
  double var1 = 0, var2 = 0;  // eigenvalues of the two components
};

// Centers the rows, eigendecomposes the covariance (divisor N-1), projects
// onto the top-2 eigenvectors. Sign convention: the largest-magnitude
// component of each eigenvector is positive. Errors when every point is
// identical (no variance at all); a rank-1 cloud is fine and simply puts
// ~zero scores on pc2.
template <typename S>
PcaProjection pca_project(const Tensor<S>& features, const std::vector<std::int32_t>& labels) {
  if (features.rank() != 2) throw ShapeError("pca_project: features must be [N,D]");
  const std::int64_t n = features.dim(0), d = features.dim(1);
  if (n < 3) throw ShapeError("pca_project: need N >= 3 rows, got " + std::to_string(n));
  if (std::int64_t(labels.size()) != n) throw ShapeError("pca_project: label count mismatch");

  std::vector<double> mean(std::size_t(d), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j) mean[std::size_t(j)] += double(features[i * d + j]);
  for (auto& m : mean) m /= double(n);

  std::vector<double> centered(std::size_t(n * d));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j)
      centered[std::size_t(i * d + j)] = double(features[i * d + j]) - mean[std::size_t(j)];

  std::vector<double> cov(std::size_t(d * d), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t r = 0; r < d; ++r) {
      const double xr = centered[std::size_t(i * d + r)];
      if (xr == 0.0) continue;
      for (std::int64_t c = r; c < d; ++c)
        cov[std::size_t(r * d + c)] += xr * centered[std::size_t(i * d + c)];
    }
  double trace = 0;
  for (std::int64_t r = 0; r < d; ++r) {
    for (std::int64_t c = r; c < d; ++c) {
      cov[std::size_t(r * d + c)] /= double(n - 1);
      cov[std::size_t(c * d + r)] = cov[std::size_t(r * d + c)];
    }
    trace += cov[std::size_t(r * d + r)];
  }
  if (!(trace > 0.0))
    throw DataError("pca_project: input has zero variance (all points identical)");

  JacobiEigen eig = jacobi_eigen(std::move(cov), d);
  PcaProjection out;
  out.labels = labels;
  out.var1 = eig.values[0];
  out.var2 = d > 1 ? eig.values[1] : 0.0;
  std::vector<std::vector<double>> pcs = {eig.vectors[0],
                                          d > 1 ? eig.vectors[1] : std::vector<double>(1, 0.0)};
  for (auto& pc : pcs) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < pc.size(); ++j)
      if (std::abs(pc[j]) > std::abs(pc[arg])) arg = j;
    if (pc[arg] < 0)
      for (auto& x : pc) x = -x;
  }
  out.pc1.resize(std::size_t(n));
  out.pc2.resize(std::size_t(n));
  for (std::int64_t i = 0; i < n; ++i) {
    double s1 = 0, s2 = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      s1 += centered[std::size_t(i * d + j)] * pcs[0][std::size_t(j)];
      if (d > 1) s2 += centered[std::size_t(i * d + j)] * pcs[1][std::size_t(j)];
    }
    out.pc1[std::size_t(i)] = s1;
    out.pc2[std::size_t(i)] = s2;
  }
  return out;
}

std::string pca_to_csv(const PcaProjection& p);

}  // namespace fewshot
