#pragma once

#include <Eigen/Eigenvalues>
#include <vector>

#include "chronoscope/core/io.hpp"
#include "chronoscope/survival/cox.hpp"

namespace chronoscope::surv {

struct PcaProjection {
  Vector mean;
  Matrix components;  // n_components × E, orthonormal rows
  Vector explained_variance;
  bool rank_deficient = false;

  Matrix project(const Matrix& X) const {
    require(X.cols() == mean.size(), "pca: feature dimension mismatch");
    return (X.rowwise() - mean.transpose()) * components.transpose();
  }
};

// Centered (not scaled) PCA from the sample covariance. Components with variance below
// 1e-10 of the leading one are dropped and the projection is flagged rank-deficient.
inline PcaProjection fit_pca(const Matrix& X, int n_components = 50) {
  require(n_components > 0, "fit_pca: n_components must be positive");
  require(X.rows() > n_components, "fit_pca: need more samples than components");
  require(X.allFinite(), "fit_pca: non-finite feature value");
  PcaProjection p;
  p.mean = X.colwise().mean().transpose();
  const Matrix C = X.rowwise() - p.mean.transpose();
  const Matrix cov = (C.transpose() * C) / static_cast<double>(X.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  if (es.info() != Eigen::Success) fail(ErrorKind::Numeric, "fit_pca: eigen-decomposition failed");
  const auto E = cov.rows();
  const double top = std::max(es.eigenvalues()(E - 1), 0.0);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index k = E - 1; k >= 0 && static_cast<int>(keep.size()) < n_components; --k) {
    if (es.eigenvalues()(k) > 1e-10 * top && top > 0.0) keep.push_back(k);
  }
  p.rank_deficient = static_cast<int>(keep.size()) < std::min<int>(n_components, static_cast<int>(E));
  p.components.resize(static_cast<Eigen::Index>(keep.size()), E);
  p.explained_variance.resize(static_cast<Eigen::Index>(keep.size()));
  for (std::size_t r = 0; r < keep.size(); ++r) {
    Vector v = es.eigenvectors().col(keep[r]);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;  // deterministic sign
    p.components.row(static_cast<Eigen::Index>(r)) = v.transpose();
    p.explained_variance(static_cast<Eigen::Index>(r)) = es.eigenvalues()(keep[r]);
  }
  return p;
}

namespace detail {

inline std::vector<double> to_vec(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline Vector from_vec(const std::vector<double>& v) { return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())); }

}  // namespace detail

inline json to_json(const PcaProjection& p) {
  json comps = json::array();
  for (Eigen::Index r = 0; r < p.components.rows(); ++r) comps.push_back(detail::to_vec(p.components.row(r).transpose()));
  return {{"mean", detail::to_vec(p.mean)},
          {"components", comps},
          {"explained_variance", detail::to_vec(p.explained_variance)},
          {"rank_deficient", p.rank_deficient}};
}

inline PcaProjection pca_from_json(const json& j) {
  PcaProjection p;
  p.mean = detail::from_vec(j.at("mean").get<std::vector<double>>());
  const auto& comps = j.at("components");
  p.components.resize(static_cast<Eigen::Index>(comps.size()), p.mean.size());
  for (std::size_t r = 0; r < comps.size(); ++r) {
    const auto row = comps[r].get<std::vector<double>>();
    require(static_cast<Eigen::Index>(row.size()) == p.mean.size(), "pca: component length mismatch");
    p.components.row(static_cast<Eigen::Index>(r)) = detail::from_vec(row).transpose();
  }
  p.explained_variance = detail::from_vec(j.at("explained_variance").get<std::vector<double>>());
  p.rank_deficient = j.value("rank_deficient", false);
  return p;
}

}  // namespace chronoscope::surv
