#pragma once

// Ridge-penalized Cox proportional hazards with Efron ties, plus Breslow baseline re-estimation.

#include <Eigen/Dense>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "chronoscope/core/io.hpp"
#include "chronoscope/survival/km.hpp"

namespace chronoscope::surv {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct CoxDiagnostics {
  int iterations = 0;
  double grad_max = 0.0;
  bool converged = false;
  std::vector<double> lambda_path;    // every λ tried, last one is the one used
  std::vector<double> objective_path; // penalized objective after each accepted step, final λ
  std::vector<std::size_t> dropped_columns;
};

struct CoxModel {
  Vector beta;  // original feature scale
  double lambda = 0.0;
  StepFunction baseline;  // cumulative H_0; empty until estimate_baseline_hazard
  CoxDiagnostics diagnostics;
};

struct CoxOptions {
  int max_iter = 100;
  double grad_tol = 1e-7;
  double rel_tol = 1e-9;
  double beta_bound = 20.0;  // on the standardized scale; beyond this the fit is treated as separated
  double lambda_max = 1e2;
};

namespace detail {

struct EfronTerms {
  double ll = 0.0;
  Vector grad;
  Matrix hess;  // of the log partial likelihood
};

// Efron log partial likelihood and derivatives. `order` sorts rows by time descending.
inline EfronTerms efron(const Matrix& X, const SurvivalData& d, const std::vector<std::size_t>& order, const Vector& beta,
                        bool derivatives) {
  const auto n = order.size();
  const auto p = X.cols();
  const Vector eta = X * beta;
  const double m = n ? eta.maxCoeff() : 0.0;
  EfronTerms r;
  r.grad = Vector::Zero(p);
  r.hess = Matrix::Zero(p, p);
  double s_r = 0.0;
  Vector z_r = Vector::Zero(p);
  Matrix m_r = Matrix::Zero(p, p);
  std::size_t i = 0;
  while (i < n) {
    const double t = d.time[order[i]];
    double s_d = 0.0;
    Vector z_d = Vector::Zero(p);
    Matrix m_d = Matrix::Zero(p, p);
    int events = 0;
    std::size_t j = i;
    for (; j < n && d.time[order[j]] == t; ++j) {
      const auto k = static_cast<Eigen::Index>(order[j]);
      const double w = std::exp(eta(k) - m);
      s_r += w;
      if (derivatives) {
        z_r += w * X.row(k).transpose();
        m_r.noalias() += w * X.row(k).transpose() * X.row(k);
      }
      if (d.event[order[j]]) {
        ++events;
        s_d += w;
        r.ll += eta(k);
        if (derivatives) {
          r.grad += X.row(k).transpose();
          z_d += w * X.row(k).transpose();
          m_d.noalias() += w * X.row(k).transpose() * X.row(k);
        }
      }
    }
    for (int l = 0; l < events; ++l) {
      const double f = static_cast<double>(l) / events;
      const double phi = s_r - f * s_d;
      r.ll -= std::log(phi) + m;
      if (derivatives) {
        const Vector z = z_r - f * z_d;
        r.grad -= z / phi;
        r.hess -= (m_r - f * m_d) / phi - z * z.transpose() / (phi * phi);
      }
    }
    i = j;
  }
  return r;
}

inline std::vector<std::size_t> descending_time_order(const SurvivalData& d) {
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d.time[a] > d.time[b]; });
  return order;
}

struct NewtonResult {
  Vector beta;
  int iterations = 0;
  double grad_max = 0.0;
  bool converged = false;
  bool unbounded = false;
  std::vector<double> objective_path;
};

inline NewtonResult newton(const Matrix& Z, const SurvivalData& d, const std::vector<std::size_t>& order, double lambda,
                           const CoxOptions& opt) {
  const double n = static_cast<double>(d.size());
  const auto p = Z.cols();
  auto objective = [&](const Vector& b) { return efron(Z, d, order, b, false).ll / n - 0.5 * lambda * b.squaredNorm(); };
  NewtonResult r;
  r.beta = Vector::Zero(p);
  double f = objective(r.beta);
  r.objective_path.push_back(f);
  for (r.iterations = 0; r.iterations < opt.max_iter; ++r.iterations) {
    const auto t = efron(Z, d, order, r.beta, true);
    const Vector g = t.grad / n - lambda * r.beta;
    r.grad_max = p ? g.cwiseAbs().maxCoeff() : 0.0;
    if (!std::isfinite(r.grad_max)) return r;
    if (r.grad_max < opt.grad_tol) {
      r.converged = true;
      return r;
    }
    Matrix A = -(t.hess / n);
    A.diagonal().array() += lambda;
    Eigen::LDLT<Matrix> ldlt(A);
    Vector delta = ldlt.solve(g);
    if (ldlt.info() != Eigen::Success || !delta.allFinite()) {
      A.diagonal().array() += 1e-8 * (1.0 + A.diagonal().cwiseAbs().maxCoeff());
      delta = A.ldlt().solve(g);
    }
    double step = 1.0;
    double f_new = objective(r.beta + delta);
    while (!(f_new >= f) && step > 1e-10) {
      step *= 0.5;
      f_new = objective(r.beta + step * delta);
    }
    if (!(f_new >= f)) return r;  // no ascent direction left
    r.beta += step * delta;
    const double change = std::abs(f_new - f) / std::max(std::abs(f), 1e-300);
    f = f_new;
    r.objective_path.push_back(f);
    if (r.beta.cwiseAbs().maxCoeff() > opt.beta_bound) {
      r.unbounded = true;
      return r;
    }
    if (change < opt.rel_tol) {
      r.converged = true;
      ++r.iterations;
      const auto t2 = efron(Z, d, order, r.beta, true);
      r.grad_max = p ? (t2.grad / n - lambda * r.beta).cwiseAbs().maxCoeff() : 0.0;
      return r;
    }
  }
  return r;
}

}  // namespace detail

// Maximizes ℓ(β)/n − (λ/2)‖β_s‖² over standardized features (β_s = β·sd). λ is escalated ×10 on failure.
inline CoxModel fit_cox(const Matrix& X, const SurvivalData& d, double lambda = 1e-4, const CoxOptions& opt = {}) {
  require(X.rows() == static_cast<Eigen::Index>(d.size()), "fit_cox: feature rows do not match instances");
  require(d.size() >= 2, "fit_cox: need at least two instances");
  require(lambda >= 0.0, "fit_cox: penalizer must be non-negative");
  require(std::any_of(d.event.begin(), d.event.end(), [](bool e) { return e; }), "fit_cox: no events");
  require(X.allFinite(), "fit_cox: non-finite feature value");
  const auto n = X.rows();
  CoxModel model;
  const Vector mean = X.colwise().mean();
  Vector sd(X.cols());
  std::vector<Eigen::Index> keep;
  for (Eigen::Index c = 0; c < X.cols(); ++c) {
    sd(c) = std::sqrt((X.col(c).array() - mean(c)).square().sum() / static_cast<double>(n - 1));
    if (sd(c) > 1e-12 * (1.0 + std::abs(mean(c)))) {
      keep.push_back(c);
    } else {
      model.diagnostics.dropped_columns.push_back(static_cast<std::size_t>(c));
    }
  }
  Matrix Z(n, static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    Z.col(static_cast<Eigen::Index>(k)) = (X.col(keep[k]).array() - mean(keep[k])) / sd(keep[k]);
  }
  const auto order = detail::descending_time_order(d);
  double lam = lambda;
  for (;;) {
    model.diagnostics.lambda_path.push_back(lam);
    auto r = detail::newton(Z, d, order, lam, opt);
    if (r.converged && !r.unbounded) {
      model.beta = Vector::Zero(X.cols());
      for (std::size_t k = 0; k < keep.size(); ++k) model.beta(keep[k]) = r.beta(static_cast<Eigen::Index>(k)) / sd(keep[k]);
      model.lambda = lam;
      model.diagnostics.iterations = r.iterations;
      model.diagnostics.grad_max = r.grad_max;
      model.diagnostics.converged = true;
      model.diagnostics.objective_path = std::move(r.objective_path);
      return model;
    }
    const double next = lam == 0.0 ? 1e-4 : lam * 10.0;
    if (next > opt.lambda_max * (1.0 + 1e-12)) {
      std::ostringstream os;
      os << "fit_cox: no convergence" << (r.unbounded ? " (coefficients unbounded, complete separation suspected)" : "")
         << "; penalizer path:";
      for (double l : model.diagnostics.lambda_path) os << ' ' << l;
      fail(ErrorKind::Numeric, os.str());
    }
    lam = next;
  }
}

inline CoxModel fit_cox(const Matrix& X, const std::vector<TteInstance>& xs, double lambda = 1e-4, const CoxOptions& opt = {}) {
  return fit_cox(X, survival_data(xs), lambda, opt);
}

// Linear predictor βᵀx.
inline double predict_risk(const CoxModel& m, const Vector& x) {
  require(x.size() == m.beta.size(), "predict_risk: feature dimension mismatch");
  return m.beta.dot(x);
}

inline Vector predict_risks(const CoxModel& m, const Matrix& X) {
  require(X.cols() == m.beta.size(), "predict_risk: feature dimension mismatch");
  return X * m.beta;
}

// Breslow: H_0(t) = Σ_{event times ≤ t} d_k / Σ_{T_j ≥ t_k} exp(βᵀx_j).
inline CoxModel estimate_baseline_hazard(CoxModel m, const Matrix& X, const SurvivalData& d) {
  require(X.rows() == static_cast<Eigen::Index>(d.size()), "estimate_baseline_hazard: feature rows do not match instances");
  const Vector eta = predict_risks(m, X);
  const double shift = d.size() ? eta.maxCoeff() : 0.0;
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d.time[a] < d.time[b]; });
  // Suffix sums of exp(η − shift) give the risk-set totals.
  std::vector<double> suffix(order.size() + 1, 0.0);
  for (std::size_t i = order.size(); i-- > 0;) suffix[i] = suffix[i + 1] + std::exp(eta(static_cast<Eigen::Index>(order[i])) - shift);
  m.baseline = {};
  double acc = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double t = d.time[order[i]];
    std::size_t events = 0;
    std::size_t j = i;
    for (; j < order.size() && d.time[order[j]] == t; ++j) events += d.event[order[j]];
    if (events > 0) {
      if (!(suffix[i] > 0.0)) fail(ErrorKind::Numeric, "estimate_baseline_hazard: empty risk set at an event time");
      acc += static_cast<double>(events) / suffix[i] * std::exp(-shift);
      m.baseline.times.push_back(t);
      m.baseline.values.push_back(acc);
    }
    i = j;
  }
  return m;
}

inline CoxModel estimate_baseline_hazard(CoxModel m, const Matrix& X, const std::vector<TteInstance>& xs) {
  return estimate_baseline_hazard(std::move(m), X, survival_data(xs));
}

// S(t|x) = exp(−H_0(t)·exp(βᵀx)).
inline double survival_at(const CoxModel& m, const Vector& x, double t) {
  return std::exp(-m.baseline.at(t) * std::exp(predict_risk(m, x)));
}

// 1 − S(τ|x) for every row.
inline std::vector<double> risk_probabilities(const CoxModel& m, const Matrix& X, double tau) {
  const Vector eta = predict_risks(m, X);
  const double h = m.baseline.at(tau);
  std::vector<double> out(static_cast<std::size_t>(eta.size()));
  for (Eigen::Index i = 0; i < eta.size(); ++i) out[static_cast<std::size_t>(i)] = -std::expm1(-h * std::exp(eta(i)));
  return out;
}

inline json to_json(const CoxModel& m) {
  return {{"beta", std::vector<double>(m.beta.data(), m.beta.data() + m.beta.size())},
          {"lambda", m.lambda},
          {"baseline_times", m.baseline.times},
          {"baseline_values", m.baseline.values},
          {"diagnostics",
           {{"iterations", m.diagnostics.iterations},
            {"grad_max", m.diagnostics.grad_max},
            {"converged", m.diagnostics.converged},
            {"lambda_path", m.diagnostics.lambda_path},
            {"dropped_columns", m.diagnostics.dropped_columns}}}};
}

inline CoxModel cox_from_json(const json& j) {
  CoxModel m;
  const auto beta = j.at("beta").get<std::vector<double>>();
  m.beta = Eigen::Map<const Vector>(beta.data(), static_cast<Eigen::Index>(beta.size()));
  m.lambda = j.at("lambda").get<double>();
  m.baseline.times = j.value("baseline_times", std::vector<double>{});
  m.baseline.values = j.value("baseline_values", std::vector<double>{});
  require(m.baseline.times.size() == m.baseline.values.size(), "cox model: baseline times/values length mismatch");
  if (j.contains("diagnostics")) {
    const auto& d = j["diagnostics"];
    m.diagnostics.iterations = d.value("iterations", 0);
    m.diagnostics.grad_max = d.value("grad_max", 0.0);
    m.diagnostics.converged = d.value("converged", false);
    m.diagnostics.lambda_path = d.value("lambda_path", std::vector<double>{});
    m.diagnostics.dropped_columns = d.value("dropped_columns", std::vector<std::size_t>{});
  }
  return m;
}

}  // namespace chronoscope::surv
