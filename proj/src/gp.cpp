#include "stochfield/gp.hpp"

#include <cmath>

namespace stochfield {

void GPModel::validate() const {
  if (mean.size() != rep.dimension()) throw ConfigError("GP mean dimension does not match representation");
  if (mean.size() != kernel.dimension()) throw ConfigError("GP mean dimension does not match kernel");
  if (noise_var < 0.0) throw ConfigError("GP noise variance must be nonnegative");
  for (const GroupElement& h : rep.group().elements()) {
    if ((rep.matrix(h) * mean - mean).cwiseAbs().maxCoeff() > 1e-12)
      throw ConfigError("GP mean is not invariant under the fiber representation (rho(h) m != m)");
  }
}

Eigen::LLT<MatrixXd> chol_with_jitter(MatrixXd a, double* jitter_used) {
  const double scale = a.diagonal().mean();
  double jitter = 0.0;
  for (int attempt = 0;; ++attempt) {
    Eigen::LLT<MatrixXd> llt(a + jitter * MatrixXd::Identity(a.rows(), a.cols()));
    if (llt.info() == Eigen::Success) {
      if (jitter_used) *jitter_used = jitter;
      return llt;
    }
    if (attempt == 0) {
      jitter = 1e-10 * scale;
    } else {
      jitter *= 10.0;
    }
    if (jitter > 1e-4 * scale)
      throw NumericalError("Cholesky failed after jitter escalation to " + std::to_string(jitter) +
                           " (diag mean " + std::to_string(scale) + ", n = " + std::to_string(a.rows()) + ")");
  }
}

MatrixXd sample_prior(const GPModel& model, const std::vector<Vector2d>& points, uint64_t seed) {
  model.validate();
  const int n = static_cast<int>(points.size());
  const int d = model.rep.dimension();
  MatrixXd g = model.kernel.gram(points);
  if (model.noise_var > 0.0) g.diagonal().array() += model.noise_var;
  auto llt = chol_with_jitter(std::move(g));
  Rng rng(seed);
  VectorXd z = rng.normal_vector(n * d);
  VectorXd flat = llt.matrixL() * z;
  MatrixXd out(n, d);
  for (int i = 0; i < n; ++i) out.row(i) = flat.segment(i * d, d).transpose() + model.mean.transpose();
  return out;
}

PointPrediction posterior_at(const GPModel& model, const ContextSet& z, const std::vector<Vector2d>& targets,
                             bool include_noise) {
  model.validate();
  z.validate();
  if (!(z.rep == model.rep) && z.rep.dimension() != model.rep.dimension())
    throw ConfigError("context representation dimension does not match GP");

  const int d = model.rep.dimension();
  const int n = z.size();
  const int m = static_cast<int>(targets.size());

  PointPrediction pred;
  pred.points = targets;
  pred.means.resize(m, d);
  pred.covs.reserve(m);

  const MatrixXd extra =
      include_noise ? MatrixXd(model.noise_var * MatrixXd::Identity(d, d)) : MatrixXd(MatrixXd::Zero(d, d));

  if (n == 0) {
    for (int t = 0; t < m; ++t) {
      pred.means.row(t) = model.mean.transpose();
      pred.covs.push_back(model.kernel.eval(targets[t], targets[t]) + extra);
    }
    return pred;
  }

  MatrixXd gz = model.kernel.gram(z.points);
  gz.diagonal().array() += model.noise_var;
  auto llt = chol_with_jitter(std::move(gz));

  VectorXd resid(n * d);
  for (int i = 0; i < n; ++i) resid.segment(i * d, d) = z.values.row(i).transpose() - model.mean;
  VectorXd alpha = llt.solve(resid);

  MatrixXd kstar(n * d, d);
  for (int t = 0; t < m; ++t) {
    for (int i = 0; i < n; ++i) kstar.block(i * d, 0, d, d) = model.kernel.eval(z.points[i], targets[t]);
    pred.means.row(t) = (model.mean + kstar.transpose() * alpha).transpose();
    MatrixXd cov = model.kernel.eval(targets[t], targets[t]) - kstar.transpose() * llt.solve(kstar) + extra;
    pred.covs.push_back(0.5 * (cov + cov.transpose()));
  }
  return pred;
}

GaussianPrediction to_fields(const PointPrediction& p, const GridGeometry& grid, const Representation& rep) {
  const int d = rep.dimension();
  if (p.means.rows() != grid.num_points()) throw ConfigError("prediction size does not match grid");
  GaussianPrediction out{FeatureField{grid, p.means, rep},
                         FeatureField{grid, MatrixXd(grid.num_points(), d * d),
                                      Representation::tensor_square(rep)}};
  for (int i = 0; i < grid.num_points(); ++i)
    for (int c = 0; c < d; ++c)
      for (int r = 0; r < d; ++r) out.cov_field.values(i, c * d + r) = p.covs[i](r, c);
  return out;
}

GaussianPrediction posterior(const GPModel& model, const ContextSet& z, const GridGeometry& grid,
                             bool include_noise) {
  std::vector<Vector2d> targets;
  targets.reserve(grid.num_points());
  for (int i = 0; i < grid.num_points(); ++i) targets.push_back(grid.point(i));
  return to_fields(posterior_at(model, z, targets, include_noise), grid, model.rep);
}

double log_likelihood(const PointPrediction& pred, const MatrixXd& target_values, double floor) {
  const int m = static_cast<int>(pred.covs.size());
  if (target_values.rows() != m) throw ConfigError("log_likelihood: target count mismatch");
  const int d = static_cast<int>(target_values.cols());
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    MatrixXd cov = pred.covs[i];
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) throw NumericalError("log_likelihood: eigendecomposition failed");
    VectorXd ev = eig.eigenvalues();
    // Raise deficient eigenvalues to the floor; leave healthy ones alone.
    double deficit = floor - ev.minCoeff();
    if (deficit > 0.0) {
      cov += deficit * MatrixXd::Identity(d, d);
      ev.array() += deficit;
    }
    if (ev.minCoeff() <= 0.0) throw NumericalError("log_likelihood: covariance not PSD after flooring");
    VectorXd q = target_values.row(i).transpose() - pred.means.row(i).transpose();
    Eigen::LLT<MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw NumericalError("log_likelihood: Cholesky failed after flooring");
    double logdet = 2.0 * MatrixXd(llt.matrixL()).diagonal().array().log().sum();
    double maha = q.dot(llt.solve(q));
    total += -0.5 * d * std::log(2.0 * M_PI) - 0.5 * logdet - 0.5 * maha;
  }
  return total / m;
}

}  // namespace stochfield
