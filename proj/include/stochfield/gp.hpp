#pragma once

#include <string>
#include <vector>

#include "stochfield/common.hpp"
#include "stochfield/field.hpp"
#include "stochfield/kernels.hpp"

namespace stochfield {

// Vector-valued GP(m, K) with constant mean m, stationary matrix kernel K and
// i.i.d. observation noise sigma^2 per output coordinate. The mean must be a
// fixed point of the fiber representation.
struct GPModel {
  VectorXd mean;
  MatrixKernel kernel;
  double noise_var = 0.0;
  Representation rep;

  void validate() const;
};

// Marginal predictions at a list of points: mean rows and one d x d covariance
// per point.
struct PointPrediction {
  std::vector<Vector2d> points;
  MatrixXd means;               // n x d
  std::vector<MatrixXd> covs;   // n matrices, d x d each
};

// Grid-shaped prediction: mean field (d channels, rep rho) and covariance
// field (d^2 channels, rep tensor_square(rho), column-stacked per point).
struct GaussianPrediction {
  FeatureField mean_field;
  FeatureField cov_field;
};

GaussianPrediction to_fields(const PointPrediction& p, const GridGeometry& grid, const Representation& rep);

// Cholesky with escalating diagonal jitter, starting at 1e-10 * mean(diag) and
// growing tenfold up to 1e-4 * mean(diag) before failing.
Eigen::LLT<MatrixXd> chol_with_jitter(MatrixXd a, double* jitter_used = nullptr);

// Draw from N(m, Gram + noise_var I); deterministic per seed.
MatrixXd sample_prior(const GPModel& model, const std::vector<Vector2d>& points, uint64_t seed);

// Exact conditioning on Z with observation noise; per-target marginal
// covariances. include_noise adds noise_var I to the predictive covariance
// (the density of a new noisy observation rather than of the latent field).
PointPrediction posterior_at(const GPModel& model, const ContextSet& z, const std::vector<Vector2d>& targets,
                             bool include_noise = false);
GaussianPrediction posterior(const GPModel& model, const ContextSet& z, const GridGeometry& grid,
                             bool include_noise = false);

// Mean per-point Gaussian log-density (1/m) sum_i log N(y_i; mean_i, cov_i).
// Covariances are floored by raising eigenvalues below `floor` up to it, so
// well-conditioned inputs are left untouched.
double log_likelihood(const PointPrediction& pred, const MatrixXd& target_values, double floor = 1e-6);

}  // namespace stochfield
