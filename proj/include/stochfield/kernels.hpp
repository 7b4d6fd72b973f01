#pragma once

#include <functional>
#include <string>
#include <vector>

#include "stochfield/common.hpp"
#include "stochfield/group.hpp"

namespace stochfield {

enum class KernelKind { rbf_diagonal, curl_free, div_free, direct_sum };

// Stationary matrix-valued kernel K(x, x') = variance * Khat(x - x').
//   rbf_diagonal: exp(-|t|^2 / (2 l^2)) I_d
//   curl_free:    k0(t) (I - t t^T / l^2)
//   div_free:     k0(t) (t t^T / l^2 + (n - 1 - |t|^2/l^2) I),  n = 2
// with k0(t) = (1/l^2) exp(-|t|^2 / (2 l^2)).
class MatrixKernel {
 public:
  static MatrixKernel rbf_diagonal(int dim, double lengthscale, double variance = 1.0);
  static MatrixKernel curl_free(double lengthscale, double variance = 1.0);
  static MatrixKernel div_free(double lengthscale, double variance = 1.0);
  static MatrixKernel direct_sum(std::vector<MatrixKernel> parts);

  KernelKind kind() const { return kind_; }
  int dimension() const { return dim_; }
  double lengthscale() const { return lengthscale_; }
  double variance() const { return variance_; }
  const std::vector<MatrixKernel>& parts() const { return parts_; }

  // Sets the lengthscale of this kernel and, for direct sums, of every part
  // (the trainable encoder lengthscale is shared across blocks).
  void set_shared_lengthscale(double l);

  MatrixXd eval(const Vector2d& x, const Vector2d& xp) const;
  // Derivative of eval with respect to the (shared) lengthscale.
  MatrixXd eval_dl(const Vector2d& x, const Vector2d& xp) const;

  // Block Gram matrix [K(x_i, x_j)]; points must be pairwise distinct.
  MatrixXd gram(const std::vector<Vector2d>& points) const;

  std::string to_config() const;
  static MatrixKernel from_config(const std::string& json_text);

 private:
  MatrixKernel(KernelKind k, int dim, double l, double v) : kind_(k), dim_(dim), lengthscale_(l), variance_(v) {}

  KernelKind kind_;
  int dim_;
  double lengthscale_;
  double variance_;
  std::vector<MatrixKernel> parts_;
};

// Block kernel k (+) K0 used by the deep-sets encoder: scalar RBF on the
// density channel, K0 on the data channels. Equivariant under
// rho_E = trivial (+) rho whenever K0 is equivariant under rho.
MatrixKernel embedding_kernel(const MatrixKernel& k0, double scalar_lengthscale, double scalar_variance = 1.0);

// Max over `samples` random (x, x', h) of ||K(hx, hx') - rho(h) K(x,x') rho(h)^T||_inf.
// Rotation angles are sampled uniformly on [0, 2pi); reflections are included
// when include_reflections is set. A generic-kernel overload serves negative
// controls in tests.
double check_angular_constraint(const MatrixKernel& k, const Representation& rep, int samples, uint64_t seed,
                                bool include_reflections = false);
double check_angular_constraint(const std::function<MatrixXd(const Vector2d&, const Vector2d&)>& k,
                                const Representation& rep, int samples, uint64_t seed,
                                bool include_reflections = false);

}  // namespace stochfield
