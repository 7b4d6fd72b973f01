#pragma once

#include "stochfield/autodiff.hpp"
#include "stochfield/common.hpp"
#include "stochfield/field.hpp"
#include "stochfield/kernels.hpp"

namespace stochfield {

// Functional embedding of a context set, sampled on a grid:
//   E(Z)(x) = sum_i K(x, x_i) (1, y_i)^T
// followed (optionally) by dividing the data channels by the density channel
// clamped below at norm_clamp.
struct EncoderConfig {
  MatrixKernel embedding;  // (d+1)-dimensional, equivariant under rho_E
  GridGeometry grid;
  bool normalize = true;
  double norm_clamp = 1e-6;

  // Verifies the embedding kernel satisfies the angular constraint under
  // rho_E = trivial (+) rep_in (residual < 1e-10 over sampled rotations).
  void validate(const Representation& rep_in) const;
};

GridGeometry default_embedding_grid(double data_half_width = 10.0, int resolution = 32, double margin = 0.10);

// Grid-sampled embedding with representation rho_E = trivial (+) Z.rep.
// Summation follows a canonical sort of the context by (x, y) so the result
// is bit-identical under permutations of Z.
FeatureField embed(const ContextSet& z, const EncoderConfig& cfg);

// Taped embedding: lengthscale_var is a 1x1 node holding the shared embedding
// lengthscale; the returned node is the (grid points) x (d+1) embedding with
// the same normalization as embed(). Gradients flow to lengthscale_var.
VarId embed_op(Tape& t, const ContextSet& z, const EncoderConfig& cfg, VarId lengthscale_var);

// ||embed(g.Z) - g.embed(Z)||_inf over grid points whose pullback under g
// stays inside the extent. Exact (up to rounding) for quarter-turn g.
double check_encoder_equivariance(const ContextSet& z, const Isometry& g, const EncoderConfig& cfg);

}  // namespace stochfield
