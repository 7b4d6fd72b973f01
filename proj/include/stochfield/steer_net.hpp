#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "stochfield/autodiff.hpp"
#include "stochfield/common.hpp"
#include "stochfield/encoder.hpp"
#include "stochfield/field.hpp"
#include "stochfield/gp.hpp"
#include "stochfield/group.hpp"

namespace stochfield {

// Stride-1, zero-padded steerable convolution layer. Raw weights are stored as
// a (kernel_size^2 * c_in) x c_out matrix whose row index is tap-major,
// channel-minor; the effective kernel is the group-average projection of the
// raw weights and satisfies kappa(h x) = rho_out(h) kappa(x) rho_in(h)^-1.
struct SteerableConvLayer {
  Representation rep_in, rep_out;
  int kernel_size = 5;
  int weight_param = -1;

  int c_in() const { return rep_in.dimension(); }
  int c_out() const { return rep_out.dimension(); }
  int weight_rows() const { return kernel_size * kernel_size * c_in(); }
};

// Blockwise norm gate v -> v * relu(|v| - b) / |v| (zero at v = 0) over the
// representation's fiber-block partition; commutes with any orthogonal block
// action.
struct NormReLULayer {
  Representation rep;
  int bias_param = -1;
};

enum class HeadKind { quadratic, softplus_scalar };

// Maps raw network channels to per-point PSD covariances: quadratic takes the
// d^2 channels as a column-stacked A and returns A A^T + eps I; softplus_scalar
// takes one channel and returns min_variance + softplus(raw).
struct CovarianceHead {
  HeadKind mode = HeadKind::quadratic;
  double eps = 1e-4;
  double min_variance = 0.01;
};

// Alternating conv / NormReLU layers: conv0, relu0, conv1, ..., conv{L-1}.
struct DecoderStack {
  std::vector<SteerableConvLayer> convs;
  std::vector<NormReLULayer> relus;

  void validate() const;
};

// ---- weight-layout helpers -------------------------------------------------

KernelStack stack_from_matrix(const MatrixXd& w, int kernel_size, int c_in, int c_out);
MatrixXd matrix_from_stack(const KernelStack& s, int c_in, int c_out);

// ---- plain (untaped) operators ----------------------------------------------

// Discrete cross-correlation of a (res^2 x c_in) field with a
// (ks^2 * c_in) x c_out weight matrix; zero padding, same resolution.
MatrixXd conv2d(const MatrixXd& field, int resolution, const MatrixXd& weights, int kernel_size);

MatrixXd normrelu(const MatrixXd& field, const std::vector<std::pair<int, int>>& blocks,
                  const VectorXd& biases);

// Quadratic covariance activation on column-stacked d x d channels.
MatrixXd covariance_quadratic(const MatrixXd& a_channels, int d, double eps);

// Nadaraya-Watson smoothing of grid channels to arbitrary targets.
MatrixXd kernel_smooth(const MatrixXd& grid_values, const GridGeometry& grid,
                       const std::vector<Vector2d>& targets, double lengthscale);

// Mean negative log-likelihood of per-point Gaussians N(mean_i, cov_i); covs
// are column-stacked d x d channels (d = y.cols()). No extra flooring is
// applied here; model heads already produce PSD covariances.
double gaussian_nll(const MatrixXd& means, const MatrixXd& cov_channels, const MatrixXd& y);

// ---- taped operators ---------------------------------------------------------

VarId project_op(Tape& t, VarId raw_weights, const SteerableConvLayer& layer);
VarId conv_op(Tape& t, VarId field, VarId weights, int resolution, int kernel_size, int c_in, int c_out);
VarId normrelu_op(Tape& t, VarId field, VarId biases, const std::vector<std::pair<int, int>>& blocks);
VarId covariance_quadratic_op(Tape& t, VarId a_channels, int d, double eps);
VarId kernel_smooth_op(Tape& t, VarId grid_values, const GridGeometry& grid,
                       const std::vector<Vector2d>& targets, VarId lengthscale_var);
VarId gaussian_nll_op(Tape& t, VarId means, VarId cov_channels, MatrixXd y);

// ---- full model ---------------------------------------------------------------

struct SteerCNPConfig {
  std::string group = "C4";
  std::string rep_in = "standard";
  std::string rep_out;           // empty: same as rep_in
  int output_channel_offset = 0; // offset of the output block inside rep_in channels
  int n_layers = 5;
  int kernel_size = 5;
  int hidden_copies = 8;         // copies of the regular representation per hidden layer
  HeadKind head = HeadKind::quadratic;
  double cov_eps = 1e-4;
  double min_variance = 0.01;
  GridGeometry grid = default_embedding_grid();
  std::string embedding_kernel_kind = "rbf_diagonal";  // K0 of the block kernel
  double init_embed_lengthscale = 1.0;
  double init_smooth_lengthscale = 0.7;
  uint64_t init_seed = 0;
};

// Steerable conditional neural process: deep-sets encoder, steerable CNN
// decoder with covariance activation, kernel smoothing to targets.
class SteerCNP {
 public:
  explicit SteerCNP(const SteerCNPConfig& cfg);

  const SteerCNPConfig& config() const { return cfg_; }
  const FiberGroup& group() const { return group_; }
  const Representation& rep_in() const { return rep_in_; }
  const Representation& rep_out() const { return rep_out_; }
  const DecoderStack& stack() const { return stack_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  // Disables the equivariance projection (negative control for audits).
  void set_projection_enabled(bool on) { project_ = on; }
  bool projection_enabled() const { return project_; }

  // Per-batch nodes shared across samples: parameter leaves, exp'd
  // lengthscales and projected conv weights.
  struct BatchContext {
    VarId embed_lengthscale = -1;
    VarId smooth_lengthscale = -1;
    std::vector<VarId> conv_weights;
    std::vector<VarId> relu_biases;
  };
  BatchContext begin_batch(Tape& t) const;

  struct Forward {
    VarId mean = -1;  // m x d_out
    VarId cov = -1;   // m x d_out^2 (column-stacked, PSD per point)
    VarId loss = -1;  // scalar, only if target values were given
  };
  Forward forward(Tape& t, const BatchContext& bc, const ContextSet& zc,
                  const std::vector<Vector2d>& targets, const MatrixXd* target_values) const;

  // Untaped conveniences.
  PointPrediction predict(const ContextSet& zc, const std::vector<Vector2d>& targets) const;
  GaussianPrediction predict_grid(const ContextSet& zc) const;
  double loss(const ContextSet& zc, const std::vector<Vector2d>& targets, const MatrixXd& values) const;

  EncoderConfig encoder_config() const;  // with the current trained lengthscale

  void save(const std::string& dir) const;
  static SteerCNP load(const std::string& dir);

 private:
  MatrixXd decode_grid(Tape& t, const BatchContext& bc, const ContextSet& zc, VarId* out_node) const;

  SteerCNPConfig cfg_;
  FiberGroup group_;
  Representation rep_in_, rep_out_;
  DecoderStack stack_;
  ParameterStore params_;
  int embed_l_param_ = -1;
  int smooth_l_param_ = -1;
  bool project_ = true;
};

}  // namespace stochfield
