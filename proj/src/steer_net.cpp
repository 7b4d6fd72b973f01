#include "stochfield/steer_net.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace stochfield {

void DecoderStack::validate() const {
  const int depth = static_cast<int>(convs.size());
  if (depth < 3 || depth > 9)
    throw ConfigError("decoder depth must lie in [3, 9], got " + std::to_string(depth));
  if (relus.size() + 1 != convs.size())
    throw ConfigError("decoder must alternate conv / NormReLU ending in a conv");
  for (size_t i = 0; i + 1 < convs.size(); ++i) {
    if (!(convs[i].rep_out == relus[i].rep) || !(relus[i].rep == convs[i + 1].rep_in))
      throw ConfigError("adjacent decoder layer representations do not match at layer " + std::to_string(i));
  }
  for (const auto& c : convs)
    if (c.kernel_size < 1 || c.kernel_size % 2 == 0)
      throw ConfigError("conv kernel_size must be odd and positive");
}

KernelStack stack_from_matrix(const MatrixXd& w, int kernel_size, int c_in, int c_out) {
  KernelStack s;
  s.taps_per_axis = kernel_size;
  s.taps.reserve(kernel_size * kernel_size);
  for (int t = 0; t < kernel_size * kernel_size; ++t) {
    MatrixXd m(c_out, c_in);
    for (int i = 0; i < c_in; ++i) m.col(i) = w.row(t * c_in + i).transpose();
    s.taps.push_back(std::move(m));
  }
  return s;
}

MatrixXd matrix_from_stack(const KernelStack& s, int c_in, int c_out) {
  MatrixXd w(s.tap_count() * c_in, c_out);
  for (int t = 0; t < s.tap_count(); ++t)
    for (int i = 0; i < c_in; ++i) w.row(t * c_in + i) = s.taps[t].col(i).transpose();
  return w;
}

namespace {

// Patch matrices are built column-contiguously: column t*c+ch of the patch
// matrix is a shifted copy of field column ch, copied in per-row segments so
// every copy is a contiguous vectorized move.
MatrixXd im2col(const MatrixXd& f, int res, int ks) {
  const int m = (ks - 1) / 2;
  const int c = static_cast<int>(f.cols());
  MatrixXd p = MatrixXd::Zero(res * res, ks * ks * c);
  for (int ty = 0; ty < ks; ++ty) {
    const int dy = ty - m;
    const int y0 = std::max(0, -dy), y1 = res - std::max(0, dy);
    for (int tx = 0; tx < ks; ++tx) {
      const int dx = tx - m;
      const int x0 = std::max(0, -dx), x1 = res - std::max(0, dx);
      if (x1 <= x0 || y1 <= y0) continue;
      const int t = ty * ks + tx;
      for (int ch = 0; ch < c; ++ch) {
        auto dst = p.col(t * c + ch);
        auto src = f.col(ch);
        for (int iy = y0; iy < y1; ++iy)
          dst.segment(iy * res + x0, x1 - x0) = src.segment((iy + dy) * res + x0 + dx, x1 - x0);
      }
    }
  }
  return p;
}

void col2im_add(MatrixXd& df, const MatrixXd& dp, int res, int ks) {
  const int m = (ks - 1) / 2;
  const int c = static_cast<int>(df.cols());
  for (int ty = 0; ty < ks; ++ty) {
    const int dy = ty - m;
    const int y0 = std::max(0, -dy), y1 = res - std::max(0, dy);
    for (int tx = 0; tx < ks; ++tx) {
      const int dx = tx - m;
      const int x0 = std::max(0, -dx), x1 = res - std::max(0, dx);
      if (x1 <= x0 || y1 <= y0) continue;
      const int t = ty * ks + tx;
      for (int ch = 0; ch < c; ++ch) {
        auto dst = df.col(ch);
        auto src = dp.col(t * c + ch);
        for (int iy = y0; iy < y1; ++iy)
          dst.segment((iy + dy) * res + x0 + dx, x1 - x0) += src.segment(iy * res + x0, x1 - x0);
      }
    }
  }
}

}  // namespace

MatrixXd conv2d(const MatrixXd& field, int resolution, const MatrixXd& weights, int kernel_size) {
  if (field.rows() != resolution * resolution) throw ConfigError("conv2d: field rows != resolution^2");
  if (weights.rows() != kernel_size * kernel_size * field.cols())
    throw ConfigError("conv2d: weight rows do not match kernel_size^2 * c_in");
  return im2col(field, resolution, kernel_size) * weights;
}

MatrixXd normrelu(const MatrixXd& field, const std::vector<std::pair<int, int>>& blocks,
                  const VectorXd& biases) {
  if (static_cast<int>(blocks.size()) != biases.size())
    throw ConfigError("normrelu: bias count does not match block count");
  MatrixXd out(field.rows(), field.cols());
  for (int p = 0; p < field.rows(); ++p) {
    for (size_t k = 0; k < blocks.size(); ++k) {
      auto [off, len] = blocks[k];
      const double n = field.row(p).segment(off, len).norm();
      if (n > biases(k)) {
        out.row(p).segment(off, len) = field.row(p).segment(off, len) * ((n - biases(k)) / n);
      } else {
        out.row(p).segment(off, len).setZero();
      }
    }
  }
  return out;
}

MatrixXd covariance_quadratic(const MatrixXd& a_channels, int d, double eps) {
  if (a_channels.cols() != d * d) throw ConfigError("covariance head expects d^2 channels");
  MatrixXd out(a_channels.rows(), d * d);
  MatrixXd a(d, d), s(d, d);
  for (int p = 0; p < a_channels.rows(); ++p) {
    for (int c = 0; c < d; ++c)
      for (int r = 0; r < d; ++r) a(r, c) = a_channels(p, c * d + r);
    s.noalias() = a * a.transpose();
    s.diagonal().array() += eps;
    for (int c = 0; c < d; ++c)
      for (int r = 0; r < d; ++r) out(p, c * d + r) = s(r, c);
  }
  return out;
}

namespace {

// Squared distances target x grid, assembled from coordinate columns so the
// exp() that follows vectorizes.
MatrixXd target_grid_r2(const GridGeometry& grid, const std::vector<Vector2d>& targets) {
  const int hw = grid.num_points();
  const int m = static_cast<int>(targets.size());
  VectorXd gx(hw), gy(hw);
  for (int p = 0; p < hw; ++p) {
    Vector2d g = grid.point(p);
    gx(p) = g.x();
    gy(p) = g.y();
  }
  MatrixXd r2(m, hw);
  for (int k = 0; k < m; ++k)
    r2.row(k) = (gx.array() - targets[k].x()).square() + (gy.array() - targets[k].y()).square();
  return r2;
}

MatrixXd smooth_weights(const MatrixXd& r2, double lengthscale) {
  MatrixXd u = (-r2 / (2.0 * lengthscale * lengthscale)).array().exp();
  for (int k = 0; k < u.rows(); ++k) {
    const double s = u.row(k).sum();
    if (!(s > 0.0)) throw NumericalError("kernel_smooth: all weights underflowed to zero");
    u.row(k) /= s;
  }
  return u;
}

}  // namespace

MatrixXd kernel_smooth(const MatrixXd& grid_values, const GridGeometry& grid,
                       const std::vector<Vector2d>& targets, double lengthscale) {
  if (grid_values.rows() != grid.num_points())
    throw ConfigError("kernel_smooth: value rows != grid points");
  return smooth_weights(target_grid_r2(grid, targets), lengthscale) * grid_values;
}

double gaussian_nll(const MatrixXd& means, const MatrixXd& cov_channels, const MatrixXd& y) {
  const int m = static_cast<int>(y.rows());
  const int d = static_cast<int>(y.cols());
  if (means.rows() != m || means.cols() != d) throw ConfigError("gaussian_nll: mean shape mismatch");
  if (cov_channels.rows() != m || cov_channels.cols() != d * d)
    throw ConfigError("gaussian_nll: covariance shape mismatch");
  double total = 0.0;
  MatrixXd s(d, d);
  for (int k = 0; k < m; ++k) {
    for (int c = 0; c < d; ++c)
      for (int r = 0; r < d; ++r) s(r, c) = cov_channels(k, c * d + r);
    Eigen::LLT<MatrixXd> llt(s);
    if (llt.info() != Eigen::Success)
      throw NumericalError("gaussian_nll: covariance not positive definite at row " + std::to_string(k));
    VectorXd q = y.row(k).transpose() - means.row(k).transpose();
    double logdet = 2.0 * MatrixXd(llt.matrixL()).diagonal().array().log().sum();
    total += 0.5 * d * std::log(2.0 * M_PI) + 0.5 * logdet + 0.5 * q.dot(llt.solve(q));
  }
  return total / m;
}

VarId project_op(Tape& t, VarId raw_weights, const SteerableConvLayer& layer) {
  const int ks = layer.kernel_size, ci = layer.c_in(), co = layer.c_out();
  Representation rep_in = layer.rep_in, rep_out = layer.rep_out;
  KernelStack raw = stack_from_matrix(t.value(raw_weights), ks, ci, co);
  MatrixXd projected = matrix_from_stack(project_group_average(rep_in, rep_out, raw), ci, co);
  return t.push(std::move(projected),
                [raw_weights, rep_in, rep_out, ks, ci, co](Tape& tp, VarId self) {
                  KernelStack adj = stack_from_matrix(tp.adjoint(self), ks, ci, co);
                  tp.add_adjoint(raw_weights,
                                 matrix_from_stack(project_group_average(rep_in, rep_out, adj, true), ci, co));
                },
                "project");
}

VarId conv_op(Tape& t, VarId field, VarId weights, int resolution, int kernel_size, int c_in, int c_out) {
  if (t.value(field).cols() != c_in) throw ConfigError("conv_op: field channels do not match rep_in");
  MatrixXd out = conv2d(t.value(field), resolution, t.value(weights), kernel_size);
  (void)c_out;
  return t.push(std::move(out),
                [field, weights, resolution, kernel_size](Tape& tp, VarId self) {
                  const MatrixXd& adj = tp.adjoint(self);
                  MatrixXd patches = im2col(tp.value(field), resolution, kernel_size);
                  tp.add_adjoint(weights, patches.transpose() * adj);
                  MatrixXd dp = adj * tp.value(weights).transpose();
                  MatrixXd df = MatrixXd::Zero(tp.value(field).rows(), tp.value(field).cols());
                  col2im_add(df, dp, resolution, kernel_size);
                  tp.add_adjoint(field, df);
                },
                "conv");
}

VarId normrelu_op(Tape& t, VarId field, VarId biases, const std::vector<std::pair<int, int>>& blocks) {
  MatrixXd out = normrelu(t.value(field), blocks, t.value(biases).col(0));
  return t.push(std::move(out),
                [field, biases, blocks](Tape& tp, VarId self) {
                  const MatrixXd& x = tp.value(field);
                  const VectorXd b = tp.value(biases).col(0);
                  const MatrixXd& adj = tp.adjoint(self);
                  MatrixXd dx = MatrixXd::Zero(x.rows(), x.cols());
                  VectorXd db = VectorXd::Zero(b.size());
                  for (int p = 0; p < x.rows(); ++p) {
                    for (size_t k = 0; k < blocks.size(); ++k) {
                      auto [off, len] = blocks[k];
                      auto v = x.row(p).segment(off, len);
                      const double n = v.norm();
                      if (n <= b(k)) continue;
                      auto g = adj.row(p).segment(off, len);
                      const double vg = v.dot(g);
                      dx.row(p).segment(off, len) = (1.0 - b(k) / n) * g + (b(k) * vg / (n * n * n)) * v;
                      db(k) -= vg / n;
                    }
                  }
                  tp.add_adjoint(field, dx);
                  tp.add_adjoint(biases, db);
                },
                "normrelu");
}

VarId covariance_quadratic_op(Tape& t, VarId a_channels, int d, double eps) {
  MatrixXd out = covariance_quadratic(t.value(a_channels), d, eps);
  return t.push(std::move(out),
                [a_channels, d](Tape& tp, VarId self) {
                  const MatrixXd& av = tp.value(a_channels);
                  const MatrixXd& adj = tp.adjoint(self);
                  MatrixXd da_all = MatrixXd::Zero(av.rows(), av.cols());
                  MatrixXd a(d, d), ds(d, d), da(d, d);
                  for (int p = 0; p < av.rows(); ++p) {
                    for (int c = 0; c < d; ++c)
                      for (int r = 0; r < d; ++r) {
                        a(r, c) = av(p, c * d + r);
                        ds(r, c) = adj(p, c * d + r);
                      }
                    da.noalias() = (ds + ds.transpose()) * a;
                    for (int c = 0; c < d; ++c)
                      for (int r = 0; r < d; ++r) da_all(p, c * d + r) = da(r, c);
                  }
                  tp.add_adjoint(a_channels, da_all);
                },
                "covariance_quadratic");
}

VarId kernel_smooth_op(Tape& t, VarId grid_values, const GridGeometry& grid,
                       const std::vector<Vector2d>& targets, VarId lengthscale_var) {
  const double l = t.value(lengthscale_var)(0, 0);
  auto r2 = std::make_shared<MatrixXd>(target_grid_r2(grid, targets));
  auto w = std::make_shared<MatrixXd>(smooth_weights(*r2, l));  // normalized rows
  MatrixXd out = *w * t.value(grid_values);
  return t.push(
      std::move(out),
      [grid_values, lengthscale_var, l, r2, w](Tape& tp, VarId self) {
        const MatrixXd& v = tp.value(grid_values);
        const MatrixXd& outv = tp.value(self);
        const MatrixXd& adj = tp.adjoint(self);
        tp.add_adjoint(grid_values, w->transpose() * adj);
        // d w_kg / dl through the normalization: with normalized weights w,
        // dout_k/dl = sum_g w_kg (r2_kg - sum_g' w_kg' r2_kg') V_g / l^3.
        const int m = static_cast<int>(w->rows());
        double dl = 0.0;
        for (int k = 0; k < m; ++k) {
          Eigen::RowVectorXd wr2 = w->row(k).cwiseProduct(r2->row(k));
          Eigen::RowVectorXd num = wr2 * v;
          const double mean_r2 = wr2.sum();
          dl += ((num - mean_r2 * outv.row(k)) / (l * l * l)).dot(adj.row(k));
        }
        MatrixXd g(1, 1);
        g(0, 0) = dl;
        tp.add_adjoint(lengthscale_var, g);
      },
      "kernel_smooth");
}

VarId gaussian_nll_op(Tape& t, VarId means, VarId cov_channels, MatrixXd y) {
  MatrixXd v(1, 1);
  v(0, 0) = gaussian_nll(t.value(means), t.value(cov_channels), y);
  return t.push(
      std::move(v),
      [means, cov_channels, y](Tape& tp, VarId self) {
        const double w = tp.adjoint(self)(0, 0);
        const MatrixXd& mu = tp.value(means);
        const MatrixXd& cv = tp.value(cov_channels);
        const int m = static_cast<int>(y.rows()), d = static_cast<int>(y.cols());
        MatrixXd dmu(m, d), dcv(m, d * d);
        MatrixXd s(d, d);
        for (int k = 0; k < m; ++k) {
          for (int c = 0; c < d; ++c)
            for (int r = 0; r < d; ++r) s(r, c) = cv(k, c * d + r);
          Eigen::LLT<MatrixXd> llt(s);
          VectorXd q = y.row(k).transpose() - mu.row(k).transpose();
          VectorXd sq = llt.solve(q);
          MatrixXd sinv = llt.solve(MatrixXd::Identity(d, d));
          dmu.row(k) = (-(w / m)) * sq.transpose();
          MatrixXd dS = (w / m) * 0.5 * (sinv - sq * sq.transpose());
          for (int c = 0; c < d; ++c)
            for (int r = 0; r < d; ++r) dcv(k, c * d + r) = dS(r, c);
        }
        tp.add_adjoint(means, dmu);
        tp.add_adjoint(cov_channels, dcv);
      },
      "gaussian_nll");
}

// ---- SteerCNP -----------------------------------------------------------------

namespace {

Representation hidden_representation(const FiberGroup& g, int copies) {
  std::vector<Representation> parts(static_cast<size_t>(copies), Representation::regular(g));
  return Representation::direct_sum(std::move(parts));
}

Representation output_representation(const Representation& rep_out, HeadKind head) {
  const FiberGroup& g = rep_out.group();
  if (head == HeadKind::softplus_scalar) {
    if (rep_out.dimension() != 1)
      throw ConfigError("softplus_scalar head requires a one-dimensional output representation");
    return Representation::direct_sum({Representation::trivial(g), Representation::trivial(g)});
  }
  // mean block followed by rho_eta = rho (+) ... (+) rho (d copies).
  std::vector<Representation> parts;
  parts.push_back(rep_out);
  for (int i = 0; i < rep_out.dimension(); ++i) parts.push_back(rep_out);
  return Representation::direct_sum(std::move(parts));
}

}  // namespace

SteerCNP::SteerCNP(const SteerCNPConfig& cfg)
    : cfg_(cfg),
      group_(FiberGroup::parse(cfg.group)),
      rep_in_(Representation::parse(cfg.rep_in, group_)),
      rep_out_(cfg.rep_out.empty() ? Representation::parse(cfg.rep_in, group_)
                                   : Representation::parse(cfg.rep_out, group_)) {
  cfg_.grid.validate();
  if (cfg_.head == HeadKind::quadratic && rep_out_.dimension() > 4)
    throw ConfigError("quadratic head output dimension is unexpectedly large");
  if (cfg_.output_channel_offset < 0 ||
      cfg_.output_channel_offset + rep_out_.dimension() > rep_in_.dimension())
    throw ConfigError("output channel window does not fit inside the input representation");

  Representation rho_e = Representation::direct_sum({Representation::trivial(group_), rep_in_});
  Representation hidden = hidden_representation(group_, cfg_.hidden_copies);
  Representation out_rep = output_representation(rep_out_, cfg_.head);

  for (int i = 0; i < cfg_.n_layers; ++i) {
    SteerableConvLayer layer;
    layer.rep_in = i == 0 ? rho_e : hidden;
    layer.rep_out = i == cfg_.n_layers - 1 ? out_rep : hidden;
    layer.kernel_size = cfg_.kernel_size;
    Rng init(derive_seed(cfg_.init_seed, {0xC0DEull, static_cast<uint64_t>(i)}));
    const double scale = std::sqrt(2.0 * group_.size() / (layer.kernel_size * layer.kernel_size *
                                                          static_cast<double>(layer.c_in())));
    MatrixXd w(layer.weight_rows(), layer.c_out());
    for (int r = 0; r < w.rows(); ++r)
      for (int c = 0; c < w.cols(); ++c) w(r, c) = scale * init.normal();
    layer.weight_param = params_.add("conv" + std::to_string(i) + ".weight", std::move(w));
    stack_.convs.push_back(layer);
    if (i + 1 < cfg_.n_layers) {
      NormReLULayer relu{hidden, -1};
      // Raw bias; the effective gate threshold is softplus(raw) so it stays
      // positive (a negative threshold makes the gate's Jacobian singular at
      // small block norms).
      relu.bias_param = params_.add(
          "normrelu" + std::to_string(i) + ".bias",
          MatrixXd::Constant(static_cast<int>(hidden.blocks().size()), 1,
                             std::log(std::expm1(0.01))));
      stack_.relus.push_back(relu);
    }
  }
  stack_.validate();

  embed_l_param_ = params_.add("encoder.log_lengthscale",
                               MatrixXd::Constant(1, 1, std::log(cfg_.init_embed_lengthscale)));
  smooth_l_param_ = params_.add("smoother.log_lengthscale",
                                MatrixXd::Constant(1, 1, std::log(cfg_.init_smooth_lengthscale)));

  encoder_config().validate(rep_in_);
}

EncoderConfig SteerCNP::encoder_config() const {
  const double l = std::exp(params_[embed_l_param_].value(0, 0));
  MatrixKernel k0 = [&]() {
    if (cfg_.embedding_kernel_kind == "rbf_diagonal")
      return MatrixKernel::rbf_diagonal(rep_in_.dimension(), l);
    if (cfg_.embedding_kernel_kind == "curl_free") return MatrixKernel::curl_free(l);
    if (cfg_.embedding_kernel_kind == "div_free") return MatrixKernel::div_free(l);
    throw ConfigError("unknown embedding kernel kind '" + cfg_.embedding_kernel_kind + "'");
  }();
  return EncoderConfig{embedding_kernel(k0, l), cfg_.grid, true, 1e-6};
}

SteerCNP::BatchContext SteerCNP::begin_batch(Tape& t) const {
  BatchContext bc;
  bc.embed_lengthscale = op_exp(t, t.leaf(params_, embed_l_param_));
  bc.smooth_lengthscale = op_exp(t, t.leaf(params_, smooth_l_param_));
  for (const auto& conv : stack_.convs) {
    VarId w = t.leaf(params_, conv.weight_param);
    bc.conv_weights.push_back(project_ ? project_op(t, w, conv) : w);
  }
  for (const auto& relu : stack_.relus)
    bc.relu_biases.push_back(op_softplus(t, t.leaf(params_, relu.bias_param)));
  return bc;
}

SteerCNP::Forward SteerCNP::forward(Tape& t, const BatchContext& bc, const ContextSet& zc,
                                    const std::vector<Vector2d>& targets,
                                    const MatrixXd* target_values) const {
  zc.validate();
  if (zc.channels() != rep_in_.dimension())
    throw ConfigError("context channels do not match the model input representation");
  for (const Vector2d& x : zc.points)
    if (std::abs(x.x() - cfg_.grid.offset.x()) > cfg_.grid.half_width ||
        std::abs(x.y() - cfg_.grid.offset.y()) > cfg_.grid.half_width)
      throw DataError("context point lies outside the embedding grid extent");

  VarId x;
  decode_grid(t, bc, zc, &x);

  const int d = rep_out_.dimension();
  VarId mean_grid, cov_grid;
  if (cfg_.head == HeadKind::quadratic) {
    mean_grid = op_cols(t, x, 0, d);
    cov_grid = covariance_quadratic_op(t, op_cols(t, x, d, d * d), d, cfg_.cov_eps);
  } else {
    mean_grid = op_sigmoid(t, op_cols(t, x, 0, 1));
    cov_grid = op_add_const(t, op_softplus(t, op_cols(t, x, 1, 1)), cfg_.min_variance);
  }

  VarId joint = op_hcat(t, mean_grid, cov_grid);
  VarId smoothed = kernel_smooth_op(t, joint, cfg_.grid, targets, bc.smooth_lengthscale);

  Forward f;
  f.mean = op_cols(t, smoothed, 0, d);
  f.cov = op_cols(t, smoothed, d, d * d);
  if (target_values) {
    if (target_values->cols() != d) throw ConfigError("target values do not match output dimension");
    f.loss = gaussian_nll_op(t, f.mean, f.cov, *target_values);
  }
  return f;
}

PointPrediction SteerCNP::predict(const ContextSet& zc, const std::vector<Vector2d>& targets) const {
  Tape t;
  BatchContext bc = begin_batch(t);
  Forward f = forward(t, bc, zc, targets, nullptr);
  PointPrediction pred;
  pred.points = targets;
  pred.means = t.value(f.mean);
  const int d = rep_out_.dimension();
  const MatrixXd& cv = t.value(f.cov);
  pred.covs.reserve(targets.size());
  for (int k = 0; k < cv.rows(); ++k) {
    MatrixXd s(d, d);
    for (int c = 0; c < d; ++c)
      for (int r = 0; r < d; ++r) s(r, c) = cv(k, c * d + r);
    pred.covs.push_back(std::move(s));
  }
  return pred;
}

MatrixXd SteerCNP::decode_grid(Tape& t, const BatchContext& bc, const ContextSet& zc, VarId* out_node) const {
  EncoderConfig enc = encoder_config();
  VarId x = embed_op(t, zc, enc, bc.embed_lengthscale);
  const int res = cfg_.grid.resolution;
  for (size_t i = 0; i < stack_.convs.size(); ++i) {
    const auto& conv = stack_.convs[i];
    x = conv_op(t, x, bc.conv_weights[i], res, conv.kernel_size, conv.c_in(), conv.c_out());
    if (i < stack_.relus.size())
      x = normrelu_op(t, x, bc.relu_biases[i], stack_.relus[i].rep.blocks());
  }
  if (out_node) *out_node = x;
  return t.value(x);
}

GaussianPrediction SteerCNP::predict_grid(const ContextSet& zc) const {
  Tape t;
  BatchContext bc = begin_batch(t);
  MatrixXd raw = decode_grid(t, bc, zc, nullptr);
  const int d = rep_out_.dimension();
  MatrixXd mean_vals, cov_vals;
  if (cfg_.head == HeadKind::quadratic) {
    mean_vals = raw.leftCols(d);
    cov_vals = covariance_quadratic(raw.middleCols(d, d * d), d, cfg_.cov_eps);
  } else {
    mean_vals = raw.leftCols(1).unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    cov_vals = raw.middleCols(1, 1).unaryExpr(
        [this](double v) { return cfg_.min_variance + (v > 30.0 ? v : std::log1p(std::exp(v))); });
  }
  return GaussianPrediction{FeatureField{cfg_.grid, std::move(mean_vals), rep_out_},
                            FeatureField{cfg_.grid, std::move(cov_vals),
                                         Representation::tensor_square(rep_out_)}};
}

double SteerCNP::loss(const ContextSet& zc, const std::vector<Vector2d>& targets,
                      const MatrixXd& values) const {
  Tape t;
  BatchContext bc = begin_batch(t);
  Forward f = forward(t, bc, zc, targets, &values);
  return t.value(f.loss)(0, 0);
}

void SteerCNP::save(const std::string& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = {
      {"version", 1},
      {"group", cfg_.group},
      {"rep_in", cfg_.rep_in},
      {"rep_out", cfg_.rep_out},
      {"output_channel_offset", cfg_.output_channel_offset},
      {"n_layers", cfg_.n_layers},
      {"kernel_size", cfg_.kernel_size},
      {"hidden_copies", cfg_.hidden_copies},
      {"head", cfg_.head == HeadKind::quadratic ? "quadratic" : "softplus_scalar"},
      {"cov_eps", cfg_.cov_eps},
      {"min_variance", cfg_.min_variance},
      {"grid", {{"half_width", cfg_.grid.half_width}, {"resolution", cfg_.grid.resolution},
                 {"offset", {cfg_.grid.offset.x(), cfg_.grid.offset.y()}}}},
      {"embedding_kernel_kind", cfg_.embedding_kernel_kind},
      {"init_embed_lengthscale", cfg_.init_embed_lengthscale},
      {"init_smooth_lengthscale", cfg_.init_smooth_lengthscale},
      {"init_seed", cfg_.init_seed},
  };
  nlohmann::json plist = nlohmann::json::array();
  size_t offset = 0;
  for (int i = 0; i < params_.size(); ++i) {
    const Parameter& p = params_[i];
    plist.push_back({{"name", p.name},
                     {"rows", p.value.rows()},
                     {"cols", p.value.cols()},
                     {"offset", offset}});
    offset += static_cast<size_t>(p.value.size());
  }
  manifest["parameters"] = plist;
  std::ofstream mf(dir + "/manifest.json");
  if (!mf) throw DataError("cannot write checkpoint manifest in '" + dir + "'");
  mf << manifest.dump(2) << "\n";

  std::ofstream bin(dir + "/weights.bin", std::ios::binary);
  if (!bin) throw DataError("cannot write checkpoint weights in '" + dir + "'");
  for (int i = 0; i < params_.size(); ++i) {
    const MatrixXd& v = params_[i].value;
    for (int c = 0; c < v.cols(); ++c)
      for (int r = 0; r < v.rows(); ++r) {
        double x = v(r, c);
        bin.write(reinterpret_cast<const char*>(&x), sizeof(double));
      }
  }
}

SteerCNP SteerCNP::load(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw DataError("cannot open checkpoint manifest in '" + dir + "'");
  nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.value("version", 0) != 1)
    throw ConfigError("unsupported checkpoint version in '" + dir + "'");

  SteerCNPConfig cfg;
  cfg.group = manifest.at("group").get<std::string>();
  cfg.rep_in = manifest.at("rep_in").get<std::string>();
  cfg.rep_out = manifest.at("rep_out").get<std::string>();
  cfg.output_channel_offset = manifest.at("output_channel_offset").get<int>();
  cfg.n_layers = manifest.at("n_layers").get<int>();
  cfg.kernel_size = manifest.at("kernel_size").get<int>();
  cfg.hidden_copies = manifest.at("hidden_copies").get<int>();
  cfg.head = manifest.at("head").get<std::string>() == "quadratic" ? HeadKind::quadratic
                                                                   : HeadKind::softplus_scalar;
  cfg.cov_eps = manifest.at("cov_eps").get<double>();
  cfg.min_variance = manifest.at("min_variance").get<double>();
  cfg.grid = GridGeometry{manifest.at("grid").at("half_width").get<double>(),
                          manifest.at("grid").at("resolution").get<int>(),
                          Vector2d(manifest.at("grid").at("offset")[0].get<double>(),
                                   manifest.at("grid").at("offset")[1].get<double>())};
  cfg.embedding_kernel_kind = manifest.at("embedding_kernel_kind").get<std::string>();
  cfg.init_embed_lengthscale = manifest.at("init_embed_lengthscale").get<double>();
  cfg.init_smooth_lengthscale = manifest.at("init_smooth_lengthscale").get<double>();
  cfg.init_seed = manifest.at("init_seed").get<uint64_t>();

  SteerCNP model(cfg);
  std::ifstream bin(dir + "/weights.bin", std::ios::binary);
  if (!bin) throw DataError("cannot open checkpoint weights in '" + dir + "'");
  for (const auto& pj : manifest.at("parameters")) {
    int idx = model.params_.find(pj.at("name").get<std::string>());
    if (idx < 0) throw ConfigError("checkpoint parameter '" + pj.at("name").get<std::string>() +
                                   "' does not exist in the rebuilt model");
    MatrixXd& v = model.params_[idx].value;
    if (v.rows() != pj.at("rows").get<int>() || v.cols() != pj.at("cols").get<int>())
      throw ConfigError("checkpoint parameter shape mismatch for '" + model.params_[idx].name + "'");
    for (int c = 0; c < v.cols(); ++c)
      for (int r = 0; r < v.rows(); ++r) {
        double x;
        bin.read(reinterpret_cast<char*>(&x), sizeof(double));
        if (!bin) throw DataError("checkpoint weights truncated in '" + dir + "'");
        v(r, c) = x;
      }
  }
  return model;
}

}  // namespace stochfield
