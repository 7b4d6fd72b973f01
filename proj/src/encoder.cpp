#include "stochfield/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace stochfield {

void EncoderConfig::validate(const Representation& rep_in) const {
  grid.validate();
  if (embedding.dimension() != rep_in.dimension() + 1)
    throw ConfigError("embedding kernel must have dimension d+1");
  if (!(norm_clamp > 0.0)) throw ConfigError("norm_clamp must be positive");
  Representation rho_e =
      Representation::direct_sum({Representation::trivial(rep_in.group()), rep_in});
  double resid = check_angular_constraint(embedding, rho_e, 256, /*seed=*/7);
  if (resid > 1e-10)
    throw ConfigError("embedding kernel violates the rho_E angular constraint (residual " +
                      std::to_string(resid) + ")");
}

GridGeometry default_embedding_grid(double data_half_width, int resolution, double margin) {
  return GridGeometry{data_half_width * (1.0 + margin), resolution, Vector2d::Zero()};
}

namespace {

// Context rows sorted by (x, y); fixes the reduction order.
std::vector<int> canonical_order(const ContextSet& z) {
  std::vector<int> idx(z.points.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (z.points[a].x() != z.points[b].x()) return z.points[a].x() < z.points[b].x();
    return z.points[a].y() < z.points[b].y();
  });
  return idx;
}

bool scalar_diagonal(const MatrixKernel& k) {
  if (k.kind() == KernelKind::rbf_diagonal) return true;
  if (k.kind() != KernelKind::direct_sum) return false;
  for (const auto& p : k.parts())
    if (p.kind() != KernelKind::rbf_diagonal || p.lengthscale() != k.parts().front().lengthscale() ||
        p.variance() != k.parts().front().variance())
      return false;
  return true;
}

// Raw (pre-normalization) embedding and, if dl is nonnull, its derivative
// with respect to the shared lengthscale.
MatrixXd raw_embed(const ContextSet& z, const EncoderConfig& cfg, const MatrixKernel& kernel,
                   MatrixXd* dl) {
  const int hw = cfg.grid.num_points();
  const int d = z.channels();
  MatrixXd out = MatrixXd::Zero(hw, d + 1);
  if (dl) *dl = MatrixXd::Zero(hw, d + 1);
  if (z.size() == 0) return out;

  const std::vector<int> order = canonical_order(z);

  // phi rows in canonical order.
  MatrixXd phi(z.size(), d + 1);
  for (int r = 0; r < z.size(); ++r) {
    phi(r, 0) = 1.0;
    phi.row(r).tail(d) = z.values.row(order[r]);
  }

  if (scalar_diagonal(kernel)) {
    const double l = kernel.lengthscale();
    const double var = kernel.kind() == KernelKind::rbf_diagonal ? kernel.variance()
                                                                 : kernel.parts().front().variance();
    VectorXd gx(hw), gy(hw);
    for (int p = 0; p < hw; ++p) {
      const Vector2d g = cfg.grid.point(p);
      gx(p) = g.x();
      gy(p) = g.y();
    }
    MatrixXd r2(hw, z.size());
    for (int r = 0; r < z.size(); ++r) {
      const Vector2d& x = z.points[order[r]];
      r2.col(r) = (gx.array() - x.x()).square() + (gy.array() - x.y()).square();
    }
    MatrixXd w = var * (-r2 / (2.0 * l * l)).array().exp();
    out.noalias() = w * phi;
    if (dl) dl->noalias() = (w.cwiseProduct(r2) / (l * l * l)) * phi;
    return out;
  }

  for (int p = 0; p < hw; ++p) {
    const Vector2d g = cfg.grid.point(p);
    for (int r = 0; r < z.size(); ++r) {
      out.row(p) += (kernel.eval(g, z.points[order[r]]) * phi.row(r).transpose()).transpose();
      if (dl) dl->row(p) += (kernel.eval_dl(g, z.points[order[r]]) * phi.row(r).transpose()).transpose();
    }
  }
  return out;
}

MatrixXd apply_normalization(const MatrixXd& raw, double clamp) {
  MatrixXd out = raw;
  const int d = static_cast<int>(raw.cols()) - 1;
  for (int p = 0; p < raw.rows(); ++p) {
    double density = std::max(raw(p, 0), clamp);
    out.row(p).tail(d) /= density;
  }
  return out;
}

}  // namespace

FeatureField embed(const ContextSet& z, const EncoderConfig& cfg) {
  z.validate();
  MatrixXd raw = raw_embed(z, cfg, cfg.embedding, nullptr);
  Representation rho_e = Representation::direct_sum({Representation::trivial(z.rep.group()), z.rep});
  FeatureField f{cfg.grid, cfg.normalize ? apply_normalization(raw, cfg.norm_clamp) : raw, rho_e};
  return f;
}

VarId embed_op(Tape& t, const ContextSet& z, const EncoderConfig& cfg, VarId lengthscale_var) {
  z.validate();
  MatrixKernel kernel = cfg.embedding;
  kernel.set_shared_lengthscale(t.value(lengthscale_var)(0, 0));

  MatrixXd raw = raw_embed(z, cfg, kernel, nullptr);
  VarId raw_id = t.push(
      std::move(raw),
      [z, cfg, kernel, lengthscale_var](Tape& tp, VarId self) {
        MatrixXd dl;
        raw_embed(z, cfg, kernel, &dl);
        MatrixXd g(1, 1);
        g(0, 0) = tp.adjoint(self).cwiseProduct(dl).sum();
        tp.add_adjoint(lengthscale_var, g);
      },
      "embed");

  if (!cfg.normalize) return raw_id;

  const double clamp = cfg.norm_clamp;
  MatrixXd normed = apply_normalization(t.value(raw_id), clamp);
  return t.push(
      std::move(normed),
      [raw_id, clamp](Tape& tp, VarId self) {
        const MatrixXd& raw_v = tp.value(raw_id);
        const MatrixXd& adj = tp.adjoint(self);
        const int d = static_cast<int>(raw_v.cols()) - 1;
        MatrixXd din = MatrixXd::Zero(raw_v.rows(), raw_v.cols());
        for (int p = 0; p < raw_v.rows(); ++p) {
          din(p, 0) = adj(p, 0);
          double density = std::max(raw_v(p, 0), clamp);
          din.row(p).tail(d) = adj.row(p).tail(d) / density;
          if (raw_v(p, 0) > clamp) {
            din(p, 0) -= adj.row(p).tail(d).dot(raw_v.row(p).tail(d)) / (density * density);
          }
        }
        tp.add_adjoint(raw_id, din);
      },
      "density_normalize");
}

double check_encoder_equivariance(const ContextSet& z, const Isometry& g, const EncoderConfig& cfg) {
  FeatureField e = embed(z, cfg);
  FeatureField lhs = embed(transform_context(z, g), cfg);
  FeatureField rhs = transform_field(e, g);

  const FiberGroup& group = z.rep.group();
  Matrix2d hinv = group.element_matrix(group.inverse(g.h));
  double worst = 0.0;
  for (int p = 0; p < cfg.grid.num_points(); ++p) {
    Vector2d pre = hinv * (cfg.grid.point(p) - g.translation);
    if (std::abs(pre.x() - cfg.grid.offset.x()) > cfg.grid.half_width ||
        std::abs(pre.y() - cfg.grid.offset.y()) > cfg.grid.half_width)
      continue;  // pullback left the observed window
    worst = std::max(worst, (lhs.values.row(p) - rhs.values.row(p)).cwiseAbs().maxCoeff());
  }
  return worst;
}

}  // namespace stochfield
