#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "stochfield/common.hpp"
#include "stochfield/steer_net.hpp"

using namespace stochfield;

namespace {

double max_abs(const MatrixXd& m) { return m.cwiseAbs().maxCoeff(); }

MatrixXd random_matrix(Rng& rng, int r, int c) {
  MatrixXd m(r, c);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

ContextSet random_context(Rng& rng, const Representation& rep, int n, double radius) {
  ContextSet z;
  z.rep = rep;
  z.values.resize(n, rep.dimension());
  for (int i = 0; i < n; ++i) {
    z.points.emplace_back(rng.uniform(-radius, radius), rng.uniform(-radius, radius));
    for (int c = 0; c < rep.dimension(); ++c) z.values(i, c) = rng.normal();
  }
  return z;
}

}  // namespace

TEST_SUITE_BEGIN("steer_net");

TEST_CASE("conv2d: delta kernel is the identity, averaging kernel fixes constants") {
  const int res = 7, ks = 3;
  Rng rng(3);
  MatrixXd f = random_matrix(rng, res * res, 1);

  MatrixXd delta = MatrixXd::Zero(ks * ks, 1);
  delta(4, 0) = 1.0;  // center tap
  CHECK(max_abs(conv2d(f, res, delta, ks) - f) == 0.0);

  MatrixXd avg = MatrixXd::Constant(ks * ks, 1, 1.0 / 9.0);
  MatrixXd c = MatrixXd::Constant(res * res, 1, 2.5);
  MatrixXd out = conv2d(c, res, avg, ks);
  for (int iy = 1; iy < res - 1; ++iy)
    for (int ix = 1; ix < res - 1; ++ix)
      CHECK(out(iy * res + ix, 0) == doctest::Approx(2.5).epsilon(1e-14));
}

TEST_CASE("conv with projected weights commutes with quarter turns") {
  FiberGroup c4(GroupKind::cyclic, 4);
  Representation rin = Representation::direct_sum({Representation::trivial(c4),
                                                   Representation::standard(c4)});
  Representation rout = Representation::direct_sum({Representation::regular(c4),
                                                    Representation::standard(c4)});
  SteerableConvLayer layer{rin, rout, 5, -1};
  Rng rng(5);

  MatrixXd raw = random_matrix(rng, layer.weight_rows(), layer.c_out());
  KernelStack projected = project_group_average(rin, rout, stack_from_matrix(raw, 5, layer.c_in(), layer.c_out()));
  MatrixXd w = matrix_from_stack(projected, layer.c_in(), layer.c_out());

  const int res = 8;
  GridGeometry grid{3.0, res};
  FeatureField f{grid, random_matrix(rng, res * res, rin.dimension()), rin};

  for (const GroupElement& h : c4.elements()) {
    Isometry g{Vector2d::Zero(), h};
    FeatureField gf = transform_field(f, g);
    MatrixXd lhs = conv2d(gf.values, res, w, 5);
    FeatureField conv_f{grid, conv2d(f.values, res, w, 5), rout};
    MatrixXd rhs = transform_field(conv_f, g).values;
    CHECK(max_abs(lhs - rhs) < 1e-10);
  }
}

TEST_CASE("normrelu: zero bias is the identity, closed gate zeroes the block, equivariance exact") {
  FiberGroup c4(GroupKind::cyclic, 4);
  Representation rep = Representation::direct_sum({Representation::standard(c4),
                                                   Representation::regular(c4)});
  auto blocks = rep.blocks();
  Rng rng(7);
  MatrixXd f = random_matrix(rng, 20, rep.dimension());

  CHECK(max_abs(normrelu(f, blocks, VectorXd::Zero(2)) - f) < 1e-15);

  VectorXd huge = VectorXd::Constant(2, 1e6);
  CHECK(max_abs(normrelu(f, blocks, huge)) == 0.0);

  // sigma(rho(h) v) = rho(h) sigma(v) for every h and 100 random rows.
  VectorXd b(2);
  b << 0.4, 0.9;
  for (int trial = 0; trial < 100; ++trial) {
    MatrixXd v = random_matrix(rng, 1, rep.dimension());
    GroupElement h = c4.element(rng.below(c4.size()));
    MatrixXd rho = rep.matrix(h);
    MatrixXd lhs = normrelu((rho * v.transpose()).transpose(), blocks, b);
    MatrixXd rhs = (rho * normrelu(v, blocks, b).transpose()).transpose();
    CHECK(max_abs(lhs - rhs) < 1e-12);
  }
}

TEST_CASE("quadratic covariance head: floor, PSD and exact equivariance") {
  FiberGroup d4(GroupKind::dihedral, 4);
  Representation rep = Representation::standard(d4);
  Rng rng(9);

  MatrixXd id_a(1, 4);
  id_a << 1, 0, 0, 1;  // vec(I)
  MatrixXd s = covariance_quadratic(id_a, 2, 1e-4);
  CHECK(s(0, 0) == doctest::Approx(1.0 + 1e-4));
  CHECK(s(0, 3) == doctest::Approx(1.0 + 1e-4));
  CHECK(s(0, 1) == 0.0);

  MatrixXd zero = covariance_quadratic(MatrixXd::Zero(1, 4), 2, 1e-4);
  CHECK(zero(0, 0) == doctest::Approx(1e-4));

  for (int trial = 0; trial < 100; ++trial) {
    Matrix2d a;
    a << rng.normal(), rng.normal(), rng.normal(), rng.normal();
    MatrixXd av(1, 4);
    av << a(0, 0), a(1, 0), a(0, 1), a(1, 1);

    // PSD before flooring: eigenvalues of A A^T are nonnegative exactly.
    MatrixXd sv = covariance_quadratic(av, 2, 0.0);
    Matrix2d sm;
    sm << sv(0, 0), sv(0, 2), sv(0, 1), sv(0, 3);
    Eigen::SelfAdjointEigenSolver<Matrix2d> eig(sm);
    CHECK(eig.eigenvalues().minCoeff() >= -1e-15);

    GroupElement h = d4.element(rng.below(d4.size()));
    Matrix2d rho = rep.matrix(h);
    Matrix2d ra = rho * a;  // rho_eta action on vec(A) is A -> rho A
    MatrixXd rav(1, 4);
    rav << ra(0, 0), ra(1, 0), ra(0, 1), ra(1, 1);
    MatrixXd lhs_v = covariance_quadratic(rav, 2, 0.0);
    Matrix2d lhs;
    lhs << lhs_v(0, 0), lhs_v(0, 2), lhs_v(0, 1), lhs_v(0, 3);
    CHECK(max_abs(lhs - rho * sm * rho.transpose()) < 1e-12);
  }
}

TEST_CASE("kernel smoothing: node limit, constants, PSD preservation") {
  GridGeometry grid{2.0, 9};
  Rng rng(11);

  MatrixXd v = random_matrix(rng, grid.num_points(), 3);
  // Tiny lengthscale concentrates all weight on the nearest node.
  MatrixXd out = kernel_smooth(v, grid, {grid.point(3, 5)}, 1e-2);
  CHECK(max_abs(out.row(0) - v.row(3 * 9 + 5)) < 1e-12);

  MatrixXd c = MatrixXd::Constant(grid.num_points(), 2, -1.7);
  MatrixXd out2 = kernel_smooth(c, grid, {Vector2d(0.123, -0.456), Vector2d(1.9, 1.9)}, 0.7);
  CHECK(max_abs(out2.array().matrix() + MatrixXd::Constant(2, 2, 1.7)) < 1e-12);

  // Convex combinations of PSD matrices stay PSD.
  MatrixXd psd(grid.num_points(), 4);
  for (int p = 0; p < grid.num_points(); ++p) {
    Matrix2d a;
    a << rng.normal(), rng.normal(), rng.normal(), rng.normal();
    Matrix2d s = a * a.transpose();
    psd.row(p) << s(0, 0), s(1, 0), s(0, 1), s(1, 1);
  }
  std::vector<Vector2d> targets;
  for (int t = 0; t < 50; ++t) targets.emplace_back(rng.uniform(-2, 2), rng.uniform(-2, 2));
  MatrixXd sm = kernel_smooth(psd, grid, targets, 0.5);
  for (int t = 0; t < 50; ++t) {
    Matrix2d s;
    s << sm(t, 0), sm(t, 2), sm(t, 1), sm(t, 3);
    Eigen::SelfAdjointEigenSolver<Matrix2d> eig(s);
    CHECK(eig.eigenvalues().minCoeff() >= -1e-12);
  }
}

TEST_CASE("model construction enforces the spec invariants") {
  SteerCNPConfig cfg;
  cfg.grid = GridGeometry{4.0, 12};
  cfg.n_layers = 2;  // below the allowed depth range
  CHECK_THROWS_AS(SteerCNP{cfg}, ConfigError);
  cfg.n_layers = 3;
  cfg.kernel_size = 4;  // even taps cannot be centered
  CHECK_THROWS_AS(SteerCNP{cfg}, ConfigError);
}

TEST_CASE("zero context yields a constant field fixed by the biases") {
  SteerCNPConfig cfg;
  cfg.group = "C4";
  cfg.n_layers = 3;
  cfg.kernel_size = 3;
  cfg.hidden_copies = 2;
  cfg.grid = GridGeometry{4.0, 10};
  cfg.init_seed = 21;
  SteerCNP model(cfg);

  ContextSet empty;
  empty.rep = model.rep_in();
  empty.values.resize(0, 2);
  GaussianPrediction pred = model.predict_grid(empty);
  // Zero embedding -> zero conv stack (biases only gate norms) -> zero mean,
  // floor covariance; constant across the grid.
  for (int p = 0; p < cfg.grid.num_points(); ++p) {
    CHECK(max_abs(pred.mean_field.values.row(p) - pred.mean_field.values.row(0)) == 0.0);
    CHECK(max_abs(pred.cov_field.values.row(p) - pred.cov_field.values.row(0)) == 0.0);
  }
  CHECK(max_abs(pred.mean_field.values) == 0.0);
  CHECK(pred.cov_field.values(0, 0) == doctest::Approx(cfg.cov_eps));
}

TEST_CASE("doubling the grid margin leaves interior predictions unchanged") {
  // Context compact enough that the embedding vanishes near the boundary;
  // the probe isolates zero-padding boundary effects.
  SteerCNPConfig cfg;
  cfg.group = "C4";
  cfg.n_layers = 3;
  cfg.kernel_size = 3;
  cfg.hidden_copies = 2;
  cfg.grid = GridGeometry{5.5, 23};  // spacing 0.5
  cfg.init_embed_lengthscale = 0.7;
  cfg.init_smooth_lengthscale = 0.5;
  cfg.init_seed = 33;
  SteerCNP narrow(cfg);

  SteerCNPConfig wide_cfg = cfg;
  wide_cfg.grid = GridGeometry{7.5, 31};  // same spacing, 4 more cells per side
  SteerCNP wide(wide_cfg);
  wide.params() = narrow.params();  // same weights; only the canvas grows

  Rng rng(13);
  ContextSet z = random_context(rng, narrow.rep_in(), 6, 1.0);
  std::vector<Vector2d> targets;
  for (int t = 0; t < 20; ++t) targets.emplace_back(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));

  PointPrediction a = narrow.predict(z, targets);
  PointPrediction b = wide.predict(z, targets);
  CHECK(max_abs(a.means - b.means) < 1e-8);
  for (int t = 0; t < 20; ++t) CHECK(max_abs(a.covs[t] - b.covs[t]) < 1e-8);
}

TEST_CASE("checkpoints round-trip through save/load") {
  SteerCNPConfig cfg;
  cfg.group = "D4";
  cfg.n_layers = 3;
  cfg.kernel_size = 3;
  cfg.hidden_copies = 2;
  cfg.grid = GridGeometry{4.0, 10};
  cfg.init_seed = 55;
  SteerCNP model(cfg);

  Rng rng(17);
  ContextSet z = random_context(rng, model.rep_in(), 5, 3.0);
  std::vector<Vector2d> targets = {Vector2d(0.4, -0.9), Vector2d(-1.0, 1.0)};
  PointPrediction before = model.predict(z, targets);

  std::string dir = (std::filesystem::temp_directory_path() / "steercnp_ckpt").string();
  model.save(dir);
  SteerCNP loaded = SteerCNP::load(dir);
  PointPrediction after = loaded.predict(z, targets);
  CHECK(max_abs(before.means - after.means) == 0.0);
  for (size_t t = 0; t < targets.size(); ++t) CHECK(max_abs(before.covs[t] - after.covs[t]) == 0.0);
}

TEST_CASE("softplus scalar head keeps the variance above the floor and the mean in (0,1)") {
  SteerCNPConfig cfg;
  cfg.group = "C4";
  cfg.rep_in = "trivial";
  cfg.head = HeadKind::softplus_scalar;
  cfg.n_layers = 3;
  cfg.kernel_size = 3;
  cfg.hidden_copies = 2;
  cfg.grid = GridGeometry{9.0, 16};
  cfg.init_seed = 77;
  SteerCNP model(cfg);

  Rng rng(19);
  ContextSet z;
  z.rep = model.rep_in();
  z.values.resize(6, 1);
  for (int i = 0; i < 6; ++i) {
    z.points.emplace_back(rng.uniform(-6, 6), rng.uniform(-6, 6));
    z.values(i, 0) = rng.uniform();
  }
  std::vector<Vector2d> targets;
  for (int t = 0; t < 9; ++t) targets.emplace_back(rng.uniform(-6, 6), rng.uniform(-6, 6));
  PointPrediction pred = model.predict(z, targets);
  for (int t = 0; t < 9; ++t) {
    CHECK(pred.means(t, 0) > 0.0);
    CHECK(pred.means(t, 0) < 1.0);
    CHECK(pred.covs[t](0, 0) >= cfg.min_variance);
  }
}

TEST_SUITE_END();
