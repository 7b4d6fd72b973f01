#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "stochfield/common.hpp"
#include "stochfield/field.hpp"

using namespace stochfield;

namespace {

FeatureField random_field(Rng& rng, const GridGeometry& grid, const Representation& rep) {
  FeatureField f{grid, MatrixXd(grid.num_points(), rep.dimension()), rep};
  for (int i = 0; i < f.values.size(); ++i) f.values.data()[i] = rng.normal();
  return f;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_SUITE_BEGIN("field");

TEST_CASE("bilinear evaluation: nodes, midpoints, affine exactness") {
  GridGeometry grid{2.0, 5};
  FiberGroup c4(GroupKind::cyclic, 4);
  Representation rep = Representation::standard(c4);

  // Linear field F(x) = A x + b is reconstructed exactly by bilinear interpolation.
  Matrix2d a;
  a << 0.3, -1.2, 0.7, 0.4;
  Vector2d b(0.1, -0.5);
  FeatureField f{grid, MatrixXd(grid.num_points(), 2), rep};
  for (int p = 0; p < grid.num_points(); ++p) f.values.row(p) = (a * grid.point(p) + b).transpose();

  CHECK((eval_field(f, grid.point(2, 3)) - f.values.row(2 * 5 + 3).transpose()).norm() == 0.0);

  Vector2d mid = 0.5 * (grid.point(1, 1) + grid.point(1, 2));
  VectorXd expect_mid = 0.5 * (f.values.row(1 * 5 + 1) + f.values.row(1 * 5 + 2)).transpose();
  CHECK((eval_field(f, mid) - expect_mid).cwiseAbs().maxCoeff() < 1e-14);

  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Vector2d x(rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
    CHECK((eval_field(f, x) - (a * x + b)).cwiseAbs().maxCoeff() < 1e-12);
  }

  CHECK_THROWS_AS(eval_field(f, Vector2d(2.5, 0.0)), NumericalError);
}

TEST_CASE("transform_field: identity is bit-exact, constants are fixed points") {
  FiberGroup d4(GroupKind::dihedral, 4);
  GridGeometry grid{3.0, 8};
  Rng rng(7);

  FeatureField f = random_field(rng, grid, Representation::standard(d4));
  FeatureField same = transform_field(f, Isometry{Vector2d::Zero(), d4.identity()});
  CHECK(same.values == f.values);

  // Constant scalar field is fixed by every group element.
  FeatureField c{grid, MatrixXd::Constant(grid.num_points(), 1, 0.37), Representation::trivial(d4)};
  for (const auto& h : d4.elements()) {
    double fill = 0.0;
    FeatureField moved = transform_field(c, Isometry{Vector2d::Zero(), h}, &fill);
    CHECK(fill == 0.0);
    CHECK((moved.values.array() - 0.37).abs().maxCoeff() == 0.0);
  }
}

TEST_CASE("vector field F(x) = x is a fixed point of rotations") {
  FiberGroup c8(GroupKind::cyclic, 8);
  GridGeometry grid{4.0, 9};
  FeatureField f{grid, MatrixXd(grid.num_points(), 2), Representation::standard(c8)};
  for (int p = 0; p < grid.num_points(); ++p) f.values.row(p) = grid.point(p).transpose();

  // Quarter turns map the grid onto itself: exact everywhere.
  FeatureField q = transform_field(f, Isometry{Vector2d::Zero(), GroupElement{2, false}});
  CHECK((q.values - f.values).cwiseAbs().maxCoeff() < 1e-12);

  // A 45-degree turn pulls some corners from outside (zero-filled, flagged);
  // where the pullback stays inside, bilinear interpolation is exact on the
  // affine field.
  double fill = 0.0;
  FeatureField e = transform_field(f, Isometry{Vector2d::Zero(), GroupElement{1, false}}, &fill);
  CHECK(fill > 0.0);
  Matrix2d hinv = c8.element_matrix(c8.inverse(GroupElement{1, false}));
  for (int p = 0; p < grid.num_points(); ++p) {
    Vector2d pre = hinv * grid.point(p);
    if (std::abs(pre.x()) <= grid.half_width && std::abs(pre.y()) <= grid.half_width)
      CHECK((e.values.row(p) - f.values.row(p)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("four quarter turns compose to the identity; scalar values are permuted") {
  FiberGroup c4(GroupKind::cyclic, 4);
  GridGeometry grid{2.5, 6};
  Rng rng(13);
  FeatureField f = random_field(rng, grid, Representation::trivial(c4));

  FeatureField g = f;
  Isometry r90{Vector2d::Zero(), GroupElement{1, false}};
  std::multiset<double> before(f.values.data(), f.values.data() + f.values.size());
  for (int k = 0; k < 4; ++k) {
    g = transform_field(g, r90);
    std::multiset<double> after(g.values.data(), g.values.data() + g.values.size());
    CHECK(before == after);  // trivial rep: values only move between nodes
  }
  CHECK((g.values - f.values).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("transform_context examples and group action laws") {
  FiberGroup c4(GroupKind::cyclic, 4);
  Representation rep = Representation::standard(c4);

  ContextSet z;
  z.rep = rep;
  z.points = {Vector2d(1.0, 0.0)};
  z.values = MatrixXd(1, 2);
  z.values << 1.0, 0.0;

  ContextSet same = transform_context(z, Isometry{Vector2d::Zero(), c4.identity()});
  CHECK(same.points[0] == z.points[0]);
  CHECK(same.values == z.values);

  ContextSet rot = transform_context(z, Isometry{Vector2d::Zero(), GroupElement{1, false}});
  CHECK((rot.points[0] - Vector2d(0.0, 1.0)).norm() == 0.0);
  CHECK((rot.values.row(0).transpose() - Vector2d(0.0, 1.0)).norm() == 0.0);

  // Composition law (g1 g2).Z = g1.(g2.Z) under random elements and translations.
  FiberGroup d8(GroupKind::dihedral, 8);
  Representation rep8 = Representation::standard(d8);
  Rng rng(31);
  ContextSet big;
  big.rep = rep8;
  big.values = MatrixXd(6, 2);
  for (int i = 0; i < 6; ++i) {
    big.points.emplace_back(rng.normal(), rng.normal());
    big.values(i, 0) = rng.normal();
    big.values(i, 1) = rng.normal();
  }
  for (int trial = 0; trial < 20; ++trial) {
    Isometry g1{Vector2d(rng.normal(), rng.normal()), d8.element(rng.below(d8.size()))};
    Isometry g2{Vector2d(rng.normal(), rng.normal()), d8.element(rng.below(d8.size()))};
    // g1 g2 = t_{x1 + h1 x2} (h1 h2)
    Isometry g12{g1.translation + d8.element_matrix(g1.h) * g2.translation, d8.compose(g1.h, g2.h)};
    ContextSet lhs = transform_context(big, g12);
    ContextSet rhs = transform_context(transform_context(big, g2), g1);
    for (int i = 0; i < 6; ++i) {
      CHECK((lhs.points[i] - rhs.points[i]).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((lhs.values.row(i) - rhs.values.row(i)).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("context CSV round-trips bit-exactly and validates input") {
  FiberGroup c1(GroupKind::cyclic, 1);
  Representation rep =
      Representation::direct_sum({Representation::trivial(c1), Representation::standard(c1)});
  Rng rng(41);
  ContextSet z;
  z.rep = rep;
  z.values = MatrixXd(10, 3);
  for (int i = 0; i < 10; ++i) {
    z.points.emplace_back(rng.normal() * 1e3, rng.normal() * 1e-7);
    for (int c = 0; c < 3; ++c) z.values(i, c) = rng.normal();
  }
  std::string path = temp_path("ctx_roundtrip.csv");
  write_context_csv(path, z);
  ContextSet back = read_context_csv(path, rep);
  REQUIRE(back.size() == z.size());
  for (int i = 0; i < 10; ++i) {
    CHECK(back.points[i] == z.points[i]);
    CHECK(back.values.row(i) == z.values.row(i));
  }

  {
    std::ofstream bad(temp_path("ctx_bad.csv"));
    bad << "x,y,v1,v2,v3\n1,2,3,4,5\n1,2,oops,4,5\n";
  }
  try {
    read_context_csv(temp_path("ctx_bad.csv"), rep);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":3:") != std::string::npos);  // line number reported
  }

  // Duplicate points violate multiplicity 1.
  ContextSet dup = z;
  dup.points[1] = dup.points[0];
  CHECK_THROWS_AS(dup.validate(), DataError);
}

TEST_CASE("field binary format round-trips with its sidecar") {
  FiberGroup d4(GroupKind::dihedral, 4);
  GridGeometry grid{1.5, 4, Vector2d(0.25, -0.5)};
  Rng rng(43);
  FeatureField f = random_field(rng, grid, Representation::regular(d4));
  std::string path = temp_path("field_roundtrip.bin");
  write_field(path, f);
  FeatureField back = read_field(path, d4);
  CHECK(back.geometry == f.geometry);
  CHECK(back.rep == f.rep);
  CHECK(back.values == f.values);
}

TEST_SUITE_END();
