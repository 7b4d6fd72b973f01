#include <doctest.h>

#include <set>

#include "stochfield/common.hpp"
#include "stochfield/group.hpp"

using namespace stochfield;

namespace {

double max_abs(const MatrixXd& m) { return m.cwiseAbs().maxCoeff(); }

std::vector<FiberGroup> all_groups_up_to(int n_max) {
  std::vector<FiberGroup> out;
  for (int n = 1; n <= n_max; ++n) {
    out.emplace_back(GroupKind::cyclic, n);
    out.emplace_back(GroupKind::dihedral, n);
  }
  return out;
}

KernelStack random_stack(Rng& rng, int k, int d_out, int d_in) {
  KernelStack s;
  s.taps_per_axis = k;
  for (int t = 0; t < k * k; ++t) {
    MatrixXd m(d_out, d_in);
    for (int i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    s.taps.push_back(std::move(m));
  }
  return s;
}

double stack_dot(const KernelStack& a, const KernelStack& b) {
  double acc = 0.0;
  for (size_t t = 0; t < a.taps.size(); ++t) acc += (a.taps[t].cwiseProduct(b.taps[t])).sum();
  return acc;
}

}  // namespace

TEST_SUITE_BEGIN("group");

TEST_CASE("element matrices at quarter turns and reflections") {
  FiberGroup c4(GroupKind::cyclic, 4);
  Matrix2d r90 = c4.element_matrix({1, false});
  Matrix2d expected;
  expected << 0, -1, 1, 0;
  CHECK(max_abs(r90 - expected) == 0.0);

  CHECK(max_abs(c4.element_matrix(c4.identity()) - Matrix2d::Identity()) == 0.0);

  FiberGroup d2(GroupKind::dihedral, 2);
  Matrix2d flip = d2.element_matrix({0, true});
  expected << 1, 0, 0, -1;
  CHECK(max_abs(flip - expected) == 0.0);
}

TEST_CASE("group axioms and matrix consistency, exhaustive for N <= 16") {
  for (const FiberGroup& g : all_groups_up_to(16)) {
    CAPTURE(g.name());
    const auto elems = g.elements();
    CHECK(static_cast<int>(elems.size()) ==
          (g.kind() == GroupKind::dihedral ? 2 * g.rotation_order() : g.rotation_order()));
    for (const auto& a : elems) {
      Matrix2d ma = g.element_matrix(a);
      CHECK(max_abs(ma * ma.transpose() - Matrix2d::Identity()) < 1e-12);
      CHECK(g.compose(a, g.inverse(a)) == g.identity());
      CHECK(g.compose(g.inverse(a), a) == g.identity());
      for (const auto& b : elems) {
        GroupElement ab = g.compose(a, b);
        CHECK(g.contains(ab));
        CHECK(max_abs(g.element_matrix(ab) - ma * g.element_matrix(b)) < 1e-12);
      }
    }
  }
}

TEST_CASE("representations are orthogonal homomorphisms, exhaustive for N <= 16") {
  for (const FiberGroup& g : all_groups_up_to(16)) {
    CAPTURE(g.name());
    std::vector<Representation> reps = {
        Representation::trivial(g),
        Representation::standard(g),
        Representation::regular(g),
        Representation::direct_sum({Representation::standard(g), Representation::trivial(g)}),
        Representation::tensor_square(Representation::standard(g)),
    };
    for (const auto& rep : reps) {
      CAPTURE(rep.describe());
      for (const auto& a : g.elements()) {
        MatrixXd ra = rep.matrix(a);
        CHECK(max_abs(ra * ra.transpose() - MatrixXd::Identity(rep.dimension(), rep.dimension())) < 1e-12);
        for (const auto& b : g.elements()) {
          CHECK(max_abs(rep.matrix(g.compose(a, b)) - ra * rep.matrix(b)) < 1e-12);
        }
      }
    }
  }
}

TEST_CASE("rep matrix examples") {
  FiberGroup c4(GroupKind::cyclic, 4);

  CHECK(Representation::trivial(c4).matrix({2, false})(0, 0) == 1.0);

  // Regular representation of the generator against the left-multiplication
  // table enumerated directly.
  Representation reg = Representation::regular(c4);
  MatrixXd shift = reg.matrix({1, false});
  MatrixXd table = MatrixXd::Zero(4, 4);
  for (int j = 0; j < 4; ++j) table((1 + j) % 4, j) = 1.0;  // r * r^j = r^{1+j}
  CHECK(max_abs(shift - table) == 0.0);

  // tensor_square(standard) applied to vec(I) is vec(rho I rho^T) = vec(I).
  Representation ts = Representation::tensor_square(Representation::standard(c4));
  VectorXd vec_i(4);
  vec_i << 1, 0, 0, 1;
  CHECK(max_abs(ts.matrix({1, false}) * vec_i - vec_i) < 1e-15);
}

TEST_CASE("tensor_square realizes conjugation on 100 random matrices") {
  for (const FiberGroup& g : {FiberGroup(GroupKind::cyclic, 8), FiberGroup(GroupKind::dihedral, 4)}) {
    Representation base = Representation::standard(g);
    Representation ts = Representation::tensor_square(base);
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
      Matrix2d a;
      a << rng.normal(), rng.normal(), rng.normal(), rng.normal();
      for (const auto& h : g.elements()) {
        Matrix2d rho = base.matrix(h);
        Matrix2d conj = rho * a * rho.transpose();
        VectorXd va(4), vc(4);
        va << a(0, 0), a(1, 0), a(0, 1), a(1, 1);
        vc << conj(0, 0), conj(1, 0), conj(0, 1), conj(1, 1);
        CHECK(max_abs(ts.matrix(h) * va - vc) < 1e-12);
      }
    }
  }
}

TEST_CASE("projection: trivial reps average the orbit") {
  FiberGroup c4(GroupKind::cyclic, 4);
  Representation triv = Representation::trivial(c4);
  Rng rng(5);
  KernelStack raw = random_stack(rng, 3, 1, 1);
  KernelStack proj = project_group_average(triv, triv, raw);
  const int k = 3;
  auto tap = [&](int dx, int dy) { return (dy + 1) * k + (dx + 1); };
  double orbit_mean = (raw.taps[tap(1, 0)](0, 0) + raw.taps[tap(0, 1)](0, 0) +
                       raw.taps[tap(-1, 0)](0, 0) + raw.taps[tap(0, -1)](0, 0)) /
                      4.0;
  CHECK(proj.taps[tap(1, 0)](0, 0) == doctest::Approx(orbit_mean).epsilon(1e-14));
  CHECK(proj.taps[tap(0, 1)](0, 0) == doctest::Approx(orbit_mean).epsilon(1e-14));
}

TEST_CASE("projection is idempotent, linear and satisfies the constraint for C4/D4") {
  for (const FiberGroup& g : {FiberGroup(GroupKind::cyclic, 4), FiberGroup(GroupKind::dihedral, 4)}) {
    CAPTURE(g.name());
    Representation rin =
        Representation::direct_sum({Representation::trivial(g), Representation::standard(g)});
    Representation rout = Representation::regular(g);
    Rng rng(17);
    KernelStack raw = random_stack(rng, 5, rout.dimension(), rin.dimension());

    KernelStack once = project_group_average(rin, rout, raw);
    CHECK(kernel_constraint_residual(rin, rout, once) < 1e-12);

    // Already-equivariant input is returned unchanged.
    KernelStack twice = project_group_average(rin, rout, once);
    for (size_t t = 0; t < once.taps.size(); ++t) CHECK(max_abs(twice.taps[t] - once.taps[t]) < 1e-12);

    // Linearity.
    KernelStack raw2 = random_stack(rng, 5, rout.dimension(), rin.dimension());
    KernelStack combo = raw;
    for (size_t t = 0; t < combo.taps.size(); ++t) combo.taps[t] = 2.0 * raw.taps[t] - 3.0 * raw2.taps[t];
    KernelStack pc = project_group_average(rin, rout, combo);
    KernelStack p2 = project_group_average(rin, rout, raw2);
    for (size_t t = 0; t < pc.taps.size(); ++t)
      CHECK(max_abs(pc.taps[t] - (2.0 * once.taps[t] - 3.0 * p2.taps[t])) < 1e-12);
  }
}

TEST_CASE("projection adjoint agrees with the inner product, including interpolating groups") {
  for (const FiberGroup& g : {FiberGroup(GroupKind::cyclic, 4), FiberGroup(GroupKind::cyclic, 8),
                              FiberGroup(GroupKind::dihedral, 8)}) {
    CAPTURE(g.name());
    Representation rin = Representation::standard(g);
    Representation rout = Representation::regular(g);
    Rng rng(23);
    KernelStack a = random_stack(rng, 5, rout.dimension(), rin.dimension());
    KernelStack b = random_stack(rng, 5, rout.dimension(), rin.dimension());
    KernelStack pa = project_group_average(rin, rout, a);
    KernelStack ptb = project_group_average(rin, rout, b, /*adjoint=*/true);
    CHECK(stack_dot(pa, b) == doctest::Approx(stack_dot(a, ptb)).epsilon(1e-12));
  }
}

TEST_CASE("projection for C4 is self-adjoint (gradient of the projection is the projection)") {
  FiberGroup c4(GroupKind::cyclic, 4);
  Representation rin = Representation::standard(c4);
  Representation rout = Representation::regular(c4);
  Rng rng(29);
  KernelStack grad = random_stack(rng, 5, rout.dimension(), rin.dimension());
  KernelStack fwd = project_group_average(rin, rout, grad);
  KernelStack adj = project_group_average(rin, rout, grad, /*adjoint=*/true);
  for (size_t t = 0; t < fwd.taps.size(); ++t) CHECK(max_abs(fwd.taps[t] - adj.taps[t]) < 1e-12);
}

TEST_CASE("group and representation descriptors round-trip") {
  for (const std::string name : {"C1", "C8", "D4", "D16"}) {
    CHECK(FiberGroup::parse(name).name() == name);
  }
  CHECK_THROWS_AS(FiberGroup::parse("Q8"), ConfigError);

  FiberGroup d4(GroupKind::dihedral, 4);
  Representation rep = Representation::direct_sum(
      {Representation::trivial(d4),
       Representation::tensor_square(Representation::standard(d4)), Representation::regular(d4)});
  Representation parsed = Representation::parse(rep.describe(), d4);
  CHECK(parsed == rep);
  CHECK(parsed.dimension() == 1 + 4 + 8);
  auto blocks = parsed.blocks();
  REQUIRE(blocks.size() == 3);
  CHECK(blocks[1] == std::pair<int, int>{1, 4});
}

TEST_CASE("mismatched group/representation pairing is rejected") {
  FiberGroup c4(GroupKind::cyclic, 4);
  FiberGroup c8(GroupKind::cyclic, 8);
  Representation rep = Representation::standard(c4);
  CHECK_THROWS_AS(rep.matrix(GroupElement{5, false}), ConfigError);
  CHECK_THROWS_AS(Representation::direct_sum({Representation::trivial(c4), Representation::trivial(c8)}),
                  ConfigError);
}

TEST_SUITE_END();
