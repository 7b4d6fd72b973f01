#include <doctest.h>

#include <cmath>
#include <functional>

#include "stochfield/autodiff.hpp"
#include "stochfield/common.hpp"
#include "stochfield/encoder.hpp"
#include "stochfield/steer_net.hpp"

using namespace stochfield;

namespace {

// Central-difference check of a scalar function of one parameter store entry.
double fd_gradient_max_err(ParameterStore& store, int param,
                           const std::function<double(ParameterStore&)>& f, double step = 1e-6) {
  MatrixXd& v = store[param].value;
  const MatrixXd& g = store[param].grad;
  double worst = 0.0;
  double gscale = std::max(g.cwiseAbs().maxCoeff(), 1e-12);
  for (int i = 0; i < v.size(); ++i) {
    const double keep = v.data()[i];
    v.data()[i] = keep + step;
    const double fp = f(store);
    v.data()[i] = keep - step;
    const double fm = f(store);
    v.data()[i] = keep;
    const double fd = (fp - fm) / (2 * step);
    worst = std::max(worst, std::abs(fd - g.data()[i]) / std::max({std::abs(fd), gscale, 1e-10}));
  }
  return worst;
}

MatrixXd random_matrix(Rng& rng, int r, int c) {
  MatrixXd m(r, c);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

}  // namespace

TEST_SUITE_BEGIN("autodiff");

TEST_CASE("quadratic toy: gradient of |w|^2 is exactly 2w") {
  ParameterStore store;
  Rng rng(3);
  int w = store.add("w", random_matrix(rng, 4, 3));

  Tape t;
  VarId leaf = t.leaf(store, w);
  VarId sq = op_mul(t, leaf, leaf);
  VarId total = op_sum(t, sq);
  store.zero_grad();
  t.backward(total, store);
  CHECK((store[w].grad - 2.0 * store[w].value).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("generic operators match finite differences") {
  Rng rng(5);
  ParameterStore store;
  int a = store.add("a", random_matrix(rng, 3, 4));
  int b = store.add("b", random_matrix(rng, 4, 2));

  auto f = [&](ParameterStore& s) {
    Tape t;
    VarId va = t.leaf(s, a), vb = t.leaf(s, b);
    VarId y = op_matmul(t, va, vb);
    y = op_sigmoid(t, y);
    y = op_softplus(t, y);
    y = op_add_const(t, op_scale(t, y, 1.7), 0.3);
    VarId z = op_hcat(t, y, op_exp(t, op_cols(t, y, 0, 1)));
    return t.value(op_sum(t, op_mul(t, z, z)))(0, 0);
  };
  {
    Tape t;
    VarId va = t.leaf(store, a), vb = t.leaf(store, b);
    VarId y = op_matmul(t, va, vb);
    y = op_sigmoid(t, y);
    y = op_softplus(t, y);
    y = op_add_const(t, op_scale(t, y, 1.7), 0.3);
    VarId z = op_hcat(t, y, op_exp(t, op_cols(t, y, 0, 1)));
    store.zero_grad();
    t.backward(op_sum(t, op_mul(t, z, z)), store);
  }
  CHECK(fd_gradient_max_err(store, a, f) < 1e-7);
  CHECK(fd_gradient_max_err(store, b, f) < 1e-7);
}

TEST_CASE("conv / normrelu / covariance / smoothing / nll operators match finite differences") {
  Rng rng(7);
  FiberGroup c4(GroupKind::cyclic, 4);
  const int res = 6;
  GridGeometry grid{2.0, res};
  Representation hidden = Representation::direct_sum(
      {Representation::regular(c4), Representation::standard(c4), Representation::trivial(c4)});

  SteerableConvLayer layer{Representation::direct_sum({Representation::trivial(c4),
                                                       Representation::standard(c4)}),
                           hidden, 3, -1};
  SteerableConvLayer head{hidden,
                          Representation::direct_sum({Representation::standard(c4),
                                                      Representation::standard(c4),
                                                      Representation::standard(c4)}),
                          3, -1};

  ParameterStore store;
  int field_p = store.add("field", random_matrix(rng, res * res, 3));
  int w1 = store.add("w1", 0.4 * random_matrix(rng, layer.weight_rows(), layer.c_out()));
  int w2 = store.add("w2", 0.4 * random_matrix(rng, head.weight_rows(), head.c_out()));
  int bias = store.add("bias", 0.2 * random_matrix(rng, static_cast<int>(hidden.blocks().size()), 1).cwiseAbs());
  int log_l = store.add("log_l", MatrixXd::Constant(1, 1, std::log(0.8)));

  std::vector<Vector2d> targets = {Vector2d(0.3, -0.5), Vector2d(-1.1, 0.2), Vector2d(1.4, 1.3)};
  MatrixXd y = random_matrix(rng, 3, 2);

  auto build = [&](ParameterStore& s, Tape& t) {
    VarId f = t.leaf(s, field_p);
    VarId pw1 = project_op(t, t.leaf(s, w1), layer);
    VarId x = conv_op(t, f, pw1, res, 3, layer.c_in(), layer.c_out());
    x = normrelu_op(t, x, t.leaf(s, bias), hidden.blocks());
    VarId pw2 = project_op(t, t.leaf(s, w2), head);
    x = conv_op(t, x, pw2, res, 3, head.c_in(), head.c_out());
    VarId mean = op_cols(t, x, 0, 2);
    VarId cov = covariance_quadratic_op(t, op_cols(t, x, 2, 4), 2, 1e-3);
    VarId joint = op_hcat(t, mean, cov);
    VarId l = op_exp(t, t.leaf(s, log_l));
    VarId smoothed = kernel_smooth_op(t, joint, grid, targets, l);
    return gaussian_nll_op(t, op_cols(t, smoothed, 0, 2), op_cols(t, smoothed, 2, 4), y);
  };
  auto f = [&](ParameterStore& s) {
    Tape t;
    return t.value(build(s, t))(0, 0);
  };
  {
    Tape t;
    VarId loss = build(store, t);
    store.zero_grad();
    t.backward(loss, store);
  }
  for (int p = 0; p < store.size(); ++p) {
    CAPTURE(store[p].name);
    CHECK(fd_gradient_max_err(store, p, f, 1e-5) < 1e-6);
  }
}

TEST_CASE("embedding operator gradient (lengthscale through normalization)") {
  Rng rng(9);
  FiberGroup c4(GroupKind::cyclic, 4);
  Representation rep = Representation::standard(c4);
  ContextSet z;
  z.rep = rep;
  z.values = random_matrix(rng, 5, 2);
  for (int i = 0; i < 5; ++i) z.points.emplace_back(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5));

  EncoderConfig cfg{embedding_kernel(MatrixKernel::rbf_diagonal(2, 1.0), 1.0), GridGeometry{2.0, 8},
                    true, 1e-6};

  ParameterStore store;
  int log_l = store.add("log_l", MatrixXd::Constant(1, 1, std::log(0.9)));
  auto f = [&](ParameterStore& s) {
    Tape t;
    VarId l = op_exp(t, t.leaf(s, log_l));
    VarId e = embed_op(t, z, cfg, l);
    return t.value(op_sum(t, op_mul(t, e, e)))(0, 0);
  };
  {
    Tape t;
    VarId l = op_exp(t, t.leaf(store, log_l));
    VarId e = embed_op(t, z, cfg, l);
    store.zero_grad();
    t.backward(op_sum(t, op_mul(t, e, e)), store);
  }
  CHECK(fd_gradient_max_err(store, log_l, f) < 1e-7);
}

TEST_CASE("taped projection backward equals the projection of the upstream gradient (C4)") {
  Rng rng(11);
  FiberGroup c4(GroupKind::cyclic, 4);
  SteerableConvLayer layer{Representation::standard(c4), Representation::regular(c4), 3, -1};
  ParameterStore store;
  int w = store.add("w", random_matrix(rng, layer.weight_rows(), layer.c_out()));

  MatrixXd upstream = random_matrix(rng, layer.weight_rows(), layer.c_out());
  Tape t;
  VarId leaf = t.leaf(store, w);
  VarId proj = project_op(t, leaf, layer);
  // Seed the projected node with the upstream gradient via sum(upstream .* proj).
  VarId weighted = op_mul(t, proj, t.constant(upstream));
  store.zero_grad();
  t.backward(op_sum(t, weighted), store);

  KernelStack up_stack = stack_from_matrix(upstream, 3, layer.c_in(), layer.c_out());
  MatrixXd expect = matrix_from_stack(
      project_group_average(layer.rep_in, layer.rep_out, up_stack), layer.c_in(), layer.c_out());
  CHECK((store[w].grad - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_SUITE_END();
