#include "stochfield/autodiff.hpp"

#include <cmath>

namespace stochfield {

namespace {

MatrixXd t_sigmoid(const MatrixXd& x) {
  MatrixXd y = x;
  for (int i = 0; i < y.size(); ++i) {
    double v = y.data()[i];
    y.data()[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return y;
}

}  // namespace

VarId op_add(Tape& t, VarId a, VarId b) {
  return t.push(t.value(a) + t.value(b),
                [a, b](Tape& tp, VarId self) {
                  tp.add_adjoint(a, tp.adjoint(self));
                  tp.add_adjoint(b, tp.adjoint(self));
                },
                "add");
}

VarId op_sub(Tape& t, VarId a, VarId b) {
  return t.push(t.value(a) - t.value(b),
                [a, b](Tape& tp, VarId self) {
                  tp.add_adjoint(a, tp.adjoint(self));
                  tp.add_adjoint(b, -tp.adjoint(self));
                },
                "sub");
}

VarId op_mul(Tape& t, VarId a, VarId b) {
  return t.push(t.value(a).cwiseProduct(t.value(b)),
                [a, b](Tape& tp, VarId self) {
                  tp.add_adjoint(a, tp.adjoint(self).cwiseProduct(tp.value(b)));
                  tp.add_adjoint(b, tp.adjoint(self).cwiseProduct(tp.value(a)));
                },
                "mul");
}

VarId op_scale(Tape& t, VarId a, double s) {
  return t.push(s * t.value(a),
                [a, s](Tape& tp, VarId self) { tp.add_adjoint(a, s * tp.adjoint(self)); }, "scale");
}

VarId op_matmul(Tape& t, VarId a, VarId b) {
  return t.push(t.value(a) * t.value(b),
                [a, b](Tape& tp, VarId self) {
                  tp.add_adjoint(a, tp.adjoint(self) * tp.value(b).transpose());
                  tp.add_adjoint(b, tp.value(a).transpose() * tp.adjoint(self));
                },
                "matmul");
}

VarId op_sum(Tape& t, VarId a) {
  MatrixXd s(1, 1);
  s(0, 0) = t.value(a).sum();
  return t.push(std::move(s),
                [a](Tape& tp, VarId self) {
                  tp.add_adjoint(a, MatrixXd::Constant(tp.value(a).rows(), tp.value(a).cols(),
                                                       tp.adjoint(self)(0, 0)));
                },
                "sum");
}

VarId op_mean(Tape& t, const std::vector<VarId>& xs) {
  MatrixXd m(1, 1);
  double acc = 0.0;
  for (VarId x : xs) acc += t.value(x)(0, 0);
  m(0, 0) = acc / xs.size();
  return t.push(std::move(m),
                [xs](Tape& tp, VarId self) {
                  const double w = tp.adjoint(self)(0, 0) / xs.size();
                  for (VarId x : xs) tp.add_adjoint(x, MatrixXd::Constant(1, 1, w));
                },
                "mean");
}

VarId op_exp(Tape& t, VarId a) {
  return t.push(t.value(a).array().exp().matrix(),
                [a](Tape& tp, VarId self) {
                  tp.add_adjoint(a, tp.adjoint(self).cwiseProduct(tp.value(self)));
                },
                "exp");
}

VarId op_softplus(Tape& t, VarId a) {
  MatrixXd y = t.value(a);
  for (int i = 0; i < y.size(); ++i) {
    double x = y.data()[i];
    y.data()[i] = x > 30.0 ? x : std::log1p(std::exp(x));
  }
  return t.push(std::move(y),
                [a](Tape& tp, VarId self) {
                  MatrixXd sig = t_sigmoid(tp.value(a));
                  tp.add_adjoint(a, tp.adjoint(self).cwiseProduct(sig));
                },
                "softplus");
}

VarId op_sigmoid(Tape& t, VarId a) {
  MatrixXd y = t_sigmoid(t.value(a));
  return t.push(std::move(y),
                [a](Tape& tp, VarId self) {
                  const MatrixXd& s = tp.value(self);
                  tp.add_adjoint(a, tp.adjoint(self).cwiseProduct(
                                        (s.array() * (1.0 - s.array())).matrix()));
                },
                "sigmoid");
}

VarId op_add_const(Tape& t, VarId a, double c) {
  return t.push(t.value(a).array() + c,
                [a](Tape& tp, VarId self) { tp.add_adjoint(a, tp.adjoint(self)); }, "add_const");
}

VarId op_hcat(Tape& t, VarId a, VarId b) {
  const MatrixXd& av = t.value(a);
  const MatrixXd& bv = t.value(b);
  MatrixXd out(av.rows(), av.cols() + bv.cols());
  out << av, bv;
  return t.push(std::move(out),
                [a, b](Tape& tp, VarId self) {
                  const MatrixXd& adj = tp.adjoint(self);
                  const int ac = static_cast<int>(tp.value(a).cols());
                  tp.add_adjoint(a, adj.leftCols(ac));
                  tp.add_adjoint(b, adj.rightCols(adj.cols() - ac));
                },
                "hcat");
}

VarId op_cols(Tape& t, VarId a, int begin, int count) {
  return t.push(t.value(a).middleCols(begin, count),
                [a, begin, count](Tape& tp, VarId self) {
                  MatrixXd d = MatrixXd::Zero(tp.value(a).rows(), tp.value(a).cols());
                  d.middleCols(begin, count) = tp.adjoint(self);
                  tp.add_adjoint(a, d);
                },
                "cols");
}

}  // namespace stochfield
