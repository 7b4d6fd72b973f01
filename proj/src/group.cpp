#include "stochfield/group.hpp"

#include <cmath>

namespace stochfield {

FiberGroup::FiberGroup(GroupKind kind, int n) : kind_(kind), n_(n) {
  if (n < 1) throw ConfigError("fiber group rotation order must be >= 1, got " + std::to_string(n));
}

FiberGroup FiberGroup::parse(const std::string& name) {
  if (name.size() < 2 || (name[0] != 'C' && name[0] != 'D'))
    throw ConfigError("unrecognized fiber group '" + name + "' (expected C<N> or D<N>)");
  int n = 0;
  try {
    n = std::stoi(name.substr(1));
  } catch (const std::exception&) {
    throw ConfigError("unrecognized fiber group '" + name + "'");
  }
  return FiberGroup(name[0] == 'C' ? GroupKind::cyclic : GroupKind::dihedral, n);
}

std::string FiberGroup::name() const {
  return (kind_ == GroupKind::cyclic ? "C" : "D") + std::to_string(n_);
}

GroupElement FiberGroup::element(int index) const {
  if (index < 0 || index >= size())
    throw ConfigError("group element index " + std::to_string(index) + " out of range for " + name());
  if (kind_ == GroupKind::cyclic) return {index, false};
  return {index / 2, (index % 2) != 0};
}

int FiberGroup::index_of(const GroupElement& h) const {
  if (!contains(h)) throw ConfigError("element does not belong to " + name());
  return kind_ == GroupKind::cyclic ? h.rot : 2 * h.rot + (h.flip ? 1 : 0);
}

bool FiberGroup::contains(const GroupElement& h) const {
  if (h.rot < 0 || h.rot >= n_) return false;
  if (h.flip && kind_ == GroupKind::cyclic) return false;
  return true;
}

std::vector<GroupElement> FiberGroup::elements() const {
  std::vector<GroupElement> out;
  out.reserve(size());
  for (int i = 0; i < size(); ++i) out.push_back(element(i));
  return out;
}

GroupElement FiberGroup::compose(const GroupElement& a, const GroupElement& b) const {
  if (!contains(a) || !contains(b)) throw ConfigError("compose: element not in " + name());
  // Matrix images: R(a) F^sa * R(b) F^sb. F R(b) F = R(-b), so the rotation of b
  // flips sign when a carries a reflection.
  int rot = a.flip ? (a.rot - b.rot) : (a.rot + b.rot);
  rot = ((rot % n_) + n_) % n_;
  return {rot, a.flip != b.flip};
}

GroupElement FiberGroup::inverse(const GroupElement& a) const {
  if (!contains(a)) throw ConfigError("inverse: element not in " + name());
  if (a.flip) return a;  // reflections are involutions
  return {(n_ - a.rot) % n_, false};
}

Matrix2d rotation_matrix(double theta, bool flip) {
  double c = std::cos(theta), s = std::sin(theta);
  Matrix2d r;
  r << c, -s, s, c;
  if (flip) {
    Matrix2d f;
    f << 1, 0, 0, -1;
    r = r * f;
  }
  return r;
}

Matrix2d FiberGroup::element_matrix(const GroupElement& h) const {
  if (!contains(h)) throw ConfigError("element_matrix: element not in " + name());
  // Exact values at quarter turns keep 90-degree grid actions free of rounding.
  auto cs = [&](int k) -> std::pair<double, double> {
    int q = ((k % n_) + n_) % n_;
    if (4 * q == 0) return {1.0, 0.0};
    if (4 * q == n_) return {0.0, 1.0};
    if (2 * q == n_) return {-1.0, 0.0};
    if (4 * q == 3 * n_) return {0.0, -1.0};
    double t = 2.0 * M_PI * q / n_;
    return {std::cos(t), std::sin(t)};
  };
  auto [c, s] = cs(h.rot);
  Matrix2d r;
  r << c, -s, s, c;
  if (h.flip) {
    Matrix2d f;
    f << 1, 0, 0, -1;
    r = r * f;
  }
  return r;
}

Representation Representation::trivial(const FiberGroup& g) {
  return Representation(RepKind::trivial, g, 1, {});
}

Representation Representation::standard(const FiberGroup& g) {
  return Representation(RepKind::standard, g, 2, {});
}

Representation Representation::regular(const FiberGroup& g) {
  return Representation(RepKind::regular, g, g.size(), {});
}

Representation Representation::direct_sum(std::vector<Representation> parts) {
  if (parts.empty()) throw ConfigError("direct_sum needs at least one part");
  int dim = 0;
  for (const auto& p : parts) {
    if (!(p.group() == parts.front().group()))
      throw ConfigError("direct_sum parts must share one fiber group");
    dim += p.dimension();
  }
  FiberGroup g = parts.front().group();
  return Representation(RepKind::direct_sum, g, dim, std::move(parts));
}

Representation Representation::tensor_square(Representation base) {
  int d = base.dimension();
  FiberGroup g = base.group();
  return Representation(RepKind::tensor_square, g, d * d, {std::move(base)});
}

namespace {

MatrixXd kron(const MatrixXd& a, const MatrixXd& b) {
  MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

}  // namespace

MatrixXd Representation::matrix(const GroupElement& h) const {
  switch (kind_) {
    case RepKind::trivial:
      return MatrixXd::Identity(1, 1);
    case RepKind::standard:
      return group_.element_matrix(h);
    case RepKind::regular: {
      // Permutation of left multiplication: e_g -> e_{h g}.
      int n = group_.size();
      MatrixXd p = MatrixXd::Zero(n, n);
      for (int j = 0; j < n; ++j) {
        GroupElement g = group_.element(j);
        p(group_.index_of(group_.compose(h, g)), j) = 1.0;
      }
      return p;
    }
    case RepKind::direct_sum: {
      MatrixXd m = MatrixXd::Zero(dim_, dim_);
      int off = 0;
      for (const auto& part : parts_) {
        m.block(off, off, part.dimension(), part.dimension()) = part.matrix(h);
        off += part.dimension();
      }
      return m;
    }
    case RepKind::tensor_square: {
      // Column-stacked vec: vec(rho A rho^T) = (rho kron rho) vec(A).
      MatrixXd r = parts_[0].matrix(h);
      return kron(r, r);
    }
  }
  throw ConfigError("unreachable representation kind");
}

MatrixXd Representation::continuous_matrix(double theta, bool flip) const {
  switch (kind_) {
    case RepKind::trivial:
      return MatrixXd::Identity(1, 1);
    case RepKind::standard:
      return rotation_matrix(theta, flip);
    case RepKind::regular:
      throw ConfigError("regular representation has no continuous-rotation image");
    case RepKind::direct_sum: {
      MatrixXd m = MatrixXd::Zero(dim_, dim_);
      int off = 0;
      for (const auto& part : parts_) {
        m.block(off, off, part.dimension(), part.dimension()) = part.continuous_matrix(theta, flip);
        off += part.dimension();
      }
      return m;
    }
    case RepKind::tensor_square: {
      MatrixXd r = parts_[0].continuous_matrix(theta, flip);
      return kron(r, r);
    }
  }
  throw ConfigError("unreachable representation kind");
}

std::vector<std::pair<int, int>> Representation::blocks() const {
  if (kind_ != RepKind::direct_sum) return {{0, dim_}};
  std::vector<std::pair<int, int>> out;
  int off = 0;
  for (const auto& part : parts_) {
    out.emplace_back(off, part.dimension());
    off += part.dimension();
  }
  return out;
}

std::string Representation::describe() const {
  switch (kind_) {
    case RepKind::trivial:
      return "trivial";
    case RepKind::standard:
      return "standard";
    case RepKind::regular:
      return "regular";
    case RepKind::tensor_square:
      return "tensor_square(" + parts_[0].describe() + ")";
    case RepKind::direct_sum: {
      std::string s = "sum(";
      for (size_t i = 0; i < parts_.size(); ++i) {
        if (i) s += ",";
        s += parts_[i].describe();
      }
      return s + ")";
    }
  }
  return "?";
}

namespace {

// Minimal recursive-descent parser for the describe() grammar.
struct RepParser {
  const std::string& s;
  size_t pos = 0;
  const FiberGroup& g;

  std::string ident() {
    size_t start = pos;
    while (pos < s.size() && (std::isalnum(static_cast<unsigned char>(s[pos])) || s[pos] == '_')) ++pos;
    return s.substr(start, pos - start);
  }

  void expect(char c) {
    if (pos >= s.size() || s[pos] != c)
      throw ConfigError("bad representation descriptor '" + s + "' (expected '" + std::string(1, c) + "')");
    ++pos;
  }

  Representation parse() {
    std::string name = ident();
    if (name == "trivial") return Representation::trivial(g);
    if (name == "standard") return Representation::standard(g);
    if (name == "regular") return Representation::regular(g);
    if (name == "tensor_square") {
      expect('(');
      Representation base = parse();
      expect(')');
      return Representation::tensor_square(std::move(base));
    }
    if (name == "sum") {
      expect('(');
      std::vector<Representation> parts;
      parts.push_back(parse());
      while (pos < s.size() && s[pos] == ',') {
        ++pos;
        parts.push_back(parse());
      }
      expect(')');
      return Representation::direct_sum(std::move(parts));
    }
    throw ConfigError("unknown representation '" + name + "'");
  }
};

}  // namespace

Representation Representation::parse(const std::string& desc, const FiberGroup& g) {
  RepParser p{desc, 0, g};
  Representation r = p.parse();
  if (p.pos != desc.size()) throw ConfigError("trailing characters in representation '" + desc + "'");
  return r;
}

bool Representation::operator==(const Representation& o) const {
  if (kind_ != o.kind_ || dim_ != o.dim_ || !(group_ == o.group_)) return false;
  if (parts_.size() != o.parts_.size()) return false;
  for (size_t i = 0; i < parts_.size(); ++i)
    if (!(parts_[i] == o.parts_[i])) return false;
  return true;
}

namespace {

// Bilinear tap pulls for kappa(h x): list of (source tap, weight) pairs per
// destination tap. Pulls outside the tap grid contribute zero.
struct TapPull {
  int src;
  double weight;
};

std::vector<std::vector<TapPull>> tap_resampling(const FiberGroup& group, const GroupElement& h, int k) {
  const int m = (k - 1) / 2;
  Matrix2d hm = group.element_matrix(h);
  std::vector<std::vector<TapPull>> out(k * k);
  for (int t = 0; t < k * k; ++t) {
    double ox = t % k - m, oy = t / k - m;
    Vector2d p = hm * Vector2d(ox, oy);
    double u = p.x() + m, v = p.y() + m;
    // Snap to integer taps so finite-precision quarter turns stay exact.
    if (std::abs(u - std::round(u)) < 1e-9) u = std::round(u);
    if (std::abs(v - std::round(v)) < 1e-9) v = std::round(v);
    if (u < 0.0 || u > k - 1 || v < 0.0 || v > k - 1) continue;  // zero outside support
    int iu = std::min(static_cast<int>(std::floor(u)), k - 2);
    int iv = std::min(static_cast<int>(std::floor(v)), k - 2);
    if (k == 1) iu = iv = 0;
    double fu = u - iu, fv = v - iv;
    auto add = [&](int du, int dv, double w) {
      if (w == 0.0) return;
      out[t].push_back({(iv + dv) * k + (iu + du), w});
    };
    if (k == 1) {
      add(0, 0, 1.0);
    } else {
      add(0, 0, (1 - fu) * (1 - fv));
      add(1, 0, fu * (1 - fv));
      add(0, 1, (1 - fu) * fv);
      add(1, 1, fu * fv);
    }
  }
  return out;
}

}  // namespace

KernelStack project_group_average(const Representation& rep_in, const Representation& rep_out,
                                  const KernelStack& raw, bool adjoint) {
  const FiberGroup& group = rep_in.group();
  if (!(group == rep_out.group())) throw ConfigError("projection: input/output reps use different groups");
  const int k = raw.taps_per_axis;
  const int d_out = rep_out.dimension(), d_in = rep_in.dimension();
  if (static_cast<int>(raw.taps.size()) != k * k) throw ConfigError("projection: tap count mismatch");

  KernelStack result;
  result.taps_per_axis = k;
  result.taps.assign(k * k, MatrixXd::Zero(d_out, d_in));

  const double inv_order = 1.0 / group.size();
  for (const GroupElement& h : group.elements()) {
    MatrixXd ro = rep_out.matrix(h);
    MatrixXd ri = rep_in.matrix(h);
    auto pulls = tap_resampling(group, h, k);
    for (int t = 0; t < k * k; ++t) {
      for (const TapPull& pull : pulls[t]) {
        if (!adjoint) {
          result.taps[t].noalias() += (inv_order * pull.weight) * (ro.transpose() * raw.taps[pull.src] * ri);
        } else {
          result.taps[pull.src].noalias() += (inv_order * pull.weight) * (ro * raw.taps[t] * ri.transpose());
        }
      }
    }
  }
  return result;
}

double kernel_constraint_residual(const Representation& rep_in, const Representation& rep_out,
                                  const KernelStack& stack) {
  const FiberGroup& group = rep_in.group();
  const int k = stack.taps_per_axis;
  double worst = 0.0;
  for (const GroupElement& h : group.elements()) {
    MatrixXd ro = rep_out.matrix(h);
    MatrixXd ri = rep_in.matrix(h);
    auto pulls = tap_resampling(group, h, k);
    for (int t = 0; t < k * k; ++t) {
      MatrixXd pulled = MatrixXd::Zero(rep_out.dimension(), rep_in.dimension());
      for (const TapPull& pull : pulls[t]) pulled += pull.weight * stack.taps[pull.src];
      MatrixXd expected = ro * stack.taps[t] * ri.transpose();
      worst = std::max(worst, (pulled - expected).cwiseAbs().maxCoeff());
    }
  }
  return worst;
}

}  // namespace stochfield
