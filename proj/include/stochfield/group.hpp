#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "stochfield/common.hpp"

namespace stochfield {

enum class GroupKind { cyclic, dihedral };

// Element of C_N or D_N: rotation by 2*pi*rot/N, optionally preceded by the
// reflection about the x-axis (matrix image is R(2*pi*rot/N) * F^flip).
struct GroupElement {
  int rot = 0;
  bool flip = false;

  bool operator==(const GroupElement& o) const { return rot == o.rot && flip == o.flip; }
};

class FiberGroup {
 public:
  FiberGroup(GroupKind kind, int n);

  static FiberGroup parse(const std::string& name);  // "C4", "D8", ...

  GroupKind kind() const { return kind_; }
  int rotation_order() const { return n_; }
  int size() const { return kind_ == GroupKind::dihedral ? 2 * n_ : n_; }
  std::string name() const;

  // Enumeration is rotation-major, flip-minor: index = 2*rot + flip for D_N,
  // index = rot for C_N. This ordering fixes the regular-representation basis.
  GroupElement element(int index) const;
  int index_of(const GroupElement& h) const;

  GroupElement identity() const { return {0, false}; }
  GroupElement compose(const GroupElement& a, const GroupElement& b) const;
  GroupElement inverse(const GroupElement& a) const;
  Matrix2d element_matrix(const GroupElement& h) const;

  bool contains(const GroupElement& h) const;
  std::vector<GroupElement> elements() const;

  bool operator==(const FiberGroup& o) const { return kind_ == o.kind_ && n_ == o.n_; }

 private:
  GroupKind kind_;
  int n_;
};

// Continuous rotoreflection matrix R(theta) * F^flip, used where kernels are
// spot-checked under sampled continuous angles.
Matrix2d rotation_matrix(double theta, bool flip = false);

enum class RepKind { trivial, standard, regular, direct_sum, tensor_square };

// Orthogonal representation of a fiber group. Composite kinds hold children;
// all matrices are orthogonal and satisfy the homomorphism property.
class Representation {
 public:
  // Defaults to the trivial representation of C1 (a plain scalar channel).
  Representation() : Representation(RepKind::trivial, FiberGroup(GroupKind::cyclic, 1), 1, {}) {}

  static Representation trivial(const FiberGroup& g);
  static Representation standard(const FiberGroup& g);
  static Representation regular(const FiberGroup& g);
  static Representation direct_sum(std::vector<Representation> parts);
  static Representation tensor_square(Representation base);

  RepKind kind() const { return kind_; }
  int dimension() const { return dim_; }
  const FiberGroup& group() const { return group_; }
  const std::vector<Representation>& parts() const { return parts_; }

  MatrixXd matrix(const GroupElement& h) const;

  // Matrix image under a continuous rotoreflection; defined for trivial,
  // standard and their sums/tensor squares (regular has no continuous limit).
  MatrixXd continuous_matrix(double theta, bool flip = false) const;

  // Top-level direct-sum block partition as (offset, size) pairs; atoms are a
  // single block. This is the fiber-block partition norm nonlinearities act on.
  std::vector<std::pair<int, int>> blocks() const;

  std::string describe() const;
  static Representation parse(const std::string& desc, const FiberGroup& g);

  bool operator==(const Representation& o) const;

 private:
  Representation(RepKind kind, FiberGroup g, int dim, std::vector<Representation> parts)
      : kind_(kind), group_(std::move(g)), dim_(dim), parts_(std::move(parts)) {}

  RepKind kind_;
  FiberGroup group_;
  int dim_;
  std::vector<Representation> parts_;
};

// Kernel samples on an odd k x k tap grid. Tap index t = ty*k + tx maps to the
// offset (tx - m, ty - m), m = (k-1)/2, in cell units. Each entry is the
// d_out x d_in kernel matrix at that tap.
struct KernelStack {
  int taps_per_axis = 0;
  std::vector<MatrixXd> taps;

  int tap_count() const { return taps_per_axis * taps_per_axis; }
  Vector2d offset_of(int t) const {
    int m = (taps_per_axis - 1) / 2;
    return Vector2d(t % taps_per_axis - m, t / taps_per_axis - m);
  }
};

// Group average (1/|H|) sum_h rho_out(h)^-1 kappa(h x) rho_in(h). Off-tap pulls
// under h use bilinear interpolation over the tap grid, zero outside; for
// N in {1, 2, 4} every pull lands on a tap and the projection is exact.
// adjoint=true applies the transpose of the same linear map (used by reverse-
// mode differentiation through the projection).
KernelStack project_group_average(const Representation& rep_in, const Representation& rep_out,
                                  const KernelStack& raw, bool adjoint = false);

// Max over taps and h of ||kappa(h x) - rho_out(h) kappa(x) rho_in(h)^-1||_inf,
// evaluating kappa(h x) by the same tap resampling the projection uses.
double kernel_constraint_residual(const Representation& rep_in, const Representation& rep_out,
                                  const KernelStack& stack);

}  // namespace stochfield
