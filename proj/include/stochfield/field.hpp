#pragma once

#include <optional>
#include <string>
#include <vector>

#include "stochfield/common.hpp"
#include "stochfield/group.hpp"

namespace stochfield {

// Axis-aligned square grid centered on `offset`, spanning
// [-half_width, half_width]^2 around it. Row-major values: point index
// p = iy*resolution + ix, with x increasing along ix and y along iy.
struct GridGeometry {
  double half_width = 1.0;
  int resolution = 2;
  Vector2d offset = Vector2d::Zero();

  double spacing() const { return 2.0 * half_width / (resolution - 1); }
  int num_points() const { return resolution * resolution; }
  Vector2d point(int iy, int ix) const {
    return offset + Vector2d(-half_width + ix * spacing(), -half_width + iy * spacing());
  }
  Vector2d point(int p) const { return point(p / resolution, p % resolution); }
  void validate() const;
  bool operator==(const GridGeometry& o) const {
    return half_width == o.half_width && resolution == o.resolution && offset == o.offset;
  }
};

// Grid-sampled map R^2 -> R^d together with its fiber representation.
struct FeatureField {
  GridGeometry geometry;
  MatrixXd values;  // (resolution^2) x d
  Representation rep;

  int channels() const { return static_cast<int>(values.cols()); }
  void validate() const;
};

// Finite observation set {(x_i, y_i)} with multiplicity 1.
struct ContextSet {
  std::vector<Vector2d> points;
  MatrixXd values;  // n x d
  Representation rep;

  int size() const { return static_cast<int>(points.size()); }
  int channels() const { return static_cast<int>(values.cols()); }
  void validate() const;
};

// Group transformation g = t h acting on fields and context sets.
struct Isometry {
  Vector2d translation = Vector2d::Zero();
  GroupElement h;
};

// Bilinear interpolation of grid values; throws outside the extent.
VectorXd eval_field(const FeatureField& f, const Vector2d& x);

// As eval_field but returns nullopt outside the extent instead of throwing.
std::optional<VectorXd> try_eval_field(const FeatureField& f, const Vector2d& x);

// (g.F)(x) = rho(h) F(g^-1 x) resampled onto F's own grid. Pulls from outside
// the extent are zero-filled; fill_fraction (if given) reports their share.
FeatureField transform_field(const FeatureField& f, const Isometry& g, double* fill_fraction = nullptr);

// g.Z = {(g x_i, rho(h) y_i)}; exact, no interpolation.
ContextSet transform_context(const ContextSet& z, const Isometry& g);

// CSV format: header "x,y,v1,...,vd", one row per point, '.' decimal separator.
// Doubles are written with enough digits to round-trip bit-exactly.
void write_context_csv(const std::string& path, const ContextSet& z);
ContextSet read_context_csv(const std::string& path, const Representation& rep);

// Binary format: little-endian f64, row-major (point-major, channel-minor),
// plus a JSON sidecar <path>.json holding geometry and representation.
void write_field(const std::string& path, const FeatureField& f);
FeatureField read_field(const std::string& path, const FiberGroup& group);

}  // namespace stochfield
