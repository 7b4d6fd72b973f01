#include "stochfield/field.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace stochfield {

void GridGeometry::validate() const {
  if (!(half_width > 0.0)) throw ConfigError("grid half_width must be positive");
  if (resolution < 2) throw ConfigError("grid resolution must be >= 2");
  if (!offset.allFinite()) throw ConfigError("grid offset must be finite");
}

void FeatureField::validate() const {
  geometry.validate();
  if (values.rows() != geometry.num_points())
    throw ConfigError("field values rows do not match grid point count");
  if (values.cols() != rep.dimension())
    throw ConfigError("field channel count does not match representation dimension");
  if (!values.allFinite()) throw NumericalError("field values must be finite");
}

void ContextSet::validate() const {
  if (static_cast<int>(points.size()) != values.rows())
    throw DataError("context set has " + std::to_string(points.size()) + " points but " +
                    std::to_string(values.rows()) + " value rows");
  if (values.cols() != rep.dimension())
    throw DataError("context value dimension does not match representation");
  for (size_t i = 0; i < points.size(); ++i)
    for (size_t j = i + 1; j < points.size(); ++j)
      if (points[i] == points[j])
        throw DataError("context set violates multiplicity 1: duplicate point at rows " +
                        std::to_string(i) + " and " + std::to_string(j));
}

namespace {

// Fractional grid index with snapping, so that points that are nodes up to
// rounding are read exactly (identity and quarter-turn transforms stay exact).
bool grid_coords(const GridGeometry& g, const Vector2d& x, double& u, double& v) {
  const double step = g.spacing();
  u = (x.x() - (g.offset.x() - g.half_width)) / step;
  v = (x.y() - (g.offset.y() - g.half_width)) / step;
  if (std::abs(u - std::round(u)) < 1e-9) u = std::round(u);
  if (std::abs(v - std::round(v)) < 1e-9) v = std::round(v);
  const double hi = g.resolution - 1;
  return u >= 0.0 && u <= hi && v >= 0.0 && v <= hi;
}

VectorXd bilinear(const FeatureField& f, double u, double v) {
  const int res = f.geometry.resolution;
  int iu = std::min(static_cast<int>(std::floor(u)), res - 2);
  int iv = std::min(static_cast<int>(std::floor(v)), res - 2);
  double fu = u - iu, fv = v - iv;
  if (fu == 0.0 && fv == 0.0) return f.values.row(iv * res + iu);
  return (1 - fu) * (1 - fv) * f.values.row(iv * res + iu).transpose() +
         fu * (1 - fv) * f.values.row(iv * res + iu + 1).transpose() +
         (1 - fu) * fv * f.values.row((iv + 1) * res + iu).transpose() +
         fu * fv * f.values.row((iv + 1) * res + iu + 1).transpose();
}

}  // namespace

std::optional<VectorXd> try_eval_field(const FeatureField& f, const Vector2d& x) {
  double u, v;
  if (!grid_coords(f.geometry, x, u, v)) return std::nullopt;
  return bilinear(f, u, v);
}

VectorXd eval_field(const FeatureField& f, const Vector2d& x) {
  auto y = try_eval_field(f, x);
  if (!y)
    throw NumericalError("eval_field: point (" + std::to_string(x.x()) + ", " + std::to_string(x.y()) +
                         ") lies outside the grid extent");
  return *y;
}

FeatureField transform_field(const FeatureField& f, const Isometry& g, double* fill_fraction) {
  const FiberGroup& group = f.rep.group();
  Matrix2d hinv = group.element_matrix(group.inverse(g.h));
  MatrixXd rho = f.rep.matrix(g.h);

  FeatureField out;
  out.geometry = f.geometry;
  out.rep = f.rep;
  out.values.resize(f.values.rows(), f.values.cols());
  int filled = 0;
  const int res = f.geometry.resolution;
  for (int p = 0; p < f.geometry.num_points(); ++p) {
    Vector2d pre = hinv * (f.geometry.point(p) - g.translation);
    auto pulled = try_eval_field(f, pre);
    if (pulled) {
      out.values.row(p) = (rho * *pulled).transpose();
    } else {
      out.values.row(p).setZero();
      ++filled;
    }
  }
  (void)res;
  if (fill_fraction) *fill_fraction = static_cast<double>(filled) / f.geometry.num_points();
  return out;
}

ContextSet transform_context(const ContextSet& z, const Isometry& g) {
  const FiberGroup& group = z.rep.group();
  Matrix2d hm = group.element_matrix(g.h);
  MatrixXd rho = z.rep.matrix(g.h);
  ContextSet out;
  out.rep = z.rep;
  out.points.reserve(z.points.size());
  for (const Vector2d& x : z.points) out.points.push_back(hm * x + g.translation);
  out.values = z.values * rho.transpose();
  return out;
}

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void write_context_csv(const std::string& path, const ContextSet& z) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "x,y";
  for (int c = 0; c < z.channels(); ++c) out << ",v" << (c + 1);
  out << "\n";
  for (int i = 0; i < z.size(); ++i) {
    out << format_double(z.points[i].x()) << "," << format_double(z.points[i].y());
    for (int c = 0; c < z.channels(); ++c) out << "," << format_double(z.values(i, c));
    out << "\n";
  }
  if (!out) throw DataError("write failed for '" + path + "'");
}

ContextSet read_context_csv(const std::string& path, const Representation& rep) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ":1: missing header");
  const int d = rep.dimension();
  {
    std::string expected = "x,y";
    for (int c = 0; c < d; ++c) expected += ",v" + std::to_string(c + 1);
    if (line != expected)
      throw DataError(path + ":1: bad header '" + line + "' (expected '" + expected + "')");
  }
  ContextSet z;
  z.rep = rep;
  std::vector<std::array<double, 2>> pts;
  std::vector<VectorXd> vals;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const char* p = line.c_str();
    VectorXd row(2 + d);
    for (int c = 0; c < 2 + d; ++c) {
      char* end = nullptr;
      row(c) = std::strtod(p, &end);
      if (end == p) throw DataError(path + ":" + std::to_string(lineno) + ": malformed number");
      p = end;
      if (c + 1 < 2 + d) {
        if (*p != ',') throw DataError(path + ":" + std::to_string(lineno) + ": expected ','");
        ++p;
      }
    }
    if (*p != '\0' && *p != '\r')
      throw DataError(path + ":" + std::to_string(lineno) + ": trailing characters");
    pts.push_back({row(0), row(1)});
    vals.push_back(row.tail(d));
  }
  z.points.reserve(pts.size());
  z.values.resize(static_cast<int>(vals.size()), d);
  for (size_t i = 0; i < pts.size(); ++i) {
    z.points.emplace_back(pts[i][0], pts[i][1]);
    z.values.row(i) = vals[i];
  }
  z.validate();
  return z;
}

void write_field(const std::string& path, const FeatureField& f) {
  f.validate();
  nlohmann::json side = {
      {"half_width", f.geometry.half_width},
      {"resolution", f.geometry.resolution},
      {"offset", {f.geometry.offset.x(), f.geometry.offset.y()}},
      {"group", f.rep.group().name()},
      {"rep", f.rep.describe()},
      {"channels", f.channels()},
  };
  std::ofstream meta(path + ".json");
  if (!meta) throw DataError("cannot open '" + path + ".json' for writing");
  meta << side.dump(2) << "\n";

  std::ofstream bin(path, std::ios::binary);
  if (!bin) throw DataError("cannot open '" + path + "' for writing");
  static_assert(std::endian::native == std::endian::little, "field format is little-endian");
  for (int p = 0; p < f.values.rows(); ++p)
    for (int c = 0; c < f.values.cols(); ++c) {
      double v = f.values(p, c);
      bin.write(reinterpret_cast<const char*>(&v), sizeof(double));
    }
  if (!bin) throw DataError("write failed for '" + path + "'");
}

FeatureField read_field(const std::string& path, const FiberGroup& group) {
  std::ifstream meta(path + ".json");
  if (!meta) throw DataError("cannot open '" + path + ".json'");
  nlohmann::json side = nlohmann::json::parse(meta);
  FeatureField f{GridGeometry{side.at("half_width").get<double>(), side.at("resolution").get<int>(),
                              Vector2d(side.at("offset")[0].get<double>(), side.at("offset")[1].get<double>())},
                 MatrixXd(),
                 Representation::parse(side.at("rep").get<std::string>(),
                                       FiberGroup::parse(side.at("group").get<std::string>()))};
  if (!(f.rep.group() == group))
    throw ConfigError("field at '" + path + "' was written for group " + f.rep.group().name());
  const int n = f.geometry.num_points(), d = f.rep.dimension();
  f.values.resize(n, d);
  std::ifstream bin(path, std::ios::binary);
  if (!bin) throw DataError("cannot open '" + path + "'");
  for (int p = 0; p < n; ++p)
    for (int c = 0; c < d; ++c) {
      double v;
      bin.read(reinterpret_cast<char*>(&v), sizeof(double));
      if (!bin) throw DataError("field file '" + path + "' truncated");
      f.values(p, c) = v;
    }
  f.validate();
  return f;
}

}  // namespace stochfield
