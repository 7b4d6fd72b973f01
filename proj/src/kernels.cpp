#include "stochfield/kernels.hpp"

#include <cmath>

#include <json.hpp>

namespace stochfield {

MatrixKernel MatrixKernel::rbf_diagonal(int dim, double lengthscale, double variance) {
  if (dim < 1) throw ConfigError("rbf_diagonal dimension must be >= 1");
  if (!(lengthscale > 0.0) || !(variance > 0.0))
    throw ConfigError("kernel lengthscale and variance must be positive");
  return MatrixKernel(KernelKind::rbf_diagonal, dim, lengthscale, variance);
}

MatrixKernel MatrixKernel::curl_free(double lengthscale, double variance) {
  if (!(lengthscale > 0.0) || !(variance > 0.0))
    throw ConfigError("kernel lengthscale and variance must be positive");
  return MatrixKernel(KernelKind::curl_free, 2, lengthscale, variance);
}

MatrixKernel MatrixKernel::div_free(double lengthscale, double variance) {
  if (!(lengthscale > 0.0) || !(variance > 0.0))
    throw ConfigError("kernel lengthscale and variance must be positive");
  return MatrixKernel(KernelKind::div_free, 2, lengthscale, variance);
}

MatrixKernel MatrixKernel::direct_sum(std::vector<MatrixKernel> parts) {
  if (parts.empty()) throw ConfigError("direct_sum kernel needs at least one part");
  int dim = 0;
  for (const auto& p : parts) dim += p.dimension();
  MatrixKernel k(KernelKind::direct_sum, dim, parts.front().lengthscale(), 1.0);
  k.parts_ = std::move(parts);
  return k;
}

void MatrixKernel::set_shared_lengthscale(double l) {
  if (!(l > 0.0)) throw ConfigError("lengthscale must be positive");
  lengthscale_ = l;
  for (auto& p : parts_) p.set_shared_lengthscale(l);
}

MatrixXd MatrixKernel::eval(const Vector2d& x, const Vector2d& xp) const {
  const Vector2d tau = x - xp;
  const double r2 = tau.squaredNorm();
  const double l = lengthscale_, l2 = l * l;
  const double e = std::exp(-r2 / (2.0 * l2));
  switch (kind_) {
    case KernelKind::rbf_diagonal:
      return (variance_ * e) * MatrixXd::Identity(dim_, dim_);
    case KernelKind::curl_free:
      return (variance_ * e / l2) * (Matrix2d::Identity() - tau * tau.transpose() / l2);
    case KernelKind::div_free:
      return (variance_ * e / l2) *
             (tau * tau.transpose() / l2 + (1.0 - r2 / l2) * Matrix2d::Identity());
    case KernelKind::direct_sum: {
      MatrixXd out = MatrixXd::Zero(dim_, dim_);
      int off = 0;
      for (const auto& p : parts_) {
        out.block(off, off, p.dimension(), p.dimension()) = p.eval(x, xp);
        off += p.dimension();
      }
      return out;
    }
  }
  throw ConfigError("unreachable kernel kind");
}

MatrixXd MatrixKernel::eval_dl(const Vector2d& x, const Vector2d& xp) const {
  const Vector2d tau = x - xp;
  const double r2 = tau.squaredNorm();
  const double l = lengthscale_, l2 = l * l, l3 = l2 * l, l5 = l3 * l2, l7 = l5 * l2;
  const double e = std::exp(-r2 / (2.0 * l2));
  switch (kind_) {
    case KernelKind::rbf_diagonal:
      return (variance_ * e * r2 / l3) * MatrixXd::Identity(dim_, dim_);
    case KernelKind::curl_free:
      return variance_ * ((e * r2 / l5 - 2.0 * e / l3) * Matrix2d::Identity() -
                          (e * r2 / l7 - 4.0 * e / l5) * (tau * tau.transpose()));
    case KernelKind::div_free:
      return variance_ * e * ((r2 / l7 - 4.0 / l5) * (tau * tau.transpose()) +
                              (5.0 * r2 / l5 - r2 * r2 / l7 - 2.0 / l3) * Matrix2d::Identity());
    case KernelKind::direct_sum: {
      MatrixXd out = MatrixXd::Zero(dim_, dim_);
      int off = 0;
      for (const auto& p : parts_) {
        out.block(off, off, p.dimension(), p.dimension()) = p.eval_dl(x, xp);
        off += p.dimension();
      }
      return out;
    }
  }
  throw ConfigError("unreachable kernel kind");
}

MatrixXd MatrixKernel::gram(const std::vector<Vector2d>& points) const {
  const int n = static_cast<int>(points.size());
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (points[i] == points[j])
        throw DataError("gram: duplicate points at " + std::to_string(i) + " and " + std::to_string(j) +
                        " violate multiplicity 1");
  const int d = dim_;
  MatrixXd g(n * d, n * d);
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j) {
      MatrixXd block = eval(points[i], points[j]);
      g.block(i * d, j * d, d, d) = block;
      if (j != i) g.block(j * d, i * d, d, d) = block.transpose();
    }
  }
  return g;
}

MatrixKernel embedding_kernel(const MatrixKernel& k0, double scalar_lengthscale, double scalar_variance) {
  return MatrixKernel::direct_sum({MatrixKernel::rbf_diagonal(1, scalar_lengthscale, scalar_variance), k0});
}

namespace {

const char* kind_name(KernelKind k) {
  switch (k) {
    case KernelKind::rbf_diagonal: return "rbf_diagonal";
    case KernelKind::curl_free: return "curl_free";
    case KernelKind::div_free: return "div_free";
    case KernelKind::direct_sum: return "direct_sum";
  }
  return "?";
}

nlohmann::json to_json(const MatrixKernel& k) {
  nlohmann::json j = {{"kind", kind_name(k.kind())}};
  if (k.kind() == KernelKind::direct_sum) {
    j["parts"] = nlohmann::json::array();
    for (const auto& p : k.parts()) j["parts"].push_back(to_json(p));
  } else {
    j["lengthscale"] = k.lengthscale();
    j["variance"] = k.variance();
    if (k.kind() == KernelKind::rbf_diagonal) j["dim"] = k.dimension();
  }
  return j;
}

MatrixKernel from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "direct_sum") {
    std::vector<MatrixKernel> parts;
    for (const auto& pj : j.at("parts")) parts.push_back(from_json(pj));
    return MatrixKernel::direct_sum(std::move(parts));
  }
  const double l = j.at("lengthscale").get<double>();
  const double v = j.value("variance", 1.0);
  if (kind == "rbf_diagonal") return MatrixKernel::rbf_diagonal(j.value("dim", 2), l, v);
  if (kind == "curl_free") return MatrixKernel::curl_free(l, v);
  if (kind == "div_free") return MatrixKernel::div_free(l, v);
  throw ConfigError("unknown kernel kind '" + kind + "'");
}

}  // namespace

std::string MatrixKernel::to_config() const { return to_json(*this).dump(); }

MatrixKernel MatrixKernel::from_config(const std::string& json_text) {
  return from_json(nlohmann::json::parse(json_text));
}

double check_angular_constraint(const std::function<MatrixXd(const Vector2d&, const Vector2d&)>& k,
                                const Representation& rep, int samples, uint64_t seed,
                                bool include_reflections) {
  Rng rng(seed);
  double worst = 0.0;
  for (int s = 0; s < samples; ++s) {
    Vector2d x(rng.uniform(-7.5, 7.5), rng.uniform(-7.5, 7.5));
    Vector2d xp(rng.uniform(-7.5, 7.5), rng.uniform(-7.5, 7.5));
    double theta = rng.uniform(0.0, 2.0 * M_PI);
    bool flip = include_reflections && rng.uniform() < 0.5;
    Matrix2d hm = rotation_matrix(theta, flip);
    MatrixXd rho = rep.continuous_matrix(theta, flip);
    MatrixXd lhs = k(hm * x, hm * xp);
    MatrixXd rhs = rho * k(x, xp) * rho.transpose();
    worst = std::max(worst, (lhs - rhs).cwiseAbs().maxCoeff());
  }
  return worst;
}

double check_angular_constraint(const MatrixKernel& k, const Representation& rep, int samples, uint64_t seed,
                                bool include_reflections) {
  if (rep.dimension() != k.dimension())
    throw ConfigError("angular constraint: representation dimension does not match kernel");
  return check_angular_constraint(
      [&k](const Vector2d& a, const Vector2d& b) { return k.eval(a, b); }, rep, samples, seed,
      include_reflections);
}

}  // namespace stochfield
