#include "stochfield/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "stochfield/encoder.hpp"

namespace stochfield {

void DatasetSpec::validate() const {
  if (!(noise >= 0.0)) throw ConfigError("dataset noise must be nonnegative");
  if (!(extent_half_width > 0.0)) throw ConfigError("dataset extent must be nonempty");
  if (grid_points_per_axis < 2) throw ConfigError("observation grid needs at least 2 points per axis");
  if (train_samples < 0 || val_samples < 0 || test_samples < 0)
    throw ConfigError("sample counts must be nonnegative");
  if (max_context < 1) throw ConfigError("max context must be >= 1");
  if (!(lengthscale > 0.0) || !(kernel_variance > 0.0))
    throw ConfigError("kernel parameters must be positive");
}

MatrixKernel DatasetSpec::kernel() const {
  switch (task) {
    case TaskKind::gp_rbf: return MatrixKernel::rbf_diagonal(2, lengthscale, kernel_variance);
    case TaskKind::gp_curl: return MatrixKernel::curl_free(lengthscale, kernel_variance);
    case TaskKind::gp_div: return MatrixKernel::div_free(lengthscale, kernel_variance);
    default: throw ConfigError("dataset task has no generating kernel");
  }
}

std::string DatasetSpec::task_name() const {
  switch (task) {
    case TaskKind::gp_rbf: return "gp_rbf";
    case TaskKind::gp_curl: return "gp_curl";
    case TaskKind::gp_div: return "gp_div";
    case TaskKind::scalar_inpaint: return "scalar_inpaint";
    case TaskKind::csv_ingest: return "csv_ingest";
  }
  return "?";
}

TaskKind DatasetSpec::parse_task(const std::string& name) {
  if (name == "gp_rbf") return TaskKind::gp_rbf;
  if (name == "gp_curl") return TaskKind::gp_curl;
  if (name == "gp_div") return TaskKind::gp_div;
  if (name == "scalar_inpaint") return TaskKind::scalar_inpaint;
  if (name == "csv_ingest") return TaskKind::csv_ingest;
  throw ConfigError("unknown task '" + name + "'");
}

const std::vector<ContextSet>& Dataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + name + "'");
}

namespace {

constexpr uint64_t kTagTrain = 1, kTagVal = 2, kTagTest = 3;

Representation dataset_rep(const DatasetSpec& spec) {
  FiberGroup c1(GroupKind::cyclic, 1);
  if (spec.task == TaskKind::scalar_inpaint) return Representation::trivial(c1);
  return Representation::standard(c1);
}

ContextSet gp_sample(const DatasetSpec& spec, const GPModel& model, uint64_t tag, int index) {
  Rng rng(derive_seed(spec.seed, {tag, static_cast<uint64_t>(index), 0}));
  const double theta = rng.uniform(0.0, 2.0 * M_PI);
  const double half_side = spec.extent_half_width / std::sqrt(2.0);
  const int np = spec.grid_points_per_axis;
  Matrix2d rot = rotation_matrix(theta);

  ContextSet z;
  z.rep = dataset_rep(spec);
  z.points.reserve(np * np);
  for (int iy = 0; iy < np; ++iy)
    for (int ix = 0; ix < np; ++ix) {
      Vector2d u(-half_side + ix * (2.0 * half_side / (np - 1)),
                 -half_side + iy * (2.0 * half_side / (np - 1)));
      z.points.push_back(rot * u);
    }

  z.values = sample_prior(model, z.points, derive_seed(spec.seed, {tag, static_cast<uint64_t>(index), 1}));
  for (int i = 0; i < z.values.rows(); ++i)
    for (int c = 0; c < z.values.cols(); ++c) z.values(i, c) += spec.noise * rng.normal();
  return z;
}

}  // namespace

Dataset generate_gp_dataset(const DatasetSpec& spec, int threads) {
  spec.validate();
  GPModel model{VectorXd::Zero(2), spec.kernel(), 0.0, Representation::standard(FiberGroup(GroupKind::cyclic, 1))};
  Dataset ds;
  ds.spec = spec;
  ds.rep = dataset_rep(spec);
  ds.rep_out_desc = "standard";
  ds.output_channel_offset = 0;

  auto fill = [&](std::vector<ContextSet>& out, int n, uint64_t tag) {
    out.resize(n);
    parallel_for(n, threads, [&](int i) { out[i] = gp_sample(spec, model, tag, i); });
  };
  fill(ds.train, spec.train_samples, kTagTrain);
  fill(ds.val, spec.val_samples, kTagVal);
  fill(ds.test, spec.test_samples, kTagTest);
  return ds;
}

// ---- glyphs --------------------------------------------------------------------

namespace {

// One exact quarter turn: (x, y) -> (y, -x). Repeated application keeps
// 90-degree glyph rotations bit-exact.
Vector2d quarter_pull(const Vector2d& v) { return Vector2d(v.y(), -v.x()); }

double primitive_value(const GlyphSpec::Primitive& prim, const Vector2d& pixel) {
  Vector2d local = pixel - prim.center;
  for (int k = 0; k < prim.quarter_turns; ++k) local = quarter_pull(local);
  local = rotation_matrix(-prim.angle) * local;

  const double edge = 0.7;
  if (prim.kind == 0) {  // bar (capsule)
    const double dx = std::max(std::abs(local.x()) - prim.length / 2.0, 0.0);
    const double dist = std::hypot(dx, local.y());
    return prim.intensity * std::clamp((prim.width - dist) / edge + 0.5, 0.0, 1.0);
  }
  // arc: ring segment of radius length/2 with an angular window centred on +x
  const double radius = prim.length / 2.0;
  const double rho = local.norm();
  const double phi = std::atan2(local.y(), local.x());
  if (std::abs(phi) > prim.arc_span / 2.0) return 0.0;
  return prim.intensity * std::clamp((prim.width - std::abs(rho - radius)) / edge + 0.5, 0.0, 1.0);
}

}  // namespace

GlyphSpec GlyphSpec::random(Rng& rng) {
  GlyphSpec g;
  const int count = 1 + rng.below(3);
  for (int i = 0; i < count; ++i) {
    Primitive p;
    p.kind = rng.below(2);
    p.center = Vector2d(rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0));
    p.quarter_turns = rng.below(4);
    p.angle = rng.uniform(0.0, M_PI / 2.0);
    p.length = rng.uniform(4.0, 10.0);
    p.width = rng.uniform(0.6, 1.4);
    p.arc_span = rng.uniform(M_PI / 2.0, 1.5 * M_PI);
    p.intensity = rng.uniform(0.5, 1.0);
    g.primitives.push_back(p);
  }
  return g;
}

GlyphSpec GlyphSpec::rotated90() const {
  GlyphSpec out = *this;
  for (auto& p : out.primitives) {
    p.center = Vector2d(-p.center.y(), p.center.x());
    p.quarter_turns = (p.quarter_turns + 1) % 4;
  }
  return out;
}

MatrixXd GlyphSpec::render(int res) const {
  MatrixXd img = MatrixXd::Zero(res * res, 1);
  const double c = (res - 1) / 2.0;
  for (int iy = 0; iy < res; ++iy)
    for (int ix = 0; ix < res; ++ix) {
      const Vector2d pixel(ix - c, iy - c);
      double v = 0.0;
      for (const auto& prim : primitives) v = std::max(v, primitive_value(prim, pixel));
      img(iy * res + ix, 0) = std::min(v, 1.0);
    }
  return img;
}

Dataset generate_scalar_inpaint_dataset(const DatasetSpec& spec, int threads) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  ds.rep = dataset_rep(spec);
  ds.rep_out_desc = "trivial";
  ds.output_channel_offset = 0;

  const int res = spec.image_resolution;
  const double c = (res - 1) / 2.0;
  std::vector<Vector2d> pixels;
  pixels.reserve(res * res);
  for (int iy = 0; iy < res; ++iy)
    for (int ix = 0; ix < res; ++ix) pixels.emplace_back(ix - c, iy - c);

  auto make = [&](uint64_t tag, int index) {
    Rng rng(derive_seed(spec.seed, {tag, static_cast<uint64_t>(index)}));
    ContextSet z;
    z.rep = ds.rep;
    z.points = pixels;
    if (rng.uniform() < 0.10) {  // blank images keep empty canvas in-distribution
      z.values = MatrixXd::Zero(res * res, 1);
    } else {
      z.values = GlyphSpec::random(rng).render(res);
    }
    return z;
  };
  auto fill = [&](std::vector<ContextSet>& out, int n, uint64_t tag) {
    out.resize(n);
    parallel_for(n, threads, [&](int i) { out[i] = make(tag, i); });
  };
  fill(ds.train, spec.train_samples, kTagTrain);
  fill(ds.val, spec.val_samples, kTagVal);
  fill(ds.test, spec.test_samples, kTagTest);
  return ds;
}

// ---- dataset io -----------------------------------------------------------------

namespace {

void write_split(const std::string& dir, const std::vector<ContextSet>& samples) {
  std::filesystem::create_directories(dir);
  for (size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%05zu.csv", i);
    write_context_csv(dir + "/" + name, samples[i]);
  }
}

std::vector<ContextSet> read_split(const std::string& dir, int n, const Representation& rep) {
  std::vector<ContextSet> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%05d.csv", i);
    out.push_back(read_context_csv(dir + "/" + name, rep));
  }
  return out;
}

}  // namespace

void write_dataset(const std::string& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = {
      {"version", 1},
      {"task", ds.spec.task_name()},
      {"noise", ds.spec.noise},
      {"extent_half_width", ds.spec.extent_half_width},
      {"grid_points_per_axis", ds.spec.grid_points_per_axis},
      {"image_resolution", ds.spec.image_resolution},
      {"max_context", ds.spec.max_context},
      {"seed", ds.spec.seed},
      {"splits",
       {{"train", static_cast<int>(ds.train.size())},
        {"val", static_cast<int>(ds.val.size())},
        {"test", static_cast<int>(ds.test.size())}}},
      {"rep_out", ds.rep_out_desc},
      {"output_channel_offset", ds.output_channel_offset},
  };
  if (ds.gp_task()) {
    manifest["kernel"] = nlohmann::json::parse(ds.spec.kernel().to_config());
    manifest["lengthscale"] = ds.spec.lengthscale;
    manifest["kernel_variance"] = ds.spec.kernel_variance;
  }
  std::ofstream out(dir + "/manifest.json");
  if (!out) throw DataError("cannot write dataset manifest in '" + dir + "'");
  out << manifest.dump(2) << "\n";
  write_split(dir + "/train", ds.train);
  write_split(dir + "/val", ds.val);
  write_split(dir + "/test", ds.test);
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw DataError("cannot open dataset manifest in '" + dir + "'");
  nlohmann::json manifest = nlohmann::json::parse(in);
  Dataset ds;
  ds.spec.task = DatasetSpec::parse_task(manifest.at("task").get<std::string>());
  ds.spec.noise = manifest.at("noise").get<double>();
  ds.spec.extent_half_width = manifest.at("extent_half_width").get<double>();
  ds.spec.grid_points_per_axis = manifest.at("grid_points_per_axis").get<int>();
  ds.spec.image_resolution = manifest.at("image_resolution").get<int>();
  ds.spec.max_context = manifest.at("max_context").get<int>();
  ds.spec.seed = manifest.at("seed").get<uint64_t>();
  if (manifest.contains("lengthscale")) ds.spec.lengthscale = manifest.at("lengthscale").get<double>();
  if (manifest.contains("kernel_variance"))
    ds.spec.kernel_variance = manifest.at("kernel_variance").get<double>();
  ds.rep = dataset_rep(ds.spec);
  ds.rep_out_desc = manifest.at("rep_out").get<std::string>();
  ds.output_channel_offset = manifest.at("output_channel_offset").get<int>();
  ds.train = read_split(dir + "/train", manifest.at("splits").at("train").get<int>(), ds.rep);
  ds.val = read_split(dir + "/val", manifest.at("splits").at("val").get<int>(), ds.rep);
  ds.test = read_split(dir + "/test", manifest.at("splits").at("test").get<int>(), ds.rep);
  return ds;
}

Dataset ingest_csv(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw DataError("cannot open ingestion manifest in '" + dir + "'");
  nlohmann::json manifest = nlohmann::json::parse(in);

  FiberGroup c1(GroupKind::cyclic, 1);
  std::vector<Representation> parts;
  for (const auto& ch : manifest.at("channels")) {
    const std::string name = ch.get<std::string>();
    if (name == "trivial") parts.push_back(Representation::trivial(c1));
    else if (name == "standard") parts.push_back(Representation::standard(c1));
    else throw ConfigError("ingest: unsupported channel representation '" + name + "'");
  }
  if (parts.empty()) throw ConfigError("ingest: manifest names no channels");

  std::vector<int> blocks = manifest.at("output_blocks").get<std::vector<int>>();
  if (blocks.empty()) throw ConfigError("ingest: output_blocks must not be empty");
  std::sort(blocks.begin(), blocks.end());
  for (size_t i = 0; i + 1 < blocks.size(); ++i)
    if (blocks[i + 1] != blocks[i] + 1)
      throw ConfigError("ingest: output_blocks must be contiguous");
  if (blocks.front() < 0 || blocks.back() >= static_cast<int>(parts.size()))
    throw ConfigError("ingest: output_blocks out of range");

  Dataset ds;
  ds.spec.task = TaskKind::csv_ingest;
  ds.spec.max_context = manifest.value("max_context", 50);
  ds.spec.seed = manifest.value("seed", 0ull);
  ds.rep = parts.size() == 1 ? parts[0] : Representation::direct_sum(parts);

  int offset = 0;
  for (int b = 0; b < blocks.front(); ++b) offset += parts[b].dimension();
  ds.output_channel_offset = offset;
  std::vector<Representation> out_parts;
  for (int b : blocks) out_parts.push_back(parts[b]);
  ds.rep_out_desc =
      (out_parts.size() == 1 ? out_parts[0] : Representation::direct_sum(out_parts)).describe();

  auto names_of = [&](const std::string& split) {
    std::vector<std::string> names;
    const std::string sub = dir + "/" + split;
    if (!std::filesystem::exists(sub)) return names;
    for (const auto& e : std::filesystem::directory_iterator(sub))
      if (e.path().extension() == ".csv") names.push_back(e.path().string());
    std::sort(names.begin(), names.end());
    return names;
  };
  for (const std::string& f : names_of("train")) ds.train.push_back(read_context_csv(f, ds.rep));
  for (const std::string& f : names_of("val")) ds.val.push_back(read_context_csv(f, ds.rep));
  for (const std::string& f : names_of("test")) ds.test.push_back(read_context_csv(f, ds.rep));
  if (ds.train.empty() && ds.val.empty() && ds.test.empty())
    throw DataError("ingest: no CSV samples found under '" + dir + "'");
  return ds;
}

// ---- audits --------------------------------------------------------------------

bool AuditReport::passed() const {
  for (const auto& c : checks)
    if (!c.pass) return false;
  return true;
}

std::string AuditReport::to_json() const {
  nlohmann::json j;
  j["checks"] = nlohmann::json::array();
  for (const auto& c : checks)
    j["checks"].push_back({{"name", c.name},
                           {"group_sample", c.group_sample},
                           {"samples", c.samples},
                           {"max_residual", c.max_residual},
                           {"mean_residual", c.mean_residual},
                           {"tolerance", c.tolerance},
                           {"expect", c.expect_below ? "below" : "above"},
                           {"pass", c.pass}});
  j["passed"] = passed();
  return j.dump(2);
}

namespace {

AuditCheck make_check(std::string name, std::string group_sample, int samples, double max_resid,
                      double mean_resid, double tol, bool expect_below = true) {
  AuditCheck c{std::move(name), std::move(group_sample), samples, max_resid, mean_resid, tol,
               expect_below, false};
  c.pass = expect_below ? (max_resid < tol) : (max_resid > tol);
  return c;
}

}  // namespace

AuditReport audit_kernels(uint64_t seed) {
  AuditReport report;
  FiberGroup c1(GroupKind::cyclic, 1);
  Representation std2 = Representation::standard(c1);
  const int n = 1000;
  struct Entry {
    const char* name;
    MatrixKernel k;
  };
  const Entry entries[] = {{"rbf_diagonal", MatrixKernel::rbf_diagonal(2, 5.0)},
                           {"curl_free", MatrixKernel::curl_free(5.0)},
                           {"div_free", MatrixKernel::div_free(5.0)}};
  for (const auto& e : entries) {
    double resid = check_angular_constraint(e.k, std2, n, derive_seed(seed, {1}), true);
    report.checks.push_back(make_check(std::string("kernel_angular_constraint/") + e.name,
                                       "theta~U[0,2pi), reflections", n, resid, resid, 1e-10));
  }
  // Embedding block kernel under rho_E.
  Representation rho_e = Representation::direct_sum({Representation::trivial(c1), std2});
  double resid = check_angular_constraint(embedding_kernel(MatrixKernel::rbf_diagonal(2, 5.0), 5.0), rho_e,
                                          n, derive_seed(seed, {2}), true);
  report.checks.push_back(
      make_check("kernel_angular_constraint/embedding", "theta~U[0,2pi), reflections", n, resid, resid, 1e-10));

  // Anisotropic control locked to the x-axis must fail visibly.
  auto broken = [](const Vector2d& a, const Vector2d& b) -> MatrixXd {
    Vector2d tau = a - b;
    Matrix2d axis;
    axis << 1, 0, 0, 0;
    return std::exp(-tau.squaredNorm() / 50.0) * (Matrix2d::Identity() + axis);
  };
  double broken_resid = check_angular_constraint(broken, std2, n, derive_seed(seed, {3}), false);
  report.checks.push_back(make_check("kernel_angular_constraint/broken_control",
                                     "theta~U[0,2pi)", n, broken_resid, broken_resid, 1e-2, false));
  return report;
}

namespace {

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

AuditReport audit_gp(uint64_t seed) {
  AuditReport report;
  struct Entry {
    const char* name;
    MatrixKernel k;
  };
  const Entry entries[] = {{"rbf_diagonal", MatrixKernel::rbf_diagonal(2, 5.0)},
                           {"curl_free", MatrixKernel::curl_free(5.0)},
                           {"div_free", MatrixKernel::div_free(5.0)}};

  std::vector<std::pair<std::string, FiberGroup>> groups = {
      {"C8", FiberGroup(GroupKind::cyclic, 8)}, {"D4", FiberGroup(GroupKind::dihedral, 4)}};

  for (const auto& e : entries) {
    double worst = 0.0, sum = 0.0;
    int count = 0;
    Rng rng(derive_seed(seed, {4}));
    for (const auto& [gname, group] : groups) {
      Representation rep = Representation::standard(group);
      GPModel model{VectorXd::Zero(2), e.k, 0.05 * 0.05, rep};
      for (int trial = 0; trial < 25; ++trial) {
        ContextSet z = random_context(rng, rep, 3 + rng.below(18), 8.0);
        std::vector<Vector2d> targets;
        for (int t = 0; t < 5; ++t) targets.emplace_back(rng.uniform(-8.0, 8.0), rng.uniform(-8.0, 8.0));
        Isometry g{Vector2d(rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)),
                   group.element(rng.below(group.size()))};
        MatrixXd rho = rep.matrix(g.h);

        PointPrediction base = posterior_at(model, z, targets);
        std::vector<Vector2d> gtargets;
        Matrix2d hm = group.element_matrix(g.h);
        for (const auto& t : targets) gtargets.push_back(hm * t + g.translation);
        PointPrediction moved = posterior_at(model, transform_context(z, g), gtargets);

        for (size_t t = 0; t < targets.size(); ++t) {
          double dm = (moved.means.row(t).transpose() - rho * base.means.row(t).transpose())
                          .cwiseAbs()
                          .maxCoeff();
          double dc = (moved.covs[t] - rho * base.covs[t] * rho.transpose()).cwiseAbs().maxCoeff();
          double r = std::max(dm, dc);
          worst = std::max(worst, r);
          sum += r;
          ++count;
        }
      }
    }
    report.checks.push_back(make_check(std::string("gp_posterior_equivariance/") + e.name,
                                       "h in C8 u D4, random translations", count, worst, sum / count,
                                       1e-8));
  }
  return report;
}

namespace {

// Elements of the model's fiber group whose action maps a centered square grid
// onto itself (quarter-turn rotations, plus reflections for dihedral groups).
std::vector<GroupElement> grid_exact_elements(const FiberGroup& g) {
  std::vector<GroupElement> out;
  for (const GroupElement& h : g.elements()) {
    if ((4 * h.rot) % g.rotation_order() == 0) out.push_back(h);
  }
  return out;
}

double field_residual(const FeatureField& a, const FeatureField& b) {
  return (a.values - b.values).cwiseAbs().maxCoeff();
}

std::pair<double, double> model_equivariance_residual(const SteerCNP& model, const ContextSet& z,
                                                      const Isometry& g) {
  GaussianPrediction base = model.predict_grid(z);
  GaussianPrediction moved = model.predict_grid(transform_context(z, g));
  double dm = field_residual(moved.mean_field, transform_field(base.mean_field, g));
  double dc = field_residual(moved.cov_field, transform_field(base.cov_field, g));
  return {dm, dc};
}

}  // namespace

AuditReport audit_model(const SteerCNP& model, uint64_t seed) {
  AuditReport report;
  const FiberGroup& group = model.group();
  Representation rep_in = model.rep_in();
  Rng rng(derive_seed(seed, {5}));

  // Encoder equivariance under quarter turns.
  {
    EncoderConfig enc = model.encoder_config();
    double worst = 0.0, sum = 0.0;
    int count = 0;
    auto elements = grid_exact_elements(group);
    for (int trial = 0; trial < 10; ++trial) {
      ContextSet z = random_context(rng, rep_in, 3 + rng.below(10),
                                    0.5 * model.config().grid.half_width);
      for (const GroupElement& h : elements) {
        double r = check_encoder_equivariance(z, Isometry{Vector2d::Zero(), h}, enc);
        worst = std::max(worst, r);
        sum += r;
        ++count;
      }
    }
    report.checks.push_back(
        make_check("encoder_equivariance", "quarter turns of " + group.name(), count, worst,
                   sum / count, 1e-10));
  }

  // End-to-end mean/covariance equivariance on the grid.
  auto run_model_check = [&](const SteerCNP& m, const std::string& name, double tol, bool expect_below) {
    double worst_m = 0.0, worst_c = 0.0, sum = 0.0;
    int count = 0;
    Rng local(derive_seed(seed, {6}));
    auto elements = grid_exact_elements(group);
    for (int trial = 0; trial < 4; ++trial) {
      ContextSet z = random_context(local, rep_in, 3 + local.below(10),
                                    0.5 * m.config().grid.half_width);
      for (const GroupElement& h : elements) {
        auto [dm, dc] = model_equivariance_residual(m, z, Isometry{Vector2d::Zero(), h});
        worst_m = std::max(worst_m, dm);
        worst_c = std::max(worst_c, dc);
        sum += std::max(dm, dc);
        ++count;
      }
    }
    report.checks.push_back(make_check(name + "/mean", "quarter turns of " + group.name(), count,
                                       worst_m, sum / count, tol, expect_below));
    report.checks.push_back(make_check(name + "/covariance", "quarter turns of " + group.name(), count,
                                       worst_c, sum / count, tol, expect_below));
  };

  run_model_check(model, "model_equivariance", 1e-6, true);

  SteerCNP control = model;
  control.set_projection_enabled(false);
  run_model_check(control, "model_equivariance_unprojected_control", 1e-2, false);

  return report;
}

// ---- evaluation ----------------------------------------------------------------

GPModel oracle_model(const Dataset& ds) {
  if (!ds.gp_task()) throw ConfigError("dataset has no GP oracle");
  return GPModel{VectorXd::Zero(2), ds.spec.kernel(), ds.spec.noise * ds.spec.noise, ds.rep};
}

namespace {

struct SampleScores {
  double model_ll = 0.0;
  double oracle_ll = 0.0;
};

EvalResult aggregate(const std::vector<double>& model_ll, const std::vector<double>* oracle_ll) {
  EvalResult res;
  res.samples = static_cast<int>(model_ll.size());
  double mean = 0.0;
  for (double v : model_ll) mean += v;
  mean /= res.samples;
  double var = 0.0;
  for (double v : model_ll) var += (v - mean) * (v - mean);
  res.mean_ll = mean;
  res.std_ll = res.samples > 1 ? std::sqrt(var / (res.samples - 1)) : 0.0;
  if (oracle_ll) {
    double om = 0.0;
    for (double v : *oracle_ll) om += v;
    om /= oracle_ll->size();
    double ov = 0.0;
    for (double v : *oracle_ll) ov += (v - om) * (v - om);
    res.oracle_mean_ll = om;
    res.oracle_std_ll = oracle_ll->size() > 1 ? std::sqrt(ov / (oracle_ll->size() - 1)) : 0.0;
  }
  return res;
}

}  // namespace

EvalResult evaluate(const SteerCNP& model, const Dataset& ds, const std::string& split, uint64_t seed,
                    int threads) {
  const auto& samples = ds.split(split);
  if (samples.empty()) throw ConfigError("evaluate: split '" + split + "' is empty");
  const bool with_oracle = ds.gp_task();
  std::optional<GPModel> oracle;
  if (with_oracle) oracle = oracle_model(ds);

  std::vector<double> model_ll(samples.size());
  std::vector<double> oracle_ll(with_oracle ? samples.size() : 0);
  parallel_for(static_cast<int>(samples.size()), threads, [&](int i) {
    Rng rng(derive_seed(seed, {0xE7A1ull, static_cast<uint64_t>(i)}));
    Split s = split_context_target(samples[i], rng, ds.spec.max_context, /*training_mode=*/false);
    MatrixXd y = s.target_values.middleCols(model.config().output_channel_offset,
                                            model.rep_out().dimension());
    model_ll[i] = -model.loss(s.context, s.target_points, y);
    if (with_oracle) {
      PointPrediction pred = posterior_at(*oracle, s.context, s.target_points, /*include_noise=*/true);
      oracle_ll[i] = log_likelihood(pred, s.target_values);
    }
  });
  return aggregate(model_ll, with_oracle ? &oracle_ll : nullptr);
}

EvalResult evaluate_oracle(const Dataset& ds, const std::string& split, uint64_t seed, int threads,
                           const MatrixKernel* kernel_override) {
  const auto& samples = ds.split(split);
  if (samples.empty()) throw ConfigError("evaluate: split '" + split + "' is empty");
  GPModel oracle = oracle_model(ds);
  if (kernel_override) oracle.kernel = *kernel_override;

  std::vector<double> lls(samples.size());
  parallel_for(static_cast<int>(samples.size()), threads, [&](int i) {
    Rng rng(derive_seed(seed, {0xE7A1ull, static_cast<uint64_t>(i)}));
    Split s = split_context_target(samples[i], rng, ds.spec.max_context, /*training_mode=*/false);
    PointPrediction pred = posterior_at(oracle, s.context, s.target_points, /*include_noise=*/true);
    lls[i] = log_likelihood(pred, s.target_values);
  });
  return aggregate(lls, nullptr);
}

}  // namespace stochfield
