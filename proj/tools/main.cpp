#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "stochfield/encoder.hpp"
#include "stochfield/gp.hpp"
#include "stochfield/harness.hpp"
#include "stochfield/steer_net.hpp"
#include "stochfield/train.hpp"

using namespace stochfield;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitAuditFailure = 4;

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config parse error in '" + path + "': " + e.what());
  }
}

DatasetSpec task_spec(const json& cfg, uint64_t seed) {
  if (!cfg.contains("task")) throw ConfigError("config needs a \"task\" section");
  const json& t = cfg.at("task");
  DatasetSpec spec;
  spec.task = DatasetSpec::parse_task(t.at("name").get<std::string>());
  spec.lengthscale = t.value("lengthscale", 5.0);
  spec.kernel_variance = t.value("variance", 1.0);
  spec.noise = t.value("noise", 0.05);
  spec.extent_half_width = t.value("extent", 10.0);
  spec.grid_points_per_axis = t.value("grid_points", 15);
  spec.image_resolution = t.value("image_resolution", 16);
  spec.train_samples = t.value("train_samples", 100);
  spec.val_samples = t.value("val_samples", 20);
  spec.test_samples = t.value("test_samples", 20);
  spec.max_context = t.value("max_context", 50);
  spec.seed = seed;
  spec.validate();
  return spec;
}

GridGeometry grid_from_json(const json& g) {
  GridGeometry grid{g.at("half_width").get<double>(), g.at("resolution").get<int>()};
  if (g.contains("offset"))
    grid.offset = Vector2d(g.at("offset")[0].get<double>(), g.at("offset")[1].get<double>());
  grid.validate();
  return grid;
}

double dataset_extent(const Dataset& ds) {
  if (ds.spec.task == TaskKind::scalar_inpaint) return (ds.spec.image_resolution - 1) / 2.0;
  if (ds.spec.task == TaskKind::csv_ingest) {
    double m = 1.0;
    for (const auto* split : {&ds.train, &ds.val, &ds.test})
      for (const auto& z : *split)
        for (const auto& p : z.points) m = std::max({m, std::abs(p.x()), std::abs(p.y())});
    return m;
  }
  return ds.spec.extent_half_width;
}

SteerCNPConfig model_config(const json& cfg, const Dataset& ds, uint64_t seed) {
  const json m = cfg.value("model", json::object());
  SteerCNPConfig mc;
  mc.group = m.value("group", "C4");

  // The input representation follows the dataset channels unless overridden.
  mc.rep_in = m.value("rep_in", ds.rep.describe());
  mc.rep_out = m.value("rep_out", ds.rep_out_desc == ds.rep.describe() ? "" : ds.rep_out_desc);
  mc.output_channel_offset = m.value("output_channel_offset", ds.output_channel_offset);
  mc.n_layers = m.value("n_layers", 5);
  mc.kernel_size = m.value("kernel_size", 5);
  mc.hidden_copies = m.value("hidden_copies", 8);
  const std::string head =
      m.value("head", ds.spec.task == TaskKind::scalar_inpaint ? "softplus_scalar" : "quadratic");
  mc.head = head == "softplus_scalar" ? HeadKind::softplus_scalar : HeadKind::quadratic;
  mc.cov_eps = m.value("cov_eps", 1e-4);
  mc.min_variance = m.value("min_variance", 0.01);
  if (m.contains("grid")) {
    mc.grid = grid_from_json(m.at("grid"));
  } else {
    mc.grid = default_embedding_grid(dataset_extent(ds), m.value("grid_resolution", 32));
  }
  mc.embedding_kernel_kind = m.value("embedding_kernel", "rbf_diagonal");
  mc.init_embed_lengthscale = m.value("embed_lengthscale", 1.0);
  mc.init_smooth_lengthscale = m.value("smooth_lengthscale", 0.7);
  mc.init_seed = derive_seed(seed, {0x1417ull});
  return mc;
}

TrainConfig train_config(const json& cfg, const Dataset& ds, uint64_t seed) {
  const json t = cfg.value("train", json::object());
  TrainConfig tc;
  tc.learning_rate = t.value("learning_rate", 1e-3);
  tc.batch_size = t.value("batch_size", 4);
  tc.epochs = t.value("epochs", 20);
  tc.min_context = t.value("min_context", 3);
  tc.max_context = t.value("max_context", ds.spec.max_context);
  tc.seed = seed;
  tc.validate();
  return tc;
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << j.dump(2) << "\n";
}

Dataset load_any_dataset(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw DataError("cannot open dataset manifest in '" + dir + "'");
  json manifest = json::parse(in);
  if (manifest.value("task", "") == "csv_ingest" || manifest.contains("channels"))
    return ingest_csv(dir);
  return load_dataset(dir);
}

int cmd_generate(const json& cfg, const std::string& out_dir, uint64_t seed, int threads) {
  DatasetSpec spec = task_spec(cfg, seed);
  Dataset ds;
  if (spec.task == TaskKind::scalar_inpaint) {
    ds = generate_scalar_inpaint_dataset(spec, threads);
  } else if (spec.task == TaskKind::csv_ingest) {
    throw ConfigError(
        "csv_ingest datasets are ingested, not generated; point train/evaluate at the CSV directory");
  } else {
    ds = generate_gp_dataset(spec, threads);
  }
  write_dataset(out_dir, ds);
  std::cout << "wrote " << ds.train.size() << "/" << ds.val.size() << "/" << ds.test.size()
            << " train/val/test samples to " << out_dir << "\n";
  return kExitOk;
}

int cmd_train(const json& cfg, const std::string& data_dir, const std::string& out_dir, uint64_t seed,
              int threads) {
  Dataset ds = load_any_dataset(data_dir);
  if (ds.train.empty()) throw ConfigError("dataset has no train split");
  if (ds.val.empty()) throw ConfigError("dataset has no val split");
  SteerCNP model(model_config(cfg, ds, seed));
  TrainConfig tc = train_config(cfg, ds, seed);
  std::cout << "training SteerCNP(" << model.group().name() << "), " << model.params().scalar_count()
            << " raw parameters\n";
  FitReport report = fit(model, ds.train, ds.val, tc, out_dir, &std::cout, threads);
  std::cout << "best epoch " << report.best_epoch << " val_mean_ll " << report.best_val_mean_ll
            << "; checkpoints in " << out_dir << "/best and " << out_dir << "/last\n";
  return kExitOk;
}

int cmd_evaluate(const std::string& model_dir, const std::string& data_dir, const std::string& split,
                 const std::string& out_path, uint64_t seed, int threads) {
  Dataset ds = load_any_dataset(data_dir);
  SteerCNP model = SteerCNP::load(model_dir);
  EvalResult r = evaluate(model, ds, split, seed, threads);
  json metrics = {
      {"mean_ll", r.mean_ll}, {"std_ll", r.std_ll}, {"n_samples", r.samples},
      {"split", split},       {"seed", seed},       {"model", model.group().name()},
  };
  if (r.oracle_mean_ll) {
    metrics["oracle_mean_ll"] = *r.oracle_mean_ll;
    metrics["oracle_std_ll"] = *r.oracle_std_ll;
    metrics["gap_to_oracle"] = *r.oracle_mean_ll - r.mean_ll;
  }
  write_json(out_path, metrics);
  std::cout << metrics.dump(2) << "\n";
  return kExitOk;
}

int cmd_gp_oracle(const json& cfg, const std::string& context_path, const std::string& targets_path,
                  const std::string& out_dir) {
  if (!cfg.contains("kernel")) throw ConfigError("gp-oracle needs a \"kernel\" section in the config");
  MatrixKernel kernel = MatrixKernel::from_config(cfg.at("kernel").dump());
  const double noise = cfg.value("noise", 0.05);
  FiberGroup c1(GroupKind::cyclic, 1);
  Representation rep =
      kernel.dimension() == 2
          ? Representation::standard(c1)
          : Representation::direct_sum(
                std::vector<Representation>(kernel.dimension(), Representation::trivial(c1)));
  GPModel model{VectorXd::Zero(kernel.dimension()), kernel, noise * noise, rep};

  ContextSet z = read_context_csv(context_path, rep);
  GridGeometry grid =
      cfg.contains("oracle_grid") ? grid_from_json(cfg.at("oracle_grid")) : GridGeometry{10.0, 24};

  std::filesystem::create_directories(out_dir);
  GaussianPrediction pred = posterior(model, z, grid);
  write_field(out_dir + "/mean.bin", pred.mean_field);
  write_field(out_dir + "/cov.bin", pred.cov_field);

  // Mean predictive log-likelihood (noise included) on the target CSV, or on
  // the context itself when no targets are given.
  ContextSet targets = targets_path.empty() ? z : read_context_csv(targets_path, rep);
  PointPrediction at = posterior_at(model, z, targets.points, /*include_noise=*/true);
  json metrics = {{"mean_ll", log_likelihood(at, targets.values)},
                  {"n_targets", targets.size()},
                  {"kernel", json::parse(kernel.to_config())}};
  write_json(out_dir + "/metrics.json", metrics);
  std::cout << metrics.dump(2) << "\n";
  return kExitOk;
}

int cmd_audit(const std::string& model_dir, const std::string& out_path, uint64_t seed) {
  AuditReport all;
  AuditReport k = audit_kernels(seed);
  AuditReport g = audit_gp(seed);
  all.checks.insert(all.checks.end(), k.checks.begin(), k.checks.end());
  all.checks.insert(all.checks.end(), g.checks.begin(), g.checks.end());
  if (!model_dir.empty()) {
    SteerCNP model = SteerCNP::load(model_dir);
    AuditReport m = audit_model(model, seed);
    all.checks.insert(all.checks.end(), m.checks.begin(), m.checks.end());
  }
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    out << all.to_json() << "\n";
  }
  for (const auto& c : all.checks)
    std::cout << (c.pass ? "[pass] " : "[FAIL] ") << c.name << "  max_residual " << c.max_residual
              << (c.expect_below ? " < " : " > ") << c.tolerance << "  (" << c.group_sample << ", "
              << c.samples << " samples)\n";
  std::cout << (all.passed() ? "audit passed" : "audit FAILED") << "\n";
  return all.passed() ? kExitOk : kExitAuditFailure;
}

int cmd_inspect(const std::string& model_dir, const std::string& context_path, const std::string& out_dir) {
  SteerCNP model = SteerCNP::load(model_dir);
  ContextSet z = read_context_csv(context_path, model.rep_in());
  GaussianPrediction pred = model.predict_grid(z);
  std::filesystem::create_directories(out_dir);

  std::ofstream out(out_dir + "/prediction.csv");
  if (!out) throw DataError("cannot write prediction CSV");
  const int d = model.rep_out().dimension();
  out << "x,y";
  for (int c = 0; c < d; ++c) out << ",mean" << (c + 1);
  for (int c = 0; c < d; ++c)
    for (int r = 0; r < d; ++r) out << ",cov" << (r + 1) << (c + 1);
  out << "\n";
  char buf[32];
  auto emit = [&](double v, bool lead_comma) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    if (lead_comma) out << ",";
    out << buf;
  };
  for (int p = 0; p < pred.mean_field.geometry.num_points(); ++p) {
    Vector2d x = pred.mean_field.geometry.point(p);
    emit(x.x(), false);
    emit(x.y(), true);
    for (int c = 0; c < d; ++c) emit(pred.mean_field.values(p, c), true);
    for (int c = 0; c < d * d; ++c) emit(pred.cov_field.values(p, c), true);
    out << "\n";
  }
  write_context_csv(out_dir + "/context.csv", z);
  std::cout << "wrote " << out_dir << "/prediction.csv\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "stochfield: equivariant Gaussian processes and steerable conditional neural processes on R^2"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", data_dir, model_dir, split = "test";
  std::string context_path, targets_path, out_path;
  uint64_t seed = 0;
  int threads = 1;

  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--seed", seed, "master seed");
  app.add_option("--out-dir", out_dir, "output directory");
  app.add_option("--threads", threads, "worker threads for data generation and evaluation");

  auto* gen = app.add_subcommand("generate", "generate a dataset from the task config");
  auto* train = app.add_subcommand("train", "train a SteerCNP on a dataset");
  train->add_option("--data", data_dir, "dataset directory")->required();
  auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint on a dataset split");
  eval->add_option("--model", model_dir, "checkpoint directory")->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--split", split, "train | val | test");
  eval->add_option("--out", out_path, "metrics JSON path (default <out-dir>/metrics.json)");
  auto* oracle = app.add_subcommand("gp-oracle", "exact GP posterior for a context CSV");
  oracle->add_option("--context", context_path, "context CSV")->required();
  oracle->add_option("--targets", targets_path, "target CSV (defaults to the context)");
  auto* audit = app.add_subcommand("audit", "run the equivariance audit suite");
  audit->add_option("--model", model_dir, "optional checkpoint to audit end to end");
  audit->add_option("--out", out_path, "audit report JSON path");
  auto* inspect = app.add_subcommand("inspect", "dump a grid prediction as CSV for plotting");
  inspect->add_option("--model", model_dir, "checkpoint directory")->required();
  inspect->add_option("--context", context_path, "context CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    json cfg = load_config(config_path);
    if (gen->parsed()) return cmd_generate(cfg, out_dir, seed, threads);
    if (train->parsed()) return cmd_train(cfg, data_dir, out_dir, seed, threads);
    if (eval->parsed()) {
      if (out_path.empty()) {
        std::filesystem::create_directories(out_dir);
        out_path = out_dir + "/metrics.json";
      }
      return cmd_evaluate(model_dir, data_dir, split, out_path, seed, threads);
    }
    if (oracle->parsed()) return cmd_gp_oracle(cfg, context_path, targets_path, out_dir);
    if (audit->parsed()) return cmd_audit(model_dir, out_path, seed);
    if (inspect->parsed()) return cmd_inspect(model_dir, context_path, out_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
  return kExitOk;
}
