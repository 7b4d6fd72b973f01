#pragma once

#include <optional>
#include <string>
#include <vector>

#include "stochfield/common.hpp"
#include "stochfield/field.hpp"
#include "stochfield/gp.hpp"
#include "stochfield/steer_net.hpp"
#include "stochfield/train.hpp"

namespace stochfield {

enum class TaskKind { gp_rbf, gp_curl, gp_div, scalar_inpaint, csv_ingest };

struct DatasetSpec {
  TaskKind task = TaskKind::gp_rbf;
  double lengthscale = 5.0;
  double kernel_variance = 1.0;
  double noise = 0.05;
  double extent_half_width = 10.0;
  int grid_points_per_axis = 15;  // per-sample observation grid (rotated, inscribed in the disc)
  int image_resolution = 16;      // scalar_inpaint
  int train_samples = 100;
  int val_samples = 20;
  int test_samples = 20;
  int max_context = 50;
  uint64_t seed = 0;

  void validate() const;
  MatrixKernel kernel() const;  // generating kernel for GP tasks
  std::string task_name() const;
  static TaskKind parse_task(const std::string& name);
};

struct Dataset {
  DatasetSpec spec;
  Representation rep;              // input representation
  std::string rep_out_desc;        // output sub-representation descriptor
  int output_channel_offset = 0;
  std::vector<ContextSet> train, val, test;

  const std::vector<ContextSet>& split(const std::string& name) const;
  bool gp_task() const {
    return spec.task == TaskKind::gp_rbf || spec.task == TaskKind::gp_curl || spec.task == TaskKind::gp_div;
  }
};

// Per-sample: a uniformly random rotation of a square grid inscribed in the
// disc of the extent, GP-sampled field values plus N(0, noise^2) per coordinate.
Dataset generate_gp_dataset(const DatasetSpec& spec, int threads = 1);

// Procedural grayscale glyphs (rotated bars and arcs) on small pixel grids,
// intensities in [0, 1], with a 10% share of blank images.
Dataset generate_scalar_inpaint_dataset(const DatasetSpec& spec, int threads = 1);

void write_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir);

// CSV ingestion: directory with manifest.json naming the channel
// representations and the output block, plus one ContextSet CSV per sample.
Dataset ingest_csv(const std::string& dir);

// Glyph used by the scalar task; exposed so rotation exactness is testable.
struct GlyphSpec {
  struct Primitive {
    int kind = 0;             // 0 bar, 1 arc
    Vector2d center = Vector2d::Zero();
    int quarter_turns = 0;    // exact 90-degree part of the orientation
    double angle = 0.0;       // residual orientation in [0, pi/2)
    double length = 4.0;      // bar length / arc radius
    double width = 1.0;
    double arc_span = M_PI;   // arcs only
    double intensity = 1.0;
  };
  std::vector<Primitive> primitives;

  static GlyphSpec random(Rng& rng);
  GlyphSpec rotated90() const;
  // res x res intensities in [0,1]; pixel (iy, ix) sits at
  // (ix - (res-1)/2, iy - (res-1)/2).
  MatrixXd render(int res) const;
};

struct AuditCheck {
  std::string name;
  std::string group_sample;  // which elements were exercised
  int samples = 0;
  double max_residual = 0.0;
  double mean_residual = 0.0;
  double tolerance = 0.0;
  bool expect_below = true;  // negative controls expect the residual to exceed
  bool pass = false;
};

struct AuditReport {
  std::vector<AuditCheck> checks;
  bool passed() const;
  std::string to_json() const;
};

// Thm-1 angular constraint for the three built-in kernels under sampled
// continuous rotations plus all elements of the given finite group.
AuditReport audit_kernels(uint64_t seed);

// Posterior equivariance of exact GPs under random isometries with h drawn
// from the given groups.
AuditReport audit_gp(uint64_t seed);

// Encoder and end-to-end model equivariance under the model's own fiber group
// (quarter-turn isometries for the grid); includes an unprojected negative
// control expected to exceed its threshold.
AuditReport audit_model(const SteerCNP& model, uint64_t seed);

struct EvalResult {
  int samples = 0;
  double mean_ll = 0.0;
  double std_ll = 0.0;
  std::optional<double> oracle_mean_ll;
  std::optional<double> oracle_std_ll;
};

// Eval-mode splits; per-sample mean target log-likelihood, aggregated. When
// the dataset is GP-generated the exact posterior oracle (predictive density
// including observation noise) is evaluated on the same splits.
EvalResult evaluate(const SteerCNP& model, const Dataset& ds, const std::string& split, uint64_t seed,
                    int threads = 1);

// Oracle-only evaluation (no model), for GP datasets.
EvalResult evaluate_oracle(const Dataset& ds, const std::string& split, uint64_t seed, int threads = 1,
                           const MatrixKernel* kernel_override = nullptr);

// GP model the dataset was generated from.
GPModel oracle_model(const Dataset& ds);

}  // namespace stochfield
