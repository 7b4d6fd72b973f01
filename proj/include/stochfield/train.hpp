#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "stochfield/common.hpp"
#include "stochfield/field.hpp"
#include "stochfield/steer_net.hpp"

namespace stochfield {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 4;
  int epochs = 20;
  int min_context = 3;
  int max_context = 50;
  uint64_t seed = 0;

  void validate() const;
};

// Context/target split of one sample. In training mode the target set is the
// full sample (it includes the context); in eval mode it is the complement.
struct Split {
  ContextSet context;
  std::vector<Vector2d> target_points;
  MatrixXd target_values;
};

Split split_context_target(const ContextSet& sample, Rng& rng, int max_context, bool training_mode,
                           int min_context = 3);

class Adam {
 public:
  Adam(const ParameterStore& store, const TrainConfig& cfg);
  void step(ParameterStore& store);

 private:
  TrainConfig cfg_;
  std::vector<MatrixXd> m_, v_;
  long t_ = 0;
};

// Negative mean target log-likelihood of the model's per-point Gaussians.
// Target values are sliced to the model's output channel window.
double loss(const SteerCNP& model, const ContextSet& zc, const std::vector<Vector2d>& target_points,
            const MatrixXd& target_values);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_mean_ll = 0.0;
  double embed_lengthscale = 0.0;
  double smooth_lengthscale = 0.0;
  double seconds = 0.0;
};

struct FitReport {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_val_mean_ll = 0.0;
};

// Adam training with per-epoch eval-mode validation; the best-validation
// checkpoint is kept at <out_dir>/best and the training report appended to
// <out_dir>/report.jsonl. Deterministic given cfg.seed (single-threaded,
// fixed-order reductions).
FitReport fit(SteerCNP& model, const std::vector<ContextSet>& train_set,
              const std::vector<ContextSet>& val_set, const TrainConfig& cfg, const std::string& out_dir,
              std::ostream* log = nullptr, int threads = 1);

// Mean validation log-likelihood with eval-mode splits (deterministic per seed).
double validation_mean_ll(const SteerCNP& model, const std::vector<ContextSet>& val_set,
                          const TrainConfig& cfg, int threads = 1);

}  // namespace stochfield
