#include "stochfield/train.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include <json.hpp>

namespace stochfield {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be nonnegative");
  if (batch_size < 1 || epochs < 0) throw ConfigError("batch size and epochs must be positive");
  if (max_context < 1) throw ConfigError("max context size must be >= 1");
  if (min_context < 1 || min_context > max_context)
    throw ConfigError("min context must lie in [1, max_context]");
  if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1 && adam_eps > 0))
    throw ConfigError("Adam hyperparameters out of range");
}

Split split_context_target(const ContextSet& sample, Rng& rng, int max_context, bool training_mode,
                           int min_context) {
  const int n = sample.size();
  if (n < 2) throw DataError("split requires a sample with at least 2 points");
  const int hi = std::min(max_context, n - 1);
  const int lo = std::min(min_context, hi);
  const int n_ctx = lo + rng.below(hi - lo + 1);

  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);

  Split s;
  s.context.rep = sample.rep;
  s.context.points.reserve(n_ctx);
  s.context.values.resize(n_ctx, sample.channels());
  for (int i = 0; i < n_ctx; ++i) {
    s.context.points.push_back(sample.points[idx[i]]);
    s.context.values.row(i) = sample.values.row(idx[i]);
  }

  const int m = training_mode ? n : n - n_ctx;
  s.target_points.reserve(m);
  s.target_values.resize(m, sample.channels());
  int row = 0;
  const int begin = training_mode ? 0 : n_ctx;
  for (int i = begin; i < n; ++i) {
    s.target_points.push_back(sample.points[idx[i]]);
    s.target_values.row(row++) = sample.values.row(idx[i]);
  }
  return s;
}

Adam::Adam(const ParameterStore& store, const TrainConfig& cfg) : cfg_(cfg) {
  for (int i = 0; i < store.size(); ++i) {
    m_.push_back(MatrixXd::Zero(store[i].value.rows(), store[i].value.cols()));
    v_.push_back(MatrixXd::Zero(store[i].value.rows(), store[i].value.cols()));
  }
}

void Adam::step(ParameterStore& store) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (int i = 0; i < store.size(); ++i) {
    Parameter& p = store[i];
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * p.grad;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -=
        cfg_.learning_rate * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.adam_eps);
  }
}

namespace {

MatrixXd output_slice(const SteerCNP& model, const MatrixXd& values) {
  return values.middleCols(model.config().output_channel_offset, model.rep_out().dimension());
}

}  // namespace

double loss(const SteerCNP& model, const ContextSet& zc, const std::vector<Vector2d>& target_points,
            const MatrixXd& target_values) {
  return model.loss(zc, target_points, output_slice(model, target_values));
}

double validation_mean_ll(const SteerCNP& model, const std::vector<ContextSet>& val_set,
                          const TrainConfig& cfg, int threads) {
  if (val_set.empty()) throw ConfigError("validation set is empty");
  std::vector<double> ll(val_set.size());
  parallel_for(static_cast<int>(val_set.size()), threads, [&](int i) {
    Rng rng(derive_seed(cfg.seed, {0x5EEDull, static_cast<uint64_t>(i)}));
    Split s = split_context_target(val_set[i], rng, cfg.max_context, /*training_mode=*/false,
                                   cfg.min_context);
    ll[i] = -loss(model, s.context, s.target_points, s.target_values);
  });
  double acc = 0.0;
  for (double v : ll) acc += v;
  return acc / static_cast<double>(val_set.size());
}

namespace {

void dump_batch(const std::string& out_dir, const std::vector<const ContextSet*>& batch) {
  std::filesystem::create_directories(out_dir + "/diverged_batch");
  for (size_t i = 0; i < batch.size(); ++i)
    write_context_csv(out_dir + "/diverged_batch/sample_" + std::to_string(i) + ".csv", *batch[i]);
}

}  // namespace

FitReport fit(SteerCNP& model, const std::vector<ContextSet>& train_set,
              const std::vector<ContextSet>& val_set, const TrainConfig& cfg, const std::string& out_dir,
              std::ostream* log, int threads) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("training set is empty");
  std::filesystem::create_directories(out_dir);
  std::ofstream report(out_dir + "/report.jsonl", std::ios::app);

  Adam adam(model.params(), cfg);
  FitReport fr;
  bool warned_detached = false;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    std::vector<int> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, {0x5855ull, static_cast<uint64_t>(epoch)}));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    int batches = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + cfg.batch_size);
      const int bsize = static_cast<int>(end - start);

      // Each batch element runs forward/backward on its own tape (possibly
      // concurrently); gradients are reduced in batch order afterwards.
      std::vector<std::vector<MatrixXd>> grads(bsize);
      std::vector<double> losses(bsize);
      std::vector<const ContextSet*> batch(bsize);
      parallel_for(bsize, threads, [&](int k) {
        const ContextSet& sample = train_set[order[start + k]];
        batch[k] = &sample;
        Rng rng(derive_seed(cfg.seed, {0x517Cull, static_cast<uint64_t>(epoch),
                                       static_cast<uint64_t>(order[start + k])}));
        Split s = split_context_target(sample, rng, cfg.max_context, /*training_mode=*/true,
                                       cfg.min_context);
        MatrixXd y = output_slice(model, s.target_values);
        Tape tape;
        SteerCNP::BatchContext bc = model.begin_batch(tape);
        auto f = model.forward(tape, bc, s.context, s.target_points, &y);
        losses[k] = tape.value(f.loss)(0, 0);
        if (!std::isfinite(losses[k]) || losses[k] > 1e6) return;  // reported below
        grads[k].resize(model.params().size());
        tape.backward(f.loss, grads[k]);
      });

      double lv = 0.0;
      for (int k = 0; k < bsize; ++k) {
        if (!std::isfinite(losses[k]) || losses[k] > 1e6) {
          dump_batch(out_dir, batch);
          throw NumericalError("training diverged (loss " + std::to_string(losses[k]) + " at epoch " +
                               std::to_string(epoch) + "); offending batch dumped to " + out_dir +
                               "/diverged_batch");
        }
        lv += losses[k] / bsize;
      }
      epoch_loss += lv;
      ++batches;

      model.params().zero_grad();
      for (int k = 0; k < bsize; ++k)
        for (int p = 0; p < model.params().size(); ++p)
          if (grads[k][p].size() > 0) model.params()[p].grad += grads[k][p] / bsize;
      if (!warned_detached) {
        for (int i = 0; i < model.params().size(); ++i) {
          if (model.params()[i].grad.cwiseAbs().maxCoeff() == 0.0) {
            if (log)
              *log << "warning: parameter '" << model.params()[i].name
                   << "' received a zero gradient (detached from the loss?)\n";
            warned_detached = true;
          }
        }
      }
      adam.step(model.params());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / std::max(1, batches);
    rec.val_mean_ll = validation_mean_ll(model, val_set, cfg, threads);
    rec.embed_lengthscale =
        std::exp(model.params()[model.params().find("encoder.log_lengthscale")].value(0, 0));
    rec.smooth_lengthscale =
        std::exp(model.params()[model.params().find("smoother.log_lengthscale")].value(0, 0));
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    fr.epochs.push_back(rec);

    if (fr.best_epoch < 0 || rec.val_mean_ll > fr.best_val_mean_ll) {
      fr.best_epoch = epoch;
      fr.best_val_mean_ll = rec.val_mean_ll;
      model.save(out_dir + "/best");
    }

    nlohmann::json line = {{"epoch", rec.epoch},
                           {"train_loss", rec.train_loss},
                           {"val_mean_ll", rec.val_mean_ll},
                           {"embed_lengthscale", rec.embed_lengthscale},
                           {"smooth_lengthscale", rec.smooth_lengthscale},
                           {"seconds", rec.seconds}};
    report << line.dump() << "\n";
    report.flush();
    if (log)
      *log << "epoch " << rec.epoch << ": train_loss " << rec.train_loss << "  val_mean_ll "
           << rec.val_mean_ll << "  (" << rec.seconds << " s)\n";
  }

  model.save(out_dir + "/last");
  return fr;
}

}  // namespace stochfield
