// Self-supervised encoder training loop.
//
// AdamW with a single-cycle cosine schedule stepped per batch. Labels are
// never consulted; the unlabeled pool can be folded into the training set.
// Checkpoints carry parameters, optimizer moments, the schedule position and
// the loop RNG state, so a resumed run continues bit-identically (training
// runs use the f32 instantiation, matching the f32 checkpoint blobs).
#pragma once

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "vitmix/checkpoint.hpp"
#include "vitmix/corpus.hpp"
#include "vitmix/mixing.hpp"
#include "vitmix/optim.hpp"

namespace vitmix {

struct TrainConfig {
  int epochs = 50;
  int batch_size = 16;
  int mixes = 4;
  double lr = 1e-3;
  double lr_min = 0.0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  LossWeights weights;
  std::uint64_t seed = 42;
  bool include_unlabeled = false;
  std::string arch = "base";
  bool quiet = false;
  // Halt after this many epochs while keeping the full schedule horizon;
  // 0 runs to completion. Used to exercise checkpoint-resume behaviour.
  int halt_after_epochs = 0;

  void validate() const {
    if (epochs <= 0 || batch_size < 2 || mixes < 1)
      throw ConfigError("train config: need epochs >= 1, batch >= 2 (mixing requires a donor), mixes >= 1");
    if (lr <= 0.0) throw ConfigError("train config: lr must be positive");
  }

  KvConfig to_kv() const {
    KvConfig kv;
    kv.set_i64("epochs", epochs);
    kv.set_i64("batch_size", batch_size);
    kv.set_i64("mixes", mixes);
    kv.set_f64("lr", lr);
    kv.set_f64("lr_min", lr_min);
    kv.set_f64("weight_decay", weight_decay);
    kv.set_f64("beta1", beta1);
    kv.set_f64("beta2", beta2);
    kv.set_f64("eps", eps);
    kv.set_f64("lambda_anatomy", weights.anatomy);
    kv.set_f64("lambda_characteristic", weights.characteristic);
    kv.set_f64("lambda_reconstruction", weights.reconstruction);
    kv.set_i64("seed", static_cast<std::int64_t>(seed));
    kv.set_i64("include_unlabeled", include_unlabeled ? 1 : 0);
    kv.set("arch", arch);
    return kv;
  }
};

template <class S>
struct EpochStats {
  int epoch = 0;
  double anatomy = 0, characteristic = 0, reconstruction = 0, total = 0;
  double lr = 0;
  double wall_seconds = 0;
};

template <class S>
struct TrainResult {
  std::filesystem::path final_path;
  std::filesystem::path best_path;
  std::vector<LossReport<S>> step_losses;
  std::vector<EpochStats<S>> epochs;
};

namespace detail {

template <class S>
Tensor<S> stack_images(const Dataset<S>& ds, const std::vector<std::size_t>& pool,
                       std::size_t offset, std::size_t count) {
  const auto& first = ds.images[pool[offset]];
  const std::int64_t c = first.dim(0), h = first.dim(1), w = first.dim(2);
  Tensor<S> batch = Tensor<S>::zeros({static_cast<std::int64_t>(count), c, h, w});
  S* dst = batch.mutable_data();
  const std::int64_t per = c * h * w;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& img = ds.images[pool[offset + i]];
    if (img.dim(0) != c || img.dim(1) != h || img.dim(2) != w)
      throw GeometryError("dataset images disagree in shape");
    std::memcpy(dst + static_cast<std::int64_t>(i) * per, img.data(),
                static_cast<std::size_t>(per) * sizeof(S));
  }
  return batch;
}

inline void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i)
    std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng.below(i))]);
}

} // namespace detail

// Train the encoder on a dataset's train split (plus the unlabeled pool when
// configured). Writes encoder_final.ckpt / encoder_best.ckpt and loss.csv
// (epoch, loss means, lr, wall seconds) into out_dir. Pass resume_from to
// continue a previous run; its config geometry must match.
template <class S>
TrainResult<S> train_encoder(const Dataset<S>& dataset, const TrainConfig& cfg,
                             const std::filesystem::path& out_dir,
                             std::optional<std::filesystem::path> resume_from = {}) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);

  std::vector<std::size_t> pool = dataset.split_indices("train");
  if (cfg.include_unlabeled && dataset.by_split.count("unlabeled")) {
    const auto& extra = dataset.split_indices("unlabeled");
    pool.insert(pool.end(), extra.begin(), extra.end());
  }
  if (pool.size() < static_cast<std::size_t>(cfg.batch_size))
    throw ConfigError("training pool (" + std::to_string(pool.size()) +
                      " samples) smaller than one batch");

  const std::int64_t steps_per_epoch =
      static_cast<std::int64_t>(pool.size()) / cfg.batch_size; // partial tail dropped
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;

  EncoderConfig ecfg = EncoderConfig::by_name(cfg.arch);
  if (!dataset.images.empty()) {
    ecfg.channels = dataset.images[0].dim(0);
    ecfg.image_size = dataset.images[0].dim(1);
  }
  VitEncoder<S> encoder(ecfg);
  Rng init_rng = Rng::split(cfg.seed, "init");
  encoder.init(init_rng);
  AdamW<S> opt(encoder.parameters(),
               {cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay});
  Rng loop_rng = Rng::split(cfg.seed, "train-loop");

  std::int64_t step = 0;
  int start_epoch = 0;
  if (resume_from) {
    Checkpoint ck = Checkpoint::load(*resume_from);
    restore_encoder(ck, encoder, &opt);
    if (ck.total_steps != total_steps)
      throw ConfigError("resume: checkpoint schedule horizon " +
                        std::to_string(ck.total_steps) + " does not match " +
                        std::to_string(total_steps));
    loop_rng.set_state(ck.rng_state);
    step = ck.step;
    start_epoch = static_cast<int>(ck.epoch);
  }

  const bool fresh_csv = !resume_from;
  CsvWriter csv(out_dir / "loss.csv",
                "epoch,loss_anatomy,loss_characteristic,loss_reconstruction,loss_total,lr,wall_seconds",
                /*append=*/!fresh_csv);
  cfg.to_kv().save(out_dir / "train_config.txt");

  TrainResult<S> result;
  result.final_path = out_dir / "encoder_final.ckpt";
  result.best_path = out_dir / "encoder_best.ckpt";
  double best_total = std::numeric_limits<double>::infinity();

  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    detail::shuffle_indices(pool, loop_rng);
    double ea = 0, ec = 0, er = 0, et = 0, last_lr = 0;
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      Tensor<S> batch = detail::stack_images(dataset, pool,
                                             static_cast<std::size_t>(s) * cfg.batch_size,
                                             static_cast<std::size_t>(cfg.batch_size));
      MixPlan plan = build_mix_plan(cfg.batch_size, cfg.mixes, ecfg.patch_count(), loop_rng);
      TotalLoss<S> loss = total_loss(batch, plan, encoder, cfg.weights);
      if (!std::isfinite(static_cast<double>(loss.report.total)))
        throw Error("non-finite loss at step " + std::to_string(step) +
                    " (epoch " + std::to_string(epoch) + "); aborting");
      opt.zero_grad();
      loss.total.backward();
      last_lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min);
      opt.step(last_lr);
      ++step;

      result.step_losses.push_back(loss.report);
      ea += loss.report.anatomy;
      ec += loss.report.characteristic;
      er += loss.report.reconstruction;
      et += loss.report.total;
    }
    const double denom = static_cast<double>(steps_per_epoch);
    EpochStats<S> st;
    st.epoch = epoch;
    st.anatomy = ea / denom;
    st.characteristic = ec / denom;
    st.reconstruction = er / denom;
    st.total = et / denom;
    st.lr = last_lr;
    st.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(st);
    csv.row({std::to_string(epoch), fmt_f64(st.anatomy), fmt_f64(st.characteristic),
             fmt_f64(st.reconstruction), fmt_f64(st.total), fmt_f64(st.lr),
             fmt_f64(st.wall_seconds, 3)});
    if (!cfg.quiet)
      std::cout << "epoch " << epoch << "  total " << st.total << "  anat " << st.anatomy
                << "  char " << st.characteristic << "  recon " << st.reconstruction
                << "  lr " << st.lr << "\n";

    Checkpoint ck = snapshot_encoder(encoder, &opt);
    ck.total_steps = total_steps;
    ck.epoch = epoch + 1;
    ck.rng_state = loop_rng.state();
    ck.save(result.final_path);
    if (st.total < best_total) {
      best_total = st.total;
      ck.save(result.best_path);
    }
    if (cfg.halt_after_epochs > 0 && epoch + 1 >= cfg.halt_after_epochs) break;
  }
  return result;
}

// Load only the encoder from a checkpoint file.
template <class S>
VitEncoder<S> load_encoder(const std::filesystem::path& path) {
  Checkpoint ck = Checkpoint::load(path);
  VitEncoder<S> enc(ck.config);
  Rng dummy(0);
  enc.init(dummy);
  restore_encoder(ck, enc);
  return enc;
}

} // namespace vitmix
