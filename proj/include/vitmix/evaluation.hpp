// Evaluation harness: reconstruction PSNR reports, mixing-grid image dumps,
// the augmentation-vs-baseline classifier comparison, and the two scaling
// trend experiments.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "vitmix/classifier.hpp"
#include "vitmix/trainer.hpp"

namespace vitmix {

// 10*log10(1/MSE) over [0,1] pixels (MAX=1); identical images give +inf,
// which reports as the "inf" sentinel in CSV output, never a float.
template <class S>
double psnr(const Tensor<S>& x, const Tensor<S>& y) {
  if (x.shape() != y.shape())
    throw ShapeError("psnr: shapes differ: " + shape_str(x.shape()) + " vs " +
                     shape_str(y.shape()));
  const S* a = x.data();
  const S* b = y.data();
  double acc = 0.0;
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(n);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

inline std::string psnr_csv_field(double v, int prec = 6) {
  return std::isinf(v) ? std::string("inf") : fmt_f64(v, prec);
}

struct MetricRow {
  std::string split;
  int domain = -1; // -1 = aggregate over the split
  double mean = 0;
  double stddev = 0;
  std::int64_t n = 0;
};

struct MetricReport {
  std::vector<MetricRow> rows;

  double split_mean(const std::string& split) const {
    for (const auto& r : rows)
      if (r.split == split && r.domain == -1) return r.mean;
    throw ConfigError("metric report has no aggregate row for split '" + split + "'");
  }

  void write_csv(const std::filesystem::path& path, const std::string& metric) const {
    CsvWriter csv(path, "metric,split,domain,mean,std,n");
    for (const auto& r : rows)
      csv.row({metric, r.split, r.domain < 0 ? "all" : std::to_string(r.domain),
               psnr_csv_field(r.mean), psnr_csv_field(r.stddev), std::to_string(r.n)});
  }
};

// Per-sample PSNR of self-reconstructions over the given splits, aggregated
// overall and per domain.
template <class S>
MetricReport eval_reconstruction(const VitEncoder<S>& encoder, const Dataset<S>& dataset,
                                 const std::vector<std::string>& splits) {
  NoGradGuard ng;
  MetricReport report;
  const std::int64_t chunk = 32;
  for (const auto& split : splits) {
    const auto& idx = dataset.split_indices(split);
    std::vector<double> values(idx.size());
    std::map<int, std::vector<double>> by_domain;
    for (std::size_t off = 0; off < idx.size(); off += chunk) {
      const std::size_t count = std::min<std::size_t>(chunk, idx.size() - off);
      Tensor<S> batch = detail::stack_images(dataset, idx, off, count);
      Tensor<S> recon = reconstruct_batch(batch, encoder);
      const std::int64_t per = batch.numel() / static_cast<std::int64_t>(count);
      for (std::size_t i = 0; i < count; ++i) {
        Tensor<S> xi = Tensor<S>::from({per}, std::vector<S>(
            batch.data() + static_cast<std::int64_t>(i) * per,
            batch.data() + static_cast<std::int64_t>(i + 1) * per));
        Tensor<S> ri = Tensor<S>::from({per}, std::vector<S>(
            recon.data() + static_cast<std::int64_t>(i) * per,
            recon.data() + static_cast<std::int64_t>(i + 1) * per));
        const double v = psnr(xi, ri);
        values[off + i] = v;
        by_domain[dataset.domains[idx[off + i]]].push_back(v);
      }
    }
    auto aggregate = [&](const std::vector<double>& vals, int domain) {
      MetricRow row;
      row.split = split;
      row.domain = domain;
      row.n = static_cast<std::int64_t>(vals.size());
      double m = 0;
      for (double v : vals) m += v;
      m /= static_cast<double>(vals.size());
      double s2 = 0;
      for (double v : vals) s2 += (v - m) * (v - m);
      row.mean = m;
      row.stddev = vals.size() > 1 ? std::sqrt(s2 / static_cast<double>(vals.size() - 1)) : 0.0;
      return row;
    };
    report.rows.push_back(aggregate(values, -1));
    for (const auto& [dom, vals] : by_domain) report.rows.push_back(aggregate(vals, dom));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Mixing grid
// ---------------------------------------------------------------------------

struct MixGridStats {
  std::int64_t rows = 0; // donors + 1 (header row of originals)
  std::int64_t cols = 0; // sources + 1
  // Fraction of synthetic cells whose channel means sit closer to their
  // donor's than to their anatomy source's.
  double donor_color_fraction = 0;
};

namespace detail {
template <class S>
std::array<double, 3> channel_means(const S* px, std::int64_t h, std::int64_t w) {
  std::array<double, 3> m{};
  for (int c = 0; c < 3; ++c) {
    double acc = 0;
    for (std::int64_t i = 0; i < h * w; ++i) acc += static_cast<double>(px[c * h * w + i]);
    m[static_cast<std::size_t>(c)] = acc / static_cast<double>(h * w);
  }
  return m;
}
} // namespace detail

// Grid image: row 0 holds the anatomy sources, column 0 the characteristic
// donors, and cell (r, c) synthesizes source c's anatomy with one random
// patch characteristic of donor r. Written as a single PPM.
template <class S>
MixGridStats dump_mix_grid(const VitEncoder<S>& encoder, const Dataset<S>& dataset,
                           const std::vector<std::size_t>& source_idx,
                           const std::vector<std::size_t>& donor_idx, Rng& rng,
                           const std::filesystem::path& path) {
  NoGradGuard ng;
  const auto& cfg = encoder.cfg;
  const std::int64_t h = cfg.image_size, w = cfg.image_size;
  const std::int64_t rows = static_cast<std::int64_t>(donor_idx.size()) + 1;
  const std::int64_t cols = static_cast<std::int64_t>(source_idx.size()) + 1;
  Tensor<S> grid = Tensor<S>::filled({3, rows * h, cols * w}, S(0.5));

  auto paste = [&](const Tensor<S>& img, std::int64_t r, std::int64_t c) {
    S* g = grid.mutable_data();
    const S* p = img.data();
    for (std::int64_t ch = 0; ch < 3; ++ch)
      for (std::int64_t y = 0; y < h; ++y)
        std::memcpy(g + (ch * rows * h + r * h + y) * cols * w + c * w, p + (ch * h + y) * w,
                    static_cast<std::size_t>(w) * sizeof(S));
  };

  std::vector<Tensor<S>> src_za;
  for (std::size_t i = 0; i < source_idx.size(); ++i) {
    const auto& img = dataset.images[source_idx[i]];
    paste(img, 0, static_cast<std::int64_t>(i) + 1);
    auto halves = split_embedding(encoder.encode(img));
    src_za.push_back(halves.first);
  }

  MixGridStats stats{rows, cols, 0};
  std::int64_t donor_closer = 0, cells = 0;
  for (std::size_t r = 0; r < donor_idx.size(); ++r) {
    const auto& donor_img = dataset.images[donor_idx[r]];
    paste(donor_img, static_cast<std::int64_t>(r) + 1, 0);
    auto halves = split_embedding(encoder.encode(donor_img));
    const auto patch =
        static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cfg.patch_count())));
    Tensor<S> donor_row = gather_axis0(halves.second, {patch}); // (1, L/2)

    const auto donor_mean = detail::channel_means(donor_img.data(), h, w);
    for (std::size_t c = 0; c < source_idx.size(); ++c) {
      Tensor<S> cell = synthesize(src_za[c], donor_row, cfg);
      paste(cell, static_cast<std::int64_t>(r) + 1, static_cast<std::int64_t>(c) + 1);
      const auto cell_mean = detail::channel_means(cell.data(), h, w);
      const auto src_mean = detail::channel_means(dataset.images[source_idx[c]].data(), h, w);
      double dd = 0, ds = 0;
      for (int ch = 0; ch < 3; ++ch) {
        dd += (cell_mean[static_cast<std::size_t>(ch)] - donor_mean[static_cast<std::size_t>(ch)]) *
              (cell_mean[static_cast<std::size_t>(ch)] - donor_mean[static_cast<std::size_t>(ch)]);
        ds += (cell_mean[static_cast<std::size_t>(ch)] - src_mean[static_cast<std::size_t>(ch)]) *
              (cell_mean[static_cast<std::size_t>(ch)] - src_mean[static_cast<std::size_t>(ch)]);
      }
      if (dd < ds) ++donor_closer;
      ++cells;
    }
  }
  write_image(grid, path);
  stats.donor_color_fraction =
      cells == 0 ? 0.0 : static_cast<double>(donor_closer) / static_cast<double>(cells);
  return stats;
}

// ---------------------------------------------------------------------------
// Downstream classifier comparison
// ---------------------------------------------------------------------------

struct ClassifierConfig {
  int epochs = 8;
  int batch_size = 16;
  int mixes = 4;              // synthetic images per sample in mix mode
  double lr = 1e-3;
  double lr_min = 0.0;
  double weight_decay = 1e-4;
  std::string augment = "none"; // none | mix
  std::uint64_t seed = 7;
  bool quiet = true;

  void validate() const {
    if (augment != "none" && augment != "mix")
      throw ConfigError("classifier config: augment must be 'none' or 'mix', got '" +
                        augment + "'");
    if (epochs <= 0 || batch_size < 2) throw ConfigError("classifier config: bad sizes");
  }
};

// Synthetic images carry the label of their anatomy source; the donor only
// contributes appearance.
inline std::vector<int> inherit_labels(const std::vector<int>& labels, const MixPlan& plan) {
  std::vector<int> out = labels;
  out.reserve(labels.size() + plan.entries.size());
  for (const auto& e : plan.entries)
    out.push_back(labels[static_cast<std::size_t>(e.anatomy)]);
  return out;
}

template <class S>
struct ClassifierResult {
  double train_accuracy = 0;
  double val_accuracy = 0;
  double test_accuracy = 0;
  SmallCnn<S> model;
};

template <class S>
double classifier_accuracy(const SmallCnn<S>& model, const Dataset<S>& ds,
                           const std::string& split) {
  NoGradGuard ng;
  const auto& idx = ds.split_indices(split);
  std::int64_t correct = 0, total = 0;
  const std::size_t chunk = 64;
  for (std::size_t off = 0; off < idx.size(); off += chunk) {
    const std::size_t count = std::min(chunk, idx.size() - off);
    Tensor<S> batch = detail::stack_images(ds, idx, off, count);
    Tensor<S> logits = model.forward(batch);
    const S* lv = logits.data();
    for (std::size_t i = 0; i < count; ++i) {
      const int label = ds.labels[idx[off + i]];
      if (label < 0) continue;
      const int pred = lv[i * 2] >= lv[i * 2 + 1] ? 0 : 1;
      correct += pred == label;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

// Train the small CNN on the labeled train split. In mix mode every batch is
// extended on the fly with `mixes` synthetic images per sample, generated by
// the frozen encoder (no gradients reach it); synthetic images inherit the
// label of their anatomy source.
template <class S>
ClassifierResult<S> train_classifier(const Dataset<S>& dataset,
                                     const VitEncoder<S>* encoder,
                                     const ClassifierConfig& cfg) {
  cfg.validate();
  const bool mix_mode = cfg.augment == "mix";
  if (mix_mode && encoder == nullptr)
    throw ConfigError("mix augmentation requires a trained encoder checkpoint");

  std::vector<std::size_t> pool = dataset.split_indices("train");
  ClassifierResult<S> result;
  Rng init_rng = Rng::split(cfg.seed, "classifier-init");
  result.model.init(init_rng);
  AdamW<S> opt(result.model.parameters(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng loop_rng = Rng::split(cfg.seed, "classifier-loop");

  const std::int64_t steps_per_epoch = static_cast<std::int64_t>(pool.size()) / cfg.batch_size;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    detail::shuffle_indices(pool, loop_rng);
    double esum = 0;
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      Tensor<S> batch = detail::stack_images(dataset, pool,
                                             static_cast<std::size_t>(s) * cfg.batch_size,
                                             static_cast<std::size_t>(cfg.batch_size));
      std::vector<int> labels(static_cast<std::size_t>(cfg.batch_size));
      for (int i = 0; i < cfg.batch_size; ++i)
        labels[static_cast<std::size_t>(i)] =
            dataset.labels[pool[static_cast<std::size_t>(s) * cfg.batch_size +
                                static_cast<std::size_t>(i)]];

      Tensor<S> train_images = batch;
      std::vector<int> train_labels = labels;
      if (mix_mode) {
        // Synthetic extension happens outside the classifier's graph.
        Tensor<S> synth;
        MixPlan plan;
        {
          NoGradGuard ng;
          plan = build_mix_plan(cfg.batch_size, cfg.mixes, encoder->cfg.patch_count(),
                                loop_rng);
          MixForward<S> f = MixForward<S>::run(batch, plan, *encoder);
          synth = f.synthetic.detach();
        }
        const std::int64_t k = synth.dim(0);
        const std::int64_t per = batch.numel() / cfg.batch_size;
        Tensor<S> extended = Tensor<S>::zeros(
            {cfg.batch_size + k, batch.dim(1), batch.dim(2), batch.dim(3)});
        std::memcpy(extended.mutable_data(), batch.data(),
                    static_cast<std::size_t>(batch.numel()) * sizeof(S));
        std::memcpy(extended.mutable_data() + batch.numel(), synth.data(),
                    static_cast<std::size_t>(synth.numel()) * sizeof(S));
        train_images = extended;
        train_labels = inherit_labels(labels, plan);
        (void)per;
      }

      Tensor<S> logits = result.model.forward(train_images);
      Tensor<S> loss = softmax_cross_entropy(logits, train_labels);
      if (!std::isfinite(static_cast<double>(loss.item())))
        throw Error("non-finite classifier loss at step " + std::to_string(step));
      opt.zero_grad();
      loss.backward();
      opt.step(cosine_lr(step, total_steps, cfg.lr, cfg.lr_min));
      ++step;
      esum += static_cast<double>(loss.item());
    }
    if (!cfg.quiet)
      std::cout << "classifier epoch " << epoch << " loss "
                << esum / static_cast<double>(steps_per_epoch) << "\n";
  }

  result.train_accuracy = classifier_accuracy(result.model, dataset, "train");
  result.val_accuracy = classifier_accuracy(result.model, dataset, "val");
  result.test_accuracy = classifier_accuracy(result.model, dataset, "test");
  return result;
}

// ---------------------------------------------------------------------------
// Scaling trend experiments
// ---------------------------------------------------------------------------

struct TrendRow {
  std::string variant;
  double holdout_psnr = 0, val_psnr = 0, test_psnr = 0;
  double base_holdout = 0, base_val = 0, base_test = 0;
  int epochs = 0;
};

struct TrendReport {
  std::vector<TrendRow> rows;

  void write(const std::filesystem::path& csv_path,
             const std::filesystem::path& md_path) const {
    CsvWriter csv(csv_path,
                  "variant,epochs,holdout_psnr,val_psnr,test_psnr,base_holdout,base_val,base_test");
    for (const auto& r : rows)
      csv.row({r.variant, std::to_string(r.epochs), psnr_csv_field(r.holdout_psnr),
               psnr_csv_field(r.val_psnr), psnr_csv_field(r.test_psnr),
               psnr_csv_field(r.base_holdout), psnr_csv_field(r.base_val),
               psnr_csv_field(r.base_test)});
    std::ofstream md(md_path);
    md << "| variant | epochs | holdout dB | val dB | test dB | base holdout | base val | base test |\n";
    md << "|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : rows)
      md << "| " << r.variant << " | " << r.epochs << " | " << psnr_csv_field(r.holdout_psnr, 4)
         << " | " << psnr_csv_field(r.val_psnr, 4) << " | " << psnr_csv_field(r.test_psnr, 4)
         << " | " << psnr_csv_field(r.base_holdout, 4) << " | " << psnr_csv_field(r.base_val, 4)
         << " | " << psnr_csv_field(r.base_test, 4) << " |\n";
  }
};

// Two scaling axes against an already-trained base encoder:
//   (a) fold the unlabeled pool into training (half the base epochs keeps the
//       total sample passes comparable to the base run);
//   (b) the deeper/wider encoder variant at 20% of the base epochs.
// The unlabeled pool doubles as the in-domain holdout for the base and deep
// rows; the unlabeled-augmented row trains on it, so its "holdout" column is
// in-training-domain but seen data (flagged in the variant name).
template <class S>
TrendReport scalability_experiments(const Dataset<S>& dataset, const TrainConfig& base_cfg,
                                    const std::filesystem::path& base_checkpoint,
                                    const std::filesystem::path& out_dir) {
  VitEncoder<S> base = load_encoder<S>(base_checkpoint);
  const std::vector<std::string> splits = {"unlabeled", "val", "test"};
  MetricReport base_rep = eval_reconstruction(base, dataset, splits);

  TrendReport report;
  auto fill_base = [&](TrendRow& r) {
    r.base_holdout = base_rep.split_mean("unlabeled");
    r.base_val = base_rep.split_mean("val");
    r.base_test = base_rep.split_mean("test");
  };

  {
    TrainConfig cfg = base_cfg;
    cfg.include_unlabeled = true;
    cfg.epochs = std::max(1, base_cfg.epochs / 2);
    TrainResult<S> res = train_encoder(dataset, cfg, out_dir / "unlabeled_run");
    VitEncoder<S> enc = load_encoder<S>(res.final_path);
    MetricReport rep = eval_reconstruction(enc, dataset, splits);
    TrendRow row;
    row.variant = "unlabeled_augmented";
    row.epochs = cfg.epochs;
    row.holdout_psnr = rep.split_mean("unlabeled");
    row.val_psnr = rep.split_mean("val");
    row.test_psnr = rep.split_mean("test");
    fill_base(row);
    report.rows.push_back(row);
  }
  {
    TrainConfig cfg = base_cfg;
    cfg.arch = "deep";
    cfg.epochs = std::max(1, base_cfg.epochs / 5);
    TrainResult<S> res = train_encoder(dataset, cfg, out_dir / "deep_run");
    VitEncoder<S> enc = load_encoder<S>(res.final_path);
    MetricReport rep = eval_reconstruction(enc, dataset, splits);
    TrendRow row;
    row.variant = "deep_encoder";
    row.epochs = cfg.epochs;
    row.holdout_psnr = rep.split_mean("unlabeled");
    row.val_psnr = rep.split_mean("val");
    row.test_psnr = rep.split_mean("test");
    fill_base(row);
    report.rows.push_back(row);
  }
  report.write(out_dir / "trend.csv", out_dir / "trend.md");
  return report;
}

} // namespace vitmix
