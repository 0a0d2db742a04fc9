// Batch mixing plans and the three-term training objective.
//
// Each batch entry contributes M mixed images: its own anatomy embeddings
// combined with the characteristic embedding of one uniformly chosen patch
// of another batch entry. The objective compares embeddings of the original
// and the re-encoded synthetic images (anatomical and characteristic
// consistency) and penalizes the self-reconstruction error.
//
// Every squared-norm term is normalized per element (mean squared error),
// keeping the three terms on comparable scales at any geometry; the relative
// weighting stays configurable through the lambda weights. Gradients flow
// through every encoder application, including the re-encode of synthetic
// images; nothing is detached.
#pragma once

#include <utility>
#include <vector>

#include "vitmix/encoder.hpp"
#include "vitmix/rng.hpp"
#include "vitmix/synthesizer.hpp"
#include "vitmix/tensor.hpp"

namespace vitmix {

struct MixEntry {
  std::int64_t anatomy; // batch index i supplying anatomy (and the label downstream)
  std::int64_t donor;   // batch index m supplying the characteristic patch, donor != anatomy
  std::int64_t patch;   // patch index p within the donor
};

struct MixPlan {
  std::int64_t batch_size = 0;
  std::int64_t mixes = 0;
  std::vector<MixEntry> entries; // batch_size * mixes entries

  void validate(std::int64_t patch_count) const {
    if (static_cast<std::int64_t>(entries.size()) != batch_size * mixes)
      throw MixingError("mix plan: expected " + std::to_string(batch_size * mixes) +
                        " entries, got " + std::to_string(entries.size()));
    for (const auto& e : entries) {
      if (e.anatomy < 0 || e.anatomy >= batch_size || e.donor < 0 || e.donor >= batch_size)
        throw MixingError("mix plan: sample index out of range");
      if (e.donor == e.anatomy)
        throw MixingError("mix plan: donor must differ from the anatomy source");
      if (e.patch < 0 || e.patch >= patch_count)
        throw MixingError("mix plan: patch index out of range");
    }
  }
};

// M donors per sample, uniform over the other batch entries (repetition
// allowed once M exceeds N-1), each with an independent uniform patch pick.
inline MixPlan build_mix_plan(std::int64_t batch_size, std::int64_t mixes,
                              std::int64_t patch_count, Rng& rng) {
  if (batch_size < 2)
    throw MixingError("mixing requires a batch of at least 2 samples (no donor exists in a batch of " +
                      std::to_string(batch_size) + ")");
  if (mixes < 1) throw MixingError("mixing requires at least one mix per sample");
  MixPlan plan;
  plan.batch_size = batch_size;
  plan.mixes = mixes;
  plan.entries.reserve(static_cast<std::size_t>(batch_size * mixes));
  for (std::int64_t i = 0; i < batch_size; ++i) {
    for (std::int64_t m = 0; m < mixes; ++m) {
      std::int64_t donor =
          static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(batch_size - 1)));
      if (donor >= i) ++donor; // uniform over {0..N-1} \ {i}
      const auto patch =
          static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(patch_count)));
      plan.entries.push_back({i, donor, patch});
    }
  }
  return plan;
}

struct LossWeights {
  double anatomy = 1.0;
  double characteristic = 1.0;
  double reconstruction = 1.0;
};

template <class S>
struct LossReport {
  S anatomy = 0;
  S characteristic = 0;
  S reconstruction = 0;
  S total = 0;
};

// Shared forward state for the loss terms: embeddings of the originals,
// the mixed synthetic images, and their re-encoded embeddings.
template <class S>
struct MixForward {
  Tensor<S> z_a, z_c;       // (B, P, L/2) halves of the original embeddings
  Tensor<S> anatomy_ref;    // (K, P, L/2) anatomy of each entry's source image
  Tensor<S> donor_rows;     // (K, L/2) characteristic of each entry's donor patch
  Tensor<S> synthetic;      // (K, C, H, W)
  Tensor<S> z_s_a, z_s_c;   // (K, P, L/2) halves of the re-encoded synthetics

  static MixForward run(const Tensor<S>& batch, const MixPlan& plan,
                        const VitEncoder<S>& encoder) {
    const auto& cfg = encoder.cfg;
    plan.validate(cfg.patch_count());
    if (batch.ndim() != 4 || batch.dim(0) != plan.batch_size)
      throw ShapeError("mix forward: batch " + shape_str(batch.shape()) +
                       " does not match plan batch size " + std::to_string(plan.batch_size));
    MixForward f;
    Tensor<S> z = encoder.encode_images(batch);
    auto halves = split_embedding(z);
    f.z_a = halves.first;
    f.z_c = halves.second;

    std::vector<std::int64_t> anatomy_idx;
    std::vector<std::pair<std::int64_t, std::int64_t>> donor_picks;
    anatomy_idx.reserve(plan.entries.size());
    donor_picks.reserve(plan.entries.size());
    for (const auto& e : plan.entries) {
      anatomy_idx.push_back(e.anatomy);
      donor_picks.push_back({e.donor, e.patch});
    }
    f.anatomy_ref = gather_axis0(f.z_a, anatomy_idx);
    f.donor_rows = gather_rows(f.z_c, donor_picks);

    const std::int64_t K = static_cast<std::int64_t>(plan.entries.size());
    f.synthetic = synthesize_batch(
        f.anatomy_ref, reshape(f.donor_rows, {K, std::int64_t{1}, cfg.half_dim()}), cfg);
    Tensor<S> z_s = encoder.encode_images(f.synthetic);
    auto shalves = split_embedding(z_s);
    f.z_s_a = shalves.first;
    f.z_s_c = shalves.second;
    return f;
  }
};

namespace detail {

template <class S>
Tensor<S> anatomy_loss_from(const MixForward<S>& f) {
  return mse(f.anatomy_ref, f.z_s_a);
}

template <class S>
Tensor<S> characteristic_loss_from(const MixForward<S>& f, std::int64_t patch_count) {
  return mse(tile_rows(f.donor_rows, patch_count), f.z_s_c);
}

} // namespace detail

// Mean squared distance between each mix entry's source anatomy embedding
// and the anatomy half of the re-encoded synthetic image.
template <class S>
Tensor<S> anatomical_consistency_loss(const Tensor<S>& batch, const MixPlan& plan,
                                      const VitEncoder<S>& encoder) {
  return detail::anatomy_loss_from(MixForward<S>::run(batch, plan, encoder));
}

// Mean squared distance between each entry's donor patch characteristic and
// the characteristic of every patch of the re-encoded synthetic image.
template <class S>
Tensor<S> characteristic_consistency_loss(const Tensor<S>& batch, const MixPlan& plan,
                                          const VitEncoder<S>& encoder) {
  return detail::characteristic_loss_from(MixForward<S>::run(batch, plan, encoder),
                                          encoder.cfg.patch_count());
}

// Mean squared pixel error of the self-reconstruction (own anatomy with own
// characteristics).
template <class S>
Tensor<S> reconstruction_loss(const Tensor<S>& batch, const VitEncoder<S>& encoder) {
  return mse(batch, reconstruct_batch(batch, encoder));
}

template <class S>
struct TotalLoss {
  Tensor<S> total; // scalar, backward() propagates through both encoder passes
  LossReport<S> report;
};

template <class S>
TotalLoss<S> total_loss(const Tensor<S>& batch, const MixPlan& plan,
                        const VitEncoder<S>& encoder, const LossWeights& w) {
  MixForward<S> f = MixForward<S>::run(batch, plan, encoder);
  Tensor<S> la = detail::anatomy_loss_from(f);
  Tensor<S> lc = detail::characteristic_loss_from(f, encoder.cfg.patch_count());
  // Self-reconstruction reuses the embeddings already computed for mixing.
  Tensor<S> lr = mse(batch, synthesize_batch(f.z_a, f.z_c, encoder.cfg));

  TotalLoss<S> out;
  out.total = add(add(scale(la, w.anatomy), scale(lc, w.characteristic)),
                  scale(lr, w.reconstruction));
  out.report.anatomy = la.item();
  out.report.characteristic = lc.item();
  out.report.reconstruction = lr.item();
  out.report.total = out.total.item();
  return out;
}

} // namespace vitmix
