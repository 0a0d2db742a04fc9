// Parameter-free image synthesizer.
//
// The anatomy half of a patch embedding reshapes (row-major) to a (C, PS, V)
// matrix stack and the characteristic half to (C, V, PS); their product
// yields the PS x PS pixel block of that patch, and the patch grid assembles
// back into an image. A single characteristic row may stand in for all
// patches, which is how mixed images take on one donor patch's appearance.
// Output is linear; pixel clamping happens only at image export, never here.
#pragma once

#include "vitmix/encoder.hpp"
#include "vitmix/patches.hpp"
#include "vitmix/tensor.hpp"

namespace vitmix {

// z_a: (B, P, L/2); z_c: (B, P, L/2) or (B, 1, L/2) (single donor row per
// batch entry, broadcast to every patch). Returns (B, C, H, W).
template <class S>
Tensor<S> synthesize_batch(const Tensor<S>& z_a, const Tensor<S>& z_c,
                           const EncoderConfig& cfg) {
  const std::int64_t P = cfg.patch_count();
  const std::int64_t C = cfg.channels;
  const std::int64_t PS = cfg.patch_size;
  const std::int64_t V = cfg.hidden_v();
  if (z_a.ndim() != 3 || z_a.dim(1) != P || z_a.dim(2) != cfg.half_dim())
    throw ShapeError("synthesize: anatomy embeddings must be (B," + std::to_string(P) +
                     "," + std::to_string(cfg.half_dim()) + "), got " +
                     shape_str(z_a.shape()));
  if (z_c.ndim() != 3 || z_c.dim(2) != cfg.half_dim())
    throw ShapeError("synthesize: characteristic embeddings must have last extent " +
                     std::to_string(cfg.half_dim()) + ", got " + shape_str(z_c.shape()));
  const std::int64_t B = z_a.dim(0);
  if (z_c.dim(0) != B)
    throw ShapeError("synthesize: batch extents disagree: " + shape_str(z_a.shape()) +
                     " vs " + shape_str(z_c.shape()));

  Tensor<S> zc_full;
  if (z_c.dim(1) == P) {
    zc_full = z_c;
  } else if (z_c.dim(1) == 1) {
    zc_full = tile_rows(reshape(z_c, {B, cfg.half_dim()}), P);
  } else {
    throw ShapeError("synthesize: characteristic source must have 1 or " +
                     std::to_string(P) + " rows per image, got " +
                     std::to_string(z_c.dim(1)));
  }

  Tensor<S> za_m = reshape(z_a, {B, P, C, PS, V});
  Tensor<S> zc_m = reshape(zc_full, {B, P, C, V, PS});
  Tensor<S> blocks = matmul(za_m, zc_m); // (B, P, C, PS, PS)
  return unpatchify_batch(blocks, cfg.geometry());
}

// Single-image form: z_a (P, L/2), z_c (P, L/2) or (1, L/2). Returns (C, H, W).
template <class S>
Tensor<S> synthesize(const Tensor<S>& z_a, const Tensor<S>& z_c, const EncoderConfig& cfg) {
  if (z_a.ndim() != 2)
    throw ShapeError("synthesize: expected (P,L/2) anatomy, got " + shape_str(z_a.shape()));
  if (z_c.ndim() != 2)
    throw ShapeError("synthesize: expected (rows,L/2) characteristic, got " +
                     shape_str(z_c.shape()));
  Tensor<S> img = synthesize_batch(reshape(z_a, {1, z_a.dim(0), z_a.dim(1)}),
                                   reshape(z_c, {1, z_c.dim(0), z_c.dim(1)}), cfg);
  return reshape(img, {cfg.channels, cfg.image_size, cfg.image_size});
}

// Encode-split-synthesize round trip of a batch: (B, C, H, W) -> (B, C, H, W).
template <class S>
Tensor<S> reconstruct_batch(const Tensor<S>& images, const VitEncoder<S>& encoder) {
  Tensor<S> z = encoder.encode_images(images);
  auto [z_a, z_c] = split_embedding(z);
  return synthesize_batch(z_a, z_c, encoder.cfg);
}

template <class S>
Tensor<S> reconstruct(const Tensor<S>& image, const VitEncoder<S>& encoder) {
  const auto& c = encoder.cfg;
  Tensor<S> out = reconstruct_batch(
      reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)}), encoder);
  return reshape(out, {c.channels, c.image_size, c.image_size});
}

} // namespace vitmix
