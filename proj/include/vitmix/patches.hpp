// Non-overlapping patch partition of images and its exact inverse.
//
// Patch order is frozen as row-major over the patch grid (left to right, top
// to bottom); checkpoints depend on this ordering, so it must never change.
#pragma once

#include <memory>

#include "vitmix/tensor.hpp"

namespace vitmix {

struct PatchGeometry {
  std::int64_t channels;
  std::int64_t height;
  std::int64_t width;
  std::int64_t patch;

  std::int64_t grid_h() const { return height / patch; }
  std::int64_t grid_w() const { return width / patch; }
  std::int64_t patch_count() const { return grid_h() * grid_w(); }

  void validate() const {
    if (channels <= 0 || height <= 0 || width <= 0 || patch <= 0)
      throw GeometryError("patch geometry: all extents must be positive");
    if (height % patch != 0 || width % patch != 0)
      throw GeometryError("patch geometry: image " + std::to_string(height) + "x" +
                          std::to_string(width) + " is not divisible by patch size " +
                          std::to_string(patch));
  }
};

namespace detail {

// Map from (P, C, PS, PS) linear index to (C, H, W) linear index.
inline std::shared_ptr<const std::vector<std::int64_t>>
patchify_map(const PatchGeometry& g) {
  auto map = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(g.channels * g.height * g.width));
  std::int64_t idx = 0;
  for (std::int64_t p = 0; p < g.patch_count(); ++p) {
    const std::int64_t gy = p / g.grid_w();
    const std::int64_t gx = p % g.grid_w();
    for (std::int64_t c = 0; c < g.channels; ++c)
      for (std::int64_t py = 0; py < g.patch; ++py)
        for (std::int64_t px = 0; px < g.patch; ++px) {
          const std::int64_t y = gy * g.patch + py;
          const std::int64_t x = gx * g.patch + px;
          (*map)[static_cast<std::size_t>(idx++)] = (c * g.height + y) * g.width + x;
        }
  }
  return map;
}

inline std::shared_ptr<const std::vector<std::int64_t>>
unpatchify_map(const PatchGeometry& g) {
  auto fwd = patchify_map(g);
  auto inv = std::make_shared<std::vector<std::int64_t>>(fwd->size());
  for (std::size_t i = 0; i < fwd->size(); ++i)
    (*inv)[static_cast<std::size_t>((*fwd)[i])] = static_cast<std::int64_t>(i);
  return inv;
}

} // namespace detail

// (C, H, W) -> (P, C, PS, PS). Pure rearrangement, differentiable.
template <class S>
Tensor<S> patchify(const Tensor<S>& image, std::int64_t patch_size) {
  if (image.ndim() != 3)
    throw GeometryError("patchify: expected (C,H,W), got " + shape_str(image.shape()));
  PatchGeometry g{image.dim(0), image.dim(1), image.dim(2), patch_size};
  g.validate();
  return apply_permutation(image, detail::patchify_map(g),
                           Shape{g.patch_count(), g.channels, g.patch, g.patch});
}

// (B, C, H, W) -> (B, P, C, PS, PS).
template <class S>
Tensor<S> patchify_batch(const Tensor<S>& images, std::int64_t patch_size) {
  if (images.ndim() != 4)
    throw GeometryError("patchify_batch: expected (B,C,H,W), got " +
                        shape_str(images.shape()));
  PatchGeometry g{images.dim(1), images.dim(2), images.dim(3), patch_size};
  g.validate();
  const std::int64_t b = images.dim(0);
  auto per = detail::patchify_map(g);
  const std::int64_t n = static_cast<std::int64_t>(per->size());
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(b * n));
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      (*map)[static_cast<std::size_t>(i * n + j)] = i * n + (*per)[static_cast<std::size_t>(j)];
  return apply_permutation(images, map,
                           Shape{b, g.patch_count(), g.channels, g.patch, g.patch});
}

// Exact inverse of patchify; the geometry argument restores H and W.
template <class S>
Tensor<S> unpatchify(const Tensor<S>& patches, const PatchGeometry& g) {
  g.validate();
  if (patches.ndim() != 4)
    throw GeometryError("unpatchify: expected (P,C,PS,PS), got " +
                        shape_str(patches.shape()));
  if (patches.dim(0) != g.patch_count() || patches.dim(1) != g.channels ||
      patches.dim(2) != g.patch || patches.dim(3) != g.patch)
    throw GeometryError("unpatchify: patches " + shape_str(patches.shape()) +
                        " inconsistent with geometry " + std::to_string(g.channels) + "x" +
                        std::to_string(g.height) + "x" + std::to_string(g.width) +
                        " ps=" + std::to_string(g.patch));
  return apply_permutation(patches, detail::unpatchify_map(g),
                           Shape{g.channels, g.height, g.width});
}

template <class S>
Tensor<S> unpatchify_batch(const Tensor<S>& patches, const PatchGeometry& g) {
  g.validate();
  if (patches.ndim() != 5)
    throw GeometryError("unpatchify_batch: expected (B,P,C,PS,PS), got " +
                        shape_str(patches.shape()));
  if (patches.dim(1) != g.patch_count() || patches.dim(2) != g.channels ||
      patches.dim(3) != g.patch || patches.dim(4) != g.patch)
    throw GeometryError("unpatchify_batch: patches " + shape_str(patches.shape()) +
                        " inconsistent with geometry");
  const std::int64_t b = patches.dim(0);
  auto per = detail::unpatchify_map(g);
  const std::int64_t n = static_cast<std::int64_t>(per->size());
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(b * n));
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      (*map)[static_cast<std::size_t>(i * n + j)] = i * n + (*per)[static_cast<std::size_t>(j)];
  return apply_permutation(patches, map, Shape{b, g.channels, g.height, g.width});
}

} // namespace vitmix
