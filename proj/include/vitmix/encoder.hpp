// Patch-wise transformer encoder.
//
// Maps (B, P, C*PS*PS) patch tokens to (B, P, L) embeddings through pre-norm
// transformer blocks (no class token; the losses index embeddings per patch).
// The embedding is bisected column-wise into an anatomy half [0, L/2) and a
// characteristic half [L/2, L). The synthesizer's per-patch matrix product
// forces L/2 = C * PS * V for an integer hidden dimension V, which is why
// only certain embed widths are admissible.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vitmix/patches.hpp"
#include "vitmix/tensor.hpp"

namespace vitmix {

// Contracted dimension of the per-patch synthesis product. Errors out when
// the requested width cannot be factored, e.g. 1024 with C=3, PS=16.
inline std::int64_t derive_hidden_dim(std::int64_t embed_dim, std::int64_t channels,
                                      std::int64_t patch_size) {
  if (embed_dim <= 0 || channels <= 0 || patch_size <= 0)
    throw ConfigError("derive_hidden_dim: extents must be positive");
  if (embed_dim % 2 != 0)
    throw ConfigError("embed dim " + std::to_string(embed_dim) +
                      " must be even to split into anatomy/characteristic halves");
  const std::int64_t half = embed_dim / 2;
  const std::int64_t denom = channels * patch_size;
  if (half % denom != 0)
    throw ConfigError(
        "embed dim " + std::to_string(embed_dim) + " is not synthesizable: L/2 = " +
        std::to_string(half) + " must be divisible by C*PS = " + std::to_string(denom) +
        " so that the halves reshape to (C,PS,V) and (C,V,PS) matrices");
  return half / denom;
}

struct EncoderConfig {
  std::int64_t channels = 3;
  std::int64_t image_size = 32; // square images
  std::int64_t patch_size = 4;
  std::int64_t embed_dim = 96;
  std::int64_t depth = 4;
  std::int64_t heads = 4;
  double mlp_ratio = 4.0;

  std::int64_t patch_count() const {
    return (image_size / patch_size) * (image_size / patch_size);
  }
  std::int64_t token_dim() const { return channels * patch_size * patch_size; }
  std::int64_t half_dim() const { return embed_dim / 2; }
  std::int64_t hidden_v() const {
    return derive_hidden_dim(embed_dim, channels, patch_size);
  }
  std::int64_t head_dim() const { return embed_dim / heads; }
  std::int64_t mlp_dim() const {
    return static_cast<std::int64_t>(mlp_ratio * static_cast<double>(embed_dim));
  }
  PatchGeometry geometry() const { return {channels, image_size, image_size, patch_size}; }

  void validate() const {
    geometry().validate();
    hidden_v(); // throws with the divisibility explanation
    if (depth <= 0 || heads <= 0)
      throw ConfigError("encoder config: depth and heads must be positive");
    if (embed_dim % heads != 0)
      throw ConfigError("embed dim " + std::to_string(embed_dim) +
                        " must be divisible by head count " + std::to_string(heads));
  }

  // The default small model (~0.5M parameters) and a deeper/wider variant
  // used by the scaling experiment. 128 is not an admissible width at PS=4
  // (64 = 3*4*V has no integer V), hence the jump to 144.
  static EncoderConfig toy() { return EncoderConfig{}; }
  static EncoderConfig deep() {
    EncoderConfig c;
    c.embed_dim = 144;
    c.depth = 8;
    c.heads = 6;
    return c;
  }
  static EncoderConfig by_name(const std::string& name) {
    if (name == "base" || name == "toy") return toy();
    if (name == "deep") return deep();
    throw ConfigError("unknown encoder arch '" + name + "' (expected base|deep)");
  }
};

// Column bisection of (..., L) embeddings into (anatomy, characteristic).
template <class S>
std::pair<Tensor<S>, Tensor<S>> split_embedding(const Tensor<S>& z) {
  const std::int64_t l = z.shape().back();
  if (l % 2 != 0)
    throw ShapeError("split_embedding: last extent " + std::to_string(l) + " is odd");
  return {slice_last(z, 0, l / 2), slice_last(z, l / 2, l)};
}

template <class S>
struct VitEncoder {
  EncoderConfig cfg;

  Tensor<S> patch_w, patch_b; // (token_dim, L), (L)
  Tensor<S> pos;              // (P, L) learned positional table
  struct Block {
    Tensor<S> ln1_g, ln1_b;
    Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<S> ln2_g, ln2_b;
    Tensor<S> w1, b1, w2, b2;
  };
  std::vector<Block> blocks;
  Tensor<S> lnf_g, lnf_b;

  explicit VitEncoder(EncoderConfig config = EncoderConfig::toy()) : cfg(config) {
    cfg.validate();
  }

  // Weights ~ N(0, 0.02^2), biases zero, norm gains one.
  void init(Rng& rng) {
    const auto L = cfg.embed_dim;
    const auto D = cfg.token_dim();
    const auto M = cfg.mlp_dim();
    auto w = [&](Shape s) { return Tensor<S>::randn(std::move(s), rng, 0.02).set_requires_grad(); };
    auto zb = [&](Shape s) { return Tensor<S>::zeros(std::move(s)).set_requires_grad(); };
    auto ones = [&](Shape s) { return Tensor<S>::filled(std::move(s), S(1)).set_requires_grad(); };
    patch_w = w({D, L});
    patch_b = zb({L});
    pos = w({cfg.patch_count(), L});
    blocks.clear();
    for (std::int64_t i = 0; i < cfg.depth; ++i) {
      Block b;
      b.ln1_g = ones({L});
      b.ln1_b = zb({L});
      b.wq = w({L, L});
      b.bq = zb({L});
      b.wk = w({L, L});
      b.bk = zb({L});
      b.wv = w({L, L});
      b.bv = zb({L});
      b.wo = w({L, L});
      b.bo = zb({L});
      b.ln2_g = ones({L});
      b.ln2_b = zb({L});
      b.w1 = w({L, M});
      b.b1 = zb({M});
      b.w2 = w({M, L});
      b.b2 = zb({L});
      blocks.push_back(std::move(b));
    }
    lnf_g = ones({L});
    lnf_b = zb({L});
  }

  std::vector<std::pair<std::string, Tensor<S>*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<S>*>> out;
    out.push_back({"patch_w", &patch_w});
    out.push_back({"patch_b", &patch_b});
    out.push_back({"pos", &pos});
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto& b = blocks[i];
      const std::string p = "block" + std::to_string(i) + ".";
      out.push_back({p + "ln1_g", &b.ln1_g});
      out.push_back({p + "ln1_b", &b.ln1_b});
      out.push_back({p + "wq", &b.wq});
      out.push_back({p + "bq", &b.bq});
      out.push_back({p + "wk", &b.wk});
      out.push_back({p + "bk", &b.bk});
      out.push_back({p + "wv", &b.wv});
      out.push_back({p + "bv", &b.bv});
      out.push_back({p + "wo", &b.wo});
      out.push_back({p + "bo", &b.bo});
      out.push_back({p + "ln2_g", &b.ln2_g});
      out.push_back({p + "ln2_b", &b.ln2_b});
      out.push_back({p + "w1", &b.w1});
      out.push_back({p + "b1", &b.b1});
      out.push_back({p + "w2", &b.w2});
      out.push_back({p + "b2", &b.b2});
    }
    out.push_back({"lnf_g", &lnf_g});
    out.push_back({"lnf_b", &lnf_b});
    return out;
  }

  std::vector<Tensor<S>*> parameters() {
    std::vector<Tensor<S>*> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::int64_t parameter_count() {
    std::int64_t n = 0;
    for (auto* t : parameters()) n += t->numel();
    return n;
  }

  // (B, P, token_dim) -> (B, P, L). Rows of different batch entries never
  // interact: attention is confined to each image's own patches.
  Tensor<S> forward_tokens(const Tensor<S>& tokens) const {
    if (tokens.ndim() != 3 || tokens.dim(1) != cfg.patch_count() ||
        tokens.dim(2) != cfg.token_dim())
      throw GeometryError("encoder: expected tokens (B," + std::to_string(cfg.patch_count()) +
                          "," + std::to_string(cfg.token_dim()) + "), got " +
                          shape_str(tokens.shape()));
    const std::int64_t B = tokens.dim(0);
    const std::int64_t P = cfg.patch_count();
    const std::int64_t L = cfg.embed_dim;
    const std::int64_t H = cfg.heads;
    const std::int64_t Dh = cfg.head_dim();

    Tensor<S> x = add(matmul(tokens, patch_w), patch_b);
    x = add(x, pos); // (P, L) broadcast over the batch
    for (const auto& blk : blocks) {
      Tensor<S> h = add(mul(layer_norm(x, -1), blk.ln1_g), blk.ln1_b);
      Tensor<S> q = reshape(add(matmul(h, blk.wq), blk.bq), {B, P, H, Dh});
      Tensor<S> k = reshape(add(matmul(h, blk.wk), blk.bk), {B, P, H, Dh});
      Tensor<S> v = reshape(add(matmul(h, blk.wv), blk.bv), {B, P, H, Dh});
      q = transpose(q, 1, 2); // (B, H, P, Dh)
      k = transpose(k, 1, 2);
      v = transpose(v, 1, 2);
      Tensor<S> att = scale(matmul(q, transpose(k, 2, 3)),
                            1.0 / std::sqrt(static_cast<double>(Dh)));
      att = softmax(att, -1);
      Tensor<S> ctx = transpose(matmul(att, v), 1, 2); // (B, P, H, Dh)
      ctx = reshape(ctx, {B, P, L});
      x = add(x, add(matmul(ctx, blk.wo), blk.bo));

      Tensor<S> m = add(mul(layer_norm(x, -1), blk.ln2_g), blk.ln2_b);
      m = matmul(gelu(add(matmul(m, blk.w1), blk.b1)), blk.w2);
      x = add(x, add(m, blk.b2));
    }
    return add(mul(layer_norm(x, -1), lnf_g), lnf_b);
  }

  // (B, C, H, W) images -> (B, P, L).
  Tensor<S> encode_images(const Tensor<S>& images) const {
    if (images.ndim() != 4 || images.dim(1) != cfg.channels ||
        images.dim(2) != cfg.image_size || images.dim(3) != cfg.image_size)
      throw GeometryError("encoder: expected images (B," + std::to_string(cfg.channels) +
                          "," + std::to_string(cfg.image_size) + "," +
                          std::to_string(cfg.image_size) + "), got " +
                          shape_str(images.shape()));
    Tensor<S> p = patchify_batch(images, cfg.patch_size);
    return forward_tokens(reshape(p, {p.dim(0), cfg.patch_count(), cfg.token_dim()}));
  }

  // Single image (C, H, W) -> (P, L).
  Tensor<S> encode(const Tensor<S>& image) const {
    Tensor<S> z = encode_images(reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)}));
    return reshape(z, {cfg.patch_count(), cfg.embed_dim});
  }
};

} // namespace vitmix
