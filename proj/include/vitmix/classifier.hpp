// Small convolutional classifier used by the augmentation comparison.
// Three conv/pool stages and a linear head, ~53k parameters.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vitmix/tensor.hpp"

namespace vitmix {

// x: (B, Cin, H, W), w: (Cin*k*k, Cout), 3x3 same-padding convolution.
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int k,
                 int stride, int pad) {
  const std::int64_t B = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::int64_t oh = (H + 2 * pad - k) / stride + 1;
  const std::int64_t ow = (W + 2 * pad - k) / stride + 1;
  const std::int64_t cout = w.dim(1);
  Tensor<S> cols = im2col(x, k, stride, pad);       // (B, oh*ow, Cin*k*k)
  Tensor<S> y = add(matmul(cols, w), b);            // (B, oh*ow, Cout)
  return reshape(transpose(y, 1, 2), {B, cout, oh, ow});
}

template <class S>
struct SmallCnn {
  static constexpr int kC1 = 24, kC2 = 48, kC3 = 96, kClasses = 2;

  Tensor<S> w1, b1, w2, b2, w3, b3, wf, bf;

  void init(Rng& rng) {
    auto conv_w = [&](std::int64_t fan_in, std::int64_t cout) {
      return Tensor<S>::randn({fan_in, cout}, rng, std::sqrt(2.0 / static_cast<double>(fan_in)))
          .set_requires_grad();
    };
    w1 = conv_w(3 * 9, kC1);
    b1 = Tensor<S>::zeros({kC1}).set_requires_grad();
    w2 = conv_w(kC1 * 9, kC2);
    b2 = Tensor<S>::zeros({kC2}).set_requires_grad();
    w3 = conv_w(kC2 * 9, kC3);
    b3 = Tensor<S>::zeros({kC3}).set_requires_grad();
    wf = conv_w(kC3, kClasses);
    bf = Tensor<S>::zeros({kClasses}).set_requires_grad();
  }

  std::vector<std::pair<std::string, Tensor<S>*>> named_parameters() {
    return {{"w1", &w1}, {"b1", &b1}, {"w2", &w2}, {"b2", &b2},
            {"w3", &w3}, {"b3", &b3}, {"wf", &wf}, {"bf", &bf}};
  }
  std::vector<Tensor<S>*> parameters() {
    std::vector<Tensor<S>*> out;
    for (auto& [n, t] : named_parameters()) out.push_back(t);
    return out;
  }
  std::int64_t parameter_count() {
    std::int64_t n = 0;
    for (auto* t : parameters()) n += t->numel();
    return n;
  }

  // (B, 3, 32, 32) -> logits (B, 2).
  Tensor<S> forward(const Tensor<S>& images) const {
    Tensor<S> x = avg_pool2(gelu(conv2d(images, w1, b1, 3, 1, 1))); // (B,24,16,16)
    x = avg_pool2(gelu(conv2d(x, w2, b2, 3, 1, 1)));                // (B,48,8,8)
    x = avg_pool2(gelu(conv2d(x, w3, b3, 3, 1, 1)));                // (B,96,4,4)
    const std::int64_t B = x.dim(0);
    x = mean_last(reshape(x, {B, kC3, x.dim(2) * x.dim(3)}));       // (B,96)
    return add(matmul(x, wf), bf);
  }
};

} // namespace vitmix
