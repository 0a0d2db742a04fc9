// Dense row-major tensors with reverse-mode automatic differentiation.
//
// Every operation records its parents and a pull-back closure on the output
// node; Tensor::backward() replays the chain rule over a topological order of
// the recorded graph. Gradients accumulate (+=) into leaf tensors until
// zero_grad() is called, matching the usual optimizer loop. Calling
// backward() twice without zeroing therefore doubles leaf gradients.
//
// The scalar type is a template parameter: double instantiations are used by
// the finite-difference test suites, float by the training builds.
//
// Reshape is a metadata reinterpretation of the same row-major buffer.
// Determinism contract: all loops below are sequential and the BLAS backend
// is pinned to one thread, so replaying a seeded computation reproduces
// results bit for bit.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <memory>
#include <mutex>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vitmix/common.hpp"
#include "vitmix/rng.hpp"

#if defined(VITMIX_HAVE_OPENBLAS)
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace vitmix {

namespace detail {

inline void init_blas_runtime() {
#if defined(VITMIX_HAVE_OPENBLAS)
  static std::once_flag once;
  std::call_once(once, [] {
    // OpenBLAS selects its kernels from the CPU model string, which
    // virtualized hosts often mask; that demotes it to a pre-SSE4 kernel.
    // Pick the widest ISA the CPU actually reports before first use.
    if (!std::getenv("OPENBLAS_CORETYPE")) {
#if defined(__x86_64__)
      if (__builtin_cpu_supports("avx512f"))
        setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 1);
      else if (__builtin_cpu_supports("avx2"))
        setenv("OPENBLAS_CORETYPE", "HASWELL", 1);
#endif
    }
    openblas_set_num_threads(1); // bit-reproducibility over parallel GEMM
  });
#endif
}

// C(m,n) = alpha * op(A) * op(B) + beta * C, row-major.
template <class S>
void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
          S alpha, const S* a, const S* b, S beta, S* c) {
#if defined(VITMIX_HAVE_OPENBLAS)
  init_blas_runtime();
  const auto Am = static_cast<int>(m), An = static_cast<int>(n), Ak = static_cast<int>(k);
  const int lda = static_cast<int>(ta ? m : k);
  const int ldb = static_cast<int>(tb ? k : n);
  if constexpr (std::is_same_v<S, float>) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
                tb ? CblasTrans : CblasNoTrans, Am, An, Ak, alpha, a, lda, b, ldb,
                beta, c, An);
  } else {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
                tb ? CblasTrans : CblasNoTrans, Am, An, Ak, alpha, a, lda, b, ldb,
                beta, c, An);
  }
#else
  // Fallback kernel; correct but unoptimized.
  if (beta == S(0)) {
    std::fill(c, c + m * n, S(0));
  } else if (beta != S(1)) {
    for (std::int64_t i = 0; i < m * n; ++i) c[i] *= beta;
  }
  auto A = [&](std::int64_t i, std::int64_t p) { return ta ? a[p * m + i] : a[i * k + p]; };
  auto B = [&](std::int64_t p, std::int64_t j) { return tb ? b[j * k + p] : b[p * n + j]; };
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t p = 0; p < k; ++p) {
      const S av = alpha * A(i, p);
      S* crow = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * B(p, j);
    }
#endif
}

} // namespace detail

inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

// Scoped "inference mode": ops executed under the guard record no graph.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class S>
struct Node {
  Shape shape;
  std::shared_ptr<std::vector<S>> val;
  std::vector<S> grad;    // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<S>>> parents;
  std::function<void()> backfn; // pulls this->grad into parents' grads

  std::int64_t numel() const { return shape_numel(shape); }
  S* data() { return val->data(); }
  const S* data() const { return val->data(); }
  S* grad_data() {
    if (grad.empty()) grad.assign(static_cast<std::size_t>(numel()), S(0));
    return grad.data();
  }
};

template <class S>
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(Shape shape) { return filled(std::move(shape), S(0)); }

  static Tensor filled(Shape shape, S value) {
    Tensor t;
    t.n_ = std::make_shared<Node<S>>();
    t.n_->shape = std::move(shape);
    t.n_->val = std::make_shared<std::vector<S>>(
        static_cast<std::size_t>(shape_numel(t.n_->shape)), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<S> data) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.n_ = std::make_shared<Node<S>>();
    t.n_->shape = std::move(shape);
    t.n_->val = std::make_shared<std::vector<S>>(std::move(data));
    return t;
  }

  static Tensor scalar(S v) { return from({}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : *t.n_->val) x = static_cast<S>(rng.normal() * stddev);
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : *t.n_->val) x = static_cast<S>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t ndim() const { return n_->shape.size(); }
  std::int64_t dim(std::size_t i) const { return n_->shape[i]; }
  std::int64_t numel() const { return n_->numel(); }

  const S* data() const { return n_->data(); }
  // Exclusive mutation handle; only optimizer/init code should use it.
  S* mutable_data() { return n_->data(); }
  const std::vector<S>& values() const { return *n_->val; }

  S item() const {
    if (numel() != 1)
      throw ShapeError("item() requires a scalar tensor, got shape " + shape_str(shape()));
    return (*n_->val)[0];
  }

  Tensor& set_requires_grad(bool rg = true) {
    n_->requires_grad = rg;
    return *this;
  }
  bool requires_grad() const { return n_->requires_grad; }

  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<S>& grad() const {
    if (n_->grad.empty())
      throw Error("tensor has no gradient (backward never reached it)");
    return n_->grad;
  }
  std::vector<S> grad_or_zeros() const {
    if (n_->grad.empty()) return std::vector<S>(static_cast<std::size_t>(numel()), S(0));
    return n_->grad;
  }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), S(0));
  }

  // Same buffer, detached from the recorded graph.
  Tensor detach() const {
    Tensor t;
    t.n_ = std::make_shared<Node<S>>();
    t.n_->shape = n_->shape;
    t.n_->val = n_->val;
    return t;
  }

  void backward() const {
    if (numel() != 1)
      throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    // Topological order via three-state DFS. A node is appended only once
    // every node on its parent side is done, so shared subgraphs (residual
    // connections, reused embeddings) receive their full gradient before
    // propagating it onward.
    enum : int { kVisiting = 1, kDone = 2 };
    std::vector<Node<S>*> order;
    std::unordered_map<Node<S>*, int> state;
    std::vector<Node<S>*> stack{n_.get()};
    while (!stack.empty()) {
      Node<S>* node = stack.back();
      const auto it = state.find(node);
      const int st = it == state.end() ? 0 : it->second;
      if (st == 0) {
        state[node] = kVisiting;
        for (auto& p : node->parents) {
          if (!p->requires_grad) continue;
          const auto pit = state.find(p.get());
          if (pit == state.end() || pit->second == 0) stack.push_back(p.get());
        }
      } else {
        if (st == kVisiting) {
          state[node] = kDone;
          order.push_back(node);
        }
        stack.pop_back();
      }
    }
    n_->grad_data()[0] += S(1);
    for (auto rit = order.rbegin(); rit != order.rend(); ++rit) {
      if ((*rit)->backfn) (*rit)->backfn();
    }
  }

  std::shared_ptr<Node<S>> node() const { return n_; }

  explicit Tensor(std::shared_ptr<Node<S>> n) : n_(std::move(n)) {}

private:
  std::shared_ptr<Node<S>> n_;
};

namespace detail {

template <class S, class BindFn>
Tensor<S> make_op(Shape shape, std::shared_ptr<std::vector<S>> val,
                  std::vector<Tensor<S>> parents, BindFn&& bind) {
  auto node = std::make_shared<Node<S>>();
  node->shape = std::move(shape);
  node->val = std::move(val);
  bool rg = false;
  if (grad_enabled()) {
    for (auto& p : parents) rg = rg || p.node()->requires_grad;
  }
  node->requires_grad = rg;
  if (rg) {
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backfn = bind(node.get());
  }
  return Tensor<S>(node);
}

template <class S>
std::shared_ptr<std::vector<S>> alloc(std::int64_t n) {
  return std::make_shared<std::vector<S>>(static_cast<std::size_t>(n));
}

// Broadcast layout for elementwise binary ops: identical shapes, or one
// operand's shape equal to a trailing suffix of the other's.
struct BinLayout {
  std::int64_t repeat;  // leading copies of the smaller operand
  std::int64_t inner;   // numel of the smaller operand
  bool b_small;         // which side broadcasts
  bool equal;
};

inline BinLayout bin_layout(const Shape& a, const Shape& b, const char* opname) {
  auto is_suffix = [](const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
  };
  if (a == b) return {1, shape_numel(a), true, true};
  if (is_suffix(a, b))
    return {shape_numel(a) / std::max<std::int64_t>(shape_numel(b), 1), shape_numel(b), true, false};
  if (is_suffix(b, a))
    return {shape_numel(b) / std::max<std::int64_t>(shape_numel(a), 1), shape_numel(a), false, false};
  throw ShapeError(std::string(opname) + ": shapes " + shape_str(a) + " and " +
                   shape_str(b) + " are not broadcast-compatible");
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class S, class Fwd, class BwdA, class BwdB>
Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b, const char* name,
                    Fwd fwd, BwdA dfa, BwdB dfb) {
  const auto lay = detail::bin_layout(a.shape(), b.shape(), name);
  const Tensor<S>& big = lay.b_small ? a : b;
  const Tensor<S>& small = lay.b_small ? b : a;
  auto out = detail::alloc<S>(big.numel());
  const S* pb = big.data();
  const S* ps = small.data();
  S* po = out->data();
  for (std::int64_t r = 0; r < lay.repeat; ++r) {
    const std::int64_t off = r * lay.inner;
    for (std::int64_t i = 0; i < lay.inner; ++i) {
      const S x = lay.b_small ? pb[off + i] : ps[i];
      const S y = lay.b_small ? ps[i] : pb[off + i];
      po[off + i] = fwd(x, y);
    }
  }
  return detail::make_op(big.shape(), out, {a, b}, [=](Node<S>* o) {
    auto an = a.node();
    auto bn = b.node();
    return std::function<void()>([=] {
      const S* g = o->grad.data();
      const S* av = an->val->data();
      const S* bv = bn->val->data();
      S* ga = an->requires_grad ? an->grad_data() : nullptr;
      S* gb = bn->requires_grad ? bn->grad_data() : nullptr;
      for (std::int64_t r = 0; r < lay.repeat; ++r) {
        const std::int64_t off = r * lay.inner;
        for (std::int64_t i = 0; i < lay.inner; ++i) {
          const std::int64_t ia = lay.b_small ? off + i : i;
          const std::int64_t ib = lay.b_small ? i : off + i;
          const S x = av[ia];
          const S y = bv[ib];
          const S gi = g[off + i];
          if (ga) ga[ia] += dfa(x, y) * gi;
          if (gb) gb[ib] += dfb(x, y) * gi;
        }
      }
    });
  });
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(a, b, "add", [](S x, S y) { return x + y; },
                   [](S, S) { return S(1); }, [](S, S) { return S(1); });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(a, b, "sub", [](S x, S y) { return x - y; },
                   [](S, S) { return S(1); }, [](S, S) { return S(-1); });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(a, b, "mul", [](S x, S y) { return x * y; },
                   [](S, S y) { return y; }, [](S x, S) { return x; });
}

template <class S, class Fwd, class Bwd>
Tensor<S> unary_op(const Tensor<S>& a, Fwd fwd, Bwd dfdx) {
  auto out = detail::alloc<S>(a.numel());
  const S* pa = a.data();
  S* po = out->data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  return detail::make_op(a.shape(), out, {a}, [=](Node<S>* o) {
    auto an = a.node();
    return std::function<void()>([=] {
      const S* g = o->grad.data();
      const S* av = an->val->data();
      const S* ov = o->val->data();
      S* ga = an->grad_data();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += dfdx(av[i], ov[i]) * g[i];
    });
  });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, double c) {
  const S cs = static_cast<S>(c);
  return unary_op(a, [cs](S x) { return x * cs; }, [cs](S, S) { return cs; });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, double c) {
  const S cs = static_cast<S>(c);
  return unary_op(a, [cs](S x) { return x + cs; }, [](S, S) { return S(1); });
}

template <class S>
Tensor<S> neg(const Tensor<S>& a) { return scale(a, -1.0); }

template <class S>
Tensor<S> square(const Tensor<S>& a) {
  return unary_op(a, [](S x) { return x * x; }, [](S x, S) { return S(2) * x; });
}

template <class S>
Tensor<S> sqrt_t(const Tensor<S>& a) {
  return unary_op(a, [](S x) { return std::sqrt(x); },
                  [](S, S y) { return S(0.5) / y; });
}

template <class S>
Tensor<S> exp_t(const Tensor<S>& a) {
  return unary_op(a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

// Exact (erf-based) GELU.
template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return unary_op(
      a,
      [](S x) {
        return static_cast<S>(0.5 * static_cast<double>(x) *
                              (1.0 + std::erf(static_cast<double>(x) * inv_sqrt2)));
      },
      [](S x, S) {
        const double xd = static_cast<double>(x);
        const double cdf = 0.5 * (1.0 + std::erf(xd * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * xd * xd);
        return static_cast<S>(cdf + xd * pdf);
      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
  const S* pa = a.data();
  S acc = 0;
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += pa[i];
  auto out = std::make_shared<std::vector<S>>(1, acc);
  return detail::make_op(Shape{}, out, {a}, [=](Node<S>* o) {
    auto an = a.node();
    return std::function<void()>([=] {
      const S g = o->grad[0];
      S* ga = an->grad_data();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g;
    });
  });
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

// Mean over the last axis: (..., D) -> (...).
template <class S>
Tensor<S> mean_last(const Tensor<S>& a) {
  if (a.ndim() < 1) throw ShapeError("mean_last: rank-0 input");
  const std::int64_t d = a.shape().back();
  const std::int64_t rows = a.numel() / d;
  auto out = detail::alloc<S>(rows);
  const S* pa = a.data();
  S* po = out->data();
  for (std::int64_t r = 0; r < rows; ++r) {
    S acc = 0;
    for (std::int64_t i = 0; i < d; ++i) acc += pa[r * d + i];
    po[r] = acc / static_cast<S>(d);
  }
  Shape oshape(a.shape().begin(), a.shape().end() - 1);
  return detail::make_op(std::move(oshape), out, {a}, [=](Node<S>* o) {
    auto an = a.node();
    return std::function<void()>([=] {
      const S* g = o->grad.data();
      S* ga = an->grad_data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const S gr = g[r] / static_cast<S>(d);
        for (std::int64_t i = 0; i < d; ++i) ga[r * d + i] += gr;
      }
    });
  });
}

// Mean squared difference over all elements; the workhorse behind every loss.
template <class S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
  return mean_all(square(sub(a, b)));
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  const std::int64_t n = a.numel();
  // Shares the value buffer; row-major data is reinterpreted in place.
  return detail::make_op(std::move(shape), a.node()->val, {a}, [=](Node<S>* o) {
    auto an = a.node();
    return std::function<void()>([=] {
      const S* g = o->grad.data();
      S* ga = an->grad_data();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  });
}

// Swap two axes (copying).
template <class S>
Tensor<S> transpose(const Tensor<S>& a, int ax0, int ax1) {
  const int nd = static_cast<int>(a.ndim());
  if (ax0 < 0) ax0 += nd;
  if (ax1 < 0) ax1 += nd;
  if (ax0 < 0 || ax0 >= nd || ax1 < 0 || ax1 >= nd)
    throw ShapeError("transpose: axis out of range for shape " + shape_str(a.shape()));
  if (ax0 == ax1) return reshape(a, a.shape());
  Shape oshape = a.shape();
  std::swap(oshape[ax0], oshape[ax1]);

  const Shape ishape = a.shape();
  auto in_strides = std::make_shared<std::vector<std::int64_t>>(nd, 1);
  for (int i = nd - 2; i >= 0; --i) (*in_strides)[i] = (*in_strides)[i + 1] * ishape[i + 1];

  const std::int64_t n = a.numel();
  auto out = detail::alloc<S>(n);
  // For each output linear index, decode output coords and read the swapped
  // input position.
  auto out_to_in = [nd, ax0, ax1, oshape, in_strides](std::int64_t oi) {
    std::int64_t rem = oi, ii = 0;
    for (int d = nd - 1; d >= 0; --d) {
      const std::int64_t c = rem % oshape[d];
      rem /= oshape[d];
      const int src = d == ax0 ? ax1 : d == ax1 ? ax0 : d;
      ii += c * (*in_strides)[src];
    }
    return ii;
  };
  {
    const S* pa = a.data();
    S* po = out->data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[out_to_in(i)];
  }
  return detail::make_op(std::move(oshape), out, {a}, [=](Node<S>* o) {
    auto an = a.node();
    return std::function<void()>([=] {
      const S* g = o->grad.data();
      S* ga = an->grad_data();
      for (std::int64_t i = 0; i < n; ++i) ga[out_to_in(i)] += g[i];
    });
  });
}

// Columns [lo, hi) of the last axis.
template <class S>
Tensor<S> slice_last(const Tensor<S>& a, std::int64_t lo, std::int64_t hi) {
  const std::int64_t d = a.shape().back();
  if (lo < 0 || hi > d || lo >= hi)
    throw ShapeError("slice_last: range [" + std::to_string(lo) + "," +
                     std::to_string(hi) + ") invalid for last extent " + std::to_string(d));
  const std::int64_t rows = a.numel() / d;
  const std::int64_t w = hi - lo;
  auto out = detail::alloc<S>(rows * w);
  const S* pa = a.data();
  S* po = out->data();
  for (std::int64_t r = 0; r < rows; ++r)
    std::memcpy(po + r * w, pa + r * d + lo, static_cast<std::size_t>(w) * sizeof(S));
  Shape oshape = a.shape();
  oshape.back() = w;
  return detail::make_op(std::move(oshape), out, {a}, [=](Node<S>* o) {
    auto an = a.node();
    return std::function<void()>([=] {
      const S* g = o->grad.data();
      S* ga = an->grad_data();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t i = 0; i < w; ++i) ga[r * d + lo + i] += g[r * w + i];
    });
  });
}

template <class S>
Tensor<S> concat_last(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != b.ndim())
    throw ShapeError("concat_last: rank mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  for (std::size_t i = 0; i + 1 < a.ndim(); ++i)
    if (a.shape()[i] != b.shape()[i])
      throw ShapeError("concat_last: leading dims differ: " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
  const std::int64_t da = a.shape().back(), db = b.shape().back();
  const std::int64_t rows = a.numel() / da;
  auto out = detail::alloc<S>(rows * (da + db));
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out->data();
  for (std::int64_t r = 0; r < rows; ++r) {
    std::memcpy(po + r * (da + db), pa + r * da, static_cast<std::size_t>(da) * sizeof(S));
    std::memcpy(po + r * (da + db) + da, pb + r * db, static_cast<std::size_t>(db) * sizeof(S));
  }
  Shape oshape = a.shape();
  oshape.back() = da + db;
  return detail::make_op(std::move(oshape), out, {a, b}, [=](Node<S>* o) {
    auto an = a.node();
    auto bn = b.node();
    return std::function<void()>([=] {
      const S* g = o->grad.data();
      S* ga = an->requires_grad ? an->grad_data() : nullptr;
      S* gb = bn->requires_grad ? bn->grad_data() : nullptr;
      for (std::int64_t r = 0; r < rows; ++r) {
        if (ga)
          for (std::int64_t i = 0; i < da; ++i) ga[r * da + i] += g[r * (da + db) + i];
        if (gb)
          for (std::int64_t i = 0; i < db; ++i) gb[r * db + i] += g[r * (da + db) + da + i];
      }
    });
  });
}

// Select entries along axis 0 (duplicates allowed); backward scatter-adds.
template <class S>
Tensor<S> gather_axis0(const Tensor<S>& a, std::vector<std::int64_t> idx) {
  if (a.ndim() < 1) throw ShapeError("gather_axis0: rank-0 input");
  const std::int64_t d0 = a.shape()[0];
  for (auto i : idx)
    if (i < 0 || i >= d0)
      throw ShapeError("gather_axis0: index " + std::to_string(i) +
                       " out of range for extent " + std::to_string(d0));
  const std::int64_t block = a.numel() / d0;
  const std::int64_t k = static_cast<std::int64_t>(idx.size());
  auto out = detail::alloc<S>(k * block);
  const S* pa = a.data();
  S* po = out->data();
  for (std::int64_t j = 0; j < k; ++j)
    std::memcpy(po + j * block, pa + idx[static_cast<std::size_t>(j)] * block,
                static_cast<std::size_t>(block) * sizeof(S));
  Shape oshape = a.shape();
  oshape[0] = k;
  auto idx_sp = std::make_shared<std::vector<std::int64_t>>(std::move(idx));
  return detail::make_op(std::move(oshape), out, {a}, [=](Node<S>* o) {
    auto an = a.node();
    return std::function<void()>([=] {
      const S* g = o->grad.data();
      S* ga = an->grad_data();
      for (std::int64_t j = 0; j < k; ++j) {
        const std::int64_t src = (*idx_sp)[static_cast<std::size_t>(j)] * block;
        for (std::int64_t i = 0; i < block; ++i) ga[src + i] += g[j * block + i];
      }
    });
  });
}

// From (B, P, D), pick one (sample, row) pair per entry -> (K, D).
template <class S>
Tensor<S> gather_rows(const Tensor<S>& a,
                      std::vector<std::pair<std::int64_t, std::int64_t>> picks) {
  if (a.ndim() != 3)
    throw ShapeError("gather_rows: expected a rank-3 tensor, got " + shape_str(a.shape()));
  const std::int64_t b = a.shape()[0], p = a.shape()[1], d = a.shape()[2];
  for (auto& [bi, pi] : picks)
    if (bi < 0 || bi >= b || pi < 0 || pi >= p)
      throw ShapeError("gather_rows: pick (" + std::to_string(bi) + "," +
                       std::to_string(pi) + ") out of range for " + shape_str(a.shape()));
  const std::int64_t k = static_cast<std::int64_t>(picks.size());
  auto out = detail::alloc<S>(k * d);
  const S* pa = a.data();
  S* po = out->data();
  for (std::int64_t j = 0; j < k; ++j) {
    const auto& [bi, pi] = picks[static_cast<std::size_t>(j)];
    std::memcpy(po + j * d, pa + (bi * p + pi) * d, static_cast<std::size_t>(d) * sizeof(S));
  }
  auto picks_sp =
      std::make_shared<std::vector<std::pair<std::int64_t, std::int64_t>>>(std::move(picks));
  return detail::make_op(Shape{k, d}, out, {a}, [=](Node<S>* o) {
    auto an = a.node();
    return std::function<void()>([=] {
      const S* g = o->grad.data();
      S* ga = an->grad_data();
      for (std::int64_t j = 0; j < k; ++j) {
        const auto& [bi, pi] = (*picks_sp)[static_cast<std::size_t>(j)];
        for (std::int64_t i = 0; i < d; ++i) ga[(bi * p + pi) * d + i] += g[j * d + i];
      }
    });
  });
}

// (K, D) -> (K, P, D): each row repeated P times; backward sums the copies.
template <class S>
Tensor<S> tile_rows(const Tensor<S>& a, std::int64_t p) {
  if (a.ndim() != 2)
    throw ShapeError("tile_rows: expected a rank-2 tensor, got " + shape_str(a.shape()));
  const std::int64_t k = a.shape()[0], d = a.shape()[1];
  auto out = detail::alloc<S>(k * p * d);
  const S* pa = a.data();
  S* po = out->data();
  for (std::int64_t j = 0; j < k; ++j)
    for (std::int64_t r = 0; r < p; ++r)
      std::memcpy(po + (j * p + r) * d, pa + j * d, static_cast<std::size_t>(d) * sizeof(S));
  return detail::make_op(Shape{k, p, d}, out, {a}, [=](Node<S>* o) {
    auto an = a.node();
    return std::function<void()>([=] {
      const S* g = o->grad.data();
      S* ga = an->grad_data();
      for (std::int64_t j = 0; j < k; ++j)
        for (std::int64_t r = 0; r < p; ++r)
          for (std::int64_t i = 0; i < d; ++i) ga[j * d + i] += g[(j * p + r) * d + i];
    });
  });
}

// Bijective element rearrangement: out[i] = in[map[i]]. Shared by the patch
// grid transforms; backward routes each gradient back through the inverse.
template <class S>
Tensor<S> apply_permutation(const Tensor<S>& a,
                            std::shared_ptr<const std::vector<std::int64_t>> map,
                            Shape out_shape) {
  if (static_cast<std::int64_t>(map->size()) != a.numel() ||
      shape_numel(out_shape) != a.numel())
    throw ShapeError("apply_permutation: map/shape size mismatch for " +
                     shape_str(a.shape()));
  const std::int64_t n = a.numel();
  auto out = detail::alloc<S>(n);
  const S* pa = a.data();
  S* po = out->data();
  const std::int64_t* m = map->data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[m[i]];
  return detail::make_op(std::move(out_shape), out, {a}, [=](Node<S>* o) {
    auto an = a.node();
    return std::function<void()>([=] {
      const S* g = o->grad.data();
      S* ga = an->grad_data();
      const std::int64_t* mm = map->data();
      for (std::int64_t i = 0; i < n; ++i) ga[mm[i]] += g[i];
    });
  });
}

// ---------------------------------------------------------------------------
// Matrix product
// ---------------------------------------------------------------------------

// matmul(a, b): contracts the last axis of a with the second-to-last of b.
//   - b rank 2: (..., n, k) x (k, m) -> (..., n, m), one flattened GEMM.
//   - equal leading dims: (L..., n, k) x (L..., k, m) -> (L..., n, m).
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw ShapeError("matmul: inputs must have rank >= 2, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  const std::int64_t k = a.shape().back();
  const std::int64_t n = a.shape()[a.ndim() - 2];

  if (b.ndim() == 2) {
    if (b.shape()[0] != k)
      throw ShapeError("matmul: inner extents disagree: " + shape_str(a.shape()) +
                       " x " + shape_str(b.shape()));
    const std::int64_t m = b.shape()[1];
    const std::int64_t rows = a.numel() / k;
    auto out = detail::alloc<S>(rows * m);
    detail::gemm<S>(false, false, rows, m, k, S(1), a.data(), b.data(), S(0), out->data());
    Shape oshape = a.shape();
    oshape.back() = m;
    return detail::make_op(std::move(oshape), out, {a, b}, [=](Node<S>* o) {
      auto an = a.node();
      auto bn = b.node();
      return std::function<void()>([=] {
        const S* g = o->grad.data();
        if (an->requires_grad)
          detail::gemm<S>(false, true, rows, k, m, S(1), g, bn->val->data(), S(1),
                          an->grad_data());
        if (bn->requires_grad)
          detail::gemm<S>(true, false, k, m, rows, S(1), an->val->data(), g, S(1),
                          bn->grad_data());
      });
    });
  }

  if (a.ndim() != b.ndim() ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
    throw ShapeError("matmul: batch extents disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  if (b.shape()[b.ndim() - 2] != k)
    throw ShapeError("matmul: inner extents disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const std::int64_t m = b.shape().back();
  const std::int64_t batches = a.numel() / (n * k);
  auto out = detail::alloc<S>(batches * n * m);
  for (std::int64_t i = 0; i < batches; ++i)
    detail::gemm<S>(false, false, n, m, k, S(1), a.data() + i * n * k,
                    b.data() + i * k * m, S(0), out->data() + i * n * m);
  Shape oshape = a.shape();
  oshape.back() = m;
  return detail::make_op(std::move(oshape), out, {a, b}, [=](Node<S>* o) {
    auto an = a.node();
    auto bn = b.node();
    return std::function<void()>([=] {
      const S* g = o->grad.data();
      S* ga = an->requires_grad ? an->grad_data() : nullptr;
      S* gb = bn->requires_grad ? bn->grad_data() : nullptr;
      for (std::int64_t i = 0; i < batches; ++i) {
        if (ga)
          detail::gemm<S>(false, true, n, k, m, S(1), g + i * n * m,
                          bn->val->data() + i * k * m, S(1), ga + i * n * k);
        if (gb)
          detail::gemm<S>(true, false, k, m, n, S(1), an->val->data() + i * n * k,
                          g + i * n * m, S(1), gb + i * k * m);
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention pieces
// ---------------------------------------------------------------------------

namespace detail {
inline int normalize_axis(int axis, std::size_t nd, const char* opname, const Shape& shape) {
  int ax = axis;
  if (ax < 0) ax += static_cast<int>(nd);
  if (ax < 0 || ax >= static_cast<int>(nd))
    throw ShapeError(std::string(opname) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(shape));
  return ax;
}
} // namespace detail

template <class S>
Tensor<S> softmax_last(const Tensor<S>& a) {
  const std::int64_t d = a.shape().back();
  const std::int64_t rows = a.numel() / d;
  auto out = detail::alloc<S>(a.numel());
  const S* pa = a.data();
  S* po = out->data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* x = pa + r * d;
    S* y = po + r * d;
    S mx = x[0];
    for (std::int64_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    S sum = 0;
    for (std::int64_t i = 0; i < d; ++i) {
      y[i] = std::exp(x[i] - mx);
      sum += y[i];
    }
    const S inv = S(1) / sum;
    for (std::int64_t i = 0; i < d; ++i) y[i] *= inv;
  }
  return detail::make_op(a.shape(), out, {a}, [=](Node<S>* o) {
    auto an = a.node();
    return std::function<void()>([=] {
      const S* g = o->grad.data();
      const S* y = o->val->data();
      S* ga = an->grad_data();
      for (std::int64_t r = 0; r < rows; ++r) {
        S dot = 0;
        for (std::int64_t i = 0; i < d; ++i) dot += g[r * d + i] * y[r * d + i];
        for (std::int64_t i = 0; i < d; ++i)
          ga[r * d + i] += y[r * d + i] * (g[r * d + i] - dot);
      }
    });
  });
}

template <class S>
Tensor<S> softmax(const Tensor<S>& a, int axis) {
  const int ax = detail::normalize_axis(axis, a.ndim(), "softmax", a.shape());
  if (ax == static_cast<int>(a.ndim()) - 1) return softmax_last(a);
  const int last = static_cast<int>(a.ndim()) - 1;
  return transpose(softmax_last(transpose(a, ax, last)), ax, last);
}

// Normalizes each slice along the axis to zero mean / unit variance
// (biased variance, epsilon inside the root). Affine parameters are applied
// by the caller so the raw op keeps the mean-0/var-1 contract testable.
template <class S>
Tensor<S> layer_norm_last(const Tensor<S>& a, double eps = 1e-5) {
  const std::int64_t d = a.shape().back();
  const std::int64_t rows = a.numel() / d;
  auto out = detail::alloc<S>(a.numel());
  auto inv_sigma = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows));
  const S* pa = a.data();
  S* po = out->data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* x = pa + r * d;
    S mean = 0;
    for (std::int64_t i = 0; i < d; ++i) mean += x[i];
    mean /= static_cast<S>(d);
    S var = 0;
    for (std::int64_t i = 0; i < d; ++i) {
      const S c = x[i] - mean;
      var += c * c;
    }
    var /= static_cast<S>(d);
    const S is = S(1) / std::sqrt(var + static_cast<S>(eps));
    (*inv_sigma)[static_cast<std::size_t>(r)] = is;
    for (std::int64_t i = 0; i < d; ++i) po[r * d + i] = (x[i] - mean) * is;
  }
  return detail::make_op(a.shape(), out, {a}, [=](Node<S>* o) {
    auto an = a.node();
    return std::function<void()>([=] {
      const S* g = o->grad.data();
      const S* y = o->val->data();
      S* ga = an->grad_data();
      for (std::int64_t r = 0; r < rows; ++r) {
        S gmean = 0, gydot = 0;
        for (std::int64_t i = 0; i < d; ++i) {
          gmean += g[r * d + i];
          gydot += g[r * d + i] * y[r * d + i];
        }
        gmean /= static_cast<S>(d);
        gydot /= static_cast<S>(d);
        const S is = (*inv_sigma)[static_cast<std::size_t>(r)];
        for (std::int64_t i = 0; i < d; ++i)
          ga[r * d + i] += is * (g[r * d + i] - gmean - y[r * d + i] * gydot);
      }
    });
  });
}

template <class S>
Tensor<S> layer_norm(const Tensor<S>& a, int axis, double eps = 1e-5) {
  const int ax = detail::normalize_axis(axis, a.ndim(), "layer_norm", a.shape());
  if (ax == static_cast<int>(a.ndim()) - 1) return layer_norm_last(a, eps);
  const int last = static_cast<int>(a.ndim()) - 1;
  return transpose(layer_norm_last(transpose(a, ax, last), eps), ax, last);
}

// Mean negative log-likelihood of the labeled class under softmax(logits).
template <class S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2)
    throw ShapeError("softmax_cross_entropy: logits must be rank 2, got " +
                     shape_str(logits.shape()));
  const std::int64_t n = logits.shape()[0], kcls = logits.shape()[1];
  if (static_cast<std::int64_t>(labels.size()) != n)
    throw ShapeError("softmax_cross_entropy: label count mismatch");
  for (int l : labels)
    if (l < 0 || l >= kcls) throw ShapeError("softmax_cross_entropy: label out of range");
  auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n * kcls));
  const S* x = logits.data();
  S loss = 0;
  for (std::int64_t r = 0; r < n; ++r) {
    S mx = x[r * kcls];
    for (std::int64_t i = 1; i < kcls; ++i) mx = std::max(mx, x[r * kcls + i]);
    S sum = 0;
    for (std::int64_t i = 0; i < kcls; ++i) {
      const S e = std::exp(x[r * kcls + i] - mx);
      (*probs)[static_cast<std::size_t>(r * kcls + i)] = e;
      sum += e;
    }
    const S inv = S(1) / sum;
    for (std::int64_t i = 0; i < kcls; ++i)
      (*probs)[static_cast<std::size_t>(r * kcls + i)] *= inv;
    loss -= std::log((*probs)[static_cast<std::size_t>(r * kcls + labels[static_cast<std::size_t>(r)])]);
  }
  auto out = std::make_shared<std::vector<S>>(1, loss / static_cast<S>(n));
  auto labels_sp = std::make_shared<std::vector<int>>(labels);
  return detail::make_op(Shape{}, out, {logits}, [=](Node<S>* o) {
    auto ln = logits.node();
    return std::function<void()>([=] {
      const S g = o->grad[0] / static_cast<S>(n);
      S* gl = ln->grad_data();
      for (std::int64_t r = 0; r < n; ++r) {
        for (std::int64_t i = 0; i < kcls; ++i) {
          S p = (*probs)[static_cast<std::size_t>(r * kcls + i)];
          if (i == (*labels_sp)[static_cast<std::size_t>(r)]) p -= S(1);
          gl[r * kcls + i] += g * p;
        }
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Convolution building blocks (im2col form, for the downstream classifier)
// ---------------------------------------------------------------------------

// (B, C, H, W) -> (B, OH*OW, C*k*k); entries outside the padded border read 0.
template <class S>
Tensor<S> im2col(const Tensor<S>& a, int k, int stride, int pad) {
  if (a.ndim() != 4)
    throw ShapeError("im2col: expected (B,C,H,W), got " + shape_str(a.shape()));
  const std::int64_t b = a.shape()[0], c = a.shape()[1], h = a.shape()[2], w = a.shape()[3];
  const std::int64_t oh = (h + 2 * pad - k) / stride + 1;
  const std::int64_t ow = (w + 2 * pad - k) / stride + 1;
  const std::int64_t cols = c * k * k;
  // Per-image gather map, shared across the batch; -1 marks padding.
  auto map = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(oh * ow * cols));
  {
    std::int64_t idx = 0;
    for (std::int64_t oy = 0; oy < oh; ++oy)
      for (std::int64_t ox = 0; ox < ow; ++ox)
        for (std::int64_t ci = 0; ci < c; ++ci)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const std::int64_t iy = oy * stride + ky - pad;
              const std::int64_t ix = ox * stride + kx - pad;
              (*map)[static_cast<std::size_t>(idx++)] =
                  (iy < 0 || iy >= h || ix < 0 || ix >= w) ? -1 : (ci * h + iy) * w + ix;
            }
  }
  const std::int64_t per_img_in = c * h * w;
  const std::int64_t per_img_out = oh * ow * cols;
  auto out = detail::alloc<S>(b * per_img_out);
  const S* pa = a.data();
  S* po = out->data();
  for (std::int64_t bi = 0; bi < b; ++bi) {
    const S* src = pa + bi * per_img_in;
    S* dst = po + bi * per_img_out;
    for (std::int64_t i = 0; i < per_img_out; ++i) {
      const std::int64_t m = (*map)[static_cast<std::size_t>(i)];
      dst[i] = m < 0 ? S(0) : src[m];
    }
  }
  return detail::make_op(Shape{b, oh * ow, cols}, out, {a}, [=](Node<S>* o) {
    auto an = a.node();
    return std::function<void()>([=] {
      const S* g = o->grad.data();
      S* ga = an->grad_data();
      for (std::int64_t bi = 0; bi < b; ++bi) {
        const S* gsrc = g + bi * per_img_out;
        S* gdst = ga + bi * per_img_in;
        for (std::int64_t i = 0; i < per_img_out; ++i) {
          const std::int64_t m = (*map)[static_cast<std::size_t>(i)];
          if (m >= 0) gdst[m] += gsrc[i];
        }
      }
    });
  });
}

// 2x2 average pooling, stride 2.
template <class S>
Tensor<S> avg_pool2(const Tensor<S>& a) {
  if (a.ndim() != 4)
    throw ShapeError("avg_pool2: expected (B,C,H,W), got " + shape_str(a.shape()));
  const std::int64_t b = a.shape()[0], c = a.shape()[1], h = a.shape()[2], w = a.shape()[3];
  if (h % 2 || w % 2) throw ShapeError("avg_pool2: spatial dims must be even");
  const std::int64_t oh = h / 2, ow = w / 2;
  auto out = detail::alloc<S>(b * c * oh * ow);
  const S* pa = a.data();
  S* po = out->data();
  for (std::int64_t bc = 0; bc < b * c; ++bc) {
    const S* src = pa + bc * h * w;
    S* dst = po + bc * oh * ow;
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t x = 0; x < ow; ++x)
        dst[y * ow + x] = (src[(2 * y) * w + 2 * x] + src[(2 * y) * w + 2 * x + 1] +
                           src[(2 * y + 1) * w + 2 * x] + src[(2 * y + 1) * w + 2 * x + 1]) *
                          S(0.25);
  }
  return detail::make_op(Shape{b, c, oh, ow}, out, {a}, [=](Node<S>* o) {
    auto an = a.node();
    return std::function<void()>([=] {
      const S* g = o->grad.data();
      S* ga = an->grad_data();
      for (std::int64_t bc = 0; bc < b * c; ++bc) {
        const S* gsrc = g + bc * oh * ow;
        S* gdst = ga + bc * h * w;
        for (std::int64_t y = 0; y < oh; ++y)
          for (std::int64_t x = 0; x < ow; ++x) {
            const S q = gsrc[y * ow + x] * S(0.25);
            gdst[(2 * y) * w + 2 * x] += q;
            gdst[(2 * y) * w + 2 * x + 1] += q;
            gdst[(2 * y + 1) * w + 2 * x] += q;
            gdst[(2 * y + 1) * w + 2 * x + 1] += q;
          }
      }
    });
  });
}

} // namespace vitmix
