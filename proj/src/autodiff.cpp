// SPDX-License-Identifier: Apache-2.0
#include "vptta/autodiff.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "vptta/fft.hpp"

namespace vptta::ad {

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

Tensor Var::grad() const {
  if (node_->grad.empty()) return Tensor::zeros(node_->value.shape());
  return node_->grad;
}

Tensor& grad_buffer(Node& node) {
  if (node.grad.empty()) node.grad = Tensor::zeros(node.value.shape());
  return node.grad;
}

Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward_fn);
  }
  return Var(std::move(node));
}

void backward(const Var& loss) {
  if (loss.value().size() != 1) {
    throw ContractViolation("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  grad_buffer(*loss.node())[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& n = **it;
    if (n.backward && !n.grad.empty()) n.backward(n);
  }
}

namespace {

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

// `dfdx(x, y, g)` maps input, output and upstream gradient to the input gradient.
template <class F, class D>
Var unary(const Var& a, F&& forward, D dfdx) {
  Tensor out(a.shape());
  const auto& in = a.value();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
  return make_result(std::move(out), {a}, [dfdx](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = grad_buffer(p);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += dfdx(p.value[i], self.value[i], self.grad[i]);
  });
}

void require_channel_vector(const Var& x, const Var& v, const char* what) {
  if (v.value().rank() != 1 || x.value().rank() == 0 || v.value().size() != x.shape().back()) {
    throw ConfigError(std::string(what) + ": channel vector " + shape_str(v.shape()) + " does not match " +
                      shape_str(x.shape()));
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node& p = parent(self, k);
      if (!p.requires_grad) continue;
      auto& g = grad_buffer(p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node& p = parent(self, k);
      if (!p.requires_grad) continue;
      const double sign = k == 0 ? 1.0 : -1.0;
      auto& g = grad_buffer(p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = grad_buffer(pa);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = grad_buffer(pb);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "div");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = grad_buffer(pa);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = grad_buffer(pb);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.value[i] / pb.value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double, double g) { return s * g; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double, double g) { return g; });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double, double g) { return 2.0 * x * g; });
}

Var sqrt(const Var& a) {
  return unary(a, [](double x) { return std::sqrt(x); }, [](double, double y, double g) { return g / (2.0 * y); });
}

Var abs(const Var& a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double, double g) { return x > 0.0 ? g : (x < 0.0 ? -g : 0.0); });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double, double g) { return x > 0.0 ? g : 0.0; });
}

Var sigmoid(const Var& a) {
  return unary(
      a, [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y, double g) { return g * y * (1.0 - y); });
}

Var sum(const Var& a) {
  return make_result(Tensor::scalar(a.value().sum()), {a}, [](Node& self) {
    auto& g = grad_buffer(parent(self, 0));
    for (auto& v : g.data()) v += self.grad[0];
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return make_result(Tensor::scalar(a.value().sum() / n), {a}, [n](Node& self) {
    auto& g = grad_buffer(parent(self, 0));
    for (auto& v : g.data()) v += self.grad[0] / n;
  });
}

Var channel_mean(const Var& x) {
  const auto& in = x.value();
  const std::size_t c = in.shape().back();
  const std::size_t m = in.size() / c;
  Tensor out(Shape{c});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t k = 0; k < c; ++k) out[k] += in[r * c + k];
  for (auto& v : out.data()) v /= static_cast<double>(m);
  return make_result(std::move(out), {x}, [c, m](Node& self) {
    auto& g = grad_buffer(parent(self, 0));
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t k = 0; k < c; ++k) g[r * c + k] += self.grad[k] * inv;
  });
}

namespace {

// Shared body of the four broadcast ops. `op` is one of '+', '-', '*', '/'.
template <char op>
Var channel_broadcast(const Var& x, const Var& v, const char* what) {
  require_channel_vector(x, v, what);
  const std::size_t c = v.value().size();
  const std::size_t m = x.value().size() / c;
  Tensor out = x.value();
  const auto& vv = v.value();
  for (std::size_t r = 0; r < m; ++r) {
    double* row = out.data().data() + r * c;
    for (std::size_t k = 0; k < c; ++k) {
      if constexpr (op == '+') row[k] += vv[k];
      if constexpr (op == '-') row[k] -= vv[k];
      if constexpr (op == '*') row[k] *= vv[k];
      if constexpr (op == '/') row[k] /= vv[k];
    }
  }
  return make_result(std::move(out), {x, v}, [c, m](Node& self) {
    Node& px = parent(self, 0);
    Node& pv = parent(self, 1);
    const double* G = self.grad.data().data();
    if (px.requires_grad) {
      double* gx = grad_buffer(px).data().data();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t k = 0; k < c; ++k) {
          const double g = G[r * c + k];
          if constexpr (op == '+' || op == '-') gx[r * c + k] += g;
          if constexpr (op == '*') gx[r * c + k] += g * pv.value[k];
          if constexpr (op == '/') gx[r * c + k] += g / pv.value[k];
        }
    }
    if (pv.requires_grad) {
      auto& gv = grad_buffer(pv);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t k = 0; k < c; ++k) {
          const double g = G[r * c + k];
          if constexpr (op == '+') gv[k] += g;
          if constexpr (op == '-') gv[k] -= g;
          if constexpr (op == '*') gv[k] += g * px.value[r * c + k];
          if constexpr (op == '/') gv[k] -= g * self.value[r * c + k] / pv.value[k];
        }
    }
  });
}

}  // namespace

Var add_c(const Var& x, const Var& v) { return channel_broadcast<'+'>(x, v, "add_c"); }
Var sub_c(const Var& x, const Var& v) { return channel_broadcast<'-'>(x, v, "sub_c"); }
Var mul_c(const Var& x, const Var& v) { return channel_broadcast<'*'>(x, v, "mul_c"); }
Var div_c(const Var& x, const Var& v) { return channel_broadcast<'/'>(x, v, "div_c"); }

Var channel_var(const Var& x, const Var& mean) {
  require_channel_vector(x, mean, "channel_var");
  const std::size_t c = mean.value().size();
  const std::size_t m = x.value().size() / c;
  const auto& in = x.value();
  const auto& mu = mean.value();
  Tensor out(Shape{c});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t k = 0; k < c; ++k) {
      const double d = in[r * c + k] - mu[k];
      out[k] += d * d;
    }
  for (auto& v : out.data()) v /= static_cast<double>(m);
  return make_result(std::move(out), {x, mean}, [c, m](Node& self) {
    Node& px = parent(self, 0);
    Node& pm = parent(self, 1);
    const double scale = 2.0 / static_cast<double>(m);
    std::vector<double> dmu(c, 0.0);
    double* gx = px.requires_grad ? grad_buffer(px).data().data() : nullptr;
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t k = 0; k < c; ++k) {
        const double t = scale * self.grad[k] * (px.value[r * c + k] - pm.value[k]);
        if (gx) gx[r * c + k] += t;
        dmu[k] -= t;
      }
    if (pm.requires_grad) {
      auto& gm = grad_buffer(pm);
      for (std::size_t k = 0; k < c; ++k) gm[k] += dmu[k];
    }
  });
}

Var normalize(const Var& x, const Var& mean, const Var& sigma, const Var& gamma, const Var& beta) {
  for (const Var* v : {&mean, &sigma, &gamma, &beta}) require_channel_vector(x, *v, "normalize");
  const std::size_t c = mean.value().size();
  const std::size_t m = x.value().size() / c;
  Tensor out(x.shape());
  {
    const auto& in = x.value();
    const auto &mu = mean.value(), &sd = sigma.value(), &ga = gamma.value(), &be = beta.value();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t k = 0; k < c; ++k) out[r * c + k] = (in[r * c + k] - mu[k]) / sd[k] * ga[k] + be[k];
  }
  return make_result(std::move(out), {x, mean, sigma, gamma, beta}, [c, m](Node& self) {
    Node& px = parent(self, 0);
    Node& pm = parent(self, 1);
    Node& ps = parent(self, 2);
    Node& pg = parent(self, 3);
    Node& pb = parent(self, 4);
    const auto &mu = pm.value, &sd = ps.value, &ga = pg.value;
    std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
    double* gx = px.requires_grad ? grad_buffer(px).data().data() : nullptr;
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t k = 0; k < c; ++k) {
        const double g = self.grad[r * c + k];
        const double xhat = (px.value[r * c + k] - mu[k]) / sd[k];
        sum_g[k] += g;
        sum_gx[k] += g * xhat;
        if (gx) gx[r * c + k] += g * ga[k] / sd[k];
      }
    for (std::size_t k = 0; k < c; ++k) {
      if (pm.requires_grad) grad_buffer(pm)[k] -= sum_g[k] * ga[k] / sd[k];
      if (ps.requires_grad) grad_buffer(ps)[k] -= sum_gx[k] * ga[k] / sd[k];
      if (pg.requires_grad) grad_buffer(pg)[k] += sum_gx[k];
      if (pb.requires_grad) grad_buffer(pb)[k] += sum_g[k];
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  return make_result(a.value().reshaped(std::move(shape)), {a}, [](Node& self) {
    auto& g = grad_buffer(parent(self, 0));
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

namespace {

struct ConvGeometry {
  std::size_t n, h, w, ci, kh, kw, co, stride, pad, oh, ow;
  std::size_t patch() const { return kh * kw * ci; }
  std::size_t rows() const { return n * oh * ow; }
};

constexpr std::size_t kConvBlock = 256;

// Unfolds output pixels [r0, r1) of NHWC input into a (r1 - r0, KH*KW*Cin)
// patch matrix whose column order matches the (kh, kw, Cin, Cout) kernel.
void im2col(const ConvGeometry& g, const double* x, std::size_t r0, std::size_t r1, double* col) {
  const std::size_t k = g.patch();
  for (std::size_t r = r0; r < r1; ++r) {
    const std::size_t b = r / (g.oh * g.ow);
    const std::size_t oy = (r / g.ow) % g.oh;
    const std::size_t ox = r % g.ow;
    double* row = col + (r - r0) * k;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
        double* dst = row + (ky * g.kw + kx) * g.ci;
        if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.h) || ix >= static_cast<std::ptrdiff_t>(g.w)) {
          std::fill(dst, dst + g.ci, 0.0);
        } else {
          const double* src = x + ((b * g.h + iy) * g.w + ix) * g.ci;
          std::copy(src, src + g.ci, dst);
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* col, std::size_t r0, std::size_t r1, double* x) {
  const std::size_t k = g.patch();
  for (std::size_t r = r0; r < r1; ++r) {
    const std::size_t b = r / (g.oh * g.ow);
    const std::size_t oy = (r / g.ow) % g.oh;
    const std::size_t ox = r % g.ow;
    const double* row = col + (r - r0) * k;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
      if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
        const double* src = row + (ky * g.kw + kx) * g.ci;
        double* dst = x + ((b * g.h + iy) * g.w + ix) * g.ci;
        for (std::size_t i = 0; i < g.ci; ++i) dst[i] += src[i];
      }
    }
  }
}

// C (m x n) = alpha * op(A) * op(B) + beta * C, row-major.
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
          const double* b, std::size_t ldb, double beta, double* c, std::size_t ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), 1.0, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(ldc));
}

}  // namespace

Var conv2d(const Var& x, const Var& kernel, const Var* bias, std::size_t stride, std::size_t pad) {
  const auto& in = x.value();
  const auto& w = kernel.value();
  if (in.rank() != 4 || w.rank() != 4 || w.dim(2) != in.dim(3) || stride == 0) {
    throw ConfigError("conv2d: input " + shape_str(in.shape()) + " incompatible with kernel " + shape_str(w.shape()));
  }
  if (bias && (bias->value().rank() != 1 || bias->value().size() != w.dim(3))) {
    throw ConfigError("conv2d: bias must have Cout entries");
  }
  ConvGeometry g{in.dim(0), in.dim(1), in.dim(2), in.dim(3), w.dim(0), w.dim(1), w.dim(3), stride, pad, 0, 0};
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw) throw ConfigError("conv2d: kernel larger than padded input");
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;

  const std::size_t rows = g.rows(), k = g.patch();
  Tensor out({g.n, g.oh, g.ow, g.co});
  double* Y = out.data().data();
  if (bias) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < g.co; ++o) Y[r * g.co + o] = bias->value()[o];
  }
  std::vector<double> col(kConvBlock * k);
  for (std::size_t r0 = 0; r0 < rows; r0 += kConvBlock) {
    const std::size_t r1 = std::min(rows, r0 + kConvBlock);
    im2col(g, in.data().data(), r0, r1, col.data());
    gemm(false, false, r1 - r0, g.co, k, col.data(), k, w.data().data(), g.co, bias ? 1.0 : 0.0, Y + r0 * g.co,
         g.co);
  }

  std::vector<Var> parents{x, kernel};
  if (bias) parents.push_back(*bias);
  const bool has_bias = bias != nullptr;
  return make_result(std::move(out), std::move(parents), [g, has_bias](Node& self) {
    Node& px = parent(self, 0);
    Node& pk = parent(self, 1);
    const std::size_t rows = g.rows(), k = g.patch();
    const double* G = self.grad.data().data();
    if (has_bias) {
      if (Node& pb = parent(self, 2); pb.requires_grad) {
        auto& gb = grad_buffer(pb);
        for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % g.co] += G[i];
      }
    }
    double* GK = pk.requires_grad ? grad_buffer(pk).data().data() : nullptr;
    double* GX = px.requires_grad ? grad_buffer(px).data().data() : nullptr;
    if (!GK && !GX) return;
    std::vector<double> col(kConvBlock * k);
    for (std::size_t r0 = 0; r0 < rows; r0 += kConvBlock) {
      const std::size_t r1 = std::min(rows, r0 + kConvBlock);
      const double* Gb = G + r0 * g.co;
      if (GK) {
        im2col(g, px.value.data().data(), r0, r1, col.data());
        gemm(true, false, k, g.co, r1 - r0, col.data(), k, Gb, g.co, 1.0, GK, g.co);
      }
      if (GX) {
        gemm(false, true, r1 - r0, k, g.co, Gb, g.co, pk.value.data().data(), g.co, 0.0, col.data(), k);
        col2im_add(g, col.data(), r0, r1, GX);
      }
    }
  });
}

Var upsample2x(const Var& x) {
  const auto& in = x.value();
  if (in.rank() != 4) throw ConfigError("upsample2x expects NHWC input");
  const std::size_t n = in.dim(0), h = in.dim(1), w = in.dim(2), c = in.dim(3);
  Tensor out({n, 2 * h, 2 * w, c});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        for (std::size_t k = 0; k < c; ++k)
          out[((b * 2 * h + y) * 2 * w + xx) * c + k] = in[((b * h + y / 2) * w + xx / 2) * c + k];
  return make_result(std::move(out), {x}, [=](Node& self) {
    auto& g = grad_buffer(parent(self, 0));
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t xx = 0; xx < 2 * w; ++xx)
          for (std::size_t k = 0; k < c; ++k)
            g[((b * h + y / 2) * w + xx / 2) * c + k] += self.grad[((b * 2 * h + y) * 2 * w + xx) * c + k];
  });
}

Var bce_with_logits(const Var& logits, const Tensor& target) {
  require_same_shape(logits.value(), target, "bce_with_logits");
  const auto& z = logits.value();
  const double n = static_cast<double>(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    total += std::max(z[i], 0.0) - z[i] * target[i] + std::log1p(std::exp(-std::abs(z[i])));
  }
  return make_result(Tensor::scalar(total / n), {logits}, [target, n](Node& self) {
    Node& p = parent(self, 0);
    auto& g = grad_buffer(p);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double zi = p.value[i];
      const double s = zi >= 0.0 ? 1.0 / (1.0 + std::exp(-zi)) : std::exp(zi) / (1.0 + std::exp(zi));
      g[i] += self.grad[0] * (s - target[i]) / n;
    }
  });
}

Var fft2(const Var& plane) {
  Tensor out = dft2_complex(real_to_complex(plane.value()), false);
  return make_result(std::move(out), {plane}, [](Node& self) {
    // d/dx of a forward DFT is Re(N * IDFT(g)).
    const Tensor back = dft2_complex(self.grad, true);
    const double n = static_cast<double>(self.grad.dim(0) * self.grad.dim(1));
    auto& g = grad_buffer(parent(self, 0));
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n * back[2 * i];
  });
}

Var ifft2_real(const Var& spectrum) {
  Tensor out = complex_real_part(dft2_complex(spectrum.value(), true));
  return make_result(std::move(out), {spectrum}, [](Node& self) {
    // The adjoint of Re(IDFT) is DFT(g) / N.
    const Tensor fwd = dft2_complex(real_to_complex(self.grad), false);
    const double n = static_cast<double>(self.grad.dim(0) * self.grad.dim(1));
    auto& g = grad_buffer(parent(self, 0));
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += fwd[i] / n;
  });
}

Var fftshift(const Var& spectrum, bool inverse) {
  return make_result(vptta::fftshift(spectrum.value(), inverse), {spectrum}, [inverse](Node& self) {
    const Tensor back = vptta::fftshift(self.grad, !inverse);
    auto& g = grad_buffer(parent(self, 0));
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += back[i];
  });
}

std::pair<Var, Var> amplitude_phase(const Var& spectrum) {
  const auto& z = spectrum.value();
  if (z.rank() != 4 || z.dim(3) != 2) throw ConfigError("amplitude_phase expects (H, W, C, 2)");
  const auto ap = vptta::amplitude_phase(Spectrum{z, false});
  Var amp = make_result(ap.amplitude, {spectrum}, [](Node& self) {
    Node& p = parent(self, 0);
    auto& g = grad_buffer(p);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double a = self.value[i];
      if (a == 0.0) continue;
      g[2 * i] += self.grad[i] * p.value[2 * i] / a;
      g[2 * i + 1] += self.grad[i] * p.value[2 * i + 1] / a;
    }
  });
  Var phase = make_result(ap.phase, {spectrum}, [](Node& self) {
    Node& p = parent(self, 0);
    auto& g = grad_buffer(p);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double re = p.value[2 * i], im = p.value[2 * i + 1];
      const double a2 = re * re + im * im;
      if (a2 == 0.0) continue;
      g[2 * i] -= self.grad[i] * im / a2;
      g[2 * i + 1] += self.grad[i] * re / a2;
    }
  });
  return {amp, phase};
}

Var recompose(const Var& amplitude, const Var& phase) {
  Tensor z = vptta::recompose(amplitude.value(), phase.value(), false).values;
  return make_result(std::move(z), {amplitude, phase}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pp = parent(self, 1);
    const std::size_t n = pa.value.size();
    if (pa.requires_grad) {
      auto& g = grad_buffer(pa);
      for (std::size_t i = 0; i < n; ++i) {
        g[i] += self.grad[2 * i] * std::cos(pp.value[i]) + self.grad[2 * i + 1] * std::sin(pp.value[i]);
      }
    }
    if (pp.requires_grad) {
      auto& g = grad_buffer(pp);
      for (std::size_t i = 0; i < n; ++i) {
        g[i] += pa.value[i] * (-self.grad[2 * i] * std::sin(pp.value[i]) + self.grad[2 * i + 1] * std::cos(pp.value[i]));
      }
    }
  });
}

Var one_pad(const Var& patch, std::size_t height, std::size_t width) {
  const auto& p = patch.value();
  if (p.rank() != 3) throw ConfigError("one_pad expects an (h, w, C) patch");
  const std::size_t ph = p.dim(0), pw = p.dim(1), c = p.dim(2);
  if (ph > height || pw > width) throw std::logic_error("one_pad: prompt window exceeds the plane");
  const std::size_t y0 = centered_window_start(height, ph);
  const std::size_t x0 = centered_window_start(width, pw);
  Tensor out = Tensor::ones({height, width, c});
  for (std::size_t y = 0; y < ph; ++y)
    for (std::size_t x = 0; x < pw; ++x)
      for (std::size_t k = 0; k < c; ++k) out.at(y0 + y, x0 + x, k) = p.at(y, x, k);
  return make_result(std::move(out), {patch}, [=](Node& self) {
    Node& pp = parent(self, 0);
    auto& g = grad_buffer(pp);
    for (std::size_t y = 0; y < ph; ++y)
      for (std::size_t x = 0; x < pw; ++x)
        for (std::size_t k = 0; k < c; ++k) g.at(y, x, k) += self.grad.at(y0 + y, x0 + x, k);
  });
}

Var channel_matmul(const Var& b, const Var& a) {
  const auto& B = b.value();
  const auto& A = a.value();
  if (B.rank() != 3 || A.rank() != 3 || B.dim(1) != A.dim(0) || B.dim(2) != A.dim(2)) {
    throw ConfigError("channel_matmul: incompatible " + shape_str(B.shape()) + " @ " + shape_str(A.shape()));
  }
  const std::size_t h = B.dim(0), r = B.dim(1), w = A.dim(1), c = B.dim(2);
  Tensor out({h, w, c});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t k = 0; k < r; ++k)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) out.at(y, x, ch) += B.at(y, k, ch) * A.at(k, x, ch);
  return make_result(std::move(out), {b, a}, [=](Node& self) {
    Node& pb = parent(self, 0);
    Node& pa = parent(self, 1);
    const auto& G = self.grad;
    if (pb.requires_grad) {
      auto& gb = grad_buffer(pb);
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t k = 0; k < r; ++k)
          for (std::size_t x = 0; x < w; ++x)
            for (std::size_t ch = 0; ch < c; ++ch) gb.at(y, k, ch) += G.at(y, x, ch) * pa.value.at(k, x, ch);
    }
    if (pa.requires_grad) {
      auto& ga = grad_buffer(pa);
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t k = 0; k < r; ++k)
          for (std::size_t x = 0; x < w; ++x)
            for (std::size_t ch = 0; ch < c; ++ch) ga.at(k, x, ch) += pb.value.at(y, k, ch) * G.at(y, x, ch);
    }
  });
}

}  // namespace vptta::ad
