#include "hwnas/functional.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace hwnas {

namespace {

using MatR = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

// Gradient buffer of parent i, or nullptr when that parent needs none.
Real* parent_grad(const TensorNode& self, std::size_t i) {
  TensorNode* p = self.parents[i].get();
  if (!p || !p->requires_grad) return nullptr;
  return p->ensure_grad().data();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

void require_4d(const Tensor& x, const char* op) {
  if (x.ndim() != 4) throw std::invalid_argument(std::string(op) + ": expected NCHW input, got " + shape_str(x.shape()));
}

int normalize_dim(int dim, int ndim, const char* op) {
  if (dim < 0) dim += ndim;
  if (dim < 0 || dim >= ndim) throw std::invalid_argument(std::string(op) + ": dim out of range");
  return dim;
}

struct Split {
  std::size_t outer = 1, extent = 1, inner = 1;
};

Split split_at(const Shape& s, int dim) {
  Split r;
  for (int i = 0; i < dim; ++i) r.outer *= static_cast<std::size_t>(s[i]);
  r.extent = static_cast<std::size_t>(s[dim]);
  for (std::size_t i = static_cast<std::size_t>(dim) + 1; i < s.size(); ++i) r.inner *= static_cast<std::size_t>(s[i]);
  return r;
}

// Geometry of a (possibly strided, dilated) square-kernel convolution.
struct ConvGeom {
  int n, c, h, w, k, stride, dil, pad, ho, wo;
  std::size_t krows() const { return static_cast<std::size_t>(c) * k * k; }
};

// Output positions o in [lo, hi) for which o*stride - pad + off falls inside
// [0, extent).
void valid_range(int off, int stride, int pad, int extent, int out, int& lo, int& hi) {
  const int b = off - pad;
  lo = b >= 0 ? 0 : (-b + stride - 1) / stride;
  hi = extent - b <= 0 ? 0 : std::min(out, (extent - b - 1) / stride + 1);
  if (hi < lo) hi = lo;
}

// One image [C,H,W] -> col [C*k*k, Ho*Wo].
void im2col(const Real* x, const ConvGeom& g, Real* col) {
  const std::size_t p = static_cast<std::size_t>(g.ho) * g.wo;
  for (int c = 0; c < g.c; ++c) {
    const Real* xs = x + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ki = 0; ki < g.k; ++ki) {
      int h_lo, h_hi;
      valid_range(ki * g.dil, g.stride, g.pad, g.h, g.ho, h_lo, h_hi);
      for (int kj = 0; kj < g.k; ++kj) {
        int w_lo, w_hi;
        valid_range(kj * g.dil, g.stride, g.pad, g.w, g.wo, w_lo, w_hi);
        Real* dst = col + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * p;
        std::fill(dst, dst + static_cast<std::size_t>(h_lo) * g.wo, Real(0));
        for (int oh = h_lo; oh < h_hi; ++oh) {
          Real* row = dst + static_cast<std::size_t>(oh) * g.wo;
          const std::ptrdiff_t base =
              static_cast<std::ptrdiff_t>(oh * g.stride - g.pad + ki * g.dil) * g.w + (kj * g.dil - g.pad);
          std::fill(row, row + w_lo, Real(0));
          if (g.stride == 1) {
            std::copy(xs + base + w_lo, xs + base + w_hi, row + w_lo);
          } else {
            for (int ow = w_lo; ow < w_hi; ++ow) row[ow] = xs[base + static_cast<std::ptrdiff_t>(ow) * g.stride];
          }
          std::fill(row + w_hi, row + g.wo, Real(0));
        }
        std::fill(dst + static_cast<std::size_t>(h_hi) * g.wo, dst + p, Real(0));
      }
    }
  }
}

// Adjoint of im2col: accumulates col into one image.
void col2im(const Real* col, const ConvGeom& g, Real* x) {
  const std::size_t p = static_cast<std::size_t>(g.ho) * g.wo;
  for (int c = 0; c < g.c; ++c) {
    Real* xs = x + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ki = 0; ki < g.k; ++ki) {
      int h_lo, h_hi;
      valid_range(ki * g.dil, g.stride, g.pad, g.h, g.ho, h_lo, h_hi);
      for (int kj = 0; kj < g.k; ++kj) {
        int w_lo, w_hi;
        valid_range(kj * g.dil, g.stride, g.pad, g.w, g.wo, w_lo, w_hi);
        const Real* src = col + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * p;
        for (int oh = h_lo; oh < h_hi; ++oh) {
          const Real* row = src + static_cast<std::size_t>(oh) * g.wo;
          const std::ptrdiff_t base =
              static_cast<std::ptrdiff_t>(oh * g.stride - g.pad + ki * g.dil) * g.w + (kj * g.dil - g.pad);
          for (int ow = w_lo; ow < w_hi; ++ow) xs[base + static_cast<std::ptrdiff_t>(ow) * g.stride] += row[ow];
        }
      }
    }
  }
}

// Per-sample GEMM: out_n[Cout, P] = W[Cout, C*k*k] * col_n. A stride-1
// unpadded 1x1 conv uses the image itself as col_n.
Tensor conv2d_gemm(const Tensor& x, const Tensor& weight, const ConvGeom& g, int cout) {
  const std::size_t p = static_cast<std::size_t>(g.ho) * g.wo, kr = g.krows();
  const std::size_t in_sz = static_cast<std::size_t>(g.c) * g.h * g.w, out_sz = static_cast<std::size_t>(cout) * p;
  const bool direct = g.k == 1 && g.stride == 1 && g.pad == 0;
  const auto P = static_cast<Eigen::Index>(p), K = static_cast<Eigen::Index>(kr);
  std::vector<Real> out(g.n * out_sz);
  std::vector<Real> col(direct ? 0 : kr * p);
  const CMapR wm(weight.values().data(), cout, K);
  for (int n = 0; n < g.n; ++n) {
    const Real* src = x.values().data() + n * in_sz;
    if (!direct) {
      im2col(src, g, col.data());
      src = col.data();
    }
    MapR(out.data() + n * out_sz, cout, P).noalias() = wm * CMapR(src, K, P);
  }

  return make_result(
      Shape{g.n, cout, g.ho, g.wo}, std::move(out), {x, weight},
      [g, cout, p, kr, in_sz, out_sz, direct, P, K](const TensorNode& self) {
        const TensorNode& xn = *self.parents[0];
        const CMapR wm(self.parents[1]->value.data(), cout, K);
        Real* gw = parent_grad(self, 1);
        Real* gx = parent_grad(self, 0);
        std::vector<Real> col(direct ? 0 : kr * p);
        for (int n = 0; n < g.n; ++n) {
          const CMapR gy(self.grad.data() + n * out_sz, cout, P);
          if (gw) {
            const Real* src = xn.value.data() + n * in_sz;
            if (!direct) {
              im2col(src, g, col.data());
              src = col.data();
            }
            MapR(gw, cout, K).noalias() += gy * CMapR(src, K, P).transpose();
          }
          if (gx) {
            if (direct) {
              MapR(gx + n * in_sz, K, P).noalias() += wm.transpose() * gy;
            } else {
              MapR(col.data(), K, P).noalias() = wm.transpose() * gy;
              col2im(col.data(), g, gx + n * in_sz);
            }
          }
        }
      });
}

// Direct loops for grouped (incl. depthwise) convolution.
Tensor conv2d_grouped(const Tensor& x, const Tensor& weight, const ConvGeom& g, int cout, int groups) {
  const int cin_g = g.c / groups, cout_g = cout / groups;
  // Calls fn(x plane, out plane, weight index, ki, kj) for every connected
  // (input channel, output channel, tap).
  auto visit = [g, cin_g, cout_g, cout](auto&& fn) {
    const std::size_t hw = static_cast<std::size_t>(g.h) * g.w, p = static_cast<std::size_t>(g.ho) * g.wo;
    for (int n = 0; n < g.n; ++n)
      for (int co = 0; co < cout; ++co) {
        const int grp = co / cout_g;
        for (int ci = 0; ci < cin_g; ++ci) {
          const std::size_t xoff = (static_cast<std::size_t>(n) * g.c + grp * cin_g + ci) * hw;
          const std::size_t ooff = (static_cast<std::size_t>(n) * cout + co) * p;
          for (int ki = 0; ki < g.k; ++ki)
            for (int kj = 0; kj < g.k; ++kj)
              fn(xoff, ooff, static_cast<std::size_t>(((co * cin_g + ci) * g.k + ki) * g.k + kj), ki, kj);
        }
      }
  };
  // Runs body(x offset, out offset, w_lo, w_hi) per valid output row.
  auto rows = [g](int ki, int kj, auto&& body) {
    int h_lo, h_hi, w_lo, w_hi;
    valid_range(ki * g.dil, g.stride, g.pad, g.h, g.ho, h_lo, h_hi);
    valid_range(kj * g.dil, g.stride, g.pad, g.w, g.wo, w_lo, w_hi);
    for (int oh = h_lo; oh < h_hi; ++oh) {
      const std::ptrdiff_t base =
          static_cast<std::ptrdiff_t>(oh * g.stride - g.pad + ki * g.dil) * g.w + (kj * g.dil - g.pad);
      body(base, static_cast<std::ptrdiff_t>(oh) * g.wo, w_lo, w_hi);
    }
  };
  const int s = g.stride;
  std::vector<Real> out(static_cast<std::size_t>(g.n) * cout * g.ho * g.wo, Real(0));
  const Real* xv = x.values().data();
  const Real* wv = weight.values().data();
  visit([&](std::size_t xoff, std::size_t ooff, std::size_t wi, int ki, int kj) {
    const Real wk = wv[wi];
    const Real* xs = xv + xoff;
    Real* os = out.data() + ooff;
    rows(ki, kj, [&](std::ptrdiff_t xb, std::ptrdiff_t ob, int lo, int hi) {
      for (int ow = lo; ow < hi; ++ow) os[ob + ow] += wk * xs[xb + static_cast<std::ptrdiff_t>(ow) * s];
    });
  });

  return make_result(Shape{g.n, cout, g.ho, g.wo}, std::move(out), {x, weight}, [visit, rows, s](const TensorNode& self) {
    const Real* gy = self.grad.data();
    const Real* xv = self.parents[0]->value.data();
    const Real* wv = self.parents[1]->value.data();
    Real* gx = parent_grad(self, 0);
    Real* gw = parent_grad(self, 1);
    visit([&](std::size_t xoff, std::size_t ooff, std::size_t wi, int ki, int kj) {
      const Real* gys = gy + ooff;
      if (gx) {
        const Real wk = wv[wi];
        Real* gxs = gx + xoff;
        rows(ki, kj, [&](std::ptrdiff_t xb, std::ptrdiff_t ob, int lo, int hi) {
          for (int ow = lo; ow < hi; ++ow) gxs[xb + static_cast<std::ptrdiff_t>(ow) * s] += wk * gys[ob + ow];
        });
      }
      if (gw) {
        const Real* xs = xv + xoff;
        Real acc = 0;
        rows(ki, kj, [&](std::ptrdiff_t xb, std::ptrdiff_t ob, int lo, int hi) {
          for (int ow = lo; ow < hi; ++ow) acc += xs[xb + static_cast<std::ptrdiff_t>(ow) * s] * gys[ob + ow];
        });
        gw[wi] += acc;
      }
    });
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return make_result(a.shape(), std::move(out), {a, b}, [](const TensorNode& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Real* g = parent_grad(self, k))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor add_n(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw std::invalid_argument("add_n: no inputs");
  if (xs.size() == 1) return xs[0];
  std::vector<Real> out(xs[0].numel(), Real(0));
  for (const auto& x : xs) {
    require_same_shape(xs[0], x, "add_n");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += x.at(i);
  }
  return make_result(xs[0].shape(), std::move(out), xs, [](const TensorNode& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k)
      if (Real* g = parent_grad(self, k))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return make_result(a.shape(), std::move(out), {a, b}, [](const TensorNode& self) {
    if (Real* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (Real* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return make_result(a.shape(), std::move(out), {a, b}, [](const TensorNode& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (Real* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    if (Real* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
  });
}

Tensor mul_scalar(const Tensor& a, Real s) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * s;
  return make_result(a.shape(), std::move(out), {a}, [s](const TensorNode& self) {
    if (Real* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
  });
}

Tensor add_const(const Tensor& a, std::span<const Real> c) {
  if (c.size() != a.numel()) throw std::invalid_argument("add_const: size mismatch");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + c[i];
  return make_result(a.shape(), std::move(out), {a}, [](const TensorNode& self) {
    if (Real* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor relu(const Tensor& x) {
  std::vector<Real> out(x.numel());
  // NaN passes through
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) <= 0 ? Real(0) : x.at(i);
  return make_result(x.shape(), std::move(out), {x}, [](const TensorNode& self) {
    if (Real* g = parent_grad(self, 0)) {
      const auto& xv = self.parents[0]->value;
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += xv[i] <= 0 ? Real(0) : self.grad[i];
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = Real(1) / (Real(1) + std::exp(-x.at(i)));
  return make_result(x.shape(), std::move(out), {x}, [](const TensorNode& self) {
    if (Real* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const Real y = self.value[i];
        g[i] += self.grad[i] * y * (Real(1) - y);
      }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return make_result(std::move(shape), x.raw(), {x}, [](const TensorNode& self) {
    if (Real* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sum(const Tensor& x) {
  Real s = 0;
  for (Real v : x.values()) s += v;
  return make_result(Shape{}, {s}, {x}, [](const TensorNode& self) {
    if (Real* g = parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) { return mul_scalar(sum(x), Real(1) / static_cast<Real>(x.numel())); }

Tensor dot_const(const Tensor& x, std::span<const Real> c) {
  if (c.size() != x.numel()) throw std::invalid_argument("dot_const: size mismatch");
  Real s = 0;
  for (std::size_t i = 0; i < c.size(); ++i) s += x.at(i) * c[i];
  std::vector<Real> cc(c.begin(), c.end());
  return make_result(Shape{}, {s}, {x}, [cc = std::move(cc)](const TensorNode& self) {
    if (Real* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < cc.size(); ++i) g[i] += self.grad[0] * cc[i];
  });
}

Tensor weighted_sum(const std::vector<Tensor>& xs, const Tensor& w) {
  if (xs.empty() || w.numel() != xs.size()) {
    throw std::invalid_argument("weighted_sum: " + std::to_string(xs.size()) + " inputs vs " +
                                std::to_string(w.numel()) + " weights");
  }
  std::vector<Real> out(xs[0].numel(), Real(0));
  for (std::size_t k = 0; k < xs.size(); ++k) {
    require_same_shape(xs[0], xs[k], "weighted_sum");
    const Real wk = w.at(k);
    const auto xv = xs[k].values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += wk * xv[i];
  }
  std::vector<Tensor> parents = xs;
  parents.push_back(w);
  const std::size_t kcount = xs.size();
  return make_result(xs[0].shape(), std::move(out), std::move(parents), [kcount](const TensorNode& self) {
    const auto& wv = self.parents[kcount]->value;
    Real* gw = parent_grad(self, kcount);
    for (std::size_t k = 0; k < kcount; ++k) {
      if (Real* g = parent_grad(self, k))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += wv[k] * self.grad[i];
      if (gw) {
        const auto& xv = self.parents[k]->value;
        Real s = 0;
        for (std::size_t i = 0; i < self.grad.size(); ++i) s += self.grad[i] * xv[i];
        gw[k] += s;
      }
    }
  });
}

Tensor softmax(const Tensor& x, int dim) {
  dim = normalize_dim(dim, x.ndim(), "softmax");
  const Split sp = split_at(x.shape(), dim);
  std::vector<Real> out(x.numel());
  const auto xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t e = 0; e < sp.extent; ++e) mx = std::max(mx, xv[base + e * sp.inner]);
      Real z = 0;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const Real v = std::exp(xv[base + e * sp.inner] - mx);
        out[base + e * sp.inner] = v;
        z += v;
      }
      for (std::size_t e = 0; e < sp.extent; ++e) out[base + e * sp.inner] /= z;
    }
  return make_result(x.shape(), std::move(out), {x}, [sp](const TensorNode& self) {
    Real* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.extent * sp.inner + in;
        Real dot = 0;
        for (std::size_t e = 0; e < sp.extent; ++e) dot += self.grad[base + e * sp.inner] * self.value[base + e * sp.inner];
        for (std::size_t e = 0; e < sp.extent; ++e) {
          const std::size_t i = base + e * sp.inner;
          g[i] += self.value[i] * (self.grad[i] - dot);
        }
      }
  });
}

Tensor softmax_entropy(const Tensor& x, int dim) {
  dim = normalize_dim(dim, x.ndim(), "softmax_entropy");
  const Split sp = split_at(x.shape(), dim);
  Shape oshape = x.shape();
  oshape[static_cast<std::size_t>(dim)] = 1;
  std::vector<Real> out(sp.outer * sp.inner);
  const auto xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t e = 0; e < sp.extent; ++e) mx = std::max(mx, xv[base + e * sp.inner]);
      Real z = 0;
      for (std::size_t e = 0; e < sp.extent; ++e) z += std::exp(xv[base + e * sp.inner] - mx);
      const Real lse = mx + std::log(z);
      Real h = 0;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const Real logp = xv[base + e * sp.inner] - lse;
        h -= std::exp(logp) * logp;
      }
      out[o * sp.inner + in] = h;
    }
  return make_result(std::move(oshape), std::move(out), {x}, [sp](const TensorNode& self) {
    Real* g = parent_grad(self, 0);
    if (!g) return;
    const auto& xv = self.parents[0]->value;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.extent * sp.inner + in;
        const Real gh = self.grad[o * sp.inner + in];
        const Real h = self.value[o * sp.inner + in];
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::size_t e = 0; e < sp.extent; ++e) mx = std::max(mx, xv[base + e * sp.inner]);
        Real z = 0;
        for (std::size_t e = 0; e < sp.extent; ++e) z += std::exp(xv[base + e * sp.inner] - mx);
        const Real lse = mx + std::log(z);
        for (std::size_t e = 0; e < sp.extent; ++e) {
          const std::size_t i = base + e * sp.inner;
          const Real logp = xv[i] - lse;
          g[i] += gh * (-std::exp(logp) * (logp + h));
        }
      }
  });
}

Tensor concat(const std::vector<Tensor>& xs, int dim) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  dim = normalize_dim(dim, xs[0].ndim(), "concat");
  Shape oshape = xs[0].shape();
  int total = 0;
  for (const auto& x : xs) {
    bool ok = x.ndim() == xs[0].ndim();
    for (int d = 0; ok && d < x.ndim(); ++d)
      if (d != dim && x.shape()[d] != oshape[d]) ok = false;
    if (!ok) {
      throw std::invalid_argument("concat: mismatched non-concat dims " + shape_str(xs[0].shape()) + " vs " +
                                  shape_str(x.shape()));
    }
    total += x.shape()[dim];
  }
  oshape[dim] = total;
  const Split osp = split_at(oshape, dim);
  std::vector<Real> out(numel(oshape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const std::size_t ext = static_cast<std::size_t>(x.shape()[dim]);
    const auto xv = x.values();
    for (std::size_t o = 0; o < osp.outer; ++o)
      std::copy_n(xv.data() + o * ext * osp.inner, ext * osp.inner,
                  out.data() + (o * osp.extent + off) * osp.inner);
    off += ext;
  }
  return make_result(oshape, std::move(out), xs, [osp, offsets](const TensorNode& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Real* g = parent_grad(self, k);
      if (!g) continue;
      const std::size_t ext = self.parents[k]->value.size() / (osp.outer * osp.inner);
      for (std::size_t o = 0; o < osp.outer; ++o) {
        const Real* src = self.grad.data() + (o * osp.extent + offsets[k]) * osp.inner;
        Real* dst = g + o * ext * osp.inner;
        for (std::size_t i = 0; i < ext * osp.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

int conv_out_extent(int in, int kernel, int stride, int dilation, int padding) {
  return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Conv2dOptions& opt) {
  require_4d(x, "conv2d");
  if (weight.ndim() != 4 || weight.dim(2) != weight.dim(3)) {
    throw std::invalid_argument("conv2d: weight must be [Cout,Cin,k,k], got " + shape_str(weight.shape()));
  }
  if (opt.stride < 1 || opt.dilation < 1 || opt.padding < 0 || opt.groups < 1) {
    throw std::invalid_argument("conv2d: invalid stride/dilation/padding/groups");
  }
  const int cout = weight.dim(0);
  if (x.dim(1) % opt.groups != 0 || cout % opt.groups != 0 || weight.dim(1) * opt.groups != x.dim(1)) {
    throw std::invalid_argument("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                                shape_str(weight.shape()) + " (groups=" + std::to_string(opt.groups) + ")");
  }
  const int k = weight.dim(2);
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k, opt.stride, opt.dilation, opt.padding, 0, 0};
  g.ho = conv_out_extent(g.h, k, opt.stride, opt.dilation, opt.padding);
  g.wo = conv_out_extent(g.w, k, opt.stride, opt.dilation, opt.padding);
  if (g.ho < 1 || g.wo < 1) {
    throw std::invalid_argument("conv2d: kernel does not fit input " + shape_str(x.shape()));
  }
  if (opt.groups == 1) return conv2d_gemm(x, weight, g, cout);
  return conv2d_grouped(x, weight, g, cout, opt.groups);
}

Tensor conv2d_transpose(const Tensor& x, const Tensor& weight) {
  require_4d(x, "conv2d_transpose");
  if (weight.ndim() != 4 || weight.dim(2) != 3 || weight.dim(3) != 3 || weight.dim(0) != x.dim(1)) {
    throw std::invalid_argument("conv2d_transpose: input " + shape_str(x.shape()) + " incompatible with weight " +
                                shape_str(weight.shape()) + " (expected [Cin,Cout,3,3])");
  }
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3), cout = weight.dim(1);
  // Geometry of the adjoint stride-2 conv mapping [cout, 2h, 2w] -> [cin, h, w].
  const ConvGeom g{n, cout, 2 * h, 2 * w, 3, 2, 1, 1, h, w};
  if (conv_out_extent(g.h, 3, 2, 1, 1) != h || conv_out_extent(g.w, 3, 2, 1, 1) != w) {
    throw std::invalid_argument("conv2d_transpose: configuration does not double " + shape_str(x.shape()));
  }
  const std::size_t kr = g.krows(), p = static_cast<std::size_t>(h) * w;
  const std::size_t in_sz = static_cast<std::size_t>(cin) * p, out_sz = static_cast<std::size_t>(cout) * g.h * g.w;
  const auto P = static_cast<Eigen::Index>(p), K = static_cast<Eigen::Index>(kr);
  std::vector<Real> col(kr * p);
  std::vector<Real> out(n * out_sz, Real(0));
  const CMapR wm(weight.values().data(), cin, K);
  for (int b = 0; b < n; ++b) {
    MapR(col.data(), K, P).noalias() = wm.transpose() * CMapR(x.values().data() + b * in_sz, cin, P);
    col2im(col.data(), g, out.data() + b * out_sz);
  }

  return make_result(Shape{n, cout, g.h, g.w}, std::move(out), {x, weight},
                     [g, cin, kr, p, in_sz, out_sz, P, K](const TensorNode& self) {
                       Real* gx = parent_grad(self, 0);
                       Real* gw = parent_grad(self, 1);
                       const CMapR wm(self.parents[1]->value.data(), cin, K);
                       std::vector<Real> col(kr * p);
                       for (int b = 0; b < g.n; ++b) {
                         im2col(self.grad.data() + b * out_sz, g, col.data());
                         const CMapR cm(col.data(), K, P);
                         if (gx) MapR(gx + b * in_sz, cin, P).noalias() += wm * cm;
                         if (gw) {
                           MapR(gw, cin, K).noalias() +=
                               CMapR(self.parents[0]->value.data() + b * in_sz, cin, P) * cm.transpose();
                         }
                       }
                     });
}

Tensor pool2d(const Tensor& x, PoolKind kind, int kernel, int stride, int padding) {
  require_4d(x, "pool2d");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (kernel > h + 2 * padding || kernel > w + 2 * padding) {
    throw std::invalid_argument("pool2d: kernel " + std::to_string(kernel) + " larger than padded input " +
                                shape_str(x.shape()));
  }
  const int ho = (h + 2 * padding - kernel) / stride + 1;
  const int wo = (w + 2 * padding - kernel) / stride + 1;
  const std::size_t planes = static_cast<std::size_t>(n) * c;
  std::vector<Real> out(planes * ho * wo);
  const auto xv = x.values();

  if (kind == PoolKind::Max) {
    std::vector<std::size_t> argmax(out.size());
    for (std::size_t pl = 0; pl < planes; ++pl)
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow) {
          Real best = -std::numeric_limits<Real>::infinity();
          std::size_t bi = 0;
          for (int ki = 0; ki < kernel; ++ki) {
            const int ih = oh * stride - padding + ki;
            if (ih < 0 || ih >= h) continue;
            for (int kj = 0; kj < kernel; ++kj) {
              const int iw = ow * stride - padding + kj;
              if (iw < 0 || iw >= w) continue;
              const std::size_t idx = (pl * h + ih) * w + iw;
              if (xv[idx] > best) {
                best = xv[idx];
                bi = idx;
              }
            }
          }
          const std::size_t o = (pl * ho + oh) * wo + ow;
          out[o] = best;
          argmax[o] = bi;
        }
    return make_result(Shape{n, c, ho, wo}, std::move(out), {x}, [argmax = std::move(argmax)](const TensorNode& self) {
      if (Real* g = parent_grad(self, 0))
        for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
    });
  }

  const Real inv = Real(1) / static_cast<Real>(kernel * kernel);
  auto windows = [=](auto&& fn) {
    for (std::size_t pl = 0; pl < planes; ++pl)
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow) {
          const std::size_t o = (pl * ho + oh) * wo + ow;
          for (int ki = 0; ki < kernel; ++ki) {
            const int ih = oh * stride - padding + ki;
            if (ih < 0 || ih >= h) continue;
            for (int kj = 0; kj < kernel; ++kj) {
              const int iw = ow * stride - padding + kj;
              if (iw < 0 || iw >= w) continue;
              fn(o, (pl * h + ih) * w + iw);
            }
          }
        }
  };
  windows([&](std::size_t o, std::size_t i) { out[o] += xv[i] * inv; });
  return make_result(Shape{n, c, ho, wo}, std::move(out), {x}, [windows, inv](const TensorNode& self) {
    if (Real* g = parent_grad(self, 0)) windows([&](std::size_t o, std::size_t i) { g[i] += self.grad[o] * inv; });
  });
}

Tensor upsample_nearest2x(const Tensor& x) {
  require_4d(x, "upsample_nearest2x");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t planes = static_cast<std::size_t>(n) * c;
  std::vector<Real> out(planes * 4 * h * w);
  const auto xv = x.values();
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (int i = 0; i < 2 * h; ++i)
      for (int j = 0; j < 2 * w; ++j) out[(pl * 2 * h + i) * 2 * w + j] = xv[(pl * h + i / 2) * w + j / 2];
  return make_result(Shape{n, c, 2 * h, 2 * w}, std::move(out), {x}, [planes, h, w](const TensorNode& self) {
    if (Real* g = parent_grad(self, 0))
      for (std::size_t pl = 0; pl < planes; ++pl)
        for (int i = 0; i < 2 * h; ++i)
          for (int j = 0; j < 2 * w; ++j) g[(pl * h + i / 2) * w + j / 2] += self.grad[(pl * 2 * h + i) * 2 * w + j];
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_4d(x, "global_avg_pool");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  std::vector<Real> out(static_cast<std::size_t>(n) * c);
  const auto xv = x.values();
  for (std::size_t pl = 0; pl < out.size(); ++pl) {
    Real s = 0;
    for (std::size_t i = 0; i < hw; ++i) s += xv[pl * hw + i];
    out[pl] = s / static_cast<Real>(hw);
  }
  return make_result(Shape{n, c}, std::move(out), {x}, [hw](const TensorNode& self) {
    if (Real* g = parent_grad(self, 0))
      for (std::size_t pl = 0; pl < self.grad.size(); ++pl)
        for (std::size_t i = 0; i < hw; ++i) g[pl * hw + i] += self.grad[pl] / static_cast<Real>(hw);
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.ndim() != 2 || weight.ndim() != 2 || weight.dim(1) != x.dim(1)) {
    throw std::invalid_argument("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                                shape_str(weight.shape()));
  }
  const int n = x.dim(0), in = x.dim(1), outf = weight.dim(0);
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != outf)) {
    throw std::invalid_argument("linear: bias shape " + shape_str(bias.shape()));
  }
  std::vector<Real> out(static_cast<std::size_t>(n) * outf);
  MapR(out.data(), n, outf).noalias() = CMapR(x.values().data(), n, in) * CMapR(weight.values().data(), outf, in).transpose();
  if (bias.defined())
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < outf; ++o) out[static_cast<std::size_t>(i) * outf + o] += bias.at(static_cast<std::size_t>(o));
  return make_result(Shape{n, outf}, std::move(out), {x, weight, bias}, [n, in, outf](const TensorNode& self) {
    CMapR gy(self.grad.data(), n, outf);
    if (Real* gx = parent_grad(self, 0))
      MapR(gx, n, in).noalias() += gy * CMapR(self.parents[1]->value.data(), outf, in);
    if (Real* gw = parent_grad(self, 1))
      MapR(gw, outf, in).noalias() += gy.transpose() * CMapR(self.parents[0]->value.data(), n, in);
    if (self.parents[2])
      if (Real* gb = parent_grad(self, 2))
        for (int i = 0; i < n; ++i)
          for (int o = 0; o < outf; ++o) gb[o] += self.grad[static_cast<std::size_t>(i) * outf + o];
  });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, bool training,
                  Real momentum, Real eps) {
  if (x.ndim() != 4 && x.ndim() != 2) throw std::invalid_argument("batch_norm: expected [N,C,H,W] or [N,C]");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.ndim() == 4 ? static_cast<std::size_t>(x.dim(2)) * x.dim(3) : 1;
  const std::size_t m = static_cast<std::size_t>(n) * hw;
  if (state.running_mean.size() != static_cast<std::size_t>(c)) {
    throw std::invalid_argument("batch_norm: state has " + std::to_string(state.running_mean.size()) +
                                " channels, input " + shape_str(x.shape()));
  }
  const auto xv = x.values();
  std::vector<Real> mu(c), invstd(c);
  for (int ch = 0; ch < c; ++ch) {
    if (training) {
      Real s = 0;
      for (int i = 0; i < n; ++i)
        for (std::size_t q = 0; q < hw; ++q) s += xv[(static_cast<std::size_t>(i) * c + ch) * hw + q];
      const Real mean = s / static_cast<Real>(m);
      Real v = 0;
      for (int i = 0; i < n; ++i)
        for (std::size_t q = 0; q < hw; ++q) {
          const Real d = xv[(static_cast<std::size_t>(i) * c + ch) * hw + q] - mean;
          v += d * d;
        }
      const Real var = v / static_cast<Real>(m);
      mu[ch] = mean;
      invstd[ch] = Real(1) / std::sqrt(var + eps);
      const Real unbiased = m > 1 ? v / static_cast<Real>(m - 1) : var;
      state.running_mean[ch] = (1 - momentum) * state.running_mean[ch] + momentum * mean;
      state.running_var[ch] = (1 - momentum) * state.running_var[ch] + momentum * unbiased;
    } else {
      mu[ch] = state.running_mean[ch];
      invstd[ch] = Real(1) / std::sqrt(state.running_var[ch] + eps);
    }
  }
  std::vector<Real> out(x.numel());
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const Real gm = gamma.defined() ? gamma.at(ch) : Real(1);
      const Real bt = beta.defined() ? beta.at(ch) : Real(0);
      const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
      for (std::size_t q = 0; q < hw; ++q) out[base + q] = gm * (xv[base + q] - mu[ch]) * invstd[ch] + bt;
    }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [n, c, hw, m, mu = std::move(mu), invstd = std::move(invstd), training](const TensorNode& self) {
                       const auto& xv = self.parents[0]->value;
                       const TensorNode* gnode = self.parents[1].get();
                       Real* gx = parent_grad(self, 0);
                       Real* gg = gnode ? parent_grad(self, 1) : nullptr;
                       Real* gb = self.parents[2] ? parent_grad(self, 2) : nullptr;
                       for (int ch = 0; ch < c; ++ch) {
                         const Real gm = gnode ? gnode->value[ch] : Real(1);
                         Real sdy = 0, sdyx = 0;
                         for (int i = 0; i < n; ++i) {
                           const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
                           for (std::size_t q = 0; q < hw; ++q) {
                             const Real xh = (xv[base + q] - mu[ch]) * invstd[ch];
                             sdy += self.grad[base + q];
                             sdyx += self.grad[base + q] * xh;
                           }
                         }
                         if (gg) gg[ch] += sdyx;
                         if (gb) gb[ch] += sdy;
                         if (!gx) continue;
                         const Real mm = static_cast<Real>(m);
                         for (int i = 0; i < n; ++i) {
                           const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
                           for (std::size_t q = 0; q < hw; ++q) {
                             if (training) {
                               const Real xh = (xv[base + q] - mu[ch]) * invstd[ch];
                               gx[base + q] += gm * invstd[ch] * (self.grad[base + q] - sdy / mm - xh * sdyx / mm);
                             } else {
                               gx[base + q] += gm * invstd[ch] * self.grad[base + q];
                             }
                           }
                         }
                       }
                     });
}

Tensor cross_entropy_2d(const Tensor& logits, std::span<const std::uint8_t> target) {
  require_4d(logits, "cross_entropy_2d");
  const int n = logits.dim(0), c = logits.dim(1);
  const std::size_t hw = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
  if (target.size() != static_cast<std::size_t>(n) * hw) {
    throw std::invalid_argument("cross_entropy_2d: target has " + std::to_string(target.size()) +
                                " pixels, logits " + shape_str(logits.shape()));
  }
  for (auto t : target)
    if (t >= c) {
      throw std::invalid_argument("cross_entropy_2d: target value " + std::to_string(int(t)) + " outside [0," +
                                  std::to_string(c) + ")");
    }
  const auto zv = logits.values();
  const std::size_t m = static_cast<std::size_t>(n) * hw;
  std::vector<Real> prob(logits.numel());
  Real loss = 0;
  for (int i = 0; i < n; ++i)
    for (std::size_t q = 0; q < hw; ++q) {
      const std::size_t base = static_cast<std::size_t>(i) * c * hw + q;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (int k = 0; k < c; ++k) mx = std::max(mx, zv[base + k * hw]);
      Real z = 0;
      for (int k = 0; k < c; ++k) z += std::exp(zv[base + k * hw] - mx);
      const Real lse = mx + std::log(z);
      for (int k = 0; k < c; ++k) prob[base + k * hw] = std::exp(zv[base + k * hw] - lse);
      loss += lse - zv[base + target[static_cast<std::size_t>(i) * hw + q] * hw];
    }
  loss /= static_cast<Real>(m);
  std::vector<std::uint8_t> tgt(target.begin(), target.end());
  return make_result(Shape{}, {loss}, {logits},
                     [n, c, hw, m, prob = std::move(prob), tgt = std::move(tgt)](const TensorNode& self) {
                       Real* g = parent_grad(self, 0);
                       if (!g) return;
                       const Real scale = self.grad[0] / static_cast<Real>(m);
                       for (int i = 0; i < n; ++i)
                         for (std::size_t q = 0; q < hw; ++q) {
                           const std::size_t base = static_cast<std::size_t>(i) * c * hw + q;
                           const int t = tgt[static_cast<std::size_t>(i) * hw + q];
                           for (int k = 0; k < c; ++k)
                             g[base + k * hw] += scale * (prob[base + k * hw] - (k == t ? Real(1) : Real(0)));
                         }
                     });
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  if (pred.numel() != target.numel()) {
    throw std::invalid_argument("mse: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  const std::size_t n = pred.numel();
  Real s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Real d = pred.at(i) - target.at(i);
    s += d * d;
  }
  return make_result(Shape{}, {s / static_cast<Real>(n)}, {pred, target}, [n](const TensorNode& self) {
    const auto& pv = self.parents[0]->value;
    const auto& tv = self.parents[1]->value;
    const Real scale = self.grad[0] * Real(2) / static_cast<Real>(n);
    Real* gp = parent_grad(self, 0);
    Real* gt = parent_grad(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const Real d = pv[i] - tv[i];
      if (gp) gp[i] += scale * d;
      if (gt) gt[i] -= scale * d;
    }
  });
}

}  // namespace hwnas
