#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fewshot/graph.hpp"
#include "fewshot/tensor.hpp"

// The autodiff primitives. Free functions over Var<S>; each builds one node
// with a closure holding whatever the backward pass needs. Heavy lifting
// (conv-as-GEMM, linear) goes through Eigen maps over the flat buffers.

namespace fewshot {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowMap = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstRowMap = Eigen::Map<const RowMat<S>>;

namespace detail {

// Gathers the 3x3 receptive fields of one image into cols [Cin*9, Ho*Wo].
template <typename S>
void im2col3x3(const S* x, std::int64_t cin, std::int64_t h, std::int64_t w,
               std::int64_t pad, std::int64_t ho, std::int64_t wo, S* cols) {
  for (std::int64_t c = 0; c < cin; ++c) {
    const S* plane = x + c * h * w;
    for (std::int64_t ky = 0; ky < 3; ++ky) {
      for (std::int64_t kx = 0; kx < 3; ++kx) {
        S* row = cols + ((c * 3 + ky) * 3 + kx) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy + ky - pad;
          if (iy < 0 || iy >= h) {
            std::fill(row + oy * wo, row + (oy + 1) * wo, S(0));
            continue;
          }
          const S* src = plane + iy * w;
          S* dst = row + oy * wo;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox + kx - pad;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : S(0);
          }
        }
      }
    }
  }
}

// Scatter-adds cols gradients back onto one image.
template <typename S>
void col2im3x3(const S* cols, std::int64_t cin, std::int64_t h, std::int64_t w,
               std::int64_t pad, std::int64_t ho, std::int64_t wo, S* dx) {
  for (std::int64_t c = 0; c < cin; ++c) {
    S* plane = dx + c * h * w;
    for (std::int64_t ky = 0; ky < 3; ++ky) {
      for (std::int64_t kx = 0; kx < 3; ++kx) {
        const S* row = cols + ((c * 3 + ky) * 3 + kx) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy + ky - pad;
          if (iy < 0 || iy >= h) continue;
          S* dst = plane + iy * w;
          const S* src = row + oy * wo;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox + kx - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 3x3 cross-correlation, stride 1, zero padding. Spatial size is preserved
// at padding 1. Differentiable w.r.t. input, weight, and bias.
template <typename S>
Var<S> conv2d(Var<S> input, Var<S> weight, Var<S> bias, std::int64_t padding) {
  const Tensor<S>& x = input.value();
  const Tensor<S>& w = weight.value();
  const Tensor<S>& b = bias.value();
  if (x.rank() != 4) throw ShapeError("conv2d: input must be [N,Cin,H,W], got " + shape_str(x.shape()));
  if (w.rank() != 4 || w.dim(2) != 3 || w.dim(3) != 3)
    throw ShapeError("conv2d: weight must be [Cout,Cin,3,3], got " + shape_str(w.shape()));
  if (w.dim(1) != x.dim(1))
    throw ShapeError("conv2d: channel mismatch, input Cin=" + std::to_string(x.dim(1)) +
                     " vs weight Cin=" + std::to_string(w.dim(1)));
  if (b.rank() != 1 || b.dim(0) != w.dim(0))
    throw ShapeError("conv2d: bias must be [Cout], got " + shape_str(b.shape()));
  if (padding < 0) throw ShapeError("conv2d: negative padding");

  const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t cout = w.dim(0);
  const std::int64_t ho = h + 2 * padding - 2, wo = wd + 2 * padding - 2;
  if (ho <= 0 || wo <= 0)
    throw ShapeError("conv2d: non-positive output spatial dims for input " + shape_str(x.shape()));
  const std::int64_t k = cin * 9, hw = ho * wo;

  Tensor<S> out({n, cout, ho, wo});
  {
    std::vector<S> cols(std::size_t(k * hw));
    ConstRowMap<S> wmat(w.data(), cout, k);
    for (std::int64_t i = 0; i < n; ++i) {
      detail::im2col3x3(x.data() + i * cin * h * wd, cin, h, wd, padding, ho, wo, cols.data());
      ConstRowMap<S> cm(cols.data(), k, hw);
      RowMap<S> om(out.data() + i * cout * hw, cout, hw);
      om.noalias() = wmat * cm;
      om.colwise() += b.vec();
    }
  }

  Graph<S>& g = input.graph();
  const std::int32_t xid = input.id(), wid = weight.id(), bid = bias.id();
  auto backward = [=](Graph<S>& gr, const typename Graph<S>::Node& self) {
    const Tensor<S>& xv = gr.value(xid);
    const Tensor<S>& wv = gr.value(wid);
    Tensor<S>& dx = gr.grad(xid);
    Tensor<S>& dw = gr.grad(wid);
    Tensor<S>& db = gr.grad(bid);
    ConstRowMap<S> wmat(wv.data(), cout, k);
    RowMap<S> dwmat(dw.data(), cout, k);
    std::vector<S> cols(std::size_t(k * hw));
    std::vector<S> dcols(std::size_t(k * hw));
    for (std::int64_t i = 0; i < n; ++i) {
      ConstRowMap<S> dom(self.grad.data() + i * cout * hw, cout, hw);
      db.vec() += dom.rowwise().sum();
      detail::im2col3x3(xv.data() + i * cin * h * wd, cin, h, wd, padding, ho, wo, cols.data());
      ConstRowMap<S> cm(cols.data(), k, hw);
      dwmat.noalias() += dom * cm.transpose();
      RowMap<S> dcm(dcols.data(), k, hw);
      dcm.noalias() = wmat.transpose() * dom;
      detail::col2im3x3(dcols.data(), cin, h, wd, padding, ho, wo, dx.data() + i * cin * h * wd);
    }
  };
  return g.create(std::move(out), OpTag::kConv2d, {xid, wid, bid}, backward);
}

enum class BnMode {
  kTrain,  // batch statistics, running stats updated
  kBatch,  // batch statistics, running stats untouched
  kEval,   // running statistics
};

// Running mean/var live outside the graph; updated in-place on kTrain.
template <typename S>
struct BnState {
  Tensor<S> running_mean;
  Tensor<S> running_var;

  explicit BnState(std::int64_t channels = 0) {
    if (channels > 0) {
      running_mean = Tensor<S>({channels});
      running_var = Tensor<S>::full({channels}, S(1));
    }
  }
};

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

template <typename S>
Var<S> batch_norm2d(Var<S> input, Var<S> gamma, Var<S> beta, BnState<S>& state, BnMode mode) {
  const Tensor<S>& x = input.value();
  if (x.rank() != 4) throw ShapeError("batch_norm2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gamma.value().numel() != c || beta.value().numel() != c ||
      state.running_mean.numel() != c || state.running_var.numel() != c)
    throw ShapeError("batch_norm2d: per-channel parameter size mismatch for C=" + std::to_string(c));
  const std::int64_t m = n * h * w;
  const bool use_batch = (mode != BnMode::kEval);
  if (use_batch && m < 2)
    throw ShapeError("batch_norm2d: batch statistics need N*H*W >= 2 per channel, got " +
                     std::to_string(m));

  std::vector<S> mean(std::size_t(c), S(0));
  std::vector<S> invstd(std::size_t(c), S(0));
  const std::int64_t plane = h * w;
  if (use_batch) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double sum = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        const S* p = x.data() + (i * c + ch) * plane;
        for (std::int64_t j = 0; j < plane; ++j) sum += double(p[j]);
      }
      const double mu = sum / double(m);
      double sq = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        const S* p = x.data() + (i * c + ch) * plane;
        for (std::int64_t j = 0; j < plane; ++j) {
          const double d = double(p[j]) - mu;
          sq += d * d;
        }
      }
      const double var = sq / double(m);
      mean[std::size_t(ch)] = S(mu);
      invstd[std::size_t(ch)] = S(1.0 / std::sqrt(var + kBnEps));
      if (mode == BnMode::kTrain) {
        state.running_mean[ch] =
            S((1.0 - kBnMomentum) * double(state.running_mean[ch]) + kBnMomentum * mu);
        state.running_var[ch] =
            S((1.0 - kBnMomentum) * double(state.running_var[ch]) + kBnMomentum * var);
      }
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mean[std::size_t(ch)] = state.running_mean[ch];
      invstd[std::size_t(ch)] = S(1.0 / std::sqrt(double(state.running_var[ch]) + kBnEps));
    }
  }

  const Tensor<S>& gv = gamma.value();
  const Tensor<S>& bv = beta.value();
  Tensor<S> out(x.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const S* src = x.data() + (i * c + ch) * plane;
      S* dst = out.data() + (i * c + ch) * plane;
      const S mu = mean[std::size_t(ch)], is = invstd[std::size_t(ch)];
      const S ga = gv[ch], be = bv[ch];
      for (std::int64_t j = 0; j < plane; ++j) dst[j] = ga * (src[j] - mu) * is + be;
    }
  }

  Graph<S>& g = input.graph();
  const std::int32_t xid = input.id(), gid = gamma.id(), bid = beta.id();
  auto backward = [=, mean = std::move(mean), invstd = std::move(invstd)](
                      Graph<S>& gr, const typename Graph<S>::Node& self) {
    const Tensor<S>& xv = gr.value(xid);
    const Tensor<S>& gav = gr.value(gid);
    Tensor<S>& dx = gr.grad(xid);
    Tensor<S>& dgamma = gr.grad(gid);
    Tensor<S>& dbeta = gr.grad(bid);
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const S mu = mean[std::size_t(ch)], is = invstd[std::size_t(ch)];
      const S ga = gav[ch];
      double sum_dy = 0, sum_dy_xhat = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        const S* xp = xv.data() + (i * c + ch) * plane;
        const S* dyp = self.grad.data() + (i * c + ch) * plane;
        for (std::int64_t j = 0; j < plane; ++j) {
          const double xhat = double((xp[j] - mu) * is);
          sum_dy += double(dyp[j]);
          sum_dy_xhat += double(dyp[j]) * xhat;
        }
      }
      dbeta[ch] += S(sum_dy);
      dgamma[ch] += S(sum_dy_xhat);
      if (use_batch) {
        const double mdy = sum_dy / double(m);
        const double mdyx = sum_dy_xhat / double(m);
        for (std::int64_t i = 0; i < n; ++i) {
          const S* xp = xv.data() + (i * c + ch) * plane;
          const S* dyp = self.grad.data() + (i * c + ch) * plane;
          S* dxp = dx.data() + (i * c + ch) * plane;
          for (std::int64_t j = 0; j < plane; ++j) {
            const double xhat = double((xp[j] - mu) * is);
            dxp[j] += S(double(ga) * double(is) * (double(dyp[j]) - mdy - xhat * mdyx));
          }
        }
      } else {
        const S scale = ga * is;
        for (std::int64_t i = 0; i < n; ++i) {
          const S* dyp = self.grad.data() + (i * c + ch) * plane;
          S* dxp = dx.data() + (i * c + ch) * plane;
          for (std::int64_t j = 0; j < plane; ++j) dxp[j] += scale * dyp[j];
        }
      }
    }
  };
  return g.create(std::move(out), OpTag::kBatchNorm, {xid, gid, bid}, backward);
}

// Elementwise max(x, 0); subgradient 0 at x == 0.
template <typename S>
Var<S> relu(Var<S> input) {
  const Tensor<S>& x = input.value();
  Tensor<S> out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] > S(0) ? x[i] : S(0);
  Graph<S>& g = input.graph();
  const std::int32_t xid = input.id();
  auto backward = [xid](Graph<S>& gr, const typename Graph<S>::Node& self) {
    const Tensor<S>& xv = gr.value(xid);
    Tensor<S>& dx = gr.grad(xid);
    for (std::int64_t i = 0; i < xv.numel(); ++i)
      if (xv[i] > S(0)) dx[i] += self.grad[i];
  };
  return g.create(std::move(out), OpTag::kRelu, {xid}, backward);
}

// 2x2 window, stride 2; a trailing odd row/column is truncated. Gradient
// routes to the argmax cell, ties broken by first index in row-major order.
template <typename S>
Var<S> max_pool2d(Var<S> input) {
  const Tensor<S>& x = input.value();
  if (x.rank() != 4) throw ShapeError("max_pool2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 2 || w < 2)
    throw ShapeError("max_pool2d: spatial dims must be >= 2, got " + shape_str(x.shape()));
  const std::int64_t ho = h / 2, wo = w / 2;
  Tensor<S> out({n, c, ho, wo});
  std::vector<std::int64_t> argmax(std::size_t(out.numel()));
  std::int64_t oi = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const S* plane = x.data() + (i * c + ch) * h * w;
      const std::int64_t base = (i * c + ch) * h * w;
      for (std::int64_t oy = 0; oy < ho; ++oy) {
        for (std::int64_t ox = 0; ox < wo; ++ox, ++oi) {
          const std::int64_t y0 = 2 * oy, x0 = 2 * ox;
          std::int64_t best = y0 * w + x0;
          S bv = plane[best];
          const std::int64_t cand[3] = {y0 * w + x0 + 1, (y0 + 1) * w + x0, (y0 + 1) * w + x0 + 1};
          for (std::int64_t cd : cand)
            if (plane[cd] > bv) {
              bv = plane[cd];
              best = cd;
            }
          out[oi] = bv;
          argmax[std::size_t(oi)] = base + best;
        }
      }
    }
  }
  Graph<S>& g = input.graph();
  const std::int32_t xid = input.id();
  auto backward = [xid, argmax = std::move(argmax)](Graph<S>& gr,
                                                    const typename Graph<S>::Node& self) {
    Tensor<S>& dx = gr.grad(xid);
    for (std::int64_t i = 0; i < self.grad.numel(); ++i)
      dx[argmax[std::size_t(i)]] += self.grad[i];
  };
  return g.create(std::move(out), OpTag::kMaxPool2d, {xid}, backward);
}

// Affine map: [N,Din] x [Dout,Din]^T + [Dout].
template <typename S>
Var<S> linear(Var<S> input, Var<S> weight, Var<S> bias) {
  const Tensor<S>& x = input.value();
  const Tensor<S>& w = weight.value();
  const Tensor<S>& b = bias.value();
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
    throw ShapeError("linear: need input [N,Din], weight [Dout,Din], bias [Dout]");
  if (x.dim(1) != w.dim(1) || b.dim(0) != w.dim(0))
    throw ShapeError("linear: dimension mismatch, input " + shape_str(x.shape()) +
                     " weight " + shape_str(w.shape()) + " bias " + shape_str(b.shape()));
  const std::int64_t n = x.dim(0), din = x.dim(1), dout = w.dim(0);
  Tensor<S> out({n, dout});
  out.mat(n, dout).noalias() = x.mat(n, din) * w.mat(dout, din).transpose();
  out.mat(n, dout).rowwise() += b.vec().transpose();

  Graph<S>& g = input.graph();
  const std::int32_t xid = input.id(), wid = weight.id(), bid = bias.id();
  auto backward = [=](Graph<S>& gr, const typename Graph<S>::Node& self) {
    const Tensor<S>& xv = gr.value(xid);
    const Tensor<S>& wv = gr.value(wid);
    ConstRowMap<S> dy(self.grad.data(), n, dout);
    gr.grad(xid).mat(n, din).noalias() += dy * wv.mat(dout, din);
    gr.grad(wid).mat(dout, din).noalias() += dy.transpose() * xv.mat(n, din);
    gr.grad(bid).vec() += dy.colwise().sum().transpose();
  };
  return g.create(std::move(out), OpTag::kLinear, {xid, wid, bid}, backward);
}

// Row-wise log softmax with max-subtraction. exp of each output row sums to
// one; stable for large magnitudes.
template <typename S>
Var<S> log_softmax(Var<S> input) {
  const Tensor<S>& x = input.value();
  if (x.rank() != 2) throw ShapeError("log_softmax: input must be [N,K], got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0), k = x.dim(1);
  if (k < 1) throw ShapeError("log_softmax: K must be >= 1");
  Tensor<S> out(x.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    const S* row = x.data() + i * k;
    S* o = out.data() + i * k;
    S mx = row[0];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double lse = 0;
    for (std::int64_t j = 0; j < k; ++j) lse += std::exp(double(row[j] - mx));
    const S shift = mx + S(std::log(lse));
    for (std::int64_t j = 0; j < k; ++j) o[j] = row[j] - shift;
  }
  Graph<S>& g = input.graph();
  const std::int32_t xid = input.id();
  auto backward = [=](Graph<S>& gr, const typename Graph<S>::Node& self) {
    Tensor<S>& dx = gr.grad(xid);
    for (std::int64_t i = 0; i < n; ++i) {
      const S* dy = self.grad.data() + i * k;
      const S* y = self.value.data() + i * k;
      double sum_dy = 0;
      for (std::int64_t j = 0; j < k; ++j) sum_dy += double(dy[j]);
      S* d = dx.data() + i * k;
      for (std::int64_t j = 0; j < k; ++j)
        d[j] += S(double(dy[j]) - std::exp(double(y[j])) * sum_dy);
    }
  };
  return g.create(std::move(out), OpTag::kLogSoftmax, {xid}, backward);
}

template <typename S>
Var<S> reshape(Var<S> input, Shape new_shape) {
  const Tensor<S>& x = input.value();
  if (shape_numel(new_shape) != x.numel())
    throw ShapeError("reshape: numel mismatch " + shape_str(x.shape()) + " -> " +
                     shape_str(new_shape));
  Tensor<S> out(new_shape, x.raw());
  Graph<S>& g = input.graph();
  const std::int32_t xid = input.id();
  auto backward = [xid](Graph<S>& gr, const typename Graph<S>::Node& self) {
    Tensor<S>& dx = gr.grad(xid);
    for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += self.grad[i];
  };
  return g.create(std::move(out), OpTag::kReshape, {xid}, backward);
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  if (!a.value().same_shape(b.value()))
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<S> out(a.value().shape());
  out.vec() = a.value().vec() + b.value().vec();
  Graph<S>& g = a.graph();
  const std::int32_t aid = a.id(), bid = b.id();
  auto backward = [=](Graph<S>& gr, const typename Graph<S>::Node& self) {
    gr.grad(aid).vec() += self.grad.vec();
    gr.grad(bid).vec() += self.grad.vec();
  };
  return g.create(std::move(out), OpTag::kAdd, {aid, bid}, backward);
}

template <typename S>
Var<S> mul_elem(Var<S> a, Var<S> b) {
  if (!a.value().same_shape(b.value()))
    throw ShapeError("mul_elem: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor<S> out(a.value().shape());
  out.vec() = a.value().vec().cwiseProduct(b.value().vec());
  Graph<S>& g = a.graph();
  const std::int32_t aid = a.id(), bid = b.id();
  auto backward = [=](Graph<S>& gr, const typename Graph<S>::Node& self) {
    gr.grad(aid).vec() += self.grad.vec().cwiseProduct(gr.value(bid).vec());
    gr.grad(bid).vec() += self.grad.vec().cwiseProduct(gr.value(aid).vec());
  };
  return g.create(std::move(out), OpTag::kMul, {aid, bid}, backward);
}

template <typename S>
Var<S> scale(Var<S> a, S c) {
  Tensor<S> out(a.value().shape());
  out.vec() = a.value().vec() * c;
  Graph<S>& g = a.graph();
  const std::int32_t aid = a.id();
  auto backward = [=](Graph<S>& gr, const typename Graph<S>::Node& self) {
    gr.grad(aid).vec() += self.grad.vec() * c;
  };
  return g.create(std::move(out), OpTag::kScale, {aid}, backward);
}

template <typename S>
Var<S> negate(Var<S> a) {
  return scale(a, S(-1));
}

template <typename S>
Var<S> sum(Var<S> a) {
  double acc = 0;
  for (std::int64_t i = 0; i < a.value().numel(); ++i) acc += double(a.value()[i]);
  Graph<S>& g = a.graph();
  const std::int32_t aid = a.id();
  auto backward = [aid](Graph<S>& gr, const typename Graph<S>::Node& self) {
    gr.grad(aid).vec().array() += self.grad[0];
  };
  return g.create(Tensor<S>::scalar(S(acc)), OpTag::kSum, {aid}, backward);
}

// out[k, :] = sum of rows of x whose label is k. Labels must lie in [0, C).
template <typename S>
Var<S> segment_sum(Var<S> x, std::vector<std::int32_t> labels, std::int64_t num_segments) {
  const Tensor<S>& xv = x.value();
  if (xv.rank() != 2) throw ShapeError("segment_sum: input must be [M,D], got " + shape_str(xv.shape()));
  const std::int64_t mrows = xv.dim(0), d = xv.dim(1);
  if (std::int64_t(labels.size()) != mrows)
    throw ShapeError("segment_sum: label count " + std::to_string(labels.size()) +
                     " != rows " + std::to_string(mrows));
  for (auto l : labels)
    if (l < 0 || std::int64_t(l) >= num_segments)
      throw ShapeError("segment_sum: label " + std::to_string(l) + " out of range [0," +
                       std::to_string(num_segments) + ")");
  Tensor<S> out({num_segments, d});
  for (std::int64_t i = 0; i < mrows; ++i) {
    const S* src = xv.data() + i * d;
    S* dst = out.data() + std::int64_t(labels[std::size_t(i)]) * d;
    for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
  }
  Graph<S>& g = x.graph();
  const std::int32_t xid = x.id();
  auto backward = [xid, d, labels = std::move(labels)](Graph<S>& gr,
                                                       const typename Graph<S>::Node& self) {
    Tensor<S>& dx = gr.grad(xid);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const S* src = self.grad.data() + std::int64_t(labels[i]) * d;
      S* dst = dx.data() + std::int64_t(i) * d;
      for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  };
  return g.create(std::move(out), OpTag::kSegmentSum, {xid}, backward);
}

// Pairwise features for the metric head: row (i*C + k) of the output is
// [q_i | o_k | (q_i - o_k) element-squared], shape [Nq*C, 3D].
template <typename S>
Var<S> pair_features(Var<S> queries, Var<S> centroids) {
  const Tensor<S>& q = queries.value();
  const Tensor<S>& o = centroids.value();
  if (q.rank() != 2 || o.rank() != 2 || q.dim(1) != o.dim(1))
    throw ShapeError("pair_features: need [Nq,D] and [C,D] with equal D, got " +
                     shape_str(q.shape()) + " vs " + shape_str(o.shape()));
  const std::int64_t nq = q.dim(0), c = o.dim(0), d = q.dim(1);
  Tensor<S> out({nq * c, 3 * d});
  for (std::int64_t i = 0; i < nq; ++i) {
    const S* qi = q.data() + i * d;
    for (std::int64_t k = 0; k < c; ++k) {
      const S* ok = o.data() + k * d;
      S* row = out.data() + (i * c + k) * 3 * d;
      for (std::int64_t j = 0; j < d; ++j) {
        const S diff = qi[j] - ok[j];
        row[j] = qi[j];
        row[d + j] = ok[j];
        row[2 * d + j] = diff * diff;
      }
    }
  }
  Graph<S>& g = queries.graph();
  const std::int32_t qid = queries.id(), oid = centroids.id();
  auto backward = [=](Graph<S>& gr, const typename Graph<S>::Node& self) {
    const Tensor<S>& qv = gr.value(qid);
    const Tensor<S>& ov = gr.value(oid);
    Tensor<S>& dq = gr.grad(qid);
    Tensor<S>& dcent = gr.grad(oid);
    for (std::int64_t i = 0; i < nq; ++i) {
      const S* qi = qv.data() + i * d;
      S* dqi = dq.data() + i * d;
      for (std::int64_t k = 0; k < c; ++k) {
        const S* ok = ov.data() + k * d;
        S* dok = dcent.data() + k * d;
        const S* row = self.grad.data() + (i * c + k) * 3 * d;
        for (std::int64_t j = 0; j < d; ++j) {
          const S two_diff = S(2) * (qi[j] - ok[j]);
          dqi[j] += row[j] + row[2 * d + j] * two_diff;
          dok[j] += row[d + j] - row[2 * d + j] * two_diff;
        }
      }
    }
  };
  return g.create(std::move(out), OpTag::kPairFeatures, {qid, oid}, backward);
}

// Mean negative log-likelihood of the true labels given log-probability
// rows: -(1/N) sum_i logp[i, y_i].
template <typename S>
Var<S> nll_mean(Var<S> log_probs, std::vector<std::int32_t> labels) {
  const Tensor<S>& lp = log_probs.value();
  if (lp.rank() != 2) throw ShapeError("nll_mean: input must be [N,K], got " + shape_str(lp.shape()));
  const std::int64_t n = lp.dim(0), k = lp.dim(1);
  if (std::int64_t(labels.size()) != n)
    throw ShapeError("nll_mean: label count mismatch");
  double acc = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto y = labels[std::size_t(i)];
    if (y < 0 || std::int64_t(y) >= k)
      throw ShapeError("nll_mean: label " + std::to_string(y) + " out of range [0," +
                       std::to_string(k) + ")");
    acc -= double(lp[i * k + y]);
  }
  Graph<S>& g = log_probs.graph();
  const std::int32_t pid = log_probs.id();
  auto backward = [pid, n, k, labels = std::move(labels)](Graph<S>& gr,
                                                          const typename Graph<S>::Node& self) {
    Tensor<S>& dp = gr.grad(pid);
    const S gy = self.grad[0] / S(n);
    for (std::int64_t i = 0; i < n; ++i) dp[i * k + labels[std::size_t(i)]] -= gy;
  };
  return g.create(Tensor<S>::scalar(S(acc / double(n))), OpTag::kNllMean, {pid}, backward);
}

// Plain-tensor row-wise log softmax; shares semantics with the graph op.
// Used where no gradient is needed (fixed-distance evaluation heads).
template <typename S>
Tensor<S> log_softmax_rows(const Tensor<S>& x) {
  if (x.rank() != 2) throw ShapeError("log_softmax_rows: input must be [N,K]");
  const std::int64_t n = x.dim(0), k = x.dim(1);
  Tensor<S> out(x.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    const S* row = x.data() + i * k;
    S* o = out.data() + i * k;
    S mx = row[0];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double lse = 0;
    for (std::int64_t j = 0; j < k; ++j) lse += std::exp(double(row[j] - mx));
    const S shift = mx + S(std::log(lse));
    for (std::int64_t j = 0; j < k; ++j) o[j] = row[j] - shift;
  }
  return out;
}

}  // namespace fewshot
