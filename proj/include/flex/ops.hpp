#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "flex/tape.hpp"
#include "flex/tensor.hpp"

namespace flex {

// ---------------------------------------------------------------------------
// Pure kernels
// ---------------------------------------------------------------------------

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, int stride, int pad) {
  const std::size_t padded = in + 2 * static_cast<std::size_t>(pad);
  require(k <= padded, ErrorKind::Shape,
          "kernel extent " + std::to_string(k) + " exceeds padded input " + std::to_string(padded));
  return (padded - k) / static_cast<std::size_t>(stride) + 1;
}

namespace detail {

// Output positions o in [lo, hi) keep o*stride + k - pad inside [0, in).
inline void valid_range(std::size_t out, std::size_t in, int stride, int k, int pad, std::size_t& lo,
                        std::size_t& hi) {
  const long s = stride;
  long first = pad - k;  // smallest o*s satisfying o*s + k - pad >= 0
  long l = first <= 0 ? 0 : (first + s - 1) / s;
  long last = static_cast<long>(in) - 1 + pad - k;  // o*s <= last
  long h = last < 0 ? 0 : last / s + 1;
  lo = static_cast<std::size_t>(std::clamp<long>(l, 0, static_cast<long>(out)));
  hi = static_cast<std::size_t>(std::clamp<long>(h, static_cast<long>(lo), static_cast<long>(out)));
}

template <class T>
void check_conv_shapes(const Tensor<T>& input, const Tensor<T>& kernel, int stride, int pad) {
  require(input.rank() == 3, ErrorKind::Shape, "conv2d input must be [C,H,W], got " + shape_str(input.shape()));
  require(kernel.rank() == 4, ErrorKind::Shape,
          "conv2d kernel must be [Cout,Cin,kh,kw], got " + shape_str(kernel.shape()));
  require(kernel.extent(1) == input.extent(0), ErrorKind::Shape,
          "conv2d kernel expects " + std::to_string(kernel.extent(1)) + " input channels, input has " +
              std::to_string(input.extent(0)));
  require(stride > 0, ErrorKind::Parameter, "conv2d stride must be positive");
  require(pad >= 0, ErrorKind::Parameter, "conv2d padding must be non-negative");
}

}  // namespace detail

/// Cross-correlation of a [C_in,H,W] input with a [C_out,C_in,kh,kw] kernel.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, int stride, int pad) {
  detail::check_conv_shapes(input, kernel, stride, pad);
  const std::size_t cin = input.extent(0), h = input.extent(1), w = input.extent(2);
  const std::size_t cout = kernel.extent(0), kh = kernel.extent(2), kw = kernel.extent(3);
  const std::size_t oh = conv_out_extent(h, kh, stride, pad), ow = conv_out_extent(w, kw, stride, pad);
  Tensor<T> out({cout, oh, ow});
  const T* in = input.raw();
  const T* kr = kernel.raw();
  T* o = out.raw();
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t ky = 0; ky < kh; ++ky) {
        std::size_t ylo, yhi;
        detail::valid_range(oh, h, stride, static_cast<int>(ky), pad, ylo, yhi);
        for (std::size_t kx = 0; kx < kw; ++kx) {
          std::size_t xlo, xhi;
          detail::valid_range(ow, w, stride, static_cast<int>(kx), pad, xlo, xhi);
          const T wv = kr[((co * cin + ci) * kh + ky) * kw + kx];
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const std::size_t iy = oy * stride + ky - pad;
            const T* row = in + (ci * h + iy) * w;
            T* orow = o + (co * oh + oy) * ow;
            for (std::size_t ox = xlo; ox < xhi; ++ox) orow[ox] += wv * row[ox * stride + kx - pad];
          }
        }
      }
    }
  }
  return out;
}

template <class T>
void check_affine_shapes(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require(weight.rank() == 2, ErrorKind::Shape, "affine weight must be [D_out,D_in], got " + shape_str(weight.shape()));
  require(input.size() == weight.extent(1), ErrorKind::Shape,
          "affine input has " + std::to_string(input.size()) + " values, weight expects " +
              std::to_string(weight.extent(1)));
  require(bias.size() == weight.extent(0), ErrorKind::Shape,
          "affine bias has " + std::to_string(bias.size()) + " values, weight produces " +
              std::to_string(weight.extent(0)));
}

/// weight * input + bias; input is read as a flat vector.
template <class T>
Tensor<T> affine(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  check_affine_shapes(input, weight, bias);
  const std::size_t dout = weight.extent(0), din = weight.extent(1);
  Tensor<T> out({dout});
  const T* x = input.raw();
  for (std::size_t o = 0; o < dout; ++o) {
    const T* row = weight.raw() + o * din;
    T acc = T{0};
    for (std::size_t i = 0; i < din; ++i) acc += row[i] * x[i];
    out[o] = acc + bias[o];
  }
  return out;
}

template <class T>
void require_finite(std::span<const T> values, const char* what) {
  for (T v : values) {
    if (!std::isfinite(v)) fail(ErrorKind::Numeric, std::string(what) + " contains non-finite values");
  }
}

template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
  Tensor<T> p(logits.shape());
  const T m = *std::max_element(logits.data().begin(), logits.data().end());
  T z = T{0};
  for (std::size_t k = 0; k < logits.size(); ++k) z += (p[k] = std::exp(logits[k] - m));
  for (std::size_t k = 0; k < logits.size(); ++k) p[k] /= z;
  return p;
}

/// -log softmax(logits)[target], evaluated with max subtraction.
template <class T>
T softmax_cross_entropy(const Tensor<T>& logits, std::size_t target) {
  require(logits.size() > 0 && target < logits.size(), ErrorKind::Parameter,
          "target " + std::to_string(target) + " out of range for " + std::to_string(logits.size()) + " logits");
  require_finite(logits.data(), "logits");
  const T m = *std::max_element(logits.data().begin(), logits.data().end());
  T z = T{0};
  for (T v : logits.data()) z += std::exp(v - m);
  return std::log(z) - (logits[target] - m);
}

template <class T>
T softplus_scalar(T x) {
  // log(1 + e^x) without overflow
  return x > T{0} ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <class T>
T sigmoid_scalar(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

// ---------------------------------------------------------------------------
// Recorded ops
// ---------------------------------------------------------------------------

namespace ops {

template <class T>
Var conv2d(Tape<T>& tape, Var input, Var kernel, int stride, int pad) {
  detail::check_conv_shapes(tape.value(input), tape.value(kernel), stride, pad);
  return tape.record(
      {input, kernel},
      [stride, pad](Tape<T>& t, std::size_t id) {
        auto& n = t.node(id);
        n.value = flex::conv2d(t.value(n.inputs[0]), t.value(n.inputs[1]), stride, pad);
      },
      [stride, pad](Tape<T>& t, std::size_t id) {
        const auto& n = t.node(id);
        const Tensor<T>& in = t.value(n.inputs[0]);
        const Tensor<T>& k = t.value(n.inputs[1]);
        const Tensor<T>& g = n.grad;
        const bool need_in = t.requires_grad(n.inputs[0]);
        const bool need_k = t.requires_grad(n.inputs[1]);
        const std::size_t cin = in.extent(0), h = in.extent(1), w = in.extent(2);
        const std::size_t cout = k.extent(0), kh = k.extent(2), kw = k.extent(3);
        const std::size_t oh = g.extent(1), ow = g.extent(2);
        T* gin = need_in ? t.grad_buffer(n.inputs[0]).raw() : nullptr;
        T* gk = need_k ? t.grad_buffer(n.inputs[1]).raw() : nullptr;
        const T* x = in.raw();
        const T* kr = k.raw();
        const T* go = g.raw();
        for (std::size_t co = 0; co < cout; ++co) {
          for (std::size_t ci = 0; ci < cin; ++ci) {
            for (std::size_t ky = 0; ky < kh; ++ky) {
              std::size_t ylo, yhi;
              detail::valid_range(oh, h, stride, static_cast<int>(ky), pad, ylo, yhi);
              for (std::size_t kx = 0; kx < kw; ++kx) {
                std::size_t xlo, xhi;
                detail::valid_range(ow, w, stride, static_cast<int>(kx), pad, xlo, xhi);
                const std::size_t kidx = ((co * cin + ci) * kh + ky) * kw + kx;
                const T wv = kr[kidx];
                T acc = T{0};
                for (std::size_t oy = ylo; oy < yhi; ++oy) {
                  const std::size_t iy = oy * stride + ky - pad;
                  const T* grow = go + (co * oh + oy) * ow;
                  const std::size_t base = (ci * h + iy) * w;
                  if (gk) {
                    const T* row = x + base;
                    for (std::size_t ox = xlo; ox < xhi; ++ox) acc += grow[ox] * row[ox * stride + kx - pad];
                  }
                  if (gin) {
                    T* grow_in = gin + base;
                    for (std::size_t ox = xlo; ox < xhi; ++ox) grow_in[ox * stride + kx - pad] += wv * grow[ox];
                  }
                }
                if (gk) gk[kidx] += acc;
              }
            }
          }
        }
      });
}

/// Adds a per-channel bias to a [C,H,W] tensor.
template <class T>
Var channel_bias(Tape<T>& tape, Var x, Var bias) {
  const auto& xs = tape.value(x);
  require(xs.rank() == 3 && tape.value(bias).size() == xs.extent(0), ErrorKind::Shape,
          "channel_bias: bias of " + std::to_string(tape.value(bias).size()) + " values for input " +
              shape_str(xs.shape()));
  return tape.record(
      {x, bias},
      [](Tape<T>& t, std::size_t id) {
        auto& n = t.node(id);
        n.value = t.value(n.inputs[0]);
        const auto& b = t.value(n.inputs[1]);
        const std::size_t c = n.value.extent(0), hw = n.value.extent(1) * n.value.extent(2);
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < hw; ++i) n.value[ch * hw + i] += b[ch];
      },
      [](Tape<T>& t, std::size_t id) {
        const auto& n = t.node(id);
        const std::size_t c = n.grad.extent(0), hw = n.grad.extent(1) * n.grad.extent(2);
        if (t.requires_grad(n.inputs[0])) {
          auto& gx = t.grad_buffer(n.inputs[0]);
          for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i];
        }
        if (t.requires_grad(n.inputs[1])) {
          auto& gb = t.grad_buffer(n.inputs[1]);
          for (std::size_t ch = 0; ch < c; ++ch) {
            T acc = T{0};
            for (std::size_t i = 0; i < hw; ++i) acc += n.grad[ch * hw + i];
            gb[ch] += acc;
          }
        }
      });
}

template <class T>
Var affine(Tape<T>& tape, Var input, Var weight, Var bias) {
  check_affine_shapes(tape.value(input), tape.value(weight), tape.value(bias));
  return tape.record(
      {input, weight, bias},
      [](Tape<T>& t, std::size_t id) {
        auto& n = t.node(id);
        n.value = flex::affine(t.value(n.inputs[0]), t.value(n.inputs[1]), t.value(n.inputs[2]));
      },
      [](Tape<T>& t, std::size_t id) {
        const auto& n = t.node(id);
        const auto& x = t.value(n.inputs[0]);
        const auto& wt = t.value(n.inputs[1]);
        const std::size_t dout = wt.extent(0), din = wt.extent(1);
        const T* g = n.grad.raw();
        if (t.requires_grad(n.inputs[0])) {
          T* gx = t.grad_buffer(n.inputs[0]).raw();
          for (std::size_t o = 0; o < dout; ++o) {
            const T* row = wt.raw() + o * din;
            const T go = g[o];
            for (std::size_t i = 0; i < din; ++i) gx[i] += row[i] * go;
          }
        }
        if (t.requires_grad(n.inputs[1])) {
          T* gw = t.grad_buffer(n.inputs[1]).raw();
          const T* xv = x.raw();
          for (std::size_t o = 0; o < dout; ++o) {
            T* row = gw + o * din;
            const T go = g[o];
            for (std::size_t i = 0; i < din; ++i) row[i] += go * xv[i];
          }
        }
        if (t.requires_grad(n.inputs[2])) {
          auto& gb = t.grad_buffer(n.inputs[2]);
          for (std::size_t o = 0; o < dout; ++o) gb[o] += g[o];
        }
      });
}

template <class T>
Var relu(Tape<T>& tape, Var x) {
  return tape.record(
      {x},
      [](Tape<T>& t, std::size_t id) {
        auto& n = t.node(id);
        n.value = t.value(n.inputs[0]);
        for (auto& v : n.value.data()) v = v > T{0} ? v : T{0};
      },
      [](Tape<T>& t, std::size_t id) {
        const auto& n = t.node(id);
        const auto& in = t.value(n.inputs[0]);
        auto& gx = t.grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < in.size(); ++i)
          if (in[i] > T{0}) gx[i] += n.grad[i];
      });
}

template <class T>
Var softplus(Tape<T>& tape, Var x) {
  return tape.record(
      {x},
      [](Tape<T>& t, std::size_t id) {
        auto& n = t.node(id);
        n.value = t.value(n.inputs[0]);
        for (auto& v : n.value.data()) v = softplus_scalar(v);
      },
      [](Tape<T>& t, std::size_t id) {
        const auto& n = t.node(id);
        const auto& in = t.value(n.inputs[0]);
        auto& gx = t.grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < in.size(); ++i) gx[i] += n.grad[i] * sigmoid_scalar(in[i]);
      });
}

/// Reinterprets a tensor with a new shape of the same size.
template <class T>
Var reshape(Tape<T>& tape, Var x, Shape shape) {
  require(shape_size(shape) == tape.value(x).size(), ErrorKind::Shape,
          "reshape " + shape_str(tape.value(x).shape()) + " to " + shape_str(shape));
  return tape.record(
      {x},
      [shape](Tape<T>& t, std::size_t id) {
        auto& n = t.node(id);
        n.value = t.value(n.inputs[0]).reshaped(shape);
      },
      [](Tape<T>& t, std::size_t id) {
        const auto& n = t.node(id);
        auto& gx = t.grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i];
      });
}

template <class T>
Var flatten(Tape<T>& tape, Var x) {
  return reshape(tape, x, Shape{tape.value(x).size()});
}

/// [C,H,W] -> [C] spatial mean.
template <class T>
Var global_avg_pool(Tape<T>& tape, Var x) {
  require(tape.value(x).rank() == 3, ErrorKind::Shape, "global_avg_pool expects [C,H,W]");
  return tape.record(
      {x},
      [](Tape<T>& t, std::size_t id) {
        auto& n = t.node(id);
        const auto& in = t.value(n.inputs[0]);
        const std::size_t c = in.extent(0), hw = in.extent(1) * in.extent(2);
        n.value = Tensor<T>({c});
        for (std::size_t ch = 0; ch < c; ++ch) {
          T acc = T{0};
          for (std::size_t i = 0; i < hw; ++i) acc += in[ch * hw + i];
          n.value[ch] = acc / static_cast<T>(hw);
        }
      },
      [](Tape<T>& t, std::size_t id) {
        const auto& n = t.node(id);
        const auto& in = t.value(n.inputs[0]);
        const std::size_t c = in.extent(0), hw = in.extent(1) * in.extent(2);
        auto& gx = t.grad_buffer(n.inputs[0]);
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < hw; ++i) gx[ch * hw + i] += n.grad[ch] / static_cast<T>(hw);
      });
}

/// Channel-wise concatenation of [C_i,H,W] tensors sharing H and W.
template <class T>
Var concat_channels(Tape<T>& tape, const std::vector<Var>& parts) {
  require(!parts.empty(), ErrorKind::Shape, "concat_channels of nothing");
  const auto& first = tape.value(parts.front());
  for (Var p : parts) {
    const auto& v = tape.value(p);
    require(v.rank() == 3 && v.extent(1) == first.extent(1) && v.extent(2) == first.extent(2), ErrorKind::Shape,
            "concat_channels spatial mismatch: " + shape_str(v.shape()) + " vs " + shape_str(first.shape()));
  }
  return tape.record(
      parts,
      [](Tape<T>& t, std::size_t id) {
        auto& n = t.node(id);
        const auto& f = t.value(n.inputs[0]);
        std::size_t channels = 0;
        for (std::size_t in : n.inputs) channels += t.value(in).extent(0);
        n.value = Tensor<T>({channels, f.extent(1), f.extent(2)});
        std::size_t off = 0;
        for (std::size_t in : n.inputs) {
          const auto& v = t.value(in);
          std::copy(v.data().begin(), v.data().end(), n.value.data().begin() + static_cast<std::ptrdiff_t>(off));
          off += v.size();
        }
      },
      [](Tape<T>& t, std::size_t id) {
        const auto& n = t.node(id);
        std::size_t off = 0;
        for (std::size_t in : n.inputs) {
          const std::size_t sz = t.value(in).size();
          if (t.requires_grad(in)) {
            auto& g = t.grad_buffer(in);
            for (std::size_t i = 0; i < sz; ++i) g[i] += n.grad[off + i];
          }
          off += sz;
        }
      });
}

/// Elementwise product of equally shaped tensors.
template <class T>
Var mul(Tape<T>& tape, Var a, Var b) {
  require_same_shape(tape.value(a), tape.value(b), "mul");
  return tape.record(
      {a, b},
      [](Tape<T>& t, std::size_t id) {
        auto& n = t.node(id);
        n.value = t.value(n.inputs[0]);
        const auto& bv = t.value(n.inputs[1]);
        for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] *= bv[i];
      },
      [](Tape<T>& t, std::size_t id) {
        const auto& n = t.node(id);
        const auto& av = t.value(n.inputs[0]);
        const auto& bv = t.value(n.inputs[1]);
        if (t.requires_grad(n.inputs[0])) {
          auto& g = t.grad_buffer(n.inputs[0]);
          for (std::size_t i = 0; i < av.size(); ++i) g[i] += n.grad[i] * bv[i];
        }
        if (t.requires_grad(n.inputs[1])) {
          auto& g = t.grad_buffer(n.inputs[1]);
          for (std::size_t i = 0; i < av.size(); ++i) g[i] += n.grad[i] * av[i];
        }
      });
}

/// Scalar-weighted sum of equally shaped tensors: sum_i c_i * x_i.
template <class T>
Var linear_combination(Tape<T>& tape, const std::vector<Var>& xs, std::vector<T> coeffs) {
  require(!xs.empty() && xs.size() == coeffs.size(), ErrorKind::Shape, "linear_combination arity mismatch");
  for (Var x : xs) require_same_shape(tape.value(x), tape.value(xs.front()), "linear_combination");
  return tape.record(
      xs,
      [coeffs](Tape<T>& t, std::size_t id) {
        auto& n = t.node(id);
        n.value = Tensor<T>(t.value(n.inputs[0]).shape());
        for (std::size_t j = 0; j < n.inputs.size(); ++j) {
          const auto& v = t.value(n.inputs[j]);
          for (std::size_t i = 0; i < v.size(); ++i) n.value[i] += coeffs[j] * v[i];
        }
      },
      [coeffs](Tape<T>& t, std::size_t id) {
        const auto& n = t.node(id);
        for (std::size_t j = 0; j < n.inputs.size(); ++j) {
          if (!t.requires_grad(n.inputs[j]) || coeffs[j] == T{0}) continue;
          auto& g = t.grad_buffer(n.inputs[j]);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += coeffs[j] * n.grad[i];
        }
      });
}

template <class T>
Var sum(Tape<T>& tape, const std::vector<Var>& xs) {
  return linear_combination(tape, xs, std::vector<T>(xs.size(), T{1}));
}

template <class T>
Var scale(Tape<T>& tape, Var x, T c) {
  return linear_combination(tape, {x}, {c});
}

/// Sum of all entries -> scalar.
template <class T>
Var sum_all(Tape<T>& tape, Var x) {
  return tape.record(
      {x},
      [](Tape<T>& t, std::size_t id) {
        auto& n = t.node(id);
        T acc = T{0};
        for (T v : t.value(n.inputs[0]).data()) acc += v;
        n.value = Tensor<T>::scalar(acc);
      },
      [](Tape<T>& t, std::size_t id) {
        const auto& n = t.node(id);
        auto& g = t.grad_buffer(n.inputs[0]);
        for (auto& v : g.data()) v += n.grad[0];
      });
}

template <class T>
Var softmax(Tape<T>& tape, Var logits) {
  return tape.record(
      {logits},
      [](Tape<T>& t, std::size_t id) {
        auto& n = t.node(id);
        n.value = flex::softmax(t.value(n.inputs[0]));
      },
      [](Tape<T>& t, std::size_t id) {
        const auto& n = t.node(id);
        const auto& p = n.value;
        T dot = T{0};
        for (std::size_t k = 0; k < p.size(); ++k) dot += n.grad[k] * p[k];
        auto& g = t.grad_buffer(n.inputs[0]);
        for (std::size_t k = 0; k < p.size(); ++k) g[k] += p[k] * (n.grad[k] - dot);
      });
}

template <class T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::size_t target) {
  (void)flex::softmax_cross_entropy(tape.value(logits), target);  // validates
  return tape.record(
      {logits},
      [target](Tape<T>& t, std::size_t id) {
        auto& n = t.node(id);
        n.value = Tensor<T>::scalar(flex::softmax_cross_entropy(t.value(n.inputs[0]), target));
      },
      [target](Tape<T>& t, std::size_t id) {
        const auto& n = t.node(id);
        const Tensor<T> p = flex::softmax(t.value(n.inputs[0]));
        auto& g = t.grad_buffer(n.inputs[0]);
        for (std::size_t k = 0; k < p.size(); ++k) g[k] += n.grad[0] * (p[k] - (k == target ? T{1} : T{0}));
      });
}

/// Sum over entries of smooth-L1(pred - target) with transition at beta.
template <class T>
Var smooth_l1(Tape<T>& tape, Var pred, Tensor<T> target, T beta) {
  require_same_shape(tape.value(pred), target, "smooth_l1");
  return tape.record(
      {pred},
      [target, beta](Tape<T>& t, std::size_t id) {
        auto& n = t.node(id);
        const auto& p = t.value(n.inputs[0]);
        T acc = T{0};
        for (std::size_t i = 0; i < p.size(); ++i) {
          const T d = std::abs(p[i] - target[i]);
          acc += d < beta ? T{0.5} * d * d / beta : d - T{0.5} * beta;
        }
        n.value = Tensor<T>::scalar(acc);
      },
      [target, beta](Tape<T>& t, std::size_t id) {
        const auto& n = t.node(id);
        const auto& p = t.value(n.inputs[0]);
        auto& g = t.grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < p.size(); ++i) {
          const T d = p[i] - target[i];
          const T slope = std::abs(d) < beta ? d / beta : (d > T{0} ? T{1} : T{-1});
          g[i] += n.grad[0] * slope;
        }
      });
}

/// Normalized weighted sum: sum_k w_k f_k / sum_j w_j.
///
/// Throws DegenerateWeights when sum_j w_j <= eps at record time.
template <class T>
Var weighted_fuse(Tape<T>& tape, const std::vector<Var>& features, Var weights, T eps) {
  require(!features.empty(), ErrorKind::Shape, "weighted_fuse of no features");
  const auto& w = tape.value(weights);
  require(w.size() == features.size(), ErrorKind::Shape,
          "weighted_fuse: " + std::to_string(w.size()) + " weights for " + std::to_string(features.size()) +
              " features");
  for (Var f : features) require_same_shape(tape.value(f), tape.value(features.front()), "weighted_fuse");
  T total = T{0};
  for (T v : w.data()) total += v;
  if (!(total > eps)) fail(ErrorKind::DegenerateWeights, "fusion weights sum to " + std::to_string(total));

  std::vector<Var> inputs(features);
  inputs.push_back(weights);
  return tape.record(
      inputs,
      [](Tape<T>& t, std::size_t id) {
        auto& n = t.node(id);
        const std::size_t levels = n.inputs.size() - 1;
        const auto& wv = t.value(n.inputs[levels]);
        T total = T{0};
        for (T v : wv.data()) total += v;
        n.value = Tensor<T>(t.value(n.inputs[0]).shape());
        for (std::size_t k = 0; k < levels; ++k) {
          if (wv[k] == T{0}) continue;
          const auto& f = t.value(n.inputs[k]);
          const T c = wv[k] / total;
          for (std::size_t i = 0; i < f.size(); ++i) n.value[i] += c * f[i];
        }
      },
      [](Tape<T>& t, std::size_t id) {
        const auto& n = t.node(id);
        const std::size_t levels = n.inputs.size() - 1;
        const auto& wv = t.value(n.inputs[levels]);
        T total = T{0};
        for (T v : wv.data()) total += v;
        const bool need_w = t.requires_grad(n.inputs[levels]);
        // d out / d w_k = (f_k - out) / total
        T g_dot_out = T{0};
        if (need_w)
          for (std::size_t i = 0; i < n.grad.size(); ++i) g_dot_out += n.grad[i] * n.value[i];
        std::vector<T> gw(levels, T{0});
        for (std::size_t k = 0; k < levels; ++k) {
          const auto& f = t.value(n.inputs[k]);
          if (need_w) {
            T acc = T{0};
            for (std::size_t i = 0; i < f.size(); ++i) acc += n.grad[i] * f[i];
            gw[k] = (acc - g_dot_out) / total;
          }
          if (t.requires_grad(n.inputs[k]) && wv[k] != T{0}) {
            auto& gf = t.grad_buffer(n.inputs[k]);
            const T c = wv[k] / total;
            for (std::size_t i = 0; i < f.size(); ++i) gf[i] += c * n.grad[i];
          }
        }
        if (need_w) {
          auto& g = t.grad_buffer(n.inputs[levels]);
          for (std::size_t k = 0; k < levels; ++k) g[k] += gw[k];
        }
      });
}

}  // namespace ops
}  // namespace flex
