#pragma once

// Differentiable primitives over Tape/Var. Every op validates shapes, computes its forward value
// eagerly and records a closure that maps the output gradient onto its inputs.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dam/tape.hpp"
#include "dam/tensor.hpp"

namespace dam {

enum class PoolKind { max2x2, global_avg };
enum class Activation { relu, sigmoid };
enum class NormAxis { rows, columns };

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

inline void require(bool ok, const std::string& message) {
    if (!ok) throw ShapeError(message);
}

template <typename T>
bool any_requires_grad(std::initializer_list<Var<T>> vars) {
    for (const auto& v : vars)
        if (v.requires_grad()) return true;
    return false;
}

// Geometry of a [B,H,W,C] activation; rank-3 inputs are a batch of one.
struct Image4 {
    std::size_t batch, height, width, channels;
    bool batched;
};

inline Image4 as_image(const Shape& s, const char* op) {
    if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
    if (s.size() == 3) return {1, s[0], s[1], s[2], false};
    throw ShapeError(std::string(op) + " expects [H,W,C] or [B,H,W,C], got " + to_string(s));
}

inline Shape image_shape(const Image4& g, std::size_t h, std::size_t w, std::size_t c) {
    if (g.batched) return {g.batch, h, w, c};
    return {h, w, c};
}

// Per-thread reusable buffer; contents are unspecified on return. Slots keep concurrently needed
// buffers apart.
template <typename T>
T* scratch(std::size_t slot, std::size_t count) {
    thread_local std::vector<T> buffers[2];
    std::vector<T>& b = buffers[slot];
    if (b.size() < count) b.resize(count);
    return b.data();
}

// Same-padding patch matrix: one row per output pixel, columns ordered (dy, dx, c).
template <typename T>
void im2col(const T* x, const Image4& g, std::size_t kh, std::size_t kw, T* cols) {
    const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);
    const std::size_t row_len = kh * kw * g.channels;
    for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t i = 0; i < g.height; ++i) {
            for (std::size_t j = 0; j < g.width; ++j) {
                T* row = cols + ((b * g.height + i) * g.width + j) * row_len;
                for (std::size_t dy = 0; dy < kh; ++dy) {
                    const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(i + dy) - ph;
                    for (std::size_t dx = 0; dx < kw; ++dx) {
                        const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(j + dx) - pw;
                        T* dst = row + (dy * kw + dx) * g.channels;
                        if (y < 0 || xx < 0 || y >= static_cast<std::ptrdiff_t>(g.height) ||
                            xx >= static_cast<std::ptrdiff_t>(g.width)) {
                            std::fill(dst, dst + g.channels, T{0});
                        } else {
                            const T* src = x + ((b * g.height + static_cast<std::size_t>(y)) * g.width +
                                                static_cast<std::size_t>(xx)) * g.channels;
                            std::memcpy(dst, src, g.channels * sizeof(T));
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* cols, const Image4& g, std::size_t kh, std::size_t kw, T* dx_out) {
    const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);
    const std::size_t row_len = kh * kw * g.channels;
    for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t i = 0; i < g.height; ++i) {
            for (std::size_t j = 0; j < g.width; ++j) {
                const T* row = cols + ((b * g.height + i) * g.width + j) * row_len;
                for (std::size_t dy = 0; dy < kh; ++dy) {
                    const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(i + dy) - ph;
                    if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.height)) continue;
                    for (std::size_t dx = 0; dx < kw; ++dx) {
                        const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(j + dx) - pw;
                        if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.width)) continue;
                        const T* __restrict src = row + (dy * kw + dx) * g.channels;
                        T* __restrict dst = dx_out + ((b * g.height + static_cast<std::size_t>(y)) * g.width +
                                                      static_cast<std::size_t>(xx)) * g.channels;
                        for (std::size_t c = 0; c < g.channels; ++c) dst[c] += src[c];
                    }
                }
            }
        }
    }
}

// f(x) forward; df(x, y) is dy/dx given input x and output y.
template <typename T, typename F, typename DF>
Var<T> elementwise(Var<T> a, F f, DF df, const char* op) {
    const Tensor<T>& av = a.value();
    Tensor<T> out(av.shape());
    const T* __restrict in = av.raw();
    T* __restrict o = out.raw();
    for (std::size_t i = 0, n = av.size(); i < n; ++i) o[i] = f(in[i]);
    Tape<T>& tape = a.tape();
    const std::size_t out_id = tape.size();
    return tape.record(std::move(out), a.requires_grad(),
                       [a, df, out_id](Tape<T>& t, const Tensor<T>& g) {
                           const Tensor<T>& x = a.value();
                           const Tensor<T>& y = t.value(Var<T>(&t, out_id));
                           T* __restrict slot = t.grad_slot(a)->raw();
                           const T* __restrict xv = x.raw();
                           const T* __restrict yv = y.raw();
                           const T* __restrict gv = g.raw();
                           for (std::size_t i = 0, n = g.size(); i < n; ++i) slot[i] += gv[i] * df(xv[i], yv[i]);
                       },
                       op);
}

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// Convolution and pooling

/// Stride-1, same-padded cross-correlation. input [H,W,Cin] or [B,H,W,Cin]; kernel [kh,kw,Cin,Cout].
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel) {
    using detail::require;
    const detail::Image4 g = detail::as_image(input.shape(), "conv2d");
    const Shape& ks = kernel.shape();
    require(ks.size() == 4, "conv2d kernel must be [kh,kw,Cin,Cout], got " + to_string(ks));
    const std::size_t kh = ks[0], kw = ks[1], cin = ks[2], cout = ks[3];
    require(kh % 2 == 1 && kw % 2 == 1, "conv2d kernel sides must be odd, got " + to_string(ks));
    require(cin == g.channels, "conv2d input channels " + std::to_string(g.channels) +
                                   " do not match kernel " + to_string(ks));

    const std::size_t rows = g.batch * g.height * g.width;
    const std::size_t depth = kh * kw * cin;
    T* cols = detail::scratch<T>(0, rows * depth);
    detail::im2col(input.value().raw(), g, kh, kw, cols);
    Tensor<T> out(detail::image_shape(g, g.height, g.width, cout));
    {
        // One product per image, so an image's output does not depend on what else is in the batch.
        const std::size_t per = g.height * g.width;
        detail::ConstMatrixMap<T> k(kernel.value().raw(), depth, cout);
        for (std::size_t b = 0; b < g.batch; ++b) {
            detail::ConstMatrixMap<T> c(cols + b * per * depth, per, depth);
            detail::MatrixMap<T> o(out.raw() + b * per * cout, per, cout);
            o.noalias() = c * k;
        }
    }
    Tape<T>& tape = input.tape();
    return tape.record(
        std::move(out), detail::any_requires_grad({input, kernel}),
        [input, kernel, g, kh, kw, rows, depth, cout](Tape<T>& t, const Tensor<T>& grad) {
            detail::ConstMatrixMap<T> go(grad.raw(), rows, cout);
            if (Tensor<T>* gk = t.grad_slot(kernel)) {
                T* c = detail::scratch<T>(0, rows * depth);
                detail::im2col(input.value().raw(), g, kh, kw, c);
                detail::MatrixMap<T> dk(gk->raw(), depth, cout);
                dk.noalias() += detail::ConstMatrixMap<T>(c, rows, depth).transpose() * go;
            }
            if (Tensor<T>* gx = t.grad_slot(input)) {
                T* dcols = detail::scratch<T>(1, rows * depth);
                detail::MatrixMap<T> dc(dcols, rows, depth);
                dc.noalias() = go * detail::ConstMatrixMap<T>(kernel.value().raw(), depth, cout).transpose();
                detail::col2im_add(dcols, g, kh, kw, gx->raw());
            }
        },
        "conv2d");
}

/// 2x2 stride-2 max pooling; odd trailing rows/columns are dropped.
template <typename T>
Var<T> max_pool2x2(Var<T> input) {
    const detail::Image4 g = detail::as_image(input.shape(), "max_pool2x2");
    detail::require(g.height >= 2 && g.width >= 2,
                    "max_pool2x2 needs H,W >= 2, got " + to_string(input.shape()));
    const std::size_t oh = g.height / 2, ow = g.width / 2, c = g.channels;
    Tensor<T> out(detail::image_shape(g, oh, ow, c));
    std::vector<std::uint32_t> argmax(out.size());
    const T* x = input.value().raw();
    TapeDiagnostics& diag = input.tape().diagnostics();
    const bool logged = diag.branch_mode != TapeDiagnostics::BranchMode::off;
    for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    std::size_t best = ((b * g.height + 2 * i) * g.width + 2 * j) * c + ch;
                    for (std::size_t di = 0; di < 2; ++di)
                        for (std::size_t dj = 0; dj < 2; ++dj) {
                            const std::size_t idx = ((b * g.height + 2 * i + di) * g.width + 2 * j + dj) * c + ch;
                            if (x[idx] > x[best]) best = idx;
                        }
                    if (logged) best = diag.decide(static_cast<std::uint32_t>(best));
                    const std::size_t o = ((b * oh + i) * ow + j) * c + ch;
                    out[o] = x[best];
                    argmax[o] = static_cast<std::uint32_t>(best);
                }
    return input.tape().record(
        std::move(out), input.requires_grad(),
        [input, argmax = std::move(argmax)](Tape<T>& t, const Tensor<T>& grad) {
            Tensor<T>* gx = t.grad_slot(input);
            for (std::size_t o = 0; o < grad.size(); ++o) (*gx)[argmax[o]] += grad[o];
        },
        "max_pool2x2");
}

/// Mean over the spatial axes: [H,W,C] -> [C], [B,H,W,C] -> [B,C].
template <typename T>
Var<T> global_avg_pool(Var<T> input) {
    const detail::Image4 g = detail::as_image(input.shape(), "global_avg_pool");
    const std::size_t area = g.height * g.width, c = g.channels;
    Tensor<T> out(g.batched ? Shape{g.batch, c} : Shape{c});
    const T* x = input.value().raw();
    std::vector<double> acc(c);
    for (std::size_t b = 0; b < g.batch; ++b) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t p = 0; p < area; ++p)
            for (std::size_t ch = 0; ch < c; ++ch) acc[ch] += x[(b * area + p) * c + ch];
        for (std::size_t ch = 0; ch < c; ++ch) out[b * c + ch] = static_cast<T>(acc[ch] / double(area));
    }
    return input.tape().record(
        std::move(out), input.requires_grad(),
        [input, g, area, c](Tape<T>& t, const Tensor<T>& grad) {
            Tensor<T>* gx = t.grad_slot(input);
            const T inv = T{1} / static_cast<T>(area);
            for (std::size_t b = 0; b < g.batch; ++b)
                for (std::size_t p = 0; p < area; ++p)
                    for (std::size_t ch = 0; ch < c; ++ch) (*gx)[(b * area + p) * c + ch] += grad[b * c + ch] * inv;
        },
        "global_avg_pool");
}

template <typename T>
Var<T> pool(Var<T> input, PoolKind kind) {
    return kind == PoolKind::max2x2 ? max_pool2x2(input) : global_avg_pool(input);
}

// ---------------------------------------------------------------------------------------------
// Activations

template <typename T>
Var<T> relu(Var<T> x) {
    const Tensor<T>& xv = x.value();
    Tensor<T> out(xv.shape());
    TapeDiagnostics& diag = x.tape().diagnostics();
    if (diag.branch_mode != TapeDiagnostics::BranchMode::off) {
        // Logged path: the active set is explicit so a replayed pass can override it.
        std::vector<std::uint8_t> active(xv.size());
        for (std::size_t i = 0, n = xv.size(); i < n; ++i) {
            active[i] = static_cast<std::uint8_t>(diag.decide(xv[i] > T{0}));
            out[i] = active[i] ? xv[i] : T{0};
        }
        return x.tape().record(
            std::move(out), x.requires_grad(),
            [x, active = std::move(active)](Tape<T>& t, const Tensor<T>& g) {
                T* slot = t.grad_slot(x)->raw();
                for (std::size_t i = 0, n = g.size(); i < n; ++i) slot[i] += active[i] ? g[i] : T{0};
            },
            "relu");
    }
    {
        const T* __restrict in = xv.raw();
        T* __restrict o = out.raw();
        for (std::size_t i = 0, n = xv.size(); i < n; ++i) o[i] = std::max(in[i], T{0});
    }
    return x.tape().record(
        std::move(out), x.requires_grad(),
        [x](Tape<T>& t, const Tensor<T>& g) {
            T* __restrict slot = t.grad_slot(x)->raw();
            const T* __restrict in = x.value().raw();
            const T* __restrict gv = g.raw();
            for (std::size_t i = 0, n = g.size(); i < n; ++i) slot[i] += in[i] > T{0} ? gv[i] : T{0};
        },
        "relu");
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
    return detail::elementwise<T>(
        x,
        [](T v) {
            // Split on sign so exp never overflows.
            if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
            const T e = std::exp(v);
            return e / (T{1} + e);
        },
        [](T, T out) { return out * (T{1} - out); }, "sigmoid");
}

/// log(1 + exp(x)), stable for large |x|.
template <typename T>
Var<T> softplus(Var<T> x) {
    return detail::elementwise<T>(
        x, [](T v) { return v > T{0} ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
        [](T in, T) {
            if (in >= T{0}) return T{1} / (T{1} + std::exp(-in));
            const T e = std::exp(in);
            return e / (T{1} + e);
        },
        "softplus");
}

template <typename T>
Var<T> activation(Var<T> x, Activation kind) {
    return kind == Activation::relu ? relu(x) : sigmoid(x);
}

// ---------------------------------------------------------------------------------------------
// Normalisation

inline constexpr double kBatchNormEps = 1e-5;

/// Per-channel standardisation with the statistics of this batch, followed by scale/shift.
/// Reduces over every axis except the last. `training` rejects a batch of one image.
template <typename T>
Var<T> batch_norm(Var<T> input, Var<T> scale, Var<T> shift, bool training = true) {
    const Shape& s = input.shape();
    detail::require(s.size() >= 2, "batch_norm expects a batch axis, got " + to_string(s));
    const std::size_t c = s.back();
    detail::require(scale.shape() == Shape{c} && shift.shape() == Shape{c},
                    "batch_norm scale/shift must be [" + std::to_string(c) + "]");
    if (training && s.front() < 2) {
        throw ShapeError("batch_norm in training mode needs at least two samples, got " + to_string(s));
    }
    const std::size_t m = input.size() / c;
    const T* x = input.value().raw();
    std::vector<double> mean(c, 0.0), var(c, 0.0);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t ch = 0; ch < c; ++ch) mean[ch] += x[r * c + ch];
    for (auto& v : mean) v /= double(m);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double d = x[r * c + ch] - mean[ch];
            var[ch] += d * d;
        }
    std::vector<T> mean_t(c), inv_std(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        mean_t[ch] = static_cast<T>(mean[ch]);
        inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var[ch] / double(m) + kBatchNormEps));
    }
    const T* gamma = scale.value().raw();
    const T* beta = shift.value().raw();
    Tensor<T> out(s);
    {
        std::vector<T> mul(c), add(c);
        for (std::size_t ch = 0; ch < c; ++ch) {
            mul[ch] = inv_std[ch] * gamma[ch];
            add[ch] = beta[ch] - mean_t[ch] * mul[ch];
        }
        const T* __restrict xs = x;
        T* __restrict o = out.raw();
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t ch = 0; ch < c; ++ch) o[r * c + ch] = xs[r * c + ch] * mul[ch] + add[ch];
    }

    return input.tape().record(
        std::move(out), detail::any_requires_grad({input, scale, shift}),
        [input, scale, shift, m, c, mean_t = std::move(mean_t), inv_std = std::move(inv_std)](
            Tape<T>& t, const Tensor<T>& grad) {
            const T* __restrict xv = input.value().raw();
            const T* __restrict gv = grad.raw();
            const T* gamma = scale.value().raw();
            // Per channel: sum of g and of g * (x - mean); xhat = (x - mean) * inv_std.
            std::vector<double> sum_g(c, 0.0), sum_gc(c, 0.0);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double gr = gv[r * c + ch];
                    sum_g[ch] += gr;
                    sum_gc[ch] += gr * (double(xv[r * c + ch]) - double(mean_t[ch]));
                }
            if (Tensor<T>* gs = t.grad_slot(scale))
                for (std::size_t ch = 0; ch < c; ++ch) (*gs)[ch] += static_cast<T>(sum_gc[ch] * double(inv_std[ch]));
            if (Tensor<T>* gb = t.grad_slot(shift))
                for (std::size_t ch = 0; ch < c; ++ch) (*gb)[ch] += static_cast<T>(sum_g[ch]);
            if (Tensor<T>* gx = t.grad_slot(input)) {
                // dx = A*g + B*x + C with per-channel coefficients.
                std::vector<T> ca(c), cb(c), cc(c);
                const double inv_m = 1.0 / double(m);
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double is = inv_std[ch];
                    const double a = is * double(gamma[ch]);
                    const double b = -a * is * is * sum_gc[ch] * inv_m;
                    ca[ch] = static_cast<T>(a);
                    cb[ch] = static_cast<T>(b);
                    cc[ch] = static_cast<T>(-a * sum_g[ch] * inv_m - b * double(mean_t[ch]));
                }
                T* __restrict dx = gx->raw();
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        dx[r * c + ch] += ca[ch] * gv[r * c + ch] + cb[ch] * xv[r * c + ch] + cc[ch];
            }
        },
        "batch_norm");
}

// ---------------------------------------------------------------------------------------------
// Dense algebra

/// weight · input + bias. input [Din] or [B,Din]; weight [Dout,Din]; bias [Dout].
template <typename T>
Var<T> linear(Var<T> input, Var<T> weight, Var<T> bias) {
    const Shape& xs = input.shape();
    const Shape& ws = weight.shape();
    detail::require(ws.size() == 2, "linear weight must be [Dout,Din], got " + to_string(ws));
    detail::require(xs.size() == 1 || xs.size() == 2, "linear input must be [Din] or [B,Din], got " + to_string(xs));
    const std::size_t dout = ws[0], din = ws[1];
    const std::size_t batch = xs.size() == 2 ? xs[0] : 1;
    detail::require(xs.back() == din, "linear input dim " + std::to_string(xs.back()) + " does not match weight " +
                                          to_string(ws));
    detail::require(bias.shape() == Shape{dout}, "linear bias must be [" + std::to_string(dout) + "], got " +
                                                     to_string(bias.shape()));
    Tensor<T> out(xs.size() == 2 ? Shape{batch, dout} : Shape{dout});
    {
        detail::ConstMatrixMap<T> x(input.value().raw(), batch, din);
        detail::ConstMatrixMap<T> w(weight.value().raw(), dout, din);
        detail::MatrixMap<T> o(out.raw(), batch, dout);
        // Row by row, so a row's output does not depend on the batch size.
        for (std::size_t r = 0; r < batch; ++r) o.row(r).noalias() = (w * x.row(r).transpose()).transpose();
        const T* b = bias.value().raw();
        for (std::size_t r = 0; r < batch; ++r)
            for (std::size_t j = 0; j < dout; ++j) o(r, j) += b[j];
    }
    return input.tape().record(
        std::move(out), detail::any_requires_grad({input, weight, bias}),
        [input, weight, bias, batch, din, dout](Tape<T>& t, const Tensor<T>& grad) {
            detail::ConstMatrixMap<T> go(grad.raw(), batch, dout);
            if (Tensor<T>* gx = t.grad_slot(input)) {
                detail::MatrixMap<T> dx(gx->raw(), batch, din);
                dx.noalias() += go * detail::ConstMatrixMap<T>(weight.value().raw(), dout, din);
            }
            if (Tensor<T>* gw = t.grad_slot(weight)) {
                detail::MatrixMap<T> dw(gw->raw(), dout, din);
                dw.noalias() += go.transpose() * detail::ConstMatrixMap<T>(input.value().raw(), batch, din);
            }
            if (Tensor<T>* gb = t.grad_slot(bias)) {
                for (std::size_t r = 0; r < batch; ++r)
                    for (std::size_t j = 0; j < dout; ++j) (*gb)[j] += go(r, j);
            }
        },
        "linear");
}

/// a · bᵀ for a [Q,D], b [S,D] -> [Q,S].
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
    detail::require(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(1),
                    "matmul_nt expects [Q,D] and [S,D], got " + to_string(a.shape()) + " and " + to_string(b.shape()));
    const std::size_t q = a.dim(0), s = b.dim(0), d = a.dim(1);
    Tensor<T> out({q, s});
    detail::MatrixMap<T>(out.raw(), q, s).noalias() =
        detail::ConstMatrixMap<T>(a.value().raw(), q, d) * detail::ConstMatrixMap<T>(b.value().raw(), s, d).transpose();
    return a.tape().record(
        std::move(out), detail::any_requires_grad({a, b}),
        [a, b, q, s, d](Tape<T>& t, const Tensor<T>& grad) {
            detail::ConstMatrixMap<T> go(grad.raw(), q, s);
            if (Tensor<T>* ga = t.grad_slot(a))
                detail::MatrixMap<T>(ga->raw(), q, d).noalias() += go * detail::ConstMatrixMap<T>(b.value().raw(), s, d);
            if (Tensor<T>* gb = t.grad_slot(b))
                detail::MatrixMap<T>(gb->raw(), s, d).noalias() +=
                    go.transpose() * detail::ConstMatrixMap<T>(a.value().raw(), q, d);
        },
        "matmul_nt");
}

inline constexpr double kNormEps = 1e-8;

/// Unit-l2 normalisation of every row or every column of a [R,C] view of `x`.
/// The divisor is floored at 1e-8; each floor hit is counted in the tape diagnostics.
template <typename T>
Var<T> l2_normalize(Var<T> x, NormAxis axis, std::size_t rows, std::size_t cols) {
    detail::require(rows * cols == x.size(), "l2_normalize view [" + std::to_string(rows) + "," +
                                                 std::to_string(cols) + "] does not fit " + to_string(x.shape()));
    const bool by_col = axis == NormAxis::columns;
    const std::size_t groups = by_col ? cols : rows;
    const std::size_t len = by_col ? rows : cols;
    auto index = [=](std::size_t gi, std::size_t e) { return by_col ? e * cols + gi : gi * cols + e; };
    const T* xv = x.value().raw();
    std::vector<T> norms(groups);
    std::vector<char> floored(groups, 0);
    Tensor<T> out(x.shape());
    Tape<T>& tape = x.tape();
    for (std::size_t gi = 0; gi < groups; ++gi) {
        double acc = 0.0;
        for (std::size_t e = 0; e < len; ++e) acc += double(xv[index(gi, e)]) * double(xv[index(gi, e)]);
        double n = std::sqrt(acc);
        if (n < kNormEps) {
            n = kNormEps;
            floored[gi] = 1;
            ++tape.diagnostics().zero_norm_guards;
        }
        norms[gi] = static_cast<T>(n);
        for (std::size_t e = 0; e < len; ++e) out[index(gi, e)] = static_cast<T>(xv[index(gi, e)] / n);
    }
    const std::size_t out_id = tape.size();
    return tape.record(
        std::move(out), x.requires_grad(),
        [x, groups, len, index, out_id, norms = std::move(norms), floored = std::move(floored)](Tape<T>& t, const Tensor<T>& grad) {
            const Tensor<T>& y = t.value(Var<T>(&t, out_id));
            Tensor<T>* gx = t.grad_slot(x);
            for (std::size_t gi = 0; gi < groups; ++gi) {
                double dot = 0.0;
                if (!floored[gi])
                    for (std::size_t e = 0; e < len; ++e) dot += double(y[index(gi, e)]) * double(grad[index(gi, e)]);
                for (std::size_t e = 0; e < len; ++e) {
                    const std::size_t i = index(gi, e);
                    (*gx)[i] += static_cast<T>((grad[i] - dot * y[i]) / norms[gi]);
                }
            }
        },
        "l2_normalize");
}

/// Pairwise cosine similarity between the rows of a [Q,D] and b [S,D] -> [Q,S].
template <typename T>
Var<T> cosine_similarity(Var<T> a, Var<T> b) {
    detail::require(a.shape().size() == 2 && b.shape().size() == 2, "cosine_similarity expects rank-2 operands");
    return matmul_nt(l2_normalize(a, NormAxis::rows, a.dim(0), a.dim(1)),
                     l2_normalize(b, NormAxis::rows, b.dim(0), b.dim(1)));
}

// ---------------------------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require(a.shape() == b.shape(), "add shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Tensor<T> out = a.value();
    const Tensor<T>& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return a.tape().record(
        std::move(out), detail::any_requires_grad({a, b}),
        [a, b](Tape<T>& t, const Tensor<T>& g) {
            t.accumulate(a, g);
            t.accumulate(b, g);
        },
        "add");
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::require(a.shape() == b.shape(), "mul shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Tensor<T> out = a.value();
    const Tensor<T>& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return a.tape().record(
        std::move(out), detail::any_requires_grad({a, b}),
        [a, b](Tape<T>& t, const Tensor<T>& g) {
            if (Tensor<T>* ga = t.grad_slot(a)) {
                const Tensor<T>& bv = b.value();
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
            }
            if (Tensor<T>* gb = t.grad_slot(b)) {
                const Tensor<T>& av = a.value();
                for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
            }
        },
        "mul");
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
    Tensor<T> out = a.value();
    for (auto& v : out.data()) v += c;
    return a.tape().record(
        std::move(out), a.requires_grad(), [a](Tape<T>& t, const Tensor<T>& g) { t.accumulate(a, g); }, "add_scalar");
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
    Tensor<T> out = a.value();
    for (auto& v : out.data()) v *= c;
    return a.tape().record(
        std::move(out), a.requires_grad(),
        [a, c](Tape<T>& t, const Tensor<T>& g) {
            Tensor<T>* ga = t.grad_slot(a);
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * c;
        },
        "scale");
}

template <typename T>
Var<T> sum(Var<T> a) {
    double acc = 0.0;
    for (T v : a.value().data()) acc += v;
    return a.tape().record(
        Tensor<T>({1}, static_cast<T>(acc)), a.requires_grad(),
        [a](Tape<T>& t, const Tensor<T>& g) {
            Tensor<T>* ga = t.grad_slot(a);
            for (auto& v : ga->data()) v += g[0];
        },
        "sum");
}

template <typename T>
Var<T> mean(Var<T> a) {
    return scale(sum(a), T{1} / static_cast<T>(a.size()));
}

// ---------------------------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
    detail::require(numel(shape) == a.size(), "cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
    return a.tape().record(
        a.value().reshaped(std::move(shape)), a.requires_grad(),
        [a](Tape<T>& t, const Tensor<T>& g) {
            Tensor<T>* ga = t.grad_slot(a);
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        },
        "reshape");
}

/// Gathers rows along axis 0; indices may repeat.
template <typename T>
Var<T> take(Var<T> a, std::vector<std::size_t> indices) {
    const Shape& s = a.shape();
    detail::require(!s.empty(), "take needs rank >= 1");
    const std::size_t row = a.size() / s[0];
    for (std::size_t i : indices)
        if (i >= s[0]) throw ShapeError("take index " + std::to_string(i) + " out of range for " + to_string(s));
    Shape os = s;
    os[0] = indices.size();
    Tensor<T> out(os);
    const T* src = a.value().raw();
    for (std::size_t r = 0; r < indices.size(); ++r) std::memcpy(out.raw() + r * row, src + indices[r] * row, row * sizeof(T));
    return a.tape().record(
        std::move(out), a.requires_grad(),
        [a, row, indices = std::move(indices)](Tape<T>& t, const Tensor<T>& g) {
            Tensor<T>* ga = t.grad_slot(a);
            for (std::size_t r = 0; r < indices.size(); ++r) {
                T* dst = ga->raw() + indices[r] * row;
                const T* src = g.raw() + r * row;
                for (std::size_t e = 0; e < row; ++e) dst[e] += src[e];
            }
        },
        "take");
}

/// Concatenation along the last axis; leading dimensions must agree.
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    detail::require(as.size() == bs.size() && !as.empty() && std::equal(as.begin(), as.end() - 1, bs.begin()),
                    "concat_channels shape mismatch " + to_string(as) + " vs " + to_string(bs));
    const std::size_t ca = as.back(), cb = bs.back(), rows = a.size() / ca;
    Shape os = as;
    os.back() = ca + cb;
    Tensor<T> out(os);
    for (std::size_t r = 0; r < rows; ++r) {
        std::memcpy(out.raw() + r * (ca + cb), a.value().raw() + r * ca, ca * sizeof(T));
        std::memcpy(out.raw() + r * (ca + cb) + ca, b.value().raw() + r * cb, cb * sizeof(T));
    }
    return a.tape().record(
        std::move(out), detail::any_requires_grad({a, b}),
        [a, b, ca, cb, rows](Tape<T>& t, const Tensor<T>& g) {
            if (Tensor<T>* ga = t.grad_slot(a))
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t e = 0; e < ca; ++e) (*ga)[r * ca + e] += g[r * (ca + cb) + e];
            if (Tensor<T>* gb = t.grad_slot(b))
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t e = 0; e < cb; ++e) (*gb)[r * cb + e] += g[r * (ca + cb) + ca + e];
        },
        "concat_channels");
}

/// Concatenation along axis 0; trailing dimensions must agree. The same Var may appear repeatedly.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts) {
    detail::require(!parts.empty(), "concat of zero tensors");
    const Shape& first = parts.front().shape();
    detail::require(!first.empty(), "concat needs rank >= 1");
    Shape os = first;
    os[0] = 0;
    bool needs_grad = false;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        detail::require(s.size() == first.size() && std::equal(s.begin() + 1, s.end(), first.begin() + 1),
                        "concat shape mismatch " + to_string(first) + " vs " + to_string(s));
        os[0] += s[0];
        needs_grad = needs_grad || p.requires_grad();
    }
    Tensor<T> out(os);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::memcpy(out.raw() + off, p.value().raw(), p.size() * sizeof(T));
        off += p.size();
    }
    return parts.front().tape().record(
        std::move(out), needs_grad,
        [parts](Tape<T>& t, const Tensor<T>& g) {
            std::size_t off = 0;
            for (const auto& p : parts) {
                if (Tensor<T>* gp = t.grad_slot(p))
                    for (std::size_t e = 0; e < p.size(); ++e) (*gp)[e] += g[off + e];
                off += p.size();
            }
        },
        "concat");
}

/// Rows [begin, end) along axis 0.
template <typename T>
Var<T> slice(Var<T> a, std::size_t begin, std::size_t end) {
    const Shape& s = a.shape();
    detail::require(!s.empty() && begin < end && end <= s[0],
                    "slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " + to_string(s));
    const std::size_t row = a.size() / s[0];
    Shape os = s;
    os[0] = end - begin;
    Tensor<T> out(os);
    std::memcpy(out.raw(), a.value().raw() + begin * row, out.size() * sizeof(T));
    return a.tape().record(
        std::move(out), a.requires_grad(),
        [a, begin, row](Tape<T>& t, const Tensor<T>& g) {
            Tensor<T>* ga = t.grad_slot(a);
            for (std::size_t e = 0; e < g.size(); ++e) (*ga)[begin * row + e] += g[e];
        },
        "slice");
}

// ---------------------------------------------------------------------------------------------
// Row statistics

/// Arithmetic mean of the rows of x [M,D] -> [D].
template <typename T>
Var<T> row_mean(Var<T> x) {
    detail::require(x.shape().size() == 2 && x.dim(0) >= 1, "row_mean expects [M,D], got " + to_string(x.shape()));
    const std::size_t m = x.dim(0), d = x.dim(1);
    std::vector<double> acc(d, 0.0);
    const T* xv = x.value().raw();
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < d; ++j) acc[j] += xv[r * d + j];
    Tensor<T> out({d});
    for (std::size_t j = 0; j < d; ++j) out[j] = static_cast<T>(acc[j] / double(m));
    return x.tape().record(
        std::move(out), x.requires_grad(),
        [x, m, d](Tape<T>& t, const Tensor<T>& g) {
            Tensor<T>* gx = t.grad_slot(x);
            const T inv = T{1} / static_cast<T>(m);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t j = 0; j < d; ++j) (*gx)[r * d + j] += g[j] * inv;
        },
        "row_mean");
}

/// Bessel-corrected (M-1 denominator) standard deviation of the rows of x [M,D] -> [D].
/// With M < 2 the result is all zeros and the tape's degenerate_std counter is bumped.
template <typename T>
Var<T> row_std(Var<T> x) {
    detail::require(x.shape().size() == 2 && x.dim(0) >= 1, "row_std expects [M,D], got " + to_string(x.shape()));
    const std::size_t m = x.dim(0), d = x.dim(1);
    Tensor<T> out({d});
    if (m < 2) {
        ++x.tape().diagnostics().degenerate_std;
        return x.tape().record(std::move(out), x.requires_grad(), [](Tape<T>&, const Tensor<T>&) {}, "row_std");
    }
    const T* xv = x.value().raw();
    // Mean taken relative to the first row, so identical rows give exactly zero spread.
    std::vector<double> mu(d, 0.0), ss(d, 0.0);
    for (std::size_t r = 1; r < m; ++r)
        for (std::size_t j = 0; j < d; ++j) mu[j] += double(xv[r * d + j]) - double(xv[j]);
    for (std::size_t j = 0; j < d; ++j) mu[j] = double(xv[j]) + mu[j] / double(m);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < d; ++j) {
            const double dv = xv[r * d + j] - mu[j];
            ss[j] += dv * dv;
        }
    std::vector<double> sd(d);
    for (std::size_t j = 0; j < d; ++j) {
        sd[j] = std::sqrt(ss[j] / double(m - 1));
        out[j] = static_cast<T>(sd[j]);
    }
    return x.tape().record(
        std::move(out), x.requires_grad(),
        [x, m, d, mu = std::move(mu), sd = std::move(sd)](Tape<T>& t, const Tensor<T>& g) {
            Tensor<T>* gx = t.grad_slot(x);
            const T* xv = x.value().raw();
            for (std::size_t j = 0; j < d; ++j) {
                if (sd[j] <= 0.0) continue;  // not differentiable at zero spread; use the zero subgradient
                const double k = g[j] / (double(m - 1) * sd[j]);
                for (std::size_t r = 0; r < m; ++r) (*gx)[r * d + j] += static_cast<T>(k * (xv[r * d + j] - mu[j]));
            }
        },
        "row_std");
}

// ---------------------------------------------------------------------------------------------
// Losses

namespace detail {

template <typename T>
double log_sum_exp(const T* v, std::size_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, double(v[i]));
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::exp(double(v[i]) - mx);
    return mx + std::log(s);
}

}  // namespace detail

/// Mean over rows of −log softmax(logits)[target]. logits [C] (one target) or [B,C].
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::vector<std::size_t> targets) {
    const Shape& s = logits.shape();
    detail::require(s.size() == 1 || s.size() == 2, "softmax_cross_entropy expects [C] or [B,C]");
    const std::size_t c = s.back(), rows = s.size() == 2 ? s[0] : 1;
    detail::require(c >= 2, "softmax_cross_entropy needs at least two classes");
    detail::require(targets.size() == rows, "softmax_cross_entropy needs one target per row");
    for (std::size_t tgt : targets)
        if (tgt >= c) throw ShapeError("softmax_cross_entropy target out of range");
    const T* z = logits.value().raw();
    double loss = 0.0;
    std::vector<double> lse(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        lse[r] = detail::log_sum_exp(z + r * c, c);
        loss += lse[r] - z[r * c + targets[r]];
    }
    loss /= double(rows);
    return logits.tape().record(
        Tensor<T>({1}, static_cast<T>(loss)), logits.requires_grad(),
        [logits, rows, c, lse = std::move(lse), targets = std::move(targets)](Tape<T>& t, const Tensor<T>& g) {
            Tensor<T>* gz = t.grad_slot(logits);
            const T* z = logits.value().raw();
            const double k = double(g[0]) / double(rows);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) {
                    const double p = std::exp(double(z[r * c + j]) - lse[r]);
                    (*gz)[r * c + j] += static_cast<T>(k * (p - (j == targets[r] ? 1.0 : 0.0)));
                }
        },
        "softmax_cross_entropy");
}

/// One-hot target overload; anything other than a single 1 among zeros is rejected.
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const Tensor<T>& one_hot) {
    detail::require(one_hot.shape() == logits.shape(), "one-hot target shape must match logits");
    const std::size_t c = logits.shape().back(), rows = logits.size() / c;
    std::vector<std::size_t> targets(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t hits = 0;
        for (std::size_t j = 0; j < c; ++j) {
            const T v = one_hot[r * c + j];
            if (v == T{1}) {
                targets[r] = j;
                ++hits;
            } else if (v != T{0}) {
                hits = 2;
            }
        }
        if (hits != 1) throw std::invalid_argument("softmax_cross_entropy target row is not one-hot");
    }
    return softmax_cross_entropy(logits, std::move(targets));
}

/// Log class probabilities of the attention-kernel label estimate: softmax over every support
/// score of a query, summed per class. scores [Q,S]; labels[s] is the class of support column s.
template <typename T>
Var<T> class_log_probs(Var<T> scores, std::vector<std::size_t> labels, std::size_t classes) {
    detail::require(scores.shape().size() == 2 && scores.dim(1) == labels.size(),
                    "class_log_probs expects [Q,S] scores and S labels");
    std::vector<std::size_t> per_class(classes, 0);
    for (std::size_t l : labels) {
        if (l >= classes) throw ShapeError("class_log_probs label out of range");
        ++per_class[l];
    }
    for (std::size_t n : per_class)
        if (n == 0) throw ShapeError("class_log_probs: every class needs at least one support column");
    const std::size_t q = scores.dim(0), s = scores.dim(1);
    const T* z = scores.value().raw();
    Tensor<T> out({q, classes});
    std::vector<double> lse_all(q), lse_cls(q * classes);
    for (std::size_t r = 0; r < q; ++r) {
        lse_all[r] = detail::log_sum_exp(z + r * s, s);
        std::vector<double> mx(classes, -std::numeric_limits<double>::infinity()), acc(classes, 0.0);
        for (std::size_t j = 0; j < s; ++j) mx[labels[j]] = std::max(mx[labels[j]], double(z[r * s + j]));
        for (std::size_t j = 0; j < s; ++j) acc[labels[j]] += std::exp(double(z[r * s + j]) - mx[labels[j]]);
        for (std::size_t c = 0; c < classes; ++c) {
            lse_cls[r * classes + c] = mx[c] + std::log(acc[c]);
            out[r * classes + c] = static_cast<T>(lse_cls[r * classes + c] - lse_all[r]);
        }
    }
    return scores.tape().record(
        std::move(out), scores.requires_grad(),
        [scores, q, s, classes, labels = std::move(labels), lse_all = std::move(lse_all),
         lse_cls = std::move(lse_cls)](Tape<T>& t, const Tensor<T>& g) {
            Tensor<T>* gz = t.grad_slot(scores);
            const T* z = scores.value().raw();
            for (std::size_t r = 0; r < q; ++r) {
                double gsum = 0.0;
                for (std::size_t c = 0; c < classes; ++c) gsum += g[r * classes + c];
                for (std::size_t j = 0; j < s; ++j) {
                    const double zj = z[r * s + j];
                    const std::size_t c = labels[j];
                    const double within = std::exp(zj - lse_cls[r * classes + c]);
                    const double overall = std::exp(zj - lse_all[r]);
                    (*gz)[r * s + j] += static_cast<T>(g[r * classes + c] * within - gsum * overall);
                }
            }
        },
        "class_log_probs");
}

/// Mean negative log-likelihood of the targets under log-probabilities [Q,N].
template <typename T>
Var<T> nll_loss(Var<T> log_probs, std::vector<std::size_t> targets) {
    detail::require(log_probs.shape().size() == 2 && log_probs.dim(0) == targets.size(),
                    "nll_loss expects [Q,N] log-probabilities and Q targets");
    const std::size_t q = log_probs.dim(0), n = log_probs.dim(1);
    double acc = 0.0;
    for (std::size_t r = 0; r < q; ++r) {
        if (targets[r] >= n) throw ShapeError("nll_loss target out of range");
        acc -= log_probs.value()[r * n + targets[r]];
    }
    return log_probs.tape().record(
        Tensor<T>({1}, static_cast<T>(acc / double(q))), log_probs.requires_grad(),
        [log_probs, q, n, targets = std::move(targets)](Tape<T>& t, const Tensor<T>& g) {
            Tensor<T>* gl = t.grad_slot(log_probs);
            for (std::size_t r = 0; r < q; ++r) (*gl)[r * n + targets[r]] -= g[0] / static_cast<T>(q);
        },
        "nll_loss");
}

}  // namespace dam
