#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fedseg/gemm.hpp"
#include "fedseg/tensor.hpp"

namespace fedseg {

namespace detail {

// col[(C*kh*kw) x (Hout*Wout)] for one image, zero padding.
inline void im2col(const double* img, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int Hout, int Wout, double* col) {
    for (int c = 0; c < C; ++c) {
        const double* plane = img + static_cast<std::size_t>(c) * H * W;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                double* row = col + ((static_cast<std::size_t>(c) * kh + ky) * kw + kx) *
                                        (static_cast<std::size_t>(Hout) * Wout);
                for (int oy = 0; oy < Hout; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    double* dst = row + static_cast<std::size_t>(oy) * Wout;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + Wout, 0.0);
                        continue;
                    }
                    const double* src = plane + static_cast<std::size_t>(iy) * W;
                    if (stride == 1) {
                        const int ix0 = -pad + kx;
                        int ox = 0;
                        for (; ox < Wout && ix0 + ox < 0; ++ox) dst[ox] = 0.0;
                        const int valid_end = std::min(Wout, W - ix0);
                        for (; ox < valid_end; ++ox) dst[ox] = src[ix0 + ox];
                        for (; ox < Wout; ++ox) dst[ox] = 0.0;
                    } else {
                        for (int ox = 0; ox < Wout; ++ox) {
                            const int ix = ox * stride - pad + kx;
                            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : 0.0;
                        }
                    }
                }
            }
        }
    }
}

// Scatter-add of a col-layout gradient back into an image gradient. The
// stride-1 path adds contiguous row ranges.
inline void col2im_add(const double* col, int C, int H, int W, int kh, int kw, int stride,
                       int pad, int Hout, int Wout, double* img_grad) {
    for (int c = 0; c < C; ++c) {
        double* plane = img_grad + static_cast<std::size_t>(c) * H * W;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const double* row = col + ((static_cast<std::size_t>(c) * kh + ky) * kw + kx) *
                                              (static_cast<std::size_t>(Hout) * Wout);
                for (int oy = 0; oy < Hout; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    const double* src = row + static_cast<std::size_t>(oy) * Wout;
                    double* dst = plane + static_cast<std::size_t>(iy) * W;
                    if (stride == 1) {
                        const int ix0 = -pad + kx;
                        const int ox_lo = std::max(0, -ix0);
                        const int ox_hi = std::min(Wout, W - ix0);
                        for (int ox = ox_lo; ox < ox_hi; ++ox) dst[ix0 + ox] += src[ox];
                    } else {
                        for (int ox = 0; ox < Wout; ++ox) {
                            const int ix = ox * stride - pad + kx;
                            if (ix >= 0 && ix < W) dst[ix] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

// Cross-correlation with zero padding. weight (out_ch, in_ch, kh, kw); bias
// may be null, otherwise shape (1, out_ch, 1, 1).
inline TensorPtr conv2d(const TensorPtr& input, const TensorPtr& weight, const TensorPtr& bias,
                        int stride = 1, int padding = 0) {
    const Shape& is = input->shape;
    const Shape& ws = weight->shape;
    if (is.c != ws.c)
        throw DimensionError("conv2d: input channels " + std::to_string(is.c) +
                             " != weight in_ch " + std::to_string(ws.c));
    if (bias && !(bias->shape == Shape{1, ws.n, 1, 1}))
        throw DimensionError("conv2d: bias shape " + bias->shape.str() + " != (1," +
                             std::to_string(ws.n) + ",1,1)");
    if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
    const int Hout = (is.h + 2 * padding - ws.h) / stride + 1;
    const int Wout = (is.w + 2 * padding - ws.w) / stride + 1;
    if (Hout <= 0 || Wout <= 0)
        throw DimensionError("conv2d: non-positive output dims for input " + is.str() +
                             " kernel " + ws.str());

    const int K = ws.c * ws.h * ws.w;
    const int Nout = Hout * Wout;
    const bool is_1x1 = (ws.h == 1 && ws.w == 1 && stride == 1 && padding == 0);

    auto out = detail::make_node(Shape{is.n, ws.n, Hout, Wout},
                                 bias ? std::vector<TensorPtr>{input, weight, bias}
                                      : std::vector<TensorPtr>{input, weight});

    auto& col = detail::scratch(0);
    if (!is_1x1) col.resize(static_cast<std::size_t>(K) * Nout);
    for (int n = 0; n < is.n; ++n) {
        const double* img = input->data.data() + static_cast<std::size_t>(n) * is.c * is.h * is.w;
        const double* B = img;
        if (!is_1x1) {
            detail::im2col(img, is.c, is.h, is.w, ws.h, ws.w, stride, padding, Hout, Wout,
                           col.data());
            B = col.data();
        }
        double* O = out->data.data() + static_cast<std::size_t>(n) * ws.n * Nout;
        detail::gemm_nn(weight->data.data(), B, O, ws.n, K, Nout, false);
        if (bias) {
            for (int co = 0; co < ws.n; ++co) {
                const double bv = bias->data[static_cast<std::size_t>(co)];
                double* row = O + static_cast<std::size_t>(co) * Nout;
                for (int i = 0; i < Nout; ++i) row[i] += bv;
            }
        }
    }
    detail::check_finite(*out, "conv2d");

    if (out->requires_grad) {
        Tensor* o = out.get();
        const int N_img = is.n, Cin = is.c, H = is.h, W = is.w;
        const int Cout = ws.n, kh = ws.h, kw = ws.w;
        out->backward_fn = [=]() {
            TensorPtr in = o->parents[0];
            TensorPtr wt = o->parents[1];
            TensorPtr bs = o->parents.size() > 2 ? o->parents[2] : nullptr;
            const bool need_in = in->requires_grad;
            const bool need_wt = wt->requires_grad;
            if (need_in) in->ensure_grad();
            if (need_wt) wt->ensure_grad();
            if (bs && bs->requires_grad) bs->ensure_grad();

            // All three products run through gemm_nn: grad_weight contracts
            // gradOut[Cout x N] with col_t[N x K], grad_input multiplies
            // W^T[K x Cout] by gradOut.
            auto& colf = detail::scratch(0);
            auto& colt = detail::scratch(1);
            auto& gcol = detail::scratch(2);
            auto& wt_t = detail::scratch(3);
            if (need_wt) {
                colt.resize(static_cast<std::size_t>(K) * Nout);
                if (!is_1x1) colf.resize(static_cast<std::size_t>(K) * Nout);
            }
            if (need_in) {
                wt_t.resize(static_cast<std::size_t>(K) * Cout);
                detail::transpose(wt->data.data(), wt_t.data(), Cout, K);
                if (!is_1x1) gcol.resize(static_cast<std::size_t>(K) * Nout);
            }

            for (int n = 0; n < N_img; ++n) {
                const double* go = o->grad.data() + static_cast<std::size_t>(n) * Cout * Nout;
                const double* img =
                    in->data.data() + static_cast<std::size_t>(n) * Cin * H * W;

                if (bs && bs->requires_grad) {
                    for (int co = 0; co < Cout; ++co) {
                        const double* row = go + static_cast<std::size_t>(co) * Nout;
                        double lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
                        int i = 0;
                        for (; i + 8 <= Nout; i += 8)
                            for (int j = 0; j < 8; ++j) lane[j] += row[i + j];
                        for (; i < Nout; ++i) lane[i & 7] += row[i];
                        bs->grad[static_cast<std::size_t>(co)] +=
                            ((lane[0] + lane[1]) + (lane[2] + lane[3])) +
                            ((lane[4] + lane[5]) + (lane[6] + lane[7]));
                    }
                }
                if (need_wt) {
                    if (is_1x1) {
                        detail::transpose(img, colt.data(), Cin, Nout);
                    } else {
                        detail::im2col(img, Cin, H, W, kh, kw, stride, padding, Hout, Wout,
                                       colf.data());
                        detail::transpose(colf.data(), colt.data(), K, Nout);
                    }
                    detail::gemm_nn(go, colt.data(), wt->grad.data(), Cout, Nout, K, true);
                }
                if (need_in) {
                    double* gi =
                        in->grad.data() + static_cast<std::size_t>(n) * Cin * H * W;
                    if (is_1x1) {
                        detail::gemm_nn(wt_t.data(), go, gi, K, Cout, Nout, true);
                    } else {
                        detail::gemm_nn(wt_t.data(), go, gcol.data(), K, Cout, Nout, false);
                        detail::col2im_add(gcol.data(), Cin, H, W, kh, kw, stride, padding, Hout,
                                           Wout, gi);
                    }
                }
            }
        };
    }
    return out;
}

// Batch statistics over (batch, height, width) per channel. Train mode
// normalizes by batch stats and updates the running buffers in place
// (running_var gets the unbiased estimate); eval mode uses the frozen
// running stats. gamma/beta/running_* all shaped (1, C, 1, 1).
inline TensorPtr batchnorm2d(const TensorPtr& input, const TensorPtr& gamma,
                             const TensorPtr& beta, const TensorPtr& running_mean,
                             const TensorPtr& running_var, bool train, double momentum = 0.1,
                             double eps = 1e-5) {
    const Shape& is = input->shape;
    const Shape expect{1, is.c, 1, 1};
    for (const TensorPtr& t : {gamma, beta, running_mean, running_var}) {
        if (!(t->shape == expect))
            throw DimensionError("batchnorm2d: per-channel tensor shaped " + t->shape.str() +
                                 ", expected " + expect.str());
    }
    const std::int64_t m = static_cast<std::int64_t>(is.n) * is.h * is.w;
    if (train && m == 1)
        throw NumericError("batchnorm2d: degenerate variance (single element per channel)");

    auto out = detail::make_node(is, {input, gamma, beta});
    const std::int64_t plane = static_cast<std::int64_t>(is.h) * is.w;

    std::vector<double> mean(is.c), invstd(is.c);
    if (train) {
        for (int c = 0; c < is.c; ++c) {
            double s = 0.0, s2 = 0.0;
            for (int n = 0; n < is.n; ++n) {
                const double* p =
                    input->data.data() + (static_cast<std::size_t>(n) * is.c + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    s += p[i];
                    s2 += p[i] * p[i];
                }
            }
            const double mu = s / static_cast<double>(m);
            const double var = std::max(0.0, s2 / static_cast<double>(m) - mu * mu);
            mean[c] = mu;
            invstd[c] = 1.0 / std::sqrt(var + eps);
            running_mean->data[c] = (1.0 - momentum) * running_mean->data[c] + momentum * mu;
            running_var->data[c] = (1.0 - momentum) * running_var->data[c] +
                                   momentum * var * static_cast<double>(m) /
                                       static_cast<double>(m - 1);
        }
    } else {
        for (int c = 0; c < is.c; ++c) {
            mean[c] = running_mean->data[c];
            invstd[c] = 1.0 / std::sqrt(running_var->data[c] + eps);
        }
    }

    for (int n = 0; n < is.n; ++n) {
        for (int c = 0; c < is.c; ++c) {
            const double* p = input->data.data() + (static_cast<std::size_t>(n) * is.c + c) * plane;
            double* q = out->data.data() + (static_cast<std::size_t>(n) * is.c + c) * plane;
            const double mu = mean[c], is_ = invstd[c];
            const double g = gamma->data[c], b = beta->data[c];
            for (std::int64_t i = 0; i < plane; ++i) q[i] = g * (p[i] - mu) * is_ + b;
        }
    }
    detail::check_finite(*out, "batchnorm2d");

    if (out->requires_grad) {
        Tensor* o = out.get();
        const int C = is.c, N_img = is.n;
        out->backward_fn = [=]() {
            TensorPtr in = o->parents[0];
            TensorPtr ga = o->parents[1];
            TensorPtr be = o->parents[2];
            const bool need_in = in->requires_grad;
            if (need_in) in->ensure_grad();
            if (ga->requires_grad) ga->ensure_grad();
            if (be->requires_grad) be->ensure_grad();

            for (int c = 0; c < C; ++c) {
                const double mu = mean[c], is_ = invstd[c], g = ga->data[c];
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int n = 0; n < N_img; ++n) {
                    const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
                    const double* dy = o->grad.data() + base;
                    const double* x = in->data.data() + base;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        sum_dy += dy[i];
                        sum_dy_xhat += dy[i] * (x[i] - mu) * is_;
                    }
                }
                if (ga->requires_grad) ga->grad[c] += sum_dy_xhat;
                if (be->requires_grad) be->grad[c] += sum_dy;
                if (!need_in) continue;

                if (train) {
                    const double inv_m = 1.0 / static_cast<double>(m);
                    const double k1 = sum_dy * inv_m;
                    const double k2 = sum_dy_xhat * inv_m;
                    for (int n = 0; n < N_img; ++n) {
                        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
                        const double* dy = o->grad.data() + base;
                        const double* x = in->data.data() + base;
                        double* dx = in->grad.data() + base;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            const double xhat = (x[i] - mu) * is_;
                            dx[i] += g * is_ * (dy[i] - k1 - xhat * k2);
                        }
                    }
                } else {
                    for (int n = 0; n < N_img; ++n) {
                        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
                        const double* dy = o->grad.data() + base;
                        double* dx = in->grad.data() + base;
                        for (std::int64_t i = 0; i < plane; ++i) dx[i] += g * is_ * dy[i];
                    }
                }
            }
        };
    }
    return out;
}

// 2x2/stride-2 max pooling; gradient goes to the first maximal element in
// row-major window order.
inline TensorPtr max_pool2d(const TensorPtr& input) {
    const Shape& is = input->shape;
    if (is.h % 2 != 0 || is.w % 2 != 0)
        throw DimensionError("max_pool2d: spatial dims must be even, got " + is.str());
    const int Ho = is.h / 2, Wo = is.w / 2;
    auto out = detail::make_node(Shape{is.n, is.c, Ho, Wo}, {input});

    auto argmax = std::make_shared<std::vector<std::int32_t>>(
        static_cast<std::size_t>(out->numel()));
    const std::int64_t planes = static_cast<std::int64_t>(is.n) * is.c;
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* src = input->data.data() + p * is.h * is.w;
        double* dst = out->data.data() + p * Ho * Wo;
        std::int32_t* am = argmax->data() + p * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
            for (int ox = 0; ox < Wo; ++ox) {
                const int iy = oy * 2, ix = ox * 2;
                const std::int32_t idx[4] = {
                    static_cast<std::int32_t>(iy * is.w + ix),
                    static_cast<std::int32_t>(iy * is.w + ix + 1),
                    static_cast<std::int32_t>((iy + 1) * is.w + ix),
                    static_cast<std::int32_t>((iy + 1) * is.w + ix + 1)};
                int best = 0;
                for (int j = 1; j < 4; ++j)
                    if (src[idx[j]] > src[idx[best]]) best = j;
                dst[oy * Wo + ox] = src[idx[best]];
                am[oy * Wo + ox] = idx[best];
            }
        }
    }

    if (out->requires_grad) {
        Tensor* o = out.get();
        const std::int64_t in_plane = static_cast<std::int64_t>(is.h) * is.w;
        const std::int64_t out_plane = static_cast<std::int64_t>(Ho) * Wo;
        out->backward_fn = [=]() {
            TensorPtr in = o->parents[0];
            if (!in->requires_grad) return;
            in->ensure_grad();
            for (std::int64_t p = 0; p < planes; ++p) {
                const double* go = o->grad.data() + p * out_plane;
                const std::int32_t* am = argmax->data() + p * out_plane;
                double* gi = in->grad.data() + p * in_plane;
                for (std::int64_t i = 0; i < out_plane; ++i) gi[am[i]] += go[i];
            }
        };
    }
    return out;
}

// Nearest-neighbor 2x replication; gradient sums each 2x2 fan-out.
inline TensorPtr upsample2x(const TensorPtr& input) {
    const Shape& is = input->shape;
    const int Ho = is.h * 2, Wo = is.w * 2;
    auto out = detail::make_node(Shape{is.n, is.c, Ho, Wo}, {input});
    const std::int64_t planes = static_cast<std::int64_t>(is.n) * is.c;
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* src = input->data.data() + p * is.h * is.w;
        double* dst = out->data.data() + p * Ho * Wo;
        for (int y = 0; y < is.h; ++y) {
            double* row0 = dst + static_cast<std::size_t>(2 * y) * Wo;
            double* row1 = row0 + Wo;
            const double* s = src + static_cast<std::size_t>(y) * is.w;
            for (int x = 0; x < is.w; ++x) {
                row0[2 * x] = row0[2 * x + 1] = s[x];
                row1[2 * x] = row1[2 * x + 1] = s[x];
            }
        }
    }

    if (out->requires_grad) {
        Tensor* o = out.get();
        out->backward_fn = [=]() {
            TensorPtr in = o->parents[0];
            if (!in->requires_grad) return;
            in->ensure_grad();
            for (std::int64_t p = 0; p < planes; ++p) {
                const double* go = o->grad.data() + p * Ho * Wo;
                double* gi = in->grad.data() + p * is.h * is.w;
                for (int y = 0; y < is.h; ++y) {
                    const double* row0 = go + static_cast<std::size_t>(2 * y) * Wo;
                    const double* row1 = row0 + Wo;
                    double* g = gi + static_cast<std::size_t>(y) * is.w;
                    for (int x = 0; x < is.w; ++x)
                        g[x] += (row0[2 * x] + row0[2 * x + 1]) + (row1[2 * x] + row1[2 * x + 1]);
                }
            }
        };
    }
    return out;
}

inline TensorPtr relu(const TensorPtr& input) {
    auto out = detail::make_node(input->shape, {input});
    const std::int64_t n = input->numel();
    for (std::int64_t i = 0; i < n; ++i)
        out->data[i] = input->data[i] > 0.0 ? input->data[i] : 0.0;
    if (out->requires_grad) {
        Tensor* o = out.get();
        out->backward_fn = [=]() {
            TensorPtr in = o->parents[0];
            if (!in->requires_grad) return;
            in->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                if (in->data[i] > 0.0) in->grad[i] += o->grad[i];
        };
    }
    return out;
}

inline TensorPtr sigmoid(const TensorPtr& input) {
    auto out = detail::make_node(input->shape, {input});
    const std::int64_t n = input->numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const double x = input->data[i];
        out->data[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                : std::exp(x) / (1.0 + std::exp(x));
    }
    if (out->requires_grad) {
        Tensor* o = out.get();
        out->backward_fn = [=]() {
            TensorPtr in = o->parents[0];
            if (!in->requires_grad) return;
            in->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                const double y = o->data[i];
                in->grad[i] += o->grad[i] * y * (1.0 - y);
            }
        };
    }
    return out;
}

// Concatenation along the channel axis.
inline TensorPtr concat_channels(const TensorPtr& a, const TensorPtr& b) {
    const Shape& sa = a->shape;
    const Shape& sb = b->shape;
    if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
        throw DimensionError("concat_channels: batch/spatial mismatch " + sa.str() + " vs " +
                             sb.str());
    auto out = detail::make_node(Shape{sa.n, sa.c + sb.c, sa.h, sa.w}, {a, b});
    const std::int64_t plane = static_cast<std::int64_t>(sa.h) * sa.w;
    for (int n = 0; n < sa.n; ++n) {
        double* dst = out->data.data() + static_cast<std::size_t>(n) * (sa.c + sb.c) * plane;
        std::copy_n(a->data.data() + static_cast<std::size_t>(n) * sa.c * plane, sa.c * plane,
                    dst);
        std::copy_n(b->data.data() + static_cast<std::size_t>(n) * sb.c * plane, sb.c * plane,
                    dst + static_cast<std::size_t>(sa.c) * plane);
    }
    if (out->requires_grad) {
        Tensor* o = out.get();
        out->backward_fn = [=]() {
            TensorPtr ta = o->parents[0];
            TensorPtr tb = o->parents[1];
            for (int n = 0; n < sa.n; ++n) {
                const double* g =
                    o->grad.data() + static_cast<std::size_t>(n) * (sa.c + sb.c) * plane;
                if (ta->requires_grad) {
                    ta->ensure_grad();
                    double* gi = ta->grad.data() + static_cast<std::size_t>(n) * sa.c * plane;
                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(sa.c) * plane; ++i)
                        gi[i] += g[i];
                }
                if (tb->requires_grad) {
                    tb->ensure_grad();
                    double* gi = tb->grad.data() + static_cast<std::size_t>(n) * sb.c * plane;
                    const double* gb = g + static_cast<std::size_t>(sa.c) * plane;
                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(sb.c) * plane; ++i)
                        gi[i] += gb[i];
                }
            }
        };
    }
    return out;
}

// Elementwise product. Shapes must match exactly, or one operand may be
// (N, C, 1, 1) and broadcasts over the spatial axes.
inline TensorPtr elementwise_mul(const TensorPtr& a, const TensorPtr& b) {
    const Shape& sa = a->shape;
    const Shape& sb = b->shape;
    const bool same = sa == sb;
    const bool a_bcast = !same && sa.n == sb.n && sa.c == sb.c && sa.h == 1 && sa.w == 1;
    const bool b_bcast = !same && sa.n == sb.n && sa.c == sb.c && sb.h == 1 && sb.w == 1;
    if (!same && !a_bcast && !b_bcast)
        throw DimensionError("elementwise_mul: incompatible shapes " + sa.str() + " vs " +
                             sb.str());

    const Shape os = b_bcast || same ? sa : sb;
    auto out = detail::make_node(os, {a, b});
    const std::int64_t plane = static_cast<std::int64_t>(os.h) * os.w;

    auto value_of = [plane](const TensorPtr& t, bool bcast, int n, int c, std::int64_t i) {
        if (bcast) return t->data[static_cast<std::size_t>(n) * t->shape.c + c];
        return t->data[(static_cast<std::size_t>(n) * t->shape.c + c) * plane + i];
    };
    for (int n = 0; n < os.n; ++n)
        for (int c = 0; c < os.c; ++c) {
            double* dst = out->data.data() + (static_cast<std::size_t>(n) * os.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i)
                dst[i] = value_of(a, a_bcast, n, c, i) * value_of(b, b_bcast, n, c, i);
        }

    if (out->requires_grad) {
        Tensor* o = out.get();
        out->backward_fn = [=]() {
            TensorPtr ta = o->parents[0];
            TensorPtr tb = o->parents[1];
            if (ta->requires_grad) ta->ensure_grad();
            if (tb->requires_grad) tb->ensure_grad();
            for (int n = 0; n < os.n; ++n)
                for (int c = 0; c < os.c; ++c) {
                    const double* g =
                        o->grad.data() + (static_cast<std::size_t>(n) * os.c + c) * plane;
                    if (ta->requires_grad) {
                        if (a_bcast) {
                            double s = 0.0;
                            for (std::int64_t i = 0; i < plane; ++i)
                                s += g[i] * value_of(tb, b_bcast, n, c, i);
                            ta->grad[static_cast<std::size_t>(n) * os.c + c] += s;
                        } else {
                            double* gi = ta->grad.data() +
                                         (static_cast<std::size_t>(n) * os.c + c) * plane;
                            for (std::int64_t i = 0; i < plane; ++i)
                                gi[i] += g[i] * value_of(tb, b_bcast, n, c, i);
                        }
                    }
                    if (tb->requires_grad) {
                        if (b_bcast) {
                            double s = 0.0;
                            for (std::int64_t i = 0; i < plane; ++i)
                                s += g[i] * value_of(ta, a_bcast, n, c, i);
                            tb->grad[static_cast<std::size_t>(n) * os.c + c] += s;
                        } else {
                            double* gi = tb->grad.data() +
                                         (static_cast<std::size_t>(n) * os.c + c) * plane;
                            for (std::int64_t i = 0; i < plane; ++i)
                                gi[i] += g[i] * value_of(ta, a_bcast, n, c, i);
                        }
                    }
                }
        };
    }
    return out;
}

namespace detail {

inline void validate_dice_inputs(const TensorPtr& pred, const TensorPtr& target) {
    if (!(pred->shape == target->shape))
        throw DimensionError("dice loss: pred " + pred->shape.str() + " vs target " +
                             target->shape.str());
    for (double v : pred->data)
        if (!(v >= 0.0 && v <= 1.0))
            throw ContractError("dice loss: pred value outside [0,1]");
    for (double v : target->data)
        if (v != 0.0 && v != 1.0) throw ContractError("dice loss: target not binary");
}

}  // namespace detail

// Soft Dice loss over the whole batch: 1 - (2*sum(p*g)+s)/(sum(p)+sum(g)+s).
inline TensorPtr dice_loss(const TensorPtr& pred, const TensorPtr& target, double smooth = 1.0) {
    detail::validate_dice_inputs(pred, target);
    const std::int64_t n = pred->numel();
    double inter = 0.0, total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        inter += pred->data[i] * target->data[i];
        total += pred->data[i] + target->data[i];
    }
    auto out = detail::make_node(Shape{1, 1, 1, 1}, {pred, target});
    out->data[0] = 1.0 - (2.0 * inter + smooth) / (total + smooth);
    detail::check_finite(*out, "dice_loss");

    if (out->requires_grad) {
        Tensor* o = out.get();
        out->backward_fn = [=]() {
            TensorPtr p = o->parents[0];
            TensorPtr g = o->parents[1];
            if (!p->requires_grad) return;
            p->ensure_grad();
            const double denom = total + smooth;
            const double num = 2.0 * inter + smooth;
            const double go = o->grad[0];
            for (std::int64_t i = 0; i < n; ++i) {
                p->grad[i] += go * (num - 2.0 * g->data[i] * denom) / (denom * denom);
            }
        };
    }
    return out;
}

// Mean over batch items of the per-sample soft Dice loss; the training
// objective (keeps the pooled-batch gradient equal to the sample-count
// weighted mean of per-client gradients).
inline TensorPtr dice_loss_mean(const TensorPtr& pred, const TensorPtr& target,
                                double smooth = 1.0) {
    detail::validate_dice_inputs(pred, target);
    const Shape& s = pred->shape;
    const std::int64_t per = static_cast<std::int64_t>(s.c) * s.h * s.w;
    std::vector<double> inter(s.n, 0.0), total(s.n, 0.0);
    double loss = 0.0;
    for (int b = 0; b < s.n; ++b) {
        const double* p = pred->data.data() + static_cast<std::size_t>(b) * per;
        const double* g = target->data.data() + static_cast<std::size_t>(b) * per;
        for (std::int64_t i = 0; i < per; ++i) {
            inter[b] += p[i] * g[i];
            total[b] += p[i] + g[i];
        }
        loss += 1.0 - (2.0 * inter[b] + smooth) / (total[b] + smooth);
    }
    loss /= static_cast<double>(s.n);

    auto out = detail::make_node(Shape{1, 1, 1, 1}, {pred, target});
    out->data[0] = loss;
    detail::check_finite(*out, "dice_loss_mean");

    if (out->requires_grad) {
        Tensor* o = out.get();
        const int nb = s.n;
        out->backward_fn = [=]() {
            TensorPtr p = o->parents[0];
            TensorPtr g = o->parents[1];
            if (!p->requires_grad) return;
            p->ensure_grad();
            const double go = o->grad[0] / static_cast<double>(nb);
            for (int b = 0; b < nb; ++b) {
                const double denom = total[b] + smooth;
                const double num = 2.0 * inter[b] + smooth;
                const double* gt = g->data.data() + static_cast<std::size_t>(b) * per;
                double* gp = p->grad.data() + static_cast<std::size_t>(b) * per;
                for (std::int64_t i = 0; i < per; ++i)
                    gp[i] += go * (num - 2.0 * gt[i] * denom) / (denom * denom);
            }
        };
    }
    return out;
}

}  // namespace fedseg
