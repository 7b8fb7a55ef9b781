#pragma once

// Minimal deterministic differentiable-computation kernel: dense tensors, a
// record/replay tape over the handful of layers the adaptation networks need,
// and Adam. Scalar type is a template parameter; finite-difference tests run
// in double, training defaults to float.

#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "flakelab/common.hpp"

namespace flakelab::nn {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= std::size_t(d);
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
    return s + ")";
}

template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until gradients are requested

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), T(0)) {}
    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != shape_numel(shape)) throw ShapeError("tensor data does not match shape " + shape_str(shape));
    }

    std::size_t numel() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() { grad.assign(data.size(), T(0)); }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor randn(Shape s, Rng& rng, double stddev) {
        Tensor t(std::move(s));
        for (T& v : t.data) v = T(rng.normal() * stddev);
        return t;
    }
};

// Tape-based graph. Parameters registered with param() get their gradients
// accumulated back into the external tensor after backward(). A graph and its
// tensors stay on one thread for the duration of a forward/backward pass.
template <typename T>
class Graph {
public:
    using Ref = int;

    Ref param(Tensor<T>& t) {
        const Ref r = add_node(t.shape, t.data, true);
        external_.push_back({r, &t});
        return r;
    }

    Ref constant(Tensor<T> t) { return add_node(t.shape, std::move(t.data), false); }

    const Tensor<T>& value(Ref r) const { return nodes_[std::size_t(r)].val; }
    const std::vector<T>& grad(Ref r) const { return nodes_[std::size_t(r)].grad; }

    // --- layers ---------------------------------------------------------

    Ref conv2d(Ref x, Ref w, Ref b, int stride, int pad) {
        const auto& xs = nodes_[x].val.shape;
        const auto& ws = nodes_[w].val.shape;
        const auto& bs = nodes_[b].val.shape;
        if (xs.size() != 4 || ws.size() != 4 || bs.size() != 1 || xs[1] != ws[1] || ws[0] != bs[0]) {
            throw ShapeError("conv2d: incompatible shapes x=" + shape_str(xs) + " w=" + shape_str(ws) +
                             " b=" + shape_str(bs));
        }
        if (stride < 1 || pad < 0) throw ShapeError("conv2d: stride must be >= 1 and pad >= 0");
        const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
        const int O = ws[0], K = ws[2];
        if (ws[3] != K) throw ShapeError("conv2d: kernels must be square");
        const int OH = (H + 2 * pad - K) / stride + 1;
        const int OW = (W + 2 * pad - K) / stride + 1;
        if (OH <= 0 || OW <= 0) throw ShapeError("conv2d: output would be empty");
        const Ref y = add_node({N, O, OH, OW});

        conv_forward(nodes_[x].val, nodes_[w].val, nodes_[b].val, nodes_[y].val, stride, pad);
        tape_.push_back([this, x, w, b, y, stride, pad, N, C, H, W, O, K, OH, OW] {
            conv_backward(x, w, b, y, stride, pad, N, C, H, W, O, K, OH, OW);
        });
        return y;
    }

    Ref relu(Ref x) {
        const Ref y = add_node(nodes_[x].val.shape);
        auto& yv = nodes_[y].val.data;
        const auto& xv = nodes_[x].val.data;
        for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = xv[i] > T(0) ? xv[i] : T(0);
        tape_.push_back([this, x, y] {
            auto& xg = nodes_[x].grad;
            const auto& xv = nodes_[x].val.data;
            const auto& yg = nodes_[y].grad;
            for (std::size_t i = 0; i < xv.size(); ++i)
                if (xv[i] > T(0)) xg[i] += yg[i];
        });
        return y;
    }

    // NCHW -> NC (mean over the spatial extent).
    Ref avgpool_global(Ref x) {
        const auto& xs = nodes_[x].val.shape;
        if (xs.size() != 4) throw ShapeError("avgpool_global expects NCHW, got " + shape_str(xs));
        const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
        const Ref y = add_node({N, C});
        const T inv = T(1) / T(H * W);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T* src = nodes_[x].val.data.data() + (std::size_t(n) * C + c) * H * W;
                T acc = T(0);
                for (int i = 0; i < H * W; ++i) acc += src[i];
                nodes_[y].val.data[std::size_t(n) * C + c] = acc * inv;
            }
        tape_.push_back([this, x, y, N, C, H, W, inv] {
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const T g = nodes_[y].grad[std::size_t(n) * C + c] * inv;
                    T* dst = nodes_[x].grad.data() + (std::size_t(n) * C + c) * H * W;
                    for (int i = 0; i < H * W; ++i) dst[i] += g;
                }
        });
        return y;
    }

    Ref upsample_nearest2x(Ref x) {
        const auto& xs = nodes_[x].val.shape;
        if (xs.size() != 4) throw ShapeError("upsample_nearest2x expects NCHW, got " + shape_str(xs));
        const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
        const Ref y = add_node({N, C, H * 2, W * 2});
        for (int nc = 0; nc < N * C; ++nc) {
            const T* src = nodes_[x].val.data.data() + std::size_t(nc) * H * W;
            T* dst = nodes_[y].val.data.data() + std::size_t(nc) * H * W * 4;
            for (int yy = 0; yy < 2 * H; ++yy)
                for (int xx = 0; xx < 2 * W; ++xx) dst[yy * 2 * W + xx] = src[(yy / 2) * W + xx / 2];
        }
        tape_.push_back([this, x, y, N, C, H, W] {
            for (int nc = 0; nc < N * C; ++nc) {
                T* src = nodes_[x].grad.data() + std::size_t(nc) * H * W;
                const T* dst = nodes_[y].grad.data() + std::size_t(nc) * H * W * 4;
                for (int yy = 0; yy < 2 * H; ++yy)
                    for (int xx = 0; xx < 2 * W; ++xx) src[(yy / 2) * W + xx / 2] += dst[yy * 2 * W + xx];
            }
        });
        return y;
    }

    // x: N x F, w: O x F, b: O -> N x O
    Ref fully_connected(Ref x, Ref w, Ref b) {
        const auto& xs = nodes_[x].val.shape;
        const auto& ws = nodes_[w].val.shape;
        if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1] || nodes_[b].val.shape != Shape{ws[0]}) {
            throw ShapeError("fully_connected: incompatible shapes x=" + shape_str(xs) + " w=" + shape_str(ws));
        }
        const int N = xs[0], F = xs[1], O = ws[0];
        const Ref y = add_node({N, O});
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < O; ++o) {
                const T* xrow = nodes_[x].val.data.data() + std::size_t(n) * F;
                const T* wrow = nodes_[w].val.data.data() + std::size_t(o) * F;
                T acc = nodes_[b].val.data[o];
                for (int f = 0; f < F; ++f) acc += xrow[f] * wrow[f];
                nodes_[y].val.data[std::size_t(n) * O + o] = acc;
            }
        tape_.push_back([this, x, w, b, y, N, F, O] {
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o) {
                    const T g = nodes_[y].grad[std::size_t(n) * O + o];
                    if (g == T(0)) continue;
                    const T* xrow = nodes_[x].val.data.data() + std::size_t(n) * F;
                    const T* wrow = nodes_[w].val.data.data() + std::size_t(o) * F;
                    T* xg = nodes_[x].grad.data() + std::size_t(n) * F;
                    T* wg = nodes_[w].grad.data() + std::size_t(o) * F;
                    for (int f = 0; f < F; ++f) {
                        xg[f] += g * wrow[f];
                        wg[f] += g * xrow[f];
                    }
                    nodes_[b].grad[o] += g;
                }
        });
        return y;
    }

    Ref sigmoid(Ref x) {
        const Ref y = add_node(nodes_[x].val.shape);
        const auto& xv = nodes_[x].val.data;
        auto& yv = nodes_[y].val.data;
        for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = T(1) / (T(1) + std::exp(-xv[i]));
        tape_.push_back([this, x, y] {
            const auto& yv = nodes_[y].val.data;
            const auto& yg = nodes_[y].grad;
            auto& xg = nodes_[x].grad;
            for (std::size_t i = 0; i < yv.size(); ++i) xg[i] += yg[i] * yv[i] * (T(1) - yv[i]);
        });
        return y;
    }

    Ref exp(Ref x) {
        const Ref y = add_node(nodes_[x].val.shape);
        const auto& xv = nodes_[x].val.data;
        auto& yv = nodes_[y].val.data;
        for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = std::exp(xv[i]);
        tape_.push_back([this, x, y] {
            const auto& yv = nodes_[y].val.data;
            const auto& yg = nodes_[y].grad;
            auto& xg = nodes_[x].grad;
            for (std::size_t i = 0; i < yv.size(); ++i) xg[i] += yg[i] * yv[i];
        });
        return y;
    }

    // y = mult * x + add, elementwise.
    Ref affine_scalar(Ref x, T mult, T add) {
        const Ref y = add_node(nodes_[x].val.shape);
        const auto& xv = nodes_[x].val.data;
        auto& yv = nodes_[y].val.data;
        for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = mult * xv[i] + add;
        tape_.push_back([this, x, y, mult] {
            const auto& yg = nodes_[y].grad;
            auto& xg = nodes_[x].grad;
            for (std::size_t i = 0; i < yg.size(); ++i) xg[i] += mult * yg[i];
        });
        return y;
    }

    Ref scale(Ref x, T factor) {
        const Ref y = add_node(nodes_[x].val.shape);
        const auto& xv = nodes_[x].val.data;
        auto& yv = nodes_[y].val.data;
        for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = factor * xv[i];
        tape_.push_back([this, x, y, factor] {
            const auto& yg = nodes_[y].grad;
            auto& xg = nodes_[x].grad;
            for (std::size_t i = 0; i < yg.size(); ++i) xg[i] += factor * yg[i];
        });
        return y;
    }

    Ref add(Ref a, Ref b) {
        if (nodes_[a].val.shape != nodes_[b].val.shape)
            throw ShapeError("add: shape mismatch " + shape_str(nodes_[a].val.shape) + " vs " +
                             shape_str(nodes_[b].val.shape));
        const Ref y = add_node(nodes_[a].val.shape);
        const auto& av = nodes_[a].val.data;
        const auto& bv = nodes_[b].val.data;
        auto& yv = nodes_[y].val.data;
        for (std::size_t i = 0; i < av.size(); ++i) yv[i] = av[i] + bv[i];
        tape_.push_back([this, a, b, y] {
            const auto& yg = nodes_[y].grad;
            auto& ag = nodes_[a].grad;
            auto& bg = nodes_[b].grad;
            for (std::size_t i = 0; i < yg.size(); ++i) {
                ag[i] += yg[i];
                bg[i] += yg[i];
            }
        });
        return y;
    }

    // x: NCHW, mean/scale: C -> y = (x - mean[c]) * scale[c]. mean and scale
    // are plain data (no gradient); dx = dy * scale.
    Ref channel_affine(Ref x, const std::vector<T>& mean, const std::vector<T>& scale) {
        const auto& xs = nodes_[x].val.shape;
        if (xs.size() != 4 || mean.size() != std::size_t(xs[1]) || scale.size() != mean.size()) {
            throw ShapeError("channel_affine: x=" + shape_str(xs) + " with " + std::to_string(mean.size()) +
                             " channel stats");
        }
        const int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
        const Ref y = add_node(xs);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T m = mean[std::size_t(c)], s = scale[std::size_t(c)];
                const T* src = nodes_[x].val.data.data() + (std::size_t(n) * C + c) * HW;
                T* dst = nodes_[y].val.data.data() + (std::size_t(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) dst[i] = (src[i] - m) * s;
            }
        tape_.push_back([this, x, y, N, C, HW, scale] {
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const T s = scale[std::size_t(c)];
                    const T* yg = nodes_[y].grad.data() + (std::size_t(n) * C + c) * HW;
                    T* xg = nodes_[x].grad.data() + (std::size_t(n) * C + c) * HW;
                    for (int i = 0; i < HW; ++i) xg[i] += yg[i] * s;
                }
        });
        return y;
    }

    // x: 1 x C -> N x C by repetition; gradients sum back over the rows.
    Ref tile_rows(Ref x, int n) {
        const auto& xs = nodes_[x].val.shape;
        if (xs.size() != 2 || xs[0] != 1) throw ShapeError("tile_rows expects 1 x C, got " + shape_str(xs));
        const int C = xs[1];
        const Ref y = add_node({n, C});
        for (int row = 0; row < n; ++row)
            std::copy(nodes_[x].val.data.begin(), nodes_[x].val.data.end(),
                      nodes_[y].val.data.begin() + std::size_t(row) * C);
        tape_.push_back([this, x, y, n, C] {
            for (int row = 0; row < n; ++row)
                for (int c = 0; c < C; ++c) nodes_[x].grad[c] += nodes_[y].grad[std::size_t(row) * C + c];
        });
        return y;
    }

    // x: N x C -> N x (c1 - c0), columns [c0, c1).
    Ref slice_cols(Ref x, int c0, int c1) {
        const auto& xs = nodes_[x].val.shape;
        if (xs.size() != 2 || c0 < 0 || c1 > xs[1] || c0 >= c1)
            throw ShapeError("slice_cols: bad range on " + shape_str(xs));
        const int N = xs[0], C = xs[1], W = c1 - c0;
        const Ref y = add_node({N, W});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < W; ++c)
                nodes_[y].val.data[std::size_t(n) * W + c] = nodes_[x].val.data[std::size_t(n) * C + c0 + c];
        tape_.push_back([this, x, y, N, C, W, c0] {
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < W; ++c)
                    nodes_[x].grad[std::size_t(n) * C + c0 + c] += nodes_[y].grad[std::size_t(n) * W + c];
        });
        return y;
    }

    // x: NCHW, s: N x C -> y[n,c,h,w] = x[n,c,h,w] * s[n,c]
    Ref batch_channel_scale(Ref x, Ref s) {
        const auto& xs = nodes_[x].val.shape;
        const auto& ss = nodes_[s].val.shape;
        if (xs.size() != 4 || ss.size() != 2 || ss[0] != xs[0] || ss[1] != xs[1]) {
            throw ShapeError("batch_channel_scale: x=" + shape_str(xs) + " s=" + shape_str(ss));
        }
        const int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
        const Ref y = add_node(xs);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T sv = nodes_[s].val.data[std::size_t(n) * C + c];
                const T* src = nodes_[x].val.data.data() + (std::size_t(n) * C + c) * HW;
                T* dst = nodes_[y].val.data.data() + (std::size_t(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) dst[i] = src[i] * sv;
            }
        tape_.push_back([this, x, s, y, N, C, HW] {
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const std::size_t base = (std::size_t(n) * C + c) * HW;
                    const T sv = nodes_[s].val.data[std::size_t(n) * C + c];
                    const T* xv = nodes_[x].val.data.data() + base;
                    const T* yg = nodes_[y].grad.data() + base;
                    T* xg = nodes_[x].grad.data() + base;
                    T sg = T(0);
                    for (int i = 0; i < HW; ++i) {
                        xg[i] += yg[i] * sv;
                        sg += yg[i] * xv[i];
                    }
                    nodes_[s].grad[std::size_t(n) * C + c] += sg;
                }
        });
        return y;
    }

    // y = x^(1/gamma) elementwise; gamma: N x 1 broadcast over the sample.
    // x is clamped below at eps inside the pow so the gamma gradient is finite.
    Ref pow_inv_gamma(Ref x, Ref gamma) {
        const auto& xs = nodes_[x].val.shape;
        const auto& gs = nodes_[gamma].val.shape;
        if (xs.size() != 4 || gs.size() != 2 || gs[0] != xs[0] || gs[1] != 1) {
            throw ShapeError("pow_inv_gamma: x=" + shape_str(xs) + " gamma=" + shape_str(gs));
        }
        const int N = xs[0], CHW = xs[1] * xs[2] * xs[3];
        const T eps = T(1e-6);
        const Ref y = add_node(xs);
        for (int n = 0; n < N; ++n) {
            const T inv_g = T(1) / nodes_[gamma].val.data[n];
            const T* src = nodes_[x].val.data.data() + std::size_t(n) * CHW;
            T* dst = nodes_[y].val.data.data() + std::size_t(n) * CHW;
            for (int i = 0; i < CHW; ++i) dst[i] = std::pow(std::max(src[i], eps), inv_g);
        }
        tape_.push_back([this, x, gamma, y, N, CHW, eps] {
            for (int n = 0; n < N; ++n) {
                const T g = nodes_[gamma].val.data[n];
                const T inv_g = T(1) / g;
                const std::size_t base = std::size_t(n) * CHW;
                T ggrad = T(0);
                for (int i = 0; i < CHW; ++i) {
                    const T xv = std::max(nodes_[x].val.data[base + i], eps);
                    const T yv = nodes_[y].val.data[base + i];
                    const T up = nodes_[y].grad[base + i];
                    if (nodes_[x].val.data[base + i] > eps) {
                        nodes_[x].grad[base + i] += up * inv_g * yv / xv;
                    }
                    ggrad += up * yv * std::log(xv) * (-inv_g * inv_g);
                }
                nodes_[gamma].grad[n] += ggrad;
            }
        });
        return y;
    }

    // --- losses (all reduce to a scalar, shape {1}) -----------------------

    Ref softmax(Ref x) {
        const auto& xs = nodes_[x].val.shape;
        if (xs.size() != 2) throw ShapeError("softmax expects N x C, got " + shape_str(xs));
        const int N = xs[0], C = xs[1];
        const Ref y = add_node(xs);
        for (int n = 0; n < N; ++n) {
            const T* row = nodes_[x].val.data.data() + std::size_t(n) * C;
            T* out = nodes_[y].val.data.data() + std::size_t(n) * C;
            T mx = row[0];
            for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
            T sum = T(0);
            for (int c = 0; c < C; ++c) {
                out[c] = std::exp(row[c] - mx);
                sum += out[c];
            }
            for (int c = 0; c < C; ++c) out[c] /= sum;
        }
        tape_.push_back([this, x, y, N, C] {
            for (int n = 0; n < N; ++n) {
                const T* p = nodes_[y].val.data.data() + std::size_t(n) * C;
                const T* dy = nodes_[y].grad.data() + std::size_t(n) * C;
                T* dx = nodes_[x].grad.data() + std::size_t(n) * C;
                T dot = T(0);
                for (int c = 0; c < C; ++c) dot += dy[c] * p[c];
                for (int c = 0; c < C; ++c) dx[c] += p[c] * (dy[c] - dot);
            }
        });
        return y;
    }

    Ref cross_entropy(Ref logits, const std::vector<int>& labels) {
        const auto& xs = nodes_[logits].val.shape;
        if (xs.size() != 2 || std::size_t(xs[0]) != labels.size()) {
            throw ShapeError("cross_entropy: logits " + shape_str(xs) + " vs " + std::to_string(labels.size()) +
                             " labels");
        }
        const int N = xs[0], C = xs[1];
        for (int label : labels)
            if (label < 0 || label >= C) throw DomainError("cross_entropy: label " + std::to_string(label) +
                                                           " outside [0," + std::to_string(C) + ")");
        const Ref y = add_node({1});
        // keep per-row softmax around for the backward pass
        auto probs = std::make_shared<std::vector<T>>(std::size_t(N) * C);
        T loss = T(0);
        for (int n = 0; n < N; ++n) {
            const T* row = nodes_[logits].val.data.data() + std::size_t(n) * C;
            T mx = row[0];
            for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
            T sum = T(0);
            for (int c = 0; c < C; ++c) sum += std::exp(row[c] - mx);
            const T log_sum = std::log(sum) + mx;
            loss -= row[labels[std::size_t(n)]] - log_sum;
            for (int c = 0; c < C; ++c) (*probs)[std::size_t(n) * C + c] = std::exp(row[c] - log_sum);
        }
        nodes_[y].val.data[0] = loss / T(N);
        tape_.push_back([this, logits, y, labels, probs, N, C] {
            const T g = nodes_[y].grad[0] / T(N);
            for (int n = 0; n < N; ++n) {
                T* dx = nodes_[logits].grad.data() + std::size_t(n) * C;
                for (int c = 0; c < C; ++c) {
                    const T onehot = (c == labels[std::size_t(n)]) ? T(1) : T(0);
                    dx[c] += g * ((*probs)[std::size_t(n) * C + c] - onehot);
                }
            }
        });
        return y;
    }

    Ref smooth_l1(Ref pred, Ref target) {
        if (nodes_[pred].val.shape != nodes_[target].val.shape)
            throw ShapeError("smooth_l1: shape mismatch " + shape_str(nodes_[pred].val.shape) + " vs " +
                             shape_str(nodes_[target].val.shape));
        const Ref y = add_node({1});
        const auto& p = nodes_[pred].val.data;
        const auto& t = nodes_[target].val.data;
        T loss = T(0);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const T d = p[i] - t[i];
            const T a = std::abs(d);
            loss += a < T(1) ? T(0.5) * d * d : a - T(0.5);
        }
        nodes_[y].val.data[0] = loss / T(p.size());
        tape_.push_back([this, pred, target, y] {
            const auto& p = nodes_[pred].val.data;
            const auto& t = nodes_[target].val.data;
            const T g = nodes_[y].grad[0] / T(p.size());
            for (std::size_t i = 0; i < p.size(); ++i) {
                const T d = p[i] - t[i];
                const T slope = std::abs(d) < T(1) ? d : (d > T(0) ? T(1) : T(-1));
                nodes_[pred].grad[i] += g * slope;
                nodes_[target].grad[i] -= g * slope;
            }
        });
        return y;
    }

    // Mean Shannon entropy of already-normalized rows.
    Ref entropy_loss(Ref probs) {
        const auto& xs = nodes_[probs].val.shape;
        if (xs.size() != 2) throw ShapeError("entropy_loss expects N x C, got " + shape_str(xs));
        const int N = xs[0], C = xs[1];
        for (int n = 0; n < N; ++n) {
            T sum = T(0);
            for (int c = 0; c < C; ++c) {
                const T v = nodes_[probs].val.data[std::size_t(n) * C + c];
                if (v < T(0)) throw DomainError("entropy_loss: negative probability");
                sum += v;
            }
            if (std::abs(sum - T(1)) > T(1e-6)) throw DomainError("entropy_loss: row does not sum to 1");
        }
        const Ref y = add_node({1});
        T loss = T(0);
        for (std::size_t i = 0; i < nodes_[probs].val.data.size(); ++i) {
            const T v = nodes_[probs].val.data[i];
            if (v > T(0)) loss -= v * std::log(v);
        }
        nodes_[y].val.data[0] = loss / T(N);
        tape_.push_back([this, probs, y, N] {
            const T g = nodes_[y].grad[0] / T(N);
            for (std::size_t i = 0; i < nodes_[probs].val.data.size(); ++i) {
                const T v = nodes_[probs].val.data[i];
                if (v > T(0)) nodes_[probs].grad[i] += g * (-(std::log(v) + T(1)));
            }
        });
        return y;
    }

    Ref mse(Ref pred, Ref target) {
        if (nodes_[pred].val.shape != nodes_[target].val.shape)
            throw ShapeError("mse: shape mismatch " + shape_str(nodes_[pred].val.shape) + " vs " +
                             shape_str(nodes_[target].val.shape));
        const Ref y = add_node({1});
        const auto& p = nodes_[pred].val.data;
        const auto& t = nodes_[target].val.data;
        T loss = T(0);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const T d = p[i] - t[i];
            loss += d * d;
        }
        nodes_[y].val.data[0] = loss / T(p.size());
        tape_.push_back([this, pred, target, y] {
            const auto& p = nodes_[pred].val.data;
            const auto& t = nodes_[target].val.data;
            const T g = T(2) * nodes_[y].grad[0] / T(p.size());
            for (std::size_t i = 0; i < p.size(); ++i) {
                const T d = p[i] - t[i];
                nodes_[pred].grad[i] += g * d;
                nodes_[target].grad[i] -= g * d;
            }
        });
        return y;
    }

    // Pairwise smoothness over the per-output-channel slices of a conv layer:
    // (1/D) sum_l sum_{l' in {l-1,l+1}} ||theta_l - theta_l'||^2 where theta_l
    // is (w[l,:,:,:], b[l]). Each adjacent pair appears twice in the sum.
    Ref tau_neighbor(Ref w, Ref b) {
        const auto& ws = nodes_[w].val.shape;
        const auto& bs = nodes_[b].val.shape;
        if (ws.size() != 4 || bs.size() != 1 || ws[0] != bs[0]) {
            throw ShapeError("tau_neighbor: w=" + shape_str(ws) + " b=" + shape_str(bs));
        }
        const int D = ws[0];
        const int slice = ws[1] * ws[2] * ws[3];
        const Ref y = add_node({1});
        if (D < 2) {
            nodes_[y].val.data[0] = T(0);
            return y;
        }
        T acc = T(0);
        for (int l = 0; l + 1 < D; ++l) {
            const T* a = nodes_[w].val.data.data() + std::size_t(l) * slice;
            const T* c = a + slice;
            for (int i = 0; i < slice; ++i) {
                const T d = a[i] - c[i];
                acc += d * d;
            }
            const T db = nodes_[b].val.data[l] - nodes_[b].val.data[l + 1];
            acc += db * db;
        }
        nodes_[y].val.data[0] = T(2) * acc / T(D);
        tape_.push_back([this, w, b, y, D, slice] {
            const T g = nodes_[y].grad[0] * T(4) / T(D);  // d/da (2/D)(a-c)^2 = (4/D)(a-c)
            for (int l = 0; l + 1 < D; ++l) {
                const T* a = nodes_[w].val.data.data() + std::size_t(l) * slice;
                const T* c = a + slice;
                T* ga = nodes_[w].grad.data() + std::size_t(l) * slice;
                T* gc = ga + slice;
                for (int i = 0; i < slice; ++i) {
                    const T d = g * (a[i] - c[i]);
                    ga[i] += d;
                    gc[i] -= d;
                }
                const T db = g * (nodes_[b].val.data[l] - nodes_[b].val.data[l + 1]);
                nodes_[b].grad[l] += db;
                nodes_[b].grad[l + 1] -= db;
            }
        });
        return y;
    }

    Ref add_scaled(Ref a, Ref b, T beta) {
        if (nodes_[a].val.shape != nodes_[b].val.shape) throw ShapeError("add_scaled: shape mismatch");
        const Ref y = add_node(nodes_[a].val.shape);
        for (std::size_t i = 0; i < nodes_[a].val.data.size(); ++i)
            nodes_[y].val.data[i] = nodes_[a].val.data[i] + beta * nodes_[b].val.data[i];
        tape_.push_back([this, a, b, y, beta] {
            for (std::size_t i = 0; i < nodes_[y].grad.size(); ++i) {
                nodes_[a].grad[i] += nodes_[y].grad[i];
                nodes_[b].grad[i] += beta * nodes_[y].grad[i];
            }
        });
        return y;
    }

    // Runs the tape in exact reverse recording order, then accumulates
    // parameter gradients into the registered external tensors.
    void backward(Ref loss) {
        if (nodes_[loss].val.numel() != 1) throw ShapeError("backward expects a scalar loss");
        for (auto& node : nodes_) node.grad.assign(node.val.numel(), T(0));
        nodes_[loss].grad[0] = T(1);
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
        for (const auto& [ref, tensor] : external_) {
            tensor->ensure_grad();
            const auto& g = nodes_[ref].grad;
            for (std::size_t i = 0; i < g.size(); ++i) tensor->grad[i] += g[i];
        }
    }

private:
    struct Node {
        Tensor<T> val;
        std::vector<T> grad;
        bool needs_grad = false;
    };

    Ref add_node(Shape shape, std::vector<T> data = {}, bool needs_grad = false) {
        Node node;
        node.val.shape = std::move(shape);
        node.val.data = data.empty() ? std::vector<T>(shape_numel(node.val.shape), T(0)) : std::move(data);
        node.needs_grad = needs_grad;
        nodes_.push_back(std::move(node));
        return Ref(nodes_.size() - 1);
    }

    // Valid output range along one axis: indices where o*stride - pad + k
    // lands inside [0, extent).
    static std::pair<int, int> valid_range(int out_extent, int in_extent, int stride, int pad, int k) {
        const int shift = k - pad;
        int lo = shift < 0 ? (-shift + stride - 1) / stride : 0;
        int hi = (in_extent - 1 - shift) / stride + 1;
        return {std::min(lo, out_extent), std::max(std::min(hi, out_extent), std::min(lo, out_extent))};
    }

    void conv_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Tensor<T>& y, int stride, int pad) {
        const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        const int O = w.shape[0], K = w.shape[2];
        const int OH = y.shape[2], OW = y.shape[3];
        for (int n = 0; n < N; ++n) {
            for (int o = 0; o < O; ++o) {
                T* out = y.data.data() + (std::size_t(n) * O + o) * OH * OW;
                const T bias = b.data[o];
                for (int i = 0; i < OH * OW; ++i) out[i] = bias;
                for (int c = 0; c < C; ++c) {
                    const T* src = x.data.data() + (std::size_t(n) * C + c) * H * W;
                    const T* ker = w.data.data() + (std::size_t(o) * C + c) * K * K;
                    for (int ky = 0; ky < K; ++ky) {
                        const auto [oy_lo, oy_hi] = valid_range(OH, H, stride, pad, ky);
                        for (int kx = 0; kx < K; ++kx) {
                            const T wv = ker[ky * K + kx];
                            if (wv == T(0)) continue;
                            const auto [ox_lo, ox_hi] = valid_range(OW, W, stride, pad, kx);
                            const int shift_x = kx - pad;
                            for (int oy = oy_lo; oy < oy_hi; ++oy) {
                                const int iy = oy * stride - pad + ky;
                                const T* srow = src + std::size_t(iy) * W + shift_x;
                                T* orow = out + std::size_t(oy) * OW;
                                if (stride == 1) {
                                    for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wv * srow[ox];
                                } else {
                                    for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wv * srow[ox * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    void conv_backward(Ref x, Ref w, Ref b, Ref y, int stride, int pad, int N, int C, int H, int W, int O, int K,
                       int OH, int OW) {
        const auto& xv = nodes_[x].val.data;
        const auto& wv = nodes_[w].val.data;
        const auto& dy = nodes_[y].grad;
        auto& dx = nodes_[x].grad;
        auto& dw = nodes_[w].grad;
        auto& db = nodes_[b].grad;
        for (int n = 0; n < N; ++n) {
            for (int o = 0; o < O; ++o) {
                const T* dout = dy.data() + (std::size_t(n) * O + o) * OH * OW;
                T acc_b = T(0);
                for (int i = 0; i < OH * OW; ++i) acc_b += dout[i];
                db[o] += acc_b;
                for (int c = 0; c < C; ++c) {
                    const T* src = xv.data() + (std::size_t(n) * C + c) * H * W;
                    T* dsrc = dx.data() + (std::size_t(n) * C + c) * H * W;
                    const T* ker = wv.data() + (std::size_t(o) * C + c) * K * K;
                    T* dker = dw.data() + (std::size_t(o) * C + c) * K * K;
                    for (int ky = 0; ky < K; ++ky) {
                        const auto [oy_lo, oy_hi] = valid_range(OH, H, stride, pad, ky);
                        for (int kx = 0; kx < K; ++kx) {
                            const auto [ox_lo, ox_hi] = valid_range(OW, W, stride, pad, kx);
                            const int shift_x = kx - pad;
                            const T kval = ker[ky * K + kx];
                            T acc_w = T(0);
                            for (int oy = oy_lo; oy < oy_hi; ++oy) {
                                const int iy = oy * stride - pad + ky;
                                const T* srow = src + std::size_t(iy) * W + shift_x;
                                T* dsrow = dsrc + std::size_t(iy) * W + shift_x;
                                const T* drow = dout + std::size_t(oy) * OW;
                                if (stride == 1) {
                                    for (int ox = ox_lo; ox < ox_hi; ++ox) acc_w += drow[ox] * srow[ox];
                                    for (int ox = ox_lo; ox < ox_hi; ++ox) dsrow[ox] += kval * drow[ox];
                                } else {
                                    for (int ox = ox_lo; ox < ox_hi; ++ox) {
                                        acc_w += drow[ox] * srow[ox * stride];
                                        dsrow[ox * stride] += kval * drow[ox];
                                    }
                                }
                            }
                            dker[ky * K + kx] += acc_w;
                        }
                    }
                }
            }
        }
    }

    std::vector<Node> nodes_;
    std::vector<std::function<void()>> tape_;
    std::vector<std::pair<Ref, Tensor<T>*>> external_;
};

// Adam with decoupled weight decay. Slots are keyed by position in the
// parameter list, which must stay stable across steps.
template <typename T>
class Adam {
public:
    struct Hyper {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 1e-4;
    };

    explicit Adam(Hyper hyper) : hyper_(hyper) {}

    const Hyper& hyper() const { return hyper_; }
    void set_lr(double lr) { hyper_.lr = lr; }
    long steps_taken() const { return step_; }

    void step(const std::vector<Tensor<T>*>& params) {
        if (slots_.empty()) {
            slots_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                slots_[i].m.assign(params[i]->numel(), T(0));
                slots_[i].v.assign(params[i]->numel(), T(0));
            }
        }
        if (slots_.size() != params.size()) throw ShapeError("adam: parameter list changed size");
        ++step_;
        const double bc1 = 1.0 - std::pow(hyper_.beta1, double(step_));
        const double bc2 = 1.0 - std::pow(hyper_.beta2, double(step_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor<T>& p = *params[i];
            p.ensure_grad();
            auto& m = slots_[i].m;
            auto& v = slots_[i].v;
            if (m.size() != p.numel()) throw ShapeError("adam: parameter shape changed");
            for (std::size_t j = 0; j < p.numel(); ++j) {
                const double g = double(p.grad[j]);
                m[j] = T(hyper_.beta1 * double(m[j]) + (1.0 - hyper_.beta1) * g);
                v[j] = T(hyper_.beta2 * double(v[j]) + (1.0 - hyper_.beta2) * g * g);
                const double m_hat = double(m[j]) / bc1;
                const double v_hat = double(v[j]) / bc2;
                double update = hyper_.lr * m_hat / (std::sqrt(v_hat) + hyper_.eps);
                update += hyper_.lr * hyper_.weight_decay * double(p.data[j]);
                p.data[j] = T(double(p.data[j]) - update);
            }
        }
    }

private:
    struct Slot {
        std::vector<T> m, v;
    };
    Hyper hyper_;
    std::vector<Slot> slots_;
    long step_ = 0;
};

// --- checkpoints ---------------------------------------------------------
// Flat binary: magic "FLCP", u32 version, u32 count, then per tensor
// u32 name length, name bytes, u32 rank, u32 dims..., f32 data.

template <typename T>
void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, const Tensor<T>*>>& tensors) {
    std::vector<std::uint8_t> out;
    auto put_u32 = [&out](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
    };
    out.insert(out.end(), {'F', 'L', 'C', 'P'});
    put_u32(1);
    put_u32(std::uint32_t(tensors.size()));
    for (const auto& [name, tensor] : tensors) {
        put_u32(std::uint32_t(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        put_u32(std::uint32_t(tensor->shape.size()));
        for (int d : tensor->shape) put_u32(std::uint32_t(d));
        for (T v : tensor->data) {
            const float f = float(v);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put_u32(bits);
        }
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw IoError("cannot write checkpoint: " + path.string());
    file.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
    if (!file) throw IoError("checkpoint write failed: " + path.string());
}

template <typename T>
std::map<std::string, Tensor<T>> load_checkpoint(const std::filesystem::path& path) {
    const std::string bytes = read_text_file(path);
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
        if (pos + n > bytes.size()) throw ParseError(path.string() + ": truncated checkpoint");
    };
    auto get_u32 = [&]() {
        need(4);
        std::uint32_t v;
        std::memcpy(&v, bytes.data() + pos, 4);
        pos += 4;
        return v;
    };
    need(4);
    if (std::memcmp(bytes.data(), "FLCP", 4) != 0) throw ParseError(path.string() + ": not a checkpoint (bad magic)");
    pos = 4;
    const std::uint32_t version = get_u32();
    if (version != 1) throw ParseError(path.string() + ": unsupported checkpoint version");
    const std::uint32_t count = get_u32();
    std::map<std::string, Tensor<T>> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = get_u32();
        need(name_len);
        std::string name(bytes.data() + pos, name_len);
        pos += name_len;
        const std::uint32_t rank = get_u32();
        Shape shape(rank);
        for (std::uint32_t r = 0; r < rank; ++r) shape[r] = int(get_u32());
        Tensor<T> tensor(shape);
        for (std::size_t j = 0; j < tensor.numel(); ++j) {
            const std::uint32_t bits = get_u32();
            float f;
            std::memcpy(&f, &bits, 4);
            tensor.data[j] = T(f);
        }
        out.emplace(std::move(name), std::move(tensor));
    }
    return out;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using GraphF = Graph<float>;
using GraphD = Graph<double>;

}  // namespace flakelab::nn
