#include "dp/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

namespace dp {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

Tensor make_out(Shape shape, std::vector<double> values, bool requires_grad) {
    Tensor t = Tensor::from_data(std::move(shape), std::move(values), requires_grad);
    return t;
}

bool any_grad(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts)
        if (t->requires_grad()) return true;
    return false;
}

void attach(Tensor& out, std::vector<NodePtr> parents, std::function<void(Node&)> backward) {
    out.node()->parents = std::move(parents);
    out.node()->backward = std::move(backward);
}

// out[B,M] += x[B,N] . w[M,N]^T
void addmm_nt(double* out, const double* x, const double* w, std::int64_t B, std::int64_t N, std::int64_t M) {
    const std::int64_t grain = std::max<std::int64_t>(1, 32768 / std::max<std::int64_t>(1, N));
    parallel_for(B * M, grain, [&](std::int64_t begin, std::int64_t end) {
        for (std::int64_t idx = begin; idx < end; ++idx) {
            const std::int64_t b = idx / M;
            const std::int64_t m = idx % M;
            const double* xr = x + b * N;
            const double* wr = w + m * N;
            double acc = 0.0;
            for (std::int64_t k = 0; k < N; ++k) acc += xr[k] * wr[k];
            out[idx] += acc;
        }
    });
}

// out[B,N] += g[B,M] . w[M,N]
void addmm_nn(double* out, const double* g, const double* w, std::int64_t B, std::int64_t M, std::int64_t N) {
    parallel_for(B, 1, [&](std::int64_t b0, std::int64_t b1) {
        for (std::int64_t b = b0; b < b1; ++b) {
            double* orow = out + b * N;
            const double* grow = g + b * M;
            for (std::int64_t m = 0; m < M; ++m) {
                const double gv = grow[m];
                if (gv == 0.0) continue;
                const double* wrow = w + m * N;
                for (std::int64_t k = 0; k < N; ++k) orow[k] += gv * wrow[k];
            }
        }
    });
}

// dw[M,N] += g[B,M]^T . x[B,N]
void addmm_tn(double* dw, const double* g, const double* x, std::int64_t B, std::int64_t M, std::int64_t N) {
    parallel_for(M, 1, [&](std::int64_t m0, std::int64_t m1) {
        for (std::int64_t m = m0; m < m1; ++m) {
            double* wrow = dw + m * N;
            for (std::int64_t b = 0; b < B; ++b) {
                const double gv = g[b * M + m];
                if (gv == 0.0) continue;
                const double* xrow = x + b * N;
                for (std::int64_t k = 0; k < N; ++k) wrow[k] += gv * xrow[k];
            }
        }
    });
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    const auto n = static_cast<std::size_t>(a.size());
    std::vector<double> v(n);
    const auto da = a.data();
    const auto db = b.data();
    for (std::size_t i = 0; i < n; ++i) v[i] = da[i] + db[i];
    Tensor out = make_out(a.shape(), std::move(v), any_grad({&a, &b}));
    if (out.requires_grad()) {
        auto an = a.node();
        auto bn = b.node();
        attach(out, {an, bn}, [an, bn](Node& self) {
            an->accumulate_grad(self.grad);
            bn->accumulate_grad(self.grad);
        });
    }
    return out;
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> v(a.data().begin(), a.data().end());
    for (auto& x : v) x += c;
    Tensor out = make_out(a.shape(), std::move(v), a.requires_grad());
    if (out.requires_grad()) {
        auto an = a.node();
        attach(out, {an}, [an](Node& self) { an->accumulate_grad(self.grad); });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    const auto n = static_cast<std::size_t>(a.size());
    std::vector<double> v(n);
    const auto da = a.data();
    const auto db = b.data();
    for (std::size_t i = 0; i < n; ++i) v[i] = da[i] - db[i];
    Tensor out = make_out(a.shape(), std::move(v), any_grad({&a, &b}));
    if (out.requires_grad()) {
        auto an = a.node();
        auto bn = b.node();
        attach(out, {an, bn}, [an, bn](Node& self) {
            an->accumulate_grad(self.grad);
            if (bn->requires_grad) {
                std::vector<double> g(self.grad.size());
                for (std::size_t i = 0; i < g.size(); ++i) g[i] = -self.grad[i];
                bn->accumulate_grad(g);
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    const auto n = static_cast<std::size_t>(a.size());
    std::vector<double> v(n);
    const auto da = a.data();
    const auto db = b.data();
    for (std::size_t i = 0; i < n; ++i) v[i] = da[i] * db[i];
    Tensor out = make_out(a.shape(), std::move(v), any_grad({&a, &b}));
    if (out.requires_grad()) {
        auto an = a.node();
        auto bn = b.node();
        attach(out, {an, bn}, [an, bn](Node& self) {
            if (an->requires_grad) {
                std::vector<double> g(self.grad.size());
                for (std::size_t i = 0; i < g.size(); ++i) g[i] = bn->data[i] * self.grad[i];
                an->accumulate_grad(g);
            }
            if (bn->requires_grad) {
                std::vector<double> g(self.grad.size());
                for (std::size_t i = 0; i < g.size(); ++i) g[i] = an->data[i] * self.grad[i];
                bn->accumulate_grad(g);
            }
        });
    }
    return out;
}

Tensor mul_scalar(const Tensor& a, double c) {
    std::vector<double> v(a.data().begin(), a.data().end());
    for (auto& x : v) x *= c;
    Tensor out = make_out(a.shape(), std::move(v), a.requires_grad());
    if (out.requires_grad()) {
        auto an = a.node();
        attach(out, {an}, [an, c](Node& self) {
            std::vector<double> g(self.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = c * self.grad[i];
            an->accumulate_grad(g);
        });
    }
    return out;
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor out = make_out({1}, {s}, a.requires_grad());
    if (out.requires_grad()) {
        auto an = a.node();
        attach(out, {an}, [an](Node& self) {
            std::vector<double> g(an->data.size(), self.grad[0]);
            an->accumulate_grad(g);
        });
    }
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.size())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " has " + std::to_string(a.size()) +
                             " elements, target " + shape_str(shape));
    std::vector<double> v(a.data().begin(), a.data().end());
    Tensor out = make_out(std::move(shape), std::move(v), a.requires_grad());
    if (out.requires_grad()) {
        auto an = a.node();
        attach(out, {an}, [an](Node& self) { an->accumulate_grad(self.grad); });
    }
    return out;
}

Tensor flatten_batch(const Tensor& a) {
    if (a.rank() < 2) throw DimensionError("flatten_batch expects rank >= 2, got " + shape_str(a.shape()));
    const std::int64_t b = a.dim(0);
    return reshape(a, {b, a.size() / b});
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::int64_t stride, std::int64_t padding) {
    if (input.rank() != 4 || weight.rank() != 4)
        throw DimensionError("conv2d expects input [B,C,H,W] and weight [O,C,kh,kw]");
    if (stride <= 0 || padding < 0) throw UsageError("conv2d: stride must be > 0 and padding >= 0");
    const std::int64_t B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::int64_t Cout = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
    if (weight.dim(1) != Cin)
        throw DimensionError("conv2d: input channels " + std::to_string(Cin) + " != weight channels " +
                             std::to_string(weight.dim(1)));
    if (bias.shape() != Shape{Cout}) throw DimensionError("conv2d: bias must be [Cout]");
    if (H + 2 * padding < KH || W + 2 * padding < KW)
        throw DimensionError("conv2d: kernel larger than padded input");
    const std::int64_t Ho = (H + 2 * padding - KH) / stride + 1;
    const std::int64_t Wo = (W + 2 * padding - KW) / stride + 1;

    const std::int64_t Hp = H + 2 * padding;
    const std::int64_t Wp = W + 2 * padding;
    const bool req = any_grad({&input, &weight, &bias});
    std::vector<double> out_v(static_cast<std::size_t>(B * Cout * Ho * Wo), 0.0);

    const double* xd = input.data().data();
    const double* wd = weight.data().data();
    const double* bd = bias.data().data();

    auto fill_padded = [&](std::int64_t n, std::vector<double>& xpad) {
        std::fill(xpad.begin(), xpad.end(), 0.0);
        for (std::int64_t ci = 0; ci < Cin; ++ci)
            for (std::int64_t h = 0; h < H; ++h)
                std::memcpy(xpad.data() + (ci * Hp + h + padding) * Wp + padding,
                            xd + ((n * Cin + ci) * H + h) * W, static_cast<std::size_t>(W) * sizeof(double));
    };

    parallel_for(B, 1, [&](std::int64_t n0, std::int64_t n1) {
        std::vector<double> xpad(static_cast<std::size_t>(Cin * Hp * Wp));
        for (std::int64_t n = n0; n < n1; ++n) {
            const double* xn;
            if (padding > 0) {
                fill_padded(n, xpad);
                xn = xpad.data();
            } else {
                xn = xd + n * Cin * H * W;
            }
            for (std::int64_t co = 0; co < Cout; ++co) {
                const double bv = bd[co];
                for (std::int64_t ho = 0; ho < Ho; ++ho) {
                    for (std::int64_t wo = 0; wo < Wo; ++wo) {
                        double acc = bv;
                        const std::int64_t hi0 = ho * stride, wi0 = wo * stride;
                        for (std::int64_t ci = 0; ci < Cin; ++ci) {
                            const double* xc = xn + ci * Hp * Wp;
                            const double* wc = wd + ((co * Cin + ci) * KH) * KW;
                            for (std::int64_t kh = 0; kh < KH; ++kh) {
                                const double* xr = xc + (hi0 + kh) * Wp + wi0;
                                const double* wr = wc + kh * KW;
                                for (std::int64_t kw = 0; kw < KW; ++kw) acc += xr[kw] * wr[kw];
                            }
                        }
                        out_v[static_cast<std::size_t>(((n * Cout + co) * Ho + ho) * Wo + wo)] = acc;
                    }
                }
            }
        }
    });

    Tensor out = make_out({B, Cout, Ho, Wo}, std::move(out_v), req);
    if (!req) return out;

    auto xn_node = input.node();
    auto wn_node = weight.node();
    auto bn_node = bias.node();
    attach(out, {xn_node, wn_node, bn_node},
           [xn_node, wn_node, bn_node, B, Cin, H, W, Cout, KH, KW, Ho, Wo, Hp, Wp, stride, padding](Node& self) {
        const double* go = self.grad.data();
        const double* xd = xn_node->data.data();
        const double* wd = wn_node->data.data();
        const bool need_dx = xn_node->requires_grad;
        const bool need_dw = wn_node->requires_grad;
        const bool need_db = bn_node->requires_grad;

        const std::size_t wsize = wn_node->data.size();
        std::vector<std::vector<double>> dw_parts;
        std::vector<std::vector<double>> db_parts;
        std::vector<double> dx(need_dx ? xn_node->data.size() : 0, 0.0);
        if (need_dw) dw_parts.assign(static_cast<std::size_t>(B), {});
        if (need_db) db_parts.assign(static_cast<std::size_t>(B), {});

        parallel_for(B, 1, [&](std::int64_t n0, std::int64_t n1) {
            std::vector<double> xpad(static_cast<std::size_t>(Cin * Hp * Wp));
            std::vector<double> dxpad(need_dx ? static_cast<std::size_t>(Cin * Hp * Wp) : 0);
            for (std::int64_t n = n0; n < n1; ++n) {
                const double* xn;
                if (padding > 0) {
                    std::fill(xpad.begin(), xpad.end(), 0.0);
                    for (std::int64_t ci = 0; ci < Cin; ++ci)
                        for (std::int64_t h = 0; h < H; ++h)
                            std::memcpy(xpad.data() + (ci * Hp + h + padding) * Wp + padding,
                                        xd + ((n * Cin + ci) * H + h) * W,
                                        static_cast<std::size_t>(W) * sizeof(double));
                    xn = xpad.data();
                } else {
                    xn = xd + n * Cin * H * W;
                }
                if (need_dx) std::fill(dxpad.begin(), dxpad.end(), 0.0);
                std::vector<double>* dw_n = nullptr;
                std::vector<double>* db_n = nullptr;
                if (need_dw) {
                    dw_parts[static_cast<std::size_t>(n)].assign(wsize, 0.0);
                    dw_n = &dw_parts[static_cast<std::size_t>(n)];
                }
                if (need_db) {
                    db_parts[static_cast<std::size_t>(n)].assign(static_cast<std::size_t>(Cout), 0.0);
                    db_n = &db_parts[static_cast<std::size_t>(n)];
                }
                for (std::int64_t co = 0; co < Cout; ++co) {
                    for (std::int64_t ho = 0; ho < Ho; ++ho) {
                        for (std::int64_t wo = 0; wo < Wo; ++wo) {
                            const double g = go[((n * Cout + co) * Ho + ho) * Wo + wo];
                            if (g == 0.0) continue;
                            if (db_n) (*db_n)[static_cast<std::size_t>(co)] += g;
                            const std::int64_t hi0 = ho * stride, wi0 = wo * stride;
                            for (std::int64_t ci = 0; ci < Cin; ++ci) {
                                const double* xc = xn + ci * Hp * Wp;
                                double* dxc = need_dx ? dxpad.data() + ci * Hp * Wp : nullptr;
                                const double* wc = wd + ((co * Cin + ci) * KH) * KW;
                                double* dwc = dw_n ? dw_n->data() + ((co * Cin + ci) * KH) * KW : nullptr;
                                for (std::int64_t kh = 0; kh < KH; ++kh) {
                                    const std::int64_t row = (hi0 + kh) * Wp + wi0;
                                    for (std::int64_t kw = 0; kw < KW; ++kw) {
                                        if (dwc) dwc[kh * KW + kw] += g * xc[row + kw];
                                        if (dxc) dxc[row + kw] += g * wc[kh * KW + kw];
                                    }
                                }
                            }
                        }
                    }
                }
                if (need_dx) {
                    // Interior of the padded gradient maps back to this sample.
                    for (std::int64_t ci = 0; ci < Cin; ++ci)
                        for (std::int64_t h = 0; h < H; ++h) {
                            const double* src = dxpad.data() + (ci * Hp + h + padding) * Wp + padding;
                            double* dst = dx.data() + ((n * Cin + ci) * H + h) * W;
                            for (std::int64_t w = 0; w < W; ++w) dst[w] += src[w];
                        }
                }
            }
        });

        if (need_dx) xn_node->accumulate_grad(dx);
        if (need_dw) {
            std::vector<double> dw(wsize, 0.0);
            for (const auto& part : dw_parts)
                for (std::size_t i = 0; i < wsize; ++i) dw[i] += part[i];
            wn_node->accumulate_grad(dw);
        }
        if (need_db) {
            std::vector<double> db(static_cast<std::size_t>(Cout), 0.0);
            for (const auto& part : db_parts)
                for (std::size_t i = 0; i < db.size(); ++i) db[i] += part[i];
            bn_node->accumulate_grad(db);
        }
    });
    return out;
}

Tensor max_pool2d(const Tensor& input, std::int64_t kernel, std::int64_t stride) {
    if (input.rank() != 4) throw DimensionError("max_pool2d expects [B,C,H,W]");
    if (kernel <= 0 || stride <= 0) throw UsageError("max_pool2d: kernel and stride must be positive");
    const std::int64_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (H < kernel || W < kernel) throw DimensionError("max_pool2d: kernel larger than input");
    const std::int64_t Ho = (H - kernel) / stride + 1;
    const std::int64_t Wo = (W - kernel) / stride + 1;

    std::vector<double> out_v(static_cast<std::size_t>(B * C * Ho * Wo));
    auto argmax = std::make_shared<std::vector<std::int64_t>>(out_v.size());
    const double* xd = input.data().data();

    parallel_for(B * C, 1, [&](std::int64_t p0, std::int64_t p1) {
        for (std::int64_t p = p0; p < p1; ++p) {
            const double* plane = xd + p * H * W;
            for (std::int64_t ho = 0; ho < Ho; ++ho)
                for (std::int64_t wo = 0; wo < Wo; ++wo) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::int64_t best_idx = 0;
                    for (std::int64_t kh = 0; kh < kernel; ++kh)
                        for (std::int64_t kw = 0; kw < kernel; ++kw) {
                            const std::int64_t idx = (ho * stride + kh) * W + (wo * stride + kw);
                            if (plane[idx] > best) {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    const std::size_t o = static_cast<std::size_t>((p * Ho + ho) * Wo + wo);
                    out_v[o] = best;
                    (*argmax)[o] = p * H * W + best_idx;
                }
        }
    });

    Tensor out = make_out({B, C, Ho, Wo}, std::move(out_v), input.requires_grad());
    if (out.requires_grad()) {
        auto xn = input.node();
        attach(out, {xn}, [xn, argmax](Node& self) {
            std::vector<double> dx(xn->data.size(), 0.0);
            for (std::size_t o = 0; o < self.grad.size(); ++o)
                dx[static_cast<std::size_t>((*argmax)[o])] += self.grad[o];
            xn->accumulate_grad(dx);
        });
    }
    return out;
}

Tensor adaptive_avg_pool2d(const Tensor& input, std::int64_t out_h, std::int64_t out_w) {
    if (input.rank() != 4) throw DimensionError("adaptive_avg_pool2d expects [B,C,H,W]");
    const std::int64_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (out_h <= 0 || out_w <= 0) throw UsageError("adaptive_avg_pool2d: target size must be positive");
    if (out_h > H || out_w > W)
        throw DimensionError("adaptive_avg_pool2d: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                             " larger than input " + std::to_string(H) + "x" + std::to_string(W));

    auto bin_start = [](std::int64_t i, std::int64_t in, std::int64_t out) { return (i * in) / out; };
    auto bin_end = [](std::int64_t i, std::int64_t in, std::int64_t out) {
        return ((i + 1) * in + out - 1) / out;
    };

    std::vector<double> out_v(static_cast<std::size_t>(B * C * out_h * out_w));
    const double* xd = input.data().data();
    parallel_for(B * C, 1, [&](std::int64_t p0, std::int64_t p1) {
        for (std::int64_t p = p0; p < p1; ++p) {
            const double* plane = xd + p * H * W;
            for (std::int64_t oh = 0; oh < out_h; ++oh) {
                const std::int64_t h0 = bin_start(oh, H, out_h), h1 = bin_end(oh, H, out_h);
                for (std::int64_t ow = 0; ow < out_w; ++ow) {
                    const std::int64_t w0 = bin_start(ow, W, out_w), w1 = bin_end(ow, W, out_w);
                    double acc = 0.0;
                    for (std::int64_t h = h0; h < h1; ++h)
                        for (std::int64_t w = w0; w < w1; ++w) acc += plane[h * W + w];
                    out_v[static_cast<std::size_t>((p * out_h + oh) * out_w + ow)] =
                        acc / static_cast<double>((h1 - h0) * (w1 - w0));
                }
            }
        }
    });

    Tensor out = make_out({B, C, out_h, out_w}, std::move(out_v), input.requires_grad());
    if (out.requires_grad()) {
        auto xn = input.node();
        attach(out, {xn}, [xn, B, C, H, W, out_h, out_w, bin_start, bin_end](Node& self) {
            std::vector<double> dx(xn->data.size(), 0.0);
            for (std::int64_t p = 0; p < B * C; ++p) {
                double* plane = dx.data() + p * H * W;
                for (std::int64_t oh = 0; oh < out_h; ++oh) {
                    const std::int64_t h0 = bin_start(oh, H, out_h), h1 = bin_end(oh, H, out_h);
                    for (std::int64_t ow = 0; ow < out_w; ++ow) {
                        const std::int64_t w0 = bin_start(ow, W, out_w), w1 = bin_end(ow, W, out_w);
                        const double g = self.grad[static_cast<std::size_t>((p * out_h + oh) * out_w + ow)] /
                                         static_cast<double>((h1 - h0) * (w1 - w0));
                        for (std::int64_t h = h0; h < h1; ++h)
                            for (std::int64_t w = w0; w < w1; ++w) plane[h * W + w] += g;
                    }
                }
            }
            xn->accumulate_grad(dx);
        });
    }
    return out;
}

Tensor pool2d(const Tensor& input, PoolMode mode, const PoolParams& params) {
    switch (mode) {
        case PoolMode::max:
            return max_pool2d(input, params.kernel, params.stride);
        case PoolMode::avg_adaptive:
            return adaptive_avg_pool2d(input, params.out_h, params.out_w);
    }
    throw UsageError("pool2d: unknown mode");
}

Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (input.rank() != 2 || weight.rank() != 2)
        throw DimensionError("dense expects input [B,N] and weight [M,N]");
    const std::int64_t B = input.dim(0), N = input.dim(1), M = weight.dim(0);
    if (weight.dim(1) != N)
        throw DimensionError("dense: inner dims disagree, input " + shape_str(input.shape()) + " weight " +
                             shape_str(weight.shape()));
    if (bias.shape() != Shape{M}) throw DimensionError("dense: bias must be [M]");

    std::vector<double> out_v(static_cast<std::size_t>(B * M));
    const double* bd = bias.data().data();
    for (std::int64_t b = 0; b < B; ++b)
        std::memcpy(out_v.data() + b * M, bd, static_cast<std::size_t>(M) * sizeof(double));
    addmm_nt(out_v.data(), input.data().data(), weight.data().data(), B, N, M);

    Tensor out = make_out({B, M}, std::move(out_v), any_grad({&input, &weight, &bias}));
    if (!out.requires_grad()) return out;

    auto xn = input.node();
    auto wn = weight.node();
    auto bn = bias.node();
    attach(out, {xn, wn, bn}, [xn, wn, bn, B, N, M](Node& self) {
        const double* go = self.grad.data();
        if (xn->requires_grad) {
            std::vector<double> dx(xn->data.size(), 0.0);
            addmm_nn(dx.data(), go, wn->data.data(), B, M, N);
            xn->accumulate_grad(dx);
        }
        if (wn->requires_grad) {
            std::vector<double> dw(wn->data.size(), 0.0);
            addmm_tn(dw.data(), go, xn->data.data(), B, M, N);
            wn->accumulate_grad(dw);
        }
        if (bn->requires_grad) {
            std::vector<double> db(static_cast<std::size_t>(M), 0.0);
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t m = 0; m < M; ++m) db[static_cast<std::size_t>(m)] += go[b * M + m];
            bn->accumulate_grad(db);
        }
    });
    return out;
}

namespace {

Tensor elementwise(const Tensor& x, double (*fwd)(double), double (*dfd)(double, double)) {
    // dfd receives (input, output) and returns the local derivative.
    const auto n = static_cast<std::size_t>(x.size());
    std::vector<double> v(n);
    const auto xd = x.data();
    for (std::size_t i = 0; i < n; ++i) v[i] = fwd(xd[i]);
    Tensor out = make_out(x.shape(), std::move(v), x.requires_grad());
    if (out.requires_grad()) {
        auto xn = x.node();
        attach(out, {xn}, [xn, dfd](Node& self) {
            std::vector<double> g(self.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = dfd(xn->data[i], self.data[i]) * self.grad[i];
            xn->accumulate_grad(g);
        });
    }
    return out;
}

}  // namespace

Tensor relu(const Tensor& x) {
    return elementwise(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
    return elementwise(
        x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh_op(const Tensor& x) {
    return elementwise(
        x, [](double v) { return std::tanh(v); },
        [](double, double y) { return 1.0 - y * y; });
}

Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() < 1) throw DimensionError("softmax_lastdim expects rank >= 1");
    const std::int64_t K = x.dim(x.rank() - 1);
    const std::int64_t R = x.size() / K;
    std::vector<double> v(static_cast<std::size_t>(x.size()));
    const double* xd = x.data().data();
    for (std::int64_t r = 0; r < R; ++r) {
        const double* row = xd + r * K;
        double* orow = v.data() + r * K;
        double mx = row[0];
        for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double denom = 0.0;
        for (std::int64_t k = 0; k < K; ++k) {
            orow[k] = std::exp(row[k] - mx);
            denom += orow[k];
        }
        for (std::int64_t k = 0; k < K; ++k) orow[k] /= denom;
    }
    Tensor out = make_out(x.shape(), std::move(v), x.requires_grad());
    if (out.requires_grad()) {
        auto xn = x.node();
        attach(out, {xn}, [xn, R, K](Node& self) {
            std::vector<double> g(self.grad.size());
            for (std::int64_t r = 0; r < R; ++r) {
                const double* y = self.data.data() + r * K;
                const double* dy = self.grad.data() + r * K;
                double dot = 0.0;
                for (std::int64_t k = 0; k < K; ++k) dot += y[k] * dy[k];
                for (std::int64_t k = 0; k < K; ++k) g[static_cast<std::size_t>(r * K + k)] = y[k] * (dy[k] - dot);
            }
            xn->accumulate_grad(g);
        });
    }
    return out;
}

Tensor activate(const Tensor& x, Activation kind) {
    switch (kind) {
        case Activation::relu:
            return relu(x);
        case Activation::softmax_lastdim:
            return softmax_lastdim(x);
        case Activation::sigmoid:
            return sigmoid(x);
        case Activation::tanh:
            return tanh_op(x);
    }
    throw UsageError("activate: unknown kind");
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng, bool training) {
    if (p < 0.0 || p >= 1.0) throw UsageError("dropout: p must be in [0,1)");
    if (!training || p == 0.0) {
        Tensor out = make_out(x.shape(), {x.data().begin(), x.data().end()}, x.requires_grad());
        if (out.requires_grad()) {
            auto xn = x.node();
            attach(out, {xn}, [xn](Node& self) { xn->accumulate_grad(self.grad); });
        }
        return out;
    }
    const double keep = 1.0 - p;
    const double inv_keep = 1.0 / keep;
    auto mask = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.size()));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> v(static_cast<std::size_t>(x.size()));
    const auto xd = x.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double m = unif(rng) < keep ? inv_keep : 0.0;
        (*mask)[i] = m;
        v[i] = xd[i] * m;
    }
    Tensor out = make_out(x.shape(), std::move(v), x.requires_grad());
    if (out.requires_grad()) {
        auto xn = x.node();
        attach(out, {xn}, [xn, mask](Node& self) {
            std::vector<double> g(self.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = (*mask)[i] * self.grad[i];
            xn->accumulate_grad(g);
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets) {
    if (logits.rank() != 2) throw DimensionError("cross_entropy expects logits [B,K]");
    const std::int64_t B = logits.dim(0), K = logits.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != B)
        throw DimensionError("cross_entropy: got " + std::to_string(targets.size()) + " targets for batch " +
                             std::to_string(B));
    for (std::int64_t t : targets)
        if (t < 0 || t >= K) throw IndexError("cross_entropy: target " + std::to_string(t) + " out of [0," +
                                              std::to_string(K) + ")");

    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B * K));
    const double* xd = logits.data().data();
    double loss = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
        const double* row = xd + b * K;
        double mx = row[0];
        for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double denom = 0.0;
        for (std::int64_t k = 0; k < K; ++k) denom += std::exp(row[k] - mx);
        const double logz = mx + std::log(denom);
        loss -= row[targets[static_cast<std::size_t>(b)]] - logz;
        for (std::int64_t k = 0; k < K; ++k)
            (*probs)[static_cast<std::size_t>(b * K + k)] = std::exp(row[k] - logz);
    }
    loss /= static_cast<double>(B);

    Tensor out = make_out({1}, {loss}, logits.requires_grad());
    if (out.requires_grad()) {
        auto xn = logits.node();
        auto tgt = std::make_shared<std::vector<std::int64_t>>(targets);
        attach(out, {xn}, [xn, probs, tgt, B, K](Node& self) {
            const double go = self.grad[0] / static_cast<double>(B);
            std::vector<double> g(probs->size());
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t k = 0; k < K; ++k) {
                    const std::size_t i = static_cast<std::size_t>(b * K + k);
                    g[i] = ((*probs)[i] - (k == (*tgt)[static_cast<std::size_t>(b)] ? 1.0 : 0.0)) * go;
                }
            xn->accumulate_grad(g);
        });
    }
    return out;
}

Tensor mse_loss(const Tensor& pred, const Tensor& target, Reduction reduction) {
    require_same_shape(pred, target, "mse_loss");
    const auto n = static_cast<std::size_t>(pred.size());
    const auto pd = pred.data();
    const auto td = target.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = pd[i] - td[i];
        acc += d * d;
    }
    const double scale = reduction == Reduction::mean ? 1.0 / static_cast<double>(n) : 1.0;
    Tensor out = make_out({1}, {acc * scale}, any_grad({&pred, &target}));
    if (out.requires_grad()) {
        auto pn = pred.node();
        auto tn = target.node();
        attach(out, {pn, tn}, [pn, tn, scale](Node& self) {
            const double go = 2.0 * scale * self.grad[0];
            if (pn->requires_grad) {
                std::vector<double> g(pn->data.size());
                for (std::size_t i = 0; i < g.size(); ++i) g[i] = go * (pn->data[i] - tn->data[i]);
                pn->accumulate_grad(g);
            }
            if (tn->requires_grad) {
                std::vector<double> g(tn->data.size());
                for (std::size_t i = 0; i < g.size(); ++i) g[i] = -go * (pn->data[i] - tn->data[i]);
                tn->accumulate_grad(g);
            }
        });
    }
    return out;
}

namespace {

struct LstmCache {
    std::int64_t B = 0, N = 0, H = 0;
    std::vector<double> gi, gf, gg, go;  // post-activation gates, [B,H] each
};

// Accumulates the input-side gradients shared by the two cell outputs:
// given d(pre-activation) of one gate slice, pushes grads into x, h and the
// corresponding parameter slices.
void lstm_gate_backprop(const std::shared_ptr<Node>& xn, const std::shared_ptr<Node>& hn,
                        const std::shared_ptr<Node>& wxn, const std::shared_ptr<Node>& whn,
                        const std::shared_ptr<Node>& bn, std::int64_t gate, const std::vector<double>& da,
                        std::int64_t B, std::int64_t N, std::int64_t H, std::vector<double>* dx,
                        std::vector<double>* dh) {
    const double* wx = wxn->data.data() + gate * H * N;
    const double* wh = whn->data.data() + gate * H * H;
    if (dx) addmm_nn(dx->data(), da.data(), wx, B, H, N);
    if (dh) addmm_nn(dh->data(), da.data(), wh, B, H, H);
    if (wxn->requires_grad) {
        std::vector<double> dwx(static_cast<std::size_t>(H * N), 0.0);
        addmm_tn(dwx.data(), da.data(), xn->data.data(), B, H, N);
        std::vector<double> full(wxn->data.size(), 0.0);
        std::copy(dwx.begin(), dwx.end(), full.begin() + gate * H * N);
        wxn->accumulate_grad(full);
    }
    if (whn->requires_grad) {
        std::vector<double> dwh(static_cast<std::size_t>(H * H), 0.0);
        addmm_tn(dwh.data(), da.data(), hn->data.data(), B, H, H);
        std::vector<double> full(whn->data.size(), 0.0);
        std::copy(dwh.begin(), dwh.end(), full.begin() + gate * H * H);
        whn->accumulate_grad(full);
    }
    if (bn->requires_grad) {
        std::vector<double> db(bn->data.size(), 0.0);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t j = 0; j < H; ++j) db[static_cast<std::size_t>(gate * H + j)] += da[b * H + j];
        bn->accumulate_grad(db);
    }
}

}  // namespace

std::pair<Tensor, Tensor> lstm_cell(const Tensor& x, const Tensor& h, const Tensor& c,
                                    const LstmCellParams& params) {
    if (x.rank() != 2 || h.rank() != 2 || c.rank() != 2)
        throw DimensionError("lstm_cell expects x [B,N], h [B,H], c [B,H]");
    const std::int64_t B = x.dim(0), N = x.dim(1), H = h.dim(1);
    if (h.dim(0) != B || c.dim(0) != B || c.dim(1) != H)
        throw DimensionError("lstm_cell: inconsistent batch/hidden dims");
    if (params.w_input.shape() != Shape{4 * H, N})
        throw DimensionError("lstm_cell: w_input must be [4H,N], got " + shape_str(params.w_input.shape()));
    if (params.w_hidden.shape() != Shape{4 * H, H})
        throw DimensionError("lstm_cell: w_hidden must be [4H,H]");
    if (params.bias.shape() != Shape{4 * H}) throw DimensionError("lstm_cell: bias must be [4H]");

    // Pre-activations a = x.Wx^T + h.Wh^T + b, gate slices [i,f,g,o].
    std::vector<double> a(static_cast<std::size_t>(B * 4 * H));
    const double* bd = params.bias.data().data();
    for (std::int64_t b = 0; b < B; ++b)
        std::memcpy(a.data() + b * 4 * H, bd, static_cast<std::size_t>(4 * H) * sizeof(double));
    addmm_nt(a.data(), x.data().data(), params.w_input.data().data(), B, N, 4 * H);
    addmm_nt(a.data(), h.data().data(), params.w_hidden.data().data(), B, H, 4 * H);

    auto cache = std::make_shared<LstmCache>();
    cache->B = B;
    cache->N = N;
    cache->H = H;
    cache->gi.resize(static_cast<std::size_t>(B * H));
    cache->gf.resize(static_cast<std::size_t>(B * H));
    cache->gg.resize(static_cast<std::size_t>(B * H));
    cache->go.resize(static_cast<std::size_t>(B * H));

    std::vector<double> c_new(static_cast<std::size_t>(B * H));
    std::vector<double> h_new(static_cast<std::size_t>(B * H));
    const double* cd = c.data().data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t j = 0; j < H; ++j) {
            const std::size_t i = static_cast<std::size_t>(b * H + j);
            const double* row = a.data() + b * 4 * H;
            const double gi = 1.0 / (1.0 + std::exp(-row[0 * H + j]));
            const double gf = 1.0 / (1.0 + std::exp(-row[1 * H + j]));
            const double gg = std::tanh(row[2 * H + j]);
            const double go = 1.0 / (1.0 + std::exp(-row[3 * H + j]));
            cache->gi[i] = gi;
            cache->gf[i] = gf;
            cache->gg[i] = gg;
            cache->go[i] = go;
            c_new[i] = gf * cd[i] + gi * gg;
            h_new[i] = go * std::tanh(c_new[i]);
        }

    const bool req = any_grad({&x, &h, &c, &params.w_input, &params.w_hidden, &params.bias});
    Tensor c_out = make_out({B, H}, std::move(c_new), req);
    Tensor h_out = make_out({B, H}, std::move(h_new), req);
    if (!req) return {h_out, c_out};

    auto xn = x.node();
    auto hn = h.node();
    auto cn = c.node();
    auto wxn = params.w_input.node();
    auto whn = params.w_hidden.node();
    auto bn = params.bias.node();

    // c' = f*c + i*g (gates depend on x, h, params).
    attach(c_out, {xn, hn, cn, wxn, whn, bn}, [xn, hn, cn, wxn, whn, bn, cache](Node& self) {
        const std::int64_t B = cache->B, N = cache->N, H = cache->H;
        const double* dc = self.grad.data();
        if (cn->requires_grad) {
            std::vector<double> g(static_cast<std::size_t>(B * H));
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = dc[i] * cache->gf[i];
            cn->accumulate_grad(g);
        }
        std::vector<double> dx(xn->requires_grad ? static_cast<std::size_t>(B * N) : 0, 0.0);
        std::vector<double> dh(hn->requires_grad ? static_cast<std::size_t>(B * H) : 0, 0.0);
        std::vector<double> da(static_cast<std::size_t>(B * H));
        // input gate
        for (std::size_t i = 0; i < da.size(); ++i)
            da[i] = dc[i] * cache->gg[i] * cache->gi[i] * (1.0 - cache->gi[i]);
        lstm_gate_backprop(xn, hn, wxn, whn, bn, 0, da, B, N, H, xn->requires_grad ? &dx : nullptr,
                           hn->requires_grad ? &dh : nullptr);
        // forget gate
        for (std::size_t i = 0; i < da.size(); ++i)
            da[i] = dc[i] * cn->data[i] * cache->gf[i] * (1.0 - cache->gf[i]);
        lstm_gate_backprop(xn, hn, wxn, whn, bn, 1, da, B, N, H, xn->requires_grad ? &dx : nullptr,
                           hn->requires_grad ? &dh : nullptr);
        // cell candidate
        for (std::size_t i = 0; i < da.size(); ++i)
            da[i] = dc[i] * cache->gi[i] * (1.0 - cache->gg[i] * cache->gg[i]);
        lstm_gate_backprop(xn, hn, wxn, whn, bn, 2, da, B, N, H, xn->requires_grad ? &dx : nullptr,
                           hn->requires_grad ? &dh : nullptr);
        if (xn->requires_grad) xn->accumulate_grad(dx);
        if (hn->requires_grad) hn->accumulate_grad(dh);
    });

    // h' = o * tanh(c'); c_out is a parent so its grad collects this term
    // before its own backward runs.
    auto c_node = c_out.node();
    attach(h_out, {xn, hn, wxn, whn, bn, c_node}, [xn, hn, wxn, whn, bn, c_node, cache](Node& self) {
        const std::int64_t B = cache->B, N = cache->N, H = cache->H;
        const double* dhh = self.grad.data();
        std::vector<double> tanh_c(static_cast<std::size_t>(B * H));
        for (std::size_t i = 0; i < tanh_c.size(); ++i) tanh_c[i] = std::tanh(c_node->data[i]);
        if (c_node->requires_grad) {
            std::vector<double> g(static_cast<std::size_t>(B * H));
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] = dhh[i] * cache->go[i] * (1.0 - tanh_c[i] * tanh_c[i]);
            c_node->accumulate_grad(g);
        }
        std::vector<double> dx(xn->requires_grad ? static_cast<std::size_t>(B * N) : 0, 0.0);
        std::vector<double> dh(hn->requires_grad ? static_cast<std::size_t>(B * H) : 0, 0.0);
        std::vector<double> da(static_cast<std::size_t>(B * H));
        for (std::size_t i = 0; i < da.size(); ++i)
            da[i] = dhh[i] * tanh_c[i] * cache->go[i] * (1.0 - cache->go[i]);
        lstm_gate_backprop(xn, hn, wxn, whn, bn, 3, da, B, N, H, xn->requires_grad ? &dx : nullptr,
                           hn->requires_grad ? &dh : nullptr);
        if (xn->requires_grad) xn->accumulate_grad(dx);
        if (hn->requires_grad) hn->accumulate_grad(dh);
    });

    return {h_out, c_out};
}

}  // namespace dp
