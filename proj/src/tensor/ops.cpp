#include "psep/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace psep::ops {

namespace {

void require_rank(const Var& x, std::size_t rank, const char* op) {
    if (x.shape().size() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + " operand, got " +
                         to_string(x.shape()));
    }
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

// For same-rank broadcasting: maps every output element to its source offsets.
struct Broadcast {
    Shape out;
    std::vector<std::size_t> xi, yi;
};

Broadcast plan_broadcast(const Shape& xs, const Shape& ys, const char* op) {
    Broadcast b;
    const std::size_t xn = numel(xs), yn = numel(ys);
    if (xs.size() != ys.size()) {
        if (yn == 1) {
            b.out = xs;
        } else if (xn == 1) {
            b.out = ys;
        } else {
            mismatch(op, xs, ys);
        }
        const std::size_t n = numel(b.out);
        b.xi.resize(n);
        b.yi.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            b.xi[i] = xn == 1 ? 0 : i;
            b.yi[i] = yn == 1 ? 0 : i;
        }
        return b;
    }
    const std::size_t rank = xs.size();
    b.out.resize(rank);
    for (std::size_t a = 0; a < rank; ++a) {
        if (xs[a] == ys[a] || ys[a] == 1) {
            b.out[a] = xs[a];
        } else if (xs[a] == 1) {
            b.out[a] = ys[a];
        } else {
            mismatch(op, xs, ys);
        }
    }
    std::vector<std::size_t> xstride(rank), ystride(rank);
    std::size_t sx = 1, sy = 1;
    for (std::size_t a = rank; a-- > 0;) {
        xstride[a] = xs[a] == 1 ? 0 : sx;
        ystride[a] = ys[a] == 1 ? 0 : sy;
        sx *= xs[a];
        sy *= ys[a];
    }
    const std::size_t n = numel(b.out);
    b.xi.resize(n);
    b.yi.resize(n);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ox = 0, oy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        b.xi[i] = ox;
        b.yi[i] = oy;
        for (std::size_t a = rank; a-- > 0;) {
            ++idx[a];
            ox += xstride[a];
            oy += ystride[a];
            if (idx[a] < b.out[a]) break;
            ox -= xstride[a] * idx[a];
            oy -= ystride[a] * idx[a];
            idx[a] = 0;
        }
    }
    return b;
}

struct ConvGeometry {
    std::size_t batch, in_h, in_w, in_c, k_h, k_w, out_c, out_h, out_w, stride, pad;
};

ConvGeometry conv_geometry(const Shape& xs, const Shape& ks, std::size_t stride, std::size_t pad) {
    if (xs.size() != 4 || ks.size() != 4) mismatch("conv2d", xs, ks);
    if (xs[3] != ks[2]) mismatch("conv2d", xs, ks);
    if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
    ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ks[0], ks[1], ks[3], 0, 0, stride, pad};
    if (xs[1] + 2 * pad < ks[0] || xs[2] + 2 * pad < ks[1]) mismatch("conv2d", xs, ks);
    g.out_h = (xs[1] + 2 * pad - ks[0]) / stride + 1;
    g.out_w = (xs[2] + 2 * pad - ks[1]) / stride + 1;
    return g;
}

}  // namespace

Var conv2d(Var x, Var kernel, std::size_t stride, std::size_t pad) {
    const ConvGeometry g = conv_geometry(x.shape(), kernel.shape(), stride, pad);
    Tensor out(Shape{g.batch, g.out_h, g.out_w, g.out_c});
    const double* __restrict in = x.value().data().data();
    const double* __restrict k = kernel.value().data().data();
    double* __restrict o = out.data().data();
    const long ih = static_cast<long>(g.in_h), iw = static_cast<long>(g.in_w);
    for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                double* __restrict orow = o + ((b * g.out_h + oy) * g.out_w + ox) * g.out_c;
                for (std::size_t ky = 0; ky < g.k_h; ++ky) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= ih) continue;
                    for (std::size_t kx = 0; kx < g.k_w; ++kx) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        if (ix < 0 || ix >= iw) continue;
                        const double* __restrict xin =
                            in + ((b * g.in_h + static_cast<std::size_t>(iy)) * g.in_w + static_cast<std::size_t>(ix)) * g.in_c;
                        const double* __restrict kk = k + (ky * g.k_w + kx) * g.in_c * g.out_c;
                        for (std::size_t ci = 0; ci < g.in_c; ++ci) {
                            const double v = xin[ci];
                            if (v == 0.0) continue;
                            const double* __restrict kr = kk + ci * g.out_c;
                            for (std::size_t co = 0; co < g.out_c; ++co) orow[co] += v * kr[co];
                        }
                    }
                }
            }
        }
    }
    return x.graph().record("conv2d", std::move(out), {x, kernel}, [g](Graph& gr, std::size_t self) {
        const std::size_t xid = gr.input(self, 0), kid = gr.input(self, 1);
        const double* __restrict go = gr.grad_slot(self).data().data();
        const double* __restrict in = gr.value(xid).data().data();
        const double* __restrict k = gr.value(kid).data().data();
        const long ih = static_cast<long>(g.in_h), iw = static_cast<long>(g.in_w);
        if (gr.needs_grad(xid)) {
            // transposed kernel [kh,kw,co,ci] keeps the inner loop contiguous
            std::vector<double> kt(g.k_h * g.k_w * g.in_c * g.out_c);
            for (std::size_t s = 0; s < g.k_h * g.k_w; ++s)
                for (std::size_t ci = 0; ci < g.in_c; ++ci)
                    for (std::size_t co = 0; co < g.out_c; ++co)
                        kt[(s * g.out_c + co) * g.in_c + ci] = k[(s * g.in_c + ci) * g.out_c + co];
            double* __restrict gi = gr.grad_slot(xid).data().data();
            for (std::size_t b = 0; b < g.batch; ++b)
                for (std::size_t oy = 0; oy < g.out_h; ++oy)
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const double* __restrict grow = go + ((b * g.out_h + oy) * g.out_w + ox) * g.out_c;
                        for (std::size_t ky = 0; ky < g.k_h; ++ky) {
                            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                            if (iy < 0 || iy >= ih) continue;
                            for (std::size_t kx = 0; kx < g.k_w; ++kx) {
                                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                                if (ix < 0 || ix >= iw) continue;
                                double* __restrict gin = gi + ((b * g.in_h + static_cast<std::size_t>(iy)) * g.in_w +
                                                               static_cast<std::size_t>(ix)) * g.in_c;
                                const double* __restrict kk = kt.data() + (ky * g.k_w + kx) * g.out_c * g.in_c;
                                for (std::size_t co = 0; co < g.out_c; ++co) {
                                    const double gv = grow[co];
                                    if (gv == 0.0) continue;
                                    const double* __restrict kr = kk + co * g.in_c;
                                    for (std::size_t ci = 0; ci < g.in_c; ++ci) gin[ci] += gv * kr[ci];
                                }
                            }
                        }
                    }
        }
        if (gr.needs_grad(kid)) {
            double* __restrict gk = gr.grad_slot(kid).data().data();
            for (std::size_t b = 0; b < g.batch; ++b)
                for (std::size_t oy = 0; oy < g.out_h; ++oy)
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const double* __restrict grow = go + ((b * g.out_h + oy) * g.out_w + ox) * g.out_c;
                        for (std::size_t ky = 0; ky < g.k_h; ++ky) {
                            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                            if (iy < 0 || iy >= ih) continue;
                            for (std::size_t kx = 0; kx < g.k_w; ++kx) {
                                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                                if (ix < 0 || ix >= iw) continue;
                                const double* __restrict xin = in + ((b * g.in_h + static_cast<std::size_t>(iy)) * g.in_w +
                                                                     static_cast<std::size_t>(ix)) * g.in_c;
                                double* __restrict gkk = gk + (ky * g.k_w + kx) * g.in_c * g.out_c;
                                for (std::size_t ci = 0; ci < g.in_c; ++ci) {
                                    const double v = xin[ci];
                                    if (v == 0.0) continue;
                                    double* __restrict gkr = gkk + ci * g.out_c;
                                    for (std::size_t co = 0; co < g.out_c; ++co) gkr[co] += v * grow[co];
                                }
                            }
                        }
                    }
        }
    });
}

Var bias_add(Var x, Var bias) {
    const Shape& xs = x.shape();
    if (xs.empty() || bias.shape().size() != 1 || bias.shape()[0] != xs.back()) mismatch("bias_add", xs, bias.shape());
    const std::size_t c = xs.back(), rows = x.value().size() / c;
    Tensor out = x.value();
    const auto bv = bias.value().data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] += bv[j];
    return x.graph().record("bias_add", std::move(out), {x, bias}, [c, rows](Graph& gr, std::size_t self) {
        const Tensor& g = gr.grad_slot(self);
        const std::size_t xid = gr.input(self, 0), bid = gr.input(self, 1);
        if (gr.needs_grad(xid)) {
            Tensor& gx = gr.grad_slot(xid);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (gr.needs_grad(bid)) {
            Tensor& gb = gr.grad_slot(bid);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
        }
    });
}

Var relu(Var x) {
    Tensor out = x.value();
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return x.graph().record("relu", std::move(out), {x}, [](Graph& gr, std::size_t self) {
        const std::size_t xid = gr.input(self, 0);
        const Tensor& g = gr.grad_slot(self);
        const Tensor& xv = gr.value(xid);
        Tensor& gx = gr.grad_slot(xid);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xv[i] > 0.0) gx[i] += g[i];
    });
}

Var sigmoid(Var x) {
    Tensor out = x.value();
    for (double& v : out.data()) v = 1.0 / (1.0 + std::exp(-v));
    return x.graph().record("sigmoid", std::move(out), {x}, [](Graph& gr, std::size_t self) {
        const std::size_t xid = gr.input(self, 0);
        const Tensor& g = gr.grad_slot(self);
        const Tensor& y = gr.value(self);
        Tensor& gx = gr.grad_slot(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

Var add(Var x, Var y) {
    if (x.shape() == y.shape()) {
        Tensor out = x.value();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += y.value()[i];
        return x.graph().record("add", std::move(out), {x, y}, [](Graph& gr, std::size_t self) {
            const Tensor& g = gr.grad_slot(self);
            for (std::size_t k = 0; k < 2; ++k) {
                const std::size_t id = gr.input(self, k);
                if (!gr.needs_grad(id)) continue;
                Tensor& gi = gr.grad_slot(id);
                for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
            }
        });
    }
    Broadcast b = plan_broadcast(x.shape(), y.shape(), "add");
    Tensor out(b.out);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[b.xi[i]] + y.value()[b.yi[i]];
    return x.graph().record("add", std::move(out), {x, y}, [b = std::move(b)](Graph& gr, std::size_t self) {
        const Tensor& g = gr.grad_slot(self);
        const std::size_t xid = gr.input(self, 0), yid = gr.input(self, 1);
        if (gr.needs_grad(xid)) {
            Tensor& gx = gr.grad_slot(xid);
            for (std::size_t i = 0; i < g.size(); ++i) gx[b.xi[i]] += g[i];
        }
        if (gr.needs_grad(yid)) {
            Tensor& gy = gr.grad_slot(yid);
            for (std::size_t i = 0; i < g.size(); ++i) gy[b.yi[i]] += g[i];
        }
    });
}

Var mul(Var x, Var y) {
    if (x.shape() == y.shape()) {
        Tensor out = x.value();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y.value()[i];
        return x.graph().record("mul", std::move(out), {x, y}, [](Graph& gr, std::size_t self) {
            const Tensor& g = gr.grad_slot(self);
            const std::size_t xid = gr.input(self, 0), yid = gr.input(self, 1);
            if (gr.needs_grad(xid)) {
                Tensor& gx = gr.grad_slot(xid);
                const Tensor& yv = gr.value(yid);
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i];
            }
            if (gr.needs_grad(yid)) {
                Tensor& gy = gr.grad_slot(yid);
                const Tensor& xv = gr.value(xid);
                for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i] * xv[i];
            }
        });
    }
    Broadcast b = plan_broadcast(x.shape(), y.shape(), "mul");
    Tensor out(b.out);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[b.xi[i]] * y.value()[b.yi[i]];
    return x.graph().record("mul", std::move(out), {x, y}, [b = std::move(b)](Graph& gr, std::size_t self) {
        const Tensor& g = gr.grad_slot(self);
        const std::size_t xid = gr.input(self, 0), yid = gr.input(self, 1);
        const Tensor& xv = gr.value(xid);
        const Tensor& yv = gr.value(yid);
        if (gr.needs_grad(xid)) {
            Tensor& gx = gr.grad_slot(xid);
            for (std::size_t i = 0; i < g.size(); ++i) gx[b.xi[i]] += g[i] * yv[b.yi[i]];
        }
        if (gr.needs_grad(yid)) {
            Tensor& gy = gr.grad_slot(yid);
            for (std::size_t i = 0; i < g.size(); ++i) gy[b.yi[i]] += g[i] * xv[b.xi[i]];
        }
    });
}

Var scale(Var x, double c) {
    Tensor out = x.value();
    for (double& v : out.data()) v *= c;
    return x.graph().record("scale", std::move(out), {x}, [c](Graph& gr, std::size_t self) {
        const Tensor& g = gr.grad_slot(self);
        Tensor& gx = gr.grad_slot(gr.input(self, 0));
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
    });
}

Var detach(Var x) { return x.graph().constant(x.value()); }

Var sum(Var x) {
    double s = 0.0;
    for (double v : x.value().data()) s += v;
    return x.graph().record("sum", Tensor::scalar(s), {x}, [](Graph& gr, std::size_t self) {
        const double g = gr.grad_slot(self)[0];
        Tensor& gx = gr.grad_slot(gr.input(self, 0));
        for (double& v : gx.data()) v += g;
    });
}

Var batch_sum(Var x) {
    const Shape& xs = x.shape();
    if (xs.empty()) throw ShapeError("batch_sum: scalar operand");
    Shape os = xs;
    os[0] = 1;
    const std::size_t inner = numel(os), batch = xs[0];
    Tensor out(os);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < inner; ++i) out[i] += x.value()[b * inner + i];
    return x.graph().record("batch_sum", std::move(out), {x}, [inner, batch](Graph& gr, std::size_t self) {
        const Tensor& g = gr.grad_slot(self);
        Tensor& gx = gr.grad_slot(gr.input(self, 0));
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < inner; ++i) gx[b * inner + i] += g[i];
    });
}

Var spatial_avg_pool(Var x) {
    require_rank(x, 4, "spatial_avg_pool");
    const Shape& s = x.shape();
    const std::size_t batch = s[0], n = s[1] * s[2], c = s[3];
    Tensor out(Shape{batch, c});
    const auto xv = x.value().data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t j = 0; j < c; ++j) out[b * c + j] += xv[(b * n + t) * c + j];
        for (std::size_t j = 0; j < c; ++j) out[b * c + j] /= static_cast<double>(n);
    }
    return x.graph().record("spatial_avg_pool", std::move(out), {x}, [batch, n, c](Graph& gr, std::size_t self) {
        const Tensor& g = gr.grad_slot(self);
        Tensor& gx = gr.grad_slot(gr.input(self, 0));
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < n; ++t)
                for (std::size_t j = 0; j < c; ++j) gx[(b * n + t) * c + j] += g[b * c + j] * inv;
    });
}

Var spatial_max_pool(Var x) {
    require_rank(x, 4, "spatial_max_pool");
    const Shape& s = x.shape();
    const std::size_t batch = s[0], n = s[1] * s[2], c = s[3];
    if (n == 0) throw ShapeError("spatial_max_pool: empty spatial extent " + to_string(s));
    Tensor out(Shape{batch, c});
    std::vector<std::size_t> arg(batch * c);
    const auto xv = x.value().data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < c; ++j) {
            std::size_t best = 0;
            double bv = xv[(b * n) * c + j];
            for (std::size_t t = 1; t < n; ++t) {
                const double v = xv[(b * n + t) * c + j];
                if (v > bv) {
                    bv = v;
                    best = t;
                }
            }
            out[b * c + j] = bv;
            arg[b * c + j] = (b * n + best) * c + j;
        }
    return x.graph().record("spatial_max_pool", std::move(out), {x}, [arg = std::move(arg)](Graph& gr, std::size_t self) {
        const Tensor& g = gr.grad_slot(self);
        Tensor& gx = gr.grad_slot(gr.input(self, 0));
        for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += g[i];
    });
}

Var channel_max(Var x) {
    require_rank(x, 4, "channel_max");
    const Shape& s = x.shape();
    const std::size_t rows = s[0] * s[1] * s[2], c = s[3];
    if (c == 0) throw ShapeError("channel_max: no channels in " + to_string(s));
    Tensor out(Shape{s[0], s[1], s[2], 1});
    std::vector<std::size_t> arg(rows);
    const auto xv = x.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (xv[r * c + j] > xv[r * c + best]) best = j;
        out[r] = xv[r * c + best];
        arg[r] = r * c + best;
    }
    return x.graph().record("channel_max", std::move(out), {x}, [arg = std::move(arg)](Graph& gr, std::size_t self) {
        const Tensor& g = gr.grad_slot(self);
        Tensor& gx = gr.grad_slot(gr.input(self, 0));
        for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += g[i];
    });
}

Var max_normalize(Var x, double eps) {
    const Shape& s = x.shape();
    if (s.empty() || s[0] == 0) throw ShapeError("max_normalize: operand " + to_string(s));
    if (!(eps > 0.0)) throw std::invalid_argument("max_normalize: eps must be positive");
    const std::size_t batch = s[0], inner = x.value().size() / batch;
    Tensor out(s);
    std::vector<std::size_t> arg(batch);
    std::vector<double> denom(batch);
    const auto xv = x.value().data();
    for (std::size_t b = 0; b < batch; ++b) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < inner; ++i)
            if (xv[b * inner + i] > xv[b * inner + best]) best = i;
        arg[b] = best;
        denom[b] = xv[b * inner + best] + eps;
        for (std::size_t i = 0; i < inner; ++i) out[b * inner + i] = xv[b * inner + i] / denom[b];
    }
    return x.graph().record("max_normalize", std::move(out), {x},
                            [batch, inner, arg = std::move(arg), denom = std::move(denom)](Graph& gr, std::size_t self) {
                                const Tensor& g = gr.grad_slot(self);
                                const std::size_t xid = gr.input(self, 0);
                                const Tensor& xv = gr.value(xid);
                                Tensor& gx = gr.grad_slot(xid);
                                for (std::size_t b = 0; b < batch; ++b) {
                                    double dot = 0.0;
                                    for (std::size_t i = 0; i < inner; ++i) {
                                        gx[b * inner + i] += g[b * inner + i] / denom[b];
                                        dot += g[b * inner + i] * xv[b * inner + i];
                                    }
                                    gx[b * inner + arg[b]] -= dot / (denom[b] * denom[b]);
                                }
                            });
}

Var linear(Var x, Var weight) {
    require_rank(x, 2, "linear");
    require_rank(weight, 2, "linear");
    const std::size_t batch = x.shape()[0], m = x.shape()[1], k = weight.shape()[0];
    if (weight.shape()[1] != m) mismatch("linear", x.shape(), weight.shape());
    Tensor out(Shape{batch, k});
    const auto xv = x.value().data();
    const auto wv = weight.value().data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t r = 0; r < k; ++r) {
            double acc = 0.0;
            for (std::size_t j = 0; j < m; ++j) acc += wv[r * m + j] * xv[b * m + j];
            out[b * k + r] = acc;
        }
    return x.graph().record("linear", std::move(out), {x, weight}, [batch, m, k](Graph& gr, std::size_t self) {
        const Tensor& g = gr.grad_slot(self);
        const std::size_t xid = gr.input(self, 0), wid = gr.input(self, 1);
        const Tensor& xv = gr.value(xid);
        const Tensor& wv = gr.value(wid);
        if (gr.needs_grad(xid)) {
            Tensor& gx = gr.grad_slot(xid);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t r = 0; r < k; ++r)
                    for (std::size_t j = 0; j < m; ++j) gx[b * m + j] += g[b * k + r] * wv[r * m + j];
        }
        if (gr.needs_grad(wid)) {
            Tensor& gw = gr.grad_slot(wid);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t r = 0; r < k; ++r)
                    for (std::size_t j = 0; j < m; ++j) gw[r * m + j] += g[b * k + r] * xv[b * m + j];
        }
    });
}

Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
    require_rank(logits, 2, "softmax_cross_entropy");
    const std::size_t batch = logits.shape()[0], k = logits.shape()[1];
    if (labels.size() != batch) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         to_string(logits.shape()));
    }
    Tensor probs(logits.shape());
    double loss = 0.0;
    const auto lv = logits.value().data();
    for (std::size_t b = 0; b < batch; ++b) {
        if (labels[b] >= k) throw std::invalid_argument("softmax_cross_entropy: label out of range");
        double mx = lv[b * k];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, lv[b * k + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            probs[b * k + j] = std::exp(lv[b * k + j] - mx);
            z += probs[b * k + j];
        }
        for (std::size_t j = 0; j < k; ++j) probs[b * k + j] /= z;
        loss += -(lv[b * k + labels[b]] - mx - std::log(z));
    }
    loss /= static_cast<double>(batch);
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    return logits.graph().record(
        "softmax_cross_entropy", Tensor::scalar(loss), {logits},
        [probs = std::move(probs), lab = std::move(lab), batch, k](Graph& gr, std::size_t self) {
            const double g = gr.grad_slot(self)[0] / static_cast<double>(batch);
            Tensor& gl = gr.grad_slot(gr.input(self, 0));
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t j = 0; j < k; ++j)
                    gl[b * k + j] += g * (probs[b * k + j] - (j == lab[b] ? 1.0 : 0.0));
        });
}

Var sq_l2_distance_maps(Var z, Var prototypes) {
    require_rank(z, 4, "sq_l2_distance_maps");
    require_rank(prototypes, 2, "sq_l2_distance_maps");
    const std::size_t d = z.shape()[3], m = prototypes.shape()[0];
    if (prototypes.shape()[1] != d) mismatch("sq_l2_distance_maps", z.shape(), prototypes.shape());
    const std::size_t rows = z.shape()[0] * z.shape()[1] * z.shape()[2];
    Tensor out(Shape{z.shape()[0], z.shape()[1], z.shape()[2], m});
    const auto zv = z.value().data();
    const auto pv = prototypes.value().data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t l = 0; l < m; ++l) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = zv[r * d + j] - pv[l * d + j];
                acc += diff * diff;
            }
            out[r * m + l] = acc;
        }
    return z.graph().record("sq_l2_distance_maps", std::move(out), {z, prototypes}, [rows, m, d](Graph& gr, std::size_t self) {
        const Tensor& g = gr.grad_slot(self);
        const std::size_t zid = gr.input(self, 0), pid = gr.input(self, 1);
        const Tensor& zv = gr.value(zid);
        const Tensor& pv = gr.value(pid);
        Tensor* gz = gr.needs_grad(zid) ? &gr.grad_slot(zid) : nullptr;
        Tensor* gp = gr.needs_grad(pid) ? &gr.grad_slot(pid) : nullptr;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t l = 0; l < m; ++l) {
                const double gv = g[r * m + l];
                if (gv == 0.0) continue;
                for (std::size_t j = 0; j < d; ++j) {
                    const double diff = 2.0 * gv * (zv[r * d + j] - pv[l * d + j]);
                    if (gz) (*gz)[r * d + j] += diff;
                    if (gp) (*gp)[l * d + j] -= diff;
                }
            }
    });
}

Var log_ratio(Var u, double gamma) {
    if (!(gamma > 0.0)) throw std::invalid_argument("log_ratio: gamma must be positive, got " + std::to_string(gamma));
    Tensor out = u.value();
    for (double& v : out.data()) {
        if (!(v + gamma > 0.0)) throw std::invalid_argument("log_ratio: argument below -gamma");
        v = std::log((v + 1.0) / (v + gamma));
    }
    return u.graph().record("log_ratio", std::move(out), {u}, [gamma](Graph& gr, std::size_t self) {
        const std::size_t uid = gr.input(self, 0);
        const Tensor& g = gr.grad_slot(self);
        const Tensor& uv = gr.value(uid);
        Tensor& gu = gr.grad_slot(uid);
        for (std::size_t i = 0; i < g.size(); ++i) gu[i] += g[i] * (1.0 / (uv[i] + 1.0) - 1.0 / (uv[i] + gamma));
    });
}

Var class_min_distance(Var distances, std::span<const std::size_t> class_of, std::span<const std::size_t> labels,
                       bool own) {
    require_rank(distances, 4, "class_min_distance");
    const Shape& s = distances.shape();
    const std::size_t batch = s[0], n = s[1] * s[2], m = s[3];
    if (class_of.size() != m) {
        throw ShapeError("class_min_distance: " + std::to_string(class_of.size()) + " class assignments for " +
                         to_string(s));
    }
    if (labels.size() != batch) {
        throw ShapeError("class_min_distance: " + std::to_string(labels.size()) + " labels for " + to_string(s));
    }
    Tensor out(Shape{s[0], s[1], s[2], 1});
    std::vector<std::size_t> arg(batch * n);
    const auto dv = distances.value().data();
    for (std::size_t b = 0; b < batch; ++b) {
        std::vector<std::size_t> candidates;
        for (std::size_t l = 0; l < m; ++l)
            if ((class_of[l] == labels[b]) == own) candidates.push_back(l);
        if (candidates.empty()) {
            throw std::invalid_argument(std::string("class_min_distance: no ") + (own ? "own-class" : "other-class") +
                                        " prototype for label " + std::to_string(labels[b]));
        }
        for (std::size_t t = 0; t < n; ++t) {
            const std::size_t row = (b * n + t) * m;
            std::size_t best = candidates[0];
            for (std::size_t l : candidates)
                if (dv[row + l] < dv[row + best]) best = l;
            out[b * n + t] = dv[row + best];
            arg[b * n + t] = row + best;
        }
    }
    return distances.graph().record("class_min_distance", std::move(out), {distances},
                                    [arg = std::move(arg)](Graph& gr, std::size_t self) {
                                        const Tensor& g = gr.grad_slot(self);
                                        Tensor& gd = gr.grad_slot(gr.input(self, 0));
                                        for (std::size_t i = 0; i < arg.size(); ++i) gd[arg[i]] += g[i];
                                    });
}

}  // namespace psep::ops
