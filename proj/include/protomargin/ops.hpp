#pragma once

// Differentiable kernels used by the model: convolution, pooling,
// nonlinearities, affine maps, distance/similarity maps, top-k pooling and
// bilinear upsampling. All loops run in fixed row-major order; ties in
// selection ops break by lowest flat index.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "protomargin/tape.hpp"

namespace protomargin {

namespace detail {

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

inline double sigmoid_stable(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace detail

/// 2-D cross-correlation. input [N,C,H,W], kernel [F,C,kh,kw], optional
/// bias [F]. Output spatial dims use floor division.
inline Var conv2d(Var input, Var kernel, Var bias, int stride, int padding) {
    check_same_tape(input, kernel);
    Tape& t = *input.tape;
    const Shape& is = t.shape(input);
    const Shape& ks = t.shape(kernel);
    detail::require(is.size() == 4 && ks.size() == 4,
                    "conv2d: need input [N,C,H,W] and kernel [F,C,kh,kw], got " +
                        shape_str(is) + " and " + shape_str(ks));
    detail::require(is[1] == ks[1],
                    "conv2d: channel mismatch between input " + shape_str(is) +
                        " and kernel " + shape_str(ks));
    detail::require(stride >= 1 && padding >= 0, "conv2d: bad stride/padding");
    const int N = is[0], C = is[1], H = is[2], W = is[3];
    const int F = ks[0], KH = ks[2], KW = ks[3];
    detail::require(H + 2 * padding >= KH && W + 2 * padding >= KW,
                    "conv2d: kernel " + shape_str(ks) + " larger than padded input " +
                        shape_str(is));
    const int OH = (H + 2 * padding - KH) / stride + 1;
    const int OW = (W + 2 * padding - KW) / stride + 1;
    const bool has_bias = bias.valid();
    if (has_bias) {
        check_same_tape(input, bias);
        detail::require(t.shape(bias) == Shape{F},
                        "conv2d: bias shape " + shape_str(t.shape(bias)) +
                            " does not match filter count " + std::to_string(F));
    }

    const double* in = t.val(input).data();
    const double* kw = t.val(kernel).data();
    const double* bv = has_bias ? t.val(bias).data() : nullptr;
    std::vector<double> out(static_cast<std::size_t>(N) * F * OH * OW, 0.0);

    auto ox_range = [&](int kx, int& lo, int& hi) {
        // valid ox where 0 <= ox*stride - padding + kx < W
        lo = std::max(0, (padding - kx + stride - 1) / stride);
        hi = std::min(OW - 1, (W - 1 + padding - kx) / stride);
    };

    for (int n = 0; n < N; ++n) {
        for (int f = 0; f < F; ++f) {
            double* out_nf = out.data() + (static_cast<std::size_t>(n) * F + f) * OH * OW;
            if (has_bias)
                for (int i = 0; i < OH * OW; ++i) out_nf[i] = bv[f];
            for (int ci = 0; ci < C; ++ci) {
                const double* in_nc =
                    in + (static_cast<std::size_t>(n) * C + ci) * H * W;
                const double* k_fc =
                    kw + (static_cast<std::size_t>(f) * C + ci) * KH * KW;
                for (int ky = 0; ky < KH; ++ky) {
                    for (int kx = 0; kx < KW; ++kx) {
                        const double wv = k_fc[ky * KW + kx];
                        if (wv == 0.0) continue;
                        int lo, hi;
                        ox_range(kx, lo, hi);
                        for (int oy = 0; oy < OH; ++oy) {
                            const int iy = oy * stride - padding + ky;
                            if (iy < 0 || iy >= H) continue;
                            const double* in_row = in_nc + static_cast<std::size_t>(iy) * W;
                            double* out_row = out_nf + static_cast<std::size_t>(oy) * OW;
                            const int base = -padding + kx;
                            for (int ox = lo; ox <= hi; ++ox)
                                out_row[ox] += wv * in_row[ox * stride + base];
                        }
                    }
                }
            }
        }
    }

    const int iid = input.id, kid = kernel.id, bid = has_bias ? bias.id : -1;
    std::vector<int> parents{iid, kid};
    if (has_bias) parents.push_back(bid);
    auto backward = [iid, kid, bid, N, C, H, W, F, KH, KW, OH, OW, stride,
                     padding](Tape& tp, int self) {
        const double* g = tp.grad_source(self);
        const double* in = tp.val(Var{&tp, iid}).data();
        const double* kw2 = tp.val(Var{&tp, kid}).data();
        double* gin = tp.grad_sink(iid);
        double* gk = tp.grad_sink(kid);
        double* gb = bid >= 0 ? tp.grad_sink(bid) : nullptr;

        auto ox_range = [&](int kx, int& lo, int& hi) {
            lo = std::max(0, (padding - kx + stride - 1) / stride);
            hi = std::min(OW - 1, (W - 1 + padding - kx) / stride);
        };

        if (gb) {
            for (int n = 0; n < N; ++n)
                for (int f = 0; f < F; ++f) {
                    const double* g_nf =
                        g + (static_cast<std::size_t>(n) * F + f) * OH * OW;
                    double acc = 0.0;
                    for (int i = 0; i < OH * OW; ++i) acc += g_nf[i];
                    gb[f] += acc;
                }
        }
        if (!gin && !gk) return;
        for (int n = 0; n < N; ++n) {
            for (int f = 0; f < F; ++f) {
                const double* g_nf =
                    g + (static_cast<std::size_t>(n) * F + f) * OH * OW;
                for (int ci = 0; ci < C; ++ci) {
                    const double* in_nc =
                        in + (static_cast<std::size_t>(n) * C + ci) * H * W;
                    double* gin_nc =
                        gin ? gin + (static_cast<std::size_t>(n) * C + ci) * H * W
                            : nullptr;
                    const std::size_t k_off =
                        (static_cast<std::size_t>(f) * C + ci) * KH * KW;
                    for (int ky = 0; ky < KH; ++ky) {
                        for (int kx = 0; kx < KW; ++kx) {
                            const double wv = kw2[k_off + ky * KW + kx];
                            int lo, hi;
                            ox_range(kx, lo, hi);
                            const int base = -padding + kx;
                            double acc = 0.0;
                            for (int oy = 0; oy < OH; ++oy) {
                                const int iy = oy * stride - padding + ky;
                                if (iy < 0 || iy >= H) continue;
                                const double* in_row =
                                    in_nc + static_cast<std::size_t>(iy) * W;
                                double* gin_row =
                                    gin_nc ? gin_nc + static_cast<std::size_t>(iy) * W
                                           : nullptr;
                                const double* g_row =
                                    g_nf + static_cast<std::size_t>(oy) * OW;
                                if (gk)
                                    for (int ox = lo; ox <= hi; ++ox)
                                        acc += g_row[ox] * in_row[ox * stride + base];
                                if (gin_row)
                                    for (int ox = lo; ox <= hi; ++ox)
                                        gin_row[ox * stride + base] += wv * g_row[ox];
                            }
                            if (gk) gk[k_off + ky * KW + kx] += acc;
                        }
                    }
                }
            }
        }
    };
    return t.make_node("conv2d", Shape{N, F, OH, OW}, std::move(out),
                       std::move(parents), std::move(backward));
}

inline Var conv2d(Var input, Var kernel, int stride, int padding) {
    return conv2d(input, kernel, Var{}, stride, padding);
}

/// 2x2 max pooling with stride 2; ties go to the first window cell in
/// row-major order.
inline Var maxpool2x2(Var input) {
    Tape& t = *input.tape;
    const Shape& is = t.shape(input);
    detail::require(is.size() == 4, "maxpool2x2: need [N,C,H,W], got " + shape_str(is));
    const int N = is[0], C = is[1], H = is[2], W = is[3];
    detail::require(H % 2 == 0 && W % 2 == 0,
                    "maxpool2x2: spatial dims must be even, got " + shape_str(is));
    const int OH = H / 2, OW = W / 2;
    const double* in = t.val(input).data();
    std::vector<double> out(static_cast<std::size_t>(N) * C * OH * OW);
    std::vector<int> arg(out.size());
    std::size_t o = 0;
    for (int nc = 0; nc < N * C; ++nc) {
        const double* plane = in + static_cast<std::size_t>(nc) * H * W;
        const int plane_off = nc * H * W;
        for (int oy = 0; oy < OH; ++oy) {
            for (int ox = 0; ox < OW; ++ox, ++o) {
                const int y = 2 * oy, x = 2 * ox;
                int best = y * W + x;
                double bv = plane[best];
                const int cand[3] = {y * W + x + 1, (y + 1) * W + x, (y + 1) * W + x + 1};
                for (int c : cand)
                    if (plane[c] > bv) {
                        bv = plane[c];
                        best = c;
                    }
                out[o] = bv;
                arg[o] = plane_off + best;
            }
        }
    }
    const int iid = input.id;
    return t.make_node("maxpool2x2", Shape{N, C, OH, OW}, std::move(out), {iid},
                       [iid, arg](Tape& tp, int self) {
                           const double* g = tp.grad_source(self);
                           if (double* gi = tp.grad_sink(iid))
                               for (std::size_t i = 0; i < arg.size(); ++i)
                                   gi[arg[i]] += g[i];
                       });
}

inline Var relu(Var input) {
    Tape& t = *input.tape;
    const auto& iv = t.val(input);
    std::vector<double> out(iv.size());
    for (std::size_t i = 0; i < iv.size(); ++i) out[i] = iv[i] > 0.0 ? iv[i] : 0.0;
    const int iid = input.id;
    return t.make_node("relu", t.shape(input), std::move(out), {iid},
                       [iid](Tape& tp, int self) {
                           const double* g = tp.grad_source(self);
                           const auto& x = tp.val(Var{&tp, iid});
                           if (double* gi = tp.grad_sink(iid))
                               for (std::size_t i = 0; i < x.size(); ++i)
                                   if (x[i] > 0.0) gi[i] += g[i];
                       });
}

inline Var sigmoid(Var input) {
    Tape& t = *input.tape;
    const auto& iv = t.val(input);
    std::vector<double> out(iv.size());
    for (std::size_t i = 0; i < iv.size(); ++i) out[i] = detail::sigmoid_stable(iv[i]);
    const int iid = input.id;
    std::vector<double> saved = out;
    return t.make_node("sigmoid", t.shape(input), std::move(out), {iid},
                       [iid, saved](Tape& tp, int self) {
                           const double* g = tp.grad_source(self);
                           if (double* gi = tp.grad_sink(iid))
                               for (std::size_t i = 0; i < saved.size(); ++i)
                                   gi[i] += g[i] * saved[i] * (1.0 - saved[i]);
                       });
}

/// Affine map: input [n], weight [o,n], optional bias [o] -> [o].
inline Var linear(Var input, Var weight, Var bias = Var{}) {
    check_same_tape(input, weight);
    Tape& t = *input.tape;
    const Shape& is = t.shape(input);
    const Shape& ws = t.shape(weight);
    detail::require(is.size() == 1 && ws.size() == 2 && ws[1] == is[0],
                    "linear: need input [n] and weight [o,n], got " + shape_str(is) +
                        " and " + shape_str(ws));
    const int n = is[0], o = ws[0];
    const bool has_bias = bias.valid();
    if (has_bias) {
        check_same_tape(input, bias);
        detail::require(t.shape(bias) == Shape{o},
                        "linear: bias shape " + shape_str(t.shape(bias)) +
                            " does not match output dim " + std::to_string(o));
    }
    const double* x = t.val(input).data();
    const double* w = t.val(weight).data();
    std::vector<double> out(static_cast<std::size_t>(o), 0.0);
    for (int i = 0; i < o; ++i) {
        double acc = has_bias ? t.val(bias)[static_cast<std::size_t>(i)] : 0.0;
        const double* wrow = w + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) acc += wrow[j] * x[j];
        out[static_cast<std::size_t>(i)] = acc;
    }
    const int xid = input.id, wid = weight.id, bid = has_bias ? bias.id : -1;
    std::vector<int> parents{xid, wid};
    if (has_bias) parents.push_back(bid);
    return t.make_node("linear", Shape{o}, std::move(out), std::move(parents),
                       [xid, wid, bid, n, o](Tape& tp, int self) {
                           const double* g = tp.grad_source(self);
                           const double* x2 = tp.val(Var{&tp, xid}).data();
                           const double* w2 = tp.val(Var{&tp, wid}).data();
                           double* gx = tp.grad_sink(xid);
                           double* gw = tp.grad_sink(wid);
                           double* gb = bid >= 0 ? tp.grad_sink(bid) : nullptr;
                           for (int i = 0; i < o; ++i) {
                               const double gi = g[i];
                               const double* wrow = w2 + static_cast<std::size_t>(i) * n;
                               if (gx)
                                   for (int j = 0; j < n; ++j) gx[j] += gi * wrow[j];
                               if (gw) {
                                   double* gwrow = gw + static_cast<std::size_t>(i) * n;
                                   for (int j = 0; j < n; ++j) gwrow[j] += gi * x2[j];
                               }
                               if (gb) gb[i] += gi;
                           }
                       });
}

/// -log softmax(logits)[label], with a stable log-sum-exp.
inline Var softmax_cross_entropy(Var logits, int label) {
    Tape& t = *logits.tape;
    const Shape& s = t.shape(logits);
    detail::require(s.size() == 1 && s[0] >= 2,
                    "softmax_cross_entropy: need logits [K], K >= 2, got " + shape_str(s));
    const int K = s[0];
    detail::require(label >= 0 && label < K,
                    "softmax_cross_entropy: label " + std::to_string(label) +
                        " out of range for K=" + std::to_string(K));
    const auto& z = t.val(logits);
    double zmax = z[0];
    for (double v : z) zmax = std::max(zmax, v);
    double denom = 0.0;
    for (double v : z) denom += std::exp(v - zmax);
    const double lse = zmax + std::log(denom);
    const double loss = lse - z[static_cast<std::size_t>(label)];
    std::vector<double> probs(static_cast<std::size_t>(K));
    for (int i = 0; i < K; ++i)
        probs[static_cast<std::size_t>(i)] = std::exp(z[static_cast<std::size_t>(i)] - lse);
    const int zid = logits.id;
    return t.make_node("softmax_cross_entropy", Shape{1}, {loss}, {zid},
                       [zid, probs, label](Tape& tp, int self) {
                           const double g = tp.grad_source(self)[0];
                           if (double* gz = tp.grad_sink(zid)) {
                               for (std::size_t i = 0; i < probs.size(); ++i)
                                   gz[i] += g * probs[i];
                               gz[static_cast<std::size_t>(label)] -= g;
                           }
                       });
}

/// Logistic log-loss on a scalar logit: softplus(z) - target*z.
inline Var binary_cross_entropy_with_logit(Var logit, double target) {
    Tape& t = *logit.tape;
    detail::require(t.val(logit).size() == 1,
                    "binary_cross_entropy_with_logit: logit must be scalar, got " +
                        shape_str(t.shape(logit)));
    const double z = t.val(logit)[0];
    const double softplus = z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    const double loss = softplus - target * z;
    const double p = detail::sigmoid_stable(z);
    const int zid = logit.id;
    return t.make_node("bce_with_logit", Shape{1}, {loss}, {zid},
                       [zid, p, target](Tape& tp, int self) {
                           const double g = tp.grad_source(self)[0];
                           if (double* gz = tp.grad_sink(zid)) gz[0] += g * (p - target);
                       });
}

/// Squared L2 distance from one prototype [c] to every 1x1 spatial patch of
/// a latent map [c,h,w]; output [h,w].
inline Var l2_distance_map(Var latent, Var prototype) {
    check_same_tape(latent, prototype);
    Tape& t = *latent.tape;
    const Shape& ls = t.shape(latent);
    const Shape& ps = t.shape(prototype);
    detail::require(ls.size() == 3 && ps.size() == 1,
                    "l2_distance_map: need latent [c,h,w] and prototype [c], got " +
                        shape_str(ls) + " and " + shape_str(ps));
    detail::require(ls[0] == ps[0], "l2_distance_map: channel mismatch, latent " +
                                        shape_str(ls) + " vs prototype " + shape_str(ps));
    const int C = ls[0], H = ls[1], W = ls[2];
    const int hw = H * W;
    const double* z = t.val(latent).data();
    const double* p = t.val(prototype).data();
    std::vector<double> out(static_cast<std::size_t>(hw), 0.0);
    for (int c = 0; c < C; ++c) {
        const double pc = p[c];
        const double* zc = z + static_cast<std::size_t>(c) * hw;
        for (int l = 0; l < hw; ++l) {
            const double d = zc[l] - pc;
            out[static_cast<std::size_t>(l)] += d * d;
        }
    }
    const int lid = latent.id, pid = prototype.id;
    return t.make_node("l2_distance_map", Shape{H, W}, std::move(out), {lid, pid},
                       [lid, pid, C, hw](Tape& tp, int self) {
                           const double* g = tp.grad_source(self);
                           const double* z2 = tp.val(Var{&tp, lid}).data();
                           const double* p2 = tp.val(Var{&tp, pid}).data();
                           double* gz = tp.grad_sink(lid);
                           double* gp = tp.grad_sink(pid);
                           for (int c = 0; c < C; ++c) {
                               const double pc = p2[c];
                               const double* zc = z2 + static_cast<std::size_t>(c) * hw;
                               double* gzc =
                                   gz ? gz + static_cast<std::size_t>(c) * hw : nullptr;
                               double acc = 0.0;
                               for (int l = 0; l < hw; ++l) {
                                   const double diff = zc[l] - pc;
                                   const double gl = 2.0 * g[l] * diff;
                                   if (gzc) gzc[l] += gl;
                                   acc -= gl;
                               }
                               if (gp) gp[c] += acc;
                           }
                       });
}

/// Log-ratio similarity: s = log((d+1)/(d+epsilon)), elementwise. Strictly
/// decreasing in d, with range (0, log(1/epsilon)] for d >= 0.
inline Var dist_to_sim(Var d, double epsilon) {
    detail::require(epsilon > 0.0 && epsilon < 1.0,
                    "dist_to_sim: epsilon must be in (0,1), got " + std::to_string(epsilon));
    Tape& t = *d.tape;
    const auto& dv = t.val(d);
    std::vector<double> out(dv.size());
    for (std::size_t i = 0; i < dv.size(); ++i)
        out[i] = std::log(dv[i] + 1.0) - std::log(dv[i] + epsilon);
    const int did = d.id;
    return t.make_node("dist_to_sim", t.shape(d), std::move(out), {did},
                       [did, epsilon](Tape& tp, int self) {
                           const double* g = tp.grad_source(self);
                           const auto& d2 = tp.val(Var{&tp, did});
                           if (double* gd = tp.grad_sink(did))
                               for (std::size_t i = 0; i < d2.size(); ++i)
                                   gd[i] += g[i] * (1.0 / (d2[i] + 1.0) -
                                                    1.0 / (d2[i] + epsilon));
                       });
}

namespace detail {

inline std::vector<int> select_extreme_indices(const std::vector<double>& v, int k,
                                               bool largest) {
    std::vector<int> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto cmp = [&](int a, int b) {
        const double va = v[static_cast<std::size_t>(a)];
        const double vb = v[static_cast<std::size_t>(b)];
        if (va != vb) return largest ? va > vb : va < vb;
        return a < b;  // deterministic tie-break: lowest flat (row-major) index
    };
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), cmp);
    idx.resize(static_cast<std::size_t>(k));
    return idx;
}

inline Var extreme_avg_pool(Var map, int k, bool largest, const char* name) {
    Tape& t = *map.tape;
    const auto& v = t.val(map);
    require(k >= 1 && static_cast<std::size_t>(k) <= v.size(),
            std::string(name) + ": k=" + std::to_string(k) +
                " out of range for map of size " + std::to_string(v.size()));
    std::vector<int> sel = select_extreme_indices(v, k, largest);
    double s = 0.0;
    for (int i : sel) s += v[static_cast<std::size_t>(i)];
    const double mean = s / k;
    const int mid = map.id;
    return t.make_node(name, Shape{1}, {mean}, {mid},
                       [mid, sel, k](Tape& tp, int self) {
                           const double g = tp.grad_source(self)[0] / k;
                           if (double* gm = tp.grad_sink(mid))
                               for (int i : sel) gm[i] += g;
                       });
}

}  // namespace detail

/// Mean of the k largest entries; k=1 is max pooling. Gradient routes 1/k to
/// each selected cell.
inline Var topk_avg_pool(Var map, int k) {
    return detail::extreme_avg_pool(map, k, true, "topk_avg_pool");
}

/// Mean of the k smallest entries (the relaxed-min used by cluster and
/// separation costs).
inline Var mink_avg_pool(Var map, int k) {
    return detail::extreme_avg_pool(map, k, false, "mink_avg_pool");
}

namespace detail {

struct LerpAxis {
    std::vector<int> i0;
    std::vector<double> frac;
};

/// Corner-aligned sampling positions: out 0 maps to in 0, out last to in last.
inline LerpAxis lerp_axis(int in, int out) {
    LerpAxis ax;
    ax.i0.resize(static_cast<std::size_t>(out));
    ax.frac.resize(static_cast<std::size_t>(out));
    const double step = out > 1 ? static_cast<double>(in - 1) / (out - 1) : 0.0;
    for (int o = 0; o < out; ++o) {
        double pos = o * step;
        int i0 = static_cast<int>(pos);
        if (i0 > in - 2) i0 = in - 2;
        ax.i0[static_cast<std::size_t>(o)] = i0;
        ax.frac[static_cast<std::size_t>(o)] = pos - i0;
    }
    return ax;
}

inline std::vector<double> upsample_forward(const double* in, int H, int W, int out_h,
                                            int out_w) {
    const LerpAxis ay = lerp_axis(H, out_h);
    const LerpAxis ax = lerp_axis(W, out_w);
    std::vector<double> out(static_cast<std::size_t>(out_h) * out_w);
    for (int oy = 0; oy < out_h; ++oy) {
        const int y0 = ay.i0[static_cast<std::size_t>(oy)];
        const double ty = ay.frac[static_cast<std::size_t>(oy)];
        const double* r0 = in + static_cast<std::size_t>(y0) * W;
        const double* r1 = r0 + W;
        double* orow = out.data() + static_cast<std::size_t>(oy) * out_w;
        for (int ox = 0; ox < out_w; ++ox) {
            const int x0 = ax.i0[static_cast<std::size_t>(ox)];
            const double tx = ax.frac[static_cast<std::size_t>(ox)];
            const double top = r0[x0] * (1.0 - tx) + r0[x0 + 1] * tx;
            const double bot = r1[x0] * (1.0 - tx) + r1[x0 + 1] * tx;
            orow[ox] = top * (1.0 - ty) + bot * ty;
        }
    }
    return out;
}

}  // namespace detail

/// Corner-aligned bilinear upsampling of a [h,w] map to [out_h,out_w].
/// Outputs are convex combinations of inputs, so constants stay constant and
/// the output range is within the input min/max.
inline Var bilinear_upsample(Var map, int out_h, int out_w) {
    Tape& t = *map.tape;
    const Shape& s = t.shape(map);
    detail::require(s.size() == 2, "bilinear_upsample: need [h,w], got " + shape_str(s));
    const int H = s[0], W = s[1];
    detail::require(H >= 2 && W >= 2,
                    "bilinear_upsample: input dims must be >= 2, got " + shape_str(s));
    detail::require(out_h >= H && out_w >= W,
                    "bilinear_upsample: output " + shape_str(Shape{out_h, out_w}) +
                        " smaller than input " + shape_str(s));
    const detail::LerpAxis ay = detail::lerp_axis(H, out_h);
    const detail::LerpAxis ax = detail::lerp_axis(W, out_w);
    std::vector<double> out = detail::upsample_forward(t.val(map).data(), H, W, out_h, out_w);
    const int mid = map.id;
    return t.make_node("bilinear_upsample", Shape{out_h, out_w}, std::move(out), {mid},
                       [mid, ay, ax, W, out_h, out_w](Tape& tp, int self) {
                           const double* g = tp.grad_source(self);
                           double* gm = tp.grad_sink(mid);
                           if (!gm) return;
                           for (int oy = 0; oy < out_h; ++oy) {
                               const int y0 = ay.i0[static_cast<std::size_t>(oy)];
                               const double ty = ay.frac[static_cast<std::size_t>(oy)];
                               double* g0 = gm + static_cast<std::size_t>(y0) * W;
                               double* g1 = g0 + W;
                               const double* grow =
                                   g + static_cast<std::size_t>(oy) * out_w;
                               for (int ox = 0; ox < out_w; ++ox) {
                                   const int x0 = ax.i0[static_cast<std::size_t>(ox)];
                                   const double tx = ax.frac[static_cast<std::size_t>(ox)];
                                   const double gv = grow[ox];
                                   g0[x0] += gv * (1.0 - tx) * (1.0 - ty);
                                   g0[x0 + 1] += gv * tx * (1.0 - ty);
                                   g1[x0] += gv * (1.0 - tx) * ty;
                                   g1[x0 + 1] += gv * tx * ty;
                               }
                           }
                       });
}

/// Tape-free corner-aligned upsample for evaluation-time maps; same geometry
/// as the differentiable op.
inline Tensor upsample_tensor(const Tensor& map, int out_h, int out_w) {
    if (map.rank() != 2)
        throw std::invalid_argument("upsample_tensor: need [h,w], got " +
                                    shape_str(map.shape));
    const int H = map.dim(0), W = map.dim(1);
    if (H < 2 || W < 2 || out_h < H || out_w < W)
        throw std::invalid_argument("upsample_tensor: bad dims " + shape_str(map.shape) +
                                    " -> " + shape_str(Shape{out_h, out_w}));
    return Tensor(Shape{out_h, out_w},
                  detail::upsample_forward(map.values.data(), H, W, out_h, out_w));
}

}  // namespace protomargin
