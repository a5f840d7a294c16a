#pragma once

// Differentiable tensor ops on the tape. Heavy lifting (matmul, conv im2col)
// goes through Eigen; everything else is plain loops. Backward functions
// recompute cheap intermediates (e.g. im2col patches) from stored node values
// instead of caching them, which keeps tape memory at ~2x activations.

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "refanim/tape.hpp"

namespace refanim::ops {

template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using EMap = Eigen::Map<EMat<S>>;
template <class S>
using ECMap = Eigen::Map<const EMat<S>>;

template <class S>
EMap<S> as_mat(Tensor<S>& t, long rows, long cols) {
    return EMap<S>(t.ptr(), rows, cols);
}
template <class S>
ECMap<S> as_mat(const Tensor<S>& t, long rows, long cols) {
    return ECMap<S>(t.ptr(), rows, cols);
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

template <class S>
int make_node(Tape<S>& t, Tensor<S> val, bool rg, typename Tape<S>::BackFn back) {
    int id = t.push(std::move(val), rg, nullptr);
    if (rg && back) t.set_back(id, std::move(back));
    return id;
}

// ---------------------------------------------------------------- elementwise

template <class S>
int add(Tape<S>& t, int a, int b) {
    const auto& va = t.val(a);
    const auto& vb = t.val(b);
    check(va.same_shape(vb), "add: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
    Tensor<S> y = va;
    for (long i = 0; i < y.numel(); ++i) y[i] += vb[i];
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [a, b, out](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            tp.acc_grad(a, gy);
            tp.acc_grad(b, gy);
        });
    return out;
}

template <class S>
int sub(Tape<S>& t, int a, int b) {
    const auto& va = t.val(a);
    const auto& vb = t.val(b);
    check(va.same_shape(vb), "sub: shape mismatch");
    Tensor<S> y = va;
    for (long i = 0; i < y.numel(); ++i) y[i] -= vb[i];
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [a, b, out](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            tp.acc_grad(a, gy);
            if (auto* gb = tp.grad_buffer(b))
                for (long i = 0; i < gy.numel(); ++i) (*gb)[i] -= gy[i];
        });
    return out;
}

template <class S>
int mul(Tape<S>& t, int a, int b) {
    const auto& va = t.val(a);
    const auto& vb = t.val(b);
    check(va.same_shape(vb), "mul: shape mismatch");
    Tensor<S> y = va;
    for (long i = 0; i < y.numel(); ++i) y[i] *= vb[i];
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [a, b, out](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            const auto& va = tp.val(a);
            const auto& vb = tp.val(b);
            if (auto* ga = tp.grad_buffer(a))
                for (long i = 0; i < gy.numel(); ++i) (*ga)[i] += gy[i] * vb[i];
            if (auto* gb = tp.grad_buffer(b))
                for (long i = 0; i < gy.numel(); ++i) (*gb)[i] += gy[i] * va[i];
        });
    return out;
}

template <class S>
int scale(Tape<S>& t, int a, double s) {
    Tensor<S> y = t.val(a);
    for (long i = 0; i < y.numel(); ++i) y[i] = static_cast<S>(y[i] * s);
    bool rg = t.requires_grad(a);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [a, out, s](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            if (auto* ga = tp.grad_buffer(a))
                for (long i = 0; i < gy.numel(); ++i) (*ga)[i] += static_cast<S>(gy[i] * s);
        });
    return out;
}

template <class S>
int silu(Tape<S>& t, int a) {
    const auto& va = t.val(a);
    Tensor<S> y(va.shape);
    for (long i = 0; i < y.numel(); ++i) {
        S sg = S(1) / (S(1) + std::exp(-va[i]));
        y[i] = va[i] * sg;
    }
    bool rg = t.requires_grad(a);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [a, out](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            const auto& va = tp.val(a);
            if (auto* ga = tp.grad_buffer(a))
                for (long i = 0; i < gy.numel(); ++i) {
                    S sg = S(1) / (S(1) + std::exp(-va[i]));
                    (*ga)[i] += gy[i] * sg * (S(1) + va[i] * (S(1) - sg));
                }
        });
    return out;
}

// ------------------------------------------------------------------- reshape

template <class S>
int reshape(Tape<S>& t, int a, std::vector<long> shape) {
    Tensor<S> y = t.val(a).reshaped(shape);
    bool rg = t.requires_grad(a);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [a, out](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            if (auto* ga = tp.grad_buffer(a))
                for (long i = 0; i < gy.numel(); ++i) (*ga)[i] += gy[i];
        });
    return out;
}

// ------------------------------------------------------------------- matmul

template <class S>
int matmul(Tape<S>& t, int a, int b) {
    const auto& va = t.val(a);
    const auto& vb = t.val(b);
    check(va.rank() == 2 && vb.rank() == 2 && va.shape[1] == vb.shape[0],
          "matmul: bad shapes " + va.shape_str() + " x " + vb.shape_str());
    long m = va.shape[0], k = va.shape[1], n = vb.shape[1];
    Tensor<S> y({m, n});
    as_mat(y, m, n).noalias() = as_mat(va, m, k) * as_mat(vb, k, n);
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [a, b, out, m, k, n](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            const auto& va = tp.val(a);
            const auto& vb = tp.val(b);
            if (auto* ga = tp.grad_buffer(a))
                as_mat(*ga, m, k).noalias() += as_mat(gy, m, n) * as_mat(vb, k, n).transpose();
            if (auto* gb = tp.grad_buffer(b))
                as_mat(*gb, k, n).noalias() += as_mat(va, m, k).transpose() * as_mat(gy, m, n);
        });
    return out;
}

// Batched matmul: a[B,m,k] x b[B,k,n] -> [B,m,n]
template <class S>
int bmm(Tape<S>& t, int a, int b) {
    const auto& va = t.val(a);
    const auto& vb = t.val(b);
    check(va.rank() == 3 && vb.rank() == 3 && va.shape[0] == vb.shape[0] &&
              va.shape[2] == vb.shape[1],
          "bmm: bad shapes " + va.shape_str() + " x " + vb.shape_str());
    long B = va.shape[0], m = va.shape[1], k = va.shape[2], n = vb.shape[2];
    Tensor<S> y({B, m, n});
    for (long i = 0; i < B; ++i) {
        ECMap<S> ma(va.ptr() + i * m * k, m, k);
        ECMap<S> mb(vb.ptr() + i * k * n, k, n);
        EMap<S> my(y.ptr() + i * m * n, m, n);
        my.noalias() = ma * mb;
    }
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [a, b, out, B, m, k, n](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            const auto& va = tp.val(a);
            const auto& vb = tp.val(b);
            auto* ga = tp.grad_buffer(a);
            auto* gb = tp.grad_buffer(b);
            for (long i = 0; i < B; ++i) {
                ECMap<S> mg(gy.ptr() + i * m * n, m, n);
                ECMap<S> ma(va.ptr() + i * m * k, m, k);
                ECMap<S> mb(vb.ptr() + i * k * n, k, n);
                if (ga) EMap<S>(ga->ptr() + i * m * k, m, k).noalias() += mg * mb.transpose();
                if (gb) EMap<S>(gb->ptr() + i * k * n, k, n).noalias() += ma.transpose() * mg;
            }
        });
    return out;
}

// Swap the last two axes of a 2D or 3D tensor.
template <class S>
int transpose_last2(Tape<S>& t, int a) {
    const auto& va = t.val(a);
    check(va.rank() == 2 || va.rank() == 3, "transpose_last2: rank must be 2 or 3");
    long B = va.rank() == 3 ? va.shape[0] : 1;
    long m = va.shape[va.rank() - 2], n = va.shape[va.rank() - 1];
    std::vector<long> osh = va.shape;
    std::swap(osh[osh.size() - 2], osh[osh.size() - 1]);
    Tensor<S> y(osh);
    for (long i = 0; i < B; ++i)
        EMap<S>(y.ptr() + i * m * n, n, m) = ECMap<S>(va.ptr() + i * m * n, m, n).transpose();
    bool rg = t.requires_grad(a);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [a, out, B, m, n](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            if (auto* ga = tp.grad_buffer(a))
                for (long i = 0; i < B; ++i)
                    EMap<S>(ga->ptr() + i * m * n, m, n) +=
                        ECMap<S>(gy.ptr() + i * m * n, n, m).transpose();
        });
    return out;
}

// ------------------------------------------------------------------ softmax

template <class S>
int softmax_lastdim(Tape<S>& t, int a) {
    const auto& va = t.val(a);
    check(va.rank() >= 1, "softmax: needs rank >= 1");
    long n = va.shape.back();
    long rows = va.numel() / n;
    Tensor<S> y(va.shape);
    for (long r = 0; r < rows; ++r) {
        const S* x = va.ptr() + r * n;
        S* o = y.ptr() + r * n;
        S mx = x[0];
        for (long i = 1; i < n; ++i) mx = std::max(mx, x[i]);
        S sum = 0;
        for (long i = 0; i < n; ++i) {
            o[i] = std::exp(x[i] - mx);
            sum += o[i];
        }
        S inv = S(1) / sum;
        for (long i = 0; i < n; ++i) o[i] *= inv;
    }
    bool rg = t.requires_grad(a);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [a, out, rows, n](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            const auto& vy = tp.val(out);
            if (auto* ga = tp.grad_buffer(a))
                for (long r = 0; r < rows; ++r) {
                    const S* g = gy.ptr() + r * n;
                    const S* yv = vy.ptr() + r * n;
                    S* gx = ga->ptr() + r * n;
                    S dot = 0;
                    for (long i = 0; i < n; ++i) dot += g[i] * yv[i];
                    for (long i = 0; i < n; ++i) gx[i] += yv[i] * (g[i] - dot);
                }
        });
    return out;
}

// --------------------------------------------------------------- reductions

template <class S>
int mean_all(Tape<S>& t, int a) {
    const auto& va = t.val(a);
    S acc = 0;
    for (long i = 0; i < va.numel(); ++i) acc += va[i];
    long n = va.numel();
    Tensor<S> y({1});
    y[0] = acc / static_cast<S>(n);
    bool rg = t.requires_grad(a);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [a, out, n](Tape<S>& tp) {
            S g = tp.grad(out)[0] / static_cast<S>(n);
            if (auto* ga = tp.grad_buffer(a))
                for (long i = 0; i < ga->numel(); ++i) (*ga)[i] += g;
        });
    return out;
}

template <class S>
int sum_all(Tape<S>& t, int a) {
    const auto& va = t.val(a);
    S acc = 0;
    for (long i = 0; i < va.numel(); ++i) acc += va[i];
    Tensor<S> y({1});
    y[0] = acc;
    bool rg = t.requires_grad(a);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [a, out](Tape<S>& tp) {
            S g = tp.grad(out)[0];
            if (auto* ga = tp.grad_buffer(a))
                for (long i = 0; i < ga->numel(); ++i) (*ga)[i] += g;
        });
    return out;
}

template <class S>
int mse(Tape<S>& t, int a, int b) {
    int d = sub(t, a, b);
    return mean_all(t, mul(t, d, d));
}

// ------------------------------------------------------------------ conv2d

// x[N,C,H,W] (+pad) -> patches[C*kh*kw, OH*OW] for one sample.
template <class S>
void im2col(const S* x, long C, long H, long W, long kh, long kw, long stride, long pad, long OH,
            long OW, S* cols) {
    for (long c = 0; c < C; ++c)
        for (long i = 0; i < kh; ++i)
            for (long j = 0; j < kw; ++j) {
                S* row = cols + ((c * kh + i) * kw + j) * OH * OW;
                for (long oh = 0; oh < OH; ++oh) {
                    long ih = oh * stride + i - pad;
                    if (ih < 0 || ih >= H) {
                        for (long ow = 0; ow < OW; ++ow) row[oh * OW + ow] = 0;
                        continue;
                    }
                    const S* src = x + (c * H + ih) * W;
                    for (long ow = 0; ow < OW; ++ow) {
                        long iw = ow * stride + j - pad;
                        row[oh * OW + ow] = (iw >= 0 && iw < W) ? src[iw] : S(0);
                    }
                }
            }
}

template <class S>
void col2im_acc(const S* cols, long C, long H, long W, long kh, long kw, long stride, long pad,
                long OH, long OW, S* dx) {
    for (long c = 0; c < C; ++c)
        for (long i = 0; i < kh; ++i)
            for (long j = 0; j < kw; ++j) {
                const S* row = cols + ((c * kh + i) * kw + j) * OH * OW;
                for (long oh = 0; oh < OH; ++oh) {
                    long ih = oh * stride + i - pad;
                    if (ih < 0 || ih >= H) continue;
                    S* dst = dx + (c * H + ih) * W;
                    for (long ow = 0; ow < OW; ++ow) {
                        long iw = ow * stride + j - pad;
                        if (iw >= 0 && iw < W) dst[iw] += row[oh * OW + ow];
                    }
                }
            }
}

template <class S>
int conv2d(Tape<S>& t, int x, int w, int b, long stride, long pad) {
    const auto& vx = t.val(x);
    const auto& vw = t.val(w);
    const auto& vb = t.val(b);
    check(vx.rank() == 4 && vw.rank() == 4, "conv2d: x must be [N,C,H,W], w [OC,C,kh,kw]");
    long N = vx.shape[0], C = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
    long OC = vw.shape[0], kh = vw.shape[2], kw = vw.shape[3];
    check(vw.shape[1] == C, "conv2d: channel mismatch");
    check(vb.numel() == OC, "conv2d: bias size mismatch");
    long OH = (H + 2 * pad - kh) / stride + 1;
    long OW = (W + 2 * pad - kw) / stride + 1;
    check(OH > 0 && OW > 0, "conv2d: output collapsed");
    long K = C * kh * kw;

    Tensor<S> y({N, OC, OH, OW});
    Tensor<S> cols({K, OH * OW});
    for (long n = 0; n < N; ++n) {
        im2col(vx.ptr() + n * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW, cols.ptr());
        EMap<S> my(y.ptr() + n * OC * OH * OW, OC, OH * OW);
        my.noalias() = as_mat(vw, OC, K) * as_mat(cols, K, OH * OW);
        for (long oc = 0; oc < OC; ++oc) my.row(oc).array() += vb[oc];
    }
    bool rg = t.requires_grad(x) || t.requires_grad(w) || t.requires_grad(b);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [x, w, b, out, N, C, H, W, OC, kh, kw, stride, pad, OH, OW,
                         K](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            const auto& vx = tp.val(x);
            const auto& vw = tp.val(w);
            auto* gx = tp.grad_buffer(x);
            auto* gw = tp.grad_buffer(w);
            auto* gb = tp.grad_buffer(b);
            Tensor<S> cols({K, OH * OW});
            Tensor<S> dcols({K, OH * OW});
            for (long n = 0; n < N; ++n) {
                ECMap<S> mg(gy.ptr() + n * OC * OH * OW, OC, OH * OW);
                if (gw) {
                    im2col(vx.ptr() + n * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW,
                           cols.ptr());
                    as_mat(*gw, OC, K).noalias() += mg * as_mat(cols, K, OH * OW).transpose();
                }
                if (gb)
                    for (long oc = 0; oc < OC; ++oc) (*gb)[oc] += mg.row(oc).sum();
                if (gx) {
                    as_mat(dcols, K, OH * OW).noalias() = as_mat(vw, OC, K).transpose() * mg;
                    col2im_acc(dcols.ptr(), C, H, W, kh, kw, stride, pad, OH, OW,
                               gx->ptr() + n * C * H * W);
                }
            }
        });
    return out;
}

// --------------------------------------------------------------- group norm

template <class S>
int group_norm(Tape<S>& t, int x, int gamma, int beta, long groups, double eps = 1e-5) {
    const auto& vx = t.val(x);
    check(vx.rank() == 4, "group_norm: x must be [N,C,H,W]");
    long N = vx.shape[0], C = vx.shape[1], HW = vx.shape[2] * vx.shape[3];
    check(C % groups == 0, "group_norm: C % groups != 0");
    check(t.val(gamma).numel() == C && t.val(beta).numel() == C, "group_norm: affine size");
    long cg = C / groups;
    long E = cg * HW;

    Tensor<S> y(vx.shape);
    std::vector<S> mean(static_cast<size_t>(N * groups)), inv_std(static_cast<size_t>(N * groups));
    const auto& vg = t.val(gamma);
    const auto& vbt = t.val(beta);
    for (long n = 0; n < N; ++n)
        for (long g = 0; g < groups; ++g) {
            const S* base = vx.ptr() + (n * C + g * cg) * HW;
            S mu = 0;
            for (long i = 0; i < E; ++i) mu += base[i];
            mu /= static_cast<S>(E);
            S var = 0;
            for (long i = 0; i < E; ++i) {
                S d = base[i] - mu;
                var += d * d;
            }
            var /= static_cast<S>(E);
            S is = S(1) / std::sqrt(var + static_cast<S>(eps));
            mean[static_cast<size_t>(n * groups + g)] = mu;
            inv_std[static_cast<size_t>(n * groups + g)] = is;
            S* o = y.ptr() + (n * C + g * cg) * HW;
            for (long c = 0; c < cg; ++c) {
                S ga = vg[g * cg + c], be = vbt[g * cg + c];
                for (long i = 0; i < HW; ++i)
                    o[c * HW + i] = (base[c * HW + i] - mu) * is * ga + be;
            }
        }
    bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [x, gamma, beta, out, N, C, HW, groups, cg, E, mean,
                         inv_std](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            const auto& vx = tp.val(x);
            const auto& vg = tp.val(gamma);
            auto* gx = tp.grad_buffer(x);
            auto* gga = tp.grad_buffer(gamma);
            auto* gbe = tp.grad_buffer(beta);
            for (long n = 0; n < N; ++n)
                for (long g = 0; g < groups; ++g) {
                    const S* xb = vx.ptr() + (n * C + g * cg) * HW;
                    const S* gb = gy.ptr() + (n * C + g * cg) * HW;
                    S mu = mean[static_cast<size_t>(n * groups + g)];
                    S is = inv_std[static_cast<size_t>(n * groups + g)];
                    if (gga || gbe)
                        for (long c = 0; c < cg; ++c) {
                            S sg = 0, sb = 0;
                            for (long i = 0; i < HW; ++i) {
                                S xhat = (xb[c * HW + i] - mu) * is;
                                sg += gb[c * HW + i] * xhat;
                                sb += gb[c * HW + i];
                            }
                            if (gga) (*gga)[g * cg + c] += sg;
                            if (gbe) (*gbe)[g * cg + c] += sb;
                        }
                    if (gx) {
                        // dL/dxhat = gy * gamma; standard normalization backward
                        S sum_dxhat = 0, sum_dxhat_xhat = 0;
                        for (long c = 0; c < cg; ++c) {
                            S ga = vg[g * cg + c];
                            for (long i = 0; i < HW; ++i) {
                                S dxh = gb[c * HW + i] * ga;
                                S xhat = (xb[c * HW + i] - mu) * is;
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * xhat;
                            }
                        }
                        S* gxb = gx->ptr() + (n * C + g * cg) * HW;
                        S invE = S(1) / static_cast<S>(E);
                        for (long c = 0; c < cg; ++c) {
                            S ga = vg[g * cg + c];
                            for (long i = 0; i < HW; ++i) {
                                S dxh = gb[c * HW + i] * ga;
                                S xhat = (xb[c * HW + i] - mu) * is;
                                gxb[c * HW + i] +=
                                    is * (dxh - invE * (sum_dxhat + xhat * sum_dxhat_xhat));
                            }
                        }
                    }
                }
        });
    return out;
}

// --------------------------------------------------------------- layer norm

template <class S>
int layer_norm(Tape<S>& t, int x, int gamma, int beta, double eps = 1e-5) {
    const auto& vx = t.val(x);
    long C = vx.shape.back();
    long R = vx.numel() / C;
    check(t.val(gamma).numel() == C && t.val(beta).numel() == C, "layer_norm: affine size");
    Tensor<S> y(vx.shape);
    std::vector<S> mean(static_cast<size_t>(R)), inv_std(static_cast<size_t>(R));
    const auto& vg = t.val(gamma);
    const auto& vbt = t.val(beta);
    for (long r = 0; r < R; ++r) {
        const S* xb = vx.ptr() + r * C;
        S mu = 0;
        for (long i = 0; i < C; ++i) mu += xb[i];
        mu /= static_cast<S>(C);
        S var = 0;
        for (long i = 0; i < C; ++i) {
            S d = xb[i] - mu;
            var += d * d;
        }
        var /= static_cast<S>(C);
        S is = S(1) / std::sqrt(var + static_cast<S>(eps));
        mean[static_cast<size_t>(r)] = mu;
        inv_std[static_cast<size_t>(r)] = is;
        S* o = y.ptr() + r * C;
        for (long i = 0; i < C; ++i) o[i] = (xb[i] - mu) * is * vg[i] + vbt[i];
    }
    bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [x, gamma, beta, out, R, C, mean, inv_std](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            const auto& vx = tp.val(x);
            const auto& vg = tp.val(gamma);
            auto* gx = tp.grad_buffer(x);
            auto* gga = tp.grad_buffer(gamma);
            auto* gbe = tp.grad_buffer(beta);
            for (long r = 0; r < R; ++r) {
                const S* xb = vx.ptr() + r * C;
                const S* gb = gy.ptr() + r * C;
                S mu = mean[static_cast<size_t>(r)];
                S is = inv_std[static_cast<size_t>(r)];
                S sum_dxhat = 0, sum_dxhat_xhat = 0;
                for (long i = 0; i < C; ++i) {
                    S xhat = (xb[i] - mu) * is;
                    S dxh = gb[i] * vg[i];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xhat;
                    if (gga) (*gga)[i] += gb[i] * xhat;
                    if (gbe) (*gbe)[i] += gb[i];
                }
                if (gx) {
                    S* gxb = gx->ptr() + r * C;
                    S invC = S(1) / static_cast<S>(C);
                    for (long i = 0; i < C; ++i) {
                        S xhat = (xb[i] - mu) * is;
                        S dxh = gb[i] * vg[i];
                        gxb[i] += is * (dxh - invC * (sum_dxhat + xhat * sum_dxhat_xhat));
                    }
                }
            }
        });
    return out;
}

// ---------------------------------------------------------------- resampling

struct ResizePlan {
    std::vector<long> i0, i1;
    std::vector<double> w1;  // weight of i1; weight of i0 is 1-w1
};

// align_corners=false; maps output center to input coordinates, edges clamped.
inline ResizePlan plan_bilinear(long in, long out) {
    ResizePlan p;
    p.i0.resize(static_cast<size_t>(out));
    p.i1.resize(static_cast<size_t>(out));
    p.w1.resize(static_cast<size_t>(out));
    double s = static_cast<double>(in) / static_cast<double>(out);
    for (long o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * s - 0.5;
        if (src < 0) src = 0;
        if (src > in - 1) src = static_cast<double>(in - 1);
        long f = static_cast<long>(std::floor(src));
        long c = std::min(f + 1, in - 1);
        p.i0[static_cast<size_t>(o)] = f;
        p.i1[static_cast<size_t>(o)] = c;
        p.w1[static_cast<size_t>(o)] = src - static_cast<double>(f);
    }
    return p;
}

template <class S>
int bilinear_resize(Tape<S>& t, int x, long OH, long OW) {
    const auto& vx = t.val(x);
    check(vx.rank() == 4, "bilinear_resize: x must be [N,C,H,W]");
    long N = vx.shape[0], C = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
    ResizePlan py = plan_bilinear(H, OH), px = plan_bilinear(W, OW);
    Tensor<S> y({N, C, OH, OW});
    for (long n = 0; n < N; ++n)
        for (long c = 0; c < C; ++c) {
            const S* src = vx.ptr() + (n * C + c) * H * W;
            S* dst = y.ptr() + (n * C + c) * OH * OW;
            for (long oy = 0; oy < OH; ++oy) {
                long y0 = py.i0[static_cast<size_t>(oy)], y1 = py.i1[static_cast<size_t>(oy)];
                S wy = static_cast<S>(py.w1[static_cast<size_t>(oy)]);
                for (long ox = 0; ox < OW; ++ox) {
                    long x0 = px.i0[static_cast<size_t>(ox)], x1 = px.i1[static_cast<size_t>(ox)];
                    S wx = static_cast<S>(px.w1[static_cast<size_t>(ox)]);
                    S v00 = src[y0 * W + x0], v01 = src[y0 * W + x1];
                    S v10 = src[y1 * W + x0], v11 = src[y1 * W + x1];
                    dst[oy * OW + ox] = (S(1) - wy) * ((S(1) - wx) * v00 + wx * v01) +
                                        wy * ((S(1) - wx) * v10 + wx * v11);
                }
            }
        }
    bool rg = t.requires_grad(x);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [x, out, N, C, H, W, OH, OW, py, px](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            if (auto* gx = tp.grad_buffer(x))
                for (long n = 0; n < N; ++n)
                    for (long c = 0; c < C; ++c) {
                        S* dst = gx->ptr() + (n * C + c) * H * W;
                        const S* g = gy.ptr() + (n * C + c) * OH * OW;
                        for (long oy = 0; oy < OH; ++oy) {
                            long y0 = py.i0[static_cast<size_t>(oy)];
                            long y1 = py.i1[static_cast<size_t>(oy)];
                            S wy = static_cast<S>(py.w1[static_cast<size_t>(oy)]);
                            for (long ox = 0; ox < OW; ++ox) {
                                long x0 = px.i0[static_cast<size_t>(ox)];
                                long x1 = px.i1[static_cast<size_t>(ox)];
                                S wx = static_cast<S>(px.w1[static_cast<size_t>(ox)]);
                                S gv = g[oy * OW + ox];
                                dst[y0 * W + x0] += (S(1) - wy) * (S(1) - wx) * gv;
                                dst[y0 * W + x1] += (S(1) - wy) * wx * gv;
                                dst[y1 * W + x0] += wy * (S(1) - wx) * gv;
                                dst[y1 * W + x1] += wy * wx * gv;
                            }
                        }
                    }
        });
    return out;
}

template <class S>
int upsample_nearest2(Tape<S>& t, int x) {
    const auto& vx = t.val(x);
    check(vx.rank() == 4, "upsample_nearest2: x must be [N,C,H,W]");
    long N = vx.shape[0], C = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
    Tensor<S> y({N, C, 2 * H, 2 * W});
    for (long nc = 0; nc < N * C; ++nc) {
        const S* src = vx.ptr() + nc * H * W;
        S* dst = y.ptr() + nc * 4 * H * W;
        for (long i = 0; i < H; ++i)
            for (long j = 0; j < W; ++j) {
                S v = src[i * W + j];
                long o = (2 * i) * 2 * W + 2 * j;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + 2 * W] = v;
                dst[o + 2 * W + 1] = v;
            }
    }
    bool rg = t.requires_grad(x);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [x, out, N, C, H, W](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            if (auto* gx = tp.grad_buffer(x))
                for (long nc = 0; nc < N * C; ++nc) {
                    S* dst = gx->ptr() + nc * H * W;
                    const S* g = gy.ptr() + nc * 4 * H * W;
                    for (long i = 0; i < H; ++i)
                        for (long j = 0; j < W; ++j) {
                            long o = (2 * i) * 2 * W + 2 * j;
                            dst[i * W + j] += g[o] + g[o + 1] + g[o + 2 * W] + g[o + 2 * W + 1];
                        }
                }
        });
    return out;
}

template <class S>
int global_avg_pool(Tape<S>& t, int x) {
    const auto& vx = t.val(x);
    check(vx.rank() == 4, "global_avg_pool: x must be [N,C,H,W]");
    long N = vx.shape[0], C = vx.shape[1], HW = vx.shape[2] * vx.shape[3];
    Tensor<S> y({N, C});
    for (long nc = 0; nc < N * C; ++nc) {
        const S* src = vx.ptr() + nc * HW;
        S acc = 0;
        for (long i = 0; i < HW; ++i) acc += src[i];
        y[nc] = acc / static_cast<S>(HW);
    }
    bool rg = t.requires_grad(x);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [x, out, N, C, HW](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            if (auto* gx = tp.grad_buffer(x))
                for (long nc = 0; nc < N * C; ++nc) {
                    S g = gy[nc] / static_cast<S>(HW);
                    S* dst = gx->ptr() + nc * HW;
                    for (long i = 0; i < HW; ++i) dst[i] += g;
                }
        });
    return out;
}

// ------------------------------------------------------------ gather / rows

template <class S>
int gather_rows(Tape<S>& t, int x, std::vector<long> idx) {
    const auto& vx = t.val(x);
    check(vx.rank() == 2, "gather_rows: x must be [R,C]");
    long R = vx.shape[0], C = vx.shape[1];
    for (long i : idx)
        if (i < 0 || i >= R) throw std::logic_error("gather_rows: index out of bounds");
    long K = static_cast<long>(idx.size());
    Tensor<S> y({K, C});
    for (long k = 0; k < K; ++k)
        std::copy_n(vx.ptr() + idx[static_cast<size_t>(k)] * C, C, y.ptr() + k * C);
    bool rg = t.requires_grad(x);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [x, out, idx = std::move(idx), C](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            if (auto* gx = tp.grad_buffer(x))
                for (size_t k = 0; k < idx.size(); ++k) {
                    S* dst = gx->ptr() + idx[k] * C;
                    const S* g = gy.ptr() + static_cast<long>(k) * C;
                    for (long i = 0; i < C; ++i) dst[i] += g[i];
                }
        });
    return out;
}

// out[r,:] = x[r,:] * s[r]; gradient reaches both the rows and the scales.
template <class S>
int scale_rows(Tape<S>& t, int x, int s) {
    const auto& vx = t.val(x);
    const auto& vs = t.val(s);
    check(vx.rank() == 2 && vs.numel() == vx.shape[0], "scale_rows: shapes");
    long R = vx.shape[0], C = vx.shape[1];
    Tensor<S> y(vx.shape);
    for (long r = 0; r < R; ++r)
        for (long c = 0; c < C; ++c) y.at(r, c) = vx.at(r, c) * vs[r];
    bool rg = t.requires_grad(x) || t.requires_grad(s);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [x, s, out, R, C](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            const auto& vx = tp.val(x);
            const auto& vs = tp.val(s);
            if (auto* gx = tp.grad_buffer(x))
                for (long r = 0; r < R; ++r)
                    for (long c = 0; c < C; ++c) gx->at(r, c) += gy.at(r, c) * vs[r];
            if (auto* gs = tp.grad_buffer(s))
                for (long r = 0; r < R; ++r) {
                    S acc = 0;
                    for (long c = 0; c < C; ++c) acc += gy.at(r, c) * vx.at(r, c);
                    (*gs)[r] += acc;
                }
        });
    return out;
}

template <class S>
int concat_rows(Tape<S>& t, int a, int b) {
    const auto& va = t.val(a);
    const auto& vb = t.val(b);
    check(va.rank() == 2 && vb.rank() == 2 && va.shape[1] == vb.shape[1], "concat_rows: shapes");
    long R1 = va.shape[0], R2 = vb.shape[0], C = va.shape[1];
    Tensor<S> y({R1 + R2, C});
    std::copy_n(va.ptr(), R1 * C, y.ptr());
    std::copy_n(vb.ptr(), R2 * C, y.ptr() + R1 * C);
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [a, b, out, R1, R2, C](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            if (auto* ga = tp.grad_buffer(a))
                for (long i = 0; i < R1 * C; ++i) (*ga)[i] += gy[i];
            if (auto* gb = tp.grad_buffer(b))
                for (long i = 0; i < R2 * C; ++i) (*gb)[i] += gy[R1 * C + i];
        });
    return out;
}

// a[B,n,c] ++ b[B,k,c] along the token axis -> [B,n+k,c]
template <class S>
int concat_tokens3(Tape<S>& t, int a, int b) {
    const auto& va = t.val(a);
    const auto& vb = t.val(b);
    check(va.rank() == 3 && vb.rank() == 3 && va.shape[0] == vb.shape[0] &&
              va.shape[2] == vb.shape[2],
          "concat_tokens3: shapes");
    long B = va.shape[0], n = va.shape[1], k = vb.shape[1], c = va.shape[2];
    Tensor<S> y({B, n + k, c});
    for (long i = 0; i < B; ++i) {
        std::copy_n(va.ptr() + i * n * c, n * c, y.ptr() + i * (n + k) * c);
        std::copy_n(vb.ptr() + i * k * c, k * c, y.ptr() + i * (n + k) * c + n * c);
    }
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [a, b, out, B, n, k, c](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            auto* ga = tp.grad_buffer(a);
            auto* gb = tp.grad_buffer(b);
            for (long i = 0; i < B; ++i) {
                const S* g = gy.ptr() + i * (n + k) * c;
                if (ga)
                    for (long j = 0; j < n * c; ++j) ga->ptr()[i * n * c + j] += g[j];
                if (gb)
                    for (long j = 0; j < k * c; ++j) gb->ptr()[i * k * c + j] += g[n * c + j];
            }
        });
    return out;
}

// Stack T tensors of identical shape [K,C] into [T,K,C].
template <class S>
int stack_rows(Tape<S>& t, const std::vector<int>& xs) {
    check(!xs.empty(), "stack_rows: empty input");
    const auto& v0 = t.val(xs[0]);
    check(v0.rank() == 2, "stack_rows: inputs must be 2D");
    long K = v0.shape[0], C = v0.shape[1];
    long T = static_cast<long>(xs.size());
    Tensor<S> y({T, K, C});
    bool rg = false;
    for (long i = 0; i < T; ++i) {
        const auto& vi = t.val(xs[static_cast<size_t>(i)]);
        check(vi.shape == v0.shape, "stack_rows: shape mismatch");
        std::copy_n(vi.ptr(), K * C, y.ptr() + i * K * C);
        rg = rg || t.requires_grad(xs[static_cast<size_t>(i)]);
    }
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [xs, out, K, C](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            for (size_t i = 0; i < xs.size(); ++i)
                if (auto* g = tp.grad_buffer(xs[i]))
                    for (long j = 0; j < K * C; ++j)
                        (*g)[j] += gy[static_cast<long>(i) * K * C + j];
        });
    return out;
}

template <class S>
int slice_rows(Tape<S>& t, int x, long start, long len) {
    const auto& vx = t.val(x);
    check(vx.rank() == 2 && start >= 0 && start + len <= vx.shape[0], "slice_rows: range");
    long C = vx.shape[1];
    Tensor<S> y({len, C});
    std::copy_n(vx.ptr() + start * C, len * C, y.ptr());
    bool rg = t.requires_grad(x);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [x, out, start, len, C](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            if (auto* gx = tp.grad_buffer(x))
                for (long i = 0; i < len * C; ++i) gx->ptr()[start * C + i] += gy[i];
        });
    return out;
}

// ---------------------------------------------------------------- broadcasts

// x[...,C] + b[C]
template <class S>
int add_bias_rows(Tape<S>& t, int x, int b) {
    const auto& vx = t.val(x);
    const auto& vb = t.val(b);
    long C = vx.shape.back();
    check(vb.numel() == C, "add_bias_rows: bias size");
    long R = vx.numel() / C;
    Tensor<S> y = vx;
    for (long r = 0; r < R; ++r)
        for (long c = 0; c < C; ++c) y.ptr()[r * C + c] += vb[c];
    bool rg = t.requires_grad(x) || t.requires_grad(b);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [x, b, out, R, C](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            tp.acc_grad(x, gy);
            if (auto* gb = tp.grad_buffer(b))
                for (long r = 0; r < R; ++r)
                    for (long c = 0; c < C; ++c) (*gb)[c] += gy.ptr()[r * C + c];
        });
    return out;
}

// x[N,C,H,W] + v[N,C] broadcast over spatial dims
template <class S>
int add_chan_nc(Tape<S>& t, int x, int v) {
    const auto& vx = t.val(x);
    const auto& vv = t.val(v);
    check(vx.rank() == 4 && vv.rank() == 2 && vv.shape[0] == vx.shape[0] &&
              vv.shape[1] == vx.shape[1],
          "add_chan_nc: shapes");
    long NC = vx.shape[0] * vx.shape[1], HW = vx.shape[2] * vx.shape[3];
    Tensor<S> y = vx;
    for (long nc = 0; nc < NC; ++nc) {
        S a = vv[nc];
        S* dst = y.ptr() + nc * HW;
        for (long i = 0; i < HW; ++i) dst[i] += a;
    }
    bool rg = t.requires_grad(x) || t.requires_grad(v);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [x, v, out, NC, HW](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            tp.acc_grad(x, gy);
            if (auto* gv = tp.grad_buffer(v))
                for (long nc = 0; nc < NC; ++nc) {
                    const S* g = gy.ptr() + nc * HW;
                    S acc = 0;
                    for (long i = 0; i < HW; ++i) acc += g[i];
                    (*gv)[nc] += acc;
                }
        });
    return out;
}

// x[B,n,c] + p[n,c] broadcast over batch
template <class S>
int add_broadcast_batch(Tape<S>& t, int x, int p) {
    const auto& vx = t.val(x);
    const auto& vp = t.val(p);
    check(vx.rank() == 3 && vp.rank() == 2 && vp.shape[0] == vx.shape[1] &&
              vp.shape[1] == vx.shape[2],
          "add_broadcast_batch: shapes");
    long B = vx.shape[0], nc = vp.numel();
    Tensor<S> y = vx;
    for (long i = 0; i < B; ++i) {
        S* dst = y.ptr() + i * nc;
        for (long j = 0; j < nc; ++j) dst[j] += vp[j];
    }
    bool rg = t.requires_grad(x) || t.requires_grad(p);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [x, p, out, B, nc](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            tp.acc_grad(x, gy);
            if (auto* gp = tp.grad_buffer(p))
                for (long i = 0; i < B; ++i)
                    for (long j = 0; j < nc; ++j) (*gp)[j] += gy.ptr()[i * nc + j];
        });
    return out;
}

// x[N,C,H,W] * m[N,1,H,W]; the correlation-map enhancement multiply.
template <class S>
int mul_spatial(Tape<S>& t, int x, int m) {
    const auto& vx = t.val(x);
    const auto& vm = t.val(m);
    check(vx.rank() == 4 && vm.rank() == 4 && vm.shape[0] == vx.shape[0] && vm.shape[1] == 1 &&
              vm.shape[2] == vx.shape[2] && vm.shape[3] == vx.shape[3],
          "mul_spatial: shapes " + vx.shape_str() + " vs " + vm.shape_str());
    long N = vx.shape[0], C = vx.shape[1], HW = vx.shape[2] * vx.shape[3];
    Tensor<S> y(vx.shape);
    for (long n = 0; n < N; ++n) {
        const S* mp = vm.ptr() + n * HW;
        for (long c = 0; c < C; ++c) {
            const S* src = vx.ptr() + (n * C + c) * HW;
            S* dst = y.ptr() + (n * C + c) * HW;
            for (long i = 0; i < HW; ++i) dst[i] = src[i] * mp[i];
        }
    }
    bool rg = t.requires_grad(x) || t.requires_grad(m);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [x, m, out, N, C, HW](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            const auto& vx = tp.val(x);
            const auto& vm = tp.val(m);
            if (auto* gx = tp.grad_buffer(x))
                for (long n = 0; n < N; ++n) {
                    const S* mp = vm.ptr() + n * HW;
                    for (long c = 0; c < C; ++c) {
                        const S* g = gy.ptr() + (n * C + c) * HW;
                        S* dst = gx->ptr() + (n * C + c) * HW;
                        for (long i = 0; i < HW; ++i) dst[i] += g[i] * mp[i];
                    }
                }
            if (auto* gm = tp.grad_buffer(m))
                for (long n = 0; n < N; ++n) {
                    S* dst = gm->ptr() + n * HW;
                    for (long c = 0; c < C; ++c) {
                        const S* g = gy.ptr() + (n * C + c) * HW;
                        const S* src = vx.ptr() + (n * C + c) * HW;
                        for (long i = 0; i < HW; ++i) dst[i] += g[i] * src[i];
                    }
                }
        });
    return out;
}

// ------------------------------------------------------------- normalization

template <class S>
int l2_normalize_rows(Tape<S>& t, int x, double eps = 1e-12) {
    const auto& vx = t.val(x);
    long C = vx.shape.back();
    long R = vx.numel() / C;
    Tensor<S> y(vx.shape);
    std::vector<S> inv_norm(static_cast<size_t>(R));
    for (long r = 0; r < R; ++r) {
        const S* xb = vx.ptr() + r * C;
        S acc = 0;
        for (long i = 0; i < C; ++i) acc += xb[i] * xb[i];
        S inv = S(1) / std::sqrt(acc + static_cast<S>(eps));
        inv_norm[static_cast<size_t>(r)] = inv;
        S* o = y.ptr() + r * C;
        for (long i = 0; i < C; ++i) o[i] = xb[i] * inv;
    }
    bool rg = t.requires_grad(x);
    int out = make_node(t, std::move(y), rg, nullptr);
    if (rg)
        t.set_back(out, [x, out, R, C, inv_norm](Tape<S>& tp) {
            const auto& gy = tp.grad(out);
            const auto& vy = tp.val(out);
            if (auto* gx = tp.grad_buffer(x))
                for (long r = 0; r < R; ++r) {
                    const S* g = gy.ptr() + r * C;
                    const S* yv = vy.ptr() + r * C;
                    S dot = 0;
                    for (long i = 0; i < C; ++i) dot += g[i] * yv[i];
                    S inv = inv_norm[static_cast<size_t>(r)];
                    S* dst = gx->ptr() + r * C;
                    for (long i = 0; i < C; ++i) dst[i] += inv * (g[i] - yv[i] * dot);
                }
        });
    return out;
}

}  // namespace refanim::ops
