#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "refanim/ops.hpp"

using namespace refanim;
namespace op = refanim::ops;
using gradcheck::weighted_sum;

namespace {

TensorD randn_t(std::vector<long> sh, uint64_t seed) {
    Rng rng(seed);
    return TensorD::randn(std::move(sh), rng);
}

// Naive direct convolution used as an independent forward oracle.
TensorD conv2d_naive(const TensorD& x, const TensorD& w, const TensorD& b, long stride,
                     long pad) {
    long N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    long OC = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    long OH = (H + 2 * pad - kh) / stride + 1;
    long OW = (W + 2 * pad - kw) / stride + 1;
    TensorD y({N, OC, OH, OW});
    for (long n = 0; n < N; ++n)
        for (long oc = 0; oc < OC; ++oc)
            for (long oh = 0; oh < OH; ++oh)
                for (long ow = 0; ow < OW; ++ow) {
                    double acc = b[oc];
                    for (long c = 0; c < C; ++c)
                        for (long i = 0; i < kh; ++i)
                            for (long j = 0; j < kw; ++j) {
                                long ih = oh * stride + i - pad;
                                long iw = ow * stride + j - pad;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x.at(n, c, ih, iw) * w.at(oc, c, i, j);
                            }
                    y.at(n, oc, oh, ow) = acc;
                }
    return y;
}

}  // namespace

TEST_CASE("elementwise ops: forward and gradients") {
    TensorD a = randn_t({3, 4}, 11), b = randn_t({3, 4}, 12);
    gradcheck::check({a, b}, [](Tape<double>& t, const std::vector<int>& in) {
        int s = op::add(t, in[0], in[1]);
        int d = op::sub(t, s, in[1]);
        int m = op::mul(t, d, in[1]);
        int sc = op::scale(t, m, 0.37);
        int si = op::silu(t, sc);
        return weighted_sum(t, si);
    });
}

TEST_CASE("reshape and slicing gradients") {
    TensorD a = randn_t({4, 6}, 13);
    gradcheck::check({a}, [](Tape<double>& t, const std::vector<int>& in) {
        int r = op::reshape(t, in[0], {2, 12});
        int s = op::slice_rows(t, op::reshape(t, r, {8, 3}), 2, 5);
        return weighted_sum(t, s);
    });
}

TEST_CASE("matmul matches manual product and gradients pass") {
    TensorD a = randn_t({3, 5}, 21), b = randn_t({5, 4}, 22);
    Tape<double> t;
    int ia = t.leaf(a, false), ib = t.leaf(b, false);
    int y = op::matmul(t, ia, ib);
    for (long i = 0; i < 3; ++i)
        for (long j = 0; j < 4; ++j) {
            double acc = 0;
            for (long k = 0; k < 5; ++k) acc += a.at(i, k) * b.at(k, j);
            CHECK(t.val(y).at(i, j) == doctest::Approx(acc).epsilon(1e-12));
        }
    gradcheck::check({a, b}, [](Tape<double>& tp, const std::vector<int>& in) {
        return weighted_sum(tp, op::matmul(tp, in[0], in[1]));
    });
}

TEST_CASE("bmm and transpose gradients") {
    TensorD a = randn_t({2, 3, 4}, 23), b = randn_t({2, 4, 5}, 24);
    gradcheck::check({a, b}, [](Tape<double>& t, const std::vector<int>& in) {
        int y = op::bmm(t, in[0], in[1]);
        int yt = op::transpose_last2(t, y);
        return weighted_sum(t, yt);
    });
}

TEST_CASE("softmax rows sum to one; gradients pass") {
    TensorD a = randn_t({2, 3, 6}, 31);
    Tape<double> t;
    int y = op::softmax_lastdim(t, t.leaf(a, false));
    for (long r = 0; r < 6; ++r) {
        double s = 0;
        for (long i = 0; i < 6; ++i) s += t.val(y)[r * 6 + i];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    gradcheck::check({a}, [](Tape<double>& tp, const std::vector<int>& in) {
        return weighted_sum(tp, op::softmax_lastdim(tp, in[0]));
    });
}

TEST_CASE("reductions and mse") {
    TensorD a = randn_t({3, 7}, 41), b = randn_t({3, 7}, 42);
    Tape<double> t;
    int m = op::mse(t, t.leaf(a, false), t.leaf(b, false));
    double ref = 0;
    for (long i = 0; i < a.numel(); ++i) ref += (a[i] - b[i]) * (a[i] - b[i]);
    ref /= static_cast<double>(a.numel());
    CHECK(t.val(m)[0] == doctest::Approx(ref).epsilon(1e-12));

    gradcheck::check({a, b}, [](Tape<double>& tp, const std::vector<int>& in) {
        return op::mse(tp, in[0], in[1]);
    });
    gradcheck::check({a}, [](Tape<double>& tp, const std::vector<int>& in) {
        return op::mean_all(tp, in[0]);
    });
}

TEST_CASE("conv2d matches naive convolution") {
    TensorD x = randn_t({2, 3, 6, 5}, 51), w = randn_t({4, 3, 3, 3}, 52), b = randn_t({4}, 53);
    for (long stride : {1L, 2L})
        for (long pad : {0L, 1L}) {
            Tape<double> t;
            int y = op::conv2d(t, t.leaf(x, false), t.leaf(w, false), t.leaf(b, false), stride,
                               pad);
            TensorD ref = conv2d_naive(x, w, b, stride, pad);
            REQUIRE(t.val(y).shape == ref.shape);
            CHECK(max_abs_diff(t.val(y), ref) < 1e-12);
        }
}

TEST_CASE("conv2d gradients: stride 1 and stride 2") {
    TensorD x = randn_t({2, 3, 5, 4}, 54), w = randn_t({4, 3, 3, 3}, 55), b = randn_t({4}, 56);
    for (long stride : {1L, 2L})
        gradcheck::check({x, w, b}, [stride](Tape<double>& t, const std::vector<int>& in) {
            return weighted_sum(t, op::conv2d(t, in[0], in[1], in[2], stride, 1));
        });
}

TEST_CASE("conv2d 1x1 gradients") {
    TensorD x = randn_t({2, 5, 4, 4}, 57), w = randn_t({3, 5, 1, 1}, 58), b = randn_t({3}, 59);
    gradcheck::check({x, w, b}, [](Tape<double>& t, const std::vector<int>& in) {
        return weighted_sum(t, op::conv2d(t, in[0], in[1], in[2], 1, 0));
    });
}

TEST_CASE("group_norm normalizes per group and gradients pass") {
    TensorD x = randn_t({2, 6, 3, 3}, 61);
    TensorD gamma = TensorD::full({6}, 1.0), beta = TensorD::zeros({6});
    Tape<double> t;
    int y = op::group_norm(t, t.leaf(x, false), t.leaf(gamma, false), t.leaf(beta, false), 3);
    const TensorD& vy = t.val(y);
    for (long n = 0; n < 2; ++n)
        for (long g = 0; g < 3; ++g) {
            double mu = 0, var = 0;
            for (long c = 0; c < 2; ++c)
                for (long i = 0; i < 9; ++i) mu += vy.at(n, g * 2 + c, i / 3, i % 3);
            mu /= 18.0;
            for (long c = 0; c < 2; ++c)
                for (long i = 0; i < 9; ++i) {
                    double d = vy.at(n, g * 2 + c, i / 3, i % 3) - mu;
                    var += d * d;
                }
            var /= 18.0;
            CHECK(mu == doctest::Approx(0.0).epsilon(1e-10));
            CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
        }
    TensorD gamma_r = randn_t({6}, 62), beta_r = randn_t({6}, 63);
    gradcheck::check({x, gamma_r, beta_r}, [](Tape<double>& tp, const std::vector<int>& in) {
        return weighted_sum(tp, op::group_norm(tp, in[0], in[1], in[2], 3));
    });
}

TEST_CASE("layer_norm gradients") {
    TensorD x = randn_t({2, 5, 8}, 71), gamma = randn_t({8}, 72), beta = randn_t({8}, 73);
    gradcheck::check({x, gamma, beta}, [](Tape<double>& t, const std::vector<int>& in) {
        return weighted_sum(t, op::layer_norm(t, in[0], in[1], in[2]));
    });
}

TEST_CASE("bilinear_resize: same-size is identity, up/down gradients pass") {
    TensorD x = randn_t({1, 2, 5, 7}, 81);
    Tape<double> t;
    int y = op::bilinear_resize(t, t.leaf(x, false), 5, 7);
    CHECK(max_abs_diff(t.val(y), x) == 0.0);

    for (auto [oh, ow] : std::vector<std::pair<long, long>>{{3, 4}, {9, 10}})
        gradcheck::check({x}, [oh = oh, ow = ow](Tape<double>& tp, const std::vector<int>& in) {
            return weighted_sum(tp, op::bilinear_resize(tp, in[0], oh, ow));
        });
}

TEST_CASE("bilinear_resize: constant image stays constant") {
    TensorD x = TensorD::full({1, 1, 4, 4}, 3.25);
    Tape<double> t;
    int y = op::bilinear_resize(t, t.leaf(x, false), 7, 9);
    for (long i = 0; i < t.val(y).numel(); ++i)
        CHECK(t.val(y)[i] == doctest::Approx(3.25).epsilon(1e-12));
}

TEST_CASE("upsample_nearest2 forward and gradients") {
    TensorD x = randn_t({2, 3, 3, 4}, 91);
    Tape<double> t;
    int y = op::upsample_nearest2(t, t.leaf(x, false));
    for (long n = 0; n < 2; ++n)
        for (long c = 0; c < 3; ++c)
            for (long i = 0; i < 6; ++i)
                for (long j = 0; j < 8; ++j)
                    CHECK(t.val(y).at(n, c, i, j) == x.at(n, c, i / 2, j / 2));
    gradcheck::check({x}, [](Tape<double>& tp, const std::vector<int>& in) {
        return weighted_sum(tp, op::upsample_nearest2(tp, in[0]));
    });
}

TEST_CASE("global_avg_pool gradients") {
    TensorD x = randn_t({2, 4, 3, 5}, 101);
    gradcheck::check({x}, [](Tape<double>& t, const std::vector<int>& in) {
        return weighted_sum(t, op::global_avg_pool(t, in[0]));
    });
}

TEST_CASE("gather_rows with duplicate indices accumulates gradient") {
    TensorD x = randn_t({6, 3}, 111);
    std::vector<long> idx{4, 0, 4, 2};  // row 4 selected twice
    gradcheck::check({x}, [idx](Tape<double>& t, const std::vector<int>& in) {
        return weighted_sum(t, op::gather_rows(t, in[0], idx));
    });
    Tape<double> t;
    int g = op::gather_rows(t, t.leaf(x, false), idx);
    for (long k = 0; k < 4; ++k)
        for (long c = 0; c < 3; ++c) CHECK(t.val(g).at(k, c) == x.at(idx[(size_t)k], c));
}

TEST_CASE("gather_rows out-of-bounds throws") {
    TensorD x = randn_t({4, 2}, 112);
    Tape<double> t;
    int ix = t.leaf(x, false);
    CHECK_THROWS_AS(op::gather_rows(t, ix, {0, 4}), std::logic_error);
}

TEST_CASE("scale_rows gradients reach rows and scales") {
    TensorD x = randn_t({5, 4}, 121), s = randn_t({5}, 122);
    gradcheck::check({x, s}, [](Tape<double>& t, const std::vector<int>& in) {
        return weighted_sum(t, op::scale_rows(t, in[0], in[1]));
    });
}

TEST_CASE("concat and stack gradients") {
    TensorD a = randn_t({3, 4}, 131), b = randn_t({2, 4}, 132);
    gradcheck::check({a, b}, [](Tape<double>& t, const std::vector<int>& in) {
        return weighted_sum(t, op::concat_rows(t, in[0], in[1]));
    });
    TensorD c = randn_t({2, 3, 5}, 133), d = randn_t({2, 4, 5}, 134);
    gradcheck::check({c, d}, [](Tape<double>& t, const std::vector<int>& in) {
        return weighted_sum(t, op::concat_tokens3(t, in[0], in[1]));
    });
    TensorD e = randn_t({3, 2}, 135), f = randn_t({3, 2}, 136);
    gradcheck::check({e, f}, [](Tape<double>& t, const std::vector<int>& in) {
        return weighted_sum(t, op::stack_rows(t, {in[0], in[1]}));
    });
}

TEST_CASE("broadcast adds: bias, channel, batch") {
    TensorD x = randn_t({2, 3, 4}, 141), bias = randn_t({4}, 142);
    gradcheck::check({x, bias}, [](Tape<double>& t, const std::vector<int>& in) {
        return weighted_sum(t, op::add_bias_rows(t, in[0], in[1]));
    });
    TensorD x4 = randn_t({2, 3, 4, 4}, 143), v = randn_t({2, 3}, 144);
    gradcheck::check({x4, v}, [](Tape<double>& t, const std::vector<int>& in) {
        return weighted_sum(t, op::add_chan_nc(t, in[0], in[1]));
    });
    TensorD x3 = randn_t({3, 4, 5}, 145), p = randn_t({4, 5}, 146);
    gradcheck::check({x3, p}, [](Tape<double>& t, const std::vector<int>& in) {
        return weighted_sum(t, op::add_broadcast_batch(t, in[0], in[1]));
    });
}

TEST_CASE("mul_spatial gradients") {
    TensorD x = randn_t({2, 3, 4, 5}, 151), m = randn_t({2, 1, 4, 5}, 152);
    gradcheck::check({x, m}, [](Tape<double>& t, const std::vector<int>& in) {
        return weighted_sum(t, op::mul_spatial(t, in[0], in[1]));
    });
}

TEST_CASE("l2_normalize_rows: unit norms and gradients") {
    TensorD x = randn_t({4, 6}, 161);
    Tape<double> t;
    int y = op::l2_normalize_rows(t, t.leaf(x, false));
    for (long r = 0; r < 4; ++r) {
        double acc = 0;
        for (long c = 0; c < 6; ++c) acc += t.val(y).at(r, c) * t.val(y).at(r, c);
        CHECK(acc == doctest::Approx(1.0).epsilon(1e-10));
    }
    gradcheck::check({x}, [](Tape<double>& tp, const std::vector<int>& in) {
        return weighted_sum(tp, op::l2_normalize_rows(tp, in[0]));
    });
}

TEST_CASE("composite graph: shared subexpression gradient accumulates") {
    TensorD a = randn_t({3, 3}, 171);
    // loss = sum(w1*(a*a)) + sum(w2*(a+a)); a feeds three edges
    gradcheck::check({a}, [](Tape<double>& t, const std::vector<int>& in) {
        int sq = op::mul(t, in[0], in[0]);
        int dbl = op::add(t, in[0], in[0]);
        int l1 = weighted_sum(t, sq);
        int l2 = weighted_sum(t, dbl);
        return op::add(t, l1, l2);
    });
}

TEST_CASE("shape mismatch throws") {
    Tape<double> t;
    int a = t.leaf(randn_t({2, 3}, 181), false);
    int b = t.leaf(randn_t({3, 2}, 182), false);
    CHECK_THROWS_AS(op::add(t, a, b), std::invalid_argument);
    CHECK_THROWS_AS(op::bmm(t, a, b), std::invalid_argument);
}
