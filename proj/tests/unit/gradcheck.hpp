#pragma once

// Finite-difference gradient oracle. Builds the graph twice per probed
// element with central differences in double precision and compares against
// the tape gradient. Stays deliberately independent of any backward code.

#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "refanim/ops.hpp"
#include "refanim/rng.hpp"
#include "refanim/tape.hpp"
#include "refanim/tensor.hpp"

namespace gradcheck {

using refanim::Rng;
using refanim::Tape;
using refanim::TensorD;

// build(tape, leaf_ids) must construct a scalar-valued node and return its id.
using BuildFn = std::function<int(Tape<double>&, const std::vector<int>&)>;

inline double eval_loss(const std::vector<TensorD>& inputs, const BuildFn& build) {
    Tape<double> t;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const auto& in : inputs) ids.push_back(t.leaf(in, false));
    int root = build(t, ids);
    return t.val(root)[0];
}

// Checks d(loss)/d(inputs[i]) for every element (or a deterministic subsample
// of max_probes elements per input when the tensor is large).
inline void check(std::vector<TensorD> inputs, const BuildFn& build, double tol = 1e-6,
                  double h = 1e-5, long max_probes = 400) {
    Tape<double> t;
    std::vector<int> ids;
    for (const auto& in : inputs) ids.push_back(t.leaf(in, true));
    int root = build(t, ids);
    REQUIRE(t.val(root).numel() == 1);
    t.backward(root);

    Rng probe_rng(0x9E3779B97F4A7C15ull);
    for (size_t i = 0; i < inputs.size(); ++i) {
        REQUIRE(t.has_grad(ids[i]));
        const TensorD& g = t.grad(ids[i]);
        long n = inputs[i].numel();
        std::vector<long> probes;
        if (n <= max_probes) {
            for (long e = 0; e < n; ++e) probes.push_back(e);
        } else {
            for (long k = 0; k < max_probes; ++k) probes.push_back(probe_rng.uniform_int(0, n - 1));
        }
        for (long e : probes) {
            double orig = inputs[i][e];
            inputs[i][e] = orig + h;
            double fp = eval_loss(inputs, build);
            inputs[i][e] = orig - h;
            double fm = eval_loss(inputs, build);
            inputs[i][e] = orig;
            double fd = (fp - fm) / (2.0 * h);
            double ad = g[e];
            double denom = std::max({1.0, std::fabs(fd), std::fabs(ad)});
            double rel = std::fabs(fd - ad) / denom;
            if (rel >= tol) {
                CAPTURE(i);
                CAPTURE(e);
                CAPTURE(fd);
                CAPTURE(ad);
            }
            REQUIRE(rel < tol);
        }
    }
}

// Weighted-sum reduction so per-element gradients are distinct: sum(x * w)
// with fixed pseudo-random weights derived from the node shape.
inline int weighted_sum(Tape<double>& t, int x) {
    Rng rng(refanim::derive_seed(0xABCDEF, {static_cast<uint64_t>(t.val(x).numel())}));
    TensorD w = TensorD::rand_uniform(t.val(x).shape, rng, 0.25, 1.75);
    int wid = t.leaf(std::move(w), false);
    return refanim::ops::sum_all(t, refanim::ops::mul(t, x, wid));
}

}  // namespace gradcheck
