#pragma once

#include <cassert>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "refanim/rng.hpp"

namespace refanim {

// Dense row-major tensor. Value semantics; copies copy the buffer.
template <class S>
struct Tensor {
    std::vector<long> shape;
    std::vector<S> data;

    Tensor() = default;
    explicit Tensor(std::vector<long> sh) : shape(std::move(sh)), data(count(shape), S(0)) {}
    Tensor(std::vector<long> sh, S fill) : shape(std::move(sh)), data(count(shape), fill) {}

    static long count(const std::vector<long>& sh) {
        long n = 1;
        for (long d : sh) n *= d;
        return n;
    }

    long numel() const { return static_cast<long>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    long dim(int i) const { return shape[static_cast<size_t>(i)]; }

    S* ptr() { return data.data(); }
    const S* ptr() const { return data.data(); }

    S& operator[](long i) { return data[static_cast<size_t>(i)]; }
    S operator[](long i) const { return data[static_cast<size_t>(i)]; }

    // 2D / 3D / 4D indexed access (row-major).
    S& at(long i, long j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    S at(long i, long j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }
    S& at(long i, long j, long k) {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    S at(long i, long j, long k) const {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    S& at(long i, long j, long k, long m) {
        return data[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + m)];
    }
    S at(long i, long j, long k, long m) const {
        return data[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + m)];
    }

    void fill(S v) { std::fill(data.begin(), data.end(), v); }

    Tensor reshaped(std::vector<long> sh) const {
        if (count(sh) != numel()) throw std::invalid_argument("reshape: element count mismatch");
        Tensor out = *this;
        out.shape = std::move(sh);
        return out;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << "]";
        return os.str();
    }

    static Tensor zeros(std::vector<long> sh) { return Tensor(std::move(sh)); }

    static Tensor full(std::vector<long> sh, S v) { return Tensor(std::move(sh), v); }

    static Tensor randn(std::vector<long> sh, Rng& rng, S stddev = S(1)) {
        Tensor t(std::move(sh));
        for (auto& v : t.data) v = static_cast<S>(rng.normal()) * stddev;
        return t;
    }

    static Tensor rand_uniform(std::vector<long> sh, Rng& rng, S lo, S hi) {
        Tensor t(std::move(sh));
        for (auto& v : t.data) v = static_cast<S>(rng.uniform(lo, hi));
        return t;
    }
};

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
    Tensor<To> out;
    out.shape = t.shape;
    out.data.resize(t.data.size());
    for (size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<To>(t.data[i]);
    return out;
}

template <class S>
S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    assert(a.same_shape(b));
    S m = 0;
    for (long i = 0; i < a.numel(); ++i) {
        S d = std::abs(a[i] - b[i]);
        if (d > m) m = d;
    }
    return m;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace refanim
