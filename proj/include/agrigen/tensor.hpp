#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "agrigen/common.hpp"

namespace agrigen {

// ----------------------------------------------------------------------------
// Dense row-major tensor of doubles. All arithmetic in the project is 64-bit;
// checkpoints quantize to float32 at the serialization boundary.
// ----------------------------------------------------------------------------

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), 0.0) {}
    Tensor(std::vector<int> s, double fill) : shape(std::move(s)), data(count(shape), fill) {}
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<size_t>(count(shape)) != data.size())
            throw ShapeError("tensor data length does not match shape");
    }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw ShapeError("negative dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, double v) { return Tensor(std::move(s), v); }
    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // NCHW accessor.
    double& at4(int n, int c, int h, int w) {
        return data[static_cast<size_t>(((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    double at4(int n, int c, int h, int w) const {
        return data[static_cast<size_t>(((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    // CHW accessor.
    double& at3(int c, int h, int w) {
        return data[static_cast<size_t>((static_cast<int64_t>(c) * shape[1] + h) * shape[2] + w)];
    }
    double at3(int c, int h, int w) const {
        return data[static_cast<size_t>((static_cast<int64_t>(c) * shape[1] + h) * shape[2] + w)];
    }
    // Matrix accessor.
    double& at2(int r, int c) { return data[static_cast<size_t>(static_cast<int64_t>(r) * shape[1] + c)]; }
    double at2(int r, int c) const { return data[static_cast<size_t>(static_cast<int64_t>(r) * shape[1] + c)]; }

    Tensor reshaped(std::vector<int> s) const {
        if (count(s) != size()) throw ShapeError("reshape changes element count");
        Tensor out;
        out.shape = std::move(s);
        out.data = data;
        return out;
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double sum() const { return std::accumulate(data.begin(), data.end(), 0.0); }
    double mean() const { return data.empty() ? 0.0 : sum() / static_cast<double>(data.size()); }

    double sq_norm() const {
        double s = 0.0;
        for (double v : data) s += v * v;
        return s;
    }
    double norm() const { return std::sqrt(sq_norm()); }

    /// Rounds every element through float32. Mirrors what checkpoint
    /// serialization does, so in-memory evaluation can match a reloaded file.
    void quantize_f32() {
        for (double& v : data) v = static_cast<double>(static_cast<float>(v));
    }

    uint64_t checksum() const {
        uint64_t h = fnv1a64(shape.data(), shape.size() * sizeof(int));
        return fnv1a64(data.data(), data.size() * sizeof(double), h);
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << ']';
        return os.str();
    }
};

// Elementwise helpers used outside the autodiff tape (schedule math, tests).

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = a;
    for (int64_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a;
    for (int64_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out = a;
    for (double& v : out.data) v *= c;
    return out;
}

inline Tensor axpy(double a, const Tensor& x, const Tensor& y) {
    check_same_shape(x, y, "axpy");
    Tensor out = y;
    for (int64_t i = 0; i < out.size(); ++i) out[i] += a * x[i];
    return out;
}

inline double dot(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "dot");
    double s = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace agrigen
