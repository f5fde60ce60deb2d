#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "punet/common.hpp"
#include "punet/rng.hpp"

namespace punet {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
        if (d < 0) throw validation_error("tensor shape has negative dim");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

// Dense row-major double tensor. Deliberately minimal: the autodiff layer owns
// all math; Tensor is storage plus a few fill/compare helpers.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), 0.0) {}
    Tensor(Shape s, double fill)
        : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), fill) {}

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }

    static Tensor from(Shape s, std::vector<double> values) {
        Tensor t;
        t.shape = std::move(s);
        if (static_cast<std::int64_t>(values.size()) != shape_numel(t.shape))
            throw validation_error("tensor init: value count does not match shape " + shape_str(t.shape));
        t.data = std::move(values);
        return t;
    }

    static Tensor randn(Shape s, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = rng.normal(0.0, stddev);
        return t;
    }

    static Tensor rand_uniform(Shape s, Rng& rng, double lo, double hi) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = rng.uniform(lo, hi);
        return t;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int dim(std::size_t i) const { return shape.at(i); }
    std::size_t ndim() const { return shape.size(); }

    double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    double& at2(int r, int c) { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
    double at2(int r, int c) const { return data[static_cast<std::size_t>(r) * shape[1] + c]; }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw validation_error("reshape: numel mismatch " + shape_str(shape) + " -> " + shape_str(s));
        Tensor t = *this;
        t.shape = std::move(s);
        return t;
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double abs_max() const {
        double m = 0.0;
        for (double v : data) m = std::max(m, std::fabs(v));
        return m;
    }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b)) throw validation_error("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace punet
