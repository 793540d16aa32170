#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace focal3d {

// Dense n-dimensional double array with an optional same-shape gradient slot.
// Row-major layout; last extent is contiguous.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> v;
    std::vector<double> grad;  // empty means "no gradient attached"

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), v(numel_of(shape), 0.0) {}
    Tensor(std::vector<int64_t> s, std::vector<double> values) : shape(std::move(s)), v(std::move(values)) {
        if (static_cast<int64_t>(v.size()) != numel_of(shape))
            throw std::invalid_argument("Tensor: values length does not match shape");
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t e : s) {
            if (e < 0) throw std::invalid_argument("Tensor: negative extent");
            n *= e;
        }
        return n;
    }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int64_t> s, double value) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }

    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void ensure_grad() {
        if (grad.size() != v.size()) grad.assign(v.size(), 0.0);
    }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
    void drop_grad() { grad.clear(); }

    // Flat offset helpers for the common 3-D/4-D layouts.
    int64_t off3(int64_t a, int64_t b, int64_t c) const { return (a * shape[1] + b) * shape[2] + c; }
    int64_t off4(int64_t a, int64_t b, int64_t c, int64_t d) const {
        return ((a * shape[1] + b) * shape[2] + c) * shape[3] + d;
    }

    double& at3(int64_t a, int64_t b, int64_t c) { return v[static_cast<size_t>(off3(a, b, c))]; }
    double at3(int64_t a, int64_t b, int64_t c) const { return v[static_cast<size_t>(off3(a, b, c))]; }
    double& at4(int64_t a, int64_t b, int64_t c, int64_t d) { return v[static_cast<size_t>(off4(a, b, c, d))]; }
    double at4(int64_t a, int64_t b, int64_t c, int64_t d) const { return v[static_cast<size_t>(off4(a, b, c, d))]; }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }
};

}  // namespace focal3d
