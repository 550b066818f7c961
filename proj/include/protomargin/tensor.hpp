#pragma once

// Dense row-major tensor of doubles, the substrate of all model math.
// Values are plain storage; differentiation lives on the Tape (tape.hpp),
// which attaches gradients to tensors that ask for them.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace protomargin {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("tensor dims must be positive");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

struct Tensor {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::optional<std::vector<double>> grad;

    Tensor() = default;

    Tensor(Shape s, std::vector<double> v, bool rg = false)
        : shape(std::move(s)), values(std::move(v)), requires_grad(rg) {
        if (values.size() != shape_numel(shape))
            throw std::invalid_argument("tensor value count " +
                                        std::to_string(values.size()) +
                                        " does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s, bool rg = false) {
        std::vector<double> v(shape_numel(s), 0.0);
        return Tensor(std::move(s), std::move(v), rg);
    }

    static Tensor full(Shape s, double value, bool rg = false) {
        std::vector<double> v(shape_numel(s), value);
        return Tensor(std::move(s), std::move(v), rg);
    }

    static Tensor scalar(double value, bool rg = false) {
        return Tensor(Shape{1}, {value}, rg);
    }

    std::size_t numel() const { return values.size(); }
    int dim(std::size_t i) const { return shape.at(i); }
    std::size_t rank() const { return shape.size(); }

    double& operator[](std::size_t i) { return values[i]; }
    double operator[](std::size_t i) const { return values[i]; }

    bool all_finite() const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void alloc_grad() {
        if (!grad) grad.emplace(values.size(), 0.0);
    }

    void zero_grad() {
        if (grad) std::fill(grad->begin(), grad->end(), 0.0);
    }
};

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

}  // namespace protomargin
