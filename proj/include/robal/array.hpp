#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace robal {

using Shape = std::vector<int>;

// Raised when an operand's values leave the op's domain (log of non-positive,
// division by zero, zero-norm feature, ...).
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when operand shapes do not conform.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);

// Dense multi-dimensional container of 64-bit reals with an optional
// gradient slot of identical shape.
struct Array {
    Shape shape;
    std::vector<double> v;
    std::vector<double> grad;  // empty when absent

    Array() = default;
    Array(Shape s, double fill);

    static Array zeros(Shape s) { return Array(std::move(s), 0.0); }
    static Array full(Shape s, double val) { return Array(std::move(s), val); }
    static Array scalar(double val);
    static Array from(Shape s, std::vector<double> vals);

    int64_t size() const { return static_cast<int64_t>(v.size()); }
    bool has_grad() const { return !grad.empty(); }
    void alloc_grad() { grad.assign(v.size(), 0.0); }

    double& at(int64_t i) { return v[static_cast<size_t>(i)]; }
    double at(int64_t i) const { return v[static_cast<size_t>(i)]; }
};

}  // namespace robal
