#include "robal/array.hpp"

#include <sstream>

namespace robal {

int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

Array::Array(Shape s, double fill) : shape(std::move(s)) {
    for (int d : shape) {
        if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    }
    v.assign(static_cast<size_t>(numel(shape)), fill);
}

Array Array::scalar(double val) {
    Array a;
    a.shape = {1};
    a.v = {val};
    return a;
}

Array Array::from(Shape s, std::vector<double> vals) {
    Array a;
    a.shape = std::move(s);
    if (numel(a.shape) != static_cast<int64_t>(vals.size()))
        throw ShapeError("value count " + std::to_string(vals.size()) + " does not match shape " +
                         shape_str(a.shape));
    a.v = std::move(vals);
    return a;
}

}  // namespace robal
