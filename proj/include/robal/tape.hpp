#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "robal/array.hpp"

namespace robal {

class Tape;

// Handle to a node on a tape.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Array& val() const;
    const Shape& shape() const;
    double scalar() const;
};

enum class Op : uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Conv2d,
    AvgPool2d,
    Reshape,
    Relu,
    Exp,
    Log,
    Tanh,
    Clamp,
    Scale,
    Broadcast,
    Sum,
    Mean,
    L2Norm,
    LogSoftmax,
    GatherRows,
};

struct ConvSpec {
    int stride = 1;
    int pad = 0;
};

struct Node {
    Op op = Op::Leaf;
    int a = -1;
    int b = -1;
    Array val;
    bool needs_grad = false;
    // op parameters
    double c0 = 0.0;  // scale factor / clamp lo
    double c1 = 0.0;  // clamp hi
    bool ta = false;  // matmul: transpose lhs
    bool tb = false;  // matmul: transpose rhs
    int axis = -1;
    std::vector<int> axes;
    std::vector<int> idx;  // gather row indices
    ConvSpec conv;
};

// Define-by-run tape: ops evaluate eagerly as they are recorded; one
// backward pass fills gradients of every tracked node exactly once,
// accumulating over fan-out. A tape and its arrays are a single-owner
// unit; independent tapes may run concurrently.
class Tape {
public:
    Var leaf(Array a, bool requires_grad = false);
    Var constant(Array a) { return leaf(std::move(a), false); }
    Var constant(double x) { return leaf(Array::scalar(x), false); }

    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);
    // (m,k)x(k,n) with optional transposes applied first
    Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
    // x: (B,Ci,H,W), k: (Co,Ci,KH,KW), zero padding
    Var conv2d(Var x, Var k, int stride = 1, int pad = 0);
    Var avgpool2d(Var x, int k);
    Var reshape(Var x, Shape s);
    Var relu(Var x);
    Var exp(Var x);
    Var log(Var x);
    Var tanh(Var x);
    Var clamp(Var x, double lo, double hi);
    Var scale(Var x, double c);
    Var broadcast_to(Var x, Shape s);
    Var sum(Var x, std::vector<int> axes);   // reduced axes removed
    Var mean(Var x, std::vector<int> axes);
    Var sum_all(Var x);
    Var mean_all(Var x);
    Var l2norm(Var x, int axis);  // keeps the axis with extent 1
    Var log_softmax(Var x, int axis);
    // x: (B,C), idx: one column index per row -> (B)
    Var gather_rows(Var x, const std::vector<int>& idx);

    void backward(Var out);

    const Array& val(int id) const { return nodes_[static_cast<size_t>(id)].val; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    bool has_grad(int id) const;
    const std::vector<double>& grad(int id) const;
    Array grad_array(int id) const;
    size_t size() const { return nodes_.size(); }

private:
    int push(Node n);
    Var unary(Op op, Var x, double c0 = 0.0, double c1 = 0.0);
    Var binary(Op op, Var a, Var b);
    Var reduce(Op op, Var x, std::vector<int> axes);
    void check_same_tape(Var a) const;
    void accumulate(int id, const std::vector<double>& g);
    void backward_node(int id, const std::vector<double>& g);

    // deque: recording new ops must not invalidate references handed out
    // through val()/shape()
    std::deque<Node> nodes_;
    std::vector<std::vector<double>> grads_;
};

inline const Array& Var::val() const { return tape->val(id); }
inline const Shape& Var::shape() const { return tape->val(id).shape; }
inline double Var::scalar() const { return tape->val(id).v.at(0); }

inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
inline Var operator/(Var a, Var b) { return a.tape->div(a, b); }

struct GradCheckReport {
    double max_rel_err = 0.0;
    int checked = 0;
    int skipped = 0;  // kink coordinates excluded from the check
};

// Central finite differences of a scalar-valued function against the tape
// gradient. Coordinates where the one-sided slopes disagree (relu/clamp
// kinks) are flagged as non-checkable and excluded.
GradCheckReport grad_check(const std::function<Var(Tape&, Var)>& fn, const Array& point,
                           double step);

}  // namespace robal
