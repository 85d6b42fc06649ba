#include "robal/tape.hpp"

#include <algorithm>
#include <cmath>

namespace robal {

namespace {

void axis_split(const Shape& s, int axis, int64_t& outer, int64_t& n, int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    n = s[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

// Maps every linear index of `to` onto a linear index of `from` under
// right-aligned broadcasting. Throws if the shapes are incompatible.
std::vector<int64_t> broadcast_map(const Shape& from, const Shape& to) {
    const int rf = static_cast<int>(from.size());
    const int rt = static_cast<int>(to.size());
    if (rf > rt)
        throw ShapeError("cannot broadcast " + shape_str(from) + " to lower-rank " + shape_str(to));
    std::vector<int64_t> from_stride(static_cast<size_t>(rt), 0);
    int64_t stride = 1;
    for (int i = rf - 1; i >= 0; --i) {
        const int fd = from[static_cast<size_t>(i)];
        const int td = to[static_cast<size_t>(i + rt - rf)];
        if (fd != td && fd != 1)
            throw ShapeError("cannot broadcast " + shape_str(from) + " to " + shape_str(to));
        from_stride[static_cast<size_t>(i + rt - rf)] = (fd == 1) ? 0 : stride;
        stride *= fd;
    }
    std::vector<int64_t> map(static_cast<size_t>(numel(to)));
    std::vector<int> mi(static_cast<size_t>(rt), 0);
    for (size_t o = 0; o < map.size(); ++o) {
        int64_t f = 0;
        for (int d = 0; d < rt; ++d) f += mi[static_cast<size_t>(d)] * from_stride[static_cast<size_t>(d)];
        map[o] = f;
        for (int d = rt - 1; d >= 0; --d) {
            if (++mi[static_cast<size_t>(d)] < to[static_cast<size_t>(d)]) break;
            mi[static_cast<size_t>(d)] = 0;
        }
    }
    return map;
}

// Maps every linear index of the input onto the linear index of the
// reduced output (given axes removed).
std::vector<int64_t> reduce_map(const Shape& in, const std::vector<int>& axes, Shape& out_shape) {
    std::vector<bool> reduced(in.size(), false);
    for (int a : axes) {
        if (a < 0 || a >= static_cast<int>(in.size()))
            throw ShapeError("reduction axis " + std::to_string(a) + " out of range for " +
                             shape_str(in));
        reduced[static_cast<size_t>(a)] = true;
    }
    out_shape.clear();
    for (size_t i = 0; i < in.size(); ++i)
        if (!reduced[i]) out_shape.push_back(in[i]);
    if (out_shape.empty()) out_shape = {1};

    std::vector<int64_t> out_stride(in.size(), 0);
    int64_t stride = 1;
    for (int i = static_cast<int>(in.size()) - 1; i >= 0; --i) {
        if (!reduced[static_cast<size_t>(i)]) {
            out_stride[static_cast<size_t>(i)] = stride;
            stride *= in[static_cast<size_t>(i)];
        }
    }
    std::vector<int64_t> map(static_cast<size_t>(numel(in)));
    std::vector<int> mi(in.size(), 0);
    for (size_t o = 0; o < map.size(); ++o) {
        int64_t f = 0;
        for (size_t d = 0; d < in.size(); ++d) f += mi[d] * out_stride[d];
        map[o] = f;
        for (int d = static_cast<int>(in.size()) - 1; d >= 0; --d) {
            if (++mi[static_cast<size_t>(d)] < in[static_cast<size_t>(d)]) break;
            mi[static_cast<size_t>(d)] = 0;
        }
    }
    return map;
}

}  // namespace

int Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::check_same_tape(Var a) const {
    if (a.tape != this || a.id < 0 || a.id >= static_cast<int>(nodes_.size()))
        throw std::runtime_error("Var does not belong to this tape");
}

Var Tape::leaf(Array a, bool requires_grad) {
    Node n;
    n.op = Op::Leaf;
    n.val = std::move(a);
    n.needs_grad = requires_grad;
    return Var{this, push(std::move(n))};
}

Var Tape::binary(Op op, Var a, Var b) {
    check_same_tape(a);
    check_same_tape(b);
    const Array& av = val(a.id);
    const Array& bv = val(b.id);
    if (!same_shape(av.shape, bv.shape))
        throw ShapeError("elementwise op shape mismatch: " + shape_str(av.shape) + " vs " +
                         shape_str(bv.shape));
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = nodes_[static_cast<size_t>(a.id)].needs_grad ||
                   nodes_[static_cast<size_t>(b.id)].needs_grad;
    n.val = Array::zeros(av.shape);
    const size_t sz = av.v.size();
    switch (op) {
        case Op::Add:
            for (size_t i = 0; i < sz; ++i) n.val.v[i] = av.v[i] + bv.v[i];
            break;
        case Op::Sub:
            for (size_t i = 0; i < sz; ++i) n.val.v[i] = av.v[i] - bv.v[i];
            break;
        case Op::Mul:
            for (size_t i = 0; i < sz; ++i) n.val.v[i] = av.v[i] * bv.v[i];
            break;
        case Op::Div:
            for (size_t i = 0; i < sz; ++i) {
                if (bv.v[i] == 0.0) throw DomainError("division by zero");
                n.val.v[i] = av.v[i] / bv.v[i];
            }
            break;
        default:
            throw std::runtime_error("bad binary op");
    }
    return Var{this, push(std::move(n))};
}

Var Tape::add(Var a, Var b) { return binary(Op::Add, a, b); }
Var Tape::sub(Var a, Var b) { return binary(Op::Sub, a, b); }
Var Tape::mul(Var a, Var b) { return binary(Op::Mul, a, b); }
Var Tape::div(Var a, Var b) { return binary(Op::Div, a, b); }

Var Tape::unary(Op op, Var x, double c0, double c1) {
    check_same_tape(x);
    const Array& xv = val(x.id);
    Node n;
    n.op = op;
    n.a = x.id;
    n.c0 = c0;
    n.c1 = c1;
    n.needs_grad = nodes_[static_cast<size_t>(x.id)].needs_grad;
    n.val = Array::zeros(xv.shape);
    const size_t sz = xv.v.size();
    switch (op) {
        case Op::Relu:
            for (size_t i = 0; i < sz; ++i) n.val.v[i] = xv.v[i] > 0.0 ? xv.v[i] : 0.0;
            break;
        case Op::Exp:
            for (size_t i = 0; i < sz; ++i) n.val.v[i] = std::exp(xv.v[i]);
            break;
        case Op::Log:
            for (size_t i = 0; i < sz; ++i) {
                if (xv.v[i] <= 0.0) throw DomainError("log of non-positive value");
                n.val.v[i] = std::log(xv.v[i]);
            }
            break;
        case Op::Tanh:
            for (size_t i = 0; i < sz; ++i) n.val.v[i] = std::tanh(xv.v[i]);
            break;
        case Op::Clamp:
            for (size_t i = 0; i < sz; ++i) n.val.v[i] = std::min(std::max(xv.v[i], c0), c1);
            break;
        case Op::Scale:
            for (size_t i = 0; i < sz; ++i) n.val.v[i] = c0 * xv.v[i];
            break;
        default:
            throw std::runtime_error("bad unary op");
    }
    return Var{this, push(std::move(n))};
}

Var Tape::relu(Var x) { return unary(Op::Relu, x); }
Var Tape::exp(Var x) { return unary(Op::Exp, x); }
Var Tape::log(Var x) { return unary(Op::Log, x); }
Var Tape::tanh(Var x) { return unary(Op::Tanh, x); }
Var Tape::clamp(Var x, double lo, double hi) { return unary(Op::Clamp, x, lo, hi); }
Var Tape::scale(Var x, double c) { return unary(Op::Scale, x, c); }

Var Tape::matmul(Var a, Var b, bool trans_a, bool trans_b) {
    check_same_tape(a);
    check_same_tape(b);
    const Array& av = val(a.id);
    const Array& bv = val(b.id);
    if (av.shape.size() != 2 || bv.shape.size() != 2)
        throw ShapeError("matmul expects rank-2 operands, got " + shape_str(av.shape) + " and " +
                         shape_str(bv.shape));
    const int64_t m = trans_a ? av.shape[1] : av.shape[0];
    const int64_t ka = trans_a ? av.shape[0] : av.shape[1];
    const int64_t kb = trans_b ? bv.shape[1] : bv.shape[0];
    const int64_t nn = trans_b ? bv.shape[0] : bv.shape[1];
    if (ka != kb)
        throw ShapeError("matmul inner dimensions mismatch: " + shape_str(av.shape) +
                         (trans_a ? "^T" : "") + " x " + shape_str(bv.shape) +
                         (trans_b ? "^T" : ""));
    Node n;
    n.op = Op::MatMul;
    n.a = a.id;
    n.b = b.id;
    n.ta = trans_a;
    n.tb = trans_b;
    n.needs_grad = nodes_[static_cast<size_t>(a.id)].needs_grad ||
                   nodes_[static_cast<size_t>(b.id)].needs_grad;
    n.val = Array::zeros({static_cast<int>(m), static_cast<int>(nn)});
    const double* ap = av.v.data();
    const double* bp = bv.v.data();
    const int64_t a1 = av.shape[1];
    const int64_t b1 = bv.shape[1];
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < nn; ++j) {
            double acc = 0.0;
            for (int64_t l = 0; l < ka; ++l) {
                const double x = trans_a ? ap[l * a1 + i] : ap[i * a1 + l];
                const double y = trans_b ? bp[j * b1 + l] : bp[l * b1 + j];
                acc += x * y;
            }
            n.val.v[static_cast<size_t>(i * nn + j)] = acc;
        }
    }
    return Var{this, push(std::move(n))};
}

Var Tape::conv2d(Var x, Var k, int stride, int pad) {
    check_same_tape(x);
    check_same_tape(k);
    const Array& xv = val(x.id);
    const Array& kv = val(k.id);
    if (xv.shape.size() != 4 || kv.shape.size() != 4)
        throw ShapeError("conv2d expects rank-4 input and kernel, got " + shape_str(xv.shape) +
                         " and " + shape_str(kv.shape));
    if (xv.shape[1] != kv.shape[1])
        throw ShapeError("conv2d channel mismatch: input " + shape_str(xv.shape) + " kernel " +
                         shape_str(kv.shape));
    if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
    const int B = xv.shape[0], Ci = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    const int Co = kv.shape[0], KH = kv.shape[2], KW = kv.shape[3];
    const int OH = (H + 2 * pad - KH) / stride + 1;
    const int OW = (W + 2 * pad - KW) / stride + 1;
    if (OH < 1 || OW < 1)
        throw ShapeError("conv2d output would be empty for input " + shape_str(xv.shape));
    Node n;
    n.op = Op::Conv2d;
    n.a = x.id;
    n.b = k.id;
    n.conv = {stride, pad};
    n.needs_grad = nodes_[static_cast<size_t>(x.id)].needs_grad ||
                   nodes_[static_cast<size_t>(k.id)].needs_grad;
    n.val = Array::zeros({B, Co, OH, OW});
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Co; ++co)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) {
                    double acc = 0.0;
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int kh = 0; kh < KH; ++kh)
                            for (int kw = 0; kw < KW; ++kw) {
                                const int ih = oh * stride - pad + kh;
                                const int iw = ow * stride - pad + kw;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += xv.v[static_cast<size_t>(((b * Ci + ci) * H + ih) * W + iw)] *
                                       kv.v[static_cast<size_t>(((co * Ci + ci) * KH + kh) * KW + kw)];
                            }
                    n.val.v[static_cast<size_t>(((b * Co + co) * OH + oh) * OW + ow)] = acc;
                }
    return Var{this, push(std::move(n))};
}

Var Tape::avgpool2d(Var x, int k) {
    check_same_tape(x);
    const Array& xv = val(x.id);
    if (xv.shape.size() != 4) throw ShapeError("avgpool2d expects rank-4 input");
    const int B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    if (k < 1 || H % k != 0 || W % k != 0)
        throw ShapeError("avgpool2d window " + std::to_string(k) + " must divide " +
                         shape_str(xv.shape));
    const int OH = H / k, OW = W / k;
    Node n;
    n.op = Op::AvgPool2d;
    n.a = x.id;
    n.axis = k;
    n.needs_grad = nodes_[static_cast<size_t>(x.id)].needs_grad;
    n.val = Array::zeros({B, C, OH, OW});
    const double inv = 1.0 / (k * k);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) {
                    double acc = 0.0;
                    for (int dh = 0; dh < k; ++dh)
                        for (int dw = 0; dw < k; ++dw)
                            acc += xv.v[static_cast<size_t>(
                                ((b * C + c) * H + oh * k + dh) * W + ow * k + dw)];
                    n.val.v[static_cast<size_t>(((b * C + c) * OH + oh) * OW + ow)] = acc * inv;
                }
    return Var{this, push(std::move(n))};
}

Var Tape::reshape(Var x, Shape s) {
    check_same_tape(x);
    const Array& xv = val(x.id);
    if (numel(s) != xv.size())
        throw ShapeError("reshape from " + shape_str(xv.shape) + " to " + shape_str(s) +
                         " changes element count");
    Node n;
    n.op = Op::Reshape;
    n.a = x.id;
    n.needs_grad = nodes_[static_cast<size_t>(x.id)].needs_grad;
    n.val.shape = std::move(s);
    n.val.v = xv.v;
    return Var{this, push(std::move(n))};
}

Var Tape::broadcast_to(Var x, Shape s) {
    check_same_tape(x);
    const Array& xv = val(x.id);
    const auto map = broadcast_map(xv.shape, s);
    Node n;
    n.op = Op::Broadcast;
    n.a = x.id;
    n.needs_grad = nodes_[static_cast<size_t>(x.id)].needs_grad;
    n.val.shape = std::move(s);
    n.val.v.resize(map.size());
    for (size_t i = 0; i < map.size(); ++i) n.val.v[i] = xv.v[static_cast<size_t>(map[i])];
    return Var{this, push(std::move(n))};
}

Var Tape::reduce(Op op, Var x, std::vector<int> axes) {
    check_same_tape(x);
    const Array& xv = val(x.id);
    Shape out_shape;
    const auto map = reduce_map(xv.shape, axes, out_shape);
    int64_t count = 1;
    for (int a : axes) count *= xv.shape[static_cast<size_t>(a)];
    Node n;
    n.op = op;
    n.a = x.id;
    n.axes = std::move(axes);
    n.needs_grad = nodes_[static_cast<size_t>(x.id)].needs_grad;
    n.val = Array::zeros(out_shape);
    for (size_t i = 0; i < map.size(); ++i) n.val.v[static_cast<size_t>(map[i])] += xv.v[i];
    if (op == Op::Mean) {
        const double inv = 1.0 / static_cast<double>(count);
        for (double& v : n.val.v) v *= inv;
    }
    n.c0 = static_cast<double>(count);
    return Var{this, push(std::move(n))};
}

Var Tape::sum(Var x, std::vector<int> axes) { return reduce(Op::Sum, x, std::move(axes)); }
Var Tape::mean(Var x, std::vector<int> axes) { return reduce(Op::Mean, x, std::move(axes)); }

Var Tape::sum_all(Var x) {
    std::vector<int> axes(val(x.id).shape.size());
    for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
    return sum(x, axes);
}

Var Tape::mean_all(Var x) {
    std::vector<int> axes(val(x.id).shape.size());
    for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
    return mean(x, axes);
}

Var Tape::l2norm(Var x, int axis) {
    check_same_tape(x);
    const Array& xv = val(x.id);
    if (axis < 0 || axis >= static_cast<int>(xv.shape.size()))
        throw ShapeError("l2norm axis out of range for " + shape_str(xv.shape));
    int64_t outer, nn, inner;
    axis_split(xv.shape, axis, outer, nn, inner);
    Shape os = xv.shape;
    os[static_cast<size_t>(axis)] = 1;
    Node n;
    n.op = Op::L2Norm;
    n.a = x.id;
    n.axis = axis;
    n.needs_grad = nodes_[static_cast<size_t>(x.id)].needs_grad;
    n.val = Array::zeros(os);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t k = 0; k < inner; ++k) {
            double acc = 0.0;
            for (int64_t j = 0; j < nn; ++j) {
                const double v = xv.v[static_cast<size_t>((o * nn + j) * inner + k)];
                acc += v * v;
            }
            n.val.v[static_cast<size_t>(o * inner + k)] = std::sqrt(acc);
        }
    return Var{this, push(std::move(n))};
}

Var Tape::log_softmax(Var x, int axis) {
    check_same_tape(x);
    const Array& xv = val(x.id);
    if (axis < 0 || axis >= static_cast<int>(xv.shape.size()))
        throw ShapeError("log_softmax axis out of range for " + shape_str(xv.shape));
    int64_t outer, nn, inner;
    axis_split(xv.shape, axis, outer, nn, inner);
    Node n;
    n.op = Op::LogSoftmax;
    n.a = x.id;
    n.axis = axis;
    n.needs_grad = nodes_[static_cast<size_t>(x.id)].needs_grad;
    n.val = Array::zeros(xv.shape);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t k = 0; k < inner; ++k) {
            double mx = -HUGE_VAL;
            for (int64_t j = 0; j < nn; ++j)
                mx = std::max(mx, xv.v[static_cast<size_t>((o * nn + j) * inner + k)]);
            double acc = 0.0;
            for (int64_t j = 0; j < nn; ++j)
                acc += std::exp(xv.v[static_cast<size_t>((o * nn + j) * inner + k)] - mx);
            const double lse = mx + std::log(acc);
            for (int64_t j = 0; j < nn; ++j) {
                const size_t i = static_cast<size_t>((o * nn + j) * inner + k);
                n.val.v[i] = xv.v[i] - lse;
            }
        }
    return Var{this, push(std::move(n))};
}

Var Tape::gather_rows(Var x, const std::vector<int>& idx) {
    check_same_tape(x);
    const Array& xv = val(x.id);
    if (xv.shape.size() != 2) throw ShapeError("gather_rows expects a rank-2 input");
    const int B = xv.shape[0], C = xv.shape[1];
    if (static_cast<int>(idx.size()) != B)
        throw ShapeError("gather_rows index count " + std::to_string(idx.size()) +
                         " does not match rows " + std::to_string(B));
    Node n;
    n.op = Op::GatherRows;
    n.a = x.id;
    n.idx = idx;
    n.needs_grad = nodes_[static_cast<size_t>(x.id)].needs_grad;
    n.val = Array::zeros({B});
    for (int b = 0; b < B; ++b) {
        if (idx[static_cast<size_t>(b)] < 0 || idx[static_cast<size_t>(b)] >= C)
            throw ShapeError("gather_rows index out of range");
        n.val.v[static_cast<size_t>(b)] =
            xv.v[static_cast<size_t>(b * C + idx[static_cast<size_t>(b)])];
    }
    return Var{this, push(std::move(n))};
}

bool Tape::has_grad(int id) const {
    return id >= 0 && id < static_cast<int>(grads_.size()) &&
           !grads_[static_cast<size_t>(id)].empty();
}

const std::vector<double>& Tape::grad(int id) const {
    if (!has_grad(id)) throw std::runtime_error("no gradient recorded for node");
    return grads_[static_cast<size_t>(id)];
}

Array Tape::grad_array(int id) const {
    Array g = Array::zeros(val(id).shape);
    if (has_grad(id)) g.v = grads_[static_cast<size_t>(id)];
    return g;
}

void Tape::accumulate(int id, const std::vector<double>& g) {
    auto& slot = grads_[static_cast<size_t>(id)];
    if (slot.empty()) {
        slot = g;
    } else {
        for (size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
    }
}

void Tape::backward(Var out) {
    check_same_tape(out);
    if (val(out.id).size() != 1)
        throw ShapeError("backward requires a scalar output, got " +
                         shape_str(val(out.id).shape));
    grads_.assign(nodes_.size(), {});
    if (!nodes_[static_cast<size_t>(out.id)].needs_grad) return;
    grads_[static_cast<size_t>(out.id)] = {1.0};
    for (int i = out.id; i >= 0; --i) {
        if (!nodes_[static_cast<size_t>(i)].needs_grad) continue;
        if (grads_[static_cast<size_t>(i)].empty()) continue;
        backward_node(i, grads_[static_cast<size_t>(i)]);
    }
}

void Tape::backward_node(int id, const std::vector<double>& g) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    auto wants = [&](int in) {
        return in >= 0 && nodes_[static_cast<size_t>(in)].needs_grad;
    };
    switch (n.op) {
        case Op::Leaf:
            return;
        case Op::Add: {
            if (wants(n.a)) accumulate(n.a, g);
            if (wants(n.b)) accumulate(n.b, g);
            return;
        }
        case Op::Sub: {
            if (wants(n.a)) accumulate(n.a, g);
            if (wants(n.b)) {
                std::vector<double> gb(g.size());
                for (size_t i = 0; i < g.size(); ++i) gb[i] = -g[i];
                accumulate(n.b, gb);
            }
            return;
        }
        case Op::Mul: {
            const auto& av = val(n.a).v;
            const auto& bv = val(n.b).v;
            if (wants(n.a)) {
                std::vector<double> ga(g.size());
                for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bv[i];
                accumulate(n.a, ga);
            }
            if (wants(n.b)) {
                std::vector<double> gb(g.size());
                for (size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * av[i];
                accumulate(n.b, gb);
            }
            return;
        }
        case Op::Div: {
            const auto& av = val(n.a).v;
            const auto& bv = val(n.b).v;
            if (wants(n.a)) {
                std::vector<double> ga(g.size());
                for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] / bv[i];
                accumulate(n.a, ga);
            }
            if (wants(n.b)) {
                std::vector<double> gb(g.size());
                for (size_t i = 0; i < g.size(); ++i) gb[i] = -g[i] * av[i] / (bv[i] * bv[i]);
                accumulate(n.b, gb);
            }
            return;
        }
        case Op::MatMul: {
            const Array& A = val(n.a);
            const Array& B = val(n.b);
            const int64_t m = n.val.shape[0], nn = n.val.shape[1];
            const int64_t k = n.ta ? A.shape[0] : A.shape[1];
            const int64_t a1 = A.shape[1], b1 = B.shape[1];
            if (wants(n.a)) {
                std::vector<double> ga(A.v.size(), 0.0);
                // dA'[i,l] = sum_j G[i,j] * B'[l,j]
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t l = 0; l < k; ++l) {
                        double acc = 0.0;
                        for (int64_t j = 0; j < nn; ++j) {
                            const double bvv = n.tb ? B.v[static_cast<size_t>(j * b1 + l)]
                                                    : B.v[static_cast<size_t>(l * b1 + j)];
                            acc += g[static_cast<size_t>(i * nn + j)] * bvv;
                        }
                        if (n.ta)
                            ga[static_cast<size_t>(l * a1 + i)] += acc;
                        else
                            ga[static_cast<size_t>(i * a1 + l)] += acc;
                    }
                accumulate(n.a, ga);
            }
            if (wants(n.b)) {
                std::vector<double> gb(B.v.size(), 0.0);
                // dB'[l,j] = sum_i A'[i,l] * G[i,j]
                for (int64_t l = 0; l < k; ++l)
                    for (int64_t j = 0; j < nn; ++j) {
                        double acc = 0.0;
                        for (int64_t i = 0; i < m; ++i) {
                            const double avv = n.ta ? A.v[static_cast<size_t>(l * a1 + i)]
                                                    : A.v[static_cast<size_t>(i * a1 + l)];
                            acc += avv * g[static_cast<size_t>(i * nn + j)];
                        }
                        if (n.tb)
                            gb[static_cast<size_t>(j * b1 + l)] += acc;
                        else
                            gb[static_cast<size_t>(l * b1 + j)] += acc;
                    }
                accumulate(n.b, gb);
            }
            return;
        }
        case Op::Conv2d: {
            const Array& X = val(n.a);
            const Array& K = val(n.b);
            const int B = X.shape[0], Ci = X.shape[1], H = X.shape[2], W = X.shape[3];
            const int Co = K.shape[0], KH = K.shape[2], KW = K.shape[3];
            const int OH = n.val.shape[2], OW = n.val.shape[3];
            const int stride = n.conv.stride, pad = n.conv.pad;
            std::vector<double> gx, gk;
            const bool wx = wants(n.a), wk = wants(n.b);
            if (wx) gx.assign(X.v.size(), 0.0);
            if (wk) gk.assign(K.v.size(), 0.0);
            for (int b = 0; b < B; ++b)
                for (int co = 0; co < Co; ++co)
                    for (int oh = 0; oh < OH; ++oh)
                        for (int ow = 0; ow < OW; ++ow) {
                            const double go =
                                g[static_cast<size_t>(((b * Co + co) * OH + oh) * OW + ow)];
                            if (go == 0.0) continue;
                            for (int ci = 0; ci < Ci; ++ci)
                                for (int kh = 0; kh < KH; ++kh)
                                    for (int kw = 0; kw < KW; ++kw) {
                                        const int ih = oh * stride - pad + kh;
                                        const int iw = ow * stride - pad + kw;
                                        if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                        const size_t xi = static_cast<size_t>(
                                            ((b * Ci + ci) * H + ih) * W + iw);
                                        const size_t ki = static_cast<size_t>(
                                            ((co * Ci + ci) * KH + kh) * KW + kw);
                                        if (wx) gx[xi] += go * K.v[ki];
                                        if (wk) gk[ki] += go * X.v[xi];
                                    }
                        }
            if (wx) accumulate(n.a, gx);
            if (wk) accumulate(n.b, gk);
            return;
        }
        case Op::AvgPool2d: {
            if (!wants(n.a)) return;
            const Array& X = val(n.a);
            const int B = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
            const int k = n.axis;
            const int OH = H / k, OW = W / k;
            const double inv = 1.0 / (k * k);
            std::vector<double> gx(X.v.size(), 0.0);
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c)
                    for (int oh = 0; oh < OH; ++oh)
                        for (int ow = 0; ow < OW; ++ow) {
                            const double go =
                                g[static_cast<size_t>(((b * C + c) * OH + oh) * OW + ow)] * inv;
                            for (int dh = 0; dh < k; ++dh)
                                for (int dw = 0; dw < k; ++dw)
                                    gx[static_cast<size_t>(((b * C + c) * H + oh * k + dh) * W +
                                                           ow * k + dw)] += go;
                        }
            accumulate(n.a, gx);
            return;
        }
        case Op::Reshape: {
            if (wants(n.a)) accumulate(n.a, g);
            return;
        }
        case Op::Relu: {
            if (!wants(n.a)) return;
            const auto& xv = val(n.a).v;
            std::vector<double> gx(g.size());
            for (size_t i = 0; i < g.size(); ++i) gx[i] = xv[i] > 0.0 ? g[i] : 0.0;
            accumulate(n.a, gx);
            return;
        }
        case Op::Exp: {
            if (!wants(n.a)) return;
            std::vector<double> gx(g.size());
            for (size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * n.val.v[i];
            accumulate(n.a, gx);
            return;
        }
        case Op::Log: {
            if (!wants(n.a)) return;
            const auto& xv = val(n.a).v;
            std::vector<double> gx(g.size());
            for (size_t i = 0; i < g.size(); ++i) gx[i] = g[i] / xv[i];
            accumulate(n.a, gx);
            return;
        }
        case Op::Tanh: {
            if (!wants(n.a)) return;
            std::vector<double> gx(g.size());
            for (size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * (1.0 - n.val.v[i] * n.val.v[i]);
            accumulate(n.a, gx);
            return;
        }
        case Op::Clamp: {
            if (!wants(n.a)) return;
            const auto& xv = val(n.a).v;
            std::vector<double> gx(g.size());
            for (size_t i = 0; i < g.size(); ++i)
                gx[i] = (xv[i] > n.c0 && xv[i] < n.c1) ? g[i] : 0.0;
            accumulate(n.a, gx);
            return;
        }
        case Op::Scale: {
            if (!wants(n.a)) return;
            std::vector<double> gx(g.size());
            for (size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * n.c0;
            accumulate(n.a, gx);
            return;
        }
        case Op::Broadcast: {
            if (!wants(n.a)) return;
            const Array& X = val(n.a);
            // recompute the index map; broadcasts are rare enough
            std::vector<double> gx(X.v.size(), 0.0);
            const auto map = broadcast_map(X.shape, n.val.shape);
            for (size_t i = 0; i < map.size(); ++i) gx[static_cast<size_t>(map[i])] += g[i];
            accumulate(n.a, gx);
            return;
        }
        case Op::Sum:
        case Op::Mean: {
            if (!wants(n.a)) return;
            const Array& X = val(n.a);
            Shape os;
            const auto map = reduce_map(X.shape, n.axes, os);
            const double f = n.op == Op::Mean ? 1.0 / n.c0 : 1.0;
            std::vector<double> gx(X.v.size());
            for (size_t i = 0; i < map.size(); ++i) gx[i] = g[static_cast<size_t>(map[i])] * f;
            accumulate(n.a, gx);
            return;
        }
        case Op::L2Norm: {
            if (!wants(n.a)) return;
            const Array& X = val(n.a);
            int64_t outer, nn, inner;
            axis_split(X.shape, n.axis, outer, nn, inner);
            std::vector<double> gx(X.v.size(), 0.0);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t k = 0; k < inner; ++k) {
                    const double norm = n.val.v[static_cast<size_t>(o * inner + k)];
                    if (norm == 0.0) continue;  // subgradient 0 at the origin
                    const double go = g[static_cast<size_t>(o * inner + k)];
                    for (int64_t j = 0; j < nn; ++j) {
                        const size_t i = static_cast<size_t>((o * nn + j) * inner + k);
                        gx[i] = go * X.v[i] / norm;
                    }
                }
            accumulate(n.a, gx);
            return;
        }
        case Op::LogSoftmax: {
            if (!wants(n.a)) return;
            const Array& X = val(n.a);
            int64_t outer, nn, inner;
            axis_split(X.shape, n.axis, outer, nn, inner);
            std::vector<double> gx(X.v.size());
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t k = 0; k < inner; ++k) {
                    double gs = 0.0;
                    for (int64_t j = 0; j < nn; ++j)
                        gs += g[static_cast<size_t>((o * nn + j) * inner + k)];
                    for (int64_t j = 0; j < nn; ++j) {
                        const size_t i = static_cast<size_t>((o * nn + j) * inner + k);
                        gx[i] = g[i] - std::exp(n.val.v[i]) * gs;
                    }
                }
            accumulate(n.a, gx);
            return;
        }
        case Op::GatherRows: {
            if (!wants(n.a)) return;
            const Array& X = val(n.a);
            const int C = X.shape[1];
            std::vector<double> gx(X.v.size(), 0.0);
            for (size_t b = 0; b < n.idx.size(); ++b)
                gx[b * static_cast<size_t>(C) + static_cast<size_t>(n.idx[b])] += g[b];
            accumulate(n.a, gx);
            return;
        }
    }
}

GradCheckReport grad_check(const std::function<Var(Tape&, Var)>& fn, const Array& point,
                           double step) {
    Tape t0;
    Var x0 = t0.leaf(point, true);
    Var y0 = fn(t0, x0);
    if (y0.val().size() != 1) throw ShapeError("grad_check requires a scalar-valued function");
    const double f0 = y0.scalar();
    t0.backward(y0);
    std::vector<double> analytic(point.v.size(), 0.0);
    if (t0.has_grad(x0.id)) analytic = t0.grad(x0.id);

    auto eval = [&](const Array& p) {
        Tape t;
        Var x = t.leaf(p, false);
        return fn(t, x).scalar();
    };

    GradCheckReport rep;
    Array p = point;
    for (size_t i = 0; i < point.v.size(); ++i) {
        const double orig = p.v[i];
        p.v[i] = orig + step;
        const double fp = eval(p);
        p.v[i] = orig - step;
        const double fm = eval(p);
        p.v[i] = orig;
        const double slope_r = (fp - f0) / step;
        const double slope_l = (f0 - fm) / step;
        if (std::abs(slope_r - slope_l) >
            1e-3 * (1.0 + std::abs(slope_r) + std::abs(slope_l))) {
            ++rep.skipped;  // one-sided slopes disagree: kink, not checkable
            continue;
        }
        const double central = (fp - fm) / (2.0 * step);
        const double rel =
            std::abs(analytic[i] - central) / std::max(1.0, std::abs(analytic[i]));
        rep.max_rel_err = std::max(rep.max_rel_err, rel);
        ++rep.checked;
    }
    return rep;
}

}  // namespace robal
