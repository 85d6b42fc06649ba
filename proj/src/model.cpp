#include "robal/model.hpp"

#include <cmath>

namespace robal {

namespace {

Array init_matrix(int rows, int cols, double std, Rng& rng) {
    Array a = Array::zeros({rows, cols});
    for (double& v : a.v) v = std * rng.normal();
    return a;
}

Array init_conv(int co, int ci, int k, Rng& rng) {
    Array a = Array::zeros({co, ci, k, k});
    const double std = std::sqrt(2.0 / (ci * k * k));
    for (double& v : a.v) v = std * rng.normal();
    return a;
}

}  // namespace

Network Network::make_mlp(int in_dim, int hidden, int feat_dim, int classes, HeadKind kind,
                          double s, double gamma, uint64_t seed) {
    Network n;
    n.arch = Arch::Mlp;
    n.input_shape = {in_dim};
    n.hidden = hidden;
    n.feat_dim = feat_dim;
    n.classes = classes;
    n.head_kind = kind;
    n.cos_s = s;
    n.cos_gamma = gamma;
    Rng rng(derive_seed(seed, 0x494e4954ULL));  // "INIT"
    n.w0 = init_matrix(hidden, in_dim, std::sqrt(2.0 / in_dim), rng);
    n.b0 = Array::zeros({hidden});
    n.w1 = init_matrix(hidden, hidden, std::sqrt(2.0 / hidden), rng);
    n.b1 = Array::zeros({hidden});
    n.w2 = init_matrix(feat_dim, hidden, std::sqrt(2.0 / hidden), rng);
    n.b2 = Array::zeros({feat_dim});
    n.head_w = init_matrix(classes, feat_dim, std::sqrt(1.0 / feat_dim), rng);
    n.head_b = Array::zeros({classes});
    return n;
}

Network Network::make_conv(Shape input_shape, int feat_dim, int classes, HeadKind kind,
                           double s, double gamma, uint64_t seed) {
    if (input_shape.size() != 3)
        throw ShapeError("conv backbone expects per-sample shape (channels, H, W)");
    Network n;
    n.arch = Arch::Conv;
    n.input_shape = input_shape;
    n.feat_dim = feat_dim;
    n.classes = classes;
    n.head_kind = kind;
    n.cos_s = s;
    n.cos_gamma = gamma;
    const int ci = input_shape[0], h = input_shape[1], w = input_shape[2];
    if (h % 2 != 0 || w % 2 != 0) throw ShapeError("conv backbone needs even spatial extents");
    Rng rng(derive_seed(seed, 0x494e4954ULL));
    n.k1 = init_conv(8, ci, 3, rng);
    n.cb1 = Array::zeros({8});
    n.k2 = init_conv(16, 8, 3, rng);
    n.cb2 = Array::zeros({16});
    const int flat = 16 * (h / 2) * (w / 2);
    n.wd = init_matrix(feat_dim, flat, std::sqrt(2.0 / flat), rng);
    n.bd = Array::zeros({feat_dim});
    n.head_w = init_matrix(classes, feat_dim, std::sqrt(1.0 / feat_dim), rng);
    n.head_b = Array::zeros({classes});
    return n;
}

std::vector<ParamRef> Network::params() {
    std::vector<ParamRef> out;
    if (arch == Arch::Mlp) {
        out.push_back({"mlp.w0", &w0, true, false});
        out.push_back({"mlp.b0", &b0, true, false});
        out.push_back({"mlp.w1", &w1, true, false});
        out.push_back({"mlp.b1", &b1, true, false});
        out.push_back({"mlp.w2", &w2, true, false});
        out.push_back({"mlp.b2", &b2, true, false});
    } else {
        out.push_back({"conv.k1", &k1, true, false});
        out.push_back({"conv.b1", &cb1, true, false});
        out.push_back({"conv.k2", &k2, true, false});
        out.push_back({"conv.b2", &cb2, true, false});
        out.push_back({"conv.wd", &wd, true, false});
        out.push_back({"conv.bd", &bd, true, false});
    }
    out.push_back({"head.w", &head_w, true, true});
    if (head_kind == HeadKind::Linear) out.push_back({"head.b", &head_b, true, true});
    if (!lws_scales.v.empty()) out.push_back({"head.lws_s", &lws_scales, false, true});
    return out;
}

std::vector<const Array*> Network::param_arrays() const {
    auto self = const_cast<Network*>(this);
    std::vector<const Array*> out;
    for (const auto& p : self->params()) out.push_back(p.array);
    return out;
}

Network::Bound Network::bind(Tape& t, bool backbone_grad, bool head_grad) const {
    auto self = const_cast<Network*>(this);
    Bound bound;
    for (const auto& p : self->params())
        bound.vars.push_back(t.leaf(*p.array, p.head ? head_grad : backbone_grad));
    return bound;
}

Var Network::features(Tape& t, Var x, const Bound& bound) const {
    if (arch == Arch::Mlp) {
        Var h0 = t.matmul(x, bound.vars[0], false, true);
        h0 = t.add(h0, t.broadcast_to(t.reshape(bound.vars[1], {1, hidden}), h0.shape()));
        h0 = t.relu(h0);
        Var h1 = t.matmul(h0, bound.vars[2], false, true);
        h1 = t.add(h1, t.broadcast_to(t.reshape(bound.vars[3], {1, hidden}), h1.shape()));
        h1 = t.relu(h1);
        Var f = t.matmul(h1, bound.vars[4], false, true);
        return t.add(f, t.broadcast_to(t.reshape(bound.vars[5], {1, feat_dim}), f.shape()));
    }
    const int B = x.shape()[0];
    Var c1 = t.conv2d(x, bound.vars[0], 1, 1);
    c1 = t.add(c1, t.broadcast_to(t.reshape(bound.vars[1], {1, 8, 1, 1}), c1.shape()));
    c1 = t.relu(c1);
    Var c2 = t.conv2d(c1, bound.vars[2], 1, 1);
    c2 = t.add(c2, t.broadcast_to(t.reshape(bound.vars[3], {1, 16, 1, 1}), c2.shape()));
    c2 = t.relu(c2);
    Var p = t.avgpool2d(c2, 2);
    const Shape& ps = p.shape();
    Var flat = t.reshape(p, {B, ps[1] * ps[2] * ps[3]});
    Var f = t.matmul(flat, bound.vars[4], false, true);
    return t.add(f, t.broadcast_to(t.reshape(bound.vars[5], {1, feat_dim}), f.shape()));
}

Var Network::features_const(Tape& t, Var x) const {
    Bound bound = bind(t, false, false);
    return features(t, x, bound);
}

Var Network::head_logits(Tape& t, Var f, const Bound& bound) const {
    const int wi = backbone_param_count();
    if (head_kind == HeadKind::Linear) {
        Var z = t.matmul(f, bound.vars[static_cast<size_t>(wi)], false, true);
        Var bias = t.reshape(bound.vars[static_cast<size_t>(wi) + 1], {1, classes});
        return t.add(z, t.broadcast_to(bias, z.shape()));
    }
    return t.scale(head_cos(t, f, bound), cos_s);
}

Var Network::head_cos(Tape& t, Var f, const Bound& bound) const {
    if (head_kind != HeadKind::Cosine)
        throw std::invalid_argument("head_cos requires a cosine head");
    return cosine_scores_from(t, bound.vars[static_cast<size_t>(backbone_param_count())],
                              cos_gamma, f);
}

LinearHead Network::linear_head_view() const {
    if (head_kind != HeadKind::Linear)
        throw std::invalid_argument("network does not use a linear head");
    return LinearHead{head_w, head_b};
}

CosineHead Network::cosine_head_view() const {
    if (head_kind != HeadKind::Cosine)
        throw std::invalid_argument("network does not use a cosine head");
    return CosineHead{head_w, cos_s, cos_gamma};
}

HeadRef Network::head_ref(LinearHead& lin_storage, CosineHead& cos_storage) const {
    HeadRef ref;
    if (head_kind == HeadKind::Linear) {
        lin_storage = linear_head_view();
        ref.linear = &lin_storage;
    } else {
        cos_storage = cosine_head_view();
        ref.cosine = &cos_storage;
    }
    return ref;
}

}  // namespace robal
