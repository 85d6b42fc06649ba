#pragma once

#include <string>
#include <vector>

#include "robal/heads.hpp"
#include "robal/rng.hpp"
#include "robal/tape.hpp"

namespace robal {

struct ParamRef {
    std::string name;
    Array* array;
    bool weight_decay;  // scale vectors are exempt
    bool head;          // belongs to the classifier head
};

// Toy backbone + head pair. The MLP is in->hidden->hidden->feature with
// relu on the hidden layers and a linear feature layer; the conv net is
// two padded 3x3 convs, a 2x2 average pool and a dense feature layer.
// Features are the input to the head.
struct Network {
    enum class Arch { Mlp, Conv };
    enum class HeadKind { Linear, Cosine };

    Arch arch = Arch::Mlp;
    Shape input_shape;  // per-sample shape
    int hidden = 64;
    int feat_dim = 16;
    int classes = 10;

    // mlp parameters
    Array w0, b0, w1, b1, w2, b2;
    // conv parameters
    Array k1, cb1, k2, cb2, wd, bd;

    HeadKind head_kind = HeadKind::Linear;
    Array head_w;  // (C, feat)
    Array head_b;  // (C), linear head only
    double cos_s = 10.0;
    double cos_gamma = 0.0;
    Array lws_scales;  // per-class inference scales; empty until learned

    static Network make_mlp(int in_dim, int hidden, int feat_dim, int classes, HeadKind kind,
                            double s, double gamma, uint64_t seed);
    static Network make_conv(Shape input_shape, int feat_dim, int classes, HeadKind kind,
                             double s, double gamma, uint64_t seed);

    std::vector<ParamRef> params();
    std::vector<const Array*> param_arrays() const;

    struct Bound {
        std::vector<Var> vars;  // aligned with params() order
    };
    // Adds one leaf per parameter; backbone/head gradient tracking is
    // controlled separately so fine-tuning can freeze the backbone.
    Bound bind(Tape& t, bool backbone_grad, bool head_grad) const;

    Var features(Tape& t, Var x, const Bound& bound) const;
    Var features_const(Tape& t, Var x) const;  // parameters as constants

    // Base inference logits from bound parameters: W f + b for the linear
    // head, s * cos(theta) for the cosine head.
    Var head_logits(Tape& t, Var f, const Bound& bound) const;
    Var head_cos(Tape& t, Var f, const Bound& bound) const;  // cosine head only

    LinearHead linear_head_view() const;
    CosineHead cosine_head_view() const;
    HeadRef head_ref(LinearHead& lin_storage, CosineHead& cos_storage) const;

    int backbone_param_count() const { return 6; }
    std::string arch_name() const { return arch == Arch::Mlp ? "mlp" : "conv"; }
    std::string head_name() const {
        return head_kind == HeadKind::Linear ? "linear" : "cosine";
    }
};

}  // namespace robal
