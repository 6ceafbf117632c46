#ifndef RPNET_NN_HPP
#define RPNET_NN_HPP

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "rpnet/autograd.hpp"

namespace rpnet {

/// Per-forward context: train/eval switch plus the dropout RNG owned by the
/// training loop.
struct ForwardCtx {
    bool training = false;
    std::mt19937* rng = nullptr;
};

using NamedBuffer = std::pair<std::string, Tensor*>;

struct Module {
    virtual ~Module() = default;
    virtual void collect_params(std::vector<Param*>& out) = 0;
    /// Non-learnable state that still belongs in a checkpoint (BN running
    /// statistics).
    virtual void collect_buffers(std::vector<NamedBuffer>&) {}

    std::vector<Param*> parameters() {
        std::vector<Param*> out;
        collect_params(out);
        return out;
    }
    std::size_t param_count() {
        std::size_t n = 0;
        for (auto* p : parameters()) n += p->value.size();
        return n;
    }
};

inline void kaiming_init(Tensor& w, int fan_in, std::mt19937& rng) {
    std::normal_distribution<float> d(0.f, std::sqrt(2.f / static_cast<float>(fan_in)));
    for (auto& v : w.data) v = d(rng);
}

struct Conv2d : Module {
    ConvGeom geom{};
    Param weight, bias;
    bool has_bias = true;

    Conv2d() = default;
    Conv2d(const std::string& name, int in_ch, int out_ch, int kh, int kw, int stride_h,
           int stride_w, int pad_h, int pad_w, std::mt19937& rng, bool with_bias = true)
        : geom{in_ch, out_ch, kh, kw, stride_h, stride_w, pad_h, pad_w}, has_bias(with_bias) {
        weight = Param(name + ".weight", Tensor({out_ch, in_ch, kh, kw}));
        kaiming_init(weight.value, in_ch * kh * kw, rng);
        if (has_bias) bias = Param(name + ".bias", Tensor({out_ch}));
    }

    Var forward(const Var& x) { return conv2d(x, weight, has_bias ? &bias : nullptr, geom); }

    void collect_params(std::vector<Param*>& out) override {
        out.push_back(&weight);
        if (has_bias) out.push_back(&bias);
    }
};

struct BatchNorm2d : Module {
    std::string name;
    Param gamma, beta;
    Tensor running_mean, running_var;

    BatchNorm2d() = default;
    BatchNorm2d(const std::string& n, int channels)
        : name(n),
          gamma(n + ".gamma", Tensor::full({channels}, 1.f)),
          beta(n + ".beta", Tensor({channels})),
          running_mean(Tensor({channels})),
          running_var(Tensor::full({channels}, 1.f)) {}

    Var forward(const Var& x, const ForwardCtx& ctx) {
        return batchnorm(x, gamma, beta, running_mean, running_var, ctx.training);
    }

    void collect_params(std::vector<Param*>& out) override {
        out.push_back(&gamma);
        out.push_back(&beta);
    }
    void collect_buffers(std::vector<NamedBuffer>& out) override {
        out.push_back({name + ".running_mean", &running_mean});
        out.push_back({name + ".running_var", &running_var});
    }
};

struct PReLU : Module {
    Param slope;

    PReLU() = default;
    PReLU(const std::string& name, int channels)
        : slope(name + ".prelu", Tensor::full({channels}, 0.25f)) {}

    Var forward(const Var& x) { return prelu(x, slope); }

    void collect_params(std::vector<Param*>& out) override { out.push_back(&slope); }
};

enum class BottleneckKind { Regular, Downsampling, Asymmetric };

struct BottleneckSpec {
    BottleneckKind kind = BottleneckKind::Regular;
    int in_channels = 0;
    int out_channels = 0;
    float dropout_rate = 0.f;
    bool post_activation = true;  // PReLU after the residual add; identity when false
};

inline std::string bottleneck_kind_name(BottleneckKind k) {
    switch (k) {
        case BottleneckKind::Regular: return "regular";
        case BottleneckKind::Downsampling: return "downsampling";
        default: return "asymmetric";
    }
}

inline BottleneckKind bottleneck_kind_from(const std::string& s) {
    if (s == "regular") return BottleneckKind::Regular;
    if (s == "downsampling") return BottleneckKind::Downsampling;
    if (s == "asymmetric") return BottleneckKind::Asymmetric;
    throw ConfigError("unknown bottleneck kind: " + s);
}

/// ENet bottleneck. Branch: 1x1 (or 3x3 stride-2) projection, BN, PReLU,
/// 3x3 (or 5x1 + 1x5) conv, BN, PReLU, 1x1 expansion, BN, spatial dropout.
/// Main path: identity, or 2x2 max-pool with zero-padded channel expansion
/// when downsampling. Branch and main are summed, then activated.
struct Bottleneck : Module {
    BottleneckSpec spec;
    Conv2d proj;         // 1x1, or 2x2 stride 2 when downsampling
    BatchNorm2d bn1;
    PReLU act1;
    Conv2d conv;         // 3x3; first half of the asymmetric pair
    Conv2d conv_b;       // second half (1x5) of the asymmetric pair
    BatchNorm2d bn2;
    PReLU act2;
    Conv2d expand;       // 1x1 back to out_channels
    BatchNorm2d bn3;
    PReLU act_out;

    Bottleneck() = default;
    Bottleneck(const std::string& name, const BottleneckSpec& s, std::mt19937& rng) : spec(s) {
        int internal = std::max(s.out_channels / 4, 1);
        if (s.kind == BottleneckKind::Downsampling)
            proj = Conv2d(name + ".proj", s.in_channels, internal, 3, 3, 2, 2, 1, 1, rng);
        else
            proj = Conv2d(name + ".proj", s.in_channels, internal, 1, 1, 1, 1, 0, 0, rng);
        bn1 = BatchNorm2d(name + ".bn1", internal);
        act1 = PReLU(name + ".act1", internal);
        if (s.kind == BottleneckKind::Asymmetric) {
            conv = Conv2d(name + ".conv_a", internal, internal, 5, 1, 1, 1, 2, 0, rng);
            conv_b = Conv2d(name + ".conv_b", internal, internal, 1, 5, 1, 1, 0, 2, rng);
        } else {
            conv = Conv2d(name + ".conv", internal, internal, 3, 3, 1, 1, 1, 1, rng);
        }
        bn2 = BatchNorm2d(name + ".bn2", internal);
        act2 = PReLU(name + ".act2", internal);
        expand = Conv2d(name + ".expand", internal, s.out_channels, 1, 1, 1, 1, 0, 0, rng);
        bn3 = BatchNorm2d(name + ".bn3", s.out_channels);
        if (s.post_activation) act_out = PReLU(name + ".act_out", s.out_channels);
    }

    /// The learned residual branch F(x) alone, without the identity path or
    /// the output activation.
    Var forward_branch(const Var& x, const ForwardCtx& ctx) {
        Var h = act1.forward(bn1.forward(proj.forward(x), ctx));
        h = conv.forward(h);
        if (spec.kind == BottleneckKind::Asymmetric) h = conv_b.forward(h);
        h = act2.forward(bn2.forward(h, ctx));
        h = bn3.forward(expand.forward(h), ctx);
        if (ctx.rng) h = spatial_dropout(h, spec.dropout_rate, ctx.training, *ctx.rng);
        return h;
    }

    Var forward(const Var& x, const ForwardCtx& ctx) {
        Var branch = forward_branch(x, ctx);
        Var main = x;
        if (spec.kind == BottleneckKind::Downsampling) {
            main = maxpool2x2(x);
            if (spec.out_channels > spec.in_channels) main = pad_channels(main, spec.out_channels);
        }
        Var y = add(main, branch);
        return spec.post_activation ? act_out.forward(y) : y;
    }

    void collect_params(std::vector<Param*>& out) override {
        proj.collect_params(out);
        bn1.collect_params(out);
        act1.collect_params(out);
        conv.collect_params(out);
        if (spec.kind == BottleneckKind::Asymmetric) conv_b.collect_params(out);
        bn2.collect_params(out);
        act2.collect_params(out);
        expand.collect_params(out);
        bn3.collect_params(out);
        if (spec.post_activation) act_out.collect_params(out);
    }
    void collect_buffers(std::vector<NamedBuffer>& out) override {
        bn1.collect_buffers(out);
        bn2.collect_buffers(out);
        bn3.collect_buffers(out);
    }
};

/// ENet initial block: 3x3 stride-2 conv (13 filters) concatenated with a
/// 2x2 max-pool of the input, BN + PReLU on the 16-channel result.
struct InitialBlock : Module {
    Conv2d conv;
    BatchNorm2d bn;
    PReLU act;

    InitialBlock() = default;
    InitialBlock(const std::string& name, int in_ch, std::mt19937& rng)
        : conv(name + ".conv", in_ch, 16 - in_ch, 3, 3, 2, 2, 1, 1, rng),
          bn(name + ".bn", 16),
          act(name + ".act", 16) {}

    Var forward(const Var& x, const ForwardCtx& ctx) {
        Var c = conv.forward(x);
        Var p = maxpool2x2(x);
        return act.forward(bn.forward(concat_channels(c, p), ctx));
    }

    void collect_params(std::vector<Param*>& out) override {
        conv.collect_params(out);
        bn.collect_params(out);
        act.collect_params(out);
    }
    void collect_buffers(std::vector<NamedBuffer>& out) override { bn.collect_buffers(out); }
};

}  // namespace rpnet

#endif
