#ifndef RPNET_BACKBONE_HPP
#define RPNET_BACKBONE_HPP

#include <optional>

#include "rpnet/nn.hpp"

namespace rpnet {

enum class ResidualMode { Standard, Expanded };

inline std::string residual_mode_name(ResidualMode m) {
    return m == ResidualMode::Standard ? "sr" : "er";
}
inline ResidualMode residual_mode_from(const std::string& s) {
    if (s == "sr") return ResidualMode::Standard;
    if (s == "er") return ResidualMode::Expanded;
    throw ConfigError("unknown residual mode: " + s);
}

/// Entry/exit features of one pyramid level and their difference.
/// residual == exit_feature - entry_feature, elementwise, always.
struct LevelTap {
    int level = 0;
    Var entry_feature;  // x_l: right after the level's downsampling/initial block
    Var exit_feature;   // x_L: leaving the level's last bottleneck
    Var residual;       // exit - entry
};

struct BackboneOutput {
    Var main_feature;               // 128 ch at 1/8 scale
    LevelTap level2;                // 64 ch at 1/4
    LevelTap level3;                // 16 ch at 1/2
    Var expanded_residual2;         // er mode only
    Var expanded_residual3;
};

/// pre_pool - project(upsample(post_pool)): the detail lost across one
/// downsampling step, mapped back to pre-pool channel width by a learned
/// 1x1 projection.
inline Var expanded_residual(const Var& pre_pool, const Var& post_pool, Conv2d& projection) {
    const Tensor &pre = pre_pool->value, &post = post_pool->value;
    if (pre.dim(2) != 2 * post.dim(2) || pre.dim(3) != 2 * post.dim(3))
        throw ShapeError("expanded_residual: post_pool must be exactly half of pre_pool, got " +
                         shape_str(pre.shape) + " vs " + shape_str(post.shape));
    Var up = upsample_bilinear_nchw(projection.forward(post_pool), pre.dim(2), pre.dim(3));
    return sub(pre_pool, up);
}

/// The reproduced ENet encoder with residual taps. Topology:
///   Initial(16) -> Bottleneck1.0 regular(16)              [Level-3]
///   Bottleneck2.0 down(64) -> 2.1-2.4 regular(64)         [Level-2]
///   Bottleneck3.0 down(128) -> 3.1-3.8 (asymmetric at 3.3, 3.7),
///   repeated once more without 3.0                        [Level-1 main]
struct Backbone : Module {
    ResidualMode mode = ResidualMode::Standard;
    InitialBlock initial;
    Bottleneck b1_0;
    Bottleneck b2_0;
    std::vector<Bottleneck> section2;   // 2.1-2.4
    Bottleneck b3_0;
    std::vector<Bottleneck> section3;   // 3.1-3.8 twice
    Conv2d er_proj3;                    // 64 -> 16
    Conv2d er_proj2;                    // 128 -> 64
    std::vector<BottleneckSpec> block_specs;

    Backbone() = default;
    Backbone(ResidualMode residual_mode, float dropout1, float dropout23, std::mt19937& rng)
        : mode(residual_mode) {
        auto make = [&](const std::string& name, BottleneckKind kind, int in_ch, int out_ch,
                        float rate) {
            BottleneckSpec s{kind, in_ch, out_ch, rate, true};
            block_specs.push_back(s);
            return Bottleneck(name, s, rng);
        };
        initial = InitialBlock("backbone.initial", 3, rng);
        b1_0 = make("backbone.section1.bottleneck1_0", BottleneckKind::Regular, 16, 16, dropout1);
        b2_0 = make("backbone.section2.bottleneck2_0", BottleneckKind::Downsampling, 16, 64,
                    dropout23);
        for (int i = 1; i <= 4; ++i)
            section2.push_back(make("backbone.section2.bottleneck2_" + std::to_string(i),
                                    BottleneckKind::Regular, 64, 64, dropout23));
        b3_0 = make("backbone.section3.bottleneck3_0", BottleneckKind::Downsampling, 64, 128,
                    dropout23);
        for (int rep = 0; rep < 2; ++rep)
            for (int i = 1; i <= 8; ++i) {
                BottleneckKind kind =
                    (i == 3 || i == 7) ? BottleneckKind::Asymmetric : BottleneckKind::Regular;
                section3.push_back(make("backbone.section3.rep" + std::to_string(rep) +
                                            ".bottleneck3_" + std::to_string(i),
                                        kind, 128, 128, dropout23));
            }
        if (mode == ResidualMode::Expanded) {
            er_proj3 = Conv2d("backbone.er_proj3", 64, 16, 1, 1, 1, 1, 0, 0, rng);
            er_proj2 = Conv2d("backbone.er_proj2", 128, 64, 1, 1, 1, 1, 0, 0, rng);
        }
    }

    BackboneOutput forward(const Var& image, const ForwardCtx& ctx) {
        const Tensor& in = image->value;
        if (in.ndim() != 4 || in.dim(1) != 3)
            throw ShapeError("backbone: expected Nx3xHxW input, got " + shape_str(in.shape));
        if (in.dim(2) % 8 != 0 || in.dim(3) % 8 != 0)
            throw ShapeError("backbone: input size " + std::to_string(in.dim(2)) + "x" +
                             std::to_string(in.dim(3)) +
                             " not divisible by 8; pad to the next multiple of 8");

        BackboneOutput out;
        Var x = initial.forward(image, ctx);
        out.level3.level = 3;
        out.level3.entry_feature = x;
        x = b1_0.forward(x, ctx);
        out.level3.exit_feature = x;
        out.level3.residual = sub(out.level3.exit_feature, out.level3.entry_feature);

        Var pre_pool3 = x;
        x = b2_0.forward(x, ctx);
        out.level2.level = 2;
        out.level2.entry_feature = x;
        if (mode == ResidualMode::Expanded)
            out.expanded_residual3 = expanded_residual(pre_pool3, x, er_proj3);
        for (auto& b : section2) x = b.forward(x, ctx);
        out.level2.exit_feature = x;
        out.level2.residual = sub(out.level2.exit_feature, out.level2.entry_feature);

        Var pre_pool2 = x;
        x = b3_0.forward(x, ctx);
        if (mode == ResidualMode::Expanded)
            out.expanded_residual2 = expanded_residual(pre_pool2, x, er_proj2);
        for (auto& b : section3) x = b.forward(x, ctx);
        out.main_feature = x;
        return out;
    }

    void collect_params(std::vector<Param*>& out) override {
        initial.collect_params(out);
        b1_0.collect_params(out);
        b2_0.collect_params(out);
        for (auto& b : section2) b.collect_params(out);
        b3_0.collect_params(out);
        for (auto& b : section3) b.collect_params(out);
        if (mode == ResidualMode::Expanded) {
            er_proj3.collect_params(out);
            er_proj2.collect_params(out);
        }
    }

    void collect_buffers(std::vector<NamedBuffer>& out) override {
        initial.collect_buffers(out);
        b1_0.collect_buffers(out);
        b2_0.collect_buffers(out);
        for (auto& b : section2) b.collect_buffers(out);
        b3_0.collect_buffers(out);
        for (auto& b : section3) b.collect_buffers(out);
    }
};

}  // namespace rpnet

#endif
