#ifndef RPNET_PREDICTORS_HPP
#define RPNET_PREDICTORS_HPP

#include "rpnet/backbone.hpp"

namespace rpnet {

enum class PredictorKind { Basic, Guided };

inline std::string predictor_kind_name(PredictorKind k) {
    return k == PredictorKind::Basic ? "bp" : "gp";
}
inline PredictorKind predictor_kind_from(const std::string& s) {
    if (s == "bp") return PredictorKind::Basic;
    if (s == "gp") return PredictorKind::Guided;
    throw ConfigError("unknown predictor kind: " + s);
}

/// Basic residual predictor: a single 1x1 convolution.
struct BasicPredictor : Module {
    Conv2d conv;

    BasicPredictor() = default;
    BasicPredictor(const std::string& name, int in_ch, int num_classes, std::mt19937& rng)
        : conv(name + ".conv", in_ch, num_classes, 1, 1, 1, 1, 0, 0, rng) {}

    Var forward(const Var& residual) {
        if (residual->value.dim(1) != conv.geom.in_ch)
            throw ShapeError("predictor: residual has " + std::to_string(residual->value.dim(1)) +
                             " channels, expected " + std::to_string(conv.geom.in_ch));
        return conv.forward(residual);
    }

    void collect_params(std::vector<Param*>& out) override { conv.collect_params(out); }
};

/// Guided residual predictor: the previous (coarser) level's main feature is
/// squeezed to num_classes channels by a 1x1 adapter, activated, bilinearly
/// upsampled to the residual's size, concatenated with the residual, and
/// fused by a final 1x1 to class logits.
struct GuidedPredictor : Module {
    Conv2d guide_adapt;
    PReLU guide_act;
    Conv2d fuse;

    GuidedPredictor() = default;
    GuidedPredictor(const std::string& name, int residual_ch, int guide_ch, int num_classes,
                    std::mt19937& rng)
        : guide_adapt(name + ".guide_adapt", guide_ch, num_classes, 1, 1, 1, 1, 0, 0, rng),
          guide_act(name + ".guide_act", num_classes),
          fuse(name + ".fuse", residual_ch + num_classes, num_classes, 1, 1, 1, 1, 0, 0, rng) {}

    Var forward(const Var& residual, const Var& guide_feature) {
        const Tensor &r = residual->value, &g = guide_feature->value;
        if (r.dim(2) != 2 * g.dim(2) || r.dim(3) != 2 * g.dim(3))
            throw ShapeError("guided predictor: guide must be at half the residual's size, got " +
                             shape_str(g.shape) + " vs " + shape_str(r.shape));
        Var adapted = guide_act.forward(guide_adapt.forward(guide_feature));
        Var up = upsample_bilinear_nchw(adapted, r.dim(2), r.dim(3));
        return fuse.forward(concat_channels(residual, up));
    }

    void collect_params(std::vector<Param*>& out) override {
        guide_adapt.collect_params(out);
        guide_act.collect_params(out);
        fuse.collect_params(out);
    }
};

/// MainOut plus one residual predictor per residual level. bp and gp are
/// interchangeable behind the predict_residual interface.
struct Predictors : Module {
    PredictorKind kind = PredictorKind::Basic;
    int num_classes = 0;
    Conv2d main_out;  // 1x1, 128 -> classes
    BasicPredictor bp2, bp3;
    GuidedPredictor gp2, gp3;

    Predictors() = default;
    Predictors(PredictorKind k, int classes, std::mt19937& rng) : kind(k), num_classes(classes) {
        main_out = Conv2d("predictors.main_out", 128, classes, 1, 1, 1, 1, 0, 0, rng);
        if (kind == PredictorKind::Basic) {
            bp2 = BasicPredictor("predictors.level2.bp", 64, classes, rng);
            bp3 = BasicPredictor("predictors.level3.bp", 16, classes, rng);
        } else {
            gp2 = GuidedPredictor("predictors.level2.gp", 64, 128, classes, rng);
            gp3 = GuidedPredictor("predictors.level3.gp", 16, 64, classes, rng);
        }
    }

    Var predict_main(const Var& main_feature) { return main_out.forward(main_feature); }

    /// level is 2 or 3; guide is the previous level's pre-logit feature
    /// (main feature for level 2, the level-2 exit feature for level 3).
    Var predict_residual(int level, const Var& residual, const Var& guide) {
        if (kind == PredictorKind::Basic)
            return level == 2 ? bp2.forward(residual) : bp3.forward(residual);
        return level == 2 ? gp2.forward(residual, guide) : gp3.forward(residual, guide);
    }

    void collect_params(std::vector<Param*>& out) override {
        main_out.collect_params(out);
        if (kind == PredictorKind::Basic) {
            bp2.collect_params(out);
            bp3.collect_params(out);
        } else {
            gp2.collect_params(out);
            gp3.collect_params(out);
        }
    }

    /// Parameters of the residual predictors alone (excluding MainOut).
    std::size_t residual_param_count() {
        std::vector<Param*> ps;
        if (kind == PredictorKind::Basic) {
            bp2.collect_params(ps);
            bp3.collect_params(ps);
        } else {
            gp2.collect_params(ps);
            gp3.collect_params(ps);
        }
        std::size_t n = 0;
        for (auto* p : ps) n += p->value.size();
        return n;
    }
};

}  // namespace rpnet

#endif
