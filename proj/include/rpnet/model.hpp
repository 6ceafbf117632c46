#ifndef RPNET_MODEL_HPP
#define RPNET_MODEL_HPP

#include "rpnet/predictors.hpp"
#include "rpnet/pyramid.hpp"

namespace rpnet {

struct ModelConfig {
    int num_classes = 0;
    ResidualMode residual_mode = ResidualMode::Standard;
    PredictorKind predictor = PredictorKind::Basic;
    float dropout_section1 = 0.01f;
    float dropout_section23 = 0.1f;
    unsigned init_seed = 0;
};

/// Backbone + predictors + additive reconstruction; one forward pass yields
/// the full reconstructed target pyramid (levels 1..3 at 1/8, 1/4, 1/2 of
/// the input).
struct RPNet : Module {
    ModelConfig cfg;
    Backbone backbone;
    Predictors predictors;

    struct Outputs {
        BackboneOutput features;
        Var main_logits;          // level 1
        Var tres2, tres3;         // predicted residual logits
        std::vector<Var> targets; // reconstructed, targets[0] is level 1
    };

    RPNet() = default;
    explicit RPNet(const ModelConfig& c) : cfg(c) {
        if (c.num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
        std::mt19937 rng(c.init_seed);
        backbone = Backbone(c.residual_mode, c.dropout_section1, c.dropout_section23, rng);
        predictors = Predictors(c.predictor, c.num_classes, rng);
    }

    Outputs forward(const Var& image, const ForwardCtx& ctx) {
        Outputs out;
        out.features = backbone.forward(image, ctx);
        const BackboneOutput& f = out.features;

        out.main_logits = predictors.predict_main(f.main_feature);

        Var res2 = f.level2.residual;
        Var res3 = f.level3.residual;
        if (cfg.residual_mode == ResidualMode::Expanded) {
            res2 = add(res2, f.expanded_residual2);
            res3 = add(res3, f.expanded_residual3);
        }
        out.tres2 = predictors.predict_residual(2, res2, f.main_feature);
        out.tres3 = predictors.predict_residual(3, res3, f.level2.exit_feature);

        // target_1 = main; target_i = upsample(target_{i-1}) + tres_i
        out.targets.push_back(out.main_logits);
        Var t2 = add(upsample_bilinear_nchw(out.targets[0], out.tres2->value.dim(2),
                                            out.tres2->value.dim(3)),
                     out.tres2);
        out.targets.push_back(t2);
        Var t3 = add(upsample_bilinear_nchw(t2, out.tres3->value.dim(2), out.tres3->value.dim(3)),
                     out.tres3);
        out.targets.push_back(t3);
        return out;
    }

    void collect_params(std::vector<Param*>& out) override {
        backbone.collect_params(out);
        predictors.collect_params(out);
    }
    void collect_buffers(std::vector<NamedBuffer>& out) override {
        backbone.collect_buffers(out);
    }

    std::size_t encoder_param_count() { return backbone.param_count() + main_out_param_count(); }
    std::size_t main_out_param_count() {
        std::vector<Param*> ps;
        predictors.main_out.collect_params(ps);
        std::size_t n = 0;
        for (auto* p : ps) n += p->value.size();
        return n;
    }

    /// Count multiply-accumulates of one forward pass at the given input
    /// size by instrumenting a throwaway pass.
    long long count_macs(int height, int width) {
        long long macs = 0;
        {
            NoGradGuard ng;
            MacCounterGuard mc(macs);
            ForwardCtx ctx{false, nullptr};
            Var img = make_var(Tensor({1, 3, height, width}));
            forward(img, ctx);
        }
        return macs;
    }
};

}  // namespace rpnet

#endif
