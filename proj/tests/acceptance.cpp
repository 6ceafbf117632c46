// Acceptance gate: one [PASS]/[FAIL] line per criterion, nonzero exit if any
// criterion fails. Tolerances are pinned here, not configurable.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <random>
#include <set>
#include <sstream>

#include "rpnet/config.hpp"
#include "rpnet/metrics.hpp"

using namespace rpnet;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int index, const std::string& name, bool ok, const std::string& detail) {
    std::printf("[%s] %d. %s — %s\n", ok ? "PASS" : "FAIL", index, name.c_str(), detail.c_str());
    if (!ok) ++g_failures;
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

LabelImage random_label(int h, int w, int classes, std::mt19937& rng, double ignore_prob) {
    LabelImage lab(h, w, classes, 255);
    std::uniform_int_distribution<int> cls(0, classes - 1);
    std::uniform_real_distribution<double> u(0, 1);
    for (auto& v : lab.data) v = (u(rng) < ignore_prob) ? 255 : cls(rng);
    return lab;
}

// --------------------------------------------------------------------------
// 1. Pyramid identity: onehot(label_1) + sum of lres_k == onehot(label_i)
// --------------------------------------------------------------------------
void criterion_1() {
    auto t0 = Clock::now();
    std::mt19937 rng(101);
    std::uniform_int_distribution<int> size_d(1, 8);  // multiples of 8 in [8, 64]
    std::uniform_int_distribution<int> cls_d(2, 6);
    bool exact = true;
    for (int trial = 0; trial < 100 && exact; ++trial) {
        int h = 8 * size_d(rng), w = 8 * size_d(rng);
        LabelImage lab = random_label(h, w, cls_d(rng), rng, 0.1);
        PyramidSpec spec = PyramidSpec::standard(h, w);
        auto labels = build_label_pyramid(lab, spec);
        auto lres = label_residual_pyramid(labels);
        for (int level = 1; level <= spec.num_levels() && exact; ++level) {
            int lh = spec.level_height(level), lw = spec.level_width(level);
            // accumulate upsample(…upsample(lres_1)…) + … + lres_level
            Tensor acc = lres[0];
            for (int k = 2; k <= level; ++k) {
                acc = upsample_nearest(acc, spec.level_height(k), spec.level_width(k));
                const Tensor& r = lres[static_cast<std::size_t>(k - 1)];
                for (std::size_t i = 0; i < acc.size(); ++i) acc.data[i] += r.data[i];
            }
            Tensor expect = onehot(labels[static_cast<std::size_t>(level - 1)]);
            (void)lh;
            (void)lw;
            if (acc.data != expect.data) exact = false;
        }
    }
    double secs = seconds_since(t0);
    std::ostringstream d;
    d << "100 random labels, all levels " << (exact ? "exact" : "NOT exact") << ", " << secs
      << " s (limit 10)";
    report(1, "pyramid additive identity (Eq. 9)", exact && secs < 10.0, d.str());
}

// --------------------------------------------------------------------------
// 2. Residual-extraction oracle on a two-block micro backbone
// --------------------------------------------------------------------------
void criterion_2() {
    std::mt19937 rng(3);
    BottleneckSpec spec{BottleneckKind::Regular, 4, 4, 0.f, /*post_activation=*/false};
    Bottleneck b1("micro.b1", spec, rng), b2("micro.b2", spec, rng);
    Tensor img({1, 4, 4, 4});
    std::mt19937 ir(9);
    std::uniform_real_distribution<float> u(-1.f, 1.f);
    for (auto& v : img.data) v = u(ir);
    ForwardCtx ctx{false, nullptr};

    // forward residual vs brute-force branch sum (identity main paths)
    double max_abs = 0;
    {
        NoGradGuard ng;
        Var x0 = make_var(img);
        Var x1 = b1.forward(x0, ctx);
        Var x2 = b2.forward(x1, ctx);
        Var f1 = b1.forward_branch(x0, ctx);
        Var f2 = b2.forward_branch(x1, ctx);
        for (std::size_t i = 0; i < x2->value.size(); ++i) {
            double res = static_cast<double>(x2->value.data[i]) - x0->value.data[i];
            double oracle = static_cast<double>(f1->value.data[i]) + f2->value.data[i];
            max_abs = std::max(max_abs, std::abs(res - oracle));
        }
    }

    // gradient of sum(residual) vs central finite differences
    std::vector<Param*> params;
    b1.collect_params(params);
    b2.collect_params(params);
    for (auto* p : params) p->zero_grad();
    {
        Var x0 = make_var(img);
        Var y = b2.forward(b1.forward(x0, ctx), ctx);
        backward(sum_all(y));  // d sum(x2 - x0) / dw == d sum(x2) / dw
    }
    auto loss_value = [&]() {
        NoGradGuard ng;
        Var x0 = make_var(img);
        Var y = b2.forward(b1.forward(x0, ctx), ctx);
        double s = 0;
        for (std::size_t i = 0; i < y->value.size(); ++i)
            s += static_cast<double>(y->value.data[i]) - img.data[i];
        return s;
    };
    struct Entry {
        Param* p;
        std::size_t i;
        float g;
    };
    std::vector<Entry> entries;
    for (auto* p : params)
        for (std::size_t i = 0; i < p->grad.size(); ++i) entries.push_back({p, i, p->grad.data[i]});
    std::sort(entries.begin(), entries.end(),
              [](const Entry& a, const Entry& b) { return std::abs(a.g) > std::abs(b.g); });
    const float h = 2e-3f;
    double max_rel = 0;
    for (int k = 0; k < 5; ++k) {
        auto& e = entries[static_cast<std::size_t>(k)];
        float keep = e.p->value.data[e.i];
        e.p->value.data[e.i] = keep + h;
        double up = loss_value();
        e.p->value.data[e.i] = keep - h;
        double down = loss_value();
        e.p->value.data[e.i] = keep;
        double fd = (up - down) / (2.0 * h);
        max_rel = std::max(max_rel, std::abs(e.g - fd) / (std::abs(fd) + 1e-12));
    }

    std::ostringstream d;
    d << "branch-sum max abs err " << max_abs << " (limit 1e-6), FD max rel err " << max_rel
      << " (limit 1e-4)";
    report(2, "residual extraction oracle (Eq. 5-6)", max_abs < 1e-6 && max_rel < 1e-4, d.str());
}

// --------------------------------------------------------------------------
// 3. Loss algebra: exact cumulative sum and stage-1 gradient isolation
// --------------------------------------------------------------------------
void criterion_3() {
    ModelConfig mc;
    mc.num_classes = 3;
    mc.init_seed = 31;
    RPNet model(mc);
    std::mt19937 rng(32);
    Tensor img({1, 3, 16, 16});
    std::uniform_real_distribution<float> u(-1.f, 1.f);
    for (auto& v : img.data) v = u(rng);
    LabelImage lab = random_label(16, 16, 3, rng, 0.0);
    PyramidSpec spec = PyramidSpec::standard(16, 16);
    auto pyr = build_label_pyramid(lab, spec);
    std::vector<float> w = {1.f, 1.f, 1.f};
    ForwardCtx ctx{false, nullptr};

    for (auto* p : model.parameters()) p->zero_grad();
    auto out = model.forward(make_var(img), ctx);
    std::vector<Var> losses;
    for (int l = 0; l < 3; ++l) losses.push_back(cross_entropy(out.targets[l], {&pyr[l]}, w));
    Var total = stage_loss(losses, 3, LossMode::LevelWise);
    float seq = (losses[0]->value.data[0] + losses[1]->value.data[0]) + losses[2]->value.data[0];
    bool sum_exact = total->value.data[0] == seq;

    // stage-1 backward must not touch the level-2/3 predictors
    for (auto* p : model.parameters()) p->zero_grad();
    auto out1 = model.forward(make_var(img), ctx);
    backward(cross_entropy(out1.main_logits, {&pyr[0]}, w));
    std::vector<Param*> later;
    model.predictors.bp2.collect_params(later);
    model.predictors.bp3.collect_params(later);
    bool later_zero = true;
    for (auto* p : later)
        for (float g : p->grad.data)
            if (g != 0.f) later_zero = false;
    bool main_nonzero = false;
    for (float g : model.predictors.main_out.weight.grad.data)
        if (g != 0.f) main_nonzero = true;

    std::ostringstream d;
    d << "cumulative sum " << (sum_exact ? "exact" : "NOT exact") << ", level-2/3 grads "
      << (later_zero ? "all zero" : "NONZERO") << ", level-1 grads "
      << (main_nonzero ? "active" : "MISSING");
    report(3, "loss algebra (Eq. 12) and stage isolation", sum_exact && later_zero && main_nonzero,
           d.str());
}

// --------------------------------------------------------------------------
// 4. Formula spot checks
// --------------------------------------------------------------------------
void criterion_4() {
    double w0 = class_weights({0.0}, 1.12)[0];
    TrainConfig cfg;
    cfg.max_iter = 1000;
    double half = poly_lr(500, cfg);
    bool ok = std::abs(w0 - 8.8235) < 1e-3 && std::abs(half - 2.6795e-4) < 1e-7;
    std::ostringstream d;
    d << "W(P=0, k=1.12) = " << w0 << " (want 8.8235 +/- 1e-3), lr(half) = " << half
      << " (want 2.6795e-4 +/- 1e-7)";
    report(4, "class weight and poly LR formulas", ok, d.str());
}

// --------------------------------------------------------------------------
// 5. Accounting vs the paper's parameter table
// --------------------------------------------------------------------------
void criterion_5() {
    auto t0 = Clock::now();
    ModelConfig mc;
    mc.num_classes = 12;
    RPNet model(mc);
    auto encoder = static_cast<double>(model.encoder_param_count());
    std::mt19937 r1(0), r2(0);
    Predictors bp(PredictorKind::Basic, 12, r1);
    Predictors gp(PredictorKind::Guided, 12, r2);
    auto delta = static_cast<double>(gp.residual_param_count()) -
                 static_cast<double>(bp.residual_param_count());
    double secs = seconds_since(t0);
    bool ok = encoder > 0.3507e6 * 0.95 && encoder < 0.3507e6 * 1.05 && delta > 0 &&
              delta > 2600.0 * 0.85 && delta < 2600.0 * 1.15 && secs < 60.0;
    std::ostringstream d;
    d << "encoder " << encoder << " params (want 0.3507M +/- 5%), gp-bp delta " << delta
      << " (want 2600 +/- 15%), " << secs << " s";
    report(5, "parameter accounting vs paper", ok, d.str());
}

// --------------------------------------------------------------------------
// 6 & 7. Synthetic training runs
// --------------------------------------------------------------------------

struct TrainOutcome {
    double final_miou = 0;   // level-3 reconstruction at its native 1/2 scale
    double level1_miou = 0;  // level-1 logits upsampled to the same 1/2 scale
    double val_miou = 0;     // level-3 reconstruction, validation split, full res
};

/// mIoU of the final level at its native resolution against the level-3
/// pyramid labels, and of the level-1 prediction upsampled to that same
/// resolution. The finest prediction lives at 1/2 scale, so full-resolution
/// comparison is bounded by boundary quantization (~0.855 on this dataset
/// even for a perfect level-3 predictor); the level's own targets are the
/// attainable yardstick.
std::pair<double, double> native_scale_miou(RPNet& model, const Dataset& ds) {
    NoGradGuard ng;
    ForwardCtx ctx{false, nullptr};
    int C = model.cfg.num_classes;
    ConfusionMatrix cm_final(C), cm_l1(C);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        Sample s = ds.get(i);
        Tensor batch({1, 3, s.label.height, s.label.width});
        batch.data = s.image.data;
        auto out = model.forward(make_var(std::move(batch)), ctx);
        PyramidSpec spec = PyramidSpec::standard(s.label.height, s.label.width);
        auto pyr = build_label_pyramid(s.label, spec);
        auto grab = [&](const Var& v, Fraction sc) {
            LogitMap lm{Tensor({C, v->value.dim(2), v->value.dim(3)}), sc};
            std::copy(v->value.data.begin(), v->value.data.end(), lm.data.data.begin());
            return lm;
        };
        int h3 = spec.level_height(3), w3 = spec.level_width(3);
        update_confusion(cm_final, argmax_labels(grab(out.targets[2], {1, 2}), C), pyr[2]);
        LogitMap l1up = upsample_bilinear(grab(out.targets[0], {1, 8}), h3, w3);
        update_confusion(cm_l1, argmax_labels(l1up, C), pyr[2]);
    }
    return {mean_iou(cm_final).mean.value_or(0), mean_iou(cm_l1).mean.value_or(0)};
}

TrainOutcome run_training(const SyntheticSpec& data_spec, const TrainConfig& cfg,
                          unsigned model_seed, float dropout1, float dropout23) {
    SyntheticDataset train_ds(data_spec);
    SyntheticSpec vs = data_spec;
    vs.seed += 1;
    vs.num_images = 16;
    SyntheticDataset val_ds(vs);
    ModelConfig mc;
    mc.num_classes = data_spec.num_classes;
    mc.init_seed = model_seed;
    mc.dropout_section1 = dropout1;
    mc.dropout_section23 = dropout23;
    RPNet model(mc);
    train(model, train_ds, val_ds, cfg);
    auto [final_native, l1_native] = native_scale_miou(model, train_ds);
    auto val_eval = evaluate_levels(model, val_ds, 3);
    return {final_native, l1_native, val_eval.at(3)};
}

void criterion_6() {
    auto t0 = Clock::now();
    SyntheticSpec data;
    data.seed = 9;
    data.num_images = 64;
    data.image_size = 64;
    data.num_classes = 4;
    data.shapes_per_image = 6;  // includes 1-3 px bars (thin structures)
    data.noise = 0.05f;
    TrainConfig cfg;
    cfg.seed = 1;
    cfg.stage_plan = {{1, 100}, {2, 60}, {3, 300}};
    cfg.log_every = 1000000;
    TrainOutcome out = run_training(data, cfg, 1, 0.f, 0.f);
    double secs = seconds_since(t0);
    bool ok = out.final_miou >= 0.90 && out.final_miou >= out.level1_miou + 0.02 && secs < 7200;
    std::ostringstream d;
    d << "final mIoU " << out.final_miou << " (want >= 0.90), level-1-upsampled mIoU "
      << out.level1_miou << " (want final >= level1 + 0.02), held-out full-res mIoU "
      << out.val_miou << ", " << secs << " s (limit 7200)";
    report(6, "synthetic end-to-end three-stage training", ok, d.str());
}

void criterion_7() {
    auto t0 = Clock::now();
    SyntheticSpec data;
    data.seed = 21;
    data.num_images = 24;
    data.image_size = 32;
    data.num_classes = 3;
    data.shapes_per_image = 3;
    data.noise = 0.02f;

    auto mean_of_seeds = [&](LossMode mode) {
        double sum = 0;
        for (unsigned seed : {1u, 2u, 3u}) {
            TrainConfig cfg;
            cfg.seed = seed;
            cfg.stage_plan = {{1, 50}, {2, 40}, {3, 110}};  // same budget in every mode
            cfg.loss_mode = mode;
            cfg.log_every = 1000000;
            sum += run_training(data, cfg, seed, 0.01f, 0.1f).val_miou;
        }
        return sum / 3.0;
    };

    double level_wise = mean_of_seeds(LossMode::LevelWise);
    double best_joint = 0;
    std::string best_name;
    for (LossMode mode : {LossMode::EQ, LossMode::LIN, LossMode::POLY, LossMode::NORM}) {
        double m = mean_of_seeds(mode);
        if (m > best_joint) {
            best_joint = m;
            best_name = loss_mode_name(mode);
        }
    }
    double secs = seconds_since(t0);
    bool ordered = level_wise >= best_joint;
    bool tie = std::abs(level_wise - best_joint) <= 0.01;
    bool ok = ordered && !tie;  // ties count as failure to reproduce, reported
    std::ostringstream d;
    d << "level_wise mean " << level_wise << " vs best joint (" << best_name << ") " << best_joint
      << (tie ? " — tie within 0.01, counted as not reproduced" : "") << ", " << secs << " s";
    report(7, "training-mode ordering (Table 4 direction)", ok, d.str());
}

// --------------------------------------------------------------------------
// 8. IoU oracle on 1,000 random pairs
// --------------------------------------------------------------------------
void criterion_8() {
    std::mt19937 rng(801);
    bool exact = true;
    for (int trial = 0; trial < 1000 && exact; ++trial) {
        int classes = 2 + trial % 5;
        int h = 4 + trial % 9, w = 4 + (trial / 3) % 9;
        LabelImage gt = random_label(h, w, classes, rng, 0.1);
        LabelImage pred = random_label(h, w, classes, rng, 0.0);
        ConfusionMatrix cm(classes);
        update_confusion(cm, pred, gt);
        auto r = mean_iou(cm);

        double sum = 0;
        int defined = 0;
        for (int c = 0; c < classes; ++c) {
            std::set<int> a, b;
            for (int i = 0; i < h * w; ++i) {
                if (gt.data[static_cast<std::size_t>(i)] == 255) continue;
                if (gt.data[static_cast<std::size_t>(i)] == c) a.insert(i);
                if (pred.data[static_cast<std::size_t>(i)] == c) b.insert(i);
            }
            std::set<int> inter, uni;
            std::set_intersection(a.begin(), a.end(), b.begin(), b.end(),
                                  std::inserter(inter, inter.begin()));
            std::set_union(a.begin(), a.end(), b.begin(), b.end(),
                           std::inserter(uni, uni.begin()));
            if (uni.empty()) {
                if (r.per_class[static_cast<std::size_t>(c)].has_value()) exact = false;
                continue;
            }
            double iou = static_cast<double>(inter.size()) / static_cast<double>(uni.size());
            if (!r.per_class[static_cast<std::size_t>(c)] ||
                *r.per_class[static_cast<std::size_t>(c)] != iou)
                exact = false;
            sum += iou;
            ++defined;
        }
        if (defined > 0 && (!r.mean || *r.mean != sum / defined)) exact = false;
    }
    report(8, "mean IoU vs set-arithmetic oracle", exact,
           exact ? "1000 random pairs, exact match" : "mismatch against the oracle");
}

// --------------------------------------------------------------------------
// 9. Benchmark harness on the published size grid
// --------------------------------------------------------------------------
void criterion_9() {
    ModelConfig mc;
    mc.num_classes = 11;
    RPNet model(mc);
    auto sizes = paper_benchmark_sizes();
    auto r = benchmark_latency(model, sizes, 1, 10);
    bool ok = r.latency.size() == sizes.size();
    std::ostringstream d;
    for (std::size_t i = 0; i < r.latency.size(); ++i) {
        const auto& row = r.latency[i];
        if (row.height != sizes[i].first || row.width != sizes[i].second) ok = false;
        if (row.skipped) continue;  // allocation-limited sizes may be skipped
        if (row.fps != 1000.0 / row.mean_ms) ok = false;
        d << row.width << "x" << row.height << ": " << row.mean_ms << " ms / " << row.fps
          << " fps; ";
    }
    d << "fps == 1000/mean_ms on every row";
    report(9, "latency grid (Table 2 sizes)", ok, d.str());
}

}  // namespace

int main() {
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();
    criterion_5();
    criterion_8();  // cheap checks before the long training runs
    criterion_9();
    criterion_7();
    criterion_6();
    if (g_failures) {
        std::printf("%d criterion(s) failed\n", g_failures);
        return 1;
    }
    std::printf("all criteria passed\n");
    return 0;
}
