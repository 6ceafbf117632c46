#ifndef RPNET_TRAINING_HPP
#define RPNET_TRAINING_HPP

#include <algorithm>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include "rpnet/data.hpp"
#include "rpnet/metrics.hpp"
#include "rpnet/model.hpp"

namespace rpnet {

enum class LossMode { LevelWise, EQ, LIN, POLY, NORM };

inline std::string loss_mode_name(LossMode m) {
    switch (m) {
        case LossMode::LevelWise: return "level_wise";
        case LossMode::EQ: return "EQ";
        case LossMode::LIN: return "LIN";
        case LossMode::POLY: return "POLY";
        default: return "NORM";
    }
}
inline LossMode loss_mode_from(const std::string& s) {
    if (s == "level_wise") return LossMode::LevelWise;
    if (s == "EQ") return LossMode::EQ;
    if (s == "LIN") return LossMode::LIN;
    if (s == "POLY") return LossMode::POLY;
    if (s == "NORM") return LossMode::NORM;
    throw ConfigError("unknown loss mode: " + s);
}

struct TrainConfig {
    double base_lr = 5e-4;
    double lr_power = 0.9;
    double weight_decay = 1e-4;
    int batch_size = 3;
    double class_weight_k = 1.12;
    long long max_iter = 0;  // 0: derived from the stage plan
    std::vector<std::pair<int, int>> stage_plan = {{1, 10}, {2, 10}, {3, 10}};
    LossMode loss_mode = LossMode::LevelWise;
    bool freeze_earlier_levels = false;  // ablation knob; default keeps everything trainable
    unsigned seed = 0;
    int log_every = 10;

    void validate() const {
        if (base_lr <= 0) throw ConfigError("train: base_lr must be > 0");
        if (lr_power <= 0) throw ConfigError("train: lr_power must be > 0");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        int prev = 0;
        for (auto [level, epochs] : stage_plan) {
            if (level != prev + 1)
                throw ConfigError("train: stage_plan levels must be strictly increasing from 1");
            if (epochs < 0) throw ConfigError("train: negative epoch count");
            prev = level;
        }
        if (stage_plan.empty()) throw ConfigError("train: empty stage_plan");
    }
};

/// W_c = 1 / ln(P_c + k), natural log.
inline std::vector<double> class_weights(const std::vector<double>& pixel_frequencies, double k) {
    std::vector<double> w;
    w.reserve(pixel_frequencies.size());
    for (double p : pixel_frequencies) {
        if (p < 0 || p > 1) throw ConfigError("class_weights: frequency outside [0,1]");
        if (p + k <= 1.0)
            throw ConfigError("class_weights: P + k <= 1 gives a non-positive log");
        w.push_back(1.0 / std::log(p + k));
    }
    return w;
}

/// base_lr * (1 - iter/max_iter)^power; iterations past the schedule clamp
/// to zero (with a one-line warning).
inline double poly_lr(long long iter, const TrainConfig& cfg) {
    if (cfg.max_iter <= 0) throw ConfigError("poly_lr: max_iter not set");
    if (iter < 0) throw ConfigError("poly_lr: negative iteration");
    if (iter > cfg.max_iter) {
        std::cerr << "poly_lr: iter " << iter << " past max_iter " << cfg.max_iter
                  << ", clamping lr to 0\n";
        return 0.0;
    }
    double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(cfg.max_iter);
    return cfg.base_lr * std::pow(frac, cfg.lr_power);
}

/// Joint-training weight vector over L levels, normalized to sum 1.
/// EQ: uniform; LIN: w_i proportional to i; POLY: to i^2; NORM: Gaussian
/// over the level index centered at L with sigma 1.
inline std::vector<double> joint_weights(LossMode mode, int levels) {
    if (mode == LossMode::LevelWise) throw ConfigError("joint_weights: not a joint mode");
    std::vector<double> w(static_cast<std::size_t>(levels));
    for (int i = 1; i <= levels; ++i) {
        double v = 1.0;
        if (mode == LossMode::LIN) v = i;
        else if (mode == LossMode::POLY) v = static_cast<double>(i) * i;
        else if (mode == LossMode::NORM) v = std::exp(-0.5 * (i - levels) * (i - levels));
        w[static_cast<std::size_t>(i - 1)] = v;
    }
    double sum = 0;
    for (double v : w) sum += v;
    for (double& v : w) v /= sum;
    return w;
}

/// Non-autograd criterion for evaluation and oracle checks: class-weighted
/// softmax cross-entropy, weighted mean over scored pixels.
inline double weighted_cross_entropy(const LogitMap& logits, const LabelImage& label,
                                     const std::vector<double>& weights) {
    int C = logits.channels(), H = logits.height(), W = logits.width();
    if (label.height != H || label.width != W)
        throw ShapeError("weighted_cross_entropy: size mismatch");
    double loss = 0, wsum = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            std::int32_t c = label.at(y, x);
            if (c == label.ignore_index) continue;
            double mx = logits.data.at(0, y, x);
            for (int k = 1; k < C; ++k) mx = std::max(mx, double(logits.data.at(k, y, x)));
            double denom = 0;
            for (int k = 0; k < C; ++k) denom += std::exp(logits.data.at(k, y, x) - mx);
            double w = weights[static_cast<std::size_t>(c)];
            loss += w * (std::log(denom) - (logits.data.at(c, y, x) - mx));
            wsum += w;
        }
    return wsum > 0 ? loss / wsum : 0.0;
}

/// Reconstruct targets from main + residual logits and score each level
/// against its scaled label (Eq. 7-8 path, evaluation flavor).
inline std::vector<double> level_losses(const LogitMap& main,
                                        const std::vector<LogitMap>& residuals,
                                        const std::vector<LabelImage>& labels,
                                        const PyramidSpec& spec,
                                        const std::vector<double>& weights) {
    if (static_cast<int>(labels.size()) != spec.num_levels())
        throw ShapeError("level_losses: label/level count mismatch");
    auto targets = reconstruct_targets(main, residuals, spec);
    std::vector<double> losses;
    for (std::size_t i = 0; i < targets.size(); ++i)
        losses.push_back(weighted_cross_entropy(targets[i], labels[i], weights));
    return losses;
}

/// Combine per-level losses for stage k. level_wise sums levels 1..k and
/// keeps deeper levels out of the graph entirely; joint modes use the
/// normalized weight vector over all levels.
inline Var stage_loss(const std::vector<Var>& losses, int stage, LossMode mode) {
    if (stage < 1 || stage > static_cast<int>(losses.size()))
        throw ConfigError("stage_loss: stage out of range");
    if (mode == LossMode::LevelWise) {
        Var total = losses[0];
        for (int i = 1; i < stage; ++i) total = add(total, losses[static_cast<std::size_t>(i)]);
        return total;
    }
    auto w = joint_weights(mode, static_cast<int>(losses.size()));
    Var total = scale(losses[0], static_cast<float>(w[0]));
    for (std::size_t i = 1; i < losses.size(); ++i)
        total = add(total, scale(losses[i], static_cast<float>(w[i])));
    return total;
}

inline double stage_loss_value(const std::vector<double>& losses, int stage, LossMode mode) {
    if (stage < 1 || stage > static_cast<int>(losses.size()))
        throw ConfigError("stage_loss: stage out of range");
    if (mode == LossMode::LevelWise) {
        double s = 0;
        for (int i = 0; i < stage; ++i) s += losses[static_cast<std::size_t>(i)];
        return s;
    }
    auto w = joint_weights(mode, static_cast<int>(losses.size()));
    double s = 0;
    for (std::size_t i = 0; i < losses.size(); ++i) s += w[i] * losses[i];
    return s;
}

/// Random horizontal flip (p = 1/2) followed by a translation of 0-2 pixels
/// per axis; the image pads by edge replication, the label by ignore_index.
inline void augment(Tensor& image, LabelImage& label, std::mt19937& rng) {
    int H = label.height, W = label.width;
    if (image.dim(1) != H || image.dim(2) != W) throw ShapeError("augment: size mismatch");
    bool flip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    int dy = std::uniform_int_distribution<int>(0, 2)(rng);
    int dx = std::uniform_int_distribution<int>(0, 2)(rng);
    if (flip) {
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W / 2; ++x)
                    std::swap(image.at(c, y, x), image.at(c, y, W - 1 - x));
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W / 2; ++x) std::swap(label.at(y, x), label.at(y, W - 1 - x));
    }
    if (dy == 0 && dx == 0) return;
    Tensor img2 = image;
    LabelImage lab2 = label;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            int sy = y - dy, sx = x - dx;
            for (int c = 0; c < 3; ++c)
                img2.at(c, y, x) = image.at(c, std::max(sy, 0), std::max(sx, 0));
            lab2.at(y, x) = (sy < 0 || sx < 0) ? label.ignore_index : label.at(sy, sx);
        }
    image = std::move(img2);
    label = std::move(lab2);
}

/// Adam with L2 weight decay folded into the gradient.
struct Adam {
    std::vector<Param*> params;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 0;
    long long t = 0;

    void zero_grad() {
        for (auto* p : params) p->zero_grad();
    }

    void step(double lr) {
        ++t;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (auto* p : params) {
            for (std::size_t i = 0; i < p->value.size(); ++i) {
                double g = p->grad.data[i] + weight_decay * p->value.data[i];
                double m = beta1 * p->adam_m.data[i] + (1 - beta1) * g;
                double v = beta2 * p->adam_v.data[i] + (1 - beta2) * g * g;
                p->adam_m.data[i] = static_cast<float>(m);
                p->adam_v.data[i] = static_cast<float>(v);
                p->value.data[i] -=
                    static_cast<float>(lr * (m / bc1) / (std::sqrt(v / bc2) + eps));
            }
        }
    }
};

struct EpochRecord {
    int epoch = 0;       // global epoch index
    int stage = 0;
    double mean_loss = 0;
    std::map<int, double> val_miou;  // level -> mIoU at full resolution
    double final_miou = 0;           // finest reconstructed level, upsampled
};

struct TrainResult {
    std::vector<EpochRecord> epochs;
    std::vector<double> class_weights;
    long long iterations = 0;
};

/// Per-level validation mIoU: each reconstructed target is bilinearly
/// upsampled to full resolution, argmaxed, and scored against the full-size
/// ground truth.
inline std::map<int, double> evaluate_levels(RPNet& model, const Dataset& ds, int max_level) {
    NoGradGuard ng;
    ForwardCtx ctx{false, nullptr};
    int C = model.cfg.num_classes;
    std::map<int, ConfusionMatrix> cms;
    for (int l = 1; l <= max_level; ++l) cms.emplace(l, ConfusionMatrix(C));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        Sample s = ds.get(i);
        int H = s.label.height, W = s.label.width;
        Tensor batch({1, 3, H, W});
        batch.data = s.image.data;
        auto out = model.forward(make_var(std::move(batch)), ctx);
        for (int l = 1; l <= max_level; ++l) {
            const Tensor& t = out.targets[static_cast<std::size_t>(l - 1)]->value;
            LogitMap lm{Tensor({C, t.dim(2), t.dim(3)}), {1, 1}};
            std::copy(t.data.begin(), t.data.end(), lm.data.data.begin());
            LabelImage pred = final_prediction(lm, H, W);
            update_confusion(cms.at(l), pred, s.label);
        }
    }
    std::map<int, double> result;
    for (int l = 1; l <= max_level; ++l) result[l] = mean_iou(cms.at(l)).mean.value_or(0.0);
    return result;
}

/// Top-down level-wise training (or single-pass joint training for the
/// weighted-loss modes). Stage k optimizes the cumulative loss over levels
/// 1..k; earlier levels stay trainable unless freeze_earlier_levels is set.
inline TrainResult train(RPNet& model, const Dataset& train_ds, const Dataset& val_ds,
                         TrainConfig cfg, std::ostream* metrics_log = nullptr,
                         const std::function<void(int stage)>& on_stage_end = {}) {
    cfg.validate();
    const int num_levels = 3;
    if (static_cast<int>(cfg.stage_plan.size()) > num_levels)
        throw ConfigError("train: stage_plan has more stages than pyramid levels");

    TrainResult result;
    auto freq = train_ds.class_frequencies();
    result.class_weights = class_weights(freq, cfg.class_weight_k);
    std::vector<float> wf(result.class_weights.begin(), result.class_weights.end());

    // joint modes train every level from scratch in a single pass
    std::vector<std::pair<int, int>> plan = cfg.stage_plan;
    if (cfg.loss_mode != LossMode::LevelWise) {
        int total_epochs = 0;
        for (auto& [lvl, e] : cfg.stage_plan) total_epochs += e;
        plan = {{num_levels, total_epochs}};
    }

    std::mt19937 rng(cfg.seed);
    std::size_t n = train_ds.size();
    if (n == 0) throw DataError("train: empty training split");
    long long steps_per_epoch = static_cast<long long>((n + cfg.batch_size - 1) / cfg.batch_size);
    if (cfg.max_iter <= 0) {
        long long total_epochs = 0;
        for (auto [lvl, e] : plan) total_epochs += e;
        cfg.max_iter = total_epochs * steps_per_epoch;
    }

    Adam opt;
    opt.params = model.parameters();
    opt.weight_decay = cfg.weight_decay;

    long long iter = 0;
    int global_epoch = 0;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    std::vector<Param*> frozen;
    for (auto [stage_level, epochs] : plan) {
        int k = stage_level;
        if (cfg.freeze_earlier_levels && cfg.loss_mode == LossMode::LevelWise && k > 1) {
            // freeze everything except the predictor of the level being added
            std::vector<Param*> trainable;
            if (model.predictors.kind == PredictorKind::Basic)
                (k == 2 ? model.predictors.bp2 : model.predictors.bp3).collect_params(trainable);
            else
                (k == 2 ? model.predictors.gp2 : model.predictors.gp3).collect_params(trainable);
            frozen.clear();
            for (auto* p : opt.params)
                if (std::find(trainable.begin(), trainable.end(), p) == trainable.end())
                    frozen.push_back(p);
        }
        for (int epoch = 0; epoch < epochs; ++epoch, ++global_epoch) {
            std::shuffle(order.begin(), order.end(), rng);
            double epoch_loss = 0;
            long long batches = 0;
            for (std::size_t start = 0; start < n; start += cfg.batch_size) {
                std::size_t bs = std::min<std::size_t>(cfg.batch_size, n - start);
                // assemble batch with augmentation and per-level label pyramids
                std::vector<Sample> samples;
                samples.reserve(bs);
                for (std::size_t b = 0; b < bs; ++b) {
                    Sample s = train_ds.get(order[start + b]);
                    augment(s.image, s.label, rng);
                    samples.push_back(std::move(s));
                }
                int H = samples[0].label.height, W = samples[0].label.width;
                PyramidSpec spec = PyramidSpec::standard(H, W);
                Tensor batch({static_cast<int>(bs), 3, H, W});
                std::vector<std::vector<LabelImage>> pyramids;
                for (std::size_t b = 0; b < bs; ++b) {
                    if (samples[b].label.height != H || samples[b].label.width != W)
                        throw ShapeError("train: mixed image sizes in one batch");
                    std::copy(samples[b].image.data.begin(), samples[b].image.data.end(),
                              batch.data.begin() + static_cast<std::ptrdiff_t>(
                                                       b * samples[b].image.data.size()));
                    pyramids.push_back(build_label_pyramid(samples[b].label, spec));
                }

                ForwardCtx ctx{true, &rng};
                auto out = model.forward(make_var(std::move(batch)), ctx);

                int levels_needed = cfg.loss_mode == LossMode::LevelWise ? k : num_levels;
                std::vector<Var> losses;
                std::vector<double> loss_vals;
                for (int l = 1; l <= num_levels; ++l) {
                    if (l > levels_needed) break;
                    std::vector<const LabelImage*> labs;
                    for (auto& p : pyramids) labs.push_back(&p[static_cast<std::size_t>(l - 1)]);
                    losses.push_back(
                        cross_entropy(out.targets[static_cast<std::size_t>(l - 1)], labs, wf));
                    loss_vals.push_back(losses.back()->value.data[0]);
                }
                Var total = stage_loss(losses, cfg.loss_mode == LossMode::LevelWise
                                                   ? k
                                                   : num_levels,
                                       cfg.loss_mode);
                float loss_v = total->value.data[0];
                if (!std::isfinite(loss_v))
                    throw DivergenceError("train: non-finite loss at stage " + std::to_string(k) +
                                              ", iteration " + std::to_string(iter),
                                          k, iter);

                opt.zero_grad();
                backward(total);
                for (auto* p : frozen) p->zero_grad();
                double lr = poly_lr(std::min(iter, cfg.max_iter), cfg);
                opt.step(lr);
                ++iter;
                ++batches;
                epoch_loss += loss_v;

                if (metrics_log && (iter % cfg.log_every == 0 || iter == 1)) {
                    std::ostringstream line;
                    line << "iter=" << iter << " stage=" << k << " lr=" << lr;
                    for (std::size_t l = 0; l < loss_vals.size(); ++l)
                        line << " loss" << (l + 1) << "=" << loss_vals[l];
                    line << " total=" << loss_v;
                    (*metrics_log) << line.str() << "\n";
                }
            }

            EpochRecord rec;
            rec.epoch = global_epoch;
            rec.stage = k;
            rec.mean_loss = batches ? epoch_loss / static_cast<double>(batches) : 0.0;
            rec.val_miou = evaluate_levels(model, val_ds, k);
            rec.final_miou = rec.val_miou.rbegin()->second;
            result.epochs.push_back(rec);
            if (metrics_log) {
                (*metrics_log) << "epoch=" << global_epoch << " stage=" << k
                               << " mean_loss=" << rec.mean_loss;
                for (auto [l, m] : rec.val_miou) (*metrics_log) << " miou" << l << "=" << m;
                (*metrics_log) << "\n";
                metrics_log->flush();
            }
        }
        if (on_stage_end) on_stage_end(k);
    }
    result.iterations = iter;
    return result;
}

}  // namespace rpnet

#endif
