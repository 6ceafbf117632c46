#ifndef RPNET_PYRAMID_HPP
#define RPNET_PYRAMID_HPP

#include <vector>

#include "rpnet/autograd.hpp"
#include "rpnet/tensor.hpp"

namespace rpnet {

// Additive pyramid algebra shared by training and inference. Conventions,
// used identically everywhere:
//   - bilinear sampling aligns pixel centers (half-pixel offset), edges
//     clamped; never corner-aligned
//   - nearest-neighbor resampling: target (y, x) reads source
//     (floor(y / scale), floor(x / scale))
//   - ignore pixels in labels propagate as ignore, never interpolated
//   - argmax ties break to the lowest class index

struct Fraction {
    int num = 1;
    int den = 1;

    double value() const { return static_cast<double>(num) / den; }
    bool operator==(const Fraction&) const = default;
};

inline bool operator<(const Fraction& a, const Fraction& b) {
    return static_cast<long long>(a.num) * b.den < static_cast<long long>(b.num) * a.den;
}

/// Per-class score map with scale metadata. data is C x H x W.
struct LogitMap {
    Tensor data;
    Fraction scale{1, 1};

    int channels() const { return data.dim(0); }
    int height() const { return data.dim(1); }
    int width() const { return data.dim(2); }
};

struct PyramidSpec {
    struct Level {
        int index;        // 1-based, 1 is the coarsest
        Fraction scale;   // fraction of base size
    };
    std::vector<Level> levels;
    int base_height = 0;
    int base_width = 0;

    void validate() const {
        if (levels.empty()) throw ConfigError("pyramid: no levels");
        for (std::size_t i = 0; i < levels.size(); ++i) {
            const auto& l = levels[i];
            if (l.index != static_cast<int>(i) + 1)
                throw ConfigError("pyramid: level indices must be 1..L in order");
            if (i > 0 && !(levels[i - 1].scale < l.scale))
                throw ConfigError("pyramid: scale must strictly increase with level");
            if ((static_cast<long long>(base_height) * l.scale.num) % l.scale.den != 0 ||
                (static_cast<long long>(base_width) * l.scale.num) % l.scale.den != 0)
                throw ShapeError("pyramid: scale " + std::to_string(l.scale.num) + "/" +
                                 std::to_string(l.scale.den) + " does not divide base size " +
                                 std::to_string(base_height) + "x" + std::to_string(base_width));
        }
    }

    int num_levels() const { return static_cast<int>(levels.size()); }
    int level_height(int level) const {
        const auto& s = levels.at(static_cast<std::size_t>(level - 1)).scale;
        return static_cast<int>(static_cast<long long>(base_height) * s.num / s.den);
    }
    int level_width(int level) const {
        const auto& s = levels.at(static_cast<std::size_t>(level - 1)).scale;
        return static_cast<int>(static_cast<long long>(base_width) * s.num / s.den);
    }

    /// The standard three-level layout used by the backbone: 1/8, 1/4, 1/2.
    static PyramidSpec standard(int base_h, int base_w) {
        PyramidSpec s;
        s.base_height = base_h;
        s.base_width = base_w;
        s.levels = {{1, {1, 8}}, {2, {1, 4}}, {3, {1, 2}}};
        s.validate();
        return s;
    }
};

/// Nearest-neighbor label subsampling for every pyramid level.
inline std::vector<LabelImage> build_label_pyramid(const LabelImage& label,
                                                   const PyramidSpec& spec) {
    spec.validate();
    if (label.height != spec.base_height || label.width != spec.base_width)
        throw ShapeError("build_label_pyramid: label size " + std::to_string(label.height) + "x" +
                         std::to_string(label.width) + " does not match spec base size");
    std::vector<LabelImage> out;
    out.reserve(spec.levels.size());
    for (const auto& lvl : spec.levels) {
        int h = spec.level_height(lvl.index), w = spec.level_width(lvl.index);
        LabelImage scaled(h, w, label.num_classes, label.ignore_index);
        // source index = floor(y / scale) = y * den / num, exact by validate()
        for (int y = 0; y < h; ++y) {
            int sy = static_cast<int>(static_cast<long long>(y) * lvl.scale.den / lvl.scale.num);
            for (int x = 0; x < w; ++x) {
                int sx = static_cast<int>(static_cast<long long>(x) * lvl.scale.den / lvl.scale.num);
                scaled.at(y, x) = label.at(sy, sx);
            }
        }
        out.push_back(std::move(scaled));
    }
    return out;
}

inline LogitMap upsample_bilinear(const LogitMap& logits, int target_h, int target_w) {
    int C = logits.channels(), H = logits.height(), W = logits.width();
    if (target_h < H || target_w < W)
        throw ShapeError("upsample_bilinear: downscaling request " + std::to_string(H) + "x" +
                         std::to_string(W) + " -> " + std::to_string(target_h) + "x" +
                         std::to_string(target_w));
    LogitMap out;
    out.data = Tensor({C, target_h, target_w});
    bilinear_resize_plane(logits.data.data.data(), out.data.data.data(), C, H, W, target_h,
                          target_w);
    // scale metadata follows the height ratio
    out.scale = {logits.scale.num * target_h, logits.scale.den * H};
    return out;
}

/// Top-to-bottom additive reconstruction: target_1 = main,
/// target_i = upsample(target_{i-1}) + tres_i.
inline std::vector<LogitMap> reconstruct_targets(const LogitMap& main,
                                                 const std::vector<LogitMap>& residuals,
                                                 const PyramidSpec& spec) {
    spec.validate();
    if (static_cast<int>(residuals.size()) != spec.num_levels() - 1)
        throw ShapeError("reconstruct_targets: need one residual per level above the first");
    std::vector<LogitMap> targets;
    targets.push_back(main);
    for (int i = 2; i <= spec.num_levels(); ++i) {
        const LogitMap& res = residuals[static_cast<std::size_t>(i - 2)];
        if (res.channels() != main.channels())
            throw ShapeError("reconstruct_targets: residual channel count " +
                             std::to_string(res.channels()) + " != main " +
                             std::to_string(main.channels()));
        int h = spec.level_height(i), w = spec.level_width(i);
        if (res.height() != h || res.width() != w)
            throw ShapeError("reconstruct_targets: residual size mismatch at level " +
                             std::to_string(i));
        LogitMap up = upsample_bilinear(targets.back(), h, w);
        LogitMap t;
        t.data = up.data;
        t.scale = spec.levels[static_cast<std::size_t>(i - 1)].scale;
        for (std::size_t k = 0; k < t.data.size(); ++k) t.data.data[k] += res.data.data[k];
        targets.push_back(std::move(t));
    }
    return targets;
}

/// One-hot encode; ignore pixels become the all-zero vector.
inline Tensor onehot(const LabelImage& label) {
    Tensor t({label.num_classes, label.height, label.width});
    for (int y = 0; y < label.height; ++y)
        for (int x = 0; x < label.width; ++x) {
            std::int32_t v = label.at(y, x);
            if (v != label.ignore_index) t.at(v, y, x) = 1.f;
        }
    return t;
}

inline Tensor upsample_nearest(const Tensor& t, int target_h, int target_w) {
    int C = t.dim(0), H = t.dim(1), W = t.dim(2);
    Tensor out({C, target_h, target_w});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < target_h; ++y) {
            int sy = static_cast<int>(static_cast<long long>(y) * H / target_h);
            for (int x = 0; x < target_w; ++x) {
                int sx = static_cast<int>(static_cast<long long>(x) * W / target_w);
                out.at(c, y, x) = t.at(c, sy, sx);
            }
        }
    return out;
}

/// Signed one-hot label residuals: lres_i = onehot(label_i) -
/// upsample_nearest(onehot(label_{i-1})). Diagnostic only; the loss never
/// consumes these. lres_1 is defined as onehot(label_1) so the additive
/// identity holds from level 1.
inline std::vector<Tensor> label_residual_pyramid(const std::vector<LabelImage>& labels) {
    if (labels.empty()) throw ShapeError("label_residual_pyramid: empty pyramid");
    std::vector<Tensor> out;
    out.push_back(onehot(labels.front()));
    for (std::size_t i = 1; i < labels.size(); ++i) {
        Tensor hi = onehot(labels[i]);
        Tensor up = upsample_nearest(onehot(labels[i - 1]), labels[i].height, labels[i].width);
        if (!hi.same_shape(up)) throw ShapeError("label_residual_pyramid: shape mismatch");
        for (std::size_t k = 0; k < hi.size(); ++k) hi.data[k] -= up.data[k];
        out.push_back(std::move(hi));
    }
    return out;
}

/// Per-pixel argmax with lowest-index tie-break.
inline LabelImage argmax_labels(const LogitMap& logits, int num_classes_hint = 0) {
    int C = logits.channels(), H = logits.height(), W = logits.width();
    LabelImage out(H, W, num_classes_hint > 0 ? num_classes_hint : C);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            int best = 0;
            float bv = logits.data.at(0, y, x);
            for (int c = 1; c < C; ++c) {
                float v = logits.data.at(c, y, x);
                if (v > bv) { bv = v; best = c; }
            }
            out.at(y, x) = best;
        }
    return out;
}

/// Bilinear-upsample the finest reconstructed target to full resolution and
/// take the per-pixel argmax.
inline LabelImage final_prediction(const LogitMap& target_top, int full_h, int full_w) {
    LogitMap up = (target_top.height() == full_h && target_top.width() == full_w)
                      ? target_top
                      : upsample_bilinear(target_top, full_h, full_w);
    return argmax_labels(up);
}

}  // namespace rpnet

#endif
