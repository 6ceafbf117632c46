#ifndef RPNET_METRICS_HPP
#define RPNET_METRICS_HPP

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "rpnet/model.hpp"

namespace rpnet {

/// Rows are ground truth, columns are prediction. Ignore pixels contribute
/// nothing. Merging partial matrices is plain elementwise addition.
struct ConfusionMatrix {
    int num_classes = 0;
    std::vector<std::uint64_t> counts;

    explicit ConfusionMatrix(int classes = 0)
        : num_classes(classes),
          counts(static_cast<std::size_t>(classes) * classes, 0) {}

    std::uint64_t& at(int gt, int pred) {
        return counts[static_cast<std::size_t>(gt) * num_classes + pred];
    }
    std::uint64_t at(int gt, int pred) const {
        return counts[static_cast<std::size_t>(gt) * num_classes + pred];
    }
    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto c : counts) t += c;
        return t;
    }
    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
        return *this;
    }
};

inline void update_confusion(ConfusionMatrix& cm, const LabelImage& pred, const LabelImage& gt) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw ShapeError("update_confusion: size mismatch");
    for (std::size_t i = 0; i < gt.data.size(); ++i) {
        std::int32_t g = gt.data[i];
        if (g == gt.ignore_index) continue;
        std::int32_t p = pred.data[i];
        if (g < 0 || g >= cm.num_classes || p < 0 || p >= cm.num_classes)
            throw DataError("update_confusion: class index out of range (gt=" + std::to_string(g) +
                            ", pred=" + std::to_string(p) + ")");
        ++cm.at(g, p);
    }
}

struct IouResult {
    std::vector<std::optional<double>> per_class;  // nullopt when TP+FP+FN == 0
    std::optional<double> mean;                    // unweighted over defined classes
};

/// PASCAL VOC IoU: TP / (TP + FP + FN) per class. Classes with an empty
/// denominator are excluded from the mean by default; with
/// absent_counts_as_zero they contribute zero instead.
inline IouResult mean_iou(const ConfusionMatrix& cm, bool absent_counts_as_zero = false) {
    IouResult r;
    r.per_class.resize(static_cast<std::size_t>(cm.num_classes));
    double sum = 0;
    int n = 0;
    for (int c = 0; c < cm.num_classes; ++c) {
        std::uint64_t tp = cm.at(c, c), fp = 0, fn = 0;
        for (int k = 0; k < cm.num_classes; ++k) {
            if (k == c) continue;
            fp += cm.at(k, c);
            fn += cm.at(c, k);
        }
        std::uint64_t denom = tp + fp + fn;
        if (denom == 0) {
            if (absent_counts_as_zero) {
                r.per_class[static_cast<std::size_t>(c)] = 0.0;
                ++n;
            }
            continue;
        }
        double iou = static_cast<double>(tp) / static_cast<double>(denom);
        r.per_class[static_cast<std::size_t>(c)] = iou;
        sum += iou;
        ++n;
    }
    if (n > 0) r.mean = sum / n;
    return r;
}

struct LatencyRow {
    int height = 0, width = 0;
    double mean_ms = 0;
    double fps = 0;
    int warmup = 0, repeats = 0;
    bool skipped = false;
    std::string note;
};

struct ProfileReport {
    std::size_t params = 0;
    long long macs = 0;
    long long flops = 0;  // always 2 * macs
    int input_height = 0, input_width = 0;
    std::vector<LatencyRow> latency;
};

/// Parameters plus multiply-accumulates of one forward pass. flops is
/// reported as 2*macs alongside; the paper's own tables mix the two
/// conventions, so both always appear.
inline ProfileReport count_params_macs(RPNet& model, int height, int width) {
    ProfileReport r;
    r.params = model.param_count();
    r.input_height = height;
    r.input_width = width;
    r.macs = model.count_macs(height, width);
    r.flops = 2 * r.macs;
    return r;
}

/// Times the full single-shot path (forward, reconstruction, final bilinear
/// upsample to input size, argmax) on the CPU. Data loading is excluded;
/// there is no host-device transfer to exclude. A size that fails to
/// allocate is skipped with a note rather than aborting the grid.
inline ProfileReport benchmark_latency(RPNet& model, const std::vector<std::pair<int, int>>& sizes,
                                       int warmup, int repeats) {
    if (repeats < 10) throw ConfigError("benchmark_latency: repeats must be >= 10");
    ProfileReport r;
    r.params = model.param_count();
    NoGradGuard ng;
    ForwardCtx ctx{false, nullptr};
    for (auto [h, w] : sizes) {
        LatencyRow row;
        row.height = h;
        row.width = w;
        row.warmup = warmup;
        row.repeats = repeats;
        try {
            Var img = make_var(Tensor::full({1, 3, h, w}, 0.5f));
            auto run_once = [&] {
                auto out = model.forward(img, ctx);
                LogitMap top{Tensor({model.cfg.num_classes, out.targets.back()->value.dim(2),
                                     out.targets.back()->value.dim(3)}),
                             {1, 2}};
                std::copy(out.targets.back()->value.data.begin(),
                          out.targets.back()->value.data.end(), top.data.data.begin());
                LabelImage pred = final_prediction(top, h, w);
                return pred.data[0];
            };
            for (int i = 0; i < warmup; ++i) run_once();
            auto t0 = std::chrono::steady_clock::now();
            for (int i = 0; i < repeats; ++i) run_once();
            auto t1 = std::chrono::steady_clock::now();
            row.mean_ms = std::chrono::duration<double, std::milli>(t1 - t0).count() / repeats;
            row.fps = 1000.0 / row.mean_ms;
        } catch (const std::bad_alloc&) {
            row.skipped = true;
            row.note = "skipped: allocation failed at this size";
        }
        r.latency.push_back(row);
    }
    return r;
}

/// Structured key=value serialization of a report.
inline std::string profile_report_keys(const ProfileReport& r) {
    std::ostringstream os;
    os << "params = " << r.params << "\n";
    if (r.macs > 0) {
        os << "input = " << r.input_height << "x" << r.input_width << "\n";
        os << "macs = " << r.macs << "\n";
        os << "flops_2x_macs = " << r.flops << "\n";
    }
    for (const auto& row : r.latency) {
        os << "latency." << row.width << "x" << row.height << ".mean_ms = ";
        if (row.skipped)
            os << "skipped\n";
        else
            os << std::fixed << std::setprecision(3) << row.mean_ms << "\n"
               << "latency." << row.width << "x" << row.height << ".fps = "
               << std::setprecision(2) << row.fps << "\n";
    }
    return os.str();
}

/// Human-readable grid in the layout of the paper's latency table:
/// one column pair (ms, fps) per input size.
inline std::string latency_table(const ProfileReport& r) {
    std::ostringstream os;
    os << std::left << std::setw(12) << "size";
    for (const auto& row : r.latency) {
        std::string sz = std::to_string(row.width) + "x" + std::to_string(row.height);
        os << std::right << std::setw(12) << sz;
    }
    os << "\n" << std::left << std::setw(12) << "ms";
    for (const auto& row : r.latency) {
        if (row.skipped)
            os << std::right << std::setw(12) << "-";
        else
            os << std::right << std::setw(12) << std::fixed << std::setprecision(1) << row.mean_ms;
    }
    os << "\n" << std::left << std::setw(12) << "fps";
    for (const auto& row : r.latency) {
        if (row.skipped)
            os << std::right << std::setw(12) << "-";
        else
            os << std::right << std::setw(12) << std::fixed << std::setprecision(1) << row.fps;
    }
    os << "\n";
    return os.str();
}

/// The input-size grid of the paper's latency comparison.
inline std::vector<std::pair<int, int>> paper_benchmark_sizes() {
    return {{320, 480}, {360, 640}, {720, 1280}, {1080, 1920}};
}

}  // namespace rpnet

#endif
