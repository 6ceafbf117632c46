#ifndef RPNET_DATA_HPP
#define RPNET_DATA_HPP

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "rpnet/image_io.hpp"
#include "rpnet/pyramid.hpp"

namespace rpnet {

struct Sample {
    Tensor image;  // 3xHxW in [0,1]
    LabelImage label;
};

struct Dataset {
    virtual ~Dataset() = default;
    virtual std::size_t size() const = 0;
    virtual Sample get(std::size_t index) const = 0;
    virtual int num_classes() const = 0;
    virtual int ignore_index() const = 0;

    /// Per-class pixel frequency over the whole split, ignore excluded.
    std::vector<double> class_frequencies() const {
        std::vector<double> counts(static_cast<std::size_t>(num_classes()), 0.0);
        double total = 0;
        for (std::size_t i = 0; i < size(); ++i) {
            Sample s = get(i);
            for (auto v : s.label.data) {
                if (v == s.label.ignore_index) continue;
                counts[static_cast<std::size_t>(v)] += 1;
                total += 1;
            }
        }
        if (total > 0)
            for (auto& c : counts) c /= total;
        return counts;
    }
};

// ---------------------------------------------------------------------------
// Synthetic shapes dataset
// ---------------------------------------------------------------------------

struct SyntheticSpec {
    std::uint32_t seed = 0;
    int num_images = 64;
    int image_size = 64;
    int num_classes = 4;      // background + shape classes, 2..6
    int shapes_per_image = 6; // 1..8
    float noise = 0.05f;      // additive uniform noise amplitude

    void validate() const {
        if (num_classes < 2 || num_classes > 6)
            throw ConfigError("synthetic: num_classes must be in [2,6]");
        if (shapes_per_image < 0 || shapes_per_image > 8)
            throw ConfigError("synthetic: shapes_per_image must be in [0,8]");
        if (image_size < 8 || image_size % 8 != 0)
            throw ConfigError("synthetic: image_size must be a positive multiple of 8");
    }
};

inline Palette synthetic_palette(int num_classes) {
    static const Palette base = {
        {32, 32, 32},    // background
        {230, 25, 75},   // red
        {60, 180, 75},   // green
        {0, 130, 200},   // blue
        {255, 225, 25},  // yellow
        {145, 30, 180},  // purple
    };
    return Palette(base.begin(), base.begin() + num_classes);
}

/// Composes axis-aligned rectangles, disks and thin 2-3 px bars of distinct
/// per-class colors over a dark background, with per-pixel uniform noise.
/// The label is the exact shape mask. Same spec -> bit-identical output.
struct SyntheticDataset : Dataset {
    SyntheticSpec spec;
    Palette palette;

    explicit SyntheticDataset(const SyntheticSpec& s) : spec(s) {
        spec.validate();
        palette = synthetic_palette(spec.num_classes);
    }

    std::size_t size() const override { return static_cast<std::size_t>(spec.num_images); }
    int num_classes() const override { return spec.num_classes; }
    int ignore_index() const override { return 255; }

    Sample get(std::size_t index) const override {
        if (index >= size()) throw DataError("synthetic: index out of range");
        std::mt19937 rng(static_cast<std::uint32_t>(spec.seed * 1000003u + index * 7919u + 1u));
        const int S = spec.image_size;
        LabelImage label(S, S, spec.num_classes, 255);
        std::fill(label.data.begin(), label.data.end(), 0);

        std::uniform_int_distribution<int> coord(0, S - 1);
        std::uniform_int_distribution<int> kind_d(0, 2);
        for (int s = 0; s < spec.shapes_per_image; ++s) {
            // round-robin class assignment keeps every class represented
            int cls = 1 + s % (spec.num_classes - 1);
            int kind = kind_d(rng);
            if (kind == 0) {  // rectangle
                int h = std::uniform_int_distribution<int>(S / 8, S / 3)(rng);
                int w = std::uniform_int_distribution<int>(S / 8, S / 3)(rng);
                int y0 = std::uniform_int_distribution<int>(0, S - h)(rng);
                int x0 = std::uniform_int_distribution<int>(0, S - w)(rng);
                for (int y = y0; y < y0 + h; ++y)
                    for (int x = x0; x < x0 + w; ++x) label.at(y, x) = cls;
            } else if (kind == 1) {  // disk
                int r = std::uniform_int_distribution<int>(S / 12, S / 5)(rng);
                int cy = coord(rng), cx = coord(rng);
                for (int y = std::max(0, cy - r); y <= std::min(S - 1, cy + r); ++y)
                    for (int x = std::max(0, cx - r); x <= std::min(S - 1, cx + r); ++x)
                        if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r)
                            label.at(y, x) = cls;
            } else {  // thin bar, horizontal or vertical; 2 px minimum keeps
                       // it visible in the half-scale nearest-subsampled labels
                int thick = std::uniform_int_distribution<int>(2, 3)(rng);
                int len = std::uniform_int_distribution<int>(S / 3, S - 1)(rng);
                bool horizontal = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
                int p0 = std::uniform_int_distribution<int>(0, S - thick)(rng);
                int q0 = std::uniform_int_distribution<int>(0, S - len)(rng);
                for (int t = 0; t < thick; ++t)
                    for (int q = 0; q < len; ++q) {
                        if (horizontal)
                            label.at(p0 + t, q0 + q) = cls;
                        else
                            label.at(q0 + q, p0 + t) = cls;
                    }
            }
        }

        Tensor image({3, S, S});
        std::uniform_real_distribution<float> noise(-spec.noise, spec.noise);
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                const Rgb& c = palette[static_cast<std::size_t>(label.at(y, x))];
                for (int ch = 0; ch < 3; ++ch) {
                    float v = c[static_cast<std::size_t>(ch)] / 255.f + noise(rng);
                    image.at(ch, y, x) = std::min(std::max(v, 0.f), 1.f);
                }
            }
        return {std::move(image), std::move(label)};
    }
};

/// Materialize a synthetic dataset on disk: images/NNNN.png, labels/NNNN.png
/// (index-encoded) and spec.json.
inline void write_synthetic(const SyntheticSpec& spec, const std::filesystem::path& root) {
    SyntheticDataset ds(spec);
    std::filesystem::create_directories(root / "images");
    std::filesystem::create_directories(root / "labels");
    for (std::size_t i = 0; i < ds.size(); ++i) {
        Sample s = ds.get(i);
        char name[16];
        std::snprintf(name, sizeof name, "%04zu.png", i);
        write_image(s.image, (root / "images" / name).string());
        write_label_index(s.label, (root / "labels" / name).string());
    }
    nlohmann::json j = {{"seed", spec.seed},
                        {"num_images", spec.num_images},
                        {"image_size", spec.image_size},
                        {"num_classes", spec.num_classes},
                        {"shapes_per_image", spec.shapes_per_image},
                        {"noise", spec.noise}};
    std::ofstream out(root / "spec.json");
    out << j.dump(2) << "\n";
}

/// Render a prediction as a palette-colored PNG.
inline void export_prediction(const LabelImage& pred, const Palette& palette,
                              const std::string& path, Rgb void_color = {0, 0, 0}) {
    write_label_color(pred, palette, path, void_color);
}

// ---------------------------------------------------------------------------
// Directory-based datasets (CamVid / Cityscapes layouts)
// ---------------------------------------------------------------------------

struct DatasetSpec {
    std::string root;
    std::string split = "train";  // train | val | test
    int num_classes = 0;
    int ignore = 255;
    std::vector<std::string> class_names;
    Palette palette;

    void validate() const {
        if (static_cast<int>(class_names.size()) != num_classes)
            throw ConfigError("dataset: class_names length != num_classes");
        Palette sorted = palette;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw ConfigError("dataset: palette colors must be distinct");
    }
};

/// Loads a class-table file: {"num_classes", "ignore_index", "classes":
/// [{"name", "color":[r,g,b]}], optional "id_map": [raw -> train id]}.
inline DatasetSpec load_class_table(const std::string& path, std::vector<int>* id_map = nullptr) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open class table: " + path);
    nlohmann::json j;
    in >> j;
    DatasetSpec spec;
    spec.num_classes = j.at("num_classes").get<int>();
    spec.ignore = j.value("ignore_index", 255);
    for (const auto& c : j.at("classes")) {
        spec.class_names.push_back(c.at("name").get<std::string>());
        auto col = c.at("color");
        spec.palette.push_back({col.at(0).get<std::uint8_t>(), col.at(1).get<std::uint8_t>(),
                                col.at(2).get<std::uint8_t>()});
    }
    if (id_map && j.contains("id_map")) *id_map = j.at("id_map").get<std::vector<int>>();
    spec.validate();
    return spec;
}

/// CamVid in the common SegNet layout: root/<split>/*.png paired with
/// root/<split>annot/*.png (index-encoded labels).
struct CamVidDataset : Dataset {
    DatasetSpec spec;
    std::vector<std::filesystem::path> images, labels;

    CamVidDataset(DatasetSpec s, const std::string& split) : spec(std::move(s)) {
        spec.split = split;
        auto img_dir = std::filesystem::path(spec.root) / split;
        auto lab_dir = std::filesystem::path(spec.root) / (split + "annot");
        if (!std::filesystem::is_directory(img_dir))
            throw DataError("camvid: missing directory " + img_dir.string());
        for (const auto& e : std::filesystem::directory_iterator(img_dir))
            if (e.path().extension() == ".png") images.push_back(e.path());
        std::sort(images.begin(), images.end());
        if (images.empty()) throw DataError("camvid: no samples in " + img_dir.string());
        for (const auto& img : images) {
            auto lab = lab_dir / img.filename();
            if (!std::filesystem::exists(lab))
                throw DataError("camvid: missing label " + lab.string());
            labels.push_back(lab);
        }
    }

    std::size_t size() const override { return images.size(); }
    int num_classes() const override { return spec.num_classes; }
    int ignore_index() const override { return spec.ignore; }

    Sample get(std::size_t i) const override {
        Tensor img = read_image(images.at(i).string());
        LabelImage lab = read_label(labels.at(i).string(), spec.num_classes, spec.ignore,
                                    &spec.palette);
        // CamVid annot files encode void as the class-count index
        for (auto& v : lab.data)
            if (v >= spec.num_classes) v = spec.ignore;
        return {std::move(img), std::move(lab)};
    }
};

/// Cityscapes: root/leftImg8bit/<split>/<city>/*_leftImg8bit.png paired with
/// root/gtFine/<split>/<city>/*_gtFine_labelIds.png. Raw label ids are
/// remapped to the 19 train classes through id_map; everything else becomes
/// ignore. Training pairs are resized to 1024x512 (bilinear image, nearest
/// label); evaluation interpolates predictions back to 2048x1024.
struct CityscapesDataset : Dataset {
    DatasetSpec spec;
    std::vector<int> id_map;
    std::vector<std::filesystem::path> images, labels;
    bool downsample_for_training = true;

    CityscapesDataset(DatasetSpec s, std::vector<int> map, const std::string& split,
                      bool downsample = true)
        : spec(std::move(s)), id_map(std::move(map)), downsample_for_training(downsample) {
        spec.split = split;
        auto img_root = std::filesystem::path(spec.root) / "leftImg8bit" / split;
        if (!std::filesystem::is_directory(img_root))
            throw DataError("cityscapes: missing directory " + img_root.string());
        for (const auto& e : std::filesystem::recursive_directory_iterator(img_root))
            if (e.path().filename().string().ends_with("_leftImg8bit.png"))
                images.push_back(e.path());
        std::sort(images.begin(), images.end());
        if (images.empty()) throw DataError("cityscapes: no samples in " + img_root.string());
        for (const auto& img : images) {
            std::string name = img.filename().string();
            name.replace(name.find("_leftImg8bit.png"), std::string::npos, "_gtFine_labelIds.png");
            auto lab = std::filesystem::path(spec.root) / "gtFine" / split /
                       img.parent_path().filename() / name;
            if (!std::filesystem::exists(lab))
                throw DataError("cityscapes: missing label " + lab.string());
            labels.push_back(lab);
        }
    }

    std::size_t size() const override { return images.size(); }
    int num_classes() const override { return spec.num_classes; }
    int ignore_index() const override { return spec.ignore; }

    Sample get(std::size_t i) const override {
        Tensor img = read_image(images.at(i).string());
        LabelImage raw = read_label(labels.at(i).string(), 256, spec.ignore);
        LabelImage lab(raw.height, raw.width, spec.num_classes, spec.ignore);
        for (std::size_t k = 0; k < raw.data.size(); ++k) {
            int id = raw.data[k];
            int mapped = (id >= 0 && id < static_cast<int>(id_map.size())) ? id_map[id] : -1;
            lab.data[k] = mapped >= 0 ? mapped : spec.ignore;
        }
        if (downsample_for_training && (img.dim(1) != 512 || img.dim(2) != 1024)) {
            Tensor small({3, 512, 1024});
            bilinear_resize_plane(img.data.data(), small.data.data(), 3, img.dim(1),
                                  img.dim(2), 512, 1024);
            img = std::move(small);
            LabelImage ls(512, 1024, spec.num_classes, spec.ignore);
            for (int y = 0; y < 512; ++y)
                for (int x = 0; x < 1024; ++x)
                    ls.at(y, x) = lab.at(static_cast<int>(static_cast<long long>(y) * lab.height / 512),
                                         static_cast<int>(static_cast<long long>(x) * lab.width / 1024));
            lab = std::move(ls);
        }
        return {std::move(img), std::move(lab)};
    }
};

}  // namespace rpnet

#endif
