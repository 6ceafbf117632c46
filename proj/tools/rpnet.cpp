// Command-line front end: train / eval / infer / profile / synth.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 training divergence,
// 1 anything else.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

#include <CLI11.hpp>

#include "rpnet/checkpoint.hpp"
#include "rpnet/config.hpp"
#include "rpnet/metrics.hpp"
#include "rpnet/training.hpp"

namespace fs = std::filesystem;
using namespace rpnet;

namespace {

void check_device() {
    const char* dev = std::getenv("RPNET_DEVICE");
    if (dev && std::string(dev) != "cpu")
        throw ConfigError(std::string("RPNET_DEVICE=") + dev +
                          " is not available; only 'cpu' is supported");
}

struct DataBundle {
    std::unique_ptr<Dataset> train, val;
    Palette palette;
    std::vector<std::string> class_names;
};

DataBundle make_datasets(const RunConfig& cfg) {
    DataBundle b;
    if (cfg.dataset.type == "synthetic") {
        b.train = std::make_unique<SyntheticDataset>(cfg.dataset.synth);
        SyntheticSpec vs = cfg.dataset.synth;
        vs.seed += 1;  // disjoint validation stream
        vs.num_images = cfg.dataset.val_images;
        b.val = std::make_unique<SyntheticDataset>(vs);
        b.palette = synthetic_palette(cfg.dataset.synth.num_classes);
        for (int c = 0; c < cfg.dataset.synth.num_classes; ++c)
            b.class_names.push_back("class" + std::to_string(c));
    } else if (cfg.dataset.type == "camvid") {
        DatasetSpec spec = load_class_table(cfg.dataset.class_table);
        spec.root = cfg.dataset.root;
        b.palette = spec.palette;
        b.class_names = spec.class_names;
        b.train = std::make_unique<CamVidDataset>(spec, cfg.dataset.train_split);
        b.val = std::make_unique<CamVidDataset>(spec, cfg.dataset.val_split);
    } else {
        std::vector<int> id_map;
        DatasetSpec spec = load_class_table(cfg.dataset.class_table, &id_map);
        spec.root = cfg.dataset.root;
        b.palette = spec.palette;
        b.class_names = spec.class_names;
        b.train = std::make_unique<CityscapesDataset>(spec, id_map, cfg.dataset.train_split);
        b.val = std::make_unique<CityscapesDataset>(spec, id_map, cfg.dataset.val_split);
    }
    return b;
}

ModelConfig model_config(const RunConfig& cfg, int num_classes) {
    ModelConfig mc;
    mc.num_classes = num_classes;
    mc.residual_mode = residual_mode_from(cfg.residual_mode);
    mc.predictor = predictor_kind_from(cfg.predictor);
    mc.dropout_section1 = static_cast<float>(cfg.dropout_section1);
    mc.dropout_section23 = static_cast<float>(cfg.dropout_section23);
    mc.init_seed = cfg.seed;
    return mc;
}

Palette default_palette(int num_classes) {
    if (num_classes <= 6) return synthetic_palette(num_classes);
    Palette p = {{128, 64, 128}, {244, 35, 232}, {70, 70, 70},   {102, 102, 156}, {190, 153, 153},
                 {153, 153, 153}, {250, 170, 30}, {220, 220, 0},  {107, 142, 35},  {152, 251, 152},
                 {70, 130, 180},  {220, 20, 60},  {255, 0, 0},    {0, 0, 142},     {0, 0, 70},
                 {0, 60, 100},    {0, 80, 100},   {0, 0, 230},    {119, 11, 32},   {255, 255, 255}};
    while (static_cast<int>(p.size()) < num_classes) {
        auto i = static_cast<std::uint8_t>(p.size());
        p.push_back({static_cast<std::uint8_t>(37 * i), static_cast<std::uint8_t>(91 * i),
                     static_cast<std::uint8_t>(151 * i)});
    }
    p.resize(static_cast<std::size_t>(num_classes));
    return p;
}

std::string timestamp_now() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", std::localtime(&t));
    return buf;
}

/// Reflect-pad an image tensor on the bottom/right to the next multiple of 8.
Tensor reflect_pad_to_multiple8(const Tensor& img, int& padded_h, int& padded_w) {
    int H = img.dim(1), W = img.dim(2);
    padded_h = (H + 7) / 8 * 8;
    padded_w = (W + 7) / 8 * 8;
    if (padded_h == H && padded_w == W) return img;
    Tensor out({3, padded_h, padded_w});
    auto reflect = [](int i, int n) { return i < n ? i : 2 * n - 2 - i; };
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < padded_h; ++y)
            for (int x = 0; x < padded_w; ++x)
                out.at(c, y, x) = img.at(c, reflect(y, H), reflect(x, W));
    return out;
}

LogitMap logits_of(const Var& target, Fraction scale) {
    const Tensor& t = target->value;
    LogitMap lm{Tensor({t.dim(1), t.dim(2), t.dim(3)}), scale};
    std::copy(t.data.begin(), t.data.end(), lm.data.data.begin());
    return lm;
}

int cmd_train(const std::string& config_path, const std::string& resume) {
    RunConfig cfg = load_run_config(config_path);
    DataBundle data = make_datasets(cfg);
    if (data.train->size() == 0) throw DataError("train: no samples in training split");

    RPNet model(model_config(cfg, data.train->num_classes()));
    if (!resume.empty()) {
        RPNet restored = load_checkpoint(resume);
        if (restored.cfg.num_classes != model.cfg.num_classes ||
            restored.cfg.residual_mode != model.cfg.residual_mode ||
            restored.cfg.predictor != model.cfg.predictor)
            throw ConfigError("resume: checkpoint topology does not match config");
        model = std::move(restored);
    }

    fs::path run_dir = fs::path(cfg.out_dir) / (config_hash(cfg) + "-" + timestamp_now());
    fs::create_directories(run_dir);
    {
        std::ofstream out(run_dir / "config.json");
        out << run_config_json(cfg).dump(2) << "\n";
    }
    std::ofstream metrics(run_dir / "metrics.log");

    auto result = train(model, *data.train, *data.val, cfg.train, &metrics, [&](int stage) {
        save_checkpoint(model, (run_dir / ("stage" + std::to_string(stage) + ".ckpt")).string());
    });
    save_checkpoint(model, (run_dir / "checkpoint.ckpt").string());

    Sample probe = data.train->get(0);
    auto prof = count_params_macs(model, probe.label.height, probe.label.width);
    const EpochRecord& last = result.epochs.back();
    nlohmann::json miou;
    for (auto [l, m] : last.val_miou) miou["level" + std::to_string(l)] = m;
    nlohmann::json summary = {{"config", run_config_json(cfg)},
                              {"iterations", result.iterations},
                              {"class_weights", result.class_weights},
                              {"val_miou", miou},
                              {"final_miou", last.final_miou},
                              {"params", prof.params},
                              {"macs", prof.macs},
                              {"flops_2x_macs", prof.flops}};
    std::ofstream(run_dir / "summary.json") << summary.dump(2) << "\n";

    std::cout << "run_dir=" << run_dir.string() << "\n"
              << "final_miou=" << last.final_miou << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& config_path,
             const std::string& split, const std::string& level_arg, const std::string& out_path) {
    RPNet model = load_checkpoint(ckpt_path);
    RunConfig cfg = load_run_config(config_path);
    DataBundle data = make_datasets(cfg);
    Dataset& ds = split == "train" ? *data.train : *data.val;
    if (ds.size() == 0) throw DataError("eval: no samples in split '" + split + "'");
    if (ds.num_classes() != model.cfg.num_classes)
        throw ConfigError("eval: dataset has " + std::to_string(ds.num_classes()) +
                          " classes but checkpoint expects " +
                          std::to_string(model.cfg.num_classes));
    int level = level_arg == "final" ? 3 : std::stoi(level_arg);
    if (level < 1 || level > 3) throw ConfigError("eval: level must be 1, 2, 3 or final");

    NoGradGuard ng;
    ForwardCtx ctx{false, nullptr};
    ConfusionMatrix cm(model.cfg.num_classes);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        Sample s = ds.get(i);
        Tensor batch({1, 3, s.label.height, s.label.width});
        batch.data = s.image.data;
        auto out = model.forward(make_var(std::move(batch)), ctx);
        PyramidSpec spec = PyramidSpec::standard(s.label.height, s.label.width);
        LogitMap lm = logits_of(out.targets[static_cast<std::size_t>(level - 1)],
                                spec.levels[static_cast<std::size_t>(level - 1)].scale);
        LabelImage pred = final_prediction(lm, s.label.height, s.label.width);
        update_confusion(cm, pred, s.label);
    }
    auto iou = mean_iou(cm);
    std::ostringstream report;
    report << "level = " << level_arg << "\n";
    for (int c = 0; c < cm.num_classes; ++c) {
        std::string name = c < static_cast<int>(data.class_names.size())
                               ? data.class_names[static_cast<std::size_t>(c)]
                               : "class" + std::to_string(c);
        report << "iou." << name << " = ";
        if (iou.per_class[static_cast<std::size_t>(c)])
            report << *iou.per_class[static_cast<std::size_t>(c)] << "\n";
        else
            report << "absent\n";
    }
    report << "mean_iou = " << iou.mean.value_or(0.0) << "\n";
    std::cout << report.str();
    if (!out_path.empty()) std::ofstream(out_path) << report.str();
    return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& image_path,
              const std::string& out_path, bool dump_pyramid, const std::string& class_table) {
    RPNet model = load_checkpoint(ckpt_path);
    Tensor img = read_image(image_path);
    int H = img.dim(1), W = img.dim(2);
    int ph = 0, pw = 0;
    Tensor padded = reflect_pad_to_multiple8(img, ph, pw);

    Palette palette = class_table.empty() ? default_palette(model.cfg.num_classes)
                                          : load_class_table(class_table).palette;
    if (static_cast<int>(palette.size()) < model.cfg.num_classes)
        throw ConfigError("infer: palette smaller than the model's class count");

    NoGradGuard ng;
    ForwardCtx ctx{false, nullptr};
    Tensor batch({1, 3, ph, pw});
    batch.data = padded.data;
    auto out = model.forward(make_var(std::move(batch)), ctx);
    PyramidSpec spec = PyramidSpec::standard(ph, pw);

    auto predict_full = [&](int level) {
        LogitMap lm = logits_of(out.targets[static_cast<std::size_t>(level - 1)],
                                spec.levels[static_cast<std::size_t>(level - 1)].scale);
        LogitMap up = upsample_bilinear(lm, ph, pw);
        // crop the padding back off before the argmax
        LogitMap crop{Tensor({up.channels(), H, W}), {1, 1}};
        for (int c = 0; c < up.channels(); ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) crop.data.at(c, y, x) = up.data.at(c, y, x);
        return argmax_labels(crop, model.cfg.num_classes);
    };

    LabelImage final_pred = predict_full(3);
    write_label_color(final_pred, palette, out_path);
    if (dump_pyramid) {
        fs::path p(out_path);
        for (int l = 1; l <= 3; ++l) {
            fs::path lp = p.parent_path() / (p.stem().string() + "_level" + std::to_string(l) +
                                             p.extension().string());
            write_label_color(predict_full(l), palette, lp.string());
        }
    }
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

std::vector<std::pair<int, int>> parse_sizes(const std::string& arg) {
    if (arg.empty()) return paper_benchmark_sizes();
    std::vector<std::pair<int, int>> sizes;
    std::istringstream in(arg);
    std::string tok;
    while (std::getline(in, tok, ',')) {
        auto x = tok.find('x');
        if (x == std::string::npos) throw ConfigError("profile: sizes must look like WxH,WxH");
        int w = std::stoi(tok.substr(0, x));
        int h = std::stoi(tok.substr(x + 1));
        sizes.push_back({h, w});
    }
    return sizes;
}

int cmd_profile(const std::string& config_path, const std::string& ckpt_path,
                const std::string& sizes_arg, bool benchmark, int warmup, int repeats,
                const std::string& out_path) {
    std::unique_ptr<RPNet> model;
    if (!ckpt_path.empty()) {
        model = std::make_unique<RPNet>(load_checkpoint(ckpt_path));
    } else if (!config_path.empty()) {
        RunConfig cfg = load_run_config(config_path);
        int classes = cfg.dataset.type == "synthetic"
                          ? cfg.dataset.synth.num_classes
                          : load_class_table(cfg.dataset.class_table).num_classes;
        model = std::make_unique<RPNet>(model_config(cfg, classes));
    } else {
        throw ConfigError("profile: need --config or --checkpoint");
    }
    auto sizes = parse_sizes(sizes_arg);

    ProfileReport counts = count_params_macs(*model, sizes[0].first, sizes[0].second);
    std::ostringstream report;
    report << profile_report_keys(counts);
    report << "params.encoder = " << model->encoder_param_count() << "\n";
    report << "params.residual_predictors = " << model->predictors.residual_param_count() << "\n";
    if (benchmark) {
        ProfileReport lat = benchmark_latency(*model, sizes, warmup, repeats);
        report << profile_report_keys(lat) << "\n" << latency_table(lat);
    }
    std::cout << report.str();
    if (!out_path.empty()) std::ofstream(out_path) << report.str();
    return 0;
}

int cmd_synth(const std::string& out_dir, const SyntheticSpec& spec) {
    write_synthetic(spec, out_dir);
    std::cout << "wrote " << spec.num_images << " samples to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"residual-pyramid semantic segmentation"};
    app.require_subcommand(1);

    std::string config_path, resume, ckpt_path, split = "val", level = "final";
    std::string image_path, out_path, class_table, sizes_arg;
    bool dump_pyramid = false, benchmark = false;
    int warmup = 2, repeats = 10;
    SyntheticSpec synth_spec;
    std::string synth_out;

    auto* t = app.add_subcommand("train", "train a model from a config file");
    t->add_option("--config", config_path, "run config JSON")->required();
    t->add_option("--resume", resume, "checkpoint to restore before training");

    auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    e->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    e->add_option("--config", config_path, "run config describing the dataset")->required();
    e->add_option("--split", split, "train or val (default val)");
    e->add_option("--level", level, "pyramid level: 1, 2, 3 or final");
    e->add_option("--out", out_path, "also write the report to this file");

    auto* i = app.add_subcommand("infer", "segment a single image");
    i->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    i->add_option("--image", image_path, "input image")->required();
    i->add_option("--out", out_path, "output PNG")->required();
    i->add_flag("--dump-pyramid", dump_pyramid, "also write each level's prediction");
    i->add_option("--class-table", class_table, "class table JSON for the palette");

    auto* p = app.add_subcommand("profile", "report parameters, MACs and latency");
    p->add_option("--config", config_path, "run config (fresh model)");
    p->add_option("--checkpoint", ckpt_path, "model checkpoint");
    p->add_option("--sizes", sizes_arg, "comma-separated WxH grid (default paper grid)");
    p->add_flag("--benchmark", benchmark, "time forward passes at each size");
    p->add_option("--warmup", warmup, "warmup iterations per size");
    p->add_option("--repeats", repeats, "timed iterations per size (>= 10)");
    p->add_option("--out", out_path, "also write the report to this file");

    auto* s = app.add_subcommand("synth", "write a synthetic dataset to disk");
    s->add_option("--out", synth_out, "output directory")->required();
    s->add_option("--seed", synth_spec.seed, "generator seed");
    s->add_option("--num-images", synth_spec.num_images, "sample count");
    s->add_option("--image-size", synth_spec.image_size, "square size, multiple of 8");
    s->add_option("--num-classes", synth_spec.num_classes, "classes incl. background (2-6)");
    s->add_option("--shapes", synth_spec.shapes_per_image, "shapes per image (0-8)");
    s->add_option("--noise", synth_spec.noise, "additive noise amplitude");

    CLI11_PARSE(app, argc, argv);

    try {
        check_device();
        if (t->parsed()) return cmd_train(config_path, resume);
        if (e->parsed()) return cmd_eval(ckpt_path, config_path, split, level, out_path);
        if (i->parsed()) return cmd_infer(ckpt_path, image_path, out_path, dump_pyramid,
                                          class_table);
        if (p->parsed())
            return cmd_profile(config_path, ckpt_path, sizes_arg, benchmark, warmup, repeats,
                               out_path);
        if (s->parsed()) return cmd_synth(synth_out, synth_spec);
    } catch (const DivergenceError& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 4;
    } catch (const ConfigError& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 2;
    } catch (const DataError& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 3;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
    return 0;
}
