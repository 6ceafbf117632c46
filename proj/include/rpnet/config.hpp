#ifndef RPNET_CONFIG_HPP
#define RPNET_CONFIG_HPP

#include <fstream>
#include <set>

#include <json.hpp>

#include "rpnet/data.hpp"
#include "rpnet/training.hpp"

namespace rpnet {

// Experiment configuration file. Parsing is strict: an unknown key anywhere
// is an error, so a config that parses today reproduces the same run later.

struct DatasetConfig {
    std::string type = "synthetic";  // synthetic | camvid | cityscapes
    // synthetic
    SyntheticSpec synth;
    int val_images = 16;
    // disk datasets
    std::string root;
    std::string train_split = "train";
    std::string val_split = "val";
    std::string class_table;  // path to the class/palette table JSON
};

struct RunConfig {
    unsigned seed = 0;
    std::string out_dir = "runs";
    DatasetConfig dataset;
    std::string residual_mode = "sr";
    std::string predictor = "bp";
    double dropout_section1 = 0.01;
    double dropout_section23 = 0.1;
    TrainConfig train;
};

namespace detail {
inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
}
}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    detail::check_keys(j, {"seed", "out_dir", "dataset", "model", "train"}, "top level");
    RunConfig c;
    c.seed = j.value("seed", 0u);
    c.out_dir = j.value("out_dir", std::string("runs"));

    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        detail::check_keys(d,
                           {"type", "seed", "num_images", "image_size", "num_classes",
                            "shapes_per_image", "noise", "val_images", "root", "train_split",
                            "val_split", "class_table"},
                           "dataset");
        c.dataset.type = d.value("type", std::string("synthetic"));
        if (c.dataset.type == "synthetic") {
            c.dataset.synth.seed = d.value("seed", 0u);
            c.dataset.synth.num_images = d.value("num_images", 64);
            c.dataset.synth.image_size = d.value("image_size", 64);
            c.dataset.synth.num_classes = d.value("num_classes", 4);
            c.dataset.synth.shapes_per_image = d.value("shapes_per_image", 6);
            c.dataset.synth.noise = d.value("noise", 0.05f);
            c.dataset.val_images = d.value("val_images", 16);
            c.dataset.synth.validate();
        } else if (c.dataset.type == "camvid" || c.dataset.type == "cityscapes") {
            if (!d.contains("root")) throw ConfigError("config: dataset.root required");
            c.dataset.root = d.at("root").get<std::string>();
            c.dataset.train_split = d.value("train_split", std::string("train"));
            c.dataset.val_split = d.value("val_split", std::string("val"));
            if (!d.contains("class_table"))
                throw ConfigError("config: dataset.class_table required for " + c.dataset.type);
            c.dataset.class_table = d.at("class_table").get<std::string>();
        } else {
            throw ConfigError("config: unknown dataset type '" + c.dataset.type + "'");
        }
    }

    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::check_keys(
            m, {"residual_mode", "predictor", "dropout_section1", "dropout_section23"}, "model");
        c.residual_mode = m.value("residual_mode", std::string("sr"));
        c.predictor = m.value("predictor", std::string("bp"));
        c.dropout_section1 = m.value("dropout_section1", 0.01);
        c.dropout_section23 = m.value("dropout_section23", 0.1);
        residual_mode_from(c.residual_mode);
        predictor_kind_from(c.predictor);
    }

    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::check_keys(t,
                           {"base_lr", "lr_power", "weight_decay", "batch_size", "class_weight_k",
                            "max_iter", "stage_plan", "loss_mode", "freeze_earlier_levels",
                            "log_every"},
                           "train");
        c.train.base_lr = t.value("base_lr", 5e-4);
        c.train.lr_power = t.value("lr_power", 0.9);
        c.train.weight_decay = t.value("weight_decay", 1e-4);
        c.train.batch_size = t.value("batch_size", 3);
        c.train.class_weight_k = t.value("class_weight_k", 1.12);
        c.train.max_iter = t.value("max_iter", 0LL);
        c.train.loss_mode = loss_mode_from(t.value("loss_mode", std::string("level_wise")));
        c.train.freeze_earlier_levels = t.value("freeze_earlier_levels", false);
        c.train.log_every = t.value("log_every", 10);
        if (t.contains("stage_plan")) {
            c.train.stage_plan.clear();
            for (const auto& s : t.at("stage_plan"))
                c.train.stage_plan.push_back({s.at(0).get<int>(), s.at(1).get<int>()});
        }
    }
    c.train.seed = c.seed;
    c.train.validate();
    return c;
}

inline nlohmann::json run_config_json(const RunConfig& c) {
    nlohmann::json d;
    d["type"] = c.dataset.type;
    if (c.dataset.type == "synthetic") {
        d["seed"] = c.dataset.synth.seed;
        d["num_images"] = c.dataset.synth.num_images;
        d["image_size"] = c.dataset.synth.image_size;
        d["num_classes"] = c.dataset.synth.num_classes;
        d["shapes_per_image"] = c.dataset.synth.shapes_per_image;
        d["noise"] = c.dataset.synth.noise;
        d["val_images"] = c.dataset.val_images;
    } else {
        d["root"] = c.dataset.root;
        d["train_split"] = c.dataset.train_split;
        d["val_split"] = c.dataset.val_split;
        d["class_table"] = c.dataset.class_table;
    }
    nlohmann::json plan = nlohmann::json::array();
    for (auto [l, e] : c.train.stage_plan) plan.push_back({l, e});
    return {{"seed", c.seed},
            {"out_dir", c.out_dir},
            {"dataset", d},
            {"model",
             {{"residual_mode", c.residual_mode},
              {"predictor", c.predictor},
              {"dropout_section1", c.dropout_section1},
              {"dropout_section23", c.dropout_section23}}},
            {"train",
             {{"base_lr", c.train.base_lr},
              {"lr_power", c.train.lr_power},
              {"weight_decay", c.train.weight_decay},
              {"batch_size", c.train.batch_size},
              {"class_weight_k", c.train.class_weight_k},
              {"max_iter", c.train.max_iter},
              {"stage_plan", plan},
              {"loss_mode", loss_mode_name(c.train.loss_mode)},
              {"freeze_earlier_levels", c.train.freeze_earlier_levels},
              {"log_every", c.train.log_every}}}};
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: parse error in " + path + ": " + e.what());
    }
    return parse_run_config(j);
}

/// FNV-1a hash of the canonical config serialization; names run directories.
inline std::string config_hash(const RunConfig& c) {
    std::string s = run_config_json(c).dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%08x", static_cast<unsigned>(h & 0xffffffffu));
    return buf;
}

}  // namespace rpnet

#endif
