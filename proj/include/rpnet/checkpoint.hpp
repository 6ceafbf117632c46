#ifndef RPNET_CHECKPOINT_HPP
#define RPNET_CHECKPOINT_HPP

#include <fstream>
#include <map>

#include <json.hpp>

#include "rpnet/model.hpp"

namespace rpnet {

// Checkpoint archive: a JSON header describing the topology (enough to
// rebuild the network) followed by raw float32 tensors keyed by the
// hierarchical section.block.layer names, parameters first, then BN running
// statistics.
//
//   magic "RPNETCK1" | u64 header_len | header JSON |
//   u64 entry_count  | entries: u32 name_len, name, u32 ndim, i32 dims[],
//                               f32 data[]

namespace detail {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw DataError("checkpoint: truncated file");
    return v;
}

inline void write_tensor_entry(std::ostream& os, const std::string& name, const Tensor& t) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) write_pod<std::int32_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

inline std::pair<std::string, Tensor> read_tensor_entry(std::istream& is) {
    auto name_len = read_pod<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    auto ndim = read_pod<std::uint32_t>(is);
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = read_pod<std::int32_t>(is);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!is) throw DataError("checkpoint: truncated tensor " + name);
    return {std::move(name), std::move(t)};
}

}  // namespace detail

inline nlohmann::json model_config_json(const RPNet& model) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& s : model.backbone.block_specs)
        blocks.push_back({{"kind", bottleneck_kind_name(s.kind)},
                          {"in_channels", s.in_channels},
                          {"out_channels", s.out_channels},
                          {"dropout_rate", s.dropout_rate}});
    return {{"format", "rpnet-checkpoint"},
            {"num_classes", model.cfg.num_classes},
            {"residual_mode", residual_mode_name(model.cfg.residual_mode)},
            {"predictor", predictor_kind_name(model.cfg.predictor)},
            {"dropout_section1", model.cfg.dropout_section1},
            {"dropout_section23", model.cfg.dropout_section23},
            {"bottlenecks", blocks}};
}

inline void save_checkpoint(RPNet& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint: cannot write " + path);
    os.write("RPNETCK1", 8);
    std::string header = model_config_json(model).dump();
    detail::write_pod<std::uint64_t>(os, header.size());
    os.write(header.data(), static_cast<std::streamsize>(header.size()));

    auto params = model.parameters();
    std::vector<NamedBuffer> buffers;
    model.collect_buffers(buffers);
    detail::write_pod<std::uint64_t>(os, params.size() + buffers.size());
    for (auto* p : params) detail::write_tensor_entry(os, p->name, p->value);
    for (auto& [name, t] : buffers) detail::write_tensor_entry(os, name, *t);
    if (!os) throw DataError("checkpoint: write failed for " + path);
}

/// Rebuild the network described by the checkpoint header and restore every
/// tensor. Every archived entry must match a known name and shape.
inline RPNet load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != "RPNETCK1")
        throw DataError("checkpoint: bad magic in " + path);
    auto header_len = detail::read_pod<std::uint64_t>(is);
    std::string header(header_len, '\0');
    is.read(header.data(), static_cast<std::streamsize>(header_len));
    nlohmann::json j = nlohmann::json::parse(header);

    ModelConfig cfg;
    cfg.num_classes = j.at("num_classes").get<int>();
    cfg.residual_mode = residual_mode_from(j.at("residual_mode").get<std::string>());
    cfg.predictor = predictor_kind_from(j.at("predictor").get<std::string>());
    cfg.dropout_section1 = j.at("dropout_section1").get<float>();
    cfg.dropout_section23 = j.at("dropout_section23").get<float>();
    RPNet model(cfg);

    std::map<std::string, Tensor*> slots;
    for (auto* p : model.parameters()) slots[p->name] = &p->value;
    std::vector<NamedBuffer> buffers;
    model.collect_buffers(buffers);
    for (auto& [name, t] : buffers) slots[name] = t;

    auto count = detail::read_pod<std::uint64_t>(is);
    std::size_t restored = 0;
    for (std::uint64_t i = 0; i < count; ++i) {
        auto [name, t] = detail::read_tensor_entry(is);
        auto it = slots.find(name);
        if (it == slots.end()) throw DataError("checkpoint: unknown tensor " + name);
        if (it->second->shape != t.shape)
            throw DataError("checkpoint: shape mismatch for " + name);
        *it->second = std::move(t);
        ++restored;
    }
    if (restored != slots.size())
        throw DataError("checkpoint: incomplete archive (" + std::to_string(restored) + "/" +
                        std::to_string(slots.size()) + " tensors)");
    return model;
}

}  // namespace rpnet

#endif
