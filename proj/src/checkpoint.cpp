#include "gcp/checkpoint.hpp"

#include "gcp/errors.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace gcp {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'G', 'C', 'P', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw IoError("truncated checkpoint");
    return v;
}

json config_to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"hidden_dim", c.hidden_dim},
            {"dropout_rate", c.dropout_rate},
            {"max_epochs", c.max_epochs},
            {"seed", c.seed},
            {"weight_decay", c.weight_decay},
            {"latent_dim", c.latent_dim}};
}

TrainConfig config_from_json(const json& j) {
    TrainConfig c;
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.max_epochs = j.at("max_epochs").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.latent_dim = j.at("latent_dim").get<std::size_t>();
    return c;
}

} // namespace

void checkpoint_save(const GcpModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");

    json header;
    header["graph"] = json::parse(graph_description_json(model.graph));
    header["input_dim"] = model.input_dim;
    header["config"] = config_to_json(model.config);
    header["loss_weights"] = model.loss_weights;
    const std::string header_text = header.dump();

    out.write(kMagic, sizeof(kMagic));
    const std::uint32_t version = kVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    write_u64(out, header_text.size());
    out.write(header_text.data(),
              static_cast<std::streamsize>(header_text.size()));

    std::uint64_t tensor_count = 0;
    for (const auto& b : model.blocks) {
        (void)b;
        tensor_count += 4;
    }
    write_u64(out, tensor_count);
    for (std::size_t i = 0; i < model.blocks.size(); ++i) {
        const char* names[4] = {"w1", "b1", "w2", "b2"};
        const std::vector<double>* tensors[4] = {
            &model.blocks[i].w1, &model.blocks[i].b1, &model.blocks[i].w2,
            &model.blocks[i].b2};
        for (int t = 0; t < 4; ++t) {
            std::ostringstream name;
            name << "block" << i << "." << names[t];
            const std::string n = name.str();
            write_u64(out, n.size());
            out.write(n.data(), static_cast<std::streamsize>(n.size()));
            write_u64(out, tensors[t]->size());
            out.write(reinterpret_cast<const char*>(tensors[t]->data()),
                      static_cast<std::streamsize>(tensors[t]->size() *
                                                   sizeof(double)));
        }
    }
    if (!out) throw IoError("write failure on '" + path + "'");
}

GcpModel checkpoint_load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read '" + path + "'");

    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw VersionMismatch("not a model checkpoint: '" + path + "'");
    }
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (!in || version != kVersion) {
        throw VersionMismatch("checkpoint version " + std::to_string(version));
    }

    const std::uint64_t header_len = read_u64(in);
    std::string header_text(header_len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw IoError("truncated checkpoint header");

    json header;
    try {
        header = json::parse(header_text);
    } catch (const json::exception& e) {
        throw VersionMismatch(std::string("bad checkpoint header: ") + e.what());
    }

    GcpModel staged;
    try {
        const GraphDescription desc =
            parse_graph_description(header.at("graph").dump());
        staged = make_model(build_graph(desc),
                            header.at("input_dim").get<std::size_t>(),
                            config_from_json(header.at("config")));
        staged.loss_weights =
            header.at("loss_weights").get<std::vector<double>>();
        if (staged.loss_weights.size() != staged.graph.size()) {
            throw VersionMismatch("loss weight count");
        }
    } catch (const json::exception& e) {
        throw VersionMismatch(std::string("bad checkpoint header: ") + e.what());
    }

    const std::uint64_t tensor_count = read_u64(in);
    if (tensor_count != staged.blocks.size() * 4) {
        throw VersionMismatch("tensor count does not match the graph");
    }
    for (std::uint64_t t = 0; t < tensor_count; ++t) {
        const std::uint64_t name_len = read_u64(in);
        std::string name(name_len, '\0');
        in.read(name.data(), static_cast<std::streamsize>(name_len));
        const std::uint64_t elems = read_u64(in);

        const std::size_t block = t / 4;
        std::vector<double>* slots[4] = {
            &staged.blocks[block].w1, &staged.blocks[block].b1,
            &staged.blocks[block].w2, &staged.blocks[block].b2};
        std::vector<double>* dst = slots[t % 4];

        std::ostringstream want;
        want << "block" << block << "."
             << (t % 4 == 0 ? "w1" : t % 4 == 1 ? "b1" : t % 4 == 2 ? "w2" : "b2");
        if (!in || name != want.str() || elems != dst->size()) {
            throw VersionMismatch("tensor layout at '" + name + "'");
        }
        in.read(reinterpret_cast<char*>(dst->data()),
                static_cast<std::streamsize>(elems * sizeof(double)));
        if (!in) throw IoError("truncated tensor '" + name + "'");
    }
    return staged;
}

} // namespace gcp
