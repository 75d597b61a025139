// SPDX-License-Identifier: Apache-2.0
#include "fixnet/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload layout assumes a little-endian host");

namespace fixnet {

using nlohmann::json;

nlohmann::json net_to_json(const NetworkSpec& net) {
    json j;
    j["input"] = {{"channels", net.input_channels},
                  {"height", net.input_height},
                  {"width", net.input_width}};
    j["classes"] = net.num_classes;
    j["layers"] = json::array();
    for (const LayerSpec& ls : net.layers) {
        json lj;
        lj["kind"] = ls.kind == LayerKind::Conv ? "conv" : "fc";
        lj["out"] = ls.out_channels;
        if (ls.kind == LayerKind::Conv) {
            lj["kernel"] = ls.kernel;
            lj["stride"] = ls.stride;
            lj["pad"] = ls.pad;
            lj["pool"] = ls.pool;
        }
        lj["relu"] = ls.relu;
        lj["weight_bits"] = ls.weight_bits.to_string();
        lj["act_bits"] = ls.act_bits.to_string();
        j["layers"].push_back(lj);
    }
    return j;
}

NetworkSpec net_from_json(const json& j) {
    NetworkSpec net;
    net.input_channels = j.at("input").at("channels").get<int>();
    net.input_height = j.at("input").at("height").get<int>();
    net.input_width = j.at("input").at("width").get<int>();
    net.num_classes = j.at("classes").get<int>();
    for (const json& lj : j.at("layers")) {
        LayerSpec ls;
        const std::string kind = lj.at("kind").get<std::string>();
        if (kind == "conv") ls.kind = LayerKind::Conv;
        else if (kind == "fc") ls.kind = LayerKind::Fc;
        else throw std::invalid_argument("layer kind must be 'conv' or 'fc'");
        ls.out_channels = lj.at("out").get<int>();
        ls.kernel = lj.value("kernel", 3);
        ls.stride = lj.value("stride", 1);
        ls.pad = lj.value("pad", ls.kernel / 2);
        ls.pool = lj.value("pool", false);
        ls.relu = lj.value("relu", true);
        ls.weight_bits = Precision::parse(lj.value("weight_bits", std::string("float")));
        ls.act_bits = Precision::parse(lj.value("act_bits", std::string("float")));
        net.layers.push_back(ls);
    }
    net.validate();
    return net;
}

namespace {
constexpr char kMagic[8] = {'F', 'X', 'N', 'T', 'C', 'K', 'P', 'T'};
}

void save_checkpoint(const std::string& path, const NetworkSpec& net, const Parameters& params,
                     const std::vector<std::optional<QFormat>>* weight_formats) {
    json header;
    header["format"] = "fixnet-checkpoint";
    header["version"] = 1;
    header["network"] = net_to_json(net);
    header["tensors"] = json::array();
    uint64_t offset = 0;
    auto add = [&](const std::string& name, const Tensor& t, const std::optional<QFormat>& fmt) {
        json tj;
        tj["name"] = name;
        tj["shape"] = t.shape;
        tj["dtype"] = "float64";
        tj["offset"] = offset;
        tj["nbytes"] = uint64_t(t.data.size()) * sizeof(double);
        if (fmt) tj["qformat"] = fmt->to_string();
        header["tensors"].push_back(tj);
        offset += uint64_t(t.data.size()) * sizeof(double);
    };
    for (size_t l = 0; l < params.layers.size(); ++l) {
        const std::optional<QFormat> fmt =
            weight_formats && l < weight_formats->size() ? (*weight_formats)[l] : std::nullopt;
        add("layer" + std::to_string(l + 1) + ".weight", params.layers[l].weight, fmt);
        add("layer" + std::to_string(l + 1) + ".bias", params.layers[l].bias, std::nullopt);
    }

    const std::string head = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(kMagic, 8);
    const uint64_t head_len = head.size();
    out.write(reinterpret_cast<const char*>(&head_len), 8);
    out.write(head.data(), std::streamsize(head.size()));
    for (const auto& lp : params.layers) {
        out.write(reinterpret_cast<const char*>(lp.weight.data.data()),
                  std::streamsize(lp.weight.data.size() * sizeof(double)));
        out.write(reinterpret_cast<const char*>(lp.bias.data.data()),
                  std::streamsize(lp.bias.data.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error(path + ": not a fixnet checkpoint (bad magic)");
    uint64_t head_len = 0;
    if (!in.read(reinterpret_cast<char*>(&head_len), 8))
        throw std::runtime_error(path + ": truncated header length");
    std::string head(head_len, '\0');
    if (!in.read(head.data(), std::streamsize(head_len)))
        throw std::runtime_error(path + ": truncated header");
    const json header = json::parse(head);

    Checkpoint ck;
    ck.net = net_from_json(header.at("network"));
    const size_t L = ck.net.layers.size();
    ck.params.layers.resize(L);
    ck.weight_formats.assign(L, std::nullopt);

    const uint64_t payload_base = 16 + head_len;
    for (const json& tj : header.at("tensors")) {
        const std::string name = tj.at("name").get<std::string>();
        const std::vector<int> shape = tj.at("shape").get<std::vector<int>>();
        const uint64_t offset = tj.at("offset").get<uint64_t>();
        const uint64_t nbytes = tj.at("nbytes").get<uint64_t>();
        Tensor t(shape);
        if (nbytes != t.data.size() * sizeof(double))
            throw std::runtime_error(path + ": tensor " + name + " nbytes does not match shape");
        in.seekg(std::streamoff(payload_base + offset));
        if (!in.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(nbytes)))
            throw std::runtime_error(path + ": truncated payload for tensor " + name);

        size_t l = 0;
        std::string field;
        if (sscanf(name.c_str(), "layer%zu.", &l) != 1 || l < 1 || l > L)
            throw std::runtime_error(path + ": unexpected tensor name " + name);
        field = name.substr(name.find('.') + 1);
        if (field == "weight") {
            ck.params.layers[l - 1].weight = std::move(t);
            if (tj.contains("qformat"))
                ck.weight_formats[l - 1] = QFormat::parse(tj.at("qformat").get<std::string>());
        } else if (field == "bias") {
            ck.params.layers[l - 1].bias = std::move(t);
        } else {
            throw std::runtime_error(path + ": unexpected tensor name " + name);
        }
    }
    return ck;
}

}  // namespace fixnet
