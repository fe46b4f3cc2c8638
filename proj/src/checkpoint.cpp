#include "dialmae/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace dialmae {

using nlohmann::json;

bool Checkpoint::has_group(const std::string& name) const {
    for (const auto& [n, _] : groups)
        if (n == name) return true;
    return false;
}

ParamStore& Checkpoint::group(const std::string& name) {
    for (auto& [n, store] : groups)
        if (n == name) return store;
    throw std::invalid_argument("checkpoint has no group: " + name);
}

const ParamStore& Checkpoint::group(const std::string& name) const {
    for (const auto& [n, store] : groups)
        if (n == name) return store;
    throw std::invalid_argument("checkpoint has no group: " + name);
}

namespace detail {

void write_doubles_le(std::ofstream& out, const std::vector<double>& values) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(values.data()),
                  static_cast<std::streamsize>(values.size() * sizeof(double)));
    } else {
        for (double v : values) {
            uint64_t bits;
            std::memcpy(&bits, &v, sizeof(bits));
            char buf[8];
            for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
            out.write(buf, 8);
        }
    }
}

void read_doubles_le(std::ifstream& in, std::vector<double>& values) {
    if constexpr (std::endian::native == std::endian::little) {
        in.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(values.size() * sizeof(double)));
    } else {
        for (double& v : values) {
            char buf[8];
            in.read(buf, 8);
            uint64_t bits = 0;
            for (int i = 0; i < 8; ++i)
                bits |= static_cast<uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
            std::memcpy(&v, &bits, sizeof(v));
        }
    }
}

}  // namespace detail

void save_checkpoint(const Checkpoint& ckpt, const std::string& stem) {
    if (ckpt.phase != "post_train" && ckpt.phase != "fine_tune")
        throw std::invalid_argument("checkpoint phase must be post_train or fine_tune");
    if (ckpt.groups.empty()) throw std::invalid_argument("checkpoint has no tensor groups");

    json manifest;
    manifest["format"] = kCheckpointFormat;
    manifest["version"] = kCheckpointVersion;
    manifest["phase"] = ckpt.phase;
    manifest["model_config"] = ckpt.config.to_json();
    manifest["seed"] = ckpt.seed;
    manifest["step"] = ckpt.step;
    manifest["tied_towers"] = ckpt.tied_towers;

    size_t blob_offset = 0;
    json groups = json::array();
    for (const auto& [name, store] : ckpt.groups) {
        json tensors = json::array();
        for (const TensorSpec& spec : store.specs()) {
            tensors.push_back(json{{"name", spec.name},
                                   {"shape", spec.shape},
                                   {"dtype", "f64"},
                                   {"byte_offset", (blob_offset + spec.offset) * sizeof(double)},
                                   {"n_elements", spec.size}});
        }
        groups.push_back(json{{"name", name}, {"tensors", std::move(tensors)}});
        blob_offset += store.total_size();
    }
    manifest["groups"] = std::move(groups);
    manifest["total_elements"] = blob_offset;

    std::ofstream jf(stem + ".json");
    if (!jf) throw std::runtime_error("cannot write " + stem + ".json");
    jf << manifest.dump(2) << "\n";
    jf.close();
    if (!jf) throw std::runtime_error("failed writing " + stem + ".json");

    std::ofstream bf(stem + ".bin", std::ios::binary);
    if (!bf) throw std::runtime_error("cannot write " + stem + ".bin");
    for (const auto& [name, store] : ckpt.groups) detail::write_doubles_le(bf, store.flat());
    bf.close();
    if (!bf) throw std::runtime_error("failed writing " + stem + ".bin");
}

Checkpoint load_checkpoint(const std::string& stem) {
    std::ifstream jf(stem + ".json");
    if (!jf) throw std::runtime_error("cannot open " + stem + ".json");
    json manifest;
    try {
        jf >> manifest;
    } catch (const json::exception& e) {
        throw std::runtime_error("bad checkpoint manifest " + stem + ".json: " + e.what());
    }

    if (manifest.value("format", "") != kCheckpointFormat)
        throw std::runtime_error(stem + ".json is not a checkpoint manifest");
    if (manifest.value("version", 0) != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version in " + stem + ".json");

    Checkpoint ckpt;
    ckpt.phase = manifest.at("phase").get<std::string>();
    ckpt.config = ModelConfig::from_json(manifest.at("model_config"));
    ckpt.seed = manifest.at("seed").get<uint64_t>();
    ckpt.step = manifest.at("step").get<long long>();
    ckpt.tied_towers = manifest.at("tied_towers").get<bool>();

    size_t blob_offset = 0;
    for (const json& jg : manifest.at("groups")) {
        ParamStore store;
        for (const json& jt : jg.at("tensors")) {
            if (jt.at("dtype").get<std::string>() != "f64")
                throw std::runtime_error("unsupported dtype in checkpoint tensor " +
                                         jt.at("name").get<std::string>());
            store.add(jt.at("name").get<std::string>(), jt.at("shape").get<std::vector<int>>());
            const TensorSpec& spec = store.specs().back();
            if (jt.at("byte_offset").get<size_t>() != (blob_offset + spec.offset) * sizeof(double) ||
                jt.at("n_elements").get<size_t>() != spec.size)
                throw std::runtime_error("inconsistent layout for checkpoint tensor " + spec.name);
        }
        blob_offset += store.total_size();
        ckpt.groups.emplace_back(jg.at("name").get<std::string>(), std::move(store));
    }
    if (manifest.at("total_elements").get<size_t>() != blob_offset)
        throw std::runtime_error("checkpoint element count mismatch in " + stem + ".json");

    std::ifstream bf(stem + ".bin", std::ios::binary | std::ios::ate);
    if (!bf) throw std::runtime_error("cannot open " + stem + ".bin");
    const auto bytes = static_cast<size_t>(bf.tellg());
    if (bytes != blob_offset * sizeof(double))
        throw std::runtime_error("checkpoint blob size mismatch for " + stem + ".bin");
    bf.seekg(0);
    for (auto& [name, store] : ckpt.groups) {
        detail::read_doubles_le(bf, store.flat());
        if (!bf) throw std::runtime_error("truncated checkpoint blob " + stem + ".bin");
    }
    return ckpt;
}

}  // namespace dialmae
