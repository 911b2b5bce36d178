#include "medmap/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <unordered_map>

#include "medmap/sha256.hpp"

namespace medmap {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

static_assert(sizeof(real) == 8, "checkpoint blobs assume 64-bit floats");

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& buf, std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    return v;
}

std::string tensor_bytes(const Tensor& t) {
    std::string bytes(static_cast<std::size_t>(t.size()) * sizeof(real), '\0');
    if (t.size() > 0) std::memcpy(bytes.data(), t.data(), bytes.size());
    return bytes;
}

}  // namespace

CheckpointComponent& ModelCheckpoint::add_component(const std::string& name, bool frozen) {
    if (find(name)) throw ValidationError("duplicate checkpoint component \"" + name + "\"");
    components.push_back(CheckpointComponent{name, frozen, {}});
    return components.back();
}

const CheckpointComponent* ModelCheckpoint::find(const std::string& name) const {
    for (const auto& c : components)
        if (c.name == name) return &c;
    return nullptr;
}

CheckpointComponent* ModelCheckpoint::find(const std::string& name) {
    for (auto& c : components)
        if (c.name == name) return &c;
    return nullptr;
}

void snapshot_params(CheckpointComponent& component, const std::vector<Parameter*>& params) {
    for (const Parameter* p : params) component.params.push_back(CheckpointParam{p->name, p->value});
}

void restore_params(const CheckpointComponent& component, const std::vector<Parameter*>& params) {
    if (component.params.size() != params.size())
        throw ValidationError("component \"" + component.name + "\" holds " +
                              std::to_string(component.params.size()) + " blobs but " +
                              std::to_string(params.size()) + " parameters were supplied");
    std::unordered_map<std::string, Parameter*> by_name;
    for (Parameter* p : params) {
        if (!by_name.emplace(p->name, p).second)
            throw ValidationError("duplicate parameter name \"" + p->name + "\"");
    }
    for (const CheckpointParam& cp : component.params) {
        auto it = by_name.find(cp.name);
        if (it == by_name.end())
            throw ValidationError("checkpoint blob \"" + cp.name + "\" has no matching live parameter");
        if (!it->second->value.same_shape(cp.value))
            throw ValidationError("shape mismatch restoring \"" + cp.name + "\": checkpoint " +
                                  shape_str(cp.value.shape()) + " vs live " +
                                  shape_str(it->second->value.shape()));
        it->second->value = cp.value;
    }
}

std::string component_checksum(const CheckpointComponent& component) {
    Sha256 h;
    for (const CheckpointParam& p : component.params) {
        h.update(p.name.data(), p.name.size());
        std::string bytes = tensor_bytes(p.value);
        h.update(bytes.data(), bytes.size());
    }
    return h.hex_digest();
}

void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path) {
    std::string blobs;
    nlohmann::json index;
    index["version"] = kVersion;
    index["config"] = ckpt.config;
    index["metric_history"] = ckpt.metric_history;
    nlohmann::json jcomps = nlohmann::json::array();
    for (const auto& comp : ckpt.components) {
        nlohmann::json jc;
        jc["name"] = comp.name;
        jc["frozen"] = comp.frozen;
        nlohmann::json jparams = nlohmann::json::array();
        for (const auto& p : comp.params) {
            std::string bytes = tensor_bytes(p.value);
            nlohmann::json jp;
            jp["name"] = p.name;
            jp["shape"] = p.value.shape();
            jp["offset"] = blobs.size();
            jp["bytes"] = bytes.size();
            jp["sha256"] = Sha256::of(bytes);
            jparams.push_back(std::move(jp));
            blobs += bytes;
        }
        jc["params"] = std::move(jparams);
        jcomps.push_back(std::move(jc));
    }
    index["components"] = std::move(jcomps);

    std::string json_text = index.dump();
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(json_text.size()));
    out += json_text;
    out += blobs;

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint file for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("failed writing checkpoint file: " + path);
}

ModelCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint file: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (buf.size() < 12 || std::memcmp(buf.data(), kMagic, 4) != 0)
        throw IoError("bad magic: not a checkpoint container: " + path);
    std::uint32_t version = get_u32(buf, 4);
    if (version != kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
    std::uint32_t json_len = get_u32(buf, 8);
    if (buf.size() < 12 + std::size_t(json_len)) throw IoError("truncated checkpoint index: " + path);

    nlohmann::json index;
    try {
        index = nlohmann::json::parse(buf.substr(12, json_len));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("corrupt checkpoint index: ") + e.what());
    }
    std::size_t blob_base = 12 + json_len;

    ModelCheckpoint ckpt;
    try {
        ckpt.config = index.at("config");
        ckpt.metric_history = index.at("metric_history");
        for (const auto& jc : index.at("components")) {
            CheckpointComponent comp;
            comp.name = jc.at("name").get<std::string>();
            comp.frozen = jc.at("frozen").get<bool>();
            for (const auto& jp : jc.at("params")) {
                CheckpointParam p;
                p.name = jp.at("name").get<std::string>();
                Shape shape = jp.at("shape").get<Shape>();
                std::size_t offset = jp.at("offset").get<std::size_t>();
                std::size_t nbytes = jp.at("bytes").get<std::size_t>();
                std::string expect_sha = jp.at("sha256").get<std::string>();
                if (nbytes != static_cast<std::size_t>(shape_numel(shape)) * sizeof(real))
                    throw IoError("blob size disagrees with shape for \"" + p.name + "\"");
                if (blob_base + offset + nbytes > buf.size())
                    throw IoError("truncated checkpoint blob for \"" + p.name + "\"");
                std::string bytes = buf.substr(blob_base + offset, nbytes);
                if (Sha256::of(bytes) != expect_sha)
                    throw IoError("checkpoint blob checksum mismatch for \"" + p.name + "\"");
                p.value = Tensor(shape);
                if (nbytes > 0) std::memcpy(p.value.data(), bytes.data(), nbytes);
                comp.params.push_back(std::move(p));
            }
            ckpt.components.push_back(std::move(comp));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("corrupt checkpoint index: ") + e.what());
    }
    return ckpt;
}

}  // namespace medmap
