#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtkd/models/networks.hpp"

namespace mtkd {

/// Checkpoint file that cannot be used. `reason()` is the short cause without the path.
class CheckpointError : public FormatError {
public:
    CheckpointError(const std::filesystem::path& path, std::string reason)
        : FormatError("checkpoint " + path.string() + ": " + reason), path_(path), reason_(std::move(reason)) {}
    const std::filesystem::path& path() const noexcept { return path_; }
    const std::string& reason() const noexcept { return reason_; }

private:
    std::filesystem::path path_;
    std::string reason_;
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"role", to_string(c.role)},
            {"in_channels", c.in_channels},
            {"out_channels", c.out_channels},
            {"base_channels", c.base_channels},
            {"with_recon_head", c.with_recon_head}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.role = parse_role(j.at("role").get<std::string>());
    c.in_channels = j.at("in_channels").get<int>();
    c.out_channels = j.at("out_channels").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.with_recon_head = j.at("with_recon_head").get<bool>();
    return c;
}

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

/// Container layout: "MTKDCKPT", u32 version, u64 manifest length, JSON manifest, float32 payload.
/// The manifest holds the model config, step counter, seed, free-form metadata and the array
/// directory (name, shape, element offset).
struct Checkpoint {
    static constexpr std::uint32_t format_version = 1;

    ModelConfig config;
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<NamedArray> arrays;

    const NamedArray* find(const std::string& name) const {
        for (const auto& a : arrays)
            if (a.name == name) return &a;
        return nullptr;
    }
};

namespace detail {
inline constexpr char checkpoint_magic[8] = {'M', 'T', 'K', 'D', 'C', 'K', 'P', 'T'};
}

/// Writes atomically: the file appears under `path` only once complete.
inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    nlohmann::json manifest{{"config", to_json(ckpt.config)},
                            {"step", ckpt.step},
                            {"seed", ckpt.seed},
                            {"metadata", ckpt.metadata},
                            {"arrays", nlohmann::json::array()}};
    std::uint64_t offset = 0;
    for (const auto& a : ckpt.arrays) {
        if (a.data.size() != numel_of(a.shape)) throw Error("checkpoint array " + a.name + " size does not match its shape");
        manifest["arrays"].push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}});
        offset += a.data.size();
    }
    const std::string text = manifest.dump();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write checkpoint " + tmp.string());
        const std::uint32_t version = Checkpoint::format_version;
        const std::uint64_t length = text.size();
        out.write(detail::checkpoint_magic, sizeof detail::checkpoint_magic);
        out.write(reinterpret_cast<const char*>(&version), sizeof version);
        out.write(reinterpret_cast<const char*>(&length), sizeof length);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& a : ckpt.arrays) {
            out.write(reinterpret_cast<const char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * sizeof(float)));
        }
        if (!out) throw Error("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(path, "cannot open file");
    char magic[8];
    if (!in.read(magic, sizeof magic)) throw CheckpointError(path, "truncated before the magic bytes");
    if (std::memcmp(magic, detail::checkpoint_magic, sizeof magic) != 0) throw CheckpointError(path, "not a checkpoint (bad magic)");
    std::uint32_t version = 0;
    std::uint64_t length = 0;
    if (!in.read(reinterpret_cast<char*>(&version), sizeof version)) throw CheckpointError(path, "truncated in the header");
    if (version != Checkpoint::format_version) {
        throw CheckpointError(path, "format version " + std::to_string(version) + " is not supported (expected version " +
                                        std::to_string(Checkpoint::format_version) + ")");
    }
    if (!in.read(reinterpret_cast<char*>(&length), sizeof length)) throw CheckpointError(path, "truncated in the header");
    const auto file_size = std::filesystem::file_size(path);
    if (length > file_size) throw CheckpointError(path, "truncated manifest");
    std::string text(length, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(length))) throw CheckpointError(path, "truncated manifest");

    Checkpoint ckpt;
    try {
        const auto manifest = nlohmann::json::parse(text);
        ckpt.config = model_config_from_json(manifest.at("config"));
        ckpt.step = manifest.at("step").get<std::uint64_t>();
        ckpt.seed = manifest.at("seed").get<std::uint64_t>();
        ckpt.metadata = manifest.at("metadata");
        for (const auto& a : manifest.at("arrays")) {
            NamedArray arr;
            arr.name = a.at("name").get<std::string>();
            arr.shape = a.at("shape").get<Shape>();
            ckpt.arrays.push_back(std::move(arr));
        }
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(path, std::string("malformed manifest: ") + e.what());
    } catch (const Error& e) {
        throw CheckpointError(path, std::string("malformed manifest: ") + e.what());
    }
    for (auto& arr : ckpt.arrays) {
        arr.data.resize(numel_of(arr.shape));
        const auto bytes = static_cast<std::streamsize>(arr.data.size() * sizeof(float));
        if (!in.read(reinterpret_cast<char*>(arr.data.data()), bytes)) {
            throw CheckpointError(path, "truncated payload in array " + arr.name);
        }
    }
    return ckpt;
}

/// Appends a module's parameters and buffers under `prefix`.
template <typename T>
void append_state(Checkpoint& ckpt, const nn::Module<T>& module, const std::string& prefix) {
    for (const auto& nv : module.state()) {
        const Tensor<T>& v = nv.var.value();
        NamedArray a{prefix + nv.name, v.shape(), {}};
        a.data.reserve(v.numel());
        for (const T& x : v.values()) a.data.push_back(static_cast<float>(x));
        ckpt.arrays.push_back(std::move(a));
    }
}

/// Copies arrays named `prefix + <state name>` into the module. Every state entry must be present
/// with the same shape; the first mismatch is reported.
template <typename T>
void load_state(nn::Module<T>& module, const Checkpoint& ckpt, const std::string& prefix, const std::filesystem::path& path = {}) {
    for (auto& nv : module.state()) {
        const std::string name = prefix + nv.name;
        const NamedArray* a = ckpt.find(name);
        if (!a) throw CheckpointError(path, "first mismatched array: " + name + " is missing from the checkpoint");
        if (a->shape != nv.var.value().shape()) {
            throw CheckpointError(path, "first mismatched array: " + name + " has shape " + to_string(a->shape) +
                                            " in the checkpoint but " + to_string(nv.var.value().shape()) + " in the model");
        }
        Tensor<T>& dst = nv.var.mutable_value();
        for (std::size_t i = 0; i < a->data.size(); ++i) dst[i] = static_cast<T>(a->data[i]);
    }
}

inline const std::string model_prefix = "model.";

template <typename T>
Checkpoint make_checkpoint(const SegmentationModel<T>& model, std::uint64_t step, std::uint64_t seed,
                           nlohmann::json metadata = nlohmann::json::object()) {
    Checkpoint ckpt;
    ckpt.config = model.config();
    ckpt.step = step;
    ckpt.seed = seed;
    ckpt.metadata = std::move(metadata);
    append_state(ckpt, model, model_prefix);
    return ckpt;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const SegmentationModel<T>& model, std::uint64_t step,
                     std::uint64_t seed, nlohmann::json metadata = nlohmann::json::object()) {
    write_checkpoint(path, make_checkpoint(model, step, seed, std::move(metadata)));
}

/// Loads weights into an existing model built from the caller's config.
template <typename T>
void load_weights(SegmentationModel<T>& model, const std::filesystem::path& path) {
    load_state(model, read_checkpoint(path), model_prefix, path);
}

template <typename T>
struct LoadedModel {
    std::unique_ptr<SegmentationModel<T>> model;
    Checkpoint checkpoint;
};

/// Rebuilds the model described by the checkpoint's config and fills in its weights.
template <typename T>
LoadedModel<T> load_checkpoint(const std::filesystem::path& path) {
    LoadedModel<T> out;
    out.checkpoint = read_checkpoint(path);
    try {
        out.model = build_model<T>(out.checkpoint.config, out.checkpoint.seed);
    } catch (const Error& e) {
        throw CheckpointError(path, std::string("invalid model config: ") + e.what());
    }
    load_state(*out.model, out.checkpoint, model_prefix, path);
    return out;
}

} // namespace mtkd
