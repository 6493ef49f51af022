#pragma once

#include <array>
#include <string>
#include <string_view>

#include "mtkd/core/error.hpp"

namespace mtkd {

enum class ModelRole { teacher_mt_unet, student_s1, student_s2 };

/// Feature scales at which teacher and student are compared.
enum class Scale { encoder, bottleneck, decoder };

inline constexpr std::array<Scale, 3> all_scales{Scale::encoder, Scale::bottleneck, Scale::decoder};

inline std::string to_string(ModelRole role) {
    switch (role) {
    case ModelRole::teacher_mt_unet: return "teacher_mt_unet";
    case ModelRole::student_s1: return "student_s1";
    case ModelRole::student_s2: return "student_s2";
    }
    return "unknown";
}

inline ModelRole parse_role(std::string_view name) {
    if (name == "teacher_mt_unet") return ModelRole::teacher_mt_unet;
    if (name == "student_s1") return ModelRole::student_s1;
    if (name == "student_s2") return ModelRole::student_s2;
    throw Error("unknown model role '" + std::string(name) + "'");
}

inline std::string to_string(Scale scale) {
    switch (scale) {
    case Scale::encoder: return "encoder";
    case Scale::bottleneck: return "bottleneck";
    case Scale::decoder: return "decoder";
    }
    return "unknown";
}

inline Scale parse_scale(std::string_view name) {
    if (name == "encoder") return Scale::encoder;
    if (name == "bottleneck") return Scale::bottleneck;
    if (name == "decoder") return Scale::decoder;
    throw Error("unknown scale '" + std::string(name) + "'");
}

/// Short label used in result tables: B, E, D.
inline char scale_letter(Scale scale) {
    return scale == Scale::encoder ? 'E' : scale == Scale::bottleneck ? 'B' : 'D';
}

struct ModelConfig {
    ModelRole role = ModelRole::student_s1;
    int in_channels = 3;
    int out_channels = 1;
    int base_channels = 16;
    bool with_recon_head = false;

    /// Paper-sized defaults: teacher base 64 (64..512, bottleneck 1024) with a recon head,
    /// students base 16.
    static ModelConfig defaults(ModelRole role) {
        ModelConfig c;
        c.role = role;
        c.base_channels = role == ModelRole::teacher_mt_unet ? 64 : 16;
        c.with_recon_head = role == ModelRole::teacher_mt_unet;
        return c;
    }

    bool is_teacher() const noexcept { return role == ModelRole::teacher_mt_unet; }

    void validate() const {
        if (in_channels != 3) throw Error("model in_channels must be 3, got " + std::to_string(in_channels));
        if (out_channels != 1) throw Error("model out_channels must be 1, got " + std::to_string(out_channels));
        if (base_channels < 1) throw Error("model base_channels must be positive");
        if (with_recon_head && !is_teacher()) throw Error("only the teacher carries a reconstruction head");
    }

    bool operator==(const ModelConfig&) const = default;
};

} // namespace mtkd
