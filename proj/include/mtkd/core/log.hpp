#pragma once

#include <memory>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace mtkd {

/// Library logger; writes to stderr so stdout stays machine-readable.
inline spdlog::logger& log() {
    static std::shared_ptr<spdlog::logger> logger = [] {
        auto existing = spdlog::get("mtkd");
        return existing ? existing : spdlog::stderr_color_mt("mtkd");
    }();
    return *logger;
}

} // namespace mtkd
