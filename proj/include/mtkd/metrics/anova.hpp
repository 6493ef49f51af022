#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include <boost/math/distributions/fisher_f.hpp>

#include "mtkd/core/error.hpp"

namespace mtkd {

struct AnovaResult {
    double f_statistic = 0.0;
    double p_value = 1.0;
    std::size_t df_between = 0;
    std::size_t df_within = 0;
};

/// One-way ANOVA over independent groups. Zero within-group variance gives F = 0 (p = 1) when
/// the group means also coincide, otherwise F = +inf (p = 0).
inline AnovaResult one_way_anova(const std::vector<std::vector<double>>& groups) {
    if (groups.size() < 2) throw Error("ANOVA needs at least two groups");
    std::size_t n = 0;
    double grand = 0.0;
    for (const auto& g : groups) {
        if (g.size() < 2) throw Error("every ANOVA group needs at least two samples");
        for (double v : g) {
            if (!std::isfinite(v)) throw Error("ANOVA samples must be finite");
            grand += v;
        }
        n += g.size();
    }
    grand /= static_cast<double>(n);

    double ssb = 0.0, ssw = 0.0;
    for (const auto& g : groups) {
        double mean = 0.0;
        for (double v : g) mean += v;
        mean /= static_cast<double>(g.size());
        ssb += static_cast<double>(g.size()) * (mean - grand) * (mean - grand);
        for (double v : g) ssw += (v - mean) * (v - mean);
    }

    AnovaResult r;
    r.df_between = groups.size() - 1;
    r.df_within = n - groups.size();
    const double msb = ssb / static_cast<double>(r.df_between);
    const double msw = ssw / static_cast<double>(r.df_within);

    // Sums of squares below this scale-relative floor are rounding noise.
    const double scale = std::max(1.0, grand * grand) * static_cast<double>(n) * 1e-24;
    if (ssw <= scale) {
        if (ssb <= scale) {
            r.f_statistic = 0.0;
            r.p_value = 1.0;
        } else {
            r.f_statistic = std::numeric_limits<double>::infinity();
            r.p_value = 0.0;
        }
        return r;
    }
    r.f_statistic = msb / msw;
    const boost::math::fisher_f dist(static_cast<double>(r.df_between), static_cast<double>(r.df_within));
    r.p_value = boost::math::cdf(boost::math::complement(dist, r.f_statistic));
    return r;
}

} // namespace mtkd
