#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "mtkd/experiments/ablation.hpp"
#include "mtkd/experiments/curves.hpp"
#include "mtkd/metrics/anova.hpp"

namespace mtkd {

/// ANOVA section of a report: the test plus a sentence on which results formed the groups.
struct AnovaSection {
    AnovaResult result;
    std::vector<std::string> group_names;
    std::vector<double> group_means;
    std::string description;
};

struct CurveLink {
    std::string title;
    std::filesystem::path plot;  // relative to the report
};

namespace detail {

inline std::string metric_cell(double v, const std::optional<double>& delta, bool baseline) {
    if (baseline || !delta) return fmt::format("{:.3f}", v);
    return fmt::format("{:.3f} ({:+.2f}%)", v, *delta);
}

} // namespace detail

/// Markdown with one table per baseline block (baseline first, best IoU row bold), an optional
/// ANOVA section and links to the curve plots.
inline std::string render_report(const std::vector<ResultTable>& tables, const std::vector<CurveLink>& curves,
                                 const std::optional<AnovaSection>& anova, const std::string& title = "Ablation report") {
    if (tables.empty()) throw Error("render_report needs at least one table");
    std::ostringstream md;
    md << "# " << title << "\n\n";
    std::size_t block_no = 0;
    for (const auto& table : tables) {
        std::vector<std::string> baselines;
        for (const auto& r : table.rows)
            if (r.is_baseline) baselines.push_back(r.method);
        if (baselines.empty()) baselines.push_back("");
        for (const auto& base : baselines) {
            std::vector<const ResultRow*> rows;
            for (const auto& r : table.rows)
                if (r.is_baseline && r.method == base) rows.push_back(&r);
            for (const auto& r : table.rows)
                if (!r.is_baseline && (base.empty() || r.baseline == base)) rows.push_back(&r);
            if (rows.empty()) continue;
            ++block_no;
            const ResultRow* best = nullptr;
            for (const auto* r : rows)
                if (!r->failed && (!best || r->iou > best->iou)) best = r;

            md << "## " << (base.empty() ? fmt::format("Block {}", block_no) : "Compared with " + base) << "\n\n";
            md << "| Method | IoU | Dice | Recall | Precision | #Params (M) | Seeds |\n";
            md << "|---|---|---|---|---|---|---|\n";
            for (const auto* r : rows) {
                std::vector<std::string> cells;
                cells.push_back(r->is_baseline ? "baseline" : r->label + " (" + r->method + ")");
                if (r->failed) {
                    for (int k = 0; k < 4; ++k) cells.push_back("FAILED");
                } else {
                    cells.push_back(detail::metric_cell(r->iou, r->d_iou, r->is_baseline));
                    cells.push_back(detail::metric_cell(r->dice, r->d_dice, r->is_baseline));
                    cells.push_back(detail::metric_cell(r->recall, r->d_recall, r->is_baseline));
                    cells.push_back(detail::metric_cell(r->precision, r->d_precision, r->is_baseline));
                }
                cells.push_back(fmt::format("{:.3f}", r->params_m));
                cells.push_back(std::to_string(r->seeds));
                md << '|';
                for (std::size_t k = 0; k < cells.size(); ++k) {
                    const bool bold = r == best && k < 6;
                    md << ' ' << (bold ? "**" + cells[k] + "**" : cells[k]) << " |";
                }
                md << '\n';
            }
            md << '\n';
        }
    }
    if (anova) {
        const auto& a = anova->result;
        md << "## Statistical test (one-way ANOVA)\n\n";
        if (!anova->description.empty()) md << anova->description << "\n\n";
        for (std::size_t g = 0; g < anova->group_names.size() && g < anova->group_means.size(); ++g) {
            md << fmt::format("- {}: mean {:.3f}\n", anova->group_names[g], anova->group_means[g]);
        }
        md << fmt::format("\nF = {:.3f}, p = {:.3f}, df = ({}, {})\n\n", a.f_statistic, a.p_value, a.df_between, a.df_within);
    }
    if (!curves.empty()) {
        md << "## Training curves\n\n";
        for (const auto& c : curves) md << "- [" << c.title << "](" << c.plot.generic_string() << ")\n";
        md << '\n';
    }
    return md.str();
}

namespace detail {

inline std::vector<double> read_per_image_iou(const std::filesystem::path& csv) {
    std::ifstream in(csv);
    std::vector<double> out;
    std::string line;
    if (!std::getline(in, line)) return out;
    while (std::getline(in, line)) {
        const auto cells = parse_csv_line(line);
        if (cells.size() >= 2) out.push_back(std::stod(cells[1]));
    }
    return out;
}

inline std::vector<std::filesystem::path> seed_dirs(const std::filesystem::path& method_dir) {
    std::vector<std::filesystem::path> out;
    if (!std::filesystem::is_directory(method_dir)) return out;
    for (const auto& e : std::filesystem::directory_iterator(method_dir)) {
        const std::string name = e.path().filename().string();
        if (e.is_directory() && !name.empty() && name.find_first_not_of("0123456789") == std::string::npos) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace detail

/// Builds report.md for an ablation directory (<output_dir>/<name>): result tables from
/// results.csv, curve CSV/PNG per run under report/curves/, and an ANOVA comparing per-image IoU
/// without distillation (first baseline) against with distillation (pooled plans of that block).
inline std::filesystem::path write_report(const std::filesystem::path& run_root, bool plots = true) {
    const ResultTable table = read_result_csv(run_root / "results.csv");
    const std::filesystem::path report_dir = run_root / "report";
    std::filesystem::create_directories(report_dir / "curves");

    std::vector<CurveLink> curves;
    auto add_curves = [&](const std::string& method, const std::filesystem::path& dir, const std::string& tag) {
        if (!std::filesystem::exists(dir / RunArtifacts::record)) return;
        const TrainingRecord rec = read_record_csv(dir / RunArtifacts::record);
        if (rec.empty()) return;
        const std::string stem = method + "_" + tag;
        const CurveFiles files = emit_training_curves(rec, report_dir / "curves", stem, plots);
        if (files.plot) curves.push_back({method + " (" + tag + ")", std::filesystem::path("curves") / (stem + ".png")});
    };
    add_curves("teacher", run_root / "teacher", "final");
    for (const auto& r : table.rows)
        for (const auto& d : detail::seed_dirs(run_root / r.method)) add_curves(r.method, d, "seed" + d.filename().string());

    std::optional<AnovaSection> anova;
    const ResultRow* base = nullptr;
    for (const auto& r : table.rows)
        if (r.is_baseline && !r.failed) {
            base = &r;
            break;
        }
    if (base) {
        std::vector<double> without, with;
        for (const auto& d : detail::seed_dirs(run_root / base->method)) {
            auto v = detail::read_per_image_iou(d / RunArtifacts::per_image);
            without.insert(without.end(), v.begin(), v.end());
        }
        std::vector<std::string> members;
        for (const auto& r : table.rows) {
            if (r.is_baseline || r.failed || r.baseline != base->method) continue;
            members.push_back(r.method);
            for (const auto& d : detail::seed_dirs(run_root / r.method)) {
                auto v = detail::read_per_image_iou(d / RunArtifacts::per_image);
                with.insert(with.end(), v.begin(), v.end());
            }
        }
        if (without.size() >= 2 && with.size() >= 2) {
            AnovaSection s;
            s.result = one_way_anova({without, with});
            s.group_names = {"without distillation (" + base->method + ")", "with distillation"};
            auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
            s.group_means = {mean(without), mean(with)};
            std::string list;
            for (const auto& m : members) list += (list.empty() ? "" : ", ") + m;
            s.description = fmt::format(
                "Groups are per-image validation IoU values pooled over seeds: {} images from baseline '{}' against {} images "
                "from the distilled rows compared with it ({}).",
                without.size(), base->method, with.size(), list);
            anova = s;
        }
    }
    const std::filesystem::path out = report_dir / "report.md";
    std::ofstream md(out);
    if (!md) throw Error("cannot write " + out.string());
    md << render_report({table}, curves, anova, "Ablation report: " + run_root.filename().string());
    return out;
}

} // namespace mtkd
