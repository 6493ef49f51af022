#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "mtkd/experiments/config.hpp"
#include "mtkd/metrics/metrics.hpp"

namespace mtkd {

namespace fs = std::filesystem;

/// Train / validation / evaluation sets of an experiment.
struct ExperimentData {
    Dataset train;  // full training pool (students subsample it by subject)
    Dataset val;    // held-out subjects for validation curves
    Dataset eval;   // metrics set: the corpus test split when present, else `val`
};

inline ExperimentData load_experiment_data(const DataConfig& dc) {
    Dataset pool;
    std::optional<Dataset> test;
    if (dc.kind == DataConfig::Kind::synthetic) {
        pool = make_synthetic_dataset(dc.synthetic_count, dc.image_size, dc.synthetic_seed);
    } else {
        DatasetSpec spec;
        spec.source_dir = dc.dir;
        spec.image_size = dc.image_size;
        spec.split = Split::train;
        pool = build_dataset(spec);
        if (fs::is_directory(dc.dir / "test")) {
            spec.split = Split::test;
            test = build_dataset(spec);
        }
    }
    if (pool.empty()) throw Error("experiment data set is empty");
    ExperimentData d;
    std::tie(d.train, d.val) = split_by_subject(pool, dc.val_fraction, dc.split_seed);
    if (d.val.empty() && !test) throw Error("no validation subjects: raise data.val_fraction or provide a test split");
    d.eval = test ? std::move(*test) : d.val;
    return d;
}

/// One row of a result table: seed-averaged metrics plus percentage deltas against its baseline.
struct ResultRow {
    std::string method;    // plan or baseline name
    std::string label;     // "baseline" or e.g. "B->B + PMD"
    std::string baseline;  // baseline the deltas refer to (itself for baseline rows)
    bool is_baseline = false;
    bool failed = false;
    std::string error;
    std::size_t seeds = 0;
    double iou = 0, dice = 0, recall = 0, precision = 0;
    double params_m = 0;
    std::optional<double> d_iou, d_dice, d_recall, d_precision;
};

struct ResultTable {
    std::vector<ResultRow> rows;

    const ResultRow& row(const std::string& method) const {
        for (const auto& r : rows)
            if (r.method == method) return r;
        throw Error("no result row for " + method);
    }
};

/// 100 * (value - baseline) / baseline.
inline double delta_percent(double value, double baseline) {
    if (baseline == 0.0) throw Error("delta against a zero baseline is undefined");
    return 100.0 * (value - baseline) / baseline;
}

inline void fill_deltas(ResultTable& table) {
    for (auto& r : table.rows) {
        r.d_iou = r.d_dice = r.d_recall = r.d_precision = std::nullopt;
        if (r.failed) continue;
        const ResultRow* base = nullptr;
        for (const auto& b : table.rows)
            if (b.is_baseline && b.method == r.baseline && !b.failed) base = &b;
        if (!base) continue;
        auto d = [](double v, double b) -> std::optional<double> {
            if (b == 0.0) return std::nullopt;
            return delta_percent(v, b);
        };
        r.d_iou = d(r.iou, base->iou);
        r.d_dice = d(r.dice, base->dice);
        r.d_recall = d(r.recall, base->recall);
        r.d_precision = d(r.precision, base->precision);
    }
}

inline const char* result_csv_header =
    "method,label,baseline,iou,dice,recall,precision,params_M,delta_iou_pct,delta_dice_pct,delta_recall_pct,"
    "delta_precision_pct,seeds,status";

inline std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

inline void write_result_csv(const ResultTable& table, const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << result_csv_header << '\n';
    auto opt = [](const std::optional<double>& v) { return v ? fmt::format("{:.4f}", *v) : std::string(); };
    for (const auto& r : table.rows) {
        out << csv_quote(r.method) << ',' << csv_quote(r.label) << ',' << csv_quote(r.baseline) << ',';
        if (r.failed) {
            out << ",,,," << fmt::format("{:.6f}", r.params_m) << ",,,,," << r.seeds << ",FAILED";
        } else {
            out << fmt::format("{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},", r.iou, r.dice, r.recall, r.precision, r.params_m)
                << opt(r.d_iou) << ',' << opt(r.d_dice) << ',' << opt(r.d_recall) << ',' << opt(r.d_precision) << ','
                << r.seeds << ",ok";
        }
        out << '\n';
    }
}

inline std::vector<std::string> parse_csv_line(const std::string& line) {
    std::vector<std::string> cells(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cells.back() += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cells.back() += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            cells.emplace_back();
        } else {
            cells.back() += c;
        }
    }
    return cells;
}

inline ResultTable read_result_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != result_csv_header) throw FormatError(path.string() + ": unexpected results header");
    ResultTable t;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto c = parse_csv_line(line);
        if (c.size() != 14) throw FormatError(path.string() + ": malformed row: " + line);
        auto num = [](const std::string& s) { return s.empty() ? 0.0 : std::stod(s); };
        auto opt = [](const std::string& s) -> std::optional<double> {
            if (s.empty()) return std::nullopt;
            return std::stod(s);
        };
        ResultRow r;
        r.method = c[0];
        r.label = c[1];
        r.baseline = c[2];
        r.is_baseline = r.label == "baseline";
        r.iou = num(c[3]);
        r.dice = num(c[4]);
        r.recall = num(c[5]);
        r.precision = num(c[6]);
        r.params_m = num(c[7]);
        r.d_iou = opt(c[8]);
        r.d_dice = opt(c[9]);
        r.d_recall = opt(c[10]);
        r.d_precision = opt(c[11]);
        r.seeds = static_cast<std::size_t>(num(c[12]));
        r.failed = c[13] == "FAILED";
        t.rows.push_back(std::move(r));
    }
    return t;
}

/// Files of one finished (method, seed) run.
struct RunArtifacts {
    static constexpr const char* checkpoint = "ckpt.bin";
    static constexpr const char* record = "record.csv";
    static constexpr const char* metrics = "metrics.json";
    static constexpr const char* per_image = "per_image.csv";
};

struct AblationOptions {
    bool resume = true;  // skip (method, seed) runs whose directory already holds a checkpoint
    bool verbose = true;
};

inline fs::path experiment_dir(const ExperimentConfig& cfg) { return cfg.output_dir / cfg.name; }

inline fs::path teacher_checkpoint_path(const ExperimentConfig& cfg) {
    return cfg.teacher.checkpoint.value_or(experiment_dir(cfg) / "teacher" / RunArtifacts::checkpoint);
}

inline fs::path run_dir(const ExperimentConfig& cfg, const std::string& method, std::uint64_t seed) {
    return experiment_dir(cfg) / method / std::to_string(seed);
}

namespace detail {

/// Writes a run's artefacts into a scratch directory and renames it into place, so a run
/// directory either holds everything or does not exist.
template <typename Fill>
void commit_run_dir(const fs::path& final_dir, Fill&& fill) {
    const fs::path tmp = final_dir.string() + ".partial";
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    fill(tmp);
    fs::remove_all(final_dir);
    fs::rename(tmp, final_dir);
}

inline void write_run_metrics(const fs::path& dir, const MetricsReport& report, const nlohmann::json& extra) {
    json j = summary_json(report.aggregate);
    for (const auto& [k, v] : extra.items()) j[k] = v;
    std::ofstream out(dir / RunArtifacts::metrics);
    out << j.dump(2) << '\n';
    write_metrics_csv(report, dir / RunArtifacts::per_image);
}

} // namespace detail

/// Trains the experiment's teacher on the training pool and saves it to
/// teacher_checkpoint_path(cfg). When the path is the default one, the record, metrics and
/// per-image CSV go next to it.
inline std::unique_ptr<SegmentationModel<float>> train_experiment_teacher(const ExperimentConfig& cfg, const ExperimentData& data) {
    const fs::path path = teacher_checkpoint_path(cfg);
    log().info("training teacher ({} epochs, base {})", cfg.teacher.epochs, cfg.teacher.model.base_channels);
    TrainOptions opt;
    opt.epochs = cfg.teacher.epochs;
    opt.batch_size = cfg.teacher.batch_size;
    opt.optimizer = cfg.teacher.optimizer;
    opt.seed = cfg.teacher.seed;
    auto result = train_teacher<float>(data.train, &data.val, cfg.teacher.model, opt, cfg.teacher.lambda_rec);
    const MetricsReport report = evaluate_model(*result.model, data.eval);
    const fs::path dir = path.parent_path().empty() ? fs::path(".") : path.parent_path();
    fs::create_directories(dir);
    save_checkpoint(path, *result.model, 0, opt.seed, detail::record_metadata(result.record));
    if (!cfg.teacher.checkpoint) {
        write_record_csv(result.record, dir / RunArtifacts::record);
        detail::write_run_metrics(dir, report, {{"params", count_parameters(*result.model)}});
    }
    log().info("teacher eval: IoU {:.4f} Dice {:.4f}", report.aggregate.iou, report.aggregate.dice);
    return std::move(result.model);
}

/// Teacher for the experiment: loaded when its checkpoint exists, otherwise trained and saved.
inline std::unique_ptr<SegmentationModel<float>> obtain_teacher(const ExperimentConfig& cfg, const ExperimentData& data) {
    const fs::path path = teacher_checkpoint_path(cfg);
    if (!fs::exists(path)) return train_experiment_teacher(cfg, data);
    auto loaded = load_checkpoint<float>(path);
    if (!loaded.checkpoint.config.is_teacher()) {
        throw CheckpointError(path, "config role is " + to_string(loaded.checkpoint.config.role) + ", expected teacher_mt_unet");
    }
    log().info("loaded teacher from {}", path.string());
    return std::move(loaded.model);
}

/// Trains and evaluates one baseline seed; returns its metrics.
inline MetricsSummary run_baseline(const ExperimentConfig& cfg, const BaselineSpec& b, std::uint64_t seed, const ExperimentData& data) {
    const Dataset train = subsample_by_subject(data.train, b.data_fraction, seed);
    TrainOptions opt;
    opt.epochs = cfg.student.epochs;
    opt.batch_size = cfg.student.batch_size;
    opt.optimizer = cfg.student.optimizer;
    opt.seed = seed;
    opt.data_fraction = b.data_fraction;
    const ModelConfig model_cfg = b.model.value_or(cfg.student.model);
    StudentSession<float> session(model_cfg, opt, train.image_size());
    const TrainingRecord record = session.fit(train, &data.val);
    const MetricsReport report = evaluate_model(session.student(), data.eval);
    detail::commit_run_dir(run_dir(cfg, b.name, seed), [&](const fs::path& dir) {
        write_checkpoint(dir / RunArtifacts::checkpoint, session.checkpoint(detail::record_metadata(record)));
        write_record_csv(record, dir / RunArtifacts::record);
        detail::write_run_metrics(dir, report, {{"params", count_parameters(session.student())}, {"data_fraction", b.data_fraction}});
    });
    return report.aggregate;
}

/// Distills one plan seed; returns its metrics.
inline MetricsSummary run_plan(const ExperimentConfig& cfg, const PlanSpec& p, std::uint64_t seed, SegmentationModel<float>& teacher,
                               const ExperimentData& data) {
    const DistillationPlan plan = cfg.distillation_plan(p, seed, teacher_checkpoint_path(cfg));
    const Dataset train = subsample_by_subject(data.train, plan.data_fraction, seed);
    StudentSession<float> session(plan, teacher, train.image_size());
    const TrainingRecord record = session.fit(train, &data.val);
    const MetricsReport report = evaluate_model(session.student(), data.eval);
    detail::commit_run_dir(run_dir(cfg, p.name, seed), [&](const fs::path& dir) {
        write_checkpoint(dir / RunArtifacts::checkpoint, session.checkpoint(detail::record_metadata(record)));
        write_record_csv(record, dir / RunArtifacts::record);
        detail::write_run_metrics(dir, report, {{"params", count_parameters(session.student())}, {"data_fraction", plan.data_fraction}});
    });
    return report.aggregate;
}

inline std::optional<MetricsSummary> completed_run(const fs::path& dir) {
    if (!fs::exists(dir / RunArtifacts::checkpoint) || !fs::exists(dir / RunArtifacts::metrics)) return std::nullopt;
    std::ifstream in(dir / RunArtifacts::metrics);
    return summary_from_json(json::parse(in));
}

inline std::size_t student_parameter_count(const ModelConfig& cfg) {
    return count_parameters(*build_model<float>(cfg, 0));
}

/// Runs every baseline and plan for every seed (skipping finished runs when resuming), then
/// writes <output_dir>/<name>/results.csv and the resolved config. A failing run marks its row
/// FAILED and the grid continues.
inline ResultTable run_ablation(const ExperimentConfig& cfg, const AblationOptions& options = {}) {
    const fs::path root = experiment_dir(cfg);
    fs::create_directories(root);
    {
        std::ofstream out(root / "config.resolved.json");
        out << to_json(cfg).dump(2) << '\n';
    }
    const ExperimentData data = load_experiment_data(cfg.data);
    log().info("experiment {}: {} train / {} val / {} eval samples", cfg.name, data.train.size(), data.val.size(), data.eval.size());

    std::unique_ptr<SegmentationModel<float>> teacher;
    std::string teacher_error;
    auto get_teacher = [&]() -> SegmentationModel<float>* {
        if (!teacher && teacher_error.empty()) {
            try {
                teacher = obtain_teacher(cfg, data);
            } catch (const std::exception& e) {
                teacher_error = e.what();
                log().error("teacher unavailable: {}", teacher_error);
            }
        }
        return teacher.get();
    };

    auto run_row = [&](ResultRow row, auto&& run_one) {
        std::vector<MetricsSummary> results;
        for (std::uint64_t seed : cfg.seeds) {
            const fs::path dir = run_dir(cfg, row.method, seed);
            std::optional<MetricsSummary> m = options.resume ? completed_run(dir) : std::nullopt;
            if (m) {
                if (options.verbose) log().info("{} seed {}: already complete, skipping", row.method, seed);
            } else {
                try {
                    if (options.verbose) log().info("{} seed {}: training", row.method, seed);
                    m = run_one(seed);
                } catch (const std::exception& e) {
                    log().error("{} seed {} failed: {}", row.method, seed, e.what());
                    row.failed = true;
                    row.error = e.what();
                    break;
                }
            }
            results.push_back(*m);
        }
        row.seeds = results.size();
        if (!row.failed && !results.empty()) {
            const MetricsSummary mean = [&] {
                MetricsSummary s;
                for (const auto& r : results) {
                    s.iou += r.iou;
                    s.dice += r.dice;
                    s.recall += r.recall;
                    s.precision += r.precision;
                }
                const double n = static_cast<double>(results.size());
                s.iou /= n;
                s.dice /= n;
                s.recall /= n;
                s.precision /= n;
                return s;
            }();
            row.iou = mean.iou;
            row.dice = mean.dice;
            row.recall = mean.recall;
            row.precision = mean.precision;
        }
        return row;
    };

    ResultTable table;
    for (const auto& b : cfg.baselines) {
        ResultRow row;
        row.method = b.name;
        row.label = "baseline";
        row.baseline = b.name;
        row.is_baseline = true;
        row.params_m = static_cast<double>(student_parameter_count(b.model.value_or(cfg.student.model))) / 1e6;
        table.rows.push_back(run_row(std::move(row), [&](std::uint64_t seed) { return run_baseline(cfg, b, seed, data); }));
    }
    for (const auto& p : cfg.plans) {
        ResultRow row;
        row.method = p.name;
        row.label = cfg.distillation_plan(p, 0, {}).label();
        row.baseline = p.baseline;
        row.params_m = static_cast<double>(student_parameter_count(p.model.value_or(cfg.student.model))) / 1e6;
        table.rows.push_back(run_row(std::move(row), [&](std::uint64_t seed) {
            SegmentationModel<float>* t = get_teacher();
            if (!t) throw Error("teacher unavailable: " + teacher_error);
            return run_plan(cfg, p, seed, *t, data);
        }));
    }
    fill_deltas(table);
    write_result_csv(table, root / "results.csv");
    return table;
}

} // namespace mtkd
