// Command-line front end: corpus prep, teacher/student training, distillation, evaluation,
// ablation grids and reports. Progress goes to stderr; results to stdout. Any failure prints a
// single "error: ..." line and exits non-zero.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "mtkd/mtkd.hpp"

namespace fs = std::filesystem;
using namespace mtkd;

namespace {

void print_summary(const std::string& method, std::uint64_t seed, const MetricsSummary& m) {
    json j = summary_json(m);
    j["method"] = method;
    j["seed"] = seed;
    std::cout << j.dump() << std::endl;
}

int cmd_prep(const fs::path& in, const fs::path& out, double fraction, std::uint64_t seed) {
    const PrepSummary s = prepare_corpus(in, out, fraction, seed);
    std::cout << json{{"subjects", s.subjects}, {"skipped", s.skipped}, {"slices", s.slices}, {"out", out.string()}}.dump()
              << std::endl;
    return 0;
}

int cmd_train_teacher(const fs::path& config) {
    const ExperimentConfig cfg = load_config(config);
    const ExperimentData data = load_experiment_data(cfg.data);
    auto teacher = train_experiment_teacher(cfg, data);
    const MetricsReport r = evaluate_model(*teacher, data.eval);
    print_summary("teacher", cfg.teacher.seed, r.aggregate);
    std::cout << teacher_checkpoint_path(cfg).string() << std::endl;
    return 0;
}

int cmd_train_student(const fs::path& config, bool baseline, const std::string& name) {
    const ExperimentConfig cfg = load_config(config);
    const ExperimentData data = load_experiment_data(cfg.data);
    if (baseline) {
        std::vector<const BaselineSpec*> specs;
        if (name.empty()) {
            for (const auto& b : cfg.baselines) specs.push_back(&b);
        } else {
            specs.push_back(&cfg.baseline(name));
        }
        for (const auto* b : specs)
            for (std::uint64_t seed : cfg.seeds) print_summary(b->name, seed, run_baseline(cfg, *b, seed, data));
        return 0;
    }
    if (name.empty()) throw Error("train-student needs --baseline or --plan <name>");
    const PlanSpec& plan = cfg.plan(name);
    auto teacher = obtain_teacher(cfg, data);
    for (std::uint64_t seed : cfg.seeds) print_summary(plan.name, seed, run_plan(cfg, plan, seed, *teacher, data));
    return 0;
}

int cmd_eval(const fs::path& ckpt, const fs::path& data_dir, double threshold, std::size_t size, const std::string& split,
             const fs::path& out) {
    auto loaded = load_checkpoint<float>(ckpt);
    DatasetSpec spec;
    spec.source_dir = data_dir;
    spec.split = split == "train" ? Split::train : Split::test;
    spec.image_size = {size, size};
    const Dataset ds = build_dataset(spec);
    const MetricsReport report = evaluate_model(*loaded.model, ds, threshold);
    if (!out.empty()) {
        fs::create_directories(out);
        write_metrics_csv(report, out / "per_image.csv");
        write_metrics_json(report.aggregate, out / "metrics.json");
    }
    std::cout << summary_json(report.aggregate).dump() << std::endl;
    return 0;
}

int cmd_ablate(const fs::path& config, bool resume) {
    const ExperimentConfig cfg = load_config(config);
    const ResultTable table = run_ablation(cfg, {.resume = resume, .verbose = true});
    std::size_t failed = 0;
    for (const auto& r : table.rows) failed += r.failed;
    std::cout << (experiment_dir(cfg) / "results.csv").string() << std::endl;
    if (failed) log().warn("{} of {} rows FAILED", failed, table.rows.size());
    return 0;
}

int cmd_report(const fs::path& run_dir, bool plots) {
    std::cout << write_report(run_dir, plots).string() << std::endl;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-task U-Net teacher / compact student distillation toolkit", "mtkd"};
    app.require_subcommand(1);
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

    fs::path in, out, config, ckpt, data_dir, run_dir, eval_out;
    double fraction = 1.0, threshold = 0.5;
    std::uint64_t seed = 0;
    bool baseline = false, no_resume = false, no_plots = false;
    std::string plan, name, split = "test";
    std::size_t size = 256;

    auto* prep = app.add_subcommand("prep", "Slice NIfTI volumes into a PNG corpus");
    prep->add_option("--in", in, "Input directory (imagesTr/ + labelsTr/, or images/ + labels/)")->required();
    prep->add_option("--out", out, "Output corpus directory")->required();
    prep->add_option("--fraction", fraction, "Fraction of subjects to keep")->check(CLI::Range(0.0, 1.0));
    prep->add_option("--seed", seed, "Subject-selection seed");

    auto* tt = app.add_subcommand("train-teacher", "Train the multi-task teacher");
    tt->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);

    auto* ts = app.add_subcommand("train-student", "Train a student with supervision only (--baseline) or with a plan");
    ts->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    ts->add_flag("--baseline", baseline, "Train the baseline student(s) without distillation");
    ts->add_option("--name", name, "Baseline to train (default: all baselines)");
    ts->add_option("--plan", plan, "Distillation plan to train instead of a baseline");

    auto* ds = app.add_subcommand("distill", "Distil one plan from the config for every seed");
    ds->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    ds->add_option("--plan", plan, "Plan name")->required();

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a PNG corpus");
    ev->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
    ev->add_option("--data", data_dir, "Corpus directory")->required()->check(CLI::ExistingDirectory);
    ev->add_option("--threshold", threshold, "Probability threshold")->check(CLI::Range(0.0, 1.0));
    ev->add_option("--size", size, "Square image size the model expects")->check(CLI::PositiveNumber);
    ev->add_option("--split", split, "Split subdirectory used when present")->check(CLI::IsMember({"train", "test"}));
    ev->add_option("--out", eval_out, "Directory for per_image.csv and metrics.json");

    auto* ab = app.add_subcommand("ablate", "Run the full plan grid and write results.csv");
    ab->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    ab->add_flag("--no-resume", no_resume, "Retrain runs that already finished");

    auto* rp = app.add_subcommand("report", "Render report.md, curves and ANOVA for an ablation directory");
    rp->add_option("--run-dir", run_dir, "Ablation directory (<output_dir>/<name>)")->required()->check(CLI::ExistingDirectory);
    rp->add_flag("--no-plots", no_plots, "Write curve CSVs only");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return e.get_exit_code() ? e.get_exit_code() : 2;
    }
    if (quiet) log().set_level(spdlog::level::warn);

    try {
        if (*prep) return cmd_prep(in, out, fraction, seed);
        if (*tt) return cmd_train_teacher(config);
        if (*ts) {
            if (baseline && !plan.empty()) throw Error("--baseline and --plan are mutually exclusive");
            return cmd_train_student(config, baseline, baseline ? name : plan);
        }
        if (*ds) return cmd_train_student(config, false, plan);
        if (*ev) return cmd_eval(ckpt, data_dir, threshold, size, split, eval_out);
        if (*ab) return cmd_ablate(config, !no_resume);
        if (*rp) return cmd_report(run_dir, !no_plots);
    } catch (const std::exception& e) {
        std::string msg = e.what();
        for (char& c : msg)
            if (c == '\n') c = ' ';
        std::cerr << "error: " << msg << std::endl;
        return 1;
    }
    return 1;
}
