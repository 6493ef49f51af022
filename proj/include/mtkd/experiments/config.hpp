#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtkd/distill/trainer.hpp"

namespace mtkd {

using nlohmann::json;

inline constexpr int config_schema_version = 1;

/// Where the images come from: a PNG slice corpus on disk or the synthetic rectangle set.
struct DataConfig {
    enum class Kind { png, synthetic };
    Kind kind = Kind::synthetic;
    std::filesystem::path dir;          // png
    std::size_t synthetic_count = 200;  // synthetic
    std::uint64_t synthetic_seed = 0;   // synthetic
    std::array<std::size_t, 2> image_size{64, 64};
    double val_fraction = 0.1;  // of training subjects, held out for curves and final metrics
    std::uint64_t split_seed = 0;

    bool operator==(const DataConfig&) const = default;
};

struct TeacherConfig {
    std::optional<std::filesystem::path> checkpoint;  // trained (and written here) when missing
    ModelConfig model = ModelConfig::defaults(ModelRole::teacher_mt_unet);
    std::size_t epochs = 200;
    std::size_t batch_size = 8;
    nn::OptimizerConfig optimizer = nn::OptimizerConfig::adamw(1e-4);
    double lambda_rec = 1.0;
    std::uint64_t seed = 0;

    bool operator==(const TeacherConfig&) const = default;
};

/// Training settings shared by baseline students and distillation plans unless overridden.
struct StudentConfig {
    ModelConfig model = ModelConfig::defaults(ModelRole::student_s1);
    std::size_t epochs = 120;
    std::size_t batch_size = 8;
    nn::OptimizerConfig optimizer = nn::OptimizerConfig::rmsprop(1e-3);

    bool operator==(const StudentConfig&) const = default;
};

struct BaselineSpec {
    std::string name = "baseline";
    double data_fraction = 1.0;
    std::optional<ModelConfig> model;  // defaults to the student model

    bool operator==(const BaselineSpec&) const = default;
};

struct PlanSpec {
    std::string name;
    std::vector<Scale> scales{Scale::bottleneck};
    DistillLoss distill_loss = DistillLoss::contrastive;
    bool pmd = false;
    LossWeights weights;
    std::size_t embed_dim = 128;
    double data_fraction = 1.0;
    std::string baseline;  // name of the baseline row the deltas refer to
    std::optional<ModelConfig> model;
    std::optional<std::size_t> epochs;
    std::optional<nn::OptimizerConfig> optimizer;

    bool operator==(const PlanSpec&) const = default;
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::filesystem::path output_dir = "runs";
    std::vector<std::uint64_t> seeds{0};
    DataConfig data;
    TeacherConfig teacher;
    StudentConfig student;
    std::vector<BaselineSpec> baselines{BaselineSpec{}};
    std::vector<PlanSpec> plans;
    bool plots = true;

    bool operator==(const ExperimentConfig&) const = default;

    const BaselineSpec& baseline(const std::string& name) const {
        for (const auto& b : baselines)
            if (b.name == name) return b;
        throw Error("unknown baseline " + name);
    }
    const PlanSpec& plan(const std::string& name) const {
        for (const auto& p : plans)
            if (p.name == name) return p;
        throw Error("unknown plan '" + name + "'");
    }

    /// Full DistillationPlan for one seed.
    DistillationPlan distillation_plan(const PlanSpec& p, std::uint64_t seed, const std::filesystem::path& teacher_ckpt) const {
        DistillationPlan d;
        d.name = p.name;
        d.teacher_ckpt = teacher_ckpt;
        d.student_cfg = p.model.value_or(student.model);
        d.scales = p.scales;
        d.distill_loss = p.distill_loss;
        d.pmd = p.pmd;
        d.weights = p.weights;
        d.optimizer = p.optimizer.value_or(student.optimizer);
        d.epochs = p.epochs.value_or(student.epochs);
        d.batch_size = student.batch_size;
        d.seed = seed;
        d.data_fraction = p.data_fraction;
        d.embed_dim = p.embed_dim;
        return d;
    }
};

namespace detail {

/// Walks a JSON document, recording the JSON pointer of the node being read so every error
/// names its location.
class Reader {
public:
    Reader(const json& j, std::string pointer) : j_(j), pointer_(std::move(pointer)) {}

    const std::string& pointer() const noexcept { return pointer_; }
    const json& raw() const noexcept { return j_; }

    [[noreturn]] void fail(const std::string& msg) const { throw ConfigError(pointer_.empty() ? "/" : pointer_, msg); }

    void expect_object(std::initializer_list<const char*> allowed) const {
        if (!j_.is_object()) fail("expected an object");
        std::set<std::string> ok(allowed.begin(), allowed.end());
        for (const auto& [key, value] : j_.items()) {
            if (!ok.count(key)) throw ConfigError(child_pointer(key), "unknown key \"" + key + "\"");
        }
    }

    bool has(const char* key) const { return j_.contains(key); }
    Reader at(const char* key) const { return Reader(j_.at(key), child_pointer(key)); }
    Reader at(std::size_t i) const { return Reader(j_.at(i), pointer_ + "/" + std::to_string(i)); }

    template <typename V>
    V get() const {
        try {
            return j_.get<V>();
        } catch (const json::exception&) {
            fail("expected " + type_name<V>() + ", got " + j_.dump());
        }
    }

    template <typename V>
    void read(const char* key, V& out) const {
        if (has(key)) out = at(key).template get<V>();
    }

    std::size_t read_positive(const char* key, std::size_t fallback) const {
        if (!has(key)) return fallback;
        const Reader r = at(key);
        if (!r.raw().is_number_integer() || r.raw().get<long long>() < 1) r.fail("expected a positive integer");
        return r.raw().get<std::size_t>();
    }

    double read_fraction(const char* key, double fallback, bool allow_zero = false) const {
        if (!has(key)) return fallback;
        const Reader r = at(key);
        const double v = r.get<double>();
        if (!(allow_zero ? v >= 0.0 : v > 0.0) || !(allow_zero ? v < 1.0 : v <= 1.0)) {
            r.fail(allow_zero ? "expected a value in [0, 1)" : "expected a value in (0, 1]");
        }
        return v;
    }

    std::size_t size() const {
        if (!j_.is_array()) fail("expected an array");
        return j_.size();
    }

private:
    std::string child_pointer(const std::string& key) const {
        std::string escaped;
        for (char c : key) escaped += c == '~' ? "~0" : c == '/' ? "~1" : std::string(1, c);
        return pointer_ + "/" + escaped;
    }
    template <typename V>
    static std::string type_name() {
        if constexpr (std::is_same_v<V, bool>) return "a boolean";
        else if constexpr (std::is_same_v<V, std::string>) return "a string";
        else if constexpr (std::is_integral_v<V>) return "an integer";
        else if constexpr (std::is_floating_point_v<V>) return "a number";
        else return "a value of another type";
    }

    const json& j_;
    std::string pointer_;
};

template <typename F>
auto rethrow_at(const Reader& r, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        r.fail(e.what());
    }
}

inline ModelConfig read_model(const Reader& r, ModelConfig c) {
    r.expect_object({"role", "base_channels", "in_channels", "out_channels", "with_recon_head"});
    if (r.has("role")) {
        const auto role = rethrow_at(r.at("role"), [&] { return parse_role(r.at("role").get<std::string>()); });
        if (role != c.role) {
            const int base = c.base_channels;
            c = ModelConfig::defaults(role);
            if (r.has("base_channels")) c.base_channels = base;
        }
    }
    if (r.has("base_channels")) c.base_channels = static_cast<int>(r.read_positive("base_channels", 1));
    r.read("in_channels", c.in_channels);
    r.read("out_channels", c.out_channels);
    r.read("with_recon_head", c.with_recon_head);
    rethrow_at(r, [&] { c.validate(); });
    return c;
}

inline nn::OptimizerConfig read_optimizer(const Reader& r, nn::OptimizerConfig c) {
    r.expect_object({"kind", "lr", "weight_decay", "alpha", "momentum", "beta1", "beta2", "eps"});
    if (r.has("kind")) {
        const auto kind = r.at("kind").get<std::string>();
        const auto parsed = kind == "adamw"     ? nn::OptimizerKind::adamw
                            : kind == "rmsprop" ? nn::OptimizerKind::rmsprop
                                                : (r.at("kind").fail("expected \"adamw\" or \"rmsprop\""), nn::OptimizerKind::adamw);
        if (parsed != c.kind) c = parsed == nn::OptimizerKind::adamw ? nn::OptimizerConfig::adamw() : nn::OptimizerConfig::rmsprop();
    }
    r.read("lr", c.lr);
    r.read("weight_decay", c.weight_decay);
    r.read("alpha", c.alpha);
    r.read("momentum", c.momentum);
    r.read("beta1", c.beta1);
    r.read("beta2", c.beta2);
    r.read("eps", c.eps);
    if (!(c.lr > 0.0)) r.fail("lr must be positive");
    if (c.weight_decay < 0.0 || c.momentum < 0.0 || !(c.eps > 0.0)) r.fail("optimizer constants out of range");
    return c;
}

inline LossWeights read_weights(const Reader& r, LossWeights w) {
    r.expect_object({"w_seg", "w_enc", "w_bn", "w_dec", "pmd_temperature", "contrastive_temperature"});
    r.read("w_seg", w.w_seg);
    r.read("w_enc", w.w_enc);
    r.read("w_bn", w.w_bn);
    r.read("w_dec", w.w_dec);
    r.read("pmd_temperature", w.pmd_temperature);
    r.read("contrastive_temperature", w.contrastive_temperature);
    rethrow_at(r, [&] { w.validate(); });
    return w;
}

inline std::array<std::size_t, 2> read_size(const Reader& r) {
    if (r.size() != 2) r.fail("expected [H, W]");
    std::array<std::size_t, 2> out{};
    for (std::size_t i = 0; i < 2; ++i) {
        const Reader e = r.at(i);
        if (!e.raw().is_number_integer() || e.raw().get<long long>() < 1) e.fail("expected a positive integer");
        out[i] = e.raw().get<std::size_t>();
    }
    return out;
}

inline json to_json(const nn::OptimizerConfig& c) {
    return {{"kind", nn::to_string(c.kind)}, {"lr", c.lr},         {"weight_decay", c.weight_decay}, {"alpha", c.alpha},
            {"momentum", c.momentum},        {"beta1", c.beta1},   {"beta2", c.beta2},               {"eps", c.eps}};
}

inline json to_json(const LossWeights& w) {
    return {{"w_seg", w.w_seg},
            {"w_enc", w.w_enc},
            {"w_bn", w.w_bn},
            {"w_dec", w.w_dec},
            {"pmd_temperature", w.pmd_temperature},
            {"contrastive_temperature", w.contrastive_temperature}};
}

} // namespace detail

/// Validates a parsed JSON document against schema v1 and fills in defaults.
inline ExperimentConfig parse_config(const json& doc) {
    using detail::Reader;
    const Reader root(doc, "");
    root.expect_object({"schema_version", "name", "output_dir", "seeds", "data", "teacher", "student", "baselines", "plans", "plots"});
    if (!root.has("schema_version")) root.fail("missing \"schema_version\" (expected 1)");
    if (root.at("schema_version").get<int>() != config_schema_version) {
        root.at("schema_version").fail("unsupported schema version (expected 1)");
    }
    ExperimentConfig cfg;
    root.read("name", cfg.name);
    if (cfg.name.empty() || cfg.name.find('/') != std::string::npos) root.at("name").fail("name must be non-empty without '/'");
    if (root.has("output_dir")) cfg.output_dir = root.at("output_dir").get<std::string>();
    root.read("plots", cfg.plots);
    if (root.has("seeds")) {
        const Reader s = root.at("seeds");
        cfg.seeds.clear();
        for (std::size_t i = 0; i < s.size(); ++i) cfg.seeds.push_back(s.at(i).get<std::uint64_t>());
        if (cfg.seeds.empty()) s.fail("at least one seed is required");
        if (std::set<std::uint64_t>(cfg.seeds.begin(), cfg.seeds.end()).size() != cfg.seeds.size()) s.fail("seeds must be unique");
    }

    if (root.has("data")) {
        const Reader d = root.at("data");
        d.expect_object({"kind", "dir", "count", "seed", "image_size", "val_fraction", "split_seed"});
        auto& dc = cfg.data;
        if (d.has("kind")) {
            const auto kind = d.at("kind").get<std::string>();
            if (kind == "png") dc.kind = DataConfig::Kind::png;
            else if (kind == "synthetic") dc.kind = DataConfig::Kind::synthetic;
            else d.at("kind").fail("expected \"png\" or \"synthetic\"");
        }
        if (d.has("dir")) dc.dir = d.at("dir").get<std::string>();
        if (dc.kind == DataConfig::Kind::png && dc.dir.empty()) d.fail("png data needs \"dir\"");
        dc.synthetic_count = d.read_positive("count", dc.synthetic_count);
        d.read("seed", dc.synthetic_seed);
        if (d.has("image_size")) dc.image_size = detail::read_size(d.at("image_size"));
        dc.val_fraction = d.read_fraction("val_fraction", dc.val_fraction, /*allow_zero=*/true);
        d.read("split_seed", dc.split_seed);
    }

    if (root.has("teacher")) {
        const Reader t = root.at("teacher");
        t.expect_object({"checkpoint", "model", "epochs", "batch_size", "optimizer", "lambda_rec", "seed"});
        auto& tc = cfg.teacher;
        if (t.has("checkpoint")) tc.checkpoint = t.at("checkpoint").get<std::string>();
        if (t.has("model")) tc.model = detail::read_model(t.at("model"), tc.model);
        if (!tc.model.is_teacher()) t.at("model").fail("teacher model must have role teacher_mt_unet");
        tc.epochs = t.read_positive("epochs", tc.epochs);
        tc.batch_size = t.read_positive("batch_size", tc.batch_size);
        if (t.has("optimizer")) tc.optimizer = detail::read_optimizer(t.at("optimizer"), tc.optimizer);
        t.read("lambda_rec", tc.lambda_rec);
        if (!(tc.lambda_rec >= 0.0)) t.at("lambda_rec").fail("must be non-negative");
        t.read("seed", tc.seed);
    }

    if (root.has("student")) {
        const Reader s = root.at("student");
        s.expect_object({"model", "epochs", "batch_size", "optimizer"});
        auto& sc = cfg.student;
        if (s.has("model")) sc.model = detail::read_model(s.at("model"), sc.model);
        if (sc.model.is_teacher()) s.at("model").fail("student model cannot have the teacher role");
        sc.epochs = s.read_positive("epochs", sc.epochs);
        sc.batch_size = s.read_positive("batch_size", sc.batch_size);
        if (s.has("optimizer")) sc.optimizer = detail::read_optimizer(s.at("optimizer"), sc.optimizer);
    }

    if (root.has("baselines")) {
        const Reader b = root.at("baselines");
        cfg.baselines.clear();
        for (std::size_t i = 0; i < b.size(); ++i) {
            const Reader e = b.at(i);
            e.expect_object({"name", "data_fraction", "model"});
            BaselineSpec spec;
            e.read("name", spec.name);
            spec.data_fraction = e.read_fraction("data_fraction", spec.data_fraction);
            if (e.has("model")) {
                spec.model = detail::read_model(e.at("model"), cfg.student.model);
                if (spec.model->is_teacher()) e.at("model").fail("baseline model cannot have the teacher role");
            }
            cfg.baselines.push_back(std::move(spec));
        }
        if (cfg.baselines.empty()) b.fail("at least one baseline is required");
    }

    std::set<std::string> names;
    for (std::size_t i = 0; i < cfg.baselines.size(); ++i) {
        const auto& n = cfg.baselines[i].name;
        if (n.empty() || n.find('/') != std::string::npos || !names.insert(n).second) {
            root.at("baselines").at(i).fail("baseline names must be unique, non-empty and without '/'");
        }
    }

    if (root.has("plans")) {
        const Reader p = root.at("plans");
        for (std::size_t i = 0; i < p.size(); ++i) {
            const Reader e = p.at(i);
            e.expect_object({"name", "scales", "distill_loss", "pmd", "weights", "embed_dim", "data_fraction", "baseline",
                             "model", "epochs", "optimizer"});
            PlanSpec spec;
            if (!e.has("name")) e.fail("plan needs a \"name\"");
            spec.name = e.at("name").get<std::string>();
            if (spec.name.empty() || spec.name.find('/') != std::string::npos) e.at("name").fail("plan names must be non-empty without '/'");
            if (!names.insert(spec.name).second) e.at("name").fail("duplicate plan/baseline name \"" + spec.name + "\"");
            if (e.has("scales")) {
                const Reader s = e.at("scales");
                spec.scales.clear();
                for (std::size_t k = 0; k < s.size(); ++k) {
                    spec.scales.push_back(detail::rethrow_at(s.at(k), [&] { return parse_scale(s.at(k).get<std::string>()); }));
                }
            }
            if (e.has("distill_loss")) {
                spec.distill_loss = detail::rethrow_at(e.at("distill_loss"), [&] { return parse_distill_loss(e.at("distill_loss").get<std::string>()); });
            }
            e.read("pmd", spec.pmd);
            if (e.has("weights")) spec.weights = detail::read_weights(e.at("weights"), spec.weights);
            spec.embed_dim = e.read_positive("embed_dim", spec.embed_dim);
            spec.data_fraction = e.read_fraction("data_fraction", spec.data_fraction);
            spec.baseline = cfg.baselines.front().name;
            e.read("baseline", spec.baseline);
            detail::rethrow_at(e.at("name"), [&] { (void)cfg.baseline(spec.baseline); });
            if (e.has("model")) {
                spec.model = detail::read_model(e.at("model"), cfg.student.model);
                if (spec.model->is_teacher()) e.at("model").fail("plan model cannot have the teacher role");
            }
            if (e.has("epochs")) spec.epochs = e.read_positive("epochs", 1);
            if (e.has("optimizer")) spec.optimizer = detail::read_optimizer(e.at("optimizer"), cfg.student.optimizer);
            detail::rethrow_at(e, [&] { cfg.distillation_plan(spec, 0, {}).validate(); });
            cfg.plans.push_back(std::move(spec));
        }
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("/", "cannot read config file " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("/", "invalid JSON in " + path.string() + ": " + e.what());
    }
    return parse_config(doc);
}

/// Fully explicit JSON form (every default written out); parse_config(to_json(c)) == c.
inline json to_json(const ExperimentConfig& c) {
    json seeds = json::array();
    for (auto s : c.seeds) seeds.push_back(s);
    json doc{{"schema_version", config_schema_version}, {"name", c.name}, {"output_dir", c.output_dir.string()},
             {"seeds", seeds},                          {"plots", c.plots}};
    doc["data"] = {{"kind", c.data.kind == DataConfig::Kind::png ? "png" : "synthetic"},
                   {"count", c.data.synthetic_count},
                   {"seed", c.data.synthetic_seed},
                   {"image_size", c.data.image_size},
                   {"val_fraction", c.data.val_fraction},
                   {"split_seed", c.data.split_seed}};
    if (!c.data.dir.empty()) doc["data"]["dir"] = c.data.dir.string();
    doc["teacher"] = {{"model", to_json(c.teacher.model)},
                      {"epochs", c.teacher.epochs},
                      {"batch_size", c.teacher.batch_size},
                      {"optimizer", detail::to_json(c.teacher.optimizer)},
                      {"lambda_rec", c.teacher.lambda_rec},
                      {"seed", c.teacher.seed}};
    if (c.teacher.checkpoint) doc["teacher"]["checkpoint"] = c.teacher.checkpoint->string();
    doc["student"] = {{"model", to_json(c.student.model)},
                      {"epochs", c.student.epochs},
                      {"batch_size", c.student.batch_size},
                      {"optimizer", detail::to_json(c.student.optimizer)}};
    doc["baselines"] = json::array();
    for (const auto& b : c.baselines) {
        json e{{"name", b.name}, {"data_fraction", b.data_fraction}};
        if (b.model) e["model"] = to_json(*b.model);
        doc["baselines"].push_back(std::move(e));
    }
    doc["plans"] = json::array();
    for (const auto& p : c.plans) {
        json scales = json::array();
        for (Scale s : p.scales) scales.push_back(to_string(s));
        json e{{"name", p.name},
               {"scales", scales},
               {"distill_loss", to_string(p.distill_loss)},
               {"pmd", p.pmd},
               {"weights", detail::to_json(p.weights)},
               {"embed_dim", p.embed_dim},
               {"data_fraction", p.data_fraction},
               {"baseline", p.baseline}};
        if (p.model) e["model"] = to_json(*p.model);
        if (p.epochs) e["epochs"] = *p.epochs;
        if (p.optimizer) e["optimizer"] = detail::to_json(*p.optimizer);
        doc["plans"].push_back(std::move(e));
    }
    return doc;
}

} // namespace mtkd
