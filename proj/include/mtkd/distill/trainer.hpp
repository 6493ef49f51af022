#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "mtkd/core/log.hpp"
#include "mtkd/data/dataset.hpp"
#include "mtkd/distill/checkpoint.hpp"
#include "mtkd/losses/losses.hpp"
#include "mtkd/nn/optim.hpp"

namespace mtkd {

enum class TrainingKind { teacher, baseline, distill };

inline std::string to_string(TrainingKind k) {
    return k == TrainingKind::teacher ? "teacher" : k == TrainingKind::baseline ? "baseline" : "distill";
}

struct EpochRow {
    std::size_t epoch = 0;
    LossBreakdown train;
    std::optional<LossBreakdown> val;
    double seconds = 0.0;
};

/// Per-epoch loss curves of one run plus the settings needed to interpret them.
struct TrainingRecord {
    TrainingKind kind = TrainingKind::baseline;
    std::vector<EpochRow> rows;
    LossWeights weights;
    std::uint64_t seed = 0;
    double data_fraction = 1.0;

    bool empty() const noexcept { return rows.empty(); }
    const EpochRow& last() const {
        if (rows.empty()) throw Error("training record is empty");
        return rows.back();
    }
};

namespace detail {

/// Accumulates sample-weighted means of loss components.
class BreakdownMean {
public:
    void add(const LossBreakdown& b, std::size_t n) {
        const double w = static_cast<double>(n);
        count_ += w;
        seg_ += w * b.seg;
        total_ += w * b.total;
        add_opt(recon_, b.recon, w);
        add_opt(enc_, b.con_enc, w);
        add_opt(bn_, b.con_bn, w);
        add_opt(dec_, b.con_dec, w);
        add_opt(pmd_, b.pmd, w);
    }
    LossBreakdown mean() const {
        if (count_ == 0.0) throw Error("no batches were accumulated");
        LossBreakdown b;
        b.seg = seg_ / count_;
        b.total = total_ / count_;
        auto get = [this](const std::optional<double>& v) -> std::optional<double> {
            if (!v) return std::nullopt;
            return *v / count_;
        };
        b.recon = get(recon_);
        b.con_enc = get(enc_);
        b.con_bn = get(bn_);
        b.con_dec = get(dec_);
        b.pmd = get(pmd_);
        return b;
    }

private:
    static void add_opt(std::optional<double>& acc, const std::optional<double>& v, double w) {
        if (v) acc = acc.value_or(0.0) + w * *v;
    }
    double count_ = 0.0, seg_ = 0.0, total_ = 0.0;
    std::optional<double> recon_, enc_, bn_, dec_, pmd_;
};

inline std::vector<std::size_t> iota_indices(std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
}

} // namespace detail

/// Options shared by every training loop.
struct TrainOptions {
    std::size_t epochs = 120;
    std::size_t batch_size = 8;
    nn::OptimizerConfig optimizer = nn::OptimizerConfig::rmsprop();
    std::uint64_t seed = 0;
    double data_fraction = 1.0;                   // recorded in the metadata only
    std::optional<std::filesystem::path> checkpoint;  // written after the last epoch when set
    std::function<void(const EpochRow&)> on_epoch;

    void validate() const {
        if (epochs < 1) throw Error("epochs must be at least 1");
        if (batch_size < 1) throw Error("batch size must be at least 1");
        if (!(optimizer.lr > 0.0)) throw Error("learning rate must be positive");
    }
};

inline TrainOptions teacher_defaults() {
    TrainOptions o;
    o.epochs = 200;
    o.optimizer = nn::OptimizerConfig::adamw(1e-4);
    return o;
}

template <typename T>
struct TrainResult {
    std::unique_ptr<SegmentationModel<T>> model;
    TrainingRecord record;
};

namespace detail {

/// Generic epoch loop: `step(indices)` trains on one batch, `evaluate(dataset)` returns the mean
/// validation breakdown.
template <typename Step, typename Eval>
TrainingRecord run_epochs(const Dataset& train, const Dataset* val, const TrainOptions& opt, TrainingRecord record,
                          Step&& step, Eval&& evaluate) {
    for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        BreakdownMean mean;
        for (const auto& idx : chunk(epoch_order(train.size(), opt.seed, epoch), opt.batch_size)) {
            mean.add(step(idx), idx.size());
        }
        EpochRow row;
        row.epoch = epoch;
        row.train = mean.mean();
        if (val && !val->empty()) row.val = evaluate(*val);
        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        log().debug("{} epoch {}/{}: train {:.5f} val {} ({:.2f}s)", to_string(record.kind), epoch, opt.epochs,
                    row.train.total, row.val ? fmt::format("{:.5f}", row.val->total) : "-", row.seconds);
        if (opt.on_epoch) opt.on_epoch(row);
        record.rows.push_back(std::move(row));
    }
    return record;
}

inline nlohmann::json record_metadata(const TrainingRecord& r) {
    return {{"kind", to_string(r.kind)},
            {"seed", r.seed},
            {"data_fraction", r.data_fraction},
            {"epochs", r.rows.size()},
            {"final_train_total", r.rows.empty() ? 0.0 : r.rows.back().train.total}};
}

} // namespace detail

/// Multi-task teacher: dice_bce on the segmentation head plus lambda_rec * MSE on the
/// reconstruction head. No early stopping.
template <typename T>
TrainResult<T> train_teacher(const Dataset& train, const Dataset* val, const ModelConfig& cfg, const TrainOptions& opt,
                             double lambda_rec) {
    opt.validate();
    if (!cfg.is_teacher()) throw Error("train_teacher needs a teacher_mt_unet config, got " + to_string(cfg.role));
    if (train.empty()) throw Error("train_teacher: empty training set");
    if (!train.labeled()) throw Error("train_teacher: training set has no masks");
    if (!(lambda_rec >= 0.0)) throw Error("lambda_rec must be non-negative");

    TrainResult<T> result;
    result.model = build_model<T>(cfg, opt.seed, train.image_size());
    auto& model = *result.model;
    nn::Optimizer<T> optimizer(model.parameters(), opt.optimizer);

    LossWeights weights;
    weights.w_enc = weights.w_bn = weights.w_dec = 0.0;
    weights.lambda_rec = lambda_rec;

    auto losses = [&](const Batch<T>& batch) {
        const ForwardOutput<T> out = model.forward(Var<T>(batch.images));
        if (!out.recon) throw Error("teacher produced no reconstruction");
        Var<T> seg = dice_bce_loss(out.seg_logits, batch.masks);
        Var<T> rec = recon_mse_loss(*out.recon, batch.images);
        LossBreakdown b;
        b.seg = seg.item();
        b.recon = rec.item();
        b.total = teacher_total_loss(b.seg, *b.recon, lambda_rec);
        return std::pair{weighted_sum<T>({seg, rec}, {T{1}, static_cast<T>(lambda_rec)}), b};
    };

    TrainingRecord record;
    record.kind = TrainingKind::teacher;
    record.weights = weights;
    record.seed = opt.seed;
    record.data_fraction = opt.data_fraction;

    auto step = [&](const std::vector<std::size_t>& idx) {
        model.set_training(true);
        optimizer.zero_grad();
        auto [total, b] = losses(make_batch<T>(train, idx));
        backward(total);
        optimizer.step();
        return b;
    };
    auto evaluate = [&](const Dataset& ds) {
        model.set_training(false);
        NoGradGuard guard;
        detail::BreakdownMean mean;
        for (const auto& idx : chunk(detail::iota_indices(ds.size()), opt.batch_size)) mean.add(losses(make_batch<T>(ds, idx)).second, idx.size());
        model.set_training(true);
        return mean.mean();
    };
    result.record = detail::run_epochs(train, val, opt, std::move(record), step, evaluate);
    model.set_training(false);
    if (opt.checkpoint) {
        save_checkpoint(*opt.checkpoint, model, result.record.rows.size() * ((train.size() + opt.batch_size - 1) / opt.batch_size),
                        opt.seed, detail::record_metadata(result.record));
    }
    return result;
}

enum class DistillLoss { contrastive, feature_mse };

inline std::string to_string(DistillLoss l) { return l == DistillLoss::contrastive ? "contrastive" : "feature_mse"; }

inline DistillLoss parse_distill_loss(std::string_view s) {
    if (s == "contrastive") return DistillLoss::contrastive;
    if (s == "feature_mse") return DistillLoss::feature_mse;
    throw Error("unknown distillation loss '" + std::string(s) + "' (expected contrastive or feature_mse)");
}

/// One distillation configuration of an ablation grid.
struct DistillationPlan {
    std::string name;
    std::filesystem::path teacher_ckpt;
    ModelConfig student_cfg = ModelConfig::defaults(ModelRole::student_s1);
    std::vector<Scale> scales{Scale::bottleneck};
    DistillLoss distill_loss = DistillLoss::contrastive;
    bool pmd = false;
    LossWeights weights;
    nn::OptimizerConfig optimizer = nn::OptimizerConfig::rmsprop();
    std::size_t epochs = 120;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    double data_fraction = 1.0;
    std::size_t embed_dim = 128;

    void validate() const {
        if (scales.empty() && !pmd) throw Error("plan " + name + ": scales may be empty only when PMD is on");
        for (std::size_t i = 0; i < scales.size(); ++i)
            for (std::size_t j = i + 1; j < scales.size(); ++j)
                if (scales[i] == scales[j]) throw Error("plan " + name + ": scale " + to_string(scales[i]) + " listed twice");
        if (epochs < 1) throw Error("plan " + name + ": epochs must be at least 1");
        if (batch_size < 1) throw Error("plan " + name + ": batch size must be at least 1");
        if (embed_dim < 1) throw Error("plan " + name + ": embed_dim must be at least 1");
        if (!(data_fraction > 0.0 && data_fraction <= 1.0)) throw Error("plan " + name + ": data_fraction must lie in (0, 1]");
        if (student_cfg.is_teacher()) throw Error("plan " + name + ": student config has the teacher role");
        student_cfg.validate();
        weights.validate();
    }

    bool uses(Scale s) const { return std::find(scales.begin(), scales.end(), s) != scales.end(); }

    /// Weights actually applied: inactive scales get 0, PMD follows the plan flag.
    LossWeights effective_weights() const {
        LossWeights w = weights;
        if (!uses(Scale::encoder)) w.w_enc = 0.0;
        if (!uses(Scale::bottleneck)) w.w_bn = 0.0;
        if (!uses(Scale::decoder)) w.w_dec = 0.0;
        w.lambda_rec = 0.0;
        w.pmd_enabled = pmd;
        return w;
    }

    /// Table label in the "B->B + E->E + PMD" style.
    std::string label() const {
        std::string out;
        for (Scale s : scales) {
            if (!out.empty()) out += " + ";
            out += fmt::format("{0}->{0}", scale_letter(s));
        }
        if (distill_loss == DistillLoss::feature_mse && !scales.empty()) out += " (MSE)";
        if (pmd) out += out.empty() ? "PMD" : " + PMD";
        return out;
    }

    TrainOptions train_options() const {
        TrainOptions o;
        o.epochs = epochs;
        o.batch_size = batch_size;
        o.optimizer = optimizer;
        o.seed = seed;
        o.data_fraction = data_fraction;
        return o;
    }
};

/// Per-sample frozen-teacher outputs. The teacher runs in evaluation mode, so a sample's outputs
/// do not depend on which batch it is in and can be computed once.
template <typename T>
class TeacherCache {
public:
    TeacherCache(SegmentationModel<T>& teacher, std::vector<Scale> scales, std::size_t budget_bytes)
        : teacher_(teacher), scales_(std::move(scales)), budget_(budget_bytes) {}

    struct Outputs {
        Tensor<T> logits;
        std::map<Scale, Tensor<T>> taps;
    };

    /// Teacher logits and active taps for a batch, stacked along dimension 0.
    Outputs batch(const Dataset& ds, const std::vector<std::size_t>& idx, const Batch<T>& input) {
        if (!enabled(ds)) return run(input.images);
        std::vector<std::size_t> missing;
        for (std::size_t i = 0; i < idx.size(); ++i)
            if (!entries_.count(key(ds, idx[i]))) missing.push_back(i);
        if (!missing.empty()) {
            std::vector<std::size_t> sub;
            for (std::size_t i : missing) sub.push_back(idx[i]);
            const Outputs fresh = run(make_batch<T>(ds, sub).images);
            for (std::size_t k = 0; k < sub.size(); ++k) {
                Outputs one;
                one.logits = slice(fresh.logits, k);
                for (const auto& [s, t] : fresh.taps) one.taps[s] = slice(t, k);
                entries_.emplace(key(ds, sub[k]), std::move(one));
            }
        }
        Outputs out;
        std::vector<const Outputs*> parts;
        for (std::size_t i : idx) parts.push_back(&entries_.at(key(ds, i)));
        out.logits = stack(parts, [](const Outputs& o) -> const Tensor<T>& { return o.logits; });
        for (Scale s : scales_) out.taps[s] = stack(parts, [s](const Outputs& o) -> const Tensor<T>& { return o.taps.at(s); });
        return out;
    }

    std::size_t size() const noexcept { return entries_.size(); }

private:
    static std::string key(const Dataset& ds, std::size_t i) {
        return ds.samples[i].subject_id + "#" + std::to_string(ds.samples[i].slice_index);
    }

    bool enabled(const Dataset& ds) {
        if (budget_ == 0) return false;
        const auto [h, w] = ds.image_size();
        std::size_t per_sample = h * w;
        for (Scale s : scales_) {
            const std::size_t stride = teacher_.tap_stride(s);
            per_sample += teacher_.tap_channels(s) * (h / stride) * (w / stride);
        }
        const std::size_t bytes = per_sample * sizeof(T);
        // Count this dataset's samples against what the cache could eventually hold.
        return (entries_.size() + ds.size()) * bytes <= budget_;
    }

    Outputs run(const Tensor<T>& images) {
        NoGradGuard guard;
        const ForwardOutput<T> out = teacher_.forward(Var<T>(images));
        Outputs o;
        o.logits = out.seg_logits.value();
        for (Scale s : scales_) o.taps[s] = out.taps.at(s).value();
        return o;
    }

    static Tensor<T> slice(const Tensor<T>& t, std::size_t n) {
        Shape shape = t.shape();
        shape[0] = 1;
        const std::size_t per = numel_of(shape);
        return Tensor<T>(shape, std::vector<T>(t.data() + n * per, t.data() + (n + 1) * per));
    }

    template <typename Get>
    static Tensor<T> stack(const std::vector<const Outputs*>& parts, Get get) {
        Shape shape = get(*parts.front()).shape();
        const std::size_t per = numel_of(shape);
        shape[0] = parts.size();
        std::vector<T> data;
        data.reserve(per * parts.size());
        for (const auto* p : parts) data.insert(data.end(), get(*p).data(), get(*p).data() + per);
        return Tensor<T>(std::move(shape), std::move(data));
    }

    SegmentationModel<T>& teacher_;
    std::vector<Scale> scales_;
    std::size_t budget_;
    std::map<std::string, Outputs> entries_;
};

/// Student training state: the student, its optimiser and, when distilling, the frozen teacher,
/// per-scale projector pairs or adapters and the teacher output cache. Without a teacher this is
/// plain supervised dice-loss training.
template <typename T>
class StudentSession {
public:
    static constexpr std::size_t default_cache_budget = std::size_t{1} << 30;

    /// Baseline (supervised) session.
    StudentSession(const ModelConfig& cfg, const TrainOptions& opt, std::array<std::size_t, 2> image_size)
        : opt_(opt), weights_(baseline_weights()) {
        opt_.validate();
        if (cfg.is_teacher()) throw Error("student training needs a student config, got " + to_string(cfg.role));
        student_ = build_model<T>(cfg, opt_.seed, image_size);
        collect_parameters();
    }

    /// Distillation session. The teacher is frozen here and never updated.
    StudentSession(const DistillationPlan& plan, SegmentationModel<T>& teacher, std::array<std::size_t, 2> image_size,
                   std::size_t cache_budget = default_cache_budget)
        : opt_(plan.train_options()), weights_(plan.effective_weights()), teacher_(&teacher), plan_(plan) {
        plan.validate();
        opt_.validate();
        if (!teacher.config().is_teacher()) throw Error("distillation teacher must have the teacher_mt_unet role");
        teacher.freeze();
        teacher.check_image_size(image_size[0], image_size[1]);
        student_ = build_model<T>(plan.student_cfg, opt_.seed, image_size);

        Rng rng(derive_seed(opt_.seed, stream::projector_init));
        for (Scale s : plan.scales) {
            const std::size_t ts = teacher.tap_stride(s), ss = student_->tap_stride(s);
            if (plan.distill_loss == DistillLoss::contrastive) {
                projectors_.emplace(s, ProjectorPair{
                    std::make_unique<Projector<T>>(s, student_->tap_channels(s), plan.embed_dim, rng),
                    std::make_unique<Projector<T>>(s, teacher.tap_channels(s), plan.embed_dim, rng)});
            } else {
                if (ts < ss || ts % ss) {
                    throw Error(fmt::format("scale {}: teacher tap stride {} is not a multiple of student tap stride {}",
                                            to_string(s), ts, ss));
                }
                adapters_.emplace(s, std::make_unique<ChannelAdapter<T>>(student_->tap_channels(s), teacher.tap_channels(s), ts / ss, rng));
            }
        }
        cache_.emplace(teacher, plan.scales, cache_budget);
        collect_parameters();
    }

    SegmentationModel<T>& student() { return *student_; }
    const LossWeights& weights() const noexcept { return weights_; }
    std::size_t steps() const noexcept { return steps_; }

    /// One optimisation step on the given samples; returns the batch breakdown.
    LossBreakdown step(const Dataset& ds, const std::vector<std::size_t>& idx) {
        student_->set_training(true);
        set_aux_training(true);
        optimizer_->zero_grad();
        auto [total, b] = losses(ds, idx);
        backward(total);
        optimizer_->step();
        ++steps_;
        return b;
    }

    /// Sample-weighted mean breakdown over a dataset, in evaluation mode.
    LossBreakdown evaluate(const Dataset& ds) {
        student_->set_training(false);
        set_aux_training(false);
        NoGradGuard guard;
        detail::BreakdownMean mean;
        for (const auto& idx : chunk(detail::iota_indices(ds.size()), opt_.batch_size)) mean.add(losses(ds, idx).second, idx.size());
        student_->set_training(true);
        set_aux_training(true);
        return mean.mean();
    }

    TrainingRecord fit(const Dataset& train, const Dataset* val) {
        if (train.empty()) throw Error("student training: empty training set");
        if (!train.labeled()) throw Error("student training: training set has no masks");
        TrainingRecord record;
        record.kind = teacher_ ? TrainingKind::distill : TrainingKind::baseline;
        record.weights = weights_;
        record.seed = opt_.seed;
        record.data_fraction = opt_.data_fraction;
        record = detail::run_epochs(
            train, val, opt_, std::move(record), [&](const std::vector<std::size_t>& idx) { return step(train, idx); },
            [&](const Dataset& ds) { return evaluate(ds); });
        student_->set_training(false);
        if (opt_.checkpoint) write_checkpoint(*opt_.checkpoint, checkpoint(detail::record_metadata(record)));
        return record;
    }

    /// Student weights plus projectors/adapters (prefixed proj.<scale>.{student,teacher}. and
    /// adapter.<scale>.).
    Checkpoint checkpoint(nlohmann::json metadata = nlohmann::json::object()) const {
        Checkpoint ckpt = make_checkpoint(*student_, steps_, opt_.seed, std::move(metadata));
        for (const auto& [s, pair] : projectors_) {
            append_state(ckpt, *pair.student, "proj." + to_string(s) + ".student.");
            append_state(ckpt, *pair.teacher, "proj." + to_string(s) + ".teacher.");
        }
        for (const auto& [s, adapter] : adapters_) append_state(ckpt, *adapter, "adapter." + to_string(s) + ".");
        return ckpt;
    }

    std::unique_ptr<SegmentationModel<T>> release_student() { return std::move(student_); }

private:
    struct ProjectorPair {
        std::unique_ptr<Projector<T>> student;
        std::unique_ptr<Projector<T>> teacher;
    };

    static LossWeights baseline_weights() {
        LossWeights w;
        w.w_enc = w.w_bn = w.w_dec = 0.0;
        w.pmd_enabled = false;
        return w;
    }

    void collect_parameters() {
        std::vector<Var<T>> params = student_->parameters();
        for (const auto& [s, pair] : projectors_) {
            for (auto& p : pair.student->parameters()) params.push_back(p);
            for (auto& p : pair.teacher->parameters()) params.push_back(p);
        }
        for (const auto& [s, adapter] : adapters_)
            for (auto& p : adapter->parameters()) params.push_back(p);
        optimizer_.emplace(std::move(params), opt_.optimizer);
    }

    void set_aux_training(bool on) {
        for (auto& [s, pair] : projectors_) {
            pair.student->set_training(on);
            pair.teacher->set_training(on);
        }
        for (auto& [s, adapter] : adapters_) adapter->set_training(on);
    }

    std::pair<Var<T>, LossBreakdown> losses(const Dataset& ds, const std::vector<std::size_t>& idx) {
        const Batch<T> batch = make_batch<T>(ds, idx);
        const ForwardOutput<T> out = student_->forward(Var<T>(batch.images));
        LossTerms<T> terms;
        terms.seg = dice_loss(sigmoid(out.seg_logits), batch.masks);
        if (teacher_) {
            const auto t = cache_->batch(ds, idx, batch);
            FeatureTaps<T> teacher_taps;
            for (const auto& [s, tap] : t.taps) tap_slot(teacher_taps, s) = Var<T>(tap);
            for (Scale s : plan_->scales) {
                if (plan_->distill_loss == DistillLoss::contrastive) {
                    const auto& pair = projectors_.at(s);
                    terms.scale(s) = scale_contrastive_loss(teacher_taps, out.taps, *pair.teacher, *pair.student, s,
                                                            static_cast<T>(weights_.contrastive_temperature));
                } else {
                    terms.scale(s) = feature_mse_loss(teacher_taps, out.taps, s, *adapters_.at(s));
                }
            }
            if (plan_->pmd) terms.pmd = pmd_loss(out.seg_logits, Var<T>(t.logits), static_cast<T>(weights_.pmd_temperature));
        }
        return student_total_loss(terms, weights_);
    }

    static Var<T>& tap_slot(FeatureTaps<T>& taps, Scale s) {
        return s == Scale::encoder ? taps.encoder : s == Scale::bottleneck ? taps.bottleneck : taps.decoder;
    }

    TrainOptions opt_;
    LossWeights weights_;
    SegmentationModel<T>* teacher_ = nullptr;
    std::optional<DistillationPlan> plan_;
    std::unique_ptr<SegmentationModel<T>> student_;
    std::map<Scale, ProjectorPair> projectors_;
    std::map<Scale, std::unique_ptr<ChannelAdapter<T>>> adapters_;
    std::optional<TeacherCache<T>> cache_;
    std::optional<nn::Optimizer<T>> optimizer_;
    std::size_t steps_ = 0;
};

/// Supervised dice-loss student training (RMSProp by default).
template <typename T>
TrainResult<T> train_student_baseline(const Dataset& train, const Dataset* val, const ModelConfig& cfg, const TrainOptions& opt) {
    if (train.empty()) throw Error("train_student_baseline: empty training set");
    StudentSession<T> session(cfg, opt, train.image_size());
    TrainResult<T> r;
    r.record = session.fit(train, val);
    r.model = session.release_student();
    return r;
}

/// Frozen-teacher distillation with an already loaded teacher.
template <typename T>
TrainResult<T> distill(const DistillationPlan& plan, SegmentationModel<T>& teacher, const Dataset& train, const Dataset* val,
                       std::optional<std::filesystem::path> checkpoint = std::nullopt) {
    if (train.empty()) throw Error("distill: empty training set");
    StudentSession<T> session(plan, teacher, train.image_size());
    TrainResult<T> r;
    r.record = session.fit(train, val);
    if (checkpoint) write_checkpoint(*checkpoint, session.checkpoint(detail::record_metadata(r.record)));
    r.model = session.release_student();
    return r;
}

/// Loads the plan's teacher checkpoint (which must hold a teacher config) and distills.
template <typename T>
TrainResult<T> distill(const DistillationPlan& plan, const Dataset& train, const Dataset* val,
                       std::optional<std::filesystem::path> checkpoint = std::nullopt) {
    auto loaded = load_checkpoint<T>(plan.teacher_ckpt);
    if (!loaded.checkpoint.config.is_teacher()) {
        throw CheckpointError(plan.teacher_ckpt, "config role is " + to_string(loaded.checkpoint.config.role) +
                                                     ", expected teacher_mt_unet");
    }
    return distill(plan, *loaded.model, train, val, std::move(checkpoint));
}

/// Component columns present in any row, in a fixed order.
inline std::vector<std::string> record_components(const TrainingRecord& r) {
    std::vector<std::string> out{"seg"};
    auto any = [&r](auto get) {
        for (const auto& row : r.rows)
            if (get(row.train).has_value()) return true;
        return false;
    };
    if (any([](const LossBreakdown& b) { return b.recon; })) out.push_back("recon");
    if (any([](const LossBreakdown& b) { return b.con_enc; })) out.push_back("con_enc");
    if (any([](const LossBreakdown& b) { return b.con_bn; })) out.push_back("con_bn");
    if (any([](const LossBreakdown& b) { return b.con_dec; })) out.push_back("con_dec");
    if (any([](const LossBreakdown& b) { return b.pmd; })) out.push_back("pmd");
    return out;
}

inline std::optional<double> component(const LossBreakdown& b, const std::string& name) {
    if (name == "seg") return b.seg;
    if (name == "recon") return b.recon;
    if (name == "con_enc") return b.con_enc;
    if (name == "con_bn") return b.con_bn;
    if (name == "con_dec") return b.con_dec;
    if (name == "pmd") return b.pmd;
    throw Error("unknown loss component " + name);
}

/// CSV with header epoch,train_total,val_total,<train_c,val_c per component>,seconds.
/// `with_seconds = false` writes 0 for timings so files are reproducible byte for byte.
inline void write_record_csv(const TrainingRecord& r, const std::filesystem::path& path, bool with_seconds = true) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    const auto comps = record_components(r);
    out << "epoch,train_total,val_total";
    for (const auto& c : comps) out << ",train_" << c << ",val_" << c;
    out << ",seconds\n";
    auto num = [](std::optional<double> v) { return v ? fmt::format("{:.9g}", *v) : std::string(); };
    for (const auto& row : r.rows) {
        out << row.epoch << ',' << num(row.train.total) << ',' << num(row.val ? std::optional(row.val->total) : std::nullopt);
        for (const auto& c : comps) out << ',' << num(component(row.train, c)) << ',' << num(row.val ? component(*row.val, c) : std::nullopt);
        out << ',' << (with_seconds ? fmt::format("{:.3f}", row.seconds) : "0") << '\n';
    }
    if (!out) throw Error("failed writing " + path.string());
}

/// Reads a file written by write_record_csv. Kind, weights and seed are not part of the CSV and
/// keep their defaults.
inline TrainingRecord read_record_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read " + path.string());
    auto split = [](const std::string& line) {
        std::vector<std::string> cells;
        std::size_t start = 0;
        while (true) {
            const auto comma = line.find(',', start);
            cells.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        return cells;
    };
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path.string() + ": empty record file");
    const auto header = split(line);
    if (header.size() < 4 || header[0] != "epoch" || header[1] != "train_total" || header[2] != "val_total" ||
        header.back() != "seconds") {
        throw FormatError(path.string() + ": unexpected record header");
    }
    TrainingRecord r;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = split(line);
        if (cells.size() != header.size()) throw FormatError(fmt::format("{}:{}: expected {} cells", path.string(), line_no, header.size()));
        auto value = [&](std::size_t i) -> std::optional<double> {
            if (cells[i].empty()) return std::nullopt;
            try {
                return std::stod(cells[i]);
            } catch (const std::exception&) {
                throw FormatError(fmt::format("{}:{}: bad number '{}'", path.string(), line_no, cells[i]));
            }
        };
        EpochRow row;
        row.epoch = static_cast<std::size_t>(value(0).value_or(0));
        row.train.total = value(1).value_or(0);
        LossBreakdown val;
        bool has_val = false;
        if (auto v = value(2)) {
            val.total = *v;
            has_val = true;
        }
        for (std::size_t i = 3; i + 1 < header.size(); ++i) {
            const bool is_val = header[i].rfind("val_", 0) == 0;
            const std::string comp = header[i].substr(is_val ? 4 : 6);
            LossBreakdown& b = is_val ? val : row.train;
            const auto v = value(i);
            if (comp == "seg") b.seg = v.value_or(0);
            else if (comp == "recon") b.recon = v;
            else if (comp == "con_enc") b.con_enc = v;
            else if (comp == "con_bn") b.con_bn = v;
            else if (comp == "con_dec") b.con_dec = v;
            else if (comp == "pmd") b.pmd = v;
        }
        if (has_val) row.val = val;
        row.seconds = value(header.size() - 1).value_or(0);
        r.rows.push_back(std::move(row));
    }
    return r;
}

} // namespace mtkd
