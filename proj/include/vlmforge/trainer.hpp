#pragma once

// Staged training: freeze policies, the three-stage plan (projector
// initialization, visual-language pre-training, instruction tuning), the
// four ablation presets, run logs and loss-curve comparison.

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlmforge/blend.hpp"
#include "vlmforge/checkpoint.hpp"
#include "vlmforge/model.hpp"
#include "vlmforge/optimizer.hpp"
#include "vlmforge/packing.hpp"

namespace vlmforge {

struct FreezePolicy {
    std::set<ParamGroup> trainable;

    bool is_trainable(ParamGroup g) const { return trainable.count(g) > 0; }

    static FreezePolicy parse(const std::vector<std::string>& groups) {
        FreezePolicy p;
        for (const auto& g : groups) p.trainable.insert(parse_group(g));
        return p;
    }
    static FreezePolicy all() {
        FreezePolicy p;
        for (auto g : kAllGroups) p.trainable.insert(g);
        return p;
    }
    // Projector plus the whole language model; the vision tower stays frozen.
    static FreezePolicy projector_and_llm() {
        return parse({"projector", "llm", "embed", "head"});
    }
    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (auto g : trainable) out.push_back(group_name(g) + ".*");
        return out;
    }
    bool operator==(const FreezePolicy&) const = default;
};

enum class StageKind { InitProjector, Pretrain, Sft };

inline std::string stage_name(StageKind k) {
    switch (k) {
        case StageKind::InitProjector: return "init-projector";
        case StageKind::Pretrain: return "pretrain";
        case StageKind::Sft: return "sft";
    }
    return "?";
}

inline StageKind parse_stage(std::string_view s) {
    if (s == "init-projector" || s == "0") return StageKind::InitProjector;
    if (s == "pretrain" || s == "1") return StageKind::Pretrain;
    if (s == "sft" || s == "2") return StageKind::Sft;
    throw ConfigError("unknown stage '" + std::string(s) + "'");
}

struct BlendEntry {
    std::string source;
    double proportion = 1.0;
};

struct StageSpec {
    StageKind kind = StageKind::Pretrain;
    FreezePolicy policy;
    std::vector<BlendEntry> data;
    BlendUnit unit = BlendUnit::Images;
    std::size_t steps = 0;
    double lr = 1e-3;
    std::optional<std::size_t> warmup;  // default: 3% of steps, at least 1

    std::size_t resolved_warmup() const {
        if (warmup) return *warmup;
        return std::max<std::size_t>(1, (steps * 3 + 99) / 100);
    }
};

struct TrainerOptions {
    std::size_t batch_size = 4;
    AdamWConfig adam;
    double min_lr_ratio = 0.1;
};

struct StagePlan {
    std::vector<StageSpec> stages;
    TrainerOptions options;
};

// Packed samples by source name, plus pixels for their image slots.
struct SamplePools {
    std::map<std::string, std::shared_ptr<const std::vector<PackedSample>>> pools;
    ImageProvider images;

    void add(const std::string& name, std::vector<PackedSample> samples) {
        pools[name] = std::make_shared<const std::vector<PackedSample>>(std::move(samples));
    }
    std::shared_ptr<const std::vector<PackedSample>> get(const std::string& name) const {
        auto it = pools.find(name);
        if (it == pools.end()) throw ConfigError("no data source named '" + name + "'");
        return it->second;
    }
};

// ---------------------------------------------------------------------------
// Run log

struct RunRecord {
    std::size_t step = 0;
    std::string stage;
    double loss = 0.0;
    double lr = 0.0;
    std::uint64_t tokens = 0;
    std::uint64_t images = 0;
    bool operator==(const RunRecord&) const = default;
};

struct RunLog {
    std::vector<RunRecord> records;

    void append(const RunLog& other) { records.insert(records.end(), other.records.begin(), other.records.end()); }

    std::string to_csv() const {
        std::string out = "step,stage,loss,lr,tokens,images\n";
        for (const auto& r : records)
            out += std::to_string(r.step) + "," + r.stage + "," + format_real(r.loss) + "," + format_real(r.lr) + "," +
                   std::to_string(r.tokens) + "," + std::to_string(r.images) + "\n";
        return out;
    }

    static RunLog from_csv(std::string_view text) {
        RunLog log;
        std::istringstream in{std::string(text)};
        std::string line;
        std::size_t n = 0;
        while (std::getline(in, line)) {
            ++n;
            if (line.empty()) continue;
            if (n == 1) {
                if (line != "step,stage,loss,lr,tokens,images") throw DataError("run log: unexpected header '" + line + "'");
                continue;
            }
            std::vector<std::string> f;
            std::istringstream ls(line);
            std::string cell;
            while (std::getline(ls, cell, ',')) f.push_back(cell);
            if (f.size() != 6) throw DataError("run log line " + std::to_string(n) + ": expected 6 columns");
            try {
                log.records.push_back({std::stoul(f[0]), f[1], std::stod(f[2]), std::stod(f[3]), std::stoull(f[4]),
                                       std::stoull(f[5])});
            } catch (const std::exception&) {
                throw DataError("run log line " + std::to_string(n) + ": malformed number");
            }
        }
        return log;
    }

    // Mean loss over records of one stage whose step lies in [from, to).
    double mean_loss(const std::string& stage, std::size_t from, std::size_t to) const {
        double s = 0.0;
        std::size_t n = 0;
        for (const auto& r : records)
            if (r.stage == stage && r.step >= from && r.step < to) {
                s += r.loss;
                ++n;
            }
        if (!n) throw ConfigError("no run-log records for stage " + stage + " in the requested range");
        return s / static_cast<double>(n);
    }
};

// ---------------------------------------------------------------------------
// Stage execution

template <class T>
struct TrainerState {
    std::size_t next_step = 0;
    std::uint64_t tokens = 0;
    std::uint64_t images = 0;
    std::optional<AdamW<T>> optimizer;
};

template <class T>
struct StageResult {
    RunLog log;
    TrainerState<T> state;
};

struct StepHooks {
    // Called after every optimizer step with the 0-based step index.
    std::function<void(std::size_t)> after_step;
};

inline void check_stage_data(const StageSpec& spec, const SamplePools& pools) {
    const StageTag want = spec.kind == StageKind::Sft ? StageTag::Sft : StageTag::Pretrain;
    for (const auto& e : spec.data)
        for (const auto& s : *pools.get(e.source))
            if (s.stage != want)
                throw ConfigError("stage " + stage_name(spec.kind) + " draws from '" + e.source +
                                  "', which holds samples tagged for another stage");
}

inline BlendSampler<PackedSample> stage_sampler(const StageSpec& spec, const SamplePools& pools, std::uint64_t seed) {
    std::vector<BlendSource<PackedSample>> sources;
    for (const auto& e : spec.data) sources.push_back({e.source, pools.get(e.source), e.proportion});
    return BlendSampler<PackedSample>(std::move(sources), derive_seed(seed, stage_name(spec.kind)),
                                      [](const PackedSample& s) { return s.image_count(); }, spec.unit);
}

// Runs spec.steps optimizer steps (or up to stop_after) on `model`. Batch b
// of step s is draws [s * batch_size, (s + 1) * batch_size) of the stage
// sampler, so resuming from a saved state replays the identical stream.
template <class T>
StageResult<T> run_stage(const StageSpec& spec, Model<T>& model, const SamplePools& pools, std::uint64_t seed,
                         const TrainerOptions& opts, TrainerState<T> state = {},
                         std::optional<std::size_t> stop_after = std::nullopt, const StepHooks& hooks = {}) {
    if (spec.data.empty()) throw ConfigError("stage " + stage_name(spec.kind) + " has no data sources");
    if (opts.batch_size == 0) throw ConfigError("batch_size must be positive");
    check_stage_data(spec, pools);
    const auto sampler = stage_sampler(spec, pools, seed);
    auto& ps = model.params();
    std::vector<bool> trainable(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) trainable[i] = spec.policy.is_trainable(ps.info(i).group);
    if (!state.optimizer) state.optimizer.emplace(ps, opts.adam);

    StageResult<T> result;
    const std::size_t end = stop_after ? std::min(*stop_after, spec.steps) : spec.steps;
    const std::size_t warmup = spec.resolved_warmup();
    Gradients<T> grads(ps);
    for (std::size_t step = state.next_step; step < end; ++step) {
        const double lr = scheduled_lr(step, spec.steps, warmup, spec.lr, opts.min_lr_ratio);
        std::vector<BoundSample<T>> batch;
        batch.reserve(opts.batch_size);
        std::uint64_t tokens = 0, images = 0;
        for (std::size_t j = 0; j < opts.batch_size; ++j) {
            const auto draw = sampler.at(static_cast<std::uint64_t>(step) * opts.batch_size + j);
            batch.push_back({draw.item, Model<T>::bind_images(*draw.item, pools.images)});
            tokens += draw.item->size();
            images += draw.item->image_count();
        }
        grads.zero();
        const auto [loss, count] = batch_loss_and_grads(model, std::span<const BoundSample<T>>(batch), grads);
        if (!std::isfinite(static_cast<double>(loss)))
            throw NumericError("non-finite loss in stage " + stage_name(spec.kind) + " at step " + std::to_string(step) +
                               " (batch id " + std::to_string(static_cast<std::uint64_t>(step) * opts.batch_size) + ")");
        (void)count;
        state.optimizer->step(ps, grads, lr, trainable);
        state.tokens += tokens;
        state.images += images;
        state.next_step = step + 1;
        result.log.records.push_back({step, stage_name(spec.kind), static_cast<double>(loss), lr, state.tokens, state.images});
        if (hooks.after_step) hooks.after_step(step);
    }
    result.state = std::move(state);
    return result;
}

// Optimizer moments and counters as checkpoint arrays plus JSON.
template <class T>
std::pair<nlohmann::json, std::vector<NamedArray>> save_trainer_state(const Model<T>& m, const TrainerState<T>& s) {
    nlohmann::json meta = {{"next_step", s.next_step}, {"tokens", s.tokens}, {"images", s.images}};
    std::vector<NamedArray> arrays;
    if (s.optimizer) {
        const auto& ps = m.params();
        std::vector<std::uint64_t> counts = s.optimizer->step_counts();
        meta["optimizer_steps"] = counts;
        for (std::size_t i = 0; i < ps.size(); ++i) {
            const auto& mm = s.optimizer->first_moments()[i];
            const auto& vv = s.optimizer->second_moments()[i];
            arrays.push_back({"opt.m/" + ps.info(i).name, std::vector<float>(mm.begin(), mm.end())});
            arrays.push_back({"opt.v/" + ps.info(i).name, std::vector<float>(vv.begin(), vv.end())});
        }
    }
    return {meta, arrays};
}

template <class T>
TrainerState<T> load_trainer_state(const Model<T>& m, const CheckpointData& ck, const AdamWConfig& adam) {
    TrainerState<T> s;
    if (!ck.extra.contains("trainer")) throw DataError("checkpoint carries no trainer state");
    const auto& meta = ck.extra["trainer"];
    s.next_step = meta.at("next_step").get<std::size_t>();
    s.tokens = meta.at("tokens").get<std::uint64_t>();
    s.images = meta.at("images").get<std::uint64_t>();
    if (meta.contains("optimizer_steps")) {
        const auto& ps = m.params();
        s.optimizer.emplace(ps, adam);
        s.optimizer->step_counts() = meta["optimizer_steps"].get<std::vector<std::uint64_t>>();
        for (std::size_t i = 0; i < ps.size(); ++i) {
            const auto* mm = ck.find("opt.m/" + ps.info(i).name);
            const auto* vv = ck.find("opt.v/" + ps.info(i).name);
            if (!mm || !vv) throw DataError("checkpoint lacks optimizer moments for '" + ps.info(i).name + "'");
            s.optimizer->first_moments()[i].assign(mm->values.begin(), mm->values.end());
            s.optimizer->second_moments()[i].assign(vv->values.begin(), vv->values.end());
        }
    }
    return s;
}

struct RecipeHooks {
    // After each stage completes, with the stage index.
    std::function<void(std::size_t, const StageSpec&)> after_stage;
};

// Runs the stages in order; each resumes from the parameters the previous
// stage produced, with a fresh optimizer.
template <class T>
RunLog run_recipe(const StagePlan& plan, Model<T>& model, const SamplePools& pools, std::uint64_t seed,
                  const RecipeHooks& hooks = {}) {
    if (plan.stages.empty()) throw ConfigError("plan has no stages");
    RunLog log;
    for (std::size_t i = 0; i < plan.stages.size(); ++i) {
        auto r = run_stage(plan.stages[i], model, pools, derive_seed(seed, i), plan.options);
        log.append(r.log);
        if (hooks.after_stage) hooks.after_stage(i, plan.stages[i]);
    }
    return log;
}

// ---------------------------------------------------------------------------
// Presets for the train-vs-freeze ablation

struct PresetOptions {
    std::size_t init_steps = 50;
    std::size_t pretrain_steps = 200;
    std::size_t sft_steps = 50;
    double init_lr = 3e-3;
    double pretrain_lr = 2e-3;
    double sft_lr = 1e-3;
    double sft_text_fraction = 0.25;
    std::size_t batch_size = 4;
};

struct Preset {
    std::string name;
    ProjectorKind projector = ProjectorKind::TransformerBlock;
    StagePlan plan;
};

// Source names used by the presets.
inline constexpr const char* kCaptionSource = "captions";
inline constexpr const char* kInterleavedSource = "interleaved";
inline constexpr const char* kSftVisualSource = "sft-visual";
inline constexpr const char* kSftTextSource = "sft-text";

// (a) LLM frozen in pre-training and SFT; (b) frozen in pre-training, trained
// in SFT; (c) trained in both with a transformer-block projector; (d) as (c)
// with a linear projector.
inline Preset make_preset(std::string_view name, const PresetOptions& o = {}) {
    if (name != "a" && name != "b" && name != "c" && name != "d")
        throw ConfigError("unknown preset '" + std::string(name) + "' (expected a, b, c or d)");
    const FreezePolicy projector_only = FreezePolicy::parse({"projector"});
    const FreezePolicy with_llm = FreezePolicy::projector_and_llm();
    const bool train_pretrain = name == "c" || name == "d";
    const bool train_sft = name != "a";

    Preset p;
    p.name = std::string(name);
    p.projector = name == "d" ? ProjectorKind::Linear : ProjectorKind::TransformerBlock;
    p.plan.options.batch_size = o.batch_size;
    StageSpec s0;
    s0.kind = StageKind::InitProjector;
    s0.policy = projector_only;
    s0.data = {{kCaptionSource, 1.0}};
    s0.steps = o.init_steps;
    s0.lr = o.init_lr;
    StageSpec s1;
    s1.kind = StageKind::Pretrain;
    s1.policy = train_pretrain ? with_llm : projector_only;
    s1.data = {{kInterleavedSource, 1.0}};
    s1.steps = o.pretrain_steps;
    s1.lr = o.pretrain_lr;
    StageSpec s2;
    s2.kind = StageKind::Sft;
    s2.policy = train_sft ? with_llm : projector_only;
    s2.unit = BlendUnit::Documents;
    if (o.sft_text_fraction > 0.0)
        s2.data = {{kSftVisualSource, 1.0 - o.sft_text_fraction}, {kSftTextSource, o.sft_text_fraction}};
    else
        s2.data = {{kSftVisualSource, 1.0}};
    s2.steps = o.sft_steps;
    s2.lr = o.sft_lr;
    p.plan.stages = {s0, s1, s2};
    return p;
}

// ---------------------------------------------------------------------------
// plan.json
//
// {
//   "model": { ModelConfig fields },           optional overrides
//   "max_len": 160, "batch_size": 4,
//   "optimizer": {"beta1", "beta2", "eps", "weight_decay", "clip_norm", "min_lr_ratio"},
//   "sft_text_fraction": 0.25,
//   "stages": [ {"name": "init-projector" | "pretrain" | "sft",
//                "steps": N, "lr": x, "warmup": N,
//                "trainable": ["projector", "llm", ...],
//                "unit": "images" | "documents",
//                "data": [{"source": "captions", "proportion": 1.0}, ...]}, ... ]
// }
//
// With a preset, stages listed in the plan override the preset's stage of the
// same name field by field; without one, stages must be complete.

inline StageSpec stage_from_json(const nlohmann::json& j, std::optional<StageSpec> base) {
    StageSpec s;
    if (base) s = *base;
    if (j.contains("name")) s.kind = parse_stage(j.at("name").get<std::string>());
    else if (!base) throw ConfigError("plan stage lacks 'name'");
    if (j.contains("steps")) s.steps = j.at("steps").get<std::size_t>();
    if (j.contains("lr")) s.lr = j.at("lr").get<double>();
    if (j.contains("warmup")) s.warmup = j.at("warmup").get<std::size_t>();
    if (j.contains("trainable")) s.policy = FreezePolicy::parse(j.at("trainable").get<std::vector<std::string>>());
    else if (!base) throw ConfigError("plan stage '" + stage_name(s.kind) + "' lacks 'trainable'");
    if (j.contains("unit")) s.unit = parse_blend_unit(j.at("unit").get<std::string>());
    if (j.contains("data")) {
        s.data.clear();
        for (const auto& d : j.at("data")) s.data.push_back({d.at("source").get<std::string>(), d.value("proportion", 1.0)});
    } else if (!base) {
        throw ConfigError("plan stage '" + stage_name(s.kind) + "' lacks 'data'");
    }
    return s;
}

inline StagePlan plan_from_json(const nlohmann::json& j, const std::optional<Preset>& preset) {
    StagePlan plan = preset ? preset->plan : StagePlan{};
    try {
        if (j.contains("batch_size")) plan.options.batch_size = j.at("batch_size").get<std::size_t>();
        if (j.contains("optimizer")) {
            const auto& o = j.at("optimizer");
            plan.options.adam.beta1 = o.value("beta1", plan.options.adam.beta1);
            plan.options.adam.beta2 = o.value("beta2", plan.options.adam.beta2);
            plan.options.adam.eps = o.value("eps", plan.options.adam.eps);
            plan.options.adam.weight_decay = o.value("weight_decay", plan.options.adam.weight_decay);
            plan.options.adam.clip_norm = o.value("clip_norm", plan.options.adam.clip_norm);
            plan.options.min_lr_ratio = o.value("min_lr_ratio", plan.options.min_lr_ratio);
        }
        if (j.contains("stages")) {
            if (!preset) plan.stages.clear();
            for (const auto& sj : j.at("stages")) {
                if (preset && sj.contains("name")) {
                    const auto kind = parse_stage(sj.at("name").get<std::string>());
                    auto it = std::find_if(plan.stages.begin(), plan.stages.end(),
                                           [&](const StageSpec& s) { return s.kind == kind; });
                    if (it != plan.stages.end()) {
                        *it = stage_from_json(sj, *it);
                        continue;
                    }
                }
                plan.stages.push_back(stage_from_json(sj, std::nullopt));
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("plan: ") + e.what());
    }
    if (plan.stages.empty()) throw ConfigError("plan has no stages (give 'stages' or a preset)");
    return plan;
}

// ---------------------------------------------------------------------------
// Loss-curve comparison

struct LossComparison {
    struct Row {
        std::string stage;
        std::size_t step;
        double loss_a, loss_b;
    };
    std::vector<Row> rows;       // aligned (stage, step) pairs in log-A order
    double mean_gap = 0.0;       // mean of loss_b - loss_a over aligned steps
    double final_window_gap = 0.0;
    std::size_t window = 0;

    std::string to_csv() const {
        std::string out = "step,stage,loss_a,loss_b,gap\n";
        for (const auto& r : rows)
            out += std::to_string(r.step) + "," + r.stage + "," + format_real(r.loss_a) + "," + format_real(r.loss_b) +
                   "," + format_real(r.loss_b - r.loss_a) + "\n";
        return out;
    }
    nlohmann::json summary() const {
        return {{"aligned_steps", rows.size()}, {"mean_gap", mean_gap}, {"final_window", window},
                {"final_window_gap", final_window_gap}};
    }
};

// Positive gaps mean log B sits above log A.
inline LossComparison compare_loss_curves(const RunLog& a, const RunLog& b, std::size_t window = 0) {
    std::map<std::pair<std::string, std::size_t>, double> index;
    for (const auto& r : b.records) index[{r.stage, r.step}] = r.loss;
    LossComparison c;
    for (const auto& r : a.records)
        if (auto it = index.find({r.stage, r.step}); it != index.end()) c.rows.push_back({r.stage, r.step, r.loss, it->second});
    if (c.rows.empty()) throw ConfigError("run logs share no (stage, step) records");
    double total = 0.0;
    for (const auto& r : c.rows) total += r.loss_b - r.loss_a;
    c.mean_gap = total / static_cast<double>(c.rows.size());
    c.window = window == 0 || window > c.rows.size() ? c.rows.size() : window;
    double tail = 0.0;
    for (std::size_t i = c.rows.size() - c.window; i < c.rows.size(); ++i) tail += c.rows[i].loss_b - c.rows[i].loss_a;
    c.final_window_gap = tail / static_cast<double>(c.window);
    return c;
}

}  // namespace vlmforge
