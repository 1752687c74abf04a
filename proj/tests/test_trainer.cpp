#include <gtest/gtest.h>

#include <filesystem>

#include "test_support.hpp"
#include "vlmforge/checkpoint.hpp"
#include "vlmforge/trainer.hpp"

using namespace vlmforge;
using namespace vlmforge::testing;

namespace {

SamplePools tiny_pools(std::size_t slot_len, StageTag tag = StageTag::Pretrain, std::size_t n = 6) {
    SamplePools pools;
    std::vector<PackedSample> v;
    for (std::size_t i = 0; i < n; ++i) {
        auto s = mixed_sample(20, slot_len, 100 + i);
        s.stage = tag;
        v.push_back(std::move(s));
    }
    pools.add("data", std::move(v));
    pools.images = random_images(8);
    return pools;
}

StageSpec tiny_stage(std::vector<std::string> groups, std::size_t steps, double lr) {
    StageSpec s;
    s.kind = StageKind::Pretrain;
    s.policy = FreezePolicy::parse(groups);
    s.data = {{"data", 1.0}};
    s.steps = steps;
    s.lr = lr;
    return s;
}

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("vlmforge_test_" + name)).string();
}

}  // namespace

TEST(Schedule, WarmupThenCosineToFloor) {
    EXPECT_DOUBLE_EQ(scheduled_lr(0, 100, 4, 1.0), 0.25);
    EXPECT_DOUBLE_EQ(scheduled_lr(3, 100, 4, 1.0), 1.0);
    EXPECT_DOUBLE_EQ(scheduled_lr(4, 100, 4, 1.0), 1.0);
    EXPECT_NEAR(scheduled_lr(99, 100, 4, 1.0), 0.1, 1e-12);
    for (std::size_t s = 5; s < 100; ++s) EXPECT_LE(scheduled_lr(s, 100, 4, 1.0), scheduled_lr(s - 1, 100, 4, 1.0));
    StageSpec spec;
    spec.steps = 100;
    EXPECT_EQ(spec.resolved_warmup(), 3u);
    spec.steps = 10;
    EXPECT_EQ(spec.resolved_warmup(), 1u);
}

TEST(Trainer, FrozenGroupsKeepChecksums) {
    const auto cfg = tiny_config(ProjectorKind::TransformerBlock);
    Model<double> m(cfg);
    auto pools = tiny_pools(cfg.image_tokens());
    std::map<ParamGroup, Digest> before;
    for (auto g : kAllGroups) before[g] = m.params().checksum(g);
    TrainerOptions opts;
    opts.batch_size = 2;
    run_stage(tiny_stage({"projector"}, 5, 1e-2), m, pools, 3, opts);
    for (auto g : kAllGroups) {
        if (g == ParamGroup::Projector)
            EXPECT_NE(m.params().checksum(g), before[g]);
        else
            EXPECT_EQ(m.params().checksum(g), before[g]) << group_name(g);
    }
}

TEST(Trainer, FrozenMomentsAndCountersUntouched) {
    const auto cfg = tiny_config();
    Model<double> m(cfg);
    auto pools = tiny_pools(cfg.image_tokens());
    TrainerOptions opts;
    opts.batch_size = 1;
    auto r = run_stage(tiny_stage({"llm"}, 3, 1e-2), m, pools, 3, opts);
    const auto& ps = m.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const bool trained = ps.info(i).group == ParamGroup::Llm;
        EXPECT_EQ(r.state.optimizer->step_counts()[i], trained ? 3u : 0u) << ps.info(i).name;
        if (!trained)
            for (double v : r.state.optimizer->first_moments()[i]) ASSERT_EQ(v, 0.0);
    }
}

TEST(Trainer, ZeroLearningRateLeavesParameters) {
    const auto cfg = tiny_config();
    Model<double> m(cfg);
    auto pools = tiny_pools(cfg.image_tokens());
    const auto before = m.params();
    auto spec = tiny_stage({"vision", "projector", "llm", "embed", "head"}, 3, 0.0);
    auto r = run_stage(spec, m, pools, 1, {});
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before.values(i), m.params().values(i));
    ASSERT_EQ(r.log.records.size(), 3u);
    for (const auto& rec : r.log.records) EXPECT_TRUE(std::isfinite(rec.loss));
}

TEST(Trainer, OverfitsSingleSample) {
    const auto cfg = tiny_config();
    Model<float> m(cfg);
    auto pools = tiny_pools(cfg.image_tokens(), StageTag::Pretrain, 1);
    TrainerOptions opts;
    opts.batch_size = 1;
    auto spec = tiny_stage({"projector", "llm", "embed", "head"}, 200, 1e-2);
    spec.warmup = 10;
    auto r = run_stage(spec, m, pools, 1, opts);
    EXPECT_LT(r.log.records.back().loss, 0.1);
    EXPECT_GT(r.log.records.front().loss, 3.0);
}

TEST(Trainer, DeterministicAcrossRuns) {
    const auto cfg = tiny_config();
    auto pools = tiny_pools(cfg.image_tokens());
    auto spec = tiny_stage({"projector", "llm"}, 6, 5e-3);
    Model<float> a(cfg), b(cfg);
    auto ra = run_stage(spec, a, pools, 9, {});
    auto rb = run_stage(spec, b, pools, 9, {});
    EXPECT_EQ(ra.log.to_csv(), rb.log.to_csv());
    EXPECT_EQ(a.params().checksum(ParamGroup::Llm), b.params().checksum(ParamGroup::Llm));
    Model<float> c(cfg);
    auto rc = run_stage(spec, c, pools, 10, {});
    EXPECT_NE(ra.log.to_csv(), rc.log.to_csv());
}

TEST(Trainer, ResumeFromCheckpointIsBitIdentical) {
    const auto cfg = tiny_config(ProjectorKind::TransformerBlock);
    auto pools = tiny_pools(cfg.image_tokens());
    auto spec = tiny_stage({"projector", "llm", "embed", "head"}, 10, 5e-3);
    TrainerOptions opts;
    opts.batch_size = 2;

    Model<float> full(cfg);
    auto rf = run_stage(spec, full, pools, 4, opts);

    Model<float> first(cfg);
    auto r1 = run_stage(spec, first, pools, 4, opts, {}, std::size_t{4});
    const auto path = tmp_path("resume.ckpt");
    auto [meta, arrays] = save_trainer_state(first, r1.state);
    save_checkpoint(path, first, nlohmann::json{{"trainer", meta}}, arrays);

    const auto ck = load_checkpoint(path);
    Model<float> resumed(ck.config);
    load_into(resumed, ck);
    auto state = load_trainer_state(resumed, ck, opts.adam);
    EXPECT_EQ(state.next_step, 4u);
    auto r2 = run_stage(spec, resumed, pools, 4, opts, std::move(state));
    RunLog joined = r1.log;
    joined.append(r2.log);
    EXPECT_EQ(joined.to_csv(), rf.log.to_csv());
    for (auto g : kAllGroups) EXPECT_EQ(resumed.params().checksum(g), full.params().checksum(g));
    std::filesystem::remove(path);
}

TEST(Trainer, StageTagMismatchRejected) {
    const auto cfg = tiny_config();
    Model<float> m(cfg);
    auto pools = tiny_pools(cfg.image_tokens(), StageTag::Sft);
    EXPECT_THROW(run_stage(tiny_stage({"llm"}, 1, 1e-3), m, pools, 0, {}), ConfigError);
    auto spec = tiny_stage({"llm"}, 1, 1e-3);
    spec.kind = StageKind::Sft;
    EXPECT_NO_THROW(run_stage(spec, m, pools, 0, {}));
}

TEST(Trainer, NonFiniteLossIsNumericError) {
    const auto cfg = tiny_config();
    Model<float> m(cfg);
    auto pools = tiny_pools(cfg.image_tokens());
    m.params().values(m.params().find("head.out.b"))[0] = std::numeric_limits<float>::quiet_NaN();
    try {
        run_stage(tiny_stage({"llm"}, 2, 1e-3), m, pools, 0, {});
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
    }
}

TEST(Checkpoint, RoundTripAndCorruption) {
    const auto cfg = tiny_config(ProjectorKind::Downsample);
    Model<float> m(cfg);
    jitter(m, 0.01, 2);
    const auto bytes = encode_checkpoint({cfg, {{"note", "x"}}, model_arrays(m)});
    const auto ck = decode_checkpoint(bytes);
    EXPECT_EQ(ck.config, cfg);
    EXPECT_EQ(ck.extra["note"], "x");
    Model<float> back(ck.config);
    load_into(back, ck);
    for (auto g : kAllGroups) EXPECT_EQ(back.params().checksum(g), m.params().checksum(g));

    EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
    EXPECT_THROW(decode_checkpoint("NOTACKPT" + bytes.substr(8)), DataError);
    Model<float> other(tiny_config(ProjectorKind::Linear));
    EXPECT_THROW(load_into(other, ck), DataError);
}

TEST(Presets, FreezePoliciesMatchAblation) {
    const auto vision = FreezePolicy::parse({"projector"});
    const auto full = FreezePolicy::projector_and_llm();
    struct Want {
        const char* name;
        FreezePolicy pre, sft;
        ProjectorKind proj;
    };
    for (const auto& w : {Want{"a", vision, vision, ProjectorKind::TransformerBlock},
                          Want{"b", vision, full, ProjectorKind::TransformerBlock},
                          Want{"c", full, full, ProjectorKind::TransformerBlock},
                          Want{"d", full, full, ProjectorKind::Linear}}) {
        const auto p = make_preset(w.name);
        ASSERT_EQ(p.plan.stages.size(), 3u);
        EXPECT_EQ(p.plan.stages[0].policy, vision) << w.name;
        EXPECT_EQ(p.plan.stages[1].policy, w.pre) << w.name;
        EXPECT_EQ(p.plan.stages[2].policy, w.sft) << w.name;
        EXPECT_EQ(p.projector, w.proj) << w.name;
        for (const auto& s : p.plan.stages) EXPECT_FALSE(s.policy.is_trainable(ParamGroup::Vision));
    }
    EXPECT_THROW(make_preset("e"), ConfigError);
}

TEST(Presets, PlanJsonOverridesByStageName) {
    const auto preset = make_preset("b");
    const auto j = nlohmann::json::parse(R"({"batch_size": 3,
        "stages": [{"name": "pretrain", "steps": 7, "lr": 0.5}]})");
    const auto plan = plan_from_json(j, preset);
    EXPECT_EQ(plan.options.batch_size, 3u);
    EXPECT_EQ(plan.stages[1].steps, 7u);
    EXPECT_EQ(plan.stages[1].lr, 0.5);
    EXPECT_EQ(plan.stages[1].policy, preset.plan.stages[1].policy);
    EXPECT_THROW(plan_from_json(nlohmann::json::parse(R"({"stages": [{"name": "pretrain"}]})"), std::nullopt),
                 ConfigError);
    EXPECT_THROW(plan_from_json(nlohmann::json::object(), std::nullopt), ConfigError);
}

TEST(CompareLoss, IdentityAndOffset) {
    RunLog a;
    for (std::size_t s = 0; s < 50; ++s) a.records.push_back({s, "pretrain", 5.0 / (1.0 + s), 1e-3, s * 10, s});
    auto same = compare_loss_curves(a, a, 10);
    EXPECT_EQ(same.mean_gap, 0.0);
    EXPECT_EQ(same.final_window_gap, 0.0);
    RunLog b = a;
    for (auto& r : b.records) r.loss += 0.3;
    auto off = compare_loss_curves(a, b, 10);
    EXPECT_NEAR(off.mean_gap, 0.3, 1e-12);
    EXPECT_NEAR(off.final_window_gap, 0.3, 1e-12);
    RunLog disjoint;
    disjoint.records.push_back({0, "sft", 1.0, 0.0, 0, 0});
    EXPECT_THROW(compare_loss_curves(a, disjoint), ConfigError);
}

TEST(RunLogCsv, RoundTripsExactly) {
    RunLog a;
    a.records.push_back({0, "pretrain", 0.1 + 0.2, 1.0 / 3.0, 12, 1});
    a.records.push_back({1, "pretrain", 5.5451774444795623, 2e-4, 24, 2});
    EXPECT_EQ(RunLog::from_csv(a.to_csv()).records, a.records);
    EXPECT_THROW(RunLog::from_csv("bad,header\n"), DataError);
}
