// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion ids as
// arguments to run a subset.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "test_support.hpp"
#include "vlmforge/blend.hpp"
#include "vlmforge/diagnostics.hpp"
#include "vlmforge/eval.hpp"
#include "vlmforge/fixture.hpp"
#include "vlmforge/trainer.hpp"

namespace fs = std::filesystem;
using namespace vlmforge;
using namespace vlmforge::testing;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.precision(prec);
    os << v;
    return os.str();
}

const Tokenizer tok;
constexpr std::uint64_t kSeeds[] = {1, 2, 3};

// Interleaved documents that fit one packed sample each at the desk config.
FixtureSpec desk_fixture(std::uint64_t seed, std::size_t n_docs = 200) {
    FixtureSpec s;
    s.interleaved = {n_docs, 3.0, 2, 4, 40.0};
    s.pairs = {200, 22.7};
    s.seed = seed;
    return s;
}

std::shared_ptr<const std::vector<PackedSample>> pack_all(const std::vector<InterleavedDocument>& docs,
                                                          const ModelConfig& cfg) {
    auto out = std::make_shared<std::vector<PackedSample>>();
    for (const auto& d : docs)
        for (auto& s : pack_document(d, tok, cfg.geometry(), cfg.max_positions)) out->push_back(std::move(s));
    return out;
}

std::vector<InterleavedDocument> pair_docs(const std::vector<PairSample>& pairs) {
    std::vector<InterleavedDocument> out;
    for (const auto& p : pairs) out.push_back(pair_as_document(p));
    return out;
}

SamplePools desk_pools(const FixtureSpec& spec, const ModelConfig& cfg) {
    SamplePools pools;
    pools.images = fixture_images(cfg.resolution);
    pools.pools[kCaptionSource] = pack_all(pair_docs(make_pair_fixture(spec)), cfg);
    pools.pools[kInterleavedSource] = pack_all(make_interleaved_fixture(spec), cfg);
    auto visual = std::make_shared<std::vector<PackedSample>>();
    for (const auto& d : make_sft_visual(200, spec.n_classes, spec.seed)) visual->push_back(pack_sft(d, tok, cfg.geometry()));
    auto text = std::make_shared<std::vector<PackedSample>>();
    for (const auto& d : make_sft_text(200, spec.seed)) text->push_back(pack_sft(d, tok, cfg.geometry()));
    pools.pools[kSftVisualSource] = visual;
    pools.pools[kSftTextSource] = text;
    return pools;
}

ModelConfig desk_config(std::uint64_t seed, ProjectorKind kind = ProjectorKind::TransformerBlock) {
    ModelConfig c;
    c.projector.kind = kind;
    c.seed = seed;
    return c;
}

std::map<ParamGroup, Digest> checksums(const ParameterStore<float>& ps) {
    std::map<ParamGroup, Digest> out;
    for (auto g : {ParamGroup::Vision, ParamGroup::Projector, ParamGroup::Llm, ParamGroup::Embed, ParamGroup::Head})
        out[g] = ps.checksum(g);
    return out;
}

// ---------------------------------------------------------------------------

Outcome freeze_policy() {
    const auto cfg = desk_config(7);
    const auto pools = desk_pools(desk_fixture(7, 40), cfg);
    const auto preset = make_preset("a");
    std::string detail;
    bool ok = true;

    auto check = [&](const StageSpec& stage, const std::set<ParamGroup>& may_change, const char* label) {
        Model<float> m(cfg);
        auto spec = stage;
        spec.steps = 100;
        const auto before = checksums(m.params());
        run_stage(spec, m, pools, 3, preset.plan.options);
        const auto after = checksums(m.params());
        for (const auto& [g, d] : before) {
            const bool changed = d != after.at(g);
            if (changed != may_change.contains(g)) {
                ok = false;
                detail += std::string(label) + ": " + group_name(g) + (changed ? " changed; " : " unchanged; ");
            }
        }
    };
    check(preset.plan.stages[1], {ParamGroup::Projector}, "preset a pretrain");
    check(preset.plan.stages[0], {ParamGroup::Projector}, "stage 0");
    if (ok) detail = "preset (a) pretrain and stage 0: only projector checksums moved over 100 steps";
    return {ok, detail};
}

double sample_loss(const Model<double>& m, const PackedSample& s, const std::vector<ImageTensor>& imgs) {
    const auto tgt = next_token_targets(s);
    return m.loss_and_grads(m.forward(s, std::span<const ImageTensor>(imgs)), tgt.targets, tgt.mask).loss;
}

Outcome gradient_oracle() {
    double worst = 0.0;
    std::string where;
    for (auto kind : {ProjectorKind::Linear, ProjectorKind::TransformerBlock, ProjectorKind::Downsample}) {
        auto cfg = tiny_config(kind);
        cfg.max_positions = 24;
        Model<double> m(cfg);
        jitter(m, 0.2, 17);
        const auto s = mixed_sample(24, cfg.image_tokens(), 6);
        const auto imgs = Model<double>::bind_images(s, random_images(cfg.resolution));
        const auto tgt = next_token_targets(s);
        const auto analytic = m.loss_and_grads(m.forward(s, std::span<const ImageTensor>(imgs)), tgt.targets, tgt.mask);
        std::map<ParamGroup, std::vector<std::size_t>> by_group;
        for (std::size_t i = 0; i < m.params().size(); ++i) by_group[m.params().info(i).group].push_back(i);
        CounterRng rng(derive_seed(99, static_cast<std::uint64_t>(kind)));
        const double eps = 1e-3;
        for (auto& [group, idxs] : by_group) {
            for (int trial = 0; trial < 25; ++trial) {
                const std::size_t p = idxs[rng.below(idxs.size())];
                auto& vals = m.params().values(p);
                const std::size_t c = rng.below(vals.size());
                const double orig = vals[c];
                vals[c] = orig + eps;
                const double up = sample_loss(m, s, imgs);
                vals[c] = orig - eps;
                const double down = sample_loss(m, s, imgs);
                vals[c] = orig;
                const double numeric = (up - down) / (2 * eps);
                const double a = analytic.grads.g[p][c];
                const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
                if (rel > worst) {
                    worst = rel;
                    where = m.params().info(p).name + "[" + std::to_string(c) + "]";
                }
            }
        }
    }
    return {worst < 1e-3, "worst relative error " + fmt(worst, 3) + " at " + where + " (3 projectors x 5 groups x 25)"};
}

Outcome loss_mask() {
    auto cfg = tiny_config(ProjectorKind::TransformerBlock);
    Model<double> m(cfg);
    jitter(m, 0.1, 1);
    std::vector<PackedSample> samples;
    for (std::uint64_t s = 0; s < 8; ++s) samples.push_back(mixed_sample(24, cfg.image_tokens(), s));
    for (const auto& d : make_sft_visual(4, 8, 3)) samples.push_back(pack_sft(d, tok, cfg.geometry()));
    std::size_t mutated = 0;
    for (const auto& s : samples) {
        const auto trace = m.forward(s, fixture_images(cfg.resolution));
        auto tgt = next_token_targets(s);
        const auto base = m.loss_and_grads(trace, tgt.targets, tgt.mask);
        for (TokenId shift : {1, 17, 101}) {
            auto t = tgt;
            for (std::size_t i = 0; i < t.targets.size(); ++i)
                if (!t.mask[i]) t.targets[i] = static_cast<TokenId>((t.targets[i] + shift) % cfg.vocab_size), ++mutated;
            const auto r = m.loss_and_grads(trace, t.targets, t.mask);
            if (r.loss != base.loss || r.grads.g != base.grads.g)
                return {false, "loss moved by " + fmt(r.loss - base.loss) + " after masked-target mutation"};
        }
    }
    return {true, "loss and gradients bit-identical over " + std::to_string(mutated) + " masked-target mutations"};
}

Outcome token_counts() {
    const std::size_t a = tokens_per_image(336, 14, 1), b = tokens_per_image(224, 14, 1), c = tokens_per_image(336, 14, 2);
    return {a == 576 && b == 256 && c == 144,
            std::to_string(a) + ", " + std::to_string(b) + ", " + std::to_string(c) + " (want 576, 256, 144)"};
}

Outcome pairs_oracle() {
    InterleavedDocument d;
    d.doc_id = "schematic";
    d.segments = {TextSegment{"txt1"},
                  ImageSegment{"im1", std::map<std::size_t, double>{{0, 0.1}, {2, 0.9}, {3, 0.2}, {5, 0.3}}},
                  TextSegment{"txt2"},
                  TextSegment{"txt3"},
                  ImageSegment{"im2", std::map<std::size_t, double>{{0, 0.2}, {2, 0.1}, {3, 0.4}, {5, 0.8}}},
                  TextSegment{"txt4"}};
    const auto p = to_pairs(d, PairPolicy::BestSim);
    const bool schematic = p.size() == 2 && p[0].image_id == "im1" && p[0].caption == "txt2" && p[1].image_id == "im2" &&
                           p[1].caption == "txt4";
    std::size_t mismatches = 0, compared = 0, unscored = 0;
    CounterRng rng(2024);
    // Documents without text leave images unscored; those must be rejected.
    for (int i = 0; compared < 1000; ++i) {
        const auto doc = random_document(rng, 1 + rng.below(14), "fz" + std::to_string(i));
        if (std::none_of(doc.segments.begin(), doc.segments.end(), [](const Segment& s) { return is_text(s); })) {
            ++unscored;
            try {
                to_pairs(doc, PairPolicy::BestSim);
                ++mismatches;
            } catch (const DataError&) {
            }
            continue;
        }
        ++compared;
        const auto got = to_pairs(doc, PairPolicy::BestSim);
        const auto want = oracle::to_pairs(doc, true);
        bool same = got.size() == want.size();
        for (std::size_t k = 0; same && k < got.size(); ++k)
            same = got[k].image_id == want[k].image_id && got[k].caption == want[k].caption &&
                   got[k].clip_score == want[k].clip_score;
        mismatches += !same;
    }
    return {schematic && mismatches == 0, std::string("schematic ") + (schematic ? "ok" : "WRONG") + ", " +
                                              std::to_string(mismatches) + " mismatches over 1000 fuzzed documents (" +
                                              std::to_string(unscored) + " text-free ones rejected)"};
}

Outcome topk_oracle() {
    std::size_t mismatches = 0, ties = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        CounterRng rng(derive_seed(seed, "topk"));
        const bool with_ties = seed % 2 == 0;
        const auto pairs = random_pairs(rng, 10000, with_ties);
        ties += with_ties;
        const std::size_t k = 1 + rng.below(12000);
        const auto got = subsample_topk(pairs, k);
        const auto want = oracle::topk(pairs, k);
        bool same = got.size() == want.size();
        for (std::size_t i = 0; same && i < got.size(); ++i)
            same = got[i].image_id == want[i].image_id && got[i].caption == want[i].caption &&
                   got[i].clip_score == want[i].clip_score;
        mismatches += !same;
    }
    return {mismatches == 0, std::to_string(mismatches) + " mismatches over 50 seeds x 10000 pairs (" +
                                 std::to_string(ties) + " tie-heavy)"};
}

VectorSet random_set(CounterRng& rng, std::size_t n, std::size_t dim) {
    VectorSet s(n, std::vector<double>(dim));
    for (auto& v : s)
        for (auto& x : v) x = rng.normal();
    return s;
}

Outcome chamfer_metric() {
    CounterRng rng(77);
    const auto A0 = random_set(rng, 8, 16);
    const double self = chamfer_cosine(A0, A0);
    const double ortho = chamfer_cosine({{1, 0, 0}}, {{0, 1, 0}});
    double worst = 0.0;
    bool rescale = true;
    for (int i = 0; i < 100; ++i) {
        const auto A = random_set(rng, 1 + rng.below(10), 16), B = random_set(rng, 1 + rng.below(10), 16);
        const double v = chamfer_cosine(A, B);
        worst = std::max(worst, std::abs(v - oracle::chamfer(A, B)));
        auto A2 = A, B2 = B;
        for (auto& a : A2) {
            const double s = std::ldexp(1.0, static_cast<int>(rng.below(40)) - 20);
            for (auto& x : a) x *= s;
        }
        for (auto& b : B2)
            for (auto& x : b) x *= 1024.0;
        rescale &= chamfer_cosine(A2, B2) == v;
    }
    const bool ok = std::abs(self - 1.0) <= 1e-12 && std::abs(ortho) <= 1e-12 && worst <= 1e-12 && rescale;
    return {ok, "self " + fmt(self, 17) + ", orthogonal " + fmt(ortho) + ", oracle max diff " + fmt(worst, 3) +
                    ", power-of-two rescaling " + (rescale ? "bit-identical" : "DIFFERS")};
}

// Same seed, same model; only the data layout differs.
Outcome interleave_vs_pairs() {
    constexpr std::size_t steps = 2000, window = 500;
    std::string detail;
    bool ok = true;
    for (auto seed : kSeeds) {
        const auto cfg = desk_config(seed);
        const auto spec = desk_fixture(seed);
        const auto docs = make_interleaved_fixture(spec);
        std::vector<PairSample> pairs;
        for (const auto& d : docs)
            for (auto& p : to_pairs(d, PairPolicy::BestSim)) pairs.push_back(std::move(p));
        SamplePools pools;
        pools.images = fixture_images(cfg.resolution);
        pools.pools["interleaved"] = pack_all(docs, cfg);
        pools.pools["pairs"] = pack_all(pair_docs(pairs), cfg);
        double final_loss[2];
        int i = 0;
        for (const char* source : {"interleaved", "pairs"}) {
            Model<float> m(cfg);
            StageSpec st;
            st.kind = StageKind::Pretrain;
            st.policy = FreezePolicy::all();
            st.data = {{source, 1.0}};
            st.steps = steps;
            st.lr = 2e-3;
            const auto r = run_stage(st, m, pools, derive_seed(seed, "trainer"), TrainerOptions{});
            final_loss[i++] = r.log.mean_loss("pretrain", steps - window, steps);
        }
        const bool lower = final_loss[0] < final_loss[1];
        ok &= lower;
        detail += "seed " + std::to_string(seed) + ": " + fmt(final_loss[0]) + " vs " + fmt(final_loss[1]) + "; ";
    }
    detail += "(interleaved vs pairs, final 500 of 2000 steps)";
    return {ok, detail};
}

// Identical budgets from a shared text warm start; only the pretrain freeze
// policy differs.
Outcome deep_alignment() {
    std::string detail;
    bool ok = true;
    for (auto seed : kSeeds) {
        const auto cfg = desk_config(seed);
        const auto spec = desk_fixture(seed);
        auto pools = desk_pools(spec, cfg);
        Model<float> base(cfg);
        {
            StageSpec warm;
            warm.kind = StageKind::Sft;
            warm.policy = FreezePolicy::parse({"llm", "embed", "head"});
            warm.data = {{kSftTextSource, 1.0}};
            warm.unit = BlendUnit::Documents;
            warm.steps = 300;
            warm.lr = 2e-3;
            run_stage(warm, base, pools, derive_seed(seed, "warm"), TrainerOptions{});
        }
        const auto profile_set = [&] {
            std::vector<PackedSample> out;
            for (const auto& s : *pools.get(kInterleavedSource)) {
                if (out.size() == 32) break;
                out.push_back(s);
            }
            return out;
        }();
        double deepest[2];
        int i = 0;
        for (const char* name : {"a", "c"}) {
            const auto preset = make_preset(name);
            Model<float> m = base;
            for (std::size_t k = 0; k < 2; ++k)
                run_stage(preset.plan.stages[k], m, pools, derive_seed(seed, k), preset.plan.options);
            deepest[i++] = alignment_profile(m, std::span<const PackedSample>(profile_set), pools.images).deepest();
        }
        const bool holds = deepest[0] <= deepest[1];
        ok &= holds;
        detail += "seed " + std::to_string(seed) + ": frozen " + fmt(deepest[0]) + " vs trained " + fmt(deepest[1]) + "; ";
    }
    detail += "(deepest-layer chamfer_cos)";
    return {ok, detail};
}

struct Shell {
    fs::path dir;
    int operator()(const std::string& args) const {
        const std::string cmd = "cd '" + dir.string() + "' && '" + VLMFORGE_CLI + "' " + args + " > /dev/null 2>> errors.txt";
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }
};

Outcome recipe_smoke() {
    const fs::path dir = fs::temp_directory_path() / "vlmforge_acceptance_recipe";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const Shell sh{dir};
    auto fail = [&](const std::string& what) { return Outcome{false, what + " (see " + (dir / "errors.txt").string() + ")"}; };
    if (sh("fixture --out-dir fx --seed 4 --n-docs 200 --images-mean 3 --images-min 2 --images-max 4 --tokens-per-image 40 "
           "--n-pairs 200") != 0)
        return fail("fixture failed");
    for (const char* p : {"pack run fx/pairs.jsonl caps.shard --format pairs", "pack run fx/interleaved.jsonl inter.shard",
                          "pack run fx/sft_visual.jsonl sftv.shard --format sft --stage sft",
                          "pack run fx/sft_text.jsonl sftt.shard --format sft --stage sft"})
        if (sh(p) != 0) return fail(std::string("'") + p + "' failed");
    const std::string data =
        " --seed 4 --data captions=caps.shard --data interleaved=inter.shard --data sft-visual=sftv.shard --data "
        "sft-text=sftt.shard";
    std::string detail;
    for (const std::string p : {"a", "b", "c", "d"}) {
        for (const std::string out : {p, p + "-rerun"})
            if (const int rc = sh("train run --preset " + p + " --out-dir " + out + data); rc != 0)
                return fail("preset " + p + " train exited " + std::to_string(rc));
        if (sh("diag align --ckpt " + p + "/final.ckpt --shard inter.shard --out " + p + "/align.csv --tag " + p) != 0)
            return fail("preset " + p + " diag align failed");
        if (sh("eval run --ckpt " + p + "/final.ckpt --task fx/eval_color.jsonl -k 2 --out " + p + "/eval.csv") != 0)
            return fail("preset " + p + " eval failed");
        for (const char* f : {"stage0-init-projector.ckpt", "stage1-pretrain.ckpt", "stage2-sft.ckpt", "final.ckpt",
                              "align.csv", "eval.csv", "manifest.json"})
            if (!fs::exists(dir / p / f)) return fail("preset " + p + " missing " + f);
        const auto log = read_file(dir / p / "run_log.csv");
        if (log != read_file(dir / (p + "-rerun") / "run_log.csv")) return fail("preset " + p + " rerun log differs");
        const auto parsed = RunLog::from_csv(log);
        if (parsed.records.size() != 300) return fail("preset " + p + " logged " + std::to_string(parsed.records.size()));
        for (const auto& r : parsed.records)
            if (!std::isfinite(r.loss)) return fail("preset " + p + " non-finite loss");
        detail += p + " final loss " + fmt(parsed.records.back().loss, 3) + "; ";
    }
    detail += "rerun logs byte-identical";
    return {true, detail};
}

Outcome blend_calibration() {
    auto docs = [](std::size_t n, std::size_t images) {
        return std::make_shared<const std::vector<std::size_t>>(n, images);
    };
    BlendSampler<std::size_t> s({{"four", docs(50, 4), 0.5}, {"one", docs(80, 1), 0.5}}, 11,
                                [](std::size_t d) { return d; });
    std::size_t images[2] = {0, 0};
    for (std::uint64_t i = 0; i < 100000; ++i) {
        const auto d = s.at(i);
        images[d.source] += *d.item;
    }
    const double share = static_cast<double>(images[0]) / static_cast<double>(images[0] + images[1]);
    return {std::abs(share - 0.5) <= 0.02 && std::abs((1 - share) - 0.5) <= 0.02,
            "image shares " + fmt(share) + " / " + fmt(1 - share) + " over 100000 draws"};
}

Outcome chance_band() {
    const auto cfg = desk_config(5);
    const auto task = make_color_task(200, 16, 8, 5);
    const Model<float> random_model(cfg);
    const auto images = fixture_images(cfg.resolution);
    const double chance = run_eval(random_model, task, 0, 1, tok, images).accuracy;

    // Overfit on the task's own items.
    Model<float> m(cfg);
    SamplePools pools;
    pools.images = images;
    auto demos = std::make_shared<std::vector<PackedSample>>();
    for (const auto& it : task.items) demos->push_back(pack_sft({it.image_id, it.prompt, it.answer}, tok, cfg.geometry()));
    pools.pools["items"] = demos;
    StageSpec st;
    st.kind = StageKind::Sft;
    st.policy = FreezePolicy::all();
    st.data = {{"items", 1.0}};
    st.unit = BlendUnit::Documents;
    st.steps = 600;
    st.lr = 3e-3;
    run_stage(st, m, pools, 5, TrainerOptions{});
    const double overfit = run_eval(m, task, 0, 1, tok, images).accuracy;
    return {chance >= 0.40 && chance <= 0.60 && overfit == 1.0,
            "random-weight accuracy " + fmt(chance) + " (band [0.40, 0.60]), overfit accuracy " + fmt(overfit)};
}

struct Criterion {
    int id;
    const char* name;
    Outcome (*run)();
};

const Criterion kCriteria[] = {
    {1, "freeze-policy checksums", freeze_policy},
    {2, "gradient oracle", gradient_oracle},
    {3, "loss-mask contract", loss_mask},
    {4, "token counts", token_counts},
    {5, "interleaved-to-pairs oracle", pairs_oracle},
    {6, "top-k oracle", topk_oracle},
    {7, "chamfer metric", chamfer_metric},
    {8, "interleaved beats pairs", interleave_vs_pairs},
    {9, "frozen LLM aligns no deeper", deep_alignment},
    {10, "recipe smoke and rerun", recipe_smoke},
    {11, "blend calibration", blend_calibration},
    {12, "chance-level eval band", chance_band},
};

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    int failed = 0;
    for (const auto& c : kCriteria) {
        if (!only.empty() && !only.contains(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failed += !o.pass;
        std::printf("%s %2d %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
