// vlmforge command-line entry point.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numeric failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vlmforge/checkpoint.hpp"
#include "vlmforge/corpus.hpp"
#include "vlmforge/diagnostics.hpp"
#include "vlmforge/eval.hpp"
#include "vlmforge/fixture.hpp"
#include "vlmforge/manifest.hpp"
#include "vlmforge/packing.hpp"
#include "vlmforge/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace vlmforge;

namespace {

// JSON config files: top-level keys are root options, nested objects are
// subcommand sections ({"pack": {"run": {"max-len": 160}}}).
class JsonConfig : public CLI::Config {
public:
    std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}"; }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        json j;
        try {
            input >> j;
        } catch (const json::exception& e) {
            throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
        }
        std::vector<CLI::ConfigItem> out;
        collect(j, "", {}, out);
        return out;
    }

private:
    static void collect(const json& j, const std::string& name, std::vector<std::string> prefix,
                        std::vector<CLI::ConfigItem>& out) {
        if (j.is_object()) {
            if (!name.empty()) prefix.push_back(name);
            for (auto it = j.begin(); it != j.end(); ++it) collect(*it, it.key(), prefix, out);
            return;
        }
        CLI::ConfigItem item;
        item.parents = std::move(prefix);
        item.name = name;
        auto scalar = [](const json& v) {
            if (v.is_string()) return v.get<std::string>();
            if (v.is_boolean()) return std::string(v.get<bool>() ? "true" : "false");
            if (v.is_number()) return v.dump();
            throw CLI::ConversionError("unsupported config value " + v.dump());
        };
        if (j.is_array())
            for (const auto& v : j) item.inputs.push_back(scalar(v));
        else
            item.inputs.push_back(scalar(j));
        out.push_back(std::move(item));
    }
};

struct Globals {
    std::uint64_t seed = 0;
    bool strict = false;
    CLI::Option* seed_opt = nullptr;

    // --seed (flag or config) wins, then VLMFORGE_SEED, then `fallback`.
    std::uint64_t resolve(std::optional<std::uint64_t> fallback = std::nullopt) const {
        if (seed_opt->count()) return seed;
        if (fallback) return *fallback;
        if (const char* env = std::getenv("VLMFORGE_SEED")) {
            try {
                std::size_t used = 0;
                const auto v = std::stoull(env, &used);
                if (used == std::string_view(env).size()) return v;
            } catch (const std::exception&) {
            }
            throw ConfigError(std::string("VLMFORGE_SEED='") + env + "' is not an unsigned integer");
        }
        return 0;
    }
};

json config_value(const std::string& s) {
    auto v = json::parse(s, nullptr, false);
    return v.is_number() ? v : json(s);
}

json effective_config(const CLI::App* sub) {
    json j = json::object();
    const CLI::App* root = sub;
    while (root->get_parent()) root = root->get_parent();
    j["strict"] = root->get_option("--strict")->count() > 0;
    for (const CLI::Option* opt : sub->get_options()) {
        const std::string name = opt->get_single_name();
        if (name == "help" || name.empty()) continue;
        if (opt->count()) {
            const auto& r = opt->results();
            if (r.size() == 1) {
                j[name] = config_value(r[0]);
            } else {
                j[name] = json::array();
                for (const auto& x : r) j[name].push_back(config_value(x));
            }
        } else {
            j[name] = config_value(opt->get_default_str());
        }
    }
    return j;
}

class Run {
public:
    Run(std::string command, const CLI::App* sub, std::uint64_t seed) {
        m_.command = std::move(command);
        m_.config = effective_config(sub);
        m_.seed = seed;
        m_.started_at = utc_timestamp();
    }
    void input(const fs::path& p) { m_.add_input(p); }
    void output(const fs::path& p) { m_.add_output(p); }
    void finish(const fs::path& artifact) { m_.write(artifact); }
    json& config() { return m_.config; }

private:
    RunManifest m_;
};

json read_json_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw DataError("cannot open " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(p.string() + ": " + e.what());
    }
}

void report_issues(const ParseSummary& s) {
    for (const auto& i : s.issues) std::cerr << "line " << i.line << ": " << i.message << "\n";
}

ParseOptions parse_opts(const Globals& g) { return {g.strict}; }

// ---------------------------------------------------------------------------
// corpus

json stats_json(const CorpusStats& s, const ParseSummary& p) {
    json j = {{"num_docs", s.num_docs},
              {"num_images", s.num_images},
              {"total_text_tokens", s.total_text_tokens},
              {"images_per_sample", s.images_per_sample},
              {"tokens_per_image", s.tokens_per_image ? json(*s.tokens_per_image) : json(nullptr)},
              {"lines", p.lines},
              {"dropped_empty_captions", p.dropped_empty_captions},
              {"issues", p.issues.size()}};
    return j;
}

struct CorpusStatsArgs {
    std::string input, format = "interleaved", out;
};

void corpus_stats(const CorpusStatsArgs& a, const Globals& g, const CLI::App* sub) {
    const Tokenizer tok;
    StatsAccumulator acc(tok);
    auto in = open_input(a.input);
    ParseSummary summary;
    if (parse_corpus_format(a.format) == CorpusFormat::Interleaved)
        summary = for_each_interleaved(in, parse_opts(g), [&](InterleavedDocument&& d) { acc.add(d); });
    else
        summary = for_each_pair(in, parse_opts(g), [&](PairSample&& p) { acc.add(p); });
    report_issues(summary);
    const auto j = stats_json(acc.result(), summary);
    std::cout << j.dump(2) << "\n";
    if (!a.out.empty()) {
        Run run("corpus stats", sub, 0);
        run.input(a.input);
        write_file_atomic(a.out, j.dump(2) + "\n");
        run.output(a.out);
        run.finish(a.out);
    }
}

struct TransformArgs {
    std::string input, out, policy = "best-sim";
    std::size_t k = 0;
};

void corpus_to_pairs(const TransformArgs& a, const Globals& g, const CLI::App* sub) {
    Run run("corpus to-pairs", sub, 0);
    const auto policy = parse_pair_policy(a.policy);
    auto docs = read_interleaved(a.input, parse_opts(g));
    report_issues(docs.summary);
    std::vector<PairSample> pairs;
    for (const auto& d : docs.records)
        for (auto& p : to_pairs(d, policy)) pairs.push_back(std::move(p));
    write_jsonl(a.out, pairs);
    run.input(a.input);
    run.output(a.out);
    run.finish(a.out);
    std::cout << json{{"documents", docs.records.size()}, {"pairs", pairs.size()}}.dump() << "\n";
}

void corpus_reformat(const TransformArgs& a, const Globals& g, const CLI::App* sub) {
    Run run("corpus reformat", sub, 0);
    auto docs = read_interleaved(a.input, parse_opts(g));
    report_issues(docs.summary);
    std::vector<InterleavedDocument> out;
    for (const auto& d : docs.records) out.push_back(reformat_images_first(d));
    write_jsonl(a.out, out);
    run.input(a.input);
    run.output(a.out);
    run.finish(a.out);
    std::cout << json{{"documents", out.size()}}.dump() << "\n";
}

void corpus_topk(const TransformArgs& a, const Globals& g, const CLI::App* sub) {
    Run run("corpus topk", sub, 0);
    TopKSelector sel(a.k);
    auto in = open_input(a.input);
    const auto summary = for_each_pair(in, parse_opts(g), [&](PairSample&& p) { sel.push(std::move(p)); });
    report_issues(summary);
    for (const auto& r : sel.rejected()) std::cerr << r << "\n";
    if (g.strict && !sel.rejected().empty()) throw DataError(sel.rejected().front());
    const auto kept = sel.finish();
    write_jsonl(a.out, kept);
    run.input(a.input);
    run.output(a.out);
    run.finish(a.out);
    std::cout << json{{"read", summary.records}, {"kept", kept.size()}, {"rejected", sel.rejected().size()}}.dump() << "\n";
}

// ---------------------------------------------------------------------------
// fixtures

struct FixtureArgs {
    std::string out_dir, spec;
    std::optional<std::size_t> n_docs, images_min, images_max, n_pairs, vocab_words, n_topics, n_classes;
    std::optional<double> images_mean, tokens_per_image, pair_tokens_per_image;
    BundleOptions bundle;
};

FixtureSpec resolve_fixture_spec(const FixtureArgs& a, const Globals& g) {
    FixtureSpec s;
    std::optional<std::uint64_t> spec_seed;
    if (!a.spec.empty()) {
        const auto j = read_json_file(a.spec);
        s = fixture_spec_from_json(j);
        if (j.contains("seed")) spec_seed = s.seed;
    }
    if (a.n_docs) s.interleaved.n_docs = *a.n_docs;
    if (a.images_mean) s.interleaved.images_mean = *a.images_mean;
    if (a.images_min) s.interleaved.images_min = *a.images_min;
    if (a.images_max) s.interleaved.images_max = *a.images_max;
    if (a.tokens_per_image) s.interleaved.tokens_per_image = *a.tokens_per_image;
    if (a.n_pairs) s.pairs.n_pairs = *a.n_pairs;
    if (a.pair_tokens_per_image) s.pairs.tokens_per_image = *a.pair_tokens_per_image;
    if (a.vocab_words) s.vocab_words = *a.vocab_words;
    if (a.n_topics) s.n_topics = *a.n_topics;
    if (a.n_classes) s.n_classes = *a.n_classes;
    s.seed = g.resolve(spec_seed);
    s.validate();
    return s;
}

void add_fixture_options(CLI::App* sub, FixtureArgs& a) {
    sub->add_option("--out-dir", a.out_dir, "Output directory")->required();
    sub->add_option("--spec", a.spec, "Fixture spec JSON");
    sub->add_option("--n-docs", a.n_docs, "Interleaved documents");
    sub->add_option("--images-mean", a.images_mean, "Mean images per document");
    sub->add_option("--images-min", a.images_min, "Minimum images per document");
    sub->add_option("--images-max", a.images_max, "Maximum images per document");
    sub->add_option("--tokens-per-image", a.tokens_per_image, "Interleaved text tokens per image");
    sub->add_option("--n-pairs", a.n_pairs, "Caption pairs");
    sub->add_option("--pair-tokens-per-image", a.pair_tokens_per_image, "Caption tokens per image");
    sub->add_option("--vocab-words", a.vocab_words, "Pseudo-word vocabulary size");
    sub->add_option("--n-topics", a.n_topics, "Document topics");
    sub->add_option("--n-classes", a.n_classes, "Image colour classes (at most 8)");
}

void write_fixture(const FixtureArgs& a, const Globals& g, const CLI::App* sub, bool bundle) {
    const auto spec = resolve_fixture_spec(a, g);
    Run run(bundle ? "fixture" : "corpus fixture", sub, spec.seed);
    run.config()["resolved_spec"] = to_json(spec);
    const auto files = bundle ? write_fixture_bundle(spec, a.out_dir, a.bundle) : write_corpus_fixture(spec, a.out_dir);
    if (!a.spec.empty()) run.input(a.spec);
    json listing = json::array();
    for (const auto& f : files.all()) {
        if (f.empty()) continue;
        run.output(f);
        listing.push_back(f.string());
    }
    run.finish(a.out_dir);
    const Tokenizer tok;
    const auto is = compute_stats(read_interleaved(files.interleaved).records, tok);
    const auto ps = compute_stats(read_pairs(files.pairs).records, tok);
    std::cout << json{{"files", listing},
                      {"interleaved", {{"images_per_sample", is.images_per_sample}, {"tokens_per_image", *is.tokens_per_image}}},
                      {"pairs", {{"images_per_sample", ps.images_per_sample}, {"tokens_per_image", *ps.tokens_per_image}}}}
                     .dump(2)
              << "\n";
}

// ---------------------------------------------------------------------------
// pack

struct PackArgs {
    std::string input, out, format = "interleaved", stage = "pretrain";
    std::size_t max_len = 256, res = 16, patch = 4, downsample = 1;
};

StageTag parse_stage_tag(std::string_view s) {
    if (s == "pretrain") return StageTag::Pretrain;
    if (s == "sft") return StageTag::Sft;
    throw ConfigError("unknown stage tag '" + std::string(s) + "' (expected pretrain or sft)");
}

void pack_run(const PackArgs& a, const Globals& g, const CLI::App* sub) {
    Run run("pack run", sub, 0);
    const Tokenizer tok;
    const ImageGeometry geom{a.res, a.patch, a.downsample};
    (void)geom.slot_length();  // validates divisibility
    const auto tag = parse_stage_tag(a.stage);
    std::vector<PackedSample> samples;
    std::size_t records = 0;
    auto add_doc = [&](const InterleavedDocument& d) {
        ++records;
        for (auto& s : pack_document(d, tok, geom, a.max_len, tag)) samples.push_back(std::move(s));
    };
    if (a.format == "interleaved") {
        auto r = read_interleaved(a.input, parse_opts(g));
        report_issues(r.summary);
        for (const auto& d : r.records) add_doc(d);
    } else if (a.format == "pairs") {
        auto r = read_pairs(a.input, parse_opts(g));
        report_issues(r.summary);
        for (const auto& p : r.records) add_doc(pair_as_document(p));
    } else if (a.format == "sft") {
        auto r = read_sft(a.input, parse_opts(g));
        report_issues(r.summary);
        for (const auto& d : r.records) {
            ++records;
            auto s = pack_sft(d, tok, geom);
            if (s.size() > a.max_len)
                throw DataError("instruction demo " + std::to_string(records) + " packs to " + std::to_string(s.size()) +
                                " tokens, above max-len " + std::to_string(a.max_len));
            samples.push_back(std::move(s));
        }
    } else {
        throw ConfigError("unknown format '" + a.format + "' (expected interleaved, pairs or sft)");
    }
    write_shard(samples, a.out, tok.vocab_hash(), geom.hash());
    run.input(a.input);
    run.output(a.out);
    run.finish(a.out);
    std::cout << json{{"records", records}, {"samples", samples.size()}, {"slot_length", geom.slot_length()}}.dump() << "\n";
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    std::string plan, preset, out_dir, resume;
    std::vector<std::string> data;
    std::size_t checkpoint_every = 0;
    std::size_t max_steps = 0;
};

struct TrainSetup {
    ModelConfig cfg;
    StagePlan plan;
};

TrainSetup train_setup(const TrainArgs& a, std::uint64_t seed) {
    const json pj = a.plan.empty() ? json::object() : read_json_file(a.plan);
    std::optional<Preset> preset;
    if (!a.preset.empty()) {
        PresetOptions po;
        po.sft_text_fraction = pj.value("sft_text_fraction", po.sft_text_fraction);
        preset = make_preset(a.preset, po);
    }
    TrainSetup s;
    s.cfg.seed = seed;
    if (preset) s.cfg.projector.kind = preset->projector;
    try {
        if (pj.contains("model")) s.cfg = model_config_from_json(pj["model"], s.cfg);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("plan model: ") + e.what());
    }
    s.cfg.validate();
    s.plan = plan_from_json(pj, preset);
    return s;
}

json trainer_extra(std::size_t stage_index, const StageSpec& spec, std::size_t log_records, const json& trainer) {
    return {{"stage_index", stage_index}, {"stage", stage_name(spec.kind)}, {"log_records", log_records}, {"trainer", trainer}};
}

void train_run(const TrainArgs& a, const Globals& g, const CLI::App* sub) {
    const std::uint64_t seed = g.resolve();
    Run run("train run", sub, seed);
    const Tokenizer tok;
    auto [cfg, plan] = train_setup(a, seed);
    run.config()["model"] = to_json(cfg);
    if (!a.plan.empty()) run.input(a.plan);

    SamplePools pools;
    pools.images = fixture_images(cfg.resolution);
    for (const auto& d : a.data) {
        const auto eq = d.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--data expects name=shard, got '" + d + "'");
        const fs::path path = d.substr(eq + 1);
        pools.add(d.substr(0, eq), read_shard(path, tok.vocab_hash(), cfg.geometry().hash()).samples);
        run.input(path);
    }

    const fs::path out = a.out_dir;
    fs::create_directories(out);
    const fs::path log_path = out / "run_log.csv";
    const fs::path latest = out / "latest.ckpt";
    Model<float> model(cfg);
    RunLog log;
    std::size_t start_stage = 0;
    TrainerState<float> state;
    if (!a.resume.empty()) {
        const auto ck = load_checkpoint(a.resume);
        load_into(model, ck);
        start_stage = ck.extra.at("stage_index").get<std::size_t>();
        if (start_stage >= plan.stages.size()) throw DataError("checkpoint stage index beyond the plan");
        state = load_trainer_state(model, ck, plan.options.adam);
        const auto keep = ck.extra.at("log_records").get<std::size_t>();
        log = RunLog::from_csv(read_file(log_path));
        if (log.records.size() < keep) throw DataError("run log shorter than the checkpoint records");
        log.records.resize(keep);
        run.input(a.resume);
    }

    const std::uint64_t trainer_seed = derive_seed(seed, "trainer");
    std::size_t budget = a.max_steps ? a.max_steps : std::numeric_limits<std::size_t>::max();
    bool interrupted = false;
    json stages = json::array();
    for (std::size_t i = start_stage; i < plan.stages.size() && !interrupted; ++i) {
        const auto& spec = plan.stages[i];
        while (true) {
            std::size_t stop = spec.steps;
            if (a.checkpoint_every) stop = std::min(stop, state.next_step + a.checkpoint_every);
            if (budget < stop - state.next_step) stop = state.next_step + budget;
            const std::size_t before = state.next_step;
            auto r = run_stage(spec, model, pools, derive_seed(trainer_seed, i), plan.options, std::move(state), stop);
            budget -= r.state.next_step - before;
            log.append(r.log);
            state = std::move(r.state);
            auto [meta, arrays] = save_trainer_state(model, state);
            save_checkpoint(latest, model, trainer_extra(i, spec, log.records.size(), meta), arrays);
            write_file_atomic(log_path, log.to_csv());
            if (state.next_step >= spec.steps) break;
            if (budget == 0) {
                interrupted = true;
                break;
            }
        }
        if (interrupted) break;
        const fs::path stage_ckpt = out / ("stage" + std::to_string(i) + "-" + stage_name(spec.kind) + ".ckpt");
        save_checkpoint(stage_ckpt, model, trainer_extra(i, spec, log.records.size(), json::object()));
        run.output(stage_ckpt);
        stages.push_back(stage_ckpt.string());
        state = {};
        // The next stage starts from a fresh optimizer.
        if (i + 1 < plan.stages.size()) {
            auto [meta, arrays] = save_trainer_state(model, state);
            save_checkpoint(latest, model, trainer_extra(i + 1, plan.stages[i + 1], log.records.size(), meta), arrays);
        }
    }
    if (!interrupted) {
        save_checkpoint(out / "final.ckpt", model);
        run.output(out / "final.ckpt");
    }
    run.output(log_path);
    run.output(latest);
    run.finish(out);
    std::cout << json{{"steps_logged", log.records.size()},
                      {"final_loss", log.records.empty() ? json(nullptr) : json(log.records.back().loss)},
                      {"complete", !interrupted},
                      {"stage_checkpoints", stages}}
                     .dump(2)
              << "\n";
}

struct CompareArgs {
    std::string a, b, out;
    std::size_t window = 500;
};

void train_compare(const CompareArgs& a, const Globals&, const CLI::App* sub) {
    const auto la = RunLog::from_csv(read_file(a.a));
    const auto lb = RunLog::from_csv(read_file(a.b));
    const auto c = compare_loss_curves(la, lb, a.window);
    if (!a.out.empty()) {
        Run run("train compare-loss", sub, 0);
        run.input(a.a);
        run.input(a.b);
        write_file_atomic(a.out, c.to_csv());
        run.output(a.out);
        run.finish(a.out);
    }
    std::cout << c.summary().dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// diag, eval

struct AlignArgs {
    std::string ckpt, shard, out, variant = "symmetric", tag;
    std::size_t max_samples = 64;
};

void diag_align(const AlignArgs& a, const Globals&, const CLI::App* sub) {
    Run run("diag align", sub, 0);
    const Tokenizer tok;
    const auto model = load_model<float>(a.ckpt);
    auto shard = read_shard(a.shard, tok.vocab_hash(), model.config().geometry().hash());
    std::vector<PackedSample> samples;
    for (auto& s : shard.samples) {
        if (samples.size() == a.max_samples) break;
        if (s.image_count() && s.image_count() * model.config().image_tokens() < s.size()) samples.push_back(std::move(s));
    }
    const auto p = alignment_profile(model, std::span<const PackedSample>(samples), fixture_images(model.config().resolution),
                                     parse_variant(a.variant), a.tag.empty() ? fs::path(a.ckpt).stem().string() : a.tag);
    write_file_atomic(a.out, p.to_csv());
    run.input(a.ckpt);
    run.input(a.shard);
    run.output(a.out);
    run.finish(a.out);
    std::cout << p.summary().dump(2) << "\n";
}

struct EvalArgs {
    std::string ckpt, task, out;
    std::size_t k = 0, max_new = 16;
};

void eval_run(const EvalArgs& a, const Globals& g, const CLI::App* sub) {
    const std::uint64_t seed = g.resolve();
    Run run("eval run", sub, seed);
    const Tokenizer tok;
    const auto model = load_model<float>(a.ckpt);
    const auto task = read_task(a.task);
    const auto rep = run_eval(model, task, a.k, derive_seed(seed, "eval"), tok, fixture_images(model.config().resolution),
                              ScoreOptions{a.max_new});
    write_file_atomic(a.out, rep.to_csv());
    run.input(a.ckpt);
    run.input(a.task);
    run.output(a.out);
    run.finish(a.out);
    std::cout << rep.summary().dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vlmforge: interleaved visual-language pre-training at desk scale"};
    app.require_subcommand(1);
    app.fallthrough();
    app.config_formatter(std::make_shared<JsonConfig>());
    app.set_config("--config", "", "JSON config file (flags override its values)");
    Globals g;
    g.seed_opt = app.add_option("--seed", g.seed, "Seed (default: $VLMFORGE_SEED, else 0)");
    app.add_flag("--strict", g.strict, "Fail on the first malformed input record");

    // corpus
    auto* corpus = app.add_subcommand("corpus", "Corpus statistics, transforms and fixtures");
    corpus->require_subcommand(1);
    CorpusStatsArgs stats;
    auto* c_stats = corpus->add_subcommand("stats", "Images per sample and text tokens per image");
    c_stats->add_option("input", stats.input, "Corpus JSONL")->required();
    c_stats->add_option("--format", stats.format, "interleaved or pairs")->capture_default_str();
    c_stats->add_option("--out", stats.out, "Also write the statistics JSON here");
    c_stats->callback([&] { corpus_stats(stats, g, c_stats); });

    TransformArgs tp;
    auto* c_pairs = corpus->add_subcommand("to-pairs", "Break interleaved documents into image-text pairs");
    c_pairs->add_option("input", tp.input)->required();
    c_pairs->add_option("output", tp.out)->required();
    c_pairs->add_option("--policy", tp.policy, "best-sim or adjacent-next")->capture_default_str();
    c_pairs->callback([&] { corpus_to_pairs(tp, g, c_pairs); });

    TransformArgs rf;
    auto* c_reformat = corpus->add_subcommand("reformat", "Move all images ahead of the text");
    c_reformat->add_option("input", rf.input)->required();
    c_reformat->add_option("output", rf.out)->required();
    c_reformat->callback([&] { corpus_reformat(rf, g, c_reformat); });

    TransformArgs tk;
    auto* c_topk = corpus->add_subcommand("topk", "Keep the k pairs with the highest clip_score");
    c_topk->add_option("input", tk.input)->required();
    c_topk->add_option("output", tk.out)->required();
    c_topk->add_option("-k", tk.k, "Pairs to keep")->required();
    c_topk->callback([&] { corpus_topk(tk, g, c_topk); });

    FixtureArgs cf;
    auto* c_fixture = corpus->add_subcommand("fixture", "Write synthetic interleaved and pair corpora");
    add_fixture_options(c_fixture, cf);
    c_fixture->callback([&] { write_fixture(cf, g, c_fixture, false); });

    // fixture
    FixtureArgs bf;
    auto* fixture = app.add_subcommand("fixture", "Write corpora, instruction demos and an eval task");
    add_fixture_options(fixture, bf);
    fixture->add_option("--sft-visual", bf.bundle.sft_visual, "Visual instruction demos")->capture_default_str();
    fixture->add_option("--sft-text", bf.bundle.sft_text, "Text-only instruction demos")->capture_default_str();
    fixture->add_option("--eval-items", bf.bundle.eval_items, "Eval items")->capture_default_str();
    fixture->add_option("--eval-demos", bf.bundle.eval_demos, "Eval demo pool size")->capture_default_str();
    fixture->callback([&] { write_fixture(bf, g, fixture, true); });

    // pack
    auto* pack = app.add_subcommand("pack", "Pack corpora into training shards");
    pack->require_subcommand(1);
    PackArgs pa;
    auto* p_run = pack->add_subcommand("run", "Pack a corpus file into a shard");
    p_run->add_option("input", pa.input, "Corpus or instruction JSONL")->required();
    p_run->add_option("output", pa.out, "Shard path")->required();
    p_run->add_option("--format", pa.format, "interleaved, pairs or sft")->capture_default_str();
    p_run->add_option("--stage", pa.stage, "pretrain or sft (sft format is always sft)")->capture_default_str();
    p_run->add_option("--max-len", pa.max_len, "Maximum sample length")->capture_default_str();
    p_run->add_option("--res", pa.res, "Image resolution")->capture_default_str();
    p_run->add_option("--patch", pa.patch, "Patch size")->capture_default_str();
    p_run->add_option("--downsample", pa.downsample, "Projector downsample factor (1 or 2)")->capture_default_str();
    p_run->callback([&] { pack_run(pa, g, p_run); });

    // train
    auto* train = app.add_subcommand("train", "Staged training and loss-curve comparison");
    train->require_subcommand(1);
    TrainArgs ta;
    auto* t_run = train->add_subcommand("run", "Run a stage plan");
    t_run->add_option("--plan", ta.plan, "Plan JSON");
    t_run->add_option("--preset", ta.preset, "Ablation preset a, b, c or d");
    t_run->add_option("--data", ta.data, "Data source as name=shard (repeatable)")->required();
    t_run->add_option("--out-dir", ta.out_dir, "Output directory")->required();
    t_run->add_option("--checkpoint-every", ta.checkpoint_every, "Steps between resumable checkpoints (0: stage ends)")
        ->capture_default_str();
    t_run->add_option("--max-steps", ta.max_steps, "Stop after this many steps in this invocation (0: no limit)")
        ->capture_default_str();
    t_run->add_option("--resume", ta.resume, "Resume from a checkpoint written by this command");
    t_run->callback([&] { train_run(ta, g, t_run); });

    CompareArgs ca;
    auto* t_cmp = train->add_subcommand("compare-loss", "Gap between two run logs (B minus A)");
    t_cmp->add_option("log_a", ca.a)->required();
    t_cmp->add_option("log_b", ca.b)->required();
    t_cmp->add_option("--window", ca.window, "Final window length in steps")->capture_default_str();
    t_cmp->add_option("--out", ca.out, "Write the per-step gap CSV here");
    t_cmp->callback([&] { train_compare(ca, g, t_cmp); });

    // diag
    auto* diag = app.add_subcommand("diag", "Model diagnostics");
    diag->require_subcommand(1);
    AlignArgs aa;
    auto* d_align = diag->add_subcommand("align", "Per-layer cross-modal alignment profile");
    d_align->add_option("--ckpt", aa.ckpt)->required();
    d_align->add_option("--shard", aa.shard)->required();
    d_align->add_option("--out", aa.out, "Profile CSV")->required();
    d_align->add_option("--variant", aa.variant, "symmetric, a-to-b, b-to-a or mean-pairwise")->capture_default_str();
    d_align->add_option("--max-samples", aa.max_samples)->capture_default_str();
    d_align->add_option("--tag", aa.tag, "Config tag recorded in the summary");
    d_align->callback([&] { diag_align(aa, g, d_align); });

    // eval
    auto* ev = app.add_subcommand("eval", "In-context evaluation");
    ev->require_subcommand(1);
    EvalArgs ea;
    auto* e_run = ev->add_subcommand("run", "Score a task at k shots");
    e_run->add_option("--ckpt", ea.ckpt)->required();
    e_run->add_option("--task", ea.task)->required();
    e_run->add_option("--out", ea.out, "Report CSV")->required();
    e_run->add_option("-k,--shots", ea.k, "Demonstrations per query")->capture_default_str();
    e_run->add_option("--max-new", ea.max_new, "Greedy decode limit for exact-match")->capture_default_str();
    e_run->callback([&] { eval_run(ea, g, e_run); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
