#pragma once

// Zero- and k-shot in-context evaluation over toy tasks.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlmforge/common.hpp"
#include "vlmforge/model.hpp"
#include "vlmforge/packing.hpp"
#include "vlmforge/tokenizer.hpp"

namespace vlmforge {

enum class EvalMetric { ExactMatch, CandidateRank };

inline std::string metric_name(EvalMetric m) { return m == EvalMetric::ExactMatch ? "exact-match" : "candidate-rank"; }

inline EvalMetric parse_metric(std::string_view s) {
    if (s == "exact-match") return EvalMetric::ExactMatch;
    if (s == "candidate-rank") return EvalMetric::CandidateRank;
    throw ConfigError("unknown metric '" + std::string(s) + "' (expected exact-match or candidate-rank)");
}

struct EvalItem {
    std::string id;
    std::optional<std::string> image_id;
    std::string prompt;
    std::string answer;
    std::optional<std::vector<std::string>> candidates;
    bool operator==(const EvalItem&) const = default;
};

struct EvalTask {
    std::string name;
    EvalMetric metric = EvalMetric::CandidateRank;
    std::vector<EvalItem> items;
    std::vector<EvalItem> demo_pool;

    void validate() const {
        if (items.empty()) throw DataError("task '" + name + "' has no items");
        std::set<std::string> ids;
        for (const auto& it : items) {
            if (!ids.insert(it.id).second) throw DataError("task '" + name + "': duplicate item id '" + it.id + "'");
            if (it.candidates) {
                if (it.candidates->empty()) throw DataError("item '" + it.id + "' has an empty candidate list");
                if (std::find(it.candidates->begin(), it.candidates->end(), it.answer) == it.candidates->end())
                    throw DataError("item '" + it.id + "': answer is not among its candidates");
            } else if (metric == EvalMetric::CandidateRank) {
                throw DataError("item '" + it.id + "' lacks candidates but the metric is candidate-rank");
            }
        }
        for (const auto& d : demo_pool)
            if (ids.count(d.id)) throw DataError("demo '" + d.id + "' also appears among the task items");
    }
};

inline nlohmann::json to_json(const EvalItem& it) {
    nlohmann::json j = {{"id", it.id}, {"prompt", it.prompt}, {"answer", it.answer}};
    if (it.image_id) j["image_id"] = *it.image_id;
    if (it.candidates) j["candidates"] = *it.candidates;
    return j;
}

inline EvalItem eval_item_from_json(const nlohmann::json& j) {
    EvalItem it;
    it.id = j.at("id").get<std::string>();
    it.prompt = j.at("prompt").get<std::string>();
    it.answer = j.at("answer").get<std::string>();
    if (j.contains("image_id") && !j["image_id"].is_null()) it.image_id = j["image_id"].get<std::string>();
    if (j.contains("candidates")) it.candidates = j["candidates"].get<std::vector<std::string>>();
    return it;
}

namespace detail {

inline std::vector<EvalItem> read_items(std::istream& in, const std::string& what, std::size_t first_line,
                                        std::optional<nlohmann::json>* header) {
    std::vector<EvalItem> out;
    std::string line;
    std::size_t n = first_line - 1;
    while (std::getline(in, line)) {
        ++n;
        if (trim(line).empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            if (header && !*header) {
                *header = std::move(j);
                continue;
            }
            out.push_back(eval_item_from_json(j));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(what + " line " + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace detail

// Task file: JSONL whose first record is {"task", "metric", "demo_pool"};
// demo_pool names a JSONL file of items, relative to the task file.
inline EvalTask read_task(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open task file " + path.string());
    std::optional<nlohmann::json> header;
    EvalTask task;
    task.items = detail::read_items(in, path.string(), 1, &header);
    if (!header) throw DataError("task file " + path.string() + " is empty");
    try {
        task.name = header->at("task").get<std::string>();
        task.metric = parse_metric(header->at("metric").get<std::string>());
        if (header->contains("demo_pool") && !(*header)["demo_pool"].is_null()) {
            const auto pool = path.parent_path() / (*header)["demo_pool"].get<std::string>();
            std::ifstream pin(pool);
            if (!pin) throw DataError("cannot open demo pool " + pool.string());
            task.demo_pool = detail::read_items(pin, pool.string(), 1, nullptr);
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + " header: " + e.what());
    }
    task.validate();
    return task;
}

inline void write_task(const EvalTask& task, const std::filesystem::path& path, const std::string& pool_name) {
    std::string body = nlohmann::json{{"task", task.name}, {"metric", metric_name(task.metric)}, {"demo_pool", pool_name}}.dump() + "\n";
    for (const auto& it : task.items) body += to_json(it).dump() + "\n";
    std::string pool;
    for (const auto& it : task.demo_pool) pool += to_json(it).dump() + "\n";
    write_file_atomic(path.parent_path() / pool_name, pool);
    write_file_atomic(path, body);
}

// ---------------------------------------------------------------------------
// Prompt construction

struct KShotPrompt {
    PackedSample sample;
    std::vector<std::size_t> demos;  // indices into the demo pool, in packing order
};

// [BOS] then k demos as [slot, prompt, answer], then the query's
// [slot, prompt]. Demo choice is uniform without replacement, seeded per item.
inline KShotPrompt build_kshot(const EvalItem& item, std::size_t k, const std::vector<EvalItem>& pool,
                               std::uint64_t seed, const Tokenizer& tok, const ImageGeometry& geom,
                               std::size_t max_positions) {
    if (k > pool.size())
        throw ConfigError("k=" + std::to_string(k) + " exceeds the demo pool of " + std::to_string(pool.size()));
    KShotPrompt out;
    if (k) {
        std::vector<std::size_t> idx(pool.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        CounterRng rng(derive_seed(seed, item.id));
        for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
        out.demos.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    }
    auto& s = out.sample;
    s.stage = StageTag::Sft;
    s.push_text(Tokenizer::kBos, false);
    auto push_block = [&](const EvalItem& it, bool with_answer) {
        if (it.image_id) s.push_image(*it.image_id, geom.slot_length());
        for (TokenId id : tok.encode(it.prompt)) s.push_text(id, false);
        if (with_answer)
            for (TokenId id : tok.encode(it.answer)) s.push_text(id, false);
    };
    for (std::size_t d : out.demos) push_block(pool[d], true);
    push_block(item, false);
    if (s.size() >= max_positions)
        throw ConfigError("item '" + item.id + "': " + std::to_string(k) + "-shot prompt of " + std::to_string(s.size()) +
                          " tokens leaves no room within max_positions " + std::to_string(max_positions) +
                          "; use a smaller k or a larger max_positions");
    return out;
}

// Appends candidate tokens with loss on each, so the next-token view scores
// exactly the candidate.
inline PackedSample append_answer(const PackedSample& prompt, const std::string& answer, const Tokenizer& tok) {
    PackedSample s = prompt;
    for (TokenId id : tok.encode(answer)) s.push_text(id, true);
    return s;
}

// ---------------------------------------------------------------------------
// Scoring

struct ItemResult {
    std::string id;
    std::string prediction;
    bool correct = false;
};

struct ScoreOptions {
    std::size_t max_new_tokens = 16;
};

template <class T>
ItemResult score_item(const Model<T>& model, const EvalItem& item, const PackedSample& prompt, EvalMetric metric,
                      const Tokenizer& tok, const ImageProvider& images, const ScoreOptions& opts = {}) {
    ItemResult r{item.id, {}, false};
    const auto bound = Model<T>::bind_images(prompt, images);
    const std::span<const ImageTensor> imgs(bound);
    if (metric == EvalMetric::ExactMatch) {
        const std::size_t room = model.config().max_positions - prompt.size();
        const auto ids = model.generate(prompt, imgs, std::min(opts.max_new_tokens, room));
        r.prediction = tok.decode(ids);
        r.correct = normalize_whitespace(r.prediction) == normalize_whitespace(item.answer);
        return r;
    }
    if (!item.candidates || item.candidates->empty())
        throw DataError("item '" + item.id + "': candidate-rank needs a non-empty candidate list");
    double best = std::numeric_limits<double>::infinity();
    for (const auto& cand : *item.candidates) {
        const auto full = append_answer(prompt, cand, tok);
        if (full.size() > model.config().max_positions)
            throw ConfigError("item '" + item.id + "': candidate '" + cand + "' overflows max_positions");
        const auto trace = model.forward(full, imgs);
        const auto tgt = next_token_targets(full);
        const auto ce = masked_cross_entropy(trace.logits, std::span<const TokenId>(tgt.targets),
                                             std::span<const std::uint8_t>(tgt.mask), T(1));
        if (ce.count == 0) throw DataError("item '" + item.id + "': empty candidate string");
        const double mean = static_cast<double>(ce.loss_sum) / static_cast<double>(ce.count);
        if (mean < best) {  // strict: ties keep the earlier candidate
            best = mean;
            r.prediction = cand;
        }
    }
    r.correct = r.prediction == item.answer;
    return r;
}

struct EvalReport {
    std::string task;
    EvalMetric metric = EvalMetric::CandidateRank;
    std::size_t k = 0;
    double accuracy = 0.0;
    std::vector<ItemResult> items;  // sorted by item id

    std::string to_csv() const {
        std::string out = "item_id,prediction,correct\n";
        for (const auto& r : items) out += csv_field(r.id) + "," + csv_field(r.prediction) + "," + (r.correct ? "1" : "0") + "\n";
        return out;
    }
    nlohmann::json summary() const {
        return {{"task", task}, {"metric", metric_name(metric)}, {"k", k}, {"accuracy", accuracy}, {"items", items.size()}};
    }

    static std::string csv_field(const std::string& s) {
        if (s.find_first_of(",\"\n") == std::string::npos) return s;
        std::string q = "\"";
        for (char c : s) {
            if (c == '"') q += '"';
            q += c;
        }
        return q + "\"";
    }
};

template <class T>
EvalReport run_eval(const Model<T>& model, const EvalTask& task, std::size_t k, std::uint64_t seed,
                    const Tokenizer& tok, const ImageProvider& images, const ScoreOptions& opts = {}) {
    task.validate();
    EvalReport rep;
    rep.task = task.name;
    rep.metric = task.metric;
    rep.k = k;
    const auto geom = model.config().geometry();
    for (const auto& item : task.items) {
        const auto prompt = build_kshot(item, k, task.demo_pool, seed, tok, geom, model.config().max_positions);
        rep.items.push_back(score_item(model, item, prompt.sample, task.metric, tok, images, opts));
    }
    std::sort(rep.items.begin(), rep.items.end(), [](const ItemResult& a, const ItemResult& b) { return a.id < b.id; });
    std::size_t correct = 0;
    for (const auto& r : rep.items) correct += r.correct;
    rep.accuracy = static_cast<double>(correct) / static_cast<double>(rep.items.size());
    return rep;
}

}  // namespace vlmforge
