#pragma once

// Interleaved and paired image-text corpora: records, JSONL parsing,
// statistics and the document transforms used to build pre-training data.

#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "vlmforge/common.hpp"
#include "vlmforge/tokenizer.hpp"

namespace vlmforge {

struct TextSegment {
    std::string text;
    bool operator==(const TextSegment&) const = default;
};

struct ImageSegment {
    std::string image_id;
    // Keyed by the position (in the document's segment list) of a text segment.
    std::optional<std::map<std::size_t, double>> sim_scores;
    bool operator==(const ImageSegment&) const = default;
};

using Segment = std::variant<TextSegment, ImageSegment>;

inline bool is_image(const Segment& s) { return std::holds_alternative<ImageSegment>(s); }
inline bool is_text(const Segment& s) { return std::holds_alternative<TextSegment>(s); }

struct InterleavedDocument {
    std::string doc_id;
    std::vector<Segment> segments;
    nlohmann::json meta = nlohmann::json::object();

    std::size_t image_count() const {
        return static_cast<std::size_t>(std::count_if(segments.begin(), segments.end(), is_image));
    }
    bool operator==(const InterleavedDocument&) const = default;
};

struct PairSample {
    std::string image_id;
    std::string caption;
    double clip_score = 0.0;
    bool operator==(const PairSample&) const = default;
};

enum class CorpusFormat { Interleaved, Pairs };

inline CorpusFormat parse_corpus_format(std::string_view s) {
    if (s == "interleaved-jsonl" || s == "interleaved") return CorpusFormat::Interleaved;
    if (s == "pairs-jsonl" || s == "pairs") return CorpusFormat::Pairs;
    throw ConfigError("unknown corpus format '" + std::string(s) + "' (expected interleaved-jsonl or pairs-jsonl)");
}

// Throws DataError describing the first violated invariant.
inline void validate(const InterleavedDocument& doc) {
    if (doc.doc_id.empty()) throw DataError("document has empty doc_id");
    if (doc.segments.empty()) throw DataError("document '" + doc.doc_id + "' has no segments");
    for (std::size_t i = 0; i < doc.segments.size(); ++i) {
        const auto& seg = doc.segments[i];
        if (auto* t = std::get_if<TextSegment>(&seg)) {
            if (trim(t->text).empty())
                throw DataError("document '" + doc.doc_id + "' segment " + std::to_string(i) + ": empty text");
            continue;
        }
        const auto& im = std::get<ImageSegment>(seg);
        if (im.image_id.empty())
            throw DataError("document '" + doc.doc_id + "' segment " + std::to_string(i) + ": empty image_id");
        if (!im.sim_scores) continue;
        for (const auto& [idx, score] : *im.sim_scores) {
            if (idx >= doc.segments.size() || !is_text(doc.segments[idx]))
                throw DataError("document '" + doc.doc_id + "' image '" + im.image_id + "': sim_scores key " +
                                std::to_string(idx) + " is not a text segment");
            if (!std::isfinite(score) || score < -1.0 || score > 1.0)
                throw DataError("document '" + doc.doc_id + "' image '" + im.image_id +
                                "': similarity outside [-1, 1]");
        }
    }
}

// ---------------------------------------------------------------------------
// JSON mapping

inline nlohmann::json to_json(const InterleavedDocument& doc) {
    nlohmann::json segs = nlohmann::json::array();
    for (const auto& seg : doc.segments) {
        if (auto* t = std::get_if<TextSegment>(&seg)) {
            segs.push_back({{"text", t->text}});
        } else {
            const auto& im = std::get<ImageSegment>(seg);
            nlohmann::json j = {{"image_id", im.image_id}};
            if (im.sim_scores) {
                nlohmann::json scores = nlohmann::json::object();
                for (const auto& [idx, s] : *im.sim_scores) scores[std::to_string(idx)] = s;
                j["sim_scores"] = std::move(scores);
            }
            segs.push_back(std::move(j));
        }
    }
    nlohmann::json out = {{"doc_id", doc.doc_id}, {"segments", std::move(segs)}};
    if (!doc.meta.empty()) out["meta"] = doc.meta;
    return out;
}

inline nlohmann::json to_json(const PairSample& p) {
    return {{"image_id", p.image_id}, {"caption", p.caption}, {"clip_score", p.clip_score}};
}

inline InterleavedDocument interleaved_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw DataError("record is not a JSON object");
    if (!j.contains("doc_id") || !j["doc_id"].is_string()) throw DataError("missing or non-string field 'doc_id'");
    if (!j.contains("segments") || !j["segments"].is_array()) throw DataError("missing or non-array field 'segments'");
    InterleavedDocument doc;
    doc.doc_id = j["doc_id"].get<std::string>();
    for (const auto& s : j["segments"]) {
        if (!s.is_object()) throw DataError("segment is not an object");
        const bool has_text = s.contains("text");
        const bool has_image = s.contains("image_id");
        if (has_text == has_image) throw DataError("segment must carry exactly one of 'text' or 'image_id'");
        if (has_text) {
            if (!s["text"].is_string()) throw DataError("segment field 'text' is not a string");
            doc.segments.emplace_back(TextSegment{s["text"].get<std::string>()});
            continue;
        }
        if (!s["image_id"].is_string()) throw DataError("segment field 'image_id' is not a string");
        ImageSegment im{s["image_id"].get<std::string>(), std::nullopt};
        if (s.contains("sim_scores") && !s["sim_scores"].is_null()) {
            if (!s["sim_scores"].is_object()) throw DataError("'sim_scores' is not an object");
            std::map<std::size_t, double> scores;
            for (const auto& [key, val] : s["sim_scores"].items()) {
                if (!val.is_number()) throw DataError("sim_scores value for key '" + key + "' is not a number");
                std::size_t idx = 0;
                try {
                    std::size_t used = 0;
                    idx = std::stoul(key, &used);
                    if (used != key.size()) throw std::invalid_argument(key);
                } catch (const std::exception&) {
                    throw DataError("sim_scores key '" + key + "' is not a segment index");
                }
                scores[idx] = val.get<double>();
            }
            im.sim_scores = std::move(scores);
        }
        doc.segments.emplace_back(std::move(im));
    }
    if (j.contains("meta") && !j["meta"].is_null()) {
        if (!j["meta"].is_object()) throw DataError("'meta' is not an object");
        doc.meta = j["meta"];
    }
    validate(doc);
    return doc;
}

inline PairSample pair_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw DataError("record is not a JSON object");
    if (!j.contains("image_id") || !j["image_id"].is_string()) throw DataError("missing or non-string field 'image_id'");
    if (!j.contains("caption") || !j["caption"].is_string()) throw DataError("missing or non-string field 'caption'");
    if (!j.contains("clip_score") || !j["clip_score"].is_number())
        throw DataError("missing or non-numeric field 'clip_score'");
    PairSample p{j["image_id"].get<std::string>(), j["caption"].get<std::string>(), j["clip_score"].get<double>()};
    if (p.image_id.empty()) throw DataError("empty image_id");
    if (!std::isfinite(p.clip_score)) throw DataError("non-finite clip_score");
    return p;
}

// ---------------------------------------------------------------------------
// Parsing

struct ParseIssue {
    std::size_t line = 0;  // 1-based
    std::string message;
};

struct ParseOptions {
    // Strict mode turns the first issue into a thrown DataError.
    bool strict = false;
};

struct ParseSummary {
    std::size_t lines = 0;
    std::size_t records = 0;
    std::size_t dropped_empty_captions = 0;
    std::vector<ParseIssue> issues;
};

namespace detail {

template <class OnLine>
ParseSummary for_each_line(std::istream& in, const ParseOptions& opts, OnLine&& on_line) {
    ParseSummary summary;
    std::string line;
    while (std::getline(in, line)) {
        ++summary.lines;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        try {
            on_line(nlohmann::json::parse(line), summary);
        } catch (const std::exception& e) {
            std::string msg = e.what();
            if (opts.strict) throw DataError("line " + std::to_string(summary.lines) + ": " + msg);
            summary.issues.push_back({summary.lines, std::move(msg)});
        }
    }
    if (in.bad()) throw DataError("read failure");
    return summary;
}

}  // namespace detail

// Streams documents in file order; malformed lines become issues (or throw in
// strict mode). Duplicate doc_ids are reported as issues.
inline ParseSummary for_each_interleaved(std::istream& in, const ParseOptions& opts,
                                         const std::function<void(InterleavedDocument&&)>& sink) {
    std::set<std::string> seen;
    return detail::for_each_line(in, opts, [&](const nlohmann::json& j, ParseSummary& s) {
        auto doc = interleaved_from_json(j);
        if (!seen.insert(doc.doc_id).second) throw DataError("duplicate doc_id '" + doc.doc_id + "'");
        ++s.records;
        sink(std::move(doc));
    });
}

// Empty (whitespace-only) captions are dropped and counted, not reported.
inline ParseSummary for_each_pair(std::istream& in, const ParseOptions& opts,
                                  const std::function<void(PairSample&&)>& sink) {
    return detail::for_each_line(in, opts, [&](const nlohmann::json& j, ParseSummary& s) {
        auto p = pair_from_json(j);
        if (trim(p.caption).empty()) {
            ++s.dropped_empty_captions;
            return;
        }
        ++s.records;
        sink(std::move(p));
    });
}

template <class Record>
struct ParseResult {
    std::vector<Record> records;
    ParseSummary summary;
};

inline std::ifstream open_input(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return in;
}

inline ParseResult<InterleavedDocument> read_interleaved(const std::filesystem::path& path,
                                                         const ParseOptions& opts = {}) {
    auto in = open_input(path);
    ParseResult<InterleavedDocument> r;
    r.summary = for_each_interleaved(in, opts, [&](InterleavedDocument&& d) { r.records.push_back(std::move(d)); });
    return r;
}

inline ParseResult<PairSample> read_pairs(const std::filesystem::path& path, const ParseOptions& opts = {}) {
    auto in = open_input(path);
    ParseResult<PairSample> r;
    r.summary = for_each_pair(in, opts, [&](PairSample&& p) { r.records.push_back(std::move(p)); });
    return r;
}

template <class Record>
void write_jsonl(const std::filesystem::path& path, const std::vector<Record>& records) {
    std::string out;
    for (const auto& r : records) {
        out += to_json(r).dump();
        out.push_back('\n');
    }
    write_file_atomic(path, out);
}

// A pair seen as a one-image document: <image><caption>.
inline InterleavedDocument pair_as_document(const PairSample& p, std::string doc_id = {}) {
    InterleavedDocument d;
    d.doc_id = doc_id.empty() ? p.image_id : std::move(doc_id);
    d.segments.emplace_back(ImageSegment{p.image_id, std::nullopt});
    d.segments.emplace_back(TextSegment{p.caption});
    return d;
}

// ---------------------------------------------------------------------------
// Statistics

struct CorpusStats {
    std::size_t num_docs = 0;
    std::size_t num_images = 0;
    std::size_t total_text_tokens = 0;
    double images_per_sample = 0.0;
    // Absent when the corpus holds no images.
    std::optional<double> tokens_per_image;
};

class StatsAccumulator {
public:
    explicit StatsAccumulator(const Tokenizer& tok) : tok_(&tok) {}

    void add(const InterleavedDocument& doc) {
        ++docs_;
        for (const auto& seg : doc.segments) {
            if (auto* t = std::get_if<TextSegment>(&seg))
                tokens_ += tok_->count_tokens(t->text);
            else
                ++images_;
        }
    }
    void add(const PairSample& p) {
        ++docs_;
        ++images_;
        tokens_ += tok_->count_tokens(p.caption);
    }

    CorpusStats result() const {
        CorpusStats s;
        s.num_docs = docs_;
        s.num_images = images_;
        s.total_text_tokens = tokens_;
        s.images_per_sample = docs_ ? static_cast<double>(images_) / static_cast<double>(docs_) : 0.0;
        if (images_) s.tokens_per_image = static_cast<double>(tokens_) / static_cast<double>(images_);
        return s;
    }

private:
    const Tokenizer* tok_;
    std::size_t docs_ = 0;
    std::size_t images_ = 0;
    std::size_t tokens_ = 0;
};

template <class Range>
CorpusStats compute_stats(const Range& records, const Tokenizer& tok) {
    StatsAccumulator acc(tok);
    for (const auto& r : records) acc.add(r);
    return acc.result();
}

// ---------------------------------------------------------------------------
// Transforms

enum class PairPolicy { BestSim, AdjacentNext };

inline PairPolicy parse_pair_policy(std::string_view s) {
    if (s == "best-sim") return PairPolicy::BestSim;
    if (s == "adjacent-next") return PairPolicy::AdjacentNext;
    throw ConfigError("unknown pair policy '" + std::string(s) + "' (expected best-sim or adjacent-next)");
}

// Breaks a document into (image, matched text) pairs, discarding interleave
// order. The same text segment may be matched by several images.
inline std::vector<PairSample> to_pairs(const InterleavedDocument& doc, PairPolicy policy) {
    std::vector<PairSample> out;
    for (std::size_t i = 0; i < doc.segments.size(); ++i) {
        const auto* im = std::get_if<ImageSegment>(&doc.segments[i]);
        if (!im) continue;
        if (policy == PairPolicy::BestSim) {
            if (!im->sim_scores || im->sim_scores->empty())
                throw DataError("image '" + im->image_id + "' in document '" + doc.doc_id +
                                "' has no sim_scores (required by best-sim)");
            std::optional<std::size_t> best;
            double best_score = 0.0;
            // std::map iterates in ascending index order, so strict > keeps the
            // lowest index among ties.
            for (const auto& [idx, score] : *im->sim_scores) {
                if (idx >= doc.segments.size() || !is_text(doc.segments[idx]))
                    throw DataError("image '" + im->image_id + "': sim_scores key " + std::to_string(idx) +
                                    " is not a text segment");
                if (!best || score > best_score) {
                    best = idx;
                    best_score = score;
                }
            }
            out.push_back({im->image_id, std::get<TextSegment>(doc.segments[*best]).text, best_score});
        } else {
            for (std::size_t j = i + 1; j < doc.segments.size(); ++j) {
                if (const auto* t = std::get_if<TextSegment>(&doc.segments[j])) {
                    double score = 0.0;
                    if (im->sim_scores) {
                        if (auto it = im->sim_scores->find(j); it != im->sim_scores->end()) score = it->second;
                    }
                    out.push_back({im->image_id, t->text, score});
                    break;
                }
            }
        }
    }
    return out;
}

// All images (in order) followed by all text (in order).
inline InterleavedDocument reformat_images_first(const InterleavedDocument& doc) {
    InterleavedDocument out = doc;
    std::vector<std::size_t> old_index(doc.segments.size());
    for (std::size_t i = 0; i < old_index.size(); ++i) old_index[i] = i;
    std::stable_partition(old_index.begin(), old_index.end(), [&](std::size_t i) { return is_image(doc.segments[i]); });
    std::vector<std::size_t> new_index(old_index.size());
    for (std::size_t n = 0; n < old_index.size(); ++n) {
        out.segments[n] = doc.segments[old_index[n]];
        new_index[old_index[n]] = n;
    }
    // sim_scores keys follow their text segments to the new positions.
    for (auto& seg : out.segments) {
        auto* im = std::get_if<ImageSegment>(&seg);
        if (!im || !im->sim_scores) continue;
        std::map<std::size_t, double> remapped;
        for (const auto& [idx, s] : *im->sim_scores) remapped[idx < new_index.size() ? new_index[idx] : idx] = s;
        im->sim_scores = std::move(remapped);
    }
    return out;
}

// Streaming top-k by clip_score. Order: score descending, then image_id
// ascending, then arrival order.
class TopKSelector {
public:
    explicit TopKSelector(std::size_t k) : k_(k) {}

    // Returns false (and records a diagnostic) when the score is not finite.
    bool push(PairSample p) {
        const std::uint64_t seq = seq_++;
        if (!std::isfinite(p.clip_score)) {
            rejected_.push_back("pair #" + std::to_string(seq) + " image '" + p.image_id + "': non-finite clip_score");
            return false;
        }
        if (k_ == 0) return true;
        Entry e{std::move(p), seq};
        if (heap_.size() < k_) {
            heap_.push(std::move(e));
        } else if (better(e, heap_.top())) {
            heap_.pop();
            heap_.push(std::move(e));
        }
        return true;
    }

    std::vector<PairSample> finish() {
        std::vector<Entry> entries;
        entries.reserve(heap_.size());
        while (!heap_.empty()) {
            entries.push_back(heap_.top());
            heap_.pop();
        }
        std::sort(entries.begin(), entries.end(), better);
        std::vector<PairSample> out;
        out.reserve(entries.size());
        for (auto& e : entries) out.push_back(std::move(e.pair));
        return out;
    }

    const std::vector<std::string>& rejected() const { return rejected_; }

private:
    struct Entry {
        PairSample pair;
        std::uint64_t seq;
    };
    static bool better(const Entry& a, const Entry& b) {
        if (a.pair.clip_score != b.pair.clip_score) return a.pair.clip_score > b.pair.clip_score;
        if (a.pair.image_id != b.pair.image_id) return a.pair.image_id < b.pair.image_id;
        return a.seq < b.seq;
    }
    // Worst retained entry on top.
    struct WorstOnTop {
        bool operator()(const Entry& a, const Entry& b) const { return better(a, b); }
    };

    std::size_t k_;
    std::uint64_t seq_ = 0;
    std::priority_queue<Entry, std::vector<Entry>, WorstOnTop> heap_;
    std::vector<std::string> rejected_;
};

template <class Range>
std::vector<PairSample> subsample_topk(const Range& pairs, std::size_t k, std::vector<std::string>* rejected = nullptr) {
    TopKSelector sel(k);
    for (const auto& p : pairs) sel.push(p);
    if (rejected) *rejected = sel.rejected();
    return sel.finish();
}

}  // namespace vlmforge
