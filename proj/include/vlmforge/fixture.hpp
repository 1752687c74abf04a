#pragma once

// Seeded synthetic corpora shaped like an interleaved web corpus and a
// caption corpus, plus instruction demos, a colour-naming eval task and the
// procedural pixels behind every fixture image id.

#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlmforge/common.hpp"
#include "vlmforge/corpus.hpp"
#include "vlmforge/eval.hpp"
#include "vlmforge/packing.hpp"

namespace vlmforge {

inline constexpr std::size_t kNumColors = 8;
inline constexpr std::array<const char*, kNumColors> kColorNames = {"red",  "green",   "blue",  "yellow",
                                                                    "cyan", "magenta", "white", "black"};
inline constexpr float kColorRgb[kNumColors][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0},
                                                   {0, 1, 1}, {1, 0, 1}, {1, 1, 1}, {0, 0, 0}};

// Class k of an id ending in "-c<k>".
inline std::optional<std::size_t> image_class(std::string_view id) {
    const auto pos = id.rfind("-c");
    if (pos == std::string_view::npos || pos + 2 == id.size()) return std::nullopt;
    std::size_t k = 0;
    for (std::size_t i = pos + 2; i < id.size(); ++i) {
        if (id[i] < '0' || id[i] > '9') return std::nullopt;
        k = k * 10 + static_cast<std::size_t>(id[i] - '0');
    }
    return k;
}

// A flat class colour with id-seeded stripes and noise. Ids without a class
// suffix get a hashed class.
inline ImageTensor render_image(const std::string& id, std::size_t res) {
    const std::size_t cls = image_class(id).value_or(fnv1a64(id)) % kNumColors;
    CounterRng rng(derive_seed(fnv1a64(id), "pixels"));
    const bool horizontal = rng.below(2) == 0;
    const std::size_t period = 2 + rng.below(3);
    const std::size_t phase = rng.below(period);
    ImageTensor img{id, res, res, 3, std::vector<float>(res * res * 3)};
    for (std::size_t y = 0; y < res; ++y)
        for (std::size_t x = 0; x < res; ++x) {
            const bool stripe = ((horizontal ? y : x) + phase) % period == 0;
            for (std::size_t c = 0; c < 3; ++c) {
                double v = 0.15 + 0.7 * kColorRgb[cls][c] + (stripe ? 0.1 : 0.0) + rng.uniform(-0.05, 0.05);
                img.pixels[(y * res + x) * 3 + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    return img;
}

inline ImageProvider fixture_images(std::size_t res) {
    return [res](const std::string& id) { return render_image(id, res); };
}

// ---------------------------------------------------------------------------
// Corpus fixtures

struct InterleavedFixtureSpec {
    std::size_t n_docs = 10;
    double images_mean = 4.0;
    std::size_t images_min = 1;
    std::size_t images_max = 8;
    double tokens_per_image = 122.5;
};

struct PairFixtureSpec {
    std::size_t n_pairs = 100;
    double tokens_per_image = 22.7;
};

struct FixtureSpec {
    InterleavedFixtureSpec interleaved;
    PairFixtureSpec pairs;
    std::size_t vocab_words = 48;
    std::size_t n_topics = 8;
    std::size_t n_classes = kNumColors;
    std::uint64_t seed = 0;

    void validate() const {
        const auto& i = interleaved;
        if (i.n_docs == 0) throw ConfigError("fixture: n_docs must be positive");
        if (i.images_min == 0) throw ConfigError("fixture: images_per_doc min must be at least 1");
        if (i.images_min > i.images_max) throw ConfigError("fixture: images_per_doc min exceeds max");
        if (!(i.images_mean >= static_cast<double>(i.images_min) && i.images_mean <= static_cast<double>(i.images_max)))
            throw ConfigError("fixture: images_per_doc mean " + format_real(i.images_mean) + " outside [min, max]");
        if (!(i.tokens_per_image >= 1.0)) throw ConfigError("fixture: interleaved tokens_per_image must be at least 1");
        if (!(pairs.tokens_per_image >= 1.0)) throw ConfigError("fixture: pair tokens_per_image must be at least 1");
        if (n_topics == 0 || vocab_words < n_topics) throw ConfigError("fixture: need at least one word per topic");
        if (n_classes == 0 || n_classes > kNumColors)
            throw ConfigError("fixture: n_classes must be in [1, " + std::to_string(kNumColors) + "]");
    }
};

inline nlohmann::json to_json(const FixtureSpec& s) {
    return {{"interleaved",
             {{"n_docs", s.interleaved.n_docs},
              {"images_per_doc", {{"mean", s.interleaved.images_mean}, {"min", s.interleaved.images_min}, {"max", s.interleaved.images_max}}},
              {"tokens_per_image", s.interleaved.tokens_per_image}}},
            {"pairs", {{"n_pairs", s.pairs.n_pairs}, {"tokens_per_image", s.pairs.tokens_per_image}}},
            {"vocab_words", s.vocab_words},
            {"n_topics", s.n_topics},
            {"n_classes", s.n_classes},
            {"seed", s.seed}};
}

inline FixtureSpec fixture_spec_from_json(const nlohmann::json& j, FixtureSpec s = {}) {
    try {
        if (j.contains("interleaved")) {
            const auto& i = j["interleaved"];
            s.interleaved.n_docs = i.value("n_docs", s.interleaved.n_docs);
            s.interleaved.tokens_per_image = i.value("tokens_per_image", s.interleaved.tokens_per_image);
            if (i.contains("images_per_doc")) {
                const auto& d = i["images_per_doc"];
                s.interleaved.images_mean = d.value("mean", s.interleaved.images_mean);
                s.interleaved.images_min = d.value("min", s.interleaved.images_min);
                s.interleaved.images_max = d.value("max", s.interleaved.images_max);
            }
        }
        if (j.contains("pairs")) {
            s.pairs.n_pairs = j["pairs"].value("n_pairs", s.pairs.n_pairs);
            s.pairs.tokens_per_image = j["pairs"].value("tokens_per_image", s.pairs.tokens_per_image);
        }
        s.vocab_words = j.value("vocab_words", s.vocab_words);
        s.n_topics = j.value("n_topics", s.n_topics);
        s.n_classes = j.value("n_classes", s.n_classes);
        s.seed = j.value("seed", s.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("fixture spec: ") + e.what());
    }
    return s;
}

namespace detail {

inline std::string make_word(CounterRng& rng, std::size_t syllables) {
    static constexpr std::string_view consonants = "bdfgklmnprstvz";
    static constexpr std::string_view vowels = "aeiou";
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
        w += consonants[rng.below(consonants.size())];
        w += vowels[rng.below(vowels.size())];
    }
    return w;
}

inline std::vector<std::string> make_words(std::size_t n, std::uint64_t seed) {
    CounterRng rng(derive_seed(seed, "words"));
    std::set<std::string> seen;
    std::vector<std::string> out;
    while (out.size() < n) {
        auto w = make_word(rng, 2 + rng.below(2));
        if (seen.insert(w).second) out.push_back(std::move(w));
    }
    return out;
}

// Exactly `len` bytes: the lead then topic words, cut to length.
inline std::string fill_text(std::string_view lead, const std::vector<const std::string*>& words, std::size_t len,
                             CounterRng& rng) {
    std::string s(lead);
    while (s.size() < len) {
        s += ' ';
        s += *words[rng.below(words.size())];
    }
    s.resize(len);
    if (s.back() == ' ') s.back() = 'a';
    return s;
}

inline std::size_t cumulative_share(double rate, std::size_t i) {
    return static_cast<std::size_t>(std::llround(rate * static_cast<double>(i + 1)) -
                                    std::llround(rate * static_cast<double>(i)));
}

inline double round4(double v) { return std::round(v * 1e4) / 1e4; }

inline std::string padded(std::size_t v, int width = 6) {
    std::string s = std::to_string(v);
    return std::string(s.size() < static_cast<std::size_t>(width) ? width - s.size() : 0, '0') + s;
}

struct Lexicon {
    std::vector<std::string> words;
    std::vector<std::vector<const std::string*>> topics;

    Lexicon(const FixtureSpec& spec) : words(make_words(spec.vocab_words, spec.seed)) {
        topics.resize(spec.n_topics);
        for (std::size_t i = 0; i < words.size(); ++i) topics[i % spec.n_topics].push_back(&words[i]);
    }
};

}  // namespace detail

// Documents alternate image, text; each image's similarity scores favour the
// text right after it. Every text opens with its image's colour word and the
// document's subject, a fresh pseudo-word shared by all of its segments. Image and text-token totals are exact:
// round(mean * n_docs) images and round(tokens_per_image * images) tokens.
inline std::vector<InterleavedDocument> make_interleaved_fixture(const FixtureSpec& spec) {
    spec.validate();
    const auto& is = spec.interleaved;
    const detail::Lexicon lex(spec);
    CounterRng rng(derive_seed(spec.seed, "interleaved"));
    const auto total = static_cast<std::size_t>(std::llround(is.images_mean * static_cast<double>(is.n_docs)));
    if (total < is.images_min * is.n_docs || total > is.images_max * is.n_docs)
        throw ConfigError("fixture: images_per_doc mean is unreachable with the given bounds");
    std::vector<std::size_t> counts(is.n_docs);
    std::size_t sum = 0;
    for (auto& c : counts) {
        c = is.images_min + rng.below(is.images_max - is.images_min + 1);
        sum += c;
    }
    while (sum != total) {
        auto& c = counts[rng.below(counts.size())];
        if (sum < total && c < is.images_max) ++c, ++sum;
        else if (sum > total && c > is.images_min) --c, --sum;
    }

    std::vector<InterleavedDocument> docs;
    std::size_t global = 0;
    for (std::size_t d = 0; d < is.n_docs; ++d) {
        InterleavedDocument doc;
        doc.doc_id = "mmc4-" + detail::padded(d);
        const std::size_t topic = rng.below(spec.n_topics);
        const std::string subject = detail::make_word(rng, 3);
        doc.meta = {{"topic", topic}, {"subject", subject}};
        for (std::size_t k = 0; k < counts[d]; ++k) {
            const std::size_t cls = rng.below(spec.n_classes);
            ImageSegment im{doc.doc_id + "-" + std::to_string(k) + "-c" + std::to_string(cls), std::map<std::size_t, double>{}};
            for (std::size_t t = 0; t < counts[d]; ++t)
                (*im.sim_scores)[2 * t + 1] = detail::round4(t == k ? rng.uniform(0.28, 0.36) : rng.uniform(0.12, 0.24));
            doc.segments.emplace_back(std::move(im));
            const std::size_t len = detail::cumulative_share(is.tokens_per_image, global++);
            const std::string lead = std::string(kColorNames[cls]) + " " + subject;
            doc.segments.emplace_back(TextSegment{detail::fill_text(lead, lex.topics[topic], len, rng)});
        }
        validate(doc);
        docs.push_back(std::move(doc));
    }
    return docs;
}

// One image per caption; caption lengths mix floor and ceil of the target so
// the corpus mean is exact to rounding.
inline std::vector<PairSample> make_pair_fixture(const FixtureSpec& spec) {
    spec.validate();
    const detail::Lexicon lex(spec);
    CounterRng rng(derive_seed(spec.seed, "pairs"));
    std::vector<PairSample> out;
    for (std::size_t i = 0; i < spec.pairs.n_pairs; ++i) {
        const std::size_t cls = rng.below(spec.n_classes);
        const std::size_t topic = rng.below(spec.n_topics);
        const std::size_t len = detail::cumulative_share(spec.pairs.tokens_per_image, i);
        out.push_back({"coyo-" + detail::padded(i) + "-c" + std::to_string(cls),
                       detail::fill_text(kColorNames[cls], lex.topics[topic], len, rng),
                       detail::round4(rng.uniform(0.25, 0.40))});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Instruction and eval fixtures

inline constexpr const char* kColorPrompt = "color?";

// Visual demos ask for the image colour; text demos are one-digit sums.
inline std::vector<SftDemo> make_sft_visual(std::size_t n, std::size_t n_classes, std::uint64_t seed) {
    CounterRng rng(derive_seed(seed, "sft-visual"));
    std::vector<SftDemo> out;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t cls = rng.below(n_classes);
        out.push_back({"sft-" + detail::padded(i) + "-c" + std::to_string(cls), kColorPrompt, kColorNames[cls]});
    }
    return out;
}

inline std::vector<SftDemo> make_sft_text(std::size_t n, std::uint64_t seed) {
    CounterRng rng(derive_seed(seed, "sft-text"));
    std::vector<SftDemo> out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto a = rng.below(10), b = rng.below(10);
        out.push_back({std::nullopt, std::to_string(a) + "+" + std::to_string(b) + "=", std::to_string(a + b)});
    }
    return out;
}

// Two-candidate colour naming. Items come in mirrored pairs (gold a vs b, then
// gold b vs a), so a model that ignores the image scores exactly one half.
inline EvalTask make_color_task(std::size_t n_items, std::size_t n_demos, std::size_t n_classes, std::uint64_t seed) {
    if (n_classes < 2) throw ConfigError("colour task needs at least two classes");
    CounterRng rng(derive_seed(seed, "eval-color"));
    EvalTask task;
    task.name = "color";
    task.metric = EvalMetric::CandidateRank;
    auto item = [&](const std::string& id, const std::string& image, std::size_t gold, std::size_t other) {
        EvalItem it{id, image, kColorPrompt, kColorNames[gold], std::vector<std::string>{kColorNames[gold], kColorNames[other]}};
        if (rng.below(2)) std::swap((*it.candidates)[0], (*it.candidates)[1]);
        return it;
    };
    for (std::size_t i = 0; i < n_items; i += 2) {
        const std::size_t a = rng.below(n_classes);
        const std::size_t b = (a + 1 + rng.below(n_classes - 1)) % n_classes;
        task.items.push_back(item("item-" + detail::padded(i, 4), "eval-" + detail::padded(i) + "-c" + std::to_string(a), a, b));
        if (i + 1 < n_items)
            task.items.push_back(
                item("item-" + detail::padded(i + 1, 4), "eval-" + detail::padded(i + 1) + "-c" + std::to_string(b), b, a));
    }
    for (std::size_t i = 0; i < n_demos; ++i) {
        const std::size_t a = rng.below(n_classes);
        const std::size_t b = (a + 1 + rng.below(n_classes - 1)) % n_classes;
        task.demo_pool.push_back(item("demo-" + detail::padded(i, 4), "evdemo-" + detail::padded(i) + "-c" + std::to_string(a), a, b));
    }
    return task;
}

// ---------------------------------------------------------------------------
// Bundle on disk

struct FixtureBundle {
    std::filesystem::path interleaved, pairs, sft_visual, sft_text, eval_task, eval_demos;

    std::vector<std::filesystem::path> all() const { return {interleaved, pairs, sft_visual, sft_text, eval_task, eval_demos}; }
};

struct BundleOptions {
    std::size_t sft_visual = 200;
    std::size_t sft_text = 200;
    std::size_t eval_items = 200;
    std::size_t eval_demos = 16;
};

inline FixtureBundle write_corpus_fixture(const FixtureSpec& spec, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    FixtureBundle b;
    b.interleaved = dir / "interleaved.jsonl";
    b.pairs = dir / "pairs.jsonl";
    write_jsonl(b.interleaved, make_interleaved_fixture(spec));
    write_jsonl(b.pairs, make_pair_fixture(spec));
    return b;
}

inline FixtureBundle write_fixture_bundle(const FixtureSpec& spec, const std::filesystem::path& dir,
                                          const BundleOptions& opts = {}) {
    auto b = write_corpus_fixture(spec, dir);
    b.sft_visual = dir / "sft_visual.jsonl";
    b.sft_text = dir / "sft_text.jsonl";
    b.eval_task = dir / "eval_color.jsonl";
    b.eval_demos = dir / "eval_color_demos.jsonl";
    write_jsonl(b.sft_visual, make_sft_visual(opts.sft_visual, spec.n_classes, spec.seed));
    write_jsonl(b.sft_text, make_sft_text(opts.sft_text, spec.seed));
    write_task(make_color_task(opts.eval_items, opts.eval_demos, spec.n_classes, spec.seed), b.eval_task,
               b.eval_demos.filename().string());
    return b;
}

}  // namespace vlmforge
