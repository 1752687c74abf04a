#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vlmforge/common.hpp"

namespace vlmforge {

// What a blend proportion counts: images drawn (the usual pre-training
// convention) or documents drawn (text-only mixes such as joint SFT).
enum class BlendUnit { Images, Documents };

inline BlendUnit parse_blend_unit(std::string_view s) {
    if (s == "images") return BlendUnit::Images;
    if (s == "documents" || s == "docs") return BlendUnit::Documents;
    throw ConfigError("unknown blend unit '" + std::string(s) + "'");
}

template <class Item>
struct BlendSource {
    std::string name;
    std::shared_ptr<const std::vector<Item>> items;
    double proportion = 1.0;
};

// Deterministic infinite sampler over several corpora. Draw i is a pure
// function of (sources, proportions, seed, i). With BlendUnit::Images the
// per-source document rate is proportion / images_per_sample, so that realized
// image shares converge to the requested proportions.
template <class Item>
class BlendSampler {
public:
    using ImageCount = std::function<std::size_t(const Item&)>;

    struct Draw {
        std::size_t source;
        std::size_t index;
        const Item* item;
    };

    BlendSampler(std::vector<BlendSource<Item>> sources, std::uint64_t seed, ImageCount image_count,
                 BlendUnit unit = BlendUnit::Images)
        : sources_(std::move(sources)), key_(derive_seed(seed, "blend")) {
        if (sources_.empty()) throw ConfigError("blend has no sources");
        double total = 0.0;
        for (const auto& s : sources_) {
            if (!s.items || s.items->empty()) throw ConfigError("blend source '" + s.name + "' is empty");
            if (!(s.proportion > 0.0)) throw ConfigError("blend source '" + s.name + "' has non-positive proportion");
            total += s.proportion;
        }
        if (std::abs(total - 1.0) > 1e-9) throw ConfigError("blend proportions sum to " + format_real(total) + ", not 1");

        std::vector<double> rate;
        for (const auto& s : sources_) {
            double images = 0.0;
            for (const auto& it : *s.items) images += static_cast<double>(image_count(it));
            const double ips = images / static_cast<double>(s.items->size());
            images_per_sample_.push_back(ips);
            if (unit == BlendUnit::Images) {
                if (ips <= 0.0)
                    throw ConfigError("blend source '" + s.name + "' has no images but the blend is over images");
                rate.push_back(s.proportion / ips);
            } else {
                rate.push_back(s.proportion);
            }
        }
        double rate_total = 0.0;
        for (double r : rate) rate_total += r;
        double acc = 0.0;
        for (double r : rate) {
            acc += r / rate_total;
            cumulative_.push_back(acc);
        }
        cumulative_.back() = 1.0;
    }

    Draw at(std::uint64_t i) const {
        const double u = CounterRng::unit_at(key_, 2 * i);
        std::size_t s = 0;
        while (s + 1 < cumulative_.size() && u >= cumulative_[s]) ++s;
        const auto& items = *sources_[s].items;
        const auto j = static_cast<std::size_t>(
            (static_cast<unsigned __int128>(CounterRng::at(key_, 2 * i + 1)) * items.size()) >> 64);
        return {s, j, &items[j]};
    }

    Draw next() { return at(counter_++); }

    // Probability that a draw comes from source s.
    double document_rate(std::size_t s) const { return cumulative_[s] - (s ? cumulative_[s - 1] : 0.0); }
    double images_per_sample(std::size_t s) const { return images_per_sample_[s]; }
    const std::vector<BlendSource<Item>>& sources() const { return sources_; }
    std::uint64_t position() const { return counter_; }
    void seek(std::uint64_t i) { counter_ = i; }

private:
    std::vector<BlendSource<Item>> sources_;
    std::uint64_t key_;
    std::vector<double> cumulative_;
    std::vector<double> images_per_sample_;
    std::uint64_t counter_ = 0;
};

}  // namespace vlmforge
