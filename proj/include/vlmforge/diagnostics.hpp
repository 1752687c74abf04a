#pragma once

// Cross-modal alignment of decoder hidden states: per layer, the Chamfer
// similarity in cosine space between IMAGE-position and TEXT-position vectors.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlmforge/common.hpp"
#include "vlmforge/model.hpp"

namespace vlmforge {

enum class ChamferVariant { Symmetric, AtoB, BtoA, MeanPairwise };

inline std::string variant_name(ChamferVariant v) {
    switch (v) {
        case ChamferVariant::Symmetric: return "symmetric";
        case ChamferVariant::AtoB: return "a-to-b";
        case ChamferVariant::BtoA: return "b-to-a";
        case ChamferVariant::MeanPairwise: return "mean-pairwise";
    }
    return "?";
}

inline ChamferVariant parse_variant(std::string_view s) {
    if (s == "symmetric") return ChamferVariant::Symmetric;
    if (s == "a-to-b") return ChamferVariant::AtoB;
    if (s == "b-to-a") return ChamferVariant::BtoA;
    if (s == "mean-pairwise") return ChamferVariant::MeanPairwise;
    throw ConfigError("unknown chamfer variant '" + std::string(s) + "'");
}

using VectorSet = std::vector<std::vector<double>>;

// Symmetric: 1/2 (mean_a max_b cos + mean_b max_a cos). AtoB and BtoA are the
// two one-sided halves; MeanPairwise averages cos over all pairs.
inline double chamfer_cosine(const VectorSet& A, const VectorSet& B,
                             ChamferVariant variant = ChamferVariant::Symmetric) {
    if (A.empty() || B.empty()) throw ConfigError("chamfer_cosine: empty vector set");
    const std::size_t dim = A[0].size();
    auto norms = [&](const VectorSet& S, const char* name) {
        std::vector<double> n(S.size());
        for (std::size_t i = 0; i < S.size(); ++i) {
            if (S[i].size() != dim) throw ConfigError("chamfer_cosine: vectors of different dimension");
            double sq = 0.0;
            for (double x : S[i]) sq += x * x;
            n[i] = std::sqrt(sq);
            if (!(n[i] > 0.0) || !std::isfinite(n[i]))
                throw DataError(std::string("chamfer_cosine: zero or non-finite vector at index ") + std::to_string(i) +
                                " of set " + name);
        }
        return n;
    };
    const auto na = norms(A, "A"), nb = norms(B, "B");
    std::vector<double> best_a(A.size(), -2.0), best_b(B.size(), -2.0);
    double total = 0.0;
    for (std::size_t i = 0; i < A.size(); ++i)
        for (std::size_t j = 0; j < B.size(); ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < dim; ++k) dot += A[i][k] * B[j][k];
            const double c = std::clamp(dot / (na[i] * nb[j]), -1.0, 1.0);
            best_a[i] = std::max(best_a[i], c);
            best_b[j] = std::max(best_b[j], c);
            total += c;
        }
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    switch (variant) {
        case ChamferVariant::AtoB: return mean(best_a);
        case ChamferVariant::BtoA: return mean(best_b);
        case ChamferVariant::MeanPairwise: return total / static_cast<double>(A.size() * B.size());
        case ChamferVariant::Symmetric: break;
    }
    return 0.5 * (mean(best_a) + mean(best_b));
}

struct LayerAlignment {
    std::size_t layer = 0;  // 0 = embedding output
    double chamfer_cos = 0.0;
    std::size_t n = 0;      // samples averaged
};

struct AlignmentProfile {
    std::vector<LayerAlignment> layers;
    std::size_t sample_count = 0;
    std::string config_tag;
    ChamferVariant variant = ChamferVariant::Symmetric;

    double deepest() const { return layers.back().chamfer_cos; }

    std::string to_csv() const {
        std::string out = "layer,chamfer_cos,n\n";
        for (const auto& l : layers) out += std::to_string(l.layer) + "," + format_real(l.chamfer_cos) + "," + std::to_string(l.n) + "\n";
        return out;
    }
    nlohmann::json summary() const {
        nlohmann::json values = nlohmann::json::array();
        for (const auto& l : layers) values.push_back(l.chamfer_cos);
        return {{"variant", variant_name(variant)}, {"config_tag", config_tag}, {"sample_count", sample_count},
                {"chamfer_cos", values}};
    }
};

// Splits one layer's hidden rows by modality.
template <class T>
std::pair<VectorSet, VectorSet> split_by_modality(const Mat<T>& hidden, const std::vector<Modality>& modality) {
    std::pair<VectorSet, VectorSet> out;
    for (std::size_t i = 0; i < hidden.rows; ++i) {
        std::vector<double> row(hidden.row(i), hidden.row(i) + hidden.cols);
        (modality[i] == Modality::Image ? out.first : out.second).push_back(std::move(row));
    }
    return out;
}

// Averages per-sample chamfer values across traces. Samples with only one
// modality are skipped; if none has both, the batch is rejected.
template <class T>
AlignmentProfile alignment_profile(std::span<const ForwardTrace<T>> traces,
                                   ChamferVariant variant = ChamferVariant::Symmetric, std::string config_tag = {}) {
    if (traces.empty()) throw ConfigError("alignment profile over an empty batch");
    AlignmentProfile p;
    p.variant = variant;
    p.config_tag = std::move(config_tag);
    const std::size_t n_layers = traces[0].hidden.size();
    p.layers.resize(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) p.layers[l].layer = l;
    for (const auto& t : traces) {
        const bool has_image = std::find(t.modality.begin(), t.modality.end(), Modality::Image) != t.modality.end();
        const bool has_text = std::find(t.modality.begin(), t.modality.end(), Modality::Text) != t.modality.end();
        if (!has_image || !has_text) continue;
        ++p.sample_count;
        for (std::size_t l = 0; l < n_layers; ++l) {
            const auto [img, txt] = split_by_modality(t.hidden[l], t.modality);
            p.layers[l].chamfer_cos += chamfer_cosine(img, txt, variant);
            ++p.layers[l].n;
        }
    }
    if (!p.sample_count) throw DataError("alignment profile needs samples with both IMAGE and TEXT positions");
    for (auto& l : p.layers) l.chamfer_cos /= static_cast<double>(l.n);
    return p;
}

template <class T>
AlignmentProfile alignment_profile(const Model<T>& model, std::span<const PackedSample> samples,
                                   const ImageProvider& images, ChamferVariant variant = ChamferVariant::Symmetric,
                                   std::string config_tag = {}) {
    std::vector<ForwardTrace<T>> traces;
    traces.reserve(samples.size());
    for (const auto& s : samples) traces.push_back(model.forward(s, images));
    return alignment_profile(std::span<const ForwardTrace<T>>(traces), variant, std::move(config_tag));
}

}  // namespace vlmforge
