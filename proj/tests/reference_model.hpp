#pragma once

// Straight-line re-evaluation of the model's forward arithmetic, written
// against parameter names only. Used as an oracle for Model::forward.

#include <cmath>
#include <string>
#include <vector>

#include "vlmforge/model.hpp"

namespace vlmforge::testing {

using Vec = std::vector<double>;
using Rows = std::vector<Vec>;

struct Reference {
    const ParameterStore<double>& ps;
    const ModelConfig& cfg;

    const std::vector<double>& p(const std::string& name) const { return ps.values(ps.find(name)); }

    Rows affine(const Rows& x, const std::string& prefix) const {
        const auto& w = p(prefix + ".w");
        const auto& b = p(prefix + ".b");
        const std::size_t in = x.empty() ? 0 : x[0].size(), out = b.size();
        Rows y(x.size(), Vec(out));
        for (std::size_t i = 0; i < x.size(); ++i)
            for (std::size_t o = 0; o < out; ++o) {
                double s = b[o];
                for (std::size_t a = 0; a < in; ++a) s += x[i][a] * w[a * out + o];
                y[i][o] = s;
            }
        return y;
    }

    Rows norm(const Rows& x, const std::string& prefix) const {
        const auto& g = p(prefix + ".g");
        const auto& b = p(prefix + ".b");
        Rows y = x;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double n = static_cast<double>(x[i].size());
            double mean = 0, var = 0;
            for (double v : x[i]) mean += v / n;
            for (double v : x[i]) var += (v - mean) * (v - mean) / n;
            for (std::size_t j = 0; j < x[i].size(); ++j)
                y[i][j] = (x[i][j] - mean) / std::sqrt(var + 1e-5) * g[j] + b[j];
        }
        return y;
    }

    Rows attention(const Rows& x, const std::string& prefix, std::size_t heads, bool causal) const {
        const Rows q = affine(x, prefix + ".q"), k = affine(x, prefix + ".k"), v = affine(x, prefix + ".v");
        const std::size_t n = x.size(), d = x[0].size(), dh = d / heads;
        Rows o(n, Vec(d, 0.0));
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < n; ++i) {
                Vec w(n, 0.0);
                double z = 0;
                for (std::size_t j = 0; j < n; ++j) {
                    if (causal && j > i) continue;
                    double s = 0;
                    for (std::size_t t = 0; t < dh; ++t) s += q[i][h * dh + t] * k[j][h * dh + t];
                    w[j] = std::exp(s / std::sqrt(static_cast<double>(dh)));
                    z += w[j];
                }
                for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t t = 0; t < dh; ++t) o[i][h * dh + t] += w[j] / z * v[j][h * dh + t];
            }
        return affine(o, prefix + ".o");
    }

    Rows block(const Rows& x, const std::string& prefix, std::size_t heads, bool causal) const {
        Rows a = attention(norm(x, prefix + ".ln1"), prefix + ".attn", heads, causal);
        for (std::size_t i = 0; i < x.size(); ++i)
            for (std::size_t j = 0; j < x[i].size(); ++j) a[i][j] += x[i][j];
        Rows h = affine(norm(a, prefix + ".ln2"), prefix + ".ffn.up");
        for (auto& r : h)
            for (auto& v : r) v = 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
        Rows f = affine(h, prefix + ".ffn.down");
        for (std::size_t i = 0; i < x.size(); ++i)
            for (std::size_t j = 0; j < x[i].size(); ++j) f[i][j] += a[i][j];
        return f;
    }

    // Linear projector only.
    Rows image_tokens(const ImageTensor& img) const {
        const std::size_t side = cfg.resolution / cfg.patch, P = cfg.patch;
        Rows patches;
        for (std::size_t pr = 0; pr < side; ++pr)
            for (std::size_t pc = 0; pc < side; ++pc) {
                Vec v;
                for (std::size_t y = 0; y < P; ++y)
                    for (std::size_t x = 0; x < P; ++x)
                        for (std::size_t c = 0; c < 3; ++c) v.push_back(img.at(pr * P + y, pc * P + x, c));
                patches.push_back(v);
            }
        Rows e = affine(patches, "vision.patch");
        const auto& prow = p("vision.pos_row");
        const auto& pcol = p("vision.pos_col");
        const std::size_t vd = cfg.vision_dim;
        for (std::size_t t = 0; t < e.size(); ++t)
            for (std::size_t j = 0; j < vd; ++j) e[t][j] += prow[(t / side) * vd + j] + pcol[(t % side) * vd + j];
        for (std::size_t l = 0; l < cfg.vision_layers; ++l)
            e = block(e, "vision.block" + std::to_string(l), cfg.resolved_vision_heads(), false);
        return affine(norm(e, "vision.ln_f"), "projector.out");
    }

    Rows logits(const PackedSample& s, const std::vector<ImageTensor>& images) const {
        const std::size_t L = s.size(), d = cfg.model_dim;
        const auto& tok = p("embed.tok");
        const auto& pos = p("embed.pos");
        Rows x(L, Vec(d));
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t j = 0; j < d; ++j) x[i][j] = tok[s.tokens[i] * d + j];
        for (std::size_t k = 0; k < s.slots.size(); ++k) {
            const Rows t = image_tokens(images[k]);
            for (std::size_t r = 0; r < s.slots[k].length; ++r) x[s.slots[k].start + r] = t[r];
        }
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t j = 0; j < d; ++j) x[i][j] += pos[i * d + j];
        for (std::size_t l = 0; l < cfg.llm_layers; ++l) x = block(x, "llm.block" + std::to_string(l), cfg.heads, true);
        return affine(norm(x, "llm.ln_f"), "head.out");
    }
};

}  // namespace vlmforge::testing
