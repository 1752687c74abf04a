#pragma once

// Toy auto-regressive visual-language model: a patch-embedding vision
// encoder, a projector into the language model's embedding space, and a
// small causal decoder. Forward keeps everything backward needs, so
// gradients are exact for every parameter group.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlmforge/common.hpp"
#include "vlmforge/layers.hpp"
#include "vlmforge/packing.hpp"
#include "vlmforge/tensor.hpp"
#include "vlmforge/tokenizer.hpp"

namespace vlmforge {

enum class ProjectorKind { Linear, TransformerBlock, Downsample };

inline std::string projector_name(ProjectorKind k) {
    switch (k) {
        case ProjectorKind::Linear: return "linear";
        case ProjectorKind::TransformerBlock: return "transformer";
        case ProjectorKind::Downsample: return "downsample";
    }
    return "?";
}

inline ProjectorKind parse_projector(std::string_view s) {
    if (s == "linear") return ProjectorKind::Linear;
    if (s == "transformer" || s == "transformer-block") return ProjectorKind::TransformerBlock;
    if (s == "downsample") return ProjectorKind::Downsample;
    throw ConfigError("unknown projector '" + std::string(s) + "' (expected linear, transformer or downsample)");
}

struct ProjectorVariant {
    ProjectorKind kind = ProjectorKind::Linear;
    std::size_t heads = 1;   // TransformerBlock only
    std::size_t factor = 2;  // Downsample only

    bool operator==(const ProjectorVariant&) const = default;
};

struct ModelConfig {
    std::size_t resolution = 16;
    std::size_t patch = 4;
    std::size_t vision_dim = 16;
    std::size_t model_dim = 32;
    std::size_t ffn_dim = 64;
    std::size_t vision_ffn_dim = 0;  // 0 means 4 * vision_dim
    std::size_t vision_layers = 1;
    std::size_t llm_layers = 2;
    std::size_t heads = 2;
    std::size_t vision_heads = 0;  // 0 means heads
    std::size_t vocab_size = Tokenizer::kVocabSize;
    std::size_t max_positions = 256;
    ProjectorVariant projector;
    std::uint64_t seed = 0;

    static constexpr std::size_t kChannels = 3;

    std::size_t downsample() const { return projector.kind == ProjectorKind::Downsample ? projector.factor : 1; }
    ImageGeometry geometry() const { return {resolution, patch, downsample()}; }
    std::size_t grid_side() const { return resolution / patch; }
    std::size_t encoder_tokens() const { return grid_side() * grid_side(); }
    std::size_t image_tokens() const { return tokens_per_image(resolution, patch, downsample()); }
    std::size_t patch_features() const { return patch * patch * kChannels; }
    std::size_t resolved_vision_ffn() const { return vision_ffn_dim ? vision_ffn_dim : 4 * vision_dim; }
    std::size_t resolved_vision_heads() const { return vision_heads ? vision_heads : heads; }

    void validate() const {
        if (projector.kind == ProjectorKind::Downsample && projector.factor != 2)
            throw ConfigError("downsample projector supports factor 2 only");
        (void)tokens_per_image(resolution, patch, downsample());
        if (heads == 0 || model_dim % heads != 0) throw ConfigError("model_dim must be divisible by heads");
        if (vision_dim % resolved_vision_heads() != 0) throw ConfigError("vision_dim must be divisible by vision heads");
        if (projector.kind == ProjectorKind::TransformerBlock && (projector.heads == 0 || vision_dim % projector.heads))
            throw ConfigError("vision_dim must be divisible by projector heads");
        if (image_tokens() > max_positions) throw ConfigError("tokens per image exceed max_positions");
        if (vocab_size == 0 || model_dim == 0 || vision_dim == 0 || ffn_dim == 0)
            throw ConfigError("model widths must be positive");
    }

    bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"resolution", c.resolution},
            {"patch", c.patch},
            {"vision_dim", c.vision_dim},
            {"model_dim", c.model_dim},
            {"ffn_dim", c.ffn_dim},
            {"vision_ffn_dim", c.vision_ffn_dim},
            {"vision_layers", c.vision_layers},
            {"llm_layers", c.llm_layers},
            {"heads", c.heads},
            {"vision_heads", c.vision_heads},
            {"vocab_size", c.vocab_size},
            {"max_positions", c.max_positions},
            {"projector",
             {{"kind", projector_name(c.projector.kind)}, {"heads", c.projector.heads}, {"factor", c.projector.factor}}},
            {"seed", c.seed}};
}

// Missing keys keep their defaults, so config files can be partial.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    try {
        get("resolution", c.resolution);
        get("patch", c.patch);
        get("vision_dim", c.vision_dim);
        get("model_dim", c.model_dim);
        get("ffn_dim", c.ffn_dim);
        get("vision_ffn_dim", c.vision_ffn_dim);
        get("vision_layers", c.vision_layers);
        get("llm_layers", c.llm_layers);
        get("heads", c.heads);
        get("vision_heads", c.vision_heads);
        get("vocab_size", c.vocab_size);
        get("max_positions", c.max_positions);
        get("seed", c.seed);
        if (j.contains("projector")) {
            const auto& p = j.at("projector");
            if (p.is_string()) {
                c.projector.kind = parse_projector(p.get<std::string>());
            } else {
                if (p.contains("kind")) c.projector.kind = parse_projector(p.at("kind").get<std::string>());
                if (p.contains("heads")) c.projector.heads = p.at("heads").get<std::size_t>();
                if (p.contains("factor")) c.projector.factor = p.at("factor").get<std::size_t>();
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    return c;
}

// ---------------------------------------------------------------------------
// Traces

template <class T>
struct ImageTrace {
    Mat<T> patches;      // n x patch_features
    Mat<T> embedded;     // patch embedding + 2-D positions, input to block 1
    std::vector<BlockCache<T>> blocks;
    NormCache<T> ln_f;
    Mat<T> output;       // n x vision_dim
};

template <class T>
struct ProjectorTrace {
    Mat<T> input;        // encoder tokens
    BlockCache<T> block;
    Mat<T> block_out;
    Mat<T> gathered;     // input to the output affine
    Mat<T> output;       // tokens x model_dim
};

template <class T>
struct SlotTrace {
    ImageTrace<T> image;
    ProjectorTrace<T> projector;
};

template <class T>
struct ForwardTrace {
    Mat<T> logits;                 // L x vocab
    std::vector<Mat<T>> hidden;    // llm_layers + 1 entries, each L x model_dim
    std::vector<Modality> modality;
    std::vector<TokenId> tokens;
    std::vector<ImageSlot> slots;
    std::vector<SlotTrace<T>> images;
    std::vector<BlockCache<T>> blocks;
    NormCache<T> ln_f;
    Mat<T> final_norm;
};

template <class T>
struct CrossEntropy {
    T loss_sum = 0;
    std::size_t count = 0;
    Mat<T> dlogits;
};

// Sum of -log softmax(logits[i])[targets[i]] over mask[i] = 1, with
// dlogits scaled by 1 / denominator. Masked-out rows are never read beyond
// their index, so their targets cannot affect the result.
template <class T>
CrossEntropy<T> masked_cross_entropy(const Mat<T>& logits, std::span<const TokenId> targets,
                                     std::span<const std::uint8_t> mask, T denominator) {
    if (targets.size() != logits.rows || mask.size() != logits.rows)
        throw ConfigError("targets/mask length does not match logits");
    CrossEntropy<T> ce;
    ce.dlogits = Mat<T>(logits.rows, logits.cols);
    for (std::size_t i = 0; i < logits.rows; ++i) {
        if (!mask[i]) continue;
        if (targets[i] >= logits.cols) throw ConfigError("target id outside vocabulary");
        const T* li = logits.row(i);
        T mx = li[0];
        for (std::size_t j = 1; j < logits.cols; ++j) mx = std::max(mx, li[j]);
        T sum = 0;
        for (std::size_t j = 0; j < logits.cols; ++j) sum += std::exp(li[j] - mx);
        const T lse = mx + std::log(sum);
        ce.loss_sum += lse - li[targets[i]];
        ++ce.count;
        T* di = ce.dlogits.row(i);
        for (std::size_t j = 0; j < logits.cols; ++j) di[j] = std::exp(li[j] - lse) / denominator;
        di[targets[i]] -= T(1) / denominator;
    }
    return ce;
}

template <class T>
struct LossAndGrads {
    T loss = 0;
    Gradients<T> grads;
    std::size_t count = 0;
    bool empty_mask = false;
};

template <class T>
class Model {
public:
    explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        build();
        initialize();
    }

    const ModelConfig& config() const { return cfg_; }
    ParameterStore<T>& params() { return store_; }
    const ParameterStore<T>& params() const { return store_; }

    // -- vision ------------------------------------------------------------

    Mat<T> patchify(const ImageTensor& img) const {
        if (img.height != cfg_.resolution || img.width != cfg_.resolution || img.channels != ModelConfig::kChannels)
            throw ConfigError("image '" + img.image_id + "' is " + std::to_string(img.height) + "x" +
                              std::to_string(img.width) + "x" + std::to_string(img.channels) + ", expected " +
                              std::to_string(cfg_.resolution) + "x" + std::to_string(cfg_.resolution) + "x3");
        if (img.pixels.size() != img.height * img.width * img.channels)
            throw ConfigError("image '" + img.image_id + "' pixel buffer has wrong size");
        const std::size_t side = cfg_.grid_side(), p = cfg_.patch, c = ModelConfig::kChannels;
        Mat<T> out(side * side, cfg_.patch_features());
        for (std::size_t pr = 0; pr < side; ++pr)
            for (std::size_t pc = 0; pc < side; ++pc) {
                T* row = out.row(pr * side + pc);
                for (std::size_t y = 0; y < p; ++y)
                    for (std::size_t x = 0; x < p; ++x)
                        for (std::size_t ch = 0; ch < c; ++ch)
                            row[(y * p + x) * c + ch] = static_cast<T>(img.at(pr * p + y, pc * p + x, ch));
            }
        return out;
    }

    ImageTrace<T> encode_image(const ImageTensor& img) const {
        ImageTrace<T> t;
        t.patches = patchify(img);
        t.embedded = linear_forward(store_, patch_, t.patches);
        const std::size_t side = cfg_.grid_side(), d = cfg_.vision_dim;
        const T* prow = store_.data(pos_row_);
        const T* pcol = store_.data(pos_col_);
        for (std::size_t r = 0; r < side; ++r)
            for (std::size_t c = 0; c < side; ++c) {
                T* e = t.embedded.row(r * side + c);
                for (std::size_t j = 0; j < d; ++j) e[j] += prow[r * d + j] + pcol[c * d + j];
            }
        Mat<T> x = t.embedded;
        t.blocks.resize(vblocks_.size());
        for (std::size_t l = 0; l < vblocks_.size(); ++l) x = block_forward(store_, vblocks_[l], x, t.blocks[l]);
        t.output = layer_norm_forward(store_, vln_, x, t.ln_f);
        return t;
    }

    void encode_image_backward(const ImageTrace<T>& t, const Mat<T>& dout, Gradients<T>& grads) const {
        Mat<T> dx = layer_norm_backward(store_, vln_, t.ln_f, dout, grads);
        for (std::size_t l = vblocks_.size(); l-- > 0;) dx = block_backward(store_, vblocks_[l], t.blocks[l], dx, grads);
        const std::size_t side = cfg_.grid_side(), d = cfg_.vision_dim;
        T* gr = grads[pos_row_];
        T* gc = grads[pos_col_];
        for (std::size_t r = 0; r < side; ++r)
            for (std::size_t c = 0; c < side; ++c) {
                const T* e = dx.row(r * side + c);
                for (std::size_t j = 0; j < d; ++j) {
                    gr[r * d + j] += e[j];
                    gc[c * d + j] += e[j];
                }
            }
        (void)linear_backward(store_, patch_, t.patches, dx, grads);
    }

    // -- projector ---------------------------------------------------------

    ProjectorTrace<T> project(const Mat<T>& visual) const {
        if (visual.rows != cfg_.encoder_tokens() || visual.cols != cfg_.vision_dim)
            throw ConfigError("projector input is " + std::to_string(visual.rows) + "x" + std::to_string(visual.cols) +
                              ", expected " + std::to_string(cfg_.encoder_tokens()) + "x" +
                              std::to_string(cfg_.vision_dim));
        ProjectorTrace<T> t;
        t.input = visual;
        switch (cfg_.projector.kind) {
            case ProjectorKind::Linear: t.gathered = visual; break;
            case ProjectorKind::TransformerBlock:
                t.block_out = block_forward(store_, *pblock_, visual, t.block);
                t.gathered = t.block_out;
                break;
            case ProjectorKind::Downsample: t.gathered = downsample_gather(visual); break;
        }
        t.output = linear_forward(store_, pout_, t.gathered);
        return t;
    }

    Mat<T> project_backward(const ProjectorTrace<T>& t, const Mat<T>& dout, Gradients<T>& grads) const {
        Mat<T> dg = linear_backward(store_, pout_, t.gathered, dout, grads);
        switch (cfg_.projector.kind) {
            case ProjectorKind::Linear: return dg;
            case ProjectorKind::TransformerBlock: return block_backward(store_, *pblock_, t.block, dg, grads);
            case ProjectorKind::Downsample: return downsample_scatter(dg);
        }
        return dg;
    }

    // Row (r, c) of the output concatenates encoder tokens (2r,2c), (2r,2c+1),
    // (2r+1,2c), (2r+1,2c+1) of the square token grid.
    Mat<T> downsample_gather(const Mat<T>& x) const {
        const std::size_t side = square_side(x.rows), d = x.cols, half = side / 2;
        Mat<T> out(half * half, 4 * d);
        for (std::size_t r = 0; r < half; ++r)
            for (std::size_t c = 0; c < half; ++c) {
                T* o = out.row(r * half + c);
                const std::size_t src[4] = {(2 * r) * side + 2 * c, (2 * r) * side + 2 * c + 1,
                                            (2 * r + 1) * side + 2 * c, (2 * r + 1) * side + 2 * c + 1};
                for (int q = 0; q < 4; ++q) std::copy(x.row(src[q]), x.row(src[q]) + d, o + q * d);
            }
        return out;
    }

    // -- decoder -----------------------------------------------------------

    ForwardTrace<T> forward(const PackedSample& s, std::span<const ImageTensor> slot_images) const {
        const std::size_t L = s.size(), d = cfg_.model_dim;
        if (L == 0) throw ConfigError("forward on an empty sample");
        if (L > cfg_.max_positions)
            throw ConfigError("sequence of " + std::to_string(L) + " tokens exceeds max_positions " +
                              std::to_string(cfg_.max_positions));
        if (slot_images.size() != s.slots.size())
            throw ConfigError("unbound image slot: " + std::to_string(s.slots.size()) + " slots, " +
                              std::to_string(slot_images.size()) + " images");
        ForwardTrace<T> t;
        t.modality = s.modality;
        t.tokens = s.tokens;
        t.slots = s.slots;
        Mat<T> x(L, d);
        const T* tok = store_.data(tok_embed_);
        const T* pos = store_.data(pos_embed_);
        for (std::size_t i = 0; i < L; ++i) {
            T* xi = x.row(i);
            if (s.modality[i] == Modality::Text) {
                if (s.tokens[i] >= cfg_.vocab_size)
                    throw ConfigError("token id " + std::to_string(s.tokens[i]) + " outside vocabulary");
                const T* e = tok + static_cast<std::size_t>(s.tokens[i]) * d;
                for (std::size_t j = 0; j < d; ++j) xi[j] = e[j];
            }
        }
        t.images.resize(s.slots.size());
        for (std::size_t k = 0; k < s.slots.size(); ++k) {
            const auto& slot = s.slots[k];
            auto& st = t.images[k];
            st.image = encode_image(slot_images[k]);
            st.projector = project(st.image.output);
            if (st.projector.output.rows != slot.length || slot.start + slot.length > L)
                throw ConfigError("image slot of length " + std::to_string(slot.length) + " does not match " +
                                  std::to_string(st.projector.output.rows) + " projected tokens");
            for (std::size_t r = 0; r < slot.length; ++r)
                std::copy(st.projector.output.row(r), st.projector.output.row(r) + d, x.row(slot.start + r));
        }
        for (std::size_t i = 0; i < L; ++i) {
            T* xi = x.row(i);
            for (std::size_t j = 0; j < d; ++j) xi[j] += pos[i * d + j];
        }
        t.hidden.reserve(blocks_.size() + 1);
        t.hidden.push_back(x);
        t.blocks.resize(blocks_.size());
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            x = block_forward(store_, blocks_[l], x, t.blocks[l]);
            t.hidden.push_back(x);
        }
        t.final_norm = layer_norm_forward(store_, ln_f_, x, t.ln_f);
        t.logits = linear_forward(store_, head_, t.final_norm);
        return t;
    }

    ForwardTrace<T> forward(const PackedSample& s, const ImageProvider& images) const {
        const auto bound = bind_images(s, images);
        return forward(s, std::span<const ImageTensor>(bound));
    }

    ForwardTrace<T> forward(const PackedSample& s) const { return forward(s, std::span<const ImageTensor>()); }

    void backward(const ForwardTrace<T>& t, const Mat<T>& dlogits, Gradients<T>& grads) const {
        const std::size_t L = t.tokens.size(), d = cfg_.model_dim;
        Mat<T> dx = layer_norm_backward(store_, ln_f_, t.ln_f, linear_backward(store_, head_, t.final_norm, dlogits, grads),
                                        grads);
        for (std::size_t l = blocks_.size(); l-- > 0;) dx = block_backward(store_, blocks_[l], t.blocks[l], dx, grads);
        T* gpos = grads[pos_embed_];
        T* gtok = grads[tok_embed_];
        for (std::size_t i = 0; i < L; ++i) {
            const T* di = dx.row(i);
            for (std::size_t j = 0; j < d; ++j) gpos[i * d + j] += di[j];
            if (t.modality[i] == Modality::Text) {
                T* g = gtok + static_cast<std::size_t>(t.tokens[i]) * d;
                for (std::size_t j = 0; j < d; ++j) g[j] += di[j];
            }
        }
        for (std::size_t k = 0; k < t.slots.size(); ++k) {
            const auto& slot = t.slots[k];
            Mat<T> dproj(slot.length, d);
            for (std::size_t r = 0; r < slot.length; ++r)
                std::copy(dx.row(slot.start + r), dx.row(slot.start + r) + d, dproj.row(r));
            const Mat<T> dvis = project_backward(t.images[k].projector, dproj, grads);
            encode_image_backward(t.images[k].image, dvis, grads);
        }
    }

    // Mean next-token cross-entropy over mask = 1 rows. An all-zero mask
    // yields zero loss and zero gradients with empty_mask set.
    LossAndGrads<T> loss_and_grads(const ForwardTrace<T>& t, std::span<const TokenId> targets,
                                   std::span<const std::uint8_t> mask) const {
        LossAndGrads<T> r;
        r.grads = Gradients<T>(store_);
        std::size_t count = 0;
        for (auto m : mask) count += m ? 1 : 0;
        if (count == 0) {
            if (targets.size() != t.logits.rows || mask.size() != t.logits.rows)
                throw ConfigError("targets/mask length does not match logits");
            r.empty_mask = true;
            return r;
        }
        auto ce = masked_cross_entropy(t.logits, targets, mask, static_cast<T>(count));
        backward(t, ce.dlogits, r.grads);
        r.loss = ce.loss_sum / static_cast<T>(count);
        r.count = count;
        return r;
    }

    // Greedy continuation; EOS ends generation and is not returned.
    std::vector<TokenId> generate(const PackedSample& prefix, std::span<const ImageTensor> slot_images,
                                  std::size_t max_new) const {
        if (prefix.size() + max_new > cfg_.max_positions)
            throw ConfigError("prefix of " + std::to_string(prefix.size()) + " tokens plus " + std::to_string(max_new) +
                              " new tokens exceeds max_positions " + std::to_string(cfg_.max_positions));
        std::vector<TokenId> out;
        PackedSample seq = prefix;
        for (std::size_t step = 0; step < max_new; ++step) {
            const auto t = forward(seq, slot_images);
            const T* last = t.logits.row(seq.size() - 1);
            std::size_t best = 0;
            for (std::size_t j = 1; j < t.logits.cols; ++j)
                if (last[j] > last[best]) best = j;
            if (best == Tokenizer::kEos) break;
            out.push_back(static_cast<TokenId>(best));
            seq.push_text(static_cast<TokenId>(best), false);
        }
        return out;
    }

    static std::vector<ImageTensor> bind_images(const PackedSample& s, const ImageProvider& images) {
        std::vector<ImageTensor> out;
        out.reserve(s.slots.size());
        for (const auto& slot : s.slots) {
            if (!images) throw ConfigError("unbound image slot '" + slot.image_id + "' (no image provider)");
            out.push_back(images(slot.image_id));
        }
        return out;
    }

private:
    static std::size_t square_side(std::size_t n) {
        auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
        if (side * side != n || side % 2 != 0)
            throw ConfigError("downsample needs an even square token grid, got " + std::to_string(n) + " tokens");
        return side;
    }

    Mat<T> downsample_scatter(const Mat<T>& dg) const {
        const std::size_t n = cfg_.encoder_tokens(), side = square_side(n), d = cfg_.vision_dim, half = side / 2;
        Mat<T> dx(n, d);
        for (std::size_t r = 0; r < half; ++r)
            for (std::size_t c = 0; c < half; ++c) {
                const T* g = dg.row(r * half + c);
                const std::size_t dst[4] = {(2 * r) * side + 2 * c, (2 * r) * side + 2 * c + 1,
                                            (2 * r + 1) * side + 2 * c, (2 * r + 1) * side + 2 * c + 1};
                for (int q = 0; q < 4; ++q) {
                    T* o = dx.row(dst[q]);
                    for (std::size_t j = 0; j < d; ++j) o[j] += g[q * d + j];
                }
            }
        return dx;
    }

    void build() {
        const std::size_t vd = cfg_.vision_dim, md = cfg_.model_dim, side = cfg_.grid_side();
        patch_ = add_linear(store_, "vision.patch", cfg_.patch_features(), vd);
        pos_row_ = store_.add("vision.pos_row", side, vd, false);
        pos_col_ = store_.add("vision.pos_col", side, vd, false);
        for (std::size_t l = 0; l < cfg_.vision_layers; ++l)
            vblocks_.push_back(add_block(store_, "vision.block" + std::to_string(l), vd, cfg_.resolved_vision_ffn(),
                                         cfg_.resolved_vision_heads(), false));
        vln_ = add_norm(store_, "vision.ln_f", vd);

        std::size_t proj_in = vd;
        if (cfg_.projector.kind == ProjectorKind::TransformerBlock)
            pblock_ = add_block(store_, "projector.block", vd, 4 * vd, cfg_.projector.heads, false);
        if (cfg_.projector.kind == ProjectorKind::Downsample) proj_in = 4 * vd;
        pout_ = add_linear(store_, "projector.out", proj_in, md);

        tok_embed_ = store_.add("embed.tok", cfg_.vocab_size, md, false);
        pos_embed_ = store_.add("embed.pos", cfg_.max_positions, md, false);
        for (std::size_t l = 0; l < cfg_.llm_layers; ++l)
            blocks_.push_back(add_block(store_, "llm.block" + std::to_string(l), md, cfg_.ffn_dim, cfg_.heads, true));
        ln_f_ = add_norm(store_, "llm.ln_f", md);
        head_ = add_linear(store_, "head.out", md, cfg_.vocab_size);
    }

    // Gaussian(0, 0.02 / sqrt(depth)) for affine weights, Gaussian(0, 0.02)
    // for embedding tables, zero biases, unit norm gains. Each tensor draws
    // from its own named stream, so values do not depend on build order.
    void initialize() {
        for (std::size_t i = 0; i < store_.size(); ++i) {
            const auto& info = store_.info(i);
            const bool is_weight = info.name.size() > 2 && info.name.substr(info.name.size() - 2) == ".w";
            const bool is_table = info.name == "embed.tok" || info.name == "embed.pos" ||
                                  info.name == "vision.pos_row" || info.name == "vision.pos_col";
            if (!is_weight && !is_table) continue;
            double std = 0.02;
            if (is_weight) {
                std::size_t depth = 1;
                if (info.group == ParamGroup::Vision) depth = cfg_.vision_layers;
                if (info.group == ParamGroup::Llm || info.group == ParamGroup::Head) depth = cfg_.llm_layers;
                std = 0.02 / std::sqrt(static_cast<double>(std::max<std::size_t>(1, depth)));
            }
            CounterRng rng(derive_seed(cfg_.seed, info.name));
            for (auto& v : store_.values(i)) v = static_cast<T>(std * rng.normal());
        }
    }

    ModelConfig cfg_;
    ParameterStore<T> store_;
    LinearParams patch_;
    std::size_t pos_row_ = 0, pos_col_ = 0;
    std::vector<BlockParams> vblocks_;
    NormParams vln_;
    std::optional<BlockParams> pblock_;
    LinearParams pout_;
    std::size_t tok_embed_ = 0, pos_embed_ = 0;
    std::vector<BlockParams> blocks_;
    NormParams ln_f_;
    LinearParams head_;
};

template <class T>
struct BoundSample {
    const PackedSample* sample;
    std::vector<ImageTensor> images;
};

// Token-weighted mean loss over a batch; gradients accumulate into grads.
// Returns the loss and the number of scored positions.
template <class T>
std::pair<T, std::size_t> batch_loss_and_grads(const Model<T>& model, std::span<const BoundSample<T>> batch,
                                               Gradients<T>& grads) {
    std::size_t total = 0;
    for (const auto& b : batch)
        for (std::size_t i = 1; i < b.sample->size(); ++i) total += b.sample->loss_mask[i] ? 1 : 0;
    if (total == 0) return {T(0), 0};
    T loss = 0;
    for (const auto& b : batch) {
        const auto tgt = next_token_targets(*b.sample);
        const auto trace = model.forward(*b.sample, std::span<const ImageTensor>(b.images));
        auto ce = masked_cross_entropy(trace.logits, std::span<const TokenId>(tgt.targets),
                                       std::span<const std::uint8_t>(tgt.mask), static_cast<T>(total));
        if (ce.count) model.backward(trace, ce.dlogits, grads);
        loss += ce.loss_sum;
    }
    return {loss / static_cast<T>(total), total};
}

}  // namespace vlmforge
