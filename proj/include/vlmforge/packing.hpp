#pragma once

// Token-level packing of documents and instruction demos, plus the binary
// shard format that carries packed samples to the trainer.

#include <cstdint>
#include <cstring>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vlmforge/common.hpp"
#include "vlmforge/corpus.hpp"
#include "vlmforge/tokenizer.hpp"

namespace vlmforge {

inline std::size_t tokens_per_image(std::size_t resolution, std::size_t patch, std::size_t downsample) {
    if (patch == 0 || resolution == 0) throw ConfigError("resolution and patch must be positive");
    if (downsample != 1 && downsample != 2) throw ConfigError("downsample factor must be 1 or 2");
    if (resolution % patch != 0)
        throw ConfigError("patch " + std::to_string(patch) + " does not divide resolution " + std::to_string(resolution));
    const std::size_t side = resolution / patch;
    if (side % downsample != 0)
        throw ConfigError("downsample " + std::to_string(downsample) + " does not divide the " + std::to_string(side) +
                          "-token grid side");
    const std::size_t out_side = side / downsample;
    return out_side * out_side;
}

struct ImageGeometry {
    std::size_t resolution = 336;
    std::size_t patch = 14;
    std::size_t downsample = 1;

    std::size_t slot_length() const { return tokens_per_image(resolution, patch, downsample); }

    Digest hash() const {
        return sha256("vlmforge-geometry/v1;resolution=" + std::to_string(resolution) +
                      ";patch=" + std::to_string(patch) + ";downsample=" + std::to_string(downsample));
    }
    bool operator==(const ImageGeometry&) const = default;
};

// Pixel grid in [0, 1], row-major H x W x C.
struct ImageTensor {
    std::string image_id;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 3;
    std::vector<float> pixels;

    float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

using ImageProvider = std::function<ImageTensor(const std::string& image_id)>;

enum class Modality : std::uint8_t { Text = 0, Image = 1 };
enum class StageTag : std::uint8_t { Pretrain = 0, Sft = 1 };

struct ImageSlot {
    std::uint32_t start = 0;
    std::uint32_t length = 0;
    std::string image_id;
    bool operator==(const ImageSlot&) const = default;
};

struct PackedSample {
    std::vector<TokenId> tokens;
    std::vector<Modality> modality;
    std::vector<std::uint8_t> loss_mask;
    std::vector<ImageSlot> slots;
    StageTag stage = StageTag::Pretrain;

    std::size_t size() const { return tokens.size(); }
    std::size_t image_count() const { return slots.size(); }
    bool operator==(const PackedSample&) const = default;

    void push_text(TokenId id, bool loss) {
        tokens.push_back(id);
        modality.push_back(Modality::Text);
        loss_mask.push_back(loss ? 1 : 0);
    }
    void push_image(const std::string& image_id, std::size_t length) {
        slots.push_back({static_cast<std::uint32_t>(tokens.size()), static_cast<std::uint32_t>(length), image_id});
        for (std::size_t i = 0; i < length; ++i) {
            tokens.push_back(Tokenizer::kImg);
            modality.push_back(Modality::Image);
            loss_mask.push_back(0);
        }
    }
};

// Throws DataError if the sample violates its structural invariants.
inline void check_invariants(const PackedSample& s, std::optional<std::size_t> slot_length = std::nullopt) {
    const std::size_t n = s.tokens.size();
    if (s.modality.size() != n || s.loss_mask.size() != n) throw DataError("packed sample: array lengths differ");
    std::vector<int> cover(n, 0);
    for (const auto& slot : s.slots) {
        if (static_cast<std::size_t>(slot.start) + slot.length > n) throw DataError("packed sample: slot out of bounds");
        if (slot_length && slot.length != *slot_length) throw DataError("packed sample: slot length mismatch");
        for (std::size_t i = slot.start; i < slot.start + slot.length; ++i) ++cover[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
        const bool img = s.modality[i] == Modality::Image;
        if (img && s.tokens[i] != Tokenizer::kImg) throw DataError("packed sample: IMAGE position without IMG id");
        if (img != (cover[i] == 1) || cover[i] > 1) throw DataError("packed sample: slot coverage mismatch");
        if (s.loss_mask[i] && (img || i == 0)) throw DataError("packed sample: loss on IMAGE or initial position");
    }
}

// Expands a document into one or more samples of at most max_len tokens.
// Every sample starts with BOS; EOS closes the document. Splits happen at
// segment boundaries; a text segment longer than a whole sample is cut at byte
// granularity, an image slot never is.
inline std::vector<PackedSample> pack_document(const InterleavedDocument& doc, const Tokenizer& tok,
                                               const ImageGeometry& geom, std::size_t max_len,
                                               StageTag stage = StageTag::Pretrain) {
    const std::size_t slot = doc.image_count() ? geom.slot_length() : 0;
    if (max_len < 2) throw ConfigError("max_len must be at least 2");
    if (doc.image_count() && slot + 2 > max_len)
        throw ConfigError("image slot of " + std::to_string(slot) + " tokens does not fit max_len " +
                          std::to_string(max_len));

    std::vector<PackedSample> out;
    PackedSample cur;
    auto begin = [&] {
        cur = PackedSample{};
        cur.stage = stage;
        cur.push_text(Tokenizer::kBos, false);
    };
    auto flush = [&] {
        out.push_back(std::move(cur));
        begin();
    };
    begin();

    for (const auto& seg : doc.segments) {
        if (const auto* im = std::get_if<ImageSegment>(&seg)) {
            if (cur.size() + slot > max_len) flush();
            cur.push_image(im->image_id, slot);
            continue;
        }
        const auto ids = tok.encode(std::get<TextSegment>(seg).text);
        if (cur.size() + ids.size() > max_len && cur.size() > 1) flush();
        for (TokenId id : ids) {
            if (cur.size() == max_len) flush();
            cur.push_text(id, true);
        }
    }
    if (cur.size() + 1 > max_len) flush();
    cur.push_text(Tokenizer::kEos, true);
    out.push_back(std::move(cur));
    return out;
}

struct SftDemo {
    std::optional<std::string> image_id;
    std::string prompt;
    std::string answer;
};

inline nlohmann::json to_json(const SftDemo& d) {
    nlohmann::json j = {{"prompt", d.prompt}, {"answer", d.answer}};
    if (d.image_id) j["image_id"] = *d.image_id;
    return j;
}

inline SftDemo sft_from_json(const nlohmann::json& j) {
    SftDemo d;
    if (j.contains("image_id") && !j["image_id"].is_null()) d.image_id = j["image_id"].get<std::string>();
    d.prompt = j.at("prompt").get<std::string>();
    d.answer = j.at("answer").get<std::string>();
    return d;
}

inline ParseResult<SftDemo> read_sft(const std::filesystem::path& path, const ParseOptions& opts = {}) {
    auto in = open_input(path);
    ParseResult<SftDemo> r;
    r.summary = detail::for_each_line(in, opts, [&](const nlohmann::json& j, ParseSummary& s) {
        r.records.push_back(sft_from_json(j));
        ++s.records;
    });
    return r;
}

// [BOS, image slot?, prompt, answer, EOS]; loss only on answer and EOS.
inline PackedSample pack_sft(const SftDemo& demo, const Tokenizer& tok, const ImageGeometry& geom) {
    if (demo.prompt.empty()) throw DataError("instruction demo has empty prompt");
    if (demo.answer.empty()) throw DataError("instruction demo has empty answer");
    PackedSample s;
    s.stage = StageTag::Sft;
    s.push_text(Tokenizer::kBos, false);
    if (demo.image_id) s.push_image(*demo.image_id, geom.slot_length());
    for (TokenId id : tok.encode(demo.prompt)) s.push_text(id, false);
    for (TokenId id : tok.encode(demo.answer)) s.push_text(id, true);
    s.push_text(Tokenizer::kEos, true);
    return s;
}

// Text carried by TEXT positions, specials removed.
inline std::string detokenize_text(const PackedSample& s, const Tokenizer& tok) {
    std::vector<TokenId> ids;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (s.modality[i] == Modality::Text) ids.push_back(s.tokens[i]);
    return tok.decode(ids);
}

// Next-token view of a sample: targets[i] = tokens[i + 1], weighted by
// loss_mask[i + 1]. The last position has no target.
struct NextTokenTargets {
    std::vector<TokenId> targets;
    std::vector<std::uint8_t> mask;
};

inline NextTokenTargets next_token_targets(const PackedSample& s) {
    NextTokenTargets t;
    const std::size_t n = s.size();
    t.targets.assign(n, Tokenizer::kPad);
    t.mask.assign(n, 0);
    for (std::size_t i = 0; i + 1 < n; ++i) {
        t.targets[i] = s.tokens[i + 1];
        t.mask[i] = s.loss_mask[i + 1];
    }
    return t;
}

// ---------------------------------------------------------------------------
// Shards
//
// Layout (little-endian): "VLMSHARD", u32 version, 32-byte vocab hash,
// 32-byte geometry hash, then records of u32 byte-length followed by
//   u32 L, u32 tokens[L], u8 modality[L], u8 loss_mask[L], u8 stage,
//   u32 slot count, then per slot u32 start, u32 length, u32 id bytes, id.

inline constexpr char kShardMagic[8] = {'V', 'L', 'M', 'S', 'H', 'A', 'R', 'D'};
inline constexpr std::uint32_t kShardVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::string encode_record(const PackedSample& s) {
    std::string body;
    const auto n = static_cast<std::uint32_t>(s.size());
    detail::put_u32(body, n);
    for (TokenId t : s.tokens) detail::put_u32(body, t);
    for (Modality m : s.modality) body.push_back(static_cast<char>(m));
    for (std::uint8_t b : s.loss_mask) body.push_back(static_cast<char>(b));
    body.push_back(static_cast<char>(s.stage));
    detail::put_u32(body, static_cast<std::uint32_t>(s.slots.size()));
    for (const auto& slot : s.slots) {
        detail::put_u32(body, slot.start);
        detail::put_u32(body, slot.length);
        detail::put_u32(body, static_cast<std::uint32_t>(slot.image_id.size()));
        body += slot.image_id;
    }
    std::string rec;
    detail::put_u32(rec, static_cast<std::uint32_t>(body.size()));
    return rec + body;
}

class ShardWriter {
public:
    ShardWriter(const std::filesystem::path& path, const Digest& vocab_hash, const Digest& cfg_hash)
        : path_(path), tmp_(path.string() + ".tmp"), out_(tmp_, std::ios::binary | std::ios::trunc) {
        if (!out_) throw DataError("cannot write " + tmp_.string());
        std::string header(kShardMagic, 8);
        detail::put_u32(header, kShardVersion);
        header.append(reinterpret_cast<const char*>(vocab_hash.data()), vocab_hash.size());
        header.append(reinterpret_cast<const char*>(cfg_hash.data()), cfg_hash.size());
        out_.write(header.data(), static_cast<std::streamsize>(header.size()));
    }

    void write(const PackedSample& s) {
        const auto rec = encode_record(s);
        out_.write(rec.data(), static_cast<std::streamsize>(rec.size()));
        ++count_;
    }

    std::size_t count() const { return count_; }

    void close() {
        if (closed_) return;
        out_.close();
        if (!out_) throw DataError("write failed: " + tmp_.string());
        std::filesystem::rename(tmp_, path_);
        closed_ = true;
    }

    ~ShardWriter() {
        if (!closed_) {
            out_.close();
            std::error_code ec;
            std::filesystem::remove(tmp_, ec);
        }
    }

private:
    std::filesystem::path path_;
    std::filesystem::path tmp_;
    std::ofstream out_;
    std::size_t count_ = 0;
    bool closed_ = false;
};

template <class Range>
void write_shard(const Range& samples, const std::filesystem::path& path, const Digest& vocab_hash,
                 const Digest& cfg_hash) {
    ShardWriter w(path, vocab_hash, cfg_hash);
    for (const auto& s : samples) w.write(s);
    w.close();
}

struct ShardHeader {
    std::uint32_t version = 0;
    Digest vocab_hash{};
    Digest cfg_hash{};
};

struct Shard {
    ShardHeader header;
    std::vector<PackedSample> samples;
};

// Refuses to load on bad magic/version, a vocab hash other than
// expected_vocab, or (when given) a geometry hash other than expected_cfg.
inline Shard decode_shard(std::string_view bytes, const Digest& expected_vocab,
                          const std::optional<Digest>& expected_cfg = std::nullopt) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::size_t size = bytes.size();
    constexpr std::size_t header_size = 8 + 4 + 32 + 32;
    if (size < header_size) throw DataError("shard truncated in header at byte offset " + std::to_string(size));
    if (std::memcmp(p, kShardMagic, 8) != 0) throw DataError("not a shard file (bad magic)");
    Shard shard;
    shard.header.version = detail::get_u32(p + 8);
    if (shard.header.version != kShardVersion)
        throw DataError("unsupported shard version " + std::to_string(shard.header.version));
    std::memcpy(shard.header.vocab_hash.data(), p + 12, 32);
    std::memcpy(shard.header.cfg_hash.data(), p + 44, 32);
    if (shard.header.vocab_hash != expected_vocab)
        throw DataError("shard vocab hash " + to_hex(shard.header.vocab_hash) + " does not match tokenizer " +
                        to_hex(expected_vocab));
    if (expected_cfg && shard.header.cfg_hash != *expected_cfg)
        throw DataError("shard config hash " + to_hex(shard.header.cfg_hash) + " does not match " + to_hex(*expected_cfg));

    std::size_t off = header_size;
    auto need = [&](std::size_t at, std::size_t n, std::size_t end) {
        if (at + n > end) throw DataError("shard truncated at byte offset " + std::to_string(std::min(end, size)));
    };
    while (off < size) {
        need(off, 4, size);
        const std::size_t len = detail::get_u32(p + off);
        const std::size_t rec_start = off;
        off += 4;
        need(off, len, size);
        const std::size_t end = off + len;
        auto bad = [&](const char* what) {
            return DataError(std::string("corrupt shard record at byte offset ") + std::to_string(rec_start) + ": " + what);
        };
        PackedSample s;
        need(off, 4, end);
        const std::size_t n = detail::get_u32(p + off);
        off += 4;
        if (n > len) throw bad("length field exceeds record");
        need(off, n * 6 + 5, end);
        s.tokens.resize(n);
        s.modality.resize(n);
        s.loss_mask.resize(n);
        for (std::size_t i = 0; i < n; ++i, off += 4) s.tokens[i] = detail::get_u32(p + off);
        for (std::size_t i = 0; i < n; ++i, ++off) {
            if (p[off] > 1) throw bad("invalid modality flag");
            s.modality[i] = static_cast<Modality>(p[off]);
        }
        for (std::size_t i = 0; i < n; ++i, ++off) s.loss_mask[i] = p[off];
        if (p[off] > 1) throw bad("invalid stage tag");
        s.stage = static_cast<StageTag>(p[off++]);
        const std::size_t nslots = detail::get_u32(p + off);
        off += 4;
        for (std::size_t k = 0; k < nslots; ++k) {
            need(off, 12, end);
            ImageSlot slot;
            slot.start = detail::get_u32(p + off);
            slot.length = detail::get_u32(p + off + 4);
            const std::size_t id_len = detail::get_u32(p + off + 8);
            off += 12;
            need(off, id_len, end);
            slot.image_id.assign(reinterpret_cast<const char*>(p + off), id_len);
            off += id_len;
            s.slots.push_back(std::move(slot));
        }
        if (off != end) throw bad("trailing bytes");
        shard.samples.push_back(std::move(s));
    }
    return shard;
}

inline Shard read_shard(const std::filesystem::path& path, const Digest& expected_vocab,
                        const std::optional<Digest>& expected_cfg = std::nullopt) {
    return decode_shard(read_file(path), expected_vocab, expected_cfg);
}

}  // namespace vlmforge
