#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vlmforge/common.hpp"

namespace vlmforge {

using TokenId = std::uint32_t;

// Byte-level tokenizer: ids 0..255 are raw bytes, followed by four specials.
// Every UTF-8 (indeed every byte) string round-trips exactly.
class Tokenizer {
public:
    static constexpr TokenId kBos = 256;
    static constexpr TokenId kEos = 257;
    static constexpr TokenId kImg = 258;
    static constexpr TokenId kPad = 259;
    static constexpr std::size_t kVocabSize = 260;

    std::size_t vocab_size() const { return kVocabSize; }

    std::vector<TokenId> encode(std::string_view text) const {
        std::vector<TokenId> ids;
        ids.reserve(text.size());
        for (unsigned char c : text) ids.push_back(c);
        return ids;
    }

    std::size_t count_tokens(std::string_view text) const { return text.size(); }

    static bool is_special(TokenId id) { return id >= 256; }

    // Specials are dropped unless keep_special is set, in which case they render
    // as their bracketed names.
    std::string decode(std::span<const TokenId> ids, bool keep_special = false) const {
        std::string out;
        out.reserve(ids.size());
        for (TokenId id : ids) {
            if (id < 256) {
                out.push_back(static_cast<char>(id));
            } else if (id >= kVocabSize) {
                throw DataError("token id " + std::to_string(id) + " outside vocabulary");
            } else if (keep_special) {
                out += token_string(id);
            }
        }
        return out;
    }

    std::string token_string(TokenId id) const {
        switch (id) {
            case kBos: return "<bos>";
            case kEos: return "<eos>";
            case kImg: return "<img>";
            case kPad: return "<pad>";
            default: break;
        }
        if (id < 256) return std::string(1, static_cast<char>(id));
        throw DataError("token id " + std::to_string(id) + " outside vocabulary");
    }

    // Identifies the vocabulary in shard headers.
    Digest vocab_hash() const {
        Sha256 h;
        h.update("vlmforge-byte-tokenizer/v1;");
        for (TokenId id = 0; id < kVocabSize; ++id) {
            auto s = token_string(id);
            std::uint32_t len = static_cast<std::uint32_t>(s.size());
            h.update(&len, sizeof len);
            h.update(s);
        }
        return h.finish();
    }
};

}  // namespace vlmforge
