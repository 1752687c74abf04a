#include <gtest/gtest.h>

#include <filesystem>

#include "test_support.hpp"
#include "vlmforge/packing.hpp"

using namespace vlmforge;
using namespace vlmforge::testing;

namespace {

const Tokenizer tok;
const ImageGeometry geom4{8, 4, 1};  // 4 tokens per image

PackedSample random_packed(CounterRng& rng) {
    PackedSample s;
    s.stage = rng.below(2) ? StageTag::Sft : StageTag::Pretrain;
    s.push_text(Tokenizer::kBos, false);
    const std::size_t parts = rng.below(6);
    for (std::size_t p = 0; p < parts; ++p) {
        if (rng.below(3) == 0) {
            s.push_image("img/" + std::to_string(rng.next_u64() % 1000), 1 + rng.below(5));
        } else {
            const std::size_t n = rng.below(7);
            for (std::size_t i = 0; i < n; ++i) s.push_text(static_cast<TokenId>(rng.below(Tokenizer::kVocabSize)), rng.below(2));
        }
    }
    return s;
}

}  // namespace

TEST(Tokenizer, RoundTripAndSpecials) {
    const std::string text = "h\xc3\xa9llo, w\xe2\x82\xacrld\n";
    EXPECT_EQ(tok.decode(tok.encode(text)), text);
    EXPECT_EQ(tok.count_tokens(text), text.size());
    std::set<TokenId> specials = {Tokenizer::kBos, Tokenizer::kEos, Tokenizer::kImg, Tokenizer::kPad};
    EXPECT_EQ(specials.size(), 4u);
    for (auto id : specials) {
        EXPECT_TRUE(tok.is_special(id));
        EXPECT_LT(id, Tokenizer::kVocabSize);
    }
}

TEST(TokensPerImage, PaperValues) {
    EXPECT_EQ(tokens_per_image(336, 14, 1), 576u);
    EXPECT_EQ(tokens_per_image(224, 14, 1), 256u);
    EXPECT_EQ(tokens_per_image(336, 14, 2), 144u);
    EXPECT_THROW(tokens_per_image(336, 15, 1), ConfigError);
    EXPECT_THROW(tokens_per_image(42, 14, 2), ConfigError);
    EXPECT_THROW(tokens_per_image(336, 14, 3), ConfigError);
}

TEST(PackDocument, DirectConstruction) {
    InterleavedDocument d;
    d.doc_id = "x";
    d.segments = {ImageSegment{"im1", std::nullopt}, TextSegment{"ab"}};
    const auto out = pack_document(d, tok, geom4, 64);
    ASSERT_EQ(out.size(), 1u);
    const auto& s = out[0];
    const std::vector<TokenId> want = {Tokenizer::kBos, Tokenizer::kImg, Tokenizer::kImg, Tokenizer::kImg,
                                       Tokenizer::kImg, 'a', 'b', Tokenizer::kEos};
    EXPECT_EQ(s.tokens, want);
    EXPECT_EQ(s.loss_mask, (std::vector<std::uint8_t>{0, 0, 0, 0, 0, 1, 1, 1}));
    ASSERT_EQ(s.slots.size(), 1u);
    EXPECT_EQ(s.slots[0], (ImageSlot{1, 4, "im1"}));
    EXPECT_NO_THROW(check_invariants(s, 4));
}

TEST(PackDocument, TextOnly) {
    InterleavedDocument d;
    d.doc_id = "t";
    d.segments = {TextSegment{"hello"}};
    const auto s = pack_document(d, tok, geom4, 64)[0];
    for (auto m : s.modality) EXPECT_EQ(m, Modality::Text);
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(s.loss_mask[i], i == 0 ? 0 : 1);
}

TEST(PackDocument, SplitRoundTripsText) {
    CounterRng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        InterleavedDocument d;
        d.doc_id = "s";
        std::string text;
        for (int k = 0; k < 3; ++k) {
            d.segments.emplace_back(ImageSegment{"im" + std::to_string(k), std::nullopt});
            std::string t;
            for (std::size_t n = 1 + rng.below(30); n; --n) t += static_cast<char>('a' + rng.below(26));
            text += t;
            d.segments.emplace_back(TextSegment{t});
        }
        const std::size_t max_len = 6 + rng.below(40);
        const auto out = pack_document(d, tok, geom4, max_len);
        std::string joined;
        std::size_t images = 0;
        for (const auto& s : out) {
            EXPECT_LE(s.size(), max_len);
            EXPECT_EQ(s.tokens[0], Tokenizer::kBos);
            check_invariants(s, 4);
            joined += detokenize_text(s, tok);
            images += s.image_count();
            std::size_t img_pos = 0;
            for (auto m : s.modality) img_pos += m == Modality::Image;
            EXPECT_EQ(img_pos, s.image_count() * 4);
        }
        EXPECT_EQ(joined, text);
        EXPECT_EQ(images, 3u);
        EXPECT_EQ(out.back().tokens.back(), Tokenizer::kEos);
    }
}

TEST(PackDocument, SlotTooLongForMaxLen) {
    InterleavedDocument d;
    d.doc_id = "x";
    d.segments = {ImageSegment{"im", std::nullopt}};
    EXPECT_THROW(pack_document(d, tok, geom4, 5), ConfigError);
    EXPECT_NO_THROW(pack_document(d, tok, geom4, 6));
}

TEST(PackDocument, ReformatKeepsTokenMultiset) {
    CounterRng rng(19);
    for (int i = 0; i < 100; ++i) {
        const auto d = random_document(rng, 1 + rng.below(8), "m" + std::to_string(i), false);
        auto count = [&](const InterleavedDocument& doc) {
            std::map<TokenId, int> m;
            std::size_t slots = 0;
            for (const auto& s : pack_document(doc, tok, geom4, 1000)) {
                for (std::size_t k = 0; k < s.size(); ++k)
                    if (s.modality[k] == Modality::Text) ++m[s.tokens[k]];
                slots += s.image_count();
            }
            return std::make_pair(m, slots);
        };
        EXPECT_EQ(count(d), count(reformat_images_first(d)));
    }
}

TEST(PackSft, LayoutAndLossPositions) {
    const auto s = pack_sft({std::string("im"), "what?", "x"}, tok, geom4);
    EXPECT_EQ(s.stage, StageTag::Sft);
    std::size_t loss = 0;
    for (auto m : s.loss_mask) loss += m;
    EXPECT_EQ(loss, 2u);
    EXPECT_EQ(s.tokens.back(), Tokenizer::kEos);
    const auto t = pack_sft({std::nullopt, "q", "answer"}, tok, geom4);
    EXPECT_EQ(t.image_count(), 0u);
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t.loss_mask[i], i >= 2 ? 1 : 0);
    EXPECT_THROW(pack_sft({std::nullopt, "", "a"}, tok, geom4), DataError);
}

TEST(PackSft, FuzzLossNeverOnImages) {
    CounterRng rng(1);
    for (int i = 0; i < 1000; ++i) {
        SftDemo d;
        if (rng.below(2)) d.image_id = "im" + std::to_string(i);
        for (std::size_t n = 1 + rng.below(10); n; --n) d.prompt += static_cast<char>(' ' + rng.below(90));
        for (std::size_t n = 1 + rng.below(10); n; --n) d.answer += static_cast<char>(' ' + rng.below(90));
        const auto s = pack_sft(d, tok, geom4);
        for (std::size_t k = 0; k < s.size(); ++k) ASSERT_FALSE(s.loss_mask[k] && s.modality[k] == Modality::Image);
        check_invariants(s, 4);
    }
}

TEST(NextTokenTargets, MaskFollowsTarget) {
    const auto s = mixed_sample(16, 4, 3);
    const auto t = next_token_targets(s);
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        EXPECT_EQ(t.targets[i], s.tokens[i + 1]);
        EXPECT_EQ(t.mask[i], s.loss_mask[i + 1]);
        if (s.modality[i + 1] == Modality::Image) EXPECT_EQ(t.mask[i], 0);
    }
    EXPECT_EQ(t.mask.back(), 0);
}

TEST(Shard, RoundTripThousandSamples) {
    CounterRng rng(42);
    std::vector<PackedSample> samples;
    for (int i = 0; i < 1000; ++i) samples.push_back(random_packed(rng));
    const auto path = std::filesystem::temp_directory_path() / "vlmforge_shard_rt.bin";
    write_shard(samples, path, tok.vocab_hash(), geom4.hash());
    const auto shard = read_shard(path, tok.vocab_hash(), geom4.hash());
    EXPECT_EQ(shard.samples, samples);
    EXPECT_EQ(shard.header.version, kShardVersion);
}

TEST(Shard, TruncationAndGuards) {
    CounterRng rng(43);
    std::vector<PackedSample> samples;
    for (int i = 0; i < 20; ++i) samples.push_back(random_packed(rng));
    const auto path = std::filesystem::temp_directory_path() / "vlmforge_shard_guard.bin";
    write_shard(samples, path, tok.vocab_hash(), geom4.hash());
    const auto bytes = read_file(path);
    try {
        decode_shard(std::string_view(bytes).substr(0, bytes.size() - 7), tok.vocab_hash());
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
    }
    EXPECT_THROW(decode_shard(bytes, sha256("another vocabulary")), DataError);
    EXPECT_THROW(decode_shard(bytes, tok.vocab_hash(), ImageGeometry{16, 4, 1}.hash()), DataError);
    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(decode_shard(bad, tok.vocab_hash()), DataError);
    bad = bytes;
    bad[8] = 9;  // version
    EXPECT_THROW(decode_shard(bad, tok.vocab_hash()), DataError);
}
