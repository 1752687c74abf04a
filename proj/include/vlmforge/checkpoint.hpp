#pragma once

// Checkpoint file: "VLMCKPT\0", u32 version, u32 header length, header JSON
// ({"config": ModelConfig, "extra": ...}), u32 array count, then per array
// u32 name length, name, u64 element count, little-endian f32 values.

#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vlmforge/common.hpp"
#include "vlmforge/model.hpp"

namespace vlmforge {

inline constexpr char kCheckpointMagic[8] = {'V', 'L', 'M', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
    std::string name;
    std::vector<float> values;
};

struct CheckpointData {
    ModelConfig config;
    nlohmann::json extra = nlohmann::json::object();
    std::vector<NamedArray> arrays;

    const NamedArray* find(const std::string& name) const {
        for (const auto& a : arrays)
            if (a.name == name) return &a;
        return nullptr;
    }
};

template <class T>
std::vector<NamedArray> model_arrays(const Model<T>& m) {
    std::vector<NamedArray> out;
    const auto& ps = m.params();
    for (std::size_t i = 0; i < ps.size(); ++i)
        out.push_back({ps.info(i).name, std::vector<float>(ps.values(i).begin(), ps.values(i).end())});
    return out;
}

inline std::string encode_checkpoint(const CheckpointData& ck) {
    std::string out(kCheckpointMagic, 8);
    auto put32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    };
    auto put64 = [&](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    };
    const std::string header = nlohmann::json{{"config", to_json(ck.config)}, {"extra", ck.extra}}.dump();
    put32(kCheckpointVersion);
    put32(static_cast<std::uint32_t>(header.size()));
    out += header;
    put32(static_cast<std::uint32_t>(ck.arrays.size()));
    for (const auto& a : ck.arrays) {
        put32(static_cast<std::uint32_t>(a.name.size()));
        out += a.name;
        put64(a.values.size());
        for (float f : a.values) {
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put32(bits);
        }
    }
    return out;
}

inline CheckpointData decode_checkpoint(std::string_view bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    std::size_t off = 0;
    auto need = [&](std::size_t n) {
        if (off + n > bytes.size()) throw DataError("checkpoint truncated at byte offset " + std::to_string(bytes.size()));
    };
    auto get32 = [&] {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[off + i]) << (8 * i);
        off += 4;
        return v;
    };
    auto get64 = [&] {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[off + i]) << (8 * i);
        off += 8;
        return v;
    };
    need(8);
    if (std::memcmp(p, kCheckpointMagic, 8) != 0) throw DataError("not a checkpoint file (bad magic)");
    off = 8;
    if (auto v = get32(); v != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(v));
    const std::size_t hlen = get32();
    need(hlen);
    CheckpointData ck;
    try {
        const auto header = nlohmann::json::parse(bytes.substr(off, hlen));
        ck.config = model_config_from_json(header.at("config"));
        if (header.contains("extra")) ck.extra = header["extra"];
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint header: ") + e.what());
    }
    off += hlen;
    const std::size_t n = get32();
    for (std::size_t k = 0; k < n; ++k) {
        NamedArray a;
        const std::size_t name_len = get32();
        need(name_len);
        a.name.assign(bytes.substr(off, name_len));
        off += name_len;
        const std::uint64_t count = get64();
        if (count > (bytes.size() - off) / 4) throw DataError("checkpoint truncated in array '" + a.name + "'");
        a.values.resize(count);
        for (auto& f : a.values) {
            const std::uint32_t bits = get32();
            std::memcpy(&f, &bits, 4);
        }
        ck.arrays.push_back(std::move(a));
    }
    if (off != bytes.size()) throw DataError("trailing bytes after checkpoint arrays");
    return ck;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& m, nlohmann::json extra = nlohmann::json::object(),
                     std::vector<NamedArray> more = {}) {
    CheckpointData ck{m.config(), std::move(extra), model_arrays(m)};
    for (auto& a : more) ck.arrays.push_back(std::move(a));
    write_file_atomic(path, encode_checkpoint(ck));
}

inline CheckpointData load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

// Copies stored parameters into m; refuses when the stored config differs.
template <class T>
void load_into(Model<T>& m, const CheckpointData& ck) {
    if (!(ck.config == m.config()))
        throw DataError("checkpoint config " + to_json(ck.config).dump() + " does not match model config " +
                        to_json(m.config()).dump());
    auto& ps = m.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto* a = ck.find(ps.info(i).name);
        if (!a) throw DataError("checkpoint lacks parameter '" + ps.info(i).name + "'");
        if (a->values.size() != ps.values(i).size())
            throw DataError("checkpoint parameter '" + ps.info(i).name + "' has wrong size");
        std::copy(a->values.begin(), a->values.end(), ps.values(i).begin());
    }
}

template <class T>
Model<T> load_model(const std::filesystem::path& path) {
    const auto ck = load_checkpoint(path);
    Model<T> m(ck.config);
    load_into(m, ck);
    return m;
}

}  // namespace vlmforge
