// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Binary containers. All integers and floats are little-endian; tensors are
// stored at their in-memory precision with a width byte. Every file ends
// with an FNV-1a checksum of the preceding bytes, and loads parse a fully
// read buffer so a truncated or corrupt file never yields a partial object.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "kvchain/model.hpp"
#include "kvchain/prompt.hpp"

namespace kvchain {

inline constexpr std::uint32_t kCheckpointMagic = 0x4B434B56;  // "VKCK"
inline constexpr std::uint32_t kCacheMagic = 0x43434B56;       // "VKCC"
inline constexpr std::uint32_t kFormatVersion = 3;

enum class CheckpointKind : std::uint32_t { kModel = 0, kPrompt = 1 };

namespace io {

inline std::uint64_t fnv1a(const std::uint8_t* data, std::size_t n) {
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 1099511628211ull;
    }
    return h;
}

class Writer {
public:
    template <typename U>
    void put(U v) {
        static_assert(std::is_trivially_copyable_v<U>);
        std::uint8_t bytes[sizeof(U)];
        std::memcpy(bytes, &v, sizeof(U));
        if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
        m_buf.insert(m_buf.end(), bytes, bytes + sizeof(U));
    }

    void put_string(const std::string& s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        m_buf.insert(m_buf.end(), s.begin(), s.end());
    }

    /// Scalar width byte (4 or 8) followed by the values in that width, so a
    /// 64-bit tensor round-trips exactly.
    template <typename T>
    void put_floats(const Tensor<T>& t) {
        static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
        put<std::uint8_t>(sizeof(T));
        for (T v : t.values()) put<T>(v);
    }

    void finish_and_write(const std::filesystem::path& path) {
        put<std::uint64_t>(fnv1a(m_buf.data(), m_buf.size()));
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        const std::filesystem::path tmp = path.string() + ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            KVCHAIN_CHECK(out.good(), ErrorCode::kIo, "cannot open ", tmp.string(), " for writing");
            out.write(reinterpret_cast<const char*>(m_buf.data()), static_cast<std::streamsize>(m_buf.size()));
            KVCHAIN_CHECK(out.good(), ErrorCode::kIo, "write failed for ", tmp.string());
        }
        std::filesystem::rename(tmp, path);
    }

private:
    std::vector<std::uint8_t> m_buf;
};

class Reader {
public:
    static Reader from_file(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        KVCHAIN_CHECK(in.good(), ErrorCode::kIo, "cannot open ", path.string());
        std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        KVCHAIN_CHECK(buf.size() >= 8, ErrorCode::kCorrupt, path.string(), ": file too short");
        std::uint64_t stored = 0;
        std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
        if constexpr (std::endian::native == std::endian::big) {
            std::uint64_t swapped = 0;
            for (int i = 0; i < 8; ++i) swapped = (swapped << 8) | ((stored >> (8 * i)) & 0xffu);
            stored = swapped;
        }
        KVCHAIN_CHECK(stored == fnv1a(buf.data(), buf.size() - 8), ErrorCode::kCorrupt, path.string(),
                      ": checksum mismatch (truncated or corrupt)");
        buf.resize(buf.size() - 8);
        return Reader(std::move(buf), path.string());
    }

    template <typename U>
    U get() {
        need(sizeof(U));
        std::uint8_t bytes[sizeof(U)];
        std::memcpy(bytes, m_buf.data() + m_at, sizeof(U));
        if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
        m_at += sizeof(U);
        U v;
        std::memcpy(&v, bytes, sizeof(U));
        return v;
    }

    std::string get_string() {
        const auto n = get<std::uint32_t>();
        need(n);
        std::string s(reinterpret_cast<const char*>(m_buf.data() + m_at), n);
        m_at += n;
        return s;
    }

    template <typename T>
    void get_floats(Tensor<T>& t) {
        const auto width = get<std::uint8_t>();
        KVCHAIN_CHECK(width == 4 || width == 8, ErrorCode::kCorrupt, m_source, ": bad scalar width ", int(width));
        need(t.size() * width);
        if (width == 4) {
            for (T& v : t.values()) v = static_cast<T>(get<float>());
        } else {
            for (T& v : t.values()) v = static_cast<T>(get<double>());
        }
    }

    bool at_end() const noexcept { return m_at == m_buf.size(); }
    const std::string& source() const noexcept { return m_source; }

private:
    Reader(std::vector<std::uint8_t> buf, std::string source) : m_buf(std::move(buf)), m_source(std::move(source)) {}

    void need(std::size_t n) const {
        KVCHAIN_CHECK(m_at + n <= m_buf.size(), ErrorCode::kCorrupt, m_source, ": unexpected end of data");
    }

    std::vector<std::uint8_t> m_buf;
    std::size_t m_at = 0;
    std::string m_source;
};

inline void put_config(Writer& w, const ModelConfig& c) {
    for (std::size_t v : {c.d_model, c.n_layers, c.n_heads, c.head_dim, c.ffn_dim, c.vocab_size, c.max_seq}) {
        w.put<std::uint64_t>(v);
    }
    w.put<std::uint64_t>(std::bit_cast<std::uint64_t>(c.rope_base));
    w.put<std::uint64_t>(std::bit_cast<std::uint64_t>(c.norm_eps));
}

inline ModelConfig get_config(Reader& r) {
    ModelConfig c;
    for (std::size_t* f : {&c.d_model, &c.n_layers, &c.n_heads, &c.head_dim, &c.ffn_dim, &c.vocab_size, &c.max_seq}) {
        *f = static_cast<std::size_t>(r.get<std::uint64_t>());
    }
    c.rope_base = std::bit_cast<double>(r.get<std::uint64_t>());
    c.norm_eps = std::bit_cast<double>(r.get<std::uint64_t>());
    try {
        c.validate();
    } catch (const Error& e) {
        detail::fail(ErrorCode::kCorrupt, r.source(), ": ", e.what());
    }
    return c;
}

inline void put_header(Writer& w, std::uint32_t magic, CheckpointKind kind) {
    w.put<std::uint32_t>(magic);
    w.put<std::uint32_t>(kFormatVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(kind));
}

inline void expect_header(Reader& r, std::uint32_t magic, CheckpointKind kind) {
    KVCHAIN_CHECK(r.get<std::uint32_t>() == magic, ErrorCode::kCorrupt, r.source(), ": bad magic");
    const auto version = r.get<std::uint32_t>();
    KVCHAIN_CHECK(version == kFormatVersion, ErrorCode::kCorrupt, r.source(), ": unsupported version ", version);
    KVCHAIN_CHECK(r.get<std::uint32_t>() == static_cast<std::uint32_t>(kind), ErrorCode::kCorrupt, r.source(),
                  ": wrong checkpoint kind");
}

template <typename T>
void put_tensor(Writer& w, const std::string& name, const Tensor<T>& t) {
    w.put_string(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put<std::uint64_t>(d);
    w.put_floats(t);
}

template <typename T>
void get_tensor(Reader& r, const std::string& expected_name, Tensor<T>& t) {
    const std::string name = r.get_string();
    KVCHAIN_CHECK(name == expected_name, ErrorCode::kCorrupt, r.source(), ": expected tensor '", expected_name,
                  "', found '", name, "'");
    const auto rank = r.get<std::uint32_t>();
    KVCHAIN_CHECK(rank <= 4, ErrorCode::kCorrupt, r.source(), ": implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    KVCHAIN_CHECK(t.empty() || shape == t.shape(), ErrorCode::kCorrupt, r.source(), ": tensor '", name,
                  "' has shape ", shape_str(shape), ", expected ", shape_str(t.shape()));
    KVCHAIN_CHECK(shape_numel(shape) < (1ull << 32), ErrorCode::kCorrupt, r.source(), ": implausible tensor size");
    t = Tensor<T>(shape);
    r.get_floats(t);
}

}  // namespace io

template <typename T>
void save_model(const ModelWeights<T>& w, const std::filesystem::path& path) {
    io::Writer wr;
    io::put_header(wr, kCheckpointMagic, CheckpointKind::kModel);
    io::put_config(wr, w.config);
    std::uint32_t count = 0;
    w.for_each_tensor([&count](const std::string&, const Tensor<T>&) { ++count; });
    wr.put<std::uint32_t>(count);
    w.for_each_tensor([&wr](const std::string& name, const Tensor<T>& t) { io::put_tensor(wr, name, t); });
    wr.finish_and_write(path);
}

template <typename T>
ModelWeights<T> load_model(const std::filesystem::path& path) {
    io::Reader r = io::Reader::from_file(path);
    io::expect_header(r, kCheckpointMagic, CheckpointKind::kModel);
    const ModelConfig config = io::get_config(r);
    ModelWeights<T> w = ModelWeights<T>::init(config, 0);
    std::uint32_t expected = 0;
    w.for_each_tensor([&expected](const std::string&, Tensor<T>&) { ++expected; });
    KVCHAIN_CHECK(r.get<std::uint32_t>() == expected, ErrorCode::kCorrupt, r.source(), ": tensor count mismatch");
    w.for_each_tensor([&r](const std::string& name, Tensor<T>& t) { io::get_tensor(r, name, t); });
    KVCHAIN_CHECK(r.at_end(), ErrorCode::kCorrupt, r.source(), ": trailing bytes");
    return w;
}

/// Prompt checkpoint: same container, with model id, prompt length and the
/// trained flag in the header. The config identifies the base it belongs to.
template <typename T>
void save_prompt(const PromptParams<T>& p, const ModelConfig& config, const std::filesystem::path& path) {
    io::Writer wr;
    io::put_header(wr, kCheckpointMagic, CheckpointKind::kPrompt);
    io::put_config(wr, config);
    wr.put<std::int32_t>(p.model_id);
    wr.put<std::uint32_t>(static_cast<std::uint32_t>(p.n_tokens()));
    wr.put<std::uint32_t>(p.trained ? 1u : 0u);
    wr.put<std::uint32_t>(1);
    io::put_tensor(wr, "prompt", p.embeddings);
    wr.finish_and_write(path);
}

template <typename T>
PromptParams<T> load_prompt(const std::filesystem::path& path, ModelConfig* config_out = nullptr) {
    io::Reader r = io::Reader::from_file(path);
    io::expect_header(r, kCheckpointMagic, CheckpointKind::kPrompt);
    const ModelConfig config = io::get_config(r);
    PromptParams<T> p;
    p.model_id = r.get<std::int32_t>();
    const auto n_tokens = r.get<std::uint32_t>();
    p.trained = r.get<std::uint32_t>() != 0;
    KVCHAIN_CHECK(r.get<std::uint32_t>() == 1, ErrorCode::kCorrupt, r.source(), ": tensor count mismatch");
    p.embeddings = Tensor<T>({n_tokens, config.d_model});
    io::get_tensor(r, "prompt", p.embeddings);
    KVCHAIN_CHECK(r.at_end(), ErrorCode::kCorrupt, r.source(), ": trailing bytes");
    if (config_out) *config_out = config;
    return p;
}

/// Cache file: header (config hash, entry count, layers, width, next
/// position), per-layer K then V blocks, then per-entry metadata
/// (position u32, role tag u8, model id u8; 255 = no model).
template <typename T>
void save_cache(const KvCache<T>& cache, const std::filesystem::path& path) {
    io::Writer wr;
    wr.put<std::uint32_t>(kCacheMagic);
    wr.put<std::uint32_t>(kFormatVersion);
    wr.put<std::uint64_t>(cache.config_hash());
    wr.put<std::uint64_t>(cache.size());
    wr.put<std::uint32_t>(static_cast<std::uint32_t>(cache.n_layers()));
    wr.put<std::uint32_t>(static_cast<std::uint32_t>(cache.width()));
    wr.put<std::int64_t>(cache.next_position());
    for (std::size_t l = 0; l < cache.n_layers(); ++l) {
        wr.put_floats(cache.keys(l));
        wr.put_floats(cache.values(l));
    }
    for (const CacheEntryMeta& m : cache.meta()) {
        KVCHAIN_CHECK(m.position >= 0 && m.position <= 0xffffffffll, ErrorCode::kInvalidArgument,
                      "cache position does not fit u32");
        wr.put<std::uint32_t>(static_cast<std::uint32_t>(m.position));
        wr.put<std::uint8_t>(static_cast<std::uint8_t>(m.role.kind));
        wr.put<std::uint8_t>(m.role.model < 0 ? 255 : static_cast<std::uint8_t>(m.role.model));
    }
    wr.finish_and_write(path);
}

/// Loads a cache; when `expected_config_hash` is nonzero a mismatch is an error.
template <typename T>
KvCache<T> load_cache(const std::filesystem::path& path, std::uint64_t expected_config_hash = 0) {
    io::Reader r = io::Reader::from_file(path);
    KVCHAIN_CHECK(r.get<std::uint32_t>() == kCacheMagic, ErrorCode::kCorrupt, r.source(), ": bad magic");
    const auto version = r.get<std::uint32_t>();
    KVCHAIN_CHECK(version == kFormatVersion, ErrorCode::kCorrupt, r.source(), ": unsupported version ", version);
    const auto hash = r.get<std::uint64_t>();
    KVCHAIN_CHECK(expected_config_hash == 0 || hash == expected_config_hash, ErrorCode::kCorrupt, r.source(),
                  ": config hash mismatch");
    const auto count = r.get<std::uint64_t>();
    const auto n_layers = r.get<std::uint32_t>();
    const auto width = r.get<std::uint32_t>();
    const auto next_position = r.get<std::int64_t>();
    KVCHAIN_CHECK(n_layers > 0 && n_layers < 1024 && width > 0 && count < (1ull << 24), ErrorCode::kCorrupt,
                  r.source(), ": implausible header");
    std::vector<Tensor<T>> keys, values;
    for (std::uint32_t l = 0; l < n_layers; ++l) {
        Tensor<T> k({static_cast<std::size_t>(count), width});
        Tensor<T> v({static_cast<std::size_t>(count), width});
        r.get_floats(k);
        r.get_floats(v);
        keys.push_back(std::move(k));
        values.push_back(std::move(v));
    }
    std::vector<CacheEntryMeta> meta(count);
    for (CacheEntryMeta& m : meta) {
        m.position = r.get<std::uint32_t>();
        const auto tag = r.get<std::uint8_t>();
        const auto model = r.get<std::uint8_t>();
        KVCHAIN_CHECK(tag <= 3, ErrorCode::kCorrupt, r.source(), ": bad role tag");
        m.role = {static_cast<SegmentRole::Kind>(tag), model == 255 ? -1 : static_cast<int>(model)};
    }
    KVCHAIN_CHECK(r.at_end(), ErrorCode::kCorrupt, r.source(), ": trailing bytes");
    return KvCache<T>::from_parts(std::move(keys), std::move(values), std::move(meta), next_position, hash);
}

}  // namespace kvchain
