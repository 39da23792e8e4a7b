// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>

#include "test_util.hpp"

namespace kvchain {
namespace {

using namespace kvchain::testing;
namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "kvchain_test_serialize";
    fs::create_directories(dir);
    return dir / name;
}

std::vector<char> read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<char>& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), std::streamsize(bytes.size()));
}

template <typename T>
KvCache<T> sample_cache(const ModelWeights<T>& w) {
    auto cache = KvCache<T>::for_config(w.config);
    std::vector<int> tokens{3, 16, 6, 8, 8, 2, 40};
    SegmentLayout l(0);
    l.append(SegmentRole::shared(), 3).append(SegmentRole::prompt(0), 2).append(SegmentRole::output(0), 2);
    prefill(w, embed_tokens(w, std::span<const int>(tokens)), l, cache);
    cache.set_next_position(9);
    return cache;
}

template <typename T>
class Serialize : public ::testing::Test {};
TYPED_TEST_SUITE(Serialize, Precisions);

TYPED_TEST(Serialize, ModelRoundTripIsBitwise) {
    using T = TypeParam;
    const auto w = ModelWeights<T>::init(tiny_config(), 5);
    const auto p = scratch("model.bin");
    save_model(w, p);
    EXPECT_TRUE(load_model<T>(p) == w);
}

TYPED_TEST(Serialize, PromptRoundTrip) {
    using T = TypeParam;
    auto prompt = PromptParams<T>::init(1, 4, tiny_config().d_model, 9);
    prompt.trained = true;
    const auto p = scratch("prompt.bin");
    save_prompt(prompt, tiny_config(), p);
    ModelConfig cfg;
    const auto back = load_prompt<T>(p, &cfg);
    EXPECT_TRUE(back == prompt);
    EXPECT_EQ(cfg, tiny_config());
}

TYPED_TEST(Serialize, CacheRoundTripIsBitwise) {
    using T = TypeParam;
    const auto w = ModelWeights<T>::init(tiny_config(), 5);
    const auto cache = sample_cache(w);
    const auto p = scratch("cache.kvc");
    save_cache(cache, p);
    const auto back = load_cache<T>(p, tiny_config().hash());
    EXPECT_TRUE(back == cache);
    EXPECT_EQ(back.next_position(), 9);
}

TYPED_TEST(Serialize, CacheHashMismatchIsRejected) {
    using T = TypeParam;
    const auto w = ModelWeights<T>::init(tiny_config(), 5);
    const auto p = scratch("cache_hash.kvc");
    save_cache(sample_cache(w), p);
    try {
        load_cache<T>(p, ModelConfig{}.hash());
        FAIL() << "expected hash mismatch";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kCorrupt);
    }
}

TYPED_TEST(Serialize, TruncatedFilesAreCorrupt) {
    using T = TypeParam;
    const auto w = ModelWeights<T>::init(tiny_config(), 5);
    const auto p = scratch("trunc.kvc");
    save_cache(sample_cache(w), p);
    auto bytes = read_bytes(p);
    for (std::size_t keep : {std::size_t{0}, std::size_t{7}, bytes.size() / 2, bytes.size() - 1}) {
        write_bytes(p, std::vector<char>(bytes.begin(), bytes.begin() + std::ptrdiff_t(keep)));
        try {
            load_cache<T>(p);
            FAIL() << "truncated to " << keep << " bytes loaded";
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), ErrorCode::kCorrupt);
        }
    }
}

TYPED_TEST(Serialize, FlippedByteIsCorrupt) {
    using T = TypeParam;
    const auto w = ModelWeights<T>::init(tiny_config(), 5);
    const auto p = scratch("flip.bin");
    save_model(w, p);
    auto bytes = read_bytes(p);
    bytes[bytes.size() / 3] ^= 0x10;
    write_bytes(p, bytes);
    EXPECT_THROW(load_model<T>(p), Error);
}

TYPED_TEST(Serialize, WrongKindAndMissingFile) {
    using T = TypeParam;
    const auto w = ModelWeights<T>::init(tiny_config(), 5);
    const auto p = scratch("kind.bin");
    save_model(w, p);
    EXPECT_THROW(load_prompt<T>(p), Error);
    try {
        load_model<T>(scratch("does_not_exist.bin"));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kIo);
    }
}

TEST(SerializeCross, SinglePrecisionFileLoadsIntoDouble) {
    const auto w = ModelWeights<float>::init(tiny_config(), 5);
    const auto p = scratch("cross.bin");
    save_model(w, p);
    EXPECT_TRUE(load_model<double>(p) == w.cast<double>());
}

}  // namespace
}  // namespace kvchain
