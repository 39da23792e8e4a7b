// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#include "test_util.hpp"

namespace kvchain {
namespace {

using namespace kvchain::testing;
using R = SegmentRole;

template <typename T>
class Model : public ::testing::Test {
protected:
    ModelConfig cfg = tiny_config();
    ModelWeights<T> w = ModelWeights<T>::init(cfg, 17);
};
TYPED_TEST_SUITE(Model, Precisions);

template <typename T>
Tensor<T> rows_of(const Tensor<T>& x, std::size_t begin, std::size_t count) {
    Tensor<T> out({count, x.cols()});
    std::copy_n(x.data() + begin * x.cols(), count * x.cols(), out.data());
    return out;
}

TEST(ModelConfigTest, Validation) {
    ModelConfig c;
    EXPECT_NO_THROW(c.validate());
    c.head_dim = 15;
    EXPECT_THROW(c.validate(), Error);
    ModelConfig d;
    d.n_heads = 3;
    EXPECT_THROW(d.validate(), Error);
    EXPECT_NE(ModelConfig{}.hash(), tiny_config().hash());
}

TYPED_TEST(Model, InitIsSeededAndDeterministic) {
    using T = TypeParam;
    EXPECT_TRUE(this->w == ModelWeights<T>::init(this->cfg, 17));
    EXPECT_FALSE(this->w == ModelWeights<T>::init(this->cfg, 18));
}

TYPED_TEST(Model, SingleTokenPrefillBookkeeping) {
    using T = TypeParam;
    auto cache = KvCache<T>::for_config(this->cfg);
    const int ids[1] = {vocab::kStart};
    SegmentLayout l(0);
    l.append(R::shared(), 1);
    prefill(this->w, embed_tokens(this->w, std::span<const int>(ids)), l, cache);
    EXPECT_EQ(cache.size(), 1u);
    EXPECT_EQ(cache.meta()[0].position, 0);
    EXPECT_EQ(cache.next_position(), 1);
}

TYPED_TEST(Model, PrefillThenDecodeMatchesFullForward) {
    using T = TypeParam;
    std::mt19937_64 rng(3);
    std::vector<int> tokens(12);
    for (int& t : tokens) t = int(rng() % this->cfg.vocab_size);
    SegmentLayout full(0);
    full.append(R::shared(), 4).append(R::prompt(0), 3).append(R::output(0), 5);
    const auto x = embed_tokens(this->w, std::span<const int>(tokens));
    const auto ref = forward_full(this->w, x, full);

    auto cache = KvCache<T>::for_config(this->cfg);
    SegmentLayout head(0);
    head.append(R::shared(), 4).append(R::prompt(0), 3).append(R::output(0), 4);
    prefill(this->w, rows_of(x, 0, 11), head, cache);
    const auto logits = decode_step<T>(this->w, x.row(11), 11, R::output(0), cache);
    EXPECT_LE(max_abs_diff<T>(logits.values(), ref.logits.row(11)), 1e-5);
}

TYPED_TEST(Model, OneTokenFullEqualsDecodeFromEmpty) {
    using T = TypeParam;
    const int ids[1] = {20};
    const auto x = embed_tokens(this->w, std::span<const int>(ids));
    SegmentLayout l(0);
    l.append(R::output(0), 1);
    const auto ref = forward_full(this->w, x, l);
    auto cache = KvCache<T>::for_config(this->cfg);
    const auto logits = decode_step<T>(this->w, x.row(0), 0, R::output(0), cache);
    EXPECT_EQ(logits.storage(), ref.logits.storage());
}

TYPED_TEST(Model, FullForwardKvEqualsPrefillCacheBitwise) {
    using T = TypeParam;
    std::vector<int> tokens{3, 16, 6, 17, 5, 40, 4, 2, 30};
    SegmentLayout l(0);
    l.append(R::shared(), 5).append(R::prompt(1), 2).append(R::output(1), 2);
    const auto x = embed_tokens(this->w, std::span<const int>(tokens));
    const auto ref = forward_full(this->w, x, l);
    auto cache = KvCache<T>::for_config(this->cfg);
    prefill(this->w, x, l, cache);
    for (std::size_t layer = 0; layer < this->cfg.n_layers; ++layer) {
        EXPECT_EQ(cache.keys(layer), ref.keys[layer]);
        EXPECT_EQ(cache.values(layer), ref.values[layer]);
    }
    const auto again = forward_full(this->w, x, l);
    EXPECT_EQ(again.logits, ref.logits);
}

TYPED_TEST(Model, PositionShiftInvariance) {
    std::vector<int> tokens{3, 16, 6, 17, 5, 40, 4, 2, 30, 31};
    const auto x = embed_tokens(this->w, std::span<const int>(tokens));
    SegmentLayout a(0), b(37);
    a.append(R::shared(), 10);
    b.append(R::shared(), 10);
    // Scores depend on offsets alone, so the shift is exact.
    EXPECT_EQ(forward_full(this->w, x, a).logits, forward_full(this->w, x, b).logits);
}

TYPED_TEST(Model, DecodeWrittenKvEqualsPrefillWrittenKv) {
    using T = TypeParam;
    std::vector<int> tokens{3, 16, 6, 17, 5, 40, 4, 2};
    const auto x = embed_tokens(this->w, std::span<const int>(tokens));
    SegmentLayout l(0);
    l.append(R::shared(), 4).append(R::output(0), 4);
    auto pre = KvCache<T>::for_config(this->cfg);
    prefill(this->w, x, l, pre);

    auto dec = KvCache<T>::for_config(this->cfg);
    SegmentLayout head(0);
    head.append(R::shared(), 4);
    prefill(this->w, rows_of(x, 0, 4), head, dec);
    for (std::size_t i = 4; i < 8; ++i) decode_step<T>(this->w, x.row(i), std::int64_t(i), R::output(0), dec);
    for (std::size_t layer = 0; layer < this->cfg.n_layers; ++layer) {
        EXPECT_LE(max_abs_diff(pre.keys(layer), dec.keys(layer)), 1e-6);
        EXPECT_LE(max_abs_diff(pre.values(layer), dec.values(layer)), 1e-6);
    }
    EXPECT_EQ(pre.meta(), dec.meta());
}

TYPED_TEST(Model, PositionRegressionIsRejected) {
    using T = TypeParam;
    auto cache = KvCache<T>::for_config(this->cfg);
    const int ids[2] = {3, 4};
    const auto x = embed_tokens(this->w, std::span<const int>(ids));
    SegmentLayout l(0);
    l.append(R::shared(), 2);
    prefill(this->w, x, l, cache);
    EXPECT_THROW(decode_step<T>(this->w, x.row(0), 1, R::output(0), cache), Error);
    EXPECT_THROW(prefill(this->w, x, l, cache), Error);
    EXPECT_NO_THROW(decode_step<T>(this->w, x.row(0), 2, R::output(0), cache));
    for (std::size_t i = 1; i < cache.size(); ++i) EXPECT_GT(cache.meta()[i].position, cache.meta()[i - 1].position);
}

TYPED_TEST(Model, DecodeGivesZeroWeightToForeignPrompt) {
    using T = TypeParam;
    std::vector<int> tokens{3, 16, 6, 8, 8, 8, 2, 40};
    const auto x = embed_tokens(this->w, std::span<const int>(tokens));
    SegmentLayout l(0);
    l.append(R::shared(), 3).append(R::prompt(0), 3).append(R::output(0), 2);
    auto cache = KvCache<T>::for_config(this->cfg);
    prefill(this->w, x, l, cache);
    std::vector<Tensor<T>> probs;
    decode_step<T>(this->w, x.row(7), 8, R::output(1), cache, MaskRule{}, &probs);
    ASSERT_EQ(probs.size(), this->cfg.n_layers);
    for (const Tensor<T>& p : probs) {
        // [heads x 1 x keys]
        const std::size_t keys = p.cols();
        ASSERT_EQ(keys, 9u);
        for (std::size_t h = 0; h < this->cfg.n_heads; ++h) {
            for (std::size_t j = 3; j < 6; ++j) EXPECT_EQ(p[h * keys + j], T(0));
            EXPECT_GT(p[h * keys + 0], T(0));
        }
    }
}

TYPED_TEST(Model, FilteringPromptEqualsMaskingIt) {
    using T = TypeParam;
    std::vector<int> tokens{3, 16, 6, 8, 8, 2, 40, 41};
    const auto x = embed_tokens(this->w, std::span<const int>(tokens));
    SegmentLayout l(0);
    l.append(R::shared(), 3).append(R::prompt(0), 2).append(R::output(0), 3);
    auto cache = KvCache<T>::for_config(this->cfg);
    prefill(this->w, x, l, cache);

    auto masked = cache;
    auto dropped = filter_cache<T>(cache, [](const R& r) { return !r.is_prompt(); });
    EXPECT_EQ(dropped.size(), 6u);
    EXPECT_EQ(dropped.next_position(), cache.next_position());
    const auto a = decode_step<T>(this->w, x.row(7), 8, R::output(1), masked);
    const auto b = decode_step<T>(this->w, x.row(7), 8, R::output(1), dropped);
    EXPECT_LE(max_abs_diff(a, b), 1e-6);

    auto same = filter_cache<T>(cache, [](const R&) { return true; });
    EXPECT_TRUE(same == cache);
}

TYPED_TEST(Model, CacheEquivalenceOnRandomLayouts) {
    using T = TypeParam;
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t n = 2 + rng() % 30;
        std::vector<int> tokens(n);
        for (int& t : tokens) t = int(rng() % this->cfg.vocab_size);
        SegmentLayout l(std::int64_t(rng() % 5));
        std::size_t used = 0;
        while (used < n) {
            const std::size_t len = std::min<std::size_t>(n - used, 1 + rng() % 5);
            const int m = int(rng() % 2);
            const R roles[4] = {R::shared(), R::prompt(m), R::input(m), R::output(m)};
            l.append(roles[rng() % 4], len);
            used += len;
        }
        const auto x = embed_tokens(this->w, std::span<const int>(tokens));
        const auto ref = forward_full(this->w, x, l);
        const auto roles = l.roles();
        const auto pos = assign_positions(l);
        const std::size_t split = 1 + rng() % (n - 1);
        auto cache = KvCache<T>::for_config(this->cfg);
        prefill<T>(this->w, rows_of(x, 0, split), std::span(roles).first(split), std::span(pos).first(split), cache);
        if (trial == 0) cache.set_next_position(pos[split]);
        for (std::size_t i = split; i < n; ++i) {
            const auto logits = decode_step<T>(this->w, x.row(i), pos[i], roles[i], cache);
            EXPECT_LE(max_abs_diff<T>(logits.values(), ref.logits.row(i)), 1e-5) << "trial " << trial << " row " << i;
        }
    }
}

TEST(ModelCopyTask, OneLayerModelLearnsToCopy) {
    // [a, Sep, a]: after Sep the model must repeat the first token.
    ModelConfig c = tiny_config();
    c.n_layers = 1;
    std::vector<LmSequence> corpus;
    for (int a = vocab::kKeyBase; a < vocab::kKeyBase + 12; ++a) {
        LmSequence s;
        s.tokens = {a, vocab::kSep};
        s.targets = {-1, a};
        corpus.push_back(s);
    }
    TrainConfig tc;
    tc.steps = 300;
    tc.lr = 1e-2;
    tc.batch_size = 12;
    tc.seed = 1;
    const auto base = pretrain_base<float>(c, corpus, tc).weights;
    int correct = 0;
    for (const LmSequence& s : corpus) {
        auto cache = KvCache<float>::for_config(c);
        const auto x = embed_tokens(base, std::span<const int>(s.tokens));
        decode_step<float>(base, x.row(0), 0, R::input(0), cache);
        const auto logits = decode_step<float>(base, x.row(1), 1, R::input(0), cache);
        correct += argmax<float>(logits.values()) == s.tokens[0];
    }
    EXPECT_EQ(correct, int(corpus.size()));
}

TYPED_TEST(Model, CastRoundTrip) {
    using T = TypeParam;
    const auto other = this->w.template cast<double>().template cast<T>();
    EXPECT_TRUE(other == this->w);
}

}  // namespace
}  // namespace kvchain
