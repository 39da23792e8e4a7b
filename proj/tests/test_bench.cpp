// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#include "test_util.hpp"

namespace kvchain {
namespace {

using namespace kvchain::testing;

// Per-query loop: each query at offset i sees past + i + 1 keys; scores and
// weighted values cost 2 * keys * head_dim each, per head and layer.
double brute_attention_flops(const ModelConfig& c, std::size_t q, std::size_t past) {
    double total = 0.0;
    for (std::size_t layer = 0; layer < c.n_layers; ++layer) {
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            for (std::size_t i = 0; i < q; ++i) {
                const double keys = static_cast<double>(past + i + 1);
                total += 2.0 * keys * static_cast<double>(c.head_dim) * 2.0;
            }
        }
    }
    return total;
}

TEST(KvBytes, Examples) {
    // 2 (K and V) * 2 layers * 2 heads * 4 dims * 10 positions * 4 bytes.
    EXPECT_EQ(kv_bytes(2, 2, 4, 10, 4, 1, CacheMode::kShared), 1280u);
    EXPECT_EQ(kv_bytes(2, 2, 4, 10, 4, 3, CacheMode::kText), 3840u);
    EXPECT_EQ(kv_bytes(2, 2, 4, 10, 4, 3, CacheMode::kShared), 1280u);
    EXPECT_EQ(kv_bytes(1, 1, 1, 1, 1, 1, CacheMode::kText), 2u);
    EXPECT_EQ(kv_bytes(2, 2, 4, 0, 4, 3, CacheMode::kText), 0u);
    EXPECT_THROW(kv_bytes(2, 2, 4, 10, 4, 0, CacheMode::kText), Error);
}

TEST(AttentionFlops, SingleTokenExample) {
    ModelConfig c;
    c.n_layers = 1;
    c.n_heads = 1;
    c.head_dim = 4;
    c.d_model = 4;
    EXPECT_DOUBLE_EQ(attention_flops_for(c, 1, 0), 16.0);
}

TEST(AttentionFlops, MatchesPerQueryCount) {
    const ModelConfig c = tiny_config();
    for (std::size_t q : {0u, 1u, 5u, 17u}) {
        for (std::size_t past : {0u, 3u, 40u}) {
            EXPECT_DOUBLE_EQ(attention_flops_for(c, double(q), double(past)), brute_attention_flops(c, q, past));
        }
    }
}

TEST(AttentionFlops, TraceSumsPrefillThenDecode) {
    const ModelConfig c = tiny_config();
    ChainTrace tr;
    TraceStep a;
    a.prefill_tokens = 6;
    a.decode_tokens = 3;
    TraceStep b;
    b.prefill_past = 9;
    b.prefill_tokens = 4;
    b.decode_tokens = 2;
    tr.steps = {a, b};
    const double want = brute_attention_flops(c, 6, 0) + brute_attention_flops(c, 3, 6) +
                        brute_attention_flops(c, 4, 9) + brute_attention_flops(c, 2, 13);
    const FlopEstimate f = attention_flops(c, tr);
    EXPECT_DOUBLE_EQ(f.attention, want);
    EXPECT_DOUBLE_EQ(f.projection, 15.0 * projection_flops_per_token(c));
    EXPECT_DOUBLE_EQ(f.total(), f.attention + f.projection);
}

// Downstream attention cost for an intermediate of length n: the baseline
// prefills shared + n + prompt from scratch, the shared cache only the prompt
// on top of shared + prompt + start + n.
double savings_at(const ModelConfig& c, double n, double s = 30) {
    const double p = 10;
    return attention_flops_for(c, s + n + p, 0) - attention_flops_for(c, p, s + p + 1 + n);
}

TEST(AttentionFlops, SavingsGrowSuperlinearly) {
    const ModelConfig c = tiny_config();
    // The shared prefix contributes a constant; the part owed to the
    // intermediate more than doubles when its length doubles.
    for (double n : {1.0, 8.0, 32.0, 100.0}) {
        const double base = savings_at(c, 0);
        EXPECT_GT(savings_at(c, 2 * n) - base, 2 * (savings_at(c, n) - base));
        EXPECT_GT(savings_at(c, 2 * n, 0), 2 * savings_at(c, n, 0));
    }
    std::vector<double> xs, ys;
    for (double n : {16.0, 32.0, 64.0, 128.0, 200.0}) {
        xs.push_back(n);
        ys.push_back(savings_at(c, n));
    }
    const QuadraticFit fit = fit_quadratic(xs, ys);
    EXPECT_GT(fit.a, 0.0);
    EXPECT_GE(fit.r2, 0.99);
}

TEST(QuadraticFitCheck, RecoversExactPolynomial) {
    std::vector<double> xs, ys;
    for (double x = -3; x <= 5; x += 1) {
        xs.push_back(x);
        ys.push_back(2.5 * x * x - 1.25 * x + 7);
    }
    const QuadraticFit f = fit_quadratic(xs, ys);
    EXPECT_NEAR(f.a, 2.5, 1e-9);
    EXPECT_NEAR(f.b, -1.25, 1e-9);
    EXPECT_NEAR(f.c, 7.0, 1e-9);
    EXPECT_NEAR(f.r2, 1.0, 1e-12);
    EXPECT_THROW(fit_quadratic({1, 2}, {1, 4}), Error);
}

TEST(QuadraticFitCheck, NoiseLowersRSquared) {
    const QuadraticFit f = fit_quadratic({0, 1, 2, 3, 4, 5}, {0, 5, -3, 6, -4, 2});
    EXPECT_LT(f.r2, 0.9);
}

TEST(CostCsv, EmptyReportIsHeaderOnly) {
    EXPECT_EQ(report_render(CostReport{}), std::string(kCostHeader) + "\n");
    EXPECT_TRUE(report_parse(report_render(CostReport{})).rows.empty());
}

TEST(CostCsv, RoundTripIsLossless) {
    CostReport r;
    r.rows.push_back({"text", 64, 110, 1.0 / 3.0, 123456789, 0.0123456789012345, 1e-7});
    r.rows.push_back({"fthss", 64, 14, 2.0e9, 4096, 3.5e-4, 0.0});
    EXPECT_EQ(report_parse(report_render(r)).rows, r.rows);
    EXPECT_THROW(report_parse("bogus\n"), Error);
    EXPECT_THROW(report_parse(std::string(kCostHeader) + "\ntext,1,2\n"), Error);
}

TEST(Summary, MeanAndSampleDeviation) {
    const TimingStats s = summarise({1.0, 2.0, 3.0, 4.0});
    EXPECT_DOUBLE_EQ(s.mean, 2.5);
    EXPECT_NEAR(s.stddev, std::sqrt(5.0 / 3.0), 1e-15);
    EXPECT_EQ(summarise({}).mean, 0.0);
}

TEST(LatencySweep, CountsAreExactAndDeterministic) {
    const ModelConfig c = tiny_config();
    const auto w = ModelWeights<float>::init(c, 2);
    LatencySetup<float> s;
    s.shared = {3, 16, 6, 16, 5, 40};
    s.upstream = PromptParams<float>::init(0, 3, c.d_model, 1);
    s.downstream = PromptParams<float>::init(1, 4, c.d_model, 2);
    s.intermediate_lengths = {2, 8, 16};
    s.trials = 3;
    s.decode_tokens = 2;
    const CostReport a = time_intermediate_lengths(w, s);
    const CostReport b = time_intermediate_lengths(w, s);
    ASSERT_EQ(a.rows.size(), 6u);
    const std::size_t entry = 2 * c.n_layers * c.d_model * sizeof(float);
    for (std::size_t i = 0; i < a.rows.size(); i += 2) {
        const CostRow& text = a.rows[i];
        const CostRow& shared = a.rows[i + 1];
        const std::size_t n = s.intermediate_lengths[i / 2];
        EXPECT_EQ(text.mode, "text");
        EXPECT_EQ(shared.mode, "fthss");
        EXPECT_EQ(text.prefill_tokens, s.shared.size() + n + 4);
        EXPECT_EQ(shared.prefill_tokens, 4u);
        EXPECT_EQ(text.prefill_tokens - shared.prefill_tokens, s.shared.size() + n);
        // Upstream state: shared, upstream prompt, start and the intermediate.
        EXPECT_EQ(shared.kv_bytes, (s.shared.size() + 3 + 1 + n + 4 + 2) * entry);
        EXPECT_EQ(text.kv_bytes, (s.shared.size() + n + 4 + 2) * entry);
        EXPECT_DOUBLE_EQ(text.attn_flops,
                         brute_attention_flops(c, text.prefill_tokens, 0) +
                             brute_attention_flops(c, 2, text.prefill_tokens));
        EXPECT_EQ(text.prefill_tokens, b.rows[i].prefill_tokens);
        EXPECT_EQ(shared.attn_flops, b.rows[i + 1].attn_flops);
        EXPECT_GT(text.mean_s, 0.0);
    }
    s.trials = 2;
    EXPECT_THROW(time_intermediate_lengths(w, s), Error);
}

TEST(ChainTiming, RowsComeFromTraces) {
    const ModelConfig c = tiny_config();
    const auto w = ModelWeights<float>::init(c, 3);
    ChainSpec<float> spec;
    for (int m = 0; m < 2; ++m) {
        auto p = PromptParams<float>::init(m, 2, c.d_model, 5 + m, 1.0);
        p.trained = true;
        spec.models.push_back({m, p, {}, 3});
    }
    const auto data = gen_compress_qa(1, 3);
    const CostReport r = time_chain(w, spec, spec, data, 3);
    ASSERT_EQ(r.rows.size(), 2u);
    const ModeReport text = evaluate_mode(w, spec, data, false), shared = evaluate_mode(w, spec, data, true);
    EXPECT_EQ(r.rows[0].prefill_tokens, text.prefill_total);
    EXPECT_EQ(r.rows[1].prefill_tokens, shared.prefill_total);
    EXPECT_EQ(r.rows[0].kv_bytes, text.peak_kv_bytes);
    EXPECT_EQ(r.rows[1].kv_bytes, shared.peak_kv_bytes);
    EXPECT_THROW(time_chain(w, spec, spec, data, 1), Error);
}

}  // namespace
}  // namespace kvchain
