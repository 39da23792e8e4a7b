// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Every check recomputes its expectation here,
// from first principles or a slow path, rather than trusting library helpers.
//
// The learned criteria (7, 8, 11) share one pretrained base and one set of
// compress prompts. Their reported runtimes include that shared work.

#include <unistd.h>

#include <chrono>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "kvchain/kvchain.hpp"

namespace {

using namespace kvchain;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int g_failures = 0;

void report(int id, const std::string& name, bool ok, double seconds, double budget, const std::string& detail) {
    const bool in_time = seconds < budget;
    const bool pass = ok && in_time;
    if (!pass) ++g_failures;
    std::printf("criterion %2d %s  %-30s %s | %.1f s (limit %.0f s)%s\n", id, pass ? "PASS" : "FAIL", name.c_str(),
                detail.c_str(), seconds, budget, in_time ? "" : " OVER TIME");
    std::fflush(stdout);
}

template <typename... A>
std::string fmt(const A&... a) {
    std::ostringstream os;
    os.precision(4);
    (os << ... << a);
    return os.str();
}

template <typename T>
double max_abs(std::span<const T> a, std::span<const T> b) {
    double m = a.size() == b.size() ? 0.0 : INFINITY;
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Shared setup: pretrained base, compress data, standard and shared-cache
// prompts.

struct Recipe {
    long pretrain_steps = 2500;
    double pretrain_lr = 3e-3;
    std::size_t corpus = 16000;
    long prompt_steps = 300;
    double prompt_lr = 3e-2;
    std::size_t batch = 8;
    long continue_steps = 100;
    double continue_lr = 1e-2;
};

TrainConfig prompt_config(const Recipe& r) {
    TrainConfig tc;
    tc.steps = r.prompt_steps;
    tc.lr = r.prompt_lr;
    tc.batch_size = r.batch;
    return tc;
}

std::pair<Dataset, Dataset> split(const Dataset& all, std::size_t n_train) {
    return {Dataset{all.family, {all.examples.begin(), all.examples.begin() + static_cast<std::ptrdiff_t>(n_train)}},
            Dataset{all.family, {all.examples.begin() + static_cast<std::ptrdiff_t>(n_train), all.examples.end()}}};
}

struct Fixture {
    Recipe recipe;
    fs::path scratch;
    ModelWeights<float> base;
    double base_seconds = 0.0;
    Dataset train, test;
    PromptParams<float> a, b_standard, b_shared;
    double prompts_seconds = 0.0;

    ChainSpec<float> spec(const PromptParams<float>& b) const {
        ChainSpec<float> s;
        s.models = {{0, a, {}, 8}, {1, b, {}, 8}};
        return s;
    }
};

Fixture make_fixture() {
    Fixture f;
    f.scratch = fs::temp_directory_path() / ("kvchain-acceptance-" + std::to_string(::getpid()));
    fs::create_directories(f.scratch);
    auto t0 = Clock::now();
    TrainConfig pt;
    pt.steps = f.recipe.pretrain_steps;
    pt.lr = f.recipe.pretrain_lr;
    pt.batch_size = 16;
    pt.warmup = 0.02;
    f.base = pretrain_base<float>(ModelConfig{}, gen_pretrain_corpus(0, f.recipe.corpus), pt).weights;
    f.base_seconds = since(t0);
    std::printf("setup: base pretrained in %.1f s\n", f.base_seconds);

    std::tie(f.train, f.test) = split(gen_compress_qa(0, 2048 + 256), 2048);
    t0 = Clock::now();
    const TrainConfig tc = prompt_config(f.recipe);
    f.a = train_standard_prompt(f.base, f.train, 0, tc).prompts[0];
    f.b_standard = train_standard_prompt(f.base, f.train, 1, tc).prompts[0];
    f.b_shared = train_fthss_online(f.base, {&f.a}, f.train, 1, tc).prompts[0];
    f.prompts_seconds = since(t0);
    std::printf("setup: compress prompts trained in %.1f s\n", f.prompts_seconds);
    return f;
}

// ---------------------------------------------------------------------------
// 1. RoPE scores depend only on the offset.

// Closed form: with q, k read as complex pairs (x0 + i x1), the rotated dot
// product is Re(sum q_j conj(k_j) exp(i (m - n) theta_j)).
double closed_form_score(const std::vector<double>& q, const std::vector<double>& k, double offset, double base) {
    const std::size_t d = q.size();
    std::complex<double> acc = 0.0;
    for (std::size_t j = 0; j < d / 2; ++j) {
        const double theta = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(d));
        acc += std::complex<double>(q[2 * j], q[2 * j + 1]) * std::conj(std::complex<double>(k[2 * j], k[2 * j + 1])) *
               std::polar(1.0, offset * theta);
    }
    return acc.real();
}

template <typename T>
std::pair<double, double> rope_errors(std::size_t tuples) {
    const std::size_t d = 16;
    const RopeFrequencies freqs = rope_freqs(d);
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::uniform_int_distribution<std::int64_t> pos(0, 255), shift(0, 512);
    double shift_err = 0.0, form_err = 0.0;
    const auto score = [&](const Tensor<T>& q, const Tensor<T>& k, std::int64_t m, std::int64_t n) {
        const std::array<std::int64_t, 1> pm{m}, pn{n};
        const Tensor<T> qr = rope_apply(q, pm, freqs), kr = rope_apply(k, pn, freqs);
        double acc = 0.0;
        for (std::size_t i = 0; i < d; ++i) acc += static_cast<double>(qr[i]) * static_cast<double>(kr[i]);
        return acc;
    };
    for (std::size_t t = 0; t < tuples; ++t) {
        Tensor<T> q({1, d}), k({1, d});
        std::vector<double> qd(d), kd(d);
        for (std::size_t i = 0; i < d; ++i) {
            q[i] = static_cast<T>(u(rng));
            k[i] = static_cast<T>(u(rng));
            qd[i] = static_cast<double>(q[i]);
            kd[i] = static_cast<double>(k[i]);
        }
        const std::int64_t m = pos(rng), n = pos(rng), s = shift(rng);
        const double base_score = score(q, k, m, n);
        shift_err = std::max(shift_err, std::abs(base_score - score(q, k, m + s, n + s)));
        form_err = std::max(form_err, std::abs(base_score - closed_form_score(qd, kd, double(m - n), 10000.0)));
    }
    return {shift_err, form_err};
}

void criterion_rope() {
    const auto t0 = Clock::now();
    const auto [f_shift, f_form] = rope_errors<float>(1000);
    const auto [d_shift, d_form] = rope_errors<double>(1000);
    const bool ok = f_shift <= 1e-5 && d_shift <= 1e-10 && f_form <= 1e-5 && d_form <= 1e-10;
    report(1, "rope relative position", ok, since(t0), 5,
           fmt("shift err f32=", f_shift, " f64=", d_shift, "; vs closed form f32=", f_form, " f64=", d_form));
}

// ---------------------------------------------------------------------------
// 2. Shifting every position by l+1 leaves the logits unchanged.

template <typename T>
double continuation_error(const ModelWeights<T>& w, const Dataset& data) {
    double worst = 0.0;
    for (const auto& ex : data.examples) {
        const std::size_t l1 = ex.shared.size();  // positions 0..l
        Tensor<T> x({l1, w.config.d_model});
        for (std::size_t r = 0; r < l1; ++r) {
            const auto row = w.embedding.row(static_cast<std::size_t>(ex.shared[r]));
            std::copy(row.begin(), row.end(), x.row(r).begin());
        }
        SegmentLayout first(0), second(static_cast<std::int64_t>(l1));
        first.append(SegmentRole::shared(), l1);
        second.append(SegmentRole::shared(), l1);
        const auto a = forward_full(w, x, first), b = forward_full(w, x, second);
        worst = std::max(worst, max_abs<T>(a.logits.values(), b.logits.values()));
    }
    return worst;
}

void criterion_positions(const Fixture& f) {
    const auto t0 = Clock::now();
    const Dataset probe = gen_compress_qa(5, 20);
    const double e32 = continuation_error(f.base, probe);
    const auto base64 = load_model<double>(f.scratch / "base.bin");
    const double e64 = continuation_error(base64, probe);
    report(2, "position-id continuation", e32 <= 1e-5 && e64 <= 1e-5, since(t0), 10,
           fmt("max |logit diff| f32=", e32, " f64=", e64, " over 20 prompts"));
}

// ---------------------------------------------------------------------------
// 3. Incremental decode agrees with one full pass.

SegmentRole random_role(std::mt19937_64& rng, int models) {
    const int kind = std::uniform_int_distribution<int>(0, 3)(rng);
    const int m = std::uniform_int_distribution<int>(0, models - 1)(rng);
    switch (kind) {
        case 0: return SegmentRole::shared();
        case 1: return SegmentRole::prompt(m);
        case 2: return SegmentRole::input(m);
        default: return SegmentRole::output(m);
    }
}

template <typename T>
double cache_error(const ModelWeights<T>& w, std::size_t layouts) {
    std::mt19937_64 rng(23);
    std::normal_distribution<double> noise(0.0, 0.5);
    std::uniform_int_distribution<int> token(0, static_cast<int>(w.config.vocab_size) - 1);
    const std::size_t d = w.config.d_model;
    double worst = 0.0;
    for (std::size_t s = 0; s < layouts; ++s) {
        const bool masked = s % 2 == 0;
        const MaskRule rule{masked};
        const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 64)(rng);
        SegmentLayout layout(std::uniform_int_distribution<std::int64_t>(0, 40)(rng));
        for (std::size_t placed = 0; placed < n;) {
            const std::size_t len = std::min(n - placed, std::uniform_int_distribution<std::size_t>(1, 10)(rng));
            layout.append(random_role(rng, 3), len);
            placed += len;
        }
        const auto roles = layout.roles();
        const auto positions = assign_positions(layout);
        Tensor<T> x({n, d});
        for (std::size_t r = 0; r < n; ++r) {
            if (roles[r].is_prompt()) {
                for (T& v : x.row(r)) v = static_cast<T>(noise(rng));
            } else {
                const auto e = w.embedding.row(static_cast<std::size_t>(token(rng)));
                std::copy(e.begin(), e.end(), x.row(r).begin());
            }
        }
        const auto full = forward_full(w, x, layout, rule);
        const std::size_t cut = std::uniform_int_distribution<std::size_t>(1, n - 1)(rng);
        Tensor<T> head({cut, d});
        std::copy(x.values().begin(), x.values().begin() + static_cast<std::ptrdiff_t>(cut * d), head.values().begin());
        KvCache<T> cache = KvCache<T>::for_config(w.config);
        const auto pre = prefill<T>(w, head, std::span(roles).first(cut), std::span(positions).first(cut), cache, rule);
        for (std::size_t r = 0; r < cut; ++r) worst = std::max(worst, max_abs<T>(pre.logits.row(r), full.logits.row(r)));
        for (std::size_t r = cut; r < n; ++r) {
            const Tensor<T> logits = decode_step<T>(w, x.row(r), positions[r], roles[r], cache, rule);
            worst = std::max(worst, max_abs<T>(logits.values(), full.logits.row(r)));
        }
    }
    return worst;
}

void criterion_cache(const Fixture& f) {
    const auto t0 = Clock::now();
    const double e32 = cache_error(f.base, 100);
    const double e64 = cache_error(load_model<double>(f.scratch / "base.bin"), 100);
    report(3, "cache correctness", e32 <= 1e-5 && e64 <= 1e-5, since(t0), 60,
           fmt("max |logit diff| f32=", e32, " f64=", e64, " over 100 layouts each"));
}

// ---------------------------------------------------------------------------
// 4. Mask against a direct enumeration of the visibility rule.

// Token i may read token j iff j is not later and, when foreign prompts are
// masked, a prompt is read only by its own model's non-shared tokens.
bool visible(const std::vector<SegmentRole>& roles, std::size_t i, std::size_t j, bool mask_foreign) {
    if (j > i) return false;
    if (!mask_foreign || !roles[j].is_prompt()) return true;
    return roles[i].kind != SegmentRole::Kind::kShared && roles[i].model == roles[j].model;
}

void criterion_mask() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(31);
    std::size_t mismatches = 0, isolation = 0, purity = 0, cells = 0;
    for (std::size_t s = 0; s < 500; ++s) {
        const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 12)(rng);
        SegmentLayout layout(0);
        std::vector<SegmentRole> roles;
        for (std::size_t i = 0; i < n; ++i) {
            roles.push_back(random_role(rng, 3));
            layout.append(roles.back(), 1);
        }
        for (bool masked : {true, false}) {
            const AttentionMask m = build_mask(layout, MaskRule{masked});
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    ++cells;
                    mismatches += m(i, j) != visible(roles, i, j, masked);
                    if (!masked || !m(i, j) || !roles[j].is_prompt()) continue;
                    isolation += roles[i].model != roles[j].model;
                    purity += roles[i].kind == SegmentRole::Kind::kShared;
                }
            }
        }
    }
    report(4, "mask oracle", mismatches == 0 && isolation == 0 && purity == 0, since(t0), 30,
           fmt(mismatches, " mismatches, ", isolation, " cross-model prompt reads, ", purity,
               " shared reads of prompts over ", cells, " cells"));
}

// ---------------------------------------------------------------------------
// 5. Stored-cache and recompute training agree; upstream states are those of
// a standalone upstream pass.

void criterion_offline_online(const Fixture& f) {
    const auto t0 = Clock::now();
    const Dataset data{f.train.family, {f.train.examples.begin(), f.train.examples.begin() + 512}};
    TrainConfig tc = prompt_config(f.recipe);
    tc.steps = 50;
    const auto online = train_fthss_online(f.base, {&f.a}, data, 1, tc);
    tc.cache_dir = f.scratch / "caches";
    const auto offline = train_fthss_offline(f.base, {&f.a}, data, 1, tc);
    double loss_diff = online.log.size() == 50 && offline.log.size() == 50 ? 0.0 : INFINITY;
    for (std::size_t s = 0; s < std::min(online.log.size(), offline.log.size()); ++s) {
        loss_diff = std::max(loss_diff, std::abs(online.log[s].loss - offline.log[s].loss));
    }
    const double prompt_diff =
        max_abs<float>(online.prompts[0].embeddings.values(), offline.prompts[0].embeddings.values());
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(tc.cache_dir)) files += e.is_regular_file();

    double hidden = 0.0;
    const std::map<int, std::size_t> lens{{0, f.a.n_tokens()}, {1, f.b_shared.n_tokens()}};
    const std::map<int, const PromptParams<float>*> prompts{{0, &f.a}, {1, &f.b_shared}};
    for (std::size_t i = 0; i < 32; ++i) {
        const Sequence seq = single_round_sequence(f.test.examples[i], 1, lens);
        const std::size_t cut = detail::target_prompt_piece(seq, 1);
        Sequence upstream;
        upstream.pieces.assign(seq.pieces.begin(), seq.pieces.begin() + static_cast<std::ptrdiff_t>(cut));
        const auto full = forward_full(f.base, detail::assemble_inputs_tensor(f.base, seq, prompts), seq.layout());
        const auto alone =
            forward_full(f.base, detail::assemble_inputs_tensor(f.base, seq, prompts, 0, cut), upstream.layout());
        const std::size_t n = upstream.layout().total_length();
        for (std::size_t r = 0; r < n; ++r) hidden = std::max(hidden, max_abs<float>(full.hidden.row(r), alone.hidden.row(r)));
    }
    const bool ok = loss_diff == 0.0 && prompt_diff == 0.0 && files == 512 && hidden <= 1e-6;
    report(5, "offline/online equivalence", ok, since(t0), 300,
           fmt("50-step loss diff=", loss_diff, " prompt diff=", prompt_diff, " cache files=", files,
               " upstream hidden diff=", hidden));
}

// ---------------------------------------------------------------------------
// 6. Analytic prompt gradient against central differences, 64-bit.

void criterion_gradients(const Fixture& f) {
    const auto t0 = Clock::now();
    const auto base = load_model<double>(f.scratch / "base.bin");
    save_prompt(f.a, f.base.config, f.scratch / "a.bin");
    save_prompt(f.b_standard, f.base.config, f.scratch / "b.bin");
    const auto a = load_prompt<double>(f.scratch / "a.bin");
    auto b = load_prompt<double>(f.scratch / "b.bin");
    const std::map<int, std::size_t> lens{{0, a.n_tokens()}, {1, b.n_tokens()}};
    std::vector<Sequence> seqs;
    for (std::size_t i = 0; i < 4; ++i) seqs.push_back(single_round_sequence(f.train.examples[i], 1, lens));
    const auto objective = [&](std::vector<Tensor<double>>& grads) {
        double loss = 0.0;
        for (const Sequence& s : seqs) loss += prompt_sequence_grad<double>(base, s, {&b}, {&a}, {1}, MaskRule{}, grads);
        return loss;
    };
    std::vector<Tensor<double>> analytic{Tensor<double>(b.embeddings.shape())};
    objective(analytic);

    std::mt19937_64 rng(41);
    std::vector<std::size_t> coords(b.embeddings.size());
    std::iota(coords.begin(), coords.end(), 0);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(48);
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t c : coords) {
        std::vector<Tensor<double>> scratch{Tensor<double>(b.embeddings.shape())};
        const double orig = b.embeddings[c];
        b.embeddings[c] = orig + h;
        const double up = objective(scratch);
        b.embeddings[c] = orig - h;
        const double down = objective(scratch);
        b.embeddings[c] = orig;
        const double numeric = (up - down) / (2 * h);
        const double denom = std::max({std::abs(numeric), std::abs(analytic[0][c]), 1e-8});
        worst = std::max(worst, std::abs(numeric - analytic[0][c]) / denom);
    }
    report(6, "gradient integrity", worst <= 1e-4, since(t0), 300,
           fmt("max rel err=", worst, " over ", coords.size(), " coordinates, step ", h));
}

// ---------------------------------------------------------------------------
// 7. Single-round comparability and the chain-over-single-model gap.

void criterion_single_round(const Fixture& f) {
    const auto t0 = Clock::now();
    const double text = evaluate_mode(f.base, f.spec(f.b_standard), f.test, false).exact_match;
    const double shared = evaluate_mode(f.base, f.spec(f.b_shared), f.test, true).exact_match;
    // No compression: one model reads the facts and answers directly.
    const auto direct = [](Dataset d) {
        for (auto& ex : d.examples) ex.steps = {{0, {}, ex.answer}};
        return d;
    };
    const auto single = train_standard_prompt(f.base, direct(f.train), 0, prompt_config(f.recipe)).prompts[0];
    ChainSpec<float> one;
    one.models = {{0, single, {}, 8}};
    const double alone = evaluate_mode(f.base, one, direct(f.test), false).exact_match;
    const bool ok = std::abs(shared - text) <= 0.05 && text >= alone + 0.10 && shared >= alone + 0.10;
    report(7, "single-round comparability", ok, f.base_seconds + f.prompts_seconds + since(t0), 1800,
           fmt("EM shared-cache=", shared, " text=", text, " single model=", alone));
}

// ---------------------------------------------------------------------------
// 8. Multi-round comparability and cache counts.

void criterion_multi_round(const Fixture& f) {
    const auto t0 = Clock::now();
    const auto [train, test] = split(gen_multi_round(0, 2048 + 256, 2), 2048);
    const TrainConfig tc = prompt_config(f.recipe);
    const auto a = train_standard_prompt(f.base, train, 0, tc).prompts[0];
    const auto b = train_standard_prompt(f.base, train, 1, tc).prompts[0];
    const auto joint = train_fthss_multi_round(f.base, train, {0, 1}, tc).prompts;
    const auto spec = [](const PromptParams<float>& pa, const PromptParams<float>& pb) {
        ChainSpec<float> s;
        s.rounds = 2;
        s.placement = PromptPlacement::kFront;
        s.models = {{0, pa, {}, 8}, {1, pb, retrieve_after(0), 8}};
        return s;
    };
    const ModeReport text = evaluate_mode(f.base, spec(a, b), test, false);
    const ModeReport shared = evaluate_mode(f.base, spec(joint[0], joint[1]), test, true);
    std::size_t bad_text = 0, bad_shared = 0;
    for (const ChainTrace& t : text.traces) bad_text += t.caches_created != 2 || t.peak_live_caches != 2;
    for (const ChainTrace& t : shared.traces) {
        bool one = t.caches_created == 1 && t.peak_live_caches == 1;
        for (const TraceStep& s : t.steps) one = one && s.cache_id == 0;
        bad_shared += !one;
    }
    const bool ok = std::abs(shared.exact_match - text.exact_match) <= 0.05 && bad_text == 0 && bad_shared == 0 &&
                    text.traces.size() == test.size() && shared.traces.size() == test.size();
    report(8, "multi-round comparability", ok, f.base_seconds + since(t0), 1800,
           fmt("EM shared-cache=", shared.exact_match, " text=", text.exact_match, "; traces with wrong cache count text=",
               bad_text, " shared=", bad_shared));
}

// ---------------------------------------------------------------------------
// 9. Prefill savings identity and the quadratic FLOP trend.

// Attention cost by direct enumeration: query i of a block after `past`
// cached entries reads past + i + 1 keys; scores and weighted sums each take
// 2 * keys * head_dim per head and layer.
double attention_flops_brute(const ModelConfig& c, std::size_t queries, std::size_t past) {
    double total = 0.0;
    for (std::size_t i = 0; i < queries; ++i) {
        total += 2.0 * 2.0 * static_cast<double>(past + i + 1) * static_cast<double>(c.head_dim);
    }
    return total * static_cast<double>(c.n_layers * c.n_heads);
}

void criterion_prefill(const Fixture& f) {
    const auto t0 = Clock::now();
    const ChainSpec<float> spec = f.spec(f.b_shared);
    const std::size_t pa = f.a.n_tokens(), pb = f.b_shared.n_tokens();
    std::size_t bad = 0;
    for (const auto& ex : f.test.examples) {
        const ChainRequest req{ex.id, ex.shared, &ex};
        const ChainResult text = run_chain_text(f.base, spec, req);
        const ChainResult shared = run_chain_fthss(f.base, spec, req);
        const std::size_t s = ex.shared.size(), ya = text.transcript.at(0).output.size();
        // Baseline: A reads shared + its prompt; B reads shared + Y_A + its prompt.
        const std::size_t text_want = (s + pa) + (s + ya + pb);
        // Shared cache: shared once, then each prompt.
        const std::size_t shared_want = s + pa + pb;
        bad += text.trace.total_prefill() != text_want || shared.trace.total_prefill() != shared_want ||
               text.trace.total_prefill() - shared.trace.total_prefill() != s + ya;
    }

    LatencySetup<float> setup;
    setup.shared = f.test.examples[0].shared;
    setup.upstream = f.a;
    setup.downstream = f.b_shared;
    setup.intermediate_lengths = {16, 32, 64, 96, 128, 192};
    setup.trials = 3;
    const CostReport rep = time_intermediate_lengths(f.base, setup);
    std::vector<double> xs, savings;
    std::size_t bad_flops = 0;
    const std::size_t s = setup.shared.size(), p = f.b_shared.n_tokens(), dec = setup.decode_tokens;
    for (std::size_t i = 0; i + 1 < rep.rows.size(); i += 2) {
        const std::size_t n = rep.rows[i].intermediate_tokens;
        // Text: prefill shared + n + prompt, then decode. Shared cache: the
        // prompt lands after shared, A's prompt, start and n entries.
        const std::size_t past = s + pa + 1 + n;
        const double text = attention_flops_brute(f.base.config, s + n + p, 0) +
                            attention_flops_brute(f.base.config, dec, s + n + p);
        const double shared = attention_flops_brute(f.base.config, p, past) +
                              attention_flops_brute(f.base.config, dec, past + p);
        bad_flops += rep.rows[i].attn_flops != text || rep.rows[i + 1].attn_flops != shared;
        xs.push_back(static_cast<double>(n));
        savings.push_back(text - shared);
    }
    const QuadraticFit fit = fit_quadratic(xs, savings);
    const bool ok = bad == 0 && bad_flops == 0 && xs.size() >= 4 && fit.r2 >= 0.99 && fit.a > 0;
    report(9, "prefill savings identity", ok, since(t0), 300,
           fmt(bad, "/", f.test.size(), " traces off the identity, ", bad_flops, " FLOP rows off; fit R^2=", fit.r2,
               " over ", xs.size(), " lengths"));
}

// ---------------------------------------------------------------------------
// 10. Wall-clock trend.

void criterion_latency(const Fixture& f) {
    const auto t0 = Clock::now();
    LatencySetup<float> setup;
    setup.shared = f.test.examples[0].shared;
    setup.upstream = f.a;
    setup.downstream = f.b_shared;
    setup.intermediate_lengths = {16, 48, 96, 144, 192};
    setup.trials = 10;
    const CostReport rep = time_intermediate_lengths(f.base, setup);
    bool increasing = true;
    std::string series;
    for (std::size_t i = 0; i + 1 < rep.rows.size(); i += 2) {
        if (i >= 2) increasing = increasing && rep.rows[i].mean_s > rep.rows[i - 2].mean_s;
        series += fmt(rep.rows[i].intermediate_tokens, ":", rep.rows[i].mean_s * 1e3, "/", rep.rows[i + 1].mean_s * 1e3,
                      " ");
    }
    const CostRow& text_max = rep.rows[rep.rows.size() - 2];
    const CostRow& shared_max = rep.rows.back();
    report(10, "latency trend", increasing && shared_max.mean_s <= text_max.mean_s, since(t0), 600,
           fmt("ms text/shared by length ", series));
}

// ---------------------------------------------------------------------------
// 11. Continuation from a standard prompt on a tenth of the data.

void criterion_continuation(const Fixture& f) {
    const auto t0 = Clock::now();
    const double standard = evaluate_mode(f.base, f.spec(f.b_standard), f.test, true).exact_match;
    const double full = evaluate_mode(f.base, f.spec(f.b_shared), f.test, true).exact_match;
    const std::size_t n = (f.train.size() + 9) / 10;
    const Dataset small{f.train.family, {f.train.examples.begin(), f.train.examples.begin() + static_cast<std::ptrdiff_t>(n)}};
    TrainConfig tc = prompt_config(f.recipe);
    tc.steps = f.recipe.continue_steps;
    tc.lr = f.recipe.continue_lr;
    const auto cont = continue_fthss(f.base, {&f.a}, f.b_standard, small, tc).prompts[0];
    const double continued = evaluate_mode(f.base, f.spec(cont), f.test, true).exact_match;
    const double gap = full - standard;
    const bool ok = continued - standard >= 0.5 * gap;
    report(11, "small-sample continuation", ok, f.base_seconds + f.prompts_seconds + since(t0), 1800,
           fmt("EM unadapted=", standard, " continued(n=", n, ")=", continued, " full=", full, "; recovered ",
               gap > 0 ? (continued - standard) / gap : 1.0, " of gap"));
}

}  // namespace

int main() {
    try {
        criterion_rope();
        Fixture f = make_fixture();
        save_model(f.base, f.scratch / "base.bin");
        criterion_positions(f);
        criterion_cache(f);
        criterion_mask();
        criterion_offline_online(f);
        criterion_gradients(f);
        criterion_single_round(f);
        criterion_multi_round(f);
        criterion_prefill(f);
        criterion_latency(f);
        criterion_continuation(f);
        fs::remove_all(f.scratch);
    } catch (const std::exception& e) {
        std::printf("acceptance aborted: %s\n", e.what());
        return 2;
    }
    std::printf("%d criteria failed\n", g_failures);
    return g_failures == 0 ? 0 : 1;
}
