// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Chain inference. The text-passing runtime gives every model its own cache
// and re-prefills whatever other models produced; the shared-cache runtime
// keeps one cache for the whole chain, prefills shared content once, then
// only prompts and unique inputs, and lets each model decode on top of the
// entries its predecessors left behind.

#include <chrono>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kvchain/model.hpp"
#include "kvchain/prompt.hpp"
#include "kvchain/sequence.hpp"
#include "kvchain/tasks.hpp"

namespace kvchain {

/// What a chain run is asked to do: shared input plus, optionally, the
/// lookup table unique-input providers may consult.
struct ChainRequest {
    int id = 0;
    std::vector<int> shared;
    const SyntheticExample* source = nullptr;
};

/// Produces a model's unique input from the request and the outputs of all
/// earlier steps.
using UniqueInputFn = std::function<std::vector<int>(const ChainRequest&, const std::vector<ChainStep>& so_far)>;

template <typename T>
struct ChainModel {
    int model_id = 0;
    PromptParams<T> prompt;
    UniqueInputFn unique_input;  // empty: no unique input
    std::size_t max_output_tokens = 8;
};

template <typename T>
struct ChainSpec {
    std::vector<ChainModel<T>> models;  // order of activation within a round
    std::size_t rounds = 1;
    int stop_token = vocab::kStop;
    int start_token = vocab::kStart;
    PromptPlacement placement = PromptPlacement::kFirstUse;
    MaskRule mask_rule{};

    void validate() const {
        std::set<int> ids;
        for (const ChainModel<T>& m : models) {
            KVCHAIN_CHECK(ids.insert(m.model_id).second, ErrorCode::kInvalidArgument, "chain: duplicate model id ",
                          m.model_id);
            KVCHAIN_CHECK(m.max_output_tokens >= 1, ErrorCode::kInvalidArgument, "chain: model ", m.model_id,
                          " needs max_output_tokens >= 1");
            KVCHAIN_CHECK(m.prompt.model_id == m.model_id, ErrorCode::kInvalidArgument, "chain: prompt for model ",
                          m.prompt.model_id, " attached to model ", m.model_id);
        }
        KVCHAIN_CHECK(rounds >= 1, ErrorCode::kInvalidArgument, "chain: rounds must be >= 1");
    }
};

/// One record per prefill or decode phase.
struct TraceStep {
    int model_id = -1;  // -1: shared-content prefill
    std::size_t cache_id = 0;
    std::size_t prefill_tokens = 0;
    std::size_t prefill_past = 0;  // cache entries present when the prefill ran
    std::size_t shared_tokens = 0;   // of prefill_tokens: shared content
    std::size_t history_tokens = 0;  // of prefill_tokens: other steps' inputs/outputs re-read as text
    std::size_t decode_tokens = 0;   // tokens fed through decode (start symbol included)
    std::size_t cache_before = 0;
    std::size_t cache_after = 0;
    double seconds = 0.0;
};

struct ChainTrace {
    std::vector<TraceStep> steps;
    std::size_t caches_created = 0;
    std::size_t peak_live_caches = 0;
    std::size_t peak_cache_entries = 0;  // summed over live caches
    std::size_t bytes_per_entry = 0;     // K and V, every layer

    std::size_t total_prefill() const {
        std::size_t n = 0;
        for (const TraceStep& s : steps) n += s.prefill_tokens;
        return n;
    }

    std::size_t prefill_for(int model) const {
        std::size_t n = 0;
        for (const TraceStep& s : steps) n += s.model_id == model ? s.prefill_tokens : 0;
        return n;
    }

    std::size_t peak_kv_bytes() const { return peak_cache_entries * bytes_per_entry; }
};

struct ChainResult {
    std::vector<ChainStep> transcript;  // generated steps, in order
    ChainTrace trace;

    /// Output of the final step, the chain's answer.
    std::vector<int> answer() const { return transcript.empty() ? std::vector<int>{} : transcript.back().output; }
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

/// Greedy decode: feed the start symbol, then each generated token, until the
/// stop token or the cap. The final token is produced but not fed.
template <typename T>
std::vector<int> greedy_decode(const ModelWeights<T>& w, KvCache<T>& cache, int model, std::size_t max_tokens,
                               int start_token, int stop_token, const MaskRule& rule, std::size_t& fed) {
    std::vector<int> out;
    int current = start_token;
    fed = 0;
    for (;;) {
        KVCHAIN_CHECK(cache.size() < w.config.max_seq, ErrorCode::kPrecondition, "decode exceeds max_seq ",
                      w.config.max_seq);
        const int ids[1] = {current};
        const Tensor<T> e = embed_tokens(w, std::span<const int>(ids));
        const Tensor<T> logits =
            decode_step<T>(w, e.row(0), cache.next_position(), SegmentRole::output(model), cache, rule);
        ++fed;
        const int next = argmax<T>(logits.values());
        if (next == stop_token) break;
        out.push_back(next);
        if (out.size() >= max_tokens) break;
        current = next;
    }
    return out;
}

template <typename T>
void prefill_tokens(const ModelWeights<T>& w, KvCache<T>& cache, const std::vector<int>& tokens,
                    const SegmentRole& role, const MaskRule& rule) {
    if (tokens.empty()) return;
    const Tensor<T> x = embed_tokens(w, std::span<const int>(tokens));
    const std::vector<SegmentRole> roles(tokens.size(), role);
    std::vector<std::int64_t> pos(tokens.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = cache.next_position() + static_cast<std::int64_t>(i);
    prefill<T>(w, x, roles, pos, cache, rule);
}

template <typename T>
void prefill_prompt(const ModelWeights<T>& w, KvCache<T>& cache, const PromptParams<T>& p, const MaskRule& rule) {
    const std::vector<SegmentRole> roles(p.n_tokens(), SegmentRole::prompt(p.model_id));
    std::vector<std::int64_t> pos(p.n_tokens());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = cache.next_position() + static_cast<std::int64_t>(i);
    prefill<T>(w, p.embeddings, roles, pos, cache, rule);
}

template <typename T>
std::vector<const ChainModel<T>*> activation_order(const ChainSpec<T>& spec) {
    std::vector<const ChainModel<T>*> order;
    for (std::size_t r = 0; r < spec.rounds; ++r) {
        for (const ChainModel<T>& m : spec.models) order.push_back(&m);
    }
    return order;
}

template <typename T>
std::size_t entry_bytes(const ModelConfig& c) {
    return 2 * c.n_layers * c.d_model * sizeof(T);
}

}  // namespace detail

/// Text-passing baseline. Each model owns a cache for the whole run: on
/// first activation it prefills shared content, the transcript so far as
/// text, its prompt and unique input; later activations prefill only the
/// text added since. Caches of models with no further steps are released.
template <typename T>
ChainResult run_chain_text(const ModelWeights<T>& w, const ChainSpec<T>& spec, const ChainRequest& req) {
    spec.validate();
    ChainResult res;
    res.trace.bytes_per_entry = detail::entry_bytes<T>(w.config);
    const auto order = detail::activation_order(spec);
    std::map<int, KvCache<T>> caches;
    std::map<int, std::size_t> cache_ids;
    std::map<int, std::size_t> seen;  // transcript steps already in a model's cache
    std::map<int, std::size_t> last_use;
    for (std::size_t s = 0; s < order.size(); ++s) last_use[order[s]->model_id] = s;
    // Baseline rule: the text-view mask has no foreign prompts, plain causal.
    const MaskRule rule{false};

    for (std::size_t s = 0; s < order.size(); ++s) {
        const ChainModel<T>& m = *order[s];
        const auto t0 = detail::Clock::now();
        TraceStep ts;
        ts.model_id = m.model_id;
        const bool first = !caches.contains(m.model_id);
        if (first) {
            caches.emplace(m.model_id, KvCache<T>::for_config(w.config));
            cache_ids[m.model_id] = res.trace.caches_created++;
            seen[m.model_id] = 0;
        }
        KvCache<T>& cache = caches.at(m.model_id);
        ts.cache_id = cache_ids[m.model_id];
        ts.cache_before = cache.size();
        ts.prefill_past = cache.size();

        std::vector<int> text;
        if (first) {
            detail::prefill_tokens(w, cache, req.shared, SegmentRole::shared(), rule);
            ts.shared_tokens = req.shared.size();
        }
        for (std::size_t j = seen[m.model_id]; j < res.transcript.size(); ++j) {
            const ChainStep& prev = res.transcript[j];
            if (prev.model == m.model_id) continue;  // own steps are already in the cache
            text.insert(text.end(), prev.input.begin(), prev.input.end());
            text.insert(text.end(), prev.output.begin(), prev.output.end());
        }
        detail::prefill_tokens(w, cache, text, SegmentRole::input(m.model_id), rule);
        ts.history_tokens = text.size();
        if (first) detail::prefill_prompt(w, cache, m.prompt, rule);
        ChainStep step{m.model_id, m.unique_input ? m.unique_input(req, res.transcript) : std::vector<int>{}, {}};
        detail::prefill_tokens(w, cache, step.input, SegmentRole::input(m.model_id), rule);
        ts.prefill_tokens = cache.size() - ts.cache_before;

        step.output = detail::greedy_decode(w, cache, m.model_id, m.max_output_tokens, spec.start_token,
                                            spec.stop_token, rule, ts.decode_tokens);
        res.transcript.push_back(std::move(step));
        seen[m.model_id] = res.transcript.size();
        ts.cache_after = cache.size();
        ts.seconds = detail::seconds_since(t0);

        std::size_t live_entries = 0;
        for (const auto& [id, c] : caches) live_entries += c.size();
        res.trace.peak_live_caches = std::max(res.trace.peak_live_caches, caches.size());
        res.trace.peak_cache_entries = std::max(res.trace.peak_cache_entries, live_entries);
        res.trace.steps.push_back(ts);
        if (last_use[m.model_id] == s) caches.erase(m.model_id);
    }
    return res;
}

/// Shared-cache runtime: one cache for the chain. Shared content is prefilled
/// once; prompts are prefilled once (at first use, or all up front for the
/// front placement); per activation only the unique input is prefilled before
/// decoding with the model's output role. Positions keep increasing through
/// every prompt swap.
template <typename T>
ChainResult run_chain_fthss(const ModelWeights<T>& w, const ChainSpec<T>& spec, const ChainRequest& req) {
    spec.validate();
    ChainResult res;
    res.trace.bytes_per_entry = detail::entry_bytes<T>(w.config);
    KvCache<T> cache = KvCache<T>::for_config(w.config);
    res.trace.caches_created = 1;
    res.trace.peak_live_caches = 1;
    const MaskRule& rule = spec.mask_rule;
    std::set<int> prompted;

    {
        const auto t0 = detail::Clock::now();
        TraceStep ts;
        ts.model_id = -1;
        detail::prefill_tokens(w, cache, req.shared, SegmentRole::shared(), rule);
        ts.prefill_tokens = ts.shared_tokens = req.shared.size();
        ts.cache_after = cache.size();
        if (spec.placement == PromptPlacement::kFront) {
            for (const ChainModel<T>& m : spec.models) {
                detail::prefill_prompt(w, cache, m.prompt, rule);
                prompted.insert(m.model_id);
            }
            ts.prefill_tokens = cache.size();
            ts.cache_after = cache.size();
        }
        ts.seconds = detail::seconds_since(t0);
        res.trace.steps.push_back(ts);
    }

    for (const ChainModel<T>* mp : detail::activation_order(spec)) {
        const ChainModel<T>& m = *mp;
        const auto t0 = detail::Clock::now();
        TraceStep ts;
        ts.model_id = m.model_id;
        ts.cache_before = ts.prefill_past = cache.size();
        if (prompted.insert(m.model_id).second) detail::prefill_prompt(w, cache, m.prompt, rule);
        ChainStep step{m.model_id, m.unique_input ? m.unique_input(req, res.transcript) : std::vector<int>{}, {}};
        detail::prefill_tokens(w, cache, step.input, SegmentRole::input(m.model_id), rule);
        ts.prefill_tokens = cache.size() - ts.cache_before;
        step.output = detail::greedy_decode(w, cache, m.model_id, m.max_output_tokens, spec.start_token,
                                            spec.stop_token, rule, ts.decode_tokens);
        res.transcript.push_back(std::move(step));
        ts.cache_after = cache.size();
        ts.seconds = detail::seconds_since(t0);
        res.trace.steps.push_back(ts);
    }
    res.trace.peak_cache_entries = cache.size();
    return res;
}

/// Unique-input provider for plan/read chains: look up the key the most
/// recent step of `planner` produced.
inline UniqueInputFn retrieve_after(int planner) {
    return [planner](const ChainRequest& req, const std::vector<ChainStep>& so_far) -> std::vector<int> {
        KVCHAIN_CHECK(req.source != nullptr, ErrorCode::kPrecondition, "retrieval needs the request's source table");
        for (std::size_t j = so_far.size(); j-- > 0;) {
            if (so_far[j].model != planner) continue;
            if (so_far[j].output.empty()) return {vocab::kNone};
            return retrieve(*req.source, so_far[j].output.front());
        }
        return {vocab::kNone};
    };
}

// ---------------------------------------------------------------------------
// Paired comparison

struct ModeReport {
    std::string mode;
    double exact_match = 0.0;
    double token_f1 = 0.0;
    std::map<int, std::size_t> prefill_per_model;  // summed over the eval set (-1 = shared prefill)
    std::size_t prefill_total = 0;
    std::size_t peak_live_caches = 0;
    std::size_t peak_kv_bytes = 0;
    double seconds = 0.0;
    std::vector<std::vector<int>> answers;
    std::vector<ChainTrace> traces;
};

struct CompareReport {
    std::size_t n_examples = 0;
    ModeReport text;
    ModeReport fthss;
    double em_delta = 0.0;  // fthss - text
    std::size_t prefill_savings = 0;

    nlohmann::json to_json() const {
        auto mode = [](const ModeReport& m) {
            nlohmann::json per = nlohmann::json::object();
            for (const auto& [k, v] : m.prefill_per_model) per[std::to_string(k)] = v;
            return nlohmann::json{{"mode", m.mode},
                                  {"exact_match", m.exact_match},
                                  {"token_f1", m.token_f1},
                                  {"prefill_per_model", per},
                                  {"prefill_total", m.prefill_total},
                                  {"peak_live_caches", m.peak_live_caches},
                                  {"peak_kv_bytes", m.peak_kv_bytes},
                                  {"seconds", m.seconds}};
        };
        return {{"n_examples", n_examples},
                {"text", mode(text)},
                {"fthss", mode(fthss)},
                {"em_delta", em_delta},
                {"prefill_savings", prefill_savings}};
    }
};

template <typename T>
ModeReport evaluate_mode(const ModelWeights<T>& w, const ChainSpec<T>& spec, const Dataset& data, bool shared_cache) {
    ModeReport r;
    r.mode = shared_cache ? "fthss" : "text";
    std::vector<std::vector<int>> golds;
    for (const SyntheticExample& ex : data.examples) {
        const ChainRequest req{ex.id, ex.shared, &ex};
        ChainResult cr = shared_cache ? run_chain_fthss(w, spec, req) : run_chain_text(w, spec, req);
        for (const TraceStep& s : cr.trace.steps) {
            r.prefill_per_model[s.model_id] += s.prefill_tokens;
            r.seconds += s.seconds;
        }
        r.prefill_total += cr.trace.total_prefill();
        r.peak_live_caches = std::max(r.peak_live_caches, cr.trace.peak_live_caches);
        r.peak_kv_bytes = std::max(r.peak_kv_bytes, cr.trace.peak_kv_bytes());
        r.answers.push_back(cr.answer());
        golds.push_back(ex.answer);
        r.traces.push_back(std::move(cr.trace));
    }
    if (!golds.empty()) {
        r.exact_match = eval_exact_match(r.answers, golds);
        r.token_f1 = eval_token_f1(r.answers, golds);
    }
    return r;
}

/// Runs both runtimes over `data`. `text_spec` carries the standard prompts,
/// `fthss_spec` the shared-state prompts; everything else should match.
template <typename T>
CompareReport compare_chains(const ModelWeights<T>& w, const ChainSpec<T>& text_spec, const ChainSpec<T>& fthss_spec,
                             const Dataset& data) {
    CompareReport rep;
    rep.n_examples = data.examples.size();
    rep.text = evaluate_mode(w, text_spec, data, false);
    rep.fthss = evaluate_mode(w, fthss_spec, data, true);
    rep.em_delta = rep.fthss.exact_match - rep.text.exact_match;
    rep.prefill_savings = rep.text.prefill_total - std::min(rep.text.prefill_total, rep.fthss.prefill_total);
    return rep;
}

}  // namespace kvchain
