// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Training regimes: base pretraining, standard prompt tuning, shared-state
// prompt tuning for a downstream model (stored-cache and recompute variants),
// synchronous multi-round tuning, continuation from a standard prompt, and a
// finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kvchain/model.hpp"
#include "kvchain/optim.hpp"
#include "kvchain/prompt.hpp"
#include "kvchain/sequence.hpp"
#include "kvchain/serialize.hpp"
#include "kvchain/tasks.hpp"

namespace kvchain {

struct TrainConfig {
    double lr = 1e-3;
    long steps = 200;
    std::size_t batch_size = 8;
    double warmup = 0.05;
    std::uint64_t seed = 0;
    std::size_t n_prompt_tokens = 10;
    double max_grad_norm = 1.0;  // <= 0 disables clipping
    MaskRule mask_rule{};
    /// Stored-cache variant: directory for per-example upstream caches.
    std::filesystem::path cache_dir;
    std::ostream* log = nullptr;  // one JSON object per step

    void validate() const {
        KVCHAIN_CHECK(lr > 0.0 && steps >= 0 && batch_size >= 1 && warmup >= 0.0 && warmup < 1.0 &&
                          n_prompt_tokens >= 1,
                      ErrorCode::kInvalidArgument, "train config: hyperparameters must be positive");
    }
};

struct StepLog {
    long step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    std::string mode;
};

template <typename T>
struct PromptTrainResult {
    std::vector<PromptParams<T>> prompts;
    std::vector<StepLog> log;
};

// ---------------------------------------------------------------------------
// Sequence plumbing

namespace detail {

/// Rows for every piece: vocabulary lookups from the (frozen or trainable)
/// embedding table, prompt rows from the bound prompt variables.
template <typename T>
typename Graph<T>::Var assemble_inputs(Graph<T>& g, typename Graph<T>::Var table, const Sequence& seq,
                                       const std::map<int, typename Graph<T>::Var>& prompts,
                                       std::size_t first_piece = 0) {
    std::vector<typename Graph<T>::Var> parts;
    for (std::size_t p = first_piece; p < seq.pieces.size(); ++p) {
        const Piece& piece = seq.pieces[p];
        if (piece.role.is_prompt()) {
            const auto it = prompts.find(piece.role.model);
            KVCHAIN_CHECK(it != prompts.end(), ErrorCode::kInvalidArgument, "no prompt bound for model ",
                          piece.role.model);
            KVCHAIN_CHECK(g.value(it->second).rows() == piece.prompt_len, ErrorCode::kShapeMismatch,
                          "prompt for model ", piece.role.model, " has ", g.value(it->second).rows(),
                          " rows, layout expects ", piece.prompt_len);
            parts.push_back(it->second);
        } else {
            parts.push_back(ops::gather_rows(g, table, std::span<const int>(piece.tokens)));
        }
    }
    return parts.size() == 1 ? parts.front() : ops::concat_rows(g, parts);
}

template <typename T>
Tensor<T> assemble_inputs_tensor(const ModelWeights<T>& w, const Sequence& seq,
                                 const std::map<int, const PromptParams<T>*>& prompts, std::size_t first_piece = 0,
                                 std::size_t end_piece = static_cast<std::size_t>(-1)) {
    Graph<T> g(false);
    std::map<int, typename Graph<T>::Var> bound;
    for (const auto& [m, p] : prompts) bound[m] = g.constant_ref(p->embeddings);
    Sequence sub;
    end_piece = std::min(end_piece, seq.pieces.size());
    for (std::size_t p = first_piece; p < end_piece; ++p) sub.pieces.push_back(seq.pieces[p]);
    return g.value(assemble_inputs(g, g.constant_ref(w.embedding), sub, bound));
}

/// Summed per-model mean cross-entropy over the `models`' output tokens of
/// the pieces from `first_piece` on.
template <typename T>
typename Graph<T>::Var sequence_loss(Graph<T>& g, const ModelConfig& cfg, const BoundWeights<T>& bw,
                                     const Sequence& seq, const std::map<int, typename Graph<T>::Var>& prompts,
                                     const std::vector<int>& models, const MaskRule& rule,
                                     const KvCache<T>* past = nullptr, std::size_t first_piece = 0) {
    Sequence sub;
    std::size_t offset = 0;
    for (std::size_t p = 0; p < first_piece; ++p) offset += seq.pieces[p].length();
    for (std::size_t p = first_piece; p < seq.pieces.size(); ++p) sub.pieces.push_back(seq.pieces[p]);
    sub.targets.assign(seq.targets.begin() + static_cast<std::ptrdiff_t>(offset), seq.targets.end());

    const std::int64_t start = past ? past->next_position() : 0;
    const SegmentLayout layout = sub.layout(start);
    const std::vector<SegmentRole> roles = layout.roles();
    const std::vector<std::int64_t> positions = assign_positions(layout);
    auto x = assemble_inputs(g, bw.embedding, sub, prompts);
    const GraphForward<T> f = forward_graph(g, cfg, bw, x, roles, positions, past, rule);

    std::vector<int> targets(sub.targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = std::max(sub.targets[i], 0);
    std::optional<typename Graph<T>::Var> total;
    for (int m : models) {
        const std::vector<std::uint8_t> mask = loss_mask(layout, m);
        auto l = ops::cross_entropy(g, f.logits, std::span<const int>(targets), std::span<const std::uint8_t>(mask));
        total = total ? ops::add(g, *total, l) : l;
    }
    KVCHAIN_CHECK(total.has_value(), ErrorCode::kInvalidArgument, "sequence_loss: no models to score");
    return *total;
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, long epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(epoch) + 1);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

/// Deterministic batch schedule: reshuffled each pass over the data.
class BatchSchedule {
public:
    BatchSchedule(std::size_t n, std::size_t batch, std::uint64_t seed) : m_n(n), m_batch(batch), m_seed(seed) {}

    std::vector<std::size_t> next() {
        std::vector<std::size_t> out;
        while (out.size() < m_batch) {
            if (m_at == m_order.size()) {
                m_order = epoch_order(m_n, m_seed, m_epoch++);
                m_at = 0;
            }
            out.push_back(m_order[m_at++]);
        }
        return out;
    }

private:
    std::size_t m_n, m_batch;
    std::uint64_t m_seed;
    std::vector<std::size_t> m_order;
    std::size_t m_at = 0;
    long m_epoch = 0;
};

template <typename T>
double global_norm(const std::vector<Tensor<T>>& grads) {
    double s = 0.0;
    for (const Tensor<T>& g : grads) {
        for (T v : g.values()) s += static_cast<double>(v) * static_cast<double>(v);
    }
    return std::sqrt(s);
}

inline void write_log(std::ostream* os, const StepLog& s) {
    if (!os) return;
    *os << nlohmann::json{{"step", s.step}, {"loss", s.loss}, {"grad_norm", s.grad_norm}, {"mode", s.mode}}.dump()
        << '\n';
}

/// Per-example loss/gradient callback: returns the loss and adds d loss / d
/// prompt into `grads` (one tensor per trained prompt, in order).
template <typename T>
using ExampleGrad = std::function<double(std::size_t example, std::vector<Tensor<T>>& grads)>;

/// Shared optimisation loop over prompt parameters.
template <typename T>
std::vector<StepLog> optimise_prompts(std::vector<PromptParams<T>*> trained, std::size_t n_examples,
                                      const TrainConfig& tc, const std::string& mode, const ExampleGrad<T>& grad_fn) {
    tc.validate();
    KVCHAIN_CHECK(n_examples > 0 || tc.steps == 0, ErrorCode::kInvalidArgument, "training data is empty");
    std::vector<Tensor<T>*> params;
    for (PromptParams<T>* p : trained) params.push_back(&p->embeddings);
    Adam<T> adam(params, AdamConfig{tc.lr});
    BatchSchedule batches(std::max<std::size_t>(n_examples, 1), tc.batch_size, tc.seed);
    std::vector<StepLog> log;
    for (long step = 0; step < tc.steps; ++step) {
        std::vector<Tensor<T>> grads;
        for (Tensor<T>* p : params) grads.emplace_back(p->shape());
        double loss = 0.0;
        const std::vector<std::size_t> batch = batches.next();
        for (std::size_t idx : batch) loss += grad_fn(idx, grads);
        const T inv = T(1) / static_cast<T>(batch.size());
        for (Tensor<T>& g : grads) {
            for (T& v : g.values()) v *= inv;
        }
        loss /= static_cast<double>(batch.size());
        KVCHAIN_CHECK(std::isfinite(loss), ErrorCode::kNumeric, mode, ": loss diverged at step ", step);
        const double norm = global_norm(grads);
        if (tc.max_grad_norm > 0.0 && norm > tc.max_grad_norm) {
            const T s = static_cast<T>(tc.max_grad_norm / norm);
            for (Tensor<T>& g : grads) {
                for (T& v : g.values()) v *= s;
            }
        }
        std::vector<const Tensor<T>*> gp;
        for (const Tensor<T>& g : grads) gp.push_back(&g);
        adam.step(gp, scheduled_lr(tc.lr, step, tc.steps, tc.warmup));
        log.push_back({step, loss, norm, mode});
        write_log(tc.log, log.back());
    }
    return log;
}

template <typename T>
void check_upstream(const std::vector<const PromptParams<T>*>& upstream) {
    for (const PromptParams<T>* p : upstream) {
        KVCHAIN_CHECK(p->trained, ErrorCode::kPrecondition, "upstream prompt for model ", p->model_id,
                      " is not trained; train the chain in order");
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Base pretraining

template <typename T>
struct PretrainResult {
    ModelWeights<T> weights;
    std::vector<StepLog> log;
};

/// Mean next-token loss over positions with a target.
template <typename T>
double lm_loss(const ModelWeights<T>& w, const std::vector<LmSequence>& corpus) {
    double total = 0.0;
    for (const LmSequence& s : corpus) {
        Graph<T> g(false);
        const BoundWeights<T> bw = bind_weights(g, w, false);
        SegmentLayout layout(0);
        layout.append(SegmentRole::shared(), s.tokens.size());
        const auto roles = layout.roles();
        const auto positions = assign_positions(layout);
        const auto x = ops::gather_rows(g, bw.embedding, std::span<const int>(s.tokens));
        const GraphForward<T> f = forward_graph(g, w.config, bw, x, roles, positions,
                                                static_cast<const KvCache<T>*>(nullptr), MaskRule{});
        std::vector<int> targets(s.targets.size());
        std::vector<std::uint8_t> mask(s.targets.size());
        for (std::size_t i = 0; i < targets.size(); ++i) {
            targets[i] = std::max(s.targets[i], 0);
            mask[i] = s.targets[i] >= 0 ? 1 : 0;
        }
        total += static_cast<double>(g.value(ops::cross_entropy(g, f.logits, std::span<const int>(targets),
                                                                std::span<const std::uint8_t>(mask)))[0]);
    }
    return corpus.empty() ? 0.0 : total / static_cast<double>(corpus.size());
}

/// Trains every weight of a freshly initialised base on `corpus` with plain
/// causal masking. Zero steps returns the initialisation.
template <typename T>
PretrainResult<T> pretrain_base(const ModelConfig& config, const std::vector<LmSequence>& corpus,
                                const TrainConfig& tc) {
    tc.validate();
    KVCHAIN_CHECK(!corpus.empty(), ErrorCode::kInvalidArgument, "pretrain: corpus is empty");
    PretrainResult<T> out{ModelWeights<T>::init(config, tc.seed), {}};
    std::vector<Tensor<T>*> params;
    out.weights.for_each_tensor([&params](const std::string&, Tensor<T>& t) { params.push_back(&t); });
    Adam<T> adam(params, AdamConfig{tc.lr});
    detail::BatchSchedule batches(corpus.size(), tc.batch_size, tc.seed);
    for (long step = 0; step < tc.steps; ++step) {
        std::vector<Tensor<T>> grads;
        for (Tensor<T>* p : params) grads.emplace_back(p->shape());
        double loss = 0.0;
        const std::vector<std::size_t> batch = batches.next();
        for (std::size_t idx : batch) {
            const LmSequence& s = corpus[idx];
            Graph<T> g(true);
            const BoundWeights<T> bw = bind_weights(g, out.weights, true);
            SegmentLayout layout(0);
            layout.append(SegmentRole::shared(), s.tokens.size());
            const auto roles = layout.roles();
            const auto positions = assign_positions(layout);
            const auto x = ops::gather_rows(g, bw.embedding, std::span<const int>(s.tokens));
            const GraphForward<T> f = forward_graph(g, config, bw, x, roles, positions,
                                                    static_cast<const KvCache<T>*>(nullptr), MaskRule{});
            std::vector<int> targets(s.targets.size());
            std::vector<std::uint8_t> mask(s.targets.size());
            for (std::size_t i = 0; i < targets.size(); ++i) {
                targets[i] = std::max(s.targets[i], 0);
                mask[i] = s.targets[i] >= 0 ? 1 : 0;
            }
            const auto l = ops::cross_entropy(g, f.logits, std::span<const int>(targets),
                                              std::span<const std::uint8_t>(mask));
            loss += static_cast<double>(g.value(l)[0]);
            g.backward(l);
            const auto ids = g.parameter_ids();
            for (std::size_t p = 0; p < params.size(); ++p) {
                const Tensor<T> gp = g.grad(typename Graph<T>::Var{ids[p], &g});
                for (std::size_t i = 0; i < gp.size(); ++i) grads[p][i] += gp[i];
            }
        }
        const T inv = T(1) / static_cast<T>(batch.size());
        for (Tensor<T>& gr : grads) {
            for (T& v : gr.values()) v *= inv;
        }
        loss /= static_cast<double>(batch.size());
        KVCHAIN_CHECK(std::isfinite(loss), ErrorCode::kNumeric, "pretrain: loss diverged at step ", step);
        const double norm = detail::global_norm(grads);
        if (tc.max_grad_norm > 0.0 && norm > tc.max_grad_norm) {
            const T s = static_cast<T>(tc.max_grad_norm / norm);
            for (Tensor<T>& gr : grads) {
                for (T& v : gr.values()) v *= s;
            }
        }
        std::vector<const Tensor<T>*> gp;
        for (const Tensor<T>& gr : grads) gp.push_back(&gr);
        adam.step(gp, scheduled_lr(tc.lr, step, tc.steps, tc.warmup));
        out.log.push_back({step, loss, norm, "pretrain"});
        detail::write_log(tc.log, out.log.back());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prompt tuning

/// Loss and prompt gradients of one sequence. `trained` prompts are graph
/// parameters, `frozen` ones plain inputs.
template <typename T>
double prompt_sequence_grad(const ModelWeights<T>& base, const Sequence& seq,
                            const std::vector<const PromptParams<T>*>& trained,
                            const std::vector<const PromptParams<T>*>& frozen, const std::vector<int>& loss_models,
                            const MaskRule& rule, std::vector<Tensor<T>>& grads, const KvCache<T>* past = nullptr,
                            std::size_t first_piece = 0) {
    Graph<T> g(true);
    const BoundWeights<T> bw = bind_weights(g, base, false);
    std::map<int, typename Graph<T>::Var> bound;
    std::vector<typename Graph<T>::Var> trained_vars;
    for (const PromptParams<T>* p : frozen) bound[p->model_id] = g.constant_ref(p->embeddings);
    for (const PromptParams<T>* p : trained) {
        trained_vars.push_back(g.parameter(p->embeddings));
        bound[p->model_id] = trained_vars.back();
    }
    const auto loss = detail::sequence_loss(g, base.config, bw, seq, bound, loss_models, rule, past, first_piece);
    g.backward(loss);
    for (std::size_t i = 0; i < trained_vars.size(); ++i) {
        const Tensor<T> gi = g.grad(trained_vars[i]);
        for (std::size_t e = 0; e < gi.size(); ++e) grads[i][e] += gi[e];
    }
    return static_cast<double>(g.value(loss)[0]);
}

/// Standard prompt tuning of `model_id` on its text-passing view: shared,
/// upstream outputs as text, prompt, unique input, output.
template <typename T>
PromptTrainResult<T> train_standard_prompt(const ModelWeights<T>& base, const Dataset& data, int model_id,
                                           const TrainConfig& tc, std::optional<PromptParams<T>> init = {}) {
    std::vector<Sequence> seqs;
    for (const SyntheticExample& ex : data.examples) {
        const int last = last_step_of(ex.steps, model_id);
        KVCHAIN_CHECK(last >= 0, ErrorCode::kInvalidArgument, "example ", ex.id, " has no step for model ", model_id);
        seqs.push_back(text_view(ex.shared, ex.steps, static_cast<std::size_t>(last), model_id, tc.n_prompt_tokens));
    }
    PromptParams<T> prompt =
        init ? *init : PromptParams<T>::init(model_id, tc.n_prompt_tokens, base.config.d_model, tc.seed);
    std::vector<PromptParams<T>*> trained{&prompt};
    auto log = detail::optimise_prompts<T>(trained, seqs.size(), tc, "standard",
                                           [&](std::size_t i, std::vector<Tensor<T>>& grads) {
                                               return prompt_sequence_grad<T>(base, seqs[i], {&prompt}, {},
                                                                              {model_id}, MaskRule{false}, grads);
                                           });
    prompt.trained = true;
    return {{prompt}, std::move(log)};
}

/// The shared-cache training view of an example up to the target model's
/// last step, with upstream prompts placed at first use.
inline Sequence single_round_sequence(const SyntheticExample& ex, int target_model,
                                      const std::map<int, std::size_t>& prompt_lens) {
    const int last = last_step_of(ex.steps, target_model);
    KVCHAIN_CHECK(last >= 0, ErrorCode::kInvalidArgument, "example ", ex.id, " has no step for model ",
                  target_model);
    return cascade_view(ex.shared, ex.steps, static_cast<std::size_t>(last), prompt_lens, PromptPlacement::kFirstUse);
}

namespace detail {

template <typename T>
std::map<int, std::size_t> prompt_lengths(const std::vector<const PromptParams<T>*>& upstream, int target,
                                          std::size_t target_len) {
    std::map<int, std::size_t> lens;
    for (const PromptParams<T>* p : upstream) lens[p->model_id] = p->n_tokens();
    lens[target] = target_len;
    return lens;
}

/// Index of the target model's prompt piece: everything before it is
/// upstream context.
inline std::size_t target_prompt_piece(const Sequence& seq, int target) {
    for (std::size_t p = 0; p < seq.pieces.size(); ++p) {
        if (seq.pieces[p].role == SegmentRole::prompt(target)) return p;
    }
    detail::fail(ErrorCode::kInvalidArgument, "sequence has no prompt for model ", target);
}

inline std::filesystem::path cache_path(const std::filesystem::path& dir, int example_id, std::uint64_t hash) {
    std::ostringstream name;
    name << "ex" << example_id << "-" << std::hex << hash << ".kvc";
    return dir / name.str();
}

}  // namespace detail

/// Recompute variant: each step runs one masked pass over shared, upstream
/// prompts/inputs/outputs and the target's segments, scoring only the
/// target's outputs. Upstream prompts are inputs, never parameters.
template <typename T>
PromptTrainResult<T> train_fthss_online(const ModelWeights<T>& base, const std::vector<const PromptParams<T>*>& upstream,
                                        const Dataset& data, int target_model, const TrainConfig& tc,
                                        std::optional<PromptParams<T>> init = {}) {
    detail::check_upstream(upstream);
    const auto lens = detail::prompt_lengths(upstream, target_model, tc.n_prompt_tokens);
    std::vector<Sequence> seqs;
    for (const SyntheticExample& ex : data.examples) seqs.push_back(single_round_sequence(ex, target_model, lens));
    PromptParams<T> prompt =
        init ? *init : PromptParams<T>::init(target_model, tc.n_prompt_tokens, base.config.d_model, tc.seed);
    KVCHAIN_CHECK(prompt.n_tokens() == tc.n_prompt_tokens, ErrorCode::kShapeMismatch,
                  "initial prompt length differs from n_prompt_tokens");
    std::vector<PromptParams<T>*> trained{&prompt};
    auto log = detail::optimise_prompts<T>(trained, seqs.size(), tc, "fthss-online",
                                           [&](std::size_t i, std::vector<Tensor<T>>& grads) {
                                               return prompt_sequence_grad<T>(base, seqs[i], {&prompt}, upstream,
                                                                              {target_model}, tc.mask_rule, grads);
                                           });
    prompt.trained = true;
    return {{prompt}, std::move(log)};
}

/// Stage one of the stored-cache variant: for every example, prefill the
/// upstream part of the shared-cache view with the trained upstream prompts
/// and save the entries the target can see (prompt entries dropped when
/// foreign prompts are masked). Returns the paths.
template <typename T>
std::vector<std::filesystem::path> materialise_upstream_caches(const ModelWeights<T>& base,
                                                               const std::vector<const PromptParams<T>*>& upstream,
                                                               const Dataset& data, int target_model,
                                                               std::size_t target_prompt_len,
                                                               const std::filesystem::path& dir, const MaskRule& rule) {
    detail::check_upstream(upstream);
    KVCHAIN_CHECK(!dir.empty(), ErrorCode::kInvalidArgument, "stored-cache training needs a cache directory");
    const auto lens = detail::prompt_lengths(upstream, target_model, target_prompt_len);
    std::map<int, const PromptParams<T>*> prompts;
    for (const PromptParams<T>* p : upstream) prompts[p->model_id] = p;
    std::vector<std::filesystem::path> paths;
    for (const SyntheticExample& ex : data.examples) {
        const Sequence seq = single_round_sequence(ex, target_model, lens);
        const std::size_t split = detail::target_prompt_piece(seq, target_model);
        const Tensor<T> x = detail::assemble_inputs_tensor(base, seq, prompts, 0, split);
        Sequence upstream_part;
        upstream_part.pieces.assign(seq.pieces.begin(), seq.pieces.begin() + static_cast<std::ptrdiff_t>(split));
        KvCache<T> cache = KvCache<T>::for_config(base.config);
        prefill(base, x, upstream_part.layout(0), cache, rule);
        if (rule.mask_foreign_prompts) {
            cache = filter_cache(cache, [](const SegmentRole& r) { return !r.is_prompt(); });
        }
        paths.push_back(detail::cache_path(dir, ex.id, base.config.hash()));
        save_cache(cache, paths.back());
    }
    return paths;
}

/// Stored-cache variant: stage one writes upstream caches to
/// tc.cache_dir, stage two trains the target prompt reading them back, with
/// the target's positions continuing after the cached content.
template <typename T>
PromptTrainResult<T> train_fthss_offline(const ModelWeights<T>& base,
                                         const std::vector<const PromptParams<T>*>& upstream, const Dataset& data,
                                         int target_model, const TrainConfig& tc,
                                         std::optional<PromptParams<T>> init = {}) {
    detail::check_upstream(upstream);
    materialise_upstream_caches(base, upstream, data, target_model, tc.n_prompt_tokens, tc.cache_dir, tc.mask_rule);
    const auto lens = detail::prompt_lengths(upstream, target_model, tc.n_prompt_tokens);
    std::vector<Sequence> seqs;
    for (const SyntheticExample& ex : data.examples) seqs.push_back(single_round_sequence(ex, target_model, lens));
    PromptParams<T> prompt =
        init ? *init : PromptParams<T>::init(target_model, tc.n_prompt_tokens, base.config.d_model, tc.seed);
    std::vector<PromptParams<T>*> trained{&prompt};
    const std::uint64_t hash = base.config.hash();
    auto log = detail::optimise_prompts<T>(
        trained, seqs.size(), tc, "fthss-offline", [&](std::size_t i, std::vector<Tensor<T>>& grads) {
            const std::filesystem::path path = detail::cache_path(tc.cache_dir, data.examples[i].id, hash);
            KVCHAIN_CHECK(std::filesystem::exists(path), ErrorCode::kIo, "missing upstream cache ", path.string());
            const KvCache<T> past = load_cache<T>(path, hash);
            const std::size_t split = detail::target_prompt_piece(seqs[i], target_model);
            return prompt_sequence_grad<T>(base, seqs[i], {&prompt}, {}, {target_model}, tc.mask_rule, grads, &past,
                                           split);
        });
    prompt.trained = true;
    return {{prompt}, std::move(log)};
}

/// Synchronous multi-round tuning: one cascade sequence per example with
/// every prompt after the shared content; the loss sums each model's mean
/// output loss and all prompts update together.
template <typename T>
PromptTrainResult<T> train_fthss_multi_round(const ModelWeights<T>& base, const Dataset& data,
                                             const std::vector<int>& models, const TrainConfig& tc,
                                             std::vector<PromptParams<T>> init = {}) {
    KVCHAIN_CHECK(!models.empty(), ErrorCode::kInvalidArgument, "multi-round: no models");
    std::map<int, std::size_t> lens;
    for (int m : models) lens[m] = tc.n_prompt_tokens;
    std::vector<Sequence> seqs;
    for (const SyntheticExample& ex : data.examples) {
        for (int m : models) {
            KVCHAIN_CHECK(last_step_of(ex.steps, m) >= 0, ErrorCode::kInvalidArgument, "example ", ex.id,
                          " is missing rounds for model ", m);
        }
        seqs.push_back(cascade_view(ex.shared, ex.steps, ex.steps.size() - 1, lens, PromptPlacement::kFront));
    }
    std::vector<PromptParams<T>> prompts = std::move(init);
    if (prompts.empty()) {
        for (int m : models) {
            prompts.push_back(PromptParams<T>::init(m, tc.n_prompt_tokens, base.config.d_model, tc.seed));
        }
    }
    KVCHAIN_CHECK(prompts.size() == models.size(), ErrorCode::kInvalidArgument, "multi-round: prompt count mismatch");
    std::vector<PromptParams<T>*> trained;
    std::vector<const PromptParams<T>*> trained_const;
    for (PromptParams<T>& p : prompts) {
        trained.push_back(&p);
        trained_const.push_back(&p);
    }
    auto log = detail::optimise_prompts<T>(trained, seqs.size(), tc, "fthss-multiround",
                                           [&](std::size_t i, std::vector<Tensor<T>>& grads) {
                                               return prompt_sequence_grad<T>(base, seqs[i], trained_const, {},
                                                                              models, tc.mask_rule, grads);
                                           });
    for (PromptParams<T>& p : prompts) p.trained = true;
    return {std::move(prompts), std::move(log)};
}

/// Continuation: start from a standard prompt and tune it on `small` with
/// the recompute objective. An empty set returns the standard prompt.
template <typename T>
PromptTrainResult<T> continue_fthss(const ModelWeights<T>& base, const std::vector<const PromptParams<T>*>& upstream,
                                    const PromptParams<T>& standard, const Dataset& small, const TrainConfig& tc) {
    KVCHAIN_CHECK(standard.trained, ErrorCode::kPrecondition, "continuation needs a trained standard prompt");
    if (small.examples.empty() || tc.steps == 0) return {{standard}, {}};
    TrainConfig t = tc;
    t.n_prompt_tokens = standard.n_tokens();
    return train_fthss_online(base, upstream, small, standard.model_id, t, std::optional<PromptParams<T>>(standard));
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
};

/// Central differences of `loss` against `analytic` on `n_coords` random
/// coordinates of `param` (perturbed in place and restored).
inline GradCheckResult grad_check(const std::function<double()>& loss, Tensor<double>& param,
                                  const Tensor<double>& analytic, std::size_t n_coords, double step,
                                  std::uint64_t seed = 0) {
    KVCHAIN_CHECK(analytic.size() == param.size(), ErrorCode::kShapeMismatch, "grad_check: shape mismatch");
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> idx(param.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(n_coords, idx.size()));
    GradCheckResult r;
    for (std::size_t i : idx) {
        const double orig = param[i];
        param[i] = orig + step;
        const double up = loss();
        param[i] = orig - step;
        const double down = loss();
        param[i] = orig;
        const double numeric = (up - down) / (2.0 * step);
        const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-8});
        r.max_rel_error = std::max(r.max_rel_error, std::abs(numeric - analytic[i]) / denom);
        ++r.coordinates;
    }
    return r;
}

}  // namespace kvchain
