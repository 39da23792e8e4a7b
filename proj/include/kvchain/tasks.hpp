// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Seeded synthetic task families over a small symbolic vocabulary, plus the
// instruction-style pretraining corpus and EM / token-F1 metrics.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kvchain/sequence.hpp"

namespace kvchain {

struct SyntheticExample {
    int id = 0;
    std::vector<int> shared;
    std::vector<ChainStep> steps;  // gold transcript
    std::vector<int> answer;
    /// Lookup table the runtime may "retrieve" from (multi-round); key token
    /// -> fact tokens.
    std::map<int, std::vector<int>> table;

    friend bool operator==(const SyntheticExample&, const SyntheticExample&) = default;
};

struct Dataset {
    std::string family;
    std::vector<SyntheticExample> examples;

    std::size_t size() const noexcept { return examples.size(); }
};

/// Tokens with an explicit next-token target per position (-1 = no loss).
struct LmSequence {
    std::vector<int> tokens;
    std::vector<int> targets;

    /// Plain language-model targets: every position predicts its successor.
    static LmSequence next_token(std::vector<int> tokens) {
        LmSequence s;
        s.targets.assign(tokens.size(), -1);
        for (std::size_t i = 0; i + 1 < tokens.size(); ++i) s.targets[i] = tokens[i + 1];
        s.tokens = std::move(tokens);
        return s;
    }
};

namespace detail {

inline std::mt19937_64 example_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

/// `count` distinct draws from [base, base + range).
inline std::vector<int> distinct(std::mt19937_64& rng, int base, int range, std::size_t count) {
    KVCHAIN_CHECK(count <= static_cast<std::size_t>(range), ErrorCode::kInvalidArgument, "cannot draw ", count,
                  " distinct symbols from ", range);
    std::vector<int> pool(static_cast<std::size_t>(range));
    std::iota(pool.begin(), pool.end(), base);
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(count);
    return pool;
}

/// A fact is the key immediately followed by its value. A separator between
/// them would turn value lookup into a two-back match, which a two-layer base
/// does not pick up at desk-scale budgets.
inline std::vector<int> fact(int key, int value) { return {key, value}; }

/// Generic text stand-in: a random span over the key/value symbols, then the
/// same span again. Targets cover the repeat only, so the sequence teaches
/// "find the earlier occurrence and continue it" without any task marker.
inline LmSequence repeated_span(std::mt19937_64& rng, std::size_t min_len = 4, std::size_t max_len = 12) {
    const std::size_t len = std::uniform_int_distribution<std::size_t>(min_len, max_len)(rng);
    std::uniform_int_distribution<int> sym(vocab::kKeyBase, vocab::kValueBase + vocab::kValueCount - 1);
    std::vector<int> span(len);
    for (int& t : span) t = sym(rng);
    std::vector<int> tokens = span;
    tokens.insert(tokens.end(), span.begin(), span.end());
    LmSequence s = LmSequence::next_token(std::move(tokens));
    std::fill(s.targets.begin(), s.targets.begin() + static_cast<std::ptrdiff_t>(len), -1);
    return s;
}

}  // namespace detail

/// Compress -> answer: shared = [? key :] followed by a shuffled list of
/// `key value` facts separated by ';'. Model 0 copies the fact about the
/// question key, model 1 answers with its value. The question targets one of
/// `n_facts` candidate facts; `n_distractors` more facts never mention the
/// question key or its value.
inline Dataset gen_compress_qa(std::uint64_t seed, std::size_t n, std::size_t n_facts = 1,
                               std::size_t n_distractors = 6) {
    KVCHAIN_CHECK(n_facts >= 1, ErrorCode::kInvalidArgument, "gen_compress_qa: n_facts must be >= 1");
    const std::size_t total = n_facts + n_distractors;
    KVCHAIN_CHECK(total <= static_cast<std::size_t>(std::min(vocab::kKeyCount, vocab::kValueCount)),
                  ErrorCode::kInvalidArgument, "gen_compress_qa: too many facts for the vocabulary");
    Dataset ds{"compress_qa", {}};
    for (std::size_t i = 0; i < n; ++i) {
        auto rng = detail::example_rng(seed, 1, i);
        const std::vector<int> keys = detail::distinct(rng, vocab::kKeyBase, vocab::kKeyCount, total);
        const std::vector<int> values = detail::distinct(rng, vocab::kValueBase, vocab::kValueCount, total);
        const std::size_t target = std::uniform_int_distribution<std::size_t>(0, n_facts - 1)(rng);
        std::vector<std::size_t> order(total);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);

        SyntheticExample ex;
        ex.id = static_cast<int>(i);
        ex.shared = {vocab::kQuery, keys[target], vocab::kColon};
        for (std::size_t f = 0; f < total; ++f) {
            if (f > 0) ex.shared.push_back(vocab::kSep);
            const auto ft = detail::fact(keys[order[f]], values[order[f]]);
            ex.shared.insert(ex.shared.end(), ft.begin(), ft.end());
        }
        ex.answer = {values[target]};
        ex.steps = {{0, {}, detail::fact(keys[target], values[target])}, {1, {}, ex.answer}};
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

/// Plan / read chain over a lookup table: k1 -> k2 -> ... -> answer. Shared
/// holds only the question [? k1 :]. Round r: model 0 plans the next key to
/// look up, the runtime retrieves that key's fact from the table as model 1's
/// unique input, model 1 reads off the value. The last value is the answer.
/// Distractor table rows come from a separate stream seeded by
/// `distractor_seed`, so they never change the answer.
inline Dataset gen_multi_round(std::uint64_t seed, std::size_t n, std::size_t hops = 2,
                               std::size_t n_distractors = 6, std::uint64_t distractor_seed = 0) {
    KVCHAIN_CHECK(hops >= 2, ErrorCode::kInvalidArgument, "gen_multi_round: hops must be >= 2");
    KVCHAIN_CHECK(hops + n_distractors <= static_cast<std::size_t>(vocab::kKeyCount), ErrorCode::kInvalidArgument,
                  "gen_multi_round: too many keys for the vocabulary");
    Dataset ds{"multi_round", {}};
    for (std::size_t i = 0; i < n; ++i) {
        auto rng = detail::example_rng(seed, 2, i);
        const std::vector<int> chain = detail::distinct(rng, vocab::kKeyBase, vocab::kKeyCount, hops);
        const int answer = std::uniform_int_distribution<int>(0, vocab::kValueCount - 1)(rng) + vocab::kValueBase;

        SyntheticExample ex;
        ex.id = static_cast<int>(i);
        ex.shared = {vocab::kQuery, chain[0], vocab::kColon};
        for (std::size_t r = 0; r < hops; ++r) {
            const int next = r + 1 < hops ? chain[r + 1] : answer;
            ex.table[chain[r]] = detail::fact(chain[r], next);
            ex.steps.push_back({0, {}, {chain[r]}});
            ex.steps.push_back({1, detail::fact(chain[r], next), {next}});
        }
        ex.answer = {answer};

        auto drng = detail::example_rng(distractor_seed, 3, i);
        std::vector<int> free_keys;
        for (int k = vocab::kKeyBase; k < vocab::kKeyBase + vocab::kKeyCount; ++k) {
            if (std::find(chain.begin(), chain.end(), k) == chain.end()) free_keys.push_back(k);
        }
        std::shuffle(free_keys.begin(), free_keys.end(), drng);
        for (std::size_t d = 0; d < n_distractors; ++d) {
            const int v = std::uniform_int_distribution<int>(0, vocab::kValueCount - 1)(drng) + vocab::kValueBase;
            ex.table[free_keys[d]] = detail::fact(free_keys[d], v);
        }
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

/// Table lookup used as the multi-round retriever: the fact for `key`, or
/// [none] when the table has no such row.
inline std::vector<int> retrieve(const SyntheticExample& ex, int key) {
    const auto it = ex.table.find(key);
    return it == ex.table.end() ? std::vector<int>{vocab::kNone} : it->second;
}

// ---------------------------------------------------------------------------
// Metrics

inline double eval_exact_match(const std::vector<std::vector<int>>& predictions,
                               const std::vector<std::vector<int>>& golds) {
    KVCHAIN_CHECK(predictions.size() == golds.size(), ErrorCode::kInvalidArgument, "exact match: ",
                  predictions.size(), " predictions vs ", golds.size(), " golds");
    if (golds.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < golds.size(); ++i) hits += predictions[i] == golds[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(golds.size());
}

inline double token_f1(const std::vector<int>& pred, const std::vector<int>& gold) {
    if (pred.empty() && gold.empty()) return 1.0;
    if (pred.empty() || gold.empty()) return 0.0;
    std::map<int, int> counts;
    for (int t : gold) ++counts[t];
    std::size_t common = 0;
    for (int t : pred) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++common;
        }
    }
    if (common == 0) return 0.0;
    const double p = static_cast<double>(common) / static_cast<double>(pred.size());
    const double r = static_cast<double>(common) / static_cast<double>(gold.size());
    return 2.0 * p * r / (p + r);
}

inline double eval_token_f1(const std::vector<std::vector<int>>& predictions,
                            const std::vector<std::vector<int>>& golds) {
    KVCHAIN_CHECK(predictions.size() == golds.size(), ErrorCode::kInvalidArgument, "token f1: ",
                  predictions.size(), " predictions vs ", golds.size(), " golds");
    if (golds.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < golds.size(); ++i) total += token_f1(predictions[i], golds[i]);
    return total / static_cast<double>(golds.size());
}

// ---------------------------------------------------------------------------
// Pretraining corpus

/// Replaces every prompt piece by a block of marker tokens (one marker per
/// model) and keeps targets only on `model`'s outputs.
inline LmSequence render_with_instructions(const Sequence& seq, int model, const std::map<int, int>& instruction,
                                           std::size_t block_len) {
    LmSequence out;
    std::size_t pos = 0;
    for (const Piece& piece : seq.pieces) {
        if (piece.role.is_prompt()) {
            out.tokens.insert(out.tokens.end(), block_len, instruction.at(piece.role.model));
            out.targets.insert(out.targets.end(), block_len, -1);
        } else {
            out.tokens.insert(out.tokens.end(), piece.tokens.begin(), piece.tokens.end());
            for (std::size_t i = 0; i < piece.tokens.size(); ++i) {
                out.targets.push_back(piece.role == SegmentRole::output(model) ? seq.targets[pos + i] : -1);
            }
        }
        pos += piece.length();
    }
    return out;
}

/// Pretraining corpus. Half the sequences are generic repeated spans; the
/// other half are text-passing views of both task families with every prompt
/// replaced by a discrete marker block of random length 1..max_block. The base
/// thus knows each sub-task under a marker; answering a compress_qa question
/// directly is deliberately absent.
inline std::vector<LmSequence> gen_pretrain_corpus(std::uint64_t seed, std::size_t n, std::size_t max_block = 10) {
    KVCHAIN_CHECK(max_block >= 1, ErrorCode::kInvalidArgument, "pretrain corpus: max_block must be >= 1");
    const Dataset cqa = gen_compress_qa(seed ^ 0x5bd1e995ull, n);
    const Dataset mr = gen_multi_round(seed ^ 0x27d4eb2full, n, 2, 6, seed ^ 0x165667b1ull);
    std::vector<LmSequence> corpus;
    corpus.reserve(n);
    auto rng = detail::example_rng(seed, 4, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t block = std::uniform_int_distribution<std::size_t>(1, max_block)(rng);
        const int kind = static_cast<int>(i % 8) - 4;
        if (kind < 0) {
            corpus.push_back(detail::repeated_span(rng));
        } else if (kind < 2) {
            const SyntheticExample& ex = cqa.examples[i];
            const int model = kind;
            const std::map<int, int> instr{{0, vocab::kInstrBase + 0}, {1, vocab::kInstrBase + 1}};
            corpus.push_back(render_with_instructions(
                text_view(ex.shared, ex.steps, static_cast<std::size_t>(model), model, block), model, instr, block));
        } else {
            const SyntheticExample& ex = mr.examples[i];
            const int model = kind - 2;
            const std::map<int, int> instr{{0, vocab::kInstrBase + 2}, {1, vocab::kInstrBase + 3}};
            const int upto = last_step_of(ex.steps, model);
            corpus.push_back(render_with_instructions(
                text_view(ex.shared, ex.steps, static_cast<std::size_t>(upto), model, block), model, instr, block));
        }
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// JSON Lines

inline nlohmann::json example_to_json(const SyntheticExample& ex) {
    nlohmann::json segs = nlohmann::json::array();
    segs.push_back({{"role", "shared"}, {"tokens", ex.shared}});
    for (const ChainStep& st : ex.steps) {
        segs.push_back({{"role", to_string(SegmentRole::input(st.model))}, {"tokens", st.input}});
        segs.push_back({{"role", to_string(SegmentRole::output(st.model))}, {"tokens", st.output}});
    }
    nlohmann::json table = nlohmann::json::object();
    for (const auto& [k, v] : ex.table) table[std::to_string(k)] = v;
    return {{"id", ex.id}, {"segments", segs}, {"answer", ex.answer}, {"table", table}};
}

inline SyntheticExample example_from_json(const nlohmann::json& j) {
    SyntheticExample ex;
    ex.id = j.at("id").get<int>();
    ex.answer = j.at("answer").get<std::vector<int>>();
    const auto& segs = j.at("segments");
    KVCHAIN_CHECK(!segs.empty() && segs[0].at("role") == "shared", ErrorCode::kCorrupt,
                  "example json: first segment must be shared");
    ex.shared = segs[0].at("tokens").get<std::vector<int>>();
    KVCHAIN_CHECK(segs.size() % 2 == 1, ErrorCode::kCorrupt, "example json: steps must pair input and output");
    for (std::size_t s = 1; s < segs.size(); s += 2) {
        const SegmentRole in = role_from_string(segs[s].at("role").get<std::string>());
        const SegmentRole out = role_from_string(segs[s + 1].at("role").get<std::string>());
        KVCHAIN_CHECK(in.kind == SegmentRole::Kind::kUniqueInput && out.kind == SegmentRole::Kind::kOutput &&
                          in.model == out.model,
                      ErrorCode::kCorrupt, "example json: malformed step at segment ", s);
        ex.steps.push_back({out.model, segs[s].at("tokens").get<std::vector<int>>(),
                            segs[s + 1].at("tokens").get<std::vector<int>>()});
    }
    if (j.contains("table")) {
        for (const auto& [k, v] : j.at("table").items()) ex.table[std::stoi(k)] = v.get<std::vector<int>>();
    }
    return ex;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    KVCHAIN_CHECK(out.good(), ErrorCode::kIo, "cannot open ", path.string(), " for writing");
    for (const SyntheticExample& ex : ds.examples) out << example_to_json(ex).dump() << '\n';
    KVCHAIN_CHECK(out.good(), ErrorCode::kIo, "write failed for ", path.string());
}

inline Dataset load_dataset(const std::filesystem::path& path, std::string family = "") {
    std::ifstream in(path);
    KVCHAIN_CHECK(in.good(), ErrorCode::kIo, "cannot open ", path.string());
    Dataset ds{std::move(family), {}};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            ds.examples.push_back(example_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            detail::fail(ErrorCode::kCorrupt, path.string(), ":", line_no, ": ", e.what());
        }
    }
    return ds;
}

}  // namespace kvchain
