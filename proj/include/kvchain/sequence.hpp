// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Role-labelled token sequences and the two ways a chain transcript is laid
// out for a model: the text-passing view (one model reads everyone else's
// outputs as plain tokens) and the cascade view (one shared sequence, prompts
// of every model present, foreign prompts masked).

#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "kvchain/layout.hpp"

namespace kvchain {

namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kStop = 1;
inline constexpr int kStart = 2;  // begin-of-output, shared by every model
inline constexpr int kQuery = 3;
inline constexpr int kSep = 4;
// 5 is reserved.
inline constexpr int kColon = 6;
inline constexpr int kNone = 7;
inline constexpr int kInstrBase = 8;  // discrete task markers used by pretraining
inline constexpr int kInstrCount = 8;
inline constexpr int kKeyBase = 16;
inline constexpr int kKeyCount = 24;
inline constexpr int kValueBase = 40;
inline constexpr int kValueCount = 24;
inline constexpr int kSize = 64;
}  // namespace vocab

/// A run of tokens with one role. Prompt pieces carry no tokens, only a
/// length; their embeddings come from PromptParams.
struct Piece {
    SegmentRole role;
    std::vector<int> tokens;
    std::size_t prompt_len = 0;

    std::size_t length() const noexcept { return role.is_prompt() ? prompt_len : tokens.size(); }
};

struct Sequence {
    std::vector<Piece> pieces;
    std::vector<int> targets;  // next-token target per position, -1 where none

    std::size_t length() const noexcept { return targets.size(); }

    SegmentLayout layout(std::int64_t start = 0) const {
        SegmentLayout l(start);
        for (const Piece& p : pieces) l.append(p.role, p.length());
        return l;
    }

    void add_tokens(SegmentRole role, const std::vector<int>& tokens) {
        if (tokens.empty()) return;
        pieces.push_back({role, tokens, 0});
        targets.insert(targets.end(), tokens.size(), -1);
    }

    void add_prompt(int model, std::size_t len) {
        if (len == 0) return;
        pieces.push_back({SegmentRole::prompt(model), {}, len});
        targets.insert(targets.end(), len, -1);
    }

    /// Teacher-forced output: inputs [start, out...], targets [out..., stop].
    void add_output(int model, const std::vector<int>& out) {
        std::vector<int> in{vocab::kStart};
        in.insert(in.end(), out.begin(), out.end());
        pieces.push_back({SegmentRole::output(model), in, 0});
        targets.insert(targets.end(), out.begin(), out.end());
        targets.push_back(vocab::kStop);
    }

    /// Per-position loss mask for a model's outputs.
    std::vector<std::uint8_t> loss_mask_for(int model) const { return loss_mask(layout(), model); }

    /// All tokens in order; prompt positions are reported as kPad.
    std::vector<int> flat_tokens() const {
        std::vector<int> out;
        out.reserve(length());
        for (const Piece& p : pieces) {
            if (p.role.is_prompt()) {
                out.insert(out.end(), p.prompt_len, vocab::kPad);
            } else {
                out.insert(out.end(), p.tokens.begin(), p.tokens.end());
            }
        }
        return out;
    }
};

/// One model invocation inside a transcript.
struct ChainStep {
    int model = 0;
    std::vector<int> input;   // unique input prefilled before decoding
    std::vector<int> output;  // generated tokens, without start/stop

    friend bool operator==(const ChainStep&, const ChainStep&) = default;
};

/// Where prompts sit in the cascade layout.
enum class PromptPlacement {
    kFirstUse,  // each prompt right before its model's first step
    kFront,     // every prompt right after the shared content
};

inline const char* to_string(PromptPlacement p) { return p == PromptPlacement::kFront ? "front" : "first-use"; }

/// What `model` sees in the text-passing chain when running step `upto`:
/// shared content, then the transcript, with its own prompt inserted at its
/// first activation and its own outputs kept as outputs. Other models'
/// inputs and outputs arrive as plain text tagged input(model).
inline Sequence text_view(const std::vector<int>& shared, const std::vector<ChainStep>& steps, std::size_t upto,
                          int model, std::size_t prompt_len) {
    KVCHAIN_CHECK(upto < steps.size(), ErrorCode::kInvalidArgument, "text_view: step ", upto, " out of range");
    KVCHAIN_CHECK(steps[upto].model == model, ErrorCode::kInvalidArgument, "text_view: step ", upto,
                  " belongs to model ", steps[upto].model);
    Sequence s;
    s.add_tokens(SegmentRole::shared(), shared);
    bool prompted = false;
    for (std::size_t j = 0; j <= upto; ++j) {
        const ChainStep& st = steps[j];
        if (st.model == model) {
            if (!prompted) {
                s.add_prompt(model, prompt_len);
                prompted = true;
            }
            s.add_tokens(SegmentRole::input(model), st.input);
            s.add_output(model, st.output);
        } else {
            s.add_tokens(SegmentRole::input(model), st.input);
            s.add_tokens(SegmentRole::input(model), st.output);
        }
    }
    return s;
}

/// The shared-cache layout: shared content, then every step's unique input
/// and output in order, each model's prompt placed per `placement`.
inline Sequence cascade_view(const std::vector<int>& shared, const std::vector<ChainStep>& steps, std::size_t upto,
                             const std::map<int, std::size_t>& prompt_lens, PromptPlacement placement) {
    KVCHAIN_CHECK(upto < steps.size(), ErrorCode::kInvalidArgument, "cascade_view: step ", upto, " out of range");
    auto len_of = [&prompt_lens](int m) {
        const auto it = prompt_lens.find(m);
        KVCHAIN_CHECK(it != prompt_lens.end() && it->second >= 1, ErrorCode::kInvalidArgument,
                      "cascade_view: no prompt length for model ", m);
        return it->second;
    };
    Sequence s;
    s.add_tokens(SegmentRole::shared(), shared);
    std::set<int> prompted;
    if (placement == PromptPlacement::kFront) {
        for (std::size_t j = 0; j <= upto; ++j) {
            if (prompted.insert(steps[j].model).second) s.add_prompt(steps[j].model, len_of(steps[j].model));
        }
    }
    for (std::size_t j = 0; j <= upto; ++j) {
        const ChainStep& st = steps[j];
        if (prompted.insert(st.model).second) s.add_prompt(st.model, len_of(st.model));
        s.add_tokens(SegmentRole::input(st.model), st.input);
        s.add_output(st.model, st.output);
    }
    return s;
}

/// Index of the last step run by `model`, or -1.
inline int last_step_of(const std::vector<ChainStep>& steps, int model) {
    for (std::size_t j = steps.size(); j-- > 0;) {
        if (steps[j].model == model) return static_cast<int>(j);
    }
    return -1;
}

}  // namespace kvchain
