// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kvchain/tensor.hpp"

namespace kvchain {

/// What a token is: shared content every model reads, or a prompt, unique
/// input or output belonging to one model of the chain.
struct SegmentRole {
    enum class Kind : std::uint8_t { kShared = 0, kPrompt = 1, kUniqueInput = 2, kOutput = 3 };

    Kind kind = Kind::kShared;
    int model = -1;  // -1 for shared content

    static constexpr SegmentRole shared() { return {Kind::kShared, -1}; }
    static constexpr SegmentRole prompt(int m) { return {Kind::kPrompt, m}; }
    static constexpr SegmentRole input(int m) { return {Kind::kUniqueInput, m}; }
    static constexpr SegmentRole output(int m) { return {Kind::kOutput, m}; }

    bool is_prompt() const noexcept { return kind == Kind::kPrompt; }
    bool is_output() const noexcept { return kind == Kind::kOutput; }

    friend bool operator==(const SegmentRole&, const SegmentRole&) = default;
};

inline std::string to_string(const SegmentRole& r) {
    switch (r.kind) {
    case SegmentRole::Kind::kShared: return "shared";
    case SegmentRole::Kind::kPrompt: return "prompt:" + std::to_string(r.model);
    case SegmentRole::Kind::kUniqueInput: return "input:" + std::to_string(r.model);
    case SegmentRole::Kind::kOutput: return "output:" + std::to_string(r.model);
    }
    return "?";
}

inline SegmentRole role_from_string(const std::string& s) {
    if (s == "shared") return SegmentRole::shared();
    const auto colon = s.find(':');
    KVCHAIN_CHECK(colon != std::string::npos, ErrorCode::kInvalidArgument, "bad role string '", s, "'");
    const std::string kind = s.substr(0, colon);
    int model = -1;
    try {
        model = std::stoi(s.substr(colon + 1));
    } catch (const std::exception&) {
        detail::fail(ErrorCode::kInvalidArgument, "bad model id in role '", s, "'");
    }
    KVCHAIN_CHECK(model >= 0 && model < 256, ErrorCode::kInvalidArgument, "model id out of range in '", s, "'");
    if (kind == "prompt") return SegmentRole::prompt(model);
    if (kind == "input") return SegmentRole::input(model);
    if (kind == "output") return SegmentRole::output(model);
    detail::fail(ErrorCode::kInvalidArgument, "unknown role kind '", kind, "'");
}

struct MaskRule {
    /// Tokens never attend to another model's prompt positions. Off gives a
    /// plain causal mask.
    bool mask_foreign_prompts = true;
};

/// Whether a query token with role `query` may attend to a key token with
/// role `key` (causality is handled separately).
inline bool visible(const SegmentRole& query, const SegmentRole& key, const MaskRule& rule = {}) {
    if (!rule.mask_foreign_prompts || !key.is_prompt()) return true;
    if (query.kind == SegmentRole::Kind::kShared) return false;
    return key.model == query.model;
}

struct Segment {
    SegmentRole role;
    std::size_t length = 0;

    friend bool operator==(const Segment&, const Segment&) = default;
};

class SegmentLayout {
public:
    SegmentLayout() = default;
    explicit SegmentLayout(std::int64_t start_position) : m_start(start_position) {}

    /// Zero-length segments are dropped.
    SegmentLayout& append(SegmentRole role, std::size_t length) {
        if (length > 0) m_segments.push_back({role, length});
        return *this;
    }

    const std::vector<Segment>& segments() const noexcept { return m_segments; }
    std::int64_t start_position() const noexcept { return m_start; }
    void set_start_position(std::int64_t p) noexcept { m_start = p; }

    std::size_t total_length() const noexcept {
        std::size_t n = 0;
        for (const Segment& s : m_segments) n += s.length;
        return n;
    }

    /// Role of every token, in order.
    std::vector<SegmentRole> roles() const {
        std::vector<SegmentRole> out;
        out.reserve(total_length());
        for (const Segment& s : m_segments) out.insert(out.end(), s.length, s.role);
        return out;
    }

    /// Position one past the last token (the "l + 1" a continuation starts at).
    std::int64_t next_position() const noexcept { return m_start + static_cast<std::int64_t>(total_length()); }

    void validate(std::size_t max_seq = 0) const {
        KVCHAIN_CHECK(m_start >= 0, ErrorCode::kInvalidArgument, "layout start position is negative");
        for (const Segment& s : m_segments) {
            KVCHAIN_CHECK(s.length >= 1, ErrorCode::kInvalidArgument, "layout segment ", to_string(s.role),
                          " has zero length");
        }
        KVCHAIN_CHECK(max_seq == 0 || total_length() <= max_seq, ErrorCode::kInvalidArgument, "layout length ",
                      total_length(), " exceeds max_seq ", max_seq);
    }

    friend bool operator==(const SegmentLayout&, const SegmentLayout&) = default;

private:
    std::vector<Segment> m_segments;
    std::int64_t m_start = 0;
};

inline std::vector<std::int64_t> assign_positions(const SegmentLayout& layout) {
    std::vector<std::int64_t> pos(layout.total_length());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = layout.start_position() + static_cast<std::int64_t>(i);
    return pos;
}

/// Square visibility matrix; true at (i, j) when token i may attend to j.
using AttentionMask = BoolMatrix;

/// Mask rows for `incoming` tokens appended after `past` entries: row i spans
/// every past entry followed by incoming tokens 0..i.
inline BoolMatrix build_mask_after(std::span<const SegmentRole> past, std::span<const SegmentRole> incoming,
                                   const MaskRule& rule = {}) {
    const std::size_t n_past = past.size();
    BoolMatrix m(incoming.size(), n_past + incoming.size());
    for (std::size_t i = 0; i < incoming.size(); ++i) {
        for (std::size_t j = 0; j < n_past; ++j) m.set(i, j, visible(incoming[i], past[j], rule));
        for (std::size_t j = 0; j <= i; ++j) m.set(i, n_past + j, visible(incoming[i], incoming[j], rule));
        KVCHAIN_CHECK(m.row_count(i) > 0, ErrorCode::kPrecondition, "mask row ", i, " has no visible key");
    }
    return m;
}

/// mask[i][j] = (j <= i) && visible(role(i), role(j)). The same rule covers
/// plain causal, single-round combined and multi-round cascade layouts; only
/// the layouts differ.
inline AttentionMask build_mask(const SegmentLayout& layout, const MaskRule& rule = {}) {
    const std::vector<SegmentRole> roles = layout.roles();
    return build_mask_after({}, roles, rule);
}

/// 1 exactly on the output tokens of `trained_model`.
inline std::vector<std::uint8_t> loss_mask(const SegmentLayout& layout, int trained_model) {
    std::vector<std::uint8_t> mask;
    mask.reserve(layout.total_length());
    bool any = false;
    for (const Segment& s : layout.segments()) {
        const bool on = s.role == SegmentRole::output(trained_model);
        any = any || on;
        mask.insert(mask.end(), s.length, on ? 1 : 0);
    }
    KVCHAIN_CHECK(any, ErrorCode::kPrecondition, "loss_mask: layout has no output segment for model ",
                  trained_model);
    return mask;
}

/// Combined A -> B training layout: shared, prompt A, input A, output A,
/// prompt B, input B, output B. Model ids are 0 (A) and 1 (B).
inline SegmentLayout single_round_online_layout(std::size_t shared_len, std::size_t prompt_a_len,
                                                std::size_t input_a_len, std::size_t output_a_len,
                                                std::size_t prompt_b_len, std::size_t input_b_len,
                                                std::size_t output_b_len) {
    KVCHAIN_CHECK(prompt_a_len >= 1 && prompt_b_len >= 1, ErrorCode::kInvalidArgument,
                  "single_round_online_layout: prompts need at least one token");
    SegmentLayout layout(0);
    layout.append(SegmentRole::shared(), shared_len)
        .append(SegmentRole::prompt(0), prompt_a_len)
        .append(SegmentRole::input(0), input_a_len)
        .append(SegmentRole::output(0), output_a_len)
        .append(SegmentRole::prompt(1), prompt_b_len)
        .append(SegmentRole::input(1), input_b_len)
        .append(SegmentRole::output(1), output_b_len);
    return layout;
}

inline nlohmann::json to_json(const SegmentLayout& layout) {
    nlohmann::json segs = nlohmann::json::array();
    for (const Segment& s : layout.segments()) segs.push_back({{"role", to_string(s.role)}, {"length", s.length}});
    return {{"start_position", layout.start_position()}, {"segments", segs}};
}

inline SegmentLayout layout_from_json(const nlohmann::json& j) {
    SegmentLayout layout(j.value("start_position", std::int64_t{0}));
    for (const auto& s : j.at("segments")) {
        const auto length = s.at("length").get<std::size_t>();
        KVCHAIN_CHECK(length >= 1, ErrorCode::kInvalidArgument, "layout json: zero-length segment");
        layout.append(role_from_string(s.at("role").get<std::string>()), length);
    }
    return layout;
}

}  // namespace kvchain
