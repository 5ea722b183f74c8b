// Copyright 2026 The dlmsparse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dlm/error.hpp"
#include "dlm/focus_attention.hpp"
#include "dlm/kv_cache.hpp"
#include "dlm/model.hpp"
#include "dlm/tensor.hpp"

namespace dlm {

enum class DecodeMode { kVanilla, kCache, kFocus };

constexpr std::string_view to_string(DecodeMode mode) {
    switch (mode) {
        case DecodeMode::kVanilla: return "vanilla";
        case DecodeMode::kCache: return "cache";
        case DecodeMode::kFocus: return "focus";
    }
    return "unknown";
}

inline DecodeMode parse_mode(std::string_view s) {
    if (s == "vanilla") return DecodeMode::kVanilla;
    if (s == "cache") return DecodeMode::kCache;
    if (s == "focus") return DecodeMode::kFocus;
    fail(ErrorCode::kConfig, "mode: expected vanilla, cache or focus, got '" + std::string(s) + "'");
}

/// Token state of one denoising step.
struct SequenceState {
    std::vector<TokenId> tokens;
    std::size_t prompt_len = 0;
    std::set<std::size_t> masked;
    std::vector<float> confidence;    // by position; 0 where never computed
    std::vector<TokenId> predicted;   // by position; -1 where never computed
    std::size_t step = 0;

    std::size_t length() const noexcept { return tokens.size(); }

    std::vector<std::size_t> masked_in(std::size_t lo, std::size_t hi) const {
        std::vector<std::size_t> out;
        for (auto it = masked.lower_bound(lo); it != masked.end() && *it < hi; ++it) {
            out.push_back(*it);
        }
        return out;
    }
};

/// prompt ++ gen_len mask tokens; every response position starts masked.
inline SequenceState init_sequence(std::span<const TokenId> prompt, std::size_t gen_len, TokenId mask_token_id) {
    require(!prompt.empty(), ErrorCode::kUsage, "prompt must not be empty");
    require(gen_len >= 1, ErrorCode::kUsage, "gen_len must be >= 1");
    SequenceState s;
    s.prompt_len = prompt.size();
    s.tokens.assign(prompt.begin(), prompt.end());
    s.tokens.resize(prompt.size() + gen_len, mask_token_id);
    for (std::size_t i = prompt.size(); i < s.tokens.size(); ++i) {
        s.masked.insert(s.masked.end(), i);
    }
    s.confidence.assign(s.tokens.size(), 0.0f);
    s.predicted.assign(s.tokens.size(), -1);
    return s;
}

/// Semi-autoregressive block schedule over the response region.
struct DecodeSchedule {
    std::size_t gen_len = 0;
    std::size_t total_steps = 0;
    std::size_t block_len = 0;
    std::vector<std::pair<std::size_t, std::size_t>> blocks;  // [start, end) offsets into the response
    std::size_t steps_per_block = 0;
    std::vector<std::size_t> tokens_per_step;

    std::size_t block_of(std::size_t step) const noexcept { return step / steps_per_block; }
    bool is_block_entry(std::size_t step) const noexcept { return step % steps_per_block == 0; }
};

/// Within a block, block_len / steps_per_block tokens per step; the remainder
/// goes one token each to the earliest steps.
inline DecodeSchedule build_schedule(std::size_t gen_len, std::size_t total_steps, std::size_t block_len) {
    require(gen_len >= 1, ErrorCode::kConfig, "gen_len: must be >= 1");
    require(block_len >= 1 && gen_len % block_len == 0, ErrorCode::kConfig,
            "block_len: must divide gen_len (" + std::to_string(gen_len) + ")");
    const std::size_t n_blocks = gen_len / block_len;
    require(total_steps >= 1 && total_steps % n_blocks == 0, ErrorCode::kConfig,
            "steps: must be a positive multiple of the block count (" + std::to_string(n_blocks) + ")");
    DecodeSchedule s;
    s.gen_len = gen_len;
    s.total_steps = total_steps;
    s.block_len = block_len;
    s.steps_per_block = total_steps / n_blocks;
    for (std::size_t b = 0; b < n_blocks; ++b) {
        s.blocks.emplace_back(b * block_len, (b + 1) * block_len);
        const std::size_t base = block_len / s.steps_per_block;
        const std::size_t rem = block_len % s.steps_per_block;
        for (std::size_t i = 0; i < s.steps_per_block; ++i) {
            s.tokens_per_step.push_back(base + (i < rem ? 1 : 0));
        }
    }
    return s;
}

struct Prediction {
    std::vector<TokenId> tokens;
    std::vector<float> confidence;
};

/// Greedy prediction per logit row: argmax (lowest id on ties) and its softmax probability.
inline Prediction confidence_from_logits(const Tensor2D& logits) {
    Prediction p;
    p.tokens.reserve(logits.rows());
    p.confidence.reserve(logits.rows());
    std::vector<float> probs(logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const auto row = logits.row(i);
        require(!row.empty(), ErrorCode::kDegenerateAttention, "empty logit row");
        std::size_t best = 0;
        for (std::size_t v = 1; v < row.size(); ++v) {
            if (row[v] > row[best]) {
                best = v;
            }
        }
        std::copy(row.begin(), row.end(), probs.begin());
        softmax_inplace(probs);
        p.tokens.push_back(static_cast<TokenId>(best));
        p.confidence.push_back(probs[best]);
    }
    return p;
}

/// Commits the n most confident masked positions of [lo, hi) among
/// `eligible` (ties to the lower position) and returns them ascending.
inline std::vector<std::size_t> select_unmask(SequenceState& state, std::size_t n, std::size_t lo, std::size_t hi,
                                              std::span<const std::size_t> eligible) {
    std::vector<std::size_t> candidates;
    for (auto p : eligible) {
        if (p >= lo && p < hi && state.masked.contains(p)) {
            candidates.push_back(p);
        }
    }
    require(n <= candidates.size(), ErrorCode::kSchedule,
            "asked to unmask " + std::to_string(n) + " of " + std::to_string(candidates.size()) + " candidates");
    std::vector<float> scores(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        scores[i] = state.confidence[candidates[i]];
    }
    std::vector<std::size_t> chosen;
    for (auto i : top_k_indices<float>(scores, n)) {
        chosen.push_back(candidates[i]);
    }
    for (auto p : chosen) {
        require(state.predicted[p] >= 0, ErrorCode::kSchedule,
                "position " + std::to_string(p) + " has no prediction");
        state.tokens[p] = state.predicted[p];
        state.masked.erase(p);
    }
    return chosen;
}

/// Overload over every masked position of the block.
inline std::vector<std::size_t> select_unmask(SequenceState& state, std::size_t n, std::size_t lo, std::size_t hi) {
    const auto all = state.masked_in(lo, hi);
    return select_unmask(state, n, lo, hi, all);
}

/// Record of one denoising step.
struct StepTrace {
    std::size_t step = 0;
    std::size_t block = 0;
    bool is_block_entry = false;
    std::size_t n = 0;
    std::vector<std::size_t> focus;
    std::vector<std::size_t> active;
    std::vector<std::size_t> sinks;
    std::vector<std::size_t> relevant_blocks;   // first sparse layer
    std::vector<std::size_t> prompt_selected;   // first sparse layer
    std::size_t max_prompt_selected = 0;        // max |I_p| over sparse layers
    std::vector<SparseLayerRecord> sparse_layers;
    std::vector<std::size_t> attended_per_layer;
    std::size_t attended_kv_total = 0;
    std::vector<std::size_t> block_masked;       // masked block positions at step start
    std::vector<std::pair<std::size_t, float>> confidence;  // computed this step
    std::vector<std::size_t> unmasked;
    std::vector<TokenId> unmasked_tokens;
    std::vector<std::size_t> refreshed;          // rows written to the cache in every refreshed layer
    bool sparse_layer_refresh = false;           // cache also refreshed in sparse layers
    std::vector<std::vector<float>> layer_sink_scores;
    std::uint64_t nanos = 0;

    bool operator==(const StepTrace&) const = default;
};

struct DecodeOptions {
    DecodeMode mode = DecodeMode::kFocus;
    std::size_t gen_len = 64;
    std::size_t steps = 64;
    std::size_t block_len = 32;
    FocusConfig focus;
    /// Write the cache only in dense layers, as the reference procedure does.
    bool strict_alg1 = false;
    /// Forward the whole current block at sparse steps instead of the focus windows.
    bool force_block_active = false;
    /// Score prompt sinks at every layer of every sparse step (analysis).
    bool capture_layer_scores = false;
    bool record_timing = true;
};

/// What an observer sees of one step.
struct StepView {
    const StepTrace& trace;
    std::span<const TokenId> tokens_at_start;
    const KVCache* cache;  // before refresh in before_commit, after it in after_step
    std::span<const std::size_t> active;
    const Tensor2D& logits;  // rows follow `active`
    const SequenceState& state;
    const DecodeSchedule& schedule;
};

struct StepObserver {
    std::function<void(const StepView&)> before_commit;
    std::function<void(const StepView&)> after_step;
};

struct DecodeResult {
    std::vector<TokenId> tokens;
    std::vector<StepTrace> trace;
    DecodeSchedule schedule;
};

/// Runs the full denoising loop in the requested mode.
inline DecodeResult decode(const ModelWeights& weights, std::span<const TokenId> prompt, const DecodeOptions& options,
                           const StepObserver* observer = nullptr) {
    const auto& cfg = weights.config;
    require(!prompt.empty(), ErrorCode::kUsage, "prompt must not be empty");
    require(prompt.size() + options.gen_len <= cfg.max_positions, ErrorCode::kConfig,
            "prompt length + gen_len exceeds max_positions (" + std::to_string(cfg.max_positions) + ")");
    for (auto tok : prompt) {
        require(tok >= 0 && static_cast<std::size_t>(tok) < cfg.vocab_size, ErrorCode::kUsage,
                "prompt token " + std::to_string(tok) + " outside vocabulary");
    }
    if (options.mode == DecodeMode::kFocus) {
        options.focus.validate(cfg.num_layers);
        require(sink_count(options.focus.sink_fraction, prompt.size()) <= prompt.size(), ErrorCode::kConfig,
                "sink_frac: sink count exceeds prompt length");
    }

    DecodeResult result;
    result.schedule = build_schedule(options.gen_len, options.steps, options.block_len);
    const auto& sched = result.schedule;
    SequenceState state = init_sequence(prompt, options.gen_len, cfg.mask_token_id);
    const std::size_t prompt_len = prompt.size();
    const std::size_t seq_len = state.length();
    const auto all_positions = iota_positions(0, seq_len);

    std::unique_ptr<KVCache> cache;
    if (options.mode != DecodeMode::kVanilla) {
        cache = std::make_unique<KVCache>(cfg.num_layers, seq_len, cfg.num_heads, cfg.head_dim, prompt_len,
                                          options.focus.prompt_block_size);
    }

    for (std::size_t t = 0; t < sched.total_steps; ++t) {
        const auto started = std::chrono::steady_clock::now();
        state.step = t;
        StepTrace tr;
        tr.step = t;
        tr.block = sched.block_of(t);
        tr.is_block_entry = sched.is_block_entry(t);
        tr.n = sched.tokens_per_step[t];
        const std::size_t lo = prompt_len + sched.blocks[tr.block].first;
        const std::size_t hi = prompt_len + sched.blocks[tr.block].second;
        tr.block_masked = state.masked_in(lo, hi);
        const std::vector<TokenId> tokens_at_start = state.tokens;

        const bool full_step = options.mode == DecodeMode::kVanilla || tr.is_block_entry;
        const bool sparse_step = options.mode == DecodeMode::kFocus && !tr.is_block_entry;

        std::vector<std::size_t> active;
        std::unique_ptr<FocusAttentionPolicy> focus_policy;
        FullAttention full_policy;
        AttentionPolicy* policy = &full_policy;
        if (full_step) {
            active = all_positions;
        } else if (!sparse_step) {
            active = iota_positions(lo, hi);
        } else {
            tr.focus = select_focus(state.confidence, tr.n, options.focus.rho, tr.block_masked);
            if (options.force_block_active) {
                active = iota_positions(lo, hi);
            } else if (options.focus.window_clamp == WindowClamp::kResponse) {
                active = expand_window(tr.focus, options.focus.window, prompt_len, seq_len);
            } else {
                active = expand_window(tr.focus, options.focus.window, lo, hi);
            }
            focus_policy = std::make_unique<FocusAttentionPolicy>(options.focus, cfg.num_layers, prompt_len, *cache,
                                                                  tr.focus, options.capture_layer_scores);
            policy = focus_policy.get();
        }
        tr.active = active;

        ForwardResult fwd;
        if (!active.empty()) {
            fwd = forward_layers(weights, state.tokens, active, cache.get(), *policy);
        } else {
            fwd.logits = Tensor2D(0, cfg.vocab_size);
        }
        tr.attended_per_layer = fwd.attended;
        for (auto a : fwd.attended) {
            tr.attended_kv_total += a;
        }
        if (focus_policy) {
            tr.sinks = focus_policy->probe_sinks();
            tr.sparse_layers = focus_policy->records();
            if (!tr.sparse_layers.empty()) {
                tr.relevant_blocks = tr.sparse_layers.front().relevant_blocks;
                tr.prompt_selected = focus_policy->first_prompt_selected();
                if (options.focus.sink_recompute) {
                    tr.sinks = tr.sparse_layers.front().sinks;
                }
            }
            for (const auto& rec : tr.sparse_layers) {
                tr.max_prompt_selected = std::max(tr.max_prompt_selected, rec.prompt_selected);
            }
            if (options.capture_layer_scores) {
                tr.layer_sink_scores = focus_policy->layer_scores();
            }
        }

        if (observer != nullptr && observer->before_commit) {
            observer->before_commit(StepView{tr, tokens_at_start, cache.get(), active, fwd.logits, state, sched});
        }

        if (cache && !active.empty()) {
            if (full_step) {
                for (std::size_t l = 0; l < cfg.num_layers; ++l) {
                    cache->full_refresh(l, fwd.keys[l], fwd.values[l]);
                }
            } else {
                tr.sparse_layer_refresh = sparse_step && !options.strict_alg1;
                for (std::size_t l = 0; l < cfg.num_layers; ++l) {
                    const bool dense = !sparse_step || options.focus.is_dense_layer(l, cfg.num_layers);
                    if (dense || !options.strict_alg1) {
                        cache->refresh_at(l, active, fwd.keys[l], fwd.values[l]);
                    }
                }
            }
            tr.refreshed = active;
        }

        const Prediction pred = confidence_from_logits(fwd.logits);
        std::vector<std::size_t> eligible;
        for (std::size_t r = 0; r < active.size(); ++r) {
            const auto pos = active[r];
            if (state.masked.contains(pos)) {
                state.confidence[pos] = pred.confidence[r];
                state.predicted[pos] = pred.tokens[r];
                tr.confidence.emplace_back(pos, pred.confidence[r]);
                eligible.push_back(pos);
            }
        }
        tr.unmasked = select_unmask(state, tr.n, lo, hi, eligible);
        for (auto p : tr.unmasked) {
            tr.unmasked_tokens.push_back(state.tokens[p]);
        }
        if (options.record_timing) {
            tr.nanos = static_cast<std::uint64_t>(
                std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - started)
                    .count());
        }
        if (observer != nullptr && observer->after_step) {
            observer->after_step(StepView{tr, tokens_at_start, cache.get(), active, fwd.logits, state, sched});
        }
        result.trace.push_back(std::move(tr));
    }
    result.tokens = std::move(state.tokens);
    return result;
}

/// Re-applies the recorded unmask decisions to a fresh sequence.
inline std::vector<TokenId> replay_trace(std::span<const TokenId> prompt, std::size_t gen_len, TokenId mask_token_id,
                                         std::span<const StepTrace> trace) {
    SequenceState s = init_sequence(prompt, gen_len, mask_token_id);
    for (const auto& tr : trace) {
        require(tr.unmasked.size() == tr.unmasked_tokens.size(), ErrorCode::kUsage, "trace step is inconsistent");
        for (std::size_t i = 0; i < tr.unmasked.size(); ++i) {
            const auto p = tr.unmasked[i];
            require(s.masked.contains(p), ErrorCode::kUsage, "trace unmasks position " + std::to_string(p) + " twice");
            s.tokens[p] = tr.unmasked_tokens[i];
            s.masked.erase(p);
        }
    }
    return s.tokens;
}

inline void write_trace_csv(std::ostream& out, std::span<const StepTrace> trace) {
    out << "step,block,entry,n,focus,active,sink,prompt_selected,attended_kv_total,unmasked,nanos\n";
    for (const auto& tr : trace) {
        out << tr.step << ',' << tr.block << ',' << (tr.is_block_entry ? 1 : 0) << ',' << tr.n << ','
            << tr.focus.size() << ',' << tr.active.size() << ',' << tr.sinks.size() << ',' << tr.max_prompt_selected
            << ',' << tr.attended_kv_total << ',';
        for (std::size_t i = 0; i < tr.unmasked.size(); ++i) {
            out << (i ? ";" : "") << tr.unmasked[i];
        }
        out << ',' << tr.nanos << '\n';
    }
}

}  // namespace dlm
