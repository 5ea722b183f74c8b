// Copyright 2026 The dlmsparse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <vector>

#include "dlm/decoder.hpp"
#include "dlm/focus_attention.hpp"
#include "dlm/model.hpp"

namespace dlm {

/// Pearson correlation; nullopt for fewer than two points or a constant series.
inline std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
    require(x.size() == y.size(), ErrorCode::kShape, "pearson needs equal-length series");
    const std::size_t n = x.size();
    if (n < 2) {
        return std::nullopt;
    }
    double mx = 0.0;
    double my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) {
        return std::nullopt;
    }
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

using ConfidenceMap = std::map<std::size_t, double>;

struct CorrelationPoint {
    std::size_t step = 0;
    std::optional<double> r;  // nullopt: skipped (fewer than two shared positions)
};

/// Correlation between consecutive confidence maps over their shared positions.
/// Entry i of the result compares maps[i] with maps[i + 1] and is labelled step i + 1.
inline std::vector<CorrelationPoint> confidence_correlation(std::span<const ConfidenceMap> maps) {
    std::vector<CorrelationPoint> out;
    for (std::size_t t = 1; t < maps.size(); ++t) {
        std::vector<double> prev;
        std::vector<double> cur;
        for (const auto& [pos, c] : maps[t]) {
            if (auto it = maps[t - 1].find(pos); it != maps[t - 1].end()) {
                prev.push_back(it->second);
                cur.push_back(c);
            }
        }
        out.push_back({t, pearson(prev, cur)});
    }
    return out;
}

inline std::vector<ConfidenceMap> confidence_maps(std::span<const StepTrace> trace) {
    std::vector<ConfidenceMap> maps;
    for (const auto& tr : trace) {
        ConfidenceMap m;
        for (const auto& [pos, c] : tr.confidence) {
            m[pos] = c;
        }
        maps.push_back(std::move(m));
    }
    return maps;
}

inline std::vector<CorrelationPoint> confidence_correlation(std::span<const StepTrace> trace) {
    const auto maps = confidence_maps(trace);
    auto points = confidence_correlation(std::span<const ConfidenceMap>(maps));
    for (auto& p : points) {
        p.step = trace[p.step].step;
    }
    return points;
}

struct RecallPoint {
    std::size_t step = 0;
    double recall = 0.0;
};

/// |unmasked ∩ focus| / |unmasked|.
inline double recall_of(std::span<const std::size_t> unmasked, std::span<const std::size_t> focus) {
    if (unmasked.empty()) {
        return 1.0;
    }
    const std::set<std::size_t> f(focus.begin(), focus.end());
    std::size_t hit = 0;
    for (auto p : unmasked) {
        hit += f.contains(p) ? 1 : 0;
    }
    return static_cast<double>(hit) / static_cast<double>(unmasked.size());
}

/// Recall of the recorded focus sets. Block-entry steps and steps that
/// unmask nothing are skipped.
inline std::vector<RecallPoint> pcgi_recall(std::span<const StepTrace> trace) {
    std::vector<RecallPoint> out;
    for (const auto& tr : trace) {
        if (tr.is_block_entry || tr.n == 0 || tr.unmasked.empty()) {
            continue;
        }
        out.push_back({tr.step, recall_of(tr.unmasked, tr.focus)});
    }
    return out;
}

/// Recall of the focus set that factor `rho` would have chosen along a fixed
/// reference trajectory, ranking by the confidences recorded one step earlier.
/// Requires a trace in which every masked block position has a confidence at
/// the previous step (vanilla or cache mode).
inline std::vector<RecallPoint> counterfactual_recall(std::span<const StepTrace> trace, double rho) {
    std::vector<RecallPoint> out;
    for (std::size_t t = 1; t < trace.size(); ++t) {
        const auto& tr = trace[t];
        if (tr.is_block_entry || tr.n == 0 || tr.unmasked.empty()) {
            continue;
        }
        std::size_t max_pos = 0;
        for (auto p : tr.block_masked) {
            max_pos = std::max(max_pos, p);
        }
        std::vector<float> conf(max_pos + 1, 0.0f);
        for (const auto& [pos, c] : trace[t - 1].confidence) {
            if (pos <= max_pos) {
                conf[pos] = c;
            }
        }
        const auto focus = select_focus(conf, tr.n, rho, tr.block_masked);
        out.push_back({tr.step, recall_of(tr.unmasked, focus)});
    }
    return out;
}

struct OverlapEntry {
    std::size_t layer_a = 0;
    std::size_t layer_b = 0;
    double overlap = 0.0;
};

/// |top_n(S^a) ∩ top_n(S^b)| / n for every pair of scored layers (empty score
/// vectors are skipped).
inline std::vector<OverlapEntry> sink_layer_overlap(std::span<const std::vector<float>> scores, std::size_t n_sink) {
    std::vector<OverlapEntry> out;
    if (n_sink == 0) {
        return out;
    }
    std::vector<std::vector<std::size_t>> tops(scores.size());
    for (std::size_t l = 0; l < scores.size(); ++l) {
        if (!scores[l].empty()) {
            tops[l] = top_k_indices<float>(scores[l], n_sink);
        }
    }
    for (std::size_t a = 0; a < scores.size(); ++a) {
        for (std::size_t b = 0; b < scores.size(); ++b) {
            if (scores[a].empty() || scores[b].empty()) {
                continue;
            }
            std::vector<std::size_t> common;
            std::set_intersection(tops[a].begin(), tops[a].end(), tops[b].begin(), tops[b].end(),
                                  std::back_inserter(common));
            out.push_back({a, b, static_cast<double>(common.size()) / static_cast<double>(n_sink)});
        }
    }
    return out;
}

/// Per layer pair, the mean overlap across all steps that captured scores.
inline std::vector<OverlapEntry> mean_sink_overlap(std::span<const StepTrace> trace, std::size_t n_sink) {
    std::map<std::pair<std::size_t, std::size_t>, std::pair<double, std::size_t>> acc;
    for (const auto& tr : trace) {
        for (const auto& e : sink_layer_overlap(tr.layer_sink_scores, n_sink)) {
            auto& slot = acc[{e.layer_a, e.layer_b}];
            slot.first += e.overlap;
            slot.second += 1;
        }
    }
    std::vector<OverlapEntry> out;
    for (const auto& [key, v] : acc) {
        out.push_back({key.first, key.second, v.first / static_cast<double>(v.second)});
    }
    return out;
}

enum class OracleKind {
    /// Same cache state, whole current block forwarded, full attention in every layer.
    kDenseStep,
    /// Whole sequence forwarded with no cache at all.
    kFullForward,
};

struct DivergencePoint {
    std::size_t step = 0;
    double max_abs = 0.0;
    double mean_abs = 0.0;
    bool decision_match = true;
};

/// Runs a decode with `options` and, at every step, compares its logits at the
/// forwarded positions with a dense oracle forward over the same token state.
/// The oracle only reads the cache, so the decode itself is unaffected.
inline std::vector<DivergencePoint> divergence_vs_oracle(const ModelWeights& weights, const DecodeOptions& options,
                                                         std::span<const TokenId> prompt,
                                                         OracleKind oracle = OracleKind::kDenseStep) {
    std::vector<DivergencePoint> points;
    std::vector<std::size_t> oracle_choice;
    StepObserver obs;
    obs.before_commit = [&](const StepView& v) {
        DivergencePoint pt;
        pt.step = v.trace.step;
        oracle_choice.clear();
        if (v.active.empty()) {
            points.push_back(pt);
            return;
        }
        const std::size_t prompt_len = v.state.prompt_len;
        const auto& blk = v.schedule.blocks[v.trace.block];
        const std::size_t lo = prompt_len + blk.first;
        const std::size_t hi = prompt_len + blk.second;
        const bool whole_sequence = v.active.size() == v.tokens_at_start.size() || oracle == OracleKind::kFullForward ||
                                    v.cache == nullptr;
        std::vector<std::size_t> oracle_active =
            whole_sequence ? iota_positions(0, v.tokens_at_start.size()) : iota_positions(lo, hi);
        FullAttention full;
        const ForwardResult ref = forward_layers(weights, v.tokens_at_start, oracle_active,
                                                 whole_sequence ? nullptr : v.cache, full);
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t r = 0; r < v.active.size(); ++r) {
            const auto pos = v.active[r];
            const auto it = std::lower_bound(oracle_active.begin(), oracle_active.end(), pos);
            if (it == oracle_active.end() || *it != pos) {
                continue;  // outside the oracle's forwarded region
            }
            const auto oracle_row = ref.logits.row(static_cast<std::size_t>(it - oracle_active.begin()));
            const auto row = v.logits.row(r);
            for (std::size_t j = 0; j < row.size(); ++j) {
                const double d = std::fabs(static_cast<double>(row[j]) - static_cast<double>(oracle_row[j]));
                pt.max_abs = std::max(pt.max_abs, d);
                sum += d;
                ++count;
            }
        }
        pt.mean_abs = count > 0 ? sum / static_cast<double>(count) : 0.0;

        // oracle decision over every masked block position
        const Prediction pred = confidence_from_logits(ref.logits);
        std::vector<std::size_t> cand;
        std::vector<float> conf;
        for (std::size_t r = 0; r < oracle_active.size(); ++r) {
            const auto pos = oracle_active[r];
            if (pos >= lo && pos < hi && v.state.masked.contains(pos)) {
                cand.push_back(pos);
                conf.push_back(pred.confidence[r]);
            }
        }
        for (auto i : top_k_indices<float>(conf, std::min(v.trace.n, cand.size()))) {
            oracle_choice.push_back(cand[i]);
        }
        points.push_back(pt);
    };
    obs.after_step = [&](const StepView& v) {
        if (!points.empty() && points.back().step == v.trace.step && !v.active.empty()) {
            points.back().decision_match = oracle_choice == v.trace.unmasked;
        }
    };
    decode(weights, prompt, options, &obs);
    return points;
}

inline void write_correlation_csv(std::ostream& out, std::span<const CorrelationPoint> pts) {
    out << "step,r\n";
    out.precision(17);
    for (const auto& p : pts) {
        out << p.step << ',';
        if (p.r) {
            out << *p.r;
        } else {
            out << "NA";
        }
        out << '\n';
    }
}

inline void write_recall_csv(std::ostream& out, std::span<const RecallPoint> pts) {
    out << "step,recall\n";
    out.precision(17);
    for (const auto& p : pts) {
        out << p.step << ',' << p.recall << '\n';
    }
}

inline void write_overlap_csv(std::ostream& out, std::span<const OverlapEntry> entries) {
    out << "layer_a,layer_b,overlap\n";
    out.precision(17);
    for (const auto& e : entries) {
        out << e.layer_a << ',' << e.layer_b << ',' << e.overlap << '\n';
    }
}

inline void write_divergence_csv(std::ostream& out, std::span<const DivergencePoint> pts) {
    out << "step,max_abs,mean_abs,decision_match\n";
    out.precision(9);
    for (const auto& p : pts) {
        out << p.step << ',' << p.max_abs << ',' << p.mean_abs << ',' << (p.decision_match ? 1 : 0) << '\n';
    }
}

}  // namespace dlm
