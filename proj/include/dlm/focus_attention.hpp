// Copyright 2026 The dlmsparse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Confidence-guided query selection and sink-aware sparse attention.
//
// At a non-entry denoising step only a window around the positions most
// likely to be unmasked is re-forwarded. Early ("dense") layers attend over
// the whole sequence; the last dense layer doubles as a probe that scores
// prompt tokens by the attention they receive from the active queries. The
// top-scoring tokens (sinks) are kept by every later ("sparse") layer, which
// additionally keeps the prompt blocks whose mean key best matches the
// focus queries, plus the whole response region.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dlm/error.hpp"
#include "dlm/kv_cache.hpp"
#include "dlm/model.hpp"
#include "dlm/tensor.hpp"

namespace dlm {

enum class QueryAggregation {
    kMean,        // softmax of the per-head mean query
    kSumSoftmax,  // mean of per-query softmaxes
};

enum class WindowClamp {
    kBlock,     // windows stay inside the current decoding block
    kResponse,  // windows may extend over the whole response region
};

struct FocusConfig {
    double rho = 4.0;
    std::size_t window = 8;
    std::size_t dense_layers = 6;
    std::size_t trailing_dense_layers = 0;
    double alpha = 0.5;
    double sink_fraction = 0.01;
    std::size_t prompt_block_size = 64;
    QueryAggregation query_aggregation = QueryAggregation::kMean;
    bool sink_recompute = false;
    WindowClamp window_clamp = WindowClamp::kBlock;

    void validate(std::size_t num_layers) const {
        require(std::isfinite(rho) && rho >= 1.0, ErrorCode::kConfig, "rho: must be >= 1");
        require(std::isfinite(alpha) && alpha > 0.0 && alpha <= 1.0, ErrorCode::kConfig, "alpha: must be in (0, 1]");
        require(std::isfinite(sink_fraction) && sink_fraction >= 0.0 && sink_fraction <= 1.0, ErrorCode::kConfig,
                "sink_frac: must be in [0, 1]");
        require(prompt_block_size >= 1, ErrorCode::kConfig, "prompt_block_size: must be >= 1");
        require(dense_layers >= 1 && dense_layers <= num_layers, ErrorCode::kConfig,
                "dense_layers: must be in [1, " + std::to_string(num_layers) + "]");
        require(dense_layers + trailing_dense_layers <= num_layers, ErrorCode::kConfig,
                "trailing_dense_layers: dense_layers + trailing_dense_layers exceeds num_layers");
    }

    /// Zero-based: layers [0, dense_layers) and the trailing ones use full attention.
    bool is_dense_layer(std::size_t layer, std::size_t num_layers) const noexcept {
        return layer < dense_layers || layer + trailing_dense_layers >= num_layers;
    }

    std::size_t probe_layer() const noexcept { return dense_layers - 1; }
};

/// Index sets used by one sparse step (first sparse layer for the per-layer sets).
struct AttentionIndexSet {
    std::vector<std::size_t> focus;
    std::vector<std::size_t> active;
    std::vector<std::size_t> sinks;
    std::vector<std::size_t> relevant_blocks;
    std::vector<std::size_t> prompt_selected;
};

/// Round half to even.
inline std::size_t round_half_even(double x) {
    require(x >= 0.0 && std::isfinite(x), ErrorCode::kConfig, "cannot round a negative or non-finite count");
    const double fl = std::floor(x);
    const double diff = x - fl;
    double r = fl;
    if (diff > 0.5) {
        r = fl + 1.0;
    } else if (diff == 0.5) {
        r = std::fmod(fl, 2.0) == 0.0 ? fl : fl + 1.0;
    }
    return static_cast<std::size_t>(r);
}

inline std::size_t sink_count(double sink_fraction, std::size_t prompt_len) {
    return round_half_even(sink_fraction * static_cast<double>(prompt_len));
}

/// Indices of the k largest scores, ties to the lower index, returned ascending.
template <typename T>
std::vector<std::size_t> top_k_indices(std::span<const T> scores, std::size_t k) {
    k = std::min(k, scores.size());
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto better = [&scores](std::size_t a, std::size_t b) {
        return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// Number of focus candidates: round(rho * n_t) clamped to [1, block_masked], or 0 when n_t = 0.
inline std::size_t focus_count(double rho, std::size_t n_t, std::size_t block_masked) {
    if (n_t == 0 || block_masked == 0) {
        return 0;
    }
    const std::size_t k = round_half_even(rho * static_cast<double>(n_t));
    return std::clamp<std::size_t>(k, 1, block_masked);
}

/// The k masked block positions with the highest previous-step confidence.
/// `confidence` is indexed by sequence position.
inline std::vector<std::size_t> select_focus(std::span<const float> confidence, std::size_t n_t, double rho,
                                             std::span<const std::size_t> block_masked) {
    const std::size_t k = focus_count(rho, n_t, block_masked.size());
    std::vector<float> scores(block_masked.size());
    for (std::size_t i = 0; i < block_masked.size(); ++i) {
        require(block_masked[i] < confidence.size(), ErrorCode::kBounds, "confidence missing for position");
        scores[i] = confidence[block_masked[i]];
    }
    const auto picks = top_k_indices<float>(scores, k);
    std::vector<std::size_t> out;
    out.reserve(picks.size());
    for (auto p : picks) {
        out.push_back(block_masked[p]);
    }
    std::sort(out.begin(), out.end());
    return out;
}

/// Union of [i - w/2, i + w/2] over the focus positions, clipped to [lo, hi).
inline std::vector<std::size_t> expand_window(std::span<const std::size_t> focus, std::size_t window, std::size_t lo,
                                              std::size_t hi) {
    const std::size_t half = window / 2;
    std::vector<std::size_t> out;
    for (auto i : focus) {
        require(i >= lo && i < hi, ErrorCode::kBounds, "focus position outside window bounds");
        const std::size_t a = i >= lo + half ? i - half : lo;
        const std::size_t b = std::min(hi - 1, i + half);
        for (std::size_t p = a; p <= b; ++p) {
            out.push_back(p);
        }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

namespace detail {

inline std::vector<float> mean_rows(const Tensor3D& x, std::size_t h) {
    std::vector<float> m(x.cols(), 0.0f);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto r = x.row(h, i);
        for (std::size_t t = 0; t < m.size(); ++t) {
            m[t] += r[t];
        }
    }
    const float n = static_cast<float>(x.rows());
    for (float& v : m) {
        v /= n;
    }
    return m;
}

inline void dot_rows(std::span<const float> q, const Tensor3D& keys, std::size_t h, std::span<float> out) {
    for (std::size_t j = 0; j < keys.rows(); ++j) {
        const auto k = keys.row(h, j);
        float s = 0.0f;
        for (std::size_t t = 0; t < q.size(); ++t) {
            s += q[t] * k[t];
        }
        out[j] = s;
    }
}

}  // namespace detail

/// Head-averaged attention each prompt key receives from the aggregated
/// active queries: S_j = (1/H) sum_h softmax_j(q_h . K_j / sqrt(d)).
/// queries: [H x n x d], prompt_keys: [H x M x d]. Softmax runs over prompt positions only.
inline std::vector<float> sink_scores(const Tensor3D& queries, const Tensor3D& prompt_keys,
                                      QueryAggregation aggregation = QueryAggregation::kMean) {
    require(queries.heads() == prompt_keys.heads() && queries.cols() == prompt_keys.cols(), ErrorCode::kShape,
            "sink scoring head layout mismatch");
    require(queries.rows() >= 1, ErrorCode::kUsage, "sink scoring needs at least one query");
    const std::size_t heads = queries.heads();
    const std::size_t m = prompt_keys.rows();
    const float scale = 1.0f / std::sqrt(static_cast<float>(queries.cols()));
    std::vector<float> total(m, 0.0f);
    if (m == 0) {
        return total;
    }
    std::vector<float> row(m);
    for (std::size_t h = 0; h < heads; ++h) {
        if (aggregation == QueryAggregation::kMean) {
            const auto qbar = detail::mean_rows(queries, h);
            detail::dot_rows(qbar, prompt_keys, h, row);
            detail::scaled_softmax_inplace(row.data(), m, scale);
            for (std::size_t j = 0; j < m; ++j) {
                total[j] += row[j];
            }
        } else {
            std::vector<float> head_acc(m, 0.0f);
            for (std::size_t i = 0; i < queries.rows(); ++i) {
                detail::dot_rows(queries.row(h, i), prompt_keys, h, row);
                detail::scaled_softmax_inplace(row.data(), m, scale);
                for (std::size_t j = 0; j < m; ++j) {
                    head_acc[j] += row[j];
                }
            }
            for (std::size_t j = 0; j < m; ++j) {
                total[j] += head_acc[j] / static_cast<float>(queries.rows());
            }
        }
    }
    for (float& v : total) {
        v /= static_cast<float>(heads);
    }
    return total;
}

/// Top n_sink prompt positions by sink_scores.
inline std::vector<std::size_t> identify_sinks(const Tensor3D& queries, const Tensor3D& prompt_keys,
                                               std::size_t n_sink,
                                               QueryAggregation aggregation = QueryAggregation::kMean) {
    require(n_sink <= prompt_keys.rows(), ErrorCode::kConfig,
            "sink count " + std::to_string(n_sink) + " exceeds prompt length " + std::to_string(prompt_keys.rows()));
    if (n_sink == 0) {
        return {};
    }
    const auto scores = sink_scores(queries, prompt_keys, aggregation);
    return top_k_indices<float>(scores, n_sink);
}

/// R_b = (1/H) sum_h mean(focus queries)_h . Kbar_b^h (no softmax, no 1/sqrt(d)).
/// focus_queries: [H x nf x d], block_means: [H x B x d].
inline std::vector<float> block_relevance(const Tensor3D& focus_queries, const Tensor3D& block_means) {
    require(focus_queries.rows() >= 1, ErrorCode::kUsage, "block relevance needs at least one focus query");
    require(focus_queries.heads() == block_means.heads() && focus_queries.cols() == block_means.cols(),
            ErrorCode::kShape, "block relevance head layout mismatch");
    const std::size_t nb = block_means.rows();
    std::vector<float> r(nb, 0.0f);
    std::vector<float> row(nb);
    for (std::size_t h = 0; h < focus_queries.heads(); ++h) {
        const auto qbar = detail::mean_rows(focus_queries, h);
        detail::dot_rows(qbar, block_means, h, row);
        for (std::size_t b = 0; b < nb; ++b) {
            r[b] += row[b];
        }
    }
    for (float& v : r) {
        v /= static_cast<float>(focus_queries.heads());
    }
    return r;
}

/// C = floor(alpha * n_blocks), at least one block when any exist.
inline std::size_t relevant_block_count(double alpha, std::size_t n_blocks) {
    if (n_blocks == 0) {
        return 0;
    }
    const auto c = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(n_blocks) + 1e-9));
    return std::clamp<std::size_t>(c, 1, n_blocks);
}

inline std::vector<std::size_t> select_blocks(std::span<const float> relevance, double alpha, std::size_t n_blocks) {
    require(relevance.size() == n_blocks, ErrorCode::kShape, "one relevance score per block required");
    return top_k_indices<float>(relevance, relevant_block_count(alpha, n_blocks));
}

/// Sinks plus all members of the relevant blocks, ascending, without duplicates.
inline std::vector<std::size_t> assemble_index_set(std::span<const std::size_t> sinks,
                                                   std::span<const std::size_t> relevant_blocks,
                                                   std::span<const PromptBlock> blocks) {
    std::vector<std::size_t> out(sinks.begin(), sinks.end());
    for (auto b : relevant_blocks) {
        require(b < blocks.size(), ErrorCode::kBounds, "block id out of range");
        for (std::size_t p = blocks[b].start; p < blocks[b].end; ++p) {
            out.push_back(p);
        }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

/// Attention of the active queries over the selected prompt rows followed by
/// every response row [prompt_len, seq_len), fresh rows overriding cached ones.
inline LayerAttention sparse_attend(const LayerQuery& query, std::span<const std::size_t> prompt_selected,
                                    std::size_t prompt_len) {
    std::vector<std::size_t> context;
    context.reserve(prompt_selected.size() + query.kv.seq_len() - prompt_len);
    for (auto p : prompt_selected) {
        require(p < prompt_len, ErrorCode::kBounds, "selected prompt index outside prompt");
        context.push_back(p);
    }
    for (std::size_t p = prompt_len; p < query.kv.seq_len(); ++p) {
        context.push_back(p);
    }
    if (context.empty()) {
        fail(ErrorCode::kDegenerateAttention, "sparse attention context is empty");
    }
    return attend_context(query, context);
}

/// What one sparse layer attended to.
struct SparseLayerRecord {
    std::size_t layer = 0;
    std::vector<std::size_t> sinks;
    std::vector<std::size_t> relevant_blocks;
    std::size_t prompt_selected = 0;  // |I_p|
    std::size_t attended = 0;         // |I_p| + response rows

    bool operator==(const SparseLayerRecord&) const = default;
};

/// Per-layer strategy for a non-entry step: full attention in dense layers,
/// probe at the last dense layer, sink-aware block-sparse attention elsewhere.
class FocusAttentionPolicy final : public AttentionPolicy {
public:
    FocusAttentionPolicy(const FocusConfig& config, std::size_t num_layers, std::size_t prompt_len,
                         const KVCache& cache, std::span<const std::size_t> focus, bool capture_layer_scores = false)
        : config_(config),
          num_layers_(num_layers),
          prompt_len_(prompt_len),
          cache_(cache),
          focus_(focus.begin(), focus.end()),
          n_sink_(sink_count(config.sink_fraction, prompt_len)),
          capture_(capture_layer_scores),
          prompt_positions_(iota_positions(0, prompt_len)) {
        if (capture_) {
            layer_scores_.resize(num_layers);
        }
    }

    LayerAttention attend(const LayerQuery& query) override {
        const std::size_t layer = query.layer;
        const bool dense = config_.is_dense_layer(layer, num_layers_);
        const bool probe = layer == config_.probe_layer();
        const bool need_probe = probe && has_sparse_layers();
        const bool recompute = !dense && config_.sink_recompute;

        if (capture_ || need_probe || recompute) {
            auto [prompt_k, prompt_v] = query.kv.gather(prompt_positions_);
            if (capture_) {
                layer_scores_[layer] = sink_scores(query.queries, prompt_k, config_.query_aggregation);
            }
            if (need_probe || recompute) {
                sinks_ = n_sink_ == 0 ? std::vector<std::size_t>{}
                                      : (capture_ ? top_k_indices<float>(layer_scores_[layer], n_sink_)
                                                  : identify_sinks(query.queries, prompt_k, n_sink_,
                                                                   config_.query_aggregation));
                if (need_probe) {
                    probe_sinks_ = sinks_;
                }
            }
        }
        if (dense) {
            if (all_.size() != query.kv.seq_len()) {
                all_ = iota_positions(0, query.kv.seq_len());
            }
            return attend_context(query, all_);
        }

        const Tensor3D focus_q = focus_rows(query);
        const auto relevance = block_relevance(focus_q, cache_.block_means(layer));
        SparseLayerRecord rec;
        rec.layer = layer;
        rec.sinks = sinks_;
        rec.relevant_blocks = select_blocks(relevance, config_.alpha, cache_.blocks().size());
        const auto selected = assemble_index_set(sinks_, rec.relevant_blocks, cache_.blocks());
        rec.prompt_selected = selected.size();
        LayerAttention out = sparse_attend(query, selected, prompt_len_);
        rec.attended = out.context_size;
        if (records_.empty()) {
            first_selected_ = selected;
        }
        records_.push_back(std::move(rec));
        return out;
    }

    bool has_sparse_layers() const noexcept {
        for (std::size_t l = 0; l < num_layers_; ++l) {
            if (!config_.is_dense_layer(l, num_layers_)) {
                return true;
            }
        }
        return false;
    }

    std::size_t n_sink() const noexcept { return n_sink_; }
    const std::vector<std::size_t>& probe_sinks() const noexcept { return probe_sinks_; }
    const std::vector<SparseLayerRecord>& records() const noexcept { return records_; }
    const std::vector<std::size_t>& first_prompt_selected() const noexcept { return first_selected_; }
    /// S_j per layer when capture is enabled (empty for layers never scored).
    const std::vector<std::vector<float>>& layer_scores() const noexcept { return layer_scores_; }

private:
    Tensor3D focus_rows(const LayerQuery& query) const {
        const auto& q = query.queries;
        Tensor3D out(q.heads(), focus_.size(), q.cols());
        for (std::size_t f = 0; f < focus_.size(); ++f) {
            const auto it = std::lower_bound(query.active.begin(), query.active.end(), focus_[f]);
            require(it != query.active.end() && *it == focus_[f], ErrorCode::kUsage,
                    "focus position is not among the active positions");
            const auto row = static_cast<std::size_t>(it - query.active.begin());
            for (std::size_t h = 0; h < q.heads(); ++h) {
                std::copy_n(q.row(h, row).begin(), q.cols(), out.row(h, f).begin());
            }
        }
        return out;
    }

    FocusConfig config_;
    std::size_t num_layers_;
    std::size_t prompt_len_;
    const KVCache& cache_;
    std::vector<std::size_t> focus_;
    std::size_t n_sink_;
    bool capture_;
    std::vector<std::size_t> prompt_positions_;
    std::vector<std::size_t> all_;
    std::vector<std::size_t> sinks_;
    std::vector<std::size_t> probe_sinks_;
    std::vector<std::size_t> first_selected_;
    std::vector<SparseLayerRecord> records_;
    std::vector<std::vector<float>> layer_scores_;
};

}  // namespace dlm
