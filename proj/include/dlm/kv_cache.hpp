// Copyright 2026 The dlmsparse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dlm/container.hpp"
#include "dlm/error.hpp"
#include "dlm/tensor.hpp"

namespace dlm {

/// Contiguous prompt range [start, end).
struct PromptBlock {
    std::size_t start = 0;
    std::size_t end = 0;

    std::size_t size() const noexcept { return end - start; }
    bool operator==(const PromptBlock&) const = default;
};

/// Splits [0, prompt_len) into blocks of `block_size`; the last one may be shorter.
inline std::vector<PromptBlock> block_partition(std::size_t prompt_len, std::size_t block_size) {
    require(block_size >= 1, ErrorCode::kConfig, "prompt_block_size must be >= 1");
    std::vector<PromptBlock> blocks;
    for (std::size_t s = 0; s < prompt_len; s += block_size) {
        blocks.push_back({s, std::min(prompt_len, s + block_size)});
    }
    return blocks;
}

/// Per-layer approximate key/value store. Rows are indexed by sequence
/// position and hold all heads concatenated (post-rotary keys). Mean keys of
/// every prompt block are kept current with the cached prompt rows.
class KVCache {
public:
    KVCache(std::size_t num_layers, std::size_t seq_len, std::size_t num_heads, std::size_t head_dim,
            std::size_t prompt_len, std::size_t prompt_block_size)
        : seq_len_(seq_len),
          heads_(num_heads),
          head_dim_(head_dim),
          prompt_len_(prompt_len),
          blocks_(block_partition(prompt_len, prompt_block_size)) {
        require(prompt_len <= seq_len, ErrorCode::kConfig, "prompt longer than sequence");
        layers_.resize(num_layers);
        for (auto& l : layers_) {
            l.keys = Tensor2D(seq_len, num_heads * head_dim);
            l.values = Tensor2D(seq_len, num_heads * head_dim);
            l.valid.assign(seq_len, 0);
            l.block_means = Tensor3D(num_heads, blocks_.size(), head_dim);
        }
    }

    std::size_t num_layers() const noexcept { return layers_.size(); }
    std::size_t seq_len() const noexcept { return seq_len_; }
    std::size_t num_heads() const noexcept { return heads_; }
    std::size_t head_dim() const noexcept { return head_dim_; }
    std::size_t hidden() const noexcept { return heads_ * head_dim_; }
    std::size_t prompt_len() const noexcept { return prompt_len_; }
    const std::vector<PromptBlock>& blocks() const noexcept { return blocks_; }

    bool is_valid(std::size_t layer, std::size_t pos) const {
        return pos < seq_len_ && layer_at(layer).valid[pos] != 0;
    }

    std::span<const float> key_row(std::size_t layer, std::size_t pos) const { return layer_at(layer).keys.row(pos); }
    std::span<const float> value_row(std::size_t layer, std::size_t pos) const {
        return layer_at(layer).values.row(pos);
    }

    /// Mean cached key of each prompt block: [heads x blocks x head_dim].
    const Tensor3D& block_means(std::size_t layer) const { return layer_at(layer).block_means; }

    /// Overwrites every row of `layer`. keys/values: [heads x seq_len x head_dim].
    void full_refresh(std::size_t layer, const Tensor3D& keys, const Tensor3D& values) {
        require(keys.rows() == seq_len_ && values.rows() == seq_len_, ErrorCode::kShape,
                "full refresh needs " + std::to_string(seq_len_) + " rows, got " + std::to_string(keys.rows()));
        check_heads(keys, values);
        auto& l = layer_at(layer);
        for (std::size_t pos = 0; pos < seq_len_; ++pos) {
            write_row(l, pos, keys, values, pos);
        }
        recompute_means(l, 0, blocks_.size());
    }

    /// Overwrites only the listed rows; row r of keys/values goes to indices[r].
    /// Prompt rows are rejected unless `allow_prompt` is set.
    void refresh_at(std::size_t layer, std::span<const std::size_t> indices, const Tensor3D& keys,
                    const Tensor3D& values, bool allow_prompt = false) {
        require(keys.rows() == indices.size() && values.rows() == indices.size(), ErrorCode::kShape,
                "refresh_at needs one key/value row per index");
        if (indices.empty()) {
            return;
        }
        check_heads(keys, values);
        for (auto pos : indices) {
            require(pos < seq_len_, ErrorCode::kBounds, "refresh index " + std::to_string(pos) + " out of range");
            require(allow_prompt || pos >= prompt_len_, ErrorCode::kBounds,
                    "refresh index " + std::to_string(pos) + " touches the prompt without permission");
        }
        auto& l = layer_at(layer);
        bool touched_prompt = false;
        for (std::size_t r = 0; r < indices.size(); ++r) {
            write_row(l, indices[r], keys, values, r);
            touched_prompt = touched_prompt || indices[r] < prompt_len_;
        }
        if (touched_prompt) {
            recompute_means(l, 0, blocks_.size());
        }
    }

    /// Rows at `indices`, in the given order, split into heads.
    std::pair<Tensor3D, Tensor3D> gather(std::size_t layer, std::span<const std::size_t> indices) const {
        const auto& l = layer_at(layer);
        Tensor3D k(heads_, indices.size(), head_dim_);
        Tensor3D v(heads_, indices.size(), head_dim_);
        for (std::size_t r = 0; r < indices.size(); ++r) {
            const auto pos = indices[r];
            if (pos >= seq_len_ || l.valid[pos] == 0) {
                fail(ErrorCode::kCacheMiss, "position " + std::to_string(pos) + " not cached at layer " +
                                                std::to_string(layer));
            }
            copy_row_to_heads(l.keys.row(pos), k, r);
            copy_row_to_heads(l.values.row(pos), v, r);
        }
        return {std::move(k), std::move(v)};
    }

    /// FNV-1a over the raw key/value bytes and validity of one layer.
    std::uint64_t checksum(std::size_t layer) const {
        const auto& l = layer_at(layer);
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&h](const void* p, std::size_t n) {
            const auto* b = static_cast<const std::uint8_t*>(p);
            for (std::size_t i = 0; i < n; ++i) {
                h = (h ^ b[i]) * 1099511628211ull;
            }
        };
        mix(l.keys.data().data(), l.keys.size() * sizeof(float));
        mix(l.values.data().data(), l.values.size() * sizeof(float));
        mix(l.valid.data(), l.valid.size());
        return h;
    }

    /// Writes one layer to the tensor container format for offline inspection.
    void dump_layer(const std::filesystem::path& path, std::size_t layer) const {
        const auto& l = layer_at(layer);
        std::vector<NamedTensor> tensors;
        tensors.push_back({"keys", {seq_len_, hidden()}, l.keys.storage()});
        tensors.push_back({"values", {seq_len_, hidden()}, l.values.storage()});
        std::vector<float> valid(l.valid.begin(), l.valid.end());
        tensors.push_back({"valid", {seq_len_}, std::move(valid)});
        const auto& m = l.block_means;
        tensors.push_back({"block_means", {m.heads(), m.rows(), m.cols()}, {m.data().begin(), m.data().end()}});
        write_container(path, tensors);
    }

private:
    struct Layer {
        Tensor2D keys;
        Tensor2D values;
        std::vector<std::uint8_t> valid;
        Tensor3D block_means;
    };

    const Layer& layer_at(std::size_t layer) const {
        require(layer < layers_.size(), ErrorCode::kBounds, "layer " + std::to_string(layer) + " out of range");
        return layers_[layer];
    }
    Layer& layer_at(std::size_t layer) {
        require(layer < layers_.size(), ErrorCode::kBounds, "layer " + std::to_string(layer) + " out of range");
        return layers_[layer];
    }

    void check_heads(const Tensor3D& keys, const Tensor3D& values) const {
        require(keys.heads() == heads_ && values.heads() == heads_ && keys.cols() == head_dim_ &&
                    values.cols() == head_dim_,
                ErrorCode::kShape, "key/value head layout does not match cache");
    }

    void write_row(Layer& l, std::size_t pos, const Tensor3D& keys, const Tensor3D& values, std::size_t src) {
        auto krow = l.keys.row(pos);
        auto vrow = l.values.row(pos);
        for (std::size_t h = 0; h < heads_; ++h) {
            std::copy_n(keys.row(h, src).begin(), head_dim_, krow.begin() + h * head_dim_);
            std::copy_n(values.row(h, src).begin(), head_dim_, vrow.begin() + h * head_dim_);
        }
        l.valid[pos] = 1;
    }

    void copy_row_to_heads(std::span<const float> row, Tensor3D& dst, std::size_t r) const {
        for (std::size_t h = 0; h < heads_; ++h) {
            std::copy_n(row.begin() + h * head_dim_, head_dim_, dst.row(h, r).begin());
        }
    }

    void recompute_means(Layer& l, std::size_t first, std::size_t last) {
        std::vector<double> acc(hidden());
        for (std::size_t b = first; b < last; ++b) {
            const auto& blk = blocks_[b];
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t pos = blk.start; pos < blk.end; ++pos) {
                const auto row = l.keys.row(pos);
                for (std::size_t c = 0; c < acc.size(); ++c) {
                    acc[c] += row[c];
                }
            }
            const double inv = 1.0 / static_cast<double>(blk.size());
            for (std::size_t h = 0; h < heads_; ++h) {
                auto dst = l.block_means.row(h, b);
                for (std::size_t t = 0; t < head_dim_; ++t) {
                    dst[t] = static_cast<float>(acc[h * head_dim_ + t] * inv);
                }
            }
        }
    }

    std::size_t seq_len_;
    std::size_t heads_;
    std::size_t head_dim_;
    std::size_t prompt_len_;
    std::vector<PromptBlock> blocks_;
    std::vector<Layer> layers_;
};

/// Maps sequence positions to their row among the positions being forwarded.
class ActiveSlots {
public:
    ActiveSlots(std::span<const std::size_t> active, std::size_t seq_len) : slot_(seq_len, -1) {
        for (std::size_t r = 0; r < active.size(); ++r) {
            require(active[r] < seq_len, ErrorCode::kBounds,
                    "active position " + std::to_string(active[r]) + " out of range");
            require(slot_[active[r]] < 0, ErrorCode::kUsage, "duplicate active position");
            slot_[active[r]] = static_cast<std::int64_t>(r);
        }
    }

    std::int64_t slot(std::size_t pos) const noexcept { return pos < slot_.size() ? slot_[pos] : -1; }
    std::size_t seq_len() const noexcept { return slot_.size(); }

private:
    std::vector<std::int64_t> slot_;
};

/// Key/value rows for one layer of one forward pass: freshly computed rows for
/// the forwarded positions, cached rows for everything else.
class KVView {
public:
    KVView(const KVCache* cache, std::size_t layer, const ActiveSlots& slots, const Tensor3D& fresh_keys,
           const Tensor3D& fresh_values)
        : cache_(cache), layer_(layer), slots_(slots), keys_(fresh_keys), values_(fresh_values) {}

    std::size_t seq_len() const noexcept { return slots_.seq_len(); }
    std::size_t layer() const noexcept { return layer_; }

    std::pair<Tensor3D, Tensor3D> gather(std::span<const std::size_t> positions) const {
        const std::size_t heads = keys_.heads();
        const std::size_t d = keys_.cols();
        Tensor3D k(heads, positions.size(), d);
        Tensor3D v(heads, positions.size(), d);
        for (std::size_t r = 0; r < positions.size(); ++r) {
            const auto pos = positions[r];
            const auto s = slots_.slot(pos);
            if (s >= 0) {
                for (std::size_t h = 0; h < heads; ++h) {
                    std::copy_n(keys_.row(h, static_cast<std::size_t>(s)).begin(), d, k.row(h, r).begin());
                    std::copy_n(values_.row(h, static_cast<std::size_t>(s)).begin(), d, v.row(h, r).begin());
                }
                continue;
            }
            if (cache_ == nullptr || !cache_->is_valid(layer_, pos)) {
                fail(ErrorCode::kCacheMiss, "no key/value for position " + std::to_string(pos) + " at layer " +
                                                std::to_string(layer_));
            }
            const auto krow = cache_->key_row(layer_, pos);
            const auto vrow = cache_->value_row(layer_, pos);
            for (std::size_t h = 0; h < heads; ++h) {
                std::copy_n(krow.begin() + h * d, d, k.row(h, r).begin());
                std::copy_n(vrow.begin() + h * d, d, v.row(h, r).begin());
            }
        }
        return {std::move(k), std::move(v)};
    }

    const KVCache* cache() const noexcept { return cache_; }

private:
    const KVCache* cache_;
    std::size_t layer_;
    const ActiveSlots& slots_;
    const Tensor3D& keys_;
    const Tensor3D& values_;
};

}  // namespace dlm
