// Copyright 2026 The dlmsparse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dlm/container.hpp"
#include "dlm/error.hpp"
#include "dlm/kv_cache.hpp"
#include "dlm/tensor.hpp"

namespace dlm {

using TokenId = std::int32_t;

/// Shape of the bidirectional mask-predictor transformer.
struct ModelConfig {
    std::size_t num_layers = 8;
    std::size_t num_heads = 4;
    std::size_t head_dim = 16;
    std::size_t mlp_dim = 256;
    std::size_t vocab_size = 512;
    TokenId mask_token_id = 511;
    std::size_t max_positions = 8192;
    std::uint64_t seed = 0;

    std::size_t hidden() const noexcept { return num_heads * head_dim; }

    void validate() const {
        require(num_layers >= 1, ErrorCode::kConfig, "num_layers: must be >= 1");
        require(num_heads >= 1, ErrorCode::kConfig, "num_heads: must be >= 1");
        require(head_dim >= 2 && head_dim % 2 == 0, ErrorCode::kConfig, "head_dim: must be even and >= 2");
        require(mlp_dim >= 1, ErrorCode::kConfig, "mlp_dim: must be >= 1");
        require(vocab_size >= 2, ErrorCode::kConfig, "vocab_size: must be >= 2");
        require(mask_token_id >= 0 && static_cast<std::size_t>(mask_token_id) < vocab_size, ErrorCode::kConfig,
                "mask_token_id: must be < vocab_size");
        require(max_positions >= 1, ErrorCode::kConfig, "max_positions: must be >= 1");
    }

    bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
    std::vector<float> attn_norm;  // [hidden]
    Tensor2D wq, wk, wv, wo;       // [hidden x hidden]
    std::vector<float> mlp_norm;   // [hidden]
    Tensor2D w_gate, w_up;         // [hidden x mlp]
    Tensor2D w_down;               // [mlp x hidden]

    bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
    ModelConfig config;
    Tensor2D embedding;  // [vocab x hidden]
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm;  // [hidden]
    Tensor2D lm_head;               // [hidden x vocab]

    bool operator==(const ModelWeights&) const = default;
};

namespace detail {

// Uniform in [-bound, bound) with 24 bits of resolution.
inline float uniform_weight(std::mt19937_64& rng, float bound) {
    const double u = static_cast<double>(rng() >> 40) * (1.0 / 16777216.0);
    return static_cast<float>((2.0 * u - 1.0) * bound);
}

inline Tensor2D random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, float bound) {
    Tensor2D t(rows, cols);
    for (float& v : t.data()) {
        v = uniform_weight(rng, bound);
    }
    return t;
}

inline std::string layer_name(std::size_t layer, const char* leaf) {
    return "layers." + std::to_string(layer) + "." + leaf;
}

}  // namespace detail

/// Seeded weights. Projections are uniform with standard deviation
/// 0.02/sqrt(num_layers); embeddings uniform in [-1, 1); norm gains are one.
inline ModelWeights init_random(const ModelConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    const std::size_t hidden = config.hidden();
    const float proj = static_cast<float>(0.02 / std::sqrt(static_cast<double>(config.num_layers)) * std::sqrt(3.0));

    ModelWeights w;
    w.config = config;
    w.embedding = detail::random_matrix(rng, config.vocab_size, hidden, 1.0f);
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        LayerWeights lw;
        lw.attn_norm.assign(hidden, 1.0f);
        lw.wq = detail::random_matrix(rng, hidden, hidden, proj);
        lw.wk = detail::random_matrix(rng, hidden, hidden, proj);
        lw.wv = detail::random_matrix(rng, hidden, hidden, proj);
        lw.wo = detail::random_matrix(rng, hidden, hidden, proj);
        lw.mlp_norm.assign(hidden, 1.0f);
        lw.w_gate = detail::random_matrix(rng, hidden, config.mlp_dim, proj);
        lw.w_up = detail::random_matrix(rng, hidden, config.mlp_dim, proj);
        lw.w_down = detail::random_matrix(rng, config.mlp_dim, hidden, proj);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm.assign(hidden, 1.0f);
    w.lm_head = detail::random_matrix(rng, hidden, config.vocab_size, proj);
    return w;
}

inline std::vector<NamedTensor> to_named_tensors(const ModelWeights& w) {
    std::vector<NamedTensor> out;
    auto mat = [&out](std::string name, const Tensor2D& t) {
        out.push_back({std::move(name), {t.rows(), t.cols()}, t.storage()});
    };
    auto vec = [&out](std::string name, const std::vector<float>& v) {
        out.push_back({std::move(name), {v.size()}, v});
    };
    mat("embedding", w.embedding);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const auto& lw = w.layers[l];
        vec(detail::layer_name(l, "attn_norm"), lw.attn_norm);
        mat(detail::layer_name(l, "wq"), lw.wq);
        mat(detail::layer_name(l, "wk"), lw.wk);
        mat(detail::layer_name(l, "wv"), lw.wv);
        mat(detail::layer_name(l, "wo"), lw.wo);
        vec(detail::layer_name(l, "mlp_norm"), lw.mlp_norm);
        mat(detail::layer_name(l, "w_gate"), lw.w_gate);
        mat(detail::layer_name(l, "w_up"), lw.w_up);
        mat(detail::layer_name(l, "w_down"), lw.w_down);
    }
    vec("final_norm", w.final_norm);
    mat("lm_head", w.lm_head);
    return out;
}

/// Rebuilds weights from container tensors, checking names and shapes against `config`.
inline ModelWeights from_named_tensors(std::vector<NamedTensor> tensors, const ModelConfig& config) {
    config.validate();
    std::map<std::string, NamedTensor> by_name;
    for (auto& t : tensors) {
        by_name.emplace(t.name, std::move(t));
    }
    auto take = [&by_name](const std::string& name, std::vector<std::uint64_t> dims) -> std::vector<float> {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            fail(ErrorCode::kMissingTensor, "tensor '" + name + "' not found");
        }
        if (it->second.dims != dims) {
            fail(ErrorCode::kShapeMismatch, "tensor '" + name + "' has unexpected shape");
        }
        auto data = std::move(it->second.data);
        by_name.erase(it);
        return data;
    };
    const std::size_t hidden = config.hidden();
    auto mat = [&](const std::string& name, std::size_t r, std::size_t c) { return Tensor2D(r, c, take(name, {r, c})); };

    ModelWeights w;
    w.config = config;
    w.embedding = mat("embedding", config.vocab_size, hidden);
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        LayerWeights lw;
        lw.attn_norm = take(detail::layer_name(l, "attn_norm"), {hidden});
        lw.wq = mat(detail::layer_name(l, "wq"), hidden, hidden);
        lw.wk = mat(detail::layer_name(l, "wk"), hidden, hidden);
        lw.wv = mat(detail::layer_name(l, "wv"), hidden, hidden);
        lw.wo = mat(detail::layer_name(l, "wo"), hidden, hidden);
        lw.mlp_norm = take(detail::layer_name(l, "mlp_norm"), {hidden});
        lw.w_gate = mat(detail::layer_name(l, "w_gate"), hidden, config.mlp_dim);
        lw.w_up = mat(detail::layer_name(l, "w_up"), hidden, config.mlp_dim);
        lw.w_down = mat(detail::layer_name(l, "w_down"), config.mlp_dim, hidden);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = take("final_norm", {hidden});
    w.lm_head = mat("lm_head", hidden, config.vocab_size);
    if (!by_name.empty()) {
        fail(ErrorCode::kShapeMismatch, "unexpected tensor '" + by_name.begin()->first + "' for this config");
    }
    return w;
}

inline void save_weights(const ModelWeights& weights, const std::filesystem::path& path) {
    write_container(path, to_named_tensors(weights));
}

inline ModelWeights load_weights_from_bytes(std::span<const std::uint8_t> bytes, const ModelConfig& config) {
    return from_named_tensors(decode_container(bytes), config);
}

inline ModelWeights load_weights(const std::filesystem::path& path, const ModelConfig& config) {
    return from_named_tensors(read_container(path), config);
}

/// FNV-1a over the serialized container image.
inline std::uint64_t weights_checksum(const ModelWeights& weights) {
    const auto bytes = encode_container(to_named_tensors(weights));
    std::uint64_t h = 1469598103934665603ull;
    for (auto b : bytes) {
        h = (h ^ b) * 1099511628211ull;
    }
    return h;
}

/// One attention row observed during a forward pass.
struct AttentionEvent {
    std::size_t layer = 0;
    std::size_t head = 0;
    std::size_t query_position = 0;
    std::span<const std::size_t> context;  // key positions, in attention order
    std::span<const float> probabilities;  // one per context position
};

/// Observation-only callback; attaching it never changes numeric results.
using LayerForwardHook = std::function<void(const AttentionEvent&)>;

/// Everything an attention strategy sees for one layer.
struct LayerQuery {
    std::size_t layer;
    std::span<const std::size_t> active;  // forwarded positions, row order of `queries`
    const Tensor3D& queries;              // [heads x |active| x head_dim], post-rotary
    const KVView& kv;
    const LayerForwardHook* hook;
};

struct LayerAttention {
    Tensor3D output;  // [heads x |active| x head_dim]
    std::size_t context_size = 0;
};

/// Chooses the key/value context for each layer of a forward pass.
class AttentionPolicy {
public:
    virtual ~AttentionPolicy() = default;
    virtual LayerAttention attend(const LayerQuery& query) = 0;
};

/// Attention of the query rows over the listed context positions.
inline LayerAttention attend_context(const LayerQuery& query, std::span<const std::size_t> context) {
    auto [k, v] = query.kv.gather(context);
    LayerAttention out;
    out.context_size = context.size();
    if (query.hook != nullptr && *query.hook) {
        AttentionProbe probe = [&](std::size_t head, std::size_t row, std::span<const float> probs) {
            (*query.hook)(AttentionEvent{query.layer, head, query.active[row], context, probs});
        };
        out.output = attention(query.queries, k, v, &probe);
    } else {
        out.output = attention(query.queries, k, v);
    }
    return out;
}

inline std::vector<std::size_t> iota_positions(std::size_t begin, std::size_t end) {
    std::vector<std::size_t> out(end - begin);
    std::iota(out.begin(), out.end(), begin);
    return out;
}

/// Every layer attends over all sequence positions in ascending order.
class FullAttention final : public AttentionPolicy {
public:
    LayerAttention attend(const LayerQuery& query) override {
        if (all_.size() != query.kv.seq_len()) {
            all_ = iota_positions(0, query.kv.seq_len());
        }
        return attend_context(query, all_);
    }

private:
    std::vector<std::size_t> all_;
};

struct ForwardResult {
    Tensor2D logits;                    // [|active| x vocab]
    std::vector<Tensor3D> keys;         // per layer [heads x |active| x head_dim], post-rotary
    std::vector<Tensor3D> values;       // per layer
    std::vector<std::size_t> attended;  // per layer context size
};

/// Runs the transformer for the `active` positions of `tokens`. Non-active
/// positions contribute keys/values from `cache`; position ids are the
/// sequence indices, so a subset forward rotates exactly like a full one.
inline ForwardResult forward_layers(const ModelWeights& weights, std::span<const TokenId> tokens,
                                    std::span<const std::size_t> active, const KVCache* cache,
                                    AttentionPolicy& policy, const LayerForwardHook* hook = nullptr) {
    const auto& cfg = weights.config;
    const std::size_t seq_len = tokens.size();
    require(seq_len <= cfg.max_positions, ErrorCode::kConfig,
            "sequence length " + std::to_string(seq_len) + " exceeds max_positions");
    const std::size_t hidden = cfg.hidden();
    ActiveSlots slots(active, seq_len);

    Tensor2D x(active.size(), hidden);
    for (std::size_t r = 0; r < active.size(); ++r) {
        const TokenId tok = tokens[active[r]];
        require(tok >= 0 && static_cast<std::size_t>(tok) < cfg.vocab_size, ErrorCode::kUsage,
                "token id " + std::to_string(tok) + " outside vocabulary");
        const auto e = weights.embedding.row(static_cast<std::size_t>(tok));
        std::copy(e.begin(), e.end(), x.row(r).begin());
    }
    const RotaryTable rotary(active, cfg.head_dim);

    ForwardResult result;
    for (std::size_t layer = 0; layer < cfg.num_layers; ++layer) {
        const auto& lw = weights.layers[layer];
        const Tensor2D h = rms_norm_rows(x, lw.attn_norm);
        Tensor3D q = split_heads(matmul(h, lw.wq), cfg.num_heads);
        Tensor3D k = split_heads(matmul(h, lw.wk), cfg.num_heads);
        Tensor3D v = split_heads(matmul(h, lw.wv), cfg.num_heads);
        rotary.apply(q);
        rotary.apply(k);

        const KVView view(cache, layer, slots, k, v);
        LayerAttention attn = policy.attend(LayerQuery{layer, active, q, view, hook});
        const Tensor2D proj = matmul(merge_heads(attn.output), lw.wo);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x.data()[i] += proj.data()[i];
        }

        const Tensor2D h2 = rms_norm_rows(x, lw.mlp_norm);
        Tensor2D gate = matmul(h2, lw.w_gate);
        const Tensor2D up = matmul(h2, lw.w_up);
        for (std::size_t i = 0; i < gate.size(); ++i) {
            gate.data()[i] = silu(gate.data()[i]) * up.data()[i];
        }
        const Tensor2D down = matmul(gate, lw.w_down);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x.data()[i] += down.data()[i];
        }

        result.keys.push_back(std::move(k));
        result.values.push_back(std::move(v));
        result.attended.push_back(attn.context_size);
    }
    result.logits = matmul(rms_norm_rows(x, weights.final_norm), weights.lm_head);
    return result;
}

/// Whole-sequence forward with full attention and no cache.
inline ForwardResult full_forward(const ModelWeights& weights, std::span<const TokenId> tokens,
                                  const LayerForwardHook* hook = nullptr) {
    const auto all = iota_positions(0, tokens.size());
    FullAttention policy;
    return forward_layers(weights, tokens, all, nullptr, policy, hook);
}

}  // namespace dlm
