// Copyright 2026 The dlmsparse Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "dlm/focus_attention.hpp"
#include "test_util.hpp"

namespace dlm {
namespace {

using testing::random_3d;

std::vector<std::size_t> range(std::size_t a, std::size_t b) { return iota_positions(a, b); }

std::vector<float> conf_by_position(std::initializer_list<std::pair<std::size_t, float>> entries, std::size_t size) {
    std::vector<float> c(size, 0.0f);
    for (auto [p, v] : entries) c[p] = v;
    return c;
}

TEST(FocusConfig, DefaultsAndValidation) {
    FocusConfig c;
    EXPECT_EQ(c.rho, 4.0);
    EXPECT_EQ(c.window, 8u);
    EXPECT_EQ(c.dense_layers, 6u);
    EXPECT_EQ(c.alpha, 0.5);
    EXPECT_EQ(c.sink_fraction, 0.01);
    EXPECT_EQ(c.prompt_block_size, 64u);
    EXPECT_NO_THROW(c.validate(8));
    EXPECT_THROW(c.validate(5), Error);
    auto bad = c;
    bad.alpha = 0.0;
    try {
        bad.validate(8);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kConfig);
        EXPECT_NE(std::string(e.what()).find("alpha"), std::string::npos);
    }
    bad = c;
    bad.rho = 0.5;
    EXPECT_THROW(bad.validate(8), Error);
    bad = c;
    bad.trailing_dense_layers = 3;
    EXPECT_THROW(bad.validate(8), Error);
    bad = c;
    bad.sink_fraction = 1.5;
    EXPECT_THROW(bad.validate(8), Error);
}

TEST(FocusConfig, DenseLayerLayout) {
    FocusConfig c;
    c.dense_layers = 2;
    c.trailing_dense_layers = 1;
    std::vector<bool> dense;
    for (std::size_t l = 0; l < 6; ++l) dense.push_back(c.is_dense_layer(l, 6));
    EXPECT_EQ(dense, (std::vector<bool>{true, true, false, false, false, true}));
    EXPECT_EQ(c.probe_layer(), 1u);
}

TEST(Rounding, HalfToEven) {
    EXPECT_EQ(round_half_even(0.5), 0u);
    EXPECT_EQ(round_half_even(1.5), 2u);
    EXPECT_EQ(round_half_even(2.5), 2u);
    EXPECT_EQ(round_half_even(2.4), 2u);
    EXPECT_EQ(round_half_even(2.6), 3u);
    EXPECT_EQ(sink_count(0.01, 512), 5u);
    EXPECT_EQ(sink_count(0.01, 50), 0u);
    EXPECT_EQ(sink_count(0.01, 150), 2u);
}

TEST(SelectFocus, TopKByConfidence) {
    const auto c = conf_by_position({{4, 0.9f}, {5, 0.1f}, {6, 0.6f}, {7, 0.3f}}, 8);
    EXPECT_EQ(select_focus(c, 1, 2.0, range(4, 8)), (std::vector<std::size_t>{4, 6}));
}

TEST(SelectFocus, ZeroTokensGivesEmptySet) {
    const auto c = conf_by_position({{4, 0.9f}}, 8);
    EXPECT_TRUE(select_focus(c, 0, 4.0, range(4, 8)).empty());
}

TEST(SelectFocus, ClampedToMaskedCount) {
    const auto c = conf_by_position({{4, 0.9f}, {5, 0.1f}, {6, 0.6f}}, 8);
    EXPECT_EQ(select_focus(c, 1, 4.0, range(4, 7)), range(4, 7));
}

TEST(SelectFocus, TiesGoToLowerPosition) {
    const std::vector<float> c(16, 0.5f);
    EXPECT_EQ(select_focus(c, 1, 3.0, range(8, 16)), (std::vector<std::size_t>{8, 9, 10}));
}

TEST(ExpandWindow, Examples) {
    EXPECT_EQ(expand_window(std::vector<std::size_t>{5}, 8, 0, 32), range(1, 10));
    EXPECT_EQ(expand_window(std::vector<std::size_t>{0}, 8, 0, 32), range(0, 5));
    EXPECT_EQ(expand_window(std::vector<std::size_t>{3, 5}, 4, 0, 32), range(1, 8));
    EXPECT_EQ(expand_window(std::vector<std::size_t>{31}, 8, 0, 32), range(27, 32));
    EXPECT_EQ(expand_window(std::vector<std::size_t>{100}, 8, 96, 128), range(96, 105));
    EXPECT_TRUE(expand_window(std::vector<std::size_t>{}, 8, 0, 32).empty());
    EXPECT_THROW(expand_window(std::vector<std::size_t>{40}, 8, 0, 32), Error);
}

TEST(Sinks, IdenticalKeysPickLowestIndices) {
    std::mt19937_64 rng(1);
    const Tensor3D q = random_3d(rng, 2, 3, 4);
    Tensor3D k(2, 10, 4);
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t j = 0; j < 10; ++j)
            for (std::size_t t = 0; t < 4; ++t) k(h, j, t) = 0.25f * static_cast<float>(t);
    const auto s = sink_scores(q, k);
    for (float v : s) EXPECT_FLOAT_EQ(v, 0.1f);
    EXPECT_EQ(identify_sinks(q, k, 3), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Sinks, ZeroCountIsEmpty) {
    std::mt19937_64 rng(2);
    EXPECT_TRUE(identify_sinks(random_3d(rng, 1, 2, 4), random_3d(rng, 1, 5, 4), 0).empty());
}

TEST(Sinks, CountAbovePromptIsConfigError) {
    std::mt19937_64 rng(3);
    EXPECT_THROW(identify_sinks(random_3d(rng, 1, 2, 4), random_3d(rng, 1, 5, 4), 6), Error);
}

TEST(Sinks, SingleSpikedKey) {
    Tensor3D q(1, 1, 4, {1, 0, 0, 0});
    Tensor3D k(1, 16, 4);
    k(0, 7, 0) = 1.0f;
    // 64-bit oracle: exp(1/2)/(15 + exp(1/2)) at j=7, 1/(15 + exp(1/2)) elsewhere
    const double z = 15.0 + std::exp(0.5);
    const auto s = sink_scores(q, k);
    for (std::size_t j = 0; j < 16; ++j) {
        EXPECT_NEAR(s[j], (j == 7 ? std::exp(0.5) : 1.0) / z, 1e-7);
    }
    EXPECT_EQ(identify_sinks(q, k, 1), (std::vector<std::size_t>{7}));
}

TEST(Sinks, ScoresMatchDoubleOracle) {
    std::mt19937_64 rng(4);
    for (auto agg : {QueryAggregation::kMean, QueryAggregation::kSumSoftmax}) {
        const Tensor3D q = random_3d(rng, 3, 5, 8);
        const Tensor3D k = random_3d(rng, 3, 23, 8);
        std::vector<double> ref(23, 0.0);
        for (std::size_t h = 0; h < 3; ++h) {
            std::vector<std::vector<double>> queries;
            if (agg == QueryAggregation::kMean) {
                std::vector<double> m(8, 0.0);
                for (std::size_t i = 0; i < 5; ++i)
                    for (std::size_t t = 0; t < 8; ++t) m[t] += q(h, i, t) / 5.0;
                queries.push_back(m);
            } else {
                for (std::size_t i = 0; i < 5; ++i) {
                    std::vector<double> r(8);
                    for (std::size_t t = 0; t < 8; ++t) r[t] = q(h, i, t);
                    queries.push_back(r);
                }
            }
            for (const auto& qq : queries) {
                std::vector<double> s(23);
                double mx = -1e300;
                for (std::size_t j = 0; j < 23; ++j) {
                    double d = 0.0;
                    for (std::size_t t = 0; t < 8; ++t) d += qq[t] * k(h, j, t);
                    s[j] = d / std::sqrt(8.0);
                    mx = std::max(mx, s[j]);
                }
                double z = 0.0;
                for (double& e : s) z += (e = std::exp(e - mx));
                for (std::size_t j = 0; j < 23; ++j) ref[j] += s[j] / z / static_cast<double>(queries.size()) / 3.0;
            }
        }
        const auto s = sink_scores(q, k, agg);
        for (std::size_t j = 0; j < 23; ++j) EXPECT_NEAR(s[j], ref[j], 1e-6);
    }
}

TEST(BlockRelevance, ZeroMeansGiveZeroScores) {
    std::mt19937_64 rng(5);
    const auto r = block_relevance(random_3d(rng, 2, 3, 4), Tensor3D(2, 6, 4));
    for (float v : r) EXPECT_EQ(v, 0.0f);
}

TEST(BlockRelevance, SingleBlockIsSelected) {
    std::mt19937_64 rng(6);
    const auto r = block_relevance(random_3d(rng, 2, 3, 4), random_3d(rng, 2, 1, 4));
    EXPECT_EQ(select_blocks(r, 0.5, 1), (std::vector<std::size_t>{0}));
}

TEST(BlockRelevance, MatchesDoubleOracle) {
    std::mt19937_64 rng(7);
    const Tensor3D q = random_3d(rng, 2, 4, 6);
    const Tensor3D means = random_3d(rng, 2, 9, 6);
    const auto r = block_relevance(q, means);
    for (std::size_t b = 0; b < 9; ++b) {
        double ref = 0.0;
        for (std::size_t h = 0; h < 2; ++h) {
            for (std::size_t t = 0; t < 6; ++t) {
                double m = 0.0;
                for (std::size_t i = 0; i < 4; ++i) m += q(h, i, t);
                ref += m / 4.0 * means(h, b, t);
            }
        }
        EXPECT_NEAR(r[b], ref / 2.0, 1e-6);
    }
}

TEST(SelectBlocks, Counts) {
    EXPECT_EQ(relevant_block_count(0.5, 10), 5u);
    EXPECT_EQ(relevant_block_count(1.0, 10), 10u);
    EXPECT_EQ(relevant_block_count(0.5, 1), 1u);
    EXPECT_EQ(relevant_block_count(0.29, 100), 29u);
    EXPECT_EQ(relevant_block_count(0.5, 0), 0u);
    const std::vector<float> r = {0.1f, 0.9f, 0.3f, 0.9f, -1.0f, 0.5f};
    EXPECT_EQ(select_blocks(r, 0.5, 6), (std::vector<std::size_t>{1, 3, 5}));
    EXPECT_EQ(select_blocks(r, 1.0, 6), range(0, 6));
    EXPECT_THROW(select_blocks(r, 0.5, 5), Error);
}

TEST(TopK, MatchesFullSortOracle) {
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<int> coarse(0, 5);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + trial % 40;
        std::vector<float> s(n);
        for (float& v : s) v = static_cast<float>(coarse(rng)) * 0.5f;
        const std::size_t k = static_cast<std::size_t>(trial) % (n + 2);
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return s[a] > s[b]; });
        idx.resize(std::min(k, n));
        std::sort(idx.begin(), idx.end());
        ASSERT_EQ(top_k_indices<float>(s, k), idx);
    }
}

TEST(IndexSet, Assembly) {
    const auto blocks = block_partition(256, 64);
    EXPECT_EQ(assemble_index_set(std::vector<std::size_t>{70}, std::vector<std::size_t>{1}, blocks).size(), 64u);
    const auto ip = assemble_index_set(std::vector<std::size_t>{3}, std::vector<std::size_t>{1}, blocks);
    EXPECT_EQ(ip.size(), 65u);
    EXPECT_EQ(ip.front(), 3u);
    EXPECT_EQ(ip[1], 64u);
    EXPECT_EQ(ip.back(), 127u);
    EXPECT_TRUE(assemble_index_set({}, {}, blocks).empty());
    EXPECT_THROW(assemble_index_set({}, std::vector<std::size_t>{4}, blocks), Error);
}

struct SparseFixture {
    std::size_t prompt_len = 12;
    std::size_t seq_len = 18;
    KVCache cache{1, 18, 1, 4, 12, 4};
    std::vector<std::size_t> active = {13, 14, 15};
    ActiveSlots slots{std::vector<std::size_t>{13, 14, 15}, 18};
    Tensor3D q, fk, fv;

    explicit SparseFixture(std::mt19937_64& rng) {
        cache.full_refresh(0, random_3d(rng, 1, seq_len, 4), random_3d(rng, 1, seq_len, 4));
        q = random_3d(rng, 1, 3, 4);
        fk = random_3d(rng, 1, 3, 4);
        fv = random_3d(rng, 1, 3, 4);
    }
};

TEST(SparseAttend, WholePromptEqualsFullAttention) {
    std::mt19937_64 rng(9);
    SparseFixture f(rng);
    const KVView view(&f.cache, 0, f.slots, f.fk, f.fv);
    const LayerQuery query{0, f.active, f.q, view, nullptr};
    FullAttention full;
    const auto dense = full.attend(query);
    const auto sparse = sparse_attend(query, range(0, f.prompt_len), f.prompt_len);
    EXPECT_EQ(sparse.output, dense.output);
    EXPECT_EQ(sparse.context_size, f.seq_len);
}

TEST(SparseAttend, SingleKeyGivesItsValue) {
    std::mt19937_64 rng(10);
    KVCache cache(1, 3, 1, 4, 2, 2);
    cache.full_refresh(0, random_3d(rng, 1, 3, 4), random_3d(rng, 1, 3, 4));
    const std::vector<std::size_t> active = {2};
    const ActiveSlots slots(active, 3);
    const Tensor3D q = random_3d(rng, 1, 1, 4);
    const Tensor3D fk = random_3d(rng, 1, 1, 4);
    const Tensor3D fv = random_3d(rng, 1, 1, 4);
    const KVView view(&cache, 0, slots, fk, fv);
    const auto out = sparse_attend(LayerQuery{0, active, q, view, nullptr}, {}, 2);
    EXPECT_EQ(out.context_size, 1u);
    for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(out.output(0, 0, t), fv(0, 0, t));
}

TEST(SparseAttend, MatchesNaiveOracleOverGatheredRows) {
    std::mt19937_64 rng(11);
    KVCache cache(1, 7, 1, 4, 4, 2);
    cache.full_refresh(0, random_3d(rng, 1, 7, 4), random_3d(rng, 1, 7, 4));
    const std::vector<std::size_t> active = {5};
    const ActiveSlots slots(active, 7);
    const Tensor3D q = random_3d(rng, 1, 1, 4);
    const Tensor3D fk = random_3d(rng, 1, 1, 4);
    const Tensor3D fv = random_3d(rng, 1, 1, 4);
    const KVView view(&cache, 0, slots, fk, fv);
    const std::vector<std::size_t> ip = {0, 1, 2, 3};
    const auto out = sparse_attend(LayerQuery{0, active, q, view, nullptr}, ip, 4);
    // context: 4 prompt rows + response rows 4, 5 (fresh), 6
    const std::vector<std::size_t> ctx = {0, 1, 2, 3, 4, 5, 6};
    ASSERT_EQ(out.context_size, ctx.size());
    std::vector<double> s;
    double mx = -1e300;
    for (auto p : ctx) {
        double d = 0.0;
        for (std::size_t t = 0; t < 4; ++t) d += static_cast<double>(q(0, 0, t)) * (p == 5 ? fk(0, 0, t) : cache.key_row(0, p)[t]);
        s.push_back(d / 2.0);
        mx = std::max(mx, s.back());
    }
    double z = 0.0;
    for (double& e : s) z += (e = std::exp(e - mx));
    for (std::size_t t = 0; t < 4; ++t) {
        double acc = 0.0;
        for (std::size_t c = 0; c < ctx.size(); ++c) {
            acc += s[c] / z * (ctx[c] == 5 ? fv(0, 0, t) : cache.value_row(0, ctx[c])[t]);
        }
        EXPECT_NEAR(out.output(0, 0, t), acc, 1e-5);
    }
}

TEST(SparseAttend, RejectsNonPromptSelection) {
    std::mt19937_64 rng(12);
    SparseFixture f(rng);
    const KVView view(&f.cache, 0, f.slots, f.fk, f.fv);
    EXPECT_THROW(sparse_attend(LayerQuery{0, f.active, f.q, view, nullptr}, std::vector<std::size_t>{12}, 12), Error);
}

}  // namespace
}  // namespace dlm
