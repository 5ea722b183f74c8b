// Copyright 2026 The dlmsparse Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "dlm/kv_cache.hpp"
#include "test_util.hpp"

namespace dlm {
namespace {

using testing::random_3d;

constexpr std::size_t kHeads = 2;
constexpr std::size_t kDim = 4;

KVCache filled_cache(std::mt19937_64& rng, std::size_t seq_len = 20, std::size_t prompt_len = 12,
                     std::size_t block = 4) {
    KVCache c(2, seq_len, kHeads, kDim, prompt_len, block);
    for (std::size_t l = 0; l < 2; ++l) {
        c.full_refresh(l, random_3d(rng, kHeads, seq_len, kDim), random_3d(rng, kHeads, seq_len, kDim));
    }
    return c;
}

ErrorCode error_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no error raised";
    return ErrorCode::kUsage;
}

TEST(BlockPartition, Examples) {
    const auto b = block_partition(200, 64);
    ASSERT_EQ(b.size(), 4u);
    EXPECT_EQ(b[0].size(), 64u);
    EXPECT_EQ(b[1].size(), 64u);
    EXPECT_EQ(b[2].size(), 64u);
    EXPECT_EQ(b[3].size(), 8u);
    EXPECT_EQ(b[3].start, 192u);
    EXPECT_EQ(b[3].end, 200u);
    EXPECT_EQ(block_partition(64, 64).size(), 1u);
    EXPECT_TRUE(block_partition(0, 64).empty());
    EXPECT_EQ(error_of([] { block_partition(10, 0); }), ErrorCode::kConfig);
}

TEST(KVCache, ReadBackIsBitwise) {
    std::mt19937_64 rng(1);
    KVCache c(1, 10, kHeads, kDim, 4, 2);
    const Tensor3D k = random_3d(rng, kHeads, 10, kDim);
    const Tensor3D v = random_3d(rng, kHeads, 10, kDim);
    c.full_refresh(0, k, v);
    const auto [gk, gv] = c.gather(0, std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
    EXPECT_EQ(gk, k);
    EXPECT_EQ(gv, v);
}

TEST(KVCache, GatherFollowsRequestOrder) {
    std::mt19937_64 rng(2);
    const KVCache c = filled_cache(rng);
    const auto [k, v] = c.gather(1, std::vector<std::size_t>{5, 2});
    for (std::size_t h = 0; h < kHeads; ++h) {
        for (std::size_t t = 0; t < kDim; ++t) {
            EXPECT_EQ(k(h, 0, t), c.key_row(1, 5)[h * kDim + t]);
            EXPECT_EQ(k(h, 1, t), c.key_row(1, 2)[h * kDim + t]);
            EXPECT_EQ(v(h, 0, t), c.value_row(1, 5)[h * kDim + t]);
        }
    }
}

TEST(KVCache, UnwrittenReadIsCacheMiss) {
    KVCache c(1, 8, kHeads, kDim, 4, 2);
    EXPECT_EQ(error_of([&] { c.gather(0, std::vector<std::size_t>{3}); }), ErrorCode::kCacheMiss);
    EXPECT_EQ(error_of([&] { c.gather(0, std::vector<std::size_t>{99}); }), ErrorCode::kCacheMiss);
}

TEST(KVCache, RefreshTouchesOnlyListedRows) {
    std::mt19937_64 rng(3);
    KVCache c = filled_cache(rng);
    const std::vector<float> row11(c.key_row(0, 11).begin(), c.key_row(0, 11).end());
    const std::vector<float> row13(c.key_row(0, 13).begin(), c.key_row(0, 13).end());
    const Tensor3D k = random_3d(rng, kHeads, 1, kDim);
    const Tensor3D v = random_3d(rng, kHeads, 1, kDim);
    c.refresh_at(0, std::vector<std::size_t>{12}, k, v);
    EXPECT_EQ(std::vector<float>(c.key_row(0, 11).begin(), c.key_row(0, 11).end()), row11);
    EXPECT_EQ(std::vector<float>(c.key_row(0, 13).begin(), c.key_row(0, 13).end()), row13);
    const auto [gk, gv] = c.gather(0, std::vector<std::size_t>{12});
    EXPECT_EQ(gk, k);
    EXPECT_EQ(gv, v);
}

TEST(KVCache, EmptyRefreshIsNoOp) {
    std::mt19937_64 rng(4);
    KVCache c = filled_cache(rng);
    const auto before = c.checksum(0);
    c.refresh_at(0, std::vector<std::size_t>{}, Tensor3D(kHeads, 0, kDim), Tensor3D(kHeads, 0, kDim));
    EXPECT_EQ(c.checksum(0), before);
}

TEST(KVCache, ChecksumSeesSingleRowChange) {
    std::mt19937_64 rng(5);
    KVCache c = filled_cache(rng);
    const auto before0 = c.checksum(0);
    const auto before1 = c.checksum(1);
    c.refresh_at(1, std::vector<std::size_t>{15}, random_3d(rng, kHeads, 1, kDim), random_3d(rng, kHeads, 1, kDim));
    EXPECT_EQ(c.checksum(0), before0);
    EXPECT_NE(c.checksum(1), before1);
}

TEST(KVCache, PromptWritesNeedPermission) {
    std::mt19937_64 rng(6);
    KVCache c = filled_cache(rng);
    const Tensor3D k = random_3d(rng, kHeads, 1, kDim);
    EXPECT_EQ(error_of([&] { c.refresh_at(0, std::vector<std::size_t>{3}, k, k); }), ErrorCode::kBounds);
    EXPECT_EQ(error_of([&] { c.refresh_at(0, std::vector<std::size_t>{20}, k, k); }), ErrorCode::kBounds);
    c.refresh_at(0, std::vector<std::size_t>{3}, k, k, true);
    EXPECT_EQ(c.gather(0, std::vector<std::size_t>{3}).first, k);
}

TEST(KVCache, FullRefreshNeedsEveryRow) {
    KVCache c(1, 8, kHeads, kDim, 4, 2);
    EXPECT_EQ(error_of([&] { c.full_refresh(0, Tensor3D(kHeads, 7, kDim), Tensor3D(kHeads, 7, kDim)); }),
              ErrorCode::kShape);
}

TEST(KVCache, BlockMeanOfIdenticalKeysIsThatKey) {
    const std::size_t seq = 6;
    KVCache c(1, seq, 1, kDim, 4, 4);
    Tensor3D k(1, seq, kDim);
    for (std::size_t i = 0; i < seq; ++i) {
        for (std::size_t t = 0; t < kDim; ++t) k(0, i, t) = i < 4 ? 0.1f * static_cast<float>(t + 1) : 9.0f;
    }
    c.full_refresh(0, k, k);
    const auto& m = c.block_means(0);
    ASSERT_EQ(m.rows(), 1u);
    for (std::size_t t = 0; t < kDim; ++t) EXPECT_EQ(m(0, 0, t), 0.1f * static_cast<float>(t + 1));
}

TEST(KVCache, BlockMeanArithmetic) {
    KVCache c(1, 3, 1, 2, 2, 2);
    const Tensor3D k(1, 3, 2, {1, 10, 3, 30, 100, 100});
    c.full_refresh(0, k, k);
    EXPECT_EQ(c.block_means(0)(0, 0, 0), 2.0f);
    EXPECT_EQ(c.block_means(0)(0, 0, 1), 20.0f);
}

TEST(KVCache, BlockMeansMatchDoubleOracleAndTrackPromptWrites) {
    std::mt19937_64 rng(7);
    KVCache c = filled_cache(rng, 30, 22, 5);
    auto check = [&] {
        const auto& m = c.block_means(1);
        ASSERT_EQ(m.rows(), 5u);
        for (std::size_t b = 0; b < 5; ++b) {
            const std::size_t lo = b * 5;
            const std::size_t hi = std::min<std::size_t>(22, lo + 5);
            for (std::size_t h = 0; h < kHeads; ++h) {
                for (std::size_t t = 0; t < kDim; ++t) {
                    double s = 0.0;
                    for (std::size_t p = lo; p < hi; ++p) s += c.key_row(1, p)[h * kDim + t];
                    ASSERT_NEAR(m(h, b, t), s / static_cast<double>(hi - lo), 1e-7);
                }
            }
        }
    };
    check();
    c.refresh_at(1, std::vector<std::size_t>{7, 21}, random_3d(rng, kHeads, 2, kDim), random_3d(rng, kHeads, 2, kDim),
                 true);
    check();
}

TEST(KVView, FreshRowsOverrideCache) {
    std::mt19937_64 rng(8);
    const KVCache c = filled_cache(rng);
    const std::vector<std::size_t> active = {13, 15};
    const ActiveSlots slots(active, 20);
    const Tensor3D fk = random_3d(rng, kHeads, 2, kDim);
    const Tensor3D fv = random_3d(rng, kHeads, 2, kDim);
    const KVView view(&c, 0, slots, fk, fv);
    const auto [k, v] = view.gather(std::vector<std::size_t>{15, 14, 13});
    const auto [ck, cv] = c.gather(0, std::vector<std::size_t>{14});
    for (std::size_t h = 0; h < kHeads; ++h) {
        for (std::size_t t = 0; t < kDim; ++t) {
            EXPECT_EQ(k(h, 0, t), fk(h, 1, t));
            EXPECT_EQ(k(h, 1, t), ck(h, 0, t));
            EXPECT_EQ(k(h, 2, t), fk(h, 0, t));
            EXPECT_EQ(v(h, 0, t), fv(h, 1, t));
            EXPECT_EQ(v(h, 1, t), cv(h, 0, t));
        }
    }
}

TEST(KVView, MissingRowWithoutCacheIsCacheMiss) {
    const std::vector<std::size_t> active = {1};
    const ActiveSlots slots(active, 4);
    const Tensor3D fk(kHeads, 1, kDim);
    const KVView view(nullptr, 0, slots, fk, fk);
    EXPECT_EQ(error_of([&] { view.gather(std::vector<std::size_t>{0}); }), ErrorCode::kCacheMiss);
}

TEST(ActiveSlots, RejectsDuplicatesAndOutOfRange) {
    EXPECT_THROW(ActiveSlots(std::vector<std::size_t>{1, 1}, 4), Error);
    EXPECT_THROW(ActiveSlots(std::vector<std::size_t>{4}, 4), Error);
}

}  // namespace
}  // namespace dlm
