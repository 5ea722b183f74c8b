// Copyright 2026 The dlmsparse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dlm/error.hpp"
#include "dlm/parallel.hpp"

namespace dlm {

/// Row-major 2-D float tensor.
class Tensor2D {
public:
    Tensor2D() = default;
    Tensor2D(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}
    Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        require(data_.size() == rows_ * cols_, ErrorCode::kShape,
                "tensor data length " + std::to_string(data_.size()) + " != " + std::to_string(rows_) + "x" +
                    std::to_string(cols_));
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    std::vector<float>& storage() noexcept { return data_; }
    const std::vector<float>& storage() const noexcept { return data_; }

    std::span<float> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
    std::span<const float> row(std::size_t i) const noexcept { return {data_.data() + i * cols_, cols_}; }

    float& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
    float operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

    bool operator==(const Tensor2D&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

/// Row-major [heads x rows x cols] float tensor.
class Tensor3D {
public:
    Tensor3D() = default;
    Tensor3D(std::size_t heads, std::size_t rows, std::size_t cols)
        : heads_(heads), rows_(rows), cols_(cols), data_(heads * rows * cols, 0.0f) {}
    Tensor3D(std::size_t heads, std::size_t rows, std::size_t cols, std::vector<float> data)
        : heads_(heads), rows_(rows), cols_(cols), data_(std::move(data)) {
        require(data_.size() == heads_ * rows_ * cols_, ErrorCode::kShape, "tensor data length mismatch");
    }

    std::size_t heads() const noexcept { return heads_; }
    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }

    std::span<float> row(std::size_t h, std::size_t i) noexcept {
        return {data_.data() + (h * rows_ + i) * cols_, cols_};
    }
    std::span<const float> row(std::size_t h, std::size_t i) const noexcept {
        return {data_.data() + (h * rows_ + i) * cols_, cols_};
    }

    float& operator()(std::size_t h, std::size_t i, std::size_t j) noexcept {
        return data_[(h * rows_ + i) * cols_ + j];
    }
    float operator()(std::size_t h, std::size_t i, std::size_t j) const noexcept {
        return data_[(h * rows_ + i) * cols_ + j];
    }

    bool operator==(const Tensor3D&) const = default;

private:
    std::size_t heads_ = 0;
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

inline bool all_finite(std::span<const float> values) {
    for (float v : values) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

namespace detail {

// Selftest hook: when set, matmul perturbs its first output element.
inline std::atomic<bool>& kernel_fault() {
    static std::atomic<bool> flag{false};
    return flag;
}

struct SoftmaxAuditState {
    std::atomic<bool> enabled{false};
    std::atomic<std::uint64_t> rows{0};
    std::atomic<std::uint64_t> violations{0};
};

inline SoftmaxAuditState& softmax_audit_state() {
    static SoftmaxAuditState state;
    return state;
}

// Cephes-style exp for x <= 0: range reduction by ln2 and a degree-6
// polynomial, ~1e-7 relative error. Branch-free so softmax loops vectorize.
inline float exp_nonpositive(float x) {
    x = x < -87.0f ? -87.0f : x;
    float fx = x * 1.44269504088896341f + 12582912.0f;
    fx = fx - 12582912.0f;
    float r = x - fx * 0.693359375f;
    r = r - fx * -2.12194440e-4f;
    float y = 1.9875691500e-4f;
    y = y * r + 1.3981999507e-3f;
    y = y * r + 8.3334519073e-3f;
    y = y * r + 4.1665795894e-2f;
    y = y * r + 1.6666665459e-1f;
    y = y * r + 5.0000001201e-1f;
    y = y * r * r + r + 1.0f;
    const std::int32_t bits = (static_cast<std::int32_t>(fx) + 127) << 23;
    float scale;
    std::memcpy(&scale, &bits, sizeof(scale));
    return y * scale;
}

// Scales `row` by `scale`, then replaces it with its softmax in place.
// Fixed evaluation order: max and sum use 8 strided lanes combined pairwise.
inline void scaled_softmax_inplace(float* __restrict row, std::size_t n, float scale) {
    if (n == 0) {
        fail(ErrorCode::kDegenerateAttention, "softmax over an empty row");
    }
    constexpr std::size_t kLanes = 8;
    using f32x8 = float __attribute__((vector_size(32)));
    const float neg_inf = -std::numeric_limits<float>::infinity();
    f32x8 vmax = {neg_inf, neg_inf, neg_inf, neg_inf, neg_inf, neg_inf, neg_inf, neg_inf};
    std::size_t j = 0;
    for (; j + kLanes <= n; j += kLanes) {
        f32x8 z;
        std::memcpy(&z, row + j, sizeof(z));
        z = z * scale;
        std::memcpy(row + j, &z, sizeof(z));
        vmax = z > vmax ? z : vmax;
    }
    float lane_max[kLanes];
    std::memcpy(lane_max, &vmax, sizeof(lane_max));
    float max_value = lane_max[0];
    for (std::size_t l = 1; l < kLanes; ++l) {
        max_value = lane_max[l] > max_value ? lane_max[l] : max_value;
    }
    for (; j < n; ++j) {
        const float z = row[j] * scale;
        row[j] = z;
        max_value = z > max_value ? z : max_value;
    }
    for (std::size_t i = 0; i < n; ++i) {
        row[i] = exp_nonpositive(row[i] - max_value);
    }
    float lane_sum[kLanes] = {};
    j = 0;
    for (; j + kLanes <= n; j += kLanes) {
        for (std::size_t l = 0; l < kLanes; ++l) {
            lane_sum[l] += row[j + l];
        }
    }
    float sum = ((lane_sum[0] + lane_sum[1]) + (lane_sum[2] + lane_sum[3])) +
                ((lane_sum[4] + lane_sum[5]) + (lane_sum[6] + lane_sum[7]));
    for (; j < n; ++j) {
        sum += row[j];
    }
    for (std::size_t i = 0; i < n; ++i) {
        row[i] /= sum;
    }

    auto& audit = softmax_audit_state();
    if (audit.enabled.load(std::memory_order_relaxed)) {
        double total = 0.0;
        bool ok = true;
        for (std::size_t i = 0; i < n; ++i) {
            ok = ok && row[i] >= 0.0f && std::isfinite(row[i]);
            total += row[i];
        }
        audit.rows.fetch_add(1, std::memory_order_relaxed);
        if (!ok || std::fabs(total - 1.0) > 1e-5) {
            audit.violations.fetch_add(1, std::memory_order_relaxed);
        }
    }
}

}  // namespace detail

/// While alive, every softmax row computed anywhere in the library is checked
/// for nonnegativity and a sum within 1e-5 of one.
class SoftmaxAudit {
public:
    SoftmaxAudit() {
        auto& s = detail::softmax_audit_state();
        s.rows = 0;
        s.violations = 0;
        s.enabled = true;
    }
    ~SoftmaxAudit() { detail::softmax_audit_state().enabled = false; }
    SoftmaxAudit(const SoftmaxAudit&) = delete;
    SoftmaxAudit& operator=(const SoftmaxAudit&) = delete;

    std::uint64_t rows() const { return detail::softmax_audit_state().rows.load(); }
    std::uint64_t violations() const { return detail::softmax_audit_state().violations.load(); }
};

/// c[i][j] = sum_t a[i][t] * b[t][j], accumulated in ascending t.
inline Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
    require(a.cols() == b.rows(), ErrorCode::kShape,
            "matmul inner dimensions " + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()));
    Tensor2D c(a.rows(), b.cols());
    const std::size_t k = a.cols();
    const std::size_t n = b.cols();
    const float* bd = b.data().data();
    parallel_for(a.rows(), 16, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            float* __restrict out = c.row(i).data();
            const float* arow = a.row(i).data();
            for (std::size_t t = 0; t < k; ++t) {
                const float av = arow[t];
                const float* __restrict brow = bd + t * n;
                for (std::size_t j = 0; j < n; ++j) {
                    out[j] += av * brow[j];
                }
            }
        }
    });
    if (detail::kernel_fault().load(std::memory_order_relaxed) && c.size() > 0) {
        c.data()[0] += 1e-3f;
    }
    return c;
}

/// Softmax of each row with max subtraction.
inline Tensor2D row_softmax(const Tensor2D& x) {
    Tensor2D y = x;
    if (y.cols() == 0 && y.rows() > 0) {
        fail(ErrorCode::kDegenerateAttention, "softmax over an empty row");
    }
    for (std::size_t i = 0; i < y.rows(); ++i) {
        detail::scaled_softmax_inplace(y.row(i).data(), y.cols(), 1.0f);
    }
    return y;
}

inline void softmax_inplace(std::span<float> row) { detail::scaled_softmax_inplace(row.data(), row.size(), 1.0f); }

inline constexpr float kRmsNormEps = 1e-6f;

/// y_i = gain_i * x_i / sqrt(mean(x^2) + eps)
inline std::vector<float> rms_norm(std::span<const float> x, std::span<const float> gain, float eps = kRmsNormEps) {
    require(x.size() == gain.size(), ErrorCode::kShape, "rms_norm gain length mismatch");
    std::vector<float> y(x.size(), 0.0f);
    if (x.empty()) {
        return y;
    }
    float sum_sq = 0.0f;
    for (float v : x) {
        sum_sq += v * v;
    }
    const float denom = std::sqrt(sum_sq / static_cast<float>(x.size()) + eps);
    if (denom == 0.0f) {
        return y;
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = gain[i] * x[i] / denom;
    }
    return y;
}

inline Tensor2D rms_norm_rows(const Tensor2D& x, std::span<const float> gain, float eps = kRmsNormEps) {
    Tensor2D y(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto r = rms_norm(x.row(i), gain, eps);
        std::copy(r.begin(), r.end(), y.row(i).begin());
    }
    return y;
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

inline constexpr double kRopeBase = 10000.0;

/// Rotary transform tables for a fixed list of position ids. Dimension i of the
/// first half is paired with dimension i + dim/2 and rotated by
/// position * base^(-2i/dim).
class RotaryTable {
public:
    RotaryTable(std::span<const std::size_t> positions, std::size_t dim) : dim_(dim), rows_(positions.size()) {
        require(dim % 2 == 0, ErrorCode::kConfig, "rotary dimension must be even, got " + std::to_string(dim));
        const std::size_t half = dim / 2;
        cos_.resize(rows_ * half);
        sin_.resize(rows_ * half);
        for (std::size_t r = 0; r < rows_; ++r) {
            for (std::size_t i = 0; i < half; ++i) {
                const double inv_freq = std::pow(kRopeBase, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
                const double angle = static_cast<double>(positions[r]) * inv_freq;
                cos_[r * half + i] = static_cast<float>(std::cos(angle));
                sin_[r * half + i] = static_cast<float>(std::sin(angle));
            }
        }
    }

    std::size_t dim() const noexcept { return dim_; }
    std::size_t rows() const noexcept { return rows_; }

    /// Rotates every head of `x` in place; `inverse` applies the negative angle.
    void apply(Tensor3D& x, bool inverse = false) const {
        require(x.cols() == dim_ && x.rows() == rows_, ErrorCode::kShape, "rotary table does not match tensor");
        const std::size_t half = dim_ / 2;
        const float sign = inverse ? -1.0f : 1.0f;
        for (std::size_t h = 0; h < x.heads(); ++h) {
            for (std::size_t r = 0; r < rows_; ++r) {
                auto row = x.row(h, r);
                const float* c = cos_.data() + r * half;
                const float* s = sin_.data() + r * half;
                for (std::size_t i = 0; i < half; ++i) {
                    const float a = row[i];
                    const float b = row[i + half];
                    const float si = sign * s[i];
                    row[i] = a * c[i] - b * si;
                    row[i + half] = a * si + b * c[i];
                }
            }
        }
    }

private:
    std::size_t dim_;
    std::size_t rows_;
    std::vector<float> cos_;
    std::vector<float> sin_;
};

inline Tensor3D rope(Tensor3D x, std::span<const std::size_t> position_ids, bool inverse = false) {
    require(x.cols() % 2 == 0, ErrorCode::kConfig, "rotary dimension must be even");
    require(position_ids.size() == x.rows(), ErrorCode::kShape, "one position id per row required");
    RotaryTable(position_ids, x.cols()).apply(x, inverse);
    return x;
}

/// [n x heads*d] -> [heads x n x d]
inline Tensor3D split_heads(const Tensor2D& x, std::size_t heads) {
    require(heads > 0 && x.cols() % heads == 0, ErrorCode::kShape, "hidden size not divisible by heads");
    const std::size_t d = x.cols() / heads;
    Tensor3D y(heads, x.rows(), d);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto src = x.row(i);
        for (std::size_t h = 0; h < heads; ++h) {
            std::copy_n(src.begin() + h * d, d, y.row(h, i).begin());
        }
    }
    return y;
}

/// [heads x n x d] -> [n x heads*d]
inline Tensor2D merge_heads(const Tensor3D& x) {
    Tensor2D y(x.rows(), x.heads() * x.cols());
    for (std::size_t h = 0; h < x.heads(); ++h) {
        for (std::size_t i = 0; i < x.rows(); ++i) {
            std::copy_n(x.row(h, i).begin(), x.cols(), y.row(i).begin() + h * x.cols());
        }
    }
    return y;
}

/// Receives (head, query row, probabilities over the key rows) for every
/// attention row. Invoked sequentially.
using AttentionProbe = std::function<void(std::size_t, std::size_t, std::span<const float>)>;

namespace detail {

using f32x16 = float __attribute__((vector_size(64)));

inline f32x16 load16(const float* p) {
    f32x16 v;
    std::memcpy(&v, p, sizeof(v));
    return v;
}

inline void store16(float* p, f32x16 v) { std::memcpy(p, &v, sizeof(v)); }

// Four query rows of one head against all keys. kh is the head's transposed
// keys [d x m]; d must be a multiple of 16. Rows past `rows` repeat the last row
// and are discarded.
inline void attention_rows4(const float* const* qr, std::size_t rows, const float* kh, const float* vbase,
                            std::size_t m, std::size_t d, float scale, float* scores, float* const* out,
                            const std::function<void(std::size_t, std::span<const float>)>& probe) {
    constexpr std::size_t R = 4;
    float* s[R];
    for (std::size_t r = 0; r < R; ++r) {
        s[r] = scores + r * m;
    }
    std::size_t j = 0;
    for (; j + 32 <= m; j += 32) {
        f32x16 c[R][2] = {};
        for (std::size_t t = 0; t < d; ++t) {
            const f32x16 k0 = load16(kh + t * m + j);
            const f32x16 k1 = load16(kh + t * m + j + 16);
            for (std::size_t r = 0; r < R; ++r) {
                const float a = qr[r][t];
                c[r][0] += a * k0;
                c[r][1] += a * k1;
            }
        }
        for (std::size_t r = 0; r < R; ++r) {
            store16(s[r] + j, c[r][0]);
            store16(s[r] + j + 16, c[r][1]);
        }
    }
    for (; j < m; ++j) {
        float c[R] = {};
        for (std::size_t t = 0; t < d; ++t) {
            const float kv = kh[t * m + j];
            for (std::size_t r = 0; r < R; ++r) {
                c[r] += qr[r][t] * kv;
            }
        }
        for (std::size_t r = 0; r < R; ++r) {
            s[r][j] = c[r];
        }
    }
    for (std::size_t r = 0; r < rows; ++r) {
        scaled_softmax_inplace(s[r], m, scale);
        if (probe) {
            probe(r, std::span<const float>(s[r], m));
        }
    }
    for (std::size_t c0 = 0; c0 < d; c0 += 16) {
        f32x16 acc[R][4] = {};
        std::size_t jj = 0;
        for (; jj + 4 <= m; jj += 4) {
            for (std::size_t u = 0; u < 4; ++u) {
                const f32x16 vr = load16(vbase + (jj + u) * d + c0);
                for (std::size_t r = 0; r < R; ++r) {
                    acc[r][u] += s[r][jj + u] * vr;
                }
            }
        }
        for (; jj < m; ++jj) {
            const f32x16 vr = load16(vbase + jj * d + c0);
            for (std::size_t r = 0; r < R; ++r) {
                acc[r][0] += s[r][jj] * vr;
            }
        }
        for (std::size_t r = 0; r < rows; ++r) {
            store16(out[r] + c0, (acc[r][0] + acc[r][1]) + (acc[r][2] + acc[r][3]));
        }
    }
}

}  // namespace detail

/// Softmax(q k^T / sqrt(d)) v per head. q: [H x n x d], k/v: [H x m x d].
///
/// Scores accumulate over the head dimension in ascending order; the value
/// reduction uses four interleaved partial sums over keys combined pairwise.
/// Each output row depends only on its own query row and the key/value rows,
/// so any split of rows across threads yields identical results.
inline Tensor3D attention(const Tensor3D& q, const Tensor3D& k, const Tensor3D& v,
                          const AttentionProbe* probe = nullptr) {
    require(q.heads() == k.heads() && k.heads() == v.heads(), ErrorCode::kShape, "attention head count mismatch");
    require(q.cols() == k.cols() && k.cols() == v.cols(), ErrorCode::kShape, "attention head dim mismatch");
    require(k.rows() == v.rows(), ErrorCode::kShape, "attention key/value count mismatch");
    if (k.rows() == 0) {
        fail(ErrorCode::kDegenerateAttention, "empty key/value context");
    }
    const std::size_t heads = q.heads();
    const std::size_t n = q.rows();
    const std::size_t m = k.rows();
    const std::size_t d = q.cols();
    const float scale = 1.0f / std::sqrt(static_cast<float>(d));

    // keys transposed per head: [H x d x m]
    std::vector<float> kt(heads * d * m);
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t j = 0; j < m; ++j) {
            const auto krow = k.row(h, j);
            for (std::size_t t = 0; t < d; ++t) {
                kt[(h * d + t) * m + j] = krow[t];
            }
        }
    }

    Tensor3D out(heads, n, d);
    if (d % 16 == 0 && n > 0) {
        constexpr std::size_t R = 4;
        const std::size_t groups = (n + R - 1) / R;
        auto run4 = [&](std::size_t begin, std::size_t end) {
            std::vector<float> scores(R * m);
            for (std::size_t item = begin; item < end; ++item) {
                const std::size_t h = item / groups;
                const std::size_t i0 = (item % groups) * R;
                const std::size_t rows = std::min(R, n - i0);
                const float* qr[R];
                float* orow[R];
                for (std::size_t r = 0; r < R; ++r) {
                    qr[r] = q.row(h, i0 + std::min(r, rows - 1)).data();
                    orow[r] = out.row(h, i0 + std::min(r, rows - 1)).data();
                }
                std::function<void(std::size_t, std::span<const float>)> row_probe;
                if (probe != nullptr) {
                    row_probe = [&](std::size_t r, std::span<const float> p) { (*probe)(h, i0 + r, p); };
                }
                detail::attention_rows4(qr, rows, kt.data() + h * d * m, v.row(h, 0).data(), m, d, scale,
                                        scores.data(), orow, row_probe);
            }
        };
        if (probe != nullptr) {
            run4(0, heads * groups);
        } else {
            parallel_for(heads * groups, 2, run4);
        }
        return out;
    }

    auto run = [&](std::size_t begin, std::size_t end) {
        std::vector<float> scores(m);
        std::vector<float> partial(4 * d);
        for (std::size_t item = begin; item < end; ++item) {
            const std::size_t h = item / n;
            const std::size_t i = item % n;
            float* __restrict s = scores.data();
            std::fill(scores.begin(), scores.end(), 0.0f);
            const auto qrow = q.row(h, i);
            for (std::size_t t = 0; t < d; ++t) {
                const float a = qrow[t];
                const float* __restrict krow = kt.data() + (h * d + t) * m;
                for (std::size_t j = 0; j < m; ++j) {
                    s[j] += a * krow[j];
                }
            }
            detail::scaled_softmax_inplace(s, m, scale);
            if (probe != nullptr) {
                (*probe)(h, i, std::span<const float>(scores));
            }
            std::fill(partial.begin(), partial.end(), 0.0f);
            float* __restrict acc = partial.data();
            const float* vbase = v.row(h, 0).data();
            std::size_t j = 0;
            for (; j + 4 <= m; j += 4) {
                for (std::size_t u = 0; u < 4; ++u) {
                    const float p = s[j + u];
                    const float* __restrict vrow = vbase + (j + u) * d;
                    float* __restrict a = acc + u * d;
                    for (std::size_t t = 0; t < d; ++t) {
                        a[t] += p * vrow[t];
                    }
                }
            }
            for (; j < m; ++j) {
                const float p = s[j];
                const float* __restrict vrow = vbase + j * d;
                for (std::size_t t = 0; t < d; ++t) {
                    acc[t] += p * vrow[t];
                }
            }
            auto orow = out.row(h, i);
            for (std::size_t t = 0; t < d; ++t) {
                orow[t] = (acc[t] + acc[d + t]) + (acc[2 * d + t] + acc[3 * d + t]);
            }
        }
    };
    if (probe != nullptr) {
        run(0, heads * n);
    } else {
        parallel_for(heads * n, 8, run);
    }
    return out;
}

}  // namespace dlm
