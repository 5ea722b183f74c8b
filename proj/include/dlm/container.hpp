// Copyright 2026 The dlmsparse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Tensor container file ("FDTC"), little-endian, no padding:
//   magic "FDTC" | version u32 | tensor count u32
//   per tensor: name length u16 | name bytes | rank u8 | dims u64 x rank | f32 x prod(dims)

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "dlm/error.hpp"

namespace dlm {

inline constexpr char kContainerMagic[4] = {'F', 'D', 'T', 'C'};
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::uint8_t kContainerMaxRank = 8;

struct NamedTensor {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<float> data;

    bool operator==(const NamedTensor&) const = default;
};

namespace detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { bytes_.push_back(v); }
    void u16(std::uint16_t v) { put(v, 2); }
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        u32(bits);
    }
    void raw(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        bytes_.insert(bytes_.end(), p, p + n);
    }
    std::vector<std::uint8_t> take() { return std::move(bytes_); }

private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) {
            bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
        }
    }
    std::vector<std::uint8_t> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

    std::uint64_t uint(int n, const char* what) {
        need(static_cast<std::size_t>(n), what);
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) {
            v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    std::span<const std::uint8_t> take(std::size_t n, const char* what) {
        need(n, what);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

private:
    void need(std::size_t n, const char* what) const {
        if (remaining() < n) {
            fail(ErrorCode::kTruncated, std::string("file ends inside ") + what);
        }
    }
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_container(std::span<const NamedTensor> tensors) {
    detail::ByteWriter w;
    w.raw(kContainerMagic, 4);
    w.u32(kContainerVersion);
    require(tensors.size() <= std::numeric_limits<std::uint32_t>::max(), ErrorCode::kShape, "too many tensors");
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        require(t.name.size() <= std::numeric_limits<std::uint16_t>::max(), ErrorCode::kShape, "tensor name too long");
        require(t.dims.size() <= kContainerMaxRank, ErrorCode::kShape, "tensor rank too large: " + t.name);
        std::uint64_t count = 1;
        for (auto d : t.dims) {
            count *= d;
        }
        require(count == t.data.size(), ErrorCode::kShape, "dims do not match data for " + t.name);
        w.u16(static_cast<std::uint16_t>(t.name.size()));
        w.raw(t.name.data(), t.name.size());
        w.u8(static_cast<std::uint8_t>(t.dims.size()));
        for (auto d : t.dims) {
            w.u64(d);
        }
        for (float v : t.data) {
            w.f32(v);
        }
    }
    return w.take();
}

/// Parses a container image. Never reads past the buffer and never allocates
/// more than the buffer can back; every malformed input raises a typed Error.
inline std::vector<NamedTensor> decode_container(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes);
    const auto magic = r.take(4, "magic");
    if (std::memcmp(magic.data(), kContainerMagic, 4) != 0) {
        fail(ErrorCode::kBadMagic, "expected FDTC magic");
    }
    const auto version = r.uint(4, "version");
    if (version != kContainerVersion) {
        fail(ErrorCode::kBadVersion, "unsupported container version " + std::to_string(version));
    }
    const auto count = r.uint(4, "tensor count");
    std::vector<NamedTensor> out;
    std::set<std::string> seen;
    for (std::uint64_t i = 0; i < count; ++i) {
        NamedTensor t;
        const auto name_len = r.uint(2, "tensor name length");
        const auto name = r.take(static_cast<std::size_t>(name_len), "tensor name");
        t.name.assign(name.begin(), name.end());
        if (!seen.insert(t.name).second) {
            fail(ErrorCode::kMalformed, "duplicate tensor name '" + t.name + "'");
        }
        const auto rank = r.uint(1, "tensor rank");
        if (rank > kContainerMaxRank) {
            fail(ErrorCode::kMalformed, "tensor rank " + std::to_string(rank) + " exceeds limit");
        }
        std::uint64_t elements = 1;
        for (std::uint64_t k = 0; k < rank; ++k) {
            const auto d = r.uint(8, "tensor dims");
            if (d != 0 && elements > std::numeric_limits<std::uint64_t>::max() / d) {
                fail(ErrorCode::kMalformed, "element count overflows for '" + t.name + "'");
            }
            elements *= d;
            t.dims.push_back(d);
        }
        if (elements > r.remaining() / 4) {
            fail(ErrorCode::kTruncated, "tensor '" + t.name + "' data exceeds file size");
        }
        const auto raw = r.take(static_cast<std::size_t>(elements) * 4, "tensor data");
        t.data.resize(static_cast<std::size_t>(elements));
        for (std::size_t e = 0; e < t.data.size(); ++e) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) {
                bits |= static_cast<std::uint32_t>(raw[e * 4 + b]) << (8 * b);
            }
            std::memcpy(&t.data[e], &bits, sizeof(float));
        }
        out.push_back(std::move(t));
    }
    if (r.remaining() != 0) {
        fail(ErrorCode::kMalformed, std::to_string(r.remaining()) + " trailing bytes after last tensor");
    }
    return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorCode::kIo, "cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail(ErrorCode::kIo, "cannot write " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        fail(ErrorCode::kIo, "short write to " + path.string());
    }
}

inline void write_container(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
    const auto bytes = encode_container(tensors);
    write_file_bytes(path, bytes);
}

inline std::vector<NamedTensor> read_container(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return decode_container(bytes);
}

}  // namespace dlm
