// Copyright 2026 The dlmsparse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dlm/decoder.hpp"
#include "dlm/error.hpp"
#include "dlm/focus_attention.hpp"
#include "dlm/model.hpp"

namespace dlm {

/// Everything needed to reproduce a run. Defaults: rho 4, window 8, 6 dense
/// layers, alpha 0.5, 1% sinks, 64-token prompt blocks, 32-token decode blocks.
struct RunConfig {
    ModelConfig model;
    DecodeOptions decode;
    std::uint64_t seed = 0;
    std::string model_path;   // empty: seeded random weights
    std::string prompt_file;  // empty: seeded synthetic prompt
    std::size_t prompt_len = 512;
    std::string out_dir = "out";
    bool timing = false;  // per-step nanoseconds in traces; off keeps traces byte-reproducible
    std::vector<std::size_t> bench_lengths = {1024, 2048, 4096};
    std::size_t bench_repeats = 1;  // runs per bench cell; the fastest is reported

    void set(std::string_view key, std::string_view value);
    void validate() const;
    /// `key = value` lines for every setting, in a fixed order.
    std::string to_text() const;
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

inline std::uint64_t parse_uint(std::string_view key, std::string_view v) {
    std::uint64_t out = 0;
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end || v.empty()) {
        fail(ErrorCode::kConfig, std::string(key) + ": expected a non-negative integer, got '" + std::string(v) + "'");
    }
    return out;
}

inline double parse_real(std::string_view key, std::string_view v) {
    const std::string s(v);
    try {
        std::size_t used = 0;
        const double d = std::stod(s, &used);
        if (used == s.size()) {
            return d;
        }
    } catch (const std::exception&) {
    }
    fail(ErrorCode::kConfig, std::string(key) + ": expected a number, got '" + s + "'");
}

inline bool parse_bool(std::string_view key, std::string_view v) {
    if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "off" || v == "no") return false;
    fail(ErrorCode::kConfig, std::string(key) + ": expected true/false, got '" + std::string(v) + "'");
}

inline std::string fmt_real(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace detail

inline void RunConfig::set(std::string_view raw_key, std::string_view raw_value) {
    std::string key = detail::trim(raw_key);
    for (auto& c : key) {
        if (c == '-') c = '_';
    }
    const std::string v = detail::trim(raw_value);
    auto& f = decode.focus;
    if (key == "mode") decode.mode = parse_mode(v);
    else if (key == "rho") f.rho = detail::parse_real(key, v);
    else if (key == "window") f.window = detail::parse_uint(key, v);
    else if (key == "dense_layers") f.dense_layers = detail::parse_uint(key, v);
    else if (key == "trailing_dense_layers") f.trailing_dense_layers = detail::parse_uint(key, v);
    else if (key == "alpha") f.alpha = detail::parse_real(key, v);
    else if (key == "sink_frac") f.sink_fraction = detail::parse_real(key, v);
    else if (key == "prompt_block_size") f.prompt_block_size = detail::parse_uint(key, v);
    else if (key == "query_agg") {
        if (v == "mean") f.query_aggregation = QueryAggregation::kMean;
        else if (v == "sum-softmax") f.query_aggregation = QueryAggregation::kSumSoftmax;
        else fail(ErrorCode::kConfig, "query_agg: expected mean or sum-softmax, got '" + v + "'");
    } else if (key == "window_clamp") {
        if (v == "block") f.window_clamp = WindowClamp::kBlock;
        else if (v == "response") f.window_clamp = WindowClamp::kResponse;
        else fail(ErrorCode::kConfig, "window_clamp: expected block or response, got '" + v + "'");
    } else if (key == "sink_recompute") f.sink_recompute = detail::parse_bool(key, v);
    else if (key == "strict_alg1") decode.strict_alg1 = detail::parse_bool(key, v);
    else if (key == "block_len") decode.block_len = detail::parse_uint(key, v);
    else if (key == "steps") decode.steps = detail::parse_uint(key, v);
    else if (key == "gen_len") decode.gen_len = detail::parse_uint(key, v);
    else if (key == "seed") seed = detail::parse_uint(key, v);
    else if (key == "model") model_path = v;
    else if (key == "prompt_file") prompt_file = v;
    else if (key == "prompt_len") prompt_len = detail::parse_uint(key, v);
    else if (key == "out_dir") out_dir = v;
    else if (key == "timing") timing = detail::parse_bool(key, v);
    else if (key == "num_layers") model.num_layers = detail::parse_uint(key, v);
    else if (key == "num_heads") model.num_heads = detail::parse_uint(key, v);
    else if (key == "head_dim") model.head_dim = detail::parse_uint(key, v);
    else if (key == "mlp_dim") model.mlp_dim = detail::parse_uint(key, v);
    else if (key == "vocab_size") model.vocab_size = detail::parse_uint(key, v);
    else if (key == "mask_token_id") model.mask_token_id = static_cast<TokenId>(detail::parse_uint(key, v));
    else if (key == "max_positions") model.max_positions = detail::parse_uint(key, v);
    else if (key == "lengths") {
        bench_lengths.clear();
        std::stringstream ss(v);
        std::string item;
        while (std::getline(ss, item, ',')) {
            bench_lengths.push_back(detail::parse_uint(key, detail::trim(item)));
        }
    } else if (key == "repeats") bench_repeats = detail::parse_uint(key, v);
    else {
        fail(ErrorCode::kConfig, "unknown setting '" + key + "'");
    }
}

inline void RunConfig::validate() const {
    model.validate();
    decode.focus.validate(model.num_layers);
    build_schedule(decode.gen_len, decode.steps, decode.block_len);
    require(!prompt_file.empty() || prompt_len >= 1, ErrorCode::kConfig, "prompt_len: must be >= 1");
    if (prompt_file.empty()) {
        require(prompt_len + decode.gen_len <= model.max_positions, ErrorCode::kConfig,
                "prompt_len: prompt_len + gen_len exceeds max_positions");
    }
    require(!out_dir.empty(), ErrorCode::kConfig, "out_dir: must not be empty");
    require(bench_repeats >= 1, ErrorCode::kConfig, "repeats: must be >= 1");
    for (auto len : bench_lengths) {
        require(len >= 1 && len + decode.gen_len <= model.max_positions, ErrorCode::kConfig,
                "lengths: " + std::to_string(len) + " + gen_len exceeds max_positions");
    }
}

inline std::string RunConfig::to_text() const {
    const auto& f = decode.focus;
    std::ostringstream os;
    os << "mode = " << to_string(decode.mode) << '\n'
       << "rho = " << detail::fmt_real(f.rho) << '\n'
       << "window = " << f.window << '\n'
       << "dense_layers = " << f.dense_layers << '\n'
       << "trailing_dense_layers = " << f.trailing_dense_layers << '\n'
       << "alpha = " << detail::fmt_real(f.alpha) << '\n'
       << "sink_frac = " << detail::fmt_real(f.sink_fraction) << '\n'
       << "prompt_block_size = " << f.prompt_block_size << '\n'
       << "query_agg = " << (f.query_aggregation == QueryAggregation::kMean ? "mean" : "sum-softmax") << '\n'
       << "window_clamp = " << (f.window_clamp == WindowClamp::kBlock ? "block" : "response") << '\n'
       << "sink_recompute = " << (f.sink_recompute ? "true" : "false") << '\n'
       << "strict_alg1 = " << (decode.strict_alg1 ? "true" : "false") << '\n'
       << "block_len = " << decode.block_len << '\n'
       << "steps = " << decode.steps << '\n'
       << "gen_len = " << decode.gen_len << '\n'
       << "seed = " << seed << '\n'
       << "model = " << model_path << '\n'
       << "prompt_file = " << prompt_file << '\n'
       << "prompt_len = " << prompt_len << '\n'
       << "timing = " << (timing ? "true" : "false") << '\n'
       << "num_layers = " << model.num_layers << '\n'
       << "num_heads = " << model.num_heads << '\n'
       << "head_dim = " << model.head_dim << '\n'
       << "mlp_dim = " << model.mlp_dim << '\n'
       << "vocab_size = " << model.vocab_size << '\n'
       << "mask_token_id = " << model.mask_token_id << '\n'
       << "max_positions = " << model.max_positions << '\n';
    os << "lengths = ";
    for (std::size_t i = 0; i < bench_lengths.size(); ++i) {
        os << (i ? "," : "") << bench_lengths[i];
    }
    os << '\n' << "repeats = " << bench_repeats << '\n';
    return os.str();
}

/// Applies `key = value` lines; `#` starts a comment.
inline void apply_config_text(RunConfig& config, std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        if (detail::trim(line).empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            fail(ErrorCode::kConfig, "config line " + std::to_string(lineno) + ": expected key = value");
        }
        config.set(line.substr(0, eq), line.substr(eq + 1));
    }
}

inline void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorCode::kIo, "cannot open config " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    apply_config_text(config, ss.str());
}

/// Uniform tokens over the vocabulary with the mask id excluded.
inline std::vector<TokenId> synthetic_prompt(std::size_t length, const ModelConfig& model, std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ull);
    std::vector<TokenId> out(length);
    const auto span = static_cast<std::uint64_t>(model.vocab_size - 1);
    for (auto& t : out) {
        auto v = static_cast<TokenId>(rng() % span);
        if (v >= model.mask_token_id) {
            ++v;
        }
        t = v;
    }
    return out;
}

/// One integer per line; blank lines and `#` comments ignored.
inline std::vector<TokenId> read_prompt_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorCode::kIo, "cannot open prompt file " + path.string());
    }
    std::vector<TokenId> out;
    std::string line;
    while (std::getline(in, line)) {
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        const auto t = detail::trim(line);
        if (t.empty()) {
            continue;
        }
        out.push_back(static_cast<TokenId>(detail::parse_uint("prompt_file", t)));
    }
    return out;
}

}  // namespace dlm
