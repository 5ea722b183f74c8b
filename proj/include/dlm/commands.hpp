// Copyright 2026 The dlmsparse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Run drivers behind the command-line tool: generate, bench, analyze, selftest.

#include <openssl/evp.h>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dlm/analysis.hpp"
#include "dlm/container.hpp"
#include "dlm/decoder.hpp"
#include "dlm/model.hpp"
#include "dlm/run_config.hpp"
#include "dlm/trace_io.hpp"

namespace dlm {

/// Git blob object id: SHA-1 of "blob <size>\0" followed by the content.
inline std::string git_blob_hash(std::span<const std::uint8_t> content) {
    const std::string header = "blob " + std::to_string(content.size()) + '\0';
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    require(ctx != nullptr, ErrorCode::kIo, "cannot allocate digest context");
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                    EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                    EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                    EVP_DigestFinal_ex(ctx, md, &len) == 1;
    EVP_MD_CTX_free(ctx);
    require(ok, ErrorCode::kIo, "sha1 digest failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) {
        os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    }
    return os.str();
}

struct RunInputs {
    ModelWeights weights;
    std::vector<TokenId> prompt;
    std::string weights_hash;
};

inline RunInputs prepare_inputs(const RunConfig& config) {
    config.validate();
    RunInputs in;
    ModelConfig mc = config.model;
    mc.seed = config.seed;
    in.weights = config.model_path.empty() ? init_random(mc) : load_weights(config.model_path, mc);
    in.weights_hash = git_blob_hash(encode_container(to_named_tensors(in.weights)));
    in.prompt = config.prompt_file.empty() ? synthetic_prompt(config.prompt_len, mc, config.seed)
                                           : read_prompt_file(config.prompt_file);
    return in;
}

inline DecodeOptions decode_options(const RunConfig& config) {
    DecodeOptions o = config.decode;
    o.record_timing = config.timing;
    return o;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail(ErrorCode::kIo, "cannot write " + path.string());
    }
    out << text;
}

inline std::string manifest_text(const RunConfig& config, const RunInputs& in) {
    std::vector<std::uint8_t> prompt_bytes;
    for (auto t : in.prompt) {
        for (int b = 0; b < 4; ++b) {
            prompt_bytes.push_back(static_cast<std::uint8_t>(static_cast<std::uint32_t>(t) >> (8 * b)));
        }
    }
    std::ostringstream os;
    os << config.to_text();
    os << "resolved_prompt_len = " << in.prompt.size() << '\n';
    os << "weights_sha1 = " << in.weights_hash << '\n';
    os << "prompt_sha1 = " << git_blob_hash(prompt_bytes) << '\n';
    return os.str();
}

struct GenerateOutput {
    DecodeResult result;
    std::filesystem::path tokens_path;
    std::filesystem::path trace_csv_path;
    std::filesystem::path trace_json_path;
    std::filesystem::path manifest_path;
};

/// Decodes once and writes tokens.txt, trace.csv, trace.json and manifest.txt.
inline GenerateOutput run_generate(const RunConfig& config) {
    const RunInputs in = prepare_inputs(config);
    const std::filesystem::path dir(config.out_dir);
    std::filesystem::create_directories(dir);

    GenerateOutput out;
    out.result = decode(in.weights, in.prompt, decode_options(config));
    out.tokens_path = dir / "tokens.txt";
    out.trace_csv_path = dir / "trace.csv";
    out.trace_json_path = dir / "trace.json";
    out.manifest_path = dir / "manifest.txt";

    std::ostringstream tokens;
    for (auto t : out.result.tokens) {
        tokens << t << '\n';
    }
    write_text(out.tokens_path, tokens.str());
    std::ostringstream csv;
    write_trace_csv(csv, out.result.trace);
    write_text(out.trace_csv_path, csv.str());
    write_trace_json(out.trace_json_path, out.result.trace);
    write_text(out.manifest_path, manifest_text(config, in));
    return out;
}

struct BenchRow {
    std::size_t context_len = 0;
    DecodeMode mode = DecodeMode::kVanilla;
    std::size_t gen_len = 0;
    std::size_t steps = 0;
    std::uint64_t nanos = 0;
    double tokens_per_sec = 0.0;
    double mean_attended_kv = 0.0;  // per layer, averaged over steps
    double speedup = 0.0;           // vanilla nanos / this row's nanos
};

inline void write_bench_csv(std::ostream& out, std::span<const BenchRow> rows) {
    out << "context_len,mode,gen_len,steps,nanos,tokens_per_sec,mean_attended_kv,speedup\n";
    out.precision(10);
    for (const auto& r : rows) {
        out << r.context_len << ',' << to_string(r.mode) << ',' << r.gen_len << ',' << r.steps << ',' << r.nanos << ','
            << r.tokens_per_sec << ',' << r.mean_attended_kv << ',' << r.speedup << '\n';
    }
}

/// Times a decode per (prompt length, mode) on synthetic prompts and writes bench.csv.
inline std::vector<BenchRow> run_bench(const RunConfig& config,
                                       std::span<const DecodeMode> modes = std::span<const DecodeMode>()) {
    static constexpr DecodeMode kAll[] = {DecodeMode::kVanilla, DecodeMode::kCache, DecodeMode::kFocus};
    if (modes.empty()) {
        modes = kAll;
    }
    RunConfig base = config;
    base.prompt_file.clear();
    base.validate();
    ModelConfig mc = base.model;
    mc.seed = base.seed;
    const ModelWeights weights = base.model_path.empty() ? init_random(mc) : load_weights(base.model_path, mc);

    std::vector<BenchRow> rows;
    for (auto len : base.bench_lengths) {
        const auto prompt = synthetic_prompt(len, mc, base.seed);
        const std::size_t first_row = rows.size();
        // repeats cycle through all modes before the next round
        for (std::size_t rep = 0; rep < base.bench_repeats; ++rep) {
            for (std::size_t m = 0; m < modes.size(); ++m) {
                DecodeOptions opts = decode_options(base);
                opts.mode = modes[m];
                const auto t0 = std::chrono::steady_clock::now();
                const DecodeResult res = decode(weights, prompt, opts);
                const auto t1 = std::chrono::steady_clock::now();
                const auto nanos =
                    static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
                if (rep > 0) {
                    rows[first_row + m].nanos = std::min(rows[first_row + m].nanos, nanos);
                    continue;
                }
                BenchRow row;
                row.context_len = len;
                row.mode = modes[m];
                row.gen_len = opts.gen_len;
                row.steps = opts.steps;
                row.nanos = nanos;
                double kv = 0.0;
                for (const auto& tr : res.trace) {
                    kv += static_cast<double>(tr.attended_kv_total) / static_cast<double>(mc.num_layers);
                }
                row.mean_attended_kv = kv / static_cast<double>(res.trace.size());
                rows.push_back(row);
            }
        }
        std::optional<std::uint64_t> vanilla_nanos;
        for (std::size_t i = first_row; i < rows.size(); ++i) {
            if (rows[i].mode == DecodeMode::kVanilla) {
                vanilla_nanos = rows[i].nanos;
            }
        }
        for (std::size_t i = first_row; i < rows.size(); ++i) {
            auto& row = rows[i];
            row.tokens_per_sec = static_cast<double>(row.gen_len) / (static_cast<double>(row.nanos) * 1e-9);
            row.speedup = vanilla_nanos ? static_cast<double>(*vanilla_nanos) / static_cast<double>(row.nanos) : 0.0;
        }
    }
    const std::filesystem::path dir(base.out_dir);
    std::filesystem::create_directories(dir);
    std::ostringstream csv;
    write_bench_csv(csv, rows);
    write_text(dir / "bench.csv", csv.str());
    return rows;
}

struct AnalyzeOutput {
    std::vector<CorrelationPoint> correlation;
    std::vector<RecallPoint> recall;
    std::vector<OverlapEntry> overlap;
    std::vector<DivergencePoint> divergence;
};

/// Writes confidence_corr.csv, pcgi_recall.csv, sink_overlap.csv and divergence.csv.
/// Correlation and recall come from `trace_path` when given, otherwise from a
/// fresh focus-mode decode of the configured run.
inline AnalyzeOutput run_analyze(const RunConfig& config, const std::optional<std::filesystem::path>& trace_path) {
    const RunInputs in = prepare_inputs(config);
    DecodeOptions opts = decode_options(config);
    opts.mode = DecodeMode::kFocus;

    AnalyzeOutput out;
    std::vector<StepTrace> trace;
    if (trace_path) {
        trace = read_trace_json(*trace_path);
    } else {
        trace = decode(in.weights, in.prompt, opts).trace;
    }
    out.correlation = confidence_correlation(std::span<const StepTrace>(trace));
    out.recall = pcgi_recall(trace);

    DecodeOptions probe_opts = opts;
    probe_opts.capture_layer_scores = true;
    probe_opts.focus.sink_recompute = true;
    const auto probe_trace = decode(in.weights, in.prompt, probe_opts).trace;
    const std::size_t n_sink = std::max<std::size_t>(1, sink_count(opts.focus.sink_fraction, in.prompt.size()));
    out.overlap = mean_sink_overlap(probe_trace, n_sink);
    out.divergence = divergence_vs_oracle(in.weights, opts, in.prompt);

    const std::filesystem::path dir(config.out_dir);
    std::filesystem::create_directories(dir);
    std::ostringstream a, b, c, d;
    write_correlation_csv(a, out.correlation);
    write_recall_csv(b, out.recall);
    write_overlap_csv(c, out.overlap);
    write_divergence_csv(d, out.divergence);
    write_text(dir / "confidence_corr.csv", a.str());
    write_text(dir / "pcgi_recall.csv", b.str());
    write_text(dir / "sink_overlap.csv", c.str());
    write_text(dir / "divergence.csv", d.str());
    return out;
}

/// Quick invariant sweep over the kernels, cache and decoder on a tiny model.
/// Returns the number of failed checks.
inline int run_selftest(std::ostream& log, bool inject_fault = false) {
    struct FaultGuard {
        explicit FaultGuard(bool on) { detail::kernel_fault() = on; }
        ~FaultGuard() { detail::kernel_fault() = false; }
    } guard(inject_fault);

    int failures = 0;
    auto check = [&](const char* name, auto&& fn) {
        bool ok = false;
        try {
            ok = fn();
        } catch (const std::exception& e) {
            log << "  error: " << e.what() << '\n';
        }
        log << (ok ? "[PASS] " : "[FAIL] ") << name << '\n';
        failures += ok ? 0 : 1;
    };
    std::mt19937_64 rng(1234);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    auto random = [&](std::size_t r, std::size_t c) {
        Tensor2D t(r, c);
        for (float& v : t.data()) v = dist(rng);
        return t;
    };

    check("matmul matches triple-loop reference", [&] {
        const Tensor2D a = random(8, 8);
        const Tensor2D b = random(8, 8);
        const Tensor2D c = matmul(a, b);
        for (std::size_t i = 0; i < 8; ++i) {
            for (std::size_t j = 0; j < 8; ++j) {
                float s = 0.0f;
                for (std::size_t t = 0; t < 8; ++t) s += a(i, t) * b(t, j);
                if (s != c(i, j)) return false;
            }
        }
        return true;
    });
    check("softmax rows sum to one", [&] {
        const Tensor2D p = row_softmax(random(16, 37));
        for (std::size_t i = 0; i < p.rows(); ++i) {
            double s = 0.0;
            for (float v : p.row(i)) s += v;
            if (std::fabs(s - 1.0) > 1e-5) return false;
        }
        return true;
    });
    check("rotary transform preserves pair norms", [&] {
        Tensor3D x(2, 3, 8);
        for (float& v : x.data()) v = dist(rng);
        const std::vector<std::size_t> pos = {0, 17, 4095};
        const Tensor3D y = rope(x, pos);
        for (std::size_t h = 0; h < 2; ++h)
            for (std::size_t r = 0; r < 3; ++r)
                for (std::size_t i = 0; i < 4; ++i) {
                    const float a = std::hypot(x(h, r, i), x(h, r, i + 4));
                    const float b = std::hypot(y(h, r, i), y(h, r, i + 4));
                    if (std::fabs(a - b) > 1e-6f) return false;
                }
        return true;
    });
    check("cache refresh leaves other rows untouched", [&] {
        KVCache cache(1, 12, 2, 4, 4, 2);
        Tensor3D k(2, 12, 4), v(2, 12, 4);
        for (float& e : k.data()) e = dist(rng);
        for (float& e : v.data()) e = dist(rng);
        cache.full_refresh(0, k, v);
        const auto before = cache.gather(0, std::vector<std::size_t>{4, 5, 7, 8, 9, 10, 11});
        Tensor3D k1(2, 1, 4), v1(2, 1, 4);
        for (float& e : k1.data()) e = dist(rng);
        cache.refresh_at(0, std::vector<std::size_t>{6}, k1, v1);
        const auto after = cache.gather(0, std::vector<std::size_t>{4, 5, 7, 8, 9, 10, 11});
        return before.first == after.first && before.second == after.second;
    });

    ModelConfig tiny;
    tiny.num_layers = 3;
    tiny.num_heads = 2;
    tiny.head_dim = 8;
    tiny.mlp_dim = 32;
    tiny.vocab_size = 64;
    tiny.mask_token_id = 63;
    tiny.max_positions = 256;
    tiny.seed = 99;
    const ModelWeights w = init_random(tiny);
    const auto prompt = synthetic_prompt(40, tiny, 5);

    check("weights container round-trip is bitwise", [&] {
        const auto bytes = encode_container(to_named_tensors(w));
        return load_weights_from_bytes(bytes, tiny) == w;
    });
    check("subset forward matches full forward", [&] {
        std::vector<TokenId> tokens = prompt;
        tokens.resize(56, tiny.mask_token_id);
        const ForwardResult full = full_forward(w, tokens);
        KVCache cache(tiny.num_layers, tokens.size(), tiny.num_heads, tiny.head_dim, prompt.size(), 16);
        for (std::size_t l = 0; l < tiny.num_layers; ++l) cache.full_refresh(l, full.keys[l], full.values[l]);
        const std::vector<std::size_t> sub = {41, 50};
        FullAttention policy;
        const ForwardResult part = forward_layers(w, tokens, sub, &cache, policy);
        for (std::size_t r = 0; r < sub.size(); ++r)
            for (std::size_t j = 0; j < tiny.vocab_size; ++j)
                if (std::fabs(part.logits(r, j) - full.logits(sub[r], j)) > 1e-5f) return false;
        return true;
    });
    check("degenerate sparse decode equals cached decode", [&] {
        DecodeOptions o;
        o.gen_len = 16;
        o.steps = 8;
        o.block_len = 8;
        o.focus.dense_layers = 1;
        o.focus.alpha = 1.0;
        o.focus.sink_fraction = 1.0;
        o.focus.window = 4 * (prompt.size() + o.gen_len);
        o.focus.prompt_block_size = 16;
        o.force_block_active = true;
        o.mode = DecodeMode::kCache;
        const auto a = decode(w, prompt, o);
        o.mode = DecodeMode::kFocus;
        const auto b = decode(w, prompt, o);
        return a.tokens == b.tokens;
    });
    return failures;
}

}  // namespace dlm
