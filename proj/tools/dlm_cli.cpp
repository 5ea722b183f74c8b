// Copyright 2026 The dlmsparse Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dlm/commands.hpp"

namespace {

struct Override {
    std::string key;
    std::string value;
};

void add_run_options(CLI::App* cmd, std::vector<Override>& overrides, std::string& config_path) {
    auto opt = [&](const char* flag, const char* key, const char* help) {
        cmd->add_option_function<std::string>(
            flag, [&overrides, key](const std::string& v) { overrides.push_back({key, v}); }, help);
    };
    auto sw = [&](const char* flag, const char* key, const char* value, const char* help) {
        cmd->add_flag_callback(flag, [&overrides, key, value] { overrides.push_back({key, value}); }, help);
    };
    cmd->add_option("--config", config_path, "key = value config file (flags override it)");
    opt("--mode", "mode", "vanilla | cache | focus");
    opt("--rho", "rho", "focus expansion factor");
    opt("--window", "window", "neighbour window half-width");
    opt("--dense-layers", "dense_layers", "leading full-attention layers");
    opt("--trailing-dense-layers", "trailing_dense_layers", "trailing full-attention layers");
    opt("--alpha", "alpha", "fraction of prompt blocks kept, in (0, 1]");
    opt("--sink-frac", "sink_frac", "sink tokens as a fraction of the prompt");
    opt("--prompt-block-size", "prompt_block_size", "prompt block length");
    opt("--block-len", "block_len", "generation block length");
    opt("--steps", "steps", "total denoising steps");
    opt("--gen-len", "gen_len", "generated tokens");
    opt("--seed", "seed", "seed for weights and synthetic prompt");
    opt("--model", "model", "weights container path");
    opt("--out-dir", "out_dir", "output directory");
    opt("--query-agg", "query_agg", "mean | sum-softmax");
    opt("--window-clamp", "window_clamp", "block | response");
    opt("--prompt-file", "prompt_file", "token ids, one per line");
    opt("--prompt-len", "prompt_len", "synthetic prompt length");
    opt("--num-layers", "num_layers", "model layers");
    sw("--strict-alg1", "strict_alg1", "true", "refresh only dense layers at active positions");
    sw("--sink-recompute", "sink_recompute", "true", "re-identify sinks in every sparse layer");
    sw("--timing", "timing", "true", "record per-step nanoseconds in traces");
}

dlm::RunConfig resolve(const std::string& config_path, const std::vector<Override>& overrides) {
    dlm::RunConfig cfg;
    if (!config_path.empty()) {
        dlm::apply_config_file(cfg, config_path);
    }
    for (const auto& o : overrides) {
        cfg.set(o.key, o.value);
    }
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sparse-attention inference engine for masked diffusion language models"};
    app.require_subcommand(1);

    std::vector<Override> overrides;
    std::string config_path;
    std::string trace_path;
    std::string lengths;
    std::string repeats;
    std::string modes_arg;
    bool inject_fault = false;

    auto* gen = app.add_subcommand("generate", "decode once and write tokens, traces and a manifest");
    add_run_options(gen, overrides, config_path);
    auto* bench = app.add_subcommand("bench", "throughput across prompt lengths and modes");
    add_run_options(bench, overrides, config_path);
    bench->add_option("--lengths", lengths, "comma-separated prompt lengths (default 1024,2048,4096)");
    bench->add_option("--repeats", repeats, "runs per length and mode, fastest reported (default 1)");
    bench->add_option("--modes", modes_arg, "comma-separated modes (default vanilla,cache,focus)");
    auto* analyze = app.add_subcommand("analyze", "confidence correlation, recall, sink overlap, divergence");
    add_run_options(analyze, overrides, config_path);
    analyze->add_option("--trace", trace_path, "trace.json from a previous generate");
    auto* selftest = app.add_subcommand("selftest", "run the invariant suite");
    selftest->add_flag("--inject-fault", inject_fault, "corrupt the matmul kernel (test hook)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (selftest->parsed()) {
            const int failures = dlm::run_selftest(std::cout, inject_fault);
            std::cout << (failures == 0 ? "selftest passed" : "selftest FAILED") << '\n';
            return failures == 0 ? 0 : 1;
        }
        if (!lengths.empty()) {
            overrides.push_back({"lengths", lengths});
        }
        if (!repeats.empty()) {
            overrides.push_back({"repeats", repeats});
        }
        const dlm::RunConfig cfg = resolve(config_path, overrides);
        if (gen->parsed()) {
            const auto out = dlm::run_generate(cfg);
            std::cout << "wrote " << out.tokens_path.string() << ", " << out.trace_csv_path.string() << ", "
                      << out.trace_json_path.string() << ", " << out.manifest_path.string() << '\n';
        } else if (bench->parsed()) {
            std::vector<dlm::DecodeMode> modes;
            std::stringstream ss(modes_arg);
            std::string item;
            while (std::getline(ss, item, ',')) {
                modes.push_back(dlm::parse_mode(dlm::detail::trim(item)));
            }
            const auto rows = dlm::run_bench(cfg, modes);
            dlm::write_bench_csv(std::cout, rows);
        } else if (analyze->parsed()) {
            std::optional<std::filesystem::path> trace;
            if (!trace_path.empty()) {
                trace = trace_path;
            }
            dlm::run_analyze(cfg, trace);
            std::cout << "wrote analysis CSVs to " << cfg.out_dir << '\n';
        }
    } catch (const dlm::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
