// Copyright 2026 The dlmsparse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dlm/decoder.hpp"
#include "dlm/error.hpp"

namespace dlm {

inline void to_json(nlohmann::json& j, const SparseLayerRecord& r) {
    j = nlohmann::json{{"layer", r.layer},
                       {"sinks", r.sinks},
                       {"relevant_blocks", r.relevant_blocks},
                       {"prompt_selected", r.prompt_selected},
                       {"attended", r.attended}};
}

inline void from_json(const nlohmann::json& j, SparseLayerRecord& r) {
    j.at("layer").get_to(r.layer);
    j.at("sinks").get_to(r.sinks);
    j.at("relevant_blocks").get_to(r.relevant_blocks);
    j.at("prompt_selected").get_to(r.prompt_selected);
    j.at("attended").get_to(r.attended);
}

inline void to_json(nlohmann::json& j, const StepTrace& t) {
    nlohmann::json conf = nlohmann::json::array();
    for (const auto& [pos, c] : t.confidence) {
        conf.push_back(nlohmann::json::array({pos, c}));
    }
    j = nlohmann::json{{"step", t.step},
                       {"block", t.block},
                       {"entry", t.is_block_entry},
                       {"n", t.n},
                       {"focus", t.focus},
                       {"active", t.active},
                       {"sinks", t.sinks},
                       {"relevant_blocks", t.relevant_blocks},
                       {"prompt_selected", t.prompt_selected},
                       {"max_prompt_selected", t.max_prompt_selected},
                       {"sparse_layers", t.sparse_layers},
                       {"attended_per_layer", t.attended_per_layer},
                       {"attended_kv_total", t.attended_kv_total},
                       {"block_masked", t.block_masked},
                       {"confidence", std::move(conf)},
                       {"unmasked", t.unmasked},
                       {"unmasked_tokens", t.unmasked_tokens},
                       {"refreshed", t.refreshed},
                       {"sparse_layer_refresh", t.sparse_layer_refresh},
                       {"layer_sink_scores", t.layer_sink_scores},
                       {"nanos", t.nanos}};
}

inline void from_json(const nlohmann::json& j, StepTrace& t) {
    j.at("step").get_to(t.step);
    j.at("block").get_to(t.block);
    j.at("entry").get_to(t.is_block_entry);
    j.at("n").get_to(t.n);
    j.at("focus").get_to(t.focus);
    j.at("active").get_to(t.active);
    j.at("sinks").get_to(t.sinks);
    j.at("relevant_blocks").get_to(t.relevant_blocks);
    j.at("prompt_selected").get_to(t.prompt_selected);
    j.at("max_prompt_selected").get_to(t.max_prompt_selected);
    j.at("sparse_layers").get_to(t.sparse_layers);
    j.at("attended_per_layer").get_to(t.attended_per_layer);
    j.at("attended_kv_total").get_to(t.attended_kv_total);
    j.at("block_masked").get_to(t.block_masked);
    t.confidence.clear();
    for (const auto& e : j.at("confidence")) {
        t.confidence.emplace_back(e.at(0).get<std::size_t>(), e.at(1).get<float>());
    }
    j.at("unmasked").get_to(t.unmasked);
    j.at("unmasked_tokens").get_to(t.unmasked_tokens);
    j.at("refreshed").get_to(t.refreshed);
    j.at("sparse_layer_refresh").get_to(t.sparse_layer_refresh);
    j.at("layer_sink_scores").get_to(t.layer_sink_scores);
    j.at("nanos").get_to(t.nanos);
}

inline void write_trace_json(const std::filesystem::path& path, const std::vector<StepTrace>& trace) {
    std::ofstream out(path);
    if (!out) {
        fail(ErrorCode::kIo, "cannot write " + path.string());
    }
    out << nlohmann::json{{"steps", trace}}.dump(1) << '\n';
}

inline std::vector<StepTrace> read_trace_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorCode::kIo, "cannot open " + path.string());
    }
    try {
        return nlohmann::json::parse(in).at("steps").get<std::vector<StepTrace>>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::kMalformed, "trace " + path.string() + ": " + e.what());
    }
}

}  // namespace dlm
