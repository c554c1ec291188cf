#pragma once

// Flat `key = value` run configuration.  One struct carries every knob the
// pipeline reads so a config file fully determines a run; unknown keys are
// rejected rather than ignored.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "dpo.hpp"
#include "flow.hpp"
#include "model.hpp"

namespace gsaflow {

struct RunConfig {
    ModelConfig model;
    SamplerConfig sampler;
    DpoConfig dpo;
    double stage1_lr = 1e-4;
    int stage1_steps = 20000;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 1e-2;
    double caption_dropout = 0.1;
    int group_size = 3;
    uint64_t seed = 0;
    int num_identities = 8;
    int frames_per_identity = 8;

    void validate() const {
        model.validate();
        sampler.validate();
        dpo.validate();
        check_contract(stage1_lr > 0.0, "config: stage1_lr must be positive");
        check_contract(stage1_steps >= 0, "config: stage1_steps must be non-negative");
        check_contract(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "config: adam_beta1 outside [0,1)");
        check_contract(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "config: adam_beta2 outside [0,1)");
        check_contract(adam_eps > 0.0, "config: adam_eps must be positive");
        check_contract(weight_decay >= 0.0, "config: weight_decay must be non-negative");
        check_contract(caption_dropout >= 0.0 && caption_dropout <= 1.0,
                       "config: caption_dropout outside [0,1]");
        check_contract(group_size >= 2, "config: group_size must be at least 2");
        check_contract(num_identities >= 2, "config: num_identities must be at least 2");
        check_contract(frames_per_identity >= 4, "config: frames_per_identity must be at least 4");
        check_contract(group_size <= frames_per_identity,
                       "config: group_size exceeds frames_per_identity");
    }
};

namespace detail {

inline std::string trim(const std::string &s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline long long parse_ll(const std::string &v, const std::string &key) {
    size_t used = 0;
    long long out = 0;
    try {
        out = std::stoll(v, &used);
    } catch (const std::exception &) {
        used = std::string::npos;
    }
    check_contract(used == v.size() && used > 0, "config: bad integer for '" + key + "': " + v);
    return out;
}

inline int parse_int(const std::string &v, const std::string &key) {
    return static_cast<int>(parse_ll(v, key));
}

inline uint64_t parse_u64(const std::string &v, const std::string &key) {
    size_t used = 0;
    unsigned long long out = 0;
    try {
        out = std::stoull(v, &used);
    } catch (const std::exception &) {
        used = std::string::npos;
    }
    check_contract(used == v.size() && used > 0 && v[0] != '-',
                   "config: bad unsigned integer for '" + key + "': " + v);
    return out;
}

inline double parse_double(const std::string &v, const std::string &key) {
    size_t used = 0;
    double out = 0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception &) {
        used = std::string::npos;
    }
    check_contract(used == v.size() && used > 0, "config: bad number for '" + key + "': " + v);
    return out;
}

inline bool parse_bool(const std::string &v, const std::string &key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    check_contract(false, "config: bad boolean for '" + key + "': " + v);
    return false;
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string &text) {
    RunConfig cfg;
    using Setter = std::function<void(const std::string &, const std::string &)>;
    const std::map<std::string, Setter> setters = {
        {"hidden", [&](auto &k, auto &v) { cfg.model.hidden = detail::parse_int(v, k); }},
        {"heads", [&](auto &k, auto &v) { cfg.model.heads = detail::parse_int(v, k); }},
        {"depth", [&](auto &k, auto &v) { cfg.model.depth = detail::parse_int(v, k); }},
        {"latent_grid", [&](auto &k, auto &v) { cfg.model.latent_grid = detail::parse_int(v, k); }},
        {"latent_channels",
         [&](auto &k, auto &v) { cfg.model.latent_channels = detail::parse_int(v, k); }},
        {"patch", [&](auto &k, auto &v) { cfg.model.patch = detail::parse_int(v, k); }},
        {"text_len", [&](auto &k, auto &v) { cfg.model.text_len = detail::parse_int(v, k); }},
        {"vocab", [&](auto &k, auto &v) { cfg.model.vocab = detail::parse_int(v, k); }},
        {"lora_rank", [&](auto &k, auto &v) { cfg.model.lora_rank = detail::parse_int(v, k); }},
        {"lora_alpha", [&](auto &k, auto &v) { cfg.model.lora_alpha = detail::parse_int(v, k); }},
        {"max_samples", [&](auto &k, auto &v) { cfg.model.max_samples = detail::parse_int(v, k); }},
        {"time_freqs", [&](auto &k, auto &v) { cfg.model.time_freqs = detail::parse_int(v, k); }},
        {"qk_norm", [&](auto &k, auto &v) { cfg.model.qk_norm = detail::parse_bool(v, k); }},
        {"ref_with_text",
         [&](auto &k, auto &v) { cfg.model.ref_with_text = detail::parse_bool(v, k); }},
        {"ref_grad", [&](auto &k, auto &v) { cfg.model.ref_grad = detail::parse_bool(v, k); }},
        {"ref_index_mode",
         [&](auto &k, auto &v) {
             if (v == "shared")
                 cfg.model.ref_index_mode = ModelConfig::RefIndexMode::shared;
             else if (v == "distinct")
                 cfg.model.ref_index_mode = ModelConfig::RefIndexMode::distinct;
             else
                 check_contract(false, "config: bad ref_index_mode '" + v + "' for '" + k + "'");
         }},
        {"sample_steps", [&](auto &k, auto &v) { cfg.sampler.steps = detail::parse_int(v, k); }},
        {"cfg_scale", [&](auto &k, auto &v) { cfg.sampler.cfg_scale = detail::parse_double(v, k); }},
        {"cfg_drop_refs",
         [&](auto &k, auto &v) { cfg.sampler.cfg_drop_refs = detail::parse_bool(v, k); }},
        {"dpo_beta", [&](auto &k, auto &v) { cfg.dpo.beta = detail::parse_double(v, k); }},
        {"stage2_lr", [&](auto &k, auto &v) { cfg.dpo.lr = detail::parse_double(v, k); }},
        {"stage2_steps", [&](auto &k, auto &v) { cfg.dpo.steps = detail::parse_int(v, k); }},
        {"stage1_lr", [&](auto &k, auto &v) { cfg.stage1_lr = detail::parse_double(v, k); }},
        {"stage1_steps", [&](auto &k, auto &v) { cfg.stage1_steps = detail::parse_int(v, k); }},
        {"adam_beta1", [&](auto &k, auto &v) { cfg.adam_beta1 = detail::parse_double(v, k); }},
        {"adam_beta2", [&](auto &k, auto &v) { cfg.adam_beta2 = detail::parse_double(v, k); }},
        {"adam_eps", [&](auto &k, auto &v) { cfg.adam_eps = detail::parse_double(v, k); }},
        {"weight_decay", [&](auto &k, auto &v) { cfg.weight_decay = detail::parse_double(v, k); }},
        {"caption_dropout",
         [&](auto &k, auto &v) { cfg.caption_dropout = detail::parse_double(v, k); }},
        {"group_size", [&](auto &k, auto &v) { cfg.group_size = detail::parse_int(v, k); }},
        {"seed", [&](auto &k, auto &v) { cfg.seed = detail::parse_u64(v, k); }},
        {"num_identities", [&](auto &k, auto &v) { cfg.num_identities = detail::parse_int(v, k); }},
        {"frames_per_identity",
         [&](auto &k, auto &v) { cfg.frames_per_identity = detail::parse_int(v, k); }},
    };

    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        check_contract(eq != std::string::npos, "config: expected 'key = value', got: " + line);
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        auto it = setters.find(key);
        check_contract(it != setters.end(), "config: unknown key '" + key + "'");
        check_contract(!value.empty(), "config: empty value for '" + key + "'");
        it->second(key, value);
    }
    cfg.validate();
    return cfg;
}

inline RunConfig load_run_config(const std::string &path) {
    std::ifstream in(path);
    check_contract(static_cast<bool>(in), "config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

/// Canonical serialization; parse_run_config(run_config_text(c)) == c.
inline std::string run_config_text(const RunConfig &cfg) {
    std::ostringstream out;
    out.precision(17);
    out << "hidden = " << cfg.model.hidden << "\n";
    out << "heads = " << cfg.model.heads << "\n";
    out << "depth = " << cfg.model.depth << "\n";
    out << "latent_grid = " << cfg.model.latent_grid << "\n";
    out << "latent_channels = " << cfg.model.latent_channels << "\n";
    out << "patch = " << cfg.model.patch << "\n";
    out << "text_len = " << cfg.model.text_len << "\n";
    out << "vocab = " << cfg.model.vocab << "\n";
    out << "lora_rank = " << cfg.model.lora_rank << "\n";
    out << "lora_alpha = " << cfg.model.lora_alpha << "\n";
    out << "max_samples = " << cfg.model.max_samples << "\n";
    out << "time_freqs = " << cfg.model.time_freqs << "\n";
    out << "qk_norm = " << (cfg.model.qk_norm ? "true" : "false") << "\n";
    out << "ref_with_text = " << (cfg.model.ref_with_text ? "true" : "false") << "\n";
    out << "ref_grad = " << (cfg.model.ref_grad ? "true" : "false") << "\n";
    out << "ref_index_mode = "
        << (cfg.model.ref_index_mode == ModelConfig::RefIndexMode::shared ? "shared" : "distinct")
        << "\n";
    out << "sample_steps = " << cfg.sampler.steps << "\n";
    out << "cfg_scale = " << cfg.sampler.cfg_scale << "\n";
    out << "cfg_drop_refs = " << (cfg.sampler.cfg_drop_refs ? "true" : "false") << "\n";
    out << "dpo_beta = " << cfg.dpo.beta << "\n";
    out << "stage2_lr = " << cfg.dpo.lr << "\n";
    out << "stage2_steps = " << cfg.dpo.steps << "\n";
    out << "stage1_lr = " << cfg.stage1_lr << "\n";
    out << "stage1_steps = " << cfg.stage1_steps << "\n";
    out << "adam_beta1 = " << cfg.adam_beta1 << "\n";
    out << "adam_beta2 = " << cfg.adam_beta2 << "\n";
    out << "adam_eps = " << cfg.adam_eps << "\n";
    out << "weight_decay = " << cfg.weight_decay << "\n";
    out << "caption_dropout = " << cfg.caption_dropout << "\n";
    out << "group_size = " << cfg.group_size << "\n";
    out << "seed = " << cfg.seed << "\n";
    out << "num_identities = " << cfg.num_identities << "\n";
    out << "frames_per_identity = " << cfg.frames_per_identity << "\n";
    return out.str();
}

}  // namespace gsaflow
