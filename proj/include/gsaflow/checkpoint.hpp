#pragma once

// Checkpoints: a text header (format tag, config echo, tensor directory,
// content hash) followed by one little-endian float32 payload.  The hash is
// recomputed on load so silent corruption cannot slip through.

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "config.hpp"
#include "model.hpp"

namespace gsaflow {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads assume a little-endian host");

inline constexpr const char *kCheckpointMagic = "GSAFLOW-CKPT v1";
inline constexpr const char *kAdapterSetNames[3] = {"base", "phi_c", "phi_d"};

inline ParamSet param_set_by_name(const std::string &name) {
    if (name == "base") return ParamSet::base;
    if (name == "phi_c") return ParamSet::phi_c;
    if (name == "phi_d") return ParamSet::phi_d;
    check_contract(false, "checkpoint: unknown adapter set '" + name + "'");
    return ParamSet::base;  // unreachable
}

template <class Model>
inline void save_checkpoint(const std::string &path, const Model &model, const RunConfig &cfg) {
    std::ostringstream header;
    std::vector<float> payload;
    header << kCheckpointMagic << "\n";
    header << "config-begin\n" << run_config_text(cfg) << "config-end\n";
    header << "sets 3\n";
    for (const char *set_name : kAdapterSetNames) {
        const ParamSet set = param_set_by_name(set_name);
        auto names = model.param_names(set);
        auto params = model.params(set);
        header << "set " << set_name << " " << names.size() << "\n";
        for (size_t i = 0; i < names.size(); ++i) {
            const auto &p = params[i];
            header << "tensor " << names[i] << " " << p.ndim();
            for (int d = 0; d < p.ndim(); ++d) header << " " << p.dim(d);
            header << " " << payload.size() << "\n";
            for (auto v : p.value()) payload.push_back(static_cast<float>(v));
        }
    }
    const uint64_t hash = fnv1a(payload.data(), payload.size() * sizeof(float));
    header << "hash " << hex64(hash) << "\n";
    header << "payload " << payload.size() << "\n";

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    check_contract(static_cast<bool>(out), "checkpoint: cannot write " + path);
    const std::string h = header.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(reinterpret_cast<const char *>(payload.data()),
              static_cast<std::streamsize>(payload.size() * sizeof(float)));
    check_contract(static_cast<bool>(out), "checkpoint: write failed for " + path);
}

namespace detail {

struct CheckpointTensor {
    std::string set;
    std::string name;
    Shape shape;
    size_t offset = 0;  // in floats
};

struct RawCheckpoint {
    RunConfig config;
    std::vector<CheckpointTensor> tensors;
    std::vector<float> payload;
    uint64_t content_hash = 0;
};

inline RawCheckpoint read_checkpoint(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    check_contract(static_cast<bool>(in), "checkpoint: cannot open " + path);
    std::string line;
    auto next_line = [&](const char *what) {
        check_contract(static_cast<bool>(std::getline(in, line)),
                       std::string("checkpoint: truncated before ") + what);
        return line;
    };
    check_contract(next_line("magic") == kCheckpointMagic, "checkpoint: bad magic in " + path);
    check_contract(next_line("config") == "config-begin", "checkpoint: missing config block");
    std::ostringstream cfg_text;
    while (next_line("config body") != "config-end") cfg_text << line << "\n";

    RawCheckpoint raw;
    raw.config = parse_run_config(cfg_text.str());
    std::istringstream sets_line(next_line("sets"));
    std::string word;
    int num_sets = 0;
    sets_line >> word >> num_sets;
    check_contract(word == "sets" && num_sets >= 1, "checkpoint: bad sets line");
    for (int s = 0; s < num_sets; ++s) {
        std::istringstream set_line(next_line("set"));
        std::string set_name;
        size_t count = 0;
        set_line >> word >> set_name >> count;
        check_contract(word == "set" && static_cast<bool>(set_line), "checkpoint: bad set line");
        param_set_by_name(set_name);  // validates the name
        for (size_t i = 0; i < count; ++i) {
            std::istringstream t(next_line("tensor"));
            CheckpointTensor ct;
            ct.set = set_name;
            int ndim = 0;
            t >> word >> ct.name >> ndim;
            check_contract(word == "tensor" && ndim >= 1 && ndim <= 4,
                           "checkpoint: bad tensor line");
            for (int d = 0; d < ndim; ++d) {
                int dim = 0;
                t >> dim;
                ct.shape.push_back(dim);
            }
            t >> ct.offset;
            check_contract(static_cast<bool>(t), "checkpoint: short tensor line");
            raw.tensors.push_back(std::move(ct));
        }
    }
    std::istringstream hash_line(next_line("hash"));
    std::string hash_hex;
    hash_line >> word >> hash_hex;
    check_contract(word == "hash" && hash_hex.size() == 16, "checkpoint: bad hash line");
    std::istringstream payload_line(next_line("payload"));
    size_t total = 0;
    payload_line >> word >> total;
    check_contract(word == "payload" && static_cast<bool>(payload_line),
                   "checkpoint: bad payload line");
    raw.payload.resize(total);
    in.read(reinterpret_cast<char *>(raw.payload.data()),
            static_cast<std::streamsize>(total * sizeof(float)));
    check_contract(in.gcount() == static_cast<std::streamsize>(total * sizeof(float)),
                   "checkpoint: payload truncated");
    raw.content_hash = fnv1a(raw.payload.data(), raw.payload.size() * sizeof(float));
    check_contract(hex64(raw.content_hash) == hash_hex,
                   "checkpoint: content hash mismatch, file is corrupt");
    return raw;
}

}  // namespace detail

template <class Model>
inline RunConfig load_checkpoint(const std::string &path, Model &model) {
    detail::RawCheckpoint raw = detail::read_checkpoint(path);
    for (const char *set_name : kAdapterSetNames) {
        const ParamSet set = param_set_by_name(set_name);
        auto names = model.param_names(set);
        auto params = model.params(set);
        std::map<std::string, size_t> index;
        for (size_t i = 0; i < names.size(); ++i) index[names[i]] = i;
        size_t seen = 0;
        for (const auto &ct : raw.tensors) {
            if (ct.set != set_name) continue;
            auto it = index.find(ct.name);
            check_contract(it != index.end(),
                           "checkpoint: tensor '" + ct.name + "' not in model set " + set_name);
            auto &p = params[it->second];
            check_shape(p.shape() == ct.shape, "checkpoint: shape mismatch for " + ct.name);
            check_contract(ct.offset + p.value().size() <= raw.payload.size(),
                           "checkpoint: offset out of range for " + ct.name);
            for (size_t i = 0; i < p.value().size(); ++i)
                p.value()[i] = static_cast<typename std::decay_t<decltype(p.value()[0])>>(
                    raw.payload[ct.offset + i]);
            ++seen;
        }
        check_contract(seen == names.size(), std::string("checkpoint: set ") + set_name +
                                                 " does not cover the model's parameters");
    }
    return raw.config;
}

struct CheckpointInfo {
    RunConfig config;
    uint64_t content_hash = 0;
    std::map<std::string, uint64_t> set_hashes;  // per adapter set
};

/// Header-level inspection; no model required.
inline CheckpointInfo inspect_checkpoint(const std::string &path) {
    detail::RawCheckpoint raw = detail::read_checkpoint(path);
    CheckpointInfo info;
    info.config = raw.config;
    info.content_hash = raw.content_hash;
    std::map<std::string, std::pair<size_t, size_t>> ranges;  // set -> [begin, end) floats
    for (const auto &ct : raw.tensors) {
        size_t n = 1;
        for (int d : ct.shape) n *= static_cast<size_t>(d);
        auto [it, fresh] = ranges.try_emplace(ct.set, ct.offset, ct.offset + n);
        if (!fresh) {
            it->second.first = std::min(it->second.first, ct.offset);
            it->second.second = std::max(it->second.second, ct.offset + n);
        }
    }
    for (const auto &[set, range] : ranges)
        info.set_hashes[set] = fnv1a(raw.payload.data() + range.first,
                                     (range.second - range.first) * sizeof(float));
    return info;
}

}  // namespace gsaflow
