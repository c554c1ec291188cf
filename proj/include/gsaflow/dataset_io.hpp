#pragma once

// Dataset files: a text preamble per sequence, then one float32 block per
// frame.  On disk the latent is row-major channel-last; in memory it is
// channel-major, so both directions permute.

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "data.hpp"
#include "tensor.hpp"

namespace gsaflow {

static_assert(std::endian::native == std::endian::little,
              "dataset payloads assume a little-endian host");

inline constexpr const char *kDatasetMagic = "GSAFLOW-DS v1";
inline constexpr const char *kLatentsMagic = "GSAFLOW-LAT v1";

namespace detail {

template <typename T>
inline std::vector<float> to_channel_last(const Tensor<T> &latent, const DataGeometry &geom) {
    const int g = geom.latent_grid, c = geom.latent_channels;
    std::vector<float> out;
    out.reserve(static_cast<size_t>(geom.numel()));
    for (int y = 0; y < g; ++y)
        for (int x = 0; x < g; ++x)
            for (int ch = 0; ch < c; ++ch)
                out.push_back(static_cast<float>(
                    latent.value()[static_cast<size_t>(ch) * g * g + static_cast<size_t>(y) * g + x]));
    return out;
}

template <typename T>
inline Tensor<T> from_channel_last(const std::vector<float> &disk, const DataGeometry &geom) {
    const int g = geom.latent_grid, c = geom.latent_channels;
    std::vector<T> mem(static_cast<size_t>(geom.numel()));
    size_t i = 0;
    for (int y = 0; y < g; ++y)
        for (int x = 0; x < g; ++x)
            for (int ch = 0; ch < c; ++ch)
                mem[static_cast<size_t>(ch) * g * g + static_cast<size_t>(y) * g + x] =
                    static_cast<T>(disk[i++]);
    return Tensor<T>::from_vec({geom.numel()}, std::move(mem));
}

inline void write_block(std::ofstream &out, const std::vector<float> &block) {
    out.write(reinterpret_cast<const char *>(block.data()),
              static_cast<std::streamsize>(block.size() * sizeof(float)));
    out.put('\n');
}

inline std::vector<float> read_block(std::ifstream &in, size_t count, const std::string &what) {
    std::vector<float> block(count);
    in.read(reinterpret_cast<char *>(block.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    check_contract(in.gcount() == static_cast<std::streamsize>(count * sizeof(float)),
                   "dataset: truncated latent block in " + what);
    check_contract(in.get() == '\n', "dataset: missing block terminator in " + what);
    return block;
}

}  // namespace detail

template <typename T>
inline void save_dataset(const std::string &path, const std::vector<StorySequence<T>> &sequences,
                         const DataGeometry &geom) {
    geom.validate();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    check_contract(static_cast<bool>(out), "dataset: cannot write " + path);
    out << kDatasetMagic << "\n";
    out << "geometry " << geom.latent_channels << " " << geom.latent_grid << " " << geom.text_len
        << "\n";
    out << "sequences " << sequences.size() << "\n";
    for (const auto &seq : sequences) {
        out << "seq " << seq.character.identity_id << " " << seq.character.style_id << " "
            << seq.frames.size() << "\n";
        for (const auto &frame : seq.frames) {
            check_shape(frame.latent.numel() == geom.numel(), "dataset: frame/geometry mismatch");
            out << "caption";
            for (int t : frame.caption) out << " " << t;
            out << "\n";
            detail::write_block(out, detail::to_channel_last(frame.latent, geom));
        }
    }
    check_contract(static_cast<bool>(out), "dataset: write failed for " + path);
}

template <typename T>
struct LoadedDataset {
    DataGeometry geom;
    std::vector<StorySequence<T>> sequences;
};

template <typename T>
inline LoadedDataset<T> load_dataset(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    check_contract(static_cast<bool>(in), "dataset: cannot open " + path);
    std::string line, word;
    auto next_line = [&](const char *what) {
        check_contract(static_cast<bool>(std::getline(in, line)),
                       std::string("dataset: truncated before ") + what);
        return line;
    };
    check_contract(next_line("magic") == kDatasetMagic, "dataset: bad magic in " + path);
    LoadedDataset<T> ds;
    {
        std::istringstream g(next_line("geometry"));
        g >> word >> ds.geom.latent_channels >> ds.geom.latent_grid >> ds.geom.text_len;
        check_contract(word == "geometry" && static_cast<bool>(g), "dataset: bad geometry line");
        ds.geom.validate();
    }
    size_t num_sequences = 0;
    {
        std::istringstream s(next_line("sequences"));
        s >> word >> num_sequences;
        check_contract(word == "sequences" && static_cast<bool>(s), "dataset: bad sequences line");
    }
    for (size_t sidx = 0; sidx < num_sequences; ++sidx) {
        std::istringstream s(next_line("seq"));
        StorySequence<T> seq;
        size_t frames = 0;
        s >> word >> seq.character.identity_id >> seq.character.style_id >> frames;
        check_contract(word == "seq" && static_cast<bool>(s) && frames >= 1,
                       "dataset: bad seq line");
        seq.character.identity_code = identity_code(seq.character.identity_id);
        for (size_t f = 0; f < frames; ++f) {
            std::istringstream c(next_line("caption"));
            c >> word;
            check_contract(word == "caption", "dataset: bad caption line");
            StoryFrame<T> frame;
            int token = 0;
            while (c >> token) frame.caption.push_back(token);
            check_contract(static_cast<int>(frame.caption.size()) == ds.geom.text_len,
                           "dataset: caption length mismatch");
            frame.scene_id = caption_decode(frame.caption).scene_id;
            frame.latent = detail::from_channel_last<T>(
                detail::read_block(in, static_cast<size_t>(ds.geom.numel()), path), ds.geom);
            seq.frames.push_back(std::move(frame));
        }
        ds.sequences.push_back(std::move(seq));
    }
    return ds;
}

/// Raw generated-latent archive for the sampling command.
template <typename T>
inline void save_latents_raw(const std::string &path, const std::vector<Tensor<T>> &latents,
                             const DataGeometry &geom) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    check_contract(static_cast<bool>(out), "latents: cannot write " + path);
    out << kLatentsMagic << "\n";
    out << "geometry " << geom.latent_channels << " " << geom.latent_grid << "\n";
    out << "count " << latents.size() << "\n";
    for (const auto &z : latents) {
        check_shape(z.numel() == geom.numel(), "latents: shape/geometry mismatch");
        detail::write_block(out, detail::to_channel_last(z, geom));
    }
    check_contract(static_cast<bool>(out), "latents: write failed for " + path);
}

template <typename T>
inline std::vector<Tensor<T>> load_latents_raw(const std::string &path, DataGeometry *geom_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    check_contract(static_cast<bool>(in), "latents: cannot open " + path);
    std::string line, word;
    check_contract(static_cast<bool>(std::getline(in, line)) && line == kLatentsMagic,
                   "latents: bad magic in " + path);
    DataGeometry geom;
    check_contract(static_cast<bool>(std::getline(in, line)), "latents: truncated geometry");
    {
        std::istringstream g(line);
        g >> word >> geom.latent_channels >> geom.latent_grid;
        check_contract(word == "geometry" && static_cast<bool>(g), "latents: bad geometry line");
    }
    size_t count = 0;
    check_contract(static_cast<bool>(std::getline(in, line)), "latents: truncated count");
    {
        std::istringstream c(line);
        c >> word >> count;
        check_contract(word == "count" && static_cast<bool>(c), "latents: bad count line");
    }
    std::vector<Tensor<T>> out;
    for (size_t i = 0; i < count; ++i)
        out.push_back(detail::from_channel_last<T>(
            detail::read_block(in, static_cast<size_t>(geom.numel()), path), geom));
    if (geom_out) *geom_out = geom;
    return out;
}

}  // namespace gsaflow
