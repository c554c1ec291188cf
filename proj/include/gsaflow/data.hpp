#pragma once

// Synthetic story corpus.  Frames are built directly in latent space: a fixed
// top-left quadrant carries a per-identity code (the "face"), the rest carries
// a per-scene pattern, and captions are exact integer encodings of the frame's
// (identity, scene, style) triple.  Because identity lives in a known region,
// consistency is measurable by construction.

#include <cstdint>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"
#include "flow.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace gsaflow {

constexpr int kIdentityCodeDim = 8;
constexpr int kNumStyles = 8;
constexpr int kCaptionNull = 0;   // reserved for caption dropout
constexpr int kCaptionPad = 63;
constexpr int kCaptionBase = 62;  // digit tokens 1..62
constexpr int kCaptionMaxField = kCaptionBase * kCaptionBase - 1;

/// Latent geometry the generator writes into.  Matches the desk model
/// defaults; tests shrink it.
struct DataGeometry {
    int latent_channels = 4;
    int latent_grid = 8;
    int text_len = 8;

    int quadrant() const { return latent_grid / 2; }
    int numel() const { return latent_channels * latent_grid * latent_grid; }
    int patch_cells() const { return latent_channels * quadrant() * quadrant(); }
    void validate() const {
        check_contract(latent_channels >= 1 && latent_grid >= 2 && latent_grid % 2 == 0,
                       "data geometry: need an even grid of at least 2");
        check_contract(text_len >= 6, "data geometry: captions need at least 6 tokens");
    }
};

struct CharacterSpec {
    int identity_id = -1;
    std::vector<double> identity_code;  // kIdentityCodeDim values in [-1,1]
    int style_id = 0;
};

template <typename T>
struct StoryFrame {
    Tensor<T> latent;
    std::vector<int> caption;
    int scene_id = -1;
};

template <typename T>
struct StorySequence {
    CharacterSpec character;
    std::vector<StoryFrame<T>> frames;
};

namespace detail {

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c = 0) {
    uint64_t h = fnv1a(&a, sizeof a);
    h = fnv1a(&b, sizeof b, h);
    return fnv1a(&c, sizeof c, h);
}

inline double cosine(const std::vector<double> &a, const std::vector<double> &b) {
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

/// Deterministic identity fingerprint.  Codes are drawn from a salted stream
/// and resampled until they sit at cosine < 0.9 from every earlier identity,
/// so the whole chain is a pure function of the id.
inline std::vector<double> identity_code(int identity_id) {
    check_contract(identity_id >= 0, "identity_code: id must be non-negative");
    std::vector<std::vector<double>> codes;
    codes.reserve(static_cast<size_t>(identity_id) + 1);
    for (int id = 0; id <= identity_id; ++id) {
        for (uint64_t salt = 0;; ++salt) {
            Rng rng(detail::mix_seed(0x49444543u, static_cast<uint64_t>(id), salt));
            std::vector<double> cand(kIdentityCodeDim);
            for (auto &v : cand) v = 2.0 * rng.uniform() - 1.0;
            bool apart = true;
            for (const auto &prev : codes)
                if (detail::cosine(cand, prev) >= 0.9) {
                    apart = false;
                    break;
                }
            if (apart) {
                codes.push_back(std::move(cand));
                break;
            }
        }
    }
    return std::move(codes.back());
}

/// Per-channel palette gain in [0.6, 1.4], the whole "style transform".
inline double style_gain(int style_id, int channel) {
    Rng rng(detail::mix_seed(0x5354594cu, static_cast<uint64_t>(style_id),
                             static_cast<uint64_t>(channel)));
    return 0.6 + 0.8 * rng.uniform();
}

struct CaptionFields {
    int identity_id = 0;
    int scene_id = 0;
    int style_id = 0;
};

/// Two base-62 digits per field, then padding; token 0 stays reserved.
inline std::vector<int> caption_encode(const CaptionFields &f, int text_len) {
    check_contract(text_len >= 6, "caption_encode: need at least 6 tokens");
    auto in_range = [](int v) { return v >= 0 && v <= kCaptionMaxField; };
    check_contract(in_range(f.identity_id) && in_range(f.scene_id) && in_range(f.style_id),
                   "caption_encode: field out of range");
    std::vector<int> tokens(static_cast<size_t>(text_len), kCaptionPad);
    const int fields[3] = {f.identity_id, f.scene_id, f.style_id};
    for (int i = 0; i < 3; ++i) {
        tokens[static_cast<size_t>(2 * i)] = fields[i] / kCaptionBase + 1;
        tokens[static_cast<size_t>(2 * i + 1)] = fields[i] % kCaptionBase + 1;
    }
    return tokens;
}

inline CaptionFields caption_decode(const std::vector<int> &tokens) {
    check_contract(tokens.size() >= 6, "caption_decode: too short");
    auto digit = [&](size_t i) {
        const int t = tokens[i];
        check_contract(t >= 1 && t <= kCaptionBase, "caption_decode: bad digit token");
        return t - 1;
    };
    for (size_t i = 6; i < tokens.size(); ++i)
        check_contract(tokens[i] == kCaptionPad, "caption_decode: bad padding token");
    CaptionFields f;
    f.identity_id = digit(0) * kCaptionBase + digit(1);
    f.scene_id = digit(2) * kCaptionBase + digit(3);
    f.style_id = digit(4) * kCaptionBase + digit(5);
    return f;
}

/// Render one frame: identity code cycled over the top-left quadrant of every
/// channel (scaled by style), a seeded noise field everywhere else.
template <typename T>
inline Tensor<T> make_frame_latent(const std::vector<double> &code, int style_id, int scene_id,
                                   uint64_t world_seed, const DataGeometry &geom) {
    geom.validate();
    check_contract(static_cast<int>(code.size()) == kIdentityCodeDim,
                   "make_frame_latent: wrong code size");
    const int g = geom.latent_grid, q = geom.quadrant();
    std::vector<T> out(static_cast<size_t>(geom.numel()));
    Rng scene_rng(detail::mix_seed(world_seed ^ 0x5343454eu, static_cast<uint64_t>(scene_id)));
    for (int ch = 0; ch < geom.latent_channels; ++ch) {
        const double gain = style_gain(style_id, ch);
        for (int y = 0; y < g; ++y)
            for (int x = 0; x < g; ++x) {
                const size_t flat = static_cast<size_t>(ch) * g * g + static_cast<size_t>(y) * g + x;
                if (y < q && x < q) {
                    const int cell = ch * q * q + y * q + x;
                    out[flat] = static_cast<T>(code[static_cast<size_t>(cell % kIdentityCodeDim)] * gain);
                } else {
                    out[flat] = static_cast<T>(scene_rng.normal() * 0.5);
                }
            }
    }
    return Tensor<T>::from_vec({geom.numel()}, std::move(out));
}

/// Deterministic corpus: one sequence per identity, globally unique scenes.
template <typename T>
inline std::vector<StorySequence<T>> generate_dataset(int num_identities, int frames_per_identity,
                                                      uint64_t seed,
                                                      const DataGeometry &geom = {}) {
    check_contract(num_identities >= 2, "generate_dataset: need at least 2 identities");
    check_contract(frames_per_identity >= 4, "generate_dataset: need at least 4 frames each");
    geom.validate();
    check_contract(num_identities * frames_per_identity - 1 <= kCaptionMaxField,
                   "generate_dataset: scene ids would overflow the caption encoding");
    std::vector<StorySequence<T>> sequences;
    sequences.reserve(static_cast<size_t>(num_identities));
    for (int id = 0; id < num_identities; ++id) {
        StorySequence<T> seq;
        seq.character.identity_id = id;
        seq.character.identity_code = identity_code(id);
        Rng srng(detail::mix_seed(seed, 0x53545953u, static_cast<uint64_t>(id)));
        seq.character.style_id = srng.uniform_int(kNumStyles);
        for (int f = 0; f < frames_per_identity; ++f) {
            StoryFrame<T> frame;
            frame.scene_id = id * frames_per_identity + f;
            frame.caption = caption_encode({id, frame.scene_id, seq.character.style_id}, geom.text_len);
            frame.latent = make_frame_latent<T>(seq.character.identity_code, seq.character.style_id,
                                                frame.scene_id, seed, geom);
            seq.frames.push_back(std::move(frame));
        }
        sequences.push_back(std::move(seq));
    }
    return sequences;
}

/// Indices of sequences long enough for a group of the requested size; the
/// short ones are skipped with a warning rather than failing the run.
template <typename T>
inline std::vector<int> eligible_sequences(const std::vector<StorySequence<T>> &sequences,
                                           int group_size) {
    check_contract(group_size >= 2, "group batches need at least 2 members");
    std::vector<int> keep;
    for (size_t i = 0; i < sequences.size(); ++i) {
        if (static_cast<int>(sequences[i].frames.size()) >= group_size)
            keep.push_back(static_cast<int>(i));
        else
            std::cerr << "warning: identity " << sequences[i].character.identity_id << " has only "
                      << sequences[i].frames.size() << " frames, skipping\n";
    }
    return keep;
}

/// One training group: a random identity, N distinct frames, frame 0 as the
/// noised target and the rest as clean references.
template <typename T>
inline GroupBatch<T> draw_group_batch(const std::vector<StorySequence<T>> &sequences,
                                      const std::vector<int> &eligible, int group_size, Rng &rng) {
    check_contract(!eligible.empty(), "draw_group_batch: no identity has enough frames");
    const auto &seq =
        sequences[static_cast<size_t>(eligible[static_cast<size_t>(rng.uniform_int(
            static_cast<int>(eligible.size())))])];
    const int nf = static_cast<int>(seq.frames.size());
    std::vector<int> order(static_cast<size_t>(nf));
    for (int i = 0; i < nf; ++i) order[static_cast<size_t>(i)] = i;
    for (int i = 0; i < group_size; ++i)
        std::swap(order[static_cast<size_t>(i)],
                  order[static_cast<size_t>(i + rng.uniform_int(nf - i))]);
    const auto &target = seq.frames[static_cast<size_t>(order[0])];
    std::vector<RefFrame<T>> refs;
    for (int i = 1; i < group_size; ++i) {
        const auto &fr = seq.frames[static_cast<size_t>(order[static_cast<size_t>(i)])];
        refs.push_back({fr.latent, fr.caption, T(0)});
    }
    return make_group_batch(target.latent, target.caption, std::move(refs),
                            seq.character.identity_id, rng);
}

template <typename T>
inline std::vector<GroupBatch<T>> make_group_batches(const std::vector<StorySequence<T>> &sequences,
                                                     int group_size, int count, Rng &rng) {
    auto eligible = eligible_sequences(sequences, group_size);
    std::vector<GroupBatch<T>> batches;
    batches.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i)
        batches.push_back(draw_group_batch(sequences, eligible, group_size, rng));
    return batches;
}

enum class LoserMode { identity_swap, noise_inject, patch_scramble };

inline LoserMode parse_loser_mode(const std::string &name) {
    if (name == "identity-swap") return LoserMode::identity_swap;
    if (name == "noise-inject") return LoserMode::noise_inject;
    if (name == "patch-scramble") return LoserMode::patch_scramble;
    check_contract(false, "unknown loser mode: " + name);
    return LoserMode::identity_swap;  // unreachable
}

/// Degrade a frame's identity region, leaving the scene region untouched.
template <typename T>
inline Tensor<T> corrupt_to_loser(const StoryFrame<T> &frame, LoserMode mode, Rng &rng,
                                  const DataGeometry &geom = {}, double sigma = 0.5) {
    geom.validate();
    check_shape(frame.latent.numel() == geom.numel(), "corrupt_to_loser: latent/geometry mismatch");
    check_contract(sigma >= 0.0, "corrupt_to_loser: sigma must be non-negative");
    Tensor<T> out = frame.latent.clone();
    const int g = geom.latent_grid, q = geom.quadrant();
    auto flat = [&](int ch, int y, int x) {
        return static_cast<size_t>(ch) * g * g + static_cast<size_t>(y) * g + x;
    };
    switch (mode) {
        case LoserMode::identity_swap: {
            const CaptionFields f = caption_decode(frame.caption);
            const int alt = f.identity_id + 1 + rng.uniform_int(7);
            const std::vector<double> code = identity_code(alt);
            for (int ch = 0; ch < geom.latent_channels; ++ch) {
                const double gain = style_gain(f.style_id, ch);
                for (int y = 0; y < q; ++y)
                    for (int x = 0; x < q; ++x) {
                        const int cell = ch * q * q + y * q + x;
                        out.value()[flat(ch, y, x)] =
                            static_cast<T>(code[static_cast<size_t>(cell % kIdentityCodeDim)] * gain);
                    }
            }
            break;
        }
        case LoserMode::noise_inject: {
            for (int ch = 0; ch < geom.latent_channels; ++ch)
                for (int y = 0; y < q; ++y)
                    for (int x = 0; x < q; ++x) {
                        const double n = rng.normal();  // stream advances even at sigma = 0
                        if (sigma != 0.0) out.value()[flat(ch, y, x)] += static_cast<T>(sigma * n);
                    }
            break;
        }
        case LoserMode::patch_scramble: {
            const int rows = geom.latent_channels * q;
            std::vector<int> perm(static_cast<size_t>(rows));
            for (int i = 0; i < rows; ++i) perm[static_cast<size_t>(i)] = i;
            for (int i = 0; i < rows - 1; ++i)
                std::swap(perm[static_cast<size_t>(i)],
                          perm[static_cast<size_t>(i + rng.uniform_int(rows - i))]);
            const Tensor<T> src = frame.latent;
            for (int r = 0; r < rows; ++r) {
                const int sch = perm[static_cast<size_t>(r)] / q, sy = perm[static_cast<size_t>(r)] % q;
                const int dch = r / q, dy = r % q;
                for (int x = 0; x < q; ++x)
                    out.value()[flat(dch, dy, x)] = src.value()[flat(sch, sy, x)];
            }
            break;
        }
    }
    return out;
}

namespace detail {

template <typename T>
inline double patch_cosine(const std::vector<T> &a, const std::vector<T> &b, const char *what) {
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) {
        std::cerr << "warning: zero-norm " << what << ", score defined as 0\n";
        return 0.0;
    }
    if (na == nb && dot == na) return 1.0;    // identical inputs
    if (na == nb && dot == -na) return -1.0;  // exact negation
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

/// Cosine over the identity-patch region only.
template <typename T>
inline double toy_identity_score(const Tensor<T> &generated, const Tensor<T> &reference,
                                 const DataGeometry &geom = {}) {
    geom.validate();
    check_shape(generated.shape() == reference.shape(), "toy_identity_score: shape mismatch");
    check_shape(generated.numel() == geom.numel(), "toy_identity_score: latent/geometry mismatch");
    const int g = geom.latent_grid, q = geom.quadrant();
    std::vector<T> pa, pb;
    pa.reserve(static_cast<size_t>(geom.patch_cells()));
    pb.reserve(static_cast<size_t>(geom.patch_cells()));
    for (int ch = 0; ch < geom.latent_channels; ++ch)
        for (int y = 0; y < q; ++y)
            for (int x = 0; x < q; ++x) {
                const size_t flat = static_cast<size_t>(ch) * g * g + static_cast<size_t>(y) * g + x;
                pa.push_back(generated.value()[flat]);
                pb.push_back(reference.value()[flat]);
            }
    return detail::patch_cosine(pa, pb, "identity patch");
}

/// Cosine between per-channel (mean, variance) style signatures.
template <typename T>
inline double toy_style_score(const Tensor<T> &a, const Tensor<T> &b, const DataGeometry &geom = {}) {
    geom.validate();
    check_shape(a.shape() == b.shape(), "toy_style_score: shape mismatch");
    check_shape(a.numel() == geom.numel(), "toy_style_score: latent/geometry mismatch");
    const int cells = geom.latent_grid * geom.latent_grid;
    auto signature = [&](const Tensor<T> &t) {
        std::vector<T> sig;
        for (int ch = 0; ch < geom.latent_channels; ++ch) {
            double mu = 0, var = 0;
            const T *p = t.value().data() + static_cast<size_t>(ch) * cells;
            for (int i = 0; i < cells; ++i) mu += p[i];
            mu /= cells;
            for (int i = 0; i < cells; ++i) {
                const double d = p[i] - mu;
                var += d * d;
            }
            sig.push_back(static_cast<T>(mu));
            sig.push_back(static_cast<T>(var / cells));
        }
        return sig;
    };
    return detail::patch_cosine(signature(a), signature(b), "style signature");
}

}  // namespace gsaflow
