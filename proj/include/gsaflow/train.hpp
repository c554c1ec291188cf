#pragma once

// Orchestration: stage-1 consistency training, stage-2 preference tuning, and
// the consistency eval.  Policy lives here (which adapters train, how pools
// are assembled, what gets scored); the mechanics live in flow.hpp / dpo.hpp.

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "config.hpp"
#include "data.hpp"
#include "dpo.hpp"
#include "flow.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace gsaflow {

// Identities reserved for evaluation.  Always the tail of the corpus, so a
// held-out identity's code never appears in any training caption and the
// reference pool is the only way to recover it at sample time.
constexpr int kHoldoutIdentities = 2;

inline DataGeometry geometry_of(const ModelConfig &m) {
    return {m.latent_channels, m.latent_grid, m.text_len};
}

template <typename T>
inline std::vector<StorySequence<T>> train_split(const std::vector<StorySequence<T>> &all) {
    check_contract(static_cast<int>(all.size()) > kHoldoutIdentities,
                   "train_split: corpus smaller than the holdout");
    return {all.begin(), all.end() - kHoldoutIdentities};
}

template <typename T>
inline std::vector<StorySequence<T>> holdout_split(const std::vector<StorySequence<T>> &all) {
    check_contract(static_cast<int>(all.size()) > kHoldoutIdentities,
                   "holdout_split: corpus smaller than the holdout");
    return {all.end() - kHoldoutIdentities, all.end()};
}

namespace detail {

inline void check_finite_loss(double loss, const char *where) {
    if (!std::isfinite(loss))
        throw NumericalError(std::string(where) + ": loss is not finite");
}

}  // namespace detail

struct Stage1Event {
    int step;
    double loss;
};

/// Stage 1: velocity matching on grouped frames, consistency adapter only.
/// The base stays frozen and the preference adapter stays out of the forward
/// pass.  With use_gsa off the reference pool is dropped and each step is
/// plain conditional flow matching on the target frame.
template <typename T, class Model>
inline void run_stage1(Model &model, const std::vector<StorySequence<T>> &data,
                       const RunConfig &cfg, Rng &rng, bool use_gsa = true,
                       const std::function<void(const Stage1Event &)> &on_step = {}) {
    cfg.validate();
    model.set_phi_c_active(true);
    model.set_phi_d_active(false);
    model.set_trainable(ParamSet::base, false);
    model.set_trainable(ParamSet::phi_c, true);
    model.set_trainable(ParamSet::phi_d, false);
    AdamW<T> opt(static_cast<T>(cfg.stage1_lr), static_cast<T>(cfg.adam_beta1),
                 static_cast<T>(cfg.adam_beta2), static_cast<T>(cfg.adam_eps),
                 static_cast<T>(cfg.weight_decay));
    opt.add_params(model.params(ParamSet::phi_c));
    const auto eligible = eligible_sequences(data, cfg.group_size);
    for (int step = 0; step < cfg.stage1_steps; ++step) {
        GroupBatch<T> batch = draw_group_batch(data, eligible, cfg.group_size, rng);
        batch.condition = apply_caption_dropout(batch.condition, cfg.caption_dropout, rng);
        if (!use_gsa) batch.references.clear();
        TapeScope<T> tape;
        Tensor<T> loss = loss_stage1(model, batch);
        backward(loss);
        const double lv = static_cast<double>(loss.item());
        detail::check_finite_loss(lv, "stage 1");
        opt.step();
        if (on_step) on_step({step, lv});
    }
}

/// One pool per non-reference frame: the frame's true latent is the winner,
/// one corrupted copy per mode is a loser.  Losers are redrawn until they
/// score strictly below the winner against the sequence's first frame, so the
/// preference order is sound by construction.
template <typename T>
inline std::vector<PreferencePool<T>> build_preference_pools(
    const std::vector<StorySequence<T>> &data, const RunConfig &cfg, Rng &rng) {
    cfg.validate();
    const DataGeometry geom = geometry_of(cfg.model);
    const int nrefs = cfg.group_size - 1;
    const auto eligible = eligible_sequences(data, cfg.group_size);
    check_contract(!eligible.empty(), "build_preference_pools: no identity has enough frames");
    const LoserMode modes[3] = {LoserMode::identity_swap, LoserMode::noise_inject,
                                LoserMode::patch_scramble};
    std::vector<PreferencePool<T>> pools;
    for (int idx : eligible) {
        const auto &seq = data[static_cast<size_t>(idx)];
        std::vector<RefInput<T>> refs;
        for (int i = 0; i < nrefs; ++i)
            refs.push_back({seq.frames[static_cast<size_t>(i)].latent,
                            seq.frames[static_cast<size_t>(i)].caption});
        const Tensor<T> &anchor = seq.frames[0].latent;
        for (size_t f = static_cast<size_t>(nrefs); f < seq.frames.size(); ++f) {
            const StoryFrame<T> &frame = seq.frames[f];
            PreferencePool<T> pool;
            pool.identity_id = seq.character.identity_id;
            pool.references = refs;
            pool.condition = frame.caption;
            pool.winners.push_back(frame.latent);
            const double w_score = toy_identity_score(frame.latent, anchor, geom);
            for (LoserMode mode : modes) {
                bool ordered = false;
                for (int attempt = 0; attempt < 100 && !ordered; ++attempt) {
                    Tensor<T> loser = corrupt_to_loser(frame, mode, rng, geom);
                    if (toy_identity_score(loser, anchor, geom) < w_score) {
                        pool.losers.push_back(std::move(loser));
                        ordered = true;
                    }
                }
                check_contract(ordered, "build_preference_pools: no ordered loser after 100 draws");
            }
            pools.push_back(std::move(pool));
        }
    }
    return pools;
}

/// Stage 2: assemble pools from the given split, then preference-tune the
/// second adapter on top of the (active, frozen) consistency adapter.
template <typename T, class Model>
inline void run_stage2(Model &model, const std::vector<StorySequence<T>> &data,
                       const RunConfig &cfg, Rng &rng,
                       const std::function<void(const Stage2Event &)> &on_step = {}) {
    cfg.validate();
    model.set_phi_c_active(true);
    const auto pools = build_preference_pools(data, cfg, rng);
    train_stage2(model, pools, cfg.dpo, rng, [&](const Stage2Event &e) {
        detail::check_finite_loss(e.loss, "stage 2");
        if (on_step) on_step(e);
    });
}

struct EvalReport {
    double cids_cross = 0.0;  // identity score of samples against the first reference
    double cids_self = 0.0;   // pairwise identity score among one sequence's samples
    double csd_cross = 0.0;   // style score of samples against the first reference
    double csd_self = 0.0;    // pairwise style score among one sequence's samples
    int sequences = 0;
    int samples = 0;
};

/// Sample the non-reference frames of every eligible sequence and score
/// consistency.  The first group_size - 1 frames condition the pool (when
/// use_gsa is on); per sample the stream draws exactly one latent of noise.
/// `collect`, when given, receives every generated latent in visit order.
template <typename T, class Model>
inline EvalReport run_eval(const Model &model, const std::vector<StorySequence<T>> &data,
                           const RunConfig &cfg, Rng &rng, bool use_gsa = true,
                           std::vector<Tensor<T>> *collect = nullptr) {
    cfg.validate();
    const DataGeometry geom = geometry_of(cfg.model);
    const int nrefs = cfg.group_size - 1;
    const auto eligible = eligible_sequences(data, cfg.group_size);
    check_contract(!eligible.empty(), "run_eval: no sequence is long enough");
    const Shape latent_shape = {cfg.model.latent_numel()};
    EvalReport rep;
    double id_cross = 0, id_self = 0, st_cross = 0, st_self = 0;
    int n_cross = 0, n_self = 0;
    for (int idx : eligible) {
        const auto &seq = data[static_cast<size_t>(idx)];
        ReferenceCache<T> cache;
        const ReferenceCache<T> *cp = nullptr;
        if (use_gsa) {
            std::vector<RefInput<T>> refs;
            for (int i = 0; i < nrefs; ++i)
                refs.push_back({seq.frames[static_cast<size_t>(i)].latent,
                                seq.frames[static_cast<size_t>(i)].caption});
            cache = model.build_reference_cache(refs);
            cp = &cache;
        }
        const Tensor<T> &anchor = seq.frames[0].latent;
        std::vector<Tensor<T>> gen;
        for (size_t f = static_cast<size_t>(nrefs); f < seq.frames.size(); ++f) {
            Tensor<T> z_init = Tensor<T>::randn(latent_shape, rng);
            Tensor<T> z = euler_sample_from(model, z_init, seq.frames[f].caption, cp, cfg.sampler);
            id_cross += toy_identity_score(z, anchor, geom);
            st_cross += toy_style_score(z, anchor, geom);
            ++n_cross;
            gen.push_back(std::move(z));
        }
        for (size_t a = 0; a + 1 < gen.size(); ++a)
            for (size_t b = a + 1; b < gen.size(); ++b) {
                id_self += toy_identity_score(gen[a], gen[b], geom);
                st_self += toy_style_score(gen[a], gen[b], geom);
                ++n_self;
            }
        ++rep.sequences;
        rep.samples += static_cast<int>(gen.size());
        if (collect)
            for (auto &z : gen) collect->push_back(std::move(z));
    }
    rep.cids_cross = id_cross / n_cross;
    rep.csd_cross = st_cross / n_cross;
    if (n_self > 0) {
        rep.cids_self = id_self / n_self;
        rep.csd_self = st_self / n_self;
    }
    return rep;
}

/// Mean implicit-reward accuracy over freshly drawn pairs from every pool.
template <typename T, class Model>
inline double eval_reward_accuracy(Model &model, const std::vector<PreferencePool<T>> &pools,
                                   int pairs_per_pool, Rng &rng) {
    check_contract(!pools.empty(), "eval_reward_accuracy: no pools");
    check_contract(pairs_per_pool >= 1, "eval_reward_accuracy: need at least one pair per pool");
    double acc = 0.0;
    for (const auto &pool : pools) {
        ReferenceCache<T> cache;
        const ReferenceCache<T> *cp = nullptr;
        if (!pool.references.empty()) {
            cache = build_stage2_cache(model, pool.references);
            cp = &cache;
        }
        std::vector<PairSample<T>> pairs;
        pairs.reserve(static_cast<size_t>(pairs_per_pool));
        for (int i = 0; i < pairs_per_pool; ++i) pairs.push_back(sample_pair(pool, rng));
        acc += implicit_reward_accuracy(model, pairs, pool.condition, cp);
    }
    return acc / static_cast<double>(pools.size());
}

}  // namespace gsaflow
