#pragma once

// Preference-tuning stage.  A second adapter set learns to rank a "winner"
// rendition of a frame above a corrupted "loser" by comparing velocity-matching
// errors against a reference policy.  The reference policy is the same network
// with the preference adapter switched off, so no weight copy is ever made.

#include <functional>
#include <optional>
#include <vector>

#include "flow.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace gsaflow {

struct DpoConfig {
    double beta = 1800.0;  // spread multiplier on the error gap
    double lr = 5e-6;
    int steps = 2000;

    void validate() const {
        check_contract(beta >= 0.0, "dpo config: beta must be non-negative");
        check_contract(lr > 0.0, "dpo config: lr must be positive");
        check_contract(steps >= 0, "dpo config: steps must be non-negative");
    }
};

/// One identity's pool of ranked latents plus its conditioning context.
template <typename T>
struct PreferencePool {
    std::vector<Tensor<T>> winners;
    std::vector<Tensor<T>> losers;
    std::optional<std::vector<int>> condition;
    std::vector<RefInput<T>> references;
    int identity_id = -1;
};

/// A drawn pair, noised at a shared timestep with per-image noise.
template <typename T>
struct PairSample {
    FlowSample<T> winner;
    FlowSample<T> loser;
};

/// Uniform draw over winners x losers.  Consumes the stream in a fixed order:
/// pair index, then t, then winner noise, then loser noise.
template <typename T>
inline PairSample<T> sample_pair(const PreferencePool<T> &pool, Rng &rng) {
    check_contract(!pool.winners.empty() && !pool.losers.empty(),
                   "sample_pair: pool needs at least one winner and one loser");
    const int nl = static_cast<int>(pool.losers.size());
    const int idx = rng.uniform_int(static_cast<int>(pool.winners.size()) * nl);
    const Tensor<T> &w = pool.winners[static_cast<size_t>(idx / nl)];
    const Tensor<T> &l = pool.losers[static_cast<size_t>(idx % nl)];
    const T t = sample_timestep<T>(rng);
    Tensor<T> eps_w = Tensor<T>::randn(w.shape(), rng);
    Tensor<T> eps_l = Tensor<T>::randn(l.shape(), rng);
    return {interpolate(w, eps_w, t), interpolate(l, eps_l, t)};
}

namespace detail {

/// Flip the preference adapter off for a scope, restoring the prior state.
template <class Model>
struct PhiDOff {
    Model &m;
    bool prev;
    explicit PhiDOff(Model &model) : m(model), prev(model.phi_d_active()) {
        m.set_phi_d_active(false);
    }
    ~PhiDOff() { m.set_phi_d_active(prev); }
    PhiDOff(const PhiDOff &) = delete;
    PhiDOff &operator=(const PhiDOff &) = delete;
};

}  // namespace detail

/// err_ref - err_theta for one noised latent: positive when the full policy
/// explains the image better than the adapter-free reference policy.  The
/// reference branch is evaluated without gradients.
template <typename T, class Model>
inline Tensor<T> log_ratio(Model &model, const FlowSample<T> &sample,
                           const std::optional<std::vector<int>> &caption,
                           const std::type_identity_t<ReferenceCache<T>> *cache = nullptr) {
    Tensor<T> err_theta = loss_flow_matching(model, sample, caption, cache);
    T err_ref;
    {
        NoGradScope<T> no_grad;
        detail::PhiDOff<Model> off(model);
        err_ref = loss_flow_matching(model, sample, caption, cache).item();
    }
    return sub(Tensor<T>::scalar(err_ref), err_theta);
}

/// -log sigmoid(beta * (delta_w - delta_l)).  Both branches see the same
/// timestep, caption, and reference rows; only the noise differs per image.
template <typename T, class Model>
inline Tensor<T> loss_dpo(Model &model, const PairSample<T> &pair,
                          const std::optional<std::vector<int>> &caption, T beta,
                          const std::type_identity_t<ReferenceCache<T>> *cache = nullptr) {
    check_contract(pair.winner.t == pair.loser.t, "loss_dpo: pair must share one timestep");
    Tensor<T> dw = log_ratio(model, pair.winner, caption, cache);
    Tensor<T> dl = log_ratio(model, pair.loser, caption, cache);
    return neg(log_sigmoid(mul_scalar(sub(dw, dl), beta)));
}

/// Fraction of pairs whose winner earns the larger implicit reward; exact
/// ties count as half a hit.
template <typename T, class Model>
inline double implicit_reward_accuracy(Model &model, const std::vector<PairSample<T>> &pairs,
                                       const std::optional<std::vector<int>> &caption,
                                       const std::type_identity_t<ReferenceCache<T>> *cache = nullptr) {
    check_contract(!pairs.empty(), "implicit_reward_accuracy: no pairs given");
    NoGradScope<T> no_grad;
    double hits = 0.0;
    for (const auto &p : pairs) {
        T dw = log_ratio(model, p.winner, caption, cache).item();
        T dl = log_ratio(model, p.loser, caption, cache).item();
        if (dw > dl)
            hits += 1.0;
        else if (dw == dl)
            hits += 0.5;
    }
    return hits / static_cast<double>(pairs.size());
}

/// The reference rows are produced by the shared trunk: the preference adapter
/// is held off while encoding them, so both policies read identical rows and
/// the cache carries no gradient path.
template <typename T, class Model>
inline ReferenceCache<T> build_stage2_cache(Model &model, const std::vector<RefInput<T>> &refs) {
    detail::PhiDOff<Model> off(model);
    return model.build_reference_cache(refs);
}

struct Stage2Event {
    int step;
    double loss;
};

/// Preference-tune the second adapter set only.  Everything else is frozen;
/// per-step draw order: pool index, then the sample_pair stream.
template <typename T, class Model>
inline void train_stage2(Model &model, const std::vector<PreferencePool<T>> &pools,
                         const DpoConfig &cfg, Rng &rng,
                         const std::function<void(const Stage2Event &)> &on_step = {}) {
    cfg.validate();
    check_contract(!pools.empty(), "train_stage2: no preference pools");
    model.set_phi_d_active(true);
    model.set_trainable(ParamSet::base, false);
    model.set_trainable(ParamSet::phi_c, false);
    model.set_trainable(ParamSet::phi_d, true);
    AdamW<T> opt(static_cast<T>(cfg.lr));
    opt.add_params(model.params(ParamSet::phi_d));
    for (int step = 0; step < cfg.steps; ++step) {
        const auto &pool = pools[static_cast<size_t>(rng.uniform_int(static_cast<int>(pools.size())))];
        PairSample<T> pair = sample_pair(pool, rng);
        ReferenceCache<T> cache;
        const ReferenceCache<T> *cp = nullptr;
        if (!pool.references.empty()) {
            cache = build_stage2_cache(model, pool.references);
            cp = &cache;
        }
        TapeScope<T> tape;
        Tensor<T> loss = loss_dpo(model, pair, pool.condition, static_cast<T>(cfg.beta), cp);
        backward(loss);
        opt.step();
        if (on_step) on_step({step, static_cast<double>(loss.item())});
    }
}

}  // namespace gsaflow
