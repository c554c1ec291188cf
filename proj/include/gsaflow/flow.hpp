#pragma once

#include <optional>
#include <type_traits>
#include <vector>

#include "gsaflow/model.hpp"
#include "gsaflow/rng.hpp"
#include "gsaflow/tensor.hpp"

namespace gsaflow {

// Convention used throughout: t = 1 is pure noise, t = 0 is data, and the
// regression target is the constant path velocity eps - z0. The sampler walks
// a uniform grid from 1 down to 0 via z <- z - dt * v.

template <typename T>
struct FlowSample {
    Tensor<T> z0;
    Tensor<T> eps;
    T t = T(0);
    Tensor<T> z_t;
    Tensor<T> v_target;
};

template <typename T>
struct RefFrame {
    Tensor<T> z0;
    std::optional<std::vector<int>> caption;
    T t = T(0);  // references are always clean; kept explicit so callers can assert it
};

template <typename T>
struct GroupBatch {
    FlowSample<T> target;
    std::vector<RefFrame<T>> references;
    std::optional<std::vector<int>> condition;  // target caption (possibly dropped)
    int identity_id = -1;
};

struct SamplerConfig {
    int steps = 50;
    double cfg_scale = 3.5;
    // The unconditional branch always nulls the caption; with this set it
    // also drops the reference pool.
    bool cfg_drop_refs = false;

    void validate() const {
        check_contract(steps >= 1, "sampler config: steps must be >= 1");
        check_contract(cfg_scale >= 0.0, "sampler config: cfg_scale must be >= 0");
    }
};

/// t ~ Sigmoid(N(0,1)); strictly inside (0,1).
template <typename T>
inline T sample_timestep(Rng &rng) {
    return static_cast<T>(detail::stable_sigmoid(rng.normal()));
}

/// Straight-path interpolation; endpoints are exact.
template <typename T>
inline FlowSample<T> interpolate(const Tensor<T> &z0, const Tensor<T> &eps, T t) {
    check_shape(z0.shape() == eps.shape(), "interpolate: z0/eps shape mismatch");
    check_contract(t >= T(0) && t <= T(1), "interpolate: t outside [0,1]");
    FlowSample<T> s;
    s.z0 = z0;
    s.eps = eps;
    s.t = t;
    auto zt = Tensor<T>::make_node(z0.shape());
    auto vt = Tensor<T>::make_node(z0.shape());
    const T one_minus = T(1) - t;
    for (size_t i = 0; i < zt->value.size(); ++i) {
        zt->value[i] = one_minus * z0.value()[i] + t * eps.value()[i];
        vt->value[i] = eps.value()[i] - z0.value()[i];
    }
    s.z_t = Tensor<T>(zt);
    s.v_target = Tensor<T>(vt);
    return s;
}

/// Mean squared velocity-matching error for one sample.
template <typename T, class Model>
inline Tensor<T> loss_flow_matching(const Model &model, const FlowSample<T> &sample,
                                    const std::optional<std::vector<int>> &caption,
                                    const std::type_identity_t<ReferenceCache<T>> *cache = nullptr) {
    Tensor<T> v = model.forward_velocity(sample.z_t, sample.t, caption, 0, cache);
    return mse(v, sample.v_target);
}

/// With probability p the caption collapses to the null caption.
inline std::optional<std::vector<int>> apply_caption_dropout(
    const std::optional<std::vector<int>> &caption, double p, Rng &rng) {
    check_contract(p >= 0.0 && p <= 1.0, "caption dropout: p outside [0,1]");
    if (rng.uniform() < p) return std::nullopt;
    return caption;
}

/// Assemble one training group: random target timestep, clean references.
/// Draw order: t, then eps.
template <typename T>
inline GroupBatch<T> make_group_batch(const Tensor<T> &target_z0,
                                      const std::optional<std::vector<int>> &condition,
                                      std::vector<RefFrame<T>> references, int identity_id,
                                      Rng &rng) {
    GroupBatch<T> batch;
    T t = sample_timestep<T>(rng);
    Tensor<T> eps = Tensor<T>::randn(target_z0.shape(), rng);
    batch.target = interpolate(target_z0, eps, t);
    batch.references = std::move(references);
    for (const auto &r : batch.references)
        check_contract(r.t == T(0), "group batch: reference timestep must be exactly 0");
    batch.condition = condition;
    batch.identity_id = identity_id;
    return batch;
}

/// Stage-1 objective: velocity error on the target only, conditioned on the
/// clean-reference pool. References never contribute their own loss term.
template <typename T, class Model>
inline Tensor<T> loss_stage1(const Model &model, const GroupBatch<T> &batch) {
    std::vector<RefInput<T>> refs;
    refs.reserve(batch.references.size());
    for (const auto &r : batch.references) {
        check_contract(r.t == T(0), "loss_stage1: reference timestep must be exactly 0");
        refs.push_back({r.z0, r.caption});
    }
    if (refs.empty()) return loss_flow_matching(model, batch.target, batch.condition, nullptr);
    ReferenceCache<T> cache = model.build_reference_cache(refs);
    return loss_flow_matching(model, batch.target, batch.condition, &cache);
}

/// Euler integration core from a caller-supplied start point at t = 1.
template <typename T, class Model>
inline Tensor<T> euler_sample_from(const Model &model, const Tensor<T> &z_init,
                                   const std::optional<std::vector<int>> &caption,
                                   const std::type_identity_t<ReferenceCache<T>> *cache,
                                   const SamplerConfig &cfg) {
    cfg.validate();
    NoGradScope<T> no_grad;
    const T dt = T(1) / static_cast<T>(cfg.steps);
    const T scale = static_cast<T>(cfg.cfg_scale);
    Tensor<T> z = z_init.clone();
    for (int k = 0; k < cfg.steps; ++k) {
        T t = T(1) - static_cast<T>(k) * dt;
        Tensor<T> v_cond = model.forward_velocity(z, t, caption, 0, cache);
        Tensor<T> v;
        if (scale == T(1)) {
            v = v_cond;  // CFG identity: never touch the unconditional branch
        } else {
            const ReferenceCache<T> *uncond_cache = cfg.cfg_drop_refs ? nullptr : cache;
            Tensor<T> v_uncond = model.forward_velocity(z, t, std::nullopt, 0, uncond_cache);
            v = add(v_uncond, mul_scalar(sub(v_cond, v_uncond), scale));
        }
        for (size_t i = 0; i < z.value().size(); ++i) z.value()[i] -= dt * v.value()[i];
    }
    return z;
}

/// Full sampler: z ~ N(0,1) at t = 1, guided walk down to t = 0.
template <typename T, class Model>
inline Tensor<T> euler_sample(const Model &model, const std::optional<std::vector<int>> &caption,
                              const std::vector<RefInput<T>> &refs, const SamplerConfig &cfg,
                              Rng &rng, const Shape &latent_shape) {
    cfg.validate();
    NoGradScope<T> no_grad;
    Tensor<T> z_init = Tensor<T>::randn(latent_shape, rng);
    if (refs.empty()) return euler_sample_from(model, z_init, caption, nullptr, cfg);
    ReferenceCache<T> cache = model.build_reference_cache(refs);
    return euler_sample_from(model, z_init, caption, &cache, cfg);
}

}  // namespace gsaflow
