#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "gsaflow/rng.hpp"
#include "gsaflow/tensor.hpp"

namespace gsaflow {

// ---------------------------------------------------------------------------
// Configuration for the miniature velocity transformer. Defaults describe the
// desk-scale backbone: 8x8x4 latents, patch 2 -> 16 image tokens, 8 text
// tokens, width 64 over 4 heads, 4 blocks.
// ---------------------------------------------------------------------------
struct ModelConfig {
    int hidden = 64;
    int heads = 4;
    int depth = 4;
    int latent_grid = 8;
    int latent_channels = 4;
    int patch = 2;
    int text_len = 8;
    int vocab = 64;
    int lora_rank = 16;
    int lora_alpha = 16;
    int max_samples = 8;
    int time_freqs = 32;
    bool qk_norm = true;
    // References run image-only passes by default; with this set their own
    // forward includes text tokens (the shared pool stays image-only either way).
    bool ref_with_text = false;
    // Keep the reference-cache subgraph on the tape during training.
    bool ref_grad = false;
    // How references are tagged by the sample-index embedding: one shared tag
    // keeps attention invariant to reference order, distinct tags trade that
    // invariance for per-slot identity.
    enum class RefIndexMode { shared, distinct };
    RefIndexMode ref_index_mode = RefIndexMode::shared;

    int head_dim() const { return hidden / heads; }
    int tokens_side() const { return latent_grid / patch; }
    int img_tokens() const { return tokens_side() * tokens_side(); }
    int patch_dim() const { return patch * patch * latent_channels; }
    int seq_len() const { return text_len + img_tokens(); }
    int latent_numel() const { return latent_grid * latent_grid * latent_channels; }

    void validate() const {
        check_contract(hidden > 0 && heads > 0 && hidden % heads == 0,
                       "model config: hidden must be a positive multiple of heads");
        check_contract(depth > 0, "model config: depth must be positive");
        check_contract(latent_grid > 0 && patch > 0 && latent_grid % patch == 0,
                       "model config: latent_grid must be a positive multiple of patch");
        check_contract(latent_channels > 0, "model config: latent_channels must be positive");
        check_contract(text_len > 0 && vocab > 1, "model config: text stream is degenerate");
        check_contract(lora_rank > 0 && lora_alpha > 0, "model config: lora rank/alpha must be positive");
        check_contract(max_samples >= 2, "model config: need sample tags for target and references");
        check_contract(2 * time_freqs == hidden,
                       "model config: time features must match hidden width");
    }
};

enum class ParamSet { base, phi_c, phi_d };

// ---------------------------------------------------------------------------
// Group-shared attention. `ks`/`vs` hold the target's rows first, then any
// number of reference segments; every query attends over the concatenation.
// With no reference segments this is exactly standard self-attention.
// ---------------------------------------------------------------------------
template <typename T>
inline Tensor<T> gsa_attention(const Tensor<T> &q, const std::vector<Tensor<T>> &ks,
                               const std::vector<Tensor<T>> &vs, int heads) {
    check_contract(!ks.empty() && ks.size() == vs.size(),
                   "gsa_attention: key/value segment lists must match and be non-empty");
    const int hidden = q.dim(1);
    check_contract(hidden % heads == 0, "gsa_attention: width not divisible by heads");
    const int d = hidden / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(d));
    Tensor<T> k_all = ks.size() == 1 ? ks[0] : concat(ks, 0);
    Tensor<T> v_all = vs.size() == 1 ? vs[0] : concat(vs, 0);
    check_shape(k_all.dim(1) == hidden && v_all.dim(1) == hidden &&
                    k_all.dim(0) == v_all.dim(0),
                "gsa_attention: segment shapes disagree with query width");
    std::vector<Tensor<T>> heads_out;
    heads_out.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor<T> qh = mul_scalar(slice_cols(q, h * d, (h + 1) * d), scale);
        Tensor<T> kh = slice_cols(k_all, h * d, (h + 1) * d);
        Tensor<T> vh = slice_cols(v_all, h * d, (h + 1) * d);
        Tensor<T> w = softmax_rows(matmul(qh, transpose(kh)));
        heads_out.push_back(matmul(w, vh));
    }
    return heads_out.size() == 1 ? heads_out[0] : concat(heads_out, 1);
}

template <typename T>
struct Linear {
    Tensor<T> w;  // [out, in]
    Tensor<T> b;  // [out]

    static Linear make(int in, int out, Rng &rng, T w_std) {
        Linear l;
        l.w = w_std == T(0) ? Tensor<T>::zeros({out, in}) : Tensor<T>::randn({out, in}, rng, w_std);
        l.b = Tensor<T>::zeros({out});
        return l;
    }

    Tensor<T> forward(const Tensor<T> &x) const {
        return add_rowvec(matmul(x, transpose(w)), b);
    }
};

// Base weight plus the two low-rank adapter pairs. B matrices start at zero,
// so a freshly attached adapter is an exact no-op.
template <typename T>
struct LoraLinear {
    Tensor<T> w, b;
    Tensor<T> a_c, b_c;  // conditioning adapter
    Tensor<T> a_d, b_d;  // preference adapter
    T scaling = T(0);    // alpha / rank

    static LoraLinear make(int in, int out, int rank, int alpha, Rng &rng, T w_std) {
        LoraLinear l;
        l.w = w_std == T(0) ? Tensor<T>::zeros({out, in}) : Tensor<T>::randn({out, in}, rng, w_std);
        l.b = Tensor<T>::zeros({out});
        l.a_c = Tensor<T>::randn({rank, in}, rng, T(0.02));
        l.b_c = Tensor<T>::zeros({out, rank});
        l.a_d = Tensor<T>::randn({rank, in}, rng, T(0.02));
        l.b_d = Tensor<T>::zeros({out, rank});
        l.scaling = static_cast<T>(alpha) / static_cast<T>(rank);
        return l;
    }

    Tensor<T> forward(const Tensor<T> &x, bool c_active, bool d_active) const {
        Tensor<T> y = matmul(x, transpose(w));
        if (c_active)
            y = add(y, mul_scalar(matmul(matmul(x, transpose(a_c)), transpose(b_c)), scaling));
        if (d_active)
            y = add(y, mul_scalar(matmul(matmul(x, transpose(a_d)), transpose(b_d)), scaling));
        return add_rowvec(y, b);
    }
};

template <typename T>
struct Block {
    LoraLinear<T> q, k, v, o;
    LoraLinear<T> ffn1, ffn2;
    LoraLinear<T> mod;              // silu(time) -> 6*hidden modulation
    Tensor<T> q_gain, k_gain;       // per-head rms-norm scales [head_dim]
};

// One reference sample as the cache builder consumes it: its clean latent and
// its own caption (the caption shapes the reference's internal pass even when
// reference text rows are excluded from the shared pool).
template <typename T>
struct RefInput {
    Tensor<T> z0;
    std::optional<std::vector<int>> caption;
};

// Per-layer attention-ready reference rows: keys are post-norm, values raw.
// Row order is reference order; each reference contributes its image tokens
// (plus text tokens when the model is configured for that).
template <typename T>
struct ReferenceCache {
    int num_refs = 0;
    int rows_per_ref = 0;
    std::vector<Tensor<T>> k;  // depth x [num_refs*rows_per_ref, hidden]
    std::vector<Tensor<T>> v;
    uint64_t fingerprint = 0;
};

// ---------------------------------------------------------------------------
// The velocity field v(z_t, t, caption, sample tag | cache). Latents are flat
// [channels * grid * grid] in channel-major order.
// ---------------------------------------------------------------------------
template <typename T>
class VelocityModel {
  public:
    VelocityModel(const ModelConfig &cfg, uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        const int h = cfg_.hidden, pd = cfg_.patch_dim(), side = cfg_.tokens_side();
        // The base never trains, so its init must leave every path carrying
        // O(1) signal for the adapters to steer: 1/sqrt(fan_in) per linear.
        auto fan = [](int in) { return T(1) / std::sqrt(static_cast<T>(in)); };
        const T ws = fan(h);

        token_emb_ = Tensor<T>::randn({cfg_.vocab, h}, rng, ws);
        text_pos_ = Tensor<T>::randn({cfg_.text_len, h}, rng, ws);
        row_pos_ = Tensor<T>::randn({side, h}, rng, ws);
        col_pos_ = Tensor<T>::randn({side, h}, rng, ws);
        sample_emb_ = Tensor<T>::randn({cfg_.max_samples, h}, rng, ws);
        patch_embed_ = Linear<T>::make(pd, h, rng, fan(pd));
        time_mlp1_ = Linear<T>::make(2 * cfg_.time_freqs, h, rng, fan(2 * cfg_.time_freqs));
        time_mlp2_ = Linear<T>::make(h, h, rng, ws);
        final_mod_ = Linear<T>::make(h, 2 * h, rng, ws);
        head_ = Linear<T>::make(h, pd, rng, ws);

        blocks_.reserve(static_cast<size_t>(cfg_.depth));
        for (int i = 0; i < cfg_.depth; ++i) {
            Block<T> blk;
            blk.q = LoraLinear<T>::make(h, h, cfg_.lora_rank, cfg_.lora_alpha, rng, ws);
            blk.k = LoraLinear<T>::make(h, h, cfg_.lora_rank, cfg_.lora_alpha, rng, ws);
            blk.v = LoraLinear<T>::make(h, h, cfg_.lora_rank, cfg_.lora_alpha, rng, ws);
            blk.o = LoraLinear<T>::make(h, h, cfg_.lora_rank, cfg_.lora_alpha, rng, ws);
            blk.ffn1 = LoraLinear<T>::make(h, 4 * h, cfg_.lora_rank, cfg_.lora_alpha, rng, ws);
            blk.ffn2 = LoraLinear<T>::make(4 * h, h, cfg_.lora_rank, cfg_.lora_alpha, rng, fan(4 * h));
            blk.mod = LoraLinear<T>::make(h, 6 * h, cfg_.lora_rank, cfg_.lora_alpha, rng, T(0));
            blk.q_gain = Tensor<T>::full({cfg_.head_dim()}, T(1));
            blk.k_gain = Tensor<T>::full({cfg_.head_dim()}, T(1));
            blocks_.push_back(blk);
        }

        build_patch_maps();
        build_registry();
    }

    const ModelConfig &config() const { return cfg_; }

    bool phi_c_active() const { return phi_c_active_; }
    bool phi_d_active() const { return phi_d_active_; }
    void set_phi_c_active(bool on) { phi_c_active_ = on; }
    void set_phi_d_active(bool on) { phi_d_active_ = on; }

    const std::vector<Tensor<T>> &params(ParamSet set) const {
        return set == ParamSet::base ? base_params_
                                     : set == ParamSet::phi_c ? phi_c_params_ : phi_d_params_;
    }
    const std::vector<std::string> &param_names(ParamSet set) const {
        return set == ParamSet::base ? base_names_
                                     : set == ParamSet::phi_c ? phi_c_names_ : phi_d_names_;
    }

    void set_trainable(ParamSet set, bool on) {
        for (auto &p : const_cast<std::vector<Tensor<T>> &>(params(set)))
            p.set_requires_grad(on);
    }

    uint64_t hash_params(ParamSet set) const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto &p : params(set))
            h = fnv1a(p.value().data(), p.value().size() * sizeof(T), h);
        return h;
    }

    /// Additive noise on every parameter; used by tests to break the
    /// zero-initialized symmetry before gradient checks.
    void jitter_params(Rng &rng, T scale) {
        for (auto set : {ParamSet::base, ParamSet::phi_c, ParamSet::phi_d})
            for (auto &p : const_cast<std::vector<Tensor<T>> &>(params(set)))
                for (auto &v : p.value()) v += static_cast<T>(rng.normal()) * scale;
    }

    using RefInput = gsaflow::RefInput<T>;

    /// Run each reference through the trunk at t = 0 and collect its
    /// attention-ready rows per layer. Honors cfg.ref_grad; with it off the
    /// cache is constant and the tape never sees the reference subgraph.
    ReferenceCache<T> build_reference_cache(const std::vector<RefInput> &refs) const {
        if (cfg_.ref_grad) return build_cache_impl(refs);
        NoGradScope<T> no_grad;
        return build_cache_impl(refs);
    }

    /// Velocity prediction for one sample. `cache` may be null (no shared
    /// pool) or hold zero references (equivalent by construction).
    Tensor<T> forward_velocity(const Tensor<T> &z_t, T t,
                               const std::optional<std::vector<int>> &caption, int sample_index,
                               const ReferenceCache<T> *cache = nullptr) const {
        check_shape(z_t.numel() == cfg_.latent_numel(),
                    "forward_velocity: latent has wrong size " + shape_str(z_t.shape()));
        check_contract(sample_index >= 0 && sample_index < cfg_.max_samples,
                       "forward_velocity: sample index out of range");
        if (cache)
            check_contract(static_cast<int>(cache->k.size()) == cfg_.depth || cache->num_refs == 0,
                           "forward_velocity: cache depth mismatch");

        Tensor<T> stv = silu(time_vector(t));
        Tensor<T> x = assemble_tokens(z_t, caption, sample_index);
        for (int l = 0; l < cfg_.depth; ++l) {
            const bool pool = cache && cache->num_refs > 0;
            x = block_forward(blocks_[static_cast<size_t>(l)], x, stv,
                              pool ? &cache->k[static_cast<size_t>(l)] : nullptr,
                              pool ? &cache->v[static_cast<size_t>(l)] : nullptr);
        }
        Tensor<T> fm = final_mod_.forward(stv);
        Tensor<T> shift = reshape(slice_cols(fm, 0, cfg_.hidden), {cfg_.hidden});
        Tensor<T> scl = reshape(slice_cols(fm, cfg_.hidden, 2 * cfg_.hidden), {cfg_.hidden});
        Tensor<T> y = add_rowvec(mul_rowvec(layer_norm(x), add_scalar(scl, T(1))), shift);
        Tensor<T> out = head_.forward(slice_rows(y, cfg_.text_len, cfg_.seq_len()));
        return permute_flat(reshape(out, {cfg_.img_tokens() * cfg_.patch_dim()}), unpatch_index_,
                            {cfg_.latent_numel()});
    }

  private:
    ModelConfig cfg_;
    bool phi_c_active_ = true;
    bool phi_d_active_ = false;

    Tensor<T> token_emb_, text_pos_, row_pos_, col_pos_, sample_emb_;
    Linear<T> patch_embed_, time_mlp1_, time_mlp2_, final_mod_, head_;
    std::vector<Block<T>> blocks_;

    std::vector<int64_t> patch_index_, unpatch_index_;
    std::vector<int> row_ids_, col_ids_;

    std::vector<Tensor<T>> base_params_, phi_c_params_, phi_d_params_;
    std::vector<std::string> base_names_, phi_c_names_, phi_d_names_;

    void build_patch_maps() {
        const int p = cfg_.patch, side = cfg_.tokens_side(), c = cfg_.latent_channels,
                  g = cfg_.latent_grid, pd = cfg_.patch_dim();
        patch_index_.assign(static_cast<size_t>(cfg_.img_tokens()) * pd, 0);
        unpatch_index_.assign(static_cast<size_t>(cfg_.latent_numel()), 0);
        for (int pr = 0; pr < side; ++pr)
            for (int pc = 0; pc < side; ++pc)
                for (int ch = 0; ch < c; ++ch)
                    for (int dr = 0; dr < p; ++dr)
                        for (int dc = 0; dc < p; ++dc) {
                            int64_t tok = pr * side + pc;
                            int64_t e = ch * p * p + dr * p + dc;
                            int64_t flat = static_cast<int64_t>(ch) * g * g + (pr * p + dr) * g +
                                           (pc * p + dc);
                            patch_index_[static_cast<size_t>(tok * pd + e)] = flat;
                            unpatch_index_[static_cast<size_t>(flat)] = tok * pd + e;
                        }
        for (int pr = 0; pr < side; ++pr)
            for (int pc = 0; pc < side; ++pc) {
                row_ids_.push_back(pr);
                col_ids_.push_back(pc);
            }
    }

    void reg(ParamSet set, const std::string &name, const Tensor<T> &t) {
        auto &ps = const_cast<std::vector<Tensor<T>> &>(params(set));
        auto &ns = const_cast<std::vector<std::string> &>(param_names(set));
        ps.push_back(t);
        ns.push_back(name);
    }

    void reg_lora(const std::string &prefix, const LoraLinear<T> &l) {
        reg(ParamSet::base, prefix + ".w", l.w);
        reg(ParamSet::base, prefix + ".b", l.b);
        reg(ParamSet::phi_c, prefix + ".a_c", l.a_c);
        reg(ParamSet::phi_c, prefix + ".b_c", l.b_c);
        reg(ParamSet::phi_d, prefix + ".a_d", l.a_d);
        reg(ParamSet::phi_d, prefix + ".b_d", l.b_d);
    }

    void build_registry() {
        reg(ParamSet::base, "token_emb", token_emb_);
        reg(ParamSet::base, "text_pos", text_pos_);
        reg(ParamSet::base, "row_pos", row_pos_);
        reg(ParamSet::base, "col_pos", col_pos_);
        reg(ParamSet::base, "sample_emb", sample_emb_);
        reg(ParamSet::base, "patch_embed.w", patch_embed_.w);
        reg(ParamSet::base, "patch_embed.b", patch_embed_.b);
        reg(ParamSet::base, "time_mlp1.w", time_mlp1_.w);
        reg(ParamSet::base, "time_mlp1.b", time_mlp1_.b);
        reg(ParamSet::base, "time_mlp2.w", time_mlp2_.w);
        reg(ParamSet::base, "time_mlp2.b", time_mlp2_.b);
        reg(ParamSet::base, "final_mod.w", final_mod_.w);
        reg(ParamSet::base, "final_mod.b", final_mod_.b);
        reg(ParamSet::base, "head.w", head_.w);
        reg(ParamSet::base, "head.b", head_.b);
        for (int i = 0; i < cfg_.depth; ++i) {
            const std::string p = "block" + std::to_string(i);
            auto &blk = blocks_[static_cast<size_t>(i)];
            reg_lora(p + ".q", blk.q);
            reg_lora(p + ".k", blk.k);
            reg_lora(p + ".v", blk.v);
            reg_lora(p + ".o", blk.o);
            reg_lora(p + ".ffn1", blk.ffn1);
            reg_lora(p + ".ffn2", blk.ffn2);
            reg_lora(p + ".mod", blk.mod);
            if (cfg_.qk_norm) {
                reg(ParamSet::base, p + ".q_gain", blk.q_gain);
                reg(ParamSet::base, p + ".k_gain", blk.k_gain);
            }
        }
    }

    Tensor<T> time_vector(T t) const {
        const int f = cfg_.time_freqs;
        std::vector<T> feat(static_cast<size_t>(2 * f));
        for (int i = 0; i < f; ++i) {
            T w = std::exp(static_cast<T>(-std::log(10000.0) * i / f));
            T arg = t * T(1000) * w;
            feat[static_cast<size_t>(2 * i)] = std::sin(arg);
            feat[static_cast<size_t>(2 * i + 1)] = std::cos(arg);
        }
        Tensor<T> ft = Tensor<T>::from_vec({1, 2 * f}, std::move(feat));
        return time_mlp2_.forward(silu(time_mlp1_.forward(ft)));
    }

    Tensor<T> assemble_tokens(const Tensor<T> &z, const std::optional<std::vector<int>> &caption,
                              int sample_index) const {
        std::vector<int> ids;
        if (caption) {
            check_contract(static_cast<int>(caption->size()) == cfg_.text_len,
                           "caption length must equal text_len");
            ids = *caption;
        } else {
            ids.assign(static_cast<size_t>(cfg_.text_len), 0);  // null caption token
        }
        Tensor<T> sample_vec =
            reshape(embedding(sample_emb_, std::vector<int>{sample_index}), {cfg_.hidden});
        Tensor<T> text = add_rowvec(add(embedding(token_emb_, ids), text_pos_), sample_vec);

        Tensor<T> patches =
            reshape(permute_flat(z, patch_index_, {cfg_.img_tokens() * cfg_.patch_dim()}),
                    {cfg_.img_tokens(), cfg_.patch_dim()});
        Tensor<T> img = patch_embed_.forward(patches);
        img = add(img, add(embedding(row_pos_, row_ids_), embedding(col_pos_, col_ids_)));
        img = add_rowvec(img, sample_vec);
        return concat_seq<T>({text, img});
    }

    // Image-only token sequence for a reference's self-contained pass.
    Tensor<T> assemble_image_tokens(const Tensor<T> &z, int sample_index) const {
        Tensor<T> sample_vec =
            reshape(embedding(sample_emb_, std::vector<int>{sample_index}), {cfg_.hidden});
        Tensor<T> patches =
            reshape(permute_flat(z, patch_index_, {cfg_.img_tokens() * cfg_.patch_dim()}),
                    {cfg_.img_tokens(), cfg_.patch_dim()});
        Tensor<T> img = patch_embed_.forward(patches);
        img = add(img, add(embedding(row_pos_, row_ids_), embedding(col_pos_, col_ids_)));
        return add_rowvec(img, sample_vec);
    }

    Tensor<T> modulate(const Tensor<T> &x, const Tensor<T> &shift, const Tensor<T> &scale) const {
        return add_rowvec(mul_rowvec(x, add_scalar(scale, T(1))), shift);
    }

    Tensor<T> block_forward(const Block<T> &blk, const Tensor<T> &x, const Tensor<T> &stv,
                            const Tensor<T> *pool_k, const Tensor<T> *pool_v) const {
        const int h = cfg_.hidden;
        const bool ca = phi_c_active_, da = phi_d_active_;
        Tensor<T> m = blk.mod.forward(stv, ca, da);
        auto mv = [&](int i) { return reshape(slice_cols(m, i * h, (i + 1) * h), {h}); };
        Tensor<T> shift1 = mv(0), scale1 = mv(1), gate1 = mv(2);
        Tensor<T> shift2 = mv(3), scale2 = mv(4), gate2 = mv(5);

        Tensor<T> n1 = modulate(layer_norm(x), shift1, scale1);
        Tensor<T> q = blk.q.forward(n1, ca, da);
        Tensor<T> k = blk.k.forward(n1, ca, da);
        Tensor<T> v = blk.v.forward(n1, ca, da);
        if (cfg_.qk_norm) {
            q = headwise_rms(q, blk.q_gain);
            k = headwise_rms(k, blk.k_gain);
        }
        std::vector<Tensor<T>> ks{k}, vs{v};
        if (pool_k) {
            ks.push_back(*pool_k);
            vs.push_back(*pool_v);
        }
        Tensor<T> attn = blk.o.forward(gsa_attention(q, ks, vs, cfg_.heads), ca, da);
        Tensor<T> x1 = add(x, mul_rowvec(attn, gate1));

        Tensor<T> n2 = modulate(layer_norm(x1), shift2, scale2);
        Tensor<T> f = blk.ffn2.forward(gelu(blk.ffn1.forward(n2, ca, da)), ca, da);
        return add(x1, mul_rowvec(f, gate2));
    }

    // rms-normalize each head's slice of [S, hidden] with a shared [head_dim]
    // gain, reusing the row-wise kernel via a reshape to [S*heads, head_dim].
    Tensor<T> headwise_rms(const Tensor<T> &x, const Tensor<T> &gain) const {
        const int s = x.dim(0), d = cfg_.head_dim();
        Tensor<T> grouped = reshape(x, {s * cfg_.heads, d});
        return reshape(rms_norm(grouped, gain), {s, cfg_.hidden});
    }

    // Rows the target will attend to: always the image rows, never text.
    void collect_rows(const Tensor<T> &k, const Tensor<T> &v, std::vector<Tensor<T>> &k_rows,
                      std::vector<Tensor<T>> &v_rows) const {
        if (cfg_.ref_with_text) {
            k_rows.push_back(slice_rows(k, cfg_.text_len, cfg_.seq_len()));
            v_rows.push_back(slice_rows(v, cfg_.text_len, cfg_.seq_len()));
        } else {
            k_rows.push_back(k);
            v_rows.push_back(v);
        }
    }

    ReferenceCache<T> build_cache_impl(const std::vector<RefInput> &refs) const {
        check_contract(!refs.empty(),
                       "build_reference_cache: empty reference list, pass no cache instead");
        ReferenceCache<T> cache;
        cache.num_refs = static_cast<int>(refs.size());
        cache.rows_per_ref = cfg_.img_tokens();
        if (cfg_.ref_index_mode == ModelConfig::RefIndexMode::distinct)
            check_contract(1 + cache.num_refs <= cfg_.max_samples,
                           "build_reference_cache: not enough sample tags for distinct mode");

        std::vector<std::vector<Tensor<T>>> k_rows(static_cast<size_t>(cfg_.depth));
        std::vector<std::vector<Tensor<T>>> v_rows(static_cast<size_t>(cfg_.depth));
        for (size_t j = 0; j < refs.size(); ++j) {
            const int tag = cfg_.ref_index_mode == ModelConfig::RefIndexMode::shared
                                ? 1
                                : 1 + static_cast<int>(j);
            Tensor<T> stv = silu(time_vector(T(0)));
            Tensor<T> x = cfg_.ref_with_text ? assemble_tokens(refs[j].z0, refs[j].caption, tag)
                                             : assemble_image_tokens(refs[j].z0, tag);
            for (int l = 0; l < cfg_.depth; ++l) {
                const auto &blk = blocks_[static_cast<size_t>(l)];
                const bool ca = phi_c_active_, da = phi_d_active_;
                const int h = cfg_.hidden;
                Tensor<T> m = blk.mod.forward(stv, ca, da);
                auto mv = [&](int i) { return reshape(slice_cols(m, i * h, (i + 1) * h), {h}); };
                Tensor<T> n1 = modulate(layer_norm(x), mv(0), mv(1));
                Tensor<T> q = blk.q.forward(n1, ca, da);
                Tensor<T> k = blk.k.forward(n1, ca, da);
                Tensor<T> v = blk.v.forward(n1, ca, da);
                if (cfg_.qk_norm) {
                    q = headwise_rms(q, blk.q_gain);
                    k = headwise_rms(k, blk.k_gain);
                }
                collect_rows(k, v, k_rows[static_cast<size_t>(l)], v_rows[static_cast<size_t>(l)]);
                Tensor<T> attn = blk.o.forward(gsa_attention(q, {k}, {v}, cfg_.heads), ca, da);
                Tensor<T> x1 = add(x, mul_rowvec(attn, mv(2)));
                Tensor<T> n2 = modulate(layer_norm(x1), mv(3), mv(4));
                Tensor<T> f = blk.ffn2.forward(gelu(blk.ffn1.forward(n2, ca, da)), ca, da);
                x = add(x1, mul_rowvec(f, mv(5)));
            }
        }
        cache.k.reserve(static_cast<size_t>(cfg_.depth));
        cache.v.reserve(static_cast<size_t>(cfg_.depth));
        uint64_t fp = 0xcbf29ce484222325ull;
        for (int l = 0; l < cfg_.depth; ++l) {
            Tensor<T> kl = k_rows[static_cast<size_t>(l)].size() == 1
                               ? k_rows[static_cast<size_t>(l)][0]
                               : concat(k_rows[static_cast<size_t>(l)], 0);
            Tensor<T> vl = v_rows[static_cast<size_t>(l)].size() == 1
                               ? v_rows[static_cast<size_t>(l)][0]
                               : concat(v_rows[static_cast<size_t>(l)], 0);
            fp = fnv1a(kl.value().data(), kl.value().size() * sizeof(T), fp);
            fp = fnv1a(vl.value().data(), vl.value().size() * sizeof(T), fp);
            cache.k.push_back(kl);
            cache.v.push_back(vl);
        }
        cache.fingerprint = fp;
        return cache;
    }
};

}  // namespace gsaflow
