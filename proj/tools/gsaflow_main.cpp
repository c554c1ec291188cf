// Command-line front end.  Subcommands cover the whole pipeline: synthetic
// corpus generation, both training stages, sampling with the shared reference
// pool, the held-out consistency eval, and a gradient self-check.
//
// Exit codes: 0 success, 1 validation/usage error, 2 numerical failure.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "gsaflow/checkpoint.hpp"
#include "gsaflow/config.hpp"
#include "gsaflow/data.hpp"
#include "gsaflow/dataset_io.hpp"
#include "gsaflow/dpo.hpp"
#include "gsaflow/flow.hpp"
#include "gsaflow/gradcheck.hpp"
#include "gsaflow/metrics.hpp"
#include "gsaflow/model.hpp"
#include "gsaflow/train.hpp"

namespace {

using namespace gsaflow;

void check_geometry(const DataGeometry &file, const ModelConfig &model, const char *cmd) {
    const DataGeometry want = geometry_of(model);
    check_contract(file.latent_channels == want.latent_channels &&
                       file.latent_grid == want.latent_grid && file.text_len == want.text_len,
                   std::string(cmd) + ": dataset geometry disagrees with the model config");
}

std::string raster_name(const std::string &dir, const std::string &stem,
                        const DataGeometry &geom) {
    return dir + "/" + stem + (geom.latent_channels == 1 ? ".pgm" : ".ppm");
}

/// Both adapter sets join the forward pass at inference; a zero preference
/// adapter is an exact no-op, so stage-1 checkpoints sample unchanged.
VelocityModel<float> load_model(const std::string &ckpt, const RunConfig &cfg) {
    VelocityModel<float> model(cfg.model, 0);
    load_checkpoint(ckpt, model);
    model.set_phi_c_active(true);
    model.set_phi_d_active(true);
    return model;
}

int cmd_gen_data(const RunConfig &cfg, const std::string &out) {
    const DataGeometry geom = geometry_of(cfg.model);
    auto data = generate_dataset<float>(cfg.num_identities, cfg.frames_per_identity, cfg.seed,
                                        geom);
    save_dataset(out, data, geom);
    std::cout << "dataset " << out << ": " << data.size() << " identities x "
              << cfg.frames_per_identity << " frames, " << geom.latent_channels << "x"
              << geom.latent_grid << "x" << geom.latent_grid << " latents, seed " << cfg.seed
              << "\n";
    for (const auto &seq : data)
        std::cout << "  identity " << seq.character.identity_id << ": style "
                  << seq.character.style_id << ", scenes " << seq.frames.front().scene_id << ".."
                  << seq.frames.back().scene_id << "\n";
    return 0;
}

int cmd_train_stage1(const RunConfig &cfg, const std::string &in, const std::string &out,
                     std::string metrics_path, bool no_gsa) {
    if (metrics_path.empty()) metrics_path = out + ".metrics.csv";
    auto ds = load_dataset<float>(in);
    check_geometry(ds.geom, cfg.model, "train-stage1");
    auto train = train_split(ds.sequences);
    VelocityModel<float> model(cfg.model, cfg.seed);
    MetricsCsv metrics(metrics_path, {"step", "loss"});
    Rng rng(cfg.seed);
    run_stage1(model, train, cfg, rng, !no_gsa, [&](const Stage1Event &e) {
        metrics.row(std::vector<double>{static_cast<double>(e.step), e.loss});
        if ((e.step + 1) % 1000 == 0 || e.step + 1 == cfg.stage1_steps)
            std::cout << "stage1" << (no_gsa ? " (no pool)" : "") << " step " << e.step + 1 << "/"
                      << cfg.stage1_steps << " loss " << metric_num(e.loss) << "\n";
    });
    save_checkpoint(out, model, cfg);
    std::cout << "checkpoint " << out << " hash "
              << hex64(inspect_checkpoint(out).content_hash) << "\n";
    return 0;
}

int cmd_train_stage2(const RunConfig &cfg, const std::string &in, const std::string &ckpt,
                     const std::string &out, std::string metrics_path) {
    if (metrics_path.empty()) metrics_path = out + ".metrics.csv";
    auto ds = load_dataset<float>(in);
    check_geometry(ds.geom, cfg.model, "train-stage2");
    auto train = train_split(ds.sequences);
    auto held = holdout_split(ds.sequences);
    VelocityModel<float> model(cfg.model, 0);
    load_checkpoint(ckpt, model);
    model.set_phi_c_active(true);

    Rng rng(cfg.seed);
    auto pools = build_preference_pools(train, cfg, rng);
    Rng held_rng(detail::mix_seed(cfg.seed, 0x484f4c44u));
    auto held_pools = build_preference_pools(held, cfg, held_rng);
    auto report_accuracy = [&](const char *tag) {
        Rng ar(detail::mix_seed(cfg.seed, 0x41434355u));
        const double on_train = eval_reward_accuracy(model, pools, 4, ar);
        const double on_held = eval_reward_accuracy(model, held_pools, 4, ar);
        std::cout << "reward accuracy " << tag << ": train " << metric_num(on_train)
                  << " holdout " << metric_num(on_held) << "\n";
    };
    report_accuracy("before");

    MetricsCsv metrics(metrics_path, {"step", "loss"});
    train_stage2(model, pools, cfg.dpo, rng, [&](const Stage2Event &e) {
        detail::check_finite_loss(e.loss, "stage 2");
        metrics.row(std::vector<double>{static_cast<double>(e.step), e.loss});
        if ((e.step + 1) % 200 == 0 || e.step + 1 == cfg.dpo.steps)
            std::cout << "stage2 step " << e.step + 1 << "/" << cfg.dpo.steps << " loss "
                      << metric_num(e.loss) << "\n";
    });
    report_accuracy("after");
    save_checkpoint(out, model, cfg);
    std::cout << "checkpoint " << out << " hash "
              << hex64(inspect_checkpoint(out).content_hash) << "\n";
    return 0;
}

int cmd_sample(const RunConfig &cfg, const std::string &ckpt, const std::string &in,
               const std::string &out_dir, int identity, bool no_gsa) {
    auto ds = load_dataset<float>(in);
    check_geometry(ds.geom, cfg.model, "sample");
    if (identity < 0) {
        check_contract(static_cast<int>(ds.sequences.size()) > kHoldoutIdentities,
                       "sample: dataset smaller than the holdout");
        identity = ds.sequences[ds.sequences.size() - kHoldoutIdentities].character.identity_id;
    }
    const StorySequence<float> *seq = nullptr;
    for (const auto &s : ds.sequences)
        if (s.character.identity_id == identity) seq = &s;
    check_contract(seq != nullptr, "sample: identity " + std::to_string(identity) +
                                       " not in the dataset");
    check_contract(static_cast<int>(seq->frames.size()) >= cfg.group_size,
                   "sample: identity has fewer frames than group_size");

    VelocityModel<float> model = load_model(ckpt, cfg);
    const DataGeometry geom = geometry_of(cfg.model);
    std::filesystem::create_directories(out_dir);
    const int nrefs = cfg.group_size - 1;
    std::vector<RefInput<float>> refs;
    for (int i = 0; i < nrefs; ++i) {
        const auto &fr = seq->frames[static_cast<size_t>(i)];
        refs.push_back({fr.latent, fr.caption});
        dump_latent_raster(raster_name(out_dir, "ref_" + std::to_string(i), geom), fr.latent,
                           geom);
    }
    if (no_gsa) refs.clear();

    Rng rng(cfg.seed);
    std::vector<Tensor<float>> gens;
    for (size_t f = static_cast<size_t>(nrefs); f < seq->frames.size(); ++f) {
        const auto &fr = seq->frames[f];
        Tensor<float> z = euler_sample(model, fr.caption, refs, cfg.sampler, rng,
                                       Shape{cfg.model.latent_numel()});
        const size_t k = gens.size();
        dump_latent_raster(raster_name(out_dir, "sample_" + std::to_string(k), geom), z, geom);
        std::cout << "sample " << k << " (scene " << fr.scene_id << "): identity score "
                  << metric_num(toy_identity_score(z, seq->frames[0].latent, geom)) << "\n";
        gens.push_back(std::move(z));
    }
    save_latents_raw(out_dir + "/samples.lat", gens, geom);
    std::cout << "wrote " << gens.size() << " samples for identity " << identity << " to "
              << out_dir << (no_gsa ? " (reference pool disabled)" : "") << "\n";
    return 0;
}

int cmd_eval(const RunConfig &cfg, const std::string &ckpt, const std::string &in,
             const std::string &out_csv, bool with_gsa, bool without_gsa,
             const std::string &latents_path) {
    if (!with_gsa && !without_gsa) with_gsa = without_gsa = true;
    check_contract(latents_path.empty() || (with_gsa != without_gsa),
                   "eval: --latents needs exactly one of --with-gsa/--without-gsa");
    auto ds = load_dataset<float>(in);
    check_geometry(ds.geom, cfg.model, "eval");
    auto held = holdout_split(ds.sequences);
    VelocityModel<float> model = load_model(ckpt, cfg);

    MetricsCsv csv(out_csv, {"variant", "cids_cross", "cids_self", "csd_cross", "csd_self"});
    auto arm = [&](bool use_gsa, const std::string &name) {
        Rng rng(cfg.seed);
        std::vector<Tensor<float>> collected;
        EvalReport rep = run_eval(model, held, cfg, rng, use_gsa,
                                  latents_path.empty() ? nullptr : &collected);
        csv.row(std::vector<std::string>{name, metric_num(rep.cids_cross),
                                         metric_num(rep.cids_self), metric_num(rep.csd_cross),
                                         metric_num(rep.csd_self)});
        std::cout << name << ": cids-cross " << metric_num(rep.cids_cross) << " cids-self "
                  << metric_num(rep.cids_self) << " csd-cross " << metric_num(rep.csd_cross)
                  << " csd-self " << metric_num(rep.csd_self) << " (" << rep.samples
                  << " samples over " << rep.sequences << " held-out sequences)\n";
        if (!latents_path.empty())
            save_latents_raw(latents_path, collected, geometry_of(cfg.model));
    };
    if (with_gsa) arm(true, "with-gsa");
    if (without_gsa) arm(false, "without-gsa");
    return 0;
}

int cmd_grad_check(uint64_t seed) {
    ModelConfig mc;
    mc.hidden = 8;
    mc.heads = 2;
    mc.depth = 2;
    mc.latent_grid = 4;
    mc.latent_channels = 2;
    mc.patch = 2;
    mc.text_len = 6;
    mc.vocab = 64;
    mc.lora_rank = 2;
    mc.lora_alpha = 2;
    mc.max_samples = 4;
    mc.time_freqs = 4;
    mc.ref_grad = true;  // the stage-1 closure rebuilds the pool, so it must be on tape

    VelocityModel<double> model(mc, seed);
    Rng jr(seed + 1);
    model.jitter_params(jr, 0.02);
    model.set_phi_c_active(true);
    model.set_phi_d_active(true);
    model.set_trainable(ParamSet::base, false);
    model.set_trainable(ParamSet::phi_c, true);
    model.set_trainable(ParamSet::phi_d, true);

    auto find_param = [&](ParamSet set, const std::string &name) {
        const auto &names = model.param_names(set);
        for (size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return model.params(set)[i];
        check_contract(false, "grad-check: unknown parameter " + name);
        return model.params(set)[0];  // unreachable
    };

    RunConfig dcfg;
    dcfg.model = mc;
    dcfg.num_identities = 4;
    dcfg.frames_per_identity = 6;
    auto data = generate_dataset<double>(dcfg.num_identities, dcfg.frames_per_identity, seed,
                                         geometry_of(mc));
    Rng rng(seed + 2);
    auto eligible = eligible_sequences(data, dcfg.group_size);
    GroupBatch<double> batch = draw_group_batch(data, eligible, dcfg.group_size, rng);
    auto pools = build_preference_pools(data, dcfg, rng);
    PairSample<double> pair = sample_pair(pools[0], rng);
    ReferenceCache<double> pool_cache = build_stage2_cache(model, pools[0].references);

    double worst = 0.0;
    auto check = [&](const char *loss_name, ParamSet set, const std::string &param_name,
                     const std::function<Tensor<double>()> &loss_fn) {
        gradcheck::Report rep = gradcheck::param_grad_err(find_param(set, param_name), loss_fn,
                                                          1e-5, 3);
        worst = std::max(worst, rep.max_rel_err);
        std::cout << loss_name << " wrt " << param_name << ": max rel err "
                  << metric_num(rep.max_rel_err) << " over " << rep.checked << " coordinates\n";
    };

    auto stage1_loss = [&]() { return loss_stage1(model, batch); };
    for (const char *name : {"block0.q.a_c", "block0.ffn1.b_c", "block1.mod.b_c",
                             "block1.o.a_c", "block0.v.b_c"})
        check("stage1", ParamSet::phi_c, name, stage1_loss);

    auto dpo_loss = [&]() {
        return loss_dpo(model, pair, pools[0].condition, 50.0, &pool_cache);
    };
    for (const char *name : {"block0.q.b_d", "block1.ffn2.a_d", "block0.mod.b_d",
                             "block1.v.b_d", "block0.o.a_d"})
        check("dpo", ParamSet::phi_d, name, dpo_loss);

    std::cout << "grad-check worst relative error " << metric_num(worst) << "\n";
    if (worst >= 1e-4) throw NumericalError("grad-check: relative error above 1e-4");
    std::cout << "grad-check PASS\n";
    return 0;
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{"gsaflow: group-shared attention flow matching at desk scale"};
    app.require_subcommand(1);

    std::string config_path, in_path, out_path, ckpt_path, metrics_path, latents_path;
    uint64_t seed = 0;
    int identity = -1;
    bool no_gsa = false, with_gsa = false, without_gsa = false;

    auto add_common = [&](CLI::App *cmd) {
        cmd->add_option("--config", config_path, "run configuration file (key = value)");
        return cmd->add_option("--seed", seed, "override the config seed");
    };

    auto *gen = app.add_subcommand("gen-data", "write a synthetic story dataset");
    auto *gen_seed = add_common(gen);
    gen->add_option("--out", out_path, "dataset path")->required();

    auto *s1 = app.add_subcommand("train-stage1", "consistency-train the first adapter");
    auto *s1_seed = add_common(s1);
    s1->add_option("--in", in_path, "dataset path")->required();
    s1->add_option("--out", out_path, "checkpoint path")->required();
    s1->add_option("--metrics", metrics_path, "metrics CSV (default: <out>.metrics.csv)");
    s1->add_flag("--no-gsa", no_gsa, "train without the shared reference pool");

    auto *s2 = app.add_subcommand("train-stage2", "preference-tune the second adapter");
    auto *s2_seed = add_common(s2);
    s2->add_option("--in", in_path, "dataset path")->required();
    s2->add_option("--ckpt", ckpt_path, "stage-1 checkpoint to start from")->required();
    s2->add_option("--out", out_path, "checkpoint path")->required();
    s2->add_option("--metrics", metrics_path, "metrics CSV (default: <out>.metrics.csv)");

    auto *sm = app.add_subcommand("sample", "generate a story for one identity");
    auto *sm_seed = add_common(sm);
    sm->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    sm->add_option("--in", in_path, "dataset path (supplies references and captions)")
        ->required();
    sm->add_option("--out", out_path, "output directory")->required();
    sm->add_option("--identity", identity,
                   "identity to sample (default: first held-out identity)");
    sm->add_flag("--no-gsa", no_gsa, "sample without the shared reference pool");

    auto *ev = app.add_subcommand("eval", "score consistency on the held-out split");
    auto *ev_seed = add_common(ev);
    ev->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    ev->add_option("--in", in_path, "dataset path")->required();
    ev->add_option("--out", out_path, "metrics CSV path")->required();
    ev->add_flag("--with-gsa", with_gsa, "evaluate with the reference pool");
    ev->add_flag("--without-gsa", without_gsa, "evaluate with the pool disabled");
    ev->add_option("--latents", latents_path,
                   "also write the generated latents (single arm only)");

    auto *gc = app.add_subcommand("grad-check", "finite-difference check of both losses");
    auto *gc_seed = add_common(gc);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
        auto seed_of = [&](CLI::Option *opt) {
            if (opt->count()) cfg.seed = seed;
            cfg.validate();
            return cfg.seed;
        };
        if (gen->parsed()) {
            seed_of(gen_seed);
            return cmd_gen_data(cfg, out_path);
        }
        if (s1->parsed()) {
            seed_of(s1_seed);
            return cmd_train_stage1(cfg, in_path, out_path, metrics_path, no_gsa);
        }
        if (s2->parsed()) {
            seed_of(s2_seed);
            return cmd_train_stage2(cfg, in_path, ckpt_path, out_path, metrics_path);
        }
        if (sm->parsed()) {
            seed_of(sm_seed);
            return cmd_sample(cfg, ckpt_path, in_path, out_path, identity, no_gsa);
        }
        if (ev->parsed()) {
            seed_of(ev_seed);
            return cmd_eval(cfg, ckpt_path, in_path, out_path, with_gsa, without_gsa,
                            latents_path);
        }
        if (gc->parsed()) return cmd_grad_check(seed_of(gc_seed));
    } catch (const gsaflow::NumericalError &e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;  // unreachable with require_subcommand(1)
}
