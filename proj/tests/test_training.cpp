#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "sagiri/training.hpp"

using namespace sagiri;
namespace fs = std::filesystem;

namespace {

struct Corpus {
    fs::path dir;
    std::vector<CorpusItem> train, val;
};

// small shared corpus, synthesized once
const Corpus& corpus() {
    static Corpus c = [] {
        Corpus c;
        c.dir = fs::temp_directory_path() / "sagiri_training_test";
        fs::remove_all(c.dir);
        SynthOptions opt;
        opt.n_train = 12;
        opt.n_val = 4;
        opt.seed = 77;
        auto [train, val] = synth_toy_corpus(c.dir.string(), opt);
        c.train = train;
        c.val = val;
        return c;
    }();
    return c;
}

RestorerConfig small_restorer() {
    RestorerConfig cfg;
    cfg.embed_dim = 32;
    cfg.n_blocks = 1;
    cfg.n_heads = 2;
    return cfg;
}

ControlUnetConfig small_unet() {
    ControlUnetConfig cfg;
    cfg.base_widths = {16, 32};
    cfg.time_embed_dim = 32;
    cfg.prompt_embed_dim = 32;
    cfg.attn_heads = 2;
    return cfg;
}

VaeConfig small_vae() {
    VaeConfig cfg;
    cfg.base_width = 8;
    return cfg;
}

}  // namespace

TEST_CASE("corpus synthesis is deterministic and well-formed") {
    auto dir = fs::temp_directory_path() / "sagiri_synth_det";
    fs::remove_all(dir);
    SynthOptions opt;
    opt.n_train = 3;
    opt.n_val = 1;
    opt.seed = 9;
    auto [train_a, val_a] = synth_toy_corpus((dir / "a").string(), opt);
    auto [train_b, val_b] = synth_toy_corpus((dir / "b").string(), opt);
    REQUIRE(train_a.size() == 3);
    REQUIRE(val_a.size() == 1);
    for (size_t i = 0; i < train_a.size(); ++i) {
        REQUIRE(load_image(train_a[i].lq).pixels == load_image(train_b[i].lq).pixels);
        REQUIRE(load_image(train_a[i].gt).pixels == load_image(train_b[i].gt).pixels);
        REQUIRE(read_text_file(train_a[i].prompt) == read_text_file(train_b[i].prompt));
    }
    // manifests round-trip
    auto loaded = load_manifest((dir / "a" / "train.manifest").string());
    REQUIRE(loaded.size() == 3);
    REQUIRE(loaded[0].lq == train_a[0].lq);
    REQUIRE(loaded[0].prompt == train_a[0].prompt);

    // low-quality exposure variants actually hit the dynamic range extremes
    double unknown_frac = 0;
    for (auto& item : train_a) {
        RegionMask m = detect_unknown_mask(load_image(item.lq));
        unknown_frac += 1.0 - m.known_fraction();
    }
    REQUIRE(unknown_frac / 3.0 > 0.05);
}

TEST_CASE("lr = 0 leaves parameters unchanged") {
    TrainConfig cfg;
    cfg.steps = 5;
    cfg.batch_size = 2;
    cfg.lr = 0.0;
    cfg.seed = 3;
    Restorer before = Restorer::build(small_restorer(), cfg.seed);
    auto result = train_restorer(corpus().train, {}, small_restorer(), cfg);
    for (auto& [name, v] : before.ps.params)
        REQUIRE(v.val().data == result.model.ps.get(name).val().data);
}

TEST_CASE("restorer training reduces the color loss and resumes bitwise") {
    auto out_a = fs::temp_directory_path() / "sagiri_train_a";
    auto out_b = fs::temp_directory_path() / "sagiri_train_b";
    fs::remove_all(out_a);
    fs::remove_all(out_b);

    TrainConfig cfg;
    cfg.steps = 40;
    cfg.batch_size = 2;
    cfg.lr = 4e-4;
    cfg.seed = 11;
    cfg.checkpoint_every = 20;
    cfg.log_every = 10;
    cfg.out_dir = out_a.string();
    auto full = train_restorer(corpus().train, corpus().val, small_restorer(), cfg);
    REQUIRE(full.final_train_loss < full.initial_train_loss);

    // interrupted run: 20 steps, then resume for the remaining 20
    TrainConfig half = cfg;
    half.steps = 20;
    half.out_dir = out_b.string();
    train_restorer(corpus().train, {}, small_restorer(), half);
    TrainConfig rest = cfg;
    rest.out_dir = out_b.string();
    rest.resume_path = (out_b / "restorer_latest.ckpt").string();
    auto resumed = train_restorer(corpus().train, {}, small_restorer(), rest);

    for (auto& [name, v] : full.model.ps.params)
        REQUIRE(v.val().data == resumed.model.ps.get(name).val().data);

    // the loss log of the interrupted+resumed run replays the uninterrupted
    // one row for row (loss at step s is a pure function of checkpoint state)
    auto slurp = [](const fs::path& p) {
        std::ifstream f(p);
        std::stringstream ss;
        ss << f.rdbuf();
        return ss.str();
    };
    REQUIRE(slurp(out_b / "restorer_log.csv") == slurp(out_a / "restorer_log.csv"));
}

TEST_CASE("nan loss aborts with a diagnostic") {
    TrainConfig cfg;
    cfg.steps = 30;
    cfg.batch_size = 2;
    cfg.lr = 1e10;  // guaranteed to blow up
    cfg.seed = 5;
    cfg.grad_clip = 0;
    REQUIRE_THROWS_WITH(train_restorer(corpus().train, {}, small_restorer(), cfg),
                        Catch::Matchers::ContainsSubstring("non-finite"));
}

TEST_CASE("vae training improves held-out reconstruction") {
    TrainConfig cfg;
    cfg.steps = 150;
    cfg.batch_size = 4;
    cfg.lr = 2e-3;
    cfg.seed = 21;
    auto result = train_vae(corpus().train, corpus().val, small_vae(), cfg);
    REQUIRE(result.final_val_mse < result.initial_val_mse);
    REQUIRE(result.model.latent_scale > 0.0f);
    REQUIRE(std::isfinite(result.model.latent_scale));
}

TEST_CASE("sagiri pretraining contract: mask disabled, frozen base, loss falls") {
    TrainConfig vae_cfg;
    vae_cfg.steps = 80;
    vae_cfg.batch_size = 4;
    vae_cfg.lr = 2e-3;
    vae_cfg.seed = 31;
    Vae vae = train_vae(corpus().train, {}, small_vae(), vae_cfg).model;
    vae.freeze();

    ControlUnet base = ControlUnet::build_base(small_unet(), 33);
    ModelBundle base_bundle = base.to_bundle();

    auto out = fs::temp_directory_path() / "sagiri_pretrain_test";
    fs::remove_all(out);
    TrainConfig cfg;
    cfg.steps = 60;
    cfg.batch_size = 2;
    cfg.lr = 1e-3;
    cfg.seed = 35;
    cfg.mask_enabled = true;  // must be overridden to false by the phase
    cfg.out_dir = out.string();
    cfg.checkpoint_every = 30;
    DegradationSpec deg;
    deg.seed = 40;
    auto result = pretrain_sagiri(corpus().train, corpus().val, deg, vae, base_bundle, cfg);

    // phase contract: mask combination disabled regardless of the config
    ModelBundle saved = load_bundle((out / "sagiri_pretrain_latest.ckpt").string());
    REQUIRE(saved.config.at("mask_enabled").get<bool>() == false);

    // frozen base parameters are bit-identical after training
    for (auto& [name, v] : base.ps.params)
        REQUIRE(v.val().data == result.model.ps.get(name).val().data);

    REQUIRE(result.final_val_eps < result.initial_val_eps);
}

TEST_CASE("sagiri finetuning applies masks per item and keeps improving") {
    TrainConfig vae_cfg;
    vae_cfg.steps = 80;
    vae_cfg.batch_size = 4;
    vae_cfg.lr = 2e-3;
    vae_cfg.seed = 41;
    Vae vae = train_vae(corpus().train, {}, small_vae(), vae_cfg).model;
    vae.freeze();

    TrainConfig r_cfg;
    r_cfg.steps = 40;
    r_cfg.batch_size = 2;
    r_cfg.lr = 4e-4;
    r_cfg.seed = 43;
    Restorer restorer = train_restorer(corpus().train, {}, small_restorer(), r_cfg).model;

    ControlUnet base = ControlUnet::build_base(small_unet(), 45);
    TrainConfig pre_cfg;
    pre_cfg.steps = 50;
    pre_cfg.batch_size = 2;
    pre_cfg.lr = 1e-3;
    pre_cfg.seed = 47;
    DegradationSpec deg;
    deg.seed = 48;
    auto pre = pretrain_sagiri(corpus().train, {}, deg, vae, base.to_bundle(), pre_cfg);

    TrainConfig fin_cfg;
    fin_cfg.steps = 40;
    fin_cfg.batch_size = 2;
    fin_cfg.lr = 5e-4;
    fin_cfg.seed = 49;
    auto fin = finetune_sagiri(corpus().train, corpus().val, restorer, vae,
                               pre.model.to_bundle(pre_cfg.steps), fin_cfg);

    // frozen base is still bit-identical through both phases
    for (auto& [name, v] : base.ps.params)
        REQUIRE(v.val().data == fin.model.ps.get(name).val().data);

    // per-item masks: differently exposed variants yield different masks
    ImageBuffer lq0 = load_image(corpus().train[0].lq);
    ImageBuffer lq1 = load_image(corpus().train[1].lq);
    RegionMask m0 = detect_unknown_mask(lq0);
    RegionMask m1 = detect_unknown_mask(lq1);
    REQUIRE(m0.pixel_mask != m1.pixel_mask);

    REQUIRE(std::isfinite(fin.final_val_eps));
    REQUIRE(std::isfinite(fin.final_val_content));
}
