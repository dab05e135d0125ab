// Command-line entry point: dataset synthesis, the training phases, one-shot
// and directory enhancement, plug-and-play refinement, mask extraction, and
// directory evaluation.
#include <CLI11.hpp>

#include <iostream>

#include "sagiri/evaluation.hpp"
#include "sagiri/training.hpp"

using namespace sagiri;
namespace fs = std::filesystem;

namespace {

std::string cache_root() {
    const char* env = std::getenv("SAGIRI_LAB_CACHE");
    return env && *env ? std::string(env) : std::string("./sagiri_cache");
}

// every run leaves a replayable record of its resolved configuration; the
// artifact feeds back through --config for a bit-identical rerun
void write_resolved_config(CLI::App* sub, const std::string& out_dir) {
    if (out_dir.empty()) return;
    fs::create_directories(out_dir);
    std::ofstream f(fs::path(out_dir) / "run_config.ini");
    f << "[" << sub->get_name() << "]\n" << sub->config_to_str(true, true);
}

struct CommonArgs {
    std::string config_path;
    std::string out;
    uint64_t seed = 0;
};

void add_common(CLI::App* sub, CommonArgs& args, const std::string& default_out) {
    sub->configurable(true);  // options may come from the [subcommand] config section
    args.out = default_out;
    sub->add_option("--out", args.out, "output directory");
    sub->add_option("--seed", args.seed, "rng seed");
}

std::pair<std::vector<CorpusItem>, std::vector<CorpusItem>> load_corpus(const std::string& data) {
    auto train = load_manifest((fs::path(data) / "train.manifest").string());
    std::vector<CorpusItem> val;
    if (fs::exists(fs::path(data) / "val.manifest"))
        val = load_manifest((fs::path(data) / "val.manifest").string());
    return {train, val};
}

NoiseSchedule schedule_for(const ModelBundle& b) {
    int T = 1000;
    if (b.config.contains("train") && b.config["train"].contains("diffusion_T"))
        T = b.config["train"]["diffusion_T"].get<int>();
    return build_schedule(T);
}

int run_enhance(const std::string& in_path, const std::string& out_dir, const Restorer* restorer,
                const Vae& vae, const ControlUnet& unet, const NoiseSchedule& sched,
                RefineOptions ropt, const std::string& prompt_file, const std::string& mask_file,
                const std::string& prompt_inline, bool keep_intermediate,
                const std::string& trajectory_dir = "") {
    fs::create_directories(out_dir);
    std::vector<std::string> inputs;
    if (fs::is_directory(in_path)) {
        for (auto& name : detail_eval::list_images(in_path))
            inputs.push_back((fs::path(in_path) / name).string());
    } else {
        inputs.push_back(in_path);
    }
    Rng base(ropt.seed);
    for (size_t i = 0; i < inputs.size(); ++i) {
        ImageBuffer img = to_unit_float(load_image(inputs[i]));
        ImageBuffer stage1 = restorer ? restorer->restore(img) : img;
        if (keep_intermediate && restorer)
            save_png(to_byte(stage1),
                     (fs::path(out_dir) / (fs::path(inputs[i]).stem().string() + "_stage1.png"))
                         .string());
        std::string stem = fs::path(inputs[i]).parent_path() / fs::path(inputs[i]).stem();
        std::string prompt = prompt_inline;
        if (prompt.empty() && !prompt_file.empty()) prompt = read_text_file(prompt_file);
        if (prompt.empty() && fs::exists(stem + ".txt")) prompt = read_text_file(stem + ".txt");
        RegionMask mask;
        bool has_mask = false;
        if (!mask_file.empty()) {
            mask = load_mask_png(mask_file);
            has_mask = true;
        } else if (fs::exists(stem + ".mask.png")) {
            mask = load_mask_png(stem + ".mask.png");
            has_mask = true;
        }
        RefineOptions item_opt = ropt;
        if (inputs.size() > 1) item_opt.seed = base.fork(i).next_u64();
        if (!trajectory_dir.empty())
            item_opt.trajectory_dir =
                (fs::path(trajectory_dir) / fs::path(inputs[i]).stem()).string();
        ImageBuffer out = refine(stage1, prompt, has_mask ? &mask : nullptr, vae, unet, sched,
                                 item_opt);
        save_png(to_byte(out), (fs::path(out_dir) / fs::path(inputs[i]).filename()).string());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"two-stage LDR image enhancement lab"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();
    app.set_config("--config", "", "declarative config file (ini, key = value with sections)");

    // ---------------- synth-data ----------------
    CommonArgs synth_args;
    SynthOptions synth_opt;
    auto* synth = app.add_subcommand("synth-data", "generate the procedural HDR corpus");
    add_common(synth, synth_args, "./toy_data");
    synth->add_option("--train", synth_opt.n_train, "training items");
    synth->add_option("--val", synth_opt.n_val, "validation items");
    synth->add_option("--size", synth_opt.size, "image size");
    synth->add_flag("--write-hdr", synth_opt.write_hdr, "also keep radiance pfm files");
    synth->add_option("--ev-offset-min", synth_opt.ev_offset_min, "min exposure fault (stops)");
    synth->add_option("--ev-offset-max", synth_opt.ev_offset_max, "max exposure fault (stops)");

    // ---------------- train-restorer ----------------
    CommonArgs tr_args;
    std::string tr_data;
    RestorerConfig tr_model;
    TrainConfig tr_cfg;
    std::string tr_loss = "color";
    auto* tr = app.add_subcommand("train-restorer", "train the stage-1 color restorer");
    add_common(tr, tr_args, cache_root());
    tr->add_option("--data", tr_data, "corpus directory (train/val manifests)")->required();
    tr->add_option("--steps", tr_cfg.steps, "optimization steps");
    tr->add_option("--batch", tr_cfg.batch_size, "batch size");
    tr->add_option("--lr", tr_cfg.lr, "learning rate");
    tr->add_option("--embed-dim", tr_model.embed_dim, "body width");
    tr->add_option("--blocks", tr_model.n_blocks, "transformer blocks");
    tr->add_option("--window", tr_model.window_size, "attention window");
    tr->add_option("--heads", tr_model.n_heads, "attention heads");
    tr->add_option("--loss", tr_loss, "color | mse (ablation)")
        ->check(CLI::IsMember({"color", "mse"}));
    tr->add_option("--resume", tr_cfg.resume_path, "checkpoint to resume from");

    // ---------------- train-vae ----------------
    CommonArgs tv_args;
    std::string tv_data;
    VaeConfig tv_model;
    TrainConfig tv_cfg;
    tv_cfg.steps = 1200;
    tv_cfg.lr = 2e-3;
    auto* tv = app.add_subcommand("train-vae", "train the latent autoencoder");
    add_common(tv, tv_args, cache_root());
    tv->add_option("--data", tv_data, "corpus directory")->required();
    tv->add_option("--steps", tv_cfg.steps, "optimization steps");
    tv->add_option("--batch", tv_cfg.batch_size, "batch size");
    tv->add_option("--lr", tv_cfg.lr, "learning rate");
    tv->add_option("--base-width", tv_model.base_width, "encoder width");

    // ---------------- pretrain-sagiri ----------------
    CommonArgs ps_args;
    std::string ps_data, ps_vae, ps_base;
    TrainConfig ps_cfg;
    ps_cfg.batch_size = 8;
    ps_cfg.lr = 1e-3;
    DegradationSpec ps_deg;
    ControlUnetConfig ps_model;
    auto* pscmd = app.add_subcommand("pretrain-sagiri",
                                     "degradation pretraining of the refiner (no mask)");
    add_common(pscmd, ps_args, cache_root());
    pscmd->add_option("--data", ps_data, "corpus directory")->required();
    pscmd->add_option("--vae", ps_vae, "trained vae checkpoint")->required();
    pscmd->add_option("--base", ps_base, "base denoiser checkpoint (fresh when omitted)");
    pscmd->add_option("--steps", ps_cfg.steps, "optimization steps");
    pscmd->add_option("--batch", ps_cfg.batch_size, "batch size");
    pscmd->add_option("--lr", ps_cfg.lr, "learning rate");
    pscmd->add_flag("--no-decoded-loss",
                    [&ps_cfg](int64_t) { ps_cfg.decoded_content_loss = false; },
                    "train on the noise objective only");
    pscmd->add_option("--resume", ps_cfg.resume_path, "checkpoint to resume from");

    // ---------------- finetune-sagiri ----------------
    CommonArgs fs_args;
    std::string fs_data, fs_vae, fs_restorer, fs_pretrained;
    TrainConfig fs_cfg;
    fs_cfg.batch_size = 8;
    fs_cfg.lr = 5e-4;
    fs_cfg.steps = 1000;
    auto* fscmd = app.add_subcommand("finetune-sagiri",
                                     "paired fine-tuning with masks and prompts");
    add_common(fscmd, fs_args, cache_root());
    fscmd->add_option("--data", fs_data, "corpus directory")->required();
    fscmd->add_option("--vae", fs_vae, "trained vae checkpoint")->required();
    fscmd->add_option("--restorer", fs_restorer, "trained stage-1 checkpoint")->required();
    fscmd->add_option("--pretrained", fs_pretrained, "pretrained sagiri checkpoint")->required();
    fscmd->add_option("--steps", fs_cfg.steps, "optimization steps");
    fscmd->add_option("--batch", fs_cfg.batch_size, "batch size");
    fscmd->add_option("--lr", fs_cfg.lr, "learning rate");

    // ---------------- enhance ----------------
    CommonArgs en_args;
    std::string en_in, en_restorer, en_vae, en_sagiri, en_prompt_file, en_mask_file, en_prompt;
    RefineOptions en_opt;
    bool en_keep = false;
    auto* en = app.add_subcommand("enhance", "full two-stage enhancement of an image or directory");
    add_common(en, en_args, "./enhanced");
    en->add_option("--in", en_in, "input image or directory")->required();
    en->add_option("--restorer", en_restorer, "stage-1 checkpoint");
    en->add_option("--vae", en_vae, "vae checkpoint");
    en->add_option("--sagiri", en_sagiri, "refiner checkpoint");
    en->add_option("--steps", en_opt.n_steps, "sampling steps");
    en->add_option("--guidance", en_opt.guidance, "prompt guidance scale");
    en->add_option("--prompt-file", en_prompt_file, "text prompt file override");
    en->add_option("--prompt", en_prompt, "inline text prompt");
    en->add_option("--mask-file", en_mask_file, "mask png override (255 = keep)");
    en->add_flag("--keep-intermediate", en_keep, "also write the stage-1 image");
    std::string en_traj;
    en->add_option("--dump-trajectory", en_traj, "write visited latents as pfm slices here");

    // ---------------- refine ----------------
    CommonArgs rf_args;
    std::string rf_in, rf_vae, rf_sagiri;
    RefineOptions rf_opt;
    auto* rf = app.add_subcommand("refine", "plug-and-play refinement of existing outputs");
    add_common(rf, rf_args, "./refined");
    rf->add_option("--in", rf_in, "input directory (any model's outputs)")->required();
    rf->add_option("--vae", rf_vae, "vae checkpoint");
    rf->add_option("--sagiri", rf_sagiri, "refiner checkpoint");
    rf->add_option("--steps", rf_opt.n_steps, "sampling steps");
    rf->add_option("--guidance", rf_opt.guidance, "prompt guidance scale");

    // ---------------- make-masks ----------------
    CommonArgs mm_args;
    std::string mm_in, mm_mode = "all";
    auto* mm = app.add_subcommand("make-masks", "write saturation masks for a directory");
    add_common(mm, mm_args, "./masks");
    mm->add_option("--in", mm_in, "input directory")->required();
    mm->add_option("--mode", mm_mode, "all | any channel saturation")
        ->check(CLI::IsMember({"all", "any"}));

    // ---------------- eval ----------------
    CommonArgs ev_args;
    std::string ev_pred, ev_ref;
    std::vector<std::string> ev_plugins;
    auto* ev = app.add_subcommand("eval", "directory metrics (psnr/ssim/histogram + plug-ins)");
    add_common(ev, ev_args, "./eval_out");
    ev->add_option("--pred", ev_pred, "predictions directory")->required();
    ev->add_option("--ref", ev_ref, "reference directory (optional)");
    ev->add_option("--plugin", ev_plugins, "external metric, name=command (repeatable)");

    // --config may follow the subcommand name; config processing lives on the
    // top-level app, so relocate it in front before parsing
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    std::vector<std::string> reordered;
    for (size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            reordered.insert(reordered.begin(), {args[i], args[i + 1]});
            ++i;
        } else if (args[i].rfind("--config=", 0) == 0) {
            reordered.insert(reordered.begin(), args[i]);
        } else {
            reordered.push_back(args[i]);
        }
    }

    std::reverse(reordered.begin(), reordered.end());  // parse() expects reversed args

    try {
        app.parse(reordered);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*synth) {
            synth_opt.seed = synth_args.seed;
            synth_toy_corpus(synth_args.out, synth_opt);
            write_resolved_config(synth, synth_args.out);
            std::cout << "corpus written to " << synth_args.out << "\n";
        } else if (*tr) {
            auto [train, val] = load_corpus(tr_data);
            tr_cfg.seed = tr_args.seed;
            tr_cfg.out_dir = tr_args.out;
            if (tr_loss == "mse") {
                tr_cfg.loss_weights.lambda2 = 0;
                tr_cfg.loss_weights.lambda3 = 0;
            }
            auto result = train_restorer(train, val, tr_model, tr_cfg);
            write_resolved_config(tr, tr_args.out);
            std::cout << "train loss " << result.initial_train_loss << " -> "
                      << result.final_train_loss << ", val " << result.initial_val_loss << " -> "
                      << result.final_val_loss << "\n";
        } else if (*tv) {
            auto [train, val] = load_corpus(tv_data);
            tv_cfg.seed = tv_args.seed;
            tv_cfg.out_dir = tv_args.out;
            auto result = train_vae(train, val, tv_model, tv_cfg);
            write_resolved_config(tv, tv_args.out);
            std::cout << "val reconstruction mse " << result.initial_val_mse << " -> "
                      << result.final_val_mse << "\n";
        } else if (*pscmd) {
            auto [train, val] = load_corpus(ps_data);
            ps_cfg.seed = ps_args.seed;
            ps_cfg.out_dir = ps_args.out;
            ps_deg.seed = ps_args.seed ^ 0xde9ULL;
            Vae vae = Vae::from_bundle(load_bundle(ps_vae));
            vae.freeze();
            ModelBundle base = ps_base.empty()
                                   ? ControlUnet::build_base(ps_model, ps_args.seed).to_bundle()
                                   : load_bundle(ps_base);
            auto result = pretrain_sagiri(train, val, ps_deg, vae, base, ps_cfg);
            write_resolved_config(pscmd, ps_args.out);
            std::cout << "val eps loss " << result.initial_val_eps << " -> "
                      << result.final_val_eps << "\n";
        } else if (*fscmd) {
            auto [train, val] = load_corpus(fs_data);
            fs_cfg.seed = fs_args.seed;
            fs_cfg.out_dir = fs_args.out;
            Vae vae = Vae::from_bundle(load_bundle(fs_vae));
            vae.freeze();
            Restorer restorer = Restorer::from_bundle(load_bundle(fs_restorer));
            auto result = finetune_sagiri(train, val, restorer, vae, load_bundle(fs_pretrained),
                                          fs_cfg);
            write_resolved_config(fscmd, fs_args.out);
            std::cout << "val eps loss " << result.initial_val_eps << " -> "
                      << result.final_val_eps << ", content " << result.initial_val_content
                      << " -> " << result.final_val_content << "\n";
        } else if (*en) {
            std::string root = cache_root();
            if (en_restorer.empty()) en_restorer = (fs::path(root) / "restorer_latest.ckpt").string();
            if (en_vae.empty()) en_vae = (fs::path(root) / "vae_latest.ckpt").string();
            if (en_sagiri.empty()) en_sagiri = (fs::path(root) / "sagiri_latest.ckpt").string();
            Restorer restorer = Restorer::from_bundle(load_bundle(en_restorer));
            Vae vae = Vae::from_bundle(load_bundle(en_vae));
            ModelBundle sb = load_bundle(en_sagiri);
            ControlUnet unet = ControlUnet::from_bundle(sb);
            en_opt.seed = en_args.seed;
            run_enhance(en_in, en_args.out, &restorer, vae, unet, schedule_for(sb), en_opt,
                        en_prompt_file, en_mask_file, en_prompt, en_keep, en_traj);
            write_resolved_config(en, en_args.out);
        } else if (*rf) {
            std::string root = cache_root();
            if (rf_vae.empty()) rf_vae = (fs::path(root) / "vae_latest.ckpt").string();
            if (rf_sagiri.empty()) rf_sagiri = (fs::path(root) / "sagiri_latest.ckpt").string();
            Vae vae = Vae::from_bundle(load_bundle(rf_vae));
            ModelBundle sb = load_bundle(rf_sagiri);
            ControlUnet unet = ControlUnet::from_bundle(sb);
            RefineDirectoryOptions opt;
            opt.refine = rf_opt;
            opt.refine.seed = rf_args.seed;
            refine_directory(rf_in, rf_args.out, vae, unet, schedule_for(sb), opt);
            write_resolved_config(rf, rf_args.out);
        } else if (*mm) {
            fs::create_directories(mm_args.out);
            SaturationMode mode =
                mm_mode == "any" ? SaturationMode::any_channel : SaturationMode::all_channels;
            for (auto& name : detail_eval::list_images(mm_in)) {
                ImageBuffer img = load_image((fs::path(mm_in) / name).string());
                RegionMask mask = detect_unknown_mask(img, mode);
                std::string stem = fs::path(name).stem().string();
                save_mask_png(mask, (fs::path(mm_args.out) / (stem + ".mask.png")).string());
            }
            write_resolved_config(mm, mm_args.out);
        } else if (*ev) {
            fs::create_directories(ev_args.out);
            std::vector<MetricPlugin> plugins;
            for (const auto& spec : ev_plugins) {
                auto pos = spec.find('=');
                if (pos == std::string::npos)
                    throw std::invalid_argument("plugin spec must be name=command: " + spec);
                plugins.push_back({spec.substr(0, pos), spec.substr(pos + 1)});
            }
            evaluate_directory(ev_pred, ev_ref, plugins,
                               (fs::path(ev_args.out) / "metrics.csv").string());
            write_resolved_config(ev, ev_args.out);
            std::cout << "metrics written to " << ev_args.out << "/metrics.csv\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
