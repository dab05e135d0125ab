// Two-step training strategy: stage-1 restorer training on the color
// objective, VAE pretraining, Sagiri degradation pretraining (no mask), and
// paired fine-tuning (mask + prompts). Single-writer optimization; every run
// is bitwise reproducible from (seed, config, corpus manifest).
#pragma once

#include <iomanip>

#include "sagiri/data.hpp"
#include "sagiri/losses.hpp"
#include "sagiri/restorer.hpp"
#include "sagiri/sagiri.hpp"

namespace sagiri {

struct TrainConfig {
    int batch_size = 4;
    double lr = 1e-4;  // reference setting: batch 16, lr 1e-4
    int steps = 2000;
    uint64_t seed = 0;
    int crop_size = 64;
    LossWeights loss_weights;
    bool mask_enabled = false;
    enum class PromptSource { none, gt_captions, lq_captions } prompt_source = PromptSource::none;
    int n_bins = 64;
    int log_every = 25;
    int checkpoint_every = 500;
    double grad_clip = 1.0;
    bool decoded_content_loss = true;  // attach L_content to the decoded one-step estimate
    double cfg_dropout = 0.1;          // prompt -> null probability during training
    int diffusion_T = 1000;
    std::string out_dir;
    std::string resume_path;

    json to_json() const {
        return {{"batch_size", batch_size},
                {"lr", lr},
                {"steps", steps},
                {"seed", seed},
                {"crop_size", crop_size},
                {"mask_enabled", mask_enabled},
                {"prompt_source", static_cast<int>(prompt_source)},
                {"n_bins", n_bins},
                {"grad_clip", grad_clip},
                {"decoded_content_loss", decoded_content_loss},
                {"cfg_dropout", cfg_dropout},
                {"diffusion_T", diffusion_T}};
    }
};

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct Adam {
    double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t t = 0;
    std::map<std::string, Tensor> m, v;

    void zero_grad(const std::vector<std::pair<std::string, Var>>& params) {
        for (auto& [name, p] : params) {
            Tensor& g = const_cast<Var&>(p).grad();
            std::fill(g.data.begin(), g.data.end(), 0.0f);
        }
    }

    // clip by global norm, then apply the update
    void step(const std::vector<std::pair<std::string, Var>>& params, double clip) {
        double norm2 = 0;
        for (auto& [name, p] : params)
            for (float g : const_cast<Var&>(p).grad().data) norm2 += static_cast<double>(g) * g;
        double scale = 1.0;
        if (clip > 0 && norm2 > clip * clip) scale = clip / std::sqrt(norm2);
        ++t;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (auto& [name, p] : params) {
            Var& pv = const_cast<Var&>(p);
            Tensor& val = pv.val();
            Tensor& grad = pv.grad();
            Tensor& mm = m.try_emplace(name, Tensor::zeros(val.shape)).first->second;
            Tensor& vv = v.try_emplace(name, Tensor::zeros(val.shape)).first->second;
            for (int64_t i = 0; i < val.numel(); ++i) {
                double g = grad.data[i] * scale;
                mm.data[i] = static_cast<float>(beta1 * mm.data[i] + (1 - beta1) * g);
                vv.data[i] = static_cast<float>(beta2 * vv.data[i] + (1 - beta2) * g * g);
                double mhat = mm.data[i] / bc1, vhat = vv.data[i] / bc2;
                val.data[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
    }

    void export_to(ModelBundle& b) const {
        for (auto& [k, tns] : m) b.tensors["opt.m." + k] = tns;
        for (auto& [k, tns] : v) b.tensors["opt.v." + k] = tns;
        b.config["opt_step"] = t;
    }
    void import_from(const ModelBundle& b) {
        t = b.config.value("opt_step", int64_t{0});
        for (auto& [k, tns] : b.tensors) {
            if (k.rfind("opt.m.", 0) == 0) m[k.substr(6)] = tns;
            if (k.rfind("opt.v.", 0) == 0) v[k.substr(6)] = tns;
        }
    }
};

// ---------------------------------------------------------------------------
// logging and shared helpers
// ---------------------------------------------------------------------------

class TrainLog {
public:
    TrainLog() = default;
    TrainLog(const std::string& dir, const std::string& name,
             const std::vector<std::string>& columns) {
        if (dir.empty()) return;
        std::filesystem::create_directories(dir);
        path_ = (std::filesystem::path(dir) / name).string();
        bool fresh = !std::filesystem::exists(path_);
        file_.open(path_, std::ios::app);
        if (fresh) {
            file_ << "step";
            for (auto& c : columns) file_ << ',' << c;
            file_ << ",lr\n";
        }
    }
    void row(int64_t step, const std::vector<double>& values, double lr) {
        if (!file_.is_open()) return;
        file_ << step;
        file_ << std::setprecision(9);
        for (double v : values) file_ << ',' << v;
        file_ << ',' << lr << '\n';
        file_.flush();
    }

private:
    std::string path_;
    std::ofstream file_;
};

namespace detail_train {

inline void check_finite(double loss, int64_t step, const char* phase) {
    if (!std::isfinite(loss))
        throw std::runtime_error(std::string("training diverged: non-finite ") + phase +
                                 " loss at step " + std::to_string(step));
}

inline std::vector<Tensor> load_unit_images(const std::vector<std::string>& paths) {
    std::vector<Tensor> out;
    out.reserve(paths.size());
    for (const auto& p : paths) {
        ImageBuffer img = to_unit_float(load_image(p));
        Tensor chw = image_to_chw(img);
        out.push_back(Tensor({1, img.channels, img.height, img.width}, std::move(chw.data)));
    }
    return out;
}

inline Tensor gather_batch(const std::vector<Tensor>& pool, const std::vector<int>& idx) {
    const Tensor& first = pool[static_cast<size_t>(idx[0])];
    int C = first.dim(1), H = first.dim(2), W = first.dim(3);
    Tensor batch({static_cast<int>(idx.size()), C, H, W});
    int64_t item = static_cast<int64_t>(C) * H * W;
    for (size_t b = 0; b < idx.size(); ++b)
        std::copy_n(pool[static_cast<size_t>(idx[b])].ptr(), item, batch.ptr() + b * item);
    return batch;
}

inline std::vector<int> draw_indices(Rng& rng, int count, int pool) {
    std::vector<int> idx(static_cast<size_t>(count));
    for (auto& i : idx) i = rng.uniform_int(0, pool - 1);
    return idx;
}

}  // namespace detail_train

// ---------------------------------------------------------------------------
// stage-1 restorer training
// ---------------------------------------------------------------------------

// mean color loss of the model over a fixed item set (evaluation mode)
inline double eval_restorer_color_loss(const Restorer& model, const std::vector<Tensor>& lq,
                                       const std::vector<Tensor>& gt, const LossWeights& w,
                                       int n_bins) {
    double acc = 0;
    for (size_t i = 0; i < lq.size(); ++i) {
        Var pred = model.forward(constant(lq[i]));
        acc += graph_color_loss(pred, gt[i], w, n_bins).item();
    }
    return acc / static_cast<double>(lq.size());
}

struct RestorerTrainResult {
    Restorer model;
    double initial_train_loss = 0, final_train_loss = 0;
    double initial_val_loss = 0, final_val_loss = 0;
};

inline RestorerTrainResult train_restorer(const std::vector<CorpusItem>& train_items,
                                          const std::vector<CorpusItem>& val_items,
                                          const RestorerConfig& model_cfg, const TrainConfig& cfg) {
    if (train_items.empty()) throw std::invalid_argument("train_restorer: empty dataset");
    if (cfg.crop_size % model_cfg.pad_multiple() != 0)
        throw std::invalid_argument("train_restorer: crop_size must divide by 8*window");

    std::vector<std::string> lq_paths, gt_paths, val_lq_paths, val_gt_paths;
    for (auto& it : train_items) {
        lq_paths.push_back(it.lq);
        gt_paths.push_back(it.gt);
    }
    for (auto& it : val_items) {
        val_lq_paths.push_back(it.lq);
        val_gt_paths.push_back(it.gt);
    }
    auto lq = detail_train::load_unit_images(lq_paths);
    auto gt = detail_train::load_unit_images(gt_paths);
    auto val_lq = detail_train::load_unit_images(val_lq_paths);
    auto val_gt = detail_train::load_unit_images(val_gt_paths);

    Restorer model = Restorer::build(model_cfg, cfg.seed);
    Adam opt;
    opt.lr = cfg.lr;
    Rng rng(cfg.seed ^ 0x5eed5eedULL);
    int64_t start_step = 0;
    if (!cfg.resume_path.empty()) {
        ModelBundle ckpt = load_bundle(cfg.resume_path);
        model = Restorer::from_bundle(ckpt);
        opt.import_from(ckpt);
        opt.lr = cfg.lr;
        rng.state = std::stoull(ckpt.config.value("rng_state", std::string("0")));
        start_step = ckpt.step;
    }
    auto params = model.ps.trainable();
    TrainLog log(cfg.out_dir, "restorer_log.csv", {"total", "mse", "cd", "fdp"});

    RestorerTrainResult result{std::move(model)};
    result.initial_train_loss =
        eval_restorer_color_loss(result.model, lq, gt, cfg.loss_weights, cfg.n_bins);
    if (!val_lq.empty())
        result.initial_val_loss =
            eval_restorer_color_loss(result.model, val_lq, val_gt, cfg.loss_weights, cfg.n_bins);

    auto save_ckpt = [&](int64_t step) {
        if (cfg.out_dir.empty()) return;
        ModelBundle b = result.model.to_bundle(step);
        b.config["rng_state"] = std::to_string(rng.state);
        b.config["train"] = cfg.to_json();
        opt.export_to(b);
        save_bundle(b, (std::filesystem::path(cfg.out_dir) / "restorer_latest.ckpt").string());
    };

    for (int64_t step = start_step + 1; step <= cfg.steps; ++step) {
        auto idx = detail_train::draw_indices(rng, cfg.batch_size, static_cast<int>(lq.size()));
        Tensor batch_lq = detail_train::gather_batch(lq, idx);
        Tensor batch_gt = detail_train::gather_batch(gt, idx);

        opt.zero_grad(params);
        Var pred = result.model.forward(constant(batch_lq));
        Var l_mse = mse_loss(pred, constant(batch_gt));
        Var l_cd = graph_soft_cd_loss(pred, batch_gt, cfg.n_bins);
        Var l_fdp = graph_fdp_loss(pred, batch_gt);
        Var loss = add(add(mul_scalar(l_mse, static_cast<float>(cfg.loss_weights.lambda1)),
                           mul_scalar(l_cd, static_cast<float>(cfg.loss_weights.lambda2))),
                       mul_scalar(l_fdp, static_cast<float>(cfg.loss_weights.lambda3)));
        detail_train::check_finite(loss.item(), step, "restorer");
        backward(loss);
        opt.step(params, cfg.grad_clip);

        if (step % cfg.log_every == 0 || step == cfg.steps)
            log.row(step, {loss.item(), l_mse.item(), l_cd.item(), l_fdp.item()}, opt.lr);
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) save_ckpt(step);
    }
    save_ckpt(cfg.steps);

    result.final_train_loss =
        eval_restorer_color_loss(result.model, lq, gt, cfg.loss_weights, cfg.n_bins);
    if (!val_lq.empty())
        result.final_val_loss =
            eval_restorer_color_loss(result.model, val_lq, val_gt, cfg.loss_weights, cfg.n_bins);
    return result;
}

// ---------------------------------------------------------------------------
// vae training
// ---------------------------------------------------------------------------

struct VaeTrainResult {
    Vae model;
    double initial_val_mse = 0, final_val_mse = 0;
};

inline double eval_vae_mse(const Vae& vae, const std::vector<Tensor>& images) {
    double acc = 0;
    for (const auto& img : images) {
        Var recon = vae.decode(vae.encode_params(constant(img)).first);
        acc += mse_loss(recon, constant(img)).item();
    }
    return acc / static_cast<double>(images.size());
}

inline VaeTrainResult train_vae(const std::vector<CorpusItem>& train_items,
                                const std::vector<CorpusItem>& val_items, const VaeConfig& model_cfg,
                                const TrainConfig& cfg) {
    if (train_items.empty()) throw std::invalid_argument("train_vae: empty dataset");
    std::vector<std::string> paths, val_paths;
    for (auto& it : train_items) paths.push_back(it.gt);
    for (auto& it : val_items) val_paths.push_back(it.gt);
    auto images = detail_train::load_unit_images(paths);
    auto val_images = detail_train::load_unit_images(val_paths);

    VaeTrainResult result{Vae::build(model_cfg, cfg.seed)};
    if (!val_images.empty()) result.initial_val_mse = eval_vae_mse(result.model, val_images);
    Adam opt;
    opt.lr = cfg.lr;
    Rng rng(cfg.seed ^ 0xae5eedULL);
    auto params = result.model.ps.trainable();
    TrainLog log(cfg.out_dir, "vae_log.csv", {"total", "recon", "kl"});

    for (int64_t step = 1; step <= cfg.steps; ++step) {
        auto idx = detail_train::draw_indices(rng, cfg.batch_size, static_cast<int>(images.size()));
        Tensor batch = detail_train::gather_batch(images, idx);
        opt.zero_grad(params);
        auto [mean, logvar] = result.model.encode_params(constant(batch));
        Tensor noise(mean.val().shape);
        rng.fill_normal(noise);
        Var z = add(mean, mul(exp_op(mul_scalar(logvar, 0.5f)), constant(noise)));
        Var recon = result.model.decode(z);
        Var l_recon = mse_loss(recon, constant(batch));
        // KL(q || N(0,1)) per latent element
        Var kl = mean_all(mul_scalar(
            add_scalar(sub(add(mul(mean, mean), exp_op(logvar)), logvar), -1.0f), 0.5f));
        Var loss = add(l_recon, mul_scalar(kl, static_cast<float>(model_cfg.kl_weight)));
        detail_train::check_finite(loss.item(), step, "vae");
        backward(loss);
        opt.step(params, cfg.grad_clip);
        if (step % cfg.log_every == 0 || step == cfg.steps)
            log.row(step, {loss.item(), l_recon.item(), kl.item()}, opt.lr);
    }

    // calibrate the latent scale so diffusion sees roughly unit-variance data
    double sum = 0, sum2 = 0;
    int64_t n = 0;
    for (const auto& img : images) {
        Tensor mean = result.model.encode_params(constant(img)).first.val();
        for (float v : mean.data) {
            sum += v;
            sum2 += static_cast<double>(v) * v;
            ++n;
        }
    }
    double var = sum2 / n - (sum / n) * (sum / n);
    result.model.latent_scale = static_cast<float>(1.0 / std::sqrt(std::max(1e-8, var)));

    if (!cfg.out_dir.empty())
        save_bundle(result.model.to_bundle(cfg.steps),
                    (std::filesystem::path(cfg.out_dir) / "vae_latest.ckpt").string());
    if (!val_images.empty()) result.final_val_mse = eval_vae_mse(result.model, val_images);
    return result;
}

// ---------------------------------------------------------------------------
// sagiri training phases
// ---------------------------------------------------------------------------

struct SagiriBatchSource {
    std::vector<Tensor> cond_latents;  // condition latents (already scaled)
    std::vector<Tensor> gt_latents;    // clean latents (already scaled)
    std::vector<Tensor> gt_images;     // decoded-loss targets, [1,3,H,W]
    std::vector<std::string> prompts;
    std::vector<Tensor> latent_masks;  // [1,lc,h,w] binary; empty when masking is off
};

// fixed validation probe: deterministic (t, noise) pairs per item
inline double eval_eps_loss(const ControlUnet& unet, const SagiriBatchSource& src,
                            const NoiseSchedule& sched, uint64_t seed) {
    static const int probe_ts[5] = {50, 250, 500, 750, 950};
    double acc = 0;
    int n = 0;
    for (size_t i = 0; i < src.cond_latents.size(); ++i) {
        Rng rng(Rng(seed).fork(i).next_u64());
        int t = probe_ts[i % 5] % sched.T + 1;
        Tensor eps(src.gt_latents[i].shape);
        rng.fill_normal(eps);
        Tensor x_t = q_sample(src.gt_latents[i], t, eps, sched);
        Var pred = unet.forward(constant(x_t), {t}, &src.cond_latents[i],
                                {i < src.prompts.size() ? src.prompts[i] : std::string()});
        acc += mse_loss(pred, constant(eps)).item();
        ++n;
    }
    return acc / std::max(1, n);
}

// one-step estimate decoded and scored against the ground truth image
inline double eval_decoded_content_loss(const ControlUnet& unet, const Vae& vae,
                                        const SagiriBatchSource& src, const NoiseSchedule& sched,
                                        uint64_t seed) {
    const int t = 400;
    double acc = 0;
    int n = 0;
    for (size_t i = 0; i < src.cond_latents.size(); ++i) {
        Rng rng(Rng(seed).fork(i).next_u64());
        Tensor eps(src.gt_latents[i].shape);
        rng.fill_normal(eps);
        Tensor x_t = q_sample(src.gt_latents[i], t, eps, sched);
        Tensor eps_hat = unet.predict_eps(x_t, t, &src.cond_latents[i],
                                          i < src.prompts.size() ? src.prompts[i] : std::string());
        double ab = sched.alpha_bar[t];
        Tensor x0_hat(x_t.shape);
        for (int64_t j = 0; j < x_t.numel(); ++j)
            x0_hat.data[j] = static_cast<float>(
                (x_t.data[j] - std::sqrt(1.0 - ab) * eps_hat.data[j]) / std::sqrt(ab));
        Var decoded = vae.decode(mul_scalar(constant(x0_hat), 1.0f / vae.latent_scale));
        acc += graph_content_loss(decoded, src.gt_images[i]).item();
        ++n;
    }
    return acc / std::max(1, n);
}

struct SagiriTrainResult {
    ControlUnet model;
    double initial_val_eps = 0, final_val_eps = 0;
    double initial_val_content = 0, final_val_content = 0;
};

namespace detail_train {

// shared optimization loop for both sagiri phases
inline void run_sagiri_steps(ControlUnet& model, const Vae& vae, SagiriBatchSource& src,
                             const NoiseSchedule& sched, const TrainConfig& cfg, Adam& opt,
                             Rng& rng, int64_t start_step, TrainLog& log,
                             const std::function<void(int64_t)>& checkpoint) {
    auto params = model.ps.trainable();
    int lc = model.cfg.latent_channels;
    for (int64_t step = start_step + 1; step <= cfg.steps; ++step) {
        auto idx = draw_indices(rng, cfg.batch_size, static_cast<int>(src.cond_latents.size()));
        int h = src.gt_latents[0].dim(2), w = src.gt_latents[0].dim(3);
        int B = cfg.batch_size;
        Tensor x_t({B, lc, h, w}), eps_batch({B, lc, h, w}), cond_batch({B, lc, h, w});
        Tensor gt_img_batch({B, 3, h * 8, w * 8});
        std::vector<int> ts(static_cast<size_t>(B));
        std::vector<std::string> prompts(static_cast<size_t>(B));
        double ab_mean = 0;
        for (int b = 0; b < B; ++b) {
            int i = idx[static_cast<size_t>(b)];
            int t = rng.uniform_int(1, sched.T);
            ts[static_cast<size_t>(b)] = t;
            Tensor eps(src.gt_latents[static_cast<size_t>(i)].shape);
            rng.fill_normal(eps);
            // forward-noise the ground-truth latent; with the mask enabled the
            // known cells are anchored on the condition latent instead, which
            // mirrors how the sampler pins them at inference
            Tensor base = src.gt_latents[static_cast<size_t>(i)];
            if (cfg.mask_enabled && !src.latent_masks.empty()) {
                const Tensor& m = src.latent_masks[static_cast<size_t>(i)];
                for (int64_t j = 0; j < base.numel(); ++j)
                    if (m.data[j] > 0.5f)
                        base.data[j] = src.cond_latents[static_cast<size_t>(i)].data[j];
            }
            Tensor noised = q_sample(base, t, eps, sched);
            int64_t item = noised.numel();
            std::copy_n(noised.ptr(), item, x_t.ptr() + b * item);
            std::copy_n(eps.ptr(), item, eps_batch.ptr() + b * item);
            std::copy_n(src.cond_latents[static_cast<size_t>(i)].ptr(), item,
                        cond_batch.ptr() + b * item);
            std::copy_n(src.gt_images[static_cast<size_t>(i)].ptr(),
                        gt_img_batch.numel() / B, gt_img_batch.ptr() + b * (gt_img_batch.numel() / B));
            std::string prompt;
            if (cfg.prompt_source != TrainConfig::PromptSource::none)
                prompt = src.prompts[static_cast<size_t>(i)];
            if (!prompt.empty() && rng.uniform() < cfg.cfg_dropout) prompt.clear();
            prompts[static_cast<size_t>(b)] = prompt;
            ab_mean += sched.alpha_bar[t] / B;
        }

        opt.zero_grad(params);
        Var eps_hat = model.forward(constant(x_t), ts, &cond_batch, prompts);
        Var l_eps = mse_loss(eps_hat, constant(eps_batch));
        Var loss = l_eps;
        double content_val = 0;
        if (cfg.decoded_content_loss) {
            // per-item one-step x0 estimate decoded through the frozen VAE
            Tensor coef_a({B, lc, h, w}), coef_b({B, lc, h, w});
            int64_t item = static_cast<int64_t>(lc) * h * w;
            for (int b = 0; b < B; ++b) {
                double ab = sched.alpha_bar[ts[static_cast<size_t>(b)]];
                float ca = static_cast<float>(1.0 / std::sqrt(ab));
                float cb = static_cast<float>(std::sqrt(1.0 - ab) / std::sqrt(ab));
                std::fill_n(coef_a.ptr() + b * item, item, ca);
                std::fill_n(coef_b.ptr() + b * item, item, cb);
            }
            Var x0_hat = sub(mul(constant(x_t), constant(coef_a)),
                             mul(eps_hat, constant(coef_b)));
            Var decoded = vae.decode(mul_scalar(x0_hat, 1.0f / vae.latent_scale));
            Var l_content = graph_content_loss(decoded, gt_img_batch, cfg.loss_weights);
            content_val = l_content.item();
            // the one-step estimate amplifies eps errors by sqrt(1-abar)/sqrt(abar),
            // so the decoded term is down-weighted by the batch signal level to
            // keep high-noise timesteps from drowning the eps objective
            loss = add(loss, mul_scalar(l_content, static_cast<float>(ab_mean)));
        }
        check_finite(loss.item(), step, "sagiri");
        backward(loss);
        opt.step(params, cfg.grad_clip);
        if (step % cfg.log_every == 0 || step == cfg.steps)
            log.row(step, {loss.item(), l_eps.item(), content_val}, opt.lr);
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) checkpoint(step);
    }
    checkpoint(cfg.steps);
}

}  // namespace detail_train

// Degradation pretraining: conditions are degraded copies of the clean
// images; the unknown-region mask stays disabled in this phase regardless of
// the incoming config.
inline SagiriTrainResult pretrain_sagiri(const std::vector<CorpusItem>& train_items,
                                         const std::vector<CorpusItem>& val_items,
                                         const DegradationSpec& deg, const Vae& vae,
                                         const ModelBundle& base_unet, TrainConfig cfg) {
    if (train_items.empty()) throw std::invalid_argument("pretrain_sagiri: empty dataset");
    cfg.mask_enabled = false;  // this phase never applies the mask combination
    cfg.prompt_source = TrainConfig::PromptSource::none;

    auto build_source = [&](const std::vector<CorpusItem>& items, uint64_t salt) {
        SagiriBatchSource src;
        for (size_t i = 0; i < items.size(); ++i) {
            ImageBuffer gt = to_unit_float(load_image(items[i].gt));
            DegradationSpec item_deg = deg;
            item_deg.seed = Rng(deg.seed ^ salt).fork(i).next_u64();
            ImageBuffer degraded = generate_degradation(gt, item_deg).first;
            src.cond_latents.push_back(vae.encode_image(degraded));
            src.gt_latents.push_back(vae.encode_image(gt));
            Tensor chw = image_to_chw(gt);
            src.gt_images.push_back(Tensor({1, 3, gt.height, gt.width}, std::move(chw.data)));
            src.prompts.emplace_back();
        }
        return src;
    };
    SagiriBatchSource train_src = build_source(train_items, 0x0);
    SagiriBatchSource val_src = build_source(val_items, 0x7a1);

    ControlUnetConfig ucfg = ControlUnetConfig::from_json(base_unet.config);
    SagiriTrainResult result{ControlUnet::build_sagiri(ucfg, base_unet, cfg.seed)};
    NoiseSchedule sched = build_schedule(cfg.diffusion_T);
    Adam opt;
    opt.lr = cfg.lr;
    Rng rng(cfg.seed ^ 0x5a91c1ULL);
    int64_t start_step = 0;
    if (!cfg.resume_path.empty()) {
        ModelBundle ckpt = load_bundle(cfg.resume_path);
        result.model = ControlUnet::from_bundle(ckpt);
        opt.import_from(ckpt);
        opt.lr = cfg.lr;
        rng.state = std::stoull(ckpt.config.value("rng_state", std::string("0")));
        start_step = ckpt.step;
    }
    TrainLog log(cfg.out_dir, "sagiri_pretrain_log.csv", {"total", "eps", "content"});
    if (!val_src.cond_latents.empty())
        result.initial_val_eps = eval_eps_loss(result.model, val_src, sched, 0xe0a1);

    auto checkpoint = [&](int64_t step) {
        if (cfg.out_dir.empty()) return;
        ModelBundle b = result.model.to_bundle(step);
        b.config["rng_state"] = std::to_string(rng.state);
        b.config["train"] = cfg.to_json();
        b.config["mask_enabled"] = cfg.mask_enabled;
        opt.export_to(b);
        save_bundle(b, (std::filesystem::path(cfg.out_dir) / "sagiri_pretrain_latest.ckpt").string());
    };
    detail_train::run_sagiri_steps(result.model, vae, train_src, sched, cfg, opt, rng, start_step,
                                   log, checkpoint);
    if (!val_src.cond_latents.empty())
        result.final_val_eps = eval_eps_loss(result.model, val_src, sched, 0xe0a1);
    return result;
}

// Paired fine-tuning: conditions are stage-1 restorations of the low-quality
// inputs, the unknown-region mask (detected on the stage-1 input) anchors
// known latent cells, prompts come from the ground-truth captions.
inline SagiriTrainResult finetune_sagiri(const std::vector<CorpusItem>& train_items,
                                         const std::vector<CorpusItem>& val_items,
                                         const Restorer& restorer, const Vae& vae,
                                         const ModelBundle& pretrained, TrainConfig cfg) {
    if (train_items.empty()) throw std::invalid_argument("finetune_sagiri: empty dataset");
    if (pretrained.kind != "sagiri")
        throw std::invalid_argument("finetune_sagiri: needs a pretrained sagiri checkpoint");
    cfg.mask_enabled = true;
    if (cfg.prompt_source == TrainConfig::PromptSource::none)
        cfg.prompt_source = TrainConfig::PromptSource::gt_captions;

    auto build_source = [&](const std::vector<CorpusItem>& items) {
        SagiriBatchSource src;
        for (const auto& item : items) {
            ImageBuffer lq = to_unit_float(load_image(item.lq));
            ImageBuffer gt = to_unit_float(load_image(item.gt));
            ImageBuffer stage1 = restorer.restore(lq);
            // masks are recomputed from the stage-1 input per item, never
            // cached across exposure variants
            RegionMask mask = detect_unknown_mask(to_byte(lq));
            RegionMask projected =
                project_mask_to_latent(mask, vae.cfg.downsample_factor, vae.cfg.latent_channels);
            const Tensor& lm = *projected.latent_mask;
            src.latent_masks.push_back(Tensor({1, lm.dim(0), lm.dim(1), lm.dim(2)}, lm.data));
            src.cond_latents.push_back(vae.encode_image(stage1));
            src.gt_latents.push_back(vae.encode_image(gt));
            Tensor chw = image_to_chw(gt);
            src.gt_images.push_back(Tensor({1, 3, gt.height, gt.width}, std::move(chw.data)));
            std::string prompt;
            if (!item.prompt.empty()) prompt = read_text_file(item.prompt);
            src.prompts.push_back(std::move(prompt));
        }
        return src;
    };
    SagiriBatchSource train_src = build_source(train_items);
    SagiriBatchSource val_src = build_source(val_items);

    SagiriTrainResult result{ControlUnet::from_bundle(pretrained)};
    NoiseSchedule sched = build_schedule(cfg.diffusion_T);
    Adam opt;
    opt.lr = cfg.lr;
    opt.import_from(pretrained);
    Rng rng(cfg.seed ^ 0xf17e70ULL);
    TrainLog log(cfg.out_dir, "sagiri_finetune_log.csv", {"total", "eps", "content"});
    if (!val_src.cond_latents.empty()) {
        result.initial_val_eps = eval_eps_loss(result.model, val_src, sched, 0xe0a2);
        result.initial_val_content =
            eval_decoded_content_loss(result.model, vae, val_src, sched, 0xe0a3);
    }
    auto checkpoint = [&](int64_t step) {
        if (cfg.out_dir.empty()) return;
        ModelBundle b = result.model.to_bundle(step);
        b.config["rng_state"] = std::to_string(rng.state);
        b.config["train"] = cfg.to_json();
        b.config["mask_enabled"] = cfg.mask_enabled;
        opt.export_to(b);
        save_bundle(b, (std::filesystem::path(cfg.out_dir) / "sagiri_latest.ckpt").string());
    };
    detail_train::run_sagiri_steps(result.model, vae, train_src, sched, cfg, opt, rng, 0, log,
                                   checkpoint);
    if (!val_src.cond_latents.empty()) {
        result.final_val_eps = eval_eps_loss(result.model, val_src, sched, 0xe0a2);
        result.final_val_content =
            eval_decoded_content_loss(result.model, vae, val_src, sched, 0xe0a3);
    }
    return result;
}

}  // namespace sagiri
