// Small convolutional VAE mapping images to a factor-8 latent space. Trained
// once on the corpus with reconstruction + KL, then frozen while the refiner
// trains on its latents.
#pragma once

#include "sagiri/image.hpp"
#include "sagiri/nn.hpp"

namespace sagiri {

struct VaeConfig {
    int latent_channels = 4;
    int downsample_factor = 8;  // must match the mask projection scale
    int base_width = 16;
    double kl_weight = 1e-6;

    void validate() const {
        if (downsample_factor != 8)
            throw std::invalid_argument("vae: downsample factor is fixed at 8 (three stride-2 stages)");
        if (latent_channels < 1 || base_width < 4)
            throw std::invalid_argument("vae: degenerate config");
    }
    json to_json() const {
        return {{"latent_channels", latent_channels},
                {"downsample_factor", downsample_factor},
                {"base_width", base_width},
                {"kl_weight", kl_weight}};
    }
    static VaeConfig from_json(const json& j) {
        VaeConfig c;
        c.latent_channels = j.value("latent_channels", 4);
        c.downsample_factor = j.value("downsample_factor", 8);
        c.base_width = j.value("base_width", 16);
        c.kl_weight = j.value("kl_weight", 1e-6);
        return c;
    }
};

class Vae {
public:
    VaeConfig cfg;
    ParamStore ps;
    uint64_t seed = 0;
    // scales encoder means to roughly unit variance for the diffusion stage;
    // calibrated after training
    float latent_scale = 1.0f;

    static Vae build(const VaeConfig& cfg, uint64_t seed) {
        cfg.validate();
        Vae v;
        v.cfg = cfg;
        v.seed = seed;
        Rng rng(seed);
        int w = cfg.base_width, lc = cfg.latent_channels;
        int w2 = 2 * w, w4 = 4 * w;
        v.ps.add("enc.in.w", init::conv_weight(w, 3, 3, rng));
        v.ps.add("enc.in.b", Tensor::zeros({w}));
        v.ps.add("enc.down0.w", init::conv_weight(w2, w, 3, rng));
        v.ps.add("enc.down0.b", Tensor::zeros({w2}));
        v.ps.add("enc.down1.w", init::conv_weight(w4, w2, 3, rng));
        v.ps.add("enc.down1.b", Tensor::zeros({w4}));
        v.ps.add("enc.down2.w", init::conv_weight(w4, w4, 3, rng));
        v.ps.add("enc.down2.b", Tensor::zeros({w4}));
        v.ps.add("enc.out.w", init::conv_weight(2 * lc, w4, 3, rng));
        v.ps.add("enc.out.b", Tensor::zeros({2 * lc}));
        v.ps.add("dec.in.w", init::conv_weight(w4, lc, 3, rng));
        v.ps.add("dec.in.b", Tensor::zeros({w4}));
        v.ps.add("dec.up0.w", init::conv_weight(w4, w4, 3, rng));
        v.ps.add("dec.up0.b", Tensor::zeros({w4}));
        v.ps.add("dec.up1.w", init::conv_weight(w2, w4, 3, rng));
        v.ps.add("dec.up1.b", Tensor::zeros({w2}));
        v.ps.add("dec.up2.w", init::conv_weight(w, w2, 3, rng));
        v.ps.add("dec.up2.b", Tensor::zeros({w}));
        v.ps.add("dec.out.w", init::conv_weight(3, w, 3, rng));
        v.ps.add("dec.out.b", Tensor::zeros({3}));
        return v;
    }

    static Vae from_bundle(const ModelBundle& b) {
        Vae v = build(VaeConfig::from_json(b.config), b.seed);
        v.ps.import_from(b);
        v.latent_scale = b.config.value("latent_scale", 1.0f);
        return v;
    }
    ModelBundle to_bundle(int64_t step = 0) const {
        ModelBundle b;
        b.kind = "vae";
        b.config = cfg.to_json();
        b.config["latent_scale"] = latent_scale;
        b.seed = seed;
        b.step = step;
        ps.export_to(b);
        return b;
    }

    // x [N,3,H,W] -> (mean, logvar), each [N,latent,H/8,W/8]
    std::pair<Var, Var> encode_params(Var x) const {
        Var h = silu(conv2d(x, ps.get("enc.in.w"), ps.get("enc.in.b")));
        h = silu(conv2d(h, ps.get("enc.down0.w"), ps.get("enc.down0.b"), 2));
        h = silu(conv2d(h, ps.get("enc.down1.w"), ps.get("enc.down1.b"), 2));
        h = silu(conv2d(h, ps.get("enc.down2.w"), ps.get("enc.down2.b"), 2));
        Var out = conv2d(h, ps.get("enc.out.w"), ps.get("enc.out.b"));
        int lc = cfg.latent_channels;
        return {slice_channels(out, 0, lc), slice_channels(out, lc, 2 * lc)};
    }

    // z [N,latent,h,w] -> [N,3,8h,8w], sigmoid output in [0,1]
    Var decode(Var z) const {
        Var h = silu(conv2d(z, ps.get("dec.in.w"), ps.get("dec.in.b")));
        h = silu(conv2d(upsample_nearest2x(h), ps.get("dec.up0.w"), ps.get("dec.up0.b")));
        h = silu(conv2d(upsample_nearest2x(h), ps.get("dec.up1.w"), ps.get("dec.up1.b")));
        h = silu(conv2d(upsample_nearest2x(h), ps.get("dec.up2.w"), ps.get("dec.up2.b")));
        return sigmoid(conv2d(h, ps.get("dec.out.w"), ps.get("dec.out.b")));
    }

    // deterministic encode: posterior mean, latent_scale applied
    Tensor encode_image(const ImageBuffer& img) const {
        if (img.range != ValueRange::unit_float || img.channels != 3)
            throw ImageError(ImageError::Kind::invalid_image,
                             "vae encode expects a 3-channel unit_float image");
        if (img.height % cfg.downsample_factor != 0 || img.width % cfg.downsample_factor != 0)
            throw ImageError(ImageError::Kind::invalid_image,
                             "vae encode expects dims padded to the downsample factor");
        Tensor chw = image_to_chw(img);
        Var x = constant(Tensor({1, 3, img.height, img.width}, std::move(chw.data)));
        Tensor mean = encode_params(x).first.val();
        for (auto& v : mean.data) v *= latent_scale;
        return mean;
    }

    ImageBuffer decode_latent(const Tensor& z) const {
        assert(z.rank() == 4 && z.dim(0) == 1);
        Tensor unscaled = z;
        for (auto& v : unscaled.data) v /= latent_scale;
        Tensor img = decode(constant(unscaled)).val();
        return chw_to_image(Tensor({3, img.dim(2), img.dim(3)},
                                   std::vector<float>(img.data.begin(), img.data.end())));
    }

    void freeze() {
        for (auto& [k, v] : ps.params) v.set_requires_grad(false);
    }
};

}  // namespace sagiri
