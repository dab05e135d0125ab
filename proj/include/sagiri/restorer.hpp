// Stage-1 color restoration and brightness adjustment network. Works at an
// 8x spatial reduction: pixel-unshuffle front end, dual 3x3 feature
// extraction (RGB + a fixed YCbCr transform of the input), a body of
// windowed-self-attention residual transformer blocks, and three nearest-2x
// upsample stages back to image space. The network predicts a residual over
// its input.
#pragma once

#include "sagiri/image.hpp"
#include "sagiri/nn.hpp"

namespace sagiri {

struct RestorerConfig {
    int unshuffle_scale = 8;
    int embed_dim = 96;
    int n_blocks = 4;
    int layers_per_block = 2;
    int window_size = 4;
    int n_heads = 4;
    int upsample_stages = 3;

    void validate() const {
        if ((1 << upsample_stages) != unshuffle_scale)
            throw std::invalid_argument("restorer: 2^upsample_stages must equal unshuffle_scale");
        if (embed_dim % n_heads != 0)
            throw std::invalid_argument("restorer: embed_dim must divide by n_heads");
        if (embed_dim < 8 || n_blocks < 1 || window_size < 1 || layers_per_block < 1)
            throw std::invalid_argument("restorer: degenerate config");
    }
    int pad_multiple() const { return unshuffle_scale * window_size; }
    int up_width(int stage) const {  // channel taper across upsample stages
        int w = embed_dim;
        for (int i = 0; i < stage; ++i) w = std::max(16, w / 2);
        return w;
    }

    json to_json() const {
        return {{"unshuffle_scale", unshuffle_scale}, {"embed_dim", embed_dim},
                {"n_blocks", n_blocks},               {"layers_per_block", layers_per_block},
                {"window_size", window_size},         {"n_heads", n_heads},
                {"upsample_stages", upsample_stages}};
    }
    static RestorerConfig from_json(const json& j) {
        RestorerConfig c;
        c.unshuffle_scale = j.value("unshuffle_scale", 8);
        c.embed_dim = j.value("embed_dim", 96);
        c.n_blocks = j.value("n_blocks", 4);
        c.layers_per_block = j.value("layers_per_block", 2);
        c.window_size = j.value("window_size", 4);
        c.n_heads = j.value("n_heads", 4);
        c.upsample_stages = j.value("upsample_stages", 3);
        return c;
    }
};

class Restorer {
public:
    RestorerConfig cfg;
    ParamStore ps;
    uint64_t seed = 0;

    static Restorer build(const RestorerConfig& cfg, uint64_t seed) {
        cfg.validate();
        Restorer r;
        r.cfg = cfg;
        r.seed = seed;
        Rng rng(seed);
        int s = cfg.unshuffle_scale, D = cfg.embed_dim;
        int cin = 3 * s * s;
        r.ps.add("shallow.w", init::conv_weight(D, cin, 3, rng));
        r.ps.add("shallow.b", Tensor::zeros({D}));
        r.ps.add("colorfeat.w", init::conv_weight(D, cin, 3, rng));
        r.ps.add("colorfeat.b", Tensor::zeros({D}));
        for (int b = 0; b < cfg.n_blocks; ++b) {
            std::string bp = "block" + std::to_string(b);
            for (int l = 0; l < cfg.layers_per_block; ++l) {
                std::string lp = bp + ".layer" + std::to_string(l);
                r.ps.add(lp + ".ln1.g", Tensor::full({D}, 1.0f));
                r.ps.add(lp + ".ln1.b", Tensor::zeros({D}));
                AttentionParams::create(r.ps, lp + ".attn", D, cfg.n_heads, rng);
                r.ps.add(lp + ".ln2.g", Tensor::full({D}, 1.0f));
                r.ps.add(lp + ".ln2.b", Tensor::zeros({D}));
                r.ps.add(lp + ".mlp.fc1.w", init::linear_weight(4 * D, D, rng));
                r.ps.add(lp + ".mlp.fc1.b", Tensor::zeros({4 * D}));
                r.ps.add(lp + ".mlp.fc2.w", init::linear_weight(D, 4 * D, rng));
                r.ps.add(lp + ".mlp.fc2.b", Tensor::zeros({D}));
            }
            r.ps.add(bp + ".conv.w", init::conv_weight(D, D, 3, rng));
            r.ps.add(bp + ".conv.b", Tensor::zeros({D}));
        }
        r.ps.add("body_conv.w", init::conv_weight(D, D, 3, rng));
        r.ps.add("body_conv.b", Tensor::zeros({D}));
        for (int u = 0; u < cfg.upsample_stages; ++u) {
            int ci = cfg.up_width(u), co = cfg.up_width(u + 1);
            r.ps.add("up" + std::to_string(u) + ".w", init::conv_weight(co, ci, 3, rng));
            r.ps.add("up" + std::to_string(u) + ".b", Tensor::zeros({co}));
        }
        int cw = cfg.up_width(cfg.upsample_stages);
        // small head so the residual starts near identity
        r.ps.add("head.w", init::conv_weight(3, cw, 3, rng, 0.05f));
        r.ps.add("head.b", Tensor::zeros({3}));
        return r;
    }

    static Restorer from_bundle(const ModelBundle& b) {
        Restorer r = build(RestorerConfig::from_json(b.config), b.seed);
        r.ps.import_from(b);
        return r;
    }
    ModelBundle to_bundle(int64_t step = 0) const {
        ModelBundle b;
        b.kind = "restorer";
        b.config = cfg.to_json();
        b.seed = seed;
        b.step = step;
        ps.export_to(b);
        return b;
    }

    // x [N,3,H,W] with H,W divisible by unshuffle_scale * window_size.
    // Returns the unclamped prediction (training path sees live gradients
    // near 0 and 1; inference clamps).
    Var forward(Var x) const {
        const auto& sh = x.val().shape;
        int N = sh[0], H = sh[2], W = sh[3];
        int s = cfg.unshuffle_scale, D = cfg.embed_dim, win = cfg.window_size;
        if (H % pad_multiple() != 0 || W % pad_multiple() != 0)
            throw std::invalid_argument("restorer: input must be padded to 8*window multiples");

        Var ycc = conv2d(x, ycbcr_weight(), ycbcr_bias(), 1, 0);
        Var f_rgb = conv2d(pixel_unshuffle(x, s), ps.get("shallow.w"), ps.get("shallow.b"));
        Var f_ycc = conv2d(pixel_unshuffle(ycc, s), ps.get("colorfeat.w"), ps.get("colorfeat.b"));
        Var f0 = add(f_rgb, f_ycc);

        int Hr = H / s, Wr = W / s;
        Var f = f0;
        for (int b = 0; b < cfg.n_blocks; ++b) {
            std::string bp = "block" + std::to_string(b);
            Var block_in = f;
            for (int l = 0; l < cfg.layers_per_block; ++l) {
                std::string lp = bp + ".layer" + std::to_string(l);
                Var tokens = window_partition(f, win);
                Var h = layer_norm(tokens, ps.get(lp + ".ln1.g"), ps.get(lp + ".ln1.b"));
                auto attn = AttentionParams::load(ps, lp + ".attn", cfg.n_heads);
                tokens = add(tokens, attn(h));
                Var h2 = layer_norm(tokens, ps.get(lp + ".ln2.g"), ps.get(lp + ".ln2.b"));
                int Tn = tokens.val().shape[0] * tokens.val().shape[1];
                Var m = linear(reshape(h2, {Tn, D}), ps.get(lp + ".mlp.fc1.w"),
                               ps.get(lp + ".mlp.fc1.b"));
                m = linear(gelu(m), ps.get(lp + ".mlp.fc2.w"), ps.get(lp + ".mlp.fc2.b"));
                tokens = add(tokens, reshape(m, tokens.val().shape));
                f = window_merge(tokens, win, N, D, Hr, Wr);
            }
            f = add(conv2d(f, ps.get(bp + ".conv.w"), ps.get(bp + ".conv.b")), block_in);
        }
        f = add(conv2d(f, ps.get("body_conv.w"), ps.get("body_conv.b")), f0);

        for (int u = 0; u < cfg.upsample_stages; ++u) {
            std::string up = "up" + std::to_string(u);
            f = gelu(conv2d(upsample_nearest2x(f), ps.get(up + ".w"), ps.get(up + ".b")));
        }
        Var out = conv2d(f, ps.get("head.w"), ps.get("head.b"));
        return add(out, x);
    }

    // Pads, runs, clamps to [0,1], crops back. Input unit_float, 3 channels.
    ImageBuffer restore(const ImageBuffer& img) const {
        if (img.range != ValueRange::unit_float || img.channels != 3)
            throw ImageError(ImageError::Kind::invalid_image,
                             "restore expects a 3-channel unit_float image");
        ImageBuffer padded = reflect_pad_to_multiple(img, pad_multiple());
        Tensor t = image_to_chw(padded);
        Var x = constant(Tensor({1, 3, padded.height, padded.width}, std::move(t.data)));
        Var y = forward(x);
        Tensor out = y.val();
        for (float& v : out.data) v = std::min(1.0f, std::max(0.0f, v));
        ImageBuffer res = chw_to_image(Tensor({3, padded.height, padded.width}, std::move(out.data)));
        return crop(res, img.height, img.width);
    }

    int pad_multiple() const { return cfg.pad_multiple(); }

    static Var ycbcr_weight() {
        // BT.601 full-range, as a 1x1 conv over RGB
        static const std::vector<float> w = {0.299f,     0.587f,     0.114f,  //
                                             -0.168736f, -0.331264f, 0.5f,    //
                                             0.5f,       -0.418688f, -0.081312f};
        return constant(Tensor({3, 3, 1, 1}, w));
    }
    static Var ycbcr_bias() { return constant(Tensor({3}, {0.0f, 0.5f, 0.5f})); }
};

}  // namespace sagiri
