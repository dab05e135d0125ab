// Time-conditioned, prompt-cross-attended denoising U-Net plus the parallel
// control encoder. The control branch copies the base encoder and middle
// block, takes the noisy latent concatenated with the condition latent, and
// feeds each level's output through a zero-initialized 1x1 convolution; the
// fused features are concatenated and injected into the matching decoder
// level through a trainable 3x3 convolution. Base weights stay frozen while
// the control side trains.
#pragma once

#include "sagiri/nn.hpp"

namespace sagiri {

struct PromptEmbedding {
    std::vector<int> tokens;    // vocab rows, 0 = learned null embedding
    std::vector<float> pooled;  // mean of the token embeddings
};

struct ControlUnetConfig {
    std::vector<int> base_widths = {32, 64};  // two resolution levels
    int latent_channels = 4;
    int time_embed_dim = 64;
    int prompt_embed_dim = 64;
    int attn_heads = 4;
    int vocab_size = 512;
    int max_prompt_tokens = 16;

    void validate() const {
        if (base_widths.size() != 2)
            throw std::invalid_argument("unet: exactly two resolution levels are supported");
        for (int w : base_widths)
            if (w < 8 || w % attn_heads != 0)
                throw std::invalid_argument("unet: widths must be >= 8 and divide by attn_heads");
        if (time_embed_dim < 8 || prompt_embed_dim < 8 || vocab_size < 8)
            throw std::invalid_argument("unet: degenerate config");
    }
    json to_json() const {
        return {{"base_widths", base_widths},       {"latent_channels", latent_channels},
                {"time_embed_dim", time_embed_dim}, {"prompt_embed_dim", prompt_embed_dim},
                {"attn_heads", attn_heads},         {"vocab_size", vocab_size},
                {"max_prompt_tokens", max_prompt_tokens}};
    }
    static ControlUnetConfig from_json(const json& j) {
        ControlUnetConfig c;
        c.base_widths = j.value("base_widths", std::vector<int>{32, 64});
        c.latent_channels = j.value("latent_channels", 4);
        c.time_embed_dim = j.value("time_embed_dim", 64);
        c.prompt_embed_dim = j.value("prompt_embed_dim", 64);
        c.attn_heads = j.value("attn_heads", 4);
        c.vocab_size = j.value("vocab_size", 512);
        c.max_prompt_tokens = j.value("max_prompt_tokens", 16);
        return c;
    }
};

// lowercase whitespace tokenization hashed into a fixed embedding table;
// row 0 is the learned null embedding used for the empty prompt
inline std::vector<int> hash_prompt_tokens(const std::string& text, int vocab_size) {
    std::vector<int> ids;
    std::string word;
    auto flush = [&]() {
        if (word.empty()) return;
        uint64_t h = 1469598103934665603ULL;  // FNV-1a
        for (char c : word) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ULL;
        }
        ids.push_back(1 + static_cast<int>(h % static_cast<uint64_t>(vocab_size)));
        word.clear();
    };
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c)))
            flush();
        else
            word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    flush();
    return ids;
}

class ControlUnet {
public:
    ControlUnetConfig cfg;
    ParamStore ps;
    uint64_t seed = 0;
    bool has_control = false;

    // ------------------------------------------------------------------
    // construction
    // ------------------------------------------------------------------

    static ControlUnet build_base(const ControlUnetConfig& cfg, uint64_t seed) {
        cfg.validate();
        ControlUnet u;
        u.cfg = cfg;
        u.seed = seed;
        Rng rng(seed);
        int temb = cfg.time_embed_dim;
        u.ps.add("time.fc1.w", init::linear_weight(temb, temb, rng));
        u.ps.add("time.fc1.b", Tensor::zeros({temb}));
        u.ps.add("time.fc2.w", init::linear_weight(temb, temb, rng));
        u.ps.add("time.fc2.b", Tensor::zeros({temb}));
        Tensor vocab({cfg.vocab_size + 1, cfg.prompt_embed_dim});
        rng.fill_normal(vocab, 0.3f);
        u.ps.add("prompt.vocab", std::move(vocab));

        int w0 = cfg.base_widths[0], w1 = cfg.base_widths[1], lc = cfg.latent_channels;
        u.ps.add("in.w", init::conv_weight(w0, lc, 3, rng));
        u.ps.add("in.b", Tensor::zeros({w0}));
        u.add_resblock("down0.res", w0, w0, rng);
        u.ps.add("down0.ds.w", init::conv_weight(w0, w0, 3, rng));
        u.ps.add("down0.ds.b", Tensor::zeros({w0}));
        u.add_resblock("down1.res", w0, w1, rng);
        u.add_resblock("mid.res1", w1, w1, rng);
        u.ps.add("mid.attn.gn.g", Tensor::full({w1}, 1.0f));
        u.ps.add("mid.attn.gn.b", Tensor::zeros({w1}));
        AttentionParams::create(u.ps, "mid.attn", w1, cfg.attn_heads, rng, true,
                                cfg.prompt_embed_dim);
        u.add_resblock("mid.res2", w1, w1, rng);
        u.add_resblock("up1.res", w1 + w1, w1, rng);
        u.add_resblock("up0.res", w1 + w0, w0, rng);
        u.ps.add("out.gn.g", Tensor::full({w0}, 1.0f));
        u.ps.add("out.gn.b", Tensor::zeros({w0}));
        // unit-gain head: the frozen output conv must pass unit-magnitude
        // noise predictions or the trainable control path hits a ceiling
        u.ps.add("out.w", init::conv_weight(lc, w0, 3, rng));
        u.ps.add("out.b", Tensor::zeros({lc}));
        return u;
    }

    // Attach the parallel control encoder to a base network. Base weights are
    // frozen; the copied branch, the zero 1x1 fusion convolutions, the
    // condition input slice, and the decoder injection convolutions train.
    static ControlUnet build_sagiri(const ControlUnetConfig& cfg, const ModelBundle& base,
                                    uint64_t seed) {
        ControlUnet u = build_base(cfg, base.seed);
        u.ps.import_from(base);
        u.seed = seed;
        u.has_control = true;
        for (auto& [k, v] : u.ps.params) v.set_requires_grad(false);

        Rng rng(seed);
        int w0 = cfg.base_widths[0], w1 = cfg.base_widths[1], lc = cfg.latent_channels;
        // copy of the encoder input conv, extended with a zero-initialized
        // slice for the condition latent
        u.ps.add("ctrl.in.w", u.ps.get("in.w").val());
        u.ps.add("ctrl.in.b", u.ps.get("in.b").val());
        u.ps.add("ctrl.in.cond.w", Tensor::zeros({w0, lc, 3, 3}));
        u.copy_resblock("down0.res", "ctrl.down0.res");
        u.ps.add("ctrl.down0.ds.w", u.ps.get("down0.ds.w").val());
        u.ps.add("ctrl.down0.ds.b", u.ps.get("down0.ds.b").val());
        u.copy_resblock("down1.res", "ctrl.down1.res");
        u.copy_resblock("mid.res1", "ctrl.mid.res1");
        u.ps.add("ctrl.mid.attn.gn.g", u.ps.get("mid.attn.gn.g").val());
        u.ps.add("ctrl.mid.attn.gn.b", u.ps.get("mid.attn.gn.b").val());
        for (const char* part : {"q", "k", "v", "proj"}) {
            u.ps.add(std::string("ctrl.mid.attn.") + part + ".w",
                     u.ps.get(std::string("mid.attn.") + part + ".w").val());
            u.ps.add(std::string("ctrl.mid.attn.") + part + ".b",
                     u.ps.get(std::string("mid.attn.") + part + ".b").val());
        }
        u.copy_resblock("mid.res2", "ctrl.mid.res2");
        // zero-initialized 1x1 fusion convolutions, one per control tap
        u.ps.add("zc0.w", Tensor::zeros({w0, w0, 1, 1}));
        u.ps.add("zc0.b", Tensor::zeros({w0}));
        u.ps.add("zc1.w", Tensor::zeros({w1, w1, 1, 1}));
        u.ps.add("zc1.b", Tensor::zeros({w1}));
        u.ps.add("zcm.w", Tensor::zeros({w1, w1, 1, 1}));
        u.ps.add("zcm.b", Tensor::zeros({w1}));
        // decoder injection convolutions consuming the concatenated taps
        u.ps.add("inj1.w", init::conv_weight(w1, w1 + w1, 3, rng));
        u.ps.add("inj1.b", Tensor::zeros({w1}));
        u.ps.add("inj0.w", init::conv_weight(w0, w0, 3, rng));
        u.ps.add("inj0.b", Tensor::zeros({w0}));
        return u;
    }

    static ControlUnet from_bundle(const ModelBundle& b) {
        ControlUnetConfig cfg = ControlUnetConfig::from_json(b.config);
        ControlUnet u;
        if (b.kind == "unet") {
            u = build_base(cfg, b.seed);
        } else if (b.kind == "sagiri") {
            ModelBundle base;
            base.kind = "unet";
            base.config = b.config;
            base.seed = b.seed;
            for (auto& [k, t] : b.tensors)
                if (k.rfind("ctrl.", 0) != 0 && k.rfind("zc", 0) != 0 && k.rfind("inj", 0) != 0)
                    base.tensors[k] = t;
            u = build_sagiri(cfg, base, b.seed);
        } else {
            throw std::runtime_error("bundle is not a denoiser checkpoint");
        }
        u.ps.import_from(b);
        return u;
    }

    ModelBundle to_bundle(int64_t step = 0) const {
        ModelBundle b;
        b.kind = has_control ? "sagiri" : "unet";
        b.config = cfg.to_json();
        b.seed = seed;
        b.step = step;
        ps.export_to(b);
        return b;
    }

    // ------------------------------------------------------------------
    // prompt embedding
    // ------------------------------------------------------------------

    PromptEmbedding prompt_embed(const std::string& text) const {
        PromptEmbedding e;
        e.tokens = hash_prompt_tokens(text, cfg.vocab_size);
        const Tensor& vocab = ps.get("prompt.vocab").val();
        int P = cfg.prompt_embed_dim;
        e.pooled.assign(static_cast<size_t>(P), 0.0f);
        if (e.tokens.empty()) {
            std::copy_n(vocab.ptr(), P, e.pooled.begin());  // null embedding
            return e;
        }
        for (int id : e.tokens)
            for (int i = 0; i < P; ++i)
                e.pooled[static_cast<size_t>(i)] += vocab.data[static_cast<size_t>(id) * P + i];
        for (auto& v : e.pooled) v /= static_cast<float>(e.tokens.size());
        return e;
    }

    // token sequence tensor [N, S, P]; empty prompts and padding use the null row
    Tensor prompt_tokens_tensor(const std::vector<std::string>& prompts) const {
        int N = static_cast<int>(prompts.size());
        int S = cfg.max_prompt_tokens, P = cfg.prompt_embed_dim;
        const Tensor& vocab = ps.get("prompt.vocab").val();
        Tensor out({N, S, P});
        for (int n = 0; n < N; ++n) {
            auto ids = hash_prompt_tokens(prompts[static_cast<size_t>(n)], cfg.vocab_size);
            for (int s = 0; s < S; ++s) {
                int id = s < static_cast<int>(ids.size()) ? ids[static_cast<size_t>(s)] : 0;
                std::copy_n(vocab.ptr() + static_cast<size_t>(id) * P, P,
                            out.ptr() + (static_cast<size_t>(n) * S + s) * P);
            }
        }
        return out;
    }

    // sinusoidal features -> two-layer mlp, [N, temb]
    Var time_embedding(const std::vector<int>& t_orig) const {
        int N = static_cast<int>(t_orig.size());
        int D = cfg.time_embed_dim, half = D / 2;
        Tensor sin_feat({N, D});
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < half; ++i) {
                double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
                double ang = t_orig[static_cast<size_t>(n)] * freq;
                sin_feat.data[static_cast<size_t>(n) * D + i] = static_cast<float>(std::sin(ang));
                sin_feat.data[static_cast<size_t>(n) * D + half + i] =
                    static_cast<float>(std::cos(ang));
            }
        Var h = linear(constant(sin_feat), ps.get("time.fc1.w"), ps.get("time.fc1.b"));
        return linear(silu(h), ps.get("time.fc2.w"), ps.get("time.fc2.b"));
    }

    // ------------------------------------------------------------------
    // forward
    // ------------------------------------------------------------------

    // x_t [N,lc,h,w]; cond [N,lc,h,w] (required when the control branch is
    // attached); prompts one string per batch item (empty = null embedding)
    Var forward(Var x_t, const std::vector<int>& t_orig, const Tensor* cond,
                const std::vector<std::string>& prompts, bool use_control = true) const {
        const auto& sh = x_t.val().shape;
        int N = sh[0], h = sh[2], w = sh[3];
        if (h % 2 != 0 || w % 2 != 0)
            throw std::invalid_argument("unet: latent dims must be even");
        Var temb = time_embedding(t_orig);
        Var prompt_kv = constant(prompt_tokens_tensor(prompts));

        Var s0, s1, m;
        {
            Var x0e = conv2d(x_t, ps.get("in.w"), ps.get("in.b"));
            s0 = resblock("down0.res", x0e, temb);
            Var d = conv2d(s0, ps.get("down0.ds.w"), ps.get("down0.ds.b"), 2);
            s1 = resblock("down1.res", d, temb);
            m = resblock("mid.res1", s1, temb);
            m = cross_attend("mid.attn", m, prompt_kv, h / 2, w / 2);
            m = resblock("mid.res2", m, temb);
        }

        Var inject1, inject0;
        if (has_control && use_control) {
            if (!cond) throw std::invalid_argument("unet: control branch needs a condition latent");
            Var cin = add(conv2d(x_t, ps.get("ctrl.in.w"), ps.get("ctrl.in.b")),
                          conv2d(constant(*cond), ps.get("ctrl.in.cond.w"), Var()));
            Var c0 = resblock("ctrl.down0.res", cin, temb);
            Var cd = conv2d(c0, ps.get("ctrl.down0.ds.w"), ps.get("ctrl.down0.ds.b"), 2);
            Var c1 = resblock("ctrl.down1.res", cd, temb);
            Var cm = resblock("ctrl.mid.res1", c1, temb);
            cm = cross_attend("ctrl.mid.attn", cm, prompt_kv, h / 2, w / 2);
            cm = resblock("ctrl.mid.res2", cm, temb);
            Var fm = conv2d(cm, ps.get("zcm.w"), ps.get("zcm.b"));
            Var f1 = conv2d(c1, ps.get("zc1.w"), ps.get("zc1.b"));
            Var f0 = conv2d(c0, ps.get("zc0.w"), ps.get("zc0.b"));
            inject1 = conv2d(concat_channels(fm, f1), ps.get("inj1.w"), ps.get("inj1.b"));
            inject0 = conv2d(f0, ps.get("inj0.w"), ps.get("inj0.b"));
        }

        Var u1 = resblock("up1.res", concat_channels(m, s1), temb, inject1);
        Var u0 = resblock("up0.res", concat_channels(upsample_nearest2x(u1), s0), temb, inject0);
        Var out = silu(group_norm(u0, norm_groups(cfg.base_widths[0]), ps.get("out.gn.g"),
                                  ps.get("out.gn.b")));
        return conv2d(out, ps.get("out.w"), ps.get("out.b"));
    }

    // value-level denoiser for the sampling loop (single item)
    Tensor predict_eps(const Tensor& x_t, int t_orig, const Tensor* cond,
                       const std::string& prompt, double guidance = 1.0) const {
        Var x = constant(x_t);
        std::vector<int> ts = {t_orig};
        Tensor eps = forward(x, ts, cond, {prompt}).val();
        if (guidance != 1.0) {
            Tensor eps_null = forward(x, ts, cond, {std::string()}).val();
            for (int64_t i = 0; i < eps.numel(); ++i)
                eps.data[i] = static_cast<float>(eps_null.data[i] +
                                                 guidance * (eps.data[i] - eps_null.data[i]));
        }
        return eps;
    }

    std::vector<std::string> trainable_names() const {
        std::vector<std::string> names;
        for (auto& [k, v] : ps.params)
            if (v.requires_grad()) names.push_back(k);
        return names;
    }

    static int norm_groups(int channels) { return channels % 8 == 0 ? 8 : 4; }

private:
    void add_resblock(const std::string& p, int cin, int cout, Rng& rng) {
        ps.add(p + ".gn1.g", Tensor::full({cin}, 1.0f));
        ps.add(p + ".gn1.b", Tensor::zeros({cin}));
        ps.add(p + ".conv1.w", init::conv_weight(cout, cin, 3, rng));
        ps.add(p + ".conv1.b", Tensor::zeros({cout}));
        ps.add(p + ".temb.w", init::linear_weight(cout, cfg.time_embed_dim, rng));
        ps.add(p + ".temb.b", Tensor::zeros({cout}));
        ps.add(p + ".gn2.g", Tensor::full({cout}, 1.0f));
        ps.add(p + ".gn2.b", Tensor::zeros({cout}));
        ps.add(p + ".conv2.w", init::conv_weight(cout, cout, 3, rng));
        ps.add(p + ".conv2.b", Tensor::zeros({cout}));
        if (cin != cout) {
            ps.add(p + ".skip.w", init::xavier({cout, cin, 1, 1}, cin, cout, rng));
            ps.add(p + ".skip.b", Tensor::zeros({cout}));
        }
    }
    void copy_resblock(const std::string& src, const std::string& dst) {
        for (const char* suffix : {".gn1.g", ".gn1.b", ".conv1.w", ".conv1.b", ".temb.w",
                                   ".temb.b", ".gn2.g", ".gn2.b", ".conv2.w", ".conv2.b"})
            ps.add(dst + suffix, ps.get(src + suffix).val());
        if (ps.has(src + ".skip.w")) {
            ps.add(dst + ".skip.w", ps.get(src + ".skip.w").val());
            ps.add(dst + ".skip.b", ps.get(src + ".skip.b").val());
        }
    }

    Var resblock(const std::string& p, Var x, Var temb, Var inject = Var()) const {
        int cin = x.val().shape[1];
        int cout = ps.get(p + ".conv1.w").val().shape[0];
        Var h = silu(group_norm(x, norm_groups(cin), ps.get(p + ".gn1.g"), ps.get(p + ".gn1.b")));
        h = conv2d(h, ps.get(p + ".conv1.w"), ps.get(p + ".conv1.b"));
        if (inject.defined()) h = add(h, inject);
        Var tproj = linear(temb, ps.get(p + ".temb.w"), ps.get(p + ".temb.b"));
        h = add_rowbias_spatial(h, tproj);
        h = silu(group_norm(h, norm_groups(cout), ps.get(p + ".gn2.g"), ps.get(p + ".gn2.b")));
        h = conv2d(h, ps.get(p + ".conv2.w"), ps.get(p + ".conv2.b"));
        Var skip = ps.has(p + ".skip.w")
                       ? conv2d(x, ps.get(p + ".skip.w"), ps.get(p + ".skip.b"))
                       : x;
        return add(h, skip);
    }

    Var cross_attend(const std::string& p, Var x, Var prompt_kv, int h, int w) const {
        int C = x.val().shape[1];
        Var normed = group_norm(x, norm_groups(C), ps.get(p + ".gn.g"), ps.get(p + ".gn.b"));
        auto attn = AttentionParams::load(ps, p, cfg.attn_heads);
        Var tokens = attn(nchw_to_tokens(normed), prompt_kv);
        return add(x, tokens_to_nchw(tokens, h, w));
    }
};

}  // namespace sagiri
