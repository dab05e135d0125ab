#include <catch2/catch_amalgamated.hpp>

#include "sagiri/sagiri.hpp"

using namespace sagiri;

namespace {

Tensor randn(std::vector<int> shape, uint64_t seed) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    rng.fill_normal(t);
    return t;
}

ControlUnetConfig tiny_unet_config() {
    ControlUnetConfig cfg;
    cfg.base_widths = {16, 32};
    cfg.time_embed_dim = 32;
    cfg.prompt_embed_dim = 32;
    cfg.attn_heads = 2;
    return cfg;
}

VaeConfig tiny_vae_config() {
    VaeConfig cfg;
    cfg.base_width = 8;
    return cfg;
}

// expected trainable parameter count of the sagiri assembly, enumerated
// structurally from the config
int64_t expected_trainable(const ControlUnetConfig& c) {
    auto rb = [&](int64_t cin, int64_t cout) {
        int64_t n = 2 * cin;                        // gn1
        n += cout * cin * 9 + cout;                 // conv1
        n += cout * c.time_embed_dim + cout;        // temb proj
        n += 2 * cout;                              // gn2
        n += cout * cout * 9 + cout;                // conv2
        if (cin != cout) n += cout * cin + cout;    // 1x1 skip
        return n;
    };
    int64_t w0 = c.base_widths[0], w1 = c.base_widths[1];
    int64_t lc = c.latent_channels, P = c.prompt_embed_dim;
    int64_t n = w0 * lc * 9 + w0;   // ctrl.in
    n += w0 * lc * 9;               // ctrl.in.cond slice
    n += rb(w0, w0);                // ctrl.down0.res
    n += w0 * w0 * 9 + w0;          // ctrl.down0.ds
    n += rb(w0, w1);                // ctrl.down1.res
    n += rb(w1, w1) * 2;            // ctrl.mid.res1 / res2
    n += 2 * w1;                    // ctrl.mid.attn.gn
    n += (w1 * w1 + w1) * 2;        // attn q + proj
    n += (w1 * P + w1) * 2;         // attn k + v
    n += (w0 * w0 + w0) + 2 * (w1 * w1 + w1);  // zc0, zc1, zcm
    n += w1 * (2 * w1) * 9 + w1;    // inj1
    n += w0 * w0 * 9 + w0;          // inj0
    return n;
}

}  // namespace

TEST_CASE("vae shape contract and determinism") {
    Vae vae = Vae::build(tiny_vae_config(), 5);
    Rng rng(1);
    ImageBuffer img(64, 64, 3, ValueRange::unit_float);
    for (auto& v : img.pixels) v = rng.uniformf(0.0f, 1.0f);

    Tensor z1 = vae.encode_image(img);
    Tensor z2 = vae.encode_image(img);
    REQUIRE(z1.shape == std::vector<int>{1, 4, 8, 8});
    REQUIRE(z1.data == z2.data);

    ImageBuffer out = vae.decode_latent(z1);
    REQUIRE(out.height == 64);
    REQUIRE(out.width == 64);
    for (float v : out.pixels) {
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 1.0f);
    }

    ModelBundle b = vae.to_bundle(3);
    Vae back = Vae::from_bundle(b);
    REQUIRE(back.encode_image(img).data == z1.data);

    ImageBuffer odd(30, 30, 3, ValueRange::unit_float);
    REQUIRE_THROWS_AS(vae.encode_image(odd), ImageError);
}

TEST_CASE("zero-initialized control branch leaves the base output unchanged") {
    ControlUnetConfig cfg = tiny_unet_config();
    ControlUnet base = ControlUnet::build_base(cfg, 11);
    ControlUnet sagiri = ControlUnet::build_sagiri(cfg, base.to_bundle(), 12);

    Rng rng(30);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = randn({1, 4, 8, 8}, 100 + static_cast<uint64_t>(trial));
        Tensor cond = randn({1, 4, 8, 8}, 200 + static_cast<uint64_t>(trial));
        int t = 1 + static_cast<int>(rng.next_u64() % 1000);
        std::string prompt = trial % 3 == 0 ? "" : "a bright sky over water " + std::to_string(trial);
        Tensor eps_base = base.predict_eps(x, t, nullptr, prompt);
        Tensor eps_ctrl = sagiri.predict_eps(x, t, &cond, prompt);
        double max_diff = 0;
        for (int64_t i = 0; i < eps_base.numel(); ++i)
            max_diff = std::max(max_diff,
                                static_cast<double>(std::abs(eps_base.data[i] - eps_ctrl.data[i])));
        REQUIRE(max_diff < 1e-5);
    }
}

TEST_CASE("each fusion convolution gates exactly its own level") {
    ControlUnetConfig cfg = tiny_unet_config();
    ControlUnet base = ControlUnet::build_base(cfg, 21);
    ControlUnet sagiri = ControlUnet::build_sagiri(cfg, base.to_bundle(), 22);

    Tensor x = randn({1, 4, 8, 8}, 300);
    Tensor cond = randn({1, 4, 8, 8}, 301);
    Tensor eps_base = base.predict_eps(x, 57, nullptr, "dusk");

    Rng rng(44);
    for (const std::string zc : {"zc0", "zc1", "zcm"}) {
        Tensor saved = sagiri.ps.get(zc + ".w").val();
        rng.fill_normal(sagiri.ps.get(zc + ".w").val(), 0.3f);
        Tensor eps_on = sagiri.predict_eps(x, 57, &cond, "dusk");
        double diff = 0;
        for (int64_t i = 0; i < eps_on.numel(); ++i)
            diff += std::abs(eps_on.data[i] - eps_base.data[i]);
        REQUIRE(diff > 0.0);  // the single live level changes the output

        sagiri.ps.get(zc + ".w").val() = saved;  // back to zero
        Tensor eps_off = sagiri.predict_eps(x, 57, &cond, "dusk");
        REQUIRE(eps_off.data == eps_base.data);  // and the contribution is gone
    }
}

TEST_CASE("trainable parameters are the control branch, fusion and injection convs") {
    ControlUnetConfig cfg = tiny_unet_config();
    ControlUnet base = ControlUnet::build_base(cfg, 31);
    ControlUnet sagiri = ControlUnet::build_sagiri(cfg, base.to_bundle(), 32);

    REQUIRE(sagiri.ps.count(true) == expected_trainable(cfg));
    for (const auto& name : sagiri.trainable_names()) {
        bool is_addition = name.rfind("ctrl.", 0) == 0 || name.rfind("zc", 0) == 0 ||
                           name.rfind("inj", 0) == 0;
        REQUIRE(is_addition);
    }
    // every base tensor is frozen
    for (auto& [name, v] : base.ps.params) REQUIRE_FALSE(sagiri.ps.get(name).requires_grad());
}

TEST_CASE("sagiri checkpoint round trip preserves both halves") {
    ControlUnetConfig cfg = tiny_unet_config();
    ControlUnet base = ControlUnet::build_base(cfg, 41);
    ControlUnet sagiri = ControlUnet::build_sagiri(cfg, base.to_bundle(), 42);
    Rng rng(43);
    rng.fill_normal(sagiri.ps.get("zc1.w").val(), 0.2f);

    ModelBundle b = sagiri.to_bundle(7);
    REQUIRE(b.kind == "sagiri");
    ControlUnet back = ControlUnet::from_bundle(b);
    REQUIRE(back.has_control);
    Tensor x = randn({1, 4, 8, 8}, 50);
    Tensor cond = randn({1, 4, 8, 8}, 51);
    REQUIRE(back.predict_eps(x, 9, &cond, "hi").data ==
            sagiri.predict_eps(x, 9, &cond, "hi").data);
    // frozen/trainable split survives the round trip
    REQUIRE(back.ps.count(true) == sagiri.ps.count(true));
}

TEST_CASE("prompt embedding: null, determinism, and collision audit") {
    ControlUnet base = ControlUnet::build_base(tiny_unet_config(), 61);
    PromptEmbedding empty = base.prompt_embed("");
    REQUIRE(empty.tokens.empty());
    const Tensor& vocab = base.ps.get("prompt.vocab").val();
    for (int i = 0; i < 32; ++i) REQUIRE(empty.pooled[static_cast<size_t>(i)] == vocab.data[i]);

    PromptEmbedding a1 = base.prompt_embed("A Sunset Over the Ocean");
    PromptEmbedding a2 = base.prompt_embed("a sunset over the ocean");
    REQUIRE(a1.pooled == a2.pooled);  // case-insensitive tokenization
    REQUIRE(a1.tokens.size() == 5);

    // distinct test prompts should embed distinctly (hash-collision audit)
    std::vector<std::string> prompts = {
        "clouds",  "red door",      "green forest", "night sky",   "river stones",
        "old car", "glass tower",   "sand dunes",   "purple haze", "quiet street",
        "harbor",  "snowy ridge",   "neon sign",    "paper lamp",  "iron bridge",
        "orchard", "velvet curtain"};
    int distinct = 0;
    for (size_t i = 0; i < prompts.size(); ++i)
        for (size_t j = i + 1; j < prompts.size(); ++j) {
            auto ei = base.prompt_embed(prompts[i]).pooled;
            auto ej = base.prompt_embed(prompts[j]).pooled;
            if (ei != ej) ++distinct;
        }
    REQUIRE(distinct == static_cast<int>(prompts.size() * (prompts.size() - 1) / 2));
}

TEST_CASE("refine: all-known mask reduces to the vae round trip") {
    Vae vae = Vae::build(tiny_vae_config(), 71);
    ControlUnet base = ControlUnet::build_base(tiny_unet_config(), 72);
    ControlUnet sagiri = ControlUnet::build_sagiri(tiny_unet_config(), base.to_bundle(), 73);
    NoiseSchedule sched = build_schedule(1000);

    Rng rng(74);
    ImageBuffer img(40, 56, 3, ValueRange::unit_float);
    for (auto& v : img.pixels) v = 0.2f + 0.6f * rng.uniformf(0.0f, 1.0f);  // no saturation

    RegionMask all_known(40, 56);
    RefineOptions opt;
    opt.seed = 9;
    ImageBuffer refined = refine(img, "", &all_known, vae, sagiri, sched, opt);

    ImageBuffer padded = reflect_pad_to_multiple(img, 16);
    ImageBuffer round_trip = crop(vae.decode_latent(vae.encode_image(padded)), 40, 56);
    REQUIRE(refined.height == 40);
    REQUIRE(refined.width == 56);
    double max_diff = 0;
    for (size_t i = 0; i < refined.pixels.size(); ++i)
        max_diff = std::max(max_diff,
                            static_cast<double>(std::abs(refined.pixels[i] - round_trip.pixels[i])));
    REQUIRE(max_diff < 1e-5);

    // auto-mask on an unsaturated image gives the same round trip
    ImageBuffer refined_auto = refine(img, "", nullptr, vae, sagiri, sched, opt);
    REQUIRE(refined_auto.pixels == refined.pixels);
}

TEST_CASE("refine can dump the latent trajectory as pfm slices") {
    Vae vae = Vae::build(tiny_vae_config(), 91);
    ControlUnet base = ControlUnet::build_base(tiny_unet_config(), 92);
    ControlUnet sagiri = ControlUnet::build_sagiri(tiny_unet_config(), base.to_bundle(), 93);
    NoiseSchedule sched = build_schedule(200);

    Rng rng(94);
    ImageBuffer img(32, 32, 3, ValueRange::unit_float);
    for (auto& v : img.pixels) v = rng.uniformf(0.0f, 1.0f);

    auto dir = std::filesystem::temp_directory_path() / "sagiri_trajectory_test";
    std::filesystem::remove_all(dir);
    RefineOptions opt;
    opt.n_steps = 4;
    opt.seed = 95;
    opt.trajectory_dir = dir.string();
    refine(img, "", nullptr, vae, sagiri, sched, opt);

    // initial state plus one slice per step, per latent channel
    int files = 0;
    for (auto& e : std::filesystem::directory_iterator(dir)) {
        REQUIRE(e.path().extension() == ".pfm");
        ++files;
    }
    REQUIRE(files == (4 + 1) * 4);
    ImageBuffer slice = load_pfm((dir / "step_004_c0.pfm").string());
    REQUIRE(slice.height == 4);  // 32 / 8 latent cells
    REQUIRE(slice.width == 4);
    REQUIRE(all_finite(Tensor({1, 1, 4, 4}, std::vector<float>(slice.pixels))));
}

TEST_CASE("refine is deterministic in its seed") {
    Vae vae = Vae::build(tiny_vae_config(), 81);
    ControlUnet base = ControlUnet::build_base(tiny_unet_config(), 82);
    ControlUnet sagiri = ControlUnet::build_sagiri(tiny_unet_config(), base.to_bundle(), 83);
    NoiseSchedule sched = build_schedule(500);

    Rng rng(84);
    ImageBuffer img(32, 32, 3, ValueRange::byte);
    for (auto& v : img.pixels) v = static_cast<float>(rng.uniform_int(0, 255));
    for (int y = 8; y < 16; ++y)
        for (int x = 8; x < 16; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = 255.0f;  // saturated patch

    RefineOptions opt;
    opt.n_steps = 10;
    opt.seed = 31;
    ImageBuffer a = refine(img, "fluffy clouds", nullptr, vae, sagiri, sched, opt);
    ImageBuffer b = refine(img, "fluffy clouds", nullptr, vae, sagiri, sched, opt);
    REQUIRE(a.pixels == b.pixels);
    opt.seed = 32;
    ImageBuffer c = refine(img, "fluffy clouds", nullptr, vae, sagiri, sched, opt);
    REQUIRE(a.pixels != c.pixels);

    RegionMask wrong(16, 16);
    REQUIRE_THROWS_AS(refine(img, "", &wrong, vae, sagiri, sched, opt), ImageError);
}
