#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "sagiri/image.hpp"

using namespace sagiri;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    auto d = fs::temp_directory_path() / "sagiri_imaging_test";
    fs::create_directories(d);
    return d;
}

ImageBuffer solid_byte(int h, int w, int c, float v) {
    ImageBuffer img(h, w, c, ValueRange::byte);
    std::fill(img.pixels.begin(), img.pixels.end(), v);
    return img;
}

}  // namespace

TEST_CASE("png round trip and identity read") {
    auto dir = temp_dir();
    ImageBuffer img = solid_byte(2, 2, 3, 128.0f);
    save_image(img, (dir / "gray.png").string());
    ImageBuffer back = load_image((dir / "gray.png").string());
    REQUIRE(back.range == ValueRange::byte);
    REQUIRE(back.height == 2);
    REQUIRE(back.width == 2);
    for (float v : back.pixels) REQUIRE(v == 128.0f);

    Rng rng(7);
    ImageBuffer noisy(5, 9, 3, ValueRange::byte);
    for (auto& v : noisy.pixels) v = static_cast<float>(rng.uniform_int(0, 255));
    save_image(noisy, (dir / "noisy.png").string());
    ImageBuffer noisy_back = load_image((dir / "noisy.png").string());
    REQUIRE(noisy_back.pixels == noisy.pixels);
}

TEST_CASE("pfm round trip is bit exact") {
    auto dir = temp_dir();
    Rng rng(3);
    ImageBuffer hdr(4, 6, 3, ValueRange::hdr_linear, Colorspace::linear);
    for (auto& v : hdr.pixels) v = rng.uniformf(0.0f, 12.0f);
    hdr.pixels[0] = 7.25f;
    save_image(hdr, (dir / "img.pfm").string());
    ImageBuffer back = load_image((dir / "img.pfm").string());
    REQUIRE(back.range == ValueRange::hdr_linear);
    REQUIRE(back.pixels == hdr.pixels);
    REQUIRE(back.pixels[0] == 7.25f);
}

TEST_CASE("image io error kinds") {
    auto dir = temp_dir();
    REQUIRE_THROWS_MATCHES(load_image((dir / "nope.png").string()), ImageError,
                           Catch::Matchers::Predicate<ImageError>([](const ImageError& e) {
                               return e.kind == ImageError::Kind::missing_file;
                           }));
    // truncated PFM body
    {
        std::ofstream f(dir / "trunc.pfm", std::ios::binary);
        f << "PF\n4 4\n-1.0\n";
        float half[8] = {0};
        f.write(reinterpret_cast<char*>(half), sizeof(half));
    }
    REQUIRE_THROWS_MATCHES(load_image((dir / "trunc.pfm").string()), ImageError,
                           Catch::Matchers::Predicate<ImageError>([](const ImageError& e) {
                               return e.kind == ImageError::Kind::corrupt_payload;
                           }));
    // unsupported extension
    {
        std::ofstream f(dir / "img.bmp", std::ios::binary);
        f << "BM";
    }
    REQUIRE_THROWS_MATCHES(load_image((dir / "img.bmp").string()), ImageError,
                           Catch::Matchers::Predicate<ImageError>([](const ImageError& e) {
                               return e.kind == ImageError::Kind::unsupported_format;
                           }));
    // byte image holding an out-of-range value cannot be saved
    ImageBuffer bad = solid_byte(2, 2, 3, 128.0f);
    bad.pixels[0] = 256.0f;
    REQUIRE_THROWS_MATCHES(save_image(bad, (dir / "bad.png").string()), ImageError,
                           Catch::Matchers::Predicate<ImageError>([](const ImageError& e) {
                               return e.kind == ImageError::Kind::invalid_image;
                           }));
}

TEST_CASE("apply_exposure matches the closed form") {
    ImageBuffer hdr(1, 3, 1, ValueRange::hdr_linear, Colorspace::linear);
    hdr.pixels = {0.5f, 0.2f, 0.2f};

    ImageBuffer a = apply_exposure(hdr, {0.0, 1.0, 8});
    REQUIRE(a.pixels[0] == 128.0f);  // round(0.5 * 255)

    ImageBuffer b = apply_exposure(hdr, {3.0, 1.0, 8});
    REQUIRE(b.pixels[1] == 255.0f);  // 0.2 * 8 = 1.6 clipped to 1

    ImageBuffer c = apply_exposure(hdr, {-2.0, 2.2, 8});
    double expected = std::round(std::pow(0.2 * std::pow(2.0, -2.0), 1.0 / 2.2) * 255.0);
    REQUIRE(c.pixels[2] == static_cast<float>(expected));

    ImageBuffer not_hdr = solid_byte(1, 1, 1, 10.0f);
    REQUIRE_THROWS_AS(apply_exposure(not_hdr, {0.0, 1.0, 8}), ImageError);
}

TEST_CASE("exposure is nondecreasing in ev per pixel") {
    Rng rng(11);
    ImageBuffer hdr(4, 4, 3, ValueRange::hdr_linear, Colorspace::linear);
    for (auto& v : hdr.pixels) v = rng.uniformf(0.0f, 4.0f);
    std::vector<float> prev;
    for (double ev = -4.0; ev <= 4.0; ev += 0.5) {
        ImageBuffer out = apply_exposure(hdr, {ev, 2.2, 8});
        if (!prev.empty())
            for (size_t i = 0; i < out.pixels.size(); ++i) REQUIRE(out.pixels[i] >= prev[i]);
        prev = out.pixels;
    }
}

TEST_CASE("saturation mask rule table") {
    ImageBuffer img(1, 4, 3, ValueRange::byte);
    auto set = [&](int x, float r, float g, float b) {
        img.at(0, x, 0) = r;
        img.at(0, x, 1) = g;
        img.at(0, x, 2) = b;
    };
    set(0, 255, 255, 255);  // saturated white -> unknown
    set(1, 0, 0, 0);        // saturated black -> unknown
    set(2, 128, 40, 200);   // ordinary -> known
    set(3, 255, 0, 0);      // mixed clipping

    RegionMask all = detect_unknown_mask(img, SaturationMode::all_channels);
    REQUIRE(all.at(0, 0) == 0.0f);
    REQUIRE(all.at(0, 1) == 0.0f);
    REQUIRE(all.at(0, 2) == 1.0f);
    REQUIRE(all.at(0, 3) == 1.0f);

    RegionMask any = detect_unknown_mask(img, SaturationMode::any_channel);
    REQUIRE(any.at(0, 3) == 0.0f);

    RegionMask clean = detect_unknown_mask(solid_byte(3, 3, 3, 128.0f));
    for (float v : clean.pixel_mask) REQUIRE(v == 1.0f);

    ImageBuffer uf(1, 1, 3, ValueRange::unit_float);
    REQUIRE_THROWS_AS(detect_unknown_mask(uf), ImageError);
}

TEST_CASE("saturated exposure output is detected as unknown") {
    Rng rng(5);
    ImageBuffer hdr(8, 8, 3, ValueRange::hdr_linear, Colorspace::linear);
    for (auto& v : hdr.pixels) v = rng.uniformf(0.05f, 3.0f);
    double ev = 1.5;
    ImageBuffer ldr = apply_exposure(hdr, {ev, 2.2, 8});
    RegionMask mask = detect_unknown_mask(ldr, SaturationMode::all_channels);
    double gain = std::pow(2.0, ev);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            bool all_clipped = true;
            for (int c = 0; c < 3; ++c) all_clipped &= hdr.at(y, x, c) * gain >= 1.0;
            if (all_clipped) REQUIRE(mask.at(y, x) == 0.0f);
        }
}

TEST_CASE("latent mask projection follows the footprint rule") {
    RegionMask m(16, 16);
    RegionMask all = project_mask_to_latent(m, 8, 4);
    REQUIRE(all.latent_mask.has_value());
    REQUIRE(all.latent_mask->shape == std::vector<int>{4, 2, 2});
    for (float v : all.latent_mask->data) REQUIRE(v == 1.0f);

    RegionMask one = m;
    one.at(3, 5) = 0.0f;  // inside the top-left 8x8 block
    RegionMask proj = project_mask_to_latent(one, 8, 4);
    for (int c = 0; c < 4; ++c) {
        REQUIRE(proj.latent_mask->data[static_cast<size_t>(c) * 4 + 0] == 0.0f);
        REQUIRE(proj.latent_mask->data[static_cast<size_t>(c) * 4 + 1] == 1.0f);
        REQUIRE(proj.latent_mask->data[static_cast<size_t>(c) * 4 + 2] == 1.0f);
        REQUIRE(proj.latent_mask->data[static_cast<size_t>(c) * 4 + 3] == 1.0f);
    }
    // channel slices identical
    for (int c = 1; c < 4; ++c)
        for (int i = 0; i < 4; ++i)
            REQUIRE(proj.latent_mask->data[static_cast<size_t>(c) * 4 + i] ==
                    proj.latent_mask->data[static_cast<size_t>(i)]);

    RegionMask odd(15, 16);
    REQUIRE_THROWS_AS(project_mask_to_latent(odd, 8, 4), ImageError);
}

TEST_CASE("latent projection is antitone in unknown area") {
    Rng rng(17);
    RegionMask m(24, 24);
    for (auto& v : m.pixel_mask) v = rng.uniform() < 0.2 ? 0.0f : 1.0f;
    RegionMask p1 = project_mask_to_latent(m, 8, 1);
    RegionMask m2 = m;
    for (auto& v : m2.pixel_mask)
        if (rng.uniform() < 0.1) v = 0.0f;  // only add unknowns
    RegionMask p2 = project_mask_to_latent(m2, 8, 1);
    for (size_t i = 0; i < p1.latent_mask->data.size(); ++i)
        REQUIRE(p2.latent_mask->data[i] <= p1.latent_mask->data[i]);
}

TEST_CASE("oracle: latent projection equals brute-force footprint enumeration") {
    Rng rng(23);
    RegionMask m(32, 24);
    for (auto& v : m.pixel_mask) v = rng.uniform() < 0.15 ? 0.0f : 1.0f;
    RegionMask proj = project_mask_to_latent(m, 8, 2);
    for (int cy = 0; cy < 4; ++cy)
        for (int cx = 0; cx < 3; ++cx) {
            bool known = true;
            for (int dy = 0; dy < 8; ++dy)
                for (int dx = 0; dx < 8; ++dx)
                    if (m.at(cy * 8 + dy, cx * 8 + dx) == 0.0f) known = false;
            REQUIRE(proj.latent_mask->data[static_cast<size_t>(cy) * 3 + cx] ==
                    (known ? 1.0f : 0.0f));
        }
}

TEST_CASE("degradation synthesis contracts") {
    Rng rng(31);
    ImageBuffer img(64, 64, 3, ValueRange::unit_float);
    for (auto& v : img.pixels) v = rng.uniformf(0.0f, 1.0f);
    DegradationSpec spec;
    spec.seed = 99;

    auto [out1, mask1] = generate_degradation(img, spec);
    auto [out2, mask2] = generate_degradation(img, spec);
    REQUIRE(out1.pixels == out2.pixels);  // seeded determinism
    REQUIRE(mask1.pixel_mask == mask2.pixel_mask);

    // untouched support equals the input exactly
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
            if (mask1.at(y, x) == 1.0f)
                for (int c = 0; c < 3; ++c) REQUIRE(out1.at(y, x, c) == img.at(y, x, c));

    // outputs stay convex combinations of the original and its blur
    for (float v : out1.pixels) {
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 1.0f);
    }

    // a constant image is a fixed point of the blend
    ImageBuffer flat(48, 48, 3, ValueRange::unit_float);
    std::fill(flat.pixels.begin(), flat.pixels.end(), 0.42f);
    auto [flat_out, flat_mask] = generate_degradation(flat, spec);
    for (float v : flat_out.pixels) REQUIRE(v == Catch::Approx(0.42f).margin(1e-6));

    DegradationSpec bad = spec;
    bad.n_lines_min = 5;
    bad.n_lines_max = 2;
    REQUIRE_THROWS_AS(generate_degradation(img, bad), ImageError);
}

TEST_CASE("mask png files use 0/255 with 255 = known") {
    auto dir = temp_dir();
    RegionMask m(4, 4);
    m.at(1, 2) = 0.0f;
    save_mask_png(m, (dir / "m.mask.png").string());
    ImageBuffer raw = load_png((dir / "m.mask.png").string());
    for (float v : raw.pixels) REQUIRE((v == 0.0f || v == 255.0f));
    RegionMask back = load_mask_png((dir / "m.mask.png").string());
    REQUIRE(back.pixel_mask == m.pixel_mask);
}

TEST_CASE("reflect padding and crop round trip") {
    Rng rng(41);
    ImageBuffer img(13, 21, 3, ValueRange::unit_float);
    for (auto& v : img.pixels) v = rng.uniformf(0.0f, 1.0f);
    ImageBuffer padded = reflect_pad_to_multiple(img, 8);
    REQUIRE(padded.height == 16);
    REQUIRE(padded.width == 24);
    ImageBuffer back = crop(padded, 13, 21);
    REQUIRE(back.pixels == img.pixels);
    // padded borders mirror the interior
    REQUIRE(padded.at(13, 0, 0) == img.at(11, 0, 0));
    REQUIRE(padded.at(0, 21, 1) == img.at(0, 19, 1));
}
