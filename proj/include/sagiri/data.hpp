// Procedural training corpus: small HDR scenes (gradient skies, highlight
// blobs, textured occluders) rendered to radiance, exposed into ground-truth
// and degraded-exposure pairs, with template captions. Corpus manifests are
// tab-separated text, one item per line.
#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>

#include "sagiri/image.hpp"

namespace sagiri {

struct CorpusItem {
    std::string lq;      // low-quality input image path
    std::string gt;      // ground-truth image path
    std::string prompt;  // optional sidecar caption path ("" = none)
    std::string mask;    // optional sidecar mask path ("" = none)
};

inline void save_manifest(const std::vector<CorpusItem>& items, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write manifest: " + path);
    f << "# lq\tgt\tprompt\tmask\n";
    for (const auto& it : items)
        f << it.lq << '\t' << it.gt << '\t' << (it.prompt.empty() ? "-" : it.prompt) << '\t'
          << (it.mask.empty() ? "-" : it.mask) << '\n';
}

inline std::vector<CorpusItem> load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open manifest: " + path);
    std::vector<CorpusItem> items;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        CorpusItem it;
        std::getline(ss, it.lq, '\t');
        std::getline(ss, it.gt, '\t');
        std::getline(ss, it.prompt, '\t');
        std::getline(ss, it.mask, '\t');
        if (it.prompt == "-") it.prompt.clear();
        if (it.mask == "-") it.mask.clear();
        if (it.lq.empty() || it.gt.empty())
            throw std::runtime_error("malformed manifest line: " + line);
        items.push_back(std::move(it));
    }
    return items;
}

namespace detail_data {

// bilinear value noise from a coarse random grid
inline std::vector<float> value_noise(int size, int grid, Rng& rng) {
    std::vector<float> coarse(static_cast<size_t>(grid + 1) * (grid + 1));
    for (auto& v : coarse) v = rng.uniformf();
    std::vector<float> out(static_cast<size_t>(size) * size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double gy = static_cast<double>(y) * grid / size;
            double gx = static_cast<double>(x) * grid / size;
            int y0 = static_cast<int>(gy), x0 = static_cast<int>(gx);
            double fy = gy - y0, fx = gx - x0;
            auto at = [&](int yy, int xx) {
                return coarse[static_cast<size_t>(yy) * (grid + 1) + xx];
            };
            out[static_cast<size_t>(y) * size + x] = static_cast<float>(
                at(y0, x0) * (1 - fy) * (1 - fx) + at(y0, x0 + 1) * (1 - fy) * fx +
                at(y0 + 1, x0) * fy * (1 - fx) + at(y0 + 1, x0 + 1) * fy * fx);
        }
    return out;
}

}  // namespace detail_data

struct ToyScene {
    ImageBuffer hdr;      // radiance
    std::string caption;  // template prompt
    double base_ev = 0;   // exposure used for the ground-truth render
};

inline ToyScene synth_toy_scene(int size, uint64_t seed) {
    Rng rng(seed);
    ImageBuffer hdr(size, size, 3, ValueRange::hdr_linear, Colorspace::linear);

    // gradient sky
    float top[3], bottom[3];
    static const float palettes[5][6] = {
        {0.35f, 0.55f, 1.10f, 0.90f, 0.85f, 0.80f},  // blue
        {0.55f, 0.55f, 0.60f, 0.85f, 0.80f, 0.75f},  // gray
        {1.00f, 0.62f, 0.25f, 0.80f, 0.55f, 0.45f},  // amber
        {0.55f, 0.35f, 0.85f, 0.85f, 0.70f, 0.95f},  // violet
        {0.80f, 0.82f, 0.85f, 1.00f, 0.98f, 0.92f},  // pale
    };
    static const char* palette_names[5] = {"blue", "gray", "amber", "violet", "pale"};
    int pal = rng.uniform_int(0, 4);
    float sky_gain = rng.uniformf(0.4f, 2.0f);
    for (int c = 0; c < 3; ++c) {
        top[c] = palettes[pal][c] * sky_gain;
        bottom[c] = palettes[pal][3 + c] * sky_gain;
    }
    for (int y = 0; y < size; ++y) {
        float a = static_cast<float>(y) / (size - 1);
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c)
                hdr.at(y, x, c) = top[c] * (1 - a) + bottom[c] * a;
    }

    // highlight blob (sun or bright window) in the upper region
    bool has_sun = rng.uniform() < 0.75;
    if (has_sun) {
        float cx = rng.uniformf(0.15f, 0.85f) * size;
        float cy = rng.uniformf(0.10f, 0.45f) * size;
        float radius = rng.uniformf(0.05f, 0.22f) * size;
        float peak = rng.uniformf(4.0f, 32.0f);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                float d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                float g = peak * std::exp(-d2 / (2 * radius * radius));
                for (int c = 0; c < 3; ++c) hdr.at(y, x, c) += g * (c == 2 ? 0.85f : 1.0f);
            }
    }

    // textured occluders
    static const char* ground_names[4] = {"dark field", "rocky ground", "low ridge",
                                          "textured plain"};
    int ground_kind = rng.uniform_int(0, 3);
    auto noise1 = detail_data::value_noise(size, 6, rng);
    auto noise2 = detail_data::value_noise(size, 14, rng);
    int n_shapes = rng.uniform_int(1, 4);
    for (int s = 0; s < n_shapes; ++s) {
        bool disk = rng.uniform() < 0.4;
        float albedo[3];
        for (float& a : albedo) a = rng.uniformf(0.02f, 0.5f);
        float cx = rng.uniformf(0.0f, 1.0f) * size, cy = rng.uniformf(0.45f, 1.0f) * size;
        float w = rng.uniformf(0.2f, 0.7f) * size, h = rng.uniformf(0.15f, 0.5f) * size;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                bool inside = disk ? ((x - cx) * (x - cx) / (w * w * 0.25f) +
                                          (y - cy) * (y - cy) / (h * h * 0.25f) <=
                                      1.0f)
                                   : (std::abs(x - cx) < w * 0.5f && std::abs(y - cy) < h * 0.5f);
                if (!inside) continue;
                float tex = 0.7f + 0.3f * (0.6f * noise1[static_cast<size_t>(y) * size + x] +
                                           0.4f * noise2[static_cast<size_t>(y) * size + x]);
                for (int c = 0; c < 3; ++c) hdr.at(y, x, c) = albedo[c] * tex * sky_gain;
            }
    }

    // occasional deep shadow band
    if (rng.uniform() < 0.4) {
        int edge = rng.uniform_int(size / 2, size - 4);
        float dim = rng.uniformf(0.04f, 0.25f);
        for (int y = edge; y < size; ++y)
            for (int x = 0; x < size; ++x)
                for (int c = 0; c < 3; ++c) hdr.at(y, x, c) *= dim;
    }

    ToyScene scene;
    // auto exposure: median luminance to mid-gray
    std::vector<float> lum;
    lum.reserve(hdr.pixel_count());
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            lum.push_back(0.2126f * hdr.at(y, x, 0) + 0.7152f * hdr.at(y, x, 1) +
                          0.0722f * hdr.at(y, x, 2));
    std::nth_element(lum.begin(), lum.begin() + lum.size() / 2, lum.end());
    double median = std::max(1e-4f, lum[lum.size() / 2]);
    scene.base_ev = std::log2(0.35 / median);
    scene.hdr = std::move(hdr);
    scene.caption = std::string(palette_names[pal]) + " sky with " +
                    (has_sun ? "a bright highlight" : "soft light") + " over " +
                    ground_names[ground_kind];
    return scene;
}

struct SynthOptions {
    int n_train = 128;
    int n_val = 32;
    int size = 64;
    uint64_t seed = 0;
    double gamma = 2.2;
    bool write_hdr = false;      // also keep the radiance PFM per item
    double ev_offset_min = 2.5;  // magnitude of the exposure fault
    double ev_offset_max = 3.5;
};

// Writes gt_/lq_ png pairs, caption sidecars, and train/val manifests into
// out_dir. Per-item seeds derive from the corpus seed, so items can be
// synthesized independently and in parallel.
inline std::pair<std::vector<CorpusItem>, std::vector<CorpusItem>> synth_toy_corpus(
    const std::string& out_dir, const SynthOptions& opt) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    Rng corpus_rng(opt.seed);
    int total = opt.n_train + opt.n_val;
    std::vector<CorpusItem> items(static_cast<size_t>(total));
    std::string first_error;
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < total; ++i) {
        try {
            Rng item_rng = corpus_rng.fork(static_cast<uint64_t>(i));
            ToyScene scene = synth_toy_scene(opt.size, item_rng.next_u64());
            double offset = item_rng.uniformf(static_cast<float>(opt.ev_offset_min),
                                              static_cast<float>(opt.ev_offset_max));
            if (item_rng.uniform() < 0.5) offset = -offset;

            char name[32];
            std::snprintf(name, sizeof(name), "item_%04d", i);
            std::string stem = (fs::path(out_dir) / name).string();
            ImageBuffer gt = apply_exposure(scene.hdr, {scene.base_ev, opt.gamma, 8});
            ImageBuffer lq = apply_exposure(scene.hdr, {scene.base_ev + offset, opt.gamma, 8});
            save_png(gt, stem + "_gt.png");
            save_png(lq, stem + "_lq.png");
            std::ofstream(stem + ".txt") << scene.caption << "\n";
            if (opt.write_hdr) save_pfm(scene.hdr, stem + ".pfm");
            items[static_cast<size_t>(i)] = {stem + "_lq.png", stem + "_gt.png", stem + ".txt", ""};
        } catch (const std::exception& e) {
#pragma omp critical
            if (first_error.empty()) first_error = e.what();
        }
    }
    if (!first_error.empty()) throw std::runtime_error("corpus synthesis failed: " + first_error);
    std::vector<CorpusItem> train(items.begin(), items.begin() + opt.n_train);
    std::vector<CorpusItem> val(items.begin() + opt.n_train, items.end());
    save_manifest(train, (fs::path(out_dir) / "train.manifest").string());
    save_manifest(val, (fs::path(out_dir) / "val.manifest").string());
    return {train, val};
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open text file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    std::string s = ss.str();
    while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
    return s;
}

}  // namespace sagiri
