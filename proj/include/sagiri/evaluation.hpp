// Metric computation, directory-level benchmarking, and the plug-and-play
// protocol that refines third-party baseline outputs in place.
#pragma once

#include <cstdio>

#include "sagiri/data.hpp"
#include "sagiri/losses.hpp"
#include "sagiri/sagiri.hpp"

namespace sagiri {

// 10*log10(1/MSE) for unit-range images; identical pair caps at the sentinel
inline double psnr(const ImageBuffer& pred, const ImageBuffer& target) {
    constexpr double kSentinel = 99.0;
    double m = mse(pred, target);
    if (m <= 0.0) return kSentinel;
    return std::min(kSentinel, 10.0 * std::log10(1.0 / m));
}

struct MetricsRecord {
    std::string id;
    bool has_ref = false;
    double psnr_db = 0;
    double ssim = 0;
    double l_cd_hard = 0;
    std::map<std::string, double> external;
    std::string error;  // per-item plug-in or pairing failures, non-fatal
};

struct MetricPlugin {
    std::string name;
    std::string command;  // invoked as "<command> <image-path>"
};

namespace detail_eval {

inline std::vector<std::string> list_images(const std::string& dir) {
    namespace fs = std::filesystem;
    std::vector<std::string> names;
    for (auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        std::string ext = e.path().extension().string();
        for (auto& c : ext) c = static_cast<char>(std::tolower(c));
        std::string stem = e.path().stem().string();
        bool sidecar_mask = stem.size() > 5 && stem.substr(stem.size() - 5) == ".mask";
        if ((ext == ".png" || ext == ".pfm") && !sidecar_mask)
            names.push_back(e.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    return names;
}

// run "<command> <path>", parse one real from stdout; returns false on any
// failure (nonzero exit, no parseable number)
inline bool run_plugin(const std::string& command, const std::string& path, double& value) {
    std::string cmd = command + " \"" + path + "\" 2>/dev/null";
    std::FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return false;
    char buf[256];
    std::string out;
    while (std::fgets(buf, sizeof(buf), pipe)) out += buf;
    int status = pclose(pipe);
    if (status != 0) return false;
    try {
        size_t pos = 0;
        value = std::stod(out, &pos);
        return true;
    } catch (...) {
        return false;
    }
}

}  // namespace detail_eval

// Full-reference metrics where filenames align with ref_dir; external plug-in
// scores per image; aggregate means appended as the final CSV row.
inline std::vector<MetricsRecord> evaluate_directory(const std::string& pred_dir,
                                                     const std::string& ref_dir,
                                                     const std::vector<MetricPlugin>& plugins = {},
                                                     const std::string& csv_path = "") {
    namespace fs = std::filesystem;
    auto names = detail_eval::list_images(pred_dir);
    if (names.empty()) throw std::runtime_error("no images found in " + pred_dir);

    std::vector<MetricsRecord> records;
    for (const auto& name : names) {
        MetricsRecord rec;
        rec.id = name;
        std::string pred_path = (fs::path(pred_dir) / name).string();
        ImageBuffer pred;
        try {
            pred = to_unit_float(load_image(pred_path));
        } catch (const std::exception& e) {
            rec.error = e.what();
            records.push_back(std::move(rec));
            continue;
        }
        if (!ref_dir.empty()) {
            std::string ref_path = (fs::path(ref_dir) / name).string();
            if (fs::exists(ref_path)) {
                ImageBuffer ref = to_unit_float(load_image(ref_path));
                rec.has_ref = true;
                rec.psnr_db = psnr(pred, ref);
                rec.ssim = pred.height >= 11 && pred.width >= 11
                               ? ssim_index(pred, ref, SsimConfig::gaussian())
                               : ssim_index(pred, ref);
                rec.l_cd_hard = color_distribution_loss(pred, ref, 256, HistMode::hard);
            } else {
                rec.error = "missing reference";
            }
        }
        for (const auto& plugin : plugins) {
            double value = 0;
            if (detail_eval::run_plugin(plugin.command, pred_path, value))
                rec.external[plugin.name] = value;
            else
                rec.error += (rec.error.empty() ? "" : "; ") + plugin.name + " failed";
        }
        records.push_back(std::move(rec));
    }

    if (!csv_path.empty()) {
        std::ofstream csv(csv_path);
        csv << "item,psnr,ssim,l_cd_hard";
        for (const auto& p : plugins) csv << ',' << p.name;
        csv << ",error\n";
        csv << std::setprecision(9);
        auto row = [&](const MetricsRecord& r) {
            csv << r.id << ',';
            if (r.has_ref)
                csv << r.psnr_db << ',' << r.ssim << ',' << r.l_cd_hard;
            else
                csv << ",,";
            for (const auto& p : plugins) {
                csv << ',';
                auto it = r.external.find(p.name);
                if (it != r.external.end()) csv << it->second;
            }
            csv << ',' << r.error << '\n';
        };
        for (const auto& r : records) row(r);
        // aggregate means over the items that produced each metric
        MetricsRecord mean;
        mean.id = "mean";
        int n_ref = 0;
        for (const auto& r : records)
            if (r.has_ref) {
                mean.psnr_db += r.psnr_db;
                mean.ssim += r.ssim;
                mean.l_cd_hard += r.l_cd_hard;
                ++n_ref;
            }
        if (n_ref > 0) {
            mean.has_ref = true;
            mean.psnr_db /= n_ref;
            mean.ssim /= n_ref;
            mean.l_cd_hard /= n_ref;
        }
        for (const auto& p : plugins) {
            double acc = 0;
            int n = 0;
            for (const auto& r : records) {
                auto it = r.external.find(p.name);
                if (it != r.external.end()) {
                    acc += it->second;
                    ++n;
                }
            }
            if (n > 0) mean.external[p.name] = acc / n;
        }
        row(mean);
    }
    return records;
}

struct RefineDirectoryOptions {
    RefineOptions refine;
    SaturationMode saturation_mode = SaturationMode::all_channels;
    std::string manifest_csv;  // defaults to <out>/refine_manifest.csv
};

struct RefineDirectoryEntry {
    std::string input, output;
    double mask_coverage = 0;  // unknown fraction
    uint64_t seed = 0;
    std::string error;
};

// Per image: sidecar mask (name.mask.png) takes precedence over detection,
// sidecar prompt (name.txt) is optional; outputs keep their dimensions and
// filenames. Per-item seeds derive from the base seed and the item index.
inline std::vector<RefineDirectoryEntry> refine_directory(const std::string& input_dir,
                                                          const std::string& output_dir,
                                                          const Vae& vae, const ControlUnet& unet,
                                                          const NoiseSchedule& sched,
                                                          RefineDirectoryOptions opt = {}) {
    namespace fs = std::filesystem;
    fs::create_directories(output_dir);
    auto names = detail_eval::list_images(input_dir);
    std::vector<RefineDirectoryEntry> manifest;
    Rng base(opt.refine.seed);
    for (size_t i = 0; i < names.size(); ++i) {
        RefineDirectoryEntry entry;
        entry.input = (fs::path(input_dir) / names[i]).string();
        entry.output = (fs::path(output_dir) / names[i]).string();
        entry.seed = base.fork(i).next_u64();
        try {
            ImageBuffer img = load_image(entry.input);
            std::string stem = fs::path(entry.input).parent_path() /
                               fs::path(entry.input).stem();
            RegionMask mask;
            bool has_override = fs::exists(stem + ".mask.png");
            if (has_override) mask = load_mask_png(stem + ".mask.png");
            std::string prompt;
            if (fs::exists(stem + ".txt")) prompt = read_text_file(stem + ".txt");

            RefineOptions ropt = opt.refine;
            ropt.seed = entry.seed;
            ropt.saturation_mode = opt.saturation_mode;
            ImageBuffer out =
                refine(img, prompt, has_override ? &mask : nullptr, vae, unet, sched, ropt);
            if (!has_override) mask = detect_unknown_mask(to_byte(to_unit_float(img)),
                                                          opt.saturation_mode);
            entry.mask_coverage = 1.0 - mask.known_fraction();
            save_png(to_byte(out), entry.output);
        } catch (const std::exception& e) {
            entry.error = e.what();
            std::fprintf(stderr, "refine: skipping %s: %s\n", entry.input.c_str(), e.what());
        }
        manifest.push_back(std::move(entry));
    }
    std::string csv_path = opt.manifest_csv.empty()
                               ? (fs::path(output_dir) / "refine_manifest.csv").string()
                               : opt.manifest_csv;
    std::ofstream csv(csv_path);
    csv << "input,output,mask_coverage,seed,error\n";
    for (const auto& e : manifest)
        csv << e.input << ',' << (e.error.empty() ? e.output : "") << ',' << e.mask_coverage << ','
            << e.seed << ',' << e.error << '\n';
    return manifest;
}

}  // namespace sagiri
