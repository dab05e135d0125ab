// End-to-end stage-2 refinement: encode the stage-1 output, run masked
// reverse sampling with the control U-Net conditioned on that latent and an
// optional prompt, decode, crop.
#pragma once

#include "sagiri/diffusion.hpp"
#include "sagiri/losses.hpp"
#include "sagiri/unet.hpp"
#include "sagiri/vae.hpp"

namespace sagiri {

struct RefineOptions {
    int n_steps = 30;
    uint64_t seed = 0;
    double guidance = 1.0;  // 1.0 = prompt passthrough, no extra pass
    MaskConvention convention = MaskConvention::shifted;
    SaturationMode saturation_mode = SaturationMode::all_channels;
    std::string trajectory_dir;  // when set, dump visited latents as pfm slices
};

// Debugging observer: writes each visited latent as per-channel grayscale PFM
// slices (step_TTT_cC.pfm) into dir. Values pass through unchanged, so slices
// can carry negative latents; the files are raw float records, not images.
inline SampleObserver make_trajectory_dumper(const std::string& dir) {
    std::filesystem::create_directories(dir);
    return [dir](int t, const Tensor& x) {
        int C = x.dim(1), H = x.dim(2), W = x.dim(3);
        for (int c = 0; c < C; ++c) {
            ImageBuffer slice(H, W, 1, ValueRange::hdr_linear, Colorspace::linear);
            for (int y = 0; y < H; ++y)
                for (int x2 = 0; x2 < W; ++x2)
                    slice.at(y, x2, 0) =
                        x.data[(static_cast<size_t>(c) * H + y) * W + x2];
            char name[48];
            std::snprintf(name, sizeof(name), "step_%03d_c%d.pfm", t, c);
            // bypass the nonnegativity validation: latents are signed
            std::string path = (std::filesystem::path(dir) / name).string();
            std::unique_ptr<std::FILE, detail_png::FileCloser> fp(
                std::fopen(path.c_str(), "wb"));
            if (!fp) throw ImageError(ImageError::Kind::io_failure, "cannot write " + path);
            std::fprintf(fp.get(), "Pf\n%d %d\n-1.0\n", W, H);
            for (int y = H - 1; y >= 0; --y)
                std::fwrite(slice.pixels.data() + static_cast<size_t>(y) * W, sizeof(float),
                            static_cast<size_t>(W), fp.get());
        }
    };
}

inline ImageBuffer refine(const ImageBuffer& stage1_img, const std::string& prompt,
                          const RegionMask* mask_override, const Vae& vae,
                          const ControlUnet& unet, const NoiseSchedule& sched,
                          const RefineOptions& opt = {}) {
    if (stage1_img.channels != 3)
        throw ImageError(ImageError::Kind::invalid_image, "refine expects a 3-channel image");
    ImageBuffer input = stage1_img.range == ValueRange::byte ? to_unit_float(stage1_img)
                                                             : stage1_img;
    if (input.range != ValueRange::unit_float)
        throw ImageError(ImageError::Kind::invalid_image, "refine expects byte or unit_float input");
    if (mask_override &&
        (mask_override->height != input.height || mask_override->width != input.width))
        throw ImageError(ImageError::Kind::invalid_image, "mask/image shape mismatch");

    int scale = vae.cfg.downsample_factor;
    // latent dims must stay even for the denoiser's downsample level
    ImageBuffer padded = reflect_pad_to_multiple(input, scale * 2);

    RegionMask pixel_mask(padded.height, padded.width);
    if (mask_override) {
        // reflect-pad the override the same way the image is padded
        for (int y = 0; y < padded.height; ++y) {
            int sy = y < input.height ? y : std::max(0, 2 * input.height - 2 - y);
            for (int x = 0; x < padded.width; ++x) {
                int sx = x < input.width ? x : std::max(0, 2 * input.width - 2 - x);
                pixel_mask.at(y, x) = mask_override->at(sy, sx);
            }
        }
    } else {
        pixel_mask = detect_unknown_mask(to_byte(padded), opt.saturation_mode);
    }
    RegionMask projected = project_mask_to_latent(pixel_mask, scale, vae.cfg.latent_channels);
    const Tensor& lat = *projected.latent_mask;  // [lc, h, w]
    Tensor latent_mask({1, lat.dim(0), lat.dim(1), lat.dim(2)}, lat.data);

    Tensor z_cond = vae.encode_image(padded);
    auto denoiser = [&](const Tensor& x, int t_orig) {
        return unet.predict_eps(x, t_orig, &z_cond, prompt, opt.guidance);
    };
    SampleObserver observer;
    if (!opt.trajectory_dir.empty()) observer = make_trajectory_dumper(opt.trajectory_dir);
    Tensor z_out = sample_loop(denoiser, z_cond, latent_mask, sched, opt.n_steps, opt.seed,
                               opt.convention, observer);
    ImageBuffer decoded = vae.decode_latent(z_out);
    decoded.colorspace = input.colorspace;
    return crop(decoded, input.height, input.width);
}

}  // namespace sagiri
