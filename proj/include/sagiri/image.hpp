// Image containers, PNG/PFM I/O, exposure simulation, saturation masks and
// degradation-pattern synthesis.
#pragma once

#include <png.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sagiri/tensor.hpp"

namespace sagiri {

enum class ValueRange { unit_float, byte, hdr_linear };
enum class Colorspace { srgb, linear };

struct ImageError : std::runtime_error {
    enum class Kind { missing_file, unsupported_format, corrupt_payload, invalid_image, io_failure };
    Kind kind;
    ImageError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

// H x W x C raster, channel-interleaved floats. Byte images hold integral
// values in [0,255]; unit_float in [0,1]; hdr_linear nonnegative.
struct ImageBuffer {
    int height = 0, width = 0, channels = 0;
    std::vector<float> pixels;  // row-major, interleaved
    ValueRange range = ValueRange::unit_float;
    Colorspace colorspace = Colorspace::srgb;

    ImageBuffer() = default;
    ImageBuffer(int h, int w, int c, ValueRange r, Colorspace cs = Colorspace::srgb)
        : height(h), width(w), channels(c),
          pixels(static_cast<size_t>(h) * w * c, 0.0f), range(r), colorspace(cs) {}

    float& at(int y, int x, int c) {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    float at(int y, int x, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    size_t pixel_count() const { return static_cast<size_t>(height) * width; }
};

inline void validate(const ImageBuffer& img) {
    if (img.channels != 1 && img.channels != 3)
        throw ImageError(ImageError::Kind::invalid_image, "channel count must be 1 or 3");
    for (float v : img.pixels) {
        if (!std::isfinite(v))
            throw ImageError(ImageError::Kind::invalid_image, "non-finite pixel value");
        switch (img.range) {
            case ValueRange::byte:
                if (v < 0.0f || v > 255.0f || v != std::floor(v))
                    throw ImageError(ImageError::Kind::invalid_image,
                                     "byte image must hold integers in [0,255]");
                break;
            case ValueRange::unit_float:
                if (v < 0.0f || v > 1.0f)
                    throw ImageError(ImageError::Kind::invalid_image, "unit_float outside [0,1]");
                break;
            case ValueRange::hdr_linear:
                if (v < 0.0f)
                    throw ImageError(ImageError::Kind::invalid_image, "hdr_linear negative value");
                break;
        }
    }
}

inline ImageBuffer to_unit_float(const ImageBuffer& img) {
    if (img.range == ValueRange::unit_float) return img;
    if (img.range != ValueRange::byte)
        throw ImageError(ImageError::Kind::invalid_image, "to_unit_float expects byte input");
    ImageBuffer out(img.height, img.width, img.channels, ValueRange::unit_float, img.colorspace);
    for (size_t i = 0; i < img.pixels.size(); ++i) out.pixels[i] = img.pixels[i] / 255.0f;
    return out;
}

inline ImageBuffer to_byte(const ImageBuffer& img) {
    if (img.range == ValueRange::byte) return img;
    if (img.range != ValueRange::unit_float)
        throw ImageError(ImageError::Kind::invalid_image, "to_byte expects unit_float input");
    ImageBuffer out(img.height, img.width, img.channels, ValueRange::byte, img.colorspace);
    for (size_t i = 0; i < img.pixels.size(); ++i)
        out.pixels[i] = std::round(std::min(1.0f, std::max(0.0f, img.pixels[i])) * 255.0f);
    return out;
}

// ---------------------------------------------------------------------------
// masks
// ---------------------------------------------------------------------------

// Per-pixel known(1)/unknown(0) map plus its latent-space projection.
struct RegionMask {
    int height = 0, width = 0;
    std::vector<float> pixel_mask;  // 0/1
    // latent projection, [channels, h, w] with identical channel slices
    std::optional<Tensor> latent_mask;
    int scale = 1;

    RegionMask() = default;
    RegionMask(int h, int w) : height(h), width(w), pixel_mask(static_cast<size_t>(h) * w, 1.0f) {}
    float& at(int y, int x) { return pixel_mask[static_cast<size_t>(y) * width + x]; }
    float at(int y, int x) const { return pixel_mask[static_cast<size_t>(y) * width + x]; }
    double known_fraction() const {
        double s = 0;
        for (float v : pixel_mask) s += v;
        return s / static_cast<double>(pixel_mask.size());
    }
};

struct ExposureSpec {
    double ev = 0.0;
    double gamma = 2.2;
    int quantize_bits = 8;
};

struct DegradationSpec {
    int n_lines_min = 1, n_lines_max = 8;
    int thickness_min = 5, thickness_max = 30;  // px at 256x256, scaled proportionally
    int dilation_radius = 8;
    double mask_blur_sigma = 12.0;
    double content_blur_sigma = 10.0;
    uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// PNG I/O (8-bit gray or RGB)
// ---------------------------------------------------------------------------

namespace detail_png {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};

}  // namespace detail_png

inline ImageBuffer load_png(const std::string& path) {
    std::unique_ptr<std::FILE, detail_png::FileCloser> fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw ImageError(ImageError::Kind::missing_file, "cannot open " + path);
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8))
        throw ImageError(ImageError::Kind::unsupported_format, "not a PNG file: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageError(ImageError::Kind::corrupt_payload, "corrupt PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info), h = png_get_image_height(png, info);
    int depth = png_get_bit_depth(png, info);
    int color = png_get_color_type(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    int C = png_get_channels(png, info);
    if (C != 1 && C != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageError(ImageError::Kind::unsupported_format, "unsupported channel count");
    }

    std::vector<png_byte> rowbuf(static_cast<size_t>(w) * C);
    ImageBuffer img(static_cast<int>(h), static_cast<int>(w), C, ValueRange::byte);
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, rowbuf.data(), nullptr);
        for (size_t i = 0; i < rowbuf.size(); ++i)
            img.pixels[static_cast<size_t>(y) * w * C + i] = static_cast<float>(rowbuf[i]);
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

inline void save_png(const ImageBuffer& img, const std::string& path) {
    validate(img);
    if (img.range != ValueRange::byte)
        throw ImageError(ImageError::Kind::invalid_image, "save_png expects a byte image");
    std::unique_ptr<std::FILE, detail_png::FileCloser> fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw ImageError(ImageError::Kind::io_failure, "cannot write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw ImageError(ImageError::Kind::io_failure, "PNG write failure: " + path);
    }
    png_init_io(png, fp.get());
    int color = img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
    png_set_IHDR(png, info, img.width, img.height, 8, color, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> rowbuf(static_cast<size_t>(img.width) * img.channels);
    for (int y = 0; y < img.height; ++y) {
        for (size_t i = 0; i < rowbuf.size(); ++i)
            rowbuf[i] = static_cast<png_byte>(
                img.pixels[static_cast<size_t>(y) * img.width * img.channels + i]);
        png_write_row(png, rowbuf.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// ---------------------------------------------------------------------------
// PFM I/O (standard portable float map: bottom-up scanlines, scale sign gives
// endianness; negative = little-endian)
// ---------------------------------------------------------------------------

inline ImageBuffer load_pfm(const std::string& path) {
    std::unique_ptr<std::FILE, detail_png::FileCloser> fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw ImageError(ImageError::Kind::missing_file, "cannot open " + path);
    char tag[3] = {0, 0, 0};
    if (std::fscanf(fp.get(), "%2s", tag) != 1)
        throw ImageError(ImageError::Kind::corrupt_payload, "PFM header missing: " + path);
    int C;
    if (std::strcmp(tag, "PF") == 0)
        C = 3;
    else if (std::strcmp(tag, "Pf") == 0)
        C = 1;
    else
        throw ImageError(ImageError::Kind::unsupported_format, "not a PFM file: " + path);
    int w = 0, h = 0;
    double scale = 0;
    if (std::fscanf(fp.get(), "%d %d %lf", &w, &h, &scale) != 3 || w <= 0 || h <= 0 || scale == 0)
        throw ImageError(ImageError::Kind::corrupt_payload, "bad PFM header: " + path);
    std::fgetc(fp.get());  // single whitespace after scale
    bool little_endian = scale < 0;
    std::vector<float> row(static_cast<size_t>(w) * C);
    ImageBuffer img(h, w, C, ValueRange::hdr_linear, Colorspace::linear);
    for (int y = h - 1; y >= 0; --y) {  // bottom-up storage
        if (std::fread(row.data(), sizeof(float), row.size(), fp.get()) != row.size())
            throw ImageError(ImageError::Kind::corrupt_payload, "truncated PFM body: " + path);
        if (!little_endian)
            for (float& v : row) {
                uint32_t u;
                std::memcpy(&u, &v, 4);
                u = __builtin_bswap32(u);
                std::memcpy(&v, &u, 4);
            }
        float mag = std::abs(static_cast<float>(scale));
        for (size_t i = 0; i < row.size(); ++i)
            img.pixels[static_cast<size_t>(y) * w * C + i] = row[i] * (mag == 1.0f ? 1.0f : mag);
    }
    return img;
}

inline void save_pfm(const ImageBuffer& img, const std::string& path) {
    validate(img);
    if (img.range != ValueRange::hdr_linear)
        throw ImageError(ImageError::Kind::invalid_image, "save_pfm expects an hdr_linear image");
    if (img.channels != 1 && img.channels != 3)
        throw ImageError(ImageError::Kind::invalid_image, "PFM supports 1 or 3 channels");
    std::unique_ptr<std::FILE, detail_png::FileCloser> fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw ImageError(ImageError::Kind::io_failure, "cannot write " + path);
    std::fprintf(fp.get(), "%s\n%d %d\n-1.0\n", img.channels == 3 ? "PF" : "Pf", img.width,
                 img.height);
    for (int y = img.height - 1; y >= 0; --y) {
        const float* row = img.pixels.data() + static_cast<size_t>(y) * img.width * img.channels;
        if (std::fwrite(row, sizeof(float), static_cast<size_t>(img.width) * img.channels,
                        fp.get()) != static_cast<size_t>(img.width) * img.channels)
            throw ImageError(ImageError::Kind::io_failure, "PFM write failure: " + path);
    }
}

// Format inferred from extension: .png (8-bit LDR) or .pfm (float HDR).
inline ImageBuffer load_image(const std::string& path) {
    if (!std::filesystem::exists(path))
        throw ImageError(ImageError::Kind::missing_file, "no such file: " + path);
    auto ext = std::filesystem::path(path).extension().string();
    for (auto& c : ext) c = static_cast<char>(std::tolower(c));
    if (ext == ".png") return load_png(path);
    if (ext == ".pfm") return load_pfm(path);
    throw ImageError(ImageError::Kind::unsupported_format, "unsupported image format: " + path);
}

inline void save_image(const ImageBuffer& img, const std::string& path) {
    auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty() && !std::filesystem::exists(parent))
        throw ImageError(ImageError::Kind::io_failure, "parent directory missing: " + path);
    auto ext = std::filesystem::path(path).extension().string();
    for (auto& c : ext) c = static_cast<char>(std::tolower(c));
    if (ext == ".png")
        save_png(img, path);
    else if (ext == ".pfm")
        save_pfm(img, path);
    else
        throw ImageError(ImageError::Kind::unsupported_format, "unsupported image format: " + path);
}

// ---------------------------------------------------------------------------
// exposure simulation
// ---------------------------------------------------------------------------

// out = round(clip(hdr * 2^ev, 0, 1)^(1/gamma) * (2^bits - 1))
inline ImageBuffer apply_exposure(const ImageBuffer& hdr, const ExposureSpec& spec) {
    if (hdr.range != ValueRange::hdr_linear)
        throw ImageError(ImageError::Kind::invalid_image, "apply_exposure expects hdr_linear input");
    if (spec.quantize_bits < 1 || spec.quantize_bits > 16)
        throw ImageError(ImageError::Kind::invalid_image, "quantize_bits must be in [1,16]");
    if (spec.gamma <= 0)
        throw ImageError(ImageError::Kind::invalid_image, "gamma must be positive");
    double gain = std::pow(2.0, spec.ev);
    double maxv = std::pow(2.0, spec.quantize_bits) - 1.0;
    ImageBuffer out(hdr.height, hdr.width, hdr.channels, ValueRange::byte, Colorspace::srgb);
    for (size_t i = 0; i < hdr.pixels.size(); ++i) {
        double v = std::min(1.0, std::max(0.0, static_cast<double>(hdr.pixels[i]) * gain));
        out.pixels[i] = static_cast<float>(std::round(std::pow(v, 1.0 / spec.gamma) * maxv));
    }
    return out;
}

// ---------------------------------------------------------------------------
// saturation mask
// ---------------------------------------------------------------------------

enum class SaturationMode { all_channels, any_channel };

// Pixels at 0 or 255 are unknown. all_channels: every channel clipped the same
// way; any_channel: any single clipped channel suffices.
inline RegionMask detect_unknown_mask(const ImageBuffer& ldr,
                                      SaturationMode mode = SaturationMode::all_channels) {
    if (ldr.range != ValueRange::byte)
        throw ImageError(ImageError::Kind::invalid_image, "detect_unknown_mask expects byte input");
    RegionMask mask(ldr.height, ldr.width);
    for (int y = 0; y < ldr.height; ++y)
        for (int x = 0; x < ldr.width; ++x) {
            bool all_hi = true, all_lo = true, any_sat = false;
            for (int c = 0; c < ldr.channels; ++c) {
                float v = ldr.at(y, x, c);
                all_hi &= (v == 255.0f);
                all_lo &= (v == 0.0f);
                any_sat |= (v == 255.0f || v == 0.0f);
            }
            bool unknown = (mode == SaturationMode::all_channels) ? (all_hi || all_lo) : any_sat;
            mask.at(y, x) = unknown ? 0.0f : 1.0f;
        }
    return mask;
}

// Latent cell is known iff every pixel in its scale x scale footprint is known.
inline RegionMask project_mask_to_latent(const RegionMask& mask, int scale, int channels) {
    if (scale < 1) throw ImageError(ImageError::Kind::invalid_image, "scale must be >= 1");
    if (mask.height % scale != 0 || mask.width % scale != 0)
        throw ImageError(ImageError::Kind::invalid_image,
                         "mask dims not divisible by scale (pad the image upstream)");
    int h = mask.height / scale, w = mask.width / scale;
    RegionMask out = mask;
    out.scale = scale;
    Tensor lat({channels, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float cell = 1.0f;
            for (int dy = 0; dy < scale && cell > 0; ++dy)
                for (int dx = 0; dx < scale; ++dx)
                    if (mask.at(y * scale + dy, x * scale + dx) == 0.0f) {
                        cell = 0.0f;
                        break;
                    }
            for (int c = 0; c < channels; ++c)
                lat.data[(static_cast<size_t>(c) * h + y) * w + x] = cell;
        }
    out.latent_mask = std::move(lat);
    return out;
}

inline RegionMask load_mask_png(const std::string& path) {
    ImageBuffer img = load_png(path);
    RegionMask m(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) m.at(y, x) = img.at(y, x, 0) >= 128.0f ? 1.0f : 0.0f;
    return m;
}

inline void save_mask_png(const RegionMask& mask, const std::string& path) {
    ImageBuffer img(mask.height, mask.width, 1, ValueRange::byte);
    for (size_t i = 0; i < mask.pixel_mask.size(); ++i)
        img.pixels[i] = mask.pixel_mask[i] > 0 ? 255.0f : 0.0f;
    save_png(img, path);
}

// ---------------------------------------------------------------------------
// padding / cropping
// ---------------------------------------------------------------------------

inline int round_up(int v, int multiple) { return (v + multiple - 1) / multiple * multiple; }

inline ImageBuffer reflect_pad_to_multiple(const ImageBuffer& img, int multiple) {
    int H = round_up(img.height, multiple), W = round_up(img.width, multiple);
    if (H == img.height && W == img.width) return img;
    ImageBuffer out(H, W, img.channels, img.range, img.colorspace);
    for (int y = 0; y < H; ++y) {
        int sy = y < img.height ? y : 2 * img.height - 2 - y;
        sy = std::max(0, std::min(img.height - 1, sy));
        for (int x = 0; x < W; ++x) {
            int sx = x < img.width ? x : 2 * img.width - 2 - x;
            sx = std::max(0, std::min(img.width - 1, sx));
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
        }
    }
    return out;
}

inline ImageBuffer crop(const ImageBuffer& img, int h, int w) {
    if (h == img.height && w == img.width) return img;
    ImageBuffer out(h, w, img.channels, img.range, img.colorspace);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y, x, c);
    return out;
}

// ---------------------------------------------------------------------------
// degradation synthesis
// ---------------------------------------------------------------------------

namespace detail_img {

// separable gaussian, replicate boundary, kernel truncated at 3 sigma
inline void gaussian_blur_plane(const float* src, float* dst, int H, int W, double sigma) {
    int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<size_t>(2 * r + 1));
    double sum = 0;
    for (int i = -r; i <= r; ++i) {
        k[static_cast<size_t>(i + r)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += k[static_cast<size_t>(i + r)];
    }
    for (auto& v : k) v /= sum;
    std::vector<float> tmp(static_cast<size_t>(H) * W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0;
            for (int i = -r; i <= r; ++i) {
                int sx = std::max(0, std::min(W - 1, x + i));
                acc += k[static_cast<size_t>(i + r)] * src[static_cast<size_t>(y) * W + sx];
            }
            tmp[static_cast<size_t>(y) * W + x] = static_cast<float>(acc);
        }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0;
            for (int i = -r; i <= r; ++i) {
                int sy = std::max(0, std::min(H - 1, y + i));
                acc += k[static_cast<size_t>(i + r)] * tmp[static_cast<size_t>(sy) * W + x];
            }
            dst[static_cast<size_t>(y) * W + x] = static_cast<float>(acc);
        }
}

inline void draw_segment(std::vector<float>& m, int H, int W, double x0, double y0, double x1,
                         double y1, double half_thick) {
    int lo_y = std::max(0, static_cast<int>(std::floor(std::min(y0, y1) - half_thick - 1)));
    int hi_y = std::min(H - 1, static_cast<int>(std::ceil(std::max(y0, y1) + half_thick + 1)));
    int lo_x = std::max(0, static_cast<int>(std::floor(std::min(x0, x1) - half_thick - 1)));
    int hi_x = std::min(W - 1, static_cast<int>(std::ceil(std::max(x0, x1) + half_thick + 1)));
    double dx = x1 - x0, dy = y1 - y0;
    double len2 = dx * dx + dy * dy;
    for (int y = lo_y; y <= hi_y; ++y)
        for (int x = lo_x; x <= hi_x; ++x) {
            double t = len2 > 0 ? ((x - x0) * dx + (y - y0) * dy) / len2 : 0.0;
            t = std::max(0.0, std::min(1.0, t));
            double px = x0 + t * dx, py = y0 + t * dy;
            double d2 = (x - px) * (x - px) + (y - py) * (y - py);
            if (d2 <= half_thick * half_thick) m[static_cast<size_t>(y) * W + x] = 1.0f;
        }
}

inline void dilate_disk(std::vector<float>& m, int H, int W, int radius) {
    if (radius <= 0) return;
    std::vector<std::pair<int, int>> offsets;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
            if (dy * dy + dx * dx <= radius * radius) offsets.push_back({dy, dx});
    std::vector<float> out(m.size(), 0.0f);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            if (m[static_cast<size_t>(y) * W + x] == 0.0f) continue;
            for (auto [dy, dx] : offsets) {
                int ny = y + dy, nx = x + dx;
                if (ny >= 0 && ny < H && nx >= 0 && nx < W)
                    out[static_cast<size_t>(ny) * W + nx] = 1.0f;
            }
        }
    m.swap(out);
}

}  // namespace detail_img

// Random soft stroke mask blends the image with a blurred copy of itself:
// out = img + w * (blur(img) - img). Deterministic in spec.seed. The returned
// mask marks the degraded support as unknown (0).
inline std::pair<ImageBuffer, RegionMask> generate_degradation(const ImageBuffer& img,
                                                               const DegradationSpec& spec) {
    if (img.range == ValueRange::hdr_linear)
        throw ImageError(ImageError::Kind::invalid_image,
                         "generate_degradation expects unit_float or byte input");
    if (spec.n_lines_max < spec.n_lines_min || spec.thickness_max < spec.thickness_min)
        throw ImageError(ImageError::Kind::invalid_image, "degradation spec has an empty range");
    if (spec.mask_blur_sigma <= 0 || spec.content_blur_sigma <= 0)
        throw ImageError(ImageError::Kind::invalid_image, "blur sigmas must be positive");

    int H = img.height, W = img.width;
    double geom = std::min(H, W) / 256.0;  // spec thicknesses are quoted at 256^2

    Rng rng(spec.seed);
    std::vector<float> stroke(static_cast<size_t>(H) * W, 0.0f);
    int n_lines = rng.uniform_int(spec.n_lines_min, spec.n_lines_max);
    for (int i = 0; i < n_lines; ++i) {
        double x0 = rng.uniform() * (W - 1), y0 = rng.uniform() * (H - 1);
        double x1 = rng.uniform() * (W - 1), y1 = rng.uniform() * (H - 1);
        double thick =
            std::max(1.0, rng.uniform_int(spec.thickness_min, spec.thickness_max) * geom);
        detail_img::draw_segment(stroke, H, W, x0, y0, x1, y1, thick * 0.5);
    }
    detail_img::dilate_disk(stroke, H, W,
                            std::max(1, static_cast<int>(std::lround(spec.dilation_radius * geom))));
    std::vector<float> weight(stroke.size());
    detail_img::gaussian_blur_plane(stroke.data(), weight.data(), H, W,
                                    std::max(0.5, spec.mask_blur_sigma * geom));

    ImageBuffer blurred = img;
    double csigma = std::max(0.5, spec.content_blur_sigma * geom);
    std::vector<float> plane(static_cast<size_t>(H) * W), plane_out(plane.size());
    for (int c = 0; c < img.channels; ++c) {
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) plane[static_cast<size_t>(y) * W + x] = img.at(y, x, c);
        detail_img::gaussian_blur_plane(plane.data(), plane_out.data(), H, W, csigma);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) blurred.at(y, x, c) = plane_out[static_cast<size_t>(y) * W + x];
    }

    ImageBuffer out = img;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            float w = weight[static_cast<size_t>(y) * W + x];
            for (int c = 0; c < img.channels; ++c)
                out.at(y, x, c) = img.at(y, x, c) + w * (blurred.at(y, x, c) - img.at(y, x, c));
        }
    if (img.range == ValueRange::byte)
        for (float& v : out.pixels) v = std::round(std::min(255.0f, std::max(0.0f, v)));
    else
        for (float& v : out.pixels) v = std::min(1.0f, std::max(0.0f, v));

    RegionMask mask(H, W);
    for (size_t i = 0; i < weight.size(); ++i) mask.pixel_mask[i] = weight[i] > 0.0f ? 0.0f : 1.0f;
    return {std::move(out), std::move(mask)};
}

// ---------------------------------------------------------------------------
// Tensor bridging (HWC image <-> CHW tensor)
// ---------------------------------------------------------------------------

inline Tensor image_to_chw(const ImageBuffer& img) {
    Tensor t({img.channels, img.height, img.width});
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                t.data[(static_cast<size_t>(c) * img.height + y) * img.width + x] = img.at(y, x, c);
    return t;
}

inline ImageBuffer chw_to_image(const Tensor& t, ValueRange range = ValueRange::unit_float) {
    assert(t.rank() == 3);
    int C = t.dim(0), H = t.dim(1), W = t.dim(2);
    ImageBuffer img(H, W, C, range);
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                img.at(y, x, c) = t.data[(static_cast<size_t>(c) * H + y) * W + x];
    return img;
}

}  // namespace sagiri
