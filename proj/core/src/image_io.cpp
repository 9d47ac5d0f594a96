#include "bridgediff/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace bridgediff {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Tensor load_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    BD_CHECK(fp != nullptr, "load_png: cannot open '{}'", path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    BD_CHECK(png, "load_png: out of memory");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        fail("load_png: out of memory");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail("load_png: '{}' is not a valid PNG file", path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_uint_32 width = png_get_image_width(png, info);
    png_uint_32 height = png_get_image_height(png, info);
    int bit_depth = png_get_bit_depth(png, info);
    int color_type = png_get_color_type(png, info);

    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    std::vector<png_byte> row(png_get_rowbytes(png, info));
    Tensor img = Tensor::zeros({static_cast<int64_t>(height), static_cast<int64_t>(width), 3});
    float* dst = img.data_f32();
    for (png_uint_32 y = 0; y < height; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < width; ++x) {
            for (int c = 0; c < 3; ++c) {
                dst[(y * width + x) * 3 + c] = static_cast<float>(row[x * 3 + c]) / 255.0f;
            }
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void save_png(const std::filesystem::path& path, const Tensor& image) {
    BD_CHECK(image.rank() == 3 && image.dim(2) == 3, "save_png: expected [H,W,3], got {}",
             shape_str(image.shape()));
    int64_t h = image.dim(0), w = image.dim(1);

    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        FilePtr fp(std::fopen(tmp.c_str(), "wb"));
        BD_CHECK(fp != nullptr, "save_png: cannot open '{}' for writing", tmp.string());
        png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        BD_CHECK(png, "save_png: out of memory");
        png_infop info = png_create_info_struct(png);
        if (!info) {
            png_destroy_write_struct(&png, nullptr);
            fail("save_png: out of memory");
        }
        if (setjmp(png_jmpbuf(png))) {
            png_destroy_write_struct(&png, &info);
            fail("save_png: write to '{}' failed", tmp.string());
        }
        png_init_io(png, fp.get());
        // fixed settings keep the byte stream reproducible
        png_set_compression_level(png, 6);
        png_set_filter(png, 0, PNG_FILTER_NONE);
        png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                     PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                     PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);

        std::vector<png_byte> row(static_cast<size_t>(w) * 3);
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                for (int c = 0; c < 3; ++c) {
                    double v = image.at((y * w + x) * 3 + c);
                    v = std::min(1.0, std::max(0.0, v));
                    row[static_cast<size_t>(x * 3 + c)] =
                        static_cast<png_byte>(std::lround(v * 255.0));
                }
            }
            png_write_row(png, row.data());
        }
        png_write_end(png, nullptr);
        png_destroy_write_struct(&png, &info);
    }
    std::filesystem::rename(tmp, path);
}

Tensor resize_nearest(const Tensor& image, int side) {
    BD_CHECK(image.rank() == 3 && image.dim(2) == 3, "resize_nearest: expected [H,W,3], got {}",
             shape_str(image.shape()));
    int64_t h = image.dim(0), w = image.dim(1);
    if (h == side && w == side) return image.clone();
    Tensor out = Tensor::zeros({side, side, 3}, image.dtype());
    for (int64_t y = 0; y < side; ++y) {
        int64_t sy = y * h / side;
        for (int64_t x = 0; x < side; ++x) {
            int64_t sx = x * w / side;
            for (int c = 0; c < 3; ++c) {
                out.set((y * side + x) * 3 + c, image.at((sy * w + sx) * 3 + c));
            }
        }
    }
    return out;
}

}  // namespace bridgediff
