#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tdid/anchors.hpp"
#include "tdid/tensor.hpp"

namespace tdid {

using Rgb = std::array<std::uint8_t, 3>;

// 8-bit interleaved RGB raster.
struct RgbImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;  // row-major, 3 bytes per pixel

    RgbImage() = default;
    RgbImage(std::size_t w, std::size_t h, Rgb fill = {0, 0, 0});

    Rgb at(std::size_t x, std::size_t y) const {
        const auto* p = &pixels[3 * (y * width + x)];
        return {p[0], p[1], p[2]};
    }
    void set(std::size_t x, std::size_t y, Rgb c) {
        auto* p = &pixels[3 * (y * width + x)];
        p[0] = c[0];
        p[1] = c[1];
        p[2] = c[2];
    }
};

// Binary PPM (P6, maxval 255).
std::vector<std::uint8_t> encode_ppm(const RgbImage& image);
RgbImage decode_ppm(const std::vector<std::uint8_t>& bytes);
void write_ppm(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_ppm(const std::filesystem::path& path);

// [3,H,W] in [0,1] <-> 8-bit; tensor values are rounded and clamped.
Tensorf image_to_tensor(const RgbImage& image);
RgbImage tensor_to_image(const Tensorf& tensor);

Tensorf load_image(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const Tensorf& tensor);

// Zero-pads right/bottom of a [3,H,W] or [1,3,H,W] tensor to the next stride multiple.
Tensorf pad_to_stride(const Tensorf& image, std::size_t stride);

// Drawing helpers for annotated dumps.
void draw_rectangle(RgbImage& image, const Box& box, Rgb color, int thickness = 1);
// 3x5 bitmap digits, '.', and '-'; other characters render as blanks.
void draw_text(RgbImage& image, long x, long y, const std::string& text, Rgb color, int scale = 1);

}  // namespace tdid
