#include "tdid/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "tdid/checkpoint.hpp"
#include "tdid/error.hpp"

namespace tdid {

RgbImage::RgbImage(std::size_t w, std::size_t h, Rgb fill) : width(w), height(h), pixels(w * h * 3) {
    for (std::size_t i = 0; i < w * h; ++i) {
        pixels[3 * i] = fill[0];
        pixels[3 * i + 1] = fill[1];
        pixels[3 * i + 2] = fill[2];
    }
}

std::vector<std::uint8_t> encode_ppm(const RgbImage& image) {
    const auto header = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), image.pixels.begin(), image.pixels.end());
    return out;
}

RgbImage decode_ppm(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    std::size_t start = 0;
    auto read_int = [&](const char* what) {
        skip_space();
        start = pos;
        std::uint64_t v = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            v = v * 10 + (bytes[pos] - '0');
            if (v > (1u << 24)) throw ParseError(std::string("PPM ") + what + " too large", start);
            ++pos;
        }
        if (pos == start) throw ParseError(std::string("PPM: expected ") + what, start);
        return static_cast<std::size_t>(v);
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw ParseError("PPM: missing P6 magic", 0);
    pos = 2;
    const auto w = read_int("width");
    const auto h = read_int("height");
    const auto maxval = read_int("maxval");
    const auto maxval_pos = start;
    if (w == 0 || h == 0) throw ParseError("PPM: zero image extent", maxval_pos);
    if (maxval != 255) throw ParseError("PPM: only maxval 255 is supported", maxval_pos);
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw ParseError("PPM: expected whitespace after header", pos);
    ++pos;
    const std::size_t need = w * h * 3;
    if (bytes.size() - pos < need) throw ParseError("PPM: pixel data truncated", bytes.size());
    if (bytes.size() - pos > need) throw ParseError("PPM: trailing bytes after pixel data", pos + need);
    RgbImage img;
    img.width = w;
    img.height = h;
    img.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.end());
    return img;
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) { write_file_bytes(path, encode_ppm(image)); }

RgbImage read_ppm(const std::filesystem::path& path) {
    try {
        return decode_ppm(read_file_bytes(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what(), e.offset());
    }
}

Tensorf image_to_tensor(const RgbImage& image) {
    const std::size_t hw = image.width * image.height;
    std::vector<float> data(3 * hw);
    for (std::size_t i = 0; i < hw; ++i) {
        for (std::size_t c = 0; c < 3; ++c) data[c * hw + i] = static_cast<float>(image.pixels[3 * i + c]) / 255.0f;
    }
    return Tensorf::from_data({3, image.height, image.width}, std::move(data));
}

RgbImage tensor_to_image(const Tensorf& tensor) {
    const Tensorf& t = tensor;
    std::size_t h, w;
    if (t.rank() == 3 && t.dim(0) == 3) {
        h = t.dim(1);
        w = t.dim(2);
    } else if (t.rank() == 4 && t.dim(0) == 1 && t.dim(1) == 3) {
        h = t.dim(2);
        w = t.dim(3);
    } else {
        throw InvalidShapeError("expected [3,H,W] image tensor, got " + shape_str(t.shape()));
    }
    RgbImage img(w, h);
    const std::size_t hw = w * h;
    for (std::size_t i = 0; i < hw; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            const float v = std::clamp(t.data()[c * hw + i], 0.0f, 1.0f);
            img.pixels[3 * i + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
        }
    }
    return img;
}

Tensorf load_image(const std::filesystem::path& path) { return image_to_tensor(read_ppm(path)); }

void save_image(const std::filesystem::path& path, const Tensorf& tensor) { write_ppm(path, tensor_to_image(tensor)); }

Tensorf pad_to_stride(const Tensorf& image, std::size_t stride) {
    if (stride == 0) throw ConfigError("pad_to_stride: stride must be >= 1");
    const bool batched = image.rank() == 4;
    if (!(image.rank() == 3 || (batched && image.dim(0) == 1))) {
        throw InvalidShapeError("pad_to_stride: expected [C,H,W] or [1,C,H,W], got " + shape_str(image.shape()));
    }
    const std::size_t c = image.dim(batched ? 1 : 0), h = image.dim(batched ? 2 : 1), w = image.dim(batched ? 3 : 2);
    const std::size_t ph = (h + stride - 1) / stride * stride, pw = (w + stride - 1) / stride * stride;
    if (ph == h && pw == w) return image;
    std::vector<float> out(c * ph * pw, 0.0f);
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t y = 0; y < h; ++y) {
            std::copy_n(image.data().data() + (ci * h + y) * w, w, out.data() + (ci * ph + y) * pw);
        }
    }
    Shape shape = batched ? Shape{1, c, ph, pw} : Shape{c, ph, pw};
    return Tensorf::from_data(std::move(shape), std::move(out));
}

void draw_rectangle(RgbImage& image, const Box& box, Rgb color, int thickness) {
    if (image.width == 0 || image.height == 0) return;
    const long maxx = static_cast<long>(image.width) - 1, maxy = static_cast<long>(image.height) - 1;
    const long x1 = std::clamp(static_cast<long>(std::floor(box.x1)), 0L, maxx);
    const long y1 = std::clamp(static_cast<long>(std::floor(box.y1)), 0L, maxy);
    const long x2 = std::clamp(static_cast<long>(std::ceil(box.x2)) - 1, 0L, maxx);
    const long y2 = std::clamp(static_cast<long>(std::ceil(box.y2)) - 1, 0L, maxy);
    for (int t = 0; t < thickness; ++t) {
        for (long x = x1; x <= x2; ++x) {
            if (y1 + t <= maxy) image.set(x, y1 + t, color);
            if (y2 - t >= 0) image.set(x, y2 - t, color);
        }
        for (long y = y1; y <= y2; ++y) {
            if (x1 + t <= maxx) image.set(x1 + t, y, color);
            if (x2 - t >= 0) image.set(x2 - t, y, color);
        }
    }
}

namespace {

// Rows of a 3x5 glyph, 3 bits each (MSB = left column).
const std::uint8_t* glyph_rows(char ch) {
    static const std::uint8_t digits[10][5] = {
        {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1},
        {7, 4, 7, 1, 7}, {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7},
    };
    static const std::uint8_t dot[5] = {0, 0, 0, 0, 2};
    static const std::uint8_t dash[5] = {0, 0, 7, 0, 0};
    if (ch >= '0' && ch <= '9') return digits[ch - '0'];
    if (ch == '.') return dot;
    if (ch == '-') return dash;
    return nullptr;
}

}  // namespace

void draw_text(RgbImage& image, long x, long y, const std::string& text, Rgb color, int scale) {
    long cursor = x;
    for (char ch : text) {
        if (const auto* rows = glyph_rows(ch)) {
            for (int r = 0; r < 5; ++r) {
                for (int col = 0; col < 3; ++col) {
                    if (!((rows[r] >> (2 - col)) & 1)) continue;
                    for (int sy = 0; sy < scale; ++sy) {
                        for (int sx = 0; sx < scale; ++sx) {
                            const long px = cursor + col * scale + sx, py = y + r * scale + sy;
                            if (px >= 0 && py >= 0 && px < static_cast<long>(image.width) &&
                                py < static_cast<long>(image.height)) {
                                image.set(static_cast<std::size_t>(px), static_cast<std::size_t>(py), color);
                            }
                        }
                    }
                }
            }
        }
        cursor += 4 * scale;
    }
}

}  // namespace tdid
