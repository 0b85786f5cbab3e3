#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include <png.h>

#include "tensor.hpp"

namespace faceflow {

// Images are float tensors [H, W, 3] in [0,1]; files are 8-bit RGB PNG.

inline void write_png(const std::string& path, const Tensor<float>& img) {
    if (img.rank() != 3 || img.size(2) != 3)
        throw ShapeError("write_png: expected [H,W,3], got " + shape_str(img.shape()));
    int h = static_cast<int>(img.size(0)), w = static_cast<int>(img.size(1));
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("cannot write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    std::vector<png_byte> row(static_cast<size_t>(w) * 3);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("png encode failed for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const float* d = img.data();
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w * 3; ++x) {
            float v = d[y * w * 3 + x];
            row[static_cast<size_t>(x)] =
                static_cast<png_byte>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline Tensor<float> read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("png decode failed for " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    int h = static_cast<int>(png_get_image_height(png, info));
    int w = static_cast<int>(png_get_image_width(png, info));
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    Tensor<float> img({h, w, 3});
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w * 3; ++x) img[y * w * 3 + x] = row[static_cast<size_t>(x)] / 255.0f;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

// ---------------------------------------------------------------------------
// 3x5 bitmap font, enough for file-name-ish labels
// ---------------------------------------------------------------------------

namespace detail {

inline const std::map<char, std::array<const char*, 5>>& font3x5() {
    static const std::map<char, std::array<const char*, 5>> f = {
        {'0', {"111", "101", "101", "101", "111"}}, {'1', {"010", "110", "010", "010", "111"}},
        {'2', {"111", "001", "111", "100", "111"}}, {'3', {"111", "001", "111", "001", "111"}},
        {'4', {"101", "101", "111", "001", "001"}}, {'5', {"111", "100", "111", "001", "111"}},
        {'6', {"111", "100", "111", "101", "111"}}, {'7', {"111", "001", "001", "010", "010"}},
        {'8', {"111", "101", "111", "101", "111"}}, {'9', {"111", "101", "111", "001", "111"}},
        {'A', {"010", "101", "111", "101", "101"}}, {'B', {"110", "101", "110", "101", "110"}},
        {'C', {"011", "100", "100", "100", "011"}}, {'D', {"110", "101", "101", "101", "110"}},
        {'E', {"111", "100", "111", "100", "111"}}, {'F', {"111", "100", "111", "100", "100"}},
        {'G', {"011", "100", "101", "101", "011"}}, {'H', {"101", "101", "111", "101", "101"}},
        {'I', {"111", "010", "010", "010", "111"}}, {'J', {"001", "001", "001", "101", "010"}},
        {'K', {"101", "101", "110", "101", "101"}}, {'L', {"100", "100", "100", "100", "111"}},
        {'M', {"101", "111", "101", "101", "101"}}, {'N', {"110", "101", "101", "101", "101"}},
        {'O', {"111", "101", "101", "101", "111"}}, {'P', {"111", "101", "111", "100", "100"}},
        {'Q', {"111", "101", "101", "111", "001"}}, {'R', {"111", "101", "110", "101", "101"}},
        {'S', {"011", "100", "010", "001", "110"}}, {'T', {"111", "010", "010", "010", "010"}},
        {'U', {"101", "101", "101", "101", "111"}}, {'V', {"101", "101", "101", "101", "010"}},
        {'W', {"101", "101", "101", "111", "101"}}, {'X', {"101", "101", "010", "101", "101"}},
        {'Y', {"101", "101", "010", "010", "010"}}, {'Z', {"111", "001", "010", "100", "111"}},
        {'.', {"000", "000", "000", "000", "010"}}, {'-', {"000", "000", "111", "000", "000"}},
        {'_', {"000", "000", "000", "000", "111"}}, {':', {"000", "010", "000", "010", "000"}},
        {'%', {"101", "001", "010", "100", "101"}}, {'/', {"001", "001", "010", "100", "100"}},
        {'+', {"000", "010", "111", "010", "000"}}, {'=', {"000", "111", "000", "111", "000"}},
        {' ', {"000", "000", "000", "000", "000"}},
    };
    return f;
}

}  // namespace detail

inline void draw_text(Tensor<float>& img, int64_t x0, int64_t y0, const std::string& text, float r,
                      float g, float b) {
    const auto& font = detail::font3x5();
    int64_t h = img.size(0), w = img.size(1);
    int64_t x = x0;
    for (char raw : text) {
        char c = static_cast<char>(std::toupper(static_cast<unsigned char>(raw)));
        auto it = font.find(c);
        if (it == font.end()) it = font.find(' ');
        for (int64_t gy = 0; gy < 5; ++gy)
            for (int64_t gx = 0; gx < 3; ++gx) {
                if (it->second[static_cast<size_t>(gy)][gx] != '1') continue;
                int64_t py = y0 + gy, px = x + gx;
                if (py < 0 || py >= h || px < 0 || px >= w) continue;
                img.at(py, px, 0) = r;
                img.at(py, px, 1) = g;
                img.at(py, px, 2) = b;
            }
        x += 4;
    }
}

inline void fill_rect(Tensor<float>& img, int64_t x0, int64_t y0, int64_t x1, int64_t y1, float r,
                      float g, float b) {
    int64_t h = img.size(0), w = img.size(1);
    for (int64_t y = std::max<int64_t>(0, y0); y < std::min(h, y1); ++y)
        for (int64_t x = std::max<int64_t>(0, x0); x < std::min(w, x1); ++x) {
            img.at(y, x, 0) = r;
            img.at(y, x, 1) = g;
            img.at(y, x, 2) = b;
        }
}

// Tile [H,W,3] images into a grid, optional per-cell caption strip underneath.
inline Tensor<float> make_grid(const std::vector<Tensor<float>>& imgs,
                               const std::vector<std::string>& labels, int64_t cols,
                               int64_t pad = 2) {
    if (imgs.empty()) throw ShapeError("make_grid: no images");
    int64_t h = imgs[0].size(0), w = imgs[0].size(1);
    for (const auto& im : imgs)
        if (im.shape() != imgs[0].shape())
            throw ShapeError("make_grid: mixed image shapes");
    bool captioned = !labels.empty();
    int64_t cap = captioned ? 7 : 0;
    int64_t n = static_cast<int64_t>(imgs.size());
    int64_t rows = (n + cols - 1) / cols;
    int64_t cell_h = h + cap + pad, cell_w = w + pad;
    Tensor<float> grid({rows * cell_h + pad, cols * cell_w + pad, 3});
    grid.fill(1.0f);
    for (int64_t i = 0; i < n; ++i) {
        int64_t r = i / cols, c = i % cols;
        int64_t y0 = pad + r * cell_h, x0 = pad + c * cell_w;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                for (int64_t ch = 0; ch < 3; ++ch)
                    grid.at(y0 + y, x0 + x, ch) = imgs[static_cast<size_t>(i)].at(y, x, ch);
        if (captioned && i < static_cast<int64_t>(labels.size()))
            draw_text(grid, x0, y0 + h + 1, labels[static_cast<size_t>(i)], 0.1f, 0.1f, 0.1f);
    }
    return grid;
}

// ---------------------------------------------------------------------------
// box plot (whisker range, quartile box, median line, one overlay mark per box)
// ---------------------------------------------------------------------------

struct BoxStats {
    double lo = 0, q1 = 0, med = 0, q3 = 0, hi = 0;
};

inline Tensor<float> render_box_plot(const std::vector<BoxStats>& boxes,
                                     const std::vector<double>& marks, int64_t width = 640,
                                     int64_t height = 320) {
    Tensor<float> img({height, width, 3});
    img.fill(1.0f);
    if (boxes.empty()) return img;
    double vmin = boxes[0].lo, vmax = boxes[0].hi;
    for (const auto& b : boxes) {
        vmin = std::min(vmin, b.lo);
        vmax = std::max(vmax, b.hi);
    }
    for (double m : marks) {
        vmin = std::min(vmin, m);
        vmax = std::max(vmax, m);
    }
    if (vmax <= vmin) vmax = vmin + 1.0;
    double margin = 0.05 * (vmax - vmin);
    vmin -= margin;
    vmax += margin;
    int64_t top = 8, bottom = height - 12;
    auto ypix = [&](double v) {
        double f = (v - vmin) / (vmax - vmin);
        return bottom - static_cast<int64_t>(f * static_cast<double>(bottom - top));
    };
    int64_t n = static_cast<int64_t>(boxes.size());
    double slot = static_cast<double>(width - 16) / static_cast<double>(n);
    int64_t bw = std::max<int64_t>(3, static_cast<int64_t>(slot * 0.5));
    for (int64_t i = 0; i < n; ++i) {
        const auto& b = boxes[static_cast<size_t>(i)];
        int64_t cx = 8 + static_cast<int64_t>((static_cast<double>(i) + 0.5) * slot);
        int64_t x0 = cx - bw / 2, x1 = cx + bw / 2 + 1;
        // whisker
        fill_rect(img, cx, ypix(b.hi), cx + 1, ypix(b.lo) + 1, 0.55f, 0.55f, 0.55f);
        // box outline
        fill_rect(img, x0, ypix(b.q3), x1, ypix(b.q3) + 1, 0.1f, 0.1f, 0.6f);
        fill_rect(img, x0, ypix(b.q1), x1, ypix(b.q1) + 1, 0.1f, 0.1f, 0.6f);
        fill_rect(img, x0, ypix(b.q3), x0 + 1, ypix(b.q1) + 1, 0.1f, 0.1f, 0.6f);
        fill_rect(img, x1 - 1, ypix(b.q3), x1, ypix(b.q1) + 1, 0.1f, 0.1f, 0.6f);
        fill_rect(img, x0, ypix(b.med), x1, ypix(b.med) + 1, 0.1f, 0.1f, 0.1f);
        if (i < static_cast<int64_t>(marks.size())) {
            int64_t my = ypix(marks[static_cast<size_t>(i)]);
            fill_rect(img, cx - 2, my - 2, cx + 3, my + 3, 0.85f, 0.15f, 0.15f);
        }
    }
    return img;
}

}  // namespace faceflow
