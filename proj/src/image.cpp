#include "aqfn/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>

namespace aqfn {

namespace {

constexpr double kInv255 = 1.0 / 255.0;

std::uint8_t to_byte(double v) {
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

Image load_png(const std::string& path) {
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.c_str())) {
        throw DataError("png read failed: " + path + " (" + png.message + ")");
    }
    png.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> raw(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, raw.data(), 0, nullptr)) {
        const std::string msg = png.message;
        png_image_free(&png);
        throw DataError("png decode failed: " + path + " (" + msg + ")");
    }
    Image img(3, static_cast<int>(png.height), static_cast<int>(png.width));
    const std::size_t npx = static_cast<std::size_t>(img.height) * img.width;
    for (std::size_t i = 0; i < npx; ++i) {
        for (int c = 0; c < 3; ++c) {
            img.pix[c * npx + i] = raw[i * 3 + c] * kInv255;
        }
    }
    return img;
}

// Reads one whitespace-delimited token, skipping '#' comments.
bool next_token(std::istream& in, std::string& tok) {
    tok.clear();
    int ch = in.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = in.get();
        } else if (std::isspace(ch)) {
            ch = in.get();
        } else {
            break;
        }
    }
    while (ch != EOF && !std::isspace(ch)) {
        tok.push_back(static_cast<char>(ch));
        ch = in.get();
    }
    return !tok.empty();
}

} // namespace

Image load_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open image: " + path);
    }
    std::string tok;
    if (!next_token(in, tok) || tok != "P6") {
        throw DataError("not a binary ppm (P6): " + path);
    }
    int w = 0, h = 0, maxval = 0;
    try {
        if (!next_token(in, tok)) throw DataError("");
        w = std::stoi(tok);
        if (!next_token(in, tok)) throw DataError("");
        h = std::stoi(tok);
        if (!next_token(in, tok)) throw DataError("");
        maxval = std::stoi(tok);
    } catch (const std::exception&) {
        throw DataError("malformed ppm header: " + path);
    }
    if (w <= 0 || h <= 0 || maxval != 255) {
        throw DataError("unsupported ppm dimensions or depth: " + path);
    }
    const std::size_t npx = static_cast<std::size_t>(w) * h;
    std::vector<std::uint8_t> raw(npx * 3);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
        throw DataError("truncated ppm payload: " + path);
    }
    Image img(3, h, w);
    for (std::size_t i = 0; i < npx; ++i) {
        for (int c = 0; c < 3; ++c) {
            img.pix[c * npx + i] = raw[i * 3 + c] * kInv255;
        }
    }
    return img;
}

Image load_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open image: " + path);
    }
    char magic[2] = {0, 0};
    in.read(magic, 2);
    in.close();
    if (magic[0] == 'P' && magic[1] == '6') {
        return load_ppm(path);
    }
    if (static_cast<unsigned char>(magic[0]) == 0x89 && magic[1] == 'P') {
        return load_png(path);
    }
    throw DataError("unrecognized image format: " + path);
}

void write_ppm(const std::string& path, const Image& img) {
    if (img.channels != 3) {
        throw ParamError("write_ppm: need 3 channels, got " + std::to_string(img.channels));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write image: " + path);
    }
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    const std::size_t npx = static_cast<std::size_t>(img.height) * img.width;
    std::vector<std::uint8_t> raw(npx * 3);
    for (std::size_t i = 0; i < npx; ++i) {
        for (int c = 0; c < 3; ++c) {
            raw[i * 3 + c] = to_byte(img.pix[c * npx + i]);
        }
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) {
        throw DataError("short write: " + path);
    }
}

void write_pgm(const std::string& path, const std::vector<double>& gray, int height, int width) {
    if (gray.size() != static_cast<std::size_t>(height) * width) {
        throw ShapeError("write_pgm: " + std::to_string(gray.size()) + " values for " +
                         std::to_string(height) + "x" + std::to_string(width));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write image: " + path);
    }
    out << "P5\n" << width << " " << height << "\n255\n";
    std::vector<std::uint8_t> raw(gray.size());
    for (std::size_t i = 0; i < gray.size(); ++i) {
        raw[i] = to_byte(gray[i]);
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) {
        throw DataError("short write: " + path);
    }
}

Image resize_bilinear(const Image& img, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0) {
        throw ParamError("resize_bilinear: target extents must be positive");
    }
    if (out_h == img.height && out_w == img.width) {
        return img;
    }
    Image out(img.channels, out_h, out_w);
    const double sy = out_h > 1 ? static_cast<double>(img.height - 1) / (out_h - 1) : 0.0;
    const double sx = out_w > 1 ? static_cast<double>(img.width - 1) / (out_w - 1) : 0.0;
    for (int c = 0; c < img.channels; ++c) {
        for (int y = 0; y < out_h; ++y) {
            const double fy = y * sy;
            const int y0 = static_cast<int>(fy);
            const int y1 = std::min(y0 + 1, img.height - 1);
            const double wy = fy - y0;
            for (int x = 0; x < out_w; ++x) {
                const double fx = x * sx;
                const int x0 = static_cast<int>(fx);
                const int x1 = std::min(x0 + 1, img.width - 1);
                const double wx = fx - x0;
                const double top = img.at(c, y0, x0) * (1 - wx) + img.at(c, y0, x1) * wx;
                const double bot = img.at(c, y1, x0) * (1 - wx) + img.at(c, y1, x1) * wx;
                out.at(c, y, x) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

Image rotate_bilinear(const Image& img, double degrees) {
    if (degrees == 0.0) {
        return img;
    }
    const double rad = degrees * 3.14159265358979323846 / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double cy = (img.height - 1) * 0.5;
    const double cx = (img.width - 1) * 0.5;
    Image out(img.channels, img.height, img.width);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            // inverse map: rotate the output coordinate back into the source
            const double dy = y - cy, dx = x - cx;
            const double sy = cs * dy + sn * dx + cy;
            const double sx = -sn * dy + cs * dx + cx;
            const int y0 = static_cast<int>(std::floor(sy));
            const int x0 = static_cast<int>(std::floor(sx));
            const double wy = sy - y0, wx = sx - x0;
            for (int c = 0; c < img.channels; ++c) {
                double acc = 0.0;
                for (int oy = 0; oy <= 1; ++oy) {
                    for (int ox = 0; ox <= 1; ++ox) {
                        const int yy = y0 + oy, xx = x0 + ox;
                        if (yy < 0 || yy >= img.height || xx < 0 || xx >= img.width) continue;
                        const double w = (oy ? wy : 1 - wy) * (ox ? wx : 1 - wx);
                        acc += w * img.at(c, yy, xx);
                    }
                }
                out.at(c, y, x) = acc;
            }
        }
    }
    return out;
}

Image hflip(const Image& img) {
    Image out(img.channels, img.height, img.width);
    for (int c = 0; c < img.channels; ++c) {
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x) {
                out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
            }
        }
    }
    return out;
}

} // namespace aqfn
