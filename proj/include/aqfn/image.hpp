#pragma once

// Plain raster images in CHW layout with unit-interval values. These are the
// pre-normalization pixel buffers; model input tensors are built from them
// after channel normalization.

#include <string>
#include <vector>

#include "aqfn/errors.hpp"

namespace aqfn {

struct Image {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> pix; // row-major per channel

    Image() = default;
    Image(int c, int h, int w) : channels(c), height(h), width(w),
                                 pix(static_cast<std::size_t>(c) * h * w, 0.0) {}

    double& at(int c, int y, int x) {
        return pix[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return pix[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
};

// Dispatches on magic bytes; PNG and binary PPM (P6) are supported.
Image load_image(const std::string& path);
Image load_ppm(const std::string& path);

// 8-bit binary outputs.
void write_ppm(const std::string& path, const Image& img);
void write_pgm(const std::string& path, const std::vector<double>& gray, int height, int width);

Image resize_bilinear(const Image& img, int out_h, int out_w);

// Rotation about the image center, bilinear resampling, zero fill outside.
// Zero angle reproduces the input exactly.
Image rotate_bilinear(const Image& img, double degrees);

Image hflip(const Image& img);

} // namespace aqfn
