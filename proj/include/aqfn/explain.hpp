#pragma once

// Grad-CAM over the backbone's final feature maps, for the AQI regression
// output or any single sensor-head output, plus PGM/PPM export.

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "aqfn/data.hpp"
#include "aqfn/image.hpp"
#include "aqfn/model.hpp"

namespace aqfn {

struct CamTarget {
    enum class Kind { aqi, sensor };
    Kind kind = Kind::aqi;
    int sensor_index = 0; // used when kind == sensor

    static CamTarget aqi() { return {}; }
    static CamTarget sensor(int j) { return {Kind::sensor, j}; }
};

// "aqi" or the pollutant channel name; used in export filenames.
std::string cam_target_name(const CamTarget& target);

struct Heatmap {
    std::vector<double> values; // row-major height x width, in [0,1]
    int height = 0;
    int width = 0;
    CamTarget target;
    std::string sample_id;
};

// Core combination step, separated from the model so it can be checked
// against hand fixtures: per-channel weights are the spatial means of
// `grad`, the map is ReLU(sum_k w_k * map_k) bilinearly upsampled to
// out_h x out_w, then max-normalized (an all-zero map stays zero).
Heatmap cam_from_maps(const std::vector<double>& conv_maps, const std::vector<double>& grad,
                      int channels, int map_h, int map_w, int out_h, int out_w);

// Full pipeline: eval-mode forward on one sample, backward from the chosen
// scalar output, CAM over the retained backbone maps at input resolution.
Heatmap grad_cam(const ParameterStore& store, const ModelConfig& config, const TensorPtr& x_i,
                 const TensorPtr& x_s, const CamTarget& target,
                 const std::string& sample_id = "");

// 256-entry warm colormap (black through red and yellow to white).
std::array<std::array<double, 3>, 256> warm_colormap();

// Writes <dir>/<sample_id>_<target>.pgm (raw 8-bit map) and .ppm (base image
// blended 50/50 with the colormapped heatmap). The base image must match the
// heatmap dimensions. Returns the two paths written.
std::pair<std::string, std::string> export_heatmap(const Heatmap& h, const Image& base,
                                                   const std::string& dir);

} // namespace aqfn
