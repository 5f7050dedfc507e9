#include "aqfn/explain.hpp"

#include <algorithm>
#include <cmath>

#include "aqfn/errors.hpp"
#include "aqfn/rng.hpp"

namespace aqfn {

std::string cam_target_name(const CamTarget& target) {
    if (target.kind == CamTarget::Kind::aqi) return "aqi";
    if (target.sensor_index < 0 || target.sensor_index >= kSensorDim) {
        throw ParamError("cam target: sensor index " + std::to_string(target.sensor_index) +
                         " out of range");
    }
    return kSensorNames[target.sensor_index];
}

Heatmap cam_from_maps(const std::vector<double>& conv_maps, const std::vector<double>& grad,
                      int channels, int map_h, int map_w, int out_h, int out_w) {
    if (channels < 1 || map_h < 1 || map_w < 1 || out_h < 1 || out_w < 1) {
        throw ParamError("cam_from_maps: degenerate dimensions");
    }
    const std::size_t n = static_cast<std::size_t>(channels) * map_h * map_w;
    if (conv_maps.size() != n || grad.size() != n) {
        throw ParamError("cam_from_maps: buffer sizes do not match the declared shape");
    }

    const std::size_t plane = static_cast<std::size_t>(map_h) * map_w;
    Image raw;
    raw.channels = 1;
    raw.height = map_h;
    raw.width = map_w;
    raw.pix.assign(plane, 0.0);
    for (int c = 0; c < channels; ++c) {
        double w = 0.0;
        for (std::size_t p = 0; p < plane; ++p) w += grad[c * plane + p];
        w /= static_cast<double>(plane);
        for (std::size_t p = 0; p < plane; ++p) raw.pix[p] += w * conv_maps[c * plane + p];
    }
    for (double& v : raw.pix) v = std::max(v, 0.0);

    const Image up = resize_bilinear(raw, out_h, out_w);
    Heatmap h;
    h.height = out_h;
    h.width = out_w;
    h.values = up.pix;
    const double peak = *std::max_element(h.values.begin(), h.values.end());
    if (peak > 0.0) {
        for (double& v : h.values) v /= peak;
    }
    return h;
}

Heatmap grad_cam(const ParameterStore& store, const ModelConfig& config, const TensorPtr& x_i,
                 const TensorPtr& x_s, const CamTarget& target, const std::string& sample_id) {
    const std::string target_name = cam_target_name(target); // validates the index
    for (const auto& [name, t] : store.params) t->zero_grad();

    Rng rng(0);
    const ForwardOutput out = forward(x_i, x_s, store, config, Mode::eval, rng);
    if (out.y_hat->shape[0] != 1) {
        throw ParamError("grad_cam: expected a single sample, got a batch of " +
                         std::to_string(out.y_hat->shape[0]));
    }

    TensorPtr scalar;
    if (target.kind == CamTarget::Kind::aqi) {
        scalar = out.y_hat;
    } else {
        if (target.sensor_index >= config.sensor_dim) {
            throw ParamError("grad_cam: sensor index " + std::to_string(target.sensor_index) +
                             " out of range for sensor_dim " +
                             std::to_string(config.sensor_dim));
        }
        auto pick = zeros({1, config.sensor_dim});
        pick->data[target.sensor_index] = 1.0;
        scalar = sum(mul(out.x_hat_s, pick));
    }
    backward(scalar);

    const auto& maps = out.conv_maps;
    if (maps->grad.size() != maps->numel()) {
        throw ContractError("grad_cam: backbone maps received no gradient");
    }
    Heatmap h = cam_from_maps(maps->data, maps->grad, maps->shape[1], maps->shape[2],
                              maps->shape[3], config.image_size, config.image_size);
    h.target = target;
    h.sample_id = sample_id;
    for (const auto& [name, t] : store.params) t->zero_grad();
    return h;
}

std::array<std::array<double, 3>, 256> warm_colormap() {
    std::array<std::array<double, 3>, 256> map{};
    for (int i = 0; i < 256; ++i) {
        const double t = static_cast<double>(i) / 255.0;
        map[i][0] = std::clamp(3.0 * t, 0.0, 1.0);
        map[i][1] = std::clamp(3.0 * t - 1.0, 0.0, 1.0);
        map[i][2] = std::clamp(3.0 * t - 2.0, 0.0, 1.0);
    }
    return map;
}

std::pair<std::string, std::string> export_heatmap(const Heatmap& h, const Image& base,
                                                   const std::string& dir) {
    if (base.channels != 3 || base.height != h.height || base.width != h.width) {
        throw ShapeError("export_heatmap: base image " + std::to_string(base.width) + "x" +
                         std::to_string(base.height) + " does not match heatmap " +
                         std::to_string(h.width) + "x" + std::to_string(h.height));
    }
    const std::string id = h.sample_id.empty() ? "sample" : h.sample_id;
    const std::string stem = dir + "/" + id + "_" + cam_target_name(h.target);

    const std::string pgm = stem + ".pgm";
    write_pgm(pgm, h.values, h.height, h.width);

    static const auto cmap = warm_colormap();
    Image overlay;
    overlay.channels = 3;
    overlay.height = h.height;
    overlay.width = h.width;
    overlay.pix.assign(static_cast<std::size_t>(3) * h.height * h.width, 0.0);
    const std::size_t plane = static_cast<std::size_t>(h.height) * h.width;
    for (std::size_t p = 0; p < plane; ++p) {
        const int idx = static_cast<int>(
            std::clamp(std::lround(h.values[p] * 255.0), 0L, 255L));
        for (int c = 0; c < 3; ++c) {
            overlay.pix[c * plane + p] = 0.5 * base.pix[c * plane + p] + 0.5 * cmap[idx][c];
        }
    }
    const std::string ppm = stem + ".ppm";
    write_ppm(ppm, overlay);
    return {pgm, ppm};
}

} // namespace aqfn
