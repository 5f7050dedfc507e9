#pragma once

// The dual-objective fusion network: convolutional image encoder with a
// two-layer projection head, a one-layer sensor encoder, a fusion layer over
// the concatenated embeddings, and two heads — a scalar air-quality
// regression head on the fused embedding and a sensor-estimation head that
// reads the image embedding alone (which is what makes sensor imputation
// from the image possible at inference time).

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "aqfn/rng.hpp"
#include "aqfn/tensor.hpp"

namespace aqfn {

// All profiles end in 64 channels at 1/16 spatial resolution.
enum class BackboneProfile { micro_plain, micro_residual, micro_depthwise };

constexpr int kBackboneOutChannels = 64;

BackboneProfile backbone_profile_from_string(const std::string& name); // ParamError on unknown
const char* backbone_profile_name(BackboneProfile p);

struct ModelConfig {
    BackboneProfile backbone_profile = BackboneProfile::micro_plain;
    int image_size = 64;
    int sensor_dim = 6;
    int embed_dim = 128;
    int fusion_dim = 128;
    int proj_hidden_dim = 256;
    double dropout_rate = 0.3;
    double alpha = 0.4;

    void validate() const; // ParamError on out-of-range fields
};

// Named learnable tensors. std::map keeps iteration (and therefore init,
// update, and serialization order) deterministic.
struct ParameterStore {
    std::map<std::string, TensorPtr> params;

    TensorPtr& at(const std::string& name);
    const TensorPtr& at(const std::string& name) const;
    std::size_t scalar_count() const;
    void zero_grad();
};

// Fan-in-scaled uniform weights (variance 2/fan_in), zero biases; every
// parameter draws from its own name-keyed stream of rng.
ParameterStore init_params(const ModelConfig& config, const Rng& rng);

struct ForwardOutput {
    TensorPtr y_hat;     // [B,1] predicted AQI (standardized or raw per pipeline)
    TensorPtr x_hat_s;   // [B,d] predicted standardized sensors, from h_i only
    TensorPtr h_i;       // [B,embed_dim]
    TensorPtr h_s;       // [B,embed_dim]
    TensorPtr h_fused;   // [B,fusion_dim]
    TensorPtr conv_maps; // [B,64,S/16,S/16] post-activation, kept for attribution
};

struct ImageEncoding {
    TensorPtr h_i;
    TensorPtr conv_maps;
};

// x_i: [3,S,S] or [B,3,S,S].
ImageEncoding encode_image(const TensorPtr& x_i, const ParameterStore& store,
                           const ModelConfig& config, Mode mode);

// x_s: [d] or [B,d]; dropout active only in train mode.
TensorPtr encode_sensors(const TensorPtr& x_s, const ParameterStore& store,
                         const ModelConfig& config, Mode mode, Rng& rng);

// Image block first in the concatenation.
TensorPtr fuse(const TensorPtr& h_i, const TensorPtr& h_s, const ParameterStore& store,
               const ModelConfig& config, Mode mode, Rng& rng);

ForwardOutput forward(const TensorPtr& x_i, const TensorPtr& x_s, const ParameterStore& store,
                      const ModelConfig& config, Mode mode, Rng& rng);

// Output heads, exposed so callers can re-run fusion on cached embeddings.
TensorPtr apply_aqi_head(const TensorPtr& h_fused, const ParameterStore& store);
TensorPtr apply_sensor_head(const TensorPtr& h_i, const ParameterStore& store);

struct CompositeLoss {
    TensorPtr total;  // (1-alpha)*aqi + alpha*sensor
    TensorPtr aqi;    // mean squared target error
    TensorPtr sensor; // mean over batch of squared L2 sensor residual
};

// y: [B,1]; x_s: [B,d] standardized ground-truth sensors.
CompositeLoss composite_loss(const ForwardOutput& out, const TensorPtr& y, const TensorPtr& x_s,
                             double alpha);

} // namespace aqfn
