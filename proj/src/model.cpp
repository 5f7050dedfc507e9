#include "aqfn/model.hpp"

#include <cmath>

#include "aqfn/errors.hpp"

namespace aqfn {

namespace {

struct ConvSpec {
    std::string name;
    std::vector<int> shape; // [OC,IC,k,k] full, [C,k,k] depthwise
};

// Learnable-tensor plan for one profile. Backbones are bias-free; all
// profiles take 3 channels to kBackboneOutChannels at 1/16 resolution.
std::vector<ConvSpec> backbone_plan(BackboneProfile p) {
    switch (p) {
    case BackboneProfile::micro_plain:
        return {
            {"backbone.stage1.conv", {8, 3, 3, 3}},
            {"backbone.stage2.conv", {16, 8, 3, 3}},
            {"backbone.stage3.conv", {32, 16, 3, 3}},
            {"backbone.stage4.conv", {64, 32, 3, 3}},
        };
    case BackboneProfile::micro_residual:
        return {
            {"backbone.stage1.conv", {8, 3, 3, 3}},
            {"backbone.stage2.conv", {16, 8, 3, 3}},
            {"backbone.block1.conv1", {16, 16, 3, 3}},
            {"backbone.block1.conv2", {16, 16, 3, 3}},
            {"backbone.stage3.conv", {32, 16, 3, 3}},
            {"backbone.block2.conv1", {32, 32, 3, 3}},
            {"backbone.block2.conv2", {32, 32, 3, 3}},
            {"backbone.stage4.conv", {64, 32, 3, 3}},
        };
    case BackboneProfile::micro_depthwise:
        return {
            {"backbone.stem.conv", {8, 3, 3, 3}},
            {"backbone.pair1.dw", {8, 3, 3}},
            {"backbone.pair1.pw", {16, 8, 1, 1}},
            {"backbone.pair2.dw", {16, 3, 3}},
            {"backbone.pair2.pw", {32, 16, 1, 1}},
            {"backbone.invres.expand", {64, 32, 1, 1}},
            {"backbone.invres.dw", {64, 3, 3}},
            {"backbone.invres.project", {32, 64, 1, 1}},
            {"backbone.pair3.dw", {32, 3, 3}},
            {"backbone.pair3.pw", {64, 32, 1, 1}},
        };
    }
    throw ParamError("unknown backbone profile");
}

// Linear weights are stored [in,out] so a [B,in] activation right-multiplies.
struct LinearSpec {
    std::string name;
    int in, out;
};

std::vector<LinearSpec> linear_plan(const ModelConfig& c) {
    return {
        {"proj.fc1", kBackboneOutChannels, c.proj_hidden_dim},
        {"proj.fc2", c.proj_hidden_dim, c.embed_dim},
        {"sensor_enc", c.sensor_dim, c.embed_dim},
        {"fusion", 2 * c.embed_dim, c.fusion_dim},
        {"head_aqi", c.fusion_dim, 1},
        {"head_sensor", c.embed_dim, c.sensor_dim},
    };
}

TensorPtr he_uniform(const std::vector<int>& shape, int fan_in, Rng rng) {
    auto t = zeros(shape, true);
    const double limit = std::sqrt(6.0 / fan_in);
    for (double& v : t->data) {
        v = rng.uniform(-limit, limit);
    }
    if (precision() == Precision::standard32) {
        for (double& v : t->data) {
            v = static_cast<double>(static_cast<float>(v));
        }
    }
    return t;
}

TensorPtr linear(const TensorPtr& x, const ParameterStore& store, const std::string& name) {
    return add(matmul(x, store.at(name + ".weight")), store.at(name + ".bias"));
}

TensorPtr ensure_batched(const TensorPtr& x, std::size_t rank) {
    if (x->shape.size() == rank) {
        return x;
    }
    std::vector<int> shape = x->shape;
    shape.insert(shape.begin(), 1);
    return reshape(x, shape);
}

TensorPtr backbone_forward(const TensorPtr& x, const ParameterStore& store,
                           const ModelConfig& config) {
    auto conv_of = [&](const char* name, const TensorPtr& in, int stride) {
        return conv2d(in, store.at(name), stride, 1);
    };
    switch (config.backbone_profile) {
    case BackboneProfile::micro_plain: {
        auto h = relu(conv_of("backbone.stage1.conv", x, 2));
        h = relu(conv_of("backbone.stage2.conv", h, 2));
        h = relu(conv_of("backbone.stage3.conv", h, 2));
        return relu(conv_of("backbone.stage4.conv", h, 2));
    }
    case BackboneProfile::micro_residual: {
        auto h = relu(conv_of("backbone.stage1.conv", x, 2));
        h = relu(conv_of("backbone.stage2.conv", h, 2));
        // residual block: no activation after the add, so a zero-initialized
        // block is exactly the identity
        h = add(h, conv_of("backbone.block1.conv2",
                           relu(conv_of("backbone.block1.conv1", h, 1)), 1));
        h = relu(conv_of("backbone.stage3.conv", h, 2));
        h = add(h, conv_of("backbone.block2.conv2",
                           relu(conv_of("backbone.block2.conv1", h, 1)), 1));
        return relu(conv_of("backbone.stage4.conv", h, 2));
    }
    case BackboneProfile::micro_depthwise: {
        auto h = relu(conv_of("backbone.stem.conv", x, 2));
        h = relu(depthwise_conv2d(h, store.at("backbone.pair1.dw"), 2, 1));
        h = relu(conv2d(h, store.at("backbone.pair1.pw"), 1, 0));
        h = relu(depthwise_conv2d(h, store.at("backbone.pair2.dw"), 2, 1));
        h = relu(conv2d(h, store.at("backbone.pair2.pw"), 1, 0));
        // inverted residual: expand 2x, depthwise, linear projection, add
        auto t = relu(conv2d(h, store.at("backbone.invres.expand"), 1, 0));
        t = relu(depthwise_conv2d(t, store.at("backbone.invres.dw"), 1, 1));
        t = conv2d(t, store.at("backbone.invres.project"), 1, 0);
        h = add(h, t);
        h = relu(depthwise_conv2d(h, store.at("backbone.pair3.dw"), 2, 1));
        return relu(conv2d(h, store.at("backbone.pair3.pw"), 1, 0));
    }
    }
    throw ParamError("unknown backbone profile");
}

} // namespace

BackboneProfile backbone_profile_from_string(const std::string& name) {
    if (name == "micro_plain") return BackboneProfile::micro_plain;
    if (name == "micro_residual") return BackboneProfile::micro_residual;
    if (name == "micro_depthwise") return BackboneProfile::micro_depthwise;
    throw ParamError("unknown backbone profile: " + name);
}

const char* backbone_profile_name(BackboneProfile p) {
    switch (p) {
    case BackboneProfile::micro_plain: return "micro_plain";
    case BackboneProfile::micro_residual: return "micro_residual";
    case BackboneProfile::micro_depthwise: return "micro_depthwise";
    }
    return "?";
}

void ModelConfig::validate() const {
    if (image_size < 16) {
        throw ParamError("image_size must be at least 16, got " + std::to_string(image_size));
    }
    if (sensor_dim < 1) {
        throw ParamError("sensor_dim must be at least 1");
    }
    if (embed_dim <= 0 || fusion_dim <= 0 || proj_hidden_dim <= 0) {
        throw ParamError("embedding widths must be positive");
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
        throw ParamError("dropout_rate must be in [0,1)");
    }
    if (alpha < 0.0 || alpha > 1.0) {
        throw ParamError("alpha must be in [0,1], got " + std::to_string(alpha));
    }
}

TensorPtr& ParameterStore::at(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) {
        throw ContractError("no parameter named " + name);
    }
    return it->second;
}

const TensorPtr& ParameterStore::at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) {
        throw ContractError("no parameter named " + name);
    }
    return it->second;
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t->numel();
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& [name, t] : params) t->zero_grad();
}

ParameterStore init_params(const ModelConfig& config, const Rng& rng) {
    config.validate();
    ParameterStore store;
    const Rng init = rng.split("init");
    for (const ConvSpec& spec : backbone_plan(config.backbone_profile)) {
        const int fan_in = spec.shape.size() == 4 ? spec.shape[1] * spec.shape[2] * spec.shape[3]
                                                  : spec.shape[1] * spec.shape[2];
        store.params[spec.name] = he_uniform(spec.shape, fan_in, init.split(spec.name));
    }
    for (const LinearSpec& spec : linear_plan(config)) {
        store.params[spec.name + ".weight"] =
            he_uniform({spec.in, spec.out}, spec.in, init.split(spec.name + ".weight"));
        store.params[spec.name + ".bias"] = zeros({spec.out}, true);
    }
    return store;
}

ImageEncoding encode_image(const TensorPtr& x_i, const ParameterStore& store,
                           const ModelConfig& config, Mode /*mode*/) {
    const TensorPtr x = ensure_batched(x_i, 4);
    if (x->shape[1] != 3 || x->shape[2] != config.image_size || x->shape[3] != config.image_size) {
        throw ShapeError("encode_image: expected [B,3," + std::to_string(config.image_size) + "," +
                         std::to_string(config.image_size) + "], got " + shape_str(x_i->shape));
    }
    ImageEncoding enc;
    enc.conv_maps = backbone_forward(x, store, config);
    auto z = global_avg_pool(enc.conv_maps);
    z = relu(linear(z, store, "proj.fc1"));
    enc.h_i = relu(linear(z, store, "proj.fc2"));
    return enc;
}

TensorPtr encode_sensors(const TensorPtr& x_s, const ParameterStore& store,
                         const ModelConfig& config, Mode mode, Rng& rng) {
    const TensorPtr x = ensure_batched(x_s, 2);
    if (x->shape[1] != config.sensor_dim) {
        throw ShapeError("encode_sensors: expected length " + std::to_string(config.sensor_dim) +
                         ", got " + shape_str(x_s->shape));
    }
    auto h = relu(linear(x, store, "sensor_enc"));
    return dropout(h, config.dropout_rate, mode, rng);
}

TensorPtr fuse(const TensorPtr& h_i, const TensorPtr& h_s, const ParameterStore& store,
               const ModelConfig& config, Mode mode, Rng& rng) {
    const TensorPtr a = ensure_batched(h_i, 2);
    const TensorPtr b = ensure_batched(h_s, 2);
    if (a->shape[1] != config.embed_dim || b->shape[1] != config.embed_dim ||
        a->shape[0] != b->shape[0]) {
        throw ShapeError("fuse: embeddings " + shape_str(h_i->shape) + " and " +
                         shape_str(h_s->shape) + " do not both match embed_dim " +
                         std::to_string(config.embed_dim));
    }
    auto joint = concat(a, b, 1); // image block first
    auto h = relu(linear(joint, store, "fusion"));
    return dropout(h, config.dropout_rate, mode, rng);
}

ForwardOutput forward(const TensorPtr& x_i, const TensorPtr& x_s, const ParameterStore& store,
                      const ModelConfig& config, Mode mode, Rng& rng) {
    ForwardOutput out;
    ImageEncoding enc = encode_image(x_i, store, config, mode);
    out.h_i = enc.h_i;
    out.conv_maps = enc.conv_maps;
    out.h_s = encode_sensors(x_s, store, config, mode, rng);
    out.h_fused = fuse(out.h_i, out.h_s, store, config, mode, rng);
    out.y_hat = apply_aqi_head(out.h_fused, store);
    out.x_hat_s = apply_sensor_head(out.h_i, store); // image embedding only
    return out;
}

TensorPtr apply_aqi_head(const TensorPtr& h_fused, const ParameterStore& store) {
    return linear(ensure_batched(h_fused, 2), store, "head_aqi");
}

TensorPtr apply_sensor_head(const TensorPtr& h_i, const ParameterStore& store) {
    return linear(ensure_batched(h_i, 2), store, "head_sensor");
}

CompositeLoss composite_loss(const ForwardOutput& out, const TensorPtr& y, const TensorPtr& x_s,
                             double alpha) {
    if (alpha < 0.0 || alpha > 1.0) {
        throw ParamError("composite_loss: alpha must be in [0,1], got " + std::to_string(alpha));
    }
    if (out.y_hat->shape != y->shape) {
        throw ShapeError("composite_loss: prediction " + shape_str(out.y_hat->shape) +
                         " vs target " + shape_str(y->shape));
    }
    if (out.x_hat_s->shape != x_s->shape) {
        throw ShapeError("composite_loss: sensor prediction " + shape_str(out.x_hat_s->shape) +
                         " vs target " + shape_str(x_s->shape));
    }
    CompositeLoss l;
    l.aqi = mse(out.y_hat, y);
    // mean over the batch of each sample's squared L2 residual: the
    // all-element mse times the sensor dimension
    l.sensor = scale(mse(out.x_hat_s, x_s), static_cast<double>(x_s->shape.back()));
    l.total = add(scale(l.aqi, 1.0 - alpha), scale(l.sensor, alpha));
    return l;
}

} // namespace aqfn
