#include "aqfn/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <type_traits>

#include "aqfn/errors.hpp"
#include "aqfn/eval.hpp"
#include "aqfn/rng.hpp"

namespace aqfn {

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ParamError("train config: lr must be positive");
    if (weight_decay < 0.0) throw ParamError("train config: weight_decay must be >= 0");
    if (batch_size < 1) throw ParamError("train config: batch_size must be >= 1");
    if (max_epochs < 1) throw ParamError("train config: max_epochs must be >= 1");
    if (patience < 1 || patience >= max_epochs) {
        throw ParamError("train config: patience must be in [1, max_epochs)");
    }
    if (alpha < 0.0 || alpha > 1.0) throw ParamError("train config: alpha must be in [0,1]");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw ParamError("train config: betas must be in [0,1)");
    }
    if (!(eps > 0.0)) throw ParamError("train config: eps must be positive");
}

double cosine_lr(int t, int t_max, double base_lr) {
    if (t_max < 1) throw ParamError("cosine_lr: t_max must be >= 1");
    if (!(base_lr > 0.0)) throw ParamError("cosine_lr: base_lr must be positive");
    if (t < 0) throw ParamError("cosine_lr: negative epoch");
    if (t > t_max) {
        std::fprintf(stderr, "warning: cosine_lr called with t=%d past t_max=%d, returning 0\n",
                     t, t_max);
        return 0.0;
    }
    constexpr double kPi = 3.14159265358979323846;
    return 0.5 * base_lr * (1.0 + std::cos(kPi * static_cast<double>(t) / t_max));
}

void adamw_step(ParameterStore& store, AdamState& state, double lr_t, const TrainConfig& cfg) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (auto& [name, t] : store.params) {
        if (t->grad.size() != t->numel()) {
            throw ContractError("adamw_step: parameter " + name + " has no gradient");
        }
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) m.assign(t->numel(), 0.0);
        if (v.empty()) v.assign(t->numel(), 0.0);
        for (std::size_t i = 0; i < t->numel(); ++i) {
            const double g = t->grad[i];
            // decoupled decay, independent of the moment step
            t->data[i] -= lr_t * cfg.weight_decay * t->data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            t->data[i] -= lr_t * m_hat / (std::sqrt(v_hat) + cfg.eps);
        }
    }
}

EarlyStopper::EarlyStopper(int patience, double min_delta)
    : patience_(patience), min_delta_(min_delta),
      best_(std::numeric_limits<double>::infinity()) {
    if (patience < 1) throw ParamError("EarlyStopper: patience must be >= 1");
    if (min_delta < 0.0) throw ParamError("EarlyStopper: min_delta must be >= 0");
}

bool EarlyStopper::observe(double val_loss) {
    if (best_ - val_loss > min_delta_) {
        best_ = val_loss;
        bad_ = 0;
        return true;
    }
    ++bad_;
    return false;
}

namespace {

ParameterStore deep_copy(const ParameterStore& store) {
    ParameterStore out;
    for (const auto& [name, t] : store.params) {
        auto c = zeros(t->shape, true);
        c->data = t->data; // bypass factory quantization: snapshots are exact
        out.params[name] = c;
    }
    return out;
}

struct BatchTensors {
    TensorPtr x_i;
    TensorPtr x_s;
    TensorPtr y;
};

// Assembles normalized image / standardized sensor / standardized target
// tensors for samples[indices[lo..hi)]. `aug` augments each image first.
BatchTensors make_batch(const std::vector<const Sample*>& samples,
                        const std::vector<std::size_t>& indices, std::size_t lo, std::size_t hi,
                        const ModelConfig& mc, const ScalerStats& scalers,
                        const std::function<Image(const Sample&, std::size_t)>& aug) {
    const int b = static_cast<int>(hi - lo);
    const std::size_t px = static_cast<std::size_t>(3) * mc.image_size * mc.image_size;
    std::vector<double> ibuf, sbuf, ybuf;
    ibuf.reserve(b * px);
    sbuf.reserve(b * mc.sensor_dim);
    ybuf.reserve(b);
    for (std::size_t k = lo; k < hi; ++k) {
        const Sample& s = *samples[indices[k]];
        const Image img = aug ? aug(s, indices[k]) : normalize_image(s.image);
        if (img.height != mc.image_size || img.width != mc.image_size) {
            throw ShapeError("train: sample " + s.id + " is " + std::to_string(img.width) +
                             "px, model expects " + std::to_string(mc.image_size));
        }
        ibuf.insert(ibuf.end(), img.pix.begin(), img.pix.end());
        const auto std_s = standardize_sensors(s.sensors, scalers);
        sbuf.insert(sbuf.end(), std_s.begin(), std_s.begin() + mc.sensor_dim);
        ybuf.push_back(standardize_aqi(s.aqi, scalers));
    }
    BatchTensors out;
    out.x_i = tensor(std::move(ibuf), {b, 3, mc.image_size, mc.image_size});
    out.x_s = tensor(std::move(sbuf), {b, mc.sensor_dim});
    out.y = tensor(std::move(ybuf), {b, 1});
    return out;
}

EvalEpoch evaluate_pointers(const ParameterStore& store, const std::vector<const Sample*>& split,
                            const ModelConfig& config, const ScalerStats& scalers, double alpha,
                            int batch_size) {
    if (split.empty()) throw ParamError("evaluate_epoch: empty split");
    if (batch_size < 1) throw ParamError("evaluate_epoch: batch_size must be >= 1");
    std::vector<std::size_t> order(split.size());
    std::iota(order.begin(), order.end(), 0);

    double loss_sum = 0.0;
    int batches = 0;
    std::vector<double> y_hat_raw, y_raw;
    y_hat_raw.reserve(split.size());
    y_raw.reserve(split.size());
    Rng rng(0); // dropout is inert in eval mode
    for (std::size_t lo = 0; lo < split.size(); lo += batch_size) {
        const std::size_t hi = std::min(split.size(), lo + static_cast<std::size_t>(batch_size));
        const BatchTensors batch = make_batch(split, order, lo, hi, config, scalers, nullptr);
        const ForwardOutput out = forward(batch.x_i, batch.x_s, store, config, Mode::eval, rng);
        loss_sum += composite_loss(out, batch.y, batch.x_s, alpha).total->value();
        ++batches;
        for (std::size_t k = lo; k < hi; ++k) {
            y_hat_raw.push_back(destandardize_aqi(out.y_hat->data[k - lo], scalers));
            y_raw.push_back(split[k]->aqi);
        }
    }
    EvalEpoch ev;
    ev.loss = loss_sum / batches;
    ev.rmse = regression_metrics(y_hat_raw, y_raw).rmse;
    ev.accuracy = classification_accuracy(y_hat_raw, y_raw);
    return ev;
}

} // namespace

EvalEpoch evaluate_epoch(const ParameterStore& store, const std::vector<Sample>& samples,
                         const ModelConfig& config, const ScalerStats& scalers, double alpha,
                         int batch_size) {
    std::vector<const Sample*> ptrs;
    ptrs.reserve(samples.size());
    for (const Sample& s : samples) ptrs.push_back(&s);
    return evaluate_pointers(store, ptrs, config, scalers, alpha, batch_size);
}

Checkpoint train_model(const std::vector<Sample>& dataset, const ModelConfig& model_config,
                       const TrainConfig& train_config, const EpochCallback& on_epoch) {
    model_config.validate();
    train_config.validate();

    std::vector<const Sample*> train_set, val_set;
    std::vector<Sample> train_copy; // fit_scalers wants values
    for (const Sample& s : dataset) {
        if (s.split == Split::train) {
            train_set.push_back(&s);
        } else if (s.split == Split::val) {
            val_set.push_back(&s);
        }
    }
    if (train_set.empty() || val_set.empty()) {
        throw ParamError("train_model: dataset needs non-empty train and val splits");
    }
    train_copy.reserve(train_set.size());
    for (const Sample* s : train_set) train_copy.push_back(*s);
    const ScalerStats scalers = fit_scalers(train_copy);
    train_copy.clear();
    train_copy.shrink_to_fit();

    ParameterStore store = init_params(model_config, Rng(train_config.seed));
    AdamState state;
    EarlyStopper stopper(train_config.patience);
    const Rng root(train_config.seed);

    Checkpoint ckpt;
    ckpt.scalers = scalers;
    ckpt.model_config = model_config;
    ckpt.train_config = train_config;

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= train_config.max_epochs; ++epoch) {
        const double lr_t = cosine_lr(epoch - 1, train_config.max_epochs, train_config.lr);
        Rng order_rng = root.split("order").split(static_cast<std::uint64_t>(epoch));
        order_rng.shuffle(order);

        const auto aug = [&](const Sample& s, std::size_t idx) {
            Rng arng = root.split("augment")
                           .split(static_cast<std::uint64_t>(epoch))
                           .split(static_cast<std::uint64_t>(idx));
            return normalize_image(augment(s, arng).image);
        };

        double loss_sum = 0.0;
        int batches = 0;
        for (std::size_t lo = 0; lo < train_set.size();
             lo += static_cast<std::size_t>(train_config.batch_size)) {
            const std::size_t hi =
                std::min(train_set.size(), lo + static_cast<std::size_t>(train_config.batch_size));
            const BatchTensors batch =
                make_batch(train_set, order, lo, hi, model_config, scalers, aug);
            Rng drng = root.split("dropout")
                           .split(static_cast<std::uint64_t>(epoch))
                           .split(static_cast<std::uint64_t>(batches));
            const ForwardOutput out =
                forward(batch.x_i, batch.x_s, store, model_config, Mode::train, drng);
            const CompositeLoss loss =
                composite_loss(out, batch.y, batch.x_s, train_config.alpha);
            const double lt = loss.total->value();
            if (!std::isfinite(lt)) {
                throw DivergenceError("training diverged at epoch " + std::to_string(epoch) +
                                      ", batch " + std::to_string(batches) +
                                      ": loss=" + std::to_string(lt));
            }
            store.zero_grad();
            backward(loss.total);
            adamw_step(store, state, lr_t, train_config);
            loss_sum += lt;
            ++batches;
        }

        const EvalEpoch ev = evaluate_pointers(store, val_set, model_config, scalers,
                                               train_config.alpha, train_config.batch_size);
        if (!std::isfinite(ev.loss)) {
            throw DivergenceError("validation loss diverged at epoch " + std::to_string(epoch) +
                                  ": loss=" + std::to_string(ev.loss));
        }

        EpochStats st;
        st.epoch = epoch;
        st.train_loss = loss_sum / batches;
        st.val_loss = ev.loss;
        st.val_rmse = ev.rmse;
        st.val_accuracy = ev.accuracy;
        st.lr = lr_t;
        ckpt.history.push_back(st);

        if (stopper.observe(ev.loss)) {
            ckpt.params = deep_copy(store);
            ckpt.epoch = epoch;
            ckpt.best_val_loss = stopper.best();
        }
        if (on_epoch) on_epoch(st);
        if (stopper.should_stop()) break;
    }
    return ckpt;
}

void write_history_csv(const std::string& path, const std::vector<EpochStats>& history) {
    std::ofstream out(path);
    if (!out) throw DataError("write_history_csv: cannot open " + path);
    out << "epoch,train_loss,val_loss,val_rmse,val_acc,lr\n";
    out << std::setprecision(17); // doubles survive the round-trip
    for (const EpochStats& st : history) {
        out << st.epoch << ',' << st.train_loss << ',' << st.val_loss << ',' << st.val_rmse << ','
            << st.val_accuracy << ',' << st.lr << '\n';
    }
}

// ---- checkpoint container ----
// Fixed-width fields written in host byte order (little-endian on every
// supported target); strings and tensors are length-prefixed.

namespace {

constexpr char kMagic[8] = {'A', 'Q', 'F', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_str(std::ostream& out, const std::string& s) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (in.gcount() != sizeof(T)) throw DataError("checkpoint truncated");
    return v;
}

std::string get_str(std::istream& in) {
    const auto n = get<std::uint32_t>(in);
    if (n > (1u << 20)) throw DataError("checkpoint corrupt: oversized string");
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (in.gcount() != static_cast<std::streamsize>(n)) throw DataError("checkpoint truncated");
    return s;
}

} // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("save_checkpoint: cannot open " + path);
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kVersion);

    const ModelConfig& mc = ckpt.model_config;
    put_str(out, backbone_profile_name(mc.backbone_profile));
    put<std::int32_t>(out, mc.image_size);
    put<std::int32_t>(out, mc.sensor_dim);
    put<std::int32_t>(out, mc.embed_dim);
    put<std::int32_t>(out, mc.fusion_dim);
    put<std::int32_t>(out, mc.proj_hidden_dim);
    put<double>(out, mc.dropout_rate);
    put<double>(out, mc.alpha);

    const TrainConfig& tc = ckpt.train_config;
    put<double>(out, tc.lr);
    put<double>(out, tc.weight_decay);
    put<std::int32_t>(out, tc.batch_size);
    put<std::int32_t>(out, tc.max_epochs);
    put<std::int32_t>(out, tc.patience);
    put<double>(out, tc.alpha);
    put<double>(out, tc.beta1);
    put<double>(out, tc.beta2);
    put<double>(out, tc.eps);
    put<std::uint64_t>(out, tc.seed);

    put<std::int32_t>(out, ckpt.epoch);
    put<double>(out, ckpt.best_val_loss);

    for (const double v : ckpt.scalers.sensor_mean) put<double>(out, v);
    for (const double v : ckpt.scalers.sensor_std) put<double>(out, v);
    put<double>(out, ckpt.scalers.aqi_mean);
    put<double>(out, ckpt.scalers.aqi_std);
    put<std::int32_t>(out, ckpt.scalers.clamped_channels);

    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.history.size()));
    for (const EpochStats& st : ckpt.history) {
        put<std::int32_t>(out, st.epoch);
        put<double>(out, st.train_loss);
        put<double>(out, st.val_loss);
        put<double>(out, st.val_rmse);
        put<double>(out, st.val_accuracy);
        put<double>(out, st.lr);
    }

    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.params.params.size()));
    for (const auto& [name, t] : ckpt.params.params) {
        put_str(out, name);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t->shape.size()));
        for (const int d : t->shape) put<std::int32_t>(out, d);
        for (const double v : t->data) put<float>(out, static_cast<float>(v));
    }
    if (!out) throw DataError("save_checkpoint: write failed for " + path);
    out.close();

    std::ofstream meta(path + ".meta");
    if (!meta) throw DataError("save_checkpoint: cannot open " + path + ".meta");
    meta << "format=aqfn-checkpoint\n";
    meta << "version=" << kVersion << '\n';
    meta << "backbone=" << backbone_profile_name(mc.backbone_profile) << '\n';
    meta << "image_size=" << mc.image_size << '\n';
    meta << "sensor_dim=" << mc.sensor_dim << '\n';
    meta << "alpha=" << tc.alpha << '\n';
    meta << "seed=" << tc.seed << '\n';
    meta << "epoch=" << ckpt.epoch << '\n';
    meta << std::setprecision(17) << "best_val_loss=" << ckpt.best_val_loss << '\n';
    meta << "epochs_run=" << ckpt.history.size() << '\n';
    meta << "tensors=" << ckpt.params.params.size() << '\n';
    meta << "scalars=" << ckpt.params.scalar_count() << '\n';
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("load_checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (in.gcount() != sizeof(magic) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw DataError("load_checkpoint: " + path + " is not a checkpoint");
    }
    const auto version = get<std::uint32_t>(in);
    if (version != kVersion) {
        throw DataError("load_checkpoint: unsupported version " + std::to_string(version));
    }

    Checkpoint ckpt;
    ModelConfig& mc = ckpt.model_config;
    mc.backbone_profile = backbone_profile_from_string(get_str(in));
    mc.image_size = get<std::int32_t>(in);
    mc.sensor_dim = get<std::int32_t>(in);
    mc.embed_dim = get<std::int32_t>(in);
    mc.fusion_dim = get<std::int32_t>(in);
    mc.proj_hidden_dim = get<std::int32_t>(in);
    mc.dropout_rate = get<double>(in);
    mc.alpha = get<double>(in);

    TrainConfig& tc = ckpt.train_config;
    tc.lr = get<double>(in);
    tc.weight_decay = get<double>(in);
    tc.batch_size = get<std::int32_t>(in);
    tc.max_epochs = get<std::int32_t>(in);
    tc.patience = get<std::int32_t>(in);
    tc.alpha = get<double>(in);
    tc.beta1 = get<double>(in);
    tc.beta2 = get<double>(in);
    tc.eps = get<double>(in);
    tc.seed = get<std::uint64_t>(in);

    ckpt.epoch = get<std::int32_t>(in);
    ckpt.best_val_loss = get<double>(in);

    for (double& v : ckpt.scalers.sensor_mean) v = get<double>(in);
    for (double& v : ckpt.scalers.sensor_std) v = get<double>(in);
    ckpt.scalers.aqi_mean = get<double>(in);
    ckpt.scalers.aqi_std = get<double>(in);
    ckpt.scalers.clamped_channels = get<std::int32_t>(in);

    const auto n_history = get<std::uint32_t>(in);
    ckpt.history.resize(n_history);
    for (EpochStats& st : ckpt.history) {
        st.epoch = get<std::int32_t>(in);
        st.train_loss = get<double>(in);
        st.val_loss = get<double>(in);
        st.val_rmse = get<double>(in);
        st.val_accuracy = get<double>(in);
        st.lr = get<double>(in);
    }

    const auto n_params = get<std::uint32_t>(in);
    for (std::uint32_t p = 0; p < n_params; ++p) {
        const std::string name = get_str(in);
        const auto rank = get<std::uint32_t>(in);
        if (rank > 8) throw DataError("load_checkpoint: corrupt tensor rank");
        std::vector<int> shape(rank);
        for (int& d : shape) d = get<std::int32_t>(in);
        auto t = zeros(shape, true);
        for (double& v : t->data) v = static_cast<double>(get<float>(in));
        ckpt.params.params[name] = t;
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw DataError("load_checkpoint: trailing data in " + path);
    }
    mc.validate();
    tc.validate();
    return ckpt;
}

} // namespace aqfn
