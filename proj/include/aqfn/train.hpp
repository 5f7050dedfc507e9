#pragma once

// Training loop: minibatching with per-epoch augmentation, the composite
// loss, AdamW with decoupled weight decay, cosine-annealed learning rate,
// early stopping on validation loss, and checkpoint (de)serialization.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "aqfn/data.hpp"
#include "aqfn/model.hpp"

namespace aqfn {

struct TrainConfig {
    double lr = 3e-4;
    double weight_decay = 1e-4;
    int batch_size = 32;
    int max_epochs = 35;
    int patience = 7;
    double alpha = 0.4; // composite-loss mixing weight
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 0;

    void validate() const; // ParamError on violation
};

// lr_t = 0.5 * base_lr * (1 + cos(pi * t / t_max)), annealed per epoch.
// t past t_max clamps to 0 with a warning on stderr.
double cosine_lr(int t, int t_max, double base_lr);

struct AdamState {
    std::map<std::string, std::vector<double>> m; // first moments
    std::map<std::string, std::vector<double>> v; // second moments
    long step = 0;
};

// One update over every parameter in the store. Decoupled weight decay
// (theta -= lr_t * lambda * theta) is applied independently of the
// bias-corrected moment step. Every parameter must carry a gradient.
void adamw_step(ParameterStore& store, AdamState& state, double lr_t, const TrainConfig& cfg);

class EarlyStopper {
public:
    explicit EarlyStopper(int patience, double min_delta = 1e-6);

    // Records a validation loss; true when it improves on the best seen by
    // more than min_delta.
    bool observe(double val_loss);
    bool should_stop() const { return bad_ >= patience_; }
    double best() const { return best_; }
    int bad_epochs() const { return bad_; }

private:
    int patience_;
    double min_delta_;
    double best_;
    int bad_ = 0;
};

struct EpochStats {
    int epoch = 0; // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_rmse = 0.0;
    double val_accuracy = 0.0;
    double lr = 0.0;
};

struct Checkpoint {
    ParameterStore params; // best-validation snapshot
    ScalerStats scalers;
    ModelConfig model_config;
    TrainConfig train_config;
    int epoch = 0; // epoch that produced `params`
    double best_val_loss = 0.0;
    std::vector<EpochStats> history;
};

// Binary container (magic, version, config blocks, scalers, history, named
// float32 tensors) plus a key=value text sidecar at path + ".meta".
// Round-tripping a loaded checkpoint reproduces the file byte for byte.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct EvalEpoch {
    double loss = 0.0;     // composite, standardized space
    double rmse = 0.0;     // raw AQI units
    double accuracy = 0.0; // class-match fraction
};

// Dropout-off, augmentation-free pass over a split.
EvalEpoch evaluate_epoch(const ParameterStore& store, const std::vector<Sample>& samples,
                         const ModelConfig& config, const ScalerStats& scalers, double alpha,
                         int batch_size);

using EpochCallback = std::function<void(const EpochStats&)>;

// Full loop over the samples' train/val splits: fits scalers on train,
// standardizes sensors and AQI targets, re-augments each epoch, and returns
// the checkpoint with the best validation loss. Non-finite losses abort with
// DivergenceError naming the epoch and batch.
Checkpoint train_model(const std::vector<Sample>& dataset, const ModelConfig& model_config,
                       const TrainConfig& train_config, const EpochCallback& on_epoch = {});

// Header: epoch,train_loss,val_loss,val_rmse,val_acc,lr
void write_history_csv(const std::string& path, const std::vector<EpochStats>& history);

} // namespace aqfn
