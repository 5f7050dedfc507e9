#pragma once

// Quantitative evaluation: regression error, class accuracy, one-vs-rest
// ROC/AUC over distance-derived scores, per-pollutant standard errors,
// bootstrap confidence intervals, and robustness sweeps under missing
// sensor channels.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "aqfn/data.hpp"
#include "aqfn/model.hpp"

namespace aqfn {

struct RegressionMetrics {
    double rmse = 0.0;
    double mse = 0.0;
};

RegressionMetrics regression_metrics(const std::vector<double>& y_hat,
                                     const std::vector<double>& y);

// Fraction of samples whose predicted class matches the true class.
// Negative predictions are clamped to 0 first; the clamp count is reported
// through `clamped` when given.
double classification_accuracy(const std::vector<double>& y_hat, const std::vector<double>& y,
                               std::size_t* clamped = nullptr);

// Class-membership scores for a scalar prediction: exp(-|y - mid_c|/halfwidth_c)
// per class, normalized to sum to one. The open-ended top class scores against
// a fixed midpoint of 400 with halfwidth 100.
std::array<double, kNumClasses> class_scores(double y_hat);

struct AucReport {
    std::array<double, kNumClasses> per_class{}; // NaN where undefined
    std::array<bool, kNumClasses> defined{};
    double macro = 0.0; // mean of the defined entries
};

// One-vs-rest rank (Mann-Whitney) AUC with ties counted as half. A class with
// no positives or no negatives is excluded from the macro mean.
AucReport roc_auc(const std::vector<std::array<double, kNumClasses>>& scores,
                  const std::vector<int>& true_class);

struct RocPoint {
    int cls = 0;
    double threshold = 0.0;
    double fpr = 0.0;
    double tpr = 0.0;
};

// One point per distinct score value per defined class, threshold descending
// ("positive" means score >= threshold); the last point per class is (1,1).
std::vector<RocPoint> roc_curve_points(const std::vector<std::array<double, kNumClasses>>& scores,
                                       const std::vector<int>& true_class);

// Header: class,threshold,fpr,tpr
void write_roc_csv(const std::string& path, const std::vector<RocPoint>& points);

// Per-channel standard error of the de-standardized residuals: unbiased
// std / sqrt(n). Inputs are in standardized space.
std::array<double, kSensorDim>
sensor_standard_errors(const std::vector<std::array<double, kSensorDim>>& x_hat,
                       const std::vector<std::array<double, kSensorDim>>& x,
                       const ScalerStats& scalers);

// Percentile bootstrap over sample indices; deterministic per seed.
std::pair<double, double> bootstrap_rmse_ci(const std::vector<double>& y_hat,
                                            const std::vector<double>& y, int resamples = 1000,
                                            double level = 0.95, std::uint64_t seed = 0);

struct MetricsReport {
    std::size_t n = 0;
    double rmse = 0.0;
    double mse = 0.0;
    double accuracy = 0.0;
    std::size_t negative_clamped = 0;
    std::array<double, kNumClasses> per_class_auc{};
    std::array<bool, kNumClasses> auc_defined{};
    double macro_auc = 0.0;
    std::array<double, kSensorDim> sensor_se{};
    std::pair<double, double> rmse_ci{0.0, 0.0};
    std::array<std::array<std::size_t, kNumClasses>, kNumClasses> confusion{}; // [true][pred]
};

// Assembles the full report. AQI vectors are in raw units, sensor matrices in
// standardized space (as produced by the sensor head). bootstrap_resamples
// <= 0 skips the CI, leaving NaN bounds.
MetricsReport compute_metrics(const std::vector<double>& y_hat_raw,
                              const std::vector<double>& y_raw,
                              const std::vector<std::array<double, kSensorDim>>& x_hat_std,
                              const std::vector<std::array<double, kSensorDim>>& x_std,
                              const ScalerStats& scalers, int bootstrap_resamples = 1000,
                              std::uint64_t seed = 0);

std::string metrics_report_json(const MetricsReport& report);

enum class FillStrategy {
    zero_fill, // missing channels set to 0, the standardized mean
    imputed,   // missing channels set to the sensor head's estimate
};

// Batch predictions with the image pathway cached so different sensor fills
// can be re-fused without re-running the backbone.
class Predictor {
public:
    Predictor(const ParameterStore& store, const ModelConfig& config, const ScalerStats& scalers);

    struct Output {
        std::vector<double> y_hat_raw;
        std::vector<std::array<double, kSensorDim>> x_hat_std;
    };

    // Full forward pass; channels flagged missing in a sample's sensor_mask
    // are filled per `fill`.
    Output predict(const std::vector<Sample>& samples, FillStrategy fill = FillStrategy::zero_fill,
                   int batch_size = 64) const;

    // Runs the image pathway once and keeps embeddings, sensor-head estimates,
    // and standardized observed sensors for later re-fusion.
    void cache_images(const std::vector<Sample>& samples, int batch_size = 64);
    std::size_t cached_count() const { return h_i_.size(); }

    // Re-runs sensor encoding + fusion over the cached samples with the given
    // presence masks (true = observed).
    Output predict_cached(const std::vector<std::array<bool, kSensorDim>>& present,
                          FillStrategy fill, int batch_size = 64) const;

    const std::vector<std::array<double, kSensorDim>>& cached_imputations() const { return xhat_; }

private:
    std::vector<std::array<double, kSensorDim>> fill_sensors(
        const std::vector<std::array<double, kSensorDim>>& observed,
        const std::vector<std::array<bool, kSensorDim>>& present, FillStrategy fill) const;

    ParameterStore store_;
    ModelConfig config_;
    ScalerStats scalers_;
    std::vector<std::vector<double>> h_i_;
    std::vector<std::array<double, kSensorDim>> xhat_;
    std::vector<std::array<double, kSensorDim>> xs_std_;
};

struct RobustnessConfig {
    int mask_draws = 10; // random masks per sample for 0 < missing < all
    int batch_size = 64;
    int bootstrap_resamples = 1000;
    std::uint64_t seed = 0;
};

struct RobustnessRow {
    int missing = 0;
    MetricsReport zero_fill;
    MetricsReport imputed;
};

// For each count of missing channels k = 0..kSensorDim, draws random masks,
// fills by both strategies, and reports metrics over all draws.
std::vector<RobustnessRow> robustness_sweep(const ParameterStore& store, const ModelConfig& config,
                                            const ScalerStats& scalers,
                                            const std::vector<Sample>& samples,
                                            const RobustnessConfig& rc = {});

// Header: missing,strategy,rmse,mse,accuracy,macro_auc
void write_robustness_csv(const std::string& path, const std::vector<RobustnessRow>& rows);

} // namespace aqfn
