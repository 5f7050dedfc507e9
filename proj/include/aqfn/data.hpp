#pragma once

// Dataset plumbing: manifest I/O, EPA AQI classes, standardization,
// augmentation, stratified splitting, and the synthetic scene generator.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "aqfn/errors.hpp"
#include "aqfn/image.hpp"
#include "aqfn/rng.hpp"

namespace aqfn {

constexpr int kSensorDim = 6;
constexpr int kNumClasses = 6;

// Column order in manifests and sensor vectors.
inline const std::array<const char*, kSensorDim> kSensorNames = {
    "pm25", "pm10", "no2", "so2", "co", "o3"};

enum class Split { train, val, test };

enum class AqiClass {
    good,
    moderate,
    unhealthy_sensitive,
    unhealthy,
    very_unhealthy,
    hazardous,
};

// Upper bound of each class band; values on a boundary belong to the lower
// class. The last band is open-ended.
inline const std::array<double, kNumClasses> kAqiClassUpper = {50.0,  100.0, 150.0,
                                                               200.0, 300.0, 1e300};

AqiClass classify_aqi(double aqi); // negative input -> ParamError
const char* aqi_class_name(AqiClass c);

struct Sample {
    std::string id;
    Image image; // unit-interval pixels, 3 channels
    std::array<double, kSensorDim> sensors{}; // physical units
    double aqi = 0.0;
    std::array<bool, kSensorDim> sensor_mask{true, true, true, true, true, true};
    Split split = Split::train;
};

struct ScalerStats {
    std::array<double, kSensorDim> sensor_mean{};
    std::array<double, kSensorDim> sensor_std{};
    double aqi_mean = 0.0;
    double aqi_std = 1.0;
    int clamped_channels = 0; // zero-variance sensor channels clamped to eps
};

// Fixed channel normalization constants for model input images.
inline const std::array<double, 3> kImageMean = {0.485, 0.456, 0.406};
inline const std::array<double, 3> kImageStd = {0.229, 0.224, 0.225};

// Fits sensor and AQI statistics over exactly the samples given; the
// training pipeline passes the train split. Zero-variance channels are
// clamped to 1e-8 and counted in clamped_channels.
ScalerStats fit_scalers(const std::vector<Sample>& train_samples);

std::array<double, kSensorDim> standardize_sensors(const std::array<double, kSensorDim>& s,
                                                   const ScalerStats& st);
std::array<double, kSensorDim> destandardize_sensors(const std::array<double, kSensorDim>& s,
                                                     const ScalerStats& st);
double standardize_aqi(double aqi, const ScalerStats& st);
double destandardize_aqi(double y, const ScalerStats& st);

// (pixel - mean) / std per channel; output values leave the unit interval.
Image normalize_image(const Image& img);

// Tags every sample's split in place. Per-class proportions are preserved
// within one sample per split; deterministic in (samples order, seed).
void stratified_split(std::vector<Sample>& samples, const std::array<double, 3>& fractions,
                      std::uint64_t seed);

struct AugmentParams {
    bool flip = false;
    double rotation_deg = 0.0;
    double brightness = 1.0; // multiplicative factor
    double contrast = 1.0;   // factor about the image mean
};

AugmentParams draw_augment_params(Rng& rng);
Image apply_augment(const Image& img, const AugmentParams& p);

// Random flip / rotation(+-15 deg) / brightness / contrast (factors in
// [0.8, 1.2]); pixels clamped back to [0,1]. Touches only the image.
Sample augment(const Sample& s, Rng& rng);

struct LoadReport {
    int rows_total = 0;
    int rows_loaded = 0;
    std::vector<std::string> errors; // one entry per skipped row
};

// Manifest schema: header `id,image_path,aqi,pm25,pm10,no2,so2,co,o3`,
// image_path relative to the manifest's directory. Malformed rows are
// skipped and itemized in the report; images are resized to image_size.
std::vector<Sample> load_manifest(const std::string& path, int image_size,
                                  LoadReport* report = nullptr);

// Writes images/<id>.ppm plus manifest.csv under dir.
void write_corpus(const std::string& dir, const std::vector<Sample>& samples);

// Per-sample composition facts the tests and acceptance probes rely on.
struct SceneInfo {
    double haze_opacity = 0.0;  // uniform white-overlay opacity
    double texture_mean = 0.0;  // mean of the AQI-driven haze texture layer
};

std::vector<Sample> generate_synthetic(int n, int image_size, std::uint64_t seed,
                                       std::vector<SceneInfo>* info = nullptr);

// Clean scene with the haze layers applied to one half only; used to probe
// spatial attribution. side: 0 = top half hazed, 1 = bottom half hazed.
Image generate_half_haze_probe(int image_size, int side, double aqi, std::uint64_t seed);

} // namespace aqfn
