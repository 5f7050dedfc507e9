#include "aqfn/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace fs = std::filesystem;

namespace aqfn {

namespace {

constexpr const char* kManifestHeader = "id,image_path,aqi,pm25,pm10,no2,so2,co,o3";

// Breakpoint tables: AQI node -> concentration node, linearly interpolated.
// Monotone by construction; CO in ppb.
constexpr std::array<double, 7> kAqiNodes = {0, 50, 100, 150, 200, 300, 500};
constexpr std::array<std::array<double, 7>, kSensorDim> kPollutantNodes = {{
    {0, 12.0, 35.4, 55.4, 150.4, 250.4, 500.4}, // pm25
    {0, 54, 154, 254, 354, 424, 604},           // pm10
    {0, 53, 100, 360, 649, 1249, 2049},         // no2
    {0, 35, 75, 185, 304, 604, 1004},           // so2
    {0, 4400, 9400, 12400, 15400, 30400, 50400},// co
    {0, 54, 70, 85, 105, 200, 400},             // o3
}};

double pollutant_from_aqi(int j, double aqi) {
    const double a = std::clamp(aqi, 0.0, 500.0);
    int k = 0;
    while (k < 5 && a > kAqiNodes[k + 1]) ++k;
    const double a0 = kAqiNodes[k], a1 = kAqiNodes[k + 1];
    const double p0 = kPollutantNodes[j][k], p1 = kPollutantNodes[j][k + 1];
    return p0 + (a - a0) / (a1 - a0) * (p1 - p0);
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& field, double& out) {
    const std::string t = trim(field);
    if (t.empty()) return false;
    try {
        std::size_t used = 0;
        out = std::stod(t, &used);
        return used == t.size() && std::isfinite(out);
    } catch (const std::exception&) {
        return false;
    }
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (const char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

double clampd(double v, double lo, double hi) { return std::clamp(v, lo, hi); }

// --- synthetic scene pieces ------------------------------------------------

Image draw_scene(int size, Rng& rng) {
    Image img(3, size, size);
    const int horizon = std::max(1, static_cast<int>(std::lround(size * 0.55)));
    const double tint = rng.uniform(-0.05, 0.05);
    const double sky_top[3] = {0.30 + tint, 0.50 + tint, 0.82};
    const double sky_bot[3] = {0.70, 0.76, 0.88};
    for (int y = 0; y < horizon; ++y) {
        const double t = horizon > 1 ? static_cast<double>(y) / (horizon - 1) : 0.0;
        for (int c = 0; c < 3; ++c) {
            const double v = sky_top[c] + t * (sky_bot[c] - sky_top[c]);
            for (int x = 0; x < size; ++x) img.at(c, y, x) = v;
        }
    }
    for (int y = horizon; y < size; ++y) {
        const double fade = 1.0 - 0.3 * static_cast<double>(y - horizon) /
                                      std::max(1, size - horizon);
        const double g[3] = {0.20 * fade, 0.22 * fade, 0.18 * fade};
        for (int c = 0; c < 3; ++c) {
            for (int x = 0; x < size; ++x) img.at(c, y, x) = g[c];
        }
    }

    // sun with a soft falloff, blended toward a warm white
    const double sun_x = rng.uniform(0.1, 0.9) * size;
    const double sun_y = rng.uniform(0.05, 0.35) * horizon;
    const double rad = rng.uniform(0.05, 0.10) * size;
    const double sun_col[3] = {1.0, 0.95, 0.75};
    for (int y = 0; y < horizon; ++y) {
        for (int x = 0; x < size; ++x) {
            const double d = std::hypot(y - sun_y, x - sun_x);
            if (d >= 2.0 * rad) continue;
            const double fall = 1.0 - d / (2.0 * rad);
            const double s = d < rad ? 1.0 : 0.5 * fall * fall;
            for (int c = 0; c < 3; ++c) {
                img.at(c, y, x) += s * (sun_col[c] - img.at(c, y, x));
            }
        }
    }

    // skyline rectangles rising from the horizon
    const int nb = rng.uniform_int(4, 8);
    double x_cursor = rng.uniform(0.0, 0.05) * size;
    for (int b = 0; b < nb && x_cursor < size; ++b) {
        const double w = size * rng.uniform(0.08, 0.20);
        const double h = horizon * rng.uniform(0.25, 0.75);
        const double shade = rng.uniform(0.12, 0.35);
        const double col[3] = {shade, shade * 1.03, shade * 1.10};
        const int x0 = static_cast<int>(x_cursor);
        const int x1 = std::min(size - 1, static_cast<int>(x_cursor + w));
        const int y0 = std::max(0, horizon - static_cast<int>(h));
        for (int y = y0; y < horizon; ++y) {
            for (int x = x0; x <= x1; ++x) {
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = col[c];
            }
        }
        x_cursor += w + size * rng.uniform(0.0, 0.04);
    }
    return img;
}

// Smooth value-noise field normalized to mean 0.5 in [0,1].
std::vector<double> haze_texture(int size, Rng& rng) {
    const int cell = std::max(4, size / 4);
    const int nodes = size / cell + 2;
    std::vector<double> grid(static_cast<std::size_t>(nodes) * nodes);
    for (double& g : grid) g = rng.uniform();
    std::vector<double> tex(static_cast<std::size_t>(size) * size);
    for (int y = 0; y < size; ++y) {
        const int gy = y / cell;
        double fy = static_cast<double>(y % cell) / cell;
        fy = fy * fy * (3 - 2 * fy);
        for (int x = 0; x < size; ++x) {
            const int gx = x / cell;
            double fx = static_cast<double>(x % cell) / cell;
            fx = fx * fx * (3 - 2 * fx);
            const double a = grid[gy * nodes + gx], b = grid[gy * nodes + gx + 1];
            const double c = grid[(gy + 1) * nodes + gx], d = grid[(gy + 1) * nodes + gx + 1];
            tex[static_cast<std::size_t>(y) * size + x] =
                (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy;
        }
    }
    double m = 0.0;
    for (const double v : tex) m += v;
    m /= static_cast<double>(tex.size());
    for (double& v : tex) v = clampd(v + 0.5 - m, 0.0, 1.0);
    return tex;
}

// half: -1 whole image, 0 top half only, 1 bottom half only.
void apply_haze(Image& img, double opacity, double brightness, const std::vector<double>& tex,
                double tex_strength, int half) {
    const int mid = img.height / 2;
    for (int y = 0; y < img.height; ++y) {
        if (half == 0 && y >= mid) continue;
        if (half == 1 && y < mid) continue;
        for (int x = 0; x < img.width; ++x) {
            const double tau =
                clampd(tex_strength * tex[static_cast<std::size_t>(y) * img.width + x], 0.0, 0.95);
            for (int c = 0; c < 3; ++c) {
                double p = img.at(c, y, x);
                p = (1.0 - opacity) * p + opacity;
                p = (1.0 - tau) * p + tau;
                p *= brightness;
                img.at(c, y, x) = clampd(p, 0.0, 1.0);
            }
        }
    }
}

double haze_brightness(double pm10) { return 1.0 - 0.3 * clampd(pm10 / 430.0, 0.0, 1.0); }

} // namespace

AqiClass classify_aqi(double aqi) {
    if (aqi < 0.0 || !std::isfinite(aqi)) {
        throw ParamError("classify_aqi: aqi must be nonnegative, got " + std::to_string(aqi));
    }
    for (int c = 0; c < kNumClasses - 1; ++c) {
        if (aqi <= kAqiClassUpper[c]) return static_cast<AqiClass>(c);
    }
    return AqiClass::hazardous;
}

const char* aqi_class_name(AqiClass c) {
    switch (c) {
    case AqiClass::good: return "Good";
    case AqiClass::moderate: return "Moderate";
    case AqiClass::unhealthy_sensitive: return "UnhealthySensitive";
    case AqiClass::unhealthy: return "Unhealthy";
    case AqiClass::very_unhealthy: return "VeryUnhealthy";
    case AqiClass::hazardous: return "Hazardous";
    }
    return "?";
}

ScalerStats fit_scalers(const std::vector<Sample>& train_samples) {
    if (train_samples.empty()) {
        throw ContractError("fit_scalers: no samples");
    }
    ScalerStats st;
    const double n = static_cast<double>(train_samples.size());
    for (const Sample& s : train_samples) {
        for (int j = 0; j < kSensorDim; ++j) st.sensor_mean[j] += s.sensors[j];
        st.aqi_mean += s.aqi;
    }
    for (int j = 0; j < kSensorDim; ++j) st.sensor_mean[j] /= n;
    st.aqi_mean /= n;
    std::array<double, kSensorDim> var{};
    double aqi_var = 0.0;
    for (const Sample& s : train_samples) {
        for (int j = 0; j < kSensorDim; ++j) {
            const double d = s.sensors[j] - st.sensor_mean[j];
            var[j] += d * d;
        }
        const double d = s.aqi - st.aqi_mean;
        aqi_var += d * d;
    }
    constexpr double kEps = 1e-8;
    for (int j = 0; j < kSensorDim; ++j) {
        st.sensor_std[j] = std::sqrt(var[j] / n); // population convention
        if (st.sensor_std[j] < kEps) {
            st.sensor_std[j] = kEps;
            ++st.clamped_channels;
        }
    }
    st.aqi_std = std::sqrt(aqi_var / n);
    if (st.aqi_std < kEps) {
        st.aqi_std = kEps;
        ++st.clamped_channels;
    }
    return st;
}

std::array<double, kSensorDim> standardize_sensors(const std::array<double, kSensorDim>& s,
                                                   const ScalerStats& st) {
    std::array<double, kSensorDim> out;
    for (int j = 0; j < kSensorDim; ++j) out[j] = (s[j] - st.sensor_mean[j]) / st.sensor_std[j];
    return out;
}

std::array<double, kSensorDim> destandardize_sensors(const std::array<double, kSensorDim>& s,
                                                     const ScalerStats& st) {
    std::array<double, kSensorDim> out;
    for (int j = 0; j < kSensorDim; ++j) out[j] = s[j] * st.sensor_std[j] + st.sensor_mean[j];
    return out;
}

double standardize_aqi(double aqi, const ScalerStats& st) {
    return (aqi - st.aqi_mean) / st.aqi_std;
}

double destandardize_aqi(double y, const ScalerStats& st) { return y * st.aqi_std + st.aqi_mean; }

Image normalize_image(const Image& img) {
    if (img.channels != 3) {
        throw ShapeError("normalize_image: need 3 channels, got " + std::to_string(img.channels));
    }
    Image out = img;
    const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
    for (int c = 0; c < 3; ++c) {
        const double m = kImageMean[c], inv = 1.0 / kImageStd[c];
        for (std::size_t i = 0; i < plane; ++i) {
            out.pix[c * plane + i] = (out.pix[c * plane + i] - m) * inv;
        }
    }
    return out;
}

void stratified_split(std::vector<Sample>& samples, const std::array<double, 3>& fractions,
                      std::uint64_t seed) {
    double fsum = 0.0;
    for (const double f : fractions) {
        if (f < 0.0) throw ParamError("stratified_split: negative fraction");
        fsum += f;
    }
    if (std::abs(fsum - 1.0) > 1e-9) {
        throw ParamError("stratified_split: fractions sum to " + std::to_string(fsum));
    }

    std::array<std::vector<std::size_t>, kNumClasses> by_class;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        by_class[static_cast<int>(classify_aqi(samples[i].aqi))].push_back(i);
    }

    const double total = static_cast<double>(samples.size());
    std::array<double, 3> target{};
    std::array<double, 3> assigned{};
    for (int i = 0; i < 3; ++i) target[i] = fractions[i] * total;

    // First pass: proportional floors for every class.
    std::array<std::array<std::size_t, 3>, kNumClasses> take{};
    for (int c = 0; c < kNumClasses; ++c) {
        for (int i = 0; i < 3; ++i) {
            take[c][i] = static_cast<std::size_t>(by_class[c].size() * fractions[i]);
            assigned[i] += static_cast<double>(take[c][i]);
        }
    }
    // Second pass: hand out each class's (at most two) leftovers to distinct
    // splits, largest remaining global deficit first. Keeps every class
    // within one sample of its proportional share in every split and the
    // overall sizes within rounding of the fractions.
    for (int c = 0; c < kNumClasses; ++c) {
        std::size_t base_sum = take[c][0] + take[c][1] + take[c][2];
        std::array<bool, 3> got{false, false, false};
        for (std::size_t l = base_sum; l < by_class[c].size(); ++l) {
            int best = -1;
            for (int i = 0; i < 3; ++i) {
                if (got[i]) continue;
                if (best < 0 || target[i] - assigned[i] > target[best] - assigned[best]) {
                    best = i;
                }
            }
            ++take[c][best];
            assigned[best] += 1.0;
            got[best] = true;
        }
    }

    Rng rng = Rng(seed).split("split");
    for (int c = 0; c < kNumClasses; ++c) {
        auto& grp = by_class[c];
        if (grp.empty()) continue;
        Rng grp_rng = rng.split(static_cast<std::uint64_t>(c));
        grp_rng.shuffle(grp);
        std::size_t k = 0;
        for (int i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < take[c][i]; ++j) {
                samples[grp[k++]].split = static_cast<Split>(i);
            }
        }
    }
}

AugmentParams draw_augment_params(Rng& rng) {
    AugmentParams p;
    p.flip = rng.bernoulli(0.5);
    p.rotation_deg = rng.uniform(-15.0, 15.0);
    p.brightness = rng.uniform(0.8, 1.2);
    p.contrast = rng.uniform(0.8, 1.2);
    return p;
}

Image apply_augment(const Image& img, const AugmentParams& p) {
    Image out = p.flip ? hflip(img) : img;
    out = rotate_bilinear(out, p.rotation_deg);
    if (p.brightness != 1.0) {
        for (double& v : out.pix) v *= p.brightness;
    }
    if (p.contrast != 1.0) {
        double m = 0.0;
        for (const double v : out.pix) m += v;
        m /= static_cast<double>(out.pix.size());
        for (double& v : out.pix) v = m + (v - m) * p.contrast;
    }
    for (double& v : out.pix) v = clampd(v, 0.0, 1.0);
    return out;
}

Sample augment(const Sample& s, Rng& rng) {
    Sample out = s;
    out.image = apply_augment(s.image, draw_augment_params(rng));
    return out;
}

std::vector<Sample> load_manifest(const std::string& path, int image_size, LoadReport* report) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open manifest: " + path);
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw DataError("manifest has no header row: " + path);
    }
    if (trim(line) != kManifestHeader) {
        throw DataError("manifest header mismatch in " + path + ": expected '" +
                        kManifestHeader + "'");
    }
    const fs::path dir = fs::path(path).parent_path();

    LoadReport local;
    LoadReport& rep = report ? *report : local;
    rep = LoadReport{};

    std::vector<Sample> samples;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        ++rep.rows_total;
        const auto fields = split_csv(line);
        const std::string where = "line " + std::to_string(lineno);
        if (fields.size() != 9) {
            rep.errors.push_back(where + ": expected 9 fields, got " +
                                 std::to_string(fields.size()));
            continue;
        }
        Sample s;
        s.id = trim(fields[0]);
        const std::string img_rel = trim(fields[1]);
        if (s.id.empty() || img_rel.empty()) {
            rep.errors.push_back(where + ": empty id or image_path");
            continue;
        }
        bool ok = parse_double(fields[2], s.aqi);
        for (int j = 0; ok && j < kSensorDim; ++j) {
            ok = parse_double(fields[3 + j], s.sensors[j]);
        }
        if (!ok) {
            rep.errors.push_back(where + ": unparsable numeric field");
            continue;
        }
        if (s.aqi < 0.0 || s.aqi > 500.0) {
            rep.errors.push_back(where + ": aqi out of range: " + trim(fields[2]));
            continue;
        }
        if (std::any_of(s.sensors.begin(), s.sensors.end(), [](double v) { return v < 0.0; })) {
            rep.errors.push_back(where + ": negative sensor value");
            continue;
        }
        try {
            const Image raw = load_image((dir / img_rel).string());
            s.image = resize_bilinear(raw, image_size, image_size);
        } catch (const Error& e) {
            rep.errors.push_back(where + ": " + e.what());
            continue;
        }
        samples.push_back(std::move(s));
    }
    rep.rows_loaded = static_cast<int>(samples.size());
    return samples;
}

void write_corpus(const std::string& dir, const std::vector<Sample>& samples) {
    const fs::path root(dir);
    fs::create_directories(root / "images");
    std::ofstream out(root / "manifest.csv");
    if (!out) {
        throw DataError("cannot write manifest under " + dir);
    }
    out << kManifestHeader << "\n";
    out << std::setprecision(10);
    for (const Sample& s : samples) {
        const std::string rel = "images/" + s.id + ".ppm";
        write_ppm((root / rel).string(), s.image);
        out << s.id << "," << rel << "," << s.aqi;
        for (int j = 0; j < kSensorDim; ++j) out << "," << s.sensors[j];
        out << "\n";
    }
    if (!out) {
        throw DataError("short manifest write under " + dir);
    }
}

std::vector<Sample> generate_synthetic(int n, int image_size, std::uint64_t seed,
                                       std::vector<SceneInfo>* info) {
    if (n <= 0) {
        throw ParamError("generate_synthetic: n must be positive");
    }
    if (image_size < 8) {
        throw ParamError("generate_synthetic: image_size must be at least 8");
    }
    if (info) {
        info->clear();
        info->reserve(static_cast<std::size_t>(n));
    }
    std::vector<Sample> samples;
    samples.reserve(static_cast<std::size_t>(n));
    const Rng scenes = Rng(seed).split("scenes");
    constexpr double kNoiseSigma = 0.25;
    for (int i = 0; i < n; ++i) {
        Rng r = scenes.split(static_cast<std::uint64_t>(i));
        Sample s;
        {
            std::ostringstream id;
            id << "syn_" << std::setw(6) << std::setfill('0') << i;
            s.id = id.str();
        }
        const int cls = r.uniform_int(0, kNumClasses - 1);
        const double lo = cls == 0 ? 0.0 : kAqiClassUpper[cls - 1];
        const double hi = cls == kNumClasses - 1 ? 500.0 : kAqiClassUpper[cls];
        s.aqi = r.uniform(lo, hi);
        for (int j = 0; j < kSensorDim; ++j) {
            // mean-one log-normal noise on a monotone map of AQI
            const double noise =
                std::exp(kNoiseSigma * r.normal() - 0.5 * kNoiseSigma * kNoiseSigma);
            s.sensors[j] = pollutant_from_aqi(j, s.aqi) * noise;
        }
        s.image = draw_scene(image_size, r);
        const auto tex = haze_texture(image_size, r);
        const double opacity = clampd(s.sensors[0] / 250.0, 0.0, 0.9);
        const double tex_strength = 0.45 * s.aqi / 500.0;
        apply_haze(s.image, opacity, haze_brightness(s.sensors[1]), tex, tex_strength, -1);
        if (info) {
            double tm = 0.0;
            for (const double v : tex) tm += clampd(tex_strength * v, 0.0, 0.95);
            info->push_back({opacity, tm / static_cast<double>(tex.size())});
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

Image generate_half_haze_probe(int image_size, int side, double aqi, std::uint64_t seed) {
    if (side != 0 && side != 1) {
        throw ParamError("generate_half_haze_probe: side must be 0 or 1");
    }
    // side is not folded into the stream: both probes share one scene
    Rng r = Rng(seed).split("probe");
    Image img = draw_scene(image_size, r);
    const auto tex = haze_texture(image_size, r);
    const double pm25 = pollutant_from_aqi(0, aqi);
    const double pm10 = pollutant_from_aqi(1, aqi);
    apply_haze(img, clampd(pm25 / 250.0, 0.0, 0.9), haze_brightness(pm10), tex,
               0.45 * aqi / 500.0, side);
    return img;
}

} // namespace aqfn
