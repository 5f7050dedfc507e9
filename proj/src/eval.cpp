#include "aqfn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "aqfn/errors.hpp"
#include "aqfn/rng.hpp"

namespace aqfn {

namespace {

constexpr std::array<double, kNumClasses> kClassMid = {25.0, 75.0, 125.0, 175.0, 250.0, 400.0};
constexpr std::array<double, kNumClasses> kClassHalfwidth = {25.0, 25.0, 25.0, 25.0, 50.0, 100.0};

void check_paired(const char* what, std::size_t a, std::size_t b) {
    if (a == 0) throw ParamError(std::string(what) + ": empty input");
    if (a != b) {
        throw ParamError(std::string(what) + ": length mismatch (" + std::to_string(a) + " vs " +
                         std::to_string(b) + ")");
    }
}

double rmse_of(const std::vector<double>& y_hat, const std::vector<double>& y) {
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double e = y_hat[i] - y[i];
        acc += e * e;
    }
    return std::sqrt(acc / static_cast<double>(y.size()));
}

} // namespace

RegressionMetrics regression_metrics(const std::vector<double>& y_hat,
                                     const std::vector<double>& y) {
    check_paired("regression_metrics", y_hat.size(), y.size());
    RegressionMetrics m;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double e = y_hat[i] - y[i];
        m.mse += e * e;
    }
    m.mse /= static_cast<double>(y.size());
    m.rmse = std::sqrt(m.mse);
    return m;
}

double classification_accuracy(const std::vector<double>& y_hat, const std::vector<double>& y,
                               std::size_t* clamped) {
    check_paired("classification_accuracy", y_hat.size(), y.size());
    std::size_t hits = 0, negatives = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        double p = y_hat[i];
        if (p < 0.0) {
            p = 0.0;
            ++negatives;
        }
        if (classify_aqi(p) == classify_aqi(y[i])) ++hits;
    }
    if (clamped) *clamped = negatives;
    return static_cast<double>(hits) / static_cast<double>(y.size());
}

std::array<double, kNumClasses> class_scores(double y_hat) {
    const double y = std::max(y_hat, 0.0);
    std::array<double, kNumClasses> s{};
    double total = 0.0;
    for (int c = 0; c < kNumClasses; ++c) {
        s[c] = std::exp(-std::abs(y - kClassMid[c]) / kClassHalfwidth[c]);
        total += s[c];
    }
    for (double& v : s) v /= total;
    return s;
}

AucReport roc_auc(const std::vector<std::array<double, kNumClasses>>& scores,
                  const std::vector<int>& true_class) {
    check_paired("roc_auc", scores.size(), true_class.size());
    std::array<std::size_t, kNumClasses> positives{};
    for (const int c : true_class) {
        if (c < 0 || c >= kNumClasses) {
            throw ParamError("roc_auc: class index " + std::to_string(c) + " out of range");
        }
        ++positives[c];
    }

    AucReport report;
    report.per_class.fill(std::numeric_limits<double>::quiet_NaN());
    const std::size_t n = scores.size();
    double macro_sum = 0.0;
    int macro_n = 0;
    for (int c = 0; c < kNumClasses; ++c) {
        const std::size_t n_pos = positives[c];
        const std::size_t n_neg = n - n_pos;
        if (n_pos == 0 || n_neg == 0) continue;

        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return scores[a][c] < scores[b][c];
        });
        // average ranks across ties, then the Mann-Whitney statistic
        double rank_pos = 0.0;
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && scores[order[j + 1]][c] == scores[order[i]][c]) ++j;
            const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
            for (std::size_t k = i; k <= j; ++k) {
                if (true_class[order[k]] == c) rank_pos += avg_rank;
            }
            i = j + 1;
        }
        const double np = static_cast<double>(n_pos);
        const double auc = (rank_pos - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
        report.per_class[c] = auc;
        report.defined[c] = true;
        macro_sum += auc;
        ++macro_n;
    }
    if (macro_n == 0) {
        throw DataError("roc_auc: every sample belongs to the same class; no AUC is defined");
    }
    report.macro = macro_sum / macro_n;
    return report;
}

std::vector<RocPoint> roc_curve_points(const std::vector<std::array<double, kNumClasses>>& scores,
                                       const std::vector<int>& true_class) {
    check_paired("roc_curve_points", scores.size(), true_class.size());
    const std::size_t n = scores.size();
    std::vector<RocPoint> points;
    for (int c = 0; c < kNumClasses; ++c) {
        std::size_t n_pos = 0;
        for (const int t : true_class) n_pos += (t == c);
        const std::size_t n_neg = n - n_pos;
        if (n_pos == 0 || n_neg == 0) continue;

        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return scores[a][c] > scores[b][c];
        });
        std::size_t tp = 0, fp = 0, i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && scores[order[j + 1]][c] == scores[order[i]][c]) ++j;
            for (std::size_t k = i; k <= j; ++k) {
                if (true_class[order[k]] == c) {
                    ++tp;
                } else {
                    ++fp;
                }
            }
            points.push_back({c, scores[order[i]][c], static_cast<double>(fp) / n_neg,
                              static_cast<double>(tp) / n_pos});
            i = j + 1;
        }
    }
    return points;
}

void write_roc_csv(const std::string& path, const std::vector<RocPoint>& points) {
    std::ofstream out(path);
    if (!out) throw DataError("write_roc_csv: cannot open " + path);
    out << "class,threshold,fpr,tpr\n";
    out << std::setprecision(10);
    for (const RocPoint& p : points) {
        out << p.cls << ',' << p.threshold << ',' << p.fpr << ',' << p.tpr << '\n';
    }
}

std::array<double, kSensorDim>
sensor_standard_errors(const std::vector<std::array<double, kSensorDim>>& x_hat,
                       const std::vector<std::array<double, kSensorDim>>& x,
                       const ScalerStats& scalers) {
    check_paired("sensor_standard_errors", x_hat.size(), x.size());
    const std::size_t n = x.size();
    if (n < 2) throw ParamError("sensor_standard_errors: need at least 2 samples");

    std::array<std::vector<double>, kSensorDim> residuals;
    for (auto& r : residuals) r.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto pred = destandardize_sensors(x_hat[i], scalers);
        const auto truth = destandardize_sensors(x[i], scalers);
        for (int j = 0; j < kSensorDim; ++j) residuals[j].push_back(pred[j] - truth[j]);
    }
    std::array<double, kSensorDim> se{};
    for (int j = 0; j < kSensorDim; ++j) {
        double mean = 0.0;
        for (const double r : residuals[j]) mean += r;
        mean /= static_cast<double>(n);
        double ss = 0.0;
        for (const double r : residuals[j]) ss += (r - mean) * (r - mean);
        se[j] = std::sqrt(ss / static_cast<double>(n - 1)) / std::sqrt(static_cast<double>(n));
    }
    return se;
}

std::pair<double, double> bootstrap_rmse_ci(const std::vector<double>& y_hat,
                                            const std::vector<double>& y, int resamples,
                                            double level, std::uint64_t seed) {
    check_paired("bootstrap_rmse_ci", y_hat.size(), y.size());
    const std::size_t n = y.size();
    if (n < 2) throw ParamError("bootstrap_rmse_ci: need at least 2 samples");
    if (resamples < 1) throw ParamError("bootstrap_rmse_ci: resamples must be positive");
    if (level <= 0.0 || level >= 1.0) {
        throw ParamError("bootstrap_rmse_ci: level must be in (0,1)");
    }

    const Rng base = Rng(seed).split("bootstrap");
    std::vector<double> stats(resamples);
    std::vector<double> yh(n), yt(n);
    for (int r = 0; r < resamples; ++r) {
        Rng rng = base.split(static_cast<std::uint64_t>(r));
        for (std::size_t i = 0; i < n; ++i) {
            const auto k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(n) - 1));
            yh[i] = y_hat[k];
            yt[i] = y[k];
        }
        stats[r] = rmse_of(yh, yt);
    }
    std::sort(stats.begin(), stats.end());
    auto quantile = [&](double q) {
        const double pos = q * static_cast<double>(resamples - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const auto hi = std::min(lo + 1, static_cast<std::size_t>(resamples - 1));
        const double frac = pos - static_cast<double>(lo);
        return stats[lo] + frac * (stats[hi] - stats[lo]);
    };
    const double tail = (1.0 - level) / 2.0;
    return {quantile(tail), quantile(1.0 - tail)};
}

MetricsReport compute_metrics(const std::vector<double>& y_hat_raw,
                              const std::vector<double>& y_raw,
                              const std::vector<std::array<double, kSensorDim>>& x_hat_std,
                              const std::vector<std::array<double, kSensorDim>>& x_std,
                              const ScalerStats& scalers, int bootstrap_resamples,
                              std::uint64_t seed) {
    MetricsReport rep;
    rep.n = y_raw.size();
    const RegressionMetrics rm = regression_metrics(y_hat_raw, y_raw);
    rep.rmse = rm.rmse;
    rep.mse = rm.mse;
    rep.accuracy = classification_accuracy(y_hat_raw, y_raw, &rep.negative_clamped);
    if (bootstrap_resamples > 0) {
        rep.rmse_ci = bootstrap_rmse_ci(y_hat_raw, y_raw, bootstrap_resamples, 0.95, seed);
    } else {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        rep.rmse_ci = {nan, nan};
    }

    std::vector<std::array<double, kNumClasses>> scores;
    scores.reserve(y_hat_raw.size());
    std::vector<int> truth;
    truth.reserve(y_raw.size());
    for (std::size_t i = 0; i < y_raw.size(); ++i) {
        scores.push_back(class_scores(y_hat_raw[i]));
        truth.push_back(static_cast<int>(classify_aqi(y_raw[i])));
        const int pred = static_cast<int>(classify_aqi(std::max(y_hat_raw[i], 0.0)));
        ++rep.confusion[truth.back()][pred];
    }
    const AucReport auc = roc_auc(scores, truth);
    rep.per_class_auc = auc.per_class;
    rep.auc_defined = auc.defined;
    rep.macro_auc = auc.macro;
    rep.sensor_se = sensor_standard_errors(x_hat_std, x_std, scalers);
    return rep;
}

std::string metrics_report_json(const MetricsReport& report) {
    nlohmann::json j;
    j["n"] = report.n;
    j["rmse"] = report.rmse;
    j["mse"] = report.mse;
    j["accuracy"] = report.accuracy;
    j["negative_clamped"] = report.negative_clamped;
    j["rmse_ci"] = {report.rmse_ci.first, report.rmse_ci.second};
    j["macro_auc"] = report.macro_auc;
    nlohmann::json auc = nlohmann::json::array();
    nlohmann::json classes = nlohmann::json::array();
    for (int c = 0; c < kNumClasses; ++c) {
        classes.push_back(aqi_class_name(static_cast<AqiClass>(c)));
        if (report.auc_defined[c]) {
            auc.push_back(report.per_class_auc[c]);
        } else {
            auc.push_back(nullptr);
        }
    }
    j["classes"] = classes;
    j["per_class_auc"] = auc;
    nlohmann::json se;
    for (int s = 0; s < kSensorDim; ++s) se[kSensorNames[s]] = report.sensor_se[s];
    j["sensor_se"] = se;
    nlohmann::json confusion = nlohmann::json::array();
    for (const auto& row : report.confusion) confusion.push_back(row);
    j["confusion"] = confusion;
    return j.dump(2);
}

Predictor::Predictor(const ParameterStore& store, const ModelConfig& config,
                     const ScalerStats& scalers)
    : store_(store), config_(config), scalers_(scalers) {
    config_.validate();
}

namespace {

TensorPtr image_batch_tensor(const std::vector<Sample>& samples, std::size_t lo, std::size_t hi,
                             int image_size) {
    const std::size_t px = static_cast<std::size_t>(3) * image_size * image_size;
    std::vector<double> buf;
    buf.reserve((hi - lo) * px);
    for (std::size_t i = lo; i < hi; ++i) {
        const Image norm = normalize_image(samples[i].image);
        if (norm.height != image_size || norm.width != image_size) {
            throw ShapeError("predict: sample " + samples[i].id + " is " +
                             std::to_string(norm.width) + "px, model expects " +
                             std::to_string(image_size));
        }
        buf.insert(buf.end(), norm.pix.begin(), norm.pix.end());
    }
    return tensor(std::move(buf), {static_cast<int>(hi - lo), 3, image_size, image_size});
}

} // namespace

std::vector<std::array<double, kSensorDim>> Predictor::fill_sensors(
    const std::vector<std::array<double, kSensorDim>>& observed,
    const std::vector<std::array<bool, kSensorDim>>& present, FillStrategy fill) const {
    std::vector<std::array<double, kSensorDim>> out = observed;
    for (std::size_t i = 0; i < out.size(); ++i) {
        for (int j = 0; j < kSensorDim; ++j) {
            if (present[i][j]) continue;
            out[i][j] = fill == FillStrategy::zero_fill ? 0.0 : xhat_[i][j];
        }
    }
    return out;
}

void Predictor::cache_images(const std::vector<Sample>& samples, int batch_size) {
    if (samples.empty()) throw ParamError("cache_images: no samples");
    if (batch_size < 1) throw ParamError("cache_images: batch_size must be positive");
    h_i_.clear();
    xhat_.clear();
    xs_std_.clear();
    h_i_.reserve(samples.size());
    xhat_.reserve(samples.size());
    xs_std_.reserve(samples.size());
    for (std::size_t lo = 0; lo < samples.size(); lo += batch_size) {
        const std::size_t hi = std::min(samples.size(), lo + batch_size);
        const TensorPtr x_i = image_batch_tensor(samples, lo, hi, config_.image_size);
        const ImageEncoding enc = encode_image(x_i, store_, config_, Mode::eval);
        const TensorPtr xh = apply_sensor_head(enc.h_i, store_);
        for (std::size_t i = lo; i < hi; ++i) {
            const std::size_t b = i - lo;
            h_i_.emplace_back(enc.h_i->data.begin() + b * config_.embed_dim,
                              enc.h_i->data.begin() + (b + 1) * config_.embed_dim);
            std::array<double, kSensorDim> row{};
            for (int j = 0; j < kSensorDim; ++j) row[j] = xh->data[b * kSensorDim + j];
            xhat_.push_back(row);
            xs_std_.push_back(standardize_sensors(samples[i].sensors, scalers_));
        }
    }
}

Predictor::Output Predictor::predict_cached(const std::vector<std::array<bool, kSensorDim>>& present,
                                            FillStrategy fill, int batch_size) const {
    if (h_i_.empty()) throw ContractError("predict_cached: cache_images has not been run");
    if (batch_size < 1) throw ParamError("predict_cached: batch_size must be positive");
    if (present.size() != h_i_.size()) {
        throw ParamError("predict_cached: " + std::to_string(present.size()) + " masks for " +
                         std::to_string(h_i_.size()) + " cached samples");
    }
    const auto filled = fill_sensors(xs_std_, present, fill);
    Output out;
    out.y_hat_raw.reserve(h_i_.size());
    out.x_hat_std = xhat_;
    Rng rng(0); // dropout is inert in eval mode
    for (std::size_t lo = 0; lo < h_i_.size(); lo += batch_size) {
        const std::size_t hi = std::min(h_i_.size(), lo + batch_size);
        const int b = static_cast<int>(hi - lo);
        std::vector<double> hbuf, sbuf;
        hbuf.reserve(b * config_.embed_dim);
        sbuf.reserve(b * config_.sensor_dim);
        for (std::size_t i = lo; i < hi; ++i) {
            hbuf.insert(hbuf.end(), h_i_[i].begin(), h_i_[i].end());
            sbuf.insert(sbuf.end(), filled[i].begin(), filled[i].begin() + config_.sensor_dim);
        }
        const TensorPtr h_i = tensor(std::move(hbuf), {b, config_.embed_dim});
        const TensorPtr x_s = tensor(std::move(sbuf), {b, config_.sensor_dim});
        const TensorPtr h_s = encode_sensors(x_s, store_, config_, Mode::eval, rng);
        const TensorPtr y = apply_aqi_head(fuse(h_i, h_s, store_, config_, Mode::eval, rng), store_);
        for (int i = 0; i < b; ++i) {
            out.y_hat_raw.push_back(destandardize_aqi(y->data[i], scalers_));
        }
    }
    return out;
}

Predictor::Output Predictor::predict(const std::vector<Sample>& samples, FillStrategy fill,
                                     int batch_size) const {
    Predictor scratch(*this);
    scratch.cache_images(samples, batch_size);
    std::vector<std::array<bool, kSensorDim>> present;
    present.reserve(samples.size());
    for (const Sample& s : samples) present.push_back(s.sensor_mask);
    return scratch.predict_cached(present, fill, batch_size);
}

std::vector<RobustnessRow> robustness_sweep(const ParameterStore& store, const ModelConfig& config,
                                            const ScalerStats& scalers,
                                            const std::vector<Sample>& samples,
                                            const RobustnessConfig& rc) {
    if (samples.size() < 2) throw ParamError("robustness_sweep: need at least 2 samples");
    if (rc.mask_draws < 1) throw ParamError("robustness_sweep: mask_draws must be positive");

    Predictor predictor(store, config, scalers);
    predictor.cache_images(samples, rc.batch_size);

    std::vector<double> y_raw;
    std::vector<std::array<double, kSensorDim>> x_std;
    y_raw.reserve(samples.size());
    x_std.reserve(samples.size());
    for (const Sample& s : samples) {
        y_raw.push_back(s.aqi);
        x_std.push_back(standardize_sensors(s.sensors, scalers));
    }
    const auto& x_hat = predictor.cached_imputations();

    const Rng mask_base = Rng(rc.seed).split("mask");
    std::vector<RobustnessRow> rows;
    for (int k = 0; k <= kSensorDim; ++k) {
        // the all-present and all-missing masks are unique, so one draw suffices
        const int draws = (k == 0 || k == kSensorDim) ? 1 : rc.mask_draws;
        RobustnessRow row;
        row.missing = k;
        for (const FillStrategy fill : {FillStrategy::zero_fill, FillStrategy::imputed}) {
            std::vector<double> y_hat_all, y_all;
            y_hat_all.reserve(samples.size() * draws);
            y_all.reserve(samples.size() * draws);
            for (int d = 0; d < draws; ++d) {
                std::vector<std::array<bool, kSensorDim>> present(
                    samples.size(), {true, true, true, true, true, true});
                for (std::size_t i = 0; i < samples.size(); ++i) {
                    Rng rng = mask_base.split(static_cast<std::uint64_t>(k))
                                  .split(static_cast<std::uint64_t>(d))
                                  .split(static_cast<std::uint64_t>(i));
                    std::vector<int> chans = {0, 1, 2, 3, 4, 5};
                    rng.shuffle(chans);
                    for (int m = 0; m < k; ++m) present[i][chans[m]] = false;
                }
                const Predictor::Output out =
                    predictor.predict_cached(present, fill, rc.batch_size);
                y_hat_all.insert(y_hat_all.end(), out.y_hat_raw.begin(), out.y_hat_raw.end());
                y_all.insert(y_all.end(), y_raw.begin(), y_raw.end());
            }
            const std::uint64_t ci_seed =
                rc.seed * 1000003u + static_cast<std::uint64_t>(k) * 2u +
                (fill == FillStrategy::imputed ? 1u : 0u);
            const MetricsReport rep = compute_metrics(y_hat_all, y_all, x_hat, x_std, scalers,
                                                      rc.bootstrap_resamples, ci_seed);
            if (fill == FillStrategy::zero_fill) {
                row.zero_fill = rep;
            } else {
                row.imputed = rep;
            }
        }
        rows.push_back(row);
    }
    return rows;
}

void write_robustness_csv(const std::string& path, const std::vector<RobustnessRow>& rows) {
    std::ofstream out(path);
    if (!out) throw DataError("write_robustness_csv: cannot open " + path);
    out << "missing,strategy,rmse,mse,accuracy,macro_auc\n";
    out << std::setprecision(10);
    for (const RobustnessRow& r : rows) {
        out << r.missing << ",zero_fill," << r.zero_fill.rmse << ',' << r.zero_fill.mse << ','
            << r.zero_fill.accuracy << ',' << r.zero_fill.macro_auc << '\n';
        out << r.missing << ",imputed," << r.imputed.rmse << ',' << r.imputed.mse << ','
            << r.imputed.accuracy << ',' << r.imputed.macro_auc << '\n';
    }
}

} // namespace aqfn
