// aqfn: corpus generation, training, evaluation, explanation, and prediction
// for the dual-objective image+sensor air quality model.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.

#include <array>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "aqfn/data.hpp"
#include "aqfn/errors.hpp"
#include "aqfn/eval.hpp"
#include "aqfn/explain.hpp"
#include "aqfn/model.hpp"
#include "aqfn/train.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace aqfn;

namespace {

std::string timestamp() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    localtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
    return buf;
}

// Mirrors progress to stdout and, with a timestamp prefix, to run.log.
// Timestamps never reach any other artifact, so reruns are byte-identical.
struct RunLog {
    std::ofstream file;

    explicit RunLog(const std::string& path) : file(path, std::ios::app) {
        if (!file) throw DataError("cannot open log file: " + path);
    }
    void line(const std::string& msg) {
        std::cout << msg << "\n";
        file << timestamp() << " " << msg << "\n";
    }
};

std::vector<Sample> load_corpus(const RunConfig& rc, int image_size) {
    const std::string manifest = rc.corpus_dir + "/manifest.csv";
    LoadReport report;
    std::vector<Sample> samples = load_manifest(manifest, image_size, &report);
    for (const auto& err : report.errors) {
        std::cerr << "warning: " << err << "\n";
    }
    if (samples.empty()) {
        throw DataError("no loadable samples in " + manifest);
    }
    return samples;
}

std::vector<Sample> take_split(std::vector<Sample> samples, Split split) {
    std::vector<Sample> out;
    for (auto& s : samples) {
        if (s.split == split) out.push_back(std::move(s));
    }
    return out;
}

Split split_from_string(const std::string& name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw ParamError("unknown split '" + name + "'");
}

TensorPtr image_tensor(const Image& img) {
    const Image norm = normalize_image(img);
    auto t = zeros({1, 3, norm.height, norm.width});
    t->data = norm.pix;
    return t;
}

TensorPtr sensor_tensor(const std::array<double, kSensorDim>& std_sensors, int sensor_dim) {
    auto t = zeros({1, sensor_dim});
    for (int j = 0; j < sensor_dim; ++j) t->data[j] = std_sensors[j];
    return t;
}

int cmd_generate(const RunConfig& rc, int n, int size, std::uint64_t seed) {
    const std::vector<Sample> samples = generate_synthetic(n, size, seed);
    write_corpus(rc.corpus_dir, samples);

    std::array<int, kNumClasses> hist{};
    for (const auto& s : samples) hist[static_cast<int>(classify_aqi(s.aqi))]++;
    std::cout << "wrote " << samples.size() << " samples to " << rc.corpus_dir
              << " (size " << size << ", seed " << seed << ")\n";
    std::cout << "class histogram:\n";
    for (int c = 0; c < kNumClasses; ++c) {
        std::printf("  %-20s %d\n", aqi_class_name(static_cast<AqiClass>(c)), hist[c]);
    }
    return 0;
}

int cmd_train(const RunConfig& rc) {
    std::vector<Sample> samples = load_corpus(rc, rc.model.image_size);
    stratified_split(samples, {rc.train_frac, rc.val_frac, rc.test_frac}, rc.train.seed);

    fs::create_directories(rc.output_dir);
    write_effective_config(rc, rc.output_dir + "/effective.cfg");
    RunLog log(rc.output_dir + "/run.log");

    log.line("training on " + std::to_string(samples.size()) + " samples from " + rc.corpus_dir);
    const Checkpoint ckpt = train_model(samples, rc.model, rc.train, [&](const EpochStats& st) {
        char buf[160];
        std::snprintf(buf, sizeof buf,
                      "epoch %3d/%d  train %.5f  val %.5f  rmse %.2f  acc %.3f  lr %.3e",
                      st.epoch, rc.train.max_epochs, st.train_loss, st.val_loss, st.val_rmse,
                      st.val_accuracy, st.lr);
        log.line(buf);
    });

    save_checkpoint(ckpt, rc.output_dir + "/checkpoint.bin");
    write_history_csv(rc.output_dir + "/history.csv", ckpt.history);

    const int ran = static_cast<int>(ckpt.history.size());
    char buf[160];
    std::snprintf(buf, sizeof buf, "stopped after epoch %d%s; best val loss %.6f at epoch %d",
                  ran, ran < rc.train.max_epochs ? " (early)" : "", ckpt.best_val_loss,
                  ckpt.epoch);
    log.line(buf);
    log.line("wrote " + rc.output_dir + "/checkpoint.bin and history.csv");
    return 0;
}

void write_confusion_csv(const std::string& path, const MetricsReport& rep) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << "true_class";
    for (int c = 0; c < kNumClasses; ++c) {
        out << ',' << aqi_class_name(static_cast<AqiClass>(c));
    }
    out << '\n';
    for (int t = 0; t < kNumClasses; ++t) {
        out << aqi_class_name(static_cast<AqiClass>(t));
        for (int p = 0; p < kNumClasses; ++p) out << ',' << rep.confusion[t][p];
        out << '\n';
    }
}

void write_sensor_se_csv(const std::string& path, const MetricsReport& rep) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << "sensor,standard_error\n";
    out.precision(17);
    for (int j = 0; j < kSensorDim; ++j) {
        out << kSensorNames[j] << ',' << rep.sensor_se[j] << '\n';
    }
}

int cmd_evaluate(const RunConfig& rc, const std::string& ckpt_path, const std::string& split_name,
                 bool robustness, bool bootstrap) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    std::vector<Sample> samples = load_corpus(rc, ckpt.model_config.image_size);
    // the checkpoint's seed reproduces the training-time split assignment
    stratified_split(samples, {rc.train_frac, rc.val_frac, rc.test_frac},
                     ckpt.train_config.seed);
    const std::vector<Sample> subset = take_split(std::move(samples), split_from_string(split_name));
    if (subset.empty()) {
        throw DataError("split '" + split_name + "' is empty");
    }

    const Predictor predictor(ckpt.params, ckpt.model_config, ckpt.scalers);
    const Predictor::Output out =
        predictor.predict(subset, FillStrategy::zero_fill, rc.eval_batch_size);

    std::vector<double> y_raw;
    std::vector<std::array<double, kSensorDim>> x_std;
    y_raw.reserve(subset.size());
    x_std.reserve(subset.size());
    for (const auto& s : subset) {
        y_raw.push_back(s.aqi);
        x_std.push_back(standardize_sensors(s.sensors, ckpt.scalers));
    }

    const int resamples = bootstrap ? rc.bootstrap_resamples : 0;
    const MetricsReport rep = compute_metrics(out.y_hat_raw, y_raw, out.x_hat_std, x_std,
                                              ckpt.scalers, resamples, ckpt.train_config.seed);

    fs::create_directories(rc.output_dir);
    {
        std::ofstream mj(rc.output_dir + "/metrics.json", std::ios::binary);
        if (!mj) throw DataError("cannot write " + rc.output_dir + "/metrics.json");
        mj << metrics_report_json(rep) << '\n';
    }
    write_confusion_csv(rc.output_dir + "/confusion.csv", rep);
    write_sensor_se_csv(rc.output_dir + "/sensor_se.csv", rep);

    std::vector<std::array<double, kNumClasses>> scores;
    std::vector<int> truth;
    scores.reserve(subset.size());
    truth.reserve(subset.size());
    for (std::size_t i = 0; i < subset.size(); ++i) {
        scores.push_back(class_scores(std::max(0.0, out.y_hat_raw[i])));
        truth.push_back(static_cast<int>(classify_aqi(y_raw[i])));
    }
    write_roc_csv(rc.output_dir + "/roc.csv", roc_curve_points(scores, truth));

    std::printf("split %s: n=%zu rmse=%.4f mse=%.4f accuracy=%.4f macro_auc=%.4f\n",
                split_name.c_str(), rep.n, rep.rmse, rep.mse, rep.accuracy, rep.macro_auc);
    if (bootstrap) {
        std::printf("rmse 95%% CI [%.4f, %.4f] (%d resamples)\n", rep.rmse_ci.first,
                    rep.rmse_ci.second, resamples);
    }
    std::cout << "sensor standard errors:\n";
    for (int j = 0; j < kSensorDim; ++j) {
        std::printf("  %-6s %.6f\n", kSensorNames[j], rep.sensor_se[j]);
    }

    if (robustness) {
        RobustnessConfig rob;
        rob.mask_draws = rc.robustness_draws;
        rob.batch_size = rc.eval_batch_size;
        rob.bootstrap_resamples = resamples;
        rob.seed = ckpt.train_config.seed;
        const std::vector<RobustnessRow> rows =
            robustness_sweep(ckpt.params, ckpt.model_config, ckpt.scalers, subset, rob);
        write_robustness_csv(rc.output_dir + "/robustness.csv", rows);
        std::cout << "robustness (missing -> zero-fill rmse / imputed rmse):\n";
        for (const auto& row : rows) {
            std::printf("  %d -> %.4f / %.4f\n", row.missing, row.zero_fill.rmse,
                        row.imputed.rmse);
        }
    }
    std::cout << "wrote evaluation artifacts to " << rc.output_dir << "\n";
    return 0;
}

CamTarget parse_target(const std::string& name) {
    if (name == "aqi") return CamTarget::aqi();
    for (int j = 0; j < kSensorDim; ++j) {
        if (name == kSensorNames[j]) return CamTarget::sensor(j);
    }
    std::string valid = "aqi";
    for (const char* n : kSensorNames) valid += std::string(", ") + n;
    throw ParamError("unknown explain target '" + name + "' (valid: " + valid + ")");
}

int cmd_explain(const RunConfig& rc, const std::string& ckpt_path,
                const std::vector<std::string>& ids, const std::vector<std::string>& target_names) {
    std::vector<CamTarget> targets;
    targets.reserve(target_names.size());
    for (const auto& n : target_names) targets.push_back(parse_target(n));

    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const std::vector<Sample> samples = load_corpus(rc, ckpt.model_config.image_size);
    std::map<std::string, const Sample*> by_id;
    for (const auto& s : samples) by_id[s.id] = &s;

    std::string missing;
    for (const auto& id : ids) {
        if (by_id.find(id) == by_id.end()) missing += (missing.empty() ? "" : ", ") + id;
    }
    if (!missing.empty()) {
        throw DataError("explain: sample ids not in corpus: " + missing);
    }

    const std::string dir = rc.output_dir + "/explain";
    fs::create_directories(dir);
    int written = 0;
    for (const auto& id : ids) {
        const Sample& s = *by_id[id];
        const TensorPtr x_i = image_tensor(s.image);
        const TensorPtr x_s =
            sensor_tensor(standardize_sensors(s.sensors, ckpt.scalers),
                          ckpt.model_config.sensor_dim);
        for (const CamTarget& target : targets) {
            const Heatmap h = grad_cam(ckpt.params, ckpt.model_config, x_i, x_s, target, id);
            const auto [pgm, ppm] = export_heatmap(h, s.image, dir);
            std::cout << pgm << "\n" << ppm << "\n";
            written += 2;
        }
    }
    std::cout << "wrote " << written << " heatmap files to " << dir << "\n";
    return 0;
}

int cmd_predict(const RunConfig& rc, const std::string& ckpt_path, const std::string& image_path,
                const std::vector<double>& sensor_values, const std::vector<int>& missing) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const int d = ckpt.model_config.sensor_dim;

    std::array<bool, kSensorDim> mask{};
    for (int j = 0; j < d; ++j) mask[j] = true;
    for (int j : missing) {
        if (j < 0 || j >= d) {
            throw ParamError("--missing index " + std::to_string(j) +
                             " out of range for sensor_dim " + std::to_string(d));
        }
        mask[j] = false;
    }
    int observed = 0;
    for (int j = 0; j < d; ++j) observed += mask[j] ? 1 : 0;
    if (static_cast<int>(sensor_values.size()) != observed) {
        throw ParamError("expected " + std::to_string(observed) +
                         " sensor values for the observed channels, got " +
                         std::to_string(sensor_values.size()));
    }

    Sample s;
    s.id = "cli";
    s.image = resize_bilinear(load_image(image_path), ckpt.model_config.image_size,
                              ckpt.model_config.image_size);
    s.sensor_mask = mask;
    std::size_t next = 0;
    for (int j = 0; j < d; ++j) {
        s.sensors[j] = mask[j] ? sensor_values[next++] : 0.0;
    }

    const Predictor predictor(ckpt.params, ckpt.model_config, ckpt.scalers);
    const Predictor::Output out = predictor.predict({s}, FillStrategy::imputed, 1);
    const double y = out.y_hat_raw[0];
    const AqiClass cls = classify_aqi(std::max(0.0, y));
    const std::array<double, kSensorDim> est =
        destandardize_sensors(out.x_hat_std[0], ckpt.scalers);

    std::printf("aqi: %.2f\n", y);
    std::printf("class: %s\n", aqi_class_name(cls));
    std::cout << "sensors (physical units):\n";
    for (int j = 0; j < d; ++j) {
        if (mask[j]) {
            std::printf("  %-6s %10.3f  observed (head estimate %.3f)\n", kSensorNames[j],
                        s.sensors[j], est[j]);
        } else {
            std::printf("  %-6s %10.3f  imputed\n", kSensorNames[j], est[j]);
        }
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"aqfn: dual-objective air quality estimation from images and sensors"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_override;
    std::string corpus_override;
    app.add_option("--config", config_path, "key=value run configuration file");
    app.add_option("--set", overrides, "override one config key (key=value, repeatable)");
    app.add_option("--out", out_override, "output directory (overrides output_dir)");
    app.add_option("--corpus", corpus_override, "corpus directory (overrides corpus_dir)");

    auto* gen = app.add_subcommand("generate", "write a synthetic corpus");
    int gen_n = 600;
    int gen_size = 0;
    std::uint64_t gen_seed = 0;
    gen->add_option("-n,--count", gen_n, "number of samples")->check(CLI::PositiveNumber);
    gen->add_option("--size", gen_size, "image size (default: config image_size)");
    auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "scene seed (default: config seed)");
    gen->fallthrough();

    auto* train = app.add_subcommand("train", "train a model on the corpus");
    train->fallthrough();

    auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint on one split");
    std::string eval_ckpt;
    std::string eval_split = "test";
    bool eval_robustness = false;
    bool eval_bootstrap = false;
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint path (default: output_dir/checkpoint.bin)");
    eval->add_option("--split", eval_split, "split to evaluate")
        ->check(CLI::IsMember({"train", "val", "test"}));
    eval->add_flag("--robustness", eval_robustness, "sweep missing-sensor counts k=0..6");
    eval->add_flag("--bootstrap", eval_bootstrap, "bootstrap the rmse confidence interval");
    eval->fallthrough();

    auto* explain = app.add_subcommand("explain", "export heatmaps for corpus samples");
    std::string explain_ckpt;
    std::vector<std::string> explain_ids;
    std::vector<std::string> explain_targets;
    explain->add_option("--checkpoint", explain_ckpt,
                        "checkpoint path (default: output_dir/checkpoint.bin)");
    explain->add_option("--id", explain_ids, "sample id (repeatable)")->required();
    explain->add_option("--target", explain_targets,
                        "aqi or a pollutant channel name (repeatable; default aqi)");
    explain->fallthrough();

    auto* predict = app.add_subcommand("predict", "predict from one image and sensor readings");
    std::string predict_ckpt;
    std::string predict_image;
    std::vector<double> predict_sensors;
    std::vector<int> predict_missing;
    predict->add_option("--checkpoint", predict_ckpt,
                        "checkpoint path (default: output_dir/checkpoint.bin)");
    predict->add_option("--image", predict_image, "PNG or PPM image path")->required();
    predict->add_option("--sensors", predict_sensors,
                        "comma-separated readings for the observed channels, manifest order")
        ->delimiter(',');
    predict->add_option("--missing", predict_missing,
                        "comma-separated indices of missing channels (0-based)")
        ->delimiter(',');
    predict->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        RunConfig rc = default_run_config();
        if (!config_path.empty()) load_run_config_file(rc, config_path);
        for (const std::string& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) {
                throw ParamError("--set expects key=value, got '" + kv + "'");
            }
            apply_setting(rc, kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (!corpus_override.empty()) rc.corpus_dir = corpus_override;
        if (!out_override.empty()) rc.output_dir = out_override;
        rc.validate();

        const std::string default_ckpt = rc.output_dir + "/checkpoint.bin";
        if (gen->parsed()) {
            return cmd_generate(rc, gen_n, gen_size > 0 ? gen_size : rc.model.image_size,
                                gen_seed_opt->count() > 0 ? gen_seed : rc.train.seed);
        }
        if (train->parsed()) {
            return cmd_train(rc);
        }
        if (eval->parsed()) {
            return cmd_evaluate(rc, eval_ckpt.empty() ? default_ckpt : eval_ckpt, eval_split,
                                eval_robustness, eval_bootstrap);
        }
        if (explain->parsed()) {
            if (explain_targets.empty()) explain_targets = {"aqi"};
            return cmd_explain(rc, explain_ckpt.empty() ? default_ckpt : explain_ckpt,
                               explain_ids, explain_targets);
        }
        if (predict->parsed()) {
            return cmd_predict(rc, predict_ckpt.empty() ? default_ckpt : predict_ckpt,
                               predict_image, predict_sensors, predict_missing);
        }
        return 1; // unreachable with require_subcommand(1)
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
