#include "run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "aqfn/errors.hpp"

namespace aqfn {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ParamError("config key '" + key + "': cannot parse '" + v + "' as a number");
    }
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const int x = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ParamError("config key '" + key + "': cannot parse '" + v + "' as an integer");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const unsigned long long x = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return static_cast<std::uint64_t>(x);
    } catch (const std::exception&) {
        throw ParamError("config key '" + key + "': cannot parse '" + v +
                         "' as an unsigned integer");
    }
}

} // namespace

void RunConfig::validate() const {
    model.validate();
    train.validate();
    if (corpus_dir.empty()) throw ParamError("corpus_dir must not be empty");
    if (output_dir.empty()) throw ParamError("output_dir must not be empty");
    if (train_frac <= 0.0 || val_frac <= 0.0 || test_frac <= 0.0) {
        throw ParamError("split fractions must be positive");
    }
    const double sum = train_frac + val_frac + test_frac;
    if (sum < 0.999 || sum > 1.001) {
        throw ParamError("split fractions must sum to 1, got " + std::to_string(sum));
    }
    if (bootstrap_resamples < 0) throw ParamError("bootstrap_resamples must be >= 0");
    if (robustness_draws < 1) throw ParamError("robustness_draws must be >= 1");
    if (eval_batch_size < 1) throw ParamError("eval_batch_size must be >= 1");
}

RunConfig default_run_config() {
    RunConfig rc;
    const char* root = std::getenv("AQFN_OUTPUT_ROOT");
    rc.output_dir = (root != nullptr && *root != '\0') ? std::string(root) + "/run" : "runs/run";
    return rc;
}

void apply_setting(RunConfig& rc, const std::string& key, const std::string& value) {
    const std::string k = trim(key);
    const std::string v = trim(value);
    if (k == "backbone") {
        rc.model.backbone_profile = backbone_profile_from_string(v);
    } else if (k == "image_size") {
        rc.model.image_size = parse_int(k, v);
    } else if (k == "sensor_dim") {
        rc.model.sensor_dim = parse_int(k, v);
    } else if (k == "embed_dim") {
        rc.model.embed_dim = parse_int(k, v);
    } else if (k == "fusion_dim") {
        rc.model.fusion_dim = parse_int(k, v);
    } else if (k == "proj_hidden_dim") {
        rc.model.proj_hidden_dim = parse_int(k, v);
    } else if (k == "dropout") {
        rc.model.dropout_rate = parse_double(k, v);
    } else if (k == "alpha") {
        rc.model.alpha = parse_double(k, v);
        rc.train.alpha = rc.model.alpha;
    } else if (k == "lr") {
        rc.train.lr = parse_double(k, v);
    } else if (k == "weight_decay") {
        rc.train.weight_decay = parse_double(k, v);
    } else if (k == "batch_size") {
        rc.train.batch_size = parse_int(k, v);
    } else if (k == "max_epochs") {
        rc.train.max_epochs = parse_int(k, v);
    } else if (k == "patience") {
        rc.train.patience = parse_int(k, v);
    } else if (k == "seed") {
        rc.train.seed = parse_u64(k, v);
    } else if (k == "corpus_dir") {
        rc.corpus_dir = v;
    } else if (k == "output_dir") {
        rc.output_dir = v;
    } else if (k == "train_frac") {
        rc.train_frac = parse_double(k, v);
    } else if (k == "val_frac") {
        rc.val_frac = parse_double(k, v);
    } else if (k == "test_frac") {
        rc.test_frac = parse_double(k, v);
    } else if (k == "bootstrap_resamples") {
        rc.bootstrap_resamples = parse_int(k, v);
    } else if (k == "robustness_draws") {
        rc.robustness_draws = parse_int(k, v);
    } else if (k == "eval_batch_size") {
        rc.eval_batch_size = parse_int(k, v);
    } else {
        throw ParamError("unknown config key '" + k + "'");
    }
}

void load_run_config_file(RunConfig& rc, const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot read config file: " + path);
    }
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string t = trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ParamError("config file " + path + " line " + std::to_string(lineno) +
                             ": expected key=value, got '" + t + "'");
        }
        apply_setting(rc, t.substr(0, eq), t.substr(eq + 1));
    }
}

std::string run_config_text(const RunConfig& rc) {
    std::ostringstream out;
    out.precision(17);
    out << "backbone = " << backbone_profile_name(rc.model.backbone_profile) << "\n"
        << "image_size = " << rc.model.image_size << "\n"
        << "sensor_dim = " << rc.model.sensor_dim << "\n"
        << "embed_dim = " << rc.model.embed_dim << "\n"
        << "fusion_dim = " << rc.model.fusion_dim << "\n"
        << "proj_hidden_dim = " << rc.model.proj_hidden_dim << "\n"
        << "dropout = " << rc.model.dropout_rate << "\n"
        << "alpha = " << rc.model.alpha << "\n"
        << "lr = " << rc.train.lr << "\n"
        << "weight_decay = " << rc.train.weight_decay << "\n"
        << "batch_size = " << rc.train.batch_size << "\n"
        << "max_epochs = " << rc.train.max_epochs << "\n"
        << "patience = " << rc.train.patience << "\n"
        << "seed = " << rc.train.seed << "\n"
        << "corpus_dir = " << rc.corpus_dir << "\n"
        << "output_dir = " << rc.output_dir << "\n"
        << "train_frac = " << rc.train_frac << "\n"
        << "val_frac = " << rc.val_frac << "\n"
        << "test_frac = " << rc.test_frac << "\n"
        << "bootstrap_resamples = " << rc.bootstrap_resamples << "\n"
        << "robustness_draws = " << rc.robustness_draws << "\n"
        << "eval_batch_size = " << rc.eval_batch_size << "\n";
    return out.str();
}

void write_effective_config(const RunConfig& rc, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write config echo: " + path);
    }
    out << run_config_text(rc);
}

} // namespace aqfn
