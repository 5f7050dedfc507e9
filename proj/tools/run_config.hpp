#pragma once

// Run-level configuration shared by every subcommand: model and training
// hyperparameters plus corpus/output locations and split fractions, sourced
// from a key=value file with command-line overrides.

#include <string>

#include "aqfn/model.hpp"
#include "aqfn/train.hpp"

namespace aqfn {

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::string corpus_dir = "corpus";   // directory holding manifest.csv
    std::string output_dir;              // artifact directory; see default_run_config
    double train_frac = 0.7;
    double val_frac = 0.15;
    double test_frac = 0.15;
    int bootstrap_resamples = 1000;
    int robustness_draws = 10;
    int eval_batch_size = 64;

    void validate() const; // ParamError on violation
};

// Library defaults; output_dir falls back to $AQFN_OUTPUT_ROOT/run when the
// environment variable is set, else runs/run.
RunConfig default_run_config();

// Applies one `key=value` pair. ParamError on unknown keys or unparseable
// values, naming the key.
void apply_setting(RunConfig& rc, const std::string& key, const std::string& value);

// key = value lines; '#' starts a comment, blank lines are skipped.
// DataError when the file cannot be read, ParamError via apply_setting.
void load_run_config_file(RunConfig& rc, const std::string& path);

// Every field as `key = value`, parseable by load_run_config_file.
std::string run_config_text(const RunConfig& rc);

void write_effective_config(const RunConfig& rc, const std::string& path);

} // namespace aqfn
