#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "mwa/config.hpp"
#include "mwa/finite_diff.hpp"
#include "mwa/model.hpp"
#include "mwa/trainer.hpp"

namespace mwa {

/// Internal cross-check failure (count formula mismatch, violated pinned
/// trend, gradient-check tolerance breach). Maps to CLI exit code 2.
struct ConsistencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr int kReportFormatVersion = 1;

enum class FinetuneMode { full, mwa };

/// Build the model a run trains: mwa mode attaches adapters from the config
/// and freezes the backbone (verifying the parameter-count formula), full
/// mode leaves everything trainable.
Model<float> build_run_model(const ExperimentConfig& cfg, FinetuneMode mode);

struct TrainOutcome {
    Model<float> model;
    ParamCount counts;
    TrainResult result;
};

TrainOutcome run_train_experiment(const ExperimentConfig& cfg, FinetuneMode mode,
                                  const DatasetSplit& data);

struct SweepPoint {
    int mid = 0;  // extractor mid-dimension; the enhancer uses 2·mid
    bool failed = false;
    std::string error;
    RetrievalMetrics final_metrics;
    std::int64_t trainable = 0;
};

std::vector<SweepPoint> run_sweep_experiment(const ExperimentConfig& cfg, const std::vector<int>& mids,
                                             const DatasetSplit& data);

struct AblationRow {
    std::string label;
    ParamCount counts;
    RetrievalMetrics final_metrics;
};

/// Rows: full fine-tune, extractor-only, enhancer-only, both. The trailing
/// zero_shot entry is the untrained backbone's eval metrics.
struct AblationOutcome {
    std::vector<AblationRow> rows;
    RetrievalMetrics zero_shot;
};

AblationOutcome run_ablation_experiment(const ExperimentConfig& cfg, const DatasetSplit& data);

struct DriftOutcome {
    DriftStats full_drift;
    DriftStats mwa_drift;
    RetrievalMetrics backbone_heldout;
    RetrievalMetrics full_heldout;
    RetrievalMetrics mwa_heldout;
    RetrievalMetrics full_eval;
    RetrievalMetrics mwa_eval;
};

DriftOutcome run_drift_experiment(const ExperimentConfig& cfg, const DatasetSplit& data);

/// 64-bit finite-difference check of the micro adapted model (d=8, two
/// blocks) through the full contrastive loss.
GradCheckResult run_gradcheck_experiment(const ExperimentConfig& cfg);

constexpr double kGradcheckTolerance = 1e-5;

/// Deterministic text for metrics.csv: pinned header, one eval row per epoch.
std::string metrics_csv_text(const std::vector<RetrievalMetrics>& per_epoch);

std::string sweep_csv_text(const std::vector<SweepPoint>& points);
std::string sweep_svg_text(const std::vector<SweepPoint>& points);

void write_text_file(const std::string& path, const std::string& content);

// Command front ends: run the experiment, write outputs under cfg.out_dir,
// and enforce the pinned-trend assertions when the config is the reference
// setup. They throw ConsistencyError on violated assertions.
void cmd_train(const ExperimentConfig& cfg, FinetuneMode mode, std::ostream& out);
void cmd_sweep(const ExperimentConfig& cfg, const std::vector<int>& mids, std::ostream& out);
void cmd_ablate(const ExperimentConfig& cfg, std::ostream& out);
void cmd_driftcheck(const ExperimentConfig& cfg, std::ostream& out);
void cmd_gradcheck(const ExperimentConfig& cfg, std::ostream& out);
void cmd_count(const ExperimentConfig& cfg, std::ostream& out);
void cmd_gendata(const ExperimentConfig& cfg, std::ostream& out);

}  // namespace mwa
