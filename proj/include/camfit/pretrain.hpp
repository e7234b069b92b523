#pragma once

// The pretraining loop: manifest in, metrics CSV + checkpoint out. Desk-scale
// datasets are cached in memory; every random draw (epoch order, per-sample
// augmentations) comes from a stream keyed by (seed, purpose, epoch, index),
// so two runs with one seed produce byte-identical metrics files and resuming
// from a checkpoint replays the remaining steps exactly.

#include <functional>
#include <string>

#include "camfit/data.hpp"
#include "camfit/trainer.hpp"

namespace camfit {

struct PretrainOptions {
    std::string out_dir;       // receives metrics.csv, summary.json, checkpoint.bin
    int64_t max_steps = 0;     // 0 = run cfg.epochs; otherwise stop at this step count
    std::string resume_from;   // optional checkpoint to restore before training
    bool write_checkpoint = true;
    // Optional observer, called after every step (progress reporting).
    std::function<void(const StepMetrics&)> on_step;
};

struct PretrainSummary {
    int64_t steps_run = 0;     // steps executed by this invocation
    StepMetrics last{};
    std::string metrics_path;
    std::string checkpoint_path;  // empty when checkpoint writing is off
};

// Runs single-precision pretraining of `cfg` over `data.train`. Batches are
// full-size only (a trailing partial batch is dropped, as the queue update
// assumes fixed batch geometry). DataError if the train split cannot fill one
// batch.
PretrainSummary pretrain_run(const DatasetManifest& data, const TrainConfig& cfg,
                             const PretrainOptions& opt);

}  // namespace camfit
