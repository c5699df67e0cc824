#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mrh/imaging.hpp"
#include "mrh/losses.hpp"
#include "mrh/networks.hpp"

namespace mrh {

class Rng;

struct TrainConfig {
    ModelConfig model;
    LossWeights weights;
    double lr = 1e-4;
    int steps = 5000;
    int batch = 1;  // bundles per intra-site step
    // Gumbel temperature: linear tau_start -> tau_end over the first
    // anneal_steps (default: half of `steps`), constant afterwards.
    double tau_start = 1.0;
    double tau_end = 0.5;
    int anneal_steps = -1;
    double dropout_p = 0.2;
    double inter_site_step_ratio = 0.25;  // fraction of steps that are inter-site
    // "Train the attention module" can be read two ways; default trains
    // everything through the cycle term, the switch restricts the update to
    // the key/query heads.
    bool inter_freeze_non_attention = false;
    // contrastive samplers
    int patch = 3;
    int anat_negatives = 8;
    int anat_locations = 64;
    int artifact_negatives = 4;
    double severity_lo = 0.1;
    double severity_hi = 0.5;
    // data
    int slices_per_volume = 5;  // centered axial window per volume
    uint64_t seed = 1234;
    int val_interval = 100;
    int checkpoint_interval = 1000;
};

TrainConfig load_train_config(const std::string& json_path);
void save_train_config(const TrainConfig& cfg, const std::string& json_path);

// Adaptive-moment update over every parameter with bias correction; after
// the update, parameters and moments are rounded to their float32
// representation so checkpoints are lossless and resume is bit-exact.
struct AdamState {
    uint64_t t = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};
void adam_step(Model& m, AdamState& opt, double lr);

// One subject imaged at one site: per-contrast slices at a shared slice
// index, so the anatomy underneath is aligned across contrasts.
struct SourceBundle {
    std::string subject_id, site_id;
    std::array<bool, 4> available{};
    std::array<SliceImage, 4> slices;
    int slice_index = 0;
};

double tau_at(const TrainConfig& cfg, int step);
int pick_target_contrast(Rng& rng, const std::array<bool, 4>& available);

struct StepOutcome {
    LossParts parts;       // mean over the bundles that ran
    double applied = 0.0;  // the loss value gradients were taken from
    int used = 0;
    int skipped = 0;  // bundles with < 2 contrasts (warned, not fatal)
};

// Intra-site step: pick a target contrast per bundle, run the full
// pipeline (soft anatomy at tau(step), sampled contrast code, attention
// dropout, fusion, decoding), apply one optimizer update on the full
// weighted objective. `artifact_pool` supplies volumes for the artifact
// contrastive triplets and needs >= 2 entries.
StepOutcome train_step_intra(Model& m, AdamState& opt, const std::vector<SourceBundle>& batch,
                             const std::vector<Volume>& artifact_pool, const TrainConfig& cfg,
                             uint64_t step);

// Same pipeline, but the target image comes from a different site and only
// the weighted cycle term contributes gradients; the other parts are
// computed for the log. Throws if the target shares a site with a bundle.
StepOutcome train_step_inter(Model& m, AdamState& opt, const std::vector<SourceBundle>& batch,
                             const SourceBundle& target, const std::vector<Volume>& artifact_pool,
                             const TrainConfig& cfg, uint64_t step);

// Full pipeline without any update, for validation logging.
StepOutcome eval_step(Model& m, const std::vector<SourceBundle>& batch,
                      const std::vector<Volume>& artifact_pool, const TrainConfig& cfg,
                      uint64_t step);

struct FitResult {
    std::string checkpoint_path;
    std::string train_log_path;
    std::string val_log_path;
    int steps_run = 0;
    double final_train_total = 0.0;
};

// Owns the preloaded training and validation data. Only subjects whose
// split is "train" or "val" are ever read from disk; the evaluation split
// (traveling subjects) is never touched here.
class Trainer {
public:
    Trainer(const DatasetManifest& manifest, const TrainConfig& cfg);

    // Alternates intra- and inter-site steps, anneals the temperature,
    // logs every step to train_log.csv and a validation pass every
    // val_interval steps to val_log.csv, checkpoints periodically and at
    // the end. A non-finite loss aborts with a diagnostic dump next to the
    // logs. `resume_from` continues a run bit-exactly from a checkpoint.
    FitResult fit(const std::string& out_dir, const std::string& resume_from = "");

    Model& model() { return model_; }
    const TrainConfig& config() const { return cfg_; }

    // test hooks
    std::vector<SourceBundle>& train_bundles(int slice) { return train_slices_.at(size_t(slice)); }
    const std::vector<Volume>& artifact_pool() const { return pool_; }
    int n_slices() const { return int(train_slices_.size()); }

private:
    TrainConfig cfg_;
    Model model_;
    AdamState opt_;
    // bundles grouped by slice position: train_slices_[k] holds every
    // (subject, site) bundle cut at the k-th window slice
    std::vector<std::vector<SourceBundle>> train_slices_;
    std::vector<std::vector<SourceBundle>> val_slices_;
    std::vector<Volume> pool_;      // train volumes, artifact-triplet source
    std::vector<std::string> sites_;
    std::vector<std::string> last_batch_;  // "subject@slice" of the latest step, for diagnostics

    StepOutcome run_step(uint64_t step, bool inter);
};

}  // namespace mrh
