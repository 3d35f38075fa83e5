#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mudjack/bug_report.hpp"
#include "mudjack/dataset.hpp"
#include "mudjack/eval.hpp"
#include "mudjack/forensics.hpp"
#include "mudjack/models.hpp"

namespace mudjack {

enum class TriggerLocationMode { AsReversed, RandomPerItem };
enum class TriggerSource { Reversed, Exact };

struct TraceRow {
    int epoch = 0;
    double effectiveness = 0.0;
    double locality = 0.0;
    double generalizability = 0.0;
    double total = 0.0;
};

struct PatchConfig {
    double lambda_l = 1.0;
    double lambda_g = 1.0;
    // Ablation switch: drops the effectiveness term from the objective.
    bool include_effectiveness = true;
    int epochs = 200;
    int batch_size = 50;
    double learning_rate = 1e-3;
    TriggerLocationMode location_mode = TriggerLocationMode::AsReversed;
    TriggerSource trigger_source = TriggerSource::Reversed;
    OptimizerKind optimizer = OptimizerKind::Adam;
    // Invoked after each epoch with the epoch's full-set trace row; tests use
    // it to recompute the loss decomposition independently.
    std::function<void(int, const Encoder&, const TraceRow&)> epoch_hook;

    void validate() const;
};

struct PatchResult {
    Encoder model;
    std::vector<TraceRow> trace;
    bool aborted_nonfinite = false;
    int epochs_run = 0;
    bool empty_trigger_warning = false;
};

// Alg.-style iteration count: ceil((|D_val| + 1) / m).
int iterations_per_epoch(int dval_size, int batch_size);

// ---- loss terms ------------------------------------------------------------

// -cos(h'(x_b), h'(x_r)); differentiable through h'.
Tensor effectiveness_loss(const FeatureFn& h_prime, const BugInstance& bug);

// -(1/(|D_val|+1)) sum over D_val and x_r of cos(h(x), h'(x)); the
// pre-patching features are constants (h frozen).
Tensor locality_loss(const Encoder& h_pre, const FeatureFn& h_prime, const ImageDataset& dval,
                     std::span<const double> x_r);

struct GenLossResult {
    Tensor value;
    bool no_trigger = false;  // empty reversed trigger: contributes 0 with a warning
};

// -(1/(|D_val|+1)) sum of cos(h'(x + t_b), h'(x)); random-per-item mode draws
// a fresh offset per item from rng.
GenLossResult generalizability_loss(const FeatureFn& h_prime, const ImageDataset& dval,
                                    std::span<const double> x_r, const TriggerSpec& t_b,
                                    TriggerLocationMode mode, Rng* rng);

// ---- patchers --------------------------------------------------------------

// Mini-batch descent on L_e + lambda_l * L_l + lambda_g * L_g starting from
// h' = h; records a full-set loss trace per epoch; aborts to the last
// epoch-end checkpoint when the loss turns non-finite.
PatchResult mudjack_patch(const Encoder& h, const BugInstance& bug, const ImageDataset& dval,
                          const TriggerSpec& t_b, const PatchConfig& config, uint64_t seed);

enum class BaselineMethod { FT, FTL2, FTLinf, Unlearning, FinePruning };

struct BaselineConfig {
    BaselineMethod method = BaselineMethod::FT;
    double delta = 0.01;             // l2 / linf parameter-change threshold
    double l1_delta_scale = 0.01;    // unlearning: delta1 = scale * sqrt(#params)
    double prune_fraction = 0.5;
    int post_prune_epochs = 50;
    double post_prune_learning_rate = 1e-3;
    int epochs = 200;
    int steps_per_epoch = 1;
    double learning_rate = 1e-3;
    // Test hook: runs after every optimizer step with the current model.
    std::function<void(const Encoder&)> step_hook;
};

// FT / FT+l2 / FT+linf / unlearning descend on L_e alone (with the
// respective projection applied after every step); fine-pruning zeroes the
// lowest-activation conv channels on x_r and retrains on the pretrain split.
PatchResult baseline_patch(const Encoder& h, const BugInstance& bug, const BaselineConfig& config,
                           const ImageDataset* pretrain, uint64_t seed);

// Channels actually zeroed by the pruning step, per conv layer.
std::vector<std::vector<int>> fine_pruning_channels(const Encoder& h, const BugInstance& bug,
                                                    double prune_fraction);

struct SequenceDeps {
    const ImageDataset* dval = nullptr;
    const ImageDataset* downstream_train = nullptr;
    DownstreamTrainConfig downstream;
    ReverseEngineerOptions forensics;
    PatchConfig patch;
};

struct SequenceStage {
    Encoder model;
    Classifier classifier;
    BugInstance bug;
    TriggerSpec reversed_trigger;
};

// Applies mudjack_patch once per bug, re-reverse-engineering the trigger and
// re-validating each bug against the then-current model and its retrained
// classifier. Throws when a provided bug no longer satisfies the bug
// conditions.
std::vector<SequenceStage> patch_sequence(const Encoder& h, const std::vector<BugInstance>& bugs,
                                          const SequenceDeps& deps, uint64_t seed);

// Sequential patching with bugs sourced stage by stage: each stage reports
// the first input the then-current pipeline still misclassifies from the bug
// pool. Stops early when no qualifying bug remains.
std::vector<SequenceStage> patch_sequence_from_pool(const Encoder& h,
                                                    const ImageDataset& bug_pool,
                                                    const ImageDataset& ref_pool, int stages,
                                                    const SequenceDeps& deps, uint64_t seed);

enum class DownstreamPatchVariant { FT, FTWithTrain };

struct DownstreamPatchConfig {
    DownstreamPatchVariant variant = DownstreamPatchVariant::FT;
    int epochs = 50;
    double learning_rate = 1e-3;
    int batch_size = 64;
};

// Client-side baseline: fine-tunes the downstream classifier only, encoder
// frozen throughout.
Classifier patch_downstream_only(const Classifier& f, const Encoder& h, const BugInstance& bug,
                                 const DownstreamPatchConfig& config,
                                 const ImageDataset* downstream_train, uint64_t seed);

std::string trace_csv(const std::vector<TraceRow>& trace);

}  // namespace mudjack
