#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mudjack/attacks.hpp"
#include "mudjack/bug_report.hpp"
#include "mudjack/config.hpp"
#include "mudjack/dataset.hpp"
#include "mudjack/eval.hpp"
#include "mudjack/forensics.hpp"
#include "mudjack/models.hpp"
#include "mudjack/patcher.hpp"

namespace mudjack {

// All generated splits of one experiment.
struct DataBundle {
    ImageDataset pretrain_train;
    ImageDataset pretrain_test;
    ImageDataset downstream_train;
    ImageDataset downstream_test;
    ImageDataset validation;
    ImageDataset shadow;  // attacker's D_s, drawn from the pretrain distribution
};

DataBundle generate_all_datasets(const RunConfig& config);

EncoderConfig encoder_config_from(const RunConfig& config);
PretrainConfig pretrain_config_from(const RunConfig& config);
DownstreamTrainConfig downstream_config_from(const RunConfig& config);
PatchConfig patch_config_from(const RunConfig& config);
ReverseEngineerOptions forensics_options_from(const RunConfig& config,
                                              const ImageDataset& fill_source);

// The attack's planted trigger per the [attack] section.
TriggerSpec make_planted_trigger(const RunConfig& config);

// Reference input: a seeded random downstream-train image of the target class.
std::vector<double> pick_reference_image(const RunConfig& config, const DataBundle& data);

AttackConfig build_attack_config(const RunConfig& config, const DataBundle& data);

// Per-channel mean of a dataset, the occlusion fill.
std::vector<double> channel_means(const ImageDataset& data);

struct PipelineResult {
    DataBundle data;
    TriggerSpec planted_trigger;
    std::vector<TriggerSpec> planted_triggers;  // dynamic attack carries two

    Encoder clean_encoder;
    Classifier clean_classifier;
    EvalReport clean_report;

    Encoder backdoored_encoder;
    Classifier backdoored_classifier;
    ImageDataset backdoored_test;
    EvalReport pre_patch_report;
    double stealth_similarity = 0.0;

    BugInstance bug;
    ReverseEngineerResult forensic;
    TriggerSpec patch_trigger;  // reversed or exact per config

    PatchResult patch;
    Classifier patched_classifier;
    EvalReport post_patch_report;
};

using ProgressFn = std::function<void(const std::string&)>;

// The full default experiment: data, pretrain, attack, downstream training,
// bug report, trigger reverse engineering, patching, evaluation.
PipelineResult run_pipeline(const RunConfig& config, const ProgressFn& progress = {});

// Encoder patched with a given method; retrains the downstream classifier
// and evaluates. Shared by the comparison and ablation drivers.
struct PatchEvaluation {
    Encoder model;
    Classifier classifier;
    EvalReport report;
    PatchResult patch;
};

PatchEvaluation evaluate_patched_encoder(const RunConfig& config, const PipelineResult& base,
                                         Encoder patched, PatchResult patch_result,
                                         const std::string& stage);

}  // namespace mudjack
