#pragma once

#include <optional>
#include <vector>

#include "mudjack/dataset.hpp"
#include "mudjack/models.hpp"

namespace mudjack {

enum class AttackKind { BadEncoder, SourceSpecific, Dynamic, LatentSpace };

struct AttackConfig {
    AttackKind kind = AttackKind::BadEncoder;
    std::vector<TriggerSpec> triggers;
    int target_class = 0;
    std::vector<double> reference_image;  // CHW; anchors the target class
    ImageDataset shadow;                  // attacker's shadow set D_s
    double alpha1 = 0.8;                  // source-specific split weights
    double alpha2 = 0.2;
    double beta = 1.0;                    // utility loss weight
    int epochs = 24;
    int batch_size = 50;
    double learning_rate = 1e-3;
    std::optional<int> source_class;

    void validate() const;
};

// Negative mean cosine similarity between trigger-embedded shadow features
// and the feature of the reference input, all through the current model;
// differentiable when a tape is active.
Tensor attack_effectiveness_loss(const FeatureFn& h, const ImageDataset& shadow,
                                 const TriggerSpec& trigger, std::span<const double> x_ref,
                                 const ImageDims& dims_ref, Rng* rng = nullptr);

// Same quantity from precomputed feature rows: -mean_i cos(F_i, f_ref).
double alignment_loss_from_features(const Tensor& trig_features,
                                    std::span<const double> ref_feature);

// Parameter-modification backdoor: minimizes L0 + beta * L_utility over the
// shadow set, where L_utility anchors clean features to the clean encoder.
Encoder inject_backdoor(const Encoder& clean, const AttackConfig& config, uint64_t seed);

// Appendix-style source-specific variant: L0 replaced by
// alpha1 * L_source + alpha2 * L_other.
Encoder inject_source_specific(const Encoder& clean, const AttackConfig& config, uint64_t seed);

// Two-trigger dynamic variant; each shadow item draws one of the two
// triggers at a random location per step.
Encoder inject_dynamic(const Encoder& clean, const AttackConfig& config, uint64_t seed);

// Mean cosine similarity between two encoders' features on a clean set
// (the stealth metric for attack utility).
double mean_feature_similarity(const Encoder& a, const Encoder& b, const ImageDataset& data);

}  // namespace mudjack
