#include "mudjack/pipeline.hpp"

#include <cmath>
#include <stdexcept>

namespace mudjack {

namespace {

void say(const ProgressFn& progress, const std::string& message) {
    if (progress) {
        progress(message);
    }
}

}  // namespace

DataBundle generate_all_datasets(const RunConfig& config) {
    const auto& d = config.data;
    DataBundle bundle;

    DataGenSpec spec;
    spec.num_classes = d.num_classes;
    spec.height = d.image_size;
    spec.width = d.image_size;

    spec.combo_block = 0;
    spec.per_class = d.pretrain_per_class;
    spec.split_tag = "pretrain";
    bundle.pretrain_train = generate_dataset(spec, splitmix64(config.seed ^ 0x01));

    spec.per_class = d.pretrain_test_per_class;
    spec.split_tag = "pretrain-test";
    bundle.pretrain_test = generate_dataset(spec, splitmix64(config.seed ^ 0x02));

    spec.combo_block = 1;
    spec.per_class = d.downstream_train_per_class;
    spec.split_tag = "downstream-train";
    bundle.downstream_train = generate_dataset(spec, splitmix64(config.seed ^ 0x03));

    spec.per_class = d.downstream_test_per_class;
    spec.split_tag = "downstream-test";
    bundle.downstream_test = generate_dataset(spec, splitmix64(config.seed ^ 0x04));

    // Validation set from the pretrain distribution, sized by fraction.
    int total_pretrain = d.num_classes * d.pretrain_per_class;
    int val_total = std::max(d.num_classes,
                             static_cast<int>(std::lround(d.validation_fraction * total_pretrain)));
    spec.combo_block = 0;
    spec.per_class = std::max(1, val_total / d.num_classes);
    spec.split_tag = "validation";
    bundle.validation = generate_dataset(spec, splitmix64(config.seed ^ 0x05));

    spec.per_class = std::max(1, config.attack.shadow_size / d.num_classes);
    spec.split_tag = "shadow";
    bundle.shadow = generate_dataset(spec, splitmix64(config.seed ^ 0x06));
    return bundle;
}

EncoderConfig encoder_config_from(const RunConfig& config) {
    EncoderConfig cfg;
    cfg.height = config.data.image_size;
    cfg.width = config.data.image_size;
    cfg.conv1_channels = config.pretrain.conv1_channels;
    cfg.conv2_channels = config.pretrain.conv2_channels;
    cfg.feature_dim = config.pretrain.feature_dim;
    return cfg;
}

PretrainConfig pretrain_config_from(const RunConfig& config) {
    PretrainConfig cfg;
    cfg.mode = config.pretrain.mode == "contrastive" ? PretrainConfig::Mode::ContrastiveLite
                                                     : PretrainConfig::Mode::SupervisedProxy;
    cfg.epochs = config.pretrain.epochs;
    cfg.learning_rate = config.pretrain.learning_rate;
    cfg.batch_size = config.pretrain.batch_size;
    cfg.encoder = encoder_config_from(config);
    return cfg;
}

DownstreamTrainConfig downstream_config_from(const RunConfig& config) {
    DownstreamTrainConfig cfg;
    cfg.epochs = config.eval.downstream_epochs;
    cfg.learning_rate = config.eval.downstream_learning_rate;
    cfg.batch_size = config.eval.downstream_batch_size;
    cfg.hidden = config.eval.downstream_hidden;
    return cfg;
}

PatchConfig patch_config_from(const RunConfig& config) {
    PatchConfig cfg;
    cfg.lambda_l = config.patch.lambda_l;
    cfg.lambda_g = config.patch.lambda_g;
    cfg.epochs = config.patch.epochs;
    cfg.batch_size = config.patch.batch_size;
    cfg.learning_rate = config.patch.learning_rate;
    cfg.location_mode = config.patch.location_mode == "random-per-item"
                            ? TriggerLocationMode::RandomPerItem
                            : TriggerLocationMode::AsReversed;
    cfg.trigger_source = config.patch.trigger_source == "exact" ? TriggerSource::Exact
                                                                : TriggerSource::Reversed;
    return cfg;
}

ReverseEngineerOptions forensics_options_from(const RunConfig& config,
                                              const ImageDataset& fill_source) {
    ReverseEngineerOptions options;
    options.method = config.patch.attribution == "saliency" ? AttributionMap::Method::Saliency
                                                            : AttributionMap::Method::Occlusion;
    options.window = config.patch.occlusion_window;
    options.stride = config.patch.occlusion_stride;
    options.fill = channel_means(fill_source);
    return options;
}

std::vector<double> channel_means(const ImageDataset& data) {
    std::vector<double> means(static_cast<size_t>(data.channels), 0.0);
    int64_t hw = static_cast<int64_t>(data.height) * data.width;
    for (int i = 0; i < data.size(); ++i) {
        auto img = data.image(i);
        for (int c = 0; c < data.channels; ++c) {
            double acc = 0.0;
            for (int64_t p = 0; p < hw; ++p) {
                acc += img[static_cast<size_t>(c * hw + p)];
            }
            means[static_cast<size_t>(c)] += acc / static_cast<double>(hw);
        }
    }
    for (auto& m : means) {
        m /= data.size();
    }
    return means;
}

TriggerSpec make_planted_trigger(const RunConfig& config) {
    const auto& a = config.attack;
    int s = config.data.image_size;
    TriggerSpec::Location location = a.trigger_location == "random"
                                         ? TriggerSpec::Location::PerImageRandom
                                         : TriggerSpec::Location::Fixed;
    if (a.kind == "latent") {
        return make_whole_image_trigger(s, s, 3, a.latent_epsilon,
                                        splitmix64(config.seed ^ 0x11));
    }
    int top = s - a.trigger_size;
    if (a.trigger == "random-square") {
        return make_random_pattern_trigger(s, s, 3, a.trigger_size, top, top,
                                           splitmix64(config.seed ^ 0x12), location);
    }
    return make_square_trigger(s, s, 3, a.trigger_size, top, top, {1.0, 1.0, 1.0}, location);
}

std::vector<double> pick_reference_image(const RunConfig& config, const DataBundle& data) {
    Rng rng = Rng(config.seed).split(0x78726566);
    std::vector<int> candidates;
    for (int i = 0; i < data.downstream_train.size(); ++i) {
        if (data.downstream_train.labels[static_cast<size_t>(i)] == config.attack.target_class) {
            candidates.push_back(i);
        }
    }
    if (candidates.empty()) {
        throw std::invalid_argument("attack: no downstream-train image of the target class");
    }
    auto img = data.downstream_train.image(
        candidates[static_cast<size_t>(rng.randint(static_cast<int>(candidates.size())))]);
    return std::vector<double>(img.begin(), img.end());
}

AttackConfig build_attack_config(const RunConfig& config, const DataBundle& data) {
    AttackConfig cfg;
    const auto& a = config.attack;
    if (a.kind == "source-specific") {
        cfg.kind = AttackKind::SourceSpecific;
        cfg.source_class = a.source_class;
        // Appendix-style attacker advantage: the labeled downstream training
        // set doubles as the shadow set.
        cfg.shadow = data.downstream_train;
    } else if (a.kind == "dynamic") {
        cfg.kind = AttackKind::Dynamic;
        cfg.shadow = data.shadow;
    } else if (a.kind == "latent") {
        cfg.kind = AttackKind::LatentSpace;
        cfg.shadow = data.shadow;
    } else {
        cfg.kind = AttackKind::BadEncoder;
        cfg.shadow = data.shadow;
    }

    if (cfg.kind == AttackKind::Dynamic) {
        int s = config.data.image_size;
        int top = s - a.trigger_size;
        cfg.triggers.push_back(make_square_trigger(s, s, 3, a.trigger_size, top, top,
                                                   {0.1, 0.2, 0.95},
                                                   TriggerSpec::Location::PerImageRandom));
        cfg.triggers.push_back(make_square_trigger(s, s, 3, a.trigger_size, top, top,
                                                   {0.95, 0.1, 0.1},
                                                   TriggerSpec::Location::PerImageRandom));
    } else {
        cfg.triggers.push_back(make_planted_trigger(config));
    }
    cfg.target_class = a.target_class;
    cfg.alpha1 = a.alpha1;
    cfg.alpha2 = a.alpha2;
    cfg.beta = a.beta;
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch_size;
    cfg.learning_rate = a.learning_rate;
    cfg.reference_image = pick_reference_image(config, data);
    return cfg;
}

PatchEvaluation evaluate_patched_encoder(const RunConfig& config, const PipelineResult& base,
                                         Encoder patched, PatchResult patch_result,
                                         const std::string& stage) {
    PatchEvaluation out{std::move(patched), {}, {}, std::move(patch_result)};
    out.classifier = train_downstream(out.model, base.data.downstream_train,
                                      downstream_config_from(config),
                                      splitmix64(config.seed ^ 0x21));
    out.report = evaluate_stage("default", stage, out.classifier, out.model,
                                base.data.downstream_test, base.backdoored_test,
                                config.attack.target_class, &base.bug, config.seed);
    return out;
}

PipelineResult run_pipeline(const RunConfig& config, const ProgressFn& progress) {
    PipelineResult r;
    say(progress, "generating datasets");
    r.data = generate_all_datasets(config);

    say(progress, "pretraining clean encoder");
    r.clean_encoder = pretrain_encoder(r.data.pretrain_train, pretrain_config_from(config),
                                       splitmix64(config.seed ^ 0x20));

    say(progress, "training clean downstream classifier");
    r.clean_classifier = train_downstream(r.clean_encoder, r.data.downstream_train,
                                          downstream_config_from(config),
                                          splitmix64(config.seed ^ 0x21));

    say(progress, "injecting backdoor");
    AttackConfig attack = build_attack_config(config, r.data);
    r.planted_triggers = attack.triggers;
    r.planted_trigger = attack.triggers[0];
    uint64_t attack_seed = splitmix64(config.seed ^ 0x22);
    if (attack.kind == AttackKind::SourceSpecific) {
        r.backdoored_encoder = inject_source_specific(r.clean_encoder, attack, attack_seed);
    } else if (attack.kind == AttackKind::Dynamic) {
        r.backdoored_encoder = inject_dynamic(r.clean_encoder, attack, attack_seed);
    } else {
        r.backdoored_encoder = inject_backdoor(r.clean_encoder, attack, attack_seed);
    }
    r.stealth_similarity =
        mean_feature_similarity(r.backdoored_encoder, r.clean_encoder, r.data.validation);

    say(progress, "training downstream classifier on the backdoored encoder");
    r.backdoored_classifier = train_downstream(r.backdoored_encoder, r.data.downstream_train,
                                               downstream_config_from(config),
                                               splitmix64(config.seed ^ 0x21));

    r.backdoored_test =
        r.planted_triggers.size() > 1
            ? make_backdoored_testset_multi(r.data.downstream_test, r.planted_triggers,
                                            config.attack.target_class,
                                            splitmix64(config.seed ^ 0x23))
            : make_backdoored_testset(r.data.downstream_test, r.planted_trigger,
                                      config.attack.target_class,
                                      splitmix64(config.seed ^ 0x23));

    r.clean_report =
        evaluate_stage("default", "clean", r.clean_classifier, r.clean_encoder,
                       r.data.downstream_test, r.backdoored_test, config.attack.target_class,
                       nullptr, config.seed);

    say(progress, "constructing the bug instance");
    auto bug = make_bug_instance(r.backdoored_classifier, r.backdoored_encoder, r.backdoored_test,
                                 r.data.downstream_test, BugProvenance::Backdoor);
    if (!bug.has_value()) {
        throw std::runtime_error("pipeline: no bug found; the attack produced no misclassified "
                                 "trigger-embedded test input");
    }
    r.bug = *bug;

    r.pre_patch_report =
        evaluate_stage("default", "pre-patch", r.backdoored_classifier, r.backdoored_encoder,
                       r.data.downstream_test, r.backdoored_test, config.attack.target_class,
                       &r.bug, config.seed);

    say(progress, "reverse engineering the trigger");
    const ImageDims dims{config.data.image_size, config.data.image_size, 3};
    r.forensic = reverse_engineer_trigger(r.backdoored_encoder.feature_fn(), r.bug.x_b, r.bug.x_r,
                                          dims, forensics_options_from(config, r.data.validation));
    PatchConfig patch_cfg = patch_config_from(config);
    r.patch_trigger = patch_cfg.trigger_source == TriggerSource::Exact
                          ? r.planted_trigger
                          : r.forensic.reversed.trigger;

    say(progress, "patching the encoder");
    uint64_t patch_seed = splitmix64(config.seed ^ 0x24);
    const std::string& method = config.patch.method;
    if (method == "mudjacking") {
        r.patch = mudjack_patch(r.backdoored_encoder, r.bug, r.data.validation, r.patch_trigger,
                                patch_cfg, patch_seed);
    } else {
        BaselineConfig bcfg;
        bcfg.delta = config.baselines.delta;
        bcfg.prune_fraction = config.baselines.prune_fraction;
        bcfg.post_prune_epochs = config.baselines.post_prune_epochs;
        bcfg.l1_delta_scale = config.baselines.unlearning_delta_scale;
        bcfg.epochs = config.patch.epochs;
        bcfg.learning_rate = config.patch.learning_rate;
        if (method == "ft") {
            bcfg.method = BaselineMethod::FT;
        } else if (method == "ft-l2") {
            bcfg.method = BaselineMethod::FTL2;
        } else if (method == "ft-linf") {
            bcfg.method = BaselineMethod::FTLinf;
        } else if (method == "unlearning") {
            bcfg.method = BaselineMethod::Unlearning;
        } else if (method == "fine-pruning") {
            bcfg.method = BaselineMethod::FinePruning;
        } else {
            throw std::invalid_argument("pipeline: unknown patch method '" + method + "'");
        }
        r.patch = baseline_patch(r.backdoored_encoder, r.bug, bcfg, &r.data.pretrain_train,
                                 patch_seed);
    }

    say(progress, "retraining the downstream classifier on the patched encoder");
    PatchResult patch_result = std::move(r.patch);
    Encoder patched_model = patch_result.model;  // shallow alias, parameters shared
    PatchEvaluation eval = evaluate_patched_encoder(config, r, std::move(patched_model),
                                                    std::move(patch_result), "post-patch");
    r.patch = std::move(eval.patch);
    r.patch.model = std::move(eval.model);
    r.patched_classifier = std::move(eval.classifier);
    r.post_patch_report = std::move(eval.report);
    return r;
}

}  // namespace mudjack
