#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mudjack/artifact_io.hpp"
#include "mudjack/pipeline.hpp"

using namespace mudjack;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct RunContext {
    RunConfig config;
    std::string out_dir;
    std::string command;
    std::map<std::string, std::string> input_hashes;
    std::map<std::string, std::string> output_hashes;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

    std::string path(const std::string& rel) const {
        return (std::filesystem::path(out_dir) / rel).string();
    }

    std::vector<uint8_t> read_input(const std::string& rel) {
        std::string p = path(rel);
        if (!file_exists(p)) {
            throw std::runtime_error("missing artifact: expected " + p +
                                     " (run the producing subcommand first)");
        }
        auto bytes = read_file_bytes(p);
        input_hashes[rel] = hex64(fnv1a64(bytes));
        return bytes;
    }

    void write_output(const std::string& rel, std::span<const uint8_t> bytes) {
        write_file_bytes(path(rel), bytes);
        output_hashes[rel] = hex64(fnv1a64(bytes));
    }

    void write_output_text(const std::string& rel, const std::string& text) {
        write_output(rel, std::span<const uint8_t>(
                              reinterpret_cast<const uint8_t*>(text.data()), text.size()));
    }

    void note_output_file(const std::string& rel) {
        auto bytes = read_file_bytes(path(rel));
        output_hashes[rel] = hex64(fnv1a64(bytes));
    }

    void finish() {
        json manifest;
        manifest["command"] = command;
        manifest["seed"] = config.seed;
        manifest["inputs"] = input_hashes;
        manifest["outputs"] = output_hashes;
        manifest["wall_time_ms"] =
            std::chrono::duration_cast<std::chrono::milliseconds>(
                std::chrono::steady_clock::now() - start)
                .count();
        write_file_text(path("manifests/" + command + ".manifest.json"), manifest.dump(2) + "\n");
        write_output_text("resolved.config", render_config(config));
    }
};

void progress_printer(const std::string& message) {
    std::printf("[mudjack] %s\n", message.c_str());
    std::fflush(stdout);
}

// ---- artifact names ---------------------------------------------------------

const char* kPretrainTrain = "data/pretrain_train.mjds";
const char* kPretrainTest = "data/pretrain_test.mjds";
const char* kDownstreamTrain = "data/downstream_train.mjds";
const char* kDownstreamTest = "data/downstream_test.mjds";
const char* kValidation = "data/validation.mjds";
const char* kShadow = "data/shadow.mjds";
const char* kEncoderClean = "models/encoder_clean.mjck";
const char* kEncoderBackdoored = "models/encoder_backdoored.mjck";
const char* kEncoderPatched = "models/encoder_patched.mjck";
const char* kClassifierBackdoored = "models/classifier_backdoored.mjck";
const char* kClassifierPatched = "models/classifier_patched.mjck";
const char* kTriggerPlanted = "attack/trigger_planted.mjtg";
const char* kTriggerPlanted2 = "attack/trigger_planted_2.mjtg";
const char* kTriggerReversed = "forensics/trigger_reversed.mjtg";
const char* kBugFile = "bug/bug.mjbg";

ImageDataset load_ds(RunContext& ctx, const std::string& rel) {
    return dataset_from_bytes(ctx.read_input(rel));
}

Encoder load_encoder(RunContext& ctx, const std::string& rel) {
    return encoder_from_checkpoint(checkpoint_from_bytes(ctx.read_input(rel)));
}

Classifier load_classifier(RunContext& ctx, const std::string& rel) {
    return classifier_from_checkpoint(checkpoint_from_bytes(ctx.read_input(rel)));
}

void save_encoder(RunContext& ctx, const std::string& rel, const Encoder& enc) {
    ctx.write_output(rel, checkpoint_to_bytes(checkpoint_from_encoder(enc)));
}

void save_classifier(RunContext& ctx, const std::string& rel, const Classifier& clf) {
    ctx.write_output(rel, checkpoint_to_bytes(checkpoint_from_classifier(clf)));
}

void export_trigger_ppm(RunContext& ctx, const std::string& rel, const TriggerSpec& t) {
    std::vector<double> canvas(t.pattern.size(), 0.0);
    if (t.kind == TriggerSpec::Kind::Patch) {
        for (int y = 0; y < t.height; ++y) {
            for (int x = 0; x < t.width; ++x) {
                if (!t.mask[static_cast<size_t>(y * t.width + x)]) {
                    continue;
                }
                for (int c = 0; c < t.channels; ++c) {
                    size_t i = static_cast<size_t>((c * t.height + y) * t.width + x);
                    canvas[i] = t.pattern[i];
                }
            }
        }
    } else {
        // Perturbations rendered around mid-gray.
        for (size_t i = 0; i < t.pattern.size(); ++i) {
            canvas[i] = 0.5 + t.pattern[i] * 25.0;
        }
    }
    write_ppm(ctx.path(rel), t.height, t.width, chw_to_rgb8(canvas, t.channels, t.height,
                                                            t.width));
    ctx.note_output_file(rel);
}

// ---- subcommands ------------------------------------------------------------

int cmd_gen_data(RunContext& ctx) {
    DataBundle bundle = generate_all_datasets(ctx.config);
    ctx.write_output(kPretrainTrain, dataset_to_bytes(bundle.pretrain_train));
    ctx.write_output(kPretrainTest, dataset_to_bytes(bundle.pretrain_test));
    ctx.write_output(kDownstreamTrain, dataset_to_bytes(bundle.downstream_train));
    ctx.write_output(kDownstreamTest, dataset_to_bytes(bundle.downstream_test));
    ctx.write_output(kValidation, dataset_to_bytes(bundle.validation));
    ctx.write_output(kShadow, dataset_to_bytes(bundle.shadow));
    std::printf("[mudjack] wrote %d pretrain, %d downstream-train, %d downstream-test, "
                "%d validation images\n",
                bundle.pretrain_train.size(), bundle.downstream_train.size(),
                bundle.downstream_test.size(), bundle.validation.size());
    return kExitOk;
}

int cmd_pretrain(RunContext& ctx) {
    ImageDataset train = load_ds(ctx, kPretrainTrain);
    Encoder enc = pretrain_encoder(train, pretrain_config_from(ctx.config),
                                   splitmix64(ctx.config.seed ^ 0x20));
    save_encoder(ctx, kEncoderClean, enc);
    std::printf("[mudjack] clean encoder saved (%s)\n", hex64(encoder_hash(enc)).c_str());
    return kExitOk;
}

int cmd_attack(RunContext& ctx) {
    Encoder clean = load_encoder(ctx, kEncoderClean);
    DataBundle data;
    data.downstream_train = load_ds(ctx, kDownstreamTrain);
    data.shadow = load_ds(ctx, kShadow);
    AttackConfig attack = build_attack_config(ctx.config, data);
    uint64_t seed = splitmix64(ctx.config.seed ^ 0x22);
    Encoder backdoored;
    if (attack.kind == AttackKind::SourceSpecific) {
        backdoored = inject_source_specific(clean, attack, seed);
    } else if (attack.kind == AttackKind::Dynamic) {
        backdoored = inject_dynamic(clean, attack, seed);
    } else {
        backdoored = inject_backdoor(clean, attack, seed);
    }
    save_encoder(ctx, kEncoderBackdoored, backdoored);
    ctx.write_output(kTriggerPlanted, trigger_to_bytes(attack.triggers[0]));
    export_trigger_ppm(ctx, "attack/trigger_planted.ppm", attack.triggers[0]);
    if (attack.triggers.size() > 1) {
        ctx.write_output(kTriggerPlanted2, trigger_to_bytes(attack.triggers[1]));
    }
    std::printf("[mudjack] backdoored encoder saved (%s)\n",
                hex64(encoder_hash(backdoored)).c_str());
    return kExitOk;
}

int cmd_train_downstream(RunContext& ctx, const std::string& encoder_rel,
                         const std::string& classifier_rel) {
    Encoder enc = load_encoder(ctx, encoder_rel);
    ImageDataset train = load_ds(ctx, kDownstreamTrain);
    Classifier clf = train_downstream(enc, train, downstream_config_from(ctx.config),
                                      splitmix64(ctx.config.seed ^ 0x21));
    save_classifier(ctx, classifier_rel, clf);
    std::printf("[mudjack] classifier saved to %s\n", ctx.path(classifier_rel).c_str());
    return kExitOk;
}

int cmd_report_bug(RunContext& ctx) {
    Encoder enc = load_encoder(ctx, kEncoderBackdoored);
    Classifier clf = load_classifier(ctx, kClassifierBackdoored);
    ImageDataset test = load_ds(ctx, kDownstreamTest);
    TriggerSpec trigger = trigger_from_bytes(ctx.read_input(kTriggerPlanted));
    ImageDataset backdoored = make_backdoored_testset(test, trigger,
                                                      ctx.config.attack.target_class,
                                                      splitmix64(ctx.config.seed ^ 0x23));
    auto bug = make_bug_instance(clf, enc, backdoored, test, BugProvenance::Backdoor);
    if (!bug.has_value()) {
        std::printf("[mudjack] no bug found: every trigger-embedded input is correctly "
                    "classified\n");
        return kExitOk;
    }
    ctx.write_output(kBugFile, bug_to_bytes(*bug));
    write_ppm(ctx.path("bug/x_b.ppm"), bug->height, bug->width,
              chw_to_rgb8(bug->x_b, bug->channels, bug->height, bug->width));
    ctx.note_output_file("bug/x_b.ppm");
    write_ppm(ctx.path("bug/x_r.ppm"), bug->height, bug->width,
              chw_to_rgb8(bug->x_r, bug->channels, bug->height, bug->width));
    ctx.note_output_file("bug/x_r.ppm");
    std::printf("[mudjack] bug instance saved: true label %d observed %d\n", bug->true_label,
                bug->observed_label);
    return kExitOk;
}

int cmd_reverse_trigger(RunContext& ctx) {
    Encoder enc = load_encoder(ctx, kEncoderBackdoored);
    BugInstance bug = bug_from_bytes(ctx.read_input(kBugFile));
    ImageDataset validation = load_ds(ctx, kValidation);
    const ImageDims dims{bug.height, bug.width, bug.channels};
    auto result = reverse_engineer_trigger(enc.feature_fn(), bug.x_b, bug.x_r, dims,
                                           forensics_options_from(ctx.config, validation));
    ctx.write_output(kTriggerReversed, trigger_to_bytes(result.reversed.trigger));
    write_attribution_csv(ctx.path("forensics/attribution.csv"), result.attribution);
    ctx.note_output_file("forensics/attribution.csv");
    write_attribution_heatmap(ctx.path("forensics/attribution_heat.ppm"), result.attribution);
    ctx.note_output_file("forensics/attribution_heat.ppm");
    write_mask_ppm(ctx.path("forensics/reversed_mask.ppm"), result.reversed.trigger.mask,
                   dims.height, dims.width);
    ctx.note_output_file("forensics/reversed_mask.ppm");
    write_trigger_overlay(ctx.path("forensics/trigger_overlay.ppm"), bug.x_b,
                          result.reversed.trigger.mask, dims);
    ctx.note_output_file("forensics/trigger_overlay.ppm");

    std::string summary = "reversed trigger: " +
                          std::to_string(result.reversed.trigger.mask_count()) + " pixels";
    if (file_exists(ctx.path(kTriggerPlanted))) {
        TriggerSpec planted = trigger_from_bytes(ctx.read_input(kTriggerPlanted));
        if (planted.kind == TriggerSpec::Kind::Patch) {
            summary += ", IoU vs planted = " +
                       format_double(mask_iou(result.reversed.trigger.mask, planted.mask), 4);
        }
    }
    std::printf("[mudjack] %s\n", summary.c_str());
    return kExitOk;
}

int cmd_patch(RunContext& ctx) {
    Encoder enc = load_encoder(ctx, kEncoderBackdoored);
    BugInstance bug = bug_from_bytes(ctx.read_input(kBugFile));
    ImageDataset validation = load_ds(ctx, kValidation);
    PatchConfig patch_cfg = patch_config_from(ctx.config);

    TriggerSpec trigger;
    if (patch_cfg.trigger_source == TriggerSource::Exact) {
        trigger = trigger_from_bytes(ctx.read_input(kTriggerPlanted));
    } else {
        trigger = trigger_from_bytes(ctx.read_input(kTriggerReversed));
    }

    uint64_t seed = splitmix64(ctx.config.seed ^ 0x24);
    PatchResult result;
    const std::string& method = ctx.config.patch.method;
    if (method == "mudjacking") {
        result = mudjack_patch(enc, bug, validation, trigger, patch_cfg, seed);
    } else {
        BaselineConfig bcfg;
        bcfg.delta = ctx.config.baselines.delta;
        bcfg.prune_fraction = ctx.config.baselines.prune_fraction;
        bcfg.post_prune_epochs = ctx.config.baselines.post_prune_epochs;
        bcfg.l1_delta_scale = ctx.config.baselines.unlearning_delta_scale;
        bcfg.epochs = ctx.config.patch.epochs;
        bcfg.learning_rate = ctx.config.patch.learning_rate;
        ImageDataset pretrain;
        const ImageDataset* pretrain_ptr = nullptr;
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
            pretrain = load_ds(ctx, kPretrainTrain);
            pretrain_ptr = &pretrain;
        } else {
            throw std::runtime_error("unknown patch method '" + method + "'");
        }
        result = baseline_patch(enc, bug, bcfg, pretrain_ptr, seed);
    }
    save_encoder(ctx, kEncoderPatched, result.model);
    ctx.write_output_text("patch/patch_trace.csv", trace_csv(result.trace));
    if (result.empty_trigger_warning) {
        std::printf("[mudjack] warning: empty reversed trigger, generalizability term "
                    "contributed 0\n");
    }
    if (result.aborted_nonfinite) {
        std::printf("[mudjack] warning: non-finite loss, restored last-good checkpoint after "
                    "%d epochs\n",
                    result.epochs_run);
    }
    std::printf("[mudjack] patched encoder saved (%s)\n",
                hex64(encoder_hash(result.model)).c_str());
    return kExitOk;
}

int cmd_evaluate(RunContext& ctx, const std::string& stage, const std::string& encoder_rel,
                 const std::string& classifier_rel) {
    Encoder enc = load_encoder(ctx, encoder_rel);
    Classifier clf = load_classifier(ctx, classifier_rel);
    ImageDataset test = load_ds(ctx, kDownstreamTest);
    TriggerSpec trigger = trigger_from_bytes(ctx.read_input(kTriggerPlanted));
    ImageDataset backdoored = make_backdoored_testset(test, trigger,
                                                      ctx.config.attack.target_class,
                                                      splitmix64(ctx.config.seed ^ 0x23));
    BugInstance bug;
    const BugInstance* bug_ptr = nullptr;
    if (file_exists(ctx.path(kBugFile))) {
        bug = bug_from_bytes(ctx.read_input(kBugFile));
        bug_ptr = &bug;
    }
    EvalReport report = evaluate_stage("cli", stage, clf, enc, test, backdoored,
                                       ctx.config.attack.target_class, bug_ptr, ctx.config.seed);
    ctx.write_output_text("reports/eval_" + stage + ".csv",
                          report_csv_header() + report_csv_row(report));
    std::printf("[mudjack] %s: CP %d Acc %.2f ASR %.2f AccB %.2f\n", stage.c_str(),
                report.cp ? 1 : 0, report.acc, report.asr, report.accb);
    return kExitOk;
}

int cmd_pipeline(RunContext& ctx) {
    PipelineResult r = run_pipeline(ctx.config, progress_printer);

    ctx.write_output(kPretrainTrain, dataset_to_bytes(r.data.pretrain_train));
    ctx.write_output(kPretrainTest, dataset_to_bytes(r.data.pretrain_test));
    ctx.write_output(kDownstreamTrain, dataset_to_bytes(r.data.downstream_train));
    ctx.write_output(kDownstreamTest, dataset_to_bytes(r.data.downstream_test));
    ctx.write_output(kValidation, dataset_to_bytes(r.data.validation));
    ctx.write_output(kShadow, dataset_to_bytes(r.data.shadow));
    save_encoder(ctx, kEncoderClean, r.clean_encoder);
    save_encoder(ctx, kEncoderBackdoored, r.backdoored_encoder);
    save_encoder(ctx, kEncoderPatched, r.patch.model);
    save_classifier(ctx, kClassifierBackdoored, r.backdoored_classifier);
    save_classifier(ctx, kClassifierPatched, r.patched_classifier);
    ctx.write_output(kTriggerPlanted, trigger_to_bytes(r.planted_trigger));
    if (r.planted_triggers.size() > 1) {
        ctx.write_output(kTriggerPlanted2, trigger_to_bytes(r.planted_triggers[1]));
    }
    ctx.write_output(kBugFile, bug_to_bytes(r.bug));
    ctx.write_output(kTriggerReversed, trigger_to_bytes(r.forensic.reversed.trigger));
    ctx.write_output_text("patch/patch_trace.csv", trace_csv(r.patch.trace));

    export_trigger_ppm(ctx, "attack/trigger_planted.ppm", r.planted_trigger);
    write_attribution_csv(ctx.path("forensics/attribution.csv"), r.forensic.attribution);
    ctx.note_output_file("forensics/attribution.csv");
    write_attribution_heatmap(ctx.path("forensics/attribution_heat.ppm"),
                              r.forensic.attribution);
    ctx.note_output_file("forensics/attribution_heat.ppm");
    const ImageDims dims{r.bug.height, r.bug.width, r.bug.channels};
    write_mask_ppm(ctx.path("forensics/reversed_mask.ppm"), r.forensic.reversed.trigger.mask,
                   dims.height, dims.width);
    ctx.note_output_file("forensics/reversed_mask.ppm");
    write_trigger_overlay(ctx.path("forensics/trigger_overlay.ppm"), r.bug.x_b,
                          r.forensic.reversed.trigger.mask, dims);
    ctx.note_output_file("forensics/trigger_overlay.ppm");

    std::vector<EvalReport> reports{r.clean_report, r.pre_patch_report, r.post_patch_report};
    std::string csv = report_csv_header();
    for (const auto& report : reports) {
        csv += report_csv_row(report);
    }
    ctx.write_output_text("reports/pipeline_report.csv", csv);

    std::printf("[mudjack] clean:      Acc %.2f\n", r.clean_report.acc);
    std::printf("[mudjack] pre-patch:  CP %d Acc %.2f ASR %.2f AccB %.2f\n",
                r.pre_patch_report.cp ? 1 : 0, r.pre_patch_report.acc, r.pre_patch_report.asr,
                r.pre_patch_report.accb);
    std::printf("[mudjack] post-patch: CP %d Acc %.2f ASR %.2f AccB %.2f\n",
                r.post_patch_report.cp ? 1 : 0, r.post_patch_report.acc, r.post_patch_report.asr,
                r.post_patch_report.accb);
    return kExitOk;
}

// ---- ablation studies -------------------------------------------------------

std::string ablate_row(const std::string& variant, const EvalReport& r) {
    std::string row = variant + ",";
    row += r.cp ? "1" : "0";
    row += "," + format_double(r.acc, 4) + "," + format_double(r.asr, 4) + "," +
           format_double(r.accb, 4);
    if (r.asr_source && r.asr_other) {
        row += "," + format_double(*r.asr_source, 4) + "," + format_double(*r.asr_other, 4);
    }
    return row + "\n";
}

int cmd_ablate(RunContext& ctx, const std::string& study) {
    std::string csv = "variant,CP,Acc,ASR,AccB\n";

    if (study == "loss-terms") {
        PipelineResult base = run_pipeline(ctx.config, progress_printer);
        csv += ablate_row("full", base.post_patch_report);
        struct Drop {
            const char* name;
            double lambda_l, lambda_g;
            bool drop_effectiveness;
        };
        for (const Drop& drop : {Drop{"no-effectiveness", 1.0, 1.0, true},
                                 Drop{"no-locality", 0.0, 1.0, false},
                                 Drop{"no-generalizability", 1.0, 0.0, false}}) {
            progress_printer(std::string("ablation: ") + drop.name);
            PatchConfig cfg = patch_config_from(ctx.config);
            cfg.lambda_l = drop.lambda_l;
            cfg.lambda_g = drop.lambda_g;
            cfg.include_effectiveness = !drop.drop_effectiveness;
            PatchResult patched = mudjack_patch(base.backdoored_encoder, base.bug,
                                                base.data.validation, base.patch_trigger, cfg,
                                                splitmix64(ctx.config.seed ^ 0x24));
            auto eval = evaluate_patched_encoder(ctx.config, base, patched.model,
                                                 std::move(patched), drop.name);
            csv += ablate_row(drop.name, eval.report);
        }
    } else if (study == "val-size") {
        for (double fraction : {0.01, 0.02, 0.05, 0.10, 0.20}) {
            progress_printer("validation fraction " + format_double(fraction, 2));
            RunConfig cfg = ctx.config;
            cfg.data.validation_fraction = fraction;
            PipelineResult r = run_pipeline(cfg);
            csv += ablate_row("val-" + format_double(fraction, 2), r.post_patch_report);
        }
    } else if (study == "lambda") {
        for (bool sweep_l : {true, false}) {
            for (double lambda : {0.0, 0.5, 1.0, 3.0, 5.0}) {
                RunConfig cfg = ctx.config;
                (sweep_l ? cfg.patch.lambda_l : cfg.patch.lambda_g) = lambda;
                progress_printer(std::string(sweep_l ? "lambda_l " : "lambda_g ") +
                                 format_double(lambda, 1));
                PipelineResult r = run_pipeline(cfg);
                csv += ablate_row(std::string(sweep_l ? "lambda_l-" : "lambda_g-") +
                                      format_double(lambda, 1),
                                  r.post_patch_report);
            }
        }
    } else if (study == "random-location") {
        RunConfig cfg = ctx.config;
        cfg.attack.trigger_location = "random";
        cfg.patch.location_mode = "as-reversed";
        progress_printer("plain patcher vs random-location attack");
        PipelineResult plain = run_pipeline(cfg, progress_printer);
        csv += ablate_row("before", plain.pre_patch_report);
        csv += ablate_row("plain", plain.post_patch_report);
        progress_printer("random-location patcher variant");
        PatchConfig rl = patch_config_from(cfg);
        rl.location_mode = TriggerLocationMode::RandomPerItem;
        PatchResult patched = mudjack_patch(plain.backdoored_encoder, plain.bug,
                                            plain.data.validation, plain.patch_trigger, rl,
                                            splitmix64(cfg.seed ^ 0x24));
        auto eval = evaluate_patched_encoder(cfg, plain, patched.model, std::move(patched),
                                             "random-location");
        csv += ablate_row("random-location", eval.report);
    } else if (study == "source-specific") {
        csv = "variant,CP,Acc,ASR,AccB,ASR_source,ASR_other\n";
        RunConfig cfg = ctx.config;
        cfg.attack.kind = "source-specific";
        PipelineResult r = run_pipeline(cfg, progress_printer);
        auto add_split = [&](EvalReport report, const Classifier& clf, const Encoder& enc,
                             const std::string& name) {
            auto [s, o] = compute_source_split_asr(clf, enc, r.data.downstream_test,
                                                   r.planted_trigger, cfg.attack.source_class,
                                                   cfg.attack.target_class,
                                                   splitmix64(cfg.seed ^ 0x23));
            report.asr_source = s;
            report.asr_other = o;
            csv += ablate_row(name, report);
        };
        add_split(r.pre_patch_report, r.backdoored_classifier, r.backdoored_encoder, "before");
        add_split(r.post_patch_report, r.patched_classifier, r.patch.model, "after");
    } else if (study == "dynamic") {
        RunConfig cfg = ctx.config;
        cfg.attack.kind = "dynamic";
        cfg.patch.location_mode = "random-per-item";
        PipelineResult r = run_pipeline(cfg, progress_printer);
        csv += ablate_row("before", r.pre_patch_report);
        csv += ablate_row("after-bug-1", r.post_patch_report);
        progress_printer("second bug instance (second trigger)");
        // Second bug: inputs embedded with the second trigger, against the
        // once-patched pipeline.
        ImageDataset second_test = make_backdoored_testset(
            r.data.downstream_test, r.planted_triggers[1], cfg.attack.target_class,
            splitmix64(cfg.seed ^ 0x33));
        auto bug2 = make_bug_instance(r.patched_classifier, r.patch.model, second_test,
                                      r.data.downstream_test, BugProvenance::Backdoor);
        if (!bug2.has_value()) {
            csv += "after-bug-2-skipped,0,0,0,0\n";
        } else {
            const ImageDims dims{cfg.data.image_size, cfg.data.image_size, 3};
            auto forensic2 = reverse_engineer_trigger(
                r.patch.model.feature_fn(), bug2->x_b, bug2->x_r, dims,
                forensics_options_from(cfg, r.data.validation));
            PatchConfig pc = patch_config_from(cfg);
            PatchResult second = mudjack_patch(r.patch.model, *bug2, r.data.validation,
                                               forensic2.reversed.trigger, pc,
                                               splitmix64(cfg.seed ^ 0x34));
            auto eval = evaluate_patched_encoder(cfg, r, second.model, std::move(second),
                                                 "after-bug-2");
            csv += ablate_row("after-bug-2", eval.report);
        }
    } else {
        std::fprintf(stderr, "unknown study '%s'\n", study.c_str());
        return kExitUsage;
    }

    std::string rel = "reports/ablate_" + study + ".csv";
    ctx.write_output_text(rel, csv);
    std::printf("[mudjack] study written to %s\n", ctx.path(rel).c_str());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mudjack: backdoor injection, trigger forensics, and encoder patching lab"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    uint64_t seed_override = 0;
    bool seed_set = false;
    app.add_option("--config", config_path, "run configuration file");
    app.add_option("--out", out_dir, "output directory (overrides config out_dir)");
    auto* seed_opt = app.add_option("--seed", seed_override, "seed (overrides config)");

    auto* gen = app.add_subcommand("gen-data", "generate all dataset splits");
    auto* pre = app.add_subcommand("pretrain", "pretrain the clean encoder");
    auto* atk = app.add_subcommand("attack", "inject a backdoor into the clean encoder");
    auto* tdown = app.add_subcommand("train-downstream", "train a downstream classifier");
    std::string tdown_encoder = kEncoderBackdoored;
    std::string tdown_classifier = kClassifierBackdoored;
    tdown->add_option("--encoder", tdown_encoder, "encoder artifact (relative to out dir)");
    tdown->add_option("--classifier-out", tdown_classifier, "classifier artifact name");
    auto* rbug = app.add_subcommand("report-bug", "construct a bug instance");
    auto* rtrig = app.add_subcommand("reverse-trigger", "reverse engineer the trigger");
    auto* patch = app.add_subcommand("patch", "patch the backdoored encoder");
    auto* evaluate = app.add_subcommand("evaluate", "evaluate a classifier/encoder pair");
    std::string eval_stage = "post-patch";
    std::string eval_encoder = kEncoderPatched;
    std::string eval_classifier = kClassifierPatched;
    evaluate->add_option("--stage", eval_stage, "stage label for the report");
    evaluate->add_option("--encoder", eval_encoder, "encoder artifact");
    evaluate->add_option("--classifier", eval_classifier, "classifier artifact");
    auto* pipe = app.add_subcommand("pipeline", "run the full default experiment");
    auto* ablate = app.add_subcommand("ablate", "run one ablation study");
    std::string study = "loss-terms";
    ablate->add_option("--study", study,
                       "loss-terms | val-size | lambda | random-location | source-specific | "
                       "dynamic");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    }

    RunContext ctx;
    try {
        if (!config_path.empty()) {
            ctx.config = load_config(config_path);
        }
        if (seed_opt->count() > 0) {
            ctx.config.seed = seed_override;
            seed_set = true;
        }
        (void)seed_set;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return kExitConfig;
    }
    ctx.out_dir = out_dir.empty() ? ctx.config.out_dir : out_dir;

    try {
        int rc = kExitUsage;
        if (gen->parsed()) {
            ctx.command = "gen-data";
            rc = cmd_gen_data(ctx);
        } else if (pre->parsed()) {
            ctx.command = "pretrain";
            rc = cmd_pretrain(ctx);
        } else if (atk->parsed()) {
            ctx.command = "attack";
            rc = cmd_attack(ctx);
        } else if (tdown->parsed()) {
            ctx.command = "train-downstream";
            rc = cmd_train_downstream(ctx, tdown_encoder, tdown_classifier);
        } else if (rbug->parsed()) {
            ctx.command = "report-bug";
            rc = cmd_report_bug(ctx);
        } else if (rtrig->parsed()) {
            ctx.command = "reverse-trigger";
            rc = cmd_reverse_trigger(ctx);
        } else if (patch->parsed()) {
            ctx.command = "patch";
            rc = cmd_patch(ctx);
        } else if (evaluate->parsed()) {
            ctx.command = "evaluate";
            rc = cmd_evaluate(ctx, eval_stage, eval_encoder, eval_classifier);
        } else if (pipe->parsed()) {
            ctx.command = "pipeline";
            rc = cmd_pipeline(ctx);
        } else if (ablate->parsed()) {
            ctx.command = "ablate";
            rc = cmd_ablate(ctx, study);
        }
        if (rc == kExitOk) {
            ctx.finish();
        }
        return rc;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRuntime;
    }
}
