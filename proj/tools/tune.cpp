// Temporary tuning driver; not part of the deliverable.
#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>

#include "mudjack/pipeline.hpp"

using namespace mudjack;

static int forensic_sweep(RunConfig config) {
    std::printf("== forensic sweep ==\n");
    DataBundle data = generate_all_datasets(config);
    Encoder clean = pretrain_encoder(data.pretrain_train, pretrain_config_from(config),
                                     splitmix64(config.seed ^ 0x20));
    AttackConfig attack = build_attack_config(config, data);
    Encoder backdoored = inject_backdoor(clean, attack, splitmix64(config.seed ^ 0x22));
    Classifier clf = train_downstream(backdoored, data.downstream_train,
                                      downstream_config_from(config),
                                      splitmix64(config.seed ^ 0x21));
    TriggerSpec planted = attack.triggers[0];
    ImageDataset bd_test = make_backdoored_testset(data.downstream_test, planted,
                                                   config.attack.target_class,
                                                   splitmix64(config.seed ^ 0x23));
    double asr = compute_asr(clf, backdoored, bd_test, config.attack.target_class);
    std::printf("attack ASR = %.2f\n", asr);
    auto bug = make_bug_instance(clf, backdoored, bd_test, data.downstream_test,
                                 BugProvenance::Backdoor);
    if (!bug) {
        std::printf("no bug!\n");
        return 1;
    }
    const ImageDims dims{32, 32, 3};
    for (int w : {3, 4, 5, 6, 8, 10, 12}) {
        ReverseEngineerOptions opt;
        opt.window = w;
        opt.stride = 1;
        opt.fill = channel_means(data.validation);
        auto res = reverse_engineer_trigger(backdoored.feature_fn(), bug->x_b, bug->x_r, dims,
                                            opt);
        int inside = 0, outside = 0;
        for (size_t i = 0; i < res.reversed.trigger.mask.size(); ++i) {
            if (!res.reversed.trigger.mask[i]) continue;
            (planted.mask[i] ? inside : outside) += 1;
        }
        std::printf("window %2d: mask=%3d inside=%3d outside=%3d IoU=%.3f\n", w,
                    res.reversed.trigger.mask_count(), inside, outside,
                    mask_iou(res.reversed.trigger.mask, planted.mask));
        std::fflush(stdout);
    }
    return 0;
}

int main(int argc, char** argv) {
    RunConfig config;
    bool sweep = false;
    double t0 = 0;
    auto now = [] {
        return std::chrono::duration<double>(
                   std::chrono::steady_clock::now().time_since_epoch())
            .count();
    };
    for (int i = 1; i < argc; ++i) {
        std::string arg = argv[i];
        auto eat = [&](const char* k) -> const char* {
            if (arg.rfind(k, 0) == 0) return arg.c_str() + strlen(k);
            return nullptr;
        };
        if (auto v = eat("seed=")) config.seed = std::stoull(v);
        if (auto v = eat("pretrain_epochs=")) config.pretrain.epochs = std::stoi(v);
        if (auto v = eat("attack_epochs=")) config.attack.epochs = std::stoi(v);
        if (auto v = eat("attack_lr=")) config.attack.learning_rate = std::stod(v);
        if (auto v = eat("patch_epochs=")) config.patch.epochs = std::stoi(v);
        if (auto v = eat("patch_lr=")) config.patch.learning_rate = std::stod(v);
        if (auto v = eat("ds_epochs=")) config.eval.downstream_epochs = std::stoi(v);
        if (auto v = eat("pretrain_pc=")) config.data.pretrain_per_class = std::stoi(v);
        if (auto v = eat("dtrain_pc=")) config.data.downstream_train_per_class = std::stoi(v);
        if (auto v = eat("dtest_pc=")) config.data.downstream_test_per_class = std::stoi(v);
        if (auto v = eat("attack_kind=")) config.attack.kind = v;
        if (auto v = eat("patch_method=")) config.patch.method = v;
        if (auto v = eat("trigger_source=")) config.patch.trigger_source = v;
        if (auto v = eat("location_mode=")) config.patch.location_mode = v;
        if (auto v = eat("trigger_location=")) config.attack.trigger_location = v;
        if (auto v = eat("beta=")) config.attack.beta = std::stod(v);
        if (auto v = eat("shadow=")) config.attack.shadow_size = std::stoi(v);
        if (auto v = eat("lambda_l=")) config.patch.lambda_l = std::stod(v);
        if (auto v = eat("lambda_g=")) config.patch.lambda_g = std::stod(v);
        if (auto v = eat("occl_window=")) config.patch.occlusion_window = std::stoi(v);
        if (auto v = eat("sweep=")) sweep = std::stoi(v) != 0;
    }
    if (sweep) {
        return forensic_sweep(config);
    }
    t0 = now();
    double last = t0;
    auto progress = [&](const std::string& msg) {
        double t = now();
        std::printf("[%7.1fs +%6.1fs] %s\n", t - t0, t - last, msg.c_str());
        std::fflush(stdout);
        last = t;
    };
    try {
        PipelineResult r = run_pipeline(config, progress);
        std::printf("total time: %.1fs\n", now() - t0);
        std::printf("clean:      Acc %.2f  ASR(clean-enc) %.2f\n", r.clean_report.acc,
                    r.clean_report.asr);
        std::printf("stealth sim: %.4f\n", r.stealth_similarity);
        std::printf("pre-patch:  CP %d  Acc %.2f  ASR %.2f  AccB %.2f\n",
                    r.pre_patch_report.cp ? 1 : 0, r.pre_patch_report.acc, r.pre_patch_report.asr,
                    r.pre_patch_report.accb);
        std::printf("reversed trigger: %d px, IoU vs planted %.3f, no_separable=%d\n",
                    r.forensic.reversed.trigger.mask_count(),
                    r.planted_trigger.kind == TriggerSpec::Kind::Patch
                        ? mask_iou(r.forensic.reversed.trigger.mask, r.planted_trigger.mask)
                        : -1.0,
                    r.forensic.reversed.no_separable ? 1 : 0);
        std::printf("post-patch: CP %d  Acc %.2f  ASR %.2f  AccB %.2f\n",
                    r.post_patch_report.cp ? 1 : 0, r.post_patch_report.acc,
                    r.post_patch_report.asr, r.post_patch_report.accb);
    } catch (const std::exception& e) {
        std::printf("FAILED: %s\n", e.what());
        return 1;
    }
    return 0;
}
