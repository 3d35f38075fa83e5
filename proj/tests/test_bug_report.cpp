#include <doctest.h>

#include <filesystem>

#include "mudjack/artifact_io.hpp"
#include "mudjack/bug_report.hpp"

using namespace mudjack;

namespace {

struct BugWorld {
    Encoder encoder;
    Classifier classifier;
    ImageDataset pool;

    BugWorld() {
        EncoderConfig ecfg;
        ecfg.height = 8;
        ecfg.width = 8;
        ecfg.conv1_channels = 4;
        ecfg.conv2_channels = 6;
        ecfg.feature_dim = 16;
        Rng erng(2);
        encoder = Encoder(ecfg, erng);
        DataGenSpec spec;
        spec.height = 8;
        spec.width = 8;
        spec.num_classes = 4;
        spec.per_class = 10;
        pool = generate_dataset(spec, 7);
        DownstreamTrainConfig cfg;
        cfg.epochs = 40;
        classifier = train_downstream(encoder, pool, cfg, 3);
    }
};

}  // namespace

TEST_CASE("no bug found when every input is correctly classified") {
    BugWorld w;
    // Keep only inputs the pipeline classifies correctly.
    auto preds = classify_dataset(w.classifier, w.encoder, w.pool);
    ImageDataset correct;
    correct.height = w.pool.height;
    correct.width = w.pool.width;
    correct.channels = w.pool.channels;
    correct.num_classes = w.pool.num_classes;
    for (int i = 0; i < w.pool.size(); ++i) {
        if (preds[static_cast<size_t>(i)] != w.pool.labels[static_cast<size_t>(i)]) {
            continue;
        }
        correct.labels.push_back(w.pool.labels[static_cast<size_t>(i)]);
        auto img = w.pool.image(i);
        correct.pixels.insert(correct.pixels.end(), img.begin(), img.end());
    }
    REQUIRE(correct.size() > 0);
    auto bug = make_bug_instance(w.classifier, w.encoder, correct, correct,
                                 BugProvenance::Normal);
    CHECK_FALSE(bug.has_value());
}

TEST_CASE("a pair violating the reference condition is rejected at construction") {
    BugWorld w;
    auto preds = classify_dataset(w.classifier, w.encoder, w.pool);
    // Find one misclassified and one correctly classified input.
    int wrong = -1, right = -1;
    for (int i = 0; i < w.pool.size(); ++i) {
        bool ok = preds[static_cast<size_t>(i)] == w.pool.labels[static_cast<size_t>(i)];
        if (!ok && wrong < 0) {
            wrong = i;
        }
        if (ok && right < 0) {
            right = i;
        }
    }
    if (wrong < 0) {
        return;  // this classifier is perfect on the pool; nothing to reject
    }
    REQUIRE(right >= 0);
    auto img_w = w.pool.image(wrong);
    auto img_r = w.pool.image(right);
    // condition (iii) violated: pass a misclassified input as the reference.
    CHECK_THROWS_AS(BugInstance::create(w.classifier, w.encoder,
                                        std::vector<double>(img_w.begin(), img_w.end()),
                                        std::vector<double>(img_w.begin(), img_w.end()),
                                        w.pool.labels[static_cast<size_t>(wrong)],
                                        BugProvenance::Normal),
                    std::invalid_argument);
    // condition (ii) violated: a correctly classified input cannot be x_b.
    CHECK_THROWS_AS(BugInstance::create(w.classifier, w.encoder,
                                        std::vector<double>(img_r.begin(), img_r.end()),
                                        std::vector<double>(img_r.begin(), img_r.end()),
                                        w.pool.labels[static_cast<size_t>(right)],
                                        BugProvenance::Normal),
                    std::invalid_argument);
}

TEST_CASE("bug instances revalidate and round-trip through the file format") {
    BugWorld w;
    auto preds = classify_dataset(w.classifier, w.encoder, w.pool);
    std::optional<BugInstance> bug;
    for (int i = 0; i < w.pool.size() && !bug; ++i) {
        if (preds[static_cast<size_t>(i)] != w.pool.labels[static_cast<size_t>(i)]) {
            bug = make_bug_instance(w.classifier, w.encoder, w.pool, w.pool,
                                    BugProvenance::Normal);
        }
    }
    if (!bug) {
        return;  // pool classified perfectly under this seed
    }
    CHECK(bug_instance_holds(*bug, w.classifier, w.encoder));
    CHECK(bug->encoder_hash == encoder_hash(w.encoder));
    CHECK(bug->classifier_hash == classifier_hash(w.classifier));

    auto bytes = bug_to_bytes(*bug);
    BugInstance back = bug_from_bytes(bytes);
    CHECK(back.true_label == bug->true_label);
    CHECK(back.observed_label == bug->observed_label);
    CHECK(back.x_b == bug->x_b);
    CHECK(back.x_r == bug->x_r);
    CHECK(back.encoder_hash == bug->encoder_hash);

    auto corrupt = bytes;
    corrupt[0] = 'x';
    CHECK_THROWS_AS(bug_from_bytes(corrupt), FileFormatError);
}

TEST_CASE("synthesize_reference starting at a matching image is immediately done") {
    BugWorld w;
    auto img = w.pool.image(0);
    std::vector<double> init(img.begin(), img.end());
    auto target = w.encoder.encode(init);
    SynthesizeOptions options;
    options.init_image = &init;
    auto result = synthesize_reference(w.encoder, target, 5, options);
    CHECK(result.achieved_similarity == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(result.iterations_run == 0);
    CHECK(result.reached_target);
}

TEST_CASE("synthesize_reference keeps pixels in range and improves similarity") {
    BugWorld w;
    auto img = w.pool.image(3);
    auto target = w.encoder.encode(img);
    SynthesizeOptions options;
    options.iterations = 60;
    auto result = synthesize_reference(w.encoder, target, 11, options);
    for (double v : result.image) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }
    // A fresh random image starts far from the target; optimization improves it.
    CHECK(result.achieved_similarity > 0.5);
}
