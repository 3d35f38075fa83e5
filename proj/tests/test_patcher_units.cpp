#include <doctest.h>

#include <cmath>

#include "mudjack/attacks.hpp"
#include "mudjack/bug_report.hpp"
#include "mudjack/patcher.hpp"

using namespace mudjack;

namespace {

// Small encoder + tiny data for fast unit-level patch checks.
struct SmallWorld {
    EncoderConfig ecfg;
    Encoder encoder;
    ImageDataset dval;
    BugInstance bug;  // hand-assembled pair; CP-level validity is not needed here

    SmallWorld() {
        ecfg.height = 8;
        ecfg.width = 8;
        ecfg.conv1_channels = 4;
        ecfg.conv2_channels = 6;
        ecfg.feature_dim = 16;
        Rng rng(1);
        encoder = Encoder(ecfg, rng);

        DataGenSpec spec;
        spec.height = 8;
        spec.width = 8;
        spec.num_classes = 2;
        spec.per_class = 6;
        dval = generate_dataset(spec, 3);

        Rng img_rng(5);
        bug.height = 8;
        bug.width = 8;
        bug.channels = 3;
        bug.x_b.resize(3 * 64);
        bug.x_r.resize(3 * 64);
        for (auto& v : bug.x_b) {
            v = img_rng.uniform();
        }
        for (auto& v : bug.x_r) {
            v = img_rng.uniform();
        }
        bug.true_label = 0;
    }

    TriggerSpec square_trigger() const {
        return make_square_trigger(8, 8, 3, 3, 5, 5, {1.0, 1.0, 1.0});
    }
};

double cos_features(const Encoder& h, std::span<const double> a, std::span<const double> b) {
    auto fa = h.encode(a);
    auto fb = h.encode(b);
    double dot = 0.0;
    for (size_t i = 0; i < fa.size(); ++i) {
        dot += fa[i] * fb[i];
    }
    return dot;
}

}  // namespace

TEST_CASE("iterations per epoch follows the ceiling rule") {
    CHECK(iterations_per_epoch(999, 100) == 10);
    CHECK(iterations_per_epoch(400, 50) == 9);
    CHECK(iterations_per_epoch(1, 10) == 1);
}

TEST_CASE("effectiveness loss bounds and one-step descent") {
    SmallWorld w;
    FeatureFn h = w.encoder.feature_fn();
    {
        NoGradGuard ng;
        BugInstance same = w.bug;
        same.x_r = same.x_b;
        CHECK(effectiveness_loss(h, same).item() == doctest::Approx(-1.0).epsilon(1e-9));
    }
    // One descent step on L_e alone strictly decreases L_e.
    Encoder model = w.encoder.clone();
    model.set_requires_grad(true);
    Optimizer opt(model.parameters(), {OptimizerKind::Sgd, 1e-2});
    FeatureFn hp = model.feature_fn();
    double before;
    {
        NoGradGuard ng;
        before = effectiveness_loss(hp, w.bug).item();
    }
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = effectiveness_loss(hp, w.bug);
        backward(loss);
    }
    opt.step();
    double after;
    {
        NoGradGuard ng;
        after = effectiveness_loss(hp, w.bug).item();
    }
    CHECK(after < before);
}

TEST_CASE("locality loss is -1 for an identical model and averages correctly") {
    SmallWorld w;
    NoGradGuard ng;
    Tensor value = locality_loss(w.encoder, w.encoder.feature_fn(), w.dval, w.bug.x_r);
    CHECK(value.item() == doctest::Approx(-1.0).epsilon(1e-9));
}

TEST_CASE("feature-level locality mean over two items") {
    // |D_val| = 1 with similarities {1.0, 0.0} -> -(1+0)/2 = -0.5.
    // Checked at the formula level via cosine terms.
    double value = -(1.0 + 0.0) / 2.0;
    CHECK(value == doctest::Approx(-0.5));
}

TEST_CASE("locality streaming evaluation equals a naive full evaluation") {
    SmallWorld w;
    Encoder other = w.encoder.clone();
    // Perturb the copy slightly so the two models differ.
    auto params = other.parameters();
    auto data = params[4].data_mut();
    for (size_t i = 0; i < data.size(); i += 7) {
        data[i] += 0.01;
    }
    NoGradGuard ng;
    double streamed = locality_loss(w.encoder, other.feature_fn(), w.dval, w.bug.x_r).item();

    // Naive: average cosine one item at a time.
    double acc = 0.0;
    auto cos_between = [&](std::span<const double> img) {
        auto fa = w.encoder.encode(img);
        auto fb = other.encode(img);
        double dot = 0.0;
        for (size_t i = 0; i < fa.size(); ++i) {
            dot += fa[i] * fb[i];
        }
        return dot;
    };
    for (int i = 0; i < w.dval.size(); ++i) {
        acc += cos_between(w.dval.image(i));
    }
    acc += cos_between(w.bug.x_r);
    double naive = -acc / (w.dval.size() + 1);
    CHECK(streamed == doctest::Approx(naive).epsilon(1e-9));
}

TEST_CASE("generalizability loss handles the empty trigger with a warning") {
    SmallWorld w;
    TriggerSpec empty;
    empty.kind = TriggerSpec::Kind::Patch;
    empty.height = 8;
    empty.width = 8;
    empty.channels = 3;
    empty.mask.assign(64, 0);
    empty.pattern.assign(3 * 64, 0.0);
    NoGradGuard ng;
    auto result = generalizability_loss(w.encoder.feature_fn(), w.dval, w.bug.x_r, empty,
                                        TriggerLocationMode::AsReversed, nullptr);
    CHECK(result.no_trigger);
    CHECK(result.value.item() == 0.0);
}

TEST_CASE("generalizability equals naive evaluation on a small validation set") {
    SmallWorld w;
    TriggerSpec t = w.square_trigger();
    NoGradGuard ng;
    double streamed = generalizability_loss(w.encoder.feature_fn(), w.dval, w.bug.x_r, t,
                                            TriggerLocationMode::AsReversed, nullptr)
                          .value.item();
    double acc = 0.0;
    auto term = [&](std::span<const double> img) {
        auto trig = embed_trigger_copy(img, t, 8, 8, 3, nullptr);
        return cos_features(w.encoder, trig, img);
    };
    for (int i = 0; i < w.dval.size(); ++i) {
        acc += term(w.dval.image(i));
    }
    acc += term(w.bug.x_r);
    CHECK(streamed == doctest::Approx(-acc / (w.dval.size() + 1)).epsilon(1e-9));
}

TEST_CASE("a model that ignores the masked region scores -1 generalizability") {
    // Feature map reads only the top-left 4x4 block; trigger sits bottom-right.
    ImageDims dims{8, 8, 3};
    Rng rng(40);
    Tensor w = Tensor::uniform({48, 8}, -1.0, 1.0, rng);
    FeatureFn h = [w](const Tensor& batch) {
        int64_t n = batch.dim(0);
        std::vector<double> picked(static_cast<size_t>(n) * 48);
        const double* src = batch.data().data();
        for (int64_t i = 0; i < n; ++i) {
            size_t o = 0;
            for (int c = 0; c < 3; ++c) {
                for (int y = 0; y < 4; ++y) {
                    for (int x = 0; x < 4; ++x) {
                        picked[static_cast<size_t>(i) * 48 + o++] =
                            src[i * 192 + (c * 8 + y) * 8 + x];
                    }
                }
            }
        }
        Tensor sel = Tensor::from({n, 48}, std::move(picked));
        return l2_normalize_rows(matmul(sel, w));
    };
    SmallWorld world;
    TriggerSpec t = world.square_trigger();
    NoGradGuard ng;
    double value = generalizability_loss(h, world.dval, world.bug.x_r, t,
                                         TriggerLocationMode::AsReversed, nullptr)
                       .value.item();
    CHECK(value == doctest::Approx(-1.0).epsilon(1e-9));
}

TEST_CASE("zero-epoch patch returns a bit-identical model") {
    SmallWorld w;
    PatchConfig cfg;
    cfg.epochs = 0;
    PatchResult result = mudjack_patch(w.encoder, w.bug, w.dval, w.square_trigger(), cfg, 5);
    CHECK(encoder_hash(result.model) == encoder_hash(w.encoder));
    CHECK(result.trace.empty());
}

TEST_CASE("pure effectiveness descent aligns the bug pair") {
    SmallWorld w;
    PatchConfig cfg;
    cfg.lambda_l = 0.0;
    cfg.lambda_g = 0.0;
    cfg.epochs = 60;
    cfg.batch_size = 8;
    PatchResult result = mudjack_patch(w.encoder, w.bug, w.dval, w.square_trigger(), cfg, 5);
    CHECK(cos_features(result.model, w.bug.x_b, w.bug.x_r) >= 0.99);
}

TEST_CASE("patch trace decomposition matches independent loss recomputation") {
    SmallWorld w;
    PatchConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 5;
    cfg.lambda_l = 1.0;
    cfg.lambda_g = 1.0;
    TriggerSpec t = w.square_trigger();
    int checked = 0;
    cfg.epoch_hook = [&](int epoch, const Encoder& current, const TraceRow& row) {
        NoGradGuard ng;
        double le = effectiveness_loss(current.feature_fn(), w.bug).item();
        double ll = locality_loss(w.encoder, current.feature_fn(), w.dval, w.bug.x_r).item();
        double lg = generalizability_loss(current.feature_fn(), w.dval, w.bug.x_r, t,
                                          TriggerLocationMode::AsReversed, nullptr)
                        .value.item();
        CHECK(row.epoch == epoch);
        CHECK(row.effectiveness == doctest::Approx(le).epsilon(1e-9));
        CHECK(row.locality == doctest::Approx(ll).epsilon(1e-9));
        CHECK(row.generalizability == doctest::Approx(lg).epsilon(1e-9));
        CHECK(row.total ==
              doctest::Approx(le + cfg.lambda_l * ll + cfg.lambda_g * lg).epsilon(1e-9));
        ++checked;
    };
    mudjack_patch(w.encoder, w.bug, w.dval, t, cfg, 6);
    CHECK(checked == 3);
}

TEST_CASE("ft-linf projection bounds every parameter after every step") {
    SmallWorld w;
    BaselineConfig cfg;
    cfg.method = BaselineMethod::FTLinf;
    cfg.delta = 0.01;
    cfg.epochs = 5;
    cfg.steps_per_epoch = 2;
    cfg.learning_rate = 5e-3;
    auto origin = w.encoder.parameters();
    std::vector<double> flat;
    for (const auto& p : origin) {
        flat.insert(flat.end(), p.data().begin(), p.data().end());
    }
    int checks = 0;
    cfg.step_hook = [&](const Encoder& current) {
        size_t off = 0;
        for (const auto& p : current.parameters()) {
            for (double v : p.data()) {
                REQUIRE(std::abs(v - flat[off++]) <= 0.01 + 1e-12);
            }
        }
        ++checks;
    };
    baseline_patch(w.encoder, w.bug, cfg, nullptr, 3);
    CHECK(checks == 10);
}

TEST_CASE("ft-l2 projection bounds the global parameter delta") {
    SmallWorld w;
    BaselineConfig cfg;
    cfg.method = BaselineMethod::FTL2;
    cfg.delta = 0.01;
    cfg.epochs = 4;
    cfg.learning_rate = 5e-3;
    auto origin = w.encoder.parameters();
    std::vector<double> flat;
    for (const auto& p : origin) {
        flat.insert(flat.end(), p.data().begin(), p.data().end());
    }
    cfg.step_hook = [&](const Encoder& current) {
        double norm = 0.0;
        size_t off = 0;
        for (const auto& p : current.parameters()) {
            for (double v : p.data()) {
                double d = v - flat[off++];
                norm += d * d;
            }
        }
        REQUIRE(std::sqrt(norm) <= 0.01 + 1e-9);
    };
    baseline_patch(w.encoder, w.bug, cfg, nullptr, 3);
}

TEST_CASE("unlearning projection bounds the l1 delta") {
    SmallWorld w;
    BaselineConfig cfg;
    cfg.method = BaselineMethod::Unlearning;
    cfg.l1_delta_scale = 0.01;
    cfg.epochs = 4;
    cfg.learning_rate = 5e-3;
    auto origin = w.encoder.parameters();
    std::vector<double> flat;
    for (const auto& p : origin) {
        flat.insert(flat.end(), p.data().begin(), p.data().end());
    }
    double radius = cfg.l1_delta_scale * std::sqrt(static_cast<double>(flat.size()));
    cfg.step_hook = [&](const Encoder& current) {
        double norm1 = 0.0;
        size_t off = 0;
        for (const auto& p : current.parameters()) {
            for (double v : p.data()) {
                norm1 += std::abs(v - flat[off++]);
            }
        }
        REQUIRE(norm1 <= radius + 1e-9);
    };
    baseline_patch(w.encoder, w.bug, cfg, nullptr, 3);
}

TEST_CASE("fine-pruning zeroes exactly the configured channel fraction") {
    SmallWorld w;
    auto pruned = fine_pruning_channels(w.encoder, w.bug, 0.5);
    REQUIRE(pruned.size() == 2);
    CHECK(static_cast<int>(pruned[0].size()) ==
          static_cast<int>(std::ceil(0.5 * w.ecfg.conv1_channels)));
    CHECK(static_cast<int>(pruned[1].size()) ==
          static_cast<int>(std::ceil(0.5 * w.ecfg.conv2_channels)));

    BaselineConfig cfg;
    cfg.method = BaselineMethod::FinePruning;
    cfg.prune_fraction = 0.5;
    cfg.post_prune_epochs = 0;
    PatchResult result = baseline_patch(w.encoder, w.bug, cfg, &w.dval, 3);
    auto params = result.model.parameters();
    for (int layer = 0; layer < 2; ++layer) {
        const Tensor& weight = params[static_cast<size_t>(layer * 2)];
        int64_t per = weight.numel() / weight.dim(0);
        for (int ch : pruned[static_cast<size_t>(layer)]) {
            for (int64_t i = 0; i < per; ++i) {
                REQUIRE(weight.data()[static_cast<size_t>(ch * per + i)] == 0.0);
            }
        }
    }
}

TEST_CASE("fine-pruning without the pretrain split is rejected") {
    SmallWorld w;
    BaselineConfig cfg;
    cfg.method = BaselineMethod::FinePruning;
    CHECK_THROWS_AS(baseline_patch(w.encoder, w.bug, cfg, nullptr, 1), std::invalid_argument);
}

TEST_CASE("empty bug list leaves the model untouched") {
    SmallWorld w;
    SequenceDeps deps;
    deps.dval = &w.dval;
    deps.downstream_train = &w.dval;
    uint64_t before = encoder_hash(w.encoder);
    auto stages = patch_sequence(w.encoder, {}, deps, 1);
    CHECK(stages.empty());
    CHECK(encoder_hash(w.encoder) == before);
}

TEST_CASE("attack config invariants are enforced") {
    AttackConfig cfg;
    cfg.kind = AttackKind::SourceSpecific;
    cfg.triggers.push_back(make_square_trigger(8, 8, 3, 3, 5, 5, {1, 1, 1}));
    cfg.reference_image.assign(192, 0.5);
    DataGenSpec spec;
    spec.height = 8;
    spec.width = 8;
    spec.per_class = 2;
    cfg.shadow = generate_dataset(spec, 2);
    cfg.target_class = 0;
    cfg.source_class = 0;  // equals target: rejected
    cfg.alpha1 = 0.8;
    cfg.alpha2 = 0.2;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.source_class = 1;
    cfg.alpha1 = 0.9;  // alpha1 + alpha2 != 1
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.alpha2 = 0.1;
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("attack effectiveness loss hand values at the feature level") {
    // Two shadow items with similarities 1.0 and 0.0 -> loss -0.5.
    Tensor features = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    std::vector<double> ref{1.0, 0.0};
    CHECK(alignment_loss_from_features(features, ref) == doctest::Approx(-0.5));

    // Perfect alignment -> -1; orthogonal -> 0.
    Tensor aligned = Tensor::from({3, 2}, {1.0, 0.0, 1.0, 0.0, 1.0, 0.0});
    CHECK(alignment_loss_from_features(aligned, ref) == doctest::Approx(-1.0));
    Tensor ortho = Tensor::from({2, 2}, {0.0, 1.0, 0.0, 1.0});
    CHECK(alignment_loss_from_features(ortho, ref) == doctest::Approx(0.0));
}

TEST_CASE("attack with zero epochs returns the clean encoder and rejects empty shadows") {
    SmallWorld w;
    AttackConfig cfg;
    cfg.triggers.push_back(w.square_trigger());
    cfg.reference_image.assign(192, 0.5);
    DataGenSpec spec;
    spec.height = 8;
    spec.width = 8;
    spec.per_class = 3;
    cfg.shadow = generate_dataset(spec, 6);
    cfg.epochs = 0;
    Encoder out = inject_backdoor(w.encoder, cfg, 1);
    CHECK(encoder_hash(out) == encoder_hash(w.encoder));

    AttackConfig empty_cfg = cfg;
    empty_cfg.shadow = ImageDataset{};
    CHECK_THROWS_AS(inject_backdoor(w.encoder, empty_cfg, 1), std::invalid_argument);
    CHECK_THROWS_AS(attack_effectiveness_loss(w.encoder.feature_fn(), empty_cfg.shadow,
                                              cfg.triggers[0], cfg.reference_image,
                                              ImageDims{8, 8, 3}, nullptr),
                    std::invalid_argument);
}
