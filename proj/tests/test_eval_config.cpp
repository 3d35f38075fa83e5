#include <doctest.h>

#include <filesystem>

#include "mudjack/config.hpp"
#include "mudjack/eval.hpp"

using namespace mudjack;

namespace {

// Tiny deterministic pipeline pieces for counting tests: a classifier that
// is effectively a lookup is impractical, so rates are checked against naive
// recounts over real (fresh, untrained) models.
struct Fixture {
    ImageDataset test;
    Encoder encoder;
    Classifier classifier;

    Fixture() {
        DataGenSpec spec;
        spec.per_class = 8;
        spec.num_classes = 8;
        spec.combo_block = 1;
        test = generate_dataset(spec, 41);
        EncoderConfig ecfg;
        Rng erng(1);
        encoder = Encoder(ecfg, erng);
        ClassifierConfig ccfg;
        Rng crng(2);
        classifier = Classifier(ccfg, crng);
    }
};

}  // namespace

TEST_CASE("accuracy equals a naive per-item recount exactly") {
    Fixture fx;
    RateCount count;
    double acc = compute_acc(fx.classifier, fx.encoder, fx.test, &count);
    int recount = 0;
    for (int i = 0; i < fx.test.size(); ++i) {
        recount += classify(fx.classifier, fx.encoder, fx.test.image(i)) ==
                           fx.test.labels[static_cast<size_t>(i)]
                       ? 1
                       : 0;
    }
    CHECK(count.hits == recount);
    CHECK(count.total == fx.test.size());
    CHECK(acc == doctest::Approx(100.0 * recount / fx.test.size()));
}

TEST_CASE("asr and accb equal naive recounts on a backdoored set") {
    Fixture fx;
    TriggerSpec trigger = make_square_trigger(32, 32, 3, 10, 22, 22, {1.0, 1.0, 1.0});
    auto bd = make_backdoored_testset(fx.test, trigger, 0, 9);
    RateCount asr_count, accb_count;
    double asr = compute_asr(fx.classifier, fx.encoder, bd, 0, &asr_count);
    double accb = compute_accb(fx.classifier, fx.encoder, bd, &accb_count);
    int asr_recount = 0, accb_recount = 0;
    for (int i = 0; i < bd.size(); ++i) {
        int pred = classify(fx.classifier, fx.encoder, bd.image(i));
        asr_recount += pred == 0 ? 1 : 0;
        accb_recount += pred == bd.labels[static_cast<size_t>(i)] ? 1 : 0;
    }
    CHECK(asr_count.hits == asr_recount);
    CHECK(accb_count.hits == accb_recount);
    CHECK(asr == doctest::Approx(100.0 * asr_recount / bd.size()));
    CHECK(accb == doctest::Approx(100.0 * accb_recount / bd.size()));
    CHECK(asr_count.total == bd.size());
    CHECK(accb_count.total == bd.size());
}

TEST_CASE("empty sets are rejected") {
    Fixture fx;
    ImageDataset empty;
    empty.num_classes = 8;
    CHECK_THROWS_AS(compute_acc(fx.classifier, fx.encoder, empty, nullptr),
                    std::invalid_argument);
    CHECK_THROWS_AS(compute_asr(fx.classifier, fx.encoder, empty, 0, nullptr),
                    std::invalid_argument);
    CHECK_THROWS_AS(compute_accb(fx.classifier, fx.encoder, empty, nullptr),
                    std::invalid_argument);
}

TEST_CASE("source-split asr partitions by true class and rejects source==target") {
    Fixture fx;
    TriggerSpec trigger = make_square_trigger(32, 32, 3, 10, 22, 22, {1.0, 1.0, 1.0});
    RateCount src_count, other_count;
    auto [s, o] = compute_source_split_asr(fx.classifier, fx.encoder, fx.test, trigger, 3, 0, 1,
                                           &src_count, &other_count);
    REQUIRE(s.has_value());
    REQUIRE(o.has_value());
    CHECK(src_count.total == 8);         // one class worth of items
    CHECK(other_count.total == 8 * 6);   // remaining non-target classes
    CHECK_THROWS_AS(
        compute_source_split_asr(fx.classifier, fx.encoder, fx.test, trigger, 0, 0, 1, nullptr,
                                 nullptr),
        std::invalid_argument);
}

TEST_CASE("report CSV is byte-stable and carries the schema columns") {
    EvalReport r;
    r.experiment_id = "exp";
    r.stage = "pre-patch";
    r.cp = true;
    r.acc = 76.4567;
    r.asr = 2.39;
    r.accb = 73.38;
    r.seed = 42;
    r.model_hash = "0123456789abcdef";
    std::string row1 = report_csv_row(r);
    std::string row2 = report_csv_row(r);
    CHECK(row1 == row2);
    CHECK(report_csv_header() ==
          "experiment_id,stage,CP,Acc,ASR,AccB,ASR_source,ASR_other,seed,model_hash\n");
    CHECK(row1 == "exp,pre-patch,1,76.4567,2.3900,73.3800,,,42,0123456789abcdef\n");
}

TEST_CASE("config parses defaults and round-trips through render") {
    RunConfig def;
    std::string text = render_config(def);
    RunConfig parsed = parse_config_text(text);
    CHECK(parsed.seed == def.seed);
    CHECK(parsed.data.pretrain_per_class == def.data.pretrain_per_class);
    CHECK(parsed.patch.epochs == def.patch.epochs);
    CHECK(render_config(parsed) == text);
}

TEST_CASE("config rejects unknown keys with the key name and location") {
    std::string text = "[patch]\nnosuch_key = 3\n";
    try {
        parse_config_text(text);
        FAIL("expected rejection");
    } catch (const ConfigError& e) {
        std::string msg = e.what();
        CHECK(msg.find("nosuch_key") != std::string::npos);
        CHECK(e.line() == 2);
    }
}

TEST_CASE("config rejects unknown sections and malformed lines") {
    CHECK_THROWS_AS(parse_config_text("[nosuch]\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("seed\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("[data]\nnum_classes = eight\n"), ConfigError);
}

TEST_CASE("config accepts comments and blank lines") {
    std::string text = "# comment\n\nseed = 7\n[data]\n; other comment\nnum_classes = 4\n";
    RunConfig parsed = parse_config_text(text);
    CHECK(parsed.seed == 7);
    CHECK(parsed.data.num_classes == 4);
}
