#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "mudjack/artifact_io.hpp"
#include "mudjack/dataset.hpp"

using namespace mudjack;

namespace {

DataGenSpec small_spec() {
    DataGenSpec spec;
    spec.num_classes = 8;
    spec.per_class = 20;
    spec.split_tag = "test";
    return spec;
}

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("generation is seed-deterministic") {
    auto a = generate_dataset(small_spec(), 7);
    auto b = generate_dataset(small_spec(), 7);
    CHECK(a.pixels == b.pixels);
    CHECK(a.labels == b.labels);
    auto c = generate_dataset(small_spec(), 8);
    CHECK(a.pixels != c.pixels);
}

TEST_CASE("generation is class-balanced") {
    DataGenSpec spec = small_spec();
    spec.per_class = 500;
    auto ds = generate_dataset(spec, 1);
    CHECK(ds.size() == 4000);
    std::array<int, 8> counts{};
    for (int label : ds.labels) {
        counts[static_cast<size_t>(label)] += 1;
    }
    for (int c : counts) {
        CHECK(c == 500);
    }
}

TEST_CASE("generation rejects degenerate requests") {
    DataGenSpec spec = small_spec();
    spec.num_classes = 1;
    CHECK_THROWS_AS(generate_dataset(spec, 1), std::invalid_argument);
    spec = small_spec();
    spec.per_class = 0;
    CHECK_THROWS_AS(generate_dataset(spec, 1), std::invalid_argument);
}

TEST_CASE("each channel spans at least half the dynamic range") {
    auto ds = generate_dataset(small_spec(), 3);
    for (int c = 0; c < 3; ++c) {
        double lo = 1.0, hi = 0.0;
        for (int i = 0; i < ds.size(); ++i) {
            auto img = ds.image(i);
            for (int p = 0; p < ds.height * ds.width; ++p) {
                double v = img[static_cast<size_t>(c * ds.height * ds.width + p)];
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
        }
        CHECK(hi - lo >= 0.5);
    }
}

TEST_CASE("white square trigger replaces exactly the masked block") {
    auto ds = generate_dataset(small_spec(), 5);
    TriggerSpec t = make_square_trigger(32, 32, 3, 10, 22, 22, {1.0, 1.0, 1.0});
    auto out = embed_trigger_copy(ds.image(0), t, 32, 32, 3, nullptr);
    auto src = ds.image(0);
    for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) {
            for (int c = 0; c < 3; ++c) {
                size_t i = static_cast<size_t>((c * 32 + y) * 32 + x);
                if (y >= 22 && x >= 22) {
                    CHECK(out[i] == 1.0);
                } else {
                    CHECK(out[i] == src[i]);
                }
            }
        }
    }
}

TEST_CASE("empty mask trigger is the identity") {
    auto ds = generate_dataset(small_spec(), 5);
    TriggerSpec t;
    t.kind = TriggerSpec::Kind::Patch;
    t.height = 32;
    t.width = 32;
    t.channels = 3;
    t.mask.assign(32 * 32, 0);
    t.pattern.assign(3 * 32 * 32, 0.0);
    auto out = embed_trigger_copy(ds.image(1), t, 32, 32, 3, nullptr);
    auto src = ds.image(1);
    CHECK(std::equal(out.begin(), out.end(), src.begin()));
}

TEST_CASE("whole-image trigger respects the epsilon bound") {
    TriggerSpec t = make_whole_image_trigger(32, 32, 3, 0.01, 99);
    t.validate();
    std::vector<double> x(3 * 32 * 32, 0.5);
    auto out = embed_trigger_copy(x, t, 32, 32, 3, nullptr);
    double max_diff = 0.0;
    for (size_t i = 0; i < out.size(); ++i) {
        max_diff = std::max(max_diff, std::abs(out[i] - x[i]));
    }
    CHECK(max_diff <= 0.01 + 1e-12);  // (0.5 + p) - 0.5 re-rounds by an ulp
    CHECK(max_diff > 0.0);
}

TEST_CASE("fixed patch embedding is idempotent and never writes outside the mask") {
    auto ds = generate_dataset(small_spec(), 6);
    Rng trig_rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        int side = 1 + trig_rng.randint(12);
        int top = trig_rng.randint(32 - side + 1);
        int left = trig_rng.randint(32 - side + 1);
        TriggerSpec t = make_random_pattern_trigger(32, 32, 3, side, top, left,
                                                    trig_rng.next_u64(),
                                                    TriggerSpec::Location::Fixed);
        auto src = ds.image(trial % ds.size());
        auto once = embed_trigger_copy(src, t, 32, 32, 3, nullptr);
        auto twice = embed_trigger_copy(once, t, 32, 32, 3, nullptr);
        CHECK(once == twice);
        for (int y = 0; y < 32; ++y) {
            for (int x = 0; x < 32; ++x) {
                if (t.mask[static_cast<size_t>(y * 32 + x)]) {
                    continue;
                }
                for (int c = 0; c < 3; ++c) {
                    size_t i = static_cast<size_t>((c * 32 + y) * 32 + x);
                    REQUIRE(once[i] == src[i]);
                }
            }
        }
    }
}

TEST_CASE("random-location embedding stays in bounds and replays under a seed") {
    auto ds = generate_dataset(small_spec(), 9);
    TriggerSpec t = make_square_trigger(32, 32, 3, 10, 22, 22, {1.0, 1.0, 1.0},
                                        TriggerSpec::Location::PerImageRandom);
    Rng r1(5), r2(5);
    auto a = embed_trigger_copy(ds.image(0), t, 32, 32, 3, &r1);
    auto b = embed_trigger_copy(ds.image(0), t, 32, 32, 3, &r2);
    CHECK(a == b);
    // 100 draws: the 10x10 block lands fully inside every time.
    Rng r3(6);
    for (int i = 0; i < 100; ++i) {
        auto out = embed_trigger_copy(ds.image(i % ds.size()), t, 32, 32, 3, &r3);
        int count = 0;
        for (size_t p = 0; p < out.size(); ++p) {
            count += out[p] == 1.0 ? 1 : 0;
        }
        CHECK(count >= 100 * 3);  // at least the block in each channel
    }
}

TEST_CASE("make_backdoored_testset filters the target class and edits only the mask") {
    DataGenSpec spec = small_spec();
    spec.per_class = 10;
    auto test = generate_dataset(spec, 11);
    TriggerSpec t = make_square_trigger(32, 32, 3, 10, 22, 22, {1.0, 1.0, 1.0});
    auto bd = make_backdoored_testset(test, t, 2, 1);
    CHECK(bd.size() == 70);  // 80 inputs, 10 of the target class removed
    for (int label : bd.labels) {
        CHECK(label != 2);
    }
    // Fixed-location policy: each output differs from its source exactly on the mask.
    int cursor = 0;
    for (int i = 0; i < test.size(); ++i) {
        if (test.labels[static_cast<size_t>(i)] == 2) {
            continue;
        }
        auto src = test.image(i);
        auto out = bd.image(cursor++);
        for (int y = 0; y < 32; ++y) {
            for (int x = 0; x < 32; ++x) {
                bool masked = t.mask[static_cast<size_t>(y * 32 + x)] != 0;
                for (int c = 0; c < 3; ++c) {
                    size_t p = static_cast<size_t>((c * 32 + y) * 32 + x);
                    if (masked) {
                        REQUIRE(out[p] == 1.0);
                    } else {
                        REQUIRE(out[p] == src[p]);
                    }
                }
            }
        }
    }
}

TEST_CASE("all-target-class test set backdoors to an empty set") {
    DataGenSpec spec = small_spec();
    spec.per_class = 4;
    auto test = generate_dataset(spec, 12);
    // Rewrite every label to the target class.
    std::fill(test.labels.begin(), test.labels.end(), 3);
    TriggerSpec t = make_square_trigger(32, 32, 3, 10, 22, 22, {1.0, 1.0, 1.0});
    auto bd = make_backdoored_testset(test, t, 3, 1);
    CHECK(bd.size() == 0);
}

TEST_CASE("dataset file round-trips exactly") {
    auto ds = generate_dataset(small_spec(), 21);
    auto bytes = dataset_to_bytes(ds);
    auto back = dataset_from_bytes(bytes);
    CHECK(back.pixels == ds.pixels);
    CHECK(back.labels == ds.labels);
    CHECK(back.num_classes == ds.num_classes);

    std::string path = tmp_path("mudjack_ds_roundtrip.mjds");
    save_dataset(path, ds);
    auto loaded = load_dataset(path);
    CHECK(loaded.pixels == ds.pixels);
    std::filesystem::remove(path);
}

TEST_CASE("dataset loader reports distinct failure codes") {
    auto ds = generate_dataset(small_spec(), 22);
    auto bytes = dataset_to_bytes(ds);

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    try {
        dataset_from_bytes(bad_magic);
        FAIL("expected bad magic");
    } catch (const FileFormatError& e) {
        CHECK(e.code() == IoErrorCode::BadMagic);
    }

    auto truncated = bytes;
    truncated.resize(truncated.size() - 7);
    try {
        dataset_from_bytes(truncated);
        FAIL("expected truncation");
    } catch (const FileFormatError& e) {
        CHECK(e.code() == IoErrorCode::TruncatedPayload);
    }

    auto trailing = bytes;
    trailing.push_back(0);
    try {
        dataset_from_bytes(trailing);
        FAIL("expected trailing data");
    } catch (const FileFormatError& e) {
        CHECK(e.code() == IoErrorCode::TrailingData);
    }
}

TEST_CASE("trigger file round-trips") {
    TriggerSpec t = make_random_pattern_trigger(32, 32, 3, 6, 4, 9, 77,
                                                TriggerSpec::Location::PerImageRandom);
    auto bytes = trigger_to_bytes(t);
    auto back = trigger_from_bytes(bytes);
    CHECK(back.kind == t.kind);
    CHECK(back.location == t.location);
    CHECK(back.mask == t.mask);
    REQUIRE(back.pattern.size() == t.pattern.size());
    for (size_t i = 0; i < t.pattern.size(); ++i) {
        CHECK(back.pattern[i] == doctest::Approx(t.pattern[i]).epsilon(1e-6));
    }
}
