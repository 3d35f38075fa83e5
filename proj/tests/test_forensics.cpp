#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mudjack/forensics.hpp"

using namespace mudjack;

namespace {

// Fixed random linear extractor: normalize(flatten(x) * W). Differentiable
// through the tape, so it serves both occlusion and saliency.
FeatureFn linear_feature_fn(int in_dim, int d, uint64_t seed) {
    Rng rng(seed);
    Tensor w = Tensor::uniform({in_dim, d}, -1.0, 1.0, rng);
    return [w, in_dim](const Tensor& batch) {
        Tensor flat = reshape(batch, {batch.dim(0), in_dim});
        return l2_normalize_rows(matmul(flat, w));
    };
}

// Naive per-window occlusion oracle, iterated in a deliberately different
// (reversed) order from the implementation.
std::vector<double> occlusion_oracle(const FeatureFn& h, std::span<const double> x_b,
                                     std::span<const double> x_r, const ImageDims& dims,
                                     int window, int stride, std::span<const double> fill) {
    auto feature = [&](std::span<const double> img) {
        NoGradGuard ng;
        Tensor f = h(make_single_batch(img, dims.channels, dims.height, dims.width));
        return std::vector<double>(f.data().begin(), f.data().end());
    };
    auto fb = feature(x_b);
    auto fr = feature(x_r);
    double base = objective_from_features(fb, fr);

    std::vector<double> acc(static_cast<size_t>(dims.height * dims.width), 0.0);
    std::vector<int> cover(acc.size(), 0);
    std::vector<std::pair<int, int>> positions;
    for (int top = 0; top + window <= dims.height; top += stride) {
        for (int left = 0; left + window <= dims.width; left += stride) {
            positions.emplace_back(top, left);
        }
    }
    std::reverse(positions.begin(), positions.end());
    for (auto [top, left] : positions) {
        std::vector<double> occluded(x_b.begin(), x_b.end());
        for (int c = 0; c < dims.channels; ++c) {
            for (int y = top; y < top + window; ++y) {
                for (int x = left; x < left + window; ++x) {
                    occluded[static_cast<size_t>((c * dims.height + y) * dims.width + x)] =
                        fill[static_cast<size_t>(c)];
                }
            }
        }
        double delta = std::max(0.0, base - objective_from_features(feature(occluded), fr));
        for (int y = top; y < top + window; ++y) {
            for (int x = left; x < left + window; ++x) {
                acc[static_cast<size_t>(y * dims.width + x)] += delta;
                cover[static_cast<size_t>(y * dims.width + x)] += 1;
            }
        }
    }
    for (size_t i = 0; i < acc.size(); ++i) {
        if (cover[i] > 0) {
            acc[i] /= cover[i];
        }
    }
    return acc;
}

// Exhaustive 2-means SSE over contiguous splits of the sorted values.
double sweep_oracle_sse(std::span<const double> values) {
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    size_t n = sorted.size();
    double best = std::numeric_limits<double>::infinity();
    for (size_t k = 1; k < n; ++k) {
        double sse = 0.0;
        for (auto [lo, hi] : {std::pair<size_t, size_t>{0, k}, std::pair<size_t, size_t>{k, n}}) {
            double m = 0.0;
            for (size_t i = lo; i < hi; ++i) {
                m += sorted[i];
            }
            m /= static_cast<double>(hi - lo);
            for (size_t i = lo; i < hi; ++i) {
                sse += (sorted[i] - m) * (sorted[i] - m);
            }
        }
        best = std::min(best, sse);
    }
    return best;
}

// All 2^n partitions, tiny n only.
double subset_oracle_sse(std::span<const double> values) {
    size_t n = values.size();
    double best = std::numeric_limits<double>::infinity();
    for (uint32_t bits = 1; bits + 1 < (1u << n); ++bits) {
        double s0 = 0, s1 = 0;
        int c0 = 0, c1 = 0;
        for (size_t i = 0; i < n; ++i) {
            if (bits & (1u << i)) {
                s1 += values[i];
                ++c1;
            } else {
                s0 += values[i];
                ++c0;
            }
        }
        double m0 = s0 / c0, m1 = s1 / c1;
        double sse = 0.0;
        for (size_t i = 0; i < n; ++i) {
            double m = (bits & (1u << i)) ? m1 : m0;
            sse += (values[i] - m) * (values[i] - m);
        }
        best = std::min(best, sse);
    }
    return best;
}

}  // namespace

TEST_CASE("forensic objective hand values") {
    CHECK(objective_from_features(std::vector<double>{1, 0}, std::vector<double>{1, 0}) ==
          doctest::Approx(0.0));
    CHECK(objective_from_features(std::vector<double>{1, 0}, std::vector<double>{0, 1}) ==
          doctest::Approx(1.0));
    CHECK(objective_from_features(std::vector<double>{1, 0}, std::vector<double>{-1, 0}) ==
          doctest::Approx(2.0));

    // Identical inputs through a real feature map give 0.
    ImageDims dims{4, 4, 1};
    auto h = linear_feature_fn(16, 6, 3);
    std::vector<double> x(16, 0.25);
    CHECK(forensic_objective(h, x, x, dims) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("occlusion scores vanish when the bug input equals the reference") {
    ImageDims dims{6, 6, 1};
    auto h = linear_feature_fn(36, 8, 5);
    Rng rng(6);
    std::vector<double> x(36);
    for (auto& v : x) {
        v = rng.uniform();
    }
    std::vector<double> fill{0.5};
    auto map = occlusion_attribution(h, x, x, dims, 2, 1, fill);
    for (double s : map.scores) {
        CHECK(std::abs(s) < 1e-12);
    }
}

TEST_CASE("1x1-window occlusion pinpoints a single differing pixel") {
    ImageDims dims{5, 5, 1};
    auto h = linear_feature_fn(25, 10, 8);
    Rng rng(9);
    std::vector<double> x_r(25);
    for (auto& v : x_r) {
        v = rng.uniform(0.2, 0.4);
    }
    std::vector<double> x_b = x_r;
    x_b[12] = 1.0;  // single strong difference at the center
    std::vector<double> fill{x_r[12]};
    auto map = occlusion_attribution(h, x_b, x_r, dims, 1, 1, fill);
    size_t best = static_cast<size_t>(
        std::max_element(map.scores.begin(), map.scores.end()) - map.scores.begin());
    CHECK(best == 12);
}

TEST_CASE("occlusion matches the naive double-loop oracle on 8x8 inputs") {
    ImageDims dims{8, 8, 3};
    auto h = linear_feature_fn(8 * 8 * 3, 12, 11);
    Rng rng(12);
    std::vector<double> x_b(8 * 8 * 3), x_r(8 * 8 * 3);
    for (auto& v : x_b) {
        v = rng.uniform();
    }
    for (auto& v : x_r) {
        v = rng.uniform();
    }
    std::vector<double> fill{0.5, 0.4, 0.6};
    for (int window : {1, 3}) {
        for (int stride : {1, 2}) {
            auto map = occlusion_attribution(h, x_b, x_r, dims, window, stride, fill);
            auto oracle = occlusion_oracle(h, x_b, x_r, dims, window, stride, fill);
            REQUIRE(map.scores.size() == oracle.size());
            for (size_t i = 0; i < oracle.size(); ++i) {
                REQUIRE(map.scores[i] == doctest::Approx(oracle[i]).epsilon(1e-9));
            }
        }
    }
}

TEST_CASE("occlusion rejects oversized windows") {
    ImageDims dims{4, 4, 1};
    auto h = linear_feature_fn(16, 4, 2);
    std::vector<double> x(16, 0.1), fill{0.5};
    CHECK_THROWS_AS(occlusion_attribution(h, x, x, dims, 5, 1, fill), std::invalid_argument);
}

TEST_CASE("saliency gradient matches finite differences at sampled pixels") {
    ImageDims dims{6, 6, 2};
    auto h = linear_feature_fn(72, 9, 21);
    Rng rng(22);
    std::vector<double> x_b(72), x_r(72);
    for (auto& v : x_b) {
        v = rng.uniform();
    }
    for (auto& v : x_r) {
        v = rng.uniform();
    }

    // Direct objective-gradient check: compare |d objective / d pixel| from the
    // map's underlying computation against central differences.
    auto objective_at = [&](std::span<const double> img) {
        return forensic_objective(h, img, x_r, dims);
    };
    auto map = saliency_attribution(h, x_b, x_r, dims);
    for (int trial = 0; trial < 10; ++trial) {
        int c = rng.randint(2), y = rng.randint(6), x = rng.randint(6);
        size_t i = static_cast<size_t>((c * 6 + y) * 6 + x);
        double keep = x_b[i];
        double step = 1e-6;
        std::vector<double> up(x_b.begin(), x_b.end()), down(x_b.begin(), x_b.end());
        up[i] = keep + step;
        down[i] = keep - step;
        double fd = (objective_at(up) - objective_at(down)) / (2.0 * step);
        // The map keeps the channel max; compare against the max across channels.
        double fd_max = std::abs(fd);
        for (int oc = 0; oc < 2; ++oc) {
            if (oc == c) {
                continue;
            }
            size_t j = static_cast<size_t>((oc * 6 + y) * 6 + x);
            double keep2 = x_b[j];
            std::vector<double> up2(x_b.begin(), x_b.end()), down2(x_b.begin(), x_b.end());
            up2[j] = keep2 + step;
            down2[j] = keep2 - step;
            fd_max = std::max(fd_max,
                              std::abs((objective_at(up2) - objective_at(down2)) / (2.0 * step)));
        }
        double got = map.scores[static_cast<size_t>(y * 6 + x)];
        double denom = std::max({std::abs(got), std::abs(fd_max), 1e-4});
        CHECK(std::abs(got - fd_max) / denom < 1e-3);
    }
}

TEST_CASE("saliency is zero where the feature map ignores the region") {
    // Feature map reads only the top half of the image.
    ImageDims dims{6, 6, 1};
    Rng rng(31);
    Tensor w = Tensor::uniform({18, 5}, -1.0, 1.0, rng);
    FeatureFn h = [w](const Tensor& batch) {
        Tensor flat = reshape(batch, {batch.dim(0), 36});
        // Select the first 18 inputs via a fixed selector matrix.
        std::vector<double> sel(36 * 18, 0.0);
        for (int i = 0; i < 18; ++i) {
            sel[static_cast<size_t>(i * 18 + i)] = 1.0;
        }
        Tensor selector = Tensor::from({36, 18}, std::move(sel));
        return l2_normalize_rows(matmul(matmul(flat, selector), w));
    };
    Rng xr(32);
    std::vector<double> x_b(36), x_r(36);
    for (auto& v : x_b) {
        v = xr.uniform();
    }
    for (auto& v : x_r) {
        v = xr.uniform();
    }
    auto map = saliency_attribution(h, x_b, x_r, dims);
    for (int y = 3; y < 6; ++y) {
        for (int x = 0; x < 6; ++x) {
            CHECK(map.scores[static_cast<size_t>(y * 6 + x)] == 0.0);
        }
    }
}

TEST_CASE("saliency and occlusion agree on the argmax pixel across seed fixtures") {
    // Planted single-pixel trigger on a random linear extractor.
    ImageDims dims{8, 8, 1};
    int agree = 0, total = 25;
    for (int seed = 0; seed < total; ++seed) {
        auto h = linear_feature_fn(64, 12, 100 + static_cast<uint64_t>(seed));
        Rng rng(200 + static_cast<uint64_t>(seed));
        std::vector<double> x_r(64);
        for (auto& v : x_r) {
            v = rng.uniform(0.3, 0.5);
        }
        std::vector<double> x_b = x_r;
        size_t pixel = static_cast<size_t>(rng.randint(64));
        x_b[pixel] = 1.0;
        std::vector<double> fill{0.4};
        auto occ = occlusion_attribution(h, x_b, x_r, dims, 1, 1, fill);
        auto sal = saliency_attribution(h, x_b, x_r, dims);
        size_t ao = static_cast<size_t>(
            std::max_element(occ.scores.begin(), occ.scores.end()) - occ.scores.begin());
        size_t as = static_cast<size_t>(
            std::max_element(sal.scores.begin(), sal.scores.end()) - sal.scores.begin());
        agree += ao == as ? 1 : 0;
    }
    CHECK(static_cast<double>(agree) / total >= 0.8);
}

TEST_CASE("two-means hand examples") {
    std::vector<double> scores{0.9, 0.8, 0.1, 0.05};
    auto split = two_means_split(scores);
    REQUIRE(split.separable);
    CHECK(split.in_high == std::vector<uint8_t>{1, 1, 0, 0});
    CHECK(split.mean_high == doctest::Approx(0.85));
    CHECK(split.mean_low == doctest::Approx(0.075));

    // One high outlier among uniform lows -> singleton high cluster.
    std::vector<double> outlier{0.2, 0.21, 0.19, 0.2, 5.0};
    auto split2 = two_means_split(outlier);
    REQUIRE(split2.separable);
    CHECK(split2.in_high == std::vector<uint8_t>{0, 0, 0, 0, 1});

    // All equal -> not separable.
    std::vector<double> flat(10, 0.5);
    auto split3 = two_means_split(flat);
    CHECK_FALSE(split3.separable);
}

TEST_CASE("two-means equals the exhaustive subset oracle on tiny inputs") {
    Rng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        int n = 2 + rng.randint(9);  // up to 10 points
        std::vector<double> values(static_cast<size_t>(n));
        for (auto& v : values) {
            v = rng.uniform(0.0, rng.uniform() < 0.3 ? 5.0 : 1.0);
        }
        auto split = two_means_split(values);
        if (!split.separable) {
            continue;
        }
        double got = split.within_cluster_sse;
        CHECK(got == doctest::Approx(subset_oracle_sse(values)).epsilon(1e-9));
    }
}

TEST_CASE("two-means equals the sorted threshold sweep up to 4096 points") {
    Rng rng(78);
    for (int n : {16, 257, 1024, 4096}) {
        std::vector<double> values(static_cast<size_t>(n));
        for (auto& v : values) {
            v = rng.uniform() < 0.1 ? rng.uniform(2.0, 3.0) : rng.uniform(0.0, 1.0);
        }
        auto split = two_means_split(values);
        REQUIRE(split.separable);
        CHECK(split.within_cluster_sse == doctest::Approx(sweep_oracle_sse(values)).epsilon(1e-9));
    }
}

TEST_CASE("extract_trigger copies the pattern from the bug input on the high cluster") {
    ImageDims dims{4, 4, 2};
    AttributionMap map;
    map.height = 4;
    map.width = 4;
    map.scores.assign(16, 0.01);
    map.scores[5] = 0.9;
    map.scores[6] = 0.85;
    Rng rng(3);
    std::vector<double> x_b(32);
    for (auto& v : x_b) {
        v = rng.uniform();
    }
    auto reversed = extract_trigger(map, x_b, dims);
    REQUIRE_FALSE(reversed.no_separable);
    CHECK(reversed.trigger.mask_count() == 2);
    CHECK(reversed.trigger.mask[5] == 1);
    CHECK(reversed.trigger.mask[6] == 1);
    for (int c = 0; c < 2; ++c) {
        for (int p : {5, 6}) {
            size_t i = static_cast<size_t>(c * 16 + p);
            CHECK(reversed.trigger.pattern[i] == x_b[i]);
        }
    }
    CHECK(reversed.mean_high > reversed.mean_low);
}

TEST_CASE("all-equal attribution scores give an empty trigger with a flag") {
    ImageDims dims{4, 4, 1};
    AttributionMap map;
    map.height = 4;
    map.width = 4;
    map.scores.assign(16, 0.3);
    std::vector<double> x_b(16, 0.5);
    auto reversed = extract_trigger(map, x_b, dims);
    CHECK(reversed.no_separable);
    CHECK(reversed.trigger.empty());
}

TEST_CASE("mask IoU") {
    std::vector<uint8_t> a{1, 1, 0, 0};
    std::vector<uint8_t> b{1, 0, 1, 0};
    CHECK(mask_iou(a, b) == doctest::Approx(1.0 / 3.0));
    CHECK(mask_iou(a, a) == doctest::Approx(1.0));
}
