#include "mudjack/forensics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mudjack/artifact_io.hpp"

namespace mudjack {

namespace {

std::vector<double> feature_of(const FeatureFn& h, std::span<const double> image,
                               const ImageDims& dims) {
    NoGradGuard ng;
    Tensor f = h(make_single_batch(image, dims.channels, dims.height, dims.width));
    return std::vector<double>(f.data().begin(), f.data().end());
}

}  // namespace

double objective_from_features(std::span<const double> fa, std::span<const double> fb) {
    Tensor a = Tensor::from({static_cast<int64_t>(fa.size())},
                            std::vector<double>(fa.begin(), fa.end()));
    Tensor b = Tensor::from({static_cast<int64_t>(fb.size())},
                            std::vector<double>(fb.begin(), fb.end()));
    NoGradGuard ng;
    return 1.0 - cosine_similarity(a, b).item();
}

double forensic_objective(const FeatureFn& h, std::span<const double> x_b,
                          std::span<const double> x_r, const ImageDims& dims) {
    auto fb = feature_of(h, x_b, dims);
    auto fr = feature_of(h, x_r, dims);
    return objective_from_features(fb, fr);
}

AttributionMap occlusion_attribution(const FeatureFn& h, std::span<const double> x_b,
                                     std::span<const double> x_r, const ImageDims& dims,
                                     int window, int stride, std::span<const double> fill) {
    if (window < 1 || window > std::min(dims.height, dims.width)) {
        throw std::invalid_argument("occlusion: window " + std::to_string(window) +
                                    " larger than image " + std::to_string(dims.height) + "x" +
                                    std::to_string(dims.width));
    }
    if (stride < 1) {
        throw std::invalid_argument("occlusion: stride must be >= 1");
    }
    if (fill.size() != static_cast<size_t>(dims.channels)) {
        throw std::invalid_argument("occlusion: fill must have one value per channel");
    }

    auto fr = feature_of(h, x_r, dims);
    auto fb = feature_of(h, x_b, dims);
    double objective_b = objective_from_features(fb, fr);

    std::vector<std::pair<int, int>> positions;
    for (int top = 0; top + window <= dims.height; top += stride) {
        for (int left = 0; left + window <= dims.width; left += stride) {
            positions.emplace_back(top, left);
        }
    }

    // Delta of the objective per occluded window, evaluated in batches.
    std::vector<double> deltas(positions.size(), 0.0);
    constexpr int kBatch = 128;
    size_t img_size = x_b.size();
    for (size_t start = 0; start < positions.size(); start += kBatch) {
        size_t end = std::min(positions.size(), start + kBatch);
        int64_t n = static_cast<int64_t>(end - start);
        std::vector<double> batch(static_cast<size_t>(n) * img_size);
        for (size_t p = start; p < end; ++p) {
            double* dst = batch.data() + (p - start) * img_size;
            std::copy(x_b.begin(), x_b.end(), dst);
            auto [top, left] = positions[p];
            for (int c = 0; c < dims.channels; ++c) {
                for (int y = top; y < top + window; ++y) {
                    for (int x = left; x < left + window; ++x) {
                        dst[(c * dims.height + y) * dims.width + x] =
                            fill[static_cast<size_t>(c)];
                    }
                }
            }
        }
        NoGradGuard ng;
        Tensor feats = h(Tensor::from({n, dims.channels, dims.height, dims.width},
                                      std::move(batch)));
        const double* fp = feats.data().data();
        int64_t d = feats.dim(1);
        for (size_t p = start; p < end; ++p) {
            std::span<const double> f(fp + static_cast<int64_t>(p - start) * d,
                                      static_cast<size_t>(d));
            // Trigger evidence only: occlusions that increase dissimilarity
            // carry no weight, so an identical pair scores exactly zero.
            deltas[p] = std::max(0.0, objective_b - objective_from_features(f, fr));
        }
    }

    AttributionMap map;
    map.height = dims.height;
    map.width = dims.width;
    map.method = AttributionMap::Method::Occlusion;
    map.objective_at_input = objective_b;
    map.scores.assign(static_cast<size_t>(dims.height) * static_cast<size_t>(dims.width), 0.0);
    std::vector<int> cover(map.scores.size(), 0);
    for (size_t p = 0; p < positions.size(); ++p) {
        auto [top, left] = positions[p];
        for (int y = top; y < top + window; ++y) {
            for (int x = left; x < left + window; ++x) {
                map.scores[static_cast<size_t>(y * dims.width + x)] += deltas[p];
                cover[static_cast<size_t>(y * dims.width + x)] += 1;
            }
        }
    }
    for (size_t i = 0; i < map.scores.size(); ++i) {
        if (cover[i] > 0) {
            map.scores[i] /= cover[i];
        }
    }
    return map;
}

AttributionMap saliency_attribution(const FeatureFn& h, std::span<const double> x_b,
                                    std::span<const double> x_r, const ImageDims& dims) {
    auto fr = feature_of(h, x_r, dims);
    Tensor fr_const = Tensor::from({static_cast<int64_t>(fr.size())}, fr);

    Tensor input = make_single_batch(x_b, dims.channels, dims.height, dims.width);
    input.set_requires_grad(true);

    Tape tape;
    double objective_b = 0.0;
    {
        TapeScope scope(tape);
        Tensor f = h(input);
        Tensor cos = cosine_similarity(f, fr_const);
        Tensor objective = sub(Tensor::scalar(1.0), cos);
        objective_b = objective.item();
        backward(objective);
    }

    AttributionMap map;
    map.height = dims.height;
    map.width = dims.width;
    map.method = AttributionMap::Method::Saliency;
    map.objective_at_input = objective_b;
    map.scores.assign(static_cast<size_t>(dims.height) * static_cast<size_t>(dims.width), 0.0);
    auto g = input.grad();
    for (int y = 0; y < dims.height; ++y) {
        for (int x = 0; x < dims.width; ++x) {
            double best = 0.0;
            for (int c = 0; c < dims.channels; ++c) {
                best = std::max(best,
                                std::abs(g[static_cast<size_t>((c * dims.height + y) * dims.width +
                                                               x)]));
            }
            map.scores[static_cast<size_t>(y * dims.width + x)] = best;
        }
    }
    return map;
}

TwoMeansSplit two_means_split(std::span<const double> values) {
    size_t n = values.size();
    TwoMeansSplit out;
    out.in_high.assign(n, 0);
    if (n < 2) {
        return out;
    }

    // Stable order over (value, index) so duplicates split deterministically.
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (values[a] != values[b]) {
            return values[a] < values[b];
        }
        return a < b;
    });
    if (values[order.front()] == values[order.back()]) {
        return out;  // all equal: no separable split
    }

    std::vector<double> prefix(n + 1, 0.0), prefix_sq(n + 1, 0.0);
    for (size_t i = 0; i < n; ++i) {
        prefix[i + 1] = prefix[i] + values[order[i]];
        prefix_sq[i + 1] = prefix_sq[i] + values[order[i]] * values[order[i]];
    }
    auto sse = [&](size_t lo, size_t hi) {  // [lo, hi)
        double cnt = static_cast<double>(hi - lo);
        double s = prefix[hi] - prefix[lo];
        double sq = prefix_sq[hi] - prefix_sq[lo];
        return sq - s * s / cnt;
    };

    size_t best_k = 1;
    double best = sse(0, 1) + sse(1, n);
    for (size_t k = 2; k < n; ++k) {
        double candidate = sse(0, k) + sse(k, n);
        if (candidate < best) {
            best = candidate;
            best_k = k;
        }
    }

    out.separable = true;
    out.within_cluster_sse = best;
    out.mean_low = prefix[best_k] / static_cast<double>(best_k);
    out.mean_high = (prefix[n] - prefix[best_k]) / static_cast<double>(n - best_k);
    for (size_t i = best_k; i < n; ++i) {
        out.in_high[order[i]] = 1;
    }
    return out;
}

ReversedTrigger extract_trigger(const AttributionMap& map, std::span<const double> x_b,
                                const ImageDims& dims) {
    ReversedTrigger out;
    out.trigger.kind = TriggerSpec::Kind::Patch;
    out.trigger.location = TriggerSpec::Location::Fixed;
    out.trigger.height = dims.height;
    out.trigger.width = dims.width;
    out.trigger.channels = dims.channels;
    out.trigger.mask.assign(map.scores.size(), 0);
    out.trigger.pattern.assign(x_b.size(), 0.0);

    TwoMeansSplit split = two_means_split(map.scores);
    if (!split.separable) {
        out.no_separable = true;
        return out;
    }
    out.mean_low = split.mean_low;
    out.mean_high = split.mean_high;
    out.trigger.mask = split.in_high;
    for (int y = 0; y < dims.height; ++y) {
        for (int x = 0; x < dims.width; ++x) {
            if (!out.trigger.mask[static_cast<size_t>(y * dims.width + x)]) {
                continue;
            }
            for (int c = 0; c < dims.channels; ++c) {
                size_t i = static_cast<size_t>((c * dims.height + y) * dims.width + x);
                out.trigger.pattern[i] = x_b[i];
            }
        }
    }
    return out;
}

ReverseEngineerResult reverse_engineer_trigger(const FeatureFn& h, std::span<const double> x_b,
                                               std::span<const double> x_r, const ImageDims& dims,
                                               const ReverseEngineerOptions& options) {
    ReverseEngineerResult result;
    if (options.method == AttributionMap::Method::Saliency) {
        result.attribution = saliency_attribution(h, x_b, x_r, dims);
    } else {
        std::vector<double> fill = options.fill;
        if (fill.empty()) {
            fill.assign(static_cast<size_t>(dims.channels), 0.5);
        }
        result.attribution =
            occlusion_attribution(h, x_b, x_r, dims, options.window, options.stride, fill);
    }
    result.reversed = extract_trigger(result.attribution, x_b, dims);
    return result;
}

double mask_iou(std::span<const uint8_t> a, std::span<const uint8_t> b) {
    int inter = 0, uni = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        bool av = a[i] != 0, bv = b[i] != 0;
        inter += (av && bv) ? 1 : 0;
        uni += (av || bv) ? 1 : 0;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

void write_attribution_heatmap(const std::string& path, const AttributionMap& map) {
    double lo = *std::min_element(map.scores.begin(), map.scores.end());
    double hi = *std::max_element(map.scores.begin(), map.scores.end());
    double span = hi - lo;
    std::vector<uint8_t> rgb(map.scores.size() * 3);
    for (size_t i = 0; i < map.scores.size(); ++i) {
        double t = span > 0 ? (map.scores[i] - lo) / span : 0.0;
        uint8_t v = static_cast<uint8_t>(std::lround(t * 255.0));
        rgb[i * 3] = v;
        rgb[i * 3 + 1] = v;
        rgb[i * 3 + 2] = v;
    }
    write_ppm(path, map.height, map.width, rgb);
}

void write_attribution_csv(const std::string& path, const AttributionMap& map) {
    std::string text = "row,col,score\n";
    for (int y = 0; y < map.height; ++y) {
        for (int x = 0; x < map.width; ++x) {
            text += std::to_string(y) + "," + std::to_string(x) + "," +
                    format_double(map.scores[static_cast<size_t>(y * map.width + x)], 9) + "\n";
        }
    }
    write_file_text(path, text);
}

void write_mask_ppm(const std::string& path, std::span<const uint8_t> mask, int height,
                    int width) {
    std::vector<uint8_t> rgb(mask.size() * 3);
    for (size_t i = 0; i < mask.size(); ++i) {
        uint8_t v = mask[i] ? 255 : 0;
        rgb[i * 3] = v;
        rgb[i * 3 + 1] = v;
        rgb[i * 3 + 2] = v;
    }
    write_ppm(path, height, width, rgb);
}

void write_trigger_overlay(const std::string& path, std::span<const double> image,
                           std::span<const uint8_t> mask, const ImageDims& dims) {
    auto rgb = chw_to_rgb8(image, dims.channels, dims.height, dims.width);
    for (int y = 0; y < dims.height; ++y) {
        for (int x = 0; x < dims.width; ++x) {
            if (!mask[static_cast<size_t>(y * dims.width + x)]) {
                continue;
            }
            size_t i = (static_cast<size_t>(y) * static_cast<size_t>(dims.width) +
                        static_cast<size_t>(x)) *
                       3;
            rgb[i] = static_cast<uint8_t>(std::min(255, rgb[i] / 2 + 128));  // red tint
            rgb[i + 1] /= 2;
            rgb[i + 2] /= 2;
        }
    }
    write_ppm(path, dims.height, dims.width, rgb);
}

}  // namespace mudjack
