#pragma once

#include <span>
#include <string>
#include <vector>

#include "mudjack/dataset.hpp"
#include "mudjack/models.hpp"

namespace mudjack {

// Feature dissimilarity objective: 1 - cos(h(x_b), h(x_r)), in [0, 2].
double forensic_objective(const FeatureFn& h, std::span<const double> x_b,
                          std::span<const double> x_r, const ImageDims& dims);
double objective_from_features(std::span<const double> fa, std::span<const double> fb);

struct AttributionMap {
    enum class Method { Occlusion, Saliency };
    int height = 0;
    int width = 0;
    Method method = Method::Occlusion;
    double objective_at_input = 0.0;  // objective value of the unmodified bug input
    std::vector<double> scores;       // height * width
};

// Slides a window over x_b, replacing it with per-channel fill values; each
// pixel's score is the mean of max(0, objective(x_b) - objective(occluded))
// over the windows covering it: high where occluding reduces dissimilarity
// (trigger-like), zero where it does not.
AttributionMap occlusion_attribution(const FeatureFn& h, std::span<const double> x_b,
                                     std::span<const double> x_r, const ImageDims& dims,
                                     int window, int stride, std::span<const double> fill);

// Per-pixel score = max over channels of |d objective / d x_b|.
AttributionMap saliency_attribution(const FeatureFn& h, std::span<const double> x_b,
                                    std::span<const double> x_r, const ImageDims& dims);

// Exact 2-means over scalars via the sorted-threshold sweep (the optimal
// 2-partition of scalars is always a contiguous split of the sorted values).
struct TwoMeansSplit {
    bool separable = false;      // false when all scores are equal
    double mean_low = 0.0;
    double mean_high = 0.0;
    double within_cluster_sse = 0.0;
    std::vector<uint8_t> in_high;  // 1 for members of the higher-mean cluster
};
TwoMeansSplit two_means_split(std::span<const double> values);

struct ReversedTrigger {
    TriggerSpec trigger;       // mask from the high cluster, pattern copied from x_b
    double mean_high = 0.0;
    double mean_low = 0.0;
    int selected_cluster = 1;  // higher-mean cluster by construction
    bool no_separable = false;
};

ReversedTrigger extract_trigger(const AttributionMap& map, std::span<const double> x_b,
                                const ImageDims& dims);

// Full Algorithm-2 style pipeline: attribution then cluster-based extraction.
struct ReverseEngineerOptions {
    AttributionMap::Method method = AttributionMap::Method::Occlusion;
    int window = 8;
    int stride = 1;
    std::vector<double> fill;  // per-channel fill; empty -> 0.5 each
};
struct ReverseEngineerResult {
    AttributionMap attribution;
    ReversedTrigger reversed;
};
ReverseEngineerResult reverse_engineer_trigger(const FeatureFn& h, std::span<const double> x_b,
                                               std::span<const double> x_r, const ImageDims& dims,
                                               const ReverseEngineerOptions& options);

double mask_iou(std::span<const uint8_t> a, std::span<const uint8_t> b);

// PPM / CSV exports of attribution maps and masks.
void write_attribution_heatmap(const std::string& path, const AttributionMap& map);
void write_attribution_csv(const std::string& path, const AttributionMap& map);
void write_mask_ppm(const std::string& path, std::span<const uint8_t> mask, int height, int width);
void write_trigger_overlay(const std::string& path, std::span<const double> image,
                           std::span<const uint8_t> mask, const ImageDims& dims);

}  // namespace mudjack
