#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mudjack/dataset.hpp"
#include "mudjack/models.hpp"

namespace mudjack {

enum class BugProvenance : uint8_t { Backdoor = 0, Normal = 1, AdversarialUnknown = 2 };

// A client bug report: misclassified input x_b plus a correctly classified
// reference input x_r with the same true label.
struct BugInstance {
    int height = 32;
    int width = 32;
    int channels = 3;
    std::vector<double> x_b;
    std::vector<double> x_r;
    int true_label = 0;       // y_b
    int observed_label = 0;   // y_t, informational
    BugProvenance provenance = BugProvenance::Backdoor;
    uint64_t encoder_hash = 0;
    uint64_t classifier_hash = 0;

    // Validates the three bug-instance conditions against (f, h) and throws
    // on violation; returns the constructed instance otherwise.
    static BugInstance create(const Classifier& f, const Encoder& h, std::vector<double> x_b,
                              std::vector<double> x_r, int true_label, BugProvenance provenance);
};

// True when the three conditions hold for (f, h).
bool bug_instance_holds(const BugInstance& bug, const Classifier& f, const Encoder& h);

// Scans the misclassification pool in index order for the first input that
// (f, h) misclassifies, then the reference pool for the first correctly
// classified input with the same true label. Returns nullopt when no
// qualifying pair exists ("no bug found", not an error).
std::optional<BugInstance> make_bug_instance(const Classifier& f, const Encoder& h,
                                             const ImageDataset& bug_pool,
                                             const ImageDataset& ref_pool,
                                             BugProvenance provenance);

struct SynthesizeOptions {
    int iterations = 100;
    double learning_rate = 1e-2;
    double stop_similarity = 0.9999;
    const std::vector<double>* init_image = nullptr;  // default: seeded uniform noise
};

struct SynthesizeResult {
    std::vector<double> image;
    double achieved_similarity = 0.0;
    int iterations_run = 0;
    bool reached_target = false;  // achieved >= 0.95
};

// Gradient ascent on cosine similarity between h(x) and a target feature,
// pixels clamped to [0,1] after every step. Returns the best iterate even
// when the similarity target is not reached.
SynthesizeResult synthesize_reference(const Encoder& h, std::span<const double> target_feature,
                                      uint64_t seed, const SynthesizeOptions& options = {});

// Bug file: magic "MJBG", u32 version, u8 provenance, u16 y_b, u16 y_t,
// u16 H, u16 W, u8 C, u64 encoder hash, u64 classifier hash, then x_b and
// x_r in the dataset pixel encoding (HWC u8).
std::vector<uint8_t> bug_to_bytes(const BugInstance& bug);
BugInstance bug_from_bytes(std::span<const uint8_t> bytes);
void save_bug_instance(const std::string& path, const BugInstance& bug);
BugInstance load_bug_instance(const std::string& path);

}  // namespace mudjack
