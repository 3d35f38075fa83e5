#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mudjack/rng.hpp"
#include "mudjack/tensor.hpp"

namespace mudjack {

struct ImageDims {
    int height;
    int width;
    int channels;
};

// Labeled image collection. Pixels are stored CHW per image, values in [0,1]
// quantized to 1/255 steps so the on-disk u8 encoding round-trips exactly.
struct ImageDataset {
    int height = 32;
    int width = 32;
    int channels = 3;
    int num_classes = 0;
    std::vector<double> pixels;  // size() * channels * height * width
    std::vector<int> labels;
    std::string split_tag;
    uint64_t seed = 0;

    int size() const { return static_cast<int>(labels.size()); }
    int image_size() const { return channels * height * width; }
    std::span<const double> image(int i) const {
        return std::span<const double>(pixels).subspan(
            static_cast<size_t>(i) * static_cast<size_t>(image_size()),
            static_cast<size_t>(image_size()));
    }
    std::span<double> image_mut(int i) {
        return std::span<double>(pixels).subspan(
            static_cast<size_t>(i) * static_cast<size_t>(image_size()),
            static_cast<size_t>(image_size()));
    }
    void validate() const;
};

// Pixel mask plus pattern values. Patch triggers replace masked pixels with
// the pattern; whole-image triggers add a bounded perturbation everywhere.
struct TriggerSpec {
    enum class Kind { Patch, WholeImage };
    enum class Location { Fixed, PerImageRandom };

    Kind kind = Kind::Patch;
    Location location = Location::Fixed;
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<uint8_t> mask;     // height*width; patch kind only
    std::vector<double> pattern;   // channels*height*width
    double epsilon = 0.0;          // whole-image perturbation bound

    int mask_count() const;
    bool empty() const { return kind == Kind::Patch && mask_count() == 0; }
    // Tight bounding box of the mask as {top, left, box_h, box_w}.
    std::array<int, 4> mask_bounds() const;
    void validate() const;
};

struct DataGenSpec {
    int num_classes = 8;
    int per_class = 500;
    int height = 32;
    int width = 32;
    int channels = 3;
    // Selects which (shape, color) pairings define the classes, so the
    // pretrain and downstream splits can carry disjoint label semantics.
    int combo_block = 0;
    std::string split_tag;
};

ImageDataset generate_dataset(const DataGenSpec& spec, uint64_t seed);

// Patch kind: masked pixels replaced by the pattern; per-image-random
// location translates the mask bounding box to a uniform in-bounds offset
// drawn from rng. Whole-image kind: clamp(x + pattern, 0, 1).
void embed_trigger(std::span<const double> src, std::span<double> dst, const TriggerSpec& trigger,
                   int height, int width, int channels, Rng* rng);
std::vector<double> embed_trigger_copy(std::span<const double> src, const TriggerSpec& trigger,
                                       int height, int width, int channels, Rng* rng);

// All non-target-class test inputs, trigger-embedded, true labels kept.
ImageDataset make_backdoored_testset(const ImageDataset& test, const TriggerSpec& trigger,
                                     int target_class, uint64_t seed);

// Multi-trigger variant: each item draws one of the triggers from the seeded
// stream, the way a dynamic attack embeds at test time.
ImageDataset make_backdoored_testset_multi(const ImageDataset& test,
                                           const std::vector<TriggerSpec>& triggers,
                                           int target_class, uint64_t seed);

TriggerSpec make_square_trigger(int img_h, int img_w, int channels, int side, int top, int left,
                                const std::array<double, 3>& color,
                                TriggerSpec::Location location = TriggerSpec::Location::Fixed);
TriggerSpec make_random_pattern_trigger(int img_h, int img_w, int channels, int side, int top,
                                        int left, uint64_t seed,
                                        TriggerSpec::Location location);
TriggerSpec make_whole_image_trigger(int img_h, int img_w, int channels, double epsilon,
                                     uint64_t seed);

// Dataset file: magic "MJDS", u32 version, u32 N, u16 H, u16 W, u8 C,
// u16 class count, N x u16 labels, N x H x W x C bytes (value/255 on load).
std::vector<uint8_t> dataset_to_bytes(const ImageDataset& ds);
ImageDataset dataset_from_bytes(std::span<const uint8_t> bytes);
void save_dataset(const std::string& path, const ImageDataset& ds);
ImageDataset load_dataset(const std::string& path);

// Trigger file: magic "MJTG", u32 version, u8 kind, u8 location, u16 H,
// u16 W, u8 C, f32 epsilon, H*W mask bytes, C*H*W f32 pattern.
std::vector<uint8_t> trigger_to_bytes(const TriggerSpec& t);
TriggerSpec trigger_from_bytes(std::span<const uint8_t> bytes);
void save_trigger(const std::string& path, const TriggerSpec& t);
TriggerSpec load_trigger(const std::string& path);

// Batch tensor {n, C, H, W} from dataset rows.
Tensor make_batch(const ImageDataset& ds, std::span<const int> indices);
Tensor make_batch_from_images(const std::vector<std::vector<double>>& images, int channels,
                              int height, int width);
Tensor make_single_batch(std::span<const double> image, int channels, int height, int width);

}  // namespace mudjack
