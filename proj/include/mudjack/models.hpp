#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mudjack/dataset.hpp"
#include "mudjack/optim.hpp"
#include "mudjack/tensor.hpp"

namespace mudjack {

// Batched feature map {n,C,H,W} -> {n,d}; the handle every attribution and
// loss routine accepts so tests can substitute synthetic extractors.
using FeatureFn = std::function<Tensor(const Tensor&)>;

struct EncoderConfig {
    int height = 32;
    int width = 32;
    int channels = 3;
    int conv1_channels = 8;
    int conv2_channels = 16;
    int feature_dim = 64;
};

// Feature extractor: two 3x3 conv + relu + 2x2 maxpool stages, then a dense
// projection, l2-normalized. Copies share parameters; clone() deep-copies.
class Encoder {
  public:
    Encoder() = default;
    Encoder(const EncoderConfig& config, Rng& rng);

    Tensor forward(const Tensor& batch) const;
    const EncoderConfig& config() const { return config_; }

    std::vector<Tensor> parameters() const;
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    void set_requires_grad(bool v);
    Encoder clone() const;

    FeatureFn feature_fn() const;

    // No-grad feature of one CHW image.
    std::vector<double> encode(std::span<const double> image) const;

  private:
    EncoderConfig config_;
    Tensor conv1_w_, conv1_b_, conv2_w_, conv2_b_, dense_w_, dense_b_;
    friend Encoder encoder_from_checkpoint(const struct Checkpoint& ckpt);
    friend struct ModelInternals;
};

struct ClassifierConfig {
    int input_dim = 64;
    int hidden = 32;
    int num_classes = 8;
};

class Classifier {
  public:
    Classifier() = default;
    Classifier(const ClassifierConfig& config, Rng& rng);

    Tensor forward(const Tensor& features) const;
    const ClassifierConfig& config() const { return config_; }

    std::vector<Tensor> parameters() const;
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    void set_requires_grad(bool v);
    Classifier clone() const;

  private:
    ClassifierConfig config_;
    Tensor w1_, b1_, w2_, b2_;
    friend Classifier classifier_from_checkpoint(const struct Checkpoint& ckpt);
    friend struct ModelInternals;
};

// Batched no-grad features {N, d} for a whole dataset.
Tensor encode_dataset(const Encoder& h, const ImageDataset& ds, int batch = 128);
Tensor encode_images(const Encoder& h, const std::vector<std::vector<double>>& images);

struct PretrainConfig {
    enum class Mode { SupervisedProxy, ContrastiveLite };
    Mode mode = Mode::SupervisedProxy;
    int epochs = 12;
    double learning_rate = 1e-3;
    int batch_size = 64;
    double temperature = 0.2;  // contrastive-lite
    EncoderConfig encoder;
};

// Supervised proxy pretraining on the pretrain split (proxy head discarded);
// a contrastive-lite objective is available behind the mode switch.
Encoder pretrain_encoder(const ImageDataset& data, const PretrainConfig& config, uint64_t seed);

struct DownstreamTrainConfig {
    int epochs = 100;
    double learning_rate = 1e-3;
    int batch_size = 64;
    int hidden = 32;
};

Classifier train_downstream(const Encoder& h, const ImageDataset& train,
                            const DownstreamTrainConfig& config, uint64_t seed);

// Same routine on precomputed features, for feature-level tests and reuse.
Classifier train_classifier_on_features(const Tensor& features, const std::vector<int>& labels,
                                        int num_classes, const DownstreamTrainConfig& config,
                                        uint64_t seed);

int classify_features(const Classifier& f, std::span<const double> feature);
int classify(const Classifier& f, const Encoder& h, std::span<const double> image);
std::vector<int> classify_dataset(const Classifier& f, const Encoder& h, const ImageDataset& ds,
                                  int batch = 128);

// ---- checkpoints -----------------------------------------------------------
// magic "MJCK", u32 LE version=1, u8 kind (0 encoder, 1 classifier),
// u32 tensor count; per tensor: u16 name length + UTF-8 name, u8 rank,
// rank x u32 dims, then product x f32 LE row-major.

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

struct Checkpoint {
    uint8_t kind = 0;  // 0 encoder, 1 classifier
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const;
};

std::vector<uint8_t> checkpoint_to_bytes(const Checkpoint& ckpt);
Checkpoint checkpoint_from_bytes(std::span<const uint8_t> bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint checkpoint_from_encoder(const Encoder& h);
Encoder encoder_from_checkpoint(const Checkpoint& ckpt);
Checkpoint checkpoint_from_classifier(const Classifier& f);
Classifier classifier_from_checkpoint(const Checkpoint& ckpt);

uint64_t encoder_hash(const Encoder& h);
uint64_t classifier_hash(const Classifier& f);

}  // namespace mudjack
