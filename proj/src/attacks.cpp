#include "mudjack/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mudjack/optim.hpp"

namespace mudjack {

namespace {

Tensor feature_row(const FeatureFn& h, std::span<const double> image, const ImageDims& dims) {
    return h(make_single_batch(image, dims.channels, dims.height, dims.width));
}

// -mean_i dot(F_i, f_ref) as a graph; rows are unit-norm so dot == cosine.
Tensor neg_mean_alignment(const Tensor& features, const Tensor& ref_row) {
    int64_t n = features.dim(0);
    Tensor ref_mat = ref_row;
    if (n > 1) {
        // Tile the single reference row by matmul with a ones column.
        Tensor ones = Tensor::full({n, 1}, 1.0);
        ref_mat = matmul(ones, ref_row);
    }
    return scale(mean(rowwise_dot(features, ref_mat)), -1.0);
}

std::vector<int> iota_vec(int n) {
    std::vector<int> v(static_cast<size_t>(n));
    std::iota(v.begin(), v.end(), 0);
    return v;
}

Tensor triggered_batch(const ImageDataset& ds, std::span<const int> indices,
                       const TriggerSpec& trigger, Rng* rng) {
    std::vector<std::vector<double>> images;
    images.reserve(indices.size());
    for (int i : indices) {
        images.push_back(
            embed_trigger_copy(ds.image(i), trigger, ds.height, ds.width, ds.channels, rng));
    }
    return make_batch_from_images(images, ds.channels, ds.height, ds.width);
}

struct AttackLoop {
    Encoder model;          // mutable attacked copy
    Encoder clean;          // frozen original
    Tensor clean_features;  // shadow features under the clean encoder
    Optimizer optimizer;
};

AttackLoop begin_attack(const Encoder& clean, const AttackConfig& config) {
    AttackLoop loop{clean.clone(), clean, encode_dataset(clean, config.shadow),
                    Optimizer({}, {OptimizerKind::Adam, config.learning_rate})};
    loop.model.set_requires_grad(true);
    loop.optimizer = Optimizer(loop.model.parameters(),
                               {OptimizerKind::Adam, config.learning_rate});
    return loop;
}

Tensor slice_rows(const Tensor& mat, std::span<const int> rows) {
    int64_t d = mat.dim(1);
    std::vector<double> out(rows.size() * static_cast<size_t>(d));
    const double* src = mat.data().data();
    for (size_t i = 0; i < rows.size(); ++i) {
        std::copy(src + static_cast<int64_t>(rows[i]) * d,
                  src + static_cast<int64_t>(rows[i] + 1) * d,
                  out.begin() + static_cast<int64_t>(i) * d);
    }
    return Tensor::from({static_cast<int64_t>(rows.size()), d}, std::move(out));
}

}  // namespace

void AttackConfig::validate() const {
    if (triggers.empty()) {
        throw std::invalid_argument("attack: no trigger configured");
    }
    if (shadow.size() == 0) {
        throw std::invalid_argument("attack: empty shadow set");
    }
    if (reference_image.empty()) {
        throw std::invalid_argument("attack: missing reference input");
    }
    if (beta < 0.0) {
        throw std::invalid_argument("attack: beta must be nonnegative");
    }
    if (kind == AttackKind::SourceSpecific) {
        if (!source_class.has_value()) {
            throw std::invalid_argument("attack: source-specific needs a source class");
        }
        if (*source_class == target_class) {
            throw std::invalid_argument("attack: source class equals target class");
        }
        if (alpha1 < 0.0 || alpha1 > 1.0 || alpha2 < 0.0 || alpha2 > 1.0 ||
            std::abs(alpha1 + alpha2 - 1.0) > 1e-9) {
            throw std::invalid_argument("attack: alpha1 + alpha2 must equal 1 within [0,1]");
        }
    }
    if (kind == AttackKind::Dynamic) {
        if (triggers.size() != 2) {
            throw std::invalid_argument("attack: dynamic variant needs exactly two triggers");
        }
        for (const auto& t : triggers) {
            auto [top, left, bh, bw] = t.mask_bounds();
            if (t.location != TriggerSpec::Location::PerImageRandom || bh != 10 || bw != 10) {
                throw std::invalid_argument(
                    "attack: dynamic triggers must be 10x10 with per-image-random location");
            }
        }
    }
}

Tensor attack_effectiveness_loss(const FeatureFn& h, const ImageDataset& shadow,
                                 const TriggerSpec& trigger, std::span<const double> x_ref,
                                 const ImageDims& dims_ref, Rng* rng) {
    if (shadow.size() == 0) {
        throw std::invalid_argument("attack_effectiveness_loss: empty shadow set");
    }
    Tensor ref = feature_row(h, x_ref, dims_ref);
    auto idx = iota_vec(shadow.size());
    Tensor features = h(triggered_batch(shadow, idx, trigger, rng));
    return neg_mean_alignment(features, ref);
}

double alignment_loss_from_features(const Tensor& trig_features,
                                    std::span<const double> ref_feature) {
    NoGradGuard ng;
    Tensor ref = Tensor::from({1, static_cast<int64_t>(ref_feature.size())},
                              std::vector<double>(ref_feature.begin(), ref_feature.end()));
    return neg_mean_alignment(trig_features, ref).item();
}

Encoder inject_backdoor(const Encoder& clean, const AttackConfig& config, uint64_t seed) {
    config.validate();
    if (config.epochs == 0) {
        return clean.clone();
    }
    const ImageDims dims{clean.config().height, clean.config().width, clean.config().channels};
    AttackLoop loop = begin_attack(clean, config);
    Rng shuffle_rng = Rng(seed).split(0x61747431);
    Rng trig_rng = Rng(seed).split(0x61747432);
    auto order = iota_vec(config.shadow.size());
    const bool dynamic = config.kind == AttackKind::Dynamic;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (int start = 0; start < config.shadow.size(); start += config.batch_size) {
            int end = std::min(config.shadow.size(), start + config.batch_size);
            std::span<const int> batch(order.data() + start, static_cast<size_t>(end - start));

            Tape tape;
            TapeScope scope(tape);
            Tensor ref = feature_row(loop.model.feature_fn(), config.reference_image, dims);

            Tensor trig_batch;
            if (dynamic) {
                std::vector<std::vector<double>> images;
                images.reserve(batch.size());
                for (int i : batch) {
                    const TriggerSpec& t =
                        config.triggers[static_cast<size_t>(trig_rng.randint(2))];
                    images.push_back(embed_trigger_copy(config.shadow.image(i), t,
                                                        config.shadow.height, config.shadow.width,
                                                        config.shadow.channels, &trig_rng));
                }
                trig_batch = make_batch_from_images(images, dims.channels, dims.height,
                                                    dims.width);
            } else {
                Rng* rng = config.triggers[0].location == TriggerSpec::Location::PerImageRandom
                               ? &trig_rng
                               : nullptr;
                trig_batch = triggered_batch(config.shadow, batch, config.triggers[0], rng);
            }

            Tensor trig_features = loop.model.forward(trig_batch);
            Tensor l0 = neg_mean_alignment(trig_features, ref);

            Tensor clean_feats = loop.model.forward(make_batch(config.shadow, batch));
            Tensor anchor = slice_rows(loop.clean_features, batch);
            Tensor utility = scale(mean(rowwise_dot(clean_feats, anchor)), -1.0);

            Tensor loss = add(l0, scale(utility, config.beta));
            if (!std::isfinite(loss.item())) {
                throw std::runtime_error("attack: non-finite loss at epoch " +
                                         std::to_string(epoch) + ", batch start " +
                                         std::to_string(start));
            }
            backward(loss);
            loop.optimizer.step();
        }
    }
    loop.model.set_requires_grad(false);
    return loop.model;
}

Encoder inject_source_specific(const Encoder& clean, const AttackConfig& config, uint64_t seed) {
    config.validate();
    if (config.kind != AttackKind::SourceSpecific) {
        throw std::invalid_argument("inject_source_specific: config kind mismatch");
    }
    const ImageDims dims{clean.config().height, clean.config().width, clean.config().channels};
    AttackLoop loop = begin_attack(clean, config);

    std::vector<int> source_idx, other_idx;
    for (int i = 0; i < config.shadow.size(); ++i) {
        if (config.shadow.labels[static_cast<size_t>(i)] == *config.source_class) {
            source_idx.push_back(i);
        } else {
            other_idx.push_back(i);
        }
    }
    if (source_idx.empty() || other_idx.empty()) {
        throw std::invalid_argument("inject_source_specific: shadow set missing a partition");
    }

    Rng shuffle_rng = Rng(seed).split(0x61747433);
    Rng trig_rng = Rng(seed).split(0x61747434);
    // Batches mix the two partitions proportionally so each step sees both.
    int src_per_batch = std::max(
        1, static_cast<int>(std::lround(static_cast<double>(config.batch_size) *
                                        source_idx.size() / config.shadow.size())));
    int other_per_batch = std::max(1, config.batch_size - src_per_batch);
    int steps_per_epoch = std::max(
        {1,
         (static_cast<int>(source_idx.size()) + src_per_batch - 1) / src_per_batch,
         (static_cast<int>(other_idx.size()) + other_per_batch - 1) / other_per_batch});

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_rng.shuffle(source_idx);
        shuffle_rng.shuffle(other_idx);
        for (int step = 0; step < steps_per_epoch; ++step) {
            auto take = [&](const std::vector<int>& pool, int count, int step_i) {
                std::vector<int> out;
                out.reserve(static_cast<size_t>(count));
                for (int k = 0; k < count; ++k) {
                    out.push_back(pool[static_cast<size_t>((step_i * count + k) % pool.size())]);
                }
                return out;
            };
            auto src_batch = take(source_idx, src_per_batch, step);
            auto other_batch = take(other_idx, other_per_batch, step);

            Rng* loc_rng = config.triggers[0].location == TriggerSpec::Location::PerImageRandom
                               ? &trig_rng
                               : nullptr;

            Tape tape;
            TapeScope scope(tape);
            Tensor ref = feature_row(loop.model.feature_fn(), config.reference_image, dims);

            Tensor src_trig = loop.model.forward(
                triggered_batch(config.shadow, src_batch, config.triggers[0], loc_rng));
            Tensor l_source = neg_mean_alignment(src_trig, ref);

            Tensor other_trig = loop.model.forward(
                triggered_batch(config.shadow, other_batch, config.triggers[0], loc_rng));
            Tensor other_clean = loop.model.forward(make_batch(config.shadow, other_batch));
            Tensor l_other = scale(mean(rowwise_dot(other_trig, other_clean)), -1.0);

            std::vector<int> util_batch = src_batch;
            util_batch.insert(util_batch.end(), other_batch.begin(), other_batch.end());
            Tensor util_feats = loop.model.forward(make_batch(config.shadow, util_batch));
            Tensor anchor = slice_rows(loop.clean_features, util_batch);
            Tensor utility = scale(mean(rowwise_dot(util_feats, anchor)), -1.0);

            Tensor loss = add(add(scale(l_source, config.alpha1), scale(l_other, config.alpha2)),
                              scale(utility, config.beta));
            if (!std::isfinite(loss.item())) {
                throw std::runtime_error("attack: non-finite loss in source-specific run");
            }
            backward(loss);
            loop.optimizer.step();
        }
    }
    loop.model.set_requires_grad(false);
    return loop.model;
}

Encoder inject_dynamic(const Encoder& clean, const AttackConfig& config, uint64_t seed) {
    if (config.kind != AttackKind::Dynamic) {
        throw std::invalid_argument("inject_dynamic: config kind mismatch");
    }
    return inject_backdoor(clean, config, seed);
}

double mean_feature_similarity(const Encoder& a, const Encoder& b, const ImageDataset& data) {
    NoGradGuard ng;
    Tensor fa = encode_dataset(a, data);
    Tensor fb = encode_dataset(b, data);
    return mean(rowwise_dot(fa, fb)).item();
}

}  // namespace mudjack
