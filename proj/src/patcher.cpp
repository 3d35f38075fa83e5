#include "mudjack/patcher.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mudjack/artifact_io.hpp"
#include "mudjack/optim.hpp"

namespace mudjack {

namespace {

constexpr int kChunk = 64;  // forward-pass chunk for full-set loss evaluation

struct PatchItems {
    // D_val followed by x_r; images stay CHW.
    std::vector<std::vector<double>> clean;
    std::vector<std::vector<double>> triggered;
    ImageDims dims;
    int count() const { return static_cast<int>(clean.size()); }
};

PatchItems collect_items(const ImageDataset& dval, std::span<const double> x_r,
                         const ImageDims& dims) {
    PatchItems items;
    items.dims = dims;
    items.clean.reserve(static_cast<size_t>(dval.size()) + 1);
    for (int i = 0; i < dval.size(); ++i) {
        auto img = dval.image(i);
        items.clean.emplace_back(img.begin(), img.end());
    }
    items.clean.emplace_back(x_r.begin(), x_r.end());
    return items;
}

void embed_items(PatchItems& items, const TriggerSpec& t_b, TriggerLocationMode mode, Rng* rng) {
    items.triggered.resize(items.clean.size());
    Rng* use = mode == TriggerLocationMode::RandomPerItem ? rng : nullptr;
    TriggerSpec trigger = t_b;
    if (mode == TriggerLocationMode::RandomPerItem) {
        trigger.location = TriggerSpec::Location::PerImageRandom;
    }
    for (size_t i = 0; i < items.clean.size(); ++i) {
        items.triggered[i] = embed_trigger_copy(items.clean[i], trigger, items.dims.height,
                                                items.dims.width, items.dims.channels, use);
    }
}

Tensor batch_of(const PatchItems& items, const std::vector<std::vector<double>>& images,
                std::span<const int> indices) {
    std::vector<std::vector<double>> selected;
    selected.reserve(indices.size());
    for (int i : indices) {
        selected.push_back(images[static_cast<size_t>(i)]);
    }
    return make_batch_from_images(selected, items.dims.channels, items.dims.height,
                                  items.dims.width);
}

std::vector<double> flatten_params(const std::vector<Tensor>& params) {
    std::vector<double> flat;
    for (const auto& p : params) {
        flat.insert(flat.end(), p.data().begin(), p.data().end());
    }
    return flat;
}

void restore_params(std::vector<Tensor>& params, std::span<const double> flat) {
    size_t off = 0;
    for (auto& p : params) {
        auto data = p.data_mut();
        std::copy(flat.begin() + static_cast<ptrdiff_t>(off),
                  flat.begin() + static_cast<ptrdiff_t>(off + data.size()), data.begin());
        off += data.size();
    }
}

// Euclidean projection of v onto the l1 ball of the given radius.
void project_l1_ball(std::vector<double>& v, double radius) {
    double norm1 = 0.0;
    for (double x : v) {
        norm1 += std::abs(x);
    }
    if (norm1 <= radius) {
        return;
    }
    std::vector<double> u(v.size());
    for (size_t i = 0; i < v.size(); ++i) {
        u[i] = std::abs(v[i]);
    }
    std::sort(u.begin(), u.end(), std::greater<double>());
    double cum = 0.0, tau = 0.0;
    size_t rho = 0;
    for (size_t i = 0; i < u.size(); ++i) {
        cum += u[i];
        double candidate = (cum - radius) / static_cast<double>(i + 1);
        if (u[i] > candidate) {
            rho = i + 1;
            tau = candidate;
        }
    }
    (void)rho;
    for (auto& x : v) {
        double mag = std::max(std::abs(x) - tau, 0.0);
        x = x < 0 ? -mag : mag;
    }
}

double full_effectiveness(const FeatureFn& h_prime, const BugInstance& bug) {
    NoGradGuard ng;
    return effectiveness_loss(h_prime, bug).item();
}

}  // namespace

void PatchConfig::validate() const {
    if (lambda_l < 0.0 || lambda_g < 0.0) {
        throw std::invalid_argument("patch: lambda weights must be nonnegative");
    }
    if (epochs < 0 || batch_size < 1) {
        throw std::invalid_argument("patch: epochs must be >= 0 and batch size >= 1");
    }
    if (learning_rate <= 0.0) {
        throw std::invalid_argument("patch: learning rate must be positive");
    }
}

int iterations_per_epoch(int dval_size, int batch_size) {
    return (dval_size + 1 + batch_size - 1) / batch_size;
}

Tensor effectiveness_loss(const FeatureFn& h_prime, const BugInstance& bug) {
    Tensor fb = h_prime(make_single_batch(bug.x_b, bug.channels, bug.height, bug.width));
    Tensor fr = h_prime(make_single_batch(bug.x_r, bug.channels, bug.height, bug.width));
    return scale(cosine_similarity(fb, fr), -1.0);
}

Tensor locality_loss(const Encoder& h_pre, const FeatureFn& h_prime, const ImageDataset& dval,
                     std::span<const double> x_r) {
    if (dval.size() == 0) {
        throw std::invalid_argument("locality_loss: empty validation set");
    }
    const ImageDims dims{h_pre.config().height, h_pre.config().width, h_pre.config().channels};
    PatchItems items = collect_items(dval, x_r, dims);

    std::vector<double> pre_flat;
    {
        NoGradGuard ng;
        Tensor pre_val = encode_dataset(h_pre, dval);
        pre_flat.assign(pre_val.data().begin(), pre_val.data().end());
        auto ref_feat = h_pre.encode(x_r);
        pre_flat.insert(pre_flat.end(), ref_feat.begin(), ref_feat.end());
    }
    int d = h_pre.config().feature_dim;

    Tensor total = Tensor::scalar(0.0);
    for (int start = 0; start < items.count(); start += kChunk) {
        int end = std::min(items.count(), start + kChunk);
        std::vector<int> idx(static_cast<size_t>(end - start));
        std::iota(idx.begin(), idx.end(), start);
        Tensor feats = h_prime(batch_of(items, items.clean, idx));
        std::vector<double> anchor(pre_flat.begin() + static_cast<int64_t>(start) * d,
                                   pre_flat.begin() + static_cast<int64_t>(end) * d);
        Tensor pre = Tensor::from({end - start, d}, std::move(anchor));
        total = add(total, sum(rowwise_dot(feats, pre)));
    }
    return scale(total, -1.0 / static_cast<double>(items.count()));
}

GenLossResult generalizability_loss(const FeatureFn& h_prime, const ImageDataset& dval,
                                    std::span<const double> x_r, const TriggerSpec& t_b,
                                    TriggerLocationMode mode, Rng* rng) {
    GenLossResult out{Tensor::scalar(0.0), false};
    if (t_b.empty()) {
        out.no_trigger = true;
        return out;
    }
    if (dval.size() == 0) {
        throw std::invalid_argument("generalizability_loss: empty validation set");
    }
    ImageDims dims{dval.height, dval.width, dval.channels};
    PatchItems items = collect_items(dval, x_r, dims);
    embed_items(items, t_b, mode, rng);

    Tensor total = Tensor::scalar(0.0);
    for (int start = 0; start < items.count(); start += kChunk) {
        int end = std::min(items.count(), start + kChunk);
        std::vector<int> idx(static_cast<size_t>(end - start));
        std::iota(idx.begin(), idx.end(), start);
        Tensor clean_feats = h_prime(batch_of(items, items.clean, idx));
        Tensor trig_feats = h_prime(batch_of(items, items.triggered, idx));
        total = add(total, sum(rowwise_dot(trig_feats, clean_feats)));
    }
    out.value = scale(total, -1.0 / static_cast<double>(items.count()));
    return out;
}

PatchResult mudjack_patch(const Encoder& h, const BugInstance& bug, const ImageDataset& dval,
                          const TriggerSpec& t_b, const PatchConfig& config, uint64_t seed) {
    config.validate();
    if (dval.size() == 0) {
        throw std::invalid_argument("mudjack_patch: empty validation set");
    }

    PatchResult result{h.clone(), {}, false, 0, t_b.empty()};
    Encoder& model = result.model;
    if (config.epochs == 0) {
        return result;
    }
    model.set_requires_grad(true);
    auto params = model.parameters();
    Optimizer opt(params, {config.optimizer, config.learning_rate});

    const ImageDims dims{h.config().height, h.config().width, h.config().channels};
    PatchItems items = collect_items(dval, bug.x_r, dims);
    const int n_items = items.count();
    const int d = h.config().feature_dim;

    // Pre-patching features are constants of the optimization.
    std::vector<double> pre_flat;
    {
        NoGradGuard ng;
        Tensor pre_val = encode_dataset(h, dval);
        pre_flat.assign(pre_val.data().begin(), pre_val.data().end());
        auto ref_feat = h.encode(bug.x_r);
        pre_flat.insert(pre_flat.end(), ref_feat.begin(), ref_feat.end());
    }

    const bool use_gen = !t_b.empty();
    Rng offset_rng = Rng(seed).split(0x67656e6c);
    if (use_gen) {
        embed_items(items, t_b, config.location_mode, &offset_rng);
    }

    Rng shuffle_rng = Rng(seed).split(0x73687566);
    std::vector<int> order(static_cast<size_t>(n_items));
    std::iota(order.begin(), order.end(), 0);
    const int iterations = iterations_per_epoch(dval.size(), config.batch_size);

    std::vector<double> last_good = flatten_params(params);
    FeatureFn h_prime = model.feature_fn();

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        if (use_gen && config.location_mode == TriggerLocationMode::RandomPerItem && epoch > 0) {
            embed_items(items, t_b, config.location_mode, &offset_rng);
        }
        shuffle_rng.shuffle(order);
        bool aborted = false;
        for (int it = 0; it < iterations; ++it) {
            int start = it * config.batch_size;
            int end = std::min(n_items, start + config.batch_size);
            if (start >= end) {
                break;
            }
            std::span<const int> batch(order.data() + start, static_cast<size_t>(end - start));

            Tape tape;
            TapeScope scope(tape);
            Tensor loss = config.include_effectiveness ? effectiveness_loss(h_prime, bug)
                                                       : Tensor::scalar(0.0);
            Tensor clean_feats, trig_feats;
            bool have_clean = false;
            if (config.lambda_l > 0.0) {
                clean_feats = h_prime(batch_of(items, items.clean, batch));
                have_clean = true;
                std::vector<double> anchor;
                anchor.reserve(batch.size() * static_cast<size_t>(d));
                for (int i : batch) {
                    anchor.insert(anchor.end(), pre_flat.begin() + static_cast<int64_t>(i) * d,
                                  pre_flat.begin() + static_cast<int64_t>(i + 1) * d);
                }
                Tensor pre = Tensor::from({static_cast<int64_t>(batch.size()), d},
                                          std::move(anchor));
                Tensor l_loc = scale(mean(rowwise_dot(clean_feats, pre)), -1.0);
                loss = add(loss, scale(l_loc, config.lambda_l));
            }
            if (use_gen && config.lambda_g > 0.0) {
                if (!have_clean) {
                    clean_feats = h_prime(batch_of(items, items.clean, batch));
                }
                trig_feats = h_prime(batch_of(items, items.triggered, batch));
                Tensor l_gen = scale(mean(rowwise_dot(trig_feats, clean_feats)), -1.0);
                loss = add(loss, scale(l_gen, config.lambda_g));
            }

            if (!std::isfinite(loss.item())) {
                restore_params(params, last_good);
                result.aborted_nonfinite = true;
                aborted = true;
                break;
            }
            backward(loss);
            opt.step();
        }
        if (aborted) {
            break;
        }

        // Full-set loss trace for this epoch.
        TraceRow row;
        row.epoch = epoch + 1;
        {
            NoGradGuard ng;
            row.effectiveness = full_effectiveness(h_prime, bug);
            row.locality = locality_loss(h, h_prime, dval, bug.x_r).item();
            if (use_gen) {
                // Trace reuses this epoch's embedded set.
                Tensor total = Tensor::scalar(0.0);
                for (int start = 0; start < n_items; start += kChunk) {
                    int end = std::min(n_items, start + kChunk);
                    std::vector<int> idx(static_cast<size_t>(end - start));
                    std::iota(idx.begin(), idx.end(), start);
                    Tensor cf = h_prime(batch_of(items, items.clean, idx));
                    Tensor tf = h_prime(batch_of(items, items.triggered, idx));
                    total = add(total, sum(rowwise_dot(tf, cf)));
                }
                row.generalizability = -total.item() / static_cast<double>(n_items);
            }
            row.total = (config.include_effectiveness ? row.effectiveness : 0.0) +
                        config.lambda_l * row.locality + config.lambda_g * row.generalizability;
        }
        result.trace.push_back(row);
        result.epochs_run = epoch + 1;
        last_good = flatten_params(params);
        if (config.epoch_hook) {
            config.epoch_hook(epoch + 1, model, row);
        }
    }

    model.set_requires_grad(false);
    return result;
}

std::vector<std::vector<int>> fine_pruning_channels(const Encoder& h, const BugInstance& bug,
                                                    double prune_fraction) {
    NoGradGuard ng;
    auto params = h.parameters();  // conv1_w, conv1_b, conv2_w, conv2_b, dense_w, dense_b
    Tensor input = make_single_batch(bug.x_r, bug.channels, bug.height, bug.width);
    Tensor pre1 = conv2d(input, params[0], params[1], 1);
    Tensor pre2 = conv2d(maxpool2d(relu(pre1), 2), params[2], params[3], 1);

    auto channel_means = [](const Tensor& act) {
        int64_t c = act.dim(1), hw = act.dim(2) * act.dim(3);
        std::vector<double> means(static_cast<size_t>(c), 0.0);
        const double* p = act.data().data();
        for (int64_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (int64_t i = 0; i < hw; ++i) {
                acc += p[ch * hw + i];
            }
            means[static_cast<size_t>(ch)] = acc / static_cast<double>(hw);
        }
        return means;
    };

    std::vector<std::vector<int>> pruned;
    for (const Tensor& act : {pre1, pre2}) {
        auto means = channel_means(act);
        int c = static_cast<int>(means.size());
        int count = static_cast<int>(std::ceil(prune_fraction * c));
        std::vector<int> idx(static_cast<size_t>(c));
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](int a, int b) {
            if (means[static_cast<size_t>(a)] != means[static_cast<size_t>(b)]) {
                return means[static_cast<size_t>(a)] < means[static_cast<size_t>(b)];
            }
            return a < b;
        });
        idx.resize(static_cast<size_t>(count));
        std::sort(idx.begin(), idx.end());
        pruned.push_back(std::move(idx));
    }
    return pruned;
}

namespace {

void zero_conv_channels(Tensor& weight, Tensor& bias, const std::vector<int>& channels) {
    auto w = weight.data_mut();
    auto b = bias.data_mut();
    int64_t per_channel = weight.numel() / weight.dim(0);
    for (int ch : channels) {
        std::fill(w.begin() + ch * per_channel, w.begin() + (ch + 1) * per_channel, 0.0);
        b[static_cast<size_t>(ch)] = 0.0;
    }
}

PatchResult fine_pruning_patch(const Encoder& h, const BugInstance& bug,
                               const BaselineConfig& config, const ImageDataset* pretrain,
                               uint64_t seed) {
    if (pretrain == nullptr) {
        throw std::invalid_argument("fine-pruning: needs the pretrain split");
    }
    PatchResult result{h.clone(), {}, false, 0, false};
    Encoder& model = result.model;

    auto pruned = fine_pruning_channels(h, bug, config.prune_fraction);
    auto params = model.parameters();
    zero_conv_channels(params[0], params[1], pruned[0]);
    zero_conv_channels(params[2], params[3], pruned[1]);

    // Utility-recovery fine-tune on the pretrain split; pruned channels are
    // re-zeroed after every step so they stay pruned.
    model.set_requires_grad(true);
    Rng init_rng = Rng(seed).split(0x66707275);
    int num_classes = pretrain->num_classes;
    int d = h.config().feature_dim;
    Tensor head_w = Tensor::uniform({d, num_classes}, -std::sqrt(6.0 / (d + num_classes)),
                                    std::sqrt(6.0 / (d + num_classes)), init_rng, true);
    Tensor head_b = Tensor::zeros({num_classes}, true);
    auto all_params = model.parameters();
    all_params.push_back(head_w);
    all_params.push_back(head_b);
    Optimizer opt(all_params, {OptimizerKind::Adam, config.post_prune_learning_rate});

    Rng shuffle_rng = Rng(seed).split(0x73687566);
    std::vector<int> order(static_cast<size_t>(pretrain->size()));
    std::iota(order.begin(), order.end(), 0);
    constexpr int kBatch = 64;
    FeatureFn h_prime = model.feature_fn();
    for (int epoch = 0; epoch < config.post_prune_epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (int start = 0; start < pretrain->size(); start += kBatch) {
            int end = std::min(pretrain->size(), start + kBatch);
            std::vector<int> batch(order.begin() + start, order.begin() + end);
            std::vector<int> labels;
            labels.reserve(batch.size());
            for (int i : batch) {
                labels.push_back(pretrain->labels[static_cast<size_t>(i)]);
            }
            Tape tape;
            TapeScope scope(tape);
            Tensor feats = model.forward(make_batch(*pretrain, batch));
            Tensor logits = add_rowwise(matmul(feats, head_w), head_b);
            Tensor loss = softmax_cross_entropy(logits, labels);
            if (!std::isfinite(loss.item())) {
                throw std::runtime_error("fine-pruning: non-finite loss");
            }
            backward(loss);
            opt.step();
            zero_conv_channels(params[0], params[1], pruned[0]);
            zero_conv_channels(params[2], params[3], pruned[1]);
            if (config.step_hook) {
                config.step_hook(model);
            }
        }
        TraceRow row;
        row.epoch = epoch + 1;
        row.effectiveness = full_effectiveness(h_prime, bug);
        row.total = row.effectiveness;
        result.trace.push_back(row);
        result.epochs_run = epoch + 1;
    }
    model.set_requires_grad(false);
    return result;
}

}  // namespace

PatchResult baseline_patch(const Encoder& h, const BugInstance& bug, const BaselineConfig& config,
                           const ImageDataset* pretrain, uint64_t seed) {
    if (config.method == BaselineMethod::FinePruning) {
        return fine_pruning_patch(h, bug, config, pretrain, seed);
    }

    PatchResult result{h.clone(), {}, false, 0, false};
    Encoder& model = result.model;
    model.set_requires_grad(true);
    auto params = model.parameters();
    Optimizer opt(params, {OptimizerKind::Adam, config.learning_rate});
    FeatureFn h_prime = model.feature_fn();

    const std::vector<double> origin = flatten_params(params);
    double l1_radius = config.l1_delta_scale * std::sqrt(static_cast<double>(origin.size()));

    auto project = [&]() {
        if (config.method == BaselineMethod::FT) {
            return;
        }
        std::vector<double> flat = flatten_params(params);
        std::vector<double> delta(flat.size());
        for (size_t i = 0; i < flat.size(); ++i) {
            delta[i] = flat[i] - origin[i];
        }
        if (config.method == BaselineMethod::FTL2) {
            double norm = 0.0;
            for (double v : delta) {
                norm += v * v;
            }
            norm = std::sqrt(norm);
            if (norm > config.delta) {
                double s = config.delta / norm;
                for (auto& v : delta) {
                    v *= s;
                }
            }
        } else if (config.method == BaselineMethod::FTLinf) {
            for (auto& v : delta) {
                v = std::clamp(v, -config.delta, config.delta);
            }
        } else if (config.method == BaselineMethod::Unlearning) {
            project_l1_ball(delta, l1_radius);
        }
        for (size_t i = 0; i < flat.size(); ++i) {
            flat[i] = origin[i] + delta[i];
        }
        restore_params(params, flat);
    };

    std::vector<double> last_good = origin;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        bool aborted = false;
        for (int step = 0; step < config.steps_per_epoch; ++step) {
            Tape tape;
            TapeScope scope(tape);
            Tensor loss = effectiveness_loss(h_prime, bug);
            if (!std::isfinite(loss.item())) {
                restore_params(params, last_good);
                result.aborted_nonfinite = true;
                aborted = true;
                break;
            }
            backward(loss);
            opt.step();
            project();
            if (config.step_hook) {
                config.step_hook(model);
            }
        }
        if (aborted) {
            break;
        }
        TraceRow row;
        row.epoch = epoch + 1;
        row.effectiveness = full_effectiveness(h_prime, bug);
        row.total = row.effectiveness;
        result.trace.push_back(row);
        result.epochs_run = epoch + 1;
        last_good = flatten_params(params);
    }
    model.set_requires_grad(false);
    return result;
}

std::vector<SequenceStage> patch_sequence(const Encoder& h, const std::vector<BugInstance>& bugs,
                                          const SequenceDeps& deps, uint64_t seed) {
    if (deps.dval == nullptr || deps.downstream_train == nullptr) {
        throw std::invalid_argument("patch_sequence: missing validation or downstream train set");
    }
    std::vector<SequenceStage> stages;
    if (bugs.empty()) {
        return stages;
    }
    Encoder current = h.clone();
    Classifier classifier = train_downstream(current, *deps.downstream_train, deps.downstream,
                                             seed);
    const ImageDims dims{h.config().height, h.config().width, h.config().channels};
    for (size_t stage = 0; stage < bugs.size(); ++stage) {
        const BugInstance& bug = bugs[stage];
        if (!bug_instance_holds(bug, classifier, current)) {
            throw std::invalid_argument("patch_sequence: bug " + std::to_string(stage) +
                                        " no longer satisfies the bug conditions");
        }
        auto forensic = reverse_engineer_trigger(current.feature_fn(), bug.x_b, bug.x_r, dims,
                                                 deps.forensics);
        PatchResult patched = mudjack_patch(current, bug, *deps.dval, forensic.reversed.trigger,
                                            deps.patch, seed + stage + 1);
        current = patched.model;
        classifier = train_downstream(current, *deps.downstream_train, deps.downstream,
                                      seed + stage + 1);
        stages.push_back(SequenceStage{current, classifier, bug, forensic.reversed.trigger});
    }
    return stages;
}

std::vector<SequenceStage> patch_sequence_from_pool(const Encoder& h,
                                                    const ImageDataset& bug_pool,
                                                    const ImageDataset& ref_pool, int stages,
                                                    const SequenceDeps& deps, uint64_t seed) {
    if (deps.dval == nullptr || deps.downstream_train == nullptr) {
        throw std::invalid_argument("patch_sequence: missing validation or downstream train set");
    }
    std::vector<SequenceStage> out;
    Encoder current = h.clone();
    Classifier classifier = train_downstream(current, *deps.downstream_train, deps.downstream,
                                             seed);
    const ImageDims dims{h.config().height, h.config().width, h.config().channels};
    for (int stage = 0; stage < stages; ++stage) {
        auto bug = make_bug_instance(classifier, current, bug_pool, ref_pool,
                                     BugProvenance::Backdoor);
        if (!bug.has_value()) {
            break;  // nothing left to report
        }
        auto forensic = reverse_engineer_trigger(current.feature_fn(), bug->x_b, bug->x_r, dims,
                                                 deps.forensics);
        PatchResult patched = mudjack_patch(current, *bug, *deps.dval,
                                            forensic.reversed.trigger, deps.patch,
                                            seed + static_cast<uint64_t>(stage) + 1);
        current = patched.model;
        classifier = train_downstream(current, *deps.downstream_train, deps.downstream,
                                      seed + static_cast<uint64_t>(stage) + 1);
        out.push_back(SequenceStage{current, classifier, *bug, forensic.reversed.trigger});
    }
    return out;
}

Classifier patch_downstream_only(const Classifier& f, const Encoder& h, const BugInstance& bug,
                                 const DownstreamPatchConfig& config,
                                 const ImageDataset* downstream_train, uint64_t seed) {
    uint64_t before = encoder_hash(h);
    Classifier patched = f.clone();
    patched.set_requires_grad(true);
    Optimizer opt(patched.parameters(), {OptimizerKind::Adam, config.learning_rate});

    std::vector<double> features;
    std::vector<int> labels;
    int d = h.config().feature_dim;
    if (config.variant == DownstreamPatchVariant::FTWithTrain) {
        if (downstream_train == nullptr) {
            throw std::invalid_argument("patch_downstream_only: FT-with-train needs the train set");
        }
        NoGradGuard ng;
        Tensor feats = encode_dataset(h, *downstream_train);
        features.assign(feats.data().begin(), feats.data().end());
        labels = downstream_train->labels;
    }
    auto bug_feat = h.encode(bug.x_b);
    features.insert(features.end(), bug_feat.begin(), bug_feat.end());
    labels.push_back(bug.true_label);

    int n = static_cast<int>(labels.size());
    Rng shuffle_rng = Rng(seed).split(0x64737066);
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (int start = 0; start < n; start += config.batch_size) {
            int end = std::min(n, start + config.batch_size);
            int bn = end - start;
            std::vector<double> bf(static_cast<size_t>(bn) * static_cast<size_t>(d));
            std::vector<int> bl(static_cast<size_t>(bn));
            for (int i = 0; i < bn; ++i) {
                int src = order[static_cast<size_t>(start + i)];
                std::copy(features.begin() + static_cast<int64_t>(src) * d,
                          features.begin() + static_cast<int64_t>(src + 1) * d,
                          bf.begin() + static_cast<int64_t>(i) * d);
                bl[static_cast<size_t>(i)] = labels[static_cast<size_t>(src)];
            }
            Tape tape;
            TapeScope scope(tape);
            Tensor logits = patched.forward(Tensor::from({bn, d}, std::move(bf)));
            Tensor loss = softmax_cross_entropy(logits, bl);
            backward(loss);
            opt.step();
        }
    }
    patched.set_requires_grad(false);
    if (encoder_hash(h) != before) {
        throw std::runtime_error("patch_downstream_only: encoder changed while frozen");
    }
    return patched;
}

std::string trace_csv(const std::vector<TraceRow>& trace) {
    std::string text = "epoch,L_e,L_l,L_g,L\n";
    for (const auto& row : trace) {
        text += std::to_string(row.epoch) + "," + format_double(row.effectiveness, 9) + "," +
                format_double(row.locality, 9) + "," + format_double(row.generalizability, 9) +
                "," + format_double(row.total, 9) + "\n";
    }
    return text;
}

}  // namespace mudjack
