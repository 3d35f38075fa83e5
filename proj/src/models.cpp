#include "mudjack/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "mudjack/artifact_io.hpp"

namespace mudjack {

namespace {

Tensor init_uniform(Shape shape, double limit, Rng& rng) {
    return Tensor::uniform(std::move(shape), -limit, limit, rng);
}

double conv_limit(int fan_in) { return std::sqrt(6.0 / fan_in); }
double dense_limit(int fan_in, int fan_out) { return std::sqrt(6.0 / (fan_in + fan_out)); }

std::vector<int> iota_indices(int n) {
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
}

}  // namespace

Encoder::Encoder(const EncoderConfig& config, Rng& rng) : config_(config) {
    int c = config.channels, c1 = config.conv1_channels, c2 = config.conv2_channels;
    if (config.height % 4 != 0 || config.width % 4 != 0) {
        throw std::invalid_argument("encoder: input height/width must be divisible by 4");
    }
    conv1_w_ = init_uniform({c1, c, 3, 3}, conv_limit(c * 9), rng);
    conv1_b_ = Tensor::zeros({c1});
    conv2_w_ = init_uniform({c2, c1, 3, 3}, conv_limit(c1 * 9), rng);
    conv2_b_ = Tensor::zeros({c2});
    int flat = c2 * (config.height / 4) * (config.width / 4);
    dense_w_ = init_uniform({flat, config.feature_dim}, dense_limit(flat, config.feature_dim), rng);
    dense_b_ = Tensor::zeros({config.feature_dim});
}

Tensor Encoder::forward(const Tensor& batch) const {
    if (batch.rank() != 4 || batch.dim(1) != config_.channels ||
        batch.dim(2) != config_.height || batch.dim(3) != config_.width) {
        throw std::invalid_argument("encoder: input shape " + shape_str(batch.shape()) +
                                    " does not match configured shape [N, " +
                                    std::to_string(config_.channels) + ", " +
                                    std::to_string(config_.height) + ", " +
                                    std::to_string(config_.width) + "]");
    }
    Tensor p1 = maxpool2d(relu(conv2d(batch, conv1_w_, conv1_b_, 1)), 2);
    Tensor p2 = maxpool2d(relu(conv2d(p1, conv2_w_, conv2_b_, 1)), 2);
    int64_t flat = dense_w_.dim(0);
    Tensor z = add_rowwise(matmul(reshape(p2, {batch.dim(0), flat}), dense_w_), dense_b_);
    return l2_normalize_rows(z);
}

std::vector<Tensor> Encoder::parameters() const {
    return {conv1_w_, conv1_b_, conv2_w_, conv2_b_, dense_w_, dense_b_};
}

std::vector<std::pair<std::string, Tensor>> Encoder::named_parameters() const {
    return {{"conv1.weight", conv1_w_}, {"conv1.bias", conv1_b_}, {"conv2.weight", conv2_w_},
            {"conv2.bias", conv2_b_},   {"dense.weight", dense_w_}, {"dense.bias", dense_b_}};
}

void Encoder::set_requires_grad(bool v) {
    for (auto& p : parameters()) {
        p.set_requires_grad(v);
    }
}

Encoder Encoder::clone() const {
    Encoder copy;
    copy.config_ = config_;
    copy.conv1_w_ = conv1_w_.clone();
    copy.conv1_b_ = conv1_b_.clone();
    copy.conv2_w_ = conv2_w_.clone();
    copy.conv2_b_ = conv2_b_.clone();
    copy.dense_w_ = dense_w_.clone();
    copy.dense_b_ = dense_b_.clone();
    return copy;
}

FeatureFn Encoder::feature_fn() const {
    Encoder self = *this;  // shallow copy shares parameters
    return [self](const Tensor& batch) { return self.forward(batch); };
}

std::vector<double> Encoder::encode(std::span<const double> image) const {
    NoGradGuard ng;
    Tensor batch = make_single_batch(image, config_.channels, config_.height, config_.width);
    Tensor f = forward(batch);
    return std::vector<double>(f.data().begin(), f.data().end());
}

Classifier::Classifier(const ClassifierConfig& config, Rng& rng) : config_(config) {
    w1_ = init_uniform({config.input_dim, config.hidden}, dense_limit(config.input_dim, config.hidden),
                       rng);
    b1_ = Tensor::zeros({config.hidden});
    w2_ = init_uniform({config.hidden, config.num_classes},
                       dense_limit(config.hidden, config.num_classes), rng);
    b2_ = Tensor::zeros({config.num_classes});
}

Tensor Classifier::forward(const Tensor& features) const {
    if (features.rank() != 2 || features.dim(1) != config_.input_dim) {
        throw std::invalid_argument("classifier: features shape " + shape_str(features.shape()) +
                                    " does not match input dim " +
                                    std::to_string(config_.input_dim));
    }
    Tensor h = relu(add_rowwise(matmul(features, w1_), b1_));
    return add_rowwise(matmul(h, w2_), b2_);
}

std::vector<Tensor> Classifier::parameters() const { return {w1_, b1_, w2_, b2_}; }

std::vector<std::pair<std::string, Tensor>> Classifier::named_parameters() const {
    return {{"fc1.weight", w1_}, {"fc1.bias", b1_}, {"fc2.weight", w2_}, {"fc2.bias", b2_}};
}

void Classifier::set_requires_grad(bool v) {
    for (auto& p : parameters()) {
        p.set_requires_grad(v);
    }
}

Classifier Classifier::clone() const {
    Classifier copy;
    copy.config_ = config_;
    copy.w1_ = w1_.clone();
    copy.b1_ = b1_.clone();
    copy.w2_ = w2_.clone();
    copy.b2_ = b2_.clone();
    return copy;
}

Tensor encode_dataset(const Encoder& h, const ImageDataset& ds, int batch) {
    NoGradGuard ng;
    int n = ds.size();
    int d = h.config().feature_dim;
    std::vector<double> out(static_cast<size_t>(n) * static_cast<size_t>(d));
    std::vector<int> idx;
    for (int start = 0; start < n; start += batch) {
        int end = std::min(n, start + batch);
        idx.resize(static_cast<size_t>(end - start));
        std::iota(idx.begin(), idx.end(), start);
        Tensor f = h.forward(make_batch(ds, idx));
        std::copy(f.data().begin(), f.data().end(),
                  out.begin() + static_cast<int64_t>(start) * d);
    }
    return Tensor::from({n, d}, std::move(out));
}

Tensor encode_images(const Encoder& h, const std::vector<std::vector<double>>& images) {
    NoGradGuard ng;
    const auto& cfg = h.config();
    Tensor batch = make_batch_from_images(images, cfg.channels, cfg.height, cfg.width);
    return h.forward(batch);
}

namespace {

Encoder pretrain_supervised_proxy(const ImageDataset& data, const PretrainConfig& config,
                                  uint64_t seed) {
    Rng init_rng = Rng(seed).split(0x70726f78);  // init stream
    Encoder enc(config.encoder, init_rng);
    Tensor head_w = init_uniform({config.encoder.feature_dim, data.num_classes},
                                 dense_limit(config.encoder.feature_dim, data.num_classes),
                                 init_rng);
    Tensor head_b = Tensor::zeros({data.num_classes});

    enc.set_requires_grad(true);
    head_w.set_requires_grad(true);
    head_b.set_requires_grad(true);

    auto params = enc.parameters();
    params.push_back(head_w);
    params.push_back(head_b);
    Optimizer opt(params, {OptimizerKind::Adam, config.learning_rate});

    Rng shuffle_rng = Rng(seed).split(0x73687566);
    auto order = iota_indices(data.size());
    std::vector<int> batch_idx;
    std::vector<int> batch_labels;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (int start = 0; start < data.size(); start += config.batch_size) {
            int end = std::min(data.size(), start + config.batch_size);
            batch_idx.assign(order.begin() + start, order.begin() + end);
            batch_labels.clear();
            for (int i : batch_idx) {
                batch_labels.push_back(data.labels[static_cast<size_t>(i)]);
            }
            Tape tape;
            TapeScope scope(tape);
            Tensor feats = enc.forward(make_batch(data, batch_idx));
            Tensor logits = add_rowwise(matmul(feats, head_w), head_b);
            Tensor loss = softmax_cross_entropy(logits, batch_labels);
            if (!std::isfinite(loss.item())) {
                throw std::runtime_error("pretrain: non-finite loss at epoch " +
                                         std::to_string(epoch));
            }
            backward(loss);
            opt.step();
        }
    }
    enc.set_requires_grad(false);
    return enc;
}

// Positive pair = item and its augmented copy; negatives = other batch items.
Encoder pretrain_contrastive_lite(const ImageDataset& data, const PretrainConfig& config,
                                  uint64_t seed) {
    Rng init_rng = Rng(seed).split(0x636f6e74);
    Encoder enc(config.encoder, init_rng);
    enc.set_requires_grad(true);
    Optimizer opt(enc.parameters(), {OptimizerKind::Adam, config.learning_rate});

    Rng shuffle_rng = Rng(seed).split(0x73687566);
    Rng aug_rng = Rng(seed).split(0x61756721);
    const int hh = data.height, ww = data.width, cc = data.channels;

    auto augment = [&](std::span<const double> img, std::vector<double>& out) {
        int dy = aug_rng.randint(5) - 2;
        int dx = aug_rng.randint(5) - 2;
        double cscale[3] = {aug_rng.uniform(0.9, 1.1), aug_rng.uniform(0.9, 1.1),
                            aug_rng.uniform(0.9, 1.1)};
        out.resize(img.size());
        for (int c = 0; c < cc; ++c) {
            for (int y = 0; y < hh; ++y) {
                for (int x = 0; x < ww; ++x) {
                    int sy = std::clamp(y + dy, 0, hh - 1);
                    int sx = std::clamp(x + dx, 0, ww - 1);
                    double v = img[static_cast<size_t>((c * hh + sy) * ww + sx)];
                    v = v * cscale[c % 3] + aug_rng.uniform(-0.02, 0.02);
                    out[static_cast<size_t>((c * hh + y) * ww + x)] = std::clamp(v, 0.0, 1.0);
                }
            }
        }
    };

    auto order = iota_indices(data.size());
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (int start = 0; start + 1 < data.size(); start += config.batch_size) {
            int end = std::min(data.size(), start + config.batch_size);
            int n = end - start;
            std::vector<int> batch_idx(order.begin() + start, order.begin() + end);
            std::vector<std::vector<double>> views(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i) {
                augment(data.image(batch_idx[static_cast<size_t>(i)]), views[static_cast<size_t>(i)]);
            }
            std::vector<int> diag(static_cast<size_t>(n));
            std::iota(diag.begin(), diag.end(), 0);

            Tape tape;
            TapeScope scope(tape);
            Tensor f1 = enc.forward(make_batch(data, batch_idx));
            Tensor f2 = enc.forward(make_batch_from_images(views, cc, hh, ww));
            Tensor sims = scale(matmul(f1, transpose2d(f2)), 1.0 / config.temperature);
            Tensor loss = softmax_cross_entropy(sims, diag);
            if (!std::isfinite(loss.item())) {
                throw std::runtime_error("pretrain: non-finite loss at epoch " +
                                         std::to_string(epoch));
            }
            backward(loss);
            opt.step();
        }
    }
    enc.set_requires_grad(false);
    return enc;
}

}  // namespace

Encoder pretrain_encoder(const ImageDataset& data, const PretrainConfig& config, uint64_t seed) {
    if (data.size() == 0) {
        throw std::invalid_argument("pretrain: empty dataset");
    }
    std::set<int> distinct(data.labels.begin(), data.labels.end());
    if (distinct.size() < 2) {
        throw std::invalid_argument("pretrain: degenerate supervision, need at least 2 classes");
    }
    if (config.mode == PretrainConfig::Mode::ContrastiveLite) {
        return pretrain_contrastive_lite(data, config, seed);
    }
    return pretrain_supervised_proxy(data, config, seed);
}

Classifier train_classifier_on_features(const Tensor& features, const std::vector<int>& labels,
                                        int num_classes, const DownstreamTrainConfig& config,
                                        uint64_t seed) {
    if (features.rank() != 2 || features.dim(0) != static_cast<int64_t>(labels.size())) {
        throw std::invalid_argument("train_classifier: features/labels size mismatch");
    }
    for (int label : labels) {
        if (label < 0 || label >= num_classes) {
            throw std::invalid_argument("train_classifier: label " + std::to_string(label) +
                                        " outside class range [0, " + std::to_string(num_classes) +
                                        ")");
        }
    }
    ClassifierConfig ccfg;
    ccfg.input_dim = static_cast<int>(features.dim(1));
    ccfg.hidden = config.hidden;
    ccfg.num_classes = num_classes;
    Rng init_rng = Rng(seed).split(0x636c6173);
    Classifier clf(ccfg, init_rng);
    clf.set_requires_grad(true);
    Optimizer opt(clf.parameters(), {OptimizerKind::Adam, config.learning_rate});

    int n = static_cast<int>(labels.size());
    int d = ccfg.input_dim;
    Rng shuffle_rng = Rng(seed).split(0x73687566);
    auto order = iota_indices(n);
    const double* fp = features.data().data();
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (int start = 0; start < n; start += config.batch_size) {
            int end = std::min(n, start + config.batch_size);
            int bn = end - start;
            std::vector<double> bf(static_cast<size_t>(bn) * static_cast<size_t>(d));
            std::vector<int> bl(static_cast<size_t>(bn));
            for (int i = 0; i < bn; ++i) {
                int src = order[static_cast<size_t>(start + i)];
                std::copy(fp + static_cast<int64_t>(src) * d, fp + static_cast<int64_t>(src + 1) * d,
                          bf.begin() + static_cast<int64_t>(i) * d);
                bl[static_cast<size_t>(i)] = labels[static_cast<size_t>(src)];
            }
            Tape tape;
            TapeScope scope(tape);
            Tensor logits = clf.forward(Tensor::from({bn, d}, std::move(bf)));
            Tensor loss = softmax_cross_entropy(logits, bl);
            if (!std::isfinite(loss.item())) {
                throw std::runtime_error("train_classifier: non-finite loss");
            }
            backward(loss);
            opt.step();
        }
    }
    clf.set_requires_grad(false);
    return clf;
}

Classifier train_downstream(const Encoder& h, const ImageDataset& train,
                            const DownstreamTrainConfig& config, uint64_t seed) {
    Tensor feats = encode_dataset(h, train);
    return train_classifier_on_features(feats, train.labels, train.num_classes, config, seed);
}

int classify_features(const Classifier& f, std::span<const double> feature) {
    NoGradGuard ng;
    Tensor batch = Tensor::from({1, static_cast<int64_t>(feature.size())},
                                std::vector<double>(feature.begin(), feature.end()));
    Tensor logits = f.forward(batch);
    auto data = logits.data();
    int best = 0;
    for (int j = 1; j < static_cast<int>(data.size()); ++j) {
        if (data[static_cast<size_t>(j)] > data[static_cast<size_t>(best)]) {
            best = j;  // ties keep the smallest class index
        }
    }
    return best;
}

int classify(const Classifier& f, const Encoder& h, std::span<const double> image) {
    return classify_features(f, h.encode(image));
}

std::vector<int> classify_dataset(const Classifier& f, const Encoder& h, const ImageDataset& ds,
                                  int batch) {
    NoGradGuard ng;
    std::vector<int> preds(static_cast<size_t>(ds.size()));
    std::vector<int> idx;
    for (int start = 0; start < ds.size(); start += batch) {
        int end = std::min(ds.size(), start + batch);
        idx.resize(static_cast<size_t>(end - start));
        std::iota(idx.begin(), idx.end(), start);
        Tensor logits = f.forward(h.forward(make_batch(ds, idx)));
        int k = static_cast<int>(logits.dim(1));
        const double* lp = logits.data().data();
        for (int i = 0; i < end - start; ++i) {
            const double* row = lp + static_cast<int64_t>(i) * k;
            int best = 0;
            for (int j = 1; j < k; ++j) {
                if (row[j] > row[best]) {
                    best = j;
                }
            }
            preds[static_cast<size_t>(start + i)] = best;
        }
    }
    return preds;
}

// ---- checkpoints -----------------------------------------------------------

const NamedTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) {
            return &t;
        }
    }
    return nullptr;
}

std::vector<uint8_t> checkpoint_to_bytes(const Checkpoint& ckpt) {
    ByteWriter w;
    w.str("MJCK");
    w.u32(1);
    w.u8(ckpt.kind);
    w.u32(static_cast<uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) {
        w.u16(static_cast<uint16_t>(t.name.size()));
        w.str(t.name);
        w.u8(static_cast<uint8_t>(t.shape.size()));
        for (int64_t d : t.shape) {
            w.u32(static_cast<uint32_t>(d));
        }
        for (float v : t.values) {
            w.f32(v);
        }
    }
    return w.take();
}

Checkpoint checkpoint_from_bytes(std::span<const uint8_t> bytes) {
    constexpr int64_t kMaxElems = int64_t{1} << 28;
    ByteReader r(bytes);
    auto magic = r.raw(4);
    if (std::string(magic.begin(), magic.end()) != "MJCK") {
        throw FileFormatError(IoErrorCode::BadMagic, "checkpoint: bad magic");
    }
    uint32_t version = r.u32();
    if (version != 1) {
        throw FileFormatError(IoErrorCode::BadVersion,
                              "checkpoint: unsupported version " + std::to_string(version));
    }
    Checkpoint ckpt;
    ckpt.kind = r.u8();
    if (ckpt.kind > 1) {
        throw FileFormatError(IoErrorCode::BadKind,
                              "checkpoint: unknown kind tag " + std::to_string(ckpt.kind));
    }
    uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        uint16_t name_len = r.u16();
        if (name_len == 0) {
            throw FileFormatError(IoErrorCode::BadName, "checkpoint: empty tensor name");
        }
        auto name_bytes = r.raw(name_len);
        t.name.assign(name_bytes.begin(), name_bytes.end());
        uint8_t rank = r.u8();
        if (rank > 8) {
            throw FileFormatError(IoErrorCode::DimensionOverflow,
                                  "checkpoint: rank " + std::to_string(rank) + " exceeds limit 8");
        }
        int64_t numel = 1;
        for (uint8_t d = 0; d < rank; ++d) {
            uint32_t dim = r.u32();
            if (dim == 0 || numel > kMaxElems / std::max<int64_t>(1, dim)) {
                throw FileFormatError(IoErrorCode::DimensionOverflow,
                                      "checkpoint: dimension overflow in tensor " + t.name);
            }
            t.shape.push_back(dim);
            numel *= dim;
        }
        t.values.resize(static_cast<size_t>(numel));
        for (auto& v : t.values) {
            v = r.f32();
        }
        ckpt.tensors.push_back(std::move(t));
    }
    if (!r.done()) {
        throw FileFormatError(IoErrorCode::TrailingData,
                              "checkpoint: trailing bytes after payload");
    }
    return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    write_file_bytes(path, checkpoint_to_bytes(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) {
    auto bytes = read_file_bytes(path);
    return checkpoint_from_bytes(bytes);
}

namespace {

NamedTensor pack_tensor(const std::string& name, const Tensor& t) {
    NamedTensor out;
    out.name = name;
    out.shape = t.shape();
    out.values.reserve(static_cast<size_t>(t.numel()));
    for (double v : t.data()) {
        out.values.push_back(static_cast<float>(v));
    }
    return out;
}

Tensor unpack_tensor(const Checkpoint& ckpt, const std::string& name) {
    const NamedTensor* t = ckpt.find(name);
    if (t == nullptr) {
        throw FileFormatError(IoErrorCode::BadName, "checkpoint: missing tensor " + name);
    }
    std::vector<double> data(t->values.begin(), t->values.end());
    return Tensor::from(t->shape, std::move(data));
}

}  // namespace

Checkpoint checkpoint_from_encoder(const Encoder& h) {
    Checkpoint ckpt;
    ckpt.kind = 0;
    const auto& cfg = h.config();
    ckpt.tensors.push_back(NamedTensor{
        "input_shape",
        {3},
        {static_cast<float>(cfg.height), static_cast<float>(cfg.width),
         static_cast<float>(cfg.channels)}});
    for (const auto& [name, tensor] : h.named_parameters()) {
        ckpt.tensors.push_back(pack_tensor(name, tensor));
    }
    return ckpt;
}

Encoder encoder_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.kind != 0) {
        throw FileFormatError(IoErrorCode::BadKind, "checkpoint: expected encoder kind 0");
    }
    const NamedTensor* meta = ckpt.find("input_shape");
    if (meta == nullptr || meta->values.size() != 3) {
        throw FileFormatError(IoErrorCode::BadName, "checkpoint: missing tensor input_shape");
    }
    EncoderConfig cfg;
    cfg.height = static_cast<int>(meta->values[0]);
    cfg.width = static_cast<int>(meta->values[1]);
    cfg.channels = static_cast<int>(meta->values[2]);

    Tensor c1w = unpack_tensor(ckpt, "conv1.weight");
    Tensor c2w = unpack_tensor(ckpt, "conv2.weight");
    Tensor dw = unpack_tensor(ckpt, "dense.weight");
    cfg.conv1_channels = static_cast<int>(c1w.dim(0));
    cfg.conv2_channels = static_cast<int>(c2w.dim(0));
    cfg.feature_dim = static_cast<int>(dw.dim(1));

    Rng dummy(0);
    Encoder enc(cfg, dummy);
    enc.conv1_w_ = c1w;
    enc.conv1_b_ = unpack_tensor(ckpt, "conv1.bias");
    enc.conv2_w_ = c2w;
    enc.conv2_b_ = unpack_tensor(ckpt, "conv2.bias");
    enc.dense_w_ = dw;
    enc.dense_b_ = unpack_tensor(ckpt, "dense.bias");
    return enc;
}

Checkpoint checkpoint_from_classifier(const Classifier& f) {
    Checkpoint ckpt;
    ckpt.kind = 1;
    for (const auto& [name, tensor] : f.named_parameters()) {
        ckpt.tensors.push_back(pack_tensor(name, tensor));
    }
    return ckpt;
}

Classifier classifier_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.kind != 1) {
        throw FileFormatError(IoErrorCode::BadKind, "checkpoint: expected classifier kind 1");
    }
    Tensor w1 = unpack_tensor(ckpt, "fc1.weight");
    Tensor w2 = unpack_tensor(ckpt, "fc2.weight");
    ClassifierConfig cfg;
    cfg.input_dim = static_cast<int>(w1.dim(0));
    cfg.hidden = static_cast<int>(w1.dim(1));
    cfg.num_classes = static_cast<int>(w2.dim(1));
    Rng dummy(0);
    Classifier clf(cfg, dummy);
    clf.w1_ = w1;
    clf.b1_ = unpack_tensor(ckpt, "fc1.bias");
    clf.w2_ = w2;
    clf.b2_ = unpack_tensor(ckpt, "fc2.bias");
    return clf;
}

uint64_t encoder_hash(const Encoder& h) {
    auto bytes = checkpoint_to_bytes(checkpoint_from_encoder(h));
    return fnv1a64(bytes);
}

uint64_t classifier_hash(const Classifier& f) {
    auto bytes = checkpoint_to_bytes(checkpoint_from_classifier(f));
    return fnv1a64(bytes);
}

}  // namespace mudjack
