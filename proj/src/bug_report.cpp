#include "mudjack/bug_report.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mudjack/artifact_io.hpp"
#include "mudjack/optim.hpp"

namespace mudjack {

BugInstance BugInstance::create(const Classifier& f, const Encoder& h, std::vector<double> x_b,
                                std::vector<double> x_r, int true_label,
                                BugProvenance provenance) {
    BugInstance bug;
    bug.height = h.config().height;
    bug.width = h.config().width;
    bug.channels = h.config().channels;
    bug.x_b = std::move(x_b);
    bug.x_r = std::move(x_r);
    bug.true_label = true_label;
    bug.provenance = provenance;
    bug.observed_label = classify(f, h, bug.x_b);
    bug.encoder_hash = mudjack::encoder_hash(h);
    bug.classifier_hash = mudjack::classifier_hash(f);
    if (bug.observed_label == true_label) {
        throw std::invalid_argument("bug instance: x_b is correctly classified");
    }
    if (classify(f, h, bug.x_r) != true_label) {
        throw std::invalid_argument("bug instance: x_r is not correctly classified");
    }
    return bug;
}

bool bug_instance_holds(const BugInstance& bug, const Classifier& f, const Encoder& h) {
    return classify(f, h, bug.x_b) != bug.true_label &&
           classify(f, h, bug.x_r) == bug.true_label;
}

std::optional<BugInstance> make_bug_instance(const Classifier& f, const Encoder& h,
                                             const ImageDataset& bug_pool,
                                             const ImageDataset& ref_pool,
                                             BugProvenance provenance) {
    auto bug_preds = classify_dataset(f, h, bug_pool);
    auto ref_preds = classify_dataset(f, h, ref_pool);
    for (int i = 0; i < bug_pool.size(); ++i) {
        int y = bug_pool.labels[static_cast<size_t>(i)];
        if (bug_preds[static_cast<size_t>(i)] == y) {
            continue;
        }
        for (int j = 0; j < ref_pool.size(); ++j) {
            if (ref_pool.labels[static_cast<size_t>(j)] != y ||
                ref_preds[static_cast<size_t>(j)] != y) {
                continue;
            }
            auto img_b = bug_pool.image(i);
            auto img_r = ref_pool.image(j);
            return BugInstance::create(f, h,
                                       std::vector<double>(img_b.begin(), img_b.end()),
                                       std::vector<double>(img_r.begin(), img_r.end()), y,
                                       provenance);
        }
    }
    return std::nullopt;
}

SynthesizeResult synthesize_reference(const Encoder& h, std::span<const double> target_feature,
                                      uint64_t seed, const SynthesizeOptions& options) {
    const auto& cfg = h.config();
    if (static_cast<int>(target_feature.size()) != cfg.feature_dim) {
        throw std::invalid_argument("synthesize_reference: target feature dim mismatch");
    }
    Tensor target = Tensor::from({static_cast<int64_t>(target_feature.size())},
                                 std::vector<double>(target_feature.begin(),
                                                     target_feature.end()));

    Tensor image;
    if (options.init_image != nullptr) {
        image = Tensor::from({1, cfg.channels, cfg.height, cfg.width}, *options.init_image);
    } else {
        Rng rng = Rng(seed).split(0x73796e74);
        image = Tensor::uniform({1, cfg.channels, cfg.height, cfg.width}, 0.0, 1.0, rng);
    }
    image.set_requires_grad(true);
    Optimizer opt({image}, {OptimizerKind::Adam, options.learning_rate});

    SynthesizeResult result;
    result.image.assign(image.data().begin(), image.data().end());

    auto similarity_now = [&]() {
        NoGradGuard ng;
        Tensor f = h.forward(image);
        return cosine_similarity(f, target).item();
    };

    result.achieved_similarity = similarity_now();
    for (int it = 0; it < options.iterations; ++it) {
        if (result.achieved_similarity >= options.stop_similarity) {
            break;
        }
        Tape tape;
        {
            TapeScope scope(tape);
            Tensor f = h.forward(image);
            Tensor loss = scale(cosine_similarity(f, target), -1.0);
            backward(loss);
        }
        opt.step();
        for (auto& v : image.data_mut()) {
            v = std::clamp(v, 0.0, 1.0);
        }
        result.iterations_run = it + 1;
        double sim = similarity_now();
        if (sim > result.achieved_similarity) {
            result.achieved_similarity = sim;
            result.image.assign(image.data().begin(), image.data().end());
        }
    }
    result.reached_target = result.achieved_similarity >= 0.95;
    return result;
}

namespace {

void write_image_u8(ByteWriter& w, std::span<const double> img, int hh, int ww, int cc) {
    for (int y = 0; y < hh; ++y) {
        for (int x = 0; x < ww; ++x) {
            for (int c = 0; c < cc; ++c) {
                double v = std::clamp(img[static_cast<size_t>((c * hh + y) * ww + x)], 0.0, 1.0);
                w.u8(static_cast<uint8_t>(std::lround(v * 255.0)));
            }
        }
    }
}

std::vector<double> read_image_u8(ByteReader& r, int hh, int ww, int cc) {
    std::vector<double> img(static_cast<size_t>(hh) * static_cast<size_t>(ww) *
                            static_cast<size_t>(cc));
    for (int y = 0; y < hh; ++y) {
        for (int x = 0; x < ww; ++x) {
            for (int c = 0; c < cc; ++c) {
                img[static_cast<size_t>((c * hh + y) * ww + x)] =
                    static_cast<double>(r.u8()) / 255.0;
            }
        }
    }
    return img;
}

}  // namespace

std::vector<uint8_t> bug_to_bytes(const BugInstance& bug) {
    ByteWriter w;
    w.str("MJBG");
    w.u32(1);
    w.u8(static_cast<uint8_t>(bug.provenance));
    w.u16(static_cast<uint16_t>(bug.true_label));
    w.u16(static_cast<uint16_t>(bug.observed_label));
    w.u16(static_cast<uint16_t>(bug.height));
    w.u16(static_cast<uint16_t>(bug.width));
    w.u8(static_cast<uint8_t>(bug.channels));
    w.u64(bug.encoder_hash);
    w.u64(bug.classifier_hash);
    write_image_u8(w, bug.x_b, bug.height, bug.width, bug.channels);
    write_image_u8(w, bug.x_r, bug.height, bug.width, bug.channels);
    return w.take();
}

BugInstance bug_from_bytes(std::span<const uint8_t> bytes) {
    ByteReader r(bytes);
    auto magic = r.raw(4);
    if (std::string(magic.begin(), magic.end()) != "MJBG") {
        throw FileFormatError(IoErrorCode::BadMagic, "bug instance: bad magic");
    }
    if (r.u32() != 1) {
        throw FileFormatError(IoErrorCode::BadVersion, "bug instance: unsupported version");
    }
    BugInstance bug;
    uint8_t prov = r.u8();
    if (prov > 2) {
        throw FileFormatError(IoErrorCode::BadKind, "bug instance: unknown provenance tag");
    }
    bug.provenance = static_cast<BugProvenance>(prov);
    bug.true_label = r.u16();
    bug.observed_label = r.u16();
    bug.height = r.u16();
    bug.width = r.u16();
    bug.channels = r.u8();
    bug.encoder_hash = r.u64();
    bug.classifier_hash = r.u64();
    bug.x_b = read_image_u8(r, bug.height, bug.width, bug.channels);
    bug.x_r = read_image_u8(r, bug.height, bug.width, bug.channels);
    if (!r.done()) {
        throw FileFormatError(IoErrorCode::TrailingData, "bug instance: trailing bytes");
    }
    return bug;
}

void save_bug_instance(const std::string& path, const BugInstance& bug) {
    write_file_bytes(path, bug_to_bytes(bug));
}

BugInstance load_bug_instance(const std::string& path) {
    auto bytes = read_file_bytes(path);
    return bug_from_bytes(bytes);
}

}  // namespace mudjack
