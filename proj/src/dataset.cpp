#include "mudjack/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mudjack/artifact_io.hpp"

namespace mudjack {

namespace {

double quantize_u8(double v) {
    v = std::clamp(v, 0.0, 1.0);
    return std::round(v * 255.0) / 255.0;
}

struct ComboStyle {
    int shape;
    std::array<double, 3> color;
};

const std::array<std::array<double, 3>, 8> kPalette = {{
    {0.95, 0.15, 0.15},  // red
    {0.15, 0.90, 0.20},  // green
    {0.20, 0.35, 0.95},  // blue
    {0.95, 0.90, 0.15},  // yellow
    {0.90, 0.20, 0.90},  // magenta
    {0.15, 0.90, 0.90},  // cyan
    {0.95, 0.55, 0.10},  // orange
    {0.93, 0.93, 0.93},  // white
}};

// Class semantics: block 0 pairs shape k with color k, block 1 pairs shape k
// with color (k+3) mod 8. Same visual vocabulary, disjoint label meanings.
ComboStyle combo_style(int combo_block, int cls) {
    ComboStyle s;
    s.shape = cls % 8;
    int color = combo_block == 0 ? cls % 8 : (cls + 3) % 8;
    s.color = kPalette[static_cast<size_t>(color)];
    return s;
}

bool inside_shape(int shape, double dx, double dy, double r) {
    double ax = std::abs(dx), ay = std::abs(dy);
    switch (shape) {
        case 0:  // disk
            return dx * dx + dy * dy <= r * r;
        case 1:  // square
            return ax <= r * 0.85 && ay <= r * 0.85;
        case 2:  // triangle (upward)
            return dy <= r * 0.75 && dy >= -r * 0.75 && ax <= (dy + r * 0.75) * 0.62;
        case 3: {  // ring
            double d2 = dx * dx + dy * dy;
            return d2 <= r * r && d2 >= r * r * 0.35;
        }
        case 4:  // plus
            return (ax <= r * 0.32 && ay <= r) || (ay <= r * 0.32 && ax <= r);
        case 5:  // diamond
            return ax + ay <= r;
        case 6:  // horizontal bars
            return ax <= r && ay <= r && (static_cast<int>(std::floor((dy + r) / (r * 0.5))) % 2 == 0);
        case 7:  // X
            return ax <= r && ay <= r && (std::abs(ax - ay) <= r * 0.3);
        default:
            return false;
    }
}

void render_image(std::span<double> img, int h, int w, int c, const ComboStyle& style, Rng& rng) {
    // Textured background: per-channel base level, a bilinear low-frequency
    // field from a 4x4 lattice, then fine per-pixel noise.
    std::array<double, 3> base;
    for (auto& b : base) {
        b = rng.uniform(0.08, 0.45);
    }
    constexpr int kLat = 4;
    std::array<double, kLat * kLat> lattice;
    for (auto& v : lattice) {
        v = rng.uniform(-0.16, 0.16);
    }
    auto lattice_at = [&](double fy, double fx) {
        double gy = fy * (kLat - 1), gx = fx * (kLat - 1);
        int y0 = std::min(static_cast<int>(gy), kLat - 2);
        int x0 = std::min(static_cast<int>(gx), kLat - 2);
        double ty = gy - y0, tx = gx - x0;
        double v00 = lattice[static_cast<size_t>(y0 * kLat + x0)];
        double v01 = lattice[static_cast<size_t>(y0 * kLat + x0 + 1)];
        double v10 = lattice[static_cast<size_t>((y0 + 1) * kLat + x0)];
        double v11 = lattice[static_cast<size_t>((y0 + 1) * kLat + x0 + 1)];
        return v00 * (1 - ty) * (1 - tx) + v01 * (1 - ty) * tx + v10 * ty * (1 - tx) +
               v11 * ty * tx;
    };

    double cx = rng.uniform(w * 0.38, w * 0.62);
    double cy = rng.uniform(h * 0.38, h * 0.62);
    double radius = rng.uniform(h * 0.18, h * 0.30);
    double color_jitter = rng.uniform(-0.08, 0.08);

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double low = lattice_at(static_cast<double>(y) / (h - 1),
                                    static_cast<double>(x) / (w - 1));
            bool in_shape = inside_shape(style.shape, x - cx, y - cy, radius);
            double pixel_noise = rng.uniform(-0.035, 0.035);
            for (int ch = 0; ch < c; ++ch) {
                double v;
                if (in_shape) {
                    v = style.color[static_cast<size_t>(ch % 3)] + color_jitter + pixel_noise;
                } else {
                    v = base[static_cast<size_t>(ch % 3)] + low + pixel_noise;
                }
                img[static_cast<size_t>((ch * h + y) * w + x)] = quantize_u8(v);
            }
        }
    }
}

}  // namespace

void ImageDataset::validate() const {
    if (pixels.size() != static_cast<size_t>(size()) * static_cast<size_t>(image_size())) {
        throw std::invalid_argument("dataset: pixel buffer does not match image count");
    }
    for (int label : labels) {
        if (label < 0 || label >= num_classes) {
            throw FileFormatError(IoErrorCode::BadLabel,
                                  "dataset: label " + std::to_string(label) +
                                      " outside class count " + std::to_string(num_classes));
        }
    }
    for (double v : pixels) {
        if (!(v >= 0.0 && v <= 1.0)) {
            throw std::invalid_argument("dataset: pixel outside [0,1]");
        }
    }
}

int TriggerSpec::mask_count() const {
    int n = 0;
    for (uint8_t m : mask) {
        n += m ? 1 : 0;
    }
    return n;
}

std::array<int, 4> TriggerSpec::mask_bounds() const {
    int top = height, left = width, bottom = -1, right = -1;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            if (mask[static_cast<size_t>(y * width + x)]) {
                top = std::min(top, y);
                left = std::min(left, x);
                bottom = std::max(bottom, y);
                right = std::max(right, x);
            }
        }
    }
    if (bottom < 0) {
        return {0, 0, 0, 0};
    }
    return {top, left, bottom - top + 1, right - left + 1};
}

void TriggerSpec::validate() const {
    if (kind == Kind::Patch) {
        if (mask.size() != static_cast<size_t>(height) * static_cast<size_t>(width)) {
            throw std::invalid_argument("trigger: mask size does not match grid");
        }
        if (pattern.size() !=
            static_cast<size_t>(channels) * static_cast<size_t>(height) * static_cast<size_t>(width)) {
            throw std::invalid_argument("trigger: pattern size does not match grid");
        }
    } else {
        if (pattern.size() !=
            static_cast<size_t>(channels) * static_cast<size_t>(height) * static_cast<size_t>(width)) {
            throw std::invalid_argument("trigger: pattern size does not match grid");
        }
        for (double v : pattern) {
            if (std::abs(v) > epsilon + 1e-12) {
                throw std::invalid_argument("trigger: perturbation exceeds epsilon bound");
            }
        }
    }
}

ImageDataset generate_dataset(const DataGenSpec& spec, uint64_t seed) {
    if (spec.num_classes < 2) {
        throw std::invalid_argument("generate_dataset: need at least 2 classes");
    }
    if (spec.per_class < 1) {
        throw std::invalid_argument("generate_dataset: zero images requested");
    }
    ImageDataset ds;
    ds.height = spec.height;
    ds.width = spec.width;
    ds.channels = spec.channels;
    ds.num_classes = spec.num_classes;
    ds.split_tag = spec.split_tag;
    ds.seed = seed;
    int total = spec.num_classes * spec.per_class;
    ds.labels.resize(static_cast<size_t>(total));
    ds.pixels.resize(static_cast<size_t>(total) * static_cast<size_t>(ds.image_size()));
    Rng root(seed);
    for (int i = 0; i < total; ++i) {
        int cls = i % spec.num_classes;
        ds.labels[static_cast<size_t>(i)] = cls;
        // One derived stream per image keeps generation order-independent.
        Rng img_rng = root.split(static_cast<uint64_t>(i) + 1);
        render_image(ds.image_mut(i), ds.height, ds.width, ds.channels,
                     combo_style(spec.combo_block, cls), img_rng);
    }
    return ds;
}

void embed_trigger(std::span<const double> src, std::span<double> dst, const TriggerSpec& trigger,
                   int height, int width, int channels, Rng* rng) {
    if (trigger.height != height || trigger.width != width || trigger.channels != channels) {
        throw std::invalid_argument("embed_trigger: trigger grid does not match image");
    }
    std::copy(src.begin(), src.end(), dst.begin());
    if (trigger.kind == TriggerSpec::Kind::WholeImage) {
        for (int i = 0; i < channels * height * width; ++i) {
            dst[static_cast<size_t>(i)] =
                std::clamp(src[static_cast<size_t>(i)] + trigger.pattern[static_cast<size_t>(i)],
                           0.0, 1.0);
        }
        return;
    }
    if (trigger.empty()) {
        return;
    }
    auto [top, left, box_h, box_w] = trigger.mask_bounds();
    if (box_h > height || box_w > width) {
        throw std::invalid_argument("embed_trigger: mask exceeds image bounds");
    }
    int dy = 0, dx = 0;
    if (trigger.location == TriggerSpec::Location::PerImageRandom) {
        if (rng == nullptr) {
            throw std::invalid_argument("embed_trigger: random location needs an rng");
        }
        dy = rng->randint(height - box_h + 1) - top;
        dx = rng->randint(width - box_w + 1) - left;
    }
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            if (!trigger.mask[static_cast<size_t>(y * width + x)]) {
                continue;
            }
            int ty = y + dy, tx = x + dx;
            for (int c = 0; c < channels; ++c) {
                dst[static_cast<size_t>((c * height + ty) * width + tx)] =
                    trigger.pattern[static_cast<size_t>((c * height + y) * width + x)];
            }
        }
    }
}

std::vector<double> embed_trigger_copy(std::span<const double> src, const TriggerSpec& trigger,
                                       int height, int width, int channels, Rng* rng) {
    std::vector<double> out(src.size());
    embed_trigger(src, out, trigger, height, width, channels, rng);
    return out;
}

ImageDataset make_backdoored_testset(const ImageDataset& test, const TriggerSpec& trigger,
                                     int target_class, uint64_t seed) {
    if (target_class < 0 || target_class >= test.num_classes) {
        throw std::invalid_argument("make_backdoored_testset: target class out of range");
    }
    ImageDataset out;
    out.height = test.height;
    out.width = test.width;
    out.channels = test.channels;
    out.num_classes = test.num_classes;
    out.split_tag = test.split_tag + "+trigger";
    out.seed = seed;
    Rng rng(seed);
    for (int i = 0; i < test.size(); ++i) {
        if (test.labels[static_cast<size_t>(i)] == target_class) {
            continue;
        }
        out.labels.push_back(test.labels[static_cast<size_t>(i)]);
        size_t off = out.pixels.size();
        out.pixels.resize(off + static_cast<size_t>(test.image_size()));
        embed_trigger(test.image(i),
                      std::span<double>(out.pixels).subspan(off,
                                                            static_cast<size_t>(test.image_size())),
                      trigger, test.height, test.width, test.channels, &rng);
    }
    return out;
}

ImageDataset make_backdoored_testset_multi(const ImageDataset& test,
                                           const std::vector<TriggerSpec>& triggers,
                                           int target_class, uint64_t seed) {
    if (triggers.empty()) {
        throw std::invalid_argument("make_backdoored_testset_multi: no triggers");
    }
    ImageDataset out;
    out.height = test.height;
    out.width = test.width;
    out.channels = test.channels;
    out.num_classes = test.num_classes;
    out.split_tag = test.split_tag + "+triggers";
    out.seed = seed;
    Rng rng(seed);
    for (int i = 0; i < test.size(); ++i) {
        if (test.labels[static_cast<size_t>(i)] == target_class) {
            continue;
        }
        const TriggerSpec& t =
            triggers[static_cast<size_t>(rng.randint(static_cast<int>(triggers.size())))];
        out.labels.push_back(test.labels[static_cast<size_t>(i)]);
        size_t off = out.pixels.size();
        out.pixels.resize(off + static_cast<size_t>(test.image_size()));
        embed_trigger(test.image(i),
                      std::span<double>(out.pixels).subspan(off,
                                                            static_cast<size_t>(test.image_size())),
                      t, test.height, test.width, test.channels, &rng);
    }
    return out;
}

TriggerSpec make_square_trigger(int img_h, int img_w, int channels, int side, int top, int left,
                                const std::array<double, 3>& color,
                                TriggerSpec::Location location) {
    if (top < 0 || left < 0 || top + side > img_h || left + side > img_w) {
        throw std::invalid_argument("make_square_trigger: square exceeds image bounds");
    }
    TriggerSpec t;
    t.kind = TriggerSpec::Kind::Patch;
    t.location = location;
    t.height = img_h;
    t.width = img_w;
    t.channels = channels;
    t.mask.assign(static_cast<size_t>(img_h) * static_cast<size_t>(img_w), 0);
    t.pattern.assign(static_cast<size_t>(channels) * t.mask.size(), 0.0);
    for (int y = top; y < top + side; ++y) {
        for (int x = left; x < left + side; ++x) {
            t.mask[static_cast<size_t>(y * img_w + x)] = 1;
            for (int c = 0; c < channels; ++c) {
                t.pattern[static_cast<size_t>((c * img_h + y) * img_w + x)] =
                    quantize_u8(color[static_cast<size_t>(c % 3)]);
            }
        }
    }
    return t;
}

TriggerSpec make_random_pattern_trigger(int img_h, int img_w, int channels, int side, int top,
                                        int left, uint64_t seed, TriggerSpec::Location location) {
    TriggerSpec t = make_square_trigger(img_h, img_w, channels, side, top, left, {0, 0, 0},
                                        location);
    Rng rng(seed);
    for (int y = top; y < top + side; ++y) {
        for (int x = left; x < left + side; ++x) {
            for (int c = 0; c < channels; ++c) {
                t.pattern[static_cast<size_t>((c * img_h + y) * img_w + x)] =
                    quantize_u8(rng.uniform());
            }
        }
    }
    return t;
}

TriggerSpec make_whole_image_trigger(int img_h, int img_w, int channels, double epsilon,
                                     uint64_t seed) {
    TriggerSpec t;
    t.kind = TriggerSpec::Kind::WholeImage;
    t.location = TriggerSpec::Location::Fixed;
    t.height = img_h;
    t.width = img_w;
    t.channels = channels;
    t.epsilon = epsilon;
    t.pattern.resize(static_cast<size_t>(channels) * static_cast<size_t>(img_h) *
                     static_cast<size_t>(img_w));
    Rng rng(seed);
    double max_abs = 0.0;
    for (auto& v : t.pattern) {
        v = rng.uniform(-1.0, 1.0);
        max_abs = std::max(max_abs, std::abs(v));
    }
    // Scale so the largest magnitude equals epsilon; the clamp removes the
    // one-ulp overshoot the division can produce.
    double s = epsilon / max_abs;
    for (auto& v : t.pattern) {
        v = std::clamp(v * s, -epsilon, epsilon);
    }
    return t;
}

std::vector<uint8_t> dataset_to_bytes(const ImageDataset& ds) {
    ByteWriter w;
    w.str("MJDS");
    w.u32(1);
    w.u32(static_cast<uint32_t>(ds.size()));
    w.u16(static_cast<uint16_t>(ds.height));
    w.u16(static_cast<uint16_t>(ds.width));
    w.u8(static_cast<uint8_t>(ds.channels));
    w.u16(static_cast<uint16_t>(ds.num_classes));
    for (int label : ds.labels) {
        w.u16(static_cast<uint16_t>(label));
    }
    // Pixels on disk are HWC u8 per image.
    for (int i = 0; i < ds.size(); ++i) {
        auto img = ds.image(i);
        for (int y = 0; y < ds.height; ++y) {
            for (int x = 0; x < ds.width; ++x) {
                for (int c = 0; c < ds.channels; ++c) {
                    double v = img[static_cast<size_t>((c * ds.height + y) * ds.width + x)];
                    w.u8(static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
                }
            }
        }
    }
    return w.take();
}

ImageDataset dataset_from_bytes(std::span<const uint8_t> bytes) {
    ByteReader r(bytes);
    auto magic = r.raw(4);
    if (std::string(magic.begin(), magic.end()) != "MJDS") {
        throw FileFormatError(IoErrorCode::BadMagic, "dataset: bad magic");
    }
    uint32_t version = r.u32();
    if (version != 1) {
        throw FileFormatError(IoErrorCode::BadVersion,
                              "dataset: unsupported version " + std::to_string(version));
    }
    uint32_t n = r.u32();
    ImageDataset ds;
    ds.height = r.u16();
    ds.width = r.u16();
    ds.channels = r.u8();
    ds.num_classes = r.u16();
    if (ds.height <= 0 || ds.width <= 0 || ds.channels <= 0) {
        throw FileFormatError(IoErrorCode::DimensionOverflow, "dataset: degenerate dimensions");
    }
    ds.labels.resize(n);
    for (auto& label : ds.labels) {
        label = r.u16();
        if (label >= ds.num_classes) {
            throw FileFormatError(IoErrorCode::BadLabel,
                                  "dataset: label " + std::to_string(label) +
                                      " outside class count " + std::to_string(ds.num_classes));
        }
    }
    ds.pixels.resize(static_cast<size_t>(n) * static_cast<size_t>(ds.image_size()));
    for (uint32_t i = 0; i < n; ++i) {
        auto img = ds.image_mut(static_cast<int>(i));
        for (int y = 0; y < ds.height; ++y) {
            for (int x = 0; x < ds.width; ++x) {
                for (int c = 0; c < ds.channels; ++c) {
                    img[static_cast<size_t>((c * ds.height + y) * ds.width + x)] =
                        static_cast<double>(r.u8()) / 255.0;
                }
            }
        }
    }
    if (!r.done()) {
        throw FileFormatError(IoErrorCode::TrailingData, "dataset: trailing bytes after payload");
    }
    return ds;
}

void save_dataset(const std::string& path, const ImageDataset& ds) {
    write_file_bytes(path, dataset_to_bytes(ds));
}

ImageDataset load_dataset(const std::string& path) {
    auto bytes = read_file_bytes(path);
    return dataset_from_bytes(bytes);
}

std::vector<uint8_t> trigger_to_bytes(const TriggerSpec& t) {
    ByteWriter w;
    w.str("MJTG");
    w.u32(1);
    w.u8(t.kind == TriggerSpec::Kind::Patch ? 0 : 1);
    w.u8(t.location == TriggerSpec::Location::Fixed ? 0 : 1);
    w.u16(static_cast<uint16_t>(t.height));
    w.u16(static_cast<uint16_t>(t.width));
    w.u8(static_cast<uint8_t>(t.channels));
    w.f32(static_cast<float>(t.epsilon));
    if (t.kind == TriggerSpec::Kind::Patch) {
        w.raw(t.mask);
    }
    for (double v : t.pattern) {
        w.f32(static_cast<float>(v));
    }
    return w.take();
}

TriggerSpec trigger_from_bytes(std::span<const uint8_t> bytes) {
    ByteReader r(bytes);
    auto magic = r.raw(4);
    if (std::string(magic.begin(), magic.end()) != "MJTG") {
        throw FileFormatError(IoErrorCode::BadMagic, "trigger: bad magic");
    }
    if (r.u32() != 1) {
        throw FileFormatError(IoErrorCode::BadVersion, "trigger: unsupported version");
    }
    TriggerSpec t;
    uint8_t kind = r.u8();
    if (kind > 1) {
        throw FileFormatError(IoErrorCode::BadKind, "trigger: unknown kind tag");
    }
    t.kind = kind == 0 ? TriggerSpec::Kind::Patch : TriggerSpec::Kind::WholeImage;
    t.location = r.u8() == 0 ? TriggerSpec::Location::Fixed : TriggerSpec::Location::PerImageRandom;
    t.height = r.u16();
    t.width = r.u16();
    t.channels = r.u8();
    t.epsilon = r.f32();
    size_t hw = static_cast<size_t>(t.height) * static_cast<size_t>(t.width);
    if (t.kind == TriggerSpec::Kind::Patch) {
        t.mask = r.raw(hw);
    }
    t.pattern.resize(static_cast<size_t>(t.channels) * hw);
    for (auto& v : t.pattern) {
        v = r.f32();
    }
    if (!r.done()) {
        throw FileFormatError(IoErrorCode::TrailingData, "trigger: trailing bytes after payload");
    }
    return t;
}

void save_trigger(const std::string& path, const TriggerSpec& t) {
    write_file_bytes(path, trigger_to_bytes(t));
}

TriggerSpec load_trigger(const std::string& path) {
    auto bytes = read_file_bytes(path);
    return trigger_from_bytes(bytes);
}

Tensor make_batch(const ImageDataset& ds, std::span<const int> indices) {
    int64_t n = static_cast<int64_t>(indices.size());
    std::vector<double> data(static_cast<size_t>(n) * static_cast<size_t>(ds.image_size()));
    for (int64_t i = 0; i < n; ++i) {
        auto img = ds.image(indices[static_cast<size_t>(i)]);
        std::copy(img.begin(), img.end(),
                  data.begin() + i * static_cast<int64_t>(ds.image_size()));
    }
    return Tensor::from({n, ds.channels, ds.height, ds.width}, std::move(data));
}

Tensor make_batch_from_images(const std::vector<std::vector<double>>& images, int channels,
                              int height, int width) {
    int64_t n = static_cast<int64_t>(images.size());
    size_t img_size = static_cast<size_t>(channels) * static_cast<size_t>(height) *
                      static_cast<size_t>(width);
    std::vector<double> data(static_cast<size_t>(n) * img_size);
    for (int64_t i = 0; i < n; ++i) {
        std::copy(images[static_cast<size_t>(i)].begin(), images[static_cast<size_t>(i)].end(),
                  data.begin() + i * static_cast<int64_t>(img_size));
    }
    return Tensor::from({n, channels, height, width}, std::move(data));
}

Tensor make_single_batch(std::span<const double> image, int channels, int height, int width) {
    return Tensor::from({1, channels, height, width},
                        std::vector<double>(image.begin(), image.end()));
}

}  // namespace mudjack
