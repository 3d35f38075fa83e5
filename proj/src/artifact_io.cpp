#include "mudjack/artifact_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace mudjack {

void ByteWriter::u16(uint16_t v) {
    bytes_.push_back(static_cast<uint8_t>(v & 0xff));
    bytes_.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
}

void ByteWriter::u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        bytes_.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
    }
}

void ByteWriter::u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        bytes_.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
    }
}

void ByteWriter::f32(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    u32(bits);
}

void ByteWriter::raw(std::span<const uint8_t> data) {
    bytes_.insert(bytes_.end(), data.begin(), data.end());
}

void ByteWriter::str(const std::string& s) {
    bytes_.insert(bytes_.end(), s.begin(), s.end());
}

void ByteReader::need(size_t n) const {
    if (pos_ + n > data_.size()) {
        throw FileFormatError(IoErrorCode::TruncatedPayload,
                              "truncated payload: need " + std::to_string(n) + " bytes at offset " +
                                  std::to_string(pos_) + ", have " +
                                  std::to_string(data_.size() - pos_));
    }
}

uint8_t ByteReader::u8() {
    need(1);
    return data_[pos_++];
}

uint16_t ByteReader::u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
}

uint32_t ByteReader::u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) {
        v = (v << 8) | data_[pos_ + static_cast<size_t>(i)];
    }
    pos_ += 4;
    return v;
}

uint64_t ByteReader::u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) | data_[pos_ + static_cast<size_t>(i)];
    }
    pos_ += 8;
    return v;
}

float ByteReader::f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

std::vector<uint8_t> ByteReader::raw(size_t n) {
    need(n);
    std::vector<uint8_t> out(data_.begin() + static_cast<ptrdiff_t>(pos_),
                             data_.begin() + static_cast<ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FileFormatError(IoErrorCode::FileUnreadable, "cannot read file: " + path);
    }
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return bytes;
}

void write_file_bytes(const std::string& path, std::span<const uint8_t> bytes) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) {
        std::filesystem::create_directories(p.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FileFormatError(IoErrorCode::FileUnwritable, "cannot write file: " + path);
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw FileFormatError(IoErrorCode::FileUnwritable, "cannot write file: " + path);
    }
}

void write_file_text(const std::string& path, const std::string& text) {
    write_file_bytes(path, std::span<const uint8_t>(
                               reinterpret_cast<const uint8_t*>(text.data()), text.size()));
}

bool file_exists(const std::string& path) { return std::filesystem::exists(path); }

uint64_t fnv1a64(std::span<const uint8_t> bytes) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
    return std::string(buf);
}

std::string format_double(double v, int precision) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
    return std::string(buf);
}

void write_ppm(const std::string& path, int height, int width,
               std::span<const uint8_t> rgb_hwc) {
    ByteWriter w;
    w.str("P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n");
    w.raw(rgb_hwc);
    write_file_bytes(path, w.bytes());
}

std::vector<uint8_t> chw_to_rgb8(std::span<const double> chw, int channels, int height,
                                 int width) {
    std::vector<uint8_t> out(static_cast<size_t>(height) * static_cast<size_t>(width) * 3);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            for (int c = 0; c < 3; ++c) {
                int src_c = std::min(c, channels - 1);
                double v = chw[static_cast<size_t>((src_c * height + y) * width + x)];
                v = std::clamp(v, 0.0, 1.0);
                out[(static_cast<size_t>(y) * static_cast<size_t>(width) + static_cast<size_t>(x)) *
                        3 +
                    static_cast<size_t>(c)] = static_cast<uint8_t>(std::lround(v * 255.0));
            }
        }
    }
    return out;
}

}  // namespace mudjack
