#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mudjack {

// Shared error taxonomy for the binary file formats. Each failure mode has a
// distinct code so callers can react to e.g. truncation vs. a bad magic.
enum class IoErrorCode {
    BadMagic,
    BadVersion,
    BadKind,
    TruncatedPayload,
    DimensionOverflow,
    BadName,
    BadLabel,
    TrailingData,
    FileUnreadable,
    FileUnwritable,
};

class FileFormatError : public std::runtime_error {
  public:
    FileFormatError(IoErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}
    IoErrorCode code() const { return code_; }

  private:
    IoErrorCode code_;
};

// Little-endian byte buffer writer/reader; explicit per-byte encoding keeps
// the formats identical across hosts.
class ByteWriter {
  public:
    void u8(uint8_t v) { bytes_.push_back(v); }
    void u16(uint16_t v);
    void u32(uint32_t v);
    void u64(uint64_t v);
    void f32(float v);
    void raw(std::span<const uint8_t> data);
    void str(const std::string& s);
    const std::vector<uint8_t>& bytes() const { return bytes_; }
    std::vector<uint8_t> take() { return std::move(bytes_); }

  private:
    std::vector<uint8_t> bytes_;
};

class ByteReader {
  public:
    explicit ByteReader(std::span<const uint8_t> data) : data_(data) {}
    uint8_t u8();
    uint16_t u16();
    uint32_t u32();
    uint64_t u64();
    float f32();
    std::vector<uint8_t> raw(size_t n);
    size_t remaining() const { return data_.size() - pos_; }
    bool done() const { return pos_ == data_.size(); }

  private:
    void need(size_t n) const;
    std::span<const uint8_t> data_;
    size_t pos_ = 0;
};

std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::span<const uint8_t> bytes);
void write_file_text(const std::string& path, const std::string& text);
bool file_exists(const std::string& path);

uint64_t fnv1a64(std::span<const uint8_t> bytes);
std::string hex64(uint64_t value);

// Fixed-format float rendering used by every CSV artifact so identical runs
// produce byte-identical files.
std::string format_double(double v, int precision = 6);

// Binary P6 image; pixels are HWC rows of 8-bit RGB.
void write_ppm(const std::string& path, int height, int width,
               std::span<const uint8_t> rgb_hwc);

// Converts one CHW [0,1] image into P6 bytes.
std::vector<uint8_t> chw_to_rgb8(std::span<const double> chw, int channels, int height, int width);

}  // namespace mudjack
