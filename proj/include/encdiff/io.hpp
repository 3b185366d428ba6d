#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace encdiff::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

std::uint32_t crc32(std::span<const std::uint8_t> bytes);
/// Version string of the zlib linked into the library.
const char* linked_zlib_version();

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

/// Little-endian byte sink.
class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v);
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  /// Append the CRC32 of everything written so far.
  void seal() { u32(crc32(buf_)); }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Little-endian byte source with bounds checks.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw FormatError("truncated file");
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const auto* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint16_t u16() {
    const auto* p = take(2);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }
  std::uint32_t u32() {
    const auto* p = take(4);
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  float f32();
  std::string str() {
    const auto n = u32();
    const auto* p = take(n);
    return {reinterpret_cast<const char*>(p), n};
  }
  std::size_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

/// Checks the trailing CRC32 of a sealed buffer and returns the payload.
std::span<const std::uint8_t> verify_sealed(std::span<const std::uint8_t> data);

/// 8-bit PNG, `channels` in {1, 3}; pixels row-major interleaved.
void write_png(const std::filesystem::path& path, int width, int height, int channels,
               std::span<const std::uint8_t> pixels, const std::vector<std::pair<std::string, std::string>>& text = {});

/// Planar CHW bytes -> interleaved HWC bytes.
std::vector<std::uint8_t> planar_to_interleaved(std::span<const std::uint8_t> chw, int channels, int height, int width);

/// Map [-1, 1] floats in CHW layout to bytes.
std::vector<std::uint8_t> to_bytes(std::span<const float> chw);

/// Perceptual blue-to-yellow colormap, v in [0, 1].
void colormap(double v, std::uint8_t rgb[3]);

}  // namespace encdiff::io
