#include "encdiff/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace encdiff::io {

const char* linked_zlib_version() { return ::zlibVersion(); }

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    c = ::crc32(c, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(c);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
float ByteReader::f32() { return std::bit_cast<float>(u32()); }

std::span<const std::uint8_t> verify_sealed(std::span<const std::uint8_t> data) {
  if (data.size() < 4) throw FormatError("truncated file");
  const auto payload = data.first(data.size() - 4);
  ByteReader tail(data.last(4));
  if (tail.u32() != crc32(payload)) throw ChecksumError("CRC32 mismatch");
  return payload;
}

namespace {

void png_chunk(std::vector<std::uint8_t>& out, const char type[4], std::span<const std::uint8_t> data) {
  auto be32 = [&](std::uint32_t v) {
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  be32(static_cast<std::uint32_t>(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  be32(crc32({out.data() + start, out.size() - start}));
}

}  // namespace

void write_png(const std::filesystem::path& path, int width, int height, int channels,
               std::span<const std::uint8_t> pixels, const std::vector<std::pair<std::string, std::string>>& text) {
  if (channels != 1 && channels != 3) throw std::invalid_argument("write_png: channels must be 1 or 3");
  if (pixels.size() != static_cast<std::size_t>(width) * height * channels) throw std::invalid_argument("write_png: size mismatch");
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(height) * (width * channels + 1));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);
    const auto* row = pixels.data() + static_cast<std::size_t>(y) * width * channels;
    raw.insert(raw.end(), row, row + static_cast<std::size_t>(width) * channels);
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) throw std::runtime_error("zlib failure");
  z.resize(zlen);

  std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  std::array<std::uint8_t, 13> ihdr{};
  for (int i = 0; i < 4; ++i) {
    ihdr[static_cast<std::size_t>(3 - i)] = static_cast<std::uint8_t>(width >> (8 * i));
    ihdr[static_cast<std::size_t>(7 - i)] = static_cast<std::uint8_t>(height >> (8 * i));
  }
  ihdr[8] = 8;
  ihdr[9] = channels == 3 ? 2 : 0;
  png_chunk(out, "IHDR", ihdr);
  for (const auto& [k, v] : text) {
    std::vector<std::uint8_t> t(k.begin(), k.end());
    t.push_back(0);
    t.insert(t.end(), v.begin(), v.end());
    png_chunk(out, "tEXt", t);
  }
  png_chunk(out, "IDAT", z);
  png_chunk(out, "IEND", {});
  write_file(path, out);
}

std::vector<std::uint8_t> planar_to_interleaved(std::span<const std::uint8_t> chw, int channels, int height, int width) {
  std::vector<std::uint8_t> out(chw.size());
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int c = 0; c < channels; ++c)
    for (std::size_t p = 0; p < plane; ++p) out[p * channels + c] = chw[c * plane + p];
  return out;
}

std::vector<std::uint8_t> to_bytes(std::span<const float> chw) {
  std::vector<std::uint8_t> out(chw.size());
  for (std::size_t i = 0; i < chw.size(); ++i) {
    const double v = std::clamp((static_cast<double>(chw[i]) + 1.0) * 127.5, 0.0, 255.0);
    out[i] = static_cast<std::uint8_t>(std::lround(v));
  }
  return out;
}

void colormap(double v, std::uint8_t rgb[3]) {
  // anchor points sampled from viridis
  static constexpr double anchors[][3] = {{68, 1, 84},    {72, 40, 120},  {62, 74, 137}, {49, 104, 142}, {38, 130, 142},
                                          {31, 158, 137}, {53, 183, 121}, {109, 205, 89}, {180, 222, 44}, {253, 231, 37}};
  constexpr int n = 10;
  v = std::clamp(v, 0.0, 1.0) * (n - 1);
  const int i = std::min(static_cast<int>(v), n - 2);
  const double f = v - i;
  for (int c = 0; c < 3; ++c) rgb[c] = static_cast<std::uint8_t>(std::lround(anchors[i][c] * (1 - f) + anchors[i + 1][c] * f));
}

}  // namespace encdiff::io
