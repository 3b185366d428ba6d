#include "encdiff/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

#include "encdiff/io.hpp"

namespace encdiff {

FactorSpec FactorSpec::minishapes(int image_size) {
  return {{{"shape", 3}, {"scale", 4}, {"pos_x", 8}, {"pos_y", 8}, {"hue", 6}}, image_size, 3};
}

std::int64_t FactorSpec::combinations() const {
  std::int64_t n = 1;
  for (const auto& f : factors) {
    n *= f.cardinality;
    if (n > (std::int64_t{1} << 40)) throw DatasetOverflow("factor combinations overflow");
  }
  return n;
}

int FactorSpec::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < factors.size(); ++i)
    if (factors[i].name == name) return static_cast<int>(i);
  return -1;
}

void FactorSpec::validate() const {
  if (image_size != 16 && image_size != 32 && image_size != 64) throw std::invalid_argument("image_size must be 16, 32 or 64");
  if (channels != 3) throw std::invalid_argument("channels must be 3");
  if (factors.empty()) throw std::invalid_argument("no factors");
  for (const auto& f : factors) {
    if (f.cardinality < 2) throw std::invalid_argument("factor '" + f.name + "' needs cardinality >= 2");
    if (f.cardinality > 32767) throw std::invalid_argument("factor '" + f.name + "' cardinality too large");
    if (f.name == "shape" && f.cardinality > 3) throw std::invalid_argument("at most 3 shapes");
    if (f.name == "hue" && f.cardinality > 6) throw std::invalid_argument("at most 6 hues");
    if (f.name != "shape" && f.name != "scale" && f.name != "pos_x" && f.name != "pos_y" && f.name != "hue")
      throw std::invalid_argument("unknown factor '" + f.name + "'");
    if (std::count_if(factors.begin(), factors.end(), [&](const Factor& g) { return g.name == f.name; }) > 1)
      throw std::invalid_argument("duplicate factor '" + f.name + "'");
  }
}

namespace {

// Channel values of each hue are permutations of one triple, so the channel sum
// does not depend on hue.
constexpr std::array<std::array<int, 3>, 6> kPalette{{
    {240, 208, 32}, {208, 240, 32}, {32, 240, 208}, {32, 208, 240}, {208, 32, 240}, {240, 32, 208}}};
constexpr int kWall = 32;
constexpr int kFloor = 48;
constexpr int kSuper = 4;

double frac(const FactorSpec& spec, std::span<const int> row, const char* name, double fallback) {
  const int j = spec.index_of(name);
  if (j < 0) return fallback;
  return static_cast<double>(row[static_cast<std::size_t>(j)]) / (spec.factors[static_cast<std::size_t>(j)].cardinality - 1);
}

bool inside(int shape, double dx, double dy, double r) {
  switch (shape) {
    case 0:
      return std::abs(dx) <= 0.886 * r && std::abs(dy) <= 0.886 * r;
    case 1:
      return dx * dx + dy * dy <= r * r;
    default: {
      // upward equilateral triangle, circumradius 1.2 r
      const double R = 1.2 * r;
      const double s3 = std::sqrt(3.0);
      const double ax = 0, ay = -R, bx = R * s3 / 2, by = R / 2, cx = -R * s3 / 2, cy = R / 2;
      auto edge = [&](double x0, double y0, double x1, double y1) { return (x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0); };
      const double e0 = edge(ax, ay, bx, by), e1 = edge(bx, by, cx, cy), e2 = edge(cx, cy, ax, ay);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  }
}

}  // namespace

std::vector<std::uint8_t> render(const FactorSpec& spec, std::span<const int> row) {
  if (row.size() != spec.factors.size()) throw std::invalid_argument("render: factor row length mismatch");
  for (std::size_t j = 0; j < row.size(); ++j)
    if (row[j] < 0 || row[j] >= spec.factors[j].cardinality) throw std::out_of_range("render: factor value out of range");
  const int S = spec.image_size;
  const int shape_j = spec.index_of("shape");
  const int hue_j = spec.index_of("hue");
  const int shape = shape_j < 0 ? 0 : row[static_cast<std::size_t>(shape_j)];
  const auto& color = kPalette[static_cast<std::size_t>(hue_j < 0 ? 0 : row[static_cast<std::size_t>(hue_j)])];
  const double r = S * (0.10 + 0.10 * frac(spec, row, "scale", 0.5));
  const double margin = 0.22 * S;
  const double cx = margin + frac(spec, row, "pos_x", 0.5) * (S - 2 * margin);
  const double cy = margin + frac(spec, row, "pos_y", 0.5) * (S - 2 * margin);

  std::vector<std::uint8_t> img(static_cast<std::size_t>(3) * S * S);
  const std::size_t plane = static_cast<std::size_t>(S) * S;
  for (int y = 0; y < S; ++y) {
    const int bg = y < S / 2 ? kWall : kFloor;
    for (int x = 0; x < S; ++x) {
      int k = 0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx)
          k += inside(shape, x + (sx + 0.5) / kSuper - cx, y + (sy + 0.5) / kSuper - cy, r);
      for (int c = 0; c < 3; ++c) {
        // exact: every (color - bg) is a multiple of 16
        const int v = bg + k * (color[static_cast<std::size_t>(c)] - bg) / (kSuper * kSuper);
        img[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * S + x] = static_cast<std::uint8_t>(v);
      }
    }
  }
  return img;
}

void FactorDataset::build_index() {
  const auto total = spec.combinations();
  row_of_code_.assign(static_cast<std::size_t>(total), -1);
  const std::size_t F = spec.factors.size();
  for (std::size_t i = 0; i < size(); ++i) {
    std::int64_t code = 0;
    for (std::size_t j = 0; j < F; ++j) code = code * spec.factors[j].cardinality + factor_table[i * F + j];
    if (row_of_code_[static_cast<std::size_t>(code)] >= 0) throw io::FormatError("duplicate factor row");
    row_of_code_[static_cast<std::size_t>(code)] = static_cast<int>(i);
  }
}

int FactorDataset::find_row(std::span<const int> combination) const {
  std::int64_t code = 0;
  for (std::size_t j = 0; j < spec.factors.size(); ++j) {
    if (combination[j] < 0 || combination[j] >= spec.factors[j].cardinality) return -1;
    code = code * spec.factors[j].cardinality + combination[j];
  }
  return row_of_code_.empty() ? -1 : row_of_code_[static_cast<std::size_t>(code)];
}

std::vector<float> FactorDataset::gather(std::span<const int> rows) const {
  const std::size_t n = image_bytes();
  std::vector<float> out(rows.size() * n);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    const auto img = image(static_cast<std::size_t>(rows[b]));
    for (std::size_t i = 0; i < n; ++i) out[b * n + i] = static_cast<float>(img[i]) / 127.5f - 1.0f;
  }
  return out;
}

FactorDataset generate(const FactorSpec& spec, std::uint64_t seed, std::int64_t cap) {
  spec.validate();
  const auto total = spec.combinations();
  if (total > cap) throw DatasetOverflow("dataset has " + std::to_string(total) + " combinations, cap is " + std::to_string(cap));
  const std::size_t F = spec.factors.size();
  const auto M = static_cast<std::size_t>(total);

  std::vector<int> order(M);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = M - 1; i > 0; --i) std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i)))]);

  FactorDataset ds;
  ds.spec = spec;
  ds.seed = seed;
  ds.factor_table.resize(M * F);
  ds.images.resize(M * ds.image_bytes());
  std::vector<int> row(F);
  for (std::size_t i = 0; i < M; ++i) {
    std::int64_t code = order[i];
    for (std::size_t j = F; j-- > 0;) {
      row[j] = static_cast<int>(code % spec.factors[j].cardinality);
      code /= spec.factors[j].cardinality;
    }
    std::copy(row.begin(), row.end(), ds.factor_table.begin() + static_cast<std::ptrdiff_t>(i * F));
    const auto img = render(spec, row);
    std::copy(img.begin(), img.end(), ds.images.begin() + static_cast<std::ptrdiff_t>(i * ds.image_bytes()));
  }
  ds.build_index();
  return ds;
}

FixedFactorBatch sample_fixed_factor(const FactorDataset& ds, int factor_index, int batch, Rng& rng) {
  const int F = static_cast<int>(ds.spec.factors.size());
  if (factor_index < 0 || factor_index >= F) throw std::out_of_range("sample_fixed_factor: factor index out of range");
  if (batch < 2) throw std::invalid_argument("sample_fixed_factor: batch must be >= 2");
  FixedFactorBatch out;
  out.factor_index = factor_index;
  out.value = static_cast<int>(rng.uniform_int(0, ds.spec.factors[static_cast<std::size_t>(factor_index)].cardinality - 1));
  const std::int64_t available = ds.spec.combinations() / ds.spec.factors[static_cast<std::size_t>(factor_index)].cardinality;
  const bool distinct = batch <= available;
  std::vector<int> combo(static_cast<std::size_t>(F));
  while (static_cast<int>(out.rows.size()) < batch) {
    for (int j = 0; j < F; ++j)
      combo[static_cast<std::size_t>(j)] =
          j == factor_index ? out.value : static_cast<int>(rng.uniform_int(0, ds.spec.factors[static_cast<std::size_t>(j)].cardinality - 1));
    const int r = ds.find_row(combo);
    if (r < 0) continue;
    if (distinct && std::find(out.rows.begin(), out.rows.end(), r) != out.rows.end()) continue;
    out.rows.push_back(r);
  }
  return out;
}

namespace {

constexpr char kMagic[4] = {'M', 'S', 'H', 'P'};

nlohmann::json header_json(const FactorDataset& ds) {
  return {{"spec", ds.spec}, {"seed", ds.seed}, {"count", ds.size()}};
}

DatasetHeader parse_header(io::ByteReader& r) {
  const auto* magic = r.take(4);
  if (!std::equal(magic, magic + 4, kMagic)) throw io::FormatError("not a MiniShapes dataset file");
  DatasetHeader h;
  h.version = r.u32();
  if (h.version != kDatasetVersion) throw io::FormatError("unsupported dataset version " + std::to_string(h.version));
  const auto j = nlohmann::json::parse(r.str());
  h.spec = j.at("spec").get<FactorSpec>();
  h.seed = j.at("seed").get<std::uint64_t>();
  h.count = j.at("count").get<std::size_t>();
  return h;
}

}  // namespace

void save(const FactorDataset& ds, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(kDatasetVersion);
  w.str(header_json(ds).dump());
  w.bytes(ds.images.data(), ds.images.size());
  for (int v : ds.factor_table) w.u16(static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
  w.seal();
  io::write_file(path, w.buffer());
}

FactorDataset load(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader probe(bytes);
  (void)parse_header(probe);  // version/magic errors before the checksum
  const auto payload = io::verify_sealed(bytes);
  io::ByteReader r(payload);
  const auto h = parse_header(r);
  h.spec.validate();
  FactorDataset ds;
  ds.spec = h.spec;
  ds.seed = h.seed;
  const std::size_t F = ds.spec.factors.size();
  const auto* img = r.take(h.count * ds.image_bytes());
  ds.images.assign(img, img + h.count * ds.image_bytes());
  ds.factor_table.resize(h.count * F);
  for (auto& v : ds.factor_table) v = static_cast<std::int16_t>(r.u16());
  if (r.position() != payload.size()) throw io::FormatError("trailing bytes in dataset file");
  for (std::size_t i = 0; i < ds.factor_table.size(); ++i)
    if (ds.factor_table[i] < 0 || ds.factor_table[i] >= ds.spec.factors[i % F].cardinality) throw io::FormatError("factor value out of range");
  ds.build_index();
  return ds;
}

DatasetHeader read_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> head(12);
  in.read(reinterpret_cast<char*>(head.data()), 12);
  if (in.gcount() != 12) throw io::FormatError("truncated file");
  io::ByteReader r0(head);
  r0.take(8);
  const auto len = r0.u32();
  head.resize(12 + len);
  in.read(reinterpret_cast<char*>(head.data() + 12), len);
  if (static_cast<std::uint32_t>(in.gcount()) != len) throw io::FormatError("truncated file");
  io::ByteReader r(head);
  return parse_header(r);
}

}  // namespace encdiff
