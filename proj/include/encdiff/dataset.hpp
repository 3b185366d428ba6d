#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "encdiff/rng.hpp"

namespace encdiff {

struct Factor {
  std::string name;
  int cardinality = 2;
  bool operator==(const Factor&) const = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Factor, name, cardinality)

/// Factors understood by the renderer: shape (<= 3), scale, pos_x, pos_y, hue (<= 6).
struct FactorSpec {
  std::vector<Factor> factors;
  int image_size = 32;
  int channels = 3;

  static FactorSpec minishapes(int image_size = 32);

  std::int64_t combinations() const;
  int index_of(const std::string& name) const;  // -1 if absent
  void validate() const;
  bool operator==(const FactorSpec&) const = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FactorSpec, factors, image_size, channels)

class DatasetOverflow : public std::overflow_error {
 public:
  using std::overflow_error::overflow_error;
};

struct FactorDataset {
  FactorSpec spec;
  std::uint64_t seed = 0;
  std::vector<std::uint8_t> images;  // M x C x H x W
  std::vector<int> factor_table;     // M x F, row-major

  std::size_t size() const { return spec.factors.empty() ? 0 : factor_table.size() / spec.factors.size(); }
  std::size_t image_bytes() const {
    return static_cast<std::size_t>(spec.channels) * spec.image_size * spec.image_size;
  }
  std::span<const std::uint8_t> image(std::size_t row) const {
    return {images.data() + row * image_bytes(), image_bytes()};
  }
  std::span<const int> factors(std::size_t row) const {
    return {factor_table.data() + row * spec.factors.size(), spec.factors.size()};
  }
  int factor(std::size_t row, std::size_t j) const { return factor_table[row * spec.factors.size() + j]; }

  /// Row holding a factor combination, or -1.
  int find_row(std::span<const int> combination) const;
  /// Images of the given rows mapped to [-1, 1], batch x C x H x W.
  std::vector<float> gather(std::span<const int> rows) const;

  bool operator==(const FactorDataset& o) const {
    return spec == o.spec && seed == o.seed && images == o.images && factor_table == o.factor_table;
  }

  void build_index();

 private:
  std::vector<int> row_of_code_;
};

constexpr std::int64_t kDefaultCombinationCap = 1 << 20;

/// 4x4-supersampled render of a single factor row, C x H x W bytes.
std::vector<std::uint8_t> render(const FactorSpec& spec, std::span<const int> row);

/// Full enumeration; the seed only permutes row order.
FactorDataset generate(const FactorSpec& spec, std::uint64_t seed, std::int64_t cap = kDefaultCombinationCap);

struct FixedFactorBatch {
  int factor_index = 0;
  int value = 0;
  std::vector<int> rows;
};

/// Rows sharing one uniformly drawn value of `factor_index`; other factors uniform,
/// without repeats while enough combinations exist.
FixedFactorBatch sample_fixed_factor(const FactorDataset& ds, int factor_index, int batch, Rng& rng);

void save(const FactorDataset& ds, const std::filesystem::path& path);
FactorDataset load(const std::filesystem::path& path);

struct DatasetHeader {
  std::uint32_t version = 0;
  FactorSpec spec;
  std::uint64_t seed = 0;
  std::size_t count = 0;
};
/// Reads only the header; images are not touched.
DatasetHeader read_header(const std::filesystem::path& path);

constexpr std::uint32_t kDatasetVersion = 1;

}  // namespace encdiff
