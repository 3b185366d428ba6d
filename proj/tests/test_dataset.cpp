#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>

#include "encdiff/dataset.hpp"
#include "encdiff/io.hpp"

using namespace encdiff;

namespace {

std::filesystem::path tmp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "encdiff_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

FactorSpec small_spec() { return {{{"shape", 3}, {"scale", 2}, {"pos_x", 3}, {"hue", 6}}, 16, 3}; }

}  // namespace

TEST_CASE("default spec enumerates 4608 unique rows") {
  const auto ds = generate(FactorSpec::minishapes(), 0);
  CHECK(ds.size() == 3 * 4 * 8 * 8 * 6);
  std::set<std::vector<int>> rows;
  for (std::size_t i = 0; i < ds.size(); ++i) rows.insert({ds.factors(i).begin(), ds.factors(i).end()});
  CHECK(rows.size() == ds.size());
  for (std::size_t i = 0; i < ds.size(); i += 97) CHECK(ds.find_row(ds.factors(i)) == static_cast<int>(i));
}

TEST_CASE("generation is deterministic and rendering is pure") {
  const auto a = generate(small_spec(), 5);
  const auto b = generate(small_spec(), 5);
  CHECK(a == b);
  const auto c = generate(small_spec(), 6);
  CHECK(c.images != a.images);
  for (std::size_t i = 0; i < a.size(); i += 7) {
    const auto img = render(a.spec, a.factors(i));
    CHECK(std::equal(img.begin(), img.end(), a.image(i).begin()));
    CHECK(render(a.spec, a.factors(i)) == img);
  }
}

TEST_CASE("changing hue only changes chroma") {
  const auto spec = FactorSpec::minishapes(32);
  for (int shape = 0; shape < 3; ++shape) {
    std::vector<int> row{shape, 2, 3, 5, 0};
    const auto base = render(spec, row);
    const std::size_t plane = 32 * 32;
    for (int hue = 1; hue < 6; ++hue) {
      row[4] = hue;
      const auto other = render(spec, row);
      CHECK(other != base);
      bool gray_equal = true;
      for (std::size_t p = 0; p < plane; ++p) {
        const int g0 = base[p] + base[plane + p] + base[2 * plane + p];
        const int g1 = other[p] + other[plane + p] + other[2 * plane + p];
        gray_equal &= g0 == g1;
      }
      CHECK(gray_equal);
    }
  }
}

TEST_CASE("renders use the byte range and vary smoothly") {
  for (int size : {16, 32, 64}) {
    const auto spec = FactorSpec::minishapes(size);
    const auto img = render(spec, std::vector<int>{1, 3, 0, 7, 2});
    CHECK(*std::min_element(img.begin(), img.end()) < 64);
    CHECK(*std::max_element(img.begin(), img.end()) > 192);
    // anti-aliased edge pixels exist
    std::set<int> levels(img.begin(), img.end());
    CHECK(levels.size() > 4);
  }
  const auto spec = FactorSpec::minishapes(32);
  std::set<std::vector<std::uint8_t>> scales;
  for (int s = 0; s < 4; ++s) scales.insert(render(spec, std::vector<int>{0, s, 4, 4, 1}));
  CHECK(scales.size() == 4);
}

TEST_CASE("invalid specs are rejected") {
  auto spec = FactorSpec::minishapes();
  spec.image_size = 24;
  CHECK_THROWS_AS(generate(spec, 0), std::invalid_argument);
  spec = FactorSpec::minishapes();
  spec.factors[1].cardinality = 1;
  CHECK_THROWS_AS(generate(spec, 0), std::invalid_argument);
  spec = FactorSpec::minishapes();
  spec.factors.push_back({"texture", 2});
  CHECK_THROWS_AS(generate(spec, 0), std::invalid_argument);
  CHECK_THROWS_AS(generate(FactorSpec::minishapes(), 0, 1000), DatasetOverflow);
}

TEST_CASE("fixed-factor sampling") {
  const auto ds = generate(FactorSpec::minishapes(16), 3);
  Rng rng(11);
  const int F = static_cast<int>(ds.spec.factors.size());
  for (int j = 0; j < F; ++j) {
    const auto b = sample_fixed_factor(ds, j, 64, rng);
    CHECK(b.rows.size() == 64);
    CHECK(std::set<int>(b.rows.begin(), b.rows.end()).size() == 64);
    for (int r : b.rows) CHECK(ds.factor(static_cast<std::size_t>(r), static_cast<std::size_t>(j)) == b.value);
  }
  const auto two = sample_fixed_factor(ds, 0, 2, rng);
  CHECK(two.rows[0] != two.rows[1]);
  CHECK_THROWS_AS(sample_fixed_factor(ds, F, 8, rng), std::out_of_range);
  CHECK_THROWS_AS(sample_fixed_factor(ds, -1, 8, rng), std::out_of_range);
  CHECK_THROWS_AS(sample_fixed_factor(ds, 0, 1, rng), std::invalid_argument);
}

TEST_CASE("fixed values and free factors are uniform") {
  const auto ds = generate(FactorSpec::minishapes(16), 3);
  Rng rng(4);
  const int draws = 6000;
  const int hue = ds.spec.index_of("hue");
  const int pos_x = ds.spec.index_of("pos_x");
  std::map<int, int> fixed_counts, free_counts;
  for (int i = 0; i < draws; ++i) {
    const auto b = sample_fixed_factor(ds, hue, 4, rng);
    ++fixed_counts[b.value];
    ++free_counts[ds.factor(static_cast<std::size_t>(b.rows[0]), static_cast<std::size_t>(pos_x))];
  }
  CHECK(fixed_counts.size() == 6);
  for (auto [v, c] : fixed_counts) CHECK(std::abs(static_cast<double>(c) / draws - 1.0 / 6) < 0.05);
  for (auto [v, c] : free_counts) CHECK(std::abs(static_cast<double>(c) / draws - 1.0 / 8) < 0.05);
}

TEST_CASE("save and load round trip with checksum") {
  const auto ds = generate(small_spec(), 9);
  const auto path = tmp_path("small.mshp");
  save(ds, path);
  const auto back = load(path);
  CHECK(back == ds);
  CHECK(back.find_row(ds.factors(3)) == 3);

  const auto bytes = io::read_file(path);
  save(back, tmp_path("small2.mshp"));
  CHECK(io::read_file(tmp_path("small2.mshp")) == bytes);

  const auto h = read_header(path);
  CHECK(h.spec == ds.spec);
  CHECK(h.count == ds.size());
  CHECK(h.seed == 9);
  CHECK(h.version == kDatasetVersion);

  auto corrupt = bytes;
  corrupt[corrupt.size() / 2] ^= 0x01;
  io::write_file(tmp_path("corrupt.mshp"), corrupt);
  CHECK_THROWS_AS(load(tmp_path("corrupt.mshp")), io::ChecksumError);

  auto truncated = bytes;
  truncated.resize(bytes.size() / 3);
  io::write_file(tmp_path("trunc.mshp"), truncated);
  CHECK_THROWS_AS(load(tmp_path("trunc.mshp")), io::FormatError);
  truncated.resize(10);
  io::write_file(tmp_path("trunc2.mshp"), truncated);
  CHECK_THROWS_AS(read_header(tmp_path("trunc2.mshp")), io::FormatError);

  auto bad_version = bytes;
  bad_version[4] = 7;
  io::write_file(tmp_path("version.mshp"), bad_version);
  try {
    (void)load(tmp_path("version.mshp"));
    FAIL("expected a version error");
  } catch (const io::FormatError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }
}
