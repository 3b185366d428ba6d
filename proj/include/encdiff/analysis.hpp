#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "encdiff/theory.hpp"
#include "encdiff/training.hpp"

namespace encdiff {

// ---- bottleneck curves

struct CurveRow {
  ScheduleKind kind;
  int t;
  double closed_form;
  double monte_carlo;  // NaN when not computed
};

enum class CurveMode { closed_form, monte_carlo, both };
CurveMode parse_curve_mode(const std::string& s);
std::string to_string(CurveMode m);

std::vector<CurveRow> bottleneck_curves(const std::vector<ScheduleKind>& kinds, const ScheduleParams& base, CurveMode mode,
                                        const MonteCarloSource& mc);
std::string curves_csv(const std::vector<CurveRow>& rows, CurveMode mode);
void plot_curves(const std::filesystem::path& path, const std::vector<CurveRow>& rows, CurveMode mode);

// ---- images

/// Tiles (C x S x S planar, values in [-1, 1]) laid out row-major on a grid.
/// Missing tiles stay black.
void write_image_grid(const std::filesystem::path& path, const std::vector<std::vector<float>>& tiles, int rows, int cols,
                      int size, int channels = 3);

struct PlotSeries {
  std::vector<double> x, y;
  std::array<std::uint8_t, 3> color{0, 0, 0};
  std::string label;
};
/// Line chart with a log10 y axis; labels and axis ranges go into PNG text chunks.
void write_line_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series, const std::string& title,
                     int width = 720, int height = 450);

// ---- factor swapping

/// Mean over pixels of the distance between luminance-free colour vectors (rgb - mean(rgb)).
double chroma_delta(std::span<const float> a, std::span<const float> b, int size);

struct SwapResult {
  std::vector<float> original_a, original_b;
  std::vector<float> no_swap;               // sample on a's own tokens
  std::vector<std::vector<float>> swapped;  // one per token index
  std::vector<double> chroma_deltas;        // swapped[i] vs no_swap
};
SwapResult swap_experiment(const EncDiffSystem& sys, const FactorDataset& ds, int row_a, int row_b, const SamplerConfig& sampler);

// ---- attention maps

enum class AttentionReduce { per_step, mean_over_steps };
AttentionReduce parse_attention_reduce(const std::string& s);
std::string to_string(AttentionReduce r);

/// Token attention averaged over cross-attention layers and upsampled (nearest) to the image.
struct AttentionDump {
  int steps = 0, tokens = 0, size = 0;
  std::vector<int> timesteps;
  std::vector<double> values;  // [steps][tokens][size][size]
  double at(int s, int n, int y, int x) const {
    return values[((static_cast<std::size_t>(s) * tokens + n) * size + y) * size + x];
  }
};

AttentionDump attention_maps(const std::vector<StepAttention>& steps, int image_size, int batch_index = 0);
/// Arithmetic mean of the dump over its steps, as a one-step dump.
AttentionDump mean_over_steps(const AttentionDump& d);

void save_attention_dump(const AttentionDump& d, const std::filesystem::path& path);
AttentionDump load_attention_dump(const std::filesystem::path& path);

/// Heatmap of one token of one step, per-map min-max rescaled, with a colour bar footer.
void write_heatmap(const std::filesystem::path& path, const AttentionDump& d, int step, int token);

// ---- evaluation

enum class RepresentationChoice { automatic, scalars, tokens, pca };
NLOHMANN_JSON_SERIALIZE_ENUM(RepresentationChoice, {{RepresentationChoice::automatic, "auto"},
                                                    {RepresentationChoice::scalars, "scalars"},
                                                    {RepresentationChoice::tokens, "tokens"},
                                                    {RepresentationChoice::pca, "pca"}})

class IncompatibleRepresentation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// auto: scalars in scalar mode, per-token PCA in vector mode.
RepresentationMatrix select_representation(const EncDiffSystem& sys, const DatasetEncoding& enc, RepresentationChoice choice);

struct EvalOptions {
  bool factorvae = true;
  bool dci = true;
  bool recon = false;
  std::vector<std::uint64_t> seeds{0};
  RepresentationChoice representation = RepresentationChoice::automatic;
  FactorVaeConfig factorvae_config;
  DciConfig dci_config;
  SamplerConfig sampler;
  int recon_images = 16;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalOptions, factorvae, dci, recon, seeds, representation, factorvae_config,
                                                dci_config, sampler, recon_images)

/// Each metric is computed once per seed; the encoding itself is seed-free.
MetricReport evaluate(const EncDiffSystem& sys, const FactorDataset& ds, const EvalOptions& opt);

// ---- theory checks

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct ChecksOptions {
  int T = 1000;
  int vlb_trials = 1000;
  long kl_samples = 1'000'000;
  int mc_samples = 10000;
  double mc_tolerance = 0.02;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ChecksOptions, T, vlb_trials, kl_samples, mc_samples, mc_tolerance)

std::vector<CheckResult> run_theory_checks(const ChecksOptions& opt, std::uint64_t seed);

}  // namespace encdiff
