#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "encdiff/dataset.hpp"
#include "encdiff/diffusion.hpp"
#include "encdiff/encoder.hpp"
#include "encdiff/metrics.hpp"
#include "encdiff/nn.hpp"
#include "encdiff/schedules.hpp"

namespace encdiff {

NLOHMANN_JSON_SERIALIZE_ENUM(ScheduleKind, {{ScheduleKind::cosine, "cosine"},
                                            {ScheduleKind::linear, "linear"},
                                            {ScheduleKind::sqrt_linear, "sqrt_linear"},
                                            {ScheduleKind::sqrt, "sqrt"}})
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ScheduleParams, kind, T, beta_start, beta_end)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SamplerConfig, num_steps, stochastic, seed, clip_denoised)

enum class Variant { encdiff, encdec_no_diff };
NLOHMANN_JSON_SERIALIZE_ENUM(Variant, {{Variant::encdiff, "encdiff"}, {Variant::encdec_no_diff, "encdec_no_diff"}})

/// Top-level fields override the matching fields of the nested network configs.
struct TrainConfig {
  int batch_size = 64;
  double learning_rate = 1e-4;
  double ema_decay = 0.9999;
  /// Effective decay min(ema_decay, (1 + n) / (10 + n)) at update n.
  bool ema_warmup = true;
  int steps = 15000;
  ScheduleParams schedule;
  int image_size = 32;
  int num_tokens = 20;
  int token_dim = 32;
  Conditioning conditioning = Conditioning::cross_attention;
  TokenMode token_mode = TokenMode::scalar;
  Variant variant = Variant::encdiff;
  std::uint64_t seed = 0;
  UNetConfig unet;
  EncoderConfig encoder;

  /// Copies of the nested configs with the top-level fields applied.
  UNetConfig unet_config() const;
  EncoderConfig encoder_config() const;
  void validate() const;

  /// A few-minute configuration for tests and smoke runs.
  static TrainConfig tiny();
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, batch_size, learning_rate, ema_decay, ema_warmup, steps,
                                                schedule, image_size, num_tokens, token_dim, conditioning, token_mode,
                                                variant, seed, unet, encoder)

class InconsistentConfig : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Encoder plus conditional image network sharing one parameter set.
/// Encoder parameters are named "encoder.*", the image network "unet.*" or "decoder.*".
struct EncDiffSystem {
  using S = float;
  TrainConfig config;
  DiffusionCoefficients coeffs;
  ParameterSet<S> params;
  std::unique_ptr<Encoder<S>> encoder;
  std::unique_ptr<ImageModel<S>> model;

  Eigen::Index encoder_parameter_count() const { return params.count_with_prefix("encoder."); }
  Eigen::Index model_parameter_count() const { return params.parameter_count() - encoder_parameter_count(); }

  /// Tokens of a [B, C, H, W] batch.
  EncodedBatch<S> encode(const Tensor<S>& images) const { return encoder->encode(images); }
};

std::unique_ptr<EncDiffSystem> build_variant(const TrainConfig& cfg);

/// Values of one loss evaluation, kept so the loss can be recomputed.
struct LossRecord {
  Tensor<float> loss;
  std::vector<int> t;
  ag::Array<float> eps;
  ag::Array<float> x_t;
};

/// Per-element mean of |eps_theta(x_t, t, S) - eps|^2 with t ~ U{1..T} and eps ~ N(0, I) per example.
LossRecord ddpm_loss(const ImageModel<float>& model, const Tensor<float>& x0, const Tensor<float>& tokens,
                     const DiffusionCoefficients& c, Rng& rng, const ForwardContext& ctx = {});

/// ema <- decay * ema + (1 - decay) * params
void ema_update(ag::Array<float>& ema, const ag::Array<float>& params, double decay);
double ema_effective_decay(double decay, long update_index, bool warmup);

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long step = 0;
  std::vector<ag::Array<float>> m, v;
};

void adam_step(ParameterSet<float>& params, AdamState& state, double lr);

struct Checkpoint {
  TrainConfig config;
  int step = 0;
  std::vector<std::string> names;          // parameter declaration order
  std::vector<std::vector<int>> shapes;
  ag::Array<float> params, ema, adam_m, adam_v;
  long adam_step = 0;
  std::string rng_state;
  std::vector<double> loss_history;         // one entry per completed step
  bool operator==(const Checkpoint&) const;
};

constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& msg, int step_, std::string layer_)
      : std::runtime_error(msg), step(step_), layer(std::move(layer_)) {}
  int step;
  std::string layer;
};

struct TrainCallbacks {
  std::function<void(int step, double loss)> on_step;
};

/// Owns the system, optimizer state, EMA and RNG of one training run.
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const FactorDataset& ds);
  Trainer(const Checkpoint& ck, const FactorDataset& ds);

  /// Runs optimizer steps until `until_step` (default: config.steps).
  void run(std::optional<int> until_step = std::nullopt, const TrainCallbacks& cb = {});
  /// One optimizer step; returns the loss.
  double step();

  Checkpoint checkpoint() const;
  EncDiffSystem& system() { return *sys_; }
  const EncDiffSystem& system() const { return *sys_; }
  const ag::Array<float>& ema() const { return ema_; }
  int current_step() const { return step_; }
  const std::vector<double>& loss_history() const { return losses_; }

 private:
  void check_dataset() const;
  const FactorDataset& ds_;
  std::unique_ptr<EncDiffSystem> sys_;
  AdamState adam_;
  ag::Array<float> ema_;
  Rng rng_;
  int step_ = 0;
  std::vector<double> losses_;
};

Checkpoint train(const TrainConfig& cfg, const FactorDataset& ds, const TrainCallbacks& cb = {});

std::string loss_csv(const std::vector<double>& losses);

/// A system restored from a checkpoint with EMA weights loaded (or raw weights).
std::unique_ptr<EncDiffSystem> restore(const Checkpoint& ck, bool use_ema = true);

/// Tokens and scalars of every dataset row, no autograd.
struct DatasetEncoding {
  Eigen::MatrixXd scalars;  // M x N, scalar mode only
  Eigen::MatrixXd tokens;   // M x (N * d)
};
DatasetEncoding encode_dataset(const EncDiffSystem& sys, const FactorDataset& ds, int batch = 128);
DatasetEncoding encode_rows(const EncDiffSystem& sys, const FactorDataset& ds, const std::vector<int>& rows, int batch = 128);

/// Scalars in scalar mode; per-token first principal component in vector mode.
RepresentationMatrix representation_for_metrics(const EncDiffSystem& sys, const DatasetEncoding& enc);

/// Token set of one encoded row.
ConceptTokenSet token_set(const DatasetEncoding& enc, int row, const TrainConfig& cfg);

/// Attention weights of every cross-attention layer at one visited step.
struct StepAttention {
  int t = 0;
  std::vector<ag::AttentionWeights> layers;
};

/// Samples for each token set, [B, C, H, W] flattened. Every sample starts from
/// the same x_T drawn from `cfg.seed`, and token sets are processed `chunk` at a
/// time, so a sample depends only on its own tokens when chunk = 1. The
/// decoder-only variant is evaluated once without sampling.
ag::Array<float> generate_images(const EncDiffSystem& sys, const std::vector<ConceptTokenSet>& tokens, const SamplerConfig& cfg,
                                 std::vector<StepAttention>* attention = nullptr, int chunk = 1);

/// MSE between `num_images` seed-chosen dataset images and samples conditioned on their own tokens.
double recon_mse(const EncDiffSystem& sys, const FactorDataset& ds, const SamplerConfig& sampler, int num_images,
                 std::uint64_t seed);

}  // namespace encdiff
