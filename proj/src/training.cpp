#include "encdiff/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace encdiff {

UNetConfig TrainConfig::unet_config() const {
  UNetConfig u = unet;
  u.image_size = image_size;
  u.num_tokens = num_tokens;
  u.token_dim = token_dim;
  u.conditioning = conditioning;
  return u;
}

EncoderConfig TrainConfig::encoder_config() const {
  EncoderConfig e = encoder;
  e.image_size = image_size;
  e.num_tokens = num_tokens;
  e.token_dim = token_dim;
  e.mode = token_mode;
  return e;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw InconsistentConfig("TrainConfig: " + m); };
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(learning_rate > 0)) fail("learning_rate must be positive");
  if (!(ema_decay >= 0 && ema_decay <= 1)) fail("ema_decay must be in [0, 1]");
  if (steps < 0) fail("steps must be >= 0");
  if (variant == Variant::encdec_no_diff && conditioning != Conditioning::cross_attention)
    fail("encdec_no_diff feeds tokens through cross-attention; adagn conditioning is not available");
  unet_config().validate();
  encoder_config().validate();
}

TrainConfig TrainConfig::tiny() {
  TrainConfig c;
  c.batch_size = 8;
  c.learning_rate = 1e-3;
  c.ema_decay = 0.999;
  c.steps = 500;
  c.image_size = 16;
  c.num_tokens = 6;
  c.token_dim = 8;
  c.unet.base_channels = 8;
  c.unet.channel_multipliers = {1, 2};
  c.unet.attention_resolutions = {1, 2};
  c.unet.num_heads = 2;
  c.unet.time_embed_dim = 32;
  c.unet.groups = 4;
  c.unet.dropout = 0.0;
  c.encoder.convs = {{16, 3, 1, 1}, {32, 4, 2, 1}, {32, 4, 2, 1}};
  c.encoder.fc_hidden = {64};
  return c;
}

std::unique_ptr<EncDiffSystem> build_variant(const TrainConfig& cfg) {
  cfg.validate();
  auto sys = std::make_unique<EncDiffSystem>();
  sys->config = cfg;
  sys->coeffs = derive_coefficients(make_schedule(cfg.schedule).betas);
  Rng rng(cfg.seed);
  sys->encoder = std::make_unique<Encoder<float>>(sys->params, "encoder", cfg.encoder_config(), rng);
  if (cfg.variant == Variant::encdiff)
    sys->model = std::make_unique<UNet<float>>(sys->params, "unet", cfg.unet_config(), rng);
  else
    sys->model = std::make_unique<TokenDecoder<float>>(sys->params, "decoder", cfg.unet_config(), rng);
  return sys;
}

LossRecord ddpm_loss(const ImageModel<float>& model, const Tensor<float>& x0, const Tensor<float>& tokens,
                     const DiffusionCoefficients& c, Rng& rng, const ForwardContext& ctx) {
  if (!model.has_timestep_input()) throw std::invalid_argument("ddpm_loss: model has no timestep input");
  if (x0.rank() != 4 || tokens.rank() != 3 || tokens.dim(0) != x0.dim(0))
    throw std::invalid_argument("ddpm_loss: x0 " + ag::shape_str(x0.shape()) + " and tokens " + ag::shape_str(tokens.shape()) +
                                " are not batch-compatible");
  const int B = x0.dim(0);
  const Eigen::Index n = x0.size() / B;
  LossRecord rec;
  rec.t.resize(static_cast<std::size_t>(B));
  rec.eps.resize(x0.size());
  rec.x_t.resize(x0.size());
  for (int b = 0; b < B; ++b) {
    const int t = rng.uniform_int(1, c.T());
    rec.t[static_cast<std::size_t>(b)] = t;
    const auto sa = static_cast<float>(std::sqrt(c.alpha_bar(t)));
    const auto sb = static_cast<float>(std::sqrt(1.0 - c.alpha_bar(t)));
    for (Eigen::Index k = b * n; k < (b + 1) * n; ++k) {
      rec.eps[k] = static_cast<float>(rng.normal());
      rec.x_t[k] = sa * x0.value()[k] + sb * rec.eps[k];
    }
  }
  const auto x_t = Tensor<float>::constant(x0.shape(), rec.x_t);
  const auto eps = Tensor<float>::constant(x0.shape(), rec.eps);
  rec.loss = ag::mse(model.forward(x_t, rec.t, tokens, ctx), eps);
  return rec;
}

double ema_effective_decay(double decay, long update_index, bool warmup) {
  if (!warmup) return decay;
  return std::min(decay, (1.0 + static_cast<double>(update_index)) / (10.0 + static_cast<double>(update_index)));
}

void ema_update(ag::Array<float>& ema, const ag::Array<float>& params, double decay) {
  if (ema.size() != params.size()) throw std::invalid_argument("ema_update: size mismatch");
  if (decay == 1.0) return;
  if (decay == 0.0) {
    ema = params;
    return;
  }
  ema = static_cast<float>(decay) * ema + static_cast<float>(1.0 - decay) * params;
}

void adam_step(ParameterSet<float>& params, AdamState& st, double lr) {
  auto& entries = params.entries();
  if (st.m.empty()) {
    for (const auto& e : entries) {
      st.m.push_back(ag::Array<float>::Zero(e.tensor.size()));
      st.v.push_back(ag::Array<float>::Zero(e.tensor.size()));
    }
  }
  ++st.step;
  const auto b1 = static_cast<float>(st.beta1), b2 = static_cast<float>(st.beta2);
  const auto c1 = static_cast<float>(1.0 - std::pow(st.beta1, static_cast<double>(st.step)));
  const auto c2 = static_cast<float>(1.0 - std::pow(st.beta2, static_cast<double>(st.step)));
  const auto step = static_cast<float>(lr);
  const auto eps = static_cast<float>(st.eps);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& t = entries[i].tensor;
    if (t.grad().size() != t.size()) continue;
    auto& m = st.m[i];
    auto& v = st.v[i];
    m = b1 * m + (1.0f - b1) * t.grad();
    v = b2 * v + (1.0f - b2) * t.grad().square();
    t.value() -= step * (m / c1) / ((v / c2).sqrt() + eps);
  }
}

Trainer::Trainer(const TrainConfig& cfg, const FactorDataset& ds)
    : ds_(ds), sys_(build_variant(cfg)), rng_(cfg.seed + 0x9E3779B97F4A7C15ULL) {
  check_dataset();
  ema_ = sys_->params.flat_values();
}

Trainer::Trainer(const Checkpoint& ck, const FactorDataset& ds) : ds_(ds), sys_(build_variant(ck.config)) {
  check_dataset();
  const auto& entries = sys_->params.entries();
  if (ck.names.size() != entries.size()) throw std::invalid_argument("checkpoint does not match the configured architecture");
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (ck.names[i] != entries[i].name || ck.shapes[i] != entries[i].tensor.shape())
      throw std::invalid_argument("checkpoint parameter '" + ck.names[i] + "' does not match the architecture");
  sys_->params.assign_flat(ck.params);
  ema_ = ck.ema;
  adam_.step = ck.adam_step;
  if (ck.adam_step > 0) {
    Eigen::Index off = 0;
    for (const auto& e : entries) {
      adam_.m.push_back(ck.adam_m.segment(off, e.tensor.size()));
      adam_.v.push_back(ck.adam_v.segment(off, e.tensor.size()));
      off += e.tensor.size();
    }
  }
  rng_.set_state(ck.rng_state);
  step_ = ck.step;
  losses_ = ck.loss_history;
}

void Trainer::check_dataset() const {
  if (ds_.size() == 0) throw std::invalid_argument("training needs a nonempty dataset");
  if (ds_.spec.image_size != sys_->config.image_size || ds_.spec.channels != sys_->config.unet.in_channels)
    throw std::invalid_argument("dataset images are " + std::to_string(ds_.spec.image_size) + "px, config expects " +
                                std::to_string(sys_->config.image_size) + "px");
}

double Trainer::step() {
  auto& sys = *sys_;
  const auto& cfg = sys.config;
  const int B = cfg.batch_size, S = cfg.image_size, C = ds_.spec.channels;
  std::vector<int> rows(static_cast<std::size_t>(B));
  for (auto& r : rows) r = rng_.uniform_int(0, static_cast<int>(ds_.size()) - 1);
  const auto pixels = ds_.gather(rows);
  const auto x0 = Tensor<float>::constant({B, C, S, S}, Eigen::Map<const ag::Array<float>>(pixels.data(), static_cast<Eigen::Index>(pixels.size())));

  sys.params.zero_grad();
  const ForwardContext ctx{true, &rng_, nullptr};
  const auto enc = sys.encode(x0);
  Tensor<float> loss;
  if (cfg.variant == Variant::encdiff) {
    loss = ddpm_loss(*sys.model, x0, enc.tokens, sys.coeffs, rng_, ctx).loss;
  } else {
    loss = ag::mse(sys.model->forward(x0, {}, enc.tokens, ctx), x0);
  }
  const double value = loss.item();
  const int this_step = step_ + 1;
  if (!std::isfinite(value))
    throw NonFiniteLoss("non-finite loss at step " + std::to_string(this_step), this_step, "loss");
  ag::backward(loss);
  for (const auto& e : sys.params.entries())
    if (e.tensor.grad().size() > 0 && !e.tensor.grad().allFinite())
      throw NonFiniteLoss("non-finite gradient at step " + std::to_string(this_step) + " in " + e.name, this_step, e.name);

  adam_step(sys.params, adam_, cfg.learning_rate);
  const float d = static_cast<float>(ema_effective_decay(cfg.ema_decay, step_, cfg.ema_warmup));
  Eigen::Index off = 0;
  for (const auto& e : sys.params.entries()) {
    const auto n = e.tensor.size();
    auto seg = ema_.segment(off, n);
    if (d == 0.0f)
      seg = e.tensor.value();
    else if (d != 1.0f)
      seg = d * seg + (1.0f - d) * e.tensor.value();
    off += n;
  }
  step_ = this_step;
  losses_.push_back(value);
  return value;
}

void Trainer::run(std::optional<int> until_step, const TrainCallbacks& cb) {
  const int until = until_step.value_or(sys_->config.steps);
  while (step_ < until) {
    const double l = step();
    if (cb.on_step) cb.on_step(step_, l);
  }
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck;
  ck.config = sys_->config;
  ck.step = step_;
  for (const auto& e : sys_->params.entries()) {
    ck.names.push_back(e.name);
    ck.shapes.push_back(e.tensor.shape());
  }
  ck.params = sys_->params.flat_values();
  ck.ema = ema_;
  const auto n = ck.params.size();
  ck.adam_m = ag::Array<float>::Zero(n);
  ck.adam_v = ag::Array<float>::Zero(n);
  Eigen::Index off = 0;
  for (std::size_t i = 0; i < adam_.m.size(); ++i) {
    ck.adam_m.segment(off, adam_.m[i].size()) = adam_.m[i];
    ck.adam_v.segment(off, adam_.v[i].size()) = adam_.v[i];
    off += adam_.m[i].size();
  }
  ck.adam_step = adam_.step;
  ck.rng_state = rng_.state();
  ck.loss_history = losses_;
  return ck;
}

Checkpoint train(const TrainConfig& cfg, const FactorDataset& ds, const TrainCallbacks& cb) {
  Trainer tr(cfg, ds);
  tr.run(std::nullopt, cb);
  return tr.checkpoint();
}

std::string loss_csv(const std::vector<double>& losses) {
  std::ostringstream os;
  os.precision(9);
  os << "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) os << i + 1 << ',' << losses[i] << '\n';
  return os.str();
}

std::unique_ptr<EncDiffSystem> restore(const Checkpoint& ck, bool use_ema) {
  auto sys = build_variant(ck.config);
  sys->params.assign_flat(use_ema ? ck.ema : ck.params);
  return sys;
}

DatasetEncoding encode_rows(const EncDiffSystem& sys, const FactorDataset& ds, const std::vector<int>& rows, int batch) {
  ag::NoGradGuard no_grad;
  const auto& cfg = sys.config;
  const int N = cfg.num_tokens, d = cfg.token_dim, S = ds.spec.image_size, C = ds.spec.channels;
  if (S != cfg.image_size) throw std::invalid_argument("dataset resolution does not match the model");
  const auto M = static_cast<Eigen::Index>(rows.size());
  DatasetEncoding out;
  out.tokens.resize(M, N * d);
  if (cfg.token_mode == TokenMode::scalar) out.scalars.resize(M, N);
  for (Eigen::Index start = 0; start < M; start += batch) {
    const auto B = static_cast<int>(std::min<Eigen::Index>(batch, M - start));
    const std::vector<int> part(rows.begin() + start, rows.begin() + start + B);
    const auto pixels = ds.gather(part);
    const auto x = Tensor<float>::constant({B, C, S, S}, Eigen::Map<const ag::Array<float>>(pixels.data(), static_cast<Eigen::Index>(pixels.size())));
    const auto enc = sys.encode(x);
    for (int b = 0; b < B; ++b) {
      for (int k = 0; k < N * d; ++k) out.tokens(start + b, k) = enc.tokens.value()[static_cast<Eigen::Index>(b) * N * d + k];
      if (cfg.token_mode == TokenMode::scalar)
        for (int k = 0; k < N; ++k) out.scalars(start + b, k) = enc.scalars.value()[static_cast<Eigen::Index>(b) * N + k];
    }
  }
  return out;
}

DatasetEncoding encode_dataset(const EncDiffSystem& sys, const FactorDataset& ds, int batch) {
  std::vector<int> rows(ds.size());
  std::iota(rows.begin(), rows.end(), 0);
  return encode_rows(sys, ds, rows, batch);
}

RepresentationMatrix representation_for_metrics(const EncDiffSystem& sys, const DatasetEncoding& enc) {
  if (sys.config.token_mode == TokenMode::scalar) return {enc.scalars, RepresentationSource::scalar};
  return pca_per_block({enc.tokens, RepresentationSource::vector}, sys.config.token_dim);
}

ConceptTokenSet token_set(const DatasetEncoding& enc, int row, const TrainConfig& cfg) {
  ConceptTokenSet s;
  s.mode = cfg.token_mode;
  s.tokens.resize(cfg.num_tokens, cfg.token_dim);
  for (int i = 0; i < cfg.num_tokens; ++i)
    for (int j = 0; j < cfg.token_dim; ++j) s.tokens(i, j) = enc.tokens(row, i * cfg.token_dim + j);
  if (cfg.token_mode == TokenMode::scalar) s.scalars = enc.scalars.row(row).transpose();
  return s;
}

ag::Array<float> generate_images(const EncDiffSystem& sys, const std::vector<ConceptTokenSet>& tokens, const SamplerConfig& cfg,
                                 std::vector<StepAttention>* attention, int chunk) {
  ag::NoGradGuard no_grad;
  if (chunk < 1) throw std::invalid_argument("generate_images: chunk must be >= 1");
  const auto& tc = sys.config;
  const int C = tc.unet.in_channels, S = tc.image_size;
  const Eigen::Index per = static_cast<Eigen::Index>(C) * S * S;
  ag::Array<float> out(static_cast<Eigen::Index>(tokens.size()) * per);

  Rng noise(cfg.seed);
  ag::Array<float> x_T(per);
  for (auto& v : x_T) v = static_cast<float>(noise.normal());

  for (std::size_t start = 0; start < tokens.size(); start += static_cast<std::size_t>(chunk)) {
    const std::size_t end = std::min(tokens.size(), start + static_cast<std::size_t>(chunk));
    const std::vector<ConceptTokenSet> part(tokens.begin() + static_cast<std::ptrdiff_t>(start), tokens.begin() + static_cast<std::ptrdiff_t>(end));
    const int B = static_cast<int>(part.size());
    const auto tok = tokens_tensor<float>(part);
    ForwardContext ctx;
    auto capture = [&](int t, auto&& fn) {
      if (!attention) return fn(static_cast<std::vector<ag::AttentionWeights>*>(nullptr));
      StepAttention st;
      st.t = t;
      auto r = fn(&st.layers);
      attention->push_back(std::move(st));
      return r;
    };
    ag::Array<float> result;
    if (!sys.model->has_timestep_input()) {
      result = capture(0, [&](std::vector<ag::AttentionWeights>* maps) {
        ctx.attention_maps = maps;
        return ag::Array<float>(sys.model->forward(Tensor<float>(), {}, tok, ctx).value());
      });
    } else {
      const EpsFn<float> eps_fn = [&](const ag::Array<float>& x, int t) {
        return capture(t, [&](std::vector<ag::AttentionWeights>* maps) {
          ctx.attention_maps = maps;
          const auto xt = Tensor<float>::constant({B, C, S, S}, x);
          return ag::Array<float>(sys.model->forward(xt, std::vector<int>(static_cast<std::size_t>(B), t), tok, ctx).value());
        });
      };
      result = ancestral_sample<float>(eps_fn, x_T.replicate(B, 1).eval(), sys.coeffs, cfg);
    }
    out.segment(static_cast<Eigen::Index>(start) * per, B * per) = result;
  }
  return out;
}

double recon_mse(const EncDiffSystem& sys, const FactorDataset& ds, const SamplerConfig& sampler, int num_images,
                 std::uint64_t seed) {
  if (num_images < 1 || static_cast<std::size_t>(num_images) > ds.size())
    throw std::invalid_argument("recon_mse: num_images must be in [1, M]");
  std::vector<int> rows(ds.size());
  std::iota(rows.begin(), rows.end(), 0);
  Rng rng(seed);
  for (int i = 0; i < num_images; ++i) std::swap(rows[static_cast<std::size_t>(i)], rows[static_cast<std::size_t>(rng.uniform_int(i, static_cast<int>(ds.size()) - 1))]);
  rows.resize(static_cast<std::size_t>(num_images));
  const auto enc = encode_rows(sys, ds, rows);
  std::vector<ConceptTokenSet> sets;
  for (int i = 0; i < num_images; ++i) sets.push_back(token_set(enc, i, sys.config));
  const auto samples = generate_images(sys, sets, sampler, nullptr, 16);
  const auto truth = ds.gather(rows);
  return mean_squared_error({samples.data(), static_cast<std::size_t>(samples.size())}, truth);
}

}  // namespace encdiff
