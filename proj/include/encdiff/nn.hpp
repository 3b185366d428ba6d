#pragma once

#include "encdiff/ops.hpp"
#include "encdiff/rng.hpp"
#include "encdiff/tensor.hpp"

#include <json.hpp>

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace encdiff {

using ag::Shape;
using ag::Tensor;

/// Named trainable tensors kept in declaration order. The order defines the
/// checkpoint blob layout.
template <typename Scalar>
class ParameterSet {
 public:
  Tensor<Scalar> add(std::string name, Shape shape, ag::Array<Scalar> init) {
    auto t = Tensor<Scalar>::parameter(std::move(shape), std::move(init));
    entries_.push_back({std::move(name), t});
    return t;
  }
  Tensor<Scalar> uniform(std::string name, Shape shape, double bound, Rng& rng) {
    ag::Array<Scalar> v(ag::numel(shape));
    for (auto& x : v) x = static_cast<Scalar>((2.0 * rng.uniform() - 1.0) * bound);
    return add(std::move(name), std::move(shape), std::move(v));
  }
  Tensor<Scalar> constant(std::string name, Shape shape, double value) {
    const auto n = ag::numel(shape);
    return add(std::move(name), std::move(shape), ag::Array<Scalar>::Constant(n, static_cast<Scalar>(value)));
  }

  struct Entry {
    std::string name;
    Tensor<Scalar> tensor;
  };
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }
  Eigen::Index count_with_prefix(const std::string& prefix) const {
    Eigen::Index n = 0;
    for (const auto& e : entries_)
      if (e.name.rfind(prefix, 0) == 0) n += e.tensor.size();
    return n;
  }
  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }
  bool all_finite() const {
    for (const auto& e : entries_)
      if (!e.tensor.value().allFinite()) return false;
    return true;
  }

  /// Flattened copy of all values, in declaration order.
  ag::Array<Scalar> flat_values() const { return flatten([](const Tensor<Scalar>& t) -> const auto& { return t.value(); }); }
  ag::Array<Scalar> flat_grads() const { return flatten([](const Tensor<Scalar>& t) -> const auto& { return t.grad(); }); }

  template <typename Other>
  void assign_flat(const ag::Array<Other>& flat) {
    if (flat.size() != parameter_count()) throw std::invalid_argument("parameter blob size mismatch");
    Eigen::Index off = 0;
    for (auto& e : entries_) {
      auto& v = e.tensor.value();
      v = flat.segment(off, v.size()).template cast<Scalar>();
      off += v.size();
    }
  }

 private:
  template <typename Get>
  ag::Array<Scalar> flatten(Get get) const {
    ag::Array<Scalar> out(parameter_count());
    Eigen::Index off = 0;
    for (const auto& e : entries_) {
      const auto& v = get(e.tensor);
      out.segment(off, v.size()) = v;
      off += v.size();
    }
    return out;
  }
  std::vector<Entry> entries_;
};

enum class Conditioning { cross_attention, adagn };
NLOHMANN_JSON_SERIALIZE_ENUM(Conditioning, {{Conditioning::cross_attention, "cross_attention"}, {Conditioning::adagn, "adagn"}})

struct UNetConfig {
  int image_size = 32;
  int in_channels = 3;
  int base_channels = 32;
  std::vector<int> channel_multipliers{1, 2, 2};
  int num_res_blocks = 1;
  /// Downsampling factors at which cross-attention blocks are inserted.
  std::vector<int> attention_resolutions{1, 2, 4};
  int num_heads = 4;
  double dropout = 0.1;
  int time_embed_dim = 128;
  int groups = 8;
  int num_tokens = 20;
  int token_dim = 32;
  /// Inner width of the attention projections; 0 means token_dim.
  int attention_dim = 0;
  Conditioning conditioning = Conditioning::cross_attention;
  /// Scale of the output conv init relative to the fan-in bound.
  double output_init_scale = 0.01;

  int attn_dim() const { return attention_dim > 0 ? attention_dim : token_dim; }
  void validate() const;

  /// Layout of the reference 64x64 architecture.
  static UNetConfig reference_layout();
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(UNetConfig, image_size, in_channels, base_channels, channel_multipliers,
                                                num_res_blocks, attention_resolutions, num_heads, dropout, time_embed_dim,
                                                groups, num_tokens, token_dim, attention_dim, conditioning,
                                                output_init_scale)

inline void UNetConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("UNetConfig: " + m); };
  if (channel_multipliers.empty()) fail("channel_multipliers must be nonempty");
  const int levels = static_cast<int>(channel_multipliers.size());
  if (image_size % (1 << (levels - 1)) != 0) fail("image_size not divisible by total downsampling");
  for (int r : attention_resolutions) {
    bool ok = false;
    for (int l = 0; l < levels; ++l) ok = ok || r == (1 << l);
    if (!ok) fail("attention resolution " + std::to_string(r) + " is not a level of the multiplier list");
  }
  for (int m : channel_multipliers)
    if ((base_channels * m) % groups != 0) fail("channel count not divisible by groups");
  if (attn_dim() % num_heads != 0) fail("attention dim not divisible by heads");
  if (time_embed_dim % 2 != 0) fail("time_embed_dim must be even");
}

inline UNetConfig UNetConfig::reference_layout() {
  UNetConfig c;
  c.image_size = 64;
  c.base_channels = 16;
  c.channel_multipliers = {1, 2, 4, 4};
  c.attention_resolutions = {1, 2, 4};
  c.num_heads = 8;
  c.dropout = 0.1;
  c.time_embed_dim = 64;
  c.groups = 8;
  c.num_res_blocks = 2;
  return c;
}

/// Per-call context threaded through forward passes.
struct ForwardContext {
  bool train = false;
  Rng* dropout_rng = nullptr;
  /// When set, every cross-attention layer appends its weights here.
  std::vector<ag::AttentionWeights>* attention_maps = nullptr;
};

/// Sinusoidal features, interleaved as [sin(t f_0), cos(t f_0), sin(t f_1), ...]
/// with f_k = 10000^(-k / (dim/2)).
template <typename Scalar>
ag::Array<Scalar> sinusoidal_embedding(double t, int dim) {
  if (dim % 2 != 0) throw std::invalid_argument("sinusoidal embedding needs an even dim");
  ag::Array<Scalar> out(dim);
  const int half = dim / 2;
  for (int k = 0; k < half; ++k) {
    const double f = std::exp(-std::log(10000.0) * k / half);
    out[2 * k] = static_cast<Scalar>(std::sin(t * f));
    out[2 * k + 1] = static_cast<Scalar>(std::cos(t * f));
  }
  return out;
}

template <typename Scalar>
struct Linear {
  Tensor<Scalar> weight, bias;

  Linear() = default;
  Linear(ParameterSet<Scalar>& ps, const std::string& name, int in, int out, Rng& rng, double init_scale = 1.0,
         bool with_bias = true) {
    const double bound = init_scale / std::sqrt(static_cast<double>(in));
    weight = ps.uniform(name + ".weight", {out, in}, bound, rng);
    if (with_bias) bias = ps.constant(name + ".bias", {out}, 0.0);
  }
  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return ag::linear(x, weight, bias); }
};

template <typename Scalar>
struct Conv2d {
  Tensor<Scalar> weight, bias;
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParameterSet<Scalar>& ps, const std::string& name, int in, int out, int k, int stride_, int pad_, Rng& rng,
         double init_scale = 1.0)
      : stride(stride_), pad(pad_) {
    const double bound = init_scale / std::sqrt(static_cast<double>(in * k * k));
    weight = ps.uniform(name + ".weight", {out, in, k, k}, bound, rng);
    bias = ps.constant(name + ".bias", {out}, 0.0);
  }
  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return ag::conv2d(x, weight, bias, stride, pad); }
};

template <typename Scalar>
struct GroupNorm {
  Tensor<Scalar> gamma, beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(ParameterSet<Scalar>& ps, const std::string& name, int channels, int groups_) : groups(groups_) {
    gamma = ps.constant(name + ".gamma", {channels}, 1.0);
    beta = ps.constant(name + ".beta", {channels}, 0.0);
  }
  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return ag::group_norm(x, groups, gamma, beta); }
};

/// Sinusoid followed by a two-layer MLP.
template <typename Scalar>
struct TimeEmbedding {
  Linear<Scalar> fc1, fc2;
  int sinusoid_dim = 0;

  TimeEmbedding() = default;
  TimeEmbedding(ParameterSet<Scalar>& ps, const std::string& name, int sin_dim, int out_dim, Rng& rng)
      : fc1(ps, name + ".fc1", sin_dim, out_dim, rng), fc2(ps, name + ".fc2", out_dim, out_dim, rng), sinusoid_dim(sin_dim) {}

  Tensor<Scalar> operator()(const std::vector<int>& t) const {
    const int N = static_cast<int>(t.size());
    ag::Array<Scalar> s(static_cast<Eigen::Index>(N) * sinusoid_dim);
    for (int n = 0; n < N; ++n) s.segment(static_cast<Eigen::Index>(n) * sinusoid_dim, sinusoid_dim) =
        sinusoidal_embedding<Scalar>(t[static_cast<std::size_t>(n)], sinusoid_dim);
    auto x = Tensor<Scalar>::constant({N, sinusoid_dim}, std::move(s));
    return fc2(ag::silu(fc1(x)));
  }
};

/// Group norm without its own affine, then per-channel scale and shift
/// predicted from the flattened token set.
template <typename Scalar>
struct AdaGroupNorm {
  Linear<Scalar> to_scale, to_shift;
  int groups = 1, channels = 0;

  AdaGroupNorm() = default;
  AdaGroupNorm(ParameterSet<Scalar>& ps, const std::string& name, int channels_, int cond_dim, int groups_, Rng& rng)
      : groups(groups_), channels(channels_) {
    to_scale = Linear<Scalar>(ps, name + ".scale", cond_dim, channels_, rng);
    to_shift = Linear<Scalar>(ps, name + ".shift", cond_dim, channels_, rng);
    to_scale.bias.value().setOnes();
  }

  /// features[N, C, H, W], cond[N, cond_dim]
  Tensor<Scalar> operator()(const Tensor<Scalar>& features, const Tensor<Scalar>& cond) const {
    if (features.dim(1) != channels) throw std::invalid_argument("AdaGN: channel mismatch");
    auto normed = ag::group_norm(features, groups, Tensor<Scalar>{}, Tensor<Scalar>{});
    return ag::modulate(normed, to_scale(cond), to_shift(cond));
  }
};

/// Flatten tokens [N, S, d] to the concatenated conditioning vector [N, S*d].
template <typename Scalar>
Tensor<Scalar> concat_tokens(const Tensor<Scalar>& tokens) {
  return ag::reshape(tokens, {tokens.dim(0), tokens.dim(1) * tokens.dim(2)});
}

template <typename Scalar>
struct ResBlock {
  GroupNorm<Scalar> norm1, norm2;
  AdaGroupNorm<Scalar> ada_norm2;
  Conv2d<Scalar> conv1, conv2, skip;
  Linear<Scalar> time_proj;
  bool has_time = false, has_skip = false, adaptive = false;
  double dropout = 0.0;

  ResBlock() = default;
  ResBlock(ParameterSet<Scalar>& ps, const std::string& name, int in, int out, int time_dim, int groups, double dropout_,
           int adagn_cond_dim, Rng& rng)
      : dropout(dropout_) {
    norm1 = GroupNorm<Scalar>(ps, name + ".norm1", in, groups);
    conv1 = Conv2d<Scalar>(ps, name + ".conv1", in, out, 3, 1, 1, rng);
    if (time_dim > 0) {
      has_time = true;
      time_proj = Linear<Scalar>(ps, name + ".time_proj", time_dim, out, rng);
    }
    if (adagn_cond_dim > 0) {
      adaptive = true;
      ada_norm2 = AdaGroupNorm<Scalar>(ps, name + ".adanorm2", out, adagn_cond_dim, groups, rng);
    } else {
      norm2 = GroupNorm<Scalar>(ps, name + ".norm2", out, groups);
    }
    conv2 = Conv2d<Scalar>(ps, name + ".conv2", out, out, 3, 1, 1, rng);
    if (in != out) {
      has_skip = true;
      skip = Conv2d<Scalar>(ps, name + ".skip", in, out, 1, 1, 0, rng);
    }
  }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x, const Tensor<Scalar>& temb, const Tensor<Scalar>& cond,
                            const ForwardContext& ctx) const {
    auto h = conv1(ag::silu(norm1(x)));
    if (has_time) h = ag::add_channel_bias(h, time_proj(ag::silu(temb)));
    h = adaptive ? ada_norm2(h, cond) : norm2(h);
    h = ag::silu(h);
    if (ctx.train && dropout > 0.0 && ctx.dropout_rng) h = ag::dropout(h, dropout, *ctx.dropout_rng);
    h = conv2(h);
    return ag::add(has_skip ? skip(x) : x, h);
  }
};

/// Spatial features query the concept tokens; residual output.
template <typename Scalar>
struct CrossAttentionBlock {
  GroupNorm<Scalar> norm;
  Linear<Scalar> to_q, to_k, to_v, to_out;
  int heads = 1;

  CrossAttentionBlock() = default;
  CrossAttentionBlock(ParameterSet<Scalar>& ps, const std::string& name, int channels, int token_dim, int inner_dim,
                      int heads_, int groups, Rng& rng)
      : heads(heads_) {
    norm = GroupNorm<Scalar>(ps, name + ".norm", channels, groups);
    to_q = Linear<Scalar>(ps, name + ".to_q", channels, inner_dim, rng, 1.0, false);
    to_k = Linear<Scalar>(ps, name + ".to_k", token_dim, inner_dim, rng, 1.0, false);
    to_v = Linear<Scalar>(ps, name + ".to_v", token_dim, inner_dim, rng, 1.0, false);
    to_out = Linear<Scalar>(ps, name + ".to_out", inner_dim, channels, rng);
  }

  /// Attention part only: features[N, C, H, W] -> features, with weights
  /// optionally captured.
  Tensor<Scalar> attend(const Tensor<Scalar>& features, const Tensor<Scalar>& tokens, ag::AttentionWeights* cap) const {
    const int H = features.dim(2), W = features.dim(3);
    auto seq = ag::to_sequence(features);
    auto out = ag::attention(to_q(seq), to_k(tokens), to_v(tokens), heads, cap);
    return ag::from_sequence(to_out(out), H, W);
  }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x, const Tensor<Scalar>& tokens, const ForwardContext& ctx) const {
    ag::AttentionWeights* cap = nullptr;
    if (ctx.attention_maps) {
      ctx.attention_maps->emplace_back();
      cap = &ctx.attention_maps->back();
    }
    return ag::add(x, attend(norm(x), tokens, cap));
  }
};

/// Common interface of the conditional image networks.
template <typename Scalar>
class ImageModel {
 public:
  virtual ~ImageModel() = default;
  /// x_t[N, C, H, W], one timestep per sample, tokens[N, S, d]. Models without
  /// a timestep input ignore `x_t` and `t`.
  virtual Tensor<Scalar> forward(const Tensor<Scalar>& x_t, const std::vector<int>& t, const Tensor<Scalar>& tokens,
                                 const ForwardContext& ctx) const = 0;
  virtual bool has_timestep_input() const = 0;
  virtual bool uses_cross_attention() const = 0;
};

template <typename Scalar>
class UNet final : public ImageModel<Scalar> {
 public:
  UNet(ParameterSet<Scalar>& ps, const std::string& name, const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const int levels = static_cast<int>(cfg.channel_multipliers.size());
    const int cond_dim = cfg.conditioning == Conditioning::adagn ? cfg.num_tokens * cfg.token_dim : 0;
    const bool xattn = cfg.conditioning == Conditioning::cross_attention;
    auto wants_attn = [&](int level) {
      if (!xattn) return false;
      for (int r : cfg.attention_resolutions)
        if (r == (1 << level)) return true;
      return false;
    };
    auto res = [&](const std::string& n, int in, int out) {
      return ResBlock<Scalar>(ps, n, in, out, cfg.time_embed_dim, cfg.groups, cfg.dropout, cond_dim, rng);
    };
    auto attn = [&](const std::string& n, int ch) {
      return CrossAttentionBlock<Scalar>(ps, n, ch, cfg.token_dim, cfg.attn_dim(), cfg.num_heads, cfg.groups, rng);
    };

    time_embed_ = TimeEmbedding<Scalar>(ps, name + ".time_embed", cfg.base_channels, cfg.time_embed_dim, rng);
    conv_in_ = Conv2d<Scalar>(ps, name + ".conv_in", cfg.in_channels, cfg.base_channels, 3, 1, 1, rng);

    std::vector<int> skip_ch{cfg.base_channels};
    int ch = cfg.base_channels;
    for (int l = 0; l < levels; ++l) {
      const int out = cfg.base_channels * cfg.channel_multipliers[static_cast<std::size_t>(l)];
      for (int r = 0; r < cfg.num_res_blocks; ++r) {
        const std::string n = name + ".down" + std::to_string(l) + "." + std::to_string(r);
        Stage s;
        s.res = res(n + ".res", ch, out);
        if (wants_attn(l)) {
          s.has_attn = true;
          s.attn = attn(n + ".attn", out);
        }
        down_.push_back(std::move(s));
        ch = out;
        skip_ch.push_back(ch);
      }
      if (l + 1 < levels) {
        downsample_.push_back(Conv2d<Scalar>(ps, name + ".down" + std::to_string(l) + ".downsample", ch, ch, 3, 2, 1, rng));
        skip_ch.push_back(ch);
      }
    }

    mid_res1_ = res(name + ".mid.res1", ch, ch);
    mid_has_attn_ = xattn;
    if (xattn) mid_attn_ = attn(name + ".mid.attn", ch);
    mid_res2_ = res(name + ".mid.res2", ch, ch);

    for (int l = levels - 1; l >= 0; --l) {
      const int out = cfg.base_channels * cfg.channel_multipliers[static_cast<std::size_t>(l)];
      for (int r = 0; r <= cfg.num_res_blocks; ++r) {
        const std::string n = name + ".up" + std::to_string(l) + "." + std::to_string(r);
        const int skip = skip_ch.back();
        skip_ch.pop_back();
        Stage s;
        s.res = res(n + ".res", ch + skip, out);
        if (wants_attn(l)) {
          s.has_attn = true;
          s.attn = attn(n + ".attn", out);
        }
        up_.push_back(std::move(s));
        ch = out;
      }
      if (l > 0) upsample_.push_back(Conv2d<Scalar>(ps, name + ".up" + std::to_string(l) + ".upsample", ch, ch, 3, 1, 1, rng));
    }
    norm_out_ = GroupNorm<Scalar>(ps, name + ".norm_out", ch, cfg.groups);
    conv_out_ = Conv2d<Scalar>(ps, name + ".conv_out", ch, cfg.in_channels, 3, 1, 1, rng, cfg.output_init_scale);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x_t, const std::vector<int>& t, const Tensor<Scalar>& tokens,
                         const ForwardContext& ctx) const override {
    if (x_t.rank() != 4 || x_t.dim(1) != cfg_.in_channels || x_t.dim(2) != cfg_.image_size || x_t.dim(3) != cfg_.image_size)
      throw std::invalid_argument("UNet: input " + ag::shape_str(x_t.shape()) + " does not match config");
    if (static_cast<int>(t.size()) != x_t.dim(0) || tokens.dim(0) != x_t.dim(0))
      throw std::invalid_argument("UNet: batch mismatch between x_t, t and tokens");
    const int levels = static_cast<int>(cfg_.channel_multipliers.size());
    const auto temb = time_embed_(t);
    Tensor<Scalar> cond;
    if (cfg_.conditioning == Conditioning::adagn) cond = concat_tokens(tokens);

    auto h = conv_in_(x_t);
    std::vector<Tensor<Scalar>> skips{h};
    std::size_t bi = 0;
    for (int l = 0; l < levels; ++l) {
      for (int r = 0; r < cfg_.num_res_blocks; ++r, ++bi) {
        h = down_[bi].res(h, temb, cond, ctx);
        if (down_[bi].has_attn) h = down_[bi].attn(h, tokens, ctx);
        skips.push_back(h);
      }
      if (l + 1 < levels) {
        h = downsample_[static_cast<std::size_t>(l)](h);
        skips.push_back(h);
      }
    }
    h = mid_res1_(h, temb, cond, ctx);
    if (mid_has_attn_) h = mid_attn_(h, tokens, ctx);
    h = mid_res2_(h, temb, cond, ctx);

    bi = 0;
    std::size_t ui = 0;
    for (int l = levels - 1; l >= 0; --l) {
      for (int r = 0; r <= cfg_.num_res_blocks; ++r, ++bi) {
        h = ag::concat_channels(h, skips.back());
        skips.pop_back();
        h = up_[bi].res(h, temb, cond, ctx);
        if (up_[bi].has_attn) h = up_[bi].attn(h, tokens, ctx);
      }
      if (l > 0) h = upsample_[ui++](ag::upsample_nearest2x(h));
    }
    return conv_out_(ag::silu(norm_out_(h)));
  }

  bool has_timestep_input() const override { return true; }
  bool uses_cross_attention() const override { return cfg_.conditioning == Conditioning::cross_attention; }
  const UNetConfig& config() const { return cfg_; }

 private:
  struct Stage {
    ResBlock<Scalar> res;
    CrossAttentionBlock<Scalar> attn;
    bool has_attn = false;
  };
  UNetConfig cfg_;
  TimeEmbedding<Scalar> time_embed_;
  Conv2d<Scalar> conv_in_;
  std::vector<Stage> down_, up_;
  std::vector<Conv2d<Scalar>> downsample_, upsample_;
  ResBlock<Scalar> mid_res1_, mid_res2_;
  CrossAttentionBlock<Scalar> mid_attn_;
  bool mid_has_attn_ = false;
  GroupNorm<Scalar> norm_out_;
  Conv2d<Scalar> conv_out_;
};

/// Decoder half of the U-Net driven by a learnable spatial tensor instead of
/// a noisy image: no timestep input and no skip connections. Tokens enter
/// through cross-attention exactly as in the full model.
template <typename Scalar>
class TokenDecoder final : public ImageModel<Scalar> {
 public:
  TokenDecoder(ParameterSet<Scalar>& ps, const std::string& name, const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const int levels = static_cast<int>(cfg.channel_multipliers.size());
    const int bottom = cfg.image_size >> (levels - 1);
    int ch = cfg.base_channels * cfg.channel_multipliers.back();
    auto res = [&](const std::string& n, int in, int out) {
      return ResBlock<Scalar>(ps, n, in, out, 0, cfg.groups, cfg.dropout, 0, rng);
    };
    auto attn = [&](const std::string& n, int c) {
      return CrossAttentionBlock<Scalar>(ps, n, c, cfg.token_dim, cfg.attn_dim(), cfg.num_heads, cfg.groups, rng);
    };
    seed_ = ps.uniform(name + ".seed", {1, ch, bottom, bottom}, 1.0, rng);
    mid_res1_ = res(name + ".mid.res1", ch, ch);
    mid_attn_ = attn(name + ".mid.attn", ch);
    mid_res2_ = res(name + ".mid.res2", ch, ch);
    for (int l = levels - 1; l >= 0; --l) {
      const int out = cfg.base_channels * cfg.channel_multipliers[static_cast<std::size_t>(l)];
      bool want = false;
      for (int r : cfg.attention_resolutions) want = want || r == (1 << l);
      for (int r = 0; r <= cfg.num_res_blocks; ++r) {
        const std::string n = name + ".up" + std::to_string(l) + "." + std::to_string(r);
        Stage s;
        s.res = res(n + ".res", ch, out);
        if (want) {
          s.has_attn = true;
          s.attn = attn(n + ".attn", out);
        }
        up_.push_back(std::move(s));
        ch = out;
      }
      if (l > 0) upsample_.push_back(Conv2d<Scalar>(ps, name + ".up" + std::to_string(l) + ".upsample", ch, ch, 3, 1, 1, rng));
    }
    norm_out_ = GroupNorm<Scalar>(ps, name + ".norm_out", ch, cfg.groups);
    conv_out_ = Conv2d<Scalar>(ps, name + ".conv_out", ch, cfg.in_channels, 3, 1, 1, rng, cfg.output_init_scale);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>&, const std::vector<int>&, const Tensor<Scalar>& tokens,
                         const ForwardContext& ctx) const override {
    const int levels = static_cast<int>(cfg_.channel_multipliers.size());
    const Tensor<Scalar> none;
    auto h = ag::repeat_batch(seed_, tokens.dim(0));
    h = mid_res1_(h, none, none, ctx);
    h = mid_attn_(h, tokens, ctx);
    h = mid_res2_(h, none, none, ctx);
    std::size_t bi = 0, ui = 0;
    for (int l = levels - 1; l >= 0; --l) {
      for (int r = 0; r <= cfg_.num_res_blocks; ++r, ++bi) {
        h = up_[bi].res(h, none, none, ctx);
        if (up_[bi].has_attn) h = up_[bi].attn(h, tokens, ctx);
      }
      if (l > 0) h = upsample_[ui++](ag::upsample_nearest2x(h));
    }
    return conv_out_(ag::silu(norm_out_(h)));
  }

  bool has_timestep_input() const override { return false; }
  bool uses_cross_attention() const override { return true; }

 private:
  struct Stage {
    ResBlock<Scalar> res;
    CrossAttentionBlock<Scalar> attn;
    bool has_attn = false;
  };
  UNetConfig cfg_;
  Tensor<Scalar> seed_;
  ResBlock<Scalar> mid_res1_, mid_res2_;
  CrossAttentionBlock<Scalar> mid_attn_;
  std::vector<Stage> up_;
  std::vector<Conv2d<Scalar>> upsample_;
  GroupNorm<Scalar> norm_out_;
  Conv2d<Scalar> conv_out_;
};

}  // namespace encdiff
