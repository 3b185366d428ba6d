#pragma once

#include "encdiff/nn.hpp"

#include <Eigen/Core>

#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace encdiff {

enum class TokenMode { scalar, vector };
NLOHMANN_JSON_SERIALIZE_ENUM(TokenMode, {{TokenMode::scalar, "scalar"}, {TokenMode::vector, "vector"}})

struct ConvSpec {
  int out_channels = 64;
  int kernel = 4;
  int stride = 2;
  int pad = 1;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ConvSpec, out_channels, kernel, stride, pad)

struct EncoderConfig {
  int image_size = 32;
  int in_channels = 3;
  /// ReLU between every layer; the 32x32 stack drops one stride-2 conv from
  /// the 64x64 reference stack so both end at 4x4x256.
  std::vector<ConvSpec> convs{{64, 7, 1, 3}, {128, 4, 2, 1}, {256, 4, 2, 1}, {256, 4, 2, 1}};
  std::vector<int> fc_hidden{256, 256};
  int num_tokens = 20;
  int token_dim = 32;
  TokenMode mode = TokenMode::scalar;

  /// Width of the final feature vector.
  int K() const { return mode == TokenMode::scalar ? num_tokens : num_tokens * token_dim; }
  void validate() const {
    if (num_tokens < 1 || token_dim < 1) throw std::invalid_argument("EncoderConfig: N and d must be >= 1");
    if (convs.empty()) throw std::invalid_argument("EncoderConfig: needs at least one conv layer");
  }
  static EncoderConfig reference_layout() {
    EncoderConfig c;
    c.image_size = 64;
    c.convs = {{64, 7, 1, 3}, {128, 4, 2, 1}, {256, 4, 2, 1}, {256, 4, 2, 1}, {256, 4, 2, 1}};
    return c;
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EncoderConfig, image_size, in_channels, convs, fc_hidden, num_tokens,
                                                token_dim, mode)

/// Concept tokens of one image.
struct ConceptTokenSet {
  Eigen::MatrixXd tokens;  // N x d
  std::optional<Eigen::VectorXd> scalars;
  TokenMode mode = TokenMode::scalar;

  int num_tokens() const { return static_cast<int>(tokens.rows()); }
  int token_dim() const { return static_cast<int>(tokens.cols()); }
  bool operator==(const ConceptTokenSet& o) const {
    return mode == o.mode && tokens == o.tokens && scalars.has_value() == o.scalars.has_value() &&
           (!scalars || *scalars == *o.scalars);
  }
};

/// Tokens of `a` with positions in `indices` taken from `b`.
inline ConceptTokenSet swap_tokens(const ConceptTokenSet& a, const ConceptTokenSet& b, const std::set<int>& indices) {
  if (a.mode != b.mode || a.tokens.rows() != b.tokens.rows() || a.tokens.cols() != b.tokens.cols())
    throw std::invalid_argument("swap_tokens: token sets differ in shape or mode");
  ConceptTokenSet out = a;
  for (int i : indices) {
    if (i < 0 || i >= a.num_tokens()) throw std::out_of_range("swap_tokens: index " + std::to_string(i) + " out of range");
    out.tokens.row(i) = b.tokens.row(i);
    if (out.scalars && b.scalars) (*out.scalars)[i] = (*b.scalars)[i];
  }
  return out;
}

template <typename Scalar>
struct EncodedBatch {
  Tensor<Scalar> tokens;   // [B, N, d]
  Tensor<Scalar> scalars;  // [B, N], scalar mode only
};

/// CNN feature extractor followed by either per-factor token MLPs (scalar
/// mode) or a plain split of the feature vector into N chunks (vector mode).
template <typename Scalar>
class Encoder {
 public:
  Encoder(ParameterSet<Scalar>& ps, const std::string& name, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    int ch = cfg.in_channels, size = cfg.image_size;
    for (std::size_t i = 0; i < cfg.convs.size(); ++i) {
      const auto& c = cfg.convs[i];
      convs_.push_back(Conv2d<Scalar>(ps, name + ".conv" + std::to_string(i), ch, c.out_channels, c.kernel, c.stride, c.pad, rng));
      ch = c.out_channels;
      size = (size + 2 * c.pad - c.kernel) / c.stride + 1;
      if (size < 1) throw std::invalid_argument("EncoderConfig: conv stack shrinks the image to nothing");
    }
    int width = ch * size * size;
    flat_dim_ = width;
    for (std::size_t i = 0; i < cfg.fc_hidden.size(); ++i) {
      fcs_.push_back(Linear<Scalar>(ps, name + ".fc" + std::to_string(i), width, cfg.fc_hidden[i], rng));
      width = cfg.fc_hidden[i];
    }
    fcs_.push_back(Linear<Scalar>(ps, name + ".fc_out", width, cfg.K(), rng));

    if (cfg.mode == TokenMode::scalar) {
      const int N = cfg.num_tokens, d = cfg.token_dim;
      mlp_w_[0] = ps.uniform(name + ".token_mlp0.weight", {N, d, 1}, 1.0, rng);
      mlp_b_[0] = ps.constant(name + ".token_mlp0.bias", {N, d}, 0.0);
      for (int l = 1; l < 3; ++l) {
        mlp_w_[l] = ps.uniform(name + ".token_mlp" + std::to_string(l) + ".weight", {N, d, d}, 1.0 / std::sqrt(d), rng);
        mlp_b_[l] = ps.constant(name + ".token_mlp" + std::to_string(l) + ".bias", {N, d}, 0.0);
      }
    }
  }

  const EncoderConfig& config() const { return cfg_; }

  /// Feature vector [B, K] before tokenization.
  Tensor<Scalar> features(const Tensor<Scalar>& images) const {
    if (images.rank() != 4 || images.dim(1) != cfg_.in_channels || images.dim(2) != cfg_.image_size ||
        images.dim(3) != cfg_.image_size)
      throw std::invalid_argument("Encoder: input " + ag::shape_str(images.shape()) + " does not match config");
    auto h = images;
    for (const auto& c : convs_) h = ag::relu(c(h));
    h = ag::reshape(h, {images.dim(0), flat_dim_});
    for (std::size_t i = 0; i + 1 < fcs_.size(); ++i) h = ag::relu(fcs_[i](h));
    return fcs_.back()(h);
  }

  /// scalars [B, N] -> tokens [B, N, d] through N independent 1->d->d->d MLPs.
  Tensor<Scalar> tokens_from_scalars(const Tensor<Scalar>& scalars) const {
    const int B = scalars.dim(0), N = cfg_.num_tokens;
    auto h = ag::reshape(scalars, {B, N, 1});
    h = ag::silu(ag::grouped_linear(h, mlp_w_[0], mlp_b_[0]));
    h = ag::silu(ag::grouped_linear(h, mlp_w_[1], mlp_b_[1]));
    return ag::grouped_linear(h, mlp_w_[2], mlp_b_[2]);
  }

  /// Feature vector [B, K] -> token set.
  EncodedBatch<Scalar> tokenize(const Tensor<Scalar>& f) const {
    if (f.rank() != 2 || f.dim(1) != cfg_.K()) throw std::invalid_argument("Encoder: feature width mismatch");
    if (cfg_.mode == TokenMode::scalar) return {tokens_from_scalars(f), f};
    return {ag::reshape(f, {f.dim(0), cfg_.num_tokens, cfg_.token_dim}), Tensor<Scalar>{}};
  }

  EncodedBatch<Scalar> encode(const Tensor<Scalar>& images) const { return tokenize(features(images)); }

 private:
  EncoderConfig cfg_;
  std::vector<Conv2d<Scalar>> convs_;
  std::vector<Linear<Scalar>> fcs_;
  int flat_dim_ = 0;
  Tensor<Scalar> mlp_w_[3], mlp_b_[3];
};

/// Split one sample of an encoded batch into a value-type token set.
template <typename Scalar>
ConceptTokenSet to_token_set(const EncodedBatch<Scalar>& enc, int index, TokenMode mode) {
  const int N = enc.tokens.dim(1), d = enc.tokens.dim(2);
  ConceptTokenSet s;
  s.mode = mode;
  s.tokens.resize(N, d);
  const Scalar* p = enc.tokens.data() + static_cast<Eigen::Index>(index) * N * d;
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < d; ++j) s.tokens(i, j) = static_cast<double>(p[i * d + j]);
  if (mode == TokenMode::scalar && enc.scalars) {
    Eigen::VectorXd v(N);
    for (int i = 0; i < N; ++i) v[i] = static_cast<double>(enc.scalars.data()[static_cast<Eigen::Index>(index) * N + i]);
    s.scalars = v;
  }
  return s;
}

/// Stack token sets into a [B, N, d] constant tensor.
template <typename Scalar>
Tensor<Scalar> tokens_tensor(const std::vector<ConceptTokenSet>& sets) {
  if (sets.empty()) throw std::invalid_argument("tokens_tensor: empty batch");
  const int N = sets[0].num_tokens(), d = sets[0].token_dim();
  ag::Array<Scalar> v(static_cast<Eigen::Index>(sets.size()) * N * d);
  for (std::size_t b = 0; b < sets.size(); ++b)
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < d; ++j) v[(static_cast<Eigen::Index>(b) * N + i) * d + j] = static_cast<Scalar>(sets[b].tokens(i, j));
  return Tensor<Scalar>::constant({static_cast<int>(sets.size()), N, d}, std::move(v));
}

}  // namespace encdiff
