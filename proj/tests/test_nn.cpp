#include "gradcheck.hpp"

#include "encdiff/nn.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace encdiff;
using gradcheck::random_array;
using gradcheck::random_param;

namespace {

Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  return ag::weighted_sum(y, random_array(y.size(), rng));
}

std::vector<Tensor<double>> all_params(ParameterSet<double>& ps) {
  std::vector<Tensor<double>> out;
  for (auto& e : ps.entries()) out.push_back(e.tensor);
  return out;
}

UNetConfig tiny_unet(int image = 8, Conditioning mode = Conditioning::cross_attention) {
  UNetConfig c;
  c.image_size = image;
  c.base_channels = 4;
  c.channel_multipliers = {1, 2};
  c.attention_resolutions = {1, 2};
  c.num_heads = 2;
  c.dropout = 0.0;
  c.time_embed_dim = 8;
  c.groups = 2;
  c.num_tokens = 3;
  c.token_dim = 4;
  c.conditioning = mode;
  c.output_init_scale = 1.0;
  return c;
}

Tensor<double> permute_tokens(const Tensor<double>& tok, const std::vector<int>& perm) {
  const int B = tok.dim(0), N = tok.dim(1), d = tok.dim(2);
  ag::Array<double> v(tok.size());
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < N; ++i)
      v.segment((b * N + i) * d, d) = tok.value().segment((b * N + perm[static_cast<std::size_t>(i)]) * d, d);
  return Tensor<double>::constant(tok.shape(), v);
}

}  // namespace

TEST_CASE("cross-attention with a single token attends to it everywhere") {
  ParameterSet<double> ps;
  Rng rng(1);
  CrossAttentionBlock<double> blk(ps, "attn", 4, 6, 8, 2, 2, rng);
  auto x = Tensor<double>::constant({1, 4, 3, 3}, random_array(36, rng));
  auto tok = Tensor<double>::constant({1, 1, 6}, random_array(6, rng));
  ag::AttentionWeights cap;
  const auto out = blk.attend(x, tok, &cap);
  for (double w : cap.weights) CHECK(w == doctest::Approx(1.0).epsilon(1e-12));
  const auto v = blk.to_out(blk.to_v(tok));
  for (int c = 0; c < 4; ++c)
    for (int p = 0; p < 9; ++p) CHECK(out.value()[c * 9 + p] == doctest::Approx(v.value()[c]).epsilon(1e-12));
}

TEST_CASE("identical keys give uniform attention") {
  ParameterSet<double> ps;
  Rng rng(2);
  CrossAttentionBlock<double> blk(ps, "attn", 4, 6, 8, 2, 2, rng);
  auto x = Tensor<double>::constant({2, 4, 2, 2}, random_array(32, rng));
  ag::Array<double> one = random_array(6, rng);
  ag::Array<double> rep(2 * 5 * 6);
  for (int i = 0; i < 10; ++i) rep.segment(i * 6, 6) = one;
  ag::AttentionWeights cap;
  blk.attend(x, Tensor<double>::constant({2, 5, 6}, rep), &cap);
  for (double w : cap.weights) CHECK(w == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("cross-attention block gradients match finite differences") {
  ParameterSet<double> ps;
  Rng rng(3);
  CrossAttentionBlock<double> blk(ps, "attn", 4, 6, 8, 2, 2, rng);
  auto x = random_param({2, 4, 3, 3}, rng);
  auto tok = random_param({2, 5, 6}, rng);
  auto inputs = all_params(ps);
  inputs.push_back(x);
  inputs.push_back(tok);
  const ForwardContext ctx;
  const auto r = gradcheck::check([&] { return probe(blk(x, tok, ctx), 11); }, inputs);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("AdaGN reduces to group norm under identity modulation") {
  ParameterSet<double> ps;
  Rng rng(4);
  AdaGroupNorm<double> ada(ps, "ada", 4, 6, 2, rng);
  ada.to_scale.weight.value().setZero();
  ada.to_shift.weight.value().setZero();
  auto x = Tensor<double>::constant({2, 4, 3, 3}, random_array(72, rng, 2.0));
  auto cond = Tensor<double>::constant({2, 6}, random_array(12, rng));
  const auto y = ada(x, cond);
  const auto gn = ag::group_norm(x, 2, Tensor<double>{}, Tensor<double>{});
  CHECK((y.value() - gn.value()).abs().maxCoeff() < 1e-14);

  // constant features normalize to zero, leaving the shift
  AdaGroupNorm<double> ada2(ps, "ada2", 4, 6, 2, rng);
  auto flat = Tensor<double>::constant({2, 4, 3, 3}, ag::Array<double>::Constant(72, 3.5));
  const auto out = ada2(flat, cond);
  const auto shift = ada2.to_shift(cond);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 4; ++c)
      for (int p = 0; p < 9; ++p) CHECK(out.value()[(n * 4 + c) * 9 + p] == doctest::Approx(shift.value()[n * 4 + c]).epsilon(1e-9));
  CHECK_THROWS(ada2(Tensor<double>::constant({2, 2, 3, 3}, ag::Array<double>::Zero(36)), cond));
}

TEST_CASE("AdaGN gradients match finite differences") {
  ParameterSet<double> ps;
  Rng rng(5);
  AdaGroupNorm<double> ada(ps, "ada", 4, 6, 2, rng);
  auto x = random_param({2, 4, 3, 3}, rng);
  auto cond = random_param({2, 6}, rng);
  auto inputs = all_params(ps);
  inputs.push_back(x);
  inputs.push_back(cond);
  CHECK(gradcheck::check([&] { return probe(ada(x, cond), 12); }, inputs).max_rel_error < 1e-3);
}

TEST_CASE("sinusoidal time features") {
  const auto z = sinusoidal_embedding<double>(0.0, 8);
  for (int k = 0; k < 4; ++k) {
    CHECK(z[2 * k] == 0.0);
    CHECK(z[2 * k + 1] == 1.0);
  }
  std::set<std::vector<double>> seen;
  for (int t = 1; t <= 1000; ++t) {
    const auto e = sinusoidal_embedding<double>(t, 32);
    CHECK(e.matrix().norm() == doctest::Approx(4.0).epsilon(1e-12));
    seen.insert(std::vector<double>(e.data(), e.data() + e.size()));
  }
  CHECK(seen.size() == 1000);
  CHECK_THROWS(sinusoidal_embedding<double>(1.0, 7));
}

TEST_CASE("time embedding MLP separates every grid timestep") {
  ParameterSet<double> ps;
  Rng rng(6);
  TimeEmbedding<double> te(ps, "te", 16, 32, rng);
  std::vector<int> ts(1000);
  for (int t = 1; t <= 1000; ++t) ts[static_cast<std::size_t>(t - 1)] = t;
  const auto e = te(ts);
  std::set<std::vector<double>> seen;
  for (int t = 0; t < 1000; ++t) seen.insert(std::vector<double>(e.data() + t * 32, e.data() + (t + 1) * 32));
  CHECK(seen.size() == 1000);
}

TEST_CASE("U-Net preserves the image shape") {
  for (int size : {16, 32, 64}) {
    ParameterSet<float> ps;
    Rng rng(7);
    auto cfg = tiny_unet(size);
    cfg.channel_multipliers = {1, 2, 2};
    cfg.attention_resolutions = {2, 4};
    UNet<float> net(ps, "unet", cfg, rng);
    ag::NoGradGuard g;
    auto x = Tensor<float>::constant({2, 3, size, size}, random_array(2 * 3 * size * size, rng).cast<float>());
    auto tok = Tensor<float>::constant({2, 3, 4}, random_array(24, rng).cast<float>());
    const auto y = net.forward(x, {1, 500}, tok, {});
    CHECK(y.shape() == x.shape());
    CHECK(y.value().allFinite());
  }
  ParameterSet<float> ps;
  Rng rng(8);
  UNet<float> net(ps, "unet", tiny_unet(8), rng);
  auto bad = Tensor<float>::constant({1, 3, 16, 16}, ag::Array<float>::Zero(768));
  auto tok = Tensor<float>::constant({1, 3, 4}, ag::Array<float>::Zero(12));
  CHECK_THROWS(net.forward(bad, {1}, tok, {}));
}

TEST_CASE("U-Net config validation") {
  auto c = tiny_unet();
  c.attention_resolutions = {8};
  CHECK_THROWS(c.validate());
  c = tiny_unet();
  c.channel_multipliers.clear();
  CHECK_THROWS(c.validate());
  CHECK_NOTHROW(UNetConfig::reference_layout().validate());
}

TEST_CASE("cross-attention U-Net is invariant to token order, AdaGN is not") {
  for (auto mode : {Conditioning::cross_attention, Conditioning::adagn}) {
    ParameterSet<double> ps;
    Rng rng(9);
    UNet<double> net(ps, "unet", tiny_unet(8, mode), rng);
    ag::NoGradGuard g;
    auto x = Tensor<double>::constant({2, 3, 8, 8}, random_array(384, rng));
    auto tok = Tensor<double>::constant({2, 3, 4}, random_array(24, rng));
    const auto a = net.forward(x, {3, 70}, tok, {});
    const auto b = net.forward(x, {3, 70}, permute_tokens(tok, {2, 0, 1}), {});
    const double diff = (a.value() - b.value()).abs().maxCoeff();
    if (mode == Conditioning::cross_attention) CHECK(diff < 1e-12);
    else CHECK(diff > 1e-6);
  }
}

TEST_CASE("attention rows sum to one at every layer and forward passes are deterministic") {
  ParameterSet<float> ps;
  Rng rng(10);
  UNet<float> net(ps, "unet", tiny_unet(8), rng);
  ag::NoGradGuard g;
  auto x = Tensor<float>::constant({2, 3, 8, 8}, random_array(384, rng).cast<float>());
  auto tok = Tensor<float>::constant({2, 3, 4}, random_array(24, rng).cast<float>());
  std::vector<ag::AttentionWeights> maps;
  ForwardContext ctx;
  ctx.attention_maps = &maps;
  const auto a = net.forward(x, {10, 20}, tok, ctx);
  // down0, down1, mid, up1 x2, up0 x2
  CHECK(maps.size() == 7);
  for (const auto& m : maps)
    for (int r = 0; r < m.batch * m.queries; ++r) {
      double s = 0;
      for (int j = 0; j < m.keys; ++j) s += m.weights[static_cast<std::size_t>(r * m.keys + j)];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  const auto b = net.forward(x, {10, 20}, tok, {});
  CHECK((a.value() == b.value()).all());
}

TEST_CASE("end-to-end U-Net gradient on a sampled parameter subset") {
  for (auto mode : {Conditioning::cross_attention, Conditioning::adagn}) {
    ParameterSet<double> ps;
    Rng rng(11);
    UNet<double> net(ps, "unet", tiny_unet(8, mode), rng);
    auto x = Tensor<double>::constant({2, 3, 8, 8}, random_array(384, rng));
    auto target = Tensor<double>::constant({2, 3, 8, 8}, random_array(384, rng));
    auto tok = random_param({2, 3, 4}, rng);
    auto inputs = all_params(ps);
    inputs.push_back(tok);
    const auto r = gradcheck::check([&] { return ag::mse(net.forward(x, {5, 900}, tok, {}), target); }, inputs, 0.01, 3);
    CAPTURE(r.checked);
    CHECK(r.checked > 20);
    CHECK(r.max_rel_error < 1e-2);
  }
}

TEST_CASE("token decoder has no timestep input and reaches the image shape") {
  ParameterSet<double> ps;
  Rng rng(12);
  TokenDecoder<double> dec(ps, "dec", tiny_unet(8), rng);
  CHECK(!dec.has_timestep_input());
  auto tok = random_param({2, 3, 4}, rng);
  const auto y = dec.forward(Tensor<double>{}, {}, tok, {});
  CHECK(y.shape() == ag::Shape{2, 3, 8, 8});
  auto target = Tensor<double>::constant({2, 3, 8, 8}, random_array(384, rng));
  auto inputs = all_params(ps);
  inputs.push_back(tok);
  CHECK(gradcheck::check([&] { return ag::mse(dec.forward(Tensor<double>{}, {}, tok, {}), target); }, inputs, 0.02, 4).max_rel_error < 1e-2);
}

TEST_CASE("reference layout parameter count is stable") {
  auto count = [] {
    ParameterSet<float> ps;
    Rng rng(123);
    UNet<float> net(ps, "unet", UNetConfig::reference_layout(), rng);
    return ps.parameter_count();
  };
  const auto n = count();
  MESSAGE("reference U-Net parameters: " << n);
  CHECK(n == count());
  CHECK(n > 100000);
}
