#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "encdiff/io.hpp"
#include "encdiff/training.hpp"

using namespace encdiff;

namespace {

const FactorDataset& shapes16() {
  static const FactorDataset ds = generate(FactorSpec::minishapes(16), 2);
  return ds;
}

std::filesystem::path tmp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "encdiff_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

bool bit_equal(const ag::Array<float>& a, const ag::Array<float>& b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

// Predicts the true noise from a known x0.
class OracleModel final : public ImageModel<float> {
 public:
  OracleModel(ag::Array<float> x0, const DiffusionCoefficients& c) : x0_(std::move(x0)), c_(c) {}
  Tensor<float> forward(const Tensor<float>& x_t, const std::vector<int>& t, const Tensor<float>&, const ForwardContext&) const override {
    const Eigen::Index n = x_t.size() / x_t.dim(0);
    ag::Array<float> out(x_t.size());
    for (int b = 0; b < x_t.dim(0); ++b) {
      const double ab = c_.alpha_bar(t[static_cast<std::size_t>(b)]);
      for (Eigen::Index k = b * n; k < (b + 1) * n; ++k)
        out[k] = static_cast<float>((x_t.value()[k] - std::sqrt(ab) * x0_[k]) / std::sqrt(1 - ab));
    }
    return Tensor<float>::constant(x_t.shape(), out);
  }
  bool has_timestep_input() const override { return true; }
  bool uses_cross_attention() const override { return false; }

 private:
  ag::Array<float> x0_;
  const DiffusionCoefficients& c_;
};

class ZeroModel final : public ImageModel<float> {
 public:
  Tensor<float> forward(const Tensor<float>& x_t, const std::vector<int>&, const Tensor<float>&, const ForwardContext&) const override {
    return Tensor<float>::zeros(x_t.shape());
  }
  bool has_timestep_input() const override { return true; }
  bool uses_cross_attention() const override { return false; }
};

Tensor<float> batch_of(const FactorDataset& ds, std::vector<int> rows) {
  const auto px = ds.gather(rows);
  const int S = ds.spec.image_size;
  return Tensor<float>::constant({static_cast<int>(rows.size()), 3, S, S},
                                 Eigen::Map<const ag::Array<float>>(px.data(), static_cast<Eigen::Index>(px.size())));
}

}  // namespace

TEST_CASE("ema update arithmetic") {
  ag::Array<float> ema = ag::Array<float>::Constant(3, 1.0f), p = ag::Array<float>::Constant(3, 2.0f);
  auto e = ema;
  ema_update(e, p, 1.0);
  CHECK(bit_equal(e, ema));
  ema_update(e, p, 0.0);
  CHECK(bit_equal(e, p));
  e = ema;
  ema_update(e, p, 0.9);
  CHECK(e[0] == doctest::Approx(1.1).epsilon(1e-6));

  // frozen params: ema_k = p + (ema_0 - p) d^k
  ag::Array<float> f = ag::Array<float>::Constant(1, 5.0f), target = ag::Array<float>::Constant(1, -1.0f);
  for (int k = 1; k <= 200; ++k) {
    ema_update(f, target, 0.97);
    if (k % 50 == 0) CHECK(f[0] == doctest::Approx(-1.0 + 6.0 * std::pow(0.97, k)).epsilon(1e-4));
  }
  CHECK(ema_effective_decay(0.9999, 0, true) == doctest::Approx(0.1));
  CHECK(ema_effective_decay(0.9999, 1000000, true) == 0.9999);
  CHECK(ema_effective_decay(0.9999, 0, false) == 0.9999);
  CHECK_THROWS_AS(ema_update(f, p, 0.5), std::invalid_argument);
}

TEST_CASE("config serialization and validation") {
  TrainConfig cfg;
  const nlohmann::json j = cfg;
  CHECK(j["batch_size"] == 64);
  CHECK(j["learning_rate"] == 1e-4);
  CHECK(j["ema_decay"] == 0.9999);
  CHECK(j["schedule"]["kind"] == "cosine");
  const auto back = j.get<TrainConfig>();
  CHECK(nlohmann::json(back) == j);
  const auto partial = nlohmann::json::parse(R"({"steps": 7, "conditioning": "adagn"})").get<TrainConfig>();
  CHECK(partial.steps == 7);
  CHECK(partial.conditioning == Conditioning::adagn);
  CHECK(partial.batch_size == 64);

  auto bad = TrainConfig::tiny();
  bad.variant = Variant::encdec_no_diff;
  bad.conditioning = Conditioning::adagn;
  CHECK_THROWS_AS(build_variant(bad), InconsistentConfig);
  bad = TrainConfig::tiny();
  bad.ema_decay = 1.5;
  CHECK_THROWS_AS(build_variant(bad), InconsistentConfig);
  bad = TrainConfig::tiny();
  bad.batch_size = 0;
  CHECK_THROWS_AS(build_variant(bad), InconsistentConfig);
}

TEST_CASE("variants have the expected structure") {
  auto cfg = TrainConfig::tiny();
  const auto xattn = build_variant(cfg);
  CHECK(xattn->model->has_timestep_input());
  CHECK(xattn->model->uses_cross_attention());
  cfg.conditioning = Conditioning::adagn;
  const auto adagn = build_variant(cfg);
  CHECK(adagn->model->has_timestep_input());
  CHECK(!adagn->model->uses_cross_attention());
  cfg = TrainConfig::tiny();
  cfg.variant = Variant::encdec_no_diff;
  const auto dec = build_variant(cfg);
  CHECK(!dec->model->has_timestep_input());

  const auto a = xattn->params.parameter_count(), b = adagn->params.parameter_count(), c = dec->params.parameter_count();
  CHECK(a != b);
  CHECK(b != c);
  CHECK(a != c);
  CHECK(xattn->encoder_parameter_count() == adagn->encoder_parameter_count());
  CHECK(xattn->encoder_parameter_count() == dec->encoder_parameter_count());
  CHECK(xattn->encoder_parameter_count() + xattn->model_parameter_count() == a);
  MESSAGE("tiny parameter counts: encdiff " << a << ", adagn " << b << ", encdec_no_diff " << c);

  const auto full = build_variant(TrainConfig{});
  MESSAGE("desk parameter counts: encoder " << full->encoder_parameter_count() << ", unet " << full->model_parameter_count());
  CHECK(full->model_parameter_count() > 0);
}

TEST_CASE("ddpm loss oracles") {
  const auto& ds = shapes16();
  const auto c = derive_coefficients(make_schedule(ScheduleKind::cosine, 1000).betas);
  const auto x0 = batch_of(ds, {0, 5, 9, 100});
  const auto tokens = Tensor<float>::zeros({4, 6, 8});

  Rng r1(3);
  const OracleModel oracle(x0.value(), c);
  const auto exact = ddpm_loss(oracle, x0, tokens, c, r1);
  CHECK(exact.loss.item() < 1e-6);

  Rng r2(3);
  const auto zero = ddpm_loss(ZeroModel{}, x0, tokens, c, r2);
  CHECK(zero.loss.item() == doctest::Approx(1.0).epsilon(0.05));
  CHECK(zero.t == exact.t);
  for (int t : zero.t) {
    CHECK(t >= 1);
    CHECK(t <= 1000);
  }

  // replay: rebuild x_t from (x0, t, eps) and recompute the loss of a real model
  const auto sys = build_variant(TrainConfig::tiny());
  Rng r3(4);
  const auto rec = ddpm_loss(*sys->model, x0, tokens, c, r3);
  const Eigen::Index n = x0.size() / 4;
  double worst = 0;
  for (int b = 0; b < 4; ++b) {
    const double ab = c.alpha_bar(rec.t[static_cast<std::size_t>(b)]);
    for (Eigen::Index k = b * n; k < (b + 1) * n; ++k)
      worst = std::max(worst, std::abs(std::sqrt(ab) * x0.value()[k] + std::sqrt(1 - ab) * rec.eps[k] - rec.x_t[k]));
  }
  CHECK(worst < 1e-5);
  ag::NoGradGuard ng;
  const auto out = sys->model->forward(Tensor<float>::constant(x0.shape(), rec.x_t), rec.t, tokens, {});
  double s = 0;
  for (Eigen::Index k = 0; k < out.size(); ++k) s += std::pow(double(out.value()[k]) - double(rec.eps[k]), 2);
  CHECK(rec.loss.item() == doctest::Approx(s / out.size()).epsilon(1e-5));

  Rng r4(3), r5(3);
  CHECK(ddpm_loss(ZeroModel{}, x0, tokens, c, r4).loss.item() == ddpm_loss(ZeroModel{}, x0, tokens, c, r5).loss.item());
  CHECK_THROWS_AS(ddpm_loss(ZeroModel{}, x0, Tensor<float>::zeros({3, 6, 8}), c, r4), std::invalid_argument);
}

TEST_CASE("zero steps leaves parameters at initialization") {
  auto cfg = TrainConfig::tiny();
  cfg.steps = 0;
  const auto ck = train(cfg, shapes16());
  const auto init = build_variant(cfg);
  CHECK(bit_equal(ck.params, init->params.flat_values()));
  CHECK(bit_equal(ck.ema, ck.params));
  CHECK(ck.loss_history.empty());
}

TEST_CASE("gradient reaches encoder and denoiser on the first step") {
  for (int v = 0; v < 3; ++v) {
    auto cfg = TrainConfig::tiny();
    if (v == 1) cfg.conditioning = Conditioning::adagn;
    if (v == 2) cfg.variant = Variant::encdec_no_diff;
    Trainer tr(cfg, shapes16());
    tr.step();
    int dead = 0;
    for (const auto& e : tr.system().params.entries()) {
      const bool live = e.tensor.grad().size() == e.tensor.size() && (e.tensor.grad() != 0.0f).any();
      if (!live) {
        ++dead;
        MESSAGE("no gradient in " << e.name);
      }
    }
    CHECK(dead == 0);
  }
}

TEST_CASE("training is deterministic and resumes bit-exactly") {
  auto cfg = TrainConfig::tiny();
  cfg.steps = 150;
  cfg.unet.dropout = 0.1;
  const auto& ds = shapes16();

  Trainer full(cfg, ds);
  full.run();
  Trainer again(cfg, ds);
  again.run();
  CHECK(full.loss_history() == again.loss_history());
  CHECK(bit_equal(full.system().params.flat_values(), again.system().params.flat_values()));

  Trainer first(cfg, ds);
  first.run(50);
  const auto path = tmp_path("resume.encd");
  save_checkpoint(first.checkpoint(), path);
  Trainer resumed(load_checkpoint(path), ds);
  CHECK(resumed.current_step() == 50);
  resumed.run();
  CHECK(resumed.checkpoint() == full.checkpoint());
  CHECK(resumed.loss_history().size() == 150);
}

TEST_CASE("checkpoint files round-trip and detect corruption") {
  auto cfg = TrainConfig::tiny();
  Trainer tr(cfg, shapes16());
  tr.run(3);
  const auto ck = tr.checkpoint();
  const auto path = tmp_path("ck.encd");
  save_checkpoint(ck, path);
  const auto back = load_checkpoint(path);
  CHECK(back == ck);
  save_checkpoint(back, tmp_path("ck2.encd"));
  const auto bytes = io::read_file(path);
  CHECK(io::read_file(tmp_path("ck2.encd")) == bytes);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "ENCD");

  auto bad = bytes;
  bad[bad.size() - 100] ^= 0x10;
  io::write_file(tmp_path("bad.encd"), bad);
  CHECK_THROWS_AS(load_checkpoint(tmp_path("bad.encd")), io::ChecksumError);
  bad = bytes;
  bad.resize(bytes.size() - 9);
  io::write_file(tmp_path("short.encd"), bad);
  CHECK_THROWS_AS(load_checkpoint(tmp_path("short.encd")), io::FormatError);
  bad = bytes;
  bad[4] = 9;
  io::write_file(tmp_path("ver.encd"), bad);
  CHECK_THROWS_AS(load_checkpoint(tmp_path("ver.encd")), io::FormatError);
  CHECK_THROWS_AS(load_checkpoint(tmp_path("missing.encd")), std::runtime_error);

  const auto ema_sys = restore(ck, true);
  CHECK(bit_equal(ema_sys->params.flat_values(), ck.ema));
  const auto raw_sys = restore(ck, false);
  CHECK(bit_equal(raw_sys->params.flat_values(), ck.params));
}

TEST_CASE("non-finite loss aborts with diagnostics") {
  Trainer tr(TrainConfig::tiny(), shapes16());
  tr.step();
  auto& e = tr.system().params.entries()[3];
  e.tensor.value()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    tr.step();
    FAIL("expected NonFiniteLoss");
  } catch (const NonFiniteLoss& err) {
    CHECK(err.step == 2);
    CHECK(!err.layer.empty());
  }
}

TEST_CASE("smoke run lowers the loss") {
  auto cfg = TrainConfig::tiny();
  const auto ck = train(cfg, shapes16());
  REQUIRE(ck.loss_history.size() == 500);
  const double head = std::accumulate(ck.loss_history.begin(), ck.loss_history.begin() + 100, 0.0) / 100;
  const double tail = std::accumulate(ck.loss_history.end() - 100, ck.loss_history.end(), 0.0) / 100;
  MESSAGE("first-100 mean " << head << ", last-100 mean " << tail);
  CHECK(tail < head);
  CHECK(loss_csv({0.5, 0.25}) == "step,loss\n1,0.5\n2,0.25\n");
}

TEST_CASE("sampling, encoding and attention capture") {
  const auto& ds = shapes16();
  Trainer tr(TrainConfig::tiny(), ds);
  tr.run(5);
  const auto sys = restore(tr.checkpoint());
  const auto enc = encode_rows(*sys, ds, {0, 1, 0});
  CHECK(enc.scalars.rows() == 3);
  CHECK(enc.tokens.row(0) == enc.tokens.row(2));
  const auto a = token_set(enc, 0, sys->config), b = token_set(enc, 1, sys->config);
  SamplerConfig sc;
  sc.num_steps = 5;
  std::vector<StepAttention> att;
  const auto imgs = generate_images(*sys, {a, b, swap_tokens(a, a, {2})}, sc, &att);
  const Eigen::Index per = 3 * 16 * 16;
  CHECK(imgs.allFinite());
  CHECK(bit_equal(imgs.segment(0, per), imgs.segment(2 * per, per)));
  CHECK(!bit_equal(imgs.segment(0, per), imgs.segment(per, per)));
  REQUIRE(att.size() == 15);
  for (const auto& st : att)
    for (const auto& w : st.layers) {
      CHECK(w.keys == 6);
      for (int q = 0; q < w.batch * w.queries; ++q) {
        double s = 0;
        for (int k = 0; k < w.keys; ++k) s += w.weights[static_cast<std::size_t>(q * w.keys + k)];
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
    }
  const double mse = recon_mse(*sys, ds, sc, 4, 1);
  CHECK(mse > 0);
  CHECK(mse == recon_mse(*sys, ds, sc, 4, 1));

  auto cfg = TrainConfig::tiny();
  cfg.variant = Variant::encdec_no_diff;
  Trainer dec(cfg, ds);
  dec.run(3);
  const auto dsys = restore(dec.checkpoint());
  const auto denc = encode_rows(*dsys, ds, {7});
  const auto out = generate_images(*dsys, {token_set(denc, 0, cfg)}, sc);
  CHECK(out.size() == per);
}

TEST_CASE("vector token mode uses per-token PCA for metrics") {
  auto cfg = TrainConfig::tiny();
  cfg.token_mode = TokenMode::vector;
  const auto sys = build_variant(cfg);
  const auto& ds = shapes16();
  const auto enc = encode_rows(*sys, ds, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  CHECK(enc.scalars.size() == 0);
  const auto rep = representation_for_metrics(*sys, enc);
  CHECK(rep.values.cols() == cfg.num_tokens);
  CHECK(rep.source_mode == RepresentationSource::pca);
}
