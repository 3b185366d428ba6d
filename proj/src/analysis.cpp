#include "encdiff/analysis.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "encdiff/io.hpp"

namespace encdiff {

namespace {

constexpr char kAttnMagic[4] = {'A', 'T', 'T', 'N'};
constexpr std::uint32_t kAttnVersion = 1;

std::string fmt(double v, int prec = 9) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

std::string hex_color(const std::array<std::uint8_t, 3>& c) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c[0], c[1], c[2]);
  return buf;
}

const std::array<std::uint8_t, 3> kSeriesColors[] = {
    {31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40}, {148, 103, 189}, {140, 86, 75}};

struct Canvas {
  int w, h;
  std::vector<std::uint8_t> px;
  Canvas(int w_, int h_) : w(w_), h(h_), px(static_cast<std::size_t>(w_) * h_ * 3, 255) {}
  void set(int x, int y, const std::array<std::uint8_t, 3>& c) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    auto* p = &px[(static_cast<std::size_t>(y) * w + x) * 3];
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  }
  void line(double x0, double y0, double x1, double y1, const std::array<std::uint8_t, 3>& c) {
    const int n = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
    for (int i = 0; i <= n; ++i) {
      const double f = static_cast<double>(i) / n;
      set(static_cast<int>(std::lround(x0 + f * (x1 - x0))), static_cast<int>(std::lround(y0 + f * (y1 - y0))), c);
    }
  }
};

}  // namespace

CurveMode parse_curve_mode(const std::string& s) {
  if (s == "closed_form") return CurveMode::closed_form;
  if (s == "monte_carlo") return CurveMode::monte_carlo;
  if (s == "both") return CurveMode::both;
  throw std::invalid_argument("unknown curve mode '" + s + "' (closed_form, monte_carlo, both)");
}

std::string to_string(CurveMode m) {
  switch (m) {
    case CurveMode::closed_form: return "closed_form";
    case CurveMode::monte_carlo: return "monte_carlo";
    case CurveMode::both: return "both";
  }
  return "?";
}

std::vector<CurveRow> bottleneck_curves(const std::vector<ScheduleKind>& kinds, const ScheduleParams& base, CurveMode mode,
                                        const MonteCarloSource& mc) {
  std::vector<CurveRow> rows;
  MonteCarloMoments moments;
  if (mode != CurveMode::closed_form) moments = monte_carlo_moments(mc);
  for (auto kind : kinds) {
    auto p = base;
    p.kind = kind;
    const auto c = derive_coefficients(make_schedule(p));
    const auto closed = bottleneck_curve_closed_form(c);
    std::vector<CurvePoint> sampled;
    if (mode != CurveMode::closed_form) sampled = bottleneck_curve_monte_carlo(c, moments);
    for (std::size_t i = 0; i < closed.size(); ++i)
      rows.push_back({kind, closed[i].t, closed[i].c_per_dim,
                      sampled.empty() ? std::numeric_limits<double>::quiet_NaN() : sampled[i].c_per_dim});
  }
  return rows;
}

std::string curves_csv(const std::vector<CurveRow>& rows, CurveMode mode) {
  std::ostringstream os;
  os << "schedule,t";
  if (mode != CurveMode::monte_carlo) os << ",closed_form";
  if (mode != CurveMode::closed_form) os << ",monte_carlo";
  os << '\n';
  for (const auto& r : rows) {
    os << to_string(r.kind) << ',' << r.t;
    if (mode != CurveMode::monte_carlo) os << ',' << fmt(r.closed_form, 17);
    if (mode != CurveMode::closed_form) os << ',' << fmt(r.monte_carlo, 17);
    os << '\n';
  }
  return os.str();
}

void plot_curves(const std::filesystem::path& path, const std::vector<CurveRow>& rows, CurveMode mode) {
  std::vector<PlotSeries> series;
  std::vector<ScheduleKind> order;
  for (const auto& r : rows)
    if (std::find(order.begin(), order.end(), r.kind) == order.end()) order.push_back(r.kind);
  int color = 0;
  for (auto kind : order) {
    for (int pass = 0; pass < 2; ++pass) {
      if (pass == 0 && mode == CurveMode::monte_carlo) continue;
      if (pass == 1 && mode == CurveMode::closed_form) continue;
      PlotSeries s;
      s.color = kSeriesColors[color % 6];
      if (pass == 1 && mode == CurveMode::both)
        for (auto& ch : s.color) ch = static_cast<std::uint8_t>(ch / 2 + 127);
      s.label = to_string(kind) + (pass == 0 ? "" : " (monte_carlo)");
      for (const auto& r : rows)
        if (r.kind == kind) {
          s.x.push_back(r.t);
          s.y.push_back(pass == 0 ? r.closed_form : r.monte_carlo);
        }
      series.push_back(std::move(s));
    }
    ++color;
  }
  write_line_plot(path, series, "information bottleneck C_t/n vs t");
}

void write_line_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series, const std::string& title,
                     int width, int height) {
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!(s.y[i] > 0) || !std::isfinite(s.y[i])) continue;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, std::log10(s.y[i]));
      ymax = std::max(ymax, std::log10(s.y[i]));
    }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  ymin = std::floor(ymin);
  ymax = std::ceil(ymax);
  if (ymax == ymin) ymax = ymin + 1;

  const int left = 50, right = 20, top = 20, bottom = 40;
  const double pw = width - left - right, ph = height - top - bottom;
  auto X = [&](double x) { return left + (x - xmin) / (xmax - xmin) * pw; };
  auto Y = [&](double ly) { return top + (ymax - ly) / (ymax - ymin) * ph; };

  Canvas cv(width, height);
  const std::array<std::uint8_t, 3> grid{225, 225, 225}, axis{60, 60, 60};
  for (double d = ymin; d <= ymax + 1e-9; d += 1) cv.line(left, Y(d), left + pw, Y(d), grid);
  for (int k = 0; k <= 10; ++k) cv.line(X(xmin + k * (xmax - xmin) / 10), top, X(xmin + k * (xmax - xmin) / 10), top + ph, grid);
  cv.line(left, top, left, top + ph, axis);
  cv.line(left, top + ph, left + pw, top + ph, axis);

  std::string legend;
  for (const auto& s : series) {
    bool have = false;
    double px = 0, py = 0;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!(s.y[i] > 0) || !std::isfinite(s.y[i])) {
        have = false;
        continue;
      }
      const double qx = X(s.x[i]), qy = Y(std::log10(s.y[i]));
      if (have) cv.line(px, py, qx, qy, s.color);
      px = qx;
      py = qy;
      have = true;
    }
    if (!legend.empty()) legend += "; ";
    legend += s.label + "=" + hex_color(s.color);
  }
  io::write_png(path, width, height, 3, cv.px,
                {{"Title", title},
                 {"Legend", legend},
                 {"XRange", fmt(xmin) + " " + fmt(xmax)},
                 {"YAxis", "log10, decades " + fmt(ymin) + " to " + fmt(ymax)}});
}

void write_image_grid(const std::filesystem::path& path, const std::vector<std::vector<float>>& tiles, int rows, int cols,
                      int size, int channels) {
  const int pad = 2;
  const int W = cols * size + (cols + 1) * pad, H = rows * size + (rows + 1) * pad;
  std::vector<std::uint8_t> px(static_cast<std::size_t>(W) * H * 3, 0);
  for (std::size_t k = 0; k < tiles.size() && k < static_cast<std::size_t>(rows * cols); ++k) {
    if (tiles[k].empty()) continue;
    const auto bytes = io::to_bytes(tiles[k]);
    const int r = static_cast<int>(k) / cols, c = static_cast<int>(k) % cols;
    const int ox = pad + c * (size + pad), oy = pad + r * (size + pad);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        for (int ch = 0; ch < 3; ++ch)
          px[(static_cast<std::size_t>(oy + y) * W + ox + x) * 3 + ch] =
              bytes[(static_cast<std::size_t>(std::min(ch, channels - 1)) * size + y) * size + x];
  }
  io::write_png(path, W, H, 3, px);
}

double chroma_delta(std::span<const float> a, std::span<const float> b, int size) {
  const std::size_t P = static_cast<std::size_t>(size) * size;
  if (a.size() != 3 * P || b.size() != 3 * P) throw std::invalid_argument("chroma_delta: expected 3-channel images");
  double total = 0;
  for (std::size_t p = 0; p < P; ++p) {
    const double ma = (a[p] + a[P + p] + a[2 * P + p]) / 3.0, mb = (b[p] + b[P + p] + b[2 * P + p]) / 3.0;
    double d2 = 0;
    for (int c = 0; c < 3; ++c) {
      const double d = (a[c * P + p] - ma) - (b[c * P + p] - mb);
      d2 += d * d;
    }
    total += std::sqrt(d2);
  }
  return total / static_cast<double>(P);
}

SwapResult swap_experiment(const EncDiffSystem& sys, const FactorDataset& ds, int row_a, int row_b, const SamplerConfig& sampler) {
  if (row_a < 0 || row_b < 0 || static_cast<std::size_t>(row_a) >= ds.size() || static_cast<std::size_t>(row_b) >= ds.size())
    throw std::out_of_range("swap: image id out of range");
  const auto enc = encode_rows(sys, ds, {row_a, row_b});
  const auto ta = token_set(enc, 0, sys.config), tb = token_set(enc, 1, sys.config);
  std::vector<ConceptTokenSet> sets{ta};
  for (int i = 0; i < ta.num_tokens(); ++i) sets.push_back(swap_tokens(ta, tb, {i}));
  const auto samples = generate_images(sys, sets, sampler);

  const Eigen::Index per = samples.size() / static_cast<Eigen::Index>(sets.size());
  auto slice = [&](std::size_t k) {
    return std::vector<float>(samples.data() + static_cast<Eigen::Index>(k) * per, samples.data() + static_cast<Eigen::Index>(k + 1) * per);
  };
  SwapResult r;
  const std::vector<int> ra{row_a}, rb{row_b};
  r.original_a = ds.gather(ra);
  r.original_b = ds.gather(rb);
  r.no_swap = slice(0);
  for (std::size_t k = 1; k < sets.size(); ++k) {
    r.swapped.push_back(slice(k));
    r.chroma_deltas.push_back(chroma_delta(r.swapped.back(), r.no_swap, sys.config.image_size));
  }
  return r;
}

AttentionReduce parse_attention_reduce(const std::string& s) {
  if (s == "per_step") return AttentionReduce::per_step;
  if (s == "mean_over_steps") return AttentionReduce::mean_over_steps;
  throw std::invalid_argument("unknown reduction '" + s + "' (per_step, mean_over_steps)");
}

std::string to_string(AttentionReduce r) { return r == AttentionReduce::per_step ? "per_step" : "mean_over_steps"; }

AttentionDump attention_maps(const std::vector<StepAttention>& steps, int image_size, int batch_index) {
  AttentionDump d;
  d.size = image_size;
  d.steps = static_cast<int>(steps.size());
  if (steps.empty() || steps.front().layers.empty()) throw std::invalid_argument("attention_maps: no cross-attention maps captured");
  d.tokens = steps.front().layers.front().keys;
  const std::size_t plane = static_cast<std::size_t>(image_size) * image_size;
  d.values.assign(static_cast<std::size_t>(d.steps) * d.tokens * plane, 0.0);
  for (int s = 0; s < d.steps; ++s) {
    d.timesteps.push_back(steps[static_cast<std::size_t>(s)].t);
    const auto& layers = steps[static_cast<std::size_t>(s)].layers;
    for (const auto& L : layers) {
      if (L.keys != d.tokens || batch_index >= L.batch) throw std::invalid_argument("attention_maps: inconsistent layer maps");
      const int side = static_cast<int>(std::lround(std::sqrt(L.queries)));
      if (side * side != L.queries || L.keys <= 0) throw std::invalid_argument("attention_maps: non-square query grid");
      for (int y = 0; y < image_size; ++y)
        for (int x = 0; x < image_size; ++x) {
          const int q = (y * side / image_size) * side + x * side / image_size;
          const double* w = &L.weights[(static_cast<std::size_t>(batch_index) * L.queries + q) * L.keys];
          for (int n = 0; n < d.tokens; ++n)
            d.values[(static_cast<std::size_t>(s) * d.tokens + n) * plane + static_cast<std::size_t>(y) * image_size + x] += w[n];
        }
    }
    const double inv = 1.0 / static_cast<double>(layers.size());
    for (std::size_t i = 0; i < d.tokens * plane; ++i) d.values[s * d.tokens * plane + i] *= inv;
  }
  return d;
}

AttentionDump mean_over_steps(const AttentionDump& d) {
  AttentionDump m;
  m.steps = 1;
  m.tokens = d.tokens;
  m.size = d.size;
  m.timesteps = {-1};
  const std::size_t block = static_cast<std::size_t>(d.tokens) * d.size * d.size;
  m.values.assign(block, 0.0);
  for (int s = 0; s < d.steps; ++s)
    for (std::size_t i = 0; i < block; ++i) m.values[i] += d.values[s * block + i];
  for (auto& v : m.values) v /= d.steps;
  return m;
}

void save_attention_dump(const AttentionDump& d, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.bytes(kAttnMagic, 4);
  w.u32(kAttnVersion);
  nlohmann::json h{{"steps", d.steps}, {"tokens", d.tokens}, {"size", d.size}, {"timesteps", d.timesteps}, {"dtype", "f64le"}};
  w.str(h.dump());
  for (double v : d.values) {
    const auto u = std::bit_cast<std::uint64_t>(v);
    w.u32(static_cast<std::uint32_t>(u));
    w.u32(static_cast<std::uint32_t>(u >> 32));
  }
  w.seal();
  io::write_file(path, w.buffer());
}

AttentionDump load_attention_dump(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader probe(bytes);
  const auto* magic = probe.take(4);
  if (!std::equal(magic, magic + 4, kAttnMagic)) throw io::FormatError("not an attention dump: " + path.string());
  if (probe.u32() != kAttnVersion) throw io::FormatError("unsupported attention dump version");
  const auto payload = io::verify_sealed(bytes);
  io::ByteReader r(payload);
  r.take(8);
  const auto h = nlohmann::json::parse(r.str());
  AttentionDump d;
  d.steps = h.at("steps");
  d.tokens = h.at("tokens");
  d.size = h.at("size");
  d.timesteps = h.at("timesteps").get<std::vector<int>>();
  const std::size_t n = static_cast<std::size_t>(d.steps) * d.tokens * d.size * d.size;
  r.need(n * 8);
  d.values.resize(n);
  for (auto& v : d.values) {
    const std::uint64_t lo = r.u32(), hi = r.u32();
    v = std::bit_cast<double>(lo | (hi << 32));
  }
  if (r.position() != payload.size()) throw io::FormatError("trailing bytes in attention dump");
  return d;
}

void write_heatmap(const std::filesystem::path& path, const AttentionDump& d, int step, int token) {
  const int S = d.size;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      lo = std::min(lo, d.at(step, token, y, x));
      hi = std::max(hi, d.at(step, token, y, x));
    }
  std::vector<std::uint8_t> px(static_cast<std::size_t>(S) * S * 3);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double v = hi > lo ? (d.at(step, token, y, x) - lo) / (hi - lo) : 0.0;
      io::colormap(v, &px[(static_cast<std::size_t>(y) * S + x) * 3]);
    }
  const int t = d.timesteps[static_cast<std::size_t>(step)];
  io::write_png(path, S, S, 3, px,
                {{"Comment", "per-map min-max rescaled; colormap viridis; raw min " + fmt(lo) + " max " + fmt(hi)},
                 {"Token", std::to_string(token)},
                 {"Step", t < 0 ? std::string("mean_over_steps") : std::to_string(t)}});
}

RepresentationMatrix select_representation(const EncDiffSystem& sys, const DatasetEncoding& enc, RepresentationChoice choice) {
  const bool scalar = sys.config.token_mode == TokenMode::scalar;
  switch (choice) {
    case RepresentationChoice::automatic:
      return representation_for_metrics(sys, enc);
    case RepresentationChoice::scalars:
      if (!scalar) throw IncompatibleRepresentation("representation 'scalars' needs a scalar-mode checkpoint; use auto, tokens or pca");
      return {enc.scalars, RepresentationSource::scalar};
    case RepresentationChoice::tokens:
      return {enc.tokens, RepresentationSource::vector};
    case RepresentationChoice::pca:
      return pca_per_block({enc.tokens, RepresentationSource::vector}, sys.config.token_dim);
  }
  throw std::logic_error("unreachable");
}

MetricReport evaluate(const EncDiffSystem& sys, const FactorDataset& ds, const EvalOptions& opt) {
  if (opt.seeds.empty()) throw std::invalid_argument("evaluate: at least one seed is required");
  if (ds.spec.image_size != sys.config.image_size)
    throw std::invalid_argument("evaluate: dataset image size " + std::to_string(ds.spec.image_size) + " does not match the checkpoint (" +
                                std::to_string(sys.config.image_size) + ")");
  MetricReport rep;
  for (const auto& f : ds.spec.factors) rep.factor_names.push_back(f.name);
  rep.seeds_used = opt.seeds;

  std::vector<double> fv, dci, mse;
  if (opt.factorvae || opt.dci) {
    const auto enc = encode_dataset(sys, ds);
    const auto reps = select_representation(sys, enc, opt.representation);
    rep.source_mode = reps.source_mode;
    for (std::size_t k = 0; k < opt.seeds.size(); ++k) {
      const auto seed = opt.seeds[k];
      if (opt.factorvae) {
        auto c = opt.factorvae_config;
        c.seed = seed;
        fv.push_back(factorvae_score(reps, ds, c));
      }
      if (opt.dci) {
        auto c = opt.dci_config;
        c.seed = seed;
        auto r = dci_disentanglement(reps, ds, c);
        dci.push_back(r.disentanglement);
        if (k == 0) {
          rep.importance = r.importance;
          rep.warnings.insert(rep.warnings.end(), r.warnings.begin(), r.warnings.end());
        }
      }
    }
  }
  if (opt.recon)
    for (auto seed : opt.seeds) {
      auto s = opt.sampler;
      s.seed = seed;
      mse.push_back(recon_mse(sys, ds, s, opt.recon_images, seed));
    }
  if (opt.factorvae) rep.factorvae_score = MetricStat::of(fv);
  if (opt.dci) rep.dci_disentanglement = MetricStat::of(dci);
  if (opt.recon) rep.recon_mse = MetricStat::of(mse);
  return rep;
}

std::vector<CheckResult> run_theory_checks(const ChecksOptions& opt, std::uint64_t seed) {
  std::vector<CheckResult> out;
  auto add = [&](std::string name, bool ok, std::string detail) { out.push_back({std::move(name), ok, std::move(detail)}); };

  std::vector<std::vector<CurvePoint>> closed;
  MonteCarloSource src;
  src.num_samples = opt.mc_samples;
  src.seed = seed;
  const auto moments = monte_carlo_moments(src);
  for (auto kind : kAllScheduleKinds) {
    const auto c = derive_coefficients(make_schedule(kind, opt.T));
    const auto v = loss_vlb_equivalence_check(c, opt.vlb_trials, seed);
    add("vlb_equivalence/" + to_string(kind), v.max_relative_error < 1e-6,
        "max rel err " + fmt(v.max_relative_error, 3) + " at t=" + std::to_string(v.worst_t));

    const auto curve = bottleneck_curve_closed_form(c);
    bool ok = true;
    for (std::size_t i = 0; i < curve.size(); ++i) {
      ok = ok && std::isfinite(curve[i].c_per_dim);
      if (i > 0) ok = ok && curve[i].c_per_dim < curve[i - 1].c_per_dim;
    }
    add("bottleneck_monotone/" + to_string(kind), ok, std::to_string(curve.size()) + " points");

    const auto mc = bottleneck_curve_monte_carlo(c, moments);
    double worst = 0;
    for (std::size_t i = 0; i < mc.size(); ++i) worst = std::max(worst, std::abs(mc[i].c_per_dim / curve[i].c_per_dim - 1));
    add("bottleneck_mc_agreement/" + to_string(kind), worst < opt.mc_tolerance, "max rel diff " + fmt(worst, 3));
    closed.push_back(curve);
  }
  bool distinct = true;
  for (std::size_t a = 0; a < closed.size(); ++a)
    for (std::size_t b = a + 1; b < closed.size(); ++b) {
      bool differ = false;
      for (std::size_t i = 0; i < closed[a].size(); ++i) differ = differ || closed[a][i].c_per_dim != closed[b][i].c_per_dim;
      distinct = distinct && differ;
    }
  add("bottleneck_distinct", distinct, "pairwise across schedules");

  const Gaussian1D p{0.3, 1.7}, q{-1.2, 0.6};
  const auto aff = kl_invariance_check(p, q, MappingSpec::affine(2, 1), 0, seed);
  add("kl_invariance/affine", aff.abs_diff <= 1e-12 * std::max(1.0, aff.kl_before), "|diff| " + fmt(aff.abs_diff, 3));
  const auto same = kl_invariance_check(p, p, MappingSpec::monotone("x_plus_tanh", 0.1), 1000, seed);
  add("kl_invariance/identical", same.kl_before == 0.0 && same.kl_after == 0.0, "kl " + fmt(same.kl_after, 3));
  const auto mono = kl_invariance_check(p, q, MappingSpec::monotone("x_plus_tanh", 0.1), opt.kl_samples, seed);
  add("kl_invariance/monotone", mono.abs_diff < 3 * mono.standard_error,
      "|diff| " + fmt(mono.abs_diff, 3) + ", 3 SE " + fmt(3 * mono.standard_error, 3));
  return out;
}

}  // namespace encdiff
