#include <CLI11.hpp>
#include <json.hpp>

#include <Eigen/Core>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "encdiff/analysis.hpp"
#include "encdiff/io.hpp"

using namespace encdiff;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "0.1.0";
constexpr int kManifestSchema = 1;

enum Exit { kOk = 0, kUsage = 1, kCheckFailed = 2, kRuntime = 3 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- per-command options; these are what run.json records and replays

struct GenDataOptions {
  FactorSpec spec = FactorSpec::minishapes();
  std::uint64_t seed = 0;
  std::int64_t cap = kDefaultCombinationCap;
  std::string out = "minishapes.mshp";
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GenDataOptions, spec, seed, cap, out)

struct TrainOptions {
  TrainConfig config;
  std::string data;
  std::string resume;
  int until = 0;  // 0: config.steps
  int checkpoint_every = 0;
  int log_every = 100;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainOptions, config, data, resume, until, checkpoint_every, log_every)

struct EvalCommandOptions {
  std::string checkpoint;
  std::string data;
  bool raw_weights = false;
  EvalOptions eval;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalCommandOptions, checkpoint, data, raw_weights, eval)

struct CurvesOptions {
  std::vector<ScheduleKind> schedules{std::begin(kAllScheduleKinds), std::end(kAllScheduleKinds)};
  std::string mode = "both";
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int mc_samples = 10000;
  int mc_dim = 3 * 32 * 32;
  std::uint64_t seed = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CurvesOptions, schedules, mode, T, beta_start, beta_end, mc_samples, mc_dim, seed)

struct SwapOptions {
  std::string checkpoint;
  std::string data;
  int a = 0;
  int b = 1;
  bool raw_weights = false;
  SamplerConfig sampler;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SwapOptions, checkpoint, data, a, b, raw_weights, sampler)

struct AttnOptions {
  std::string checkpoint;
  std::string data;
  int image = 0;
  std::string reduce = "mean_over_steps";
  int plot_every = 50;  // per_step: heatmaps for every k-th visited step
  bool raw_weights = false;
  SamplerConfig sampler;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AttnOptions, checkpoint, data, image, reduce, plot_every, raw_weights, sampler)

struct ChecksCommandOptions {
  ChecksOptions checks;
  std::uint64_t seed = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ChecksCommandOptions, checks, seed)

// ---- helpers

std::string absolute_or_empty(const std::string& p) { return p.empty() ? p : fs::absolute(p).lexically_normal().string(); }

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file: " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("malformed JSON in " + path + ": " + e.what());
  }
}

template <typename T>
T from_config(const json& j, const std::string& what) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    throw UsageError("invalid " + what + ": " + e.what());
  }
}

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

std::string config_hash(const json& options) {
  const auto s = options.dump();
  return hex32(io::crc32({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}));
}

json versions() {
  return {{"encdiff", kToolVersion},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." + std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"cli11", CLI11_VERSION},
          {"zlib", io::linked_zlib_version()}};
}

void write_text_file(const fs::path& p, const std::string& s) {
  io::write_file(p, {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

std::unique_ptr<EncDiffSystem> load_system(const std::string& path, bool raw_weights) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  return restore(load_checkpoint(path), !raw_weights);
}

FactorDataset load_dataset(const std::string& path) {
  if (path.empty()) throw UsageError("--data is required");
  return load(path);
}

template <typename E, typename F>
E parse_enum(const std::string& s, F parse, const char* flag) {
  try {
    return parse(s);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string(flag) + ": " + e.what());
  }
}

// ---- commands; each returns an exit code and records its outputs

struct Outputs {
  std::vector<std::string> files;
  void add(const fs::path& p) { files.push_back(p.filename() == p ? p.string() : p.lexically_normal().string()); }
};

int run_gen_data(const GenDataOptions& o, const fs::path& out_dir, Outputs& outs) {
  try {
    o.spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto ds = generate(o.spec, o.seed, o.cap);
  const fs::path path = out_dir / o.out;
  save(ds, path);
  outs.add(path);
  std::cout << "wrote " << ds.size() << " images to " << path.string() << "\n";
  return kOk;
}

int run_train(const TrainOptions& o, const fs::path& out_dir, Outputs& outs) {
  try {
    o.config.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto ds = load_dataset(o.data);
  std::unique_ptr<Trainer> tr;
  if (o.resume.empty()) {
    tr = std::make_unique<Trainer>(o.config, ds);
  } else {
    tr = std::make_unique<Trainer>(load_checkpoint(o.resume), ds);
  }
  const int until = o.until > 0 ? o.until : tr->system().config.steps;
  const fs::path ckpt = out_dir / "checkpoint.encd";
  TrainCallbacks cb;
  cb.on_step = [&](int step, double loss) {
    if (o.log_every > 0 && (step % o.log_every == 0 || step == until)) std::cerr << "step " << step << " loss " << loss << "\n";
    if (o.checkpoint_every > 0 && step % o.checkpoint_every == 0 && step != until) save_checkpoint(tr->checkpoint(), ckpt);
  };
  tr->run(until, cb);
  save_checkpoint(tr->checkpoint(), ckpt);
  write_text_file(out_dir / "loss.csv", loss_csv(tr->loss_history()));
  outs.add(ckpt);
  outs.add(out_dir / "loss.csv");
  std::cout << "trained to step " << tr->current_step() << "; checkpoint " << ckpt.string() << "\n";
  return kOk;
}

int run_eval(const EvalCommandOptions& o, const fs::path& out_dir, Outputs& outs) {
  if (!o.eval.factorvae && !o.eval.dci && !o.eval.recon) throw UsageError("no metrics requested");
  if (o.eval.seeds.empty()) throw UsageError("--seeds must list at least one seed");
  const auto sys = load_system(o.checkpoint, o.raw_weights);
  const auto ds = load_dataset(o.data);
  // surface representation/mode conflicts as usage errors before any work
  if (o.eval.representation == RepresentationChoice::scalars && sys->config.token_mode != TokenMode::scalar)
    throw UsageError("representation 'scalars' needs a scalar-mode checkpoint; use auto, tokens or pca");
  if (ds.spec.image_size != sys->config.image_size) throw UsageError("dataset image size does not match the checkpoint");
  const auto report = evaluate(*sys, ds, o.eval);
  write_text_file(out_dir / "metrics.json", to_json(report).dump(2) + "\n");
  outs.add(out_dir / "metrics.json");
  if (report.importance.size() > 0) {
    write_text_file(out_dir / "importance.csv", importance_csv(report));
    outs.add(out_dir / "importance.csv");
  }
  auto show = [](const char* name, const std::optional<MetricStat>& m) {
    if (m) std::printf("%-20s %.6f +- %.6f\n", name, m->mean, m->std);
  };
  show("factorvae_score", report.factorvae_score);
  show("dci_disentanglement", report.dci_disentanglement);
  show("recon_mse", report.recon_mse);
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  return kOk;
}

int run_curves(const CurvesOptions& o, const fs::path& out_dir, Outputs& outs) {
  if (o.schedules.empty()) throw UsageError("--schedules is empty");
  const auto mode = parse_enum<CurveMode>(o.mode, parse_curve_mode, "--mode");
  ScheduleParams base;
  base.T = o.T;
  base.beta_start = o.beta_start;
  base.beta_end = o.beta_end;
  MonteCarloSource mc;
  mc.num_samples = o.mc_samples;
  mc.dim = o.mc_dim;
  mc.seed = o.seed;
  std::vector<CurveRow> rows;
  try {
    rows = bottleneck_curves(o.schedules, base, mode, mc);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  write_text_file(out_dir / "curves.csv", curves_csv(rows, mode));
  plot_curves(out_dir / "curves.png", rows, mode);
  outs.add(out_dir / "curves.csv");
  outs.add(out_dir / "curves.png");
  std::cout << rows.size() << " rows written to " << (out_dir / "curves.csv").string() << "\n";
  return kOk;
}

int run_swap(const SwapOptions& o, const fs::path& out_dir, Outputs& outs) {
  const auto sys = load_system(o.checkpoint, o.raw_weights);
  const auto ds = load_dataset(o.data);
  if (o.a < 0 || o.b < 0 || static_cast<std::size_t>(o.a) >= ds.size() || static_cast<std::size_t>(o.b) >= ds.size())
    throw UsageError("image ids must be in [0, " + std::to_string(ds.size()) + ")");
  if (ds.spec.image_size != sys->config.image_size) throw UsageError("dataset image size does not match the checkpoint");
  const auto r = swap_experiment(*sys, ds, o.a, o.b, o.sampler);
  const int N = static_cast<int>(r.swapped.size()), S = sys->config.image_size;

  // row 0: a, b, no-swap sample; row i: swap of token i - 1 and its difference to the no-swap sample
  std::vector<std::vector<float>> tiles{r.original_a, r.original_b, r.no_swap};
  for (int i = 0; i < N; ++i) {
    std::vector<float> diff(r.no_swap.size());
    for (std::size_t k = 0; k < diff.size(); ++k) diff[k] = std::min(1.0f, std::abs(r.swapped[i][k] - r.no_swap[k])) * 2.0f - 1.0f;
    tiles.push_back(r.swapped[i]);
    tiles.push_back(std::move(diff));
    tiles.emplace_back();
  }
  write_image_grid(out_dir / "swap.png", tiles, N + 1, 3, S);
  int best = 0;
  for (int i = 1; i < N; ++i)
    if (r.chroma_deltas[i] > r.chroma_deltas[best]) best = i;
  const json j{{"image_a", o.a},
               {"image_b", o.b},
               {"factors_a", ds.factors(o.a)},
               {"factors_b", ds.factors(o.b)},
               {"num_tokens", N},
               {"chroma_deltas", r.chroma_deltas},
               {"max_chroma_token", best},
               {"grid", {{"rows", N + 1}, {"cols", 3}, {"tile", S}}}};
  write_text_file(out_dir / "swap.json", j.dump(2) + "\n");
  outs.add(out_dir / "swap.png");
  outs.add(out_dir / "swap.json");
  std::cout << "swap grid with " << N + 1 << " rows; largest chroma change from token " << best << "\n";
  return kOk;
}

int run_attn(const AttnOptions& o, const fs::path& out_dir, Outputs& outs) {
  const auto reduce = parse_enum<AttentionReduce>(o.reduce, parse_attention_reduce, "--reduce");
  const auto sys = load_system(o.checkpoint, o.raw_weights);
  if (sys->config.conditioning != Conditioning::cross_attention)
    throw UsageError("attn needs a cross-attention checkpoint; this one is conditioned with AdaGN and has no token attention");
  const auto ds = load_dataset(o.data);
  if (o.image < 0 || static_cast<std::size_t>(o.image) >= ds.size())
    throw UsageError("--image must be in [0, " + std::to_string(ds.size()) + ")");
  const auto enc = encode_rows(*sys, ds, {o.image});
  std::vector<StepAttention> steps;
  generate_images(*sys, {token_set(enc, 0, sys->config)}, o.sampler, &steps);
  auto dump = attention_maps(steps, sys->config.image_size);
  if (reduce == AttentionReduce::mean_over_steps) dump = mean_over_steps(dump);

  const fs::path raw = out_dir / ("attention_" + to_string(reduce) + ".bin");
  save_attention_dump(dump, raw);
  outs.add(raw);
  const fs::path dir = out_dir / "heatmaps";
  fs::create_directories(dir);
  auto name = [](int v, int w) {
    std::string s = std::to_string(v);
    return std::string(static_cast<std::size_t>(std::max(0, w - static_cast<int>(s.size()))), '0') + s;
  };
  int files = 0;
  for (int s = 0; s < dump.steps; ++s) {
    const bool last = s == dump.steps - 1;
    if (reduce == AttentionReduce::per_step && o.plot_every > 0 && s % o.plot_every != 0 && !last) continue;
    for (int n = 0; n < dump.tokens; ++n) {
      std::string file = "token_" + name(n, 2);
      if (reduce == AttentionReduce::per_step) file += "_t" + name(dump.timesteps[s], 4);
      const fs::path p = dir / (file + ".png");
      write_heatmap(p, dump, s, n);
      outs.add(p);
      ++files;
    }
  }
  std::cout << files << " heatmaps in " << dir.string() << "; raw dump " << raw.string() << "\n";
  return kOk;
}

int run_checks(const ChecksCommandOptions& o, const fs::path& out_dir, Outputs& outs) {
  const auto results = run_theory_checks(o.checks, o.seed);
  bool all = true;
  json j = json::array();
  std::printf("%-36s %-6s %s\n", "check", "result", "detail");
  for (const auto& r : results) {
    std::printf("%-36s %-6s %s\n", r.name.c_str(), r.passed ? "PASS" : "FAIL", r.detail.c_str());
    all = all && r.passed;
    j.push_back({{"name", r.name}, {"passed", r.passed}, {"detail", r.detail}});
  }
  write_text_file(out_dir / "checks.json", j.dump(2) + "\n");
  outs.add(out_dir / "checks.json");
  return all ? kOk : kCheckFailed;
}

int dispatch(const std::string& command, const json& options, const fs::path& out_dir, Outputs& outs) {
  if (command == "gen-data") return run_gen_data(from_config<GenDataOptions>(options, "gen-data options"), out_dir, outs);
  if (command == "train") return run_train(from_config<TrainOptions>(options, "train options"), out_dir, outs);
  if (command == "eval") return run_eval(from_config<EvalCommandOptions>(options, "eval options"), out_dir, outs);
  if (command == "curves") return run_curves(from_config<CurvesOptions>(options, "curves options"), out_dir, outs);
  if (command == "swap") return run_swap(from_config<SwapOptions>(options, "swap options"), out_dir, outs);
  if (command == "attn") return run_attn(from_config<AttnOptions>(options, "attn options"), out_dir, outs);
  if (command == "checks") return run_checks(from_config<ChecksCommandOptions>(options, "checks options"), out_dir, outs);
  throw UsageError("unknown command '" + command + "'");
}

int execute(const std::string& command, const json& options, std::uint64_t seed, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  Outputs outs;
  const int code = dispatch(command, options, out_dir, outs);
  const json manifest{{"schema_version", kManifestSchema}, {"command", command},   {"options", options},
                      {"config_hash", config_hash(options)}, {"seed", seed},          {"versions", versions()},
                      {"outputs", outs.files},               {"exit_code", code}};
  write_text_file(out_dir / "run.json", manifest.dump(2) + "\n");
  return code;
}

/// Finds the value of `--<name> X` or `--<name>=X` anywhere on the command line.
std::optional<std::string> prescan(int argc, char** argv, const std::string& name) {
  const std::string flag = "--" + name;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == flag && i + 1 < argc) return std::string(argv[i + 1]);
    if (a.rfind(flag + "=", 0) == 0) return a.substr(flag.size() + 1);
  }
  return std::nullopt;
}

bool has_flag(int argc, char** argv, const std::string& flag) {
  for (int i = 1; i < argc; ++i)
    if (flag == argv[i]) return true;
  return false;
}

std::string first_subcommand(int argc, char** argv, const std::set<std::string>& names) {
  for (int i = 1; i < argc; ++i)
    if (names.count(argv[i])) return argv[i];
  return {};
}

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    try {
      out.push_back(std::stoull(item, &used));
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw UsageError("--seeds: '" + item + "' is not a non-negative integer");
  }
  return out;
}

int main_impl(int argc, char** argv) {
  CLI::App app{"Concept-token diffusion: data, training, evaluation and analysis"};
  app.set_version_flag("--version", kToolVersion);
  app.fallthrough();
  std::uint64_t seed = 0;
  std::string config_path, out_dir = "out", replay;
  auto* seed_opt = app.add_option("--seed", seed, "Seed applied to the command (training seed, data seed, sampler seed)");
  app.add_option("--config", config_path, "JSON file with the command's options; flags override it");
  auto* out_opt = app.add_option("--out-dir", out_dir, "Directory for outputs and run.json")->capture_default_str();
  app.add_option("--replay", replay, "Re-run the command recorded in a run.json manifest");

  const std::set<std::string> names{"gen-data", "train", "eval", "curves", "swap", "attn", "checks"};
  const std::string chosen = first_subcommand(argc, argv, names);
  const auto cfg = prescan(argc, argv, "config");
  auto base = [&](json fallback) { return cfg ? load_json_file(*cfg) : fallback; };

  // gen-data
  GenDataOptions gen;
  auto* c_gen = app.add_subcommand("gen-data", "Render the factor dataset to a checksummed file");
  c_gen->add_option("--image-size", gen.spec.image_size, "Image side in pixels (16, 32 or 64)");
  c_gen->add_option("--cap", gen.cap, "Refuse specs with more combinations than this");
  c_gen->add_option("--out", gen.out, "Output file name inside --out-dir");

  // train
  TrainOptions tr;
  std::string tr_schedule, tr_variant, tr_cond, tr_mode;
  auto* c_train = app.add_subcommand("train", "Train an encoder and its decoder on a dataset file");
  c_train->add_flag("--tiny", "Start from the small smoke-test configuration");
  c_train->add_option("--data", tr.data, "Dataset file from gen-data")->required();
  c_train->add_option("--steps", tr.config.steps, "Optimizer steps");
  c_train->add_option("--batch-size", tr.config.batch_size, "Batch size");
  c_train->add_option("--lr", tr.config.learning_rate, "Adam learning rate");
  c_train->add_option("--ema-decay", tr.config.ema_decay, "EMA decay");
  c_train->add_option("--num-tokens", tr.config.num_tokens, "Number of concept tokens");
  c_train->add_option("--token-dim", tr.config.token_dim, "Token width");
  c_train->add_option("--schedule", tr_schedule, "cosine, linear, sqrt_linear or sqrt");
  c_train->add_option("--variant", tr_variant, "encdiff or encdec_no_diff");
  c_train->add_option("--conditioning", tr_cond, "cross_attention or adagn");
  c_train->add_option("--token-mode", tr_mode, "scalar or vector");
  c_train->add_option("--resume", tr.resume, "Continue from a checkpoint");
  c_train->add_option("--until", tr.until, "Stop at this step instead of the configured total");
  c_train->add_option("--checkpoint-every", tr.checkpoint_every, "Also save every k steps");
  c_train->add_option("--log-every", tr.log_every, "Print the loss every k steps");

  // eval
  EvalCommandOptions ev;
  std::string ev_metrics, ev_seeds, ev_repr;
  auto* c_eval = app.add_subcommand("eval", "Compute disentanglement and reconstruction metrics");
  c_eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  c_eval->add_option("--data", ev.data, "Dataset file")->required();
  c_eval->add_option("--metrics", ev_metrics, "Comma list of factorvae, dci, recon (default factorvae,dci)");
  c_eval->add_option("--seeds", ev_seeds, "Comma list of evaluation seeds (default: --seed)");
  c_eval->add_option("--representation", ev_repr, "auto, scalars, tokens or pca");
  c_eval->add_option("--recon-images", ev.eval.recon_images, "Images sampled for recon");
  c_eval->add_option("--sampler-steps", ev.eval.sampler.num_steps, "Reverse steps for recon");
  c_eval->add_flag("--raw-weights", ev.raw_weights, "Use raw instead of EMA weights");

  // curves
  CurvesOptions cu;
  std::string cu_schedules;
  auto* c_curves = app.add_subcommand("curves", "Information-bottleneck curves of the variance schedules");
  c_curves->add_option("--schedules", cu_schedules, "Comma list of schedules (default all four)");
  c_curves->add_option("--mode", cu.mode, "closed_form, monte_carlo or both");
  c_curves->add_option("--T", cu.T, "Diffusion steps");
  c_curves->add_option("--mc-samples", cu.mc_samples, "Monte-Carlo samples");
  c_curves->add_option("--mc-dim", cu.mc_dim, "Monte-Carlo data dimension");

  // swap
  SwapOptions sw;
  auto* c_swap = app.add_subcommand("swap", "Swap single tokens between two images and sample");
  c_swap->add_option("--checkpoint", sw.checkpoint, "Checkpoint file")->required();
  c_swap->add_option("--data", sw.data, "Dataset file")->required();
  c_swap->add_option("--a", sw.a, "Source image row");
  c_swap->add_option("--b", sw.b, "Target image row");
  c_swap->add_option("--sampler-steps", sw.sampler.num_steps, "Reverse steps");
  c_swap->add_flag("--raw-weights", sw.raw_weights, "Use raw instead of EMA weights");

  // attn
  AttnOptions at;
  auto* c_attn = app.add_subcommand("attn", "Export token attention maps during sampling");
  c_attn->add_option("--checkpoint", at.checkpoint, "Checkpoint file")->required();
  c_attn->add_option("--data", at.data, "Dataset file")->required();
  c_attn->add_option("--image", at.image, "Image row");
  c_attn->add_option("--reduce", at.reduce, "per_step or mean_over_steps");
  c_attn->add_option("--plot-every", at.plot_every, "per_step: heatmaps for every k-th step (the raw dump keeps all)");
  c_attn->add_option("--sampler-steps", at.sampler.num_steps, "Reverse steps");
  c_attn->add_flag("--raw-weights", at.raw_weights, "Use raw instead of EMA weights");

  // checks
  ChecksCommandOptions ch;
  auto* c_checks = app.add_subcommand("checks", "Numerical checks of the diffusion identities");
  c_checks->add_option("--T", ch.checks.T, "Diffusion steps");
  c_checks->add_option("--vlb-trials", ch.checks.vlb_trials, "Random trials per schedule");
  c_checks->add_option("--kl-samples", ch.checks.kl_samples, "Monte-Carlo samples for the nonlinear map");

  // defaults < --config < flags: the config is loaded into the bound structs before parsing
  if (chosen == "gen-data") {
    if (cfg) gen.spec = from_config<FactorSpec>(load_json_file(*cfg), "factor spec");
  } else if (chosen == "train") {
    const TrainConfig start = has_flag(argc, argv, "--tiny") ? TrainConfig::tiny() : TrainConfig{};
    tr.config = from_config<TrainConfig>(base(json(start)), "training config");
  } else if (chosen == "eval") {
    ev.eval = from_config<EvalOptions>(base(json(ev.eval)), "eval config");
  } else if (chosen == "curves") {
    cu = from_config<CurvesOptions>(base(json(cu)), "curves config");
  } else if (chosen == "swap") {
    sw.sampler = from_config<SamplerConfig>(base(json(sw.sampler)), "sampler config");
  } else if (chosen == "attn") {
    at.sampler = from_config<SamplerConfig>(base(json(at.sampler)), "sampler config");
  } else if (chosen == "checks") {
    ch.checks = from_config<ChecksOptions>(base(json(ch.checks)), "checks config");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  const bool seed_given = seed_opt->count() > 0;
  if (!replay.empty()) {
    if (!chosen.empty()) throw UsageError("--replay takes no subcommand");
    const auto m = load_json_file(replay);
    if (!m.contains("command") || !m.contains("options")) throw UsageError("not a run manifest: " + replay);
    const fs::path dir = out_opt->count() ? fs::path(out_dir) : fs::path(replay).parent_path();
    return execute(m.at("command"), m.at("options"), m.value("seed", std::uint64_t{0}), dir);
  }
  if (chosen.empty()) {
    std::cerr << app.help();
    return kUsage;
  }

  json options;
  if (chosen == "gen-data") {
    gen.seed = seed;
    options = gen;
  } else if (chosen == "train") {
    auto set_enum = [](const std::string& v, auto& field, const char* flag) {
      if (v.empty()) return;
      json j = v;
      using T = std::decay_t<decltype(field)>;
      const T parsed = j.get<T>();
      if (json(parsed) != j) throw UsageError(std::string(flag) + ": unknown value '" + v + "'");
      field = parsed;
    };
    set_enum(tr_schedule, tr.config.schedule.kind, "--schedule");
    set_enum(tr_variant, tr.config.variant, "--variant");
    set_enum(tr_cond, tr.config.conditioning, "--conditioning");
    set_enum(tr_mode, tr.config.token_mode, "--token-mode");
    if (seed_given) tr.config.seed = seed;
    tr.data = absolute_or_empty(tr.data);
    tr.resume = absolute_or_empty(tr.resume);
    options = tr;
  } else if (chosen == "eval") {
    if (!ev_metrics.empty()) {
      ev.eval.factorvae = ev.eval.dci = ev.eval.recon = false;
      std::stringstream ss(ev_metrics);
      std::string m;
      while (std::getline(ss, m, ',')) {
        if (m == "factorvae") ev.eval.factorvae = true;
        else if (m == "dci") ev.eval.dci = true;
        else if (m == "recon") ev.eval.recon = true;
        else throw UsageError("--metrics: unknown metric '" + m + "'");
      }
    }
    if (!ev_seeds.empty()) ev.eval.seeds = parse_seed_list(ev_seeds);
    else if (seed_given || !cfg) ev.eval.seeds = {seed};
    if (!ev_repr.empty()) {
      const json j = ev_repr;
      const auto r = j.get<RepresentationChoice>();
      if (json(r) != j) throw UsageError("--representation: unknown value '" + ev_repr + "'");
      ev.eval.representation = r;
    }
    ev.checkpoint = absolute_or_empty(ev.checkpoint);
    ev.data = absolute_or_empty(ev.data);
    options = ev;
  } else if (chosen == "curves") {
    if (!cu_schedules.empty()) {
      cu.schedules.clear();
      std::stringstream ss(cu_schedules);
      std::string s;
      while (std::getline(ss, s, ',')) cu.schedules.push_back(parse_enum<ScheduleKind>(s, parse_schedule_kind, "--schedules"));
    }
    if (seed_given) cu.seed = seed;
    options = cu;
  } else if (chosen == "swap") {
    if (seed_given) sw.sampler.seed = seed;
    sw.checkpoint = absolute_or_empty(sw.checkpoint);
    sw.data = absolute_or_empty(sw.data);
    options = sw;
  } else if (chosen == "attn") {
    if (seed_given) at.sampler.seed = seed;
    at.checkpoint = absolute_or_empty(at.checkpoint);
    at.data = absolute_or_empty(at.data);
    options = at;
  } else if (chosen == "checks") {
    ch.seed = seed;
    options = ch;
  }
  return execute(chosen, options, seed, out_dir);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return main_impl(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}
