#include "encdiff/metrics.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace encdiff {

namespace {

void check_aligned(const RepresentationMatrix& reps, const FactorDataset& ds) {
  if (static_cast<std::size_t>(reps.values.rows()) != ds.size())
    throw std::invalid_argument("representation has " + std::to_string(reps.values.rows()) + " rows, dataset has " +
                                std::to_string(ds.size()));
  if (reps.values.cols() == 0) throw std::invalid_argument("representation has no codes");
  if (!reps.values.allFinite()) throw std::invalid_argument("representation contains non-finite values");
}

double entropy_weighted_score(const Eigen::MatrixXd& P) {
  if ((P.array() < 0).any()) throw std::invalid_argument("importance must be nonnegative");
  const Eigen::Index K = P.cols();
  double total = 0, score = 0;
  for (Eigen::Index i = 0; i < P.rows(); ++i) {
    const double s = P.row(i).sum();
    if (s <= 0) continue;
    total += s;
    double d = 1.0;
    if (K > 1) {
      double h = 0;
      for (Eigen::Index k = 0; k < K; ++k) {
        const double p = P(i, k) / s;
        if (p > 0) h -= p * std::log(p);
      }
      d = 1.0 - h / std::log(static_cast<double>(K));
      // rounding in the entropy sum
      if (std::abs(d) < 1e-12) d = 0.0;
      d = std::clamp(d, 0.0, 1.0);
    }
    score += s * d;
  }
  return total > 0 ? score / total : 0.0;
}

}  // namespace

FactorVaeResult factorvae_details(const RepresentationMatrix& reps, const FactorDataset& ds, const FactorVaeConfig& cfg) {
  check_aligned(reps, ds);
  if (cfg.num_votes < 1) throw std::invalid_argument("num_votes must be >= 1");
  const Eigen::MatrixXd& X = reps.values;
  const Eigen::Index R = X.cols();
  const int F = static_cast<int>(ds.spec.factors.size());

  const Eigen::RowVectorXd mean = X.colwise().mean();
  const Eigen::RowVectorXd stdev = ((X.rowwise() - mean).array().square().colwise().mean()).sqrt();
  const double cutoff = cfg.variance_threshold * stdev.mean();
  FactorVaeResult out;
  for (Eigen::Index r = 0; r < R; ++r)
    if (stdev(r) > 0 && stdev(r) >= cutoff) out.active_codes.push_back(static_cast<int>(r));
  if (out.active_codes.empty()) throw DegenerateRepresentation("all representation codes were pruned as collapsed");

  out.votes = Eigen::MatrixXi::Zero(R, F);
  Rng rng(cfg.seed);
  Eigen::VectorXd var(static_cast<Eigen::Index>(out.active_codes.size()));
  for (int v = 0; v < cfg.num_votes; ++v) {
    const int k = rng.uniform_int(0, F - 1);
    const auto batch = sample_fixed_factor(ds, k, cfg.batch, rng);
    for (std::size_t a = 0; a < out.active_codes.size(); ++a) {
      const int code = out.active_codes[a];
      double s = 0, s2 = 0;
      for (int row : batch.rows) {
        const double z = X(row, code) / stdev(code);
        s += z;
        s2 += z * z;
      }
      const double n = static_cast<double>(batch.rows.size());
      var(static_cast<Eigen::Index>(a)) = std::max(0.0, s2 / n - (s / n) * (s / n));
    }
    Eigen::Index best = 0;
    var.minCoeff(&best);
    ++out.votes(out.active_codes[static_cast<std::size_t>(best)], k);
  }
  out.score = static_cast<double>(out.votes.rowwise().maxCoeff().sum()) / cfg.num_votes;
  return out;
}

double factorvae_score(const RepresentationMatrix& reps, const FactorDataset& ds, const FactorVaeConfig& cfg) {
  return factorvae_details(reps, ds, cfg).score;
}

double dci_from_importance(const Eigen::MatrixXd& importance) { return entropy_weighted_score(importance); }

double completeness_from_importance(const Eigen::MatrixXd& importance) {
  return entropy_weighted_score(importance.transpose());
}

void BoostedTrees::fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Options& opt) {
  const Eigen::Index n = x.rows(), p = x.cols();
  if (n != y.size() || n == 0) throw std::invalid_argument("BoostedTrees::fit: bad shapes");
  learning_rate_ = opt.learning_rate;
  base_ = y.mean();
  trees_.clear();
  importance_ = Eigen::VectorXd::Zero(p);

  std::vector<std::vector<int>> order(static_cast<std::size_t>(p));
  for (Eigen::Index f = 0; f < p; ++f) {
    auto& o = order[static_cast<std::size_t>(f)];
    o.resize(static_cast<std::size_t>(n));
    std::iota(o.begin(), o.end(), 0);
    std::stable_sort(o.begin(), o.end(), [&](int a, int b) { return x(a, f) < x(b, f); });
  }

  Eigen::VectorXd pred = Eigen::VectorXd::Constant(n, base_);
  std::vector<int> node_of(static_cast<std::size_t>(n));
  for (int m = 0; m < opt.trees; ++m) {
    const Eigen::VectorXd r = y - pred;
    Tree tree(1);
    std::fill(node_of.begin(), node_of.end(), 0);
    std::vector<double> sums{r.sum()};
    std::vector<int> counts{static_cast<int>(n)};
    std::vector<int> frontier{0};

    for (int level = 0; level < opt.depth && !frontier.empty(); ++level) {
      std::vector<int> slot(tree.size(), -1);
      for (std::size_t k = 0; k < frontier.size(); ++k) slot[static_cast<std::size_t>(frontier[k])] = static_cast<int>(k);
      const std::size_t K = frontier.size();
      std::vector<double> best_gain(K, 1e-12), best_thr(K, 0);
      std::vector<int> best_feat(K, -1);
      std::vector<double> lsum(K), lastv(K);
      std::vector<int> lcnt(K);
      for (Eigen::Index f = 0; f < p; ++f) {
        std::fill(lsum.begin(), lsum.end(), 0.0);
        std::fill(lcnt.begin(), lcnt.end(), 0);
        for (int s : order[static_cast<std::size_t>(f)]) {
          const int k = slot[static_cast<std::size_t>(node_of[static_cast<std::size_t>(s)])];
          if (k < 0) continue;
          const auto ku = static_cast<std::size_t>(k);
          const double v = x(s, f);
          if (lcnt[ku] > 0 && v > lastv[ku]) {
            const int node = frontier[ku];
            const double tot = sums[static_cast<std::size_t>(node)];
            const int cnt = counts[static_cast<std::size_t>(node)];
            const double nl = lcnt[ku], nr = cnt - lcnt[ku];
            const double g = lsum[ku] * lsum[ku] / nl + (tot - lsum[ku]) * (tot - lsum[ku]) / nr - tot * tot / cnt;
            if (g > best_gain[ku]) {
              best_gain[ku] = g;
              best_feat[ku] = static_cast<int>(f);
              double thr = lastv[ku] + (v - lastv[ku]) / 2;
              if (thr >= v) thr = lastv[ku];
              best_thr[ku] = thr;
            }
          }
          lsum[ku] += r(s);
          ++lcnt[ku];
          lastv[ku] = v;
        }
      }

      std::vector<int> next;
      for (std::size_t k = 0; k < K; ++k) {
        if (best_feat[k] < 0) continue;
        const int node = frontier[k];
        const int left = static_cast<int>(tree.size());
        tree.push_back({});
        tree.push_back({});
        sums.resize(tree.size(), 0.0);
        counts.resize(tree.size(), 0);
        auto& nd = tree[static_cast<std::size_t>(node)];
        nd.feature = best_feat[k];
        nd.threshold = best_thr[k];
        nd.left = left;
        nd.right = left + 1;
        importance_(best_feat[k]) += best_gain[k];
        next.push_back(left);
        next.push_back(left + 1);
      }
      if (next.empty()) break;
      for (Eigen::Index s = 0; s < n; ++s) {
        auto& nd_id = node_of[static_cast<std::size_t>(s)];
        const auto& nd = tree[static_cast<std::size_t>(nd_id)];
        if (nd.feature < 0 || slot.size() <= static_cast<std::size_t>(nd_id) || slot[static_cast<std::size_t>(nd_id)] < 0) continue;
        nd_id = x(s, nd.feature) <= nd.threshold ? nd.left : nd.right;
        sums[static_cast<std::size_t>(nd_id)] += r(s);
        ++counts[static_cast<std::size_t>(nd_id)];
      }
      frontier = std::move(next);
    }

    for (std::size_t i = 0; i < tree.size(); ++i)
      if (tree[i].feature < 0 && counts[i] > 0) tree[i].value = sums[i] / counts[i];
    for (Eigen::Index s = 0; s < n; ++s) pred(s) += learning_rate_ * tree[static_cast<std::size_t>(node_of[static_cast<std::size_t>(s)])].value;
    trees_.push_back(std::move(tree));
  }
}

Eigen::VectorXd BoostedTrees::predict(const Eigen::MatrixXd& x) const {
  Eigen::VectorXd out = Eigen::VectorXd::Constant(x.rows(), base_);
  for (const auto& tree : trees_)
    for (Eigen::Index s = 0; s < x.rows(); ++s) {
      int i = 0;
      while (tree[static_cast<std::size_t>(i)].feature >= 0) {
        const auto& nd = tree[static_cast<std::size_t>(i)];
        i = x(s, nd.feature) <= nd.threshold ? nd.left : nd.right;
      }
      out(s) += learning_rate_ * tree[static_cast<std::size_t>(i)].value;
    }
  return out;
}

DciResult dci_disentanglement(const RepresentationMatrix& reps, const FactorDataset& ds, const DciConfig& cfg) {
  check_aligned(reps, ds);
  if (!(cfg.train_fraction > 0 && cfg.train_fraction < 1)) throw std::invalid_argument("train_fraction must be in (0, 1)");
  const auto M = static_cast<Eigen::Index>(ds.size());
  const Eigen::Index R = reps.values.cols();
  const int F = static_cast<int>(ds.spec.factors.size());

  std::vector<int> perm(static_cast<std::size_t>(M));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(cfg.seed);
  for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i)))]);
  const auto n_train = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(std::lround(cfg.train_fraction * static_cast<double>(M))), 1, M - 1);
  Eigen::MatrixXd xtr(n_train, R), xte(M - n_train, R);
  for (Eigen::Index i = 0; i < M; ++i) (i < n_train ? xtr.row(i) : xte.row(i - n_train)) = reps.values.row(perm[static_cast<std::size_t>(i)]);

  DciResult out;
  out.importance = Eigen::MatrixXd::Zero(R, F);
  double r2_sum = 0;
  int evaluated = 0;
  for (int j = 0; j < F; ++j) {
    Eigen::VectorXd ytr(n_train), yte(M - n_train);
    for (Eigen::Index i = 0; i < M; ++i)
      (i < n_train ? ytr(i) : yte(i - n_train)) = ds.factor(static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]), static_cast<std::size_t>(j));
    const auto& name = ds.spec.factors[static_cast<std::size_t>(j)].name;
    if (ytr.maxCoeff() == ytr.minCoeff()) {
      out.skipped_factors.push_back(j);
      out.warnings.push_back("factor '" + name + "' is constant; skipped");
      continue;
    }
    BoostedTrees gbt;
    gbt.fit(xtr, ytr, {cfg.trees, cfg.depth, cfg.learning_rate});
    const double total = gbt.gain_importance().sum();
    if (total > 0) {
      out.importance.col(j) = gbt.gain_importance() / total;
    } else {
      out.warnings.push_back("no code is informative about factor '" + name + "'");
    }
    const Eigen::VectorXd resid = yte - gbt.predict(xte);
    const double var = (yte.array() - yte.mean()).square().sum();
    r2_sum += var > 0 ? 1.0 - resid.squaredNorm() / var : 0.0;
    ++evaluated;
  }
  Eigen::MatrixXd used(R, F - static_cast<int>(out.skipped_factors.size()));
  for (int j = 0, c = 0; j < F; ++j)
    if (std::find(out.skipped_factors.begin(), out.skipped_factors.end(), j) == out.skipped_factors.end()) used.col(c++) = out.importance.col(j);
  out.disentanglement = dci_from_importance(used);
  out.completeness = completeness_from_importance(used);
  out.informativeness = evaluated > 0 ? r2_sum / evaluated : 0.0;
  return out;
}

PcaResult pca_postprocess(const RepresentationMatrix& reps, int out_dims) {
  const Eigen::MatrixXd& X = reps.values;
  const Eigen::Index R = X.cols(), M = X.rows();
  if (out_dims < 1 || out_dims > R) throw std::invalid_argument("pca_postprocess: out_dims must be in [1, R]");
  if (M < 1) throw std::invalid_argument("pca_postprocess: empty input");
  PcaResult out;
  out.mean = X.colwise().mean().transpose();
  const Eigen::MatrixXd Xc = X.rowwise() - out.mean.transpose();
  const Eigen::MatrixXd C = M > 1 ? Eigen::MatrixXd(Xc.transpose() * Xc / static_cast<double>(M - 1)) : Eigen::MatrixXd::Zero(R, R);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(C);
  const double top = std::max(eig.eigenvalues().maxCoeff(), 0.0);
  const double tol = 1e-12 * std::max(top, 1e-300) * static_cast<double>(R);

  out.components = Eigen::MatrixXd::Zero(R, out_dims);
  out.variances = Eigen::VectorXd::Zero(out_dims);
  for (int k = 0; k < out_dims; ++k) {
    const Eigen::Index src = R - 1 - k;
    const double lambda = eig.eigenvalues()(src);
    if (lambda <= tol) {
      out.rank_deficient = true;
      continue;
    }
    Eigen::VectorXd v = eig.eigenvectors().col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    out.components.col(k) = v;
    out.variances(k) = lambda;
  }
  out.reps.values = Xc * out.components;
  out.reps.source_mode = RepresentationSource::pca;
  return out;
}

RepresentationMatrix pca_per_block(const RepresentationMatrix& reps, int block) {
  const Eigen::Index R = reps.values.cols();
  if (block < 1 || R % block != 0) throw std::invalid_argument("pca_per_block: code count not divisible by block size");
  RepresentationMatrix out;
  out.source_mode = RepresentationSource::pca;
  out.values.resize(reps.values.rows(), R / block);
  for (Eigen::Index b = 0; b < R / block; ++b) {
    RepresentationMatrix part{reps.values.middleCols(b * block, block), reps.source_mode};
    out.values.col(b) = pca_postprocess(part, 1).reps.values.col(0);
  }
  return out;
}

double mean_squared_error(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw std::invalid_argument("mean_squared_error: size mismatch");
  if (a.empty()) return 0.0;
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

MetricStat MetricStat::of(std::vector<double> v) {
  MetricStat s;
  s.values = std::move(v);
  if (s.values.empty()) return s;
  const double n = static_cast<double>(s.values.size());
  s.mean = std::accumulate(s.values.begin(), s.values.end(), 0.0) / n;
  if (s.values.size() > 1) {
    double ss = 0;
    for (double x : s.values) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / (n - 1));
  }
  return s;
}

nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["source_mode"] = r.source_mode;
  j["seeds_used"] = r.seeds_used;
  j["factor_names"] = r.factor_names;
  if (r.factorvae_score) j["factorvae_score"] = *r.factorvae_score;
  if (r.dci_disentanglement) j["dci_disentanglement"] = *r.dci_disentanglement;
  if (r.recon_mse) j["recon_mse"] = *r.recon_mse;
  auto rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < r.importance.rows(); ++i) {
    auto row = nlohmann::json::array();
    for (Eigen::Index k = 0; k < r.importance.cols(); ++k) row.push_back(r.importance(i, k));
    rows.push_back(row);
  }
  j["importance"] = rows;
  j["warnings"] = r.warnings;
  return j;
}

std::string importance_csv(const MetricReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "code";
  for (Eigen::Index k = 0; k < r.importance.cols(); ++k)
    os << ',' << (static_cast<std::size_t>(k) < r.factor_names.size() ? r.factor_names[static_cast<std::size_t>(k)] : "f" + std::to_string(k));
  os << '\n';
  for (Eigen::Index i = 0; i < r.importance.rows(); ++i) {
    os << i;
    for (Eigen::Index k = 0; k < r.importance.cols(); ++k) os << ',' << r.importance(i, k);
    os << '\n';
  }
  return os.str();
}

}  // namespace encdiff
