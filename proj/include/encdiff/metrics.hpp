#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "encdiff/dataset.hpp"

namespace encdiff {

enum class RepresentationSource { scalar, vector, pca };
NLOHMANN_JSON_SERIALIZE_ENUM(RepresentationSource,
                             {{RepresentationSource::scalar, "scalar"}, {RepresentationSource::vector, "vector"}, {RepresentationSource::pca, "pca"}})

struct RepresentationMatrix {
  Eigen::MatrixXd values;  // M x R
  RepresentationSource source_mode = RepresentationSource::scalar;
};

class DegenerateRepresentation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FactorVaeConfig {
  int num_votes = 800;
  int batch = 64;
  double variance_threshold = 0.05;  // relative to the mean per-code std
  std::uint64_t seed = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FactorVaeConfig, num_votes, batch, variance_threshold, seed)

struct FactorVaeResult {
  double score = 0;
  std::vector<int> active_codes;
  Eigen::MatrixXi votes;  // R x F
};

FactorVaeResult factorvae_details(const RepresentationMatrix& reps, const FactorDataset& ds, const FactorVaeConfig& cfg);
double factorvae_score(const RepresentationMatrix& reps, const FactorDataset& ds, const FactorVaeConfig& cfg);

struct DciConfig {
  int trees = 10;
  int depth = 8;
  double learning_rate = 0.1;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DciConfig, trees, depth, learning_rate, train_fraction, seed)

struct DciResult {
  double disentanglement = 0;
  double completeness = 0;
  double informativeness = 0;  // mean held-out R^2 over evaluated factors
  Eigen::MatrixXd importance;  // R x F, columns sum to 1 (zero for skipped factors)
  std::vector<int> skipped_factors;
  std::vector<std::string> warnings;
};

/// Importance-weighted mean of 1 - H_F(row), entropy in base F.
double dci_from_importance(const Eigen::MatrixXd& importance);
/// Same with the roles of codes and factors exchanged.
double completeness_from_importance(const Eigen::MatrixXd& importance);

DciResult dci_disentanglement(const RepresentationMatrix& reps, const FactorDataset& ds, const DciConfig& cfg);

/// Gradient-boosted least-squares regression trees with split-gain importances.
class BoostedTrees {
 public:
  struct Options {
    int trees = 10;
    int depth = 8;
    double learning_rate = 0.1;
  };

  void fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Options& opt);
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;
  /// Summed squared-error reduction per feature, unnormalized.
  const Eigen::VectorXd& gain_importance() const { return importance_; }

 private:
  struct Node {
    int feature = -1;  // -1 for leaves
    double threshold = 0;
    int left = -1, right = -1;
    double value = 0;
  };
  using Tree = std::vector<Node>;

  double base_ = 0;
  double learning_rate_ = 0.1;
  std::vector<Tree> trees_;
  Eigen::VectorXd importance_;
};

struct PcaResult {
  RepresentationMatrix reps;
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // R x out_dims, orthonormal columns
  Eigen::VectorXd variances;   // per output component, descending
  bool rank_deficient = false;
};

/// Center and project onto the top principal components; each component's
/// largest-magnitude loading is made positive.
PcaResult pca_postprocess(const RepresentationMatrix& reps, int out_dims);

/// Column blocks of `block` codes each reduced to their first principal component.
RepresentationMatrix pca_per_block(const RepresentationMatrix& reps, int block);

double mean_squared_error(std::span<const float> a, std::span<const float> b);

struct MetricStat {
  double mean = 0;
  double std = 0;
  std::vector<double> values;
  static MetricStat of(std::vector<double> v);
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(MetricStat, mean, std, values)

struct MetricReport {
  std::optional<MetricStat> factorvae_score;
  std::optional<MetricStat> dci_disentanglement;
  std::optional<MetricStat> recon_mse;
  Eigen::MatrixXd importance;  // from the first seed
  std::vector<std::string> factor_names;
  RepresentationSource source_mode = RepresentationSource::scalar;
  std::vector<std::uint64_t> seeds_used;
  std::vector<std::string> warnings;
};

nlohmann::json to_json(const MetricReport& r);
std::string importance_csv(const MetricReport& r);

}  // namespace encdiff
