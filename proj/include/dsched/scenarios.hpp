#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dsched/common.hpp"

namespace dsched::scen {

/// Target statistics of the uncertain-parameter vector at one stage.
struct MomentSpec {
  Vec mu;
  Vec sigma;
  Mat corr;  // within-period cross-correlation, unit diagonal
};

/// Forecast-error schedule: the first-period deviation is sigma0_frac of the
/// mean and grows linearly by `growth` of that value per additional period.
MomentSpec forecast_moments(const Vec& mu, const Mat& corr, double sigma0_frac,
                            double growth, int t_offset);

/// LP reweighting of a candidate set so that its mean, variance and selected
/// covariances track the target as closely as possible (weighted L1).
/// Candidates are rows; returns one probability per row (non-negative,
/// summing to one).
Vec moment_match(const Mat& candidates, const MomentSpec& target,
                 int max_cov_pairs = 64);

struct WeightedSet {
  Mat points;  // k x dim
  Vec probs;   // k
};

/// Probability-weighted Lloyd iteration on per-dimension z-scores. Empty
/// clusters are reseeded at the farthest point. Deterministic for a fixed
/// seed.
WeightedSet kmeans_reduce(const Mat& points, const Vec& probs, int k,
                          std::uint64_t seed);

struct ScenarioNode {
  int stage = 0;   // 0 = root
  Vec values;
  int parent = -1;
  double prob_conditional = 1.0;
};

struct ScenarioTree {
  std::vector<ScenarioNode> nodes;  // nodes[0] = root
  struct Path {
    std::vector<int> nodes;  // root first, one node per stage 1..T
    double probability = 1.0;
  };
  std::vector<Path> paths;
  int horizon = 0;

  void validate() const;  // probabilities sum to one, equal path lengths
};

/// Description of the uncertain vector: per-dimension lag-1 autocorrelation,
/// within-period cross-correlation and truncation bounds.
struct UncertaintyDescriptor {
  std::vector<std::string> names;
  Vec autocorr;
  Mat cross_corr;
  Vec lo, hi;
  double sigma0_frac = 0.02;
  double growth = 0.1;

  int dim() const { return static_cast<int>(autocorr.size()); }
};

struct TreeConfig {
  std::vector<int> branching;  // per stage; missing entries repeat the last
  int candidate_pool = 200;
  int max_cov_pairs = 64;

  int branches_at(int stage) const {
    if (branching.empty()) return 1;
    if (stage - 1 < static_cast<int>(branching.size())) return branching[stage - 1];
    return branching.back();
  }
};

/// Stage-indexed conditional sampler used by the tree builder and by
/// statistics tests; draws one child realization given the parent one.
class ConditionalSampler {
 public:
  ConditionalSampler(const UncertaintyDescriptor& desc,
                     std::function<Vec(int)> stage_means);

  /// conditional moments of stage `stage` given the parent realization
  void conditional_moments(int stage, const Vec& parent_values, Vec* mean,
                           Vec* stdev) const;
  Vec sample(int stage, const Vec& parent_values, NormalSampler& rng) const;
  Vec clamp(Vec v) const;
  const UncertaintyDescriptor& descriptor() const { return desc_; }
  Vec stage_mean(int stage) const { return means_(stage); }

 private:
  UncertaintyDescriptor desc_;
  std::function<Vec(int)> means_;
  Mat chol_;  // factor of the (projected) cross-correlation
};

/// Multi-stage tree: per node, sample a candidate pool from the
/// lag-conditioned joint normal, reweight by moment matching, then reduce to
/// the branch count. A branch count of one collapses to the conditional mean.
ScenarioTree build_tree(const Vec& root_values, int horizon,
                        const UncertaintyDescriptor& desc,
                        std::function<Vec(int)> stage_means, const TreeConfig& cfg,
                        std::uint64_t seed);

/// Projects a symmetric matrix to the nearest PSD one (eigenvalue clamp) and
/// restores a unit diagonal. Returns whether a projection was needed.
bool nearest_correlation(Mat* corr);

}  // namespace dsched::scen
