#include "dsched/scenarios.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iostream>

#include "dsched/convex.hpp"

namespace dsched::scen {

MomentSpec forecast_moments(const Vec& mu, const Mat& corr, double sigma0_frac,
                            double growth, int t_offset) {
  if (t_offset < 1) throw InvalidInput("forecast_moments: t_offset must be >= 1");
  MomentSpec spec;
  spec.mu = mu;
  spec.sigma = (sigma0_frac * mu.cwiseAbs()) * (1.0 + growth * (t_offset - 1));
  spec.corr = corr;
  return spec;
}

bool nearest_correlation(Mat* corr) {
  Eigen::SelfAdjointEigenSolver<Mat> es(*corr);
  if (es.eigenvalues().minCoeff() >= -1e-12) return false;
  Vec ev = es.eigenvalues().cwiseMax(1e-12);
  Mat fixed = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  for (int i = 0; i < fixed.rows(); ++i) {
    double d = std::sqrt(fixed(i, i));
    fixed.row(i) /= d;
    fixed.col(i) /= d;
  }
  *corr = 0.5 * (fixed + fixed.transpose());
  return true;
}

Vec moment_match(const Mat& candidates, const MomentSpec& target, int max_cov_pairs) {
  const int n = static_cast<int>(candidates.rows());
  const int dim = static_cast<int>(candidates.cols());
  if (n < 1) throw InvalidInput("moment_match: need at least one candidate");
  if (target.mu.size() != dim) throw InvalidInput("moment_match: dimension mismatch");
  if (n == 1) return Vec::Ones(1);

  // z-score the candidates; deterministic dimensions drop out
  std::vector<int> active;
  for (int j = 0; j < dim; ++j)
    if (target.sigma[j] > 0) active.push_back(j);
  Mat z(n, active.size());
  for (std::size_t a = 0; a < active.size(); ++a)
    z.col(a) = (candidates.col(active[a]).array() - target.mu[active[a]]) /
               target.sigma[active[a]];

  // covariance pairs: strongest correlations first, deterministic order
  std::vector<std::pair<int, int>> pairs;
  if (target.corr.size() > 0) {
    std::vector<std::tuple<double, int, int>> ranked;
    for (std::size_t a = 0; a < active.size(); ++a)
      for (std::size_t b = a + 1; b < active.size(); ++b) {
        double c = target.corr(active[a], active[b]);
        if (std::abs(c) >= 1e-9) ranked.emplace_back(-std::abs(c), a, b);
      }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& l, const auto& r) {
                       return std::get<0>(l) != std::get<0>(r)
                                  ? std::get<0>(l) < std::get<0>(r)
                                  : std::make_pair(std::get<1>(l), std::get<2>(l)) <
                                        std::make_pair(std::get<1>(r), std::get<2>(r));
                     });
    for (const auto& t : ranked) {
      if (static_cast<int>(pairs.size()) >= max_cov_pairs) break;
      pairs.emplace_back(std::get<1>(t), std::get<2>(t));
    }
  }

  const int n_mom = 2 * static_cast<int>(active.size()) + static_cast<int>(pairs.size());
  const int n_rows = 1 + n_mom;
  const int n_vars = n + 2 * n_mom;  // probabilities + deviation splits

  std::vector<Eigen::Triplet<double>> trips;
  Vec rhs(n_rows);
  // sum p = 1
  for (int i = 0; i < n; ++i) trips.emplace_back(0, i, 1.0);
  rhs[0] = 1.0;
  int row = 1, dev = n;
  auto add_moment = [&](const Vec& coeff, double tgt) {
    for (int i = 0; i < n; ++i)
      if (coeff[i] != 0.0) trips.emplace_back(row, i, coeff[i]);
    trips.emplace_back(row, dev, -1.0);
    trips.emplace_back(row, dev + 1, 1.0);
    rhs[row] = tgt;
    ++row;
    dev += 2;
  };
  for (std::size_t a = 0; a < active.size(); ++a) add_moment(z.col(a), 0.0);
  for (std::size_t a = 0; a < active.size(); ++a)
    add_moment(z.col(a).cwiseProduct(z.col(a)), 1.0);
  for (auto& [a, b] : pairs)
    add_moment(z.col(a).cwiseProduct(z.col(b)), target.corr(active[a], active[b]));

  SpMat a_eq(n_rows, n_vars);
  a_eq.setFromTriplets(trips.begin(), trips.end());
  Vec c = Vec::Zero(n_vars);
  for (int i = n; i < n_vars; ++i) c[i] = 1.0;
  Vec lo = Vec::Zero(n_vars);
  Vec hi = Vec::Constant(n_vars, kInf);

  auto res = opt::solve_lp(c, a_eq, rhs, lo, hi);
  if (res.status != opt::SolveStatus::kOptimal)
    throw NumericalError(std::string("moment_match: LP solver failed (") +
                         opt::to_string(res.status) + ")");
  Vec p = res.x.head(n).cwiseMax(0.0);
  p /= p.sum();
  return p;
}

WeightedSet kmeans_reduce(const Mat& points, const Vec& probs, int k,
                          std::uint64_t seed) {
  const int n = static_cast<int>(points.rows());
  const int dim = static_cast<int>(points.cols());
  if (k < 1 || k > n) throw InvalidInput("kmeans_reduce: need 1 <= k <= point count");

  // z-score scales from the weighted set itself
  Vec w = probs;
  double wsum = w.sum();
  if (wsum <= 0) w = Vec::Constant(n, 1.0 / n);
  else w /= wsum;
  Vec mean = points.transpose() * w;
  Vec scale(dim);
  for (int j = 0; j < dim; ++j) {
    double var = 0;
    for (int i = 0; i < n; ++i) {
      double d = points(i, j) - mean[j];
      var += w[i] * d * d;
    }
    scale[j] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  Mat z(n, dim);
  for (int j = 0; j < dim; ++j) z.col(j) = (points.col(j).array() - mean[j]) / scale[j];

  auto dist2 = [&](int i, const Vec& center) { return (z.row(i).transpose() - center).squaredNorm(); };

  // k-means++ style deterministic seeding
  NormalSampler rng(seed ? seed : 1);
  std::vector<Vec> centers;
  centers.push_back(z.row(static_cast<int>(rng.index(n))).transpose());
  while (static_cast<int>(centers.size()) < k) {
    Vec d2(n);
    for (int i = 0; i < n; ++i) {
      double best = kInf;
      for (const auto& c : centers) best = std::min(best, dist2(i, c));
      d2[i] = best * std::max(w[i], 1e-12);
    }
    double total = d2.sum();
    double pick = rng.uniform() * total;
    int chosen = n - 1;
    double acc = 0;
    for (int i = 0; i < n; ++i) {
      acc += d2[i];
      if (acc >= pick) { chosen = i; break; }
    }
    centers.push_back(z.row(chosen).transpose());
  }

  std::vector<int> assign(n, 0);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      double best = kInf;
      int arg = 0;
      for (int c = 0; c < k; ++c) {
        double d = dist2(i, centers[c]);
        if (d < best - 1e-15) { best = d; arg = c; }
      }
      if (arg != assign[i]) { assign[i] = arg; changed = true; }
    }
    // recompute probability-weighted centers
    std::vector<Vec> next(k, Vec::Zero(dim));
    Vec cw = Vec::Zero(k);
    for (int i = 0; i < n; ++i) {
      next[assign[i]] += w[i] * z.row(i).transpose();
      cw[assign[i]] += w[i];
    }
    for (int c = 0; c < k; ++c) {
      if (cw[c] > 1e-15) {
        centers[c] = next[c] / cw[c];
        continue;
      }
      // reseed an empty cluster at the farthest point
      double far = -1;
      int arg = 0;
      for (int i = 0; i < n; ++i) {
        double d = dist2(i, centers[assign[i]]);
        if (d > far) { far = d; arg = i; }
      }
      centers[c] = z.row(arg).transpose();
      changed = true;
    }
    if (!changed) break;
  }

  WeightedSet out;
  out.points = Mat::Zero(k, dim);
  out.probs = Vec::Zero(k);
  std::vector<Vec> acc(k, Vec::Zero(dim));
  Vec cw = Vec::Zero(k);
  for (int i = 0; i < n; ++i) {
    acc[assign[i]] += w[i] * Vec(points.row(i).transpose());
    cw[assign[i]] += w[i];
  }
  for (int c = 0; c < k; ++c) {
    if (cw[c] > 1e-15) {
      out.points.row(c) = (acc[c] / cw[c]).transpose();
    } else {
      // centroid of an empty cluster: de-standardize its center
      for (int j = 0; j < dim; ++j)
        out.points(c, j) = centers[c][j] * scale[j] + mean[j];
    }
    out.probs[c] = cw[c];
  }
  double total = out.probs.sum();
  if (total > 0) out.probs /= total;
  return out;
}

void ScenarioTree::validate() const {
  double sum = 0;
  std::size_t len = paths.empty() ? 0 : paths.front().nodes.size();
  for (const auto& p : paths) {
    if (p.nodes.size() != len)
      throw NumericalError("scenario tree: path lengths differ");
    sum += p.probability;
  }
  if (std::abs(sum - 1.0) > 1e-12)
    throw NumericalError("scenario tree: path probabilities sum to " +
                         std::to_string(sum));
}

ConditionalSampler::ConditionalSampler(const UncertaintyDescriptor& desc,
                                       std::function<Vec(int)> stage_means)
    : desc_(desc), means_(std::move(stage_means)) {
  Mat corr = desc_.cross_corr;
  if (nearest_correlation(&corr)) {
    std::cerr << "[scenarios] correlation matrix projected to nearest PSD\n";
    desc_.cross_corr = corr;
  }
  Eigen::LLT<Mat> llt(desc_.cross_corr +
                      1e-12 * Mat::Identity(desc_.dim(), desc_.dim()));
  if (llt.info() != Eigen::Success)
    throw NumericalError("ConditionalSampler: correlation factorization failed");
  chol_ = llt.matrixL();
}

void ConditionalSampler::conditional_moments(int stage, const Vec& parent_values,
                                             Vec* mean, Vec* stdev) const {
  const int d = desc_.dim();
  Vec mu_t = means_(stage);
  Vec mu_prev = means_(stage - 1);
  Vec sig_t =
      (desc_.sigma0_frac * mu_t.cwiseAbs()) * (1.0 + desc_.growth * (stage - 1));
  Vec sig_prev = stage >= 2 ? Vec((desc_.sigma0_frac * mu_prev.cwiseAbs()) *
                                  (1.0 + desc_.growth * (stage - 2)))
                            : sig_t;  // scale parent deviations like stage one
  mean->resize(d);
  stdev->resize(d);
  for (int j = 0; j < d; ++j) {
    double rho = desc_.autocorr[j];
    double dev = 0.0;
    if (sig_prev[j] > 0) dev = (parent_values[j] - mu_prev[j]) / sig_prev[j];
    (*mean)[j] = mu_t[j] + rho * sig_t[j] * dev;
    // the first-period error is the one-step-ahead deviation itself; later
    // stages keep the marginal spread sig_t under the lag-1 chain
    (*stdev)[j] = stage == 1 ? sig_t[j]
                             : sig_t[j] * std::sqrt(std::max(0.0, 1.0 - rho * rho));
  }
}

Vec ConditionalSampler::clamp(Vec v) const {
  for (int j = 0; j < desc_.dim(); ++j)
    v[j] = std::clamp(v[j], desc_.lo[j], desc_.hi[j]);
  return v;
}

Vec ConditionalSampler::sample(int stage, const Vec& parent_values,
                               NormalSampler& rng) const {
  Vec mean, stdev;
  conditional_moments(stage, parent_values, &mean, &stdev);
  Vec zraw(desc_.dim());
  for (int j = 0; j < desc_.dim(); ++j) zraw[j] = rng.normal();
  Vec corr_z = chol_ * zraw;
  return clamp(mean + stdev.cwiseProduct(corr_z));
}

ScenarioTree build_tree(const Vec& root_values, int horizon,
                        const UncertaintyDescriptor& desc,
                        std::function<Vec(int)> stage_means, const TreeConfig& cfg,
                        std::uint64_t seed) {
  if (horizon < 1) throw InvalidInput("build_tree: horizon must be >= 1");
  ConditionalSampler sampler(desc, stage_means);

  ScenarioTree tree;
  tree.horizon = horizon;
  tree.nodes.push_back({0, root_values, -1, 1.0});

  std::vector<int> frontier{0};
  for (int stage = 1; stage <= horizon; ++stage) {
    const int branches = std::max(1, cfg.branches_at(stage));
    std::vector<int> next;
    for (int node_idx : frontier) {
      const Vec& parent = tree.nodes[node_idx].values;
      Vec mean, stdev;
      sampler.conditional_moments(stage, parent, &mean, &stdev);

      if (branches == 1) {
        // deterministic path through the conditional means
        tree.nodes.push_back({stage, sampler.clamp(mean), node_idx, 1.0});
        next.push_back(static_cast<int>(tree.nodes.size()) - 1);
        continue;
      }

      NormalSampler rng(mix_seed(seed, mix_seed(node_idx, stage)));
      Mat cand(cfg.candidate_pool, desc.dim());
      for (int i = 0; i < cfg.candidate_pool; ++i)
        cand.row(i) = sampler.sample(stage, parent, rng).transpose();
      MomentSpec target{mean, stdev, desc.cross_corr};
      Vec probs = moment_match(cand, target, cfg.max_cov_pairs);

      // reduce over the support only so every child keeps positive mass
      std::vector<int> support;
      for (int i = 0; i < cfg.candidate_pool; ++i)
        if (probs[i] > 1e-12) support.push_back(i);
      Mat sup_pts(support.size(), desc.dim());
      Vec sup_p(support.size());
      for (std::size_t i = 0; i < support.size(); ++i) {
        sup_pts.row(i) = cand.row(support[i]);
        sup_p[i] = probs[support[i]];
      }
      int k = std::min<int>(branches, static_cast<int>(support.size()));
      WeightedSet reduced =
          kmeans_reduce(sup_pts, sup_p, k, mix_seed(seed, mix_seed(node_idx, 7919 + stage)));
      for (int c = 0; c < k; ++c) {
        tree.nodes.push_back({stage, sampler.clamp(reduced.points.row(c).transpose()),
                              node_idx, reduced.probs[c]});
        next.push_back(static_cast<int>(tree.nodes.size()) - 1);
      }
    }
    frontier = std::move(next);
  }

  // enumerate root-to-leaf paths
  for (int leaf : frontier) {
    ScenarioTree::Path path;
    double prob = 1.0;
    int cur = leaf;
    while (cur != 0) {
      path.nodes.push_back(cur);
      prob *= tree.nodes[cur].prob_conditional;
      cur = tree.nodes[cur].parent;
    }
    std::reverse(path.nodes.begin(), path.nodes.end());
    path.probability = prob;
    tree.paths.push_back(std::move(path));
  }
  double total = 0;
  for (const auto& p : tree.paths) total += p.probability;
  for (auto& p : tree.paths) p.probability /= total;
  tree.validate();
  return tree;
}

}  // namespace dsched::scen
