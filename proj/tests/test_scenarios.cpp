#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dsched/scenarios.hpp"

#include <Eigen/Dense>

#include <cmath>

using namespace dsched;
using namespace dsched::scen;

namespace {

UncertaintyDescriptor small_descriptor(int dim, double rho, double cross) {
  UncertaintyDescriptor d;
  d.autocorr = Vec::Constant(dim, rho);
  d.cross_corr = Mat::Identity(dim, dim);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j)
      if (i != j) d.cross_corr(i, j) = cross;
  d.lo = Vec::Constant(dim, -kInf);
  d.hi = Vec::Constant(dim, kInf);
  for (int i = 0; i < dim; ++i) d.names.push_back("p" + std::to_string(i));
  return d;
}

}  // namespace

TEST_CASE("forecast error grows linearly from two percent") {
  Vec mu = Vec::Constant(1, 100.0);
  auto m1 = forecast_moments(mu, Mat::Identity(1, 1), 0.02, 0.1, 1);
  CHECK(m1.sigma[0] == doctest::Approx(2.0).epsilon(1e-14));
  auto m5 = forecast_moments(mu, Mat::Identity(1, 1), 0.02, 0.1, 5);
  CHECK(m5.sigma[0] == doctest::Approx(2.8).epsilon(1e-14));
  auto z = forecast_moments(Vec::Zero(1), Mat::Identity(1, 1), 0.02, 0.1, 3);
  CHECK(z.sigma[0] == 0.0);
}

TEST_CASE("moment match on the symmetric three-candidate set") {
  Mat cand(3, 1);
  cand << -1.0, 0.0, 1.0;
  MomentSpec target;
  target.mu = Vec::Zero(1);
  target.sigma = Vec::Ones(1);
  target.corr = Mat::Identity(1, 1);
  Vec p = moment_match(cand, target);
  CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(p[2] == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("single candidate takes all probability") {
  Mat cand(1, 2);
  cand << 3.0, 4.0;
  MomentSpec target;
  target.mu = cand.row(0).transpose();
  target.sigma = Vec::Zero(2);
  target.corr = Mat::Identity(2, 2);
  Vec p = moment_match(cand, target);
  CHECK(p[0] == doctest::Approx(1.0));
}

TEST_CASE("symmetric candidates give near-zero mean error") {
  NormalSampler rng(42);
  int n = 100;
  Mat cand(2 * n, 1);
  for (int i = 0; i < n; ++i) {
    double v = rng.normal();
    cand(i, 0) = v;
    cand(n + i, 0) = -v;
  }
  MomentSpec target;
  target.mu = Vec::Zero(1);
  target.sigma = Vec::Ones(1);
  target.corr = Mat::Identity(1, 1);
  Vec p = moment_match(cand, target);
  double mean = (cand.transpose() * p)(0, 0);
  CHECK(std::abs(mean) <= 1e-10);
}

TEST_CASE("kmeans with k equal to the point count is the identity") {
  Mat pts(3, 2);
  pts << 0, 0, 1, 1, 2, 0;
  Vec probs(3);
  probs << 0.2, 0.5, 0.3;
  auto red = kmeans_reduce(pts, probs, 3, 99);
  CHECK(red.probs.sum() == doctest::Approx(1.0).epsilon(1e-12));
  // every original point appears as a centroid with its own probability
  for (int i = 0; i < 3; ++i) {
    bool found = false;
    for (int c = 0; c < 3; ++c)
      if ((red.points.row(c) - pts.row(i)).norm() < 1e-12 &&
          std::abs(red.probs[c] - probs[i]) < 1e-12)
        found = true;
    CHECK(found);
  }
}

TEST_CASE("kmeans of identical points is the single point") {
  Mat pts(4, 2);
  for (int i = 0; i < 4; ++i) pts.row(i) << 1.5, -0.5;
  Vec probs = Vec::Constant(4, 0.25);
  auto red = kmeans_reduce(pts, probs, 1, 7);
  CHECK(red.points(0, 0) == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(red.points(0, 1) == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(red.probs[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("kmeans separates two blobs onto their weighted means") {
  NormalSampler rng(4242);
  int n = 200;
  Mat pts(2 * n, 2);
  Vec probs(2 * n);
  for (int i = 0; i < n; ++i) {
    pts.row(i) << 10.0 + 0.01 * rng.normal(), 0.01 * rng.normal();
    pts.row(n + i) << -10.0 + 0.01 * rng.normal(), 0.01 * rng.normal();
    probs[i] = 0.7 / n;
    probs[n + i] = 0.3 / n;
  }
  auto red = kmeans_reduce(pts, probs, 2, 11);
  // compute expected blob means
  Vec m_right = Vec::Zero(2), m_left = Vec::Zero(2);
  for (int i = 0; i < n; ++i) {
    m_right += probs[i] * Vec(pts.row(i).transpose());
    m_left += probs[n + i] * Vec(pts.row(n + i).transpose());
  }
  m_right /= 0.7;
  m_left /= 0.3;
  int right = red.points(0, 0) > 0 ? 0 : 1;
  CHECK((red.points.row(right).transpose() - m_right).norm() <= 1e-9);
  CHECK((red.points.row(1 - right).transpose() - m_left).norm() <= 1e-9);
  CHECK(red.probs[right] == doctest::Approx(0.7).epsilon(1e-9));
}

TEST_CASE("branch count one gives the deterministic conditional-mean path") {
  auto desc = small_descriptor(2, 0.7, 0.0);
  auto means = [](int stage) {
    Vec m(2);
    m << 10.0 + stage, 5.0;
    return m;
  };
  TreeConfig cfg;
  cfg.branching = {1};
  Vec root(2);
  root << 10.0, 5.0;
  auto tree = build_tree(root, 4, desc, means, cfg, 1);
  CHECK(tree.paths.size() == 1);
  CHECK(tree.paths[0].probability == doctest::Approx(1.0));
  // root deviation is zero, so stage means are followed exactly
  for (int s = 1; s <= 4; ++s) {
    const auto& node = tree.nodes[tree.paths[0].nodes[s - 1]];
    CHECK(node.values[0] == doctest::Approx(10.0 + s).epsilon(1e-12));
    CHECK(node.values[1] == doctest::Approx(5.0).epsilon(1e-12));
  }
}

TEST_CASE("two-stage binary tree bookkeeping") {
  auto desc = small_descriptor(2, 0.5, 0.3);
  auto means = [](int) {
    Vec m(2);
    m << 100.0, 50.0;
    return m;
  };
  TreeConfig cfg;
  cfg.branching = {2, 2};
  cfg.candidate_pool = 60;
  Vec root(2);
  root << 100.0, 50.0;
  auto tree = build_tree(root, 2, desc, means, cfg, 3);
  CHECK(tree.paths.size() == 4);
  double sum = 0;
  for (auto& p : tree.paths) sum += p.probability;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("identical seeds give identical trees") {
  auto desc = small_descriptor(3, 0.7, 0.5);
  auto means = [](int stage) { return Vec::Constant(3, 100.0 + stage); };
  TreeConfig cfg;
  cfg.branching = {3, 2};
  cfg.candidate_pool = 80;
  Vec root = Vec::Constant(3, 100.0);
  auto t1 = build_tree(root, 3, desc, means, cfg, 12345);
  auto t2 = build_tree(root, 3, desc, means, cfg, 12345);
  REQUIRE(t1.nodes.size() == t2.nodes.size());
  for (std::size_t i = 0; i < t1.nodes.size(); ++i) {
    CHECK((t1.nodes[i].values - t2.nodes[i].values).cwiseAbs().maxCoeff() == 0.0);
    CHECK(t1.nodes[i].prob_conditional == t2.nodes[i].prob_conditional);
  }
}

TEST_CASE("first-stage matched set tracks the target moments") {
  auto desc = small_descriptor(4, 0.7, 0.8);
  auto means = [](int) { return Vec::Constant(4, 100.0); };
  ConditionalSampler sampler(desc, means);
  Vec root = Vec::Constant(4, 100.0);
  Vec mean, stdev;
  sampler.conditional_moments(1, root, &mean, &stdev);
  NormalSampler rng(777);
  Mat cand(200, 4);
  for (int i = 0; i < 200; ++i) cand.row(i) = sampler.sample(1, root, rng).transpose();
  MomentSpec target{mean, stdev, desc.cross_corr};
  Vec p = moment_match(cand, target);
  Vec got_mean = cand.transpose() * p;
  for (int j = 0; j < 4; ++j) {
    CHECK(std::abs(got_mean[j] - mean[j]) / mean[j] <= 0.01);
    double var = 0;
    for (int i = 0; i < 200; ++i)
      var += p[i] * std::pow(cand(i, j) - got_mean[j], 2);
    CHECK(std::abs(std::sqrt(var) - stdev[j]) / stdev[j] <= 0.05);
  }
}

TEST_CASE("sampled paths carry the configured lag-1 autocorrelation") {
  auto desc = small_descriptor(1, 0.7, 0.0);
  auto means = [](int) { return Vec::Constant(1, 100.0); };
  ConditionalSampler sampler(desc, means);
  Vec root = Vec::Constant(1, 100.0);
  NormalSampler rng(31337);
  const int n = 10000;
  double sxy = 0, sx = 0, sy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < n; ++i) {
    Vec a = sampler.sample(1, root, rng);
    Vec b = sampler.sample(2, a, rng);
    // standardize against stage moments
    Vec m1, s1, m2, s2;
    sampler.conditional_moments(1, root, &m1, &s1);
    double za = (a[0] - 100.0) / (0.02 * 100.0);
    double zb = (b[0] - 100.0) / (0.02 * 100.0 * 1.1);
    sx += za; sy += zb; sxx += za * za; syy += zb * zb; sxy += za * zb;
  }
  double corr = (sxy - sx * sy / n) /
                std::sqrt((sxx - sx * sx / n) * (syy - sy * sy / n));
  CHECK(corr >= 0.6);
  CHECK(corr <= 0.8);
}

TEST_CASE("non-PSD correlation is projected with the diagonal restored") {
  Mat corr(3, 3);
  corr << 1.0, 0.95, -0.95, 0.95, 1.0, 0.95, -0.95, 0.95, 1.0;  // not PSD
  Mat fixed = corr;
  bool projected = nearest_correlation(&fixed);
  CHECK(projected);
  for (int i = 0; i < 3; ++i) CHECK(fixed(i, i) == doctest::Approx(1.0).epsilon(1e-9));
  Eigen::SelfAdjointEigenSolver<Mat> es(fixed);
  CHECK(es.eigenvalues().minCoeff() >= -1e-10);
}
