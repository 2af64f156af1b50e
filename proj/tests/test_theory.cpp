#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "falcon/infotheory.hpp"

using namespace falcon;

TEST_CASE("independent fair bits") {
  JointDistribution d = JointDistribution::independent_pair({0.5, 0.5}, {0.5, 0.5});
  JointStats s = joint_stats(d);
  CHECK(s.hx == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.ixy == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(s.hx_given_y == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("perfectly correlated fair bit") {
  JointDistribution d = JointDistribution::correlated_pair(2, 1.0);
  JointStats s = joint_stats(d);
  CHECK(s.hx == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.ixy == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.hx_given_y == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("degenerate point mass: every term zero, identities exact") {
  JointDistribution d = JointDistribution::point_mass(3, 4, 2);
  JointStats s = joint_stats(d);
  CHECK(s.hx == 0.0);
  CHECK(s.hy == 0.0);
  CHECK(s.ixy == 0.0);
  for (Scalar r : decomposition_residuals(d)) CHECK(r == 0.0);
}

TEST_CASE("random 4x4 joint satisfies the two-variable decomposition") {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    JointDistribution d = JointDistribution::random(4, 4, 1, rng);
    auto r = decomposition_residuals(d);
    CHECK(std::abs(r[0]) < 1e-9);
    CHECK(std::abs(r[1]) < 1e-9);
  }
}

TEST_CASE("strong X->Y dependence: the mutual-information term dominates") {
  JointDistribution d = JointDistribution::correlated_pair(4, 0.9);
  JointStats s = joint_stats(d);
  CHECK(s.ixy > s.hx_given_y);       // dependence carries most of the bits
  CHECK(2.0 * s.ixy > s.hy_given_x);
  auto r = decomposition_residuals(d);
  CHECK(std::abs(r[1]) < 1e-9);
}

TEST_CASE("validation rejects broken tables") {
  JointDistribution d;
  d.nx = 2;
  d.ny = 2;
  d.nc = 1;
  d.p = {0.5, 0.5, 0.25, -0.25};
  CHECK_THROWS_AS(d.validate(), Error);
  d.p = {0.5, 0.5, 0.25, 0.25};
  CHECK_THROWS_AS(d.validate(), Error);  // mass 1.5
  d.p = {0.25, 0.25, 0.25, 0.25};
  d.validate();
}

TEST_CASE("residual sweep over random joints stays under 1e-9 bits") {
  DecompositionReport report = check_decompositions(1000, 2024);
  CHECK(report.joints_checked >= 1000);
  for (int i = 0; i < 4; ++i) CHECK(report.max_residual[i] < 1e-9);
  CHECK(report.max_sanity_violation <= 1e-12);
  CHECK(format_report(report).find("max residual") != std::string::npos);
}
