#pragma once

#include <array>
#include <vector>

#include "falcon/common.hpp"
#include "falcon/rng.hpp"

namespace falcon {

// Finite joint over (X, Y) or (X, Y, C); nc = 1 collapses to a pair.
// Probabilities are row-major p[x][y][c].
struct JointDistribution {
  int64_t nx = 1;
  int64_t ny = 1;
  int64_t nc = 1;
  std::vector<Scalar> p;

  void validate() const;
  Scalar at(int64_t x, int64_t y, int64_t c) const {
    return p[static_cast<size_t>((x * ny + y) * nc + c)];
  }

  std::vector<Scalar> marginal_x() const;
  std::vector<Scalar> marginal_y() const;
  std::vector<Scalar> marginal_c() const;
  // pairwise joints, flattened row-major
  std::vector<Scalar> joint_xy() const;
  std::vector<Scalar> joint_xc() const;
  std::vector<Scalar> joint_yc() const;

  static JointDistribution random(int64_t nx, int64_t ny, int64_t nc, Rng& rng);
  static JointDistribution independent_pair(const std::vector<Scalar>& px,
                                            const std::vector<Scalar>& py);
  static JointDistribution point_mass(int64_t nx, int64_t ny, int64_t nc);
  // Y copies X with probability `coupling`, else uniform; raises the mutual
  // information term.
  static JointDistribution correlated_pair(int64_t n, Scalar coupling);
};

// Shannon entropy in bits over a flat distribution; 0 log 0 = 0.
Scalar entropy(const std::vector<Scalar>& dist);
// H(A | B) from a flattened joint p(a,b) with a-major layout.
Scalar conditional_entropy(const std::vector<Scalar>& joint_ab, int64_t na,
                           int64_t nb);
// I(A; B) from the same layout.
Scalar mutual_information(const std::vector<Scalar>& joint_ab, int64_t na,
                          int64_t nb);

// Entropy bookkeeping for one joint, everything in bits.
struct JointStats {
  Scalar hx, hy, hxy;
  Scalar hx_given_y, hy_given_x;
  Scalar ixy;
  Scalar hx_given_c, ixc;  // zero when the joint has no C
};
JointStats joint_stats(const JointDistribution& d);

// The four decomposition identities evaluated as residuals:
//   (1) H(X) - H(X|Y) - I(X;Y)
//   (2) H(X)+H(Y) - (H(Y|X) + 2 I(X;Y) + H(X|Y))
//   (3) H(X) - (H(X|C) + I(X;C))
//   (4) H(X)+H(Y) - (H(X|C) + I(X;C) + H(Y|X) + I(X;Y))
std::array<Scalar, 4> decomposition_residuals(const JointDistribution& d);

struct DecompositionReport {
  int64_t joints_checked = 0;
  std::array<Scalar, 4> max_residual{0.0, 0.0, 0.0, 0.0};
  // worst violation of H >= 0, I >= 0, H(X|Y) <= H(X); zero when clean
  Scalar max_sanity_violation = 0.0;
};

// Random + structured joints; every evaluated joint feeds the residual and
// sanity maxima.
DecompositionReport check_decompositions(int64_t trials, uint64_t seed);

std::string format_report(const DecompositionReport& report);

}  // namespace falcon
