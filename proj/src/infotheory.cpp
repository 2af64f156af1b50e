#include "falcon/infotheory.hpp"

#include <cmath>
#include <sstream>

namespace falcon {

namespace {
constexpr Scalar kMassTolerance = 1e-12;

Scalar plogp(Scalar p) { return p > 0.0 ? p * std::log2(p) : 0.0; }
}  // namespace

void JointDistribution::validate() const {
  if (nx < 1 || ny < 1 || nc < 1) {
    raise(ErrorKind::Validation, "joint: support sizes must be positive");
  }
  if (static_cast<int64_t>(p.size()) != nx * ny * nc) {
    raise(ErrorKind::Validation, "joint: table size does not match supports");
  }
  Scalar total = 0.0;
  for (Scalar v : p) {
    if (v < 0.0 || !std::isfinite(v)) {
      raise(ErrorKind::Validation, "joint: probabilities must be finite and >= 0");
    }
    total += v;
  }
  if (std::abs(total - 1.0) > kMassTolerance) {
    raise(ErrorKind::Validation, "joint: total mass " + std::to_string(total) +
                                     " is not 1");
  }
}

std::vector<Scalar> JointDistribution::marginal_x() const {
  std::vector<Scalar> m(static_cast<size_t>(nx), 0.0);
  for (int64_t x = 0; x < nx; ++x) {
    for (int64_t y = 0; y < ny; ++y) {
      for (int64_t c = 0; c < nc; ++c) m[x] += at(x, y, c);
    }
  }
  return m;
}

std::vector<Scalar> JointDistribution::marginal_y() const {
  std::vector<Scalar> m(static_cast<size_t>(ny), 0.0);
  for (int64_t x = 0; x < nx; ++x) {
    for (int64_t y = 0; y < ny; ++y) {
      for (int64_t c = 0; c < nc; ++c) m[y] += at(x, y, c);
    }
  }
  return m;
}

std::vector<Scalar> JointDistribution::marginal_c() const {
  std::vector<Scalar> m(static_cast<size_t>(nc), 0.0);
  for (int64_t x = 0; x < nx; ++x) {
    for (int64_t y = 0; y < ny; ++y) {
      for (int64_t c = 0; c < nc; ++c) m[c] += at(x, y, c);
    }
  }
  return m;
}

std::vector<Scalar> JointDistribution::joint_xy() const {
  std::vector<Scalar> m(static_cast<size_t>(nx * ny), 0.0);
  for (int64_t x = 0; x < nx; ++x) {
    for (int64_t y = 0; y < ny; ++y) {
      for (int64_t c = 0; c < nc; ++c) m[x * ny + y] += at(x, y, c);
    }
  }
  return m;
}

std::vector<Scalar> JointDistribution::joint_xc() const {
  std::vector<Scalar> m(static_cast<size_t>(nx * nc), 0.0);
  for (int64_t x = 0; x < nx; ++x) {
    for (int64_t y = 0; y < ny; ++y) {
      for (int64_t c = 0; c < nc; ++c) m[x * nc + c] += at(x, y, c);
    }
  }
  return m;
}

std::vector<Scalar> JointDistribution::joint_yc() const {
  std::vector<Scalar> m(static_cast<size_t>(ny * nc), 0.0);
  for (int64_t x = 0; x < nx; ++x) {
    for (int64_t y = 0; y < ny; ++y) {
      for (int64_t c = 0; c < nc; ++c) m[y * nc + c] += at(x, y, c);
    }
  }
  return m;
}

JointDistribution JointDistribution::random(int64_t nx, int64_t ny, int64_t nc,
                                            Rng& rng) {
  JointDistribution d;
  d.nx = nx;
  d.ny = ny;
  d.nc = nc;
  d.p.resize(static_cast<size_t>(nx * ny * nc));
  Scalar total = 0.0;
  for (auto& v : d.p) {
    v = rng.next_unit() + 1e-6;
    total += v;
  }
  for (auto& v : d.p) v /= total;
  return d;
}

JointDistribution JointDistribution::independent_pair(
    const std::vector<Scalar>& px, const std::vector<Scalar>& py) {
  JointDistribution d;
  d.nx = static_cast<int64_t>(px.size());
  d.ny = static_cast<int64_t>(py.size());
  d.nc = 1;
  d.p.resize(px.size() * py.size());
  for (size_t x = 0; x < px.size(); ++x) {
    for (size_t y = 0; y < py.size(); ++y) d.p[x * py.size() + y] = px[x] * py[y];
  }
  return d;
}

JointDistribution JointDistribution::point_mass(int64_t nx, int64_t ny,
                                                int64_t nc) {
  JointDistribution d;
  d.nx = nx;
  d.ny = ny;
  d.nc = nc;
  d.p.assign(static_cast<size_t>(nx * ny * nc), 0.0);
  d.p[0] = 1.0;
  return d;
}

JointDistribution JointDistribution::correlated_pair(int64_t n, Scalar coupling) {
  JointDistribution d;
  d.nx = n;
  d.ny = n;
  d.nc = 1;
  d.p.assign(static_cast<size_t>(n * n), 0.0);
  const Scalar uni = (1.0 - coupling) / static_cast<Scalar>(n * n);
  for (int64_t x = 0; x < n; ++x) {
    for (int64_t y = 0; y < n; ++y) {
      d.p[x * n + y] = uni + (x == y ? coupling / static_cast<Scalar>(n) : 0.0);
    }
  }
  return d;
}

Scalar entropy(const std::vector<Scalar>& dist) {
  Scalar h = 0.0;
  for (Scalar v : dist) h -= plogp(v);
  return h;
}

Scalar conditional_entropy(const std::vector<Scalar>& joint_ab, int64_t na,
                           int64_t nb) {
  // H(A|B) = H(A,B) - H(B)
  std::vector<Scalar> pb(static_cast<size_t>(nb), 0.0);
  for (int64_t a = 0; a < na; ++a) {
    for (int64_t b = 0; b < nb; ++b) pb[b] += joint_ab[a * nb + b];
  }
  return entropy(joint_ab) - entropy(pb);
}

Scalar mutual_information(const std::vector<Scalar>& joint_ab, int64_t na,
                          int64_t nb) {
  std::vector<Scalar> pa(static_cast<size_t>(na), 0.0);
  std::vector<Scalar> pb(static_cast<size_t>(nb), 0.0);
  for (int64_t a = 0; a < na; ++a) {
    for (int64_t b = 0; b < nb; ++b) {
      pa[a] += joint_ab[a * nb + b];
      pb[b] += joint_ab[a * nb + b];
    }
  }
  Scalar mi = 0.0;
  for (int64_t a = 0; a < na; ++a) {
    for (int64_t b = 0; b < nb; ++b) {
      const Scalar pab = joint_ab[a * nb + b];
      if (pab > 0.0) mi += pab * std::log2(pab / (pa[a] * pb[b]));
    }
  }
  return mi;
}

JointStats joint_stats(const JointDistribution& d) {
  d.validate();
  JointStats s{};
  const auto xy = d.joint_xy();
  s.hx = entropy(d.marginal_x());
  s.hy = entropy(d.marginal_y());
  s.hxy = entropy(xy);
  s.hx_given_y = s.hxy - s.hy;
  s.hy_given_x = s.hxy - s.hx;
  s.ixy = mutual_information(xy, d.nx, d.ny);
  if (d.nc > 1) {
    const auto xc = d.joint_xc();
    s.hx_given_c = conditional_entropy(xc, d.nx, d.nc);
    s.ixc = mutual_information(xc, d.nx, d.nc);
  } else {
    s.hx_given_c = s.hx;
    s.ixc = 0.0;
  }
  return s;
}

std::array<Scalar, 4> decomposition_residuals(const JointDistribution& d) {
  const JointStats s = joint_stats(d);
  std::array<Scalar, 4> r{};
  r[0] = s.hx - s.hx_given_y - s.ixy;
  r[1] = (s.hx + s.hy) - (s.hy_given_x + 2.0 * s.ixy + s.hx_given_y);
  r[2] = s.hx - (s.hx_given_c + s.ixc);
  r[3] = (s.hx + s.hy) - (s.hx_given_c + s.ixc + s.hy_given_x + s.ixy);
  return r;
}

DecompositionReport check_decompositions(int64_t trials, uint64_t seed) {
  if (trials < 1) raise(ErrorKind::Validation, "check needs trials >= 1");
  Rng rng(seed);
  DecompositionReport report;

  auto feed = [&report](const JointDistribution& d) {
    const auto res = decomposition_residuals(d);
    const JointStats s = joint_stats(d);
    for (int i = 0; i < 4; ++i) {
      report.max_residual[i] = std::max(report.max_residual[i], std::abs(res[i]));
    }
    Scalar violation = 0.0;
    for (Scalar h : {s.hx, s.hy, s.hxy, s.hx_given_y, s.hy_given_x, s.hx_given_c}) {
      violation = std::max(violation, -h);
    }
    violation = std::max(violation, -s.ixy);
    violation = std::max(violation, -s.ixc);
    violation = std::max(violation, s.hx_given_y - s.hx);  // conditioning cannot add
    report.max_sanity_violation = std::max(report.max_sanity_violation, violation);
    ++report.joints_checked;
  };

  // structured corners
  feed(JointDistribution::point_mass(3, 3, 3));
  feed(JointDistribution::independent_pair({0.5, 0.5}, {0.5, 0.5}));
  feed(JointDistribution::correlated_pair(2, 1.0));   // Y == X
  feed(JointDistribution::correlated_pair(4, 0.9));   // strong dependence
  for (int64_t t = 0; t < trials; ++t) {
    const int64_t nx = 2 + static_cast<int64_t>(rng.next_index(3));
    const int64_t ny = 2 + static_cast<int64_t>(rng.next_index(3));
    const int64_t nc = 1 + static_cast<int64_t>(rng.next_index(3));
    feed(JointDistribution::random(nx, ny, nc, rng));
  }
  return report;
}

std::string format_report(const DecompositionReport& report) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific;
  os << "joints checked: " << report.joints_checked << "\n";
  const char* names[4] = {
      "H(X) = H(X|Y) + I(X;Y)",
      "H(X)+H(Y) = H(Y|X) + 2 I(X;Y) + H(X|Y)",
      "H(X) = H(X|C) + I(X;C)",
      "H(X)+H(Y) = H(X|C) + I(X;C) + H(Y|X) + I(X;Y)",
  };
  for (int i = 0; i < 4; ++i) {
    os << "max residual, " << names[i] << ": " << report.max_residual[i]
       << " bits\n";
  }
  os << "max sanity violation (nonnegativity/conditioning): "
     << report.max_sanity_violation << "\n";
  return os.str();
}

}  // namespace falcon
