#pragma once

#include "fm4pde/common.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace fm4pde {

enum class PdeKind { Poisson, Helmholtz, Darcy, Burgers };

inline std::string to_string(PdeKind kind) {
  switch (kind) {
    case PdeKind::Poisson: return "poisson";
    case PdeKind::Helmholtz: return "helmholtz";
    case PdeKind::Darcy: return "darcy";
    case PdeKind::Burgers: return "burgers";
  }
  return "unknown";
}

inline PdeKind pde_kind_from_string(const std::string& name) {
  if (name == "poisson") return PdeKind::Poisson;
  if (name == "helmholtz") return PdeKind::Helmholtz;
  if (name == "darcy") return PdeKind::Darcy;
  if (name == "burgers") return PdeKind::Burgers;
  throw ConfigError("unknown PDE kind '" + name + "'");
}

/// Half-open range of flat indices.
struct IndexRange {
  Eigen::Index begin = 0;
  Eigen::Index end = 0;
  Eigen::Index size() const { return end - begin; }
  bool contains(Eigen::Index i) const { return i >= begin && i < end; }
};

/// Which parts of the state an observation set (or a metric) refers to.
enum class ChannelMask { Coefficient = 1, Solution = 2, Both = 3 };

/// Problem definition and grid layout.
///
/// Static problems (Poisson, Helmholtz, Darcy) live on an n x n node grid of
/// the unit square including boundary nodes, h = 1 / (n - 1), stored as two
/// channels (a, u), channel-first and row-major. Burgers is a single
/// nt x nx space-time channel with periodic space, h = 1 / nx and
/// dtau = horizon / (nt - 1); row 0 is the initial state (the "coefficient")
/// and rows 1.. are the trajectory (the "solution").
class PDEProblem {
 public:
  static PDEProblem poisson(int n) { return PDEProblem(PdeKind::Poisson, n, n, 0.0, 0.0, 0.0, 1.0); }
  static PDEProblem helmholtz(int n, double k = 1.0) {
    return PDEProblem(PdeKind::Helmholtz, n, n, k, 0.0, 0.0, 1.0);
  }
  static PDEProblem darcy(int n, double q = 1.0) {
    return PDEProblem(PdeKind::Darcy, n, n, 0.0, q, 0.0, 1.0);
  }
  static PDEProblem burgers(int nx = 128, int nt = 128, double nu = 0.01, double horizon = 1.0) {
    return PDEProblem(PdeKind::Burgers, nx, nt, 0.0, 0.0, nu, horizon);
  }

  PdeKind kind() const { return kind_; }
  bool is_static() const { return kind_ != PdeKind::Burgers; }
  /// Nodes per side (static) or spatial points (Burgers).
  int nx() const { return nx_; }
  /// Equal to nx for static problems; time rows for Burgers.
  int ny() const { return ny_; }
  double wavenumber() const { return k_; }
  double source() const { return q_; }
  double viscosity() const { return nu_; }
  double horizon() const { return horizon_; }
  double h() const { return is_static() ? 1.0 / (nx_ - 1) : 1.0 / nx_; }
  double dtau() const { return horizon_ / (ny_ - 1); }

  std::vector<Eigen::Index> extents() const {
    if (is_static()) return {2, ny_, nx_};
    return {1, ny_, nx_};
  }
  Eigen::Index dim() const {
    Eigen::Index d = 1;
    for (auto e : extents()) d *= e;
    return d;
  }
  IndexRange coefficient_range() const {
    if (is_static()) return {0, Eigen::Index(nx_) * ny_};
    return {0, nx_};
  }
  IndexRange solution_range() const {
    if (is_static()) return {Eigen::Index(nx_) * ny_, 2 * Eigen::Index(nx_) * ny_};
    return {nx_, Eigen::Index(nx_) * ny_};
  }
  IndexRange range(ChannelMask mask) const {
    switch (mask) {
      case ChannelMask::Coefficient: return coefficient_range();
      case ChannelMask::Solution: return solution_range();
      case ChannelMask::Both: return {0, dim()};
    }
    return {0, dim()};
  }
  /// Number of residual evaluation points m.
  Eigen::Index residual_points() const {
    if (is_static()) return Eigen::Index(nx_ - 2) * (nx_ - 2);
    return Eigen::Index(ny_ - 1) * nx_;
  }

 private:
  PDEProblem(PdeKind kind, int nx, int ny, double k, double q, double nu, double horizon)
      : kind_(kind), nx_(nx), ny_(ny), k_(k), q_(q), nu_(nu), horizon_(horizon) {
    if (nx < 3 || ny < 2) throw DomainError("PDEProblem: grid too small");
    if (!std::isfinite(k)) throw DomainError("PDEProblem: wavenumber must be finite");
    if (kind == PdeKind::Burgers && !(nu > 0.0)) throw DomainError("PDEProblem: viscosity must be positive");
    if (!(horizon > 0.0)) throw DomainError("PDEProblem: horizon must be positive");
  }

  PdeKind kind_;
  int nx_;
  int ny_;
  double k_;
  double q_;
  double nu_;
  double horizon_;
};

/// Dense multi-channel field, channel-first row-major.
struct GridField {
  std::vector<Eigen::Index> extents;
  Vector data;

  Eigen::Index size() const { return data.size(); }
};

inline GridField make_field(const PDEProblem& problem, Vector data) {
  require_dim(data, problem.dim(), "GridField");
  return {problem.extents(), std::move(data)};
}

namespace detail {

inline void check_layout(const PDEProblem& problem, const Vector& x) {
  if (x.size() != problem.dim()) {
    throw ContractError("PDE state has " + std::to_string(x.size()) + " entries, problem expects " +
                        std::to_string(problem.dim()));
  }
}

// Shared by the residual and its adjoint so both see the same stencil.
template <typename Visit>
void for_each_interior(const PDEProblem& p, Visit&& visit) {
  const int n = p.nx();
  Eigen::Index r = 0;
  for (int i = 1; i < n - 1; ++i)
    for (int j = 1; j < n - 1; ++j) visit(r++, Eigen::Index(i) * n + j);
}

}  // namespace detail

/// Finite-difference residual f(x) on the residual points.
///
///   Poisson / Helmholtz: lap_h u + k^2 u - a          (5-point Laplacian)
///   Darcy:               -div_h(a grad_h u) - q       (arithmetic face means)
///   Burgers:             D_t u + u D_x u - nu D_xx u  (forward in time,
///                        central in space, diffusion at the new time level)
inline Vector residual(const PDEProblem& p, const Vector& x) {
  detail::check_layout(p, x);
  Vector f(p.residual_points());
  const double h = p.h();
  const double inv_h2 = 1.0 / (h * h);
  if (p.is_static()) {
    const Eigen::Index off = p.solution_range().begin;
    const int n = p.nx();
    const auto a = x.head(off);
    const auto u = x.segment(off, off);
    if (p.kind() == PdeKind::Darcy) {
      detail::for_each_interior(p, [&](Eigen::Index r, Eigen::Index c) {
        const double ae = 0.5 * (a[c] + a[c + 1]), aw = 0.5 * (a[c] + a[c - 1]);
        const double an = 0.5 * (a[c] + a[c + n]), as = 0.5 * (a[c] + a[c - n]);
        const double flux = ae * (u[c + 1] - u[c]) + aw * (u[c - 1] - u[c]) +
                            an * (u[c + n] - u[c]) + as * (u[c - n] - u[c]);
        f[r] = -flux * inv_h2 - p.source();
      });
    } else {
      const double k2 = p.wavenumber() * p.wavenumber();
      detail::for_each_interior(p, [&](Eigen::Index r, Eigen::Index c) {
        const double lap = (u[c + 1] + u[c - 1] + u[c + n] + u[c - n] - 4.0 * u[c]) * inv_h2;
        f[r] = lap + k2 * u[c] - a[c];
      });
    }
    return f;
  }
  const int nx = p.nx();
  const double inv_dt = 1.0 / p.dtau();
  const double nu = p.viscosity();
  for (int j = 0; j + 1 < p.ny(); ++j) {
    const Eigen::Index row = Eigen::Index(j) * nx;
    const Eigen::Index next = row + nx;
    for (int i = 0; i < nx; ++i) {
      const int ip = (i + 1) % nx, im = (i + nx - 1) % nx;
      const double ux = (x[row + ip] - x[row + im]) / (2.0 * h);
      const double uxx = (x[next + ip] - 2.0 * x[next + i] + x[next + im]) * inv_h2;
      f[row + i] = (x[next + i] - x[row + i]) * inv_dt + x[row + i] * ux - nu * uxx;
    }
  }
  return f;
}

/// (d f / d x)^T r: adjoint of the residual's linearization at x.
inline Vector residual_vjp(const PDEProblem& p, const Vector& x, const Vector& r) {
  detail::check_layout(p, x);
  require_dim(r, p.residual_points(), "residual cotangent");
  Vector g = Vector::Zero(x.size());
  const double h = p.h();
  const double inv_h2 = 1.0 / (h * h);
  if (p.is_static()) {
    const Eigen::Index off = p.solution_range().begin;
    const int n = p.nx();
    const auto a = x.head(off);
    const auto u = x.segment(off, off);
    auto ga = g.head(off);
    auto gu = g.segment(off, off);
    if (p.kind() == PdeKind::Darcy) {
      detail::for_each_interior(p, [&](Eigen::Index k, Eigen::Index c) {
        const double w = r[k] * inv_h2;
        const double ae = 0.5 * (a[c] + a[c + 1]), aw = 0.5 * (a[c] + a[c - 1]);
        const double an = 0.5 * (a[c] + a[c + n]), as = 0.5 * (a[c] + a[c - n]);
        gu[c + 1] -= w * ae;
        gu[c - 1] -= w * aw;
        gu[c + n] -= w * an;
        gu[c - n] -= w * as;
        gu[c] += w * (ae + aw + an + as);
        const double de = u[c + 1] - u[c], dw = u[c - 1] - u[c];
        const double dn = u[c + n] - u[c], ds = u[c - n] - u[c];
        ga[c] -= 0.5 * w * (de + dw + dn + ds);
        ga[c + 1] -= 0.5 * w * de;
        ga[c - 1] -= 0.5 * w * dw;
        ga[c + n] -= 0.5 * w * dn;
        ga[c - n] -= 0.5 * w * ds;
      });
    } else {
      const double k2 = p.wavenumber() * p.wavenumber();
      detail::for_each_interior(p, [&](Eigen::Index k, Eigen::Index c) {
        const double w = r[k];
        gu[c + 1] += w * inv_h2;
        gu[c - 1] += w * inv_h2;
        gu[c + n] += w * inv_h2;
        gu[c - n] += w * inv_h2;
        gu[c] += w * (k2 - 4.0 * inv_h2);
        ga[c] -= w;
      });
    }
    return g;
  }
  const int nx = p.nx();
  const double inv_dt = 1.0 / p.dtau();
  const double nu = p.viscosity();
  for (int j = 0; j + 1 < p.ny(); ++j) {
    const Eigen::Index row = Eigen::Index(j) * nx;
    const Eigen::Index next = row + nx;
    for (int i = 0; i < nx; ++i) {
      const int ip = (i + 1) % nx, im = (i + nx - 1) % nx;
      const double w = r[row + i];
      const double ux = (x[row + ip] - x[row + im]) / (2.0 * h);
      g[next + i] += w * (inv_dt + 2.0 * nu * inv_h2);
      g[next + ip] -= w * nu * inv_h2;
      g[next + im] -= w * nu * inv_h2;
      g[row + i] += w * (ux - inv_dt);
      g[row + ip] += w * x[row + i] / (2.0 * h);
      g[row + im] -= w * x[row + i] / (2.0 * h);
    }
  }
  return g;
}

/// Direct sparse solve of a static problem with homogeneous Dirichlet data.
/// `a` holds all n x n coefficient nodes; the returned u is zero on the boundary.
inline Vector solve_static(const PDEProblem& p, const Vector& a) {
  if (!p.is_static()) throw ContractError("solve_static: Burgers is time dependent");
  const int n = p.nx();
  require_dim(a, Eigen::Index(n) * n, "solve_static coefficient");
  const int m = n - 2;
  const double inv_h2 = 1.0 / (p.h() * p.h());
  auto unknown = [m](int i, int j) { return Eigen::Index(i - 1) * m + (j - 1); };
  auto interior = [n](int i, int j) { return i > 0 && i < n - 1 && j > 0 && j < n - 1; };
  std::vector<Eigen::Triplet<double>> entries;
  entries.reserve(static_cast<std::size_t>(m) * m * 5);
  Vector rhs(Eigen::Index(m) * m);
  for (int i = 1; i < n - 1; ++i) {
    for (int j = 1; j < n - 1; ++j) {
      const Eigen::Index row = unknown(i, j);
      const Eigen::Index c = Eigen::Index(i) * n + j;
      const int ni[4] = {i, i, i + 1, i - 1};
      const int nj[4] = {j + 1, j - 1, j, j};
      if (p.kind() == PdeKind::Darcy) {
        double diag = 0.0;
        for (int s = 0; s < 4; ++s) {
          const double face = 0.5 * (a[c] + a[Eigen::Index(ni[s]) * n + nj[s]]) * inv_h2;
          diag += face;
          if (interior(ni[s], nj[s])) entries.emplace_back(row, unknown(ni[s], nj[s]), -face);
        }
        entries.emplace_back(row, row, diag);
        rhs[row] = p.source();
      } else {
        const double k2 = p.wavenumber() * p.wavenumber();
        for (int s = 0; s < 4; ++s)
          if (interior(ni[s], nj[s])) entries.emplace_back(row, unknown(ni[s], nj[s]), inv_h2);
        entries.emplace_back(row, row, k2 - 4.0 * inv_h2);
        rhs[row] = a[c];
      }
    }
  }
  Eigen::SparseMatrix<double> A(rhs.size(), rhs.size());
  A.setFromTriplets(entries.begin(), entries.end());
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  lu.compute(A);
  if (lu.info() != Eigen::Success) throw SolverError("solve_static: factorization failed (singular operator)");
  const Vector sol = lu.solve(rhs);
  if (lu.info() != Eigen::Success || !sol.allFinite()) throw SolverError("solve_static: solve failed");
  const double scale = std::max(1.0, rhs.lpNorm<Eigen::Infinity>());
  if ((A * sol - rhs).lpNorm<Eigen::Infinity>() > 1e-8 * scale) {
    throw SolverError("solve_static: operator is numerically singular");
  }
  Vector u = Vector::Zero(Eigen::Index(n) * n);
  for (int i = 1; i < n - 1; ++i)
    for (int j = 1; j < n - 1; ++j) u[Eigen::Index(i) * n + j] = sol[unknown(i, j)];
  return u;
}

/// Periodic viscous Burgers, marched with explicit advection and implicit
/// diffusion on the same stencil the residual uses. Row 0 of the result is u0.
inline Vector solve_burgers(const PDEProblem& p, const Vector& u0) {
  if (p.kind() != PdeKind::Burgers) throw ContractError("solve_burgers: not a Burgers problem");
  const int nx = p.nx();
  require_dim(u0, nx, "solve_burgers initial state");
  const double h = p.h();
  const double dt = p.dtau();
  const double diff = p.viscosity() * dt / (h * h);
  Matrix implicit = Matrix::Zero(nx, nx);
  for (int i = 0; i < nx; ++i) {
    implicit(i, i) = 1.0 + 2.0 * diff;
    implicit(i, (i + 1) % nx) -= diff;
    implicit(i, (i + nx - 1) % nx) -= diff;
  }
  const Eigen::PartialPivLU<Matrix> lu(implicit);
  Vector traj(Eigen::Index(nx) * p.ny());
  traj.head(nx) = u0;
  Vector u = u0;
  Vector rhs(nx);
  for (int step = 1; step < p.ny(); ++step) {
    const double cfl = u.cwiseAbs().maxCoeff() * dt / h;
    if (!(cfl <= 1.0)) {
      throw SolverError("solve_burgers: CFL number " + std::to_string(cfl) + " exceeds 1 at step " +
                        std::to_string(step));
    }
    for (int i = 0; i < nx; ++i) {
      const double ux = (u[(i + 1) % nx] - u[(i + nx - 1) % nx]) / (2.0 * h);
      rhs[i] = u[i] - dt * u[i] * ux;
    }
    u = lu.solve(rhs);
    traj.segment(Eigen::Index(step) * nx, nx) = u;
  }
  return traj;
}

/// ||pred - truth|| / ||truth||.
template <typename A, typename B>
double relative_error(const Eigen::MatrixBase<A>& pred, const Eigen::MatrixBase<B>& truth) {
  if (pred.size() != truth.size()) throw ContractError("relative_error: size mismatch");
  const double denom = truth.norm();
  if (!(denom > 0.0)) throw DomainError("relative_error: truth has zero norm");
  return (pred - truth).norm() / denom;
}

}  // namespace fm4pde
