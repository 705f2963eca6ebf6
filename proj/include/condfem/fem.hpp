#pragma once

#include "condfem/constraints.hpp"
#include "condfem/mesh.hpp"

#include <Eigen/SparseCholesky>

namespace condfem {

struct FemState {
  Vec x;                 // node positions, 3n
  bool converged = false;
};

struct NewtonOptions {
  double tol = 1e-8;     // relative residual
  int max_iters = 50;
  int max_halvings = 25;
  double max_step = 0.0;       // mm; 0 = 10% of the mesh bounding-box diagonal
  int nonmonotone_window = 10; // accept steps against the max of this many recent residuals
};

struct CondensedState {
  Mat W;           // mm/N, symmetric PSD, block order (e, a, c)
  Vec delta_free;  // mm
  BlockMap map;

  Mat Wee() const { return W.block(map.e_offset(), map.e_offset(), 3 * map.n_e, 3 * map.n_e); }
  Mat Wea() const { return W.block(map.e_offset(), map.a_offset(), 3 * map.n_e, map.n_a); }
  Mat Wec() const { return W.block(map.e_offset(), map.c_offset(), 3 * map.n_e, map.m_c); }
  Mat Waa() const { return W.block(map.a_offset(), map.a_offset(), map.n_a, map.n_a); }
  Mat Wac() const { return W.block(map.a_offset(), map.c_offset(), map.n_a, map.m_c); }
  Mat Wca() const { return W.block(map.c_offset(), map.a_offset(), map.m_c, map.n_a); }
  Mat Wcc() const { return W.block(map.c_offset(), map.c_offset(), map.m_c, map.m_c); }
  Vec delta_free_e() const { return delta_free.segment(map.e_offset(), 3 * map.n_e); }
  Vec delta_free_a() const { return delta_free.segment(map.a_offset(), map.n_a); }
  Vec delta_free_c() const { return delta_free.segment(map.c_offset(), map.m_c); }
};

// Direct kinematics J = W_ea W_aa^-1. Falls back to a pseudo-inverse when
// W_aa is singular (redundant or slack actuators).
inline Mat direct_kinematics(const CondensedState& cs, bool* used_pseudo_inverse = nullptr) {
  Mat Waa = cs.Waa();
  Eigen::FullPivLU<Mat> lu(Waa);
  if (used_pseudo_inverse) *used_pseudo_inverse = false;
  if (lu.isInvertible()) return cs.Wea() * lu.inverse();
  if (used_pseudo_inverse) *used_pseudo_inverse = true;
  return cs.Wea() * Waa.completeOrthogonalDecomposition().pseudoInverse();
}

// ---------------------------------------------------------------------------
// Quasi-static FEM kernel: linear tetrahedra with corotational linear
// elasticity (per-element polar-decomposition rotation). Fixed nodes are
// eliminated (row/column removal), keeping the reduced K SPD.
// ---------------------------------------------------------------------------
class FemSystem {
 public:
  FemSystem(Mesh mesh, MaterialParams material, Vec3 gravity = Vec3::Zero(), double density_kg_mm3 = 1.1e-6)
      : mesh_(std::move(mesh)), material_(material) {
    mesh_.validate();
    material_.validate();
    precompute();
    f_gravity_ = Vec::Zero(num_dofs());
    if (gravity.norm() > 0.0) {
      for (int t = 0; t < mesh_.num_tets(); ++t) {
        double m4 = density_kg_mm3 * mesh_.tet_volume(t) / 4.0;
        for (int a = 0; a < 4; ++a)
          f_gravity_.segment<3>(3 * mesh_.tets[static_cast<std::size_t>(t)][a]) += m4 * gravity;
      }
    }
  }

  const Mesh& mesh() const { return mesh_; }
  const MaterialParams& material() const { return material_; }
  int num_dofs() const { return 3 * mesh_.num_nodes(); }
  int num_free_dofs() const { return num_free_; }
  // -1 if the DoF is fixed.
  int free_dof_index(int dof) const { return free_index_[static_cast<std::size_t>(dof)]; }
  Mat reduce_to_free_dense(const SpMat& K_full) const {
    Mat K = Mat::Zero(num_free_, num_free_);
    for (int col = 0; col < K_full.outerSize(); ++col) {
      int fc = free_index_[static_cast<std::size_t>(col)];
      if (fc < 0) continue;
      for (SpMat::InnerIterator it(K_full, col); it; ++it) {
        int fr = free_index_[static_cast<std::size_t>(it.row())];
        if (fr >= 0) K(fr, fc) = it.value();
      }
    }
    return K;
  }
  const Vec& rest_positions() const { return x_rest_; }
  const Vec& gravity_forces() const { return f_gravity_; }
  FemState rest_state() const { return {x_rest_, true}; }

  // Internal forces and tangent stiffness: f_int(x_rest) = 0 and, in the
  // linear regime, f_int = K (x - x_rest).
  void assemble(const Vec& x, Vec& f_int, SpMat& K) const {
    f_int = Vec::Zero(num_dofs());
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<std::size_t>(mesh_.num_tets()) * 144);
    Eigen::Matrix<double, 12, 1> xe, x0e;
    for (int t = 0; t < mesh_.num_tets(); ++t) {
      const auto& tet = mesh_.tets[static_cast<std::size_t>(t)];
      const auto& el = elements_[static_cast<std::size_t>(t)];
      Mat3 ds;
      for (int a = 0; a < 3; ++a)
        ds.col(a) = x.segment<3>(3 * tet[a + 1]) - x.segment<3>(3 * tet[0]);
      Mat3 F = ds * el.dm_inv;
      if (F.determinant() <= 0.0)
        throw NumericalError("degenerate element: inverted tet " + std::to_string(t));
      Mat3 R = polar_rotation(F);
      for (int a = 0; a < 4; ++a) {
        xe.segment<3>(3 * a) = x.segment<3>(3 * tet[a]);
        x0e.segment<3>(3 * a) = x_rest_.segment<3>(3 * tet[a]);
      }
      // f = R Ke (R^T x - x0), K = R Ke R^T (rotation held fixed).
      Eigen::Matrix<double, 12, 1> u_local;
      for (int a = 0; a < 4; ++a)
        u_local.segment<3>(3 * a) = R.transpose() * xe.segment<3>(3 * a) - x0e.segment<3>(3 * a);
      Eigen::Matrix<double, 12, 1> f_local = el.ke * u_local;
      Eigen::Matrix<double, 12, 12> ke_rot = el.ke;
      for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b)
          ke_rot.block<3, 3>(3 * a, 3 * b) = R * el.ke.block<3, 3>(3 * a, 3 * b) * R.transpose();
      for (int a = 0; a < 4; ++a) {
        f_int.segment<3>(3 * tet[a]) += R * f_local.segment<3>(3 * a);
        for (int b = 0; b < 4; ++b)
          for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
              trips.emplace_back(3 * tet[a] + i, 3 * tet[b] + j, ke_rot(3 * a + i, 3 * b + j));
      }
    }
    K.resize(num_dofs(), num_dofs());
    K.setFromTriplets(trips.begin(), trips.end());
  }

  // Cholesky factor of K restricted to free DoFs.
  class Factor {
   public:
    Factor(const FemSystem& sys, const SpMat& K_full) : sys_(&sys) {
      std::vector<Eigen::Triplet<double>> trips;
      for (int col = 0; col < K_full.outerSize(); ++col) {
        int fc = sys.free_index_[static_cast<std::size_t>(col)];
        if (fc < 0) continue;
        for (SpMat::InnerIterator it(K_full, col); it; ++it) {
          int fr = sys.free_index_[static_cast<std::size_t>(it.row())];
          if (fr >= 0) trips.emplace_back(fr, fc, it.value());
        }
      }
      SpMat K_red(sys.num_free_, sys.num_free_);
      K_red.setFromTriplets(trips.begin(), trips.end());
      llt_.compute(K_red);
      if (llt_.info() != Eigen::Success)
        throw NumericalError("stiffness factorization failed (singular system)");
    }

    // Solve K y = rhs on free DoFs; fixed DoFs of y are zero.
    Vec solve(const Vec& rhs_full) const {
      Vec rhs_red(sys_->num_free_);
      for (int d = 0; d < sys_->num_dofs(); ++d) {
        int f = sys_->free_index_[static_cast<std::size_t>(d)];
        if (f >= 0) rhs_red[f] = rhs_full[d];
      }
      Vec sol_red = llt_.solve(rhs_red);
      Vec sol = Vec::Zero(sys_->num_dofs());
      for (int d = 0; d < sys_->num_dofs(); ++d) {
        int f = sys_->free_index_[static_cast<std::size_t>(d)];
        if (f >= 0) sol[d] = sol_red[f];
      }
      return sol;
    }

   private:
    const FemSystem* sys_;
    Eigen::SimplicialLLT<SpMat> llt_;
  };

  Factor factorize(const SpMat& K_full) const { return Factor(*this, K_full); }

  // First line of the two-step split: K dx_free = f_ext - f_int, then
  // delta_free_j = delta_j(x) + H_j dx_free.
  struct FreeMotion {
    Vec dx_free;
    Vec delta_free;
  };
  FreeMotion solve_free_motion(const Vec& x, const ConstraintSet& constraints, const Vec& f_ext) const {
    Vec f_int;
    SpMat K;
    assemble(x, f_int, K);
    Factor factor = factorize(K);
    return solve_free_motion(x, constraints, f_ext, f_int, factor);
  }
  FreeMotion solve_free_motion(const Vec& x, const ConstraintSet& constraints, const Vec& f_ext,
                               const Vec& f_int, const Factor& factor) const {
    FreeMotion fm;
    fm.dx_free = factor.solve(f_ext - f_int);
    Vec d = constraints.delta(x);
    auto rows = constraints.jacobian(x);
    fm.delta_free = d;
    for (std::size_t r = 0; r < rows.size(); ++r) fm.delta_free[static_cast<Eigen::Index>(r)] += rows[r].dot(fm.dx_free);
    return fm;
  }

  // Schur-complement condensation: W = H K^-1 H^T assembled with one
  // back-substitution per constraint row.
  CondensedState condense(const Vec& x, const ConstraintSet& constraints, const Vec& f_ext) const {
    Vec f_int;
    SpMat K;
    assemble(x, f_int, K);
    Factor factor = factorize(K);
    return condense(x, constraints, f_ext, f_int, factor);
  }
  CondensedState condense(const Vec& x, const ConstraintSet& constraints, const Vec& f_ext,
                          const Vec& f_int, const Factor& factor) const {
    CondensedState cs;
    cs.map = constraints.block_map();
    int d = cs.map.size();
    auto rows = constraints.jacobian(x);
    Mat Y(num_dofs(), d);
    for (int r = 0; r < d; ++r) {
      Vec h = Vec::Zero(num_dofs());
      rows[static_cast<std::size_t>(r)].add_to(h, 1.0);
      Y.col(r) = factor.solve(h);
    }
    cs.W.resize(d, d);
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < d; ++c) cs.W(r, c) = rows[static_cast<std::size_t>(r)].dot(Y.col(c));
    cs.delta_free = solve_free_motion(x, constraints, f_ext, f_int, factor).delta_free;
    return cs;
  }

  // Newton solve of K dx = f_ext - f_int + H_a^T la + H_c^T lc with
  // line-search halving. Constraint Jacobians are re-evaluated each iteration.
  struct EquilibriumResult {
    FemState state;
    Vec delta;          // constraint-space displacements at equilibrium
    int iterations = 0;
    std::vector<double> residual_history;
  };
  // A single full-load Newton solve can stall on these very soft meshes (the
  // first step predicts tip motions larger than the beam), so the public entry
  // ramps the loads with adaptive continuation and warm starts.
  EquilibriumResult solve_equilibrium(const Vec& x0, const ConstraintSet& constraints, const Vec& lambda_a,
                                      const Vec& lambda_c, const Vec& f_ext,
                                      const NewtonOptions& opts = {}) const {
    Vec x = x0;
    double t = 0.0, step = 1.0;
    EquilibriumResult res;
    int total_iters = 0;
    std::vector<double> history;
    while (true) {
      double t_try = std::min(1.0, t + step);
      try {
        res = newton_solve(x, constraints, Vec(t_try * lambda_a), Vec(t_try * lambda_c), Vec(t_try * f_ext), opts);
      } catch (const NumericalError&) {
        step *= 0.5;
        if (step < 1.0 / 1024.0) throw;
        continue;
      }
      x = res.state.x;
      total_iters += res.iterations;
      history.insert(history.end(), res.residual_history.begin(), res.residual_history.end());
      t = t_try;
      if (t >= 1.0) break;
      step = std::min(2.0 * step, 1.0 - t);
    }
    res.iterations = total_iters;
    res.residual_history = std::move(history);
    return res;
  }

  EquilibriumResult newton_solve(const Vec& x0, const ConstraintSet& constraints, const Vec& lambda_a,
                                 const Vec& lambda_c, const Vec& f_ext,
                                 const NewtonOptions& opts = {}) const {
    BlockMap bm = constraints.block_map();
    if (lambda_a.size() != bm.n_a || lambda_c.size() != bm.m_c)
      throw ConfigError("lambda dimension mismatch");
    Vec x = x0;
    EquilibriumResult res;
    auto residual = [&](const Vec& xx) {
      Vec f_int;
      SpMat K;
      assemble(xx, f_int, K);
      Vec r = f_ext - f_int;
      auto rows = constraints.jacobian(xx);
      for (int a = 0; a < bm.n_a; ++a) rows[static_cast<std::size_t>(bm.a_offset() + a)].add_to(r, lambda_a[a]);
      for (int c = 0; c < bm.m_c; ++c) rows[static_cast<std::size_t>(bm.c_offset() + c)].add_to(r, lambda_c[c]);
      // Geometric stiffness of the cable forces, -d(H_a^T lambda_a)/dx: a
      // graph Laplacian of (lambda/len)(I - t t^T) blocks per segment. It is
      // PSD under tension, so the Newton matrix stays SPD.
      if (bm.n_a > 0 && lambda_a.cwiseAbs().maxCoeff() > 0.0) {
        std::vector<Eigen::Triplet<double>> trips;
        for (int a = 0; a < bm.n_a; ++a) {
          const auto& via = constraints.actuators[static_cast<std::size_t>(a)].via_nodes;
          if (lambda_a[a] == 0.0) continue;
          for (std::size_t s = 0; s + 1 < via.size(); ++s) {
            int i = via[s], jn = via[s + 1];
            Vec3 seg = xx.segment<3>(3 * jn) - xx.segment<3>(3 * i);
            double len = seg.norm();
            Vec3 t = seg / len;
            Mat3 B = (lambda_a[a] / len) * (Mat3::Identity() - t * t.transpose());
            for (int rr = 0; rr < 3; ++rr)
              for (int cc = 0; cc < 3; ++cc) {
                trips.emplace_back(3 * i + rr, 3 * i + cc, B(rr, cc));
                trips.emplace_back(3 * jn + rr, 3 * jn + cc, B(rr, cc));
                trips.emplace_back(3 * i + rr, 3 * jn + cc, -B(rr, cc));
                trips.emplace_back(3 * jn + rr, 3 * i + cc, -B(rr, cc));
              }
          }
        }
        SpMat G(num_dofs(), num_dofs());
        G.setFromTriplets(trips.begin(), trips.end());
        K += G;
      }
      return std::make_tuple(r, f_int, K);
    };
    auto free_norm = [&](const Vec& r) {
      double s = 0.0;
      for (int dof = 0; dof < num_dofs(); ++dof)
        if (free_index_[static_cast<std::size_t>(dof)] >= 0) s += r[dof] * r[dof];
      return std::sqrt(s);
    };
    double scale = std::max(1.0, f_ext.norm() + lambda_a.cwiseAbs().sum() + lambda_c.cwiseAbs().sum());
    double cap = opts.max_step > 0.0 ? opts.max_step : 0.1 * (mesh_.bbox_max() - mesh_.bbox_min()).norm();
    for (int it = 0; it < opts.max_iters; ++it) {
      auto [r, f_int, K] = residual(x);
      double rn = free_norm(r);
      res.residual_history.push_back(rn);
      if (rn <= opts.tol * scale) {
        res.state = {x, true};
        res.delta = constraints.delta(x);
        res.iterations = it;
        return res;
      }
      Factor factor = factorize(K);
      Vec dx = factor.solve(r);
      // The convergent path of the frozen-rotation iteration is not monotone in
      // the residual norm (the tangent loses rank in snap-through regions), so
      // steps are length-capped and taken as long as they keep every element
      // valid; the step is halved only when a trial inverts an element.
      double alpha = std::min(1.0, cap / std::max(dx.norm(), 1e-300));
      bool accepted = false;
      for (int h = 0; h < opts.max_halvings; ++h) {
        Vec x_try = x + alpha * dx;
        try {
          auto [r_try, fi_try, K_try] = residual(x_try);
          if (std::isfinite(free_norm(r_try))) {
            x = x_try;
            accepted = true;
            break;
          }
        } catch (const NumericalError&) {
          // inverted element during the trial step: shorten it
        }
        alpha *= 0.5;
      }
      // A stalled search means the linearization is unreliable at this load;
      // the continuation wrapper retries with a smaller increment.
      if (!accepted) throw NumericalError("Newton line search stalled: residual " + std::to_string(rn));
    }
    auto [r, f_int, K] = residual(x);
    res.residual_history.push_back(free_norm(r));
    throw NumericalError("Newton did not converge: residual " + std::to_string(res.residual_history.back()));
  }

  // Drive actuators (and optionally contact rows) to prescribed constraint
  // displacements by outer iteration on the condensed map.
  struct DriveResult {
    FemState state;
    Vec lambda_a;
    Vec lambda_c;  // empty unless contact rows are driven
    CondensedState condensed;
  };
  DriveResult drive_to_displacement(const ConstraintSet& constraints, const Vec& delta_a_target,
                                    const Vec& f_ext, const Vec* delta_c_target = nullptr,
                                    const Vec* x_start = nullptr, int max_outer = 40,
                                    double tol = 1e-9) const {
    BlockMap bm = constraints.block_map();
    bool with_c = delta_c_target != nullptr;
    int nb = bm.n_a + (with_c ? bm.m_c : 0);
    Vec target(nb);
    target.head(bm.n_a) = delta_a_target;
    if (with_c) target.tail(bm.m_c) = *delta_c_target;

    DriveResult out;
    out.lambda_a = Vec::Zero(bm.n_a);
    out.lambda_c = Vec::Zero(with_c ? bm.m_c : 0);
    Vec x = x_start ? *x_start : x_rest_;
    double tscale = 1.0 + target.norm();
    // The course tolerance is below the force noise of a default-tolerance
    // equilibrium, so the inner solves run tighter here.
    NewtonOptions inner_opts;
    inner_opts.tol = 1e-11;
    inner_opts.max_iters = 80;
    for (int outer = 0; outer < max_outer; ++outer) {
      Vec lc = with_c ? out.lambda_c : Vec::Zero(bm.m_c);
      auto eq = solve_equilibrium(x, constraints, out.lambda_a, lc, f_ext, inner_opts);
      x = eq.state.x;
      CondensedState cs = condense(x, constraints, f_ext);
      Vec current(nb);
      current.head(bm.n_a) = eq.delta.segment(bm.a_offset(), bm.n_a);
      if (with_c) current.tail(bm.m_c) = eq.delta.segment(bm.c_offset(), bm.m_c);
      Vec err = target - current;
      if (err.norm() <= tol * tscale) {
        out.state = {x, true};
        out.condensed = cs;
        return out;
      }
      Mat Wb(nb, nb);
      Wb.topLeftCorner(bm.n_a, bm.n_a) = cs.Waa();
      if (with_c) {
        Wb.topRightCorner(bm.n_a, bm.m_c) = cs.Wac();
        Wb.bottomLeftCorner(bm.m_c, bm.n_a) = cs.Wca();
        Wb.bottomRightCorner(bm.m_c, bm.m_c) = cs.Wcc();
      }
      Vec dl = Wb.ldlt().solve(err);
      out.lambda_a += dl.head(bm.n_a);
      if (with_c) out.lambda_c += dl.tail(bm.m_c);
    }
    throw NumericalError("displacement drive did not converge");
  }

 private:
  struct Element {
    Mat3 dm_inv;
    double volume;
    Eigen::Matrix<double, 12, 12> ke;
  };

  static Mat3 polar_rotation(const Mat3& F) {
    Eigen::JacobiSVD<Mat3> svd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 R = svd.matrixU() * svd.matrixV().transpose();
    if (R.determinant() < 0.0) {
      Mat3 U = svd.matrixU();
      U.col(2) *= -1.0;
      R = U * svd.matrixV().transpose();
    }
    return R;
  }

  void precompute() {
    x_rest_.resize(num_dofs());
    for (int n = 0; n < mesh_.num_nodes(); ++n) x_rest_.segment<3>(3 * n) = mesh_.nodes[static_cast<std::size_t>(n)];

    // Isotropic elasticity in engineering-strain ordering; E in kPa -> N/mm^2.
    double E = material_.young_modulus * 1e-3;
    double nu = material_.poisson_ratio;
    double lame_l = E * nu / ((1 + nu) * (1 - 2 * nu));
    double lame_m = E / (2 * (1 + nu));
    Eigen::Matrix<double, 6, 6> C = Eigen::Matrix<double, 6, 6>::Zero();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) C(i, j) = (i == j) ? lame_l + 2 * lame_m : lame_l;
    for (int i = 3; i < 6; ++i) C(i, i) = lame_m;

    elements_.reserve(static_cast<std::size_t>(mesh_.num_tets()));
    for (int t = 0; t < mesh_.num_tets(); ++t) {
      const auto& tet = mesh_.tets[static_cast<std::size_t>(t)];
      Element el;
      Mat3 dm;
      for (int a = 0; a < 3; ++a)
        dm.col(a) = mesh_.nodes[static_cast<std::size_t>(tet[a + 1])] - mesh_.nodes[static_cast<std::size_t>(tet[0])];
      el.volume = dm.determinant() / 6.0;
      if (!(el.volume > 0.0)) throw ConfigError("degenerate element: non-positive volume in tet " + std::to_string(t));
      el.dm_inv = dm.inverse();
      // Shape gradients g_a, a = 0..3.
      Mat3 dm_inv_t = el.dm_inv.transpose();
      Vec3 g[4];
      for (int a = 1; a < 4; ++a) g[a] = dm_inv_t.col(a - 1);
      g[0] = -(g[1] + g[2] + g[3]);
      Eigen::Matrix<double, 6, 12> B = Eigen::Matrix<double, 6, 12>::Zero();
      for (int a = 0; a < 4; ++a) {
        B(0, 3 * a + 0) = g[a].x();
        B(1, 3 * a + 1) = g[a].y();
        B(2, 3 * a + 2) = g[a].z();
        B(3, 3 * a + 0) = g[a].y();
        B(3, 3 * a + 1) = g[a].x();
        B(4, 3 * a + 1) = g[a].z();
        B(4, 3 * a + 2) = g[a].y();
        B(5, 3 * a + 0) = g[a].z();
        B(5, 3 * a + 2) = g[a].x();
      }
      el.ke = el.volume * B.transpose() * C * B;
      elements_.push_back(el);
    }

    free_index_.assign(static_cast<std::size_t>(num_dofs()), -1);
    std::set<int> fixed(mesh_.fixed_node_ids.begin(), mesh_.fixed_node_ids.end());
    num_free_ = 0;
    for (int n = 0; n < mesh_.num_nodes(); ++n) {
      if (fixed.count(n)) continue;
      for (int c = 0; c < 3; ++c) free_index_[static_cast<std::size_t>(3 * n + c)] = num_free_++;
    }
  }

  Mesh mesh_;
  MaterialParams material_;
  Vec x_rest_;
  Vec f_gravity_;
  std::vector<Element> elements_;
  std::vector<int> free_index_;
  int num_free_ = 0;

  friend class Factor;
};

}  // namespace condfem
