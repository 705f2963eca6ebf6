#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "condfem/control.hpp"
#include "condfem/sampling.hpp"

namespace condfem {

// ---------------------------------------------------------------------------
// Differentiable calibration and design optimization through the composed
// networks F(G(p)): objectives on the predicted condensed state with analytic
// gradients, grid-search initialization, projected gradient descent, and
// Pareto-front extraction.
// ---------------------------------------------------------------------------

struct ObjectiveEval {
  double value = 0.0;
  Vec grad;
  bool clamped = false;      // arccos argument hit the guard
  bool regularized = false;  // singular or ill-conditioned inverse was ridged
};

using Objective = std::function<ObjectiveEval(const Vec& p)>;

struct DesignModels {
  const MlpModel* G = nullptr;  // p -> rest condensed state
  const MlpModel* F = nullptr;  // (delta_a, [delta_c,] W0, delta_free0) -> condensed state
  const Robot* robot = nullptr; // parametric base robot, for rest geometry
  DesignSpace space;
};

// Jacobian of the network in physical units (standardization chained in).
inline Mat physical_jacobian(const MlpModel& model, const Vec& x_phys) {
  Mat J = model.input_jacobian(model.stats.standardize_input(x_phys));
  return model.stats.out_std.asDiagonal() * J * model.stats.in_std.cwiseInverse().asDiagonal();
}

// Condensed state at (delta_a, p) through F(G(p)) with per-parameter
// derivatives of W and delta_free.
struct CondensedWithGrad {
  Mat W;
  Vec delta_free;
  std::vector<Mat> dW_dp;  // one full symmetric matrix per design parameter
  Mat ddf_dp;              // d x n_p
};

inline CondensedWithGrad predict_design_with_grad(const DesignModels& dm, const Vec& p,
                                                  const Vec& delta_a) {
  const MlpModel& G = *dm.G;
  const MlpModel& F = *dm.F;
  int n_p = static_cast<int>(p.size());
  int tri = G.dims.tri();
  int d = G.dims.d;
  if (n_p != G.dims.n_p) throw ConfigError("design point does not match the G model");
  if (delta_a.size() != F.dims.n_a) throw ConfigError("delta_a does not match the F model");

  Vec g_out = G.stats.destandardize_output(G.forward(G.stats.standardize_input(p)));
  Vec w0_tri = g_out.head(tri);
  Vec df0 = g_out.tail(d);
  Mat Jg = physical_jacobian(G, p);  // (tri + d) x n_p

  Vec f_in(F.input_dim());
  f_in << delta_a, Vec::Zero(F.dims.m_c), w0_tri, df0;
  Vec f_out = F.stats.destandardize_output(F.forward(F.stats.standardize_input(f_in)));
  Mat Jf = physical_jacobian(F, f_in);  // (tri + d) x input_dim

  // Chain rule through the G-output block of the F input.
  Mat Jf_g = Jf.middleCols(F.dims.n_a + F.dims.m_c, tri + d);
  Mat dout_dp = Jf_g * Jg;  // (tri + d) x n_p

  CondensedWithGrad out;
  out.W = symmetric_from_triangle(f_out.head(tri), d);
  out.delta_free = f_out.tail(d);
  out.ddf_dp = dout_dp.bottomRows(d);
  out.dW_dp.reserve(static_cast<std::size_t>(n_p));
  for (int k = 0; k < n_p; ++k)
    out.dW_dp.push_back(symmetric_from_triangle(dout_dp.topRows(tri).col(k), d));
  return out;
}

// Effector prediction of Eq-style direct kinematics,
//   delta_e = W_ea W_aa^-1 (delta_a - delta_a_free) + delta_e_free,
// with its derivative chained through dW/dp and ddelta_free/dp.
struct EffectorWithGrad {
  Vec delta_e;       // 3 n_e
  Mat ddelta_e_dp;   // 3 n_e x n_p
  bool regularized = false;
};

inline EffectorWithGrad effector_with_grad(const CondensedWithGrad& c, const BlockMap& map,
                                           const Vec& delta_a) {
  int ne3 = 3 * map.n_e, na = map.n_a, n_p = static_cast<int>(c.dW_dp.size());
  Mat Wea = c.W.block(map.e_offset(), map.a_offset(), ne3, na);
  Mat Waa = c.W.block(map.a_offset(), map.a_offset(), na, na);
  EffectorWithGrad out;
  Eigen::FullPivLU<Mat> lu(Waa);
  if (!lu.isInvertible()) {
    Waa += 1e-10 * Mat::Identity(na, na);
    lu.compute(Waa);
    out.regularized = true;
  }
  Vec rhs = delta_a - c.delta_free.segment(map.a_offset(), na);
  Vec v = lu.solve(rhs);
  out.delta_e = Wea * v + c.delta_free.segment(map.e_offset(), ne3);
  out.ddelta_e_dp.resize(ne3, n_p);
  for (int k = 0; k < n_p; ++k) {
    const Mat& dW = c.dW_dp[static_cast<std::size_t>(k)];
    Mat dWea = dW.block(map.e_offset(), map.a_offset(), ne3, na);
    Mat dWaa = dW.block(map.a_offset(), map.a_offset(), na, na);
    Vec drhs = -c.ddf_dp.block(map.a_offset(), k, na, 1);
    Vec dv = lu.solve(drhs - dWaa * v);
    out.ddelta_e_dp.col(k) = dWea * v + Wea * dv + c.ddf_dp.block(map.e_offset(), k, ne3, 1);
  }
  return out;
}

// Rest position of the first effector node at design p, with its derivative.
// Parametric meshes are piecewise affine in the geometry parameters, so a
// small central difference recovers the exact derivative; mechanical
// parameters leave the geometry untouched.
inline Vec3 effector_rest_position(const DesignModels& dm, const Vec& p, Mat* dpos_dp = nullptr) {
  auto tip = [&](const Vec& q) {
    Robot r = apply_design(*dm.robot, dm.space, q);
    return Vec3(r.mesh.nodes[static_cast<std::size_t>(r.constraints.effectors.at(0).node)]);
  };
  Vec3 pos = tip(p);
  if (dpos_dp) {
    int n_p = static_cast<int>(p.size());
    dpos_dp->setZero(3, n_p);
    for (int k = 0; k < n_p; ++k) {
      const std::string& nm = dm.space.names[static_cast<std::size_t>(k)];
      if (nm == "young_modulus" || nm == "poisson_ratio") continue;
      double h = 1e-6 * std::max(1.0, std::abs(p[k]));
      Vec qp = p, qm = p;
      qp[k] += h;
      qm[k] -= h;
      dpos_dp->col(k) = (tip(qp) - tip(qm)) / (2.0 * h);
    }
  }
  return pos;
}

// ---------------------------------------------------------------------------
// Objectives. All return value + gradient with respect to p.
// ---------------------------------------------------------------------------

struct CalibrationObservation {
  Vec delta_a;       // prescribed actuator displacements, mm
  Vec delta_e_star;  // measured effector displacement, mm
};

// Sum of elementwise absolute deviations between predicted and observed
// effector displacements; subgradient 0 at exact zeros.
inline ObjectiveEval calibration_objective(const DesignModels& dm, const Vec& p,
                                           const std::vector<CalibrationObservation>& observations) {
  if (observations.empty()) throw ConfigError("calibration requires at least one observation");
  const BlockMap& map = dm.F->block_map;
  ObjectiveEval out;
  out.grad = Vec::Zero(p.size());
  for (const auto& obs : observations) {
    CondensedWithGrad c = predict_design_with_grad(dm, p, obs.delta_a);
    EffectorWithGrad e = effector_with_grad(c, map, obs.delta_a);
    out.regularized |= e.regularized;
    Vec r = e.delta_e - obs.delta_e_star;
    for (int i = 0; i < r.size(); ++i) {
      out.value += std::abs(r[i]);
      double s = r[i] > 0.0 ? 1.0 : (r[i] < 0.0 ? -1.0 : 0.0);
      out.grad += s * e.ddelta_e_dp.row(i).transpose();
    }
  }
  return out;
}

constexpr double kAlphaMax = 1.57;   // rad, maximum achievable bend angle
constexpr double kBetaMax = 10000.0; // N, unreachable grasp-force target

// Bend angle of the effector away from its rest axis:
// alpha = arccos(e_z(delta_a, p) / |e0(p)|) with e = rest position + predicted
// displacement and e0 the rest-state effector offset. O_dext = |alpha_max - alpha|.
inline ObjectiveEval dexterity_objective(const DesignModels& dm, const Vec& p, const Vec& delta_a) {
  const BlockMap& map = dm.F->block_map;
  if (map.n_e < 1) throw ConfigError("dexterity objective needs an effector");
  CondensedWithGrad c = predict_design_with_grad(dm, p, delta_a);
  EffectorWithGrad e = effector_with_grad(c, map, delta_a);

  Mat drest_dp;
  Vec3 rest = effector_rest_position(dm, p, &drest_dp);
  Vec3 e0 = rest + c.delta_free.segment<3>(map.e_offset());
  double n0 = e0.norm();
  if (n0 <= 0.0) throw ConfigError("dexterity objective: zero rest effector offset");
  Mat de0_dp = drest_dp + c.ddf_dp.middleRows(map.e_offset(), 3);
  Vec dn0_dp = de0_dp.transpose() * (e0 / n0);

  double ez = rest.z() + e.delta_e[2];
  Vec dez_dp = drest_dp.row(2).transpose() + e.ddelta_e_dp.row(2).transpose();

  double u = ez / n0;
  Vec du_dp = dez_dp / n0 - (ez / (n0 * n0)) * dn0_dp;
  ObjectiveEval out;
  out.regularized = e.regularized;
  const double guard = 1.0 - 1e-9;
  if (std::abs(u) > guard) {
    u = std::clamp(u, -guard, guard);
    du_dp.setZero();
    out.clamped = true;
  }
  double alpha = std::acos(u);
  Vec dalpha_dp = -du_dp / std::sqrt(1.0 - u * u);
  double diff = kAlphaMax - alpha;
  double s = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
  out.value = std::abs(diff);
  out.grad = -s * dalpha_dp;
  return out;
}

// Contact force of a pinned object (delta_c = 0):
//   lambda_c = B^-1 [W_ca W_aa^-1 (delta_a - delta_a_free) + delta_c_free],
//   B = W_ca W_aa^-1 W_ac - W_cc.
// beta is the magnitude of the chosen world-frame component of lambda_c;
// O_str = |beta_max - beta|.
inline ObjectiveEval strength_objective(const DesignModels& dm, const Vec& p, const Vec& delta_a,
                                        int lambda_c_component = 1) {
  const BlockMap& map = dm.F->block_map;
  if (map.m_c <= lambda_c_component) throw ConfigError("strength objective: contact row out of range");
  CondensedWithGrad c = predict_design_with_grad(dm, p, delta_a);
  int na = map.n_a, mc = map.m_c, n_p = static_cast<int>(p.size());

  Mat Waa = c.W.block(map.a_offset(), map.a_offset(), na, na);
  Mat Wac = c.W.block(map.a_offset(), map.c_offset(), na, mc);
  Mat Wca = c.W.block(map.c_offset(), map.a_offset(), mc, na);
  Mat Wcc = c.W.block(map.c_offset(), map.c_offset(), mc, mc);
  Vec dfa = c.delta_free.segment(map.a_offset(), na);
  Vec dfc = c.delta_free.segment(map.c_offset(), mc);

  ObjectiveEval out;
  Eigen::FullPivLU<Mat> lu_aa(Waa);
  if (!lu_aa.isInvertible()) {
    lu_aa.compute(Waa + 1e-10 * Mat::Identity(na, na));
    out.regularized = true;
  }
  Vec v = lu_aa.solve(delta_a - dfa);  // W_aa^-1 (delta_a - delta_a_free)
  Mat AinvWac = lu_aa.solve(Wac);
  Mat B = Wca * AinvWac - Wcc;
  Eigen::FullPivLU<Mat> lu_b(B);
  Eigen::JacobiSVD<Mat> svd(B);
  double cond = svd.singularValues()(0) / std::max(svd.singularValues().tail(1)(0), 1e-300);
  if (!lu_b.isInvertible() || cond > 1e12) {
    lu_b.compute(B + 1e-10 * Mat::Identity(mc, mc));
    out.regularized = true;
  }
  Vec u = Wca * v + dfc;
  Vec lambda_c = lu_b.solve(u);

  out.grad = Vec::Zero(n_p);
  for (int k = 0; k < n_p; ++k) {
    const Mat& dW = c.dW_dp[static_cast<std::size_t>(k)];
    Mat dWaa = dW.block(map.a_offset(), map.a_offset(), na, na);
    Mat dWac = dW.block(map.a_offset(), map.c_offset(), na, mc);
    Mat dWca = dW.block(map.c_offset(), map.a_offset(), mc, na);
    Mat dWcc = dW.block(map.c_offset(), map.c_offset(), mc, mc);
    Vec ddfa = c.ddf_dp.block(map.a_offset(), k, na, 1);
    Vec ddfc = c.ddf_dp.block(map.c_offset(), k, mc, 1);

    // d(W_aa^-1 x) = W_aa^-1 (dx - dW_aa W_aa^-1 x)
    Vec dv = lu_aa.solve(-ddfa - dWaa * v);
    Mat dAinvWac = lu_aa.solve(dWac - dWaa * AinvWac);
    Mat dB = dWca * AinvWac + Wca * dAinvWac - dWcc;
    Vec du = dWca * v + Wca * dv + ddfc;
    Vec dlc = lu_b.solve(du - dB * lambda_c);
    double lc = lambda_c[lambda_c_component];
    double s_beta = lc > 0.0 ? 1.0 : (lc < 0.0 ? -1.0 : 0.0);
    double dbeta = s_beta * dlc[lambda_c_component];
    // beta < beta_max always, so O = beta_max - beta and dO = -dbeta.
    out.grad[k] = -dbeta;
  }
  double beta = std::abs(lambda_c[lambda_c_component]);
  out.value = std::abs(kBetaMax - beta);
  return out;
}

// ---------------------------------------------------------------------------
// Normalization, grid search, descent, Pareto front.
// ---------------------------------------------------------------------------

// Wraps an objective with the grid normalization (O - min) / (max - min).
inline Objective normalize_objective(Objective base, double grid_min, double grid_max) {
  if (!(grid_max > grid_min)) throw ConfigError("degenerate normalization: max must exceed min");
  double range = grid_max - grid_min;
  return [base = std::move(base), grid_min, range](const Vec& p) {
    ObjectiveEval e = base(p);
    e.value = (e.value - grid_min) / range;
    e.grad /= range;
    return e;
  };
}

struct GridPoint {
  Vec p;
  double value = 0.0;
};

struct GridResult {
  std::vector<GridPoint> table;
  std::vector<int> axis_counts;
  Vec best_p;
  double best_value = 0.0;
};

namespace detail {

// Balanced factorization of the evaluation budget into per-axis counts so the
// grid holds exactly `budget` points (e.g. 600 over 3 axes -> 10 x 10 x 6).
inline std::vector<int> balanced_axis_counts(int budget, int axes) {
  std::vector<int> primes;
  int rem = budget;
  for (int f = 2; f * f <= rem; ++f)
    while (rem % f == 0) {
      primes.push_back(f);
      rem /= f;
    }
  if (rem > 1) primes.push_back(rem);
  std::sort(primes.rbegin(), primes.rend());
  std::vector<int> counts(static_cast<std::size_t>(axes), 1);
  for (int f : primes) *std::min_element(counts.begin(), counts.end()) *= f;
  std::sort(counts.rbegin(), counts.rend());
  return counts;
}

}  // namespace detail

inline GridResult grid_search(const DesignSpace& space, const Objective& objective, int budget,
                              int threads = 1) {
  space.validate();
  int axes = static_cast<int>(space.names.size());
  if (budget < 1) throw ConfigError("grid budget must be positive");
  GridResult out;
  out.axis_counts = detail::balanced_axis_counts(budget, axes);
  out.table.resize(static_cast<std::size_t>(budget));

  auto point_at = [&](std::size_t flat) {
    Vec p(axes);
    std::size_t rest = flat;
    for (int a = 0; a < axes; ++a) {
      int k = out.axis_counts[static_cast<std::size_t>(a)];
      int idx = static_cast<int>(rest % static_cast<std::size_t>(k));
      rest /= static_cast<std::size_t>(k);
      double t = k > 1 ? static_cast<double>(idx) / (k - 1) : 0.5;
      p[a] = space.lo[a] + t * (space.hi[a] - space.lo[a]);
    }
    return p;
  };

  parallel_for(static_cast<std::size_t>(budget), threads, [&](std::size_t i) {
    GridPoint gp;
    gp.p = point_at(i);
    gp.value = objective(gp.p).value;
    out.table[i] = std::move(gp);
  });

  std::size_t best = 0;
  for (std::size_t i = 1; i < out.table.size(); ++i)
    if (out.table[i].value < out.table[best].value) best = i;
  out.best_p = out.table[best].p;
  out.best_value = out.table[best].value;
  return out;
}

inline void write_grid_csv(const GridResult& grid, const DesignSpace& space,
                           const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for write: " + path);
  out.precision(17);
  for (const auto& nm : space.names) out << nm << ",";
  out << "objective\n";
  for (const auto& gp : grid.table) {
    for (int i = 0; i < gp.p.size(); ++i) out << gp.p[i] << ",";
    out << gp.value << "\n";
  }
}

struct DescentConfig {
  double learning_rate = 0.01;
  int max_iters = 10000;
  double grad_tol = 1e-8;
  double change_tol = 1e-10;
  int max_halvings = 60;
  Vec lo, hi;  // projection bounds
};

struct DescentIterate {
  Vec p;
  double value = 0.0;
  double grad_norm = 0.0;
  double learning_rate = 0.0;
};

struct OptimizationReport {
  std::vector<DescentIterate> history;
  Vec p_star;
  double value = 0.0;
  bool converged = false;
  bool stalled = false;
};

// Projected gradient descent with a halve-on-increase retry rule; the
// objective history is monotone non-increasing by construction.
inline OptimizationReport gradient_descent(const Objective& objective, const Vec& p0,
                                           const DescentConfig& config) {
  if (config.lo.size() != p0.size() || config.hi.size() != p0.size())
    throw ConfigError("descent bounds dimension mismatch");
  auto project = [&](Vec p) { return Vec(p.cwiseMax(config.lo).cwiseMin(config.hi)); };

  OptimizationReport report;
  Vec p = project(p0);
  ObjectiveEval cur = objective(p);
  double lr = config.learning_rate;
  report.history.push_back({p, cur.value, cur.grad.norm(), lr});
  for (int it = 0; it < config.max_iters; ++it) {
    if (cur.grad.norm() <= config.grad_tol) {
      report.converged = true;
      break;
    }
    ObjectiveEval next;
    Vec p_next;
    bool accepted = false;
    for (int h = 0; h < config.max_halvings; ++h) {
      p_next = project(p - lr * cur.grad);
      next = objective(p_next);
      if (next.value <= cur.value) {
        accepted = true;
        break;
      }
      lr *= 0.5;
    }
    if (!accepted) {
      report.stalled = true;
      break;
    }
    double change = cur.value - next.value;
    p = p_next;
    cur = next;
    report.history.push_back({p, cur.value, cur.grad.norm(), lr});
    if (change <= config.change_tol) {
      report.converged = true;
      break;
    }
  }
  report.p_star = p;
  report.value = cur.value;
  return report;
}

inline void write_descent_json(const OptimizationReport& report, const std::string& path) {
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& it : report.history)
    hist.push_back({{"p", std::vector<double>(it.p.begin(), it.p.end())},
                    {"objective", it.value},
                    {"grad_norm", it.grad_norm},
                    {"learning_rate", it.learning_rate}});
  nlohmann::json j = {{"history", hist},
                      {"p_star", std::vector<double>(report.p_star.begin(), report.p_star.end())},
                      {"objective", report.value},
                      {"converged", report.converged},
                      {"stalled", report.stalled}};
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for write: " + path);
  out << j.dump(2) << "\n";
}

// Indices of the non-dominated points (both objectives minimized), sorted by
// the first objective.
inline std::vector<int> pareto_front(const std::vector<std::pair<double, double>>& points) {
  std::vector<int> idx(points.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    const auto& pa = points[static_cast<std::size_t>(a)];
    const auto& pb = points[static_cast<std::size_t>(b)];
    if (pa.first != pb.first) return pa.first < pb.first;
    if (pa.second != pb.second) return pa.second < pb.second;
    return a < b;  // deterministic order among exact duplicates
  });
  std::vector<int> front;
  double best_second = std::numeric_limits<double>::infinity();
  for (int i : idx) {
    const auto& pt = points[static_cast<std::size_t>(i)];
    bool dominated = pt.second > best_second ||
                     (!front.empty() && pt.second == best_second &&
                      points[static_cast<std::size_t>(front.back())].first < pt.first);
    if (!dominated) {
      front.push_back(i);
      best_second = pt.second;
    }
  }
  return front;
}

// Weighted multi-objective of two (normalized) objectives, Eq-21 style.
inline Objective weighted_multi_objective(Objective o1, Objective o2, double gamma1, double gamma2) {
  if (gamma1 < 0.0 || gamma1 > 1.0 || gamma2 < 0.0 || gamma2 > 1.0)
    throw ConfigError("weights must lie in [0, 1]");
  if (gamma1 == 0.0 && gamma2 == 0.0) throw ConfigError("at least one weight must be positive");
  return [o1 = std::move(o1), o2 = std::move(o2), gamma1, gamma2](const Vec& p) {
    ObjectiveEval a = o1(p);
    ObjectiveEval b = o2(p);
    ObjectiveEval out;
    out.value = gamma1 * a.value + gamma2 * b.value;
    out.grad = gamma1 * a.grad + gamma2 * b.grad;
    out.clamped = a.clamped || b.clamped;
    out.regularized = a.regularized || b.regularized;
    return out;
  };
}

}  // namespace condfem
