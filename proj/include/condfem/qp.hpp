#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "condfem/common.hpp"
#include "condfem/fem.hpp"

namespace condfem {

// ---------------------------------------------------------------------------
// Box-constrained QP with a few general linear inequalities:
//   minimize  1/2 l^T Q l + q^T l
//   subject to  lb <= l <= ub,  G l <= h
// Problem sizes are tiny (actuator counts <= 6), so the solver is a plain
// primal active-set method built for robustness rather than speed.
// ---------------------------------------------------------------------------

struct QpProblem {
  Mat Q;   // symmetric PSD
  Vec q;
  Vec lb;  // elementwise lower bounds (-inf allowed)
  Vec ub;  // elementwise upper bounds (+inf allowed)
  Mat G;   // general inequalities G l <= h; 0 rows = none
  Vec h;

  int dim() const { return static_cast<int>(q.size()); }

  void validate() const {
    int n = dim();
    if (Q.rows() != n || Q.cols() != n) throw ConfigError("QpProblem: Q dimension mismatch");
    if (lb.size() != n || ub.size() != n) throw ConfigError("QpProblem: bound dimension mismatch");
    if ((Q - Q.transpose()).cwiseAbs().maxCoeff() > 1e-9 * std::max(1.0, Q.cwiseAbs().maxCoeff()))
      throw ConfigError("QpProblem: Q not symmetric");
    for (int i = 0; i < n; ++i)
      if (!(lb[i] <= ub[i])) throw ConfigError("QpProblem: lb > ub at index " + std::to_string(i));
    if (G.rows() != h.size()) throw ConfigError("QpProblem: G/h row mismatch");
    if (G.rows() > 0 && G.cols() != n) throw ConfigError("QpProblem: G column mismatch");
  }
};

// Active-set entries: i in [0,n) = lower bound i, [n,2n) = upper bound i-n,
// [2n,2n+m) = general inequality row i-2n.
struct QpSolution {
  Vec lambda;
  double objective = 0.0;
  double kkt_residual = 0.0;  // max of stationarity, feasibility and slackness violations
  std::vector<int> active_set;
  int iterations = 0;
  bool converged = false;
  bool regularized = false;  // Q was singular and got a 1e-10 ridge
};

namespace detail {

// Rows of all inequality constraints written as a^T l <= b.
inline void constraint_row(const QpProblem& p, int idx, Vec& a, double& b) {
  int n = p.dim();
  a.setZero(n);
  if (idx < n) {
    a[idx] = -1.0;
    b = -p.lb[idx];
  } else if (idx < 2 * n) {
    a[idx - n] = 1.0;
    b = p.ub[idx - n];
  } else {
    a = p.G.row(idx - 2 * n).transpose();
    b = p.h[idx - 2 * n];
  }
}

// Alternating projection onto the box and the violated half-spaces. The
// feasible set is a convex polytope, so this converges whenever it is
// nonempty; the start point for the active-set loop only needs to be
// feasible, not optimal.
inline Vec feasible_start(const QpProblem& p) {
  int n = p.dim();
  Vec l = Vec::Zero(n).cwiseMax(p.lb).cwiseMin(p.ub);
  if (p.G.rows() == 0) return l;
  for (int it = 0; it < 2000; ++it) {
    Vec slack = p.G * l - p.h;
    int worst = 0;
    double v = slack.maxCoeff(&worst);
    if (v <= 1e-12) return l;
    Vec g = p.G.row(worst).transpose();
    double gn2 = g.squaredNorm();
    if (gn2 <= 0.0) throw ConfigError("QpProblem: zero general-constraint row with positive bound violation");
    l -= (v / gn2) * g;
    l = l.cwiseMax(p.lb).cwiseMin(p.ub);
  }
  throw NumericalError("QP: could not find a feasible start (constraints likely inconsistent)");
}

}  // namespace detail

inline QpSolution solve_box_qp(const QpProblem& problem) {
  problem.validate();
  const int n = problem.dim();
  const int m = static_cast<int>(problem.G.rows());
  const int n_con = 2 * n + m;

  QpSolution sol;
  Mat Q = 0.5 * (problem.Q + problem.Q.transpose());
  {
    Eigen::LLT<Mat> llt(Q);
    if (llt.info() != Eigen::Success) {
      Q += 1e-10 * Mat::Identity(n, n);  // singular Q: ridge keeps the subproblems
      sol.regularized = true;            // well-posed and tie-breaks to small-norm l
    }
  }

  Vec l = detail::feasible_start(problem);
  std::vector<int> work;  // working set of active inequality indices
  Vec a(n);
  double b = 0.0;
  for (int c = 0; c < n_con; ++c) {
    detail::constraint_row(problem, c, a, b);
    if (std::abs(a.dot(l) - b) <= 1e-12 * std::max(1.0, std::abs(b))) {
      // Only keep rows that are independent of the working set so the KKT
      // system below stays nonsingular.
      Mat A(static_cast<int>(work.size()) + 1, n);
      for (std::size_t k = 0; k < work.size(); ++k) {
        Vec ak(n);
        double bk;
        detail::constraint_row(problem, work[k], ak, bk);
        A.row(static_cast<int>(k)) = ak.transpose();
      }
      A.row(static_cast<int>(work.size())) = a.transpose();
      if (Eigen::FullPivLU<Mat>(A).rank() == A.rows()) work.push_back(c);
    }
  }

  const int max_iters = 50 * (n_con + 1);
  Vec mu;  // multipliers of the working set, sign convention g + A^T mu = 0, mu >= 0
  for (sol.iterations = 0; sol.iterations < max_iters; ++sol.iterations) {
    int w = static_cast<int>(work.size());
    Mat A(w, n);
    for (int k = 0; k < w; ++k) {
      detail::constraint_row(problem, work[k], a, b);
      A.row(k) = a.transpose();
    }
    Vec g = Q * l + problem.q;

    // Equality-constrained step: minimize the model over { p : A p = 0 }.
    Mat kkt(n + w, n + w);
    kkt.setZero();
    kkt.topLeftCorner(n, n) = Q;
    if (w > 0) {
      kkt.topRightCorner(n, w) = A.transpose();
      kkt.bottomLeftCorner(w, n) = A;
    }
    Vec rhs(n + w);
    rhs.head(n) = -g;
    rhs.tail(w).setZero();
    Vec pv = Eigen::FullPivLU<Mat>(kkt).solve(rhs);
    Vec p = pv.head(n);
    mu = pv.tail(w);

    if (p.lpNorm<Eigen::Infinity>() <= 1e-12 * std::max(1.0, l.lpNorm<Eigen::Infinity>())) {
      int drop = -1;
      double most_negative = -1e-12;
      for (int k = 0; k < w; ++k) {
        if (mu[k] < most_negative) {
          most_negative = mu[k];
          drop = k;
        }
      }
      if (drop < 0) {
        sol.converged = true;
        break;
      }
      work.erase(work.begin() + drop);
      continue;
    }

    // Step length limited by the nearest blocking constraint.
    double alpha = 1.0;
    int blocking = -1;
    for (int c = 0; c < n_con; ++c) {
      if (std::find(work.begin(), work.end(), c) != work.end()) continue;
      detail::constraint_row(problem, c, a, b);
      double ap = a.dot(p);
      if (ap <= 1e-14) continue;
      double step = (b - a.dot(l)) / ap;
      if (step < alpha) {
        alpha = step;
        blocking = c;
      }
    }
    l += std::max(alpha, 0.0) * p;
    if (blocking >= 0) {
      // Land exactly on the blocking constraint before activating it.
      detail::constraint_row(problem, blocking, a, b);
      if (blocking < n) {
        l[blocking] = problem.lb[blocking];
      } else if (blocking < 2 * n) {
        l[blocking - n] = problem.ub[blocking - n];
      }
      work.push_back(blocking);
    }
    l = l.cwiseMax(problem.lb).cwiseMin(problem.ub);
  }

  sol.lambda = l;
  sol.active_set = work;
  sol.objective = 0.5 * l.dot(problem.Q * l) + problem.q.dot(l);

  // KKT residual from the final multipliers: stationarity, primal
  // feasibility, and complementary slackness.
  Vec g = Q * l + problem.q;
  Vec stat = g;
  double slackness = 0.0;
  for (std::size_t k = 0; k < work.size(); ++k) {
    detail::constraint_row(problem, work[k], a, b);
    double mk = (static_cast<int>(k) < mu.size()) ? mu[static_cast<int>(k)] : 0.0;
    stat += mk * a;
    slackness = std::max(slackness, std::abs(mk * (a.dot(l) - b)));
  }
  double feas = 0.0;
  for (int c = 0; c < n_con; ++c) {
    detail::constraint_row(problem, c, a, b);
    feas = std::max(feas, a.dot(l) - b);
  }
  sol.kkt_residual = std::max({stat.lpNorm<Eigen::Infinity>(), feas, slackness});
  return sol;
}

// ---------------------------------------------------------------------------
// Inverse problem: pick actuation forces that drive the effector toward a
// goal displacement, given a (predicted) condensed state.
// ---------------------------------------------------------------------------

struct ActuationLimits {
  Vec lambda_min;  // N, per actuator
  Vec lambda_max;  // N
  Vec delta_min;   // mm, actuator course limits; size 0 disables them
  Vec delta_max;   // mm
};

// goal is the desired effector displacement from rest (mm). Retargeting
// simply shifts the free effector displacement by -goal, so any goal change
// is a constant offset on the linear term.
inline QpProblem build_inverse_problem(const Mat& W, const Vec& delta_free, const BlockMap& map,
                                       const Vec& goal, const ActuationLimits& limits,
                                       const Vec& lambda_c_fixed = Vec(0)) {
  int ne3 = 3 * map.n_e;
  if (W.rows() != delta_free.size() || delta_free.size() != map.size())
    throw ConfigError("build_inverse_problem: condensed state dimension mismatch");
  if (goal.size() != ne3) throw ConfigError("build_inverse_problem: goal dimension mismatch");
  if (limits.lambda_min.size() != map.n_a || limits.lambda_max.size() != map.n_a)
    throw ConfigError("build_inverse_problem: actuation bound dimension mismatch");
  Vec lc = lambda_c_fixed;
  if (lc.size() == 0) lc = Vec::Zero(map.m_c);
  if (lc.size() != map.m_c) throw ConfigError("build_inverse_problem: lambda_c dimension mismatch");

  Mat Wea = W.block(map.e_offset(), map.a_offset(), ne3, map.n_a);
  Mat Wec = W.block(map.e_offset(), map.c_offset(), ne3, map.m_c);
  Vec de_free = delta_free.segment(map.e_offset(), ne3);

  QpProblem p;
  Vec r = Wec * lc + de_free - goal;  // effector residual at lambda_a = 0
  p.Q = 2.0 * Wea.transpose() * Wea;
  p.q = 2.0 * Wea.transpose() * r;
  p.lb = limits.lambda_min;
  p.ub = limits.lambda_max;

  if (limits.delta_min.size() > 0) {
    if (limits.delta_min.size() != map.n_a || limits.delta_max.size() != map.n_a)
      throw ConfigError("build_inverse_problem: course limit dimension mismatch");
    Mat Waa = W.block(map.a_offset(), map.a_offset(), map.n_a, map.n_a);
    Mat Wac = W.block(map.a_offset(), map.c_offset(), map.n_a, map.m_c);
    Vec c = Wac * lc + delta_free.segment(map.a_offset(), map.n_a);
    p.G.resize(2 * map.n_a, map.n_a);
    p.h.resize(2 * map.n_a);
    p.G.topRows(map.n_a) = Waa;
    p.h.head(map.n_a) = limits.delta_max - c;
    p.G.bottomRows(map.n_a) = -Waa;
    p.h.tail(map.n_a) = c - limits.delta_min;
  } else {
    p.G.resize(0, map.n_a);
    p.h.resize(0);
  }
  return p;
}

inline QpProblem build_inverse_problem(const CondensedState& cs, const Vec& goal,
                                       const ActuationLimits& limits, const Vec& lambda_c_fixed = Vec(0)) {
  return build_inverse_problem(cs.W, cs.delta_free, cs.map, goal, limits, lambda_c_fixed);
}

// Residual of 0 <= delta_c  perp  lambda_c >= 0; zero iff complementarity
// holds exactly.
inline double complementarity_residual(const Vec& delta_c, const Vec& lambda_c) {
  if (delta_c.size() != lambda_c.size())
    throw ConfigError("complementarity_residual: dimension mismatch");
  double r = 0.0;
  for (int i = 0; i < delta_c.size(); ++i) {
    r = std::max(r, std::abs(std::min(delta_c[i], 0.0)));
    r = std::max(r, std::abs(std::min(lambda_c[i], 0.0)));
    r = std::max(r, std::abs(delta_c[i] * lambda_c[i]));
  }
  return r;
}

// Debug dump / replay of QP instances.
inline void save_qp(const QpProblem& p, const std::string& path) {
  auto mat = [](const Mat& M) {
    std::vector<std::vector<double>> rows;
    for (int i = 0; i < M.rows(); ++i)
      rows.emplace_back(M.row(i).begin(), M.row(i).end());
    return rows;
  };
  nlohmann::json j = {
      {"format", "condensed-fem-qp-v1"},
      {"Q", mat(p.Q)},
      {"q", std::vector<double>(p.q.begin(), p.q.end())},
      {"lb", std::vector<double>(p.lb.begin(), p.lb.end())},
      {"ub", std::vector<double>(p.ub.begin(), p.ub.end())},
      {"G", mat(p.G)},
      {"h", std::vector<double>(p.h.begin(), p.h.end())},
  };
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for write: " + path);
  out << j.dump(2) << "\n";
}

inline QpProblem load_qp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open for read: " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  if (j.value("format", "") != std::string("condensed-fem-qp-v1"))
    throw ConfigError("unrecognized QP file format: " + path);
  auto vec = [](const nlohmann::json& a) {
    Vec v(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<int>(i)] = a[i].get<double>();
    return v;
  };
  auto mat = [&](const nlohmann::json& a, int cols_hint) {
    int rows = static_cast<int>(a.size());
    int cols = rows > 0 ? static_cast<int>(a[0].size()) : cols_hint;
    Mat M(rows, cols);
    for (int i = 0; i < rows; ++i) M.row(i) = vec(a[static_cast<std::size_t>(i)]).transpose();
    return M;
  };
  QpProblem p;
  p.Q = mat(j.at("Q"), 0);
  p.q = vec(j.at("q"));
  p.lb = vec(j.at("lb"));
  p.ub = vec(j.at("ub"));
  p.G = mat(j.at("G"), p.dim());
  p.h = vec(j.at("h"));
  p.validate();
  return p;
}

}  // namespace condfem
