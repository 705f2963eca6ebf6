#pragma once

#include <chrono>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "condfem/mlp.hpp"
#include "condfem/qp.hpp"
#include "condfem/robot.hpp"

namespace condfem {

// ---------------------------------------------------------------------------
// Control loops on predicted condensed states: open/closed-loop trajectory
// tracking with the sensor-minimal observer, and the staggered cube
// manipulation update for button and gripper scenarios. The ground-truth
// plant is the full FEM solver (sim-to-sim).
// ---------------------------------------------------------------------------

struct PiGains {
  double kp = 0.01;
  double ki = 0.002;
};

struct Trajectory {
  std::vector<Vec> goals;  // effector displacement goals (3*n_e each), mm
  int steps_per_goal = 1;
};

// Source of condensed states for the controller: either the learned model or
// the FEM itself (the "FEM matrices in the loop" baseline).
using CondensedProvider = std::function<CondensedPrediction(const Vec& delta_a, const Vec& delta_c)>;

inline CondensedProvider provider_from_model(const MlpModel& model, Vec w0_tri = Vec(0),
                                             Vec delta_free0 = Vec(0)) {
  return [&model, w0_tri = std::move(w0_tri), delta_free0 = std::move(delta_free0)](
             const Vec& delta_a, const Vec& delta_c) {
    return predict_condensed(model, delta_a, delta_c, w0_tri, delta_free0);
  };
}

// Ground-truth provider: drives the FEM to the requested actuator (and
// contact) displacements and condenses there. Expensive; used as baseline.
inline CondensedProvider provider_from_fem(const FemSystem& sys, const ConstraintSet& constraints,
                                           Vec f_ext) {
  return [&sys, &constraints, f_ext = std::move(f_ext)](const Vec& delta_a, const Vec& delta_c) {
    const Vec* dc = delta_c.size() > 0 ? &delta_c : nullptr;
    auto drive = sys.drive_to_displacement(constraints, delta_a, f_ext, dc);
    return CondensedPrediction{drive.condensed.W, drive.condensed.delta_free};
  };
}

inline ActuationLimits limits_from_constraints(const ConstraintSet& cs) {
  ActuationLimits lim;
  lim.lambda_min = cs.actuator_lambda_min();
  lim.lambda_max = cs.actuator_lambda_max();
  lim.delta_min = cs.actuator_delta_min();
  lim.delta_max = cs.actuator_delta_max();
  return lim;
}

// One-step-delayed actuator displacement estimate from the previous
// prediction; replaces actuator-side sensing.
inline Vec observer_update(const Mat& W_prev, const Vec& delta_free_prev, const BlockMap& map,
                           const Vec& lambda_a) {
  Mat Waa = W_prev.block(map.a_offset(), map.a_offset(), map.n_a, map.n_a);
  return Waa * lambda_a + delta_free_prev.segment(map.a_offset(), map.n_a);
}

struct ControlStep {
  Vec lambda_a;
  Vec predicted_delta_e;
  bool qp_converged = true;
  double wall_us = 0.0;  // controller-side cost: model query + QP
};

class Controller {
 public:
  Controller(CondensedProvider provider, BlockMap map, ActuationLimits limits,
             PiGains gains = {}, double workspace_diameter = 100.0)
      : provider_(std::move(provider)),
        map_(map),
        limits_(std::move(limits)),
        gains_(gains),
        windup_clamp_(workspace_diameter) {
    reset();
  }

  // Algorithm start: zero actuation, observer at the free-motion actuator
  // displacement of the rest prediction.
  void reset() {
    lambda_a_ = Vec::Zero(map_.n_a);
    delta_c_ = Vec::Zero(map_.m_c);
    CondensedPrediction rest = provider_(Vec::Zero(map_.n_a), delta_c_);
    W_prev_ = rest.W;
    delta_free_prev_ = rest.delta_free;
    delta_a_ = delta_free_prev_.segment(map_.a_offset(), map_.n_a);
    integral_error_ = Vec::Zero(3 * map_.n_e);
    step_index_ = 0;
  }

  ControlStep open_loop_step(const Vec& goal) {
    auto t0 = std::chrono::steady_clock::now();
    ControlStep out;
    CondensedPrediction pred = provider_(delta_a_, delta_c_);
    QpProblem qp = build_inverse_problem(pred.W, pred.delta_free, map_, goal, limits_);
    QpSolution sol = solve_box_qp(qp);
    if (sol.converged) {
      lambda_a_ = sol.lambda;
    }
    out.qp_converged = sol.converged;  // on failure the previous lambda_a is held
    out.lambda_a = lambda_a_;
    delta_a_ = observer_update(pred.W, pred.delta_free, map_, lambda_a_);
    Mat Wea = pred.W.block(map_.e_offset(), map_.a_offset(), 3 * map_.n_e, map_.n_a);
    out.predicted_delta_e = Wea * lambda_a_ + pred.delta_free.segment(map_.e_offset(), 3 * map_.n_e);
    W_prev_ = pred.W;
    delta_free_prev_ = pred.delta_free;
    ++step_index_;
    out.wall_us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
    return out;
  }

  ControlStep closed_loop_step(const Vec& goal, const Vec& measured_effector) {
    Vec e = goal - measured_effector;
    integral_error_ += e;
    integral_error_ = integral_error_.cwiseMax(-windup_clamp_).cwiseMin(windup_clamp_);
    Vec corrected = goal + gains_.kp * e + gains_.ki * integral_error_;
    return open_loop_step(corrected);
  }

  const Vec& lambda_a() const { return lambda_a_; }
  const Vec& observed_delta_a() const { return delta_a_; }
  const Vec& integral_error() const { return integral_error_; }
  const BlockMap& map() const { return map_; }
  int step_index() const { return step_index_; }

 private:
  CondensedProvider provider_;
  BlockMap map_;
  ActuationLimits limits_;
  PiGains gains_;
  double windup_clamp_;
  Vec lambda_a_, delta_a_, delta_c_;
  Mat W_prev_;
  Vec delta_free_prev_;
  Vec integral_error_;
  int step_index_ = 0;
};

// Ground-truth plant: applies actuation forces to the FEM and reports the
// measured constraint-space displacements. Warm-started from the last state.
class FemPlant {
 public:
  FemPlant(const FemSystem& sys, const ConstraintSet& constraints, Vec f_ext)
      : sys_(&sys), constraints_(&constraints), f_ext_(std::move(f_ext)), x_(sys.rest_positions()) {}

  Vec apply(const Vec& lambda_a, const Vec& lambda_c = Vec(0)) {
    auto t0 = std::chrono::steady_clock::now();
    BlockMap bm = constraints_->block_map();
    Vec lc = lambda_c.size() > 0 ? lambda_c : Vec::Zero(bm.m_c);
    auto eq = sys_->solve_equilibrium(x_, *constraints_, lambda_a, lc, f_ext_);
    x_ = eq.state.x;
    last_wall_us_ = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
    return eq.delta;
  }

  Vec measured_delta_e() const {
    BlockMap bm = constraints_->block_map();
    return constraints_->delta(x_).segment(bm.e_offset(), 3 * bm.n_e);
  }

  void set_external_force(Vec f_ext) { f_ext_ = std::move(f_ext); }
  const Vec& external_force() const { return f_ext_; }
  const Vec& state() const { return x_; }
  double last_wall_us() const { return last_wall_us_; }

 private:
  const FemSystem* sys_;
  const ConstraintSet* constraints_;
  Vec f_ext_;
  Vec x_;
  double last_wall_us_ = 0.0;
};

// ---------------------------------------------------------------------------
// Cube manipulation: fixed contact points, staggered lambda_a / lambda_c
// update, translation-only goal tracking.
// ---------------------------------------------------------------------------

struct CubeState {
  Vec X = Vec::Zero(6);               // pose displacement: translation mm + rotation rad
  Vec3 center = Vec3::Zero();         // current cube center, mm
  std::vector<Vec3> contact_points;   // current world contact positions
  std::vector<Vec3> contact_rest;     // initial world contact positions
  std::vector<Vec3> contact_dirs;     // unit row direction per scalar contact row
                                      // (points from the cube toward the finger)
  Vec lambda_c;                       // N, one per scalar row
  Vec f_cube = Vec::Zero(6);          // external wrench on the cube (N, N*mm)

  int rows() const { return static_cast<int>(contact_dirs.size()); }

  // Kinematic map from pose increments to scalar contact-row displacements:
  // row i = [dir_i^T, (r_i x dir_i)^T] with r_i the lever arm from the center.
  Mat Jn() const {
    Mat J(rows(), 6);
    for (int i = 0; i < rows(); ++i) {
      Vec3 r = contact_points[static_cast<std::size_t>(i)] - center;
      J.block<1, 3>(i, 0) = contact_dirs[static_cast<std::size_t>(i)].transpose();
      J.block<1, 3>(i, 3) = r.cross(contact_dirs[static_cast<std::size_t>(i)]).transpose();
    }
    return J;
  }

  // Scalar contact displacement of the cube side, measured from the rest
  // contact positions along each row direction.
  Vec delta_c_cube() const {
    Vec d(rows());
    for (int i = 0; i < rows(); ++i)
      d[i] = contact_dirs[static_cast<std::size_t>(i)]
                 .dot(contact_points[static_cast<std::size_t>(i)] - contact_rest[static_cast<std::size_t>(i)]);
    return d;
  }
};

// Linearized rigid update of the contact points for a new pose.
inline void cube_kinematics(CubeState& cube, const Vec& X_new) {
  Vec dX = X_new - cube.X;
  Vec3 t = dX.head<3>();
  Vec3 w = dX.tail<3>();
  for (auto& p : cube.contact_points) p += t + w.cross(p - cube.center);
  cube.center += t;
  cube.X = X_new;
}

struct ManipulationStep {
  Vec lambda_a;
  Vec lambda_c;
  Vec X_cube;
  double complementarity = 0.0;
  bool qp_converged = true;
  bool regularized = false;  // singular 6x6 cube system solved by pseudo-inverse
  int inner_iterations = 1;
};

struct ManipulationOptions {
  int max_inner = 1;          // >1 enables the optional fixed-point inner loop
  double inner_tol = 1e-8;    // pose change tolerance for the inner loop
};

// One staggered manipulation update: (1) pick lambda_a minimizing the cube's
// translation error under the affine pose map X = A lambda_a + B obtained by
// eliminating lambda_c through the cube equilibrium; (2) update lambda_c from
// the third row of the condensed relation at the new cube pose.
inline ManipulationStep manipulation_step(const CondensedProvider& provider, const BlockMap& map,
                                          const ActuationLimits& limits, CubeState& cube,
                                          Vec& delta_a_obs, const Vec3& goal_translation,
                                          const ManipulationOptions& opts = {}) {
  ManipulationStep out;
  int m = cube.rows();
  if (map.m_c != m) throw ConfigError("manipulation_step: contact row count mismatch");
  if (cube.lambda_c.size() != m) cube.lambda_c = Vec::Zero(m);

  Vec X_before = cube.X;
  int max_inner = std::max(1, opts.max_inner);
  for (int inner = 0; inner < max_inner; ++inner) {
    out.inner_iterations = inner + 1;
    CondensedPrediction pred = provider(delta_a_obs, cube.delta_c_cube());
    Mat Wca = pred.W.block(map.c_offset(), map.a_offset(), m, map.n_a);
    Mat Wcc = pred.W.block(map.c_offset(), map.c_offset(), m, m);
    Vec dc_free = pred.delta_free.segment(map.c_offset(), m);
    Vec dc_prev = cube.delta_c_cube();

    // Cube equilibrium Jn^T lambda_c = f_cube with the sticking contact
    // relation lambda_c = Wcc^-1 (dc_prev + Jn dX - Wca lambda_a - dc_free)
    // eliminates lambda_c: M dX = f_cube + D (Wca lambda_a + dc_free - dc_prev).
    Mat Jn = cube.Jn();
    Mat D = Jn.transpose() * Wcc.ldlt().solve(Mat::Identity(m, m));
    Mat M = D * Jn;  // 6x6, rank-deficient when there are < 6 contact rows
    Eigen::CompleteOrthogonalDecomposition<Mat> cod(M);
    Mat Minv = cod.pseudoInverse();
    out.regularized = cod.rank() < 6;

    Mat A = Minv * (D * Wca);
    Vec B = cube.X + Minv * (cube.f_cube + D * (dc_free - dc_prev));

    // Translation-only tracking (rotation evolves freely).
    Mat SA = A.topRows(3);
    Vec SB = B.head(3);
    QpProblem qp;
    qp.Q = 2.0 * SA.transpose() * SA;
    qp.q = 2.0 * SA.transpose() * (SB - goal_translation);
    qp.lb = limits.lambda_min;
    qp.ub = limits.lambda_max;
    qp.G.resize(0, map.n_a);
    qp.h.resize(0);
    QpSolution sol = solve_box_qp(qp);
    out.qp_converged = sol.converged;
    Vec lambda_a = sol.converged ? sol.lambda : out.lambda_a;
    if (!sol.converged && out.lambda_a.size() == 0) lambda_a = Vec::Zero(map.n_a);

    Vec X_new = A * lambda_a + B;
    cube_kinematics(cube, X_new);

    // Stagger step 2: contact forces at the updated cube pose, clamped
    // non-adhesive; clamped rows open a nonnegative gap.
    Vec dc_cube = cube.delta_c_cube();
    Vec lc = Wcc.ldlt().solve(dc_cube - Wca * lambda_a - dc_free);
    lc = lc.cwiseMax(0.0);
    Vec gap = Wca * lambda_a + Wcc * lc + dc_free - dc_cube;
    out.complementarity = complementarity_residual(gap, lc);

    cube.lambda_c = lc;
    out.lambda_a = lambda_a;
    out.lambda_c = lc;
    out.X_cube = cube.X;
    delta_a_obs = observer_update(pred.W, pred.delta_free, map, lambda_a);

    if ((cube.X - X_before).lpNorm<Eigen::Infinity>() <= opts.inner_tol) break;
    X_before = cube.X;
  }
  return out;
}

// Block-diagonal assembly of several per-finger condensed states into one
// constraint space (gripper: three identical fingers around the cube).
inline CondensedProvider assemble_block_diagonal(std::vector<CondensedProvider> fingers,
                                                 std::vector<BlockMap> maps, BlockMap& assembled) {
  if (fingers.size() != maps.size() || fingers.empty())
    throw ConfigError("assemble_block_diagonal: provider/map count mismatch");
  assembled = BlockMap{};
  for (const auto& bm : maps) {
    assembled.n_e += bm.n_e;
    assembled.n_a += bm.n_a;
    assembled.m_c += bm.m_c;
  }
  BlockMap total = assembled;
  return [fingers = std::move(fingers), maps = std::move(maps), total](const Vec& delta_a,
                                                                       const Vec& delta_c) {
    CondensedPrediction out;
    out.W = Mat::Zero(total.size(), total.size());
    out.delta_free = Vec::Zero(total.size());
    int oe = 0, oa = 0, oc = 0;
    for (std::size_t f = 0; f < fingers.size(); ++f) {
      const BlockMap& bm = maps[f];
      CondensedPrediction p = fingers[f](delta_a.segment(oa, bm.n_a), delta_c.segment(oc, bm.m_c));
      int offs[3] = {total.e_offset() + oe, total.a_offset() + oa, total.c_offset() + oc};
      int foffs[3] = {bm.e_offset(), bm.a_offset(), bm.c_offset()};
      int sizes[3] = {3 * bm.n_e, bm.n_a, bm.m_c};
      for (int bi = 0; bi < 3; ++bi) {
        if (sizes[bi] == 0) continue;
        out.delta_free.segment(offs[bi], sizes[bi]) = p.delta_free.segment(foffs[bi], sizes[bi]);
        for (int bj = 0; bj < 3; ++bj)
          if (sizes[bj] > 0)
            out.W.block(offs[bi], offs[bj], sizes[bi], sizes[bj]) =
                p.W.block(foffs[bi], foffs[bj], sizes[bi], sizes[bj]);
      }
      oe += 3 * bm.n_e;
      oa += bm.n_a;
      oc += bm.m_c;
    }
    return out;
  };
}

// ---------------------------------------------------------------------------
// Trajectory harness: runs the controller against the FEM plant and writes
// CSV/JSON reports with per-step errors, timings and peak memory.
// ---------------------------------------------------------------------------

enum class ControlMode { open_loop, closed_loop };

struct TrajectoryRow {
  int step = 0;
  Vec goal;
  Vec reached;
  double error = 0.0;
  Vec lambda_a;
  double wall_us_controller = 0.0;
  double wall_us_plant = 0.0;
};

struct TrajectoryReport {
  std::vector<TrajectoryRow> rows;
  double max_error = 0.0;
  double mean_error = 0.0;
  int converged_step = -1;  // first step of a 10-step hold below 0.5 mm
  double speedup = 0.0;     // mean plant solve time / mean controller time
  std::uint64_t peak_rss_bytes = 0;
};

struct ConvergenceMonitor {
  double eps_mm = 0.5;
  int hold_steps = 10;
  int run = 0;
  int converged_step = -1;
  void update(int step, double error) {
    if (error < eps_mm) {
      if (++run >= hold_steps && converged_step < 0) converged_step = step - hold_steps + 1;
    } else {
      run = 0;
    }
  }
};

inline TrajectoryReport run_trajectory(FemPlant& plant, Controller& controller,
                                       const Trajectory& trajectory, ControlMode mode) {
  TrajectoryReport report;
  ConvergenceMonitor monitor;
  int step = 0;
  double sum_err = 0.0, sum_ctrl = 0.0, sum_plant = 0.0;
  for (const Vec& goal : trajectory.goals) {
    for (int rep = 0; rep < std::max(1, trajectory.steps_per_goal); ++rep) {
      ControlStep cs = mode == ControlMode::open_loop
                           ? controller.open_loop_step(goal)
                           : controller.closed_loop_step(goal, plant.measured_delta_e());
      plant.apply(cs.lambda_a);
      TrajectoryRow row;
      row.step = step++;
      row.goal = goal;
      row.reached = plant.measured_delta_e();
      row.error = (row.reached - goal).norm();
      row.lambda_a = cs.lambda_a;
      row.wall_us_controller = cs.wall_us;
      row.wall_us_plant = plant.last_wall_us();
      monitor.update(row.step, row.error);
      report.max_error = std::max(report.max_error, row.error);
      sum_err += row.error;
      sum_ctrl += row.wall_us_controller;
      sum_plant += row.wall_us_plant;
      report.rows.push_back(std::move(row));
    }
  }
  if (!report.rows.empty()) {
    report.mean_error = sum_err / static_cast<double>(report.rows.size());
    if (sum_ctrl > 0.0) report.speedup = sum_plant / sum_ctrl;
  }
  report.converged_step = monitor.converged_step;
  report.peak_rss_bytes = peak_rss_bytes();
  return report;
}

inline void write_trajectory_csv(const TrajectoryReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for write: " + path);
  out.precision(17);
  if (report.rows.empty()) {
    out << "step,error,wall_us_controller,wall_us_plant\n";
    return;
  }
  out << "step";
  for (int i = 0; i < report.rows[0].goal.size(); ++i) out << ",goal_" << i;
  for (int i = 0; i < report.rows[0].reached.size(); ++i) out << ",reached_" << i;
  out << ",error";
  for (int i = 0; i < report.rows[0].lambda_a.size(); ++i) out << ",lambda_a_" << i;
  out << ",wall_us_controller,wall_us_plant\n";
  for (const auto& r : report.rows) {
    out << r.step;
    for (int i = 0; i < r.goal.size(); ++i) out << "," << r.goal[i];
    for (int i = 0; i < r.reached.size(); ++i) out << "," << r.reached[i];
    out << "," << r.error;
    for (int i = 0; i < r.lambda_a.size(); ++i) out << "," << r.lambda_a[i];
    out << "," << r.wall_us_controller << "," << r.wall_us_plant << "\n";
  }
}

inline void write_trajectory_summary(const TrajectoryReport& report, const std::string& path,
                                     const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json j = {
      {"steps", report.rows.size()},
      {"max_error_mm", report.max_error},
      {"mean_error_mm", report.mean_error},
      {"converged_step", report.converged_step},
      {"speedup", report.speedup},
      {"peak_rss_bytes", report.peak_rss_bytes},
  };
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for write: " + path);
  out << j.dump(2) << "\n";
}

}  // namespace condfem
