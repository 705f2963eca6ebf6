#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "condfem/control.hpp"

using namespace condfem;

namespace {

Robot two_cable_finger() {
  nlohmann::json j = {
      {"name", "finger"},
      {"material", {{"young_modulus", 3000.0}, {"poisson_ratio", 0.3}}},
      {"mesh",
       {{"finger",
         {{"length", 40.0}, {"height", 21.0}, {"joint_height", 6.5}, {"resolution", "coarse"}}}}},
      {"actuators", {{{"cable_column", 0}}, {{"cable_column", 2}}}},
      {"effectors", {{{"node", "tip_center"}}}},
  };
  return robot_from_json(j);
}

// Synthetic linear "robot": a fixed condensed state, handy for fast loop tests.
CondensedProvider constant_provider(Mat W, Vec delta_free) {
  return [W = std::move(W), delta_free = std::move(delta_free)](const Vec&, const Vec&) {
    return CondensedPrediction{W, delta_free};
  };
}

Mat spd(int n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  Mat A(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) A(i, j) = gauss(rng);
  return A.transpose() * A + 0.2 * Mat::Identity(n, n);
}

}  // namespace

TEST_CASE("observer update basics and replay exactness") {
  BlockMap map;
  map.n_e = 1;
  map.n_a = 2;
  Vec delta_free = Vec::Zero(map.size());
  delta_free[map.a_offset()] = 0.7;
  delta_free[map.a_offset() + 1] = -0.2;
  Mat W = Mat::Identity(map.size(), map.size());

  CHECK((observer_update(W, delta_free, map, Vec::Zero(2)) - delta_free.segment(map.a_offset(), 2))
            .lpNorm<Eigen::Infinity>() == 0.0);

  Vec la(2);
  la << 2.0, 3.0;
  Vec expect = la + delta_free.segment(map.a_offset(), 2);
  CHECK((observer_update(W, delta_free, map, la) - expect).lpNorm<Eigen::Infinity>() == 0.0);

  // Replaying a logged (W, delta_free, lambda) sequence is bit-identical.
  std::mt19937_64 rng(1);
  std::normal_distribution<double> gauss;
  std::vector<Vec> logged;
  std::vector<Mat> Ws;
  std::vector<Vec> frees, lambdas;
  for (int s = 0; s < 20; ++s) {
    Mat Ws_s = spd(map.size(), 100 + static_cast<unsigned>(s));
    Vec df = Vec::NullaryExpr(map.size(), [&](Eigen::Index) { return gauss(rng); });
    Vec l = Vec::NullaryExpr(2, [&](Eigen::Index) { return gauss(rng); });
    logged.push_back(observer_update(Ws_s, df, map, l));
    Ws.push_back(Ws_s);
    frees.push_back(df);
    lambdas.push_back(l);
  }
  for (int s = 0; s < 20; ++s) {
    Vec replay = observer_update(Ws[static_cast<std::size_t>(s)], frees[static_cast<std::size_t>(s)],
                                 map, lambdas[static_cast<std::size_t>(s)]);
    CHECK((replay - logged[static_cast<std::size_t>(s)]).lpNorm<Eigen::Infinity>() == 0.0);
  }
}

TEST_CASE("closed loop with zero error equals open loop") {
  BlockMap map;
  map.n_e = 1;
  map.n_a = 2;
  Mat W = spd(map.size(), 3);
  Vec delta_free = Vec::Zero(map.size());
  ActuationLimits limits;
  limits.lambda_min = Vec::Zero(2);
  limits.lambda_max = Vec::Constant(2, 20.0);

  Vec goal(3);
  goal << 0.5, -0.3, 0.1;
  Controller a(constant_provider(W, delta_free), map, limits);
  Controller b(constant_provider(W, delta_free), map, limits);
  ControlStep sa = a.open_loop_step(goal);
  ControlStep sb = b.closed_loop_step(goal, goal);  // measured == goal, no history
  CHECK((sa.lambda_a - sb.lambda_a).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("constant disturbance is rejected by the integrator") {
  BlockMap map;
  map.n_e = 1;
  map.n_a = 2;
  Mat W = spd(map.size(), 7);
  Vec delta_free = Vec::Zero(map.size());
  ActuationLimits limits;
  limits.lambda_min = Vec::Constant(2, -50.0);
  limits.lambda_max = Vec::Constant(2, 50.0);

  // Faster gains than the defaults so the integrator settles within the test.
  Controller ctrl(constant_provider(W, delta_free), map, limits, PiGains{0.05, 0.02});
  Mat Wea = W.block(map.e_offset(), map.a_offset(), 3, 2);
  // Two actuators span a 2D slice of effector space; keep the goal and the
  // disturbance inside it so zero steady-state error is attainable.
  Vec ga(2), da(2);
  ga << 1.2, -0.8;
  da << 0.3, 0.2;
  Vec goal = Wea * ga;
  Vec disturbance = Wea * da;

  Vec measured = disturbance;  // plant at rest plus the disturbance offset
  ConvergenceMonitor monitor;
  double last_error = 1e9;
  for (int s = 0; s < 3000; ++s) {
    ControlStep cs = ctrl.closed_loop_step(goal, measured);
    measured = Wea * cs.lambda_a + disturbance;  // linear plant with offset
    last_error = (goal - measured).norm();
    monitor.update(s, last_error);
  }
  CHECK(last_error < 1e-3);
  CHECK(monitor.converged_step >= 0);
}

TEST_CASE("cube kinematics") {
  CubeState cube;
  cube.center = Vec3(1.0, 2.0, 3.0);
  cube.contact_points = {Vec3(6.0, 2.0, 3.0), Vec3(1.0, 7.0, 3.0)};
  cube.contact_rest = cube.contact_points;
  cube.contact_dirs = {Vec3::UnitX(), Vec3::UnitY()};

  SECTION("identity pose leaves contacts unchanged") {
    cube_kinematics(cube, cube.X);
    CHECK((cube.contact_points[0] - cube.contact_rest[0]).norm() == 0.0);
  }

  SECTION("pure translation shifts every contact point") {
    Vec X = Vec::Zero(6);
    X.head<3>() = Vec3(0.5, -1.0, 2.0);
    cube_kinematics(cube, X);
    CHECK((cube.contact_points[0] - (cube.contact_rest[0] + X.head<3>())).norm() < 1e-15);
    CHECK((cube.contact_points[1] - (cube.contact_rest[1] + X.head<3>())).norm() < 1e-15);
    CHECK((cube.center - Vec3(1.5, 1.0, 5.0)).norm() < 1e-15);
  }

  SECTION("small rotation matches the finite rotation to second order") {
    double theta = 1e-3;
    Vec X = Vec::Zero(6);
    X[5] = theta;  // about z through the center
    cube_kinematics(cube, X);
    Vec3 r = Vec3(6.0, 2.0, 3.0) - Vec3(1.0, 2.0, 3.0);
    Vec3 exact = Vec3(1.0, 2.0, 3.0) + Eigen::AngleAxisd(theta, Vec3::UnitZ()).toRotationMatrix() * r;
    CHECK((cube.contact_points[0] - exact).norm() < 10.0 * theta * theta * r.norm());
  }
}

TEST_CASE("manipulation fixed point at rest") {
  BlockMap map;
  map.n_a = 1;
  map.m_c = 1;
  Mat W(2, 2);
  W << 0.5, -0.3, -0.3, 0.3;
  CondensedProvider provider = constant_provider(W, Vec::Zero(2));
  ActuationLimits limits;
  limits.lambda_min = Vec::Zero(1);
  limits.lambda_max = Vec::Zero(1);  // lambda_a pinned to zero

  CubeState cube;
  cube.center = Vec3::Zero();
  cube.contact_points = {Vec3(-5.0, 0.0, 0.0)};
  cube.contact_rest = cube.contact_points;
  cube.contact_dirs = {Vec3(-1.0, 0.0, 0.0)};

  Vec delta_a = Vec::Zero(1);
  ManipulationStep step = manipulation_step(provider, map, limits, cube, delta_a, Vec3::Zero());
  CHECK(step.lambda_a.lpNorm<Eigen::Infinity>() == 0.0);
  CHECK(step.lambda_c.lpNorm<Eigen::Infinity>() < 1e-12);
  CHECK(step.X_cube.lpNorm<Eigen::Infinity>() < 1e-12);
  CHECK(step.complementarity < 1e-12);
  CHECK(step.regularized);  // one contact row cannot fix all six pose modes
}

TEST_CASE("button push against a constant resistance") {
  BlockMap map;
  map.n_a = 1;
  map.m_c = 1;
  Mat W(2, 2);
  W << 0.5, -0.3, -0.3, 0.3;  // pulling the cable drives the tip into the button
  CondensedProvider provider = constant_provider(W, Vec::Zero(2));
  ActuationLimits limits;
  limits.lambda_min = Vec::Zero(1);
  limits.lambda_max = Vec::Constant(1, 30.0);

  CubeState cube;
  cube.center = Vec3::Zero();
  cube.contact_points = {Vec3(-5.0, 0.0, 0.0)};  // finger pushes from the -x side
  cube.contact_rest = cube.contact_points;
  cube.contact_dirs = {Vec3(-1.0, 0.0, 0.0)};
  cube.f_cube[0] = -5.0;  // constant horizontal resistance, N

  Vec delta_a = Vec::Zero(1);
  ManipulationStep step{};
  for (int s = 0; s < 5; ++s)
    step = manipulation_step(provider, map, limits, cube, delta_a, Vec3(2.0, 0.0, 0.0));
  CHECK(step.qp_converged);
  CHECK(std::abs(step.X_cube[0] - 2.0) < 1e-9);
  CHECK(std::abs(step.lambda_c[0] - 5.0) < 1e-9);  // force balance against the resistance
  CHECK(step.complementarity <= 1e-6);
}

TEST_CASE("gripper assembly is block diagonal, PSD, and relabel-equivariant") {
  BlockMap finger_map;
  finger_map.n_a = 1;
  finger_map.m_c = 1;
  Mat Wf(2, 2);
  Wf << 0.5, -0.3, -0.3, 0.3;

  std::vector<CondensedProvider> fingers;
  std::vector<BlockMap> maps;
  for (int f = 0; f < 3; ++f) {
    Vec df(2);
    df << 0.01 * f, -0.02 * f;
    fingers.push_back(constant_provider(Wf, df));
    maps.push_back(finger_map);
  }
  BlockMap assembled;
  CondensedProvider grip = assemble_block_diagonal(fingers, maps, assembled);
  REQUIRE(assembled.n_a == 3);
  REQUIRE(assembled.m_c == 3);

  CondensedPrediction p = grip(Vec::Zero(3), Vec::Zero(3));
  CHECK((p.W - p.W.transpose()).cwiseAbs().maxCoeff() == 0.0);
  Eigen::SelfAdjointEigenSolver<Mat> es(p.W);
  CHECK(es.eigenvalues().minCoeff() >= -1e-12);
  // Off-diagonal coupling between fingers is exactly zero.
  CHECK(p.W.block(assembled.a_offset(), assembled.a_offset() + 1, 1, 1).cwiseAbs().maxCoeff() == 0.0);

  // Relabeling the fingers permutes the per-finger blocks accordingly.
  std::vector<CondensedProvider> swapped = {fingers[1], fingers[0], fingers[2]};
  BlockMap assembled2;
  CondensedProvider grip2 = assemble_block_diagonal(swapped, maps, assembled2);
  CondensedPrediction q = grip2(Vec::Zero(3), Vec::Zero(3));
  CHECK(q.delta_free[assembled.a_offset()] == p.delta_free[assembled.a_offset() + 1]);
  CHECK(q.delta_free[assembled.a_offset() + 1] == p.delta_free[assembled.a_offset()]);
}

TEST_CASE("gripper translation tracking with three synthetic fingers") {
  BlockMap finger_map;
  finger_map.n_a = 1;
  finger_map.m_c = 1;
  Mat Wf(2, 2);
  Wf << 0.5, -0.3, -0.3, 0.3;
  std::vector<CondensedProvider> fingers(3, constant_provider(Wf, Vec::Zero(2)));
  std::vector<BlockMap> maps(3, finger_map);
  BlockMap map;
  CondensedProvider grip = assemble_block_diagonal(fingers, maps, map);

  ActuationLimits limits;
  limits.lambda_min = Vec::Zero(3);
  limits.lambda_max = Vec::Constant(3, 50.0);

  CubeState cube;
  cube.center = Vec3::Zero();
  for (int f = 0; f < 3; ++f) {
    double ang = 2.0 * M_PI * f / 3.0;
    Vec3 dir(std::cos(ang), std::sin(ang), 0.0);  // from the cube toward finger f
    cube.contact_points.push_back(5.0 * dir);
    cube.contact_dirs.push_back(dir);
  }
  cube.contact_rest = cube.contact_points;

  Vec delta_a = Vec::Zero(3);
  Vec3 goal(0.6, -0.4, 0.0);  // in the span of the three in-plane normals
  ManipulationStep step{};
  ManipulationOptions opts;
  opts.max_inner = 20;
  for (int s = 0; s < 10; ++s)
    step = manipulation_step(grip, map, limits, cube, delta_a, goal, opts);
  CHECK(step.qp_converged);
  CHECK((step.X_cube.head(2) - goal.head(2)).norm() < 0.15 * goal.norm());
  CHECK(step.lambda_c.minCoeff() >= 0.0);
  CHECK(step.complementarity <= 1e-6);
}

TEST_CASE("FEM-in-the-loop open and closed loop on the finger") {
  Robot robot = two_cable_finger();
  FemSystem sys = robot.make_system();
  Vec zero = Vec::Zero(sys.num_dofs());
  CondensedProvider provider = provider_from_fem(sys, robot.constraints, zero);
  ActuationLimits limits = limits_from_constraints(robot.constraints);
  BlockMap map = robot.block_map();

  CondensedState rest = sys.condense(sys.rest_positions(), robot.constraints, zero);
  Controller ctrl(provider, map, limits);

  SECTION("rest goal commands zero actuation") {
    ControlStep cs = ctrl.open_loop_step(rest.delta_free_e());
    CHECK(cs.lambda_a.lpNorm<Eigen::Infinity>() < 1e-9);
    CHECK((ctrl.observed_delta_a() - rest.delta_free_a()).lpNorm<Eigen::Infinity>() < 1e-9);
  }

  SECTION("closing trajectory tracks reachable goals") {
    FemPlant plant(sys, robot.constraints, zero);
    Trajectory traj;
    traj.steps_per_goal = 4;
    // Reachable goals: true effector displacements along a closing force ramp.
    Vec la_end(2);
    la_end << 8.0, 0.0;
    Vec x = sys.rest_positions();
    for (int g = 1; g <= 4; ++g) {
      auto eq = sys.solve_equilibrium(x, robot.constraints, Vec(g / 4.0 * la_end), Vec(0), zero);
      x = eq.state.x;
      traj.goals.push_back(Vec(eq.delta.head(3)));
    }
    TrajectoryReport report = run_trajectory(plant, ctrl, traj, ControlMode::open_loop);
    REQUIRE(report.rows.size() == 16);
    CHECK(report.max_error <= 0.02 * 40.0);  // 2 percent of the finger length
    CHECK(report.rows.back().error <= 0.5);

    std::string csv = "traj_test.csv", js = "traj_test.json";
    write_trajectory_csv(report, csv);
    write_trajectory_summary(report, js);
    std::ifstream fin(csv);
    std::string header;
    std::getline(fin, header);
    CHECK(header.rfind("step,goal_0", 0) == 0);
    std::remove(csv.c_str());
    nlohmann::json summary = nlohmann::json::parse(std::ifstream(js));
    CHECK(summary["steps"] == 16);
    CHECK(summary["peak_rss_bytes"].get<std::uint64_t>() > 0);
    std::remove(js.c_str());
  }
}

TEST_CASE("empty trajectory gives an empty report") {
  BlockMap map;
  map.n_e = 1;
  map.n_a = 2;
  Mat W = spd(map.size(), 11);
  ActuationLimits limits;
  limits.lambda_min = Vec::Zero(2);
  limits.lambda_max = Vec::Constant(2, 10.0);
  Controller ctrl(constant_provider(W, Vec::Zero(map.size())), map, limits);

  Robot robot = two_cable_finger();
  FemSystem sys = robot.make_system();
  FemPlant plant(sys, robot.constraints, Vec::Zero(sys.num_dofs()));
  TrajectoryReport report = run_trajectory(plant, ctrl, Trajectory{}, ControlMode::open_loop);
  CHECK(report.rows.empty());
  CHECK(report.max_error == 0.0);
  CHECK(report.converged_step == -1);
  std::string csv = "traj_empty.csv";
  write_trajectory_csv(report, csv);
  std::ifstream fin(csv);
  std::string line;
  std::getline(fin, line);
  CHECK(line == "step,error,wall_us_controller,wall_us_plant");
  std::remove(csv.c_str());
}
