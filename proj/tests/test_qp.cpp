#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <random>

#include "condfem/qp.hpp"
#include "condfem/robot.hpp"

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

double objective(const QpProblem& p, const Vec& l) {
  return 0.5 * l.dot(p.Q * l) + p.q.dot(l);
}

}  // namespace

TEST_CASE("clipped unconstrained minimum") {
  QpProblem p;
  p.Q = Mat::Identity(2, 2);
  p.q = Vec(2);
  p.q << -1.0, 0.0;
  p.lb = Vec::Zero(2);
  p.ub = Vec::Constant(2, 0.5);
  p.G.resize(0, 2);
  p.h.resize(0);
  QpSolution s = solve_box_qp(p);
  REQUIRE(s.converged);
  CHECK(s.lambda[0] == Catch::Approx(0.5).margin(1e-12));
  CHECK(s.lambda[1] == Catch::Approx(0.0).margin(1e-12));
  CHECK(s.kkt_residual <= 1e-8);
}

TEST_CASE("interior optimum equals -Q^-1 q") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> gauss;
  for (int rep = 0; rep < 20; ++rep) {
    int n = 1 + static_cast<int>(rng() % 3);
    Mat A(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) A(i, j) = gauss(rng);
    QpProblem p;
    p.Q = A.transpose() * A + 0.5 * Mat::Identity(n, n);
    p.q = Vec::NullaryExpr(n, [&](Eigen::Index) { return gauss(rng); });
    Vec star = -p.Q.ldlt().solve(p.q);
    p.lb = star.array() - 10.0;
    p.ub = star.array() + 10.0;
    p.G.resize(0, n);
    p.h.resize(0);
    QpSolution s = solve_box_qp(p);
    REQUIRE(s.converged);
    CHECK((s.lambda - star).lpNorm<Eigen::Infinity>() < 1e-9);
    CHECK(s.kkt_residual <= 1e-8);
  }
}

TEST_CASE("200 random box QPs match the grid-search oracle") {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> gauss;
  std::uniform_real_distribution<double> uni(0.2, 2.0);
  for (int rep = 0; rep < 200; ++rep) {
    int n = 1 + static_cast<int>(rng() % 3);
    Mat A(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) A(i, j) = gauss(rng);
    QpProblem p;
    p.Q = A.transpose() * A + 0.1 * Mat::Identity(n, n);
    p.q = Vec::NullaryExpr(n, [&](Eigen::Index) { return 2.0 * gauss(rng); });
    p.lb.resize(n);
    p.ub.resize(n);
    for (int i = 0; i < n; ++i) {
      double c = gauss(rng);
      double w = uni(rng);
      p.lb[i] = c - w;
      p.ub[i] = c + w;
    }
    p.G.resize(0, n);
    p.h.resize(0);

    QpSolution s = solve_box_qp(p);
    REQUIRE(s.converged);
    CHECK(s.kkt_residual <= 1e-8);
    CHECK(((s.lambda - p.lb).minCoeff() >= -1e-10));
    CHECK(((p.ub - s.lambda).minCoeff() >= -1e-10));

    // Exhaustive grid over the box; resolution shrinks with dimension to keep
    // the sweep tractable.
    int steps = (n == 1) ? 4000 : (n == 2) ? 400 : 80;
    Vec widths = p.ub - p.lb;
    Vec best = p.lb;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<int> idx(static_cast<std::size_t>(n), 0);
    Vec pt(n);
    bool done = false;
    while (!done) {
      for (int i = 0; i < n; ++i) pt[i] = p.lb[i] + widths[i] * idx[static_cast<std::size_t>(i)] / steps;
      double v = objective(p, pt);
      if (v < best_val) {
        best_val = v;
        best = pt;
      }
      int d = 0;
      while (d < n && ++idx[static_cast<std::size_t>(d)] > steps) {
        idx[static_cast<std::size_t>(d)] = 0;
        ++d;
      }
      done = (d == n);
    }
    CHECK(objective(p, s.lambda) <= best_val + 1e-12);
    // Along ill-conditioned directions the grid argmin can land a couple of
    // cells from the true minimum, so allow a small multiple of the step.
    for (int i = 0; i < n; ++i)
      CHECK(std::abs(s.lambda[i] - best[i]) <= 3.0 * widths[i] / steps + 1e-12);
  }
}

TEST_CASE("solution invariant under positive rescaling of Q and q") {
  QpProblem p;
  p.Q.resize(2, 2);
  p.Q << 2.0, 0.3, 0.3, 1.0;
  p.q = Vec(2);
  p.q << -3.0, 1.0;
  p.lb = Vec::Constant(2, -0.5);
  p.ub = Vec::Constant(2, 0.5);
  p.G.resize(0, 2);
  p.h.resize(0);
  QpSolution a = solve_box_qp(p);
  QpProblem ps = p;
  ps.Q *= 137.0;
  ps.q *= 137.0;
  QpSolution b = solve_box_qp(ps);
  CHECK((a.lambda - b.lambda).lpNorm<Eigen::Infinity>() < 1e-10);
}

TEST_CASE("singular Q is regularized and tie-breaks to small norm") {
  QpProblem p;
  p.Q = Mat::Zero(2, 2);
  p.Q(0, 0) = 1.0;
  p.q = Vec(2);
  p.q << -1.0, 0.0;  // coordinate 1 does not affect the objective
  p.lb = Vec::Constant(2, -2.0);
  p.ub = Vec::Constant(2, 2.0);
  p.G.resize(0, 2);
  p.h.resize(0);
  QpSolution s = solve_box_qp(p);
  REQUIRE(s.converged);
  CHECK(s.regularized);
  CHECK(s.lambda[0] == Catch::Approx(1.0).margin(1e-6));
  CHECK(std::abs(s.lambda[1]) < 1e-6);
}

TEST_CASE("general inequalities participate in the active set") {
  QpProblem p;
  p.Q = 2.0 * Mat::Identity(2, 2);
  p.q = Vec(2);
  p.q << -2.0, -2.0;  // unconstrained minimum (1, 1)
  p.lb = Vec::Constant(2, -10.0);
  p.ub = Vec::Constant(2, 10.0);
  p.G.resize(1, 2);
  p.G << 1.0, 1.0;
  p.h = Vec::Constant(1, 0.5);
  QpSolution s = solve_box_qp(p);
  REQUIRE(s.converged);
  CHECK(s.lambda[0] == Catch::Approx(0.25).margin(1e-10));
  CHECK(s.lambda[1] == Catch::Approx(0.25).margin(1e-10));
  CHECK(s.kkt_residual <= 1e-8);
}

TEST_CASE("infeasible warm point is repaired before solving") {
  // lambda = 0 violates lambda_0 >= 1; the solver must still find (1, 0).
  QpProblem p;
  p.Q = Mat::Identity(2, 2);
  p.q = Vec::Zero(2);
  p.lb = Vec::Zero(2);
  p.ub = Vec::Constant(2, 5.0);
  p.G.resize(1, 2);
  p.G << -1.0, 0.0;
  p.h = Vec::Constant(1, -1.0);
  QpSolution s = solve_box_qp(p);
  REQUIRE(s.converged);
  CHECK(s.lambda[0] == Catch::Approx(1.0).margin(1e-10));
  CHECK(std::abs(s.lambda[1]) < 1e-10);
}

TEST_CASE("objective never exceeds the clipped-zero baseline") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> gauss;
  for (int rep = 0; rep < 50; ++rep) {
    int n = 1 + static_cast<int>(rng() % 3);
    Mat A(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) A(i, j) = gauss(rng);
    QpProblem p;
    p.Q = A.transpose() * A + 0.05 * Mat::Identity(n, n);
    p.q = Vec::NullaryExpr(n, [&](Eigen::Index) { return gauss(rng); });
    p.lb = Vec::NullaryExpr(n, [&](Eigen::Index) { return -std::abs(gauss(rng)) - 0.1; });
    p.ub = Vec::NullaryExpr(n, [&](Eigen::Index) { return std::abs(gauss(rng)) + 0.1; });
    p.G.resize(0, n);
    p.h.resize(0);
    QpSolution s = solve_box_qp(p);
    REQUIRE(s.converged);
    Vec baseline = Vec::Zero(n).cwiseMax(p.lb).cwiseMin(p.ub);
    CHECK(objective(p, s.lambda) <= objective(p, baseline) + 1e-12);
  }
}

TEST_CASE("complementarity residual") {
  Vec d(2), l(2);
  d << 0.1, 0.0;
  l << 0.0, 3.0;
  CHECK(complementarity_residual(d, l) == 0.0);
  Vec d1(1), l1(1);
  d1 << 0.1;
  l1 << 0.1;
  CHECK(complementarity_residual(d1, l1) == Catch::Approx(0.01));
  d1 << -0.2;
  l1 << 0.0;
  CHECK(complementarity_residual(d1, l1) == Catch::Approx(0.2));
  CHECK_THROWS_AS(complementarity_residual(d, l1), ConfigError);
}

TEST_CASE("QP JSON dump round-trips") {
  QpProblem p;
  p.Q = 2.0 * Mat::Identity(2, 2);
  p.q = Vec(2);
  p.q << -2.0, 0.75;
  p.lb = Vec::Constant(2, -1.0);
  p.ub = Vec::Constant(2, 1.0);
  p.G.resize(1, 2);
  p.G << 1.0, -1.0;
  p.h = Vec::Constant(1, 0.25);
  std::string path = "qp_roundtrip_test.json";
  save_qp(p, path);
  QpProblem back = load_qp(path);
  std::remove(path.c_str());
  CHECK((back.Q - p.Q).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.q - p.q).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.lb - p.lb).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.ub - p.ub).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.G - p.G).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.h - p.h).cwiseAbs().maxCoeff() == 0.0);
  QpSolution a = solve_box_qp(p);
  QpSolution b = solve_box_qp(back);
  CHECK((a.lambda - b.lambda).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("inverse problem from the condensed finger state") {
  Robot robot = two_cable_finger();
  FemSystem sys = robot.make_system();
  CondensedState cs = sys.condense(sys.rest_positions(), robot.constraints, Vec::Zero(sys.num_dofs()));

  ActuationLimits limits;
  limits.lambda_min = Vec::Zero(2);
  limits.lambda_max = Vec::Constant(2, 30.0);

  SECTION("rest goal gives zero actuation") {
    Vec goal = cs.delta_free_e();  // predicted effector displacement at lambda_a = 0
    QpProblem p = build_inverse_problem(cs, goal, limits);
    QpSolution s = solve_box_qp(p);
    REQUIRE(s.converged);
    CHECK(s.lambda.lpNorm<Eigen::Infinity>() < 1e-9);
  }

  SECTION("goal retargeting shifts only the linear term") {
    Vec goal = Vec::Zero(3);
    Vec g(3);
    g << 1.0, -2.0, 0.5;
    QpProblem p0 = build_inverse_problem(cs, goal, limits);
    QpProblem p1 = build_inverse_problem(cs, goal + g, limits);
    Mat Wea = cs.Wea();
    CHECK((p1.Q - p0.Q).cwiseAbs().maxCoeff() == 0.0);
    CHECK((p1.q - (p0.q - 2.0 * Wea.transpose() * g)).cwiseAbs().maxCoeff() < 1e-12);
  }

  SECTION("QP beats 10000 random feasible draws on a reachable goal") {
    Vec la_probe(2);
    la_probe << 6.0, 1.0;
    Vec goal = cs.Wea() * la_probe + cs.delta_free_e();  // reachable by construction
    QpProblem p = build_inverse_problem(cs, goal, limits);
    QpSolution s = solve_box_qp(p);
    REQUIRE(s.converged);
    auto resid = [&](const Vec& la) { return (cs.Wea() * la + cs.delta_free_e() - goal).norm(); };
    double qp_res = resid(s.lambda);
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> uni(0.0, 30.0);
    for (int i = 0; i < 10000; ++i) {
      Vec la(2);
      la << uni(rng), uni(rng);
      CHECK(qp_res <= resid(la) + 1e-10);
    }
  }

  SECTION("course limits appear as +-W_aa rows") {
    limits.delta_min = Vec::Constant(2, -1.0);
    limits.delta_max = Vec::Constant(2, 5.0);
    QpProblem p = build_inverse_problem(cs, Vec::Zero(3), limits);
    REQUIRE(p.G.rows() == 4);
    CHECK((p.G.topRows(2) - cs.Waa()).cwiseAbs().maxCoeff() == 0.0);
    CHECK((p.G.bottomRows(2) + cs.Waa()).cwiseAbs().maxCoeff() == 0.0);
    Vec c = cs.delta_free_a();
    CHECK((p.h.head(2) - (limits.delta_max - c)).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((p.h.tail(2) - (c - limits.delta_min)).cwiseAbs().maxCoeff() < 1e-15);

    // A tight course cap must bind: pulling toward a far goal saturates it.
    limits.delta_max = Vec::Constant(2, 0.4);
    Vec goal(3);
    goal << 0.0, -15.0, 0.0;
    QpProblem tight = build_inverse_problem(cs, goal, limits);
    QpSolution s = solve_box_qp(tight);
    REQUIRE(s.converged);
    Vec course = cs.Waa() * s.lambda + cs.delta_free_a();
    CHECK(course.maxCoeff() <= 0.4 + 1e-8);
  }
}
