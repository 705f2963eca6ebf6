#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "condfem/design.hpp"

using namespace condfem;

namespace {

// Fabricated design models: random networks with a nontrivial standardization,
// so the chain rule is exercised without any training in the loop.
struct DesignFixture {
  Robot robot;
  DesignSpace space;
  MlpModel G{MlpModel::make(MlpModel::Role::G, {1, 1}, 0)};
  MlpModel F{MlpModel::make(MlpModel::Role::F, {1, 1}, 0)};
  DesignModels dm;
  BlockMap map;

  DesignFixture() {
    nlohmann::json j = {
        {"name", "design-finger"},
        {"material", {{"young_modulus", 3000.0}, {"poisson_ratio", 0.3}}},
        {"mesh",
         {{"finger",
           {{"length", 40.0},
            {"height", 21.0},
            {"joint_height", 6.5},
            {"resolution", "coarse"},
            {"axis_up", true}}}}},
        {"actuators", {{{"cable_column", 0}}, {{"cable_column", 2}}}},
        {"effectors", {{{"node", "tip_center"}}}},
        {"contacts", {{{"node", "tip_center"}, {"frame", "full"}}}},
    };
    robot = robot_from_json(j);
    map = robot.block_map();

    space.names = {"length", "height", "joint_height"};
    space.lo = Vec(3);
    space.lo << 38.0, 20.0, 5.0;
    space.hi = Vec(3);
    space.hi << 42.0, 22.0, 8.0;
    space.da_lo = Vec::Zero(2);
    space.da_hi = Vec::Constant(2, 12.0);

    int d = map.size();
    int tri = d * (d + 1) / 2;
    DatasetDims gd{2, 0, 3, 0, 0, d};
    gd.n_a = 0;  // G takes only the design point
    DatasetDims fd{2, map.m_c, 0, tri, d, d};

    G = MlpModel::make(MlpModel::Role::G, {3, 24, tri + d}, 11);
    G.dims = gd;
    G.block_map = map;
    F = MlpModel::make(MlpModel::Role::F, {fd.input_dim(), 24, tri + d}, 12);
    F.dims = fd;
    F.block_map = map;

    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> stds(0.5, 2.0);
    std::normal_distribution<double> means;
    auto fill_stats = [&](MlpModel& m) {
      m.stats.in_mean = Vec::NullaryExpr(m.input_dim(), [&](Eigen::Index) { return 0.3 * means(rng); });
      m.stats.in_std = Vec::NullaryExpr(m.input_dim(), [&](Eigen::Index) { return stds(rng); });
      m.stats.out_mean = Vec::NullaryExpr(m.output_dim(), [&](Eigen::Index) { return 0.3 * means(rng); });
      m.stats.out_std = Vec::NullaryExpr(m.output_dim(), [&](Eigen::Index) { return stds(rng); });
    };
    fill_stats(G);
    fill_stats(F);
    // Keep the predicted effector comfortably inside the arccos domain at the
    // bent evaluation pose.
    F.stats.out_mean[tri + map.e_offset() + 2] = -15.0;

    dm.G = &G;
    dm.F = &F;
    dm.robot = &robot;
    dm.space = space;
  }

  Vec random_p(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> uni(0.1, 0.9);
    Vec p(3);
    for (int i = 0; i < 3; ++i) p[i] = space.lo[i] + uni(rng) * (space.hi[i] - space.lo[i]);
    return p;
  }
};

// Central finite differences with h = 1e-4 of the per-axis range.
int count_fd_matches(const std::function<ObjectiveEval(const Vec&)>& obj, const DesignFixture& fx,
                     int n_points, unsigned seed, double rel_tol = 1e-3) {
  std::mt19937_64 rng(seed);
  int pass = 0;
  for (int rep = 0; rep < n_points; ++rep) {
    Vec p = fx.random_p(rng);
    ObjectiveEval e = obj(p);
    if (e.clamped) continue;
    Vec g_fd(p.size());
    for (int k = 0; k < p.size(); ++k) {
      double h = 1e-4 * (fx.space.hi[k] - fx.space.lo[k]);
      Vec pp = p, pmn = p;
      pp[k] += h;
      pmn[k] -= h;
      g_fd[k] = (obj(pp).value - obj(pmn).value) / (2.0 * h);
    }
    double rel = (e.grad - g_fd).norm() / std::max(g_fd.norm(), 1e-12);
    if (rel <= rel_tol) ++pass;
  }
  return pass;
}

ObjectiveEval quadratic_bowl(const Vec& p, const Vec& center) {
  ObjectiveEval e;
  e.value = 0.5 * (p - center).squaredNorm();
  e.grad = p - center;
  return e;
}

}  // namespace

TEST_CASE("composed prediction gradient matches finite differences") {
  DesignFixture fx;
  Vec da(2);
  da << 10.0, 2.0;
  std::mt19937_64 rng(5);
  int pass = 0;
  for (int rep = 0; rep < 50; ++rep) {
    Vec p = fx.random_p(rng);
    CondensedWithGrad c = predict_design_with_grad(fx.dm, p, da);
    CHECK((c.W - c.W.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    bool ok = true;
    for (int k = 0; k < 3 && ok; ++k) {
      double h = 1e-4 * (fx.space.hi[k] - fx.space.lo[k]);
      Vec pp = p, pm = p;
      pp[k] += h;
      pm[k] -= h;
      CondensedWithGrad cp = predict_design_with_grad(fx.dm, pp, da);
      CondensedWithGrad cm = predict_design_with_grad(fx.dm, pm, da);
      Mat dW_fd = (cp.W - cm.W) / (2.0 * h);
      Vec ddf_fd = (cp.delta_free - cm.delta_free) / (2.0 * h);
      double rw = (c.dW_dp[static_cast<std::size_t>(k)] - dW_fd).norm() / std::max(dW_fd.norm(), 1e-12);
      double rf = (c.ddf_dp.col(k) - ddf_fd).norm() / std::max(ddf_fd.norm(), 1e-12);
      ok = rw <= 1e-3 && rf <= 1e-3;
    }
    if (ok) ++pass;
  }
  CHECK(pass >= 48);
}

TEST_CASE("calibration objective: self-consistency and gradient") {
  DesignFixture fx;
  std::mt19937_64 rng(17);
  Vec p_true = fx.random_p(rng);

  std::vector<CalibrationObservation> obs;
  for (int i = 0; i < 3; ++i) {
    CalibrationObservation o;
    o.delta_a = Vec(2);
    o.delta_a << 3.0 * (i + 1), 1.0 * i;
    CondensedWithGrad c = predict_design_with_grad(fx.dm, p_true, o.delta_a);
    o.delta_e_star = effector_with_grad(c, fx.map, o.delta_a).delta_e;
    obs.push_back(std::move(o));
  }

  CHECK(calibration_objective(fx.dm, p_true, obs).value == Catch::Approx(0.0).margin(1e-12));
  CHECK_THROWS_AS(calibration_objective(fx.dm, p_true, {}), ConfigError);

  auto obj = [&](const Vec& p) { return calibration_objective(fx.dm, p, obs); };
  CHECK(count_fd_matches(obj, fx, 50, 23) >= 48);
}

TEST_CASE("dexterity objective: endpoints and gradient") {
  DesignFixture fx;
  Vec da(2);
  da << 10.0, 0.0;
  auto obj = [&](const Vec& p) { return dexterity_objective(fx.dm, p, da); };

  std::mt19937_64 rng(31);
  Vec p = fx.random_p(rng);
  ObjectiveEval e = obj(p);
  CHECK(e.value >= 0.0);
  CHECK(e.value <= kAlphaMax + 1e-12);
  CHECK(count_fd_matches(obj, fx, 50, 37) >= 48);
}

TEST_CASE("strength objective: bounded value and gradient") {
  DesignFixture fx;
  Vec da(2);
  da << 10.0, 0.0;
  auto obj = [&](const Vec& p) { return strength_objective(fx.dm, p, da); };

  std::mt19937_64 rng(41);
  for (int rep = 0; rep < 10; ++rep) {
    ObjectiveEval e = obj(fx.random_p(rng));
    CHECK(e.value < kBetaMax);
    CHECK(e.value > 0.0);
  }
  CHECK(count_fd_matches(obj, fx, 50, 43) >= 48);
}

TEST_CASE("normalization maps the grid to [0, 1] and is affine invariant") {
  Vec center(2);
  center << 0.3, -0.2;
  Objective base = [&](const Vec& p) { return quadratic_bowl(p, center); };
  DesignSpace space;
  space.names = {"length", "height"};
  space.lo = Vec::Constant(2, -1.0);
  space.hi = Vec::Constant(2, 1.0);

  GridResult grid = grid_search(space, base, 100);
  double lo = 1e300, hi = -1e300;
  for (const auto& gp : grid.table) {
    lo = std::min(lo, gp.value);
    hi = std::max(hi, gp.value);
  }
  Objective norm = normalize_objective(base, lo, hi);
  double seen_lo = 1e300, seen_hi = -1e300;
  for (const auto& gp : grid.table) {
    double v = norm(gp.p).value;
    seen_lo = std::min(seen_lo, v);
    seen_hi = std::max(seen_hi, v);
    CHECK(v >= -1e-12);
    CHECK(v <= 1.0 + 1e-12);
  }
  CHECK(seen_lo == Catch::Approx(0.0).margin(1e-12));
  CHECK(seen_hi == Catch::Approx(1.0).margin(1e-12));

  // Affine rescaling of the raw objective normalizes to the same values.
  Objective scaled = [&](const Vec& p) {
    ObjectiveEval e = quadratic_bowl(p, center);
    e.value = 7.0 * e.value + 3.0;
    e.grad *= 7.0;
    return e;
  };
  Objective norm2 = normalize_objective(scaled, 7.0 * lo + 3.0, 7.0 * hi + 3.0);
  for (const auto& gp : grid.table)
    CHECK(norm2(gp.p).value == Catch::Approx(norm(gp.p).value).margin(1e-12));

  CHECK_THROWS_AS(normalize_objective(base, 1.0, 1.0), ConfigError);
}

TEST_CASE("grid search: exact budget, argmin within a cell, rescale invariance") {
  Vec center(3);
  center << 39.0, 21.3, 6.1;
  Objective bowl = [&](const Vec& p) { return quadratic_bowl(p, center); };
  DesignSpace space;
  space.names = {"length", "height", "joint_height"};
  space.lo = Vec(3);
  space.lo << 38.0, 20.0, 5.0;
  space.hi = Vec(3);
  space.hi << 42.0, 22.0, 8.0;

  GridResult grid = grid_search(space, bowl, 600);
  CHECK(grid.table.size() == 600);
  long prod = 1;
  for (int k : grid.axis_counts) prod *= k;
  CHECK(prod == 600);
  for (int a = 0; a < 3; ++a) {
    double cell = (space.hi[a] - space.lo[a]) / (grid.axis_counts[static_cast<std::size_t>(a)] - 1);
    CHECK(std::abs(grid.best_p[a] - center[a]) <= cell);
  }

  Objective scaled = [&](const Vec& p) {
    ObjectiveEval e = quadratic_bowl(p, center);
    e.value = 0.5 * e.value + 11.0;
    e.grad *= 0.5;
    return e;
  };
  GridResult grid2 = grid_search(space, scaled, 600);
  CHECK((grid2.best_p - grid.best_p).lpNorm<Eigen::Infinity>() == 0.0);

  // Thread count does not change the table.
  GridResult grid8 = grid_search(space, bowl, 600, 8);
  for (std::size_t i = 0; i < grid.table.size(); ++i)
    CHECK(grid8.table[i].value == grid.table[i].value);
}

TEST_CASE("gradient descent on a quadratic bowl") {
  Vec center(2);
  center << 0.4, -0.7;
  Objective bowl = [&](const Vec& p) { return quadratic_bowl(p, center); };
  DescentConfig cfg;
  cfg.lo = Vec::Constant(2, -2.0);
  cfg.hi = Vec::Constant(2, 2.0);
  cfg.learning_rate = 0.5;
  cfg.change_tol = 1e-16;

  Vec p0(2);
  p0 << 1.9, 1.9;
  OptimizationReport report = gradient_descent(bowl, p0, cfg);
  CHECK(report.converged);
  CHECK((report.p_star - center).norm() < 1e-6);

  // Objective history is monotone non-increasing by construction.
  for (std::size_t i = 1; i < report.history.size(); ++i)
    CHECK(report.history[i].value <= report.history[i - 1].value);

  // A projected start on the bound still reaches the interior minimum.
  Vec p1(2);
  p1 << -5.0, 0.0;
  OptimizationReport r2 = gradient_descent(bowl, p1, cfg);
  CHECK((r2.p_star - center).norm() < 1e-6);
}

TEST_CASE("pareto front matches the brute-force dominance filter") {
  auto brute = [](const std::vector<std::pair<double, double>>& pts) {
    std::vector<int> front;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      bool dominated = false;
      for (std::size_t j = 0; j < pts.size() && !dominated; ++j) {
        if (i == j) continue;
        bool le = pts[j].first <= pts[i].first && pts[j].second <= pts[i].second;
        bool lt = pts[j].first < pts[i].first || pts[j].second < pts[i].second;
        dominated = le && lt;
      }
      if (!dominated) front.push_back(static_cast<int>(i));
    }
    return front;
  };
  auto sorted_by_first = [](std::vector<int> v, const std::vector<std::pair<double, double>>& pts) {
    std::sort(v.begin(), v.end(), [&](int a, int b) {
      const auto& pa = pts[static_cast<std::size_t>(a)];
      const auto& pb = pts[static_cast<std::size_t>(b)];
      if (pa.first != pb.first) return pa.first < pb.first;
      if (pa.second != pb.second) return pa.second < pb.second;
      return a < b;
    });
    return v;
  };

  SECTION("degenerate cases") {
    std::vector<std::pair<double, double>> one = {{0.3, 0.7}};
    CHECK(pareto_front(one) == std::vector<int>{0});
    std::vector<std::pair<double, double>> two = {{0.1, 0.1}, {0.5, 0.5}};
    CHECK(pareto_front(two) == std::vector<int>{0});
  }

  SECTION("random clouds, including ties") {
    std::mt19937_64 rng(59);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::uniform_int_distribution<int> coarse(0, 4);
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<std::pair<double, double>> pts;
      for (int i = 0; i < 100; ++i)
        pts.emplace_back(rep % 2 == 0 ? uni(rng) : 0.25 * coarse(rng),
                         rep % 2 == 0 ? uni(rng) : 0.25 * coarse(rng));
      CHECK(pareto_front(pts) == sorted_by_first(brute(pts), pts));
    }
  }
}

TEST_CASE("weighted multi-objective") {
  Vec c1(2), c2(2);
  c1 << 0.0, 0.0;
  c2 << 1.0, 1.0;
  Objective o1 = [&](const Vec& p) { return quadratic_bowl(p, c1); };
  Objective o2 = [&](const Vec& p) { return quadratic_bowl(p, c2); };

  Vec p(2);
  p << 0.25, 0.5;
  CHECK(weighted_multi_objective(o1, o2, 1.0, 0.0)(p).value == o1(p).value);
  CHECK(weighted_multi_objective(o1, o2, 0.0, 1.0)(p).value == o2(p).value);
  ObjectiveEval mix = weighted_multi_objective(o1, o2, 0.5, 0.5)(p);
  CHECK(mix.value == Catch::Approx(0.5 * o1(p).value + 0.5 * o2(p).value));
  CHECK((mix.grad - 0.5 * (o1(p).grad + o2(p).grad)).lpNorm<Eigen::Infinity>() < 1e-15);
  CHECK_THROWS_AS(weighted_multi_objective(o1, o2, 0.0, 0.0), ConfigError);
  CHECK_THROWS_AS(weighted_multi_objective(o1, o2, -0.1, 0.5), ConfigError);
}

TEST_CASE("effector rest position tracks the design parameters") {
  DesignFixture fx;
  Vec p(3);
  p << 40.0, 21.0, 6.5;
  Mat dpos;
  Vec3 tip = effector_rest_position(fx.dm, p, &dpos);
  CHECK(tip.norm() > 0.0);

  Vec p2 = p;
  p2[0] = 42.0;  // longer finger moves the tip along the build axis
  Vec3 tip2 = effector_rest_position(fx.dm, p2, nullptr);
  CHECK((tip2 - tip).norm() > 1.0);
  // The finite-difference column agrees with the secant over a real step.
  Vec3 secant = (tip2 - tip) / 2.0;
  CHECK((Vec3(dpos.col(0)) - secant).norm() < 1e-6);
}
