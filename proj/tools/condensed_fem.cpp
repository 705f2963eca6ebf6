// condensed-fem: command-line surface for the condensed-FEM pipeline.
//
//   condensed-fem <generate|train|control|calibrate|optimize> [--config file.json] [--key value ...]
//
// Configuration precedence: command-line flags > config file > built-in
// defaults. Exit codes: 0 success, 1 numerical failure, 2 usage/config error;
// failures print a machine-readable error JSON on stderr. Every artifact is
// stamped with the hash of the merged configuration and the seed, so a rerun
// with identical config reproduces byte-identical numerical payloads
// (wall-clock timings live only in summary reports, never in payload files).

#include "condfem/control.hpp"
#include "condfem/design.hpp"

#include <cstdlib>
#include <iostream>

namespace condfem {
namespace cli {

constexpr double kPi = 3.14159265358979323846;

// ---------------------------------------------------------------------------
// Argument and configuration handling.
// ---------------------------------------------------------------------------

struct RunConfig {
  std::string command;
  nlohmann::json cfg;  // file config with flag overrides applied

  std::uint64_t config_hash() const { return fnv1a(command + ":" + cfg.dump()); }

  nlohmann::json stamp() const {
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(config_hash()));
    return {{"command", command},
            {"config_hash", std::string(hex)},
            {"seed", cfg.value("seed", std::uint64_t{0})}};
  }
};

inline nlohmann::json parse_flag_value(const std::string& s) {
  // Numbers, booleans, arrays and objects parse as JSON; anything else is a string.
  auto j = nlohmann::json::parse(s, nullptr, false);
  if (!j.is_discarded()) return j;
  return nlohmann::json(s);
}

inline RunConfig parse_args(int argc, char** argv) {
  static const char* kUsage =
      "usage: condensed-fem <generate|train|control|calibrate|optimize> "
      "[--config file.json] [--key value ...]";
  if (argc < 2) throw ConfigError(kUsage);
  RunConfig run;
  run.command = argv[1];
  if (run.command != "generate" && run.command != "train" && run.command != "control" &&
      run.command != "calibrate" && run.command != "optimize")
    throw ConfigError(std::string("unknown command: ") + run.command + "\n" + kUsage);

  nlohmann::json overrides = nlohmann::json::object();
  std::string config_path;
  for (int i = 2; i < argc; ++i) {
    std::string arg = argv[i];
    if (arg.rfind("--", 0) != 0) throw ConfigError("expected a --flag, got: " + arg);
    std::string key = arg.substr(2);
    if (i + 1 >= argc) throw ConfigError("flag --" + key + " needs a value");
    std::string val = argv[++i];
    if (key == "config")
      config_path = val;
    else
      overrides[key] = parse_flag_value(val);
  }

  run.cfg = nlohmann::json::object();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot open config file: " + config_path);
    in >> run.cfg;
    if (!run.cfg.is_object()) throw ConfigError("config file must hold a JSON object");
  }
  for (auto it = overrides.begin(); it != overrides.end(); ++it) run.cfg[it.key()] = it.value();
  return run;
}

inline int resolve_threads(const nlohmann::json& cfg) {
  if (cfg.contains("threads")) {
    int t = cfg.at("threads").get<int>();
    if (t < 1) throw ConfigError("threads must be >= 1");
    return t;
  }
  if (const char* env = std::getenv("CONDENSED_FEM_THREADS")) {
    int t = std::atoi(env);
    if (t < 1) throw ConfigError("CONDENSED_FEM_THREADS must be >= 1");
    return t;
  }
  return 1;
}

inline void write_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for write: " + path);
  out << j.dump(2) << "\n";
}

inline Vec vec_from_json(const nlohmann::json& a) {
  Vec v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
  return v;
}

inline std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

inline DesignSpace design_space_from_json(const nlohmann::json& j) {
  DesignSpace space;
  space.names = j.at("names").get<std::vector<std::string>>();
  space.lo = vec_from_json(j.at("lo"));
  space.hi = vec_from_json(j.at("hi"));
  space.da_lo = j.contains("da_lo") ? vec_from_json(j.at("da_lo")) : Vec(0);
  space.da_hi = j.contains("da_hi") ? vec_from_json(j.at("da_hi")) : Vec(0);
  space.validate();
  return space;
}

// ---------------------------------------------------------------------------
// generate: quasi-random dataset production.
// ---------------------------------------------------------------------------

inline void cmd_generate(const RunConfig& run) {
  const auto& cfg = run.cfg;
  Robot robot = robot_from_file(cfg.at("robot").get<std::string>());
  SamplingOptions opts;
  opts.seed = cfg.value("seed", std::uint64_t{0});
  opts.threads = resolve_threads(cfg);
  opts.test_fraction = cfg.value("test_fraction", 0.25);
  opts.sample_contacts = cfg.value("sample_contacts", false);
  std::string out = cfg.value("out", std::string("dataset"));

  nlohmann::json manifest = run.stamp();
  manifest["robot_hash"] = robot.config_hash();

  if (cfg.contains("design_space")) {
    DesignSpace space = design_space_from_json(cfg.at("design_space"));
    if (space.da_lo.size() == 0) throw ConfigError("design_space needs da_lo/da_hi bounds");
    std::size_t n_designs = cfg.at("n").get<std::size_t>();
    std::size_t n_act = cfg.value("actuations_per_design", std::size_t{10});
    auto [g_set, f_set] = generate_design_dataset(robot, space, n_designs, n_act, opts);
    g_set.save(out + "_G");
    f_set.save(out + "_F");
    manifest["datasets"] = {out + "_G", out + "_F"};
    manifest["records"] = {{"G", g_set.records.size()}, {"F", f_set.records.size()}};
  } else {
    std::size_t n = cfg.at("n").get<std::size_t>();
    ActuationLimits lim = limits_from_constraints(robot.constraints);
    Vec lo = cfg.contains("lo") ? vec_from_json(cfg.at("lo")) : lim.delta_min;
    Vec hi = cfg.contains("hi") ? vec_from_json(cfg.at("hi")) : lim.delta_max;
    Dataset ds = generate_dataset(robot, lo, hi, n, opts);
    ds.save(out);
    manifest["datasets"] = {out};
    manifest["records"] = ds.records.size();
  }
  write_json_file(manifest, out + "_run.json");
}

// ---------------------------------------------------------------------------
// train: network fit (optionally over the architecture grid).
// ---------------------------------------------------------------------------

inline void cmd_train(const RunConfig& run) {
  const auto& cfg = run.cfg;
  Dataset ds = Dataset::load(cfg.at("dataset").get<std::string>());
  MlpModel::Role role = cfg.value("role", std::string("F")) == "G" ? MlpModel::Role::G : MlpModel::Role::F;
  std::string out = cfg.value("out", std::string("model"));

  TrainConfig tc;
  tc.max_epochs = cfg.value("epochs", tc.max_epochs);
  tc.learning_rate = cfg.value("learning_rate", tc.learning_rate);
  tc.batch_size = cfg.value("batch_size", tc.batch_size);
  tc.seed = cfg.value("seed", std::uint64_t{0});
  tc.early_stop_test_loss = cfg.value("early_stop_test_loss", tc.early_stop_test_loss);
  tc.plateau_patience = cfg.value("plateau_patience", tc.plateau_patience);

  nlohmann::json report_json = run.stamp();
  report_json["dataset_hash"] = ds.robot_hash;
  TrainReport report;
  std::vector<int> sizes;

  if (cfg.value("hyper_search", false)) {
    // 3-to-5 hidden layers, 400-to-900 nodes: nine candidates.
    std::vector<std::vector<int>> grid;
    for (int layers : {3, 4, 5})
      for (int width : {400, 650, 900}) grid.push_back(std::vector<int>(static_cast<std::size_t>(layers), width));
    std::vector<HyperparameterResult> all;
    HyperparameterResult best = hyperparameter_search(role, grid, ds, tc, &all);
    MlpModel model = MlpModel::make(role, best.sizes, tc.seed);
    report = train_on_dataset(model, ds, tc);
    model.save(out);
    sizes = best.sizes;
    nlohmann::json cand = nlohmann::json::array();
    for (const auto& r : all)
      cand.push_back({{"sizes", r.sizes},
                      {"parameters", r.parameter_count},
                      {"best_test_loss", r.report.best_test_loss},
                      {"best_epoch", r.report.best_epoch}});
    report_json["candidates"] = cand;
  } else {
    std::vector<int> hidden = cfg.value("hidden", std::vector<int>{400, 400, 400});
    sizes.push_back(ds.dims.input_dim());
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(ds.dims.output_dim());
    MlpModel model = MlpModel::make(role, sizes, tc.seed);
    report = train_on_dataset(model, ds, tc);
    model.save(out);
  }

  report_json["sizes"] = sizes;
  report_json["best_epoch"] = report.best_epoch;
  report_json["best_test_loss"] = report.best_test_loss;
  report_json["final_learning_rate"] = report.final_learning_rate;
  report_json["wall_seconds"] = report.wall_seconds;  // timing: summary only
  report_json["train_loss"] = report.train_loss;
  report_json["test_loss"] = report.test_loss;
  write_json_file(report_json, out + "_report.json");
}

// ---------------------------------------------------------------------------
// control: trajectory and manipulation runs against the FEM plant.
// ---------------------------------------------------------------------------

// Per-step payload CSV without timing columns, so reruns are byte-identical.
inline void write_payload_csv(const TrajectoryReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for write: " + path);
  out.precision(17);
  if (report.rows.empty()) {
    out << "step,error\n";
    return;
  }
  out << "step";
  for (int i = 0; i < report.rows[0].goal.size(); ++i) out << ",goal_" << i;
  for (int i = 0; i < report.rows[0].reached.size(); ++i) out << ",reached_" << i;
  out << ",error";
  for (int i = 0; i < report.rows[0].lambda_a.size(); ++i) out << ",lambda_a_" << i;
  out << "\n";
  for (const auto& r : report.rows) {
    out << r.step;
    for (int i = 0; i < r.goal.size(); ++i) out << "," << r.goal[i];
    for (int i = 0; i < r.reached.size(); ++i) out << "," << r.reached[i];
    out << "," << r.error;
    for (int i = 0; i < r.lambda_a.size(); ++i) out << "," << r.lambda_a[i];
    out << "\n";
  }
}

// Ground-truth effector goals: equilibria along a ramp of actuation forces.
// Goals generated this way lie on the robot's reachable manifold, which is
// what open-loop tracking accuracy is measured against.
inline std::vector<Vec> goals_from_lambda_ramp(const FemSystem& sys, const Robot& robot,
                                               const Vec& lambda_target, int n_goals) {
  BlockMap bm = robot.block_map();
  std::vector<Vec> goals;
  Vec f_ext = sys.gravity_forces();
  Vec x = sys.rest_positions();
  for (int g = 1; g <= n_goals; ++g) {
    Vec la = (static_cast<double>(g) / n_goals) * lambda_target;
    auto eq = sys.solve_equilibrium(x, robot.constraints, la, Vec::Zero(bm.m_c), f_ext);
    x = eq.state.x;
    goals.push_back(eq.delta.segment(bm.e_offset(), 3 * bm.n_e));
  }
  return goals;
}

inline std::vector<Vec3> goal_translations(const nlohmann::json& cfg) {
  std::vector<Vec3> goals;
  if (cfg.contains("goals")) {
    for (const auto& g : cfg.at("goals")) goals.push_back(Vec3(vec_from_json(g)));
    return goals;
  }
  if (cfg.contains("goal_line")) {
    const auto& jl = cfg.at("goal_line");
    Vec3 dir = jl.contains("dir") ? Vec3(vec_from_json(jl.at("dir"))) : Vec3::UnitX();
    double extent = jl.value("extent", 2.0);
    int n = jl.value("n", 9);
    for (int k = 1; k <= n; ++k) goals.push_back((extent * k / n) * dir);
    return goals;
  }
  const auto& jc = cfg.value("goal_circle", nlohmann::json::object());
  double r = jc.value("radius", 0.5);
  int n = jc.value("n", 20);
  for (int k = 0; k < n; ++k) {
    double th = 2.0 * kPi * k / n;
    goals.push_back(Vec3(r * std::cos(th) - r, r * std::sin(th), 0.0));
  }
  return goals;
}

inline void run_manipulation(const RunConfig& run, const Robot& robot, const MlpModel* model) {
  const auto& cfg = run.cfg;
  std::string scenario = cfg.value("scenario", std::string("button"));
  std::string out = cfg.value("out", std::string("run"));
  ActuationLimits lim = limits_from_constraints(robot.constraints);
  BlockMap finger_map = robot.block_map();
  if (finger_map.m_c == 0) throw ConfigError("manipulation needs a robot with contact rows");

  FemSystem sys = robot.make_system();
  Vec f_ext = sys.gravity_forces();
  CondensedProvider finger = model != nullptr
                                 ? provider_from_model(*model)
                                 : provider_from_fem(sys, robot.constraints, f_ext);

  CondensedProvider provider;
  BlockMap map;
  CubeState cube;
  ActuationLimits limits;

  if (scenario == "gripper") {
    int n_fingers = cfg.value("fingers", 3);
    double cube_half = cfg.value("cube_half", 10.0);
    provider = assemble_block_diagonal(std::vector<CondensedProvider>(static_cast<std::size_t>(n_fingers), finger),
                                       std::vector<BlockMap>(static_cast<std::size_t>(n_fingers), finger_map), map);
    limits.lambda_min = lim.lambda_min.replicate(n_fingers, 1);
    limits.lambda_max = lim.lambda_max.replicate(n_fingers, 1);
    for (int f = 0; f < n_fingers; ++f) {
      double th = 2.0 * kPi * f / n_fingers;
      Vec3 radial(std::cos(th), std::sin(th), 0.0);
      for (int r = 0; r < finger_map.m_c; ++r) {
        cube.contact_points.push_back(cube_half * radial);
        cube.contact_rest.push_back(cube_half * radial);
        cube.contact_dirs.push_back(radial);  // from the cube toward each finger
      }
    }
  } else if (scenario == "button") {
    provider = finger;
    map = finger_map;
    limits = lim;
    const auto& rest = robot.constraints.contact_rest_positions();
    // Sign convention: contact dirs point from the cube toward the finger.
    double dir_sign = cfg.value("contact_dir_sign", 1.0);
    for (const auto& c : robot.constraints.contacts)
      for (const auto& fr : c.frame_rows) {
        cube.contact_points.push_back(rest[static_cast<std::size_t>(&c - robot.constraints.contacts.data())]);
        cube.contact_rest.push_back(cube.contact_points.back());
        cube.contact_dirs.push_back(dir_sign * fr);
      }
    Vec3 center_offset = cfg.contains("cube_center_offset")
                             ? Vec3(vec_from_json(cfg.at("cube_center_offset")))
                             : Vec3(5.0, 0.0, 0.0);
    Vec3 mean = Vec3::Zero();
    for (const auto& p : cube.contact_points) mean += p / static_cast<double>(cube.contact_points.size());
    cube.center = mean + center_offset;
  } else {
    throw ConfigError("manipulation supports scenarios: button, gripper");
  }
  if (cfg.contains("f_cube")) cube.f_cube = vec_from_json(cfg.at("f_cube"));
  cube.lambda_c = Vec::Zero(map.m_c);

  ManipulationOptions mopts;
  mopts.max_inner = cfg.value("max_inner", 1);

  std::vector<Vec3> goals = goal_translations(cfg);
  int steps_per_goal = cfg.value("steps_per_goal", 1);

  Vec delta_a_obs = provider(Vec::Zero(map.n_a), Vec::Zero(map.m_c))
                        .delta_free.segment(map.a_offset(), map.n_a);

  std::ofstream csv(out + ".csv");
  if (!csv) throw ConfigError("cannot open for write: " + out + ".csv");
  csv.precision(17);
  csv << "step,goal_x,goal_y,goal_z";
  for (int i = 0; i < 6; ++i) csv << ",X_" << i;
  csv << ",error";
  for (int i = 0; i < map.n_a; ++i) csv << ",lambda_a_" << i;
  for (int i = 0; i < map.m_c; ++i) csv << ",lambda_c_" << i;
  csv << ",complementarity\n";

  double max_error = 0.0, sum_error = 0.0, max_comp = 0.0;
  int step = 0, qp_failures = 0;
  for (const Vec3& goal : goals) {
    for (int rep = 0; rep < std::max(1, steps_per_goal); ++rep) {
      ManipulationStep ms = manipulation_step(provider, map, limits, cube, delta_a_obs, goal, mopts);
      double err = (cube.X.head<3>() - goal).norm();
      max_error = std::max(max_error, err);
      sum_error += err;
      max_comp = std::max(max_comp, ms.complementarity);
      if (!ms.qp_converged) ++qp_failures;
      csv << step << "," << goal[0] << "," << goal[1] << "," << goal[2];
      for (int i = 0; i < 6; ++i) csv << "," << cube.X[i];
      csv << "," << err;
      for (int i = 0; i < map.n_a; ++i) csv << "," << ms.lambda_a[i];
      for (int i = 0; i < map.m_c; ++i) csv << "," << ms.lambda_c[i];
      csv << "," << ms.complementarity << "\n";
      ++step;
    }
  }

  double extent = 0.0;
  for (const Vec3& g : goals) extent = std::max(extent, g.norm());
  nlohmann::json summary = run.stamp();
  summary["scenario"] = scenario;
  summary["steps"] = step;
  summary["max_error_mm"] = max_error;
  summary["mean_error_mm"] = step > 0 ? sum_error / step : 0.0;
  summary["trajectory_extent_mm"] = extent;
  summary["max_complementarity"] = max_comp;
  summary["qp_failures"] = qp_failures;
  summary["final_pose"] = to_std(cube.X);
  write_json_file(summary, out + "_summary.json");
}

inline void cmd_control(const RunConfig& run) {
  const auto& cfg = run.cfg;
  Robot robot = robot_from_file(cfg.at("robot").get<std::string>());
  std::string mode = cfg.value("mode", std::string("open"));
  std::string out = cfg.value("out", std::string("run"));

  // Provider selection: learned checkpoint by default, FEM matrices on request.
  std::optional<MlpModel> model;
  bool use_fem = cfg.value("provider", std::string("model")) == "fem";
  if (!use_fem) model = MlpModel::load(cfg.at("model").get<std::string>());

  if (mode == "manipulation") {
    run_manipulation(run, robot, model ? &*model : nullptr);
    return;
  }
  if (mode != "open" && mode != "closed") throw ConfigError("mode must be open, closed or manipulation");

  FemSystem sys = robot.make_system();
  Vec f_ext = sys.gravity_forces();
  CondensedProvider provider =
      model ? provider_from_model(*model) : provider_from_fem(sys, robot.constraints, f_ext);
  PiGains gains{cfg.value("kp", 0.01), cfg.value("ki", 0.002)};
  Controller controller(provider, robot.block_map(), limits_from_constraints(robot.constraints), gains);
  FemPlant plant(sys, robot.constraints, f_ext);

  Trajectory traj;
  traj.steps_per_goal = cfg.value("steps_per_goal", 1);
  if (cfg.contains("goals")) {
    for (const auto& g : cfg.at("goals")) traj.goals.push_back(vec_from_json(g));
  } else {
    int n_goals = cfg.value("n_goals", 25);
    Vec lambda_target = cfg.contains("lambda_target")
                            ? vec_from_json(cfg.at("lambda_target"))
                            : Vec(0.1 * limits_from_constraints(robot.constraints).lambda_max);
    traj.goals = goals_from_lambda_ramp(sys, robot, lambda_target, n_goals);
  }

  TrajectoryReport report = run_trajectory(
      plant, controller, traj, mode == "open" ? ControlMode::open_loop : ControlMode::closed_loop);
  write_payload_csv(report, out + ".csv");
  write_trajectory_csv(report, out + "_timed.csv");
  nlohmann::json extra = run.stamp();
  extra["mode"] = mode;
  extra["scenario"] = cfg.value("scenario", std::string("finger"));
  extra["final_error_mm"] = report.rows.empty() ? 0.0 : report.rows.back().error;
  write_trajectory_summary(report, out + "_summary.json", extra);
}

// ---------------------------------------------------------------------------
// calibrate: recover mechanical parameters from effector observations.
// ---------------------------------------------------------------------------

inline void cmd_calibrate(const RunConfig& run) {
  const auto& cfg = run.cfg;
  Robot robot = robot_from_file(cfg.at("robot").get<std::string>());
  DesignSpace space = design_space_from_json(cfg.at("design_space"));
  MlpModel G = MlpModel::load(cfg.at("model_G").get<std::string>());
  MlpModel F = MlpModel::load(cfg.at("model_F").get<std::string>());
  DesignModels dm{&G, &F, &robot, space};
  BlockMap bm = robot.block_map();

  std::vector<CalibrationObservation> obs;
  if (cfg.contains("observations")) {
    for (const auto& jo : cfg.at("observations")) {
      CalibrationObservation o;
      o.delta_a = vec_from_json(jo.at("delta_a"));
      o.delta_e_star = vec_from_json(jo.at("delta_e"));
      obs.push_back(std::move(o));
    }
  } else if (cfg.contains("observations_from_fem")) {
    // Synthesize ground truth by solving the FEM at the true parameters.
    const auto& js = cfg.at("observations_from_fem");
    Vec p_true = vec_from_json(js.at("true_p"));
    Robot truth = apply_design(robot, space, p_true);
    FemSystem sys = truth.make_system();
    Vec f_ext = sys.gravity_forces();
    for (const auto& jda : js.at("delta_a")) {
      CalibrationObservation o;
      o.delta_a = vec_from_json(jda);
      auto drive = sys.drive_to_displacement(truth.constraints, o.delta_a, f_ext);
      o.delta_e_star = truth.constraints.delta(drive.state.x).segment(bm.e_offset(), 3 * bm.n_e);
      obs.push_back(std::move(o));
    }
  } else {
    throw ConfigError("calibrate needs observations or observations_from_fem");
  }

  DescentConfig dc;
  dc.lo = space.lo;
  dc.hi = space.hi;
  dc.learning_rate = cfg.value("learning_rate", 1e-4);
  dc.max_iters = cfg.value("max_iters", 10000);

  std::vector<Vec> inits;
  if (cfg.contains("inits"))
    for (const auto& ji : cfg.at("inits")) inits.push_back(vec_from_json(ji));
  else
    inits.push_back(0.5 * (space.lo + space.hi));

  Objective obj = [&](const Vec& p) { return calibration_objective(dm, p, obs); };
  nlohmann::json runs = nlohmann::json::array();
  Vec best_p;
  double best_value = std::numeric_limits<double>::infinity();
  for (const Vec& p0 : inits) {
    OptimizationReport rep = gradient_descent(obj, p0, dc);
    runs.push_back({{"init", to_std(p0)},
                    {"p_star", to_std(rep.p_star)},
                    {"objective", rep.value},
                    {"iterations", rep.history.size()},
                    {"converged", rep.converged},
                    {"stalled", rep.stalled}});
    if (rep.value < best_value) {
      best_value = rep.value;
      best_p = rep.p_star;
    }
  }

  nlohmann::json report = run.stamp();
  report["parameter_names"] = space.names;
  report["observations"] = obs.size();
  report["runs"] = runs;
  report["p_star"] = to_std(best_p);
  report["objective"] = best_value;
  write_json_file(report, cfg.value("out", std::string("calibration")) + ".json");
}

// ---------------------------------------------------------------------------
// optimize: grid landscape, descent refinement, Pareto front.
// ---------------------------------------------------------------------------

inline void cmd_optimize(const RunConfig& run) {
  const auto& cfg = run.cfg;
  Robot robot = robot_from_file(cfg.at("robot").get<std::string>());
  DesignSpace space = design_space_from_json(cfg.at("design_space"));
  MlpModel G = MlpModel::load(cfg.at("model_G").get<std::string>());
  MlpModel F = MlpModel::load(cfg.at("model_F").get<std::string>());
  DesignModels dm{&G, &F, &robot, space};

  Vec delta_a = cfg.contains("delta_a") ? vec_from_json(cfg.at("delta_a")) : Vec(space.da_hi);
  if (delta_a.size() != F.dims.n_a) throw ConfigError("delta_a does not match the F model");
  int threads = resolve_threads(cfg);
  int budget = cfg.value("grid_budget", 600);
  std::string name = cfg.value("objective", std::string("dexterity"));
  std::string out = cfg.value("out", std::string("design"));

  Objective dext = [&](const Vec& p) { return dexterity_objective(dm, p, delta_a); };
  int lc_default = std::min(1, F.block_map.m_c - 1);  // y row when present, else the only row
  int lc_component = cfg.value("lambda_c_component", lc_default);
  Objective stre = [&](const Vec& p) { return strength_objective(dm, p, delta_a, lc_component); };

  Objective objective;
  nlohmann::json report = run.stamp();
  report["objective"] = name;

  if (name == "dexterity") {
    objective = dext;
  } else if (name == "strength") {
    objective = stre;
  } else if (name == "weighted") {
    // Both raw landscapes share the grid; normalize each by its own extrema.
    GridResult gd = grid_search(space, dext, budget, threads);
    GridResult gs = grid_search(space, stre, budget, threads);
    auto extrema = [](const GridResult& g) {
      double lo = g.table[0].value, hi = g.table[0].value;
      for (const auto& pt : g.table) {
        lo = std::min(lo, pt.value);
        hi = std::max(hi, pt.value);
      }
      return std::pair<double, double>(lo, hi);
    };
    auto [dlo, dhi] = extrema(gd);
    auto [slo, shi] = extrema(gs);
    double g1 = cfg.value("gamma1", 0.5), g2 = cfg.value("gamma2", 0.5);
    objective = weighted_multi_objective(normalize_objective(dext, dlo, dhi),
                                         normalize_objective(stre, slo, shi), g1, g2);
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < gd.table.size(); ++i)
      pts.emplace_back(gd.table[i].value, gs.table[i].value);
    std::vector<int> front = pareto_front(pts);
    nlohmann::json jfront = nlohmann::json::array();
    for (int i : front)
      jfront.push_back({{"p", to_std(gd.table[static_cast<std::size_t>(i)].p)},
                        {"dexterity", pts[static_cast<std::size_t>(i)].first},
                        {"strength", pts[static_cast<std::size_t>(i)].second}});
    report["pareto_front"] = jfront;
    report["gamma"] = {g1, g2};
  } else {
    throw ConfigError("objective must be dexterity, strength or weighted");
  }

  GridResult grid = grid_search(space, objective, budget, threads);
  write_grid_csv(grid, space, out + "_grid.csv");

  DescentConfig dc;
  dc.lo = space.lo;
  dc.hi = space.hi;
  dc.learning_rate = cfg.value("learning_rate", 0.01);
  dc.max_iters = cfg.value("max_iters", 10000);
  OptimizationReport descent = gradient_descent(objective, grid.best_p, dc);
  write_descent_json(descent, out + "_descent.json");

  report["grid_budget"] = budget;
  report["axis_counts"] = grid.axis_counts;
  report["grid_best_p"] = to_std(grid.best_p);
  report["grid_best_value"] = grid.best_value;
  report["p_star"] = to_std(descent.p_star);
  report["value"] = descent.value;
  report["converged"] = descent.converged;
  write_json_file(report, out + "_report.json");
}

}  // namespace cli
}  // namespace condfem

int main(int argc, char** argv) {
  using namespace condfem;
  auto fail = [](const char* type, const std::string& message, int code) {
    nlohmann::json err = {{"error", {{"type", type}, {"message", message}}}};
    std::cerr << err.dump() << "\n";
    return code;
  };
  try {
    cli::RunConfig run = cli::parse_args(argc, argv);
    if (run.command == "generate") cli::cmd_generate(run);
    else if (run.command == "train") cli::cmd_train(run);
    else if (run.command == "control") cli::cmd_control(run);
    else if (run.command == "calibrate") cli::cmd_calibrate(run);
    else cli::cmd_optimize(run);
  } catch (const ConfigError& e) {
    return fail("config", e.what(), 2);
  } catch (const NumericalError& e) {
    return fail("numerical", e.what(), 1);
  } catch (const nlohmann::json::exception& e) {
    return fail("config", e.what(), 2);
  } catch (const std::exception& e) {
    return fail("numerical", e.what(), 1);
  }
  return 0;
}
