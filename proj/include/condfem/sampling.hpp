#pragma once

#include "condfem/dataset.hpp"
#include "condfem/halton.hpp"
#include "condfem/robot.hpp"

#include <optional>
#include <random>

namespace condfem {

struct SamplingOptions {
  std::uint64_t seed = 0;
  int threads = default_thread_count();
  bool include_rest_record = true;  // record 0 = zero-force equilibrium state
  double test_fraction = 0.25;      // appended test records = floor(fraction * n)
  double drop_budget = 0.05;        // tolerated share of non-converged draws
  bool sample_contacts = false;     // box-sample delta_c rows as well (ablation)
  bool with_stats = true;
};

namespace detail {

// One record at a prescribed constraint course, always solved from rest so the
// result is independent of sample order and thread count.
inline std::optional<SampleRecord> sample_at(const FemSystem& sys, const Robot& robot, const DatasetDims& dims,
                                             const Vec& target) {
  SampleRecord rec;
  try {
    Vec f_ext = sys.gravity_forces();
    Vec da = target.head(dims.n_a);
    if (dims.m_c > 0) {
      Vec dc = target.tail(dims.m_c);
      auto drive = sys.drive_to_displacement(robot.constraints, da, f_ext, &dc);
      rec.delta_c = dc;
      rec.w_tri = upper_triangle(drive.condensed.W);
      rec.delta_free = drive.condensed.delta_free;
    } else {
      auto drive = sys.drive_to_displacement(robot.constraints, da, f_ext);
      rec.delta_c = Vec(0);
      rec.w_tri = upper_triangle(drive.condensed.W);
      rec.delta_free = drive.condensed.delta_free;
    }
    rec.delta_a = da;
  } catch (const NumericalError&) {
    return std::nullopt;
  }
  rec.design_p = Vec(0);
  rec.w0_tri = Vec(0);
  rec.delta_free0 = Vec(0);
  return rec;
}

inline SampleRecord rest_record(const FemSystem& sys, const Robot& robot, const DatasetDims& dims) {
  Vec f_ext = sys.gravity_forces();
  auto eq = sys.solve_equilibrium(sys.rest_positions(), robot.constraints, Vec::Zero(dims.n_a),
                                  Vec::Zero(robot.block_map().m_c), f_ext);
  CondensedState cs = sys.condense(eq.state.x, robot.constraints, f_ext);
  BlockMap bm = robot.block_map();
  SampleRecord rec;
  rec.delta_a = eq.delta.segment(bm.a_offset(), bm.n_a);
  rec.delta_c = dims.m_c > 0 ? Vec(eq.delta.segment(bm.c_offset(), bm.m_c)) : Vec(0);
  rec.design_p = Vec(0);
  rec.w0_tri = Vec(0);
  rec.delta_free0 = Vec(0);
  rec.w_tri = upper_triangle(cs.W);
  rec.delta_free = cs.delta_free;
  return rec;
}

}  // namespace detail

// Quasi-random actuation-space dataset: train records from Scrambled Halton,
// appended test records from an independently seeded uniform sampler. Failed
// solves are replaced from the tail of the owning stream, in slot order, until
// the drop budget is exhausted.
inline Dataset generate_dataset(const Robot& robot, const Vec& lo, const Vec& hi, std::size_t n,
                                const SamplingOptions& opts = {}) {
  BlockMap bm = robot.block_map();
  Dataset ds;
  ds.dims.n_a = bm.n_a;
  ds.dims.m_c = opts.sample_contacts ? bm.m_c : 0;
  ds.dims.d = bm.size();
  ds.block_map = bm;
  ds.robot_hash = robot.config_hash();
  ds.seed = opts.seed;
  ds.bounds_lo = lo;
  ds.bounds_hi = hi;

  int sdim = ds.dims.n_a + ds.dims.m_c;
  if (lo.size() != sdim || hi.size() != sdim) throw ConfigError("bounds dimension does not match sampled space");
  if (!((hi - lo).array() >= 0.0).all() || !lo.allFinite() || !hi.allFinite())
    throw ConfigError("invalid sampling bounds");
  if (n == 0) throw ConfigError("empty dataset requested");

  FemSystem sys = robot.make_system();

  std::size_t n_train = n;
  std::size_t n_test = static_cast<std::size_t>(opts.test_fraction * static_cast<double>(n));
  std::size_t n_halton = opts.include_rest_record && n_train > 0 ? n_train - 1 : n_train;

  ScrambledHalton halton(sdim, opts.seed);
  std::mt19937_64 test_rng(opts.seed ^ 0x7465737473616d70ull);  // independent test stream
  auto uniform_point = [&]() {
    Vec u(sdim);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (int c = 0; c < sdim; ++c) u[c] = uni(test_rng);
    return scale_to_box(u, lo, hi);
  };

  // Draw every primary target up front so replacements continue each stream
  // deterministically.
  std::vector<Vec> targets;
  std::vector<bool> is_rest;
  for (std::size_t i = 0; i < n_train; ++i) {
    if (opts.include_rest_record && i == 0) {
      targets.emplace_back();
      is_rest.push_back(true);
    } else {
      std::size_t hidx = opts.include_rest_record ? i - 1 : i;
      targets.push_back(scale_to_box(halton.point(hidx), lo, hi));
      is_rest.push_back(false);
    }
  }
  for (std::size_t i = 0; i < n_test; ++i) {
    targets.push_back(uniform_point());
    is_rest.push_back(false);
  }

  std::vector<std::optional<SampleRecord>> slots(targets.size());
  parallel_for(targets.size(), opts.threads, [&](std::size_t i) {
    if (is_rest[i])
      slots[i] = detail::rest_record(sys, robot, ds.dims);
    else
      slots[i] = detail::sample_at(sys, robot, ds.dims, targets[i]);
  });

  std::size_t dropped = 0;
  std::size_t budget = static_cast<std::size_t>(opts.drop_budget * static_cast<double>(n));
  std::uint64_t next_halton = n_halton;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    while (!slots[i]) {
      if (++dropped > budget)
        throw NumericalError("sampling drop budget exhausted: " + std::to_string(dropped) + " failed draws");
      Vec replacement =
          i < n_train ? scale_to_box(halton.point(next_halton++), lo, hi) : uniform_point();
      slots[i] = detail::sample_at(sys, robot, ds.dims, replacement);
    }
  }

  ds.records.reserve(slots.size());
  for (auto& s : slots) ds.records.push_back(std::move(*s));
  ds.train_count = n_train;
  for (const auto& r : ds.records) ds.check_record(r);
  if (opts.with_stats) ds.fit_stats();
  return ds;
}

// ---------------------------------------------------------------------------
// Design-space sampling: named parameters over material and/or geometry.
// ---------------------------------------------------------------------------

struct DesignSpace {
  std::vector<std::string> names;  // from: young_modulus, poisson_ratio, length, height, joint_height
  Vec lo, hi;                      // per-name parameter bounds
  Vec da_lo, da_hi;                // actuation course bounds

  void validate() const {
    if (names.empty() || lo.size() != static_cast<Eigen::Index>(names.size()) || hi.size() != lo.size())
      throw ConfigError("design space names/bounds mismatch");
    for (const auto& nm : names)
      if (nm != "young_modulus" && nm != "poisson_ratio" && nm != "length" && nm != "height" &&
          nm != "joint_height")
        throw ConfigError("unknown design parameter: " + nm);
  }
  bool geometric() const {
    for (const auto& nm : names)
      if (nm == "length" || nm == "height" || nm == "joint_height") return true;
    return false;
  }
};

// Instantiate the robot at a design point p (ordered as space.names).
inline Robot apply_design(const Robot& base, const DesignSpace& space, const Vec& p) {
  if (p.size() != static_cast<Eigen::Index>(space.names.size()))
    throw ConfigError("design point dimension mismatch");
  MaterialParams mat = base.material;
  DesignParams geo = base.design;
  for (std::size_t i = 0; i < space.names.size(); ++i) {
    double v = p[static_cast<Eigen::Index>(i)];
    const std::string& nm = space.names[i];
    if (nm == "young_modulus") mat.young_modulus = v;
    else if (nm == "poisson_ratio") mat.poisson_ratio = v;
    else if (nm == "length") geo.length = v;
    else if (nm == "height") geo.height = v;
    else if (nm == "joint_height") geo.joint_height = v;
  }
  if (space.geometric()) return rebuild_robot(base, &geo, &mat);
  Robot robot = base;
  robot.material = mat;
  robot.material.validate();
  return robot;
}

// Dataset_G pairs p with the rest condensed state; Dataset_F pairs
// (delta_a, W0(p), delta_free0(p)) with the actuated condensed state.
inline std::pair<Dataset, Dataset> generate_design_dataset(const Robot& base, const DesignSpace& space,
                                                           std::size_t n_designs,
                                                           std::size_t n_actuations_per_design,
                                                           const SamplingOptions& opts = {}) {
  space.validate();
  if (n_designs == 0 || n_actuations_per_design == 0) throw ConfigError("empty design dataset requested");
  BlockMap bm = base.block_map();
  int n_p = static_cast<int>(space.names.size());
  int d = bm.size();
  int tri = d * (d + 1) / 2;

  Dataset g_set, f_set;
  g_set.dims = {0, 0, n_p, 0, 0, d};
  f_set.dims = {bm.n_a, 0, 0, tri, d, d};
  for (Dataset* ds : {&g_set, &f_set}) {
    ds->block_map = bm;
    ds->robot_hash = base.config_hash();
    ds->seed = opts.seed;
  }
  g_set.bounds_lo = space.lo;
  g_set.bounds_hi = space.hi;
  f_set.bounds_lo = space.da_lo;
  f_set.bounds_hi = space.da_hi;

  std::size_t test_designs = static_cast<std::size_t>(opts.test_fraction * static_cast<double>(n_designs));
  std::size_t total_designs = n_designs + test_designs;

  ScrambledHalton p_halton(n_p, opts.seed);
  ScrambledHalton a_halton(bm.n_a, opts.seed ^ 0x616374756174696full);
  std::mt19937_64 test_rng(opts.seed ^ 0x7465737473616d70ull);
  auto uniform_in = [&](const Vec& lo, const Vec& hi) {
    Vec u(lo.size());
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (Eigen::Index c = 0; c < u.size(); ++c) u[c] = uni(test_rng);
    return scale_to_box(u, lo, hi);
  };

  struct PerDesign {
    SampleRecord g_rec;
    std::vector<SampleRecord> f_recs;
    bool ok = false;
  };

  // Pre-draw all design and actuation points (test draws are sequential from
  // one generator, so they are materialized before the parallel section).
  std::vector<Vec> p_points(total_designs);
  std::vector<std::vector<Vec>> a_points(total_designs);
  for (std::size_t jd = 0; jd < total_designs; ++jd) {
    bool test = jd >= n_designs;
    p_points[jd] = test ? uniform_in(space.lo, space.hi) : scale_to_box(p_halton.point(jd), space.lo, space.hi);
    a_points[jd].resize(n_actuations_per_design);
    for (std::size_t k = 0; k < n_actuations_per_design; ++k)
      a_points[jd][k] = test ? uniform_in(space.da_lo, space.da_hi)
                             : scale_to_box(a_halton.point(jd * n_actuations_per_design + k), space.da_lo,
                                            space.da_hi);
  }

  std::vector<PerDesign> per(total_designs);
  parallel_for(total_designs, opts.threads, [&](std::size_t jd) {
    PerDesign& out = per[jd];
    try {
      Robot robot = apply_design(base, space, p_points[jd]);
      FemSystem sys = robot.make_system();
      DatasetDims rd = {bm.n_a, 0, 0, 0, 0, d};
      SampleRecord rest = detail::rest_record(sys, robot, rd);
      out.g_rec.design_p = p_points[jd];
      out.g_rec.delta_a = Vec(0);
      out.g_rec.delta_c = Vec(0);
      out.g_rec.w0_tri = Vec(0);
      out.g_rec.delta_free0 = Vec(0);
      out.g_rec.w_tri = rest.w_tri;
      out.g_rec.delta_free = rest.delta_free;
      for (std::size_t k = 0; k < n_actuations_per_design; ++k) {
        auto rec = detail::sample_at(sys, robot, rd, a_points[jd][k]);
        if (!rec) return;  // design dropped as a whole
        rec->w0_tri = rest.w_tri;
        rec->delta_free0 = rest.delta_free;
        out.f_recs.push_back(std::move(*rec));
      }
      out.ok = true;
    } catch (const Error&) {
      out.ok = false;  // mesher or solver failure: design dropped
    }
  });

  std::size_t dropped_train = 0, dropped_test = 0;
  for (std::size_t jd = 0; jd < total_designs; ++jd)
    if (!per[jd].ok) ++(jd < n_designs ? dropped_train : dropped_test);
  std::size_t budget = static_cast<std::size_t>(opts.drop_budget * static_cast<double>(total_designs));
  if (dropped_train + dropped_test > budget)
    throw NumericalError("design sampling drop budget exhausted: " +
                         std::to_string(dropped_train + dropped_test) + " dropped designs");

  auto append = [&](std::size_t jd) {
    if (!per[jd].ok) return;
    g_set.records.push_back(per[jd].g_rec);
    for (auto& r : per[jd].f_recs) f_set.records.push_back(std::move(r));
  };
  for (std::size_t jd = 0; jd < n_designs; ++jd) append(jd);
  g_set.train_count = g_set.records.size();
  f_set.train_count = f_set.records.size();
  for (std::size_t jd = n_designs; jd < total_designs; ++jd) append(jd);

  for (Dataset* ds : {&g_set, &f_set}) {
    for (const auto& r : ds->records) ds->check_record(r);
    if (opts.with_stats) ds->fit_stats();
  }
  return {std::move(g_set), std::move(f_set)};
}

}  // namespace condfem
