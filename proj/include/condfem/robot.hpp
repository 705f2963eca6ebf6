#pragma once

#include "condfem/fem.hpp"

#include <fstream>
#include <sstream>

namespace condfem {

// A robot = mesh + material + constraint layout, loadable from a JSON config.
// Parametric-mesh robots keep their design parameters so the mesh can be
// regenerated at other design points with identical topology and constraint
// attachment (the condensed dimension never changes with p or resolution).
struct Robot {
  std::string name;
  Mesh mesh;
  MaterialParams material;
  ConstraintSet constraints;
  Vec3 gravity = Vec3::Zero();     // m/s^2
  double density_kg_mm3 = 1.1e-6;
  nlohmann::json config;           // generating config, for artifact stamping

  // Set when the mesh came from the parametric mesher.
  bool parametric = false;
  DesignParams design;
  MeshResolution resolution = MeshResolution::coarse;
  bool axis_up = false;
  bool notched = true;
  double beam_width = 0.0;  // un-notched beams only

  FemSystem make_system() const { return FemSystem(mesh, material, gravity, density_kg_mm3); }

  std::uint64_t config_hash() const { return fnv1a(config.dump()); }

  BlockMap block_map() const { return constraints.block_map(); }
};

namespace detail {

inline int resolve_node(const nlohmann::json& ref, const FingerMesh* fm) {
  if (ref.is_number_integer()) return ref.get<int>();
  std::string s = ref.get<std::string>();
  if (!fm) throw ConfigError("symbolic node reference '" + s + "' requires a parametric mesh");
  if (s == "tip_center") return fm->tip_center_node;
  for (int c = 0; c < 3; ++c)
    if (s == "tip_bottom_" + std::to_string(c)) return fm->tip_bottom_nodes[static_cast<std::size_t>(c)];
  throw ConfigError("unknown node reference: " + s);
}

}  // namespace detail

inline Robot robot_from_json(const nlohmann::json& j, const std::string& base_dir = ".") {
  Robot robot;
  robot.config = j;
  robot.name = j.value("name", "robot");
  if (j.contains("material")) {
    robot.material.young_modulus = j["material"].value("young_modulus", 3000.0);
    robot.material.poisson_ratio = j["material"].value("poisson_ratio", 0.3);
  }
  robot.material.validate();
  if (j.contains("gravity")) {
    auto g = j["gravity"].get<std::vector<double>>();
    if (g.size() != 3) throw ConfigError("gravity must have 3 components");
    robot.gravity = Vec3(g[0], g[1], g[2]);
  }
  robot.density_kg_mm3 = j.value("density_kg_mm3", 1.1e-6);

  const auto& jm = j.at("mesh");
  FingerMesh fm;
  const FingerMesh* fm_ptr = nullptr;
  if (jm.contains("finger")) {
    const auto& jf = jm["finger"];
    robot.parametric = true;
    robot.notched = true;
    robot.design.length = jf.value("length", 40.0);
    robot.design.height = jf.value("height", 21.0);
    robot.design.joint_height = jf.value("joint_height", 6.5);
    robot.resolution = mesh_resolution_from_string(jf.value("resolution", "coarse"));
    robot.axis_up = jf.value("axis_up", false);
    fm = parametric_finger_mesh(robot.design, robot.resolution, robot.axis_up);
    robot.mesh = fm.mesh;
    fm_ptr = &fm;
  } else if (jm.contains("beam")) {
    const auto& jb = jm["beam"];
    robot.parametric = true;
    robot.notched = false;
    robot.design.length = jb.value("length", 80.0);
    robot.design.height = jb.value("height", 20.0);
    robot.beam_width = jb.value("width", 20.0);
    robot.resolution = mesh_resolution_from_string(jb.value("resolution", "coarse"));
    robot.axis_up = jb.value("axis_up", false);
    fm = box_beam_mesh(robot.design.length, robot.design.height, robot.beam_width, robot.resolution, robot.axis_up);
    robot.mesh = fm.mesh;
    fm_ptr = &fm;
  } else if (jm.contains("file")) {
    std::ifstream in(base_dir + "/" + jm["file"].get<std::string>());
    if (!in) throw ConfigError("cannot open mesh file: " + jm["file"].get<std::string>());
    nlohmann::json mj;
    in >> mj;
    robot.mesh = mesh_from_json(mj);
  } else if (jm.contains("inline")) {
    robot.mesh = mesh_from_json(jm["inline"]);
  } else {
    throw ConfigError("mesh must specify one of: finger, beam, file, inline");
  }

  Vec x_rest(3 * robot.mesh.num_nodes());
  for (int n = 0; n < robot.mesh.num_nodes(); ++n) x_rest.segment<3>(3 * n) = robot.mesh.nodes[static_cast<std::size_t>(n)];

  for (const auto& ja : j.value("actuators", nlohmann::json::array())) {
    CableActuator cable;
    if (ja.contains("cable_column")) {
      if (!fm_ptr) throw ConfigError("cable_column requires a parametric mesh");
      int col = ja["cable_column"].get<int>();
      if (col < 0 || col >= 6) throw ConfigError("cable_column must be in 0..5");
      cable.via_nodes = fm_ptr->cable_columns[static_cast<std::size_t>(col)];
    } else {
      cable.via_nodes = ja.at("via_nodes").get<std::vector<int>>();
    }
    cable.delta_min = ja.value("delta_min", 0.0);
    cable.delta_max = ja.value("delta_max", 20.0);
    cable.lambda_min = ja.value("lambda_min", 0.0);
    cable.lambda_max = ja.value("lambda_max", 50.0);
    robot.constraints.actuators.push_back(std::move(cable));
  }
  for (const auto& je : j.value("effectors", nlohmann::json::array())) {
    EffectorConstraint eff;
    eff.node = detail::resolve_node(je.at("node"), fm_ptr);
    if (je.contains("goal_train") && je["goal_train"].is_array()) {
      auto g = je["goal_train"].get<std::vector<double>>();
      eff.goal_train = Vec3(g[0], g[1], g[2]);
    } else {
      // Default: train against the rest position of the effector node.
      eff.goal_train = x_rest.segment<3>(3 * eff.node);
    }
    robot.constraints.effectors.push_back(eff);
  }
  for (const auto& jc : j.value("contacts", nlohmann::json::array())) {
    ContactConstraint contact;
    contact.node = detail::resolve_node(jc.at("node"), fm_ptr);
    const auto& jf = jc.value("frame", nlohmann::json("full"));
    if (jf.is_string()) {
      std::string f = jf.get<std::string>();
      if (f == "full") {
        contact.frame_rows = {Vec3::UnitX(), Vec3::UnitY(), Vec3::UnitZ()};
      } else if (f == "normal_x" || f == "normal_y" || f == "normal_z") {
        contact.frame_rows = {f == "normal_x" ? Vec3::UnitX() : f == "normal_y" ? Vec3::UnitY() : Vec3::UnitZ()};
      } else {
        throw ConfigError("unknown contact frame: " + f);
      }
    } else {
      for (const auto& row : jf) {
        auto r = row.get<std::vector<double>>();
        contact.frame_rows.emplace_back(r[0], r[1], r[2]);
      }
    }
    robot.constraints.contacts.push_back(std::move(contact));
  }

  robot.constraints.validate(robot.mesh);
  robot.constraints.bind_rest_state(x_rest);
  return robot;
}

inline Robot robot_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open robot config: " + path);
  nlohmann::json j;
  in >> j;
  std::string dir = ".";
  if (auto slash = path.find_last_of('/'); slash != std::string::npos) dir = path.substr(0, slash);
  return robot_from_json(j, dir);
}

// Rebuild a parametric robot at another design point / material / resolution.
// The constraint layout is regenerated from the same config so attachments
// stay canonical.
inline Robot rebuild_robot(const Robot& robot, const DesignParams* p = nullptr,
                           const MaterialParams* mat = nullptr,
                           const MeshResolution* res = nullptr) {
  if (!robot.parametric) throw ConfigError("rebuild requires a parametric robot");
  nlohmann::json j = robot.config;
  auto& jm = j["mesh"][robot.notched ? "finger" : "beam"];
  if (p) {
    jm["length"] = p->length;
    jm["height"] = p->height;
    if (robot.notched) jm["joint_height"] = p->joint_height;
  }
  if (res) {
    const char* names[] = {"coarse", "medium", "fine"};
    jm["resolution"] = names[static_cast<int>(*res)];
  }
  if (mat) {
    j["material"]["young_modulus"] = mat->young_modulus;
    j["material"]["poisson_ratio"] = mat->poisson_ratio;
  }
  return robot_from_json(j);
}

}  // namespace condfem
