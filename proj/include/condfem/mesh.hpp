#pragma once

#include "condfem/common.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <map>
#include <set>

namespace condfem {

struct MaterialParams {
  double young_modulus = 3000.0;  // kPa
  double poisson_ratio = 0.3;

  void validate() const {
    if (!(young_modulus > 0.0)) throw ConfigError("young_modulus must be > 0");
    if (!(poisson_ratio > 0.0 && poisson_ratio < 0.5)) throw ConfigError("poisson_ratio must be in (0, 0.5)");
  }
};

struct Mesh {
  std::vector<Vec3> nodes;              // mm
  std::vector<std::array<int, 4>> tets;
  std::vector<int> fixed_node_ids;

  int num_nodes() const { return static_cast<int>(nodes.size()); }
  int num_tets() const { return static_cast<int>(tets.size()); }

  double tet_volume(int t) const {
    const auto& tt = tets[static_cast<std::size_t>(t)];
    Mat3 d;
    d.col(0) = nodes[static_cast<std::size_t>(tt[1])] - nodes[static_cast<std::size_t>(tt[0])];
    d.col(1) = nodes[static_cast<std::size_t>(tt[2])] - nodes[static_cast<std::size_t>(tt[0])];
    d.col(2) = nodes[static_cast<std::size_t>(tt[3])] - nodes[static_cast<std::size_t>(tt[0])];
    return d.determinant() / 6.0;
  }

  void validate() const {
    if (fixed_node_ids.empty()) throw ConfigError("mesh has no fixed nodes (robot needs a fixed base)");
    for (const auto& t : tets)
      for (int id : t)
        if (id < 0 || id >= num_nodes()) throw ConfigError("tet index out of range");
    for (int id : fixed_node_ids)
      if (id < 0 || id >= num_nodes()) throw ConfigError("fixed node index out of range");
    for (int t = 0; t < num_tets(); ++t)
      if (!(tet_volume(t) > 0.0))
        throw ConfigError("degenerate element: non-positive volume in tet " + std::to_string(t));
  }

  Vec3 bbox_min() const {
    Vec3 m = nodes.front();
    for (const auto& p : nodes) m = m.cwiseMin(p);
    return m;
  }
  Vec3 bbox_max() const {
    Vec3 m = nodes.front();
    for (const auto& p : nodes) m = m.cwiseMax(p);
    return m;
  }
};

inline nlohmann::json mesh_to_json(const Mesh& mesh) {
  nlohmann::json j;
  auto& nodes = j["nodes"] = nlohmann::json::array();
  for (const auto& p : mesh.nodes) {
    nodes.push_back(p.x());
    nodes.push_back(p.y());
    nodes.push_back(p.z());
  }
  auto& tets = j["tets"] = nlohmann::json::array();
  for (const auto& t : mesh.tets)
    for (int id : t) tets.push_back(id);
  j["fixed"] = mesh.fixed_node_ids;
  return j;
}

inline Mesh mesh_from_json(const nlohmann::json& j) {
  Mesh mesh;
  const auto& nodes = j.at("nodes");
  if (nodes.size() % 3 != 0) throw ConfigError("mesh nodes array length not a multiple of 3");
  for (std::size_t i = 0; i < nodes.size(); i += 3)
    mesh.nodes.emplace_back(nodes[i].get<double>(), nodes[i + 1].get<double>(), nodes[i + 2].get<double>());
  const auto& tets = j.at("tets");
  if (tets.size() % 4 != 0) throw ConfigError("mesh tets array length not a multiple of 4");
  for (std::size_t i = 0; i < tets.size(); i += 4)
    mesh.tets.push_back({tets[i].get<int>(), tets[i + 1].get<int>(), tets[i + 2].get<int>(), tets[i + 3].get<int>()});
  mesh.fixed_node_ids = j.at("fixed").get<std::vector<int>>();
  mesh.validate();
  return mesh;
}

// ---------------------------------------------------------------------------
// Parametric three-phalanx finger mesher.
//
// The finger is a notched beam: length along +y, height along +z, width along
// x, clamped at y = 0. Two slots at ~L/3 and ~2L/3 cut the beam down to
// `joint_height`, forming the flexible joints between phalanges. Cables run
// along the bottom face (z = 0), so pulling them bends the finger toward -z.
// The cell topology is fixed per resolution level; node positions vary
// smoothly with the parameters (the notch-floor layers are rescaled
// vertically to match joint_height), so condensed dimensions and constraint
// attachment are resolution- and parameter-stable.
// ---------------------------------------------------------------------------

struct DesignParams {
  double length = 40.0;        // mm
  double height = 21.0;        // mm
  double joint_height = 6.5;   // mm

  Vec as_vec() const { return Vec{{length, height, joint_height}}; }
  static DesignParams from_vec(const Vec& v) { return {v[0], v[1], v[2]}; }
};

enum class MeshResolution { coarse = 0, medium = 1, fine = 2 };

inline MeshResolution mesh_resolution_from_string(const std::string& s) {
  if (s == "coarse") return MeshResolution::coarse;
  if (s == "medium") return MeshResolution::medium;
  if (s == "fine") return MeshResolution::fine;
  throw ConfigError("unknown mesh resolution: " + s);
}

struct FingerMesh {
  Mesh mesh;
  // Node columns usable as cable via points, ordered base -> tip.
  // Columns 0..2: bottom face at x = -w/2, 0, +w/2; columns 3..5: top face.
  std::array<std::vector<int>, 6> cable_columns;
  int tip_center_node = -1;                 // tip, mid height
  std::array<int, 3> tip_bottom_nodes{};    // tip, z = 0, at x = -w/2, 0, +w/2
};

namespace detail {

inline void finger_grid_size(MeshResolution res, int& nx, int& ny, int& nz) {
  switch (res) {
    case MeshResolution::coarse: nx = 2; ny = 10; nz = 4; break;
    case MeshResolution::medium: nx = 2; ny = 16; nz = 6; break;
    case MeshResolution::fine:   nx = 4; ny = 20; nz = 8; break;
  }
}

inline FingerMesh box_beam_mesh(double length, double height, double width, int nx, int ny, int nz,
                                bool notched, double joint_height, bool axis_up) {
  if (!(length > 0.0 && height > 0.0 && width > 0.0)) throw ConfigError("beam dimensions must be positive");
  const double dx = width / nx, dy = length / ny, dz = height / nz;

  const int jy1 = ny / 3, jy2 = (2 * ny) / 3;
  const int keep_layers = notched ? std::max(1, static_cast<int>(std::lround(nz * 6.5 / 21.0))) : nz;
  if (notched && keep_layers >= nz) throw ConfigError("mesh too coarse for a notch");
  auto is_joint_column = [&](int j) { return notched && (j == jy1 || j == jy2); };

  Mesh mesh;
  std::map<std::array<int, 3>, int> node_id;
  auto get_node = [&](int i, int j, int k) {
    auto key = std::array<int, 3>{i, j, k};
    auto it = node_id.find(key);
    if (it != node_id.end()) return it->second;
    double z;
    if (is_joint_column(j) || is_joint_column(j - 1)) {
      // Notch wall station: notch floor at joint_height, wall rising to the top.
      if (k <= keep_layers)
        z = k * dz * (joint_height / (keep_layers * dz));
      else
        z = joint_height + (k - keep_layers) * (height - joint_height) / (nz - keep_layers);
    } else {
      z = k * dz;
    }
    int id = mesh.num_nodes();
    mesh.nodes.emplace_back(-width / 2.0 + i * dx, j * dy, z);
    node_id.emplace(key, id);
    return id;
  };

  // 6-tet decomposition of a hexahedral cell; mirrored in x for cells in the
  // right half so the mesh is exactly symmetric about the x = 0 plane.
  static const int kTets[6][4] = {{0, 1, 3, 7}, {0, 1, 7, 5}, {0, 5, 7, 4},
                                  {1, 2, 3, 7}, {1, 2, 7, 6}, {1, 6, 7, 5}};
  static const int kMirror[8] = {1, 0, 3, 2, 5, 4, 7, 6};
  for (int j = 0; j < ny; ++j) {
    int layers = is_joint_column(j) ? keep_layers : nz;
    for (int k = 0; k < layers; ++k) {
      for (int i = 0; i < nx; ++i) {
        int c[8] = {get_node(i, j, k),         get_node(i + 1, j, k),
                    get_node(i + 1, j + 1, k), get_node(i, j + 1, k),
                    get_node(i, j, k + 1),     get_node(i + 1, j, k + 1),
                    get_node(i + 1, j + 1, k + 1), get_node(i, j + 1, k + 1)};
        bool mirrored = 2 * i >= nx;
        for (const auto& t : kTets) {
          if (!mirrored)
            mesh.tets.push_back({c[t[0]], c[t[1]], c[t[2]], c[t[3]]});
          else
            mesh.tets.push_back({c[kMirror[t[0]]], c[kMirror[t[1]]], c[kMirror[t[3]]], c[kMirror[t[2]]]});
        }
      }
    }
  }

  for (const auto& [key, id] : node_id)
    if (key[1] == 0) mesh.fixed_node_ids.push_back(id);
  std::sort(mesh.fixed_node_ids.begin(), mesh.fixed_node_ids.end());

  FingerMesh fm;
  const int xcol[3] = {0, nx / 2, nx};
  for (int c = 0; c < 3; ++c)
    for (int j = 0; j <= ny; ++j) {
      fm.cable_columns[static_cast<std::size_t>(c)].push_back(get_node(xcol[c], j, 0));
      fm.cable_columns[static_cast<std::size_t>(c + 3)].push_back(get_node(xcol[c], j, nz));
    }
  fm.tip_center_node = get_node(nx / 2, ny, nz / 2);
  for (int c = 0; c < 3; ++c) fm.tip_bottom_nodes[static_cast<std::size_t>(c)] = get_node(xcol[c], ny, 0);

  if (axis_up) {
    // (x, y, z) -> (x, -z, y): beam along +z, bottom-cable bending toward +y.
    for (auto& n : mesh.nodes) n = Vec3(n.x(), -n.z(), n.y());
  }

  fm.mesh = std::move(mesh);
  fm.mesh.validate();
  return fm;
}

}  // namespace detail

// `axis_up = false`: beam along +y (manipulation scenarios).
// `axis_up = true`: beam along +z, bending toward +y (design scenarios: the
// bending angle is measured from the z axis).
inline FingerMesh parametric_finger_mesh(const DesignParams& p, MeshResolution res = MeshResolution::coarse,
                                         bool axis_up = false) {
  if (!(p.length > 0.0 && p.height > 0.0 && p.joint_height > 0.0))
    throw ConfigError("finger parameters must be positive");
  if (p.joint_height >= p.height) throw ConfigError("joint_height must be smaller than height");
  int nx, ny, nz;
  detail::finger_grid_size(res, nx, ny, nz);
  return detail::box_beam_mesh(p.length, p.height, 0.6 * p.height, nx, ny, nz, true, p.joint_height, axis_up);
}

// Plain (un-notched) beam; used for the 6-cable trunk analog and test beams.
inline FingerMesh box_beam_mesh(double length, double height, double width, MeshResolution res,
                                bool axis_up = false) {
  int nx, ny, nz;
  detail::finger_grid_size(res, nx, ny, nz);
  return detail::box_beam_mesh(length, height, width, nx, ny, nz, false, 0.0, axis_up);
}

}  // namespace condfem
