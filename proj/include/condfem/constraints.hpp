#pragma once

#include "condfem/mesh.hpp"

namespace condfem {

// One scalar constraint row: sparse gradient over node positions.
struct ConstraintRow {
  std::vector<std::pair<int, Vec3>> entries;  // (node id, coefficient)

  double dot(const Vec& x) const {
    double s = 0.0;
    for (const auto& [node, c] : entries) s += c.dot(x.segment<3>(3 * node));
    return s;
  }
  void add_to(Vec& out, double scale) const {
    for (const auto& [node, c] : entries) out.segment<3>(3 * node) += scale * c;
  }
};

struct CableActuator {
  std::vector<int> via_nodes;  // ordered base -> tip
  double delta_min = 0.0, delta_max = 20.0;   // course bounds, mm
  double lambda_min = 0.0, lambda_max = 50.0; // effort bounds, N
};

struct EffectorConstraint {
  int node = -1;
  Vec3 goal_train = Vec3::Zero();
};

struct ContactConstraint {
  int node = -1;
  // One row (normal only) or three rows (full frame); unit rows.
  std::vector<Vec3> frame_rows;
};

inline double cable_length(const std::vector<int>& via, const Vec& x) {
  double len = 0.0;
  for (std::size_t i = 0; i + 1 < via.size(); ++i)
    len += (x.segment<3>(3 * via[i + 1]) - x.segment<3>(3 * via[i])).norm();
  return len;
}

// Block layout of the condensed constraint space: effectors first, then
// actuators, then contact rows.
struct BlockMap {
  int n_e = 0;  // effector count (3 rows each)
  int n_a = 0;  // cable count (1 row each)
  int m_c = 0;  // contact scalar rows
  int e_offset() const { return 0; }
  int a_offset() const { return 3 * n_e; }
  int c_offset() const { return 3 * n_e + n_a; }
  int size() const { return 3 * n_e + n_a + m_c; }
  bool operator==(const BlockMap&) const = default;
};

class ConstraintSet {
 public:
  std::vector<CableActuator> actuators;
  std::vector<EffectorConstraint> effectors;
  std::vector<ContactConstraint> contacts;

  BlockMap block_map() const {
    BlockMap bm;
    bm.n_e = static_cast<int>(effectors.size());
    bm.n_a = static_cast<int>(actuators.size());
    for (const auto& c : contacts) bm.m_c += static_cast<int>(c.frame_rows.size());
    return bm;
  }

  void validate(const Mesh& mesh) const {
    std::set<int> fixed(mesh.fixed_node_ids.begin(), mesh.fixed_node_ids.end());
    auto check_node = [&](int id, const char* what, bool allow_fixed) {
      if (id < 0 || id >= mesh.num_nodes()) throw ConfigError(std::string(what) + " node id out of range");
      if (!allow_fixed && fixed.count(id)) throw ConfigError(std::string(what) + " node coincides with a fixed node");
    };
    for (const auto& a : actuators) {
      if (a.via_nodes.size() < 2) throw ConfigError("cable needs at least two via points");
      // Cables may be anchored on the fixed base.
      for (int id : a.via_nodes) check_node(id, "cable via", true);
      if (!(a.delta_min <= a.delta_max && a.lambda_min <= a.lambda_max))
        throw ConfigError("actuator bounds inverted");
    }
    for (const auto& e : effectors) check_node(e.node, "effector", false);
    for (const auto& c : contacts) {
      check_node(c.node, "contact", false);
      if (c.frame_rows.empty()) throw ConfigError("contact has no frame rows");
      for (const auto& r : c.frame_rows)
        if (std::abs(r.norm() - 1.0) > 1e-9) throw ConfigError("contact frame row not unit length");
    }
  }

  // Cache rest cable lengths and contact rest positions.
  void bind_rest_state(const Vec& x_rest) {
    rest_cable_lengths_.clear();
    for (const auto& a : actuators) {
      double len = cable_length(a.via_nodes, x_rest);
      for (std::size_t i = 0; i + 1 < a.via_nodes.size(); ++i) {
        Vec3 seg = x_rest.segment<3>(3 * a.via_nodes[i + 1]) - x_rest.segment<3>(3 * a.via_nodes[i]);
        if (seg.norm() < 1e-12) throw ConfigError("zero-length cable segment at rest");
      }
      rest_cable_lengths_.push_back(len);
    }
    contact_rest_positions_.clear();
    for (const auto& c : contacts) contact_rest_positions_.push_back(x_rest.segment<3>(3 * c.node));
  }

  const std::vector<Vec3>& contact_rest_positions() const { return contact_rest_positions_; }

  // delta_a = rest length - current length: positive when the cable is pulled.
  Vec delta(const Vec& x) const {
    BlockMap bm = block_map();
    Vec d(bm.size());
    for (std::size_t e = 0; e < effectors.size(); ++e)
      d.segment<3>(bm.e_offset() + 3 * static_cast<int>(e)) =
          x.segment<3>(3 * effectors[e].node) - effectors[e].goal_train;
    for (std::size_t a = 0; a < actuators.size(); ++a)
      d[bm.a_offset() + static_cast<int>(a)] = rest_cable_lengths_[a] - cable_length(actuators[a].via_nodes, x);
    int row = bm.c_offset();
    for (std::size_t c = 0; c < contacts.size(); ++c) {
      Vec3 disp = x.segment<3>(3 * contacts[c].node) - contact_rest_positions_[c];
      for (const auto& fr : contacts[c].frame_rows) d[row++] = fr.dot(disp);
    }
    return d;
  }

  std::vector<ConstraintRow> jacobian(const Vec& x) const {
    BlockMap bm = block_map();
    std::vector<ConstraintRow> rows(static_cast<std::size_t>(bm.size()));
    int r = bm.e_offset();
    for (const auto& e : effectors)
      for (int comp = 0; comp < 3; ++comp) rows[static_cast<std::size_t>(r++)].entries = {{e.node, Vec3::Unit(comp)}};
    for (const auto& a : actuators) {
      ConstraintRow& row = rows[static_cast<std::size_t>(r++)];
      std::map<int, Vec3> grad;
      for (std::size_t i = 0; i + 1 < a.via_nodes.size(); ++i) {
        Vec3 seg = x.segment<3>(3 * a.via_nodes[i + 1]) - x.segment<3>(3 * a.via_nodes[i]);
        double len = seg.norm();
        if (len < 1e-12) throw NumericalError("zero-length cable segment");
        Vec3 t = seg / len;
        // d(delta_a)/dx = -d(length)/dx
        grad.try_emplace(a.via_nodes[i], Vec3::Zero()).first->second += t;
        grad.try_emplace(a.via_nodes[i + 1], Vec3::Zero()).first->second -= t;
      }
      for (const auto& [node, g] : grad) row.entries.emplace_back(node, g);
    }
    for (const auto& c : contacts)
      for (const auto& fr : c.frame_rows) rows[static_cast<std::size_t>(r++)].entries = {{c.node, fr}};
    return rows;
  }

  Vec actuator_delta_min() const {
    Vec v(actuators.size());
    for (std::size_t i = 0; i < actuators.size(); ++i) v[static_cast<Eigen::Index>(i)] = actuators[i].delta_min;
    return v;
  }
  Vec actuator_delta_max() const {
    Vec v(actuators.size());
    for (std::size_t i = 0; i < actuators.size(); ++i) v[static_cast<Eigen::Index>(i)] = actuators[i].delta_max;
    return v;
  }
  Vec actuator_lambda_min() const {
    Vec v(actuators.size());
    for (std::size_t i = 0; i < actuators.size(); ++i) v[static_cast<Eigen::Index>(i)] = actuators[i].lambda_min;
    return v;
  }
  Vec actuator_lambda_max() const {
    Vec v(actuators.size());
    for (std::size_t i = 0; i < actuators.size(); ++i) v[static_cast<Eigen::Index>(i)] = actuators[i].lambda_max;
    return v;
  }

 private:
  std::vector<double> rest_cable_lengths_;
  std::vector<Vec3> contact_rest_positions_;
};

}  // namespace condfem
