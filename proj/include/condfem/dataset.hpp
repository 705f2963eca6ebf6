#pragma once

#include "condfem/common.hpp"
#include "condfem/constraints.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace condfem {

// Upper triangle of a symmetric matrix, flattened row-major.
inline Vec upper_triangle(const Mat& W) {
  Eigen::Index d = W.rows();
  Vec tri(d * (d + 1) / 2);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = i; j < d; ++j) tri[k++] = W(i, j);
  return tri;
}

inline Mat symmetric_from_triangle(const Vec& tri, Eigen::Index d) {
  if (tri.size() != d * (d + 1) / 2) throw ConfigError("triangle length does not match dimension");
  Mat W(d, d);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = i; j < d; ++j) {
      W(i, j) = tri[k];
      W(j, i) = tri[k];
      ++k;
    }
  return W;
}

// One simulated state. Optional blocks are empty vectors when unused:
// delta_c only for contact sampling, design_p / w0_tri / delta_free0 only for
// design datasets (the rest-state blocks are the G-network output fed to F).
struct SampleRecord {
  Vec delta_a;
  Vec delta_c;
  Vec design_p;
  Vec w0_tri;
  Vec delta_free0;
  Vec w_tri;
  Vec delta_free;

  Vec input() const {
    Vec in(delta_a.size() + delta_c.size() + design_p.size() + w0_tri.size() + delta_free0.size());
    in << delta_a, delta_c, design_p, w0_tri, delta_free0;
    return in;
  }
  Vec output() const {
    Vec out(w_tri.size() + delta_free.size());
    out << w_tri, delta_free;
    return out;
  }
};

// Element-wise mean/std pairs for network inputs and outputs, computed from
// the training split only. Constant columns are floored to keep the transform
// invertible.
struct StandardizationStats {
  Vec in_mean, in_std, out_mean, out_std;
  bool floored = false;

  static constexpr double kStdFloor = 1e-8;

  static void fit_columns(const Mat& rows, Vec& mean, Vec& std_dev, bool* hit_floor) {
    Eigen::Index n = rows.rows(), d = rows.cols();
    if (n == 0) throw ConfigError("cannot fit standardization on an empty split");
    mean = rows.colwise().mean();
    Mat centered = rows.rowwise() - mean.transpose();
    std_dev = (centered.array().square().colwise().sum() / static_cast<double>(n)).sqrt();
    for (Eigen::Index c = 0; c < d; ++c)
      if (std_dev[c] < kStdFloor) {
        std_dev[c] = kStdFloor;
        if (hit_floor) *hit_floor = true;
      }
  }

  void fit(const Mat& inputs, const Mat& outputs) {
    floored = false;
    fit_columns(inputs, in_mean, in_std, &floored);
    fit_columns(outputs, out_mean, out_std, &floored);
  }

  Vec standardize_input(const Vec& v) const { return (v - in_mean).cwiseQuotient(in_std); }
  Vec destandardize_input(const Vec& v) const { return v.cwiseProduct(in_std) + in_mean; }
  Vec standardize_output(const Vec& v) const { return (v - out_mean).cwiseQuotient(out_std); }
  Vec destandardize_output(const Vec& v) const { return v.cwiseProduct(out_std) + out_mean; }

  bool empty() const { return in_mean.size() == 0; }
};

inline nlohmann::json stats_to_json(const StandardizationStats& s) {
  auto vec = [](const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  return {{"in_mean", vec(s.in_mean)},
          {"in_std", vec(s.in_std)},
          {"out_mean", vec(s.out_mean)},
          {"out_std", vec(s.out_std)},
          {"floored", s.floored}};
}

inline StandardizationStats stats_from_json(const nlohmann::json& j) {
  auto vec = [](const nlohmann::json& a) {
    Vec v(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
    return v;
  };
  StandardizationStats s;
  s.in_mean = vec(j.at("in_mean"));
  s.in_std = vec(j.at("in_std"));
  s.out_mean = vec(j.at("out_mean"));
  s.out_std = vec(j.at("out_std"));
  s.floored = j.value("floored", false);
  return s;
}

// Fixed per-record dimension signature; absent blocks have size 0.
struct DatasetDims {
  int n_a = 0, m_c = 0, n_p = 0, n_w0 = 0, n_df0 = 0, d = 0;

  int tri() const { return d * (d + 1) / 2; }
  int input_dim() const { return n_a + m_c + n_p + n_w0 + n_df0; }
  int output_dim() const { return tri() + d; }
  int record_doubles() const { return input_dim() + output_dim(); }
  bool operator==(const DatasetDims&) const = default;
};

// Records plus the manifest needed to reproduce and validate them. The train
// split always occupies records [0, train_count); independently drawn test
// records follow (the split is by construction, not a partition).
struct Dataset {
  static constexpr const char* kFormatTag = "condensed-fem-dataset-v1";

  std::vector<SampleRecord> records;
  std::size_t train_count = 0;
  DatasetDims dims;
  BlockMap block_map;
  std::uint64_t robot_hash = 0;
  std::uint64_t seed = 0;
  Vec bounds_lo, bounds_hi;
  StandardizationStats stats;

  std::size_t test_count() const { return records.size() - train_count; }

  void check_record(const SampleRecord& r) const {
    if (r.delta_a.size() != dims.n_a || r.delta_c.size() != dims.m_c || r.design_p.size() != dims.n_p ||
        r.w0_tri.size() != dims.n_w0 || r.delta_free0.size() != dims.n_df0 || r.w_tri.size() != dims.tri() ||
        r.delta_free.size() != dims.d)
      throw ConfigError("record does not match dataset dimension signature");
    if (!r.input().allFinite() || !r.output().allFinite()) throw NumericalError("non-finite dataset record");
  }

  void to_matrices(Mat& X, Mat& Y, std::size_t first, std::size_t count) const {
    X.resize(static_cast<Eigen::Index>(count), dims.input_dim());
    Y.resize(static_cast<Eigen::Index>(count), dims.output_dim());
    for (std::size_t i = 0; i < count; ++i) {
      X.row(static_cast<Eigen::Index>(i)) = records[first + i].input().transpose();
      Y.row(static_cast<Eigen::Index>(i)) = records[first + i].output().transpose();
    }
  }
  void train_matrices(Mat& X, Mat& Y) const { to_matrices(X, Y, 0, train_count); }
  void test_matrices(Mat& X, Mat& Y) const { to_matrices(X, Y, train_count, test_count()); }

  void fit_stats() {
    Mat X, Y;
    train_matrices(X, Y);
    stats.fit(X, Y);
  }

  void save(const std::string& path_base) const {
    auto vec = [](const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    nlohmann::json manifest = {
        {"format", kFormatTag},
        {"dims",
         {{"n_a", dims.n_a},
          {"m_c", dims.m_c},
          {"n_p", dims.n_p},
          {"n_w0", dims.n_w0},
          {"n_df0", dims.n_df0},
          {"d", dims.d}}},
        {"block_map", {{"n_e", block_map.n_e}, {"n_a", block_map.n_a}, {"m_c", block_map.m_c}}},
        {"count", records.size()},
        {"train_count", train_count},
        {"robot_hash", robot_hash},
        {"seed", seed},
        {"bounds", {{"lo", vec(bounds_lo)}, {"hi", vec(bounds_hi)}}},
    };
    if (!stats.empty()) manifest["stats"] = stats_to_json(stats);
    std::ofstream out(path_base + ".json");
    if (!out) throw ConfigError("cannot open for write: " + path_base + ".json");
    out << manifest.dump(2) << "\n";

    std::vector<double> blob;
    blob.reserve(records.size() * static_cast<std::size_t>(dims.record_doubles()));
    for (const auto& r : records) {
      Vec in = r.input(), out_v = r.output();
      blob.insert(blob.end(), in.data(), in.data() + in.size());
      blob.insert(blob.end(), out_v.data(), out_v.data() + out_v.size());
    }
    write_f64_blob(path_base + ".bin", blob.data(), blob.size());
  }

  static Dataset load(const std::string& path_base) {
    std::ifstream in(path_base + ".json");
    if (!in) throw ConfigError("cannot open for read: " + path_base + ".json");
    nlohmann::json manifest = nlohmann::json::parse(in);
    if (manifest.value("format", "") != kFormatTag) throw ConfigError("unrecognized dataset format tag");

    Dataset ds;
    const auto& jd = manifest.at("dims");
    ds.dims = {jd.at("n_a"), jd.at("m_c"), jd.at("n_p"), jd.at("n_w0"), jd.at("n_df0"), jd.at("d")};
    const auto& jb = manifest.at("block_map");
    ds.block_map = {jb.at("n_e"), jb.at("n_a"), jb.at("m_c")};
    ds.train_count = manifest.at("train_count");
    ds.robot_hash = manifest.at("robot_hash");
    ds.seed = manifest.at("seed");
    auto vec = [](const nlohmann::json& a) {
      Vec v(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
      return v;
    };
    ds.bounds_lo = vec(manifest.at("bounds").at("lo"));
    ds.bounds_hi = vec(manifest.at("bounds").at("hi"));
    if (manifest.contains("stats")) ds.stats = stats_from_json(manifest.at("stats"));

    std::vector<double> blob = read_f64_blob(path_base + ".bin");
    std::size_t count = manifest.at("count");
    std::size_t per = static_cast<std::size_t>(ds.dims.record_doubles());
    if (blob.size() != count * per) throw ConfigError("dataset blob size does not match manifest");
    ds.records.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      const double* p = blob.data() + i * per;
      SampleRecord& r = ds.records[i];
      auto take = [&p](int n) {
        Vec v = Eigen::Map<const Vec>(p, n);
        p += n;
        return v;
      };
      r.delta_a = take(ds.dims.n_a);
      r.delta_c = take(ds.dims.m_c);
      r.design_p = take(ds.dims.n_p);
      r.w0_tri = take(ds.dims.n_w0);
      r.delta_free0 = take(ds.dims.n_df0);
      r.w_tri = take(ds.dims.tri());
      r.delta_free = take(ds.dims.d);
    }
    return ds;
  }
};

// The train and test records were drawn by separate samplers at generation
// time; this splits the stored set back into those two draws.
inline std::pair<Dataset, Dataset> split_train_test(const Dataset& ds) {
  Dataset train = ds, test = ds;
  train.records.assign(ds.records.begin(), ds.records.begin() + static_cast<std::ptrdiff_t>(ds.train_count));
  train.train_count = train.records.size();
  test.records.assign(ds.records.begin() + static_cast<std::ptrdiff_t>(ds.train_count), ds.records.end());
  test.train_count = test.records.size();
  return {std::move(train), std::move(test)};
}

}  // namespace condfem
