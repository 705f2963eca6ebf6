#pragma once

#include "condfem/dataset.hpp"

#include <chrono>
#include <random>

namespace condfem {

// Fully connected network, rectified-linear hidden layers, identity output.
// Operates in standardized units; the physical-unit entry points live in
// predict_condensed / predict_rest below.
struct MlpModel {
  static constexpr const char* kFormatTag = "condensed-fem-mlp-v1";

  enum class Role { F, G };

  Role role = Role::F;
  std::vector<int> sizes;  // input, hidden..., output
  std::vector<Mat> W;      // W[l] maps layer l to l+1: sizes[l+1] x sizes[l]
  std::vector<Vec> b;
  double dropout = 0.0;  // training-time only
  StandardizationStats stats;
  DatasetDims dims;
  BlockMap block_map;
  std::uint64_t dataset_hash = 0;
  std::uint64_t seed = 0;

  static MlpModel make(Role role, const std::vector<int>& sizes, std::uint64_t seed, double dropout = 0.0) {
    if (sizes.size() < 2) throw ConfigError("network needs at least input and output layers");
    for (int s : sizes)
      if (s <= 0) throw ConfigError("layer sizes must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
    MlpModel m;
    m.role = role;
    m.sizes = sizes;
    m.seed = seed;
    m.dropout = dropout;
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      double limit = std::sqrt(6.0 / static_cast<double>(sizes[l]));  // He-uniform, fan-in scaled
      std::uniform_real_distribution<double> uni(-limit, limit);
      Mat w(sizes[l + 1], sizes[l]);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = uni(rng);
      m.W.push_back(std::move(w));
      m.b.push_back(Vec::Zero(sizes[l + 1]));
    }
    return m;
  }

  int input_dim() const { return sizes.front(); }
  int output_dim() const { return sizes.back(); }
  std::size_t layer_count() const { return W.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < W.size(); ++l)
      n += static_cast<std::size_t>(W[l].size()) + static_cast<std::size_t>(b[l].size());
    return n;
  }

  Vec forward(const Vec& x) const {
    if (x.size() != input_dim()) throw ConfigError("network input dimension mismatch");
    Vec a = x;
    for (std::size_t l = 0; l < W.size(); ++l) {
      a = W[l] * a + b[l];
      if (l + 1 < W.size()) a = a.cwiseMax(0.0);
    }
    return a;
  }

  // Batched forward over row-major samples (rows = samples).
  Mat forward_batch(const Mat& X) const {
    Mat a = X;
    for (std::size_t l = 0; l < W.size(); ++l) {
      a = (a * W[l].transpose()).rowwise() + b[l].transpose();
      if (l + 1 < W.size()) a = a.cwiseMax(0.0);
    }
    return a;
  }

  // Exact Jacobian of the piecewise-linear network (almost everywhere):
  // J = W_L diag(z_{L-1} > 0) W_{L-1} ... diag(z_1 > 0) W_1.
  Mat input_jacobian(const Vec& x) const {
    if (x.size() != input_dim()) throw ConfigError("network input dimension mismatch");
    Vec a = x;
    Mat J = Mat::Identity(input_dim(), input_dim());
    for (std::size_t l = 0; l < W.size(); ++l) {
      Vec z = W[l] * a + b[l];
      J = W[l] * J;
      if (l + 1 < W.size()) {
        for (Eigen::Index i = 0; i < z.size(); ++i)
          if (z[i] <= 0.0) J.row(i).setZero();
        a = z.cwiseMax(0.0);
      }
    }
    return J;
  }

  void save(const std::string& path_base) const {
    nlohmann::json header = {
        {"format", kFormatTag},
        {"role", role == Role::F ? "F" : "G"},
        {"sizes", sizes},
        {"dropout", dropout},
        {"dims",
         {{"n_a", dims.n_a},
          {"m_c", dims.m_c},
          {"n_p", dims.n_p},
          {"n_w0", dims.n_w0},
          {"n_df0", dims.n_df0},
          {"d", dims.d}}},
        {"block_map", {{"n_e", block_map.n_e}, {"n_a", block_map.n_a}, {"m_c", block_map.m_c}}},
        {"dataset_hash", dataset_hash},
        {"seed", seed},
        {"stats", stats_to_json(stats)},
    };
    std::ofstream out(path_base + ".json");
    if (!out) throw ConfigError("cannot open for write: " + path_base + ".json");
    out << header.dump(2) << "\n";

    std::vector<double> blob;
    for (std::size_t l = 0; l < W.size(); ++l) {
      for (Eigen::Index i = 0; i < W[l].rows(); ++i)
        for (Eigen::Index j = 0; j < W[l].cols(); ++j) blob.push_back(W[l](i, j));
      blob.insert(blob.end(), b[l].data(), b[l].data() + b[l].size());
    }
    write_f64_blob(path_base + ".bin", blob.data(), blob.size());
  }

  static MlpModel load(const std::string& path_base) {
    std::ifstream in(path_base + ".json");
    if (!in) throw ConfigError("cannot open for read: " + path_base + ".json");
    nlohmann::json header = nlohmann::json::parse(in);
    if (header.value("format", "") != kFormatTag) throw ConfigError("unrecognized checkpoint format tag");
    MlpModel m = make(header.at("role") == "F" ? Role::F : Role::G,
                      header.at("sizes").get<std::vector<int>>(), header.at("seed"),
                      header.at("dropout"));
    const auto& jd = header.at("dims");
    m.dims = {jd.at("n_a"), jd.at("m_c"), jd.at("n_p"), jd.at("n_w0"), jd.at("n_df0"), jd.at("d")};
    const auto& jb = header.at("block_map");
    m.block_map = {jb.at("n_e"), jb.at("n_a"), jb.at("m_c")};
    m.dataset_hash = header.at("dataset_hash");
    m.stats = stats_from_json(header.at("stats"));

    std::vector<double> blob = read_f64_blob(path_base + ".bin");
    std::size_t k = 0;
    for (std::size_t l = 0; l < m.W.size(); ++l) {
      for (Eigen::Index i = 0; i < m.W[l].rows(); ++i)
        for (Eigen::Index j = 0; j < m.W[l].cols(); ++j) m.W[l](i, j) = blob.at(k++);
      for (Eigen::Index i = 0; i < m.b[l].size(); ++i) m.b[l][i] = blob.at(k++);
    }
    if (k != blob.size()) throw ConfigError("checkpoint blob size does not match architecture");
    return m;
  }
};

struct TrainConfig {
  int max_epochs = 50000;
  int batch_size = 0;  // 0 = full batch up to 8192 records, else 1024
  double learning_rate = 1e-3;
  double plateau_factor = 0.5;
  int plateau_patience = 500;
  double plateau_threshold = 1e-4;  // relative improvement below this counts as a stall
  double min_learning_rate = 1e-6;
  std::uint64_t seed = 0;
  double early_stop_test_loss = 0.0;  // 0 = train to max_epochs

  void validate() const {
    if (max_epochs <= 0 || learning_rate <= 0.0 || min_learning_rate <= 0.0 || plateau_patience <= 0 ||
        !(plateau_factor > 0.0 && plateau_factor < 1.0))
      throw ConfigError("invalid training configuration");
  }
};

struct TrainReport {
  std::vector<double> train_loss;  // per epoch, standardized units
  std::vector<double> test_loss;
  int best_epoch = -1;
  double best_test_loss = std::numeric_limits<double>::infinity();
  double wall_seconds = 0.0;
  double final_learning_rate = 0.0;
};

// Mean over samples and output elements of the squared reconstruction error,
// in standardized units (so losses from different datasets are comparable).
inline double mse_loss(const Mat& pred, const Mat& target) {
  return (pred - target).array().square().mean();
}

// Adam with reduce-on-plateau on the test loss; the returned model carries the
// parameters of the best test epoch, not the last.
inline TrainReport train(MlpModel& model, const Mat& X_train, const Mat& Y_train, const Mat& X_test,
                         const Mat& Y_test, const TrainConfig& config = {}) {
  config.validate();
  if (X_train.cols() != model.input_dim() || Y_train.cols() != model.output_dim())
    throw ConfigError("training data does not match network dimensions");
  if (X_test.cols() != model.input_dim() || Y_test.cols() != model.output_dim())
    throw ConfigError("test data does not match network dimensions");
  if (X_train.rows() == 0 || X_test.rows() == 0) throw ConfigError("empty training or test split");

  auto t0 = std::chrono::steady_clock::now();
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t n_layers = model.layer_count();
  std::vector<Mat> mW(n_layers), vW(n_layers);
  std::vector<Vec> mB(n_layers), vB(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    mW[l] = Mat::Zero(model.W[l].rows(), model.W[l].cols());
    vW[l] = mW[l];
    mB[l] = Vec::Zero(model.b[l].size());
    vB[l] = mB[l];
  }

  Eigen::Index n = X_train.rows();
  Eigen::Index batch = config.batch_size > 0 ? config.batch_size : (n <= 8192 ? n : 1024);
  batch = std::min(batch, n);

  std::mt19937_64 rng(config.seed ^ 0x747261696e6e6572ull);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  TrainReport report;
  std::vector<Mat> bestW = model.W;
  std::vector<Vec> bestB = model.b;
  double lr = config.learning_rate;
  int since_best = 0;
  double sched_best = std::numeric_limits<double>::infinity();
  long step = 0;

  std::vector<Mat> acts(n_layers + 1);   // post-activation per layer
  std::vector<Mat> masks(n_layers);      // rectifier (and dropout) masks

  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    if (batch < n) std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss_sum = 0.0;
    Eigen::Index seen = 0;
    for (Eigen::Index start = 0; start < n; start += batch) {
      Eigen::Index count = std::min(batch, n - start);
      Mat Xb(count, X_train.cols()), Yb(count, Y_train.cols());
      if (batch == n) {
        Xb = X_train;
        Yb = Y_train;
      } else {
        for (Eigen::Index i = 0; i < count; ++i) {
          Xb.row(i) = X_train.row(order[static_cast<std::size_t>(start + i)]);
          Yb.row(i) = Y_train.row(order[static_cast<std::size_t>(start + i)]);
        }
      }

      // Forward with masks recorded for the backward pass.
      acts[0] = Xb;
      for (std::size_t l = 0; l < n_layers; ++l) {
        Mat z = (acts[l] * model.W[l].transpose()).rowwise() + model.b[l].transpose();
        if (l + 1 < n_layers) {
          masks[l] = (z.array() > 0.0).cast<double>();
          if (model.dropout > 0.0) {
            std::bernoulli_distribution keep(1.0 - model.dropout);
            double inv_keep = 1.0 / (1.0 - model.dropout);
            for (Eigen::Index i = 0; i < masks[l].size(); ++i)
              masks[l].data()[i] *= keep(rng) ? inv_keep : 0.0;
          }
          acts[l + 1] = z.cwiseProduct(masks[l]);
        } else {
          acts[l + 1] = z;
        }
      }

      Mat diff = acts[n_layers] - Yb;
      double batch_loss = diff.array().square().mean();
      if (!std::isfinite(batch_loss))
        throw NumericalError("training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                             " (lr " + std::to_string(lr) + ")");
      epoch_loss_sum += batch_loss * static_cast<double>(count);
      seen += count;

      // Backward: gradient of mean over samples and elements.
      Mat delta = (2.0 / static_cast<double>(count * Y_train.cols())) * diff;
      ++step;
      double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      for (std::size_t l = n_layers; l-- > 0;) {
        Mat gW = delta.transpose() * acts[l];
        Vec gB = delta.colwise().sum().transpose();
        if (l > 0) delta = (delta * model.W[l]).cwiseProduct(masks[l - 1]);
        mW[l] = beta1 * mW[l] + (1.0 - beta1) * gW;
        vW[l] = beta2 * vW[l] + (1.0 - beta2) * gW.cwiseProduct(gW);
        mB[l] = beta1 * mB[l] + (1.0 - beta1) * gB;
        vB[l] = beta2 * vB[l] + (1.0 - beta2) * gB.cwiseProduct(gB);
        model.W[l].array() -= lr * (mW[l] / bc1).array() / ((vW[l] / bc2).array().sqrt() + eps);
        model.b[l].array() -= lr * (mB[l] / bc1).array() / ((vB[l] / bc2).array().sqrt() + eps);
      }
    }

    report.train_loss.push_back(epoch_loss_sum / static_cast<double>(seen));
    double test_loss = mse_loss(model.forward_batch(X_test), Y_test);
    report.test_loss.push_back(test_loss);
    if (!std::isfinite(test_loss))
      throw NumericalError("training diverged: non-finite test loss at epoch " + std::to_string(epoch));

    if (test_loss < report.best_test_loss) {
      report.best_test_loss = test_loss;
      report.best_epoch = epoch;
      bestW = model.W;
      bestB = model.b;
    }
    // The scheduler requires a relative improvement, so a loss creeping toward
    // an asymptote still counts as a plateau.
    if (test_loss < sched_best * (1.0 - config.plateau_threshold)) {
      sched_best = test_loss;
      since_best = 0;
    } else if (++since_best >= config.plateau_patience) {
      lr = std::max(config.min_learning_rate, lr * config.plateau_factor);
      since_best = 0;
    }
    if (config.early_stop_test_loss > 0.0 && test_loss <= config.early_stop_test_loss) break;
  }

  model.W = std::move(bestW);
  model.b = std::move(bestB);
  report.final_learning_rate = lr;
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

inline TrainReport train_on_dataset(MlpModel& model, const Dataset& ds, const TrainConfig& config = {}) {
  if (ds.stats.empty()) throw ConfigError("dataset has no standardization stats");
  Mat Xtr, Ytr, Xte, Yte;
  ds.train_matrices(Xtr, Ytr);
  ds.test_matrices(Xte, Yte);
  for (Mat* m : {&Xtr, &Xte})
    for (Eigen::Index r = 0; r < m->rows(); ++r)
      m->row(r) = ds.stats.standardize_input(m->row(r).transpose()).transpose();
  for (Mat* m : {&Ytr, &Yte})
    for (Eigen::Index r = 0; r < m->rows(); ++r)
      m->row(r) = ds.stats.standardize_output(m->row(r).transpose()).transpose();
  model.stats = ds.stats;
  model.dims = ds.dims;
  model.block_map = ds.block_map;
  model.dataset_hash = ds.robot_hash;
  return train(model, Xtr, Ytr, Xte, Yte, config);
}

struct CondensedPrediction {
  Mat W;  // full symmetric rebuild
  Vec delta_free;
};

// Physical-unit query of F (or of a design F taking the G output blocks).
inline CondensedPrediction predict_condensed(const MlpModel& model, const Vec& delta_a, const Vec& delta_c,
                                             const Vec& w0_tri = Vec(0), const Vec& delta_free0 = Vec(0)) {
  if (delta_a.size() != model.dims.n_a || delta_c.size() != model.dims.m_c ||
      w0_tri.size() != model.dims.n_w0 || delta_free0.size() != model.dims.n_df0)
    throw ConfigError("query does not match the model's dataset signature");
  Vec in(model.input_dim());
  in << delta_a, delta_c, w0_tri, delta_free0;
  Vec out = model.stats.destandardize_output(model.forward(model.stats.standardize_input(in)));
  CondensedPrediction pred;
  pred.W = symmetric_from_triangle(out.head(model.dims.tri()), model.dims.d);
  pred.delta_free = out.tail(model.dims.d);
  return pred;
}

// Physical-unit query of G: design point to rest condensed state.
inline CondensedPrediction predict_rest(const MlpModel& model, const Vec& p) {
  if (model.role != MlpModel::Role::G) throw ConfigError("predict_rest requires a G-role model");
  if (p.size() != model.dims.n_p) throw ConfigError("design point does not match the model signature");
  Vec out = model.stats.destandardize_output(model.forward(model.stats.standardize_input(p)));
  CondensedPrediction pred;
  pred.W = symmetric_from_triangle(out.head(model.dims.tri()), model.dims.d);
  pred.delta_free = out.tail(model.dims.d);
  return pred;
}

struct HyperparameterResult {
  std::vector<int> sizes;
  TrainReport report;
  std::size_t parameter_count = 0;
};

// Trains one candidate per architecture with identical data and seed; selects
// the lowest best-test-loss, breaking ties toward fewer parameters.
inline HyperparameterResult hyperparameter_search(MlpModel::Role role,
                                                  const std::vector<std::vector<int>>& hidden_grid,
                                                  const Dataset& ds, const TrainConfig& config,
                                                  std::vector<HyperparameterResult>* all = nullptr) {
  if (hidden_grid.empty()) throw ConfigError("empty hyperparameter grid");
  HyperparameterResult best;
  bool have_best = false;
  for (const auto& hidden : hidden_grid) {
    std::vector<int> sizes;
    sizes.push_back(ds.dims.input_dim());
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(ds.dims.output_dim());
    MlpModel model = MlpModel::make(role, sizes, config.seed);
    HyperparameterResult r;
    r.sizes = sizes;
    r.report = train_on_dataset(model, ds, config);
    r.parameter_count = model.parameter_count();
    if (all) all->push_back(r);
    bool better = !have_best || r.report.best_test_loss < best.report.best_test_loss ||
                  (r.report.best_test_loss == best.report.best_test_loss &&
                   r.parameter_count < best.parameter_count);
    if (better) {
      best = r;
      have_best = true;
    }
  }
  return best;
}

}  // namespace condfem
