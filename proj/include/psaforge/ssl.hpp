#pragma once

// Loss and target math for joint contrastive + box-regression pretraining,
// with a toy per-point MLP encoder and hand-written backward passes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "psaforge/augment.hpp"
#include "psaforge/core.hpp"

namespace psaforge {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class PoolMode { Cluster, Scene };

inline constexpr double kSceneTau = 0.1;
inline constexpr double kClusterTau = 0.04;

struct LossConfig {
  double beta1 = 1.0;
  double beta2 = 0.5;
  double tau = kClusterTau;
  double momentum = 0.999;
  std::size_t queue_size = 4096;
  double anchor_dim = 1.0;
  PoolMode mode = PoolMode::Cluster;
  /// Also use the other key rows of the batch as negatives.
  bool in_batch_negatives = false;

  static LossConfig for_mode(PoolMode m) {
    LossConfig c;
    c.mode = m;
    c.tau = m == PoolMode::Scene ? kSceneTau : kClusterTau;
    return c;
  }

  void validate() const {
    if (!(tau > 0.0)) throw InvalidConfigError("tau must be > 0");
    if (!(beta1 >= 0.0) || !(beta2 >= 0.0)) throw InvalidConfigError("loss weights must be >= 0");
    if (!(momentum >= 0.0 && momentum <= 1.0)) throw InvalidConfigError("momentum must be in [0, 1]");
    if (!(anchor_dim > 0.0)) throw InvalidConfigError("anchor_dim must be > 0");
  }
};

struct TrainConfig {
  double learning_rate = 0.12;
  double sgd_momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 2;
  int iterations = 300;
  /// Points kept per view (uniform subsample); 0 keeps all.
  std::size_t max_points = 384;

  void validate() const {
    if (!(learning_rate > 0.0)) throw InvalidConfigError("learning rate must be > 0");
    if (batch_size < 1 || iterations < 0) throw InvalidConfigError("batch size / iterations out of range");
  }
};

// ---------------------------------------------------------------------------
// Regression targets

inline constexpr int kBoxCode = 7;

/// Per-point (dx, dy, dz, dl, dw, dh, dtheta) offsets from an anchor cube of
/// edge `anchor_dim` at heading 0 placed on the point.
struct RegressionTarget {
  MatrixXd values;  // N x 7
  std::vector<char> valid;

  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), char{1}));
  }
};

inline Eigen::Matrix<double, 1, kBoxCode> encode_box(const Point& p, const Box3D& b, double anchor) {
  const double diag = std::sqrt(2.0) * anchor;
  Eigen::Matrix<double, 1, kBoxCode> t;
  t << (b.cx - p.x) / diag, (b.cy - p.y) / diag, (b.cz - p.z) / anchor, std::log(b.dx / anchor),
      std::log(b.dy / anchor), std::log(b.dz / anchor), wrap_half_pi(b.heading);
  return t;
}

/// Targets for every point with label >= 0; other rows are zero and invalid.
inline RegressionTarget encode_targets(const PointCloud& cloud, const std::vector<Box3D>& boxes,
                                       double anchor_dim) {
  if (!(anchor_dim > 0.0)) throw InvalidConfigError("anchor_dim must be > 0");
  std::map<int, const Box3D*> by_id;
  for (const auto& b : boxes) by_id[b.cluster_id] = &b;
  RegressionTarget t;
  t.values = MatrixXd::Zero(static_cast<Eigen::Index>(cloud.size()), kBoxCode);
  t.valid.assign(cloud.size(), 0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const int l = cloud.label(i);
    if (l < 0) continue;
    const auto it = by_id.find(l);
    if (it == by_id.end()) throw DataError("label " + std::to_string(l) + " has no box");
    t.values.row(static_cast<Eigen::Index>(i)) = encode_box(cloud.points[i], *it->second, anchor_dim);
    t.valid[i] = 1;
  }
  return t;
}

/// Algebraic inverse of encode_box.
inline Box3D decode_box(const Point& p, const Eigen::Ref<const Eigen::RowVectorXd>& pred, double anchor) {
  const double diag = std::sqrt(2.0) * anchor;
  Box3D b;
  b.cx = p.x + pred(0) * diag;
  b.cy = p.y + pred(1) * diag;
  b.cz = p.z + pred(2) * anchor;
  b.dx = anchor * std::exp(pred(3));
  b.dy = anchor * std::exp(pred(4));
  b.dz = anchor * std::exp(pred(5));
  b.heading = wrap_half_pi(pred(6));
  return b;
}

// ---------------------------------------------------------------------------
// Losses

inline double smooth_l1_scalar(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

inline double smooth_l1_grad(double x) {
  return std::abs(x) < 1.0 ? x : (x > 0.0 ? 1.0 : -1.0);
}

/// Sum over the 7 components, mean over valid rows; 0 without valid rows.
/// When `grad` is given it receives dLoss/dPred.
inline double smooth_l1(const MatrixXd& pred, const MatrixXd& target, const std::vector<char>& valid,
                        MatrixXd* grad = nullptr) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols() ||
      valid.size() != static_cast<std::size_t>(pred.rows())) {
    throw InvalidConfigError("smooth_l1 shape mismatch");
  }
  if (grad) *grad = MatrixXd::Zero(pred.rows(), pred.cols());
  const auto n_valid = static_cast<double>(std::count(valid.begin(), valid.end(), char{1}));
  if (n_valid == 0.0) return 0.0;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    if (!valid[static_cast<std::size_t>(i)]) continue;
    for (Eigen::Index c = 0; c < pred.cols(); ++c) {
      const double x = pred(i, c) - target(i, c);
      sum += smooth_l1_scalar(x);
      if (grad) (*grad)(i, c) = smooth_l1_grad(x) / n_valid;
    }
  }
  return sum / n_valid;
}

struct PooledRows {
  MatrixXd rows;                      // one row per pooled group
  std::vector<int> group_ids;         // cluster id per row (-1 for scene)
  std::vector<std::vector<Eigen::Index>> argmax;  // per row, per feature column
};

/// Componentwise max over each cluster's points (cluster mode, clusters in
/// ascending id order) or over all points (scene mode). Ties pick the lowest
/// point index. When `only` is given, cluster mode restricts to those ids.
inline PooledRows pool_features(const MatrixXd& feats, const std::vector<int>& labels, PoolMode mode,
                                const std::set<int>* only = nullptr) {
  if (static_cast<std::size_t>(feats.rows()) != labels.size()) {
    throw InvalidConfigError("pool_features: feature rows must match labels");
  }
  PooledRows out;
  std::map<int, std::vector<Eigen::Index>> groups;
  if (mode == PoolMode::Scene) {
    if (feats.rows() > 0) {
      auto& all = groups[-1];
      for (Eigen::Index i = 0; i < feats.rows(); ++i) all.push_back(i);
    }
  } else {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || (only && !only->contains(labels[i]))) continue;
      groups[labels[i]].push_back(static_cast<Eigen::Index>(i));
    }
  }
  out.rows = MatrixXd(static_cast<Eigen::Index>(groups.size()), feats.cols());
  Eigen::Index r = 0;
  for (const auto& [id, idx] : groups) {
    out.group_ids.push_back(id);
    std::vector<Eigen::Index> arg(static_cast<std::size_t>(feats.cols()), idx.front());
    for (Eigen::Index c = 0; c < feats.cols(); ++c) {
      double best = feats(idx.front(), c);
      for (auto i : idx) {
        if (feats(i, c) > best) {
          best = feats(i, c);
          arg[static_cast<std::size_t>(c)] = i;
        }
      }
      out.rows(r, c) = best;
    }
    out.argmax.push_back(std::move(arg));
    ++r;
  }
  return out;
}

struct InfoNceResult {
  double loss = 0.0;
  /// Set when there were no positive pairs; the loss is then 0.
  bool empty = false;
};

/// Mean over i of -log softmax of the positive logit q_i.k_i / tau against
/// the queue negatives (and, optionally, the other key rows). Rows must be
/// unit norm. `grad_q` receives dLoss/dQ.
inline InfoNceResult infonce(const MatrixXd& q, const MatrixXd& k, const MatrixXd& negatives, double tau,
                             bool in_batch = false, MatrixXd* grad_q = nullptr) {
  if (!(tau > 0.0)) throw InvalidConfigError("tau must be > 0");
  if (q.rows() != k.rows() || q.cols() != k.cols() || (negatives.rows() > 0 && negatives.cols() != q.cols())) {
    throw InvalidConfigError("infonce shape mismatch");
  }
  InfoNceResult res;
  if (grad_q) *grad_q = MatrixXd::Zero(q.rows(), q.cols());
  const Eigen::Index m = q.rows();
  if (m == 0) {
    res.empty = true;
    return res;
  }
  const MatrixXd pos = (q.cwiseProduct(k)).rowwise().sum() / tau;               // m x 1
  const MatrixXd neg = negatives.rows() > 0 ? MatrixXd(q * negatives.transpose() / tau) : MatrixXd(m, 0);
  const MatrixXd batch = in_batch ? MatrixXd(q * k.transpose() / tau) : MatrixXd(m, 0);
  double total = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    double mx = pos(i, 0);
    if (neg.cols() > 0) mx = std::max(mx, neg.row(i).maxCoeff());
    for (Eigen::Index j = 0; j < batch.cols(); ++j) {
      if (j != i) mx = std::max(mx, batch(i, j));
    }
    double z = std::exp(pos(i, 0) - mx);
    for (Eigen::Index j = 0; j < neg.cols(); ++j) z += std::exp(neg(i, j) - mx);
    for (Eigen::Index j = 0; j < batch.cols(); ++j) {
      if (j != i) z += std::exp(batch(i, j) - mx);
    }
    const double log_z = mx + std::log(z);
    total += log_z - pos(i, 0);
    if (grad_q) {
      const double scale = 1.0 / (tau * static_cast<double>(m));
      Eigen::RowVectorXd g = (std::exp(pos(i, 0) - log_z) - 1.0) * k.row(i);
      for (Eigen::Index j = 0; j < neg.cols(); ++j) g += std::exp(neg(i, j) - log_z) * negatives.row(j);
      for (Eigen::Index j = 0; j < batch.cols(); ++j) {
        if (j != i) g += std::exp(batch(i, j) - log_z) * k.row(j);
      }
      grad_q->row(i) = scale * g;
    }
  }
  res.loss = total / static_cast<double>(m);
  return res;
}

struct LossBreakdown {
  double l_con = 0.0;
  double l_reg = 0.0;
  double total = 0.0;
  bool contrastive_empty = false;
};

inline LossBreakdown combined_loss(double l_con, double l_reg, const LossConfig& cfg) {
  if (!std::isfinite(l_con)) throw NumericalError("non-finite contrastive loss");
  if (!std::isfinite(l_reg)) throw NumericalError("non-finite regression loss");
  return {l_con, l_reg, cfg.beta1 * l_con + cfg.beta2 * l_reg, false};
}

// ---------------------------------------------------------------------------
// Toy network

struct Dense {
  MatrixXd weight;  // out x in
  VectorXd bias;
};

/// Dense layers with ReLU between them (none after the last).
using Mlp = std::vector<Dense>;

struct EncoderConfig {
  /// Per-point encoder widths; the first must be 4 (x, y, z, intensity).
  std::vector<int> encoder_widths{4, 64, 64, 32};
  std::vector<int> reg_hidden{256, 256};
  int projection_dim = 32;
  /// Coordinates are multiplied by this before entering the encoder.
  double coord_scale = 0.1;
  bool use_intensity = true;
};

struct NetworkParams {
  Mlp encoder;
  Mlp projection;
  Mlp reg_head;
  Mlp key_encoder;
  Mlp key_projection;
};

/// Gradient / velocity storage for the query-side tensors.
struct QueryTensors {
  Mlp encoder;
  Mlp projection;
  Mlp reg_head;
};

inline Mlp make_mlp(const std::vector<int>& widths, SeededRng& rng) {
  Mlp mlp;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    Dense d;
    d.weight = MatrixXd(widths[l + 1], widths[l]);
    const double bound = std::sqrt(6.0 / widths[l]);
    for (Eigen::Index i = 0; i < d.weight.size(); ++i) d.weight.data()[i] = rng.uniform(-bound, bound);
    d.bias = VectorXd::Zero(widths[l + 1]);
    mlp.push_back(std::move(d));
  }
  return mlp;
}

inline Mlp zeros_like(const Mlp& m) {
  Mlp z;
  for (const auto& d : m) z.push_back({MatrixXd::Zero(d.weight.rows(), d.weight.cols()), VectorXd::Zero(d.bias.size())});
  return z;
}

inline QueryTensors zeros_like(const NetworkParams& p) {
  return {zeros_like(p.encoder), zeros_like(p.projection), zeros_like(p.reg_head)};
}

inline NetworkParams init_network(const EncoderConfig& cfg, SeededRng& rng) {
  if (cfg.encoder_widths.size() < 2 || cfg.encoder_widths.front() != 4) {
    throw InvalidConfigError("encoder widths must start at 4 and have at least two entries");
  }
  NetworkParams p;
  const int d = cfg.encoder_widths.back();
  p.encoder = make_mlp(cfg.encoder_widths, rng);
  p.projection = make_mlp({d, cfg.projection_dim}, rng);
  std::vector<int> reg{d};
  reg.insert(reg.end(), cfg.reg_hidden.begin(), cfg.reg_hidden.end());
  reg.push_back(kBoxCode);
  p.reg_head = make_mlp(reg, rng);
  p.key_encoder = p.encoder;
  p.key_projection = p.projection;
  return p;
}

struct NamedTensor {
  std::string name;
  double* data;
  Eigen::Index size;
};

inline void append_tensors(Mlp& m, const std::string& prefix, std::vector<NamedTensor>& out) {
  for (std::size_t l = 0; l < m.size(); ++l) {
    out.push_back({prefix + "." + std::to_string(l) + ".weight", m[l].weight.data(), m[l].weight.size()});
    out.push_back({prefix + "." + std::to_string(l) + ".bias", m[l].bias.data(), m[l].bias.size()});
  }
}

/// Query-side tensors in a fixed order: encoder, projection, reg_head.
inline std::vector<NamedTensor> query_tensors(QueryTensors& t) {
  std::vector<NamedTensor> out;
  append_tensors(t.encoder, "encoder", out);
  append_tensors(t.projection, "projection", out);
  append_tensors(t.reg_head, "reg_head", out);
  return out;
}

inline std::vector<NamedTensor> query_tensors(NetworkParams& p) {
  std::vector<NamedTensor> out;
  append_tensors(p.encoder, "encoder", out);
  append_tensors(p.projection, "projection", out);
  append_tensors(p.reg_head, "reg_head", out);
  return out;
}

inline std::vector<NamedTensor> all_tensors(NetworkParams& p) {
  auto out = query_tensors(p);
  append_tensors(p.key_encoder, "key_encoder", out);
  append_tensors(p.key_projection, "key_projection", out);
  return out;
}

struct MlpCache {
  std::vector<MatrixXd> inputs;  // input of each layer
  std::vector<MatrixXd> pre;     // pre-activation of each layer
};

inline MatrixXd mlp_forward(const Mlp& mlp, const MatrixXd& x, MlpCache* cache = nullptr) {
  MatrixXd a = x;
  for (std::size_t l = 0; l < mlp.size(); ++l) {
    MatrixXd z = (a * mlp[l].weight.transpose()).rowwise() + mlp[l].bias.transpose();
    if (cache) {
      cache->inputs.push_back(a);
      cache->pre.push_back(z);
    }
    a = l + 1 < mlp.size() ? MatrixXd(z.cwiseMax(0.0)) : z;
  }
  return a;
}

/// Accumulates parameter gradients into `grad`; returns dLoss/dInput.
inline MatrixXd mlp_backward(const Mlp& mlp, const MlpCache& cache, const MatrixXd& d_out, Mlp& grad) {
  MatrixXd d = d_out;
  for (std::size_t l = mlp.size(); l-- > 0;) {
    if (l + 1 < mlp.size()) d = d.cwiseProduct((cache.pre[l].array() > 0.0).cast<double>().matrix());
    grad[l].weight.noalias() += d.transpose() * cache.inputs[l];
    grad[l].bias += d.colwise().sum().transpose();
    d = d * mlp[l].weight;
  }
  return d;
}

inline MatrixXd point_features(const PointCloud& cloud, const EncoderConfig& cfg) {
  MatrixXd x(static_cast<Eigen::Index>(cloud.size()), 4);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    x.row(static_cast<Eigen::Index>(i)) << cfg.coord_scale * p.x, cfg.coord_scale * p.y,
        cfg.coord_scale * p.z, cfg.use_intensity ? p.intensity : 0.0;
  }
  return x;
}

/// Predicted 7-vectors for every point of `cloud` from the query encoder.
inline MatrixXd predict_offsets(const NetworkParams& p, const PointCloud& cloud, const EncoderConfig& cfg) {
  return mlp_forward(p.reg_head, mlp_forward(p.encoder, point_features(cloud, cfg)));
}

// ---------------------------------------------------------------------------
// Forward / backward

/// One augmented view, ready for the network.
struct ViewSample {
  PointCloud cloud;  // labelled
  RegressionTarget targets;
};

struct PairSample {
  ViewSample query;
  ViewSample key;
};

struct NegativeQueue {
  MatrixXd rows;       // capacity x dim
  Eigen::Index head = 0;

  /// Random unit rows, the usual initialization for a momentum-contrast queue.
  static NegativeQueue random(std::size_t capacity, int dim, SeededRng& rng) {
    NegativeQueue q;
    q.rows = MatrixXd(static_cast<Eigen::Index>(capacity), dim);
    for (Eigen::Index i = 0; i < q.rows.rows(); ++i) {
      for (Eigen::Index j = 0; j < dim; ++j) q.rows(i, j) = rng.normal();
      q.rows.row(i).normalize();
    }
    return q;
  }

  /// Overwrites the oldest rows (FIFO).
  void enqueue(const MatrixXd& keys) {
    if (rows.rows() == 0) return;
    for (Eigen::Index i = 0; i < keys.rows(); ++i) {
      rows.row(head) = keys.row(i);
      head = (head + 1) % rows.rows();
    }
  }
};

struct ForwardResult {
  LossBreakdown loss;
  QueryTensors grads;
  /// Normalized key embeddings of the batch (to be enqueued).
  MatrixXd keys;
  std::size_t positive_pairs = 0;
};

namespace detail {

inline MatrixXd normalize_rows(const MatrixXd& z, VectorXd* norms = nullptr) {
  MatrixXd out = z;
  if (norms) *norms = VectorXd(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double n = std::max(z.row(i).norm(), 1e-12);
    out.row(i) /= n;
    if (norms) (*norms)(i) = n;
  }
  return out;
}

}  // namespace detail

/// Loss and exact gradients w.r.t. the query-side tensors. The momentum
/// copies and the queue are constants. The regression head sees both
/// views' point features (query encoder on the query view, momentum encoder
/// on the key view), each scored against its own targets.
inline ForwardResult forward_backward(const NetworkParams& p, const std::vector<PairSample>& batch,
                                      const LossConfig& cfg, const EncoderConfig& enc,
                                      const MatrixXd& negatives, bool want_grads = true) {
  cfg.validate();
  ForwardResult out;
  if (want_grads) out.grads = zeros_like(p);

  struct PerView {
    MlpCache enc_cache;
    MatrixXd feats;
  };
  std::vector<PerView> q_views(batch.size());
  std::vector<MatrixXd> k_feats(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    q_views[b].feats = mlp_forward(p.encoder, point_features(batch[b].query.cloud, enc), &q_views[b].enc_cache);
    k_feats[b] = mlp_forward(p.key_encoder, point_features(batch[b].key.cloud, enc));
  }

  // Regression over the concatenated point features of both views.
  Eigen::Index total_rows = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) total_rows += q_views[b].feats.rows() + k_feats[b].rows();
  const Eigen::Index d = p.encoder.back().weight.rows();
  MatrixXd all_feats(total_rows, d);
  MatrixXd all_targets(total_rows, kBoxCode);
  std::vector<char> all_valid;
  all_valid.reserve(static_cast<std::size_t>(total_rows));
  {
    Eigen::Index r = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      for (const auto* part : {&batch[b].query, &batch[b].key}) {
        const MatrixXd& f = part == &batch[b].query ? q_views[b].feats : k_feats[b];
        all_feats.middleRows(r, f.rows()) = f;
        all_targets.middleRows(r, f.rows()) = part->targets.values;
        all_valid.insert(all_valid.end(), part->targets.valid.begin(), part->targets.valid.end());
        r += f.rows();
      }
    }
  }
  MlpCache reg_cache;
  const MatrixXd pred = mlp_forward(p.reg_head, all_feats, &reg_cache);
  MatrixXd d_pred;
  const double l_reg = smooth_l1(pred, all_targets, all_valid, want_grads ? &d_pred : nullptr);

  // Contrastive term on pooled, projected, normalized embeddings.
  std::vector<Eigen::RowVectorXd> q_pooled_rows, k_rows_raw;
  struct PoolRef {
    std::size_t item;
    std::vector<Eigen::Index> argmax;
  };
  std::vector<PoolRef> refs;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ql = batch[b].query.cloud.labels;
    const auto& kl = batch[b].key.cloud.labels;
    const std::vector<int> q_labels = ql.empty() ? std::vector<int>(batch[b].query.cloud.size(), kUnlabeled) : ql;
    const std::vector<int> k_labels = kl.empty() ? std::vector<int>(batch[b].key.cloud.size(), kUnlabeled) : kl;
    std::set<int> shared;
    if (cfg.mode == PoolMode::Cluster) {
      const std::set<int> in_q(q_labels.begin(), q_labels.end());
      for (int l : k_labels) {
        if (l >= 0 && in_q.contains(l)) shared.insert(l);
      }
    }
    const auto qp = pool_features(q_views[b].feats, q_labels, cfg.mode, &shared);
    const auto kp = pool_features(k_feats[b], k_labels, cfg.mode, &shared);
    if (qp.rows.rows() != kp.rows.rows()) continue;  // scene mode with an empty view
    for (Eigen::Index r = 0; r < qp.rows.rows(); ++r) {
      q_pooled_rows.push_back(qp.rows.row(r));
      k_rows_raw.push_back(kp.rows.row(r));
      refs.push_back({b, qp.argmax[static_cast<std::size_t>(r)]});
    }
  }
  const auto m = static_cast<Eigen::Index>(q_pooled_rows.size());
  out.positive_pairs = static_cast<std::size_t>(m);
  MatrixXd q_pooled(m, d), k_pooled(m, d);
  for (Eigen::Index i = 0; i < m; ++i) {
    q_pooled.row(i) = q_pooled_rows[static_cast<std::size_t>(i)];
    k_pooled.row(i) = k_rows_raw[static_cast<std::size_t>(i)];
  }
  MlpCache proj_cache;
  const MatrixXd zq = mlp_forward(p.projection, q_pooled, &proj_cache);
  VectorXd zq_norm;
  const MatrixXd qn = detail::normalize_rows(zq, &zq_norm);
  out.keys = detail::normalize_rows(mlp_forward(p.key_projection, k_pooled));
  MatrixXd d_qn;
  const auto nce = infonce(qn, out.keys, negatives, cfg.tau, cfg.in_batch_negatives, want_grads ? &d_qn : nullptr);

  if (!std::isfinite(nce.loss)) throw NumericalError("non-finite contrastive loss");
  if (!std::isfinite(l_reg)) throw NumericalError("non-finite regression loss");
  out.loss = combined_loss(nce.loss, l_reg, cfg);
  out.loss.contrastive_empty = nce.empty;
  if (!std::isfinite(out.loss.total)) throw NumericalError("non-finite total loss");
  if (!want_grads) return out;

  // Backward: regression head, then split dFeatures back to query views.
  const MatrixXd d_feats_all = mlp_backward(p.reg_head, reg_cache, cfg.beta2 * d_pred, out.grads.reg_head);
  std::vector<MatrixXd> d_feats(batch.size());
  {
    Eigen::Index r = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      d_feats[b] = d_feats_all.middleRows(r, q_views[b].feats.rows());
      r += q_views[b].feats.rows() + k_feats[b].rows();
    }
  }
  if (m > 0) {
    // Through the row normalization: dz = (I - q q^T) dq / |z|.
    MatrixXd d_zq(m, d_qn.cols());
    for (Eigen::Index i = 0; i < m; ++i) {
      const Eigen::RowVectorXd g = cfg.beta1 * d_qn.row(i);
      d_zq.row(i) = (g - qn.row(i).dot(g) * qn.row(i)) / zq_norm(i);
    }
    const MatrixXd d_pooled = mlp_backward(p.projection, proj_cache, d_zq, out.grads.projection);
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto& ref = refs[static_cast<std::size_t>(i)];
      for (Eigen::Index c = 0; c < d; ++c) {
        d_feats[ref.item](ref.argmax[static_cast<std::size_t>(c)], c) += d_pooled(i, c);
      }
    }
  }
  for (std::size_t b = 0; b < batch.size(); ++b) {
    mlp_backward(p.encoder, q_views[b].enc_cache, d_feats[b], out.grads.encoder);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer and momentum encoder

/// Classical momentum with L2 weight decay folded into the gradient:
/// v <- mu * v + (g + wd * theta); theta <- theta - lr * v.
inline void sgd_step(NetworkParams& params, QueryTensors& grads, QueryTensors& velocity,
                     const TrainConfig& cfg) {
  auto p = query_tensors(params);
  auto g = query_tensors(grads);
  auto v = query_tensors(velocity);
  for (std::size_t t = 0; t < p.size(); ++t) {
    if (p[t].size != g[t].size || p[t].size != v[t].size) throw InvalidConfigError("sgd_step shape mismatch");
    for (Eigen::Index i = 0; i < p[t].size; ++i) {
      double& theta = p[t].data[i];
      double& vel = v[t].data[i];
      vel = cfg.sgd_momentum * vel + (g[t].data[i] + cfg.weight_decay * theta);
      theta -= cfg.learning_rate * vel;
    }
  }
}

inline void momentum_update(const Mlp& query, Mlp& key, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw InvalidConfigError("momentum must be in [0, 1]");
  if (query.size() != key.size()) throw InvalidConfigError("momentum_update: layer count mismatch");
  for (std::size_t l = 0; l < query.size(); ++l) {
    if (query[l].weight.rows() != key[l].weight.rows() || query[l].weight.cols() != key[l].weight.cols() ||
        query[l].bias.size() != key[l].bias.size()) {
      throw InvalidConfigError("momentum_update: shape mismatch in layer " + std::to_string(l));
    }
    key[l].weight = m * key[l].weight + (1.0 - m) * query[l].weight;
    key[l].bias = m * key[l].bias + (1.0 - m) * query[l].bias;
  }
}

/// Moves the momentum encoder and projection toward the query side.
inline void momentum_update(NetworkParams& p, double m) {
  momentum_update(p.encoder, p.key_encoder, m);
  momentum_update(p.projection, p.key_projection, m);
}

// ---------------------------------------------------------------------------
// Pretraining loop

/// A preprocessed frame: labels and boxes from pseudo-box generation.
struct TrainFrame {
  PointCloud cloud;
  std::vector<Box3D> boxes;
};

struct PretrainOptions {
  LossConfig loss{};
  TrainConfig train{};
  EncoderConfig encoder{};
  ViewParams views{};
  std::uint64_t seed = 0;
};

struct PretrainResult {
  NetworkParams params;
  std::vector<LossBreakdown> trace;
};

/// Uniform subsample without replacement, original order kept.
inline PointCloud subsample(const PointCloud& cloud, std::size_t max_points, SeededRng& rng) {
  if (max_points == 0 || cloud.size() <= max_points) return cloud;
  std::vector<std::size_t> idx(cloud.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < max_points; ++i) {
    std::swap(idx[i], idx[i + rng.uniform_index(idx.size() - i)]);
  }
  idx.resize(max_points);
  std::sort(idx.begin(), idx.end());
  PointCloud out;
  out.frame_id = cloud.frame_id;
  for (auto i : idx) {
    out.points.push_back(cloud.points[i]);
    if (!cloud.labels.empty()) out.labels.push_back(cloud.labels[i]);
  }
  return out;
}

inline ViewSample make_view_sample(PointCloud cloud, const std::vector<Box3D>& boxes, double anchor) {
  if (cloud.labels.empty()) cloud.labels.assign(cloud.size(), kUnlabeled);
  ViewSample v;
  v.targets = encode_targets(cloud, boxes, anchor);
  v.cloud = std::move(cloud);
  return v;
}

/// Deterministic training batch for iteration `iter`.
inline std::vector<PairSample> make_batch(const std::vector<TrainFrame>& data, const PretrainOptions& opt,
                                          int iter) {
  SeededRng rng = SeededRng(opt.seed).stream(static_cast<std::uint64_t>(iter) + 1);
  std::vector<PairSample> batch;
  for (int b = 0; b < opt.train.batch_size; ++b) {
    const auto& frame = data[rng.uniform_index(data.size())];
    auto views = make_views(frame.cloud, frame.boxes, rng, opt.views);
    auto q = subsample(views.view_q, opt.train.max_points, rng);
    auto k = subsample(views.view_k, opt.train.max_points, rng);
    batch.push_back({make_view_sample(std::move(q), views.boxes_q, opt.loss.anchor_dim),
                     make_view_sample(std::move(k), views.boxes_k, opt.loss.anchor_dim)});
  }
  return batch;
}

/// Joint contrastive + regression pretraining. Each iteration: build a batch
/// of view pairs, forward/backward, SGD step on the query side, momentum
/// update of the key side, then enqueue the batch keys.
template <typename OnIteration>
PretrainResult pretrain(const std::vector<TrainFrame>& data, const PretrainOptions& opt, OnIteration&& on_iter) {
  if (data.empty()) throw DataError("pretraining dataset is empty");
  opt.loss.validate();
  opt.train.validate();
  SeededRng init = SeededRng(opt.seed).stream(0);
  PretrainResult res;
  res.params = init_network(opt.encoder, init);
  auto queue = NegativeQueue::random(opt.loss.queue_size, opt.encoder.projection_dim, init);
  auto velocity = zeros_like(res.params);
  for (int it = 0; it < opt.train.iterations; ++it) {
    const auto batch = make_batch(data, opt, it);
    auto step = forward_backward(res.params, batch, opt.loss, opt.encoder, queue.rows);
    sgd_step(res.params, step.grads, velocity, opt.train);
    momentum_update(res.params, opt.loss.momentum);
    queue.enqueue(step.keys);
    res.trace.push_back(step.loss);
    on_iter(it, step.loss);
  }
  return res;
}

inline PretrainResult pretrain(const std::vector<TrainFrame>& data, const PretrainOptions& opt) {
  return pretrain(data, opt, [](int, const LossBreakdown&) {});
}

struct RegressionEval {
  std::size_t clusters = 0;
  /// Mean distance between each cluster's box centre and the mean of its
  /// points' decoded centres.
  double mean_center_error = 0.0;
};

inline RegressionEval evaluate_regression(const NetworkParams& p, const std::vector<TrainFrame>& frames,
                                          const EncoderConfig& enc, double anchor) {
  RegressionEval ev;
  double sum = 0.0;
  for (const auto& f : frames) {
    const MatrixXd pred = predict_offsets(p, f.cloud, enc);
    std::map<int, std::pair<Vec3, std::size_t>> acc;
    for (std::size_t i = 0; i < f.cloud.size(); ++i) {
      const int l = f.cloud.label(i);
      if (l < 0) continue;
      const Box3D b = decode_box(f.cloud.points[i], pred.row(static_cast<Eigen::Index>(i)), anchor);
      auto& [c, n] = acc[l];
      c = c + b.center();
      ++n;
    }
    for (const auto& box : f.boxes) {
      const auto it = acc.find(box.cluster_id);
      if (it == acc.end()) continue;
      const Vec3 mean = (1.0 / static_cast<double>(it->second.second)) * it->second.first;
      sum += (mean - box.center()).norm();
      ++ev.clusters;
    }
  }
  if (ev.clusters > 0) ev.mean_center_error = sum / static_cast<double>(ev.clusters);
  return ev;
}

}  // namespace psaforge
