#pragma once

// Loss, metrics, the RAdam optimizer, and the training/evaluation loops.

#include "pointformer/data.hpp"
#include "pointformer/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

namespace pf {

// Mean cross entropy over rows, computed through log-sum-exp.  Gradient
// for row r is (softmax(row) - onehot(target)) / rows.
template <class S>
Var<S> cross_entropy(Tape<S>& t, Var<S> logits, const std::vector<Index>& targets) {
  const Matrix2D<S>& z = t.value(logits);
  const Index rows = z.rows(), cols = z.cols();
  if (static_cast<Index>(targets.size()) != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " logit rows");
  }
  for (Index target : targets) {
    if (target < 0 || target >= cols) {
      throw UsageError("cross_entropy: target " + std::to_string(target) + " not in [0, " +
                       std::to_string(cols) + ")");
    }
  }
  Matrix2D<S> soft(rows, cols);
  S total = S(0);
  for (Index r = 0; r < rows; ++r) {
    const S m = z.row(r).maxCoeff();
    soft.row(r) = (z.row(r).array() - m).exp();
    const S sum = soft.row(r).sum();
    soft.row(r) /= sum;
    total += std::log(sum) + m - z(r, targets[static_cast<std::size_t>(r)]);
  }
  Matrix2D<S> out(1, 1);
  out(0, 0) = total / S(rows);
  return t.push(std::move(out), [logits, soft = std::move(soft),
                                 targets](Tape<S>& tt, const Matrix2D<S>& g) {
    Matrix2D<S> dz = soft;
    for (Index r = 0; r < dz.rows(); ++r) dz(r, targets[static_cast<std::size_t>(r)]) -= S(1);
    dz *= g(0, 0) / S(dz.rows());
    tt.add_grad(logits, dz);
  });
}

template <class S>
Var<S> cross_entropy(Tape<S>& t, Var<S> logits, Index target) {
  return cross_entropy(t, logits, std::vector<Index>{target});
}

template <class S>
double accuracy(const Matrix2D<S>& logits, const std::vector<Index>& targets) {
  if (static_cast<Index>(targets.size()) != logits.rows() || logits.rows() == 0) {
    throw ShapeError("accuracy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(logits.rows()) + " logit rows");
  }
  Index correct = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    correct += argmax_row(logits, r) == targets[static_cast<std::size_t>(r)];
  }
  return double(correct) / double(logits.rows());
}

// Per-sample mean IoU over the category's parts.  A part absent from both
// the prediction and the ground truth contributes IoU 1.
inline double mean_iou(const std::vector<Index>& pred, const std::vector<Index>& truth,
                       Index num_parts) {
  if (pred.size() != truth.size() || pred.empty()) {
    throw UsageError("mean_iou: prediction and truth sizes differ or are empty");
  }
  if (num_parts < 1) throw UsageError("mean_iou: need at least one part");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= num_parts || truth[i] < 0 || truth[i] >= num_parts) {
      throw UsageError("mean_iou: label outside [0, num_parts)");
    }
  }
  double sum = 0.0;
  for (Index p = 0; p < num_parts; ++p) {
    Index inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool in_pred = pred[i] == p;
      const bool in_truth = truth[i] == p;
      inter += in_pred && in_truth;
      uni += in_pred || in_truth;
    }
    sum += uni == 0 ? 1.0 : double(inter) / double(uni);
  }
  return sum / double(num_parts);
}

// ---------------------------------------------------------------------------
// Rectified Adam with decoupled weight decay.

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <class S>
class RAdam {
 public:
  RAdam(std::vector<Parameter<S>*> params, OptimConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    if (cfg_.lr <= 0.0) throw UsageError("RAdam: lr must be positive");
    if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0) {
      throw UsageError("RAdam: betas must lie in [0, 1)");
    }
    if (cfg_.eps <= 0.0 || cfg_.weight_decay < 0.0) {
      throw UsageError("RAdam: eps must be positive and weight decay non-negative");
    }
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto* p : params_) {
      m_.push_back(Matrix2D<S>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix2D<S>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  Index step_count() const { return t_; }
  const OptimConfig& config() const { return cfg_; }

  void zero_grads() {
    for (auto* p : params_) p->zero_grad();
  }

  // One update from the gradients currently held by the parameters.  A
  // parameter whose gradient was never touched counts as zero gradient.
  void step() {
    ++t_;
    const double b1t = std::pow(cfg_.beta1, double(t_));
    const double b2t = std::pow(cfg_.beta2, double(t_));
    const double rho_inf = 2.0 / (1.0 - cfg_.beta2) - 1.0;
    const double rho_t = rho_inf - 2.0 * double(t_) * b2t / (1.0 - b2t);
    const bool rectified = rho_t > 4.0;
    double r_t = 1.0;
    if (rectified) {
      r_t = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                      ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter<S>* p = params_[i];
      Matrix2D<S>& m = m_[i];
      Matrix2D<S>& v = v_[i];
      if (p->grad.size() > 0) {
        if (p->grad.rows() != m.rows() || p->grad.cols() != m.cols()) {
          throw ShapeError("RAdam: gradient shape mismatch for " + p->id);
        }
        m = S(cfg_.beta1) * m + S(1.0 - cfg_.beta1) * p->grad;
        v = S(cfg_.beta2) * v + S(1.0 - cfg_.beta2) * p->grad.cwiseProduct(p->grad);
      } else {
        m *= S(cfg_.beta1);
        v *= S(cfg_.beta2);
      }
      if (cfg_.weight_decay > 0.0) p->value -= S(cfg_.lr * cfg_.weight_decay) * p->value;
      const Matrix2D<S> m_hat = m / S(1.0 - b1t);
      if (rectified) {
        const Matrix2D<S> denom =
            (v / S(1.0 - b2t)).cwiseSqrt() + Matrix2D<S>::Constant(v.rows(), v.cols(), S(cfg_.eps));
        p->value -= S(cfg_.lr * r_t) * m_hat.cwiseQuotient(denom);
      } else {
        p->value -= S(cfg_.lr) * m_hat;
      }
    }
  }

 private:
  std::vector<Parameter<S>*> params_;
  OptimConfig cfg_;
  std::vector<Matrix2D<S>> m_;
  std::vector<Matrix2D<S>> v_;
  Index t_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalOptions {
  SelectionMode selection = SelectionMode::learned;
  std::uint64_t seed = 0;      // drives rotation / permutation / random selection
  bool rotate = false;         // independent uniform rotation per sample
  bool permute = false;        // random row shuffle per sample
  bool want_selections = false;
};

struct EvalReport {
  double loss = 0.0;
  double accuracy = 0.0;  // classification: sample fraction; segmentation: point fraction
  double miou = std::numeric_limits<double>::quiet_NaN();
  std::vector<Index> predictions;                   // classification only
  std::vector<std::vector<Index>> selections;       // per sample, all nets concatenated
};

template <class S>
EvalReport evaluate(ModelParams<S>& params, const std::vector<Sample<S>>& data,
                    const EvalOptions& opts = {}) {
  if (data.empty()) throw UsageError("evaluate: empty dataset");
  const bool seg = params.cfg.task == Task::segmentation;
  EvalMode mode;
  EvalReport rep;
  double loss_sum = 0.0, miou_sum = 0.0;
  Index correct = 0, points = 0, sample_correct = 0;
  for (std::size_t si = 0; si < data.size(); ++si) {
    Sample<S> sample = data[si];
    if (opts.rotate) {
      RngStream rot_rng(derive_seed(opts.seed, 0x407Au, std::uint64_t(si)));
      sample = apply_rotation(std::move(sample), random_rotation<S>(rot_rng));
    }
    std::vector<Index> perm;
    if (opts.permute) {
      RngStream perm_rng(derive_seed(opts.seed, 0x9E24u, std::uint64_t(si)));
      perm.resize(static_cast<std::size_t>(sample.cloud.size()));
      for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<Index>(i);
      perm_rng.shuffle(perm);
      Matrix2D<S> shuffled(sample.cloud.size(), sample.cloud.dim());
      std::vector<Index> shuffled_parts(perm.size());
      for (std::size_t i = 0; i < perm.size(); ++i) {
        shuffled.row(static_cast<Index>(i)) = sample.cloud.data.row(perm[i]);
        if (!sample.part_labels.empty()) {
          shuffled_parts[i] = sample.part_labels[static_cast<std::size_t>(perm[i])];
        }
      }
      sample.cloud.data = std::move(shuffled);
      if (!sample.part_labels.empty()) sample.part_labels = std::move(shuffled_parts);
    }

    Tape<S> t;
    RngStream sel_rng(derive_seed(opts.seed, 0x5E1Eu, std::uint64_t(si)));
    ForwardOut<S> fwd =
        seg ? segment_forward(t, sample.cloud, sample.category, params, mode, opts.selection,
                              &sel_rng)
            : classify_forward(t, sample.cloud, params, mode, opts.selection, &sel_rng);
    const Matrix2D<S>& logits = t.value(fwd.logits);

    if (seg) {
      if (sample.part_labels.size() != static_cast<std::size_t>(sample.cloud.size())) {
        throw DataError("evaluate: segmentation sample lacks per-point labels");
      }
      std::vector<Index> pred(sample.part_labels.size());
      for (Index r = 0; r < logits.rows(); ++r) {
        pred[static_cast<std::size_t>(r)] = argmax_row(logits, r);
        correct += pred[static_cast<std::size_t>(r)] == sample.part_labels[static_cast<std::size_t>(r)];
      }
      points += logits.rows();
      loss_sum += double(t.value(cross_entropy(t, fwd.logits, sample.part_labels))(0, 0));
      miou_sum += mean_iou(pred, sample.part_labels, params.cfg.num_classes);
    } else {
      const Index pred = argmax_row(logits, 0);
      rep.predictions.push_back(pred);
      sample_correct += pred == sample.label;
      loss_sum += double(t.value(cross_entropy(t, fwd.logits, sample.label))(0, 0));
    }
    if (opts.want_selections) {
      std::vector<Index> flat;
      for (const auto& sel : fwd.selections) flat.insert(flat.end(), sel.begin(), sel.end());
      rep.selections.push_back(std::move(flat));
    }
  }
  rep.loss = loss_sum / double(data.size());
  if (seg) {
    rep.accuracy = double(correct) / double(points);
    rep.miou = miou_sum / double(data.size());
  } else {
    rep.accuracy = double(sample_correct) / double(data.size());
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainConfig {
  Index epochs = 10;
  Index batch_size = 8;
  OptimConfig optim;
  double dropout = 0.0;
  bool augment = false;
  AugmentConfig aug;
  SelectionMode selection = SelectionMode::learned;
  std::uint64_t seed = 1;
  std::string checkpoint_path;  // empty: no checkpoint
  std::string metrics_path;     // empty: no metric log
  bool verbose = false;
};

struct EpochMetrics {
  Index epoch = 0;
  double train_loss = 0.0;
  double accuracy = 0.0;
  double miou = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  std::vector<EpochMetrics> history;
};

namespace detail {

inline std::string metrics_line(const EpochMetrics& m, bool seg) {
  char buf[128];
  if (seg) {
    std::snprintf(buf, sizeof buf, "%lld\t%.6f\t%.4f\t%.4f", static_cast<long long>(m.epoch),
                  m.train_loss, m.accuracy, m.miou);
  } else {
    std::snprintf(buf, sizeof buf, "%lld\t%.6f\t%.4f\t-", static_cast<long long>(m.epoch),
                  m.train_loss, m.accuracy);
  }
  return buf;
}

}  // namespace detail

// Minibatch training with the mean-over-samples gradient.  Metrics are
// logged per epoch: training loss plus held-out accuracy (and mean IoU
// for segmentation).  Deterministic for a fixed seed and config.
template <class S>
TrainResult train_loop(ModelParams<S>& params, const std::vector<Sample<S>>& train_data,
                       const std::vector<Sample<S>>& test_data, const TrainConfig& cfg) {
  if (train_data.empty()) throw UsageError("train_loop: empty training set");
  if (cfg.epochs < 0 || cfg.batch_size < 1) {
    throw UsageError("train_loop: epochs must be non-negative and batch_size positive");
  }
  const bool seg = params.cfg.task == Task::segmentation;

  std::ofstream metrics;
  if (!cfg.metrics_path.empty()) {
    metrics.open(cfg.metrics_path);
    if (!metrics) throw DataError(cfg.metrics_path + ": cannot open for writing");
    metrics << "epoch\tloss\taccuracy\tmiou\n";
    metrics.flush();
  }
  if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, params);

  RAdam<S> optim(params.parameter_list(), cfg.optim);
  const std::vector<Sample<S>>& eval_data = test_data.empty() ? train_data : test_data;

  std::vector<Index> order(train_data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Index>(i);

  TrainResult result;
  for (Index epoch = 1; epoch <= cfg.epochs; ++epoch) {
    RngStream shuffle_rng(derive_seed(cfg.seed, 0x0EAFu, std::uint64_t(epoch)));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const S inv_batch = S(1) / S(stop - start);
      optim.zero_grads();
      for (std::size_t bi = start; bi < stop; ++bi) {
        const Index si = order[bi];
        Sample<S> sample = train_data[static_cast<std::size_t>(si)];
        if (cfg.augment) {
          RngStream aug_rng(
              derive_seed(cfg.seed, 0xA096u, std::uint64_t(epoch), std::uint64_t(si)));
          sample = augment(std::move(sample), cfg.aug, aug_rng);
        }
        RngStream drop_rng(derive_seed(cfg.seed, 0xD809u, std::uint64_t(epoch), std::uint64_t(si)));
        EvalMode mode{true, cfg.dropout, &drop_rng};
        RngStream sel_rng(derive_seed(cfg.seed, 0x5E1Eu, std::uint64_t(epoch), std::uint64_t(si)));

        Tape<S> t;
        ForwardOut<S> fwd = seg ? segment_forward(t, sample.cloud, sample.category, params, mode,
                                                  cfg.selection, &sel_rng)
                                : classify_forward(t, sample.cloud, params, mode, cfg.selection,
                                                   &sel_rng);
        Var<S> loss = seg ? cross_entropy(t, fwd.logits, sample.part_labels)
                          : cross_entropy(t, fwd.logits, sample.label);
        loss_sum += double(t.value(loss)(0, 0));
        t.backward(scale(t, loss, inv_batch));
      }
      optim.step();
    }

    EvalOptions eval_opts;
    eval_opts.selection = cfg.selection;
    eval_opts.seed = derive_seed(cfg.seed, 0xE7A1u, std::uint64_t(epoch));
    const EvalReport eval = evaluate(params, eval_data, eval_opts);

    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / double(train_data.size());
    em.accuracy = eval.accuracy;
    em.miou = eval.miou;
    result.history.push_back(em);

    const std::string line = detail::metrics_line(em, seg);
    if (metrics.is_open()) {
      metrics << line << "\n";
      metrics.flush();
    }
    if (cfg.verbose) std::printf("%s\n", line.c_str());
    if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, params);
  }
  if (metrics.is_open() && !metrics) throw DataError(cfg.metrics_path + ": write failed");
  return result;
}

}  // namespace pf
