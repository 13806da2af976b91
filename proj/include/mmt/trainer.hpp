#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmt/common.hpp"
#include "mmt/model.hpp"

namespace mmt {

// Inverse-square-root schedule with linear warmup: the "(base, warmup)"
// shorthand. rate(warmup) = base / sqrt(warmup) and the curve is continuous
// there.
struct LRSchedule {
  double base_rate = 3.0;
  std::int64_t warmup_steps = 40'000;

  double at(std::int64_t step) const {
    if (step < 1) throw std::invalid_argument("schedule step must be >= 1");
    double s = static_cast<double>(step);
    double w = static_cast<double>(warmup_steps);
    return base_rate * std::min(1.0, s / w) / std::sqrt(std::max(s, w));
  }
};

inline double lr_at(const LRSchedule& schedule, std::int64_t step) { return schedule.at(step); }

struct TrainConfig {
  LRSchedule schedule{3.0, 40'000};
  std::int64_t total_steps = 1000;
  std::size_t token_budget = 1024;
  double clip_norm = 1.0;
  double dropout = 0.1;
  double label_smoothing = 0.1;
  std::uint64_t seed = 1;
  std::int64_t checkpoint_every = 500;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;

  void validate() const {
    if (total_steps < 1) throw std::invalid_argument("total_steps must be >= 1");
    if (checkpoint_every < 1 || total_steps < checkpoint_every)
      throw std::invalid_argument("total_steps must be >= checkpoint_every");
    if (clip_norm <= 0.0) throw std::invalid_argument("clip_norm must be > 0");
  }
};

// One adaptive optimizer with shared first/second moment accumulators across
// all tasks; the multilingual mixing happens purely in the data stream.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<std::pair<std::string, Param*>>& params, double beta1, double beta2,
                double eps)
      : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& [name, p] : params_) {
      m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void step(double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Param& p = *params_[i].second;
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
      Matrix m_hat = m_[i] / bc1;
      Matrix v_hat = v_[i] / bc2;
      p.value -= lr * m_hat.cwiseQuotient((v_hat.cwiseSqrt().array() + eps_).matrix());
    }
  }

 private:
  std::vector<std::pair<std::string, Param*>>& params_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<Matrix> m_, v_;
};

inline double global_grad_norm(const std::vector<std::pair<std::string, Param*>>& params) {
  double sum = 0.0;
  for (const auto& [name, p] : params) sum += p->grad.squaredNorm();
  return std::sqrt(sum);
}

// Scales gradients so the global norm is at most max_norm. Returns the
// pre-clip norm. Direction is preserved.
inline double clip_gradients(std::vector<std::pair<std::string, Param*>>& params,
                             double max_norm) {
  double norm = global_grad_norm(params);
  if (norm > max_norm) {
    double scale = max_norm / norm;
    for (auto& [name, p] : params) p->grad *= scale;
  }
  return norm;
}

struct Checkpoint {
  std::int64_t step = 0;
  std::map<std::string, double> dev_metrics;  // per-pair metric, higher is better
  double dev_score = 0.0;                     // mean over dev_metrics
  std::uint64_t param_checksum = 0;
  std::string path;                           // checkpoint file, when written
  std::vector<Matrix> values;                 // parameter snapshot

  void restore(Model& model) const {
    auto& params = model.named_parameters();
    if (params.size() != values.size())
      throw std::invalid_argument("checkpoint does not match model layout");
    for (std::size_t i = 0; i < params.size(); ++i) params[i].second->value = values[i];
  }
};

struct TrainResult {
  std::vector<Checkpoint> checkpoints;
  std::vector<double> losses;      // per step
  std::vector<double> grad_norms;  // post-clip global norms per step
};

using DevEvaluator = std::function<std::map<std::string, double>(const Model&, std::int64_t)>;

// Per step: forward, loss, backward, global-norm clip, Adam update at the
// scheduled rate. Checkpoints (with dev metrics) are taken every
// checkpoint_every steps and at the end. Step metrics go to
// <out_dir>/metrics.jsonl when out_dir is set.
template <typename BatchProvider>
TrainResult train(Model& model, BatchProvider& batches, const TrainConfig& cfg,
                  const std::string& out_dir = "", DevEvaluator dev_eval = {}) {
  cfg.validate();
  TrainResult result;
  AdamOptimizer optimizer(model.named_parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

  std::ofstream metrics;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    metrics.open(out_dir + "/metrics.jsonl");
    if (!metrics) throw std::runtime_error("cannot write metrics under " + out_dir);
  }

  auto fingerprint = [](const Batch& batch) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& ex : batch.examples) {
      for (int id : ex.source_ids) h = fnv1a64(static_cast<std::uint64_t>(id), h);
      for (int id : ex.target_ids) h = fnv1a64(static_cast<std::uint64_t>(id), h);
    }
    return h;
  };

  auto take_checkpoint = [&](std::int64_t step) {
    Checkpoint ckpt;
    ckpt.step = step;
    if (dev_eval) {
      ckpt.dev_metrics = dev_eval(model, step);
      double sum = 0.0;
      for (const auto& [id, v] : ckpt.dev_metrics) sum += v;
      ckpt.dev_score = ckpt.dev_metrics.empty()
                           ? 0.0
                           : sum / static_cast<double>(ckpt.dev_metrics.size());
    }
    ckpt.param_checksum = model.checksum();
    for (const auto& [name, p] : model.named_parameters()) ckpt.values.push_back(p->value);
    if (!out_dir.empty()) {
      ckpt.path = out_dir + "/checkpoint_" + std::to_string(step) + ".ckpt";
      model.save(ckpt.path, step);
    }
    result.checkpoints.push_back(std::move(ckpt));
  };

  for (std::int64_t step = 1; step <= cfg.total_steps; ++step) {
    Batch batch = batches.next();
    model.zero_grads();
    Rng drop_rng(derive_seed(cfg.seed, "dropout", static_cast<std::uint64_t>(step)));
    double loss;
    try {
      loss = model.loss(batch.examples, cfg.label_smoothing, true,
                        model.config().dropout > 0.0 ? &drop_rng : nullptr);
    } catch (const std::runtime_error& e) {
      throw std::runtime_error(std::string(e.what()) + " at step " + std::to_string(step) +
                               ", batch fingerprint " + std::to_string(fingerprint(batch)));
    }
    if (!std::isfinite(loss))
      throw std::runtime_error("non-finite loss at step " + std::to_string(step) +
                               ", batch fingerprint " + std::to_string(fingerprint(batch)));

    clip_gradients(model.named_parameters(), cfg.clip_norm);
    double post_norm = global_grad_norm(model.named_parameters());
    double lr = cfg.schedule.at(step);
    optimizer.step(lr);

    result.losses.push_back(loss);
    result.grad_norms.push_back(post_norm);
    if (metrics.is_open()) {
      metrics.precision(17);
      metrics << "{\"step\":" << step << ",\"loss\":" << loss << ",\"lr\":" << lr
              << ",\"tokens\":" << batch.token_count << ",\"examples\":" << batch.examples.size()
              << ",\"grad_norm\":" << post_norm << "}\n";
    }

    if (step % cfg.checkpoint_every == 0 || step == cfg.total_steps) {
      if (result.checkpoints.empty() || result.checkpoints.back().step != step)
        take_checkpoint(step);
    }
  }
  return result;
}

// strategy "best-dev": highest mean dev metric, later step wins ties;
// strategy "final": last checkpoint.
inline const Checkpoint& select_checkpoint(const std::vector<Checkpoint>& series,
                                           const std::string& strategy) {
  if (series.empty()) throw std::invalid_argument("select_checkpoint: empty series");
  if (strategy == "final") return series.back();
  if (strategy == "best-dev") {
    std::size_t best = 0;
    for (std::size_t i = 1; i < series.size(); ++i)
      if (series[i].dev_score >= series[best].dev_score) best = i;
    return series[best];
  }
  throw std::invalid_argument("unknown checkpoint selection strategy: " + strategy);
}

}  // namespace mmt
