#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "prvr/data.hpp"
#include "prvr/distillation.hpp"
#include "prvr/evaluation.hpp"
#include "prvr/model.hpp"
#include "prvr/supervision.hpp"

namespace prvr {

// distill = teacher-derived soft targets + KL consistency;
// explore = self-derived soft targets, no teacher signal.
enum class LossStyle { distill, explore };

inline std::string to_string(LossStyle s) {
  return s == LossStyle::distill ? "distill" : "explore";
}
inline LossStyle loss_style_from(const std::string& s) {
  if (s == "distill") return LossStyle::distill;
  if (s == "explore") return LossStyle::explore;
  throw ParameterError("unknown loss style '" + s + "'");
}

struct TrainConfig {
  ModelConfig model;
  std::size_t batch_size = 128;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  double learning_rate = 2.5e-4;
  double margin = 0.2;
  double temperature = 0.07;
  double tau_kl = 1.0;
  double w0 = 0.1;
  double alpha0 = 0.8;
  double beta0 = 0.8;
  double sigma = 0.7;
  std::uint64_t seed = 0;
  bool row_normalize_targets = true;
  DecaySchedule w_schedule{DecayKind::exponential, 0.95, 1.0, TimeUnit::epoch};
  DecaySchedule alpha_schedule{DecayKind::sigmoid, 800.0, 1.0, TimeUnit::epoch};
  DecaySchedule beta_schedule{DecayKind::sigmoid, 800.0, 1.0, TimeUnit::epoch};
  bool enable_inheritance = true;
  bool enable_exploration = true;
  LossStyle inheritance_style = LossStyle::distill;
  LossStyle exploration_style = LossStyle::explore;
  double val_fraction = 0.1;
  std::vector<std::size_t> snapshot_epochs;

  void validate() const {
    if (!enable_inheritance && !enable_exploration)
      throw ConfigError("train config disables both branches");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (sigma < 0.0 || sigma > 1.0) throw ConfigError("sigma outside [0,1]");
    if (temperature <= 0.0 || tau_kl <= 0.0)
      throw ConfigError("temperature and tau_kl must be > 0");
    if (margin < 0.0 || w0 < 0.0) throw ConfigError("margin and w0 must be >= 0");
    if (learning_rate < 0.0) throw ConfigError("learning_rate must be >= 0");
    if (val_fraction <= 0.0 || val_fraction >= 1.0)
      throw ConfigError("val_fraction must be in (0,1)");
    w_schedule.validate();
    alpha_schedule.validate();
    beta_schedule.validate();
  }

  // single-branch configurations force the fusion weight onto that branch
  double effective_sigma() const {
    if (!enable_exploration) return 0.0;
    if (!enable_inheritance) return 1.0;
    return sigma;
  }

  static std::size_t sched_time(const DecaySchedule& s, std::size_t epoch, std::size_t step) {
    return s.time_unit == TimeUnit::epoch ? epoch : step;
  }
  double w_at(std::size_t epoch, std::size_t step) const {
    return dynamic_weight(w_schedule, w0, sched_time(w_schedule, epoch, step));
  }
  double alpha_at(std::size_t epoch, std::size_t step) const {
    return std::clamp(
        alpha0 * decay_value(alpha_schedule, sched_time(alpha_schedule, epoch, step)), 0.0, 1.0);
  }
  double beta_at(std::size_t epoch, std::size_t step) const {
    return std::clamp(beta0 * decay_value(beta_schedule, sched_time(beta_schedule, epoch, step)),
                      0.0, 1.0);
  }
};

// ---- optimizer ------------------------------------------------------------------

// Adam with bias-corrected moments; slots are aligned with the parameter
// list handed to optimizer_step.
struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t t = 0;
  std::vector<std::vector<double>> m, v;
};

inline void optimizer_step(AdamState& opt, const std::vector<Tensor*>& params, double lr) {
  if (opt.m.empty()) {
    opt.m.resize(params.size());
    opt.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      opt.m[i].assign(params[i]->numel(), 0.0);
      opt.v[i].assign(params[i]->numel(), 0.0);
    }
  }
  if (opt.m.size() != params.size())
    throw ContractError("optimizer_step: " + std::to_string(params.size()) + " params vs " +
                        std::to_string(opt.m.size()) + " moment slots");
  ++opt.t;
  double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.t));
  double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    if (opt.m[i].size() != p.numel())
      throw ContractError("optimizer_step: parameter " + std::to_string(i) + " shape changed");
    if (p.grad.empty()) continue;  // no gradient flowed; nothing to update
    for (std::size_t j = 0; j < p.numel(); ++j) {
      double g = p.grad[j];
      opt.m[i][j] = opt.beta1 * opt.m[i][j] + (1.0 - opt.beta1) * g;
      opt.v[i][j] = opt.beta2 * opt.v[i][j] + (1.0 - opt.beta2) * g * g;
      double m_hat = opt.m[i][j] / c1;
      double v_hat = opt.v[i][j] / c2;
      p.values[j] -= lr * m_hat / (std::sqrt(v_hat) + opt.eps);
    }
  }
}

// ---- teacher cache ----------------------------------------------------------------

// Precomputed teacher-side quantities: the full partial-similarity matrix
// (mean over teachers, so entries stay in cosine range) and the fused
// distribution for every annotated positive pair (plain sum; the KL term
// normalizes it).
struct TeacherCache {
  std::size_t n_queries = 0;
  std::vector<double> partial;  // [n_videos x n_queries]
  std::vector<SimilarityDistribution> positive_dist;

  double at(std::size_t video, std::size_t query) const {
    return partial[video * n_queries + query];
  }
};

inline TeacherCache build_teacher_cache(const Dataset& ds) {
  if (ds.manifest.teachers.empty())
    throw ConfigError("distillation requested but the dataset lists no teachers");
  std::size_t n_teachers = ds.manifest.teachers.size();
  TeacherCache cache;
  cache.n_queries = ds.n_queries();
  cache.partial.assign(ds.n_videos() * ds.n_queries(), 0.0);
  cache.positive_dist.resize(ds.n_queries());
  parallel_for(ds.n_queries(), [&](std::size_t qi) {
    std::size_t truth = ds.video_index.at(ds.manifest.queries[qi].video_id);
    for (std::size_t t = 0; t < n_teachers; ++t) {
      Tensor qvec = ds.teacher_query_vec(t, qi);
      for (std::size_t vi = 0; vi < ds.n_videos(); ++vi) {
        auto dist = frame_distribution(ds.teacher_video_features[t][vi], qvec);
        double best = *std::max_element(dist.begin(), dist.end());
        cache.partial[vi * ds.n_queries() + qi] += best / static_cast<double>(n_teachers);
        if (vi == truth) {
          if (cache.positive_dist[qi].empty())
            cache.positive_dist[qi].assign(dist.size(), 0.0);
          for (std::size_t f = 0; f < dist.size(); ++f) cache.positive_dist[qi][f] += dist[f];
        }
      }
    }
  });
  return cache;
}

// ---- training step -----------------------------------------------------------------

struct StepLosses {
  double total = 0.0;
  double l_e = 0.0;  // exploration-slot loss
  double l_i = 0.0;  // inheritance-slot loss
  double l_c = 0.0;  // mean KL consistency over slots carrying one
};

namespace detail {

struct BoundBranch {
  BoundEncoder video;
  BoundEncoder text;
};

inline PairwiseMatrix detached_matrix(const Tape& tape, Tape::NodeId node) {
  const Tensor& t = tape.value(node);
  PairwiseMatrix m(t.rows());
  m.sims = t.values;
  return m;
}

}  // namespace detail

inline StepLosses train_step(ModelState& state, AdamState& opt, const Dataset& ds,
                             const TeacherCache* teacher, const Batch& batch,
                             std::size_t epoch, std::size_t global_step,
                             const TrainConfig& cfg) {
  std::size_t n = batch.size();
  if (n < 2) throw BatchError("train_step: batch of " + std::to_string(n));
  double alpha = cfg.alpha_at(epoch, global_step);
  double beta = cfg.beta_at(epoch, global_step);
  double w = cfg.w_at(epoch, global_step);

  Tape tape;
  std::vector<Tape::NodeId> loss_terms;
  StepLosses out;
  std::vector<double> kl_values;

  std::vector<Tensor*> params;
  std::vector<Tape::NodeId> param_nodes;  // aligned with params
  struct Slot {
    bool enabled;
    LossStyle style;
    BranchParams* branch;
    bool is_inheritance;
  };
  Slot slots[2] = {
      {cfg.enable_inheritance, cfg.inheritance_style, &state.inheritance, true},
      {cfg.enable_exploration, cfg.exploration_style, &state.exploration, false},
  };

  struct SlotNodes {
    detail::BoundBranch bound;
    PairwiseNodes pair;
    Tape::NodeId loss;
  };

  for (Slot& slot : slots) {
    if (!slot.enabled) continue;
    SlotNodes sn;
    sn.bound.video = bind_encoder(tape, slot.branch->video, true);
    sn.bound.text = bind_encoder(tape, slot.branch->text, true);

    std::vector<Tape::NodeId> video_nodes(n), sentence_nodes(n);
    for (std::size_t i = 0; i < n; ++i) {
      video_nodes[i] =
          encode_video_nodes(tape, ds.video_features[batch.video_idx[i]], sn.bound.video);
      sentence_nodes[i] =
          encode_text_nodes(tape, ds.query_features[batch.query_idx[i]], sn.bound.text).sentence;
    }
    sn.pair = pairwise_matrix_nodes(tape, video_nodes, sentence_nodes);

    if (slot.style == LossStyle::distill) {
      if (teacher == nullptr)
        throw ConfigError("train_step: distill style requires teacher features");
      PairwiseMatrix t_teacher(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          t_teacher.at(i, j) = teacher->at(batch.video_idx[i], batch.query_idx[j]);
      SoftTargets targets =
          build_soft_targets(t_teacher, alpha, beta, cfg.row_normalize_targets);
      std::vector<SimilarityDistribution> c_teacher(n);
      for (std::size_t i = 0; i < n; ++i)
        c_teacher[i] = teacher->positive_dist[batch.query_idx[i]];
      auto parts =
          inheritance_loss_parts(tape, sn.pair.matrix, targets, sn.pair.diag_distributions,
                                 c_teacher, w, cfg.margin, cfg.temperature, cfg.tau_kl);
      sn.loss = parts.total;
      if (parts.has_kl) kl_values.push_back(tape.value(parts.kl_mean).values[0]);
    } else {
      SoftTargets targets = build_soft_targets(detail::detached_matrix(tape, sn.pair.matrix),
                                               alpha, beta, cfg.row_normalize_targets);
      sn.loss = exploration_loss(tape, sn.pair.matrix, targets, cfg.margin, cfg.temperature);
    }

    double value = tape.value(sn.loss).values[0];
    (slot.is_inheritance ? out.l_i : out.l_e) = value;
    loss_terms.push_back(sn.loss);

    auto branch_params = state.branch_parameters(slot.is_inheritance);
    params.insert(params.end(), branch_params.begin(), branch_params.end());
    param_nodes.insert(param_nodes.end(), sn.bound.video.ordered.begin(),
                       sn.bound.video.ordered.end());
    param_nodes.insert(param_nodes.end(), sn.bound.text.ordered.begin(),
                       sn.bound.text.ordered.end());
  }

  Tape::NodeId total = loss_terms[0];
  for (std::size_t i = 1; i < loss_terms.size(); ++i) total = tape.add(total, loss_terms[i]);
  out.total = tape.value(total).values[0];
  for (double k : kl_values) out.l_c += k;
  if (!kl_values.empty()) out.l_c /= static_cast<double>(kl_values.size());

  if (!std::isfinite(out.total)) {
    std::string ids;
    for (std::size_t i = 0; i < n; ++i)
      ids += (i ? ", " : "") + ds.manifest.videos[batch.video_idx[i]].id + "/" +
             ds.manifest.queries[batch.query_idx[i]].id;
    throw NumericalError("non-finite loss on batch [" + ids + "]");
  }

  tape.backward(total);
  for (std::size_t i = 0; i < params.size(); ++i) tape.export_grad(param_nodes[i], *params[i]);
  optimizer_step(opt, params, cfg.learning_rate);
  return out;
}

// ---- full training loop ---------------------------------------------------------

struct EpochLog {
  std::size_t epoch = 0;
  double l_total = 0, l_e = 0, l_i = 0, l_c = 0;
  double w = 0, alpha = 0, beta = 0;
  RecallReport val;
};

struct FitResult {
  ModelState best;
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_sum_r = 0.0;
};

using EpochHook = std::function<void(std::size_t, const ModelState&, const EpochLog&)>;

namespace detail {

struct SplitPools {
  std::vector<std::size_t> train, val;
};

// manifest split when present; otherwise (or when val is missing) a seeded
// video-level carve-out of `val_fraction` from the training pool
inline SplitPools resolve_train_val(const Dataset& ds, const TrainConfig& cfg) {
  SplitPools pools;
  if (ds.manifest.split.present) {
    pools.train = ds.split_videos("train");
    pools.val = ds.split_videos("val");
  } else {
    for (std::size_t i = 0; i < ds.n_videos(); ++i) pools.train.push_back(i);
  }
  if (pools.val.empty()) {
    Rng rng(cfg.seed ^ 0x76616cULL);  // "val"
    rng.shuffle(pools.train);
    std::size_t n_val = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(cfg.val_fraction *
                                                 static_cast<double>(pools.train.size()))));
    if (n_val >= pools.train.size())
      throw ConfigError("validation carve-out would empty the training split");
    pools.val.assign(pools.train.end() - static_cast<std::ptrdiff_t>(n_val), pools.train.end());
    pools.train.resize(pools.train.size() - n_val);
    std::sort(pools.train.begin(), pools.train.end());
    std::sort(pools.val.begin(), pools.val.end());
  }
  if (pools.train.empty() || pools.val.empty())
    throw ConfigError("empty train or validation split");
  return pools;
}

}  // namespace detail

// Trains up to max_epochs, evaluating validation SumR after each epoch at
// the configured fusion weight, and returns the best-SumR state. Stops once
// SumR has not improved for `patience` epochs.
inline FitResult fit(const TrainConfig& cfg, const Dataset& ds, const EpochHook& hook = {}) {
  cfg.validate();
  auto pools = detail::resolve_train_val(ds, cfg);
  auto val_queries = detail::queries_of_pool(ds, pools.val);
  if (val_queries.empty()) throw ConfigError("validation split has no queries");

  ModelState state = init_model(cfg.model, ds.manifest.video_dim, ds.manifest.text_dim, cfg.seed);

  bool needs_teacher = (cfg.enable_inheritance && cfg.inheritance_style == LossStyle::distill) ||
                       (cfg.enable_exploration && cfg.exploration_style == LossStyle::distill);
  TeacherCache teacher;
  if (needs_teacher) teacher = build_teacher_cache(ds);

  AdamState opt;
  FitResult result;
  result.best = state;
  result.best_sum_r = -1.0;
  double sigma = cfg.effective_sigma();
  std::size_t global_step = 0;
  std::size_t last_improvement = 0;

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    auto batches = make_batches(ds, cfg.batch_size, cfg.seed, epoch, pools.train);
    EpochLog log;
    log.epoch = epoch;
    for (const Batch& batch : batches) {
      StepLosses losses = train_step(state, opt, ds, needs_teacher ? &teacher : nullptr, batch,
                                     epoch, global_step, cfg);
      log.l_total += losses.total;
      log.l_e += losses.l_e;
      log.l_i += losses.l_i;
      log.l_c += losses.l_c;
      ++global_step;
    }
    double nb = static_cast<double>(batches.size());
    log.l_total /= nb;
    log.l_e /= nb;
    log.l_i /= nb;
    log.l_c /= nb;
    log.w = cfg.w_at(epoch, global_step ? global_step - 1 : 0);
    log.alpha = cfg.alpha_at(epoch, global_step ? global_step - 1 : 0);
    log.beta = cfg.beta_at(epoch, global_step ? global_step - 1 : 0);

    auto ranked = rank_pool(state, ds, sigma, pools.val, val_queries);
    log.val = recall_report(ranked);
    result.log.push_back(log);
    if (hook) hook(epoch, state, log);

    // staleness counts strict improvements only; among SumR ties the most
    // recent checkpoint is kept
    if (log.val.sum_r > result.best_sum_r) {
      result.best_sum_r = log.val.sum_r;
      last_improvement = epoch;
    }
    if (log.val.sum_r >= result.best_sum_r) {
      result.best_epoch = epoch;
      result.best = state;
    }
    if (epoch - last_improvement >= cfg.patience) break;
  }
  return result;
}

}  // namespace prvr
