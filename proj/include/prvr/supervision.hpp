#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "prvr/similarity.hpp"
#include "prvr/tensor.hpp"

namespace prvr {

enum class DecayKind { exponential, linear, sigmoid, fixed };
enum class TimeUnit { epoch, step };

inline std::string to_string(DecayKind k) {
  switch (k) {
    case DecayKind::exponential: return "exponential";
    case DecayKind::linear: return "linear";
    case DecayKind::sigmoid: return "sigmoid";
    case DecayKind::fixed: return "fixed";
  }
  return "?";
}

inline DecayKind decay_kind_from(const std::string& s) {
  if (s == "exponential") return DecayKind::exponential;
  if (s == "linear") return DecayKind::linear;
  if (s == "sigmoid") return DecayKind::sigmoid;
  if (s == "fixed") return DecayKind::fixed;
  throw ParameterError("unknown decay kind '" + s + "'");
}

// g(t) controlling how w, alpha and beta shrink over training time.
//   exponential: g(t) = k^t            with 0 < k < 1
//   linear:      g(t) = k*t + b        with k < 0, 0 < b <= 1, clamped above 0
//   sigmoid:     g(t) = k / (k + e^{t/k})  with k > 0
//   fixed:       g(t) = 1
struct DecaySchedule {
  DecayKind kind = DecayKind::fixed;
  double factor = 0.0;     // k
  double intercept = 1.0;  // b, linear only
  TimeUnit time_unit = TimeUnit::epoch;

  void validate() const {
    switch (kind) {
      case DecayKind::exponential:
        if (!(factor > 0.0 && factor < 1.0))
          throw ParameterError("exponential decay needs 0 < k < 1, got k=" +
                               std::to_string(factor));
        break;
      case DecayKind::linear:
        if (!(factor < 0.0))
          throw ParameterError("linear decay needs k < 0, got k=" + std::to_string(factor));
        if (!(intercept > 0.0 && intercept <= 1.0))
          throw ParameterError("linear decay needs 0 < b <= 1, got b=" +
                               std::to_string(intercept));
        break;
      case DecayKind::sigmoid:
        if (!(factor > 0.0))
          throw ParameterError("sigmoid decay needs k > 0, got k=" + std::to_string(factor));
        break;
      case DecayKind::fixed:
        break;
    }
  }
};

inline double decay_value(const DecaySchedule& schedule, std::size_t t) {
  schedule.validate();
  double td = static_cast<double>(t);
  switch (schedule.kind) {
    case DecayKind::exponential:
      return std::pow(schedule.factor, td);
    case DecayKind::linear:
      return std::max(schedule.factor * td + schedule.intercept, 1e-12);
    case DecayKind::sigmoid:
      return schedule.factor / (schedule.factor + std::exp(td / schedule.factor));
    case DecayKind::fixed:
      return 1.0;
  }
  return 1.0;
}

// Current decayed weights; each clamped to [0,1] where used as a proportion.
struct ScheduleState {
  double alpha0 = 0.8, beta0 = 0.8, w0 = 0.1;
  DecaySchedule alpha_schedule, beta_schedule, w_schedule;

  double alpha(std::size_t t) const {
    return std::clamp(alpha0 * decay_value(alpha_schedule, t), 0.0, 1.0);
  }
  double beta(std::size_t t) const {
    return std::clamp(beta0 * decay_value(beta_schedule, t), 0.0, 1.0);
  }
  double w(std::size_t t) const { return w0 * decay_value(w_schedule, t); }
};

// Per-batch N x N supervision: the first hard_row_count rows of each matrix
// are exact identity rows, the rest mix the identity with clamped predicted
// similarities. Targets never carry gradients.
struct SoftTargets {
  std::size_t n = 0;
  std::vector<double> t2v;  // row-major n x n
  std::vector<double> v2t;
  std::size_t hard_row_count = 0;

  Tensor t2v_tensor() const { return Tensor({n, n}, t2v); }
  Tensor v2t_tensor() const { return Tensor({n, n}, v2t); }
};

namespace detail {

// rows [hard_rows, n) become beta*I + (1-beta)*clamp(T, 0, 1); each soft row
// is renormalized to sum 1 when requested. A soft row that sums to zero
// (beta = 0 and no positive similarity mass) falls back to the identity row.
inline void fill_target(std::vector<double>& out, const PairwiseMatrix& t, std::size_t hard_rows,
                        double beta, bool row_normalize) {
  std::size_t n = t.n;
  out.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (i < hard_rows) {
      out[i * n + i] = 1.0;
      continue;
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double clamped = std::clamp(t.at(i, j), 0.0, 1.0);
      double v = (1.0 - beta) * clamped + (i == j ? beta : 0.0);
      out[i * n + j] = v;
      sum += v;
    }
    if (row_normalize) {
      if (sum <= 1e-12) {
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (i == j) ? 1.0 : 0.0;
      } else {
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= sum;
      }
    }
  }
}

}  // namespace detail

inline SoftTargets build_soft_targets(const PairwiseMatrix& t, double alpha, double beta,
                                      bool row_normalize = true) {
  if (alpha < 0.0 || alpha > 1.0 || beta < 0.0 || beta > 1.0)
    throw ParameterError("build_soft_targets: alpha/beta outside [0,1]");
  if (t.n == 0) throw BatchError("build_soft_targets: empty matrix");
  SoftTargets out;
  out.n = t.n;
  out.hard_row_count =
      std::min(static_cast<std::size_t>(std::floor(alpha * static_cast<double>(t.n))), t.n);
  detail::fill_target(out.t2v, t, out.hard_row_count, beta, row_normalize);
  PairwiseMatrix tt = t.transposed();
  detail::fill_target(out.v2t, tt, out.hard_row_count, beta, row_normalize);
  return out;
}

inline SoftTargets identity_targets(std::size_t n) {
  PairwiseMatrix zero(n);
  return build_soft_targets(zero, 1.0, 1.0, false);
}

// InfoNCE with soft targets over a similarity matrix node:
//   -(1/N) sum_ij v2t_ij log p_ij  -(1/N) sum_ij t2v_ij log p'_ij
// with p the row-softmax of S/temperature and p' the row-softmax of
// S^T/temperature.
inline Tape::NodeId soft_infonce(Tape& tape, Tape::NodeId s, const SoftTargets& targets,
                                 double temperature) {
  if (temperature <= 0.0)
    throw ParameterError("soft_infonce: temperature must be > 0, got " +
                         std::to_string(temperature));
  const Tensor& sv = tape.value(s);
  if (!sv.is_matrix() || sv.rows() != sv.cols() || sv.rows() != targets.n)
    throw BatchError("soft_infonce: matrix " + sv.shape_str() + " vs targets " +
                     std::to_string(targets.n));
  double n = static_cast<double>(targets.n);
  auto log_p = tape.log(tape.softmax(s, 1, temperature));
  auto log_pt = tape.log(tape.softmax(tape.transpose(s), 1, temperature));
  auto term_v2t = tape.sum(tape.mul(tape.constant(targets.v2t_tensor()), log_p));
  auto term_t2v = tape.sum(tape.mul(tape.constant(targets.t2v_tensor()), log_pt));
  return tape.scale(tape.add(term_v2t, term_t2v), -1.0 / n);
}

// Hinge on the hardest in-batch negatives: for each positive (i,i),
// max(0, m + S[i][j*] - S[i][i]) + max(0, m + S[i*][i] - S[i][i]) with j*
// the strongest off-diagonal in row i and i* in column i (lowest index on
// ties). Mining happens on forward values; gradients flow through the
// selected entries.
inline Tape::NodeId triplet_loss(Tape& tape, Tape::NodeId s, double margin) {
  if (margin < 0.0) throw ParameterError("triplet_loss: margin must be >= 0");
  const Tensor& sv = tape.value(s);
  if (!sv.is_matrix() || sv.rows() != sv.cols())
    throw BatchError("triplet_loss: need square matrix, got " + sv.shape_str());
  std::size_t n = sv.rows();
  if (n < 2) throw BatchError("triplet_loss: batch of " + std::to_string(n) + " has no negatives");
  const Tensor mined = sv;  // mining values snapshot; ops below grow the tape
  Tape::NodeId margin_node = tape.constant(Tensor::scalar(margin));
  std::vector<Tape::NodeId> hinges;
  hinges.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t row_neg = i == 0 ? 1 : 0;
    std::size_t col_neg = i == 0 ? 1 : 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (mined.at(i, j) > mined.at(i, row_neg)) row_neg = j;
      if (mined.at(j, i) > mined.at(col_neg, i)) col_neg = j;
    }
    auto pos = tape.pick(s, i * n + i);
    auto hard_q = tape.pick(s, i * n + row_neg);
    auto hard_v = tape.pick(s, col_neg * n + i);
    hinges.push_back(tape.relu(tape.add(margin_node, tape.sub(hard_q, pos))));
    hinges.push_back(tape.relu(tape.add(margin_node, tape.sub(hard_v, pos))));
  }
  auto stacked = tape.stack_scalars(hinges, 2 * n, 1);
  return tape.scale(tape.sum(stacked), 1.0 / static_cast<double>(n));
}

// L_E = soft InfoNCE + triplet.
inline Tape::NodeId exploration_loss(Tape& tape, Tape::NodeId s, const SoftTargets& targets,
                                     double margin, double temperature) {
  return tape.add(soft_infonce(tape, s, targets, temperature), triplet_loss(tape, s, margin));
}

}  // namespace prvr
