#pragma once

#include <span>
#include <string>
#include <vector>

#include "prvr/supervision.hpp"

namespace prvr {

// Frozen teacher features for one (video, query) pair. Teacher features are
// never trained; k matches the student-side frame count after subsampling.
struct TeacherRecord {
  Tensor video_feats;  // [k x d], row per frame
  Tensor query_feat;   // [d]
  std::string teacher_id;
};

// C^t = [cos(f_1, q), ..., cos(f_k, q)] over the teacher frames.
inline SimilarityDistribution teacher_distribution(const TeacherRecord& rec) {
  return frame_distribution(rec.video_feats, rec.query_feat);
}

// Multi-teacher fusion by element-wise summation; kl_consistency normalizes
// the result, so scale does not need fixing here.
inline SimilarityDistribution fuse_teachers(std::span<const SimilarityDistribution> dists) {
  if (dists.empty()) throw BatchError("fuse_teachers: empty teacher list");
  std::size_t k = dists[0].size();
  SimilarityDistribution out(k, 0.0);
  for (const auto& d : dists) {
    if (d.size() != k)
      throw BatchError("fuse_teachers: length " + std::to_string(d.size()) + " vs " +
                       std::to_string(k));
    for (std::size_t i = 0; i < k; ++i) out[i] += d[i];
  }
  return out;
}

// D_KL(softmax(C_s / tau) || softmax(C_t / tau)). The student distribution
// is a live tape node; the teacher side is constant.
inline Tape::NodeId kl_consistency(Tape& tape, Tape::NodeId c_student,
                                   const SimilarityDistribution& c_teacher, double tau_kl) {
  if (tau_kl <= 0.0)
    throw ParameterError("kl_consistency: tau_kl must be > 0, got " + std::to_string(tau_kl));
  const Tensor& sv = tape.value(c_student);
  if (!sv.is_vector() || sv.numel() != c_teacher.size() || c_teacher.empty())
    throw DimensionError("kl_consistency: student " + sv.shape_str() + " vs teacher length " +
                         std::to_string(c_teacher.size()));
  std::size_t k = c_teacher.size();

  // log softmax of the constant teacher side, computed directly
  double mx = c_teacher[0];
  for (double v : c_teacher) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : c_teacher) sum += std::exp((v - mx) / tau_kl);
  Tensor log_pt = Tensor::zeros({k});
  for (std::size_t i = 0; i < k; ++i)
    log_pt.values[i] = (c_teacher[i] - mx) / tau_kl - std::log(sum);

  auto ps = tape.softmax(c_student, 0, tau_kl);
  auto diff = tape.sub(tape.log(ps), tape.constant(log_pt));
  return tape.sum(tape.mul(ps, diff));
}

// w(t) = w0 * g(t).
inline double dynamic_weight(const DecaySchedule& schedule, double w0, std::size_t t) {
  if (w0 < 0.0) throw ParameterError("dynamic_weight: w0 must be >= 0");
  return w0 * decay_value(schedule, t);
}

// L_I = w * mean(KL over positive pairs) + soft InfoNCE + triplet. The
// targets come from the teacher pairwise matrix; c_student holds the
// inheritance branch's per-positive-pair frame distributions as tape nodes.
struct InheritanceLossParts {
  Tape::NodeId total;
  Tape::NodeId kl_mean;  // meaningful only when has_kl
  bool has_kl = false;
};

inline InheritanceLossParts inheritance_loss_parts(
    Tape& tape, Tape::NodeId s, const SoftTargets& targets,
    std::span<const Tape::NodeId> c_student, std::span<const SimilarityDistribution> c_teacher,
    double w, double margin, double temperature, double tau_kl) {
  if (c_student.size() != c_teacher.size())
    throw BatchError("inheritance_loss: " + std::to_string(c_student.size()) + " student vs " +
                     std::to_string(c_teacher.size()) + " teacher distributions");
  Tape::NodeId base = exploration_loss(tape, s, targets, margin, temperature);
  if (c_student.empty()) return {base, base, false};
  std::vector<Tape::NodeId> kls;
  kls.reserve(c_student.size());
  for (std::size_t i = 0; i < c_student.size(); ++i)
    kls.push_back(kl_consistency(tape, c_student[i], c_teacher[i], tau_kl));
  auto kl_mean = tape.scale(tape.sum(tape.stack_scalars(kls, kls.size(), 1)),
                            1.0 / static_cast<double>(kls.size()));
  if (w == 0.0) return {base, kl_mean, true};
  return {tape.add(tape.scale(kl_mean, w), base), kl_mean, true};
}

inline Tape::NodeId inheritance_loss(Tape& tape, Tape::NodeId s, const SoftTargets& targets,
                                     std::span<const Tape::NodeId> c_student,
                                     std::span<const SimilarityDistribution> c_teacher, double w,
                                     double margin, double temperature, double tau_kl) {
  return inheritance_loss_parts(tape, s, targets, c_student, c_teacher, w, margin, temperature,
                                tau_kl)
      .total;
}

}  // namespace prvr
