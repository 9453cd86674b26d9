#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "prvr/encoders.hpp"
#include "prvr/tensor.hpp"

namespace prvr {

// Per-frame cosine similarities between a video's frames and one query.
using SimilarityDistribution = std::vector<double>;

// Batch partial-similarity matrix: row = video, column = query. The
// text-to-video view is the transpose.
struct PairwiseMatrix {
  std::size_t n = 0;
  std::vector<double> sims;  // row-major n x n

  PairwiseMatrix() = default;
  explicit PairwiseMatrix(std::size_t n_) : n(n_), sims(n_ * n_, 0.0) {}

  double& at(std::size_t video, std::size_t query) { return sims[video * n + query]; }
  double at(std::size_t video, std::size_t query) const { return sims[video * n + query]; }

  Tensor as_tensor() const { return Tensor({n, n}, sims); }

  PairwiseMatrix transposed() const {
    PairwiseMatrix out(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) out.at(j, i) = at(i, j);
    return out;
  }
};

inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw DimensionError("cosine: length " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw DegenerateInputError("cosine: zero-norm input vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline double cosine(const Tensor& a, const Tensor& b) {
  return cosine(std::span<const double>(a.values), std::span<const double>(b.values));
}

// C = [cos(f_1, q), ..., cos(f_k, q)] over the rows of F.
inline SimilarityDistribution frame_distribution(const Tensor& frames, const Tensor& query) {
  if (!frames.is_matrix() || frames.rows() == 0)
    throw DimensionError("frame_distribution: need [k x z] with k >= 1, got " +
                         frames.shape_str());
  if (frames.cols() != query.numel())
    throw DimensionError("frame_distribution: width " + std::to_string(frames.cols()) +
                         " vs query " + std::to_string(query.numel()));
  std::size_t k = frames.rows(), z = frames.cols();
  double qn = 0.0;
  for (double v : query.values) qn += v * v;
  if (qn == 0.0) throw DegenerateInputError("frame_distribution: zero-norm query");
  qn = std::sqrt(qn);
  SimilarityDistribution out(k);
  for (std::size_t r = 0; r < k; ++r) {
    const double* fr = frames.values.data() + r * z;
    double dot = 0.0, fn = 0.0;
    for (std::size_t j = 0; j < z; ++j) {
      dot += fr[j] * query.values[j];
      fn += fr[j] * fr[j];
    }
    if (fn == 0.0)
      throw DegenerateInputError("frame_distribution: zero-norm frame " + std::to_string(r));
    out[r] = dot / (std::sqrt(fn) * qn);
  }
  return out;
}

inline double partial_similarity(const Tensor& frames, const Tensor& query) {
  SimilarityDistribution c = frame_distribution(frames, query);
  return *std::max_element(c.begin(), c.end());
}

inline double partial_similarity(const EncodedVideo& video, const EncodedQuery& query) {
  return partial_similarity(video.features, query.sentence_vec);
}

inline PairwiseMatrix pairwise_matrix(std::span<const EncodedVideo> videos,
                                      std::span<const EncodedQuery> queries) {
  if (videos.size() != queries.size())
    throw BatchError("pairwise_matrix: " + std::to_string(videos.size()) + " videos vs " +
                     std::to_string(queries.size()) + " queries");
  PairwiseMatrix out(videos.size());
  for (std::size_t i = 0; i < videos.size(); ++i)
    for (std::size_t j = 0; j < queries.size(); ++j)
      out.at(i, j) = partial_similarity(videos[i], queries[j]);
  return out;
}

// (1 - sigma) * inheritance + sigma * exploration.
inline double fuse(double s_inheritance, double s_exploration, double sigma) {
  if (sigma < 0.0 || sigma > 1.0)
    throw ParameterError("fuse: sigma " + std::to_string(sigma) + " outside [0,1]");
  return (1.0 - sigma) * s_inheritance + sigma * s_exploration;
}

// Sample Pearson correlation between two same-length distributions.
inline double branch_correlation(const SimilarityDistribution& a,
                                 const SimilarityDistribution& b) {
  if (a.size() != b.size() || a.size() < 2)
    throw DimensionError("branch_correlation: need equal lengths >= 2, got " +
                         std::to_string(a.size()) + " and " + std::to_string(b.size()));
  std::size_t n = a.size();
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va == 0.0 || vb == 0.0)
    throw DegenerateInputError("branch_correlation: zero variance distribution");
  return cov / (std::sqrt(va) * std::sqrt(vb));
}

// Differentiable batch similarity matrix for training. Returns the [N x N]
// matrix node plus the diagonal frame-distribution nodes, which the
// distillation loss reuses as the student distributions C^s.
struct PairwiseNodes {
  Tape::NodeId matrix;                        // [N x N]
  std::vector<Tape::NodeId> diag_distributions;  // row_cosine(F_i, q_i)
};

inline PairwiseNodes pairwise_matrix_nodes(Tape& tape, std::span<const Tape::NodeId> video_feats,
                                           std::span<const Tape::NodeId> sentence_vecs) {
  if (video_feats.size() != sentence_vecs.size())
    throw BatchError("pairwise_matrix_nodes: " + std::to_string(video_feats.size()) +
                     " videos vs " + std::to_string(sentence_vecs.size()) + " queries");
  std::size_t n = video_feats.size();
  std::vector<Tape::NodeId> entries(n * n);
  PairwiseNodes out;
  out.diag_distributions.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      Tape::NodeId dist = tape.row_cosine(video_feats[i], sentence_vecs[j]);
      entries[i * n + j] = tape.max_reduce(dist).id;
      if (i == j) out.diag_distributions[i] = dist;
    }
  }
  out.matrix = tape.stack_scalars(entries, n, n);
  return out;
}

// CSV with one row per video id, one column per query id, 9 significant digits.
inline void write_pairwise_csv(const PairwiseMatrix& m, std::span<const std::string> video_ids,
                               std::span<const std::string> query_ids, std::ostream& os) {
  if (video_ids.size() != m.n || query_ids.size() != m.n)
    throw BatchError("write_pairwise_csv: id lists do not match matrix size " +
                     std::to_string(m.n));
  os << "video_id";
  for (const auto& q : query_ids) os << "," << q;
  os << "\n";
  char buf[32];
  for (std::size_t i = 0; i < m.n; ++i) {
    os << video_ids[i];
    for (std::size_t j = 0; j < m.n; ++j) {
      std::snprintf(buf, sizeof(buf), "%.9g", m.at(i, j));
      os << "," << buf;
    }
    os << "\n";
  }
}

}  // namespace prvr
