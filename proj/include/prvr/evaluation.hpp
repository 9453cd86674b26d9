#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "prvr/data.hpp"
#include "prvr/model.hpp"
#include "prvr/similarity.hpp"
#include "prvr/util.hpp"

namespace prvr {

struct RankedResult {
  std::string query_id;
  std::vector<std::string> ordered_video_ids;  // descending fused similarity
  std::size_t rank_of_ground_truth = 0;        // 1-based
};

struct RecallReport {
  double r1 = 0, r5 = 0, r10 = 0, r100 = 0;
  double sum_r = 0;
};

struct MvGroupReport {
  std::vector<double> bin_edges;  // n_bins+1 edges over (0,1]
  std::vector<RecallReport> per_bin;
  std::vector<std::size_t> counts;
};

struct MarginReport {
  std::vector<double> positive;
  std::vector<double> negative;
  double center_distance = 0.0;
};

namespace detail {

// encodings of a video/query pool under one branch
struct BranchEncodings {
  std::vector<Tensor> video_feats;     // [k x z] per pool video
  std::vector<Tensor> sentence_vecs;   // [z] per pool query
};

inline BranchEncodings encode_pool(const BranchParams& branch, const Dataset& ds,
                                   std::span<const std::size_t> video_pool,
                                   std::span<const std::size_t> query_pool) {
  BranchEncodings out;
  out.video_feats.resize(video_pool.size());
  out.sentence_vecs.resize(query_pool.size());
  parallel_for(video_pool.size(), [&](std::size_t i) {
    out.video_feats[i] = encode_video(ds.video_features[video_pool[i]], branch.video).features;
  });
  parallel_for(query_pool.size(), [&](std::size_t i) {
    out.sentence_vecs[i] =
        encode_text(ds.query_features[query_pool[i]], branch.text).sentence_vec;
  });
  return out;
}

inline std::vector<std::size_t> eval_videos(const Dataset& ds) {
  auto pool = ds.split_videos("test");
  if (pool.empty())
    for (std::size_t i = 0; i < ds.n_videos(); ++i) pool.push_back(i);
  return pool;
}

inline std::vector<std::size_t> queries_of_pool(const Dataset& ds,
                                                std::span<const std::size_t> video_pool) {
  std::vector<std::size_t> out;
  for (std::size_t vi : video_pool)
    for (std::size_t qi : ds.queries_of_video[vi]) out.push_back(qi);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

// Fused similarity of every pool query against every pool video. Row =
// video position in pool, column = query position.
inline std::vector<double> fused_similarities(const ModelState& model, const Dataset& ds,
                                              double sigma,
                                              std::span<const std::size_t> video_pool,
                                              std::span<const std::size_t> query_pool) {
  if (sigma < 0.0 || sigma > 1.0)
    throw ParameterError("fused_similarities: sigma " + std::to_string(sigma) + " outside [0,1]");
  if (ds.manifest.video_dim != model.video_dim || ds.manifest.text_dim != model.text_dim)
    throw ContractError("model dims (" + std::to_string(model.video_dim) + "," +
                        std::to_string(model.text_dim) + ") do not match dataset dims (" +
                        std::to_string(ds.manifest.video_dim) + "," +
                        std::to_string(ds.manifest.text_dim) + ")");
  bool need_inh = sigma < 1.0;
  bool need_exp = sigma > 0.0;
  detail::BranchEncodings inh, exp;
  if (need_inh) inh = detail::encode_pool(model.inheritance, ds, video_pool, query_pool);
  if (need_exp) exp = detail::encode_pool(model.exploration, ds, video_pool, query_pool);

  std::vector<double> sims(video_pool.size() * query_pool.size(), 0.0);
  parallel_for(query_pool.size(), [&](std::size_t qj) {
    for (std::size_t vi = 0; vi < video_pool.size(); ++vi) {
      double s_i = need_inh ? partial_similarity(inh.video_feats[vi], inh.sentence_vecs[qj]) : 0.0;
      double s_e = need_exp ? partial_similarity(exp.video_feats[vi], exp.sentence_vecs[qj]) : 0.0;
      sims[vi * query_pool.size() + qj] = fuse(s_i, s_e, sigma);
    }
  });
  return sims;
}

inline std::vector<RankedResult> rank_pool(const ModelState& model, const Dataset& ds,
                                           double sigma,
                                           std::span<const std::size_t> video_pool,
                                           std::span<const std::size_t> query_pool) {
  auto sims = fused_similarities(model, ds, sigma, video_pool, query_pool);
  std::vector<RankedResult> out(query_pool.size());
  parallel_for(query_pool.size(), [&](std::size_t qj) {
    std::size_t qi = query_pool[qj];
    const std::string& truth = ds.manifest.queries[qi].video_id;
    std::vector<std::size_t> order(video_pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      double sa = sims[a * query_pool.size() + qj];
      double sb = sims[b * query_pool.size() + qj];
      if (sa != sb) return sa > sb;
      return ds.manifest.videos[video_pool[a]].id < ds.manifest.videos[video_pool[b]].id;
    });
    RankedResult r;
    r.query_id = ds.manifest.queries[qi].id;
    r.ordered_video_ids.reserve(order.size());
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const std::string& vid = ds.manifest.videos[video_pool[order[pos]]].id;
      r.ordered_video_ids.push_back(vid);
      if (vid == truth) r.rank_of_ground_truth = pos + 1;
    }
    if (r.rank_of_ground_truth == 0)
      throw DataError("rank_pool: ground-truth video '" + truth + "' not in candidate pool");
    out[qj] = std::move(r);
  });
  return out;
}

// Ranks every test query against the test candidate videos (whole dataset
// when no split is present).
inline std::vector<RankedResult> rank_all(const ModelState& model, const Dataset& ds,
                                          double sigma) {
  auto videos = detail::eval_videos(ds);
  auto queries = detail::queries_of_pool(ds, videos);
  return rank_pool(model, ds, sigma, videos, queries);
}

inline RecallReport recall_report(std::span<const RankedResult> results) {
  if (results.empty()) throw ContractError("recall_report: no results");
  RecallReport r;
  double n = static_cast<double>(results.size());
  for (const auto& res : results) {
    if (res.rank_of_ground_truth <= 1) r.r1 += 1;
    if (res.rank_of_ground_truth <= 5) r.r5 += 1;
    if (res.rank_of_ground_truth <= 10) r.r10 += 1;
    if (res.rank_of_ground_truth <= 100) r.r100 += 1;
  }
  r.r1 /= n;
  r.r5 /= n;
  r.r10 /= n;
  r.r100 /= n;
  r.sum_r = r.r1 + r.r5 + r.r10 + r.r100;
  return r;
}

enum class MvBinMode { quantile, uniform };

// Per-bin recall over M/V groups. Quantile mode balances query counts per
// bin; uniform mode splits (0,1] evenly.
inline MvGroupReport grouped_by_mv(std::span<const RankedResult> results, const Dataset& ds,
                                   std::size_t n_bins, MvBinMode mode = MvBinMode::quantile) {
  if (n_bins == 0) throw ParameterError("grouped_by_mv: need at least one bin");
  std::vector<double> mv(results.size());
  for (std::size_t i = 0; i < results.size(); ++i) {
    auto it = ds.query_index.find(results[i].query_id);
    if (it == ds.query_index.end())
      throw DataError("grouped_by_mv: unknown query '" + results[i].query_id + "'");
    const auto& q = ds.manifest.queries[it->second];
    std::size_t n_frames = ds.manifest.videos[ds.video_index.at(q.video_id)].n_frames;
    mv[i] = mv_ratio(q.moment, n_frames);
  }

  MvGroupReport report;
  report.bin_edges.assign(n_bins + 1, 0.0);
  report.bin_edges.back() = 1.0;
  if (mode == MvBinMode::uniform) {
    for (std::size_t b = 1; b < n_bins; ++b)
      report.bin_edges[b] = static_cast<double>(b) / static_cast<double>(n_bins);
  } else {
    std::vector<double> sorted = mv;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t b = 1; b < n_bins; ++b)
      report.bin_edges[b] = sorted[(b * sorted.size()) / n_bins == 0
                                       ? 0
                                       : (b * sorted.size()) / n_bins - 1];
    for (std::size_t b = 1; b < n_bins; ++b)
      report.bin_edges[b] = std::max(report.bin_edges[b], report.bin_edges[b - 1]);
  }

  std::vector<std::vector<RankedResult>> groups(n_bins);
  for (std::size_t i = 0; i < results.size(); ++i) {
    std::size_t bin = n_bins - 1;
    for (std::size_t b = 0; b < n_bins; ++b) {
      if (mv[i] <= report.bin_edges[b + 1] + 1e-15) {
        bin = b;
        break;
      }
    }
    groups[bin].push_back(results[i]);
  }
  for (std::size_t b = 0; b < n_bins; ++b) {
    report.counts.push_back(groups[b].size());
    report.per_bin.push_back(groups[b].empty() ? RecallReport{} : recall_report(groups[b]));
  }
  return report;
}

// Fused similarities of every annotated positive pair and every other
// (query, video) pair over the test pool.
inline MarginReport margin_report(const ModelState& model, const Dataset& ds, double sigma) {
  auto videos = detail::eval_videos(ds);
  auto queries = detail::queries_of_pool(ds, videos);
  if (queries.empty()) throw ContractError("margin_report: empty test set");
  auto sims = fused_similarities(model, ds, sigma, videos, queries);
  MarginReport report;
  for (std::size_t vi = 0; vi < videos.size(); ++vi) {
    const std::string& vid = ds.manifest.videos[videos[vi]].id;
    for (std::size_t qj = 0; qj < queries.size(); ++qj) {
      bool positive = ds.manifest.queries[queries[qj]].video_id == vid;
      (positive ? report.positive : report.negative).push_back(sims[vi * queries.size() + qj]);
    }
  }
  auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  };
  report.center_distance = mean(report.positive) - mean(report.negative);
  return report;
}

inline void write_histogram_csv(const MarginReport& report, std::ostream& os,
                                std::size_t n_bins = 50) {
  std::vector<std::size_t> pos(n_bins, 0), neg(n_bins, 0);
  auto bin_of = [n_bins](double v) {
    double t = (std::clamp(v, -1.0, 1.0) + 1.0) / 2.0;  // into [0,1]
    std::size_t b = static_cast<std::size_t>(t * static_cast<double>(n_bins));
    return std::min(b, n_bins - 1);
  };
  for (double v : report.positive) pos[bin_of(v)]++;
  for (double v : report.negative) neg[bin_of(v)]++;
  os << "bin_left,bin_right,pos_count,neg_count\n";
  for (std::size_t b = 0; b < n_bins; ++b) {
    double left = -1.0 + 2.0 * static_cast<double>(b) / static_cast<double>(n_bins);
    double right = -1.0 + 2.0 * static_cast<double>(b + 1) / static_cast<double>(n_bins);
    os << left << "," << right << "," << pos[b] << "," << neg[b] << "\n";
  }
}

// Mean Pearson correlation between the two branches' frame distributions
// over positive pairs (optionally over all pairs). Zero-variance pairs are
// skipped and counted.
inline double complementarity(const ModelState& model, const Dataset& ds,
                              bool positives_only = true, std::size_t* skipped = nullptr) {
  auto videos = detail::eval_videos(ds);
  auto queries = detail::queries_of_pool(ds, videos);
  auto inh = detail::encode_pool(model.inheritance, ds, videos, queries);
  auto exp = detail::encode_pool(model.exploration, ds, videos, queries);
  double total = 0.0;
  std::size_t used = 0, skip = 0;
  for (std::size_t qj = 0; qj < queries.size(); ++qj) {
    const std::string& truth = ds.manifest.queries[queries[qj]].video_id;
    for (std::size_t vi = 0; vi < videos.size(); ++vi) {
      bool positive = ds.manifest.videos[videos[vi]].id == truth;
      if (positives_only && !positive) continue;
      auto c_inh = frame_distribution(inh.video_feats[vi], inh.sentence_vecs[qj]);
      auto c_exp = frame_distribution(exp.video_feats[vi], exp.sentence_vecs[qj]);
      try {
        total += branch_correlation(c_inh, c_exp);
        ++used;
      } catch (const DegenerateInputError&) {
        ++skip;
      } catch (const DimensionError&) {
        ++skip;  // single-frame videos have no variance to correlate
      }
    }
  }
  if (skipped) *skipped = skip;
  if (used == 0) throw ContractError("complementarity: no usable pairs");
  return total / static_cast<double>(used);
}

}  // namespace prvr
