#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "prvr/tensor.hpp"
#include "prvr/util.hpp"

namespace prvr {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---- binary feature files (.prvf) ------------------------------------------
// magic "PRVF" | version u32 LE | rows u32 LE | cols u32 LE |
// rows*cols IEEE-754 32-bit floats LE, row-major

constexpr std::uint32_t kFeatureFormatVersion = 1;

inline void write_feature_file(const fs::path& path, const Tensor& matrix) {
  if (!matrix.is_matrix()) throw ContractError("write_feature_file: need a matrix");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  auto put_u32 = [&os](std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
  };
  os.write("PRVF", 4);
  put_u32(kFeatureFormatVersion);
  put_u32(static_cast<std::uint32_t>(matrix.rows()));
  put_u32(static_cast<std::uint32_t>(matrix.cols()));
  for (double v : matrix.values) {
    float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(bits);
  }
  if (!os) throw IoError("write failed: " + path.string());
}

inline Tensor read_feature_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open feature file: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PRVF", 4) != 0)
    throw FormatError("bad magic at offset 0 in " + path.string());
  auto get_u32 = [&is, &path]() {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw FormatError("truncated header in " + path.string());
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  };
  std::uint32_t version = get_u32();
  if (version != kFeatureFormatVersion)
    throw FormatError("unsupported version " + std::to_string(version) + " in " + path.string());
  std::uint32_t rows = get_u32(), cols = get_u32();
  Tensor out = Tensor::zeros({rows, cols});
  for (std::size_t i = 0; i < out.numel(); ++i) {
    std::uint32_t bits = get_u32();
    float f;
    std::memcpy(&f, &bits, 4);
    out.values[i] = static_cast<double>(f);
  }
  return out;
}

// ---- manifest ----------------------------------------------------------------

struct MomentAnnotation {
  std::size_t start_frame = 0;
  std::size_t end_frame = 0;  // inclusive
};

inline double mv_ratio(const MomentAnnotation& m, std::size_t n_frames) {
  return static_cast<double>(m.end_frame - m.start_frame + 1) / static_cast<double>(n_frames);
}

struct VideoEntry {
  std::string id;
  std::size_t n_frames = 0;
  std::string feature_file;
};

struct QueryEntry {
  std::string id;
  std::string feature_file;
  std::size_t n_tokens = 0;
  std::string video_id;
  MomentAnnotation moment;
};

struct SplitSpec {
  bool present = false;
  std::vector<std::string> train, val, test;
};

struct DatasetManifest {
  std::string name;
  std::size_t video_dim = 0, text_dim = 0, teacher_dim = 0;
  std::vector<VideoEntry> videos;
  std::vector<QueryEntry> queries;
  std::vector<std::string> teachers;
  SplitSpec split;
};

namespace detail {

inline void reject_unknown_keys(const json& obj, const std::set<std::string>& allowed,
                                const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key()))
      throw ParseError(where + ": unknown field '" + it.key() + "'");
  }
}

template <typename T>
T get_field(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) throw ParseError(where + ": missing field '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(where + ": field '" + std::string(key) + "': " + e.what());
  }
}

}  // namespace detail

inline json manifest_to_json(const DatasetManifest& m) {
  json j;
  j["name"] = m.name;
  j["dims"] = {{"video_dim", m.video_dim}, {"text_dim", m.text_dim}, {"teacher_dim", m.teacher_dim}};
  j["videos"] = json::array();
  for (const auto& v : m.videos)
    j["videos"].push_back(
        {{"id", v.id}, {"n_frames", v.n_frames}, {"feature_file", v.feature_file}});
  j["queries"] = json::array();
  for (const auto& q : m.queries)
    j["queries"].push_back({{"id", q.id},
                            {"feature_file", q.feature_file},
                            {"n_tokens", q.n_tokens},
                            {"video_id", q.video_id},
                            {"moment",
                             {{"start_frame", q.moment.start_frame},
                              {"end_frame", q.moment.end_frame}}}});
  j["teachers"] = m.teachers;
  if (m.split.present)
    j["split"] = {{"train", m.split.train}, {"val", m.split.val}, {"test", m.split.test}};
  return j;
}

inline DatasetManifest manifest_from_json(const json& j, const std::string& where) {
  DatasetManifest m;
  detail::reject_unknown_keys(j, {"name", "dims", "videos", "queries", "teachers", "split"},
                              where);
  m.name = detail::get_field<std::string>(j, "name", where);
  json dims = detail::get_field<json>(j, "dims", where);
  detail::reject_unknown_keys(dims, {"video_dim", "text_dim", "teacher_dim"}, where + ".dims");
  m.video_dim = detail::get_field<std::size_t>(dims, "video_dim", where + ".dims");
  m.text_dim = detail::get_field<std::size_t>(dims, "text_dim", where + ".dims");
  m.teacher_dim = detail::get_field<std::size_t>(dims, "teacher_dim", where + ".dims");
  for (const auto& v : detail::get_field<json>(j, "videos", where)) {
    std::string w = where + ".videos[" + std::to_string(m.videos.size()) + "]";
    detail::reject_unknown_keys(v, {"id", "n_frames", "feature_file"}, w);
    m.videos.push_back({detail::get_field<std::string>(v, "id", w),
                        detail::get_field<std::size_t>(v, "n_frames", w),
                        detail::get_field<std::string>(v, "feature_file", w)});
  }
  for (const auto& q : detail::get_field<json>(j, "queries", where)) {
    std::string w = where + ".queries[" + std::to_string(m.queries.size()) + "]";
    detail::reject_unknown_keys(q, {"id", "feature_file", "n_tokens", "video_id", "moment"}, w);
    QueryEntry e;
    e.id = detail::get_field<std::string>(q, "id", w);
    e.feature_file = detail::get_field<std::string>(q, "feature_file", w);
    e.n_tokens = detail::get_field<std::size_t>(q, "n_tokens", w);
    e.video_id = detail::get_field<std::string>(q, "video_id", w);
    json mm = detail::get_field<json>(q, "moment", w);
    detail::reject_unknown_keys(mm, {"start_frame", "end_frame"}, w + ".moment");
    e.moment.start_frame = detail::get_field<std::size_t>(mm, "start_frame", w + ".moment");
    e.moment.end_frame = detail::get_field<std::size_t>(mm, "end_frame", w + ".moment");
    m.queries.push_back(std::move(e));
  }
  m.teachers = detail::get_field<std::vector<std::string>>(j, "teachers", where);
  if (j.contains("split")) {
    json s = j.at("split");
    detail::reject_unknown_keys(s, {"train", "val", "test"}, where + ".split");
    m.split.present = true;
    m.split.train = detail::get_field<std::vector<std::string>>(s, "train", where + ".split");
    m.split.val = detail::get_field<std::vector<std::string>>(s, "val", where + ".split");
    m.split.test = detail::get_field<std::vector<std::string>>(s, "test", where + ".split");
  }
  return m;
}

// ---- dataset -------------------------------------------------------------------

// Fully validated in-memory dataset. Feature tensors are loaded once and
// immutable afterwards; concurrent readers are fine.
struct Dataset {
  DatasetManifest manifest;
  std::vector<Tensor> video_features;                     // aligned with manifest.videos
  std::vector<Tensor> query_features;                     // aligned with manifest.queries
  std::vector<std::vector<Tensor>> teacher_video_features;  // [teacher][video]
  std::vector<std::vector<Tensor>> teacher_query_features;  // [teacher][query], each [1 x d]
  std::unordered_map<std::string, std::size_t> video_index;
  std::unordered_map<std::string, std::size_t> query_index;
  std::vector<std::vector<std::size_t>> queries_of_video;  // video idx -> query idxs

  std::size_t n_videos() const { return manifest.videos.size(); }
  std::size_t n_queries() const { return manifest.queries.size(); }

  Tensor teacher_query_vec(std::size_t teacher, std::size_t query) const {
    Tensor t = teacher_query_features[teacher][query];
    t.shape = {t.numel()};
    return t;
  }

  std::vector<std::size_t> split_videos(const std::string& which) const {
    const std::vector<std::string>* ids = nullptr;
    if (which == "train")
      ids = &manifest.split.train;
    else if (which == "val")
      ids = &manifest.split.val;
    else if (which == "test")
      ids = &manifest.split.test;
    else
      throw ContractError("split_videos: unknown split '" + which + "'");
    std::vector<std::size_t> out;
    if (!manifest.split.present) return out;
    for (const auto& id : *ids) {
      auto it = video_index.find(id);
      if (it == video_index.end())
        throw DataError("split '" + which + "' names unknown video '" + id + "'");
      out.push_back(it->second);
    }
    return out;
  }

  void rebuild_indexes() {
    video_index.clear();
    query_index.clear();
    for (std::size_t i = 0; i < manifest.videos.size(); ++i) {
      if (!video_index.emplace(manifest.videos[i].id, i).second)
        throw DataError("duplicate video id '" + manifest.videos[i].id + "'");
    }
    for (std::size_t i = 0; i < manifest.queries.size(); ++i) {
      if (!query_index.emplace(manifest.queries[i].id, i).second)
        throw DataError("duplicate query id '" + manifest.queries[i].id + "'");
    }
    queries_of_video.assign(manifest.videos.size(), {});
    for (std::size_t i = 0; i < manifest.queries.size(); ++i) {
      const auto& q = manifest.queries[i];
      auto it = video_index.find(q.video_id);
      if (it == video_index.end())
        throw DataError("query '" + q.id + "' references unknown video '" + q.video_id + "'");
      const auto& v = manifest.videos[it->second];
      if (q.moment.start_frame > q.moment.end_frame || q.moment.end_frame >= v.n_frames)
        throw DataError("query '" + q.id + "' has moment [" +
                        std::to_string(q.moment.start_frame) + "," +
                        std::to_string(q.moment.end_frame) + "] outside video of " +
                        std::to_string(v.n_frames) + " frames");
      queries_of_video[it->second].push_back(i);
    }
  }
};

inline void write_dataset(const Dataset& ds, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "video", ec);
  fs::create_directories(dir / "text", ec);
  for (const auto& t : ds.manifest.teachers) {
    fs::create_directories(dir / "teacher" / t / "video", ec);
    fs::create_directories(dir / "teacher" / t / "text", ec);
  }
  if (ec) throw IoError("cannot create dataset directories under " + dir.string());

  std::ofstream ms(dir / "manifest.json");
  if (!ms) throw IoError("cannot write manifest: " + (dir / "manifest.json").string());
  ms << manifest_to_json(ds.manifest).dump(2) << "\n";

  for (std::size_t i = 0; i < ds.manifest.videos.size(); ++i)
    write_feature_file(dir / ds.manifest.videos[i].feature_file, ds.video_features[i]);
  for (std::size_t i = 0; i < ds.manifest.queries.size(); ++i)
    write_feature_file(dir / ds.manifest.queries[i].feature_file, ds.query_features[i]);
  for (std::size_t t = 0; t < ds.manifest.teachers.size(); ++t) {
    const std::string& tid = ds.manifest.teachers[t];
    for (std::size_t i = 0; i < ds.manifest.videos.size(); ++i)
      write_feature_file(dir / "teacher" / tid / "video" / (ds.manifest.videos[i].id + ".prvf"),
                         ds.teacher_video_features[t][i]);
    for (std::size_t i = 0; i < ds.manifest.queries.size(); ++i)
      write_feature_file(dir / "teacher" / tid / "text" / (ds.manifest.queries[i].id + ".prvf"),
                         ds.teacher_query_features[t][i]);
  }
}

namespace detail {

// evenly spaced frame subsampling; returns chosen source indices
inline std::vector<std::size_t> subsample_indices(std::size_t k, std::size_t target) {
  std::vector<std::size_t> idx(target);
  for (std::size_t i = 0; i < target; ++i) idx[i] = i * k / target;
  return idx;
}

inline Tensor take_rows(const Tensor& m, const std::vector<std::size_t>& rows) {
  Tensor out = Tensor::zeros({rows.size(), m.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out.at(i, j) = m.at(rows[i], j);
  return out;
}

}  // namespace detail

inline Dataset load_dataset(const fs::path& dir, std::size_t max_frames = 128) {
  fs::path mpath = dir / "manifest.json";
  std::ifstream is(mpath);
  if (!is) throw IoError("cannot open manifest: " + mpath.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ParseError(mpath.string() + ": " + e.what());
  }
  Dataset ds;
  ds.manifest = manifest_from_json(j, mpath.string());
  ds.rebuild_indexes();

  auto load_checked = [&](const fs::path& p, std::size_t want_rows, std::size_t want_cols,
                          const std::string& what) {
    if (!fs::exists(p)) throw IoError("missing feature file: " + p.string());
    Tensor t = read_feature_file(p);
    if ((want_rows != 0 && t.rows() != want_rows) || t.cols() != want_cols)
      throw FormatError(what + " " + p.string() + ": file is " + t.shape_str() + ", manifest says [" +
                        std::to_string(want_rows) + "," + std::to_string(want_cols) + "]");
    return t;
  };

  ds.video_features.reserve(ds.n_videos());
  for (auto& v : ds.manifest.videos)
    ds.video_features.push_back(
        load_checked(dir / v.feature_file, v.n_frames, ds.manifest.video_dim, "video"));
  ds.query_features.reserve(ds.n_queries());
  for (auto& q : ds.manifest.queries)
    ds.query_features.push_back(
        load_checked(dir / q.feature_file, q.n_tokens, ds.manifest.text_dim, "query"));

  for (const auto& tid : ds.manifest.teachers) {
    std::vector<Tensor> tv, tq;
    for (auto& v : ds.manifest.videos)
      tv.push_back(load_checked(dir / "teacher" / tid / "video" / (v.id + ".prvf"), v.n_frames,
                                ds.manifest.teacher_dim, "teacher video"));
    for (auto& q : ds.manifest.queries)
      tq.push_back(load_checked(dir / "teacher" / tid / "text" / (q.id + ".prvf"), 1,
                                ds.manifest.teacher_dim, "teacher query"));
    ds.teacher_video_features.push_back(std::move(tv));
    ds.teacher_query_features.push_back(std::move(tq));
  }

  // frame cap: videos longer than max_frames are uniformly subsampled, with
  // the same indices applied to every teacher and the moment remapped
  for (std::size_t i = 0; i < ds.n_videos(); ++i) {
    auto& entry = ds.manifest.videos[i];
    if (entry.n_frames <= max_frames) continue;
    auto idx = detail::subsample_indices(entry.n_frames, max_frames);
    ds.video_features[i] = detail::take_rows(ds.video_features[i], idx);
    for (auto& tv : ds.teacher_video_features) tv[i] = detail::take_rows(tv[i], idx);
    double scale = static_cast<double>(max_frames) / static_cast<double>(entry.n_frames);
    for (std::size_t qi : ds.queries_of_video[i]) {
      auto& m = ds.manifest.queries[qi].moment;
      m.start_frame = static_cast<std::size_t>(m.start_frame * scale);
      m.end_frame = std::max(m.start_frame, static_cast<std::size_t>(m.end_frame * scale));
    }
    entry.n_frames = max_frames;
  }
  return ds;
}

// ---- synthetic generation ---------------------------------------------------

// Parameters of the planted-structure generator. Every query gets one
// concept-bearing span inside its video; teacher features carry the same
// signal degraded toward noise by (1 - teacher_quality).
struct SyntheticSpec {
  std::size_t n_videos = 32;       // training pool
  std::size_t n_test_videos = 0;   // appended as a held-out test split
  std::size_t frames_per_video = 16;
  std::size_t queries_per_video = 1;
  std::size_t video_dim = 32;
  std::size_t text_dim = 32;
  std::size_t teacher_dim = 32;
  std::size_t n_concepts = 8;
  double mv_lo = 0.25, mv_hi = 0.75;
  double noise_std = 0.1;
  double teacher_quality = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_videos == 0) throw ParameterError("synthetic: n_videos must be >= 1");
    if (frames_per_video == 0 || queries_per_video == 0)
      throw ParameterError("synthetic: frames/queries per video must be >= 1");
    if (!(mv_lo > 0.0 && mv_lo <= mv_hi && mv_hi <= 1.0))
      throw ParameterError("synthetic: mv_range must satisfy 0 < lo <= hi <= 1");
    if (teacher_quality < 0.0 || teacher_quality > 1.0)
      throw ParameterError("synthetic: teacher_quality outside [0,1]");
    if (noise_std < 0.0) throw ParameterError("synthetic: noise_std must be >= 0");
    if (n_concepts == 0) throw ParameterError("synthetic: n_concepts must be >= 1");
    if (video_dim == 0 || text_dim == 0 || teacher_dim == 0)
      throw ParameterError("synthetic: zero feature dimension");
  }
};

inline SyntheticSpec synthetic_spec_from_json(const json& j, const std::string& where) {
  detail::reject_unknown_keys(
      j,
      {"n_videos", "n_test_videos", "frames_per_video", "queries_per_video", "video_dim",
       "text_dim", "teacher_dim", "n_concepts", "mv_range", "noise_std", "teacher_quality",
       "seed"},
      where);
  SyntheticSpec s;
  auto opt = [&](const char* key, auto& slot) {
    if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
  };
  opt("n_videos", s.n_videos);
  opt("n_test_videos", s.n_test_videos);
  opt("frames_per_video", s.frames_per_video);
  opt("queries_per_video", s.queries_per_video);
  opt("video_dim", s.video_dim);
  opt("text_dim", s.text_dim);
  opt("teacher_dim", s.teacher_dim);
  opt("n_concepts", s.n_concepts);
  opt("noise_std", s.noise_std);
  opt("teacher_quality", s.teacher_quality);
  opt("seed", s.seed);
  if (j.contains("mv_range")) {
    auto r = j.at("mv_range").get<std::vector<double>>();
    if (r.size() != 2) throw ParseError(where + ": mv_range must be [lo, hi]");
    s.mv_lo = r[0];
    s.mv_hi = r[1];
  }
  s.validate();
  return s;
}

namespace detail {

inline std::vector<double> random_unit(std::size_t dim, Rng& rng) {
  std::vector<double> v(dim);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (double& x : v) {
      x = rng.normal();
      norm += x * x;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

inline std::vector<double> normalized(std::vector<double> v) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm == 0.0) throw DegenerateInputError("normalized: zero vector");
  for (double& x : v) x /= norm;
  return v;
}

// y = M . x for a row-major [rows x cols] map
inline std::vector<double> apply_map(const std::vector<double>& m, std::size_t rows,
                                     std::size_t cols, const std::vector<double>& x) {
  std::vector<double> y(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) y[i] += m[i * cols + j] * x[j];
  return y;
}

// round every value through IEEE-754 32-bit so disk round-trips are exact
inline void quantize_f32(Tensor& t) {
  for (double& v : t.values) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace detail

inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::size_t k = spec.frames_per_video;
  std::size_t lo_len = static_cast<std::size_t>(std::ceil(spec.mv_lo * static_cast<double>(k)));
  lo_len = std::max<std::size_t>(lo_len, 1);
  std::size_t hi_len = static_cast<std::size_t>(std::floor(spec.mv_hi * static_cast<double>(k)));
  if (lo_len > hi_len)
    throw ParameterError("synthetic: no span length realizes mv_range [" +
                         std::to_string(spec.mv_lo) + "," + std::to_string(spec.mv_hi) +
                         "] with " + std::to_string(k) + " frames");
  if (lo_len * spec.queries_per_video > k)
    throw ParameterError("synthetic: " + std::to_string(spec.queries_per_video) +
                         " spans of at least " + std::to_string(lo_len) +
                         " frames do not fit in " + std::to_string(k));

  Rng rng(spec.seed);
  std::vector<std::vector<double>> concepts(spec.n_concepts);
  for (auto& c : concepts) c = detail::random_unit(spec.text_dim, rng);

  // fixed cross-modal maps define the learnable ground-truth alignment
  auto make_map = [&rng](std::size_t rows, std::size_t cols) {
    std::vector<double> m(rows * cols);
    double s = 1.0 / std::sqrt(static_cast<double>(cols));
    for (double& v : m) v = rng.normal(0.0, s);
    return m;
  };
  std::vector<double> to_video = make_map(spec.video_dim, spec.text_dim);
  std::vector<double> to_teacher = make_map(spec.teacher_dim, spec.text_dim);

  Dataset ds;
  ds.manifest.name = "synthetic";
  ds.manifest.video_dim = spec.video_dim;
  ds.manifest.text_dim = spec.text_dim;
  ds.manifest.teacher_dim = spec.teacher_dim;
  ds.manifest.teachers = {"t0"};
  ds.teacher_video_features.resize(1);
  ds.teacher_query_features.resize(1);

  std::size_t total = spec.n_videos + spec.n_test_videos;
  std::size_t query_counter = 0;
  char buf[32];
  for (std::size_t vi = 0; vi < total; ++vi) {
    std::snprintf(buf, sizeof(buf), "v%04zu", vi);
    std::string video_id = buf;

    // disjoint spans: draw lengths, then distribute the slack between them
    std::size_t q_count = spec.queries_per_video;
    std::vector<std::size_t> lengths(q_count);
    std::size_t used = 0;
    for (auto& l : lengths) {
      l = lo_len + rng.index(hi_len - lo_len + 1);
      used += l;
    }
    while (used > k) {  // shrink the longest span until everything fits
      auto longest = std::max_element(lengths.begin(), lengths.end());
      if (*longest <= lo_len)
        throw ParameterError("synthetic: spans do not fit in " + std::to_string(k) + " frames");
      --*longest;
      --used;
    }
    std::size_t slack = k - used;
    std::vector<std::size_t> cuts(q_count);
    for (auto& c : cuts) c = slack == 0 ? 0 : rng.index(slack + 1);
    std::sort(cuts.begin(), cuts.end());
    std::vector<std::size_t> starts(q_count);
    std::size_t cursor = 0, prev_cut = 0;
    for (std::size_t qi = 0; qi < q_count; ++qi) {
      cursor += cuts[qi] - prev_cut;
      prev_cut = cuts[qi];
      starts[qi] = cursor;
      cursor += lengths[qi];
    }

    Tensor frames = Tensor::zeros({k, spec.video_dim});
    Tensor teacher_frames = Tensor::zeros({k, spec.teacher_dim});
    for (std::size_t r = 0; r < k; ++r) {
      auto bg = detail::random_unit(spec.video_dim, rng);
      for (std::size_t j = 0; j < spec.video_dim; ++j) frames.at(r, j) = bg[j];
      auto tbg = detail::random_unit(spec.teacher_dim, rng);
      for (std::size_t j = 0; j < spec.teacher_dim; ++j) teacher_frames.at(r, j) = tbg[j];
    }

    for (std::size_t qi = 0; qi < q_count; ++qi) {
      std::snprintf(buf, sizeof(buf), "q%05zu", query_counter++);
      std::string query_id = buf;

      // latent semantics: shared concept plus a query-unique component
      const auto& concept_vec = concepts[rng.index(spec.n_concepts)];
      auto unique = detail::random_unit(spec.text_dim, rng);
      std::vector<double> latent(spec.text_dim);
      for (std::size_t j = 0; j < spec.text_dim; ++j) latent[j] = concept_vec[j] + unique[j];
      latent = detail::normalized(latent);

      auto video_sig =
          detail::normalized(detail::apply_map(to_video, spec.video_dim, spec.text_dim, latent));
      auto teacher_sig = detail::normalized(
          detail::apply_map(to_teacher, spec.teacher_dim, spec.text_dim, latent));

      std::size_t start = starts[qi], len = lengths[qi];
      // noise_std scales a unit perturbation, so the signal-to-noise ratio
      // does not depend on the feature dimension
      for (std::size_t r = start; r < start + len; ++r) {
        auto jitter = detail::random_unit(spec.video_dim, rng);
        for (std::size_t j = 0; j < spec.video_dim; ++j)
          frames.at(r, j) = video_sig[j] + spec.noise_std * jitter[j];
      }
      double q_mix = spec.teacher_quality;
      for (std::size_t r = start; r < start + len; ++r) {
        auto noise_dir = detail::random_unit(spec.teacher_dim, rng);
        for (std::size_t j = 0; j < spec.teacher_dim; ++j)
          teacher_frames.at(r, j) = q_mix * teacher_sig[j] + (1.0 - q_mix) * noise_dir[j];
      }

      std::size_t n_tokens = 4 + rng.index(5);  // 4..8 words
      Tensor tokens = Tensor::zeros({n_tokens, spec.text_dim});
      for (std::size_t r = 0; r < n_tokens; ++r) {
        auto jitter = detail::random_unit(spec.text_dim, rng);
        for (std::size_t j = 0; j < spec.text_dim; ++j)
          tokens.at(r, j) = latent[j] + spec.noise_std * jitter[j];
      }
      detail::quantize_f32(tokens);

      auto tq_noise = detail::random_unit(spec.teacher_dim, rng);
      Tensor teacher_query = Tensor::zeros({1, spec.teacher_dim});
      for (std::size_t j = 0; j < spec.teacher_dim; ++j)
        teacher_query.at(0, j) = q_mix * teacher_sig[j] + (1.0 - q_mix) * tq_noise[j];
      detail::quantize_f32(teacher_query);

      QueryEntry qe;
      qe.id = query_id;
      qe.feature_file = "text/" + query_id + ".prvf";
      qe.n_tokens = n_tokens;
      qe.video_id = video_id;
      qe.moment = {start, start + len - 1};
      ds.manifest.queries.push_back(qe);
      ds.query_features.push_back(std::move(tokens));
      ds.teacher_query_features[0].push_back(std::move(teacher_query));
    }

    detail::quantize_f32(frames);
    detail::quantize_f32(teacher_frames);
    ds.manifest.videos.push_back({video_id, k, "video/" + video_id + ".prvf"});
    ds.video_features.push_back(std::move(frames));
    ds.teacher_video_features[0].push_back(std::move(teacher_frames));
  }

  if (spec.n_test_videos > 0) {
    ds.manifest.split.present = true;
    for (std::size_t vi = 0; vi < total; ++vi) {
      const std::string& id = ds.manifest.videos[vi].id;
      (vi < spec.n_videos ? ds.manifest.split.train : ds.manifest.split.test).push_back(id);
    }
  }
  ds.rebuild_indexes();
  return ds;
}

// ---- batching -------------------------------------------------------------------

// N aligned (video, query) pairs with pairwise-distinct videos; the batch
// ground truth is the N x N identity.
struct Batch {
  std::vector<std::size_t> video_idx;
  std::vector<std::size_t> query_idx;
  std::size_t size() const { return video_idx.size(); }
};

inline std::vector<Batch> make_batches(const Dataset& ds, std::size_t n, std::uint64_t seed,
                                       std::size_t epoch,
                                       const std::vector<std::size_t>& video_pool = {}) {
  if (n < 2) throw ParameterError("make_batches: batch size must be >= 2");
  std::vector<std::size_t> pool = video_pool;
  if (pool.empty()) {
    if (ds.manifest.split.present)
      pool = ds.split_videos("train");
    else
      for (std::size_t i = 0; i < ds.n_videos(); ++i) pool.push_back(i);
  }
  std::erase_if(pool, [&](std::size_t vi) { return ds.queries_of_video[vi].empty(); });
  if (pool.size() < n)
    throw BatchError("make_batches: " + std::to_string(pool.size()) +
                     " usable videos for batch size " + std::to_string(n));
  Rng rng(seed ^ static_cast<std::uint64_t>(epoch));
  rng.shuffle(pool);
  std::vector<Batch> out;
  for (std::size_t base = 0; base + n <= pool.size(); base += n) {
    Batch b;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t vi = pool[base + i];
      const auto& qs = ds.queries_of_video[vi];
      b.video_idx.push_back(vi);
      b.query_idx.push_back(qs[rng.index(qs.size())]);
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace prvr
