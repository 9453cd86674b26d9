#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "prvr/similarity.hpp"
#include "prvr/util.hpp"

using namespace prvr;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Tensor t = Tensor::zeros({r, c});
  for (double& v : t.values) v = rng.normal();
  return t;
}

Tensor random_vec(std::size_t n, Rng& rng) {
  Tensor t = Tensor::zeros({n});
  for (double& v : t.values) v = rng.normal();
  return t;
}

EncodedVideo as_video(Tensor f) { return {std::move(f), 0}; }
EncodedQuery as_query(Tensor q) { return {std::move(q), {}, {}}; }

}  // namespace

TEST_CASE("cosine") {
  CHECK(cosine(Tensor({2}, {1, 0}), Tensor({2}, {1, 0})) == doctest::Approx(1.0));
  CHECK(cosine(Tensor({2}, {1, 0}), Tensor({2}, {0, 1})) == doctest::Approx(0.0));
  CHECK(cosine(Tensor({2}, {3, 4}), Tensor({2}, {4, 3})) == doctest::Approx(24.0 / 25.0));
  CHECK_THROWS_AS(cosine(Tensor({2}, {0, 0}), Tensor({2}, {1, 0})), DegenerateInputError);
}

TEST_CASE("frame_distribution") {
  Rng rng(2);
  Tensor F = random_matrix(6, 4, rng);
  Tensor q = Tensor::zeros({4});
  for (std::size_t j = 0; j < 4; ++j) q.values[j] = F.at(3, j);
  auto dist = frame_distribution(F, q);
  CHECK(dist.size() == 6);
  CHECK(dist[3] == doctest::Approx(1.0));

  Tensor single = random_matrix(1, 4, rng);
  auto one = frame_distribution(single, q);
  CHECK(one.size() == 1);
  Tensor row0 = Tensor::zeros({4});
  for (std::size_t j = 0; j < 4; ++j) row0.values[j] = single.at(0, j);
  CHECK(one[0] == doctest::Approx(cosine(row0, q)));

  // oracle: scalar per-frame loop
  Tensor F8 = random_matrix(8, 5, rng);
  Tensor q5 = random_vec(5, rng);
  auto got = frame_distribution(F8, q5);
  for (std::size_t r = 0; r < 8; ++r) {
    double dot = 0, fn = 0, qn = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      dot += F8.at(r, j) * q5.values[j];
      fn += F8.at(r, j) * F8.at(r, j);
      qn += q5.values[j] * q5.values[j];
    }
    CHECK(got[r] == doctest::Approx(dot / std::sqrt(fn * qn)).epsilon(1e-12));
    CHECK(got[r] >= -1.0 - 1e-9);
    CHECK(got[r] <= 1.0 + 1e-9);
  }

  Tensor degenerate = F8;
  for (std::size_t j = 0; j < 5; ++j) degenerate.at(2, j) = 0.0;
  try {
    frame_distribution(degenerate, q5);
    CHECK(false);
  } catch (const DegenerateInputError& e) {
    CHECK(std::string(e.what()).find("frame 2") != std::string::npos);
  }
}

TEST_CASE("partial_similarity") {
  Rng rng(5);
  Tensor F = random_matrix(1, 3, rng);
  Tensor q = random_vec(3, rng);
  Tensor row0 = Tensor({3}, {F.at(0, 0), F.at(0, 1), F.at(0, 2)});
  CHECK(partial_similarity(F, q) == doctest::Approx(cosine(row0, q)));

  // appending a lower-similarity frame leaves the max unchanged
  double base = partial_similarity(F, q);
  Tensor F2 = Tensor::zeros({2, 3});
  for (std::size_t j = 0; j < 3; ++j) {
    F2.at(0, j) = F.at(0, j);
    F2.at(1, j) = -q.values[j];  // cosine -1
  }
  CHECK(partial_similarity(F2, q) == doctest::Approx(base));

  Tensor F16 = random_matrix(16, 3, rng);
  auto dist = frame_distribution(F16, q);
  double best = dist[0];
  for (double v : dist) best = std::max(best, v);
  CHECK(partial_similarity(F16, q) == doctest::Approx(best));
}

TEST_CASE("pairwise_matrix against the nested-loop oracle") {
  Rng rng(7);
  std::vector<EncodedVideo> videos;
  std::vector<EncodedQuery> queries;
  for (int i = 0; i < 4; ++i) {
    videos.push_back(as_video(random_matrix(5, 6, rng)));
    queries.push_back(as_query(random_vec(6, rng)));
  }
  auto m = pairwise_matrix(videos, queries);
  REQUIRE(m.n == 4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      CHECK(m.at(i, j) ==
            doctest::Approx(partial_similarity(videos[i].features, queries[j].sentence_vec)));

  // duplicated video rows give identical matrix rows
  videos[2] = videos[0];
  auto m2 = pairwise_matrix(videos, queries);
  for (std::size_t j = 0; j < 4; ++j) CHECK(m2.at(0, j) == m2.at(2, j));

  // 1x1 case
  auto m1 = pairwise_matrix(std::span(videos.data(), 1), std::span(queries.data(), 1));
  CHECK(m1.at(0, 0) == doctest::Approx(partial_similarity(videos[0], queries[0])));

  std::vector<EncodedQuery> short_list(queries.begin(), queries.begin() + 3);
  CHECK_THROWS_AS(pairwise_matrix(videos, short_list), BatchError);

  // block composition: concatenating two batches gives the per-batch blocks
  std::vector<EncodedVideo> vb;
  std::vector<EncodedQuery> qb;
  for (int i = 0; i < 2; ++i) {
    vb.push_back(as_video(random_matrix(4, 6, rng)));
    qb.push_back(as_query(random_vec(6, rng)));
  }
  std::vector<EncodedVideo> all_v(videos.begin(), videos.end());
  all_v.insert(all_v.end(), vb.begin(), vb.end());
  std::vector<EncodedQuery> all_q(queries.begin(), queries.end());
  all_q.insert(all_q.end(), qb.begin(), qb.end());
  auto big = pairwise_matrix(all_v, all_q);
  auto small = pairwise_matrix(vb, qb);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) CHECK(big.at(4 + i, 4 + j) == small.at(i, j));
}

TEST_CASE("fuse") {
  CHECK(fuse(0.3, 0.9, 0.0) == 0.3);
  CHECK(fuse(0.3, 0.9, 1.0) == 0.9);
  CHECK(fuse(0.2, 0.6, 0.7) == doctest::Approx(0.48));
  CHECK_THROWS_AS(fuse(0.1, 0.1, -0.1), ParameterError);
  CHECK_THROWS_AS(fuse(0.1, 0.1, 1.1), ParameterError);

  // monotone in both arguments for fixed sigma in (0,1)
  Rng rng(9);
  for (int it = 0; it < 50; ++it) {
    double s = rng.uniform(0.05, 0.95);
    double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1);
    double da = rng.uniform(0, 0.5), db = rng.uniform(0, 0.5);
    CHECK(fuse(a + da, b, s) >= fuse(a, b, s));
    CHECK(fuse(a, b + db, s) >= fuse(a, b, s));
  }
}

TEST_CASE("branch_correlation") {
  SimilarityDistribution a = {0.1, 0.5, -0.2, 0.9};
  CHECK(branch_correlation(a, a) == doctest::Approx(1.0));
  SimilarityDistribution neg(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) neg[i] = -a[i];
  CHECK(branch_correlation(a, neg) == doctest::Approx(-1.0));

  // oracle: direct covariance formula at long-double precision
  Rng rng(13);
  SimilarityDistribution x(16), y(16);
  for (std::size_t i = 0; i < 16; ++i) {
    x[i] = rng.normal();
    y[i] = rng.normal();
  }
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < 16; ++i) mx += x[i], my += y[i];
  mx /= 16, my /= 16;
  long double cov = 0, vx = 0, vy = 0;
  for (std::size_t i = 0; i < 16; ++i) {
    cov += (x[i] - mx) * (y[i] - my);
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
  }
  double expect = static_cast<double>(cov / sqrtl(vx * vy));
  CHECK(branch_correlation(x, y) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(std::abs(branch_correlation(x, y)) <= 1.0 + 1e-12);

  SimilarityDistribution flat = {0.5, 0.5, 0.5};
  CHECK_THROWS_AS(branch_correlation(flat, x), DimensionError);
  SimilarityDistribution flat16(16, 0.5);
  CHECK_THROWS_AS(branch_correlation(flat16, y), DegenerateInputError);
}

TEST_CASE("partial similarity is invariant under frame permutation") {
  Rng rng(17);
  Tensor F = random_matrix(7, 5, rng);
  Tensor q = random_vec(5, rng);
  Tensor perm = Tensor::zeros({7, 5});
  std::vector<std::size_t> order = {3, 1, 6, 0, 5, 2, 4};
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 5; ++j) perm.at(i, j) = F.at(order[i], j);
  CHECK(partial_similarity(F, q) == doctest::Approx(partial_similarity(perm, q)));
}

TEST_CASE("pairwise_matrix_nodes matches the pure version and carries gradient") {
  Rng rng(19);
  std::vector<Tensor> fs, qs;
  for (int i = 0; i < 3; ++i) {
    fs.push_back(random_matrix(4, 5, rng));
    qs.push_back(random_vec(5, rng));
  }
  Tape tape;
  std::vector<Tape::NodeId> fids, qids;
  for (int i = 0; i < 3; ++i) {
    Tensor f = fs[i];
    f.requires_grad = true;
    fids.push_back(tape.input(f));
    qids.push_back(tape.input(qs[i]));
  }
  auto nodes = pairwise_matrix_nodes(tape, fids, qids);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      CHECK(tape.value(nodes.matrix).at(i, j) ==
            doctest::Approx(partial_similarity(fs[i], qs[j])).epsilon(1e-12));

  tape.backward(tape.sum(nodes.matrix));
  CHECK(!tape.grad(fids[0]).empty());

  // diagonal distributions equal the pure frame distributions
  for (std::size_t i = 0; i < 3; ++i) {
    auto pure = frame_distribution(fs[i], qs[i]);
    for (std::size_t r = 0; r < 4; ++r)
      CHECK(tape.value(nodes.diag_distributions[i]).values[r] == doctest::Approx(pure[r]));
  }
}

TEST_CASE("pairwise csv export") {
  PairwiseMatrix m(2);
  m.at(0, 0) = 0.123456789123;
  m.at(0, 1) = -1.0;
  m.at(1, 0) = 0.5;
  m.at(1, 1) = 1.0 / 3.0;
  std::vector<std::string> vids = {"v0", "v1"};
  std::vector<std::string> qids = {"q0", "q1"};
  std::ostringstream os;
  write_pairwise_csv(m, vids, qids, os);
  CHECK(os.str() == "video_id,q0,q1\nv0,0.123456789,-1\nv1,0.5,0.333333333\n");
}
