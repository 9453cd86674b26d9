#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "prvr/supervision.hpp"
#include "prvr/util.hpp"

using namespace prvr;

namespace {

PairwiseMatrix random_sims(std::size_t n, Rng& rng) {
  PairwiseMatrix m(n);
  for (double& v : m.sims) v = rng.uniform(-1.0, 1.0);
  return m;
}

// long-double reference for the soft InfoNCE value
double infonce_oracle(const PairwiseMatrix& s, const SoftTargets& tg, double temp) {
  std::size_t n = s.n;
  auto row_logp = [&](const std::vector<double>& m, std::size_t i, std::size_t j) {
    long double mx = m[i * n];
    for (std::size_t k = 1; k < n; ++k) mx = std::max<long double>(mx, m[i * n + k]);
    long double sum = 0.0L;
    for (std::size_t k = 0; k < n; ++k) sum += expl((m[i * n + k] - mx) / temp);
    return static_cast<double>((m[i * n + j] - mx) / temp - logl(sum));
  };
  std::vector<double> st = s.transposed().sims;
  long double acc = 0.0L;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      acc += tg.v2t[i * n + j] * row_logp(s.sims, i, j);
      acc += tg.t2v[i * n + j] * row_logp(st, i, j);
    }
  return static_cast<double>(-acc / static_cast<long double>(n));
}

// true when every hinge and every mining decision sits clear of a switch
// point, so central differences see a locally linear triplet term
bool triplet_smooth_at(const PairwiseMatrix& s, double m, double gap = 1e-3) {
  std::size_t n = s.n;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row, col;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      row.push_back(s.at(i, j));
      col.push_back(s.at(j, i));
    }
    std::sort(row.rbegin(), row.rend());
    std::sort(col.rbegin(), col.rend());
    if (row.size() > 1 && (row[0] - row[1] < gap || col[0] - col[1] < gap)) return false;
    if (std::abs(m + row[0] - s.at(i, i)) < gap) return false;
    if (std::abs(m + col[0] - s.at(i, i)) < gap) return false;
  }
  return true;
}

PairwiseMatrix random_smooth_sims(std::size_t n, double m, Rng& rng) {
  for (int tries = 0; tries < 1000; ++tries) {
    PairwiseMatrix s = random_sims(n, rng);
    if (triplet_smooth_at(s, m)) return s;
  }
  throw std::runtime_error("no smooth sample found");
}

double triplet_oracle(const PairwiseMatrix& s, double m) {
  std::size_t n = s.n;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double rneg = -2.0, cneg = -2.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      rneg = std::max(rneg, s.at(i, j));
      cneg = std::max(cneg, s.at(j, i));
    }
    total += std::max(0.0, m + rneg - s.at(i, i));
    total += std::max(0.0, m + cneg - s.at(i, i));
  }
  return total / static_cast<double>(n);
}

}  // namespace

TEST_CASE("decay_value") {
  DecaySchedule exp{DecayKind::exponential, 0.95, 1.0, TimeUnit::epoch};
  CHECK(decay_value(exp, 0) == doctest::Approx(1.0));
  CHECK(decay_value(exp, 1) == doctest::Approx(0.95));

  DecaySchedule sig{DecayKind::sigmoid, 800.0, 1.0, TimeUnit::epoch};
  CHECK(decay_value(sig, 0) == doctest::Approx(800.0 / 801.0));

  DecaySchedule fixed{DecayKind::fixed, 0.0, 1.0, TimeUnit::epoch};
  for (std::size_t t : {0u, 5u, 50u, 500u}) CHECK(decay_value(fixed, t) == 1.0);

  DecaySchedule lin{DecayKind::linear, -0.02, 1.0, TimeUnit::epoch};
  CHECK(decay_value(lin, 0) == doctest::Approx(1.0));
  CHECK(decay_value(lin, 10) == doctest::Approx(0.8));
  CHECK(decay_value(lin, 1000) > 0.0);  // clamped above zero

  DecaySchedule bad_exp{DecayKind::exponential, 1.0, 1.0, TimeUnit::epoch};
  CHECK_THROWS_AS(decay_value(bad_exp, 0), ParameterError);
  DecaySchedule bad_lin{DecayKind::linear, 0.5, 1.0, TimeUnit::epoch};
  CHECK_THROWS_AS(decay_value(bad_lin, 0), ParameterError);
  DecaySchedule bad_sig{DecayKind::sigmoid, -1.0, 1.0, TimeUnit::epoch};
  CHECK_THROWS_AS(decay_value(bad_sig, 0), ParameterError);
}

TEST_CASE("decay_value is non-increasing with g(0) <= 1") {
  std::vector<DecaySchedule> schedules = {
      {DecayKind::exponential, 0.95, 1.0, TimeUnit::epoch},
      {DecayKind::exponential, 0.5, 1.0, TimeUnit::epoch},
      {DecayKind::linear, -0.01, 1.0, TimeUnit::epoch},
      {DecayKind::linear, -0.5, 0.9, TimeUnit::epoch},
      {DecayKind::sigmoid, 800.0, 1.0, TimeUnit::epoch},
      {DecayKind::sigmoid, 8.0, 1.0, TimeUnit::epoch},
      {DecayKind::fixed, 0.0, 1.0, TimeUnit::epoch},
  };
  for (const auto& s : schedules) {
    CHECK(decay_value(s, 0) <= 1.0 + 1e-12);
    double prev = decay_value(s, 0);
    for (std::size_t t = 1; t <= 100; ++t) {
      double g = decay_value(s, t);
      CHECK(g <= prev + 1e-15);
      CHECK(g > 0.0);
      prev = g;
    }
  }
}

TEST_CASE("schedule state applies initial weights with clamping") {
  ScheduleState st;
  st.alpha0 = 0.8;
  st.beta0 = 0.8;
  st.w0 = 0.1;
  st.alpha_schedule = {DecayKind::sigmoid, 800.0, 1.0, TimeUnit::epoch};
  st.beta_schedule = {DecayKind::sigmoid, 800.0, 1.0, TimeUnit::epoch};
  st.w_schedule = {DecayKind::exponential, 0.95, 1.0, TimeUnit::epoch};
  CHECK(st.w(0) == doctest::Approx(0.1));
  CHECK(st.w(1) == doctest::Approx(0.095));
  CHECK(st.alpha(0) == doctest::Approx(0.8 * 800.0 / 801.0));

  ScheduleState big;
  big.alpha0 = 1.5;  // clamped into [0,1] where used as a proportion
  big.alpha_schedule = {DecayKind::fixed, 0.0, 1.0, TimeUnit::epoch};
  CHECK(big.alpha(3) == 1.0);
}

TEST_CASE("build_soft_targets identities") {
  Rng rng(3);
  PairwiseMatrix t = random_sims(4, rng);

  for (double beta : {0.0, 0.3, 1.0}) {
    auto hard = build_soft_targets(t, 1.0, beta);
    CHECK(hard.hard_row_count == 4);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        CHECK(hard.t2v[i * 4 + j] == (i == j ? 1.0 : 0.0));
        CHECK(hard.v2t[i * 4 + j] == (i == j ? 1.0 : 0.0));
      }
  }

  auto beta_one = build_soft_targets(t, 0.0, 1.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(beta_one.t2v[i * 4 + j] == (i == j ? 1.0 : 0.0));

  CHECK_THROWS_AS(build_soft_targets(t, -0.1, 0.5), ParameterError);
  CHECK_THROWS_AS(build_soft_targets(t, 0.5, 1.1), ParameterError);
}

TEST_CASE("build_soft_targets mixes rows as specified") {
  // N=4, alpha=0.5, beta=0.5, T[2][2]=0.8, T[2][0]=0.4: pre-normalization
  // row 2 must be [0.2, 0, 0.9, 0]
  PairwiseMatrix t(4);
  t.at(2, 2) = 0.8;
  t.at(2, 0) = 0.4;
  auto tg = build_soft_targets(t, 0.5, 0.5, false);
  CHECK(tg.hard_row_count == 2);
  CHECK(tg.t2v[2 * 4 + 0] == doctest::Approx(0.2));
  CHECK(tg.t2v[2 * 4 + 1] == doctest::Approx(0.0));
  CHECK(tg.t2v[2 * 4 + 2] == doctest::Approx(0.9));
  CHECK(tg.t2v[2 * 4 + 3] == doctest::Approx(0.0));

  // negative similarities clamp to zero before mixing
  PairwiseMatrix neg(2);
  neg.at(1, 0) = -0.7;
  neg.at(1, 1) = 0.5;
  auto tn = build_soft_targets(neg, 0.0, 0.4, false);
  CHECK(tn.t2v[1 * 2 + 0] == doctest::Approx(0.0));
  CHECK(tn.t2v[1 * 2 + 1] == doctest::Approx(0.4 + 0.6 * 0.5));

  // all entries stay in [0,1], with and without normalization
  Rng rng(5);
  for (int it = 0; it < 20; ++it) {
    PairwiseMatrix m = random_sims(5, rng);
    for (bool norm : {true, false}) {
      auto tg2 = build_soft_targets(m, rng.uniform(0, 1), rng.uniform(0, 1), norm);
      for (double v : tg2.t2v) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0 + 1e-12);
      }
      if (norm) {
        for (std::size_t i = 0; i < 5; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < 5; ++j) s += tg2.t2v[i * 5 + j];
          CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
        }
      }
    }
  }

  // v2t comes from the transpose
  PairwiseMatrix asym(3);
  asym.at(0, 1) = 0.9;
  auto ta = build_soft_targets(asym, 0.0, 0.0, false);
  CHECK(ta.t2v[0 * 3 + 1] == doctest::Approx(0.9));
  CHECK(ta.v2t[1 * 3 + 0] == doctest::Approx(0.9));

  PairwiseMatrix wrong(3);
  // n mismatch is impossible by construction; empty matrix is the batch error
  PairwiseMatrix empty;
  CHECK_THROWS_AS(build_soft_targets(empty, 0.5, 0.5), BatchError);
}

TEST_CASE("increasing beta moves soft rows toward the identity") {
  Rng rng(7);
  PairwiseMatrix t = random_sims(4, rng);
  for (bool norm : {true, false}) {
    auto lo = build_soft_targets(t, 0.0, 0.3, norm);
    auto hi = build_soft_targets(t, 0.0, 0.7, norm);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        double dlo = std::abs(lo.t2v[i * 4 + j] - (i == j ? 1.0 : 0.0));
        double dhi = std::abs(hi.t2v[i * 4 + j] - (i == j ? 1.0 : 0.0));
        CHECK(dhi <= dlo + 1e-12);
      }
  }
}

TEST_CASE("soft_infonce") {
  // uniform similarities with identity targets: 2 ln 2 for N = 2
  Tape tape;
  Tensor s = Tensor({2, 2}, {0.37, 0.37, 0.37, 0.37}, true);
  auto sid = tape.input(s);
  auto loss = soft_infonce(tape, sid, identity_targets(2), 1.0);
  CHECK(tape.value(loss).values[0] == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));

  // identity targets reduce to the standard InfoNCE cross-entropy
  Rng rng(11);
  for (int it = 0; it < 10; ++it) {
    PairwiseMatrix m = random_sims(4, rng);
    Tape t2;
    auto id = t2.input(m.as_tensor());
    double got = t2.value(soft_infonce(t2, id, identity_targets(4), 0.07)).values[0];
    // standard form: -(1/N) sum_i log softmax_row(S/temp)[i][i], both directions
    long double ref = 0.0L;
    auto add_direction = [&](const PairwiseMatrix& mm) {
      for (std::size_t i = 0; i < 4; ++i) {
        long double mx = mm.at(i, 0);
        for (std::size_t j = 1; j < 4; ++j) mx = std::max<long double>(mx, mm.at(i, j));
        long double sum = 0.0L;
        for (std::size_t j = 0; j < 4; ++j) sum += expl((mm.at(i, j) - mx) / 0.07L);
        ref += -((mm.at(i, i) - mx) / 0.07L - logl(sum));
      }
    };
    add_direction(m);
    add_direction(m.transposed());
    CHECK(got == doctest::Approx(static_cast<double>(ref / 4.0L)).epsilon(1e-9));
  }

  // random soft targets against the scalar-loop oracle
  for (int it = 0; it < 10; ++it) {
    PairwiseMatrix m = random_sims(4, rng);
    auto tg = build_soft_targets(random_sims(4, rng), 0.4, 0.5);
    Tape t3;
    auto id = t3.input(m.as_tensor());
    double got = t3.value(soft_infonce(t3, id, tg, 0.2)).values[0];
    CHECK(got == doctest::Approx(infonce_oracle(m, tg, 0.2)).epsilon(1e-10));
    CHECK(got >= 0.0);
    CHECK(std::isfinite(got));
  }

  Tape t4;
  auto bad = t4.input(Tensor::zeros({2, 2}));
  CHECK_THROWS_AS((void)soft_infonce(t4, bad, identity_targets(2), 0.0), ParameterError);
  CHECK_THROWS_AS((void)soft_infonce(t4, bad, identity_targets(3), 1.0), BatchError);
}

TEST_CASE("soft_infonce gradient and target detachment") {
  Rng rng(13);
  PairwiseMatrix base = random_sims(4, rng);
  auto tg = build_soft_targets(base, 0.25, 0.5);

  Tensor s0 = random_sims(4, rng).as_tensor();
  auto f = [&tg](Tape& t, Tape::NodeId x) { return soft_infonce(t, x, tg, 0.3); };
  CHECK(check_gradients(f, s0, 1e-5) < 1e-4);

  // perturbing the matrix the targets were built from must not change the
  // gradient: targets are detached copies
  Tape ta;
  Tensor strain = s0;
  strain.requires_grad = true;
  auto sid = ta.input(strain);
  auto loss = soft_infonce(ta, sid, tg, 0.07);
  ta.backward(loss);
  auto grad_before = ta.grad(sid);

  PairwiseMatrix mutated = base;
  mutated.at(0, 0) += 123.0;  // after construction; tg already holds copies
  Tape tb;
  auto sid2 = tb.input(strain);
  auto loss2 = soft_infonce(tb, sid2, tg, 0.07);
  tb.backward(loss2);
  CHECK(tb.grad(sid2) == grad_before);
}

TEST_CASE("triplet_loss") {
  {
    Tape t;
    Tensor s = Tensor({2, 2}, {1, -1, -1, 1});
    auto loss = triplet_loss(t, t.input(s), 0.2);
    CHECK(t.value(loss).values[0] == doctest::Approx(0.0));
  }
  {
    Tape t;
    Tensor s = Tensor({2, 2}, {0.5, 0.5, 0.5, 0.5});
    auto loss = triplet_loss(t, t.input(s), 0.2);
    CHECK(t.value(loss).values[0] == doctest::Approx(0.4));
  }

  Rng rng(17);
  for (int it = 0; it < 20; ++it) {
    PairwiseMatrix m = random_sims(4, rng);
    Tape t;
    auto loss = triplet_loss(t, t.input(m.as_tensor()), 0.2);
    CHECK(t.value(loss).values[0] == doctest::Approx(triplet_oracle(m, 0.2)).epsilon(1e-12));
  }

  // zero iff every diagonal beats its hardest row and column negative by >= m
  for (int it = 0; it < 20; ++it) {
    PairwiseMatrix m = random_sims(3, rng);
    Tape t;
    double v = t.value(triplet_loss(t, t.input(m.as_tensor()), 0.15)).values[0];
    bool satisfied = true;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        if (i == j) continue;
        if (m.at(i, i) - m.at(i, j) < 0.15 || m.at(i, i) - m.at(j, i) < 0.15) satisfied = false;
      }
    CHECK((v == 0.0) == satisfied);
  }

  // gradient check on samples clear of hinge kinks and mining ties
  for (int it = 0; it < 5; ++it) {
    PairwiseMatrix m = random_smooth_sims(4, 0.2, rng);
    auto f = [](Tape& t, Tape::NodeId x) { return triplet_loss(t, x, 0.2); };
    CHECK(check_gradients(f, m.as_tensor(), 1e-5) < 1e-4);
  }

  Tape t;
  CHECK_THROWS_AS((void)triplet_loss(t, t.input(Tensor({1, 1}, {0.5})), 0.2), BatchError);
  CHECK_THROWS_AS((void)triplet_loss(t, t.input(Tensor::zeros({2, 2})), -0.1), ParameterError);
}

TEST_CASE("exploration_loss is the sum of its parts") {
  Rng rng(19);
  PairwiseMatrix m = random_smooth_sims(4, 0.2, rng);
  auto tg = build_soft_targets(random_sims(4, rng), 0.5, 0.5);
  Tape t;
  auto sid = t.input(m.as_tensor());
  double total = t.value(exploration_loss(t, sid, tg, 0.2, 0.07)).values[0];
  double nce = t.value(soft_infonce(t, sid, tg, 0.07)).values[0];
  double trip = t.value(triplet_loss(t, sid, 0.2)).values[0];
  CHECK(total == doctest::Approx(nce + trip).epsilon(1e-12));

  // gradient flows end to end; a moderate temperature keeps the numeric
  // reference accurate (sharp logits magnify central-difference truncation)
  Tensor strain = m.as_tensor();
  auto f = [&tg](Tape& tp, Tape::NodeId x) { return exploration_loss(tp, x, tg, 0.2, 0.3); };
  CHECK(check_gradients(f, strain, 1e-5) < 1e-4);
}

TEST_CASE("minimizing soft_infonce drives the diagonal up") {
  // plain gradient descent on a free 4x4 similarity matrix
  Rng rng(23);
  Tensor s = Tensor::zeros({4, 4});
  for (double& v : s.values) v = rng.uniform(-0.1, 0.1);
  auto tg = identity_targets(4);
  for (int step = 0; step < 400; ++step) {
    Tensor cur = s;
    cur.requires_grad = true;
    Tape t;
    auto sid = t.input(cur);
    auto loss = soft_infonce(t, sid, tg, 1.0);
    t.backward(loss);
    const auto& g = t.grad(sid);
    for (std::size_t i = 0; i < 16; ++i) s.values[i] -= 0.5 * g[i];
    // keep entries bounded like cosine scores
    for (double& v : s.values) v = std::clamp(v, -1.0, 1.0);
  }
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      if (i == j) continue;
      CHECK(s.values[i * 4 + i] > s.values[i * 4 + j]);
      CHECK(s.values[j * 4 + j] > s.values[i * 4 + j]);
    }
}
