#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "prvr/tensor.hpp"
#include "prvr/util.hpp"

using namespace prvr;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values) v = rng.normal(0.0, scale);
  return t;
}

// Independent long-double softmax for the frozen expected values.
std::vector<double> softmax_oracle(const std::vector<double>& x, double temp) {
  long double mx = x[0];
  for (double v : x) mx = std::max<long double>(mx, v);
  std::vector<long double> e(x.size());
  long double sum = 0.0L;
  for (std::size_t i = 0; i < x.size(); ++i) {
    e[i] = expl((static_cast<long double>(x[i]) - mx) / static_cast<long double>(temp));
    sum += e[i];
  }
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(e[i] / sum);
  return out;
}

}  // namespace

TEST_CASE("matmul basics") {
  Tape t;
  auto a = t.input(Tensor({2, 2}, {1, 0, 0, 1}));
  auto b = t.input(Tensor({2, 2}, {1, 2, 3, 4}));
  auto c = t.matmul(a, b);
  CHECK(t.value(c).values == std::vector<double>{1, 2, 3, 4});

  auto z = t.input(Tensor::zeros({2, 2}));
  auto d = t.matmul(b, z);
  CHECK(t.value(d).values == std::vector<double>{0, 0, 0, 0});

  auto r = t.input(Tensor({1, 2}, {1, 2}));
  auto col = t.input(Tensor({2, 1}, {3, 4}));
  auto s = t.matmul(r, col);
  CHECK(t.value(s).values[0] == doctest::Approx(11.0));

  CHECK_THROWS_AS((void)t.matmul(r, r), DimensionError);
  try {
    (void)t.matmul(r, r);
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("[1,2]") != std::string::npos);
  }
}

TEST_CASE("softmax contract") {
  Tape t;
  auto x = t.input(Tensor({3}, {0, 0, 0}));
  auto y = t.softmax(x, 0, 1.0);
  for (double v : t.value(y).values) CHECK(v == doctest::Approx(1.0 / 3.0));

  double c = 17.25;
  auto x2 = t.input(Tensor({2}, {c, c + std::log(2.0)}));
  auto y2 = t.softmax(x2, 0, 1.0);
  CHECK(t.value(y2).values[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(t.value(y2).values[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  // frozen from the long-double oracle
  std::vector<double> in = {1.0, 2.0, 3.0};
  auto expect = softmax_oracle(in, 1.0);
  auto y3 = t.softmax(t.input(Tensor({3}, in)), 0, 1.0);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(t.value(y3).values[i] == doctest::Approx(expect[i]).epsilon(1e-14));

  CHECK_THROWS_AS((void)t.softmax(x, 0, 0.0), ParameterError);
  CHECK_THROWS_AS((void)t.softmax(x, 0, -1.0), ParameterError);
}

TEST_CASE("softmax rows sum to one and shift invariance") {
  Rng rng(11);
  for (int it = 0; it < 20; ++it) {
    Tensor x = random_tensor({4, 6}, rng, 3.0);
    Tape t;
    auto y = t.softmax(t.input(x), 1, 0.5);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 6; ++j) s += t.value(y).at(r, j);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
    Tensor shifted = x;
    double c = rng.uniform(-5, 5);
    for (std::size_t j = 0; j < 6; ++j) shifted.at(2, j) += c;
    Tape t2;
    auto y2 = t2.softmax(t2.input(shifted), 1, 0.5);
    for (std::size_t j = 0; j < 6; ++j)
      CHECK(std::abs(t.value(y).at(2, j) - t2.value(y2).at(2, j)) < 1e-9);
  }
}

TEST_CASE("layer_norm") {
  Tape t;
  auto gain = t.input(Tensor({4}, {1, 1, 1, 1}));
  auto bias = t.input(Tensor::zeros({4}));

  auto flat = t.layer_norm(t.input(Tensor({4}, {2, 2, 2, 2})), gain, bias, 1e-5);
  for (double v : t.value(flat).values) CHECK(v == doctest::Approx(0.0));

  auto g2 = t.input(Tensor({2}, {1, 1}));
  auto b2 = t.input(Tensor::zeros({2}));
  auto nrm = t.layer_norm(t.input(Tensor({2}, {-1, 1})), g2, b2, 1e-12);
  CHECK(t.value(nrm).values[0] == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(t.value(nrm).values[1] == doctest::Approx(1.0).epsilon(1e-6));

  // oracle: direct mean/variance recomputation
  Rng rng(5);
  Tensor x = random_tensor({4}, rng, 2.0);
  double mean = 0, var = 0;
  for (double v : x.values) mean += v;
  mean /= 4;
  for (double v : x.values) var += (v - mean) * (v - mean);
  var /= 4;
  auto y = t.layer_norm(t.input(x), gain, bias, 1e-5);
  for (std::size_t i = 0; i < 4; ++i) {
    double expect = (x.values[i] - mean) / std::sqrt(var + 1e-5);
    CHECK(t.value(y).values[i] == doctest::Approx(expect).epsilon(1e-12));
  }

  CHECK_THROWS_AS((void)t.layer_norm(t.input(Tensor::zeros({0})), gain, bias, 1e-5),
                  DimensionError);
  CHECK_THROWS_AS((void)t.layer_norm(t.input(x), gain, bias, 0.0), ParameterError);
}

TEST_CASE("max_reduce") {
  Tape t;
  auto single = t.max_reduce(t.input(Tensor({1}, {0.2})));
  CHECK(t.value(single.id).values[0] == doctest::Approx(0.2));
  CHECK(single.argmax == 0);

  auto tie = t.max_reduce(t.input(Tensor({3}, {0.1, 0.9, 0.9})));
  CHECK(t.value(tie.id).values[0] == doctest::Approx(0.9));
  CHECK(tie.argmax == 1);  // first occurrence wins

  Rng rng(7);
  Tensor v = random_tensor({64}, rng);
  auto got = t.max_reduce(t.input(v));
  double best = v.values[0];
  std::size_t arg = 0;
  for (std::size_t i = 1; i < 64; ++i)
    if (v.values[i] > best) best = v.values[i], arg = i;
  CHECK(t.value(got.id).values[0] == best);
  CHECK(got.argmax == arg);

  CHECK_THROWS_AS((void)t.max_reduce(t.input(Tensor::zeros({0}))), DimensionError);
}

TEST_CASE("backward basics") {
  {
    Tape t;
    Tensor x = Tensor({3}, {1, 2, 3}, true);
    auto xid = t.input(x);
    t.backward(t.sum(xid));
    CHECK(t.grad(xid) == std::vector<double>{1, 1, 1});
  }
  {
    // loss = 0.5 * ||x||^2  =>  grad = x
    Tape t;
    Tensor x = Tensor({4}, {1, -2, 3, -4}, true);
    auto xid = t.input(x);
    auto loss = t.scale(t.sum(t.mul(xid, xid)), 0.5);
    t.backward(loss);
    CHECK(t.grad(xid) == x.values);
  }
  {
    Tape t;
    auto xid = t.input(Tensor({2, 2}, {1, 2, 3, 4}, true));
    CHECK_THROWS_AS(t.backward(xid), ContractError);
  }
}

TEST_CASE("check_gradients on primitive ops") {
  Rng rng(42);

  // f = sum: exact
  CHECK(check_gradients([](Tape& t, Tape::NodeId x) { return t.sum(x); },
                        random_tensor({5}, rng), 1e-5) < 1e-10);

  // softmax-then-dot
  for (int it = 0; it < 5; ++it) {
    Tensor x = random_tensor({6}, rng, 2.0);
    Tensor w = random_tensor({6}, rng);
    auto f = [&w](Tape& t, Tape::NodeId x_) {
      auto p = t.softmax(x_, 0, 0.7);
      return t.sum(t.mul(p, t.constant(w)));
    };
    CHECK(check_gradients(f, x, 1e-5) < 1e-4);
  }

  // max_reduce at a strict maximum
  for (int it = 0; it < 5; ++it) {
    Tensor x = random_tensor({8}, rng, 3.0);
    auto f = [](Tape& t, Tape::NodeId x_) { return t.max_reduce(x_).id; };
    CHECK(check_gradients(f, x, 1e-5) < 1e-4);
  }

  // matmul / layer_norm / gelu / row_cosine / log-softmax composite
  for (int it = 0; it < 5; ++it) {
    Tensor x = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({4, 3}, rng);
    auto f = [&w](Tape& t, Tape::NodeId x_) {
      return t.sum(t.gelu(t.matmul(x_, t.constant(w))));
    };
    CHECK(check_gradients(f, x, 1e-5) < 1e-4);

    Tensor g = random_tensor({4}, rng);
    Tensor b = random_tensor({4}, rng);
    auto fn = [&g, &b](Tape& t, Tape::NodeId x_) {
      auto y = t.layer_norm(x_, t.constant(g), t.constant(b), 1e-5);
      return t.sum(t.mul(y, y));
    };
    CHECK(check_gradients(fn, x, 1e-5) < 1e-4);

    Tensor q = random_tensor({4}, rng);
    auto fc = [&q](Tape& t, Tape::NodeId x_) {
      return t.sum(t.row_cosine(x_, t.constant(q)));
    };
    CHECK(check_gradients(fc, x, 1e-5) < 1e-4);
    auto fq = [&x](Tape& t, Tape::NodeId q_) {
      return t.sum(t.row_cosine(t.constant(x), q_));
    };
    CHECK(check_gradients(fq, q, 1e-5) < 1e-4);
  }

  // structural ops: transpose, slices, concat, add_row, pick, stack
  for (int it = 0; it < 3; ++it) {
    Tensor x = random_tensor({4, 6}, rng);
    auto f = [](Tape& t, Tape::NodeId x_) {
      auto a = t.slice_cols(x_, 0, 3);
      auto b = t.slice_cols(x_, 3, 6);
      std::vector<Tape::NodeId> parts = {b, a};
      auto cat = t.concat_cols(parts);
      auto tr = t.transpose(cat);
      auto sl = t.slice_rows(tr, 1, 5);
      return t.mean(t.mul(sl, sl));
    };
    CHECK(check_gradients(f, x, 1e-5) < 1e-4);

    Tensor row = random_tensor({6}, rng);
    auto fr = [&row](Tape& t, Tape::NodeId x_) {
      auto y = t.add_row(x_, t.constant(row));
      auto p0 = t.pick(y, 1);
      auto p1 = t.pick(y, 9);
      std::vector<Tape::NodeId> sc = {p0, p1, p0, p1};
      return t.sum(t.mul(t.stack_scalars(sc, 2, 2), t.stack_scalars(sc, 2, 2)));
    };
    CHECK(check_gradients(fr, x, 1e-5) < 1e-4);
  }

  CHECK_THROWS_AS(check_gradients([](Tape& t, Tape::NodeId x) { return t.sum(x); },
                                  random_tensor({3}, rng), 1e-2),
                  ParameterError);
  CHECK_THROWS_AS(check_gradients([](Tape& t, Tape::NodeId x) { return t.scale(x, 2.0); },
                                  random_tensor({3}, rng), 1e-5),
                  ContractError);
}

TEST_CASE("row_cosine values and degenerate inputs") {
  Tape t;
  auto f = t.input(Tensor({2, 2}, {1, 0, 0, 1}));
  auto q = t.input(Tensor({2}, {1, 0}));
  auto c = t.row_cosine(f, q);
  CHECK(t.value(c).values[0] == doctest::Approx(1.0));
  CHECK(t.value(c).values[1] == doctest::Approx(0.0));

  auto a34 = t.cosine(t.input(Tensor({2}, {3, 4})), t.input(Tensor({2}, {4, 3})));
  CHECK(t.value(a34).values[0] == doctest::Approx(24.0 / 25.0));

  CHECK_THROWS_AS((void)t.row_cosine(f, t.input(Tensor::zeros({2}))), DegenerateInputError);
  auto zf = t.input(Tensor({2, 2}, {1, 1, 0, 0}));
  try {
    (void)t.row_cosine(zf, q);
    CHECK(false);
  } catch (const DegenerateInputError& e) {
    CHECK(std::string(e.what()).find("frame 1") != std::string::npos);
  }
}

TEST_CASE("tape determinism") {
  auto run = [](std::vector<double>& out_values, std::vector<double>& out_grad) {
    Rng rng(123);
    Tensor x = random_tensor({4, 4}, rng);
    x.requires_grad = true;
    Tensor w = random_tensor({4, 4}, rng);
    Tape t;
    auto xid = t.input(x);
    auto y = t.softmax(t.matmul(xid, t.constant(w)), 1, 0.3);
    auto loss = t.sum(t.mul(y, y));
    t.backward(loss);
    out_values = t.value(loss).values;
    out_grad = t.grad(xid);
  };
  std::vector<double> v1, g1, v2, g2;
  run(v1, g1);
  run(v2, g2);
  CHECK(std::memcmp(v1.data(), v2.data(), v1.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("finite outputs after forward and backward") {
  Rng rng(99);
  for (int it = 0; it < 10; ++it) {
    Tensor x = random_tensor({3, 5}, rng, 10.0);
    x.requires_grad = true;
    Tape t;
    auto xid = t.input(x);
    auto h = t.gelu(t.matmul(xid, t.constant(random_tensor({5, 4}, rng))));
    auto p = t.softmax(h, 1, 0.07);
    auto loss = t.scale(t.sum(t.log(p)), -1.0);
    t.backward(loss);
    CHECK(t.value(loss).all_finite());
    for (double g : t.grad(xid)) CHECK(std::isfinite(g));
  }
}
