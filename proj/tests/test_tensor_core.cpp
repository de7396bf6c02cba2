#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "flowdet/gradcheck.hpp"
#include "flowdet/ops.hpp"

using namespace flowdet;

namespace {

Tensor<double> randn64(Shape s, uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return Tensor<double>::randn(std::move(s), rng, scale);
}

}  // namespace

TEST_CASE("tensor basics and invariants") {
  auto t = Tensor<float>::from({1, 2, 3, 4, 5, 6}, {2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.at({1, 2}) == doctest::Approx(6.0f));
  CHECK_THROWS_AS(Tensor<float>::from({1, 2}, {3}), ShapeError);
  CHECK_THROWS_AS((void)t.reshape({4, 2}), ShapeError);
  auto v = t.reshape({3, 2});
  CHECK(v.at({2, 1}) == doctest::Approx(6.0f));
  CHECK(Tensor<float>::dtype() == DType::f32);
  CHECK(Tensor<double>::dtype() == DType::f64);
}

TEST_CASE("shape mismatch errors name the offending axis") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({2, 4});
  try {
    (void)add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("axis 1") != std::string::npos);
  }
}

TEST_CASE("conv2d: 1x1 identity kernel reproduces the input") {
  auto x = randn64({2, 1, 5, 5}, 7);
  auto w = Tensor<double>::from({1.0}, {1, 1, 1, 1});
  auto b = Tensor<double>::zeros({1});
  auto y = conv2d(x, w, b, 1, 0);
  REQUIRE(y.shape() == x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("conv2d: all-ones 3x3 over all-ones 3x3 sums to 9") {
  auto x = Tensor<double>::ones({1, 1, 3, 3});
  auto w = Tensor<double>::ones({1, 1, 3, 3});
  auto y = conv2d(x, w, Tensor<double>(), 1, 0);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == doctest::Approx(9.0));
}

TEST_CASE("conv2d gradients match central finite differences") {
  auto x = randn64({1, 2, 5, 4}, 11);
  auto w = randn64({3, 2, 3, 3}, 12, 0.5);
  auto b = randn64({3}, 13, 0.1);
  GradCheckOptions opt;
  opt.tol = 1e-6;
  auto rep = gradcheck(
      "conv2d", [&] { return conv2d(x, w, b, 2, 1); }, {&x, &w, &b}, opt);
  INFO(rep.note);
  CHECK(rep.pass);
}

TEST_CASE("dwconv identity factorization reproduces the input") {
  const int64_t C = 3;
  auto x = randn64({1, C, 4, 4}, 21);
  auto wd = Tensor<double>::zeros({C, 3, 3});
  for (int64_t c = 0; c < C; ++c) wd[c * 9 + 4] = 1.0;  // center tap
  auto wp = Tensor<double>::zeros({C, C});
  for (int64_t c = 0; c < C; ++c) wp[c * C + c] = 1.0;
  auto y = dwconv(x, wd, wp);
  REQUIRE(y.shape() == x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("dwconv equals conv2d with the expanded dense kernel") {
  auto x = randn64({2, 4, 6, 5}, 31);
  auto wd = randn64({4, 3, 3}, 32);
  auto wp = randn64({5, 4}, 33);
  auto y = dwconv(x, wd, wp);
  // dense[o,c,ky,kx] = wp[o,c] * wd[c,ky,kx]
  auto dense = Tensor<double>::zeros({5, 4, 3, 3});
  for (int64_t o = 0; o < 5; ++o)
    for (int64_t c = 0; c < 4; ++c)
      for (int64_t k = 0; k < 9; ++k) dense[(o * 4 + c) * 9 + k] = wp[o * 4 + c] * wd[c * 9 + k];
  auto ref = conv2d(x, dense, Tensor<double>(), 1, 1);
  REQUIRE(y.shape() == ref.shape());
  double max_diff = 0;
  for (int64_t i = 0; i < y.numel(); ++i) max_diff = std::max(max_diff, std::fabs(y[i] - ref[i]));
  CHECK(max_diff < 1e-10);
}

TEST_CASE("softmax basics") {
  auto two = softmax(Tensor<double>::from({0.0, 0.0}, {2}), 0);
  CHECK(two[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(two[1] == doctest::Approx(0.5).epsilon(1e-12));

  auto probs = softmax(Tensor<double>::from({1.0, 2.0, 3.0}, {3}), 0);
  CHECK(probs[0] == doctest::Approx(0.09003).epsilon(1e-4));
  CHECK(probs[1] == doctest::Approx(0.24473).epsilon(1e-4));
  CHECK(probs[2] == doctest::Approx(0.66524).epsilon(1e-4));
}

TEST_CASE("softmax is shift invariant and rows sum to one") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const double shift = rng.uniform(-50.0, 50.0);
    auto x = Tensor<double>::rand_uniform({4, 6}, rng, -3.0, 3.0);
    auto shifted = add_scalar(x, shift);
    auto a = softmax(x, 1);
    auto b = softmax(shifted, 1);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
    for (int64_t r = 0; r < 4; ++r) {
      double s = 0;
      for (int64_t c = 0; c < 6; ++c) s += a[r * 6 + c];
      CHECK(std::fabs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("split/concat round trip is bit exact") {
  Rng rng(99);
  auto x = Tensor<double>::randn({2, 64, 3, 3}, rng);
  auto halves = split(x, 1, 2);
  CHECK(halves[0].shape() == Shape{2, 32, 3, 3});
  auto back = concat(halves, 1);
  REQUIRE(back.shape() == x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(back[i] == x[i]);  // exact
}

TEST_CASE("layernorm normalizes rows to mean 0 variance 1") {
  Rng rng(123);
  auto x = Tensor<double>::rand_uniform({6, 16}, rng, -4.0, 9.0);
  auto gamma = Tensor<double>::ones({16});
  auto beta = Tensor<double>::zeros({16});
  auto y = layernorm(x, gamma, beta);
  for (int64_t r = 0; r < 6; ++r) {
    double m = 0, v = 0;
    for (int64_t c = 0; c < 16; ++c) m += y[r * 16 + c];
    m /= 16;
    for (int64_t c = 0; c < 16; ++c) v += (y[r * 16 + c] - m) * (y[r * 16 + c] - m);
    v /= 16;
    CHECK(std::fabs(m) < 1e-10);
    CHECK(std::fabs(v - 1.0) < 1e-8);
  }
}

TEST_CASE("matmul gradient matches finite differences") {
  auto a = randn64({3, 4}, 41);
  auto b = randn64({4, 5}, 42);
  GradCheckOptions opt;
  opt.tol = 1e-6;
  auto rep = gradcheck(
      "matmul", [&] { return matmul(a, b); }, {&a, &b}, opt);
  INFO(rep.note);
  CHECK(rep.pass);
}

TEST_CASE("backward: loss = sum(x) gives all-ones gradient") {
  auto x = randn64({2, 3}, 51);
  x.set_requires_grad(true);
  Graph<double> g;
  auto loss = sum(x);
  g.backward(loss);
  auto gx = x.grad();
  for (int64_t i = 0; i < gx.numel(); ++i) CHECK(gx[i] == doctest::Approx(1.0));
}

TEST_CASE("backward: loss = sum(x*x) gives 2x") {
  auto x = randn64({7}, 52);
  x.set_requires_grad(true);
  Graph<double> g;
  auto loss = sum(mul(x, x));
  g.backward(loss);
  auto gx = x.grad();
  for (int64_t i = 0; i < 7; ++i) CHECK(gx[i] == doctest::Approx(2.0 * x[i]).epsilon(1e-12));
}

TEST_CASE("backward requires a scalar loss") {
  auto x = randn64({3}, 53);
  x.set_requires_grad(true);
  Graph<double> g;
  auto y = mul(x, x);
  CHECK_THROWS_AS(g.backward(y), ValueError);
}

TEST_CASE("leaves with no path to the loss read back a zero gradient") {
  auto x = randn64({3}, 54);
  auto orphan = randn64({4}, 55);
  x.set_requires_grad(true);
  orphan.set_requires_grad(true);
  Graph<double> g;
  auto loss = sum(mul(x, x));
  (void)sigmoid(orphan);  // recorded but disconnected from loss
  g.backward(loss);
  auto go = orphan.grad();
  for (int64_t i = 0; i < 4; ++i) CHECK(go[i] == 0.0);
}

TEST_CASE("composite chain matches finite differences") {
  auto x = randn64({4, 4}, 61);
  auto w = randn64({4, 4}, 62);
  auto rep = gradcheck(
      "composite",
      [&] {
        auto h = sigmoid(matmul(x, w));
        auto t = tanh(add(h, x));
        return mean(mul(t, t));
      },
      {&x, &w});
  INFO(rep.note);
  CHECK(rep.pass);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("gradcheck: linear op is exact to 1e-9") {
  auto x = randn64({5}, 71);
  auto rep = gradcheck(
      "linear_scale", [&] { return scale(x, 3.25); }, {&x}, {.eps = 1e-5, .tol = 1e-9});
  INFO(rep.note);
  CHECK(rep.pass);
}

TEST_CASE("gradcheck: sigmoid chain passes at 1e-6") {
  auto x = randn64({6}, 72);
  auto rep = gradcheck(
      "sigmoid_chain", [&] { return sum(sigmoid(sigmoid(x))); }, {&x}, {.eps = 1e-5, .tol = 1e-6});
  INFO(rep.note);
  CHECK(rep.pass);
}

namespace {
// fixture op with a deliberately wrong backward rule (negative control)
Tensor<double> buggy_double(const Tensor<double>& a) {
  Tensor<double> out = Tensor<double>::zeros(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = 2.0 * a[i];
  if (auto* g = detail::begin_record<double>({&a}, out)) {
    g->add_node("buggy_double", [a, out]() {
      const double* go = out.storage()->grad.data();
      double* ga = a.storage()->grad.data();
      for (int64_t i = 0; i < a.numel(); ++i) ga[i] += 3.0 * go[i];  // wrong factor
    });
  }
  return out;
}
}  // namespace

TEST_CASE("gradcheck flags a sabotaged backward rule") {
  auto x = randn64({4}, 73);
  auto rep = gradcheck(
      "buggy_double", [&] { return buggy_double(x); }, {&x});
  CHECK_FALSE(rep.pass);
  CHECK(rep.max_rel_err > 0.1);
}

TEST_CASE("every primitive passes gradcheck across 100 seeds") {
  struct Entry {
    const char* name;
    std::function<GradCheckReport(uint64_t)> run;
  };
  auto pairwise = [](const char* name, Tensor<double> (*op)(const Tensor<double>&,
                                                            const Tensor<double>&)) {
    return [name, op](uint64_t seed) {
      auto a = randn64({3, 4}, seed * 2 + 1);
      auto b = randn64({3, 4}, seed * 2 + 2);
      return gradcheck(
          name, [&] { return op(a, b); }, {&a, &b});
    };
  };
  auto unary = [](const char* name, Tensor<double> (*op)(const Tensor<double>&)) {
    return [name, op](uint64_t seed) {
      auto a = randn64({3, 5}, seed + 77);
      return gradcheck(
          name, [&] { return op(a); }, {&a});
    };
  };
  std::vector<Entry> entries = {
      {"add", pairwise("add", add<double>)},
      {"sub", pairwise("sub", sub<double>)},
      {"mul", pairwise("mul", mul<double>)},
      {"minimum", pairwise("minimum", minimum<double>)},
      {"maximum", pairwise("maximum", maximum<double>)},
      {"sigmoid", unary("sigmoid", sigmoid<double>)},
      {"tanh", unary("tanh", tanh<double>)},
      {"silu", unary("silu", silu<double>)},
      {"relu", unary("relu", relu<double>)},
      {"exp", unary("exp", exp<double>)},
      {"abs", unary("abs", abs<double>)},
      {"softmax",
       [](uint64_t seed) {
         auto a = randn64({2, 5}, seed + 3);
         return gradcheck(
             "softmax", [&] { return softmax(a, 1); }, {&a});
       }},
      {"div",
       [](uint64_t seed) {
         auto a = randn64({3, 4}, seed * 2 + 1);
         Rng rng(seed * 2 + 2);
         auto b = Tensor<double>::rand_uniform({3, 4}, rng, 0.5, 2.0);
         return gradcheck(
             "div", [&] { return div(a, b); }, {&a, &b});
       }},
      {"matmul",
       [](uint64_t seed) {
         auto a = randn64({2, 3}, seed + 5);
         auto b = randn64({3, 4}, seed + 6);
         return gradcheck(
             "matmul", [&] { return matmul(a, b); }, {&a, &b});
       }},
      {"bmm_trans",
       [](uint64_t seed) {
         auto a = randn64({2, 4, 3}, seed + 7);
         auto b = randn64({2, 4, 5}, seed + 8);
         return gradcheck(
             "bmm_trans", [&] { return bmm(a, b, true, false); }, {&a, &b});
       }},
      {"layernorm",
       [](uint64_t seed) {
         auto x = randn64({3, 6}, seed + 9);
         auto ga = randn64({6}, seed + 10);
         auto be = randn64({6}, seed + 11);
         return gradcheck(
             "layernorm", [&] { return layernorm(x, ga, be); }, {&x, &ga, &be});
       }},
      {"conv2d",
       [](uint64_t seed) {
         auto x = randn64({1, 2, 4, 4}, seed + 12);
         auto w = randn64({2, 2, 3, 3}, seed + 13);
         auto b = randn64({2}, seed + 14);
         return gradcheck(
             "conv2d", [&] { return conv2d(x, w, b, 1, 1); }, {&x, &w, &b});
       }},
      {"depthwise",
       [](uint64_t seed) {
         auto x = randn64({1, 3, 4, 4}, seed + 15);
         auto w = randn64({3, 3, 3}, seed + 16);
         return gradcheck(
             "depthwise", [&] { return depthwise_conv2d(x, w); }, {&x, &w});
       }},
      {"avgpool2d",
       [](uint64_t seed) {
         auto x = randn64({1, 2, 5, 5}, seed + 17);
         return gradcheck(
             "avgpool2d", [&] { return avgpool2d(x, 2); }, {&x});
       }},
      {"split_concat",
       [](uint64_t seed) {
         auto x = randn64({2, 4, 2, 2}, seed + 18);
         return gradcheck(
             "split_concat",
             [&] {
               auto parts = split(x, 1, 2);
               return concat(std::vector<Tensor<double>>{parts[1], parts[0]}, 1);
             },
             {&x});
       }},
      {"permute",
       [](uint64_t seed) {
         auto x = randn64({2, 3, 4}, seed + 19);
         return gradcheck(
             "permute", [&] { return permute(x, {2, 0, 1}); }, {&x});
       }},
      {"select_rows",
       [](uint64_t seed) {
         auto x = randn64({5, 3}, seed + 20);
         return gradcheck(
             "select_rows", [&] { return select_rows(x, {4, 0, 0, 2}); }, {&x});
       }},
      {"cross_entropy_rows",
       [](uint64_t seed) {
         auto x = randn64({4, 3}, seed + 21);
         return gradcheck(
             "cross_entropy_rows",
             [&] { return cross_entropy_rows(x, {0, 2, 1, 2}, {1.0, 0.1, 1.0, 0.1}); }, {&x});
       }},
  };

  for (const auto& entry : entries) {
    double worst = 0.0;
    for (uint64_t seed = 1; seed <= 100; ++seed) {
      auto rep = entry.run(seed);
      worst = std::max(worst, rep.max_rel_err);
      if (!rep.pass) {
        CAPTURE(entry.name);
        CAPTURE(seed);
        INFO(rep.note);
        REQUIRE(rep.pass);
      }
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("forward passes are deterministic for a fixed seed") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    auto x = Tensor<float>::randn({1, 3, 8, 8}, rng);
    auto w = Tensor<float>::randn({4, 3, 3, 3}, rng, 0.3);
    auto b = Tensor<float>::randn({4}, rng, 0.1);
    auto y = silu(conv2d(x, w, b, 2, 1));
    return std::vector<float>(y.data().begin(), y.data().end());
  };
  auto a = run(2024);
  auto b = run(2024);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);  // bit identical
}

TEST_CASE("tensor binary dump round trips") {
  Rng rng(7);
  auto t = Tensor<float>::randn({2, 3, 4}, rng);
  const auto path = std::filesystem::temp_directory_path() / "flowdet_dump_test.bin";
  save_tensor_file(path.string(), t);
  auto back = load_tensor_file<float>(path.string());
  REQUIRE(back.shape() == t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) CHECK(back[i] == t[i]);
  CHECK_THROWS_AS(load_tensor_file<double>(path.string()), IoError);  // dtype tag mismatch

  // header layout: magic, rank, extents, dtype tag
  std::ifstream chk(path, std::ios::binary);
  char magic[8];
  chk.read(magic, 8);
  CHECK(std::string(magic, 8) == "FDTENSOR");
  uint32_t rank = 0;
  chk.read(reinterpret_cast<char*>(&rank), 4);
  CHECK(rank == 3);
  uint32_t e0 = 0, e1 = 0, e2 = 0;
  chk.read(reinterpret_cast<char*>(&e0), 4);
  chk.read(reinterpret_cast<char*>(&e1), 4);
  chk.read(reinterpret_cast<char*>(&e2), 4);
  CHECK(e0 == 2);
  CHECK(e1 == 3);
  CHECK(e2 == 4);
  uint8_t tag = 255;
  chk.read(reinterpret_cast<char*>(&tag), 1);
  CHECK(tag == 0);  // f32
  chk.close();
  std::filesystem::remove(path);
}
