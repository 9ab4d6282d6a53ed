#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "test_support.hpp"
#include "tsr/kernels.hpp"

using namespace tsr;
using namespace tsr::testing;

TEST_CASE("tensor shape invariants") {
  CHECK_THROWS_AS(Tensor<float>({2, 0, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>({}, {}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, {1.f, 2.f, 3.f}), ShapeError);
  Tensor<float> t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.all_finite());
}

TEST_CASE("conv2d matches hand-computed 2x2 example") {
  // [[1,2],[3,4]] * [[1,0],[0,1]] -> 1*1 + 4*1 = 5
  Tensor<float> x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor<float> w({1, 1, 2, 2}, {1, 0, 0, 1});
  Tensor<float> y = conv2d_fwd(x, w, nullptr, 1, 0);
  CHECK(y.shape() == std::vector<int64_t>{1, 1, 1, 1});
  CHECK(y[0] == doctest::Approx(5.0).epsilon(1e-6));
}

TEST_CASE("conv2d with a 1x1 identity kernel is the identity") {
  std::mt19937_64 rng(7);
  Tensor<float> x = random_tensor<float>({2, 1, 5, 3}, rng);
  Tensor<float> w({1, 1, 1, 1}, {1.f});
  Tensor<float> y = conv2d_fwd(x, w, nullptr, 1, 0);
  CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("conv2d agrees with the naive quadruple-loop reference") {
  std::mt19937_64 rng(11);
  Tensor<float> x = random_tensor<float>({1, 2, 5, 5}, rng);
  Tensor<float> w = random_tensor<float>({3, 2, 3, 3}, rng);
  Tensor<float> b = random_tensor<float>({3}, rng);
  SUBCASE("stride 2 pad 1") {
    Tensor<float> got = conv2d_fwd(x, w, &b, 2, 1);
    Tensor<float> ref = naive_conv2d(x, w, &b, 2, 1);
    CHECK(got.shape() == ref.shape());
    CHECK(max_rel_diff(got, ref) < 1e-6);
  }
  SUBCASE("stride 1 pad 0, no bias") {
    Tensor<float> got = conv2d_fwd(x, w, nullptr, 1, 0);
    Tensor<float> ref = naive_conv2d(x, w, nullptr, 1, 0);
    CHECK(max_rel_diff(got, ref) < 1e-6);
  }
  SUBCASE("batch > 1, stride 2, pad 2") {
    Tensor<float> xb = random_tensor<float>({3, 2, 6, 7}, rng);
    Tensor<float> got = conv2d_fwd(xb, w, &b, 2, 2);
    Tensor<float> ref = naive_conv2d(xb, w, &b, 2, 2);
    CHECK(got.shape() == ref.shape());
    CHECK(max_rel_diff(got, ref) < 1e-6);
  }
}

TEST_CASE("conv2d rejects channel mismatch with both shapes in the message") {
  Tensor<float> x({1, 2, 4, 4});
  Tensor<float> w({3, 5, 3, 3});
  try {
    conv2d_fwd(x, w, nullptr, 1, 1);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[1,2,4,4]") != std::string::npos);
    CHECK(msg.find("[3,5,3,3]") != std::string::npos);
  }
}

TEST_CASE("conv2d rejects kernels larger than the padded input") {
  Tensor<float> x({1, 1, 2, 2});
  Tensor<float> w({1, 1, 5, 5});
  CHECK_THROWS_AS(conv2d_fwd(x, w, nullptr, 1, 0), ShapeError);
  CHECK_NOTHROW(conv2d_fwd(x, w, nullptr, 1, 2));  // padded size 6 fits
}

TEST_CASE("conv2d is linear in its input") {
  std::mt19937_64 rng(13);
  Tensor<double> x = random_tensor<double>({1, 2, 6, 6}, rng);
  Tensor<double> z = random_tensor<double>({1, 2, 6, 6}, rng);
  Tensor<double> w = random_tensor<double>({3, 2, 3, 3}, rng);
  const double a = 1.7, b = -0.4;
  Tensor<double> combo(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) combo[i] = a * x[i] + b * z[i];
  Tensor<double> lhs = conv2d_fwd(combo, w, nullptr, 1, 1);
  Tensor<double> cx = conv2d_fwd(x, w, nullptr, 1, 1);
  Tensor<double> cz = conv2d_fwd(z, w, nullptr, 1, 1);
  Tensor<double> rhs(lhs.shape());
  for (int64_t i = 0; i < rhs.size(); ++i) rhs[i] = a * cx[i] + b * cz[i];
  CHECK(max_rel_diff(lhs, rhs) < 1e-5);
}

TEST_CASE("transposed conv scatters a single input over the kernel footprint") {
  // 1x1 input of 3 with an all-ones 2x2 kernel, stride 2 -> 2x2 of 3s.
  Tensor<float> x({1, 1, 1, 1}, {3.f});
  Tensor<float> w = Tensor<float>::full({1, 1, 2, 2}, 1.f);
  Tensor<float> y = deconv2d_fwd(x, w, nullptr, 2, 0);
  CHECK(y.shape() == std::vector<int64_t>{1, 1, 2, 2});
  for (int64_t i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(3.0));
}

TEST_CASE("transposed conv matches naive scatter reference") {
  std::mt19937_64 rng(17);
  Tensor<float> x = random_tensor<float>({2, 3, 4, 5}, rng);
  Tensor<float> w = random_tensor<float>({3, 2, 4, 4}, rng);
  Tensor<float> b = random_tensor<float>({2}, rng);
  Tensor<float> got = deconv2d_fwd(x, w, &b, 2, 1);
  Tensor<float> ref = naive_deconv2d(x, w, &b, 2, 1);
  CHECK(got.shape() == ref.shape());
  CHECK(max_rel_diff(got, ref) < 1e-5);
}

TEST_CASE("transposed conv 4x geometry: stride 4 kernel 8 pad 2 quadruples dims") {
  Tensor<float> x({1, 2, 8, 8});
  Tensor<float> w({2, 1, 8, 8});
  Tensor<float> y = deconv2d_fwd(x, w, nullptr, 4, 2);
  CHECK(y.shape() == std::vector<int64_t>{1, 1, 32, 32});
}

TEST_CASE("transposed conv rejects non-positive output geometry") {
  Tensor<float> x({1, 1, 1, 1});
  Tensor<float> w({1, 1, 2, 2});
  CHECK_THROWS_AS(deconv2d_fwd(x, w, nullptr, 1, 3), ShapeError);
}

TEST_CASE("conv2d and conv2d_transposed are adjoint") {
  std::mt19937_64 rng(19);
  struct Geom {
    std::vector<int64_t> xs, ws;
    int64_t stride, pad;
  };
  // <conv(x,w), y> == <x, deconv(y,w)> with y shaped like conv(x,w).
  std::vector<Geom> cases = {
      {{1, 2, 4, 4}, {3, 2, 3, 3}, 1, 1},
      {{1, 3, 8, 8}, {2, 3, 8, 8}, 4, 2},
      {{2, 1, 6, 5}, {4, 1, 3, 3}, 2, 1},
      {{1, 2, 9, 9}, {2, 2, 6, 6}, 2, 2},
  };
  for (const auto& g : cases) {
    Tensor<double> x = random_tensor<double>(g.xs, rng);
    Tensor<double> w = random_tensor<double>(g.ws, rng);
    Tensor<double> cx = conv2d_fwd(x, w, nullptr, g.stride, g.pad);
    Tensor<double> y = random_tensor<double>(cx.shape(), rng);
    // deconv weight layout is [Cin,Cout,kH,kW] == conv's [Cout,Cin,...] read backwards,
    // so pass w unchanged with deconv input channel count = conv output channels.
    Tensor<double> dy = deconv2d_fwd(y, w, nullptr, g.stride, g.pad);
    CHECK(dy.shape() == x.shape());
    const double lhs = inner_product(cx, y);
    const double rhs = inner_product(x, dy);
    CHECK(std::abs(lhs - rhs) <= 1e-5 * std::max({std::abs(lhs), std::abs(rhs), 1.0}));
  }
}

TEST_CASE("space_to_depth block 1 is the identity") {
  std::mt19937_64 rng(23);
  Tensor<float> x = random_tensor<float>({2, 3, 4, 4}, rng);
  Tensor<float> y = space_to_depth_fwd(x, 1);
  CHECK(y.shape() == x.shape());
  CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("space_to_depth enumerates a 2x2 block in channel order") {
  Tensor<float> x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor<float> y = space_to_depth_fwd(x, 2);
  CHECK(y.shape() == std::vector<int64_t>{1, 4, 1, 1});
  CHECK(y[0] == 1);
  CHECK(y[1] == 2);
  CHECK(y[2] == 3);
  CHECK(y[3] == 4);
}

TEST_CASE("space_to_depth and depth_to_space are exact inverses") {
  std::mt19937_64 rng(29);
  Tensor<float> x = random_tensor<float>({2, 3, 8, 8}, rng);
  Tensor<float> rt = depth_to_space_fwd(space_to_depth_fwd(x, 4), 4);
  CHECK(rt.shape() == x.shape());
  CHECK(max_abs_diff(x, rt) == 0.0);  // bit-identical
  Tensor<float> rt2 = space_to_depth_fwd(depth_to_space_fwd(x, 1), 1);
  CHECK(max_abs_diff(x, rt2) == 0.0);
}

TEST_CASE("space_to_depth rejects non-divisible spatial dims") {
  Tensor<float> x({1, 1, 5, 4});
  CHECK_THROWS_AS(space_to_depth_fwd(x, 2), ShapeError);
}

TEST_CASE("elementwise ops") {
  Tensor<float> a({1, 2}, {3, 1});
  Tensor<float> b({1, 2}, {1, 2});
  SUBCASE("sub in argument order") {
    Tensor<float> d = eltwise_fwd(EltwiseOp::Sub, a, b);
    CHECK(d[0] == 2);
    CHECK(d[1] == -1);
  }
  SUBCASE("sub of a tensor with itself is zero") {
    Tensor<float> z = eltwise_fwd(EltwiseOp::Sub, a, a);
    CHECK(z[0] == 0);
    CHECK(z[1] == 0);
  }
  SUBCASE("add undoes sub") {
    std::mt19937_64 rng(31);
    Tensor<float> x = random_tensor<float>({2, 3, 4, 4}, rng);
    Tensor<float> y = random_tensor<float>({2, 3, 4, 4}, rng);
    Tensor<float> back = eltwise_fwd(EltwiseOp::Add, eltwise_fwd(EltwiseOp::Sub, x, y), y);
    CHECK(max_abs_diff(back, x) < 1e-6);
  }
  SUBCASE("no broadcasting: shape mismatch rejected") {
    Tensor<float> c({2, 1}, {1, 1});
    CHECK_THROWS_AS(eltwise_fwd(EltwiseOp::Add, a, c), ShapeError);
    CHECK_THROWS_AS(eltwise_fwd(EltwiseOp::Mul, a, Tensor<float>({1, 3})), ShapeError);
  }
}

TEST_CASE("activations") {
  SUBCASE("relu") {
    Tensor<float> x({3}, {-1, 0, 2});
    Tensor<float> y = relu_fwd(x);
    CHECK(y[0] == 0);
    CHECK(y[1] == 0);
    CHECK(y[2] == 2);
  }
  SUBCASE("prelu slope 0.25") {
    Tensor<float> x({2}, {-2, 3});
    Tensor<float> y = prelu_fwd(x, Tensor<float>::scalar(0.25f));
    CHECK(y[0] == doctest::Approx(-0.5));
    CHECK(y[1] == doctest::Approx(3.0));
  }
  SUBCASE("prelu slope 1 is the identity") {
    std::mt19937_64 rng(37);
    Tensor<float> x = random_tensor<float>({1, 2, 3, 3}, rng);
    Tensor<float> y = prelu_fwd(x, Tensor<float>::scalar(1.0f));
    CHECK(max_abs_diff(x, y) == 0.0);
  }
  SUBCASE("non-finite input rejected") {
    Tensor<float> x({1}, {std::numeric_limits<float>::quiet_NaN()});
    CHECK_THROWS(relu_fwd(x));
    CHECK_THROWS(prelu_fwd(x, Tensor<float>::scalar(0.25f)));
    Tensor<float> ok({1}, {1.f});
    CHECK_THROWS(prelu_fwd(ok, Tensor<float>::scalar(std::numeric_limits<float>::infinity())));
  }
}

TEST_CASE("mean absolute error") {
  SUBCASE("identical tensors give zero") {
    Tensor<float> a({2, 2}, {1, 2, 3, 4});
    CHECK(mae_fwd(a, a) == 0.0f);
  }
  SUBCASE("hand arithmetic") {
    Tensor<float> p({2}, {1, 2});
    Tensor<float> t({2}, {0, 4});
    CHECK(mae_fwd(p, t) == doctest::Approx(1.5));
  }
  SUBCASE("agrees with naive loop oracle") {
    std::mt19937_64 rng(41);
    Tensor<double> p = random_tensor<double>({2, 1, 7, 5}, rng);
    Tensor<double> t = random_tensor<double>({2, 1, 7, 5}, rng);
    double acc = 0;
    for (int64_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - t[i]);
    CHECK(mae_fwd(p, t) == doctest::Approx(acc / p.size()).epsilon(1e-7));
  }
  SUBCASE("shape mismatch rejected") {
    CHECK_THROWS_AS(mae_fwd(Tensor<float>({2}), Tensor<float>({3})), ShapeError);
  }
}

TEST_CASE("forward kernels keep finite inputs finite") {
  std::mt19937_64 rng(43);
  Tensor<float> x = random_tensor<float>({1, 2, 6, 6}, rng, -10.f, 10.f);
  Tensor<float> w = random_tensor<float>({3, 2, 3, 3}, rng, -10.f, 10.f);
  Tensor<float> wd = random_tensor<float>({2, 3, 6, 6}, rng, -10.f, 10.f);
  CHECK(conv2d_fwd(x, w, nullptr, 1, 1).all_finite());
  CHECK(deconv2d_fwd(x, wd, nullptr, 2, 2).all_finite());
  CHECK(space_to_depth_fwd(x, 2).all_finite());
  CHECK(prelu_fwd(x, Tensor<float>::scalar(0.25f)).all_finite());
}

TEST_CASE("kernels are deterministic across repeated runs") {
  std::mt19937_64 rng(47);
  Tensor<float> x = random_tensor<float>({2, 3, 9, 9}, rng);
  Tensor<float> w = random_tensor<float>({4, 3, 3, 3}, rng);
  Tensor<float> a = conv2d_fwd(x, w, nullptr, 2, 1);
  Tensor<float> b = conv2d_fwd(x, w, nullptr, 2, 1);
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0);
}
