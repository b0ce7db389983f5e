// Every primitive is checked against central differences in 64-bit, and the
// forward passes of the convolution family against direct loop oracles.

#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "bonecheck/gradcheck.hpp"
#include "bonecheck/ops.hpp"
#include "bonecheck/zoo.hpp"
#include "support.hpp"

using namespace bonecheck;
using testing_support::random_away_from_zero;
using testing_support::random_tensor;

namespace {

constexpr double kEps = 1e-5;
constexpr double kTol = 1e-4;

/// Reduces any output to a scalar through a fixed random projection so that
/// every output element carries a distinct weight.
Var<double> project(const Var<double>& y, std::uint64_t seed = 99) {
  Rng r(seed);
  auto w = y.tape()->constant(random_tensor<double>(y.shape(), r));
  return sum(mul(y, w));
}

void expect_gradient_ok(const ScalarFunction& f, const Tensor<double>& at, const char* what) {
  const GradCheckResult res = finite_difference_check(f, at, kEps);
  EXPECT_LT(res.max_relative_error, kTol) << what << ": worst coordinate " << res.worst_index << " analytic "
                                          << res.analytic << " numeric " << res.numeric;
}

Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>& b, std::size_t s,
                           std::size_t p) {
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto O = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t oh = (H + 2 * p - kh) / s + 1, ow = (W + 2 * p - kw) / s + 1;
  Tensor<double> out({N, O, oh, ow});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = b[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long y = static_cast<long>(i * s + u) - static_cast<long>(p);
                const long xx = static_cast<long>(j * s + v) - static_cast<long>(p);
                if (y < 0 || xx < 0 || y >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                acc += x.at(n, c, static_cast<std::size_t>(y), static_cast<std::size_t>(xx)) * k.at(o, c, u, v);
              }
          out.at(n, o, i, j) = acc;
        }
  return out;
}

void expect_close(const Tensor<double>& a, const Tensor<double>& b, double tol = 1e-12) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "index " << i;
}

}  // namespace

TEST(Conv2d, ForwardMatchesDirectLoops) {
  Rng r(1);
  for (auto [s, p] : {std::pair<std::size_t, std::size_t>{1, 0}, {1, 1}, {2, 1}, {2, 0}, {3, 2}}) {
    auto x = random_tensor<double>({2, 3, 7, 6}, r);
    auto k = random_tensor<double>({4, 3, 3, 3}, r);
    auto b = random_tensor<double>({4}, r);
    Tape<double> tape;
    auto y = conv2d(tape.constant(x), tape.constant(k), tape.constant(b), s, p);
    expect_close(y.value(), conv_oracle(x, k, b, s, p));
  }
}

TEST(Conv2d, OutputShapeProperty) {
  Rng r(2);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t H = 3 + r.below(8), W = 3 + r.below(8), k = 1 + r.below(3), s = 1 + r.below(3), p = r.below(2);
    if (k > H + 2 * p || k > W + 2 * p) continue;
    Tape<double> tape;
    auto y = conv2d(tape.constant(Tensor<double>({1, 2, H, W}, 1.0)), tape.constant(Tensor<double>({3, 2, k, k}, 1.0)),
                    tape.constant(Tensor<double>({3})), s, p);
    EXPECT_EQ(y.shape(), (Shape{1, 3, (H + 2 * p - k) / s + 1, (W + 2 * p - k) / s + 1}));
  }
}

TEST(Conv2d, ShapeErrorsNameTheAxis) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 3, 5, 5}));
  auto k = tape.constant(Tensor<double>({2, 4, 3, 3}));
  auto b = tape.constant(Tensor<double>({2}));
  try {
    conv2d(x, k, b, 1, 0);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos);
  }
  auto big = tape.constant(Tensor<double>({2, 3, 9, 9}));
  EXPECT_THROW(conv2d(x, big, b, 1, 0), ShapeError);
}

TEST(Conv2d, Gradients) {
  Rng r(3);
  const auto x = random_tensor<double>({2, 2, 5, 5}, r);
  const auto k = random_tensor<double>({3, 2, 3, 3}, r);
  const auto b = random_tensor<double>({3}, r);
  for (auto [s, p] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 1}, {2, 0}}) {
    expect_gradient_ok([&](const Var<double>& v) {
      auto* t = v.tape();
      return project(conv2d(v, t->constant(k), t->constant(b), s, p));
    }, x, "conv2d input");
    expect_gradient_ok([&](const Var<double>& v) {
      auto* t = v.tape();
      return project(conv2d(t->constant(x), v, t->constant(b), s, p));
    }, k, "conv2d kernel");
    expect_gradient_ok([&](const Var<double>& v) {
      auto* t = v.tape();
      return project(conv2d(t->constant(x), t->constant(k), v, s, p));
    }, b, "conv2d bias");
  }
}

TEST(DepthwiseConv2d, ForwardIsPerChannelConvolution) {
  Rng r(4);
  auto x = random_tensor<double>({1, 3, 6, 6}, r);
  auto k = random_tensor<double>({3, 1, 3, 3}, r);
  auto b = random_tensor<double>({3}, r);
  Tape<double> tape;
  auto y = depthwise_conv2d(tape.constant(x), tape.constant(k), tape.constant(b), 2, 1);
  for (std::size_t c = 0; c < 3; ++c) {
    Tensor<double> xc({1, 1, 6, 6}), kc({1, 1, 3, 3}), bc({1}, b[c]);
    for (std::size_t i = 0; i < 36; ++i) xc[i] = x[c * 36 + i];
    for (std::size_t i = 0; i < 9; ++i) kc[i] = k[c * 9 + i];
    const auto ref = conv_oracle(xc, kc, bc, 2, 1);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.value()[c * ref.size() + i], ref[i], 1e-12);
  }
}

TEST(DepthwiseConv2d, Gradients) {
  Rng r(5);
  const auto x = random_tensor<double>({2, 3, 5, 4}, r);
  const auto k = random_tensor<double>({3, 1, 3, 3}, r);
  const auto b = random_tensor<double>({3}, r);
  expect_gradient_ok([&](const Var<double>& v) {
    auto* t = v.tape();
    return project(depthwise_conv2d(v, t->constant(k), t->constant(b), 1, 1));
  }, x, "depthwise input");
  expect_gradient_ok([&](const Var<double>& v) {
    auto* t = v.tape();
    return project(depthwise_conv2d(t->constant(x), v, t->constant(b), 2, 1));
  }, k, "depthwise kernel");
  expect_gradient_ok([&](const Var<double>& v) {
    auto* t = v.tape();
    return project(depthwise_conv2d(t->constant(x), t->constant(k), v, 1, 0));
  }, b, "depthwise bias");
}

TEST(SeparableConv2d, EqualsDepthwiseThenPointwise) {
  Rng r(6);
  auto x = random_tensor<double>({1, 2, 5, 5}, r);
  auto dk = random_tensor<double>({2, 1, 3, 3}, r);
  auto db = random_tensor<double>({2}, r);
  auto pk = random_tensor<double>({4, 2, 1, 1}, r);
  auto pb = random_tensor<double>({4}, r);
  Tape<double> tape;
  auto X = tape.constant(x);
  auto a = depthwise_separable_conv2d(X, tape.constant(dk), tape.constant(db), tape.constant(pk), tape.constant(pb), 1, 1);
  auto mid = depthwise_conv2d(X, tape.constant(dk), tape.constant(db), 1, 1);
  auto b = conv2d(mid, tape.constant(pk), tape.constant(pb), 1, 0);
  expect_close(a.value(), b.value());
}

TEST(SeparableConv2d, Gradients) {
  Rng r(7);
  const auto x = random_tensor<double>({1, 2, 5, 5}, r);
  const auto dk = random_tensor<double>({2, 1, 3, 3}, r);
  const auto db = random_tensor<double>({2}, r);
  const auto pk = random_tensor<double>({3, 2, 1, 1}, r);
  const auto pb = random_tensor<double>({3}, r);
  expect_gradient_ok([&](const Var<double>& v) {
    auto* t = v.tape();
    return project(depthwise_separable_conv2d(v, t->constant(dk), t->constant(db), t->constant(pk), t->constant(pb), 2, 1));
  }, x, "separable input");
  expect_gradient_ok([&](const Var<double>& v) {
    auto* t = v.tape();
    return project(depthwise_separable_conv2d(t->constant(x), t->constant(dk), t->constant(db), v, t->constant(pb), 1, 1));
  }, pk, "separable pointwise kernel");
}

TEST(GlobalAveragePool, ForwardAndGradient) {
  Rng r(8);
  const auto x = random_tensor<double>({2, 3, 4, 5}, r);
  Tape<double> tape;
  auto y = global_average_pool(tape.constant(x));
  ASSERT_EQ(y.shape(), (Shape{2, 3}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0;
      for (std::size_t i = 0; i < 20; ++i) s += x[(n * 3 + c) * 20 + i];
      EXPECT_NEAR(y.value()[n * 3 + c], s / 20, 1e-14);
    }
  expect_gradient_ok([](const Var<double>& v) { return project(global_average_pool(v)); }, x, "gap");
}

TEST(Affine, ForwardAndGradients) {
  Rng r(9);
  const auto x = random_tensor<double>({3, 4}, r);
  const auto w = random_tensor<double>({4, 2}, r);
  const auto b = random_tensor<double>({2}, r);
  Tape<double> tape;
  auto y = affine(tape.constant(x), tape.constant(w), tape.constant(b));
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t m = 0; m < 2; ++m) {
      double acc = b[m];
      for (std::size_t c = 0; c < 4; ++c) acc += x[n * 4 + c] * w[c * 2 + m];
      EXPECT_NEAR(y.value()[n * 2 + m], acc, 1e-14);
    }
  expect_gradient_ok([&](const Var<double>& v) {
    auto* t = v.tape();
    return project(affine(v, t->constant(w), t->constant(b)));
  }, x, "affine input");
  expect_gradient_ok([&](const Var<double>& v) {
    auto* t = v.tape();
    return project(affine(t->constant(x), v, t->constant(b)));
  }, w, "affine weight");
  expect_gradient_ok([&](const Var<double>& v) {
    auto* t = v.tape();
    return project(affine(t->constant(x), t->constant(w), v));
  }, b, "affine bias");
}

TEST(Sigmoid, StaysStrictlyInsideUnitInterval) {
  for (double z : {-1000.0, -40.0, -5.0, 0.0, 5.0, 40.0, 1000.0}) {
    const double p = logistic(z);
    EXPECT_GT(p, 0.0) << z;
    EXPECT_LT(p, 1.0) << z;
    const float pf = logistic(static_cast<float>(z));
    EXPECT_GT(pf, 0.0f) << z;
    EXPECT_LT(pf, 1.0f) << z;
  }
  EXPECT_DOUBLE_EQ(logistic(0.0), 0.5);
}

TEST(Sigmoid, Gradient) {
  Rng r(10);
  const auto z = random_tensor<double>({5, 1}, r, -4, 4);
  expect_gradient_ok([](const Var<double>& v) { return project(sigmoid(v)); }, z, "sigmoid");
}

TEST(Relu, SubgradientAtZeroIsZero) {
  Tape<double> tape;
  auto x = tape.parameter(Tensor<double>({3}, std::vector<double>{-1.0, 0.0, 2.0}));
  auto g = tape.backward(sum(relu(x)));
  EXPECT_EQ(g[x][0], 0.0);
  EXPECT_EQ(g[x][1], 0.0);
  EXPECT_EQ(g[x][2], 1.0);
}

TEST(Relu, Gradient) {
  Rng r(11);
  const auto x = random_away_from_zero<double>({2, 3, 3, 3}, r);
  expect_gradient_ok([](const Var<double>& v) { return project(relu(v)); }, x, "relu");
}

TEST(Elementwise, Gradients) {
  Rng r(12);
  const auto a = random_tensor<double>({2, 3}, r);
  const auto b = random_tensor<double>({2, 3}, r);
  expect_gradient_ok([&](const Var<double>& v) { return project(add(v, v.tape()->constant(b))); }, a, "add");
  expect_gradient_ok([&](const Var<double>& v) { return project(mul(v.tape()->constant(b), v)); }, a, "mul");
  expect_gradient_ok([&](const Var<double>& v) { return project(mul(v, v)); }, a, "mul self");
  expect_gradient_ok([&](const Var<double>& v) { return project(scale(v, -2.5)); }, a, "scale");
  expect_gradient_ok([&](const Var<double>& v) { return sum(v); }, a, "sum");
  expect_gradient_ok([&](const Var<double>& v) { return mean(mul(v, v)); }, a, "mean");
}

TEST(Elementwise, ShapeMismatchThrows) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({3, 2}));
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(mul(a, b), ShapeError);
}

TEST(ConcatChannels, ForwardAndGradient) {
  Rng r(13);
  const auto a = random_tensor<double>({2, 1, 3, 3}, r);
  const auto b = random_tensor<double>({2, 2, 3, 3}, r);
  Tape<double> tape;
  auto y = concat_channels<double>({tape.constant(a), tape.constant(b)});
  ASSERT_EQ(y.shape(), (Shape{2, 3, 3, 3}));
  EXPECT_EQ(y.value().at(1, 0, 2, 1), a.at(1, 0, 2, 1));
  EXPECT_EQ(y.value().at(1, 2, 0, 1), b.at(1, 1, 0, 1));
  expect_gradient_ok([&](const Var<double>& v) {
    return project(concat_channels<double>({v.tape()->constant(a), v, v}));
  }, b, "concat");
}

TEST(AvgPool2d, CountsPaddingAndGradient) {
  Tape<double> tape;
  auto y = avg_pool2d(tape.constant(Tensor<double>({1, 1, 2, 2}, 1.0)), 3, 1, 1);
  // corner windows cover 4 real pixels out of 9
  EXPECT_NEAR(y.value()[0], 4.0 / 9.0, 1e-15);
  Rng r(14);
  const auto x = random_tensor<double>({1, 2, 5, 5}, r);
  expect_gradient_ok([](const Var<double>& v) { return project(avg_pool2d(v, 2, 2, 0)); }, x, "avg_pool 2/2/0");
  expect_gradient_ok([](const Var<double>& v) { return project(avg_pool2d(v, 3, 1, 1)); }, x, "avg_pool 3/1/1");
}

TEST(MaxPool2d, ForwardAndGradient) {
  Tape<double> tape;
  Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, 5, 3, 2});
  auto y = max_pool2d(tape.constant(x), 2, 2, 0);
  EXPECT_EQ(y.value()[0], 5.0);
  EXPECT_THROW(max_pool2d(tape.constant(x), 2, 1, 2), ShapeError);
  // distinct values keep the argmax stable under the probe
  Rng r(15);
  std::vector<double> v(50);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i) * 0.01;
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[r.below(i)]);
  const Tensor<double> xs({1, 2, 5, 5}, v);
  expect_gradient_ok([](const Var<double>& u) { return project(max_pool2d(u, 3, 2, 1)); }, xs, "max_pool");
}

TEST(Average, ForwardAndGradient) {
  Rng r(16);
  const auto a = random_tensor<double>({4, 1}, r);
  const auto b = random_tensor<double>({4, 1}, r);
  Tape<double> tape;
  auto y = average<double>({tape.constant(a), tape.constant(b)});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.value()[i], (a[i] + b[i]) / 2, 1e-15);
  expect_gradient_ok([&](const Var<double>& v) {
    return project(average<double>({v, v.tape()->constant(b), v}));
  }, a, "average");
}

TEST(WeightedBce, ValueAndGradient) {
  const std::vector<double> y{1, 0, 1, 0};
  const std::vector<double> w{0.8, 1.3, 0.8, 1.3};
  const Tensor<double> p({4, 1}, std::vector<double>{0.9, 0.2, 0.4, 0.7});
  Tape<double> tape;
  auto loss = weighted_bce<double>(tape.constant(p), y, w);
  const double expected = (0.8 * -std::log(0.9) + 1.3 * -std::log(0.8) + 0.8 * -std::log(0.4) + 1.3 * -std::log(0.3)) / 4;
  EXPECT_NEAR(loss.value()[0], expected, 1e-14);
  expect_gradient_ok([&](const Var<double>& v) { return weighted_bce<double>(v, y, w); }, p, "bce");
}

TEST(WeightedBce, RejectsProbabilitiesOnTheBoundary) {
  const std::vector<double> y{1}, w{1};
  Tape<double> tape;
  EXPECT_THROW(weighted_bce<double>(tape.constant(Tensor<double>({1, 1}, 1.0)), y, w), NumericError);
  EXPECT_THROW(weighted_bce<double>(tape.constant(Tensor<double>({1, 1}, 0.0)), y, w), NumericError);
}

TEST(WeightedBce, SigmoidChainSurvivesSaturation) {
  const std::vector<double> y{1, 0}, w{1, 1};
  Tape<double> tape;
  auto z = tape.parameter(Tensor<double>({2, 1}, std::vector<double>{-800.0, 800.0}));
  auto loss = weighted_bce<double>(sigmoid(z), y, w);
  EXPECT_TRUE(std::isfinite(loss.value()[0]));
  auto g = tape.backward(loss);
  EXPECT_TRUE(g[z].all_finite());
}

TEST(GradCheck, RejectsEpsilonOutsideRange) {
  auto f = [](const Var<double>& v) { return sum(v); };
  const Tensor<double> x({2}, 1.0);
  EXPECT_THROW(finite_difference_check(f, x, 1e-9), InvalidArgument);
  EXPECT_THROW(finite_difference_check(f, x, 1e-2), InvalidArgument);
}

TEST(GradCheck, DetectsWrongGradient) {
  // A deliberately broken op: forward doubles, backward claims identity.
  auto broken = [](const Var<double>& v) {
    Tensor<double> out = v.value();
    for (auto& e : out.values()) e *= 2;
    auto y = v.tape()->record(out, {v}, [](const BackwardContext<double>& ctx) {
      for (std::size_t i = 0; i < ctx.grad_output.size(); ++i) (*ctx.grad_inputs[0])[i] += ctx.grad_output[i];
    });
    return sum(y);
  };
  const auto res = finite_difference_check(broken, Tensor<double>({3}, 1.0), 1e-5);
  EXPECT_GT(res.max_relative_error, 0.4);
}

TEST(ComposedModel, InputGradientOfMicroModelPasses) {
  const auto start = std::chrono::steady_clock::now();
  for (const auto arch : kArchitectures) {
    ArchConfig cfg;
    cfg.arch = std::string(arch);
    cfg.input_size = {1, 12, 12};
    cfg.stem_width = 4;
    cfg.growth_rate = 3;
    cfg.dense_layers = 2;
    cfg.mobile_stages = 2;
    cfg.cell_count = 2;
    cfg.seed = 21;
    const Model<double> model = build_model<double>(cfg);
    Rng r(22);
    const auto x = random_tensor<double>({2, 1, 12, 12}, r, 0.0, 1.0);
    const std::vector<double> y{1, 0}, w{0.7, 1.4};
    expect_gradient_ok([&](const Var<double>& v) {
      auto pass = forward(*v.tape(), model, v, false);
      return weighted_bce<double>(pass.output, y, w);
    }, x, cfg.arch.c_str());
  }
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 120.0);
}

TEST(ComposedModel, ParameterGradientsMatchFiniteDifferences) {
  ArchConfig cfg;
  cfg.arch = "micro_xception";
  cfg.input_size = {1, 10, 10};
  cfg.stem_width = 4;
  cfg.seed = 5;
  Model<double> model = build_model<double>(cfg);
  Rng r(23);
  const auto x = random_tensor<double>({2, 1, 10, 10}, r, 0.0, 1.0);
  const std::vector<double> y{1, 0}, w{1, 1};
  auto loss_of = [&](const Model<double>& m) {
    Tape<double> tape;
    auto pass = forward(tape, m, tape.constant(x), false);
    return weighted_bce<double>(pass.output, y, w).value()[0];
  };
  Tape<double> tape;
  auto pass = forward(tape, model, tape.constant(x), true);
  auto grads = tape.backward(weighted_bce<double>(pass.output, y, w));
  double worst = 0;
  for (std::size_t p = 0; p < model.params().size(); ++p) {
    const auto& g = grads[pass.params[p]];
    for (std::size_t i = 0; i < g.size(); i += 1 + g.size() / 6) {
      Model<double> up = model, down = model;
      up.params()[p][i] += kEps;
      down.params()[p][i] -= kEps;
      const double numeric = (loss_of(up) - loss_of(down)) / (2 * kEps);
      const double rel = std::abs(numeric - g[i]) / std::max({std::abs(numeric), std::abs(g[i]), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  EXPECT_LT(worst, kTol);
}

TEST(Precision, Float32TracksFloat64) {
  ArchConfig cfg;
  cfg.arch = "micro_mobile";
  cfg.input_size = {1, 16, 16};
  cfg.seed = 8;
  const auto m64 = build_model<double>(cfg);
  const auto m32 = m64.cast<float>();
  Rng r(24);
  const auto x = random_tensor<double>({3, 1, 16, 16}, r, 0.0, 1.0);
  const auto p64 = predict(m64, x);
  const auto p32 = predict(m32, x.cast<float>());
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p64[i], static_cast<double>(p32[i]), 1e-5);
}

TEST(Determinism, BackwardTwiceIsBitIdentical) {
  Rng r(25);
  const auto x = random_tensor<float>({1, 2, 6, 6}, r);
  const auto k = random_tensor<float>({3, 2, 3, 3}, r);
  Tape<float> tape;
  auto X = tape.parameter(x);
  auto loss = sum(relu(conv2d(X, tape.constant(k), tape.constant(Tensor<float>({3})), 1, 1)));
  auto g1 = tape.backward(loss);
  auto g2 = tape.backward(loss);
  EXPECT_EQ(g1[X], g2[X]);
}
