#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <vector>

#include "qid/numerics/adamw.hpp"
#include "qid/numerics/checkpoint.hpp"
#include "qid/numerics/grad_check.hpp"
#include "qid/numerics/ops.hpp"
#include "qid/numerics/rng.hpp"

using namespace qid;
using T = Tensor<double>;

namespace {

T random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = rng.normal() * scale;
  return T(Shape{r, c}, std::move(v));
}

T param(T t) {
  t.set_requires_grad(true);
  return t;
}

}  // namespace

TEST(Matmul, IdentityAndProjector) {
  T eye = T::matrix(2, 2, {1, 0, 0, 1});
  T m = T::matrix(2, 2, {1, 2, 3, 4});
  auto r = matmul(eye, m);
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{1, 2, 3, 4}));

  T proj = T::matrix(2, 2, {1, 0, 0, 0});
  auto p = matmul(proj, T::matrix(2, 2, {5, 6, 7, 8}));
  EXPECT_EQ(std::vector<double>(p.data().begin(), p.data().end()), (std::vector<double>{5, 6, 0, 0}));
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(11);
  T a = random_matrix(rng, 3, 4), b = random_matrix(rng, 4, 2);
  auto c = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 4; ++k) acc += a(i, k) * b(k, j);
      EXPECT_LT(std::abs(c(i, j) - acc), 1e-12);
    }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(T(Shape{2, 3}), T(Shape{2, 3}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] x [2x3]"), std::string::npos);
  }
}

TEST(Softmax, ClosedFormCases) {
  auto s = softmax_rows(T::matrix(1, 2, {0, 0}));
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);

  auto big = softmax_rows(T::matrix(1, 2, {1000, 0}));
  EXPECT_NEAR(big[0], 1.0, 1e-12);
  EXPECT_NEAR(big[1], 0.0, 1e-12);

  auto three = softmax_rows(T::matrix(1, 3, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int j = 0; j < 3; ++j) EXPECT_LT(std::abs(three[j] - std::exp(j + 1.0) / z), 1e-12);
}

TEST(Softmax, RowsAreDistributionsForExtremeInputs) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t c = 1 + rng.below(12);
    std::vector<double> v(3 * c);
    for (auto& x : v) x = rng.uniform(-1e3, 1e3);
    auto s = softmax_rows(T(Shape{3, c}, v));
    for (std::size_t i = 0; i < 3; ++i) {
      double total = 0;
      for (std::size_t j = 0; j < c; ++j) {
        EXPECT_GE(s(i, j), 0.0);
        total += s(i, j);
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, RejectsNonFinite) {
  EXPECT_THROW(softmax_rows(T::matrix(1, 2, {NAN, 0})), NumericalError);
}

TEST(LayerNorm, ClosedFormCases) {
  T ones(Shape{3}, 1.0), zeros(Shape{3}, 0.0);
  auto c = layernorm(T::matrix(1, 3, {4, 4, 4}), ones, zeros);
  for (double v : c.data()) EXPECT_EQ(v, 0.0);

  T g2(Shape{2}, 1.0), b2(Shape{2}, 0.0);
  auto n = layernorm(T::matrix(1, 2, {1, -1}), g2, b2);
  EXPECT_NEAR(n[0], 1.0, 1e-5);
  EXPECT_NEAR(n[1], -1.0, 1e-5);
}

TEST(LayerNorm, MatchesDirectFormula) {
  Rng rng(5);
  T x = random_matrix(rng, 1, 7, 3.0), g = random_matrix(rng, 1, 7), b = random_matrix(rng, 1, 7);
  auto y = layernorm(x, reshape(g, {7}), reshape(b, {7}));
  double mean = 0, var = 0;
  for (int j = 0; j < 7; ++j) mean += x[j] / 7;
  for (int j = 0; j < 7; ++j) var += (x[j] - mean) * (x[j] - mean) / 7;
  for (int j = 0; j < 7; ++j) {
    const double expected = g[j] * (x[j] - mean) / std::sqrt(var + 1e-5) + b[j];
    EXPECT_LT(std::abs(y[j] - expected), 1e-10);
  }
}

TEST(Gelu, Values) {
  auto y = gelu(T::matrix(1, 3, {0.0, 30.0, 1.0}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 30.0, 1e-9);
  const double c = std::sqrt(2.0 / M_PI);
  const double expected = 0.5 * (1 + std::tanh(c * (1 + 0.044715)));
  EXPECT_LT(std::abs(y[2] - expected), 1e-10);
}

TEST(Backward, SumGivesOnes) {
  T w = param(T(Shape{2, 3}, 0.7));
  Tape<double> tape;
  {
    auto scope = tape.record();
    backward(sum(w), tape);
  }
  for (double g : w.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwoW) {
  Rng rng(1);
  T w = param(random_matrix(rng, 3, 2));
  Tape<double> tape;
  {
    auto scope = tape.record();
    backward(sum(mul(w, w)), tape);
  }
  for (std::size_t i = 0; i < w.numel(); ++i) EXPECT_DOUBLE_EQ(w.grad()[i], 2 * w[i]);
}

TEST(Backward, FanOutAccumulates) {
  T w = param(T::matrix(1, 2, {1.5, -2.0}));
  Tape<double> tape;
  {
    auto scope = tape.record();
    auto y = add(w, add(w, w));
    backward(sum(y), tape);
  }
  EXPECT_EQ(w.grad()[0], 3.0);
  EXPECT_EQ(w.grad()[1], 3.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  T w = param(T(Shape{2, 2}, 1.0));
  Tape<double> tape;
  auto scope = tape.record();
  auto y = add(w, w);
  EXPECT_THROW(backward(y, tape), ContractError);
}

TEST(Backward, CompositeSoftmaxMatmulMatchesCentralDifferences) {
  Rng rng(8);
  T a = param(random_matrix(rng, 3, 4)), b = param(random_matrix(rng, 4, 5)), c = param(random_matrix(rng, 5, 2));
  auto loss = [&] {
    auto s = softmax_rows(matmul(a, b));
    auto y = matmul(s, c);
    return sum(mul(y, y));
  };
  EXPECT_LT(grad_check(loss, {a, b, c}), 1e-6);
}

TEST(GradCheck, SumOfSquaresIsExact) {
  Rng rng(2);
  std::vector<double> v(16);
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.5, 1.5);
  T w = param(T(Shape{4, 4}, v));
  EXPECT_LT(grad_check([&] { return sum(mul(w, w)); }, {w}), 1e-9);
}

TEST(GradCheck, FrozenParameterIsSkipped) {
  Rng rng(2);
  T w = param(random_matrix(rng, 2, 2));
  T frozen = random_matrix(rng, 2, 2);
  auto report = grad_check_report([&] { return sum(mul(matmul(w, frozen), w)); }, {w, frozen});
  EXPECT_EQ(report.checked, 4u);
  EXPECT_EQ(report.skipped, 4u);
  EXPECT_LT(report.max_relative_error, 1e-8);
}

TEST(GradCheck, NonDeterministicFunctionIsRejected) {
  T w = param(T(Shape{1, 1}, 1.0));
  double drift = 0.0;
  auto loss = [&] {
    drift += 1.0;
    return sum(add(w, T(Shape{1, 1}, drift)));
  };
  EXPECT_THROW(grad_check(loss, {w}), ContractError);
}

// Property: random compositions of the differentiable ops agree with central
// differences. The readout is a fixed random weighting so that no op's
// invariance (softmax rows summing to one, layernorm rows centring) makes the
// loss locally constant.
TEST(Backward, RandomGraphsMatchCentralDifferences) {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    Rng rng(100 + seed);
    const std::size_t r = 2 + rng.below(3), c = 3 + rng.below(3);
    T x = param(random_matrix(rng, r, c));
    T w = param(random_matrix(rng, c, c, 1.0 / std::sqrt(static_cast<double>(c))));
    T g = param(random_matrix(rng, 1, c));
    T bias = param(random_matrix(rng, 1, c));
    std::vector<int> plan;
    const T readout = random_matrix(rng, r, c);
    for (int k = 0; k < 6; ++k) plan.push_back(static_cast<int>(rng.below(7)));
    auto loss = [&] {
      T h = x;
      for (int op : plan) {
        switch (op) {
          case 0: h = matmul(h, w); break;
          case 1: h = softmax_rows(h); break;
          case 2: h = layernorm(h, reshape(g, {c}), reshape(bias, {c})); break;
          case 3: h = gelu(h); break;
          case 4: h = add_rowwise(h, bias); break;
          case 5: h = concat_rows(slice_rows(h, 0, 1), slice_rows(h, 1, r - 1)); break;
          default: h = add(h, scale(mul(h, h), 0.1)); break;
        }
      }
      return sum(mul(h, readout));
    };
    // five-point stencil: plain central differences hit their roundoff floor
    // on the smaller entries of deeper graphs
    std::vector<T> params{x, w, g, bias};
    {
      Tape<double> tape;
      auto scope = tape.record();
      backward(loss(), tape);
    }
    const double h = 1e-3;
    for (auto& p : params) {
      auto v = p.mutable_data();
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double s0 = v[i];
        auto at = [&](double d) {
          v[i] = s0 + d;
          double f = loss().item();
          v[i] = s0;
          return f;
        };
        const double numeric = (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h);
        if (!p.has_grad()) {  // not reached by this plan
          EXPECT_LT(std::abs(numeric), 1e-10) << "seed " << seed;
          continue;
        }
        const double a = p.grad()[i];
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
        EXPECT_LT(rel, 1e-6) << "seed " << seed << " a=" << a << " n=" << numeric;
      }
      p.zero_grad();
    }
  }
}

TEST(Backward, ReplayIsBitIdentical) {
  Rng rng(4);
  T a = param(random_matrix(rng, 4, 4)), b = param(random_matrix(rng, 4, 4));
  auto run = [&] {
    a.zero_grad();
    b.zero_grad();
    Tape<double> tape;
    auto scope = tape.record();
    backward(sum(gelu(matmul(softmax_rows(matmul(a, b)), b))), tape);
    std::vector<double> out(a.grad().begin(), a.grad().end());
    out.insert(out.end(), b.grad().begin(), b.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Tensor, ShapeInvariants) {
  EXPECT_THROW(T(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(T(Shape{0, 2}), DimensionError);
  EXPECT_THROW(add(T(Shape{1}, 1e308), T(Shape{1}, 1e308)), NumericalError);
}

TEST(AdamW, WarmupSchedule) {
  AdamWConfig cfg;
  cfg.base_lr = 2e-5;
  cfg.warmup_steps = 100;
  EXPECT_DOUBLE_EQ(warmup_lr(cfg, 50), 1e-5);
  double prev = 0;
  for (std::uint64_t t = 0; t <= 100; ++t) {
    EXPECT_GE(warmup_lr(cfg, t), prev);
    EXPECT_LE(warmup_lr(cfg, t), cfg.base_lr);
    prev = warmup_lr(cfg, t);
  }
  for (std::uint64_t t = 100; t < 300; ++t) EXPECT_EQ(warmup_lr(cfg, t), cfg.base_lr);
}

TEST(AdamW, SingleStepMatchesHandComputation) {
  AdamWConfig cfg;
  cfg.base_lr = 0.1;
  cfg.warmup_steps = 1;
  OptimizerState<double> state(cfg);
  T w = param(T(Shape{1}, 1.0));
  Tape<double> tape;
  {
    auto scope = tape.record();
    backward(sum(w), tape);  // grad = 1
  }
  std::vector<T> params{w};
  adamw_step(state, params);
  // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1 -> w = 1 - 0.1 * 1 / (1 + 1e-8)
  EXPECT_DOUBLE_EQ(w[0], 1.0 - 0.1 / (1.0 + 1e-8));
  EXPECT_EQ(state.step, 1u);
}

TEST(AdamW, ZeroGradientWithoutDecayLeavesParameter) {
  OptimizerState<double> state(AdamWConfig{});
  T w = param(T::matrix(1, 3, {0.3, -0.2, 5.0}));
  std::vector<T> params{w};
  for (int i = 0; i < 5; ++i) adamw_step(state, params);
  EXPECT_EQ(std::vector<double>(w.data().begin(), w.data().end()), (std::vector<double>{0.3, -0.2, 5.0}));
}

TEST(AdamW, ShapeMismatchIsContractError) {
  OptimizerState<double> state(AdamWConfig{});
  std::vector<T> params{param(T(Shape{2}, 1.0))};
  adamw_step(state, params);
  std::vector<T> other{param(T(Shape{3}, 1.0))};
  EXPECT_THROW(adamw_step(state, other), ContractError);
}

TEST(Rng, DeterministicAndRoughlyGaussian) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng g(7);
  double mean = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = g.normal();
    mean += z / n;
    sq += z * z / n;
  }
  EXPECT_NEAR(mean, 0.0, 0.01);
  EXPECT_NEAR(sq, 1.0, 0.02);
  auto d1 = Rng::derive(1, "fuse", 3), d2 = Rng::derive(1, "fuse", 3), d3 = Rng::derive(1, "fuse", 4);
  const auto x1 = d1.next_u64();
  EXPECT_EQ(x1, d2.next_u64());
  EXPECT_NE(x1, d3.next_u64());
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Checkpoint ckpt;
  ckpt.put("w", Tensor<float>(Shape{2, 3}, std::vector<float>{1.5f, -2.f, 3.25f, 1e-30f, 0.f, 7.f}));
  ckpt.put_scalar("step", 12);
  auto path = std::filesystem::temp_directory_path() / "qid_numerics_ckpt.qidw";
  ckpt.save(path);
  auto back = Checkpoint::load(path);
  ASSERT_EQ(back.entries().size(), 2u);
  EXPECT_EQ(back.at("w").dims, (std::vector<std::uint32_t>{2, 3}));
  EXPECT_EQ(back.at("w").values, ckpt.at("w").values);
  EXPECT_EQ(back.encode(), ckpt.encode());
  std::filesystem::remove(path);
}

TEST(Checkpoint, HeaderLayout) {
  Checkpoint ckpt;
  ckpt.put("ab", Tensor<float>(Shape{3}, 1.0f));
  auto bytes = ckpt.encode();
  ASSERT_EQ(bytes.size(), 12u + 2 + 2 + 1 + 4 + 12);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "QIDW");
  EXPECT_EQ(bytes[4], 1);   // version, little-endian
  EXPECT_EQ(bytes[8], 1);   // entry count
  EXPECT_EQ(bytes[12], 2);  // name length
  EXPECT_EQ(bytes[16], 1);  // rank
  EXPECT_EQ(bytes[17], 3);  // dim
  EXPECT_EQ(ckpt.at("ab").encoded_size(), bytes.size() - 12);
}

TEST(Checkpoint, CorruptInputsAreFormatErrors) {
  Checkpoint ckpt;
  ckpt.put("w", Tensor<float>(Shape{4}, 2.0f));
  auto bytes = ckpt.encode();
  auto truncated = std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 3);
  EXPECT_THROW(Checkpoint::decode(truncated), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(Checkpoint::decode(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(Checkpoint::decode(bad_version), FormatError);
  EXPECT_THROW(Checkpoint::load("/nonexistent/qid.qidw"), IoError);
}
