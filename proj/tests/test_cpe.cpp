#include <gtest/gtest.h>

#include <cmath>

#include "castformer/cpe.hpp"
#include "castformer/errors.hpp"

using namespace castformer;

namespace {

CpeConfig small_cfg(std::size_t heads = 2) {
  CpeConfig c;
  c.heads = heads;
  c.num_classes = 5;
  return c;
}

void fill(ParamStore& ps, const std::string& prefix, double v) {
  for (auto& [name, e] : ps.entries())
    if (name.rfind(prefix, 0) == 0)
      for (auto& x : e.value.mutable_data()) x = v;
}

// y = W x + b on plain vectors.
std::vector<double> affine(const Linear& l, const std::vector<double>& x) {
  const std::size_t o = l.out_features(), n = l.in_features();
  std::vector<double> y(o, 0.0);
  for (std::size_t i = 0; i < o; ++i) {
    for (std::size_t j = 0; j < n; ++j) y[i] += l.weight.data()[i * n + j] * x[j];
    if (l.bias.defined()) y[i] += l.bias.data()[i];
  }
  return y;
}

// Single-head attention of one query over a key list.
std::vector<double> attend(const MultiHeadAttention& a, const std::vector<double>& q,
                           const std::vector<std::vector<double>>& keys) {
  const auto qp = affine(a.wq(), q);
  const std::size_t D = q.size();
  std::vector<double> w;
  double mx = -1e300;
  for (const auto& k : keys) {
    const auto kp = affine(a.wk(), k);
    double s = 0;
    for (std::size_t d = 0; d < D; ++d) s += qp[d] * kp[d];
    w.push_back(s / std::sqrt(double(D)));
    mx = std::max(mx, w.back());
  }
  double z = 0;
  for (auto& x : w) z += (x = std::exp(x - mx));
  std::vector<double> ctx(D, 0.0);
  for (std::size_t j = 0; j < keys.size(); ++j) {
    const auto vp = affine(a.wv(), keys[j]);
    for (std::size_t d = 0; d < D; ++d) ctx[d] += w[j] / z * vp[d];
  }
  return affine(a.wo(), ctx);
}

std::vector<double> frame(const Tensor& x, std::size_t b, std::size_t t) {
  std::vector<double> v(x.dim(2));
  for (std::size_t d = 0; d < v.size(); ++d) v[d] = x.at({b, t, d});
  return v;
}

}  // namespace

TEST(Baseline, Examples) {
  auto x = Tensor::from({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto per = baseline_mean(x, BaselineScope::PerSampleTime);
  EXPECT_EQ(per.shape(), (Shape{2, 2}));
  EXPECT_EQ(per.to_vector(), (std::vector<double>{2, 3, 6, 7}));
  auto all = baseline_mean(x, BaselineScope::BatchAndTime);
  EXPECT_EQ(all.shape(), (Shape{2}));
  EXPECT_EQ(all.to_vector(), (std::vector<double>{4, 5}));
  EXPECT_THROW(baseline_mean(x, BaselineScope::Auto), ConfigError);
}

TEST(Baseline, AutoScopeFollowsMode) {
  auto c = small_cfg();
  EXPECT_EQ(c.resolve_scope(Mode::Train), BaselineScope::BatchAndTime);
  EXPECT_EQ(c.resolve_scope(Mode::Eval), BaselineScope::PerSampleTime);
}

TEST(CausalResidual, MatchesBruteForce) {
  const std::size_t T = 3, D = 2;
  ParamStore ps;
  Rng rng(31);
  CausalPatternExtraction cpe(ps, D, small_cfg(1), rng);
  for (auto& [name, e] : ps.entries())
    for (auto& v : e.value.mutable_data()) v += std::normal_distribution<double>(0, 0.3)(rng);
  auto xi = Tensor::normal({1, T, D}, 1.0, rng), xo = Tensor::normal({1, T, D}, 1.0, rng);
  auto out = cpe.forward(xi, xo, {});

  std::vector<double> base_out(D, 0.0), base_in(D, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t d = 0; d < D; ++d) {
      base_out[d] += xo.at({0, t, d}) / T;
      base_in[d] += xi.at({0, t, d}) / T;
    }
  auto obs = attend(cpe.attention_in(), frame(xi, 0, T - 1), {frame(xo, 0, 0), frame(xo, 0, 1)});
  auto cf = attend(cpe.attention_in(), frame(xi, 0, T - 1), {base_out});
  auto obs2 = attend(cpe.attention_out(), frame(xo, 0, T - 1), {frame(xi, 0, 0), frame(xi, 0, 1)});
  auto cf2 = attend(cpe.attention_out(), frame(xo, 0, T - 1), {base_in});
  for (std::size_t d = 0; d < D; ++d) {
    EXPECT_NEAR(out.delta_in_raw.at({0, d}), obs[d] - cf[d], 1e-12);
    EXPECT_NEAR(out.delta_out_raw.at({0, d}), obs2[d] - cf2[d], 1e-12);
  }
}

TEST(CausalResidual, ConstantCounterpartGivesNullEffect) {
  const std::size_t B = 2, T = 6, D = 8;
  ParamStore ps;
  Rng rng(32);
  CausalPatternExtraction cpe(ps, D, small_cfg(), rng);
  auto xi = Tensor::normal({B, T, D}, 1.0, rng);
  auto row = Tensor::normal({B, 1, D}, 1.0, rng);
  auto xo = broadcast_to(row, {B, T, D});
  auto out = cpe.forward(xi, xo, {});
  for (double v : out.delta_in_raw.data()) EXPECT_NEAR(v, 0.0, 1e-10);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t d = 0; d < D; ++d) EXPECT_NEAR(out.h_in.at({b, d}), xi.at({b, T - 1, d}), 1e-10);
}

TEST(CausalResidual, NeedsTwoFrames) {
  ParamStore ps;
  Rng rng(33);
  CausalPatternExtraction cpe(ps, 4, small_cfg(), rng);
  EXPECT_THROW(cpe.forward(Tensor::zeros({1, 1, 4}), Tensor::zeros({1, 1, 4}), {}), SequenceTooShortError);
  EXPECT_THROW(cpe.forward(Tensor::zeros({1, 3, 4}), Tensor::zeros({1, 2, 4}), {}), ShapeError);
}

TEST(CausalResidual, AllStepsEndsWithFinalStep) {
  ParamStore ps;
  Rng rng(34);
  CausalPatternExtraction cpe(ps, 8, small_cfg(), rng);
  auto xi = Tensor::normal({2, 5, 8}, 1.0, rng), xo = Tensor::normal({2, 5, 8}, 1.0, rng);
  auto last = cpe.forward(xi, xo, {}, false);
  auto all = cpe.forward(xi, xo, {}, true);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_NEAR(all.h_in.data()[i], last.h_in.data()[i], 1e-12);
    EXPECT_NEAR(all.h_out.data()[i], last.h_out.data()[i], 1e-12);
  }
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t d = 0; d < 8; ++d) {
      EXPECT_EQ(all.delta_in_steps.at({b, 0, d}), 0.0);
      EXPECT_EQ(all.seq_in.at({b, 0, d}), xi.at({b, 0, d}));
    }
}

TEST(Orthogonalize, Examples) {
  auto r = orthogonalize(Tensor::from({1, 2}, {1, 0}), Tensor::from({2}, {1, 1}), 0.0);
  EXPECT_NEAR(r.data()[0], 0.5, 1e-15);
  EXPECT_NEAR(r.data()[1], -0.5, 1e-15);
  auto par = orthogonalize(Tensor::from({1, 2}, {2, 2}), Tensor::from({2}, {1, 1}), 0.0);
  EXPECT_NEAR(par.data()[0], 0.0, 1e-15);
  EXPECT_NEAR(par.data()[1], 0.0, 1e-15);
  auto orth = orthogonalize(Tensor::from({1, 2}, {1, -1}), Tensor::from({2}, {1, 1}), 1e-6);
  EXPECT_EQ(orth.to_vector(), (std::vector<double>{1, -1}));
  auto zero_base = orthogonalize(Tensor::from({1, 2}, {3, 4}), Tensor::zeros({2}), 1e-6);
  EXPECT_EQ(zero_base.to_vector(), (std::vector<double>{3, 4}));
}

TEST(Orthogonalize, ResidualIsOrthogonalToBaseline) {
  ParamStore ps;
  Rng rng(35);
  CausalPatternExtraction cpe(ps, 8, small_cfg(), rng);
  for (int trial = 0; trial < 20; ++trial) {
    auto xi = Tensor::normal({3, 5, 8}, 1.0, rng), xo = Tensor::normal({3, 5, 8}, 1.0, rng);
    auto out = cpe.forward(xi, xo, {});
    for (std::size_t b = 0; b < 3; ++b) {
      double dot = 0, nd = 0, nb = 0;
      for (std::size_t d = 0; d < 8; ++d) {
        dot += out.delta_in.at({b, d}) * out.baseline_out.at({b, d});
        nd += std::pow(out.delta_in.at({b, d}), 2);
        nb += std::pow(out.baseline_out.at({b, d}), 2);
      }
      EXPECT_LE(std::abs(dot) / std::sqrt(nd * nb), 1e-5);
    }
  }
}

TEST(CausalGate, Examples) {
  ParamStore ps;
  Rng rng(36);
  auto gate = Linear::create(ps, "g", 2, 2, true, rng);
  fill(ps, "g.", 0.0);
  auto x = Tensor::from({1, 2}, {1, 2}), delta = Tensor::from({1, 2}, {4, -2});
  auto r = CausalPatternExtraction::causal_gate(x, delta, gate);
  EXPECT_EQ(r.gate.to_vector(), (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(r.h.to_vector(), (std::vector<double>{3, 1}));
  fill(ps, "g.bias", 30.0);
  auto s = CausalPatternExtraction::causal_gate(x, delta, gate);
  EXPECT_NEAR(s.h.data()[0], 5.0, 1e-12);
  EXPECT_NEAR(s.h.data()[1], 0.0, 1e-12);
}

TEST(IntentionHead, ZeroWeightsGiveUniform) {
  ParamStore ps;
  Rng rng(37);
  CausalPatternExtraction cpe(ps, 4, small_cfg(), rng);
  fill(ps, "cpe.intent", 0.0);
  auto r = cpe.intention_head(Tensor::normal({2, 4}, 1.0, rng));
  for (double v : r.xi.data()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(IntentionHead, SaturatedLogitSelectsProjectionColumn) {
  ParamStore ps;
  Rng rng(38);
  CausalPatternExtraction cpe(ps, 4, small_cfg(), rng);
  fill(ps, "cpe.intent", 0.0);
  // Class 3 reads channel 0 with a large weight.
  ps.entries().at("cpe.intent.weight").value.mutable_data()[3 * 4 + 0] = 100.0;
  auto r = cpe.intention_head(Tensor::from({1, 4}, {1, 0, 0, 0}));
  EXPECT_NEAR(r.xi.data()[3], 1.0, 1e-12);
  const auto& wp = cpe.projection().weight;  // (D, M)
  for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(r.z_intent.data()[d], wp.at({d, 3}), 1e-12);
}

TEST(CpeConfig, Validation) {
  EXPECT_THROW(small_cfg(3).validate(8), ConfigError);
  auto c = small_cfg();
  c.num_classes = 1;
  EXPECT_THROW(c.validate(8), ConfigError);
  EXPECT_THROW(parse_baseline_scope("weekly"), ConfigError);
  EXPECT_EQ(parse_gate_mode("scalar"), CausalGateMode::Scalar);
}
