#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "lada/doinn.hpp"
#include "lada/gradcheck.hpp"
#include "lada/litho.hpp"
#include "lada/metrics.hpp"
#include "lada/patterns.hpp"

using namespace lada;
using namespace lada::doinn;

namespace {

Architecture tiny_arch() {
  Architecture a;
  a.canvas = 16;
  a.modes = 4;
  a.gp_channels = 4;
  a.lp1 = 4;
  a.lp2 = 6;
  a.fuse = 8;
  a.ir1 = 6;
  a.ir2 = 4;
  a.lpm_hidden = 5;
  return a;
}

struct Labeled {
  std::vector<MaskImage> masks;
  std::vector<ResistImage> resists;
  std::vector<Sample> samples;
};

Labeled make_data(int n, std::uint64_t seed, const patterns::DesignRules& rules = {}) {
  static const auto ks = litho::build_kernels({});
  Labeled d;
  for (int i = 0; i < n; ++i) {
    auto m = patterns::generate_pattern(rules, derive_seed(seed, "pattern", static_cast<std::uint64_t>(i)));
    auto r = litho::simulate(m, ks);
    d.samples.push_back(make_sample(m, r));
    d.masks.push_back(std::move(m));
    d.resists.push_back(std::move(r));
  }
  return d;
}

// Runs grad_check on a network scalar, resampling the input while any ReLU
// pre-activation sits within 10·eps of its kink.
template <class Head>
GradCheckReport network_grad_check(const Model& m, Head head, std::uint64_t seed, double eps = 1e-4) {
  const auto p64 = cast_params<double>(m.params);
  auto f = [&](auto& tape, auto x) {
    using U = typename std::remove_reference_t<decltype(x.value())>::value_type;
    if constexpr (std::is_same_v<U, double>) {
      Bound<double> p(tape, p64, false);
      return head(p, x);
    } else {
      Bound<float> p(tape, m.params, false);
      return head(p, x);
    }
  };
  Rng rng(seed);
  GradCheckReport rep;
  for (int attempt = 0; attempt < 50; ++attempt) {
    const Tensor x = rng.uniform_tensor<float>({1, m.arch.canvas, m.arch.canvas}, -1.0, 1.0);
    rep = grad_check_report(f, x, eps);
    if (rep.kink_margin >= 10 * eps) break;
  }
  return rep;
}

}  // namespace

TEST(Doinn, ShapeContract) {
  const auto m = init_model({}, 1);
  check_params(m.arch, m.params);
  Tape<float> tape;
  Bound<float> p(tape, m.params, false);
  auto out = forward(p, m.arch, tape.constant(Tensor(Dims{1, 64, 64})));
  EXPECT_EQ(out.logits.dims(), (Dims{2, 64, 64}));
  EXPECT_EQ(out.taps[0].dims(), (Dims{32, 16, 16}));
  EXPECT_EQ(out.taps[1].dims(), (Dims{16, 16, 16}));
  EXPECT_EQ(out.taps[2].dims(), (Dims{64, 16, 16}));
  EXPECT_EQ(lpm_predict(p, out.taps).dims(), (Dims{1}));
  EXPECT_THROW(forward(p, m.arch, tape.constant(Tensor(Dims{1, 32, 32}))), ValidationError);
  EXPECT_THROW(forward(p, m.arch, tape.constant(Tensor(Dims{2, 64, 64}))), ValidationError);
}

TEST(Doinn, CheckParamsRejectsMismatch) {
  auto m = init_model({}, 1);
  m.params.at("fuse.weight") = Tensor(Dims{64, 47, 3, 3});
  EXPECT_THROW(check_params(m.arch, m.params), ValidationError);
  m.params.erase("fuse.weight");
  EXPECT_THROW(check_params(m.arch, m.params), ValidationError);
}

TEST(Doinn, ZeroHeadGivesUniformLogits) {
  const auto m = init_model({}, 3, {.zero_output_head = true, .zero_lpm_head = true});
  Tape<float> tape;
  Bound<float> p(tape, m.params, false);
  const Tensor background(Dims{1, 64, 64}, -1.0f);
  auto out = forward(p, m.arch, tape.constant(background));
  for (float v : out.logits.value().values()) ASSERT_EQ(v, 0.0f);
  EXPECT_NEAR(seg_loss(out.logits, Tensor(Dims{64, 64})).value().item(), std::numbers::ln2, 1e-6);
  EXPECT_EQ(lpm_predict(p, out.taps).value().item(), 0.0f);
}

TEST(Doinn, ZeroLpmHeadPredictsZeroForAnyInput) {
  const auto m = init_model({}, 4, {.zero_lpm_head = true});
  Rng rng(4);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(infer(m, rng.uniform_tensor<float>({1, 64, 64}, -1, 1)).lpm, 0.0);
}

TEST(Doinn, ForwardIsBitIdentical) {
  const auto m = init_model({}, 5);
  Rng rng(5);
  const Tensor x = rng.uniform_tensor<float>({1, 64, 64}, -1, 1);
  const auto a = infer(m, x), b = infer(m, x);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(a.lpm, b.lpm);
  EXPECT_EQ(init_model({}, 5).params, m.params);
}

TEST(Doinn, LpmIsPerSample) {
  const auto m = init_model({}, 6);
  Rng rng(6);
  std::vector<Tensor> xs;
  for (int i = 0; i < 4; ++i) xs.push_back(rng.uniform_tensor<float>({1, 64, 64}, -1, 1));
  std::vector<double> forward_order, reverse_order;
  for (int i = 0; i < 4; ++i) forward_order.push_back(infer(m, xs[i]).lpm);
  for (int i = 3; i >= 0; --i) reverse_order.push_back(infer(m, xs[i]).lpm);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(forward_order[i], reverse_order[3 - i]);
}

TEST(Doinn, MeanLogitGradientMatchesFiniteDifferences) {
  const auto m = init_model(tiny_arch(), 7);
  const auto rep = network_grad_check(
      m, [&](auto& p, auto x) { return ops::mean(forward(p, m.arch, x).logits); }, 7);
  EXPECT_LT(rep.max_rel_error, 5e-3);
}

TEST(Doinn, LpmGradientMatchesFiniteDifferences) {
  const auto m = init_model(tiny_arch(), 8);
  const auto rep = network_grad_check(
      m, [&](auto& p, auto x) { return lpm_predict(p, forward(p, m.arch, x).taps); }, 8);
  EXPECT_LT(rep.max_rel_error, 5e-3);
}

TEST(Doinn, FullSizeDirectionalDerivative) {
  const auto m = init_model({}, 9);
  const auto p64 = cast_params<double>(m.params);
  Rng rng(9);
  const Tensor x = rng.uniform_tensor<float>({1, 64, 64}, -1, 1);
  const Tensor v = rng.normal_tensor<float>({1, 64, 64});
  Tape<float> tape;
  Bound<float> p(tape, m.params, false);
  auto xv = tape.leaf(x);
  tape.backward(ops::mean(forward(p, m.arch, xv).logits));
  const Tensor g = tape.grad(xv);
  double analytic = 0;
  for (std::size_t i = 0; i < g.size(); ++i) analytic += static_cast<double>(g[i]) * v[i];
  auto eval = [&](double h) {
    Tape<double> t;
    Bound<double> q(t, p64, false);
    BasicTensor<double> at = x.cast<double>();
    for (std::size_t i = 0; i < at.size(); ++i) at[i] += h * v[i];
    return ops::mean(forward(q, m.arch, t.constant(at)).logits).value().item();
  };
  const double eps = 1e-5;
  const double numeric = (eval(eps) - eval(-eps)) / (2 * eps);
  EXPECT_LT(std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)}), 5e-3);
}

TEST(PredictResist, ArgmaxWithBackgroundTies) {
  Tensor fg(Dims{2, 8, 8});
  for (int i = 0; i < 64; ++i) fg[64 + i] = 1.0f;
  EXPECT_EQ(predict_resist(fg).count(), 64u);
  EXPECT_EQ(predict_resist(Tensor(Dims{2, 8, 8}, 0.3f)).count(), 0u);

  Rng rng(10);
  const Tensor logits = rng.normal_tensor<float>({2, 16, 16});
  const auto r = predict_resist(logits);
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) ASSERT_EQ(r(y, x), logits[256 + y * 16 + x] > logits[y * 16 + x] ? 1 : 0);
  }
  EXPECT_THROW(predict_resist(Tensor(Dims{3, 4, 4})), ValidationError);
}

TEST(RankLoss, OrderedWithMarginIsZero) {
  const auto r = lpm_train_loss({0.9, 0.1, 0.0, 0.5}, {3.0, 1.0, 0.2, 0.4});
  EXPECT_EQ(r.value, 0.0);
  EXPECT_FALSE(r.dropped_last);
}

TEST(RankLoss, ConstantPredictionCostsMargin) {
  EXPECT_DOUBLE_EQ(lpm_train_loss({0.3, 0.3, 0.3, 0.3}, {1.0, 2.0, 5.0, 4.0}).value, kRankMargin);
}

TEST(RankLoss, FourElementHandCase) {
  // Pair (0,1): l0 > l1, l̂0 − l̂1 = 0.05 → 0.1 − 0.05 = 0.05.
  // Pair (2,3): l2 < l3, l̂2 − l̂3 = 0.3 → 0.3 + 0.1 = 0.4. Mean 0.225.
  const auto r = lpm_train_loss({0.25, 0.2, 0.7, 0.4}, {2.0, 1.0, 0.5, 0.9});
  EXPECT_NEAR(r.value, 0.225, 1e-12);
  EXPECT_DOUBLE_EQ(r.grad[0], -0.5);
  EXPECT_DOUBLE_EQ(r.grad[1], 0.5);
  EXPECT_DOUBLE_EQ(r.grad[2], 0.5);
  EXPECT_DOUBLE_EQ(r.grad[3], -0.5);
}

TEST(RankLoss, EqualTruthAndOddBatch) {
  EXPECT_DOUBLE_EQ(lpm_train_loss({0.0, 5.0}, {1.0, 1.0}).value, kRankMargin);
  const auto odd = lpm_train_loss({0.0, 1.0, 9.0}, {0.0, 1.0, 2.0});
  EXPECT_TRUE(odd.dropped_last);
  EXPECT_EQ(odd.value, 0.0);
  EXPECT_EQ(odd.grad[2], 0.0);
  EXPECT_THROW(lpm_train_loss({1.0}, {1.0, 2.0}), ValidationError);
}

TEST(Finetune, ZeroEpochsLeavesParametersUntouched) {
  const auto m = init_model({}, 11);
  const auto d = make_data(4, 11);
  const auto r = finetune(m, d.samples, {.epochs = 0}, 11);
  EXPECT_EQ(r.model.params, m.params);
  EXPECT_TRUE(r.epoch_loss.empty());
  EXPECT_THROW(finetune(m, {}, {}, 11), ValidationError);
}

TEST(Finetune, HistoryLengthAndOddBatchWarning) {
  const auto m = init_model({}, 12);
  const auto d = make_data(5, 12);
  const auto r = finetune(m, d.samples, {.epochs = 2, .batch = 4}, 12);
  EXPECT_EQ(r.epoch_loss.size(), 2u);
  EXPECT_EQ(r.epoch_lpm_loss.size(), 2u);
  EXPECT_EQ(r.warnings.size(), 2u);  // trailing batch of one each epoch
}

TEST(Finetune, IsDeterministic) {
  const auto m = init_model({}, 13);
  const auto d = make_data(6, 13);
  const auto a = finetune(m, d.samples, {.epochs = 1, .batch = 3}, 99);
  const auto b = finetune(m, d.samples, {.epochs = 1, .batch = 3}, 99);
  EXPECT_EQ(a.model.params, b.model.params);
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
}

TEST(Finetune, OneEpochOnOneSampleDecreasesItsLoss) {
  int decreased = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto m = init_model({}, seed);
    const auto d = make_data(1, 1000 + seed);
    auto loss = [&](const Model& mm) {
      Tape<float> t;
      Bound<float> p(t, mm.params, false);
      return seg_loss(forward(p, mm.arch, t.constant(d.samples[0].input)).logits, d.samples[0].target).value().item();
    };
    const auto r = finetune(m, d.samples, {.epochs = 1, .lr = 1e-3}, seed);
    decreased += loss(r.model) < loss(m);
  }
  EXPECT_GE(decreased, 95);
}

TEST(Finetune, OverfitsEightSamples) {
  const auto d = make_data(8, 14);
  const auto r = finetune(init_model({}, 14), d.samples, {.epochs = 200, .lr = 2e-3, .batch = 2}, 14);
  const auto ev = metrics::evaluate(r.model, d.masks, d.resists);
  EXPECT_GE(ev.fiou_pct, 99.0);
}

TEST(Lpm, RankCorrelatesWithTrueLossAfterPretraining) {
  int positive = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto train = make_data(160, derive_seed(seed, "train"));
    const auto held = make_data(64, derive_seed(seed, "held"), patterns::shifted_test_rules());
    const auto r = finetune(init_model({}, seed), train.samples, {.epochs = 5, .lr = 2e-3}, seed);
    std::vector<double> predicted, truth;
    for (const auto& s : held.samples) {
      Tape<float> t;
      Bound<float> p(t, r.model.params, false);
      auto out = forward(p, r.model.arch, t.constant(s.input));
      predicted.push_back(lpm_predict(p, out.taps).value().item());
      truth.push_back(seg_loss(out.logits, s.target).value().item());
    }
    const double tau = metrics::kendall_tau(predicted, truth);
    std::printf("seed %llu: kendall tau %.3f\n", static_cast<unsigned long long>(seed), tau);
    positive += tau > 0;
  }
  EXPECT_GE(positive, 4);
}

TEST(Checkpoint, ByteExactRoundTrip) {
  const auto m = init_model({}, 15);
  const std::string bytes = checkpoint_bytes(m.params);
  std::istringstream is(bytes);
  const auto loaded = read_checkpoint(is);
  EXPECT_EQ(loaded, m.params);
  EXPECT_EQ(checkpoint_bytes(loaded), bytes);
  check_params(m.arch, loaded);
}
