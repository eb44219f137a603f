#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "trtsmc/em_loop.hpp"
#include "trtsmc/io.hpp"
#include "trtsmc/soft_oracle.hpp"

using namespace trtsmc;

namespace {

TransitionRecord record(StateId s, ActionId a, double r, std::vector<double> q, double v = 0.0, bool terminal = false) {
  return {s, a, r, std::move(q), v, terminal};
}

TrainConfig small_config() {
  TrainConfig c;
  c.planner.k = 4;
  c.planner.depth = 4;
  c.planner.resample_period = 3;
  c.planner.alpha = 0.1;
  c.planner.sigma = 0.5;
  c.planner.proposal_mode = ProposalMode::trust_region;
  c.planner.inference_mode = InferenceMode::message_passing;
  c.planner.resample_mode = ResampleMode::revived;
  return c;
}

Model random_model(std::size_t ns, std::size_t na, std::uint64_t seed) {
  Model m(ns, na);
  RandomStream rng(seed, 0);
  for (double& x : m.policy_logits.values()) x = 2.0 * rng.uniform() - 1.0;
  for (double& x : m.v_table) x = rng.uniform();
  for (double& x : m.q_table.values()) x = rng.uniform();
  return m;
}

std::vector<TrainingSample> random_batch(std::size_t ns, std::size_t na, std::size_t n, std::uint64_t seed) {
  RandomStream rng(seed, 1);
  std::vector<TrainingSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> q(na);
    for (double& x : q) x = rng.uniform() + 0.05;
    const double z = std::accumulate(q.begin(), q.end(), 0.0);
    for (double& x : q) x /= z;
    const auto s = static_cast<StateId>(rng.uniform() * ns);
    const auto a = static_cast<ActionId>(rng.uniform() * na);
    out.push_back({record(s, a, 0.0, q), 2.0 * rng.uniform()});
  }
  return out;
}

}  // namespace

TEST(CollectSegment, TwoArmEndsAfterOneStep) {
  const auto mdp = make_two_arm();
  const auto seg = collect_segment(mdp, Model(2, 2), small_config().planner, 10, 3);
  ASSERT_EQ(seg.records.size(), 1u);
  EXPECT_TRUE(seg.records[0].terminal);
  EXPECT_EQ(seg.final_state, 1u);
  EXPECT_EQ(seg.bootstrap_value, 0.0);
  EXPECT_EQ(seg.records[0].reward, seg.records[0].action == 1 ? 1.0 : 0.0);
}

TEST(CollectSegment, Validation) {
  EXPECT_THROW(collect_segment(make_two_arm(), Model(2, 2), PlannerConfig{}, 0, 0), ContractViolation);
}

TEST(CollectSegment, Deterministic) {
  const auto mdp = make_random_mdp(4, 3, 1);
  const auto model = random_model(4, 3, 2);
  const auto cfg = small_config().planner;
  const auto a = collect_segment(mdp, model, cfg, 12, 5);
  const auto b = collect_segment(mdp, model, cfg, 12, 5);
  EXPECT_EQ(a.records, b.records);
  EXPECT_EQ(a.bootstrap_value, b.bootstrap_value);
  EXPECT_EQ(a.records.size(), 12u);
}

TEST(OuterTargets, Examples) {
  const std::vector<TransitionRecord> one{record(0, 0, 2.5, {1.0}, 9.0, true)};
  EXPECT_EQ(outer_targets(one, 0.9, 0.5, 7.0), (std::vector<double>{2.5}));

  const std::vector<TransitionRecord> three{record(0, 0, 1.0, {1.0}, 0.0), record(1, 0, 2.0, {1.0}, 0.0),
                                            record(2, 0, 3.0, {1.0}, 0.0, true)};
  EXPECT_EQ(outer_targets(three, 1.0, 1.0), (std::vector<double>{6.0, 5.0, 3.0}));

  // lambda = 0: one-step targets from the next planner value.
  const std::vector<TransitionRecord> td0{record(0, 0, 1.0, {1.0}, 10.0), record(1, 0, 2.0, {1.0}, 20.0)};
  const auto g = outer_targets(td0, 0.5, 0.0, 4.0);
  EXPECT_DOUBLE_EQ(g[0], 1.0 + 0.5 * 20.0);
  EXPECT_DOUBLE_EQ(g[1], 2.0 + 0.5 * 4.0);

  EXPECT_THROW(outer_targets({}, 0.9, 0.9), ContractViolation);
}

TEST(OuterTargets, MatchesForwardView) {
  RandomStream rng(8, 0);
  std::vector<TransitionRecord> recs;
  for (int t = 0; t < 6; ++t) recs.push_back(record(0, 0, rng.uniform(), {1.0}, rng.uniform()));
  const double gamma = 0.8, lambda = 0.6, boot = 0.7;
  const auto g = outer_targets(recs, gamma, lambda, boot);
  // Weighted sum of n-step returns; the tail weight sits on the full return.
  const std::size_t n = recs.size();
  std::vector<double> values(n + 1);
  for (std::size_t t = 0; t < n; ++t) values[t] = recs[t].inner_value;
  values[n] = boot;
  for (std::size_t t = 0; t < n; ++t) {
    double expected = 0.0, ret = 0.0, disc = 1.0, weight = 1.0 - lambda;
    for (std::size_t k = t; k < n; ++k) {
      ret += disc * recs[k].reward;
      disc *= gamma;
      const double nstep = ret + disc * values[k + 1];
      if (k + 1 < n) {
        expected += weight * nstep;
        weight *= lambda;
      } else {
        expected += weight / (1.0 - lambda) * nstep;
      }
    }
    EXPECT_NEAR(g[t], expected, 1e-12) << t;
  }
}

TEST(Loss, PerfectModelLeavesEntropyTerms) {
  Model m(1, 3);
  m.policy_logits(0, 0) = std::log(0.5);
  m.policy_logits(0, 1) = std::log(0.3);
  m.policy_logits(0, 2) = std::log(0.2);
  m.v_table[0] = 1.25;
  m.q_table(0, 1) = 1.25;
  const std::vector<TrainingSample> batch{{record(0, 1, 0.0, m.policy_row(0)), 1.25}};
  LossConfig cfg;
  cfg.c_pi = 0.7;
  cfg.c_ent = 0.2;
  const double h = entropy(m.policy_row(0));
  EXPECT_NEAR(loss(m, batch, cfg), (cfg.c_pi - cfg.c_ent) * h, 1e-14);
}

TEST(Loss, ZeroCoefficientsGiveZero) {
  LossConfig cfg;
  cfg.c_v = cfg.c_pi = cfg.c_ent = 0.0;
  const auto batch = random_batch(3, 2, 5, 1);
  EXPECT_EQ(loss(random_model(3, 2, 1), batch, cfg), 0.0);
}

TEST(Loss, DuplicatedBatchHasSameMean) {
  const auto model = random_model(3, 2, 4);
  auto batch = random_batch(3, 2, 6, 2);
  const double base = loss(model, batch, LossConfig{});
  const auto copy = batch;
  batch.insert(batch.end(), copy.begin(), copy.end());
  EXPECT_NEAR(loss(model, batch, LossConfig{}), base, 1e-14);
  EXPECT_THROW(loss(model, std::vector<TrainingSample>{}, LossConfig{}), ContractViolation);
}

TEST(Grad, MatchesCentralDifferences) {
  const auto model = random_model(4, 3, 11);
  const auto batch = random_batch(4, 3, 9, 12);
  LossConfig cfg;
  cfg.c_ent = 0.3;
  const ModelGrad g = grad(model, batch, cfg);
  Model probe = model;
  ModelGrad numeric(4, 3);
  std::vector<double*> p, n;
  detail::for_each_parameter(probe, [&](double& x) { p.push_back(&x); });
  detail::for_each_parameter(numeric, [&](double& x) { n.push_back(&x); });
  const double h = 1e-6;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double keep = *p[i];
    *p[i] = keep + h;
    const double up = loss(probe, batch, cfg);
    *p[i] = keep - h;
    const double down = loss(probe, batch, cfg);
    *p[i] = keep;
    *n[i] = (up - down) / (2.0 * h);
  }
  ModelGrad analytic = g;
  std::vector<double> a;
  detail::for_each_parameter(analytic, [&](double& x) { a.push_back(x); });
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], *n[i], 1e-6 * std::max(1.0, std::abs(*n[i]))) << i;
}

TEST(Grad, StationaryAtPerfectFitWithoutEntropy) {
  Model m(2, 2);
  m.policy_logits(0, 0) = 0.4;
  m.v_table[0] = -0.5;
  m.q_table(0, 0) = -0.5;
  LossConfig cfg;
  cfg.c_ent = 0.0;
  const std::vector<TrainingSample> batch{{record(0, 0, 0.0, m.policy_row(0)), -0.5}};
  ModelGrad g = grad(m, batch, cfg);
  detail::for_each_parameter(g, [](double& x) { EXPECT_NEAR(x, 0.0, 1e-15); });
}

TEST(Grad, UnvisitedRowsAreZero) {
  const auto model = random_model(5, 2, 3);
  std::vector<TrainingSample> batch{{record(2, 1, 0.0, {0.3, 0.7}), 1.0}};
  const auto g = grad(model, batch, LossConfig{});
  for (StateId s = 0; s < 5; ++s) {
    if (s == 2) continue;
    EXPECT_EQ(g.v_table[s], 0.0);
    for (ActionId a = 0; a < 2; ++a) {
      EXPECT_EQ(g.policy_logits(s, a), 0.0);
      EXPECT_EQ(g.q_table(s, a), 0.0);
    }
  }
  EXPECT_EQ(g.q_table(2, 0), 0.0);
  EXPECT_NE(g.q_table(2, 1), 0.0);
}

TEST(SgdStep, ZeroGradientOrRateIsIdentity) {
  const auto model = random_model(3, 2, 9);
  EXPECT_EQ(sgd_step(model, ModelGrad(3, 2), LossConfig{}), model);
  LossConfig still;
  still.lr = 0.0;
  EXPECT_EQ(sgd_step(model, random_model(3, 2, 10), still), model);
}

TEST(SgdStep, GlobalNormClip) {
  // 10 states x 5 actions: 50 logits + 10 values + 50 q entries = 110 ones.
  ModelGrad g(10, 5);
  detail::for_each_parameter(g, [](double& x) { x = 1.0; });
  LossConfig cfg;
  cfg.lr = 1.0;
  cfg.clip_norm = 10.0;
  const Model out = sgd_step(Model(10, 5), g, cfg);
  EXPECT_NEAR(out.v_table[3], -10.0 / std::sqrt(110.0), 1e-15);
  EXPECT_NEAR(out.policy_logits(9, 4), -10.0 / std::sqrt(110.0), 1e-15);
}

TEST(SgdStep, ElementClip) {
  ModelGrad g(1, 1);
  g.v_table[0] = 1e6;
  LossConfig cfg;
  cfg.lr = 1.0;
  cfg.clip_abs = 2.0;
  cfg.clip_norm = 100.0;
  EXPECT_DOUBLE_EQ(sgd_step(Model(1, 1), g, cfg).v_table[0], -2.0);
}

TEST(ReplayBuffer, FifoEviction) {
  ReplayBuffer buf(3);
  for (int i = 0; i < 5; ++i) buf.push({record(static_cast<StateId>(i), 0, 0.0, {1.0}), 0.0});
  ASSERT_EQ(buf.size(), 3u);
  EXPECT_EQ(buf[0].record.state, 2u);
  EXPECT_EQ(buf[2].record.state, 4u);
  RandomStream rng(0, 0);
  for (const auto& s : buf.sample(50, rng)) EXPECT_GE(s.record.state, 2u);
  EXPECT_THROW(ReplayBuffer(0), ContractViolation);
  EXPECT_THROW(ReplayBuffer(2).sample(1, rng), ContractViolation);
}

TEST(Sgd, LossDecreasesOnFrozenBatch) {
  auto model = random_model(4, 3, 21);
  const auto batch = random_batch(4, 3, 16, 22);
  LossConfig cfg;
  cfg.lr = 0.2;
  const double start = loss(model, batch, cfg);
  for (int i = 0; i < 100; ++i) model = sgd_step(std::move(model), grad(model, batch, cfg), cfg);
  EXPECT_LT(loss(model, batch, cfg), start);
}

TEST(Train, SmokeOnBuiltins) {
  const std::vector<TabularMdp> envs{make_two_arm(), make_chain(3, 1.0), make_absorbing_zero(4),
                                     make_gridworld(3, 3, {}), make_trap(), make_random_mdp(4, 2, 0)};
  for (const auto& mdp : envs) {
    const auto curve = train(mdp, small_config(), 5, 1);
    ASSERT_EQ(curve.size(), 5u);
    for (const auto& m : curve) {
      EXPECT_TRUE(std::isfinite(m.greedy_return));
      EXPECT_TRUE(std::isfinite(m.policy_return));
      EXPECT_GE(m.entropy, 0.0);
    }
  }
  EXPECT_THROW(train(make_two_arm(), small_config(), 0, 0), ContractViolation);
}

TEST(Train, ChainThreeNearOptimal) {
  const auto mdp = make_chain(3, 1.0);
  const auto cfg = small_config();
  const double optimal = optimal_policy(mdp, cfg.eval_horizon).v_star[0];
  const auto curve = train(mdp, cfg, 300, 0);
  EXPECT_GE(curve.back().greedy_return, 0.95 * optimal);
}

TEST(Train, AbsorbingZeroKeepsHighEntropy) {
  const auto curve = train(make_absorbing_zero(4), small_config(), 200, 0);
  EXPECT_GE(curve.back().entropy, 0.9 * std::log(4.0));
}

TEST(Train, SmoothedReturnTrendsUp) {
  const auto mdp = make_chain(5, 1.0);
  const auto curve = train(mdp, small_config(), 300, 2);
  const std::size_t window = 20;
  std::vector<double> smooth;
  for (std::size_t i = 0; i + window <= curve.size(); i += window) {
    double s = 0.0;
    for (std::size_t j = i; j < i + window; ++j) s += curve[j].policy_return;
    smooth.push_back(s / window);
  }
  for (std::size_t i = 1; i < smooth.size(); ++i) EXPECT_GE(smooth[i], smooth[i - 1] - 0.05) << i;
  EXPECT_GT(smooth.back(), smooth.front());
}

TEST(Trainer, CheckpointRoundTrip) {
  const auto mdp = make_chain(3, 1.0);
  Trainer trainer(mdp, small_config(), 4);
  for (int i = 0; i < 7; ++i) trainer.iterate();
  const Checkpoint c = make_checkpoint(trainer);
  const Checkpoint back = checkpoint_from_json(json::parse(to_json(c).dump()));
  EXPECT_EQ(back, c);
  EXPECT_EQ(back.iteration, 7u);

  Trainer restored(mdp, small_config(), back.seed);
  restored.restore(back.model, back.iteration);
  EXPECT_EQ(restored.model(), trainer.model());
  EXPECT_EQ(restored.iteration(), trainer.iteration());
  EXPECT_THROW(restored.restore(Model(2, 2), 0), ContractViolation);
}

TEST(Trainer, SameSeedSameCurve) {
  const auto mdp = make_trap();
  const auto a = train(mdp, small_config(), 20, 6);
  const auto b = train(mdp, small_config(), 20, 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].greedy_return, b[i].greedy_return);
    EXPECT_EQ(a[i].entropy, b[i].entropy);
  }
}
