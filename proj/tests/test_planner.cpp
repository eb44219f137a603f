#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "trtsmc/io.hpp"
#include "trtsmc/planner.hpp"
#include "trtsmc/soft_oracle.hpp"

using namespace trtsmc;

namespace {

PlannerConfig config(std::size_t k, std::size_t depth, std::size_t period = 1) {
  PlannerConfig c;
  c.k = k;
  c.depth = depth;
  c.resample_period = period;
  return c;
}

ParticleSet with_weights(std::vector<double> log_w, std::vector<std::size_t> ancestors, std::vector<ActionId> roots) {
  ParticleSet p = init_particles(0, log_w.size());
  p.log_weights = std::move(log_w);
  p.ancestors = std::move(ancestors);
  p.root_actions = std::move(roots);
  return p;
}

std::multiset<std::size_t> as_multiset(const std::vector<std::size_t>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST(PlannerConfig, Validation) {
  EXPECT_NO_THROW(PlannerConfig{}.validate());
  PlannerConfig c;
  c.k = 0;
  EXPECT_THROW(c.validate(), ContractViolation);
  c = {};
  c.depth = 0;
  EXPECT_THROW(c.validate(), ContractViolation);
  c = {};
  c.resample_period = 0;
  EXPECT_THROW(c.validate(), ContractViolation);
  c = {};
  c.alpha = 1.5;
  EXPECT_THROW(c.validate(), ContractViolation);
  c = {};
  c.temperature = 0.0;
  EXPECT_THROW(c.validate(), ContractViolation);
  c = {};
  c.sigma = -0.1;
  EXPECT_THROW(c.validate(), ContractViolation);
}

TEST(InitParticles, Examples) {
  const auto p = init_particles(0, 3);
  EXPECT_EQ(p.ancestors, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(p.log_weights, (std::vector<double>{0, 0, 0}));
  const auto one = init_particles(5, 1);
  EXPECT_EQ(one.ancestors, (std::vector<std::size_t>{0}));
  EXPECT_EQ(one.ref_states, (std::vector<StateId>{5}));
  const auto many = init_particles(2, config(6, 1));
  EXPECT_TRUE(std::all_of(many.ref_states.begin(), many.ref_states.end(), [](StateId s) { return s == 2; }));
  EXPECT_THROW(init_particles(0, 0), ContractViolation);
}

TEST(WeightUpdate, Examples) {
  EXPECT_DOUBLE_EQ(weight_update(0.0, std::log(0.3), std::log(0.3), 1.7, 0.0, 0.0, 1.0, 1.0), 1.7);
  EXPECT_DOUBLE_EQ(weight_update(0.4, std::log(0.3), std::log(0.3), 0.0, 2.0, 2.0, 1.0, 1.0), 0.4);
  EXPECT_DOUBLE_EQ(weight_update(0.0, std::log(0.5), std::log(0.25), 0.0, 0.0, 0.0, 1.0, 1.0), std::log(2.0));
  // Temperature scales the reward only; gamma scales the next value.
  EXPECT_DOUBLE_EQ(weight_update(0.0, 0.0, 0.0, 1.0, 2.0, 0.5, 0.5, 0.5), 2.0 + 1.0 - 0.5);
  EXPECT_THROW(weight_update(0.0, kNegInf, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0), NumericalError);
}

TEST(Advance, AbsorbingZeroKeepsUniformWeights) {
  const auto mdp = make_absorbing_zero(3);
  const Model model(1, 3);
  const ModelGuide guide(mdp, model, 1.0);
  const auto cfg = config(5, 1);
  auto p = init_particles(0, cfg);
  const Table proposals = build_proposals(p, guide, cfg, 3, 1, 7);
  p = advance(std::move(p), mdp, proposals, guide, cfg, 1, 7);
  for (double w : p.log_weights) EXPECT_EQ(w, 0.0);
  for (double q : p.ancestor_logq) EXPECT_EQ(q, 0.0);
}

TEST(Advance, TwoArmDeterministicProposals) {
  const auto mdp = make_two_arm();
  const Model model(2, 2);
  const ModelGuide guide(mdp, model, 1.0);
  const auto cfg = config(2, 1);
  Table proposals(2, 2, 0.0);
  proposals(0, 0) = 1.0;
  proposals(1, 1) = 1.0;
  auto p = advance(init_particles(0, cfg), mdp, proposals, guide, cfg, 1, 0);
  // Uniform prior against point-mass proposals adds log(1/2) to both.
  EXPECT_DOUBLE_EQ(p.log_weights[0], std::log(0.5));
  EXPECT_DOUBLE_EQ(p.log_weights[1], 1.0 + std::log(0.5));
  EXPECT_DOUBLE_EQ(p.log_weights[1] - p.log_weights[0], 1.0);
  EXPECT_EQ(p.root_actions, (std::vector<ActionId>{0, 1}));
  EXPECT_EQ(p.states, (std::vector<StateId>{1, 1}));
}

TEST(Advance, RevivedKeepsPreTerminalReference) {
  const auto mdp = make_trap();
  const Model model(3, 2);
  const ModelGuide guide(mdp, model, 1.0);
  auto cfg = config(2, 2);
  cfg.resample_mode = ResampleMode::revived;
  Table proposals(2, 2, 0.0);
  proposals(0, 0) = 1.0;  // 0 -> 1
  proposals(1, 1) = 1.0;  // 0 -> trap
  auto p = advance(init_particles(0, cfg), mdp, proposals, guide, cfg, 1, 0);
  EXPECT_EQ(p.states, (std::vector<StateId>{1, 2}));
  EXPECT_EQ(p.ref_states, (std::vector<StateId>{1, 0}));

  cfg.resample_mode = ResampleMode::baseline;
  p = advance(init_particles(0, cfg), mdp, proposals, guide, cfg, 1, 0);
  EXPECT_EQ(p.ref_states, (std::vector<StateId>{1, 2}));
}

TEST(Resample, PointMassCopiesParticleZero) {
  auto p = with_weights({0.0, kNegInf, kNegInf}, {2, 0, 1}, {0, 1, 1});
  p.states = {4, 5, 6};
  p.retrace_sum = {1.5, 2.5, 3.5};
  const auto out = multinomial_resample(p, 3, 1, ResampleMode::baseline);
  EXPECT_EQ(out.ancestors, (std::vector<std::size_t>{2, 2, 2}));
  EXPECT_EQ(out.states, (std::vector<StateId>{4, 4, 4}));
  EXPECT_EQ(out.retrace_sum, (std::vector<double>{1.5, 1.5, 1.5}));
  EXPECT_EQ(out.log_weights, (std::vector<double>{0, 0, 0}));
  EXPECT_EQ(out.root_actions, p.root_actions);
}

TEST(Resample, ReproducibleForFixedSeed) {
  const auto p = with_weights(std::vector<double>(16, 0.0), {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15},
                              std::vector<ActionId>(16, 0));
  const auto a = multinomial_resample(p, 11, 2, ResampleMode::baseline);
  const auto b = multinomial_resample(p, 11, 2, ResampleMode::baseline);
  EXPECT_EQ(a.ancestors, b.ancestors);
  EXPECT_NE(a.ancestors, multinomial_resample(p, 12, 2, ResampleMode::baseline).ancestors);
}

TEST(Resample, RevivedRestartsAtReference) {
  auto p = with_weights({0.0, kNegInf}, {0, 1}, {1, 0});
  p.states = {2, 1};
  p.ref_states = {0, 1};
  const auto out = multinomial_resample(p, 0, 1, ResampleMode::revived);
  EXPECT_EQ(out.states, (std::vector<StateId>{0, 0}));
  EXPECT_EQ(out.ref_states, (std::vector<StateId>{0, 0}));
  const auto base = multinomial_resample(p, 0, 1, ResampleMode::baseline);
  EXPECT_EQ(base.states, (std::vector<StateId>{2, 2}));
}

TEST(Resample, AncestorsFormSubMultiset) {
  RandomStream rng(4, 0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> w(8);
    for (double& x : w) x = 3.0 * rng.uniform();
    std::vector<std::size_t> anc(8);
    for (auto& a : anc) a = static_cast<std::size_t>(rng.uniform() * 8);
    const auto p = with_weights(w, anc, std::vector<ActionId>(8, 0));
    const auto out = multinomial_resample(p, trial, 1, ResampleMode::baseline);
    const auto before = std::set<std::size_t>(anc.begin(), anc.end());
    for (std::size_t a : out.ancestors) EXPECT_TRUE(before.count(a));
  }
}

TEST(Resample, DegenerateWeightsThrow) {
  const auto p = with_weights({kNegInf, kNegInf}, {0, 1}, {0, 0});
  EXPECT_THROW(multinomial_resample(p, 0, 1, ResampleMode::baseline), DegenerateWeights);
  EXPECT_THROW(p.normalized_weights(), DegenerateWeights);
}

TEST(DiracPolicy, Examples) {
  const std::vector<double> w{std::log(0.4), std::log(0.1), std::log(0.3), std::log(0.2)};
  const auto p = with_weights(w, {0, 1, 2, 3}, {0, 0, 1, 2});
  const auto pi = dirac_policy(p, 3);
  EXPECT_NEAR(pi[0], 0.5, 1e-15);
  EXPECT_NEAR(pi[1], 0.3, 1e-15);
  EXPECT_NEAR(pi[2], 0.2, 1e-15);

  const auto shared = with_weights({0.1, 0.7, -0.3}, {1, 1, 1}, {0, 2, 0});
  EXPECT_EQ(dirac_policy(shared, 3), (std::vector<double>{0.0, 0.0, 1.0}));

  const auto distinct = with_weights({0, 0, 0, 0}, {0, 1, 2, 3}, {3, 1, 2, 0});
  for (double x : dirac_policy(distinct, 4)) EXPECT_DOUBLE_EQ(x, 0.25);
}

TEST(RunPlanner, TwoArmDiracNearPosterior) {
  const auto mdp = make_two_arm();
  const Model model(2, 2);
  const auto cfg = config(20000, 1);
  const std::vector<double> exact{1.0 / (1.0 + std::exp(1.0)), std::exp(1.0) / (1.0 + std::exp(1.0))};
  EXPECT_LE(total_variation(run_planner(mdp, 0, model, cfg, 1).root_policy, exact), 0.05);
}

TEST(RunPlanner, AbsorbingZeroMessagePassingIsPrior) {
  const auto mdp = make_absorbing_zero(4);
  const Model model(1, 4);
  for (std::size_t depth : {1, 3, 8}) {
    auto cfg = config(10000, depth);
    cfg.inference_mode = InferenceMode::message_passing;
    const auto out = run_planner(mdp, 0, model, cfg, depth);
    EXPECT_LE(total_variation(out.root_policy, std::vector<double>(4, 0.25)), 0.02) << "depth " << depth;
  }
}

TEST(RunPlanner, SingleParticleIsPointMass) {
  const auto mdp = make_absorbing_zero(4);
  const Model model(1, 4);
  const auto out = run_planner(mdp, 0, model, config(1, 1), 3);
  std::vector<double> point(4, 0.0);
  point.at(out.root_actions.at(0)) = 1.0;
  EXPECT_EQ(out.root_policy, point);
}

TEST(RunPlanner, RejectsTerminalStart) {
  const auto mdp = make_two_arm();
  const Model model(2, 2);
  EXPECT_THROW(run_planner(mdp, 1, model, config(4, 2), 0), ContractViolation);
}

TEST(RunPlanner, SeedDeterminism) {
  const auto mdp = make_random_mdp(5, 3, 2);
  Model model(5, 3);
  RandomStream rng(1, 0);
  for (double& x : model.policy_logits.values()) x = rng.uniform();
  for (double& x : model.q_table.values()) x = rng.uniform();
  for (double& x : model.v_table) x = rng.uniform();
  auto cfg = config(64, 6, 2);
  cfg.proposal_mode = ProposalMode::trust_region;
  cfg.alpha = 0.2;
  cfg.inference_mode = InferenceMode::message_passing;
  cfg.resample_mode = ResampleMode::revived;
  cfg.sigma = 0.5;
  const auto a = run_planner(mdp, 0, model, cfg, 9);
  const auto b = run_planner(mdp, 0, model, cfg, 9);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_NE(to_json(a).dump(), to_json(run_planner(mdp, 0, model, cfg, 10)).dump());
}

TEST(RunPlanner, InvariantsAtEveryStep) {
  const auto mdp = make_random_mdp(4, 3, 5);
  const Model model(4, 3);
  const ModelGuide guide(mdp, model, 0.5);
  auto cfg = config(32, 7, 2);
  cfg.temperature = 0.5;
  SmcPlanner<ModelGuide> planner(mdp, guide, cfg, 4);
  planner.reset(0);
  std::vector<ActionId> roots;
  while (!planner.done()) {
    const auto before = as_multiset(planner.particles().ancestors);
    planner.step();
    const auto& p = planner.particles();
    if (planner.steps_taken() == 1) roots = p.root_actions;
    EXPECT_EQ(p.root_actions, roots);
    double sum = 0.0;
    for (double w : p.normalized_weights()) sum += w;
    EXPECT_NEAR(sum, 1.0, 1e-9);
    for (std::size_t i = 0; i < p.size(); ++i) {
      EXPECT_TRUE(std::isfinite(p.log_weights[i]));
      EXPECT_LT(p.ancestors[i], cfg.k);
      EXPECT_TRUE(before.count(p.ancestors[i]));
    }
    if (planner.steps_taken() % 2 == 0 && !planner.done()) {
      for (double w : p.log_weights) EXPECT_EQ(w, 0.0);
    }
  }
  const auto out = planner.finish();
  double sum = 0.0;
  for (double x : out.root_policy) sum += x;
  EXPECT_NEAR(sum, 1.0, 1e-9);
  ASSERT_EQ(out.diagnostics.size(), 7u);
  EXPECT_TRUE(out.diagnostics[1].resampled);
  EXPECT_FALSE(out.diagnostics[6].resampled);
}

TEST(RunPlanner, ExactExpectationModeMatchesPosteriorOnStochasticMdp) {
  const auto mdp = make_random_mdp(3, 2, 8);
  const auto prior = uniform_policy(3, 2);
  const auto stages = posterior_stages(mdp, prior, 2, 1.0);
  const ExactSoftGuide guide(prior, stages);
  auto cfg = config(50000, 2);
  cfg.value_expectation = ValueExpectation::exact;
  const auto exact = stages.front().posterior_policy.row(0);
  const auto out = run_planner(mdp, 0, guide, cfg, 2);
  EXPECT_LE(total_variation(out.root_policy, exact), 0.02);
}

TEST(RunPlanner, AbsorbingZeroMessagePassingDepthInvariant) {
  const auto mdp = make_absorbing_zero(4);
  const Model model(1, 4);
  std::vector<double> mean_kl;
  for (std::size_t depth : {2, 4, 8, 16}) {
    auto cfg = config(4, depth);
    cfg.inference_mode = InferenceMode::message_passing;
    double kl = 0.0;
    for (std::uint64_t seed = 0; seed < 200; ++seed)
      kl += kl_divergence(std::vector<double>(4, 0.25), run_planner(mdp, 0, model, cfg, seed).root_policy, 1e-6);
    mean_kl.push_back(kl / 200.0);
  }
  for (double k : mean_kl) EXPECT_NEAR(k, mean_kl.front(), 0.02);
}

TEST(RunPlanner, DiracDegeneratesWithDepth) {
  const auto mdp = make_absorbing_zero(4);
  const Model model(1, 4);
  double prev = -1.0;
  for (std::size_t depth : {2, 4, 8, 16}) {
    double kl = 0.0;
    for (std::uint64_t seed = 0; seed < 200; ++seed)
      kl += kl_divergence(std::vector<double>(4, 0.25), run_planner(mdp, 0, model, config(4, depth), seed).root_policy, 1e-6);
    EXPECT_GT(kl, prev);
    prev = kl;
  }
}

TEST(RunPlanner, RetraceRootValueOnDeterministicChain) {
  // One particle, prior proposal, exact on-policy values of the uniform
  // policy are not needed: with lambda = 1 on-policy the estimate telescopes
  // to the sampled discounted return.
  const auto mdp = make_chain(6, 1.0);
  Model model(7, 2);
  for (StateId s = 0; s < 7; ++s) model.v_table[s] = 0.1 * s;
  auto cfg = config(1, 3);
  cfg.lambda_smc = 1.0;
  cfg.gamma = 0.9;
  const ModelGuide guide(mdp, model, 1.0);
  SmcPlanner<ModelGuide> planner(mdp, guide, cfg, 3);
  planner.reset(0);
  std::vector<StateId> visited{0};
  while (!planner.done()) {
    planner.step();
    visited.push_back(planner.particles().states[0]);
  }
  const auto out = planner.finish();
  // V(s0) + sum gamma^u delta_u = sum gamma^u r_u + gamma^3 V(s_3); rewards are 0 here.
  EXPECT_NEAR(out.search_value, std::pow(0.9, 3) * model.v_table[visited.back()], 1e-12);
}

TEST(RunPlanner, SigmaMixesModelAndSearchValues) {
  const auto mdp = make_two_arm();
  Model model(2, 2);
  model.v_table[0] = 0.3;
  auto cfg = config(100, 1);
  cfg.sigma = 0.25;
  const auto out = run_planner(mdp, 0, model, cfg, 1);
  EXPECT_NEAR(out.root_value, 0.25 * 0.3 + 0.75 * out.search_value, 1e-15);
}

TEST(PlannerOutput, JsonShape) {
  const auto out = run_planner(make_two_arm(), 0, Model(2, 2), config(4, 2), 0);
  const auto j = to_json(out);
  EXPECT_EQ(j.at("root_policy").size(), 2u);
  EXPECT_EQ(j.at("diagnostics").size(), 2u);
  EXPECT_TRUE(j.at("diagnostics")[0].contains("ess"));
}
