import networkx as nx
import numpy as np
import pytest
from pydantic import ValidationError

from oracles import (
    dense_goblin_select,
    dense_mean,
    dense_perturbed_sample,
    planted_components,
    random_state,
    ridge_per_user,
    unit_ball,
)
from src.agents.agent_factory import POLICY_KINDS, PolicySpec, build_agent
from src.agents.base_agent import Decision
from src.agents.baseline_agents import ClubAgent, RandomAgent, RidgeSummary, SharedLinearAgent, club_confidence
from src.agents.gob_agents import (
    EpochGreedyAgent,
    GraphLearningAgent,
    ThompsonAgent,
    UcbAgent,
    epoch_constant,
    exploitation_rounds,
)
from src.services.environment_service import EnvironmentService, Round, SyntheticEnv
from src.services.gmrf_service import GmrfService, PosteriorState, SolveOptions
from src.services.graph_service import EdgeList, GraphService, PriorGraph
from src.services.graphlearn_service import LearnSchedule
from src.utils.exceptions import ConfigError

TIGHT = SolveOptions(rel_tol=1e-12, max_iters=2000)


def make_round(user: int, contexts, t: int = 0) -> Round:
    contexts = np.asarray(contexts, dtype=float)
    return Round(t=t, user=user, contexts=contexts, item_ids=np.arange(contexts.shape[0]))


def play(agent, env, rounds: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    policy = np.random.default_rng(seed + 1)
    picks = []
    for t in range(rounds):
        round = EnvironmentService.next_round(env, t, rng)
        decision = agent.select(round, policy)
        agent.update(round, decision, EnvironmentService.reward(env, round, decision.index))
        picks.append(decision.index)
    return picks


def regret_ratio(agent, env, rounds: int, seed: int = 0) -> float:
    """Cumulative regret over the expected regret of uniform choice on the same rounds."""
    rng = np.random.default_rng(seed)
    policy = np.random.default_rng(seed + 1)
    regret, baseline = 0.0, 0.0
    for t in range(rounds):
        round = EnvironmentService.next_round(env, t, rng)
        decision = agent.select(round, policy)
        agent.update(round, decision, EnvironmentService.reward(env, round, decision.index))
        expected = EnvironmentService.expected_rewards(env, round)
        regret += expected.max() - expected[decision.index]
        baseline += expected.max() - expected.mean()
    return regret / baseline


class TestThompson:

    def test_single_candidate(self):
        agent = ThompsonAgent("G-TS", PriorGraph.identity(2), 2, 1.0, 1.0, TIGHT, reshape=1.0)
        assert agent.select(make_round(0, [[0.5, 0.5]]), np.random.default_rng(0)).index == 0

    def test_tiny_reshape_is_greedy(self):
        agent = ThompsonAgent("G-TS", PriorGraph.identity(1), 2, 1.0, 1.0, TIGHT, reshape=1e-12)
        for _ in range(5):
            GmrfService.observe(agent.state, 0, np.array([1.0, 0.0]), 1.0)
        round = make_round(0, [[0.0, 1.0], [1.0, 0.0]])
        assert agent.select(round, np.random.default_rng(0)).index == 1

    def test_matches_dense_sampling_oracle(self):
        rng = np.random.default_rng(1)
        state, _ = random_state(rng, 5, 3, 20)
        agent = ThompsonAgent("G-TS", state.prior, 3, state.lam, state.sigma, TIGHT, reshape=0.5)
        agent.state = state
        contexts = unit_ball(rng, 6, 3)
        seed = 42
        decision = agent.select(make_round(2, contexts), np.random.default_rng(seed))
        replay = np.random.default_rng(seed)
        w0 = GmrfService.sample_prior(state.prior, state.lam, 3, replay)
        g = GmrfService.sample_gram_noise(state, replay)
        sample = dense_perturbed_sample(state, w0, g, 0.5)
        assert decision.index == int(np.argmax(contexts @ sample[6:9]))

    def test_invalid_reshape(self):
        with pytest.raises(ConfigError):
            ThompsonAgent("G-TS", PriorGraph.identity(1), 1, 1.0, 1.0, TIGHT, reshape=1.5)

    def test_one_user_graph_and_independent_agree(self):
        rng = np.random.default_rng(2)
        env = EnvironmentService.gen_synthetic(1, 3, PriorGraph.identity(1), 0.1, rng)
        graph = build_agent(PolicySpec(kind="G-TS"), env.prior, 3, rng)
        independent = build_agent(PolicySpec(kind="TS-IND"), env.prior, 3, rng)
        assert play(graph, env, 50) == play(independent, env, 50)


class TestUcb:

    def test_zero_alpha_is_greedy(self):
        agent = UcbAgent("GOBLIN++", PriorGraph.identity(1), 2, 1.0, 1.0, TIGHT, alpha=0.0)
        GmrfService.observe(agent.state, 0, np.array([0.0, 1.0]), 1.0)
        assert agent.select(make_round(0, [[1.0, 0.0], [0.0, 0.5]]), None).index == 1

    def test_no_data_picks_largest_norm(self):
        agent = UcbAgent("GOBLIN++", PriorGraph.identity(3), 2, 1.0, 1.0, TIGHT, alpha=1.0)
        round = make_round(1, [[0.2, 0.1], [0.0, -0.9], [0.5, 0.5]])
        assert agent.select(round, None).index == 1

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_dense_ucb_oracle(self, seed):
        rng = np.random.default_rng(seed)
        state, _ = random_state(rng, 6, 2, 30)
        agent = UcbAgent("GOBLIN++", state.prior, 2, state.lam, state.sigma, TIGHT, alpha=0.5)
        agent.state = state
        contexts = unit_ball(rng, 5, 2)
        assert agent.select(make_round(4, contexts), None).index == dense_goblin_select(state, 4, contexts, 0.5)

    def test_scaling_scores_keeps_choice(self):
        rng = np.random.default_rng(3)
        state, _ = random_state(rng, 4, 2, 15)
        agent = UcbAgent("GOBLIN++", state.prior, 2, state.lam, state.sigma, TIGHT, alpha=0.0)
        agent.state = state
        contexts = unit_ball(rng, 6, 2)
        assert agent.select(make_round(0, contexts), None).index == agent.select(make_round(0, 0.5 * contexts), None).index


class TestIndependent:

    def test_means_match_per_user_ridge(self):
        rng = np.random.default_rng(4)
        n, d = 5, 3
        agent = build_agent(PolicySpec(kind="LinUCB-IND", lam=0.7, sigma=1.3, cg_rel_tol=1e-12),
                            PriorGraph.from_edges(GraphService.erdos_renyi(n, 0.8, rng)), d, rng)
        history = []
        for x in unit_ball(rng, 40, d):
            user, r = int(rng.integers(n)), float(rng.standard_normal())
            GmrfService.observe(agent.state, user, x, r)
            history.append((user, x, r))
        mean = GmrfService.map_estimate(agent.state, TIGHT)
        np.testing.assert_allclose(mean, ridge_per_user(history, n, d, 0.7, 1.3), atol=1e-6)

    def test_unobserved_user_mean_stays_zero(self):
        agent = build_agent(PolicySpec(kind="TS-IND"), PriorGraph.from_edges(EdgeList.from_pairs(2, [(0, 1)])),
                            2, np.random.default_rng(0))
        GmrfService.observe(agent.state, 0, np.array([0.6, 0.8]), 1.0)
        np.testing.assert_allclose(agent.user_mean(1), 0.0, atol=1e-12)

    def test_graph_prior_couples_users(self):
        agent = build_agent(PolicySpec(kind="G-TS"), PriorGraph.from_edges(EdgeList.from_pairs(2, [(0, 1)])),
                            2, np.random.default_rng(0))
        GmrfService.observe(agent.state, 0, np.array([0.6, 0.8]), 1.0)
        assert np.linalg.norm(agent.user_mean(1)) > 0


class TestEpochGreedy:

    def test_zero_fraction_is_greedy(self):
        agent = EpochGreedyAgent("G-EG", PriorGraph.identity(1), 2, 1.0, 1.0, TIGHT, explore_fraction=0.0)
        GmrfService.observe(agent.state, 0, np.array([1.0, 0.0]), 1.0)
        rng = np.random.default_rng(0)
        for _ in range(20):
            decision = agent.select(make_round(0, [[0.0, 1.0], [1.0, 0.0]]), rng)
            assert decision == Decision(1, explored=False)

    def test_full_fraction_is_uniform(self):
        agent = EpochGreedyAgent("G-EG", PriorGraph.identity(1), 2, 1.0, 1.0, TIGHT, explore_fraction=1.0)
        rng = np.random.default_rng(1)
        round = make_round(0, unit_ball(rng, 5, 2))
        draws = 5000
        counts = np.bincount([agent.select(round, rng).index for _ in range(draws)], minlength=5)
        expected = draws / 5
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        assert chi2 < 18.47

    def test_exploitation_rounds_formula(self):
        assert exploitation_rounds(4, 1.0) == 2
        assert exploitation_rounds(1, 10.0) == 1
        assert exploitation_rounds(100, 2.0) == 5

    def test_epoch_constant_formula(self):
        value = epoch_constant(trace_inverse=3.0, lam=0.5, delta=0.1)
        assert value == pytest.approx(np.sqrt(48 * 3.0 / 0.5) + np.sqrt(9 * np.log(20) / 2))

    def test_theoretical_schedule(self):
        agent = EpochGreedyAgent("G-EG", PriorGraph.identity(2), 2, 1.0, 1.0, TIGHT, explore_fraction=0.1,
                                 mode="theoretical", constant=1.0)
        rng = np.random.default_rng(2)
        round = make_round(0, [[0.6, 0.0], [0.0, 0.6]])
        flags = [agent.select(round, rng).explored for _ in range(12)]
        # epochs 1..4 exploit 1, 1, 1, 2 rounds
        assert flags == [True, False, True, False, True, False, True, False, False, True, False, False]

    def test_theoretical_mode_learns_only_from_exploration(self):
        agent = EpochGreedyAgent("G-EG", PriorGraph.identity(1), 2, 1.0, 1.0, TIGHT, explore_fraction=0.1,
                                 mode="theoretical", constant=1.0)
        round = make_round(0, [[0.6, 0.0]])
        agent.update(round, Decision(0, explored=False), 1.0)
        assert agent.state.t == 0
        agent.update(round, Decision(0, explored=True), 1.0)
        assert agent.state.t == 1

    def test_theoretical_constant_from_graph(self):
        prior = PriorGraph.from_edges(EdgeList.from_pairs(2, [(0, 1)]))
        agent = EpochGreedyAgent("G-EG", prior, 2, 0.5, 1.0, TIGHT, explore_fraction=0.1,
                                 mode="theoretical", delta=0.1)
        assert agent.constant == pytest.approx(epoch_constant(4.0 / 3.0, 0.5, 0.1))


class TestGraphLearning:

    def test_starts_from_identity_and_learns(self):
        rng = np.random.default_rng(5)
        edges, _ = planted_components([4, 4])
        env = EnvironmentService.gen_synthetic(8, 2, PriorGraph.from_edges(edges), 0.1, rng)
        schedule = LearnSchedule(mode="L-EG", warmup_recs_per_user=3, update_interval_rounds=50,
                                 target_sparsity=0.3, max_edges=100)
        agent = GraphLearningAgent("L-EG", env.prior, 2, 0.1, 1.0, TIGHT, explore_fraction=0.2, schedule=schedule)
        assert agent.state.prior.precision.nnz == 8
        play(agent, env, 300, seed=6)
        assert agent.updates >= 1
        assert agent.learned.edge_count > 0
        assert agent.learned.min_eigenvalue() > 0

    def test_update_mode_starts_from_given_graph(self):
        prior = PriorGraph.from_edges(EdgeList.from_pairs(3, [(0, 1)]))
        spec = PolicySpec(kind="U-EG")
        agent = build_agent(spec, prior, 2, np.random.default_rng(0))
        assert isinstance(agent, GraphLearningAgent)
        assert agent.learned.edge_count == 1
        assert agent.schedule.mode == "U-EG"


class TestSharedLinear:

    def test_single_observation_mean(self):
        model = RidgeSummary(2, lam=0.5)
        x = np.array([0.6, 0.8])
        model.add(x, 2.0)
        np.testing.assert_allclose(model.mean(), x * 2.0 / (x @ x + 0.5))

    def test_single_candidate(self):
        agent = SharedLinearAgent("LinUCB-SIN", 2, 1.0, alpha=0.0)
        assert agent.select(make_round(0, [[0.1, 0.2]]), None).index == 0

    def test_shared_across_users(self):
        agent = SharedLinearAgent("LinUCB-SIN", 2, 1.0, alpha=0.0)
        agent.update(make_round(0, [[1.0, 0.0]]), Decision(0), 1.0)
        assert agent.select(make_round(7, [[0.0, 1.0], [1.0, 0.0]]), None).index == 1

    def test_shared_model_wins_when_users_are_identical(self):
        rng = np.random.default_rng(21)
        n, d = 20, 5
        shared = rng.standard_normal(d)
        shared /= np.linalg.norm(shared)
        env = SyntheticEnv(n=n, d=d, w_star=np.tile(shared, n), prior=PriorGraph.identity(n), sigma=0.1,
                           candidates=10)
        ratios = {}
        for kind in ("LinUCB-SIN", "LinUCB-IND"):
            agent = build_agent(PolicySpec(kind=kind), env.prior, d, np.random.default_rng(0))
            ratios[kind] = regret_ratio(agent, env, 1000, seed=3)
        assert ratios["LinUCB-SIN"] <= ratios["LinUCB-IND"]

    def test_greedy_exploration_variant(self):
        agent = build_agent(PolicySpec(kind="EG-SIN", explore_fraction=1.0), PriorGraph.identity(2), 2,
                            np.random.default_rng(0))
        assert agent.select(make_round(0, [[0.1, 0.0], [0.0, 0.1]]), np.random.default_rng(1)).explored


class TestClub:

    def test_confidence(self):
        assert club_confidence(0) == pytest.approx(1.0)
        assert club_confidence(9) == pytest.approx(np.sqrt((1 + np.log(10)) / 10))

    def test_clusters_are_components(self):
        agent = ClubAgent("CLUB", 30, 2, 1.0, 0.1, 1.0, 0.15, np.random.default_rng(0))
        components = list(nx.connected_components(agent.graph))
        assert agent.cluster_count == len(components)
        for component in components:
            labels = {int(agent.labels[i]) for i in component}
            assert len(labels) == 1

    def test_zero_threshold_shatters_played_users(self):
        agent = ClubAgent("CLUB", 6, 2, 1.0, 0.0, 0.0, 1.0, np.random.default_rng(1))
        assert agent.cluster_count == 1
        rng = np.random.default_rng(2)
        for user in range(6):
            round = make_round(user, unit_ball(rng, 3, 2))
            agent.update(round, agent.select(round, rng), 1.0)
        assert agent.cluster_count == 6
        assert agent.graph.number_of_edges() == 0

    def test_cluster_summary_is_sum_of_members(self):
        agent = ClubAgent("CLUB", 10, 2, 0.5, 0.1, 5.0, 0.5, np.random.default_rng(3))
        rng = np.random.default_rng(4)
        for t in range(100):
            user = int(rng.integers(10))
            round = make_round(user, unit_ball(rng, 3, 2), t)
            agent.update(round, agent.select(round, rng), float(rng.standard_normal()))
        for label, summary in agent.clusters.items():
            members = np.nonzero(agent.labels == label)[0]
            M = 0.5 * np.eye(2) + sum(agent.users[i].M - 0.5 * np.eye(2) for i in members)
            np.testing.assert_allclose(summary.M, M, atol=1e-10)
            np.testing.assert_allclose(summary.b, sum(agent.users[i].b for i in members), atol=1e-10)

    def test_single_user_equals_shared_model(self):
        rng = np.random.default_rng(5)
        env = EnvironmentService.gen_synthetic(1, 3, PriorGraph.identity(1), 0.1, rng)
        club = build_agent(PolicySpec(kind="CLUB", alpha=0.1), env.prior, 3, np.random.default_rng(0))
        shared = build_agent(PolicySpec(kind="LinUCB-SIN", alpha=0.1), env.prior, 3, np.random.default_rng(0))
        assert play(club, env, 60) == play(shared, env, 60)


class TestFactory:

    @pytest.mark.parametrize("kind", POLICY_KINDS)
    def test_every_kind_builds_and_plays(self, kind):
        rng = np.random.default_rng(6)
        env = EnvironmentService.gen_synthetic(4, 2, PriorGraph.from_edges(EdgeList.from_pairs(4, [(0, 1), (2, 3)])),
                                               0.1, rng, candidates=3)
        agent = build_agent(PolicySpec(kind=kind), env.prior, 2, rng)
        assert agent.label == kind
        picks = play(agent, env, 10)
        assert all(0 <= p < 3 for p in picks)

    def test_lambda_alias_and_tune_keys(self):
        spec = PolicySpec.model_validate({"kind": "G-TS", "lambda": 0.5, "tune": {"lambda": [0.1, 1.0]}})
        assert spec.lam == 0.5
        assert spec.tune == {"lam": [0.1, 1.0]}

    def test_rejects_unknown_tunable(self):
        with pytest.raises(ValidationError):
            PolicySpec(kind="G-TS", tune={"kind": [1.0]})

    def test_rejects_bad_kind(self):
        with pytest.raises(ValidationError):
            PolicySpec(kind="GOBLIN")

    def test_random_agent(self):
        agent = RandomAgent("RANDOM")
        rng = np.random.default_rng(7)
        round = make_round(0, unit_ball(rng, 4, 2))
        assert all(agent.select(round, rng).explored for _ in range(5))

    def test_independent_kinds_use_identity(self):
        prior = PriorGraph.from_edges(EdgeList.from_pairs(3, [(0, 1)]))
        agent = build_agent(PolicySpec(kind="EG-IND"), prior, 2, np.random.default_rng(0))
        np.testing.assert_array_equal(agent.state.prior.precision.toarray(), np.eye(3))
        assert isinstance(agent.state, PosteriorState)

    def test_greedy_uses_dense_mean(self):
        rng = np.random.default_rng(8)
        state, _ = random_state(rng, 3, 2, 10)
        agent = EpochGreedyAgent("G-EG", state.prior, 2, state.lam, state.sigma, TIGHT, explore_fraction=0.0)
        agent.state = state
        contexts = unit_ball(rng, 4, 2)
        expected = int(np.argmax(contexts @ dense_mean(state)[2:4]))
        assert agent.select(make_round(1, contexts), rng).index == expected
