"""Baselines without a user graph: a shared linear model, CLUB and uniform random."""

import math
from typing import Dict, List

import networkx as nx
import numpy as np
import scipy.linalg as sla

from src.agents.base_agent import BaseAgent, Decision
from src.services.environment_service import Round
from src.services.graph_service import GraphService
from src.utils.logging_utils import logger


class RidgeSummary:
    """M = lam I + sum x x^T and b = sum r x for one model."""

    def __init__(self, d: int, lam: float):
        self.lam = lam
        self.M = lam * np.eye(d)
        self.b = np.zeros(d)
        self.plays = 0

    def add(self, x: np.ndarray, r: float) -> None:
        self.M += np.outer(x, x)
        self.b += r * x
        self.plays += 1

    def mean(self) -> np.ndarray:
        return sla.cho_solve(sla.cho_factor(self.M, lower=True), self.b)

    def scores(self, contexts: np.ndarray, alpha: float) -> np.ndarray:
        factor = sla.cho_factor(self.M, lower=True)
        scores = contexts @ sla.cho_solve(factor, self.b)
        if alpha > 0:
            solved = sla.cho_solve(factor, contexts.T)
            widths = np.sqrt(np.clip(np.einsum("kj,jk->k", contexts, solved), 0.0, None))
            scores = scores + alpha * widths
        return scores


class SharedLinearAgent(BaseAgent):
    """LinUCB-SIN (UCB on one shared model) and EG-SIN (epoch-greedy on it)."""

    def __init__(self, label: str, d: int, lam: float, alpha: float = 0.0,
                 explore_fraction: float = 0.0, greedy_exploration: bool = False):
        super().__init__(label)
        self.model = RidgeSummary(d, lam)
        self.alpha = alpha
        self.explore_fraction = explore_fraction
        self.greedy_exploration = greedy_exploration

    def select(self, round: Round, rng: np.random.Generator) -> Decision:
        if self.greedy_exploration and rng.random() < self.explore_fraction:
            return Decision(int(rng.integers(round.K)), explored=True)
        alpha = 0.0 if self.greedy_exploration else self.alpha
        return Decision(self.argmax(self.model.scores(round.contexts, alpha)))

    def update(self, round: Round, decision: Decision, reward: float) -> None:
        self.model.add(round.contexts[decision.index], reward)


def club_confidence(plays: int) -> float:
    """sqrt((1 + ln(1 + T)) / (1 + T))."""
    return math.sqrt((1.0 + math.log1p(plays)) / (1.0 + plays))


class ClubAgent(BaseAgent):
    """
    Clustering of bandits over a sparse random user graph.

    Each connected component of the graph shares one ridge model built from the
    summaries of its members. After each update the played user's incident edges
    are cut when the two users' estimates are at least alpha2 * (cb_i + cb_j) apart.
    """

    def __init__(self, label: str, n: int, d: int, lam: float, alpha: float, alpha2: float,
                 edge_probability: float, rng: np.random.Generator):
        super().__init__(label)
        self.d = d
        self.lam = lam
        self.alpha = alpha
        self.alpha2 = alpha2
        self.users = [RidgeSummary(d, lam) for _ in range(n)]
        self.graph = GraphService.erdos_renyi(n, edge_probability, rng).to_networkx()
        self.labels = np.zeros(n, dtype=np.int64)
        self.clusters: Dict[int, RidgeSummary] = {}
        self._next_label = 0
        for component in nx.connected_components(self.graph):
            self._register(sorted(component))

    @property
    def cluster_count(self) -> int:
        return len(self.clusters)

    def _register(self, members: List[int]) -> None:
        summary = RidgeSummary(self.d, self.lam)
        for i in members:
            user = self.users[i]
            summary.M += user.M - self.lam * np.eye(self.d)
            summary.b += user.b
            summary.plays += user.plays
            self.labels[i] = self._next_label
        self.clusters[self._next_label] = summary
        self._next_label += 1

    def select(self, round: Round, rng: np.random.Generator) -> Decision:
        cluster = self.clusters[int(self.labels[round.user])]
        return Decision(self.argmax(cluster.scores(round.contexts, self.alpha)))

    def update(self, round: Round, decision: Decision, reward: float) -> None:
        x = round.contexts[decision.index]
        user = round.user
        self.users[user].add(x, reward)
        self.clusters[int(self.labels[user])].add(x, reward)

        mean = self.users[user].mean()
        bound = club_confidence(self.users[user].plays)
        removed = []
        for neighbor in list(self.graph.neighbors(user)):
            other = self.users[neighbor]
            gap = float(np.linalg.norm(mean - other.mean()))
            if gap >= self.alpha2 * (bound + club_confidence(other.plays)):
                removed.append(neighbor)
        if removed:
            self.graph.remove_edges_from((user, j) for j in removed)
            self._split(int(self.labels[user]))

    def _split(self, label: int) -> None:
        members = np.nonzero(self.labels == label)[0].tolist()
        components = list(nx.connected_components(self.graph.subgraph(members)))
        if len(components) == 1:
            return
        del self.clusters[label]
        for component in components:
            self._register(sorted(component))
        logger.debug(f"{self.label}: cluster {label} split into {len(components)}, now {self.cluster_count}")


class RandomAgent(BaseAgent):
    """Uniform over candidates; also the lockstep baseline of every run."""

    def select(self, round: Round, rng: np.random.Generator) -> Decision:
        return Decision(int(rng.integers(round.K)), explored=True)

    def update(self, round: Round, decision: Decision, reward: float) -> None:
        return None
