"""Graph-coupled policies on the GMRF posterior: Thompson sampling, epoch-greedy, UCB and graph learning."""

import math
from typing import Optional

import numpy as np

from src.agents.base_agent import BaseAgent, Decision
from src.services.environment_service import Round
from src.services.gmrf_service import GmrfService, PosteriorState, SolveOptions
from src.services.graph_service import GraphService, PriorGraph
from src.services.graphlearn_service import GraphLearnService, LearnedPrecision, LearnSchedule
from src.utils.exceptions import ConfigError
from src.utils.logging_utils import logger


class GmrfAgent(BaseAgent):
    """Owns a PosteriorState. With an identity prior the users decouple into independent bandits."""

    def __init__(self, label: str, prior: PriorGraph, d: int, lam: float, sigma: float, opts: SolveOptions):
        super().__init__(label)
        self.state = PosteriorState.create(prior, d, lam, sigma)
        self.opts = opts

    def user_mean(self, user: int) -> np.ndarray:
        mean = GmrfService.current_mean(self.state, self.opts)
        return mean[self.state.block(user)]

    def update(self, round: Round, decision: Decision, reward: float) -> None:
        GmrfService.observe(self.state, round.user, round.contexts[decision.index], reward)


class ThompsonAgent(GmrfAgent):
    """G-TS / TS-IND: argmax under one reshaped posterior sample."""

    def __init__(self, label: str, prior: PriorGraph, d: int, lam: float, sigma: float,
                 opts: SolveOptions, reshape: float):
        super().__init__(label, prior, d, lam, sigma, opts)
        if not 0 < reshape <= 1:
            raise ConfigError(f"reshape must be in (0, 1], got {reshape}")
        self.reshape = reshape

    def select(self, round: Round, rng: np.random.Generator) -> Decision:
        sample = GmrfService.sample_posterior(self.state, self.reshape, self.opts, rng)
        scores = round.contexts @ sample[self.state.block(round.user)]
        return Decision(self.argmax(scores))


class UcbAgent(GmrfAgent):
    """GOBLIN++ / LinUCB-IND: mean plus discounted confidence width."""

    def __init__(self, label: str, prior: PriorGraph, d: int, lam: float, sigma: float,
                 opts: SolveOptions, alpha: float):
        super().__init__(label, prior, d, lam, sigma, opts)
        self.alpha = alpha

    def select(self, round: Round, rng: np.random.Generator) -> Decision:
        scores = round.contexts @ self.user_mean(round.user)
        if self.alpha > 0:
            widths = GmrfService.confidence_widths(self.state, round.user, round.contexts, self.opts)
            scores = scores + self.alpha * widths
        return Decision(self.argmax(scores))


def epoch_constant(trace_inverse: float, lam: float, delta: float) -> float:
    """C = sqrt(48 Tr(L^-1) / lam) + sqrt(9 ln(2 / delta) / 2)."""
    return math.sqrt(48.0 * trace_inverse / lam) + math.sqrt(9.0 * math.log(2.0 / delta) / 2.0)


def exploitation_rounds(epoch: int, constant: float) -> int:
    """s_q = floor(sqrt(q) / C), at least 1."""
    return max(1, int(math.floor(math.sqrt(epoch) / constant)))


class EpochGreedyAgent(GmrfAgent):
    """
    G-EG / EG-IND.

    Practical mode explores each round with probability explore_fraction and
    learns from every round. Theoretical mode runs epochs of one exploration round
    followed by s_q greedy rounds and learns from exploration rounds only.
    """

    def __init__(self, label: str, prior: PriorGraph, d: int, lam: float, sigma: float,
                 opts: SolveOptions, explore_fraction: float, mode: str = "practical",
                 constant: Optional[float] = None, delta: float = 0.1):
        super().__init__(label, prior, d, lam, sigma, opts)
        self.explore_fraction = explore_fraction
        self.mode = mode
        if mode == "theoretical" and constant is None:
            trace = GraphService.trace_inverse(prior.precision, factor=prior.factor)
            constant = epoch_constant(trace, lam, delta)
            logger.info(f"{label}: epoch constant {constant:.3f} from Tr(L^-1) = {trace:.3f}")
        self.constant = constant
        self.epoch = 0
        self.exploit_left = 0

    def _explore_now(self, rng: np.random.Generator) -> bool:
        if self.mode == "practical":
            return bool(rng.random() < self.explore_fraction)
        if self.exploit_left > 0:
            self.exploit_left -= 1
            return False
        self.epoch += 1
        self.exploit_left = exploitation_rounds(self.epoch, self.constant)
        return True

    def select(self, round: Round, rng: np.random.Generator) -> Decision:
        if self._explore_now(rng):
            return Decision(int(rng.integers(round.K)), explored=True)
        return Decision(self.argmax(round.contexts @ self.user_mean(round.user)))

    def update(self, round: Round, decision: Decision, reward: float) -> None:
        if self.mode == "theoretical" and not decision.explored:
            return
        super().update(round, decision, reward)


class GraphLearningAgent(EpochGreedyAgent):
    """L-EG (start from the empty graph) / U-EG (start from the given graph), re-learning V on a schedule."""

    def __init__(self, label: str, prior: PriorGraph, d: int, lam: float, sigma: float,
                 opts: SolveOptions, explore_fraction: float, schedule: LearnSchedule, **kwargs):
        start = PriorGraph.identity(prior.n) if schedule.mode == "L-EG" else prior
        super().__init__(label, start, d, lam, sigma, opts, explore_fraction, **kwargs)
        self.schedule = schedule
        self.learned: LearnedPrecision = GraphLearnService.initial_precision(schedule, start)
        self.updates = 0

    def update(self, round: Round, decision: Decision, reward: float) -> None:
        super().update(round, decision, reward)
        self.learned, changed = GraphLearnService.learn_step(
            self.state, self.learned, self.schedule, round.t + 1, self.opts
        )
        self.updates += int(changed)
