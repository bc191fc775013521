"""Policy specifications and construction of the matching agent."""

from typing import Dict, List, Literal, Optional, get_args

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.agents.base_agent import BaseAgent
from src.agents.baseline_agents import ClubAgent, RandomAgent, SharedLinearAgent
from src.agents.gob_agents import EpochGreedyAgent, GraphLearningAgent, ThompsonAgent, UcbAgent
from src.config.constants import (
    DEFAULT_CG_MAX_ITERS, DEFAULT_CG_REL_TOL, DEFAULT_CG_WARM_MAX_ITERS,
    DEFAULT_CLUB_ALPHA2, DEFAULT_EPOCH_DELTA, DEFAULT_EXPLORE_FRACTION,
    DEFAULT_LAMBDA, DEFAULT_RESHAPE, DEFAULT_SIGMA, DEFAULT_UCB_ALPHA,
)
from src.services.gmrf_service import SolveOptions
from src.services.graph_service import GraphService, PriorGraph
from src.services.graphlearn_service import LearnSchedule

PolicyKind = Literal[
    "G-TS", "G-EG", "GOBLIN++", "LinUCB-IND", "TS-IND", "EG-IND",
    "LinUCB-SIN", "EG-SIN", "CLUB", "L-EG", "U-EG", "RANDOM",
]
POLICY_KINDS = get_args(PolicyKind)
TUNABLE = ("lam", "sigma", "reshape", "alpha", "explore_fraction", "epoch_constant", "club_alpha2")


class PolicySpec(BaseModel):
    """One policy and its hyperparameters. `lambda` is accepted for `lam`."""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    kind: PolicyKind
    name: Optional[str] = None
    lam: float = Field(DEFAULT_LAMBDA, gt=0, alias="lambda")
    sigma: float = Field(DEFAULT_SIGMA, gt=0)
    reshape: float = Field(DEFAULT_RESHAPE, gt=0, le=1)
    alpha: float = Field(DEFAULT_UCB_ALPHA, ge=0)
    explore_fraction: float = Field(DEFAULT_EXPLORE_FRACTION, ge=0, le=1)
    epoch_mode: Literal["practical", "theoretical"] = "practical"
    epoch_constant: Optional[float] = Field(None, gt=0)
    epoch_delta: float = Field(DEFAULT_EPOCH_DELTA, gt=0, lt=1)
    club_alpha2: float = Field(DEFAULT_CLUB_ALPHA2, ge=0)
    club_edge_probability: Optional[float] = Field(None, ge=0, le=1)
    cg_rel_tol: float = Field(DEFAULT_CG_REL_TOL, gt=0)
    cg_max_iters: int = Field(DEFAULT_CG_MAX_ITERS, ge=1)
    cg_warm_max_iters: int = Field(DEFAULT_CG_WARM_MAX_ITERS, ge=1)
    learn: LearnSchedule = Field(default_factory=LearnSchedule)
    tune: Dict[str, List[float]] = Field(default_factory=dict)

    @field_validator("tune", mode="before")
    @classmethod
    def _tunable_keys(cls, value):
        value = {("lam" if key == "lambda" else key): grid for key, grid in dict(value or {}).items()}
        for key, grid in value.items():
            if key not in TUNABLE:
                raise ValueError(f"{key!r} is not tunable; choose from {TUNABLE}")
            if not grid:
                raise ValueError(f"tune grid for {key!r} is empty")
        return value

    @model_validator(mode="after")
    def _learning_mode(self) -> "PolicySpec":
        if self.kind in ("L-EG", "U-EG") and self.learn.mode != self.kind:
            self.learn = self.learn.model_copy(update={"mode": self.kind})
        return self

    @property
    def label(self) -> str:
        return self.name or self.kind

    def with_params(self, **params) -> "PolicySpec":
        """Copy with hyperparameters replaced, validated again."""
        data = self.model_dump()
        data.update(params)
        return PolicySpec.model_validate(data)

    def solve_options(self) -> SolveOptions:
        return SolveOptions(rel_tol=self.cg_rel_tol, max_iters=self.cg_max_iters,
                            warm_max_iters=self.cg_warm_max_iters)


def build_agent(spec: PolicySpec, prior: PriorGraph, d: int, rng: np.random.Generator) -> BaseAgent:
    """
    Instantiate the agent for a policy kind.

    Graph kinds use the given prior; the -IND kinds use the identity prior so every
    user is an independent bandit on the same engine.

    Args:
        spec: Policy specification
        prior: User graph prior of the environment
        d: Feature dimension
        rng: Generator for construction-time randomness (CLUB's initial graph)

    Returns:
        BaseAgent: Ready agent
    """
    kind = spec.kind
    label = spec.label
    opts = spec.solve_options()
    graph = PriorGraph.identity(prior.n) if kind.endswith("-IND") else prior
    epoch = dict(mode=spec.epoch_mode, constant=spec.epoch_constant, delta=spec.epoch_delta)

    if kind in ("G-TS", "TS-IND"):
        return ThompsonAgent(label, graph, d, spec.lam, spec.sigma, opts, spec.reshape)
    if kind in ("G-EG", "EG-IND"):
        return EpochGreedyAgent(label, graph, d, spec.lam, spec.sigma, opts, spec.explore_fraction, **epoch)
    if kind in ("GOBLIN++", "LinUCB-IND"):
        return UcbAgent(label, graph, d, spec.lam, spec.sigma, opts, spec.alpha)
    if kind in ("L-EG", "U-EG"):
        return GraphLearningAgent(label, prior, d, spec.lam, spec.sigma, opts, spec.explore_fraction,
                                  spec.learn, **epoch)
    if kind == "LinUCB-SIN":
        return SharedLinearAgent(label, d, spec.lam, alpha=spec.alpha)
    if kind == "EG-SIN":
        return SharedLinearAgent(label, d, spec.lam, explore_fraction=spec.explore_fraction,
                                 greedy_exploration=True)
    if kind == "CLUB":
        p = spec.club_edge_probability
        if p is None:
            p = GraphService.club_edge_probability(prior.n)
        return ClubAgent(label, prior.n, d, spec.lam, spec.alpha, spec.club_alpha2, p, rng)
    return RandomAgent(label)
