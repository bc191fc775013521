"""Shared round protocol for every policy."""

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from src.services.environment_service import Round


@dataclass(frozen=True)
class Decision:
    index: int
    explored: bool = False


class BaseAgent(ABC):
    """
    A policy sees a Round, picks a candidate, then learns from the reward.

    Agents are single-writer: select and update must alternate on one thread.
    """

    def __init__(self, label: str):
        self.label = label
        self.rounds_seen = 0

    @abstractmethod
    def select(self, round: Round, rng: np.random.Generator) -> Decision:
        """Choose one of the round's candidates."""

    @abstractmethod
    def update(self, round: Round, decision: Decision, reward: float) -> None:
        """Incorporate the observed reward of the chosen candidate."""

    @staticmethod
    def argmax(scores: np.ndarray) -> int:
        """Index of the largest score; ties go to the lowest index."""
        return int(np.argmax(scores))
