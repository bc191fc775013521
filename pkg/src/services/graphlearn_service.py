"""On-the-fly user-graph learning with the graphical lasso."""

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field
from sklearn.covariance import graphical_lasso
from sklearn.exceptions import ConvergenceWarning

from src.config.constants import (
    DEFAULT_BISECTION_STEPS,
    DEFAULT_GLASSO_MAX_SWEEPS,
    DEFAULT_GLASSO_TOL,
    DEFAULT_LEARN_SPARSITY,
    DEFAULT_MAX_EDGES,
    DEFAULT_UPDATE_INTERVAL,
    DEFAULT_WARMUP_RECS_PER_USER,
    DENSITY_BAND,
)
from src.services.gmrf_service import GmrfService, PosteriorState, SolveOptions
from src.services.graph_service import EdgeList, GraphService, PriorGraph
from src.utils.exceptions import GraphLearningError
from src.utils.logging_utils import logger

EDGE_THRESHOLD = 1e-12


class LearnSchedule(BaseModel):
    """When and how the user precision is re-learned."""
    model_config = ConfigDict(extra="forbid")

    warmup_recs_per_user: int = Field(DEFAULT_WARMUP_RECS_PER_USER, ge=1)
    update_interval_rounds: int = Field(DEFAULT_UPDATE_INTERVAL, ge=1)
    max_edges: int = Field(DEFAULT_MAX_EDGES, ge=1)
    target_sparsity: float = Field(DEFAULT_LEARN_SPARSITY, gt=0, lt=1)
    mode: Literal["L-EG", "U-EG"] = "L-EG"
    logdet_weight: Literal["unit", "dn+1"] = "unit"
    tol: float = Field(DEFAULT_GLASSO_TOL, gt=0)
    max_sweeps: int = Field(DEFAULT_GLASSO_MAX_SWEEPS, ge=1)
    bisection_steps: int = Field(DEFAULT_BISECTION_STEPS, ge=1)


@dataclass(eq=False)
class LearnedPrecision:
    """Sparse user precision V with its dense inverse."""
    V: sp.csr_matrix
    V_inv_cache: np.ndarray
    edge_count: int
    lambda2: Optional[float] = None
    costs: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return int(self.V.shape[0])

    @classmethod
    def from_dense(cls, theta: np.ndarray, lambda2: Optional[float] = None,
                   costs: Optional[List[Tuple[float, float]]] = None,
                   inverse: Optional[np.ndarray] = None) -> "LearnedPrecision":
        theta = 0.5 * (theta + theta.T)
        theta = np.where(np.abs(theta) > EDGE_THRESHOLD, theta, 0.0)
        if inverse is None:
            inverse = sla.inv(theta)
        inverse = 0.5 * (inverse + inverse.T)
        edge_count = int(np.count_nonzero(np.triu(theta, k=1)))
        return cls(V=sp.csr_matrix(theta), V_inv_cache=inverse, edge_count=edge_count,
                   lambda2=lambda2, costs=list(costs or []))

    @classmethod
    def identity(cls, n: int) -> "LearnedPrecision":
        return cls(V=sp.identity(n, format="csr"), V_inv_cache=np.eye(n), edge_count=0)

    @classmethod
    def from_prior(cls, prior: PriorGraph) -> "LearnedPrecision":
        return cls.from_dense(prior.precision.toarray())

    def density(self) -> float:
        pairs = self.n * (self.n - 1) / 2
        return self.edge_count / pairs if pairs > 0 else 0.0

    def edges(self) -> EdgeList:
        return GraphService.edges_from_matrix(self.V, threshold=EDGE_THRESHOLD)

    def min_eigenvalue(self) -> float:
        return float(sla.eigvalsh(self.V.toarray(), subset_by_index=[0, 0])[0])


class GraphLearnService:
    """Alternating preference/precision estimation."""

    @staticmethod
    def empirical_cov(W: np.ndarray, prev: LearnedPrecision, lam: float) -> np.ndarray:
        """
        S = lam * Wc^T Wc + prev.V^-1 where Wc removes the mean over users of each dimension.

        Args:
            W: d x n matrix of current user means
            prev: Previous learned precision
            lam: Prior strength

        Returns:
            np.ndarray: n x n symmetric matrix
        """
        W = np.asarray(W, dtype=float)
        centered = W - W.mean(axis=1, keepdims=True)
        S = lam * centered.T @ centered + prev.V_inv_cache
        return 0.5 * (S + S.T)

    @staticmethod
    def objective(S: np.ndarray, V: np.ndarray, lambda2: float) -> float:
        """Tr(S V) - log det V + lambda2 * sum of |V_ij| over i != j."""
        sign, logdet = np.linalg.slogdet(V)
        if sign <= 0:
            return float("inf")
        off = np.abs(V).sum() - np.abs(np.diag(V)).sum()
        return float(np.sum(S * V) - logdet + lambda2 * off)

    @staticmethod
    def graphical_lasso(S_emp: np.ndarray, lambda2: float, tol: float = DEFAULT_GLASSO_TOL,
                        max_sweeps: int = DEFAULT_GLASSO_MAX_SWEEPS) -> LearnedPrecision:
        """
        Sparse precision by block coordinate descent over columns (scikit-learn "cd").

        Only off-diagonal entries are penalized. The solver stops on its duality gap
        or after max_sweeps sweeps; a run that hits the cap is logged and kept.

        Args:
            S_emp: Symmetric matrix with positive diagonal
            lambda2: Off-diagonal L1 penalty
            tol: Duality-gap tolerance
            max_sweeps: Sweep cap

        Returns:
            LearnedPrecision: Positive-definite result

        Raises:
            GraphLearningError: On a non-positive diagonal or solver breakdown
        """
        S = np.asarray(S_emp, dtype=float)
        S = 0.5 * (S + S.T)
        if np.any(np.diag(S) <= 0):
            raise GraphLearningError("empirical covariance must have a positive diagonal")
        if lambda2 < 0:
            raise GraphLearningError(f"penalty must be non-negative, got {lambda2}")

        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ConvergenceWarning)
            try:
                covariance, precision, costs, n_iter = graphical_lasso(
                    S, alpha=lambda2, mode="cd", tol=tol, enet_tol=tol, max_iter=max_sweeps,
                    return_costs=True, return_n_iter=True,
                )
            except (FloatingPointError, np.linalg.LinAlgError, sla.LinAlgError) as e:
                raise GraphLearningError(f"graphical lasso failed at penalty {lambda2:.4g}: {e}") from e
        if any(issubclass(w.category, ConvergenceWarning) for w in caught):
            logger.warning(f"Graphical lasso hit {max_sweeps} sweeps at penalty {lambda2:.4g}")
        if isinstance(costs, tuple):
            costs = [costs]
        learned = LearnedPrecision.from_dense(precision, lambda2=lambda2,
                                              costs=[tuple(map(float, c)) for c in costs])
        logger.debug(f"Glasso penalty {lambda2:.4g}: {learned.edge_count} edges after {n_iter} sweeps")
        return learned

    @staticmethod
    def search_lambda2(S_emp: np.ndarray, target_sparsity: float, max_edges: int,
                       tol: float = DEFAULT_GLASSO_TOL, max_sweeps: int = DEFAULT_GLASSO_MAX_SWEEPS,
                       steps: int = DEFAULT_BISECTION_STEPS) -> Tuple[float, LearnedPrecision]:
        """
        Bisect the penalty on [0, max off-diagonal |S|] until the edge density is within
        the relative band of the target and the edge cap holds.

        Returns:
            Tuple[float, LearnedPrecision]: Penalty and the solution at that penalty

        Raises:
            GraphLearningError: With the densities seen when the band is never reached
        """
        if not 0 < target_sparsity < 1:
            raise GraphLearningError(f"target sparsity must be in (0, 1), got {target_sparsity}")
        S = np.asarray(S_emp, dtype=float)
        n = S.shape[0]
        off = np.abs(S - np.diag(np.diag(S)))
        low, high = 0.0, float(off.max()) if n > 1 else 0.0
        if high == 0.0:
            raise GraphLearningError("no off-diagonal mass to learn edges from", [0.0])

        densities = []
        for step in range(steps):
            penalty = 0.5 * (low + high)
            learned = GraphLearnService.graphical_lasso(S, penalty, tol=tol, max_sweeps=max_sweeps)
            density = learned.density()
            densities.append(density)
            logger.debug(f"Bisection step {step}: penalty {penalty:.4g}, density {density:.4f}")
            within = abs(density - target_sparsity) <= DENSITY_BAND * target_sparsity
            if within and learned.edge_count <= max_edges:
                return penalty, learned
            if density > target_sparsity or learned.edge_count > max_edges:
                low = penalty
            else:
                high = penalty
        raise GraphLearningError(
            f"penalty bisection did not reach density {target_sparsity} within {steps} steps", densities
        )

    @staticmethod
    def tune_lambda2(S_emp: np.ndarray, target_sparsity: float, max_edges: int,
                     tol: float = DEFAULT_GLASSO_TOL, max_sweeps: int = DEFAULT_GLASSO_MAX_SWEEPS,
                     steps: int = DEFAULT_BISECTION_STEPS) -> float:
        """Penalty whose glasso solution has the target off-diagonal density."""
        penalty, _ = GraphLearnService.search_lambda2(S_emp, target_sparsity, max_edges, tol, max_sweeps, steps)
        return penalty

    @staticmethod
    def initial_precision(schedule: LearnSchedule, prior: PriorGraph) -> LearnedPrecision:
        """V_0 = I (learn from scratch) or V_0 = L (update the given graph)."""
        if schedule.mode == "L-EG":
            return LearnedPrecision.identity(prior.n)
        return LearnedPrecision.from_prior(prior)

    @staticmethod
    def is_due(state: PosteriorState, schedule: LearnSchedule, round_index: int) -> bool:
        if state.n < 2 or round_index % schedule.update_interval_rounds != 0:
            return False
        return int(state.counts.min()) >= schedule.warmup_recs_per_user

    @staticmethod
    def learn_step(state: PosteriorState, prev: LearnedPrecision, schedule: LearnSchedule,
                   round_index: int, opts: SolveOptions) -> Tuple[LearnedPrecision, bool]:
        """
        One graph update: means -> empirical covariance -> tuned glasso -> new prior.

        A no-op until every user has the warmup number of observations and the round
        is on the update interval. On update the state's prior becomes lam * (V kron I_d)
        with a fresh factor of V, and its cached mean is marked stale.

        Args:
            state: Posterior state (prior replaced in place)
            prev: Current learned precision
            schedule: Learning schedule
            round_index: Current round
            opts: CG options for the mean refresh

        Returns:
            Tuple[LearnedPrecision, bool]: Precision in force and whether it changed
        """
        if not GraphLearnService.is_due(state, schedule, round_index):
            return prev, False

        means = GmrfService.current_mean(state, opts)
        W = means.reshape(state.n, state.d).T
        S = GraphLearnService.empirical_cov(W, prev, state.lam)
        weight = 1.0 if schedule.logdet_weight == "unit" else float(state.d * state.n + 1)
        penalty, learned = GraphLearnService.search_lambda2(
            S / weight, schedule.target_sparsity, schedule.max_edges,
            tol=schedule.tol, max_sweeps=schedule.max_sweeps, steps=schedule.bisection_steps,
        )
        learned.lambda2 = penalty * weight
        state.replace_prior(PriorGraph.from_precision(learned.V, edges=learned.edges()))
        logger.info(
            f"Round {round_index}: learned precision with {learned.edge_count} edges "
            f"(density {learned.density():.4f}, penalty {learned.lambda2:.4g})"
        )
        return learned, True

    @staticmethod
    def export(learned: LearnedPrecision, directory: Union[str, Path]) -> Tuple[Path, Path]:
        """Write learned_graph.txt (edge list of the support) and learned_precision.txt (dense values)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        graph_path = GraphService.write_edge_list(learned.edges(), directory / "learned_graph.txt")
        values_path = directory / "learned_precision.txt"
        np.savetxt(values_path, learned.V.toarray(), fmt="%.10e")
        return graph_path, values_path
