"""GMRF posterior over stacked user preferences: matvecs, CG solves, MAP estimates and samples."""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field
from scipy.sparse.linalg import LinearOperator, cg

from src.config.constants import (
    DEFAULT_CG_MAX_ITERS,
    DEFAULT_CG_REL_TOL,
    DEFAULT_CG_WARM_MAX_ITERS,
    GRAM_JITTER,
)
from src.services.graph_service import CholeskyFactor, GraphService, PriorGraph
from src.utils.exceptions import ConfigError, DimensionError, SolverError
from src.utils.logging_utils import logger


class SolveOptions(BaseModel):
    """Conjugate-gradient stopping rule and warm-start switch."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    rel_tol: float = Field(DEFAULT_CG_REL_TOL, gt=0)
    max_iters: int = Field(DEFAULT_CG_MAX_ITERS, ge=1)
    warm_max_iters: int = Field(DEFAULT_CG_WARM_MAX_ITERS, ge=1)
    warm_start: bool = True


@dataclass
class CGResult:
    """Solution of one CG solve. residual_norm is relative to the right-hand side."""
    x: np.ndarray
    iterations: int
    converged: bool
    residual_norm: float


@dataclass(eq=False)
class PosteriorState:
    """
    Structured summary of N(mean, Sigma_t^-1) with
    Sigma_t = gram / sigma^2 + lam * (precision kron I_d).

    Stacked vectors are user-major: entries d*i .. d*i+d-1 belong to user i.
    """
    n: int
    d: int
    lam: float
    sigma: float
    prior: PriorGraph
    gram: np.ndarray
    gram_chol: np.ndarray
    b: np.ndarray
    mean_cache: np.ndarray
    counts: np.ndarray
    t: int = 0
    mean_round: int = 0
    last_iterations: int = 0
    clamped_widths: int = 0

    @classmethod
    def create(cls, prior: PriorGraph, d: int, lam: float, sigma: float = 1.0) -> "PosteriorState":
        """
        Empty posterior (the prior) for prior.n users in d dimensions.

        Raises:
            ConfigError: If lam or sigma is not positive
        """
        if not lam > 0:
            raise ConfigError(f"lambda must be positive, got {lam}")
        if not sigma > 0:
            raise ConfigError(f"sigma must be positive, got {sigma}")
        if d < 1:
            raise DimensionError(f"dimension must be >= 1, got {d}")
        n = prior.n
        jitter = math.sqrt(GRAM_JITTER)
        return cls(
            n=n,
            d=d,
            lam=float(lam),
            sigma=float(sigma),
            prior=prior,
            gram=np.zeros((n, d, d)),
            gram_chol=np.broadcast_to(jitter * np.eye(d), (n, d, d)).copy(),
            b=np.zeros(n * d),
            mean_cache=np.zeros(n * d),
            counts=np.zeros(n, dtype=np.int64),
        )

    def block(self, user: int) -> slice:
        return slice(user * self.d, (user + 1) * self.d)

    def replace_prior(self, prior: PriorGraph) -> None:
        """Swap the prior precision; the cached mean and its warm start are dropped."""
        if prior.n != self.n:
            raise DimensionError(f"prior has {prior.n} users, state has {self.n}")
        self.prior = prior
        self.mean_cache = np.zeros(self.n * self.d)
        self.mean_round = -1

    def mean_blocks(self) -> np.ndarray:
        """Cached mean as an (n, d) array."""
        return self.mean_cache.reshape(self.n, self.d)

    def save(self, path: Union[str, Path]) -> Path:
        """
        Write a snapshot with numpy.savez; the prior precision is stored as CSR arrays.

        Args:
            path: Target .npz path

        Returns:
            Path: Written file
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        precision = self.prior.precision.tocsr()
        with path.open("wb") as handle:
            np.savez(
                handle,
                shape=np.array([self.n, self.d], dtype=np.int64),
                scalars=np.array([self.lam, self.sigma]),
                counters=np.array([self.t, self.mean_round, self.last_iterations, self.clamped_widths],
                                  dtype=np.int64),
                gram=self.gram,
                gram_chol=self.gram_chol,
                b=self.b,
                mean_cache=self.mean_cache,
                counts=self.counts,
                precision_data=precision.data,
                precision_indices=precision.indices,
                precision_indptr=precision.indptr,
                factor_perm=self.prior.factor.perm,
            )
        logger.debug(f"Saved posterior snapshot to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PosteriorState":
        """Restore a snapshot written by save; the prior factor is recomputed in the stored ordering."""
        with np.load(Path(path)) as data:
            n, d = (int(v) for v in data["shape"])
            lam, sigma = (float(v) for v in data["scalars"])
            t, mean_round, last_iterations, clamped = (int(v) for v in data["counters"])
            precision = sp.csr_matrix(
                (data["precision_data"], data["precision_indices"], data["precision_indptr"]),
                shape=(n, n),
            )
            perm = data["factor_perm"]
            factor = _factor_in_order(precision, perm)
            return cls(
                n=n, d=d, lam=lam, sigma=sigma,
                prior=PriorGraph(precision=precision, factor=factor),
                gram=data["gram"].copy(),
                gram_chol=data["gram_chol"].copy(),
                b=data["b"].copy(),
                mean_cache=data["mean_cache"].copy(),
                counts=data["counts"].copy(),
                t=t, mean_round=mean_round,
                last_iterations=last_iterations, clamped_widths=clamped,
            )


def _factor_in_order(precision: sp.csr_matrix, perm: np.ndarray) -> CholeskyFactor:
    identity = np.arange(precision.shape[0])
    if np.array_equal(perm, identity):
        return GraphService.sparse_cholesky(precision, ordering="natural")
    permuted = precision[perm][:, perm]
    natural = GraphService.sparse_cholesky(permuted, ordering="natural")
    return CholeskyFactor(lower=natural.lower, perm=np.asarray(perm, dtype=np.int64))


def cholesky_rank1_update(lower: np.ndarray, x: np.ndarray) -> None:
    """
    In-place update of a dense lower Cholesky factor so lower lower^T gains x x^T.

    Args:
        lower: d x d lower-triangular factor with positive diagonal
        x: d-vector
    """
    x = np.array(x, dtype=float)
    d = x.shape[0]
    for k in range(d):
        pivot = lower[k, k]
        radius = math.hypot(pivot, x[k])
        cos = radius / pivot
        sin = x[k] / pivot
        lower[k, k] = radius
        if k + 1 < d:
            lower[k + 1:, k] = (lower[k + 1:, k] + sin * x[k + 1:]) / cos
            x[k + 1:] = cos * x[k + 1:] - sin * lower[k + 1:, k]


class GmrfService:
    """Structured operations on a PosteriorState."""

    @staticmethod
    def _blocks(state: PosteriorState, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.ndim != 1 or v.shape[0] != state.n * state.d:
            raise DimensionError(f"expected a stacked vector of length {state.n * state.d}, got shape {v.shape}")
        return v.reshape(state.n, state.d)

    @staticmethod
    def precision_matvec(state: PosteriorState, v: np.ndarray) -> np.ndarray:
        """
        Sigma_t v = blockdiag(gram) v / sigma^2 + lam (L kron I_d) v.

        The Kronecker term is L @ V with V the (n, d) reshaping of v.

        Args:
            state: Posterior state
            v: Stacked vector of length n*d

        Returns:
            np.ndarray: Stacked product

        Raises:
            DimensionError: On a length mismatch
        """
        blocks = GmrfService._blocks(state, v)
        data_term = np.einsum("ijk,ik->ij", state.gram, blocks) / state.sigma ** 2
        prior_term = state.lam * (state.prior.precision @ blocks)
        return (data_term + prior_term).ravel()

    @staticmethod
    def cg_solve(
        apply: Callable[[np.ndarray], np.ndarray],
        rhs: np.ndarray,
        x0: Optional[np.ndarray],
        opts: SolveOptions,
        max_iters: Optional[int] = None,
    ) -> CGResult:
        """
        Conjugate gradient on a symmetric positive-definite operator.

        Args:
            apply: Matvec of the operator
            rhs: Right-hand side
            x0: Starting iterate, zeros when None
            opts: Tolerance and iteration cap
            max_iters: Overrides opts.max_iters

        Returns:
            CGResult: Final iterate (the last one reached when the cap stops the solve),
                iteration count, convergence flag and that iterate's true relative residual

        Raises:
            SolverError: If the right-hand side or an iterate is not finite
        """
        rhs = np.asarray(rhs, dtype=float)
        size = rhs.shape[0]
        if not np.all(np.isfinite(rhs)):
            raise SolverError("right-hand side contains NaN or Inf")
        rhs_norm = float(np.linalg.norm(rhs))
        if rhs_norm == 0.0:
            return CGResult(x=np.zeros(size), iterations=0, converged=True, residual_norm=0.0)

        iterations = 0

        def count(_):
            nonlocal iterations
            iterations += 1

        operator = LinearOperator((size, size), matvec=apply, dtype=float)
        start = np.zeros(size) if x0 is None else np.asarray(x0, dtype=float)
        x, info = cg(operator, rhs, x0=start, rtol=opts.rel_tol, atol=0.0,
                     maxiter=max_iters or opts.max_iters, callback=count)
        if info < 0 or not np.all(np.isfinite(x)):
            raise SolverError("conjugate gradient diverged (operator indefinite or state corrupted)")
        residual = float(np.linalg.norm(apply(x) - rhs)) / rhs_norm
        if not math.isfinite(residual):
            raise SolverError("conjugate gradient produced a non-finite residual")
        return CGResult(x=x, iterations=iterations, converged=info == 0, residual_norm=residual)

    @staticmethod
    def _solve(state: PosteriorState, rhs: np.ndarray, x0: Optional[np.ndarray], opts: SolveOptions) -> CGResult:
        """Warm attempt capped at warm_max_iters, continued cold up to max_iters."""
        apply = lambda v: GmrfService.precision_matvec(state, v)
        if opts.warm_start and x0 is not None:
            result = GmrfService.cg_solve(apply, rhs, x0, opts, max_iters=opts.warm_max_iters)
            if not result.converged:
                more = GmrfService.cg_solve(apply, rhs, result.x, opts, max_iters=opts.max_iters)
                result = CGResult(more.x, result.iterations + more.iterations, more.converged, more.residual_norm)
        else:
            result = GmrfService.cg_solve(apply, rhs, None, opts)
        if not result.converged:
            logger.warning(
                f"CG stopped after {result.iterations} iterations at relative residual {result.residual_norm:.2e}"
            )
        state.last_iterations = result.iterations
        return result

    @staticmethod
    def map_estimate(state: PosteriorState, opts: SolveOptions) -> np.ndarray:
        """
        Solve Sigma_t w = b / sigma^2, warm-started from the cached mean.

        Args:
            state: Posterior state; its mean cache is updated
            opts: CG options

        Returns:
            np.ndarray: MAP estimate (stacked)
        """
        rhs = state.b / state.sigma ** 2
        result = GmrfService._solve(state, rhs, state.mean_cache, opts)
        state.mean_cache = result.x
        state.mean_round = state.t
        logger.debug(f"MAP solve: {result.iterations} CG iterations")
        return result.x.copy()

    @staticmethod
    def current_mean(state: PosteriorState, opts: SolveOptions) -> np.ndarray:
        """Cached mean, recomputed when observations arrived since the last solve."""
        if state.mean_round != state.t:
            GmrfService.map_estimate(state, opts)
        return state.mean_cache

    @staticmethod
    def observe(state: PosteriorState, user: int, x: np.ndarray, r: float) -> PosteriorState:
        """
        Add one observation (user, x, r): rank-1 update of one Gram block and its factor.

        Args:
            state: Posterior state, updated in place
            user: User index
            x: Context with norm at most 1
            r: Finite reward

        Returns:
            PosteriorState: The same state

        Raises:
            DimensionError: On a bad user index, context shape/norm or reward
        """
        if not 0 <= user < state.n:
            raise DimensionError(f"user {user} out of range for n={state.n}")
        x = np.asarray(x, dtype=float)
        if x.shape != (state.d,):
            raise DimensionError(f"context must have shape ({state.d},), got {x.shape}")
        if not math.isfinite(r):
            raise DimensionError(f"reward must be finite, got {r}")
        if np.linalg.norm(x) > 1.0 + 1e-9:
            raise DimensionError(f"context norm {np.linalg.norm(x):.6f} exceeds 1")

        if np.any(x):
            state.gram[user] += np.outer(x, x)
            cholesky_rank1_update(state.gram_chol[user], x)
            state.b[state.block(user)] += r * x
        state.counts[user] += 1
        state.t += 1
        return state

    @staticmethod
    def sample_prior(prior: PriorGraph, lam: float, d: int, rng: np.random.Generator) -> np.ndarray:
        """
        Draw from N(0, (lam L kron I_d)^-1) with one triangular solve against S^T.

        Args:
            prior: Prior graph with its Cholesky factor
            lam: Prior strength
            d: Dimension
            rng: Random generator

        Returns:
            np.ndarray: Stacked prior sample
        """
        z = rng.standard_normal((prior.n, d))
        permuted = prior.factor.solve_upper(z / math.sqrt(lam))
        sample = np.empty_like(permuted)
        sample[prior.factor.perm] = permuted
        return sample.reshape(-1)

    @staticmethod
    def sample_gram_noise(state: PosteriorState, rng: np.random.Generator) -> np.ndarray:
        """g ~ N(0, Phi^T Phi) as P_i z_i per user; users without data get exactly zero."""
        z = rng.standard_normal((state.n, state.d))
        noise = np.einsum("ijk,ik->ij", state.gram_chol, z)
        noise[~np.any(state.gram != 0.0, axis=(1, 2))] = 0.0
        return noise.reshape(-1)

    @staticmethod
    def solve_perturbed(state: PosteriorState, w0: np.ndarray, g: np.ndarray, opts: SolveOptions) -> CGResult:
        """Solve Sigma_t w = lam (L kron I_d) w0 + b / sigma^2 + g / sigma."""
        prior_term = state.lam * (state.prior.precision @ GmrfService._blocks(state, w0)).ravel()
        rhs = prior_term + state.b / state.sigma ** 2 + np.asarray(g) / state.sigma
        return GmrfService._solve(state, rhs, state.mean_cache, opts)

    @staticmethod
    def sample_posterior(state: PosteriorState, reshape: float, opts: SolveOptions,
                         rng: np.random.Generator) -> np.ndarray:
        """
        Posterior sample by perturbation, shrunk towards the mean by sqrt(reshape).

        With reshape = 1 the draw is exact from N(mean, Sigma_t^-1).

        Args:
            state: Posterior state
            reshape: Variance reshaping factor in (0, 1]
            opts: CG options
            rng: Random generator

        Returns:
            np.ndarray: Stacked sample
        """
        if not 0 < reshape <= 1:
            raise ConfigError(f"reshape must be in (0, 1], got {reshape}")
        mean = GmrfService.current_mean(state, opts).copy()
        w0 = GmrfService.sample_prior(state.prior, state.lam, state.d, rng)
        g = GmrfService.sample_gram_noise(state, rng)
        result = GmrfService.solve_perturbed(state, w0, g, opts)
        return mean + math.sqrt(reshape) * (result.x - mean)

    @staticmethod
    def confidence_width(state: PosteriorState, user: int, x: np.ndarray, opts: SolveOptions) -> float:
        """
        sqrt(phi^T Sigma_t^-1 phi) for phi the stacked embedding of (user, x), via one cold CG solve.

        A negative quadratic form from CG round-off is clamped to zero and logged.
        """
        if not 0 <= user < state.n:
            raise DimensionError(f"user {user} out of range for n={state.n}")
        x = np.asarray(x, dtype=float)
        if x.shape != (state.d,):
            raise DimensionError(f"context must have shape ({state.d},), got {x.shape}")
        if not np.any(x):
            return 0.0
        phi = np.zeros(state.n * state.d)
        phi[state.block(user)] = x
        cold = opts.model_copy(update={"warm_start": False})
        result = GmrfService._solve(state, phi, None, cold)
        value = float(phi @ result.x)
        if value < 0:
            state.clamped_widths += 1
            logger.warning(f"Clamped negative width {value:.3e} for user {user}")
            return 0.0
        return math.sqrt(value)

    @staticmethod
    def confidence_widths(state: PosteriorState, user: int, contexts: np.ndarray, opts: SolveOptions) -> np.ndarray:
        """
        Widths for K contexts of one user.

        With K > d the user's d x d block of Sigma_t^-1 is solved once (d solves) and
        every width is read off it; otherwise each width gets its own solve.
        """
        contexts = np.asarray(contexts, dtype=float)
        if contexts.shape[0] <= state.d:
            return np.array([GmrfService.confidence_width(state, user, x, opts) for x in contexts])
        covariance = GmrfService.covariance_block(state, user, opts)
        values = np.einsum("kj,jl,kl->k", contexts, covariance, contexts)
        negative = values < 0
        if negative.any():
            state.clamped_widths += int(negative.sum())
            logger.warning(f"Clamped {int(negative.sum())} negative widths for user {user}")
        return np.sqrt(np.clip(values, 0.0, None))

    @staticmethod
    def covariance_block(state: PosteriorState, user: int, opts: SolveOptions) -> np.ndarray:
        """User block of Sigma_t^-1, symmetrized."""
        cold = opts.model_copy(update={"warm_start": False})
        block = state.block(user)
        columns = []
        for k in range(state.d):
            e = np.zeros(state.n * state.d)
            e[block.start + k] = 1.0
            columns.append(GmrfService._solve(state, e, None, cold).x[block])
        covariance = np.column_stack(columns)
        return 0.5 * (covariance + covariance.T)
