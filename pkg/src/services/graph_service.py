"""Graph service for user graphs, their Laplacian priors and spectral diagnostics."""

import math
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import networkx as nx
import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.linalg import lapack
from scipy.optimize import brentq
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.sparse.linalg import eigsh, splu, spsolve_triangular

from src.config.constants import (
    CONNECTIVITY_TOL,
    DENSE_EIGEN_LIMIT,
    DENSE_TRACE_LIMIT,
)
from src.utils.exceptions import GraphError, NotPositiveDefiniteError
from src.utils.logging_utils import logger
from src.utils.rng_utils import int_seed

NORMALIZED = "normalized"
REGULARIZED = "regularized"
ORDERINGS = ("amd", "rcm", "natural")


@dataclass(frozen=True, eq=False)
class EdgeList:
    """Undirected simple graph stored as canonical pairs i < j."""
    n: int
    edges: np.ndarray

    @classmethod
    def from_pairs(cls, n: int, pairs: Iterable[Sequence[int]]) -> "EdgeList":
        """
        Build a canonical edge list from arbitrary undirected pairs.

        Pairs are reordered to i < j and deduplicated; self-loops are dropped.

        Args:
            n: Node count
            pairs: Iterable of (i, j) pairs

        Returns:
            EdgeList: Canonical edge list

        Raises:
            GraphError: If n is negative or an index is out of range
        """
        if n < 0:
            raise GraphError(f"node count must be non-negative, got {n}")
        arr = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs, dtype=np.int64)
        arr = arr.reshape(-1, 2)
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            bad = arr[(arr < 0).any(axis=1) | (arr >= n).any(axis=1)][0]
            raise GraphError(f"edge ({bad[0]}, {bad[1]}) out of range for n={n}")
        loops = arr[:, 0] == arr[:, 1]
        if loops.any():
            logger.debug(f"Dropping {int(loops.sum())} self-loops")
            arr = arr[~loops]
        arr = np.sort(arr, axis=1)
        if arr.size:
            arr = np.unique(arr, axis=0)
        return cls(n=int(n), edges=arr)

    @classmethod
    def empty(cls, n: int) -> "EdgeList":
        return cls.from_pairs(n, np.empty((0, 2), dtype=np.int64))

    @property
    def m(self) -> int:
        return int(self.edges.shape[0])

    def __len__(self) -> int:
        return self.m

    def density(self) -> float:
        """Fraction of the n(n-1)/2 possible pairs that are edges."""
        pairs = self.n * (self.n - 1) / 2
        return self.m / pairs if pairs > 0 else 0.0

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency matrix."""
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        data = np.ones(rows.shape[0], dtype=float)
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n))
        graph.add_edges_from(map(tuple, self.edges.tolist()))
        return graph


@dataclass(frozen=True, eq=False)
class Laplacian:
    """Sparse symmetric Laplacian tagged as normalized (L_G) or regularized (L_G + I)."""
    matrix: sp.csr_matrix
    variant: str = REGULARIZED

    @property
    def n(self) -> int:
        return int(self.matrix.shape[0])

    def normalized(self) -> "Laplacian":
        if self.variant == NORMALIZED:
            return self
        return Laplacian((self.matrix - sp.identity(self.n, format="csr")).tocsr(), NORMALIZED)

    def regularized(self) -> "Laplacian":
        if self.variant == REGULARIZED:
            return self
        return Laplacian((self.matrix + sp.identity(self.n, format="csr")).tocsr(), REGULARIZED)

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


@dataclass(frozen=True, eq=False)
class CholeskyFactor:
    """Sparse factor with P^T (lower lower^T) P equal to the factored matrix."""
    lower: sp.csr_matrix
    perm: np.ndarray
    upper: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "upper", self.lower.T.tocsr())

    @property
    def n(self) -> int:
        return int(self.lower.shape[0])

    @property
    def nnz(self) -> int:
        return int(self.lower.nnz)

    def reconstruct(self) -> sp.csr_matrix:
        """Undo the permutation on lower @ lower^T."""
        inverse = np.argsort(self.perm)
        product = (self.lower @ self.upper).tocsr()
        return product[inverse][:, inverse].tocsr()

    def solve_upper(self, rhs: np.ndarray) -> np.ndarray:
        """Solve lower^T u = rhs in the permuted ordering; rhs may have several columns."""
        return spsolve_triangular(self.upper, rhs, lower=False)

    def solve_lower(self, rhs: np.ndarray) -> np.ndarray:
        """Solve lower u = rhs in the permuted ordering."""
        return spsolve_triangular(self.lower, rhs, lower=True)


@dataclass(eq=False)
class PriorGraph:
    """Prior precision over users (regularized Laplacian or a learned precision) with its factor."""
    precision: sp.csr_matrix
    factor: CholeskyFactor
    edges: Optional[EdgeList] = None

    @property
    def n(self) -> int:
        return int(self.precision.shape[0])

    @classmethod
    def from_edges(cls, edges: EdgeList, ordering: str = "amd") -> "PriorGraph":
        laplacian = GraphService.normalized_laplacian(edges)
        factor = GraphService.sparse_cholesky(laplacian, ordering=ordering)
        return cls(precision=laplacian.matrix, factor=factor, edges=edges)

    @classmethod
    def identity(cls, n: int) -> "PriorGraph":
        return cls.from_edges(EdgeList.empty(n))

    @classmethod
    def from_precision(cls, precision: Union[np.ndarray, sp.spmatrix], edges: Optional[EdgeList] = None,
                       ordering: str = "amd") -> "PriorGraph":
        matrix = sp.csr_matrix(precision)
        matrix.eliminate_zeros()
        factor = GraphService.sparse_cholesky(matrix, ordering=ordering)
        return cls(precision=matrix, factor=factor, edges=edges)

    def laplacian(self) -> Laplacian:
        return Laplacian(self.precision, REGULARIZED)


class GraphService:
    """Service for building, generating, factoring and diagnosing user graphs."""

    @staticmethod
    def normalized_laplacian(edges: EdgeList) -> Laplacian:
        """
        Build the regularized normalized Laplacian L = L_G + I_n.

        Isolated nodes get a zero row and column in L_G, so their diagonal in L is 1.

        Args:
            edges: Canonical edge list

        Returns:
            Laplacian: Regularized variant
        """
        n = edges.n
        adjacency = edges.adjacency()
        degree = np.asarray(adjacency.sum(axis=1)).ravel()
        connected = degree > 0
        inv_sqrt = np.zeros(n)
        inv_sqrt[connected] = 1.0 / np.sqrt(degree[connected])
        scaling = sp.diags(inv_sqrt)
        normalized_adjacency = scaling @ adjacency @ scaling
        laplacian_g = sp.diags(connected.astype(float)) - normalized_adjacency
        matrix = (laplacian_g + sp.identity(n)).tocsr()
        matrix.sort_indices()
        return Laplacian(matrix, REGULARIZED)

    @staticmethod
    def kronecker_expected_edges(seed_probs: np.ndarray, power: int, scale: float = 1.0) -> float:
        """
        Expected undirected edge count of a symmetrized stochastic Kronecker sample.

        A pair {i, j} is an edge when either directed draw (i, j) or (j, i) succeeds;
        self-loops are not counted.
        """
        a, b = seed_probs[0]
        c, d = seed_probs[1]
        total = (scale * (a + b + c + d)) ** power
        diagonal = (scale * (a + d)) ** power
        reciprocal = (scale ** 2 * (a * a + d * d + 2 * b * c)) ** power
        diagonal_sq = (scale ** 2 * (a * a + d * d)) ** power
        return (total - diagonal) - 0.5 * (reciprocal - diagonal_sq)

    @staticmethod
    def kronecker_graph(
        seed_probs: Sequence[Sequence[float]],
        power: int,
        target_sparsity: Optional[float],
        rng: np.random.Generator,
    ) -> EdgeList:
        """
        Sample a stochastic Kronecker graph on 2**power nodes.

        When a target sparsity is given the seed entries are rescaled by one common
        factor so the expected undirected edge density matches it.

        Args:
            seed_probs: 2x2 initiator probabilities
            power: Kronecker power (n = 2**power)
            target_sparsity: Desired edge density, or None to use the seed as is
            rng: Random generator

        Returns:
            EdgeList: Symmetrized sample without self-loops

        Raises:
            GraphError: On invalid seed/power or an unreachable target
        """
        seed = np.asarray(seed_probs, dtype=float)
        if seed.shape != (2, 2) or seed.min() < 0 or seed.max() > 1:
            raise GraphError(f"seed must be a 2x2 matrix of probabilities, got {seed.tolist()}")
        if power < 1:
            raise GraphError(f"power must be >= 1, got {power}")
        n = 2 ** power

        if target_sparsity is not None:
            if not 0 < target_sparsity <= 1:
                raise GraphError(f"target sparsity must be in (0, 1], got {target_sparsity}")
            if seed.max() == 0:
                raise GraphError("target sparsity unreachable: seed matrix is all zero")
            target_edges = target_sparsity * n * (n - 1) / 2
            max_scale = 1.0 / seed.max()
            reachable = GraphService.kronecker_expected_edges(seed, power, max_scale)
            if reachable < target_edges:
                raise GraphError(
                    f"target sparsity {target_sparsity} unreachable: at most "
                    f"{reachable / (n * (n - 1) / 2):.4f} by rescaling this seed"
                )
            scale = brentq(
                lambda s: GraphService.kronecker_expected_edges(seed, power, s) - target_edges,
                0.0, max_scale, xtol=1e-14,
            )
            seed = seed * scale
            logger.debug(f"Kronecker seed rescaled by {scale:.6f} for sparsity {target_sparsity}")

        bits = (np.arange(n)[:, None] >> np.arange(power - 1, -1, -1)[None, :]) & 1
        sources, targets = [], []
        for i in range(n):
            row = reduce(np.kron, (seed[bit] for bit in bits[i]))
            hits = np.nonzero(rng.random(n) < row)[0]
            sources.append(np.full(hits.shape[0], i, dtype=np.int64))
            targets.append(hits)
        pairs = np.column_stack([np.concatenate(sources), np.concatenate(targets)])
        return EdgeList.from_pairs(n, pairs)

    @staticmethod
    def erdos_renyi(n: int, p: float, rng: np.random.Generator) -> EdgeList:
        """
        Sample G(n, p): each unordered pair is an edge independently with probability p.

        Args:
            n: Node count
            p: Edge probability
            rng: Random generator

        Returns:
            EdgeList: Sampled graph
        """
        if not 0 <= p <= 1:
            raise GraphError(f"edge probability must be in [0, 1], got {p}")
        graph = nx.fast_gnp_random_graph(n, p, seed=int_seed(rng))
        pairs = np.array(list(graph.edges()), dtype=np.int64).reshape(-1, 2)
        return EdgeList.from_pairs(n, pairs)

    @staticmethod
    def club_edge_probability(n: int) -> float:
        """Edge probability 3 ln(n) / n used to sparsify the initial cluster graph."""
        if n <= 1:
            return 0.0
        return min(1.0, 3.0 * math.log(n) / n)

    @staticmethod
    def sparse_cholesky(L: Union[Laplacian, sp.spmatrix], ordering: str = "amd") -> CholeskyFactor:
        """
        Factor a sparse symmetric positive-definite matrix after a fill-reducing permutation.

        The ordering comes from SuperLU's minimum-degree ordering on A^T + A; the
        permuted matrix is then factored without pivoting and the unit LU factor is
        rescaled into a Cholesky factor.

        Args:
            L: Regularized Laplacian or any sparse SPD matrix
            ordering: "amd", "rcm" or "natural"

        Returns:
            CholeskyFactor: Factor with P^T (lower lower^T) P = L

        Raises:
            NotPositiveDefiniteError: If a pivot is not strictly positive
        """
        if ordering not in ORDERINGS:
            raise GraphError(f"unknown ordering {ordering!r}, expected one of {ORDERINGS}")
        matrix = L.matrix if isinstance(L, Laplacian) else sp.csr_matrix(L)
        n = matrix.shape[0]
        if matrix.shape != (n, n):
            raise GraphError(f"matrix must be square, got {matrix.shape}")
        matrix = matrix.tocsc()

        perm = np.arange(n)
        diagonal_only = matrix.nnz == np.count_nonzero(matrix.diagonal())
        if ordering == "amd" and not diagonal_only:
            try:
                # perm_c maps old index to new position; take it back to an ordering
                perm = np.argsort(splu(matrix, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                       options={"SymmetricMode": True}).perm_c)
            except RuntimeError:
                # singular input; the natural-order pass below locates the pivot
                perm = np.arange(n)
        elif ordering == "rcm" and not diagonal_only:
            perm = reverse_cuthill_mckee(matrix.tocsr(), symmetric_mode=True)
        perm = np.asarray(perm, dtype=np.int64)

        permuted = matrix[perm][:, perm].tocsc()
        try:
            lu = splu(permuted, permc_spec="NATURAL", diag_pivot_thresh=0.0,
                      options={"SymmetricMode": True})
        except RuntimeError:
            raise GraphService._pivot_error(permuted, perm)
        if not np.array_equal(lu.perm_r, np.arange(n)) or not np.array_equal(lu.perm_c, np.arange(n)):
            raise GraphService._pivot_error(permuted, perm)

        pivots = lu.U.diagonal()
        bad = np.nonzero(~(pivots > 0))[0]
        if bad.size:
            raise NotPositiveDefiniteError(int(perm[bad[0]]), float(pivots[bad[0]]))

        lower = (lu.L @ sp.diags(np.sqrt(pivots))).tocsr()
        lower.eliminate_zeros()
        lower.sort_indices()
        return CholeskyFactor(lower=lower, perm=perm)

    @staticmethod
    def _pivot_error(permuted: sp.csc_matrix, perm: np.ndarray) -> NotPositiveDefiniteError:
        """Locate the first failing leading minor with LAPACK potrf."""
        _, info = lapack.dpotrf(permuted.toarray(), lower=1)
        index = max(int(info) - 1, 0)
        value = float(permuted[index, index])
        return NotPositiveDefiniteError(int(perm[index]), value)

    @staticmethod
    def algebraic_connectivity(L_G: Laplacian) -> float:
        """
        Second-smallest eigenvalue of the normalized Laplacian.

        Args:
            L_G: Normalized Laplacian (a regularized one is shifted back by I)

        Returns:
            float: nu_2, clamped at 0
        """
        laplacian = L_G.normalized()
        n = laplacian.n
        if n < 2:
            return 0.0
        if n <= DENSE_EIGEN_LIMIT:
            values = sla.eigvalsh(laplacian.toarray(), subset_by_index=[0, 1])
        else:
            values = eigsh(laplacian.matrix.tocsc(), k=2, sigma=-1e-2, which="LM",
                           return_eigenvectors=False)
        nu2 = float(np.sort(values)[1])
        return max(nu2, 0.0)

    @staticmethod
    def is_connected(L_G: Laplacian) -> bool:
        return GraphService.algebraic_connectivity(L_G) > CONNECTIVITY_TOL

    @staticmethod
    def trace_inverse(L: Union[Laplacian, sp.spmatrix], factor: Optional[CholeskyFactor] = None) -> float:
        """
        Tr(L^-1) of a regularized Laplacian.

        Small problems use a dense Cholesky inverse; larger ones use ||S^-1||_F^2
        from triangular solves against the sparse factor S.

        Args:
            L: Regularized Laplacian
            factor: Optional precomputed factor of L

        Returns:
            float: Trace of the inverse
        """
        matrix = L.matrix if isinstance(L, Laplacian) else sp.csr_matrix(L)
        n = matrix.shape[0]
        if n <= DENSE_TRACE_LIMIT:
            chol = sla.cho_factor(matrix.toarray(), lower=True)
            inverse = sla.cho_solve(chol, np.eye(n))
            return float(np.trace(inverse))

        if factor is None:
            factor = GraphService.sparse_cholesky(matrix)
        total = 0.0
        block = 256
        for start in range(0, n, block):
            stop = min(start + block, n)
            rhs = np.zeros((n, stop - start))
            rhs[np.arange(start, stop), np.arange(stop - start)] = 1.0
            columns = factor.solve_lower(rhs)
            total += float(np.sum(columns * columns))
        return total

    @staticmethod
    def read_edge_list(path: Union[str, Path]) -> EdgeList:
        """
        Read the edge-list text format: header "n <count>", then one "i j" per line.

        Raises:
            GraphError: On a missing header or malformed line
        """
        path = Path(path)
        lines = path.read_text().splitlines()
        if not lines:
            raise GraphError(f"{path}: empty edge-list file")
        header = lines[0].split()
        if len(header) != 2 or header[0] != "n" or not header[1].isdigit():
            raise GraphError(f"{path}:1: expected header 'n <count>', got {lines[0]!r}")
        n = int(header[1])
        pairs = []
        for number, line in enumerate(lines[1:], start=2):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 2:
                raise GraphError(f"{path}:{number}: expected 'i j', got {line!r}")
            try:
                pairs.append((int(fields[0]), int(fields[1])))
            except ValueError:
                raise GraphError(f"{path}:{number}: non-integer node id in {line!r}")
        return EdgeList.from_pairs(n, np.array(pairs, dtype=np.int64).reshape(-1, 2))

    @staticmethod
    def write_edge_list(edges: EdgeList, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        body = "".join(f"{i} {j}\n" for i, j in edges.edges.tolist())
        path.write_text(f"n {edges.n}\n{body}")
        return path

    @staticmethod
    def edges_from_matrix(matrix: Union[np.ndarray, sp.spmatrix], threshold: float = 1e-10) -> EdgeList:
        """Support of the off-diagonal entries with magnitude above threshold."""
        dense = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix)
        rows, cols = np.nonzero(np.triu(np.abs(dense) > threshold, k=1))
        return EdgeList.from_pairs(dense.shape[0], np.column_stack([rows, cols]))
