"""Round generators: planted synthetic preferences and HetRec-style datasets."""

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.decomposition import TruncatedSVD
from sklearn.preprocessing import normalize
from sklearn.random_projection import SparseRandomProjection

from src.config.constants import DEFAULT_CANDIDATES, DEFAULT_LAMBDA_GEN
from src.services.gmrf_service import GmrfService
from src.services.graph_service import EdgeList, GraphService, PriorGraph
from src.utils.exceptions import DatasetError, DimensionError
from src.utils.logging_utils import logger
from src.utils.rng_utils import int_seed

NOISE_CLIP = 3.0


@dataclass(frozen=True, eq=False)
class Round:
    """One decision: target user, K candidate contexts with their item ids, and pre-drawn reward noise."""
    t: int
    user: int
    contexts: np.ndarray
    item_ids: np.ndarray
    noise: float = 0.0

    @property
    def K(self) -> int:
        return int(self.contexts.shape[0])


@dataclass(eq=False)
class SyntheticEnv:
    n: int
    d: int
    w_star: np.ndarray
    prior: PriorGraph
    sigma: float
    candidates: int = DEFAULT_CANDIDATES
    lambda_gen: float = DEFAULT_LAMBDA_GEN
    planted: bool = True

    def preferences(self, user: int) -> np.ndarray:
        return self.w_star[user * self.d:(user + 1) * self.d]


@dataclass(eq=False)
class DatasetEnv:
    """Binary-reward catalog with per-user liked sets and a social graph."""
    features: np.ndarray
    item_ids: np.ndarray
    user_ids: np.ndarray
    liked: List[np.ndarray]
    prior: PriorGraph
    edges: EdgeList
    candidates: int
    tfidf: np.ndarray
    tag_ids: np.ndarray

    @property
    def n(self) -> int:
        return len(self.liked)

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    @property
    def catalog_size(self) -> int:
        return int(self.features.shape[0])


@dataclass(frozen=True)
class HetrecLayout:
    """File names and column positions of one HetRec 2011 layout."""
    interactions: str
    interaction_columns: Tuple[int, int]
    tags: str
    tag_columns: Tuple[int, int]
    tag_weight_column: Optional[int]
    social: str
    social_columns: Tuple[int, int]


LAYOUTS: Dict[str, HetrecLayout] = {
    "lastfm": HetrecLayout(
        interactions="user_artists.dat", interaction_columns=(0, 1),
        tags="user_taggedartists.dat", tag_columns=(1, 2), tag_weight_column=None,
        social="user_friends.dat", social_columns=(0, 1),
    ),
    "delicious": HetrecLayout(
        interactions="user_taggedbookmarks.dat", interaction_columns=(0, 1),
        tags="bookmark_tags.dat", tag_columns=(0, 1), tag_weight_column=2,
        social="user_contacts.dat", social_columns=(0, 1),
    ),
}


def _read_table(path: Path, columns: Tuple[int, ...]) -> pd.DataFrame:
    """
    Read a tab-separated file with a header and return the requested columns as integers.

    Row i of the frame sits on file line i + 2.

    Raises:
        DatasetError: Naming the file and line of a missing file or malformed row
    """
    if not path.is_file():
        raise DatasetError("file not found", path=str(path))
    try:
        frame = pd.read_csv(path, sep="\t", engine="python", dtype=str, skip_blank_lines=True)
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise DatasetError(f"malformed row: {e}", path=str(path),
                           line=int(match.group(1)) if match else None) from e
    except pd.errors.EmptyDataError:
        raise DatasetError("empty file", path=str(path))

    if frame.shape[1] <= max(columns):
        raise DatasetError(f"expected at least {max(columns) + 1} columns, header has {frame.shape[1]}",
                           path=str(path), line=1)
    short = frame.isna().any(axis=1).to_numpy()
    if short.any():
        row = int(np.argmax(short))
        raise DatasetError(f"wrong column count (expected {frame.shape[1]})", path=str(path), line=row + 2)

    selected = frame.iloc[:, list(columns)].apply(pd.to_numeric, errors="coerce")
    bad = selected.isna().any(axis=1).to_numpy()
    if bad.any():
        row = int(np.argmax(bad))
        raise DatasetError(f"non-numeric value in {frame.iloc[row].tolist()}", path=str(path), line=row + 2)
    return selected


class EnvironmentService:
    """Builds environments and plays rounds."""

    @staticmethod
    def gen_synthetic(
        n: int,
        d: int,
        graph: PriorGraph,
        sigma: float,
        rng: np.random.Generator,
        lambda_gen: float = DEFAULT_LAMBDA_GEN,
        candidates: int = DEFAULT_CANDIDATES,
        planted: bool = True,
    ) -> SyntheticEnv:
        """
        Plant preferences w* ~ N(0, (lambda_gen L kron I_d)^-1) and shrink blocks with norm above 1.

        With planted=False the preferences ignore the graph (identity precision),
        while the environment still hands the graph to policies.

        Args:
            n: Users
            d: Dimension
            graph: Prior graph the policies see
            sigma: Reward noise scale
            rng: Setup stream
            lambda_gen: Planting strength
            candidates: K
            planted: Whether w* follows the graph

        Returns:
            SyntheticEnv: Environment
        """
        if graph.n != n:
            raise DimensionError(f"graph has {graph.n} users, expected {n}")
        source = graph if planted else PriorGraph.identity(n)
        w_star = GmrfService.sample_prior(source, lambda_gen, d, rng).reshape(n, d)
        norms = np.linalg.norm(w_star, axis=1)
        over = norms > 1.0
        w_star[over] /= norms[over, None]
        return SyntheticEnv(n=n, d=d, w_star=w_star.reshape(-1), prior=graph, sigma=float(sigma),
                            candidates=candidates, lambda_gen=lambda_gen, planted=planted)

    @staticmethod
    def next_round(env: Union[SyntheticEnv, DatasetEnv], t: int, rng: np.random.Generator) -> Round:
        """
        Draw the target user uniformly and its K candidates.

        Synthetic rounds get K fresh unit-norm Gaussian contexts and one clipped noise
        draw; dataset rounds get one liked item at a random position plus K - 1 other
        catalog items drawn without replacement.
        """
        user = int(rng.integers(env.n))
        if isinstance(env, SyntheticEnv):
            contexts = rng.standard_normal((env.candidates, env.d))
            contexts /= np.linalg.norm(contexts, axis=1, keepdims=True)
            noise = float(np.clip(rng.standard_normal() * env.sigma,
                                  -NOISE_CLIP * env.sigma, NOISE_CLIP * env.sigma))
            return Round(t=t, user=user, contexts=contexts,
                         item_ids=np.arange(env.candidates), noise=noise)

        liked = env.liked[user]
        anchor = int(liked[rng.integers(liked.shape[0])])
        others = rng.choice(env.catalog_size - 1, size=env.candidates - 1, replace=False)
        others[others >= anchor] += 1
        position = int(rng.integers(env.candidates))
        items = np.insert(others, position, anchor)
        return Round(t=t, user=user, contexts=env.features[items], item_ids=items)

    @staticmethod
    def expected_rewards(env: Union[SyntheticEnv, DatasetEnv], round: Round) -> np.ndarray:
        """Noise-free reward of every candidate."""
        if isinstance(env, SyntheticEnv):
            return round.contexts @ env.preferences(round.user)
        return np.isin(round.item_ids, env.liked[round.user]).astype(float)

    @staticmethod
    def reward(env: Union[SyntheticEnv, DatasetEnv], round: Round, index: int) -> float:
        """Observed reward of candidate index: linear plus the round's noise, or liked (1) / not liked (0)."""
        value = float(EnvironmentService.expected_rewards(env, round)[index])
        if isinstance(env, SyntheticEnv):
            return value + round.noise
        return value

    @staticmethod
    def best_reward(env: Union[SyntheticEnv, DatasetEnv], round: Round) -> float:
        return float(EnvironmentService.expected_rewards(env, round).max())

    @staticmethod
    def load_hetrec(
        directory: Union[str, Path],
        d: int,
        rng: np.random.Generator,
        layout: str = "lastfm",
        reduction: str = "random_projection",
        on_dangling: str = "error",
        candidates: int = DEFAULT_CANDIDATES,
    ) -> DatasetEnv:
        """
        Load a HetRec 2011 directory into a dataset environment.

        Items are the ones users interacted with. Their features are TF-IDF over tag
        assignments (raw counts, or the tag weight column when the layout has one,
        times ln(N / df)), L2-normalized, reduced to d dimensions and re-normalized.
        Users without interactions are dropped and the social graph is reindexed.

        Args:
            directory: Dataset directory
            d: Feature dimension
            rng: Setup stream (seeds the projection)
            layout: "lastfm" or "delicious"
            reduction: "random_projection" or "pca"
            on_dangling: "error" or "drop" for interaction items without tags
            candidates: K, clamped to the catalog size

        Returns:
            DatasetEnv: Environment

        Raises:
            DatasetError: Missing file, malformed row or dangling item
        """
        if layout not in LAYOUTS:
            raise DatasetError(f"unknown layout {layout!r}, expected one of {sorted(LAYOUTS)}")
        spec = LAYOUTS[layout]
        directory = Path(directory)
        interactions_path = directory / spec.interactions
        tags_path = directory / spec.tags

        interactions = _read_table(interactions_path, spec.interaction_columns)
        interactions.columns = ["user", "item"]
        tag_columns = spec.tag_columns + ((spec.tag_weight_column,) if spec.tag_weight_column is not None else ())
        tags = _read_table(tags_path, tag_columns)
        tags.columns = ["item", "tag"] + (["weight"] if spec.tag_weight_column is not None else [])
        if "weight" not in tags:
            tags["weight"] = 1.0
        social = _read_table(directory / spec.social, spec.social_columns)
        social.columns = ["user", "friend"]

        tagged_items = set(tags["item"].tolist())
        dangling = ~interactions["item"].isin(tagged_items).to_numpy()
        if dangling.any():
            row = int(np.argmax(dangling))
            item = int(interactions["item"].iloc[row])
            if on_dangling == "error":
                raise DatasetError(f"item {item} has no tag assignments", path=str(interactions_path), line=row + 2)
            logger.warning(f"Dropping {int(dangling.sum())} interactions with untagged items")
            interactions = interactions[~dangling]
        if interactions.empty:
            raise DatasetError("no interactions left after loading", path=str(interactions_path))

        item_ids = np.unique(interactions["item"].to_numpy()).astype(np.int64)
        catalog_tags = tags[tags["item"].isin(item_ids)]
        tag_ids = np.unique(catalog_tags["tag"].to_numpy()).astype(np.int64)
        counts = (
            catalog_tags.groupby(["item", "tag"])["weight"].sum()
            .unstack(fill_value=0.0)
            .reindex(index=item_ids, columns=tag_ids, fill_value=0.0)
        )
        tf = counts.to_numpy(dtype=float)
        df = np.count_nonzero(tf > 0, axis=0)
        idf = np.log(item_ids.shape[0] / df)
        tfidf = normalize(tf * idf, norm="l2")

        features = EnvironmentService._reduce(tfidf, d, reduction, rng)

        user_ids = np.unique(interactions["user"].to_numpy()).astype(np.int64)
        user_index = {int(u): i for i, u in enumerate(user_ids)}
        item_index = {int(v): j for j, v in enumerate(item_ids)}
        liked: List[List[int]] = [[] for _ in user_ids]
        for user, item in interactions.itertuples(index=False):
            liked[user_index[int(user)]].append(item_index[int(item)])
        liked_arrays = [np.unique(np.asarray(items, dtype=np.int64)) for items in liked]

        known = social["user"].isin(user_index) & social["friend"].isin(user_index)
        pairs = np.array(
            [(user_index[int(a)], user_index[int(b)]) for a, b in social[known].itertuples(index=False)],
            dtype=np.int64,
        ).reshape(-1, 2)
        edges = EdgeList.from_pairs(len(user_ids), pairs)

        catalog = item_ids.shape[0]
        if candidates > catalog:
            logger.warning(f"Catalog has {catalog} items; clamping candidates from {candidates} to {catalog}")
            candidates = catalog

        logger.info(
            f"Loaded {layout} data from {directory}: {len(user_ids)} users, {catalog} items, "
            f"{tag_ids.shape[0]} tags, {edges.m} social edges"
        )
        return DatasetEnv(
            features=features, item_ids=item_ids, user_ids=user_ids, liked=liked_arrays,
            prior=PriorGraph.from_edges(edges), edges=edges, candidates=candidates,
            tfidf=tfidf, tag_ids=tag_ids,
        )

    @staticmethod
    def _reduce(tfidf: np.ndarray, d: int, reduction: str, rng: np.random.Generator) -> np.ndarray:
        """Project TF-IDF rows to d dimensions and rescale nonzero rows to unit norm."""
        seed = int_seed(rng)
        if reduction == "pca":
            components = max(1, min(d, tfidf.shape[1] - 1))
            reduced = TruncatedSVD(n_components=components, random_state=seed).fit_transform(tfidf)
            if components < d:
                reduced = np.hstack([reduced, np.zeros((reduced.shape[0], d - components))])
        elif reduction == "random_projection":
            projector = SparseRandomProjection(n_components=d, dense_output=True, random_state=seed)
            reduced = np.asarray(projector.fit_transform(tfidf))
        else:
            raise DatasetError(f"unknown reduction {reduction!r}")
        return normalize(reduced, norm="l2")

    @staticmethod
    def build(config, rng: np.random.Generator) -> Union[SyntheticEnv, DatasetEnv]:
        """Environment from an EnvironmentConfig on the setup stream."""
        if config.kind == "dataset":
            return EnvironmentService.load_hetrec(
                config.data_dir, config.d, rng, layout=config.layout, reduction=config.reduction,
                on_dangling=config.on_dangling, candidates=config.candidates,
            )
        if config.graph == "kronecker":
            edges = GraphService.kronecker_graph(config.kronecker_seed, int(math.log2(config.n)),
                                                 config.sparsity, rng)
        elif config.graph == "erdos_renyi":
            p = config.edge_probability
            if p is None:
                p = GraphService.club_edge_probability(config.n)
            edges = GraphService.erdos_renyi(config.n, p, rng)
        elif config.graph == "file":
            edges = GraphService.read_edge_list(config.graph_file)
            if edges.n != config.n:
                raise DimensionError(f"graph file has {edges.n} nodes, config says n={config.n}")
        else:
            edges = EdgeList.empty(config.n)
        prior = PriorGraph.from_edges(edges)
        return EnvironmentService.gen_synthetic(
            config.n, config.d, prior, config.sigma, rng, lambda_gen=config.lambda_gen,
            candidates=config.candidates, planted=config.planted,
        )
