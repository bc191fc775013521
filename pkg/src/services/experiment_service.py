"""Experiment harness: round loop, regret accounting, tuning, timing sweeps and diagnostics."""

import itertools
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from src.agents.agent_factory import PolicySpec, build_agent
from src.agents.base_agent import BaseAgent
from src.agents.gob_agents import GraphLearningAgent
from src.config.constants import CONNECTIVITY_TOL, CSV_SCHEMA_VERSION, RUN_LOG_COLUMNS
from src.config.settings import ExperimentConfig
from src.services.environment_service import DatasetEnv, EnvironmentService, SyntheticEnv
from src.services.graph_service import EdgeList, GraphService, PriorGraph
from src.services.graphlearn_service import GraphLearnService
from src.utils.exceptions import ConfigError
from src.utils.logging_utils import log_exception, logger
from src.utils.rng_utils import RngStreams, make_streams

Environment = Union[SyntheticEnv, DatasetEnv]
AgentBuilder = Callable[[PolicySpec, PriorGraph, int, np.random.Generator], BaseAgent]
TIMING_COLUMNS = ("schema_version", "n", "d", "policy", "median_s_per_iter")


class RunSummary(BaseModel):
    """Per-cell JSON summary."""
    policy: str
    kind: str
    seed: int
    rounds: int
    final_cum_regret: float
    final_cum_random_regret: float
    final_ratio: Optional[float]
    median_s_per_iter: float
    hyperparameters: Dict[str, Union[float, int, str, bool, None]]
    tuned: Dict[str, float]


class Diagnostics(BaseModel):
    """Spectral summary of a user graph."""
    n: int
    edge_count: int
    density: float
    nu2: float
    trace_inv_over_n: float
    bound: Optional[float]
    bound_holds: Optional[bool]
    connected: bool


class RunRecorder:
    """Accumulates one cell's rounds and turns them into the run-log frame."""

    def __init__(self):
        self.rows: List[Tuple] = []
        self.seconds: List[float] = []

    def record(self, t: int, user: int, item: int, explored: bool, reward: float, best: float,
               regret: float, random_regret: float, seconds: float) -> None:
        self.rows.append((t, user, item, explored, reward, best, regret, random_regret))
        self.seconds.append(seconds)

    def __len__(self) -> int:
        return len(self.rows)

    def frame(self, policy: str, seed: int, log_every: int = 1) -> pd.DataFrame:
        """Run log with cumulative columns; thinned to every log_every-th round plus the last."""
        frame = pd.DataFrame(self.rows, columns=["round", "user", "item", "explored", "reward",
                                                 "best_reward", "regret", "random_regret"])
        frame["explored"] = frame["explored"].astype(int)
        frame["cum_regret"] = frame["regret"].cumsum()
        frame["cum_random_regret"] = frame["random_regret"].cumsum()
        denominator = frame["cum_random_regret"].where(frame["cum_random_regret"] > 0)
        frame["regret_ratio"] = frame["cum_regret"] / denominator
        frame.insert(0, "seed", seed)
        frame.insert(0, "policy", policy)
        frame.insert(0, "schema_version", CSV_SCHEMA_VERSION)
        if log_every > 1 and len(frame):
            keep = ((frame["round"] + 1) % log_every == 0) | (frame.index == len(frame) - 1)
            frame = frame[keep]
        return frame.loc[:, list(RUN_LOG_COLUMNS)].reset_index(drop=True)

    def timing_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"round": [row[0] for row in self.rows], "seconds": self.seconds})


@dataclass
class CellResult:
    spec: PolicySpec
    seed: int
    agent: BaseAgent
    recorder: RunRecorder
    tuned: Dict[str, float] = field(default_factory=dict)


@dataclass
class ExperimentResult:
    summaries: List[RunSummary]
    failures: List[Dict[str, str]]
    output_dir: Path

    @property
    def failed(self) -> bool:
        return bool(self.failures)


class _Lane:
    """One agent playing its own copy of the seed's round sequence, with the random baseline in lockstep."""

    def __init__(self, spec: PolicySpec, env: Environment, seed: int, builder: AgentBuilder):
        self.spec = spec
        self.env = env
        self.streams: RngStreams = make_streams(seed)
        self.agent = builder(spec, env.prior, env.d, self.streams.policy)
        self.recorder = RunRecorder()

    def play(self, stop: int) -> None:
        env, streams, agent = self.env, self.streams, self.agent
        for t in range(len(self.recorder), stop):
            round = EnvironmentService.next_round(env, t, streams.rounds)
            expected = EnvironmentService.expected_rewards(env, round)
            best = float(expected.max())
            started = time.perf_counter()
            decision = agent.select(round, streams.policy)
            reward = EnvironmentService.reward(env, round, decision.index)
            agent.update(round, decision, reward)
            elapsed = time.perf_counter() - started
            agent.rounds_seen += 1
            baseline = int(streams.baseline.integers(round.K))
            self.recorder.record(
                t, round.user, int(round.item_ids[decision.index]), decision.explored, reward, best,
                best - float(expected[decision.index]), best - float(expected[baseline]), elapsed,
            )

    def prefix_regret(self) -> float:
        return float(sum(row[6] for row in self.recorder.rows))


class ExperimentService:
    """Runs configured experiments and writes their outputs."""

    @staticmethod
    def candidate_specs(spec: PolicySpec) -> List[Tuple[PolicySpec, Dict[str, float]]]:
        """Cartesian grid over the policy's tune lists; the policy itself when nothing is tuned."""
        if not spec.tune:
            return [(spec, {})]
        keys = sorted(spec.tune)
        candidates = []
        for values in itertools.product(*(spec.tune[key] for key in keys)):
            params = dict(zip(keys, values))
            candidates.append((spec.with_params(**params, tune={}), params))
        return candidates

    @staticmethod
    def run_cell(config: ExperimentConfig, spec: PolicySpec, seed: int,
                 env: Optional[Environment] = None, builder: AgentBuilder = build_agent) -> CellResult:
        """
        Play one (policy, seed) cell for config.rounds rounds.

        With a tune grid every candidate replays the identical validation-prefix rounds;
        the lowest prefix regret wins (first candidate on ties) and that lane continues.

        Args:
            config: Experiment config
            spec: Policy
            seed: Seed of the cell
            env: Prebuilt environment for this seed (built from the setup stream when None)
            builder: Agent constructor

        Returns:
            CellResult: Agent, recorder and chosen hyperparameters
        """
        if env is None:
            env = EnvironmentService.build(config.environment, make_streams(seed).setup)
        candidates = ExperimentService.candidate_specs(spec)
        if len(candidates) == 1:
            lane = _Lane(candidates[0][0], env, seed, builder)
            chosen = candidates[0][1]
        else:
            prefix = config.validation_prefix
            if prefix < 1:
                raise ConfigError(f"{spec.label}: tuning needs validation_prefix >= 1")
            lanes = []
            for candidate, params in candidates:
                lane = _Lane(candidate, env, seed, builder)
                lane.play(prefix)
                lanes.append((lane.prefix_regret(), lane, params))
                logger.debug(f"{spec.label} seed {seed}: {params} -> prefix regret {lanes[-1][0]:.4f}")
            best_index = int(np.argmin([entry[0] for entry in lanes]))
            _, lane, chosen = lanes[best_index]
            logger.info(f"{spec.label} seed {seed}: tuned {chosen} on {prefix} prefix rounds")
        lane.play(config.rounds)
        return CellResult(spec=lane.spec, seed=seed, agent=lane.agent, recorder=lane.recorder, tuned=chosen)

    @staticmethod
    def summarize(cell: CellResult, frame: pd.DataFrame) -> RunSummary:
        last = frame.iloc[-1]
        ratio = float(last["regret_ratio"])
        hyper = cell.spec.model_dump(exclude={"learn", "tune", "name"})
        return RunSummary(
            policy=cell.spec.label,
            kind=cell.spec.kind,
            seed=cell.seed,
            rounds=len(cell.recorder),
            final_cum_regret=float(last["cum_regret"]),
            final_cum_random_regret=float(last["cum_random_regret"]),
            final_ratio=None if math.isnan(ratio) else ratio,
            median_s_per_iter=float(np.median(cell.recorder.seconds)) if cell.recorder.seconds else 0.0,
            hyperparameters=hyper,
            tuned=cell.tuned,
        )

    @staticmethod
    def run_experiment(config: ExperimentConfig, output_dir: Optional[Union[str, Path]] = None,
                       builder: AgentBuilder = build_agent) -> ExperimentResult:
        """
        Run every (policy, seed) cell and write per-cell CSV/JSON, aggregate.csv and failures.csv.

        A failing cell is logged and recorded; the remaining cells still run.

        Args:
            config: Experiment config
            output_dir: Overrides config.output_dir
            builder: Agent constructor

        Returns:
            ExperimentResult: Summaries and failures
        """
        out = Path(output_dir or config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        summaries: List[RunSummary] = []
        failures: List[Dict[str, str]] = []
        frames: List[pd.DataFrame] = []

        for seed in config.seeds:
            try:
                env = EnvironmentService.build(config.environment, make_streams(seed).setup)
            except Exception as e:
                log_exception(e, f"Environment setup failed for seed {seed}")
                for spec in config.policies:
                    failures.append({"policy": spec.label, "seed": str(seed),
                                     "error": type(e).__name__, "message": str(e)})
                continue

            for spec in config.policies:
                logger.info(f"Running {spec.label} on seed {seed} for {config.rounds} rounds")
                try:
                    cell = ExperimentService.run_cell(config, spec, seed, env=env, builder=builder)
                except Exception as e:
                    log_exception(e, f"Cell {spec.label} / seed {seed} failed")
                    failures.append({"policy": spec.label, "seed": str(seed),
                                     "error": type(e).__name__, "message": str(e)})
                    continue

                frame = cell.recorder.frame(spec.label, seed, config.log_every)
                stem = f"{_file_label(spec.label)}_seed{seed}"
                frame.to_csv(out / f"{stem}.csv", index=False, na_rep="nan", float_format="%.12g")
                cell.recorder.timing_frame().to_csv(out / f"{stem}_timing.csv", index=False)
                summary = ExperimentService.summarize(cell, frame)
                (out / f"{stem}.json").write_text(summary.model_dump_json(indent=2))
                summaries.append(summary)
                frames.append(frame)
                logger.info(
                    f"{spec.label} seed {seed}: cumulative regret {summary.final_cum_regret:.3f}, "
                    f"ratio {summary.final_ratio}"
                )

        if frames:
            ExperimentService.aggregate(frames).to_csv(out / "aggregate.csv", index=False,
                                                        na_rep="nan", float_format="%.12g")
        if failures:
            pd.DataFrame(failures, columns=["policy", "seed", "error", "message"]).to_csv(
                out / "failures.csv", index=False)
            logger.warning(f"{len(failures)} cells failed; see {out / 'failures.csv'}")
        return ExperimentResult(summaries=summaries, failures=failures, output_dir=out)

    @staticmethod
    def aggregate(frames: Sequence[pd.DataFrame]) -> pd.DataFrame:
        """Mean over seeds per (policy, round) of the cumulative columns and the ratio."""
        combined = pd.concat(frames, ignore_index=True)
        grouped = (
            combined.groupby(["policy", "round"], sort=False)[["cum_regret", "cum_random_regret", "regret_ratio"]]
            .mean()
            .reset_index()
        )
        grouped.insert(0, "schema_version", CSV_SCHEMA_VERSION)
        return grouped

    @staticmethod
    def diagnostics(edges: EdgeList) -> Diagnostics:
        """
        nu_2, Tr(L^-1)/n and the bound (1 - 1/n)/nu_2 + 1/n for connected graphs.

        Args:
            edges: User graph

        Returns:
            Diagnostics: Record; bound fields are None on disconnected graphs
        """
        laplacian = GraphService.normalized_laplacian(edges)
        n = edges.n
        nu2 = GraphService.algebraic_connectivity(laplacian)
        trace_over_n = GraphService.trace_inverse(laplacian) / n
        connected = n == 1 or nu2 > CONNECTIVITY_TOL
        bound = None
        holds = None
        if n > 1 and connected:
            bound = (1.0 - 1.0 / n) / nu2 + 1.0 / n
            holds = bool(trace_over_n <= bound * (1.0 + 1e-12))
        if not connected:
            logger.warning(f"Graph is disconnected (nu2 = {nu2:.3e})")
        return Diagnostics(n=n, edge_count=edges.m, density=edges.density(), nu2=nu2,
                           trace_inv_over_n=trace_over_n, bound=bound, bound_holds=holds,
                           connected=connected)

    @staticmethod
    def graph_for(config: ExperimentConfig, seed: int) -> EdgeList:
        env = EnvironmentService.build(config.environment, make_streams(seed).setup)
        if isinstance(env, DatasetEnv):
            return env.edges
        return env.prior.edges

    @staticmethod
    def write_diagnostics(config: ExperimentConfig, output_dir: Optional[Union[str, Path]] = None) -> Path:
        out = Path(output_dir or config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        record = ExperimentService.diagnostics(ExperimentService.graph_for(config, config.seeds[0]))
        path = out / "diagnostics.json"
        path.write_text(record.model_dump_json(indent=2))
        logger.info(f"Wrote {path}: nu2={record.nu2:.4f}, Tr(L^-1)/n={record.trace_inv_over_n:.4f}")
        return path

    @staticmethod
    def _time_policy(spec: PolicySpec, env: SyntheticEnv, seed: int, warmup: int, timed: int) -> float:
        lane = _Lane(spec, env, seed, build_agent)
        lane.play(warmup)
        lane.recorder.seconds.clear()
        lane.play(warmup + timed)
        return float(np.median(lane.recorder.seconds))

    @staticmethod
    def timing_sweep(config: ExperimentConfig, n_values: Optional[Sequence[int]] = None,
                     d_values: Optional[Sequence[int]] = None,
                     output_dir: Optional[Union[str, Path]] = None) -> pd.DataFrame:
        """
        Median seconds per select+update on Kronecker graphs of growing n (and optionally growing d).

        Each point gets an untimed warmup of rounds_per_node * n rounds, capped at
        max_warmup_rounds, then timed_rounds timed rounds.

        Args:
            config: Config whose sweep section sets d, sparsity, warmup and policies
            n_values: Overrides sweep.n_values
            d_values: Overrides sweep.d_values (run at sweep.fixed_n)
            output_dir: Where timing.csv goes (config.output_dir when None)

        Returns:
            pd.DataFrame: Columns schema_version, n, d, policy, median_s_per_iter
        """
        sweep = config.sweep
        n_values = list(sweep.n_values if n_values is None else n_values)
        d_values = list(sweep.d_values if d_values is None else d_values)
        points = [(n, sweep.d) for n in n_values] + [(sweep.fixed_n, d) for d in d_values]
        known = {spec.kind: spec for spec in config.policies}
        seed = config.seeds[0]
        rows = []
        for n, d in points:
            if n < 2 or n & (n - 1):
                raise ConfigError(f"sweep n must be a power of two >= 2, got {n}")
            setup = make_streams(seed).setup
            edges = GraphService.kronecker_graph(config.environment.kronecker_seed, int(math.log2(n)),
                                                 sweep.sparsity, setup)
            env = EnvironmentService.gen_synthetic(
                n, d, PriorGraph.from_edges(edges), config.environment.sigma, setup,
                lambda_gen=config.environment.lambda_gen, candidates=config.environment.candidates,
            )
            warmup = min(int(round(sweep.rounds_per_node * n)), sweep.max_warmup_rounds)
            for kind in sweep.policies:
                spec = known.get(kind) or PolicySpec(kind=kind)
                median = ExperimentService._time_policy(spec, env, seed, warmup, sweep.timed_rounds)
                rows.append((CSV_SCHEMA_VERSION, n, d, spec.label, median))
                logger.info(f"Sweep n={n} d={d} {spec.label}: {median:.3e} s/iter ({edges.m} edges)")
        frame = pd.DataFrame(rows, columns=list(TIMING_COLUMNS))
        out = Path(output_dir or config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out / "timing.csv", index=False, float_format="%.6e")
        return frame

    @staticmethod
    def learn_graph(config: ExperimentConfig, output_dir: Optional[Union[str, Path]] = None) -> Tuple[Path, Path]:
        """
        Run the first graph-learning policy of the config (L-EG by default) on the first seed
        and export the learned precision.

        Returns:
            Tuple[Path, Path]: learned_graph.txt and learned_precision.txt
        """
        spec = next((s for s in config.policies if s.kind in ("L-EG", "U-EG")), PolicySpec(kind="L-EG"))
        seed = config.seeds[0]
        cell = ExperimentService.run_cell(config, spec, seed)
        agent = cell.agent
        if not isinstance(agent, GraphLearningAgent):
            raise ConfigError(f"{spec.label} is not a graph-learning policy")
        if agent.updates == 0:
            logger.warning(f"{spec.label}: no graph update happened in {config.rounds} rounds")
        out = Path(output_dir or config.output_dir)
        paths = GraphLearnService.export(agent.learned, out)
        logger.info(f"Exported learned graph with {agent.learned.edge_count} edges to {out}")
        return paths


def _file_label(label: str) -> str:
    return label.replace("+", "p").replace("/", "_").replace(" ", "_")
