"""Batch closed-loop evaluation: paired gated vs autonomous runs.

Episodes are independent state machines, so batches fan out across worker
processes; each worker loads the model bundle once. Episode seeds derive
from (batch_seed, episode_index) so gated and ungated runs of the same pair
see identical initial conditions.
"""

from __future__ import annotations

import json
import multiprocessing as mp
from dataclasses import dataclass, field

from .bundle import ModelBundle, load_bundle
from .gate import EpisodeResult, GateConfig, GoalSpec, SessionConfig, run_closed_loop
from .policy import BIN_SWAP, OracleGenerator


@dataclass(frozen=True)
class EvalConfig:
    corruption: float = 0.3
    corruption_mode: str = BIN_SWAP
    gate_mode: str = "auto"  # auto | none
    n_objects: int = 3
    views: tuple[str, ...] = ("top",)
    history_len: int = 16
    allocation: tuple[int, int, int] = (8, 6, 2)
    horizon: int = 16
    k_max: int = 16
    max_env_steps: int = 80
    max_retries: int = 5


def episode_seed(batch_seed: int, episode_index: int) -> int:
    return batch_seed * 1000 + episode_index


def run_episode(
    bundle: ModelBundle, batch_seed: int, episode_index: int, cfg: EvalConfig
) -> EpisodeResult:
    seed = episode_seed(batch_seed, episode_index)
    generator = OracleGenerator(
        action_codec=bundle.action_codec,
        visual_codec=bundle.visual,
        views=cfg.views,
        horizon=cfg.horizon,
        corruption_rate=cfg.corruption,
        corruption_mode=cfg.corruption_mode,
        seed=seed + 7_777_777,
    )
    gate = GateConfig(
        k_max=cfg.k_max, max_retries=cfg.max_retries, verifier=cfg.gate_mode
    )
    session = SessionConfig(
        n_objects=cfg.n_objects,
        views=cfg.views,
        history_len=cfg.history_len,
        allocation=cfg.allocation,
        horizon=cfg.horizon,
        max_env_steps=cfg.max_env_steps,
    )
    return run_closed_loop(
        seed,
        generator,
        gate,
        session,
        bundle.compressor,
        goal=GoalSpec(k_max=cfg.k_max),
    )


_WORKER_BUNDLE: ModelBundle | None = None
_WORKER_CFGS: dict[str, EvalConfig] = {}


def _init_worker(bundle_dir: str, cfgs: dict[str, EvalConfig]) -> None:
    global _WORKER_BUNDLE, _WORKER_CFGS
    _WORKER_BUNDLE = load_bundle(bundle_dir)
    _WORKER_CFGS = cfgs


def _run_spec(spec: tuple[str, int, int]) -> tuple[str, int, int, dict]:
    name, batch_seed, episode_index = spec
    result = run_episode(_WORKER_BUNDLE, batch_seed, episode_index, _WORKER_CFGS[name])
    return (
        name,
        batch_seed,
        episode_index,
        {
            "seed": episode_seed(batch_seed, episode_index),
            "success": result.success,
            "env_steps": result.env_steps,
            "proposals": result.proposals,
            "rejections": result.rejections,
            "aborts": result.resample_aborts,
        },
    )


@dataclass
class BatchResults:
    """Per-batch episode summaries keyed by run name."""

    episodes: dict[str, dict[int, list[dict]]] = field(default_factory=dict)

    def add(self, name: str, batch_seed: int, summary: dict) -> None:
        self.episodes.setdefault(name, {}).setdefault(batch_seed, []).append(summary)

    def success_rate(self, name: str, batch_seed: int) -> float:
        eps = self.episodes[name][batch_seed]
        return sum(1 for e in eps if e["success"]) / len(eps)

    def overall_rate(self, name: str) -> float:
        eps = [e for batch in self.episodes[name].values() for e in batch]
        return sum(1 for e in eps if e["success"]) / len(eps)

    def all_rows(self, name: str) -> list[dict]:
        return [
            e
            for batch_seed in sorted(self.episodes[name])
            for e in self.episodes[name][batch_seed]
        ]


def run_batches(
    bundle_dir: str,
    runs: dict[str, EvalConfig],
    batch_seeds: range,
    episodes_per_batch: int,
    workers: int | None = None,
) -> BatchResults:
    """Run every (config, batch, episode) combination across processes."""
    specs = [
        (name, batch_seed, index)
        for name in runs
        for batch_seed in batch_seeds
        for index in range(episodes_per_batch)
    ]
    results = BatchResults()
    workers = workers or mp.cpu_count()
    if workers <= 1:
        _init_worker(bundle_dir, runs)
        for spec in specs:
            name, batch_seed, _, summary = _run_spec(spec)
            results.add(name, batch_seed, summary)
        return results
    ctx = mp.get_context("fork")
    with ctx.Pool(
        processes=workers, initializer=_init_worker, initargs=(str(bundle_dir), runs)
    ) as pool:
        for name, batch_seed, _, summary in pool.imap_unordered(
            _run_spec, specs, chunksize=4
        ):
            results.add(name, batch_seed, summary)
    return results


def write_results(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
