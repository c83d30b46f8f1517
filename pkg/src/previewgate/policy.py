"""The generator contract: one call yields an action chunk plus a faithful
tokenized preview of its consequences.

The oracle-backed implementation plans greedily against the live simulator
state, optionally corrupts the plan (seeded), jitters it at elevated
temperature, and always previews the rollout of the chunk that will actually
be decoded by a consumer: actions and preview frames both pass through their
codecs before anything downstream sees them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import env as envmod
from .actions import ActionChunk, ActionCodec
from .compressor import (
    CompressionSchedule,
    CompressorWeights,
    FeatureGrid,
    compress_frame,
    merge_patches,
    schedule_budget,
)
from .errors import GenerationFailed, LengthMismatch
from .stream import UnifiedOutput, VocabLayout
from .visual import VisualCodec, patchify_raw

# Transition-text vocabulary: phase labels the simulator can emit, mapped to
# small fixed ids (always below the visual band of any valid layout).
PHASES = ("idle", "reach", "grasp", "carry", "place")
PHASE_IDS = {name: i for i, name in enumerate(PHASES)}

BIN_SWAP = "bin_swap"
WAYPOINT_OFFSET = "waypoint_offset"
CORRUPTION_MODES = (BIN_SWAP, WAYPOINT_OFFSET)
DEFAULT_OFFSET = (0.5, 0.5)
SIGMA0 = 0.01


@dataclass(frozen=True)
class FrameFeatures:
    """Per-view base feature grids for one history frame."""

    grids: tuple[FeatureGrid, ...]


class FeatureExtractor:
    """Pluggable patch-feature extractor: image -> 16x16xC feature grid."""

    def __init__(self, channels: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.channels = channels
        self.projection = rng.normal(
            0.0, 1.0 / np.sqrt(768), size=(768, channels)
        ).astype(np.float32)

    def extract(self, image: np.ndarray) -> FeatureGrid:
        patches = patchify_raw(image).astype(np.float32) @ self.projection
        return FeatureGrid.from_array(patches.reshape(16, 16, self.channels))


@dataclass(frozen=True)
class GeneratorContext:
    """Everything a generator consumes for a single proposal."""

    frames: tuple[FrameFeatures, ...]  # compressed per-frame features, oldest first
    schedule: CompressionSchedule
    realized_tokens_per_view: int
    instruction: str
    temperature: float
    env_state: envmod.EnvState | None = None

    def __post_init__(self):
        if self.temperature < 1.0:
            raise ValueError("temperature must be >= 1.0")


@dataclass(frozen=True)
class GeneratorOutput:
    """One proposal: the unified token stream plus its codec decodes."""

    unified: UnifiedOutput
    decoded_chunk: ActionChunk
    decoded_previews: tuple[tuple[np.ndarray, ...], ...]  # [view][frame]
    phase: str


def assemble_context(
    history: list[FrameFeatures],
    schedule: CompressionSchedule,
    weights: CompressorWeights,
    instruction: str,
    temperature: float,
    env_state: envmod.EnvState | None = None,
) -> GeneratorContext:
    """Compress every history frame per its scheduled depth and account
    for the realized token budget, which must equal the schedule's."""
    if len(history) != schedule.horizon:
        raise LengthMismatch(
            f"history length {len(history)} != schedule horizon {schedule.horizon}"
        )
    compressed: list[FrameFeatures] = []
    realized = 0
    for frame, depth in zip(history, schedule.depths):
        grids = []
        for grid in frame.grids:
            out = merge_patches(compress_frame(grid, depth, weights), weights)
            grids.append(out)
        compressed.append(FrameFeatures(grids=tuple(grids)))
        realized += grids[0].height * grids[0].width
    expected = schedule_budget(
        schedule, (history[0].grids[0].height, history[0].grids[0].width)
    )
    if realized != expected:
        raise GenerationFailed(
            f"realized context tokens {realized} != scheduled budget {expected}"
        )
    return GeneratorContext(
        frames=tuple(compressed),
        schedule=schedule,
        realized_tokens_per_view=realized,
        instruction=instruction,
        temperature=temperature,
        env_state=env_state,
    )


@dataclass
class OracleGenerator:
    """Corruptible oracle implementation of the generator contract.

    Corruption is redrawn independently per call so resampling at a fixed
    state can escape failures; tau > 1 adds zero-mean jitter of scale
    sigma0 * (tau - 1) to the continuous action dims.
    """

    action_codec: ActionCodec
    visual_codec: VisualCodec
    views: tuple[str, ...]
    horizon: int
    corruption_rate: float = 0.0
    corruption_mode: str = BIN_SWAP
    sigma0: float = SIGMA0
    seed: int = 0
    rng: np.random.Generator = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ValueError("corruption rate must be in [0, 1]")
        if self.corruption_mode not in CORRUPTION_MODES:
            raise ValueError(f"unknown corruption mode {self.corruption_mode!r}")
        self.rng = np.random.default_rng(self.seed)

    def generate(self, ctx: GeneratorContext) -> GeneratorOutput:
        state = ctx.env_state
        if state is None:
            raise GenerationFailed("oracle generator needs a live env state")

        corrupted = bool(self.rng.random() < self.corruption_rate)
        swap = corrupted and self.corruption_mode == BIN_SWAP
        offset = (
            DEFAULT_OFFSET
            if corrupted and self.corruption_mode == WAYPOINT_OFFSET
            else (0.0, 0.0)
        )
        plan, _, phase = envmod.greedy_plan(
            state, self.horizon, swap_bins=swap, waypoint_offset=offset
        )
        chunk = np.stack([envmod.action_to_vector(a) for a in plan])
        if ctx.temperature > 1.0:
            jitter = self.rng.normal(
                0.0, self.sigma0 * (ctx.temperature - 1.0), size=(self.horizon, 2)
            )
            chunk[:, :2] = np.clip(
                chunk[:, :2] + jitter, -envmod.MAX_STEP, envmod.MAX_STEP
            )

        tokens = self.action_codec.encode(ActionChunk(chunk))
        decoded_chunk = self.action_codec.decode(tokens)

        current = state
        future: list[envmod.EnvState] = []
        for row in decoded_chunk.values:
            current = envmod.step(current, envmod.vector_to_action(row))
            future.append(current)

        visual_grid: list[tuple[tuple[int, ...], ...]] = []
        previews: list[tuple[np.ndarray, ...]] = []
        for view in self.views:
            codes_per_frame = []
            images = []
            for s in future:
                codes = self.visual_codec.encode(envmod.render(s, view))
                codes_per_frame.append(tuple(int(c) for c in codes))
                images.append(self.visual_codec.decode(np.asarray(codes)))
            visual_grid.append(tuple(codes_per_frame))
            previews.append(tuple(images))

        unified = UnifiedOutput(
            transition_text_ids=(PHASE_IDS[phase],),
            action_tokens=tuple(tokens),
            visual_tokens=tuple(visual_grid),
        )
        return GeneratorOutput(
            unified=unified,
            decoded_chunk=decoded_chunk,
            decoded_previews=tuple(previews),
            phase=phase,
        )


def serialize_proposal(
    out: GeneratorOutput, layout: VocabLayout, views: int, horizon: int
) -> list[int]:
    from .stream import serialize_output

    return serialize_output(out.unified, layout, views, horizon)
