"""Episode storage and sliding-window training-sample construction.

Episodes live in line-delimited JSON with frame pixels in sidecar PNG files.
Windowing anchors one sample at every timestep: the input window ends at the
anchor (first-frame replication below zero) and the target window starts one
step later (last-frame replication and zero-motion actions past the end).
actions[i] is the action that led to frame i, so row 0 is always zero motion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .actions import ActionChunk
from .bundle import ModelBundle
from .compressor import CompressionSchedule
from .errors import MissingFrameFile, SchemaError
from .stream import UnifiedOutput, serialize_output
from . import env as envmod

VIEW_NAMES = envmod.VIEWS


def save_png(path, image: np.ndarray) -> None:
    data = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    PILImage.fromarray(data).save(path)


def load_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFrameFile(str(path))
    with PILImage.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


@dataclass(frozen=True)
class EpisodeRecord:
    episode_id: str
    instruction: str
    views: int
    length: int
    frame_dir: str
    actions: np.ndarray  # (length, D_a)

    def frame_path(self, t: int, view: int) -> Path:
        return Path(self.frame_dir) / f"{self.episode_id}_t{t:04d}_v{view}.png"


@dataclass(frozen=True)
class FrameRef:
    path: str
    pad: bool


@dataclass(frozen=True)
class WindowSample:
    episode_id: str
    anchor: int
    instruction: str
    input_frames: tuple[tuple[FrameRef, ...], ...]  # T groups of V refs
    target_action_chunk: ActionChunk
    target_future_frames: tuple[tuple[FrameRef, ...], ...]  # H_a groups of V refs


def write_episodes(records: list[EpisodeRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(
                json.dumps(
                    {
                        "episode_id": rec.episode_id,
                        "instruction": rec.instruction,
                        "views": rec.views,
                        "length": rec.length,
                        "frame_dir": rec.frame_dir,
                        "actions": [[float(v) for v in row] for row in rec.actions],
                    }
                )
                + "\n"
            )


_REQUIRED = ("episode_id", "instruction", "views", "length", "frame_dir", "actions")


def load_episodes(path, check_frames: bool = True) -> list[EpisodeRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"invalid JSON: {e}", lineno) from e
            for key in _REQUIRED:
                if key not in payload:
                    raise SchemaError(f"missing field {key!r}", lineno)
            actions = np.asarray(payload["actions"], dtype=np.float64)
            if actions.ndim != 2 or actions.shape[0] != payload["length"]:
                raise SchemaError(
                    f"actions shape {actions.shape} misaligned with length "
                    f"{payload['length']}",
                    lineno,
                )
            if payload["length"] < 1:
                raise SchemaError("length must be >= 1", lineno)
            rec = EpisodeRecord(
                episode_id=str(payload["episode_id"]),
                instruction=str(payload["instruction"]),
                views=int(payload["views"]),
                length=int(payload["length"]),
                frame_dir=str(payload["frame_dir"]),
                actions=actions,
            )
            if check_frames:
                for t in (0, rec.length - 1):
                    for v in range(rec.views):
                        p = rec.frame_path(t, v)
                        if not p.exists():
                            raise MissingFrameFile(str(p))
            records.append(rec)
    return records


def dump_episode(
    episode_id: str,
    states: list[envmod.EnvState],
    actions: list[np.ndarray],
    frame_dir,
    views: tuple[str, ...] = ("top", "side"),
    instruction: str = "sort tableware into the white bin and waste into the brown basket",
) -> EpisodeRecord:
    """Render and persist one simulator trace as an episode record."""
    frame_dir = Path(frame_dir)
    frame_dir.mkdir(parents=True, exist_ok=True)
    for t, state in enumerate(states):
        for v, view in enumerate(views):
            save_png(frame_dir / f"{episode_id}_t{t:04d}_v{v}.png", envmod.render(state, view))
    return EpisodeRecord(
        episode_id=episode_id,
        instruction=instruction,
        views=len(views),
        length=len(states),
        frame_dir=str(frame_dir),
        actions=np.stack([np.asarray(a, dtype=np.float64) for a in actions]),
    )


def window_samples(
    ep: EpisodeRecord, T: int = 16, H_a: int = 16, stride: int = 1
) -> list[WindowSample]:
    """One sample per anchor t: inputs cover [t-T+1, t], targets [t+1, t+H_a]."""
    dims = ep.actions.shape[1]
    samples = []
    for t in range(0, ep.length, stride):
        inputs = []
        for j in range(t - T + 1, t + 1):
            idx = max(j, 0)
            pad = j < 0
            inputs.append(
                tuple(FrameRef(str(ep.frame_path(idx, v)), pad) for v in range(ep.views))
            )
        targets = []
        rows = []
        for j in range(t + 1, t + 1 + H_a):
            idx = min(j, ep.length - 1)
            pad = j >= ep.length
            targets.append(
                tuple(FrameRef(str(ep.frame_path(idx, v)), pad) for v in range(ep.views))
            )
            rows.append(np.zeros(dims) if pad else ep.actions[j])
        samples.append(
            WindowSample(
                episode_id=ep.episode_id,
                anchor=t,
                instruction=ep.instruction,
                input_frames=tuple(inputs),
                target_action_chunk=ActionChunk(np.stack(rows)),
                target_future_frames=tuple(targets),
            )
        )
    return samples


def build_training_record(
    sample: WindowSample,
    bundle: ModelBundle,
    schedule: CompressionSchedule,
) -> tuple[list[int], dict]:
    """Label ids for one sample plus the lazy input-side sidecar.

    Labels are raw token ids (action codes then the V x H_a x 32 visual
    grid); the input side stores frame refs and scheduled depths so
    compression can run lazily at training time.
    """
    action_tokens = tuple(bundle.action_codec.encode(sample.target_action_chunk))
    views = len(sample.target_future_frames[0])
    visual: list[list[tuple[int, ...]]] = [[] for _ in range(views)]
    for group in sample.target_future_frames:
        for v, ref in enumerate(group):
            codes = bundle.visual.encode(load_png(ref.path))
            visual[v].append(tuple(int(c) for c in codes))
    unified = UnifiedOutput(
        transition_text_ids=(),
        action_tokens=action_tokens,
        visual_tokens=tuple(tuple(frames) for frames in visual),
    )
    horizon = len(sample.target_future_frames)
    ids = serialize_output(unified, bundle.layout, views, horizon)
    sidecar = {
        "episode_id": sample.episode_id,
        "anchor": sample.anchor,
        "instruction": sample.instruction,
        "depths": list(schedule.depths),
        "input_frames": [
            [{"path": ref.path, "pad": ref.pad} for ref in group]
            for group in sample.input_frames
        ],
    }
    return ids, sidecar
