"""Execution gating: verify proposals against their previews, execute the
approved prefix, and escalate sampling temperature on rejection.

The automatic verifier works purely on (codec-decoded) preview images via
color-blob analysis, so codec degradation is part of what it must tolerate.
A proposal is rejected outright when the final preview shows any object
deposited in the wrong bin, or when a held object moves away from or through
its destination; a margin violation at frame f truncates execution to f-1.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import env as envmod
from .compressor import CompressionSchedule, CompressorWeights, make_schedule
from .errors import DecisionTimeout, SessionClosed
from .policy import (
    FeatureExtractor,
    FrameFeatures,
    GeneratorContext,
    GeneratorOutput,
    OracleGenerator,
    assemble_context,
)

REASON_FULL = "approved_full"
REASON_PREFIX = "approved_prefix"
REASON_REJECTED = "rejected"


@dataclass(frozen=True)
class GateDecision:
    k: int
    reason: str
    detail: str = ""

    def __post_init__(self):
        if (self.k == 0) != (self.reason == REASON_REJECTED):
            raise ValueError("k == 0 exactly when the proposal is rejected")


@dataclass(frozen=True)
class GateConfig:
    tau0: float = 1.0
    gamma: float = 1.5
    tau_max: float = 4.0
    max_retries: int = 5
    k_max: int = 16
    verifier: str = "auto"  # auto | human | none

    def __post_init__(self):
        if self.gamma <= 1.0:
            raise ValueError("gamma must be > 1")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")


@dataclass
class EpisodeResult:
    success: bool
    env_steps: int
    proposals: int
    rejections: int
    resample_aborts: int
    decisions: list[GateDecision] = field(default_factory=list)


# --- automatic verifier ---

_DYNAMIC_CLASSES = ("obj_tableware", "obj_waste", "gripper_open", "gripper_closed")


@dataclass(frozen=True)
class GoalSpec:
    """What the verifier knows: destination bins, margins, and thresholds.

    Pixel-mass thresholds are counts at the analysis resolution
    (IMAGE_SIZE / downsample squared).
    """

    k_max: int
    view_index: int = 0
    downsample: int = 2
    margin: float = 0.02
    grip_min_mass: int = 4
    wrong_bin_mass: int = 12
    held_radius: float = 0.09
    held_min_mass: int = 4
    heading_tol: float = 0.12


@dataclass(frozen=True)
class FrameReading:
    gripper: tuple[float, float] | None
    gripper_closed: bool
    wrong_bin_mass: dict
    held_cls: str | None


def _reference_colors() -> np.ndarray:
    names = list(_DYNAMIC_CLASSES) + ["background", "bin_tableware", "bin_waste"]
    return np.stack([envmod.palette_rgb(n) for n in names]), names


def read_frame(image: np.ndarray, goal: GoalSpec) -> FrameReading:
    """Blob extraction by nearest-palette-color classification."""
    ds = goal.downsample
    img = image[::ds, ::ds]
    size = img.shape[0]
    refs, names = _reference_colors()
    dist = ((img[:, :, None, :] - refs[None, None, :, :]) ** 2).sum(axis=3)
    labels = dist.argmin(axis=2)

    masks = {name: labels == i for i, name in enumerate(names)}
    rows = np.arange(size, dtype=np.float64)[:, None]
    cols = np.arange(size, dtype=np.float64)[None, :]

    def centroid(mask: np.ndarray) -> tuple[float, float] | None:
        m = mask.sum()
        if m == 0:
            return None
        r = float((rows * mask).sum() / m)
        c = float((cols * mask).sum() / m)
        return (c / (size - 1), 1.0 - r / (size - 1))

    open_mass = int(masks["gripper_open"].sum())
    closed_mass = int(masks["gripper_closed"].sum())
    grip_mask = masks["gripper_open"] | masks["gripper_closed"]
    gripper = centroid(grip_mask) if (open_mass + closed_mass) >= goal.grip_min_mass else None
    gripper_closed = closed_mass > open_mass

    wrong_bin = {}
    for cls, mask_name in ((envmod.TABLEWARE, "obj_tableware"), (envmod.WASTE, "obj_waste")):
        other = envmod.WASTE if cls == envmod.TABLEWARE else envmod.TABLEWARE
        x0, y0, x1, y1 = envmod.BINS[other]
        r0 = int((1.0 - y1) * (size - 1))
        r1 = int((1.0 - y0) * (size - 1)) + 1
        c0 = int(x0 * (size - 1))
        c1 = int(x1 * (size - 1)) + 1
        wrong_bin[cls] = int(masks[mask_name][max(r0, 0) : r1, max(c0, 0) : c1].sum())

    held_cls = None
    if gripper is not None and gripper_closed:
        gx, gy = gripper
        r_px = goal.held_radius * (size - 1)
        grow = (1.0 - gy) * (size - 1)
        gcol = gx * (size - 1)
        near = ((rows - grow) ** 2 + (cols - gcol) ** 2) <= r_px**2
        best_mass = goal.held_min_mass - 1
        for cls, mask_name in (
            (envmod.TABLEWARE, "obj_tableware"),
            (envmod.WASTE, "obj_waste"),
        ):
            m = int((masks[mask_name] & near).sum())
            if m > best_mass:
                best_mass = m
                held_cls = cls
    return FrameReading(
        gripper=gripper,
        gripper_closed=gripper_closed,
        wrong_bin_mass=wrong_bin,
        held_cls=held_cls,
    )


def auto_verify(previews, goal: GoalSpec) -> GateDecision:
    """Choose an execution horizon from the per-frame preview analysis.

    previews: per-view tuples of H_a images (codec-decoded in the live loop).
    """
    frames = previews[goal.view_index]
    readings = []
    for i, image in enumerate(frames, start=1):
        reading = read_frame(image, goal)
        if reading.gripper is None:
            return GateDecision(
                0, REASON_REJECTED, f"gripper blob missing in frame {i}"
            )
        readings.append(reading)

    # Wrong deposit visible at the end of the window: reject outright.
    final = readings[-1]
    for cls, mass in final.wrong_bin_mass.items():
        if mass >= goal.wrong_bin_mass:
            return GateDecision(
                0, REASON_REJECTED, f"{cls} mass {mass} in the wrong bin"
            )

    # Held-object trajectory checks over contiguous held segments.
    segments: list[list[int]] = []
    for i, r in enumerate(readings):
        if r.held_cls is not None:
            if segments and segments[-1][-1] == i - 1 and readings[i - 1].held_cls == r.held_cls:
                segments[-1].append(i)
            else:
                segments.append([i])
    for seg in segments:
        cls = readings[seg[0]].held_cls
        center = envmod.bin_center(cls)
        d_first = math.dist(readings[seg[0]].gripper, center)
        d_last = math.dist(readings[seg[-1]].gripper, center)
        if d_last > d_first + goal.heading_tol:
            return GateDecision(
                0,
                REASON_REJECTED,
                f"held {cls} moving away from its bin "
                f"({d_first:.2f} -> {d_last:.2f})",
            )
        was_inside = False
        for i in seg:
            inside = envmod.in_bin(readings[i].gripper, cls)
            if was_inside and not inside:
                return GateDecision(
                    0, REASON_REJECTED, f"held {cls} carried through its bin"
                )
            was_inside = was_inside or inside

    # Frame-level workspace-margin constraint gives a safe prefix.
    lo, hi = goal.margin, 1.0 - goal.margin
    for i, r in enumerate(readings, start=1):
        gx, gy = r.gripper
        if not (lo <= gx <= hi and lo <= gy <= hi):
            if i == 1:
                return GateDecision(
                    0, REASON_REJECTED, "gripper outside margin in frame 1"
                )
            return GateDecision(
                min(i - 1, goal.k_max),
                REASON_PREFIX,
                f"gripper exits margin at frame {i}",
            )

    return GateDecision(min(len(frames), goal.k_max), REASON_FULL)


# --- the closed-loop state machine ---


@dataclass
class SessionConfig:
    n_objects: int = 3
    views: tuple[str, ...] = ("top",)
    history_len: int = 16
    allocation: tuple[int, int, int] = (8, 6, 2)
    horizon: int = 16
    max_env_steps: int = 80
    instruction: str = "clear the workspace into the matching bins"


class ClosedLoopSession:
    """One episode: env state, rolling frame history, and gate bookkeeping.

    After executing k steps the history window shifts: the k oldest frames
    drop off and the k newly observed frames append.
    """

    def __init__(
        self,
        env_seed: int,
        generator: OracleGenerator,
        gate: GateConfig,
        session: SessionConfig,
        compressor: CompressorWeights,
        extractor: FeatureExtractor | None = None,
        goal: GoalSpec | None = None,
    ):
        self.generator = generator
        self.gate = gate
        self.cfg = session
        self.compressor = compressor
        self.extractor = extractor or FeatureExtractor(channels=compressor.channels)
        self.goal = goal or GoalSpec(k_max=gate.k_max)
        self.schedule: CompressionSchedule = make_schedule(
            session.history_len, session.allocation
        )
        self.state = envmod.reset(env_seed, session.n_objects)
        self.tau = gate.tau0
        self.result = EpisodeResult(
            success=False, env_steps=0, proposals=0, rejections=0, resample_aborts=0
        )
        self._consecutive_rejects = 0
        first = self._observe(self.state)
        self.history: deque[FrameFeatures] = deque(
            [first] * session.history_len, maxlen=session.history_len
        )
        self.current_images = tuple(
            envmod.render(self.state, v) for v in session.views
        )

    def _observe(self, state: envmod.EnvState) -> FrameFeatures:
        grids = tuple(
            self.extractor.extract(envmod.render(state, v)) for v in self.cfg.views
        )
        return FrameFeatures(grids=grids)

    def _decide(self, output: GeneratorOutput) -> GateDecision:
        if self.gate.verifier == "none":
            return GateDecision(self.gate.k_max, REASON_FULL, "autonomous")
        if self.gate.verifier == "auto":
            return auto_verify(output.decoded_previews, self.goal)
        raise ValueError(f"no builtin verifier {self.gate.verifier!r}")

    def gate_step(self, decide=None) -> GateDecision:
        """One generate call; execute the approved prefix or escalate tau."""
        ctx = assemble_context(
            list(self.history),
            self.schedule,
            self.compressor,
            self.cfg.instruction,
            self.tau,
            env_state=self.state,
        )
        output = self.generator.generate(ctx)
        decision = (decide or self._decide)(output)
        self.result.proposals += 1
        self.result.decisions.append(decision)

        if decision.k == 0:
            self.result.rejections += 1
            self._consecutive_rejects += 1
            self.tau = min(self.gate.tau_max, self.gate.gamma * self.tau)
            return decision

        self._consecutive_rejects = 0
        self.tau = self.gate.tau0
        k = min(decision.k, self.gate.k_max, output.decoded_chunk.horizon)
        for row in output.decoded_chunk.values[:k]:
            self.state = envmod.step(self.state, envmod.vector_to_action(row))
            self.history.append(self._observe(self.state))
        self.result.env_steps += k
        self.current_images = tuple(
            envmod.render(self.state, v) for v in self.cfg.views
        )
        return decision

    @property
    def aborted(self) -> bool:
        return self._consecutive_rejects >= self.gate.max_retries

    def finished(self) -> bool:
        return (
            envmod.success(self.state)
            or self.result.env_steps >= self.cfg.max_env_steps
            or self.aborted
        )

    def run(self, decide=None, observer=None) -> EpisodeResult:
        while not self.finished():
            decision = self.gate_step(decide=decide)
            if observer is not None:
                observer(self, decision)
        if self.aborted:
            self.result.resample_aborts = 1
        self.result.success = envmod.success(self.state)
        return self.result


def run_closed_loop(
    env_seed: int,
    generator: OracleGenerator,
    gate: GateConfig,
    session: SessionConfig,
    compressor: CompressorWeights,
    extractor: FeatureExtractor | None = None,
    goal: GoalSpec | None = None,
    decide=None,
    observer=None,
) -> EpisodeResult:
    """Loop gate_step until success, step budget, or a rejection streak."""
    loop = ClosedLoopSession(
        env_seed, generator, gate, session, compressor, extractor, goal
    )
    return loop.run(decide=decide, observer=observer)


# --- human-in-the-loop session ---


class HumanSession:
    """Adapter giving run_closed_loop a human decision source over a
    transport with send(dict) / recv(timeout) -> dict | None / close().

    Out-of-range decisions get an error reply and the proposal stays
    outstanding; a timeout is a conservative reject.
    """

    def __init__(self, transport, k_max: int, timeout: float = 60.0):
        self.transport = transport
        self.k_max = k_max
        self.timeout = timeout
        self._proposal_counter = 0

    def decide(self, output: GeneratorOutput, payload: dict | None = None) -> GateDecision:
        self._proposal_counter += 1
        proposal_id = self._proposal_counter
        message = {
            "type": "proposal",
            "proposal_id": proposal_id,
            "k_max": self.k_max,
        }
        if payload:
            message.update(payload)
        self.transport.send(message)
        while True:
            try:
                reply = self.transport.recv(self.timeout)
            except DecisionTimeout:
                return GateDecision(0, REASON_REJECTED, "decision timeout")
            if reply is None:
                raise SessionClosed("operator connection closed")
            if reply.get("type") != "decision":
                self.transport.send(
                    {"type": "error", "message": f"unexpected message {reply.get('type')!r}"}
                )
                continue
            if reply.get("proposal_id") != proposal_id:
                self.transport.send(
                    {
                        "type": "error",
                        "message": f"stale proposal_id {reply.get('proposal_id')}",
                        "proposal_id": proposal_id,
                    }
                )
                continue
            k = reply.get("k")
            if not isinstance(k, int) or not 0 <= k <= self.k_max:
                self.transport.send(
                    {
                        "type": "error",
                        "message": f"decision k={k!r} outside [0, {self.k_max}]",
                        "proposal_id": proposal_id,
                    }
                )
                continue
            if k == 0:
                return GateDecision(0, REASON_REJECTED, "operator rejected")
            reason = REASON_FULL if k == self.k_max else REASON_PREFIX
            return GateDecision(k, reason, "operator approved")
