"""Deterministic 2-D tabletop sorting simulator.

Two object classes (tableware, waste) must be carried to their matching bin
at opposite corners of the unit workspace. States are immutable values;
reset/step/render are pure, so every trace is reproducible byte-for-byte
from its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import UnknownView

WORKSPACE = 1.0
MAX_STEP = 0.2  # per-step Euclidean motion cap, also the per-axis bound
ATTACH_RADIUS = 0.04
OBJECT_RADIUS = 0.035
GRIPPER_RADIUS = 0.022

TABLEWARE = "tableware"
WASTE = "waste"
CLASSES = (TABLEWARE, WASTE)

# Bin rectangles (x_lo, y_lo, x_hi, y_hi) at opposite corners, inset from the
# walls so legal trajectories keep clear of the workspace margin.
BINS = {
    TABLEWARE: (0.05, 0.05, 0.25, 0.25),
    WASTE: (0.75, 0.75, 0.95, 0.95),
}

PLACE_MARGIN = 0.08  # objects and the gripper spawn inside this margin
BIN_CLEARANCE = 0.05  # objects never spawn within this distance of a bin
MIN_SEPARATION = 0.12

OPEN, CLOSE, HOLD = "open", "close", "hold"

IMAGE_SIZE = 256
VIEWS = ("top", "side", "oblique")

# 8-bit palette; hues are chosen to be mutually distant so blob detection on
# decoded previews is unambiguous.
PALETTE = {
    "background": (38, 38, 38),
    "bin_tableware": (235, 235, 235),
    "bin_waste": (115, 70, 31),
    "obj_tableware": (51, 102, 255),
    "obj_waste": (255, 140, 26),
    "gripper_open": (26, 230, 51),
    "gripper_closed": (230, 26, 230),
}


def palette_rgb(name: str) -> np.ndarray:
    return np.array(PALETTE[name], dtype=np.float32) / 255.0


@dataclass(frozen=True)
class ObjectState:
    oid: int
    cls: str
    pos: tuple[float, float]


@dataclass(frozen=True)
class EnvState:
    gripper: tuple[float, float]
    grip_closed: bool
    held_object: int | None
    objects: tuple[ObjectState, ...]
    step_count: int
    rng_seed: int


@dataclass(frozen=True)
class EnvAction:
    dx: float
    dy: float
    grip: str  # open | close | hold

    def __post_init__(self):
        if self.grip not in (OPEN, CLOSE, HOLD):
            raise ValueError(f"bad grip command {self.grip!r}")


def action_to_vector(action: EnvAction) -> np.ndarray:
    g = {CLOSE: 1.0, OPEN: -1.0, HOLD: 0.0}[action.grip]
    return np.array([action.dx, action.dy, g], dtype=np.float64)


def vector_to_action(vec: np.ndarray) -> EnvAction:
    dx = float(np.clip(vec[0], -MAX_STEP, MAX_STEP))
    dy = float(np.clip(vec[1], -MAX_STEP, MAX_STEP))
    g = float(vec[2])
    grip = CLOSE if g > 0.5 else OPEN if g < -0.5 else HOLD
    return EnvAction(dx, dy, grip)


def bin_center(cls: str) -> tuple[float, float]:
    x0, y0, x1, y1 = BINS[cls]
    return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)


def in_bin(pos: tuple[float, float], cls: str) -> bool:
    x0, y0, x1, y1 = BINS[cls]
    return x0 <= pos[0] <= x1 and y0 <= pos[1] <= y1


def _near_any_bin(pos: tuple[float, float], clearance: float) -> bool:
    for x0, y0, x1, y1 in BINS.values():
        if (x0 - clearance) <= pos[0] <= (x1 + clearance) and (
            y0 - clearance
        ) <= pos[1] <= (y1 + clearance):
            return True
    return False


def reset(seed: int, n_objects: int) -> EnvState:
    """Seeded placement of gripper and objects; rejection-sampled so nothing
    spawns inside or touching a bin and items keep a minimum separation."""
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    rng = np.random.default_rng(seed)

    def sample_point(taken: list[tuple[float, float]]) -> tuple[float, float]:
        for _ in range(10_000):
            x = float(rng.uniform(PLACE_MARGIN, WORKSPACE - PLACE_MARGIN))
            y = float(rng.uniform(PLACE_MARGIN, WORKSPACE - PLACE_MARGIN))
            if _near_any_bin((x, y), BIN_CLEARANCE):
                continue
            if any(math.dist((x, y), p) < MIN_SEPARATION for p in taken):
                continue
            return (x, y)
        raise RuntimeError("placement rejection sampling failed")

    taken: list[tuple[float, float]] = []
    gripper = sample_point(taken)
    taken.append(gripper)
    objects = []
    for oid in range(n_objects):
        pos = sample_point(taken)
        taken.append(pos)
        cls = CLASSES[int(rng.integers(0, 2))]
        objects.append(ObjectState(oid=oid, cls=cls, pos=pos))
    return EnvState(
        gripper=gripper,
        grip_closed=False,
        held_object=None,
        objects=tuple(objects),
        step_count=0,
        rng_seed=seed,
    )


def step(state: EnvState, action: EnvAction) -> EnvState:
    """Kinematic update: bounded motion, attach on close, deposit on open."""
    dx = min(max(action.dx, -MAX_STEP), MAX_STEP)
    dy = min(max(action.dy, -MAX_STEP), MAX_STEP)
    gx = min(max(state.gripper[0] + dx, 0.0), WORKSPACE)
    gy = min(max(state.gripper[1] + dy, 0.0), WORKSPACE)
    gripper = (gx, gy)

    held = state.held_object
    objects = list(state.objects)
    if held is not None:
        objects[held] = replace(objects[held], pos=gripper)

    grip_closed = state.grip_closed
    if action.grip == CLOSE:
        grip_closed = True
        if held is None:
            best = None
            best_d = ATTACH_RADIUS
            for obj in objects:
                d = math.dist(gripper, obj.pos)
                if d < best_d:
                    best, best_d = obj.oid, d
            if best is not None:
                held = best
                objects[held] = replace(objects[held], pos=gripper)
    elif action.grip == OPEN:
        grip_closed = False
        held = None

    return EnvState(
        gripper=gripper,
        grip_closed=grip_closed,
        held_object=held,
        objects=tuple(objects),
        step_count=state.step_count + 1,
        rng_seed=state.rng_seed,
    )


def success(state: EnvState) -> bool:
    """True iff every object rests (not held) in its class-matching bin."""
    for obj in state.objects:
        if obj.oid == state.held_object:
            return False
        if not in_bin(obj.pos, obj.cls):
            return False
    return True


def pending_objects(state: EnvState) -> list[ObjectState]:
    return [
        o
        for o in state.objects
        if o.oid == state.held_object or not in_bin(o.pos, o.cls)
    ]


# --- planning ---


def _step_toward(src: tuple[float, float], dst: tuple[float, float]) -> tuple[float, float]:
    d = math.dist(src, dst)
    if d <= MAX_STEP:
        return (dst[0] - src[0], dst[1] - src[1])
    scale = MAX_STEP / d
    return ((dst[0] - src[0]) * scale, (dst[1] - src[1]) * scale)


def plan_step(
    state: EnvState,
    swap_bins: bool = False,
    waypoint_offset: tuple[float, float] = (0.0, 0.0),
) -> tuple[EnvAction, str]:
    """One greedy action toward clearing the workspace, with its phase label.

    swap_bins targets the wrong bin for the current object; waypoint_offset
    shifts every waypoint. Both model corrupted proposals.
    """

    def shift(p: tuple[float, float]) -> tuple[float, float]:
        return (
            min(max(p[0] + waypoint_offset[0], 0.0), WORKSPACE),
            min(max(p[1] + waypoint_offset[1], 0.0), WORKSPACE),
        )

    if success(state):
        return EnvAction(0.0, 0.0, HOLD), "idle"

    if state.held_object is not None:
        cls = state.objects[state.held_object].cls
        if swap_bins:
            cls = WASTE if cls == TABLEWARE else TABLEWARE
        target = shift(bin_center(cls))
        if math.dist(state.gripper, target) < 1e-9:
            return EnvAction(0.0, 0.0, OPEN), "place"
        dx, dy = _step_toward(state.gripper, target)
        return EnvAction(dx, dy, HOLD), "carry"

    pend = [o for o in state.objects if not in_bin(o.pos, o.cls)]
    if not pend:
        return EnvAction(0.0, 0.0, HOLD), "idle"
    nearest = min(pend, key=lambda o: (math.dist(state.gripper, o.pos), o.oid))
    target = shift(nearest.pos)
    if math.dist(state.gripper, target) < 1e-9:
        return EnvAction(0.0, 0.0, CLOSE), "grasp"
    dx, dy = _step_toward(state.gripper, target)
    return EnvAction(dx, dy, HOLD), "reach"


def greedy_plan(
    state: EnvState,
    horizon: int,
    swap_bins: bool = False,
    waypoint_offset: tuple[float, float] = (0.0, 0.0),
) -> tuple[list[EnvAction], list[EnvState], str]:
    """Roll the greedy policy forward for `horizon` steps.

    Returns the actions, the exact future states produced by replaying them
    through step(), and the phase label of the first action.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    actions: list[EnvAction] = []
    states: list[EnvState] = []
    current = state
    first_phase = None
    for _ in range(horizon):
        action, phase = plan_step(current, swap_bins, waypoint_offset)
        if first_phase is None:
            first_phase = phase
        current = step(current, action)
        actions.append(action)
        states.append(current)
    return actions, states, first_phase or "idle"


def oracle_chunk(state: EnvState, horizon: int) -> tuple[np.ndarray, list[EnvState]]:
    """Ground-truth chunk: greedy waypoint plan discretized to bounded steps.

    The returned future states are exactly the states produced by replaying
    the chunk via step().
    """
    actions, states, _ = greedy_plan(state, horizon)
    chunk = np.stack([action_to_vector(a) for a in actions])
    return chunk, states


# --- rendering ---

_STATIC_CACHE: dict[str, np.ndarray] = {}


def _paint_disc(img: np.ndarray, cx: float, cy: float, radius: float, color: np.ndarray) -> None:
    size = img.shape[0]
    col = cx * (size - 1)
    row = (1.0 - cy) * (size - 1)
    r_px = radius * (size - 1)
    lo_r = max(int(row - r_px) - 1, 0)
    hi_r = min(int(row + r_px) + 2, size)
    lo_c = max(int(col - r_px) - 1, 0)
    hi_c = min(int(col + r_px) + 2, size)
    if lo_r >= hi_r or lo_c >= hi_c:
        return
    rr = np.arange(lo_r, hi_r, dtype=np.float32)[:, None]
    cc = np.arange(lo_c, hi_c, dtype=np.float32)[None, :]
    mask = (rr - row) ** 2 + (cc - col) ** 2 <= r_px**2
    img[lo_r:hi_r, lo_c:hi_c][mask] = color


def _paint_rect(img: np.ndarray, rect: tuple[float, float, float, float], color: np.ndarray) -> None:
    size = img.shape[0]
    x0, y0, x1, y1 = rect
    c0 = int(round(x0 * (size - 1)))
    c1 = int(round(x1 * (size - 1)))
    r0 = int(round((1.0 - y1) * (size - 1)))
    r1 = int(round((1.0 - y0) * (size - 1)))
    img[max(r0, 0) : min(r1 + 1, size), max(c0, 0) : min(c1 + 1, size)] = color


def _static_layer(view: str) -> np.ndarray:
    cached = _STATIC_CACHE.get(view)
    if cached is None:
        img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
        img[:] = palette_rgb("background")
        if view == "side":
            img[int(IMAGE_SIZE * 0.82) :, :] = palette_rgb("background") * 1.4
        for cls, name in ((TABLEWARE, "bin_tableware"), (WASTE, "bin_waste")):
            rect = BINS[cls]
            if view == "side":
                x0, y0, x1, y1 = rect
                rect = (x0, 0.12, x1, 0.18)
            elif view == "oblique":
                rect = _oblique_rect(rect)
            _paint_rect(img, rect, palette_rgb(name))
        cached = img
        _STATIC_CACHE[view] = cached
    return cached.copy()


def _oblique_point(p: tuple[float, float]) -> tuple[float, float]:
    # 45-degree rotation about the workspace centre, shrunk to stay inside.
    cx, cy = p[0] - 0.5, p[1] - 0.5
    s = math.sqrt(0.5) * 0.95
    return (0.5 + (cx - cy) * s, 0.5 + (cx + cy) * s)


def _oblique_rect(rect: tuple[float, float, float, float]) -> tuple[float, float, float, float]:
    x0, y0, x1, y1 = rect
    corners = [_oblique_point(p) for p in ((x0, y0), (x0, y1), (x1, y0), (x1, y1))]
    xs = [c[0] for c in corners]
    ys = [c[1] for c in corners]
    return (min(xs), min(ys), max(xs), max(ys))


def render(state: EnvState, view: str = "top") -> np.ndarray:
    """256x256x3 rasterization in [0, 1]; same state -> identical pixels."""
    if view not in VIEWS:
        raise UnknownView(f"view {view!r} not in {VIEWS}")
    img = _static_layer(view)

    def project(p: tuple[float, float]) -> tuple[float, float]:
        if view == "top":
            return p
        if view == "oblique":
            return _oblique_point(p)
        # side: x stays, height plays the vertical role (objects on the
        # table line, the gripper floats with its y coordinate as depth cue)
        return (p[0], 0.2)

    order = sorted(state.objects, key=lambda o: -o.pos[1])
    for obj in order:
        px, py = project(obj.pos)
        color = palette_rgb("obj_tableware" if obj.cls == TABLEWARE else "obj_waste")
        _paint_disc(img, px, py, OBJECT_RADIUS, color)
    gx, gy = state.gripper
    if view == "side":
        gpos = (gx, 0.30 + 0.35 * gy)
    else:
        gpos = project((gx, gy))
    color = palette_rgb("gripper_closed" if state.grip_closed else "gripper_open")
    _paint_disc(img, gpos[0], gpos[1], GRIPPER_RADIUS, color)
    return img
