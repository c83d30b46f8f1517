"""Tiered temporal compression of frame histories into a fixed token budget.

A history of T frames is assigned per-frame compression depths (deeper for
older frames). Each depth applies that many stride-2 conv+GeLU stages, and a
final fixed 2x2 patch merge always halves the grid once more, so a frame at
depth k contributes (rows / 2^(k+1)) * (cols / 2^(k+1)) tokens.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import AllocationMismatch, IndivisibleGrid, WeightShapeMismatch

MAX_DEPTH = 2

WEIGHTS_MAGIC = b"FVCW"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class FeatureGrid:
    """A rows x cols x channels grid of real-valued features."""

    height: int
    width: int
    channels: int
    data: np.ndarray  # shape (height, width, channels)

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("grid dimensions must be >= 1")
        if self.data.shape != (self.height, self.width, self.channels):
            raise ValueError(
                f"data shape {self.data.shape} does not match "
                f"({self.height}, {self.width}, {self.channels})"
            )

    @staticmethod
    def from_array(data: np.ndarray) -> "FeatureGrid":
        h, w, c = data.shape
        return FeatureGrid(h, w, c, np.asarray(data, dtype=np.float32))


@dataclass(frozen=True)
class CompressionSchedule:
    """Per-frame compression depths, oldest frame first."""

    horizon: int
    depths: tuple[int, ...]
    allocation: tuple[int, int, int]  # (N2, N1, N0)

    def __post_init__(self):
        if len(self.depths) != self.horizon:
            raise ValueError("depths must have one entry per frame")
        if any(a < b for a, b in zip(self.depths, self.depths[1:])):
            raise ValueError("depths must be non-increasing oldest to newest")


def make_schedule(T: int, allocation: tuple[int, int, int]) -> CompressionSchedule:
    """Assign depth 2 to the N2 oldest frames, then depth 1, then depth 0."""
    n2, n1, n0 = allocation
    if min(n2, n1, n0) < 0 or n2 + n1 + n0 != T:
        raise AllocationMismatch(
            f"allocation {allocation} does not sum to T={T}"
        )
    depths = (2,) * n2 + (1,) * n1 + (0,) * n0
    return CompressionSchedule(horizon=T, depths=depths, allocation=(n2, n1, n0))


def tokens_per_frame(depth: int, base_grid: tuple[int, int]) -> int:
    """Tokens contributed by one frame at the given depth (merge included)."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    rows, cols = base_grid
    factor = 2 ** (depth + 1)
    if rows % factor or cols % factor:
        raise IndivisibleGrid(
            f"grid {rows}x{cols} not divisible by {factor} at depth {depth}"
        )
    return (rows // factor) * (cols // factor)


def schedule_budget(schedule: CompressionSchedule, base_grid: tuple[int, int]) -> int:
    """Total tokens per view for a full history under this schedule."""
    return sum(tokens_per_frame(d, base_grid) for d in schedule.depths)


def enumerate_allocations(
    T: int, budget: int, base_grid: tuple[int, int] = (16, 16)
) -> list[tuple[int, int, int]]:
    """All (N2, N1, N0) summing to T whose budget fits, largest budget first."""
    if T < 1:
        raise ValueError("T must be >= 1")
    out = []
    for n2 in range(T + 1):
        for n1 in range(T - n2 + 1):
            n0 = T - n2 - n1
            alloc = (n2, n1, n0)
            cost = schedule_budget(make_schedule(T, alloc), base_grid)
            if cost <= budget:
                out.append((cost, alloc))
    out.sort(key=lambda item: (-item[0], item[1]))
    return [alloc for _, alloc in out]


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximation GeLU."""
    x = np.asarray(x)
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


@dataclass(frozen=True)
class CompressorWeights:
    """Stage conv kernels/biases plus the 2x2 merger projection.

    Stage k kernel has shape (channels, channels, 2, 2) and is applied with
    stride 2 (non-overlapping), so each stage exactly halves the grid.
    The merger maps concatenated 2x2 blocks (4*channels) to merged_dim.
    """

    channels: int
    merged_dim: int
    kernels: tuple[np.ndarray, ...]  # each (C, C, 2, 2)
    biases: tuple[np.ndarray, ...]  # each (C,)
    merger: np.ndarray  # (merged_dim, 4*C)

    @property
    def max_depth(self) -> int:
        return len(self.kernels)

    def __post_init__(self):
        c = self.channels
        if len(self.kernels) != len(self.biases):
            raise WeightShapeMismatch("kernel/bias stage counts differ")
        for k, b in zip(self.kernels, self.biases):
            if k.shape != (c, c, 2, 2) or b.shape != (c,):
                raise WeightShapeMismatch(
                    f"stage shapes {k.shape}/{b.shape} inconsistent with channels={c}"
                )
        if self.merger.shape != (self.merged_dim, 4 * c):
            raise WeightShapeMismatch(
                f"merger shape {self.merger.shape} != ({self.merged_dim}, {4 * c})"
            )


def default_weights(
    channels: int = 32,
    merged_dim: int = 32,
    max_depth: int = MAX_DEPTH,
    seed: int = 0,
) -> CompressorWeights:
    """Seeded random init; token counts and shapes do not depend on values."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(4 * channels)
    kernels = tuple(
        rng.normal(0.0, scale, size=(channels, channels, 2, 2)).astype(np.float32)
        for _ in range(max_depth)
    )
    biases = tuple(np.zeros(channels, dtype=np.float32) for _ in range(max_depth))
    merger = rng.normal(0.0, scale, size=(merged_dim, 4 * channels)).astype(np.float32)
    return CompressorWeights(channels, merged_dim, kernels, biases, merger)


def _conv_stage(data: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    h, w, c = data.shape
    blocks = data.reshape(h // 2, 2, w // 2, 2, c)
    # out[o] = sum_{di,dj,c} kernel[o, c, di, dj] * block[di, dj, c]
    out = np.einsum("hiwjc,ocij->hwo", blocks, kernel, optimize=True) + bias
    return gelu(out)


def compress_frame(
    features: FeatureGrid, depth: int, weights: CompressorWeights
) -> FeatureGrid:
    """Apply `depth` stride-2 conv+GeLU stages; depth 0 is the identity."""
    if depth < 0 or depth > weights.max_depth:
        raise WeightShapeMismatch(
            f"depth {depth} outside the {weights.max_depth}-stage weight container"
        )
    if features.channels != weights.channels:
        raise WeightShapeMismatch(
            f"grid channels {features.channels} != weight channels {weights.channels}"
        )
    if features.height % (2**depth) or features.width % (2**depth):
        raise IndivisibleGrid(
            f"grid {features.height}x{features.width} not divisible by {2 ** depth}"
        )
    if depth == 0:
        return features
    data = features.data.astype(np.float32)
    for stage in range(depth):
        data = _conv_stage(data, weights.kernels[stage], weights.biases[stage])
    return FeatureGrid.from_array(data)


def merge_patches(features: FeatureGrid, weights: CompressorWeights) -> FeatureGrid:
    """Concatenate each 2x2 block's channels and project to merged_dim."""
    h, w, c = features.height, features.width, features.channels
    if h % 2 or w % 2:
        raise IndivisibleGrid(f"grid {h}x{w} has odd dimensions")
    if c != weights.channels:
        raise WeightShapeMismatch(
            f"grid channels {c} != weight channels {weights.channels}"
        )
    blocks = features.data.reshape(h // 2, 2, w // 2, 2, c)
    # Block order (0,0), (0,1), (1,0), (1,1), channels fastest.
    flat = blocks.transpose(0, 2, 1, 3, 4).reshape(h // 2, w // 2, 4 * c)
    out = flat @ weights.merger.T
    return FeatureGrid.from_array(out.astype(np.float32))


def save_weights(weights: CompressorWeights, path) -> None:
    """Flat little-endian f32 file with an FVCW header."""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(
            struct.pack(
                "<IIII",
                WEIGHTS_VERSION,
                weights.max_depth,
                weights.channels,
                weights.merged_dim,
            )
        )
        for kernel, bias in zip(weights.kernels, weights.biases):
            f.write(kernel.astype("<f4").tobytes())
            f.write(bias.astype("<f4").tobytes())
        f.write(weights.merger.astype("<f4").tobytes())


def load_weights(path) -> CompressorWeights:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != WEIGHTS_MAGIC:
        raise WeightShapeMismatch("bad magic: not a compressor weight file")
    version, max_depth, channels, merged_dim = struct.unpack("<IIII", blob[4:20])
    if version != WEIGHTS_VERSION:
        raise WeightShapeMismatch(f"unsupported weight file version {version}")
    offset = 20
    kernels = []
    biases = []
    ksize = channels * channels * 4
    for _ in range(max_depth):
        k = np.frombuffer(blob, dtype="<f4", count=ksize, offset=offset)
        offset += ksize * 4
        b = np.frombuffer(blob, dtype="<f4", count=channels, offset=offset)
        offset += channels * 4
        kernels.append(k.reshape(channels, channels, 2, 2).copy())
        biases.append(b.copy())
    msize = merged_dim * 4 * channels
    merger = np.frombuffer(blob, dtype="<f4", count=msize, offset=offset)
    offset += msize * 4
    if offset != len(blob):
        raise WeightShapeMismatch("trailing bytes in weight file")
    return CompressorWeights(
        channels,
        merged_dim,
        tuple(kernels),
        tuple(biases),
        merger.reshape(merged_dim, 4 * channels).copy(),
    )
