"""Spectral action tokenization.

A trajectory chunk (H_a steps x D_a dims) is normalized to [-1, 1], cosine
transformed along time, quantized to an integer alphabet, flattened in
frequency-major order, and compressed with integer BPE. Every stage after
quantization is exactly invertible, so reconstruction error is controlled
solely by the quantization step.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.fft

from .errors import (
    AlphabetTooLarge,
    LengthMismatch,
    MalformedTokens,
    Overflow,
)

ACTION_VOCAB = 2048
BPE_ALPHABET = 256
INT_LO = -128
INT_HI = 127
DEGENERATE_EPS = 1e-6


@dataclass(frozen=True)
class ActionChunk:
    """H_a x D_a matrix of continuous action values."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError("chunk must be a 2-D matrix with H_a >= 1")
        if not np.all(np.isfinite(v)):
            raise ValueError("chunk values must be finite")

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension (lo, hi) bounds mapping raw values onto [-1, 1]."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if self.lo.shape != self.hi.shape or self.lo.ndim != 1:
            raise ValueError("lo/hi must be 1-D and congruent")
        if np.any(self.lo >= self.hi):
            raise ValueError("lo must be < hi per dimension")

    @property
    def dims(self) -> int:
        return self.lo.shape[0]

    def normalize(self, chunk: ActionChunk) -> np.ndarray:
        if chunk.dims != self.dims:
            raise LengthMismatch(f"chunk dims {chunk.dims} != normalizer dims {self.dims}")
        span = self.hi - self.lo
        return 2.0 * (chunk.values - self.lo) / span - 1.0

    def denormalize(self, values: np.ndarray) -> ActionChunk:
        span = self.hi - self.lo
        return ActionChunk(self.lo + (values + 1.0) * span / 2.0)


def fit_normalizer(
    dataset: Iterable[ActionChunk], q_lo: float = 0.01, q_hi: float = 0.99
) -> Normalizer:
    """Empirical per-dimension quantile bounds; constant dims widened by eps."""
    stacked = [c.values for c in dataset]
    if not stacked:
        raise ValueError("dataset must be non-empty")
    values = np.concatenate(stacked, axis=0)
    lo = np.quantile(values, q_lo, axis=0)
    hi = np.quantile(values, q_hi, axis=0)
    degenerate = lo >= hi
    lo = np.where(degenerate, lo - DEGENERATE_EPS, lo)
    hi = np.where(degenerate, hi + DEGENERATE_EPS, hi)
    return Normalizer(lo, hi)


def dct_forward(values: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-II along time, per dimension."""
    return scipy.fft.dct(values, type=2, norm="ortho", axis=0)


def dct_inverse(coeffs: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-III along time (inverse of dct_forward)."""
    return scipy.fft.idct(coeffs, type=2, norm="ortho", axis=0)


def quantize(coeffs: np.ndarray, delta: float) -> np.ndarray:
    """Round half away from zero to multiples of delta; overflow is an error."""
    if delta <= 0:
        raise ValueError("delta must be > 0")
    scaled = coeffs / delta
    ints = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    if np.any(ints < INT_LO) or np.any(ints > INT_HI):
        worst = float(np.max(np.abs(coeffs)))
        raise Overflow(
            f"coefficient magnitude {worst:.4g} exceeds alphabet at delta={delta}"
        )
    return ints.astype(np.int64)


def dequantize(ints: np.ndarray, delta: float) -> np.ndarray:
    if delta <= 0:
        raise ValueError("delta must be > 0")
    return ints.astype(np.float64) * delta


def flatten_interleave(ints: np.ndarray) -> list[int]:
    """Frequency-major order: all dims' coefficient 0, then coefficient 1, ..."""
    return [int(v) for v in np.asarray(ints).reshape(-1)]


def unflatten_interleave(seq: Sequence[int], horizon: int, dims: int) -> np.ndarray:
    if len(seq) != horizon * dims:
        raise LengthMismatch(
            f"sequence length {len(seq)} != H_a*D_a = {horizon * dims}"
        )
    return np.asarray(seq, dtype=np.int64).reshape(horizon, dims)


@dataclass(frozen=True)
class BpeModel:
    """Integer BPE: base alphabet plus an ordered merge table.

    Merge i creates token id alphabet_size + i from the pair merges[i].
    """

    alphabet_size: int
    merges: tuple[tuple[int, int], ...]

    @property
    def vocab_size(self) -> int:
        return self.alphabet_size + len(self.merges)

    def __post_init__(self):
        for a, b in self.merges:
            if a < 0 or b < 0:
                raise ValueError("merge pair ids must be non-negative")

    def encode(self, seq: Sequence[int]) -> list[int]:
        """Apply merges in priority order (lowest merge index first)."""
        for s in seq:
            if not 0 <= s < self.alphabet_size:
                raise MalformedTokens(f"symbol {s} outside base alphabet")
        if len(seq) < 2:
            return list(seq)
        rank = {pair: i for i, pair in enumerate(self.merges)}
        ids = list(seq)
        nxt = list(range(1, len(ids))) + [-1]
        prv = [-1] + list(range(len(ids) - 1))
        alive = [True] * len(ids)

        heap: list[tuple[int, int]] = []
        for i in range(len(ids) - 1):
            r = rank.get((ids[i], ids[i + 1]))
            if r is not None:
                heapq.heappush(heap, (r, i))

        while heap:
            r, i = heapq.heappop(heap)
            if not alive[i]:
                continue
            j = nxt[i]
            if j == -1 or not alive[j]:
                continue
            if rank.get((ids[i], ids[j])) != r:
                continue  # stale entry
            ids[i] = self.alphabet_size + r
            alive[j] = False
            k = nxt[j]
            nxt[i] = k
            if k != -1:
                prv[k] = i
                nr = rank.get((ids[i], ids[k]))
                if nr is not None:
                    heapq.heappush(heap, (nr, i))
            p = prv[i]
            if p != -1 and alive[p]:
                nr = rank.get((ids[p], ids[i]))
                if nr is not None:
                    heapq.heappush(heap, (nr, p))
        return [ids[i] for i in range(len(ids)) if alive[i]]

    def decode(self, tokens: Sequence[int]) -> list[int]:
        """Expand merge tokens back to base symbols; exact inverse of encode."""
        out: list[int] = []
        stack: list[int] = []
        for t in tokens:
            stack.append(int(t))
            while stack:
                t = stack.pop()
                if t < 0 or t >= self.vocab_size:
                    raise MalformedTokens(f"token id {t} outside vocabulary")
                if t < self.alphabet_size:
                    out.append(t)
                else:
                    a, b = self.merges[t - self.alphabet_size]
                    stack.append(b)
                    stack.append(a)
        return out


def train_bpe(
    corpus: Sequence[Sequence[int]],
    target_vocab: int = ACTION_VOCAB,
    alphabet_size: int = BPE_ALPHABET,
) -> BpeModel:
    """Merge the most frequent adjacent pair until vocab==target or no repeats.

    Ties between equally frequent pairs break toward the lexicographically
    smallest pair so training is deterministic.
    """
    if alphabet_size > target_vocab:
        raise AlphabetTooLarge(
            f"alphabet {alphabet_size} exceeds target vocabulary {target_vocab}"
        )
    for seq in corpus:
        for s in seq:
            if not 0 <= s < alphabet_size:
                raise AlphabetTooLarge(f"corpus symbol {s} outside alphabet")

    # One flat array with -1 separators so pair counting never crosses
    # sequence boundaries.
    parts: list[np.ndarray] = []
    for seq in corpus:
        parts.append(np.asarray(list(seq), dtype=np.int64))
        parts.append(np.asarray([-1], dtype=np.int64))
    arr = np.concatenate(parts) if parts else np.asarray([], dtype=np.int64)

    merges: list[tuple[int, int]] = []
    next_id = alphabet_size
    while next_id < target_vocab and arr.size >= 2:
        left, right = arr[:-1], arr[1:]
        valid = (left >= 0) & (right >= 0)
        if not np.any(valid):
            break
        keys = left[valid] * (2**32) + right[valid]
        uniq, counts = np.unique(keys, return_counts=True)
        best_count = counts.max()
        if best_count < 2:
            break
        best_key = uniq[counts == best_count].min()  # lexicographically smallest
        a, b = int(best_key >> 32), int(best_key & (2**32 - 1))

        cand = np.nonzero((left == a) & (right == b))[0]
        if a == b:
            # Greedy left-to-right within runs of overlapping candidates.
            runs = np.cumsum(np.concatenate(([1], (np.diff(cand) != 1).astype(np.int64))))
            first_of_run = np.concatenate(([0], np.nonzero(np.diff(runs))[0] + 1))
            ordinal = np.arange(cand.size) - np.repeat(
                first_of_run, np.diff(np.concatenate((first_of_run, [cand.size])))
            )
            cand = cand[ordinal % 2 == 0]
        arr[cand] = next_id
        mask = np.ones(arr.size, dtype=bool)
        mask[cand + 1] = False
        arr = arr[mask]
        merges.append((a, b))
        next_id += 1

    return BpeModel(alphabet_size=alphabet_size, merges=tuple(merges))


def save_bpe(model: BpeModel, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(
            f"fvbpe v1 vocab={model.vocab_size} alphabet={model.alphabet_size}\n"
        )
        for i, (a, b) in enumerate(model.merges):
            f.write(f"merge {a} {b} -> {model.alphabet_size + i}\n")


def load_bpe(path) -> BpeModel:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split()
        if len(header) != 4 or header[0] != "fvbpe" or header[1] != "v1":
            raise MalformedTokens("bad BPE model header")
        vocab = int(header[2].split("=")[1])
        alphabet = int(header[3].split("=")[1])
        merges = []
        for line in f:
            fields = line.split()
            if len(fields) != 5 or fields[0] != "merge" or fields[3] != "->":
                raise MalformedTokens(f"bad merge line: {line!r}")
            a, b, new_id = int(fields[1]), int(fields[2]), int(fields[4])
            if new_id != alphabet + len(merges):
                raise MalformedTokens(f"merge id {new_id} out of order")
            merges.append((a, b))
    model = BpeModel(alphabet_size=alphabet, merges=tuple(merges))
    if model.vocab_size != vocab:
        raise MalformedTokens("merge count disagrees with declared vocabulary")
    return model


@dataclass(frozen=True)
class ActionCodec:
    """The full encode/decode pipeline bundled with its fitted models."""

    normalizer: Normalizer
    delta: float
    bpe: BpeModel
    horizon: int

    @property
    def dims(self) -> int:
        return self.normalizer.dims

    def encode(self, chunk: ActionChunk) -> list[int]:
        return encode_chunk(chunk, self.normalizer, self.delta, self.bpe)

    def decode(self, tokens: Sequence[int]) -> ActionChunk:
        return decode_chunk(tokens, self.normalizer, self.delta, self.bpe, self.horizon)

    def bound(self) -> np.ndarray:
        return reconstruction_bound(self.normalizer, self.delta, self.horizon)


def encode_chunk(
    chunk: ActionChunk,
    normalizer: Normalizer,
    delta: float,
    bpe: BpeModel,
) -> list[int]:
    """normalize -> DCT -> quantize -> offset -> flatten -> BPE."""
    normalized = normalizer.normalize(chunk)
    coeffs = dct_forward(normalized)
    ints = quantize(coeffs, delta)
    offset = ints - INT_LO  # [0, 255]
    return bpe.encode(flatten_interleave(offset))


def decode_chunk(
    tokens: Sequence[int],
    normalizer: Normalizer,
    delta: float,
    bpe: BpeModel,
    horizon: int,
) -> ActionChunk:
    """Exact inverse of every stage after quantization."""
    symbols = bpe.decode(tokens)
    try:
        offset = unflatten_interleave(symbols, horizon, normalizer.dims)
    except LengthMismatch as e:
        raise MalformedTokens(str(e)) from e
    ints = offset + INT_LO
    coeffs = dequantize(ints, delta)
    return normalizer.denormalize(dct_inverse(coeffs))


def reconstruction_bound(normalizer: Normalizer, delta: float, horizon: int) -> np.ndarray:
    """Per-dimension elementwise bound on |decode(encode(x)) - x|.

    Quantization error is at most delta/2 per coefficient; the orthonormal
    inverse transform maps that to at most sqrt(H_a) * delta/2 per element,
    and denormalization scales by (hi - lo)/2.
    """
    span = (normalizer.hi - normalizer.lo) / 2.0
    return span * (delta / 2.0) * np.sqrt(horizon)


def compression_ratio(chunk_symbols: int, tokens: Sequence[int]) -> float:
    """Raw per-step symbol count over emitted token count."""
    return chunk_symbols / max(len(tokens), 1)
