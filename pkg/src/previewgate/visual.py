"""Compact 1-D visual tokenization: image -> 32 code indices -> image.

The reference encoder is attention-free: patch embeddings are pooled over 32
contiguous slots of 8 patches (raster order), projected, and offset by 32
learnable latent vectors. Codes are nearest-neighbour indices into a 4096-row
codebook. The decoder broadcasts each quantized latent to its slot's 8 grid
positions, where a per-position linear map plus a per-position bias (the
mask-token realization) produces each 16x16x3 pixel patch.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import IndexOutOfRange, IndivisibleImage, InsufficientData

IMAGE_SIZE = 256
PATCH = 16
GRID = IMAGE_SIZE // PATCH  # 16
N_PATCHES = GRID * GRID  # 256
PATCH_VALUES = PATCH * PATCH * 3  # 768
N_LATENTS = 32
SLOT_SIZE = N_PATCHES // N_LATENTS  # 8
VISUAL_VOCAB = 4096
LATENT_DIM = 64

CODEBOOK_MAGIC = b"FVCB"
VISUAL_WEIGHTS_MAGIC = b"FVVW"
FORMAT_VERSION = 1


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise IndivisibleImage(f"expected HxWx3 image, got {image.shape}")
    if image.shape[0] % PATCH or image.shape[1] % PATCH:
        raise IndivisibleImage(
            f"image {image.shape[0]}x{image.shape[1]} not divisible by {PATCH}"
        )
    return image


def patchify_raw(image: np.ndarray) -> np.ndarray:
    """Non-overlapping 16x16 patches in raster order, each flattened to 768."""
    image = _check_image(image)
    h, w, _ = image.shape
    patches = image.reshape(h // PATCH, PATCH, w // PATCH, PATCH, 3)
    return patches.transpose(0, 2, 1, 3, 4).reshape(-1, PATCH_VALUES)


def unpatchify(patches: np.ndarray, height: int = IMAGE_SIZE, width: int = IMAGE_SIZE) -> np.ndarray:
    """Geometric inverse of patchify_raw."""
    rows, cols = height // PATCH, width // PATCH
    if patches.shape != (rows * cols, PATCH_VALUES):
        raise IndivisibleImage(
            f"patch matrix {patches.shape} does not tile {height}x{width}"
        )
    blocks = patches.reshape(rows, cols, PATCH, PATCH, 3)
    return blocks.transpose(0, 2, 1, 3, 4).reshape(height, width, 3)


def patchify(image: np.ndarray, projection: np.ndarray) -> np.ndarray:
    """Raw patches projected to the latent width: (N_PATCHES, D)."""
    return patchify_raw(image).astype(np.float32) @ projection


@dataclass(frozen=True)
class VisualWeights:
    """Encoder/decoder parameters for the reference codec.

    mask_bias holds the per-position bias vectors that realize the mask-token
    grid; decode_maps holds the per-position linear maps from a slot's
    quantized latent to that position's pixel patch.
    """

    dim: int
    patch_proj: np.ndarray  # (768, dim)
    enc_proj: np.ndarray  # (dim, dim)
    latent_tokens: np.ndarray  # (32, dim)
    decode_maps: np.ndarray  # (256, 768, dim)
    mask_bias: np.ndarray  # (256, 768)

    def __post_init__(self):
        d = self.dim
        expect = {
            "patch_proj": (PATCH_VALUES, d),
            "enc_proj": (d, d),
            "latent_tokens": (N_LATENTS, d),
            "decode_maps": (N_PATCHES, PATCH_VALUES, d),
            "mask_bias": (N_PATCHES, PATCH_VALUES),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} shape {arr.shape} != {shape}")


@dataclass(frozen=True)
class Codebook:
    entries: np.ndarray  # (VISUAL_VOCAB, dim)

    def __post_init__(self):
        if self.entries.ndim != 2 or self.entries.shape[0] != VISUAL_VOCAB:
            raise ValueError(f"codebook must have {VISUAL_VOCAB} rows")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("codebook entries must be finite")


def default_weights(dim: int = LATENT_DIM, seed: int = 0) -> VisualWeights:
    """Seeded random patch projection; identity slot projection; zero latents."""
    rng = np.random.default_rng(seed)
    patch_proj = rng.normal(0.0, 1.0 / np.sqrt(PATCH_VALUES), size=(PATCH_VALUES, dim))
    return VisualWeights(
        dim=dim,
        patch_proj=patch_proj.astype(np.float32),
        enc_proj=np.eye(dim, dtype=np.float32),
        latent_tokens=np.zeros((N_LATENTS, dim), dtype=np.float32),
        decode_maps=np.zeros((N_PATCHES, PATCH_VALUES, dim), dtype=np.float32),
        mask_bias=np.zeros((N_PATCHES, PATCH_VALUES), dtype=np.float32),
    )


def encode_latents(patch_embeddings: np.ndarray, weights: VisualWeights) -> np.ndarray:
    """Slot-pool the patch stream into exactly 32 latent vectors."""
    if patch_embeddings.shape != (N_PATCHES, weights.dim):
        raise ValueError(
            f"patch embeddings {patch_embeddings.shape} != ({N_PATCHES}, {weights.dim})"
        )
    slots = patch_embeddings.reshape(N_LATENTS, SLOT_SIZE, weights.dim).mean(axis=1)
    return slots @ weights.enc_proj.T + weights.latent_tokens


def encode_image(image: np.ndarray, weights: VisualWeights) -> np.ndarray:
    return encode_latents(patchify(image, weights.patch_proj), weights)


class _CodebookIndex:
    """Cached fast-path state for nearest-neighbour queries."""

    def __init__(self, codebook: Codebook):
        self.entries64 = codebook.entries.astype(np.float64)
        self.entries32 = np.ascontiguousarray(codebook.entries, dtype=np.float32)
        self.sq_norm32 = (self.entries32.astype(np.float64) ** 2).sum(axis=1).astype(
            np.float32
        )


_INDEX_CACHE: "OrderedDict[int, _CodebookIndex]" = OrderedDict()


def _codebook_index(codebook: Codebook) -> _CodebookIndex:
    key = id(codebook.entries)
    idx = _INDEX_CACHE.get(key)
    if idx is None:
        idx = _CodebookIndex(codebook)
        if len(_INDEX_CACHE) > 8:
            _INDEX_CACHE.popitem(last=False)
        _INDEX_CACHE[key] = idx
    return idx


def quantize_latents(latents: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Nearest codebook row per latent under Euclidean distance.

    A float32 norm-expansion pass shortlists candidates with a slack wide
    enough to cover its rounding error; the shortlist is re-scored with the
    direct float64 (z - e)^2 sum, so the winner (lowest index on ties) is
    exactly the one an exhaustive float64 scan would pick.
    """
    index = _codebook_index(codebook)
    z32 = np.ascontiguousarray(latents, dtype=np.float32)
    approx = index.sq_norm32[None, :] - 2.0 * (z32 @ index.entries32.T)
    amin = approx.min(axis=1)
    slack = 1e-3 * (1.0 + np.abs(amin)) + 1e-3 * (z32.astype(np.float64) ** 2).sum(
        axis=1
    ).astype(np.float32)
    rows, cand = np.nonzero(approx <= (amin + slack)[:, None])
    z = latents.astype(np.float64)
    exact = ((z[rows] - index.entries64[cand]) ** 2).sum(axis=1)
    out = np.empty(z.shape[0], dtype=np.int64)
    order = np.lexsort((cand, exact, rows))  # per row: best distance, lowest index
    rows_sorted = rows[order]
    first = np.ones(rows_sorted.size, dtype=bool)
    first[1:] = rows_sorted[1:] != rows_sorted[:-1]
    out[rows_sorted[first]] = cand[order][first]
    return out


def lookup(codes: np.ndarray, codebook: Codebook) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.shape != (N_LATENTS,):
        raise IndexOutOfRange(f"expected {N_LATENTS} codes, got shape {codes.shape}")
    if np.any(codes < 0) or np.any(codes >= VISUAL_VOCAB):
        bad = int(codes[(codes < 0) | (codes >= VISUAL_VOCAB)][0])
        raise IndexOutOfRange(f"code {bad} outside [0, {VISUAL_VOCAB})")
    return codebook.entries[codes]


def decode_image(quantized: np.ndarray, weights: VisualWeights) -> np.ndarray:
    """Broadcast latents onto the mask grid and emit a clamped RGB image."""
    if quantized.shape != (N_LATENTS, weights.dim):
        raise ValueError(
            f"quantized latents {quantized.shape} != ({N_LATENTS}, {weights.dim})"
        )
    z = np.repeat(quantized.astype(np.float32), SLOT_SIZE, axis=0)  # (256, dim)
    patches = (
        np.matmul(weights.decode_maps, z[:, :, None])[:, :, 0] + weights.mask_bias
    )
    return np.clip(unpatchify(patches), 0.0, 1.0)


class VisualCodec:
    """Weights + codebook bundle with a decode cache keyed by (slot, code)."""

    def __init__(self, weights: VisualWeights, codebook: Codebook, cache_size: int = 4096):
        self.weights = weights
        self.codebook = codebook
        self._cache: OrderedDict[tuple[int, int], np.ndarray] = OrderedDict()
        self._cache_size = cache_size

    def encode(self, image: np.ndarray) -> np.ndarray:
        return quantize_latents(encode_image(image, self.weights), self.codebook)

    def _slot_block(self, slot: int, code: int) -> np.ndarray:
        key = (slot, code)
        block = self._cache.get(key)
        if block is None:
            lo = slot * SLOT_SIZE
            hi = lo + SLOT_SIZE
            z = self.codebook.entries[code].astype(np.float32)
            block = self.weights.decode_maps[lo:hi] @ z + self.weights.mask_bias[lo:hi]
            if len(self._cache) >= self._cache_size:
                self._cache.popitem(last=False)
            self._cache[key] = block
        else:
            self._cache.move_to_end(key)
        return block

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.shape != (N_LATENTS,):
            raise IndexOutOfRange(f"expected {N_LATENTS} codes, got {codes.shape}")
        if np.any(codes < 0) or np.any(codes >= VISUAL_VOCAB):
            bad = int(codes[(codes < 0) | (codes >= VISUAL_VOCAB)][0])
            raise IndexOutOfRange(f"code {bad} outside [0, {VISUAL_VOCAB})")
        patches = np.empty((N_PATCHES, PATCH_VALUES), dtype=np.float32)
        for slot in range(N_LATENTS):
            lo = slot * SLOT_SIZE
            patches[lo : lo + SLOT_SIZE] = self._slot_block(slot, int(codes[slot]))
        return np.clip(unpatchify(patches), 0.0, 1.0)


def fit_patch_projection(
    frames, dim: int = LATENT_DIM, max_patches: int = 100_000, seed: int = 0
) -> np.ndarray:
    """Top-D principal directions of corpus patches (deterministic signs)."""
    rng = np.random.default_rng(seed)
    collected = []
    total = 0
    for image in frames:
        collected.append(patchify_raw(image).astype(np.float32))
        total += N_PATCHES
        if total >= max_patches * 2:
            break
    if not collected:
        raise InsufficientData("no frames supplied for projection fitting")
    patches = np.concatenate(collected, axis=0)
    if patches.shape[0] > max_patches:
        idx = rng.choice(patches.shape[0], size=max_patches, replace=False)
        patches = patches[idx]
    mean = patches.mean(axis=0)
    centered = (patches - mean).astype(np.float32)
    cov = (centered.T @ centered).astype(np.float64) / max(patches.shape[0] - 1, 1)
    _, vecs = np.linalg.eigh(cov)
    components = vecs[:, ::-1][:, :dim]  # descending eigenvalue order
    # Deterministic sign: largest-magnitude element of each component positive.
    signs = np.sign(components[np.abs(components).argmax(axis=0), np.arange(dim)])
    signs[signs == 0] = 1.0
    return (components * signs).astype(np.float32)


def kmeans(
    data: np.ndarray,
    k: int,
    iterations: int = 20,
    seed: int = 0,
    init_sample: int = 16384,
) -> tuple[np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ init and empty-cluster reseeding.

    Returns (centroids, per-iteration assignment objectives). The objective
    sequence is non-increasing. Deterministic for a fixed seed.
    """
    data = np.ascontiguousarray(data, dtype=np.float32)
    n, d = data.shape
    if n < k:
        raise InsufficientData(f"{n} samples for {k} clusters")
    rng = np.random.default_rng(seed)

    # k-means++ on a subsample keeps the init loop cheap.
    pool = data
    if n > init_sample:
        pool = data[rng.choice(n, size=init_sample, replace=False)]
    if pool.shape[0] < k:
        pool = data
    centers = np.empty((k, d), dtype=np.float32)
    centers[0] = pool[rng.integers(pool.shape[0])]
    d2 = ((pool - centers[0]) ** 2).sum(axis=1).astype(np.float64)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = pool[rng.integers(pool.shape[0])]
        else:
            centers[i] = pool[rng.choice(pool.shape[0], p=d2 / total)]
        d2 = np.minimum(d2, ((pool - centers[i]) ** 2).sum(axis=1))

    objectives: list[float] = []
    sq_norm_x = (data.astype(np.float64) ** 2).sum(axis=1)
    chunk = max(1, (1 << 22) // max(k, 1))
    labels = np.empty(n, dtype=np.int64)
    for _ in range(iterations):
        cn = (centers.astype(np.float64) ** 2).sum(axis=1).astype(np.float32)
        obj = 0.0
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            scores = data[lo:hi] @ centers.T
            dist = cn[None, :] - 2.0 * scores
            labels[lo:hi] = dist.argmin(axis=1)
            obj += float(dist[np.arange(hi - lo), labels[lo:hi]].sum(dtype=np.float64))
        obj += float(sq_norm_x.sum())
        objectives.append(max(obj, 0.0))

        sums = np.zeros((k, d), dtype=np.float64)
        for dim_i in range(d):
            sums[:, dim_i] = np.bincount(labels, weights=data[:, dim_i], minlength=k)
        counts = np.bincount(labels, minlength=k)
        nonempty = counts > 0
        centers[nonempty] = (sums[nonempty] / counts[nonempty, None]).astype(np.float32)
        empty = np.nonzero(~nonempty)[0]
        if empty.size:
            centers[empty] = data[rng.choice(n, size=empty.size, replace=False)]
    return centers, objectives


def train_codebook(
    frames, weights: VisualWeights, iterations: int = 20, seed: int = 0
) -> Codebook:
    """k-means codebook over every frame's 32 encoder latents."""
    latents = [encode_image(img, weights) for img in frames]
    if not latents or len(latents) * N_LATENTS < VISUAL_VOCAB:
        raise InsufficientData(
            f"{len(latents) * N_LATENTS} latents for a {VISUAL_VOCAB}-row codebook"
        )
    data = np.concatenate(latents, axis=0)
    centers, _ = kmeans(data, VISUAL_VOCAB, iterations=iterations, seed=seed)
    return Codebook(entries=centers.astype(np.float32))


def fit_decoder(
    frames,
    weights: VisualWeights,
    codebook: Codebook,
    ridge: float = 1e-6,
) -> tuple[VisualWeights, float]:
    """Least-squares decode maps from quantized latents to pixel patches.

    Solves one regression per mask-grid position (bias = that position's
    mask token). Singular systems fall back to ridge regularization.
    Returns the refitted weights and the training MSE.
    """
    d = weights.dim
    frame_list = list(frames)
    if not frame_list:
        raise InsufficientData("empty corpus for decoder fitting")
    n_frames = len(frame_list)

    x_sum = np.zeros((N_LATENTS, d), dtype=np.float64)
    xx_sum = np.zeros((N_LATENTS, d, d), dtype=np.float64)
    y_sum = np.zeros((N_PATCHES, PATCH_VALUES), dtype=np.float64)
    xy_sum = np.zeros((N_PATCHES, d, PATCH_VALUES), dtype=np.float64)

    batch = 64
    for lo in range(0, n_frames, batch):
        images = frame_list[lo : lo + batch]
        zq_b = np.empty((len(images), N_LATENTS, d), dtype=np.float64)
        y_b = np.empty((len(images), N_PATCHES, PATCH_VALUES), dtype=np.float64)
        for i, image in enumerate(images):
            z = encode_image(image, weights)
            zq_b[i] = lookup(quantize_latents(z, codebook), codebook)
            y_b[i] = patchify_raw(image)
        x_sum += zq_b.sum(axis=0)
        # per slot: (d x B) @ (B x d)
        xx_sum += np.matmul(zq_b.transpose(1, 2, 0), zq_b.transpose(1, 0, 2))
        y_sum += y_b.sum(axis=0)
        # per position: (d x B) @ (B x 768), broadcasting slot latents to
        # their 8 grid positions
        zq_pos = np.repeat(zq_b, SLOT_SIZE, axis=1)  # (B, 256, d)
        xy_sum += np.matmul(zq_pos.transpose(1, 2, 0), y_b.transpose(1, 0, 2))

    x_mean = x_sum / n_frames
    y_mean = y_sum / n_frames

    decode_maps = np.empty((N_PATCHES, PATCH_VALUES, d), dtype=np.float32)
    mask_bias = np.empty((N_PATCHES, PATCH_VALUES), dtype=np.float32)
    for slot in range(N_LATENTS):
        a = xx_sum[slot] - n_frames * np.outer(x_mean[slot], x_mean[slot])
        # Quantized latents often span fewer than d directions, which makes
        # the plain normal equations singular or wildly ill-conditioned, so
        # regularize relative to the data scale.
        lam = ridge * max(float(np.trace(a)) / d, 1.0)
        a_reg = a + lam * np.eye(d)
        for off in range(SLOT_SIZE):
            p = slot * SLOT_SIZE + off
            b = xy_sum[p] - n_frames * np.outer(x_mean[slot], y_mean[p])
            try:
                w_t = np.linalg.solve(a_reg, b)
            except np.linalg.LinAlgError:
                w_t = np.linalg.solve(a + ridge * np.eye(d), b)
            decode_maps[p] = w_t.T.astype(np.float32)
            mask_bias[p] = (y_mean[p] - x_mean[slot] @ w_t).astype(np.float32)

    fitted = VisualWeights(
        dim=d,
        patch_proj=weights.patch_proj,
        enc_proj=weights.enc_proj,
        latent_tokens=weights.latent_tokens,
        decode_maps=decode_maps,
        mask_bias=mask_bias,
    )
    codec = VisualCodec(fitted, codebook)
    total = 0.0
    for image in frame_list:
        recon = codec.decode(codec.encode(image))
        total += float(np.mean((recon - image) ** 2))
    return fitted, total / n_frames


def per_patch_mean_baseline(frames) -> np.ndarray:
    """Constant predictor: the per-position mean patch over a corpus."""
    total = np.zeros((N_PATCHES, PATCH_VALUES), dtype=np.float64)
    n = 0
    for image in frames:
        total += patchify_raw(image)
        n += 1
    if n == 0:
        raise InsufficientData("empty corpus for baseline")
    return (total / n).astype(np.float32)


def baseline_mse(frames, baseline_patches: np.ndarray) -> float:
    """Mean squared error of the per-patch-mean predictor on a corpus."""
    image_pred = np.clip(unpatchify(baseline_patches), 0.0, 1.0)
    total = 0.0
    n = 0
    for image in frames:
        total += float(np.mean((image_pred - image) ** 2))
        n += 1
    return total / max(n, 1)


def codec_mse(frames, codec: VisualCodec) -> float:
    total = 0.0
    n = 0
    for image in frames:
        recon = codec.decode(codec.encode(image))
        total += float(np.mean((recon - image) ** 2))
        n += 1
    return total / max(n, 1)


def save_codebook(codebook: Codebook, path) -> None:
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC)
        dim = codebook.entries.shape[1]
        f.write(struct.pack("<III", FORMAT_VERSION, VISUAL_VOCAB, dim))
        f.write(codebook.entries.astype("<f4").tobytes())


def load_codebook(path) -> Codebook:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CODEBOOK_MAGIC:
        raise IndexOutOfRange("bad magic: not a codebook file")
    version, vocab, dim = struct.unpack("<III", blob[4:16])
    if version != FORMAT_VERSION or vocab != VISUAL_VOCAB:
        raise IndexOutOfRange("unsupported codebook header")
    entries = np.frombuffer(blob, dtype="<f4", offset=16, count=vocab * dim)
    return Codebook(entries=entries.reshape(vocab, dim).copy())


def save_visual_weights(weights: VisualWeights, path) -> None:
    with open(path, "wb") as f:
        f.write(VISUAL_WEIGHTS_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, weights.dim))
        for name in ("patch_proj", "enc_proj", "latent_tokens", "decode_maps", "mask_bias"):
            f.write(getattr(weights, name).astype("<f4").tobytes())


def load_visual_weights(path) -> VisualWeights:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != VISUAL_WEIGHTS_MAGIC:
        raise IndexOutOfRange("bad magic: not a visual weight file")
    version, dim = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise IndexOutOfRange(f"unsupported weight file version {version}")
    shapes = {
        "patch_proj": (PATCH_VALUES, dim),
        "enc_proj": (dim, dim),
        "latent_tokens": (N_LATENTS, dim),
        "decode_maps": (N_PATCHES, PATCH_VALUES, dim),
        "mask_bias": (N_PATCHES, PATCH_VALUES),
    }
    offset = 12
    arrays = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        arrays[name] = (
            np.frombuffer(blob, dtype="<f4", offset=offset, count=count)
            .reshape(shape)
            .copy()
        )
        offset += count * 4
    return VisualWeights(dim=dim, **arrays)
