"""Fitting and persistence of every model artifact the pipeline needs.

A bundle holds the action codec (normalizer, quantization step, BPE table),
the visual codec (projection/encoder/decoder weights plus codebook), the
history compressor weights, and the vocabulary layout parameters. Fitting is
seed-deterministic and driven entirely by oracle rollouts of the simulator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import env as envmod
from .actions import (
    ActionChunk,
    ActionCodec,
    BpeModel,
    Normalizer,
    dct_forward,
    flatten_interleave,
    load_bpe,
    quantize,
    save_bpe,
    train_bpe,
    INT_LO,
)
from .compressor import CompressorWeights, default_weights, load_weights, save_weights
from .stream import VocabLayout, make_layout
from .visual import (
    Codebook,
    VisualCodec,
    VisualWeights,
    default_weights as default_visual_weights,
    fit_decoder,
    fit_patch_projection,
    load_codebook,
    load_visual_weights,
    save_codebook,
    save_visual_weights,
    train_codebook,
    VISUAL_VOCAB,
    N_LATENTS,
)

DEFAULT_DELTA = 0.05
DEFAULT_HORIZON = 16
DEFAULT_BASE_VOCAB = 8192
ACTION_DIMS = 3


def canonical_normalizer() -> Normalizer:
    """Fixed bounds for the toy embodiment: motion dims span +-MAX_STEP and
    the grip channel spans [-1, 1], so every legal action normalizes into
    [-1, 1] exactly and the quantizer alphabet can never overflow."""
    lo = np.array([-envmod.MAX_STEP, -envmod.MAX_STEP, -1.0])
    hi = np.array([envmod.MAX_STEP, envmod.MAX_STEP, 1.0])
    return Normalizer(lo=lo, hi=hi)


def rollout_corpus(
    seeds: range,
    n_objects: int = 3,
    views: tuple[str, ...] = ("top", "side"),
    horizon: int = DEFAULT_HORIZON,
    max_steps: int = 200,
    corruption_rate: float = 0.0,
):
    """Rollouts for model fitting: per episode the states, actions and frames.

    actions[i] is the action that LED TO state i (row 0 is zero motion).
    With corruption_rate > 0 each chunk's plan is corrupted (bin swap or
    waypoint offset, even split) with that probability, which spreads the
    corpus over anomalous configurations the tokenizer must be able to
    depict: wrong-bin deposits, boundary excursions, carried objects
    everywhere. Corrupted episodes rarely terminate, so max_steps caps them.
    """
    episodes = []
    for seed in seeds:
        rng = np.random.default_rng(seed ^ 0x5EED)
        state = envmod.reset(seed, n_objects)
        states = [state]
        actions = [np.zeros(ACTION_DIMS)]
        while not envmod.success(state) and len(states) < max_steps:
            swap = offset = False
            if corruption_rate > 0 and rng.random() < corruption_rate:
                if rng.random() < 0.5:
                    swap = True
                else:
                    offset = True
            plan, futures, _ = envmod.greedy_plan(
                state,
                horizon,
                swap_bins=swap,
                waypoint_offset=(0.5, 0.5) if offset else (0.0, 0.0),
            )
            for action, nxt in zip(plan, futures):
                actions.append(envmod.action_to_vector(action))
                states.append(nxt)
                state = nxt
                if envmod.success(state) or len(states) >= max_steps:
                    break
        frames = [
            tuple(envmod.render(s, v) for v in views) for s in states
        ]
        episodes.append({"seed": seed, "states": states, "actions": actions, "frames": frames})
    return episodes


def _chunk_windows(actions: list[np.ndarray], horizon: int) -> list[np.ndarray]:
    """Future-aligned windows with zero-motion padding past the end."""
    n = len(actions)
    rows = [np.asarray(a, dtype=np.float64) for a in actions]
    out = []
    for t in range(n):
        window = []
        for j in range(t + 1, t + 1 + horizon):
            window.append(rows[j] if j < n else np.zeros(ACTION_DIMS))
        out.append(np.stack(window))
    return out


@dataclass
class ModelBundle:
    action_codec: ActionCodec
    visual: VisualCodec
    compressor: CompressorWeights
    base_vocab: int

    @property
    def layout(self) -> VocabLayout:
        return make_layout(self.base_vocab)


def fit_bundle(
    train_seeds: range = range(100, 180),
    n_objects: int = 3,
    views: tuple[str, ...] = ("top", "side"),
    horizon: int = DEFAULT_HORIZON,
    delta: float = DEFAULT_DELTA,
    base_vocab: int = DEFAULT_BASE_VOCAB,
    max_frames: int = 2000,
    kmeans_iterations: int = 20,
    corpus_corruption: float = 0.5,
    corpus_max_steps: int = 48,
    seed: int = 0,
    episodes=None,
) -> ModelBundle:
    """Fit every artifact from simulator rollouts (or a pre-built corpus).

    The default corpus mixes clean and corrupted behavior over many short
    episodes: coverage of anomalous configurations matters more to the
    tokenizer than task success, and many seeds spread object placements
    densely over the workspace.
    """
    if episodes is None:
        episodes = rollout_corpus(
            train_seeds,
            n_objects,
            views,
            horizon,
            max_steps=corpus_max_steps,
            corruption_rate=corpus_corruption,
        )

    normalizer = canonical_normalizer()
    sequences = []
    for ep in episodes:
        for window in _chunk_windows(ep["actions"], horizon):
            coeffs = dct_forward(normalizer.normalize(ActionChunk(window)))
            sequences.append(flatten_interleave(quantize(coeffs, delta) - INT_LO))
    bpe = train_bpe(sequences)
    action_codec = ActionCodec(
        normalizer=normalizer, delta=delta, bpe=bpe, horizon=horizon
    )

    frames = [img for ep in episodes for group in ep["frames"] for img in group]
    if len(frames) > max_frames:
        stride = len(frames) / max_frames
        frames = [frames[int(i * stride)] for i in range(max_frames)]
    weights = default_visual_weights(seed=seed)
    projection = fit_patch_projection(frames, dim=weights.dim, seed=seed)
    weights = VisualWeights(
        dim=weights.dim,
        patch_proj=projection,
        enc_proj=weights.enc_proj,
        latent_tokens=weights.latent_tokens,
        decode_maps=weights.decode_maps,
        mask_bias=weights.mask_bias,
    )
    codebook = train_codebook(frames, weights, iterations=kmeans_iterations, seed=seed)
    weights, _train_mse = fit_decoder(frames, weights, codebook)
    visual = VisualCodec(weights, codebook)

    comp = default_weights(seed=seed)
    return ModelBundle(
        action_codec=action_codec,
        visual=visual,
        compressor=comp,
        base_vocab=base_vocab,
    )


def save_bundle(bundle: ModelBundle, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    norm = bundle.action_codec.normalizer
    meta = {
        "delta": bundle.action_codec.delta,
        "horizon": bundle.action_codec.horizon,
        "base_vocab": bundle.base_vocab,
        "normalizer_lo": [float(v) for v in norm.lo],
        "normalizer_hi": [float(v) for v in norm.hi],
    }
    (directory / "bundle.json").write_text(json.dumps(meta, indent=2))
    save_bpe(bundle.action_codec.bpe, directory / "actions.fvbpe")
    save_visual_weights(bundle.visual.weights, directory / "visual.fvvw")
    save_codebook(bundle.visual.codebook, directory / "codebook.fvcb")
    save_weights(bundle.compressor, directory / "compressor.fvcw")


def load_bundle(directory) -> ModelBundle:
    directory = Path(directory)
    meta = json.loads((directory / "bundle.json").read_text())
    normalizer = Normalizer(
        lo=np.asarray(meta["normalizer_lo"], dtype=np.float64),
        hi=np.asarray(meta["normalizer_hi"], dtype=np.float64),
    )
    action_codec = ActionCodec(
        normalizer=normalizer,
        delta=float(meta["delta"]),
        bpe=load_bpe(directory / "actions.fvbpe"),
        horizon=int(meta["horizon"]),
    )
    visual = VisualCodec(
        load_visual_weights(directory / "visual.fvvw"),
        load_codebook(directory / "codebook.fvcb"),
    )
    return ModelBundle(
        action_codec=action_codec,
        visual=visual,
        compressor=load_weights(directory / "compressor.fvcw"),
        base_vocab=int(meta["base_vocab"]),
    )


def ensure_bundle(directory, **fit_kwargs) -> ModelBundle:
    """Load a cached bundle or fit and persist one."""
    directory = Path(directory)
    if (directory / "bundle.json").exists():
        return load_bundle(directory)
    bundle = fit_bundle(**fit_kwargs)
    save_bundle(bundle, directory)
    return bundle
