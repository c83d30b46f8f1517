"""Vocabulary remapping and bit-exact serialization of the output stream.

Action codes occupy the last 2048 indices of the base vocabulary, visual
codes the 4096 indices immediately before them, and four delimiter tokens
are appended above the base vocabulary. A serialized output is:

    text ids, ACT_BOS, action ids, ACT_EOS,
    then for each view, for each future frame:
    IMG_BOS, 32 visual ids, IMG_EOS.

The parser is total: any input either parses to a value that re-serializes
to the same ids, or raises a typed error naming the offending position.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import (
    BadGroupLength,
    DelimiterMismatch,
    ExtraTokens,
    IdOutOfBand,
    OutOfRange,
    TruncatedStream,
    VocabTooSmall,
)

ACTION_BAND = 2048
VISUAL_BAND = 4096
MIN_VOCAB = ACTION_BAND + VISUAL_BAND
CODES_PER_FRAME = 32


@dataclass(frozen=True)
class VocabLayout:
    base_vocab: int

    @property
    def action_offset(self) -> int:
        return self.base_vocab - ACTION_BAND

    @property
    def visual_offset(self) -> int:
        return self.base_vocab - ACTION_BAND - VISUAL_BAND

    @property
    def act_bos(self) -> int:
        return self.base_vocab

    @property
    def act_eos(self) -> int:
        return self.base_vocab + 1

    @property
    def img_bos(self) -> int:
        return self.base_vocab + 2

    @property
    def img_eos(self) -> int:
        return self.base_vocab + 3


def make_layout(base_vocab: int) -> VocabLayout:
    if base_vocab < MIN_VOCAB:
        raise VocabTooSmall(
            f"base vocabulary {base_vocab} cannot host {MIN_VOCAB} code slots"
        )
    return VocabLayout(base_vocab=base_vocab)


def map_action_id(code: int, layout: VocabLayout) -> int:
    if not 0 <= code < ACTION_BAND:
        raise OutOfRange(f"action code {code} outside [0, {ACTION_BAND})")
    return layout.action_offset + code


def unmap_action_id(token_id: int, layout: VocabLayout) -> int:
    if not layout.action_offset <= token_id < layout.base_vocab:
        raise OutOfRange(f"id {token_id} outside the action band")
    return token_id - layout.action_offset


def map_visual_id(code: int, layout: VocabLayout) -> int:
    if not 0 <= code < VISUAL_BAND:
        raise OutOfRange(f"visual code {code} outside [0, {VISUAL_BAND})")
    return layout.visual_offset + code


def unmap_visual_id(token_id: int, layout: VocabLayout) -> int:
    if not layout.visual_offset <= token_id < layout.action_offset:
        raise OutOfRange(f"id {token_id} outside the visual band")
    return token_id - layout.visual_offset


@dataclass(frozen=True)
class UnifiedOutput:
    """Structured form of one generation: text, actions, and visual grid."""

    transition_text_ids: tuple[int, ...]
    action_tokens: tuple[int, ...]
    visual_tokens: tuple[tuple[tuple[int, ...], ...], ...]  # [view][frame][32]


def serialize_output(
    out: UnifiedOutput, layout: VocabLayout, views: int, horizon: int
) -> list[int]:
    """Flatten to vocabulary ids, view-major then frame-major."""
    if len(out.visual_tokens) != views:
        raise BadGroupLength(
            f"expected {views} views, got {len(out.visual_tokens)}", 0
        )
    ids: list[int] = []
    for t in out.transition_text_ids:
        if not 0 <= t < layout.visual_offset:
            raise OutOfRange(f"text id {t} outside [0, {layout.visual_offset})")
        ids.append(t)
    ids.append(layout.act_bos)
    for code in out.action_tokens:
        ids.append(map_action_id(code, layout))
    ids.append(layout.act_eos)
    for view in out.visual_tokens:
        if len(view) != horizon:
            raise BadGroupLength(
                f"expected {horizon} frames per view, got {len(view)}", len(ids)
            )
        for frame in view:
            if len(frame) != CODES_PER_FRAME:
                raise BadGroupLength(
                    f"frame has {len(frame)} codes, expected {CODES_PER_FRAME}",
                    len(ids),
                )
            ids.append(layout.img_bos)
            for code in frame:
                ids.append(map_visual_id(code, layout))
            ids.append(layout.img_eos)
    return ids


def parse_output(
    ids: Sequence[int], layout: VocabLayout, views: int, horizon: int
) -> UnifiedOutput:
    """Strict inverse of serialize_output; every failure names a position."""
    pos = 0
    n = len(ids)

    text: list[int] = []
    while True:
        if pos >= n:
            raise TruncatedStream("stream ended before the action group", pos)
        t = ids[pos]
        if t == layout.act_bos:
            pos += 1
            break
        if 0 <= t < layout.visual_offset:
            text.append(t)
            pos += 1
            continue
        raise IdOutOfBand(f"id {t} is not a text id or ACT_BOS", pos)

    actions: list[int] = []
    while True:
        if pos >= n:
            raise TruncatedStream("stream ended inside the action group", pos)
        t = ids[pos]
        if t == layout.act_eos:
            pos += 1
            break
        if layout.action_offset <= t < layout.base_vocab:
            actions.append(t - layout.action_offset)
            pos += 1
            continue
        raise IdOutOfBand(f"id {t} is not an action id or ACT_EOS", pos)

    grid: list[list[tuple[int, ...]]] = []
    for _view in range(views):
        frames: list[tuple[int, ...]] = []
        for _frame in range(horizon):
            if pos >= n:
                raise TruncatedStream("stream ended before an image group", pos)
            if ids[pos] != layout.img_bos:
                raise DelimiterMismatch(
                    f"expected IMG_BOS, found {ids[pos]}", pos
                )
            pos += 1
            codes: list[int] = []
            for _ in range(CODES_PER_FRAME):
                if pos >= n:
                    raise TruncatedStream("stream ended inside an image group", pos)
                t = ids[pos]
                if t == layout.img_eos:
                    raise BadGroupLength(
                        f"image group closed after {len(codes)} codes", pos
                    )
                if not layout.visual_offset <= t < layout.action_offset:
                    raise IdOutOfBand(f"id {t} is not a visual id", pos)
                codes.append(t - layout.visual_offset)
                pos += 1
            if pos >= n:
                raise TruncatedStream("stream ended before IMG_EOS", pos)
            if ids[pos] != layout.img_eos:
                raise DelimiterMismatch(
                    f"expected IMG_EOS, found {ids[pos]}", pos
                )
            pos += 1
            frames.append(tuple(codes))
        grid.append(frames)

    if pos != n:
        raise ExtraTokens(f"{n - pos} unexpected trailing ids", pos)
    return UnifiedOutput(
        transition_text_ids=tuple(text),
        action_tokens=tuple(actions),
        visual_tokens=tuple(tuple(f) for f in grid),
    )


def write_stream(ids: Sequence[int], layout: VocabLayout, views: int, horizon: int, path) -> None:
    """Interchange format: one header line, then one decimal id per line."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"fvus v1 vbase={layout.base_vocab} V={views} Ha={horizon}\n")
        for t in ids:
            f.write(f"{t}\n")


def read_stream(path) -> tuple[list[int], VocabLayout, int, int]:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split()
        if len(header) != 5 or header[0] != "fvus" or header[1] != "v1":
            raise TruncatedStream("bad stream file header", 0)
        fields = dict(part.split("=") for part in header[2:])
        layout = make_layout(int(fields["vbase"]))
        views = int(fields["V"])
        horizon = int(fields["Ha"])
        ids = [int(line) for line in f if line.strip()]
    return ids, layout, views, horizon
