"""Token sequence assembly.

A stage is laid out as ``text | pose_ctx | pose | image``. Visual segments are
row-major over the patch grid; every token gets a ``(tau, x, y)`` position
where ``tau`` names the person it belongs to (0 for none).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import ShapeMismatch, SpanConflict
from .world import NULL, Box, StageSample

TEXT, POSE_CTX, POSE, IMAGE = 0, 1, 2, 3
KIND_NAMES = ("text", "pose_ctx", "pose", "image")


@dataclass(frozen=True)
class Segment:
    kind: int
    length: int
    max_person: int | None = None  # boxes of persons <= max_person apply (visual only)


def patchify(raster, patch: int):
    """``(..., C, H, W)`` -> ``(..., (H/p)*(W/p), C*p*p)``, channel-major within a patch."""
    *lead, c, h, w = raster.shape
    if h % patch or w % patch:
        raise ShapeMismatch(f"raster {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = raster.reshape(*lead, c, gh, patch, gw, patch)
    n = len(lead)
    order = (*range(n), n + 1, n + 3, n, n + 2, n + 4)
    x = x.permute(order) if isinstance(x, torch.Tensor) else x.transpose(order)
    return x.reshape(*lead, gh * gw, c * patch * patch)


def unpatchify(tokens, grid: tuple[int, int], patch: int, channels: int):
    """Inverse of :func:`patchify`."""
    *lead, t, dim = tokens.shape
    gh, gw = grid
    if t != gh * gw or dim != channels * patch * patch:
        raise ShapeMismatch(
            f"got {t} tokens of dim {dim}, expected {gh * gw} of dim {channels * patch * patch}")
    x = tokens.reshape(*lead, gh, gw, channels, patch, patch)
    n = len(lead)
    order = (*range(n), n + 2, n, n + 3, n + 1, n + 4)
    x = x.permute(order) if isinstance(x, torch.Tensor) else x.transpose(order)
    return x.reshape(*lead, channels, gh * patch, gw * patch)


def tau_grid(grid: tuple[int, int], boxes: Sequence[tuple[int, Box]],
             max_person: int | None = None) -> np.ndarray:
    """Per-cell person index; later boxes overwrite earlier ones."""
    tau = np.zeros(grid, dtype=np.int64)
    for idx, box in sorted(boxes, key=lambda ib: ib[0]):
        if max_person is not None and idx > max_person:
            continue
        tau[box.y0:box.y1, box.x0:box.x1] = idx
    return tau


def assign_positions(layout: Sequence[Segment], boxes: Sequence[tuple[int, Box]],
                     text_spans: Sequence[tuple[int, tuple[int, int]]],
                     grid: tuple[int, int]) -> np.ndarray:
    """``(T, 3)`` int array of ``(tau, x, y)`` for the whole layout.

    ``text_spans`` are ``(person_index, (start, stop))`` offsets into the text
    segment; text tokens outside every span get ``tau = 0``.
    """
    gh, gw = grid
    spans = sorted(text_spans, key=lambda s: s[1][0])
    for (_, (a0, a1)), (_, (b0, b1)) in zip(spans, spans[1:]):
        if b0 < a1:
            raise SpanConflict(f"text spans [{a0},{a1}) and [{b0},{b1}) overlap")
    parts = []
    for seg in layout:
        pos = np.zeros((seg.length, 3), dtype=np.int64)
        if seg.kind == TEXT:
            for idx, (start, stop) in spans:
                if stop > seg.length:
                    raise SpanConflict(f"span [{start},{stop}) exceeds text length {seg.length}")
                pos[start:stop, 0] = idx
        else:
            if seg.length != gh * gw:
                raise ShapeMismatch(f"visual segment of {seg.length} tokens on a {gh}x{gw} grid")
            tau = tau_grid(grid, boxes, seg.max_person)
            ys, xs = np.divmod(np.arange(seg.length), gw)
            pos[:, 0] = tau.reshape(-1)
            pos[:, 1] = xs
            pos[:, 2] = ys
        parts.append(pos)
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, 3), np.int64)


@dataclass
class TokenBatch:
    """A batch of stage sequences sharing one layout.

    Raw inputs are kept (token ids and patch vectors); the model embeds them.
    """

    text_ids: torch.Tensor          # (B, Lt) long
    global_ids: torch.Tensor        # (B, G) long
    pose_ctx: torch.Tensor | None   # (B, n, P)
    pose: torch.Tensor | None       # (B, n, P)
    image: torch.Tensor | None      # (B, n, P)
    positions: torch.Tensor         # (B, T, 3) long
    segments: tuple[Segment, ...]
    seg_t: torch.Tensor             # (B, S) timestep per segment
    grid: tuple[int, int]
    patch: int
    channels: int

    @property
    def batch_size(self) -> int:
        return self.text_ids.shape[0]

    @property
    def kinds(self) -> torch.Tensor:
        return torch.cat([torch.full((s.length,), s.kind, dtype=torch.long) for s in self.segments])

    @property
    def t_mod(self) -> torch.Tensor:
        lengths = torch.tensor([s.length for s in self.segments])
        return torch.repeat_interleave(self.seg_t, lengths, dim=1)

    def segment_slice(self, kind: int) -> slice | None:
        start = 0
        for s in self.segments:
            if s.kind == kind:
                return slice(start, start + s.length)
            start += s.length
        return None

    def to(self, dtype: torch.dtype) -> "TokenBatch":
        conv = (lambda x: None if x is None else x.to(dtype))
        return TokenBatch(self.text_ids, self.global_ids, conv(self.pose_ctx), conv(self.pose),
                          conv(self.image), self.positions, self.segments, self.seg_t.to(dtype),
                          self.grid, self.patch, self.channels)


def stage_layout(stage: StageSample, grid: tuple[int, int], with_context: bool | None = None,
                 with_pose: bool = True, with_image: bool = True) -> list[Segment]:
    if with_context is None:
        with_context = stage.stage > 1
    n = grid[0] * grid[1]
    layout = [Segment(TEXT, len(stage.text_tokens))]
    if with_context:
        layout.append(Segment(POSE_CTX, n, stage.stage - 1))
    if with_pose:
        layout.append(Segment(POSE, n, stage.stage))
    if with_image:
        layout.append(Segment(IMAGE, n, stage.stage))
    return layout


def stage_positions(stage: StageSample, layout: Sequence[Segment], grid: tuple[int, int],
                    text_tau: bool = True) -> np.ndarray:
    spans = []
    if text_tau:
        L = stage.desc_len
        spans = [(k, ((k - 1) * L, k * L)) for k in range(1, len(stage.text_tokens) // L + 1)]
    return assign_positions(layout, stage.boxes, spans, grid)


def _as_tensor(x, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x).to(dtype)


def assemble_batch(stages: Sequence[StageSample], noised_pose, noised_image, t_pose, t_img,
                   *, text_tau: bool = True, drop_text: Sequence[bool] | None = None,
                   with_context: bool | None = None, channels: int = 3,
                   max_text: int | None = None, dtype: torch.dtype = torch.float32
                   ) -> TokenBatch:
    """Assemble ``[C_i; P_{i-1}; P_i(t_pose); I(t_img)]`` for stages sharing a layout.

    ``noised_pose``/``noised_image`` are ``(B, C, H, W)``; either may be None
    to omit that segment. ``t_pose``/``t_img`` are per-sample timesteps.
    """
    first = stages[0]
    h, w = first.canvas
    p = first.patch
    grid = (h // p, w // p)
    if with_context is None:
        with_context = first.stage > 1
    for s in stages:
        if (s.stage > 1) != (first.stage > 1) or len(s.text_tokens) != len(first.text_tokens):
            raise ShapeMismatch("stages in one batch must share a layout")
        if s.canvas != first.canvas or s.patch != p:
            raise ShapeMismatch("stages in one batch must share canvas and patch")
    if max_text is not None and len(first.text_tokens) > max_text:
        raise ShapeMismatch(f"text length {len(first.text_tokens)} exceeds {max_text}")
    bsz = len(stages)
    for name, r in (("pose", noised_pose), ("image", noised_image)):
        if r is not None and tuple(r.shape) != (bsz, channels, h, w):
            raise ShapeMismatch(f"{name} raster {tuple(r.shape)} != {(bsz, channels, h, w)}")

    layout = stage_layout(first, grid, with_context, noised_pose is not None,
                          noised_image is not None)
    positions = np.stack([stage_positions(s, layout, grid, text_tau) for s in stages])

    text = torch.tensor([s.text_tokens for s in stages], dtype=torch.long)
    glob = torch.tensor([s.global_tokens for s in stages], dtype=torch.long)
    if drop_text is not None:
        drop = torch.as_tensor(list(drop_text), dtype=torch.bool)
        text[drop] = NULL
        glob[drop] = NULL

    ctx = None
    if with_context:
        ctx = patchify(_as_tensor(np.stack([s.context_pose for s in stages]), dtype), p)
    pose = None if noised_pose is None else patchify(_as_tensor(noised_pose, dtype), p)
    image = None if noised_image is None else patchify(_as_tensor(noised_image, dtype), p)

    tp = _as_tensor(t_pose, dtype).reshape(bsz)
    ti = _as_tensor(t_img, dtype).reshape(bsz)
    seg_t = []
    for seg in layout:
        if seg.kind == POSE:
            seg_t.append(tp)
        elif seg.kind == IMAGE:
            seg_t.append(ti)
        else:
            seg_t.append(torch.zeros(bsz, dtype=dtype))
    return TokenBatch(
        text_ids=text, global_ids=glob, pose_ctx=ctx, pose=pose, image=image,
        positions=torch.from_numpy(positions), segments=tuple(layout),
        seg_t=torch.stack(seg_t, dim=1), grid=grid, patch=p, channels=channels,
    )


def assemble_sequence(stage: StageSample, noised_pose, noised_image, t_pose: float,
                      t_img: float, **kw) -> TokenBatch:
    """Single-sample form of :func:`assemble_batch` (rasters are ``(C, H, W)``)."""
    np_ = None if noised_pose is None else _as_tensor(noised_pose)[None]
    ni = None if noised_image is None else _as_tensor(noised_image)[None]
    return assemble_batch([stage], np_, ni, [t_pose], [t_img], **kw)
