"""Synthetic multi-person stick-figure world.

Scenes are generated procedurally from a seed, rendered into a pose raster
(one limb per channel group, OpenPose-style) and an RGB raster (filled stick
figures in palette colors), decomposed into per-person supervision stages, and
checked by an exact oracle that decodes skeletons and colors back out of the
rasters.

All rasters are float32 ``(C, H, W)`` arrays in ``[-1, 1]`` with background
exactly ``-1``. Joint coordinates are ``(x, y)`` pixels, ``x`` to the right and
``y`` down. Boxes live on the patch grid and are half-open.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .config import WorldConfig
from .errors import CanvasMismatch, DatasetFormatError, PlacementInfeasible

JOINT_NAMES = ("head", "left_hand", "right_hand", "left_foot", "right_foot")
# every limb starts at the head
LIMBS = ((0, 1), (0, 2), (0, 3), (0, 4))

# distal joint offsets from the head, in JOINT_NAMES[1:] order; pairwise L2
# distance >= 5 so that <= 1 px jitter per joint never changes the nearest template
ACTION_NAMES = (
    "stand", "wave_right", "wave_left", "arms_up",
    "arms_out", "kick_right", "kick_left", "point_left",
)
ACTION_TEMPLATES = np.array([
    [(-3, 3), (3, 3), (-2, 6), (2, 6)],
    [(-3, 3), (3, -3), (-2, 6), (2, 6)],
    [(-3, -3), (3, 3), (-2, 6), (2, 6)],
    [(-3, -3), (3, -3), (-2, 6), (2, 6)],
    [(-4, 0), (4, 0), (-4, 5), (4, 5)],
    [(-3, 3), (3, 3), (-2, 6), (5, 2)],
    [(-3, 3), (3, 3), (-5, 2), (2, 6)],
    [(-4, 0), (-1, 4), (-2, 6), (2, 6)],
], dtype=np.float64)

PALETTE = np.array([
    (1, -1, -1),   # red
    (-1, 1, -1),   # green
    (-1, -1, 1),   # blue
    (1, 1, -1),    # yellow
    (1, -1, 1),    # magenta
    (-1, 1, 1),    # cyan
    (1, 1, 1),     # white
    (1, 0, -1),    # orange
], dtype=np.float32)
COLOR_NAMES = ("red", "green", "blue", "yellow", "magenta", "cyan", "white", "orange")

_JITTER = ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1))
EDGE = 2  # joints keep this many pixels clear of the canvas border
HEAD_RADIUS = 2

# text vocabulary
PAD, NULL, SCENE, END, PERSON = 0, 1, 2, 3, 4
ORD_BASE, COLOR_BASE, ACTION_BASE, POS_BASE, COUNT_BASE = 8, 16, 24, 32, 48
GLOBAL_LEN = 4
VOCAB_SIZE = 64

# decoder thresholds
STROKE_ON = -0.5
LEVEL_SPLIT = 0.5
FOREGROUND_ON = 0.0
MIN_REGION_PIXELS = 4
MIN_HEAD_PIXELS = 5  # a drawn head disk has 13; smaller all-channel blobs are stroke crossings

DATASET_HEADER = "ppcworld-v1"


@dataclass(frozen=True)
class Skeleton:
    joints: tuple[tuple[float, float], ...]

    def array(self) -> np.ndarray:
        return np.asarray(self.joints, dtype=np.float64)


@dataclass(frozen=True)
class Box:
    """Half-open rectangle ``[x0, x1) x [y0, y1)`` on the patch grid."""

    x0: int
    y0: int
    x1: int
    y1: int

    def pixel_rect(self, patch: int) -> tuple[int, int, int, int]:
        return (self.x0 * patch, self.y0 * patch, self.x1 * patch, self.y1 * patch)

    def contains_cell(self, x: int, y: int) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def contains_pixel(self, x: float, y: float, patch: int) -> bool:
        px0, py0, px1, py1 = self.pixel_rect(patch)
        return px0 <= x < px1 and py0 <= y < py1

    def overlaps(self, other: "Box") -> bool:
        return (self.x0 < other.x1 and other.x0 < self.x1
                and self.y0 < other.y1 and other.y0 < self.y1)

    def center_px(self, patch: int) -> tuple[float, float]:
        return ((self.x0 + self.x1) * patch / 2.0, (self.y0 + self.y1) * patch / 2.0)


@dataclass(frozen=True)
class PersonSpec:
    index: int
    color_id: int
    action_id: int
    skeleton: Skeleton
    box: Box
    desc_tokens: tuple[int, ...]


@dataclass(frozen=True)
class SceneSpec:
    num_people: int
    persons: tuple[PersonSpec, ...]
    global_tokens: tuple[int, ...]
    canvas: tuple[int, int]
    seed: int
    patch: int = 2

    @property
    def boxes(self) -> tuple[tuple[int, Box], ...]:
        return tuple((p.index, p.box) for p in self.persons)

    @property
    def skeletons(self) -> list[Skeleton]:
        return [p.skeleton for p in self.persons]


@dataclass(frozen=True, eq=False)
class StageSample:
    stage: int
    num_people: int
    text_tokens: tuple[int, ...]
    global_tokens: tuple[int, ...]
    context_pose: np.ndarray
    target_pose: np.ndarray | None  # None at inference time
    target_image: np.ndarray | None
    boxes: tuple[tuple[int, Box], ...]
    canvas: tuple[int, int]
    patch: int
    desc_len: int = 6

    @property
    def is_final(self) -> bool:
        return self.stage == self.num_people


@dataclass(frozen=True)
class Region:
    """One connected stroke region found by the pose decoder."""

    skeleton: Skeleton | None
    pixel_count: int
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 inclusive pixels
    ambiguous: bool = False
    reason: str = ""


@dataclass(frozen=True)
class AlignmentReport:
    present: tuple[bool, ...]
    color_correct: tuple[bool, ...]
    action_correct: tuple[bool, ...]
    count_correct: bool
    decoded_count: int

    @property
    def all_correct(self) -> bool:
        return (self.count_correct and all(self.present)
                and all(self.color_correct) and all(self.action_correct))


# --------------------------------------------------------------------------
# text tokens

def position_code(box: Box, canvas: tuple[int, int], patch: int) -> int:
    cx, cy = box.center_px(patch)
    h, w = canvas
    col = min(int(cx * 3 // w), 2)
    row = min(int(cy * 3 // h), 2)
    return row * 3 + col


def person_tokens(index: int, color_id: int, action_id: int, pos_code: int,
                  length: int = 6) -> tuple[int, ...]:
    toks = [PERSON, ORD_BASE + index - 1, COLOR_BASE + color_id,
            ACTION_BASE + action_id, POS_BASE + pos_code, END]
    if length < len(toks):
        raise ValueError(f"desc_len must be >= {len(toks)}")
    return tuple(toks + [PAD] * (length - len(toks)))


def scene_tokens(num_people: int, first_action: int) -> tuple[int, ...]:
    return (SCENE, COUNT_BASE + num_people - 1, ACTION_BASE + first_action, END)


# --------------------------------------------------------------------------
# generation

def _box_for(joints: np.ndarray, cfg: WorldConfig) -> Box:
    p, m = cfg.patch, cfg.margin
    gh, gw = cfg.grid
    lo = np.floor((joints.min(axis=0) - m) / p).astype(int)
    hi = np.floor((joints.max(axis=0) + m) / p).astype(int) + 1
    return Box(max(int(lo[0]), 0), max(int(lo[1]), 0), min(int(hi[0]), gw), min(int(hi[1]), gh))


def _lattice(bounds: tuple[int, int], patch: int) -> np.ndarray:
    """Integers in ``bounds`` (inclusive) congruent to ``patch // 2`` modulo ``patch``."""
    lo, hi = int(bounds[0]), int(bounds[1])
    first = lo + (patch // 2 - lo) % patch
    return np.arange(first, hi + 1, patch)


def _try_place(rng: np.random.Generator, cfg: WorldConfig, n: int,
               tries_per_person: int = 100) -> list[tuple[int, int, np.ndarray, Box]] | None:
    h, w = cfg.canvas
    placed: list[tuple[int, int, np.ndarray, Box]] = []
    used: set[tuple[int, int]] = set()
    for _ in range(n):
        for _attempt in range(tries_per_person):
            color = int(rng.integers(cfg.palette_size))
            action = int(rng.integers(cfg.num_actions))
            if not cfg.allow_duplicates and (color, action) in used:
                continue
            jit = np.array([_JITTER[k] for k in rng.integers(len(_JITTER), size=4)])
            offsets = np.vstack([[0, 0], ACTION_TEMPLATES[action] + jit])
            lo, hi = offsets.min(axis=0), offsets.max(axis=0)
            xr = (EDGE - lo[0], w - 1 - EDGE - hi[0])
            yr = (EDGE - lo[1], h - 1 - EDGE - hi[1])
            if xr[0] > xr[1] or yr[0] > yr[1]:
                continue
            # heads sit on a patch-pitch lattice so that a box pins down the figure's pixel offset
            lx = _lattice(xr, cfg.patch)
            ly = _lattice(yr, cfg.patch)
            if not len(lx) or not len(ly):
                continue
            head = np.array([lx[rng.integers(len(lx))], ly[rng.integers(len(ly))]])
            joints = offsets + head
            box = _box_for(joints, cfg)
            if not cfg.allow_overlap and any(box.overlaps(b) for *_, b in placed):
                continue
            placed.append((color, action, joints, box))
            used.add((color, action))
            break
        else:
            return None
    return placed


def gen_scene(seed: int, cfg: WorldConfig, restarts: int = 50) -> SceneSpec:
    """Generate a scene of ``cfg.num_people`` persons, ordered core to periphery."""
    if not 1 <= cfg.num_people <= cfg.max_people:
        raise ValueError(f"num_people must be in [1, {cfg.max_people}]")
    h, w = cfg.canvas
    if h < 16 or w < 16:
        raise ValueError("canvas must be at least 16x16")
    if cfg.joint_count != len(JOINT_NAMES):
        raise ValueError(f"only {len(JOINT_NAMES)}-joint skeletons are supported")
    if not 1 <= cfg.num_actions <= len(ACTION_TEMPLATES):
        raise ValueError("num_actions out of range")
    if not 1 <= cfg.palette_size <= len(PALETTE):
        raise ValueError("palette_size out of range")
    rng = np.random.default_rng(seed)
    placed = None
    for _ in range(restarts):
        placed = _try_place(rng, cfg, cfg.num_people)
        if placed is not None:
            break
    if placed is None:
        raise PlacementInfeasible(
            f"could not place {cfg.num_people} disjoint people on a {h}x{w} canvas")

    center = np.array([w / 2.0, h / 2.0])

    def dist(item):
        cx, cy = item[1][3].center_px(cfg.patch)
        return float(np.hypot(cx - center[0], cy - center[1]))

    order = sorted(enumerate(placed), key=lambda it: (dist(it), it[0]))
    persons = []
    for rank, (_, (color, action, joints, box)) in enumerate(order, start=1):
        skel = Skeleton(tuple((int(x), int(y)) for x, y in joints))
        toks = person_tokens(rank, color, action, position_code(box, cfg.canvas, cfg.patch),
                             cfg.desc_len)
        persons.append(PersonSpec(rank, color, action, skel, box, toks))
    return SceneSpec(
        num_people=cfg.num_people,
        persons=tuple(persons),
        global_tokens=scene_tokens(cfg.num_people, persons[0].action_id),
        canvas=tuple(cfg.canvas),
        seed=seed,
        patch=cfg.patch,
    )


def gen_scenes(seed: int, count: int, cfg: WorldConfig,
               people: Sequence[int] | None = None) -> list[SceneSpec]:
    """``count`` scenes with per-scene seeds derived from ``seed``.

    Scene ``k`` uses seed ``seed * 1_000_003 + k`` and a person count drawn
    from ``people`` by that same seed.
    """
    people = list(people) if people else [cfg.num_people]
    out = []
    for k in range(count):
        s = seed * 1_000_003 + k
        n = people[int(np.random.default_rng([s, 17]).integers(len(people)))]
        out.append(gen_scene(s, cfg.with_people(n)))
    return out


# --------------------------------------------------------------------------
# rendering

def _line(p0: Sequence[float], p1: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    x0, y0 = np.rint(p0).astype(int)
    x1, y1 = np.rint(p1).astype(int)
    n = max(abs(x1 - x0), abs(y1 - y0))
    s = np.arange(n + 1) / max(n, 1)
    xs = np.rint(x0 + (x1 - x0) * s).astype(int)
    ys = np.rint(y0 + (y1 - y0) * s).astype(int)
    return xs, ys


_CROSS = ndimage.generate_binary_structure(2, 1)


def _stroke(p0: Sequence[float], p1: Sequence[float], canvas: tuple[int, int]) -> np.ndarray:
    """Pixel mask of a limb, three pixels wide."""
    mask = np.zeros(canvas, dtype=bool)
    xs, ys = _line(p0, p1)
    mask[ys, xs] = True
    return ndimage.binary_dilation(mask, structure=_CROSS)


def limb_channel(k: int, channels: int) -> tuple[int, float]:
    """Channel and stroke level of limb ``k``."""
    return k % channels, 1.0 - float(k // channels)


def render_pose(skeletons: Iterable[Skeleton], canvas: tuple[int, int],
                channels: int = 3) -> np.ndarray:
    h, w = canvas
    out = np.full((channels, h, w), -1.0, dtype=np.float32)
    for skel in skeletons:
        j = skel.array()
        for k, (a, b) in enumerate(LIMBS):
            ch, level = limb_channel(k, channels)
            m = _stroke(j[a], j[b], canvas)
            out[ch][m] = np.maximum(out[ch][m], np.float32(level))
        out[:, _head_disk(j[0], canvas)] = 1.0
    return out


def _head_disk(head: np.ndarray, canvas: tuple[int, int]) -> np.ndarray:
    h, w = canvas
    hx, hy = np.rint(head).astype(int)
    yy, xx = np.mgrid[0:h, 0:w]
    return (xx - hx) ** 2 + (yy - hy) ** 2 <= HEAD_RADIUS ** 2


def figure_mask(skel: Skeleton, canvas: tuple[int, int]) -> np.ndarray:
    h, w = canvas
    mask = np.zeros((h, w), dtype=bool)
    j = skel.array()
    for a, b in LIMBS:
        xs, ys = _line(j[a], j[b])
        mask[ys, xs] = True
    mask = ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool))
    return mask | _head_disk(j[0], canvas)


def render_rgb(spec: SceneSpec) -> np.ndarray:
    h, w = spec.canvas
    out = np.full((3, h, w), -1.0, dtype=np.float32)
    for person in spec.persons:
        mask = figure_mask(person.skeleton, spec.canvas)
        out[:, mask] = PALETTE[person.color_id][:, None]
    return out


# --------------------------------------------------------------------------
# stages

def decompose_stages(spec: SceneSpec, channels: int = 3) -> list[StageSample]:
    n = spec.num_people
    poses = [render_pose(spec.skeletons[:i], spec.canvas, channels) for i in range(n + 1)]
    image = render_rgb(spec)
    desc_len = len(spec.persons[0].desc_tokens) if spec.persons else 6
    out = []
    for i in range(1, n + 1):
        text = tuple(t for p in spec.persons[:i] for t in p.desc_tokens)
        out.append(StageSample(
            stage=i,
            num_people=n,
            text_tokens=text,
            global_tokens=spec.global_tokens,
            context_pose=poses[i - 1],
            target_pose=poses[i],
            target_image=image if i == n else None,
            boxes=spec.boxes[:i],
            canvas=spec.canvas,
            patch=spec.patch,
            desc_len=desc_len,
        ))
    return out


# --------------------------------------------------------------------------
# decoding and oracle

def _decode_region(raster: np.ndarray, region: np.ndarray) -> Region:
    c = raster.shape[0]
    ys, xs = np.nonzero(region)
    bbox = (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
    count = int(region.sum())
    lit = raster > STROKE_ON
    n_head_ch = min(c, len(LIMBS))
    head_mask = region & lit[:n_head_ch].all(axis=0)
    labels, n_heads = ndimage.label(head_mask, structure=np.ones((3, 3), bool))
    sizes = ndimage.sum(head_mask, labels, range(1, n_heads + 1))
    keep = [k + 1 for k, size in enumerate(sizes) if size >= MIN_HEAD_PIXELS]
    head_mask = np.isin(labels, keep)
    n_heads = len(keep)
    if n_heads == 0:
        return Region(None, count, bbox, reason="no head")
    if n_heads > 1:
        return Region(None, count, bbox, ambiguous=True, reason="multiple heads")
    core = ndimage.binary_erosion(head_mask, structure=_CROSS)
    hy, hx = np.nonzero(core if core.any() else head_mask)
    w = raster[:n_head_ch, hy, hx].sum(axis=0) + n_head_ch
    head = (int(np.rint(np.average(hx, weights=w))), int(np.rint(np.average(hy, weights=w))))
    joints = [head]
    for k in range(len(LIMBS)):
        ch, level = limb_channel(k, c)
        vals = raster[ch]
        if level > LEVEL_SPLIT:
            m = region & (vals > LEVEL_SPLIT)
        else:
            m = region & (vals > STROKE_ON) & (vals <= LEVEL_SPLIT)
        py, px = np.nonzero(m)
        if len(px) == 0:
            return Region(None, count, bbox, reason=f"missing limb {k}")
        d2 = (px - head[0]) ** 2 + (py - head[1]) ** 2
        far = int(np.argmax(d2))
        joints.append((int(px[far]), int(py[far])))
    return Region(Skeleton(tuple(joints)), count, bbox)


def decode_regions(raster: np.ndarray, min_pixels: int = MIN_REGION_PIXELS) -> list[Region]:
    """Split a pose raster into stroke regions and decode each one."""
    stroke = (raster > STROKE_ON).any(axis=0)
    labels, n = ndimage.label(stroke, structure=np.ones((3, 3), bool))
    out = []
    for lab in range(1, n + 1):
        region = labels == lab
        if region.sum() < min_pixels:
            continue
        out.append(_decode_region(raster, region))
    return out


def decode_pose(raster: np.ndarray) -> list[Skeleton]:
    """Skeletons of all unambiguously decodable regions."""
    return [r.skeleton for r in decode_regions(raster) if r.skeleton is not None]


def classify_action(skel: Skeleton, num_actions: int = len(ACTION_TEMPLATES)) -> int:
    j = skel.array()
    offsets = j[1:] - j[0]
    d = ((ACTION_TEMPLATES[:num_actions] - offsets) ** 2).sum(axis=(1, 2))
    return int(np.argmin(d))


def dominant_color(rgb: np.ndarray, rect: tuple[int, int, int, int],
                   palette_size: int = 4) -> int | None:
    x0, y0, x1, y1 = rect
    px = rgb[:, y0:y1, x0:x1].reshape(3, -1).T
    px = px[px.max(axis=1) > FOREGROUND_ON]
    if len(px) == 0:
        return None
    d = ((px[:, None, :] - PALETTE[None, :palette_size]) ** 2).sum(axis=2)
    counts = np.bincount(d.argmin(axis=1), minlength=palette_size)
    return int(np.argmax(counts))


def oracle_check(spec: SceneSpec, rgb: np.ndarray, pose: np.ndarray,
                 palette_size: int = 4, num_actions: int = len(ACTION_TEMPLATES)
                 ) -> AlignmentReport:
    h, w = spec.canvas
    if rgb.shape[1:] != (h, w) or pose.shape[1:] != (h, w):
        raise CanvasMismatch(f"rasters {rgb.shape}/{pose.shape} do not match canvas {spec.canvas}")
    regions = [r for r in decode_regions(pose) if r.skeleton is not None]
    present, color_ok, action_ok = [], [], []
    for person in spec.persons:
        inside = [r for r in regions
                  if all(person.box.contains_pixel(x, y, spec.patch) for x, y in r.skeleton.joints)]
        if inside:
            best = max(inside, key=lambda r: r.pixel_count)
            present.append(True)
            action_ok.append(classify_action(best.skeleton, num_actions) == person.action_id)
        else:
            present.append(False)
            action_ok.append(False)
        color = dominant_color(rgb, person.box.pixel_rect(spec.patch), palette_size)
        color_ok.append(color == person.color_id)
    return AlignmentReport(
        present=tuple(present),
        color_correct=tuple(color_ok),
        action_correct=tuple(action_ok),
        count_correct=len(regions) == spec.num_people,
        decoded_count=len(regions),
    )


# --------------------------------------------------------------------------
# dataset file

def _fmt_list(values: Iterable) -> str:
    parts = []
    for v in values:
        if float(v) != int(v):
            raise DatasetFormatError(f"non-integer value {v!r} in array")
        parts.append(str(int(v)))
    return "[" + ",".join(parts) + "]"


def _parse_list(raw: str, key: str) -> list[int]:
    if not (raw.startswith("[") and raw.endswith("]")):
        raise DatasetFormatError(f"{key}: expected bracketed list, got {raw!r}")
    body = raw[1:-1]
    try:
        return [int(v) for v in body.split(",")] if body else []
    except ValueError:
        raise DatasetFormatError(f"{key}: bad integer list {raw!r}") from None


def encode_scene(spec: SceneSpec) -> str:
    """One-line ``key=value`` encoding of a scene."""
    fields = [
        f"seed={spec.seed}",
        f"canvas={_fmt_list(spec.canvas)}",
        f"patch={spec.patch}",
        f"num_people={spec.num_people}",
        f"global={_fmt_list(spec.global_tokens)}",
    ]
    for p in spec.persons:
        k = p.index
        fields += [
            f"p{k}.color={p.color_id}",
            f"p{k}.action={p.action_id}",
            f"p{k}.joints={_fmt_list(v for xy in p.skeleton.joints for v in xy)}",
            f"p{k}.box={_fmt_list((p.box.x0, p.box.y0, p.box.x1, p.box.y1))}",
            f"p{k}.desc={_fmt_list(p.desc_tokens)}",
        ]
    return " ".join(fields)


def decode_scene(line: str) -> SceneSpec:
    kv: dict[str, str] = {}
    for item in line.split():
        if "=" not in item:
            raise DatasetFormatError(f"malformed field {item!r}")
        key, val = item.split("=", 1)
        if key in kv:
            raise DatasetFormatError(f"duplicate key {key!r}")
        kv[key] = val

    def take(key: str) -> str:
        if key not in kv:
            raise DatasetFormatError(f"missing key {key!r}")
        return kv.pop(key)

    try:
        seed = int(take("seed"))
        patch = int(take("patch"))
        n = int(take("num_people"))
    except ValueError as e:
        raise DatasetFormatError(str(e)) from None
    canvas = tuple(_parse_list(take("canvas"), "canvas"))
    global_tokens = tuple(_parse_list(take("global"), "global"))
    persons = []
    for k in range(1, n + 1):
        try:
            color = int(take(f"p{k}.color"))
            action = int(take(f"p{k}.action"))
        except ValueError as e:
            raise DatasetFormatError(str(e)) from None
        flat = _parse_list(take(f"p{k}.joints"), "joints")
        if len(flat) % 2:
            raise DatasetFormatError("joints must have an even number of values")
        box = _parse_list(take(f"p{k}.box"), "box")
        if len(box) != 4:
            raise DatasetFormatError("box must have 4 values")
        desc = tuple(_parse_list(take(f"p{k}.desc"), "desc"))
        skel = Skeleton(tuple(zip(flat[0::2], flat[1::2])))
        persons.append(PersonSpec(k, color, action, skel, Box(*box), desc))
    if kv:
        raise DatasetFormatError(f"unknown keys {sorted(kv)}")
    return SceneSpec(n, tuple(persons), global_tokens, canvas, seed, patch)


def write_dataset(path: str | Path, specs: Iterable[SceneSpec]) -> None:
    lines = [DATASET_HEADER] + [encode_scene(s) for s in specs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path: str | Path) -> list[SceneSpec]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != DATASET_HEADER:
        raise DatasetFormatError(f"missing {DATASET_HEADER!r} header")
    return [decode_scene(line) for line in lines[1:] if line.strip()]


def replace_person(spec: SceneSpec, index: int, **changes) -> SceneSpec:
    """Copy of ``spec`` with fields of person ``index`` replaced."""
    persons = tuple(dataclasses.replace(p, **changes) if p.index == index else p
                    for p in spec.persons)
    return dataclasses.replace(spec, persons=persons)
