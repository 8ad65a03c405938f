"""Person-by-person scene generation.

Stage ``i`` denoises the pose raster ``P_i`` and the image jointly, conditioned
on the text of persons ``1..i`` and the cleaned pose raster ``P_{i-1}`` from the
previous stage. Only the pose raster is carried between stages.
"""
from __future__ import annotations

import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import SampleConfig
from .flow import cfg_combine, euler_sample
from .model import DualStreamDiT
from .seq import assemble_batch
from .world import SceneSpec, StageSample, render_pose

ITERATIVE = "iterative"
SINGLE_PASS = "single_pass"


@dataclass
class StageTrace:
    stage: int
    pose: np.ndarray              # cleaned P_i, exactly what the next stage sees
    raw_pose: np.ndarray          # sampler output before cleanup
    image: np.ndarray | None      # None when intermediate image denoising was skipped
    context: np.ndarray           # P_{i-1} fed to this stage
    noise_seed: tuple[int, ...]
    wall_ms: float


@dataclass
class GenerationTrace:
    spec_seed: int
    mode: str
    stages: list[StageTrace] = field(default_factory=list)
    evaluations: int = 0

    @property
    def final_pose(self) -> np.ndarray:
        return self.stages[-1].pose

    @property
    def final_image(self) -> np.ndarray:
        return self.stages[-1].image


def clean_context(raster: np.ndarray, snap: float = 0.1) -> np.ndarray:
    """Clamp to ``[-1, 1]`` and snap near-background pixels to exactly ``-1``."""
    out = np.clip(raster, -1.0, 1.0).astype(np.float32)
    out[np.abs(out + 1.0) < snap] = -1.0
    return out


def _stage_input(spec: SceneSpec, stage: int, context: np.ndarray, mode: str) -> StageSample:
    n = spec.num_people
    upto = n if mode == SINGLE_PASS else stage
    return StageSample(
        stage=n if mode == SINGLE_PASS else stage,
        num_people=n,
        text_tokens=tuple(t for p in spec.persons[:upto] for t in p.desc_tokens),
        global_tokens=spec.global_tokens,
        context_pose=context,
        target_pose=None,
        target_image=None,
        boxes=spec.boxes[:upto],
        canvas=spec.canvas,
        patch=spec.patch,
        desc_len=len(spec.persons[0].desc_tokens),
    )


def _noise(cfg: SampleConfig, spec: SceneSpec, stage: int, shape: tuple[int, ...]):
    key = (cfg.seed, spec.seed, 0 if cfg.reuse_noise else stage)
    rng = np.random.default_rng(list(key))
    pose = rng.standard_normal(shape).astype(np.float32)
    image = rng.standard_normal(shape).astype(np.float32)
    return key, pose, image


@torch.no_grad()
def generate_batch(model: DualStreamDiT, specs: Sequence[SceneSpec], cfg: SampleConfig = SampleConfig(),
                   *, mode: str = ITERATIVE, text_tau: bool = True) -> list[GenerationTrace]:
    """Generate every spec; specs with equal person counts are denoised together."""
    if mode not in (ITERATIVE, SINGLE_PASS):
        raise ValueError(f"unknown mode {mode!r}")
    for s in specs:
        if s.num_people < 1:
            raise ValueError("a scene needs at least one person")
    model.eval()
    traces = [GenerationTrace(s.seed, mode) for s in specs]
    by_n: dict[int, list[int]] = {}
    for i, s in enumerate(specs):
        by_n.setdefault(s.num_people, []).append(i)
    for n, idx in sorted(by_n.items()):
        _run_group(model, [specs[i] for i in idx], [traces[i] for i in idx], cfg, mode, text_tau)
    return traces


def generate_scene(model: DualStreamDiT, spec: SceneSpec, cfg: SampleConfig = SampleConfig(),
                   *, mode: str = ITERATIVE, text_tau: bool = True) -> GenerationTrace:
    return generate_batch(model, [spec], cfg, mode=mode, text_tau=text_tau)[0]


def _run_group(model: DualStreamDiT, specs: list[SceneSpec], traces: list[GenerationTrace],
               cfg: SampleConfig, mode: str, text_tau: bool) -> None:
    n = specs[0].num_people
    channels = model.world.pose_channels
    h, w = specs[0].canvas
    shape = (channels, h, w)
    dtype = next(model.parameters()).dtype
    bsz = len(specs)
    contexts = [render_pose([], specs[0].canvas, channels) for _ in specs]
    n_stages = 1 if mode == SINGLE_PASS else n
    for stage in range(1, n_stages + 1):
        t0 = time.perf_counter()
        inputs = [_stage_input(s, stage, c, mode) for s, c in zip(specs, contexts)]
        keys, pose0, img0 = zip(*(_noise(cfg, s, stage, shape) for s in specs))
        with_image = stage == n_stages or not cfg.skip_intermediate_image
        with_context = mode == ITERATIVE and stage > 1
        guided = cfg.guidance != 1
        evals = 0

        def velocity(x, t):
            nonlocal evals
            reps = 2 if guided else 1
            stages = inputs * reps
            drop = [False] * bsz + [True] * bsz if guided else None
            tt = torch.full((reps * bsz,), t, dtype=dtype)
            img = x[1].repeat(reps, 1, 1, 1) if with_image else None
            batch = assemble_batch(stages, x[0].repeat(reps, 1, 1, 1), img, tt, tt,
                                   text_tau=text_tau, drop_text=drop, with_context=with_context,
                                   channels=channels, dtype=dtype)
            v = model(batch)[:len(x)]
            evals += reps
            if not guided:
                return v
            return cfg_combine(tuple(vi[:bsz] for vi in v), tuple(vi[bsz:] for vi in v),
                               cfg.guidance)

        x = (torch.from_numpy(np.stack(pose0)).to(dtype),)
        if with_image:
            x = x + (torch.from_numpy(np.stack(img0)).to(dtype),)
        out = euler_sample(velocity, x, cfg.steps)
        pose, img = out[0], (out[1] if with_image else None)
        wall = (time.perf_counter() - t0) * 1e3
        raw = pose.float().numpy()
        images = None if img is None else img.float().numpy()
        for b, trace in enumerate(traces):
            cleaned = clean_context(raw[b], cfg.context_snap)
            trace.stages.append(StageTrace(
                stage=stage, pose=cleaned, raw_pose=raw[b].copy(),
                image=None if images is None else images[b].copy(),
                context=contexts[b], noise_seed=keys[b], wall_ms=wall))
            trace.evaluations += evals
            contexts[b] = cleaned


# --------------------------------------------------------------------------- export
def to_bytes(raster: np.ndarray) -> np.ndarray:
    """``(C, H, W)`` in ``[-1, 1]`` to ``(H, W, C)`` uint8."""
    x = np.clip((np.asarray(raster, dtype=np.float64) + 1.0) * 127.5, 0, 255)
    return np.rint(x).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path: str | Path, raster: np.ndarray) -> None:
    pix = to_bytes(raster)
    h, w, c = pix.shape
    if c == 1:
        header = f"P5\n{w} {h}\n255\n"
    elif c == 3:
        header = f"P6\n{w} {h}\n255\n"
    else:
        raise ValueError(f"cannot write {c} channels as PPM")
    Path(path).write_bytes(header.encode("ascii") + pix.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary P5/P6 file written by :func:`write_ppm` as ``(H, W, C)`` uint8."""
    data = Path(path).read_bytes()
    m = re.match(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    c = 1 if m.group(1) == b"P5" else 3
    w, h = int(m.group(2)), int(m.group(3))
    body = data[m.end():m.end() + w * h * c]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c)


def export_trace(trace: GenerationTrace, directory: str | Path) -> Path:
    """One PPM per stage raster plus ``manifest.txt``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"spec_seed={trace.spec_seed}", f"mode={trace.mode}",
             f"stages={len(trace.stages)}", f"evaluations={trace.evaluations}"]
    for st in trace.stages:
        pose_name = f"stage{st.stage}_pose.ppm"
        write_ppm(out / pose_name, st.pose)
        image_name = "-"
        if st.image is not None:
            image_name = f"stage{st.stage}_image.ppm"
            write_ppm(out / image_name, st.image)
        seed = ",".join(str(k) for k in st.noise_seed)
        lines.append(f"stage={st.stage} pose={pose_name} image={image_name} "
                     f"noise_seed={seed} wall_ms={st.wall_ms:.1f}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out
