"""Two-phase training, the step loop, and the finite-difference gradient checker."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import save_checkpoint
from .config import TrainConfig
from .errors import ConfigError, NumericBlowup
from .flow import make_training_batch, stage_loss
from .model import DualStreamDiT
from .world import SceneSpec, StageSample, decompose_stages

LOG_FIELDS = ("step", "loss_total", "loss_pose", "loss_img", "lr", "wall_ms")


@dataclass
class StepLog:
    step: int
    loss_total: float
    loss_pose: float
    loss_img: float
    lr: float
    wall_ms: float

    def row(self) -> list:
        return [self.step, repr(self.loss_total), repr(self.loss_pose), repr(self.loss_img),
                repr(self.lr), f"{self.wall_ms:.3f}"]


def stage_pool(specs: Iterable[SceneSpec], phase: str, channels: int = 3) -> list[StageSample]:
    """Training stages for a phase: the single stage of 1-person scenes, or every stage."""
    specs = list(specs)
    if phase == "pretrain":
        bad = [s.seed for s in specs if s.num_people != 1]
        if bad:
            raise ConfigError(f"pretrain expects single-person scenes (seed {bad[0]} has more)")
    pool: list[StageSample] = []
    for spec in specs:
        pool.extend(decompose_stages(spec, channels))
    return pool


def layout_key(s: StageSample) -> tuple[bool, int]:
    return (s.stage > 1, len(s.text_tokens))


def group_by_layout(stages: Sequence[StageSample]) -> list[list[StageSample]]:
    groups: dict[tuple[bool, int], list[StageSample]] = {}
    for s in stages:
        groups.setdefault(layout_key(s), []).append(s)
    return [groups[k] for k in sorted(groups)]


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices of the batch used at ``step``: epochs are seeded permutations, concatenated."""
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n)
        perm = np.random.default_rng([seed, 1, epoch]).permutation(n)
        out.extend(perm[offset:offset + batch_size - len(out)].tolist())
    return np.asarray(out)


def _no_decay(name: str, p: nn.Parameter) -> bool:
    return name.endswith(".bias") or ".mod." in name or p.ndim < 2


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW over trainable parameters only; no decay on biases and modulation/gate weights."""
    decay, plain = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (plain if _no_decay(name, p) else decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": plain, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                             foreach=True)


def lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))
    return cfg.lr


def batch_loss(model: DualStreamDiT, stages: Sequence[StageSample], rng: np.random.Generator,
               cfg: TrainConfig, p_drop: float | None = None, text_tau: bool = True):
    """Loss over a mixed batch, split by layout and weighted by group size.

    Returns ``(objective, pose, img)``; the logged total is rebuilt from the two
    terms so the decomposition is exact.
    """
    p_drop = cfg.p_drop if p_drop is None else p_drop
    n = len(stages)
    dtype = next(model.parameters()).dtype
    objective = torch.zeros((), dtype=torch.float64)
    pose = img = 0.0
    for group in group_by_layout(stages):
        tokens, flow = make_training_batch(group, rng, p_drop, text_tau=text_tau,
                                           channels=model.world.pose_channels, dtype=dtype)
        v_pose, v_img = model(tokens)
        terms = stage_loss(v_pose, v_img, flow, lambda_pose=cfg.lambda_pose,
                           lambda_img=cfg.lambda_img)
        w = len(group) / n
        objective = objective + w * terms.total
        pose += w * float(terms.pose.detach())
        img += w * float(terms.img.detach())
    return objective, pose, img


def train_phase(cfg: TrainConfig, dataset: Sequence[SceneSpec] | Sequence[StageSample],
                model: DualStreamDiT, *, log_path: str | Path | None = None,
                ckpt_dir: str | Path | None = None,
                on_step: Callable[[StepLog], None] | None = None
                ) -> tuple[DualStreamDiT, list[StepLog]]:
    """Train ``model`` in place for ``cfg.steps`` steps; returns it with the step log."""
    if cfg.phase == "finetune" and not model.has_pose_stream:
        raise ConfigError("finetune needs a phase-1 model with the pose stream attached")
    if cfg.phase == "pretrain" and model.has_pose_stream:
        raise ConfigError("pretrain expects a model without a pose stream")
    data = list(dataset)
    stages = data if data and isinstance(data[0], StageSample) else stage_pool(
        data, cfg.phase, model.world.pose_channels)
    if not stages:
        raise ConfigError("empty dataset")
    opt = make_optimizer(model, cfg)
    logs: list[StepLog] = []
    writer = fh = None
    if log_path is not None:
        log_path = Path(log_path)
        new = not log_path.exists() or log_path.stat().st_size == 0
        fh = open(log_path, "a", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_FIELDS)
    model.train()
    try:
        for step in range(cfg.steps):
            t0 = time.perf_counter()
            idx = batch_indices(len(stages), cfg.batch_size, step, cfg.seed)
            rng = np.random.default_rng([cfg.seed, 2, step])
            objective, pose, img = batch_loss(model, [stages[i] for i in idx], rng, cfg)
            if not torch.isfinite(objective):
                raise NumericBlowup("non-finite training loss", step)
            lr = lr_at(cfg, step)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            objective.backward()
            opt.step()
            total = cfg.lambda_pose * pose + cfg.lambda_img * img
            entry = StepLog(step, total, pose, img, lr, (time.perf_counter() - t0) * 1e3)
            logs.append(entry)
            if writer is not None:
                writer.writerow(entry.row())
                fh.flush()
            if on_step is not None:
                on_step(entry)
            if ckpt_dir is not None and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
                save_checkpoint(model, Path(ckpt_dir) / f"step_{step + 1:06d}.ppc")
    finally:
        if fh is not None:
            fh.close()
    model.eval()
    return model, logs


@torch.no_grad()
def heldout_loss(model: DualStreamDiT, stages: Sequence[StageSample], seed: int = 0,
                 batch_size: int = 32, cfg: TrainConfig = TrainConfig()) -> float:
    """Mean flow loss on fixed noise draws without prompt dropout."""
    total, count = 0.0, 0
    for b, start in enumerate(range(0, len(stages), batch_size)):
        chunk = list(stages[start:start + batch_size])
        rng = np.random.default_rng([seed, 3, b])
        objective, _, _ = batch_loss(model, chunk, rng, cfg, p_drop=0.0)
        total += float(objective) * len(chunk)
        count += len(chunk)
    return total / count


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()])
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")


# --------------------------------------------------------------------------- grad check
@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float] = field(default_factory=dict)
    frozen_grad_absent: dict[str, bool] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def failures(self) -> list[str]:
        bad = [n for n, e in self.max_rel_err.items() if not e < self.tolerance]
        return bad + [n for n, ok in self.frozen_grad_absent.items() if not ok]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = [f"{n}\t{e:.3e}\t{'ok' if e < self.tolerance else 'FAIL'}"
               for n, e in self.max_rel_err.items()]
        out += [f"{n}\tfrozen\t{'ok' if ok else 'FAIL'}" for n, ok in self.frozen_grad_absent.items()]
        return out


def grad_check(module: nn.Module, loss_fn: Callable[[], torch.Tensor], tolerance: float = 1e-4,
               samples: int = 3, h: float = 1e-5, seed: int = 0,
               floor: float = 1e-6) -> GradCheckReport:
    """Central-difference check of autograd gradients on a few entries per tensor.

    ``module`` must already be in float64. Errors are measured against the scale
    of the whole tensor's analytic gradient, ``|a_i - n_i| / max(max|a|, floor)``,
    so entries whose gradient happens to be near zero do not turn finite-difference
    rounding into a spurious failure.
    """
    for p in module.parameters():
        if p.dtype != torch.float64:
            raise ValueError("grad_check needs a float64 module")
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    report = GradCheckReport(tolerance=tolerance)
    rng = np.random.default_rng(seed)
    for name, p in module.named_parameters():
        if not p.requires_grad:
            report.frozen_grad_absent[name] = p.grad is None or not bool(p.grad.any())
            continue
        analytic = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        scale = max(float(analytic.abs().max()), floor)
        flat = p.data.view(-1)
        picks = rng.choice(flat.numel(), size=min(samples, flat.numel()), replace=False)
        worst = 0.0
        with torch.no_grad():
            for i in picks:
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                num = (up - down) / (2 * h)
                a = float(analytic.view(-1)[i])
                worst = max(worst, abs(a - num) / scale)
        report.max_rel_err[name] = worst
    module.zero_grad(set_to_none=True)
    return report


def randomize_(module: nn.Module, scale: float = 0.05, seed: int = 0) -> None:
    """Add seeded noise to every parameter so zero-initialised gates stop masking gradients."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))


def model_grad_check(model: DualStreamDiT, stages: Sequence[StageSample], tolerance: float = 1e-4,
                     samples: int = 3, seed: int = 0, lambdas: tuple[float, float] = (1.0, 1.0)
                     ) -> GradCheckReport:
    """Gradient check of the flow loss of ``model`` (converted to float64 in place)."""
    model.double()
    cfg = TrainConfig(lambda_pose=lambdas[0], lambda_img=lambdas[1], p_drop=0.0)
    group = group_by_layout(stages)[0]
    tokens, flow = make_training_batch(group, np.random.default_rng([seed, 4]), 0.0,
                                       channels=model.world.pose_channels, dtype=torch.float64)

    def loss_fn() -> torch.Tensor:
        v_pose, v_img = model(tokens)
        return stage_loss(v_pose, v_img, flow, lambda_pose=cfg.lambda_pose,
                          lambda_img=cfg.lambda_img).total

    return grad_check(model, loss_fn, tolerance, samples=samples, seed=seed)
