"""Flow matching with independent per-modality noise, classifier-free guidance and Euler sampling.

Convention: ``x_t = (1 - t) x1 + t x0`` with ``x1`` clean data and ``x0`` noise,
so ``t = 1`` is pure noise and the velocity target is ``u = x0 - x1``.
Sampling integrates from ``t = 1`` down to ``t = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import NumericBlowup, ShapeMismatch
from .seq import TokenBatch, assemble_batch
from .world import StageSample


@dataclass
class FlowBatch:
    x1_pose: torch.Tensor
    x0_pose: torch.Tensor
    t_pose: torch.Tensor
    xt_pose: torch.Tensor
    u_pose: torch.Tensor
    x0_img: torch.Tensor
    t_img: torch.Tensor
    xt_img: torch.Tensor
    img_mask: torch.Tensor            # (B,) bool, True where the image is supervised
    x1_img: torch.Tensor | None = None
    u_img: torch.Tensor | None = None  # None when no sample in the batch is a final stage
    stage: torch.Tensor | None = None
    num_people: torch.Tensor | None = None


@dataclass
class LossTerms:
    total: torch.Tensor
    pose: torch.Tensor
    img: torch.Tensor


def _bcast(t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype)
    return t.reshape(t.shape + (1,) * (like.dim() - t.dim()))


def interpolate(x1: torch.Tensor, x0: torch.Tensor, t) -> torch.Tensor:
    """``(1 - t) x1 + t x0``; ``t`` is a scalar or one value per leading-dim sample."""
    if x1.shape != x0.shape:
        raise ShapeMismatch(f"{tuple(x1.shape)} vs {tuple(x0.shape)}")
    t = _bcast(t, x1)
    return (1 - t) * x1 + t * x0


def velocity_target(x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    if x1.shape != x0.shape:
        raise ShapeMismatch(f"{tuple(x1.shape)} vs {tuple(x0.shape)}")
    return x0 - x1


def _per_sample_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    diff = pred.to(torch.float64) - target.to(torch.float64)
    return diff.square().flatten(1).mean(dim=1)


def stage_loss(v_pose_pred: torch.Tensor, v_img_pred: torch.Tensor | None, batch: FlowBatch,
               stage=None, num_people=None, lambda_pose: float = 1.0,
               lambda_img: float = 1.0) -> LossTerms:
    """Mean over samples of ``lambda_pose*MSE_pose + [stage == N]*lambda_img*MSE_img``.

    ``stage``/``num_people`` may be ints or per-sample arrays; when omitted the
    batch's own ``img_mask`` decides which samples carry the image term.
    Computed in float64.
    """
    if stage is not None and num_people is not None:
        mask = torch.as_tensor(np.asarray(stage) == np.asarray(num_people)).reshape(-1)
        mask = mask.expand(v_pose_pred.shape[0])
    else:
        mask = batch.img_mask
    pose = _per_sample_mse(v_pose_pred, batch.u_pose).mean()
    if batch.u_img is None or v_img_pred is None or not bool(mask.any()):
        img = torch.zeros((), dtype=torch.float64)
    else:
        per = _per_sample_mse(v_img_pred, batch.u_img)
        img = torch.where(mask, per, torch.zeros_like(per)).mean()
    return LossTerms(lambda_pose * pose + lambda_img * img, pose, img)


def cfg_combine(v_cond, v_uncond, g: float):
    """``v_uncond + g (v_cond - v_uncond)``; returns ``v_cond`` itself when ``g == 1``."""
    if g == 1:
        return v_cond
    if isinstance(v_cond, (tuple, list)):
        return type(v_cond)(cfg_combine(c, u, g) for c, u in zip(v_cond, v_uncond))
    return v_uncond + g * (v_cond - v_uncond)


def _all_finite(x) -> bool:
    if isinstance(x, (tuple, list)):
        return all(_all_finite(v) for v in x)
    return bool(torch.isfinite(x).all())


def euler_sample(velocity_fn: Callable, x_init, steps: int = 50):
    """Integrate ``dx/dt = v(x, t)`` from ``t = 1`` to ``t = 0`` on a uniform grid.

    ``x_init`` may be a tensor or a tuple of tensors (``velocity_fn`` must
    return the same structure).
    """
    if hasattr(steps, "steps"):
        steps = steps.steps
    if steps < 1:
        raise ValueError("steps must be >= 1")
    grid = torch.linspace(1.0, 0.0, steps + 1, dtype=torch.float64)
    x = x_init
    for k in range(steps):
        t, t_next = float(grid[k]), float(grid[k + 1])
        v = velocity_fn(x, t)
        if not _all_finite(v):
            raise NumericBlowup("non-finite velocity", k)
        dt = t - t_next
        if isinstance(x, (tuple, list)):
            x = type(x)(xi - dt * vi for xi, vi in zip(x, v))
        else:
            x = x - dt * v
    return x


def make_training_batch(stages: Sequence[StageSample], rng: np.random.Generator,
                        p_drop: float = 0.0, *, text_tau: bool = True, channels: int = 3,
                        dtype: torch.dtype = torch.float32) -> tuple[TokenBatch, FlowBatch]:
    """Noise one layout-homogeneous group of stages.

    Pose and image get independent timesteps. Non-final stages have no image
    target: the image input is the all-zero raster noised at ``t_img`` and the
    image term is masked out of the loss.
    """
    bsz = len(stages)
    h, w = stages[0].canvas
    t_pose = torch.from_numpy(rng.random(bsz)).to(dtype)
    t_img = torch.from_numpy(rng.random(bsz)).to(dtype)
    x0_pose = torch.from_numpy(rng.standard_normal((bsz, channels, h, w))).to(dtype)
    x0_img = torch.from_numpy(rng.standard_normal((bsz, channels, h, w))).to(dtype)
    drop = rng.random(bsz) < p_drop

    x1_pose = torch.from_numpy(np.stack([s.target_pose for s in stages])).to(dtype)
    final = np.array([s.is_final for s in stages])
    x1_img = torch.zeros((bsz, channels, h, w), dtype=dtype)
    for i, s in enumerate(stages):
        if s.is_final:
            x1_img[i] = torch.from_numpy(s.target_image)

    xt_pose = interpolate(x1_pose, x0_pose, t_pose)
    xt_img = interpolate(x1_img, x0_img, t_img)
    tokens = assemble_batch(stages, xt_pose, xt_img, t_pose, t_img, text_tau=text_tau,
                            drop_text=drop, channels=channels, dtype=dtype)
    has_img = bool(final.any())
    flow = FlowBatch(
        x1_pose=x1_pose, x0_pose=x0_pose, t_pose=t_pose, xt_pose=xt_pose,
        u_pose=velocity_target(x0_pose, x1_pose),
        x0_img=x0_img, t_img=t_img, xt_img=xt_img,
        img_mask=torch.from_numpy(final),
        x1_img=x1_img if has_img else None,
        u_img=velocity_target(x0_img, x1_img) if has_img else None,
        stage=torch.tensor([s.stage for s in stages]),
        num_people=torch.tensor([s.num_people for s in stages]),
    )
    return tokens, flow
