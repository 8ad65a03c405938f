"""Dual-stream diffusion transformer with text, image and pose streams.

Every block holds one set of weights per stream. Tokens are projected by
their own stream, attend jointly over the whole sequence (with three-axis
RoPE on queries and keys), and are written back through their own stream's
output projection and MLP. Modulation (shift/scale/gate) comes from the
pooled global-token embedding plus a sinusoidal embedding of each segment's
timestep.

Before :func:`init_pose_stream` the model has no pose stream and pose tokens
run through the image stream; afterwards the pose stream is a frozen copy of
the image stream with LoRA deltas on every projection.
"""
from __future__ import annotations

import copy
import math
from contextlib import contextmanager

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig, WorldConfig
from .errors import InvalidRank, ShapeMismatch
from .rope import build_rope_tables, rope_cos_sin, rotate
from .seq import IMAGE, POSE, POSE_CTX, TEXT, TokenBatch, unpatchify


@contextmanager
def _seeded(seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of ``t`` in [0, 1] (scaled by 1000)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = (t[..., None] * 1000.0) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale) + shift


def apply_lora(base: torch.Tensor, down: torch.Tensor, up: torch.Tensor,
               x: torch.Tensor) -> torch.Tensor:
    """``base @ x + up @ (down @ x)`` for column vectors, batched over leading dims of ``x``.

    ``base`` is ``out x in``, ``down`` is ``r x in``, ``up`` is ``out x r``.
    """
    rank = down.shape[0]
    if rank > min(base.shape) or up.shape[1] != rank:
        raise InvalidRank(f"rank {rank} invalid for a {tuple(base.shape)} weight")
    if down.shape[1] != base.shape[1] or up.shape[0] != base.shape[0]:
        raise ShapeMismatch("LoRA factors do not match the base weight")
    return x @ base.T + (x @ down.T) @ up.T


class LoRALinear(nn.Module):
    """Frozen ``nn.Linear`` plus a trainable low-rank delta ``up @ down`` (``up`` zero-init)."""

    def __init__(self, base: nn.Linear, rank: int):
        super().__init__()
        if rank > min(base.in_features, base.out_features) or rank < 1:
            raise InvalidRank(f"rank {rank} invalid for {base.in_features}->{base.out_features}")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        w = base.weight
        self.down = nn.Parameter(torch.empty(rank, base.in_features, dtype=w.dtype))
        self.up = nn.Parameter(torch.zeros(base.out_features, rank, dtype=w.dtype))
        nn.init.kaiming_uniform_(self.down, a=math.sqrt(5))

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + F.linear(F.linear(x, self.down), self.up)


class StreamBlock(nn.Module):
    """One stream's weights within a transformer block."""

    def __init__(self, dim: int, mlp_ratio: int):
        super().__init__()
        self.mod = nn.Linear(dim, 6 * dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)
        for lin in (self.qkv, self.proj, self.fc1, self.fc2):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)
        # adaLN-zero: shift, scale and gate all start at zero
        nn.init.zeros_(self.mod.weight)
        nn.init.zeros_(self.mod.bias)


class PatchIn(nn.Module):
    def __init__(self, patch_dim: int, dim: int, n_seg: int):
        super().__init__()
        self.proj = nn.Linear(patch_dim, dim)
        self.seg = nn.Parameter(torch.randn(n_seg, dim) * 0.02)
        nn.init.xavier_uniform_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)


class Head(nn.Module):
    def __init__(self, dim: int, patch_dim: int):
        super().__init__()
        self.mod = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, patch_dim)
        for lin in (self.mod, self.out):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        # strided inputs make linear's kernel choice depend on requires_grad
        shift, scale = self.mod(cond.contiguous()).chunk(2, dim=-1)
        return self.out(modulate(F.layer_norm(x, x.shape[-1:], eps=1e-6), shift, scale))


class DualStreamDiT(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), world: WorldConfig = WorldConfig(),
                 seed: int = 0):
        super().__init__()
        if cfg.heads * cfg.head_dim != cfg.dim:
            raise ShapeMismatch("heads * head_dim must equal dim")
        self.cfg = cfg
        self.world = world
        self.patch_dim = world.pose_channels * world.patch ** 2
        self.rope = build_rope_tables(cfg.head_dim, tuple(cfg.rope_split), cfg.rope_base)
        d = cfg.dim
        with _seeded(seed):
            self.text_embed = nn.Embedding(cfg.vocab_size, d)
            nn.init.normal_(self.text_embed.weight, std=0.02)
            self.pooled_proj = nn.Linear(d, d)
            self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
            self.image_in = PatchIn(self.patch_dim, d, 3)  # rows: pose_ctx, pose, image
            self.text_blocks = nn.ModuleList(StreamBlock(d, cfg.mlp_ratio) for _ in range(cfg.depth))
            self.image_blocks = nn.ModuleList(StreamBlock(d, cfg.mlp_ratio) for _ in range(cfg.depth))
            self.image_head = Head(d, self.patch_dim)
        self.pose_in: PatchIn | None = None
        self.pose_blocks: nn.ModuleList | None = None
        self.pose_head: Head | None = None

    @property
    def has_pose_stream(self) -> bool:
        return self.pose_blocks is not None

    # ---------------------------------------------------------------- helpers
    def _cond(self, batch: TokenBatch) -> torch.Tensor:
        """SiLU-activated conditioning per segment, ``(B, S, d)``."""
        pooled = self.text_embed(batch.global_ids).mean(dim=1)
        temb = self.time_mlp(timestep_embedding(batch.seg_t, self.cfg.dim))
        return F.silu(self.pooled_proj(pooled)[:, None, :] + temb)

    def _groups(self, batch: TokenBatch):
        """Yield ``(stream, kinds, segment_indices, tokens)`` in sequence order."""
        pose_in = self.pose_in
        groups = []
        seg_kinds = [s.kind for s in batch.segments]
        text_idx = [i for i, k in enumerate(seg_kinds) if k == TEXT]
        pose_idx = [i for i, k in enumerate(seg_kinds) if k in (POSE_CTX, POSE)]
        img_idx = [i for i, k in enumerate(seg_kinds) if k == IMAGE]
        if text_idx:
            groups.append(("text", text_idx, self.text_embed(batch.text_ids)))
        if pose_idx:
            parts = []
            for i in pose_idx:
                kind = seg_kinds[i]
                raw = batch.pose_ctx if kind == POSE_CTX else batch.pose
                row = 0 if kind == POSE_CTX else 1
                if pose_in is not None:
                    parts.append(pose_in.proj(raw) + pose_in.seg[row])
                else:
                    parts.append(self.image_in.proj(raw) + self.image_in.seg[row])
            groups.append(("pose", pose_idx, torch.cat(parts, dim=1)))
        if img_idx:
            groups.append(("image", img_idx, self.image_in.proj(batch.image) + self.image_in.seg[2]))
        return groups

    def _blocks(self, stream: str) -> nn.ModuleList:
        if stream == "text":
            return self.text_blocks
        if stream == "pose" and self.pose_blocks is not None:
            return self.pose_blocks
        return self.image_blocks

    def _head(self, kind: int) -> Head:
        if kind == IMAGE or self.pose_head is None:
            return self.image_head
        return self.pose_head

    def _check(self, batch: TokenBatch) -> None:
        t = sum(s.length for s in batch.segments)
        if batch.positions.shape[1] != t:
            raise ShapeMismatch(f"{batch.positions.shape[1]} positions for {t} tokens")
        for kind, x in ((POSE_CTX, batch.pose_ctx), (POSE, batch.pose), (IMAGE, batch.image)):
            sl = batch.segment_slice(kind)
            if (sl is None) != (x is None):
                raise ShapeMismatch(f"segment/tensor presence mismatch for kind {kind}")
            if x is not None and (x.shape[1] != sl.stop - sl.start or x.shape[2] != self.patch_dim):
                raise ShapeMismatch(f"kind {kind} tensor {tuple(x.shape)} does not fit layout")
        if batch.text_ids.shape[1] != (batch.segment_slice(TEXT) or slice(0, 0)).stop:
            raise ShapeMismatch("text ids do not match text segment")

    # ---------------------------------------------------------------- forward
    def forward_tokens(self, batch: TokenBatch, return_attn: bool = False):
        """Final hidden states per token ``(B, T, d)`` (and attention maps if asked)."""
        self._check(batch)
        cond = self._cond(batch)
        groups = self._groups(batch)
        lengths = [s.length for s in batch.segments]
        seg_len = [torch.tensor([lengths[i] for i in idx]) for _, idx, _ in groups]
        xs = [x for *_, x in groups]
        dtype = xs[0].dtype
        cos, sin = rope_cos_sin(batch.positions, self.rope, dtype)
        cos, sin = cos[:, None], sin[:, None]
        bsz = batch.batch_size
        h, hd = self.cfg.heads, self.cfg.head_dim
        attn_maps = []
        for b in range(self.cfg.depth):
            mods, qs, ks, vs = [], [], [], []
            for (stream, idx, _), x, sl in zip(groups, xs, seg_len):
                blk = self._blocks(stream)[b]
                m = torch.repeat_interleave(blk.mod(cond[:, idx]), sl, dim=1).chunk(6, dim=-1)
                mods.append(m)
                y = modulate(F.layer_norm(x, x.shape[-1:], eps=1e-6), m[0], m[1])
                q, k, v = blk.qkv(y).chunk(3, dim=-1)
                qs.append(q)
                ks.append(k)
                vs.append(v)
            q, k, v = (torch.cat(t, dim=1).view(bsz, -1, h, hd).transpose(1, 2)
                       for t in (qs, ks, vs))
            q, k = rotate(q, cos, sin), rotate(k, cos, sin)
            if return_attn:
                att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
                attn_maps.append(att)
                o = att @ v
            else:
                o = F.scaled_dot_product_attention(q, k, v)
            o = o.transpose(1, 2).reshape(bsz, -1, h * hd)
            start = 0
            new_xs = []
            for (stream, _, _), x, m in zip(groups, xs, mods):
                blk = self._blocks(stream)[b]
                n = x.shape[1]
                x = x + m[2] * blk.proj(o[:, start:start + n])
                start += n
                y = modulate(F.layer_norm(x, x.shape[-1:], eps=1e-6), m[3], m[4])
                x = x + m[5] * blk.fc2(F.gelu(blk.fc1(y), approximate="tanh"))
                new_xs.append(x)
            xs = new_xs
        out = torch.cat(xs, dim=1)
        return (out, attn_maps) if return_attn else out

    def forward(self, batch: TokenBatch):
        """Velocity rasters ``(v_pose, v_img)``; either is None if its segment is absent."""
        hidden = self.forward_tokens(batch)
        cond = self._cond(batch)
        result = {}
        start = 0
        for i, seg in enumerate(batch.segments):
            sl = slice(start, start + seg.length)
            start += seg.length
            if seg.kind not in (POSE, IMAGE):
                continue
            tokens = self._head(seg.kind)(hidden[:, sl], cond[:, i:i + 1])
            result[seg.kind] = unpatchify(tokens, batch.grid, batch.patch, batch.channels)
        return result.get(POSE), result.get(IMAGE)

    # ---------------------------------------------------------------- params
    def frozen_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if not p.requires_grad]

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if p.requires_grad]


def init_pose_stream(model: DualStreamDiT, rank: int | None = None, seed: int = 1) -> DualStreamDiT:
    """Phase-2 model: pose stream copied from the image stream, LoRA attached, backbone frozen.

    The input model is left untouched.
    """
    if model.has_pose_stream:
        raise ValueError("model already has a pose stream")
    rank = model.cfg.lora_rank if rank is None else rank
    new = copy.deepcopy(model)
    for p in new.parameters():
        p.requires_grad_(False)
    d = new.cfg.dim
    with _seeded(seed):
        pose_in = PatchIn(new.patch_dim, d, 2)
        pose_in.proj = copy.deepcopy(new.image_in.proj)
        pose_in.seg = nn.Parameter(new.image_in.seg.detach()[:2].clone())
        blocks = copy.deepcopy(new.image_blocks)
        for blk in blocks:
            for name in ("mod", "qkv", "proj", "fc1", "fc2"):
                setattr(blk, name, LoRALinear(getattr(blk, name), rank))
        head = copy.deepcopy(new.image_head)
    for p in list(pose_in.parameters()) + list(head.parameters()):
        p.requires_grad_(True)
    for blk in blocks:
        for p in blk.parameters():
            p.requires_grad_(False)
        for mod in blk.modules():
            if isinstance(mod, LoRALinear):
                mod.down.requires_grad_(True)
                mod.up.requires_grad_(True)
    new.pose_in, new.pose_blocks, new.pose_head = pose_in, blocks, head
    return new


def attach_empty_pose_stream(model: DualStreamDiT) -> DualStreamDiT:
    """Phase-2 structure for ``model`` (used when loading phase-2 checkpoints)."""
    return init_pose_stream(model)


def expected_trainable_count(model: DualStreamDiT) -> int:
    """Closed-form trainable-parameter count of a phase-2 model."""
    cfg, d, P = model.cfg, model.cfg.dim, model.patch_dim
    r = cfg.lora_rank
    shapes = [(d, 6 * d), (d, 3 * d), (d, d), (d, cfg.mlp_ratio * d), (cfg.mlp_ratio * d, d)]
    lora = cfg.depth * sum(i * r + r * o for i, o in shapes)
    pose_in = P * d + d + 2 * d
    pose_head = d * 2 * d + 2 * d + d * P + P
    return lora + pose_in + pose_head
