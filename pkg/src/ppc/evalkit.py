"""Alignment and diversity metrics over generated scenes.

Alignment uses the exact world oracle. Diversity mirrors three common
protocols on raw rasters: mean pairwise patch-cosine distance, mean pairwise
RMS pixel distance, and normalized entropy of decoded attributes.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InsufficientSamples
from .world import (ACTION_TEMPLATES, SceneSpec, classify_action, decode_regions, dominant_color,
                    oracle_check)

ALIGNMENT_FIELDS = ("count_accuracy", "color_binding_accuracy", "action_binding_accuracy",
                    "all_correct_rate")
DIVERSITY_FIELDS = ("feature_distance", "pixel_distance", "attribute_entropy")


@dataclass
class SpecScores:
    seed: int
    num_people: int
    samples: int
    count_accuracy: float = math.nan
    color_binding_accuracy: float = math.nan
    action_binding_accuracy: float = math.nan
    all_correct_rate: float = math.nan
    feature_distance: float = math.nan
    pixel_distance: float = math.nan
    attribute_entropy: float = math.nan


@dataclass
class EvalReport:
    per_spec: list[SpecScores] = field(default_factory=list)
    count_accuracy: float = math.nan
    color_binding_accuracy: float = math.nan
    action_binding_accuracy: float = math.nan
    all_correct_rate: float = math.nan
    feature_distance: float = math.nan
    pixel_distance: float = math.nan
    attribute_entropy: float = math.nan

    def aggregate(self) -> "EvalReport":
        for name in ALIGNMENT_FIELDS + DIVERSITY_FIELDS:
            vals = [getattr(s, name) for s in self.per_spec if not math.isnan(getattr(s, name))]
            setattr(self, name, float(np.mean(vals)) if vals else math.nan)
        return self

    def strictness_holds(self) -> bool:
        """``all_correct_rate`` never exceeds any single accuracy, per spec and overall."""
        rows = [*self.per_spec, self]
        return all(r.all_correct_rate <= min(r.count_accuracy, r.color_binding_accuracy,
                                             r.action_binding_accuracy) for r in rows)

    def summary(self) -> str:
        lines = [f"specs: {len(self.per_spec)}"]
        for name in ALIGNMENT_FIELDS + DIVERSITY_FIELDS:
            lines.append(f"{name}: {getattr(self, name):.4f}")
        return "\n".join(lines) + "\n"


def _pairs(items: Sequence) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(len(items)), 2))


# --------------------------------------------------------------------------- alignment
def _sample_pair(sample) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(sample, "final_image"):
        return sample.final_image, sample.final_pose
    image, pose = sample
    return image, pose


def score_alignment(spec: SceneSpec, samples: Sequence, palette_size: int = 4,
                    num_actions: int = len(ACTION_TEMPLATES)) -> SpecScores:
    """Oracle scores for one spec; ``samples`` are traces or ``(image, pose)`` pairs."""
    if not samples:
        raise InsufficientSamples("need at least one sample per spec")
    count, color, action, strict = [], [], [], []
    for s in samples:
        image, pose = _sample_pair(s)
        rep = oracle_check(spec, image, pose, palette_size, num_actions)
        count.append(float(rep.count_correct))
        color.append(float(np.mean(rep.color_correct)))
        action.append(float(np.mean(rep.action_correct)))
        strict.append(float(rep.all_correct))
    return SpecScores(spec.seed, spec.num_people, len(samples),
                      count_accuracy=float(np.mean(count)),
                      color_binding_accuracy=float(np.mean(color)),
                      action_binding_accuracy=float(np.mean(action)),
                      all_correct_rate=float(np.mean(strict)))


def alignment_metrics(specs: Sequence[SceneSpec], samples: Sequence[Sequence], palette_size: int = 4,
                      num_actions: int = len(ACTION_TEMPLATES)) -> EvalReport:
    """``samples[i]`` holds the generations for ``specs[i]``."""
    if len(specs) != len(samples):
        raise ValueError(f"{len(specs)} specs but {len(samples)} sample sets")
    report = EvalReport([score_alignment(sp, sa, palette_size, num_actions)
                         for sp, sa in zip(specs, samples)])
    return report.aggregate()


# --------------------------------------------------------------------------- diversity
def center_pad(images: Sequence[np.ndarray], value: float = -1.0) -> list[np.ndarray]:
    """Pad ``(C, H, W)`` images to the largest ``H`` and ``W``, content centered."""
    h = max(im.shape[1] for im in images)
    w = max(im.shape[2] for im in images)
    out = []
    for im in images:
        dh, dw = h - im.shape[1], w - im.shape[2]
        if dh == 0 and dw == 0:
            out.append(im)
            continue
        pad = ((0, 0), (dh // 2, dh - dh // 2), (dw // 2, dw - dw // 2))
        out.append(np.pad(im, pad, constant_values=value))
    return out


def patch_vectors(image: np.ndarray, patch: int) -> np.ndarray:
    """Non-overlapping ``patch x patch`` vectors, ``(n_patches, C*patch*patch)``; edges are cropped."""
    c, h, w = image.shape
    gh, gw = h // patch, w // patch
    x = np.asarray(image, dtype=np.float64)[:, :gh * patch, :gw * patch]
    x = x.reshape(c, gh, patch, gw, patch).transpose(1, 3, 0, 2, 4)
    return x.reshape(gh * gw, -1)


def patch_cosine_distance(a: np.ndarray, b: np.ndarray, patch: int = 2) -> float:
    """Mean over patches of ``1 - cos``; equal patches (zero ones included) count as identical."""
    pa, pb = patch_vectors(a, patch), patch_vectors(b, patch)
    na, nb = np.linalg.norm(pa, axis=1), np.linalg.norm(pb, axis=1)
    dot = (pa * pb).sum(axis=1)
    denom = np.where(na * nb > 0, na * nb, 1.0)
    cos = np.clip(dot / denom, -1.0, 1.0)
    cos = np.where(np.all(pa == pb, axis=1), 1.0, cos)
    return float(np.mean(1.0 - cos))


def rms_distance(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


def normalized_entropy(values: Sequence, categories: int) -> float:
    """Shannon entropy of the empirical distribution divided by ``log(categories)``."""
    vals = [v for v in values if v is not None]
    if not vals or categories < 2:
        return 0.0
    _, counts = np.unique(np.asarray(vals), return_counts=True)
    p = counts / counts.sum()
    h = float(-(p * np.log(p)).sum())
    return max(0.0, h / math.log(categories))


def decoded_attributes(spec: SceneSpec, image: np.ndarray, pose: np.ndarray | None,
                       palette_size: int = 4, num_actions: int = len(ACTION_TEMPLATES)
                       ) -> list[tuple[int | None, int | None]]:
    """``(color_id, action_id)`` decoded inside each person's box (None when absent)."""
    regions = [] if pose is None else [r for r in decode_regions(pose) if r.skeleton is not None]
    out = []
    for person in spec.persons:
        color = dominant_color(image, person.box.pixel_rect(spec.patch), palette_size)
        action = None
        inside = [r for r in regions
                  if all(person.box.contains_pixel(x, y, spec.patch) for x, y in r.skeleton.joints)]
        if inside:
            action = classify_action(max(inside, key=lambda r: r.pixel_count).skeleton, num_actions)
        out.append((color, action))
    return out


def attribute_entropy(attrs: Sequence[Sequence[tuple[int | None, int | None]]], palette_size: int = 4,
                      num_actions: int = len(ACTION_TEMPLATES), with_action: bool = True) -> float:
    """Mean normalized entropy over person slots and attributes; ``attrs[k][slot]``."""
    slots = len(attrs[0])
    scores = []
    for slot in range(slots):
        scores.append(normalized_entropy([a[slot][0] for a in attrs], palette_size))
        if with_action:
            scores.append(normalized_entropy([a[slot][1] for a in attrs], num_actions))
    return float(np.mean(scores)) if scores else 0.0


def score_diversity(images: Sequence[np.ndarray], patch: int = 2, spec: SceneSpec | None = None,
                    poses: Sequence[np.ndarray] | None = None, palette_size: int = 4,
                    num_actions: int = len(ACTION_TEMPLATES)) -> tuple[float, float, float]:
    """``(feature_distance, pixel_distance, attribute_entropy)`` for one image set."""
    if len(images) < 2:
        raise InsufficientSamples(f"diversity needs k >= 2 images, got {len(images)}")
    padded = center_pad(images)
    pairs = _pairs(padded)
    feat = float(np.mean([patch_cosine_distance(padded[i], padded[j], patch) for i, j in pairs]))
    pix = float(np.mean([rms_distance(padded[i], padded[j]) for i, j in pairs]))
    ent = math.nan
    if spec is not None:
        attrs = [decoded_attributes(spec, im, None if poses is None else poses[k],
                                    palette_size, num_actions) for k, im in enumerate(images)]
        ent = attribute_entropy(attrs, palette_size, num_actions, with_action=poses is not None)
    return feat, pix, ent


def diversity_metrics(image_sets: Sequence[Sequence[np.ndarray]], patch: int = 2,
                      specs: Sequence[SceneSpec] | None = None,
                      pose_sets: Sequence[Sequence[np.ndarray]] | None = None,
                      palette_size: int = 4, num_actions: int = len(ACTION_TEMPLATES)
                      ) -> EvalReport:
    rows = []
    for k, images in enumerate(image_sets):
        spec = None if specs is None else specs[k]
        poses = None if pose_sets is None else pose_sets[k]
        feat, pix, ent = score_diversity(images, patch, spec, poses, palette_size, num_actions)
        rows.append(SpecScores(spec.seed if spec else k, spec.num_people if spec else 0,
                               len(images), feature_distance=feat, pixel_distance=pix,
                               attribute_entropy=ent))
    return EvalReport(rows).aggregate()


def evaluate(specs: Sequence[SceneSpec], samples: Sequence[Sequence], patch: int = 2,
             palette_size: int = 4, num_actions: int = len(ACTION_TEMPLATES)) -> EvalReport:
    """Alignment plus (when there are >= 2 samples per spec) diversity, merged per spec."""
    report = alignment_metrics(specs, samples, palette_size, num_actions)
    if all(len(s) >= 2 for s in samples):
        pairs = [[_sample_pair(x) for x in s] for s in samples]
        div = diversity_metrics([[im for im, _ in p] for p in pairs], patch, specs,
                                [[po for _, po in p] for p in pairs], palette_size, num_actions)
        for row, d in zip(report.per_spec, div.per_spec):
            row.feature_distance = d.feature_distance
            row.pixel_distance = d.pixel_distance
            row.attribute_entropy = d.attribute_entropy
        report.aggregate()
    return report


def write_report(report: EvalReport, directory: str | Path) -> tuple[Path, Path]:
    """``report.csv`` (one row per spec plus a ``mean`` row) and ``summary.txt``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["seed", "num_people", "samples", *ALIGNMENT_FIELDS, *DIVERSITY_FIELDS]
    csv_path = out / "report.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in report.per_spec:
            d = asdict(row)
            w.writerow([d[c] for c in cols])
        w.writerow(["mean", "", sum(r.samples for r in report.per_spec),
                    *[getattr(report, c) for c in (*ALIGNMENT_FIELDS, *DIVERSITY_FIELDS)]])
    txt_path = out / "summary.txt"
    txt_path.write_text(report.summary(), encoding="utf-8")
    return csv_path, txt_path
