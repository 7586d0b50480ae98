"""Generation-quality metrics (inception score, grouped perceptual diversity)
and pixel-level detection scoring, plus the fixed-list evaluation protocol."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from sklearn.metrics import roc_auc_score

from .datamodel import validate_image
from .errors import ContractError, ProtocolError, UndefinedScoreError
from .netarch import to_tensor


@dataclass(frozen=True)
class EvalProtocol:
    gen_list_size: int = 1000
    n_groups: int = 100
    is_splits: int = 10
    fixed_seed: int = 0

    def __post_init__(self) -> None:
        if self.gen_list_size % self.n_groups:
            raise ProtocolError(
                f"gen_list_size {self.gen_list_size} not divisible by n_groups {self.n_groups}"
            )


def inception_score(
    images: Sequence, classifier: Callable[[Sequence], np.ndarray], splits: int = 10
) -> tuple[float, float]:
    """exp(mean KL(p(y|x) || p(y))) per split; returns (mean, std) over splits.

    The classifier maps the image list to an (N, K) row-stochastic matrix.
    """
    if len(images) == 0:
        raise ContractError("inception_score: empty image list")
    probs = np.asarray(classifier(images), dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != len(images):
        raise ContractError(f"classifier returned shape {probs.shape} for {len(images)} images")
    if (probs < 0).any() or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise ContractError("classifier output is not a probability simplex")

    scores = []
    for part in np.array_split(probs, min(splits, len(images))):
        marginal = part.mean(axis=0, keepdims=True)
        # 0 * log 0 is treated as 0
        logm = np.log(np.maximum(marginal, 1e-300))
        logp = np.where(part > 0, np.log(np.maximum(part, 1e-300)), 0.0)
        kl = np.where(part > 0, part * (logp - logm), 0.0).sum(axis=1)
        scores.append(float(np.exp(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))


def perceptual_distance(a: np.ndarray, b: np.ndarray, fx: torch.nn.Module) -> float:
    """Channel-normalized feature distance over the extractor's taps; 0 at equality."""
    validate_image(a, name="a")
    validate_image(b, name="b")
    if a.shape != b.shape:
        raise ContractError(f"perceptual_distance: shapes differ {a.shape} vs {b.shape}")
    with torch.no_grad():
        feats_a = fx(to_tensor(a))
        feats_b = fx(to_tensor(b))
        total = 0.0
        for fa, fb in zip(feats_a, feats_b):
            na = fa / (fa.norm(dim=1, keepdim=True) + 1e-10)
            nb = fb / (fb.norm(dim=1, keepdim=True) + 1e-10)
            total += float(((na - nb) ** 2).sum(dim=1).mean())
    return total / len(feats_a)


def cluster_lpips(images: Sequence, n_groups: int, dist: Callable) -> float:
    """Greedy grouping diversity score.

    Groups are seeded with the first unassigned image and filled with its
    nearest unassigned neighbors; the score is the mean over groups of the
    mean pairwise distance within each group. Singleton groups contribute 0.
    """
    n = len(images)
    if n == 0 or n % n_groups:
        raise ProtocolError(f"{n} images not divisible into {n_groups} groups")
    group_size = n // n_groups

    matrix = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            d = float(dist(images[i], images[j]))
            matrix[i, j] = matrix[j, i] = d

    unassigned = list(range(n))
    group_scores = []
    while unassigned:
        seed = unassigned.pop(0)
        others = sorted(unassigned, key=lambda j: (matrix[seed, j], j))
        members = [seed] + others[: group_size - 1]
        for m in members[1:]:
            unassigned.remove(m)
        if len(members) < 2:
            group_scores.append(0.0)
            continue
        pair_dists = [
            matrix[members[i], members[j]]
            for i in range(len(members))
            for j in range(i + 1, len(members))
        ]
        group_scores.append(float(np.mean(pair_dists)))
    return float(np.mean(group_scores))


def pixel_auroc(heatmaps: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]) -> float:
    """Area under the ROC curve over all pixels of all pairs pooled together."""
    if len(heatmaps) != len(gt_masks):
        raise ContractError("heatmaps and masks counts differ")
    scores, labels = [], []
    for h, m in zip(heatmaps, gt_masks):
        if h.shape != m.shape:
            raise ContractError(f"heatmap/mask shapes differ: {h.shape} vs {m.shape}")
        scores.append(np.asarray(h).ravel())
        labels.append(np.asarray(m).ravel() > 0.5)
    y_score = np.concatenate(scores)
    y_true = np.concatenate(labels)
    if y_true.all() or not y_true.any():
        raise UndefinedScoreError("pixel_auroc undefined: ground truth has a single class")
    return float(roc_auc_score(y_true, y_score))


class NearestCentroidClassifier:
    """Frozen toy classifier: softmax over distances to per-category mean thumbnails.

    Fitted once on a corpus and then treated as read-only, it gives the
    inception score a deterministic, hermetic class-posterior source.
    """

    def __init__(self, thumb: int = 8, sharpness: float = 50.0):
        self.thumb = thumb
        self.sharpness = sharpness
        self.centroids: np.ndarray | None = None
        self.classes: list[str] = []

    def _features(self, image: np.ndarray) -> np.ndarray:
        import cv2

        small = cv2.resize(image, (self.thumb, self.thumb), interpolation=cv2.INTER_AREA)
        return small.ravel().astype(np.float64)

    def fit(self, images: Sequence[np.ndarray], labels: Sequence[str]) -> "NearestCentroidClassifier":
        self.classes = sorted(set(labels))
        feats = np.stack([self._features(im) for im in images])
        self.centroids = np.stack(
            [feats[[l == c for l in labels]].mean(axis=0) for c in self.classes]
        )
        return self

    def __call__(self, images: Sequence[np.ndarray]) -> np.ndarray:
        if self.centroids is None:
            raise ContractError("classifier not fitted")
        feats = np.stack([self._features(im) for im in images])
        d2 = ((feats[:, None, :] - self.centroids[None, :, :]) ** 2).mean(axis=2)
        logits = -self.sharpness * d2
        logits -= logits.max(axis=1, keepdims=True)
        exp = np.exp(logits)
        return exp / exp.sum(axis=1, keepdims=True)


def fixed_eval_list(record_keys: Sequence[str], size: int, seed: int) -> list[str]:
    """Deterministic evaluation list: a seeded sample (with reuse if short)."""
    rng = np.random.default_rng(seed)
    keys = list(record_keys)
    if not keys:
        raise ContractError("no records to build an evaluation list from")
    if len(keys) >= size:
        idx = rng.choice(len(keys), size=size, replace=False)
    else:
        idx = rng.choice(len(keys), size=size, replace=True)
    return [keys[int(i)] for i in idx]


def write_report(rows: list[dict], out_dir: str | Path, name: str = "metrics") -> Path:
    """Emit rows both as line-delimited JSON and as an aligned text table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jsonl = out_dir / f"{name}.jsonl"
    with jsonl.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    if rows:
        columns = list(rows[0].keys())
        widths = {
            c: max(len(c), *(len(_fmt(r.get(c))) for r in rows)) for c in columns
        }
        lines = ["  ".join(c.ljust(widths[c]) for c in columns)]
        lines.append("  ".join("-" * widths[c] for c in columns))
        for row in rows:
            lines.append("  ".join(_fmt(row.get(c)).ljust(widths[c]) for c in columns))
        (out_dir / f"{name}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return jsonl


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)
