"""Style-distance data filtering: k-means over unit style features, nearest-center distance, thresholding."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

DEFAULT_K = 16
MAX_ITERS = 100
CENTER_TOL = 1e-6


@dataclass
class ClusterModel:
    centers: np.ndarray  # (k, d)
    k: int
    seed: int
    inertia: float
    inertia_history: list[float] = field(default_factory=list)


def as_features(vectors) -> np.ndarray:
    """Stacks vectors and checks the unit-norm contract."""
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise ValueError("style features must have unit 2-norm")
    return x


def normalize_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True).clip(1e-12)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[idx]).min(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every remaining point coincides with a chosen center
            remaining = [i for i in range(n) if i not in idx]
            nxt = int(rng.choice(remaining))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    return x[idx].copy()


def kmeans_fit(features, k: int = DEFAULT_K, seed: int = 0, max_iters: int = MAX_ITERS,
               tol: float = CENTER_TOL) -> ClusterModel:
    x = as_features(features)
    if len(x) < k:
        raise ValueError(f"need at least k={k} features, got {len(x)}")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, rng)
    history = []
    for _ in range(max_iters):
        d2 = _sq_dists(x, centers)
        assign = d2.argmin(1)
        inertia = float(d2[np.arange(len(x)), assign].sum())
        if history:
            assert inertia <= history[-1] + 1e-9 * max(1.0, history[-1]), "k-means inertia increased"
        history.append(inertia)
        new = centers.copy()
        for j in range(k):
            members = x[assign == j]
            if len(members):
                new[j] = members.mean(0)
        shift = np.abs(new - centers).max()
        centers = new
        if shift < tol:
            break
    d2 = _sq_dists(x, centers)
    inertia = float(d2.min(1).sum())
    history.append(inertia)
    return ClusterModel(centers=centers, k=k, seed=seed, inertia=inertia, inertia_history=history)


def nsd(feature, model: ClusterModel, halve: bool = False) -> float:
    """Euclidean distance from ``feature`` to its nearest cluster center.

    For unit features the value lies in [0, 2]; ``halve`` rescales it to [0, 1].
    """
    f = np.asarray(feature, dtype=np.float64).ravel()
    if f.shape[0] != model.centers.shape[1]:
        raise ValueError(f"feature dim {f.shape[0]} != center dim {model.centers.shape[1]}")
    d = float(np.sqrt(((model.centers - f) ** 2).sum(1)).min())
    return d / 2.0 if halve else d


@dataclass
class FilterReport:
    ids: list[Any]
    scores: list[float]
    kept: list[bool]
    threshold: float
    mode: str

    def histogram(self, bins: int = 20) -> dict:
        counts, edges = np.histogram(self.scores, bins=bins)
        return {"counts": counts.tolist(), "edges": edges.tolist()}

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "nsd_filter.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "nsd", "kept"])
            for i, s, k in zip(self.ids, self.scores, self.kept):
                w.writerow([i, f"{s:.8f}", int(k)])
        summary = {
            "threshold": self.threshold,
            "mode": self.mode,
            "n_total": len(self.ids),
            "n_kept": int(sum(self.kept)),
            "histogram": self.histogram(),
        }
        (out / "nsd_summary.json").write_text(json.dumps(summary, indent=2))
        return path


def filter_by_nsd(samples: Sequence, features, model: ClusterModel, threshold: float,
                  mode: str = "keep_above", ids: Sequence | None = None, halve: bool = False):
    """Returns (kept samples, report).

    ``keep_above`` keeps nsd > threshold; ``keep_below`` keeps nsd <= threshold,
    so the two modes partition the input.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    if mode not in ("keep_above", "keep_below"):
        raise ValueError("mode must be 'keep_above' or 'keep_below'")
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if len(feats) != len(samples):
        raise ValueError("one feature per sample required")
    scores = [nsd(f, model, halve) for f in feats]
    kept_mask = [(s > threshold) if mode == "keep_above" else (s <= threshold) for s in scores]
    kept = [s for s, k in zip(samples, kept_mask) if k]
    report = FilterReport(list(ids) if ids is not None else list(range(len(samples))), scores, kept_mask,
                          threshold, mode)
    return kept, report
