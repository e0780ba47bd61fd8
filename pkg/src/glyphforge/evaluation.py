"""Text-rendering metrics from OCR line outputs, plus the benchmark runner.

Detections are paired with ground truth by greedy IoU matching; precision,
recall and accuracy are exact-match based and NED averages over all
ground-truth lines (an unmatched line counts as distance 1).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import numpy as np

from .layout import BBox, iou

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
DEFAULT_IOU_THRESH = 0.5


@dataclass
class OCRLine:
    text: str
    bbox: BBox
    confidence: float = 1.0

    def to_dict(self) -> dict:
        return {"text": self.text, "bbox": self.bbox.as_list(), "confidence": self.confidence}

    @classmethod
    def from_dict(cls, d: dict) -> "OCRLine":
        return cls(d["text"], BBox(*d["bbox"]), float(d.get("confidence", 1.0)))


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]]
    unmatched_pred: list[int]
    unmatched_gt: list[int]


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f_score: float
    ned: float
    accuracy: float
    n_pred: int
    n_gt: int
    n_matched: int
    n_correct: int = 0
    empty_gt: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def ned(a: str, b: str) -> float:
    longest = max(len(a), len(b))
    if longest == 0:
        return 0.0
    return levenshtein(a, b) / longest


def match_lines(
    pred: Sequence[OCRLine], gt: Sequence[OCRLine], iou_thresh: float = DEFAULT_IOU_THRESH
) -> MatchResult:
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")
    cands = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            v = iou(p.bbox, g.bbox)
            if v >= iou_thresh:
                cands.append((-v, i, j))
    cands.sort()  # descending IoU, then lower pred index, then lower gt index
    used_p, used_g, pairs = set(), set(), []
    for neg_v, i, j in cands:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j, -neg_v))
    return MatchResult(
        pairs=pairs,
        unmatched_pred=[i for i in range(len(pred)) if i not in used_p],
        unmatched_gt=[j for j in range(len(gt)) if j not in used_g],
    )


def compute_metrics(match: MatchResult, pred: Sequence[OCRLine], gt: Sequence[OCRLine]) -> MetricsReport:
    n_pred, n_gt = len(pred), len(gt)
    tp = sum(1 for i, j, _ in match.pairs if pred[i].text == gt[j].text)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gt if n_gt else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    best = {j: pred[i].text for i, j, _ in match.pairs}
    if n_gt:
        ned_mean = sum(ned(best.get(j, ""), g.text) if j in best else 1.0 for j, g in enumerate(gt)) / n_gt
    else:
        ned_mean = 0.0
    return MetricsReport(
        precision=precision,
        recall=recall,
        f_score=f,
        ned=ned_mean,
        accuracy=recall,  # exact-match rate over ground-truth lines
        n_pred=n_pred,
        n_gt=n_gt,
        n_matched=len(match.pairs),
        n_correct=tp,
        empty_gt=n_gt == 0,
    )


def evaluate_lines(pred: Sequence[OCRLine], gt: Sequence[OCRLine], iou_thresh: float = DEFAULT_IOU_THRESH) -> MetricsReport:
    return compute_metrics(match_lines(pred, gt, iou_thresh), pred, gt)


# ---------------------------------------------------------------------------
# clients


class OCRClient(Protocol):
    def read(self, image: np.ndarray, case: "BenchCase") -> list[OCRLine]: ...


class OracleOCR:
    """Returns the case's ground-truth lines regardless of the image."""

    def read(self, image, case):
        return [OCRLine(g.text, g.bbox, 1.0) for g in case.gt_lines]


class EmptyOCR:
    def read(self, image, case):
        return []


class NoisyOCR:
    """Ground truth with seeded per-character corruption."""

    def __init__(self, char_error_rate: float = 0.2, seed: int = 0, alphabet: str = "abcdefghijklmnopqrstuvwxyz"):
        self.rate = char_error_rate
        self.seed = seed
        self.alphabet = alphabet

    def read(self, image, case):
        digest = hashlib.sha256(f"{self.seed}:{case.case_id}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        out = []
        for g in case.gt_lines:
            chars = [
                self.alphabet[rng.integers(len(self.alphabet))] if rng.random() < self.rate else c
                for c in g.text
            ]
            out.append(OCRLine("".join(chars), g.bbox, 1.0))
        return out


class ExternalScorer(Protocol):
    def score(self, images: Sequence[np.ndarray], references: Sequence[np.ndarray] | None = None) -> float: ...


class StubScorer:
    """Deterministic image-statistics scorer (mean absolute difference to references, or mean intensity)."""

    def score(self, images, references=None):
        if references is None:
            return float(np.mean([np.asarray(im).mean() for im in images]))
        return -float(np.mean([np.abs(np.asarray(a) - np.asarray(b)).mean() for a, b in zip(images, references)]))


# ---------------------------------------------------------------------------
# benchmark runner


@dataclass
class BenchCase:
    case_id: str
    inputs: dict[str, Any]
    gt_lines: list[OCRLine]

    @classmethod
    def from_dict(cls, d: dict) -> "BenchCase":
        return cls(str(d["id"]), dict(d.get("inputs", {})), [OCRLine.from_dict(x) for x in d["gt_lines"]])

    def to_dict(self) -> dict:
        return {"id": self.case_id, "inputs": self.inputs, "gt_lines": [g.to_dict() for g in self.gt_lines]}


def load_cases(path: str | Path) -> list[BenchCase]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise ValueError("case manifest must be a JSON list")
    return [BenchCase.from_dict(d) for d in data]


def identity_system(case: BenchCase) -> np.ndarray:
    """Returns the case's input image (or a blank canvas) unchanged."""
    img = case.inputs.get("image")
    if isinstance(img, str) and img:
        from PIL import Image

        return np.asarray(Image.open(img).convert("RGB"), dtype=np.float64) / 255.0
    w, h = case.inputs.get("canvas", [64, 64])
    return np.ones((h, w, 3))


@dataclass
class BenchmarkResult:
    report: MetricsReport
    rows: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "aggregate": self.report.to_dict(),
            "cases": self.rows,
            "failures": self.failures,
        }


def run_benchmark(
    cases: Sequence[BenchCase],
    system: Callable[[BenchCase], np.ndarray],
    ocr: OCRClient,
    iou_thresh: float = DEFAULT_IOU_THRESH,
) -> BenchmarkResult:
    rows, failures, reports = [], [], []
    for case in cases:
        t0 = time.perf_counter()
        try:
            image = system(case)
            pred = ocr.read(image, case)
            rep = evaluate_lines(pred, case.gt_lines, iou_thresh)
        except Exception as e:  # one bad case must not sink the run
            log.warning("case %s failed: %s", case.case_id, e)
            failures.append({"id": case.case_id, "error": f"{type(e).__name__}: {e}"})
            continue
        reports.append(rep)
        rows.append({"id": case.case_id, **rep.to_dict(), "seconds": round(time.perf_counter() - t0, 6)})
    if not reports:
        raise RuntimeError(f"all {len(cases)} benchmark cases failed")

    def avg(key: str) -> float:
        return float(np.mean([getattr(r, key) for r in reports]))

    agg = MetricsReport(
        precision=avg("precision"),
        recall=avg("recall"),
        f_score=avg("f_score"),
        ned=avg("ned"),
        accuracy=avg("accuracy"),
        n_pred=sum(r.n_pred for r in reports),
        n_gt=sum(r.n_gt for r in reports),
        n_matched=sum(r.n_matched for r in reports),
        n_correct=sum(r.n_correct for r in reports),
        empty_gt=any(r.empty_gt for r in reports),
    )
    return BenchmarkResult(agg, rows, failures)


def write_report(result: BenchmarkResult, out_dir: str | Path, include_timing: bool = False) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = result.to_json()
    if not include_timing:
        payload["cases"] = [{k: v for k, v in r.items() if k != "seconds"} for r in payload["cases"]]
    jpath = out / "report.json"
    jpath.write_text(json.dumps(payload, indent=2, sort_keys=True))
    cpath = out / "cases.csv"
    fields = ["id", "precision", "recall", "f_score", "ned", "accuracy", "n_pred", "n_gt", "n_matched", "n_correct"]
    with cpath.open("w", newline="") as fh:
        fh.write(f"# schema_version={REPORT_SCHEMA_VERSION}\n")
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(payload["cases"])
    return jpath, cpath
