"""Layout geometry, rule-based layout rewards, group-relative advantages and planners."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import LayoutParseError, ProtocolError

REWARD_EPS = 1e-6
ADV_EPS = 1e-6


@dataclass(frozen=True)
class BBox:
    left: int
    top: int
    right: int
    bottom: int

    def __post_init__(self):
        if not (self.left < self.right and self.top < self.bottom):
            raise ValueError(f"degenerate box {self.as_list()}")

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_list(self) -> list[int]:
        return [self.left, self.top, self.right, self.bottom]

    def translate(self, dx: int, dy: int) -> "BBox":
        return BBox(self.left + dx, self.top + dy, self.right + dx, self.bottom + dy)

    def contains(self, other: "BBox") -> bool:
        return (
            self.left <= other.left
            and self.top <= other.top
            and other.right <= self.right
            and other.bottom <= self.bottom
        )

    def within_canvas(self, w: int, h: int) -> bool:
        return self.left >= 0 and self.top >= 0 and self.right <= w and self.bottom <= h


@dataclass
class LayoutItem:
    label: str
    bbox: BBox


@dataclass
class Layout:
    items: list[LayoutItem]
    canvas: tuple[int, int] | None = None  # (w, h)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def boxes(self) -> list[BBox]:
        return [it.bbox for it in self.items]

    @property
    def labels(self) -> list[str]:
        return [it.label for it in self.items]

    def translate(self, dx: int, dy: int) -> "Layout":
        return Layout([LayoutItem(it.label, it.bbox.translate(dx, dy)) for it in self.items], self.canvas)


@dataclass(frozen=True)
class RewardWeights:
    lambda_ol: float = 0.5
    lambda_bl: float = 0.5
    eps: float = REWARD_EPS

    def __post_init__(self):
        if self.lambda_ol < 0 or self.lambda_bl < 0:
            raise ValueError("reward weights must be non-negative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class LayoutTask:
    canvas: tuple[int, int]
    labels: list[str]
    caption: str = ""
    stage: str = "coarse"
    parent_box: BBox | None = None

    def __post_init__(self):
        if self.stage not in ("coarse", "fine"):
            raise ValueError("stage must be 'coarse' or 'fine'")
        if self.stage == "fine" and self.parent_box is None:
            raise ValueError("fine-stage tasks need a parent box")


# ---------------------------------------------------------------------------
# geometry and rewards


def intersection_area(a: BBox, b: BBox) -> int:
    w = min(a.right, b.right) - max(a.left, b.left)
    h = min(a.bottom, b.bottom) - max(a.top, b.top)
    return max(w, 0) * max(h, 0)


def iou(a: BBox, b: BBox, eps: float = REWARD_EPS) -> float:
    inter = intersection_area(a, b)
    if inter == 0:
        return 0.0
    return inter / (a.area + b.area - inter + eps)


def _boxes(layout: Layout | Sequence[BBox]) -> list[BBox]:
    return layout.boxes if isinstance(layout, Layout) else list(layout)


def reward_iou(pred, gt, eps: float = REWARD_EPS) -> float:
    p, g = _boxes(pred), _boxes(gt)
    if len(p) != len(g):
        raise ValueError(f"layouts differ in length ({len(p)} vs {len(g)})")
    if not p:
        raise ValueError("layouts must be non-empty")
    return sum(iou(a, b, eps) for a, b in zip(p, g)) / len(p)


def reward_overlap(pred, eps: float = REWARD_EPS) -> float:
    p = _boxes(pred)
    n = len(p)
    if n < 2:
        return 0.0
    s = sum(iou(p[i], p[j], eps) for i in range(n) for j in range(i + 1, n))
    return -2.0 * s / (n * (n - 1))


def reward_balance(pred) -> float:
    areas = np.array([b.area for b in _boxes(pred)], dtype=np.float64)
    if areas.size == 0:
        raise ValueError("layout must be non-empty")
    return -float(areas.std() / areas.mean())


def total_reward(pred, gt, w: RewardWeights = RewardWeights()) -> tuple[float, dict[str, float]]:
    parts = {
        "iou": reward_iou(pred, gt, w.eps),
        "overlap": reward_overlap(pred, w.eps),
        "balance": reward_balance(pred),
    }
    total = parts["iou"] + w.lambda_ol * parts["overlap"] + w.lambda_bl * parts["balance"]
    return total, parts


def grpo_advantages(rewards: Sequence[float], eps: float = ADV_EPS) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("group size must be >= 2")
    centered = r - r.mean()
    return centered / (r.std() + eps)


# ---------------------------------------------------------------------------
# JSON protocol

PLANNER_PROMPT = (
    "<image>Please help me design a layout to place {l} foreground text items over the background "
    "of original size w={w}, h={h}. {caption} The foreground text items are {labels}. Place the items "
    "carefully to avoid unbalance, overlap, and out-of-bounds. The layout should contain all the text "
    "items in given order, in which each item has a bounding box described as [left, top, right, bottom] "
    "(all the values are integer numbers). Return the result by filling in the initial JSON file while "
    "keeping the label of items unchanged and do not return any extra explanation. The initial JSON is "
    "defined as: {json_template}."
)


def json_template(labels: Sequence[str]) -> str:
    return json.dumps([{"label": lab, "bbox": [0, 0, 0, 0]} for lab in labels])


def build_planner_prompt(task: LayoutTask) -> str:
    w, h = task.canvas
    return PLANNER_PROMPT.format(
        l=len(task.labels),
        w=w,
        h=h,
        caption=task.caption,
        labels=json.dumps(list(task.labels), ensure_ascii=False),
        json_template=json_template(task.labels),
    )


def layout_to_json(layout: Layout) -> str:
    return json.dumps(
        [{"label": it.label, "bbox": it.bbox.as_list()} for it in layout.items], ensure_ascii=False
    )


def json_to_layout(text: str, expected_labels: Sequence[str] | None = None, canvas=None) -> Layout:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise LayoutParseError(f"malformed JSON: {e}", raw=text) from None
    if not isinstance(data, list):
        raise LayoutParseError("layout JSON must be an array", raw=text)
    items = []
    for k, entry in enumerate(data):
        if not isinstance(entry, dict) or set(entry) != {"label", "bbox"}:
            raise LayoutParseError(f"item {k} must have exactly 'label' and 'bbox'", raw=text)
        label, bbox = entry["label"], entry["bbox"]
        if not isinstance(label, str):
            raise LayoutParseError(f"item {k}: label must be a string", raw=text)
        if (
            not isinstance(bbox, list)
            or len(bbox) != 4
            or any(isinstance(v, bool) or not isinstance(v, int) for v in bbox)
        ):
            raise LayoutParseError(f"item {k}: bbox must be four integers", raw=text)
        try:
            box = BBox(*bbox)
        except ValueError as e:
            raise LayoutParseError(f"item {k}: {e}", raw=text) from None
        items.append(LayoutItem(label, box))
    if expected_labels is not None and [it.label for it in items] != list(expected_labels):
        raise LayoutParseError(
            f"labels {[it.label for it in items]} do not match expected {list(expected_labels)}", raw=text
        )
    return Layout(items, canvas)


# ---------------------------------------------------------------------------
# planners


class Planner(Protocol):
    def plan(self, task: LayoutTask) -> Layout: ...


@dataclass
class BaselinePlanner:
    """Deterministic reference planner.

    Coarse: lines stacked vertically inside 5% margins, heights proportional to
    label length, centered horizontally. Fine: equal-width subdivision of the
    parent box with ``tracking`` pixels between glyphs.
    """

    margin_frac: float = 0.05
    tracking: int = 0
    fine_margin: int = 0

    def plan(self, task: LayoutTask) -> Layout:
        if task.stage == "coarse":
            return self._coarse(task)
        return self._fine(task)

    def _coarse(self, task: LayoutTask) -> Layout:
        w, h = task.canvas
        n = len(task.labels)
        mx, my = int(round(w * self.margin_frac)), int(round(h * self.margin_frac))
        inner_w, inner_h = w - 2 * mx, h - 2 * my
        weights = np.array([max(len(lab), 1) for lab in task.labels], dtype=np.float64)
        # integer row edges from cumulative proportional heights
        edges = np.round(np.concatenate([[0], np.cumsum(weights)]) / weights.sum() * inner_h).astype(int) + my
        items = []
        for i, lab in enumerate(task.labels):
            top, bottom = int(edges[i]), int(edges[i + 1])
            row_h = bottom - top
            box_w = min(inner_w, max(1, row_h * max(len(lab), 1)))
            left = mx + (inner_w - box_w) // 2
            if bottom <= top:
                raise ProtocolError("canvas too small for the number of lines")
            items.append(LayoutItem(lab, BBox(left, top, left + box_w, bottom)))
        return Layout(items, task.canvas)

    def _fine(self, task: LayoutTask) -> Layout:
        p = task.parent_box
        n = len(task.labels)
        left, right = p.left + self.fine_margin, p.right - self.fine_margin
        top, bottom = p.top + self.fine_margin, p.bottom - self.fine_margin
        span = right - left - self.tracking * (n - 1)
        if span < n or bottom <= top:
            raise ProtocolError("parent box too small for the requested glyphs")
        cell = span // n
        items = []
        x = left + (span - cell * n) // 2  # center the remainder
        for lab in task.labels:
            items.append(LayoutItem(lab, BBox(x, top, x + cell, bottom)))
            x += cell + self.tracking
        return Layout(items, task.canvas)


class TextCompletionClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class StubLayoutLLM:
    """Deterministic stand-in for an MLLM planner.

    Replies with the baseline layout jittered by a prompt-hashed offset so the
    full prompt -> JSON -> parse path is exercised.
    """

    def __init__(self, jitter: int = 2, malformed: bool = False):
        self.jitter = jitter
        self.malformed = malformed
        self._pending: LayoutTask | None = None

    def complete(self, prompt: str) -> str:
        if self.malformed:
            return "Sure! Here is the layout: [{label: oops}]"
        task = self._pending
        if task is None:
            raise ProtocolError("stub planner used without a task context", raw=prompt)
        layout = BaselinePlanner().plan(task)
        seed = int.from_bytes(prompt.encode("utf-8")[:8].ljust(8, b"\0"), "little") ^ len(prompt)
        rng = np.random.default_rng(seed)
        items = []
        bound = task.parent_box if task.stage == "fine" else BBox(0, 0, *task.canvas)
        for it in layout.items:
            b = it.bbox
            dx = int(rng.integers(-self.jitter, self.jitter + 1))
            dx = max(bound.left - b.left, min(dx, bound.right - b.right))
            items.append({"label": it.label, "bbox": [b.left + dx, b.top, b.right + dx, b.bottom]})
        return json.dumps(items)


@dataclass
class MLLMPlanner:
    client: TextCompletionClient

    def plan(self, task: LayoutTask) -> Layout:
        prompt = build_planner_prompt(task)
        if isinstance(self.client, StubLayoutLLM):
            self.client._pending = task
        raw = self.client.complete(prompt)
        layout = json_to_layout(_strip_fences(raw), task.labels, task.canvas)
        _validate_plan(layout, task, raw)
        return layout


def _strip_fences(raw: str) -> str:
    s = raw.strip()
    if s.startswith("```"):
        s = s.split("\n", 1)[1] if "\n" in s else s
        s = s.rsplit("```", 1)[0]
    return s


def _validate_plan(layout: Layout, task: LayoutTask, raw: str | None) -> None:
    if len(layout) != len(task.labels):
        raise ProtocolError(f"planner returned {len(layout)} boxes for {len(task.labels)} labels", raw=raw)
    w, h = task.canvas
    for it in layout.items:
        if task.stage == "coarse" and not it.bbox.within_canvas(w, h):
            raise ProtocolError(f"box {it.bbox.as_list()} leaves the {w}x{h} canvas", raw=raw)
        if task.stage == "fine" and not task.parent_box.contains(it.bbox):
            raise ProtocolError(f"glyph box {it.bbox.as_list()} leaves its parent line", raw=raw)


def plan_coarse(task: LayoutTask, planner: Planner) -> Layout:
    if task.stage != "coarse":
        raise ValueError("plan_coarse needs a coarse-stage task")
    if not task.labels:
        raise ValueError("labels must not be empty")
    layout = planner.plan(task)
    _validate_plan(layout, task, getattr(layout, "raw", None))
    return layout


def plan_fine(parent: BBox, glyph_count: int, planner: Planner, labels: Sequence[str] | None = None,
              canvas: tuple[int, int] | None = None) -> Layout:
    if glyph_count < 1:
        raise ValueError("glyph_count must be >= 1")
    labels = list(labels) if labels is not None else [str(i) for i in range(glyph_count)]
    if len(labels) != glyph_count:
        raise ValueError("labels must have glyph_count entries")
    canvas = canvas or (parent.right, parent.bottom)
    task = LayoutTask(canvas=canvas, labels=labels, stage="fine", parent_box=parent)
    layout = planner.plan(task)
    _validate_plan(layout, task, None)
    return layout


# ---------------------------------------------------------------------------
# toy GRPO harness


@dataclass
class ToyTask:
    task: LayoutTask
    gt: Layout


def make_toy_tasks(num_tasks: int = 8, seed: int = 0, canvas=(128, 128), max_items: int = 4) -> list[ToyTask]:
    """Random coarse tasks whose ground truth is a non-overlapping stack of lines."""
    rng = np.random.default_rng(seed)
    tasks = []
    w, h = canvas
    for _ in range(num_tasks):
        n = int(rng.integers(2, max_items + 1))
        labels = ["".join(rng.choice(list("abcdefgh"), size=int(rng.integers(2, 8)))) for _ in range(n)]
        band = h // n
        items = []
        for i, lab in enumerate(labels):
            bh = int(rng.integers(band // 3, band - 2))
            bw = int(rng.integers(w // 4, w - 8))
            left = int(rng.integers(0, w - bw))
            top = i * band + int(rng.integers(0, band - bh))
            items.append(LayoutItem(lab, BBox(left, top, left + bw, top + bh)))
        tasks.append(ToyTask(LayoutTask(canvas, labels), Layout(items, canvas)))
    return tasks


def _task_features(t: LayoutTask, i: int) -> list[float]:
    n = len(t.labels)
    return [1.0, i / max(n - 1, 1), n / 8.0, len(t.labels[i]) / 8.0, (i + 0.5) / n]


class ToyLayoutPolicy(nn.Module):
    """Gaussian policy over normalized (cx, cy, w, h) per item.

    A per-task embedding plus item features feed a small MLP that outputs the
    mean; the log-std is a shared learned parameter.
    """

    def __init__(self, num_tasks: int, hidden: int = 64, init_log_std: float = -1.6):
        super().__init__()
        self.task_emb = nn.Embedding(num_tasks, 16)
        self.net = nn.Sequential(nn.Linear(16 + 5, hidden), nn.Tanh(), nn.Linear(hidden, 4))
        self.log_std = nn.Parameter(torch.full((4,), init_log_std))

    def distribution(self, task_idx: int, task: LayoutTask) -> torch.distributions.Normal:
        feats = torch.tensor([_task_features(task, i) for i in range(len(task.labels))], dtype=torch.float32)
        emb = self.task_emb(torch.tensor([task_idx])).expand(len(task.labels), -1)
        mean = self.net(torch.cat([emb, feats], dim=1))
        return torch.distributions.Normal(mean, self.log_std.exp().expand_as(mean))


def decode_action(action: torch.Tensor, task: LayoutTask) -> Layout:
    """Maps unconstrained actions to integer, in-canvas, non-degenerate boxes."""
    w, h = task.canvas
    a = torch.sigmoid(action.detach()).double().numpy()
    items = []
    for lab, (cx, cy, bw, bh) in zip(task.labels, a):
        bw_px = max(1, int(round(bw * w)))
        bh_px = max(1, int(round(bh * h)))
        left = int(round(cx * w - bw_px / 2))
        top = int(round(cy * h - bh_px / 2))
        left = min(max(left, 0), w - bw_px)
        top = min(max(top, 0), h - bh_px)
        items.append(LayoutItem(lab, BBox(left, top, left + bw_px, top + bh_px)))
    return Layout(items, task.canvas)


@dataclass
class GRPOResult:
    policy: ToyLayoutPolicy
    reward_curve: list[float] = field(default_factory=list)
    update_norms: list[float] = field(default_factory=list)


def grpo_toy_train(
    policy: ToyLayoutPolicy,
    tasks: Sequence[ToyTask],
    group_size: int = 8,
    steps: int = 200,
    lr: float = 1e-2,
    weights: RewardWeights = RewardWeights(),
    seed: int = 0,
    identical_samples: bool = False,
) -> GRPOResult:
    """Policy-gradient loop with group-normalized advantages over ``group_size`` samples per task.

    ``identical_samples`` repeats one draw across the group (a control whose
    advantages, and therefore updates, are exactly zero).
    """
    if group_size < 2:
        raise ValueError("group_size must be >= 2")
    torch.manual_seed(seed)
    opt = torch.optim.Adam(policy.parameters(), lr=lr)
    result = GRPOResult(policy)
    for _ in range(steps):
        opt.zero_grad()
        loss = torch.zeros(())
        step_rewards = []
        for ti, tt in enumerate(tasks):
            dist = policy.distribution(ti, tt.task)
            if identical_samples:
                one = dist.sample()
                actions = [one] * group_size
            else:
                actions = [dist.sample() for _ in range(group_size)]
            rewards = [total_reward(decode_action(a, tt.task), tt.gt, weights)[0] for a in actions]
            adv = grpo_advantages(rewards)
            step_rewards.extend(rewards)
            for a, A in zip(actions, adv):
                loss = loss - float(A) * dist.log_prob(a).sum() / (group_size * len(tasks))
        loss.backward()
        before = [p.detach().clone() for p in policy.parameters()]
        opt.step()
        result.update_norms.append(
            float(sum((p.detach() - b).abs().sum() for p, b in zip(policy.parameters(), before)))
        )
        result.reward_curve.append(float(np.mean(step_rewards)))
    return result


@torch.no_grad()
def evaluate_policy(policy: ToyLayoutPolicy, tasks: Sequence[ToyTask], samples: int = 32,
                    weights: RewardWeights = RewardWeights(), seed: int = 123) -> float:
    """Mean total reward over ``samples`` draws per task with a fixed noise stream."""
    gen = torch.Generator().manual_seed(seed)
    rewards = []
    for ti, tt in enumerate(tasks):
        dist = policy.distribution(ti, tt.task)
        for _ in range(samples):
            a = dist.mean + dist.stddev * torch.randn(dist.mean.shape, generator=gen)
            rewards.append(total_reward(decode_action(a, tt.task), tt.gt, weights)[0])
    return float(np.mean(rewards))
