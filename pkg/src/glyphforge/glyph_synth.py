"""Procedural stylized-glyph synthesis.

Glyphs are built from a registry of stroke skeletons on a 3x3 node grid and
rasterized with analytic anti-aliasing. A style (family, stroke width, slant,
fill, texture) is applied on top, which gives the content/style factorization
the generator has to learn without depending on TrueType fonts.

Typical usage::

    style = StyleSpec(style_id=3, family=1, stroke_width=0.1, slant=0.2, fill_color=(0.9, 0.2, 0.1))
    glyph = render_glyph(5, style, 32)
    triplet = compose_triplet([5, 9], style, m=2, rng_seed=0)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DatasetLoadError, DomainError

MIN_RESOLUTION = 8
DEFAULT_RESOLUTION = 32
NUM_FAMILIES = 4
NEUTRAL_STYLE_ID = 0
SHARD_SCHEMA_VERSION = 1

DEFAULT_CHARS = (
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "abcdefghijklmnopqrstuvwxyz"
    "0123456789.!"
)


@dataclass
class RGBAGlyph:
    pixels: np.ndarray  # (H, W, 4) float in [0, 1]
    char_id: int
    style_id: int

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 4:
            raise ValueError(f"expected HxWx4 pixels, got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def resolution(self) -> int:
        return self.pixels.shape[0]

    @property
    def rgb(self) -> np.ndarray:
        return self.pixels[..., :3]

    @property
    def alpha(self) -> np.ndarray:
        return self.pixels[..., 3]


@dataclass(frozen=True)
class StyleSpec:
    style_id: int = NEUTRAL_STYLE_ID
    family: int = 0
    stroke_width: float = 0.09
    slant: float = 0.0
    fill_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    texture_id: int | None = None

    def __post_init__(self):
        if self.stroke_width <= 0:
            raise ValueError("stroke_width must be positive")
        if not -0.5 <= self.slant <= 0.5:
            raise ValueError("slant must lie in [-0.5, 0.5]")
        if not 0 <= self.family < NUM_FAMILIES:
            raise ValueError(f"family must be in [0, {NUM_FAMILIES})")
        if len(self.fill_color) != 3 or any(not 0.0 <= c <= 1.0 for c in self.fill_color):
            raise ValueError("fill_color must be an RGB triple in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fill_color"] = list(self.fill_color)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StyleSpec":
        d = dict(d)
        d["fill_color"] = tuple(d["fill_color"])
        return cls(**d)


NEUTRAL_STYLE = StyleSpec()


@dataclass
class GlyphTriplet:
    content_refs: list[RGBAGlyph]
    style_refs: list[RGBAGlyph]
    ground_truth: list[RGBAGlyph]

    def __post_init__(self):
        if not self.content_refs or not self.style_refs:
            raise ValueError("triplet needs at least one content and one style reference")
        if len(self.ground_truth) != len(self.content_refs):
            raise ValueError("ground_truth and content_refs must have equal length")
        for c, g in zip(self.content_refs, self.ground_truth):
            if c.char_id != g.char_id:
                raise ValueError("ground truth char ids must match content refs")
        style_ids = {g.style_id for g in self.ground_truth} | {s.style_id for s in self.style_refs}
        if len(style_ids) != 1:
            raise ValueError("ground truth and style refs must share one style id")

    @property
    def style_id(self) -> int:
        return self.ground_truth[0].style_id

    @property
    def char_ids(self) -> list[int]:
        return [g.char_id for g in self.ground_truth]


@dataclass
class PerturbationConfig:
    blur_sigma_range: tuple[float, float] = (0.3, 1.2)
    downsample_factors: Sequence[int] = (2, 4)
    noise_std_range: tuple[float, float] = (0.01, 0.06)
    background_palette: Sequence[tuple[float, float, float]] = (
        (1.0, 1.0, 1.0),
        (0.5, 0.5, 0.5),
        (0.95, 0.9, 0.75),
        (0.2, 0.25, 0.3),
    )
    per_op_probability: float = 0.3
    ops: Sequence[str] = ("blur", "downsample", "noise", "background")

    def __post_init__(self):
        for name in ("blur_sigma_range", "noise_std_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi")
        if not self.downsample_factors or any(int(f) < 1 for f in self.downsample_factors):
            raise ValueError("downsample_factors must be non-empty integers >= 1")
        if not self.background_palette:
            raise ValueError("background_palette must not be empty")
        if not 0.0 <= self.per_op_probability <= 1.0:
            raise ValueError("per_op_probability must lie in [0, 1]")
        unknown = set(self.ops) - {"blur", "downsample", "noise", "background"}
        if unknown:
            raise ValueError(f"unknown perturbation ops {sorted(unknown)}")


# ---------------------------------------------------------------------------
# character registry

_NODES = np.array([(x, y) for y in (0.2, 0.5, 0.8) for x in (0.2, 0.5, 0.8)])
_EDGES = [
    (a, b)
    for a in range(9)
    for b in range(a + 1, 9)
    if max(abs(_NODES[a] - _NODES[b])) <= 0.31  # neighbours incl. diagonals
]


class CharacterSet:
    """Registry mapping characters to procedural stroke skeletons."""

    def __init__(self, chars: str = DEFAULT_CHARS, seed: int = 7):
        if len(set(chars)) != len(chars):
            raise ValueError("characters must be unique")
        self.chars = chars
        self._index = {c: i for i, c in enumerate(chars)}
        self.skeletons = self._build(len(chars), seed)

    @staticmethod
    def _build(n: int, seed: int) -> list[np.ndarray]:
        rng = np.random.default_rng(seed)
        seen: set[tuple[int, ...]] = set()
        out = []
        while len(out) < n:
            k = int(rng.integers(2, 5))
            edges = tuple(sorted(rng.choice(len(_EDGES), size=k, replace=False).tolist()))
            if edges in seen:
                continue
            seen.add(edges)
            segs = np.array([np.concatenate([_NODES[_EDGES[e][0]], _NODES[_EDGES[e][1]]]) for e in edges])
            out.append(segs)
        return out

    def __len__(self) -> int:
        return len(self.chars)

    def __contains__(self, char_id: int) -> bool:
        return 0 <= char_id < len(self.chars)

    def id_of(self, ch: str) -> int:
        try:
            return self._index[ch]
        except KeyError:
            raise DomainError(f"character {ch!r} is not in the registry") from None

    def encode(self, text: str) -> list[int]:
        return [self.id_of(c) for c in text]


@lru_cache(maxsize=None)
def default_charset() -> CharacterSet:
    return CharacterSet()


# ---------------------------------------------------------------------------
# rasterization


class Rasterizer(Protocol):
    def render(self, char_id: int, style: StyleSpec, resolution: int) -> np.ndarray: ...


def _segment_distance(points: np.ndarray, segs: np.ndarray) -> np.ndarray:
    # points (P, 2), segs (S, 4) -> (P,) min distance
    a = segs[None, :, :2]
    b = segs[None, :, 2:]
    p = points[:, None, :]
    ab = b - a
    denom = np.maximum((ab**2).sum(-1), 1e-12)
    u = np.clip(((p - a) * ab).sum(-1) / denom, 0.0, 1.0)
    proj = a + u[..., None] * ab
    return np.sqrt(((p - proj) ** 2).sum(-1)).min(axis=1)


def _curve(seg: np.ndarray, bulge: float, pieces: int = 6) -> np.ndarray:
    a, b = seg[:2], seg[2:]
    mid = (a + b) / 2
    d = b - a
    normal = np.array([-d[1], d[0]])
    ctrl = mid + bulge * normal
    u = np.linspace(0, 1, pieces + 1)[:, None]
    pts = (1 - u) ** 2 * a + 2 * (1 - u) * u * ctrl + u**2 * b
    return np.concatenate([pts[:-1], pts[1:]], axis=1)


def _family_segments(skeleton: np.ndarray, family: int) -> tuple[np.ndarray, float]:
    """Returns (segments, stroke width multiplier) for a family."""
    if family == 0:
        return skeleton, 1.0
    if family == 1:
        # serif: short perpendicular ticks at every endpoint
        ticks = []
        for s in skeleton:
            d = s[2:] - s[:2]
            n = np.array([-d[1], d[0]]) / (np.linalg.norm(d) + 1e-12) * 0.06
            for p in (s[:2], s[2:]):
                ticks.append(np.concatenate([p - n, p + n]))
        return np.concatenate([skeleton, np.array(ticks)]), 0.9
    if family == 2:
        return np.concatenate([_curve(s, 0.35) for s in skeleton]), 1.0
    # family 3: double-line strokes
    offs = []
    for s in skeleton:
        d = s[2:] - s[:2]
        n = np.array([-d[1], d[0]]) / (np.linalg.norm(d) + 1e-12) * 0.035
        offs.append(np.concatenate([s[:2] + n, s[2:] + n]))
        offs.append(np.concatenate([s[:2] - n, s[2:] - n]))
    return np.array(offs), 0.55


def _texture(texture_id: int | None, resolution: int) -> np.ndarray:
    r = resolution
    yy, xx = np.meshgrid(np.arange(r) / max(r - 1, 1), np.arange(r) / max(r - 1, 1), indexing="ij")
    if texture_id in (None, 0):
        return np.ones((r, r))
    if texture_id == 1:
        return 0.55 + 0.45 * yy
    if texture_id == 2:
        return np.where((np.arange(r)[:, None] // max(r // 8, 1)) % 2 == 0, 1.0, 0.65) * np.ones((1, r))
    if texture_id == 3:
        return 0.6 + 0.4 * (xx + yy) / 2
    raise DomainError(f"unknown texture id {texture_id}")


class ProceduralRasterizer:
    def __init__(self, charset: CharacterSet | None = None):
        self.charset = charset or default_charset()

    def render(self, char_id: int, style: StyleSpec, resolution: int) -> np.ndarray:
        segs, width_mult = _family_segments(self.charset.skeletons[char_id], style.family)
        r = resolution
        c = (np.arange(r) + 0.5) / r
        yy, xx = np.meshgrid(c, c, indexing="ij")
        # undo the shear so slanted glyphs lean right for positive slant
        xs = xx + style.slant * (yy - 0.5)
        pts = np.stack([xs.ravel(), yy.ravel()], axis=1)
        dist = _segment_distance(pts, segs).reshape(r, r)
        half = style.stroke_width * width_mult / 2
        alpha = np.clip((half - dist) * r + 0.5, 0.0, 1.0)
        tex = _texture(style.texture_id, r)
        rgb = np.clip(np.asarray(style.fill_color)[None, None, :] * tex[..., None], 0.0, 1.0)
        return np.concatenate([rgb, alpha[..., None]], axis=-1)


@lru_cache(maxsize=None)
def _default_rasterizer() -> ProceduralRasterizer:
    return ProceduralRasterizer()


def render_glyph(
    char_id: int,
    style: StyleSpec,
    resolution: int = DEFAULT_RESOLUTION,
    rasterizer: Rasterizer | None = None,
) -> RGBAGlyph:
    if resolution < MIN_RESOLUTION:
        raise ValueError(f"resolution must be >= {MIN_RESOLUTION}")
    rast = rasterizer or _default_rasterizer()
    charset = getattr(rast, "charset", default_charset())
    if char_id not in charset:
        raise DomainError(f"unknown char id {char_id}")
    return RGBAGlyph(rast.render(char_id, style, resolution), char_id, style.style_id)


def compose_triplet(
    content_chars: Sequence[int],
    style: StyleSpec,
    m: int,
    rng_seed: int,
    resolution: int = DEFAULT_RESOLUTION,
    rasterizer: Rasterizer | None = None,
) -> GlyphTriplet:
    if not content_chars:
        raise ValueError("content_chars must not be empty")
    if m < 1:
        raise ValueError("m must be >= 1")
    rast = rasterizer or _default_rasterizer()
    n_chars = len(getattr(rast, "charset", default_charset()))
    rng = np.random.default_rng(rng_seed)
    pool = [c for c in range(n_chars) if c not in set(content_chars)]
    if not pool:
        pool = list(range(n_chars))
    style_chars = rng.choice(pool, size=m, replace=m > len(pool)).tolist()
    return GlyphTriplet(
        content_refs=[render_glyph(c, NEUTRAL_STYLE, resolution, rast) for c in content_chars],
        style_refs=[render_glyph(c, style, resolution, rast) for c in style_chars],
        ground_truth=[render_glyph(c, style, resolution, rast) for c in content_chars],
    )


def random_style(style_id: int, rng: np.random.Generator) -> StyleSpec:
    """Samples a style with id ``style_id``; texture is used about half the time."""
    return StyleSpec(
        style_id=style_id,
        family=int(rng.integers(NUM_FAMILIES)),
        stroke_width=float(rng.uniform(0.06, 0.16)),
        slant=float(rng.uniform(-0.35, 0.35)),
        fill_color=tuple(float(v) for v in rng.uniform(0.0, 1.0, size=3)),
        texture_id=int(rng.integers(1, 4)) if rng.random() < 0.5 else None,
    )


def make_style_bank(num_styles: int, seed: int = 0) -> list[StyleSpec]:
    rng = np.random.default_rng(seed)
    return [random_style(i + 1, rng) for i in range(num_styles)]


# ---------------------------------------------------------------------------
# perturbation and compositing


def perturb_style_refs(
    images: Sequence[RGBAGlyph], config: PerturbationConfig, rng_seed: int
) -> list[RGBAGlyph]:
    if not images:
        raise ValueError("images must not be empty")
    rng = np.random.default_rng(rng_seed)
    out = []
    for img in images:
        px = img.pixels.copy()
        r = px.shape[0]
        for op in config.ops:
            # always draw so the random stream does not depend on which ops fire
            fire = rng.random() < config.per_op_probability
            if op == "blur":
                sigma = rng.uniform(*config.blur_sigma_range)
                if fire and sigma > 0:
                    px = gaussian_filter(px, sigma=(sigma, sigma, 0), mode="reflect")
            elif op == "downsample":
                f = int(config.downsample_factors[rng.integers(len(config.downsample_factors))])
                if fire and f > 1 and r % f == 0:
                    small = px.reshape(r // f, f, r // f, f, 4).mean(axis=(1, 3))
                    px = np.repeat(np.repeat(small, f, axis=0), f, axis=1)
            elif op == "noise":
                std = rng.uniform(*config.noise_std_range)
                noise = rng.normal(0.0, 1.0, size=px.shape[:2] + (3,))
                if fire:
                    px[..., :3] = px[..., :3] + std * noise
            elif op == "background":
                bg = np.asarray(config.background_palette[rng.integers(len(config.background_palette))])
                if fire:
                    a = px[..., 3:4]
                    px[..., :3] = a * px[..., :3] + (1 - a) * bg
                    px[..., 3] = 1.0
        out.append(RGBAGlyph(np.clip(px, 0.0, 1.0), img.char_id, img.style_id))
    return out


def blend_alpha(glyph: RGBAGlyph, background: float = 0.5) -> np.ndarray:
    """Composites the glyph over a uniform background of the given gray level.

    ``background=0`` is the strict form ``alpha * rgb``.
    """
    if not 0.0 <= background <= 1.0:
        raise ValueError("background must lie in [0, 1]")
    a = glyph.alpha[..., None]
    return a * glyph.rgb + (1.0 - a) * background


# ---------------------------------------------------------------------------
# dataset shards


@dataclass
class ShardSample:
    triplet: GlyphTriplet
    split: str = "train"
    sample_id: str = ""


def generate_samples(
    count: int,
    resolution: int = DEFAULT_RESOLUTION,
    seed: int = 0,
    num_styles: int = 8,
    max_glyphs: int = 2,
    m: int = 2,
    val_fraction: float = 0.1,
) -> tuple[list[ShardSample], list[StyleSpec]]:
    styles = make_style_bank(num_styles, seed)
    rng = np.random.default_rng(seed + 1)
    n_chars = len(default_charset())
    samples = []
    for i in range(count):
        style = styles[int(rng.integers(num_styles))]
        n = int(rng.integers(1, max_glyphs + 1))
        chars = rng.choice(n_chars, size=n, replace=False).tolist()
        trip = compose_triplet(chars, style, m, int(rng.integers(2**31)), resolution)
        split = "val" if rng.random() < val_fraction else "train"
        samples.append(ShardSample(trip, split, f"{i:06d}"))
    return samples, styles


def write_shard(samples: Sequence[ShardSample], out_dir: str | Path, styles: Sequence[StyleSpec] = ()) -> Path:
    out = Path(out_dir)
    (out / "blobs").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        paths: dict[str, list[str]] = {}
        for role, glyphs in (
            ("content", s.triplet.content_refs),
            ("style", s.triplet.style_refs),
            ("ground_truth", s.triplet.ground_truth),
        ):
            paths[role] = []
            for j, g in enumerate(glyphs):
                rel = f"blobs/{s.sample_id}_{role}_{j}_c{g.char_id}.npy"
                np.save(out / rel, g.pixels.astype(np.float32))
                paths[role].append(rel)
        entries.append(
            {
                "id": s.sample_id,
                "char_ids": s.triplet.char_ids,
                "style_char_ids": [g.char_id for g in s.triplet.style_refs],
                "style_id": s.triplet.style_id,
                "paths": paths,
                "split": s.split,
            }
        )
    manifest = {
        "schema_version": SHARD_SCHEMA_VERSION,
        "kind": "glyph_triplets",
        "styles": [st.to_dict() for st in styles],
        "samples": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_shard(shard_dir: str | Path, split: str | None = None) -> list[ShardSample]:
    root = Path(shard_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetLoadError(f"cannot read manifest in {root}: {e}") from e
    if manifest.get("schema_version") != SHARD_SCHEMA_VERSION or manifest.get("kind") != "glyph_triplets":
        raise DatasetLoadError(
            f"unsupported shard schema {manifest.get('kind')!r} v{manifest.get('schema_version')}"
        )
    out = []
    try:
        for e in manifest["samples"]:
            if split is not None and e["split"] != split:
                continue
            sid = e["style_id"]

            def load(role: str, char_ids: list[int], style_id: int) -> list[RGBAGlyph]:
                return [
                    RGBAGlyph(np.load(root / p).astype(np.float64), c, style_id)
                    for p, c in zip(e["paths"][role], char_ids)
                ]

            trip = GlyphTriplet(
                content_refs=load("content", e["char_ids"], NEUTRAL_STYLE_ID),
                style_refs=load("style", e["style_char_ids"], sid),
                ground_truth=load("ground_truth", e["char_ids"], sid),
            )
            out.append(ShardSample(trip, e["split"], e["id"]))
    except (KeyError, TypeError, OSError, ValueError) as err:
        raise DatasetLoadError(f"malformed shard entry: {err}") from err
    return out


def load_shard_styles(shard_dir: str | Path) -> list[StyleSpec]:
    manifest = json.loads((Path(shard_dir) / "manifest.json").read_text())
    return [StyleSpec.from_dict(d) for d in manifest.get("styles", [])]
