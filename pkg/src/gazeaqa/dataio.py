"""Dataset records, line-delimited file formats and the synthetic generator.

Manifest, scanpath and latent files are JSON Lines (one object per line,
UTF-8).  Images are 8-bit RGB PNG files decoded to ``[0, 1]`` by dividing
by 255.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image


class DataValidationError(ValueError):
    """A record violates a range, uniqueness or shape constraint."""


class ManifestParseError(ValueError):
    """A line of a line-delimited file could not be parsed."""

    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


SCORE_MIN = 1.0
SCORE_MAX = 10.0


@dataclass(frozen=True, eq=False)
class ImageRecord:
    id: str
    pixels: np.ndarray  # H x W x C, float64 in [0, 1]
    score: float
    category: str = ""
    path: str | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3:
            raise DataValidationError(f"{self.id}: pixels must be HxWxC, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min(initial=0.0) < 0.0 or px.max(initial=0.0) > 1.0:
            raise DataValidationError(f"{self.id}: pixel values outside [0, 1]")
        if not SCORE_MIN <= self.score <= SCORE_MAX:
            raise DataValidationError(f"{self.id}: score {self.score} outside [1, 10]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class Fixation:
    x: float
    y: float
    duration_ms: float


@dataclass(frozen=True)
class Scanpath:
    image_id: str
    observer_id: str
    fixations: tuple[Fixation, ...]

    def __post_init__(self):
        fx = tuple(f if isinstance(f, Fixation) else Fixation(*map(float, f)) for f in self.fixations)
        if not fx:
            raise DataValidationError(f"scanpath {self.image_id}/{self.observer_id} has no fixations")
        for f in fx:
            if not (0.0 <= f.x <= 1.0 and 0.0 <= f.y <= 1.0):
                raise DataValidationError(
                    f"scanpath {self.image_id}/{self.observer_id}: fixation ({f.x}, {f.y}) outside [0,1]^2")
            if not f.duration_ms > 0.0 or not math.isfinite(f.duration_ms):
                raise DataValidationError(
                    f"scanpath {self.image_id}/{self.observer_id}: non-positive duration {f.duration_ms}")
        object.__setattr__(self, "fixations", fx)

    def as_array(self) -> np.ndarray:
        """Fixations as an ``(n, 3)`` array of ``(x, y, duration_ms)``."""
        return np.array([(f.x, f.y, f.duration_ms) for f in self.fixations], dtype=np.float64)


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    split_seed: int = 0
    train_fraction: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise DataValidationError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise DataValidationError(f"duplicate id {r.id!r}")
            seen.add(r.id)
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self):
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 200
    image_size: tuple[int, int] = (64, 64)
    alpha: float = 1.0
    beta: float = 1.0
    noise_sigma: float = 0.3
    observers_per_image: int = 8
    fixations_per_path: int = 10
    center_bias_sigma: float = 0.2
    saccade_shape: float = 2.0
    saccade_scale: float = 0.1
    seed: int = 0
    saliency_sigma: float = 0.05
    saliency_weight: float = 0.7

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if self.alpha < 0 or self.beta < 0:
            raise DataValidationError("alpha and beta must be non-negative")
        if self.noise_sigma < 0:
            raise DataValidationError("noise_sigma must be non-negative")
        for name in ("n_images", "observers_per_image", "fixations_per_path"):
            if getattr(self, name) < 1:
                raise DataValidationError(f"{name} must be >= 1")
        if min(self.image_size) < 1:
            raise DataValidationError("image_size entries must be >= 1")
        if self.center_bias_sigma <= 0 or self.saliency_sigma <= 0:
            raise DataValidationError("density widths must be positive")
        if self.saccade_shape <= 0 or self.saccade_scale <= 0:
            raise DataValidationError("saccade gamma parameters must be positive")
        if not 0.0 <= self.saliency_weight <= 1.0:
            raise DataValidationError("saliency_weight must lie in [0, 1]")


# ---------------------------------------------------------------------------
# line-delimited IO


def _iter_json_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ManifestParseError(path, lineno, "record is not a JSON object")
            yield lineno, obj


def _require(obj, keys, path, lineno):
    missing = [k for k in keys if k not in obj]
    if missing:
        raise ManifestParseError(path, lineno, f"missing field(s) {', '.join(missing)}")


def _dump_line(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=False) + "\n"


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def write_image(path, pixels: np.ndarray) -> None:
    arr = np.rint(np.asarray(pixels) * 255.0).clip(0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def load_manifest(path, split_seed: int = 0, train_fraction: float = 0.8,
                  image_shape: Sequence[int] | None = None) -> DatasetManifest:
    """Load a manifest and decode every referenced image.

    ``path`` entries are resolved relative to the manifest's directory.  When
    ``image_shape`` is given each decoded image must match it exactly.
    """
    path = Path(path)
    root = path.parent
    records = []
    seen: dict[str, int] = {}
    for lineno, obj in _iter_json_lines(path):
        _require(obj, ("id", "path", "score", "category"), path, lineno)
        rid = str(obj["id"])
        if rid in seen:
            raise DataValidationError(f"{path}:{lineno}: duplicate id {rid!r} (first on line {seen[rid]})")
        seen[rid] = lineno
        try:
            score = float(obj["score"])
        except (TypeError, ValueError):
            raise ManifestParseError(path, lineno, f"score {obj['score']!r} is not a number") from None
        if not SCORE_MIN <= score <= SCORE_MAX:
            raise DataValidationError(f"{path}:{lineno}: score {score} outside [1, 10]")
        img_path = root / obj["path"]
        try:
            pixels = read_image(img_path)
        except OSError as exc:
            raise DataValidationError(f"{path}:{lineno}: cannot read image {img_path}: {exc}") from None
        if image_shape is not None and tuple(pixels.shape) != tuple(image_shape):
            raise DataValidationError(
                f"{path}:{lineno}: image {img_path} has shape {pixels.shape}, expected {tuple(image_shape)}")
        records.append(ImageRecord(rid, pixels, score, str(obj["category"]), str(obj["path"])))
    return DatasetManifest(tuple(records), split_seed, train_fraction)


def write_manifest(path, records: Iterable[ImageRecord], image_dir: str = "images") -> None:
    """Write records and their PNG payloads; image paths are relative to ``path``."""
    path = Path(path)
    (path.parent / image_dir).mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            rel = r.path or f"{image_dir}/{r.id}.png"
            write_image(path.parent / rel, r.pixels)
            fh.write(_dump_line({"id": r.id, "path": rel, "score": r.score, "category": r.category}))


def load_scanpaths(path) -> list[Scanpath]:
    out = []
    for lineno, obj in _iter_json_lines(path):
        _require(obj, ("image_id", "observer_id", "fixations"), path, lineno)
        fx = obj["fixations"]
        if not isinstance(fx, list):
            raise ManifestParseError(path, lineno, "fixations must be a list")
        fixations = []
        for f in fx:
            if not (isinstance(f, list) and len(f) == 3):
                raise ManifestParseError(path, lineno, f"fixation {f!r} is not an [x, y, duration_ms] triple")
            fixations.append(Fixation(float(f[0]), float(f[1]), float(f[2])))
        try:
            out.append(Scanpath(str(obj["image_id"]), str(obj["observer_id"]), tuple(fixations)))
        except DataValidationError as exc:
            raise DataValidationError(f"{path}:{lineno}: {exc}") from None
    return out


def write_scanpaths(path, scanpaths: Iterable[Scanpath]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sp in scanpaths:
            fh.write(_dump_line({
                "image_id": sp.image_id,
                "observer_id": sp.observer_id,
                "fixations": [[f.x, f.y, f.duration_ms] for f in sp.fixations],
            }))


def group_by_image(scanpaths: Iterable[Scanpath]) -> dict[str, list[Scanpath]]:
    groups: dict[str, list[Scanpath]] = defaultdict(list)
    for sp in scanpaths:
        groups[sp.image_id].append(sp)
    return dict(groups)


def load_latents(path) -> dict[str, tuple[float, float]]:
    out = {}
    for lineno, obj in _iter_json_lines(path):
        _require(obj, ("id", "z_s", "z_g"), path, lineno)
        out[str(obj["id"])] = (float(obj["z_s"]), float(obj["z_g"]))
    return out


def write_latents(path, latents: dict[str, tuple[float, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rid, (zs, zg) in latents.items():
            fh.write(_dump_line({"id": rid, "z_s": zs, "z_g": zg}))


# ---------------------------------------------------------------------------
# splitting


def split(manifest: DatasetManifest) -> tuple[set[str], set[str]]:
    """Deterministic train/test partition.

    Ids are sorted lexicographically and permuted with numpy's Philox-4x64
    counter-based generator seeded by ``split_seed``; the first
    ``floor(train_fraction * N)`` become the training set.
    """
    if len(manifest) == 0:
        raise DataValidationError("cannot split an empty manifest")
    ids = sorted(manifest.ids)
    n_train = train_count(len(ids), manifest.train_fraction)
    perm = np.random.Generator(np.random.Philox(manifest.split_seed)).permutation(len(ids))
    train = {ids[i] for i in perm[:n_train]}
    return train, set(ids) - train


def train_count(n: int, fraction: float) -> int:
    # small guard so exact products like 10 * 0.8 are not floored to 7
    return int(math.floor(fraction * n + 1e-9))


def split_ids(ids: Sequence[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Same algorithm as :func:`split`, on bare ids, returning sorted lists."""
    ids = sorted(ids)
    n_train = train_count(len(ids), fraction)
    perm = np.random.Generator(np.random.Philox(seed)).permutation(len(ids))
    train = sorted(ids[i] for i in perm[:n_train])
    test = sorted(set(ids) - set(train))
    return train, test


# ---------------------------------------------------------------------------
# synthetic data

MOTIFS = ("disk", "square", "triangle", "ring")
FOCAL_RADIUS = 0.28
MOTIF_RADIUS = 0.11
BACKGROUND_LEVEL = 0.45
GRADIENT_STRENGTH = 0.3


def semantic_effect(z_s):
    """Odd, monotone map of the semantic latent onto [-1, 1]."""
    return np.tanh(2.0 * np.asarray(z_s)) / math.tanh(2.0)


def compositional_effect(z_g):
    """Odd, monotone map of the compositional latent onto [-1, 1]."""
    return np.sin(0.5 * math.pi * np.asarray(z_g))


def focal_point(z_g: float) -> tuple[float, float]:
    """Focal point on a 270 degree arc around the image centre, as (x, y).

    ``x`` is even in ``z_g`` and ``y - 0.5`` is odd, so ``-z_g`` lands on the
    vertical mirror of the ``z_g`` position.
    """
    angle = math.pi * (1.0 + 0.75 * z_g)
    return 0.5 + FOCAL_RADIUS * math.cos(angle), 0.5 + FOCAL_RADIUS * math.sin(angle)


def motif_index(z_s: float) -> int:
    return min(int((z_s + 1.0) / 2.0 * len(MOTIFS)), len(MOTIFS) - 1)


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def render_image(z_s: float, z_g: float, size: tuple[int, int] = (64, 64)) -> np.ndarray:
    """Render an RGB image from the two latents, quantized to multiples of 1/255.

    ``z_s`` picks the foreground motif and its hue.  ``z_g`` places the motif
    on an arc, sets the strength and sign of a horizontal background
    luminance ramp and the foreground/background contrast.  Ramp and contrast
    are even functions of ``z_g`` and the arc maps ``-z_g`` to the vertical
    mirror position, so the sign of ``z_g`` (and hence the compositional
    score term) is carried by where the motif sits, not by any
    position-free image statistic.
    """
    h, w = size
    v, u = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    fx, fy = focal_point(z_g)
    ramp = GRADIENT_STRENGTH * math.cos(2.0 * math.pi * z_g)
    bg = BACKGROUND_LEVEL + ramp * (u - 0.5)
    img = np.repeat(bg[..., None], 3, axis=2)

    dx, dy = u - fx, v - fy
    r = MOTIF_RADIUS
    kind = MOTIFS[motif_index(z_s)]
    if kind == "disk":
        mask = dx**2 + dy**2 <= r**2
    elif kind == "square":
        mask = (np.abs(dx) <= 0.8 * r) & (np.abs(dy) <= 0.8 * r)
    elif kind == "triangle":
        mask = (dy <= 0.8 * r) & (dy >= -r + 2.2 * np.abs(dx))
    else:
        d2 = dx**2 + dy**2
        mask = (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)

    contrast = 0.35 + 0.1 * math.cos(3.0 * math.pi * z_g)
    hue = 0.8 * (z_s + 1.0) / 2.0
    rgb = np.array(_hsv_to_rgb(hue, 0.75, 1.0))
    img[mask] = np.clip(rgb * (BACKGROUND_LEVEL + contrast) / rgb.max(), 0.0, 1.0)
    img = np.clip(img, 0.0, 1.0)
    return np.rint(img * 255.0) / 255.0


def fixation_mixture_sample(rng: np.random.Generator, n: int, focal: tuple[float, float],
                            config: SynthConfig) -> np.ndarray:
    """Draw ``n`` points from the center-bias / saliency mixture, clipped to [0,1]^2."""
    pick = rng.random(n) < config.saliency_weight
    centre = np.array([0.5, 0.5]) + config.center_bias_sigma * rng.standard_normal((n, 2))
    sal = np.asarray(focal) + config.saliency_sigma * rng.standard_normal((n, 2))
    return np.clip(np.where(pick[:, None], sal, centre), 0.0, 1.0)


def sample_scanpath(rng: np.random.Generator, focal: tuple[float, float], config: SynthConfig) -> np.ndarray:
    """One observer's fixations as an ``(n, 3)`` array.

    The first fixation is drawn from the centre-bias density.  Each later one
    draws a target from the mixture density and a saccade amplitude from
    Gamma(saccade_shape, saccade_scale); the eye moves towards the target by
    that amplitude, landing on the target when the amplitude overshoots it.
    Coordinates are clipped at the image border.
    """
    n = config.fixations_per_path
    pos = np.clip(0.5 + config.center_bias_sigma * rng.standard_normal(2), 0.0, 1.0)
    targets = fixation_mixture_sample(rng, n - 1, focal, config) if n > 1 else np.empty((0, 2))
    amps = rng.gamma(config.saccade_shape, config.saccade_scale, size=n - 1)
    durations = rng.lognormal(mean=math.log(220.0), sigma=0.35, size=n)
    out = np.empty((n, 3))
    out[0, :2] = pos
    for k in range(1, n):
        step = targets[k - 1] - pos
        dist = float(np.hypot(*step))
        if amps[k - 1] < dist:
            pos = pos + step * (amps[k - 1] / dist)
        else:
            pos = targets[k - 1].copy()
        pos = np.clip(pos, 0.0, 1.0)
        out[k, :2] = pos
    out[:, 2] = durations
    return out


def gen_synthetic(config: SynthConfig, id_prefix: str = "img"):
    """Generate images, scanpaths and the latents they were rendered from.

    Returns ``(records, scanpaths, latents)`` where ``latents`` maps id to
    ``(z_s, z_g)``.  Scores are ``5.5 + alpha*f_s(z_s) + beta*f_g(z_g) + noise``
    clipped to [1, 10]; the clip censors tails like real MOS bounds.
    """
    rng = np.random.Generator(np.random.Philox(config.seed))
    n = config.n_images
    z = rng.uniform(-1.0, 1.0, size=(n, 2))
    noise = config.noise_sigma * rng.standard_normal(n) if config.noise_sigma > 0 else np.zeros(n)
    records, paths, latents = [], [], {}
    width = len(str(max(n - 1, 0)))
    for i in range(n):
        zs, zg = float(z[i, 0]), float(z[i, 1])
        rid = f"{id_prefix}{i:0{max(width, 5)}d}"
        raw = 5.5 + config.alpha * float(semantic_effect(zs)) + config.beta * float(compositional_effect(zg)) + noise[i]
        score = float(min(max(raw, SCORE_MIN), SCORE_MAX))
        pixels = render_image(zs, zg, config.image_size)
        records.append(ImageRecord(rid, pixels, score, MOTIFS[motif_index(zs)], f"images/{rid}.png"))
        latents[rid] = (zs, zg)
        focal = focal_point(zg)
        for o in range(config.observers_per_image):
            arr = sample_scanpath(rng, focal, config)
            paths.append(Scanpath(rid, f"obs{o:02d}", tuple(Fixation(*map(float, row)) for row in arr)))
    return records, paths, latents


def write_synthetic(out_dir, records, scanpaths, latents) -> None:
    """Write the ``images/``, ``manifest``, ``scanpaths`` and ``latents`` layout."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest", records)
    write_scanpaths(out / "scanpaths", scanpaths)
    write_latents(out / "latents", latents)


def load_synthetic(out_dir, split_seed: int = 0, train_fraction: float = 0.8):
    out = Path(out_dir)
    manifest = load_manifest(out / "manifest", split_seed, train_fraction)
    paths = load_scanpaths(out / "scanpaths")
    latents = load_latents(out / "latents") if (out / "latents").exists() else {}
    return manifest, paths, latents


def images_array(records: Sequence[ImageRecord]) -> np.ndarray:
    """Stack record pixels into an ``(N, H, W, C)`` float64 array."""
    if not records:
        return np.zeros((0, 0, 0, 0))
    return np.stack([r.pixels for r in records])

