"""Deterministic synthetic shape corpus and the resize/crop augmentation.

Images are 32x32 float RGB in [0, 1]: one anti-aliased shape (circle, cross,
square, or triangle) over a solid background.  Each class always renders in
its own fixed fill color, so class identity survives spatial pooling and the
evaluation embedder can separate classes.  Prompts follow the closed template
"a <class> on <background>"; the held-out subject reuses one class with a
fill color no generic class uses, so subject identity is a genuine rare
attribute.

Every image derives its own seed from (master seed, image index), so corpus
generation is order-independent and reproducible image by image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autograd import resize_array
from .errors import ConfigError

CLASS_FILLS: dict[str, tuple[float, float, float]] = {
    "circle": (0.80, 0.18, 0.18),
    "cross": (0.20, 0.65, 0.25),
    "square": (0.92, 0.80, 0.20),
    "triangle": (0.55, 0.28, 0.72),
}

BACKGROUNDS: dict[str, tuple[float, float, float]] = {
    "dark": (0.10, 0.10, 0.13),
    "light": (0.78, 0.80, 0.82),
    "blue": (0.16, 0.28, 0.55),
}

CLASSES = ("circle", "cross", "square", "triangle")

SUBJECT_TOKEN = "<S*>"


@dataclass(frozen=True)
class SyntheticSpec:
    """Rendering distribution for the desk corpus.

    Every class draws in one fixed fill color, and the subject's fill must
    not collide with any class fill, so the subject stays an attribute the
    generic sampler can never produce.
    """

    image_size: int = 32
    classes: tuple[str, ...] = CLASSES
    samples_per_class: int = 200
    backgrounds: Mapping[str, tuple[float, float, float]] = field(
        default_factory=lambda: dict(BACKGROUNDS)
    )
    fills: Mapping[str, tuple[float, float, float]] = field(
        default_factory=lambda: dict(CLASS_FILLS)
    )
    subject_class: str = "circle"
    subject_fill: tuple[float, float, float] = (0.95, 0.52, 0.12)
    subject_count: int = 5
    size_range: tuple[float, float] = (7.0, 11.0)
    center_jitter: float = 4.0

    def __post_init__(self):
        if self.subject_class not in self.classes:
            raise ConfigError("subject class must be one of the corpus classes")
        missing = set(self.classes) - set(self.fills)
        if missing:
            raise ConfigError(f"classes without a fill color: {sorted(missing)}")
        for name, rgb in self.fills.items():
            if max(abs(a - b) for a, b in zip(rgb, self.subject_fill)) < 1e-6:
                raise ConfigError(
                    f"subject fill collides with the fill of class '{name}'"
                )
        known = {"circle", "cross", "square", "triangle"}
        unknown = set(self.classes) - known
        if unknown:
            raise ConfigError(f"no renderer for classes: {sorted(unknown)}")
        if self.subject_count < 2:
            raise ConfigError("need at least two subject images")


@dataclass(frozen=True)
class Example:
    image: np.ndarray
    prompt: str
    class_name: str
    background: str


@dataclass(frozen=True)
class SyntheticDataset:
    spec: SyntheticSpec
    examples: tuple[Example, ...]
    subject_images: tuple[np.ndarray, ...]
    subject_prompts: tuple[str, ...]

    def images(self) -> np.ndarray:
        return np.stack([e.image for e in self.examples])

    def class_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {c: 0 for c in self.spec.classes}
        for e in self.examples:
            counts[e.class_name] += 1
        return counts


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _shape_sdf(name: str, px: np.ndarray, py: np.ndarray, size: float) -> np.ndarray:
    """Signed distance (pixels) to the shape boundary, negative inside."""
    if name == "circle":
        return np.sqrt(px * px + py * py) - size
    if name == "square":
        return np.maximum(np.abs(px), np.abs(py)) - size * 0.9
    if name == "cross":
        w = size * 0.36
        bar_h = np.maximum(np.abs(px) - size, np.abs(py) - w)
        bar_v = np.maximum(np.abs(px) - w, np.abs(py) - size)
        return np.minimum(bar_h, bar_v)
    if name == "triangle":
        # apex-up isoceles triangle via three outward half-planes
        apex = np.array([0.0, -size])
        left = np.array([-size, size * 0.8])
        right = np.array([size, size * 0.8])
        d = None
        for a, b in ((apex, right), (right, left), (left, apex)):
            ex, ey = b[0] - a[0], b[1] - a[1]
            norm = np.hypot(ex, ey)
            nx, ny = ey / norm, -ex / norm  # outward for clockwise winding
            plane = nx * (px - a[0]) + ny * (py - a[1])
            d = plane if d is None else np.maximum(d, plane)
        return d
    raise ConfigError(f"no renderer for class '{name}'")


def render_shape(
    name: str,
    fill: tuple[float, float, float],
    background: tuple[float, float, float],
    center: tuple[float, float],
    size: float,
    image_size: int,
) -> np.ndarray:
    ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    sdf = _shape_sdf(name, xs - center[0], ys - center[1], size)
    alpha = np.clip(0.5 - sdf, 0.0, 1.0)[..., None]  # 1px anti-alias band
    bg = np.asarray(background, dtype=np.float64)
    fg = np.asarray(fill, dtype=np.float64)
    return bg + alpha * (fg - bg)


def _draw(spec: SyntheticSpec, rng: np.random.Generator, class_name: str, fill):
    names = sorted(spec.backgrounds)
    bg_name = names[rng.integers(len(names))]
    half = spec.image_size / 2.0
    center = (
        half + rng.uniform(-spec.center_jitter, spec.center_jitter),
        half + rng.uniform(-spec.center_jitter, spec.center_jitter),
    )
    size = rng.uniform(*spec.size_range)
    img = render_shape(
        class_name, fill, spec.backgrounds[bg_name], center, size, spec.image_size
    )
    return img, bg_name


def generate_synthetic_dataset(spec: SyntheticSpec, seed: int) -> SyntheticDataset:
    """Render the full generic corpus plus the held-out subject set."""
    examples: list[Example] = []
    index = 0
    for class_name in spec.classes:
        for _ in range(spec.samples_per_class):
            rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
            img, bg_name = _draw(spec, rng, class_name, spec.fills[class_name])
            examples.append(
                Example(
                    image=img,
                    prompt=f"a {class_name} on {bg_name}",
                    class_name=class_name,
                    background=bg_name,
                )
            )
            index += 1

    subject_images: list[np.ndarray] = []
    subject_prompts: list[str] = []
    for i in range(spec.subject_count):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 10**6 + i)))
        img, bg_name = _draw(spec, rng, spec.subject_class, spec.subject_fill)
        subject_images.append(img)
        subject_prompts.append(f"{SUBJECT_TOKEN} {spec.subject_class} on {bg_name}")

    return SyntheticDataset(
        spec=spec,
        examples=tuple(examples),
        subject_images=tuple(subject_images),
        subject_prompts=tuple(subject_prompts),
    )


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def augment(image: np.ndarray, seed: int) -> np.ndarray:
    """Random upscale by Uniform[1.0, 1.25], then center-crop to the input size.

    A drawn factor of exactly 1.0 reproduces the input bit for bit (the
    resize matrices reduce to the identity).  Values stay inside the input's
    range because bilinear output is a convex combination of input pixels.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != img.shape[1]:
        raise ConfigError("augment expects a square (H, W, C) image")
    n = img.shape[0]
    rng = np.random.default_rng(seed)
    factor = rng.uniform(1.0, 1.25)
    target = int(round(n * factor))
    resized = resize_array(img, (target, target))
    start = (target - n) // 2
    return resized[start : start + n, start : start + n].copy()
