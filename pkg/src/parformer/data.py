"""Manifest I/O, synthetic viewpoint-coupled data, augmentation, and splits.

Every random draw for one sample comes from its own generator seeded by
``(seed, sample_index)`` (plus the epoch for augmentation), so results do not
depend on processing order.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import ContractError
from .viewpoint import VIEWPOINTS, viewpoint_index

BACKGROUND = 0.25
CELL = 16
# top cell row is reserved for the viewpoint marker strip; rows 4..11 keep at
# least 4 marker rows inside the frame under any crop of up to CELL/2 pixels
MARKER_ROWS = slice(4, 12)
MARKER_LEVEL = 0.6


class ManifestError(ValueError):
    pass


class SchemaError(ManifestError):
    pass


@dataclass
class Sample:
    id: str
    attrs: np.ndarray
    viewpoint: str
    image: np.ndarray | None = None
    image_path: str | None = None


@dataclass
class SynthSpec:
    n_attributes: int = 8
    image_side: int = 64
    viewpoint_cue_fidelity: float = 0.9
    noise_sigma: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class CueLayout:
    """Per-attribute rectangle ``(top, left, height, width)``, RGB color and easy viewpoint."""

    boxes: tuple[tuple[int, int, int, int], ...]
    colors: np.ndarray
    easy_view: tuple[int, ...]


def cue_layout(spec: SynthSpec) -> CueLayout:
    side = spec.image_side
    per_row = side // CELL
    free_cells = [(r, c) for r in range(1, per_row) for c in range(per_row)]
    if spec.n_attributes > len(free_cells):
        raise ContractError(f"{spec.n_attributes} attributes do not fit a {side}px image")
    rng = np.random.default_rng([spec.seed, 0xC0E])
    chosen = rng.choice(len(free_cells), size=spec.n_attributes, replace=False)
    boxes = []
    for k in chosen:
        r, c = free_cells[int(k)]
        boxes.append((r * CELL + 1, c * CELL + 1, CELL - 2, CELL - 2))
    hues = (np.arange(spec.n_attributes) + rng.random()) / spec.n_attributes
    colors = np.array([colorsys.hsv_to_rgb(h, 1.0, 1.0) for h in rng.permutation(hues)])
    easy = tuple(j % 3 for j in range(spec.n_attributes))
    return CueLayout(tuple(boxes), colors, easy)


def render_sample(spec: SynthSpec, layout: CueLayout, attrs: np.ndarray, view: int, noise: np.ndarray | None):
    side = spec.image_side
    img = np.full((side, side, 3), BACKGROUND)
    img[MARKER_ROWS, :, view] = MARKER_LEVEL
    for j, active in enumerate(attrs):
        if not active:
            continue
        contrast = 1.0 if layout.easy_view[j] == view else 1.0 - spec.viewpoint_cue_fidelity
        top, left, h, w = layout.boxes[j]
        img[top:top + h, left:left + w, :] = (1.0 - contrast) * BACKGROUND + contrast * layout.colors[j]
    if noise is not None:
        img = img + noise
    return np.clip(img, 0.0, 1.0)


def synthetic_sample(spec: SynthSpec, index: int, layout: CueLayout | None = None) -> Sample:
    layout = layout or cue_layout(spec)
    rng = np.random.default_rng([spec.seed, index])
    view = int(rng.integers(3))
    attrs = rng.integers(0, 2, size=spec.n_attributes)
    noise = rng.normal(0.0, spec.noise_sigma, size=(spec.image_side, spec.image_side, 3)) if spec.noise_sigma > 0 else None
    img = render_sample(spec, layout, attrs, view, noise)
    return Sample(f"syn{index:06d}", attrs.astype(np.int64), VIEWPOINTS[view], img)


def generate_synthetic(spec: SynthSpec, count: int, start: int = 0) -> list[Sample]:
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    layout = cue_layout(spec)
    return [synthetic_sample(spec, start + i, layout) for i in range(count)]


def _synthetic_index(sample_id: str) -> int:
    if not sample_id.startswith("syn"):
        raise ManifestError(f"synthetic record id {sample_id!r} must look like 'syn000123'")
    return int(sample_id[3:])


def load_manifest(path: str | Path, n_attributes: int | None = None) -> list[Sample]:
    """Parse a JSON-lines manifest into image-less :class:`Sample` descriptors."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid, image, attrs, view = rec["id"], rec["image"], rec["attrs"], rec["viewpoint"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from None
            if not isinstance(sid, str) or not isinstance(image, str):
                raise ManifestError(f"{path}:{lineno}: 'id' and 'image' must be strings")
            if view not in VIEWPOINTS:
                raise ManifestError(f"{path}:{lineno}: viewpoint {view!r} not in {VIEWPOINTS}")
            if not isinstance(attrs, list) or any(a not in (0, 1) or isinstance(a, bool) for a in attrs):
                raise ManifestError(f"{path}:{lineno}: attrs must be a list of 0/1")
            if n_attributes is not None and len(attrs) != n_attributes:
                raise SchemaError(
                    f"{path}:{lineno}: record has {len(attrs)} attributes, config expects {n_attributes}"
                )
            out.append(Sample(sid, np.asarray(attrs, dtype=np.int64), view, image_path=image))
    return out


def write_manifest(samples: Sequence[Sample], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            rec = {"id": s.id, "image": s.image_path or "synthetic", "attrs": [int(a) for a in s.attrs],
                   "viewpoint": s.viewpoint}
            fh.write(json.dumps(rec) + "\n")


def save_png(image: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, optimize=False)


def load_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_images(samples: Sequence[Sample], base_dir: str | Path, synth: SynthSpec | None = None) -> list[Sample]:
    """Fill ``sample.image`` from disk, or regenerate ``"synthetic"`` records from ``synth``."""
    base = Path(base_dir)
    layout = cue_layout(synth) if synth is not None else None
    for s in samples:
        if s.image is not None:
            continue
        if s.image_path == "synthetic":
            if synth is None:
                raise ManifestError(f"record {s.id} is synthetic but no synthetic spec was given")
            regen = synthetic_sample(synth, _synthetic_index(s.id), layout)
            if not np.array_equal(regen.attrs, s.attrs) or regen.viewpoint != s.viewpoint:
                raise SchemaError(f"record {s.id} does not match its regenerated synthetic sample")
            s.image = regen.image
        else:
            p = Path(s.image_path)
            s.image = load_png(p if p.is_absolute() else base / p)
    return samples


def augment(image: np.ndarray, rng: np.random.Generator, pad_fraction: float = 0.125, flip_prob: float = 0.5) -> np.ndarray:
    """Zero-pad, random-crop back to size, then maybe mirror horizontally.

    Draw order: crop row offset, crop column offset, flip uniform.
    """
    if pad_fraction < 0 or not 0.0 <= flip_prob <= 1.0:
        raise ContractError("pad_fraction must be >= 0 and flip_prob in [0, 1]")
    h, w, _ = image.shape
    ph = int(np.floor(pad_fraction * h + 0.5))
    pw = int(np.floor(pad_fraction * w + 0.5))
    top = int(rng.integers(0, 2 * ph + 1))
    left = int(rng.integers(0, 2 * pw + 1))
    flip = rng.random() < flip_prob
    if ph or pw:
        padded = np.zeros((h + 2 * ph, w + 2 * pw, image.shape[2]), dtype=image.dtype)
        padded[ph:ph + h, pw:pw + w] = image
        image = padded[top:top + h, left:left + w]
    if flip:
        image = image[:, ::-1]
    return np.ascontiguousarray(image)


def split_dataset(samples: Sequence, train_fraction: float, rng: np.random.Generator):
    if not 0.0 < train_fraction < 1.0:
        raise ContractError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(samples)
    n_train = int(np.floor(train_fraction * n + 0.5))
    if n_train == 0 or n_train == n:
        raise ContractError(f"train_fraction {train_fraction} leaves an empty split for {n} samples")
    order = rng.permutation(n)
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


def stack_batch(samples: Sequence[Sample]):
    images = np.stack([s.image for s in samples])
    attrs = np.stack([s.attrs for s in samples])
    views = np.array([viewpoint_index(s.viewpoint) for s in samples], dtype=np.int64)
    return images, attrs, views
