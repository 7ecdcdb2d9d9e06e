"""Deterministic synthetic nuclei patches.

Nuclei are filled ellipses on a pale background. Tumour grade is encoded by a
nucleolus dot whose radius grows with grade (grade 1 has none); endothelial
nuclei are elongated and dot-free. A fraction of nuclei is pushed against an
earlier one until the two share an edge, giving touching pairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core_types import CROSS, LabeledSample

BACKGROUND_RGB = np.array([232.0, 206.0, 220.0])
NUCLEUS_RGB = np.array([104.0, 72.0, 150.0])
ENDO_RGB = np.array([70.0, 50.0, 120.0])
RIM_RGB = np.array([150.0, 120.0, 190.0])
NUCLEOLUS_RGB = np.array([205.0, 40.0, 90.0])
# nucleolus radius as a fraction of the minor radius, per class 1..4
NUCLEOLUS_SCALE = {1: 0.0, 2: 0.22, 3: 0.5, 4: 0.0}


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthParams:
    seed: int = 0
    canvas: tuple[int, int] = (128, 128)
    n_instances: int = 10
    radius_range: tuple[float, float] = (5.0, 9.0)
    touching_fraction: float = 0.3
    class_mix: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    nucleolus_intensity: tuple[float, float, float, float] = (0.0, 0.9, 1.0, 0.0)
    noise_std: float = 6.0
    max_attempts: int = 300

    def __post_init__(self):
        if self.radius_range[0] < 2 or self.radius_range[1] < self.radius_range[0]:
            raise ValueError("radius_range must satisfy 2 <= min <= max")
        if self.n_instances < 0:
            raise ValueError("n_instances must be >= 0")
        if not 0 <= self.touching_fraction <= 1:
            raise ValueError("touching_fraction must lie in [0, 1]")
        if len(self.class_mix) != 4 or min(self.class_mix) < 0 or sum(self.class_mix) <= 0:
            raise ValueError("class_mix needs 4 non-negative weights with positive sum")


@dataclass
class PlacementInfo:
    n_placed: int = 0
    touching_pairs: list[tuple[int, int]] = field(default_factory=list)


def _ellipse(shape, cy, cx, a, b, theta):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    inside = u * u + v * v <= 1.0
    lab, n = ndimage.label(inside, structure=CROSS)
    if n > 1:  # thin tips can leave diagonal-only pixels; keep the main body
        sizes = np.bincount(lab.ravel())
        sizes[0] = 0
        inside = lab == sizes.argmax()
    return inside


def _touches(mask, other):
    return bool((ndimage.binary_dilation(mask, CROSS) & other).any())


class _Shape:
    def __init__(self, rng, params, code):
        lo, hi = params.radius_range
        self.code = code
        if code == 4:
            minor = max(2.0, lo * 0.55)
            self.a, self.b = minor * rng.uniform(2.5, 3.2), minor
        else:
            r = rng.uniform(lo, hi)
            self.a, self.b = r * rng.uniform(1.0, 1.3), r
        self.theta = rng.uniform(0, np.pi)

    @property
    def extent(self):
        return max(self.a, self.b)

    def raster(self, shape, cy, cx):
        return _ellipse(shape, cy, cx, self.a, self.b, self.theta)


def _place(rng, params, shape_obj, occupied, ids, touching_to):
    h, w = params.canvas
    margin = shape_obj.extent + 1
    if touching_to is not None:
        prior = ids == touching_to
        py, px = ndimage.center_of_mass(prior)
        phi = rng.uniform(0, 2 * np.pi)
        u = np.array([np.sin(phi), np.cos(phi)])
        d = shape_obj.extent + params.radius_range[1] * 1.5 + 4
        last = None
        while d > 0:
            cy, cx = py + d * u[0], px + d * u[1]
            m = shape_obj.raster((h, w), cy, cx)
            if (m & occupied).any():
                break
            last = (cy, cx, m)
            d -= 0.5
        if last is None:
            return None
        cy, cx, m = last
        if not (margin <= cy <= h - 1 - margin and margin <= cx <= w - 1 - margin):
            return None
        if not _touches(m, prior):
            return None
        return m
    if h - 1 - 2 * margin <= 0 or w - 1 - 2 * margin <= 0:
        return None
    cy = rng.uniform(margin, h - 1 - margin)
    cx = rng.uniform(margin, w - 1 - margin)
    m = shape_obj.raster((h, w), cy, cx)
    # free nuclei keep a one-pixel gap so they never touch by accident
    if ndimage.binary_dilation(m, np.ones((3, 3), bool))[occupied].any():
        return None
    return m


def _render(rng, params, ids, codes):
    h, w = params.canvas
    img = np.broadcast_to(BACKGROUND_RGB, (h, w, 3)).copy()
    for k, code in enumerate(codes, start=1):
        m = ids == k
        if not m.any():
            continue
        img[m] = ENDO_RGB if code == 4 else NUCLEUS_RGB
        if code != 4:
            rim = m & ~ndimage.binary_erosion(m, CROSS)
            img[rim] = RIM_RGB
        scale = NUCLEOLUS_SCALE[code]
        intensity = params.nucleolus_intensity[code - 1]
        if scale > 0 and intensity > 0:
            cy, cx = ndimage.center_of_mass(m)
            minor = np.sqrt(m.sum() / np.pi)
            r = max(1.0, scale * minor)
            yy, xx = np.mgrid[0:h, 0:w]
            dot = m & ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r)
            img[dot] = (1 - intensity) * img[dot] + intensity * NUCLEOLUS_RGB
    img += rng.normal(0.0, params.noise_std, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate(params: SynthParams, sample_id: str | None = None, return_info: bool = False):
    """Build one :class:`LabeledSample` from ``params`` (deterministic in ``params.seed``)."""
    rng = np.random.default_rng(params.seed)
    h, w = params.canvas
    ids = np.zeros((h, w), dtype=np.int32)
    occupied = np.zeros((h, w), dtype=bool)
    codes: list[int] = []
    info = PlacementInfo()
    mix = np.asarray(params.class_mix, dtype=float)
    mix = mix / mix.sum()
    # a fixed share of the instances after the first is placed against an earlier one
    n_touch = int(round(params.touching_fraction * max(params.n_instances - 1, 0)))
    touch_at = set(rng.choice(np.arange(1, max(params.n_instances, 1)), size=n_touch,
                              replace=False).tolist()) if n_touch else set()

    for i in range(params.n_instances):
        code = int(rng.choice(4, p=mix)) + 1
        want_touch = i in touch_at
        placed = None
        for attempt in range(params.max_attempts):
            shape_obj = _Shape(rng, params, code)
            # touching placement gets the first half of the attempts, then falls back to free
            target = None
            if want_touch and attempt < params.max_attempts // 2:
                target = int(rng.integers(1, len(codes) + 1))
            m = _place(rng, params, shape_obj, occupied, ids, target)
            if m is not None:
                placed = (m, target)
                break
        if placed is None:
            raise PlacementError(
                f"could not place instance {len(codes) + 1} of {params.n_instances} "
                f"on a {h}x{w} canvas after {params.max_attempts} attempts")
        m, target = placed
        codes.append(code)
        k = len(codes)
        ids[m] = k
        occupied |= m
        if target is not None:
            info.touching_pairs.append((target, k))

    info.n_placed = len(codes)
    lut = np.array([0] + codes, dtype=np.uint8)
    classes = lut[ids]
    image = _render(rng, params, ids, codes)
    sample = LabeledSample(sample_id or f"synth{params.seed:06d}", image, ids, classes)
    return (sample, info) if return_info else sample


def generate_set(n: int, seed: int = 0, **overrides) -> list[LabeledSample]:
    """``n`` samples whose per-sample seeds are spawned from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)
    return [generate(SynthParams(seed=int(s), **overrides), sample_id=f"s{seed}_{i:04d}")
            for i, s in enumerate(seeds)]
