"""Training targets derived from a labeled sample."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core_types import N_CLASSES, LabeledSample, MalformedInputError, instance_slices

# Row index = 5-class code, value = cross-category code.
# task1 merges grade 1 and grade 2, task2 merges grade 2 and grade 3.
REMAP_TABLES = {
    "task1": np.array([0, 1, 1, 2, 3], dtype=np.uint8),
    "task2": np.array([0, 1, 2, 2, 3], dtype=np.uint8),
}
N_TASK_CLASSES = 4
AUX_FACTOR = 4


@dataclass(frozen=True)
class TargetBundle:
    binary: np.ndarray    # H x W uint8
    distance: np.ndarray  # H x W float64 in [0, 1]
    task1: np.ndarray     # H x W codes 0..3
    task2: np.ndarray     # H x W codes 0..3
    final: np.ndarray     # H x W codes 0..4
    aux100: np.ndarray    # H/f x W/f x 3 uint8


def binary_map_from_instances(instances: np.ndarray) -> np.ndarray:
    return (np.asarray(instances) > 0).astype(np.uint8)


def distance_map_from_instances(instances: np.ndarray) -> np.ndarray:
    """Per-instance Euclidean distance to the nearest non-instance pixel, max-normalized.

    Each instance is transformed on its own, so touching neighbours count as
    background and the map dips between adjacent nuclei. Pixels outside the
    image are not considered, except for an instance covering the whole image,
    where the image border stands in for background.
    """
    ids = np.asarray(instances)
    h, w = ids.shape
    out = np.zeros((h, w), dtype=np.float64)
    for k, (rs, cs) in instance_slices(ids):
        r0, r1 = max(rs.start - 1, 0), min(rs.stop + 1, h)
        c0, c1 = max(cs.start - 1, 0), min(cs.stop + 1, w)
        own = ids[r0:r1, c0:c1] == k
        if own.all():
            dist = ndimage.distance_transform_edt(np.pad(own, 1))[1:-1, 1:-1]
        else:
            dist = ndimage.distance_transform_edt(own)
        dist = dist / dist.max()
        region = out[r0:r1, c0:c1]
        region[own] = dist[own]
    return out


def remap_labels(classes: np.ndarray, scheme: str) -> np.ndarray:
    """Collapse 5-class codes to a cross-category task's 4 codes."""
    table = REMAP_TABLES.get(scheme)
    if table is None:
        raise MalformedInputError(f"unknown remap scheme {scheme!r}")
    classes = np.asarray(classes)
    if classes.size and (classes.min() < 0 or classes.max() >= N_CLASSES):
        raise MalformedInputError("class codes must lie in 0..4")
    return table[classes]


def downsample(image: np.ndarray, factor: int = AUX_FACTOR) -> np.ndarray:
    """Box-average an 8-bit image by ``factor`` per axis, rounding half away from zero."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if h % factor or w % factor:
        raise MalformedInputError(f"image {h}x{w} not divisible by {factor}")
    blocks = image.reshape(h // factor, factor, w // factor, factor, *image.shape[2:])
    sums = blocks.sum(axis=(1, 3), dtype=np.int64)
    n = factor * factor
    # integer rounding of sums / n; values are non-negative so half-up == half-away-from-zero
    return ((2 * sums + n) // (2 * n)).astype(image.dtype)


def downsample_4x(image: np.ndarray) -> np.ndarray:
    return downsample(image, 4)


def one_hot(codes: np.ndarray, n: int) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() >= n):
        raise MalformedInputError(f"codes must lie in 0..{n - 1}")
    return np.eye(n, dtype=np.uint8)[codes]


def build_targets(sample: LabeledSample, aux_factor: int = AUX_FACTOR) -> TargetBundle:
    final = np.asarray(sample.classes).astype(np.uint8)
    return TargetBundle(
        binary=binary_map_from_instances(sample.instances),
        distance=distance_map_from_instances(sample.instances),
        task1=remap_labels(final, "task1"),
        task2=remap_labels(final, "task2"),
        final=final,
        aux100=downsample(sample.image, aux_factor),
    )
