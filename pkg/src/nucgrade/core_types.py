"""Shared data model: class taxonomy, labeled samples, typed instance maps."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

# 4-connectivity structuring element used for every instance/marker labeling.
CROSS = ndimage.generate_binary_structure(2, 1)

SIZE_MULTIPLE = 32


class MalformedInputError(ValueError):
    """Raised when an array does not satisfy an operation's preconditions."""


class NucleusClass(enum.IntEnum):
    BACKGROUND = 0
    GRADE1 = 1
    GRADE2 = 2
    GRADE3 = 3
    ENDOTHELIAL = 4


N_CLASSES = len(NucleusClass)
NUCLEUS_CODES = (1, 2, 3, 4)
CLASS_KEYS = {1: "pq_g1", 2: "pq_g2", 3: "pq_g3", 4: "pq_endo"}


@dataclass(frozen=True)
class LabeledSample:
    """One annotated patch.

    ``image`` is H x W x 3 uint8, ``instances`` H x W non-negative ints
    (0 = background), ``classes`` H x W codes in 0..4.
    """

    id: str
    image: np.ndarray
    instances: np.ndarray
    classes: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.instances.shape


@dataclass(frozen=True)
class TypedInstanceMap:
    instances: np.ndarray
    labels: dict[int, int] = field(default_factory=dict)

    def class_map(self) -> np.ndarray:
        """Rasterize labels back onto the instance map."""
        lut = np.zeros(int(self.instances.max(initial=0)) + 1, dtype=np.uint8)
        for inst_id, code in self.labels.items():
            lut[inst_id] = code
        return lut[self.instances]


@dataclass(frozen=True)
class NetworkOutputs:
    """Per-pixel prediction maps for one image (H x W x C) or a batch (N x H x W x C).

    Heads absent from an ablation variant are ``None``.
    """

    binary: np.ndarray | None
    distance: np.ndarray | None
    task1: np.ndarray | None
    task2: np.ndarray | None
    final: np.ndarray

    def __getitem__(self, index: int) -> "NetworkOutputs":
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return NetworkOutputs(pick(self.binary), pick(self.distance), pick(self.task1),
                              pick(self.task2), pick(self.final))


def relabel_dense(ids: np.ndarray) -> np.ndarray:
    """Map the ids present in ``ids`` onto 1..K preserving order; 0 stays 0."""
    ids = np.asarray(ids)
    present = np.unique(ids)
    present = present[present > 0]
    if present.size and present[-1] == present.size:
        return ids.astype(np.int32, copy=False)
    lut = np.zeros(int(ids.max(initial=0)) + 1, dtype=np.int32)
    lut[present] = np.arange(1, present.size + 1, dtype=np.int32)
    return lut[ids]


def instance_slices(ids: np.ndarray):
    """Yield ``(instance_id, bbox_slices)`` for every present id."""
    for k, sl in enumerate(ndimage.find_objects(ids), start=1):
        if sl is not None:
            yield k, sl


def validate_sample(sample: LabeledSample, size_multiple: int = SIZE_MULTIPLE) -> list[str]:
    """Return a list of human-readable invariant violations (empty if valid)."""
    problems: list[str] = []
    image, ids, classes = sample.image, np.asarray(sample.instances), np.asarray(sample.classes)

    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        problems.append(f"image: expected HxWx3 uint8, got shape {image.shape} dtype {image.dtype}")
    if ids.ndim != 2 or classes.ndim != 2:
        problems.append(f"label maps must be 2-D, got {ids.shape} and {classes.shape}")
        return problems
    if image.shape[:2] != ids.shape or ids.shape != classes.shape:
        problems.append(
            f"shape mismatch: image {image.shape[:2]}, instances {ids.shape}, classes {classes.shape}"
        )
        return problems
    h, w = ids.shape
    if h <= 0 or w <= 0 or h % size_multiple or w % size_multiple:
        problems.append(f"image size {h}x{w} not divisible by {size_multiple}")

    if ids.min(initial=0) < 0:
        problems.append("instances: negative ids present")
        return problems
    bad_codes = np.unique(classes[(classes < 0) | (classes >= N_CLASSES)])
    if bad_codes.size:
        problems.append(f"classes: codes outside 0..4: {bad_codes.tolist()}")

    present = np.unique(ids)
    present = present[present > 0]
    if present.size and present[-1] != present.size:
        missing = sorted(set(range(1, int(present[-1]) + 1)) - set(present.tolist()))
        problems.append(f"non-dense ids: missing {missing[:10]}")

    mismatch = (classes == 0) != (ids == 0)
    if mismatch.any():
        for r, c in np.argwhere(mismatch)[:10]:
            problems.append(
                f"background mismatch at pixel ({r}, {c}): id={ids[r, c]} class={classes[r, c]}"
            )

    for k, sl in instance_slices(ids):
        own = ids[sl] == k
        _, n = ndimage.label(own, structure=CROSS)
        if n != 1:
            problems.append(f"instance {k}: not 4-connected ({n} components)")
        codes = np.unique(classes[sl][own])
        if codes.size != 1:
            problems.append(f"instance {k}: mixed class codes {codes.tolist()}")
    return problems
