"""From prediction maps to typed nucleus instances."""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

from .core_types import CROSS, NetworkOutputs, TypedInstanceMap, relabel_dense


@dataclass(frozen=True)
class PostprocessParams:
    mask_threshold: float = 0.5
    peak_min_value: float = 0.4
    peak_radius: int = 3
    smoothing: str = "mean3x3"
    min_instance_area: int = 10

    def __post_init__(self):
        if not 0 < self.mask_threshold < 1:
            raise ValueError("mask_threshold must lie in (0, 1)")
        if not 0 < self.peak_min_value < 1:
            raise ValueError("peak_min_value must lie in (0, 1)")
        if self.peak_radius < 1:
            raise ValueError("peak_radius must be >= 1")
        if self.smoothing not in ("none", "mean3x3"):
            raise ValueError(f"unknown smoothing {self.smoothing!r}")


def disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def _path(a, b, value: np.ndarray) -> list[tuple[int, int]]:
    """4-connected staircase from ``a`` to ``b``, stepping to the higher-valued candidate."""
    (r, c), out = a, []
    while (r, c) != tuple(b):
        opts = []
        if r != b[0]:
            opts.append((r + np.sign(b[0] - r), c))
        if c != b[1]:
            opts.append((r, c + np.sign(b[1] - c)))
        r, c = max(opts, key=lambda o: (value[o], -o[0], -o[1]))
        r, c = int(r), int(c)
        out.append((r, c))
    return out[:-1]


def _group_peaks(peaks: np.ndarray, value: np.ndarray, radius: int) -> np.ndarray:
    """Label peaks, merging any two within ``radius`` (or diagonal neighbours) into one marker.

    Two such peaks lie inside each other's suppression disk, so they share the
    same maximum; they are joined along a staircase path of high values.
    """
    pts = np.argwhere(peaks)
    markers = np.zeros(peaks.shape, np.int32)
    if len(pts) == 0:
        return markers
    pairs = np.array(sorted(cKDTree(pts).query_pairs(max(radius, np.sqrt(2)) + 1e-9)), dtype=np.int64).reshape(-1, 2)
    graph = csr_matrix((np.hypot(*(pts[pairs[:, 0]] - pts[pairs[:, 1]]).T) + 1e-9,
                        (pairs[:, 0], pairs[:, 1])), shape=(len(pts), len(pts)))
    _, group = connected_components(graph, directed=False)
    # argwhere is row-major, so first appearance gives row-major numbering
    order = {g: k for k, g in enumerate(dict.fromkeys(group.tolist()), start=1)}
    for (r, c), g in zip(pts, group):
        markers[r, c] = order[g]
    tree = minimum_spanning_tree(graph).tocoo()
    for i, j in sorted(zip(tree.row.tolist(), tree.col.tolist())):
        for rc in _path(tuple(pts[i]), tuple(pts[j]), value):
            if markers[rc] == 0:
                markers[rc] = order[group[i]]
    return markers


def find_markers(distance: np.ndarray, mask: np.ndarray, p: PostprocessParams = PostprocessParams()
                 ) -> np.ndarray:
    """Seed markers at local maxima of the (optionally smoothed) distance map.

    A peak is a mask pixel >= ``peak_min_value`` that equals the maximum over
    the disk of ``peak_radius`` around it. Peaks within that radius of one
    another (plateaus, diagonal neighbours, tied ridge maxima) merge into one
    4-connected marker. Markers are numbered in row-major order of their first
    pixel.
    """
    distance = np.asarray(distance, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    value = ndimage.uniform_filter(distance, size=3, mode="nearest") if p.smoothing == "mean3x3" \
        else distance
    local_max = ndimage.maximum_filter(value, footprint=disk(p.peak_radius), mode="nearest")
    peaks = mask & (value >= p.peak_min_value) & (value >= local_max)
    return _group_peaks(peaks, value, p.peak_radius)


def _flood(mask: np.ndarray, level: np.ndarray, markers: np.ndarray) -> np.ndarray:
    """Priority flood from markers over 4-neighbours, lowest level first.

    Queue order is (level, marker id, pixel index), so equal levels go to the
    lower marker id.
    """
    h, w = mask.shape
    labels = markers.astype(np.int32).ravel().copy()
    lvl = level.ravel()
    inside = mask.ravel()
    heap = [(lvl[i], labels[i], i) for i in np.flatnonzero(labels)]
    heapq.heapify(heap)
    while heap:
        _, lab, i = heapq.heappop(heap)
        r, c = divmod(i, w)
        for j, ok in ((i - w, r > 0), (i + w, r < h - 1), (i - 1, c > 0), (i + 1, c < w - 1)):
            if ok and inside[j] and labels[j] == 0:
                labels[j] = lab
                heapq.heappush(heap, (lvl[j], lab, j))
    return labels.reshape(h, w)


def remove_small(instances: np.ndarray, min_area: int) -> np.ndarray:
    if min_area <= 1 or not instances.any():
        return relabel_dense(instances)
    areas = np.bincount(instances.ravel())
    small = areas < min_area
    small[0] = False
    out = np.where(small[instances], 0, instances)
    return relabel_dense(out)


def watershed_split(mask: np.ndarray, distance: np.ndarray, markers: np.ndarray,
                    p: PostprocessParams = PostprocessParams()) -> np.ndarray:
    """Marker-controlled watershed of ``-distance`` restricted to ``mask``.

    Mask components without a marker are dropped, then instances smaller
    than ``min_instance_area`` are removed and ids made dense.
    """
    mask = np.asarray(mask, dtype=bool)
    markers = np.where(mask, markers, 0)
    labels = _flood(mask, -np.asarray(distance, dtype=np.float64), markers)
    return remove_small(labels, p.min_instance_area)


def majority_vote(instances: np.ndarray, final: np.ndarray) -> TypedInstanceMap:
    """Label each instance with its most frequent non-background pixel class.

    Vote ties go to the higher mean probability, then the lower code. An
    instance voting only background takes the foreground class with the
    highest mean probability.
    """
    instances = np.asarray(instances)
    final = np.asarray(final, dtype=np.float64)
    n = int(instances.max(initial=0))
    if n == 0:
        return TypedInstanceMap(instances, {})
    fg = instances > 0
    ids = instances[fg]
    probs = final[fg]
    votes = np.zeros((n + 1, final.shape[-1]), dtype=np.int64)
    np.add.at(votes, (ids, probs.argmax(axis=-1)), 1)
    prob_sum = np.zeros((n + 1, final.shape[-1]))
    np.add.at(prob_sum, ids, probs)
    area = np.bincount(ids, minlength=n + 1)

    labels = {}
    for k in range(1, n + 1):
        if area[k] == 0:
            continue
        mean_p = prob_sum[k, 1:] / area[k]
        v = votes[k, 1:]
        if v.max() == 0:
            candidates = [int(np.argmax(mean_p))]
        else:
            candidates = np.flatnonzero(v == v.max()).tolist()
        # ties: higher mean probability, then lower code
        best = min(candidates, key=lambda i: (-mean_p[i], i))
        labels[k] = best + 1
    return TypedInstanceMap(instances, labels)


def connected_instances(mask: np.ndarray, p: PostprocessParams = PostprocessParams()) -> np.ndarray:
    """Instances as plain 4-connected components (variants without a distance head)."""
    labels, _ = ndimage.label(mask, structure=CROSS)
    return remove_small(labels, p.min_instance_area)


def post_process(outputs: NetworkOutputs, p: PostprocessParams = PostprocessParams()
                 ) -> TypedInstanceMap:
    final = np.asarray(outputs.final)
    if outputs.binary is not None:
        mask = np.asarray(outputs.binary)[..., 0] >= p.mask_threshold
    else:
        mask = final.argmax(axis=-1) > 0
    if outputs.distance is None:
        instances = connected_instances(mask, p)
    else:
        distance = np.asarray(outputs.distance)[..., 0]
        markers = find_markers(distance, mask, p)
        instances = watershed_split(mask, distance, markers, p)
    return majority_vote(instances, final)
