import numpy as np
import pytest
from scipy import ndimage

from nucgrade.core_types import CROSS, relabel_dense

TINY_NET = dict(backbone_widths=(16, 16, 32, 32, 64), backbone_blocks=(1, 1, 1, 1),
                hrfe_stream_widths=(8, 16, 32), lunet_widths=(8, 16, 32))


def random_instance_map(rng, shape=(64, 64), n_shapes=8, max_instances=None):
    """Random 4-connected, densely labeled instance map built from overlapping ellipses/boxes."""
    h, w = shape
    ids = np.zeros(shape, dtype=np.int32)
    yy, xx = np.mgrid[0:h, 0:w]
    for k in range(1, n_shapes + 1):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        a, b = rng.uniform(2, max(3, h / 5)), rng.uniform(2, max(3, w / 5))
        if rng.random() < 0.5:
            m = ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1
        else:
            m = (abs(yy - cy) <= a) & (abs(xx - cx) <= b)
        ids[m] = k
    out = np.zeros_like(ids)
    nxt = 1
    for k in range(1, n_shapes + 1):
        lab, n = ndimage.label(ids == k, structure=CROSS)
        for j in range(1, n + 1):
            out[lab == j] = nxt
            nxt += 1
    out = relabel_dense(out)
    if max_instances is not None and out.max() > max_instances:
        out = np.where(out > max_instances, 0, out)
    return out


def perturb_instances(rng, ids):
    """A plausible 'prediction' of ``ids``: shifted, eroded/dilated, some dropped, relabeled."""
    out = np.zeros_like(ids)
    perm = rng.permutation(np.arange(1, ids.max() + 1)) if ids.max() else []
    for k, new in zip(range(1, ids.max() + 1), perm):
        m = ids == k
        if rng.random() < 0.15:
            continue
        op = rng.integers(0, 4)
        if op == 1:
            m = ndimage.binary_erosion(m, CROSS) if m.sum() > 6 else m
        elif op == 2:
            m = ndimage.binary_dilation(m, CROSS)
        elif op == 3:
            m = np.roll(m, int(rng.integers(-2, 3)), axis=int(rng.integers(0, 2)))
        out[m & (out == 0)] = new
    if rng.random() < 0.3:  # spurious blob
        cy, cx = rng.integers(0, ids.shape[0]), rng.integers(0, ids.shape[1])
        out[max(cy - 2, 0):cy + 2, max(cx - 2, 0):cx + 2] = out.max() + 1
    return out


def brute_force_distance(ids):
    """Per-instance Euclidean distance to the nearest non-instance pixel by all-pairs search."""
    h, w = ids.shape
    coords = np.stack(np.mgrid[0:h, 0:w], -1).reshape(-1, 2).astype(np.int64)
    flat = ids.ravel()
    out = np.zeros(h * w)
    for k in np.unique(flat[flat > 0]):
        inside = coords[flat == k]
        outside = coords[flat != k]
        if len(outside) == 0:
            continue
        d2 = ((inside[:, None, :] - outside[None, :, :]) ** 2).sum(-1).min(axis=1)
        d = np.sqrt(d2.astype(np.float64))
        out[flat == k] = d / d.max()
    return out.reshape(h, w)


def disk_map(shape, centers, radius):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    ids = np.zeros(shape, dtype=np.int32)
    for k, (cy, cx) in enumerate(centers, start=1):
        ids[((yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2) & (ids == 0)] = k
    return ids


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
