"""Dataset directory format, splitting and augmentation.

A dataset directory holds, for every sample id ``S``:

* ``S.img.png``  8-bit RGB image
* ``S.inst.png`` 16-bit single-channel instance ids (0 = background)
* ``S.type.png`` 8-bit single-channel class codes 0..4
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from ..core_types import LabeledSample, relabel_dense, validate_sample

SUFFIXES = {"image": ".img.png", "instances": ".inst.png", "classes": ".type.png"}


class DataError(RuntimeError):
    pass


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def write_label_png(path, array: np.ndarray, bits: int) -> None:
    array = np.asarray(array)
    limit = 2 ** bits - 1
    if array.size and (array.min() < 0 or array.max() > limit):
        raise DataError(f"{path}: values outside 0..{limit}")
    dtype = np.uint16 if bits == 16 else np.uint8
    Image.fromarray(array.astype(dtype)).save(path)


def save_sample(sample: LabeledSample, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(sample.image, dtype=np.uint8)).save(
        directory / f"{sample.id}{SUFFIXES['image']}")
    write_label_png(directory / f"{sample.id}{SUFFIXES['instances']}", sample.instances, 16)
    write_label_png(directory / f"{sample.id}{SUFFIXES['classes']}", sample.classes, 8)


def _ids_with(directory: Path, suffix: str) -> set[str]:
    return {p.name[: -len(suffix)] for p in directory.glob(f"*{suffix}")}


def read_label_maps(directory, sample_id: str) -> tuple[np.ndarray, np.ndarray]:
    directory = Path(directory)
    inst = _read_png(directory / f"{sample_id}{SUFFIXES['instances']}").astype(np.int32)
    cls = _read_png(directory / f"{sample_id}{SUFFIXES['classes']}").astype(np.uint8)
    if inst.ndim != 2 or cls.ndim != 2 or inst.shape != cls.shape:
        raise DataError(f"sample {sample_id}: label maps must be 2-D and equal in shape")
    return inst, cls


def load_dataset(directory, require_images: bool = True) -> list[LabeledSample]:
    """Load every sample triple in ``directory``, sorted by id.

    Instance ids are relabeled densely on ingest; any remaining invariant
    violation is a :class:`DataError`. With ``require_images=False`` (used for
    prediction directories) a missing image is replaced by zeros.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} does not exist")
    sets = {k: _ids_with(directory, s) for k, s in SUFFIXES.items()}
    all_ids = set().union(*sets.values())
    samples = []
    for sid in sorted(all_ids):
        for kind, ids in sets.items():
            if sid not in ids and (kind != "image" or require_images):
                raise DataError(f"sample {sid}: missing {sid}{SUFFIXES[kind]}")
        inst, cls = read_label_maps(directory, sid)
        if sid in sets["image"]:
            img = _read_png(directory / f"{sid}{SUFFIXES['image']}")
            if img.ndim != 3 or img.shape[2] != 3:
                raise DataError(f"sample {sid}: image must be 8-bit RGB, got shape {img.shape}")
        else:
            img = np.zeros(inst.shape + (3,), dtype=np.uint8)
        if img.shape[:2] != inst.shape:
            raise DataError(f"sample {sid}: image {img.shape[:2]} vs label maps {inst.shape}")
        sample = LabeledSample(sid, img.astype(np.uint8), relabel_dense(inst), cls)
        problems = validate_sample(sample)
        if problems:
            raise DataError(f"sample {sid}: " + "; ".join(problems[:5]))
        samples.append(sample)
    return samples


def split_sizes(n: int, fractions) -> list[int]:
    """Largest-remainder rounding of ``n * fractions`` (ties go to the earlier part)."""
    raw = [n * f for f in fractions]
    sizes = [int(np.floor(r + 1e-9)) for r in raw]
    rest = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return sizes


def split_dataset(samples, fractions=(0.7, 0.1, 0.2), seed: int = 0):
    samples = list(samples)
    perm = np.random.default_rng(seed).permutation(len(samples))
    n_train, n_val, _ = split_sizes(len(samples), fractions)
    shuffled = [samples[i] for i in perm]
    return (shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:])


def hflip(sample: LabeledSample) -> LabeledSample:
    return LabeledSample(sample.id, sample.image[:, ::-1].copy(), sample.instances[:, ::-1].copy(),
                         sample.classes[:, ::-1].copy())


def vflip(sample: LabeledSample) -> LabeledSample:
    return LabeledSample(sample.id, sample.image[::-1].copy(), sample.instances[::-1].copy(),
                         sample.classes[::-1].copy())


def rot90(sample: LabeledSample, k: int) -> LabeledSample:
    return LabeledSample(sample.id, np.rot90(sample.image, k).copy(),
                         np.rot90(sample.instances, k).copy(), np.rot90(sample.classes, k).copy())


def blur(sample: LabeledSample, sigma: float) -> LabeledSample:
    img = ndimage.gaussian_filter(sample.image.astype(np.float64), sigma=(sigma, sigma, 0))
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return LabeledSample(sample.id, img, sample.instances, sample.classes)


def augment(sample: LabeledSample, ops, seed) -> LabeledSample:
    """Random flips / right-angle rotation / Gaussian blur; label maps move with the image."""
    rng = np.random.default_rng(seed)
    ops = set(ops)
    if "flip" in ops:
        if rng.random() < 0.5:
            sample = hflip(sample)
        if rng.random() < 0.5:
            sample = vflip(sample)
    if "rotation" in ops:
        k = int(rng.integers(0, 4))
        if k:
            sample = rot90(sample, k)
    if "blur" in ops and rng.random() < 0.5:
        sample = blur(sample, float(rng.uniform(0.3, 1.2)))
    return sample
