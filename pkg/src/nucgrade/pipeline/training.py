"""Training loop, evaluation and prediction export."""
from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..core_types import NucleusClass, TypedInstanceMap
from ..losses import loss_components, weighted_sum
from ..metrics import MetricAccumulator, MetricsReport
from ..network import CHRNet, forward, image_to_tensor
from ..postprocess import PostprocessParams, post_process
from ..targets import N_TASK_CLASSES, build_targets, downsample, one_hot
from .checkpoint import (load_model, load_optimizer_state, load_params, read_checkpoint,
                         save_checkpoint)
from .config import TrainConfig
from .dataset import DataError, augment, load_dataset, split_dataset, write_label_png

log = logging.getLogger(__name__)

LAST = "last.npz"
BEST = "best.npz"
FINAL = "final.npz"

# RGB overlay colours per class code
OVERLAY_COLORS = {
    NucleusClass.GRADE1: (0, 200, 0),
    NucleusClass.GRADE2: (255, 220, 0),
    NucleusClass.GRADE3: (230, 0, 0),
    NucleusClass.ENDOTHELIAL: (0, 90, 255),
}


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(deterministic)


def _stream_seed(*keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(k) for k in keys])


def batch_tensors(samples, aux_factor: int = 4) -> tuple[torch.Tensor, torch.Tensor, dict]:
    """Stack images and their training targets into N x C x H x W tensors."""
    bundles = [build_targets(s, aux_factor) for s in samples]

    def stack(arrays):
        return torch.from_numpy(np.stack(arrays).astype(np.float32))

    image = image_to_tensor(np.stack([s.image for s in samples]))
    aux = image_to_tensor(np.stack([b.aux100 for b in bundles]))
    targets = {
        "binary": stack([b.binary[None] for b in bundles]),
        "distance": stack([b.distance[None] for b in bundles]),
        "task1": stack([one_hot(b.task1, N_TASK_CLASSES).transpose(2, 0, 1) for b in bundles]),
        "task2": stack([one_hot(b.task2, N_TASK_CLASSES).transpose(2, 0, 1) for b in bundles]),
        "final": stack([one_hot(b.final, 5).transpose(2, 0, 1) for b in bundles]),
    }
    return image, aux, targets


def set_backbone_trainable(model: CHRNet, trainable: bool) -> None:
    for p in model.backbone.parameters():
        p.requires_grad_(trainable)


def predict_sample(model: CHRNet, image: np.ndarray, params: PostprocessParams) -> TypedInstanceMap:
    outputs = forward(model, image, downsample(image, model.cfg.aux_factor))
    return post_process(outputs, params)


def evaluate_samples(model: CHRNet, samples, params: PostprocessParams, per_image: list | None = None
                     ) -> MetricsReport:
    acc = MetricAccumulator()
    for s in samples:
        typed = predict_sample(model, s.image, params)
        one = MetricAccumulator()
        one.add(typed, s.instances, s.classes)
        if per_image is not None:
            per_image.append((s.id, one.report()))
        acc.merge(one)
    return acc.report()


def _validation_loss(model, samples, config) -> float:
    if not samples:
        return float("nan")
    model.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(samples), config.batch_size):
            chunk = samples[start:start + config.batch_size]
            image, aux, targets = batch_tensors(chunk, config.network.aux_factor)
            comps = loss_components(model(image, aux), targets, config.foreground_only_classification)
            total += float(weighted_sum(comps, config.loss_weights)) * len(chunk)
    return total / len(samples)


def train(config: TrainConfig, resume: bool = False, samples=None) -> Path:
    """Two-phase training (frozen backbone, then all parameters) with Adam.

    Writes ``last.npz`` after every epoch, ``best.npz`` whenever validation
    aPQ improves (or, without a validation split, tracks ``last``) and
    ``final.npz`` at the end. Returns the path of the final checkpoint.
    """
    ckpt_dir = Path(config.checkpoint_dir)
    try:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"checkpoint directory {ckpt_dir} is not writable: {exc}") from exc
    if samples is None:
        samples = load_dataset(config.data_dir)
    train_set, val_set, _ = split_dataset(samples, config.split, config.split_seed)
    if not train_set:
        raise DataError("training split is empty")

    set_determinism(config.seed, config.deterministic)
    model = CHRNet(config.network)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr_initial)
    history: list[dict] = []
    best_apq = -math.inf
    start_epoch = 0

    last_path = ckpt_dir / LAST
    if resume and last_path.exists():
        meta, params, optim = read_checkpoint(last_path)
        load_params(model, params)
        load_optimizer_state(optimizer, model, optim)
        start_epoch = meta["epoch"]
        history = meta["history"]
        best_apq = meta["best_apq"] if meta["best_apq"] is not None else -math.inf
        log.info("resumed from %s at epoch %d", last_path, start_epoch)

    for epoch in range(start_epoch, config.total_epochs):
        frozen = epoch < config.epochs_frozen
        set_backbone_trainable(model, not frozen)
        lr = config.learning_rate(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        # the torch generator is re-seeded per epoch so a resumed run replays identically
        torch.manual_seed(int(_stream_seed(config.seed, epoch).generate_state(1)[0]))

        model.train()
        order = np.random.default_rng(_stream_seed(config.seed, epoch)).permutation(len(train_set))
        epoch_loss, parts = 0.0, {}
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [augment(train_set[i], config.augmentations,
                             _stream_seed(config.seed, epoch, i)) for i in idx]
            image, aux, targets = batch_tensors(batch, config.network.aux_factor)
            comps = loss_components(model(image, aux), targets, config.foreground_only_classification)
            loss = weighted_sum(comps, config.loss_weights)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item() * len(idx)
            for k, v in comps.items():
                parts[k] = parts.get(k, 0.0) + v.item() * len(idx)

        record = {"epoch": epoch + 1, "lr": lr, "frozen": frozen,
                  "train_loss": epoch_loss / len(train_set),
                  **{f"train_{k}": v / len(train_set) for k, v in parts.items()}}
        improved = False
        if val_set and ((epoch + 1) % config.eval_every == 0 or epoch + 1 == config.total_epochs):
            record["val_loss"] = _validation_loss(model, val_set, config)
            report = evaluate_samples(model, val_set, config.postprocess)
            record["val_apq"] = report.apq
            record["val_pq"] = report.pq
            if report.apq > best_apq:
                best_apq, improved = report.apq, True
        history.append(record)
        log.info("epoch %d %s", epoch + 1,
                 " ".join(f"{k}={v:.4g}" for k, v in record.items() if isinstance(v, float)))

        best_value = None if best_apq == -math.inf else best_apq
        save_checkpoint(last_path, model, config, epoch + 1, history, best_value, optimizer)
        if improved or not val_set:
            save_checkpoint(ckpt_dir / BEST, model, config, epoch + 1, history, best_value)

    final = save_checkpoint(ckpt_dir / FINAL, model, config, config.total_epochs, history,
                            None if best_apq == -math.inf else best_apq)
    return final


def _split_samples(config: TrainConfig, split: str):
    samples = load_dataset(config.data_dir)
    parts = dict(zip(("train", "val", "test"), split_dataset(samples, config.split, config.split_seed)))
    if split not in parts:
        raise ValueError(f"split must be one of {sorted(parts)}")
    return parts[split]


def write_report(report: MetricsReport, path, per_image=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_text())
    if per_image is not None:
        with open(path.with_suffix(".per_image.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            keys = list(report.as_record())
            writer.writerow(["id"] + keys)
            for sid, rep in per_image:
                rec = rep.as_record()
                writer.writerow([sid] + [repr(rec[k]) for k in keys])


def evaluate(checkpoint, split: str = "test", out_path=None, data_dir=None) -> MetricsReport:
    """Forward + post-process every image of ``split`` and pool the metrics."""
    model, config, _ = load_model(checkpoint)
    if data_dir is not None:
        config.data_dir = str(data_dir)
    samples = _split_samples(config, split)
    per_image: list = []
    report = evaluate_samples(model, samples, config.postprocess, per_image)
    if out_path is None:
        out_path = Path(checkpoint).with_name(f"report_{split}.txt")
    write_report(report, out_path, per_image)
    return report


def overlay(image: np.ndarray, typed: TypedInstanceMap, alpha: float = 0.45) -> np.ndarray:
    out = image.astype(np.float64).copy()
    cls = typed.class_map()
    for code, color in OVERLAY_COLORS.items():
        m = cls == code
        out[m] = (1 - alpha) * out[m] + alpha * np.asarray(color, dtype=np.float64)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _read_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im.convert("RGB"))
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def export_prediction(typed: TypedInstanceMap, image: np.ndarray, out_dir, sample_id: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_label_png(out_dir / f"{sample_id}.inst.png", typed.instances, 16)
    write_label_png(out_dir / f"{sample_id}.type.png", typed.class_map(), 8)
    with open(out_dir / f"{sample_id}.labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "class_code", "class_name"])
        for k in sorted(typed.labels):
            code = typed.labels[k]
            writer.writerow([k, code, NucleusClass(code).name.lower()])
    Image.fromarray(overlay(image, typed)).save(out_dir / f"{sample_id}.overlay.png")


def predict(checkpoint, images_dir, out_dir) -> list[Path]:
    """Write instance map, class map, label table and overlay for every PNG in ``images_dir``."""
    model, config, _ = load_model(checkpoint)
    images_dir = Path(images_dir)
    if not images_dir.is_dir():
        raise DataError(f"image directory {images_dir} does not exist")
    written = []
    for path in sorted(images_dir.glob("*.png")):
        name = path.name
        if name.endswith((".inst.png", ".type.png", ".overlay.png")):
            continue
        sample_id = name[: -len(".img.png")] if name.endswith(".img.png") else path.stem
        image = _read_rgb(path)
        typed = predict_sample(model, image, config.postprocess)
        export_prediction(typed, image, out_dir, sample_id)
        written.append(Path(out_dir) / f"{sample_id}.inst.png")
    return written
