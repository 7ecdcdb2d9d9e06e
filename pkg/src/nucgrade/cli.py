"""``nucgrade`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .core_types import MalformedInputError
from .metrics import MetricAccumulator
from .network import ConfigError
from .pipeline.checkpoint import CheckpointError
from .pipeline.config import TrainConfig, load_config
from .pipeline.dataset import DataError, load_dataset, save_sample, split_dataset
from .synthdata import PlacementError, SynthParams, generate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("nucgrade")


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    return cfg


def cmd_synth(args) -> int:
    import numpy as np

    cfg = _config(args)
    seed = cfg.seed if args.seed is None else args.seed
    seeds = np.random.SeedSequence(seed).generate_state(args.count, dtype=np.uint32)
    for i, s in enumerate(seeds):
        params = SynthParams(seed=int(s), canvas=(args.size, args.size), n_instances=args.instances,
                             touching_fraction=args.touching)
        save_sample(generate(params, sample_id=f"synth_{i:04d}"), args.out)
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    cfg = _config(args)
    data_dir = args.data or cfg.data_dir
    samples = load_dataset(data_dir)
    out = Path(args.out)
    for s in samples:
        save_sample(s, out)
    parts = split_dataset(samples, cfg.split, cfg.split_seed)
    with open(out / "splits.txt", "w") as fh:
        for name, part in zip(("train", "val", "test"), parts):
            for s in part:
                fh.write(f"{s.id}\t{name}\n")
    print(f"prepared {len(samples)} samples: " +
          ", ".join(f"{n}={len(p)}" for n, p in zip(("train", "val", "test"), parts)))
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline.training import train

    cfg = _config(args)
    if args.data:
        cfg.data_dir = args.data
    if args.out:
        cfg.checkpoint_dir = args.out
    path = train(cfg, resume=args.resume)
    print(path)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .pipeline.training import evaluate

    report = evaluate(args.checkpoint, args.split, args.out, data_dir=args.data)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_predict(args) -> int:
    from .pipeline.training import predict

    written = predict(args.checkpoint, args.images, args.out)
    print(f"wrote predictions for {len(written)} images to {args.out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .core_types import TypedInstanceMap
    from .metrics import gt_instance_classes
    from .pipeline.training import write_report

    truth = {s.id: s for s in load_dataset(args.truth)}
    preds = {s.id: s for s in load_dataset(args.pred, require_images=False)}
    if set(truth) != set(preds):
        raise DataError(f"sample ids differ: only in truth {sorted(set(truth) - set(preds))[:5]}, "
                        f"only in prediction {sorted(set(preds) - set(truth))[:5]}")
    acc = MetricAccumulator()
    per_image = []
    for sid in sorted(truth):
        p, t = preds[sid], truth[sid]
        typed = TypedInstanceMap(p.instances, gt_instance_classes(p.instances, p.classes))
        one = MetricAccumulator()
        one.add(typed, t.instances, t.classes)
        per_image.append((sid, one.report()))
        acc.merge(one)
    report = acc.report()
    if args.out:
        write_report(report, args.out, per_image)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--deterministic", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nucgrade", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--touching", type=float, default=0.3)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", parents=[common], help="validate, relabel and split a dataset")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train CHR-Net")
    p.add_argument("--data")
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common], help="export typed instances and overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("metrics", parents=[common], help="score a prediction directory against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, MalformedInputError, PlacementError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
