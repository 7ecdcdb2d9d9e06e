"""Dice, AJI, PQ (DQ x SQ), per-class PQ and aPQ.

Dataset-level numbers are pooled: every quantity is a ratio of sums that
:class:`MetricAccumulator` collects image by image, so accumulators can be
merged in any order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core_types import CLASS_KEYS, NUCLEUS_CODES, TypedInstanceMap

REPORT_KEYS = ("dice", "aji", "dq", "sq", "pq", "pq_g1", "pq_g2", "pq_g3", "pq_endo", "apq")
MATCH_IOU = 0.5


@dataclass
class Matching:
    pairs: list[tuple[int, int, float]]
    unmatched_gt: list[int]
    unmatched_pred: list[int]


@dataclass
class MetricsReport:
    dice: float
    aji: float
    dq: float
    sq: float
    pq: float
    per_class_pq: dict[int, float] = field(default_factory=dict)
    apq: float = float("nan")

    def as_record(self) -> dict[str, float]:
        rec = {"dice": self.dice, "aji": self.aji, "dq": self.dq, "sq": self.sq, "pq": self.pq}
        for code, key in CLASS_KEYS.items():
            rec[key] = self.per_class_pq.get(code, float("nan"))
        rec["apq"] = self.apq
        return rec

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in self.as_record().items())

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        rec = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition("=")
                rec[key.strip()] = float(value)
        if set(rec) != set(REPORT_KEYS):
            raise ValueError(f"report keys {sorted(rec)} != {sorted(REPORT_KEYS)}")
        per_class = {c: rec[k] for c, k in CLASS_KEYS.items() if not math.isnan(rec[k])}
        return cls(rec["dice"], rec["aji"], rec["dq"], rec["sq"], rec["pq"], per_class, rec["apq"])


def _check_shapes(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    pred_mask, gt_mask = np.asarray(pred_mask) > 0, np.asarray(gt_mask) > 0
    _check_shapes(pred_mask, gt_mask)
    denom = int(pred_mask.sum()) + int(gt_mask.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pred_mask & gt_mask).sum()) / denom


class _Overlap:
    """Contingency table between the instances of two label maps."""

    def __init__(self, pred: np.ndarray, gt: np.ndarray):
        pred, gt = np.asarray(pred), np.asarray(gt)
        _check_shapes(pred, gt)
        self.gt_ids, g_inv = np.unique(gt, return_inverse=True)
        self.pred_ids, p_inv = np.unique(pred, return_inverse=True)
        ng, npred = len(self.gt_ids), len(self.pred_ids)
        table = np.bincount(g_inv.ravel() * npred + p_inv.ravel(), minlength=ng * npred)
        table = table.reshape(ng, npred)
        # drop the background row/column when present
        if self.gt_ids[0] == 0:
            table, self.gt_ids = table[1:], self.gt_ids[1:]
        if self.pred_ids[0] == 0:
            table, self.pred_ids = table[:, 1:], self.pred_ids[1:]
        self.inter = table.astype(np.int64)
        self.gt_area = np.bincount(g_inv.ravel(), minlength=ng)[ng - len(self.gt_ids):]
        self.pred_area = np.bincount(p_inv.ravel(), minlength=npred)[npred - len(self.pred_ids):]
        self.union = self.gt_area[:, None] + self.pred_area[None, :] - self.inter
        with np.errstate(invalid="ignore", divide="ignore"):
            self.iou = np.where(self.inter > 0, self.inter / np.maximum(self.union, 1), 0.0)


def _aji_sums(ov: _Overlap) -> tuple[int, int]:
    c_sum = u_sum = 0
    used = np.zeros(len(ov.pred_ids), dtype=bool)
    for gi in range(len(ov.gt_ids)):
        row = ov.iou[gi]
        if not (ov.inter[gi] > 0).any():
            u_sum += int(ov.gt_area[gi])
            continue
        pj = int(np.argmax(row))  # first maximum == lowest pred id
        c_sum += int(ov.inter[gi, pj])
        u_sum += int(ov.union[gi, pj])
        used[pj] = True
    u_sum += int(ov.pred_area[~used].sum())
    return c_sum, u_sum


def aji(pred: np.ndarray, gt: np.ndarray) -> float:
    c_sum, u_sum = _aji_sums(_Overlap(pred, gt))
    return 1.0 if u_sum == 0 else c_sum / u_sum


def _match(ov: _Overlap) -> Matching:
    gi, pj = np.nonzero(ov.iou > MATCH_IOU)
    pairs = [(int(ov.gt_ids[g]), int(ov.pred_ids[p]), float(ov.iou[g, p])) for g, p in zip(gi, pj)]
    matched_g, matched_p = set(gi.tolist()), set(pj.tolist())
    return Matching(
        pairs=pairs,
        unmatched_gt=[int(x) for i, x in enumerate(ov.gt_ids) if i not in matched_g],
        unmatched_pred=[int(x) for j, x in enumerate(ov.pred_ids) if j not in matched_p],
    )


def match_instances(pred: np.ndarray, gt: np.ndarray) -> Matching:
    """Pair instances with IoU > 0.5; such pairs are necessarily one-to-one."""
    return _match(_Overlap(pred, gt))


def _pq_from_counts(tp: int, fp: int, fn: int, iou_sum: float) -> tuple[float, float, float]:
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    if tp == 0:
        return 0.0, 0.0, 0.0
    dq = tp / (tp + 0.5 * fp + 0.5 * fn)
    sq = iou_sum / tp
    return dq, sq, dq * sq


def panoptic_quality(m: Matching) -> tuple[float, float, float]:
    return _pq_from_counts(len(m.pairs), len(m.unmatched_pred), len(m.unmatched_gt),
                           sum(p[2] for p in m.pairs))


def gt_instance_classes(gt_instances: np.ndarray, gt_classes: np.ndarray) -> dict[int, int]:
    """Majority non-background class of each ground-truth instance."""
    gt_instances, gt_classes = np.asarray(gt_instances), np.asarray(gt_classes)
    fg = gt_instances > 0
    out: dict[int, int] = {}
    if not fg.any():
        return out
    ids, inv = np.unique(gt_instances[fg], return_inverse=True)
    counts = np.zeros((len(ids), 5), dtype=np.int64)
    np.add.at(counts, (inv, gt_classes[fg].astype(np.int64)), 1)
    counts[:, 0] = 0
    for i, k in enumerate(ids):
        out[int(k)] = int(np.argmax(counts[i]))
    return out


@dataclass
class _PQCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    def merge(self, other: "_PQCounts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.iou_sum += other.iou_sum

    def pq(self) -> tuple[float, float, float]:
        return _pq_from_counts(self.tp, self.fp, self.fn, self.iou_sum)


@dataclass
class MetricAccumulator:
    """Pooled sums for every metric; ``merge`` is associative and commutative."""

    dice_inter: int = 0
    dice_total: int = 0
    aji_c: int = 0
    aji_u: int = 0
    overall: _PQCounts = field(default_factory=_PQCounts)
    per_class: dict[int, _PQCounts] = field(
        default_factory=lambda: {c: _PQCounts() for c in NUCLEUS_CODES})

    def add(self, pred, gt_instances: np.ndarray, gt_classes: np.ndarray | None = None) -> None:
        """Add one image. ``pred`` is an instance map or a :class:`TypedInstanceMap`."""
        typed = isinstance(pred, TypedInstanceMap)
        pred_inst = np.asarray(pred.instances if typed else pred)
        gt_instances = np.asarray(gt_instances)
        ov = _Overlap(pred_inst, gt_instances)

        pm, gm = pred_inst > 0, gt_instances > 0
        self.dice_inter += int((pm & gm).sum())
        self.dice_total += int(pm.sum()) + int(gm.sum())
        c_sum, u_sum = _aji_sums(ov)
        self.aji_c += c_sum
        self.aji_u += u_sum

        m = _match(ov)
        self.overall.merge(_PQCounts(len(m.pairs), len(m.unmatched_pred), len(m.unmatched_gt),
                                     sum(p[2] for p in m.pairs)))

        if not typed or gt_classes is None:
            return
        gt_cls = gt_instance_classes(gt_instances, gt_classes)
        labels = pred.labels
        for code in NUCLEUS_CODES:
            counts = _PQCounts()
            matched_g, matched_p = set(), set()
            for g, p, iou in m.pairs:
                if gt_cls.get(g) == code and labels.get(p) == code:
                    counts.tp += 1
                    counts.iou_sum += iou
                    matched_g.add(g)
                    matched_p.add(p)
            counts.fn = sum(1 for g, c in gt_cls.items() if c == code and g not in matched_g)
            counts.fp = sum(1 for p, c in labels.items() if c == code and p not in matched_p)
            self.per_class[code].merge(counts)

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        self.dice_inter += other.dice_inter
        self.dice_total += other.dice_total
        self.aji_c += other.aji_c
        self.aji_u += other.aji_u
        self.overall.merge(other.overall)
        for code in NUCLEUS_CODES:
            self.per_class[code].merge(other.per_class[code])
        return self

    def report(self) -> MetricsReport:
        dice_v = 1.0 if self.dice_total == 0 else 2.0 * self.dice_inter / self.dice_total
        aji_v = 1.0 if self.aji_u == 0 else self.aji_c / self.aji_u
        dq, sq, pq = self.overall.pq()
        per_class = {}
        for code, c in self.per_class.items():
            if c.tp + c.fp + c.fn:
                per_class[code] = c.pq()[2]
        apq = float(np.mean(list(per_class.values()))) if per_class else 1.0
        return MetricsReport(dice_v, aji_v, dq, sq, pq, per_class, apq)


def per_class_pq(pred: TypedInstanceMap, gt_instances: np.ndarray,
                 gt_classes: np.ndarray) -> tuple[dict[int, float], float]:
    acc = MetricAccumulator()
    acc.add(pred, gt_instances, gt_classes)
    rep = acc.report()
    return rep.per_class_pq, rep.apq


def evaluate_pairs(pairs) -> MetricsReport:
    """Pool metrics over ``(pred, gt_instances, gt_classes)`` triples."""
    acc = MetricAccumulator()
    for pred, gt_inst, gt_cls in pairs:
        acc.add(pred, gt_inst, gt_cls)
    return acc.report()


# --- exhaustive oracle ---------------------------------------------------

ORACLE_MAX_SIDE = 64
ORACLE_MAX_INSTANCES = 12


def _pixel_sets(label_map: np.ndarray) -> dict[int, set]:
    sets: dict[int, set] = {}
    rows, cols = label_map.shape
    for r in range(rows):
        for c in range(cols):
            v = int(label_map[r, c])
            if v:
                sets.setdefault(v, set()).add((r, c))
    return sets


def oracle_metrics(pred: np.ndarray, gt: np.ndarray) -> MetricsReport:
    """Dice/AJI/PQ by brute-force enumeration of pixel sets, for small maps only."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("shape mismatch")
    if max(pred.shape) > ORACLE_MAX_SIDE:
        raise ValueError(f"oracle limited to {ORACLE_MAX_SIDE}x{ORACLE_MAX_SIDE} maps")
    P, G = _pixel_sets(pred), _pixel_sets(gt)
    if len(P) > ORACLE_MAX_INSTANCES or len(G) > ORACLE_MAX_INSTANCES:
        raise ValueError(f"oracle limited to {ORACLE_MAX_INSTANCES} instances per side")

    pred_fg = set().union(*P.values()) if P else set()
    gt_fg = set().union(*G.values()) if G else set()
    total = len(pred_fg) + len(gt_fg)
    dice_v = 1.0 if total == 0 else 2 * len(pred_fg & gt_fg) / total

    def jac(a, b):
        return len(a & b) / len(a | b)

    c_sum = u_sum = 0
    used = set()
    for g in sorted(G):
        best, best_j = None, -1.0
        for p in sorted(P):
            if G[g] & P[p]:
                j = jac(G[g], P[p])
                if j > best_j:
                    best, best_j = p, j
        if best is None:
            u_sum += len(G[g])
        else:
            c_sum += len(G[g] & P[best])
            u_sum += len(G[g] | P[best])
            used.add(best)
    u_sum += sum(len(P[p]) for p in P if p not in used)
    aji_v = 1.0 if u_sum == 0 else c_sum / u_sum

    ious = [jac(G[g], P[p]) for g in G for p in P if jac(G[g], P[p]) > MATCH_IOU]
    tp = len(ious)
    fp, fn = len(P) - tp, len(G) - tp
    if tp + fp + fn == 0:
        dq = sq = pq = 1.0
    elif tp == 0:
        dq = sq = pq = 0.0
    else:
        dq = tp / (tp + fp / 2 + fn / 2)
        sq = sum(ious) / tp
        pq = dq * sq
    return MetricsReport(dice_v, aji_v, dq, sq, pq)
