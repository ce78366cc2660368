"""Panoptic quality (PQ = SQ * RQ) and its identity-aware variant.

Stuff classes form one segment per class per map; thing classes form one
segment per (class, instance id). With ``id_aware`` a match additionally
requires equal instance ids.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .refine import PanopticMap


@dataclass(frozen=True)
class SegmentMatch:
    pred: tuple
    target: tuple
    cls: int
    iou: float


@dataclass
class ClassStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    @property
    def sq(self):
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def rq(self):
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / denom if denom else 0.0

    @property
    def pq(self):
        return self.sq * self.rq


@dataclass
class MatchResult:
    matches: list
    false_pos: list
    false_neg: list


@dataclass
class PQReport:
    per_class: dict = field(default_factory=dict)
    things: frozenset = frozenset()

    def average(self, group="all"):
        keys = sorted(self.per_class)
        if group == "things":
            keys = [c for c in keys if c in self.things]
        elif group == "stuff":
            keys = [c for c in keys if c not in self.things]
        if not keys:
            return {"pq": 0.0, "sq": 0.0, "rq": 0.0, "n": 0}
        st = [self.per_class[c] for c in keys]
        return {"pq": float(np.mean([s.pq for s in st])),
                "sq": float(np.mean([s.sq for s in st])),
                "rq": float(np.mean([s.rq for s in st])),
                "n": len(keys)}


def segments(pmap: PanopticMap, things):
    """``{(class, instance): boolean mask}``; stuff segments use instance 0."""
    out = {}
    cls, inst = pmap.class_id, pmap.instance_id
    for c in np.unique(cls):
        c = int(c)
        in_c = cls == c
        if c in things:
            for i in np.unique(inst[in_c]):
                out[(c, int(i))] = in_c & (inst == i)
        else:
            out[(c, 0)] = in_c
    return out


def match_segments(pred: PanopticMap, target: PanopticMap, things, threshold=0.5,
                   id_aware=False, strict=False):
    """One-to-one matching per class, greedily by descending IoU.

    A pair qualifies when IoU >= threshold (IoU > threshold with ``strict``).
    """
    if pred.shape != target.shape:
        raise ValueError(f"panoptic maps differ in size: {pred.shape} vs {target.shape}")
    things = frozenset(things)
    ps, ts = segments(pred, things), segments(target, things)
    cands = []
    for pk, pm in ps.items():
        for tk, tm in ts.items():
            if pk[0] != tk[0] or (id_aware and pk[1] != tk[1]):
                continue
            inter = np.count_nonzero(pm & tm)
            if not inter:
                continue
            iou = inter / np.count_nonzero(pm | tm)
            if iou > threshold or (not strict and iou == threshold):
                cands.append((iou, pk, tk))
    cands.sort(key=lambda c: (-c[0], c[1], c[2]))
    used_p, used_t, matches = set(), set(), []
    for iou, pk, tk in cands:
        if pk in used_p or tk in used_t:
            continue
        used_p.add(pk)
        used_t.add(tk)
        matches.append(SegmentMatch(pk, tk, pk[0], float(iou)))
    fps = sorted(k for k in ps if k not in used_p)
    fns = sorted(k for k in ts if k not in used_t)
    return MatchResult(matches, fps, fns)


def pq_sq_rq(result: MatchResult, things=()):
    """Per-class TP/FP/FN, SQ (mean matched IoU), RQ (F1) and PQ = SQ * RQ."""
    per = {}
    for m in result.matches:
        st = per.setdefault(m.cls, ClassStats())
        st.tp += 1
        st.iou_sum += m.iou
    for k in result.false_pos:
        per.setdefault(k[0], ClassStats()).fp += 1
    for k in result.false_neg:
        per.setdefault(k[0], ClassStats()).fn += 1
    return PQReport(per, frozenset(things))


def evaluate(pred, target, things, threshold=0.5, strict=False):
    """Returns ``(pq_report, pqid_report)``."""
    plain = pq_sq_rq(match_segments(pred, target, things, threshold, False, strict), things)
    ident = pq_sq_rq(match_segments(pred, target, things, threshold, True, strict), things)
    return plain, ident


CSV_HEADER = ["class", "PQ", "SQ", "RQ", "PQID", "SQID", "RQID", "TP", "FP", "FN"]


def report_rows(plain: PQReport, ident: PQReport):
    rows = []
    for c in sorted(set(plain.per_class) | set(ident.per_class)):
        a = plain.per_class.get(c, ClassStats())
        b = ident.per_class.get(c, ClassStats())
        rows.append([str(c), a.pq, a.sq, a.rq, b.pq, b.sq, b.rq, a.tp, a.fp, a.fn])
    for group, name in (("all", "All"), ("things", "Things"), ("stuff", "Stuff")):
        a, b = plain.average(group), ident.average(group)
        rows.append([name, a["pq"], a["sq"], a["rq"], b["pq"], b["sq"], b["rq"], "", "", ""])
    return rows


def write_csv(path, plain, ident):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for row in report_rows(plain, ident):
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
