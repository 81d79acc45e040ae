"""FROC evaluation with the center-distance hit criterion.

A detection is a hit when its center lies within R (inclusive) of an
annotated nodule center. Per scan, detections are processed by descending
score (ties by input order); a hit claims the nearest-center annotation that
is still unhit and becomes a TP. A hit whose annotations are all claimed is
ignored (neither TP nor FP). Detections hitting nothing are FPs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .geom import Annotation, Box3, Detection, center_hit

FP_TARGETS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
TP, FP, IGNORED = "tp", "fp", "ignored"

PRED_HEADER = ["scan_id", "z", "y", "x", "dz", "dy", "dx", "score"]
ANN_HEADER = ["scan_id", "z", "y", "x", "r"]


@dataclass(frozen=True)
class FrocResult:
    sensitivities: tuple
    average: float
    fp_targets: tuple = FP_TARGETS

    def as_dict(self) -> dict:
        return {"fp_targets": list(self.fp_targets),
                "sensitivities": list(self.sensitivities),
                "average": self.average}


def _order(dets: Sequence[Detection]):
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def match_scan(dets: Sequence[Detection], anns: Sequence[Annotation]):
    """Label each detection of one scan; returns (labels, hit_flags, order)."""
    labels = [None] * len(dets)
    hit = [False] * len(anns)
    order = _order(dets)
    for i in order:
        d = dets[i]
        hits = [j for j, a in enumerate(anns) if center_hit(d, a)]
        if not hits:
            labels[i] = FP
            continue
        free = [j for j in hits if not hit[j]]
        if not free:
            labels[i] = IGNORED
            continue
        j = min(free, key=lambda j: (math.dist(d.box.center, anns[j].center), j))
        hit[j] = True
        labels[i] = TP
    return labels, hit, order


def match_detections(dets_by_scan: Mapping[str, Sequence[Detection]],
                     anns_by_scan: Mapping[str, Sequence[Annotation]]):
    """Per-scan ``(labels, hit_flags)`` keyed by scan id."""
    scans = sorted(set(dets_by_scan) | set(anns_by_scan))
    out = {}
    for s in scans:
        labels, hit, _ = match_scan(dets_by_scan.get(s, []), anns_by_scan.get(s, []))
        out[s] = (labels, hit)
    return out


def froc_curve(dets_by_scan: Mapping[str, Sequence[Detection]],
               anns_by_scan: Mapping[str, Sequence[Annotation]],
               n_scans: int | None = None) -> list[tuple[float, float]]:
    """Operating points ``(fp_per_scan, sensitivity)`` for each distinct score threshold.

    Greedy matching by descending score means the labels of detections above a
    threshold do not depend on those below it, so one pass suffices.
    """
    scans = sorted(set(dets_by_scan) | set(anns_by_scan))
    n_scans = n_scans if n_scans is not None else len(scans)
    total = sum(len(anns_by_scan.get(s, [])) for s in scans)
    if n_scans < 1:
        raise ValueError("FROC needs at least one scan")
    if total == 0:
        raise ValueError("FROC undefined: no annotations")
    events = []
    for s in scans:
        dets = dets_by_scan.get(s, [])
        labels, _, _ = match_scan(dets, anns_by_scan.get(s, []))
        events.extend((dets[i].score, labels[i]) for i in range(len(dets)))
    if not events:
        return [(0.0, 0.0)]
    events.sort(key=lambda e: -e[0])
    curve = []
    tp = fp = 0
    for idx, (score, label) in enumerate(events):
        tp += label == TP
        fp += label == FP
        if idx + 1 == len(events) or events[idx + 1][0] != score:
            curve.append((fp / n_scans, tp / total))
    return curve


def froc_at_points(curve: Sequence[tuple[float, float]], fp_targets=FP_TARGETS) -> FrocResult:
    """Staircase read-out: best sensitivity among points with fp_per_scan <= target."""
    sens = []
    for f in fp_targets:
        eligible = [s for fp, s in curve if fp <= f]
        sens.append(max(eligible) if eligible else 0.0)
    return FrocResult(tuple(sens), sum(sens) / len(sens), tuple(fp_targets))


def evaluate(dets_by_scan, anns_by_scan, n_scans=None) -> tuple[FrocResult, list]:
    curve = froc_curve(dets_by_scan, anns_by_scan, n_scans)
    return froc_at_points(curve), curve


def brute_force_froc(dets_by_scan, anns_by_scan, n_scans=None, fp_targets=FP_TARGETS) -> FrocResult:
    """Independent oracle: re-match from scratch at every threshold."""
    scans = sorted(set(dets_by_scan) | set(anns_by_scan))
    n_scans = n_scans if n_scans is not None else len(scans)
    total = sum(len(anns_by_scan.get(s, [])) for s in scans)
    thresholds = sorted({d.score for s in scans for d in dets_by_scan.get(s, [])}, reverse=True)
    points = []
    for t in thresholds:
        tp = fp = 0
        for s in scans:
            kept = [d for d in dets_by_scan.get(s, []) if d.score >= t]
            claimed = set()
            anns = anns_by_scan.get(s, [])
            for d in sorted(kept, key=lambda d: -d.score):
                inside = [j for j, a in enumerate(anns)
                          if math.dist(d.box.center, a.center) <= a.radius]
                if not inside:
                    fp += 1
                    continue
                free = [j for j in inside if j not in claimed]
                if free:
                    claimed.add(min(free, key=lambda j: (math.dist(d.box.center, anns[j].center), j)))
            tp += len(claimed)
        points.append((fp / n_scans, tp / total))
    sens = []
    for f in fp_targets:
        best = 0.0
        for fp_rate, s in points:
            if fp_rate <= f and s > best:
                best = s
        sens.append(best)
    return FrocResult(tuple(sens), sum(sens) / len(sens), tuple(fp_targets))


def report(result: FrocResult, curve) -> dict:
    d = result.as_dict()
    d["curve"] = [[fp, s] for fp, s in curve]
    return d


def format_table(result: FrocResult) -> str:
    """Seven sensitivities then the average, in the fixed reporting column order."""
    head = " ".join(f"{f:>7g}" for f in result.fp_targets) + "     Avg"
    row = " ".join(f"{100 * s:7.2f}" for s in result.sensitivities) + f" {100 * result.average:7.2f}"
    return head + "\n" + row


# -- CSV -------------------------------------------------------------------

def _num(v) -> str:
    # shortest repr that round-trips exactly
    return repr(float(v))


def _check_header(row, expected, path):
    if [c.strip() for c in row] != expected:
        raise ValueError(f"{path}: expected header {','.join(expected)}, got {','.join(row)}")


def read_predictions_csv(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: missing header row")
        _check_header(header, PRED_HEADER, path)
        for row in reader:
            if not row:
                continue
            sid = row[0]
            z, y, x, dz, dy, dx, score = map(float, row[1:8])
            out.setdefault(sid, []).append(Detection(Box3((z, y, x), (dz, dy, dx)), score))
    return out


def write_predictions_csv(path, dets_by_scan: Mapping[str, Sequence[Detection]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_HEADER)
        for sid in sorted(dets_by_scan):
            for d in dets_by_scan[sid]:
                w.writerow([sid, *(_num(v) for v in d.box.center + d.box.size), _num(d.score)])


def read_annotations_csv(path) -> dict[str, list[Annotation]]:
    out: dict[str, list[Annotation]] = {}
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: missing header row")
        _check_header(header, ANN_HEADER, path)
        for row in reader:
            if not row:
                continue
            z, y, x, r = map(float, row[1:5])
            out.setdefault(row[0], []).append(Annotation((z, y, x), r))
    return out


def write_annotations_csv(path, anns_by_scan: Mapping[str, Sequence[Annotation]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANN_HEADER)
        for sid in sorted(anns_by_scan):
            for a in anns_by_scan[sid]:
                w.writerow([sid, *(_num(v) for v in a.center), _num(a.radius)])
