"""Dominance, non-dominated filtering, validity filtering and 2-D hypervolume.

All objectives are minimized. Points with identical objective vectors do not
dominate each other, so co-optimal duplicates stay on the front.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Any, Hashable, Iterable, Mapping, Sequence

import numpy as np

MEASURED = "measured"
PREDICTED = "predicted"


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    if len(a) != len(b):
        raise ValueError(f"objective vectors differ in length ({len(a)} vs {len(b)})")
    strictly = False
    for x, y in zip(a, b):
        if x > y:
            return False
        if x < y:
            strictly = True
    return strictly


def nondominated_mask(F: np.ndarray) -> np.ndarray:
    """Boolean mask of the non-dominated rows of an (n, k) objective matrix."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2:
        raise ValueError(f"expected an (n, k) matrix, got shape {F.shape}")
    n, k = F.shape
    mask = np.zeros(n, dtype=bool)
    if n == 0:
        return mask
    if k == 1:
        return F[:, 0] == F[:, 0].min()
    order = np.lexsort(F.T[::-1])
    S = F[order]
    if k == 2:
        f1, f2 = S[:, 0], S[:, 1]
        starts = np.ones(n, dtype=bool)
        starts[1:] = f1[1:] != f1[:-1]
        group_start = np.maximum.accumulate(np.where(starts, np.arange(n), 0))
        prefix = np.minimum.accumulate(f2)
        before = np.full(n, np.inf)
        has_prev = group_start > 0
        before[has_prev] = prefix[group_start[has_prev] - 1]
        keep = (f2 == f2[group_start]) & (f2 < before)
        mask[order[keep]] = True
        return mask
    # k > 2: a point can only be dominated by a lexicographically earlier one,
    # and then also by some earlier front member
    front: list[int] = []
    for i in range(n):
        p = S[i]
        if front:
            Q = S[front]
            if np.any(np.all(Q <= p, axis=1) & np.any(Q < p, axis=1)):
                continue
        front.append(i)
    mask[order[front]] = True
    return mask


def pareto_front(points: Iterable[tuple[Hashable, Sequence[float]]]) -> list:
    """Keys of the non-dominated points, sorted by objectives then key.

    A key that appears more than once keeps its lexicographically smallest
    vector. Keys must be mutually orderable for ties to sort deterministically.
    """
    best: dict = {}
    width = None
    for key, vec in points:
        vec = tuple(float(v) for v in vec)
        if width is None:
            width = len(vec)
        elif len(vec) != width:
            raise ValueError(f"objective vectors differ in length ({width} vs {len(vec)})")
        if key not in best or vec < best[key]:
            best[key] = vec
    if not best:
        return []
    keys = list(best)
    F = np.asarray([best[k] for k in keys])
    mask = nondominated_mask(F)
    chosen = [(best[k], k) for k, m in zip(keys, mask) if m]
    try:
        chosen.sort()
    except TypeError:
        chosen.sort(key=lambda t: (t[0], repr(t[1])))
    return [k for _, k in chosen]


def filter_valid(samples: Sequence, thresholds: Mapping[str, float] | None) -> list:
    """Keep samples whose thresholded objectives are all strictly below the bound.

    Samples expose ``metrics`` (objective name -> value); failed samples
    (no metrics) are dropped whenever any threshold is given.
    """
    if not thresholds:
        return list(samples)
    known = set()
    for s in samples:
        known.update(s.metrics)
    unknown = [name for name in thresholds if known and name not in known]
    if unknown:
        raise KeyError(f"unknown objective(s) in validity thresholds: {', '.join(unknown)}")
    out = []
    for s in samples:
        if all(name in s.metrics and s.metrics[name] < bound for name, bound in thresholds.items()):
            out.append(s)
    return out


def hypervolume_2d(front: Iterable[Sequence[float]], ref: Sequence[float]) -> float:
    """Area dominated by ``front`` inside the box bounded by ``ref``."""
    if len(ref) != 2:
        raise ValueError(f"hypervolume_2d needs a 2-D reference point, got {len(ref)} components")
    r1, r2 = float(ref[0]), float(ref[1])
    pts = []
    for p in front:
        if len(p) != 2:
            raise ValueError(f"hypervolume_2d needs 2-D points, got {len(p)} components")
        a, b = float(p[0]), float(p[1])
        if a > r1 or b > r2:
            raise ValueError(f"point ({a}, {b}) exceeds reference point ({r1}, {r2})")
        pts.append((a, b))
    pts.sort()
    area = 0.0
    level = r2
    for a, b in pts:
        if b < level:
            area += (r1 - a) * (level - b)
            level = b
    return area


@dataclass(frozen=True)
class FrontEntry:
    config: Any
    objectives: tuple[float, ...]
    provenance: str = MEASURED


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(text: str):
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def front_csv(entries: Sequence[FrontEntry], param_names: Sequence[str],
              objective_names: Sequence[str]) -> str:
    """CSV text: parameters in space order, objectives in session order, provenance."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*param_names, *objective_names, "provenance"])
    for e in entries:
        values = e.config.as_dict() if hasattr(e.config, "as_dict") else dict(e.config)
        w.writerow([*(format_value(values[p]) for p in param_names),
                    *(repr(float(x)) for x in e.objectives), e.provenance])
    return buf.getvalue()


def read_front_csv(text: str, objective_names: Sequence[str]) -> list[FrontEntry]:
    """Parse ``front_csv`` output; configs come back as plain dicts."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    header = rows[0]
    obj_cols = [header.index(o) for o in objective_names]
    prov_col = header.index("provenance")
    param_cols = [i for i in range(len(header)) if i not in obj_cols and i != prov_col]
    out = []
    for row in rows[1:]:
        config = {header[i]: parse_value(row[i]) for i in param_cols}
        out.append(FrontEntry(config, tuple(float(row[i]) for i in obj_cols), row[prov_col]))
    return out
