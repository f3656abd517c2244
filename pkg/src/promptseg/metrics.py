"""Overlap and surface-distance metrics for binary masks.

Surface distances are measured between 4-connected boundary pixel centres.
The distance kernels come in two interchangeable flavours: numba-compiled
(exact Felzenszwalb-Huttenlocher squared EDT) and pure numpy (broadcast
min-plus passes). ``PROMPTSEG_NUMBA=0`` selects the numpy flavour.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _accel
from ._accel import njit
from .geometry import EmptyMaskError, validate_mask

METRIC_NAMES = ("iou", "dsc", "nsd", "assd")
LOWER_IS_BETTER = {"iou": False, "dsc": False, "nsd": False, "assd": True}

_INF = 1e20


# --------------------------------------------------------------------------
# kernels

@njit(cache=True, nogil=True)
def _boundary_nb(mask):
    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            if mask[i, j] == 0:
                continue
            if (
                i == 0 or j == 0 or i == h - 1 or j == w - 1
                or mask[i - 1, j] == 0 or mask[i + 1, j] == 0
                or mask[i, j - 1] == 0 or mask[i, j + 1] == 0
            ):
                out[i, j] = 1
    return out


def _boundary_np(mask: np.ndarray) -> np.ndarray:
    p = np.pad(mask, 1)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return (mask & (1 - interior)).astype(np.uint8)


@njit(cache=True, nogil=True)
def _edt_1d(f, d, v, z):
    # lower envelope of parabolas rooted at (q, f[q])
    n = f.shape[0]
    k = 0
    v[0] = 0
    z[0] = -_INF
    z[1] = _INF
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = _INF
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) * (q - v[k]) + f[v[k]]


@njit(cache=True, nogil=True)
def _edt_sq_nb(features):
    h, w = features.shape
    n = max(h, w)
    f = np.empty(n, dtype=np.float64)
    d = np.empty(n, dtype=np.float64)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    g = np.empty((h, w), dtype=np.float64)
    for j in range(w):
        for i in range(h):
            f[i] = 0.0 if features[i, j] != 0 else _INF
        _edt_1d(f[:h], d[:h], v, z)
        for i in range(h):
            g[i, j] = d[i]
    out = np.empty((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            f[j] = g[i, j]
        _edt_1d(f[:w], d[:w], v, z)
        for j in range(w):
            out[i, j] = d[j]
    return out


def _edt_sq_np(features: np.ndarray) -> np.ndarray:
    h, w = features.shape
    inf = np.where(features != 0, 0.0, _INF)
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    dy2 = (rows[:, None] - rows[None, :]) ** 2
    g = np.min(dy2[:, :, None] + inf[None, :, :], axis=1)
    g = np.minimum(g, _INF)
    dx2 = (cols[:, None] - cols[None, :]) ** 2
    out = np.min(g[:, None, :] + dx2[None, :, :], axis=2)
    return np.minimum(out, _INF)


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour; off-image counts as background."""
    m = validate_mask(mask)
    return _boundary_nb(m) if _accel.USE_NUMBA else _boundary_np(m)


def squared_distance_map(features: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance from every pixel to the nearest feature pixel."""
    f = np.ascontiguousarray(features, dtype=np.uint8)
    if not f.any():
        raise EmptyMaskError("no feature pixels")
    return _edt_sq_nb(f) if _accel.USE_NUMBA else _edt_sq_np(f)


# --------------------------------------------------------------------------
# metrics

def _pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = validate_mask(a, "a")
    b = validate_mask(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def iou(a: np.ndarray, b: np.ndarray, exact: bool = False) -> float | Fraction:
    """|A∩B| / |A∪B|, 1.0 for two empty masks. ``exact=True`` returns a Fraction."""
    a, b = _pair(a, b)
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    r = Fraction(1) if union == 0 else Fraction(inter, union)
    return r if exact else float(r)


def dsc(a: np.ndarray, b: np.ndarray, exact: bool = False) -> float | Fraction:
    """2|A∩B| / (|A|+|B|), 1.0 for two empty masks. ``exact=True`` returns a Fraction."""
    a, b = _pair(a, b)
    inter = int(np.count_nonzero(a & b))
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    r = Fraction(1) if total == 0 else Fraction(2 * inter, total)
    return r if exact else float(r)


def extract_boundary(mask: np.ndarray) -> np.ndarray:
    """Boundary pixel coordinates as a ``(K, 2)`` array of ``(row, col)``, row-major order."""
    return np.argwhere(boundary_mask(mask))


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # distances from each boundary pixel of src to the boundary of dst
    return np.sqrt(squared_distance_map(dst)[src.astype(bool)])


def nsd(a: np.ndarray, b: np.ndarray, tau: float = 1.0) -> float:
    """Normalized surface dice: share of boundary pixels within ``tau`` of the other boundary."""
    a, b = _pair(a, b)
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    ba, bb = boundary_mask(a), boundary_mask(b)
    na, nb = int(ba.sum()), int(bb.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    hits = np.count_nonzero(_directed(ba, bb) <= tau) + np.count_nonzero(_directed(bb, ba) <= tau)
    return hits / (na + nb)


def assd(a: np.ndarray, b: np.ndarray) -> float:
    """Average symmetric surface distance in pixels."""
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise EmptyMaskError("assd needs two non-empty masks")
    ba, bb = boundary_mask(a), boundary_mask(b)
    total = _directed(ba, bb).sum() + _directed(bb, ba).sum()
    return float(total / (ba.sum() + bb.sum()))


# --------------------------------------------------------------------------
# dataset reports

@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    role: str
    iou: float
    dsc: float
    nsd: float
    assd: float  # nan when either mask is empty


def case_metrics(case_id: str, role: str, pred: np.ndarray, ref: np.ndarray, tau: float = 1.0) -> CaseMetrics:
    try:
        sd = assd(pred, ref)
    except EmptyMaskError:
        sd = math.nan
    return CaseMetrics(case_id, role, iou(pred, ref), dsc(pred, ref), nsd(pred, ref, tau), sd)


@dataclass
class MetricReport:
    cases: list[CaseMetrics]
    aggregates: dict[str, dict[str, tuple[float, float]]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.cases = sorted(self.cases, key=lambda c: (c.case_id, c.role))
        if not self.aggregates:
            self.aggregates = _aggregate(self.cases)

    @property
    def roles(self) -> list[str]:
        return sorted(self.aggregates)

    def mean(self, role: str, metric: str) -> float:
        return self.aggregates[role][metric][0]

    def keys(self, role: str | None = None) -> list[tuple[str, str]]:
        return [(c.case_id, c.role) for c in self.cases if role is None or c.role == role]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("case_id,role,iou,dsc,nsd,assd\n")
        for c in self.cases:
            buf.write(_row(c.case_id, c.role, [getattr(c, m) for m in METRIC_NAMES]))
        for role in self.roles:
            agg = self.aggregates[role]
            buf.write(_row("__mean__", role, [agg[m][0] for m in METRIC_NAMES]))
            buf.write(_row("__std__", role, [agg[m][1] for m in METRIC_NAMES]))
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_csv().encode("utf-8"))

    @classmethod
    def read_csv(cls, path: str | Path) -> "MetricReport":
        """Load a report written by :meth:`write_csv`, aggregate rows included."""
        cases = []
        agg: dict[str, dict[str, list[float]]] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["case_id", "role", *METRIC_NAMES]:
                raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
            for rec in reader:
                try:
                    values = [float(rec[m]) for m in METRIC_NAMES]
                except (TypeError, ValueError):
                    raise ValueError(f"{path}: bad metric value in row {rec}") from None
                if rec["case_id"] in ("__mean__", "__std__"):
                    slot = 0 if rec["case_id"] == "__mean__" else 1
                    role_agg = agg.setdefault(rec["role"], {m: [math.nan, math.nan] for m in METRIC_NAMES})
                    for m, v in zip(METRIC_NAMES, values):
                        role_agg[m][slot] = v
                else:
                    cases.append(CaseMetrics(rec["case_id"], rec["role"], *values))
        if not cases:
            raise ValueError(f"{path}: no case rows")
        if {c.role for c in cases} != set(agg):
            raise ValueError(f"{path}: aggregate rows do not match case roles")
        return cls(cases, {r: {m: (v[0], v[1]) for m, v in ms.items()} for r, ms in agg.items()})


def fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def _row(case_id: str, role: str, values: Iterable[float]) -> str:
    return ",".join([case_id, role, *(fmt(v) for v in values)]) + "\n"


def _aggregate(cases: Sequence[CaseMetrics]) -> dict[str, dict[str, tuple[float, float]]]:
    out: dict[str, dict[str, tuple[float, float]]] = {}
    for role in sorted({c.role for c in cases}):
        sel = [c for c in cases if c.role == role]
        out[role] = {}
        for m in METRIC_NAMES:
            vals = np.array([getattr(c, m) for c in sel], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            # population std; nan rows (empty-mask assd) are skipped
            out[role][m] = (float(vals.mean()), float(vals.std())) if vals.size else (math.nan, math.nan)
    return out


def evaluate_dataset(
    predictions: Sequence[tuple[str, str, np.ndarray]],
    references: Sequence[tuple[str, str, np.ndarray]],
    tau: float = 1.0,
    workers: int = 1,
) -> MetricReport:
    """Score predictions against references keyed by ``(case_id, role)``."""
    if not predictions:
        raise ValueError("no predictions to evaluate")
    pred = {(cid, role): m for cid, role, m in predictions}
    ref = {(cid, role): m for cid, role, m in references}
    if len(pred) != len(predictions) or len(ref) != len(references):
        raise ValueError("duplicate (case_id, role) keys")
    if pred.keys() != ref.keys():
        missing = sorted(set(pred) ^ set(ref))
        raise ValueError(f"prediction/reference keys differ: {missing[:5]}")
    keys = sorted(pred)

    def one(key: tuple[str, str]) -> CaseMetrics:
        return case_metrics(key[0], key[1], pred[key], ref[key], tau)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cases = list(pool.map(one, keys))
    else:
        cases = [one(k) for k in keys]
    return MetricReport(cases)
