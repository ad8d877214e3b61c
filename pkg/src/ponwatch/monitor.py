"""Reference-based PON monitoring with the generic window models.

A reference map is taken once from a healthy trace. Incoming traces are cut
into overlapping windows (stride 15), the model is run on every window and
its predictions are turned back into absolute sample positions, matched to
the reference reflectors and compared with the reference levels.

Model A: every detection from every covering window that lands within the
match tolerance of a reference reflector counts toward that reflector. Levels
are averaged over detections well inside their window; if a reflector is only
ever seen near a window edge, the most central detection is used.

Model B: each reflector is judged from the single window in which it sits
most centrally, by pairing the expected reflectors of that window with the
predicted event class.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .dataset import WINDOW_LEN, window_trace
from .models import GenericModelA, GenericModelB, predict_batches
from .otdr_sim import OtdrTrace, PonTopology, SimConfig, distance_to_index, index_to_distance, splitter_index

MONITOR_STRIDE = 15
MATCH_TOLERANCE = 3  # samples
DEFAULT_THRESHOLD = 0.2  # relative level drop
VERDICTS = ("healthy", "degraded", "lost")

# model B classes as (count, (first faulty, second faulty))
_EVENTS = {0: (False, False), 1: (True, False), 2: (False, True), 3: (True, True), 4: (False,), 5: (True,), 6: ()}


class MonitorError(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceEntry:
    branch_id: int
    index: int
    level: float


@dataclass
class ReferenceMap:
    entries: list[ReferenceEntry]
    trace_digest: str
    scan_start: int
    scan_stop: int
    span_db: float
    sample_spacing_m: float
    window_len: int = WINDOW_LEN
    stride: int = MONITOR_STRIDE

    def __post_init__(self):
        idx = [e.index for e in self.entries]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise MonitorError("reference indices must be strictly increasing")

    def __len__(self):
        return len(self.entries)

    def entry(self, branch_id: int) -> ReferenceEntry:
        for e in self.entries:
            if e.branch_id == branch_id:
                return e
        raise KeyError(branch_id)

    def window_offsets(self) -> list[int]:
        return list(range(self.scan_start, self.scan_stop - self.window_len + 1, self.stride))

    def expected_class(self, offset: int) -> int:
        """C0, C4 or C6 for a healthy window at `offset`."""
        n = sum(offset <= e.index < offset + self.window_len for e in self.entries)
        return {2: 0, 1: 4, 0: 6}[n]


@dataclass
class FaultReport:
    branch_id: int
    verdict: str
    reference_index: int
    measured_level: float | None = None
    level_drop: float | None = None  # relative to the reference level
    drop_db: float | None = None  # one-way equivalent
    location_index: float | None = None
    location_m: float | None = None
    evidence: list = field(default_factory=list)

    @property
    def is_fault(self) -> bool:
        return self.verdict != "healthy"


def trace_digest(trace: OtdrTrace) -> str:
    return hashlib.sha256(np.ascontiguousarray(trace.samples, dtype="<f8").tobytes()).hexdigest()[:16]


def _scan_range(entries, split_at, window_len):
    last = entries[-1].index if entries else split_at
    return split_at, last + 2 * window_len


def build_reference(trace: OtdrTrace, topo: PonTopology, cfg: SimConfig, model: GenericModelA | None = None,
                    window_len: int = WINDOW_LEN, stride: int = MONITOR_STRIDE) -> ReferenceMap:
    """Reference map of a healthy trace.

    Peaks come from the trace ground truth, or from `model` predictions when
    one is given (blind mode). They are bound to branches in order of length.
    """
    if not trace.normalized:
        raise MonitorError("reference trace must be normalized")
    branches = sorted(topo.branches, key=lambda b: b.length_m)
    split_at = splitter_index(topo, cfg)
    if model is None:
        peaks = sorted((p.peak_index, p.peak_height) for p in trace.ground_truth)
    else:
        start, stop = _scan_range([ReferenceEntry(0, distance_to_index(topo.feeder_length_m + branches[-1].length_m,
                                                                      cfg), 0.0)], split_at, window_len)
        events = _detect_a(trace, model, start, stop, window_len, stride, cfg.support_radius)
        peaks = [(int(round(pos)), lvl) for pos, lvl, _ in events]
    if len(peaks) != len(branches):
        raise MonitorError(f"reference trace shows {len(peaks)} reflections, topology has {len(branches)}")
    entries = [ReferenceEntry(b.branch_id, int(i), float(h)) for b, (i, h) in zip(branches, peaks)]
    start, stop = _scan_range(entries, split_at, window_len)
    return ReferenceMap(entries, trace_digest(trace), start, min(stop, len(trace)),
                        float(trace.meta.get("span_db", cfg.dynamic_range_db)), cfg.sample_spacing_m,
                        window_len, stride)


def map_position_to_branch(index: float, ref: ReferenceMap, tol: float = MATCH_TOLERANCE):
    """Branch id of the nearest reference reflector within `tol`, else None.

    Returns (branch_id or None, ambiguous flag).
    """
    if not ref.entries:
        raise MonitorError("empty reference map")
    d = np.array([abs(index - e.index) for e in ref.entries])
    close = np.flatnonzero(d <= tol)
    if close.size == 0:
        return None, False
    best = close[np.argmin(d[close])]
    return ref.entries[best].branch_id, bool(close.size > 1)


def _check_trace(trace: OtdrTrace, ref: ReferenceMap, model):
    if not trace.normalized:
        raise MonitorError("trace must be normalized")
    if ref.scan_stop > len(trace):
        raise MonitorError("trace shorter than the reference scan range")
    if model.seq_len != ref.window_len:
        raise MonitorError(f"model window {model.seq_len} does not match reference window {ref.window_len}")


def _windows(trace, start, stop, window_len, stride):
    shells = window_trace(trace, window_len, stride, start=start, stop=stop)
    return shells, np.stack([s.values for s in shells])


def _detect_a(trace, model, start, stop, window_len, stride, margin):
    """Merged interior detections as (position, level, [window offsets])."""
    shells, X = _windows(trace, start, stop, window_len, stride)
    out = predict_batches(model, X)
    counts = np.argmax(out["logits"], axis=1)
    raw = []
    for k, shell in enumerate(shells):
        for j in range(counts[k]):
            pos = shell.offset + out["positions"][k, j] * window_len
            rel = pos - shell.offset
            first, last = k == 0, k == len(shells) - 1
            if (rel >= margin or first) and (rel < window_len - margin or last):
                raw.append((pos, float(out["levels"][k, j]), shell.offset))
    raw.sort()
    merged = []
    for pos, lvl, off in raw:
        if merged and pos - merged[-1][0][-1] <= MATCH_TOLERANCE:
            merged[-1][0].append(pos)
            merged[-1][1].append(lvl)
            merged[-1][2].append(off)
        else:
            merged.append(([pos], [lvl], [off]))
    return [(float(np.mean(p)), float(np.mean(l)), o) for p, l, o in merged]


def _report(entry: ReferenceEntry, ref: ReferenceMap, threshold: float, level=None, position=None, evidence=()):
    if level is None:
        return FaultReport(entry.branch_id, "lost", entry.index, evidence=list(evidence))
    drop = (entry.level - level) / entry.level
    verdict = "degraded" if drop > threshold else "healthy"
    return FaultReport(entry.branch_id, verdict, entry.index, measured_level=level, level_drop=drop,
                       drop_db=max(drop, 0.0) * entry.level * ref.span_db / 2.0,
                       location_index=position,
                       location_m=None if position is None else position * ref.sample_spacing_m,
                       evidence=list(evidence))


def _window_detections(trace, model, ref):
    """Every predicted reflection as (position, level, centrality, window offset)."""
    shells, X = _windows(trace, ref.scan_start, ref.scan_stop, ref.window_len, ref.stride)
    out = predict_batches(model, X)
    counts = np.argmax(out["logits"], axis=1)
    dets = []
    for k, shell in enumerate(shells):
        for j in range(counts[k]):
            rel = float(np.clip(out["positions"][k, j] * ref.window_len, 0, ref.window_len - 1))
            centrality = min(rel, ref.window_len - 1 - rel)
            dets.append((shell.offset + rel, float(out["levels"][k, j]), centrality, shell.offset))
    return dets


def monitor_with_model_a(trace: OtdrTrace, model: GenericModelA, ref: ReferenceMap,
                         threshold: float = DEFAULT_THRESHOLD, margin: int = 7) -> list[FaultReport]:
    """Per-branch verdicts from predicted reflection positions and levels.

    Detections from all overlapping windows within the matching tolerance of
    a reference reflector are merged: those at least `margin` samples inside
    their window are averaged, otherwise the most central one is used. A
    reflector with no detection nearby in any window is lost.
    """
    _check_trace(trace, ref, model)
    dets = _window_detections(trace, model, ref)
    reports = []
    for e in ref.entries:
        near = [d for d in dets if map_position_to_branch(d[0], ref)[0] == e.branch_id]
        if not near:
            reports.append(_report(e, ref, threshold))
            continue
        inner = [d for d in near if d[2] >= margin] or [max(near, key=lambda d: (d[2], -abs(d[0] - e.index)))]
        pos = float(np.mean([d[0] for d in inner]))
        lvl = float(np.mean([d[1] for d in inner]))
        reports.append(_report(e, ref, threshold, lvl, pos, [("window", d[3]) for d in near]))
    return reports


def _responsible_window(entry, offsets, window_len):
    """Covering window in which the reflector sits most centrally."""
    best, score = None, -1.0
    for o in offsets:
        rel = entry.index - o
        if 0 <= rel < window_len:
            s = min(rel, window_len - 1 - rel)
            if s > score:
                best, score = o, s
    return best


def monitor_with_model_b(trace: OtdrTrace, model: GenericModelB, ref: ReferenceMap) -> list[FaultReport]:
    """Per-branch verdicts from the difference between predicted and expected window classes."""
    _check_trace(trace, ref, model)
    shells, X = _windows(trace, ref.scan_start, ref.scan_stop, ref.window_len, ref.stride)
    out = predict_batches(model, X)
    pred = np.argmax(out["logits"], axis=1)
    by_offset = {s.offset: k for k, s in enumerate(shells)}
    reports = []
    for e in ref.entries:
        off = _responsible_window(e, by_offset, ref.window_len)
        k = by_offset[off]
        expected = [x for x in ref.entries if off <= x.index < off + ref.window_len]
        flags = _EVENTS[int(pred[k])]
        locs = off + out["positions"][k, :len(flags)] * ref.window_len
        assigned = _assign(expected, locs)
        ev = [("window", off, f"expected C{ref.expected_class(off)}", f"predicted C{int(pred[k])}")]
        if e.branch_id not in assigned:
            reports.append(FaultReport(e.branch_id, "lost", e.index, evidence=ev))
            continue
        j = assigned[e.branch_id]
        verdict = "degraded" if flags[j] else "healthy"
        reports.append(FaultReport(e.branch_id, verdict, e.index, location_index=float(locs[j]),
                                   location_m=float(locs[j]) * ref.sample_spacing_m, evidence=ev))
    return reports


def _assign(expected, locs) -> dict[int, int]:
    """Pair predicted reflections with expected reflectors (branch id -> prediction index)."""
    if len(locs) == len(expected):
        return {x.branch_id: j for j, x in enumerate(expected)}
    pairs = {}
    if len(locs) < len(expected):
        free = list(expected)
        for j, loc in enumerate(locs):
            x = min(free, key=lambda x: abs(x.index - loc))
            pairs[x.branch_id] = j
            free.remove(x)
    else:
        free = list(range(len(locs)))
        for x in expected:
            j = min(free, key=lambda j: abs(locs[j] - x.index))
            pairs[x.branch_id] = j
            free.remove(j)
    return pairs


def faults(reports) -> list[FaultReport]:
    return [r for r in reports if r.is_fault]


def exit_code(reports) -> int:
    return 1 if faults(reports) else 0


def _fmt(v, spec):
    return "-" if v is None else format(v, spec)


def format_reports(reports, header_lines=()) -> str:
    lines = [f"# {h}" for h in header_lines]
    lines.append("branch verdict   drop_dB location_m")
    for r in reports:
        lines.append(f"{r.branch_id:>6} {r.verdict:<8} {_fmt(r.drop_db, '7.2f'):>7} {_fmt(r.location_m, '10.2f'):>10}")
    return "\n".join(lines) + "\n"


def reports_to_csv(reports, path, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for h in header_lines:
            fh.write(f"# {h}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["branch_id", "verdict", "reference_index", "location_index", "location_m",
                    "measured_level", "level_drop", "drop_db"])
        for r in reports:
            w.writerow([r.branch_id, r.verdict, r.reference_index,
                        *("" if v is None else f"{v:.6g}" for v in (r.location_index, r.location_m,
                                                                    r.measured_level, r.level_drop, r.drop_db))])
