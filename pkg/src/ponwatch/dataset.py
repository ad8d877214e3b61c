"""Labeled datasets built from synthesized traces.

Two record kinds:

* network records: a 280-sample region holding every branch reflection,
  labeled 0 (normal) or i (branch i faulty);
* window records: 30-sample windows cut after the splitter, labeled with an
  event class C0..C6 plus up to two reflection positions and levels.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .otdr_sim import (
    BREAK,
    FaultScenario,
    OtdrTrace,
    Peak,
    PonTopology,
    SimConfig,
    add_awgn,
    default_region_start,
    extract_region,
    reflector_indices,
    simulate,
    splitter_index,
)

NETWORK_LEN = 280
WINDOW_LEN = 30
N_EVENT_CLASSES = 7
SPLIT_NAMES = ("train", "val", "test")

# class -> (number of reflections, faulty flags)
EVENT_CLASSES = {
    0: (2, (False, False)),
    1: (2, (True, False)),
    2: (2, (False, True)),
    3: (2, (True, True)),
    4: (1, (False,)),
    5: (1, (True,)),
    6: (0, ()),
}
_CLASS_OF = {flags: c for c, (_, flags) in EVENT_CLASSES.items()}


class DatasetError(ValueError):
    pass


class WindowRejected(DatasetError):
    """Raised for windows holding three or more reflection centers."""


def reflection_count(event_class: int) -> int:
    return EVENT_CLASSES[event_class][0]


@dataclass(frozen=True)
class FaultinessRule:
    faulty_level_threshold: float = 0.8

    def __post_init__(self):
        if not 0 < self.faulty_level_threshold < 1:
            raise DatasetError("faulty_level_threshold must lie in (0, 1)")

    def is_faulty(self, height: float, reference_height: float) -> bool:
        return height < self.faulty_level_threshold * reference_height


@dataclass
class NetworkSample:
    values: np.ndarray
    label: int
    pnr_db: float | None = None
    ground_truth: list[Peak] = field(default_factory=list)
    baseline: np.ndarray | None = None


@dataclass
class WindowShell:
    values: np.ndarray
    offset: int  # absolute index of values[0]


@dataclass
class WindowSample:
    values: np.ndarray
    event_class: int
    positions: np.ndarray  # (2,), fraction of window length
    levels: np.ndarray  # (2,)
    mask: np.ndarray  # (2,) bool
    offset: int = 0
    pnr_db: float | None = None

    @property
    def n_reflections(self) -> int:
        return int(self.mask.sum())


def normalize_minmax(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if not hi > lo:
        raise DatasetError("cannot normalize a constant trace")
    return (v - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# network-dependent records


def network_template(topo: PonTopology, cfg: SimConfig, scen: FaultScenario | None = None,
                     length: int = NETWORK_LEN, lead: int = 10) -> NetworkSample:
    """Clean region covering all reflections, re-normalized to [0, 1]."""
    trace = simulate(topo, scen or FaultScenario(), cfg)
    region = extract_region(trace, default_region_start(topo, cfg, lead), length)
    return region_to_sample(region, label=0)


def region_to_sample(region: OtdrTrace, label: int) -> NetworkSample:
    lo, hi = region.samples.min(), region.samples.max()
    if not hi > lo:
        raise DatasetError("cannot normalize a constant region")
    scale = hi - lo
    values = (region.samples - lo) / scale
    base = None if region.baseline is None else (region.baseline - lo) / scale
    gt = [Peak(p.branch_id, p.peak_index, p.peak_height / scale) for p in region.ground_truth]
    return NetworkSample(values=values, label=label, pnr_db=region.pnr_db, ground_truth=gt, baseline=base)


def reduce_reflection_height(sample: NetworkSample, branch_id: int, factor: float,
                             support_radius: int = 7) -> NetworkSample:
    """Scale one reflection's excess over its local baseline; label the sample with that branch."""
    if not 0 <= factor <= 1:
        raise DatasetError("factor must lie in [0, 1]")
    peak = next((p for p in sample.ground_truth if p.branch_id == branch_id), None)
    if peak is None:
        raise DatasetError(f"branch {branch_id} has no reflection in this sample")
    values = sample.values.copy()
    lo = max(peak.peak_index - support_radius, 0)
    hi = min(peak.peak_index + support_radius + 1, len(values))
    if sample.baseline is not None:
        base = sample.baseline[lo:hi]
    else:
        base = np.linspace(values[max(lo - 1, 0)], values[min(hi, len(values) - 1)], hi - lo)
    values[lo:hi] = base + factor * (values[lo:hi] - base)
    gt = [replace(p, peak_height=p.peak_height * factor) if p.branch_id == branch_id else p
          for p in sample.ground_truth]
    if factor == 0:
        gt = [p for p in gt if p.branch_id != branch_id]
    return replace(sample, values=values, label=branch_id, ground_truth=gt)


def attenuation_to_factor(one_way_db: float) -> float:
    """Round-trip linear power factor of a one-way attenuation."""
    if math.isinf(one_way_db):
        return 0.0
    return 10.0 ** (-2.0 * one_way_db / 10.0)


@dataclass(frozen=True)
class NetworkRecipe:
    per_class_count: int
    pnr_range: tuple[float, float] = (5.0, 30.0)
    attenuation_range_db: tuple[float, float] = (1.0, 10.0)
    break_fraction: float = 0.05
    seed: int = 0
    length: int = NETWORK_LEN
    lead: int = 10
    feeder_loss_range_db: tuple[float, float] | None = None  # extra one-way feeder loss per record


# ---------------------------------------------------------------------------
# generic (window) records


def window_trace(trace: OtdrTrace, window_len: int = WINDOW_LEN, stride: int | None = None,
                 start: int = 0, stop: int | None = None) -> list[WindowShell]:
    stride = window_len if stride is None else stride
    if start < 0 or stride < 1:
        raise DatasetError("start must be >= 0 and stride >= 1")
    end = len(trace) if stop is None else min(stop, len(trace))
    if end - start < window_len:
        raise DatasetError("trace shorter than one window")
    return [WindowShell(trace.samples[s:s + window_len].copy(), trace.offset + s)
            for s in range(start, end - window_len + 1, stride)]


def peaks_in_window(offset: int, window_len: int, ground_truth) -> list[Peak]:
    return sorted((p for p in ground_truth if offset <= p.peak_index < offset + window_len),
                  key=lambda p: p.peak_index)


def label_window(shell: WindowShell, ground_truth, reference_heights: dict[int, float],
                 rule: FaultinessRule = FaultinessRule(), pnr_db: float | None = None) -> WindowSample:
    """Assign C0..C6 from the reflection centers inside the window.

    `ground_truth` holds absolute peak indices. A reflection that vanished
    is only counted if it is listed with height 0 (see `with_vanished`).
    """
    n = len(shell.values)
    peaks = peaks_in_window(shell.offset, n, ground_truth)
    if len(peaks) > 2:
        raise WindowRejected(f"{len(peaks)} reflections in window at {shell.offset}")
    flags = tuple(rule.is_faulty(p.peak_height, reference_heights[p.branch_id]) for p in peaks)
    positions = np.zeros(2)
    levels = np.zeros(2)
    mask = np.zeros(2, dtype=bool)
    for k, p in enumerate(peaks):
        positions[k] = (p.peak_index - shell.offset) / n
        levels[k] = p.peak_height
        mask[k] = True
    return WindowSample(shell.values, _CLASS_OF[flags], positions, levels, mask, shell.offset, pnr_db)


@dataclass(frozen=True)
class GenericRecipe:
    target_count: int
    fault_branches: tuple[int, ...] = (1, 3, 4, 5)  # the 3, 10, 12 and 18 m branches
    attenuation_range_db: tuple[float, float] = (3.0, 8.0)
    break_probability: float = 0.0  # fixed attenuators only; breaks are opt-in
    normal_probability: float = 0.2
    pnr_range: tuple[float, float] = (5.0, 30.0)
    balance_ratio: float = 1.0  # max/min class count allowed
    seed: int = 0
    window_len: int = WINDOW_LEN
    trailing_windows: int = 2
    rule: FaultinessRule = FaultinessRule()
    max_scenarios: int | None = None
    keep_vanished: bool = True  # label a broken branch's reflection at its reference spot, height 0


def reference_heights(topo: PonTopology, cfg: SimConfig) -> dict[int, float]:
    return {p.branch_id: p.peak_height for p in simulate(topo, FaultScenario(), cfg).ground_truth}


def with_vanished(ground_truth, reference_peaks) -> list[Peak]:
    """Add every reference reflection missing from `ground_truth` back at height 0.

    The window then keeps its expected reflection count and the vanished
    reflection is labeled faulty.
    """
    present = {p.branch_id for p in ground_truth}
    return list(ground_truth) + [Peak(p.branch_id, p.peak_index, 0.0)
                                 for p in reference_peaks if p.branch_id not in present]


def _random_scenario(rng: np.random.Generator, recipe: GenericRecipe) -> FaultScenario:
    if rng.random() < recipe.normal_probability or not recipe.fault_branches:
        return FaultScenario()
    chosen = [b for b in recipe.fault_branches if rng.random() < 0.5]
    if not chosen:
        chosen = [recipe.fault_branches[rng.integers(len(recipe.fault_branches))]]
    faults = {}
    for b in chosen:
        if rng.random() < recipe.break_probability:
            faults[b] = BREAK
        else:
            faults[b] = float(rng.uniform(*recipe.attenuation_range_db))
    return FaultScenario(faults)


# ---------------------------------------------------------------------------
# container, splits and serialization


@dataclass
class Dataset:
    kind: str  # "network" | "window"
    values: np.ndarray  # (n, seq_len)
    labels: np.ndarray  # (n,) int
    pnr_db: np.ndarray  # (n,)
    split: np.ndarray  # (n,) int8: 0 train, 1 val, 2 test, -1 unassigned
    positions: np.ndarray | None = None  # (n, 2) window records only
    levels: np.ndarray | None = None
    mask: np.ndarray | None = None
    seed: int = 0
    digest: str = ""
    rejected: int = 0

    def __len__(self):
        return len(self.labels)

    @property
    def seq_len(self) -> int:
        return self.values.shape[1]

    @property
    def n_classes(self) -> int:
        return 9 if self.kind == "network" else N_EVENT_CLASSES

    def subset(self, name_or_mask) -> "Dataset":
        if isinstance(name_or_mask, str):
            m = self.split == SPLIT_NAMES.index(name_or_mask)
        else:
            m = np.asarray(name_or_mask)
        pick = (lambda a: None if a is None else a[m])
        return replace(self, values=self.values[m], labels=self.labels[m], pnr_db=self.pnr_db[m],
                       split=self.split[m], positions=pick(self.positions), levels=pick(self.levels),
                       mask=pick(self.mask))

    def record(self, i: int):
        if self.kind == "network":
            return NetworkSample(self.values[i], int(self.labels[i]), float(self.pnr_db[i]))
        return WindowSample(self.values[i], int(self.labels[i]), self.positions[i], self.levels[i],
                            self.mask[i], pnr_db=float(self.pnr_db[i]))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


def config_digest(*parts) -> str:
    """sha256 over a canonical JSON rendering of dataclasses / plain values."""
    def plain(x):
        if hasattr(x, "__dataclass_fields__"):
            return {k: plain(v) for k, v in asdict(x).items()}
        if isinstance(x, dict):
            return {str(k): plain(v) for k, v in sorted(x.items(), key=lambda kv: str(kv[0]))}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        if isinstance(x, float) and math.isinf(x):
            return "inf"
        return x
    text = json.dumps([plain(p) for p in parts], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def split_dataset(labels, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> np.ndarray:
    """Stratified split tags (0 train, 1 val, 2 test)."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DatasetError("fractions must be three non-negative numbers summing to 1")
    labels = np.asarray(labels)
    split = np.full(len(labels), -1, dtype=np.int8)
    rng = np.random.default_rng(seed)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 3:
            raise DatasetError(f"class {c} has only {len(idx)} records")
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(len(idx) * fractions[0]))
        n_val = min(int(round(len(idx) * fractions[1])), len(idx) - n_train)
        split[idx[:n_train]] = 0
        split[idx[n_train:n_train + n_val]] = 1
        split[idx[n_train + n_val:]] = 2
    return split


def _record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _lossy_template(topo, cfg, recipe, loss_db):
    # the display range grows with the round-trip loss so the reflections stay above the floor
    cfg_l = replace(cfg, dynamic_range_db=cfg.dynamic_range_db + 2.0 * loss_db)
    tpl = network_template(topo, cfg_l, FaultScenario(feeder_extra_loss_db=loss_db), recipe.length, recipe.lead)
    reg = OtdrTrace(tpl.values, cfg.sample_interval_ns, tpl.ground_truth, normalized=True, baseline=tpl.baseline)
    return tpl, reg


def build_network_dataset(topo: PonTopology, cfg: SimConfig, recipe: NetworkRecipe) -> Dataset:
    if recipe.per_class_count <= 0:
        raise DatasetError("per_class_count must be positive")
    template = network_template(topo, cfg, length=recipe.length, lead=recipe.lead)
    branch_ids = [p.branch_id for p in template.ground_truth]
    if len(branch_ids) != topo.n_branches:
        raise DatasetError("every branch reflection must lie inside the extracted region")
    n_classes = topo.n_branches + 1
    n = recipe.per_class_count * n_classes
    values = np.empty((n, recipe.length))
    labels = np.empty(n, dtype=np.int64)
    pnrs = np.empty(n)
    region = OtdrTrace(template.values, cfg.sample_interval_ns, template.ground_truth, normalized=True,
                       baseline=template.baseline)
    for c in range(n_classes):
        for k in range(recipe.per_class_count):
            i = c * recipe.per_class_count + k
            rng = _record_rng(recipe.seed, i)
            tpl, reg = template, region
            if recipe.feeder_loss_range_db is not None:
                tpl, reg = _lossy_template(topo, cfg, recipe, float(rng.uniform(*recipe.feeder_loss_range_db)))
            gt = tpl.ground_truth
            vals = tpl.values
            if c > 0:
                if rng.random() < recipe.break_fraction:
                    factor = 0.0
                else:
                    factor = attenuation_to_factor(rng.uniform(*recipe.attenuation_range_db))
                s = reduce_reflection_height(tpl, c, factor, cfg.support_radius)
                vals, gt = s.values, s.ground_truth
            pnr = rng.uniform(*recipe.pnr_range)
            # noise level is referenced to the clean normal template's tallest peak
            noisy = add_awgn(replace(reg, samples=vals, ground_truth=tpl.ground_truth), pnr, rng)
            values[i] = noisy.samples
            labels[i] = c
            pnrs[i] = pnr
    digest = config_digest("network", topo, cfg, recipe)
    split = split_dataset(labels, seed=recipe.seed)
    return Dataset("network", values, labels, pnrs, split, seed=recipe.seed, digest=digest)


def build_generic_dataset(topo: PonTopology, cfg: SimConfig, recipe: GenericRecipe) -> Dataset:
    if recipe.target_count < N_EVENT_CLASSES:
        raise DatasetError("target_count must allow at least one record per class")
    per_class = recipe.target_count // N_EVENT_CLASSES
    cap = int(math.floor(per_class * recipe.balance_ratio))
    ref_peaks = simulate(topo, FaultScenario(), cfg).ground_truth
    ref = {p.branch_id: p.peak_height for p in ref_peaks}
    centers = reflector_indices(topo, cfg)
    split_at = splitter_index(topo, cfg)
    wl = recipe.window_len
    stop = max(centers.values()) + (recipe.trailing_windows + 1) * wl if centers else split_at + 3 * wl
    buckets: list[list[WindowSample]] = [[] for _ in range(N_EVENT_CLASSES)]
    rejected = 0
    max_scen = recipe.max_scenarios or 200 * recipe.target_count
    s = 0
    while min(len(b) for b in buckets) < per_class:
        if s >= max_scen:
            missing = [f"C{c}" for c, b in enumerate(buckets) if len(b) < per_class]
            raise DatasetError(f"classes {missing} could not be filled after {s} scenarios")
        rng = _record_rng(recipe.seed, s)
        s += 1
        scen = _random_scenario(rng, recipe)
        trace = simulate(topo, scen, cfg)
        pnr = float(rng.uniform(*recipe.pnr_range))
        noisy = add_awgn(trace, pnr, rng)
        start = split_at + int(rng.integers(0, wl))
        truth = with_vanished(trace.ground_truth, ref_peaks) if recipe.keep_vanished else trace.ground_truth
        for shell in window_trace(noisy, wl, wl, start=start, stop=stop):
            try:
                w = label_window(shell, truth, ref, recipe.rule, pnr)
            except WindowRejected:
                rejected += 1
                continue
            if len(buckets[w.event_class]) < cap:
                buckets[w.event_class].append(w)
    if any(len(b) == 0 for b in buckets):
        missing = [f"C{c}" for c, b in enumerate(buckets) if not b]
        raise DatasetError(f"no examples for classes {missing}")
    records = [w for b in buckets for w in b]
    ds = _stack_windows(records)
    ds.split = split_dataset(ds.labels, seed=recipe.seed)
    ds.seed = recipe.seed
    ds.digest = config_digest("window", topo, cfg, recipe)
    ds.rejected = rejected
    return ds


def _stack_windows(records: list[WindowSample]) -> Dataset:
    return Dataset(
        "window",
        values=np.stack([w.values for w in records]),
        labels=np.array([w.event_class for w in records], dtype=np.int64),
        pnr_db=np.array([np.nan if w.pnr_db is None else w.pnr_db for w in records]),
        split=np.full(len(records), -1, dtype=np.int8),
        positions=np.stack([w.positions for w in records]),
        levels=np.stack([w.levels for w in records]),
        mask=np.stack([w.mask for w in records]),
    )


MAGIC = b"PONDS1"
VERSION = 1
_KIND_CODES = {"network": 1, "window": 2}
_HEADER = struct.Struct("<6sHBHQQ64s")


def _record_dtype(kind: str, seq_len: int) -> np.dtype:
    fields = [("values", "<f8", (seq_len,)), ("label", "<i4"), ("pnr_db", "<f8"), ("split", "i1")]
    if kind == "window":
        fields += [("positions", "<f8", (2,)), ("levels", "<f8", (2,)), ("mask", "u1", (2,))]
    return np.dtype(fields)


def save_dataset(ds: Dataset, path) -> None:
    rec = np.zeros(len(ds), dtype=_record_dtype(ds.kind, ds.seq_len))
    rec["values"] = ds.values
    rec["label"] = ds.labels
    rec["pnr_db"] = ds.pnr_db
    rec["split"] = ds.split
    if ds.kind == "window":
        rec["positions"] = ds.positions
        rec["levels"] = ds.levels
        rec["mask"] = ds.mask
    header = _HEADER.pack(MAGIC, VERSION, _KIND_CODES[ds.kind], ds.seq_len, len(ds), ds.seed,
                          ds.digest.encode().ljust(64, b"\0"))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, version, kind_code, seq_len, count, seed, digest = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    kind = {v: k for k, v in _KIND_CODES.items()}[kind_code]
    dt = _record_dtype(kind, seq_len)
    body = raw[_HEADER.size:]
    if len(body) != count * dt.itemsize:
        raise DatasetError(f"{path}: expected {count} records")
    rec = np.frombuffer(body, dtype=dt)
    ds = Dataset(kind, rec["values"].astype(np.float64), rec["label"].astype(np.int64),
                 rec["pnr_db"].astype(np.float64), rec["split"].astype(np.int8), seed=seed,
                 digest=digest.rstrip(b"\0").decode())
    if kind == "window":
        ds.positions = rec["positions"].astype(np.float64)
        ds.levels = rec["levels"].astype(np.float64)
        ds.mask = rec["mask"].astype(bool)
    return ds


def export_csv(ds: Dataset, path) -> None:
    with open(path, "w") as fh:
        cols = [f"v{i}" for i in range(ds.seq_len)] + ["label", "pnr_db", "split"]
        if ds.kind == "window":
            cols += ["pos0", "pos1", "level0", "level1", "mask0", "mask1"]
        fh.write(f"# digest={ds.digest} seed={ds.seed}\n")
        fh.write(",".join(cols) + "\n")
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.values[i]]
            row += [str(int(ds.labels[i])), repr(float(ds.pnr_db[i])), SPLIT_NAMES[ds.split[i]]
                    if ds.split[i] >= 0 else "none"]
            if ds.kind == "window":
                row += [repr(float(v)) for v in ds.positions[i]] + [repr(float(v)) for v in ds.levels[i]]
                row += [str(int(v)) for v in ds.mask[i]]
            fh.write(",".join(row) + "\n")
