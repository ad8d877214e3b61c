"""OTDR trace synthesis for multi-branch passive optical networks.

Traces are built in linear power (Rayleigh backscatter baseline plus one
Gaussian reflector peak per monitored branch), converted to a dB display
trace with a dynamic-range floor, and min-max normalized. Noise is added
after normalization so that the peak-to-noise ratio refers to the peak
heights the models actually see.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

SPEED_OF_LIGHT = 2.99792458e8  # m/s
BREAK = math.inf  # attenuation sentinel: reflection vanished


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class BranchSpec:
    branch_id: int
    length_m: float
    has_reflector: bool = True


@dataclass(frozen=True)
class PonTopology:
    feeder_length_m: float
    split_ratio: int
    branches: tuple[BranchSpec, ...]
    min_gap_m: float = 2.0
    max_gap_m: float = 6.0

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if self.feeder_length_m <= 0:
            raise ConfigurationError("feeder_length_m must be positive")
        if self.split_ratio < 1 or self.split_ratio & (self.split_ratio - 1):
            raise ConfigurationError("split_ratio must be a power of two")
        if len(self.branches) > self.split_ratio:
            raise ConfigurationError("more branches than splitter ports")
        ids = [b.branch_id for b in self.branches]
        if ids != list(range(1, len(ids) + 1)):
            raise ConfigurationError("branch ids must be contiguous from 1")
        lengths = [b.length_m for b in self.branches]
        if any(length <= 0 for length in lengths):
            raise ConfigurationError("branch lengths must be positive")
        for a, b in zip(lengths, lengths[1:]):
            gap = b - a
            if gap <= 0:
                raise ConfigurationError("branch lengths must be strictly increasing")
            # small slack for lengths read back from text
            if not (self.min_gap_m - 1e-9 <= gap <= self.max_gap_m + 1e-9):
                raise ConfigurationError(
                    f"branch gap {gap:g} m outside [{self.min_gap_m:g}, {self.max_gap_m:g}]"
                )

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    def branch(self, branch_id: int) -> BranchSpec:
        for b in self.branches:
            if b.branch_id == branch_id:
                return b
        raise KeyError(f"no branch {branch_id}")


DEFAULT_BRANCH_LENGTHS_M = (3.0, 5.0, 10.0, 12.0, 18.0, 21.0, 26.0, 30.0)


def default_topology() -> PonTopology:
    """Feeder of 1 km into a 1:128 split with eight reflector-terminated branches."""
    return PonTopology(
        feeder_length_m=1000.0,
        split_ratio=128,
        branches=tuple(BranchSpec(i + 1, length) for i, length in enumerate(DEFAULT_BRANCH_LENGTHS_M)),
    )


def random_topology(rng: np.random.Generator, n_branches: int = 8, feeder_length_m: float = 1000.0,
                    min_gap_m: float = 2.0, max_gap_m: float = 6.0, split_ratio: int = 128) -> PonTopology:
    first = rng.uniform(2.0, 6.0)
    gaps = rng.uniform(min_gap_m, max_gap_m, size=max(n_branches - 1, 0))
    lengths = first + np.concatenate([[0.0], np.cumsum(gaps)])
    return PonTopology(
        feeder_length_m=feeder_length_m,
        split_ratio=split_ratio,
        branches=tuple(BranchSpec(i + 1, float(v)) for i, v in enumerate(lengths[:n_branches])),
        min_gap_m=min_gap_m,
        max_gap_m=max_gap_m,
    )


@dataclass(frozen=True)
class SimConfig:
    pulse_width_ns: float = 10.0
    sample_interval_ns: float = 2.0
    wavelength_nm: float = 1650.0  # metadata only
    group_index: float = 1.468
    attenuation_db_per_km: float = 0.3
    splitter_loss_db: float | None = None  # None -> 10*log10(split_ratio)
    reflector_return_db: float = 25.0
    dynamic_range_db: float = 40.0
    trace_len: int = 5200

    def __post_init__(self):
        for name in ("pulse_width_ns", "sample_interval_ns", "wavelength_nm", "group_index",
                     "attenuation_db_per_km", "reflector_return_db", "dynamic_range_db"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.splitter_loss_db is not None and self.splitter_loss_db < 0:
            raise ConfigurationError("splitter_loss_db must be non-negative")
        if self.trace_len < 1:
            raise ConfigurationError("trace_len must be positive")

    @property
    def sample_spacing_m(self) -> float:
        return SPEED_OF_LIGHT * self.sample_interval_ns * 1e-9 / (2.0 * self.group_index)

    @property
    def fwhm_samples(self) -> float:
        return self.pulse_width_ns / self.sample_interval_ns

    @property
    def support_radius(self) -> int:
        """Half-width of a reflector peak's support (support spans 3 FWHM)."""
        return int(math.floor(1.5 * self.fwhm_samples))

    def splitter_loss(self, topo: PonTopology) -> float:
        if self.splitter_loss_db is not None:
            return self.splitter_loss_db
        return 10.0 * math.log10(topo.split_ratio)


@dataclass(frozen=True)
class FaultScenario:
    branch_attenuation_db: dict = field(default_factory=dict)
    feeder_extra_loss_db: float = 0.0
    max_simultaneous_faults: int | None = None

    def __post_init__(self):
        for bid, att in self.branch_attenuation_db.items():
            if not att >= 0:
                raise ConfigurationError(f"attenuation for branch {bid} must be >= 0")
        if self.feeder_extra_loss_db < 0:
            raise ConfigurationError("feeder_extra_loss_db must be >= 0")
        n_faults = sum(1 for v in self.branch_attenuation_db.values() if v > 0)
        if self.max_simultaneous_faults is not None and n_faults > self.max_simultaneous_faults:
            raise ConfigurationError(
                f"{n_faults} faulty branches exceed max_simultaneous_faults={self.max_simultaneous_faults}"
            )

    def attenuation(self, branch_id: int) -> float:
        return float(self.branch_attenuation_db.get(branch_id, 0.0))

    def is_broken(self, branch_id: int) -> bool:
        return math.isinf(self.attenuation(branch_id))


@dataclass(frozen=True)
class Peak:
    branch_id: int
    peak_index: int
    peak_height: float


@dataclass
class OtdrTrace:
    samples: np.ndarray
    sample_interval_ns: float
    ground_truth: list[Peak]
    pnr_db: float | None = None  # None means clean
    normalized: bool = False
    # reflection-free companion trace, same units as samples
    baseline: np.ndarray | None = None
    offset: int = 0  # absolute index of samples[0]
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    @property
    def is_clean(self) -> bool:
        return self.pnr_db is None


def distance_to_index(d: float, cfg: SimConfig) -> int:
    if d < 0:
        raise ValueError("distance must be non-negative")
    # nearest sample; floor would put 20.42 m at 99 because of rounding in the spacing
    idx = int(math.floor(d / cfg.sample_spacing_m + 0.5))
    if idx >= cfg.trace_len:
        raise IndexError(f"distance {d} m maps to sample {idx} beyond trace_len {cfg.trace_len}")
    return idx


def index_to_distance(i: int, cfg: SimConfig) -> float:
    return i * cfg.sample_spacing_m


def reflector_indices(topo: PonTopology, cfg: SimConfig) -> dict[int, int]:
    out = {}
    for b in topo.branches:
        if not b.has_reflector:
            continue
        try:
            out[b.branch_id] = distance_to_index(topo.feeder_length_m + b.length_m, cfg)
        except IndexError as exc:
            raise ConfigurationError(str(exc)) from None
    return out


def splitter_index(topo: PonTopology, cfg: SimConfig) -> int:
    return distance_to_index(topo.feeder_length_m, cfg)


def _baseline(topo: PonTopology, scen: FaultScenario, cfg: SimConfig, with_faults: bool = True) -> np.ndarray:
    n = cfg.trace_len
    d = np.arange(n) * cfg.sample_spacing_m
    decay = 10.0 ** (-2.0 * cfg.attenuation_db_per_km * d / 1000.0 / 10.0)
    split = splitter_index(topo, cfg) if topo.feeder_length_m / cfg.sample_spacing_m < n else n
    after = np.arange(n) >= split

    # aggregate of split_ratio equal port shares; faulty monitored ports are
    # attenuated (or cut) from the splitter onwards
    shares = float(topo.split_ratio)
    if with_faults:
        for b in topo.branches:
            att = scen.attenuation(b.branch_id)
            if math.isinf(att):
                shares -= 1.0
            elif att > 0:
                shares -= 1.0 - 10.0 ** (-2.0 * att / 10.0)
    post = 10.0 ** (-2.0 * (cfg.splitter_loss(topo) + scen.feeder_extra_loss_db) / 10.0)
    post *= shares / topo.split_ratio
    return np.where(after, decay * post, decay)


def _peak_profile(center: int, amplitude: float, cfg: SimConfig) -> tuple[slice, np.ndarray]:
    r = cfg.support_radius
    lo = max(center - r, 0)
    hi = min(center + r + 1, cfg.trace_len)
    s = cfg.fwhm_samples / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    k = np.arange(lo, hi) - center
    return slice(lo, hi), amplitude * np.exp(-(k * k) / (2.0 * s * s))


def synthesize_clean_trace(topo: PonTopology, scen: FaultScenario, cfg: SimConfig) -> OtdrTrace:
    """Linear-power trace, not normalized; ground-truth heights are linear excess power."""
    centers = reflector_indices(topo, cfg)
    for bid in scen.branch_attenuation_db:
        if bid not in {b.branch_id for b in topo.branches}:
            raise ConfigurationError(f"fault on unknown branch {bid}")

    baseline = _baseline(topo, scen, cfg)
    # reflector strength is set against the fault-free local backscatter level
    healthy = _baseline(topo, scen, cfg, with_faults=False)
    trace = baseline.copy()
    gt = []
    for bid, c in centers.items():
        att = scen.attenuation(bid)
        if math.isinf(att):
            continue
        amp = healthy[c] * 10.0 ** (cfg.reflector_return_db / 10.0) * 10.0 ** (-2.0 * att / 10.0)
        sl, prof = _peak_profile(c, amp, cfg)
        trace[sl] += prof
        gt.append(Peak(bid, c, float(amp)))
    return OtdrTrace(
        samples=trace,
        sample_interval_ns=cfg.sample_interval_ns,
        ground_truth=gt,
        baseline=baseline,
        meta={"wavelength_nm": cfg.wavelength_nm},
    )


def to_display(trace: OtdrTrace, dynamic_range_db: float) -> OtdrTrace:
    """dB conversion, floor clip at `dynamic_range_db` below the first sample, min-max normalize."""
    if trace.normalized:
        raise ValueError("trace is already normalized")
    ref = trace.samples[0]
    floor = -dynamic_range_db

    def db(p):
        return np.maximum(10.0 * np.log10(p / ref), floor)

    vals = db(trace.samples)
    lo, hi = vals.min(), vals.max()
    if hi - lo <= 0:
        raise ValueError("degenerate trace: constant after clipping")
    norm = (vals - lo) / (hi - lo)
    base = (db(trace.baseline) - lo) / (hi - lo) if trace.baseline is not None else None

    gt = []
    for p in trace.ground_truth:
        h = norm[p.peak_index] - (base[p.peak_index] if base is not None else 0.0)
        if h > 1e-12:  # sunk below the floor otherwise
            gt.append(Peak(p.branch_id, p.peak_index, float(h)))
    return replace(trace, samples=norm, baseline=base, ground_truth=gt, normalized=True,
                   meta={**trace.meta, "dynamic_range_db": dynamic_range_db, "span_db": float(hi - lo)})


def simulate(topo: PonTopology, scen: FaultScenario, cfg: SimConfig) -> OtdrTrace:
    """Clean normalized display trace."""
    return to_display(synthesize_clean_trace(topo, scen, cfg), cfg.dynamic_range_db)


def add_awgn(trace: OtdrTrace, pnr_db: float, seed) -> OtdrTrace:
    """Add white Gaussian noise with sigma = h_max / 10**(pnr_db/10).

    `seed` may be an int or a numpy Generator.
    """
    if not trace.normalized:
        raise ValueError("noise is calibrated on normalized traces")
    if not math.isfinite(pnr_db):
        raise ValueError("pnr_db must be finite")
    meta = dict(trace.meta)
    if trace.ground_truth:
        h_max = max(p.peak_height for p in trace.ground_truth)
    else:
        h_max = float(np.max(trace.samples))
        meta["h_max_fallback"] = "no ground-truth peaks; used max(samples)"
    sigma = h_max / 10.0 ** (pnr_db / 10.0)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noisy = trace.samples + rng.normal(0.0, sigma, size=trace.samples.shape)
    meta["noise_sigma"] = sigma
    return replace(trace, samples=noisy, pnr_db=float(pnr_db), meta=meta)


def extract_region(trace: OtdrTrace, start: int, length: int) -> OtdrTrace:
    if start < 0 or length < 1 or start + length > len(trace):
        raise IndexError(f"region [{start}, {start + length}) outside trace of length {len(trace)}")
    gt, dropped = [], []
    for p in trace.ground_truth:
        if start <= p.peak_index < start + length:
            gt.append(Peak(p.branch_id, p.peak_index - start, p.peak_height))
        else:
            dropped.append(p.branch_id)
    meta = dict(trace.meta)
    if dropped:
        meta.setdefault("warnings", []).append(f"peaks of branches {dropped} outside region; dropped")
    sl = slice(start, start + length)
    return replace(
        trace,
        samples=trace.samples[sl].copy(),
        baseline=None if trace.baseline is None else trace.baseline[sl].copy(),
        ground_truth=gt,
        offset=trace.offset + start,
        meta=meta,
    )


def default_region_start(topo: PonTopology, cfg: SimConfig, lead: int = 10) -> int:
    centers = reflector_indices(topo, cfg)
    if not centers:
        return 0
    return max(min(centers.values()) - lead, 0)


def trace_to_csv(trace: OtdrTrace, path, header_lines=()) -> None:
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("index,value\n")
        for i, v in enumerate(trace.samples):
            fh.write(f"{trace.offset + i},{float(v)!r}\n")


def trace_from_csv(path, sample_interval_ns: float = 2.0) -> OtdrTrace:
    """Normalized samples written by trace_to_csv; ground truth is not stored."""
    rows = [line for line in open(path).read().splitlines() if line and not line.startswith("#")]
    if not rows or rows[0] != "index,value":
        raise ValueError(f"{path}: not a trace CSV")
    data = np.array([[float(x) for x in r.split(",")] for r in rows[1:]])
    if data.size == 0:
        raise ValueError(f"{path}: no samples")
    return OtdrTrace(data[:, 1], sample_interval_ns, [], normalized=True, offset=int(data[0, 0]))
