import numpy as np
import pytest

from ponwatch.dataset import label_window, window_trace
from ponwatch.monitor import (
    MonitorError,
    ReferenceEntry,
    ReferenceMap,
    build_reference,
    exit_code,
    format_reports,
    map_position_to_branch,
    monitor_with_model_a,
    monitor_with_model_b,
    reports_to_csv,
)
from ponwatch.otdr_sim import BREAK, FaultScenario, SimConfig, default_topology, distance_to_index, simulate

CFG = SimConfig()
TOPO = default_topology()


class OracleModel:
    """Returns the ground-truth labels of each window it has been shown, looked up by content."""

    def __init__(self, trace, ref_heights, kind):
        self.seq_len = 30
        self.kind = kind
        self.table = {}
        for shell in window_trace(trace, 30, 1, start=4800, stop=5200):
            w = label_window(shell, trace.ground_truth, ref_heights)
            n = int(w.mask.sum())
            if kind == "a":
                logits = np.eye(3)[n] * 10
            else:
                logits = np.eye(7)[w.event_class] * 10
            self.table[shell.values.tobytes()] = (logits, w.positions, w.levels)

    def forward(self, X):
        rows = [self.table[np.asarray(x, dtype=float).tobytes()] for x in X]
        out = {"logits": np.stack([r[0] for r in rows]), "positions": np.stack([r[1] for r in rows])}
        if self.kind == "a":
            out["levels"] = np.stack([r[2] for r in rows])
        return out


@pytest.fixture(scope="module")
def healthy():
    return simulate(TOPO, FaultScenario(), CFG)


@pytest.fixture(scope="module")
def ref(healthy):
    return build_reference(healthy, TOPO, CFG)


def _heights(trace):
    return {p.branch_id: p.peak_height for p in trace.ground_truth}


def test_reference_matches_geometry(ref):
    assert len(ref) == 8
    for e, b in zip(ref.entries, TOPO.branches):
        assert e.branch_id == b.branch_id
        assert abs(e.index - distance_to_index(TOPO.feeder_length_m + b.length_m, CFG)) <= 1


def test_reference_is_deterministic(healthy, ref):
    assert build_reference(healthy, TOPO, CFG) == ref


def test_reference_requires_healthy_trace():
    broken = simulate(TOPO, FaultScenario({4: BREAK}), CFG)
    with pytest.raises(MonitorError):
        build_reference(broken, TOPO, CFG)


def test_reference_blind_mode_with_model(healthy, ref):
    model = OracleModel(healthy, _heights(healthy), "a")
    blind = build_reference(healthy, TOPO, CFG, model=model)
    assert [e.index for e in blind.entries] == [e.index for e in ref.entries]


def test_reference_indices_strictly_increasing():
    with pytest.raises(MonitorError):
        ReferenceMap([ReferenceEntry(1, 10, 0.5), ReferenceEntry(2, 10, 0.5)], "x", 0, 100, 40.0, 0.2)


def test_map_position_to_branch(ref):
    e = ref.entries[4]
    assert map_position_to_branch(e.index, ref) == (e.branch_id, False)
    assert map_position_to_branch(e.index + 2, ref)[0] == e.branch_id
    assert map_position_to_branch(ref.entries[0].index - 10, ref) == (None, False)


def test_map_position_ambiguity_flagged():
    close = ReferenceMap([ReferenceEntry(1, 100, 0.5), ReferenceEntry(2, 104, 0.5)], "x", 0, 200, 40.0, 0.2)
    assert map_position_to_branch(101, close) == (1, True)
    assert map_position_to_branch(103, close) == (2, True)


def test_expected_classes(ref):
    classes = {ref.expected_class(o) for o in ref.window_offsets()}
    assert classes <= {0, 4, 6}


@pytest.mark.parametrize("kind", ["a", "b"])
def test_healthy_trace_all_healthy(healthy, ref, kind):
    model = OracleModel(healthy, _heights(healthy), kind)
    mon = monitor_with_model_a if kind == "a" else monitor_with_model_b
    reports = mon(healthy, model, ref)
    assert [r.verdict for r in reports] == ["healthy"] * 8
    assert exit_code(reports) == 0


@pytest.mark.parametrize("kind", ["a", "b"])
def test_attenuated_branch_degraded(healthy, ref, kind):
    trace = simulate(TOPO, FaultScenario({3: 5.0}), CFG)
    model = OracleModel(trace, _heights(healthy), kind)
    mon = monitor_with_model_a if kind == "a" else monitor_with_model_b
    reports = mon(trace, model, ref)
    verdicts = {r.branch_id: r.verdict for r in reports}
    assert verdicts[3] == "degraded"
    assert all(v == "healthy" for b, v in verdicts.items() if b != 3)
    r3 = next(r for r in reports if r.branch_id == 3)
    assert abs(r3.location_index - ref.entry(3).index) <= 3
    assert exit_code(reports) == 1


def test_attenuation_reported_in_db(healthy, ref):
    trace = simulate(TOPO, FaultScenario({3: 5.0}), CFG)
    reports = monitor_with_model_a(trace, OracleModel(trace, _heights(healthy), "a"), ref)
    r3 = next(r for r in reports if r.branch_id == 3)
    assert r3.drop_db == pytest.approx(5.0, abs=0.1)


@pytest.mark.parametrize("kind", ["a", "b"])
def test_broken_branch_lost(healthy, ref, kind):
    trace = simulate(TOPO, FaultScenario({7: BREAK}), CFG)
    model = OracleModel(trace, _heights(healthy), kind)
    mon = monitor_with_model_a if kind == "a" else monitor_with_model_b
    verdicts = {r.branch_id: r.verdict for r in mon(trace, model, ref)}
    assert verdicts[7] == "lost"
    assert sum(v != "healthy" for v in verdicts.values()) == 1


def test_model_b_second_reflection_faulty(healthy, ref):
    # a window holding branches 1 and 2 reported as C2 implicates branch 2
    off = next(o for o in ref.window_offsets() if ref.expected_class(o) == 0
               and o <= ref.entry(2).index < o + 30 and o <= ref.entry(1).index)
    trace = simulate(TOPO, FaultScenario({2: 6.0}), CFG)
    model = OracleModel(trace, _heights(healthy), "b")
    window = trace.samples[off:off + 30]
    assert np.argmax(model.forward([window])["logits"][0]) == 2
    verdicts = {r.branch_id: r.verdict for r in monitor_with_model_b(trace, model, ref)}
    assert verdicts[2] == "degraded" and verdicts[1] == "healthy"


def test_window_mismatch_is_error(healthy, ref):
    model = OracleModel(healthy, _heights(healthy), "a")
    model.seq_len = 40
    with pytest.raises(MonitorError):
        monitor_with_model_a(healthy, model, ref)


def test_report_outputs(healthy, ref, tmp_path):
    trace = simulate(TOPO, FaultScenario({3: 5.0, 7: BREAK}), CFG)
    reports = monitor_with_model_a(trace, OracleModel(trace, _heights(healthy), "a"), ref)
    text = format_reports(reports, ["version 0.1.0"])
    assert text.startswith("# version 0.1.0\n")
    assert len(text.splitlines()) == 2 + 8
    assert "lost" in text and "degraded" in text
    reports_to_csv(reports, tmp_path / "r.csv")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0].startswith("branch_id,verdict") and len(rows) == 9
