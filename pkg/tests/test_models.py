import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ponwatch.dataset import Dataset
from ponwatch.models import (
    BranchClassifier,
    GenericModelA,
    GenericModelB,
    TrainConfig,
    TrainingDiverged,
    build_model,
    classify_branch,
    confusion_matrix,
    evaluate_classifier,
    evaluate_regression,
    history_to_csv,
    load_model,
    model_to_text,
    multi_task_loss,
    predict_event,
    predict_reflections,
    save_model,
    train,
)
from ponwatch.nn_core import AdamState, adam_step, mse_loss

from .oracles import model_gradient_error, random_targets


def _small(kind, seed=0, seq_len=8):
    if kind == "branch":
        return BranchClassifier(hidden=(4, 3), n_classes=5, seq_len=seq_len, seed=seed)
    if kind == "generic_a":
        return GenericModelA(hidden=4, head_widths=(3, 4, 3), seq_len=seq_len, seed=seed)
    return GenericModelB(hidden=4, head_widths=(3, 4), seq_len=seq_len, seed=seed)


def _toy_dataset(n_train=20, n_val=6, seq_len=6, seed=0):
    """Two linearly separable event classes: flat low traces (C6) vs flat high traces (C4)."""
    rng = np.random.default_rng(seed)
    n = n_train + n_val
    labels = np.where(np.arange(n) % 2 == 0, 4, 6)
    level = np.where(labels == 4, 0.8, 0.2)
    values = level[:, None] + 0.05 * rng.normal(size=(n, seq_len))
    mask = np.zeros((n, 2), dtype=bool)
    mask[labels == 4, 0] = True
    positions = np.where(mask, 0.5, 0.0)
    split = np.array([0] * n_train + [1] * n_val, dtype=np.int8)
    return Dataset("window", values, labels, np.full(n, 20.0), split, positions, np.where(mask, 0.8, 0.0), mask)


# -- architecture ------------------------------------------------------------------


def test_default_architectures():
    b = build_model("branch")
    assert [g.dims for g in b.grus] == [(1, 64), (64, 32), (32, 16)]
    assert b.head.dims == (16, 9) and b.seq_len == 280
    a = build_model("generic_a")
    assert a.encoder.dims == (1, 16) and a.seq_len == 30
    assert [a.type_hidden.dims[1], a.pos_hidden.dims[1], a.lvl_hidden.dims[1]] == [16, 32, 16]
    assert (a.type_out.dims[1], a.pos_out.dims[1], a.lvl_out.dims[1]) == (3, 2, 2)
    m = build_model("generic_b")
    assert (m.event_hidden.dims[1], m.loc_hidden.dims[1]) == (16, 32)
    assert (m.event_out.dims[1], m.loc_out.dims[1]) == (7, 2)
    with pytest.raises(ValueError):
        build_model("cnn")


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), kind=st.sampled_from(["branch", "generic_a", "generic_b"]),
       scale=st.floats(0.1, 100.0))
def test_heads_give_distributions_and_bounded_regressions(seed, kind, scale):
    m = _small(kind, seed)
    X = scale * np.random.default_rng(seed).normal(size=(5, 8))
    out = m.forward(X)
    p = np.exp(out["logits"] - out["logits"].max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    for k in ("positions", "levels"):
        if k in out:
            assert np.all((out[k] >= 0) & (out[k] <= 1))


def test_classify_branch_untrained_valid_distribution():
    m = BranchClassifier(hidden=(4, 4, 4), seed=1)
    p = classify_branch(m, np.random.default_rng(0).uniform(size=280))
    assert p.shape == (9,)
    assert abs(p.sum() - 1.0) < 1e-12 and np.all(p >= 0)


@pytest.mark.parametrize("fn,m", [(classify_branch, BranchClassifier(hidden=(2,), seed=0)),
                                  (predict_reflections, GenericModelA()),
                                  (predict_event, GenericModelB())])
def test_wrong_length_rejected(fn, m):
    with pytest.raises(ValueError):
        fn(m, np.zeros(m.seq_len + 1))


def test_single_window_predictions():
    w = np.linspace(0, 1, 30)
    r = predict_reflections(GenericModelA(seed=2), w)
    assert r["type"] in (0, 1, 2) and r["positions"].shape == (2,) and r["levels"].shape == (2,)
    e = predict_event(GenericModelB(seed=2), w)
    assert 0 <= e["event_class"] < 7 and abs(e["probabilities"].sum() - 1) < 1e-12


# -- losses ------------------------------------------------------------------------


def test_multi_task_loss_examples():
    out = {"logits": np.zeros((1, 3)), "positions": np.array([[0.5, 0.5]]), "levels": np.array([[0.2, 0.9]])}
    tgt = {"y": np.array([1]), "positions": np.array([[0.3, 0.0]]), "levels": np.array([[0.6, 0.0]]),
           "mask": np.array([[True, False]])}
    assert multi_task_loss(out, tgt, (1, 0, 0)) == pytest.approx(math.log(3), abs=1e-15)
    # ln 3 + (0.2)^2 + (0.4)^2
    assert multi_task_loss(out, tgt, (1, 1, 1)) == pytest.approx(math.log(3) + 0.04 + 0.16, abs=1e-12)
    perfect = {"logits": np.array([[-50.0, 50.0, -50.0]]), "positions": tgt["positions"], "levels": tgt["levels"]}
    assert multi_task_loss(perfect, tgt, (1, 1, 1)) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        multi_task_loss(out, tgt, (0, 0, 0))
    with pytest.raises(ValueError):
        multi_task_loss(out, tgt, (1, -1, 0))


@pytest.mark.parametrize("kind", ["generic_a", "generic_b"])
def test_loss_decomposition_one_hot_weights(kind):
    rng = np.random.default_rng(4)
    m = _small(kind, 4)
    X = rng.normal(size=(6, 8))
    tgt = random_targets(m, 6, rng)
    terms = m.loss_terms(m.forward(X), tgt)
    out = m.forward(X)
    for i, name in enumerate(m.task_names):
        w = tuple(1.0 if j == i else 0.0 for j in range(len(m.task_names)))
        assert multi_task_loss(out, tgt, w) == terms[name]
        total, _ = m.loss_and_backward(X, tgt, w)
        assert total == terms[name]


@pytest.mark.parametrize("kind", ["generic_a", "generic_b"])
def test_masked_targets_never_influence_gradients(kind):
    rng = np.random.default_rng(9)
    m = _small(kind, 9)
    X = rng.normal(size=(5, 8))
    tgt = random_targets(m, 5, rng)
    m.zero_grad()
    m.loss_and_backward(X, tgt, (1.0,) * len(m.task_names))
    ref = {k: g.copy() for k, g in m.gradients().items()}
    scrambled = dict(tgt)
    for k in ("positions", "levels"):
        if k in tgt:
            scrambled[k] = np.where(tgt["mask"], tgt[k], 0.0)
    m.zero_grad()
    m.loss_and_backward(X, scrambled, (1.0,) * len(m.task_names))
    for k, g in m.gradients().items():
        assert np.array_equal(g, ref[k]), k


@pytest.mark.parametrize("kind", ["branch", "generic_a", "generic_b"])
def test_full_model_gradients(kind):
    rng = np.random.default_rng(21)
    m = _small(kind, 21, seq_len=6)
    X = rng.normal(size=(3, 6))
    w = tuple(rng.uniform(0.5, 2.0, len(m.task_names)))
    assert model_gradient_error(m, X, random_targets(m, 3, rng), w) < 1e-5


# -- training ----------------------------------------------------------------------


def test_toy_separable_set_reaches_full_train_accuracy():
    ds = _toy_dataset()
    m = GenericModelB(hidden=4, head_widths=(4, 4), seq_len=6, seed=0)
    m, hist = train(m, ds, TrainConfig(learning_rate=0.02, batch_size=20, max_epochs=200, patience=200, seed=0))
    assert len(hist) <= 200
    cm = evaluate_classifier(m, ds.subset("train"))
    assert cm.accuracy == 1.0


def test_one_adam_step_decreases_batch_loss():
    ds = _toy_dataset()
    rng = np.random.default_rng(0)
    for kind in ("branch", "generic_a", "generic_b"):
        m = _small(kind, 3, seq_len=6)
        tgt = random_targets(m, 8, rng)
        X = ds.values[:8]
        w = (1.0,) * len(m.task_names)
        m.zero_grad()
        before, _ = m.loss_and_backward(X, tgt, w)
        adam_step(m.parameters(), m.gradients(), AdamState(lr=1e-4))
        terms = m.loss_terms(m.forward(X), tgt)
        after = sum(wi * terms[k] for wi, k in zip(w, m.task_names))
        assert after < before, kind


def test_training_is_deterministic():
    ds = _toy_dataset()
    cfg = TrainConfig(learning_rate=0.01, batch_size=8, max_epochs=5, seed=3)
    runs = []
    for _ in range(2):
        m, hist = train(GenericModelB(hidden=4, head_widths=(4, 4), seq_len=6, seed=1), ds, cfg)
        runs.append((model_to_text(m), [(r.train_loss, r.val_loss, r.val_accuracy) for r in hist]))
    assert runs[0] == runs[1]


def test_training_returns_best_validation_parameters():
    ds = _toy_dataset()
    m, hist = train(GenericModelB(hidden=4, head_widths=(4, 4), seq_len=6, seed=1), ds,
                    TrainConfig(learning_rate=0.05, batch_size=4, max_epochs=15, patience=15, seed=0))
    best = min(r.val_loss for r in hist)
    terms = m.loss_terms(m.forward(ds.subset("val").values), m.targets(ds.subset("val"), np.arange(6)))
    assert terms["event"] + terms["location"] == pytest.approx(best, rel=1e-12)


def test_divergence_reports_epoch():
    ds = _toy_dataset()
    m = GenericModelB(hidden=4, head_widths=(4, 4), seq_len=6, seed=1)
    m.encoder.params["W"][...] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train(m, ds, TrainConfig(max_epochs=3))


def test_training_needs_train_and_val():
    ds = _toy_dataset()
    ds.split[:] = 0
    with pytest.raises(ValueError):
        train(GenericModelB(seq_len=6), ds, TrainConfig(max_epochs=1))


def test_train_config_weights():
    assert TrainConfig().weights_for(GenericModelA()) == (1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        TrainConfig(task_weights=(1.0, 1.0)).weights_for(GenericModelA())
    with pytest.raises(ValueError):
        TrainConfig(task_weights=(0.0, 0.0)).weights_for(GenericModelB())


def test_history_csv(tmp_path):
    ds = _toy_dataset()
    _, hist = train(GenericModelB(hidden=4, head_widths=(4, 4), seq_len=6), ds, TrainConfig(max_epochs=3))
    history_to_csv(tmp_path / "h.csv", hist, ["seed 0"])
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[:2] == ["# seed 0", "epoch,train_loss,val_loss,val_accuracy"] and len(lines) == 2 + len(hist)


# -- evaluation --------------------------------------------------------------------


def test_perfect_predictor_confusion():
    y = np.repeat(np.arange(9), 5)
    cm = confusion_matrix(y, y, 9)
    assert cm.accuracy == 1.0 and cm.total == 45
    assert np.array_equal(cm.rates(), np.eye(9))


def test_confusion_counts_and_csv(tmp_path):
    cm = confusion_matrix([0, 0, 1, 1, 1], [0, 1, 1, 1, 0], 2, ["Normal", "Faulty branch 1"])
    assert cm.counts.tolist() == [[1, 1], [1, 2]]
    assert cm.accuracy == pytest.approx(0.6)
    assert cm.row_rate(1) == pytest.approx(2 / 3)
    cm.to_csv(tmp_path / "c.csv", ["version 0.1.0"])
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[1] == "true\\predicted,Normal,Faulty branch 1"
    assert rows[2] == "Normal,0.500000,0.500000"


class _Perfect:
    """Predicts the dataset targets exactly."""

    kind = "generic_a"
    seq_len = 6

    def __init__(self, ds):
        self.ds = ds

    def forward(self, X):
        idx = [int(np.flatnonzero((self.ds.values == x).all(axis=1))[0]) for x in X]
        return {"logits": np.eye(3)[self.ds.mask[idx].sum(axis=1)] * 50, "positions": self.ds.positions[idx],
                "levels": self.ds.levels[idx]}


def test_perfect_predictor_regression():
    ds = _toy_dataset()
    r = evaluate_regression(_Perfect(ds), ds)
    assert r.position_mae == 0.0 and r.level_mae == 0.0
    counts, edges = r.position_histogram()
    zero_bin = np.searchsorted(edges, 0.0, side="right") - 1
    assert counts[zero_bin] == counts.sum() == int(ds.mask.sum())


def test_regression_errors_in_samples():
    ds = _toy_dataset()
    model = _Perfect(ds)
    base = model.forward

    def shifted(X):
        out = base(X)
        return dict(out, positions=out["positions"] + 1.0 / 6)

    model.forward = shifted
    r = evaluate_regression(model, ds)
    assert r.position_mae == pytest.approx(1.0, abs=1e-12)
    assert len(r.position_errors) == int(ds.mask.sum())


# -- checkpoints -------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["branch", "generic_a", "generic_b"])
def test_checkpoint_round_trip_byte_identical(kind, tmp_path):
    m = _small(kind, 5)
    save_model(m, tmp_path / "a.ckpt", {"seed": "5"})
    m2, meta = load_model(tmp_path / "a.ckpt")
    assert meta["seed"] == "5"
    save_model(m2, tmp_path / "b.ckpt", {"seed": "5"})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    X = np.random.default_rng(0).normal(size=(2, 8))
    assert np.array_equal(m.forward(X)["logits"], m2.forward(X)["logits"])


def test_set_state_rejects_foreign_parameters():
    with pytest.raises(ValueError):
        GenericModelA().set_state(GenericModelB().get_state())


def test_mse_used_for_levels_matches_masked_definition():
    # masked MSE averages over valid entries only
    assert mse_loss([[0.5, 0.9]], [[0.3, 0.0]], [[True, False]]) == pytest.approx(0.04)
