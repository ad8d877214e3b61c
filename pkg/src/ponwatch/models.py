"""The three recurrent models, their training loop and evaluation metrics.

* BranchClassifier: three stacked GRUs over a 280-sample region, softmax
  over 9 classes (0 normal, i = branch i faulty).
* GenericModelA: LSTM(16) over a 30-sample window with three heads:
  reflection count (0/1/2), two positions, two levels.
* GenericModelB: LSTM(16) with two heads: event class C0..C6 and two
  locations.

Position/level/location outputs are sigmoids, i.e. fractions of the window
length and normalized levels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .nn_core import (
    GRU,
    LSTM,
    AdamState,
    Dense,
    adam_step,
    clip_by_global_norm,
    format_checkpoint,
    mse_loss,
    mse_loss_grad,
    parse_checkpoint,
    softmax,
    softmax_cross_entropy,
)
from .nn_core.losses import log_softmax

MODEL_KINDS = ("branch", "generic_a", "generic_b")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, message="loss became non-finite"):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


class _Model:
    kind = ""
    task_names: tuple[str, ...] = ()
    seq_len = 0

    def __init__(self):
        self.layers: list[tuple[str, object]] = []

    # -- parameter plumbing -------------------------------------------------
    def parameters(self) -> dict:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.params.items()}

    def gradients(self) -> dict:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.grads.items()}

    def zero_grad(self):
        for _, layer in self.layers:
            for g in layer.grads.values():
                g.fill(0.0)

    def get_state(self) -> dict:
        return {k: v.copy() for k, v in self.parameters().items()}

    def set_state(self, state: dict):
        params = self.parameters()
        if set(params) != set(state):
            raise ValueError("parameter names do not match this model")
        for k, v in state.items():
            if params[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}")
            params[k][...] = v

    def manifest(self):
        out = []
        for name, layer in self.layers:
            ltype = type(layer).__name__
            dims = layer.dims
            if isinstance(layer, Dense):
                out.append((name, f"Dense:{layer.activation}", dims))
            else:
                out.append((name, ltype, dims))
        return out

    def _check_input(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None]
        if X.ndim != 2 or X.shape[1] != self.seq_len:
            raise ValueError(f"{self.kind} expects sequences of length {self.seq_len}, got {X.shape}")
        return X

    # -- subclasses ---------------------------------------------------------
    def forward(self, X) -> dict:
        raise NotImplementedError

    def targets(self, ds: Dataset, idx) -> dict:
        raise NotImplementedError

    def loss_terms(self, out: dict, tgt: dict) -> dict:
        raise NotImplementedError

    def loss_and_backward(self, X, tgt, weights):
        raise NotImplementedError

    def predicted_class(self, out: dict) -> np.ndarray:
        return np.argmax(out["logits"], axis=1)

    def true_class(self, tgt: dict) -> np.ndarray:
        return tgt["y"]


def _seq(X):
    # (N, T) -> time-major (T, N, 1)
    return np.ascontiguousarray(X.T[:, :, None])


class BranchClassifier(_Model):
    kind = "branch"
    task_names = ("cls",)

    def __init__(self, hidden=(64, 32, 16), n_classes=9, seq_len=280, seed=0, chrono_init=True):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.seq_len = seq_len
        self.n_classes = n_classes
        dims = (1,) + tuple(hidden)
        self.grus = [GRU(dims[i], dims[i + 1], rng) for i in range(len(hidden))]
        if chrono_init:
            # update-gate bias -log(u), u ~ U(1, T): keep-rates spread over the sequence length
            for g in self.grus:
                H = g.dims[1]
                g.params["b"][:H] = -np.log(rng.uniform(1.0, max(seq_len - 1, 2), H))
        self.head = Dense(dims[-1], n_classes, rng=rng)
        self.layers = [(f"gru{i}", g) for i, g in enumerate(self.grus)] + [("head", self.head)]

    def forward(self, X):
        X = self._check_input(X)
        h = _seq(X)
        for g in self.grus:
            h = g.forward(h)
        self._T = h.shape[0]
        self._last_shape = h.shape
        logits = self.head.forward(h[-1])
        return {"logits": logits}

    def targets(self, ds, idx):
        return {"y": ds.labels[idx]}

    def loss_terms(self, out, tgt):
        logp = log_softmax(out["logits"])
        return {"cls": float(-logp[np.arange(len(tgt["y"])), tgt["y"]].mean())}

    def loss_and_backward(self, X, tgt, weights=(1.0,)):
        out = self.forward(X)
        loss, dlogits = softmax_cross_entropy(out["logits"], tgt["y"])
        dlast = self.head.backward(weights[0] * dlogits)
        dh = np.zeros(self._last_shape)
        dh[-1] = dlast
        for g in reversed(self.grus):
            dh = g.backward(dh)
        return weights[0] * loss, {"cls": loss}

    def predict_proba(self, X):
        return softmax(self.forward(X)["logits"])


class _GenericModel(_Model):
    def _encode(self, X):
        X = self._check_input(X)
        hs = self.encoder.forward(_seq(X))
        self._enc_shape = hs.shape
        return hs[-1]

    def _encode_backward(self, dz):
        dh = np.zeros(self._enc_shape)
        dh[-1] = dz
        self.encoder.backward(dh)


class GenericModelA(_GenericModel):
    kind = "generic_a"
    task_names = ("type", "position", "level")

    def __init__(self, hidden=16, head_widths=(16, 32, 16), seq_len=30, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.seq_len = seq_len
        w_type, w_pos, w_lvl = head_widths
        self.encoder = LSTM(1, hidden, rng)
        self.type_hidden = Dense(hidden, w_type, "tanh", rng)
        self.type_out = Dense(w_type, 3, rng=rng)
        self.pos_hidden = Dense(hidden, w_pos, "tanh", rng)
        self.pos_out = Dense(w_pos, 2, "sigmoid", rng)
        self.lvl_hidden = Dense(hidden, w_lvl, "tanh", rng)
        self.lvl_out = Dense(w_lvl, 2, "sigmoid", rng)
        self.layers = [("encoder", self.encoder), ("type_hidden", self.type_hidden), ("type_out", self.type_out),
                       ("pos_hidden", self.pos_hidden), ("pos_out", self.pos_out),
                       ("lvl_hidden", self.lvl_hidden), ("lvl_out", self.lvl_out)]

    def forward(self, X):
        z = self._encode(X)
        return {
            "logits": self.type_out.forward(self.type_hidden.forward(z)),
            "positions": self.pos_out.forward(self.pos_hidden.forward(z)),
            "levels": self.lvl_out.forward(self.lvl_hidden.forward(z)),
        }

    def targets(self, ds, idx):
        mask = ds.mask[idx]
        return {"y": mask.sum(axis=1).astype(np.int64), "positions": ds.positions[idx],
                "levels": ds.levels[idx], "mask": mask}

    def loss_terms(self, out, tgt):
        logp = log_softmax(out["logits"])
        return {
            "type": float(-logp[np.arange(len(tgt["y"])), tgt["y"]].mean()),
            "position": mse_loss(out["positions"], tgt["positions"], tgt["mask"]),
            "level": mse_loss(out["levels"], tgt["levels"], tgt["mask"]),
        }

    def loss_and_backward(self, X, tgt, weights=(1.0, 1.0, 1.0)):
        check_weights(weights, 3)
        out = self.forward(X)
        l_cls, d_cls = softmax_cross_entropy(out["logits"], tgt["y"])
        l_pos, d_pos = mse_loss_grad(out["positions"], tgt["positions"], tgt["mask"])
        l_lvl, d_lvl = mse_loss_grad(out["levels"], tgt["levels"], tgt["mask"])
        w_cls, w_pos, w_lvl = weights
        dz = self.type_hidden.backward(self.type_out.backward(w_cls * d_cls))
        dz = dz + self.pos_hidden.backward(self.pos_out.backward(w_pos * d_pos))
        dz = dz + self.lvl_hidden.backward(self.lvl_out.backward(w_lvl * d_lvl))
        self._encode_backward(dz)
        total = w_cls * l_cls + w_pos * l_pos + w_lvl * l_lvl
        return total, {"type": l_cls, "position": l_pos, "level": l_lvl}


class GenericModelB(_GenericModel):
    kind = "generic_b"
    task_names = ("event", "location")

    def __init__(self, hidden=16, head_widths=(16, 32), seq_len=30, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.seq_len = seq_len
        w_ev, w_loc = head_widths
        self.encoder = LSTM(1, hidden, rng)
        self.event_hidden = Dense(hidden, w_ev, "tanh", rng)
        self.event_out = Dense(w_ev, 7, rng=rng)
        self.loc_hidden = Dense(hidden, w_loc, "tanh", rng)
        self.loc_out = Dense(w_loc, 2, "sigmoid", rng)
        self.layers = [("encoder", self.encoder), ("event_hidden", self.event_hidden),
                       ("event_out", self.event_out), ("loc_hidden", self.loc_hidden), ("loc_out", self.loc_out)]

    def forward(self, X):
        z = self._encode(X)
        return {
            "logits": self.event_out.forward(self.event_hidden.forward(z)),
            "positions": self.loc_out.forward(self.loc_hidden.forward(z)),
        }

    def targets(self, ds, idx):
        return {"y": ds.labels[idx], "positions": ds.positions[idx], "mask": ds.mask[idx]}

    def loss_terms(self, out, tgt):
        logp = log_softmax(out["logits"])
        return {
            "event": float(-logp[np.arange(len(tgt["y"])), tgt["y"]].mean()),
            "location": mse_loss(out["positions"], tgt["positions"], tgt["mask"]),
        }

    def loss_and_backward(self, X, tgt, weights=(1.0, 1.0)):
        check_weights(weights, 2)
        out = self.forward(X)
        l_cls, d_cls = softmax_cross_entropy(out["logits"], tgt["y"])
        l_loc, d_loc = mse_loss_grad(out["positions"], tgt["positions"], tgt["mask"])
        w_cls, w_loc = weights
        dz = self.event_hidden.backward(self.event_out.backward(w_cls * d_cls))
        dz = dz + self.loc_hidden.backward(self.loc_out.backward(w_loc * d_loc))
        self._encode_backward(dz)
        return w_cls * l_cls + w_loc * l_loc, {"event": l_cls, "location": l_loc}


def check_weights(weights, n):
    if len(weights) != n:
        raise ValueError(f"expected {n} task weights, got {len(weights)}")
    if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
        raise ValueError("task weights must be non-negative and not all zero")


def multi_task_loss(outputs: dict, targets: dict, weights) -> float:
    """Weighted sum of CCE and masked MSE terms.

    Two weights -> (class, location); three -> (type, position, level).
    """
    n = len(weights)
    check_weights(weights, n)
    logp = log_softmax(outputs["logits"])
    terms = [float(-logp[np.arange(len(targets["y"])), targets["y"]].mean())]
    terms.append(mse_loss(outputs["positions"], targets["positions"], targets["mask"]))
    if n == 3:
        terms.append(mse_loss(outputs["levels"], targets["levels"], targets["mask"]))
    elif n != 2:
        raise ValueError("weights must have 2 or 3 entries")
    return float(sum(w * t for w, t in zip(weights, terms) if w != 0))


def build_model(kind: str, seed: int = 0, **kwargs) -> _Model:
    if kind == "branch":
        return BranchClassifier(seed=seed, **kwargs)
    if kind == "generic_a":
        return GenericModelA(seed=seed, **kwargs)
    if kind == "generic_b":
        return GenericModelB(seed=seed, **kwargs)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


# ---------------------------------------------------------------------------
# single-record inference


def classify_branch(m: BranchClassifier, seq) -> np.ndarray:
    seq = np.asarray(seq, dtype=float)
    if seq.shape != (m.seq_len,):
        raise ValueError(f"expected a sequence of length {m.seq_len}")
    return m.predict_proba(seq)[0]


def predict_reflections(m: GenericModelA, window) -> dict:
    window = np.asarray(window, dtype=float)
    if window.shape != (m.seq_len,):
        raise ValueError(f"expected a window of length {m.seq_len}")
    out = m.forward(window)
    return {"type": int(np.argmax(out["logits"][0])), "probabilities": softmax(out["logits"][0]),
            "positions": out["positions"][0], "levels": out["levels"][0]}


def predict_event(m: GenericModelB, window) -> dict:
    window = np.asarray(window, dtype=float)
    if window.shape != (m.seq_len,):
        raise ValueError(f"expected a window of length {m.seq_len}")
    out = m.forward(window)
    return {"event_class": int(np.argmax(out["logits"][0])), "probabilities": softmax(out["logits"][0]),
            "locations": out["positions"][0]}


def predict_batches(model: _Model, X, batch_size: int = 512) -> dict:
    outs = [model.forward(X[i:i + batch_size]) for i in range(0, len(X), batch_size)]
    return {k: np.concatenate([o[k] for o in outs]) for k in outs[0]} if outs else {}


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 10
    task_weights: tuple = ()
    seed: int = 0
    clip_norm: float | None = 5.0
    min_epochs: int = 0
    time_budget_s: float | None = None

    def weights_for(self, model: _Model) -> tuple:
        w = tuple(self.task_weights) or (1.0,) * len(model.task_names)
        check_weights(w, len(model.task_names))
        return w


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    train_terms: dict = field(default_factory=dict)


def evaluate_loss(model: _Model, ds: Dataset, weights, batch_size=512) -> tuple[float, float]:
    """(weighted validation loss, classification accuracy) over `ds`."""
    total, correct, n = 0.0, 0, len(ds)
    for i in range(0, n, batch_size):
        idx = np.arange(i, min(i + batch_size, n))
        tgt = model.targets(ds, idx)
        out = model.forward(ds.values[idx])
        terms = model.loss_terms(out, tgt)
        total += len(idx) * sum(w * terms[k] for w, k in zip(weights, model.task_names))
        correct += int((model.predicted_class(out) == model.true_class(tgt)).sum())
    return total / n, correct / n


def train(model: _Model, dataset: Dataset, cfg: TrainConfig, log=None):
    """Mini-batch Adam with early stopping; returns (model at best val loss, history)."""
    import time

    train_ds = dataset.subset("train")
    val_ds = dataset.subset("val")
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("dataset needs non-empty train and val splits")
    weights = cfg.weights_for(model)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.learning_rate)
    best = (math.inf, model.get_state())
    history: list[EpochRecord] = []
    stale = 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_ds))
        running, seen = 0.0, 0
        term_sums: dict = {}
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            model.zero_grad()
            try:
                loss, terms = model.loss_and_backward(train_ds.values[idx], model.targets(train_ds, idx), weights)
            except FloatingPointError as e:
                raise TrainingDiverged(epoch, str(e)) from None
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            grads = model.gradients()
            gnorm = clip_by_global_norm(grads, cfg.clip_norm)
            if not math.isfinite(gnorm):
                bad = next(k for k, g in grads.items() if not np.all(np.isfinite(g)))
                raise TrainingDiverged(epoch, f"non-finite gradient in {bad}")
            adam_step(model.parameters(), grads, state)
            running += loss * len(idx)
            seen += len(idx)
            for k, v in terms.items():
                term_sums[k] = term_sums.get(k, 0.0) + v * len(idx)
        try:
            val_loss, val_acc = evaluate_loss(model, val_ds, weights)
        except FloatingPointError as e:
            raise TrainingDiverged(epoch, str(e)) from None
        if not math.isfinite(val_loss):
            raise TrainingDiverged(epoch, "validation loss became non-finite")
        rec = EpochRecord(epoch, running / seen, val_loss, val_acc, {k: v / seen for k, v in term_sums.items()})
        history.append(rec)
        if log:
            log(f"epoch {epoch}: train {rec.train_loss:.4f} val {val_loss:.4f} acc {val_acc:.4f}")
        if val_loss < best[0]:
            best = (val_loss, model.get_state())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience and epoch >= cfg.min_epochs:
                break
        if cfg.time_budget_s is not None and time.perf_counter() - t0 > cfg.time_budget_s:
            break
    model.set_state(best[1])
    return model, history


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [true, predicted]
    labels: tuple

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def rates(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def row_rate(self, k: int) -> float:
        return float(self.rates()[k, k])

    def to_csv(self, path, header_lines=()) -> None:
        rates = self.rates()
        with open(path, "w") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write("true\\predicted," + ",".join(self.labels) + "\n")
            for k, name in enumerate(self.labels):
                fh.write(name + "," + ",".join(f"{v:.6f}" for v in rates[k]) + "\n")


def confusion_matrix(y_true, y_pred, n_classes, labels=None) -> ConfusionMatrix:
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
    labels = tuple(labels) if labels else tuple(str(i) for i in range(n_classes))
    return ConfusionMatrix(counts, labels)


def class_labels(model: _Model) -> tuple:
    if model.kind == "branch":
        return ("Normal",) + tuple(f"Faulty branch {i}" for i in range(1, model.n_classes))
    if model.kind == "generic_a":
        return ("No reflection", "One reflection", "Two reflections")
    return tuple(f"C{i}" for i in range(7))


def evaluate_classifier(model: _Model, split: Dataset) -> ConfusionMatrix:
    if len(split) == 0:
        raise ValueError("empty evaluation split")
    out = predict_batches(model, split.values)
    tgt = model.targets(split, np.arange(len(split)))
    labels = class_labels(model)
    return confusion_matrix(model.true_class(tgt), model.predicted_class(out), len(labels), labels)


DEFAULT_POSITION_BINS = np.arange(-5.5, 6.0, 1.0)  # samples
DEFAULT_LEVEL_BINS = np.round(np.arange(-0.2, 0.2001, 0.02), 10)


@dataclass
class RegressionReport:
    position_errors: np.ndarray  # samples
    level_errors: np.ndarray | None
    position_bins: np.ndarray
    level_bins: np.ndarray

    @staticmethod
    def _stats(e):
        if e is None or len(e) == 0:
            return float("nan"), float("nan")
        return float(np.mean(np.abs(e))), float(np.sqrt(np.mean(e * e)))

    @property
    def position_mae(self):
        return self._stats(self.position_errors)[0]

    @property
    def position_rmse(self):
        return self._stats(self.position_errors)[1]

    @property
    def level_mae(self):
        return self._stats(self.level_errors)[0]

    @property
    def level_rmse(self):
        return self._stats(self.level_errors)[1]

    def position_histogram(self):
        return np.histogram(np.clip(self.position_errors, self.position_bins[0], self.position_bins[-1]),
                            bins=self.position_bins)

    def level_histogram(self):
        if self.level_errors is None:
            return None
        return np.histogram(np.clip(self.level_errors, self.level_bins[0], self.level_bins[-1]),
                            bins=self.level_bins)


def evaluate_regression(model: _Model, split: Dataset, position_bins=None, level_bins=None,
                        min_pnr_db: float | None = None) -> RegressionReport:
    """Signed errors on mask-valid targets (prediction minus truth)."""
    if min_pnr_db is not None:
        split = split.subset(split.pnr_db >= min_pnr_db)
    out = predict_batches(model, split.values)
    m = split.mask.astype(bool)
    pos_err = (out["positions"] - split.positions)[m] * model.seq_len
    lvl_err = (out["levels"] - split.levels)[m] if "levels" in out else None
    return RegressionReport(
        pos_err,
        lvl_err,
        DEFAULT_POSITION_BINS if position_bins is None else np.asarray(position_bins),
        DEFAULT_LEVEL_BINS if level_bins is None else np.asarray(level_bins),
    )


def histogram_to_csv(path, hist, header_lines=()) -> None:
    counts, edges = hist
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("bin_left,bin_right,count\n")
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            fh.write(f"{lo:.6g},{hi:.6g},{int(c)}\n")


def history_to_csv(path, history, header_lines=()) -> None:
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("epoch,train_loss,val_loss,val_accuracy\n")
        for r in history:
            fh.write(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.val_accuracy!r}\n")


# ---------------------------------------------------------------------------
# checkpoints


def _init_kwargs(model: _Model) -> dict:
    if model.kind == "branch":
        return {"hidden": tuple(g.dims[1] for g in model.grus), "n_classes": model.n_classes,
                "seq_len": model.seq_len}
    if model.kind == "generic_a":
        return {"hidden": model.encoder.dims[1], "seq_len": model.seq_len,
                "head_widths": (model.type_hidden.dims[1], model.pos_hidden.dims[1], model.lvl_hidden.dims[1])}
    return {"hidden": model.encoder.dims[1], "seq_len": model.seq_len,
            "head_widths": (model.event_hidden.dims[1], model.loc_hidden.dims[1])}


def model_to_text(model: _Model, meta: dict | None = None) -> str:
    meta = dict(meta or {})
    for k, v in _init_kwargs(model).items():
        meta[f"arch.{k}"] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
    return format_checkpoint(model.kind, model.manifest(), model.parameters(), meta)


def model_from_text(text: str):
    kind, manifest, params, meta = parse_checkpoint(text)
    tuple_keys = {"head_widths"} | ({"hidden"} if kind == "branch" else set())
    kwargs = {}
    for k, v in meta.items():
        if k.startswith("arch."):
            key = k[5:]
            kwargs[key] = tuple(int(x) for x in v.split(",")) if key in tuple_keys else int(v)
    model = build_model(kind, **kwargs)
    if [m[:2] for m in model.manifest()] != [m[:2] for m in manifest]:
        raise ValueError("checkpoint layer manifest does not match the model architecture")
    model.set_state(params)
    return model, meta


def save_model(model: _Model, path, meta: dict | None = None) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(model_to_text(model, meta))


def load_model(path):
    with open(path) as fh:
        return model_from_text(fh.read())
