"""Mini-batch training with Adam, early stopping and resumable checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .losses import TrainConfig, loss_joint
from .models import ModelGraph, load_checkpoint, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8

HISTORY_FIELDS = ("epoch", "step", "train_em", "train_ae", "val_em", "val_ae")


class TrainingError(RuntimeError):
    pass


@dataclass
class FlowData:
    """Encoded flows ``(N, H, W, 2)`` in [0, 1] and motion labels ``(N, 6)``."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1, 6)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} flows but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.x[idx], dtype=np.float64), self.y[idx]


# ----------------------------------------------------------------------- Adam
@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None], state: AdamState, lr: float) -> None:
    """Bias-corrected adaptive-moment update, in place.  Missing gradients count as zero."""
    state.t += 1
    c1 = 1.0 - ADAM_B1**state.t
    c2 = 1.0 - ADAM_B2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= ADAM_B1
        m += (1.0 - ADAM_B1) * g
        v *= ADAM_B2
        v += (1.0 - ADAM_B2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


# ----------------------------------------------------------------- evaluation
def evaluate_epoch(graph: ModelGraph, data: FlowData, config: TrainConfig) -> dict[str, float]:
    """Sample-weighted mean ego-motion and reconstruction losses; parameters untouched."""
    if len(data) == 0:
        return {"em": float("nan"), "ae": float("nan")}
    em_sum = ae_sum = 0.0
    has_ae = "reconstruction" in graph.outputs
    for s in range(0, len(data), config.batch_size):
        x, y = data.batch(slice(s, s + config.batch_size))
        out = graph(x)
        ev = TrainConfig(beta=config.beta, lam=1.0 if has_ae else 0.0)
        _, em, ae = loss_joint(out, y, ev, target=x if has_ae else None)
        em_sum += em.item() * len(y)
        if ae is not None:
            ae_sum += ae.item() * len(y)
    n = len(data)
    return {"em": em_sum / n, "ae": ae_sum / n if has_ae else float("nan")}


# --------------------------------------------------------------- checkpoints
def _quantize(arr: np.ndarray) -> None:
    arr[...] = arr.astype(np.float32).astype(np.float64)


@dataclass
class TrainState:
    epoch: int = 0  # completed epochs
    best_val: float = math.inf
    bad_epochs: int = 0
    adam: AdamState = field(default_factory=AdamState)

    @property
    def step(self) -> int:
        return self.adam.t

    def records(self) -> dict[str, np.ndarray]:
        rec = {
            "state.step": np.array([self.adam.t]),
            "state.epoch": np.array([self.epoch]),
            "state.best_val": np.array([self.best_val]),
            "state.bad_epochs": np.array([self.bad_epochs]),
        }
        for n in self.adam.m:
            rec[f"adam.m.{n}"] = self.adam.m[n]
            rec[f"adam.v.{n}"] = self.adam.v[n]
        return rec

    @classmethod
    def from_records(cls, rec: Mapping[str, np.ndarray]) -> "TrainState":
        adam = AdamState(int(rec["state.step"][0]))
        for k, a in rec.items():
            if k.startswith("adam.m."):
                adam.m[k[7:]] = np.array(a, dtype=np.float64)
            elif k.startswith("adam.v."):
                adam.v[k[7:]] = np.array(a, dtype=np.float64)
        return cls(int(rec["state.epoch"][0]), float(rec["state.best_val"][0]), int(rec["state.bad_epochs"][0]), adam)


def snapshot(graph: ModelGraph, state: TrainState) -> None:
    """Round the live training state to checkpoint precision (float32).

    Done at every epoch boundary whether or not a file is written, so a run
    resumed from disk continues bit-identically to an uninterrupted one.
    """
    for p in graph.params.values():
        _quantize(p.data)
    for d in (state.adam.m, state.adam.v):
        for a in d.values():
            _quantize(a)
    state.best_val = float(np.float32(state.best_val))


# -------------------------------------------------------------------- history
def write_history(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k not in ("epoch", "step") else int(r[k])) for k in HISTORY_FIELDS})


def read_history(path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {k: (int(r[k]) if k in ("epoch", "step") else float(r[k])) for k in HISTORY_FIELDS}
            for r in csv.DictReader(f)
        ]


@dataclass
class TrainResult:
    history: list[dict]
    best_val: float
    best_epoch: int
    stopped_early: bool
    best_checkpoint: Path | None = None
    best_state: dict[str, np.ndarray] | None = None


def shuffle_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(graph: ModelGraph, train_data: FlowData, val_data: FlowData | None, config: TrainConfig,
          out_dir=None, resume: bool = False, restore_best: bool = True) -> TrainResult:
    """Fit ``graph`` in place.

    With ``out_dir`` the run writes ``history.csv``, ``best.ckpt`` (lowest
    validation ego-motion loss) and ``last.ckpt`` (resumable state).  With
    ``restore_best`` the graph ends holding the best-validation parameters.
    """
    if len(train_data) == 0:
        raise ValueError("training set is empty")
    if train_data.x.shape[1:] != graph.input_shape:
        raise ValueError(f"training flows {train_data.x.shape[1:]} do not match model input {graph.input_shape}")
    has_ae = "reconstruction" in graph.outputs
    if config.lam > 0 and not has_ae:
        config = TrainConfig(**{**config.__dict__, "lam": 0.0})

    out = Path(out_dir) if out_dir is not None else None
    state = TrainState()
    history: list[dict] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / "last.ckpt").exists():
            restored, extra = load_checkpoint(out / "last.ckpt")
            graph.load_state(restored.state())
            state = TrainState.from_records(extra)
            if (out / "history.csv").exists():
                history = read_history(out / "history.csv")[: state.epoch]
            log.info("resumed at epoch %d, step %d", state.epoch, state.step)

    best_state = graph.state() if restore_best else None
    best_epoch = 0
    if history:
        best_epoch = min(history, key=lambda r: r["val_em"])["epoch"]
        if restore_best and (out / "best.ckpt").exists():
            best_state = load_checkpoint(out / "best.ckpt")[0].state()
    stopped = False
    n = len(train_data)
    for epoch in range(state.epoch, config.epochs):
        if state.bad_epochs >= config.patience:
            stopped = True
            break
        order = shuffle_order(n, config.seed, epoch)
        em_sum = ae_sum = 0.0
        for b, s in enumerate(range(0, n, config.batch_size)):
            idx = order[s : s + config.batch_size]
            x, y = train_data.batch(idx)
            graph.zero_grad()
            outputs = graph(x)
            total, em, ae = loss_joint(outputs, y, config, target=x if has_ae else None)
            if not np.isfinite(total.item()):
                raise TrainingError(f"non-finite loss {total.item()} at epoch {epoch}, batch {b} (step {state.step})")
            total.backward()
            adam_step(graph.params, {k: p.grad for k, p in graph.params.items()}, state.adam, config.lr)
            em_sum += em.item() * len(idx)
            if ae is not None:
                ae_sum += ae.item() * len(idx)

        row = {
            "epoch": epoch + 1,
            "step": state.step,
            "train_em": em_sum / n,
            "train_ae": ae_sum / n if has_ae else float("nan"),
        }
        val = evaluate_epoch(graph, val_data, config) if val_data is not None and len(val_data) else \
            {"em": row["train_em"], "ae": row["train_ae"]}
        row["val_em"], row["val_ae"] = val["em"], val["ae"]
        history.append(row)
        state.epoch = epoch + 1

        snapshot(graph, state)
        improved = row["val_em"] < state.best_val
        if improved:
            state.best_val = float(np.float32(row["val_em"]))
            state.bad_epochs = 0
            best_epoch = epoch + 1
            if restore_best:
                best_state = graph.state()
        else:
            state.bad_epochs += 1
        log.info("epoch %d step %d train_em %.5f val_em %.5f%s", epoch + 1, state.step, row["train_em"],
                 row["val_em"], " *" if improved else "")
        if out is not None:
            if improved:
                save_checkpoint(out / "best.ckpt", graph)
            save_checkpoint(out / "last.ckpt", graph, extra=state.records())
            write_history(history, out / "history.csv")

    if restore_best and best_state is not None and best_epoch:
        graph.load_state(best_state)
    return TrainResult(history, state.best_val, best_epoch, stopped,
                       out / "best.ckpt" if out is not None and best_epoch else None, best_state)
