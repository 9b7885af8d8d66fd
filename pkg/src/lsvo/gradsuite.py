"""Finite-difference gradient checks for every layer kind and both losses."""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Iterable

import numpy as np

from . import layers as L
from .losses import loss_ae, loss_em
from .models import build_lsvo
from .tensor import GradCheckReport, Tensor, concat, grad_check, log1p, mul, relu, sigmoid, tsum

TOL = 1e-4


def _t(rng, shape, name, low=None, high=None) -> Tensor:
    data = rng.uniform(low, high, shape) if low is not None else rng.normal(size=shape)
    return Tensor(data, requires_grad=True, name=name)


def _weighted_sum(out: Tensor, r: np.ndarray) -> Tensor:
    return tsum(mul(out, Tensor(r)))


def _case(rng, make: Callable[[dict], Tensor], tensors: dict[str, Tensor]) -> tuple[Callable[[], Tensor], dict]:
    probe = make(tensors)
    r = rng.normal(size=probe.shape)
    return (lambda: _weighted_sum(make(tensors), r)), tensors


def cases(seed: int) -> dict[str, tuple[Callable[[], Tensor], dict]]:
    rng = np.random.default_rng(seed)
    out = {}

    def conv_case(pad, stride, hw=(8, 8), k=(3, 3)):
        ts = {"x": _t(rng, (2, *hw, 2), "x"), "w": _t(rng, (*k, 2, 3), "w"), "b": _t(rng, (3,), "b")}
        return _case(rng, lambda t: L.conv2d(t["x"], t["w"], t["b"], stride, pad), ts)

    out["conv same 3x3/2 on 8x8x2"] = conv_case("same", (2, 2))
    out["conv valid 3x3/2 on 9x11x2"] = conv_case("valid", (2, 2), (9, 11))
    out["conv explicit 4x4/1 on 7x9x2"] = conv_case((1, 0, 1, 0), (1, 1), (7, 9), (4, 4))
    out["conv same 7x7/2 on 12x16x2"] = conv_case("same", (2, 2), (12, 16), (7, 7))

    ts = {"x": _t(rng, (2, 3, 4, 2), "x"), "w": _t(rng, (3, 3, 2, 3), "w"), "b": _t(rng, (3,), "b")}
    out["upconv x4 3x3 on 3x4x2"] = _case(rng, lambda t: L.upconv(t["x"], t["w"], t["b"], (4, 4)), ts)
    ts = {"x": _t(rng, (2, 6, 8, 3), "x"), "w": _t(rng, (1, 1, 3, 2), "w"), "b": _t(rng, (2,), "b")}
    out["upconv x2 1x1 on 6x8x3"] = _case(rng, lambda t: L.upconv(t["x"], t["w"], t["b"], (2, 2)), ts)

    ts = {"x": _t(rng, (2, 12, 16, 2), "x")}
    out["maxpool 2x2/2 floor on 12x16"] = _case(rng, lambda t: L.maxpool2d(t["x"], (2, 2), (2, 2), "floor"), ts)
    ts = {"x": _t(rng, (2, 11, 15, 2), "x")}
    out["maxpool 4x4/4 ceil on 11x15"] = _case(rng, lambda t: L.maxpool2d(t["x"], (4, 4), (4, 4), "ceil"), ts)
    ts = {"x": _t(rng, (2, 11, 15, 2), "x")}
    out["maxpool 4x4/4 floor on 11x15"] = _case(rng, lambda t: L.maxpool2d(t["x"], (4, 4), (4, 4), "floor"), ts)

    ts = {"x": _t(rng, (4, 3), "x"), "w": _t(rng, (3, 2), "w"), "b": _t(rng, (2,), "b")}
    out["dense 3->2 + relu"] = _case(rng, lambda t: relu(L.dense(t["x"], t["w"], t["b"])), ts)
    ts = {"x": _t(rng, (2, 12, 16, 2), "x")}
    out["crop 12x16 -> 11x14"] = _case(rng, lambda t: L.crop(t["x"], (11, 14)), ts)
    ts = {"a": _t(rng, (2, 3), "a"), "b": _t(rng, (2, 5), "b")}
    out["concat (2,3)+(2,5)"] = _case(rng, lambda t: concat([t["a"], t["b"]], axis=1), ts)
    ts = {"x": _t(rng, (3, 5), "x")}
    out["sigmoid"] = _case(rng, lambda t: sigmoid(t["x"]), ts)
    ts = {"x": _t(rng, (3, 5), "x")}
    out["relu"] = _case(rng, lambda t: relu(t["x"]), ts)
    ts = {"x": _t(rng, (3, 5), "x", 0.0, 2.0)}
    out["log1p"] = _case(rng, lambda t: log1p(t["x"]), ts)

    ts = {"rec": _t(rng, (2, 6, 8, 2), "rec", 0.0, 1.0), "tgt": _t(rng, (2, 6, 8, 2), "tgt", 0.0, 1.0)}
    out["loss_ae on [0,1]"] = (lambda t=ts: loss_ae(t["rec"], t["tgt"])), ts
    ts = {"pred": _t(rng, (4, 6), "pred"), "label": _t(rng, (4, 6), "label")}
    out["loss_em beta=20"] = (lambda t=ts: loss_em(t["pred"], t["label"], 20.0)), ts
    return out


def relu_margin(graph, x) -> float:
    """Smallest |pre-activation| over all ReLU layers of ``graph`` at input ``x``."""
    acts = {"input": Tensor(x)}
    prev, margin = "input", np.inf
    for spec in graph.specs:
        ins = [acts[n] for n in (spec.inputs or (prev,))]
        pre = L.apply_layer(replace(spec, activation=None), ins, graph.params, graph.ledger)
        if spec.activation == "relu":
            margin = min(margin, float(np.abs(pre.data).min()))
        acts[spec.name] = L.activate(pre, spec.activation)
        prev = spec.name
    return margin


def graph_case(seed: int) -> tuple[Callable[[], Tensor], dict]:
    """Whole LS-VO at a reduced 16x16 input with joint loss."""
    rng = np.random.default_rng(seed)
    g = build_lsvo((16, 16, 2), seed=seed, width=1 / 16)
    # zero biases put dead ReLU units exactly on the kink; move them off it
    for name, p in g.params.items():
        if name.endswith(".b"):
            p.data[...] = rng.uniform(0.05, 0.2, p.shape) * rng.choice([-1.0, 1.0], p.shape)
    # finite differences straddling a ReLU kink are meaningless; redraw until clear
    for _ in range(50):
        x = rng.uniform(0.0, 1.0, (2, 16, 16, 2))
        if relu_margin(g, x) > 1e-3:
            break
    y = rng.normal(size=(2, 6))

    def f():
        out = g(x)
        return loss_em(out["motion"], y) + loss_ae(out["reconstruction"], Tensor(x))

    return f, g.params


def run_suite(seeds: Iterable[int] = range(10), tol: float = TOL, include_graph: bool = True,
              max_entries: int = 48) -> list[GradCheckReport]:
    reports = []
    for seed in seeds:
        for label, (fn, params) in cases(seed).items():
            reports.append(grad_check(fn, params, seed=seed, tol=tol, max_entries=max_entries, label=f"{label} [seed {seed}]"))
        if include_graph:
            fn, params = graph_case(seed)
            reports.append(grad_check(fn, params, seed=seed, tol=tol, max_entries=16, label=f"lsvo graph 16x16 [seed {seed}]"))
    return reports
