"""Convolutional layer zoo (NHWC, batch first) and the declarative shape resolver.

Weights follow the ``(kh, kw, c_in, c_out)`` layout for convolutions and
``(n_in, n_out)`` for dense layers.  Every op returns a :class:`Tensor` wired
into the tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, concat, relu, reshape, sigmoid

Padding = str | tuple[int, int, int, int]

KINDS = ("conv", "upconv", "maxpool", "dense", "crop", "concat", "flatten", "activation")

# im2col buffers are built in batch chunks no larger than this many doubles
_IM2COL_BUDGET = 24_000_000


class ShapeResolutionError(ShapeError):
    """A layer's computed output shape disagrees with its declared one."""


# ---------------------------------------------------------------- size rules
def conv_output_size(n: int, k: int, s: int, padding: Padding, axis: int = 0) -> int:
    if padding == "same":
        return -(-n // s)
    if padding == "valid":
        return (n - k) // s + 1 if n >= k else 0
    p = padding[2 * axis] + padding[2 * axis + 1]
    return (n + p - k) // s + 1 if n + p >= k else 0


def same_pads(n: int, k: int, s: int) -> tuple[int, int]:
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return total // 2, total - total // 2


def explicit_pads(shape_hw: tuple[int, int], kernel, stride, padding: Padding) -> tuple[int, int, int, int]:
    if padding == "same":
        return (*same_pads(shape_hw[0], kernel[0], stride[0]), *same_pads(shape_hw[1], kernel[1], stride[1]))
    if padding == "valid":
        return (0, 0, 0, 0)
    return tuple(int(p) for p in padding)


def pool_output_size(n: int, k: int, s: int, rounding: str) -> int:
    if n < k:
        return 0
    if rounding == "floor":
        return (n - k) // s + 1
    out = -(-(n - k) // s) + 1
    # the last window has to start inside the input
    if (out - 1) * s >= n:
        out -= 1
    return out


# ----------------------------------------------------------------- functional
def _pad_hw(x: np.ndarray, pads: tuple[int, int, int, int], value: float = 0.0) -> np.ndarray:
    t, b, l, r = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (t, b), (l, r), (0, 0)), constant_values=value)


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Patches as ``(N, ho, wo, kh*kw*C)`` in (kh, kw, C) order, matching reshaped weights."""
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j] = xp[:, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw]
    return cols.reshape(n, ho, wo, kh * kw * c)


def _check_conv_args(x: Tensor, w: Tensor, b: Tensor | None, where: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{where}: expected NHWC input, got shape {x.shape}")
    if w.ndim != 4 or w.shape[2] != x.shape[3]:
        raise ShapeError(f"{where}: weights {w.shape} incompatible with input channels {x.shape[3]}")
    if b is not None and b.shape != (w.shape[3],):
        raise ShapeError(f"{where}: bias {b.shape} does not match {w.shape[3]} output channels")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride=(1, 1), padding: Padding = "same", name: str = "conv2d") -> Tensor:
    _check_conv_args(x, w, b, name)
    n, h, wd, c = x.shape
    kh, kw, _, co = w.shape
    sh, sw = stride
    pads = explicit_pads((h, wd), (kh, kw), (sh, sw), padding)
    ho = conv_output_size(h, kh, sh, pads, 0)
    wo = conv_output_size(wd, kw, sw, pads, 1)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"{name}: kernel {kh}x{kw} does not fit input {h}x{wd} with padding {pads}")
    xp = _pad_hw(x.data, pads)
    wm = w.data.reshape(kh * kw * c, co)
    per_sample = ho * wo * c * kh * kw
    chunk = max(1, _IM2COL_BUDGET // max(per_sample, 1))
    cached = None

    out = np.empty((n, ho, wo, co), dtype=DTYPE)
    for s in range(0, n, chunk):
        cols = _im2col(xp[s : s + chunk], kh, kw, sh, sw, ho, wo)
        out[s : s + chunk] = cols @ wm
        if chunk >= n:
            cached = cols
    if b is not None:
        out += b.data

    def backward(g):
        gw = np.zeros_like(wm) if w.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for s in range(0, n, chunk):
            gs = g[s : s + chunk]
            m = gs.shape[0] * ho * wo
            if gw is not None:
                cols = cached if cached is not None else _im2col(xp[s : s + chunk], kh, kw, sh, sw, ho, wo)
                gw += cols.reshape(m, -1).T @ gs.reshape(m, co)
            if gxp is not None:
                dcol = (gs.reshape(m, co) @ wm.T).reshape(gs.shape[0], ho, wo, kh, kw, c)
                dst = gxp[s : s + chunk]
                for i in range(kh):
                    for j in range(kw):
                        dst[:, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += dcol[:, :, :, i, j]
        gx = None
        if gxp is not None:
            t, _, l, _ = pads
            gx = gxp[:, t : t + h, l : l + wd]
        gwt = gw.reshape(kh, kw, c, co) if gw is not None else None
        if b is not None:
            return gx, gwt, g.sum(axis=(0, 1, 2))
        return gx, gwt

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._make(out, parents, backward, name)


def maxpool2d(x: Tensor, kernel=(2, 2), stride=(2, 2), rounding: str = "floor", name: str = "maxpool") -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected NHWC input, got shape {x.shape}")
    n, h, w, c = x.shape
    kh, kw = kernel
    sh, sw = stride
    ho = pool_output_size(h, kh, sh, rounding)
    wo = pool_output_size(w, kw, sw, rounding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"{name}: pool {kh}x{kw} does not fit input {h}x{w}")
    pb = max((ho - 1) * sh + kh - h, 0)
    pr = max((wo - 1) * sw + kw - w, 0)
    xp = _pad_hw(x.data, (0, pb, 0, pr), value=-np.inf)

    best = np.full((n, ho, wo, c), -np.inf)
    arg = np.zeros((n, ho, wo, c), dtype=np.int64)
    for i in range(kh):
        for j in range(kw):
            v = xp[:, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw]
            better = v > best
            best = np.where(better, v, best)
            arg = np.where(better, i * kw + j, arg)

    def backward(g):
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += g * (arg == i * kw + j)
        return (gxp[:, :h, :w],)

    return Tensor._make(best, (x,), backward, name)


def upsample_nearest(x: Tensor, factor=(2, 2), name: str = "upsample") -> Tensor:
    fh, fw = factor
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, fh, axis=1), fw, axis=2)

    def backward(g):
        return (g.reshape(n, h, fh, w, fw, c).sum(axis=(2, 4)),)

    return Tensor._make(out, (x,), backward, name)


def upconv(x: Tensor, w: Tensor, b: Tensor | None, factor=(2, 2), padding: Padding = "same", name: str = "upconv") -> Tensor:
    """Nearest-neighbour upsample by ``factor`` followed by a stride-1 convolution."""
    _check_conv_args(x, w, b, name)
    return conv2d(upsample_nearest(x, factor, name=f"{name}.up"), w, b, (1, 1), padding, name=name)


def dense(x: Tensor, w: Tensor, b: Tensor | None, name: str = "dense") -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"{name}: input {x.shape} incompatible with weights {w.shape}")
    out = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"{name}: bias {b.shape} does not match {w.shape[1]} outputs")
        out = out + b.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        return (gx, gw, g.sum(axis=0)) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._make(out, parents, backward, name)


def crop(x: Tensor, target_hw: tuple[int, int], name: str = "crop") -> Tensor:
    """Keep the top-left ``target_hw`` window: rows/columns go from the bottom/right edges."""
    th, tw = target_hw
    n, h, w, c = x.shape
    if th > h or tw > w:
        raise ShapeError(f"{name}: cannot crop {h}x{w} to larger {th}x{tw}")

    def backward(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        gx[:, :th, :tw] = g
        return (gx,)

    return Tensor._make(x.data[:, :th, :tw], (x,), backward, name)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1 if x.size else 0)) if x.ndim > 2 else x


def activate(x: Tensor, kind: str | None) -> Tensor:
    if kind is None or kind == "linear":
        return x
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ------------------------------------------------------------ declarative spec
@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    channels: int | None = None  # output channels / dense units
    padding: Padding = "same"
    rounding: str = "floor"
    factor: tuple[int, int] = (1, 1)
    declared: tuple[int, ...] | None = None  # per-sample output shape
    inputs: tuple[str, ...] = ()  # defaults to the previous layer
    activation: str | None = None
    crop_to: str | None = None  # crop target: name of a layer whose H, W to match
    reference: tuple[int, ...] | None = None  # published shape where it differs from `declared`
    branch: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"{self.name}: unknown layer kind {self.kind!r}")


@dataclass
class LedgerRow:
    name: str
    kind: str
    inputs: tuple[str, ...]
    output: tuple[int, ...]
    declared: tuple[int, ...] | None
    pads: tuple[int, int, int, int] | None = None
    reference: tuple[int, ...] | None = None

    @property
    def matches_reference(self) -> bool:
        ref = self.reference if self.reference is not None else self.declared
        return ref is None or tuple(ref) == tuple(self.output)


@dataclass
class ShapeLedger:
    input_shape: tuple[int, ...]
    rows: dict[str, LedgerRow] = field(default_factory=dict)

    def __getitem__(self, name: str) -> tuple[int, ...]:
        return self.rows[name].output

    def __contains__(self, name: str) -> bool:
        return name in self.rows

    def input_of(self, name: str) -> tuple[int, ...]:
        src = self.rows[name].inputs[0]
        return self.input_shape if src == "input" else self.rows[src].output

    def discrepancies(self) -> list[LedgerRow]:
        return [r for r in self.rows.values() if not r.matches_reference]

    def format(self) -> str:
        lines = [f"{'layer':<14} {'kind':<10} {'output':<18} reference"]
        for r in self.rows.values():
            ref = r.reference if r.reference is not None else r.declared
            flag = "" if r.matches_reference else "  <-- differs"
            lines.append(f"{r.name:<14} {r.kind:<10} {str(r.output):<18} {ref}{flag}")
        return "\n".join(lines)


def _padding_candidates(n_hw, k, s, target_hw) -> list[str]:
    found = []
    for pol in ("same", "valid"):
        if all(conv_output_size(n_hw[a], k[a], s[a], pol, a) == target_hw[a] for a in (0, 1)):
            found.append(pol)
    # explicit per-axis totals that reach the target
    totals = []
    for a in (0, 1):
        ok = [p for p in range(0, 2 * k[a] + 1) if conv_output_size(n_hw[a], k[a], s[a], (p, 0, p, 0), 0) == target_hw[a]]
        totals.append(ok)
    if totals[0] and totals[1]:
        found.append(f"explicit rows+{totals[0][0]} cols+{totals[1][0]}")
    return found


def resolve_shapes(specs: Sequence[LayerSpec], input_shape: Sequence[int]) -> ShapeLedger:
    """Propagate per-sample shapes through ``specs`` and check declarations.

    A mismatch raises :class:`ShapeResolutionError` listing padding policies
    that would produce the declared shape (or stating that none do).
    """
    ledger = ShapeLedger(tuple(input_shape))
    shapes: dict[str, tuple[int, ...]] = {"input": tuple(input_shape)}
    prev = "input"
    for spec in specs:
        srcs = spec.inputs or (prev,)
        for s in srcs:
            if s not in shapes:
                raise ShapeResolutionError(f"{spec.name}: refers to unknown or later layer {s!r}")
        ins = [shapes[s] for s in srcs]
        pads = None
        if spec.kind in ("conv", "upconv"):
            (h, w, _c), = ins
            if spec.kind == "upconv":
                h, w = h * spec.factor[0], w * spec.factor[1]
            pads = explicit_pads((h, w), spec.kernel, spec.stride, spec.padding)
            out = (
                conv_output_size(h, spec.kernel[0], spec.stride[0], pads, 0),
                conv_output_size(w, spec.kernel[1], spec.stride[1], pads, 1),
                spec.channels,
            )
        elif spec.kind == "maxpool":
            (h, w, c), = ins
            out = (
                pool_output_size(h, spec.kernel[0], spec.stride[0], spec.rounding),
                pool_output_size(w, spec.kernel[1], spec.stride[1], spec.rounding),
                c,
            )
        elif spec.kind == "dense":
            (n,), = ins
            out = (spec.channels,)
        elif spec.kind == "crop":
            (h, w, c), = ins
            th, tw = shapes[spec.crop_to][:2] if spec.crop_to else spec.declared[:2]
            if th > h or tw > w:
                raise ShapeResolutionError(f"{spec.name}: cannot crop {h}x{w} to {th}x{tw}")
            out = (th, tw, c)
        elif spec.kind == "concat":
            out = (sum(math.prod(s) for s in ins),)
        elif spec.kind == "flatten":
            out = (math.prod(ins[0]),)
        else:  # activation
            out = ins[0]
        out = tuple(int(v) for v in out)
        if min(out) <= 0:
            raise ShapeResolutionError(f"{spec.name}: input {ins} collapses to empty output {out}")
        if spec.declared is not None and tuple(spec.declared) != out:
            msg = f"{spec.name}: computed output {out} != declared {tuple(spec.declared)}"
            if spec.kind in ("conv", "upconv"):
                h, w = ins[0][:2]
                if spec.kind == "upconv":
                    h, w = h * spec.factor[0], w * spec.factor[1]
                cands = _padding_candidates((h, w), spec.kernel, spec.stride, spec.declared[:2])
                msg += f"; padding candidates reproducing it: {cands or 'none (infeasible)'}"
            elif spec.kind == "maxpool":
                cands = [
                    r for r in ("floor", "ceil")
                    if tuple(pool_output_size(ins[0][a], spec.kernel[a], spec.stride[a], r) for a in (0, 1)) == tuple(spec.declared[:2])
                ]
                msg += f"; rounding candidates: {cands or 'none (infeasible)'}"
            raise ShapeResolutionError(msg)
        shapes[spec.name] = out
        ledger.rows[spec.name] = LedgerRow(spec.name, spec.kind, tuple(srcs), out, spec.declared, pads, spec.reference)
        prev = spec.name
    return ledger


# ------------------------------------------------------------- parameters
def init_parameters(specs: Sequence[LayerSpec], ledger: ShapeLedger, seed: int) -> dict[str, Tensor]:
    """He-style fan-in uniform weights, zero biases, from one seeded stream."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for spec in specs:
        in_shape = ledger.input_of(spec.name)
        if spec.kind in ("conv", "upconv"):
            shape = (*spec.kernel, in_shape[-1], spec.channels)
            fan_in = spec.kernel[0] * spec.kernel[1] * in_shape[-1]
        elif spec.kind == "dense":
            fan_in = math.prod(in_shape)
            shape = (fan_in, spec.channels)
        else:
            continue
        limit = math.sqrt(6.0 / fan_in)
        # drawn values are snapped to float32 so a fresh model survives a checkpoint round-trip exactly
        w = rng.uniform(-limit, limit, size=shape).astype(np.float32).astype(np.float64)
        params[f"{spec.name}.w"] = Tensor(w, requires_grad=True, name=f"{spec.name}.w")
        params[f"{spec.name}.b"] = Tensor(np.zeros(spec.channels), requires_grad=True, name=f"{spec.name}.b")
    return params


def apply_layer(spec: LayerSpec, ins: Sequence[Tensor], params: Mapping[str, Tensor], ledger: ShapeLedger) -> Tensor:
    """Run one layer on batched inputs, checking the result against the ledger."""
    if spec.kind == "conv":
        out = conv2d(ins[0], params[f"{spec.name}.w"], params[f"{spec.name}.b"], spec.stride, spec.padding, name=spec.name)
    elif spec.kind == "upconv":
        out = upconv(ins[0], params[f"{spec.name}.w"], params[f"{spec.name}.b"], spec.factor, spec.padding, name=spec.name)
    elif spec.kind == "maxpool":
        out = maxpool2d(ins[0], spec.kernel, spec.stride, spec.rounding, name=spec.name)
    elif spec.kind == "dense":
        x = flatten(ins[0])
        out = dense(x, params[f"{spec.name}.w"], params[f"{spec.name}.b"], name=spec.name)
    elif spec.kind == "crop":
        out = crop(ins[0], ledger[spec.name][:2], name=spec.name)
    elif spec.kind == "concat":
        out = concat([flatten(t) for t in ins], axis=1)
    elif spec.kind == "flatten":
        out = flatten(ins[0])
    else:
        out = ins[0]
    out = activate(out, spec.activation)
    if out.shape[1:] != ledger[spec.name]:
        raise ShapeError(f"{spec.name}: produced {out.shape[1:]} but the ledger expects {ledger[spec.name]}")
    return out


def scaled(spec: LayerSpec, **changes) -> LayerSpec:
    return replace(spec, **changes)
