"""LS-VO and ST-VO network builders, forward/predict, and the checkpoint container."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .layers import LayerSpec, ShapeLedger, ShapeResolutionError, apply_layer, init_parameters, resolve_shapes
from .tensor import ShapeError, Tensor

REFERENCE_INPUT = (94, 300, 2)

# published ST-VO concat width; our default ceil-pool reading yields 30544
STVO_PUBLISHED_CONCAT = 27408


def _w(c: int, width: float) -> int:
    return max(1, int(round(c * width)))


def lsvo_specs(input_shape=REFERENCE_INPUT, width: float = 1.0, latent: bool = True) -> list[LayerSpec]:
    """Layer table for the two-branch network.

    Declared shapes are attached only at the reference input and full width,
    where they must equal the published table.
    """
    ref = tuple(input_shape) == REFERENCE_INPUT and width == 1.0
    d = (lambda s: s) if ref else (lambda s: None)
    c = _w(64, width)
    hidden = _w(1000, width)
    specs = [
        LayerSpec("conv1", "conv", (7, 7), (2, 2), c, "same", declared=d((47, 150, 64)), activation="relu", branch="shared"),
        LayerSpec("conv2", "conv", (5, 5), (1, 1), c, "same", declared=d((47, 150, 64)), activation="relu", branch="shared"),
        LayerSpec("conv3", "conv", (3, 3), (4, 4), c, "same", declared=d((12, 38, 64)), activation="relu", branch="shared"),
    ]
    if latent:
        specs += [
            LayerSpec("conv4", "conv", (3, 3), (1, 1), c, "same", declared=d((12, 38, 64)), activation="relu", branch="encoder"),
            LayerSpec("upconv1", "upconv", (3, 3), (1, 1), 6, "same", factor=(4, 4), declared=d((48, 152, 6)),
                      inputs=("conv4",), activation="relu", branch="decoder"),
            LayerSpec("crop", "crop", crop_to="conv1", declared=d((47, 150, 6)), branch="decoder"),
            LayerSpec("upconv2", "upconv", (1, 1), (1, 1), int(input_shape[2]), "same", factor=(2, 2),
                      declared=d((94, 300, 2)), activation="sigmoid", branch="decoder"),
            LayerSpec("maxpool", "maxpool", (2, 2), (2, 2), inputs=("conv4",), declared=d((6, 19, 64)), branch="estimator"),
            LayerSpec("concat", "concat", inputs=("conv3", "maxpool"), declared=d((36480,)), branch="estimator"),
        ]
    else:
        specs.append(LayerSpec("concat", "concat", inputs=("conv3",), branch="estimator"))
    specs += [
        LayerSpec("dense1", "dense", channels=hidden, declared=d((1000,)), activation="relu", branch="estimator"),
        LayerSpec("dense2", "dense", channels=hidden, declared=d((1000,)), activation="relu", branch="estimator"),
        LayerSpec("dense3", "dense", channels=6, declared=d((6,)), branch="estimator"),
    ]
    return specs


def stvo_specs(input_shape=REFERENCE_INPUT, width: float = 1.0, variant: str = "ceil") -> list[LayerSpec]:
    """Layer table for the single-task baseline.

    The published strides and output sizes of this branch disagree, so two
    readings are offered.  ``"ceil"`` (default) pools st-maxpool1 with ceiling
    rounding to (12, 38) and runs st-conv2 4x4 at stride 1, valid; the concat
    is then 30544 wide.  ``"padded"`` keeps floor pooling (11, 37) and gives
    st-conv2 one row/column of top-left padding at stride 1, which matches
    every published row including the 27408 concat.
    """
    if variant not in ("ceil", "padded"):
        raise ValueError(f"unknown ST-VO variant {variant!r}")
    ref = tuple(input_shape) == REFERENCE_INPUT and width == 1.0
    d = (lambda s: s) if ref else (lambda s: None)
    c1, c2 = _w(64, width), _w(20, width)
    hidden = _w(1000, width)
    if variant == "ceil":
        pool1 = LayerSpec("st-maxpool1", "maxpool", (4, 4), (4, 4), rounding="ceil", declared=d((12, 38, 64)),
                          reference=d((11, 37, 64)), branch="features")
        conv2 = LayerSpec("st-conv2", "conv", (4, 4), (1, 1), c2, "valid", declared=d((9, 35, 20)), activation="relu",
                          branch="features")
        concat = LayerSpec("concat", "concat", inputs=("st-maxpool1", "st-maxpool2"), declared=d((30544,)),
                           reference=d((STVO_PUBLISHED_CONCAT,)), branch="estimator")
    else:
        pool1 = LayerSpec("st-maxpool1", "maxpool", (4, 4), (4, 4), rounding="floor", declared=d((11, 37, 64)),
                          branch="features")
        conv2 = LayerSpec("st-conv2", "conv", (4, 4), (1, 1), c2, (1, 0, 1, 0), declared=d((9, 35, 20)),
                          activation="relu", branch="features")
        concat = LayerSpec("concat", "concat", inputs=("st-maxpool1", "st-maxpool2"),
                           declared=d((STVO_PUBLISHED_CONCAT,)), branch="estimator")
    return [
        LayerSpec("st-conv1", "conv", (3, 3), (2, 2), c1, "valid", declared=d((46, 149, 64)), activation="relu",
                  branch="features"),
        pool1,
        conv2,
        LayerSpec("st-maxpool2", "maxpool", (2, 2), (2, 2), declared=d((4, 17, 20)), branch="features"),
        concat,
        LayerSpec("st-dense1", "dense", channels=hidden, declared=d((1000,)), activation="relu", branch="estimator"),
        LayerSpec("st-dense2", "dense", channels=6, declared=d((6,)), branch="estimator"),
    ]


@dataclass
class ModelGraph:
    kind: str  # "lsvo" | "stvo"
    input_shape: tuple[int, int, int]
    specs: list[LayerSpec]
    ledger: ShapeLedger
    params: dict[str, Tensor]
    outputs: dict[str, str]
    config: dict = field(default_factory=dict)

    # ------------------------------------------------------------------ run
    def forward(self, x) -> dict[str, Tensor]:
        """Evaluate every layer on an ``(N, H, W, C)`` batch; returns all activations by name."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"input: expected (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        acts: dict[str, Tensor] = {"input": x}
        prev = "input"
        for spec in self.specs:
            ins = [acts[s] for s in (spec.inputs or (prev,))]
            acts[spec.name] = apply_layer(spec, ins, self.params, self.ledger)
            prev = spec.name
        return acts

    def __call__(self, x) -> dict[str, Tensor]:
        acts = self.forward(x)
        return {k: acts[v] for k, v in self.outputs.items()}

    def predict(self, flows: np.ndarray, batch_size: int = 64) -> dict[str, np.ndarray]:
        flows = np.asarray(flows, dtype=np.float64)
        if flows.ndim == 3:
            flows = flows[None]
        if flows.size and (flows.min() < 0.0 or flows.max() > 1.0 or not np.all(np.isfinite(flows))):
            raise ValueError("predict expects encoded flow in [0, 1]; encode raw flow first")
        parts: dict[str, list[np.ndarray]] = {}
        for s in range(0, len(flows), batch_size):
            out = self(flows[s : s + batch_size])
            for k, t in out.items():
                parts.setdefault(k, []).append(t.data)
        return {k: np.concatenate(v) for k, v in parts.items()}

    # -------------------------------------------------------------- params
    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def branch_of(self, param_name: str) -> str:
        layer = param_name.rsplit(".", 1)[0]
        for spec in self.specs:
            if spec.name == layer:
                return spec.branch
        raise KeyError(param_name)

    def parameter_count(self, branch: str | None = None) -> int:
        return sum(
            p.size for n, p in self.params.items() if branch is None or self.branch_of(n) == branch
        )

    def layer_params(self, layer: str) -> list[Tensor]:
        return [p for n, p in self.params.items() if n.rsplit(".", 1)[0] == layer]

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")
        for n, p in self.params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{n}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr

    def clone(self) -> "ModelGraph":
        params = {n: Tensor(p.data, requires_grad=True, name=n) for n, p in self.params.items()}
        return replace(self, params=params, config=dict(self.config))

    def without_latent(self) -> "ModelGraph":
        """LS-VO stripped of conv4, the decoder and the latent half of the concat."""
        if self.kind != "lsvo":
            raise ValueError("only LS-VO graphs carry a latent branch")
        width = self.config.get("width", 1.0)
        specs = lsvo_specs(self.input_shape, width, latent=False)
        ledger = resolve_shapes(specs, self.input_shape)
        keep = ledger["concat"][0]
        params = {}
        for n, p in self.params.items():
            layer = n.rsplit(".", 1)[0]
            if layer in ledger.rows:
                data = p.data[:keep] if n == "dense1.w" else p.data
                params[n] = Tensor(data, requires_grad=True, name=n)
        return ModelGraph("lsvo", self.input_shape, specs, ledger, params, {"motion": "dense3"}, dict(self.config))


def _check_input(input_shape) -> tuple[int, int, int]:
    shape = tuple(int(v) for v in input_shape)
    if len(shape) != 3 or shape[0] < 16 or shape[1] < 16 or shape[2] < 1:
        raise ShapeResolutionError(f"input shape {shape} must be (H, W, C) with H, W >= 16")
    return shape


def build_lsvo(input_shape=REFERENCE_INPUT, seed: int = 0, width: float = 1.0) -> ModelGraph:
    shape = _check_input(input_shape)
    specs = lsvo_specs(shape, width)
    ledger = resolve_shapes(specs, shape)
    if ledger["upconv2"] != shape:
        raise ShapeResolutionError(
            f"reconstruction {ledger['upconv2']} cannot match input {shape}; the decoder needs even H and W"
        )
    params = init_parameters(specs, ledger, seed)
    return ModelGraph(
        "lsvo", shape, specs, ledger, params,
        {"motion": "dense3", "reconstruction": "upconv2"},
        {"seed": seed, "width": width},
    )


def build_stvo(input_shape=REFERENCE_INPUT, seed: int = 0, width: float = 1.0, variant: str = "ceil") -> ModelGraph:
    shape = _check_input(input_shape)
    specs = stvo_specs(shape, width, variant)
    ledger = resolve_shapes(specs, shape)
    params = init_parameters(specs, ledger, seed)
    return ModelGraph("stvo", shape, specs, ledger, params, {"motion": "st-dense2"},
                      {"seed": seed, "width": width, "variant": variant})


def build_model(kind: str, input_shape=REFERENCE_INPUT, seed: int = 0, width: float = 1.0, **kw) -> ModelGraph:
    if kind == "lsvo":
        return build_lsvo(input_shape, seed, width)
    if kind == "stvo":
        return build_stvo(input_shape, seed, width, **kw)
    raise ValueError(f"unknown model kind {kind!r}")


def latent_code(graph: ModelGraph, flows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flattened conv4 activation and its 2x2-pooled form, per sample."""
    if graph.kind != "lsvo":
        raise ValueError("latent codes exist only for LS-VO")
    acts = graph.forward(np.asarray(flows, dtype=np.float64))
    n = acts["conv4"].shape[0]
    return acts["conv4"].data.reshape(n, -1), acts["maxpool"].data.reshape(n, -1)


# ---------------------------------------------------------------- checkpoints
MAGIC = b"LSVO"
VERSION = 1
_KIND_CODES = {"lsvo": 0, "stvo": 1}
_VARIANT_CODES = {"ceil": 0, "padded": 1}


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named arrays as float32 records behind the ``LSVO`` header."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<H", VERSION)
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"record {name!r} cannot be encoded")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r} at byte 0")
    if len(data) < 6:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 6
    out: dict[str, np.ndarray] = {}
    while pos < len(data):
        start = pos
        try:
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt record header at byte {start}") from exc
        count = math.prod(shape)
        end = pos + 4 * count
        if end > len(data):
            raise CheckpointError(f"{path}: record {name!r} truncated at byte {len(data)} (needs {end})")
        out[name] = np.frombuffer(data[pos:end], dtype="<f4").astype(np.float64).reshape(shape)
        pos = end
    return out


def save_checkpoint(path, graph: ModelGraph, extra: Mapping[str, np.ndarray] | None = None) -> None:
    records: dict[str, np.ndarray] = {
        "meta.kind": np.array([_KIND_CODES[graph.kind]]),
        "meta.input_shape": np.array(graph.input_shape),
        "meta.width": np.array([graph.config.get("width", 1.0)]),
        "meta.seed": np.array([graph.config.get("seed", 0)]),
    }
    if graph.kind == "stvo":
        records["meta.variant"] = np.array([_VARIANT_CODES[graph.config.get("variant", "ceil")]])
    records.update({f"param.{n}": p.data for n, p in graph.params.items()})
    if extra:
        records.update(extra)
    write_tensors(path, records)


def load_checkpoint(path) -> tuple[ModelGraph, dict[str, np.ndarray]]:
    """Rebuild the graph stored at ``path``; returns it plus any non-parameter records."""
    rec = read_tensors(path)
    try:
        kind = {v: k for k, v in _KIND_CODES.items()}[int(rec["meta.kind"][0])]
        shape = tuple(int(v) for v in rec["meta.input_shape"])
        width = float(np.float32(rec["meta.width"][0]))
        seed = int(rec["meta.seed"][0])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing metadata record {exc}") from exc
    # float32 storage of the width multiplier; snap back to the common values
    width = round(width, 6)
    kw = {}
    if kind == "stvo":
        kw["variant"] = {v: k for k, v in _VARIANT_CODES.items()}[int(rec.get("meta.variant", [0])[0])]
    graph = build_model(kind, shape, seed, width, **kw)
    graph.load_state({n[len("param."):]: a for n, a in rec.items() if n.startswith("param.")})
    extra = {n: a for n, a in rec.items() if not n.startswith(("param.", "meta."))}
    return graph, extra


def describe(graph: ModelGraph) -> str:
    lines = [f"{graph.kind.upper()} input {graph.input_shape}, {graph.parameter_count():,} parameters"]
    lines.append(graph.ledger.format())
    return "\n".join(lines)


__all__: Sequence[str] = [
    "ModelGraph", "build_lsvo", "build_stvo", "build_model", "lsvo_specs", "stvo_specs", "latent_code",
    "save_checkpoint", "load_checkpoint", "write_tensors", "read_tensors", "CheckpointError", "describe",
]
