"""Linear flow subspace: mean plus an orthonormal basis fitted by SVD."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .flowio import FlowEncoding, encode_flow
from .models import read_tensors, write_tensors


@dataclass(frozen=True)
class SubspaceModel:
    mean: np.ndarray  # (D,)
    basis: np.ndarray  # (D, l), orthonormal columns
    singular_values: np.ndarray  # (l,)
    shape: tuple[int, ...]  # per-field shape, e.g. (H, W, 2)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]


def _flatten(fields, shape=None) -> np.ndarray:
    arr = np.asarray(fields, dtype=np.float64)
    if shape is not None and arr.shape[-len(shape):] != tuple(shape):
        raise ValueError(f"field shape {arr.shape[-len(shape):]} does not match model shape {tuple(shape)}")
    return arr.reshape(arr.shape[0], -1) if shape is None else arr.reshape(-1, int(np.prod(shape)))


def fit(fields: Sequence[np.ndarray], l: int) -> SubspaceModel:
    """Top-``l`` principal directions of the centred, flattened fields.

    Each basis vector is signed so that its largest-magnitude entry is positive.
    """
    arr = np.asarray(fields, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[0] == 0:
        raise ValueError("need at least one field to fit a subspace")
    shape = arr.shape[1:]
    X = arr.reshape(arr.shape[0], -1)
    n, d = X.shape
    if l < 1 or l > min(n, d):
        raise ValueError(f"latent dimension must be in [1, {min(n, d)}], got {l}")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    if s.size == 0 or s[0] <= np.finfo(float).eps * max(1.0, np.abs(X).max()) * max(n, d):
        raise ValueError("degenerate data: the fields have (numerically) zero variance")
    W = Vt[:l].T.copy()
    idx = np.argmax(np.abs(W), axis=0)
    signs = np.sign(W[idx, np.arange(l)])
    signs[signs == 0] = 1.0
    W *= signs
    return SubspaceModel(mean, W, s[:l].copy(), tuple(shape))


def project(model: SubspaceModel, field: np.ndarray) -> np.ndarray:
    """Latent coordinates; accepts a single field or a batch."""
    field = np.asarray(field, dtype=np.float64)
    single = field.shape == model.shape
    X = _flatten(field[None] if single else field, model.shape)
    z = (X - model.mean) @ model.basis
    return z[0] if single else z


def reconstruct(model: SubspaceModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.dim:
        raise ValueError(f"latent vector length {z.shape[-1]} != model dimension {model.dim}")
    X = z @ model.basis.T + model.mean
    return X.reshape(*z.shape[:-1], *model.shape)


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def rmsle(recon_encoded: np.ndarray, target_encoded: np.ndarray) -> float:
    """Per-pixel squared log error, averaged; same reduction as the AE loss."""
    d = np.log1p(recon_encoded) - np.log1p(target_encoded)
    return float(np.mean(np.sum(d * d, axis=-1)))


@dataclass
class ComparisonRow:
    index: int
    pca: float
    ae: float


def compare_subspaces(model: SubspaceModel, graph, fields: np.ndarray, enc: FlowEncoding = FlowEncoding(),
                      batch_size: int = 32) -> tuple[list[ComparisonRow], dict[str, float]]:
    """Score PCA and auto-encoder reconstructions of raw ``fields`` on encoded flow."""
    fields = np.asarray(fields, dtype=np.float64)
    target = encode_flow(fields, enc)
    pca_rec = encode_flow(reconstruct(model, project(model, fields)), enc) if len(fields) else target
    ae_rec = graph.predict(target, batch_size)["reconstruction"] if len(fields) else target
    rows = [ComparisonRow(i, rmsle(pca_rec[i], target[i]), rmsle(ae_rec[i], target[i])) for i in range(len(fields))]
    summary = {
        "pca_mean": float(np.mean([r.pca for r in rows])) if rows else float("nan"),
        "ae_mean": float(np.mean([r.ae for r in rows])) if rows else float("nan"),
        "count": float(len(rows)),
    }
    return rows, summary


def save_model(model: SubspaceModel, path) -> None:
    write_tensors(path, {
        "pca.mean": model.mean.reshape(model.shape),
        "pca.basis": model.basis,
        "pca.singvals": model.singular_values,
    })


def load_model(path) -> SubspaceModel:
    rec = read_tensors(path)
    mean = rec["pca.mean"]
    return SubspaceModel(mean.reshape(-1), rec["pca.basis"], rec["pca.singvals"], tuple(mean.shape))
