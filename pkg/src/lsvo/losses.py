"""Reconstruction (log-space squared error), ego-motion and joint objectives."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .tensor import ShapeError, Tensor, log1p, mean, mul, square, sub, tsum


@dataclass
class TrainConfig:
    beta: float = 20.0  # rotation weight in the ego-motion loss
    lam: float = 1.0  # weight of the reconstruction loss in the joint objective
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 150
    seed: int = 0
    patience: int = 15

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not self.lam >= 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ValueError("batch_size and patience must be >= 1, epochs >= 0")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def loss_ae(reconstruction, target) -> Tensor:
    """Mean over pixels (and batch) of ``||log(1 + u_hat) - log(1 + u)||^2``.

    The last axis holds the per-pixel vector; both inputs must be encoded
    flow in [0, 1].  A 0-d or 1-d input is treated as a single pixel.
    """
    rec, tgt = _as_tensor(reconstruction), _as_tensor(target)
    if rec.shape != tgt.shape:
        raise ShapeError(f"loss_ae: reconstruction {rec.shape} vs target {tgt.shape}")
    if np.any(rec.data < 0) or np.any(tgt.data < 0):
        raise ValueError("loss_ae: inputs must be non-negative encoded flow")
    diff = square(sub(log1p(rec), log1p(tgt)))
    if diff.ndim <= 1:
        return tsum(diff)
    return mean(tsum(diff, axis=-1))


def loss_em(pred, target, beta: float = 20.0) -> Tensor:
    """Batch mean of ``||tau_hat - tau||^2 + beta * ||theta_hat - theta||^2``.

    Motion vectors are laid out (tx, ty, tz, rx, ry, rz).
    """
    p, t = _as_tensor(pred), _as_tensor(target)
    if p.shape != t.shape or p.shape[-1] != 6:
        raise ShapeError(f"loss_em: prediction {p.shape} vs label {t.shape} (need (..., 6))")
    if p.ndim == 1:
        p, t = p.reshape(1, 6), t.reshape(1, 6)
    sq = square(sub(p, t))
    weights = Tensor(np.array([1.0, 1.0, 1.0, beta, beta, beta]))
    per_sample = tsum(mul(sq, _tile(weights, sq.shape[0])), axis=1)
    return mean(per_sample)


def _tile(w: Tensor, n: int) -> Tensor:
    return Tensor(np.broadcast_to(w.data, (n, w.shape[0])))


def loss_joint(outputs: dict, labels, config: TrainConfig, target=None) -> tuple[Tensor, Tensor, Tensor | None]:
    """Return ``(total, em, ae)`` with ``total = em + lam * ae``.

    ``target`` is the encoded input flow the reconstruction is scored against.
    """
    em = loss_em(outputs["motion"], labels, config.beta)
    rec = outputs.get("reconstruction")
    if config.lam == 0:
        ae = loss_ae(rec, target) if rec is not None and target is not None else None
        return em, em, ae
    if rec is None:
        raise ValueError("loss_joint: lam > 0 requires a reconstruction output")
    if target is None:
        raise ValueError("loss_joint: lam > 0 requires the reconstruction target")
    ae = loss_ae(rec, target)
    return em + mul(ae, config.lam), em, ae
