"""Supervision terms for training the redirector and their weighted sum.

All per-sample losses return a batch mean. Target-side images pass through
the frozen estimator and feature maps as constants.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import geometry as G
from . import tensor as T
from . import world as W

RECIPROCAL_FLOOR = 1e-3


@dataclass
class LossWeights:
    rec: float = 8.0
    perc: float = 8.0
    id: float = 5.0
    att: float = 1.0
    lab: float = 5.0
    emb: float = 2.0
    prob: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")


LOSS_FIELDS = ("rec", "perc", "att", "id", "lab", "emb", "prob")


@dataclass
class LossBreakdown:
    rec: float
    perc: float
    att: float
    id: float
    lab: float
    emb: float
    prob: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _check_same_shape(a: T.Tensor, b: T.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def loss_rec(pred, target) -> T.Tensor:
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    _check_same_shape(pred, target)
    return T.mean(T.distance_norm(T.sub(pred, target), axis=-1))


def loss_perc(world: W.WorldSpec, pred, target) -> T.Tensor:
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    _check_same_shape(pred, target)
    return T.mean(W.perceptual_distance(world, pred, target))


def _pairs(x: T.Tensor) -> T.Tensor:
    return T.reshape(x, x.shape[:-1] + (2, 2))


def loss_att(estimator, pred, target) -> T.Tensor:
    """Summed angular gap between estimator readings of both attributes."""
    est_pred = _pairs(W.estimate(estimator, pred))
    est_target = _pairs(W.estimate(estimator, T.as_tensor(target).detach()).detach())
    return T.mean(T.sum_(G.condition_angular_error(est_pred, est_target), axis=-1))


def loss_id(world: W.WorldSpec, pred, source) -> T.Tensor:
    """1 - cosine similarity of identity features."""
    a = W.identity_features(world, pred)
    b = W.identity_features(world, T.as_tensor(source).detach()).detach()
    return T.mean(T.sub(1.0, T.dot(a, b, axis=-1)))


def loss_label(pred_cond, ref_cond) -> T.Tensor:
    """Angular error between (…, 2, 2) condition pairs, summed over attributes."""
    return T.mean(T.sum_(G.condition_angular_error(pred_cond, ref_cond), axis=-1))


def loss_embed(z_n) -> T.Tensor:
    """Mean angle between the first sample's normalized embedding and the rest.

    ``z_n`` has shape (B, A, 3, 16); the result is summed over attributes A.
    """
    z_n = T.as_tensor(z_n)
    bsz = z_n.shape[0]
    if bsz < 2:
        raise ValueError("embedding loss needs a batch of at least 2")
    flat = T.reshape(z_n, (bsz, z_n.shape[1], -1))
    ang = T.angular_distance(flat[0:1], flat[1:], axis=-1)  # (B-1, A)
    return T.sum_(T.mean(ang, axis=0))


def layer_errors(labels, pseudo) -> np.ndarray:
    """Batch-mean angular error of each layer's estimate, shape (A, K).

    ``labels`` is (K, B, A, 2), ``pseudo`` is (B, A, 2).
    """
    labels = np.asarray(labels, dtype=np.float64)
    err = G.np_condition_angular_error(labels, np.asarray(pseudo, dtype=np.float64)[None])
    return err.mean(axis=1).T


def loss_layerweights(weights, errors) -> T.Tensor:
    """Angle between each attribute's layer weights and its reciprocal layer errors.

    ``errors`` are constants, clamped below at 1e-3 before the reciprocal.
    """
    recip = 1.0 / np.maximum(np.asarray(errors, dtype=np.float64), RECIPROCAL_FLOOR)
    weights = T.as_tensor(weights)
    recip = recip.astype(weights.data.dtype)
    return T.sum_(T.angular_distance(weights, recip, axis=-1))


def loss_total(terms: dict[str, T.Tensor], weights: LossWeights, mode: str = "layerwise"):
    """Weighted sum of the terms present in ``terms``.

    The perceptual and layer-weight terms only count in layerwise mode.
    Returns the differentiable total and a float breakdown.
    """
    total = None
    values = {}
    for name in LOSS_FIELDS:
        term = terms.get(name)
        if term is None:
            values[name] = 0.0
            continue
        values[name] = float(term.data)
        lam = getattr(weights, name)
        if mode == "flat" and name in ("perc", "prob"):
            lam = 0.0
        if lam == 0.0:
            continue
        part = T.scale(term, lam)
        total = part if total is None else T.add(total, part)
    if total is None:
        total = T.Tensor(np.float32(0.0))
    return total, LossBreakdown(total=float(total.data), **values)
