"""Latent-to-latent redirection.

Each latent layer gets its own projector and deprojector. The projector
reads a layer and produces pseudo conditions plus one 3x16 embedding per
attribute. Embeddings are rotated back to the canonical state by the
estimated condition and forward to the target condition, then both the
source and the redirected embeddings go through the same deprojector; the
edit is the difference of the two residuals.

Parameters for all layers are stored stacked along a leading layer axis so
one batched matmul serves every layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import geometry as G
from . import rng
from . import tensor as T
from .world import EMB_COLS, EMB_ROWS, EMB_SIZE

HALF_PI = 0.5 * np.pi
N_ATTR = 2

# (branch, n_in, n_out) in terms of the per-layer input dim D and hidden sizes
_LAYERS = ("P/lab/fc0", "P/lab/fc1", "P/emb/fc0", "P/emb/fc1", "DP/fc0", "DP/fc1")


@dataclass
class RedirectorParams:
    mode: str  # "flat" | "layerwise"
    K: int
    D: int
    tensors: dict[str, T.Tensor]

    @property
    def layer_weights(self) -> T.Tensor | None:
        return self.tensors.get("weights")

    def trainable(self) -> dict[str, T.Tensor]:
        return self.tensors

    def to_checkpoint(self) -> dict[str, np.ndarray]:
        out = {}
        for k in range(self.K):
            for name in _LAYERS:
                for suffix in ("w", "b"):
                    out[f"layer{k}/{name}/{suffix}"] = self.tensors[f"{name}/{suffix}"].data[k]
        if self.mode == "layerwise":
            for i in range(N_ATTR):
                out[f"weights/attr{i}"] = self.tensors["weights"].data[i]
        return out

    @classmethod
    def from_checkpoint(cls, arrays: dict[str, np.ndarray]) -> "RedirectorParams":
        K = 0
        while f"layer{K}/P/lab/fc0/w" in arrays:
            K += 1
        if K == 0:
            raise ValueError("checkpoint holds no redirector layers")
        mode = "layerwise" if "weights/attr0" in arrays else "flat"
        tensors = {}
        for name in _LAYERS:
            for suffix in ("w", "b"):
                stacked = np.stack([arrays[f"layer{k}/{name}/{suffix}"] for k in range(K)])
                tensors[f"{name}/{suffix}"] = T.Tensor(stacked.astype(np.float32), requires_grad=True)
        if mode == "layerwise":
            w = np.stack([arrays[f"weights/attr{i}"] for i in range(N_ATTR)])
            tensors["weights"] = T.Tensor(w.astype(np.float32), requires_grad=True)
        D = tensors["P/lab/fc0/w"].shape[1]
        return cls(mode, K, D, tensors)

    def copy(self) -> "RedirectorParams":
        return RedirectorParams(self.mode, self.K, self.D,
                                {k: T.Tensor(v.data.copy(), requires_grad=v.requires_grad)
                                 for k, v in self.tensors.items()})


def hidden_sizes(D: int) -> dict[str, int]:
    return {"lab": D // 2, "emb": D, "dp": 2 * D}


def init_redirector(mode: str, K: int, D: int, seed: int, emb_out_scale: float = 0.1) -> RedirectorParams:
    """Kaiming-style hidden layers, zero deprojector output layer.

    With the deprojector's last layer at zero every residual is the same
    constant, so the initial edit is exactly the identity. The embedding
    output layer is small but nonzero; zeroing it too would leave the
    whole edit path with vanishing gradients.
    """
    if mode not in ("flat", "layerwise"):
        raise ValueError(f"unknown redirector mode {mode!r}")
    if mode == "flat":
        D, K = K * D, 1
    h = hidden_sizes(D)
    shapes = {
        "P/lab/fc0": (D, h["lab"]), "P/lab/fc1": (h["lab"], 4),
        "P/emb/fc0": (D, h["emb"]), "P/emb/fc1": (h["emb"], 2 * EMB_SIZE),
        "DP/fc0": (2 * EMB_SIZE, h["dp"]), "DP/fc1": (h["dp"], D),
    }
    g = rng.stream(seed, f"redirector-{mode}")
    tensors = {}
    for name in _LAYERS:
        n_in, n_out = shapes[name]
        if name in ("P/lab/fc1", "DP/fc1"):
            w = np.zeros((K, n_in, n_out))
        else:
            w = g.standard_normal((K, n_in, n_out)) * np.sqrt(2.0 / n_in)
            if name == "P/emb/fc1":
                w *= emb_out_scale
        tensors[f"{name}/w"] = T.Tensor(w.astype(np.float32), requires_grad=True)
        tensors[f"{name}/b"] = T.Tensor(np.zeros((K, 1, n_out), np.float32), requires_grad=True)
    if mode == "layerwise":
        tensors["weights"] = T.Tensor(np.full((N_ATTR, K), 1.0 / K, np.float32), requires_grad=True)
    return RedirectorParams(mode, K, D, tensors)


def _dense(params: RedirectorParams, name: str, x: T.Tensor) -> T.Tensor:
    return T.linear(x, params.tensors[f"{name}/w"], params.tensors[f"{name}/b"])


class Projection(NamedTuple):
    labels: T.Tensor  # (K, B, 2, 2): attribute x (pitch, yaw)
    emb: T.Tensor  # (K, B, 2, 3, 16)


def layer_inputs(params: RedirectorParams, latent) -> T.Tensor:
    """(B, K, D) latents -> (K_r, B, D_r) per-redirector inputs."""
    latent = T.as_tensor(latent)
    bsz = latent.shape[0]
    if params.mode == "flat":
        return T.reshape(latent, (1, bsz, params.D))
    if latent.shape[1:] != (params.K, params.D):
        raise ValueError(f"latent shape {latent.shape[1:]} does not match redirector ({params.K}, {params.D})")
    return T.swapaxes(latent, 0, 1)


def project(params: RedirectorParams, x) -> Projection:
    """Per-layer inputs (K, B, D) -> bounded pseudo conditions and embeddings."""
    x = T.as_tensor(x)
    if x.shape[-1] != params.D:
        raise ValueError(f"projector expects inputs of size {params.D}, got {x.shape[-1]}")
    lab = T.leaky_relu(_dense(params, "P/lab/fc0", x))
    lab = T.scale(T.tanh(_dense(params, "P/lab/fc1", lab)), HALF_PI)
    emb = T.leaky_relu(_dense(params, "P/emb/fc0", x))
    emb = _dense(params, "P/emb/fc1", emb)
    lead = x.shape[:-1]
    return Projection(T.reshape(lab, lead + (N_ATTR, 2)), T.reshape(emb, lead + (N_ATTR, EMB_ROWS, EMB_COLS)))


def normalize_embedding(z, cond) -> T.Tensor:
    """Rotate embeddings (..., 3, 16) back to the canonical state: R(c)^T z."""
    return T.rotate(G.inverse_rotation(G.rotation_from_condition(cond)), z)


def redirect_embedding(z_n, cond) -> T.Tensor:
    """Impose a condition on canonical embeddings: R(c) z."""
    return T.rotate(G.rotation_from_condition(cond), z_n)


def deproject(params: RedirectorParams, emb) -> T.Tensor:
    """Embedding pairs (K, B, 2, 3, 16) -> latent residuals (K, B, D)."""
    emb = T.as_tensor(emb)
    flat = T.reshape(emb, emb.shape[:-3] + (N_ATTR * EMB_SIZE,))
    h = T.leaky_relu(_dense(params, "DP/fc0", flat))
    return _dense(params, "DP/fc1", h)


class Edit(NamedTuple):
    latent: T.Tensor  # edited latent, same shape as the input
    labels: T.Tensor  # (K, B, 2, 2) pseudo conditions per layer
    normalized: T.Tensor  # (K, B, 2, 3, 16)
    residuals: list  # per attribute (K, B, D) residual difference, None when unmasked


def _target_condition(c_t, n_layers: int) -> T.Tensor:
    """Broadcast (B, 2, 2) target conditions over the layer axis; (K, B, 2, 2) passes through."""
    c_t = T.as_tensor(c_t)
    if c_t.ndim == 4:
        if c_t.shape[0] != n_layers:
            raise ValueError(f"per-layer targets have {c_t.shape[0]} layers, redirector has {n_layers}")
        return c_t
    return T.reshape(c_t, (1,) + c_t.shape)


def edit(params: RedirectorParams, latent, c_t, mask=(True, True)) -> Edit:
    """Redirect a batch of latents (B, K, D) to target conditions (B, 2, 2).

    Targets may also be given per layer as (K, B, 2, 2), e.g. each layer's
    own pseudo conditions for a no-op edit.

    Masked-out attributes keep their source embedding in the target path,
    so their residual difference is exactly zero.
    """
    latent = T.as_tensor(latent)
    x = layer_inputs(params, latent)
    proj = project(params, x)
    z_n = normalize_embedding(proj.emb, proj.labels)
    target = _target_condition(c_t, params.K)
    z_t = redirect_embedding(z_n, target)
    src_res = deproject(params, proj.emb)

    if params.mode == "flat":
        if not any(mask):
            return Edit(latent, proj.labels, z_n, [None, None])
        parts = [z_t[:, :, i:i + 1] if mask[i] else proj.emb[:, :, i:i + 1] for i in range(N_ATTR)]
        delta = T.sub(deproject(params, T.concat(parts, axis=2)), src_res)
        out = T.add(latent, T.reshape(delta, latent.shape))
        return Edit(out, proj.labels, z_n, [delta if m else None for m in mask])

    residuals = []
    total = None
    weights = params.layer_weights
    for i in range(N_ATTR):
        if not mask[i]:
            residuals.append(None)
            continue
        parts = [z_t[:, :, j:j + 1] if j == i else proj.emb[:, :, j:j + 1] for j in range(N_ATTR)]
        delta = T.sub(deproject(params, T.concat(parts, axis=2)), src_res)
        residuals.append(delta)
        scaled = T.mul(delta, T.reshape(weights[i], (params.K, 1, 1)))
        total = scaled if total is None else T.add(total, scaled)
    if total is None:
        return Edit(latent, proj.labels, z_n, residuals)
    out = T.add(latent, T.swapaxes(total, 0, 1))
    return Edit(out, proj.labels, z_n, residuals)


def np_edit(params: RedirectorParams, latent: np.ndarray, c_t: np.ndarray, mask=(True, True),
            batch: int = 512) -> np.ndarray:
    """Inference-only edit over a large batch; returns edited latents."""
    latent = np.asarray(latent, dtype=np.float32)
    c_t = np.asarray(c_t, dtype=np.float32).reshape(len(latent), N_ATTR, 2)
    outs = [edit(params, latent[i:i + batch], c_t[i:i + batch], mask).latent.data
            for i in range(0, len(latent), batch)]
    return np.concatenate(outs, axis=0)


def np_project_labels(params: RedirectorParams, latent: np.ndarray) -> np.ndarray:
    """Per-layer pseudo conditions, shape (K, B, 2, 2)."""
    x = layer_inputs(params, np.asarray(latent, dtype=np.float32))
    return project(params, x).labels.data


def edit_layer(params: RedirectorParams, f_layer, c_t, mask=(True, True)):
    """Flat edit of a single layer vector: returns (edited, c_gaze, c_head, zN_gaze, zN_head)."""
    if params.mode != "flat":
        raise ValueError("edit_layer needs a flat-mode redirector")
    f = T.as_tensor(f_layer)
    res = edit(params, T.reshape(f, (1,) + f.shape), np.asarray(c_t, np.float32).reshape(1, N_ATTR, 2), mask)
    return (T.reshape(res.latent, f.shape), res.labels[0, 0, 0], res.labels[0, 0, 1],
            res.normalized[0, 0, 0], res.normalized[0, 0, 1])


def edit_latent_layerwise(params: RedirectorParams, f, c_t, mask=(True, True)) -> T.Tensor:
    if params.mode != "layerwise":
        raise ValueError("edit_latent_layerwise needs a layerwise-mode redirector")
    f = T.as_tensor(f)
    single = f.ndim == 2
    if single:
        f = T.reshape(f, (1,) + f.shape)
        c_t = np.asarray(c_t, np.float32).reshape(1, N_ATTR, 2)
    out = edit(params, f, c_t, mask).latent
    return T.reshape(out, out.shape[1:]) if single else out


def self_conditions(params: RedirectorParams, latent: np.ndarray) -> np.ndarray:
    """The redirector's own estimate of each latent's conditions, (B, 2, 2).

    Layerwise models combine per-layer estimates with the normalised
    absolute layer weights of each attribute.
    """
    labels = np_project_labels(params, latent)
    if params.mode == "flat":
        return labels[0]
    w = np.abs(params.layer_weights.data)
    w = w / w.sum(axis=1, keepdims=True)
    return np.einsum("ik,kbip->bip", w, labels)


# baseline: fixed global directions scaled by a small network

def orthonormal_directions(n_dirs: int, dim: int, seed: int) -> np.ndarray:
    g = rng.stream(seed, "vecgan-directions")
    raw = g.standard_normal((n_dirs, dim))
    out = np.zeros_like(raw)
    for j in range(n_dirs):
        v = raw[j].copy()
        for _ in range(2):  # re-orthogonalise once for numerical safety
            for i in range(j):
                v -= (v @ out[i]) * out[i]
        out[j] = v / np.linalg.norm(v)
    return out.astype(np.float32)


def init_scale_net(seed: int) -> dict[str, T.Tensor]:
    sizes = (4, 32, 64, 64, 4)
    g = rng.stream(seed, "vecgan-scale-net")
    params = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = g.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
        params[f"scale/fc{i}/w"] = T.Tensor(w.astype(np.float32), requires_grad=True)
        params[f"scale/fc{i}/b"] = T.Tensor(np.zeros(n_out, np.float32), requires_grad=True)
    return params


def scale_net(params: dict[str, T.Tensor], deltas) -> T.Tensor:
    x = T.as_tensor(deltas)
    n = len(params) // 2
    for i in range(n):
        x = T.linear(x, params[f"scale/fc{i}/w"], params[f"scale/fc{i}/b"])
        if i < n - 1:
            x = T.leaky_relu(x)
    return x


def vecgan_edit(f, scales, directions: np.ndarray) -> T.Tensor:
    """f + sum_j s_j dir_j for latents (B, K, D), scales (B, 4), directions (4, K*D)."""
    f = T.as_tensor(f)
    shift = T.matmul(T.as_tensor(scales), directions)
    return T.add(f, T.reshape(shift, f.shape))


def vecgan_baseline_edit(f, scale_params, directions, source_cond, target_cond) -> T.Tensor:
    deltas = T.sub(T.as_tensor(target_cond), T.as_tensor(source_cond))
    f = T.as_tensor(f)
    deltas = T.reshape(deltas, (f.shape[0], 4))
    return vecgan_edit(f, scale_net(scale_params, deltas), directions)
