"""Synthetic stand-in for the encoder/generator/estimator stack.

Latents are built with known structure: each attribute's condition is
planted into its own set of layers as ``W_k vec(R(c) Z0)``. A frozen random
perceptron renders latents to images. Attribute estimators are trained on
rendered images, identity and perceptual features are fixed random maps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import geometry as G
from . import rng
from . import tensor as T

log = logging.getLogger(__name__)

EMB_ROWS, EMB_COLS = 3, 16
EMB_SIZE = EMB_ROWS * EMB_COLS
GEN_HIDDEN = 256
ID_DIM = 32
PERC_CHANNELS = 8
GEN_OUT_STD = 0.8
ATTRIBUTES = ("gaze", "head")


@dataclass
class WorldSpec:
    K: int = 6
    D: int = 64
    image_side: int = 32
    planted_layers: tuple[tuple[int, ...], ...] = ((0, 1), (2, 3))
    master_seed: int = 0
    condition_range: float = 0.4
    plant_gain: float = 12.0
    arrays: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def n_pixels(self) -> int:
        return self.image_side * self.image_side

    def canonical(self, attr: int) -> np.ndarray:
        return self.arrays[f"world/Z0/attr{attr}"]

    def injection(self, attr: int, layer: int) -> np.ndarray:
        return self.arrays[f"world/W/attr{attr}/layer{layer}"]


def build_world(
    K: int = 6,
    D: int = 64,
    image_side: int = 32,
    planted_layers=((0, 1), (2, 3)),
    master_seed: int = 0,
    condition_range: float = 0.4,
    plant_gain: float = 12.0,
) -> WorldSpec:
    planted = tuple(tuple(int(k) for k in s) for s in planted_layers)
    if set(planted[0]) & set(planted[1]):
        raise ValueError("planted layer sets must be disjoint")
    if any(k < 0 or k >= K for s in planted for k in s):
        raise ValueError("planted layer index out of range")
    world = WorldSpec(K, D, image_side, planted, master_seed, condition_range, plant_gain)
    arrays = world.arrays
    for i in range(2):
        g = rng.stream(master_seed, "canonical", i)
        arrays[f"world/Z0/attr{i}"] = g.standard_normal((EMB_ROWS, EMB_COLS)).astype(np.float32)
        for k in planted[i]:
            g = rng.stream(master_seed, "injection", i, k)
            w = g.standard_normal((D, EMB_SIZE)) * (plant_gain / np.sqrt(EMB_SIZE))
            arrays[f"world/W/attr{i}/layer{k}"] = w.astype(np.float32)
    g = rng.stream(master_seed, "generator")
    n_in = K * D
    w1 = g.standard_normal((n_in, GEN_HIDDEN))
    w2 = g.standard_normal((GEN_HIDDEN, world.n_pixels))
    b1 = 0.1 * g.standard_normal(GEN_HIDDEN)
    b2 = 0.1 * g.standard_normal(world.n_pixels)
    # calibrate gains on a reference batch so hidden units have unit spread
    # and pixels sit in the responsive part of tanh
    ref = _reference_latents(world, 256)
    h = ref.reshape(len(ref), -1) @ w1
    w1 /= h.std()
    b1 -= (ref.reshape(len(ref), -1) @ w1).mean(axis=0)
    h = np.where((pre := ref.reshape(len(ref), -1) @ w1 + b1) > 0, pre, T.LEAKY_SLOPE * pre)
    w2 *= GEN_OUT_STD / (h @ w2).std()
    b2 -= (h @ w2).mean(axis=0)
    arrays["world/gen/w1"] = w1.astype(np.float32)
    arrays["world/gen/b1"] = b1.astype(np.float32)
    arrays["world/gen/w2"] = w2.astype(np.float32)
    arrays["world/gen/b2"] = b2.astype(np.float32)
    g = rng.stream(master_seed, "identity-features")
    arrays["world/idnet/w"] = (g.standard_normal((world.n_pixels, ID_DIM)) / np.sqrt(world.n_pixels)).astype(np.float32)
    g = rng.stream(master_seed, "perceptual")
    arrays["world/perc/k1"] = (g.standard_normal((PERC_CHANNELS, 1, 3, 3)) / 3.0).astype(np.float32)
    arrays["world/perc/k2"] = (g.standard_normal((PERC_CHANNELS, PERC_CHANNELS, 3, 3)) / np.sqrt(9.0 * PERC_CHANNELS)).astype(np.float32)
    return world


def _reference_latents(world: WorldSpec, n: int) -> np.ndarray:
    g = rng.stream(world.master_seed, "generator-calibration")
    f_id = g.standard_normal((n, world.K, world.D))
    r = world.condition_range
    return compose_latent(world, f_id, g.uniform(-r, r, (n, 2)), g.uniform(-r, r, (n, 2))).astype(np.float64)


def world_from_arrays(arrays: dict[str, np.ndarray], meta: dict) -> WorldSpec:
    world = WorldSpec(
        K=int(meta["K"]), D=int(meta["D"]), image_side=int(meta["image_side"]),
        planted_layers=tuple(tuple(s) for s in meta["planted_layers"]),
        master_seed=int(meta["master_seed"]), condition_range=float(meta["condition_range"]),
        plant_gain=float(meta["plant_gain"]),
    )
    world.arrays = {k: v for k, v in arrays.items() if k.startswith("world/")}
    return world


def world_meta(world: WorldSpec) -> dict:
    return {
        "K": world.K, "D": world.D, "image_side": world.image_side,
        "planted_layers": [list(s) for s in world.planted_layers],
        "master_seed": world.master_seed, "condition_range": world.condition_range,
        "plant_gain": world.plant_gain,
    }


# latents

def sample_identity(seed: int, K: int = 6, D: int = 64) -> np.ndarray:
    return rng.stream(seed, "identity").standard_normal((K, D)).astype(np.float32)


def planted_offset(world: WorldSpec, attr: int, layer: int, cond: np.ndarray) -> np.ndarray:
    """W_k vec(R(c) Z0) for conditions of shape (..., 2) -> (..., D)."""
    rot = G.np_rotation(cond[..., 0], cond[..., 1])
    emb = rot @ world.canonical(attr).astype(np.float64)
    flat = emb.reshape(emb.shape[:-2] + (EMB_SIZE,))
    return flat @ world.injection(attr, layer).T.astype(np.float64)


def compose_latent(world: WorldSpec, f_id: np.ndarray, gaze, head) -> np.ndarray:
    """Identity latent plus planted attribute offsets. Batched over leading axes."""
    f_id = np.asarray(f_id, dtype=np.float32)
    out = f_id.copy()
    for attr, cond in enumerate((gaze, head)):
        cond = np.asarray(cond, dtype=np.float64)
        for k in world.planted_layers[attr]:
            out[..., k, :] = (f_id[..., k, :] + planted_offset(world, attr, k, cond)).astype(np.float32)
    return out


# generator and frozen feature maps

def render(world: WorldSpec, latent) -> T.Tensor:
    latent = T.as_tensor(latent)
    if latent.shape[-2:] != (world.K, world.D):
        raise ValueError(f"latent shape {latent.shape} does not match world ({world.K}, {world.D})")
    a = world.arrays
    flat = T.reshape(latent, latent.shape[:-2] + (world.K * world.D,))
    h = T.leaky_relu(T.linear(flat, a["world/gen/w1"], a["world/gen/b1"]))
    return T.tanh(T.linear(h, a["world/gen/w2"], a["world/gen/b2"]))


def np_render(world: WorldSpec, latent: np.ndarray, batch: int = 512) -> np.ndarray:
    latent = np.asarray(latent, dtype=np.float32)
    if latent.ndim == 2:
        return render(world, latent[None]).data[0]
    outs = [render(world, latent[i:i + batch]).data for i in range(0, len(latent), batch)]
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, world.n_pixels), np.float32)


def identity_features(world: WorldSpec, image) -> T.Tensor:
    image = T.as_tensor(image)
    feats = T.linear(image, world.arrays["world/idnet/w"])
    n = T.norm(feats, axis=-1, keepdims=True)
    return T.div(feats, n)


def perceptual_features(world: WorldSpec, image) -> T.Tensor:
    image = T.as_tensor(image)
    lead = image.shape[:-1]
    x = T.reshape(image, (-1, 1, world.image_side, world.image_side))
    x = T.leaky_relu(T.conv2d(x, world.arrays["world/perc/k1"]))
    x = T.leaky_relu(T.conv2d(x, world.arrays["world/perc/k2"]))
    return T.reshape(x, lead + (PERC_CHANNELS * world.n_pixels,))


def perceptual_distance(world: WorldSpec, a, b) -> T.Tensor:
    diff = T.sub(perceptual_features(world, a), perceptual_features(world, b))
    return T.distance_norm(diff, axis=-1)


# datasets

@dataclass
class Dataset:
    identity: np.ndarray  # (N,) int
    gaze: np.ndarray  # (N, 2)
    head: np.ndarray  # (N, 2)
    latent: np.ndarray  # (N, K, D)
    image: np.ndarray  # (N, side*side)

    def __len__(self) -> int:
        return len(self.identity)

    def __getitem__(self, i: int) -> "Sample":
        return Sample(int(self.identity[i]), self.latent[i], G.Condition(*self.gaze[i]),
                      G.Condition(*self.head[i]), self.image[i])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.size == 0:
            idx = idx.astype(np.int64)
        return Dataset(self.identity[idx], self.gaze[idx], self.head[idx], self.latent[idx], self.image[idx])

    @property
    def conditions(self) -> np.ndarray:
        return np.concatenate([self.gaze, self.head], axis=-1)

    def by_identity(self) -> dict[int, np.ndarray]:
        groups: dict[int, list[int]] = {}
        for i, ident in enumerate(self.identity):
            groups.setdefault(int(ident), []).append(i)
        return {k: np.array(v) for k, v in groups.items()}


class Sample(NamedTuple):
    identity_id: int
    latent: np.ndarray
    gaze: G.Condition
    head: G.Condition
    image: np.ndarray


def sample_dataset(world: WorldSpec, n_identities: int, samples_per_identity: int, seed: int,
                   condition_range: float | None = None) -> Dataset:
    if n_identities <= 0 or samples_per_identity <= 0:
        raise ValueError("dataset counts must be positive")
    r = world.condition_range if condition_range is None else condition_range
    n = n_identities * samples_per_identity
    ids = np.repeat(np.arange(n_identities), samples_per_identity)
    f_ids = np.stack([sample_identity(rng.stream(seed, "identity-seed", i).integers(2**63), world.K, world.D)
                      for i in range(n_identities)])
    conds = rng.stream(seed, "conditions").uniform(-r, r, size=(n, 4))
    gaze = conds[:, :2].astype(np.float32)
    head = conds[:, 2:].astype(np.float32)
    latent = compose_latent(world, f_ids[ids], gaze, head)
    image = np_render(world, latent)
    return Dataset(ids.astype(np.int64), gaze, head, latent, image)


# attribute estimators

ESTIMATOR_ARCHS = {
    "train": (128, 64),
    "eval": (),
}


def init_estimator(world: WorldSpec, arch: str, seed: int) -> dict[str, T.Tensor]:
    if arch not in ESTIMATOR_ARCHS:
        raise ValueError(f"unknown estimator architecture {arch!r}")
    sizes = (world.n_pixels,) + ESTIMATOR_ARCHS[arch] + (4,)
    g = rng.stream(seed, f"estimator-{arch}")
    params = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = g.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
        if i == len(sizes) - 2:
            # keep the bounded output away from tanh saturation at init
            w *= 0.1
        params[f"est/fc{i}/w"] = T.Tensor(w.astype(np.float32), requires_grad=True)
        params[f"est/fc{i}/b"] = T.Tensor(np.zeros(n_out, np.float32), requires_grad=True)
    return params


def estimate(params: dict[str, T.Tensor], image) -> T.Tensor:
    """Image (..., P) -> (..., 4) as (gaze pitch, gaze yaw, head pitch, head yaw)."""
    x = T.as_tensor(image)
    n_layers = len(params) // 2
    if x.shape[-1] != params["est/fc0/w"].shape[0]:
        raise ValueError(f"image size {x.shape[-1]} does not match estimator input {params['est/fc0/w'].shape[0]}")
    for i in range(n_layers):
        x = T.linear(x, params[f"est/fc{i}/w"], params[f"est/fc{i}/b"])
        if i < n_layers - 1:
            x = T.leaky_relu(x)
    return T.scale(T.tanh(x), 0.5 * np.pi)


def np_estimate(params: dict[str, T.Tensor], images: np.ndarray, batch: int = 1024) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    outs = [estimate(params, images[i:i + batch]).data for i in range(0, len(images), batch)]
    return np.concatenate(outs, axis=0)


def estimator_loss(params, images: np.ndarray, conds: np.ndarray) -> T.Tensor:
    pred = estimate(params, images)
    err = G.condition_angular_error(T.reshape(pred, pred.shape[:-1] + (2, 2)),
                                    conds.reshape(conds.shape[:-1] + (2, 2)))
    return T.mean(T.sum_(err, axis=-1))


def estimator_errors(params, data: Dataset) -> np.ndarray:
    """Per-sample (gaze, head) angular errors, shape (N, 2)."""
    pred = np_estimate(params, data.image)
    return G.np_condition_angular_error(pred.reshape(-1, 2, 2), data.conditions.reshape(-1, 2, 2))


class EstimatorReport(NamedTuple):
    gaze_err: float
    head_err: float
    history: list


def pretrain_estimator(world: WorldSpec, train: Dataset, arch: str = "train", seed: int = 0,
                       holdout: Dataset | None = None, epochs: int = 30, batch_size: int = 64,
                       lr: float = 1e-3, decay: float = 0.5, decay_every: int = 10):
    """Fit an estimator on rendered images by Adam on summed angular error.

    Returns ``(params, report)``; the report holds mean held-out errors
    (training errors when no holdout is given).
    """
    if len(train) == 0:
        raise ValueError("cannot pretrain an estimator on an empty dataset")
    params = init_estimator(world, arch, seed)
    state = T.AdamState()
    order_rng = rng.stream(seed, f"estimator-order-{arch}")
    conds = train.conditions
    history = []
    for epoch in range(epochs):
        step_lr = lr * decay ** (epoch // decay_every)
        perm = order_rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), batch_size):
            idx = perm[start:start + batch_size]
            loss = estimator_loss(params, train.image[idx], conds[idx])
            grads = T.forward_backward(loss, params)
            T.adam_step(params, grads, state, step_lr)
            total += float(loss.data) * len(idx)
        history.append(total / len(train))
        log.debug("estimator %s epoch %d loss %.4f", arch, epoch, history[-1])
    for p in params.values():
        p.requires_grad = False
    errs = estimator_errors(params, holdout if holdout is not None else train)
    return params, EstimatorReport(float(errs[:, 0].mean()), float(errs[:, 1].mean()), history)
