"""Redirection, disentanglement and layer-weight metrics, gaze correction and
the data-augmentation experiment.

Editors share one calling convention so the trained redirector, the
untouched identity edit and the ground-truth oracle can be scored by the
same code: ``editor(indices, c_t, mask) -> edited latents``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import geometry as G
from . import redirector as R
from . import rng
from . import world as W

log = logging.getLogger(__name__)

PERTURB_RANGE = 0.1 * math.pi


@dataclass
class EvalReport:
    gaze_redir_err: float = float("nan")
    head_redir_err: float = float("nan")
    gaze_induce_err: float = float("nan")
    head_induce_err: float = float("nan")
    perceptual_dist: float = float("nan")
    n: int = 0
    seed: int = 0
    per_sample: dict = field(default_factory=dict, repr=False)

    def merge(self, other: "EvalReport") -> "EvalReport":
        out = EvalReport(**{k: v for k, v in self.__dict__.items() if k != "per_sample"})
        out.per_sample = dict(self.per_sample)
        for name in ("gaze_redir_err", "head_redir_err", "gaze_induce_err", "head_induce_err", "perceptual_dist"):
            val = getattr(other, name)
            if not math.isnan(val):
                setattr(out, name, val)
        out.per_sample.update(other.per_sample)
        out.n = max(self.n, other.n)
        return out

    def rows(self) -> list[tuple[str, float, float]]:
        """(metric, radians, degrees) rows; perceptual distance and n carry no degrees."""
        out = []
        for name in ("gaze_redir_err", "head_redir_err", "gaze_induce_err", "head_induce_err"):
            val = getattr(self, name)
            out.append((name, val, math.degrees(val)))
        out.append(("perceptual_dist", self.perceptual_dist, float("nan")))
        out.append(("n", float(self.n), float("nan")))
        out.append(("seed", float(self.seed), float("nan")))
        return out


def make_pairs(data: W.Dataset, n_pairs: int, seed: int) -> np.ndarray:
    """(n, 2) array of same-identity (source, target) indices, sources without replacement."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    g = rng.stream(seed, "eval-pairs")
    groups = data.by_identity()
    sources = g.permutation(len(data))[:n_pairs]
    out = np.empty((len(sources), 2), dtype=np.int64)
    for n, s in enumerate(sources):
        members = groups[int(data.identity[s])]
        others = members[members != s]
        out[n] = (s, others[g.integers(len(others))] if len(others) else s)
    return out


# editors

def redirector_editor(params: R.RedirectorParams, data: W.Dataset):
    def run(idx, c_t, mask=(True, True)):
        return R.np_edit(params, data.latent[idx], c_t, mask)
    return run


def identity_editor(data: W.Dataset):
    def run(idx, c_t, mask=(True, True)):
        return data.latent[idx].copy()
    return run


def oracle_editor(world: W.WorldSpec, data: W.Dataset):
    """Rebuild the latent from its identity part at the requested conditions."""
    def run(idx, c_t, mask=(True, True)):
        lat = data.latent[idx]
        f_id = strip_conditions(world, lat, data.gaze[idx], data.head[idx])
        c_t = np.asarray(c_t).reshape(len(idx), 2, 2)
        gaze = c_t[:, 0] if mask[0] else data.gaze[idx]
        head = c_t[:, 1] if mask[1] else data.head[idx]
        return W.compose_latent(world, f_id, gaze, head)
    return run


def strip_conditions(world: W.WorldSpec, latent: np.ndarray, gaze, head) -> np.ndarray:
    out = np.array(latent, dtype=np.float64)
    for attr, cond in enumerate((gaze, head)):
        for k in world.planted_layers[attr]:
            out[..., k, :] -= W.planted_offset(world, attr, k, np.asarray(cond, dtype=np.float64))
    return out


# metrics

def _attr_errors(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return G.np_condition_angular_error(a.reshape(-1, 2, 2), b.reshape(-1, 2, 2))


def eval_redirection(params, world: W.WorldSpec, testset: W.Dataset, estimator, pairs: np.ndarray | None = None,
                     editor=None, seed: int = 0, n_pairs: int = 500) -> EvalReport:
    """Redirect each source to the estimator's reading of its target and compare readings."""
    if len(testset) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    pairs = make_pairs(testset, n_pairs, seed) if pairs is None else pairs
    editor = editor or redirector_editor(params, testset)
    src, tgt = pairs[:, 0], pairs[:, 1]
    target_est = W.np_estimate(estimator, testset.image[tgt])
    edited = editor(src, target_est.reshape(-1, 2, 2))
    images = W.np_render(world, edited)
    pred_est = W.np_estimate(estimator, images)
    errs = _attr_errors(pred_est, target_est)
    perc = np.concatenate([W.perceptual_distance(world, images[i:i + 256], testset.image[tgt][i:i + 256]).data
                           for i in range(0, len(images), 256)])
    return EvalReport(gaze_redir_err=float(errs[:, 0].mean()), head_redir_err=float(errs[:, 1].mean()),
                      perceptual_dist=float(perc.mean()), n=len(pairs), seed=seed,
                      per_sample={"gaze_redir": errs[:, 0], "head_redir": errs[:, 1], "perceptual": perc})


def draw_perturbations(n: int, seed: int) -> np.ndarray:
    """(n, 2, 2) angle offsets ~ U(-0.1 pi, 0.1 pi): [which attribute redirected][pitch, yaw]."""
    return rng.stream(seed, "disentangle-eps").uniform(-PERTURB_RANGE, PERTURB_RANGE, size=(n, 2, 2))


def eval_disentanglement(params, world: W.WorldSpec, testset: W.Dataset, estimator, seed: int = 0,
                         pairs: np.ndarray | None = None, editor=None, n_pairs: int = 500,
                         eps: np.ndarray | None = None) -> EvalReport:
    """Shift one attribute of a redirected sample by eps and measure drift of the other.

    Pitch and yaw offsets are drawn independently.
    """
    pairs = make_pairs(testset, n_pairs, seed) if pairs is None else pairs
    editor = editor or redirector_editor(params, testset)
    src, tgt = pairs[:, 0], pairs[:, 1]
    eps = draw_perturbations(len(pairs), seed) if eps is None else eps
    c_t = W.np_estimate(estimator, testset.image[tgt]).reshape(-1, 2, 2)
    base = W.np_estimate(estimator, W.np_render(world, editor(src, c_t))).reshape(-1, 2, 2)
    induced = {}
    for moved, watched, name in ((1, 0, "gaze_induce"), (0, 1, "head_induce")):
        shifted = c_t.copy()
        shifted[:, moved] += eps[:, moved]
        est = W.np_estimate(estimator, W.np_render(world, editor(src, shifted))).reshape(-1, 2, 2)
        induced[name] = G.np_condition_angular_error(est[:, watched], base[:, watched])
    return EvalReport(gaze_induce_err=float(induced["gaze_induce"].mean()),
                      head_induce_err=float(induced["head_induce"].mean()), n=len(pairs), seed=seed,
                      per_sample=induced)


def eval_layer_weights(params: R.RedirectorParams, world: W.WorldSpec) -> np.ndarray:
    """Share of each attribute's absolute layer-weight mass on its planted layers."""
    if params.mode != "layerwise":
        raise ValueError("layer weights exist only for layerwise redirectors")
    w = np.abs(params.layer_weights.data.astype(np.float64))
    fractions = []
    for i, planted in enumerate(world.planted_layers):
        fractions.append(w[i, list(planted)].sum() / w[i].sum())
    return np.array(fractions)


def normalized_weight_profile(params: R.RedirectorParams) -> np.ndarray:
    w = params.layer_weights.data.astype(np.float64)
    return w / np.abs(w).sum(axis=1, keepdims=True)


# gaze correction

def correct(params: R.RedirectorParams, latent: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Redirect latents (B, K, D) back to reference conditions (B, 2, 2)."""
    latent = np.asarray(latent, dtype=np.float32)
    single = latent.ndim == 2
    if single:
        latent = latent[None]
    out = R.np_edit(params, latent, np.asarray(reference, np.float32).reshape(len(latent), 2, 2))
    return out[0] if single else out


@dataclass
class CorrectionResult:
    pre_err: np.ndarray
    post_err: np.ndarray

    @property
    def improved_fraction(self) -> float:
        return float(np.mean(self.post_err < self.pre_err))


def perturb_and_correct(params: R.RedirectorParams, world: W.WorldSpec, testset: W.Dataset, estimator,
                        n_trials: int = 200, seed: int = 0, min_shift: float = 0.1,
                        max_shift: float = 0.3) -> CorrectionResult:
    """Drift the gaze layers, then correct back to the true conditions.

    The drift replaces the planted gaze offset with one for a gaze rotated by
    a random angle in [min_shift, max_shift]; errors are the evaluation
    estimator's gaze reading against the clean sample's reading.
    """
    g = rng.stream(seed, "correction")
    idx = g.choice(len(testset), size=n_trials, replace=n_trials > len(testset))
    angle = g.uniform(0, 2 * np.pi, n_trials)
    mag = g.uniform(min_shift, max_shift, n_trials)
    drift = np.stack([mag * np.sin(angle), mag * np.cos(angle)], axis=-1)
    gaze, head = testset.gaze[idx], testset.head[idx]
    f_id = strip_conditions(world, testset.latent[idx], gaze, head)
    drifted = W.compose_latent(world, f_id, gaze + drift, head)
    reference = np.stack([gaze, head], axis=1)
    fixed = correct(params, drifted, reference)
    clean = W.np_estimate(estimator, testset.image[idx]).reshape(-1, 2, 2)[:, 0]
    pre = W.np_estimate(estimator, W.np_render(world, drifted)).reshape(-1, 2, 2)[:, 0]
    post = W.np_estimate(estimator, W.np_render(world, fixed)).reshape(-1, 2, 2)[:, 0]
    return CorrectionResult(G.np_condition_angular_error(pre, clean), G.np_condition_angular_error(post, clean))


# augmentation experiment

@dataclass
class AugmentationConfig:
    n_images: int = 2000
    samples_per_identity: int = 4
    n_holdout: int = 2000
    quantiles: tuple = (25, 50, 75)
    redirector_iterations: int = 6000
    estimator_epochs: int = 30
    downstream_arch: str = "train"
    downstream_epochs: int = 40
    seed: int = 0


@dataclass
class AugmentationRow:
    q: int
    n_labeled: int
    n_aug: int
    raw_err: float
    aug_err: float


def run_augmentation_experiment(world: W.WorldSpec, cfg: AugmentationConfig, train_cfg=None,
                                progress=None) -> list[AugmentationRow]:
    """Downstream gaze-estimator error with and without redirected samples.

    For each Q: the supervising estimator and the redirector are trained on
    the Q% labeled subset; each labeled sample is then redirected once to
    fresh random conditions, doubling the downstream training set.
    """
    from .trainer import TrainConfig, train

    for q in cfg.quantiles:
        if q not in (25, 50, 75):
            warnings.warn(f"augmentation percentage {q} is outside the usual 25/50/75 grid")
    spi = cfg.samples_per_identity
    pool = W.sample_dataset(world, cfg.n_images // spi, spi, seed=rng.stream(cfg.seed, "aug-pool").integers(2**31))
    holdout = W.sample_dataset(world, cfg.n_holdout // spi, spi, seed=rng.stream(cfg.seed, "aug-holdout").integers(2**31))
    ident_order = rng.stream(cfg.seed, "aug-split").permutation(cfg.n_images // spi)
    rows = []
    for q in cfg.quantiles:
        n_ident = max(2, round(len(ident_order) * q / 100))
        keep = np.isin(pool.identity, ident_order[:n_ident])
        labeled = pool.subset(np.flatnonzero(keep))
        est, _ = W.pretrain_estimator(world, labeled, "train", seed=cfg.seed + q, epochs=cfg.estimator_epochs)
        tcfg = train_cfg or TrainConfig()
        # a fixed iteration budget, so small labeled sets get more passes
        epochs = -(-cfg.redirector_iterations * tcfg.batch_size // len(labeled))
        tcfg = TrainConfig(**{**tcfg.__dict__, "epochs": epochs, "max_iterations": cfg.redirector_iterations,
                              "seed": cfg.seed + q, "eval_every": 0})
        result = train(tcfg, world, est, data=labeled)
        g = rng.stream(cfg.seed, "aug-targets", q)
        r = world.condition_range
        assigned = g.uniform(-r, r, size=(len(labeled), 2, 2)).astype(np.float32)
        edited = R.np_edit(result.params, labeled.latent, assigned)
        synthetic = W.Dataset(labeled.identity, assigned[:, 0], assigned[:, 1], edited,
                              W.np_render(world, edited))
        augmented = _concat(labeled, synthetic)
        _, raw = W.pretrain_estimator(world, labeled, cfg.downstream_arch, seed=cfg.seed + 1000 + q,
                                      holdout=holdout, epochs=cfg.downstream_epochs)
        _, aug = W.pretrain_estimator(world, augmented, cfg.downstream_arch, seed=cfg.seed + 1000 + q,
                                      holdout=holdout, epochs=cfg.downstream_epochs)
        row = AugmentationRow(q, len(labeled), len(augmented), raw.gaze_err, aug.gaze_err)
        log.info("augmentation Q=%d raw %.4f aug %.4f", q, row.raw_err, row.aug_err)
        if progress:
            progress(row)
        rows.append(row)
    return rows


def _concat(a: W.Dataset, b: W.Dataset) -> W.Dataset:
    return W.Dataset(*(np.concatenate([x, y]) for x, y in
                       zip((a.identity, a.gaze, a.head, a.latent, a.image),
                           (b.identity, b.gaze, b.head, b.latent, b.image))))
