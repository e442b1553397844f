"""Training loop for the redirector on same-identity (source, target) pairs."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from . import redirector as R
from . import rng
from . import tensor as T
from . import world as W

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "lr", "rec", "perc", "att", "id", "lab", "emb", "prob", "total")
EVAL_COLUMNS = ("iteration", "gaze_redir_err", "head_redir_err")


@dataclass
class TrainConfig:
    mode: str = "layerwise"
    label_source: str = "pseudo"
    batch_size: int = 2
    epochs: int = 3
    lr0: float = 1e-4
    decay: float = 0.8
    decay_every: int = 3000
    grad_clip: float = 10.0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    seed: int = 0
    n_identities: int = 2000
    samples_per_identity: int = 4
    eval_every: int = 1000
    eval_pairs: int = 200
    max_iterations: int = 0  # 0 means run all epochs

    def __post_init__(self):
        if self.mode not in ("flat", "layerwise"):
            raise ValueError(f"mode must be flat or layerwise, got {self.mode!r}")
        if self.label_source not in ("truth", "pseudo"):
            raise ValueError(f"label_source must be truth or pseudo, got {self.label_source!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (embedding loss compares samples)")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return cfg.lr0 * cfg.decay ** (iteration // cfg.decay_every)


def sample_pairs(data: W.Dataset, order_rng: np.random.Generator, groups: dict | None = None):
    """One epoch of (source, target) index pairs.

    Every sample is a source once; its target is drawn uniformly from the
    other samples of the same identity.
    """
    groups = groups or data.by_identity()
    sources = order_rng.permutation(len(data))
    targets = np.empty_like(sources)
    for n, s in enumerate(sources):
        members = groups[int(data.identity[s])]
        others = members[members != s]
        if len(others) == 0:
            raise ValueError(f"identity {data.identity[s]} has a single sample; cannot form a pair")
        targets[n] = others[order_rng.integers(len(others))]
    return sources, targets


def reference_conditions(data: W.Dataset, estimator, label_source: str) -> np.ndarray:
    """Per-sample (N, 2, 2) conditions used as labels and redirection targets."""
    if label_source == "truth":
        return data.conditions.reshape(-1, 2, 2).astype(np.float32)
    return W.np_estimate(estimator, data.image).reshape(-1, 2, 2)


def compute_losses(params: R.RedirectorParams, world: W.WorldSpec, estimator, f_s, img_s, img_t,
                   c_ref, c_t, cfg: TrainConfig):
    res = R.edit(params, f_s, c_t)
    pred = W.render(world, res.latent)
    layerwise = params.mode == "layerwise"
    terms = {
        "rec": L.loss_rec(pred, img_t),
        "att": L.loss_att(estimator, pred, img_t),
        "id": L.loss_id(world, pred, img_s),
        "lab": L.loss_label(res.labels, c_ref),
    }
    k, bsz = res.normalized.shape[:2]
    z = T.reshape(T.swapaxes(res.normalized, 0, 1), (bsz, k * R.N_ATTR, W.EMB_ROWS, W.EMB_COLS))
    terms["emb"] = T.scale(L.loss_embed(z), 1.0 / k)
    if layerwise:
        terms["perc"] = L.loss_perc(world, pred, img_t)
        errs = L.layer_errors(res.labels.data, c_ref)
        terms["prob"] = L.loss_layerweights(params.layer_weights, errs)
    return L.loss_total(terms, cfg.weights, params.mode)


def train_step(params: R.RedirectorParams, state: T.AdamState, world: W.WorldSpec, estimator,
               data: W.Dataset, src: np.ndarray, tgt: np.ndarray, refs: np.ndarray,
               cfg: TrainConfig, lr: float) -> L.LossBreakdown:
    """One forward/backward/Adam update on a batch of (source, target) pairs."""
    if np.any(data.identity[src] != data.identity[tgt]):
        raise ValueError("every (source, target) pair must share an identity")
    total, breakdown = compute_losses(params, world, estimator, data.latent[src], data.image[src],
                                      data.image[tgt], refs[src], refs[tgt], cfg)
    if not np.isfinite(breakdown.total):
        raise FloatingPointError(f"non-finite loss at step {state.step}")
    trainable = params.trainable()
    grads = T.forward_backward(total, trainable)
    if cfg.grad_clip > 0:
        T.clip_grad_norm(grads, cfg.grad_clip)
    T.adam_step(trainable, grads, state, lr)
    return breakdown


@dataclass
class TrainResult:
    params: R.RedirectorParams
    log_rows: list
    eval_rows: list
    seconds: float


def train(cfg: TrainConfig, world: W.WorldSpec, estimator, data: W.Dataset | None = None,
          probe: W.Dataset | None = None, log_path: Path | None = None,
          eval_log_path: Path | None = None) -> TrainResult:
    """Run the full schedule and return the trained parameters and logs.

    ``probe`` pairs are scored every ``cfg.eval_every`` iterations with the
    training estimator; the unseen evaluation estimator is never touched here.
    """
    from .evaluation import eval_redirection, make_pairs

    if estimator is None:
        raise ValueError("an attribute estimator is required for training")
    if data is None:
        data = W.sample_dataset(world, cfg.n_identities, cfg.samples_per_identity, seed=cfg.seed)
    params = R.init_redirector(cfg.mode, world.K, world.D, seed=cfg.seed)
    state = T.AdamState()
    refs = reference_conditions(data, estimator, cfg.label_source)
    groups = data.by_identity()
    order_rng = rng.stream(cfg.seed, "train-order")
    probe_pairs = make_pairs(probe, cfg.eval_pairs, seed=cfg.seed) if probe is not None else None

    log_rows, eval_rows = [], []
    log_fh = open(log_path, "w", newline="") if log_path else None
    eval_fh = open(eval_log_path, "w", newline="") if eval_log_path else None
    writer = csv.writer(log_fh) if log_fh else None
    eval_writer = csv.writer(eval_fh) if eval_fh else None
    if writer:
        writer.writerow(LOG_COLUMNS)
    if eval_writer:
        eval_writer.writerow(EVAL_COLUMNS)

    def run_eval(it: int) -> None:
        if probe_pairs is None:
            return
        rep = eval_redirection(params, world, probe, estimator, probe_pairs)
        row = (it, rep.gaze_redir_err, rep.head_redir_err)
        eval_rows.append(row)
        if eval_writer:
            eval_writer.writerow([it, f"{row[1]:.9g}", f"{row[2]:.9g}"])
        log.info("iter %d gaze redir %.4f head redir %.4f", it, row[1], row[2])

    start = time.perf_counter()
    it = 0
    try:
        run_eval(0)
        done = False
        for epoch in range(cfg.epochs):
            sources, targets = sample_pairs(data, order_rng, groups)
            n_batches = len(sources) // cfg.batch_size
            for b in range(n_batches):
                sl = slice(b * cfg.batch_size, (b + 1) * cfg.batch_size)
                lr = lr_schedule(it, cfg)
                try:
                    br = train_step(params, state, world, estimator, data, sources[sl], targets[sl],
                                    refs, cfg, lr)
                except FloatingPointError as exc:
                    raise FloatingPointError(f"iteration {it}: {exc}") from exc
                row = (it, lr, br.rec, br.perc, br.att, br.id, br.lab, br.emb, br.prob, br.total)
                log_rows.append(row)
                if writer:
                    writer.writerow([row[0]] + [f"{v:.9g}" for v in row[1:]])
                it += 1
                if cfg.eval_every and it % cfg.eval_every == 0:
                    run_eval(it)
                if cfg.max_iterations and it >= cfg.max_iterations:
                    done = True
                    break
            log.info("epoch %d done at iteration %d, loss %.4f", epoch, it, log_rows[-1][-1])
            if done:
                break
        if not eval_rows or eval_rows[-1][0] != it:
            run_eval(it)
    finally:
        if log_fh:
            log_fh.close()
        if eval_fh:
            eval_fh.close()
    for p in params.tensors.values():
        p.requires_grad = False
    return TrainResult(params, log_rows, eval_rows, time.perf_counter() - start)
