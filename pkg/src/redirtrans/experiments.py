"""Config-driven orchestration shared by the command line and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

from . import evaluation as E
from . import losses as L
from . import rng
from . import trainer as TR
from . import world as W
from .config import Config

DATA_ROLES = ("train", "holdout", "test")
ESTIMATOR_SEED_TAGS = {"train": 3, "eval": 4}


@dataclass
class Datasets:
    train: W.Dataset
    holdout: W.Dataset
    test: W.Dataset


def build_world(cfg: Config) -> W.WorldSpec:
    return W.build_world(
        K=cfg["world.K"], D=cfg["world.D"], image_side=cfg["world.image_side"],
        planted_layers=(cfg["world.planted_gaze"], cfg["world.planted_head"]),
        master_seed=cfg["seed"], condition_range=cfg["world.condition_range"],
        plant_gain=cfg["world.plant_gain"],
    )


def data_seed(seed: int, role: str) -> int:
    return int(rng.stream(seed, "dataset", DATA_ROLES.index(role)).integers(2**62))


def make_datasets(world: W.WorldSpec, cfg: Config) -> Datasets:
    spi = cfg["data.samples_per_identity"]
    counts = {"train": cfg["data.n_identities"], "holdout": cfg["data.holdout_identities"],
              "test": cfg["data.test_identities"]}
    return Datasets(**{role: W.sample_dataset(world, counts[role], spi, seed=data_seed(cfg["seed"], role))
                       for role in DATA_ROLES})


def pretrain(world: W.WorldSpec, cfg: Config, arch: str, data: Datasets):
    """Fit the training (``train``) or evaluation (``eval``) estimator, scored on the holdout."""
    if arch not in ESTIMATOR_SEED_TAGS:
        raise ValueError(f"unknown estimator architecture {arch!r}")
    seed = int(rng.stream(cfg["seed"], "estimator", ESTIMATOR_SEED_TAGS[arch]).integers(2**62))
    return W.pretrain_estimator(world, data.train, arch, seed=seed, holdout=data.holdout,
                                epochs=cfg["estimator.epochs"], batch_size=cfg["estimator.batch_size"],
                                lr=cfg["estimator.lr"])


def train_config(cfg: Config) -> TR.TrainConfig:
    t = cfg.section("train")
    return TR.TrainConfig(
        mode=t["mode"], label_source=t["label_source"], batch_size=t["batch_size"], epochs=t["epochs"],
        lr0=t["lr0"], decay=t["decay"], decay_every=t["decay_every"], grad_clip=t["grad_clip"],
        weights=L.LossWeights(**cfg.section("loss")), seed=cfg["seed"],
        n_identities=cfg["data.n_identities"], samples_per_identity=cfg["data.samples_per_identity"],
        eval_every=t["eval_every"], eval_pairs=t["eval_pairs"], max_iterations=t["max_iterations"],
    )


def augmentation_config(cfg: Config) -> E.AugmentationConfig:
    a = cfg.section("augment")
    return E.AugmentationConfig(
        n_images=a["n_images"], samples_per_identity=cfg["data.samples_per_identity"],
        n_holdout=a["n_holdout"], quantiles=tuple(a["quantiles"]),
        redirector_iterations=a["redirector_iterations"], estimator_epochs=a["estimator_epochs"],
        downstream_epochs=a["downstream_epochs"], seed=cfg["seed"],
    )


@dataclass
class RedirectionSummary:
    trained: E.EvalReport
    untrained: E.EvalReport
    oracle: E.EvalReport
    layer_mass: object  # per-attribute planted-layer share, None in flat mode


def evaluate(params, world: W.WorldSpec, test: W.Dataset, eval_estimator, cfg: Config) -> RedirectionSummary:
    """Redirection and disentanglement of the trained model next to the no-op and oracle editors."""
    seed, n = cfg["seed"], cfg["eval.pairs"]
    pairs = E.make_pairs(test, n, seed)

    def both(editor):
        red = E.eval_redirection(params, world, test, eval_estimator, pairs, editor=editor, seed=seed)
        dis = E.eval_disentanglement(params, world, test, eval_estimator, seed=seed, pairs=pairs, editor=editor)
        return red.merge(dis)

    trained = both(E.redirector_editor(params, test))
    untrained = both(E.identity_editor(test))
    oracle = both(E.oracle_editor(world, test))
    mass = E.eval_layer_weights(params, world) if params.mode == "layerwise" else None
    return RedirectionSummary(trained, untrained, oracle, mass)
