"""Command-line entry point: ``redirtrans <subcommand> [options]``.

Exit codes: 0 success, 1 usage or config error, 2 runtime error. Every
subcommand writes into ``--out``: the resolved config, a seed record and the
package version come first, then the subcommand's CSV, checkpoint and figure
artifacts.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as C
from . import evaluation as E
from . import experiments as X
from . import formats as F
from . import trainer as TR
from . import world as W

log = logging.getLogger("redirtrans")

GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class RunError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# flag -> config key
FLAG_KEYS = {
    "seed": "seed",
    "world": "paths.world",
    "estimator": "paths.estimator",
    "eval_estimator": "paths.eval_estimator",
    "ckpt": "paths.checkpoint",
    "mode": "train.mode",
    "max_iterations": "train.max_iterations",
    "epochs": "train.epochs",
    "pairs": "eval.pairs",
    "trials": "correct.trials",
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--out", default=None, help="output directory (default runs/<subcommand>)")
    common.add_argument("--seed", type=int, help="master seed (overrides config and REDIRTRANS_SEED)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
    common.add_argument("--world", help="world checkpoint written by gen-world")
    common.add_argument("--json", action="store_true", help="print the report as JSON")
    common.add_argument("--degrees", action="store_true",
                        help="angles on the command line and in text reports are in degrees")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="redirtrans", description="Latent gaze/head redirection on a synthetic world.")
    parser.add_argument("--version", action="version", version=f"redirtrans {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True

    sub.add_parser("gen-world", parents=[common], help="build the world and dump datasets")
    p = sub.add_parser("pretrain-estimator", parents=[common], help="fit an attribute estimator")
    p.add_argument("--arch", choices=("train", "eval"), default="train")
    p = sub.add_parser("train", parents=[common], help="train the redirector")
    p.add_argument("--estimator", help="training estimator checkpoint")
    p.add_argument("--mode", choices=("flat", "layerwise"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-iterations", type=int)
    for name, helptext in (("eval", "redirection metrics"), ("disentangle", "induced-error metrics"),
                           ("correct", "perturb-and-correct experiment")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--ckpt", help="redirector checkpoint")
        p.add_argument("--eval-estimator", help="evaluation estimator checkpoint")
        if name == "correct":
            p.add_argument("--trials", type=int)
        else:
            p.add_argument("--pairs", type=int)
    sub.add_parser("augment", parents=[common], help="downstream augmentation experiment")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--points", type=int, default=100, help="random points per check")
    p = sub.add_parser("redirect", parents=[common], help="redirect one latent file")
    p.add_argument("--ckpt", help="redirector checkpoint")
    p.add_argument("--latent", required=True, help="input RDTL latent")
    for attr in ("gaze", "head"):
        for angle in ("pitch", "yaw"):
            p.add_argument(f"--{attr}-{angle}", type=float)
    return parser


# run-directory plumbing

def _overrides(args) -> dict[str, str]:
    out = {}
    for flag, key in FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            out[key] = str(val)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _prepare(args, cfg: C.Config) -> Path:
    out = Path(args.out or Path("runs") / args.command)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.cfg").write_text(cfg.render(), encoding="utf-8")
    (out / "seed.txt").write_text(f"seed = {cfg['seed']}  # {cfg.sources['seed']}\n", encoding="utf-8")
    (out / "VERSION").write_text(f"redirtrans {__version__}\n", encoding="utf-8")
    return out


def _require(path: str, what: str, key: str, flag: str) -> Path:
    if not path:
        raise RunError(f"no {what} given: set {key} in the config or pass {flag}")
    p = Path(path)
    if not p.is_file():
        raise RunError(f"{what} not found: {p}")
    return p


def _world(cfg: C.Config):
    if cfg["paths.world"]:
        return F.load_world(_require(cfg["paths.world"], "world checkpoint", "paths.world", "--world"))
    return X.build_world(cfg)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])


def _angle(v: float, degrees: bool) -> str:
    return f"{math.degrees(v):.3f} deg" if degrees else f"{v:.5f} rad"


def _emit(args, out: Path, payload: dict, text: str) -> None:
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    print(json.dumps(payload, indent=2, sort_keys=True) if args.json else text)


# subcommands

def cmd_gen_world(args, cfg, out):
    world = X.build_world(cfg)
    F.save_world(out / "world.rdtc", world)
    data = X.make_datasets(world, cfg)
    rows = []
    for role in X.DATA_ROLES:
        ds = getattr(data, role)
        F.write_dataset(out / f"{role}.rdtd", ds)
        rows.append((role, len(ds), len(np.unique(ds.identity))))
    _write_csv(out / "datasets.csv", ("split", "samples", "identities"), rows)
    payload = {"world": str(out / "world.rdtc"), "splits": {r: {"samples": n, "identities": i} for r, n, i in rows}}
    text = "\n".join([f"world written to {out / 'world.rdtc'}"] + [f"{r}: {n} samples, {i} identities"
                                                                    for r, n, i in rows])
    _emit(args, out, payload, text)


def cmd_pretrain_estimator(args, cfg, out):
    world = _world(cfg)
    data = X.make_datasets(world, cfg)
    params, rep = X.pretrain(world, cfg, args.arch, data)
    F.save_estimator(out / f"estimator_{args.arch}.rdtc", params)
    _write_csv(out / f"estimator_{args.arch}_history.csv", ("epoch", "train_loss"), list(enumerate(rep.history)))
    payload = {"arch": args.arch, "gaze_err": rep.gaze_err, "head_err": rep.head_err,
               "checkpoint": str(out / f"estimator_{args.arch}.rdtc")}
    _write_csv(out / "report.csv", ("metric", "radians", "degrees"),
               [(m, v, math.degrees(v)) for m, v in (("gaze_err", rep.gaze_err), ("head_err", rep.head_err))])
    text = (f"{args.arch} estimator held-out error: gaze {_angle(rep.gaze_err, args.degrees)}, "
            f"head {_angle(rep.head_err, args.degrees)}")
    _emit(args, out, payload, text)


def cmd_train(args, cfg, out):
    from . import plotting

    est_path = _require(cfg["paths.estimator"], "estimator checkpoint", "paths.estimator", "--estimator")
    estimator = F.load_estimator(est_path)
    world = _world(cfg)
    tcfg = X.train_config(cfg)
    data = X.make_datasets(world, cfg)
    result = TR.train(tcfg, world, estimator, data=data.train, probe=data.holdout,
                      log_path=out / "train_log.csv", eval_log_path=out / "eval_log.csv")
    F.save_redirector(out / "redirector.rdtc", result.params)
    plotting.plot_training(result.log_rows, result.eval_rows, out / "training.png")
    payload = {"iterations": len(result.log_rows), "seconds": result.seconds,
               "final_total_loss": result.log_rows[-1][-1], "checkpoint": str(out / "redirector.rdtc")}
    if result.params.mode == "layerwise":
        mass = E.eval_layer_weights(result.params, world)
        plotting.plot_layer_weights(result.params.layer_weights.data, world.planted_layers,
                                    out / "layer_weights.png")
        payload["planted_layer_mass"] = {"gaze": float(mass[0]), "head": float(mass[1])}
    text = (f"trained {payload['iterations']} iterations in {result.seconds:.1f} s; "
            f"final loss {payload['final_total_loss']:.4f}")
    if "planted_layer_mass" in payload:
        text += f"; planted-layer mass gaze {mass[0]:.3f} head {mass[1]:.3f}"
    _emit(args, out, payload, text)


def _eval_inputs(cfg):
    ckpt = _require(cfg["paths.checkpoint"], "redirector checkpoint", "paths.checkpoint", "--ckpt")
    ev = _require(cfg["paths.eval_estimator"], "evaluation estimator checkpoint", "paths.eval_estimator",
                  "--eval-estimator")
    world = _world(cfg)
    return F.load_redirector(ckpt), world, F.load_estimator(ev), X.make_datasets(world, cfg).test


def _summary_rows(summary: X.RedirectionSummary, fields):
    rows = []
    for editor in ("trained", "untrained", "oracle"):
        rep = getattr(summary, editor)
        for name, rad, deg in rep.rows():
            if name in fields:
                rows.append((editor, name, rad, deg))
    return rows


def _run_eval(args, cfg, out, fields, hist_keys, title):
    from . import plotting

    params, world, ev, test = _eval_inputs(cfg)
    summary = X.evaluate(params, world, test, ev, cfg)
    rows = _summary_rows(summary, fields)
    _write_csv(out / "report.csv", ("editor", "metric", "radians", "degrees"), rows)
    per = summary.trained.per_sample
    _write_csv(out / "per_sample.csv", ("index",) + hist_keys,
               [(i,) + tuple(float(per[k][i]) for k in hist_keys) for i in range(len(per[hist_keys[0]]))])
    plotting.plot_error_histograms({k: per[k] for k in hist_keys}, out / "errors.png", degrees=args.degrees)
    payload = {editor: {name: rad for e, name, rad, _ in rows if e == editor} for editor in
               ("trained", "untrained", "oracle")}
    lines = [title]
    for editor, name, rad, _ in rows:
        lines.append(f"  {editor:9s} {name:16s} {_angle(rad, args.degrees) if name != 'perceptual_dist' else f'{rad:.4f}'}")
    if summary.layer_mass is not None:
        payload["planted_layer_mass"] = {"gaze": float(summary.layer_mass[0]), "head": float(summary.layer_mass[1])}
        lines.append(f"  planted-layer mass: gaze {summary.layer_mass[0]:.3f} head {summary.layer_mass[1]:.3f}")
    _emit(args, out, payload, "\n".join(lines))


def cmd_eval(args, cfg, out):
    _run_eval(args, cfg, out, {"gaze_redir_err", "head_redir_err", "perceptual_dist"},
              ("gaze_redir", "head_redir", "perceptual"), "redirection error (evaluation estimator)")


def cmd_disentangle(args, cfg, out):
    _run_eval(args, cfg, out, {"gaze_induce_err", "head_induce_err"}, ("gaze_induce", "head_induce"),
              "induced error on the non-redirected attribute")


def cmd_correct(args, cfg, out):
    from . import plotting

    params, world, ev, test = _eval_inputs(cfg)
    res = E.perturb_and_correct(params, world, test, ev, n_trials=cfg["correct.trials"], seed=cfg["seed"])
    _write_csv(out / "correction.csv", ("trial", "pre_err", "post_err"),
               [(i, float(a), float(b)) for i, (a, b) in enumerate(zip(res.pre_err, res.post_err))])
    plotting.plot_correction(res.pre_err, res.post_err, out / "correction.png")
    payload = {"trials": len(res.pre_err), "improved_fraction": res.improved_fraction,
               "mean_pre_err": float(res.pre_err.mean()), "mean_post_err": float(res.post_err.mean())}
    text = (f"correction improved {res.improved_fraction:.1%} of {len(res.pre_err)} trials; mean gaze error "
            f"{_angle(payload['mean_pre_err'], args.degrees)} -> {_angle(payload['mean_post_err'], args.degrees)}")
    _emit(args, out, payload, text)


def cmd_augment(args, cfg, out):
    from . import plotting

    world = _world(cfg)
    acfg = X.augmentation_config(cfg)
    rows = E.run_augmentation_experiment(world, acfg, X.train_config(cfg),
                                         progress=lambda r: log.info("Q=%d raw %.4f aug %.4f", r.q, r.raw_err,
                                                                     r.aug_err))
    _write_csv(out / "augmentation.csv", ("q", "n_labeled", "n_aug", "raw_err", "aug_err", "raw_deg", "aug_deg"),
               [(r.q, r.n_labeled, r.n_aug, r.raw_err, r.aug_err, math.degrees(r.raw_err), math.degrees(r.aug_err))
                for r in rows])
    plotting.plot_augmentation(rows, out / "augmentation.png")
    payload = {str(r.q): {"raw_err": r.raw_err, "aug_err": r.aug_err, "n_labeled": r.n_labeled,
                          "n_aug": r.n_aug} for r in rows}
    text = "\n".join(f"Q={r.q}%: raw {_angle(r.raw_err, args.degrees)}  aug {_angle(r.aug_err, args.degrees)}"
                     for r in rows)
    _emit(args, out, payload, text)


def cmd_gradcheck(args, cfg, out):
    from . import checks

    if args.points <= 0:
        raise UsageError("--points must be positive")
    start = time.perf_counter()
    errors = checks.run_checks(args.points, seed=cfg["seed"])
    seconds = time.perf_counter() - start
    _write_csv(out / "gradcheck.csv", ("op", "max_rel_err"), sorted(errors.items()))
    worst = max(errors.values())
    payload = {"errors": errors, "points": args.points, "seconds": seconds, "max": worst,
               "tolerance": GRADCHECK_TOLERANCE}
    text = "\n".join(f"{name:24s} {err:.3e}" for name, err in sorted(errors.items()))
    text += f"\nmax {worst:.3e} over {args.points} points per check ({seconds:.1f} s)"
    _emit(args, out, payload, text)
    if worst >= GRADCHECK_TOLERANCE:
        raise RunError(f"gradient check failed: max relative error {worst:.3e} >= {GRADCHECK_TOLERANCE}")


def cmd_redirect(args, cfg, out):
    from . import plotting
    from . import redirector as R

    ckpt = _require(cfg["paths.checkpoint"], "redirector checkpoint", "paths.checkpoint", "--ckpt")
    latent_path = _require(args.latent, "latent file", "--latent", "--latent")
    params = F.load_redirector(ckpt)
    world = _world(cfg)
    latent = F.read_latent(latent_path)
    if latent.shape != (world.K, world.D):
        raise RunError(f"latent shape {latent.shape} does not match the world ({world.K}, {world.D})")
    scale = math.pi / 180.0 if args.degrees else 1.0
    current = R.self_conditions(params, latent[None])[0].astype(np.float64)
    target = current.copy()
    mask = [False, False]
    for i, attr in enumerate(("gaze", "head")):
        for j, angle in enumerate(("pitch", "yaw")):
            val = getattr(args, f"{attr}_{angle}")
            if val is not None:
                target[i, j] = val * scale
                mask[i] = True
    if not any(mask):
        raise UsageError("give at least one of --gaze-pitch/--gaze-yaw/--head-pitch/--head-yaw")
    edited = R.np_edit(params, latent[None], target[None].astype(np.float32), tuple(mask))[0]
    F.write_latent(out / "edited.rdtl", edited)
    images = W.np_render(world, np.stack([latent, edited]))
    F.write_pgm(out / "source.pgm", images[0])
    F.write_pgm(out / "edited.pgm", images[1])
    plotting.save_image(out / "source.png", images[0])
    plotting.save_image(out / "edited.png", images[1])
    payload = {"source_conditions": current.tolist(), "target_conditions": target.tolist(),
               "redirected": {"gaze": mask[0], "head": mask[1]}, "latent": str(out / "edited.rdtl"),
               "image": str(out / "edited.pgm")}
    fmt = lambda c: f"({_angle(c[0], args.degrees)}, {_angle(c[1], args.degrees)})"  # noqa: E731
    text = (f"gaze {fmt(current[0])} -> {fmt(target[0])}; head {fmt(current[1])} -> {fmt(target[1])}\n"
            f"wrote {out / 'edited.rdtl'} and {out / 'edited.pgm'}")
    _emit(args, out, payload, text)


HANDLERS = {
    "gen-world": cmd_gen_world, "pretrain-estimator": cmd_pretrain_estimator, "train": cmd_train,
    "eval": cmd_eval, "disentangle": cmd_disentangle, "correct": cmd_correct, "augment": cmd_augment,
    "gradcheck": cmd_gradcheck, "redirect": cmd_redirect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        cfg = C.load(args.config, _overrides(args))
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    except (UsageError, C.ConfigError) as exc:
        print(str(exc), file=sys.stderr)
        if isinstance(exc, C.ConfigError):
            print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    except OSError as exc:
        print(f"redirtrans: error: cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        out = _prepare(args, cfg)
        HANDLERS[args.command](args, cfg, out)
    except UsageError as exc:
        print(f"{parser.format_usage()}redirtrans: error: {exc}", file=sys.stderr)
        return 1
    except (RunError, F.FormatError, OSError, ValueError, FloatingPointError) as exc:
        print(f"redirtrans: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
