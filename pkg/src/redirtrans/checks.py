"""Registry of gradient checks for every differentiable op and loss term.

Each check builds a function and a random point satisfying the op's
preconditions. Points that land within a difference step of a leaky-relu
kink or the arccos clamp are redrawn. Non-scalar ops are reduced with fixed
random weights. Composite checks use a wider step and a random subset of
coordinates per input so that the whole registry stays cheap.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from . import geometry as G
from . import losses as L
from . import redirector as R
from . import tensor as T
from . import world as W

EPS = 1e-6
ARCCOS_MARGIN = 1e-3
N_DIRECTIONS = 3
# a direction nearly orthogonal to the gradient gives a JVP below difference resolution
MIN_DIRECTIONAL_FRACTION = 1e-2
MAX_DRAWS = 500

_small_world: W.WorldSpec | None = None


class Case(NamedTuple):
    fn: Callable[..., T.Tensor]
    inputs: list
    composite: bool = False


def small_world() -> W.WorldSpec:
    global _small_world
    if _small_world is None:
        _small_world = W.build_world(K=3, D=8, image_side=6, planted_layers=((0,), (1,)), master_seed=11)
    return _small_world


def _scalarize(case: Case, g: np.random.Generator) -> Case:
    probe = case.fn(*[T.Tensor(np.asarray(x, np.float64)) for x in case.inputs])
    if probe.data.size == 1:
        return Case(lambda *a: T.reshape(case.fn(*a), ()), case.inputs, case.composite)
    weights = g.standard_normal(probe.shape)
    return Case(lambda *a: T.sum_(T.mul(case.fn(*a), weights)), case.inputs, case.composite)


def _graph(case: Case, shift=None) -> T.Tensor:
    arrays = [np.array(x, np.float64) for x in case.inputs]
    if shift is not None:
        arrays = [a + s for a, s in zip(arrays, shift)]
    return case.fn(*[T.Tensor(a, requires_grad=True) for a in arrays])


def _clear_of_kinks(case: Case, direction, eps: float) -> bool:
    """True when no leaky unit flips sign on [x - eps v, x + eps v] and no
    arccos input is near the clamp."""
    centre = _graph(case)
    if T.kink_margins(centre)[1] <= ARCCOS_MARGIN:
        return False
    signs = T.leaky_signs(centre)
    for sgn in (1.0, -1.0):
        other = T.leaky_signs(_graph(case, [sgn * eps * v for v in direction]))
        if any(not np.array_equal(a, b) for a, b in zip(signs, other)):
            return False
    return True


def _gradients(case: Case) -> list[np.ndarray]:
    leaves = [T.Tensor(np.array(x, np.float64), requires_grad=True) for x in case.inputs]
    T.backward(case.fn(*leaves))
    return [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]


def _all_coordinates(case: Case):
    # stepping every coordinate at once bounds what any single coordinate sees
    return [np.ones_like(np.asarray(x, np.float64)) for x in case.inputs]


def run_case(make_case: Callable[[np.random.Generator], Case], g: np.random.Generator) -> float:
    """Draw points until one clears every kink, then gradcheck there.

    Primitive ops are differenced per coordinate. Composite functions are
    checked along random unit directions instead, since many of their
    per-coordinate gradients sit below the resolution of a central difference.
    """
    for _ in range(MAX_DRAWS):
        case = _scalarize(make_case(g), g)
        if not case.composite:
            if _clear_of_kinks(case, _all_coordinates(case), EPS):
                return T.gradcheck(case.fn, case.inputs, EPS)
            continue
        grads = _gradients(case)
        gnorm = np.sqrt(sum(float(np.sum(a * a)) for a in grads))
        dirs = []
        while len(dirs) < N_DIRECTIONS:
            v = [g.standard_normal(np.shape(x)) for x in case.inputs]
            norm = np.sqrt(sum(float(np.sum(a * a)) for a in v))
            v = [a / norm for a in v]
            if abs(sum(float(np.sum(a * b)) for a, b in zip(grads, v))) >= MIN_DIRECTIONAL_FRACTION * gnorm:
                dirs.append(v)
        if all(_clear_of_kinks(case, v, EPS) for v in dirs):
            return max(T.gradcheck_directional(case.fn, case.inputs, v, EPS) for v in dirs)
    raise RuntimeError("could not draw a point away from non-differentiable loci")


def _away_from_zero(g, shape, margin=0.05):
    x = g.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _small_redirector(mode: str, g) -> R.RedirectorParams:
    world = small_world()
    params = R.init_redirector(mode, world.K, world.D, seed=int(g.integers(2**31)))
    for name, t in params.tensors.items():
        if name.endswith("fc1/w"):
            t.data = (0.3 * g.standard_normal(t.shape)).astype(np.float32)
        if name == "weights":
            t.data = g.uniform(0.2, 1.0, t.shape).astype(np.float32)
    return params


def _with_params(params: R.RedirectorParams, leaves) -> R.RedirectorParams:
    names = sorted(params.tensors)
    return R.RedirectorParams(params.mode, params.K, params.D, dict(zip(names, leaves)))


def _param_arrays(params: R.RedirectorParams):
    return [params.tensors[n].data for n in sorted(params.tensors)]


def _cond(g, shape, r=0.6):
    return g.uniform(-r, r, shape + (2,))


# op checks: name -> callable(rng) -> Case

def check_matmul(g):
    return Case(lambda a, b: T.matmul(a, b), [g.standard_normal((4, 4)), g.standard_normal((4, 4))])


def check_add(g):
    return Case(lambda a, b: T.add(a, b), [g.standard_normal((3, 4)), g.standard_normal((4,))])


def check_sub(g):
    return Case(lambda a, b: T.sub(a, b), [g.standard_normal((3, 4)), g.standard_normal((3, 1))])


def check_mul(g):
    return Case(lambda a, b: T.mul(a, b), [g.standard_normal((3, 4)), g.standard_normal((3, 4))])


def check_div(g):
    return Case(lambda a, b: T.div(a, b), [g.standard_normal((3, 4)), g.uniform(0.5, 2.0, (3, 4))])


def check_scale(g):
    s = float(g.standard_normal())
    return Case(lambda a: T.scale(a, s), [g.standard_normal((5,))])


def check_leaky_relu(g):
    return Case(T.leaky_relu, [_away_from_zero(g, (6,))])


def check_tanh(g):
    return Case(T.tanh, [g.standard_normal((6,))])


def check_sin(g):
    return Case(T.sin, [g.standard_normal((6,))])


def check_cos(g):
    return Case(T.cos, [g.standard_normal((6,))])


def check_arccos(g):
    return Case(T.arccos, [g.uniform(-0.99, 0.99, (6,))])


def check_norm(g):
    return Case(lambda a: T.norm(a, axis=-1), [g.standard_normal((3, 4))])


def check_distance_norm(g):
    return Case(lambda a: T.distance_norm(a, axis=-1), [g.standard_normal((3, 4))])


def check_mean(g):
    return Case(lambda a: T.mean(a, axis=0), [g.standard_normal((3, 4))])


def check_sum(g):
    return Case(lambda a: T.sum_(a, axis=1, keepdims=True), [g.standard_normal((3, 4))])


def check_concat(g):
    return Case(lambda a, b: T.concat([a, b], axis=1), [g.standard_normal((2, 3)), g.standard_normal((2, 2))])


def check_slice(g):
    return Case(lambda a: a[1:, ::2], [g.standard_normal((3, 5))])


def check_reshape(g):
    return Case(lambda a: T.reshape(a, (6, 2)), [g.standard_normal((3, 4))])


def check_swapaxes(g):
    return Case(lambda a: T.swapaxes(a, 0, 1), [g.standard_normal((3, 4))])


def check_rotate(g):
    return Case(T.rotate, [g.standard_normal((2, 3, 3)), g.standard_normal((2, 3, 16))])


def check_conv2d(g):
    return Case(T.conv2d, [g.standard_normal((2, 2, 5, 5)), g.standard_normal((3, 2, 3, 3))])


def check_rotation_from_condition(g):
    return Case(G.rotation_from_condition, [_cond(g, (3,), 1.2)])


def check_condition_to_vector(g):
    return Case(G.condition_to_vector, [_cond(g, (3,), 1.2)])


def check_angular_distance(g):
    while True:
        u, v = g.standard_normal((2, 4, 3))
        cos = np.sum(u * v, -1) / np.linalg.norm(u, axis=-1) / np.linalg.norm(v, axis=-1)
        if np.all(np.abs(cos) < 1 - 1e-3):
            return Case(G.angular_distance, [u, v])


def check_render(g):
    w = small_world()
    return Case(lambda z: W.render(w, z), [g.standard_normal((2, w.K, w.D))])


def check_estimate(g):
    w = small_world()
    est = W.init_estimator(w, "train", seed=int(g.integers(2**31)))
    names = sorted(est)
    img = g.uniform(-1, 1, (2, w.n_pixels))
    return Case(lambda x, *p: W.estimate(dict(zip(names, p)), x), [img] + [est[n].data for n in names])


def check_identity_features(g):
    w = small_world()
    return Case(lambda x: W.identity_features(w, x), [g.uniform(-1, 1, (2, w.n_pixels))])


def check_perceptual_features(g):
    w = small_world()
    return Case(lambda x: W.perceptual_features(w, x), [g.uniform(-1, 1, (2, w.n_pixels))])


def check_project(g):
    params = _small_redirector("layerwise", g)
    x = g.standard_normal((params.K, 2, params.D))
    return Case(lambda x, *p: T.concat([T.reshape(o, (-1,)) for o in R.project(_with_params(params, p), x)], 0),
                  [x] + _param_arrays(params))


def check_normalize_embedding(g):
    return Case(R.normalize_embedding, [g.standard_normal((2, 3, 16)), _cond(g, (2,))])


def check_redirect_embedding(g):
    return Case(R.redirect_embedding, [g.standard_normal((2, 3, 16)), _cond(g, (2,))])


def check_deproject(g):
    params = _small_redirector("layerwise", g)
    emb = g.standard_normal((params.K, 2, 2, 3, 16))
    return Case(lambda e, *p: R.deproject(_with_params(params, p), e), [emb] + _param_arrays(params))


def check_edit_flat(g):
    w = small_world()
    params = _small_redirector("flat", g)
    f = g.standard_normal((2, w.K, w.D))
    return Case(lambda f, c, *p: R.edit(_with_params(params, p), f, c).latent,
                  [f, _cond(g, (2, 2))] + _param_arrays(params))


def check_edit_layerwise(g):
    w = small_world()
    params = _small_redirector("layerwise", g)
    f = g.standard_normal((2, w.K, w.D))
    return Case(lambda f, c, *p: R.edit(_with_params(params, p), f, c).latent,
                  [f, _cond(g, (2, 2))] + _param_arrays(params))


def check_vecgan_edit(g):
    w = small_world()
    dirs = R.orthonormal_directions(4, w.K * w.D, seed=int(g.integers(2**31)))
    net = R.init_scale_net(seed=int(g.integers(2**31)))
    names = sorted(net)
    return Case(lambda f, d, *p: R.vecgan_edit(f, R.scale_net(dict(zip(names, p)), d), dirs),
                  [g.standard_normal((2, w.K, w.D)), g.standard_normal((2, 4))] + [net[n].data for n in names])


def check_loss_rec(g):
    w = small_world()
    return Case(L.loss_rec, [g.uniform(-1, 1, (2, w.n_pixels)), g.uniform(-1, 1, (2, w.n_pixels))])


def check_loss_perc(g):
    w = small_world()
    return Case(lambda a, b: L.loss_perc(w, a, b),
                  [g.uniform(-1, 1, (2, w.n_pixels)), g.uniform(-1, 1, (2, w.n_pixels))])


def check_loss_att(g):
    w = small_world()
    est = W.init_estimator(w, "train", seed=int(g.integers(2**31)))
    target = g.uniform(-1, 1, (2, w.n_pixels))
    # only the prediction path carries gradient; the target is a constant
    return Case(lambda a: L.loss_att(est, a, target), [g.uniform(-1, 1, (2, w.n_pixels))])


def check_loss_id(g):
    w = small_world()
    src = g.uniform(-1, 1, (2, w.n_pixels))
    return Case(lambda a: L.loss_id(w, a, src), [g.uniform(-1, 1, (2, w.n_pixels))])


def check_loss_label(g):
    return Case(L.loss_label, [_cond(g, (3, 2)), _cond(g, (3, 2))])


def check_loss_embed(g):
    return Case(L.loss_embed, [g.standard_normal((3, 2, 3, 16))])


def check_loss_layerweights(g):
    errs = g.uniform(0.01, 0.5, (2, 6))
    return Case(lambda p: L.loss_layerweights(p, errs), [g.uniform(0.05, 1.0, (2, 6))])


def check_loss_total(g):
    lw = L.LossWeights()

    def fn(a, b, c):
        total, _ = L.loss_total({"rec": T.sum_(T.mul(a, a)), "lab": T.sum_(T.tanh(b)), "prob": T.sum_(T.sin(c))}, lw)
        return total

    return Case(fn, [g.standard_normal(3), g.standard_normal(3), g.standard_normal(3)])


# checks whose tiny per-coordinate gradients need a wider difference step
COMPOSITE = {"render", "estimate", "identity_features", "perceptual_features", "project", "deproject",
             "edit_flat", "edit_layerwise", "vecgan_edit", "loss_perc", "loss_att", "loss_id", "loss_embed"}

CHECKS: dict[str, Callable[[np.random.Generator], Case]] = {
    name[len("check_"):]: fn for name, fn in sorted(globals().items()) if name.startswith("check_") and callable(fn)
}


def run_checks(n_points: int = 1, seed: int = 0, names=None) -> dict[str, float]:
    """Worst relative error per check over ``n_points`` random points."""
    from . import rng

    out = {}
    for name in names or CHECKS:
        g = rng.stream(seed, f"gradcheck-{name}")
        make = CHECKS[name]
        if name in COMPOSITE:
            make = (lambda m: lambda g: m(g)._replace(composite=True))(make)
        out[name] = max(run_case(make, g) for _ in range(n_points))
    return out
