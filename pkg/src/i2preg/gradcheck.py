"""Central finite-difference checks of every analytic loss gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import Label, TriMask, gal_loss
from .matching import (LossConfig, SimilarityMap, detection_loss, dta_loss, fine_losses, icl_loss, icl_weights,
                       soft_argmax, soft_argmax_grad)

LOSSES = ("gal", "det", "icl", "dta", "fine")
DEFAULT_TOLERANCE = 1e-4
DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class TrialResult:
    loss: str
    trial: int
    size: int
    rel_error: float
    passed: bool


def central_difference(f, x, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


# Each problem returns (x0, f, grad) with f: x -> scalar and grad: x -> analytic gradient.

def _gal_problem(rng):
    rows, cols = rng.integers(2, 9, size=2)
    x0 = rng.normal(0.0, 3.0, size=2 * rows * cols)
    labels = rng.choice([Label.POSITIVE, Label.NEGATIVE, Label.UNSUPERVISED], size=(2, rows, cols))
    masks = (TriMask(labels[0].astype(np.int8)), TriMask(labels[1].T.copy().astype(np.int8)))

    def split(x):
        return x[:rows * cols].reshape(rows, cols), x[rows * cols:].reshape(rows, cols).T

    def f(x):
        return gal_loss(*split(x), masks)[0]

    def grad(x):
        _, gi, gp = gal_loss(*split(x), masks)
        return np.concatenate([gi.ravel(), gp.T.ravel()])
    return x0, f, grad


def _det_problem(rng):
    m = int(rng.integers(1, 64))
    x0 = rng.normal(0.0, 3.0, size=m)
    y = rng.integers(0, 2, size=m)
    return x0, (lambda x: detection_loss(x, y)[0]), (lambda x: detection_loss(x, y)[1])


def _icl_problem(rng, trial):
    cfg = LossConfig(icl_mode="circle" if trial % 2 else "literal")
    n_p, n_n = rng.integers(1, 16, size=2)
    s_p = rng.uniform(-0.9, 0.9, size=n_p)
    s_n = rng.uniform(-0.9, 0.9, size=n_n)
    x0 = np.concatenate([s_p, s_n])
    # adaptive weights are held fixed at the evaluation point
    a_p, a_n, _, _ = icl_weights(s_p, s_n, cfg)

    def f(x):
        return icl_loss(x[:n_p], x[n_p:], cfg, a_p, a_n)[0]

    def grad(x):
        _, gp, gn = icl_loss(x[:n_p], x[n_p:], cfg, a_p, a_n)
        return np.concatenate([gp, gn])
    return x0, f, grad


def _dta_problem(rng):
    rows, cols = rng.integers(2, 12, size=2)
    tau = rng.uniform(0.2, 1.0)
    x0 = rng.uniform(-1.0, 1.0, size=rows * cols)
    target = rng.uniform(0, [rows - 1, cols - 1])
    # keep the target off the prediction so the distance is differentiable
    pred0 = soft_argmax(SimilarityMap(x0.reshape(rows, cols)), tau)
    if np.linalg.norm(pred0 - target) < 0.2:
        target = target + 0.5

    def f(x):
        pred = soft_argmax(SimilarityMap(x.reshape(rows, cols)), tau)
        return dta_loss(pred[None], target[None])[0]

    def grad(x):
        smap = SimilarityMap(x.reshape(rows, cols))
        pred = soft_argmax(smap, tau)
        _, g_pred = dta_loss(pred[None], target[None])
        return soft_argmax_grad(smap, tau, g_pred[0]).ravel()
    return x0, f, grad


def _fine_problem(rng):
    w = 2 * int(rng.integers(1, 5))
    kappa = int(rng.integers(1, 5))
    x0 = rng.normal(0.0, 1.0, size=kappa * w * w)
    gt = rng.uniform(0, w - 1, size=(kappa, 2))

    def maps_of(x):
        return [m for m in x.reshape(kappa, w, w)]

    def preds(maps):
        return np.array([soft_argmax(SimilarityMap(m)) for m in maps])

    def f(x):
        maps = maps_of(x)
        ce, l2, _, _ = fine_losses(maps, gt, preds(maps))
        return ce + l2

    def grad(x):
        maps = maps_of(x)
        _, _, g_maps, g_pred = fine_losses(maps, gt, preds(maps))
        out = [gm + soft_argmax_grad(SimilarityMap(m), 1.0, gp) for m, gm, gp in zip(maps, g_maps, g_pred)]
        return np.concatenate([o.ravel() for o in out])

    pred0 = preds(maps_of(x0))
    if np.min(np.linalg.norm(pred0 - gt, axis=1)) < 1e-3:
        gt = gt + 0.25
    return x0, f, grad


def make_problem(name: str, rng, trial: int):
    if name == "gal":
        return _gal_problem(rng)
    if name == "det":
        return _det_problem(rng)
    if name == "icl":
        return _icl_problem(rng, trial)
    if name == "dta":
        return _dta_problem(rng)
    if name == "fine":
        return _fine_problem(rng)
    raise ValueError(f"unknown loss {name!r}; choose from {', '.join(LOSSES)}")


def check_loss(name: str, trials: int = 100, seed: int = 0, tol: float = DEFAULT_TOLERANCE,
               eps: float = DEFAULT_EPS, sign_flip: bool = False) -> list:
    """Run ``trials`` random finite-difference checks of one loss.

    ``sign_flip`` negates the analytic gradient, a planted bug the harness
    must catch.
    """
    out = []
    for t in range(trials):
        rng = np.random.default_rng([seed, LOSSES.index(name) if name in LOSSES else 99, t])
        x0, f, grad = make_problem(name, rng, t)
        analytic = grad(x0)
        if sign_flip:
            analytic = -analytic
        err = relative_error(analytic, central_difference(f, x0, eps))
        out.append(TrialResult(name, t, int(x0.size), err, err <= tol))
    return out


def run(losses=LOSSES, trials: int = 100, seed: int = 0, tol: float = DEFAULT_TOLERANCE,
        sign_flip=()) -> list:
    results = []
    for name in losses:
        results += check_loss(name, trials, seed, tol, sign_flip=name in sign_flip)
    return results
