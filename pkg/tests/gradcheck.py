"""Central finite-difference check of the composite-loss gradients."""
import numpy as np

from hipda import losses as L
from hipda import network as N
from hipda.stats import SeededRng


def _objectives(model, Xs, ys, Xt, w, flags, grl_coeff, seed):
    """Per-parameter-group objective that the analytic gradients differentiate.

    The extractor sees task + MMD + CORAL - grl_coeff * domain (gradient
    reversal), the classifier sees the task loss and the discriminator the
    weighted domain loss.
    """
    r = N.backward(model, Xs, ys, Xt, w, flags, 0.0, SeededRng(seed)).report
    dom = w.lambda_grl * r.dom if flags.dann else 0.0
    ext = (r.task + (w.lambda_mmd * r.mmd2 if flags.mmd else 0.0)
           + (w.lambda_coral * r.coral if flags.coral else 0.0) - grl_coeff * dom)
    return {"g": ext, "c": r.task, "d": dom}


def max_relative_error(flags, norm="layer", dropout=0.3, seed=0, step=1e-5,
                       d=3, h=4, p=2, n=6):
    model = N.init_params(seed, d=d, h=h, p=p, norm=norm, dropout=dropout)
    rng = np.random.default_rng(seed + 100)
    for a in model.arrays().values():
        a[...] = rng.normal(size=a.shape) * 0.8
    Xs = rng.normal(size=(n, d))
    Xt = rng.normal(size=(n, d)) + 0.5
    ys = np.array([1.0, 0.0] * (n // 2))
    w = L.LossWeights(0.7, 0.6, 0.8, omega=3.0)
    grl_coeff = 0.37
    res = N.backward(model, Xs, ys, Xt, w, flags, grl_coeff, SeededRng(seed))
    worst = 0.0
    for name, arr in model.arrays().items():
        group = name[0]
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            hi = _objectives(model, Xs, ys, Xt, w, flags, grl_coeff, seed)[group]
            arr[idx] = old - step
            lo = _objectives(model, Xs, ys, Xt, w, flags, grl_coeff, seed)[group]
            arr[idx] = old
            fd = (hi - lo) / (2 * step)
            an = res.grads[name][idx]
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-6))
    return worst
