"""Two-layer MLP feature extractor, linear classifier head and domain discriminator.

Forward passes return a cache that the matching ``*_backward`` function
consumes.  :func:`backward` assembles the full composite-loss gradient for one
source/target batch pair, with the gradient-reversal layer on the path from
the discriminator back into the extractor.
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses as L
from .stats import SeededRng, sigmoid

NORM_KINDS = ("layer", "batch", "none")
NORM_EPS = 1e-5
BN_MOMENTUM = 0.1
CHECKPOINT_MAGIC = b"HIPDA-CKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ExtractorParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    g1: np.ndarray | None = None
    s1: np.ndarray | None = None
    g2: np.ndarray | None = None
    s2: np.ndarray | None = None
    norm: str = "none"
    dropout: float = 0.0

    @property
    def d(self) -> int:
        return self.W1.shape[0]

    @property
    def h(self) -> int:
        return self.W1.shape[1]

    @property
    def p(self) -> int:
        return self.W2.shape[1]


@dataclass
class ClassifierParams:
    w: np.ndarray  # (p,)
    b: np.ndarray  # (1,)


@dataclass
class DiscriminatorParams:
    layers: list[tuple[np.ndarray, np.ndarray]]


@dataclass
class BatchNormState:
    mean1: np.ndarray
    var1: np.ndarray
    mean2: np.ndarray
    var2: np.ndarray
    momentum: float = BN_MOMENTUM


@dataclass
class ModelParams:
    extractor: ExtractorParams
    classifier: ClassifierParams
    discriminator: DiscriminatorParams
    bn: BatchNormState | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name, in a fixed order.  Values alias the model."""
        e = self.extractor
        out = {"g.W1": e.W1, "g.b1": e.b1}
        if e.norm != "none":
            out.update({"g.g1": e.g1, "g.s1": e.s1})
        out.update({"g.W2": e.W2, "g.b2": e.b2})
        if e.norm != "none":
            out.update({"g.g2": e.g2, "g.s2": e.s2})
        out.update({"c.w": self.classifier.w, "c.b": self.classifier.b})
        for i, (W, b) in enumerate(self.discriminator.layers):
            out[f"d.W{i + 1}"] = W
            out[f"d.b{i + 1}"] = b
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays plus batch-norm running statistics."""
        out = dict(self.arrays())
        if self.bn is not None:
            out.update({"bn.mean1": self.bn.mean1, "bn.var1": self.bn.var1,
                        "bn.mean2": self.bn.mean2, "bn.var2": self.bn.var2})
        return out

    def copy(self) -> "ModelParams":
        e = self.extractor
        cp = lambda a: None if a is None else a.copy()  # noqa: E731
        ext = ExtractorParams(e.W1.copy(), e.b1.copy(), e.W2.copy(), e.b2.copy(),
                              cp(e.g1), cp(e.s1), cp(e.g2), cp(e.s2), e.norm, e.dropout)
        cls = ClassifierParams(self.classifier.w.copy(), self.classifier.b.copy())
        disc = DiscriminatorParams([(W.copy(), b.copy()) for W, b in self.discriminator.layers])
        bn = None if self.bn is None else replace(
            self.bn, mean1=self.bn.mean1.copy(), var1=self.bn.var1.copy(),
            mean2=self.bn.mean2.copy(), var2=self.bn.var2.copy())
        return ModelParams(ext, cls, disc, bn)

    def digest(self) -> str:
        """SHA-256 over the serialized checkpoint bytes."""
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()


def _uniform(rng: SeededRng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_params(seed: int, d: int = 12, h: int = 256, p: int | None = None,
                norm: str = "layer", dropout: float = 0.1,
                disc_hidden: int | None = None) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit norm scales.

    ``p`` defaults to ``h`` and the discriminator hidden width defaults to ``p``.
    Each parameter group draws from its own named stream.
    """
    p = h if p is None else p
    if h < 1 or p < 1 or d < 1:
        raise ValueError("d, h and p must be >= 1")
    if norm not in NORM_KINDS:
        raise ValueError(f"norm must be one of {NORM_KINDS}, got {norm!r}")
    if not 0.0 <= dropout < 1.0:
        raise ValueError("dropout must lie in [0, 1)")
    root = SeededRng(seed, ("init",))
    rg, rc, rd = root.child("extractor"), root.child("classifier"), root.child("discriminator")

    has_norm = norm != "none"
    ext = ExtractorParams(
        W1=_uniform(rg, d, (d, h)), b1=np.zeros(h),
        W2=_uniform(rg, h, (h, p)), b2=np.zeros(p),
        g1=np.ones(h) if has_norm else None, s1=np.zeros(h) if has_norm else None,
        g2=np.ones(p) if has_norm else None, s2=np.zeros(p) if has_norm else None,
        norm=norm, dropout=float(dropout),
    )
    cls = ClassifierParams(w=_uniform(rc, p, (p,)), b=np.zeros(1))
    dh = p if disc_hidden is None else disc_hidden
    disc = DiscriminatorParams([
        (_uniform(rd, p, (p, dh)), np.zeros(dh)),
        (_uniform(rd, dh, (dh, 1)), np.zeros(1)),
    ])
    bn = None
    if norm == "batch":
        bn = BatchNormState(np.zeros(h), np.ones(h), np.zeros(p), np.ones(p))
    return ModelParams(ext, cls, disc, bn)


# ---------------------------------------------------------------------------
# normalization


def _norm_forward(z, gamma, beta, kind, mode, running=None, momentum=BN_MOMENTUM):
    """Returns (out, cache, new_running).  ``running`` is (mean, var) for batch norm."""
    if kind == "none":
        return z, None, running
    if kind == "layer":
        mu = z.mean(axis=1, keepdims=True)
        var = z.var(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = (z - mu) * inv
        return xhat * gamma + beta, ("layer", xhat, inv, gamma), running
    # batch norm
    if mode == "train":
        n = z.shape[0]
        if n < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2 rows")
        mu = z.mean(axis=0)
        var = z.var(axis=0)
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = (z - mu) * inv
        rmean, rvar = running
        new_running = ((1 - momentum) * rmean + momentum * mu,
                       (1 - momentum) * rvar + momentum * var * n / (n - 1))
        return xhat * gamma + beta, ("batch", xhat, inv, gamma), new_running
    rmean, rvar = running
    inv = 1.0 / np.sqrt(rvar + NORM_EPS)
    xhat = (z - rmean) * inv
    return xhat * gamma + beta, ("batch-eval", xhat, inv, gamma), running


def _norm_backward(dout, cache):
    """Returns (dz, dgamma, dbeta)."""
    if cache is None:
        return dout, None, None
    kind, xhat, inv, gamma = cache
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dx = dout * gamma
    if kind == "layer":
        m = xhat.shape[1]
        dz = inv / m * (m * dx - dx.sum(axis=1, keepdims=True)
                        - xhat * (dx * xhat).sum(axis=1, keepdims=True))
    elif kind == "batch":
        m = xhat.shape[0]
        dz = inv / m * (m * dx - dx.sum(axis=0) - xhat * (dx * xhat).sum(axis=0))
    else:
        dz = dx * inv
    return dz, dgamma, dbeta


# ---------------------------------------------------------------------------
# forward / backward pieces


@dataclass
class ExtractorCache:
    X: np.ndarray
    z1: np.ndarray
    n1_cache: tuple | None
    n1: np.ndarray
    mask: np.ndarray | None
    a1d: np.ndarray
    n2_cache: tuple | None


def extract(params: ExtractorParams, X, mode: str = "eval", rng: SeededRng | None = None,
            bn: BatchNormState | None = None, return_cache: bool = False):
    """Embed rows of ``X``: H = Norm2(Dropout(ReLU(Norm1(X W1 + b1))) W2 + b2).

    In train mode, dropout (inverted) uses a mask drawn from ``rng``; with no
    ``rng`` dropout is skipped.  Batch-norm running statistics are never
    mutated here: when ``return_cache`` is set the updated state is returned
    as the third element of ``(H, cache, new_bn)``.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.d:
        raise ValueError(f"expected input with {params.d} columns, got shape {X.shape}")
    kind = params.norm
    if kind == "batch" and bn is None:
        raise ValueError("batch norm requires a BatchNormState")
    r1 = None if bn is None else (bn.mean1, bn.var1)
    r2 = None if bn is None else (bn.mean2, bn.var2)
    mom = BN_MOMENTUM if bn is None else bn.momentum

    z1 = X @ params.W1 + params.b1
    n1, c1, r1 = _norm_forward(z1, params.g1, params.s1, kind, mode, r1, mom)
    a1 = np.maximum(n1, 0.0)
    mask = None
    if mode == "train" and params.dropout > 0.0 and rng is not None:
        keep = 1.0 - params.dropout
        mask = (rng.random(a1.shape) < keep) / keep
        a1d = a1 * mask
    else:
        a1d = a1
    z2 = a1d @ params.W2 + params.b2
    H, c2, r2 = _norm_forward(z2, params.g2, params.s2, kind, mode, r2, mom)
    if not return_cache:
        return H
    new_bn = bn
    if kind == "batch" and mode == "train":
        new_bn = BatchNormState(r1[0], r1[1], r2[0], r2[1], mom)
    return H, ExtractorCache(X, z1, c1, n1, mask, a1d, c2), new_bn


def extract_backward(params: ExtractorParams, cache: ExtractorCache, dH) -> dict[str, np.ndarray]:
    dz2, dg2, ds2 = _norm_backward(dH, cache.n2_cache)
    grads = {"g.W2": cache.a1d.T @ dz2, "g.b2": dz2.sum(axis=0)}
    da1 = dz2 @ params.W2.T
    if cache.mask is not None:
        da1 = da1 * cache.mask
    dn1 = da1 * (cache.n1 > 0)
    dz1, dg1, ds1 = _norm_backward(dn1, cache.n1_cache)
    grads["g.W1"] = cache.X.T @ dz1
    grads["g.b1"] = dz1.sum(axis=0)
    if params.norm != "none":
        grads.update({"g.g1": dg1, "g.s1": ds1, "g.g2": dg2, "g.s2": ds2})
    return grads


def classify_logits(params: ClassifierParams, H) -> np.ndarray:
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[1] != params.w.shape[0]:
        raise ValueError(f"expected embeddings with {params.w.shape[0]} columns")
    return H @ params.w + params.b[0]


def classify(params: ClassifierParams, H) -> np.ndarray:
    """sigmoid(w.h + b) per row."""
    return sigmoid(classify_logits(params, H))


def _disc_forward(params: DiscriminatorParams, H):
    acts = [np.asarray(H, dtype=float)]
    pre = []
    a = acts[0]
    if a.ndim != 2 or a.shape[1] != params.layers[0][0].shape[0]:
        raise ValueError("embedding width does not match the discriminator input")
    last = len(params.layers) - 1
    for i, (W, b) in enumerate(params.layers):
        z = a @ W + b
        pre.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        acts.append(a)
    return a[:, 0], (acts, pre)


def discriminate(params: DiscriminatorParams, H) -> np.ndarray:
    """Predicted probability that each embedding came from the target domain."""
    return sigmoid(_disc_forward(params, H)[0])


def _disc_backward(params: DiscriminatorParams, cache, dlogit):
    acts, pre = cache
    grads = {}
    g = dlogit[:, None]
    for i in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[i]
        if i != len(params.layers) - 1:
            g = g * (pre[i] > 0)
        grads[f"d.W{i + 1}"] = acts[i].T @ g
        grads[f"d.b{i + 1}"] = g.sum(axis=0)
        g = g @ W.T
    return grads, g


def grl_forward(x):
    """Gradient reversal layer, forward pass: identity."""
    return x


def grl_backward(upstream_grad, lam: float):
    """Gradient reversal layer, backward pass: multiply by -lambda."""
    if lam < 0:
        raise ValueError("GRL coefficient must be nonnegative")
    return -lam * np.asarray(upstream_grad, dtype=float)


# ---------------------------------------------------------------------------
# composite backward


@dataclass
class StepResult:
    report: L.LossReport
    grads: dict[str, np.ndarray]
    bn: BatchNormState | None
    H_s: np.ndarray = field(repr=False)
    H_t: np.ndarray | None = field(default=None, repr=False)


def backward(model: ModelParams, X_s, y_s, X_t, weights: L.LossWeights, flags: L.Flags,
             grl_coeff: float = 1.0, rng: SeededRng | None = None, mode: str = "train") -> StepResult:
    """Composite loss and its gradients for one source batch and one target batch.

    Gradients returned for θ_g and θ_c are those of
    ``task + λ_MMD·MMD² + λ_CORAL·CORAL`` plus the domain term routed through
    the gradient-reversal layer (scaled by ``-grl_coeff``); θ_d receives the
    plain gradient of ``λ_GRL·L_dom``.  With no active flags, ``X_t`` is not
    touched at all.
    """
    ext = model.extractor
    X_s = np.asarray(X_s, dtype=float)
    y_s = np.asarray(y_s, dtype=float)
    if X_s.shape[0] != y_s.shape[0]:
        raise ValueError("source features and outcomes differ in length")
    rng_s = None if rng is None else rng.child("src")
    H_s, cache_s, bn = extract(ext, X_s, mode, rng_s, model.bn, return_cache=True)
    logits = classify_logits(model.classifier, H_s)
    yhat = sigmoid(logits)
    task = L.weighted_bce(yhat, y_s, weights.omega)
    dlogit = L.weighted_bce_grad(yhat, y_s, weights.omega) * yhat * (1.0 - yhat)

    grads = {name: np.zeros_like(a) for name, a in model.arrays().items()}
    grads["c.w"] = H_s.T @ dlogit
    grads["c.b"] = np.array([dlogit.sum()])
    dH_s = np.outer(dlogit, model.classifier.w)

    report = L.LossReport(task=task)
    H_t = None
    if flags.any:
        if X_t is None:
            raise ValueError("alignment flags require a target batch")
        rng_t = None if rng is None else rng.child("tgt")
        bn_in = bn if bn is not None else model.bn
        H_t, cache_t, bn = extract(ext, np.asarray(X_t, dtype=float), mode, rng_t, bn_in, return_cache=True)
        dH_t = np.zeros_like(H_t)
        if flags.mmd:
            v, gs, gt = L.mmd2_multiscale_grad(H_s, H_t)
            report.mmd2 = v
            dH_s += weights.lambda_mmd * gs
            dH_t += weights.lambda_mmd * gt
        if flags.coral:
            v, gs, gt = L.coral_grad(H_s, H_t, weights.q)
            report.coral = v
            dH_s += weights.lambda_coral * gs
            dH_t += weights.lambda_coral * gt
        if flags.dann:
            H_all = grl_forward(np.vstack([H_s, H_t]))
            d = np.concatenate([np.zeros(len(H_s)), np.ones(len(H_t))])
            dlog, dcache = _disc_forward(model.discriminator, H_all)
            dhat = sigmoid(dlog)
            report.dom = L.domain_bce(dhat, d)
            g_dlog = weights.lambda_grl * L.domain_bce_grad(dhat, d) * dhat * (1.0 - dhat)
            dgrads, dH_all = _disc_backward(model.discriminator, dcache, g_dlog)
            grads.update(dgrads)
            dH_all = grl_backward(dH_all, grl_coeff)
            dH_s += dH_all[: len(H_s)]
            dH_t += dH_all[len(H_s):]
        for k, v in extract_backward(ext, cache_t, dH_t).items():
            grads[k] += v

    for k, v in extract_backward(ext, cache_s, dH_s).items():
        grads[k] += v
    report.total = L.composite(report.task, report.mmd2, report.coral, report.dom, weights, flags)
    return StepResult(report, grads, bn, H_s, H_t)


def predict_proba(model: ModelParams, X) -> np.ndarray:
    """Eval-mode fracture probabilities."""
    return classify(model.classifier, extract(model.extractor, X, "eval", bn=model.bn))


def embed(model: ModelParams, X) -> np.ndarray:
    return extract(model.extractor, X, "eval", bn=model.bn)


# ---------------------------------------------------------------------------
# checkpoint format
#
# line 1: b"HIPDA-CKPT <version>\n"
# line 2: JSON header (sorted keys) describing every array: dtype '<f8', shape,
#         byte offset into the payload
# rest:   concatenated little-endian float64 payload


def checkpoint_bytes(model: ModelParams, meta: dict | None = None) -> bytes:
    e = model.extractor
    arrays = model.state_arrays()
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "dtype": "<f8",
        "norm": e.norm,
        "dropout": e.dropout,
        "dims": {"d": e.d, "h": e.h, "p": e.p,
                 "disc": [list(W.shape) for W, _ in model.discriminator.layers]},
        "bn_momentum": None if model.bn is None else model.bn.momentum,
        "arrays": entries,
        "meta": meta or {},
    }
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + b" " + str(CHECKPOINT_VERSION).encode() + b"\n")
    buf.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n")
    for c in chunks:
        buf.write(c)
    return buf.getvalue()


def save_checkpoint(path, model: ModelParams, meta: dict | None = None) -> str:
    data = checkpoint_bytes(model, meta)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    data = Path(path).read_bytes()
    return parse_checkpoint(data)


def parse_checkpoint(data: bytes) -> tuple[ModelParams, dict]:
    first, rest = data.split(b"\n", 1)
    magic, _, version = first.partition(b" ")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    if int(version) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version.decode()}")
    header_line, payload = rest.split(b"\n", 1)
    header = json.loads(header_line)
    arrays = {}
    for ent in header["arrays"]:
        raw = payload[ent["offset"]: ent["offset"] + ent["nbytes"]]
        arrays[ent["name"]] = np.frombuffer(raw, dtype="<f8").reshape(ent["shape"]).astype(float)
    norm = header["norm"]
    ext = ExtractorParams(
        arrays["g.W1"], arrays["g.b1"], arrays["g.W2"], arrays["g.b2"],
        arrays.get("g.g1"), arrays.get("g.s1"), arrays.get("g.g2"), arrays.get("g.s2"),
        norm=norm, dropout=header["dropout"],
    )
    cls = ClassifierParams(arrays["c.w"], arrays["c.b"])
    n_disc = len(header["dims"]["disc"])
    disc = DiscriminatorParams([(arrays[f"d.W{i + 1}"], arrays[f"d.b{i + 1}"]) for i in range(n_disc)])
    bn = None
    if "bn.mean1" in arrays:
        bn = BatchNormState(arrays["bn.mean1"], arrays["bn.var1"], arrays["bn.mean2"],
                            arrays["bn.var2"], header["bn_momentum"])
    return ModelParams(ext, cls, disc, bn), header["meta"]

