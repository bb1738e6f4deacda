"""Training objectives over a batch of (real, generated, level) pairs.

All losses are differentiable in the representative vectors. ``loss_and_grad``
is the single entry point used by training; the small scalar functions are the
public, directly testable forms.

Distribution objectives (kl, onehot, labelsmooth) compare a target over levels
with ``softmax(h / tau)``. Protocol objectives (pcc, rd, regression) act on a
scalar prediction ``N * sigmoid(h_0 / tau)`` read from the first token pair.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError, LevelOutOfRange, ZeroNorm, ZeroVariance
from .levelpdf import DEFAULT_AMPLITUDE, LevelGrid, PdfFamily, canonical_family, target_table

KINDS = ("kl", "pcc", "rd", "regression", "onehot", "labelsmooth")
SCALAR_KINDS = ("pcc", "rd", "regression")

# CLI objective names
NAMES = ("kl-gauss", "kl-linear", "kl-exp", "pcc", "rd", "regression", "onehot", "labelsmooth")


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str
    family: str | None = None
    amplitude: float | None = None
    epsilon: float = 0.0
    tau: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective {self.kind!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0 <= self.epsilon < 1:
            raise ValueError("epsilon must lie in [0, 1)")
        if self.kind == "kl":
            fam = canonical_family(self.family or "exponential")
            object.__setattr__(self, "family", fam)
            if self.amplitude is None:
                object.__setattr__(self, "amplitude", DEFAULT_AMPLITUDE[fam])

    @classmethod
    def from_name(cls, name: str, amplitude: float | None = None,
                  epsilon: float = 0.5, tau: float = 0.1) -> "ObjectiveSpec":
        if name.startswith("kl-"):
            return cls("kl", family=name[3:], amplitude=amplitude, tau=tau)
        if name == "onehot":
            return cls("onehot", tau=tau)
        if name == "labelsmooth":
            return cls("labelsmooth", epsilon=epsilon, tau=tau)
        if name in SCALAR_KINDS:
            return cls(name, tau=tau)
        raise ValueError(f"unknown objective {name!r}; expected one of {NAMES}")

    @property
    def name(self) -> str:
        if self.kind == "kl":
            return "kl-" + {"gaussian": "gauss", "linear": "linear", "exponential": "exp"}[self.family]
        return self.kind

    @property
    def scalar_head(self) -> bool:
        return self.kind in SCALAR_KINDS

    def to_dict(self) -> dict:
        return {"kind": self.kind, "family": self.family, "amplitude": self.amplitude,
                "epsilon": self.epsilon, "tau": self.tau}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveSpec":
        return cls(**{k: d.get(k) for k in ("kind", "family", "amplitude")},
                   epsilon=d.get("epsilon", 0.0), tau=d.get("tau", 0.1))


# ----------------------------------------------------------------------------
# scalar forms


def kl_loss(g, h_norm) -> float:
    g = np.asarray(g, dtype=np.float64)
    q = np.asarray(h_norm, dtype=np.float64)
    if np.any(q <= 0):
        raise DomainError("predicted distribution must be strictly positive")
    mask = g > 0
    return float(np.sum(g[mask] * np.log(g[mask] / q[mask])))


def smoothed_targets(levels, N: int, epsilon: float) -> np.ndarray:
    levels = np.asarray(levels, dtype=int)
    t = np.full((levels.size, N + 1), epsilon / (N + 1))
    t[np.arange(levels.size), levels] += 1.0 - epsilon
    return t


def classification_objective(h_norm, s_l, epsilon: float = 0.0) -> float:
    """Cross-entropy of ``h_norm`` against a (smoothed) one-hot target at ``s_l``."""
    q = np.asarray(h_norm, dtype=np.float64)
    if np.any(q <= 0):
        raise DomainError("predicted distribution must be strictly positive")
    t = smoothed_targets([s_l], q.shape[-1] - 1, epsilon)[0]
    return float(-np.sum(t * np.log(q)))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    nx, ny = np.sqrt(np.sum(xc * xc)), np.sqrt(np.sum(yc * yc))
    if nx == 0 or ny == 0:
        raise ZeroVariance("PCC is undefined for a constant sequence")
    return float(np.sum(xc * yc) / (nx * ny))


def pcc_objective(s_p, s_l) -> float:
    if len(s_p) < 2:
        raise ZeroVariance("PCC needs at least two pairs")
    return 1.0 - pearson(s_p, s_l)


def _pcc_grad(s_p, s_l):
    xc = s_p - s_p.mean()
    yc = s_l - s_l.mean()
    nx, ny = np.sqrt(np.sum(xc * xc)), np.sqrt(np.sum(yc * yc))
    if len(s_p) < 2 or nx == 0 or ny == 0:
        raise ZeroVariance("PCC is undefined for a constant sequence")
    r = np.sum(xc * yc) / (nx * ny)
    # centring drops out because xc and yc both sum to zero
    dr = yc / (nx * ny) - r * xc / (nx * nx)
    return 1.0 - r, -dr


def rd_objective(s_p, s_l, N: int) -> float:
    s_p = np.asarray(s_p, dtype=np.float64)
    s_l = np.asarray(s_l, dtype=np.float64)
    _check_levels(s_l, N)
    return float(np.mean(np.abs(s_p - s_l) / np.maximum(N - s_l, s_l)))


def regression_objective(s_p, s_l) -> float:
    return float(np.mean(np.abs(np.asarray(s_p, float) - np.asarray(s_l, float))))


def _check_levels(levels, N):
    if np.any(levels < 0) or np.any(levels > N):
        raise LevelOutOfRange(f"levels must lie in [0, {N}]")


# ----------------------------------------------------------------------------
# batch loss with gradients w.r.t. the vector sets


def _cosines(vr, vg):
    nr = np.linalg.norm(vr, axis=-1)
    ng = np.linalg.norm(vg, axis=-1)
    if np.any(nr == 0) or np.any(ng == 0):
        raise ZeroNorm("zero-norm representative vector")
    h = np.einsum("bkd,bkd->bk", vr, vg) / (nr * ng)
    return h, nr, ng


def _cosine_bwd(dh, vr, vg, h, nr, ng):
    inv = 1.0 / (nr * ng)
    dvr = dh[..., None] * (vg * inv[..., None] - h[..., None] * vr / (nr * nr)[..., None])
    dvg = dh[..., None] * (vr * inv[..., None] - h[..., None] * vg / (ng * ng)[..., None])
    return dvr, dvg


def _log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


@lru_cache(maxsize=64)
def _kl_table(family: str, amplitude: float, N: int) -> np.ndarray:
    table = target_table(PdfFamily(family, amplitude), LevelGrid(N))
    table.setflags(write=False)
    return table


def targets_for(spec: ObjectiveSpec, levels, N: int) -> np.ndarray:
    """Per-pair target distributions for the distribution objectives."""
    levels = np.asarray(levels, dtype=int)
    if spec.kind == "kl":
        return _kl_table(spec.family, float(spec.amplitude), N)[levels]
    eps = spec.epsilon if spec.kind == "labelsmooth" else 0.0
    return smoothed_targets(levels, N, eps)


def scalar_prediction(h0, N: int, tau: float):
    """``N * sigmoid(h0 / tau)`` and its derivative."""
    sig = 1.0 / (1.0 + np.exp(-np.asarray(h0, dtype=np.float64) / tau))
    return N * sig, N * sig * (1.0 - sig) / tau


def loss_and_grad(vr, vg, levels, spec: ObjectiveSpec, N: int, reduction: str = "mean"):
    """Batch loss and ``(dL/dvr, dL/dvg)``.

    ``reduction`` is ``"mean"`` or ``"sum"`` over pairs; PCC is a batch
    statistic and ignores it.
    """
    vr = np.asarray(vr, dtype=np.float64)
    vg = np.asarray(vg, dtype=np.float64)
    levels = np.asarray(levels)
    if levels.ndim != 1 or len(levels) != len(vr) or len(levels) == 0:
        raise ValueError("need one level per pair and a nonempty batch")
    _check_levels(levels, N)
    B = len(levels)
    w = 1.0 / B if reduction == "mean" else 1.0
    h, nr, ng = _cosines(vr, vg)
    dh = np.zeros_like(h)

    if spec.scalar_head:
        s_p, ds = scalar_prediction(h[:, 0], N, spec.tau)
        s_l = levels.astype(np.float64)
        if spec.kind == "pcc":
            loss, dsp = _pcc_grad(s_p, s_l)
        elif spec.kind == "rd":
            denom = np.maximum(N - s_l, s_l)
            loss = w * np.sum(np.abs(s_p - s_l) / denom)
            dsp = w * np.sign(s_p - s_l) / denom
        else:
            loss = w * np.sum(np.abs(s_p - s_l))
            dsp = w * np.sign(s_p - s_l)
        dh[:, 0] = dsp * ds
    else:
        t = targets_for(spec, levels, N)
        logq = _log_softmax(h / spec.tau)
        q = np.exp(logq)
        ent = np.sum(np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0), axis=-1)
        if spec.kind == "kl":
            per = ent - np.sum(t * logq, axis=-1)
        else:
            per = -np.sum(t * logq, axis=-1)
        loss = w * np.sum(per)
        dh = w * (q - t) / spec.tau

    dvr, dvg = _cosine_bwd(dh, vr, vg, h, nr, ng)
    return float(loss), dvr, dvg
